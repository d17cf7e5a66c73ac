//! Unimodal front-ends producing `F_t`, `F_v`, `F_a`.
//!
//! Visual and acoustic streams go through a single unidirectional LSTM.
//! The text stream is either a learned projection followed by an LSTM or a
//! passthrough for features that are already at the model width.

use crate::config::{ModelConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::params::{Init, McanParams, ParamSpecs, Scope};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub id: String,
    pub label: f64,
    pub text_seq: Tensor,
    pub visual_seq: Tensor,
    pub audio_seq: Tensor,
}

impl ModalitySample {
    pub fn validate(&self) -> Result<()> {
        if !self.label.is_finite() || !(-3.0..=3.0).contains(&self.label) {
            return Err(Error::Data(format!("sample `{}`: label {} outside [-3, 3]", self.id, self.label)));
        }
        for (name, t) in [("text", &self.text_seq), ("visual", &self.visual_seq), ("audio", &self.audio_seq)] {
            let (n, w) = t.dims2()?;
            if t.shape().len() != 2 || n == 0 || w == 0 {
                return Err(Error::Data(format!("sample `{}`: empty {name} sequence", self.id)));
            }
        }
        Ok(())
    }
}

/// Encoded unimodal features with their validity masks. Masked rows are
/// exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub f_t: Tensor,
    pub f_v: Tensor,
    pub f_a: Tensor,
    pub mask_t: Vec<bool>,
    pub mask_v: Vec<bool>,
    pub mask_a: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `input×4h`, gate blocks ordered input, forget, cell, output.
    pub w_ih: Var,
    /// `h×4h`
    pub w_hh: Var,
    /// `4h`
    pub bias: Var,
}

impl LstmParams {
    pub fn declare(specs: &mut ParamSpecs, input: usize, hidden: usize) {
        specs.add("w_ih", &[input, 4 * hidden], Init::Xavier);
        specs.add("w_hh", &[hidden, 4 * hidden], Init::Xavier);
        specs.add("bias", &[4 * hidden], Init::Zeros);
    }

    pub fn bind(scope: &Scope) -> Result<Self> {
        Ok(Self {
            w_ih: scope.var("w_ih")?,
            w_hh: scope.var("w_hh")?,
            bias: scope.var("bias")?,
        })
    }
}

/// Runs an LSTM from a zero state over the rows of `x` and returns the
/// full `n×hidden` hidden sequence.
pub fn lstm_forward(g: &mut Graph, p: &LstmParams, x: Var) -> Result<Var> {
    let (n, input) = g.dims(x);
    let (w_rows, w_cols) = g.dims(p.w_ih);
    if w_rows != input {
        return Err(Error::shape("lstm", format!("input width {input}, weights expect {w_rows}")));
    }
    let hidden = w_cols / 4;
    let pre = g.matmul(x, p.w_ih)?;
    let pre = g.add_row(pre, p.bias)?;
    let mut state: Option<(Var, Var)> = None;
    let mut outputs = Vec::with_capacity(n);
    for t in 0..n {
        let mut z = g.slice_rows(pre, t, 1)?;
        if let Some((h, _)) = state {
            let rec = g.matmul(h, p.w_hh)?;
            z = g.add(z, rec)?;
        }
        let i = g.slice_cols(z, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(z, hidden, hidden)?;
        let f = g.sigmoid(f)?;
        let c_in = g.slice_cols(z, 2 * hidden, hidden)?;
        let c_in = g.tanh(c_in)?;
        let o = g.slice_cols(z, 3 * hidden, hidden)?;
        let o = g.sigmoid(o)?;
        let mut c = g.mul(i, c_in)?;
        if let Some((_, c_prev)) = state {
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        outputs.push(h);
        state = Some((h, c));
    }
    g.concat_rows(&outputs)
}

pub fn declare_encoders(specs: &mut ParamSpecs, cfg: &ModelConfig, text_dim: usize, visual_dim: usize, audio_dim: usize) {
    let d = cfg.d;
    specs.scoped("enc", |s| {
        if cfg.text_encoder == TextEncoder::Projection {
            s.scoped("text", |s| {
                s.add("proj_w", &[text_dim, d], Init::Xavier);
                s.add("proj_b", &[d], Init::Zeros);
                s.scoped("lstm", |s| LstmParams::declare(s, d, d));
            });
        }
        s.scoped("visual", |s| s.scoped("lstm", |s| LstmParams::declare(s, visual_dim, d)));
        s.scoped("audio", |s| s.scoped("lstm", |s| LstmParams::declare(s, audio_dim, d)));
    });
}

fn check_width(g: &Graph, x: Var, expected: usize, what: &str) -> Result<()> {
    let w = g.dims(x).1;
    if w != expected {
        return Err(Error::shape("encoder", format!("{what} raw width {w}, configured {expected}")));
    }
    Ok(())
}

/// Text features `F_t`; `scope` is the `enc` scope.
pub fn encode_text(g: &mut Graph, scope: &Scope, cfg: &ModelConfig, text_dim: usize, x: Var, mask: &[bool]) -> Result<Var> {
    check_width(g, x, text_dim, "text")?;
    let out = match cfg.text_encoder {
        TextEncoder::Passthrough => {
            if text_dim != cfg.d {
                return Err(Error::Config(format!(
                    "passthrough text encoder needs raw width {} to equal d = {}",
                    text_dim, cfg.d
                )));
            }
            x
        }
        TextEncoder::Projection => {
            let s = scope.child("text");
            let proj = g.matmul(x, s.var("proj_w")?)?;
            let proj = g.add_row(proj, s.var("proj_b")?)?;
            lstm_forward(g, &LstmParams::bind(&s.child("lstm"))?, proj)?
        }
    };
    g.mask_rows(out, mask)
}

/// Visual or acoustic features; `scope` is `enc.visual` or `enc.audio`.
pub fn encode_av(g: &mut Graph, scope: &Scope, raw_dim: usize, x: Var, mask: &[bool]) -> Result<Var> {
    check_width(g, x, raw_dim, "visual/audio")?;
    let out = lstm_forward(g, &LstmParams::bind(&scope.child("lstm"))?, x)?;
    g.mask_rows(out, mask)
}

/// Value-level convenience: encodes one unpadded sample.
pub fn encode_sample(params: &McanParams, cfg: &ModelConfig, dims: (usize, usize, usize), sample: &ModalitySample) -> Result<EncodedSample> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let enc = bound.scope().child("enc");
    let masks = [
        vec![true; sample.text_seq.rows()],
        vec![true; sample.visual_seq.rows()],
        vec![true; sample.audio_seq.rows()],
    ];
    let t = g.constant(&sample.text_seq)?;
    let v = g.constant(&sample.visual_seq)?;
    let a = g.constant(&sample.audio_seq)?;
    let f_t = encode_text(&mut g, &enc, cfg, dims.0, t, &masks[0])?;
    let f_v = encode_av(&mut g, &enc.child("visual"), dims.1, v, &masks[1])?;
    let f_a = encode_av(&mut g, &enc.child("audio"), dims.2, a, &masks[2])?;
    let [mask_t, mask_v, mask_a] = masks;
    Ok(EncodedSample {
        f_t: g.value(f_t),
        f_v: g.value(f_v),
        f_a: g.value(f_a),
        mask_t,
        mask_v,
        mask_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn lstm_consts(g: &mut Graph, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> (LstmParams, [Tensor; 3]) {
        let w_ih = random(input, 4 * hidden, rng);
        let w_hh = random(hidden, 4 * hidden, rng);
        let b = random(1, 4 * hidden, rng);
        let p = LstmParams {
            w_ih: g.constant(&w_ih).unwrap(),
            w_hh: g.constant(&w_hh).unwrap(),
            bias: g.constant(&b).unwrap(),
        };
        (p, [w_ih, w_hh, b])
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams {
            w_ih: g.constant(&random(3, 16, &mut rng)).unwrap(),
            w_hh: g.constant(&random(4, 16, &mut rng)).unwrap(),
            bias: g.constant(&Tensor::zeros(&[16])).unwrap(),
        };
        let x = g.constant(&Tensor::zeros(&[5, 3])).unwrap();
        let h = lstm_forward(&mut g, &p, x).unwrap();
        assert!(g.data(h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_evaluated_gates() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, [w_ih, _, b]) = lstm_consts(&mut g, 3, 2, &mut rng);
        let x = random(1, 3, &mut rng);
        let xv = g.constant(&x).unwrap();
        let h = lstm_forward(&mut g, &p, xv).unwrap();
        let hd = 2;
        let z: Vec<f64> = (0..4 * hd)
            .map(|j| (0..3).map(|i| x.get(0, i) * w_ih.get(i, j)).sum::<f64>() + b.data()[j])
            .collect();
        for k in 0..hd {
            let i = sigmoid(z[k]);
            let c_in = z[2 * hd + k].tanh();
            let o = sigmoid(z[3 * hd + k]);
            let want = o * (i * c_in).tanh();
            assert!((g.data(h)[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn output_shape_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let (p, _) = lstm_consts(&mut g, 6, 8, &mut rng);
        let x = random(7, 6, &mut rng);
        let xv = g.constant(&x).unwrap();
        let h = lstm_forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.dims(h), (7, 8));

        let mut x2 = x.clone();
        for c in 0..6 {
            x2.data_mut()[5 * 6 + c] += 3.0;
        }
        let xv2 = g.constant(&x2).unwrap();
        let h2 = lstm_forward(&mut g, &p, xv2).unwrap();
        assert_eq!(&g.data(h)[..5 * 8], &g.data(h2)[..5 * 8]);
        assert_ne!(&g.data(h)[5 * 8..], &g.data(h2)[5 * 8..]);
    }

    #[test]
    fn text_encoder_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig {
            d: 8,
            ..ModelConfig::default()
        };
        let mut specs = ParamSpecs::new();
        declare_encoders(&mut specs, &cfg, 16, 4, 4);
        let params = McanParams::init(&specs, 1);
        let sample = ModalitySample {
            id: "s".into(),
            label: 0.0,
            text_seq: random(5, 16, &mut rng),
            visual_seq: random(2, 4, &mut rng),
            audio_seq: random(3, 4, &mut rng),
        };
        let enc = encode_sample(&params, &cfg, (16, 4, 4), &sample).unwrap();
        assert_eq!(enc.f_t.shape(), &[5, 8]);
        assert_eq!(enc.f_v.shape(), &[2, 8]);
        assert_eq!(enc.f_a.shape(), &[3, 8]);
        assert!(matches!(encode_sample(&params, &cfg, (12, 4, 4), &sample), Err(Error::Shape { .. })));

        let pass = ModelConfig {
            d: 8,
            text_encoder: TextEncoder::Passthrough,
            ..ModelConfig::default()
        };
        let mut specs = ParamSpecs::new();
        declare_encoders(&mut specs, &pass, 8, 4, 4);
        assert!(specs.specs().iter().all(|s| !s.name.starts_with("enc.text")));
        let params = McanParams::init(&specs, 1);
        let mut s2 = sample.clone();
        s2.text_seq = random(1, 8, &mut rng);
        let enc = encode_sample(&params, &pass, (8, 4, 4), &s2).unwrap();
        assert_eq!(enc.f_t, s2.text_seq);
    }

    #[test]
    fn masked_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let cfg = ModelConfig {
            d: 4,
            ..ModelConfig::default()
        };
        let mut specs = ParamSpecs::new();
        declare_encoders(&mut specs, &cfg, 3, 3, 3);
        let params = McanParams::init(&specs, 2);
        let bound = params.bind(&mut g).unwrap();
        let x = g.constant(&random(4, 3, &mut rng)).unwrap();
        let out = encode_av(&mut g, &bound.scope().child("enc").child("audio"), 3, x, &[true, true, false, false]).unwrap();
        assert!(g.data(out)[8..].iter().all(|v| *v == 0.0));
        assert!(g.data(out)[..8].iter().any(|v| *v != 0.0));
    }
}
