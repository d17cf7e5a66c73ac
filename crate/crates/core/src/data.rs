//! Dataset files, padded batches, and the synthetic conflict generator.
//!
//! A dataset file holds one JSON record per line:
//! `{"id": .., "label": .., "text": [[..]], "visual": [[..]], "audio": [[..]]}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::encoders::ModalitySample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub label: f64,
    pub text: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl From<&ModalitySample> for Record {
    fn from(s: &ModalitySample) -> Self {
        Self {
            id: s.id.clone(),
            label: s.label,
            text: rows_of(&s.text_seq),
            visual: rows_of(&s.visual_seq),
            audio: rows_of(&s.audio_seq),
        }
    }
}

impl Record {
    fn into_sample(self) -> Result<ModalitySample> {
        let id = self.id;
        let mat = |name: &str, rows: Vec<Vec<f64>>| -> Result<Tensor> {
            if rows.is_empty() {
                return Err(Error::Data(format!("sample `{id}`: empty {name} sequence")));
            }
            Tensor::from_rows(&rows).map_err(|e| Error::Data(format!("sample `{id}`: {name}: {e}")))
        };
        let sample = ModalitySample {
            text_seq: mat("text", self.text)?,
            visual_seq: mat("visual", self.visual)?,
            audio_seq: mat("audio", self.audio)?,
            label: self.label,
            id: id.clone(),
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Raw feature widths of the three modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub text: usize,
    pub visual: usize,
    pub audio: usize,
}

impl Widths {
    pub fn of(s: &ModalitySample) -> Self {
        Self {
            text: s.text_seq.cols(),
            visual: s.visual_seq.cols(),
            audio: s.audio_seq.cols(),
        }
    }
}

pub fn write_dataset(path: &Path, samples: &[ModalitySample]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &Record::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates a dataset file. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<ModalitySample>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut widths: Option<Widths> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let sample = record.into_sample().map_err(|e| parse_err(e.to_string()))?;
        let w = Widths::of(&sample);
        match widths {
            None => widths = Some(w),
            Some(first) if first != w => {
                return Err(parse_err(format!(
                    "widths (text {}, visual {}, audio {}) differ from first record (text {}, visual {}, audio {})",
                    w.text, w.visual, w.audio, first.text, first.visual, first.audio
                )));
            }
            Some(_) => {}
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(out)
}

/// The dataset a run configuration points at: generated when
/// `synthetic` is set, otherwise read from `path`.
pub fn resolve_dataset(data: &DataConfig, synth: &SynthConfig) -> Result<Vec<ModalitySample>> {
    if data.synthetic {
        return Ok(generate_synthetic(synth)?.samples);
    }
    let path = data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset: set data.path or data.synthetic=true".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    load_dataset(path)
}

/// Checks that every sample shares the widths of the first one.
pub fn common_widths(samples: &[ModalitySample]) -> Result<Widths> {
    let first = samples.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    let w = Widths::of(first);
    for s in samples {
        if Widths::of(s) != w {
            return Err(Error::Data(format!("sample `{}` has different feature widths", s.id)));
        }
    }
    Ok(w)
}

/// A sample right-padded with zero rows, with masks marking real steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSample {
    pub id: String,
    pub label: f64,
    pub text: Tensor,
    pub visual: Tensor,
    pub audio: Tensor,
    pub mask_t: Vec<bool>,
    pub mask_v: Vec<bool>,
    pub mask_a: Vec<bool>,
}

fn pad_rows(t: &Tensor, len: usize) -> (Tensor, Vec<bool>) {
    let (n, w) = (t.rows(), t.cols());
    let mut data = t.data().to_vec();
    data.resize(len * w, 0.0);
    let mask = (0..len).map(|i| i < n).collect();
    (Tensor::from_parts_unchecked(vec![len, w], data), mask)
}

impl PaddedSample {
    pub fn pad(s: &ModalitySample, len_t: usize, len_v: usize, len_a: usize) -> Result<Self> {
        if s.text_seq.rows() > len_t || s.visual_seq.rows() > len_v || s.audio_seq.rows() > len_a {
            return Err(Error::shape("pad", format!("sample `{}` longer than the padded length", s.id)));
        }
        let (text, mask_t) = pad_rows(&s.text_seq, len_t);
        let (visual, mask_v) = pad_rows(&s.visual_seq, len_v);
        let (audio, mask_a) = pad_rows(&s.audio_seq, len_a);
        Ok(Self {
            id: s.id.clone(),
            label: s.label,
            text,
            visual,
            audio,
            mask_t,
            mask_v,
            mask_a,
        })
    }

    /// The sample with no padding.
    pub fn unpadded(s: &ModalitySample) -> Self {
        Self::pad(s, s.text_seq.rows(), s.visual_seq.rows(), s.audio_seq.rows()).expect("lengths match")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<PaddedSample>,
}

impl Batch {
    /// Pads every sample to the batch maximum of each modality.
    pub fn from_samples(samples: &[&ModalitySample]) -> Result<Self> {
        let len_t = samples.iter().map(|s| s.text_seq.rows()).max().unwrap_or(0);
        let len_v = samples.iter().map(|s| s.visual_seq.rows()).max().unwrap_or(0);
        let len_a = samples.iter().map(|s| s.audio_seq.rows()).max().unwrap_or(0);
        let items = samples.iter().map(|s| PaddedSample::pad(s, len_t, len_v, len_a)).collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|p| p.label).collect()
    }
}

/// Groups samples into padded batches. With a seed the order is shuffled
/// deterministically first; without one the input order is kept.
pub fn make_batches(samples: &[ModalitySample], batch_size: usize, seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&ModalitySample> = idx.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples(&refs)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<ModalitySample>,
    pub val: Vec<ModalitySample>,
    pub test: Vec<ModalitySample>,
}

/// Shuffled train/validation/test partition. Validation and test sizes are
/// rounded down; the training split gets the remainder.
pub fn split_dataset(samples: &[ModalitySample], val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::Config("val_fraction + test_fraction must be in [0, 1)".into()));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * n as f64).floor() as usize;
    let n_test = (test_fraction * n as f64).floor() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let splits = Splits {
        test: pick(&order[..n_test]),
        val: pick(&order[n_test..n_test + n_val]),
        train: pick(&order[n_test + n_val..]),
    };
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Inclusive `[min, max]` sequence lengths.
    pub text_len: [usize; 2],
    pub visual_len: [usize; 2],
    pub audio_len: [usize; 2],
    pub text_dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Probability that one modality carries the opposite sentiment.
    pub conflict_prob: f64,
    /// Probability that the text-audio and text-visual pairs disagree.
    pub bimodal_conflict_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            text_len: [4, 8],
            visual_len: [4, 8],
            audio_len: [4, 8],
            text_dim: 32,
            visual_dim: 12,
            audio_dim: 8,
            conflict_prob: 0.3,
            bimodal_conflict_prob: 0.2,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("synth.conflict_prob", self.conflict_prob),
            ("synth.bimodal_conflict_prob", self.bimodal_conflict_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, [lo, hi]) in [
            ("synth.text_len", self.text_len),
            ("synth.visual_len", self.visual_len),
            ("synth.audio_len", self.audio_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        for (name, w) in [
            ("synth.text_dim", self.text_dim),
            ("synth.visual_dim", self.visual_dim),
            ("synth.audio_dim", self.audio_dim),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("synth.noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

/// What the generator did to one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictTag {
    /// Modality whose sentiment sign was flipped.
    pub unimodal: Option<Modality>,
    /// Partner modality that was pushed to the opposite polarity of its pair.
    pub bimodal: Option<Modality>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub samples: Vec<ModalitySample>,
    pub tags: Vec<ConflictTag>,
    /// Unit-norm sentiment code of each modality (text, visual, audio).
    pub codes: [Vec<f64>; 3],
}

fn unit_code(rng: &mut ChaCha8Rng, w: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..w).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates samples whose modalities encode a latent sentiment `s`.
///
/// Each row of modality `m` is `(s_m / 3) c_m + sigma * noise` where `c_m`
/// is a fixed unit code and `s_m` the sentiment that modality carries. By
/// default `s_m = s`. A bimodal conflict sets one of audio/visual to `-2s`,
/// so the text pair containing it averages to `-s/2` while the other pair
/// stays at `s`. A unimodal conflict then negates one modality's `s_m`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let codes = [
        unit_code(&mut rng, cfg.text_dim),
        unit_code(&mut rng, cfg.visual_dim),
        unit_code(&mut rng, cfg.audio_dim),
    ];
    let lens = [cfg.text_len, cfg.visual_len, cfg.audio_len];
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut tags = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let s: f64 = rng.random_range(-3.0..=3.0);
        let mut carried = [s, s, s];
        let mut tag = ConflictTag::default();
        if rng.random_bool(cfg.bimodal_conflict_prob) {
            let (idx, m) = if rng.random_bool(0.5) { (2, Modality::Audio) } else { (1, Modality::Visual) };
            carried[idx] = -2.0 * s;
            tag.bimodal = Some(m);
        }
        if rng.random_bool(cfg.conflict_prob) {
            let idx = rng.random_range(0..3);
            carried[idx] = -carried[idx];
            tag.unimodal = Some([Modality::Text, Modality::Visual, Modality::Audio][idx]);
        }
        let mut seqs = Vec::with_capacity(3);
        for m in 0..3 {
            let [lo, hi] = lens[m];
            let n = rng.random_range(lo..=hi);
            let code = &codes[m];
            let amp = carried[m] / 3.0;
            let mut data = Vec::with_capacity(n * code.len());
            for _ in 0..n {
                for c in code {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data.push(amp * c + cfg.noise_sigma * e);
                }
            }
            seqs.push(Tensor::matrix(n, code.len(), data)?);
        }
        let audio_seq = seqs.pop().expect("three modalities");
        let visual_seq = seqs.pop().expect("three modalities");
        let text_seq = seqs.pop().expect("three modalities");
        samples.push(ModalitySample {
            id: format!("synth-{i:06}"),
            label: s,
            text_seq,
            visual_seq,
            audio_seq,
        });
        tags.push(tag);
    }
    Ok(SynthDataset { samples, tags, codes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_samples: n,
            text_dim: 6,
            visual_dim: 4,
            audio_dim: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_dataset(&a, &generate_synthetic(&small(20)).unwrap().samples).unwrap();
        write_dataset(&b, &generate_synthetic(&small(20)).unwrap().samples).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let other = SynthConfig { seed: 1, ..small(20) };
        let c = dir.path().join("c.jsonl");
        write_dataset(&c, &generate_synthetic(&other).unwrap().samples).unwrap();
        assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }

    #[test]
    fn record_count() {
        assert_eq!(generate_synthetic(&small(500)).unwrap().samples.len(), 500);
    }

    #[test]
    fn no_conflict_means_signs_agree() {
        let cfg = SynthConfig {
            conflict_prob: 0.0,
            bimodal_conflict_prob: 0.0,
            noise_sigma: 0.0,
            ..small(200)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for s in &ds.samples {
            for (seq, code) in [(&s.text_seq, &ds.codes[0]), (&s.visual_seq, &ds.codes[1]), (&s.audio_seq, &ds.codes[2])] {
                for r in 0..seq.rows() {
                    let decoded: f64 = seq.row(r).iter().zip(code).map(|(a, b)| a * b).sum();
                    assert!((decoded * 3.0 - s.label).abs() < 1e-12);
                    assert_eq!(decoded >= 0.0, s.label >= 0.0);
                }
            }
        }
    }

    #[test]
    fn bimodal_conflict_gives_opposite_pairs() {
        let cfg = SynthConfig {
            conflict_prob: 0.0,
            bimodal_conflict_prob: 1.0,
            noise_sigma: 0.0,
            ..small(50)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let decode = |seq: &Tensor, code: &[f64]| 3.0 * seq.row(0).iter().zip(code).map(|(a, b)| a * b).sum::<f64>();
        for (s, tag) in ds.samples.iter().zip(&ds.tags) {
            let t = decode(&s.text_seq, &ds.codes[0]);
            let v = decode(&s.visual_seq, &ds.codes[1]);
            let a = decode(&s.audio_seq, &ds.codes[2]);
            assert!(tag.bimodal.is_some());
            let (ta, tv) = ((t + a) / 2.0, (t + v) / 2.0);
            assert!(ta * tv <= 1e-12, "pairs agree: {ta} {tv}");
        }
    }

    #[test]
    fn unimodal_conflict_rate_within_three_standard_errors() {
        let p = 0.3;
        let cfg = SynthConfig {
            conflict_prob: p,
            text_len: [1, 1],
            visual_len: [1, 1],
            audio_len: [1, 1],
            ..small(10_000)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let hits = ds.tags.iter().filter(|t| t.unimodal.is_some()).count() as f64;
        let n = ds.tags.len() as f64;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((hits / n - p).abs() <= 3.0 * se);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_synthetic(&SynthConfig {
            conflict_prob: 1.5,
            ..small(1)
        })
        .is_err());
        assert!(generate_synthetic(&SynthConfig { text_len: [0, 3], ..small(1) }).is_err());
        assert!(generate_synthetic(&SynthConfig { audio_len: [4, 3], ..small(1) }).is_err());
    }

    #[test]
    fn roundtrip_preserves_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_synthetic(&small(15)).unwrap();
        write_dataset(&path, &ds.samples).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds.samples);
    }

    #[test]
    fn truncated_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &generate_synthetic(&small(3)).unwrap().samples).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_and_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut samples = generate_synthetic(&small(2)).unwrap().samples;
        samples[1].label = 5.0;
        write_dataset(&path, &samples).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("label"), "{err}");

        let mut samples = generate_synthetic(&small(2)).unwrap().samples;
        samples[1].audio_seq = Tensor::zeros(&[2, 5]);
        write_dataset(&path, &samples).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn batch_of_one_has_no_padding() {
        let ds = generate_synthetic(&small(1)).unwrap();
        let b = make_batches(&ds.samples, 4, None).unwrap();
        assert_eq!(b.len(), 1);
        let p = &b[0].items[0];
        assert!(p.mask_t.iter().chain(&p.mask_v).chain(&p.mask_a).all(|m| *m));
        assert_eq!(p.text, ds.samples[0].text_seq);
    }

    #[test]
    fn lengths_three_and_five_pad_to_five() {
        let mut ds = generate_synthetic(&small(2)).unwrap().samples;
        ds[0].text_seq = Tensor::filled(&[3, 6], 1.0);
        ds[1].text_seq = Tensor::filled(&[5, 6], 2.0);
        let b = make_batches(&ds, 2, None).unwrap();
        let first = &b[0].items[0];
        assert_eq!(first.text.rows(), 5);
        assert_eq!(first.mask_t.iter().filter(|m| **m).count(), 3);
        assert!(first.text.row(3).iter().chain(first.text.row(4)).all(|v| *v == 0.0));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let ds = generate_synthetic(&small(10)).unwrap().samples;
        let ids = |b: &[Batch]| b.iter().flat_map(|x| x.items.iter().map(|p| p.id.clone())).collect::<Vec<_>>();
        let a = ids(&make_batches(&ds, 3, Some(7)).unwrap());
        assert_eq!(a, ids(&make_batches(&ds, 3, Some(7)).unwrap()));
        assert_ne!(a, ids(&make_batches(&ds, 3, None).unwrap()));
        assert!(make_batches(&ds, 0, None).is_err());
    }

    #[test]
    fn split_sizes() {
        let ds = generate_synthetic(&small(100)).unwrap().samples;
        let s = split_dataset(&ds, 0.1, 0.2, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert!(split_dataset(&ds, 0.5, 0.5, 0).is_err());
    }
}
