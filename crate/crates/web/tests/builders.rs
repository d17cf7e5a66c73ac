use mcan_web::{attention_json, split_json, synth_json};

#[test]
fn split_of_diagonal() {
    let v = split_json("[[3,0],[0,1]]", 1).unwrap();
    assert_eq!(v["k_used"], 1);
    assert_eq!(v["aligned"][0][0], 3.0);
    assert!((v["conflict_norm"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(split_json("[[1,2],[3]]", 1).is_err());
    assert!(split_json("not json", 1).is_err());
}

#[test]
fn attention_rows_are_distributions_over_real_keys() {
    let v = attention_json(r#"{"queries": 3, "keys": 4, "padded_keys": 7, "seed": 5}"#).unwrap();
    let mask = v["key_mask"].as_array().unwrap();
    assert_eq!(mask.iter().filter(|m| m.as_bool().unwrap()).count(), 4);
    let heads = v["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 2);
    for head in heads {
        for row in head.as_array().unwrap() {
            let w: Vec<f64> = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(w.len(), 7);
            assert!(w[4..].iter().all(|x| *x == 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(attention_json(r#"{"keys": 9, "padded_keys": 8}"#).is_err());
}

#[test]
fn synth_reports_carried_sentiment() {
    let v = synth_json(r#"{"n": 40, "conflict_prob": 0, "bimodal_conflict_prob": 0, "noise_sigma": 0}"#).unwrap();
    for s in v["samples"].as_array().unwrap() {
        let label = s["label"].as_f64().unwrap();
        for m in ["text", "visual", "audio"] {
            assert!((s["carried"][m].as_f64().unwrap() - label).abs() < 1e-9, "{s}");
        }
        assert!(s["unimodal"].is_null());
    }
    let flipped = synth_json(r#"{"n": 40, "conflict_prob": 1, "bimodal_conflict_prob": 0, "noise_sigma": 0}"#).unwrap();
    for s in flipped["samples"].as_array().unwrap() {
        let m = s["unimodal"].as_str().unwrap();
        let label = s["label"].as_f64().unwrap();
        assert!((s["carried"][m].as_f64().unwrap() + label).abs() < 1e-9);
    }
    assert!(synth_json(r#"{"n": 0}"#).is_err());
    assert!(synth_json(r#"{"bogus": 1}"#).is_err());
}
