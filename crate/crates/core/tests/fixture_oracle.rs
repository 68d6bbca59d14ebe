//! Checks the evaluator and delta reconstruction against reference numbers
//! produced by an independent PyTorch/PEFT implementation on a tiny model.

use std::path::PathBuf;

use lora_compose::{
    apply_to_base, build_delta_set, compose, cosine_report, forward, load_adapter, load_checkpoint, load_dataset,
    mean_nll, ModelWeights,
};
use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn manifest() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("manifest.json")).unwrap()).unwrap()
}

fn base() -> ModelWeights {
    load_checkpoint(&fixtures().join("base.safetensors")).unwrap()
}

fn reference(key: &str) -> (f64, usize) {
    let m = manifest();
    let r = &m["reference_mean_nll"][key];
    (r["mean_nll"].as_f64().unwrap(), r["token_count"].as_u64().unwrap() as usize)
}

fn assert_rel(actual: f64, expected: f64, tol: f64, what: &str) {
    let rel = (actual - expected).abs() / expected.abs();
    assert!(rel <= tol, "{what}: {actual} vs {expected} (rel {rel:.2e})");
}

#[test]
fn probe_logits_match_reference() {
    let probe: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("probe.json")).unwrap()).unwrap();
    let tokens: Vec<u32> = probe["tokens"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap() as u32).collect();
    let expected = probe["logits"].as_array().unwrap();
    let logits = forward(&base(), &tokens).unwrap();
    let mut worst = 0.0f64;
    for (t, row) in expected.iter().enumerate() {
        for (v, e) in row.as_array().unwrap().iter().enumerate() {
            worst = worst.max((logits.get(t, v) - e.as_f64().unwrap()).abs());
        }
    }
    assert!(worst <= 1e-3, "max abs logit error {worst}");
}

#[test]
fn base_nll_matches_reference() {
    let w = base();
    for task in ["math", "medicine", "finance", "math_medicine"] {
        let data = load_dataset(&fixtures().join(format!("{task}_test.json"))).unwrap();
        let got = mean_nll(&w, &data).unwrap();
        let (nll, count) = reference(&format!("base/{task}_test"));
        assert_eq!(got.token_count, count);
        assert_rel(got.mean_nll, nll, 1e-4, task);
    }
}

#[test]
fn merged_adapter_nll_matches_reference() {
    let w = base();
    for task in ["math", "medicine", "finance", "math_medicine"] {
        let bundle = load_adapter(&fixtures().join(format!("{task}.safetensors")), task).unwrap();
        let set = build_delta_set(&bundle).unwrap();
        let model = apply_to_base(&w, &compose(&[(&set, 1.0)]).unwrap()).unwrap();
        let data = load_dataset(&fixtures().join(format!("{task}_test.json"))).unwrap();
        let got = mean_nll(&model, &data).unwrap();
        let (nll, count) = reference(&format!("{task}/{task}_test"));
        assert_eq!(got.token_count, count);
        assert_rel(got.mean_nll, nll, 1e-4, task);
    }
}

#[test]
fn adapters_reduce_in_domain_loss() {
    let w = base();
    let data = load_dataset(&fixtures().join("math_test.json")).unwrap();
    let base_nll = mean_nll(&w, &data).unwrap().mean_nll;
    let bundle = load_adapter(&fixtures().join("math.safetensors"), "math").unwrap();
    let set = build_delta_set(&bundle).unwrap();
    let tuned = mean_nll(&apply_to_base(&w, &compose(&[(&set, 1.0)]).unwrap()).unwrap(), &data).unwrap();
    assert!(tuned.mean_nll < base_nll);
}

#[test]
fn trained_adapter_similarity_is_well_formed() {
    let load = |n: &str| build_delta_set(&load_adapter(&fixtures().join(format!("{n}.safetensors")), n).unwrap()).unwrap();
    let (a, b) = (load("math"), load("medicine"));
    let report = cosine_report(&a, &b).unwrap();
    assert_eq!(report.rows.len(), 2 * 3);
    assert!(report.rows.iter().all(|r| (-1.0..=1.0).contains(&r.cosine)));
    assert!((0.0..=1.0).contains(&report.rms));
    let self_report = cosine_report(&a, &a).unwrap();
    assert!((self_report.rms - 1.0).abs() < 1e-12);
}

#[test]
fn unlearning_restores_base_logits() {
    let w = base();
    let set = build_delta_set(&load_adapter(&fixtures().join("finance.safetensors"), "finance").unwrap()).unwrap();
    let round_trip = apply_to_base(&w, &compose(&[(&set, 1.0), (&set, -1.0)]).unwrap()).unwrap();
    let tokens = [1u32, 50, 100, 150, 200, 255];
    let a = forward(&w, &tokens).unwrap();
    let b = forward(&round_trip, &tokens).unwrap();
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() <= 1e-9));
}

#[test]
fn merged_vs_summed_report_is_consistent() {
    use lora_compose::similarity::percent_change;
    let w = base();
    let load = |n: &str| build_delta_set(&load_adapter(&fixtures().join(format!("{n}.safetensors")), n).unwrap()).unwrap();
    let (math, med, merged) = (load("math"), load("medicine"), load("math_medicine"));
    let data = load_dataset(&fixtures().join("math_medicine_test.json")).unwrap();

    let trained = mean_nll(&apply_to_base(&w, &compose(&[(&merged, 1.0)]).unwrap()).unwrap(), &data).unwrap();
    let summed_set = compose(&[(&math, 1.0), (&med, 1.0)]).unwrap();
    assert_eq!(summed_set.level, 2);
    let summed = mean_nll(&apply_to_base(&w, &summed_set).unwrap(), &data).unwrap();
    let rms = cosine_report(&math, &med).unwrap().rms;
    let change = percent_change(trained.perplexity, summed.perplexity).unwrap();

    for v in [trained.mean_nll, trained.perplexity, summed.mean_nll, summed.perplexity, rms, change] {
        assert!(v.is_finite());
    }
    assert_eq!(trained.token_count, summed.token_count);
    assert!((trained.perplexity - trained.mean_nll.exp()).abs() <= 1e-9 * trained.perplexity);
    let direct = 100.0 * (summed.mean_nll.exp() - trained.mean_nll.exp()) / trained.mean_nll.exp();
    assert!((change - direct).abs() < 1e-9);
    let (ref_nll, _) = reference("math_medicine/math_medicine_test");
    assert!((trained.mean_nll - ref_nll).abs() / ref_nll <= 1e-4);
}
