//! Attention sidecars and the metrics report.

use banglagan::attention::top_attended;
use banglagan::metrics::{Evaluation, CLASSIFIER_ID};
use banglagan::numerics::Tensor;
use serde_json::{json, Value};

use crate::manifest::RunManifest;

pub const TOP_K: usize = 5;

pub fn round_decimals(x: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (x * s).round() / s
}

/// `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// One JSON line per batch item: the `k` most attended words of `stage`
/// with scores rounded to 6 decimals.
pub fn attention_lines(stage: usize, alpha: &Tensor, tokens: &[Vec<String>], masks: &[Vec<bool>], k: usize) -> Vec<String> {
    (0..alpha.shape()[0])
        .map(|b| {
            let top: Vec<Value> = top_attended(alpha, b, &masks[b], k)
                .into_iter()
                .map(|(i, score)| {
                    json!({
                        "position": i,
                        "token": tokens[b].get(i).map(String::as_str).unwrap_or("<unk>"),
                        "score": round_decimals(score, 6),
                    })
                })
                .collect();
            json!({ "sample": b, "stage": stage, "top": top }).to_string()
        })
        .collect()
}

pub fn metrics_json(eval: &Evaluation, seed: u64, manifest: &RunManifest) -> Value {
    json!({
        "fid": sig6(eval.fid.fid),
        "fid_mean_term": sig6(eval.fid.mean_term),
        "fid_trace_term": sig6(eval.fid.trace_term),
        "is_mean": sig6(eval.is.mean),
        "is_std": sig6(eval.is.std),
        "n_samples": eval.n_samples,
        "splits": eval.is.splits,
        "classifier_id": CLASSIFIER_ID,
        "seed": seed,
        "manifest": manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig6(41.081234), 41.0812);
        assert_eq!(sig6(0.000123456789), 0.000123457);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(serde_json::to_string(&sig6(3.5812345)).unwrap(), "3.58123");
    }

    #[test]
    fn lines_follow_mask_and_round() {
        // one item, three positions (last is EOS), two regions
        let alpha = Tensor::new(&[1, 3, 2], vec![0.1234567, 0.2, 0.8765433, 0.8, 0.0, 0.0]).unwrap();
        let lines = attention_lines(1, &alpha, &[vec!["ক".into(), "খ".into()]], &[vec![true, true, false]], 5);
        let v: Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(v["stage"], 1);
        let top = v["top"].as_array().unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0]["token"], "খ");
        assert_eq!(top[0]["score"], 0.838272);
        assert_eq!(top[1]["score"], 0.161728);
    }
}
