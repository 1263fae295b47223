//! Browser demo: FLOP shares, speedup-coefficient explorer and a
//! score-vector elimination playground. Every export returns a JSON string.

use latencut::attention::{select_positions, AttentionProbs, Policy};
use latencut::cost_model::{analytic_flops, compare_speedup, FlopVariant};
use latencut::schedule::{elimination_profile, make_schedule, retention_plan, PinnedPolicy};
use latencut::tensor::{causal_softmax_rows, softmax_rows};
use latencut::{acc_of_layer, score_vector, Matrix, Mode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn to_js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

fn json(v: &impl Serialize) -> Result<String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Share {
    group: &'static str,
    flops: f64,
    share: f64,
}

/// Analytic FLOPs of one forward pass, grouped for a pie chart.
pub fn flops_table_json(layers: usize, hidden: usize, heads: usize, seq_len: usize, variant: &str) -> Result<String> {
    let variant: FlopVariant = variant.parse().map_err(|e: latencut::Error| e.to_string())?;
    let config = ModelConfig::new(layers, hidden, heads, seq_len.max(1), 30522, Mode::Encoder)
        .map_err(|e| e.to_string())?;
    let t = analytic_flops(&config, seq_len, variant);
    let s = &t.shares;
    let groups = [
        ("embedding", s.embedding),
        ("attention-self", s.attention_self),
        ("feed-forward", s.feed_forward),
        ("classifier", s.classifier),
    ];
    let rows: Vec<Share> = groups
        .iter()
        .map(|&(group, share)| Share {
            group,
            flops: share * t.total,
            share,
        })
        .collect();
    json(&rows)
}

#[derive(Serialize)]
struct ExplorerRow {
    alpha_sc: f64,
    alpha_er: Vec<f64>,
    retention: Vec<usize>,
    formula: f64,
    discrete: f64,
}

/// Schedules and predicted speedups for a fitted-ACC curve over a grid of
/// speedup coefficients. `p_acc` is a comma-separated list.
pub fn explore_schedule_json(p_acc: &str, seq_len: usize, start: f64, stop: f64, step: f64) -> Result<String> {
    let p: Vec<f64> = p_acc
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<_>>()?;
    if step.is_nan() || step <= 0.0 || stop < start || start <= 0.0 {
        return Err("need 0 < start <= stop and step > 0".into());
    }
    if seq_len == 0 {
        return Err("sequence length must be positive".into());
    }
    let profile = elimination_profile(&p).map_err(|e| e.to_string())?;
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let alpha_sc = ((start + i as f64 * step) * 1e9).round() / 1e9;
        let s = make_schedule(&profile, alpha_sc, PinnedPolicy::First).map_err(|e| e.to_string())?;
        let cmp = compare_speedup(&s.alpha_er, seq_len);
        rows.push(ExplorerRow {
            alpha_sc,
            retention: retention_plan(&s, seq_len).t,
            alpha_er: s.alpha_er,
            formula: cmp.formula,
            discrete: cmp.discrete,
        });
    }
    json(&rows)
}

#[derive(Serialize)]
struct EliminationView {
    probs: Vec<Vec<f32>>,
    scores: Vec<f64>,
    acc: f64,
    kept: Vec<usize>,
}

/// Random single-head attention over `seq_len` positions with a few "hot"
/// columns, its score vector, and the positions Sort/Eliminate keeps.
pub fn eliminate_json(seq_len: usize, keep: usize, seed: u64, causal: bool) -> Result<String> {
    if seq_len == 0 || seq_len > 64 {
        return Err("sequence length must be in 1..=64".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hot: Vec<f32> = (0..seq_len).map(|_| if rng.gen_bool(0.2) { 3.0 } else { 0.0 }).collect();
    let logits: Vec<f32> = (0..seq_len * seq_len)
        .map(|i| hot[i % seq_len] + rng.gen_range(-1.0..1.0))
        .collect();
    let logits = Matrix::from_vec(seq_len, seq_len, logits).map_err(|e| e.to_string())?;
    let (mode, probs) = if causal {
        (Mode::Decoder, causal_softmax_rows(&logits))
    } else {
        (Mode::Encoder, softmax_rows(&logits))
    };
    let rows = (0..seq_len).map(|i| probs.row(i).to_vec()).collect();
    let sv = score_vector(&AttentionProbs::new(vec![probs]).map_err(|e| e.to_string())?, mode);
    let pinned = PinnedPolicy::default_for(mode).positions(seq_len);
    let kept = select_positions(&sv, keep, &pinned, Policy::SvSort, seed).map_err(|e| e.to_string())?;
    json(&EliminationView {
        probs: rows,
        acc: acc_of_layer(&sv),
        scores: sv.values,
        kept,
    })
}

#[wasm_bindgen]
pub fn flops_table(layers: usize, hidden: usize, heads: usize, seq_len: usize, variant: &str) -> std::result::Result<String, JsValue> {
    to_js(flops_table_json(layers, hidden, heads, seq_len, variant))
}

#[wasm_bindgen]
pub fn explore_schedule(p_acc: &str, seq_len: usize, start: f64, stop: f64, step: f64) -> std::result::Result<String, JsValue> {
    to_js(explore_schedule_json(p_acc, seq_len, start, stop, step))
}

#[wasm_bindgen]
pub fn eliminate(seq_len: usize, keep: usize, seed: u64, causal: bool) -> std::result::Result<String, JsValue> {
    to_js(eliminate_json(seq_len, keep, seed, causal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn flops_shares_sum_to_one() {
        let v = parse(&flops_table_json(12, 768, 12, 512, "paper").unwrap());
        let total: f64 = v.as_array().unwrap().iter().map(|r| r["share"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(flops_table_json(12, 768, 12, 512, "bogus").is_err());
        assert!(flops_table_json(12, 770, 12, 512, "paper").is_err());
    }

    #[test]
    fn explorer_is_monotone() {
        let v = parse(&explore_schedule_json("10, 9, 8, 7, 6, 5", 256, 0.8, 1.2, 0.1).unwrap());
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 5);
        let d: Vec<f64> = rows.iter().map(|r| r["discrete"].as_f64().unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0]), "{d:?}");
        assert_eq!(rows[0]["retention"][0], 256);
        assert!(explore_schedule_json("1, x", 10, 1.0, 1.0, 0.1).is_err());
        assert!(explore_schedule_json("1, -1", 10, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn elimination_keeps_pin_and_count() {
        for causal in [false, true] {
            let v = parse(&eliminate_json(12, 5, 3, causal).unwrap());
            let kept: Vec<u64> = v["kept"].as_array().unwrap().iter().map(|k| k.as_u64().unwrap()).collect();
            assert_eq!(kept.len(), 5);
            assert!(kept.contains(&if causal { 11 } else { 0 }));
            let scores = v["scores"].as_array().unwrap();
            assert_eq!(scores.len(), 12);
        }
        assert!(eliminate_json(0, 1, 0, false).is_err());
        assert!(eliminate_json(8, 9, 0, false).is_err());
    }
}
