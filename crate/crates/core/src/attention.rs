//! Multi-head self-attention (bidirectional and causal) and the variant that
//! sorts word-vectors by their score and eliminates the lowest-scoring ones.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acc::{score_vector, ScoreVector};
use crate::cost_model::{FlopCounter, Sublayer};
use crate::error::{Error, Result};
use crate::model::LayerWeights;
use crate::model_io::{Mode, ModelConfig};
use crate::tensor::{
    self, causal_softmax_rows, affine, gather_rows, matmul, matmul_transposed, softmax_rows,
    Matrix,
};

/// FLOPs charged per softmax element: max, subtract, exp, sum, scale.
pub(crate) const SOFTMAX_FLOPS: u64 = 5;

/// Per-head `T x T` row-stochastic probability matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs {
    heads: Vec<Matrix>,
}

impl AttentionProbs {
    pub fn new(heads: Vec<Matrix>) -> Result<Self> {
        let t = heads
            .first()
            .ok_or_else(|| Error::dim("attention_probs", "no heads"))?
            .rows();
        if heads.iter().any(|h| h.shape() != (t, t)) {
            return Err(Error::dim("attention_probs", "heads must all be T x T"));
        }
        Ok(AttentionProbs { heads })
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn seq_len(&self) -> usize {
        self.heads[0].rows()
    }

    /// Head-averaged matrix.
    pub fn mean(&self) -> Matrix {
        let t = self.seq_len();
        let mut out = Matrix::zeros(t, t);
        let inv = 1.0 / self.heads.len() as f32;
        for h in &self.heads {
            for (o, &p) in out.data_mut().iter_mut().zip(h.data()) {
                *o += p;
            }
        }
        for o in out.data_mut() {
            *o *= inv;
        }
        out
    }
}

/// How the eliminated word-vectors are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Highest scores survive; ties go to the lower position.
    #[default]
    SvSort,
    /// Seeded uniform sample of the unpinned positions.
    RandomSort,
    /// Earliest unpinned positions survive.
    TailTruncate,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv" | "sv_sort" => Ok(Policy::SvSort),
            "random" | "random_sort" => Ok(Policy::RandomSort),
            "tail" | "tail_truncate" => Ok(Policy::TailTruncate),
            other => Err(Error::Argument(format!(
                "unknown policy `{other}` (sv|random|tail)"
            ))),
        }
    }
}

/// Where in the attention block rows are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Per head, before the probability-weighted sum over values.
    MidAttention,
    /// After the heads are concatenated, before the output projection.
    #[default]
    PostConcat,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" | "mid_attention" => Ok(Placement::MidAttention),
            "post" | "post_concat" => Ok(Placement::PostConcat),
            other => Err(Error::Argument(format!(
                "unknown placement `{other}` (post|mid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EliminationOutcome {
    /// Surviving positions, ascending, relative to the layer input.
    pub kept_indices: Vec<usize>,
    pub context: Matrix,
    pub scores_used: ScoreVector,
}

/// Query, key and value projections of a `T x H` input.
pub(crate) struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub(crate) fn project(hidden: &Matrix, w: &LayerWeights, counter: &FlopCounter) -> Result<Projections> {
    let (t, h) = hidden.shape();
    let proj = |wm: &Matrix, b: &[f32]| -> Result<Matrix> {
        counter.matmul(Sublayer::AttentionSelf, t, wm.cols(), h);
        counter.elementwise(Sublayer::AttentionSelf, t * wm.rows(), 1);
        affine(hidden, wm, b)
    };
    Ok(Projections {
        q: proj(&w.q_w, &w.q_b)?,
        k: proj(&w.k_w, &w.k_b)?,
        v: proj(&w.v_w, &w.v_b)?,
    })
}

pub(crate) fn probs_from_projections(
    p: &Projections,
    heads: usize,
    mode: Mode,
    counter: &FlopCounter,
) -> Result<AttentionProbs> {
    let (t, h) = p.q.shape();
    if h % heads != 0 {
        return Err(Error::dim(
            "attention_probs",
            format!("hidden {h} not divisible by {heads} heads"),
        ));
    }
    let d = h / heads;
    let scale = (d as f32).sqrt().recip();
    let mut out = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = p.q.column_block(head * d, d);
        let kh = p.k.column_block(head * d, d);
        let logits = tensor::scale(&matmul_transposed(&qh, &kh)?, scale);
        counter.matmul(Sublayer::AttentionSelf, t, t, d);
        counter.elementwise(Sublayer::AttentionSelf, t * t, 1 + SOFTMAX_FLOPS);
        out.push(match mode {
            Mode::Encoder => softmax_rows(&logits),
            Mode::Decoder => causal_softmax_rows(&logits),
        });
    }
    AttentionProbs::new(out)
}

/// Scaled dot-product attention probabilities for every head. Decoder mode
/// masks future positions before the softmax.
pub fn attention_probs(
    hidden: &Matrix,
    weights: &LayerWeights,
    config: &ModelConfig,
    mode: Mode,
) -> Result<AttentionProbs> {
    check_hidden(hidden, config)?;
    let counter = FlopCounter::disabled();
    let p = project(hidden, weights, &counter)?;
    probs_from_projections(&p, config.num_heads, mode, &counter)
}

fn check_hidden(hidden: &Matrix, config: &ModelConfig) -> Result<()> {
    if hidden.rows() == 0 {
        return Err(Error::dim("attention", "empty sequence"));
    }
    if hidden.cols() != config.hidden_size {
        return Err(Error::dim(
            "attention",
            format!("{} columns, hidden size {}", hidden.cols(), config.hidden_size),
        ));
    }
    Ok(())
}

/// Per-head `probs * V`, concatenated. When `rows` is given only those query
/// rows are computed.
pub(crate) fn weighted_values(
    probs: &AttentionProbs,
    v: &Matrix,
    rows: Option<&[usize]>,
    counter: &FlopCounter,
) -> Result<Matrix> {
    let heads = probs.num_heads();
    let (t, h) = v.shape();
    if probs.seq_len() != t || h % heads != 0 {
        return Err(Error::dim(
            "attention_context",
            format!("{heads} heads of {}x{} probs with values {t}x{h}", probs.seq_len(), probs.seq_len()),
        ));
    }
    let d = h / heads;
    let out_rows = rows.map_or(t, <[usize]>::len);
    let mut ctx = Matrix::zeros(out_rows, h);
    for (head, p) in probs.heads().iter().enumerate() {
        let vh = v.column_block(head * d, d);
        let part = match rows {
            Some(r) => matmul(&gather_rows(p, r), &vh)?,
            None => matmul(p, &vh)?,
        };
        counter.matmul(Sublayer::AttentionSelf, out_rows, d, t);
        ctx.set_column_block(head * d, &part);
    }
    Ok(ctx)
}

/// Per-head `probs * V`, concatenated and passed through the output
/// projection `o_w` (input-major, `H x H`) and `o_b`.
pub fn attention_context(probs: &AttentionProbs, v: &Matrix, o_w: &Matrix, o_b: &[f32]) -> Result<Matrix> {
    let counter = FlopCounter::disabled();
    let ctx = weighted_values(probs, v, None, &counter)?;
    affine(&ctx, o_w, o_b)
}

fn check_selection(len: usize, keep: usize, pinned: &[usize]) -> Result<Vec<usize>> {
    let mut pins = pinned.to_vec();
    pins.sort_unstable();
    pins.dedup();
    if let Some(&p) = pins.iter().find(|&&p| p >= len) {
        return Err(Error::Elimination(format!(
            "pinned position {p} outside sequence of length {len}"
        )));
    }
    if keep == 0 || keep > len {
        return Err(Error::Elimination(format!(
            "keep {keep} outside [1, {len}]"
        )));
    }
    if keep < pins.len() {
        return Err(Error::Elimination(format!(
            "keep {keep} smaller than {} pinned positions",
            pins.len()
        )));
    }
    Ok(pins)
}

/// Positions that survive elimination, in ascending order.
///
/// Pinned positions always survive and count toward `keep`. The remaining
/// quota is filled according to `policy`.
pub fn select_positions(
    scores: &ScoreVector,
    keep: usize,
    pinned: &[usize],
    policy: Policy,
    seed: u64,
) -> Result<Vec<usize>> {
    let len = scores.len();
    let pins = check_selection(len, keep, pinned)?;
    let quota = keep - pins.len();
    let candidates: Vec<usize> = (0..len).filter(|i| pins.binary_search(i).is_err()).collect();
    let mut kept: Vec<usize> = match policy {
        Policy::SvSort => {
            let mut order = candidates;
            order.sort_by(|&a, &b| {
                scores.values[b]
                    .total_cmp(&scores.values[a])
                    .then(a.cmp(&b))
            });
            order.truncate(quota);
            order
        }
        Policy::RandomSort => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, candidates.len(), quota)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
        Policy::TailTruncate => candidates.into_iter().take(quota).collect(),
    };
    kept.extend_from_slice(&pins);
    kept.sort_unstable();
    Ok(kept)
}

/// Sorts the context rows by score, drops all but `keep`, and restores the
/// original order. The residual stream is gathered with the same indices.
#[allow(clippy::too_many_arguments)]
pub fn sort_eliminate(
    context: &Matrix,
    residual_in: &Matrix,
    scores: &ScoreVector,
    keep: usize,
    pinned: &[usize],
    policy: Policy,
    seed: u64,
) -> Result<(EliminationOutcome, Matrix)> {
    if context.rows() != scores.len() || residual_in.rows() != scores.len() {
        return Err(Error::dim(
            "sort_eliminate",
            format!(
                "context {} rows, residual {} rows, {} scores",
                context.rows(),
                residual_in.rows(),
                scores.len()
            ),
        ));
    }
    let kept = select_positions(scores, keep, pinned, policy, seed)?;
    let outcome = EliminationOutcome {
        context: gather_rows(context, &kept),
        scores_used: scores.clone(),
        kept_indices: kept,
    };
    let residual = gather_rows(residual_in, &outcome.kept_indices);
    Ok((outcome, residual))
}

/// Output of [`proposed_attention_forward`].
#[derive(Clone, Debug)]
pub struct ProposedOutput {
    /// Projected attention output for the kept rows, `T_out x H`.
    pub output: Matrix,
    /// Residual stream gathered to the kept rows.
    pub residual: Matrix,
    pub scores: ScoreVector,
    pub outcome: EliminationOutcome,
}

/// Elimination request for one attention layer.
#[derive(Clone, Debug)]
pub struct EliminationRequest<'a> {
    pub keep: usize,
    pub pinned: &'a [usize],
    pub policy: Policy,
    pub placement: Placement,
    pub seed: u64,
}

pub(crate) fn proposed_attention_counted(
    hidden: &Matrix,
    residual_in: &Matrix,
    weights: &LayerWeights,
    config: &ModelConfig,
    mode: Mode,
    req: &EliminationRequest<'_>,
    counter: &FlopCounter,
) -> Result<(ProposedOutput, AttentionProbs)> {
    check_hidden(hidden, config)?;
    if residual_in.shape() != hidden.shape() {
        return Err(Error::dim(
            "proposed_attention_forward",
            format!("residual {:?} vs hidden {:?}", residual_in.shape(), hidden.shape()),
        ));
    }
    let t = hidden.rows();
    let p = project(hidden, weights, counter)?;
    let probs = probs_from_projections(&p, config.num_heads, mode, counter)?;
    let scores = score_vector(&probs, mode);
    counter.elementwise(Sublayer::AttentionSelf, probs.num_heads() * t * t, 1);

    let (outcome, residual) = match req.placement {
        Placement::PostConcat => {
            let ctx = weighted_values(&probs, &p.v, None, counter)?;
            sort_eliminate(&ctx, residual_in, &scores, req.keep, req.pinned, req.policy, req.seed)?
        }
        Placement::MidAttention => {
            let kept = select_positions(&scores, req.keep, req.pinned, req.policy, req.seed)?;
            let ctx = weighted_values(&probs, &p.v, Some(&kept), counter)?;
            let residual = gather_rows(residual_in, &kept);
            (
                EliminationOutcome {
                    kept_indices: kept,
                    context: ctx,
                    scores_used: scores.clone(),
                },
                residual,
            )
        }
    };
    let kept = outcome.kept_indices.len();
    counter.matmul(Sublayer::AttentionOutput, kept, weights.o_w.cols(), outcome.context.cols());
    counter.elementwise(Sublayer::AttentionOutput, kept * weights.o_w.cols(), 1);
    let output = affine(&outcome.context, &weights.o_w, &weights.o_b)?;
    Ok((
        ProposedOutput {
            output,
            residual,
            scores,
            outcome,
        },
        probs,
    ))
}

/// Attention with Sort and Eliminate layers: probabilities, score vector,
/// elimination at the requested placement, then the output projection over
/// the surviving rows only.
pub fn proposed_attention_forward(
    hidden: &Matrix,
    residual_in: &Matrix,
    weights: &LayerWeights,
    config: &ModelConfig,
    mode: Mode,
    req: &EliminationRequest<'_>,
) -> Result<ProposedOutput> {
    let counter = FlopCounter::disabled();
    proposed_attention_counted(hidden, residual_in, weights, config, mode, req, &counter).map(|(o, _)| o)
}

/// Unpruned attention output (before the residual add).
pub fn baseline_attention_forward(
    hidden: &Matrix,
    weights: &LayerWeights,
    config: &ModelConfig,
    mode: Mode,
) -> Result<Matrix> {
    let probs = attention_probs(hidden, weights, config, mode)?;
    let counter = FlopCounter::disabled();
    let p = project(hidden, weights, &counter)?;
    attention_context(&probs, &p.v, &weights.o_w, &weights.o_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use proptest::prelude::*;
    use rand::Rng;

    fn config(mode: Mode) -> ModelConfig {
        ModelConfig::new(1, 8, 2, 32, 16, mode).unwrap()
    }

    fn layer(mode: Mode, seed: u64) -> (ModelConfig, LayerWeights) {
        let cfg = config(mode);
        let m = Model::random(cfg.clone(), seed).unwrap();
        (cfg, m.layers[0].clone())
    }

    fn hidden(t: usize, h: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(t, h, data).unwrap()
    }

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec())
    }

    #[test]
    fn single_token_probs() {
        for mode in [Mode::Encoder, Mode::Decoder] {
            let (cfg, w) = layer(mode, 1);
            let p = attention_probs(&hidden(1, 8, 2), &w, &cfg, mode).unwrap();
            assert_eq!(p.num_heads(), 2);
            for h in p.heads() {
                assert_eq!(h.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn zero_query_key_weights_give_uniform_rows() {
        for mode in [Mode::Encoder, Mode::Decoder] {
            let (cfg, mut w) = layer(mode, 3);
            w.q_w = Matrix::zeros(8, 8);
            w.k_w = Matrix::zeros(8, 8);
            w.q_b = vec![0.0; 8];
            w.k_b = vec![0.0; 8];
            let t = 5;
            let p = attention_probs(&hidden(t, 8, 4), &w, &cfg, mode).unwrap();
            for h in p.heads() {
                for i in 0..t {
                    let visible = if mode == Mode::Encoder { t } else { i + 1 };
                    for j in 0..t {
                        let want = if j < visible { 1.0 / visible as f32 } else { 0.0 };
                        assert!((h.get(i, j) - want).abs() < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn random_probs_are_stochastic_and_causal() {
        let (cfg, w) = layer(Mode::Decoder, 5);
        let p = attention_probs(&hidden(6, 8, 6), &w, &cfg, Mode::Decoder).unwrap();
        for h in p.heads() {
            for i in 0..6 {
                let s: f64 = h.row(i).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(h.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn identity_probs_give_projected_values() {
        let (_, w) = layer(Mode::Encoder, 7);
        let v = hidden(3, 8, 8);
        let probs = AttentionProbs::new(vec![Matrix::identity(3), Matrix::identity(3)]).unwrap();
        let got = attention_context(&probs, &v, &w.o_w, &w.o_b).unwrap();
        assert_eq!(got, affine(&v, &w.o_w, &w.o_b).unwrap());
    }

    #[test]
    fn context_matches_per_head_loop() {
        let (cfg, w) = layer(Mode::Encoder, 9);
        let x = hidden(5, 8, 10);
        let probs = attention_probs(&x, &w, &cfg, Mode::Encoder).unwrap();
        let v = affine(&x, &w.v_w, &w.v_b).unwrap();
        let got = weighted_values(&probs, &v, None, &FlopCounter::disabled()).unwrap();
        for (head, p) in probs.heads().iter().enumerate() {
            for i in 0..5 {
                for c in 0..4 {
                    let mut s = 0.0f64;
                    for j in 0..5 {
                        s += p.get(i, j) as f64 * v.get(j, head * 4 + c) as f64;
                    }
                    assert!((got.get(i, head * 4 + c) as f64 - s).abs() <= 1e-5 * s.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn keep_all_is_noop() {
        let ctx = hidden(4, 3, 11);
        let (out, res) = sort_eliminate(&ctx, &ctx, &sv(&[0.3, 0.1, 2.0, 1.6]), 4, &[], Policy::SvSort, 0).unwrap();
        assert_eq!(out.kept_indices, vec![0, 1, 2, 3]);
        assert_eq!(out.context, ctx);
        assert_eq!(res, ctx);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let kept = select_positions(&sv(&[0.1, 5.0, 5.0, 0.2]), 2, &[], Policy::SvSort, 0).unwrap();
        assert_eq!(kept, vec![1, 2]);
        let kept = select_positions(&sv(&[1.0, 1.0, 1.0, 1.0]), 2, &[], Policy::SvSort, 0).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn pin_overrides_score() {
        let kept = select_positions(&sv(&[0.1, 0.2, 9.0]), 1, &[0], Policy::SvSort, 0).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn invalid_requests_rejected() {
        let s = sv(&[1.0, 2.0, 3.0]);
        assert!(select_positions(&s, 0, &[], Policy::SvSort, 0).is_err());
        assert!(select_positions(&s, 4, &[], Policy::SvSort, 0).is_err());
        assert!(select_positions(&s, 1, &[0, 2], Policy::SvSort, 0).is_err());
        assert!(select_positions(&s, 2, &[3], Policy::SvSort, 0).is_err());
    }

    #[test]
    fn tail_truncate_and_random_respect_pins() {
        let s = sv(&[0.0; 6]);
        assert_eq!(select_positions(&s, 3, &[0], Policy::TailTruncate, 0).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_positions(&s, 3, &[5], Policy::TailTruncate, 0).unwrap(), vec![0, 1, 5]);
        let a = select_positions(&s, 3, &[5], Policy::RandomSort, 42).unwrap();
        let b = select_positions(&s, 3, &[5], Policy::RandomSort, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(&5) && a.len() == 3);
    }

    #[test]
    fn keep_all_matches_baseline_for_both_placements() {
        for mode in [Mode::Encoder, Mode::Decoder] {
            let (cfg, w) = layer(mode, 12);
            let x = hidden(6, 8, 13);
            let base = baseline_attention_forward(&x, &w, &cfg, mode).unwrap();
            for placement in [Placement::PostConcat, Placement::MidAttention] {
                for policy in [Policy::SvSort, Policy::RandomSort, Policy::TailTruncate] {
                    let req = EliminationRequest { keep: 6, pinned: &[0], policy, placement, seed: 1 };
                    let out = proposed_attention_forward(&x, &x, &w, &cfg, mode, &req).unwrap();
                    for (a, b) in out.output.data().iter().zip(base.data()) {
                        assert!((a - b).abs() <= 1e-6);
                    }
                    assert_eq!(out.residual, x);
                }
            }
        }
    }

    #[test]
    fn pruned_rows_equal_baseline_rows_at_kept_indices() {
        let (cfg, w) = layer(Mode::Encoder, 14);
        let x = hidden(4, 8, 15);
        let base = baseline_attention_forward(&x, &w, &cfg, Mode::Encoder).unwrap();
        for placement in [Placement::PostConcat, Placement::MidAttention] {
            let req = EliminationRequest { keep: 2, pinned: &[], policy: Policy::SvSort, placement, seed: 0 };
            let out = proposed_attention_forward(&x, &x, &w, &cfg, Mode::Encoder, &req).unwrap();
            // Oracle: the unique pair whose every member beats every dropped
            // position (higher score, or equal score and lower index).
            let s = &out.scores.values;
            let beats = |k: usize, d: usize| s[k] > s[d] || (s[k] == s[d] && k < d);
            let mut valid = vec![];
            for a in 0..4 {
                for b in a + 1..4 {
                    if (0..4).filter(|d| *d != a && *d != b).all(|d| beats(a, d) && beats(b, d)) {
                        valid.push((a, b));
                    }
                }
            }
            assert_eq!(valid.len(), 1);
            let best = valid[0];
            assert_eq!(out.outcome.kept_indices, vec![best.0, best.1]);
            for (r, &i) in out.outcome.kept_indices.iter().enumerate() {
                for (a, b) in out.output.row(r).iter().zip(base.row(i)) {
                    assert!((a - b).abs() <= 1e-6);
                }
                assert_eq!(out.residual.row(r), x.row(i));
            }
        }
    }

    fn brute_force(scores: &[f64], keep: usize, pinned: &[usize]) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| !pinned.contains(i))
            .map(|(i, &s)| (s, i))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = pairs[..keep - pinned.len()].iter().map(|p| p.1).collect();
        out.extend_from_slice(pinned);
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn sv_sort_matches_brute_force(
            scores in proptest::collection::vec(0u8..6, 1..=16),
            keep_frac in 0.0f64..=1.0,
            pin_first: bool,
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.5).collect();
            let t = s.len();
            let pinned: Vec<usize> = if pin_first { vec![0] } else { vec![] };
            let keep = ((keep_frac * t as f64).round() as usize).clamp(pinned.len().max(1), t);
            let got = select_positions(&ScoreVector::new(s.clone()), keep, &pinned, Policy::SvSort, 0).unwrap();
            prop_assert_eq!(&got, &brute_force(&s, keep, &pinned));
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn causal_rows_ignore_future_inputs(t in 2usize..8, j in 0usize..8, seed: u64) {
            let j = j % (t - 1);
            let (cfg, w) = layer(Mode::Decoder, 21);
            let x = hidden(t, 8, seed);
            let mut y = x.clone();
            for r in j + 1..t {
                for v in y.row_mut(r) {
                    *v += 1.5;
                }
            }
            let a = baseline_attention_forward(&x, &w, &cfg, Mode::Decoder).unwrap();
            let b = baseline_attention_forward(&y, &w, &cfg, Mode::Decoder).unwrap();
            for r in 0..=j {
                for (p, q) in a.row(r).iter().zip(b.row(r)) {
                    prop_assert!((p - q).abs() <= 1e-6);
                }
            }
        }
    }
}
