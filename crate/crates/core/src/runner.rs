//! Full encoder/decoder forward passes, with or without word-vector
//! elimination, plus wall-clock latency measurement.

use serde::{Deserialize, Serialize};

use crate::acc::{score_vector, ScoreVector};
use crate::attention::{
    probs_from_projections, project, proposed_attention_counted, weighted_values,
    EliminationRequest, Placement, Policy,
};
use crate::cost_model::{estimate_speedup, processed_words, FlopCounter, FlopCounts, Sublayer};
use crate::error::{Error, Result};
use crate::model::{Head, LayerWeights, Model};
use crate::model_io::Mode;
use crate::schedule::{retention_plan, PinnedPolicy, PruneSchedule, RetentionPlan};
use crate::tensor::{add, gather_rows, gelu, affine, layer_norm, matmul_transposed, tanh_map, Matrix};

const LAYER_NORM_FLOPS: u64 = 7;
const GELU_FLOPS: u64 = 8;

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// `None` runs the unmodified model.
    pub schedule: Option<PruneSchedule>,
    pub policy: Policy,
    pub placement: Placement,
    /// Seed for the random-sort policy; each layer derives its own stream.
    pub seed: u64,
    pub count_flops: bool,
    /// Keep every layer's score vector (computed even without a schedule).
    pub record_scores: bool,
    /// Overrides the attention mode implied by the model config.
    pub attention_mode: Option<Mode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repeats: usize,
    pub warmup: usize,
    pub min_ns: u64,
    pub median_ns: u64,
    pub mean_ns: u64,
    pub samples_ns: Vec<u64>,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<u64>, warmup: usize) -> Self {
        let raw = samples.clone();
        samples.sort_unstable();
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            (samples[n / 2 - 1] + samples[n / 2]) / 2
        };
        LatencyStats {
            repeats: n,
            warmup,
            min_ns: samples[0],
            median_ns: median,
            mean_ns: (samples.iter().map(|&s| s as u128).sum::<u128>() / n as u128) as u64,
            samples_ns: raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub input_length: usize,
    /// Realised retained counts, `retention[0] == input_length`.
    pub retention: Vec<usize>,
    /// Original positions surviving each layer.
    pub kept_positions: Vec<Vec<usize>>,
    pub latency_ns: u64,
    pub logits: Vec<f32>,
    pub pw_per_layer: Vec<f64>,
    pub pw_total: f64,
    pub pw_baseline: f64,
    /// `pw_baseline / pw_total` over the realised counts.
    pub predicted_speedup: f64,
    /// Closed-form estimate from the schedule's rates.
    pub formula_speedup: f64,
    pub alpha_sc: Option<f64>,
    pub flops: Option<FlopCounts>,
    pub latency: Option<LatencyStats>,
    pub baseline_latency: Option<LatencyStats>,
    pub measured_speedup: Option<f64>,
}

pub struct ForwardOutput {
    pub report: RunReport,
    /// Final hidden states of the surviving rows.
    pub hidden: Matrix,
    /// Per-layer score vectors when requested or when pruning.
    pub scores: Vec<ScoreVector>,
}

#[cfg(not(target_arch = "wasm32"))]
mod clock {
    pub struct Stopwatch(std::time::Instant);

    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch(std::time::Instant::now())
        }

        pub fn elapsed_ns(&self) -> u64 {
            (self.0.elapsed().as_nanos() as u64).max(1)
        }
    }
}

#[cfg(target_arch = "wasm32")]
mod clock {
    /// `std::time::Instant` is unavailable on bare wasm32.
    pub struct Stopwatch;

    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch
        }

        pub fn elapsed_ns(&self) -> u64 {
            1
        }
    }
}

use clock::Stopwatch;

fn check_input(model: &Model, ids: &[u32]) -> Result<()> {
    let cfg = &model.config;
    if ids.is_empty() || ids.len() > cfg.max_seq {
        return Err(Error::SequenceLength {
            len: ids.len(),
            max: cfg.max_seq,
        });
    }
    if let Some((pos, &id)) = ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            pos,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn embed(model: &Model, ids: &[u32], counter: &FlopCounter) -> Result<Matrix> {
    let h = model.config.hidden_size;
    let mut x = Matrix::zeros(ids.len(), h);
    for (pos, &id) in ids.iter().enumerate() {
        let word = model.word_emb.row(id as usize);
        let place = model.pos_emb.row(pos);
        for ((o, &w), &p) in x.row_mut(pos).iter_mut().zip(word).zip(place) {
            *o = w + p;
        }
    }
    counter.elementwise(Sublayer::Embedding, ids.len() * h, 1 + LAYER_NORM_FLOPS);
    layer_norm(&x, &model.emb_ln_g, &model.emb_ln_b, model.config.layer_norm_eps)
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Residual + norm, feed-forward, residual + norm for the surviving rows.
fn finish_layer(
    attn_out: &Matrix,
    residual: &Matrix,
    w: &LayerWeights,
    eps: f32,
    counter: &FlopCounter,
) -> Result<Matrix> {
    let (t, h) = attn_out.shape();
    let inter = w.ffn_w1.cols();
    counter.elementwise(Sublayer::AttentionOutput, t * h, 1 + LAYER_NORM_FLOPS);
    let h1 = layer_norm(&add(residual, attn_out)?, &w.ln1_g, &w.ln1_b, eps)?;

    counter.matmul(Sublayer::Intermediate, t, inter, h);
    counter.elementwise(Sublayer::Intermediate, t * inter, 1 + GELU_FLOPS);
    let f = gelu(&affine(&h1, &w.ffn_w1, &w.ffn_b1)?);

    counter.matmul(Sublayer::Output, t, h, inter);
    counter.elementwise(Sublayer::Output, t * h, 2 + LAYER_NORM_FLOPS);
    let f2 = affine(&f, &w.ffn_w2, &w.ffn_b2)?;
    layer_norm(&add(&h1, &f2)?, &w.ln2_g, &w.ln2_b, eps)
}

fn baseline_attention(
    x: &Matrix,
    w: &LayerWeights,
    heads: usize,
    mode: Mode,
    record_scores: bool,
    counter: &FlopCounter,
) -> Result<(Matrix, Option<ScoreVector>)> {
    let t = x.rows();
    let p = project(x, w, counter)?;
    let probs = probs_from_projections(&p, heads, mode, counter)?;
    let scores = record_scores.then(|| score_vector(&probs, mode));
    let ctx = weighted_values(&probs, &p.v, None, counter)?;
    counter.matmul(Sublayer::AttentionOutput, t, w.o_w.cols(), ctx.cols());
    counter.elementwise(Sublayer::AttentionOutput, t * w.o_w.cols(), 1);
    Ok((affine(&ctx, &w.o_w, &w.o_b)?, scores))
}

fn head_logits(model: &Model, hidden: &Matrix, counter: &FlopCounter) -> Result<Vec<f32>> {
    let h = model.config.hidden_size;
    match &model.head {
        Head::Classifier {
            pooler_w,
            pooler_b,
            cls_w,
            cls_b,
        } => {
            let first = gather_rows(hidden, &[0]);
            counter.matmul(Sublayer::Pooler, 1, h, h);
            counter.elementwise(Sublayer::Pooler, h, 2);
            let pooled = tanh_map(&affine(&first, pooler_w, pooler_b)?);
            counter.matmul(Sublayer::Classifier, 1, cls_w.cols(), h);
            counter.elementwise(Sublayer::Classifier, cls_w.cols(), 1);
            Ok(affine(&pooled, cls_w, cls_b)?.into_data())
        }
        Head::LanguageModel { lm_head } => {
            // Next-token logits come from the last surviving position.
            let last = gather_rows(hidden, &[hidden.rows() - 1]);
            let table = lm_head.as_ref().unwrap_or(&model.word_emb);
            counter.matmul(Sublayer::Classifier, 1, table.rows(), h);
            Ok(matmul_transposed(&last, table)?.into_data())
        }
    }
}

/// Forward pass returning the report, final hidden states and score vectors.
pub fn forward_detailed(model: &Model, ids: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput> {
    check_input(model, ids)?;
    let cfg = &model.config;
    let layers = model.num_layers();
    let mode = opts.attention_mode.unwrap_or(cfg.mode);
    let t0 = ids.len();
    let plan = match &opts.schedule {
        Some(s) => {
            s.validate()?;
            if s.layers() != layers {
                return Err(Error::Schedule(format!(
                    "schedule has {} layers, model has {layers}",
                    s.layers()
                )));
            }
            retention_plan(s, t0)
        }
        None => RetentionPlan {
            t: vec![t0; layers + 1],
        },
    };
    let counter = if opts.count_flops {
        FlopCounter::new()
    } else {
        FlopCounter::disabled()
    };

    let watch = Stopwatch::start();
    let mut x = embed(model, ids, &counter)?;
    let mut positions: Vec<usize> = (0..t0).collect();
    let mut realized = vec![t0];
    let mut kept_positions = Vec::with_capacity(layers);
    let mut scores = Vec::new();

    for (l, w) in model.layers.iter().enumerate() {
        let (attn_out, residual) = match &opts.schedule {
            Some(s) => {
                let pinned = s.pinned_policy.positions(x.rows());
                let req = EliminationRequest {
                    keep: plan.t[l + 1],
                    pinned: &pinned,
                    policy: opts.policy,
                    placement: opts.placement,
                    seed: layer_seed(opts.seed, l),
                };
                let (out, _) =
                    proposed_attention_counted(&x, &x, w, cfg, mode, &req, &counter)?;
                positions = out
                    .outcome
                    .kept_indices
                    .iter()
                    .map(|&i| positions[i])
                    .collect();
                scores.push(out.scores);
                (out.output, out.residual)
            }
            None => {
                let (out, sv) =
                    baseline_attention(&x, w, cfg.num_heads, mode, opts.record_scores, &counter)?;
                scores.extend(sv);
                (out, x)
            }
        };
        x = finish_layer(&attn_out, &residual, w, cfg.layer_norm_eps, &counter)?;
        realized.push(x.rows());
        kept_positions.push(positions.clone());
    }
    debug_assert_eq!(realized, plan.t);

    let logits = head_logits(model, &x, &counter)?;
    let latency_ns = watch.elapsed_ns();

    let realized_plan = RetentionPlan { t: realized };
    let (pw_per_layer, pw_total) = processed_words(&realized_plan);
    let pw_baseline = (t0 * layers) as f64;
    let rates = opts
        .schedule
        .as_ref()
        .map_or_else(|| vec![1.0; layers], |s| s.alpha_er.clone());
    let report = RunReport {
        mode,
        input_length: t0,
        retention: realized_plan.t,
        kept_positions,
        latency_ns,
        logits,
        pw_per_layer,
        pw_total,
        pw_baseline,
        predicted_speedup: pw_baseline / pw_total,
        formula_speedup: estimate_speedup(&rates),
        alpha_sc: opts.schedule.as_ref().map(|s| s.alpha_sc),
        flops: opts.count_flops.then(|| counter.snapshot()),
        latency: None,
        baseline_latency: None,
        measured_speedup: None,
    };
    Ok(ForwardOutput {
        report,
        hidden: x,
        scores,
    })
}

/// Unmodified model: embeddings, every layer at full length, output head.
pub fn forward_baseline(model: &Model, ids: &[u32]) -> Result<RunReport> {
    forward_detailed(model, ids, &ForwardOptions::default()).map(|o| o.report)
}

/// Forward pass that eliminates word-vectors according to `schedule`.
pub fn forward_pruned(
    model: &Model,
    ids: &[u32],
    schedule: &PruneSchedule,
    policy: Policy,
    placement: Placement,
    seed: u64,
) -> Result<RunReport> {
    let opts = ForwardOptions {
        schedule: Some(schedule.clone()),
        policy,
        placement,
        seed,
        ..ForwardOptions::default()
    };
    forward_detailed(model, ids, &opts).map(|o| o.report)
}

/// Wall-clock statistics over `repeats` timed passes after `warmup`
/// discarded ones. Callers must not run other passes concurrently.
pub fn measure_latency(
    model: &Model,
    ids: &[u32],
    opts: &ForwardOptions,
    repeats: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    let inputs = [ids.to_vec()];
    let mut stats = measure_interleaved(model, &inputs, std::slice::from_ref(opts), repeats, warmup)?;
    Ok(stats.remove(0))
}

/// Times several configurations round-robin: each round runs every
/// configuration once over all `inputs`, so slow drift in machine speed
/// lands on all of them alike. One sample is the summed time of a round's
/// passes for that configuration.
pub fn measure_interleaved(
    model: &Model,
    inputs: &[Vec<u32>],
    configs: &[ForwardOptions],
    repeats: usize,
    warmup: usize,
) -> Result<Vec<LatencyStats>> {
    if repeats < 3 {
        return Err(Error::Argument(format!("repeats must be >= 3, got {repeats}")));
    }
    if warmup < 1 {
        return Err(Error::Argument("warmup must be >= 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let configs: Vec<ForwardOptions> = configs
        .iter()
        .map(|o| ForwardOptions {
            count_flops: false,
            record_scores: false,
            ..o.clone()
        })
        .collect();
    let mut samples = vec![Vec::with_capacity(repeats); configs.len()];
    for round in 0..warmup + repeats {
        for (opts, out) in configs.iter().zip(&mut samples) {
            let mut total = 0;
            for ids in inputs {
                let watch = Stopwatch::start();
                let res = forward_detailed(model, ids, opts)?;
                total += watch.elapsed_ns();
                std::hint::black_box(&res.report.logits);
            }
            if round >= warmup {
                out.push(total);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|s| LatencyStats::from_samples(s, warmup))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub baseline: LatencyStats,
    pub pruned: LatencyStats,
    /// `baseline.median_ns / pruned.median_ns`.
    pub measured_speedup: f64,
}

/// Times the unpruned and pruned model on the same input, interleaved.
pub fn compare_latency(
    model: &Model,
    ids: &[u32],
    opts: &ForwardOptions,
    repeats: usize,
    warmup: usize,
) -> Result<LatencyComparison> {
    let base_opts = ForwardOptions {
        schedule: None,
        ..opts.clone()
    };
    let inputs = [ids.to_vec()];
    let mut stats = measure_interleaved(model, &inputs, &[base_opts, opts.clone()], repeats, warmup)?;
    let pruned = stats.pop().expect("two configurations");
    let baseline = stats.pop().expect("two configurations");
    Ok(LatencyComparison {
        measured_speedup: baseline.median_ns as f64 / pruned.median_ns as f64,
        baseline,
        pruned,
    })
}

/// Schedule that keeps every word-vector, pinned per the model's mode.
pub fn noop_schedule(model: &Model) -> PruneSchedule {
    PruneSchedule::identity(model.num_layers(), PinnedPolicy::default_for(model.mode()))
}
