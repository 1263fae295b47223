//! Analytic FLOP tables, processed-word-vector arithmetic, closed-form
//! speedup and an instrumented FLOP counter.
//!
//! FLOP convention: a multiply-add is two FLOPs, so an `m x k` by `k x n`
//! product costs `2mnk`. Layer normalisation counts 7 FLOPs per element.

use std::cell::Cell;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model_io::{Mode, ModelConfig};
use crate::schedule::{retention_counts, RetentionPlan};

/// Which attention-score term the analytic table uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopVariant {
    /// `6LTH^2 + 2HTL^2`, as printed in the published table.
    Paper,
    /// `6LTH^2 + 4LT^2H`: QK^T plus probs*V.
    Corrected,
}

impl std::str::FromStr for FlopVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "paper" => Ok(FlopVariant::Paper),
            "corrected" => Ok(FlopVariant::Corrected),
            other => Err(crate::Error::Argument(format!(
                "unknown variant `{other}` (paper|corrected)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Embedding,
    AttentionSelf,
    AttentionOutput,
    Intermediate,
    Output,
    Pooler,
    Classifier,
}

impl Sublayer {
    pub const ALL: [Sublayer; 7] = [
        Sublayer::Embedding,
        Sublayer::AttentionSelf,
        Sublayer::AttentionOutput,
        Sublayer::Intermediate,
        Sublayer::Output,
        Sublayer::Pooler,
        Sublayer::Classifier,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            Sublayer::AttentionSelf
                | Sublayer::AttentionOutput
                | Sublayer::Intermediate
                | Sublayer::Output
        )
    }

    fn index(self) -> usize {
        self as usize
    }

    /// `(layer, sublayer)` labels for the table.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Sublayer::Embedding => ("Embedding", "Layer-normalization"),
            Sublayer::AttentionSelf => ("Encoder", "Attention-self"),
            Sublayer::AttentionOutput => ("Encoder", "Attention-output"),
            Sublayer::Intermediate => ("Encoder", "Intermediate"),
            Sublayer::Output => ("Encoder", "Output"),
            Sublayer::Pooler => ("Classifier", "Pooler"),
            Sublayer::Classifier => ("Classifier", "Output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub layer: String,
    pub sublayer: String,
    pub flops: f64,
    pub share: f64,
}

/// Shares of the whole-model total, grouped the way the published table
/// groups them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupShares {
    pub embedding: f64,
    pub attention_self: f64,
    /// Attention-output + intermediate + output.
    pub feed_forward: f64,
    pub classifier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub variant: FlopVariant,
    pub seq_len: usize,
    pub rows: Vec<FlopRow>,
    pub total: f64,
    pub encoder_total: f64,
    pub shares: GroupShares,
    /// Both attention-self variants, for side-by-side reporting.
    pub attention_self_paper: f64,
    pub attention_self_corrected: f64,
}

impl FlopTable {
    pub fn flops(&self, sub: Sublayer) -> f64 {
        self.rows[sub.index()].flops
    }

    /// Attention-self share of encoder FLOPs.
    pub fn encoder_attention_share(&self) -> f64 {
        self.flops(Sublayer::AttentionSelf) / self.encoder_total
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,sublayer,analytic_flops,share\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.layer, r.sublayer, r.flops, r.share);
        }
        out
    }
}

/// Analytic per-sublayer FLOPs for one input of `seq_len` tokens.
///
/// Word and position embedding lookups cost nothing; the embedding row is its
/// layer normalisation. For decoder configs the classifier output row is the
/// language-model projection at one position (`2HV`).
pub fn analytic_flops(config: &ModelConfig, seq_len: usize, variant: FlopVariant) -> FlopTable {
    let t = seq_len as f64;
    let l = config.num_layers as f64;
    let h = config.hidden_size as f64;
    let i = config.intermediate_size as f64;
    let n = match config.mode {
        Mode::Encoder => config.num_labels as f64,
        Mode::Decoder => config.vocab_size as f64,
    };
    let paper_self = 6.0 * l * t * h * h + 2.0 * h * t * l * l;
    let corrected_self = 6.0 * l * t * h * h + 4.0 * l * t * t * h;
    let values = [
        7.0 * t * h,
        match variant {
            FlopVariant::Paper => paper_self,
            FlopVariant::Corrected => corrected_self,
        },
        2.0 * l * t * h * h,
        2.0 * l * t * h * i,
        2.0 * l * t * i * h,
        2.0 * h * h,
        2.0 * h * n,
    ];
    let total: f64 = values.iter().sum();
    let share = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    let rows = Sublayer::ALL
        .iter()
        .zip(values)
        .map(|(s, v)| {
            let (layer, sub) = s.labels();
            FlopRow {
                layer: layer.into(),
                sublayer: sub.into(),
                flops: v,
                share: share(v),
            }
        })
        .collect();
    FlopTable {
        variant,
        seq_len,
        rows,
        total,
        encoder_total: values[1..5].iter().sum(),
        shares: GroupShares {
            embedding: share(values[0]),
            attention_self: share(values[1]),
            feed_forward: share(values[2] + values[3] + values[4]),
            classifier: share(values[5] + values[6]),
        },
        attention_self_paper: paper_self,
        attention_self_corrected: corrected_self,
    }
}

/// `PW_l = (t[l-1] + 3 t[l]) / 4` per layer and their sum.
pub fn processed_words(plan: &RetentionPlan) -> (Vec<f64>, f64) {
    let per: Vec<f64> = plan
        .t
        .windows(2)
        .map(|w| (w[0] as f64 + 3.0 * w[1] as f64) / 4.0)
        .collect();
    let total = per.iter().sum();
    (per, total)
}

/// `sum_{i=1}^{L-1} prod_{j<=i} a_j` and `prod_{j<=L} a_j`.
fn prefix_terms(alpha: &[f64]) -> (f64, f64) {
    let mut prod = 1.0;
    let mut sum = 0.0;
    for (i, &a) in alpha.iter().enumerate() {
        prod *= a;
        if i + 1 < alpha.len() {
            sum += prod;
        }
    }
    (sum, prod)
}

/// Continuous processed-word-vector count
/// `T [1/4 + sum_{i<L} prod_{j<=i} a_j + 3/4 prod_{j<=L} a_j]`.
pub fn closed_form_pw(alpha: &[f64], seq_len: usize) -> f64 {
    let (sum, prod) = prefix_terms(alpha);
    seq_len as f64 * (0.25 + sum + 0.75 * prod)
}

/// `4L / (1 + 4 sum_{i<L} prod_{j<=i} a_j + 3 prod_{j<=L} a_j)`.
pub fn estimate_speedup(alpha: &[f64]) -> f64 {
    let (sum, prod) = prefix_terms(alpha);
    4.0 * alpha.len() as f64 / (1.0 + 4.0 * sum + 3.0 * prod)
}

/// Closed-form speedup next to the floor-and-clamp retention plan it
/// approximates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupComparison {
    pub seq_len: usize,
    pub layers: usize,
    pub formula: f64,
    pub discrete: f64,
    /// `discrete - formula`.
    pub difference: f64,
    pub closed_form_pw: f64,
    pub discrete_pw: f64,
    pub pw_baseline: f64,
    pub pw_per_layer: Vec<f64>,
    pub retention: Vec<usize>,
}

pub fn compare_speedup(rates: &[f64], seq_len: usize) -> SpeedupComparison {
    let plan = retention_counts(rates, seq_len);
    let (per, total) = processed_words(&plan);
    let baseline = (seq_len * rates.len()) as f64;
    let formula = estimate_speedup(rates);
    let discrete = baseline / total;
    SpeedupComparison {
        seq_len,
        layers: rates.len(),
        formula,
        discrete,
        difference: discrete - formula,
        closed_form_pw: closed_form_pw(rates, seq_len),
        discrete_pw: total,
        pw_baseline: baseline,
        pw_per_layer: per,
        retention: plan.t,
    }
}

/// Snapshot of an instrumented run, per sublayer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub embedding: u64,
    pub attention_self: u64,
    pub attention_output: u64,
    pub intermediate: u64,
    pub output: u64,
    pub pooler: u64,
    pub classifier: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.embedding + self.encoder() + self.pooler + self.classifier
    }

    pub fn encoder(&self) -> u64 {
        self.attention_self + self.attention_output + self.intermediate + self.output
    }

    pub fn encoder_share(&self) -> f64 {
        self.encoder() as f64 / self.total() as f64
    }
}

/// Per-forward accumulator. A disabled counter ignores every call.
#[derive(Debug)]
pub struct FlopCounter {
    enabled: bool,
    counts: [Cell<u64>; 7],
}

impl Default for FlopCounter {
    fn default() -> Self {
        FlopCounter::disabled()
    }
}

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter {
            enabled: true,
            counts: Default::default(),
        }
    }

    pub fn disabled() -> Self {
        FlopCounter {
            enabled: false,
            counts: Default::default(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn add(&self, sub: Sublayer, flops: u64) {
        if self.enabled {
            let c = &self.counts[sub.index()];
            c.set(c.get() + flops);
        }
    }

    /// `2mnk` for an `m x k` by `k x n` product.
    pub fn matmul(&self, sub: Sublayer, m: usize, n: usize, k: usize) {
        self.add(sub, 2 * (m * n * k) as u64);
    }

    /// `per_element` FLOPs for each of `elements` values.
    pub fn elementwise(&self, sub: Sublayer, elements: usize, per_element: u64) {
        self.add(sub, elements as u64 * per_element);
    }

    pub fn snapshot(&self) -> FlopCounts {
        let c = |s: Sublayer| self.counts[s.index()].get();
        FlopCounts {
            embedding: c(Sublayer::Embedding),
            attention_self: c(Sublayer::AttentionSelf),
            attention_output: c(Sublayer::AttentionOutput),
            intermediate: c(Sublayer::Intermediate),
            output: c(Sublayer::Output),
            pooler: c(Sublayer::Pooler),
            classifier: c(Sublayer::Classifier),
        }
    }
}

/// Counted total of a finished run; `None` when counting was disabled.
pub fn instrumented_count(counter: &FlopCounter) -> Option<u64> {
    counter.is_enabled().then(|| counter.snapshot().total())
}

/// Everything the `flops` command reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub table: FlopTable,
    pub pw_per_layer: Vec<f64>,
    pub pw_total: f64,
    pub pw_baseline: f64,
    pub k_speedup: f64,
    pub speedup: Option<SpeedupComparison>,
    pub instrumented: Option<FlopCounts>,
}

impl CostReport {
    /// Table plus PW figures for `rates` (all ones when `None`).
    pub fn new(config: &ModelConfig, seq_len: usize, variant: FlopVariant, rates: Option<&[f64]>) -> Self {
        let table = analytic_flops(config, seq_len, variant);
        let ones = vec![1.0; config.num_layers];
        let cmp = compare_speedup(rates.unwrap_or(&ones), seq_len);
        CostReport {
            table,
            pw_per_layer: cmp.pw_per_layer.clone(),
            pw_total: cmp.discrete_pw,
            pw_baseline: cmp.pw_baseline,
            k_speedup: cmp.discrete,
            speedup: rates.map(|_| cmp),
            instrumented: None,
        }
    }
}
