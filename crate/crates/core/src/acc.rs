//! Score vectors, the Attention Context Contribution (ACC) metric and the
//! quadratic fit over layers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionProbs;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::model_io::Mode;
use crate::runner::{forward_detailed, ForwardOptions};

/// Per-position contribution scores of one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Self {
        ScoreVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }
}

/// Column sums of the head-averaged probability matrix. In decoder mode each
/// entry `i` is further divided by `T - i`, the number of rows the causal mask
/// lets attend to position `i`.
pub fn score_vector(probs: &AttentionProbs, mode: Mode) -> ScoreVector {
    let t = probs.seq_len();
    let heads = probs.num_heads();
    let mut values = vec![0.0f64; t];
    for head in probs.heads() {
        for i in 0..t {
            for (acc, &p) in values.iter_mut().zip(head.row(i)) {
                *acc += p as f64;
            }
        }
    }
    let inv_heads = 1.0 / heads as f64;
    for (j, v) in values.iter_mut().enumerate() {
        *v *= inv_heads;
        if mode == Mode::Decoder {
            *v /= (t - j) as f64;
        }
    }
    ScoreVector { values }
}

/// Median of the score vector; the mean of the two central values for even
/// lengths.
pub fn acc_of_layer(sv: &ScoreVector) -> f64 {
    median(&sv.values)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty vector");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticFit {
    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }

    /// Sum of squared residuals over points `(l, y[l-1])`, `l = 1..=len`.
    pub fn residual(&self, y: &[f64]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &v)| (self.eval((i + 1) as f64) - v).powi(2))
            .sum()
    }
}

/// Per-layer ACC values and their quadratic fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccProfile {
    pub layers: usize,
    pub e_acc: Vec<f64>,
    pub fit: QuadraticFit,
    pub p_acc: Vec<f64>,
    /// Set when fewer than three layers forced a constant fit.
    #[serde(default)]
    pub degenerate_fit: bool,
}

/// Least-squares quadratic over `(l, e_acc[l-1])` for `l = 1..=L`.
///
/// With fewer than three points the fit falls back to the constant
/// `c = mean(e_acc)` and `degenerate_fit` is set.
pub fn fit_quadratic(e_acc: &[f64]) -> Result<AccProfile> {
    if e_acc.is_empty() {
        return Err(Error::Argument("cannot fit an empty ACC vector".into()));
    }
    let n = e_acc.len();
    let (fit, degenerate) = if n < 3 {
        let c = e_acc.iter().sum::<f64>() / n as f64;
        (QuadraticFit { a: 0.0, b: 0.0, c }, true)
    } else {
        (least_squares_quadratic(e_acc), false)
    };
    let p_acc = (1..=n).map(|l| fit.eval(l as f64)).collect();
    Ok(AccProfile {
        layers: n,
        e_acc: e_acc.to_vec(),
        fit,
        p_acc,
        degenerate_fit: degenerate,
    })
}

fn least_squares_quadratic(y: &[f64]) -> QuadraticFit {
    let n = y.len() as f64;
    // Centre x for conditioning: x = l - m.
    let m = (n + 1.0) / 2.0;
    let mut s = [0.0f64; 5];
    let mut r = [0.0f64; 3];
    for (i, &v) in y.iter().enumerate() {
        let x = (i + 1) as f64 - m;
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 3 {
                r[k] += p * v;
            }
            p *= x;
        }
    }
    // Normal equations in the basis (1, x, x^2).
    let mut a = [
        [s[0], s[1], s[2], r[0]],
        [s[1], s[2], s[3], r[1]],
        [s[2], s[3], s[4], r[2]],
    ];
    let [c0, c1, c2] = solve3(&mut a);
    // Back to the uncentred basis in l.
    QuadraticFit {
        a: c2,
        b: c1 - 2.0 * c2 * m,
        c: c2 * m * m - c1 * m + c0,
    }
}

/// Gaussian elimination with partial pivoting on an augmented 3x4 system.
fn solve3(a: &mut [[f64; 4]; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut v = a[row][3];
        for k in row + 1..3 {
            v -= a[row][k] * x[k];
        }
        x[row] = v / a[row][row];
    }
    x
}

/// Runs unpruned forward passes over `inputs`, averages the per-layer ACC
/// medians across samples and fits the quadratic. `mode` selects bidirectional
/// or causal attention (and the matching score normalisation).
pub fn profile_model(model: &Model, inputs: &[Vec<u32>], mode: Mode) -> Result<AccProfile> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layers = model.num_layers();
    let mut sums = vec![0.0f64; layers];
    for ids in inputs {
        let opts = ForwardOptions {
            attention_mode: Some(mode),
            record_scores: true,
            ..ForwardOptions::default()
        };
        let out = forward_detailed(model, ids, &opts)?;
        for (sum, sv) in sums.iter_mut().zip(&out.scores) {
            *sum += acc_of_layer(sv);
        }
    }
    let e_acc: Vec<f64> = sums.iter().map(|s| s / inputs.len() as f64).collect();
    fit_quadratic(&e_acc)
}

impl AccProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,e_acc,p_acc\n");
        for (l, (e, p)) in self.e_acc.iter().zip(&self.p_acc).enumerate() {
            let _ = writeln!(out, "{},{e},{p}", l + 1);
        }
        out
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: AccProfile = serde_json::from_str(&text)?;
        if profile.e_acc.len() != profile.layers || profile.p_acc.len() != profile.layers {
            return Err(Error::Argument(format!(
                "profile declares {} layers but has {} e_acc / {} p_acc values",
                profile.layers,
                profile.e_acc.len(),
                profile.p_acc.len()
            )));
        }
        Ok(profile)
    }
}
