//! Elimination profiles, prune schedules and retention plans.
//!
//! Layer numbers exposed in files and reports (`halted_at`) are 1-based to
//! match `l = 1..=L`; vectors are indexed from 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acc::AccProfile;
use crate::error::{Error, Result};

/// Realised elimination rates used while fine-tuning BERT-style encoders.
pub const TUNING_BAND: (f64, f64) = (0.77, 0.97);

/// Tolerance for checking `alpha_er == min(1, alpha_ep * alpha_sc)` on import.
const RATE_TOLERANCE: f64 = 1e-9;

/// Which position is exempt from elimination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PinnedPolicy {
    /// The classification token at position 0.
    First,
    /// The most recent token, read by the language-model head.
    Last,
    None,
}

impl PinnedPolicy {
    /// Pinned indices for a sequence of `len` rows.
    pub fn positions(self, len: usize) -> Vec<usize> {
        match (self, len) {
            (_, 0) | (PinnedPolicy::None, _) => vec![],
            (PinnedPolicy::First, _) => vec![0],
            (PinnedPolicy::Last, n) => vec![n - 1],
        }
    }

    pub fn default_for(mode: crate::model_io::Mode) -> Self {
        match mode {
            crate::model_io::Mode::Encoder => PinnedPolicy::First,
            crate::model_io::Mode::Decoder => PinnedPolicy::Last,
        }
    }
}

impl std::str::FromStr for PinnedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(PinnedPolicy::First),
            "last" => Ok(PinnedPolicy::Last),
            "none" => Ok(PinnedPolicy::None),
            other => Err(Error::Argument(format!(
                "unknown pinned policy `{other}` (first|last|none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationProfile {
    pub alpha_ep: Vec<f64>,
    /// 1-based layer at which elimination stopped, if it did.
    pub halted_at: Option<usize>,
}

/// `alpha_ep[l] = min(1, P[l] / P[l-1])` with `alpha_ep[1] = 1`. The first
/// layer whose raw ratio reaches 1 halts elimination for itself and every
/// later layer.
pub fn elimination_profile(p_acc: &[f64]) -> Result<EliminationProfile> {
    if p_acc.is_empty() {
        return Err(Error::Schedule("empty fitted ACC vector".into()));
    }
    if let Some((i, &v)) = p_acc.iter().enumerate().find(|(_, &v)| v.is_nan() || v <= 0.0) {
        return Err(Error::NonPositiveAcc { layer: i + 1, value: v });
    }
    let mut alpha_ep = vec![1.0; p_acc.len()];
    let mut halted_at = None;
    for l in 1..p_acc.len() {
        let ratio = p_acc[l] / p_acc[l - 1];
        if ratio >= 1.0 {
            halted_at = Some(l + 1);
            break;
        }
        alpha_ep[l] = ratio;
    }
    Ok(EliminationProfile { alpha_ep, halted_at })
}

impl EliminationProfile {
    pub fn from_acc(profile: &AccProfile) -> Result<Self> {
        elimination_profile(&profile.p_acc)
    }

    /// Constant profile, as used for closed-form speedup examples.
    pub fn constant(alpha: f64, layers: usize) -> Self {
        EliminationProfile {
            alpha_ep: vec![alpha; layers],
            halted_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub alpha_ep: Vec<f64>,
    pub alpha_sc: f64,
    pub alpha_er: Vec<f64>,
    pub halted_at: Option<usize>,
    pub pinned_policy: PinnedPolicy,
}

/// `alpha_er[l] = min(1, alpha_ep[l] * alpha_sc)`.
pub fn make_schedule(
    profile: &EliminationProfile,
    alpha_sc: f64,
    pinned_policy: PinnedPolicy,
) -> Result<PruneSchedule> {
    if !(alpha_sc > 0.0 && alpha_sc.is_finite()) {
        return Err(Error::Schedule(format!(
            "speedup coefficient must be positive, got {alpha_sc}"
        )));
    }
    check_profile(&profile.alpha_ep)?;
    let alpha_er = profile
        .alpha_ep
        .iter()
        .map(|&ep| (ep * alpha_sc).min(1.0))
        .collect();
    Ok(PruneSchedule {
        alpha_ep: profile.alpha_ep.clone(),
        alpha_sc,
        alpha_er,
        halted_at: profile.halted_at,
        pinned_policy,
    })
}

fn check_profile(alpha_ep: &[f64]) -> Result<()> {
    if alpha_ep.is_empty() {
        return Err(Error::Schedule("empty elimination profile".into()));
    }
    if let Some((i, v)) = alpha_ep
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0 && v <= 1.0))
    {
        return Err(Error::Schedule(format!(
            "alpha_ep[{}] = {v} outside (0, 1]",
            i + 1
        )));
    }
    Ok(())
}

impl PruneSchedule {
    /// Keeps every word-vector in every layer.
    pub fn identity(layers: usize, pinned_policy: PinnedPolicy) -> Self {
        PruneSchedule {
            alpha_ep: vec![1.0; layers],
            alpha_sc: 1.0,
            alpha_er: vec![1.0; layers],
            halted_at: None,
            pinned_policy,
        }
    }

    pub fn layers(&self) -> usize {
        self.alpha_er.len()
    }

    pub fn profile(&self) -> EliminationProfile {
        EliminationProfile {
            alpha_ep: self.alpha_ep.clone(),
            halted_at: self.halted_at,
        }
    }

    /// Same profile under a new speedup coefficient; no re-profiling.
    pub fn retuned(&self, alpha_sc: f64) -> Result<Self> {
        make_schedule(&self.profile(), alpha_sc, self.pinned_policy)
    }

    /// 1-based layers whose rate falls outside `[lo, hi]`.
    pub fn layers_outside(&self, (lo, hi): (f64, f64)) -> Vec<usize> {
        self.alpha_er
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < lo || r > hi)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_profile(&self.alpha_ep)?;
        if self.alpha_er.len() != self.alpha_ep.len() {
            return Err(Error::Schedule(format!(
                "{} rates for {} profile entries",
                self.alpha_er.len(),
                self.alpha_ep.len()
            )));
        }
        if !(self.alpha_sc > 0.0 && self.alpha_sc.is_finite()) {
            return Err(Error::Schedule(format!(
                "speedup coefficient must be positive, got {}",
                self.alpha_sc
            )));
        }
        for (i, (&ep, &er)) in self.alpha_ep.iter().zip(&self.alpha_er).enumerate() {
            let want = (ep * self.alpha_sc).min(1.0);
            if (er - want).abs() > RATE_TOLERANCE {
                return Err(Error::Schedule(format!(
                    "alpha_er[{}] = {er} but min(1, alpha_ep * alpha_sc) = {want}",
                    i + 1
                )));
            }
        }
        if let Some(h) = self.halted_at {
            if h == 0 || h > self.alpha_ep.len() {
                return Err(Error::Schedule(format!("halted_at {h} out of range")));
            }
            if self.alpha_ep[h - 1..].iter().any(|&v| v != 1.0) {
                return Err(Error::Schedule(format!(
                    "alpha_ep must be 1 from halted layer {h} on"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: PruneSchedule = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }
}

/// Retained word-vector counts; `t[0]` is the input length and `t[l]` the
/// count after layer `l`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub t: Vec<usize>,
}

impl RetentionPlan {
    pub fn input_len(&self) -> usize {
        self.t[0]
    }

    pub fn layers(&self) -> usize {
        self.t.len() - 1
    }

    /// Count after 1-based layer `l`.
    pub fn after(&self, l: usize) -> usize {
        self.t[l]
    }
}

/// `t[l] = max(1, floor(rate[l] * t[l-1]))`.
pub fn retention_counts(rates: &[f64], input_len: usize) -> RetentionPlan {
    let mut t = Vec::with_capacity(rates.len() + 1);
    t.push(input_len.max(1));
    for &r in rates {
        let prev = *t.last().expect("non-empty") as f64;
        t.push(((r * prev).floor() as usize).max(1));
    }
    RetentionPlan { t }
}

pub fn retention_plan(schedule: &PruneSchedule, input_len: usize) -> RetentionPlan {
    retention_counts(&schedule.alpha_er, input_len)
}
