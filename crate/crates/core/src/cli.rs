//! Command-line surface: `gen`, `flops`, `acc`, `schedule`, `run`, `sweep`.
//!
//! Every command checks its flags before reading or writing files. All
//! randomness (model generation, the random-sort policy) comes from `--seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::acc::{profile_model, AccProfile};
use crate::attention::{Placement, Policy};
use crate::cost_model::{analytic_flops, CostReport, FlopVariant};
use crate::error::{Error, Result};
use crate::inputs::read_inputs;
use crate::model::Model;
use crate::model_io::{self, generate_random_model, load_model, save_model, Mode, ModelConfig};
use crate::runner::{compare_latency, forward_detailed, measure_interleaved, ForwardOptions, LatencyStats, RunReport};
use crate::schedule::{
    make_schedule, retention_plan, EliminationProfile, PinnedPolicy, PruneSchedule, TUNING_BAND,
};

#[derive(Debug, Parser)]
#[command(name = "latencut", version, about = "Latency-adjustable transformer inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialised LATX model.
    Gen(GenArgs),
    /// Analytic FLOP table and processed-word-vector speedup.
    Flops(FlopsArgs),
    /// Profile per-layer ACC on a model and fit the quadratic.
    Acc(AccArgs),
    /// Turn an ACC profile and speedup coefficient into a prune schedule.
    Schedule(ScheduleArgs),
    /// Run pruned inference, optionally timing it against the baseline.
    Run(RunArgs),
    /// Re-tune the speedup coefficient over a grid without re-profiling.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Model config JSON; BERT-base shape when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Config JSON or LATX model (only the header is read).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long, default_value = "paper")]
    pub variant: FlopVariant,
    /// Constant elimination profile for the speedup comparison.
    #[arg(long, conflicts_with = "schedule")]
    pub alpha_ep: Option<f64>,
    /// Schedule whose rates drive the speedup comparison.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Also run one unpruned forward on a random model and count FLOPs.
    #[arg(long)]
    pub instrument: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AccArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Causal attention with per-column normalisation of the score vector.
    #[arg(long)]
    pub causal: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV path; defaults to `--out` with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub alpha_sc: f64,
    #[arg(long, default_value = "first")]
    pub pinned: PinnedPolicy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    #[arg(long, default_value = "sv")]
    pub policy: Policy,
    #[arg(long, default_value = "post")]
    pub placement: Placement,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Keep-everything schedule when omitted.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[command(flatten)]
    pub exec: ExecArgs,
    /// Time baseline and pruned passes.
    #[arg(long)]
    pub measure: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Append-style CSV row in the sweep format.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long, required_unless_present = "schedule", conflicts_with = "schedule")]
    pub profile: Option<PathBuf>,
    /// Use this schedule's profile and pinning instead of an ACC profile.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// `start:stop:step`, endpoint inclusive.
    #[arg(long, default_value = "0.85:1.2:0.05")]
    pub alpha_sc_range: String,
    /// Defaults to `first` for encoders and `last` for decoders.
    #[arg(long)]
    pub pinned: Option<PinnedPolicy>,
    #[command(flatten)]
    pub exec: ExecArgs,
    /// Skip wall-clock timing; the measured columns are left empty.
    #[arg(long)]
    pub no_measure: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn main_with_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Argument(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let text = match cli.command {
        Command::Gen(a) => cmd_gen(&a)?,
        Command::Flops(a) => cmd_flops(&a)?,
        Command::Acc(a) => cmd_acc(&a)?,
        Command::Schedule(a) => cmd_schedule(&a)?,
        Command::Run(a) => cmd_run(&a)?,
        Command::Sweep(a) => cmd_sweep(&a)?,
    };
    print!("{text}");
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Reads a config from JSON, or from the header of a LATX file.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(model_io::MAGIC) {
        if bytes.len() < 16 {
            return Err(Error::Truncated("incomplete preamble".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Truncated("header exceeds file".into()))?;
        #[derive(serde::Deserialize)]
        struct Head {
            config: ModelConfig,
        }
        let head: Head = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
        return Ok(head.config);
    }
    Ok(serde_json::from_slice(&bytes)?)
}

fn load(path: &Path) -> Result<Model> {
    let (config, store) = load_model(path)?;
    Model::from_store(config, store)
}

pub fn cmd_gen(a: &GenArgs) -> Result<String> {
    let config = match &a.config {
        Some(p) => ModelConfig::from_json_file(p)?,
        None => ModelConfig::bert_base(),
    };
    let store = generate_random_model(&config, a.seed)?;
    save_model(&config, &store, &a.out)?;
    Ok(format!(
        "wrote {} ({} tensors, {} parameters, seed {})\n",
        a.out.display(),
        store.len(),
        store.parameter_count(),
        a.seed
    ))
}

fn pct(v: f64) -> String {
    format!("{:.4}%", v * 100.0)
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<String> {
    if let Some(v) = a.alpha_ep {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Argument(format!("--alpha-ep {v} outside (0, 1]")));
        }
    }
    let config = read_config(&a.config)?;
    if a.seq_len == 0 || a.seq_len > config.max_seq && a.instrument {
        return Err(Error::SequenceLength {
            len: a.seq_len,
            max: config.max_seq,
        });
    }
    let rates = match (&a.schedule, a.alpha_ep) {
        (Some(p), _) => Some(PruneSchedule::from_json_file(p)?.alpha_er),
        (None, Some(v)) => Some(vec![v; config.num_layers]),
        (None, None) => None,
    };
    if let Some(r) = &rates {
        if r.len() != config.num_layers {
            return Err(Error::Schedule(format!(
                "schedule has {} layers, config has {}",
                r.len(),
                config.num_layers
            )));
        }
    }
    let mut report = CostReport::new(&config, a.seq_len, a.variant, rates.as_deref());
    if a.instrument {
        let model = Model::random(config.clone(), a.seed)?;
        let ids: Vec<u32> = (0..a.seq_len).map(|i| (i % config.vocab_size) as u32).collect();
        let opts = ForwardOptions {
            count_flops: true,
            ..ForwardOptions::default()
        };
        report.instrumented = forward_detailed(&model, &ids, &opts)?.report.flops;
    }

    let t = &report.table;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "FLOPs for T={} L={} H={} N={} ({:?} attention-self term)",
        a.seq_len, config.num_layers, config.hidden_size, config.num_labels, a.variant
    );
    for r in &t.rows {
        let _ = writeln!(out, "  {:<11} {:<20} {:>16.0} {:>10}", r.layer, r.sublayer, r.flops, pct(r.share));
    }
    let _ = writeln!(out, "  total {:.0}", t.total);
    let _ = writeln!(
        out,
        "  shares: embedding {}  attention-self {}  feed-forward {}  classifier {}",
        pct(t.shares.embedding),
        pct(t.shares.attention_self),
        pct(t.shares.feed_forward),
        pct(t.shares.classifier)
    );
    let _ = writeln!(
        out,
        "  attention-self paper term {:.0}, corrected term {:.0}",
        t.attention_self_paper, t.attention_self_corrected
    );
    if let Some(s) = &report.speedup {
        let _ = writeln!(
            out,
            "speedup: formula {:.4}, discrete {:.4} (difference {:+.4}); PW {:.2} of {:.0}",
            s.formula, s.discrete, s.difference, s.discrete_pw, s.pw_baseline
        );
    }
    if let Some(f) = &report.instrumented {
        let corrected = analytic_flops(&config, a.seq_len, FlopVariant::Corrected).total;
        let _ = writeln!(
            out,
            "instrumented: total {} (encoder {}), corrected analytic {:.0}, ratio {:.4}",
            f.total(),
            pct(f.encoder_share()),
            corrected,
            f.total() as f64 / corrected
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.csv {
        write_file(p, t.to_csv())?;
    }
    Ok(out)
}

pub fn cmd_acc(a: &AccArgs) -> Result<String> {
    let model = load(&a.model)?;
    let inputs = read_inputs(&a.inputs)?;
    let mode = if a.causal { Mode::Decoder } else { model.mode() };
    let profile = profile_model(&model, &inputs, mode)?;
    write_json(&a.out, &profile)?;
    let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_file(&csv, profile.to_csv())?;
    let mut out = format!(
        "profiled {} inputs over {} layers; fit a={:.6} b={:.6} c={:.6}\n",
        inputs.len(),
        profile.layers,
        profile.fit.a,
        profile.fit.b,
        profile.fit.c
    );
    if profile.degenerate_fit {
        out.push_str("warning: fewer than 3 layers, constant fit used\n");
    }
    Ok(out)
}

fn schedule_note(s: &PruneSchedule) -> String {
    let mut out = String::new();
    if let Some(h) = s.halted_at {
        let _ = writeln!(out, "elimination halted at layer {h}");
    }
    let outside = s.layers_outside(TUNING_BAND);
    if !outside.is_empty() {
        let _ = writeln!(
            out,
            "note: alpha_er outside [{}, {}] at layers {:?}",
            TUNING_BAND.0, TUNING_BAND.1, outside
        );
    }
    out
}

pub fn cmd_schedule(a: &ScheduleArgs) -> Result<String> {
    if !(a.alpha_sc > 0.0 && a.alpha_sc.is_finite()) {
        return Err(Error::Schedule(format!(
            "speedup coefficient must be positive, got {}",
            a.alpha_sc
        )));
    }
    let profile = AccProfile::from_json_file(&a.profile)?;
    let ep = EliminationProfile::from_acc(&profile)?;
    let s = make_schedule(&ep, a.alpha_sc, a.pinned)?;
    write_json(&a.out, &s)?;
    let mut out = format!(
        "alpha_ep {:?}\nalpha_er {:?}\n",
        s.alpha_ep.iter().map(|v| round6(*v)).collect::<Vec<_>>(),
        s.alpha_er.iter().map(|v| round6(*v)).collect::<Vec<_>>()
    );
    out.push_str(&schedule_note(&s));
    Ok(out)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn check_exec(e: &ExecArgs, measuring: bool) -> Result<()> {
    if measuring && e.repeats < 3 {
        return Err(Error::Argument(format!("--repeats must be >= 3, got {}", e.repeats)));
    }
    if measuring && e.warmup < 1 {
        return Err(Error::Argument("--warmup must be >= 1".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunOutput {
    reports: Vec<RunReport>,
    summary: SweepRow,
}

/// One line of the sweep CSV.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub alpha_sc: f64,
    pub predicted_speedup: f64,
    pub measured_speedup: Option<f64>,
    pub pw_total: f64,
    pub latency_ns: Option<u64>,
}

pub const SWEEP_HEADER: &str = "alpha_sc,predicted_speedup,measured_speedup,pw_total,latency_ns";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.alpha_sc,
            self.predicted_speedup,
            opt(self.measured_speedup.map(|v| v.to_string())),
            self.pw_total,
            opt(self.latency_ns.map(|v| v.to_string()))
        )
    }
}

/// Holds an exclusive OS lock for the duration of a timed command so that
/// two measuring processes never share the CPU.
struct MeasureLock(#[allow(dead_code)] fs::File);

impl MeasureLock {
    fn acquire() -> Result<Self> {
        let path = std::env::temp_dir().join("latencut-measure.lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        Ok(MeasureLock(file))
    }
}

fn options(e: &ExecArgs, schedule: Option<PruneSchedule>) -> ForwardOptions {
    ForwardOptions {
        schedule,
        policy: e.policy,
        placement: e.placement,
        seed: e.seed,
        ..ForwardOptions::default()
    }
}

fn total_median(stats: &[LatencyStats]) -> u64 {
    stats.iter().map(|s| s.median_ns).sum()
}

pub fn cmd_run(a: &RunArgs) -> Result<String> {
    check_exec(&a.exec, a.measure)?;
    let model = load(&a.model)?;
    let inputs = read_inputs(&a.inputs)?;
    let schedule = match &a.schedule {
        Some(p) => PruneSchedule::from_json_file(p)?,
        None => crate::runner::noop_schedule(&model),
    };
    let opts = options(&a.exec, Some(schedule.clone()));
    let _lock = if a.measure { Some(MeasureLock::acquire()?) } else { None };

    let mut reports = Vec::with_capacity(inputs.len());
    for ids in &inputs {
        let mut r = forward_detailed(&model, ids, &opts)?.report;
        if r.retention != retention_plan(&schedule, ids.len()).t {
            return Err(Error::Schedule("realised counts diverged from the plan".into()));
        }
        if a.measure {
            let cmp = compare_latency(&model, ids, &opts, a.exec.repeats, a.exec.warmup)?;
            r.measured_speedup = Some(cmp.measured_speedup);
            r.latency_ns = cmp.pruned.median_ns;
            r.latency = Some(cmp.pruned);
            r.baseline_latency = Some(cmp.baseline);
        }
        reports.push(r);
    }
    let pw_total: f64 = reports.iter().map(|r| r.pw_total).sum();
    let pw_base: f64 = reports.iter().map(|r| r.pw_baseline).sum();
    let (measured, latency) = if a.measure {
        let base: Vec<_> = reports.iter().filter_map(|r| r.baseline_latency.clone()).collect();
        let pruned: Vec<_> = reports.iter().filter_map(|r| r.latency.clone()).collect();
        let (b, p) = (total_median(&base), total_median(&pruned));
        (Some(b as f64 / p as f64), Some(p))
    } else {
        (None, None)
    };
    let summary = SweepRow {
        alpha_sc: schedule.alpha_sc,
        predicted_speedup: pw_base / pw_total,
        measured_speedup: measured,
        pw_total,
        latency_ns: latency,
    };
    if let Some(p) = &a.csv {
        write_file(p, format!("{SWEEP_HEADER}\n{}\n", summary.csv_line()))?;
    }
    let mut out = format!(
        "ran {} inputs: PW {:.2} of {:.0}, predicted speedup {:.4}",
        reports.len(),
        pw_total,
        pw_base,
        summary.predicted_speedup
    );
    if let Some(m) = measured {
        let _ = write!(out, ", measured speedup {m:.4}");
    }
    out.push('\n');
    write_json(&a.out, &RunOutput { reports, summary })?;
    Ok(out)
}

/// Parses `start:stop:step` into an endpoint-inclusive grid (within 1e-9).
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(Error::Argument(format!("range `{spec}` is not start:stop:step")));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Argument(format!("range `{spec}`: `{s}`: {e}")))
    };
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(Error::Argument(format!(
            "range `{spec}` needs start <= stop and step > 0"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| {
            let v = start + i as f64 * step;
            (v * 1e9).round() / 1e9
        })
        .collect())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<String> {
    let grid = parse_range(&a.alpha_sc_range)?;
    if let Some(&bad) = grid.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Schedule(format!("speedup coefficient {bad} must be positive")));
    }
    check_exec(&a.exec, !a.no_measure)?;
    let model = load(&a.model)?;
    let inputs = read_inputs(&a.inputs)?;
    let (profile, stored_pin) = match (&a.profile, &a.schedule) {
        (Some(p), _) => (EliminationProfile::from_acc(&AccProfile::from_json_file(p)?)?, None),
        (None, Some(p)) => {
            let s = PruneSchedule::from_json_file(p)?;
            (s.profile(), Some(s.pinned_policy))
        }
        (None, None) => return Err(Error::Argument("--profile or --schedule is required".into())),
    };
    if profile.alpha_ep.len() != model.num_layers() {
        return Err(Error::Schedule(format!(
            "profile has {} layers, model has {}",
            profile.alpha_ep.len(),
            model.num_layers()
        )));
    }
    let pinned = a
        .pinned
        .or(stored_pin)
        .unwrap_or_else(|| PinnedPolicy::default_for(model.mode()));

    let schedules = grid
        .iter()
        .map(|&sc| make_schedule(&profile, sc, pinned))
        .collect::<Result<Vec<_>>>()?;
    // Baseline first, then one configuration per grid point, timed round-robin.
    let latencies = if a.no_measure {
        None
    } else {
        let _lock = MeasureLock::acquire()?;
        let mut configs = vec![options(&a.exec, None)];
        configs.extend(schedules.iter().map(|s| options(&a.exec, Some(s.clone()))));
        Some(measure_interleaved(&model, &inputs, &configs, a.exec.repeats, a.exec.warmup)?)
    };

    let pw_base: f64 = inputs.iter().map(|ids| (ids.len() * model.num_layers()) as f64).sum();
    let mut rows = Vec::with_capacity(grid.len());
    for (i, (&sc, schedule)) in grid.iter().zip(&schedules).enumerate() {
        let pw_total: f64 = inputs
            .iter()
            .map(|ids| crate::cost_model::processed_words(&retention_plan(schedule, ids.len())).1)
            .sum();
        let (measured, latency) = match &latencies {
            Some(stats) => {
                let (base, p) = (stats[0].median_ns, stats[i + 1].median_ns);
                (Some(base as f64 / p as f64), Some(p))
            }
            None => (None, None),
        };
        rows.push(SweepRow {
            alpha_sc: sc,
            predicted_speedup: pw_base / pw_total,
            measured_speedup: measured,
            pw_total,
            latency_ns: latency,
        });
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut out = String::new();
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
        let _ = writeln!(
            out,
            "alpha_sc {:<6} predicted {:.4} measured {}",
            r.alpha_sc,
            r.predicted_speedup,
            r.measured_speedup.map_or("-".into(), |m| format!("{m:.4}"))
        );
    }
    write_file(&a.out, csv)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_endpoint_inclusive() {
        let g = parse_range("0.85:1.2:0.05").unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 0.85);
        assert_eq!(*g.last().unwrap(), 1.2);
        assert_eq!(parse_range("1:1:0.1").unwrap(), vec![1.0]);
    }

    #[test]
    fn bad_ranges() {
        assert!(parse_range("1:0.5:0.1").is_err());
        assert!(parse_range("0.5:1:0").is_err());
        assert!(parse_range("0.5:1").is_err());
        assert!(parse_range("a:1:0.1").is_err());
    }

    #[test]
    fn sweep_row_csv() {
        let r = SweepRow {
            alpha_sc: 0.9,
            predicted_speedup: 1.5,
            measured_speedup: None,
            pw_total: 10.0,
            latency_ns: None,
        };
        assert_eq!(r.csv_line(), "0.9,1.5,,10,");
    }
}
