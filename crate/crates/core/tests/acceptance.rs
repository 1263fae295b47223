//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line and
//! then asserts. Tests hold a shared lock so the timed criteria never run
//! alongside other work.

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use latencut::acc::{fit_quadratic, score_vector};
use latencut::attention::{select_positions, AttentionProbs, Placement, Policy};
use latencut::cli::{cmd_flops, cmd_sweep, ExecArgs, FlopsArgs, SweepArgs};
use latencut::cost_model::{closed_form_pw, compare_speedup, estimate_speedup, processed_words, CostReport};
use latencut::runner::{compare_latency, forward_baseline, forward_detailed, forward_pruned, ForwardOptions};
use latencut::schedule::{elimination_profile, make_schedule, retention_counts, EliminationProfile};
use latencut::{save_model, generate_random_model, Matrix, Mode, Model, ModelConfig, PinnedPolicy, ScoreVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, pass: bool, detail: &str) -> bool {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn paper_config() -> ModelConfig {
    // BERT-base with a binary classifier.
    ModelConfig::bert_base()
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_vec(value).unwrap()).unwrap();
}

// Tolerances.
const SHARE_POINTS: f64 = 0.2;
const EMBEDDING_SHARE: (f64, f64) = (0.003, 0.001);
const CLASSIFIER_SHARE: (f64, f64) = (0.0013, 0.0005);
const ENCODER_SHARE_MIN: f64 = 0.99;
const IDENTITY_REL: f64 = 1e-9;
const PW_REL: f64 = 0.02;
const NOOP_ABS: f32 = 1e-6;
const SV_MEAN_ABS: f64 = 1e-5;
const DECODER_SV_ABS: f64 = 1e-7;
const LATENCY_REL: f64 = 0.20;
const SWEEP_NOISE: f64 = 0.05;
const FIT_ABS: f64 = 1e-6;

#[test]
fn criterion_01_flop_shares() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let out = dir.path().join("flops.json");
    let mut cfg = paper_config();
    cfg.num_labels = 2;
    write_json(&cfg_path, &cfg);

    let start = Instant::now();
    cmd_flops(&FlopsArgs {
        config: cfg_path,
        seq_len: 512,
        variant: "paper".parse().unwrap(),
        alpha_ep: None,
        schedule: None,
        instrument: false,
        seed: 0,
        out: Some(out.clone()),
        csv: None,
    })
    .unwrap();
    let elapsed = start.elapsed();

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let shares = &report["table"]["shares"];
    let pct = |k: &str| shares[k].as_f64().unwrap() * 100.0;
    let (att, ffn, emb, cls) = (pct("attention_self"), pct("feed_forward"), pct("embedding"), pct("classifier"));
    let pass = (att - 25.1).abs() <= SHARE_POINTS
        && (ffn - 74.9).abs() <= SHARE_POINTS
        && (emb - EMBEDDING_SHARE.0).abs() <= EMBEDDING_SHARE.1
        && (cls - CLASSIFIER_SHARE.0).abs() <= CLASSIFIER_SHARE.1
        && within(elapsed, Duration::from_secs(1));
    let detail = format!(
        "attention-self {att:.3}% feed-forward {ffn:.3}% embedding {emb:.5}% classifier {cls:.5}% in {elapsed:?}"
    );
    assert!(verdict(1, pass, &detail), "{detail}");
}

#[test]
fn criterion_02_encoder_dominance() {
    let _g = serial();
    let start = Instant::now();
    let model = Model::random(paper_config(), 2).unwrap();
    let ids: Vec<u32> = (0..512u32).map(|i| (i * 37 + 101) % 30522).collect();
    let opts = ForwardOptions {
        count_flops: true,
        ..ForwardOptions::default()
    };
    let counts = forward_detailed(&model, &ids, &opts).unwrap().report.flops.unwrap();
    let elapsed = start.elapsed();
    let share = counts.encoder_share();
    let pass = share >= ENCODER_SHARE_MIN && within(elapsed, Duration::from_secs(60));
    let detail = format!("encoder share {:.4}% of {} FLOPs in {elapsed:?}", share * 100.0, counts.total());
    assert!(verdict(2, pass, &detail), "{detail}");
}

#[test]
fn criterion_03_speedup_consistency() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_identity = 0.0f64;
    let mut worst_pw = (0.0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let layers = rng.gen_range(2..=24);
        let alpha: Vec<f64> = (0..layers).map(|_| rng.gen_range(0.5..=1.0)).collect();
        for t in [256usize, 512, 1024] {
            let k = estimate_speedup(&alpha);
            let pw = closed_form_pw(&alpha, t);
            let tl = (t * layers) as f64;
            worst_identity = worst_identity.max((k * pw - tl).abs() / tl);

            let discrete = processed_words(&retention_counts(&alpha, t)).1;
            let rel = (pw - discrete).abs() / discrete;
            if rel > worst_pw.0 {
                worst_pw = (rel, layers, t);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_identity <= IDENTITY_REL && worst_pw.0 <= PW_REL && within(elapsed, Duration::from_secs(10));
    let detail = format!(
        "identity max rel {worst_identity:.2e}; closed-form vs discrete PW max rel {:.4} (L={}, T={}) in {elapsed:?}",
        worst_pw.0, worst_pw.1, worst_pw.2
    );
    assert!(verdict(3, pass, &detail), "{detail}");
}

#[test]
fn criterion_04_worked_example() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    write_json(&cfg_path, &paper_config());
    let start = Instant::now();
    let text = cmd_flops(&FlopsArgs {
        config: cfg_path,
        seq_len: 512,
        variant: "paper".parse().unwrap(),
        alpha_ep: Some(0.8),
        schedule: None,
        instrument: false,
        seed: 0,
        out: None,
        csv: None,
    })
    .unwrap();
    let elapsed = start.elapsed();
    let k = estimate_speedup(&[0.8; 12]);
    let cmp = compare_speedup(&[0.8; 12], 512);
    let printed = text.contains(&format!("formula {:.4}", cmp.formula))
        && text.contains(&format!("discrete {:.4}", cmp.discrete))
        && text.contains(&format!("difference {:+.4}", cmp.difference));
    let pass = (3.0..=3.1).contains(&k) && printed && within(elapsed, Duration::from_secs(1));
    let detail = format!(
        "formula {:.4} discrete {:.4} difference {:+.4} printed={printed} in {elapsed:?}",
        cmp.formula, cmp.discrete, cmp.difference
    );
    assert!(verdict(4, pass, &detail), "{detail}");
}

#[test]
fn criterion_05_noop_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f32;
    let policies = [Policy::SvSort, Policy::RandomSort, Policy::TailTruncate];
    let placements = [Placement::PostConcat, Placement::MidAttention];
    for pair in 0..100u64 {
        let mode = if pair % 2 == 0 { Mode::Encoder } else { Mode::Decoder };
        let config = ModelConfig::new(4, 128, 4, 64, 512, mode).unwrap();
        let model = Model::random(config, pair).unwrap();
        let len = if pair % 4 == 0 { 64 } else { rng.gen_range(1..=64) };
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..512)).collect();
        let base = forward_baseline(&model, &ids).unwrap();
        let schedule = latencut::runner::noop_schedule(&model);
        let pruned = forward_pruned(
            &model,
            &ids,
            &schedule,
            policies[pair as usize % 3],
            placements[pair as usize % 2],
            pair,
        )
        .unwrap();
        assert_eq!(base.logits.len(), pruned.logits.len());
        for (a, b) in base.logits.iter().zip(&pruned.logits) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= NOOP_ABS && within(elapsed, Duration::from_secs(300));
    let detail = format!("max |logit diff| {worst:.3e} over 100 pairs in {elapsed:?}");
    assert!(verdict(5, pass, &detail), "{detail}");
}

#[test]
fn criterion_06_score_vector_invariants() {
    let _g = serial();
    let start = Instant::now();
    let config = ModelConfig::new(2, 64, 4, 512, 1000, Mode::Encoder).unwrap();
    let model = Model::random(config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut t = 1;
    while t <= 512 {
        let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..1000)).collect();
        let opts = ForwardOptions {
            record_scores: true,
            ..ForwardOptions::default()
        };
        for sv in forward_detailed(&model, &ids, &opts).unwrap().scores {
            worst = worst.max((sv.mean() - 1.0).abs());
        }
        t *= 2;
    }
    let uniform = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    let probs = AttentionProbs::new(vec![uniform.clone(), uniform]).unwrap();
    let dec = score_vector(&probs, Mode::Decoder).values;
    let dec_ok = (dec[0] - 0.75).abs() <= DECODER_SV_ABS && (dec[1] - 0.5).abs() <= DECODER_SV_ABS;
    let elapsed = start.elapsed();
    let pass = worst <= SV_MEAN_ABS && dec_ok && within(elapsed, Duration::from_secs(10));
    let detail = format!("encoder |mean-1| max {worst:.2e}; decoder 2x2 {dec:?} in {elapsed:?}");
    assert!(verdict(6, pass, &detail), "{detail}");
}

/// All masks over `len` positions, grouped by size, that avoid `pins` and
/// where every member beats every excluded candidate (higher score, or an
/// equal score at a smaller index).
fn dominant_sets(scores: &[f64], pins: &[usize]) -> Vec<Vec<u32>> {
    let len = scores.len();
    let pin_mask: u32 = pins.iter().map(|&p| 1u32 << p).sum();
    let mut by_size = vec![Vec::new(); len + 1];
    for mask in 0u32..(1u32 << len) {
        if mask & pin_mask != 0 {
            continue;
        }
        let ok = (0..len).filter(|&i| mask >> i & 1 == 1).all(|i| {
            (0..len)
                .filter(|&j| (mask | pin_mask) >> j & 1 == 0)
                .all(|j| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
        });
        if ok {
            by_size[mask.count_ones() as usize].push(mask);
        }
    }
    by_size
}

#[test]
fn criterion_07_sort_eliminate_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    let mut pin_losses = 0usize;
    for len in 1..=16usize {
        let trials = if len > 12 { 12 } else { 60 };
        for trial in 0..trials {
            let scores: Vec<f64> = if trial % 2 == 0 {
                (0..len).map(|_| rng.gen_range(0..3) as f64).collect()
            } else {
                (0..len).map(|_| rng.gen::<f64>()).collect()
            };
            let pins = match trial % 3 {
                0 => vec![],
                1 => PinnedPolicy::First.positions(len),
                _ => PinnedPolicy::Last.positions(len),
            };
            let sets = dominant_sets(&scores, &pins);
            let sv = ScoreVector::new(scores.clone());
            for keep in pins.len().max(1)..=len {
                let got = select_positions(&sv, keep, &pins, Policy::SvSort, 0).unwrap();
                let quota = keep - pins.len();
                let oracle = &sets[quota];
                let mut expected: Vec<usize> = match oracle.as_slice() {
                    [mask] => (0..len).filter(|&i| mask >> i & 1 == 1).collect(),
                    _ => {
                        mismatches += 1;
                        continue;
                    }
                };
                expected.extend(&pins);
                expected.sort_unstable();
                checked += 1;
                if got != expected {
                    mismatches += 1;
                }
                if !pins.iter().all(|p| got.contains(p)) {
                    pin_losses += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && pin_losses == 0 && within(elapsed, Duration::from_secs(10));
    let detail = format!("{checked} selections, {mismatches} mismatches, {pin_losses} lost pins in {elapsed:?}");
    assert!(verdict(7, pass, &detail), "{detail}");
}

#[test]
fn criterion_08_wall_clock_vs_prediction() {
    let _g = serial();
    let start = Instant::now();
    let model = Model::random(paper_config(), 8).unwrap();
    let ids: Vec<u32> = (0..512u32).map(|i| (i * 131 + 7) % 30522).collect();
    let schedule = make_schedule(&EliminationProfile::constant(0.8, 12), 1.0, PinnedPolicy::First).unwrap();
    let predicted = compare_speedup(&schedule.alpha_er, 512).discrete;
    let opts = ForwardOptions {
        schedule: Some(schedule),
        ..ForwardOptions::default()
    };
    let cmp = compare_latency(&model, &ids, &opts, 10, 2).unwrap();
    let elapsed = start.elapsed();
    let rel = (cmp.measured_speedup - predicted).abs() / predicted;
    let pass = rel <= LATENCY_REL && within(elapsed, Duration::from_secs(600));
    let detail = format!(
        "measured {:.3} (baseline {:.1} ms, pruned {:.1} ms) vs predicted {predicted:.3}, rel {rel:.3} in {elapsed:?}",
        cmp.measured_speedup,
        cmp.baseline.median_ns as f64 / 1e6,
        cmp.pruned.median_ns as f64 / 1e6
    );
    assert!(verdict(8, pass, &detail), "{detail}");
}

#[test]
fn criterion_09_offline_tuning_monotonicity() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.latx");
    let inputs_path = dir.path().join("inputs.txt");
    let profile_path = dir.path().join("profile.json");
    let out = dir.path().join("sweep.csv");

    let config = ModelConfig::new(6, 256, 4, 256, 2000, Mode::Encoder).unwrap();
    let store = generate_random_model(&config, 9).unwrap();
    save_model(&config, &store, &model_path).unwrap();
    let ids: Vec<String> = (0..256u32).map(|i| ((i * 17 + 3) % 2000).to_string()).collect();
    std::fs::write(&inputs_path, ids.join(" ")).unwrap();
    // Linearly falling ACC: profile ratios 0.89 down to 0.80.
    let e_acc: Vec<f64> = (1..=6).map(|l| 10.0 - l as f64).collect();
    write_json(&profile_path, &fit_quadratic(&e_acc).unwrap());

    let start = Instant::now();
    cmd_sweep(&SweepArgs {
        model: model_path,
        inputs: inputs_path,
        profile: Some(profile_path),
        schedule: None,
        alpha_sc_range: "0.85:1.2:0.05".into(),
        pinned: None,
        exec: ExecArgs {
            policy: Policy::SvSort,
            placement: Placement::PostConcat,
            repeats: 40,
            warmup: 2,
            seed: 0,
        },
        no_measure: false,
        out: out.clone(),
    })
    .unwrap();
    let elapsed = start.elapsed();

    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    let predicted_ok = rows.windows(2).all(|w| w[1][1] <= w[0][1]);
    let measured_ok = rows.windows(2).all(|w| w[1][2] <= w[0][2] * (1.0 + SWEEP_NOISE));
    let pass = rows.len() == 8 && predicted_ok && measured_ok && within(elapsed, Duration::from_secs(900));
    let series: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}/{:.3}", r[0], r[1], r[2])).collect();
    let detail = format!("alpha_sc:predicted/measured {} in {elapsed:?}", series.join(" "));
    assert!(verdict(9, pass, &detail), "{detail}");
}

#[test]
fn criterion_10_quadratic_fit_and_halting() {
    let _g = serial();
    let start = Instant::now();
    let (a, b, c) = (0.0123, -0.31, 4.2);
    let exact: Vec<f64> = (1..=12).map(|l| {
        let x = l as f64;
        a * x * x + b * x + c
    })
    .collect();
    let fit = fit_quadratic(&exact).unwrap().fit;
    let exact_ok = (fit.a - a).abs() <= FIT_ABS && (fit.b - b).abs() <= FIT_ABS && (fit.c - c).abs() <= FIT_ABS;

    let flat = fit_quadratic(&[0.37; 9]).unwrap().fit;
    let constant_ok = flat.a.abs() <= FIT_ABS && flat.b.abs() <= FIT_ABS && (flat.c - 0.37).abs() <= FIT_ABS;

    // Falls to layer 4, then rises: layers 5.. must all be 1.
    let p = [1.0, 0.8, 0.7, 0.65, 0.66, 0.5, 0.4];
    let ep = elimination_profile(&p).unwrap();
    let halting_ok = ep.alpha_ep[4..].iter().all(|&v| v == 1.0)
        && ep.alpha_ep[1..4].iter().all(|&v| v < 1.0)
        && ep.halted_at == Some(5);

    let elapsed = start.elapsed();
    let pass = exact_ok && constant_ok && halting_ok && within(elapsed, Duration::from_secs(1));
    let detail = format!(
        "exact ({:.3e}, {:.3e}, {:.3e}) constant ({:.1e}, {:.1e}, {}) halting {:?} in {elapsed:?}",
        fit.a - a,
        fit.b - b,
        fit.c - c,
        flat.a,
        flat.b,
        flat.c,
        ep.alpha_ep
    );
    assert!(verdict(10, pass, &detail), "{detail}");
}

#[test]
fn cost_report_carries_both_speedups() {
    let _g = serial();
    let r = CostReport::new(&paper_config(), 512, "paper".parse().unwrap(), Some(&[0.8; 12]));
    let s = r.speedup.unwrap();
    assert!((s.formula - estimate_speedup(&[0.8; 12])).abs() < 1e-12);
    assert!((s.difference - (s.discrete - s.formula)).abs() < 1e-12);
}
