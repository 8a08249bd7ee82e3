//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use driftscope::classifier::{ClassifierConfig, Position, RecencyClassifier};
use driftscope::cli::experiments::{self, RunOutput};
use driftscope::cli::{emit_reports, report_json, ExperimentConfig, FileConfig, Subcommand};
use driftscope::conformal::{conformal_pvalue, mixture_update};
use driftscope::monitor::{martingale_update, test_alert, MartingaleParams, MartingaleState};
use driftscope::Rng;
use serde_json::Value;

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(sub: Subcommand, file: FileConfig) -> (ExperimentConfig, RunOutput, Value) {
    let cfg = ExperimentConfig::resolve(sub, file, None).expect("valid config");
    let out = experiments::run(&cfg).expect("experiment runs");
    assert!(out.failed.is_empty(), "failed trials: {:?}", out.failed);
    let report = report_json(&cfg, &out);
    (cfg, out, report)
}

fn stat(report: &Value, key: &str, field: &str) -> f64 {
    report["summary"]["per_monitor"][key][field]
        .as_f64()
        .unwrap_or_else(|| panic!("missing {key}.{field}"))
}

fn martingale_algebra() -> Outcome {
    let params = MartingaleParams::default();
    let (t, p) = (params.tilt, params.p);
    let log_norm = ((1.0 - p) + p * t.exp()).ln();
    let mut rng = Rng::new(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut st = MartingaleState::new(params);
        let (mut n, mut s) = (0.0, 0.0);
        for _ in 0..1000 {
            let z = u8::from(rng.coin());
            st = martingale_update(&st, z).unwrap();
            n += 1.0;
            s += f64::from(z);
            let exact = (t * s - n * log_norm).exp();
            worst = worst.max((st.m - exact).abs() / exact);
        }
    }
    let mut st = MartingaleState::new(params);
    for z in [1, 1, 0] {
        st = martingale_update(&st, z).unwrap();
    }
    let m3 = st.m;
    outcome(
        worst <= 1e-9 && (m3 - 1.14988).abs() <= 1e-4,
        format!("max rel err {worst:.2e} ≤ 1e-9, M3 = {m3:.5} (1.14988 ± 1e-4)"),
    )
}

fn perfect_alert_time() -> Outcome {
    let params = MartingaleParams::default();
    let mut st = MartingaleState::new(params);
    let mut first = None;
    for n in 1..=100 {
        st = martingale_update(&st, 1).unwrap();
        if test_alert(&st) {
            first = Some(n);
            break;
        }
    }
    let e = std::f64::consts::E;
    let formula = (100f64.ln() / (1.0 - ((1.0 + e) / 2.0).ln())).ceil() as usize;
    outcome(
        first == Some(13) && formula == 13,
        format!("first alert n = {first:?}, closed form {formula}, expected 13"),
    )
}

fn soundness() -> Outcome {
    let (_, _, report) = run(
        Subcommand::Soundness,
        FileConfig {
            seed: Some(SEED),
            trials: Some(500),
            ..FileConfig::default()
        },
    );
    let per = report["summary"]["per_monitor"].as_object().unwrap();
    let rates: Vec<String> = per
        .iter()
        .map(|(k, v)| {
            format!(
                "{}={:.3}",
                k.trim_start_matches("none/"),
                v["alert_rate"].as_f64().unwrap()
            )
        })
        .collect();
    let worst = report["summary"]["false_alert_rate"].as_f64().unwrap();
    outcome(
        per.len() == 5 && worst <= 0.02,
        format!(
            "500 trials, max false-alert fraction {worst:.3} ≤ 0.02 [{}]",
            rates.join(" ")
        ),
    )
}

fn detection_ordering() -> Outcome {
    let (_, _, report) = run(
        Subcommand::Detect,
        FileConfig {
            seed: Some(SEED),
            trials: Some(100),
            ..FileConfig::default()
        },
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for (shift, ours, cm) in [
        ("sensor_degradation", "ours_tap0", "cm_nearest_tap0"),
        ("environment_shift", "ours_tap2", "cm_ratio_tap2"),
    ] {
        let a = stat(&report, &format!("{shift}/{ours}"), "mean_iterations");
        let b = stat(&report, &format!("{shift}/{cm}"), "mean_iterations");
        pass &= a < b && a < 200.0 && b < 200.0;
        parts.push(format!("{shift}: {ours} {a:.1} < {cm} {b:.1} < 200"));
    }
    outcome(pass, parts.join("; "))
}

fn intervention_ordering() -> Outcome {
    let (_, _, report) = run(
        Subcommand::Intervene,
        FileConfig {
            seed: Some(SEED),
            trials: Some(100),
            ..FileConfig::default()
        },
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for shift in ["sensor_degradation", "environment_shift"] {
        let m = &report["summary"]["windowed_mse"][shift];
        let f = &report["summary"]["per_trial_fraction"][shift];
        let g = |k: &str| m[k].as_f64().unwrap();
        let (c, w, gen, none) = (g("correct"), g("wrong"), g("generic"), g("none"));
        let fracs =
            ["correct_below_generic", "generic_below_none", "correct_below_wrong"].map(|k| f[k].as_f64().unwrap());
        pass &= c < gen && gen < none && c < w && fracs.iter().all(|&x| x >= 0.8);
        parts.push(format!(
            "{shift}: correct {c:.3} < generic {gen:.3} < none {none:.3}, wrong {w:.3}; per-trial {:.2}/{:.2}/{:.2} ≥ 0.80",
            fracs[0], fracs[1], fracs[2]
        ));
    }
    outcome(pass, parts.join("; "))
}

fn lifecycle() -> Outcome {
    let (_, _, report) = run(
        Subcommand::Lifecycle,
        FileConfig {
            seed: Some(SEED),
            trials: Some(50),
            lambda: Some(100.0),
            gamma: Some(100),
            ..FileConfig::default()
        },
    );
    let p = &report["summary"]["policies"];
    let g = |policy: &str, k: &str| p[policy][k].as_f64().unwrap();
    let (tc, sc) = (
        g("targeted_monitoring", "mean_crashes"),
        g("scheduled_maintenance", "mean_crashes"),
    );
    let (tm, sm) = (
        g("targeted_monitoring", "mean_mse_lifecycle"),
        g("scheduled_maintenance", "mean_mse_lifecycle"),
    );
    outcome(
        tc <= 0.1 && sc >= 1.0 && tm <= sm,
        format!("50 lifecycles: targeted crashes {tc:.2} ≤ 0.1, scheduled {sc:.2} ≥ 1.0, MSE {tm:.3} ≤ {sm:.3}"),
    )
}

fn race() -> Outcome {
    let (_, out, report) = run(
        Subcommand::Race,
        FileConfig {
            seed: Some(SEED),
            trials: Some(100),
            ..FileConfig::default()
        },
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for shift in ["sensor_degradation", "environment_shift", "brightness_shift"] {
        let acc = report["summary"]["first_detection"][shift]["accuracy"]
            .as_f64()
            .unwrap();
        pass &= acc >= 0.7;
        parts.push(format!("{shift} first {acc:.2} ≥ 0.70"));
    }
    let custom_rate = stat(&report, "brightness_shift/custom", "alert_rate");
    pass &= custom_rate >= 0.95;
    parts.push(format!("custom alerts on brightness {custom_rate:.2}"));
    for shift in ["sensor_degradation", "environment_shift"] {
        let silent = out
            .rows
            .iter()
            .filter(|r| r.shift == shift && r.monitor == "custom" && !r.alerted)
            .count() as f64
            / 100.0;
        pass &= silent >= 0.95;
        parts.push(format!("custom silent on {shift} {silent:.2} ≥ 0.95"));
    }
    outcome(pass, parts.join("; "))
}

fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

/// `∫₀¹ ε p^(ε−1) dε` in closed form.
fn sm1_exact(p: f64) -> f64 {
    if p == 1.0 {
        return 0.5;
    }
    let a = p.ln();
    1.0 / a - 1.0 / (a * a) + (-a).exp() / (a * a)
}

fn conformal() -> Outcome {
    let mut rng = Rng::new(SEED);
    let mut scores = Vec::with_capacity(5000);
    let mut pvalues = Vec::with_capacity(5000);
    for _ in 0..5000 {
        scores.push(rng.normal());
        pvalues.push(conformal_pvalue(&scores, rng.uniform_open()));
    }
    let ks = ks_uniform(pvalues);
    let sm_one = mixture_update(&[1.0]).unwrap();
    let sm_tenth = mixture_update(&[0.1]).unwrap();
    let pass = ks <= 0.03
        && (sm_one - 0.5).abs() <= 1e-4
        && (sm_tenth - 1.2632).abs() <= 1e-4
        && (sm_one - sm1_exact(1.0)).abs() <= 1e-4
        && (sm_tenth - sm1_exact(0.1)).abs() <= 1e-4;
    outcome(
        pass,
        format!(
            "KS {ks:.4} ≤ 0.03 (n = 5000); SM1(1) = {sm_one:.5}, SM1(0.1) = {sm_tenth:.5} (exact {:.5})",
            sm1_exact(0.1)
        ),
    )
}

fn gaussian(rng: &mut Rng, d: usize, mean: f64) -> Vec<f64> {
    (0..d).map(|_| mean + rng.normal()).collect()
}

fn gradient_error(clf: &RecencyClassifier, a: &[f64], b: &[f64], label: Position) -> f64 {
    let g = clf.gradient(a, b, label).unwrap();
    let theta = clf.params();
    let h = 1e-6;
    let mut probe = clf.clone();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut up = theta.clone();
            up[i] += h;
            probe.set_params(&up).unwrap();
            let lu = probe.loss(a, b, label).unwrap();
            let mut dn = theta.clone();
            dn[i] -= h;
            probe.set_params(&dn).unwrap();
            let ld = probe.loss(a, b, label).unwrap();
            (lu - ld) / (2.0 * h)
        })
        .collect();
    let diff: f64 = g.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / norm
}

fn classifier() -> Outcome {
    let d = 4;
    let mut rng = Rng::new(SEED);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, hidden) in [("linear", None), ("hidden", Some(32))] {
        let config = ClassifierConfig {
            learning_rate: 0.05,
            hidden,
        };
        let mut clf = RecencyClassifier::new(d, &config, &mut rng).unwrap();
        let pool: Vec<Vec<f64>> = (0..500).map(|_| gaussian(&mut rng, d, 0.0)).collect();
        clf.fit_scaler(&pool).unwrap();
        // A shifted training history leaves the weights far from zero.
        for _ in 0..2000 {
            let old = gaussian(&mut rng, d, 0.0);
            let new = gaussian(&mut rng, d, 1.5);
            if rng.coin() {
                clf.train_pair(&new, &old, Position::First).unwrap();
            } else {
                clf.train_pair(&old, &new, Position::Second).unwrap();
            }
        }
        let mut hits = 0;
        for _ in 0..10_000 {
            let a = gaussian(&mut rng, d, 0.0);
            let b = gaussian(&mut rng, d, 0.0);
            let label = if rng.coin() { Position::First } else { Position::Second };
            hits += usize::from(clf.predict_recency(&a, &b).unwrap() == label);
        }
        let acc = hits as f64 / 10_000.0;
        let mut grad_err: f64 = 0.0;
        for _ in 0..20 {
            let a = gaussian(&mut rng, d, 0.5);
            let b = gaussian(&mut rng, d, 0.0);
            let label = if rng.coin() { Position::First } else { Position::Second };
            grad_err = grad_err.max(gradient_error(&clf, &a, &b, label));
        }
        pass &= (acc - 0.5).abs() <= 0.015 && grad_err <= 1e-5;
        parts.push(format!(
            "{name}: null accuracy {acc:.4} (0.5 ± 0.015), gradient rel err {grad_err:.1e} ≤ 1e-5"
        ));
    }
    outcome(pass, parts.join("; "))
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for sub in Subcommand::ALL {
        let file = |run: usize| FileConfig {
            seed: Some(SEED),
            trials: Some(if sub == Subcommand::Lifecycle { 2 } else { 3 }),
            lambda: Some(100.0),
            gamma: Some(100),
            out: Some(root.path().join(format!("{sub}-{run}"))),
            ..FileConfig::default()
        };
        let first = ExperimentConfig::resolve(sub, file(0), None).unwrap();
        emit_reports(&first, &experiments::run(&first).unwrap()).unwrap();
        // The rerun uses a different worker count.
        let second = ExperimentConfig::resolve(sub, file(1), None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        pool.install(|| emit_reports(&second, &experiments::run(&second).unwrap()).unwrap());
        let (a, b) = (read_all(&first.output_dir), read_all(&second.output_dir));
        let same = a == b && a.len() >= 3;
        pass &= same;
        parts.push(format!(
            "{sub} {} files {}",
            a.len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    outcome(pass, parts.join(", "))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "martingale algebra", Duration::from_secs(1), martingale_algebra),
        (
            2,
            "perfect-classifier alert time",
            Duration::from_secs(1),
            perfect_alert_time,
        ),
        (3, "soundness", Duration::from_secs(300), soundness),
        (
            4,
            "detection-speed ordering",
            Duration::from_secs(600),
            detection_ordering,
        ),
        (
            5,
            "intervention ordering",
            Duration::from_secs(600),
            intervention_ordering,
        ),
        (6, "lifecycle", Duration::from_secs(900), lifecycle),
        (7, "monitor race", Duration::from_secs(600), race),
        (8, "conformal correctness", Duration::from_secs(600), conformal),
        (9, "classifier calibration", Duration::from_secs(600), classifier),
        (10, "determinism", Duration::from_secs(600), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id.to_string() == *f) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= budget;
        failed += usize::from(!pass);
        println!(
            "{} [{id:>2}] {name}: {} | {:.2}s ≤ {}s",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
