//! Runs the five experiments over seeded trials and gathers their rows.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::shiftlab::{
    detection::{race_designated, RACE_CUSTOM},
    run_detection_trial, run_intervention_trial, run_lifecycle, run_monitor_race, Arm, FeatureSource, LabConfig,
    LifecycleConfig, MonitorRecord, MonitorSpec, Policy,
};
use crate::TapId;

use super::config::{ExperimentConfig, Subcommand};

/// Shift label of lifecycle rows, where both shift kinds arrive at random.
pub const MIXED_SHIFT: &str = "mixed";

/// One line of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub monitor: String,
    pub shift: String,
    /// `None` is written as the literal `none`.
    #[serde(serialize_with = "iterations_or_none")]
    pub iterations_until_alert: Option<usize>,
    pub alerted: bool,
    pub final_m: f64,
}

fn iterations_or_none<S: serde::Serializer>(v: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(n) => s.serialize_u64(*n as u64),
        None => s.serialize_str("none"),
    }
}

/// One line of `martingale_traces.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub trial: usize,
    pub monitor: String,
    pub episode: usize,
    pub m_value: f64,
}

/// Experiment-specific per-trial results that do not fit `trials.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcomes {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<TrialRow>,
    pub traces: Vec<TraceRow>,
    pub outcomes: Option<Outcomes>,
    /// Summary fields beyond `per_monitor`.
    pub extra_summary: BTreeMap<String, Value>,
    /// Iteration count assigned to monitors that never alerted.
    pub censor_at: usize,
    pub failed: Vec<(usize, String)>,
}

/// Seeds trial `t` independently of how many trials run.
pub fn trial_streams(seed: u64, trial: usize) -> Rng {
    Rng::new(seed).substream(&[trial as u64])
}

/// Runs `f` for every trial in parallel, keeping trial order. Errors and
/// panics are captured per trial.
fn run_trials<T, F>(trials: usize, f: F) -> Vec<(usize, std::result::Result<T, String>)>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let out = match catch_unwind(AssertUnwindSafe(|| f(t))) {
                Ok(Ok(v)) => Ok(v),
                Ok(Err(e)) => Err(e.to_string()),
                Err(payload) => Err(panic_message(payload.as_ref())),
            };
            (t, out)
        })
        .collect()
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn lab(cfg: &ExperimentConfig) -> LabConfig {
    LabConfig::default().with_threshold(cfg.threshold)
}

/// Monitor set of `detect` and `soundness`.
pub fn monitor_set(cfg: &ExperimentConfig) -> Vec<MonitorSpec> {
    let ours = cfg
        .taps
        .iter()
        .map(|&k| MonitorSpec::martingale(&format!("ours_tap{k}"), FeatureSource::Control(TapId(k))));
    let cm = cfg.cm.iter().map(|c| {
        MonitorSpec::conformal(
            &format!("cm_{}_tap{}", c.score.as_str(), c.tap),
            FeatureSource::Control(TapId(c.tap)),
            c.score,
        )
    });
    ours.chain(cm).collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.subcommand {
        Subcommand::Detect | Subcommand::Soundness => detect(cfg),
        Subcommand::Race => race(cfg),
        Subcommand::Intervene => intervene(cfg),
        Subcommand::Lifecycle => lifecycle(cfg),
    }
}

fn push_records(out: &mut RunOutput, trial: usize, shift: &str, records: &[MonitorRecord]) {
    let mut sorted: Vec<&MonitorRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for r in sorted {
        out.rows.push(TrialRow {
            trial,
            monitor: r.name.clone(),
            shift: shift.to_string(),
            iterations_until_alert: r.iterations(),
            alerted: r.first_alert.is_some(),
            final_m: r.final_m,
        });
        out.traces
            .extend(r.trace.iter().enumerate().map(|(episode, &m)| TraceRow {
                trial,
                monitor: r.name.clone(),
                episode,
                m_value: m,
            }));
    }
}

fn detect(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let lab = lab(cfg);
    let specs = monitor_set(cfg);
    let mut out = RunOutput {
        censor_at: cfg.max_episodes,
        ..RunOutput::default()
    };
    for &shift in &cfg.shifts {
        let results = run_trials(cfg.trials, |t| {
            run_detection_trial(&lab, &specs, shift, cfg.max_episodes, &trial_streams(cfg.seed, t))
        });
        for (t, r) in results {
            match r {
                Ok(trial) => push_records(&mut out, t, shift.as_str(), &trial.monitors),
                Err(e) => out.failed.push((t, e)),
            }
        }
    }
    if cfg.subcommand == Subcommand::Soundness {
        let stats = per_monitor(&out.rows, out.censor_at);
        let worst = stats.values().map(|s| s.alert_rate).fold(0.0, f64::max);
        out.extra_summary.insert("false_alert_rate".into(), json!(worst));
    }
    Ok(out)
}

fn race(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let lab = lab(cfg);
    let mut out = RunOutput {
        censor_at: cfg.max_episodes,
        ..RunOutput::default()
    };
    let mut outcomes = Outcomes {
        header: vec!["trial", "shift", "custom_tap", "designated", "first_correct"],
        rows: Vec::new(),
    };
    for &shift in &cfg.shifts {
        let results = run_trials(cfg.trials, |t| {
            run_monitor_race(&lab, shift, cfg.max_episodes, &trial_streams(cfg.seed, t))
        });
        for (t, r) in results {
            match r {
                Ok(race) => {
                    push_records(&mut out, t, shift.as_str(), &race.trial.monitors);
                    outcomes.rows.push(vec![
                        t.to_string(),
                        shift.to_string(),
                        race.custom_tap.0.to_string(),
                        race.designated.clone(),
                        race.first_correct().to_string(),
                    ]);
                }
                Err(e) => out.failed.push((t, e)),
            }
        }
    }
    let mut first = BTreeMap::new();
    let mut silence = BTreeMap::new();
    for &shift in &cfg.shifts {
        first.insert(
            shift.to_string(),
            json!({
                "designated": race_designated(shift),
                "accuracy": first_detection_accuracy(&out.rows, shift.as_str(), race_designated(shift)),
            }),
        );
        let custom: Vec<&TrialRow> = out
            .rows
            .iter()
            .filter(|r| r.shift == shift.as_str() && r.monitor == RACE_CUSTOM)
            .collect();
        if !custom.is_empty() {
            let quiet = custom.iter().filter(|r| !r.alerted).count() as f64 / custom.len() as f64;
            silence.insert(shift.to_string(), json!(quiet));
        }
    }
    out.extra_summary.insert("first_detection".into(), json!(first));
    out.extra_summary
        .insert("custom_silent_fraction".into(), json!(silence));
    out.outcomes = Some(outcomes);
    Ok(out)
}

/// Fraction of trials of `shift` whose designated monitor alerted no later
/// than every other monitor, computed from trial rows.
pub fn first_detection_accuracy(rows: &[TrialRow], shift: &str, designated: &str) -> f64 {
    let mut by_trial: BTreeMap<usize, Vec<&TrialRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.shift == shift) {
        by_trial.entry(r.trial).or_default().push(r);
    }
    if by_trial.is_empty() {
        return 0.0;
    }
    let wins = by_trial
        .values()
        .filter(|rs| {
            let Some(mine) = rs
                .iter()
                .find(|r| r.monitor == designated)
                .and_then(|r| r.iterations_until_alert)
            else {
                return false;
            };
            rs.iter()
                .filter(|r| r.monitor != designated)
                .all(|r| r.iterations_until_alert.is_none_or(|j| mine <= j))
        })
        .count();
    wins as f64 / by_trial.len() as f64
}

fn fmt_f64(x: f64) -> String {
    serde_json::to_string(&x).expect("finite floats serialize")
}

fn intervene(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let lab = lab(cfg);
    let mut out = RunOutput {
        censor_at: cfg.max_episodes,
        ..RunOutput::default()
    };
    let mut outcomes = Outcomes {
        header: vec![
            "trial",
            "shift",
            "intervened_at",
            "mse_pre_shift",
            "mse_correct",
            "mse_wrong",
            "mse_generic",
            "mse_none",
        ],
        rows: Vec::new(),
    };
    let mut table = BTreeMap::new();
    let mut wins = BTreeMap::new();
    for &shift in &cfg.shifts {
        let results = run_trials(cfg.trials, |t| {
            run_intervention_trial(&lab, shift, cfg.max_episodes, &trial_streams(cfg.seed, t))
        });
        let mut done = Vec::new();
        for (t, r) in results {
            match r {
                Ok(res) => {
                    push_records(&mut out, t, shift.as_str(), &res.detection.monitors);
                    let mut row = vec![
                        t.to_string(),
                        shift.to_string(),
                        res.intervened_at.to_string(),
                        fmt_f64(res.mse_pre_shift),
                    ];
                    row.extend(Arm::ALL.iter().map(|&a| fmt_f64(res.mse(a))));
                    outcomes.rows.push(row);
                    done.push(res);
                }
                Err(e) => out.failed.push((t, e)),
            }
        }
        if done.is_empty() {
            continue;
        }
        let n = done.len() as f64;
        let means: BTreeMap<&str, f64> = Arm::ALL
            .iter()
            .map(|&a| (a.as_str(), done.iter().map(|r| r.mse(a)).sum::<f64>() / n))
            .collect();
        let frac = |a: Arm, b: Arm| done.iter().filter(|r| r.mse(a) < r.mse(b)).count() as f64 / n;
        table.insert(shift.to_string(), json!(means));
        wins.insert(
            shift.to_string(),
            json!({
                "correct_below_generic": frac(Arm::Correct, Arm::Generic),
                "generic_below_none": frac(Arm::Generic, Arm::None),
                "correct_below_none": frac(Arm::Correct, Arm::None),
                "correct_below_wrong": frac(Arm::Correct, Arm::Wrong),
            }),
        );
    }
    out.extra_summary.insert("windowed_mse".into(), json!(table));
    out.extra_summary.insert("per_trial_fraction".into(), json!(wins));
    out.outcomes = Some(outcomes);
    Ok(out)
}

fn lifecycle(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (Some(lambda), Some(gamma)) = (cfg.lambda, cfg.gamma) else {
        return Err(Error::Config("lifecycle requires `lambda` and `gamma`".into()));
    };
    let base = LifecycleConfig {
        horizon: cfg.horizon,
        lambda,
        gamma,
        lab: lab(cfg),
        ..LifecycleConfig::default()
    };
    base.validate()?;
    let mut out = RunOutput {
        censor_at: cfg.horizon,
        ..RunOutput::default()
    };
    let mut outcomes = Outcomes {
        header: vec![
            "trial",
            "policy",
            "crashes",
            "shift_arrivals",
            "interventions",
            "mse_pre_shift",
            "mse_lifecycle",
        ],
        rows: Vec::new(),
    };
    let results = run_trials(cfg.trials, |t| {
        let streams = trial_streams(cfg.seed, t);
        Policy::ALL
            .iter()
            .map(|&policy| run_lifecycle(&LifecycleConfig { policy, ..base.clone() }, &streams))
            .collect::<Result<Vec<_>>>()
    });
    let mut per_policy: BTreeMap<&str, Vec<(usize, f64, f64, usize)>> = BTreeMap::new();
    for (t, r) in results {
        let reports = match r {
            Ok(v) => v,
            Err(e) => {
                out.failed.push((t, e));
                continue;
            }
        };
        for rep in reports {
            outcomes.rows.push(vec![
                t.to_string(),
                rep.policy.to_string(),
                rep.crashes.to_string(),
                rep.shift_arrivals.to_string(),
                rep.interventions_applied.len().to_string(),
                fmt_f64(rep.mse_pre_shift),
                fmt_f64(rep.mse_lifecycle),
            ]);
            per_policy.entry(rep.policy.as_str()).or_default().push((
                rep.crashes,
                rep.mse_pre_shift,
                rep.mse_lifecycle,
                rep.interventions_applied.len(),
            ));
            let records: Vec<MonitorRecord> = rep
                .monitors
                .iter()
                .zip(&rep.traces)
                .map(|(name, trace)| MonitorRecord {
                    name: name.clone(),
                    first_alert: rep
                        .alerts
                        .iter()
                        .find(|a| &a.monitor_name == name)
                        .map(|a| a.episode_index),
                    final_m: trace.last().copied().unwrap_or(1.0),
                    trace: trace.clone(),
                })
                .collect();
            push_records(&mut out, t, MIXED_SHIFT, &records);
        }
    }
    let mut policies = BTreeMap::new();
    for (policy, v) in per_policy {
        let n = v.len() as f64;
        policies.insert(
            policy.to_string(),
            json!({
                "mean_crashes": v.iter().map(|x| x.0 as f64).sum::<f64>() / n,
                "crash_free_fraction": v.iter().filter(|x| x.0 == 0).count() as f64 / n,
                "mean_mse_pre_shift": v.iter().map(|x| x.1).sum::<f64>() / n,
                "mean_mse_lifecycle": v.iter().map(|x| x.2).sum::<f64>() / n,
                "mean_interventions": v.iter().map(|x| x.3 as f64).sum::<f64>() / n,
            }),
        );
    }
    out.extra_summary.insert("policies".into(), json!(policies));
    out.outcomes = Some(outcomes);
    Ok(out)
}

/// Mean iterations (non-alerts counted as `censor_at`) and alert rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorStats {
    pub mean_iterations: f64,
    pub alert_rate: f64,
    pub trials: usize,
}

/// Per-monitor statistics keyed `shift/monitor`, computed from rows.
pub fn per_monitor(rows: &[TrialRow], censor_at: usize) -> BTreeMap<String, MonitorStats> {
    let mut groups: BTreeMap<String, Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(format!("{}/{}", r.shift, r.monitor)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let mean = rs
                .iter()
                .map(|r| r.iterations_until_alert.unwrap_or(censor_at) as f64)
                .sum::<f64>()
                / n;
            let rate = rs.iter().filter(|r| r.alerted).count() as f64 / n;
            (
                k,
                MonitorStats {
                    mean_iterations: mean,
                    alert_rate: rate,
                    trials: rs.len(),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, monitor: &str, it: Option<usize>) -> TrialRow {
        TrialRow {
            trial,
            monitor: monitor.into(),
            shift: "s".into(),
            iterations_until_alert: it,
            alerted: it.is_some(),
            final_m: 1.0,
        }
    }

    #[test]
    fn censored_means() {
        let rows = vec![row(0, "a", Some(10)), row(1, "a", None)];
        let s = per_monitor(&rows, 200);
        assert_eq!(s["s/a"].mean_iterations, 105.0);
        assert_eq!(s["s/a"].alert_rate, 0.5);
    }

    #[test]
    fn accuracy_counts_ties_as_wins() {
        let rows = vec![
            row(0, "a", Some(5)),
            row(0, "b", Some(5)),
            row(1, "a", Some(9)),
            row(1, "b", Some(3)),
            row(2, "a", None),
            row(2, "b", None),
        ];
        assert!((first_detection_accuracy(&rows, "s", "a") - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn panics_are_captured() {
        let r = run_trials(3, |t| if t == 1 { panic!("boom") } else { Ok(t) });
        assert_eq!(r[0].1, Ok(0));
        assert!(r[1].1.as_ref().unwrap_err().contains("boom"));
        assert_eq!(r[2].1, Ok(2));
    }
}
