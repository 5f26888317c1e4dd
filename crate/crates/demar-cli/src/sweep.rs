//! Staged hyperparameter search: first the regularizer coefficient until the
//! estimated/true ratio stops exploding, then the mixer ensemble pair, then
//! the utility ensemble pair. Each stage consumes the previous stage's choice
//! fragment and writes its own.

use std::path::{Path, PathBuf};

use demar::error::{Error, Result};

use crate::config::RunConfig;
use crate::runner::{run_train, summarize_run, RunSummary, TrainOutcome};

pub struct TrialResult {
    pub label: String,
    pub fragment: String,
    pub summary: RunSummary,
}

pub enum SweepOutcome {
    Chosen { stage: u8, fragment: String, trials: Vec<TrialResult> },
    Unresolved { stage: u8, best: String, trials: Vec<TrialResult> },
}

fn stage_dir(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}"))
}

fn choice_path(out: &Path, stage: u8) -> PathBuf {
    stage_dir(out, stage).join("choice.txt")
}

fn run_trials(
    base: &RunConfig,
    fragments: &[(String, String)],
    seed: u64,
    dir: &Path,
    threads: usize,
) -> Result<Vec<TrialResult>> {
    std::fs::create_dir_all(dir)?;
    let jobs: Vec<(usize, RunConfig, PathBuf)> = fragments
        .iter()
        .enumerate()
        .map(|(i, (label, fragment))| {
            let mut cfg = base.clone();
            cfg.apply_text(fragment)?;
            cfg.total_steps = base.sweep.steps;
            cfg.validate()?;
            Ok((i, cfg, dir.join(format!("trial-{label}"))))
        })
        .collect::<Result<Vec<_>>>()?;

    let workers = threads.max(1).min(jobs.len().max(1));
    let mut outcomes: Vec<Option<Result<TrainOutcome>>> = (0..jobs.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, cfg, trial_dir) in &jobs {
            outcomes[*i] = Some(run_train(cfg, seed, trial_dir));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut outcomes);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if j >= jobs.len() {
                        break;
                    }
                    let (i, cfg, trial_dir) = &jobs[j];
                    let out = run_train(cfg, seed, trial_dir);
                    slots.lock().unwrap()[*i] = Some(out);
                });
            }
        });
    }

    let mut results = Vec::with_capacity(jobs.len());
    for ((label, fragment), (slot, (_, _, trial_dir))) in
        fragments.iter().zip(outcomes.into_iter().zip(&jobs))
    {
        let outcome = slot.expect("trial ran")?;
        let summary = summarize_run(trial_dir, outcome)?;
        results.push(TrialResult { label: label.clone(), fragment: fragment.clone(), summary });
    }
    Ok(results)
}

/// Closest-to-calibrated selection: minimize |ratio − 1| subject to
/// ratio < ratio_max, ties broken by higher evaluation return.
fn select_calibrated<'a>(trials: &'a [TrialResult], ratio_max: f64) -> Option<&'a TrialResult> {
    let mut best: Option<&TrialResult> = None;
    for t in trials {
        let r = t.summary.est_true_ratio;
        if !r.is_finite() || r >= ratio_max {
            continue;
        }
        best = match best {
            None => Some(t),
            Some(b) => {
                let db = (b.summary.est_true_ratio - 1.0).abs();
                let dt = (r - 1.0).abs();
                if dt < db || (dt == db && t.summary.episode_return > b.summary.episode_return) {
                    Some(t)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn finish_stage(
    out: &Path,
    stage: u8,
    prior_fragment: &str,
    chosen: Option<String>,
    trials: Vec<TrialResult>,
) -> Result<SweepOutcome> {
    match chosen {
        Some(chosen_fragment) => {
            let fragment = format!("{prior_fragment}{chosen_fragment}");
            std::fs::write(choice_path(out, stage), &fragment)?;
            Ok(SweepOutcome::Chosen { stage, fragment, trials })
        }
        None => {
            // Surface the least-bad trial: smallest final ratio.
            let best = trials
                .iter()
                .min_by(|a, b| {
                    a.summary
                        .est_true_ratio
                        .partial_cmp(&b.summary.est_true_ratio)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|t| t.label.clone())
                .unwrap_or_default();
            std::fs::write(stage_dir(out, stage).join("unresolved.txt"), format!("best trial: {best}\n"))?;
            Ok(SweepOutcome::Unresolved { stage, best, trials })
        }
    }
}

pub fn run_sweep(base: &RunConfig, stage: u8, seed: u64, out: &Path, threads: usize) -> Result<SweepOutcome> {
    if !(1..=3).contains(&stage) {
        return Err(Error::config(format!("sweep stage must be 1, 2 or 3, got {stage}")));
    }
    // Stage n needs stage n-1's choice fragment.
    let prior_fragment = if stage == 1 {
        String::new()
    } else {
        let prior = choice_path(out, stage - 1);
        std::fs::read_to_string(&prior).map_err(|_| {
            Error::config(format!("stage {stage} requires stage {} results ({} missing)", stage - 1, prior.display()))
        })?
    };
    let mut staged_base = base.clone();
    staged_base.apply_text(&prior_fragment)?;

    match stage {
        1 => {
            let fragments: Vec<(String, String)> = staged_base
                .sweep
                .alpha_grid
                .iter()
                .map(|a| (format!("alpha{a}"), format!("ens.alpha_reg = {a}\n")))
                .collect();
            let trials = run_trials(&staged_base, &fragments, seed, &stage_dir(out, 1), threads)?;
            // Smallest coefficient that keeps the final ratio under the cap.
            let chosen = trials
                .iter()
                .find(|t| {
                    let r = t.summary.est_true_ratio;
                    r.is_finite() && r < staged_base.sweep.ratio_max
                })
                .map(|t| t.fragment.clone());
            finish_stage(out, 1, &prior_fragment, chosen, trials)
        }
        2 => {
            let fragments: Vec<(String, String)> = staged_base
                .sweep
                .h_grid
                .iter()
                .map(|(h, n_h)| (format!("h{h}-{n_h}"), format!("ens.h = {h}\nens.n_h = {n_h}\n")))
                .collect();
            let trials = run_trials(&staged_base, &fragments, seed, &stage_dir(out, 2), threads)?;
            let chosen = select_calibrated(&trials, staged_base.sweep.ratio_max).map(|t| t.fragment.clone());
            finish_stage(out, 2, &prior_fragment, chosen, trials)
        }
        _ => {
            let fragments: Vec<(String, String)> = staged_base
                .sweep
                .k_grid
                .iter()
                .map(|(k, n_k)| (format!("k{k}-{n_k}"), format!("ens.k = {k}\nens.n_k = {n_k}\n")))
                .collect();
            let trials = run_trials(&staged_base, &fragments, seed, &stage_dir(out, 3), threads)?;
            let chosen = select_calibrated(&trials, staged_base.sweep.ratio_max).map(|t| t.fragment.clone());
            finish_stage(out, 3, &prior_fragment, chosen, trials)
        }
    }
}
