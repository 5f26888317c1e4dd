//! The train command: rollout + learn loop with periodic greedy evaluation,
//! CSV metrics emission, and a final checkpoint.

use std::io::Write;
use std::path::Path;

use demar::checkpoint;
use demar::ensemble::{DualEnsemble, NetDims};
use demar::error::{Error, Result};
use demar::learner::{act_epsilon_greedy, Learner, ReplayBuffer, StepMetrics, Transition};
use demar::oracle::{estimation_gap_records, GlobalQ};
use demar::rng::RngHub;
use demar::worlds::{episode_returns, rollout_records, Env, GridPursuit, JointPolicy, TabularGame};

use crate::config::{EnvKind, RunConfig};

pub const CSV_HEADER: &str = "step,episode_return,loss,est_qtot,true_qtot,est_true_ratio,mean_mixer_grad,epsilon";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainOutcome {
    Completed,
    Diverged { step: u64 },
}

pub fn build_env(cfg: &RunConfig, hub: &RngHub, role: &str) -> Result<Box<dyn Env>> {
    let dynamics = hub.stream(&format!("{role}-dynamics"));
    let sensor = hub.stream(&format!("{role}-noise"));
    Ok(match cfg.env_kind {
        EnvKind::Tabular => Box::new(TabularGame::new(cfg.tabular, cfg.noise, dynamics, sensor)?),
        EnvKind::Grid => Box::new(GridPursuit::new(cfg.grid, cfg.noise, dynamics, sensor)?),
    })
}

pub fn net_dims(cfg: &RunConfig, env: &dyn Env) -> NetDims {
    NetDims {
        n_agents: env.n_agents(),
        obs_dim: env.obs_dim(),
        state_dim: env.state_dim(),
        n_actions: env.n_actions(),
        agent_hidden: cfg.agent_hidden,
        hyper_hidden: cfg.hyper_hidden,
        mixer: cfg.mixer,
    }
}

struct EnsGreedy<'a>(&'a DualEnsemble);

impl JointPolicy for EnsGreedy<'_> {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<usize> {
        self.0.greedy(obs).expect("greedy action")
    }
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x}")
    }
}

fn epsilon_at(cfg: &RunConfig, step: u64) -> f64 {
    let t = (step as f64 / cfg.anneal_steps.max(1) as f64).min(1.0);
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t
}

/// One evaluation block: greedy episodes on a fresh eval environment with
/// streams keyed by the eval ordinal. Returns (mean episode return,
/// est_qtot, true_qtot, ratio).
fn evaluate(cfg: &RunConfig, ens: &DualEnsemble, hub: &RngHub, ordinal: u64) -> Result<(f64, f64, f64, f64)> {
    let mut env = build_env(cfg, hub, &format!("eval-{ordinal}"))?;
    let mut policy = EnsGreedy(ens);
    let records = rollout_records(env.as_mut(), &mut policy, cfg.ens.gamma, cfg.eval_episodes)?;
    let returns = episode_returns(&records);
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    let cutoff = env.max_steps() / 2;
    let gap = estimation_gap_records(ens, &records, cutoff)?;
    Ok((mean_return, gap.est_mean, gap.true_mean, gap.ratio))
}

/// Run the full training loop, writing `metrics.csv` and `final.ckpt` into
/// `out`. A non-finite loss terminates the run with the partial CSV kept.
pub fn run_train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let hub = RngHub::new(seed);
    let mut env = build_env(cfg, &hub, "env")?;
    let dims = net_dims(cfg, env.as_mut());
    let ens = DualEnsemble::init(cfg.ens, dims, &hub)?;
    let mut learner = Learner::new(ens, cfg.target, cfg.optimizer, Some(cfg.clip), cfg.batch, &hub)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer, dims.n_actions);
    let mut explore = hub.stream("explore");

    let csv_path = out.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;

    let (mut state, mut obs) = env.reset();
    let mut last_metrics: Option<StepMetrics> = None;
    let mut eval_ordinal = 0u64;
    let mut outcome = TrainOutcome::Completed;

    for step in 1..=cfg.total_steps {
        let eps = epsilon_at(cfg, step);
        let actions = act_epsilon_greedy(&learner.ens, &obs, eps, &mut explore)?;
        let step_out = env.step(&actions)?;
        buffer.push(Transition {
            state: state.clone(),
            obs: obs.clone(),
            actions,
            reward: step_out.reward,
            next_state: step_out.state.clone(),
            next_obs: step_out.obs.clone(),
            done: step_out.done,
        })?;
        if step_out.done {
            let (s, o) = env.reset();
            state = s;
            obs = o;
        } else {
            state = step_out.state;
            obs = step_out.obs;
        }

        if buffer.len() >= cfg.batch {
            match learner.train_step(&buffer) {
                Ok(m) => last_metrics = Some(m),
                Err(Error::Diverged { step: s, .. }) => {
                    outcome = TrainOutcome::Diverged { step: s };
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if step % cfg.eval_interval == 0 {
            eval_ordinal += 1;
            let (ret, est, truth, ratio) = evaluate(cfg, &learner.ens, &hub, eval_ordinal)?;
            let (loss, grad) = match &last_metrics {
                Some(m) => (m.loss, m.mean_mixer_grad),
                None => (f64::NAN, f64::NAN),
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                step,
                fmt(ret),
                fmt(loss),
                fmt(est),
                fmt(truth),
                fmt(ratio),
                fmt(grad),
                fmt(eps)
            )?;
            csv.flush()?;
        }
    }

    csv.flush()?;
    checkpoint::save(&out.join("final.ckpt"), &learner.ens)?;
    Ok(outcome)
}

/// Last CSV row of a finished run, parsed into (step, return, ratio).
/// Diverged runs with no finite ratio report infinity.
pub struct RunSummary {
    pub last_step: u64,
    pub episode_return: f64,
    pub est_true_ratio: f64,
    pub diverged: bool,
}

pub fn summarize_run(out: &Path, outcome: TrainOutcome) -> Result<RunSummary> {
    let text = std::fs::read_to_string(out.join("metrics.csv"))?;
    let last = text.lines().skip(1).filter(|l| !l.trim().is_empty()).last();
    let diverged = matches!(outcome, TrainOutcome::Diverged { .. });
    match last {
        None => Ok(RunSummary {
            last_step: 0,
            episode_return: f64::NEG_INFINITY,
            est_true_ratio: f64::INFINITY,
            diverged,
        }),
        Some(line) => {
            let cols: Vec<&str> = line.split(',').collect();
            let step = cols[0].parse().unwrap_or(0);
            let ret = cols[1].parse().unwrap_or(f64::NEG_INFINITY);
            let ratio: f64 = cols[5].parse().unwrap_or(f64::INFINITY);
            let ratio = if diverged { f64::INFINITY } else { ratio };
            Ok(RunSummary { last_step: step, episode_return: ret, est_true_ratio: ratio, diverged })
        }
    }
}
