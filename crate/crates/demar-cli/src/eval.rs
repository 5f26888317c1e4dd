//! The eval command: load a checkpoint, play greedy episodes, report the
//! mean return with a confidence interval and the estimation gap.

use std::io::Write;
use std::path::Path;

use demar::checkpoint;
use demar::ensemble::DualEnsemble;
use demar::error::{Error, Result};
use demar::oracle::{estimation_gap_records, Z99};
use demar::rng::RngHub;
use demar::worlds::{episode_returns, rollout_records, JointPolicy};

use crate::config::RunConfig;
use crate::runner::{build_env, net_dims};

pub struct EvalReport {
    pub mean_return: f64,
    pub return_ci: f64,
    pub est_qtot: f64,
    pub true_qtot: f64,
    pub est_true_ratio: f64,
    pub episodes: usize,
}

struct Greedy<'a>(&'a DualEnsemble);

impl JointPolicy for Greedy<'_> {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<usize> {
        use demar::oracle::GlobalQ;
        self.0.greedy(obs).expect("greedy action")
    }
}

pub fn run_eval(
    ckpt_path: &Path,
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::config("eval needs at least one episode".to_string()));
    }
    cfg.validate()?;
    let hub = RngHub::new(seed);
    let mut env = build_env(cfg, &hub, "eval")?;
    let dims = net_dims(cfg, env.as_mut());
    let mut ens = DualEnsemble::init(cfg.ens, dims, &hub)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    checkpoint::restore(&mut ens, &ckpt)?;

    let records = {
        let mut policy = Greedy(&ens);
        rollout_records(env.as_mut(), &mut policy, cfg.ens.gamma, episodes)?
    };
    let returns = episode_returns(&records);
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let ci = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (returns.len() - 1) as f64;
        Z99 * (var / returns.len() as f64).sqrt()
    } else {
        f64::INFINITY
    };
    let gap = estimation_gap_records(&ens, &records, env.max_steps() / 2)?;

    let report = EvalReport {
        mean_return: mean,
        return_ci: ci,
        est_qtot: gap.est_mean,
        true_qtot: gap.true_mean,
        est_true_ratio: gap.ratio,
        episodes,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("eval.csv"))?);
        writeln!(f, "episodes,mean_return,return_ci,est_qtot,true_qtot,est_true_ratio")?;
        writeln!(
            f,
            "{},{},{},{},{},{}",
            report.episodes, report.mean_return, report.return_ci, report.est_qtot, report.true_qtot,
            if report.est_true_ratio.is_nan() { "NaN".to_string() } else { format!("{}", report.est_true_ratio) }
        )?;
    }
    Ok(report)
}
