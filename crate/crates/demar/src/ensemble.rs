//! The dual ensembles: K online+target utility networks per agent and H
//! online+target mixer stacks, with seeded initialization, random subset
//! sampling for in-target minimization, and periodic hard target sync.

use crate::error::{Error, Result};
use crate::grad::ParamBlock;
use crate::mat::Mat;
use crate::nets::{AgentNet, MixerKind, MixerNet};
use crate::rng::{RngHub, Stream};

/// The five ensemble hyperparameters plus the training constants they are
/// tuned alongside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    /// Global mixer ensemble size.
    pub h: usize,
    /// In-target subset size over the mixers.
    pub n_h: usize,
    /// Per-agent utility ensemble size.
    pub k: usize,
    /// In-target subset size over each agent's utilities.
    pub n_k: usize,
    /// Hypernet regularizer coefficient.
    pub alpha_reg: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Learning rate.
    pub lr: f64,
    /// Hard target sync period in learner steps.
    pub target_period: u64,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.n_h == 0 || self.n_h > self.h {
            return Err(Error::config(format!("need 1 <= n_h <= h, got n_h={} h={}", self.n_h, self.h)));
        }
        if self.k == 0 || self.n_k == 0 || self.n_k > self.k {
            return Err(Error::config(format!("need 1 <= n_k <= k, got n_k={} k={}", self.n_k, self.k)));
        }
        if self.alpha_reg < 0.0 {
            return Err(Error::config(format!("alpha_reg must be >= 0, got {}", self.alpha_reg)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.target_period == 0 {
            return Err(Error::config("target_period must be >= 1".to_string()));
        }
        Ok(())
    }

    /// The setting under which the dual ensemble collapses to a single
    /// network per agent plus a single mixer.
    pub fn is_degenerate(&self) -> bool {
        self.h == 1 && self.n_h == 1 && self.k == 1 && self.n_k == 1 && self.alpha_reg == 0.0
    }
}

/// Network sizing shared by every ensemble member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetDims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub agent_hidden: (usize, usize),
    pub hyper_hidden: usize,
    pub mixer: MixerKind,
}

#[derive(Clone, Debug)]
pub struct DualEnsemble {
    pub cfg: EnsembleConfig,
    pub dims: NetDims,
    /// Online utility networks, agents[i][k].
    pub agents: Vec<Vec<AgentNet>>,
    pub target_agents: Vec<Vec<AgentNet>>,
    /// Online mixer stacks, mixers[h].
    pub mixers: Vec<MixerNet>,
    pub target_mixers: Vec<MixerNet>,
    /// Learner steps taken so far.
    pub step: u64,
}

impl DualEnsemble {
    /// Every member drawn from its own named stream, targets copied from the
    /// fresh onlines.
    pub fn init(cfg: EnsembleConfig, dims: NetDims, hub: &RngHub) -> Result<Self> {
        cfg.validate()?;
        let mut agents = Vec::with_capacity(dims.n_agents);
        for i in 0..dims.n_agents {
            let mut members = Vec::with_capacity(cfg.k);
            for k in 0..cfg.k {
                let mut s = hub.stream(&format!("init:agent-{i}-{k}"));
                members.push(AgentNet::new(dims.obs_dim, dims.agent_hidden, dims.n_actions, &mut s));
            }
            agents.push(members);
        }
        let mut mixers = Vec::with_capacity(cfg.h);
        for h in 0..cfg.h {
            let mut s = hub.stream(&format!("init:mixer-{h}"));
            mixers.push(MixerNet::new(dims.mixer, dims.n_agents, dims.state_dim, dims.hyper_hidden, &mut s));
        }
        let target_agents = agents.clone();
        let target_mixers = mixers.clone();
        Ok(DualEnsemble { cfg, dims, agents, target_agents, mixers, target_mixers, step: 0 })
    }

    /// Draw the in-target subsets (𝕂 over utilities, ℍ over mixers), uniform
    /// without replacement, one pair per learner step shared by all agents.
    pub fn sample_subsets(&self, rng: &mut Stream) -> (Vec<usize>, Vec<usize>) {
        let kk = rng.distinct_sorted(self.cfg.k, self.cfg.n_k);
        let hh = rng.distinct_sorted(self.cfg.h, self.cfg.n_h);
        (kk, hh)
    }

    /// Hard copy of every online parameter into its target counterpart.
    pub fn sync_targets(&mut self) {
        self.target_agents = self.agents.clone();
        self.target_mixers = self.mixers.clone();
    }

    /// K-member mean of agent i's online Q-values for one observation.
    pub fn mean_online_q(&self, i: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dims.n_actions];
        for net in &self.agents[i] {
            for (a, v) in acc.iter_mut().zip(net.q_values(obs)?) {
                *a += v;
            }
        }
        let inv_k = 1.0 / self.cfg.k as f64;
        acc.iter_mut().for_each(|a| *a *= inv_k);
        Ok(acc)
    }

    /// Mutable parameter group for critic h's update: mixer h first, then all
    /// agent members in (i, k) order. The order is the optimizer-state
    /// contract: it must match [`DualEnsemble::group_param_count`].
    pub fn group_params_mut(&mut self, h: usize) -> Vec<&mut ParamBlock> {
        let mut out = self.mixers[h].params_mut();
        for member in self.agents.iter_mut().flatten() {
            out.extend(member.params_mut());
        }
        out
    }

    pub fn group_param_count(&self, h: usize) -> usize {
        self.mixers[h].params().len() + self.agents.iter().flatten().map(|m| m.params().len()).sum::<usize>()
    }

    /// All online parameters with their checkpoint keys, deterministic order.
    pub fn named_online_params(&self) -> Vec<(String, &ParamBlock)> {
        let mut out = Vec::new();
        for (i, members) in self.agents.iter().enumerate() {
            for (k, net) in members.iter().enumerate() {
                for p in net.params() {
                    out.push((format!("agent-{i}-{k}/{}", p.id), p));
                }
            }
        }
        for (h, mixer) in self.mixers.iter().enumerate() {
            for p in mixer.params() {
                out.push((format!("mixer-{h}/{}", p.id), p));
            }
        }
        out
    }

    pub fn named_online_params_mut(&mut self) -> Vec<(String, &mut ParamBlock)> {
        let mut out = Vec::new();
        for (i, members) in self.agents.iter_mut().enumerate() {
            for (k, net) in members.iter_mut().enumerate() {
                for p in net.params_mut() {
                    let key = format!("agent-{i}-{k}/{}", p.id);
                    out.push((key, p));
                }
            }
        }
        for (h, mixer) in self.mixers.iter_mut().enumerate() {
            for p in mixer.params_mut() {
                let key = format!("mixer-{h}/{}", p.id);
                out.push((key, p));
            }
        }
        out
    }

    /// Largest |online − target| over every parameter entry.
    pub fn max_target_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for (on, tg) in self.agents.iter().flatten().zip(self.target_agents.iter().flatten()) {
            for (a, b) in on.params().iter().zip(tg.params()) {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    gap = gap.max((x - y).abs());
                }
            }
        }
        for (on, tg) in self.mixers.iter().zip(&self.target_mixers) {
            for (a, b) in on.params().iter().zip(tg.params()) {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    gap = gap.max((x - y).abs());
                }
            }
        }
        gap
    }
}

/// Batched observation matrix from per-agent rows; convenience for tests.
pub fn obs_matrix(rows: &[Vec<f64>]) -> Mat {
    let cols = rows[0].len();
    let mut m = Mat::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        m.row_slice_mut(i).copy_from_slice(r);
    }
    m
}
