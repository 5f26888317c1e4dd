//! Update-target operators: the dual-ensemble min target and the baseline
//! remedies (twin-critic min, sub-average history, softmax over a joint-action
//! subset, soft Mellowmax, weighted critic blending).
//!
//! All operators are pure functions of (ensemble snapshot, batch): no tape,
//! no gradient. Terminal transitions always collapse to y = r.

use std::collections::VecDeque;

use crate::ensemble::DualEnsemble;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nets::{AgentNet, MixerNet, MixerWeights};
use crate::worlds::{joint_actions_of, joint_index};

/// Which update-target operator a run uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetSpec {
    /// Dual in-target minimization over random ensemble subsets.
    Demar,
    /// Plain per-agent max mixed by the single target mixer.
    VanillaMax,
    /// Minimum over two target critics, plain per-agent max.
    Td3Twin,
    /// Average of below-average historical target critics, joint-action max.
    SubAvg { k_hist: usize },
    /// Softmax-weighted target over a joint-action subset around the greedy
    /// joint action.
    SoftmaxSubset { beta: f64 },
    /// Soft Mellowmax in place of the per-agent max.
    SoftMellowmax { omega: f64, alpha_sm: f64 },
    /// TD3-style target with a blended online prediction in the loss.
    WcuWeighted { w: f64 },
}

impl TargetSpec {
    pub fn validate(&self, h: usize) -> Result<()> {
        match self {
            TargetSpec::Demar | TargetSpec::VanillaMax => Ok(()),
            TargetSpec::Td3Twin => {
                if h == 2 {
                    Ok(())
                } else {
                    Err(Error::config(format!("twin-critic target needs h = 2, got {h}")))
                }
            }
            TargetSpec::SubAvg { k_hist } => {
                if *k_hist >= 1 {
                    Ok(())
                } else {
                    Err(Error::config("sub-average history size must be >= 1".to_string()))
                }
            }
            TargetSpec::SoftmaxSubset { beta } => {
                if *beta >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("softmax beta must be >= 0, got {beta}")))
                }
            }
            TargetSpec::SoftMellowmax { omega, .. } => {
                if *omega > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("mellowmax omega must be > 0, got {omega}")))
                }
            }
            TargetSpec::WcuWeighted { w } => {
                if h != 2 {
                    Err(Error::config(format!("weighted critic target needs h = 2, got {h}")))
                } else if (0.0..=1.0).contains(w) {
                    Ok(())
                } else {
                    Err(Error::config(format!("critic blend weight must be in [0,1], got {w}")))
                }
            }
        }
    }
}

/// One sampled mini-batch in matrix layout.
pub struct Batch {
    pub states: Mat,
    pub next_states: Mat,
    /// Per agent: B×obs_dim.
    pub obs: Vec<Mat>,
    pub next_obs: Vec<Mat>,
    /// actions[i][b]: agent i's stored action in element b.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::shape("target", "empty batch".to_string()));
    }
    Ok(())
}

fn finish(batch: &Batch, gamma: f64, bootstrap: &[f64]) -> Vec<f64> {
    batch
        .rewards
        .iter()
        .zip(&batch.done)
        .zip(bootstrap)
        .map(|((&r, &done), &q)| if done { r } else { r + gamma * q })
        .collect()
}

/// Elementwise minimum over the selected target members' action rows,
/// then per-row max: the inner term of the dual-min target.
fn min_member_rows(ens: &DualEnsemble, i: usize, kk: &[usize], next_obs: &Mat) -> Result<Mat> {
    let mut min_rows: Option<Mat> = None;
    for &k in kk {
        let rows = ens.target_agents[i][k].forward(next_obs)?;
        min_rows = Some(match min_rows {
            None => rows,
            Some(mut acc) => {
                for (a, &r) in acc.data_mut().iter_mut().zip(rows.data()) {
                    if r < *a {
                        *a = r;
                    }
                }
                acc
            }
        });
    }
    Ok(min_rows.expect("subset is non-empty"))
}

fn row_max(rows: &Mat) -> Vec<f64> {
    (0..rows.rows())
        .map(|b| rows.row_slice(b).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Dual-min target: per-action min over the 𝕂 subset of each agent's target
/// nets (min before max — the order matters), per-agent max, then min over
/// the ℍ subset of target mixers.
pub fn demar_target(
    ens: &DualEnsemble,
    batch: &Batch,
    kk: &[usize],
    hh: &[usize],
    gamma: f64,
) -> Result<Vec<f64>> {
    check_batch(batch)?;
    let n = ens.dims.n_agents;
    let b_len = batch.len();

    let mut qbar: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let min_rows = min_member_rows(ens, i, kk, &batch.next_obs[i])?;
        qbar.push(row_max(&min_rows));
    }

    let mut mixed = vec![f64::INFINITY; b_len];
    let mut q = vec![0.0; n];
    for &h in hh {
        let weights = ens.target_mixers[h].hyper_forward(&batch.next_states)?;
        for b in 0..b_len {
            for (i, qi) in q.iter_mut().enumerate() {
                *qi = qbar[i][b];
            }
            let v = weights.mix_row(b, &q);
            if v < mixed[b] {
                mixed[b] = v;
            }
        }
    }
    Ok(finish(batch, gamma, &mixed))
}

/// The plain value-mixing target: per-agent max over the first target member,
/// mixed by the first target mixer. Kept as straight-line code so it can act
/// as the reference path for the degeneracy checks.
pub fn vanilla_target(ens: &DualEnsemble, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    check_batch(batch)?;
    let n = ens.dims.n_agents;
    let b_len = batch.len();

    let mut qbar: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let rows = ens.target_agents[i][0].forward(&batch.next_obs[i])?;
        qbar.push(row_max(&rows));
    }
    let weights = ens.target_mixers[0].hyper_forward(&batch.next_states)?;
    let mut mixed = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    for b in 0..b_len {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = qbar[i][b];
        }
        mixed[b] = weights.mix_row(b, &q);
    }
    Ok(finish(batch, gamma, &mixed))
}

/// Twin-critic target: minimum of the two target mixers over plain per-agent
/// maxes.
pub fn td3_target(ens: &DualEnsemble, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    if ens.cfg.h != 2 {
        return Err(Error::config(format!("twin-critic target needs h = 2, got {}", ens.cfg.h)));
    }
    check_batch(batch)?;
    let n = ens.dims.n_agents;
    let b_len = batch.len();

    let mut qbar: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let rows = ens.target_agents[i][0].forward(&batch.next_obs[i])?;
        qbar.push(row_max(&rows));
    }
    let w0 = ens.target_mixers[0].hyper_forward(&batch.next_states)?;
    let w1 = ens.target_mixers[1].hyper_forward(&batch.next_states)?;
    let mut mixed = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    for b in 0..b_len {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = qbar[i][b];
        }
        mixed[b] = w0.mix_row(b, &q).min(w1.mix_row(b, &q));
    }
    Ok(finish(batch, gamma, &mixed))
}

// ---------------------------------------------------------------------------
// Sub-average history target
// ---------------------------------------------------------------------------

/// One retained set of target parameters (first member per agent plus the
/// first mixer), snapshotted at a sync point.
#[derive(Clone)]
pub struct SubAvgSnapshot {
    pub agents: Vec<AgentNet>,
    pub mixer: MixerNet,
}

impl SubAvgSnapshot {
    pub fn of(ens: &DualEnsemble) -> Self {
        SubAvgSnapshot {
            agents: ens.target_agents.iter().map(|members| members[0].clone()).collect(),
            mixer: ens.target_mixers[0].clone(),
        }
    }
}

/// Ring of the most recent target snapshots, oldest evicted.
pub struct SubAvgHistory {
    k_hist: usize,
    snaps: VecDeque<SubAvgSnapshot>,
}

impl SubAvgHistory {
    pub fn new(k_hist: usize) -> Self {
        SubAvgHistory { k_hist: k_hist.max(1), snaps: VecDeque::new() }
    }

    pub fn push(&mut self, snap: SubAvgSnapshot) {
        if self.snaps.len() == self.k_hist {
            self.snaps.pop_front();
        }
        self.snaps.push_back(snap);
    }

    pub fn len(&self) -> usize {
        self.snaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snaps.is_empty()
    }
}

/// Combine one joint action's historical global values: keep the snapshots
/// strictly below the mean and average them; if every snapshot ties the mean
/// (so nothing is retained), fall back to the plain mean.
pub fn subavg_combine(vals: &[f64]) -> f64 {
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let mut kept_sum = 0.0;
    let mut kept = 0usize;
    for &v in vals {
        if v < mean {
            kept_sum += v;
            kept += 1;
        }
    }
    if kept == 0 {
        mean
    } else {
        kept_sum / kept as f64
    }
}

/// Sub-average target: per joint action, average the below-mean historical
/// global values, then max over the joint action space.
pub fn subavg_target(history: &SubAvgHistory, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    check_batch(batch)?;
    if history.is_empty() {
        return Err(Error::config("sub-average target needs at least one snapshot".to_string()));
    }
    let n = history.snaps[0].agents.len();
    let m = history.snaps[0].agents[0].n_actions;
    let ja_count = m.checked_pow(n as u32).filter(|&c| c <= 4096).ok_or_else(|| {
        Error::guard(format!("joint action space too large for sub-average enumeration ({m}^{n})"))
    })?;
    let b_len = batch.len();

    // Per snapshot: utility rows per agent and mixer weights, batch at once.
    let mut rows: Vec<Vec<Mat>> = Vec::with_capacity(history.snaps.len());
    let mut weights: Vec<MixerWeights> = Vec::with_capacity(history.snaps.len());
    for snap in &history.snaps {
        let mut per_agent = Vec::with_capacity(n);
        for i in 0..n {
            per_agent.push(snap.agents[i].forward(&batch.next_obs[i])?);
        }
        rows.push(per_agent);
        weights.push(snap.mixer.hyper_forward(&batch.next_states)?);
    }

    let mut boot = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    let mut vals = vec![0.0; history.snaps.len()];
    for b in 0..b_len {
        let mut best = f64::NEG_INFINITY;
        for ja in 0..ja_count {
            let actions = joint_actions_of(ja, m, n);
            for (snap_idx, val) in vals.iter_mut().enumerate() {
                for (i, &a) in actions.iter().enumerate() {
                    q[i] = rows[snap_idx][i].at(b, a);
                }
                *val = weights[snap_idx].mix_row(b, &q);
            }
            let combined = subavg_combine(&vals);
            if combined > best {
                best = combined;
            }
        }
        boot[b] = best;
    }
    Ok(finish(batch, gamma, &boot))
}

// ---------------------------------------------------------------------------
// Softmax over the joint-action subset
// ---------------------------------------------------------------------------

/// The joint-action subset around the greedy joint action: vary one agent's
/// action at a time, keep the rest greedy, deduplicate (the greedy action
/// itself shows up once). Entries are encoded joint indices in first-seen
/// order.
pub fn softmax_subset(greedy: &[usize], m: usize) -> Vec<usize> {
    let n = greedy.len();
    let mut subset = Vec::with_capacity(n * (m - 1) + 1);
    let mut v = greedy.to_vec();
    for i in 0..n {
        let orig = v[i];
        for a in 0..m {
            v[i] = a;
            let enc = joint_index(&v, m);
            if !subset.contains(&enc) {
                subset.push(enc);
            }
        }
        v[i] = orig;
    }
    subset
}

/// Softmax-weighted average with max-subtraction for stability. beta = 0
/// degenerates to the plain mean, beta → ∞ sharpens to the max.
pub fn softmax_weighted_avg(vals: &[f64], beta: f64) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &z in vals {
        let w = (beta * (z - max)).exp();
        num += w * z;
        den += w;
    }
    num / den
}

/// Softmax-subset target built on the single-network (first-member) path.
pub fn softmax_subset_target(ens: &DualEnsemble, batch: &Batch, gamma: f64, beta: f64) -> Result<Vec<f64>> {
    check_batch(batch)?;
    if beta < 0.0 {
        return Err(Error::config(format!("softmax beta must be >= 0, got {beta}")));
    }
    let n = ens.dims.n_agents;
    let m = ens.dims.n_actions;
    let b_len = batch.len();

    let mut rows: Vec<Mat> = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(ens.target_agents[i][0].forward(&batch.next_obs[i])?);
    }
    let weights = ens.target_mixers[0].hyper_forward(&batch.next_states)?;

    let mut boot = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    for b in 0..b_len {
        let greedy: Vec<usize> = (0..n)
            .map(|i| {
                let row = rows[i].row_slice(b);
                let mut arg = 0;
                for (a, &v) in row.iter().enumerate().skip(1) {
                    if v > row[arg] {
                        arg = a;
                    }
                }
                arg
            })
            .collect();
        let subset = softmax_subset(&greedy, m);
        let zs: Vec<f64> = subset
            .iter()
            .map(|&enc| {
                let actions = joint_actions_of(enc, m, n);
                for (i, &a) in actions.iter().enumerate() {
                    q[i] = rows[i].at(b, a);
                }
                weights.mix_row(b, &q)
            })
            .collect();
        boot[b] = softmax_weighted_avg(&zs, beta);
    }
    Ok(finish(batch, gamma, &boot))
}

// ---------------------------------------------------------------------------
// Soft Mellowmax
// ---------------------------------------------------------------------------

/// Soft Mellowmax of one action-value row:
/// (1/ω)·log Σ_a softmax(α·q)_a · e^{ω·q_a}. Computed entirely in log space
/// with max-subtraction on both exponentials, so neither large |q|, large ω,
/// nor negative α can overflow. Always lies in [min q, max q].
pub fn soft_mellowmax(q: &[f64], omega: f64, alpha_sm: f64) -> f64 {
    debug_assert!(omega > 0.0);
    let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_aq = q.iter().map(|&v| alpha_sm * v).fold(f64::NEG_INFINITY, f64::max);
    // log of the softmax normalizer.
    let ln_z = q.iter().map(|&v| (alpha_sm * v - max_aq).exp()).sum::<f64>().ln();
    // log of the unnormalized weighted sum: t_a = α·q_a − max_aq + ω·(q_a − max_q).
    let mut max_t = f64::NEG_INFINITY;
    for &v in q {
        let t = alpha_sm * v - max_aq + omega * (v - max_q);
        if t > max_t {
            max_t = t;
        }
    }
    let lse = max_t
        + q.iter()
            .map(|&v| (alpha_sm * v - max_aq + omega * (v - max_q) - max_t).exp())
            .sum::<f64>()
            .ln();
    max_q + (lse - ln_z) / omega
}

/// Soft-Mellowmax target: replaces each agent's max with the soft Mellowmax
/// before mixing (single-network path).
pub fn soft_mellowmax_target(
    ens: &DualEnsemble,
    batch: &Batch,
    gamma: f64,
    omega: f64,
    alpha_sm: f64,
) -> Result<Vec<f64>> {
    check_batch(batch)?;
    if omega <= 0.0 {
        return Err(Error::config(format!("mellowmax omega must be > 0, got {omega}")));
    }
    let n = ens.dims.n_agents;
    let b_len = batch.len();

    let mut qbar: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let rows = ens.target_agents[i][0].forward(&batch.next_obs[i])?;
        qbar.push((0..b_len).map(|b| soft_mellowmax(rows.row_slice(b), omega, alpha_sm)).collect());
    }
    let weights = ens.target_mixers[0].hyper_forward(&batch.next_states)?;
    let mut boot = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    for b in 0..b_len {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = qbar[i][b];
        }
        boot[b] = weights.mix_row(b, &q);
    }
    Ok(finish(batch, gamma, &boot))
}

// ---------------------------------------------------------------------------
// Weighted critic blending
// ---------------------------------------------------------------------------

/// Blend of the updating critic's prediction with the other critic's:
/// w·q_h + (1−w)·q_p.
pub fn wcu_blend(q_h: f64, q_p: f64, w: f64) -> f64 {
    w * q_h + (1.0 - w) * q_p
}

/// Blended online predictions for critic h against its twin (the loss input
/// for the weighted-critic update; the target side is the twin-critic min).
pub fn wcu_mix_prediction(ens: &DualEnsemble, batch: &Batch, h: usize, w: f64) -> Result<Vec<f64>> {
    if ens.cfg.h != 2 {
        return Err(Error::config(format!("weighted critic blend needs h = 2, got {}", ens.cfg.h)));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::config(format!("critic blend weight must be in [0,1], got {w}")));
    }
    check_batch(batch)?;
    let p = 1 - h;
    let qh = online_qtot_plain(ens, h, batch)?;
    let qp = online_qtot_plain(ens, p, batch)?;
    Ok(qh.iter().zip(&qp).map(|(&a, &b)| wcu_blend(a, b, w)).collect())
}

/// Plain-forward online Q_tot for critic h at the stored batch actions:
/// K-member mean utilities mixed by online mixer h. This is the non-tape
/// mirror of the training prediction.
pub fn online_qtot_plain(ens: &DualEnsemble, h: usize, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(batch)?;
    let n = ens.dims.n_agents;
    let b_len = batch.len();
    let q_sel = online_mean_selected_q(ens, batch)?;
    let weights = ens.mixers[h].hyper_forward(&batch.states)?;
    let mut out = vec![0.0; b_len];
    let mut q = vec![0.0; n];
    for b in 0..b_len {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = q_sel[i][b];
        }
        out[b] = weights.mix_row(b, &q);
    }
    Ok(out)
}


/// K-member mean online utility of each agent at the stored batch actions:
/// q_sel[i][b]. Multiplies by a precomputed 1/K so the arithmetic matches the
/// tape builder bitwise.
pub fn online_mean_selected_q(ens: &DualEnsemble, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let n = ens.dims.n_agents;
    let b_len = batch.len();
    let inv_k = 1.0 / ens.cfg.k as f64;
    let mut q_sel: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![0.0; b_len];
        for member in &ens.agents[i] {
            let rows = member.forward(&batch.obs[i])?;
            for (b, a) in acc.iter_mut().enumerate() {
                *a += rows.at(b, batch.actions[i][b]);
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv_k);
        q_sel.push(acc);
    }
    Ok(q_sel)
}

/// Mean and max of the closed-form mixer gradient over the batch, all agents
/// and all online mixers, evaluated at the online mean utilities.
#[derive(Clone, Copy, Debug)]
pub struct GradProbe {
    pub mean: f64,
    pub max: f64,
}

pub fn mixer_grad_stats(ens: &DualEnsemble, batch: &Batch) -> Result<GradProbe> {
    check_batch(batch)?;
    let n = ens.dims.n_agents;
    let b_len = batch.len();
    let q_sel = online_mean_selected_q(ens, batch)?;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut count = 0usize;
    let mut q = vec![0.0; n];
    let mut g = vec![0.0; n];
    for mixer in &ens.mixers {
        let weights = mixer.hyper_forward(&batch.states)?;
        for b in 0..b_len {
            for (i, qi) in q.iter_mut().enumerate() {
                *qi = q_sel[i][b];
            }
            weights.grad_row(b, &q, &mut g);
            for &gi in &g {
                sum += gi;
                if gi > max {
                    max = gi;
                }
            }
            count += n;
        }
    }
    Ok(GradProbe { mean: sum / count as f64, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{EnsembleConfig, NetDims};
    use crate::nets::MixerKind;
    use crate::rng::RngHub;

    fn dims() -> NetDims {
        NetDims {
            n_agents: 2,
            obs_dim: 4,
            state_dim: 5,
            n_actions: 3,
            agent_hidden: (6, 6),
            hyper_hidden: 4,
            mixer: MixerKind::QmixElu { l_h: 3, alpha_elu: 1.0 },
        }
    }

    fn cfg(h: usize, n_h: usize, k: usize, n_k: usize) -> EnsembleConfig {
        EnsembleConfig { h, n_h, k, n_k, alpha_reg: 0.0, gamma: 0.9, lr: 1e-3, target_period: 10 }
    }

    fn random_batch(seed: u64, b_len: usize, d: &NetDims) -> Batch {
        let hub = RngHub::new(seed);
        let mut s = hub.stream("batch");
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| s.uniform_in(-1.0, 1.0)).collect())
        };
        let states = mat(b_len, d.state_dim);
        let next_states = mat(b_len, d.state_dim);
        let obs: Vec<Mat> = (0..d.n_agents).map(|_| mat(b_len, d.obs_dim)).collect();
        let next_obs: Vec<Mat> = (0..d.n_agents).map(|_| mat(b_len, d.obs_dim)).collect();
        let actions: Vec<Vec<usize>> =
            (0..d.n_agents).map(|_| (0..b_len).map(|_| s.below(d.n_actions)).collect()).collect();
        let rewards: Vec<f64> = (0..b_len).map(|_| s.uniform()).collect();
        let mut done = vec![false; b_len];
        done[b_len - 1] = true;
        Batch { states, next_states, obs, next_obs, actions, rewards, done }
    }

    #[test]
    fn min_before_max_order() {
        // Two members with per-action values [1, 3] and [2, 2.5]:
        // elementwise min [1, 2.5], max 2.5. Max-before-min would give 2.5
        // here too, so also check a case where order changes the answer:
        // [1, 3] and [4, 0]: min [1, 0] -> 1.0, max-then-min would be 3.
        let a: [f64; 2] = [1.0, 3.0];
        let b = [2.0, 2.5];
        let min: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| x.min(y)).collect();
        assert_eq!(min.iter().copied().fold(f64::NEG_INFINITY, f64::max), 2.5);

        let c = [4.0, 0.0];
        let min2: Vec<f64> = a.iter().zip(&c).map(|(&x, &y)| x.min(y)).collect();
        let min_then_max = min2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_then_min = a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            .min(c.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        assert_eq!(min_then_max, 1.0);
        assert_eq!(max_then_min, 3.0);
    }

    #[test]
    fn mixer_min_and_reward_composition() {
        // min over mixer values {5.0, 4.8}, r = 1, gamma = 0.9 -> 5.32.
        let mixed = 5.0f64.min(4.8);
        assert!((1.0 + 0.9 * mixed - 5.32).abs() < 1e-12);
    }

    #[test]
    fn demar_degenerates_to_vanilla_on_singletons() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(3)).unwrap();
        for trial in 0..100 {
            let batch = random_batch(1000 + trial, 6, &d);
            let demar = demar_target(&ens, &batch, &[0], &[0], 0.9).unwrap();
            let vanilla = vanilla_target(&ens, &batch, 0.9).unwrap();
            assert_eq!(demar, vanilla, "trial {trial}");
        }
    }

    #[test]
    fn gamma_zero_targets_equal_rewards() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(3)).unwrap();
        let batch = random_batch(7, 5, &d);
        let y = vanilla_target(&ens, &batch, 0.0).unwrap();
        assert_eq!(y, batch.rewards);
    }

    #[test]
    fn td3_equals_demar_with_full_twin_subset() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(2, 2, 1, 1), d, &RngHub::new(5)).unwrap();
        for trial in 0..50 {
            let batch = random_batch(2000 + trial, 4, &d);
            let td3 = td3_target(&ens, &batch, 0.9).unwrap();
            let demar = demar_target(&ens, &batch, &[0], &[0, 1], 0.9).unwrap();
            assert_eq!(td3, demar, "trial {trial}");
        }
    }

    #[test]
    fn td3_identical_twins_equal_vanilla() {
        let d = dims();
        let mut ens = DualEnsemble::init(cfg(2, 2, 1, 1), d, &RngHub::new(5)).unwrap();
        // Make mixer 1 a bitwise copy of mixer 0.
        ens.mixers[1] = ens.mixers[0].clone();
        ens.sync_targets();
        let batch = random_batch(77, 4, &d);
        assert_eq!(td3_target(&ens, &batch, 0.9).unwrap(), vanilla_target(&ens, &batch, 0.9).unwrap());
    }

    #[test]
    fn td3_requires_twin_ensemble() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(3, 2, 1, 1), d, &RngHub::new(5)).unwrap();
        let batch = random_batch(8, 3, &d);
        assert!(td3_target(&ens, &batch, 0.9).is_err());
    }

    #[test]
    fn subavg_combine_examples() {
        assert_eq!(subavg_combine(&[1.0, 2.0, 6.0]), 1.5);
        assert_eq!(subavg_combine(&[4.0, 4.0, 4.0]), 4.0);
        assert_eq!(subavg_combine(&[2.5]), 2.5);
    }

    #[test]
    fn subavg_single_snapshot_equals_vanilla() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(9)).unwrap();
        let mut history = SubAvgHistory::new(1);
        history.push(SubAvgSnapshot::of(&ens));
        for trial in 0..20 {
            let batch = random_batch(3000 + trial, 5, &d);
            let sub = subavg_target(&history, &batch, 0.9).unwrap();
            let vanilla = vanilla_target(&ens, &batch, 0.9).unwrap();
            for (a, b) in sub.iter().zip(&vanilla) {
                assert_eq!(a, b, "trial {trial}");
            }
        }
    }

    #[test]
    fn subavg_ring_evicts_oldest() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(9)).unwrap();
        let mut history = SubAvgHistory::new(2);
        for _ in 0..5 {
            history.push(SubAvgSnapshot::of(&ens));
        }
        assert_eq!(history.len(), 2);
    }

    #[test]
    fn subavg_empty_history_rejected() {
        let d = dims();
        let history = SubAvgHistory::new(3);
        let batch = random_batch(1, 2, &d);
        assert!(subavg_target(&history, &batch, 0.9).is_err());
    }

    #[test]
    fn softmax_subset_size() {
        // n = 2 agents, m = 3 actions, greedy (1, 2): five distinct joint
        // actions (the greedy one deduplicated).
        let subset = softmax_subset(&[1, 2], 3);
        assert_eq!(subset.len(), 5);
        let decoded: Vec<Vec<usize>> = subset.iter().map(|&e| joint_actions_of(e, 3, 2)).collect();
        assert!(decoded.contains(&vec![1, 2]));
        assert!(decoded.contains(&vec![0, 2]));
        assert!(decoded.contains(&vec![2, 2]));
        assert!(decoded.contains(&vec![1, 0]));
        assert!(decoded.contains(&vec![1, 1]));
    }

    #[test]
    fn softmax_weight_limits() {
        let vals = [1.0, 2.0, 4.0];
        let flat = softmax_weighted_avg(&vals, 0.0);
        assert!((flat - 7.0 / 3.0).abs() < 1e-12);
        let sharp = softmax_weighted_avg(&vals, 1e6);
        assert!((sharp - 4.0).abs() < 1e-9);
        // Stability under huge values.
        let big = [1e6, 2e6];
        assert!(softmax_weighted_avg(&big, 5.0).is_finite());
    }

    #[test]
    fn soft_mellowmax_examples() {
        assert_eq!(soft_mellowmax(&[3.7], 1.0, 0.5), 3.7);
        assert_eq!(soft_mellowmax(&[0.0, 0.0], 2.0, 1.0), 0.0);
        let v = soft_mellowmax(&[0.0, 1.0], 1.0, 0.0);
        let expect = ((1.0 + std::f64::consts::E) / 2.0).ln(); // 0.6201145...
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.620115).abs() < 1e-6);
    }

    #[test]
    fn soft_mellowmax_within_range_and_stable() {
        let hub = RngHub::new(31);
        let mut s = hub.stream("sm");
        for _ in 0..1000 {
            let q: Vec<f64> = (0..4).map(|_| s.uniform_in(-50.0, 50.0)).collect();
            let omega = s.uniform_in(0.05, 5.0);
            let alpha = s.uniform_in(-10.0, 10.0);
            let v = soft_mellowmax(&q, omega, alpha);
            let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
        // ω·q would overflow a naive implementation.
        assert!(soft_mellowmax(&[500.0, 900.0], 5.0, 10.0).is_finite());
    }

    #[test]
    fn soft_targets_never_exceed_vanilla() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(13)).unwrap();
        for trial in 0..30 {
            let batch = random_batch(4000 + trial, 6, &d);
            let vanilla = vanilla_target(&ens, &batch, 0.9).unwrap();
            let sm = soft_mellowmax_target(&ens, &batch, 0.9, 1.0, 1.0).unwrap();
            let sq = softmax_subset_target(&ens, &batch, 0.9, 0.5).unwrap();
            for b in 0..batch.len() {
                assert!(sm[b] <= vanilla[b] + 1e-9, "mellowmax exceeded max at {b}");
                assert!(sq[b] <= vanilla[b] + 1e-9, "softmax exceeded max at {b}");
            }
        }
    }

    #[test]
    fn all_operators_agree_on_terminals() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(2, 2, 2, 2), d, &RngHub::new(17)).unwrap();
        let mut batch = random_batch(5000, 4, &d);
        batch.done.iter_mut().for_each(|x| *x = true);
        let mut history = SubAvgHistory::new(2);
        history.push(SubAvgSnapshot::of(&ens));
        let ys = [
            demar_target(&ens, &batch, &[0, 1], &[0, 1], 0.9).unwrap(),
            vanilla_target(&ens, &batch, 0.9).unwrap(),
            td3_target(&ens, &batch, 0.9).unwrap(),
            subavg_target(&history, &batch, 0.9).unwrap(),
            softmax_subset_target(&ens, &batch, 0.9, 1.0).unwrap(),
            soft_mellowmax_target(&ens, &batch, 0.9, 1.0, 1.0).unwrap(),
        ];
        for y in &ys {
            assert_eq!(y, &batch.rewards);
        }
    }

    #[test]
    fn wcu_blend_examples() {
        assert_eq!(wcu_blend(2.0, 4.0, 0.75), 2.5);
        assert_eq!(wcu_blend(2.0, 4.0, 1.0), 2.0);
        assert_eq!(wcu_blend(2.0, 4.0, 0.5), wcu_blend(4.0, 2.0, 0.5));
    }

    #[test]
    fn wcu_prediction_symmetry_and_errors() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(2, 2, 1, 1), d, &RngHub::new(19)).unwrap();
        let batch = random_batch(6000, 4, &d);
        let p0 = wcu_mix_prediction(&ens, &batch, 0, 0.5).unwrap();
        let p1 = wcu_mix_prediction(&ens, &batch, 1, 0.5).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-12);
        }
        let pure = wcu_mix_prediction(&ens, &batch, 0, 1.0).unwrap();
        let q0 = online_qtot_plain(&ens, 0, &batch).unwrap();
        assert_eq!(pure, q0);
        assert!(wcu_mix_prediction(&ens, &batch, 0, 1.5).is_err());
        let ens3 = DualEnsemble::init(cfg(3, 2, 1, 1), d, &RngHub::new(19)).unwrap();
        assert!(wcu_mix_prediction(&ens3, &batch, 0, 0.5).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let d = dims();
        let ens = DualEnsemble::init(cfg(1, 1, 1, 1), d, &RngHub::new(3)).unwrap();
        let batch = Batch {
            states: Mat::zeros(0, d.state_dim),
            next_states: Mat::zeros(0, d.state_dim),
            obs: vec![Mat::zeros(0, d.obs_dim); 2],
            next_obs: vec![Mat::zeros(0, d.obs_dim); 2],
            actions: vec![vec![]; 2],
            rewards: vec![],
            done: vec![],
        };
        assert!(demar_target(&ens, &batch, &[0], &[0], 0.9).is_err());
    }

    #[test]
    fn demar_monotone_in_subset_sizes_nested() {
        // Growing the min-subset along nested prefixes can only lower the
        // target, both over mixers and (via mixer monotonicity) over
        // utilities.
        let d = dims();
        let ens = DualEnsemble::init(cfg(4, 4, 4, 4), d, &RngHub::new(23)).unwrap();
        let hub = RngHub::new(23);
        let mut perm_rng = hub.stream("perm");
        for trial in 0..100 {
            let batch = random_batch(7000 + trial, 4, &d);
            let hperm = perm_rng.distinct_sorted(4, 4);
            let kperm = perm_rng.distinct_sorted(4, 4);
            let mut last = vec![f64::INFINITY; batch.len()];
            for n_h in 1..=4 {
                let y = demar_target(&ens, &batch, &kperm[..1], &hperm[..n_h], 0.9).unwrap();
                for (b, (&cur, &prev)) in y.iter().zip(&last).enumerate() {
                    assert!(cur <= prev + 1e-12, "n_h={n_h} b={b}");
                }
                last = y;
            }
            let mut last = vec![f64::INFINITY; batch.len()];
            for n_k in 1..=4 {
                let y = demar_target(&ens, &batch, &kperm[..n_k], &hperm[..1], 0.9).unwrap();
                for (b, (&cur, &prev)) in y.iter().zip(&last).enumerate() {
                    assert!(cur <= prev + 1e-12, "n_k={n_k} b={b}");
                }
                last = y;
            }
        }
    }
}
