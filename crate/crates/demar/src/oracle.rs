//! Independent verification of the bias analysis the training method rests
//! on: Monte-Carlo checks of the single-agent and mixed multiagent
//! overestimation bounds, exact one-step checks of how a biased target
//! propagates through a gradient update, and live training diagnostics.
//!
//! Monte-Carlo work is split over a fixed number of shards with named
//! substreams; shards may run on any number of threads and are always
//! reduced in shard order, so results are bit-identical regardless of the
//! thread count.

use crate::ensemble::DualEnsemble;
use crate::error::{Error, Result};
use crate::grad::{NodeId, ParamBlock, Tape};
use crate::learner::{GroupOptim, OptimKind};
use crate::mat::Mat;
use crate::nets::{mix_forward, mixer_grad, MixerParams};
use crate::rng::RngHub;
use crate::worlds::{rollout_records, Env, JointPolicy};

pub use crate::targets::{mixer_grad_stats as probe_mixer_grad, GradProbe};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

const SHARDS: usize = 64;

/// A measured bias statistic against its analytic prediction band.
#[derive(Clone, Copy, Debug)]
pub struct BiasReport {
    pub measured: f64,
    pub predicted_lo: f64,
    pub predicted_hi: f64,
    pub ci_halfwidth: f64,
    pub samples: u64,
}

impl BiasReport {
    /// Pass iff [measured ± ci] intersects [predicted_lo, predicted_hi].
    pub fn pass(&self) -> bool {
        self.measured + self.ci_halfwidth >= self.predicted_lo
            && self.measured - self.ci_halfwidth <= self.predicted_hi
    }
}

/// Exact mean of the max of m i.i.d. uniforms on [-eps, eps].
pub fn expected_max_uniform(m: usize, eps: f64) -> f64 {
    eps * (m as f64 - 1.0) / (m as f64 + 1.0)
}

#[derive(Clone, Copy, Default)]
struct ShardStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl ShardStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: ShardStats) -> ShardStats {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        ShardStats { n, mean, m2 }
    }
}

/// Run `shards` independent jobs on up to `threads` workers, results indexed
/// by shard so the reduction order is fixed.
fn run_shards<T: Send>(shards: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.max(1).min(shards);
    if threads == 1 {
        return (0..shards).map(job).collect();
    }
    let mut slots: Vec<Option<T>> = (0..shards).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= shards {
                    break;
                }
                let out = job(i);
                slots_ref.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("shard completed")).collect()
}

fn shard_sizes(samples: u64) -> Vec<u64> {
    let base = samples / SHARDS as u64;
    let rem = samples % SHARDS as u64;
    (0..SHARDS as u64).map(|i| base + u64::from(i < rem)).collect()
}

/// Monte-Carlo check of the single-agent noisy-max bound: with action values
/// constant (the worst case) and i.i.d. uniform noise on [-eps, eps], the
/// expected target overestimation is exactly γ·eps·(m−1)/(m+1).
pub fn single_agent_bias_mc(
    m: usize,
    eps: f64,
    gamma: f64,
    samples: u64,
    hub: &RngHub,
    threads: usize,
) -> Result<BiasReport> {
    if samples < 10_000 {
        return Err(Error::guard(format!("need at least 1e4 samples for a usable interval, got {samples}")));
    }
    if m == 0 || eps <= 0.0 {
        return Err(Error::config("need m >= 1 and eps > 0".to_string()));
    }
    let sizes = shard_sizes(samples);
    let stats = run_shards(SHARDS, threads, |i| {
        let mut rng = hub.stream(&format!("oracle:eq5:shard-{i}"));
        let mut st = ShardStats::default();
        for _ in 0..sizes[i] {
            let mut max = f64::NEG_INFINITY;
            for _ in 0..m {
                let z = rng.uniform_in(-eps, eps);
                if z > max {
                    max = z;
                }
            }
            st.push(gamma * max);
        }
        st
    });
    let total = stats.into_iter().fold(ShardStats::default(), ShardStats::merge);
    let var = total.m2 / (total.n - 1) as f64;
    let predicted = gamma * expected_max_uniform(m, eps);
    Ok(BiasReport {
        measured: total.mean,
        predicted_lo: predicted,
        predicted_hi: predicted,
        ci_halfwidth: Z99 * (var / total.n as f64).sqrt(),
        samples: total.n,
    })
}

/// The fixed mixer used for the multiagent bias check.
pub enum LemmaMixer {
    /// All weights equal; the bound is exact: γ·N·w·E[Z].
    Linear { w: f64 },
    /// Fixed nonlinear mixer; the gradient bounds l and L are estimated
    /// empirically over the sampled noise region (plus the region corners).
    Qmix(Box<MixerParams>),
}

/// Monte-Carlo check of the multiagent bound: the mixed target bias lies in
/// [γ·N·l·E[Z], γ·N·L·E[Z]] with E[Z] the per-agent noisy-max mean.
pub fn lemma1_bias_mc(
    mixer: &LemmaMixer,
    n_agents: usize,
    m: usize,
    eps: f64,
    gamma: f64,
    samples: u64,
    hub: &RngHub,
    threads: usize,
) -> Result<BiasReport> {
    if samples < 10_000 {
        return Err(Error::guard(format!("need at least 1e4 samples for a usable interval, got {samples}")));
    }
    let e_z = expected_max_uniform(m, eps);
    let sizes = shard_sizes(samples);

    match mixer {
        LemmaMixer::Linear { w } => {
            if *w < 0.0 {
                return Err(Error::config("linear mixer weight must be >= 0".to_string()));
            }
            let stats = run_shards(SHARDS, threads, |i| {
                let mut rng = hub.stream(&format!("oracle:lemma1:shard-{i}"));
                let mut st = ShardStats::default();
                for _ in 0..sizes[i] {
                    let mut sum = 0.0;
                    for _ in 0..n_agents {
                        let mut max = f64::NEG_INFINITY;
                        for _ in 0..m {
                            let z = rng.uniform_in(-eps, eps);
                            if z > max {
                                max = z;
                            }
                        }
                        sum += max;
                    }
                    st.push(gamma * w * sum);
                }
                st
            });
            let total = stats.into_iter().fold(ShardStats::default(), ShardStats::merge);
            let var = total.m2 / (total.n - 1) as f64;
            let predicted = gamma * n_agents as f64 * w * e_z;
            Ok(BiasReport {
                measured: total.mean,
                predicted_lo: predicted,
                predicted_hi: predicted,
                ci_halfwidth: Z99 * (var / total.n as f64).sqrt(),
                samples: total.n,
            })
        }
        LemmaMixer::Qmix(params) => {
            if params.n_agents() != n_agents {
                return Err(Error::shape("lemma1_bias_mc", format!("mixer built for {} agents", params.n_agents())));
            }
            let baseline = mix_forward(params, &vec![0.0; n_agents])?;
            let shard_out = run_shards(SHARDS, threads, |i| -> Result<(ShardStats, f64, f64)> {
                let mut rng = hub.stream(&format!("oracle:lemma1:shard-{i}"));
                let mut st = ShardStats::default();
                let mut g_lo = f64::INFINITY;
                let mut g_hi = f64::NEG_INFINITY;
                let mut q = vec![0.0; n_agents];
                for _ in 0..sizes[i] {
                    for qi in q.iter_mut() {
                        let mut max = f64::NEG_INFINITY;
                        for _ in 0..m {
                            let z = rng.uniform_in(-eps, eps);
                            if z > max {
                                max = z;
                            }
                        }
                        *qi = max;
                    }
                    st.push(gamma * (mix_forward(params, &q)? - baseline));
                    for g in mixer_grad(params, &q)? {
                        g_lo = g_lo.min(g);
                        g_hi = g_hi.max(g);
                    }
                }
                Ok((st, g_lo, g_hi))
            });
            let mut total = ShardStats::default();
            let mut g_lo = f64::INFINITY;
            let mut g_hi = f64::NEG_INFINITY;
            for out in shard_out {
                let (st, lo, hi) = out?;
                total = total.merge(st);
                g_lo = g_lo.min(lo);
                g_hi = g_hi.max(hi);
            }
            // The noise region is the box [-eps, eps]^N; the mixer gradient is
            // monotone in every utility, so the corners bound it.
            for corner in [vec![-eps; n_agents], vec![eps; n_agents]] {
                for g in mixer_grad(params, &corner)? {
                    g_lo = g_lo.min(g);
                    g_hi = g_hi.max(g);
                }
            }
            let var = total.m2 / (total.n - 1) as f64;
            Ok(BiasReport {
                measured: total.mean,
                predicted_lo: gamma * n_agents as f64 * g_lo * e_z,
                predicted_hi: gamma * n_agents as f64 * g_hi * e_z,
                ci_halfwidth: Z99 * (var / total.n as f64).sqrt(),
                samples: total.n,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// One-step bias propagation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OneStepReport {
    pub dq: Vec<f64>,
    pub dq_predicted: Vec<f64>,
    pub dqtot: f64,
    pub dqtot_predicted: f64,
    /// 2·α·N·l²·Δy with l the smallest mixer weight.
    pub lower_bound: f64,
    pub max_abs_err: f64,
}

impl OneStepReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.max_abs_err < tol
    }
}

/// Exact one-step check with a frozen linear mixer: fitting a target biased
/// by Δy moves each tabular utility by 2·α·Δy·wᵢ, and the re-forwarded
/// global value by 2·α·Δy·Σwᵢ². Runs the real tape and plain-SGD optimizer,
/// not a closed-form shortcut.
pub fn theorem1_onestep(w: &[f64], dy: f64, alpha: f64) -> Result<OneStepReport> {
    if w.is_empty() {
        return Err(Error::config("need at least one mixer weight".to_string()));
    }
    if w.iter().any(|&x| x < 0.0) {
        return Err(Error::config("linear mixer weights must be >= 0".to_string()));
    }
    if alpha <= 0.0 {
        return Err(Error::config("learning rate must be > 0".to_string()));
    }
    let n = w.len();
    let q_star = vec![0.0; n];
    let mut q_param = ParamBlock::new("q", Mat::row(q_star.clone()));

    let qtot0: f64 = w.iter().zip(&q_star).map(|(&wi, &qi)| wi * qi).sum();
    let y = qtot0 + dy;

    let mut tape = Tape::new();
    let q_leaf = tape.leaf(q_param.value.clone());
    let w_node = tape.constant(Mat::row(w.to_vec()));
    let prod = tape.mul(q_leaf, w_node)?;
    let qtot = tape.sum_all(prod);
    let y_node = tape.constant(Mat::scalar(y));
    let diff = tape.sub(qtot, y_node)?;
    let loss = tape.square(diff);
    tape.backward(loss)?;

    q_param.zero_grad();
    let g = tape.grad(q_leaf).expect("leaf requires grad");
    for (o, &s) in q_param.grad.data_mut().iter_mut().zip(g.data()) {
        *o += s;
    }
    let mut optim = GroupOptim::new(OptimKind::Sgd, alpha, None);
    optim.step(&mut [&mut q_param]);

    let dq: Vec<f64> = q_param.value.data().iter().zip(&q_star).map(|(&new, &old)| new - old).collect();
    let dq_predicted: Vec<f64> = w.iter().map(|&wi| 2.0 * alpha * dy * wi).collect();
    let qtot1: f64 = w.iter().zip(q_param.value.data()).map(|(&wi, &qi)| wi * qi).sum();
    let dqtot = qtot1 - qtot0;
    let dqtot_predicted = 2.0 * alpha * dy * w.iter().map(|&wi| wi * wi).sum::<f64>();
    let l = w.iter().copied().fold(f64::INFINITY, f64::min);
    let lower_bound = 2.0 * alpha * n as f64 * l * l * dy;

    let mut max_err = (dqtot - dqtot_predicted).abs();
    for (a, b) in dq.iter().zip(&dq_predicted) {
        max_err = max_err.max((a - b).abs());
    }
    Ok(OneStepReport { dq, dq_predicted, dqtot, dqtot_predicted, lower_bound, max_abs_err: max_err })
}

#[derive(Clone, Copy, Debug)]
pub struct EluStepReport {
    pub measured: f64,
    pub predicted: f64,
    pub residual: f64,
}

/// Record a frozen nonlinear mixer on a tape with the utilities as leaves.
fn tape_mix_fixed(t: &mut Tape, params: &MixerParams, q_leaves: &[NodeId]) -> Result<NodeId> {
    match params {
        MixerParams::Qmix { w1, b1, w2, b2, alpha_elu } => {

            let mut pre: Option<NodeId> = None;
            for (i, &q) in q_leaves.iter().enumerate() {
                let w1_row = t.constant(Mat::row(w1.row_slice(i).to_vec()));
                let term = t.mul_col(w1_row, q)?;
                pre = Some(match pre {
                    None => term,
                    Some(acc) => t.add(acc, term)?,
                });
            }
            let b1_node = t.constant(Mat::row(b1.clone()));
            let pre = t.add(pre.expect("n >= 1"), b1_node)?;
            let hidden = t.elu(pre, *alpha_elu);
            let w2_node = t.constant(Mat::row(w2.clone()));
            let weighted = t.mul(hidden, w2_node)?;
            let summed = t.row_sum(weighted);
            let b2_node = t.constant(Mat::scalar(*b2));
            t.add(summed, b2_node)
        }
        MixerParams::Linear { w, b } => {
            let q = t.concat_cols(q_leaves)?;
            let w_node = t.constant(Mat::row(w.clone()));
            let prod = t.mul(q, w_node)?;
            let summed = t.row_sum(prod);
            let b_node = t.constant(Mat::scalar(*b));
            t.add(summed, b_node)
        }
    }
}

/// One-step check through the nonlinear mixer: the measured global-value
/// shift matches 2·α·Δy·Σ(∂Q_tot/∂Qᵢ)² up to the curvature term, which
/// shrinks quadratically in α.
pub fn theorem1_onestep_elu(params: &MixerParams, q0: &[f64], dy: f64, alpha: f64) -> Result<EluStepReport> {
    let n = params.n_agents();
    if q0.len() != n {
        return Err(Error::shape("theorem1_onestep_elu", format!("{} utilities for {n} agents", q0.len())));
    }
    let qtot0 = mix_forward(params, q0)?;
    let y = qtot0 + dy;

    let mut tape = Tape::new();
    let q_leaves: Vec<NodeId> = q0.iter().map(|&v| tape.leaf(Mat::scalar(v))).collect();
    let qtot = tape_mix_fixed(&mut tape, params, &q_leaves)?;
    let y_node = tape.constant(Mat::scalar(y));
    let diff = tape.sub(qtot, y_node)?;
    let loss = tape.square(diff);
    tape.backward(loss)?;

    let mut q1 = q0.to_vec();
    for (qi, &leaf) in q1.iter_mut().zip(&q_leaves) {
        let g = tape.grad(leaf).expect("leaf requires grad").at(0, 0);
        *qi -= alpha * g;
    }
    let measured = mix_forward(params, &q1)? - qtot0;
    let grads = mixer_grad(params, q0)?;
    let predicted = 2.0 * alpha * dy * grads.iter().map(|&g| g * g).sum::<f64>();
    Ok(EluStepReport { measured, predicted, residual: (measured - predicted).abs() })
}

/// Richardson-style order check: halving α should shrink the residual by
/// roughly 4 (quadratically), confirming the prediction is first-order exact.
pub fn elu_order_ratio(params: &MixerParams, q0: &[f64], dy: f64, alpha: f64) -> Result<f64> {
    let r1 = theorem1_onestep_elu(params, q0, dy, alpha)?.residual;
    let r2 = theorem1_onestep_elu(params, q0, dy, alpha / 2.0)?.residual;
    if r2 == 0.0 {
        return Err(Error::guard("residual vanished; no curvature at this point".to_string()));
    }
    Ok(r1 / r2)
}

// ---------------------------------------------------------------------------
// End-to-end gradient check
// ---------------------------------------------------------------------------

/// Central-difference check of the full training loss (squared TD error plus
/// regularizer) through agent nets, hypernets and the mixer, against the tape
/// gradients of critic 0's parameter group.
pub fn grad_check_loss(
    ens: &DualEnsemble,
    batch: &crate::targets::Batch,
    y: &[f64],
    alpha_reg: f64,
    h: f64,
    tol: f64,
) -> Result<crate::grad::FdReport> {
    use crate::learner::loss_graph;
    let mut graph = loss_graph(ens, 0, batch, y, alpha_reg, None)?;
    if !graph.loss().is_finite() {
        return Err(Error::NonFinite("loss".to_string()));
    }
    graph.tape.backward(graph.root)?;
    let analytic: Vec<Mat> = graph
        .leaves
        .iter()
        .map(|&l| graph.tape.grad(l).cloned().expect("trainable leaf"))
        .collect();

    let mut probe = ens.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let n_params = analytic.len();
    for pi in 0..n_params {
        for j in 0..analytic[pi].len() {
            let orig = {
                let mut group = probe.group_params_mut(0);
                let v = group[pi].value.data()[j];
                group[pi].value.data_mut()[j] = v + h;
                v
            };
            let f_plus = loss_graph(&probe, 0, batch, y, alpha_reg, None)?.loss();
            probe.group_params_mut(0)[pi].value.data_mut()[j] = orig - h;
            let f_minus = loss_graph(&probe, 0, batch, y, alpha_reg, None)?.loss();
            probe.group_params_mut(0)[pi].value.data_mut()[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(crate::grad::FdReport { max_rel_err: max_rel, passed: max_rel <= tol, entries_checked: checked })
}

// ---------------------------------------------------------------------------
// Estimated vs true values
// ---------------------------------------------------------------------------

/// Anything that can act greedily and score a joint state-action.
pub trait GlobalQ {
    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>>;
    fn qtot(&self, state: &[f64], obs: &[Vec<f64>], actions: &[usize]) -> Result<f64>;
}

impl GlobalQ for DualEnsemble {
    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>> {
        let mut actions = Vec::with_capacity(self.dims.n_agents);
        for i in 0..self.dims.n_agents {
            let q = self.mean_online_q(i, &obs[i])?;
            let mut best = 0;
            for (a, &v) in q.iter().enumerate().skip(1) {
                if v > q[best] {
                    best = a;
                }
            }
            actions.push(best);
        }
        Ok(actions)
    }

    /// Mean over the online mixers of the mixed K-member mean utilities.
    fn qtot(&self, state: &[f64], obs: &[Vec<f64>], actions: &[usize]) -> Result<f64> {
        let mut q = Vec::with_capacity(self.dims.n_agents);
        for i in 0..self.dims.n_agents {
            q.push(self.mean_online_q(i, &obs[i])?[actions[i]]);
        }
        let state_mat = Mat::row(state.to_vec());
        let mut sum = 0.0;
        for mixer in &self.mixers {
            let weights = mixer.hyper_forward(&state_mat)?;
            sum += weights.mix_row(0, &q);
        }
        Ok(sum * (1.0 / self.cfg.h as f64))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GapReport {
    pub est_mean: f64,
    pub true_mean: f64,
    /// est/true; NaN when the true mean is too close to zero to divide.
    pub ratio: f64,
    pub abs_gap: f64,
    pub samples: usize,
}

struct GreedyPolicy<'a> {
    q: &'a dyn GlobalQ,
}

impl JointPolicy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<usize> {
        self.q.greedy(obs).expect("greedy action")
    }
}

/// Compare the value estimate against Monte-Carlo discounted returns of the
/// frozen greedy policy. Only the first half of each episode is scored so
/// horizon truncation cannot bias the true side.
pub fn estimation_gap(q: &dyn GlobalQ, env: &mut dyn Env, gamma: f64, episodes: usize) -> Result<GapReport> {
    if episodes == 0 {
        return Err(Error::config("need at least one evaluation episode".to_string()));
    }
    let cutoff = env.max_steps() / 2;
    let mut policy = GreedyPolicy { q };
    let records = rollout_records(env, &mut policy, gamma, episodes)?;
    estimation_gap_records(q, &records, cutoff)
}

/// Gap statistics over already-collected rollout records: visits past the
/// cutoff step are ignored so truncated suffix returns do not enter.
pub fn estimation_gap_records(
    q: &dyn GlobalQ,
    records: &[Vec<crate::worlds::VisitRecord>],
    cutoff: usize,
) -> Result<GapReport> {
    let mut est_sum = 0.0;
    let mut true_sum = 0.0;
    let mut n = 0usize;
    for episode in records {
        for rec in episode {
            if rec.t >= cutoff.max(1) {
                break;
            }
            est_sum += q.qtot(&rec.state, &rec.obs, &rec.actions)?;
            true_sum += rec.ret;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::guard("no visits before the cutoff".to_string()));
    }
    let est_mean = est_sum / n as f64;
    let true_mean = true_sum / n as f64;
    let ratio = if true_mean.abs() > 1e-9 { est_mean / true_mean } else { f64::NAN };
    Ok(GapReport { est_mean, true_mean, ratio, abs_gap: est_mean - true_mean, samples: n })
}
