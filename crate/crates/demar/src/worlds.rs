//! Desk-scale cooperative environments with injectable sensor noise.
//!
//! Noise is strictly sensor-side: it perturbs the emitted observations and
//! global state but never the underlying dynamics, which draw from their own
//! stream. [`TabularGame`] is small enough for exact joint-action value
//! iteration, so estimation bias can be measured against ground truth;
//! [`GridPursuit`] is a scripted predator-prey task in the same interface.

use crate::error::{Error, Result};
use crate::rng::{RngHub, Stream};

/// Per-feature i.i.d. sensor noise applied to every emitted observation and
/// state feature, resampled each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Closed-open interval [lo, hi).
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Uniform { lo, hi } => {
                if hi > lo {
                    Ok(())
                } else {
                    Err(Error::config(format!("uniform noise needs hi > lo, got [{lo}, {hi})")))
                }
            }
            NoiseSpec::Gaussian { std, .. } => {
                if *std >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("gaussian noise needs std >= 0, got {std}")))
                }
            }
        }
    }

    pub fn apply(&self, features: &mut [f64], rng: &mut Stream) {
        match self {
            NoiseSpec::None => {}
            NoiseSpec::Uniform { lo, hi } => {
                for f in features {
                    *f += rng.uniform_in(*lo, *hi);
                }
            }
            NoiseSpec::Gaussian { mean, std } => {
                for f in features {
                    *f += rng.gaussian(*mean, *std);
                }
            }
        }
    }
}

pub struct StepOut {
    pub reward: f64,
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub done: bool,
}

pub trait Env {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn reset(&mut self) -> (Vec<f64>, Vec<Vec<f64>>);
    fn step(&mut self, actions: &[usize]) -> Result<StepOut>;
    /// Discrete internal state, for environments that have one.
    fn state_index(&self) -> Option<usize> {
        None
    }
}

// ---------------------------------------------------------------------------
// Tabular Markov game
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TabularCfg {
    pub states: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// Weight of the non-factored reward component in [0, 1]. Low values keep
    /// the per-state best joint action representable by per-agent argmaxes.
    pub coupling: f64,
    /// Rewards are drawn in [0, reward_scale).
    pub reward_scale: f64,
    /// Seed for table generation; independent of the run's master seed so
    /// every run of an experiment plays the same game.
    pub table_seed: u64,
}

impl TabularCfg {
    pub fn joint_actions(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.n_agents == 0 || self.n_actions == 0 || self.horizon == 0 {
            return Err(Error::config("tabular game dims must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::config(format!("coupling must be in [0,1], got {}", self.coupling)));
        }
        if self.reward_scale <= 0.0 {
            return Err(Error::config(format!("reward_scale must be > 0, got {}", self.reward_scale)));
        }
        let entries = self.states * self.joint_actions() * self.states;
        if entries > 10_000_000 {
            return Err(Error::guard(format!("tabular game too large: {entries} transition entries")));
        }
        Ok(())
    }
}

/// Encode a joint action with agent 0 least significant.
pub fn joint_index(actions: &[usize], m: usize) -> usize {
    let mut idx = 0;
    for &a in actions.iter().rev() {
        idx = idx * m + a;
    }
    idx
}

/// Inverse of [`joint_index`].
pub fn joint_actions_of(idx: usize, m: usize, n_agents: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_agents);
    let mut rest = idx;
    for _ in 0..n_agents {
        out.push(rest % m);
        rest /= m;
    }
    out
}

pub struct TabularGame {
    pub cfg: TabularCfg,
    /// transition[s][ja] -> row of next-state probabilities (rows sum to 1).
    transition: Vec<Vec<f64>>,
    /// reward[s * JA + ja].
    reward: Vec<f64>,
    noise: NoiseSpec,
    dynamics: Stream,
    sensor: Stream,
    state: usize,
    steps: usize,
    done: bool,
}

impl TabularGame {
    /// Deterministic table generation from `cfg.table_seed`. Rewards are a
    /// convex blend of per-agent terms (mean of base_i(s, a_i)) and a joint
    /// coupling term, all in [0, 1).
    pub fn new(cfg: TabularCfg, noise: NoiseSpec, dynamics: Stream, sensor: Stream) -> Result<Self> {
        cfg.validate()?;
        noise.validate()?;
        let table_hub = RngHub::new(cfg.table_seed);
        let mut t_rng = table_hub.stream("tabular:transitions");
        let mut r_rng = table_hub.stream("tabular:rewards");

        let ja_count = cfg.joint_actions();
        let mut transition = Vec::with_capacity(cfg.states * ja_count);
        for _ in 0..cfg.states * ja_count {
            let mut row: Vec<f64> = (0..cfg.states).map(|_| -((1.0 - t_rng.uniform()).ln())).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            transition.push(row);
        }

        // base[i][s][a] per-agent reward tables, then blend with coupling.
        let mut base = vec![vec![0.0; cfg.states * cfg.n_actions]; cfg.n_agents];
        for table in base.iter_mut() {
            for v in table.iter_mut() {
                *v = r_rng.uniform();
            }
        }
        let mut reward = vec![0.0; cfg.states * ja_count];
        for s in 0..cfg.states {
            for ja in 0..ja_count {
                let actions = joint_actions_of(ja, cfg.n_actions, cfg.n_agents);
                let mean_base: f64 = actions
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| base[i][s * cfg.n_actions + a])
                    .sum::<f64>()
                    / cfg.n_agents as f64;
                let joint = r_rng.uniform();
                reward[s * ja_count + ja] = cfg.reward_scale * ((1.0 - cfg.coupling) * mean_base + cfg.coupling * joint);
            }
        }

        Ok(TabularGame {
            cfg,
            transition,
            reward,
            noise,
            dynamics,
            sensor,
            state: 0,
            steps: 0,
            done: true,
        })
    }

    /// Build directly from explicit tables (used by the analytic tests).
    pub fn from_tables(
        cfg: TabularCfg,
        transition: Vec<Vec<f64>>,
        reward: Vec<f64>,
        noise: NoiseSpec,
        dynamics: Stream,
        sensor: Stream,
    ) -> Result<Self> {
        cfg.validate()?;
        let ja = cfg.joint_actions();
        if transition.len() != cfg.states * ja || reward.len() != cfg.states * ja {
            return Err(Error::config("table sizes do not match cfg".to_string()));
        }
        for row in &transition {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!("transition row sums to {sum}")));
            }
        }
        Ok(TabularGame { cfg, transition, reward, noise, dynamics, sensor, state: 0, steps: 0, done: true })
    }

    pub fn transition_row(&self, s: usize, ja: usize) -> &[f64] {
        &self.transition[s * self.cfg.joint_actions() + ja]
    }

    pub fn reward_at(&self, s: usize, ja: usize) -> f64 {
        self.reward[s * self.cfg.joint_actions() + ja]
    }

    fn emit_state(&mut self) -> Vec<f64> {
        let mut f = vec![0.0; self.cfg.states];
        f[self.state] = 1.0;
        self.noise.apply(&mut f, &mut self.sensor);
        f
    }

    fn emit_obs(&mut self) -> Vec<Vec<f64>> {
        let mut all = Vec::with_capacity(self.cfg.n_agents);
        for _ in 0..self.cfg.n_agents {
            let mut f = vec![0.0; self.cfg.states];
            f[self.state] = 1.0;
            self.noise.apply(&mut f, &mut self.sensor);
            all.push(f);
        }
        all
    }
}

impl Env for TabularGame {
    fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    fn n_actions(&self) -> usize {
        self.cfg.n_actions
    }

    fn obs_dim(&self) -> usize {
        self.cfg.states
    }

    fn state_dim(&self) -> usize {
        self.cfg.states
    }

    fn max_steps(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.state = self.dynamics.below(self.cfg.states);
        self.steps = 0;
        self.done = false;
        (self.emit_state(), self.emit_obs())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOut> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if actions.len() != self.cfg.n_agents || actions.iter().any(|&a| a >= self.cfg.n_actions) {
            return Err(Error::shape("env_step", format!("joint action {actions:?}")));
        }
        let ja = joint_index(actions, self.cfg.n_actions);
        let reward = self.reward_at(self.state, ja);
        // Inverse-CDF sample of the next state from the dynamics stream.
        let u = self.dynamics.uniform();
        let row = self.transition_row(self.state, ja);
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (s, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = s;
                break;
            }
        }
        self.state = next;
        self.steps += 1;
        if self.steps >= self.cfg.horizon {
            self.done = true;
        }
        Ok(StepOut { reward, state: self.emit_state(), obs: self.emit_obs(), done: self.done })
    }

    fn state_index(&self) -> Option<usize> {
        Some(self.state)
    }
}

/// Exact joint-action Q-values and state values from value iteration.
pub struct SolvedGame {
    /// q[s * JA + ja]
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl SolvedGame {
    pub fn q_at(&self, s: usize, ja: usize, ja_count: usize) -> f64 {
        self.q[s * ja_count + ja]
    }

    /// State value averaged over the uniform start distribution.
    pub fn v_start(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len() as f64
    }
}

/// Value iteration over joint actions to sup-norm residual < tol.
pub fn solve_optimal_q(game: &TabularGame, gamma: f64, tol: f64) -> Result<SolvedGame> {
    let s_count = game.cfg.states;
    let ja_count = game.cfg.joint_actions();
    if s_count * ja_count > 1_000_000 {
        return Err(Error::guard(format!("value iteration guard exceeded: {} entries", s_count * ja_count)));
    }
    let mut v = vec![0.0; s_count];
    let mut q = vec![0.0; s_count * ja_count];
    let max_iter = 200_000;
    for it in 0..max_iter {
        let mut residual = 0.0f64;
        for s in 0..s_count {
            let mut best = f64::NEG_INFINITY;
            for ja in 0..ja_count {
                let row = game.transition_row(s, ja);
                let cont: f64 = row.iter().zip(&v).map(|(&p, &vv)| p * vv).sum();
                let qv = game.reward_at(s, ja) + gamma * cont;
                q[s * ja_count + ja] = qv;
                if qv > best {
                    best = qv;
                }
            }
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if residual < tol {
            return Ok(SolvedGame { q, v, iterations: it + 1, residual });
        }
    }
    Err(Error::guard("value iteration did not converge".to_string()))
}

// ---------------------------------------------------------------------------
// Grid pursuit
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCfg {
    pub size: usize,
    pub predators: usize,
    pub capture_radius: usize,
    pub horizon: usize,
}

/// Predators (the learners) chase one scripted prey on a bounded grid. The
/// prey greedily maximizes its minimum Manhattan distance to the predators,
/// ties broken in fixed move order. +10 on capture, -0.1 per step.
pub struct GridPursuit {
    pub cfg: GridCfg,
    noise: NoiseSpec,
    dynamics: Stream,
    sensor: Stream,
    predators: Vec<(i32, i32)>,
    prey: (i32, i32),
    steps: usize,
    done: bool,
}

const MOVES: [(i32, i32); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

impl GridPursuit {
    pub fn new(cfg: GridCfg, noise: NoiseSpec, dynamics: Stream, sensor: Stream) -> Result<Self> {
        if cfg.size < 2 || cfg.predators == 0 || cfg.horizon == 0 {
            return Err(Error::config("grid pursuit needs size >= 2, predators >= 1, horizon >= 1".to_string()));
        }
        noise.validate()?;
        Ok(GridPursuit {
            cfg,
            noise,
            dynamics,
            sensor,
            predators: vec![(0, 0); cfg.predators],
            prey: (0, 0),
            steps: 0,
            done: true,
        })
    }

    fn dist(a: (i32, i32), b: (i32, i32)) -> i32 {
        (a.0 - b.0).abs() + (a.1 - b.1).abs()
    }

    fn clamp(&self, p: (i32, i32)) -> (i32, i32) {
        let hi = self.cfg.size as i32 - 1;
        (p.0.clamp(0, hi), p.1.clamp(0, hi))
    }

    fn captured(&self) -> bool {
        self.predators.iter().any(|&p| Self::dist(p, self.prey) <= self.cfg.capture_radius as i32)
    }

    fn emit_state(&mut self) -> Vec<f64> {
        let g = self.cfg.size as f64;
        let mut f = Vec::with_capacity(2 * (self.cfg.predators + 1));
        for &(r, c) in &self.predators {
            f.push(r as f64 / g);
            f.push(c as f64 / g);
        }
        f.push(self.prey.0 as f64 / g);
        f.push(self.prey.1 as f64 / g);
        self.noise.apply(&mut f, &mut self.sensor);
        f
    }

    fn emit_obs(&mut self) -> Vec<Vec<f64>> {
        let g = self.cfg.size as f64;
        let mut all = Vec::with_capacity(self.cfg.predators);
        for idx in 0..self.cfg.predators {
            let (r, c) = self.predators[idx];
            let mut f = vec![
                r as f64 / g,
                c as f64 / g,
                (self.prey.0 - r) as f64 / g,
                (self.prey.1 - c) as f64 / g,
            ];
            self.noise.apply(&mut f, &mut self.sensor);
            all.push(f);
        }
        all
    }
}

impl Env for GridPursuit {
    fn n_agents(&self) -> usize {
        self.cfg.predators
    }

    fn n_actions(&self) -> usize {
        MOVES.len()
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn state_dim(&self) -> usize {
        2 * (self.cfg.predators + 1)
    }

    fn max_steps(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let g = self.cfg.size;
        for p in self.predators.iter_mut() {
            *p = (self.dynamics.below(g) as i32, self.dynamics.below(g) as i32);
        }
        // Keep trying prey cells until it starts uncaptured (bounded).
        for _ in 0..64 {
            self.prey = (self.dynamics.below(g) as i32, self.dynamics.below(g) as i32);
            if !self.captured() {
                break;
            }
        }
        self.steps = 0;
        self.done = false;
        (self.emit_state(), self.emit_obs())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOut> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if actions.len() != self.cfg.predators || actions.iter().any(|&a| a >= MOVES.len()) {
            return Err(Error::shape("env_step", format!("joint action {actions:?}")));
        }
        for (p, &a) in self.predators.iter_mut().zip(actions) {
            let d = MOVES[a];
            let moved = (p.0 + d.0, p.1 + d.1);
            let hi = self.cfg.size as i32 - 1;
            *p = (moved.0.clamp(0, hi), moved.1.clamp(0, hi));
        }
        let mut reward = -0.1;
        if self.captured() {
            reward += 10.0;
            self.done = true;
        } else {
            // Scripted prey: maximize min distance to predators, fixed tie order.
            let mut best = self.clamp((self.prey.0 + MOVES[0].0, self.prey.1 + MOVES[0].1));
            let mut best_d = i32::MIN;
            for mv in MOVES {
                let cand = self.clamp((self.prey.0 + mv.0, self.prey.1 + mv.1));
                let d = self.predators.iter().map(|&p| Self::dist(p, cand)).min().unwrap();
                if d > best_d {
                    best_d = d;
                    best = cand;
                }
            }
            self.prey = best;
        }
        self.steps += 1;
        if self.steps >= self.cfg.horizon {
            self.done = true;
        }
        Ok(StepOut { reward, state: self.emit_state(), obs: self.emit_obs(), done: self.done })
    }
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

pub trait JointPolicy {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<usize>;
}

pub struct VisitRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    /// Discounted return from this step to the end of the episode.
    pub ret: f64,
    pub state_index: Option<usize>,
}

/// Play `episodes` episodes under a fixed policy, recording every visited
/// step with its empirical discounted suffix return.
pub fn rollout_records(
    env: &mut dyn Env,
    policy: &mut dyn JointPolicy,
    gamma: f64,
    episodes: usize,
) -> Result<Vec<Vec<VisitRecord>>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut state, mut obs) = env.reset();
        let mut records: Vec<VisitRecord> = Vec::new();
        let mut rewards: Vec<f64> = Vec::new();
        let mut t = 0;
        loop {
            let actions = policy.act(&obs);
            let state_index = env.state_index();
            let step = env.step(&actions)?;
            records.push(VisitRecord { t, state, obs, actions, ret: 0.0, state_index });
            rewards.push(step.reward);
            state = step.state;
            obs = step.obs;
            t += 1;
            if step.done {
                break;
            }
        }
        let mut g = 0.0;
        for (rec, &r) in records.iter_mut().zip(&rewards).rev() {
            g = r + gamma * g;
            rec.ret = g;
        }
        out.push(records);
    }
    Ok(out)
}

/// Discounted return of each episode from its start.
pub fn episode_returns(episodes: &[Vec<VisitRecord>]) -> Vec<f64> {
    episodes.iter().map(|ep| ep.first().map(|r| r.ret).unwrap_or(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hub() -> RngHub {
        RngHub::new(99)
    }

    fn small_cfg() -> TabularCfg {
        TabularCfg { states: 6, n_agents: 2, n_actions: 3, horizon: 40, coupling: 0.25, reward_scale: 1.0, table_seed: 7 }
    }

    fn make_game(noise: NoiseSpec) -> TabularGame {
        let h = hub();
        TabularGame::new(small_cfg(), noise, h.stream("env-dynamics"), h.stream("env-noise")).unwrap()
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let g = make_game(NoiseSpec::None);
        for s in 0..g.cfg.states {
            for ja in 0..g.cfg.joint_actions() {
                let sum: f64 = g.transition_row(s, ja).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row ({s},{ja}) sums to {sum}");
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = make_game(NoiseSpec::None);
        let b = make_game(NoiseSpec::None);
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.transition, b.transition);
    }

    #[test]
    fn clean_emission_is_exact_one_hot() {
        let mut g = make_game(NoiseSpec::None);
        let (state, obs) = g.reset();
        let s = g.state_index().unwrap();
        let mut expect = vec![0.0; g.cfg.states];
        expect[s] = 1.0;
        assert_eq!(state, expect);
        for o in obs {
            assert_eq!(o, expect);
        }
    }

    #[test]
    fn uniform_noise_stays_in_band() {
        let mut g = make_game(NoiseSpec::Uniform { lo: 0.0, hi: 0.02 });
        let (state, obs) = g.reset();
        let s = g.state_index().unwrap();
        for (j, &f) in state.iter().enumerate() {
            let clean = if j == s { 1.0 } else { 0.0 };
            let d = f - clean;
            assert!((0.0..0.02).contains(&d), "state noise {d}");
        }
        for o in obs {
            for (j, &f) in o.iter().enumerate() {
                let clean = if j == s { 1.0 } else { 0.0 };
                let d = f - clean;
                assert!((0.0..0.02).contains(&d), "obs noise {d}");
            }
        }
    }

    #[test]
    fn gaussian_noise_mean_matches() {
        let h = hub();
        let mut s = h.stream("noise-lln");
        let spec = NoiseSpec::Gaussian { mean: 0.02, std: 0.02 };
        let n = 1_000_000;
        let mut buf = vec![0.0; n];
        spec.apply(&mut buf, &mut s);
        let mean = buf.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.02).abs() < 3.0 * 0.02 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn sensor_noise_never_touches_dynamics() {
        let h = hub();
        let mut clean =
            TabularGame::new(small_cfg(), NoiseSpec::None, h.stream("env-dynamics"), h.stream("env-noise")).unwrap();
        let mut noisy = TabularGame::new(
            small_cfg(),
            NoiseSpec::Uniform { lo: 0.0, hi: 0.02 },
            h.stream("env-dynamics"),
            h.stream("env-noise"),
        )
        .unwrap();
        clean.reset();
        noisy.reset();
        for t in 0..30 {
            let a = vec![t % 3, (t + 1) % 3];
            assert_eq!(clean.state_index(), noisy.state_index(), "diverged at {t}");
            let sc = clean.step(&a).unwrap();
            let sn = noisy.step(&a).unwrap();
            assert_eq!(sc.reward, sn.reward);
            if sc.done {
                break;
            }
        }
    }

    #[test]
    fn step_after_done_rejected() {
        let mut g = make_game(NoiseSpec::None);
        g.reset();
        loop {
            let out = g.step(&[0, 0]).unwrap();
            if out.done {
                break;
            }
        }
        assert!(matches!(g.step(&[0, 0]), Err(Error::StepAfterDone)));
    }

    #[test]
    fn myopic_value_iteration_equals_reward() {
        // Single state, gamma = 0: Q* is exactly the reward table.
        let h = hub();
        let cfg = TabularCfg { states: 1, n_agents: 2, n_actions: 2, horizon: 5, coupling: 0.0, reward_scale: 1.0, table_seed: 1 };
        let reward = vec![0.3, 0.9, 0.1, 0.5];
        let transition = vec![vec![1.0]; 4];
        let g = TabularGame::from_tables(cfg, transition, reward.clone(), NoiseSpec::None, h.stream("d"), h.stream("n"))
            .unwrap();
        let solved = solve_optimal_q(&g, 0.0, 1e-12).unwrap();
        for (qa, ra) in solved.q.iter().zip(&reward) {
            assert!((qa - ra).abs() < 1e-12);
        }
        assert!((solved.v[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_state_chain_matches_geometric_series() {
        // s0 -> s1 deterministic, s1 absorbing. r(s0) = 1, r(s1) = 1.
        // V(s1) = 1/(1-γ), V(s0) = 1 + γ·V(s1).
        let h = hub();
        let cfg = TabularCfg { states: 2, n_agents: 1, n_actions: 1, horizon: 5, coupling: 0.0, reward_scale: 1.0, table_seed: 1 };
        let transition = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let reward = vec![1.0, 1.0];
        let g =
            TabularGame::from_tables(cfg, transition, reward, NoiseSpec::None, h.stream("d"), h.stream("n")).unwrap();
        let gamma = 0.9;
        let solved = solve_optimal_q(&g, gamma, 1e-12).unwrap();
        let v1 = 1.0 / (1.0 - gamma);
        let v0 = 1.0 + gamma * v1;
        assert!((solved.v[1] - v1).abs() < 1e-8, "{} vs {v1}", solved.v[1]);
        assert!((solved.v[0] - v0).abs() < 1e-8, "{} vs {v0}", solved.v[0]);
    }

    #[test]
    fn value_iteration_residual_below_tol() {
        let g = make_game(NoiseSpec::None);
        let solved = solve_optimal_q(&g, 0.9, 1e-10).unwrap();
        assert!(solved.residual < 1e-10);
    }

    #[test]
    fn value_iteration_guard() {
        let h = hub();
        let cfg = TabularCfg { states: 40, n_agents: 6, n_actions: 6, horizon: 5, coupling: 0.0, reward_scale: 1.0, table_seed: 1 };
        assert!(cfg.validate().is_err() || solve_optimal_q(
            &TabularGame::new(cfg, NoiseSpec::None, h.stream("d"), h.stream("n")).unwrap(), 0.9, 1e-8).is_err());
    }

    struct FixedPolicy(Vec<usize>);
    impl JointPolicy for FixedPolicy {
        fn act(&mut self, _obs: &[Vec<f64>]) -> Vec<usize> {
            self.0.clone()
        }
    }

    #[test]
    fn rollout_discounted_returns() {
        // Deterministic 1-agent chain paying 1 every step, horizon 2:
        // G_0 = 1 + 0.9 = 1.9; horizon 1 gives G_0 = 1.
        let h = hub();
        let cfg = TabularCfg { states: 1, n_agents: 1, n_actions: 1, horizon: 1, coupling: 0.0, reward_scale: 1.0, table_seed: 1 };
        let mut g = TabularGame::from_tables(cfg, vec![vec![1.0]], vec![1.0], NoiseSpec::None, h.stream("d"), h.stream("n"))
            .unwrap();
        let eps = rollout_records(&mut g, &mut FixedPolicy(vec![0]), 0.9, 3).unwrap();
        for r in episode_returns(&eps) {
            assert!((r - 1.0).abs() < 1e-12);
        }
        let cfg2 = TabularCfg { horizon: 2, ..cfg };
        let mut g2 = TabularGame::from_tables(cfg2, vec![vec![1.0]], vec![1.0], NoiseSpec::None, h.stream("d"), h.stream("n"))
            .unwrap();
        let eps = rollout_records(&mut g2, &mut FixedPolicy(vec![0]), 0.9, 3).unwrap();
        for r in episode_returns(&eps) {
            assert!((r - 1.9).abs() < 1e-12);
        }
    }

    struct TablePolicy<'a> {
        solved: &'a SolvedGame,
        game_m: usize,
        game_n: usize,
        ja_count: usize,
    }

    impl JointPolicy for TablePolicy<'_> {
        fn act(&mut self, obs: &[Vec<f64>]) -> Vec<usize> {
            // Clean one-hot observations: decode the state directly.
            let s = obs[0].iter().position(|&x| x == 1.0).unwrap();
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for ja in 0..self.ja_count {
                let q = self.solved.q_at(s, ja, self.ja_count);
                if q > best_q {
                    best_q = q;
                    best = ja;
                }
            }
            joint_actions_of(best, self.game_m, self.game_n)
        }
    }

    #[test]
    fn greedy_optimal_rollouts_match_value_iteration() {
        let mut g = make_game(NoiseSpec::None);
        let gamma = 0.9;
        let solved = solve_optimal_q(&g, gamma, 1e-12).unwrap();
        let mut policy =
            TablePolicy { solved: &solved, game_m: g.cfg.n_actions, game_n: g.cfg.n_agents, ja_count: g.cfg.joint_actions() };
        let eps = rollout_records(&mut g, &mut policy, gamma, 400).unwrap();
        let rets = episode_returns(&eps);
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        let var = rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (rets.len() - 1) as f64;
        let ci = 2.576 * (var / rets.len() as f64).sqrt();
        // Truncation bias at horizon 40, gamma 0.9 is ~0.0148·E[V] which is
        // below the MC interval at this sample size.
        let expect = solved.v_start();
        let trunc = gamma.powi(40) * expect;
        assert!(
            (mean - expect).abs() <= ci + trunc + 0.05,
            "mean {mean} vs V* {expect} (ci {ci})"
        );
    }

    #[test]
    fn grid_capture_radius_monotone() {
        // Replay the same action sequence under shrinking capture radii; the
        // episode reward must never increase.
        let actions: Vec<Vec<usize>> = (0..60).map(|t| vec![(t * 7 + 1) % 5, (t * 3 + 2) % 5]).collect();
        let mut last = f64::INFINITY;
        for radius in (0..=3).rev() {
            let h = hub();
            let cfg = GridCfg { size: 6, predators: 2, capture_radius: radius, horizon: 60 };
            let mut env = GridPursuit::new(cfg, NoiseSpec::None, h.stream("gd"), h.stream("gn")).unwrap();
            env.reset();
            let mut total = 0.0;
            for a in &actions {
                let out = env.step(a).unwrap();
                total += out.reward;
                if out.done {
                    break;
                }
            }
            assert!(total <= last + 1e-12, "radius {radius}: reward {total} > {last}");
            last = total;
        }
    }

    #[test]
    fn grid_positions_stay_in_bounds() {
        let h = hub();
        let cfg = GridCfg { size: 5, predators: 3, capture_radius: 0, horizon: 50 };
        let mut env = GridPursuit::new(cfg, NoiseSpec::None, h.stream("gd2"), h.stream("gn2")).unwrap();
        env.reset();
        let mut s = h.stream("acts");
        loop {
            let a: Vec<usize> = (0..3).map(|_| s.below(5)).collect();
            let out = env.step(&a).unwrap();
            for p in &env.predators {
                assert!(p.0 >= 0 && p.0 < 5 && p.1 >= 0 && p.1 < 5);
            }
            if out.done {
                break;
            }
        }
    }
}
