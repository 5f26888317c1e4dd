//! The network zoo: per-agent Q-networks, hypernetworks that map the global
//! state to mixer weights, and the monotonic mixing network in both the
//! two-layer ELU form and the linear form.
//!
//! Every network keeps its parameters as [`ParamBlock`]s with ordinal-prefixed
//! ids, so iteration order is deterministic (sorted by id == construction
//! order). Plain `forward` paths are used for acting and target computation;
//! `tape_*` builders record the same arithmetic on a [`Tape`] for training.

use crate::error::{Error, Result};
use crate::grad::{elu_scalar, NodeId, ParamBlock, Tape};
use crate::mat::Mat;
use crate::rng::Stream;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamBlock, // fan_in × fan_out
    pub b: ParamBlock, // 1 × fan_out
}

impl Linear {
    /// Uniform init in ±1/√fan_in, weights drawn first, then biases.
    fn new(prefix: &str, ord: &mut usize, fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform_in(-bound, bound)).collect() };
        let w = ParamBlock::new(format!("{prefix}{:02}.w", *ord), Mat::from_vec(fan_in, fan_out, draw(fan_in * fan_out)));
        *ord += 1;
        let b = ParamBlock::new(format!("{prefix}{:02}.b", *ord), Mat::from_vec(1, fan_out, draw(fan_out)));
        *ord += 1;
        Linear { w, b }
    }

    fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut out = x.matmul(&self.w.value)?;
        for i in 0..out.rows() {
            for (o, &b) in out.row_slice_mut(i).iter_mut().zip(self.b.value.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn tape_forward(&self, t: &mut Tape, x: NodeId, leaves: &mut Vec<NodeId>, constant: bool) -> Result<NodeId> {
        let w = if constant { t.constant(self.w.value.clone()) } else { t.leaf(self.w.value.clone()) };
        let b = if constant { t.constant(self.b.value.clone()) } else { t.leaf(self.b.value.clone()) };
        leaves.push(w);
        leaves.push(b);
        let prod = t.matmul(x, w)?;
        t.add_row(prod, b)
    }
}

/// Feedforward MLP with rectified-linear hidden activations and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], rng: &mut Stream) -> Self {
        assert!(dims.len() >= 2);
        let mut ord = 0;
        let layers = dims.windows(2).map(|w| Linear::new(prefix, &mut ord, w[0], w[1], rng)).collect();
        Mlp { layers, dims: dims.to_vec() }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = h.map(|v| if v > 0.0 { v } else { 0.0 });
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn tape_forward(&self, t: &mut Tape, x: NodeId, leaves: &mut Vec<NodeId>, constant: bool) -> Result<NodeId> {
        let mut h = self.layers[0].tape_forward(t, x, leaves, constant)?;
        for layer in &self.layers[1..] {
            let a = t.relu(h);
            h = layer.tape_forward(t, a, leaves, constant)?;
        }
        Ok(h)
    }

    /// Parameter blocks in deterministic (sorted-by-id) order. Tape builders
    /// push leaves in exactly this order.
    pub fn params(&self) -> Vec<&ParamBlock> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

// ---------------------------------------------------------------------------
// Agent networks
// ---------------------------------------------------------------------------

/// Individual utility network: observation → one Q-value per action.
#[derive(Clone, Debug)]
pub struct AgentNet {
    pub mlp: Mlp,
    pub obs_dim: usize,
    pub n_actions: usize,
}

impl AgentNet {
    pub fn new(obs_dim: usize, hidden: (usize, usize), n_actions: usize, rng: &mut Stream) -> Self {
        let mlp = Mlp::new("", &[obs_dim, hidden.0, hidden.1, n_actions], rng);
        AgentNet { mlp, obs_dim, n_actions }
    }

    /// Q-values for a single observation.
    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("agent_q", format!("obs has {} entries, expected {}", obs.len(), self.obs_dim)));
        }
        let out = self.mlp.forward(&Mat::row(obs.to_vec()))?;
        Ok(out.data().to_vec())
    }

    /// Batched Q-values, one row of actions per observation row.
    pub fn forward(&self, obs: &Mat) -> Result<Mat> {
        if obs.cols() != self.obs_dim {
            return Err(Error::shape("agent_q", format!("obs has {} columns, expected {}", obs.cols(), self.obs_dim)));
        }
        self.mlp.forward(obs)
    }

    pub fn tape_forward(&self, t: &mut Tape, obs: NodeId, leaves: &mut Vec<NodeId>) -> Result<NodeId> {
        self.mlp.tape_forward(t, obs, leaves, false)
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.mlp.params_mut()
    }
}

// ---------------------------------------------------------------------------
// Mixers
// ---------------------------------------------------------------------------

/// Which mixing network shape a run uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MixerKind {
    /// elu(q·W1 + B1)·W2 + b2 with hypernet-produced non-negative W1, W2.
    QmixElu { l_h: usize, alpha_elu: f64 },
    /// Σ wᵢ·qᵢ + b with hypernet-produced non-negative w.
    Linear,
}

/// Hypernetwork-produced weights for a single mixer instance.
#[derive(Clone, Debug)]
pub enum MixerParams {
    Qmix {
        /// n_agents × l_h, entries ≥ 0.
        w1: Mat,
        b1: Vec<f64>,
        /// l_h entries, ≥ 0.
        w2: Vec<f64>,
        b2: f64,
        alpha_elu: f64,
    },
    Linear {
        /// n_agents entries, ≥ 0.
        w: Vec<f64>,
        b: f64,
    },
}

impl MixerParams {
    pub fn n_agents(&self) -> usize {
        match self {
            MixerParams::Qmix { w1, .. } => w1.rows(),
            MixerParams::Linear { w, .. } => w.len(),
        }
    }

    pub fn weights_non_negative(&self) -> bool {
        match self {
            MixerParams::Qmix { w1, w2, .. } => w1.data().iter().all(|&x| x >= 0.0) && w2.iter().all(|&x| x >= 0.0),
            MixerParams::Linear { w, .. } => w.iter().all(|&x| x >= 0.0),
        }
    }
}

/// Scalar Q_tot from individual utilities. Monotone non-decreasing in every
/// qᵢ as long as the weight non-negativity invariant holds.
pub fn mix_forward(p: &MixerParams, q: &[f64]) -> Result<f64> {
    if q.len() != p.n_agents() {
        return Err(Error::shape("mix_forward", format!("{} utilities for {} agents", q.len(), p.n_agents())));
    }
    if q.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("mix_forward input".to_string()));
    }
    Ok(match p {
        MixerParams::Qmix { w1, b1, w2, b2, alpha_elu } => {
            // Accumulation order mirrors the tape builder so that the plain
            // and recorded forward passes agree bitwise.
            let l_h = b1.len();
            let mut out = 0.0;
            for l in 0..l_h {
                let mut pre = 0.0;
                for (i, &qi) in q.iter().enumerate() {
                    pre += qi * w1.at(i, l);
                }
                pre += b1[l];
                out += elu_scalar(pre, *alpha_elu) * w2[l];
            }
            out + b2
        }
        MixerParams::Linear { w, b } => q.iter().zip(w).map(|(&qi, &wi)| qi * wi).sum::<f64>() + b,
    })
}

/// Closed-form ∂Q_tot/∂qᵢ. For the ELU form the hidden pre-activations are
/// split by sign: units at or above zero contribute w1·w2, units below zero
/// contribute α_elu·w1·w2·e^pre.
pub fn mixer_grad(p: &MixerParams, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != p.n_agents() {
        return Err(Error::shape("mixer_grad", format!("{} utilities for {} agents", q.len(), p.n_agents())));
    }
    Ok(match p {
        MixerParams::Qmix { w1, b1, w2, alpha_elu, .. } => {
            let l_h = b1.len();
            let mut grads = vec![0.0; q.len()];
            for l in 0..l_h {
                let mut pre = 0.0;
                for (i, &qi) in q.iter().enumerate() {
                    pre += qi * w1.at(i, l);
                }
                pre += b1[l];
                let slope = if pre > 0.0 { 1.0 } else { alpha_elu * pre.exp() };
                for (i, g) in grads.iter_mut().enumerate() {
                    *g += slope * w1.at(i, l) * w2[l];
                }
            }
            grads
        }
        MixerParams::Linear { w, .. } => w.clone(),
    })
}

/// L1 regularizer over the produced mixer weights and biases:
/// Σ|W1| + Σ|W2| + Σ|B1| + |b2| (linear form: Σw + |b|).
pub fn hypernet_l1(p: &MixerParams) -> f64 {
    match p {
        MixerParams::Qmix { w1, b1, w2, b2, .. } => {
            w1.data().iter().map(|x| x.abs()).sum::<f64>()
                + b1.iter().map(|x| x.abs()).sum::<f64>()
                + w2.iter().map(|x| x.abs()).sum::<f64>()
                + b2.abs()
        }
        MixerParams::Linear { w, b } => w.iter().map(|x| x.abs()).sum::<f64>() + b.abs(),
    }
}

/// Batched hypernet outputs: one mixer instance per batch row, weights
/// already passed through |·|.
#[derive(Clone, Debug)]
pub enum MixerWeights {
    Qmix { w1: Mat, b1: Mat, w2: Mat, b2: Mat, n_agents: usize, l_h: usize, alpha_elu: f64 },
    Linear { w: Mat, b: Mat },
}

impl MixerWeights {
    pub fn batch(&self) -> usize {
        match self {
            MixerWeights::Qmix { b2, .. } => b2.rows(),
            MixerWeights::Linear { b, .. } => b.rows(),
        }
    }

    /// Extract row `r` as a standalone mixer instance.
    pub fn at(&self, r: usize) -> MixerParams {
        match self {
            MixerWeights::Qmix { w1, b1, w2, b2, n_agents, l_h, alpha_elu } => {
                let mut w1m = Mat::zeros(*n_agents, *l_h);
                for i in 0..*n_agents {
                    for l in 0..*l_h {
                        w1m.set(i, l, w1.at(r, i * l_h + l));
                    }
                }
                MixerParams::Qmix {
                    w1: w1m,
                    b1: b1.row_slice(r).to_vec(),
                    w2: w2.row_slice(r).to_vec(),
                    b2: b2.at(r, 0),
                    alpha_elu: *alpha_elu,
                }
            }
            MixerWeights::Linear { w, b } => MixerParams::Linear { w: w.row_slice(r).to_vec(), b: b.at(r, 0) },
        }
    }

    /// Mix one batch row without materializing a MixerParams.
    pub fn mix_row(&self, r: usize, q: &[f64]) -> f64 {
        match self {
            MixerWeights::Qmix { w1, b1, w2, b2, n_agents, l_h, alpha_elu } => {
                debug_assert_eq!(q.len(), *n_agents);
                let w1r = w1.row_slice(r);
                let b1r = b1.row_slice(r);
                let w2r = w2.row_slice(r);
                let mut out = 0.0;
                for l in 0..*l_h {
                    let mut pre = 0.0;
                    for (i, &qi) in q.iter().enumerate() {
                        pre += qi * w1r[i * l_h + l];
                    }
                    pre += b1r[l];
                    out += elu_scalar(pre, *alpha_elu) * w2r[l];
                }
                out + b2.at(r, 0)
            }
            MixerWeights::Linear { w, b } => {
                q.iter().zip(w.row_slice(r)).map(|(&qi, &wi)| qi * wi).sum::<f64>() + b.at(r, 0)
            }
        }
    }

    /// Closed-form per-agent mixer gradient for one batch row.
    pub fn grad_row(&self, r: usize, q: &[f64], out: &mut [f64]) {
        match self {
            MixerWeights::Qmix { w1, b1, w2, n_agents, l_h, alpha_elu, .. } => {
                debug_assert_eq!(q.len(), *n_agents);
                let w1r = w1.row_slice(r);
                let b1r = b1.row_slice(r);
                let w2r = w2.row_slice(r);
                out.iter_mut().for_each(|g| *g = 0.0);
                for l in 0..*l_h {
                    let mut pre = 0.0;
                    for (i, &qi) in q.iter().enumerate() {
                        pre += qi * w1r[i * l_h + l];
                    }
                    pre += b1r[l];
                    let slope = if pre > 0.0 { 1.0 } else { alpha_elu * pre.exp() };
                    for (i, g) in out.iter_mut().enumerate() {
                        *g += slope * w1r[i * l_h + l] * w2r[l];
                    }
                }
            }
            MixerWeights::Linear { w, .. } => out.copy_from_slice(w.row_slice(r)),
        }
    }

    pub fn weights_non_negative(&self) -> bool {
        match self {
            MixerWeights::Qmix { w1, w2, .. } => {
                w1.data().iter().all(|&x| x >= 0.0) && w2.data().iter().all(|&x| x >= 0.0)
            }
            MixerWeights::Linear { w, .. } => w.data().iter().all(|&x| x >= 0.0),
        }
    }
}

/// Hypernetworks for one global mixer: MLPs from the global state to each
/// weight/bias block. The weight heads (and the first-layer bias head) are
/// single-hidden-layer MLPs; the final-bias head gets an extra hidden layer.
#[derive(Clone, Debug)]
pub enum MixerNet {
    Qmix {
        hw1: Mlp,
        hb1: Mlp,
        hw2: Mlp,
        hb2: Mlp,
        n_agents: usize,
        l_h: usize,
        alpha_elu: f64,
        state_dim: usize,
    },
    Linear { hw: Mlp, hb: Mlp, n_agents: usize, state_dim: usize },
}

/// Result of recording a mixer forward on a tape.
pub struct TapeMix {
    /// B×1 global Q-values.
    pub qtot: NodeId,
    /// B×1 per-state regularizer values, present when requested.
    pub reg: Option<NodeId>,
}

impl MixerNet {
    pub fn new(kind: MixerKind, n_agents: usize, state_dim: usize, hyper_hidden: usize, rng: &mut Stream) -> Self {
        match kind {
            MixerKind::QmixElu { l_h, alpha_elu } => MixerNet::Qmix {
                hw1: Mlp::new("0.w1.", &[state_dim, hyper_hidden, n_agents * l_h], rng),
                hb1: Mlp::new("1.b1.", &[state_dim, hyper_hidden, l_h], rng),
                hw2: Mlp::new("2.w2.", &[state_dim, hyper_hidden, l_h], rng),
                hb2: Mlp::new("3.b2.", &[state_dim, hyper_hidden, hyper_hidden, 1], rng),
                n_agents,
                l_h,
                alpha_elu,
                state_dim,
            },
            MixerKind::Linear => MixerNet::Linear {
                hw: Mlp::new("0.w.", &[state_dim, hyper_hidden, n_agents], rng),
                hb: Mlp::new("1.b.", &[state_dim, hyper_hidden, 1], rng),
                n_agents,
                state_dim,
            },
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            MixerNet::Qmix { l_h, alpha_elu, .. } => MixerKind::QmixElu { l_h: *l_h, alpha_elu: *alpha_elu },
            MixerNet::Linear { .. } => MixerKind::Linear,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            MixerNet::Qmix { n_agents, .. } | MixerNet::Linear { n_agents, .. } => *n_agents,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            MixerNet::Qmix { state_dim, .. } | MixerNet::Linear { state_dim, .. } => *state_dim,
        }
    }

    /// Produce mixer weights for a batch of states; W entries pass through
    /// |·|, biases stay unconstrained.
    pub fn hyper_forward(&self, states: &Mat) -> Result<MixerWeights> {
        if states.cols() != self.state_dim() {
            return Err(Error::shape(
                "hyper_forward",
                format!("state has {} columns, expected {}", states.cols(), self.state_dim()),
            ));
        }
        Ok(match self {
            MixerNet::Qmix { hw1, hb1, hw2, hb2, n_agents, l_h, alpha_elu, .. } => MixerWeights::Qmix {
                w1: hw1.forward(states)?.map(f64::abs),
                b1: hb1.forward(states)?,
                w2: hw2.forward(states)?.map(f64::abs),
                b2: hb2.forward(states)?,
                n_agents: *n_agents,
                l_h: *l_h,
                alpha_elu: *alpha_elu,
            },
            MixerNet::Linear { hw, hb, .. } => {
                MixerWeights::Linear { w: hw.forward(states)?.map(f64::abs), b: hb.forward(states)? }
            }
        })
    }

    /// Record Q_tot (and optionally the per-state L1 regularizer) for a batch
    /// of states and per-agent utility columns. `constant` detaches the mixer
    /// parameters so no gradient flows into this mixer's hypernets.
    pub fn tape_qtot(
        &self,
        t: &mut Tape,
        states: NodeId,
        q_cols: &[NodeId],
        with_reg: bool,
        constant: bool,
        leaves: &mut Vec<NodeId>,
    ) -> Result<TapeMix> {
        if q_cols.len() != self.n_agents() {
            return Err(Error::shape(
                "tape_qtot",
                format!("{} utility columns for {} agents", q_cols.len(), self.n_agents()),
            ));
        }
        match self {
            MixerNet::Qmix { hw1, hb1, hw2, hb2, l_h, alpha_elu, .. } => {
                let raw_w1 = hw1.tape_forward(t, states, leaves, constant)?;
                let b1 = hb1.tape_forward(t, states, leaves, constant)?;
                let raw_w2 = hw2.tape_forward(t, states, leaves, constant)?;
                let b2 = hb2.tape_forward(t, states, leaves, constant)?;
                let w1 = t.abs(raw_w1);
                let w2 = t.abs(raw_w2);
                // pre[b,l] = Σ_i q_i[b]·w1[b, i·Lh + l] + b1[b,l]
                let mut pre = None;
                for (i, &q) in q_cols.iter().enumerate() {
                    let w1_i = t.slice_cols(w1, i * l_h, *l_h)?;
                    let term = t.mul_col(w1_i, q)?;
                    pre = Some(match pre {
                        None => term,
                        Some(acc) => t.add(acc, term)?,
                    });
                }
                let pre = t.add(pre.expect("n_agents >= 1"), b1)?;
                let hidden = t.elu(pre, *alpha_elu);
                let weighted = t.mul(hidden, w2)?;
                let summed = t.row_sum(weighted);
                let qtot = t.add(summed, b2)?;
                let reg = if with_reg {
                    let s_w1 = t.row_sum(w1);
                    let abs_b1 = t.abs(b1);
                    let s_b1 = t.row_sum(abs_b1);
                    let s_w2 = t.row_sum(w2);
                    let abs_b2 = t.abs(b2);
                    let a = t.add(s_w1, s_b1)?;
                    let b = t.add(s_w2, abs_b2)?;
                    Some(t.add(a, b)?)
                } else {
                    None
                };
                Ok(TapeMix { qtot, reg })
            }
            MixerNet::Linear { hw, hb, .. } => {
                let raw_w = hw.tape_forward(t, states, leaves, constant)?;
                let b = hb.tape_forward(t, states, leaves, constant)?;
                let w = t.abs(raw_w);
                let q = t.concat_cols(q_cols)?;
                let prod = t.mul(w, q)?;
                let summed = t.row_sum(prod);
                let qtot = t.add(summed, b)?;
                let reg = if with_reg {
                    let s_w = t.row_sum(w);
                    let abs_b = t.abs(b);
                    Some(t.add(s_w, abs_b)?)
                } else {
                    None
                };
                Ok(TapeMix { qtot, reg })
            }
        }
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        match self {
            MixerNet::Qmix { hw1, hb1, hw2, hb2, .. } => {
                let mut v = hw1.params();
                v.extend(hb1.params());
                v.extend(hw2.params());
                v.extend(hb2.params());
                v
            }
            MixerNet::Linear { hw, hb, .. } => {
                let mut v = hw.params();
                v.extend(hb.params());
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        match self {
            MixerNet::Qmix { hw1, hb1, hw2, hb2, .. } => {
                let mut v = hw1.params_mut();
                v.extend(hb1.params_mut());
                v.extend(hw2.params_mut());
                v.extend(hb2.params_mut());
                v
            }
            MixerNet::Linear { hw, hb, .. } => {
                let mut v = hw.params_mut();
                v.extend(hb.params_mut());
                v
            }
        }
    }

}
