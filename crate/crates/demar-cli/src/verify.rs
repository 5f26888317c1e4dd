//! The verify command: drives the analysis oracles with declared sample
//! sizes, prints one line per check, and optionally serializes the results
//! as CSV rows.

use std::io::Write;
use std::path::Path;

use demar::ensemble::{DualEnsemble, EnsembleConfig, NetDims};
use demar::error::{Error, Result};
use demar::grad::{finite_diff_check, ParamBlock, Tape};
use demar::learner::{ReplayBuffer, Transition};
use demar::mat::Mat;
use demar::nets::{MixerKind, MixerParams};
use demar::oracle::{
    elu_order_ratio, grad_check_loss, lemma1_bias_mc, single_agent_bias_mc, theorem1_onestep,
    theorem1_onestep_elu, LemmaMixer,
};
use demar::rng::RngHub;

pub const REPORT_HEADER: &str = "check,case,measured,expected_lo,expected_hi,ci,samples,pass";

pub struct CheckRow {
    pub check: String,
    pub case: String,
    pub measured: f64,
    pub expected_lo: f64,
    pub expected_hi: f64,
    pub ci: f64,
    pub samples: u64,
    pub pass: bool,
}

impl CheckRow {
    fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.check, self.case, self.measured, self.expected_lo, self.expected_hi, self.ci, self.samples, self.pass
        )
    }
}

pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn print(&self) {
        for r in &self.rows {
            println!(
                "{:12} {:32} measured={:<12.6} expected=[{:.6}, {:.6}] ci={:.6} {}",
                r.check,
                r.case,
                r.measured,
                r.expected_lo,
                r.expected_hi,
                r.ci,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(f, "{}", r.line())?;
        }
        Ok(())
    }
}

fn bias_row(check: &str, case: &str, r: &demar::oracle::BiasReport) -> CheckRow {
    CheckRow {
        check: check.to_string(),
        case: case.to_string(),
        measured: r.measured,
        expected_lo: r.predicted_lo,
        expected_hi: r.predicted_hi,
        ci: r.ci_halfwidth,
        samples: r.samples,
        pass: r.pass(),
    }
}

fn exact_row(check: &str, case: &str, measured: f64, expected: f64, tol: f64) -> CheckRow {
    CheckRow {
        check: check.to_string(),
        case: case.to_string(),
        measured,
        expected_lo: expected - tol,
        expected_hi: expected + tol,
        ci: 0.0,
        samples: 1,
        pass: (measured - expected).abs() < tol,
    }
}

/// Single-agent uniform-noise bias bound: pinned case plus monotonicity in
/// the action count.
pub fn verify_eq5(hub: &RngHub, samples: u64, threads: usize) -> Result<VerifyReport> {
    let mut rows = Vec::new();
    let pinned = single_agent_bias_mc(2, 1.0, 0.99, samples, hub, threads)?;
    let mut row = bias_row("eq5", "m=2 eps=1 gamma=0.99", &pinned);
    row.pass = row.pass && pinned.ci_halfwidth <= 0.003;
    rows.push(row);

    let mut last = -f64::INFINITY;
    for m in [1usize, 2, 4, 8] {
        let r = single_agent_bias_mc(m, 1.0, 0.99, samples / 4, hub, threads)?;
        let monotone = r.measured >= last - r.ci_halfwidth && r.measured >= -r.ci_halfwidth;
        let mut row = bias_row("eq5", &format!("monotone m={m}"), &r);
        row.pass = row.pass && monotone;
        rows.push(row);
        last = r.measured;
    }
    Ok(VerifyReport { rows })
}

/// Linear-mixer bias bound: exact pinned case, linear scaling in the agent
/// count and the weight, and a nonlinear-mixer band check.
pub fn verify_lemma1(hub: &RngHub, samples: u64, threads: usize) -> Result<VerifyReport> {
    let mut rows = Vec::new();
    let pinned = lemma1_bias_mc(&LemmaMixer::Linear { w: 1.0 }, 3, 4, 0.5, 0.99, samples, hub, threads)?;
    rows.push(bias_row("lemma1", "N=3 w=1 m=4 eps=0.5", &pinned));

    let base = lemma1_bias_mc(&LemmaMixer::Linear { w: 1.0 }, 3, 4, 0.5, 0.99, samples / 2, hub, threads)?;
    for (case, mixer, n) in [
        ("scale N=6", LemmaMixer::Linear { w: 1.0 }, 6usize),
        ("scale w=2", LemmaMixer::Linear { w: 2.0 }, 3usize),
    ] {
        let r = lemma1_bias_mc(&mixer, n, 4, 0.5, 0.99, samples / 2, hub, threads)?;
        let tol = 3.0 * (base.ci_halfwidth + r.ci_halfwidth);
        rows.push(CheckRow {
            check: "lemma1".to_string(),
            case: case.to_string(),
            measured: r.measured,
            expected_lo: 2.0 * base.measured - tol,
            expected_hi: 2.0 * base.measured + tol,
            ci: r.ci_halfwidth,
            samples: r.samples,
            pass: (r.measured - 2.0 * base.measured).abs() < tol,
        });
    }

    let params = MixerParams::Qmix {
        w1: Mat::from_vec(3, 2, vec![0.6, 0.3, 0.4, 0.7, 0.5, 0.2]),
        b1: vec![-0.3, 0.2],
        w2: vec![0.8, 0.6],
        b2: 0.1,
        alpha_elu: 1.0,
    };
    let r = lemma1_bias_mc(&LemmaMixer::Qmix(Box::new(params)), 3, 4, 0.5, 0.99, samples / 5, hub, threads)?;
    rows.push(bias_row("lemma1", "nonlinear gradient band", &r));
    Ok(VerifyReport { rows })
}

/// One-step bias propagation, linear case: exact displacement per utility
/// and for the re-forwarded global value.
pub fn verify_theorem1() -> Result<VerifyReport> {
    let mut rows = Vec::new();
    let r = theorem1_onestep(&[0.5, 1.5], 1.0, 0.1)?;
    rows.push(exact_row("theorem1", "dq_0 (alpha=0.1 dy=1)", r.dq[0], 0.1, 1e-10));
    rows.push(exact_row("theorem1", "dq_1 (alpha=0.1 dy=1)", r.dq[1], 0.3, 1e-10));
    rows.push(exact_row("theorem1", "dqtot (alpha=0.1 dy=1)", r.dqtot, 0.5, 1e-10));

    let zero_dy = theorem1_onestep(&[0.5, 1.5], 0.0, 0.1)?;
    rows.push(exact_row("theorem1", "dy=0 no drift", zero_dy.dqtot, 0.0, 1e-12));
    let zero_w = theorem1_onestep(&[0.0, 0.0], 1.0, 0.1)?;
    rows.push(exact_row("theorem1", "w=0 no propagation", zero_w.dqtot, 0.0, 1e-12));
    Ok(VerifyReport { rows })
}

/// One-step bias propagation through the nonlinear mixer: quadratic residual
/// decay plus the exact affine-region case.
pub fn verify_theorem1_elu() -> Result<VerifyReport> {
    let mut rows = Vec::new();
    let curvy = MixerParams::Qmix {
        w1: Mat::from_vec(2, 2, vec![0.9, 0.5, 0.6, 0.8]),
        b1: vec![-2.0, -1.5],
        w2: vec![0.7, 0.9],
        b2: 0.0,
        alpha_elu: 1.0,
    };
    let ratio = elu_order_ratio(&curvy, &[0.4, 0.6], 1.0, 1e-3)?;
    rows.push(CheckRow {
        check: "theorem1_elu".to_string(),
        case: "residual ratio alpha 1e-3 vs 5e-4".to_string(),
        measured: ratio,
        expected_lo: 3.5,
        expected_hi: 4.5,
        ci: 0.0,
        samples: 2,
        pass: (3.5..=4.5).contains(&ratio),
    });

    let affine = MixerParams::Qmix {
        w1: Mat::from_vec(2, 2, vec![0.9, 0.5, 0.6, 0.8]),
        b1: vec![5.0, 6.0],
        w2: vec![0.7, 0.9],
        b2: 0.0,
        alpha_elu: 1.0,
    };
    let r = theorem1_onestep_elu(&affine, &[0.4, 0.6], 1.0, 1e-3)?;
    rows.push(exact_row("theorem1_elu", "affine region exact", r.residual, 0.0, 1e-10));

    let zero_out = MixerParams::Qmix {
        w1: Mat::from_vec(2, 2, vec![0.9, 0.5, 0.6, 0.8]),
        b1: vec![-1.0, -0.5],
        w2: vec![0.0, 0.0],
        b2: 0.3,
        alpha_elu: 1.0,
    };
    let r = theorem1_onestep_elu(&zero_out, &[0.4, 0.6], 1.0, 1e-3)?;
    rows.push(exact_row("theorem1_elu", "zero output layer", r.measured, 0.0, 1e-12));
    Ok(VerifyReport { rows })
}

/// Central-difference check over every tape op plus the end-to-end loss.
pub fn verify_gradcheck(hub: &RngHub) -> Result<VerifyReport> {
    const TOL: f64 = 1e-4;
    let mut rows = Vec::new();
    let mut s = hub.stream("gradcheck-inputs");
    let mut mat = |rows_: usize, cols: usize| {
        let mut data = Vec::with_capacity(rows_ * cols);
        for k in 0..rows_ * cols {
            let mut v = s.uniform_in(0.15, 1.0) * if s.uniform() < 0.5 { -1.0 } else { 1.0 };
            v += k as f64 * 1e-3;
            data.push(v);
        }
        Mat::from_vec(rows_, cols, data)
    };

    type Build = Box<dyn Fn(&mut Tape, &[demar::grad::NodeId]) -> Result<demar::grad::NodeId>>;
    let a = mat(3, 4);
    let b43 = mat(4, 3);
    let a33 = mat(3, 3);
    let b33 = mat(3, 3);
    let row = mat(1, 4);
    let col = mat(3, 1);
    let cases: Vec<(&str, Vec<ParamBlock>, Build)> = vec![
        (
            "matmul",
            vec![ParamBlock::new("a", a.clone()), ParamBlock::new("b", b43)],
            Box::new(|t, l| {
                let p = t.matmul(l[0], l[1])?;
                Ok(t.sum_all(p))
            }),
        ),
        (
            "add",
            vec![ParamBlock::new("a", a33.clone()), ParamBlock::new("b", b33.clone())],
            Box::new(|t, l| {
                let p = t.add(l[0], l[1])?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "add_row",
            vec![ParamBlock::new("a", a.clone()), ParamBlock::new("r", row)],
            Box::new(|t, l| {
                let p = t.add_row(l[0], l[1])?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "sub",
            vec![ParamBlock::new("a", a33.clone()), ParamBlock::new("b", b33.clone())],
            Box::new(|t, l| {
                let p = t.sub(l[0], l[1])?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "mul",
            vec![ParamBlock::new("a", a33.clone()), ParamBlock::new("b", b33)],
            Box::new(|t, l| {
                let p = t.mul(l[0], l[1])?;
                Ok(t.sum_all(p))
            }),
        ),
        (
            "mul_col",
            vec![ParamBlock::new("a", a.clone()), ParamBlock::new("c", col)],
            Box::new(|t, l| {
                let p = t.mul_col(l[0], l[1])?;
                Ok(t.sum_all(p))
            }),
        ),
        (
            "scale",
            vec![ParamBlock::new("a", a33.clone())],
            Box::new(|t, l| {
                let p = t.scale(l[0], -1.7);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "relu",
            vec![ParamBlock::new("a", a33.clone())],
            Box::new(|t, l| {
                let p = t.relu(l[0]);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "elu",
            vec![ParamBlock::new("a", a33.clone())],
            Box::new(|t, l| {
                let p = t.elu(l[0], 1.0);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "abs",
            vec![ParamBlock::new("a", a33.clone())],
            Box::new(|t, l| {
                let p = t.abs(l[0]);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "square",
            vec![ParamBlock::new("a", a33.clone())],
            Box::new(|t, l| {
                let p = t.square(l[0]);
                Ok(t.sum_all(p))
            }),
        ),
        (
            "concat_cols",
            vec![ParamBlock::new("a", a.clone()), ParamBlock::new("b", a33.clone())],
            Box::new(|t, l| {
                let p = t.concat_cols(&[l[0], l[1]])?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "slice_cols",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.slice_cols(l[0], 1, 2)?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "gather_cols",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.gather_cols(l[0], &[2, 0, 3])?;
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "row_sum",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.row_sum(l[0]);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "row_min",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.row_min(l[0]);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "row_max",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.row_max(l[0]);
                let s = t.square(p);
                Ok(t.sum_all(s))
            }),
        ),
        (
            "mean_all",
            vec![ParamBlock::new("a", a.clone())],
            Box::new(|t, l| {
                let p = t.square(l[0]);
                Ok(t.mean_all(p))
            }),
        ),
        (
            "sum_all",
            vec![ParamBlock::new("a", a)],
            Box::new(|t, l| {
                let p = t.square(l[0]);
                Ok(t.sum_all(p))
            }),
        ),
    ];

    for (name, mut params, build) in cases {
        let rep = finite_diff_check(&mut params, build.as_ref(), 1e-5, TOL)?;
        rows.push(CheckRow {
            check: "gradcheck".to_string(),
            case: name.to_string(),
            measured: rep.max_rel_err,
            expected_lo: 0.0,
            expected_hi: TOL,
            ci: 0.0,
            samples: rep.entries_checked as u64,
            pass: rep.passed,
        });
    }

    // End-to-end loss through agent nets, hypernets and the mixer.
    for (case, mixer) in [
        ("full loss, elu mixer", MixerKind::QmixElu { l_h: 3, alpha_elu: 1.0 }),
        ("full loss, linear mixer", MixerKind::Linear),
    ] {
        let dims = NetDims {
            n_agents: 2,
            obs_dim: 4,
            state_dim: 5,
            n_actions: 3,
            agent_hidden: (6, 6),
            hyper_hidden: 4,
            mixer,
        };
        let cfg = EnsembleConfig {
            h: 1,
            n_h: 1,
            k: 2,
            n_k: 1,
            alpha_reg: 0.05,
            gamma: 0.9,
            lr: 1e-3,
            target_period: 5,
        };
        let ens = DualEnsemble::init(cfg, dims, hub)?;
        let mut buffer = ReplayBuffer::new(8, dims.n_actions);
        let mut fill = hub.stream("gradcheck-batch");
        for _ in 0..8 {
            buffer.push(Transition {
                state: (0..dims.state_dim).map(|_| fill.uniform_in(-1.0, 1.0)).collect(),
                obs: (0..dims.n_agents)
                    .map(|_| (0..dims.obs_dim).map(|_| fill.uniform_in(-1.0, 1.0)).collect())
                    .collect(),
                actions: (0..dims.n_agents).map(|_| fill.below(dims.n_actions)).collect(),
                reward: fill.uniform(),
                next_state: (0..dims.state_dim).map(|_| fill.uniform_in(-1.0, 1.0)).collect(),
                next_obs: (0..dims.n_agents)
                    .map(|_| (0..dims.obs_dim).map(|_| fill.uniform_in(-1.0, 1.0)).collect())
                    .collect(),
                done: false,
            })?;
        }
        let batch = buffer.sample_batch(&mut hub.stream("gradcheck-replay"), 4)?;
        let y = vec![0.4, -0.2, 0.9, 0.1];
        let rep = grad_check_loss(&ens, &batch, &y, 0.05, 1e-5, TOL)?;
        rows.push(CheckRow {
            check: "gradcheck".to_string(),
            case: case.to_string(),
            measured: rep.max_rel_err,
            expected_lo: 0.0,
            expected_hi: TOL,
            ci: 0.0,
            samples: rep.entries_checked as u64,
            pass: rep.passed,
        });
    }
    Ok(VerifyReport { rows })
}

/// Dispatch a verify selector.
pub fn run_verify(which: &str, seed: u64, samples: Option<u64>, threads: usize) -> Result<VerifyReport> {
    let hub = RngHub::new(seed);
    match which {
        "eq5" => verify_eq5(&hub, samples.unwrap_or(1_000_000), threads),
        "lemma1" => verify_lemma1(&hub, samples.unwrap_or(1_000_000), threads),
        "theorem1" => verify_theorem1(),
        "theorem1_elu" => verify_theorem1_elu(),
        "gradcheck" => verify_gradcheck(&hub),
        _ => Err(Error::config(format!(
            "unknown verify selector '{which}' (expected eq5 | lemma1 | theorem1 | theorem1_elu | gradcheck)"
        ))),
    }
}
