//! Line-oriented `key = value` run configuration with typed parsing, strict
//! unknown-key rejection, and `DEMAR_`-prefixed environment overrides
//! (dots become double underscores: `ens.alpha_reg` → `DEMAR_ENS__ALPHA_REG`).

use demar::ensemble::EnsembleConfig;
use demar::error::{Error, Result};
use demar::learner::OptimKind;
use demar::nets::MixerKind;
use demar::targets::TargetSpec;
use demar::worlds::{GridCfg, NoiseSpec, TabularCfg};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvKind {
    Tabular,
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Trial length in env steps.
    pub steps: u64,
    /// Divergence threshold on the final estimated/true ratio.
    pub ratio_max: f64,
    pub alpha_grid: Vec<f64>,
    /// (h, n_h) candidates.
    pub h_grid: Vec<(usize, usize)>,
    /// (k, n_k) candidates.
    pub k_grid: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env_kind: EnvKind,
    pub noise: NoiseSpec,
    pub tabular: TabularCfg,
    pub grid: GridCfg,
    pub target: TargetSpec,
    pub ens: EnsembleConfig,
    pub batch: usize,
    pub buffer: usize,
    pub total_steps: u64,
    pub optimizer: OptimKind,
    pub clip: f64,
    pub mixer: MixerKind,
    pub agent_hidden: (usize, usize),
    pub hyper_hidden: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub anneal_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env_kind: EnvKind::Tabular,
            noise: NoiseSpec::None,
            tabular: TabularCfg {
                states: 20,
                n_agents: 3,
                n_actions: 4,
                horizon: 200,
                coupling: 0.25,
                reward_scale: 1.0,
                table_seed: 7,
            },
            grid: GridCfg { size: 5, predators: 2, capture_radius: 0, horizon: 50 },
            target: TargetSpec::Demar,
            ens: EnsembleConfig {
                h: 1,
                n_h: 1,
                k: 1,
                n_k: 1,
                alpha_reg: 0.0,
                gamma: 0.99,
                lr: 5e-4,
                target_period: 200,
            },
            batch: 32,
            buffer: 50_000,
            total_steps: 50_000,
            optimizer: OptimKind::RmsProp { smoothing: 0.99, damping: 1e-5 },
            clip: 10.0,
            mixer: MixerKind::QmixElu { l_h: 32, alpha_elu: 1.0 },
            agent_hidden: (64, 64),
            hyper_hidden: 32,
            eps_start: 1.0,
            eps_end: 0.05,
            anneal_steps: 10_000,
            eval_interval: 1_000,
            eval_episodes: 4,
            sweep: SweepConfig {
                steps: 15_000,
                ratio_max: 10.0,
                alpha_grid: vec![0.0, 0.002, 0.02],
                h_grid: vec![(1, 1), (2, 2)],
                k_grid: vec![(1, 1), (2, 2)],
            },
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected a real number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_pair_f64(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!("{key}: expected 'A,B', got '{v}'")));
    }
    Ok((parse_f64(key, parts[0].trim())?, parse_f64(key, parts[1].trim())?))
}

fn parse_noise(v: &str) -> Result<NoiseSpec> {
    if v == "none" {
        return Ok(NoiseSpec::None);
    }
    if let Some(rest) = v.strip_prefix("uniform:") {
        let (lo, hi) = parse_pair_f64("env.noise", rest)?;
        return Ok(NoiseSpec::Uniform { lo, hi });
    }
    if let Some(rest) = v.strip_prefix("gaussian:") {
        let (mean, std) = parse_pair_f64("env.noise", rest)?;
        return Ok(NoiseSpec::Gaussian { mean, std });
    }
    Err(Error::config(format!("env.noise: expected none | uniform:LO,HI | gaussian:MEAN,STD, got '{v}'")))
}

fn parse_target(v: &str) -> Result<TargetSpec> {
    if v == "demar" {
        return Ok(TargetSpec::Demar);
    }
    if v == "vanilla" {
        return Ok(TargetSpec::VanillaMax);
    }
    if v == "td3" {
        return Ok(TargetSpec::Td3Twin);
    }
    if let Some(rest) = v.strip_prefix("subavg:") {
        return Ok(TargetSpec::SubAvg { k_hist: parse_usize("target.spec", rest)? });
    }
    if let Some(rest) = v.strip_prefix("softmax:") {
        return Ok(TargetSpec::SoftmaxSubset { beta: parse_f64("target.spec", rest)? });
    }
    if let Some(rest) = v.strip_prefix("mellowmax:") {
        let (omega, alpha_sm) = parse_pair_f64("target.spec", rest)?;
        return Ok(TargetSpec::SoftMellowmax { omega, alpha_sm });
    }
    if let Some(rest) = v.strip_prefix("wcu:") {
        return Ok(TargetSpec::WcuWeighted { w: parse_f64("target.spec", rest)? });
    }
    Err(Error::config(format!(
        "target.spec: expected demar | vanilla | td3 | subavg:K | softmax:BETA | mellowmax:OMEGA,ALPHA | wcu:W, got '{v}'"
    )))
}

fn parse_mixer(v: &str) -> Result<MixerKind> {
    if v == "linear" {
        return Ok(MixerKind::Linear);
    }
    if let Some(rest) = v.strip_prefix("qmix:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::config(format!("net.mixer: expected qmix:LH,ALPHA_ELU, got '{v}'")));
        }
        return Ok(MixerKind::QmixElu {
            l_h: parse_usize("net.mixer", parts[0].trim())?,
            alpha_elu: parse_f64("net.mixer", parts[1].trim())?,
        });
    }
    Err(Error::config(format!("net.mixer: expected qmix:LH,ALPHA_ELU | linear, got '{v}'")))
}

fn parse_pair_grid(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 2 {
                return Err(Error::config(format!("{key}: expected H:NH pairs, got '{item}'")));
            }
            Ok((parse_usize(key, parts[0])?, parse_usize(key, parts[1])?))
        })
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env.kind" => {
                self.env_kind = match v {
                    "tabular" => EnvKind::Tabular,
                    "grid" => EnvKind::Grid,
                    _ => return Err(Error::config(format!("env.kind: expected tabular | grid, got '{v}'"))),
                }
            }
            "env.noise" => self.noise = parse_noise(v)?,
            "env.tabular.states" => self.tabular.states = parse_usize(key, v)?,
            "env.tabular.agents" => self.tabular.n_agents = parse_usize(key, v)?,
            "env.tabular.actions" => self.tabular.n_actions = parse_usize(key, v)?,
            "env.tabular.horizon" => self.tabular.horizon = parse_usize(key, v)?,
            "env.tabular.coupling" => self.tabular.coupling = parse_f64(key, v)?,
            "env.tabular.reward_scale" => self.tabular.reward_scale = parse_f64(key, v)?,
            "env.tabular.table_seed" => self.tabular.table_seed = parse_u64(key, v)?,
            "env.grid.size" => self.grid.size = parse_usize(key, v)?,
            "env.grid.predators" => self.grid.predators = parse_usize(key, v)?,
            "env.grid.capture_radius" => self.grid.capture_radius = parse_usize(key, v)?,
            "env.grid.horizon" => self.grid.horizon = parse_usize(key, v)?,
            "target.spec" => self.target = parse_target(v)?,
            "ens.h" => self.ens.h = parse_usize(key, v)?,
            "ens.n_h" => self.ens.n_h = parse_usize(key, v)?,
            "ens.k" => self.ens.k = parse_usize(key, v)?,
            "ens.n_k" => self.ens.n_k = parse_usize(key, v)?,
            "ens.alpha_reg" => self.ens.alpha_reg = parse_f64(key, v)?,
            "train.gamma" => self.ens.gamma = parse_f64(key, v)?,
            "train.lr" => self.ens.lr = parse_f64(key, v)?,
            "train.target_period" => self.ens.target_period = parse_u64(key, v)?,
            "train.batch" => self.batch = parse_usize(key, v)?,
            "train.buffer" => self.buffer = parse_usize(key, v)?,
            "train.total_steps" => self.total_steps = parse_u64(key, v)?,
            "train.optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimKind::Sgd,
                    "rmsprop" => OptimKind::RmsProp { smoothing: 0.99, damping: 1e-5 },
                    _ => return Err(Error::config(format!("train.optimizer: expected rmsprop | sgd, got '{v}'"))),
                }
            }
            "train.clip" => self.clip = parse_f64(key, v)?,
            "net.mixer" => self.mixer = parse_mixer(v)?,
            "net.agent_hidden" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::config(format!("{key}: expected 'H1,H2', got '{v}'")));
                }
                self.agent_hidden = (parse_usize(key, parts[0].trim())?, parse_usize(key, parts[1].trim())?);
            }
            "net.hyper_hidden" => self.hyper_hidden = parse_usize(key, v)?,
            "explore.eps_start" => self.eps_start = parse_f64(key, v)?,
            "explore.eps_end" => self.eps_end = parse_f64(key, v)?,
            "explore.anneal_steps" => self.anneal_steps = parse_u64(key, v)?,
            "eval.interval" => self.eval_interval = parse_u64(key, v)?,
            "eval.episodes" => self.eval_episodes = parse_usize(key, v)?,
            "sweep.steps" => self.sweep.steps = parse_u64(key, v)?,
            "sweep.ratio_max" => self.sweep.ratio_max = parse_f64(key, v)?,
            "sweep.stage1.alpha_grid" => {
                self.sweep.alpha_grid = v
                    .split(',')
                    .map(|x| parse_f64(key, x.trim()))
                    .collect::<Result<Vec<f64>>>()?;
            }
            "sweep.stage2.h_grid" => self.sweep.h_grid = parse_pair_grid(key, v)?,
            "sweep.stage3.k_grid" => self.sweep.k_grid = parse_pair_grid(key, v)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a config fragment over this config. Lines are `key = value`;
    /// blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply `DEMAR_`-prefixed environment overrides.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        let mut pairs: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with("DEMAR_"))
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            let key = k["DEMAR_".len()..].to_lowercase().replace("__", ".");
            self.set(&key, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps must be > 0".to_string()));
        }
        if self.batch == 0 || self.buffer < self.batch {
            return Err(Error::config("need train.batch >= 1 and train.buffer >= train.batch".to_string()));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::config("eval.interval and eval.episodes must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::config("exploration rates must be in [0,1]".to_string()));
        }
        if self.clip <= 0.0 {
            return Err(Error::config("train.clip must be > 0".to_string()));
        }
        self.ens.validate()?;
        self.target.validate(self.ens.h)?;
        self.noise.validate()?;
        match self.env_kind {
            EnvKind::Tabular => self.tabular.validate()?,
            EnvKind::Grid => {
                if self.grid.size < 2 || self.grid.predators == 0 || self.grid.horizon == 0 {
                    return Err(Error::config("grid env needs size >= 2, predators >= 1, horizon >= 1".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Load a config file, then apply environment overrides, then validate.
pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text)?;
    cfg.apply_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_fragment() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\n\
             target.spec = wcu:0.75\n\
             ens.h = 2\n\
             ens.n_h = 2\n\
             env.noise = uniform:0,0.02  # inline comment\n\
             net.mixer = linear\n",
        )
        .unwrap();
        assert_eq!(cfg.target, TargetSpec::WcuWeighted { w: 0.75 });
        assert_eq!(cfg.noise, NoiseSpec::Uniform { lo: 0.0, hi: 0.02 });
        assert_eq!(cfg.mixer, MixerKind::Linear);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("train.ltr = 5\n").unwrap_err().to_string();
        assert!(err.contains("unknown config key"), "{err}");
    }

    #[test]
    fn zero_steps_rejected() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.total_steps = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("train.lr = fast\n").is_err());
        assert!(cfg.apply_text("target.spec = dqn\n").is_err());
        assert!(cfg.apply_text("env.noise = salt\n").is_err());
        assert!(cfg.apply_text("just a line\n").is_err());
    }

    #[test]
    fn env_override_applies() {
        // Serialized by the env var name: test-local, removed afterwards.
        std::env::set_var("DEMAR_ENS__ALPHA_REG", "0.123");
        let mut cfg = RunConfig::default();
        cfg.apply_env_overrides().unwrap();
        std::env::remove_var("DEMAR_ENS__ALPHA_REG");
        assert_eq!(cfg.ens.alpha_reg, 0.123);
    }
}
