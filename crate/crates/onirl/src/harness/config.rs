//! Experiment configuration: defaults, a small sectioned key = value format,
//! and validation.
//!
//! Every key is optional; an empty file runs the stock benchmark experiment.
//! Unknown sections or keys are rejected so typos surface as errors instead
//! of silently running with defaults.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PurgeModeConfig {
    Metric,
    Time,
}

/// Full description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    // [simulation]
    pub ts: f64,
    pub t_end: f64,
    pub x0: Vec<f64>,

    // [estimator]
    pub tau1: f64,
    pub tau2: f64,
    pub k_theta: f64,
    pub beta1: f64,
    pub gamma0_scale: f64,
    pub param_stack_capacity: usize,
    pub rank_threshold: f64,

    // [irl]
    pub irl_stack_capacity: usize,
    pub xi1: f64,
    pub xi2: f64,

    // [purge]
    pub purge_mode: PurgeModeConfig,
    pub kappa1: f64,
    pub kappa2: f64,
    pub epsilon_time: f64,
    pub eta_window: f64,
    pub query_count: usize,

    // [experiment]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ts: 0.005,
            t_end: 30.0,
            x0: vec![1.0, 1.0],
            tau1: 1.0,
            tau2: 0.6,
            k_theta: 0.5 / 150.0,
            beta1: 1.0,
            gamma0_scale: 1.0,
            param_stack_capacity: 100,
            rank_threshold: 1e-3,
            irl_stack_capacity: 150,
            xi1: 0.9,
            xi2: 1e-6,
            purge_mode: PurgeModeConfig::Metric,
            kappa1: 1e6,
            kappa2: 1e6,
            epsilon_time: 2.0,
            eta_window: 1.0,
            query_count: 10,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses the sectioned `key = value` text format over the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = match raw.find('#') {
                Some(pos) => raw[..pos].trim(),
                None => raw.trim(),
            };
            if trimmed.is_empty() {
                continue;
            }
            if let Some(inner) = trimmed.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| {
                    Error::InvalidConfig(format!("line {line}: unterminated section header"))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {line}: expected `key = value`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {line}: {e}")))?;
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let f = || parse_f64(key, value);
        let u = || parse_usize(key, value);
        match (section, key) {
            ("simulation", "ts") => self.ts = f()?,
            ("simulation", "t_end") => self.t_end = f()?,
            ("simulation", "x0") => {
                let parts: std::result::Result<Vec<f64>, String> = value
                    .split(',')
                    .map(|s| parse_f64("x0 component", s.trim()))
                    .collect();
                self.x0 = parts?;
            }
            ("estimator", "tau1") => self.tau1 = f()?,
            ("estimator", "tau2") => self.tau2 = f()?,
            ("estimator", "k_theta") => self.k_theta = f()?,
            ("estimator", "beta1") => self.beta1 = f()?,
            ("estimator", "gamma0_scale") => self.gamma0_scale = f()?,
            ("estimator", "stack_capacity") => self.param_stack_capacity = u()?,
            ("estimator", "rank_threshold") => self.rank_threshold = f()?,
            ("irl", "stack_capacity") => self.irl_stack_capacity = u()?,
            ("irl", "xi1") => self.xi1 = f()?,
            ("irl", "xi2") => self.xi2 = f()?,
            ("purge", "mode") => {
                self.purge_mode = match value {
                    "metric" => PurgeModeConfig::Metric,
                    "time" => PurgeModeConfig::Time,
                    other => return Err(format!("unknown purge mode `{other}`")),
                }
            }
            ("purge", "kappa1") => self.kappa1 = f()?,
            ("purge", "kappa2") => self.kappa2 = f()?,
            ("purge", "epsilon_time") => self.epsilon_time = f()?,
            ("purge", "eta_window") => self.eta_window = f()?,
            ("purge", "query_count") => self.query_count = u()?,
            ("experiment", "seed") => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| format!("seed must be an unsigned integer, got `{value}`"))?;
            }
            _ => return Err(format!("unknown key `{key}` in section `[{section}]`")),
        }
        Ok(())
    }

    /// Structural checks beyond per-value parsing.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.ts > 0.0) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if self.t_end < self.ts {
            return bad("t_end must cover at least one step".into());
        }
        if !is_multiple(self.t_end, self.ts) {
            return bad(format!(
                "t_end = {} is not an integer multiple of ts = {}",
                self.t_end, self.ts
            ));
        }
        if self.x0.len() != 2 {
            return bad(format!(
                "x0 must have 2 components for the benchmark plant, got {}",
                self.x0.len()
            ));
        }
        for (name, window) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("eta_window", self.eta_window),
        ] {
            if !(window > 0.0) {
                return bad(format!("{name} must be positive, got {window}"));
            }
            if !is_multiple(window, self.ts) {
                return bad(format!(
                    "{name} = {window} is not an integer multiple of ts = {}",
                    self.ts
                ));
            }
            if window > self.t_end {
                return bad(format!(
                    "{name} = {window} exceeds the horizon t_end = {}",
                    self.t_end
                ));
            }
        }
        if !(self.k_theta > 0.0) || !(self.beta1 > 0.0) || !(self.gamma0_scale > 0.0) {
            return bad("estimator gains must be positive".into());
        }
        if self.param_stack_capacity < 3 {
            return bad(format!(
                "estimator stack capacity {} is below the 3 unknown parameters",
                self.param_stack_capacity
            ));
        }
        if self.irl_stack_capacity < 5 {
            return bad(format!(
                "irl stack capacity {} is below the 5 unknown weights",
                self.irl_stack_capacity
            ));
        }
        if !(self.xi1 >= 0.0) {
            return bad("xi1 must be >= 0".into());
        }
        if !(self.xi2 > 0.0) {
            return bad("xi2 must be > 0".into());
        }
        if !(self.kappa1 > 0.0) || !(self.kappa2 > 0.0) {
            return bad("kappa1 and kappa2 must be positive".into());
        }
        if self.purge_mode == PurgeModeConfig::Time && !(self.epsilon_time > 0.0) {
            return bad("epsilon_time must be positive in time mode".into());
        }
        Ok(())
    }
}

fn parse_f64(key: &str, value: &str) -> std::result::Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("{key}: expected a number, got `{value}`"))?;
    if !v.is_finite() {
        return Err(format!("{key}: value must be finite, got `{value}`"));
    }
    Ok(v)
}

fn parse_usize(key: &str, value: &str) -> std::result::Result<usize, String> {
    value
        .parse::<usize>()
        .map_err(|_| format!("{key}: expected an unsigned integer, got `{value}`"))
}

fn is_multiple(value: f64, step: f64) -> bool {
    let ratio = value / step;
    (ratio - ratio.round()).abs() <= 1e-9 * ratio.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_defaults() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn sections_and_comments_parse() {
        let text = "\
# benchmark experiment
[simulation]
ts = 0.01
t_end = 5.0
x0 = 0.5, -0.5   # initial state

[estimator]
tau1 = 0.5
tau2 = 0.2

[purge]
mode = time
epsilon_time = 1.5
query_count = 0

[experiment]
seed = 42
";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.ts, 0.01);
        assert_eq!(cfg.t_end, 5.0);
        assert_eq!(cfg.x0, vec![0.5, -0.5]);
        assert_eq!(cfg.tau1, 0.5);
        assert_eq!(cfg.purge_mode, PurgeModeConfig::Time);
        assert_eq!(cfg.epsilon_time, 1.5);
        assert_eq!(cfg.query_count, 0);
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::parse_str("[simulation]\nnot_a_key = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "unexpected message: {msg}");
    }

    #[test]
    fn off_grid_windows_are_rejected() {
        let err = ExperimentConfig::parse_str("[estimator]\ntau1 = 0.0033\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn window_longer_than_horizon_is_rejected() {
        let err =
            ExperimentConfig::parse_str("[simulation]\nt_end = 0.5\n[purge]\neta_window = 1.0\n")
                .unwrap_err();
        assert!(err.to_string().contains("exceeds the horizon"));
    }

    #[test]
    fn sum_of_windows_may_exceed_the_horizon() {
        // tau1 + tau2 > t_end just means the identifier never activates.
        let cfg =
            ExperimentConfig::parse_str("[simulation]\nt_end = 1.0\n[purge]\neta_window = 1.0\n")
                .unwrap();
        assert!(cfg.tau1 + cfg.tau2 > cfg.t_end);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(ExperimentConfig::parse_str("[simulation]\nts = nan\n").is_err());
        assert!(ExperimentConfig::parse_str("[simulation]\nts = inf\n").is_err());
    }

    #[test]
    fn capacities_must_cover_the_unknown_counts() {
        assert!(ExperimentConfig::parse_str("[estimator]\nstack_capacity = 2\n").is_err());
        assert!(ExperimentConfig::parse_str("[irl]\nstack_capacity = 4\n").is_err());
        assert!(ExperimentConfig::parse_str("[irl]\nstack_capacity = 5\n").is_ok());
    }
}
