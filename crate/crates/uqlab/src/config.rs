//! Run configuration: a flat `key = value` file format with a fixed
//! schema, CLI overrides, and a documented master-seed splitting rule.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: cannot parse '{value}' for key '{key}': {detail}")]
    BadValue {
        key: String,
        value: String,
        line: usize,
        detail: String,
    },
    #[error("line {line}: expected 'key = value'")]
    BadLine { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every knob the experiments read. Defaults are the desk-scale settings;
/// all of them can come from the config file or CLI overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    pub data_n: usize,
    pub data_input_dim: usize,
    pub data_sigma_x: f64,
    pub data_gain: f64,
    pub data_decoder_seed: u64,
    pub data_quad_resolution: usize,

    pub model_hidden: Vec<usize>,
    pub model_activation: String,

    pub dropout_rate: f64,
    pub dropout_passes: usize,

    pub train_learning_rate: f64,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_weight_decay: f64,

    pub hmc_step_size: f64,
    pub hmc_leapfrog_steps: usize,
    pub hmc_num_samples: usize,
    pub hmc_burn_in: usize,
    pub hmc_thinning: usize,
    pub hmc_prior_precision: f64,
    pub hmc_train_subset: usize,

    pub ensemble_members: usize,
    pub ensemble_dropout_passes: usize,

    pub attack_epsilon: f64,
    pub attack_epsilon_large: f64,
    pub attack_iterations: usize,
    pub attack_momentum: f64,
    pub attack_num_inputs: usize,
    pub hole_mi_threshold: f64,
    pub hole_top_k: usize,
    pub hole_min_distance: f64,
    pub confidence_bar: f64,

    pub grid_resolution: usize,
    pub grid_pad_sigma: f64,

    pub eval_epsilon: f64,
    pub eval_repetitions: usize,
    pub delta_probes: usize,
    pub delta_radii: Vec<f64>,

    pub spheres_dim: usize,
    pub spheres_n_per_sphere: usize,
    pub spheres_r_inner: f64,
    pub spheres_r_outer: f64,
    pub spheres_trials: usize,
    pub spheres_rotations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            data_n: 600,
            data_input_dim: 32,
            data_sigma_x: 0.06,
            data_gain: 0.5,
            data_decoder_seed: 0,
            data_quad_resolution: 200,
            model_hidden: vec![16, 16],
            model_activation: "relu".into(),
            dropout_rate: 0.15,
            dropout_passes: 30,
            train_learning_rate: 0.1,
            train_epochs: 200,
            train_batch_size: 64,
            train_weight_decay: 1e-4,
            hmc_step_size: 0.02,
            hmc_leapfrog_steps: 20,
            hmc_num_samples: 300,
            hmc_burn_in: 500,
            hmc_thinning: 3,
            hmc_prior_precision: 0.5,
            hmc_train_subset: 200,
            ensemble_members: 5,
            ensemble_dropout_passes: 6,
            attack_epsilon: 0.1,
            attack_epsilon_large: 0.2,
            attack_iterations: 10,
            attack_momentum: 1.0,
            attack_num_inputs: 100,
            hole_mi_threshold: 0.01,
            hole_top_k: 500,
            hole_min_distance: 1.0,
            confidence_bar: 0.9,
            grid_resolution: 40,
            grid_pad_sigma: 4.0,
            eval_epsilon: 0.1,
            eval_repetitions: 5,
            delta_probes: 100,
            delta_radii: vec![0.02, 0.05, 0.1, 0.2, 0.4],
            spheres_dim: 8,
            spheres_n_per_sphere: 100,
            spheres_r_inner: 1.0,
            spheres_r_outer: 1.3,
            spheres_trials: 500,
            spheres_rotations: 1000,
        }
    }
}

macro_rules! parse_as {
    ($cfg:expr, $field:ident, $key:expr, $value:expr, $line:expr) => {
        $cfg.$field = $value.parse().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            line: $line,
            detail: format!("{e}"),
        })?
    };
}

fn parse_list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim().parse().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                line,
                detail: format!("{e}"),
            })
        })
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` pair; `line` only feeds error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "seed" => parse_as!(self, seed, key, value, line),
            "out_dir" => self.out_dir = value.to_string(),
            "data.n" => parse_as!(self, data_n, key, value, line),
            "data.input_dim" => parse_as!(self, data_input_dim, key, value, line),
            "data.sigma_x" => parse_as!(self, data_sigma_x, key, value, line),
            "data.gain" => parse_as!(self, data_gain, key, value, line),
            "data.decoder_seed" => parse_as!(self, data_decoder_seed, key, value, line),
            "data.quad_resolution" => parse_as!(self, data_quad_resolution, key, value, line),
            "model.hidden" => self.model_hidden = parse_list(key, value, line)?,
            "model.activation" => match value {
                "relu" | "sine" => self.model_activation = value.to_string(),
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        line,
                        detail: "expected 'relu' or 'sine'".into(),
                    })
                }
            },
            "dropout.rate" => parse_as!(self, dropout_rate, key, value, line),
            "dropout.passes" => parse_as!(self, dropout_passes, key, value, line),
            "train.learning_rate" => parse_as!(self, train_learning_rate, key, value, line),
            "train.epochs" => parse_as!(self, train_epochs, key, value, line),
            "train.batch_size" => parse_as!(self, train_batch_size, key, value, line),
            "train.weight_decay" => parse_as!(self, train_weight_decay, key, value, line),
            "hmc.step_size" => parse_as!(self, hmc_step_size, key, value, line),
            "hmc.leapfrog_steps" => parse_as!(self, hmc_leapfrog_steps, key, value, line),
            "hmc.num_samples" => parse_as!(self, hmc_num_samples, key, value, line),
            "hmc.burn_in" => parse_as!(self, hmc_burn_in, key, value, line),
            "hmc.thinning" => parse_as!(self, hmc_thinning, key, value, line),
            "hmc.prior_precision" => parse_as!(self, hmc_prior_precision, key, value, line),
            "hmc.train_subset" => parse_as!(self, hmc_train_subset, key, value, line),
            "ensemble.members" => parse_as!(self, ensemble_members, key, value, line),
            "ensemble.dropout_passes" => {
                parse_as!(self, ensemble_dropout_passes, key, value, line)
            }
            "attack.epsilon" => parse_as!(self, attack_epsilon, key, value, line),
            "attack.epsilon_large" => parse_as!(self, attack_epsilon_large, key, value, line),
            "attack.iterations" => parse_as!(self, attack_iterations, key, value, line),
            "attack.momentum" => parse_as!(self, attack_momentum, key, value, line),
            "attack.num_inputs" => parse_as!(self, attack_num_inputs, key, value, line),
            "attack.hole_mi_threshold" => parse_as!(self, hole_mi_threshold, key, value, line),
            "attack.hole_top_k" => parse_as!(self, hole_top_k, key, value, line),
            "attack.hole_min_distance" => parse_as!(self, hole_min_distance, key, value, line),
            "attack.confidence_bar" => parse_as!(self, confidence_bar, key, value, line),
            "grid.resolution" => parse_as!(self, grid_resolution, key, value, line),
            "grid.pad_sigma" => parse_as!(self, grid_pad_sigma, key, value, line),
            "eval.epsilon" => parse_as!(self, eval_epsilon, key, value, line),
            "eval.repetitions" => parse_as!(self, eval_repetitions, key, value, line),
            "delta.probes" => parse_as!(self, delta_probes, key, value, line),
            "delta.radii" => self.delta_radii = parse_list(key, value, line)?,
            "spheres.dim" => parse_as!(self, spheres_dim, key, value, line),
            "spheres.n_per_sphere" => parse_as!(self, spheres_n_per_sphere, key, value, line),
            "spheres.r_inner" => parse_as!(self, spheres_r_inner, key, value, line),
            "spheres.r_outer" => parse_as!(self, spheres_r_outer, key, value, line),
            "spheres.trials" => parse_as!(self, spheres_trials, key, value, line),
            "spheres.rotations" => parse_as!(self, spheres_rotations, key, value, line),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Canonical `key = value` listing, stable order; feeds the config
    /// hash recorded in report headers.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        fn list(v: &[impl ToString]) -> String {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        }
        vec![
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.clone()),
            ("data.n".into(), self.data_n.to_string()),
            ("data.input_dim".into(), self.data_input_dim.to_string()),
            ("data.sigma_x".into(), self.data_sigma_x.to_string()),
            ("data.gain".into(), self.data_gain.to_string()),
            ("data.decoder_seed".into(), self.data_decoder_seed.to_string()),
            (
                "data.quad_resolution".into(),
                self.data_quad_resolution.to_string(),
            ),
            ("model.hidden".into(), list(&self.model_hidden)),
            ("model.activation".into(), self.model_activation.clone()),
            ("dropout.rate".into(), self.dropout_rate.to_string()),
            ("dropout.passes".into(), self.dropout_passes.to_string()),
            (
                "train.learning_rate".into(),
                self.train_learning_rate.to_string(),
            ),
            ("train.epochs".into(), self.train_epochs.to_string()),
            ("train.batch_size".into(), self.train_batch_size.to_string()),
            (
                "train.weight_decay".into(),
                self.train_weight_decay.to_string(),
            ),
            ("hmc.step_size".into(), self.hmc_step_size.to_string()),
            (
                "hmc.leapfrog_steps".into(),
                self.hmc_leapfrog_steps.to_string(),
            ),
            ("hmc.num_samples".into(), self.hmc_num_samples.to_string()),
            ("hmc.burn_in".into(), self.hmc_burn_in.to_string()),
            ("hmc.thinning".into(), self.hmc_thinning.to_string()),
            (
                "hmc.prior_precision".into(),
                self.hmc_prior_precision.to_string(),
            ),
            ("hmc.train_subset".into(), self.hmc_train_subset.to_string()),
            ("ensemble.members".into(), self.ensemble_members.to_string()),
            (
                "ensemble.dropout_passes".into(),
                self.ensemble_dropout_passes.to_string(),
            ),
            ("attack.epsilon".into(), self.attack_epsilon.to_string()),
            (
                "attack.epsilon_large".into(),
                self.attack_epsilon_large.to_string(),
            ),
            (
                "attack.iterations".into(),
                self.attack_iterations.to_string(),
            ),
            ("attack.momentum".into(), self.attack_momentum.to_string()),
            (
                "attack.num_inputs".into(),
                self.attack_num_inputs.to_string(),
            ),
            (
                "attack.hole_mi_threshold".into(),
                self.hole_mi_threshold.to_string(),
            ),
            ("attack.hole_top_k".into(), self.hole_top_k.to_string()),
            (
                "attack.hole_min_distance".into(),
                self.hole_min_distance.to_string(),
            ),
            (
                "attack.confidence_bar".into(),
                self.confidence_bar.to_string(),
            ),
            ("grid.resolution".into(), self.grid_resolution.to_string()),
            ("grid.pad_sigma".into(), self.grid_pad_sigma.to_string()),
            ("eval.epsilon".into(), self.eval_epsilon.to_string()),
            (
                "eval.repetitions".into(),
                self.eval_repetitions.to_string(),
            ),
            ("delta.probes".into(), self.delta_probes.to_string()),
            ("delta.radii".into(), list(&self.delta_radii)),
            ("spheres.dim".into(), self.spheres_dim.to_string()),
            (
                "spheres.n_per_sphere".into(),
                self.spheres_n_per_sphere.to_string(),
            ),
            ("spheres.r_inner".into(), self.spheres_r_inner.to_string()),
            ("spheres.r_outer".into(), self.spheres_r_outer.to_string()),
            ("spheres.trials".into(), self.spheres_trials.to_string()),
            (
                "spheres.rotations".into(),
                self.spheres_rotations.to_string(),
            ),
        ]
    }

    /// FNV-1a hash of the canonical key=value listing; recorded in every
    /// report header so outputs are traceable to their exact config.
    pub fn config_hash(&self) -> u64 {
        let mut text = String::new();
        for (k, v) in self.to_key_values() {
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        fnv1a64(text.as_bytes())
    }

    /// Seed splitting: every consumer derives its stream as the first
    /// output of a generator seeded with `master_seed XOR fnv1a(tag)`.
    pub fn sub_seed(&self, tag: &str) -> u64 {
        sub_seed(self.seed, tag)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn sub_seed(master: u64, tag: &str) -> u64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master ^ fnv1a64(tag.as_bytes()));
    rng.random()
}

/// Parses a config file plus CLI overrides (which win last). Lines are
/// `key = value`; `#` starts a comment; later duplicates override earlier.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::BadLine { line });
            };
            cfg.set(key.trim(), value.trim(), line)?;
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value, 0)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_tmp("# only a comment\n\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn duplicate_key_last_wins_and_overrides_win_later() {
        let f = write_tmp("seed = 1\nseed = 2\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.seed, 2);
        let cfg = parse_config(Some(f.path()), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let f = write_tmp("seed = 1\nfoo = 3\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        match err {
            ConfigError::UnknownKey { key, line } => {
                assert_eq!(key, "foo");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_value_reports_line() {
        let f = write_tmp("hmc.step_size = many\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 1, .. }));
    }

    #[test]
    fn malformed_line_is_rejected() {
        let f = write_tmp("this is not an assignment\n");
        assert!(matches!(
            parse_config(Some(f.path()), &[]),
            Err(ConfigError::BadLine { line: 1 })
        ));
    }

    #[test]
    fn lists_parse_and_roundtrip() {
        let f = write_tmp("model.hidden = 8, 4\ndelta.radii = 0.1,0.2\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.model_hidden, vec![8, 4]);
        assert_eq!(cfg.delta_radii, vec![0.1, 0.2]);
    }

    #[test]
    fn key_values_round_trip_through_set() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.model_hidden = vec![4, 4, 2];
        cfg.model_activation = "sine".into();
        let mut rebuilt = RunConfig::default();
        for (k, v) in cfg.to_key_values() {
            rebuilt.set(&k, &v, 0).unwrap();
        }
        assert_eq!(cfg, rebuilt);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn sub_seeds_differ_per_tag_and_are_stable() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sub_seed("data"), cfg.sub_seed("data"));
        assert_ne!(cfg.sub_seed("data"), cfg.sub_seed("hmc"));
    }
}
