//! Run configuration: every tunable of the pipeline with its default, plus
//! the flat `key = value` text format persisted alongside all outputs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hypernet::{HnSettings, HpGrid};
use crate::meta::{EncoderSettings, ExtractorSettings, GbdtSettings};
use crate::tensor::Real;

/// Geometric grid of five points per scale dimension; the middle entry is
/// the initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaGrid {
    /// Depth dimension, in grid-snap units (1 = one grid step).
    pub depth: Vec<Real>,
    pub compression: Vec<Real>,
    pub dropout: Vec<Real>,
    pub log_wd: Vec<Real>,
}

fn geometric(lo: Real, hi: Real, n: usize) -> Vec<Real> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as Real / (n - 1) as Real))
        .collect()
}

impl Default for SigmaGrid {
    fn default() -> Self {
        SigmaGrid {
            depth: geometric(0.25, 2.0, 5),
            compression: geometric(0.05, 0.8, 5),
            dropout: geometric(0.02, 0.2, 5),
            log_wd: geometric(0.1, 1.0, 5),
        }
    }
}

impl SigmaGrid {
    pub fn dims(&self) -> [&[Real]; 4] {
        [&self.depth, &self.compression, &self.dropout, &self.log_wd]
    }

    /// Middle grid point per dimension: the default σ initialization.
    pub fn middle(&self) -> [Real; 4] {
        let mid = |v: &[Real]| v[v.len() / 2];
        [
            mid(&self.depth),
            mid(&self.compression),
            mid(&self.dropout),
            mid(&self.log_wd),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for dim in self.dims() {
            if dim.is_empty() || dim.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("sigma grid entries must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSettings {
    /// Hypernetwork steps (and local samples) per iteration.
    pub steps_per_iter: usize,
    /// Perturbations per candidate when estimating the objective.
    pub samples_per_candidate: usize,
    /// Iterations without improvement before stopping.
    pub patience: usize,
    /// Entropy weight in the validation objective.
    pub tau: Real,
    /// Minimum rise of the best prediction that resets the stall counter.
    pub improvement_tol: Real,
    /// Optional cap: keep only the most recent N candidates (0 = unlimited).
    pub candidate_cap: usize,
    /// Safety bound on iterations; generous enough to never bind in practice.
    pub max_iters: usize,
    pub sigma: SigmaGrid,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            steps_per_iter: 100,
            samples_per_candidate: 500,
            patience: 3,
            tau: 0.05,
            improvement_tol: 1e-4,
            candidate_cap: 0,
            max_iters: 1000,
            sigma: SigmaGrid::default(),
        }
    }
}

/// From-scratch detector training (reference baselines and ground truth).
#[derive(Clone, Debug, PartialEq)]
pub struct ScratchSettings {
    pub epochs: usize,
    pub lr: Real,
    pub batch: usize,
}

impl Default for ScratchSettings {
    fn default() -> Self {
        ScratchSettings {
            epochs: 200,
            lr: 3e-3,
            batch: 256,
        }
    }
}

/// Synthetic testbed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub n_tasks: usize,
    pub n_samples: usize,
    pub dim_min: usize,
    pub dim_max: usize,
    pub contamination: Real,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_tasks: 16,
            n_samples: 300,
            dim_min: 6,
            dim_max: 16,
            contamination: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: HpGrid,
    pub hn: HnSettings,
    /// Scheduled hypernetwork training budget per dataset.
    pub hn_epochs: usize,
    pub extractor: ExtractorSettings,
    pub encoder: EncoderSettings,
    pub gbdt: GbdtSettings,
    pub search: SearchSettings,
    pub scratch: ScratchSettings,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            grid: HpGrid::default(),
            hn: HnSettings::default(),
            hn_epochs: 400,
            extractor: ExtractorSettings::default(),
            encoder: EncoderSettings::default(),
            gbdt: GbdtSettings::default(),
            search: SearchSettings::default(),
            scratch: ScratchSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.search.sigma.validate()?;
        if self.search.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.search.steps_per_iter == 0 || self.search.samples_per_candidate == 0 {
            return Err(Error::Config("search sizes must be positive".into()));
        }
        if self.synth.contamination <= 0.0 || self.synth.contamination >= 0.5 {
            return Err(Error::Config(format!(
                "contamination must lie in (0, 0.5), got {}",
                self.synth.contamination
            )));
        }
        if self.synth.dim_min == 0 || self.synth.dim_min > self.synth.dim_max {
            return Err(Error::Config("dim range must satisfy 0 < min ≤ max".into()));
        }
        Ok(())
    }

    /// Serializes as flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w("seed", self.seed.to_string());
        w("grid.n_layers", join(&self.grid.n_layers));
        w("grid.compression", join(&self.grid.compression));
        w("grid.dropout", join(&self.grid.dropout));
        w("grid.weight_decay", join(&self.grid.weight_decay));
        w("hn.hidden", self.hn.hidden.to_string());
        w("hn.d_pe", self.hn.d_pe.to_string());
        w("hn.dropout", self.hn.hn_dropout.to_string());
        w("hn.lr", self.hn.lr.to_string());
        w("hn.momentum", self.hn.momentum.to_string());
        w("hn.batch_samples", self.hn.batch_samples.to_string());
        w("hn.lambdas_per_step", self.hn.lambdas_per_step.to_string());
        w("hn.output_init_scale", self.hn.output_init_scale.to_string());
        w("hn.epochs", self.hn_epochs.to_string());
        w("extractor.k", self.extractor.k.to_string());
        w("extractor.hidden", self.extractor.hidden.to_string());
        w("extractor.embed_dim", self.extractor.embed_dim.to_string());
        w("extractor.epochs", self.extractor.epochs.to_string());
        w("extractor.batch", self.extractor.batch.to_string());
        w("extractor.lr", self.extractor.lr.to_string());
        w("encoder.phi_dim", self.encoder.phi_dim.to_string());
        w("encoder.head_hidden", self.encoder.head_hidden.to_string());
        w("encoder.epochs", self.encoder.epochs.to_string());
        w("encoder.batch_sets", self.encoder.batch_sets.to_string());
        w("encoder.lr", self.encoder.lr.to_string());
        w("encoder.max_scores", self.encoder.max_scores.to_string());
        w("gbdt.n_trees", self.gbdt.n_trees.to_string());
        w("gbdt.max_depth", self.gbdt.max_depth.to_string());
        w("gbdt.shrinkage", self.gbdt.shrinkage.to_string());
        w("gbdt.min_leaf", self.gbdt.min_leaf.to_string());
        w("gbdt.n_bins", self.gbdt.n_bins.to_string());
        w("gbdt.val_fraction", self.gbdt.val_fraction.to_string());
        w("gbdt.early_stop_rounds", self.gbdt.early_stop_rounds.to_string());
        w("search.steps_per_iter", self.search.steps_per_iter.to_string());
        w(
            "search.samples_per_candidate",
            self.search.samples_per_candidate.to_string(),
        );
        w("search.patience", self.search.patience.to_string());
        w("search.tau", self.search.tau.to_string());
        w("search.improvement_tol", self.search.improvement_tol.to_string());
        w("search.candidate_cap", self.search.candidate_cap.to_string());
        w("search.max_iters", self.search.max_iters.to_string());
        w("search.sigma.depth", join(&self.search.sigma.depth));
        w("search.sigma.compression", join(&self.search.sigma.compression));
        w("search.sigma.dropout", join(&self.search.sigma.dropout));
        w("search.sigma.log_wd", join(&self.search.sigma.log_wd));
        w("scratch.epochs", self.scratch.epochs.to_string());
        w("scratch.lr", self.scratch.lr.to_string());
        w("scratch.batch", self.scratch.batch.to_string());
        w("synth.n_tasks", self.synth.n_tasks.to_string());
        w("synth.n_samples", self.synth.n_samples.to_string());
        w("synth.dim_min", self.synth.dim_min.to_string());
        w("synth.dim_max", self.synth.dim_max.to_string());
        w("synth.contamination", self.synth.contamination.to_string());
        s
    }

    /// Parses `key = value` lines over the defaults. Unknown keys and
    /// malformed values are errors carrying their line number.
    pub fn from_kv(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `key = value`, got `{raw}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_kv(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse `{v}`")))
        }
        fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| num(p.trim())).collect()
        }
        match key {
            "seed" => self.seed = num(value)?,
            "grid.n_layers" => self.grid.n_layers = list(value)?,
            "grid.compression" => self.grid.compression = list(value)?,
            "grid.dropout" => self.grid.dropout = list(value)?,
            "grid.weight_decay" => self.grid.weight_decay = list(value)?,
            "hn.hidden" => self.hn.hidden = num(value)?,
            "hn.d_pe" => self.hn.d_pe = num(value)?,
            "hn.dropout" => self.hn.hn_dropout = num(value)?,
            "hn.lr" => self.hn.lr = num(value)?,
            "hn.momentum" => self.hn.momentum = num(value)?,
            "hn.batch_samples" => self.hn.batch_samples = num(value)?,
            "hn.lambdas_per_step" => self.hn.lambdas_per_step = num(value)?,
            "hn.output_init_scale" => self.hn.output_init_scale = num(value)?,
            "hn.epochs" => self.hn_epochs = num(value)?,
            "extractor.k" => self.extractor.k = num(value)?,
            "extractor.hidden" => self.extractor.hidden = num(value)?,
            "extractor.embed_dim" => self.extractor.embed_dim = num(value)?,
            "extractor.epochs" => self.extractor.epochs = num(value)?,
            "extractor.batch" => self.extractor.batch = num(value)?,
            "extractor.lr" => self.extractor.lr = num(value)?,
            "encoder.phi_dim" => self.encoder.phi_dim = num(value)?,
            "encoder.head_hidden" => self.encoder.head_hidden = num(value)?,
            "encoder.epochs" => self.encoder.epochs = num(value)?,
            "encoder.batch_sets" => self.encoder.batch_sets = num(value)?,
            "encoder.lr" => self.encoder.lr = num(value)?,
            "encoder.max_scores" => self.encoder.max_scores = num(value)?,
            "gbdt.n_trees" => self.gbdt.n_trees = num(value)?,
            "gbdt.max_depth" => self.gbdt.max_depth = num(value)?,
            "gbdt.shrinkage" => self.gbdt.shrinkage = num(value)?,
            "gbdt.min_leaf" => self.gbdt.min_leaf = num(value)?,
            "gbdt.n_bins" => self.gbdt.n_bins = num(value)?,
            "gbdt.val_fraction" => self.gbdt.val_fraction = num(value)?,
            "gbdt.early_stop_rounds" => self.gbdt.early_stop_rounds = num(value)?,
            "search.steps_per_iter" => self.search.steps_per_iter = num(value)?,
            "search.samples_per_candidate" => self.search.samples_per_candidate = num(value)?,
            "search.patience" => self.search.patience = num(value)?,
            "search.tau" => self.search.tau = num(value)?,
            "search.improvement_tol" => self.search.improvement_tol = num(value)?,
            "search.candidate_cap" => self.search.candidate_cap = num(value)?,
            "search.max_iters" => self.search.max_iters = num(value)?,
            "search.sigma.depth" => self.search.sigma.depth = list(value)?,
            "search.sigma.compression" => self.search.sigma.compression = list(value)?,
            "search.sigma.dropout" => self.search.sigma.dropout = list(value)?,
            "search.sigma.log_wd" => self.search.sigma.log_wd = list(value)?,
            "scratch.epochs" => self.scratch.epochs = num(value)?,
            "scratch.lr" => self.scratch.lr = num(value)?,
            "scratch.batch" => self.scratch.batch = num(value)?,
            "synth.n_tasks" => self.synth.n_tasks = num(value)?,
            "synth.n_samples" => self.synth.n_samples = num(value)?,
            "synth.dim_min" => self.synth.dim_min = num(value)?,
            "synth.dim_max" => self.synth.dim_max = num(value)?,
            "synth.contamination" => self.synth.contamination = num(value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.grid.n_layers = vec![2, 4];
        cfg.hn.lr = 5e-4;
        cfg.search.samples_per_candidate = 64;
        cfg.search.sigma.dropout = vec![0.01, 0.1];
        let text = cfg.to_kv();
        let parsed = RunConfig::from_kv(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let err = RunConfig::from_kv("seed = 1\nbogus.key = 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_kv("# a comment\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.grid.n_layers, vec![2, 4, 6, 8]);
        assert_eq!(cfg.hn.hidden, 200);
        assert_eq!(cfg.hn.lr, 1e-4);
        assert_eq!(cfg.hn.batch_samples, 512);
        assert_eq!(cfg.search.steps_per_iter, 100);
        assert_eq!(cfg.search.samples_per_candidate, 500);
        assert_eq!(cfg.search.patience, 3);
        assert_eq!(cfg.synth.contamination, 0.10);
    }

    #[test]
    fn sigma_middle_is_the_initialization() {
        let grid = SigmaGrid::default();
        let mid = grid.middle();
        assert_eq!(mid[0], grid.depth[2]);
        assert!(mid.iter().all(|&s| s > 0.0));
    }
}
