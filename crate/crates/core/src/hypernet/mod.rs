//! Hyperparameter configurations, the search grid, architecture masks, and
//! the weight-generating network itself.
//!
//! A configuration λ has a regularization part (dropout, weight decay) and an
//! architectural part (layer count and a compression rate that induces the
//! per-layer widths). The architectural part is padded with zeros to the
//! maximal depth D; a zero entry means the layer is masked out entirely and
//! the detector skips it ("no-op"), which is how one fixed-size generated
//! weight tensor serves every sub-architecture.

mod net;
mod schedule;

pub use net::{seeded_hypernet, HnCheckpoint, HnSettings, HyperNet};
pub use schedule::{grid_eval_loss, train_scheduled, DepthTrace, Schedule, ScheduledTrainReport};

use serde::{Deserialize, Serialize};

use crate::dod::widths_from_hp;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Real, Tensor};

/// Offset added before taking log10 of the weight decay, so zero decay has a
/// finite log coordinate.
pub const WD_FLOOR: Real = 1e-8;

/// Upper validity bound for the dropout rate; larger values are rejected
/// during local sampling.
pub const DROPOUT_MAX: Real = 0.5;

/// One hyperparameter configuration λ = [λ_reg, λ_arch] in semantic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpConfig {
    /// Number of detector layers L (even, grid-constrained).
    pub n_layers: usize,
    /// Width shrink factor between consecutive encoder layers (≥ 1).
    pub compression: Real,
    /// Detector dropout rate in [0, 0.5].
    pub dropout: Real,
    /// Weight decay coefficient (≥ 0).
    pub weight_decay: Real,
}

impl HpConfig {
    pub fn new(n_layers: usize, compression: Real, dropout: Real, weight_decay: Real) -> Result<Self> {
        let cfg = HpConfig {
            n_layers,
            compression,
            dropout,
            weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "n_layers must be a positive even integer, got {}",
                self.n_layers
            )));
        }
        if !self.compression.is_finite() || self.compression < 1.0 {
            return Err(Error::Config(format!(
                "compression must be ≥ 1.0, got {}",
                self.compression
            )));
        }
        if !self.dropout.is_finite() || !(0.0..=DROPOUT_MAX).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, {DROPOUT_MAX}], got {}",
                self.dropout
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Hourglass widths for a dataset with `input_dim` features.
    pub fn widths(&self, input_dim: usize) -> Result<Vec<usize>> {
        widths_from_hp(input_dim, self.n_layers, self.compression)
    }

    /// Zero-padded architecture vector of length `max_depth`.
    pub fn lambda_arch(&self, input_dim: usize, max_depth: usize) -> Result<Vec<usize>> {
        pad_lambda_arch(&self.widths(input_dim)?, max_depth)
    }

    /// log10(weight_decay + floor): the coordinate used by the local search
    /// and the validator features.
    pub fn log_wd(&self) -> Real {
        (self.weight_decay + WD_FLOOR).log10()
    }

    /// Exact-value identity key for candidate-set deduplication.
    pub fn key(&self) -> u64 {
        seeds::mix(&[
            self.n_layers as u64,
            self.compression.to_bits(),
            self.dropout.to_bits(),
            self.weight_decay.to_bits(),
        ])
    }

    /// Identity key at a fixed input dimension: configurations that collapse
    /// to the same widths and regularization are duplicates.
    pub fn dedup_key(&self, input_dim: usize) -> Result<u64> {
        let widths = self.widths(input_dim)?;
        let mut words: Vec<u64> = widths.iter().map(|&w| w as u64).collect();
        words.push(self.dropout.to_bits());
        words.push(self.weight_decay.to_bits());
        Ok(seeds::mix(&words))
    }

    /// Parameter count of the effective architecture (weights + biases),
    /// used as the tie-break complexity measure.
    pub fn effective_params(&self, input_dim: usize) -> Result<usize> {
        let widths = self.widths(input_dim)?;
        let mut prev = input_dim;
        let mut count = 0;
        for &w in &widths {
            count += prev * w + w;
            prev = w;
        }
        Ok(count)
    }

    pub fn describe(&self) -> String {
        format!(
            "L={} c={} dropout={} wd={:e}",
            self.n_layers, self.compression, self.dropout, self.weight_decay
        )
    }
}

/// The hyperparameter search grid (cartesian product of per-dimension lists).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpGrid {
    pub n_layers: Vec<usize>,
    pub compression: Vec<Real>,
    pub dropout: Vec<Real>,
    pub weight_decay: Vec<Real>,
}

impl Default for HpGrid {
    fn default() -> Self {
        HpGrid {
            n_layers: vec![2, 4, 6, 8],
            compression: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0],
            dropout: vec![0.0, 0.2, 0.4],
            weight_decay: vec![0.0, 1e-6, 1e-5],
        }
    }
}

impl HpGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers.is_empty()
            || self.compression.is_empty()
            || self.dropout.is_empty()
            || self.weight_decay.is_empty()
        {
            return Err(Error::Config("grid has an empty dimension".into()));
        }
        for cfg in self.expand() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// All grid configurations in canonical nested order
    /// (layers, compression, dropout, weight decay).
    pub fn expand(&self) -> Vec<HpConfig> {
        let mut out = Vec::new();
        for &l in &self.n_layers {
            for &c in &self.compression {
                for &dr in &self.dropout {
                    for &wd in &self.weight_decay {
                        out.push(HpConfig {
                            n_layers: l,
                            compression: c,
                            dropout: dr,
                            weight_decay: wd,
                        });
                    }
                }
            }
        }
        out
    }

    /// Maximal depth D over the grid.
    pub fn max_depth(&self) -> usize {
        self.n_layers.iter().copied().max().unwrap_or(0)
    }

    /// Grid configurations deduplicated at a fixed input dimension: entries
    /// whose (widths, dropout, weight decay) coincide keep only the first
    /// (lexicographically smallest in canonical order) representative.
    pub fn canonical_for(&self, input_dim: usize) -> Result<Vec<HpConfig>> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for cfg in self.expand() {
            if seen.insert(cfg.dedup_key(input_dim)?) {
                out.push(cfg);
            }
        }
        Ok(out)
    }

    /// Convex hull of the compression values.
    pub fn compression_range(&self) -> (Real, Real) {
        let lo = self.compression.iter().cloned().fold(Real::INFINITY, Real::min);
        let hi = self.compression.iter().cloned().fold(1.0, Real::max);
        (lo, hi)
    }

    /// Log-space hull of the weight-decay values (floored).
    pub fn log_wd_range(&self) -> (Real, Real) {
        let lo = self
            .weight_decay
            .iter()
            .map(|&w| (w + WD_FLOOR).log10())
            .fold(Real::INFINITY, Real::min);
        let hi = self
            .weight_decay
            .iter()
            .map(|&w| (w + WD_FLOOR).log10())
            .fold(Real::NEG_INFINITY, Real::max);
        (lo, hi)
    }

    /// Stable fingerprint of the grid contents; stored in manifests and
    /// verified when artifacts are reloaded.
    pub fn digest(&self) -> u64 {
        let mut canon = String::new();
        for &l in &self.n_layers {
            canon.push_str(&format!("L{l};"));
        }
        for &c in &self.compression {
            canon.push_str(&format!("c{c:.12e};"));
        }
        for &d in &self.dropout {
            canon.push_str(&format!("d{d:.12e};"));
        }
        for &w in &self.weight_decay {
            canon.push_str(&format!("w{w:.12e};"));
        }
        seeds::fingerprint(canon.as_bytes())
    }
}

/// Splits L widths around the middle and pads with (D − L) zeros.
pub fn pad_lambda_arch(widths: &[usize], max_depth: usize) -> Result<Vec<usize>> {
    let l = widths.len();
    if l > max_depth {
        return Err(Error::Config(format!(
            "{l} widths exceed the maximal depth {max_depth}"
        )));
    }
    let half = l / 2;
    let mut arch = Vec::with_capacity(max_depth);
    arch.extend_from_slice(&widths[..half]);
    arch.resize(half + (max_depth - l), 0);
    arch.extend_from_slice(&widths[half..]);
    Ok(arch)
}

/// Binary masks that carve one sub-architecture out of the maximal
/// D×W×W weight tensor (plus D×W biases).
#[derive(Clone, Debug)]
pub struct ArchMask {
    pub lambda_arch: Vec<usize>,
    /// One [W, W] mask per layer.
    pub weight: Vec<Tensor>,
    /// One [W] mask per layer.
    pub bias: Vec<Tensor>,
}

impl ArchMask {
    pub fn depth(&self) -> usize {
        self.weight.len()
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.lambda_arch[layer] > 0
    }

    pub fn active_layers(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&l| self.is_active(l)).collect()
    }
}

/// Builds the architecture mask for a padded width vector.
///
/// Layer 0 keeps rows `0..λ[0]` over all W input columns. A later active
/// layer l keeps rows `0..λ[l]` and columns `0..λ[l−z]`, where `λ[l−z]` is
/// the last nonzero entry before l. A zero entry yields an all-zero layer.
pub fn build_arch_mask(lambda_arch: &[usize], max_depth: usize, max_width: usize) -> Result<ArchMask> {
    if lambda_arch.len() != max_depth {
        return Err(Error::Config(format!(
            "λ_arch has {} entries, expected D = {max_depth}",
            lambda_arch.len()
        )));
    }
    if lambda_arch.first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArch(
            "first λ_arch entry is zero: the input layer must exist".into(),
        ));
    }
    if let Some(&bad) = lambda_arch.iter().find(|&&v| v > max_width) {
        return Err(Error::InvalidArch(format!(
            "λ_arch entry {bad} exceeds the maximal width {max_width}"
        )));
    }

    let mut weight = Vec::with_capacity(max_depth);
    let mut bias = Vec::with_capacity(max_depth);
    let mut last_nonzero = 0usize; // λ[l−z]; layer 0 consumes the raw input
    for (l, &rows) in lambda_arch.iter().enumerate() {
        let mut wmask = Tensor::zeros(&[max_width, max_width]);
        let mut bmask = Tensor::zeros(&[max_width]);
        if rows > 0 {
            let cols = if l == 0 { max_width } else { last_nonzero };
            for r in 0..rows {
                for c in 0..cols {
                    wmask.set2(r, c, 1.0);
                }
                bmask.data_mut()[r] = 1.0;
            }
            last_nonzero = rows;
        }
        weight.push(wmask);
        bias.push(bmask);
    }
    Ok(ArchMask {
        lambda_arch: lambda_arch.to_vec(),
        weight,
        bias,
    })
}

/// Sinusoidal positional encoding of each λ_arch entry: one row of
/// `[sin(v/10000^{2i/d}), cos(v/10000^{2i/d})]` pairs per entry.
pub fn positional_encode(lambda_arch: &[usize], d_pe: usize) -> Result<Tensor> {
    if d_pe == 0 || d_pe % 2 != 0 {
        return Err(Error::Config(format!("d_pe must be even, got {d_pe}")));
    }
    let rows = lambda_arch.len();
    let mut data = Vec::with_capacity(rows * d_pe);
    for &v in lambda_arch {
        let v = v as Real;
        for i in 0..d_pe / 2 {
            let freq = (10000.0 as Real).powf(2.0 * i as Real / d_pe as Real);
            data.push((v / freq).sin());
            data.push((v / freq).cos());
        }
    }
    Tensor::new(vec![rows, d_pe], data)
}
