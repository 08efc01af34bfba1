//! The weight-generating network HN(λ; φ).
//!
//! Input: the two regularization values rescaled to [0,1], concatenated with
//! the flattened positional encodings of the padded width vector. Two tanh
//! hidden layers, then a linear head whose output is reshaped into the
//! maximal D×W×W weight tensor plus D×W biases. The caller applies the
//! architecture mask before feeding a detector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dod::{self, Mode};
use crate::error::{Error, Result};
use crate::hypernet::{build_arch_mask, positional_encode, HpConfig, DROPOUT_MAX};
use crate::seeds;
use crate::tensor::{add_bias_in_place, matmul_tb, tanh_in_place, Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnSettings {
    /// Units per hidden layer (two hidden layers).
    pub hidden: usize,
    /// Positional-encoding width per λ_arch entry.
    pub d_pe: usize,
    /// Dropout on the hypernetwork's own hidden layers during training.
    pub hn_dropout: Real,
    pub lr: Real,
    pub momentum: Real,
    /// Samples per training batch.
    pub batch_samples: usize,
    /// Configurations per training step.
    pub lambdas_per_step: usize,
    /// Scale of the output layer weights relative to Glorot; small values
    /// make the initial generated weights follow the output bias, which is
    /// seeded at Glorot magnitude for the maximal architecture.
    pub output_init_scale: Real,
}

impl Default for HnSettings {
    fn default() -> Self {
        HnSettings {
            hidden: 200,
            d_pe: 16,
            hn_dropout: 0.2,
            lr: 1e-4,
            momentum: 0.9,
            batch_samples: 512,
            lambdas_per_step: 8,
            output_init_scale: 0.05,
        }
    }
}

/// Hypernetwork parameters plus the input-encoding configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperNet {
    pub max_depth: usize,
    pub max_width: usize,
    pub settings: HnSettings,
    /// (min, max) of log10(weight_decay + floor) used to rescale that input.
    pub wd_log_range: (Real, Real),
    /// [w1, b1, w2, b2, w3, b3]
    params: Vec<Tensor>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, scale: Real, rng: &mut R) -> Tensor {
    let s = scale * (6.0 / (rows + cols) as Real).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0) * s)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

impl HyperNet {
    pub fn new<R: Rng>(
        max_depth: usize,
        max_width: usize,
        settings: HnSettings,
        wd_log_range: (Real, Real),
        rng: &mut R,
    ) -> Result<Self> {
        if max_depth == 0 || max_width == 0 {
            return Err(Error::Config("hypernet needs positive D and W".into()));
        }
        if settings.d_pe % 2 != 0 || settings.d_pe == 0 {
            return Err(Error::Config("d_pe must be even and positive".into()));
        }
        let in_dim = 2 + max_depth * settings.d_pe;
        let out_dim = max_depth * max_width * max_width + max_depth * max_width;
        let h = settings.hidden;

        let w1 = glorot(h, in_dim, 1.0, rng);
        let b1 = Tensor::zeros(&[h]);
        let w2 = glorot(h, h, 1.0, rng);
        let b2 = Tensor::zeros(&[h]);
        let w3 = glorot(out_dim, h, settings.output_init_scale, rng);
        // Output bias carries the initial weight values: Glorot magnitude for
        // the maximal W×W blocks, zero for the detector biases.
        let mut b3 = Tensor::zeros(&[out_dim]);
        let s = (6.0 / (2 * max_width) as Real).sqrt();
        let weight_block = max_depth * max_width * max_width;
        for v in b3.data_mut()[..weight_block].iter_mut() {
            *v = rng.random_range(-1.0..1.0) * s;
        }

        Ok(HyperNet {
            max_depth,
            max_width,
            settings,
            wd_log_range,
            params: vec![w1, b1, w2, b2, w3, b3],
        })
    }

    pub fn input_dim(&self) -> usize {
        2 + self.max_depth * self.settings.d_pe
    }

    pub fn output_dim(&self) -> usize {
        self.max_depth * self.max_width * self.max_width + self.max_depth * self.max_width
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Encodes λ into the network input row: rescaled regularization values
    /// followed by the positional encodings of λ_arch.
    pub fn encode(&self, cfg: &HpConfig) -> Result<Tensor> {
        let arch = cfg.lambda_arch(self.max_width, self.max_depth)?;
        let pe = positional_encode(&arch, self.settings.d_pe)?;
        let (lo, hi) = self.wd_log_range;
        let wd_scaled = if hi > lo {
            ((cfg.log_wd() - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let mut data = Vec::with_capacity(self.input_dim());
        data.push(cfg.dropout / DROPOUT_MAX);
        data.push(wd_scaled);
        data.extend_from_slice(pe.data());
        Tensor::new(vec![1, self.input_dim()], data)
    }

    /// Raw generated weights and biases, full size, no mask, no tape.
    pub fn forward(&self, cfg: &HpConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let x = self.encode(cfg)?;
        let h = self.settings.hidden;
        let [w1, b1, w2, b2, w3, b3] = &self.params[..] else {
            return Err(Error::Contract("hypernet parameter list corrupted".into()));
        };
        let mut h1 = matmul_tb(x.data(), w1.data(), 1, self.input_dim(), h);
        add_bias_in_place(&mut h1, b1.data());
        tanh_in_place(&mut h1);
        let mut h2 = matmul_tb(&h1, w2.data(), 1, h, h);
        add_bias_in_place(&mut h2, b2.data());
        tanh_in_place(&mut h2);
        let mut out = matmul_tb(&h2, w3.data(), 1, h, self.output_dim());
        add_bias_in_place(&mut out, b3.data());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hypernet output".into()));
        }

        let (d, w) = (self.max_depth, self.max_width);
        let weight_block = d * w * w;
        let mut weights = Vec::with_capacity(d);
        let mut biases = Vec::with_capacity(d);
        for l in 0..d {
            weights.push(Tensor::new(
                vec![w, w],
                out[l * w * w..(l + 1) * w * w].to_vec(),
            )?);
            biases.push(Tensor::new(
                vec![w],
                out[weight_block + l * w..weight_block + (l + 1) * w].to_vec(),
            )?);
        }
        Ok((weights, biases))
    }

    /// Generated weights with the architecture mask for `cfg` applied.
    pub fn generate(&self, cfg: &HpConfig) -> Result<dod::MaskedWeights> {
        let (weights, biases) = self.forward(cfg)?;
        let arch = cfg.lambda_arch(self.max_width, self.max_depth)?;
        let mask = build_arch_mask(&arch, self.max_depth, self.max_width)?;
        dod::MaskedWeights::new(weights, biases, mask)
    }

    /// Registers φ on a tape; order matches [`HyperNet::params`].
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Builds the batch loss graph
    /// `L = Σ_j L_trn(masked(HN(λ_j)), X) / m`
    /// on `tape` over pre-registered parameter vars.
    ///
    /// In training mode both the hypernetwork's own dropout and each λ's
    /// detector dropout are active; their masks are drawn from a stream
    /// derived from (`token`, λ identity), so duplicate configurations in a
    /// batch contribute identical terms.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        lambdas: &[HpConfig],
        x: &Tensor,
        mode: Mode,
        token: u64,
    ) -> Result<Var> {
        if lambdas.is_empty() {
            return Err(Error::Contract("hypernet loss needs at least one λ".into()));
        }
        if x.cols() != self.max_width {
            return Err(Error::ShapeMismatch {
                op: "hn_loss",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.max_width],
            });
        }
        let &[w1, b1, w2, b2, w3, b3] = params else {
            return Err(Error::Contract("expected six parameter vars".into()));
        };
        let (d, w, h) = (self.max_depth, self.max_width, self.settings.hidden);
        let weight_block = d * w * w;
        let xv = tape.constant(x.clone());

        let mut total: Option<Var> = None;
        for cfg in lambdas {
            let mut stream = seeds::derive_rng(token, &[cfg.key()]);
            let enc = tape.constant(self.encode(cfg)?);
            let z1 = tape.matmul_tb(enc, w1)?;
            let z1 = tape.add_bias(z1, b1)?;
            let mut h1 = tape.tanh(z1);
            if mode == Mode::Train && self.settings.hn_dropout > 0.0 {
                let m = tape.constant(dod::dropout_mask(&[1, h], self.settings.hn_dropout, &mut stream));
                h1 = tape.hadamard(h1, m)?;
            }
            let z2 = tape.matmul_tb(h1, w2)?;
            let z2 = tape.add_bias(z2, b2)?;
            let mut h2 = tape.tanh(z2);
            if mode == Mode::Train && self.settings.hn_dropout > 0.0 {
                let m = tape.constant(dod::dropout_mask(&[1, h], self.settings.hn_dropout, &mut stream));
                h2 = tape.hadamard(h2, m)?;
            }
            let out = tape.matmul_tb(h2, w3)?;
            let out = tape.add_bias(out, b3)?;

            let arch = cfg.lambda_arch(w, d)?;
            let mask = build_arch_mask(&arch, d, w)?;
            let mut wv = Vec::with_capacity(d);
            let mut bv = Vec::with_capacity(d);
            for l in 0..d {
                let wslice = tape.slice(out, l * w * w, &[w, w])?;
                let wm = tape.constant(mask.weight[l].clone());
                wv.push(tape.hadamard(wslice, wm)?);
                let bslice = tape.slice(out, weight_block + l * w, &[w])?;
                let bm = tape.constant(mask.bias[l].clone());
                bv.push(tape.hadamard(bslice, bm)?);
            }

            let xhat = dod::forward_masked_on_tape(
                tape,
                xv,
                &wv,
                &bv,
                &arch,
                cfg.dropout,
                mode,
                &mut stream,
            )?;
            let loss = dod::train_loss_on_tape(tape, xv, xhat, &wv, cfg.weight_decay)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let total = total.expect("at least one λ");
        Ok(tape.scale(total, 1.0 / lambdas.len() as Real))
    }

    /// Batch loss value (no gradients). Draws one token from `rng`.
    pub fn loss_batch<R: Rng>(
        &self,
        lambdas: &[HpConfig],
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Real> {
        let token: u64 = rng.random();
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = self.loss_graph(&mut tape, &params, lambdas, x, mode, token)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("hypernet batch loss".into()));
        }
        Ok(value)
    }

    /// One training step; returns the loss value and writes gradients into
    /// `grads_out` in parameter order.
    pub fn loss_and_grads<R: Rng>(
        &self,
        lambdas: &[HpConfig],
        x: &Tensor,
        rng: &mut R,
    ) -> Result<(Real, Vec<Tensor>)> {
        let token: u64 = rng.random();
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape);
        let loss = self.loss_graph(&mut tape, &params, lambdas, x, Mode::Train, token)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("hypernet batch loss".into()));
        }
        let grads: Gradients = tape.backward(loss)?;
        let out = params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        Ok((value, out))
    }
}

/// Self-describing serialized hypernetwork record.
#[derive(Serialize, Deserialize)]
pub struct HnCheckpoint {
    pub version: u32,
    pub grid_digest: u64,
    pub net: HyperNet,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl HnCheckpoint {
    pub fn save(net: &HyperNet, grid_digest: u64, path: &Path) -> Result<()> {
        let record = HnCheckpoint {
            version: CHECKPOINT_VERSION,
            grid_digest,
            net: net.clone(),
        };
        let json = serde_json::to_string(&record)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_digest: u64) -> Result<HyperNet> {
        let json = std::fs::read_to_string(path)?;
        let record: HnCheckpoint = serde_json::from_str(&json)?;
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {} != {CHECKPOINT_VERSION}",
                record.version
            )));
        }
        if record.grid_digest != expected_digest {
            return Err(Error::Version(format!(
                "checkpoint grid digest {:#x} != expected {:#x}",
                record.grid_digest, expected_digest
            )));
        }
        Ok(record.net)
    }
}

/// Convenience constructor with a derived stream.
pub fn seeded_hypernet(
    max_depth: usize,
    max_width: usize,
    settings: HnSettings,
    wd_log_range: (Real, Real),
    seed: u64,
) -> Result<HyperNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HyperNet::new(max_depth, max_width, settings, wd_log_range, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::HpGrid;

    fn small_net(seed: u64) -> HyperNet {
        let settings = HnSettings {
            hidden: 16,
            d_pe: 8,
            ..HnSettings::default()
        };
        seeded_hypernet(4, 5, settings, HpGrid::default().log_wd_range(), seed).unwrap()
    }

    fn batch_x(n: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![n, w], data).unwrap()
    }

    #[test]
    fn output_shape_contract() {
        let net = small_net(1);
        let cfg = HpConfig::new(4, 1.0, 0.2, 1e-5).unwrap();
        let (weights, biases) = net.forward(&cfg).unwrap();
        assert_eq!(weights.len(), 4);
        assert_eq!(biases.len(), 4);
        assert_eq!(weights[0].shape(), &[5, 5]);
        assert_eq!(biases[0].shape(), &[5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net(2);
        let cfg = HpConfig::new(2, 2.0, 0.0, 0.0).unwrap();
        let (w1, _) = net.forward(&cfg).unwrap();
        let (w2, _) = net.forward(&cfg).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn single_lambda_batch_equals_train_loss() {
        let net = small_net(3);
        let cfg = HpConfig::new(4, 2.0, 0.0, 1e-5).unwrap();
        let x = batch_x(12, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = net
            .loss_batch(std::slice::from_ref(&cfg), &x, Mode::Eval, &mut rng)
            .unwrap();
        let mw = net.generate(&cfg).unwrap();
        let xhat = dod::reconstruct(&x, &mw).unwrap();
        let direct = dod::train_loss(&x, &xhat, &mw, cfg.weight_decay).unwrap();
        assert!((batch - direct).abs() < 1e-12, "{batch} vs {direct}");
    }

    #[test]
    fn duplicated_lambda_keeps_mean_loss() {
        let net = small_net(4);
        let cfg = HpConfig::new(4, 1.4, 0.4, 0.0).unwrap();
        let x = batch_x(10, 5, 9);
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let mut rng2 = rng1.clone();
        let single = net
            .loss_batch(std::slice::from_ref(&cfg), &x, Mode::Train, &mut rng1)
            .unwrap();
        let doubled = net
            .loss_batch(&[cfg.clone(), cfg.clone()], &x, Mode::Train, &mut rng2)
            .unwrap();
        assert!((single - doubled).abs() < 1e-12, "{single} vs {doubled}");
    }

    #[test]
    fn batching_linearity() {
        let net = small_net(5);
        let a = HpConfig::new(2, 1.6, 0.2, 1e-6).unwrap();
        let b = HpConfig::new(4, 2.4, 0.0, 0.0).unwrap();
        let x = batch_x(14, 5, 11);
        let rng = ChaCha8Rng::seed_from_u64(8);
        let batch = net
            .loss_batch(&[a.clone(), b.clone()], &x, Mode::Train, &mut rng.clone())
            .unwrap();
        let la = net
            .loss_batch(std::slice::from_ref(&a), &x, Mode::Train, &mut rng.clone())
            .unwrap();
        let lb = net
            .loss_batch(std::slice::from_ref(&b), &x, Mode::Train, &mut rng.clone())
            .unwrap();
        assert!((batch - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let net = small_net(6);
        let x = batch_x(4, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(net.loss_batch(&[], &x, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = small_net(7);
        let lambdas = vec![
            HpConfig::new(2, 2.0, 0.0, 1e-5).unwrap(),
            HpConfig::new(4, 1.2, 0.0, 0.0).unwrap(),
        ];
        // Small-magnitude probe data keeps the loss value small enough that
        // the f64 rounding of the loss itself (≈ ulp(L)/2ε on the numeric
        // derivative) stays below the 1e-4 relative threshold even for
        // near-zero gradient entries.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data: Vec<Real> = (0..6 * 5).map(|_| rng.random_range(0.0..0.1)).collect();
        let x = Tensor::new(vec![6, 5], data).unwrap();
        let err = crate::tensor::finite_diff_check(
            &|tape, vars| net.loss_graph(tape, vars, &lambdas, &x, Mode::Eval, 0),
            net.params(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_and_digest_guard() {
        let net = small_net(8);
        let dir = std::env::temp_dir().join("hyperod-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("hn.json");
        HnCheckpoint::save(&net, 0xfeed, &path).unwrap();
        let loaded = HnCheckpoint::load(&path, 0xfeed).unwrap();
        assert_eq!(loaded.params()[0].data(), net.params()[0].data());
        assert!(matches!(
            HnCheckpoint::load(&path, 0xbeef),
            Err(Error::Version(_))
        ));
    }
}
