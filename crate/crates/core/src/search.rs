//! Online model selection on an unlabeled dataset.
//!
//! Alternates two stages until patience runs out: (S1) local hypernetwork
//! training around the current configuration, collecting every sampled
//! configuration into a candidate set, then (S2) a gradient-free update of
//! the current configuration (argmax of the validation objective over the
//! candidates) followed by a coordinate-wise update of the sampling scale.
//! The final configuration is the candidate with the best predicted
//! performance, scored with hypernetwork-generated weights only.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dod;
use crate::error::{Error, Result};
use crate::hypernet::{HpConfig, HpGrid, HyperNet, DROPOUT_MAX, WD_FLOOR};
use crate::meta::{assemble_features, MetaStore};
use crate::runconfig::{RunConfig, SearchSettings};
use crate::seeds::{self, stream};
use crate::tensor::{Real, SgdMomentum, Tensor};

/// Continuous view of the configuration space: depth moves in grid-index
/// units and snaps back to the grid; the other coordinates are clamped to
/// their valid ranges.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub depth_grid: Vec<usize>,
    pub c_range: (Real, Real),
    pub dropout_range: (Real, Real),
    pub wd_log_range: (Real, Real),
}

impl SearchSpace {
    pub fn from_grid(grid: &HpGrid) -> Self {
        let mut depth_grid = grid.n_layers.clone();
        depth_grid.sort_unstable();
        depth_grid.dedup();
        let d_lo = grid.dropout.iter().cloned().fold(Real::INFINITY, Real::min);
        let d_hi = grid
            .dropout
            .iter()
            .cloned()
            .fold(Real::NEG_INFINITY, Real::max)
            .min(DROPOUT_MAX);
        SearchSpace {
            depth_grid,
            c_range: grid.compression_range(),
            dropout_range: (d_lo, d_hi),
            wd_log_range: grid.log_wd_range(),
        }
    }

    /// [depth index, compression, dropout, log10 weight decay]
    pub fn coords(&self, cfg: &HpConfig) -> [Real; 4] {
        let idx = self
            .depth_grid
            .iter()
            .position(|&l| l == cfg.n_layers)
            .unwrap_or(0);
        [idx as Real, cfg.compression, cfg.dropout, cfg.log_wd()]
    }

    pub fn config_from_coords(&self, coords: [Real; 4]) -> Result<HpConfig> {
        let max_idx = (self.depth_grid.len() - 1) as Real;
        let idx = coords[0].round().clamp(0.0, max_idx) as usize;
        let n_layers = self.depth_grid[idx];
        let compression = coords[1].clamp(self.c_range.0, self.c_range.1);
        let dropout = coords[2].clamp(self.dropout_range.0, self.dropout_range.1);
        let log_wd = coords[3].clamp(self.wd_log_range.0, self.wd_log_range.1);
        let weight_decay = ((10.0 as Real).powf(log_wd) - WD_FLOOR).max(0.0);
        HpConfig::new(n_layers, compression, dropout, weight_decay)
    }
}

/// Draws one local configuration around `cfg`: a factorized Gaussian
/// perturbation, snapped (depth) and clamped (continuous dims); invalid
/// results are rejected and resampled up to 32 times.
pub fn sample_local<R: Rng>(
    cfg: &HpConfig,
    sigma: &[Real; 4],
    space: &SearchSpace,
    rng: &mut R,
) -> Result<HpConfig> {
    let base = space.coords(cfg);
    for _ in 0..32 {
        let mut coords = base;
        for (c, &s) in coords.iter_mut().zip(sigma.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *c += s * z as Real;
        }
        match space.config_from_coords(coords) {
            Ok(c) => return Ok(c),
            Err(_) => continue,
        }
    }
    Err(Error::SamplingRange(format!(
        "32 consecutive rejections around {} with σ {:?}",
        cfg.describe(),
        sigma
    )))
}

/// Differential entropy of the factorized Gaussian:
/// Σ_d (½·ln(2πe) + ln σ_d).
pub fn gaussian_entropy(sigma: &[Real]) -> Result<Real> {
    let mut h = 0.0;
    for &s in sigma {
        if !(s > 0.0) {
            return Err(Error::Config(format!("entropy needs σ > 0, got {s}")));
        }
        h += 0.5 * (2.0 * std::f64::consts::PI as Real * std::f64::consts::E as Real).ln() + s.ln();
    }
    Ok(h)
}

/// Everything needed to score a candidate configuration on the test set.
pub struct ObjectiveContext<'a> {
    pub space: &'a SearchSpace,
    pub net: &'a HyperNet,
    pub store: &'a MetaStore,
    pub x_test: &'a Tensor,
    /// Data embedding of the test set, computed once and cached.
    pub data_embedding: &'a [Real],
}

impl ObjectiveContext<'_> {
    /// Predicted performance of one configuration: generate weights, score
    /// the test set, embed the scores, run the validator.
    pub fn predict(&self, cfg: &HpConfig) -> Result<Real> {
        let mw = self.net.generate(cfg)?;
        let scores = dod::outlier_scores(self.x_test, &mw)?;
        let model_emb = self.store.score_encoder.model_embedding(&scores)?;
        let features = assemble_features(
            cfg,
            self.x_test.cols(),
            self.data_embedding,
            &model_emb,
            &self.store.validator.layout,
        )?;
        self.store.validator.predict(&features)
    }

    /// Validation objective G(λ, σ): empirical mean of the predicted
    /// performance over local perturbations, plus the entropy bonus.
    pub fn objective(
        &self,
        cfg: &HpConfig,
        sigma: &[Real; 4],
        n_samples: usize,
        tau: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<Real> {
        let mut total = 0.0;
        let mut accepted = 0usize;
        for _ in 0..n_samples {
            let Ok(local) = sample_local(cfg, sigma, self.space, rng) else {
                continue;
            };
            total += self.predict(&local)?;
            accepted += 1;
        }
        if accepted == 0 {
            return Err(Error::SamplingRange(
                "all perturbations around the candidate were rejected".into(),
            ));
        }
        Ok(total / accepted as Real + tau * gaussian_entropy(sigma)?)
    }
}

/// Best-prediction argmax over candidates; exact ties fall to the lowest
/// effective parameter count at the test width.
pub fn final_select(
    candidates: &[HpConfig],
    predictions: &[Real],
    input_dim: usize,
) -> Result<(usize, Real)> {
    if candidates.is_empty() || candidates.len() != predictions.len() {
        return Err(Error::Contract(
            "final selection needs aligned, nonempty candidates".into(),
        ));
    }
    let mut best: Option<(Real, usize, usize)> = None; // (pred, complexity, idx)
    for (i, (cfg, &p)) in candidates.iter().zip(predictions).enumerate() {
        let complexity = cfg.effective_params(input_dim)?;
        let better = match best {
            None => true,
            Some((bp, bc, _)) => p > bp || (p == bp && complexity < bc),
        };
        if better {
            best = Some((p, complexity, i));
        }
    }
    let (pred, _, idx) = best.expect("nonempty");
    Ok((idx, pred))
}

#[derive(Clone, Debug)]
pub struct IterRecord {
    pub iter: usize,
    pub lambda_curr: HpConfig,
    pub sigma_curr: [Real; 4],
    /// Best predicted performance so far (non-decreasing).
    pub best_pred: Real,
    pub candidates: usize,
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    pub selected: HpConfig,
    pub selected_pred: Real,
    pub iterations: Vec<IterRecord>,
    pub total_candidates: usize,
}

impl SearchReport {
    /// Deterministic structured-text rendering (no timing information).
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("selected = {}\n", self.selected.describe()));
        s.push_str(&format!("selected_pred = {}\n", self.selected_pred));
        s.push_str(&format!("iterations = {}\n", self.iterations.len()));
        s.push_str(&format!("candidates = {}\n", self.total_candidates));
        for r in &self.iterations {
            s.push_str(&format!(
                "iter {}: lambda = [{}] sigma = [{}, {}, {}, {}] best_pred = {} candidates = {}\n",
                r.iter,
                r.lambda_curr.describe(),
                r.sigma_curr[0],
                r.sigma_curr[1],
                r.sigma_curr[2],
                r.sigma_curr[3],
                r.best_pred,
                r.candidates,
            ));
        }
        s
    }
}

/// Wall-clock per stage; reported separately from the (deterministic)
/// search report.
#[derive(Clone, Debug, Default)]
pub struct StageTimings {
    pub hn_training: Duration,
    pub hp_optimization: Duration,
    pub final_selection: Duration,
}

impl StageTimings {
    pub fn render(&self) -> String {
        format!(
            "hn_training_ms = {}\nhp_optimization_ms = {}\nfinal_selection_ms = {}\n",
            self.hn_training.as_millis(),
            self.hp_optimization.as_millis(),
            self.final_selection.as_millis()
        )
    }
}

pub struct SelectOutcome {
    pub report: SearchReport,
    pub timings: StageTimings,
    /// Outlier scores of the selected configuration on the test set,
    /// produced by the final hypernetwork weights.
    pub scores: Vec<Real>,
}

/// The full online selection loop (Algorithm: alternate local hypernetwork
/// training and gradient-free configuration updates until the best predicted
/// performance stalls for `patience` iterations).
pub fn hyper_select(
    x_test: &Tensor,
    store: &MetaStore,
    config: &RunConfig,
    seed: u64,
) -> Result<SelectOutcome> {
    let settings: &SearchSettings = &config.search;
    let f = x_test.cols();
    let n = x_test.rows();
    if n == 0 || f == 0 {
        return Err(Error::Contract("empty test matrix".into()));
    }
    x_test.check_finite("test matrix")?;
    settings.sigma.validate()?;

    let space = SearchSpace::from_grid(&store.grid);

    // Degenerate space: a single distinct configuration needs no search.
    let canonical = store.grid.canonical_for(f)?;
    if canonical.len() == 1 {
        let selected = canonical.into_iter().next().expect("one config");
        let mut rng = seeds::derive_rng(seed, &[stream::SEARCH, 0]);
        let mut net = HyperNet::new(
            store.grid.max_depth(),
            f,
            config.hn.clone(),
            store.grid.log_wd_range(),
            &mut rng,
        )?;
        let schedule = crate::hypernet::Schedule::deep_first(&store.grid.n_layers, config.hn_epochs)?;
        crate::hypernet::train_scheduled(
            &mut net,
            std::slice::from_ref(&selected),
            x_test,
            config.hn_epochs,
            &schedule,
            &mut rng,
        )?;
        let scores = dod::outlier_scores(x_test, &net.generate(&selected)?)?;
        return Ok(SelectOutcome {
            report: SearchReport {
                selected,
                selected_pred: Real::NAN,
                iterations: Vec::new(),
                total_candidates: 1,
            },
            timings: StageTimings::default(),
            scores,
        });
    }

    let mut net = {
        let mut rng = seeds::derive_rng(seed, &[stream::SEARCH, 0]);
        HyperNet::new(
            store.grid.max_depth(),
            f,
            config.hn.clone(),
            store.grid.log_wd_range(),
            &mut rng,
        )?
    };
    let mut opt = SgdMomentum::new(config.hn.lr, config.hn.momentum);
    let mut sampler = seeds::derive_rng(seed, &[stream::SEARCH, 1]);

    let data_embedding = store.extractor.data_embedding(x_test)?;

    let mut lambda_curr = store.global_best.clone();
    let mut sigma_curr = store.sigma_init;
    let mut candidates: Vec<HpConfig> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();

    let mut best_pred = Real::NEG_INFINITY;
    let mut stall = 0usize;
    let mut lr_halved = false;
    let mut iterations = Vec::new();
    let mut timings = StageTimings::default();

    let batch_rows = config.hn.batch_samples.min(n);

    for iter in 1..=settings.max_iters {
        // ── S1: local hypernetwork training ─────────────────────────
        let t0 = Instant::now();
        for _ in 0..settings.steps_per_iter {
            let local = sample_local(&lambda_curr, &sigma_curr, &space, &mut sampler)?;
            let xb = if batch_rows < n {
                let idx = rand::seq::index::sample(&mut sampler, n, batch_rows);
                let mut data = Vec::with_capacity(batch_rows * f);
                for i in idx.iter() {
                    data.extend_from_slice(&x_test.data()[i * f..(i + 1) * f]);
                }
                Tensor::new(vec![batch_rows, f], data)?
            } else {
                x_test.clone()
            };
            let step = net.loss_and_grads(std::slice::from_ref(&local), &xb, &mut sampler);
            match step {
                Ok((_, grads)) => opt.step(net.params_mut(), &grads),
                Err(Error::NonFinite(_)) if !lr_halved => {
                    lr_halved = true;
                    opt.set_lr(opt.lr() / 2.0);
                    log::warn!("non-finite hypernetwork loss; halving learning rate");
                }
                Err(e) => return Err(e),
            }
            if seen.insert(local.key()) {
                candidates.push(local);
            }
        }
        if settings.candidate_cap > 0 && candidates.len() > settings.candidate_cap {
            let drop = candidates.len() - settings.candidate_cap;
            for cfg in candidates.drain(..drop) {
                seen.remove(&cfg.key());
            }
        }
        if candidates.is_empty() {
            return Err(Error::SamplingRange(format!(
                "iteration {iter}: candidate set is empty (all samples rejected)"
            )));
        }
        timings.hn_training += t0.elapsed();

        // ── S2: configuration and scale updates ─────────────────────
        let t1 = Instant::now();
        let ctx = ObjectiveContext {
            space: &space,
            net: &net,
            store,
            x_test,
            data_embedding: &data_embedding,
        };

        // λ update: argmax of G over the candidate set with σ fixed.
        let iter_token = seeds::mix(&[seed, stream::SEARCH, 2, iter as u64]);
        let g_values: Vec<Real> = candidates
            .par_iter()
            .enumerate()
            .map(|(ci, cfg)| {
                let mut rng = seeds::derive_rng(iter_token, &[ci as u64]);
                ctx.objective(cfg, &sigma_curr, settings.samples_per_candidate, settings.tau, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let best_g = g_values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite objective"))
            .map(|(i, _)| i)
            .expect("nonempty candidates");
        lambda_curr = candidates[best_g].clone();

        // σ update: per-dimension argmax over the scale grid, other
        // dimensions held at their current values.
        let dims = settings.sigma.dims();
        let mut next_sigma = sigma_curr;
        for (d, dim_values) in dims.iter().enumerate() {
            let scored: Vec<Real> = dim_values
                .par_iter()
                .enumerate()
                .map(|(vi, &v)| {
                    let mut trial = sigma_curr;
                    trial[d] = v;
                    let mut rng =
                        seeds::derive_rng(iter_token, &[1000 + d as u64, vi as u64]);
                    ctx.objective(
                        &lambda_curr,
                        &trial,
                        settings.samples_per_candidate,
                        settings.tau,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let best_v = scored
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite objective"))
                .map(|(i, _)| i)
                .expect("nonempty sigma grid");
            next_sigma[d] = dim_values[best_v];
        }
        sigma_curr = next_sigma;

        // Patience bookkeeping on the best point prediction over S.
        let preds: Vec<Real> = candidates
            .par_iter()
            .map(|cfg| ctx.predict(cfg))
            .collect::<Result<Vec<_>>>()?;
        let iter_best = preds
            .iter()
            .cloned()
            .fold(Real::NEG_INFINITY, Real::max);
        if iter_best > best_pred + settings.improvement_tol {
            best_pred = iter_best;
            stall = 0;
        } else {
            stall += 1;
        }
        timings.hp_optimization += t1.elapsed();

        iterations.push(IterRecord {
            iter,
            lambda_curr: lambda_curr.clone(),
            sigma_curr,
            best_pred,
            candidates: candidates.len(),
        });

        if stall >= settings.patience {
            // Final selection reuses the predictions just computed (φ has
            // not changed since).
            let t2 = Instant::now();
            let (idx, pred) = final_select(&candidates, &preds, f)?;
            let selected = candidates[idx].clone();
            let scores = dod::outlier_scores(x_test, &net.generate(&selected)?)?;
            timings.final_selection += t2.elapsed();
            return Ok(SelectOutcome {
                report: SearchReport {
                    selected,
                    selected_pred: pred,
                    iterations,
                    total_candidates: candidates.len(),
                },
                timings,
                scores,
            });
        }
    }

    Err(Error::Contract(format!(
        "search did not converge within {} iterations",
        settings.max_iters
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_space() -> SearchSpace {
        SearchSpace {
            depth_grid: vec![2, 4, 6, 8],
            c_range: (1.0, 3.0),
            dropout_range: (0.0, 0.4),
            wd_log_range: (-8.0, -5.0),
        }
    }

    #[test]
    fn entropy_closed_form() {
        let h1 = gaussian_entropy(&[1.0]).unwrap();
        assert!((h1 - 1.41894).abs() < 1e-5, "{h1}");
        let h2 = gaussian_entropy(&[1.0, 1.0]).unwrap();
        assert!((h2 - 2.83788).abs() < 1e-5, "{h2}");
        let h3 = gaussian_entropy(&[0.5]).unwrap();
        assert!((h3 - 0.72579).abs() < 1e-5, "{h3}");
        assert!(gaussian_entropy(&[0.0]).is_err());
        assert!(gaussian_entropy(&[-1.0]).is_err());
    }

    #[test]
    fn zero_sigma_returns_the_center() {
        let space = toy_space();
        let cfg = HpConfig::new(4, 1.8, 0.2, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample_local(&cfg, &[1e-12; 4], &space, &mut rng).unwrap();
        assert_eq!(out.n_layers, 4);
        assert!((out.compression - 1.8).abs() < 1e-9);
        assert!((out.dropout - 0.2).abs() < 1e-9);
    }

    #[test]
    fn boundary_samples_stay_clamped() {
        let space = toy_space();
        let cfg = HpConfig::new(8, 3.0, 0.4, 1e-5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let out = sample_local(&cfg, &[2.0, 0.8, 0.2, 1.0], &space, &mut rng).unwrap();
            assert!(space.depth_grid.contains(&out.n_layers));
            assert!((1.0..=3.0).contains(&out.compression));
            assert!((0.0..=0.4).contains(&out.dropout));
            assert!(out.weight_decay >= 0.0 && out.weight_decay <= 1.01e-5);
        }
    }

    #[test]
    fn depth_distribution_matches_snapped_gaussian() {
        // Monte-Carlo mass per depth bin vs the Gaussian CDF over snap
        // intervals in index space.
        let space = toy_space();
        let cfg = HpConfig::new(4, 2.0, 0.2, 0.0).unwrap();
        let sigma = [0.8, 1e-9, 1e-9, 1e-9];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let out = sample_local(&cfg, &sigma, &space, &mut rng).unwrap();
            let idx = space.depth_grid.iter().position(|&l| l == out.n_layers).unwrap();
            counts[idx] += 1;
        }
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(1.0, 0.8).unwrap(); // center index of L=4
        let mass = |lo: f64, hi: f64| normal.cdf(hi) - normal.cdf(lo);
        let expected = [
            mass(f64::NEG_INFINITY, 0.5),
            mass(0.5, 1.5),
            mass(1.5, 2.5),
            mass(2.5, f64::INFINITY),
        ];
        for (i, &c) in counts.iter().enumerate() {
            let got = c as f64 / n as f64;
            assert!(
                (got - expected[i]).abs() < 0.02,
                "bin {i}: {got} vs {}",
                expected[i]
            );
        }
    }

    #[test]
    fn impossible_space_reports_sampling_range() {
        // A space whose clamped compression is below the validity floor can
        // never produce a valid configuration.
        let space = SearchSpace {
            depth_grid: vec![4],
            c_range: (0.2, 0.4),
            dropout_range: (0.0, 0.4),
            wd_log_range: (-8.0, -5.0),
        };
        let cfg = HpConfig::new(4, 1.0, 0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = sample_local(&cfg, &[0.1, 0.1, 0.01, 0.1], &space, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SamplingRange(_)));
    }

    #[test]
    fn final_select_matches_brute_force_and_breaks_ties() {
        let a = HpConfig::new(8, 1.0, 0.0, 0.0).unwrap(); // large
        let b = HpConfig::new(2, 3.0, 0.0, 0.0).unwrap(); // small
        let c = HpConfig::new(4, 2.0, 0.1, 0.0).unwrap();
        let candidates = vec![a, b.clone(), c];
        let preds = vec![0.7, 0.7, 0.4];
        let (idx, pred) = final_select(&candidates, &preds, 10).unwrap();
        assert_eq!(pred, 0.7);
        assert_eq!(candidates[idx], b, "tie must fall to the smaller model");

        // Argmax invariant under permutation.
        let perm = vec![candidates[2].clone(), candidates[1].clone(), candidates[0].clone()];
        let perm_preds = vec![0.4, 0.7, 0.7];
        let (pidx, _) = final_select(&perm, &perm_preds, 10).unwrap();
        assert_eq!(perm[pidx], b);

        // Single candidate returns itself.
        let (sidx, spred) = final_select(&perm[..1], &[0.4], 10).unwrap();
        assert_eq!(sidx, 0);
        assert_eq!(spred, 0.4);
    }
}
