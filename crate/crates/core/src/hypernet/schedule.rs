//! Depth-scheduled hypernetwork training.
//!
//! Deeper architectures enter training first; shallower depths join in later
//! phases and train jointly with everything already admitted. This counters
//! the imbalance where weights feeding shallow architectures are shared by
//! many configurations and would otherwise dominate early training.

use rand::seq::index::sample;
use rand::Rng;

use crate::dod::Mode;
use crate::error::{Error, Result};
use crate::hypernet::{HpConfig, HyperNet};
use crate::tensor::{Real, SgdMomentum, Tensor};

/// Epoch-indexed admission plan: `(start_epoch, admitted depths)` with the
/// admitted set only ever growing.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    phases: Vec<(usize, Vec<usize>)>,
}

impl Schedule {
    pub fn new(phases: Vec<(usize, Vec<usize>)>) -> Result<Self> {
        if phases.is_empty() || phases[0].0 != 0 {
            return Err(Error::Config(
                "schedule must start with a phase at epoch 0".into(),
            ));
        }
        for pair in phases.windows(2) {
            let (e0, d0) = &pair[0];
            let (e1, d1) = &pair[1];
            if e1 <= e0 {
                return Err(Error::Config("schedule epochs must increase".into()));
            }
            if !d0.iter().all(|d| d1.contains(d)) {
                return Err(Error::Config(
                    "a depth, once admitted, must stay admitted".into(),
                ));
            }
        }
        if phases.iter().any(|(_, d)| d.is_empty()) {
            return Err(Error::Config("schedule admits an empty depth set".into()));
        }
        Ok(Schedule { phases })
    }

    /// Equal phases admitting depths from deepest to shallowest.
    pub fn deep_first(depths: &[usize], epochs: usize) -> Result<Self> {
        let mut distinct: Vec<usize> = depths.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.reverse();
        if distinct.is_empty() {
            return Err(Error::Config("no depths to schedule".into()));
        }
        let k = distinct.len();
        let mut phases = Vec::with_capacity(k);
        for i in 0..k {
            let start = i * epochs / k;
            let admitted = distinct[..=i].to_vec();
            phases.push((start, admitted));
        }
        // Collapse duplicate start epochs (tiny epoch counts).
        phases.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 = b.1.clone();
                true
            } else {
                false
            }
        });
        Schedule::new(phases)
    }

    pub fn admitted(&self, epoch: usize) -> &[usize] {
        let mut current = &self.phases[0].1;
        for (start, depths) in &self.phases {
            if *start <= epoch {
                current = depths;
            }
        }
        current
    }

    pub fn phases(&self) -> &[(usize, Vec<usize>)] {
        &self.phases
    }
}

#[derive(Clone, Debug)]
pub struct DepthTrace {
    pub depth: usize,
    pub admitted_at: usize,
    pub loss_at_admission: Real,
    pub final_loss: Real,
}

#[derive(Clone, Debug)]
pub struct ScheduledTrainReport {
    /// Mean single-λ evaluation loss over the whole grid before training.
    pub initial_grid_loss: Real,
    pub final_grid_loss: Real,
    pub per_depth: Vec<DepthTrace>,
    /// Training batch loss per epoch.
    pub epoch_losses: Vec<Real>,
}

/// Mean evaluation loss (no dropout) over `configs`, plus per-depth means.
/// Deterministic; does not consume the training stream.
pub fn grid_eval_loss(
    net: &HyperNet,
    configs: &[HpConfig],
    x: &Tensor,
) -> Result<(Real, std::collections::BTreeMap<usize, Real>)> {
    use rand::SeedableRng;
    use std::collections::BTreeMap;
    let mut probe_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut by_depth: BTreeMap<usize, (Real, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for cfg in configs {
        let loss = net.loss_batch(std::slice::from_ref(cfg), x, Mode::Eval, &mut probe_rng)?;
        total += loss;
        let e = by_depth.entry(cfg.n_layers).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    let mean = total / configs.len() as Real;
    let depth_means = by_depth
        .into_iter()
        .map(|(d, (s, c))| (d, s / c as Real))
        .collect();
    Ok((mean, depth_means))
}

/// Runs the scheduled training loop: at each epoch a batch of configurations
/// is drawn uniformly from the admitted depths and one SGD-with-momentum step
/// is applied to φ.
pub fn train_scheduled<R: Rng>(
    net: &mut HyperNet,
    configs: &[HpConfig],
    x: &Tensor,
    epochs: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<ScheduledTrainReport> {
    if configs.is_empty() {
        return Err(Error::Contract("no configurations to train on".into()));
    }
    for (_, admitted) in schedule.phases() {
        if !configs.iter().any(|c| admitted.contains(&c.n_layers)) {
            return Err(Error::Config(format!(
                "schedule admits depths {admitted:?} with no matching configuration"
            )));
        }
    }

    let n = x.rows();
    let w = x.cols();
    let batch_rows = net.settings.batch_samples.min(n);
    let per_step = net.settings.lambdas_per_step.max(1);
    let mut opt = SgdMomentum::new(net.settings.lr, net.settings.momentum);

    let (initial_grid_loss, depth_means) = grid_eval_loss(net, configs, x)?;
    let mut admission: Vec<(usize, usize, Real)> = Vec::new(); // (depth, epoch, loss)
    for &d in schedule.admitted(0) {
        if let Some(&loss) = depth_means.get(&d) {
            admission.push((d, 0, loss));
        }
    }

    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut admitted_prev: Vec<usize> = schedule.admitted(0).to_vec();
    for epoch in 0..epochs {
        let admitted = schedule.admitted(epoch);
        // Record the probe loss of each newly admitted depth once, at its
        // admission point.
        let newly: Vec<usize> = admitted
            .iter()
            .copied()
            .filter(|d| !admitted_prev.contains(d))
            .collect();
        if !newly.is_empty() {
            let (_, means) = grid_eval_loss(net, configs, x)?;
            for d in newly {
                if let Some(&loss) = means.get(&d) {
                    admission.push((d, epoch, loss));
                }
            }
        }
        admitted_prev = admitted.to_vec();

        let pool: Vec<&HpConfig> = configs
            .iter()
            .filter(|c| admitted.contains(&c.n_layers))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("admitted depth set matches no configuration".into()));
        }
        let batch_cfgs: Vec<HpConfig> = (0..per_step)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();

        let xb = if batch_rows < n {
            let idx = sample(rng, n, batch_rows);
            let mut data = Vec::with_capacity(batch_rows * w);
            for i in idx.iter() {
                data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(vec![batch_rows, w], data)?
        } else {
            x.clone()
        };

        let (loss, grads) = net.loss_and_grads(&batch_cfgs, &xb, rng)?;
        opt.step(net.params_mut(), &grads);
        epoch_losses.push(loss);
    }

    let (final_grid_loss, final_means) = grid_eval_loss(net, configs, x)?;
    let per_depth = admission
        .into_iter()
        .map(|(depth, admitted_at, loss_at_admission)| DepthTrace {
            depth,
            admitted_at,
            loss_at_admission,
            final_loss: final_means.get(&depth).copied().unwrap_or(Real::NAN),
        })
        .collect();

    Ok(ScheduledTrainReport {
        initial_grid_loss,
        final_grid_loss,
        per_depth,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::{seeded_hypernet, HnSettings, HpGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deep_first_default_phases() {
        let s = Schedule::deep_first(&[2, 4, 6, 8], 100).unwrap();
        assert_eq!(
            s.phases(),
            &[
                (0, vec![8]),
                (25, vec![8, 6]),
                (50, vec![8, 6, 4]),
                (75, vec![8, 6, 4, 2]),
            ]
        );
        assert_eq!(s.admitted(0), &[8]);
        assert_eq!(s.admitted(30), &[8, 6]);
        assert_eq!(s.admitted(99), &[8, 6, 4, 2]);
    }

    #[test]
    fn single_depth_degenerates_to_uniform() {
        let s = Schedule::deep_first(&[4], 50).unwrap();
        assert_eq!(s.phases(), &[(0, vec![4])]);
    }

    #[test]
    fn admitted_depths_never_leave() {
        assert!(Schedule::new(vec![(0, vec![8]), (10, vec![6])]).is_err());
        assert!(Schedule::new(vec![(0, vec![8]), (10, vec![8, 6])]).is_ok());
        assert!(Schedule::new(vec![(5, vec![8])]).is_err());
    }

    #[test]
    fn short_training_reduces_grid_loss() {
        let grid = HpGrid {
            n_layers: vec![2, 4],
            compression: vec![1.0, 2.0],
            dropout: vec![0.0],
            weight_decay: vec![0.0],
        };
        let settings = HnSettings {
            hidden: 24,
            d_pe: 8,
            hn_dropout: 0.0,
            lr: 5e-3,
            batch_samples: 64,
            lambdas_per_step: 4,
            ..HnSettings::default()
        };
        let mut net = seeded_hypernet(4, 6, settings, grid.log_wd_range(), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<Real> = (0..64 * 6)
            .map(|i| ((i % 6) as Real) / 6.0 + 0.05 * ((i / 6) % 3) as Real)
            .collect();
        let x = Tensor::new(vec![64, 6], data).unwrap();
        let configs = grid.canonical_for(6).unwrap();
        let schedule = Schedule::deep_first(&grid.n_layers, 60).unwrap();
        let report = train_scheduled(&mut net, &configs, &x, 60, &schedule, &mut rng).unwrap();
        assert!(
            report.final_grid_loss < report.initial_grid_loss,
            "loss went from {} to {}",
            report.initial_grid_loss,
            report.final_grid_loss
        );
        assert_eq!(report.epoch_losses.len(), 60);
    }
}
