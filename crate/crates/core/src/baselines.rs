//! Reference baselines and the evaluation protocol.
//!
//! Ground truth for a configuration is its detection AUROC after full
//! from-scratch training of the masked detector on the task. Methods are
//! ranked against the (deduplicated) grid's ground-truth performances with
//! the insertion rank, whose mean over the grid is exactly 0.5 — the
//! expectation of a uniformly random pick.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::dod::{self, MaskedWeights, Mode};
use crate::error::{Error, Result};
use crate::hypernet::{build_arch_mask, HpConfig, HpGrid};
use crate::meta::{HistoricalTask, MetaStore};
use crate::metrics::{auroc, rank_within, wilcoxon_signed_rank};
use crate::runconfig::{RunConfig, ScratchSettings};
use crate::search::{hyper_select, SearchReport};
use crate::seeds::{self, stream};
use crate::tensor::{Adam, Real, Tape, Tensor, Var};

/// Method identifiers used in evaluation reports.
pub const METHOD_HYPER: &str = "hyper";
pub const METHOD_RANDOM: &str = "random";
pub const METHOD_DEFAULT: &str = "default";
pub const METHOD_GLOBAL_BEST: &str = "global_best";

/// Trains the masked detector directly (Adam on the same masked loss the
/// hypernetwork optimizes) and returns the trained weights.
pub fn train_detector<R: Rng>(
    x: &Tensor,
    cfg: &HpConfig,
    max_depth: usize,
    scratch: &ScratchSettings,
    rng: &mut R,
) -> Result<MaskedWeights> {
    let (n, f) = (x.rows(), x.cols());
    let arch = cfg.lambda_arch(f, max_depth)?;
    let mask = build_arch_mask(&arch, max_depth, f)?;

    let mut weights: Vec<Tensor> = Vec::with_capacity(max_depth);
    let mut biases: Vec<Tensor> = Vec::with_capacity(max_depth);
    let s = (6.0 / (2 * f) as Real).sqrt();
    for _ in 0..max_depth {
        let wdata = (0..f * f).map(|_| rng.random_range(-1.0..1.0) * s).collect();
        weights.push(Tensor::new(vec![f, f], wdata)?);
        biases.push(Tensor::zeros(&[f]));
    }

    let mut opt = Adam::new(scratch.lr);
    let batch_rows = scratch.batch.min(n);
    for _ in 0..scratch.epochs {
        let xb = if batch_rows < n {
            let idx = rand::seq::index::sample(rng, n, batch_rows);
            let mut data = Vec::with_capacity(batch_rows * f);
            for i in idx.iter() {
                data.extend_from_slice(&x.data()[i * f..(i + 1) * f]);
            }
            Tensor::new(vec![batch_rows, f], data)?
        } else {
            x.clone()
        };

        let mut tape = Tape::new();
        let xv = tape.constant(xb);
        let mut params: Vec<Var> = Vec::with_capacity(2 * max_depth);
        let mut wv = Vec::with_capacity(max_depth);
        let mut bv = Vec::with_capacity(max_depth);
        for l in 0..max_depth {
            let pw = tape.param(weights[l].clone());
            let wm = tape.constant(mask.weight[l].clone());
            wv.push(tape.hadamard(pw, wm)?);
            let pb = tape.param(biases[l].clone());
            let bm = tape.constant(mask.bias[l].clone());
            bv.push(tape.hadamard(pb, bm)?);
            params.push(pw);
            params.push(pb);
        }
        let xhat =
            dod::forward_masked_on_tape(&mut tape, xv, &wv, &bv, &arch, cfg.dropout, Mode::Train, rng)?;
        let loss = dod::train_loss_on_tape(&mut tape, xv, xhat, &wv, cfg.weight_decay)?;
        let grads = tape.backward(loss)?;
        let gvec: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let shape: &[usize] = if i % 2 == 0 { &[f, f] } else { &[f] };
                grads.get_or_zeros(*v, shape)
            })
            .collect();
        let mut flat: Vec<Tensor> = Vec::with_capacity(2 * max_depth);
        for l in 0..max_depth {
            flat.push(weights[l].clone());
            flat.push(biases[l].clone());
        }
        opt.step(&mut flat, &gvec);
        for l in (0..max_depth).rev() {
            biases[l] = flat.pop().expect("bias");
            weights[l] = flat.pop().expect("weight");
        }
    }

    MaskedWeights::new(weights, biases, mask)
}

/// Ground-truth AUROC of one configuration on a labeled task via full
/// from-scratch training.
pub fn scratch_auroc(
    task: &HistoricalTask,
    cfg: &HpConfig,
    max_depth: usize,
    scratch: &ScratchSettings,
    seed: u64,
) -> Result<Real> {
    let mut rng = seeds::derive_rng(seed, &[stream::SCRATCH_TRAIN, cfg.key()]);
    let mw = train_detector(&task.x, cfg, max_depth, scratch, &mut rng)?;
    let scores = dod::outlier_scores(&task.x, &mw)?;
    auroc(&scores, &task.labels)
}

/// The fixed reference configuration, mapped to the nearest grid point:
/// 4 layers, no compression, dropout 0.2, no weight decay.
pub fn baseline_default(grid: &HpGrid) -> HpConfig {
    let nearest = |values: &[Real], target: Real| -> Real {
        values
            .iter()
            .cloned()
            .min_by(|a, b| {
                ((a - target).abs())
                    .partial_cmp(&(b - target).abs())
                    .expect("finite grid")
            })
            .expect("nonempty grid dimension")
    };
    let nearest_l = grid
        .n_layers
        .iter()
        .cloned()
        .min_by_key(|&l| l.abs_diff(4))
        .expect("nonempty layer grid");
    HpConfig {
        n_layers: nearest_l,
        compression: nearest(&grid.compression, 1.0),
        dropout: nearest(&grid.dropout, 0.2),
        weight_decay: nearest(&grid.weight_decay, 0.0),
    }
}

/// Expected normalized rank of a uniformly random pick over the grid.
pub fn baseline_random_rank(grid_perfs: &[Real]) -> Real {
    grid_perfs
        .iter()
        .map(|&p| rank_within(grid_perfs, p))
        .sum::<Real>()
        / grid_perfs.len() as Real
}

/// Expected performance of a uniformly random pick.
pub fn baseline_random_perf(grid_perfs: &[Real]) -> Real {
    grid_perfs.iter().sum::<Real>() / grid_perfs.len() as Real
}

/// The stored global-best configuration.
pub fn baseline_global_best(store: &MetaStore) -> HpConfig {
    store.global_best.clone()
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    pub config: Option<HpConfig>,
    pub auroc: Real,
    pub rank: Real,
}

#[derive(Clone, Debug)]
pub struct TaskEval {
    pub task: String,
    /// Ground-truth AUROC per deduplicated grid entry.
    pub grid_perfs: Vec<Real>,
    pub methods: Vec<MethodResult>,
    pub search_report: Option<SearchReport>,
}

/// Evaluates the selector and the reference baselines on one labeled task.
/// Every method's configuration is judged by the same from-scratch pipeline.
pub fn evaluate_on_task(
    task: &HistoricalTask,
    store: &MetaStore,
    config: &RunConfig,
    task_seed: u64,
) -> Result<TaskEval> {
    if !task.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let f = task.input_dim();
    let d = store.grid.max_depth();
    let canonical = store.grid.canonical_for(f)?;

    // Ground truth for the whole (deduplicated) grid.
    let grid_perfs: Vec<Real> = canonical
        .par_iter()
        .map(|cfg| scratch_auroc(task, cfg, d, &config.scratch, task_seed))
        .collect::<Result<Vec<_>>>()?;

    // Selector.
    let outcome = hyper_select(&task.x, store, config, task_seed)?;
    let selected = outcome.report.selected.clone();
    let hyper_auroc = scratch_auroc(task, &selected, d, &config.scratch, task_seed)?;

    // Baselines (canonical representatives of grid members reuse the
    // ground-truth values already computed).
    let canonical_index = |cfg: &HpConfig| -> Result<usize> {
        let key = cfg.dedup_key(f)?;
        canonical
            .iter()
            .position(|c| c.dedup_key(f).map(|k| k == key).unwrap_or(false))
            .ok_or_else(|| Error::Contract("configuration missing from the grid".into()))
    };
    let default_cfg = baseline_default(&store.grid);
    let default_auroc = grid_perfs[canonical_index(&default_cfg)?];
    let gb_cfg = baseline_global_best(store);
    let gb_auroc = grid_perfs[canonical_index(&gb_cfg)?];
    let random_auroc = baseline_random_perf(&grid_perfs);

    let methods = vec![
        MethodResult {
            method: METHOD_HYPER.into(),
            config: Some(selected),
            auroc: hyper_auroc,
            rank: rank_within(&grid_perfs, hyper_auroc),
        },
        MethodResult {
            method: METHOD_RANDOM.into(),
            config: None,
            auroc: random_auroc,
            rank: baseline_random_rank(&grid_perfs),
        },
        MethodResult {
            method: METHOD_DEFAULT.into(),
            config: Some(default_cfg),
            auroc: default_auroc,
            rank: rank_within(&grid_perfs, default_auroc),
        },
        MethodResult {
            method: METHOD_GLOBAL_BEST.into(),
            config: Some(gb_cfg),
            auroc: gb_auroc,
            rank: rank_within(&grid_perfs, gb_auroc),
        },
    ];

    Ok(TaskEval {
        task: task.name.clone(),
        grid_perfs,
        methods,
        search_report: Some(outcome.report),
    })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub tasks: Vec<TaskEval>,
    pub mean_rank: BTreeMap<String, Real>,
    /// Two-sided Wilcoxon p-values of the selector against each baseline
    /// over the per-task AUROC series.
    pub wilcoxon_vs_hyper: BTreeMap<String, Real>,
}

/// Evaluates all test tasks and aggregates ranks and paired tests.
pub fn evaluate_testbed(
    test_tasks: &[HistoricalTask],
    store: &MetaStore,
    config: &RunConfig,
) -> Result<EvalSummary> {
    if test_tasks.is_empty() {
        return Err(Error::Contract("no test tasks".into()));
    }
    let mut tasks = Vec::with_capacity(test_tasks.len());
    for (i, task) in test_tasks.iter().enumerate() {
        tasks.push(evaluate_on_task(
            task,
            store,
            config,
            seeds::mix(&[config.seed, stream::SEARCH, i as u64]),
        )?);
    }

    let mut mean_rank = BTreeMap::new();
    let mut series: BTreeMap<String, Vec<Real>> = BTreeMap::new();
    for te in &tasks {
        for m in &te.methods {
            *mean_rank.entry(m.method.clone()).or_insert(0.0) += m.rank;
            series.entry(m.method.clone()).or_default().push(m.auroc);
        }
    }
    for v in mean_rank.values_mut() {
        *v /= tasks.len() as Real;
    }

    let hyper_series = series.get(METHOD_HYPER).cloned().unwrap_or_default();
    let mut wilcoxon_vs_hyper = BTreeMap::new();
    for (method, vals) in &series {
        if method == METHOD_HYPER {
            continue;
        }
        wilcoxon_vs_hyper.insert(method.clone(), wilcoxon_signed_rank(&hyper_series, vals)?);
    }

    Ok(EvalSummary {
        tasks,
        mean_rank,
        wilcoxon_vs_hyper,
    })
}

impl EvalSummary {
    /// Deterministic text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for te in &self.tasks {
            s.push_str(&format!("task {} (grid size {})\n", te.task, te.grid_perfs.len()));
            for m in &te.methods {
                let cfg = m
                    .config
                    .as_ref()
                    .map(|c| c.describe())
                    .unwrap_or_else(|| "-".into());
                s.push_str(&format!(
                    "  {:12} auroc = {:.4} rank = {:.4} config = {}\n",
                    m.method, m.auroc, m.rank, cfg
                ));
            }
        }
        s.push_str("mean normalized rank:\n");
        for (m, r) in &self.mean_rank {
            s.push_str(&format!("  {m:12} {r:.4}\n"));
        }
        s.push_str("wilcoxon (selector vs baseline, two-sided p):\n");
        for (m, p) in &self.wilcoxon_vs_hyper {
            s.push_str(&format!("  {m:12} {p:.4}\n"));
        }
        s
    }
}
