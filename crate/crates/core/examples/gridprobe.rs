// temp diagnostic: ground-truth grid spread per synthetic task
use hyperod::baselines::{baseline_default, scratch_auroc};
use hyperod::data::synth_testbed;
use hyperod::hypernet::HpGrid;
use hyperod::metrics::rank_within;
use hyperod::runconfig::{RunConfig, SynthSettings};
use rayon::prelude::*;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.seed = 2024;
    cfg.grid = HpGrid {
        n_layers: vec![2, 4],
        compression: vec![1.0, 1.4, 1.8, 2.2, 2.6, 3.0],
        dropout: vec![0.0, 0.2],
        weight_decay: vec![0.0, 1e-5],
    };
    cfg.synth = SynthSettings { n_tasks: 8, n_samples: 256, dim_min: 6, dim_max: 12, contamination: 0.10 };
    cfg.scratch.epochs = 600;
    cfg.scratch.lr = 5e-3;
    let tasks = synth_testbed(&cfg.synth, cfg.seed).unwrap();
    let d = cfg.grid.max_depth();
    let default_cfg = baseline_default(&cfg.grid);
    for (i, task) in tasks.iter().enumerate() {
        let canonical = cfg.grid.canonical_for(task.input_dim()).unwrap();
        let perfs: Vec<f64> = canonical
            .par_iter()
            .map(|c| scratch_auroc(task, c, d, &cfg.scratch, 1000 + i as u64).unwrap())
            .collect();
        let min = perfs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = perfs.iter().cloned().fold(0.0, f64::max);
        let mean = perfs.iter().sum::<f64>() / perfs.len() as f64;
        let didx = canonical.iter().position(|c| {
            c.dedup_key(task.input_dim()).unwrap() == default_cfg.dedup_key(task.input_dim()).unwrap()
        }).unwrap();
        let drank = rank_within(&perfs, perfs[didx]);
        // best config
        let best = perfs.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        println!(
            "task {i}: F={:2} m={} auroc min/mean/max = {:.3}/{:.3}/{:.3}  default rank {:.3}  best={} ({:.3})",
            task.input_dim(), perfs.len(), min, mean, max, drank, canonical[best.0].describe(), best.1
        );
    }
}
