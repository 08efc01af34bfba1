// temp diagnostic: seed-robustness probe
use hyperod::baselines::evaluate_testbed;
use hyperod::data::synth_testbed;
use hyperod::hypernet::HpGrid;
use hyperod::meta::{fval_holdout_spearman, meta_train};
use hyperod::runconfig::{RunConfig, SynthSettings};
use std::time::Instant;


fn main() {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.grid = HpGrid {
        n_layers: vec![2, 4],
        compression: vec![1.0, 1.4, 1.8, 2.2, 2.6, 3.0],
        dropout: vec![0.0, 0.2],
        weight_decay: vec![0.0, 1e-5],
    };
    cfg.synth = SynthSettings { n_tasks: 16, n_samples: 256, dim_min: 6, dim_max: 12, contamination: 0.10 };
    cfg.search.samples_per_candidate = 128;
    cfg.scratch.epochs = 600;
    cfg.scratch.lr = 5e-3;

    let tasks = synth_testbed(&cfg.synth, cfg.seed).unwrap();
    let (train, test) = tasks.split_at(12);
    println!("dims: {:?}", tasks.iter().map(|t| t.input_dim()).collect::<Vec<_>>());

    let t0 = Instant::now();
    let rho = fval_holdout_spearman(train, &cfg, 0.2).unwrap();
    println!("[criterion7] holdout spearman = {rho:.4} ({:.1?})", t0.elapsed());

    let t1 = Instant::now();
    let store = meta_train(train, &cfg).unwrap();
    println!("meta_train: {:.1?}; global best = {}", t1.elapsed(), store.global_best.describe());

    let t2 = Instant::now();
    let summary = evaluate_testbed(test, &store, &cfg).unwrap();
    println!("evaluate_testbed: {:.1?}", t2.elapsed());
    print!("{}", summary.render());
}
