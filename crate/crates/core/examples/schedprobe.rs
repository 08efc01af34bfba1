// temp diagnostic: scheduled training loss drop at default settings
use hyperod::data::synth_testbed;
use hyperod::hypernet::{seeded_hypernet, train_scheduled, Schedule};
use hyperod::runconfig::{RunConfig, SynthSettings};
use hyperod::seeds;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let settings = SynthSettings { n_tasks: 1, n_samples: 300, dim_min: 10, dim_max: 10, contamination: 0.1 };
    let task = synth_testbed(&settings, 77).unwrap().remove(0);
    let f = task.input_dim();
    let canonical = cfg.grid.canonical_for(f).unwrap();
    println!("F={f}, canonical grid size = {}", canonical.len());

    let mut net = seeded_hypernet(cfg.grid.max_depth(), f, cfg.hn.clone(), cfg.grid.log_wd_range(), 5).unwrap();
    let mut rng = seeds::derive_rng(5, &[2, 0]);
    let schedule = Schedule::deep_first(&cfg.grid.n_layers, cfg.hn_epochs).unwrap();
    let t0 = Instant::now();
    let report = train_scheduled(&mut net, &canonical, &task.x, cfg.hn_epochs, &schedule, &mut rng).unwrap();
    println!("trained 400 epochs in {:.1?}", t0.elapsed());
    println!("grid loss: init {:.5} -> final {:.5}  (ratio {:.3})",
        report.initial_grid_loss, report.final_grid_loss,
        report.final_grid_loss / report.initial_grid_loss);
    for d in &report.per_depth {
        println!("depth {}: admitted at {} loss {:.5} -> final {:.5}", d.depth, d.admitted_at, d.loss_at_admission, d.final_loss);
    }
    let n = report.epoch_losses.len();
    println!("epoch losses: first {:.5} mid {:.5} last {:.5}", report.epoch_losses[0], report.epoch_losses[n/2], report.epoch_losses[n-1]);
}
