//! Command-line surface: testbed generation, offline meta-training, online
//! selection, evaluation against the reference baselines, and the oracle
//! self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperod::baselines::evaluate_testbed;
use hyperod::data::{load_dataset, write_synth_testbed, LoadedDataset};
use hyperod::error::Error;
use hyperod::meta::{meta_train, HistoricalTask, MetaStore};
use hyperod::runconfig::RunConfig;
use hyperod::search::hyper_select;

#[derive(Parser)]
#[command(
    name = "hyperod",
    about = "Hypernetwork-accelerated hyperparameter selection for autoencoder outlier detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// Path to a key=value run-configuration file (defaults apply otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic testbed as labeled CSV files.
    Synth {
        #[command(flatten)]
        config: ConfigOpts,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        dim_min: Option<usize>,
        #[arg(long)]
        dim_max: Option<usize>,
        #[arg(long)]
        contamination: Option<f64>,
    },
    /// Train the offline artifacts (embeddings, proxy validator) on labeled
    /// datasets and persist them as a store directory.
    MetaTrain {
        #[command(flatten)]
        config: ConfigOpts,
        /// Directory of labeled CSV datasets.
        #[arg(long)]
        data: PathBuf,
        /// Output store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a configuration for an unlabeled dataset and emit its scores.
    Select {
        #[command(flatten)]
        config: ConfigOpts,
        /// Meta-store directory produced by meta-train.
        #[arg(long)]
        store: PathBuf,
        /// Input CSV (a label column, if present, is ignored).
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the selector and reference baselines on labeled datasets.
    Eval {
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long)]
        store: PathBuf,
        /// Directory of labeled CSV datasets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle and invariant self-checks.
    Check,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_labeled_dir(dir: &Path) -> Result<Vec<HistoricalTask>, Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!(
            "no CSV files found in {}",
            dir.display()
        )));
    }
    let mut tasks = Vec::new();
    for path in paths {
        match load_dataset(&path)? {
            (LoadedDataset::Labeled(task), _) => tasks.push(task),
            (LoadedDataset::Unlabeled { name, .. }, _) => {
                return Err(Error::Contract(format!(
                    "dataset {name} has no label column; labeled data required"
                )))
            }
        }
    }
    Ok(tasks)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            config,
            out,
            n_tasks,
            n_samples,
            dim_min,
            dim_max,
            contamination,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(v) = n_tasks {
                cfg.synth.n_tasks = v;
            }
            if let Some(v) = n_samples {
                cfg.synth.n_samples = v;
            }
            if let Some(v) = dim_min {
                cfg.synth.dim_min = v;
            }
            if let Some(v) = dim_max {
                cfg.synth.dim_max = v;
            }
            if let Some(v) = contamination {
                cfg.synth.contamination = v;
            }
            cfg.validate()?;
            let paths = write_synth_testbed(&out, &cfg.synth, cfg.seed)?;
            cfg.save(&out.join("runconfig.txt"))?;
            println!("wrote {} tasks to {}", paths.len(), out.display());
            Ok(())
        }
        Command::MetaTrain { config, data, out } => {
            let cfg = config.resolve()?;
            let tasks = load_labeled_dir(&data)?;
            println!("meta-training on {} tasks", tasks.len());
            let store = meta_train(&tasks, &cfg)?;
            store.save(&out)?;
            cfg.save(&out.join("runconfig.txt"))?;
            println!(
                "store written to {} (global best: {})",
                out.display(),
                store.global_best.describe()
            );
            Ok(())
        }
        Command::Select {
            config,
            store,
            input,
            out,
        } => {
            let cfg = config.resolve()?;
            let store = MetaStore::load(&store)?;
            let (loaded, _) = load_dataset(&input)?;
            let x = loaded.features().clone();
            let outcome = hyper_select(&x, &store, &cfg, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.txt"), outcome.report.render())?;
            std::fs::write(out.join("timings.txt"), outcome.timings.render())?;
            let mut scores = String::from("score\n");
            for s in &outcome.scores {
                scores.push_str(&format!("{s}\n"));
            }
            std::fs::write(out.join("scores.csv"), scores)?;
            cfg.save(&out.join("runconfig.txt"))?;
            println!("selected: {}", outcome.report.selected.describe());
            Ok(())
        }
        Command::Eval {
            config,
            store,
            data,
            out,
        } => {
            let cfg = config.resolve()?;
            let store = MetaStore::load(&store)?;
            let tasks = load_labeled_dir(&data)?;
            let summary = evaluate_testbed(&tasks, &store, &cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("eval.txt"), summary.render())?;
            for te in &summary.tasks {
                if let Some(report) = &te.search_report {
                    std::fs::write(out.join(format!("search_{}.txt", te.task)), report.render())?;
                }
            }
            cfg.save(&out.join("runconfig.txt"))?;
            print!("{}", summary.render());
            Ok(())
        }
        Command::Check => check(),
    }
}

/// Oracle and invariant suite: each line is one check.
fn check() -> Result<(), Error> {
    use hyperod::dod::Mode;
    use hyperod::hypernet::{seeded_hypernet, HnSettings, HpGrid};
    use hyperod::oracle;
    use hyperod::tensor::{finite_diff_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut failures = 0;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failures += 1;
        }
    };

    // Gradients of the generator-through-detector loss vs finite differences.
    {
        let settings = HnSettings {
            hidden: 16,
            d_pe: 4,
            ..HnSettings::default()
        };
        let grid = HpGrid::default();
        let net = seeded_hypernet(4, 5, settings, grid.log_wd_range(), 3)?;
        let lambdas: Vec<_> = grid
            .expand()
            .into_iter()
            .filter(|c| c.n_layers <= 4)
            .take(2)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(0.0..0.1)).collect();
        let x = Tensor::new(vec![6, 5], data)?;
        let err = finite_diff_check(
            &|tape, vars| net.loss_graph(tape, vars, &lambdas, &x, Mode::Eval, 0),
            net.params(),
            1e-6,
        )?;
        report("gradient-check", err < 1e-4, format!("max rel err {err:.2e}"));
    }

    // Masked forward equals the compact network.
    {
        let grid = HpGrid::default();
        let f = 7;
        let settings = HnSettings {
            hidden: 16,
            d_pe: 4,
            ..HnSettings::default()
        };
        let net = seeded_hypernet(grid.max_depth(), f, settings, grid.log_wd_range(), 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..10 * f).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(vec![10, f], data)?;
        let mut worst: f64 = 0.0;
        for cfg in grid.canonical_for(f)? {
            let mw = net.generate(&cfg)?;
            let masked = hyperod::dod::reconstruct(&x, &mw)?;
            let compact = oracle::compact_forward(&x, &oracle::compact_from_masked(&mw)?)?;
            for (a, b) in masked.data().iter().zip(compact.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        report("mask-compact-oracle", worst < 1e-12, format!("max abs diff {worst:.2e}"));
    }

    // Rank-based AUROC equals pair counting.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut all_equal = true;
        for _ in 0..200 {
            let n = rng.random_range(5..50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
                continue;
            }
            let a = hyperod::metrics::auroc(&scores, &labels)?;
            let b = oracle::pair_count_auroc(&scores, &labels)?;
            if a != b {
                all_equal = false;
            }
        }
        report("auroc-oracle", all_equal, "rank-based vs pair counting".into());
    }

    // Wilcoxon equals exhaustive enumeration.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut all_equal = true;
        for _ in 0..50 {
            let n = rng.random_range(3..10);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p1 = hyperod::metrics::wilcoxon_signed_rank(&a, &b)?;
            let p2 = oracle::wilcoxon_exact_enum(&a, &b)?;
            if (p1 - p2).abs() > 0.0 {
                all_equal = false;
            }
        }
        report("wilcoxon-oracle", all_equal, "exact vs enumeration".into());
    }

    // Entropy closed form vs Monte-Carlo.
    {
        let sigma = [0.25, 0.8, 1.5, 0.1];
        let closed = hyperod::search::gaussian_entropy(&sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mc = oracle::mc_gaussian_entropy(&sigma, 100_000, &mut rng);
        let rel = (mc - closed).abs() / closed.abs();
        report("entropy-closed-form", rel < 0.02, format!("closed {closed:.5} mc {mc:.5}"));
    }

    // Signed-hash linearity.
    {
        let hasher = hyperod::meta::FeatureHasher::new(16, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ha = hasher.hash_vector(&a);
        let hb = hasher.hash_vector(&b);
        let hs = hasher.hash_vector(&sum);
        let ok = hs
            .iter()
            .zip(ha.iter().zip(&hb))
            .all(|(s, (x, y))| (s - (x + y)).abs() < 1e-12);
        report("feature-hash-linearity", ok, "hash(a+b) = hash(a)+hash(b)".into());
    }

    if failures > 0 {
        Err(Error::Contract(format!("{failures} self-checks failed")))
    } else {
        println!("all self-checks passed");
        Ok(())
    }
}
