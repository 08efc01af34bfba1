//! Offline meta-training: per-dataset hypernetwork training over the grid,
//! score and performance collection, data/model embeddings, the proxy
//! validator, and the persisted store that the online search loads.

mod embed;
mod gbdt;

pub use embed::{
    normalize_scores, train_feature_extractor, train_score_encoder, EncoderSettings,
    ExtractorSettings, FeatureExtractorH, FeatureHasher, ScoreEncoderG,
};
pub use gbdt::{Gbdt, GbdtSettings};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dod::{self, ScoreSet};
use crate::error::{Error, Result};
use crate::hypernet::{train_scheduled, HpConfig, HpGrid, HyperNet, Schedule};
use crate::metrics::auroc;
use crate::runconfig::RunConfig;
use crate::seeds::{self, stream};
use crate::tensor::{Real, Tensor};

/// Reference width for the complexity tie-break: grid entries are compared
/// by their parameter count at this input dimension, which is wide enough
/// that distinct compression rates stay distinct after rounding.
const COMPLEXITY_REF_DIM: usize = 64;

/// One labeled historical dataset.
#[derive(Clone, Debug)]
pub struct HistoricalTask {
    pub name: String,
    pub x: Tensor,
    /// 1 = outlier.
    pub labels: Vec<u8>,
}

impl HistoricalTask {
    pub fn new(name: String, x: Tensor, labels: Vec<u8>) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "task {name}: {} samples vs {} labels",
                x.rows(),
                labels.len()
            )));
        }
        x.check_finite(&format!("task {name} features"))?;
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Contract(format!("task {name}: labels must be 0/1")));
        }
        let task = HistoricalTask { name, x, labels };
        if !task.has_both_classes() {
            log::warn!("task {} contains a single class", task.name);
        }
        Ok(task)
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        pos > 0 && pos < self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }
}

/// Historical performance matrix: one AUROC per (task, grid entry), grid
/// entries in canonical expansion order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerfMatrix {
    pub task_names: Vec<String>,
    pub values: Vec<Vec<Real>>,
}

impl PerfMatrix {
    pub fn new(task_names: Vec<String>, values: Vec<Vec<Real>>) -> Result<Self> {
        let m = values.first().map_or(0, Vec::len);
        for row in &values {
            if row.len() != m {
                return Err(Error::Contract("ragged performance matrix".into()));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Contract("performance outside [0,1]".into()));
            }
        }
        if task_names.len() != values.len() {
            return Err(Error::Contract("task names misaligned with rows".into()));
        }
        Ok(PerfMatrix { task_names, values })
    }

    pub fn n_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn n_configs(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn column_means(&self) -> Vec<Real> {
        let m = self.n_configs();
        let mut means = vec![0.0; m];
        for row in &self.values {
            for (acc, v) in means.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        for v in means.iter_mut() {
            *v /= self.n_tasks().max(1) as Real;
        }
        means
    }
}

/// Per-task collection result: deduplicated configurations, their score sets
/// and performances, and the map from expanded grid columns to canonical
/// entries.
#[derive(Clone, Debug)]
pub struct TaskScores {
    pub task_name: String,
    pub canonical: Vec<HpConfig>,
    pub sets: Vec<ScoreSet>,
    pub perf: Vec<Real>,
    /// Expanded grid index → canonical index.
    pub col_map: Vec<usize>,
}

/// Trains one hypernetwork per task with the depth schedule and collects
/// outlier scores plus AUROC for every grid configuration. Duplicate
/// configurations (identical widths and regularization at the task's width)
/// are evaluated once through their canonical representative.
pub fn collect_scores_and_perf(
    tasks: &[HistoricalTask],
    config: &RunConfig,
) -> Result<(Vec<TaskScores>, PerfMatrix)> {
    if tasks.is_empty() {
        return Err(Error::Contract("no tasks to collect".into()));
    }
    let expanded = config.grid.expand();
    let per_task: Vec<TaskScores> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| collect_for_task(i, task, &expanded, config))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(per_task.len());
    for ts in &per_task {
        let row: Vec<Real> = ts.col_map.iter().map(|&c| ts.perf[c]).collect();
        rows.push(row);
    }
    let perf = PerfMatrix::new(per_task.iter().map(|t| t.task_name.clone()).collect(), rows)?;
    Ok((per_task, perf))
}

fn collect_for_task(
    index: usize,
    task: &HistoricalTask,
    expanded: &[HpConfig],
    config: &RunConfig,
) -> Result<TaskScores> {
    if !task.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let f = task.input_dim();
    let d = config.grid.max_depth();

    // Canonicalization at this task's width.
    let mut canonical: Vec<HpConfig> = Vec::new();
    let mut col_map = Vec::with_capacity(expanded.len());
    let mut seen = std::collections::HashMap::new();
    for cfg in expanded {
        let key = cfg.dedup_key(f)?;
        let idx = *seen.entry(key).or_insert_with(|| {
            canonical.push(cfg.clone());
            canonical.len() - 1
        });
        col_map.push(idx);
    }

    let mut rng = seeds::derive_rng(config.seed, &[stream::META_HN, index as u64]);
    let mut net = HyperNet::new(
        d,
        f,
        config.hn.clone(),
        config.grid.log_wd_range(),
        &mut rng,
    )?;
    let schedule = Schedule::deep_first(&config.grid.n_layers, config.hn_epochs)?;
    train_scheduled(&mut net, &canonical, &task.x, config.hn_epochs, &schedule, &mut rng)?;

    let mut sets = Vec::with_capacity(canonical.len());
    let mut perf = Vec::with_capacity(canonical.len());
    for (ci, cfg) in canonical.iter().enumerate() {
        let mw = net.generate(cfg)?;
        let scores = dod::outlier_scores(&task.x, &mw)?;
        let p = auroc(&scores, &task.labels)?;
        sets.push(ScoreSet::new(
            task.name.clone(),
            format!("cfg{ci}"),
            scores,
        )?);
        perf.push(p);
    }

    Ok(TaskScores {
        task_name: task.name.clone(),
        canonical,
        sets,
        perf,
        col_map,
    })
}

/// Input layout of the proxy validator, versioned so stored models reject
/// mismatched feature assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub lambda_dims: usize,
    pub data_dims: usize,
    pub model_dims: usize,
    pub descriptor: String,
}

impl FeatureLayout {
    pub fn new(data_dims: usize, model_dims: usize) -> Self {
        FeatureLayout {
            lambda_dims: 5,
            data_dims,
            model_dims,
            descriptor: format!("lambda5+data{data_dims}+model{model_dims}/v1"),
        }
    }

    pub fn total(&self) -> usize {
        self.lambda_dims + self.data_dims + self.model_dims
    }
}

/// Assembles the validator input: `[L, c, dropout, log wd, mean width / F]`
/// followed by the data embedding and the model embedding.
pub fn assemble_features(
    cfg: &HpConfig,
    input_dim: usize,
    data_emb: &[Real],
    model_emb: &[Real],
    layout: &FeatureLayout,
) -> Result<Vec<Real>> {
    if data_emb.len() != layout.data_dims || model_emb.len() != layout.model_dims {
        return Err(Error::Version(format!(
            "embedding dims ({}, {}) do not match layout {}",
            data_emb.len(),
            model_emb.len(),
            layout.descriptor
        )));
    }
    let widths = cfg.widths(input_dim)?;
    let mean_width = widths.iter().sum::<usize>() as Real / widths.len() as Real;
    let mut features = Vec::with_capacity(layout.total());
    features.push(cfg.n_layers as Real);
    features.push(cfg.compression);
    features.push(cfg.dropout);
    features.push(cfg.log_wd());
    features.push(mean_width / input_dim as Real);
    features.extend_from_slice(data_emb);
    features.extend_from_slice(model_emb);
    Ok(features)
}

/// Meta-learned regressor predicting detection performance; predictions are
/// clipped to [0,1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProxyValidator {
    pub layout: FeatureLayout,
    model: Gbdt,
}

impl ProxyValidator {
    pub fn predict(&self, features: &[Real]) -> Result<Real> {
        if features.len() != self.layout.total() {
            return Err(Error::Version(format!(
                "feature vector of length {} does not match layout {}",
                features.len(),
                self.layout.descriptor
            )));
        }
        Ok(self.model.predict(features).clamp(0.0, 1.0))
    }

    pub fn n_trees(&self) -> usize {
        self.model.n_trees()
    }
}

/// Fits the boosted-tree validator on assembled rows.
pub fn train_fval<R: rand::Rng>(
    features: &[Vec<Real>],
    targets: &[Real],
    layout: FeatureLayout,
    settings: &GbdtSettings,
    rng: &mut R,
) -> Result<ProxyValidator> {
    if features.len() < 100 {
        return Err(Error::Contract(format!(
            "validator training needs at least 100 pairs, got {}",
            features.len()
        )));
    }
    let model = Gbdt::fit(features, targets, settings, rng)?;
    Ok(ProxyValidator { layout, model })
}

/// Configuration with the best mean historical performance; exact ties fall
/// to the lowest-complexity entry.
pub fn global_best(perf: &PerfMatrix, grid: &HpGrid) -> Result<HpConfig> {
    let expanded = grid.expand();
    if expanded.len() != perf.n_configs() {
        return Err(Error::Contract(format!(
            "grid has {} entries but the matrix has {} columns",
            expanded.len(),
            perf.n_configs()
        )));
    }
    let means = perf.column_means();
    let mut best: Option<(Real, usize, usize)> = None; // (mean, complexity, index)
    for (j, cfg) in expanded.iter().enumerate() {
        let complexity = cfg.effective_params(COMPLEXITY_REF_DIM)?;
        let better = match best {
            None => true,
            Some((bm, bc, _)) => means[j] > bm || (means[j] == bm && complexity < bc),
        };
        if better {
            best = Some((means[j], complexity, j));
        }
    }
    let (_, _, j) = best.expect("nonempty grid");
    Ok(expanded[j].clone())
}

pub const STORE_VERSION: u32 = 1;

/// Persisted offline artifacts.
#[derive(Clone, Debug)]
pub struct MetaStore {
    pub version: u32,
    pub seed: u64,
    pub grid: HpGrid,
    pub extractor: FeatureExtractorH,
    pub score_encoder: ScoreEncoderG,
    pub validator: ProxyValidator,
    pub perf: PerfMatrix,
    pub global_best: HpConfig,
    pub sigma_init: [Real; 4],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    grid_digest: u64,
}

#[derive(Serialize, Deserialize)]
struct GlobalBestRecord {
    config: HpConfig,
    sigma_init: [Real; 4],
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)?;
    std::fs::write(dir.join(name), json)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let json = std::fs::read_to_string(dir.join(name))?;
    Ok(serde_json::from_str(&json)?)
}

impl MetaStore {
    /// Writes the store as a directory: a manifest plus one record per
    /// component.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: self.version,
            seed: self.seed,
            grid_digest: self.grid.digest(),
        };
        write_json(dir, "manifest.json", &manifest)?;
        write_json(dir, "grid.json", &self.grid)?;
        write_json(dir, "extractor.json", &self.extractor)?;
        write_json(dir, "score_encoder.json", &self.score_encoder)?;
        write_json(dir, "fval.json", &self.validator)?;
        write_json(dir, "perf.json", &self.perf)?;
        write_json(
            dir,
            "global_best.json",
            &GlobalBestRecord {
                config: self.global_best.clone(),
                sigma_init: self.sigma_init,
            },
        )?;
        Ok(())
    }

    /// Loads a store directory, verifying version and grid digest.
    pub fn load(dir: &Path) -> Result<MetaStore> {
        let manifest: Manifest = read_json(dir, "manifest.json")?;
        if manifest.version != STORE_VERSION {
            return Err(Error::Version(format!(
                "store version {} != {STORE_VERSION}",
                manifest.version
            )));
        }
        let grid: HpGrid = read_json(dir, "grid.json")?;
        if grid.digest() != manifest.grid_digest {
            return Err(Error::Version(
                "grid digest does not match the manifest".into(),
            ));
        }
        let extractor: FeatureExtractorH = read_json(dir, "extractor.json")?;
        let score_encoder: ScoreEncoderG = read_json(dir, "score_encoder.json")?;
        let validator: ProxyValidator = read_json(dir, "fval.json")?;
        let expected = FeatureLayout::new(extractor.embed_dim(), score_encoder.embed_dim());
        if validator.layout != expected {
            return Err(Error::Version(format!(
                "validator layout {} does not match embeddings {}",
                validator.layout.descriptor, expected.descriptor
            )));
        }
        let perf: PerfMatrix = read_json(dir, "perf.json")?;
        let gb: GlobalBestRecord = read_json(dir, "global_best.json")?;
        Ok(MetaStore {
            version: manifest.version,
            seed: manifest.seed,
            grid,
            extractor,
            score_encoder,
            validator,
            perf,
            global_best: gb.config,
            sigma_init: gb.sigma_init,
        })
    }
}

/// Assembled validator training rows for a collection result.
pub fn build_fval_rows(
    tasks: &[HistoricalTask],
    collected: &[TaskScores],
    perf: &PerfMatrix,
    extractor: &FeatureExtractorH,
    encoder: &ScoreEncoderG,
    grid: &HpGrid,
) -> Result<(Vec<Vec<Real>>, Vec<Real>, FeatureLayout)> {
    let layout = FeatureLayout::new(extractor.embed_dim(), encoder.embed_dim());
    let expanded = grid.expand();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let data_emb = extractor.data_embedding(&task.x)?;
        let model_embs: Vec<Vec<Real>> = collected[i]
            .sets
            .iter()
            .map(|s| encoder.model_embedding(&s.scores))
            .collect::<Result<Vec<_>>>()?;
        for (j, cfg) in expanded.iter().enumerate() {
            let ci = collected[i].col_map[j];
            let row = assemble_features(cfg, task.input_dim(), &data_emb, &model_embs[ci], &layout)?;
            features.push(row);
            targets.push(perf.values[i][j]);
        }
    }
    Ok((features, targets, layout))
}

/// Measures validator quality: collects the testbed once, holds out a
/// fraction of the (task, configuration) pairs, trains the validator on the
/// rest, and returns the Spearman correlation between its predictions and
/// the true AUROC on the held-out pairs.
pub fn fval_holdout_spearman(
    tasks: &[HistoricalTask],
    config: &RunConfig,
    holdout_fraction: Real,
) -> Result<Real> {
    use rand::seq::SliceRandom;

    let (collected, perf) = collect_scores_and_perf(tasks, config)?;
    let hash_seed = seeds::mix(&[config.seed, stream::META_EXTRACTOR]);
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_EXTRACTOR]);
    let extractor = train_feature_extractor(tasks, &config.extractor, hash_seed, &mut rng)?;

    let mut sets: Vec<Vec<Real>> = Vec::new();
    let mut set_targets: Vec<Real> = Vec::new();
    for ts in &collected {
        for (s, &p) in ts.sets.iter().zip(&ts.perf) {
            sets.push(s.scores.clone());
            set_targets.push(p);
        }
    }
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_SCORE_ENCODER]);
    let encoder = train_score_encoder(&sets, &set_targets, &config.encoder, &mut rng)?;

    let (features, targets, layout) =
        build_fval_rows(tasks, &collected, &perf, &extractor, &encoder, &config.grid)?;

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_FVAL, 1]);
    order.shuffle(&mut rng);
    let n_holdout = ((features.len() as Real * holdout_fraction) as usize).max(1);
    let (held, train) = order.split_at(n_holdout);

    let train_features: Vec<Vec<Real>> = train.iter().map(|&i| features[i].clone()).collect();
    let train_targets: Vec<Real> = train.iter().map(|&i| targets[i]).collect();
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_FVAL]);
    let validator = train_fval(&train_features, &train_targets, layout, &config.gbdt, &mut rng)?;

    let mut preds = Vec::with_capacity(held.len());
    let mut truth = Vec::with_capacity(held.len());
    for &i in held {
        preds.push(validator.predict(&features[i])?);
        truth.push(targets[i]);
    }
    crate::metrics::spearman(&preds, &truth)
}

/// The full offline phase: collection, embeddings, proxy validator, global
/// best. Deterministic given the configuration seed.
pub fn meta_train(tasks: &[HistoricalTask], config: &RunConfig) -> Result<MetaStore> {
    config.validate()?;
    let usable: Vec<HistoricalTask> = tasks
        .iter()
        .filter(|t| {
            if !t.has_both_classes() {
                log::warn!("task {} skipped: single class", t.name);
                return false;
            }
            true
        })
        .cloned()
        .collect();
    if usable.len() < 2 {
        return Err(Error::Contract(
            "meta-training needs at least two labeled two-class tasks".into(),
        ));
    }

    let (collected, perf) = collect_scores_and_perf(&usable, config)?;

    let hash_seed = seeds::mix(&[config.seed, stream::META_EXTRACTOR]);
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_EXTRACTOR]);
    let extractor = train_feature_extractor(&usable, &config.extractor, hash_seed, &mut rng)?;

    let mut sets: Vec<Vec<Real>> = Vec::new();
    let mut set_targets: Vec<Real> = Vec::new();
    for ts in &collected {
        for (s, &p) in ts.sets.iter().zip(&ts.perf) {
            sets.push(s.scores.clone());
            set_targets.push(p);
        }
    }
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_SCORE_ENCODER]);
    let score_encoder = train_score_encoder(&sets, &set_targets, &config.encoder, &mut rng)?;

    let (features, targets, layout) =
        build_fval_rows(&usable, &collected, &perf, &extractor, &score_encoder, &config.grid)?;
    let mut rng = seeds::derive_rng(config.seed, &[stream::META_FVAL]);
    let validator = train_fval(&features, &targets, layout, &config.gbdt, &mut rng)?;

    let best = global_best(&perf, &config.grid)?;

    Ok(MetaStore {
        version: STORE_VERSION,
        seed: config.seed,
        grid: config.grid.clone(),
        extractor,
        score_encoder,
        validator,
        perf,
        global_best: best,
        sigma_init: config.search.sigma.middle(),
    })
}
