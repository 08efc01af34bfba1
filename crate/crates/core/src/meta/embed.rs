//! Dataset and score-set embeddings.
//!
//! Datasets of arbitrary width are projected into a fixed k-dimensional space
//! by signed feature hashing; a cross-dataset extractor network maps hashed
//! samples to outlier logits and its 64-unit layer, max-pooled over samples,
//! is the dataset embedding. Score sets are embedded by a permutation-
//! invariant encoder (per-score net, mean pooling) trained to predict
//! detection performance from the score distribution.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::meta::HistoricalTask;
use crate::seeds;
use crate::tensor::{Adam, Real, Tape, Tensor, Var};

/// Signed feature hashing: bucket and sign are stable functions of the
/// feature index and the hasher seed, so the map is linear in the input.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FeatureHasher {
    pub k: usize,
    pub seed: u64,
}

const BUCKET_SALT: u64 = 0x7ea7_5eed;
const SIGN_SALT: u64 = 0x5197_ca5e;

impl FeatureHasher {
    pub fn new(k: usize, seed: u64) -> Self {
        FeatureHasher { k, seed }
    }

    pub fn bucket_sign(&self, feature: usize) -> (usize, Real) {
        let bucket =
            (seeds::mix(&[self.seed, feature as u64, BUCKET_SALT]) % self.k as u64) as usize;
        let sign = if seeds::mix(&[self.seed, feature as u64, SIGN_SALT]) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        (bucket, sign)
    }

    pub fn hash_vector(&self, x: &[Real]) -> Vec<Real> {
        let mut out = vec![0.0; self.k];
        for (f, &v) in x.iter().enumerate() {
            let (bucket, sign) = self.bucket_sign(f);
            out[bucket] += sign * v;
        }
        out
    }

    /// Hashes every row of an n×F matrix into n×k.
    pub fn hash_matrix(&self, x: &Tensor) -> Tensor {
        let (n, f) = (x.rows(), x.cols());
        let pairs: Vec<(usize, Real)> = (0..f).map(|j| self.bucket_sign(j)).collect();
        let mut data = vec![0.0; n * self.k];
        for i in 0..n {
            let row = &x.data()[i * f..(i + 1) * f];
            let out = &mut data[i * self.k..(i + 1) * self.k];
            for (j, &v) in row.iter().enumerate() {
                let (bucket, sign) = pairs[j];
                out[bucket] += sign * v;
            }
        }
        Tensor::new(vec![n, self.k], data).expect("hash shape")
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (rows + cols) as Real).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0) * s)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorSettings {
    pub k: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        ExtractorSettings {
            k: 256,
            hidden: 128,
            embed_dim: 64,
            epochs: 30,
            batch: 128,
            lr: 1e-3,
        }
    }
}

/// Cross-dataset feature extractor h: hashed sample → outlier logit.
/// The 64-unit layer is the embedding tap.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FeatureExtractorH {
    pub hasher: FeatureHasher,
    pub settings: ExtractorSettings,
    params: Vec<Tensor>, // w1[h,k] b1 w2[e,h] b2 w3[1,e] b3
}

impl FeatureExtractorH {
    pub fn embed_dim(&self) -> usize {
        self.settings.embed_dim
    }

    /// Tap-layer activations for hashed rows: n×embed_dim.
    fn tap(&self, hashed: &Tensor) -> Tensor {
        let (n, k) = (hashed.rows(), hashed.cols());
        let [w1, b1, w2, b2, ..] = &self.params[..] else {
            unreachable!("extractor parameter list");
        };
        let h = self.settings.hidden;
        let mut z1 = crate::tensor::matmul_tb(hashed.data(), w1.data(), n, k, h);
        crate::tensor::add_bias_in_place(&mut z1, b1.data());
        for v in z1.iter_mut() {
            *v = v.max(0.0);
        }
        let e = self.settings.embed_dim;
        let mut z2 = crate::tensor::matmul_tb(&z1, w2.data(), n, h, e);
        crate::tensor::add_bias_in_place(&mut z2, b2.data());
        for v in z2.iter_mut() {
            *v = v.max(0.0);
        }
        Tensor::new(vec![n, e], z2).expect("tap shape")
    }

    /// Outlier probability per hashed row (used by the training-accuracy
    /// checks).
    pub fn predict_proba(&self, hashed: &Tensor) -> Vec<Real> {
        let tap = self.tap(hashed);
        let (n, e) = (tap.rows(), tap.cols());
        let [.., w3, b3] = &self.params[..] else {
            unreachable!("extractor parameter list");
        };
        let mut z = crate::tensor::matmul_tb(tap.data(), w3.data(), n, e, 1);
        crate::tensor::add_bias_in_place(&mut z, b3.data());
        z.iter().map(|&v| crate::tensor::sigmoid(v)).collect()
    }

    /// Max-pooled tap activations of the hashed samples: the data embedding.
    pub fn data_embedding(&self, x: &Tensor) -> Result<Vec<Real>> {
        if x.rows() == 0 {
            return Err(Error::Contract("data_embedding: empty dataset".into()));
        }
        let hashed = self.hasher.hash_matrix(x);
        let tap = self.tap(&hashed);
        let e = tap.cols();
        let mut out = vec![Real::NEG_INFINITY; e];
        for row in tap.data().chunks(e) {
            for (acc, v) in out.iter_mut().zip(row) {
                *acc = acc.max(*v);
            }
        }
        Ok(out)
    }
}

/// Trains the extractor on all labeled tasks with per-sample binary
/// cross-entropy, weighting classes by inverse frequency. Tasks with a single
/// class are excluded with a warning.
pub fn train_feature_extractor<R: Rng>(
    tasks: &[HistoricalTask],
    settings: &ExtractorSettings,
    hash_seed: u64,
    rng: &mut R,
) -> Result<FeatureExtractorH> {
    let usable: Vec<&HistoricalTask> = tasks
        .iter()
        .filter(|t| {
            let pos = t.labels.iter().filter(|&&y| y == 1).count();
            let single = pos == 0 || pos == t.labels.len();
            if single {
                log::warn!("task {} has a single class; excluded from extractor training", t.name);
            }
            !single
        })
        .collect();
    if usable.len() < 2 {
        return Err(Error::Contract(
            "extractor training needs at least two two-class tasks".into(),
        ));
    }

    let hasher = FeatureHasher::new(settings.k, hash_seed);
    let mut rows: Vec<Vec<Real>> = Vec::new();
    let mut labels: Vec<Real> = Vec::new();
    for task in &usable {
        let hashed = hasher.hash_matrix(&task.x);
        for (i, &y) in task.labels.iter().enumerate() {
            rows.push(hashed.data()[i * settings.k..(i + 1) * settings.k].to_vec());
            labels.push(y as Real);
        }
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n = labels.len();
    let w_pos = n as Real / (2.0 * n_pos as Real);
    let w_neg = n as Real / (2.0 * (n - n_pos) as Real);
    let weights: Vec<Real> = labels
        .iter()
        .map(|&y| if y == 1.0 { w_pos } else { w_neg })
        .collect();

    let (k, h, e) = (settings.k, settings.hidden, settings.embed_dim);
    let mut params = vec![
        glorot(h, k, rng),
        Tensor::zeros(&[h]),
        glorot(e, h, rng),
        Tensor::zeros(&[e]),
        glorot(1, e, rng),
        Tensor::zeros(&[1]),
    ];
    let mut opt = Adam::new(settings.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(settings.batch) {
            let b = chunk.len();
            let mut xdata = Vec::with_capacity(b * k);
            let mut ydata = Vec::with_capacity(b);
            let mut wdata = Vec::with_capacity(b);
            for &i in chunk {
                xdata.extend_from_slice(&rows[i]);
                ydata.push(labels[i]);
                wdata.push(weights[i]);
            }
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
            let x = tape.constant(Tensor::new(vec![b, k], xdata)?);
            let z1 = tape.matmul_tb(x, vars[0])?;
            let z1 = tape.add_bias(z1, vars[1])?;
            let h1 = tape.relu(z1);
            let z2 = tape.matmul_tb(h1, vars[2])?;
            let z2 = tape.add_bias(z2, vars[3])?;
            let h2 = tape.relu(z2);
            let z3 = tape.matmul_tb(h2, vars[4])?;
            let logits = tape.add_bias(z3, vars[5])?;
            let loss = tape.bce_with_logits(
                logits,
                Tensor::new(vec![b, 1], ydata)?,
                Tensor::new(vec![b, 1], wdata)?,
            )?;
            let grads = tape.backward(loss)?;
            let gvec: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect();
            opt.step(&mut params, &gvec);
        }
    }

    Ok(FeatureExtractorH {
        hasher,
        settings: settings.clone(),
        params,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderSettings {
    pub phi_dim: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_sets: usize,
    pub lr: Real,
    pub max_scores: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            phi_dim: 32,
            head_hidden: 16,
            epochs: 60,
            batch_sets: 32,
            lr: 1e-3,
            max_scores: 1024,
        }
    }
}

/// Permutation-invariant score-set encoder g: per-score net (1→32→32),
/// mean pooling (the embedding tap), and a small regression head.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ScoreEncoderG {
    pub settings: EncoderSettings,
    params: Vec<Tensor>, // w1[32,1] b1 w2[32,32] b2 | w3[16,32] b3 w4[1,16] b4
}

/// Sorts a score set, z-normalizes it (unit denominator for constant sets),
/// and quantile-subsamples to at most `max_scores` entries. Sorting first
/// makes the whole transform a bit-exact function of the multiset, so any
/// permutation of the input yields the identical output.
pub fn normalize_scores(scores: &[Real], max_scores: usize) -> Vec<Real> {
    let n = scores.len();
    let mut z: Vec<Real> = scores.to_vec();
    z.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mean = z.iter().sum::<Real>() / n.max(1) as Real;
    let var = z.iter().map(|s| (s - mean) * (s - mean)).sum::<Real>() / n.max(1) as Real;
    let std = var.sqrt();
    let denom = if std > 1e-12 { std } else { 1.0 };
    for v in z.iter_mut() {
        *v = (*v - mean) / denom;
    }
    if n <= max_scores {
        return z;
    }
    (0..max_scores).map(|i| z[i * n / max_scores]).collect()
}

impl ScoreEncoderG {
    pub fn embed_dim(&self) -> usize {
        self.settings.phi_dim
    }

    /// Pooled per-score representations of a normalized set.
    fn pool(&self, normalized: &[Real]) -> Result<Vec<Real>> {
        if normalized.is_empty() {
            return Err(Error::Contract("model_embedding: empty score set".into()));
        }
        let n = normalized.len();
        let d = self.settings.phi_dim;
        let [w1, b1, w2, b2, ..] = &self.params[..] else {
            unreachable!("encoder parameter list");
        };
        let mut z1 = crate::tensor::matmul_tb(normalized, w1.data(), n, 1, d);
        crate::tensor::add_bias_in_place(&mut z1, b1.data());
        for v in z1.iter_mut() {
            *v = v.max(0.0);
        }
        let mut z2 = crate::tensor::matmul_tb(&z1, w2.data(), n, d, d);
        crate::tensor::add_bias_in_place(&mut z2, b2.data());
        for v in z2.iter_mut() {
            *v = v.max(0.0);
        }
        let mut pooled = vec![0.0; d];
        for row in z2.chunks(d) {
            for (acc, v) in pooled.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        for v in pooled.iter_mut() {
            *v /= n as Real;
        }
        Ok(pooled)
    }

    /// Model embedding: pooled encoder output on the normalized, subsampled
    /// score set.
    pub fn model_embedding(&self, raw_scores: &[Real]) -> Result<Vec<Real>> {
        if raw_scores.is_empty() {
            return Err(Error::Contract("model_embedding: empty score set".into()));
        }
        let normalized = normalize_scores(raw_scores, self.settings.max_scores);
        self.pool(&normalized)
    }

    /// Head prediction from a raw score set (used during training checks).
    pub fn predict_perf(&self, raw_scores: &[Real]) -> Result<Real> {
        let pooled = self.pool(&normalize_scores(raw_scores, self.settings.max_scores))?;
        let [.., w3, b3, w4, b4] = &self.params[..] else {
            unreachable!("encoder parameter list");
        };
        let hh = self.settings.head_hidden;
        let mut z3 = crate::tensor::matmul_tb(&pooled, w3.data(), 1, self.settings.phi_dim, hh);
        crate::tensor::add_bias_in_place(&mut z3, b3.data());
        for v in z3.iter_mut() {
            *v = v.max(0.0);
        }
        let mut z4 = crate::tensor::matmul_tb(&z3, w4.data(), 1, hh, 1);
        crate::tensor::add_bias_in_place(&mut z4, b4.data());
        Ok(z4[0])
    }

    /// Mean squared error of the head over (score set, performance) pairs.
    pub fn mse(&self, sets: &[Vec<Real>], targets: &[Real]) -> Result<Real> {
        let mut total = 0.0;
        for (s, &t) in sets.iter().zip(targets) {
            let p = self.predict_perf(s)?;
            total += (p - t) * (p - t);
        }
        Ok(total / sets.len().max(1) as Real)
    }
}

/// Trains g with squared error against the observed performances.
pub fn train_score_encoder<R: Rng>(
    score_sets: &[Vec<Real>],
    targets: &[Real],
    settings: &EncoderSettings,
    rng: &mut R,
) -> Result<ScoreEncoderG> {
    if score_sets.len() != targets.len() || score_sets.is_empty() {
        return Err(Error::Contract(
            "score encoder needs matching, nonempty sets and targets".into(),
        ));
    }
    let normalized: Vec<Vec<Real>> = score_sets
        .iter()
        .map(|s| normalize_scores(s, settings.max_scores))
        .collect();

    let d = settings.phi_dim;
    let hh = settings.head_hidden;
    let mut params = vec![
        glorot(d, 1, rng),
        Tensor::zeros(&[d]),
        glorot(d, d, rng),
        Tensor::zeros(&[d]),
        glorot(hh, d, rng),
        Tensor::zeros(&[hh]),
        glorot(1, hh, rng),
        Tensor::zeros(&[1]),
    ];
    let mut opt = Adam::new(settings.lr);
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(settings.batch_sets) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
            let mut total: Option<Var> = None;
            for &si in chunk {
                let set = &normalized[si];
                let n = set.len();
                let x = tape.constant(Tensor::new(vec![n, 1], set.clone())?);
                let z1 = tape.matmul_tb(x, vars[0])?;
                let z1 = tape.add_bias(z1, vars[1])?;
                let h1 = tape.relu(z1);
                let z2 = tape.matmul_tb(h1, vars[2])?;
                let z2 = tape.add_bias(z2, vars[3])?;
                let h2 = tape.relu(z2);
                let pooled = tape.mean_rows(h2)?;
                let z3 = tape.matmul_tb(pooled, vars[4])?;
                let z3 = tape.add_bias(z3, vars[5])?;
                let h3 = tape.relu(z3);
                let z4 = tape.matmul_tb(h3, vars[6])?;
                let pred = tape.add_bias(z4, vars[7])?;
                let target = tape.constant(Tensor::new(vec![1, 1], vec![targets[si]])?);
                let diff = tape.sub(pred, target)?;
                let sq = tape.hadamard(diff, diff)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, sq)?,
                    None => sq,
                });
            }
            let total = total.expect("nonempty chunk");
            let loss = tape.scale(total, 1.0 / chunk.len() as Real);
            let loss = tape.mean(loss); // [1,1] → scalar
            let grads = tape.backward(loss)?;
            let gvec: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect();
            opt.step(&mut params, &gvec);
        }
    }

    Ok(ScoreEncoderG {
        settings: settings.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hashing_is_linear() {
        let hasher = FeatureHasher::new(8, 7);
        let a = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let b = [0.25, 1.0, -1.0, 2.0, 4.0, -0.5];
        let ha = hasher.hash_vector(&a);
        let hb = hasher.hash_vector(&b);
        let sum: Vec<Real> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let hsum = hasher.hash_vector(&sum);
        for i in 0..8 {
            assert!((hsum[i] - (ha[i] + hb[i])).abs() < 1e-12);
        }
        let zeros = hasher.hash_vector(&[0.0; 6]);
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hashing_matches_independent_reimplementation() {
        // Re-derive bucket and sign with a separately written splitmix chain.
        fn mix_oracle(words: &[u64]) -> u64 {
            let mut state: u64 = 0x6a09_e667_f3bc_c909;
            for &w in words {
                state ^= w;
                state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                state = z ^ (z >> 31);
            }
            state
        }
        let (k, seed) = (4usize, 99u64);
        let hasher = FeatureHasher::new(k, seed);
        let x = [0.5, -1.5, 2.0];
        let got = hasher.hash_vector(&x);
        let mut expect = vec![0.0; k];
        for (f, &v) in x.iter().enumerate() {
            let bucket = (mix_oracle(&[seed, f as u64, BUCKET_SALT]) % k as u64) as usize;
            let sign = if mix_oracle(&[seed, f as u64, SIGN_SALT]) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            expect[bucket] += sign * v;
        }
        assert_eq!(got, expect);
    }

    fn separable_task(name: &str, n: usize, f: usize, seed: u64) -> HistoricalTask {
        // Inliers near 0, outliers near 1: linearly separable after hashing.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * f);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let outlier = i % 5 == 0;
            labels.push(outlier as u8);
            for _ in 0..f {
                let base = if outlier { 0.9 } else { 0.1 };
                data.push(base + rng.random_range(-0.05..0.05));
            }
        }
        HistoricalTask::new(name.to_string(), Tensor::new(vec![n, f], data).unwrap(), labels)
            .unwrap()
    }

    #[test]
    fn extractor_learns_separable_tasks() {
        let tasks = vec![
            separable_task("a", 100, 6, 1),
            separable_task("b", 100, 9, 2),
        ];
        let settings = ExtractorSettings {
            k: 32,
            hidden: 32,
            embed_dim: 16,
            epochs: 20,
            ..ExtractorSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = train_feature_extractor(&tasks, &settings, 11, &mut rng).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for t in &tasks {
            let hashed = h.hasher.hash_matrix(&t.x);
            let proba = h.predict_proba(&hashed);
            for (p, &y) in proba.iter().zip(&t.labels) {
                let pred = (*p > 0.5) as u8;
                correct += (pred == y) as usize;
                total += 1;
            }
        }
        let acc = correct as Real / total as Real;
        assert!(acc > 0.9, "training accuracy {acc}");
    }

    #[test]
    fn extractor_is_deterministic_and_fixed_width() {
        let tasks = vec![
            separable_task("a", 60, 5, 1),
            separable_task("b", 60, 12, 2),
        ];
        let settings = ExtractorSettings {
            k: 32,
            hidden: 16,
            embed_dim: 16,
            epochs: 3,
            ..ExtractorSettings::default()
        };
        let h1 = train_feature_extractor(&tasks, &settings, 5, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let h2 = train_feature_extractor(&tasks, &settings, 5, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(h1.params[0].data(), h2.params[0].data());
        // Same embedding width regardless of the dataset width.
        assert_eq!(h1.data_embedding(&tasks[0].x).unwrap().len(), 16);
        assert_eq!(h1.data_embedding(&tasks[1].x).unwrap().len(), 16);
    }

    #[test]
    fn single_class_task_excluded() {
        let good_a = separable_task("a", 60, 5, 1);
        let good_b = separable_task("b", 60, 5, 2);
        let bad = HistoricalTask {
            name: "bad".into(),
            x: Tensor::zeros(&[10, 5]),
            labels: vec![0; 10],
        };
        let settings = ExtractorSettings {
            k: 16,
            hidden: 8,
            embed_dim: 8,
            epochs: 1,
            ..ExtractorSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Excluded silently (warning logged); training proceeds on the rest.
        assert!(train_feature_extractor(&[good_a, good_b, bad], &settings, 5, &mut rng).is_ok());
    }

    #[test]
    fn data_embedding_invariances() {
        let task = separable_task("a", 40, 7, 9);
        let settings = ExtractorSettings {
            k: 16,
            hidden: 8,
            embed_dim: 8,
            epochs: 2,
            ..ExtractorSettings::default()
        };
        let other = separable_task("b", 40, 7, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h =
            train_feature_extractor(&[task.clone(), other], &settings, 5, &mut rng).unwrap();

        let base = h.data_embedding(&task.x).unwrap();

        // Duplicating every row leaves the max-pool unchanged.
        let mut doubled = task.x.data().to_vec();
        doubled.extend_from_slice(task.x.data());
        let doubled = Tensor::new(vec![80, 7], doubled).unwrap();
        assert_eq!(h.data_embedding(&doubled).unwrap(), base);

        // Permuting rows leaves it unchanged.
        let n = task.x.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted: Vec<Real> = perm
            .iter()
            .flat_map(|&i| task.x.data()[i * 7..(i + 1) * 7].to_vec())
            .collect();
        let permuted = Tensor::new(vec![n, 7], permuted).unwrap();
        assert_eq!(h.data_embedding(&permuted).unwrap(), base);

        // Adding a row can only raise or keep each coordinate.
        let mut extended = task.x.data().to_vec();
        extended.extend_from_slice(&[0.5; 7]);
        let extended = Tensor::new(vec![n + 1, 7], extended).unwrap();
        let bigger = h.data_embedding(&extended).unwrap();
        assert!(bigger.iter().zip(&base).all(|(b, a)| b >= a));
    }

    #[test]
    fn normalize_guards_constant_sets() {
        let z = normalize_scores(&[2.5, 2.5, 2.5], 10);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_subsamples_deterministically() {
        let scores: Vec<Real> = (0..2000).map(|i| (i as Real).sin()).collect();
        let a = normalize_scores(&scores, 64);
        assert_eq!(a.len(), 64);
        let mut shuffled = scores.clone();
        shuffled.reverse();
        let b = normalize_scores(&shuffled, 64);
        assert_eq!(a, b);
    }

    fn encoder_fixture() -> (Vec<Vec<Real>>, Vec<Real>) {
        // Spread of the score distribution correlates with the target.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sets = Vec::new();
        let mut targets = Vec::new();
        for i in 0..40 {
            let spread = 0.1 + 0.2 * (i % 10) as Real;
            let set: Vec<Real> = (0..80).map(|_| rng.random_range(-spread..spread)).collect();
            sets.push(set);
            targets.push((i % 10) as Real / 10.0);
        }
        (sets, targets)
    }

    #[test]
    fn encoder_training_reduces_loss() {
        let (sets, targets) = encoder_fixture();
        let settings = EncoderSettings {
            epochs: 0,
            ..EncoderSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = train_score_encoder(&sets, &targets, &settings, &mut rng).unwrap();
        let init_mse = init.mse(&sets, &targets).unwrap();

        let settings = EncoderSettings {
            epochs: 40,
            ..EncoderSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trained = train_score_encoder(&sets, &targets, &settings, &mut rng).unwrap();
        let trained_mse = trained.mse(&sets, &targets).unwrap();
        assert!(
            trained_mse < init_mse,
            "mse went from {init_mse} to {trained_mse}"
        );
    }

    #[test]
    fn model_embedding_permutation_and_shape() {
        let (sets, targets) = encoder_fixture();
        let settings = EncoderSettings {
            epochs: 5,
            ..EncoderSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = train_score_encoder(&sets, &targets, &settings, &mut rng).unwrap();

        let set = &sets[3];
        let base = g.model_embedding(set).unwrap();
        assert_eq!(base.len(), 32);

        let mut reversed = set.clone();
        reversed.reverse();
        assert_eq!(g.model_embedding(&reversed).unwrap(), base);

        // Duplicated multiset keeps the mean pool unchanged.
        let mut doubled = set.clone();
        doubled.extend_from_slice(set);
        let dup = g.model_embedding(&doubled).unwrap();
        for (a, b) in dup.iter().zip(&base) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        // Distinct distributions produce distinct embeddings.
        let uniform: Vec<Real> = (0..200).map(|i| i as Real / 200.0).collect();
        let bimodal: Vec<Real> = (0..200)
            .map(|i| if i % 2 == 0 { 0.0 } else { 1.0 })
            .collect();
        let eu = g.model_embedding(&uniform).unwrap();
        let eb = g.model_embedding(&bimodal).unwrap();
        assert!(eu.iter().zip(&eb).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn empty_score_set_rejected() {
        let (sets, targets) = encoder_fixture();
        let settings = EncoderSettings {
            epochs: 1,
            ..EncoderSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = train_score_encoder(&sets, &targets, &settings, &mut rng).unwrap();
        assert!(g.model_embedding(&[]).is_err());
    }
}
