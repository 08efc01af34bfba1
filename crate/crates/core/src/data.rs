//! Dataset ingestion and the synthetic testbed.
//!
//! Files are headered CSV with numeric feature columns and an optional final
//! `label` column (1 = outlier). Features are min-max scaled to [0,1] per
//! column on load; the same scaling function serves the in-memory testbed so
//! file-based and in-memory pipelines see byte-identical data.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::meta::HistoricalTask;
use crate::runconfig::SynthSettings;
use crate::seeds::{self, stream};
use crate::tensor::{Real, Tensor};

/// Per-column min/max recorded at scaling time.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnScaling {
    pub mins: Vec<Real>,
    pub maxs: Vec<Real>,
}

/// Min-max scales each column to [0,1] in place (constant columns go to 0).
pub fn scale_columns(x: &mut Tensor) -> ColumnScaling {
    let (n, f) = (x.rows(), x.cols());
    let mut mins = vec![Real::INFINITY; f];
    let mut maxs = vec![Real::NEG_INFINITY; f];
    for i in 0..n {
        for j in 0..f {
            let v = x.at2(i, j);
            mins[j] = mins[j].min(v);
            maxs[j] = maxs[j].max(v);
        }
    }
    for i in 0..n {
        for j in 0..f {
            let range = maxs[j] - mins[j];
            let denom = if range > 0.0 { range } else { 1.0 };
            let v = (x.at2(i, j) - mins[j]) / denom;
            x.set2(i, j, v);
        }
    }
    ColumnScaling { mins, maxs }
}

/// A loaded dataset: labeled task or unlabeled test matrix, already scaled.
#[derive(Clone, Debug)]
pub enum LoadedDataset {
    Labeled(HistoricalTask),
    Unlabeled { name: String, x: Tensor },
}

impl LoadedDataset {
    pub fn features(&self) -> &Tensor {
        match self {
            LoadedDataset::Labeled(t) => &t.x,
            LoadedDataset::Unlabeled { x, .. } => x,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LoadedDataset::Labeled(t) => &t.name,
            LoadedDataset::Unlabeled { name, .. } => name,
        }
    }
}

/// Loads a CSV dataset. The final column named `label` (if present) carries
/// 0/1 outlier labels; every other column must parse as a finite real.
pub fn load_dataset(path: &Path) -> Result<(LoadedDataset, ColumnScaling)> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let n_cols = headers.len();
    if n_cols == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "empty header".into(),
        });
    }
    let labeled = headers.get(n_cols - 1).map(str::trim) == Some("label");
    let n_features = if labeled { n_cols - 1 } else { n_cols };
    if n_features == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut data: Vec<Real> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() != n_cols {
            return Err(Error::Parse {
                line,
                message: format!("expected {n_cols} columns, got {}", record.len()),
            });
        }
        for j in 0..n_features {
            let raw = record.get(j).unwrap_or("").trim();
            let v: Real = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {j}: `{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {j}: non-finite value"),
                });
            }
            data.push(v);
        }
        if labeled {
            let raw = record.get(n_cols - 1).unwrap_or("").trim();
            let y: u8 = match raw {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("label `{other}` must be 0 or 1"),
                    })
                }
            };
            labels.push(y);
        }
    }
    let n = data.len() / n_features;
    if n == 0 {
        return Err(Error::Contract(format!("{name}: dataset has no rows")));
    }
    let mut x = Tensor::new(vec![n, n_features], data)?;
    let scaling = scale_columns(&mut x);
    let loaded = if labeled {
        LoadedDataset::Labeled(HistoricalTask::new(name, x, labels)?)
    } else {
        LoadedDataset::Unlabeled { name, x }
    };
    Ok((loaded, scaling))
}

fn csv_err(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line() as usize,
        None => 0,
    };
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes a dataset as headered CSV (`f0..f{F-1}` plus optional `label`).
/// Values are written in shortest round-trip form, so a reload reproduces
/// them bit-exactly.
pub fn save_dataset(path: &Path, x: &Tensor, labels: Option<&[u8]>) -> Result<()> {
    let (n, f) = (x.rows(), x.cols());
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} rows",
                l.len()
            )));
        }
    }
    let mut out = String::new();
    for j in 0..f {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("f{j}"));
    }
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..n {
        for j in 0..f {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&x.at2(i, j).to_string());
        }
        if let Some(l) = labels {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn normal<R: Rng>(rng: &mut R) -> Real {
    let v: f64 = StandardNormal.sample(rng);
    v as Real
}

/// Raw (unscaled) synthetic tasks: inliers on a random low-rank Gaussian
/// manifold plus uniform-box and shifted-Gaussian outliers. Tasks differ in
/// width, rank, and noise level.
fn synth_raw(settings: &SynthSettings, seed: u64) -> Result<Vec<(String, Tensor, Vec<u8>)>> {
    if settings.contamination <= 0.0 || settings.contamination >= 0.5 {
        return Err(Error::Config(format!(
            "contamination must lie in (0, 0.5), got {}",
            settings.contamination
        )));
    }
    let mut tasks = Vec::with_capacity(settings.n_tasks);
    for t in 0..settings.n_tasks {
        let mut rng = seeds::derive_rng(seed, &[stream::SYNTH, t as u64]);
        let f = rng.random_range(settings.dim_min..=settings.dim_max);
        let rank = rng.random_range(1..=(f / 2).max(1));
        let n = settings.n_samples;
        let n_out = ((n as Real * settings.contamination).round() as usize).clamp(1, n - 1);
        let n_in = n - n_out;

        // Random basis, latent scales, mean offset, noise level. Wide noise
        // and rank ranges make tasks capacity-sensitive in different ways.
        let basis: Vec<Real> = (0..rank * f).map(|_| normal(&mut rng)).collect();
        let scales: Vec<Real> = (0..rank).map(|_| rng.random_range(0.5..1.5)).collect();
        let mean: Vec<Real> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = rng.random_range(0.05..0.20);

        let mut rows: Vec<Vec<Real>> = Vec::with_capacity(n);
        let mut labels: Vec<u8> = Vec::with_capacity(n);
        for _ in 0..n_in {
            let mut row = mean.clone();
            for r in 0..rank {
                let z = scales[r] * normal(&mut rng);
                for j in 0..f {
                    row[j] += z * basis[r * f + j];
                }
            }
            for v in row.iter_mut() {
                *v += noise * normal(&mut rng);
            }
            rows.push(row);
            labels.push(0);
        }

        // Bounding box of the inliers for the uniform outliers.
        let mut lo = vec![Real::INFINITY; f];
        let mut hi = vec![Real::NEG_INFINITY; f];
        for row in &rows {
            for j in 0..f {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        for k in 0..n_out {
            let row: Vec<Real> = if k % 2 == 0 {
                // Uniform within the inlier bounding box: no coordinate is
                // individually extreme, only the joint structure is wrong.
                (0..f).map(|j| rng.random_range(lo[j]..hi[j])).collect()
            } else {
                // Off-manifold shift: inlier-like point plus a moderate jump
                // along a random feature-space direction.
                let mut row = mean.clone();
                for r in 0..rank {
                    let z = scales[r] * normal(&mut rng);
                    for j in 0..f {
                        row[j] += z * basis[r * f + j];
                    }
                }
                let mut dir: Vec<Real> = (0..f).map(|_| normal(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-9);
                let jump = rng.random_range(1.0..2.0);
                for (v, d) in row.iter_mut().zip(&mut dir) {
                    *d /= norm;
                    *v += jump * *d;
                }
                row
            };
            rows.push(row);
            labels.push(1);
        }

        // Shuffle rows so labels are not positionally encoded.
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let data: Vec<Real> = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let shuffled_labels: Vec<u8> = order.iter().map(|&i| labels[i]).collect();

        tasks.push((
            format!("synth{t:02}"),
            Tensor::new(vec![n, f], data)?,
            shuffled_labels,
        ));
    }
    Ok(tasks)
}

/// Scaled synthetic tasks ready for the pipeline.
pub fn synth_testbed(settings: &SynthSettings, seed: u64) -> Result<Vec<HistoricalTask>> {
    synth_raw(settings, seed)?
        .into_iter()
        .map(|(name, mut x, labels)| {
            scale_columns(&mut x);
            HistoricalTask::new(name, x, labels)
        })
        .collect()
}

/// Writes the raw testbed as CSV files (one per task) and returns the paths.
pub fn write_synth_testbed(
    dir: &Path,
    settings: &SynthSettings,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, x, labels) in synth_raw(settings, seed)? {
        let path = dir.join(format!("{name}.csv"));
        save_dataset(&path, &x, Some(&labels))?;
        paths.push(path);
    }
    Ok(paths)
}
