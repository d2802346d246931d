//! Dataset sources: IDX directories and built-in synthetic generators.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfpError, Result};
use crate::harness::idx::{self, IdxFile};
use crate::rng::derive_seed;
use crate::tensor::FloatTensor;
use crate::train::{Dataset, Targets};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Idx { dir: PathBuf },
    Synthetic { spec: String },
}

/// Per-feature affine normalization `(x - mean) / std`, applied after
/// scaling IDX pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub source: DataSource,
    pub normalization: Normalization,
    /// `(file name, sha256 hex)` of every file read.
    pub checksums: Vec<(String, String)>,
    pub data: Dataset,
}

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| DfpError::Data(format!("{} has no {stem}[.gz]", dir.display())))
}

fn images_to_tensor(f: &IdxFile) -> Result<FloatTensor> {
    match f {
        IdxFile::Images { count, rows, cols, pixels } => Ok(FloatTensor::from_raw(
            vec![*count, 1, *rows, *cols],
            pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )),
        IdxFile::Labels(_) => Err(DfpError::Data("expected an image file, found labels".into())),
    }
}

fn labels_to_targets(f: &IdxFile) -> Result<Targets> {
    match f {
        IdxFile::Labels(l) => Ok(Targets::Classes(l.iter().map(|&v| v as usize).collect())),
        IdxFile::Images { .. } => Err(DfpError::Data("expected a label file, found images".into())),
    }
}

impl DatasetHandle {
    /// Opens a dataset: `gauss2:...` and `linreg:...` are synthetic,
    /// anything else is a directory holding MNIST-style IDX files.
    pub fn open(spec: &str, seed: u64) -> Result<Self> {
        if spec.starts_with("gauss2:") || spec.starts_with("linreg:") || spec == "gauss2" || spec == "linreg" {
            Self::synthetic(spec, seed)
        } else {
            Self::load_dir(Path::new(spec))
        }
    }

    /// Loads an IDX directory, using the `t10k` files for validation.
    /// Pixels are scaled to `[0, 1]` and standardized with the training
    /// set's mean and standard deviation.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut checksums = Vec::new();
        let mut files = Vec::new();
        for stem in IDX_FILES {
            let path = locate(dir, stem)?;
            let bytes = idx::read_idx_bytes(&path)?;
            checksums.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), sha256_hex(&std::fs::read(&path)?)));
            files.push(idx::parse_idx(&bytes)?);
        }
        let mut train_x = images_to_tensor(&files[0])?;
        let train_y = labels_to_targets(&files[1])?;
        let mut val_x = images_to_tensor(&files[2])?;
        let val_y = labels_to_targets(&files[3])?;
        if train_x.shape()[0] != train_y.len() || val_x.shape()[0] != val_y.len() {
            return Err(DfpError::Data("image and label counts differ".into()));
        }
        let n = train_x.len() as f64;
        let mean = train_x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = train_x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let norm = Normalization {
            mean: mean as f32,
            std: (var.sqrt() as f32).max(1e-6),
        };
        for t in [&mut train_x, &mut val_x] {
            t.data_mut().iter_mut().for_each(|v| *v = (*v - norm.mean) / norm.std);
        }
        Ok(Self {
            source: DataSource::Idx { dir: dir.to_path_buf() },
            normalization: norm,
            checksums,
            data: Dataset {
                train_x,
                train_y,
                val_x,
                val_y,
            },
        })
    }

    /// `gauss2:n=1000,sep=2.5,val=0.2`: two unit-variance Gaussian blobs
    /// centred at `(+-sep, +-sep)`.
    ///
    /// `linreg:n=256,a=3,b=1,noise=0,val=0.25`: `y = a x + b` on uniform
    /// `x` in `[-1, 1]`.
    pub fn synthetic(spec: &str, seed: u64) -> Result<Self> {
        let (kind, params) = spec.split_once(':').unwrap_or((spec, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in params.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| DfpError::Config(format!("bad synthetic parameter `{part}`")))?;
            let v: f64 = v.parse().map_err(|_| DfpError::Config(format!("bad value in `{part}`")))?;
            kv.insert(k.to_string(), v);
        }
        let allowed: &[&str] = match kind {
            "gauss2" => &["n", "sep", "val", "seed"],
            "linreg" => &["n", "a", "b", "noise", "val", "seed"],
            _ => return Err(DfpError::Config(format!("unknown synthetic dataset `{kind}`"))),
        };
        if let Some(k) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(DfpError::Config(format!("`{kind}` has no parameter `{k}`")));
        }
        let get = |k: &str, d: f64| kv.get(k).copied().unwrap_or(d);
        let n = get("n", 1000.0) as usize;
        let val = get("val", 0.2);
        let n_val = ((n as f64 * val).round() as usize).max(1);
        if n < 2 || n_val >= n {
            return Err(DfpError::Config(format!("`{spec}` leaves no training samples")));
        }
        let data_seed = kv.get("seed").map(|&s| s as u64).unwrap_or(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data_seed, "data"));
        let (x, y) = match kind {
            "gauss2" => {
                let sep = get("sep", 2.5) as f32;
                let mut xs = Vec::with_capacity(2 * n);
                let mut ys = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % 2;
                    let mu = if c == 0 { -sep } else { sep };
                    for _ in 0..2 {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        xs.push(mu + z);
                    }
                    ys.push(c);
                }
                (FloatTensor::from_raw(vec![n, 2], xs), Targets::Classes(ys))
            }
            _ => {
                let (a, b, noise) = (get("a", 3.0) as f32, get("b", 1.0) as f32, get("noise", 0.0) as f32);
                let dist = Normal::new(0.0f32, noise.max(0.0)).map_err(|e| DfpError::Config(e.to_string()))?;
                let xs: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let ys: Vec<f32> = xs.iter().map(|&x| a * x + b + dist.sample(&mut rng)).collect();
                (FloatTensor::from_raw(vec![n, 1], xs), Targets::Values(FloatTensor::from_raw(vec![n, 1], ys)))
            }
        };
        let n_train = n - n_val;
        let train: Vec<usize> = (0..n_train).collect();
        let valid: Vec<usize> = (n_train..n).collect();
        Ok(Self {
            source: DataSource::Synthetic { spec: spec.to_string() },
            normalization: Normalization::IDENTITY,
            checksums: Vec::new(),
            data: Dataset {
                train_x: crate::train::gather_rows(&x, &train),
                train_y: y.gather(&train),
                val_x: crate::train::gather_rows(&x, &valid),
                val_y: y.gather(&valid),
            },
        })
    }
}
