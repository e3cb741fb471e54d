//! Gaussian-mixture datasets, the augmentation pool and a CIFAR binary
//! reader.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ArrayRecord;
use crate::tensor::Tensor;

pub const CIFAR_PIXELS: usize = 3072;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(rename = "M", default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    /// `[M][d_in]`. Defaults to `2·(±e₁ ± e₂)` for four classes.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    4
}
fn default_d_in() -> usize {
    8
}
fn default_sigma() -> f64 {
    0.5
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    1000
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: default_classes(),
            d_in: default_d_in(),
            means: None,
            sigma: default_sigma(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(m) = &self.means {
            return Ok(m.clone());
        }
        if self.classes != 4 || self.d_in < 2 {
            return Err(Error::Config(
                "explicit means are required unless M = 4 and d_in >= 2".into(),
            ));
        }
        Ok([(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .map(|&(a, b)| {
                let mut v = vec![0.0; self.d_in];
                v[0] = 2.0 * a;
                v[1] = 2.0 * b;
                v
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let means = self.class_means()?;
        if means.len() != self.classes || self.classes < 2 {
            return Err(Error::Config(format!(
                "need {} >= 2 class means",
                self.classes
            )));
        }
        if means.iter().any(|m| m.len() != self.d_in) {
            return Err(Error::Config(
                "class mean dimension differs from d_in".into(),
            ));
        }
        for i in 0..means.len() {
            for j in 0..i {
                if means[i] == means[j] {
                    return Err(Error::Config(format!("class means {j} and {i} coincide")));
                }
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, d_in]`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut arrays = BTreeMap::new();
        arrays.insert("x".to_string(), ArrayRecord::from_tensor(&self.x));
        arrays.insert("y".to_string(), ArrayRecord::from_labels(&self.y));
        let doc = DatasetFile {
            format_version: DATASET_FORMAT_VERSION,
            classes: self.classes,
            arrays,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let doc: DatasetFile = serde_json::from_str(text)?;
        if doc.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported dataset version {}",
                doc.format_version
            )));
        }
        let get = |k: &str| {
            doc.arrays
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {k}")))
        };
        let x = get("x")?.to_tensor("x")?;
        let y = get("y")?.to_labels("y")?;
        if x.shape().len() != 2 || x.shape()[0] != y.len() {
            return Err(Error::Checkpoint("x and y lengths differ".into()));
        }
        if y.iter().any(|&c| c >= doc.classes) {
            return Err(Error::Checkpoint("label outside class range".into()));
        }
        Ok(Dataset {
            x,
            y,
            classes: doc.classes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    #[serde(rename = "M")]
    classes: usize,
    arrays: BTreeMap<String, ArrayRecord>,
}

fn sample_split(rng: &mut ChaCha8Rng, n: usize, means: &[Vec<f64>], sigma: f64) -> Dataset {
    let m = means.len();
    let d = means[0].len();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..m);
        y.push(c);
        x.extend(means[c].iter().map(|mu| mu + sigma * noise.sample(rng)));
    }
    Dataset {
        x: Tensor::new(vec![n, d], x).expect("shape"),
        y,
        classes: m,
    }
}

/// Draws `(train, test)` with uniform class labels.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let means = cfg.class_means()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = sample_split(&mut rng, cfg.n_train, &means, cfg.sigma);
    let test = sample_split(&mut rng, cfg.n_test, &means, cfg.sigma);
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPool {
    /// Per-sample multiplier drawn from `U(lo, hi)`.
    pub scale_range: (f64, f64),
    pub jitter_sigma: f64,
    pub mask_prob: f64,
    /// Applied after the transforms, e.g. `(0, 1)` for pixel data.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

impl Default for AugmentationPool {
    fn default() -> Self {
        AugmentationPool {
            scale_range: (0.8, 1.2),
            jitter_sigma: 0.3,
            mask_prob: 0.1,
            clamp: None,
        }
    }
}

impl AugmentationPool {
    pub fn identity() -> Self {
        AugmentationPool {
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.0,
            mask_prob: 0.0,
            clamp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!(
                "scale range ({lo}, {hi}) must contain 1"
            )));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask probability {} outside [0, 1)",
                self.mask_prob
            )));
        }
        Ok(())
    }

    /// One draw `t ~ 𝒯` per row: scale, then jitter, then mask.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Tensor {
        let d = x.last_dim();
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let (lo, hi) = self.scale_range;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            for v in row.iter_mut() {
                *v *= s;
                if self.jitter_sigma > 0.0 {
                    *v += self.jitter_sigma * noise.sample(rng);
                }
                if self.mask_prob > 0.0 && rng.gen::<f64>() < self.mask_prob {
                    *v = 0.0;
                }
                if let Some((a, b)) = self.clamp {
                    *v = v.clamp(a, b);
                }
            }
        }
        out
    }
}

/// Two independent augmentations `(t(x), t'(x))`.
pub fn make_views<R: Rng + ?Sized>(
    x: &Tensor,
    pool: &AugmentationPool,
    rng: &mut R,
) -> (Tensor, Tensor) {
    let a = pool.apply(x, rng);
    let b = pool.apply(x, rng);
    (a, b)
}

/// Parses CIFAR binary records (one label byte, 3072 pixel bytes).
pub fn parse_cifar_binary(bytes: &[u8], classes: usize) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Cifar {
            offset: 0,
            detail: "empty file".into(),
        });
    }
    let whole = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = whole * CIFAR_RECORD;
        return Err(Error::Cifar {
            offset,
            detail: format!(
                "truncated record: {} of {CIFAR_RECORD} bytes",
                bytes.len() - offset
            ),
        });
    }
    let mut x = Vec::with_capacity(whole * CIFAR_PIXELS);
    let mut y = Vec::with_capacity(whole);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= classes {
            return Err(Error::Cifar {
                offset: i * CIFAR_RECORD,
                detail: format!("label {label} outside 0..{classes}"),
            });
        }
        y.push(label);
        x.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(Dataset {
        x: Tensor::new(vec![whole, CIFAR_PIXELS], x)?,
        y,
        classes,
    })
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    parse_cifar_binary(&std::fs::read(path)?, 10)
}

/// Inverse of [`parse_cifar_binary`] for values on the `k/255` grid.
pub fn encode_cifar_binary(data: &Dataset) -> Result<Vec<u8>> {
    if data.d_in() != CIFAR_PIXELS {
        return Err(Error::shape(
            "encode_cifar",
            &[CIFAR_PIXELS],
            &[data.d_in()],
        ));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (i, &label) in data.y.iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| Error::domain("encode_cifar", "label > 255"))?);
        out.extend(
            data.x
                .row(i)
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}
