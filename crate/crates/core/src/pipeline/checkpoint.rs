use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ArrayRecord;
use crate::models::{Discriminator, Encoder, LinearClassifier, Parameters};
use crate::tensor::Tensor;

use super::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

/// On-disk model state. Parameters are stored by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub d_in: usize,
    pub d_repr: usize,
    pub d_proj: usize,
    #[serde(rename = "M")]
    pub classes: usize,
    pub seed: u64,
    /// Completed pretraining epochs.
    #[serde(default)]
    pub epoch: usize,
    pub arrays: BTreeMap<String, ArrayRecord>,
    /// The run that produced this state, so later phases can reuse it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

fn put<P: Parameters + ?Sized>(arrays: &mut BTreeMap<String, ArrayRecord>, p: &P) {
    for (name, t) in p.named_tensors() {
        arrays.insert(name, ArrayRecord::from_tensor(t));
    }
}

fn fill<P: Parameters + ?Sized>(arrays: &BTreeMap<String, ArrayRecord>, p: &mut P) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = p
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((name, shape), slot) in names.into_iter().zip(p.tensors_mut()) {
        let rec = arrays
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        let t = rec.to_tensor(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_models(
        encoder: &Encoder,
        discriminator: Option<&Discriminator>,
        classes: usize,
        seed: u64,
        epoch: usize,
    ) -> Self {
        let mut arrays = BTreeMap::new();
        put(&mut arrays, encoder);
        if let Some(d) = discriminator {
            put(&mut arrays, d);
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            d_in: encoder.extractor.d_in(),
            d_repr: encoder.extractor.d_repr(),
            d_proj: encoder.head.d_proj(),
            classes,
            seed,
            epoch,
            arrays,
            config: None,
        }
    }

    pub fn with_config(mut self, config: &RunConfig) -> Self {
        self.config = Some(config.clone());
        self
    }

    /// Rebuilds the encoder into `template`, which fixes the architecture.
    pub fn load_encoder(&self, template: &mut Encoder) -> Result<()> {
        self.check_version()?;
        fill(&self.arrays, template)
    }

    pub fn load_discriminator(&self, template: &mut Discriminator) -> Result<bool> {
        if !self.arrays.contains_key("discriminator.weight") {
            return Ok(false);
        }
        fill(&self.arrays, template)?;
        Ok(true)
    }

    pub fn has_discriminator(&self) -> bool {
        self.arrays.contains_key("discriminator.weight")
    }

    fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        c.check_version()?;
        Ok(c)
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A trained linear classifier in the checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFile {
    pub format_version: u32,
    pub d_repr: usize,
    #[serde(rename = "M")]
    pub classes: usize,
    pub adversarial: bool,
    pub arrays: BTreeMap<String, ArrayRecord>,
}

impl ClassifierFile {
    pub fn new(classifier: &LinearClassifier, adversarial: bool) -> Self {
        let mut arrays = BTreeMap::new();
        put(&mut arrays, classifier);
        ClassifierFile {
            format_version: FORMAT_VERSION,
            d_repr: classifier.weight.shape()[1],
            classes: classifier.classes(),
            adversarial,
            arrays,
        }
    }

    pub fn classifier(&self) -> Result<LinearClassifier> {
        let mut c = LinearClassifier {
            weight: Tensor::zeros(&[self.classes, self.d_repr]),
        };
        fill(&self.arrays, &mut c)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
