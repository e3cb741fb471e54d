//! JSON array records shared by checkpoints and dataset files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A tensor as `{shape, values}` with values as shortest round-trip decimal
/// strings, so parsing recovers every bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub values: Vec<String>,
}

impl ArrayRecord {
    pub fn from_tensor(t: &Tensor) -> Self {
        ArrayRecord {
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        ArrayRecord {
            shape: vec![labels.len()],
            values: labels.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let data = self
            .values
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|e| Error::Checkpoint(format!("{name}[{i}] = {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn to_labels(&self, name: &str) -> Result<Vec<usize>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<usize>()
                    .map_err(|e| Error::Checkpoint(format!("{name}[{i}] = {s:?}: {e}")))
            })
            .collect()
    }
}
