use serde::{Deserialize, Serialize};

use super::{ModelSpec, NetError, Parameters};
use crate::ad::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Versioned, self-describing model file. Floats are written in shortest
/// round-trip form, so loading reproduces every parameter bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    version: u32,
    spec: ModelSpec,
    seed: u64,
    params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn new(spec: &ModelSpec, params: &Parameters) -> Result<Self, NetError> {
        params.check_against(spec)?;
        let params = params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Ok(Self {
            version: CHECKPOINT_VERSION,
            spec: spec.clone(),
            seed: spec.seed,
            params,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Validated spec and parameters.
    pub fn into_parts(self) -> Result<(ModelSpec, Parameters), NetError> {
        self.spec.validate()?;
        let layout = self.spec.layout();
        if layout.len() != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), st) in layout.into_iter().zip(self.params) {
            if st.name != name || st.shape != shape {
                return Err(NetError::Checkpoint(format!(
                    "tensor {} {:?} where {name} {shape:?} was expected",
                    st.name, st.shape
                )));
            }
            let t = Tensor::new(st.shape, st.values).map_err(|e| NetError::Checkpoint(e.to_string()))?;
            names.push(name);
            tensors.push(t);
        }
        Ok((self.spec, Parameters { names, tensors }))
    }
}
