//! `weights.json`: named-tensor container for [`GroundingWeights`].
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config": { "hidden_dim": 64, "model_dim": 64, ... },
//!   "header": { "W_q": [64, 64], "box_head.fc1.bias": [64], ... },
//!   "tensors": { "W_q": [ ...row-major values... ], ... }
//! }
//! ```
//!
//! Every tensor named by the config's layout must appear in both `header`
//! and `tensors` with a matching shape; extra tensors are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundingConfig, GroundingError, GroundingWeights, Params};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    config: GroundingConfig,
    header: BTreeMap<String, Vec<usize>>,
    tensors: BTreeMap<String, Vec<f64>>,
}

pub fn save_weights(w: &GroundingWeights, path: impl AsRef<Path>) -> Result<(), GroundingError> {
    let path = path.as_ref();
    let mut header = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    w.visit("", &mut |name, shape, data| {
        header.insert(name.clone(), shape);
        tensors.insert(name, data.to_vec());
    });
    let file = WeightsFile {
        format_version: WEIGHTS_FORMAT_VERSION,
        config: w.config,
        header,
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| GroundingError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|source| GroundingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<GroundingWeights, GroundingError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GroundingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    weights_from_json(&text).map_err(|e| match e {
        GroundingError::Format { message, .. } => GroundingError::Format {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub(crate) fn weights_from_json(text: &str) -> Result<GroundingWeights, GroundingError> {
    let format = |message: String| GroundingError::Format {
        path: String::new(),
        message,
    };
    let file: WeightsFile = serde_json::from_str(text).map_err(|e| format(e.to_string()))?;
    if file.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(format(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    let mut w = GroundingWeights::zeros(file.config)?;
    let mut error = None;
    let mut expected = Vec::new();
    w.visit_mut("", &mut |name, shape, data| {
        if error.is_some() {
            return;
        }
        expected.push(name.clone());
        let Some(got_shape) = file.header.get(&name) else {
            error = Some(GroundingError::MissingTensor(name));
            return;
        };
        if *got_shape != shape {
            error = Some(GroundingError::TensorShape {
                name,
                expected: shape,
                got: got_shape.clone(),
            });
            return;
        }
        match file.tensors.get(&name) {
            None => error = Some(GroundingError::MissingTensor(name)),
            Some(values) if values.len() != data.len() => {
                error = Some(GroundingError::TensorShape {
                    name,
                    expected: shape,
                    got: vec![values.len()],
                })
            }
            Some(values) => data.copy_from_slice(values),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    for name in file.header.keys().chain(file.tensors.keys()) {
        if !expected.contains(name) {
            return Err(GroundingError::UnexpectedTensor(name.clone()));
        }
    }
    Ok(w)
}
