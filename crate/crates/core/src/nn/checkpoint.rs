use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, Mlp, OutputHead};
use crate::error::{Error, Result};

const FORMAT: &str = "tailo-mlp";
const VERSION: u32 = 1;

/// On-disk network: shape header plus row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub activation: Activation,
    pub head: OutputHead,
    /// Layer widths from input to output.
    pub sizes: Vec<usize>,
    /// Per layer: `(out, in)` weights flattened row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(net: &Mlp) -> Self {
        MlpCheckpoint {
            format: FORMAT.into(),
            version: VERSION,
            activation: net.activation,
            head: net.head,
            sizes: net.shape().sizes(),
            weights: net.layers.iter().map(|l| l.w.iter().copied().collect()).collect(),
            biases: net.layers.iter().map(|l| l.b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ck: MlpCheckpoint) -> Result<Mlp> {
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let n = ck.sizes.len().saturating_sub(1);
        if n == 0 || ck.weights.len() != n || ck.biases.len() != n {
            return Err(Error::Checkpoint("layer count does not match sizes".into()));
        }
        let layers = ck
            .sizes
            .windows(2)
            .zip(ck.weights.into_iter().zip(ck.biases))
            .map(|(s, (w, b))| {
                let w = Array2::from_shape_vec((s[1], s[0]), w)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                if b.len() != s[1] {
                    return Err(Error::Checkpoint("bias length mismatch".into()));
                }
                Ok(Layer {
                    w,
                    b: Array1::from(b),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp {
            layers,
            activation: ck.activation,
            head: ck.head,
        };
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(net)
    }
}

pub fn mlp_to_json(net: &Mlp) -> String {
    serde_json::to_string(&MlpCheckpoint::from(net)).expect("checkpoint serializes")
}

pub fn mlp_from_json(text: &str) -> Result<Mlp> {
    let ck: MlpCheckpoint =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Mlp::try_from(ck)
}

pub fn save_mlp(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mlp_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mlp_from_json(&text)
}
