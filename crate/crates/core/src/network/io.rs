//! JSON weight files. Every number is stored as a decimal string holding the
//! shortest representation that parses back to the identical `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationSpec, BatchNorm, Layer, NetworkError, NetworkParams, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    #[serde(rename = "W")]
    pub w: Vec<Vec<String>>,
    pub b: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnFile {
    pub gamma: Vec<Vec<String>>,
    pub beta: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
    pub layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BnFile>,
}

fn enc(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|x| format!("{x:?}")).collect()
}

fn dec(xs: &[String], what: &str) -> Result<Vec<f64>> {
    xs.iter()
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| NetworkError::Format(format!("{what}: `{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(NetworkError::Format(format!(
                    "{what}: non-finite value `{s}`"
                )))
            }
        })
        .collect()
}

impl WeightFile {
    pub fn from_params(params: &NetworkParams) -> Self {
        let layers = params
            .layers()
            .iter()
            .map(|l| LayerFile {
                w: l.weight.to_rows().iter().map(|r| enc(r)).collect(),
                b: enc(&l.bias),
                residual: l.residual,
            })
            .collect();
        let bn = params
            .batch_norm()
            .filter(|_| params.has_batch_norm())
            .map(|bns| BnFile {
                gamma: bns.iter().map(|b| enc(&b.gamma)).collect(),
                beta: bns.iter().map(|b| enc(&b.beta)).collect(),
            });
        WeightFile {
            widths: params.widths().to_vec(),
            activation: *params.activation(),
            layers,
            bn,
        }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, lf) in self.layers.iter().enumerate() {
            let what = format!("layer {}", i + 1);
            let rows =
                lf.w.iter()
                    .map(|r| dec(r, &what))
                    .collect::<Result<Vec<_>>>()?;
            let weight = if rows.is_empty() {
                Matrix::zeros(0, 0)
            } else {
                Matrix::from_rows(&rows)
                    .map_err(|e| NetworkError::Format(format!("{what}: {e}")))?
            };
            let mut layer = Layer::new(weight, Vector::from(dec(&lf.b, &what)?));
            layer.residual = lf.residual;
            layers.push(layer);
        }
        let bn = match &self.bn {
            Some(f) => {
                if f.gamma.len() != f.beta.len() {
                    return Err(NetworkError::Format("bn gamma/beta counts differ".into()));
                }
                let mut out = Vec::new();
                for (g, b) in f.gamma.iter().zip(&f.beta) {
                    out.push(BatchNorm {
                        gamma: Vector::from(dec(g, "bn gamma")?),
                        beta: Vector::from(dec(b, "bn beta")?),
                        enabled: true,
                    });
                }
                Some(out)
            }
            None => None,
        };
        let params = NetworkParams::new(self.activation, layers, bn)?;
        if params.widths() != self.widths.as_slice() {
            return Err(NetworkError::Format(format!(
                "declared widths {:?} but layers give {:?}",
                self.widths,
                params.widths()
            )));
        }
        Ok(params)
    }
}

pub fn save_weights(params: &NetworkParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&WeightFile::from_params(params))
        .expect("weight file serialises");
    fs::write(path, json).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<NetworkParams> {
    let text = fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: WeightFile = serde_json::from_str(&text)
        .map_err(|e| NetworkError::Format(format!("{}: {e}", path.display())))?;
    file.to_params()
}
