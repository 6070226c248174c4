//! Safetensors persistence for backbones and decision layers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Backbone, Stage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Tensors read from (or to be written to) a safetensors file, plus the
/// free-form string metadata stored in its header.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: HashMap<String, String>,
}

fn load_error(path: &Path, reason: impl ToString) -> Error {
    Error::WeightLoad {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

impl TensorFile {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.insert(name.into(), StoredTensor { shape, values });
    }

    /// Written as little-endian f64.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), t.shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F64, shape.clone(), raw).map(|v| (name.clone(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| load_error(path, e))?;
        let metadata = (!self.metadata.is_empty()).then(|| self.metadata.clone());
        safetensors::serialize_to_file(views, metadata, path).map_err(|e| load_error(path, e))
    }

    /// Accepts F64, F32 and F16/BF16 tensors; integer tensors (such as
    /// `num_batches_tracked`) are skipped.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| load_error(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| load_error(path, e))?;
        let metadata = header.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(&bytes).map_err(|e| load_error(path, e))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f64> = match view.dtype() {
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|c| half_to_f64(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
                _ => continue,
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(load_error(path, format!("tensor {name} contains non-finite values")));
            }
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    values,
                },
            );
        }
        Ok(Self { tensors, metadata })
    }

    pub fn take(&mut self, path: &Path, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| load_error(path, format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(load_error(
                path,
                format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape),
            ));
        }
        Ok(t.values)
    }
}

fn half_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 => {
            if frac == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

impl Backbone {
    pub fn export(&self, file: &mut TensorFile) {
        for (name, shape, values) in self.named_parameters() {
            file.insert(name, shape, values.to_vec());
        }
    }

    /// Overwrite every parameter from `file`, consuming the matched tensors.
    pub fn import(&mut self, path: &Path, file: &mut TensorFile) -> Result<()> {
        let mut result = Ok(());
        self.for_each_stage_mut(&mut |stage| {
            if result.is_err() {
                return;
            }
            result = (|| {
                match stage {
                    Stage::Conv(c) => {
                        let shape = [c.out_channels, c.in_channels, c.kernel, c.kernel];
                        c.weight = file.take(path, &format!("{}.weight", c.name), &shape)?;
                        let bias_name = format!("{}.bias", c.name);
                        if c.bias.is_some() || file.tensors.contains_key(&bias_name) {
                            c.bias = Some(file.take(path, &bias_name, &[c.out_channels])?);
                        }
                    }
                    Stage::BatchNorm(b) => {
                        let n = [b.gamma.len()];
                        b.gamma = file.take(path, &format!("{}.weight", b.name), &n)?;
                        b.beta = file.take(path, &format!("{}.bias", b.name), &n)?;
                        b.running_mean = file.take(path, &format!("{}.running_mean", b.name), &n)?;
                        b.running_var = file.take(path, &format!("{}.running_var", b.name), &n)?;
                        if b.running_var.iter().any(|v| *v < 0.0) {
                            return Err(load_error(path, format!("{}: negative running variance", b.name)));
                        }
                    }
                    _ => {}
                }
                Ok(())
            })();
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_decoding() {
        assert_eq!(half_to_f64(0x3c00), 1.0);
        assert_eq!(half_to_f64(0xc000), -2.0);
        assert_eq!(half_to_f64(0x3800), 0.5);
        assert_eq!(half_to_f64(0x0000), 0.0);
    }
}
