//! Base-model checkpoints for the GPT-2 decoder layout.
//!
//! Dimensions are read from the container metadata (`d_model`, `n_layer`,
//! `n_head`, `vocab_size`, `n_positions`, optional `layer_norm_epsilon`), so
//! tiny fixtures and GPT-2 Small go through the same code. Projection weights
//! are stored `(in, out)`, which is the orientation reconstructed deltas use.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::{encode_container, read_container, write_atomic};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub vocab_size: usize,
    pub n_positions: usize,
    pub layer_norm_epsilon: f64,
}

impl ModelDims {
    pub fn gpt2_small() -> Self {
        Self {
            d_model: 768,
            n_layer: 12,
            n_head: 12,
            vocab_size: 50257,
            n_positions: 1024,
            layer_norm_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("vocab_size", self.vocab_size),
            ("n_positions", self.n_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if !(self.layer_norm_epsilon.is_finite() && self.layer_norm_epsilon > 0.0) {
            return Err(Error::Validation("layer_norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let count = |key: &str| -> Result<usize> {
            let v = meta.get(key).ok_or_else(|| {
                Error::Validation(format!("checkpoint metadata lacks `{key}`"))
            })?;
            v.trim()
                .parse()
                .map_err(|_| Error::Validation(format!("metadata `{key}` is not an integer: {v}")))
        };
        let eps = match meta.get("layer_norm_epsilon") {
            Some(v) => v.trim().parse().map_err(|_| {
                Error::Validation(format!("metadata `layer_norm_epsilon` is not a number: {v}"))
            })?,
            None => 1e-5,
        };
        let dims = Self {
            d_model: count("d_model")?,
            n_layer: count("n_layer")?,
            n_head: count("n_head")?,
            vocab_size: count("vocab_size")?,
            n_positions: count("n_positions")?,
            layer_norm_epsilon: eps,
        };
        dims.validate()?;
        Ok(dims)
    }

    fn to_metadata(self) -> BTreeMap<String, String> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_layer", self.n_layer.to_string()),
            ("n_head", self.n_head.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("n_positions", self.n_positions.to_string()),
            ("layer_norm_epsilon", format!("{:e}", self.layer_norm_epsilon)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Every tensor the layout requires with its `(rows, cols)` shape and
    /// whether it is stored as a 1-D vector on disk.
    pub fn tensor_table(&self) -> Vec<(String, (usize, usize), bool)> {
        let d = self.d_model;
        let mut t = vec![
            ("transformer.wte.weight".to_string(), (self.vocab_size, d), false),
            ("transformer.wpe.weight".to_string(), (self.n_positions, d), false),
        ];
        for i in 0..self.n_layer {
            let p = format!("transformer.h.{i}");
            t.extend([
                (format!("{p}.ln_1.weight"), (1, d), true),
                (format!("{p}.ln_1.bias"), (1, d), true),
                (format!("{p}.attn.c_attn.weight"), (d, 3 * d), false),
                (format!("{p}.attn.c_attn.bias"), (1, 3 * d), true),
                (format!("{p}.attn.c_proj.weight"), (d, d), false),
                (format!("{p}.attn.c_proj.bias"), (1, d), true),
                (format!("{p}.ln_2.weight"), (1, d), true),
                (format!("{p}.ln_2.bias"), (1, d), true),
                (format!("{p}.mlp.c_fc.weight"), (d, 4 * d), false),
                (format!("{p}.mlp.c_fc.bias"), (1, 4 * d), true),
                (format!("{p}.mlp.c_proj.weight"), (4 * d, d), false),
                (format!("{p}.mlp.c_proj.bias"), (1, d), true),
            ]);
        }
        t.push(("transformer.ln_f.weight".to_string(), (1, d), true));
        t.push(("transformer.ln_f.bias".to_string(), (1, d), true));
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_table().iter().map(|(_, (r, c), _)| r * c).sum()
    }
}

/// Tensors shared by `Arc`, so deriving a model that changes a few layers
/// leaves the rest untouched and uncopied.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    dims: ModelDims,
    tensors: BTreeMap<String, Arc<Matrix>>,
}

impl ModelWeights {
    pub fn new(dims: ModelDims, tensors: BTreeMap<String, Arc<Matrix>>) -> Result<Self> {
        dims.validate()?;
        let table = dims.tensor_table();
        let missing: Vec<String> = table
            .iter()
            .filter(|(name, _, _)| !tensors.contains_key(name))
            .map(|(name, _, _)| name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Completeness { missing });
        }
        if tensors.len() != table.len() {
            let known: std::collections::BTreeSet<&str> = table.iter().map(|(n, _, _)| n.as_str()).collect();
            let extra: Vec<&str> = tensors.keys().map(String::as_str).filter(|n| !known.contains(n)).collect();
            return Err(Error::Validation(format!("unexpected tensors: {}", extra.join(", "))));
        }
        for (name, shape, _) in &table {
            let m = &tensors[name];
            if m.shape() != *shape {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has shape {:?}, layout requires {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("tensor `{name}` has non-finite entries")));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name).map(Arc::as_ref)
    }

    pub(crate) fn expect(&self, name: &str) -> &Matrix {
        self.tensor(name).unwrap_or_else(|| panic!("validated weights lack `{name}`"))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Whether `name` shares storage with `other`'s tensor of the same name.
    pub fn shares_tensor(&self, other: &ModelWeights, name: &str) -> bool {
        match (self.tensors.get(name), other.tensors.get(name)) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    /// Copy with `replacements` swapped in; shapes and finiteness are rechecked.
    pub fn with_tensors(&self, replacements: impl IntoIterator<Item = (String, Matrix)>) -> Result<Self> {
        let mut tensors = self.tensors.clone();
        for (name, m) in replacements {
            let Some(old) = tensors.get(&name) else {
                return Err(Error::Validation(format!("no tensor named `{name}`")));
            };
            if old.shape() != m.shape() {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has shape {:?}, replacement is {:?}",
                    old.shape(),
                    m.shape()
                )));
            }
            tensors.insert(name, Arc::new(m));
        }
        Self::new(self.dims, tensors)
    }

    /// Randomly initialized weights: N(0, std²) matrices, unit layer-norm
    /// gains, zero biases. Values are f32-representable.
    pub fn random(dims: ModelDims, seed: u64, std: f64) -> Result<Self> {
        dims.validate()?;
        let tensors = dims
            .tensor_table()
            .into_iter()
            .enumerate()
            .map(|(i, (name, (r, c), _))| {
                let data = if name.contains(".ln_") && name.ends_with(".weight") {
                    vec![1.0; r * c]
                } else if name.ends_with(".bias") {
                    vec![0.0; r * c]
                } else {
                    rng::gaussian_vec_f32(&mut rng::stream(seed, i as u64), r * c, std)
                };
                Ok((name, Arc::new(Matrix::new(r, c, data)?)))
            })
            .collect::<Result<_>>()?;
        Self::new(dims, tensors)
    }
}

/// Name normalization: GPT-2 exports sometimes omit the `transformer.` prefix.
fn canonical_tensor_name(raw: &str) -> String {
    if raw.starts_with("transformer.") {
        raw.to_owned()
    } else {
        format!("transformer.{raw}")
    }
}

/// Tensors a GPT-2 export may carry that the decoder never reads: the tied
/// LM head and the cached causal-mask buffers.
fn is_ignorable(name: &str) -> bool {
    name == "lm_head.weight" || name.ends_with(".attn.bias") || name.ends_with(".attn.masked_bias")
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let container = read_container(path)?;
    let dims = ModelDims::from_metadata(&container.metadata)?;
    let expected: BTreeMap<String, ((usize, usize), bool)> = dims
        .tensor_table()
        .into_iter()
        .map(|(n, s, v)| (n, (s, v)))
        .collect();

    let mut tensors = BTreeMap::new();
    let mut unknown = Vec::new();
    for (raw_name, raw) in container.tensors {
        if is_ignorable(&raw_name) {
            continue;
        }
        let name = canonical_tensor_name(&raw_name);
        let Some(&((rows, cols), vector)) = expected.get(&name) else {
            unknown.push(raw_name);
            continue;
        };
        let stored_ok = if vector {
            raw.shape == [cols] || raw.shape == [1, cols]
        } else {
            raw.shape == [rows, cols]
        };
        if !stored_ok {
            return Err(Error::Validation(format!(
                "tensor `{name}` has shape {:?}, layout requires {:?}",
                raw.shape,
                if vector { vec![cols] } else { vec![rows, cols] }
            )));
        }
        if raw.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor `{name}` has non-finite entries")));
        }
        tensors.insert(name, Arc::new(Matrix::from_f32(rows, cols, &raw.values)?));
    }
    if !unknown.is_empty() {
        return Err(Error::Validation(format!("unexpected tensors: {}", unknown.join(", "))));
    }
    ModelWeights::new(dims, tensors)
}

pub fn save_checkpoint(weights: &ModelWeights, path: &Path) -> Result<()> {
    let table = weights.dims.tensor_table();
    let tensors = table.iter().map(|(name, (r, c), vector)| {
        let shape = if *vector { vec![*c] } else { vec![*r, *c] };
        (name.as_str(), shape, weights.expect(name).as_slice())
    });
    let bytes = encode_container(&weights.dims.to_metadata(), tensors);
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::encode_container;

    fn tiny() -> ModelDims {
        ModelDims {
            d_model: 8,
            n_layer: 2,
            n_head: 2,
            vocab_size: 11,
            n_positions: 6,
            layer_norm_epsilon: 1e-5,
        }
    }

    #[test]
    fn gpt2_small_layout() {
        let dims = ModelDims::gpt2_small();
        let table = dims.tensor_table();
        assert_eq!(table.len(), 2 + 12 * 12 + 2);
        let shape = |n: &str| table.iter().find(|(name, _, _)| name == n).unwrap().1;
        assert_eq!(shape("transformer.wte.weight"), (50257, 768));
        assert_eq!(shape("transformer.wpe.weight"), (1024, 768));
        assert_eq!(shape("transformer.h.11.attn.c_attn.weight"), (768, 2304));
        assert_eq!(shape("transformer.h.0.mlp.c_proj.weight"), (3072, 768));
        // 124,439,808 parameters: the usual "117M" GPT-2 Small with tied embeddings.
        assert_eq!(dims.parameter_count(), 124_439_808);
    }

    #[test]
    fn save_load_round_trip() {
        let w = ModelWeights::random(tiny(), 3, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.safetensors");
        save_checkpoint(&w, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), w);
    }

    #[test]
    fn missing_final_norm_is_incomplete() {
        let w = ModelWeights::random(tiny(), 3, 0.1).unwrap();
        let table = w.dims().tensor_table();
        let kept: Vec<_> = table
            .iter()
            .filter(|(n, _, _)| n != "transformer.ln_f.weight")
            .map(|(n, (r, c), v)| (n.as_str(), if *v { vec![*c] } else { vec![*r, *c] }, w.expect(n).as_slice()))
            .collect();
        let bytes = encode_container(&tiny().to_metadata(), kept);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.safetensors");
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Completeness { missing }) => assert_eq!(missing, vec!["transformer.ln_f.weight"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_shape_and_nan_rejected() {
        let w = ModelWeights::random(tiny(), 3, 0.1).unwrap();
        assert!(w
            .with_tensors([("transformer.ln_f.bias".to_string(), Matrix::zeros(1, 7))])
            .is_err());
        let nan = Matrix::new(1, 8, vec![f64::NAN; 8]).unwrap();
        assert!(matches!(
            w.with_tensors([("transformer.ln_f.bias".to_string(), nan)]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn dims_require_divisible_heads() {
        let dims = ModelDims { d_model: 30, n_head: 4, ..tiny() };
        assert!(dims.validate().is_err());
    }

    #[test]
    fn loads_committed_fixture() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/base.safetensors");
        let w = load_checkpoint(&path).unwrap();
        assert_eq!(
            *w.dims(),
            ModelDims {
                d_model: 32,
                n_layer: 2,
                n_head: 4,
                vocab_size: 256,
                n_positions: 64,
                layer_norm_epsilon: 1e-5
            }
        );
    }
}
