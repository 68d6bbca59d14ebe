//! LoRA adapter bundles: layer naming, configuration and file I/O.
//!
//! Tensor names are accepted in the long form shown by PEFT when listing
//! parameters (`base_model.model.transformer.h.11.attn.c_attn.lora_A.default.weight`)
//! and in the exported short forms (no `base_model.model.` prefix and/or no
//! `.default` infix). The rank and alpha come from a sidecar JSON config next
//! to the file, else from the container's `__metadata__`, else from explicit
//! overrides supplied by the caller.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{encode_container, read_container, write_atomic, Container, RawTensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

const PEFT_PREFIX: &str = "base_model.model.";
const ADAPTER_INFIX: &str = ".default";

/// The three projections LoRA targets in a GPT-2 block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "attn.c_attn")]
    AttnCAttn,
    #[serde(rename = "attn.c_proj")]
    AttnCProj,
    #[serde(rename = "mlp.c_proj")]
    MlpCProj,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::AttnCAttn, ModuleKind::AttnCProj, ModuleKind::MlpCProj];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::AttnCAttn => "attn.c_attn",
            ModuleKind::AttnCProj => "attn.c_proj",
            ModuleKind::MlpCProj => "mlp.c_proj",
        }
    }

    /// `(n, m)` of the LoRA update for model width `d`: B is (n, r), A is (r, m).
    pub fn update_dims(self, d: usize) -> (usize, usize) {
        match self {
            ModuleKind::AttnCAttn => (3 * d, d),
            ModuleKind::AttnCProj => (d, d),
            ModuleKind::MlpCProj => (d, 4 * d),
        }
    }

    /// Model width implied by a factor pair's shapes, if consistent.
    fn width_from(self, a: &Matrix, b: &Matrix) -> usize {
        match self {
            ModuleKind::AttnCAttn | ModuleKind::AttnCProj => a.cols(),
            ModuleKind::MlpCProj => b.rows(),
        }
    }

    /// Expands a `target_modules` entry. The bare `c_proj` used by adapter
    /// configs matches both the attention and MLP output projections.
    pub fn parse_target(s: &str) -> Result<Vec<ModuleKind>> {
        match s {
            "c_attn" | "attn.c_attn" => Ok(vec![ModuleKind::AttnCAttn]),
            "c_proj" => Ok(vec![ModuleKind::AttnCProj, ModuleKind::MlpCProj]),
            "attn.c_proj" => Ok(vec![ModuleKind::AttnCProj]),
            "mlp.c_proj" => Ok(vec![ModuleKind::MlpCProj]),
            other => Err(Error::Validation(format!(
                "unsupported target module `{other}` (expected c_attn, c_proj, attn.c_attn, attn.c_proj or mlp.c_proj)"
            ))),
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Naming(s.to_owned()))
    }
}

/// A LoRA-targeted layer. Ordering is canonical: block ascending, then module
/// kind in `attn.c_attn`, `attn.c_proj`, `mlp.c_proj` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerKey {
    pub block: usize,
    pub kind: ModuleKind,
}

impl LayerKey {
    pub fn new(block: usize, kind: ModuleKind) -> Self {
        Self { block, kind }
    }

    /// Name of the base-model weight this layer's delta is added to.
    pub fn base_weight_name(&self) -> String {
        format!("{self}.weight")
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "transformer.h.{}.{}", self.block, self.kind)
    }
}

impl FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let naming = || Error::Naming(s.to_owned());
        let rest = s.strip_prefix("transformer.h.").ok_or_else(naming)?;
        let (block, kind) = rest.split_once('.').ok_or_else(naming)?;
        if block.is_empty() || !block.bytes().all(|b| b.is_ascii_digit()) {
            return Err(naming());
        }
        let block = block.parse().map_err(|_| naming())?;
        let kind = kind.parse().map_err(|_| naming())?;
        Ok(LayerKey { block, kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    A,
    B,
}

/// Maps a LoRA tensor name onto its layer and factor slot.
pub fn parse_layer_name(raw: &str) -> Result<(LayerKey, Factor)> {
    let naming = || Error::Naming(raw.to_owned());
    let name = raw.strip_prefix(PEFT_PREFIX).unwrap_or(raw);
    let (layer, factor, tail) = if let Some((layer, tail)) = name.split_once(".lora_A") {
        (layer, Factor::A, tail)
    } else if let Some((layer, tail)) = name.split_once(".lora_B") {
        (layer, Factor::B, tail)
    } else {
        return Err(naming());
    };
    let tail = tail.strip_prefix(ADAPTER_INFIX).unwrap_or(tail);
    match tail {
        ".weight" => {}
        ".bias" => {
            return Err(Error::Validation(format!(
                "LoRA bias tensors are not supported: `{raw}`"
            )))
        }
        _ => return Err(naming()),
    }
    let key = layer.parse::<LayerKey>().map_err(|_| naming())?;
    Ok((key, factor))
}

/// Exported tensor name for a factor, in the form PEFT writes to disk.
pub fn factor_tensor_name(key: &LayerKey, factor: Factor) -> String {
    let f = match factor {
        Factor::A => "lora_A",
        Factor::B => "lora_B",
    };
    format!("{PEFT_PREFIX}{key}.{f}.weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_modules: BTreeSet<ModuleKind>,
    pub num_blocks: usize,
}

impl LoraConfig {
    pub fn new(
        rank: usize,
        alpha: f64,
        target_modules: impl IntoIterator<Item = ModuleKind>,
        num_blocks: usize,
    ) -> Result<Self> {
        let cfg = Self {
            rank,
            alpha,
            target_modules: target_modules.into_iter().collect(),
            num_blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The setup used throughout: r = 4, α = 64, all three projections, 12 blocks.
    pub fn gpt2_small() -> Self {
        Self::new(4, 64.0, ModuleKind::ALL, 12).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Validation("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Validation(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Validation("target_modules is empty".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Validation("num_blocks must be at least 1".into()));
        }
        Ok(())
    }

    /// α / r.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn expected_keys(&self) -> impl Iterator<Item = LayerKey> + '_ {
        (0..self.num_blocks)
            .flat_map(move |b| self.target_modules.iter().map(move |&k| LayerKey::new(b, k)))
    }

    pub fn layer_count(&self) -> usize {
        self.num_blocks * self.target_modules.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayerPair {
    pub key: LayerKey,
    /// (r, m)
    pub a: Matrix,
    /// (n, r)
    pub b: Matrix,
}

impl LoraLayerPair {
    pub fn validate(&self, config: &LoraConfig, width: usize) -> Result<()> {
        let (n, m) = self.key.kind.update_dims(width);
        let r = config.rank;
        if self.a.shape() != (r, m) || self.b.shape() != (n, r) {
            return Err(Error::Validation(format!(
                "layer {}: expected A ({r}, {m}) and B ({n}, {r}) for width {width}, got A {:?} and B {:?}",
                self.key,
                self.a.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub name: String,
    pub config: LoraConfig,
    pub layers: BTreeMap<LayerKey, LoraLayerPair>,
}

impl AdapterBundle {
    pub fn new(
        name: impl Into<String>,
        config: LoraConfig,
        layers: BTreeMap<LayerKey, LoraLayerPair>,
    ) -> Result<Self> {
        let bundle = Self {
            name: name.into(),
            config,
            layers,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Model width d shared by every layer.
    pub fn width(&self) -> Option<usize> {
        self.layers.values().next().map(|p| p.key.kind.width_from(&p.a, &p.b))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Validation(format!("adapter `{}` has no layers", self.name)));
        }
        for (key, pair) in &self.layers {
            if *key != pair.key {
                return Err(Error::Validation(format!("layer stored under {key} claims to be {}", pair.key)));
            }
        }
        let unexpected: Vec<String> = self
            .layers
            .keys()
            .filter(|k| k.block >= self.config.num_blocks || !self.config.target_modules.contains(&k.kind))
            .map(ToString::to_string)
            .collect();
        if !unexpected.is_empty() {
            return Err(Error::Validation(format!(
                "layers outside the configured targets/blocks: {}",
                unexpected.join(", ")
            )));
        }
        let missing: Vec<String> = self
            .config
            .expected_keys()
            .filter(|k| !self.layers.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Completeness { missing });
        }
        let width = self.width().expect("non-empty");
        for pair in self.layers.values() {
            pair.validate(&self.config, width)?;
            if !(pair.a.is_finite() && pair.b.is_finite()) {
                return Err(Error::Numeric(format!("layer {} has non-finite factor entries", pair.key)));
            }
        }
        Ok(())
    }
}

/// Sidecar config; field names follow the common `adapter_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub r: usize,
    pub lora_alpha: f64,
    pub target_modules: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
}

/// Caller-supplied fallbacks used when neither a sidecar nor header metadata
/// declares the LoRA hyperparameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConfigOverrides {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Default)]
struct DeclaredConfig {
    rank: Option<usize>,
    alpha: Option<f64>,
    targets: Option<BTreeSet<ModuleKind>>,
    num_blocks: Option<usize>,
}

fn parse_targets<'a>(items: impl IntoIterator<Item = &'a str>) -> Result<BTreeSet<ModuleKind>> {
    let mut set = BTreeSet::new();
    for item in items {
        set.extend(ModuleKind::parse_target(item.trim())?);
    }
    Ok(set)
}

/// Candidate sidecar locations: `<file>.json`, and `adapter_config.json` when
/// the file follows the `adapter_model.*` naming.
pub fn sidecar_path(path: &Path) -> Option<PathBuf> {
    let same_stem = path.with_extension("json");
    if same_stem.is_file() {
        return Some(same_stem);
    }
    let is_peft_layout = path
        .file_stem()
        .is_some_and(|s| s == "adapter_model");
    let peft = path.with_file_name("adapter_config.json");
    (is_peft_layout && peft.is_file()).then_some(peft)
}

fn resolve_adapter_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("adapter_model.safetensors")
    } else {
        path.to_path_buf()
    }
}

fn declared_config(path: &Path, container: &Container) -> Result<DeclaredConfig> {
    if let Some(sidecar) = sidecar_path(path) {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let cfg: SidecarConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Validation(format!("sidecar config {}: {e}", sidecar.display()))
        })?;
        return Ok(DeclaredConfig {
            rank: Some(cfg.r),
            alpha: Some(cfg.lora_alpha),
            targets: Some(parse_targets(cfg.target_modules.iter().map(String::as_str))?),
            num_blocks: cfg.num_blocks,
        });
    }
    let meta = &container.metadata;
    let parse_num = |key: &str| -> Result<Option<f64>> {
        meta.get(key)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("metadata `{key}` is not a number: {v}")))
            })
            .transpose()
    };
    let as_count = |v: Option<f64>, key: &str| -> Result<Option<usize>> {
        v.map(|x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Validation(format!("metadata `{key}` must be a non-negative integer")))
            }
        })
        .transpose()
    };
    Ok(DeclaredConfig {
        rank: as_count(parse_num("r")?, "r")?,
        alpha: parse_num("lora_alpha")?,
        targets: meta
            .get("target_modules")
            .map(|v| parse_targets(v.split(',')))
            .transpose()?,
        num_blocks: as_count(parse_num("num_blocks")?, "num_blocks")?,
    })
}

fn to_matrix(name: &str, t: &RawTensor) -> Result<Matrix> {
    if t.shape.len() != 2 {
        return Err(Error::Validation(format!(
            "tensor `{name}` must be 2-D, has shape {:?}",
            t.shape
        )));
    }
    if t.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("tensor `{name}` has non-finite entries")));
    }
    Matrix::from_f32(t.shape[0], t.shape[1], &t.values)
}

pub fn load_adapter(path: &Path, name: &str) -> Result<AdapterBundle> {
    load_adapter_with(path, name, ConfigOverrides::default())
}

pub fn load_adapter_with(path: &Path, name: &str, overrides: ConfigOverrides) -> Result<AdapterBundle> {
    let path = resolve_adapter_file(path);
    let container = read_container(&path)?;
    let declared = declared_config(&path, &container)?;

    let mut factors: BTreeMap<LayerKey, (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
    for (tensor_name, raw) in &container.tensors {
        let (key, factor) = parse_layer_name(tensor_name)?;
        let slot = factors.entry(key).or_default();
        let target = match factor {
            Factor::A => &mut slot.0,
            Factor::B => &mut slot.1,
        };
        if target.is_some() {
            return Err(Error::Validation(format!("duplicate tensor for {key} ({tensor_name})")));
        }
        *target = Some(to_matrix(tensor_name, raw)?);
    }
    if factors.is_empty() {
        return Err(Error::Validation(format!("{} holds no LoRA tensors", path.display())));
    }

    let rank = declared.rank.or(overrides.rank).ok_or_else(|| {
        Error::Validation("LoRA rank unknown: provide a sidecar config, `r` metadata, or an explicit rank".into())
    })?;
    let alpha = declared.alpha.or(overrides.alpha).ok_or_else(|| {
        Error::Validation("LoRA alpha unknown: provide a sidecar config, `lora_alpha` metadata, or an explicit alpha".into())
    })?;
    let targets = declared
        .targets
        .unwrap_or_else(|| factors.keys().map(|k| k.kind).collect());
    let num_blocks = declared
        .num_blocks
        .unwrap_or_else(|| factors.keys().map(|k| k.block + 1).max().unwrap_or(0));
    let config = LoraConfig::new(rank, alpha, targets, num_blocks)?;

    let mut missing = Vec::new();
    let mut layers = BTreeMap::new();
    for (key, (a, b)) in factors {
        match (a, b) {
            (Some(a), Some(b)) => {
                layers.insert(key, LoraLayerPair { key, a, b });
            }
            (a, _) => {
                let absent = if a.is_none() { Factor::A } else { Factor::B };
                missing.push(factor_tensor_name(&key, absent));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Completeness { missing });
    }

    // Declared rank disagreeing with the factor shapes is reported as such,
    // before the generic shape check.
    if let Some(pair) = layers.values().find(|p| p.a.rows() != rank || p.b.cols() != rank) {
        return Err(Error::Validation(format!(
            "declared rank {rank} disagrees with layer {}: A {:?}, B {:?}",
            pair.key,
            pair.a.shape(),
            pair.b.shape()
        )));
    }
    AdapterBundle::new(name, config, layers)
}

pub fn save_adapter(bundle: &AdapterBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::write(path, encode_adapter(bundle)).map_err(|e| Error::io(path, e))
}

/// Like [`save_adapter`] but replaces the target atomically.
pub fn save_adapter_atomic(bundle: &AdapterBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    write_atomic(path, &encode_adapter(bundle))
}

fn encode_adapter(bundle: &AdapterBundle) -> Vec<u8> {
    let cfg = &bundle.config;
    let metadata: BTreeMap<String, String> = [
        ("format", "pt".to_string()),
        ("name", bundle.name.clone()),
        ("r", cfg.rank.to_string()),
        ("lora_alpha", cfg.alpha.to_string()),
        (
            "target_modules",
            cfg.target_modules.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","),
        ),
        ("num_blocks", cfg.num_blocks.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let names: Vec<(String, String, &LoraLayerPair)> = bundle
        .layers
        .values()
        .map(|p| (factor_tensor_name(&p.key, Factor::A), factor_tensor_name(&p.key, Factor::B), p))
        .collect();
    let tensors = names.iter().flat_map(|(na, nb, p)| {
        [
            (na.as_str(), vec![p.a.rows(), p.a.cols()], p.a.as_slice()),
            (nb.as_str(), vec![p.b.rows(), p.b.cols()], p.b.as_slice()),
        ]
    });
    encode_container(&metadata, tensors)
}

/// Adapter with i.i.d. Gaussian factors (f32-representable), one pair per
/// configured layer. Used for fixtures and benchmarks.
pub fn random_bundle(
    name: &str,
    config: &LoraConfig,
    width: usize,
    seed: u64,
    std: f64,
) -> Result<AdapterBundle> {
    let layers = config
        .expected_keys()
        .enumerate()
        .map(|(i, key)| {
            let (n, m) = key.kind.update_dims(width);
            let mut rng = rng::stream(seed, i as u64);
            let a = Matrix::new(config.rank, m, rng::gaussian_vec_f32(&mut rng, config.rank * m, std))?;
            let b = Matrix::new(n, config.rank, rng::gaussian_vec_f32(&mut rng, n * config.rank, std))?;
            Ok((key, LoraLayerPair { key, a, b }))
        })
        .collect::<Result<_>>()?;
    AdapterBundle::new(name, config.clone(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_bundle(name: &str, config: &LoraConfig, width: usize, seed: u64) -> AdapterBundle {
        super::random_bundle(name, config, width, seed, 0.02).unwrap()
    }

    #[test]
    fn parses_long_and_short_names() {
        let (key, f) = parse_layer_name("base_model.model.transformer.h.11.attn.c_attn.lora_A.default.weight").unwrap();
        assert_eq!((key, f), (LayerKey::new(11, ModuleKind::AttnCAttn), Factor::A));

        let (key, f) = parse_layer_name("base_model.model.transformer.h.11.mlp.c_proj.lora_B.default.weight").unwrap();
        assert_eq!((key, f), (LayerKey::new(11, ModuleKind::MlpCProj), Factor::B));

        let (key, f) = parse_layer_name("transformer.h.0.attn.c_attn.lora_A.weight").unwrap();
        assert_eq!((key, f), (LayerKey::new(0, ModuleKind::AttnCAttn), Factor::A));
    }

    #[test]
    fn rejects_non_lora_names() {
        for raw in [
            "transformer.h.0.attn.c_attn.weight",
            "transformer.h.x.attn.c_attn.lora_A.weight",
            "transformer.h.0.mlp.c_fc.lora_A.weight",
            "transformer.h.0.attn.c_attn.lora_A.other.weight",
            "model.h.0.attn.c_attn.lora_A.weight",
        ] {
            match parse_layer_name(raw) {
                Err(Error::Naming(echo)) => assert_eq!(echo, raw),
                other => panic!("{raw}: {other:?}"),
            }
        }
    }

    #[test]
    fn lora_bias_is_an_explicit_error() {
        let err = parse_layer_name("transformer.h.0.attn.c_attn.lora_B.bias").unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn module_shapes_for_gpt2_small() {
        assert_eq!(ModuleKind::AttnCAttn.update_dims(768), (2304, 768));
        assert_eq!(ModuleKind::AttnCProj.update_dims(768), (768, 768));
        assert_eq!(ModuleKind::MlpCProj.update_dims(768), (768, 3072));
    }

    #[test]
    fn target_expansion() {
        let set = parse_targets(["c_attn", "c_proj"]).unwrap();
        assert_eq!(set.len(), 3);
        assert!(parse_targets(["c_fc"]).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(LoraConfig::new(0, 64.0, ModuleKind::ALL, 12).is_err());
        assert!(LoraConfig::new(4, 0.0, ModuleKind::ALL, 12).is_err());
        assert!(LoraConfig::new(4, 64.0, [], 12).is_err());
        let cfg = LoraConfig::gpt2_small();
        assert_eq!(cfg.layer_count(), 36);
        assert_eq!(cfg.scaling(), 16.0);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = LoraConfig::new(4, 64.0, ModuleKind::ALL, 3).unwrap();
        let bundle = random_bundle("math", &cfg, 16, 1);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.safetensors");
        let p2 = dir.path().join("b.safetensors");
        save_adapter(&bundle, &p1).unwrap();
        save_adapter(&bundle, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = load_adapter(&p1, "math").unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn empty_bundle_rejected_before_write() {
        let cfg = LoraConfig::new(4, 64.0, ModuleKind::ALL, 1).unwrap();
        let bundle = AdapterBundle {
            name: "empty".into(),
            config: cfg,
            layers: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.safetensors");
        assert!(save_adapter(&bundle, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn missing_layer_reported_by_name() {
        let cfg = LoraConfig::gpt2_small();
        let mut bundle = random_bundle("x", &LoraConfig { num_blocks: 12, ..cfg.clone() }, 8, 2);
        let victim = LayerKey::new(11, ModuleKind::MlpCProj);
        bundle.layers.remove(&victim);
        match bundle.validate() {
            Err(Error::Completeness { missing }) => assert_eq!(missing, vec![victim.to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_factor_in_file_is_incomplete() {
        let cfg = LoraConfig::new(2, 8.0, [ModuleKind::AttnCAttn], 1).unwrap();
        let bundle = random_bundle("x", &cfg, 4, 3);
        let pair = &bundle.layers[&LayerKey::new(0, ModuleKind::AttnCAttn)];
        let meta: BTreeMap<String, String> =
            [("r".to_string(), "2".to_string()), ("lora_alpha".to_string(), "8".to_string())].into();
        let name = factor_tensor_name(&pair.key, Factor::A);
        let bytes = encode_container(&meta, [(name.as_str(), vec![2, 4], pair.a.as_slice())]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, bytes).unwrap();
        match load_adapter(&path, "x") {
            Err(Error::Completeness { missing }) => {
                assert_eq!(missing, vec![factor_tensor_name(&pair.key, Factor::B)])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rank_mismatch_with_declared_config() {
        let cfg = LoraConfig::new(4, 64.0, ModuleKind::ALL, 1).unwrap();
        let bundle = random_bundle("x", &cfg, 8, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        save_adapter(&bundle, &path).unwrap();
        let sidecar = SidecarConfig {
            r: 2,
            lora_alpha: 64.0,
            target_modules: vec!["c_attn".into(), "c_proj".into()],
            num_blocks: None,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string(&sidecar).unwrap()).unwrap();
        let err = load_adapter(&path, "x").unwrap_err();
        assert!(err.to_string().contains("declared rank 2"), "{err}");
    }

    #[test]
    fn overrides_apply_only_without_declarations() {
        let cfg = LoraConfig::new(2, 8.0, ModuleKind::ALL, 1).unwrap();
        let bundle = random_bundle("x", &cfg, 4, 5);
        let tensors: Vec<(String, Vec<usize>, &[f64])> = bundle
            .layers
            .values()
            .flat_map(|p| {
                [
                    (factor_tensor_name(&p.key, Factor::A), vec![p.a.rows(), p.a.cols()], p.a.as_slice()),
                    (factor_tensor_name(&p.key, Factor::B), vec![p.b.rows(), p.b.cols()], p.b.as_slice()),
                ]
            })
            .collect();
        let bytes = encode_container(
            &BTreeMap::new(),
            tensors.iter().map(|(n, s, v)| (n.as_str(), s.clone(), *v)),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.safetensors");
        std::fs::write(&path, bytes).unwrap();

        assert!(matches!(load_adapter(&path, "x"), Err(Error::Validation(_))));
        let loaded = load_adapter_with(&path, "x", ConfigOverrides { rank: Some(2), alpha: Some(8.0) }).unwrap();
        assert_eq!(loaded.config, cfg);
    }

    proptest! {
        #[test]
        fn canonical_name_round_trips(block in 0usize..48, k in 0usize..3, long in any::<bool>(), infix in any::<bool>(), b in any::<bool>()) {
            let key = LayerKey::new(block, ModuleKind::ALL[k]);
            prop_assert_eq!(key.to_string().parse::<LayerKey>().unwrap(), key);
            let factor = if b { "lora_B" } else { "lora_A" };
            let raw = format!(
                "{}{}.{}{}.weight",
                if long { PEFT_PREFIX } else { "" },
                key,
                factor,
                if infix { ADAPTER_INFIX } else { "" },
            );
            let (parsed, f) = parse_layer_name(&raw).unwrap();
            prop_assert_eq!(parsed, key);
            prop_assert_eq!(f, if b { Factor::B } else { Factor::A });
        }

        #[test]
        fn any_deletion_breaks_completeness(victims in proptest::collection::btree_set(0usize..9, 1..9)) {
            let cfg = LoraConfig::new(1, 2.0, ModuleKind::ALL, 3).unwrap();
            let mut bundle = random_bundle("p", &cfg, 4, 9);
            let keys: Vec<LayerKey> = bundle.layers.keys().copied().collect();
            for v in &victims {
                bundle.layers.remove(&keys[*v]);
            }
            let is_invalid = bundle.validate().is_err();
            prop_assert!(is_invalid);
        }

        #[test]
        fn load_of_save_is_identity(seed in any::<u64>(), rank in 1usize..4, blocks in 1usize..3) {
            let cfg = LoraConfig::new(rank, 16.0, ModuleKind::ALL, blocks).unwrap();
            let bundle = random_bundle("rt", &cfg, 8, seed);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.safetensors");
            save_adapter(&bundle, &path).unwrap();
            prop_assert_eq!(load_adapter(&path, "rt").unwrap(), bundle);
        }
    }
}
