//! Full delta matrices as composable building blocks.
//!
//! A delta is `ΔW = ((α/r) · B A)ᵀ`, stored in the base checkpoint's `(in, out)`
//! orientation so applying it is plain addition. Deltas from independent
//! adapters compose by signed summation; the sum of `j` rank-`r` blocks has
//! rank at most `min(j·r, rows, cols)`, which [`rank_certificate`] checks.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{AdapterBundle, LayerKey, LoraConfig, LoraLayerPair};
use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::rank::numerical_rank;
use crate::tensor::{add_scaled, matmul, transpose, Matrix};

/// Absolute per-entry tolerance for treating a composed delta as zero.
pub const ZERO_DELTA_TOL: f64 = 1e-7;

/// LoRA hyperparameters a delta set was reconstructed with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockScale {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub source_names: Vec<String>,
    pub layers: BTreeMap<LayerKey, Matrix>,
    /// Number of fundamental blocks summed into this set.
    pub level: usize,
    /// `None` once sets with different (r, α) have been force-composed.
    pub scale: Option<BlockScale>,
}

impl DeltaSet {
    pub fn keys(&self) -> BTreeSet<LayerKey> {
        self.layers.keys().copied().collect()
    }

    pub fn is_zero_within(&self, tol: f64) -> bool {
        self.layers.values().all(|m| m.max_abs() <= tol)
    }

    pub fn negate(&self) -> DeltaSet {
        compose(&[(self, -1.0)]).expect("single-set composition")
    }
}

fn check_finite(key: &LayerKey, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("delta for layer {key} has non-finite entries")))
    }
}

fn check_pair(pair: &LoraLayerPair, config: &LoraConfig) -> Result<()> {
    let r = config.rank;
    if pair.a.rows() != r || pair.b.cols() != r {
        return Err(Error::Validation(format!(
            "layer {}: factors A {:?} and B {:?} do not have rank {r}",
            pair.key,
            pair.a.shape(),
            pair.b.shape()
        )));
    }
    Ok(())
}

fn ensure_finite_delta(key: &LayerKey, data: &[f64]) -> Result<()> {
    // Branch-free so the scan vectorizes; deltas are large.
    if data.iter().fold(false, |bad, x| bad | !x.is_finite()) {
        return Err(Error::Numeric(format!("delta for layer {key} has non-finite entries")));
    }
    Ok(())
}

/// `ΔW = ((α/r) · B A)ᵀ`, shape `(m, n)`.
///
/// Computed as `(s·Aᵀ) Bᵀ` with `s = α/r`: scaling the thin factor instead of
/// the product saves a full pass over the output.
pub fn reconstruct_delta(pair: &LoraLayerPair, config: &LoraConfig) -> Result<Matrix> {
    check_pair(pair, config)?;
    let scaled_at = transpose(&pair.a).scale(config.scaling());
    let delta = matmul(&scaled_at, &transpose(&pair.b))?;
    ensure_finite_delta(&pair.key, delta.as_slice())?;
    Ok(delta)
}

/// The `r` rank-one terms `A[i,:]ᵀ B[:,i]ᵀ`, each already in `(m, n)` layout
/// and unscaled. Their sum times α/r is the delta.
pub fn rank_one_terms(pair: &LoraLayerPair, config: &LoraConfig) -> Result<Vec<Matrix>> {
    check_pair(pair, config)?;
    (0..config.rank)
        .map(|i| Matrix::outer(pair.a.row(i), &pair.b.column(i)))
        .collect()
}

/// Independent evaluation of the delta as a sum of scaled rank-one outer
/// products, `Σᵢ (s·A[i,:])ᵀ B[:,i]ᵀ`.
pub fn reconstruct_delta_outer(pair: &LoraLayerPair, config: &LoraConfig) -> Result<Matrix> {
    check_pair(pair, config)?;
    let (m, n) = (pair.a.cols(), pair.b.rows());
    let s = config.scaling();
    // Row j of the sum is Σᵢ s·A[i][j]·B[:,i], built term by term while the
    // row is hot in cache.
    let b_cols: Vec<Vec<f64>> = (0..config.rank).map(|i| pair.b.column(i)).collect();
    let mut sum = Vec::with_capacity(m * n);
    for j in 0..m {
        let start = sum.len();
        let a0 = s * pair.a.get(0, j);
        sum.extend(b_cols[0].iter().map(|&v| 0.0 + a0 * v));
        for (i, col) in b_cols.iter().enumerate().skip(1) {
            let ai = s * pair.a.get(i, j);
            for (acc, &v) in sum[start..].iter_mut().zip(col) {
                *acc += ai * v;
            }
        }
    }
    ensure_finite_delta(&pair.key, &sum)?;
    Matrix::new(m, n, sum)
}

/// Level-1 delta set for one adapter.
pub fn build_delta_set(bundle: &AdapterBundle) -> Result<DeltaSet> {
    let layers = bundle
        .layers
        .par_iter()
        .map(|(key, pair)| Ok((*key, reconstruct_delta(pair, &bundle.config)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(DeltaSet {
        source_names: vec![bundle.name.clone()],
        layers,
        level: 1,
        scale: Some(BlockScale {
            rank: bundle.config.rank,
            alpha: bundle.config.alpha,
        }),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ComposeOptions {
    /// Allow summing sets reconstructed with different (r, α).
    pub force: bool,
}

fn signed_name(c: f64, name: &str) -> String {
    let (inner_negative, bare) = match name.as_bytes().first() {
        Some(b'-') => (true, &name[1..]),
        Some(b'+') => (false, &name[1..]),
        _ => (false, name),
    };
    let negative = (c < 0.0) != inner_negative;
    let sign = if negative { '-' } else { '+' };
    let mag = c.abs();
    if mag == 1.0 {
        format!("{sign}{bare}")
    } else {
        format!("{sign}{mag}*{bare}")
    }
}

/// Σ cᵢ·ΔWᵢ per layer, accumulated in list order.
pub fn compose(sets: &[(&DeltaSet, f64)]) -> Result<DeltaSet> {
    compose_with(sets, ComposeOptions::default())
}

pub fn compose_with(sets: &[(&DeltaSet, f64)], options: ComposeOptions) -> Result<DeltaSet> {
    let Some(((first, _), rest)) = sets.split_first() else {
        return Err(Error::Composition("nothing to compose".into()));
    };
    if let Some((_, c)) = sets.iter().find(|(_, c)| !c.is_finite()) {
        return Err(Error::Composition(format!("coefficient {c} is not finite")));
    }
    let keys = first.keys();
    for (other, _) in rest {
        let other_keys = other.keys();
        if other_keys != keys {
            let diff: Vec<String> = keys
                .symmetric_difference(&other_keys)
                .map(ToString::to_string)
                .collect();
            return Err(Error::Composition(format!(
                "layer sets differ between {:?} and {:?}: {}",
                first.source_names,
                other.source_names,
                diff.join(", ")
            )));
        }
    }

    let mut scale = first.scale;
    for (other, _) in rest {
        if other.scale != scale {
            if !options.force {
                return Err(Error::Composition(format!(
                    "LoRA rank/alpha differ: {:?} has {:?}, {:?} has {:?}",
                    first.source_names, first.scale, other.source_names, other.scale
                )));
            }
            scale = None;
        }
    }

    let layers = keys
        .par_iter()
        .map(|key| {
            let (head, c0) = sets[0];
            let mut acc = head.layers[key].scale(c0);
            for (set, c) in &sets[1..] {
                acc = add_scaled(&acc, &set.layers[key], *c)?;
            }
            check_finite(key, &acc)?;
            Ok((*key, acc))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    Ok(DeltaSet {
        source_names: sets
            .iter()
            .flat_map(|(set, c)| set.source_names.iter().map(move |n| signed_name(*c, n)))
            .collect(),
        layers,
        level: sets
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(set, _)| set.level)
            .sum(),
        scale,
    })
}

/// `W' = W + ΔW` on the targeted layers; every other tensor is shared with
/// the input unchanged.
pub fn apply_to_base(weights: &ModelWeights, set: &DeltaSet) -> Result<ModelWeights> {
    let updated = set
        .layers
        .par_iter()
        .map(|(key, delta)| {
            let name = key.base_weight_name();
            let base = weights.tensor(&name).ok_or_else(|| Error::Application {
                layer: key.to_string(),
                base: (0, 0),
                delta: delta.shape(),
            })?;
            if base.shape() != delta.shape() {
                return Err(Error::Application {
                    layer: key.to_string(),
                    base: base.shape(),
                    delta: delta.shape(),
                });
            }
            Ok((name, add_scaled(base, delta, 1.0)?))
        })
        .collect::<Result<Vec<_>>>()?;
    weights.with_tensors(updated)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRank {
    pub key: LayerKey,
    pub rank: usize,
    pub bound: usize,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankCertificate {
    pub layers: Vec<LayerRank>,
    pub satisfied: bool,
}

/// Per-layer numerical rank against `min(level·r, rows, cols)`.
pub fn rank_certificate(set: &DeltaSet, r: usize, rel_tol: f64) -> Result<RankCertificate> {
    if r == 0 {
        return Err(Error::Input("rank certificate needs r ≥ 1".into()));
    }
    let layers: Vec<LayerRank> = set
        .layers
        .par_iter()
        .map(|(key, m)| {
            let rank = numerical_rank(m, rel_tol)
                .map_err(|e| Error::Numeric(format!("layer {key}: {e}")))?;
            let bound = (set.level * r).min(m.rows()).min(m.cols());
            Ok(LayerRank {
                key: *key,
                rank,
                bound,
                satisfied: rank <= bound,
            })
        })
        .collect::<Result<_>>()?;
    let satisfied = layers.iter().all(|l| l.satisfied);
    Ok(RankCertificate { layers, satisfied })
}
