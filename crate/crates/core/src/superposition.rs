//! Monte-Carlo checks of near-orthogonality for random low-rank deltas.
//!
//! Factors are i.i.d. Gaussian rather than LoRA's zero-initialized B: the
//! question here is geometric (how aligned are independent rank-r matrices in
//! an n×m space), not how training evolves them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::{numerical_rank, DEFAULT_RANK_TOL};
use crate::rng;
use crate::similarity::cosine_layer;
use crate::tensor::{add_scaled, matmul, transpose, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub trials: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl SimSpec {
    /// GPT-2 Small fused-QKV shape at rank 4.
    pub fn gpt2_c_attn(trials: usize, seed: u64) -> Self {
        Self {
            n: 768,
            m: 2304,
            r: 4,
            trials,
            seed,
            init_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Spec(format!("dimensions must be positive, got {}×{}", self.n, self.m)));
        }
        if self.r == 0 || self.r > self.n.min(self.m) {
            return Err(Error::Spec(format!(
                "rank {} must lie in 1..={} for {}×{}",
                self.r,
                self.n.min(self.m),
                self.n,
                self.m
            )));
        }
        if self.trials == 0 {
            return Err(Error::Spec("trials must be at least 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Spec(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationPoint {
    pub j: usize,
    pub rank: usize,
    pub bound: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub spec: SimSpec,
    /// Signed cosine per trial, in trial order.
    pub cosine_samples: Vec<f64>,
    pub mean_abs_cosine: f64,
    pub rms_cosine: f64,
    pub max_abs_cosine: f64,
    pub rank_saturation: Vec<SaturationPoint>,
}

fn random_delta_on_stream(n: usize, m: usize, r: usize, seed: u64, stream: u64, std: f64) -> Result<Matrix> {
    if r == 0 || r > n.min(m) {
        return Err(Error::Spec(format!("rank {r} must lie in 1..={} for {n}×{m}", n.min(m))));
    }
    let mut g = rng::stream(seed, stream);
    let a = Matrix::new(r, m, rng::gaussian_vec(&mut g, r * m, std))?;
    let b = Matrix::new(n, r, rng::gaussian_vec(&mut g, n * r, std))?;
    Ok(transpose(&matmul(&b, &a)?))
}

/// `(B A)ᵀ` with A (r×m) and B (n×r) drawn from N(0, std²); shape (m, n).
pub fn gen_random_delta(n: usize, m: usize, r: usize, seed: u64, std: f64) -> Result<Matrix> {
    random_delta_on_stream(n, m, r, seed, 0, std)
}

fn summarize(spec: SimSpec, cosine_samples: Vec<f64>, rank_saturation: Vec<SaturationPoint>) -> SimResult {
    let k = cosine_samples.len() as f64;
    let abs = cosine_samples.iter().map(|c| c.abs());
    let mean_abs_cosine = abs.clone().sum::<f64>() / k;
    let max_abs_cosine = abs.fold(0.0, f64::max);
    let rms_cosine = (cosine_samples.iter().map(|c| c * c).sum::<f64>() / k).sqrt();
    SimResult {
        spec,
        cosine_samples,
        mean_abs_cosine,
        rms_cosine,
        max_abs_cosine,
        rank_saturation,
    }
}

/// Cosine between independent pairs; trial `t` draws its pair from streams
/// `2t` and `2t + 1`.
pub fn orthogonality_stats(spec: &SimSpec) -> Result<SimResult> {
    spec.validate()?;
    let samples = (0..spec.trials as u64)
        .into_par_iter()
        .map(|t| {
            let a = random_delta_on_stream(spec.n, spec.m, spec.r, spec.seed, 2 * t, spec.init_std)?;
            let b = random_delta_on_stream(spec.n, spec.m, spec.r, spec.seed, 2 * t + 1, spec.init_std)?;
            cosine_layer(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(*spec, samples, Vec::new()))
}

/// Numerical rank of the running sum of `j = 1..=j_max` independent deltas,
/// paired with the bound `min(j·r, n, m)`.
pub fn rank_saturation_sweep(n: usize, m: usize, r: usize, j_max: usize, seed: u64) -> Result<Vec<SaturationPoint>> {
    if j_max == 0 {
        return Err(Error::Spec("j_max must be at least 1".into()));
    }
    let mut acc: Option<Matrix> = None;
    let mut out = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        let delta = random_delta_on_stream(n, m, r, seed, (j - 1) as u64, 1.0)?;
        let sum = match acc {
            None => delta,
            Some(prev) => add_scaled(&prev, &delta, 1.0)?,
        };
        out.push(SaturationPoint {
            j,
            rank: numerical_rank(&sum, DEFAULT_RANK_TOL)?,
            bound: (j * r).min(n).min(m),
        });
        acc = Some(sum);
    }
    Ok(out)
}

/// Cosine statistics plus a rank sweep from the same seed.
pub fn simulate(spec: &SimSpec, j_max: usize) -> Result<SimResult> {
    let mut result = orthogonality_stats(spec)?;
    result.rank_saturation = rank_saturation_sweep(spec.n, spec.m, spec.r, j_max, spec.seed)?;
    Ok(result)
}

impl SimResult {
    pub fn cosines_csv(&self) -> String {
        let mut out = String::from("trial,cosine\n");
        for (t, c) in self.cosine_samples.iter().enumerate() {
            writeln!(out, "{t},{c}").expect("string write");
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("j,rank,bound\n");
        for p in &self.rank_saturation {
            writeln!(out, "{},{},{}", p.j, p.rank, p.bound).expect("string write");
        }
        out
    }
}
