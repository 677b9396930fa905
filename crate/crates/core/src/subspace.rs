//! Low-dimensional prompt reparameterization.
//!
//! A prompt at layer `l` is `p = p0 + Π·z`, where `z` lives in a small intrinsic
//! space of dimension `d` and `Π` is a frozen `D×d` Gaussian matrix whose entry
//! scale follows `σ_A = α·σ̂ / (√d·σ_z)`. With that scale, a search
//! distribution of standard deviation `σ_z` maps onto prompts whose entries
//! have standard deviation close to `α·σ̂`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{check_len, invalid, Error, Result};

/// Point in the intrinsic search space for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicVector {
    values: Vec<f64>,
    layer: usize,
}

impl IntrinsicVector {
    pub fn new(values: Vec<f64>, layer: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("intrinsic vector must have length >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("intrinsic vector entries must be finite"));
        }
        Ok(Self { values, layer })
    }

    pub fn zeros(dim: usize, layer: usize) -> Self {
        Self {
            values: vec![0.0; dim.max(1)],
            layer,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Prompt-space vector (length `D`) injected at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    values: Vec<f64>,
    layer: usize,
}

impl PromptVector {
    pub fn new(values: Vec<f64>, layer: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("prompt vector entries must be finite"));
        }
        Ok(Self { values, layer })
    }

    pub fn zeros(len: usize, layer: usize) -> Self {
        Self {
            values: vec![0.0; len],
            layer,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Inputs of the projection scaling rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingParams {
    pub alpha: f64,
    /// Standard deviation of the model's word embeddings.
    pub sigma_hat: f64,
    /// Standard deviation of the search distribution over `z`.
    pub sigma_z: f64,
    pub dim: usize,
}

/// `σ_A = α·σ̂ / (√d·σ_z)`.
pub fn compute_sigma_a(params: &ScalingParams) -> Result<f64> {
    let ScalingParams {
        alpha,
        sigma_hat,
        sigma_z,
        dim,
    } = *params;
    for (name, v) in [("alpha", alpha), ("sigma_hat", sigma_hat), ("sigma_z", sigma_z)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if dim == 0 {
        return Err(invalid("intrinsic dimension must be >= 1"));
    }
    Ok(alpha * sigma_hat / ((dim as f64).sqrt() * sigma_z))
}

/// Frozen random projection from intrinsic space to prompt space.
///
/// There is deliberately no way to obtain a mutable view of the entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
    sigma_a: f64,
    seed: u64,
}

impl ProjectionMatrix {
    /// Builds a projection from explicit rows (`D` rows of length `d`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let big_d = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if big_d == 0 || d == 0 {
            return Err(invalid("projection must be non-empty"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "projection row",
                expected: d,
                actual: bad.len(),
            });
        }
        let entries = DMatrix::from_fn(big_d, d, |i, j| rows[i][j]);
        let sigma_a = sample_std(entries.iter().copied());
        Ok(Self {
            entries,
            sigma_a,
            seed: 0,
        })
    }

    /// Prompt dimension `D` (row count).
    pub fn prompt_dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Intrinsic dimension `d` (column count).
    pub fn intrinsic_dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Sampling standard deviation (empirical for hand-built matrices).
    pub fn sigma_a(&self) -> f64 {
        self.sigma_a
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.entries[(row, col)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Draws a `D×d` matrix with i.i.d. `N(0, σ_A²)` entries from a ChaCha8 stream.
///
/// Entries are filled row by row, so the same `(d, D, σ_A, seed)` always
/// reproduces the same matrix bit for bit.
pub fn make_projection(
    intrinsic_dim: usize,
    prompt_dim: usize,
    sigma_a: f64,
    seed: u64,
) -> Result<ProjectionMatrix> {
    if intrinsic_dim == 0 {
        return Err(invalid("intrinsic dimension must be >= 1"));
    }
    if prompt_dim < intrinsic_dim {
        return Err(invalid(format!(
            "prompt dimension {prompt_dim} is smaller than intrinsic dimension {intrinsic_dim}"
        )));
    }
    if !(sigma_a.is_finite() && sigma_a > 0.0) {
        return Err(invalid(format!("sigma_a must be positive, got {sigma_a}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_major = Vec::with_capacity(prompt_dim * intrinsic_dim);
    for _ in 0..prompt_dim * intrinsic_dim {
        let n: f64 = StandardNormal.sample(&mut rng);
        row_major.push(n * sigma_a);
    }
    Ok(ProjectionMatrix {
        entries: DMatrix::from_row_slice(prompt_dim, intrinsic_dim, &row_major),
        sigma_a,
        seed,
    })
}

/// `p_θ = Π·z`, tagged with the layer of `z`.
pub fn project(pi: &ProjectionMatrix, z: &IntrinsicVector) -> Result<PromptVector> {
    check_len("projection input", pi.intrinsic_dim(), z.len())?;
    let p = &pi.entries * DVector::from_column_slice(z.values());
    PromptVector::new(p.as_slice().to_vec(), z.layer())
}

/// Elementwise `p0 + p_θ`.
pub fn compose_prompt(p0: &PromptVector, p_theta: &PromptVector) -> Result<PromptVector> {
    check_len("prompt composition", p0.len(), p_theta.len())?;
    if p0.layer != p_theta.layer {
        return Err(invalid(format!(
            "cannot compose prompts of layers {} and {}",
            p0.layer, p_theta.layer
        )));
    }
    let values = p0
        .values
        .iter()
        .zip(&p_theta.values)
        .map(|(a, b)| a + b)
        .collect();
    PromptVector::new(values, p0.layer)
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn sample_std(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    if n < 2 {
        0.0
    } else {
        (m2 / (n - 1) as f64).sqrt()
    }
}

/// One frozen projection plus an initial prompt per model layer.
#[derive(Debug, Clone)]
pub struct Subspaces {
    projections: Vec<ProjectionMatrix>,
    initial: Vec<PromptVector>,
}

impl Subspaces {
    /// Layer `l` uses seed `base_seed + l`; initial prompts default to zero.
    pub fn generate(
        layers: usize,
        intrinsic_dim: usize,
        prompt_dim: usize,
        sigma_a: f64,
        base_seed: u64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(invalid("layer count must be >= 1"));
        }
        let projections = (0..layers)
            .map(|l| make_projection(intrinsic_dim, prompt_dim, sigma_a, base_seed + l as u64))
            .collect::<Result<Vec<_>>>()?;
        let initial = (0..layers)
            .map(|l| PromptVector::zeros(prompt_dim, l))
            .collect();
        Ok(Self {
            projections,
            initial,
        })
    }

    pub fn from_parts(projections: Vec<ProjectionMatrix>, initial: Vec<PromptVector>) -> Result<Self> {
        if projections.is_empty() {
            return Err(invalid("layer count must be >= 1"));
        }
        check_len("initial prompts", projections.len(), initial.len())?;
        let d = projections[0].intrinsic_dim();
        let big_d = projections[0].prompt_dim();
        for (l, (pi, p0)) in projections.iter().zip(&initial).enumerate() {
            check_len("projection intrinsic dim", d, pi.intrinsic_dim())?;
            check_len("projection prompt dim", big_d, pi.prompt_dim())?;
            check_len("initial prompt", big_d, p0.len())?;
            if p0.layer() != l {
                return Err(invalid(format!("initial prompt {l} is tagged layer {}", p0.layer())));
            }
        }
        Ok(Self {
            projections,
            initial,
        })
    }

    /// Replaces the initial prompts `p0` (one per layer).
    pub fn with_initial(self, initial: Vec<PromptVector>) -> Result<Self> {
        Self::from_parts(self.projections, initial)
    }

    pub fn layers(&self) -> usize {
        self.projections.len()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.projections[0].intrinsic_dim()
    }

    pub fn prompt_dim(&self) -> usize {
        self.projections[0].prompt_dim()
    }

    pub fn projection(&self, layer: usize) -> &ProjectionMatrix {
        &self.projections[layer]
    }

    pub fn initial(&self, layer: usize) -> &PromptVector {
        &self.initial[layer]
    }

    /// Zero intrinsic vectors for every layer.
    pub fn origin(&self) -> Vec<IntrinsicVector> {
        (0..self.layers())
            .map(|l| IntrinsicVector::zeros(self.intrinsic_dim(), l))
            .collect()
    }

    /// Full per-layer prompts `p0 + Π·z` for a complete set of intrinsic vectors.
    pub fn prompts(&self, zs: &[IntrinsicVector]) -> Result<Vec<PromptVector>> {
        check_len("intrinsic vectors per layer", self.layers(), zs.len())?;
        zs.iter()
            .enumerate()
            .map(|(l, z)| {
                if z.layer() != l {
                    return Err(invalid(format!("intrinsic vector {l} is tagged layer {}", z.layer())));
                }
                compose_prompt(&self.initial[l], &project(&self.projections[l], z)?)
            })
            .collect()
    }
}
