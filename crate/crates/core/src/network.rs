//! Full N-dimensional low-rank network.
//!
//! The connectivity `W = (1/N) Σ_j u_j v_jᵀ` is never formed: the recurrent
//! drive is computed as `u_j · ((1/N) v_jᵀ φ(h))`, which costs `O(rN)` per
//! step.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::effective::SimConfig;
use crate::linalg::psd_factor;
use crate::overlap::{OverlapState, Pair, Variant};
use crate::rng::{stream, TAG_INIT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Erf,
}

impl Activation {
    pub fn for_variant(variant: Variant) -> Self {
        if variant.is_linear() {
            Activation::Identity
        } else {
            Activation::Erf
        }
    }

    #[inline]
    pub fn apply(self, h: f64, alpha: f64) -> f64 {
        match self {
            Activation::Identity => h,
            Activation::Erf => libm::erf(alpha * h),
        }
    }

    #[inline]
    pub fn derivative(self, h: f64, alpha: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Erf => {
                let c = 2.0 / std::f64::consts::PI.sqrt();
                c * alpha * (-(alpha * h) * (alpha * h)).exp()
            }
        }
    }
}

/// The trainable vectors `m, u_1..u_r, v_1..v_r, z`, stored contiguously in
/// that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVectors {
    n: usize,
    rank: usize,
    data: Vec<f64>,
}

impl ParameterVectors {
    pub fn zeros(n: usize, rank: usize) -> Result<Self> {
        if !(rank == 1 || rank == 2) {
            return Err(Error::InvalidConfig(format!("rank must be 1 or 2, got {rank}")));
        }
        if n == 0 {
            return Err(Error::Dimension("n must be positive".into()));
        }
        Ok(Self { n, rank, data: vec![0.0; (2 * rank + 2) * n] })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let rank = match vectors.len() {
            4 => 1,
            6 => 2,
            k => return Err(Error::Dimension(format!("expected 4 or 6 vectors, got {k}"))),
        };
        let n = vectors[0].len();
        if vectors.iter().any(|v| v.len() != n) {
            return Err(Error::Dimension("all vectors must have the same length".into()));
        }
        let data: Vec<f64> = vectors.concat();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "parameter vector", step: 0 });
        }
        let mut p = Self::zeros(n, rank)?;
        p.data = data;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_vectors(&self) -> usize {
        2 * self.rank + 2
    }

    /// Stack entry `i` (0 = m, then u's, v's, z).
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn vector_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn m(&self) -> &[f64] {
        self.vector(0)
    }

    pub fn u(&self, j: usize) -> &[f64] {
        self.vector(1 + j)
    }

    pub fn v(&self, j: usize) -> &[f64] {
        self.vector(1 + self.rank + j)
    }

    pub fn z(&self) -> &[f64] {
        self.vector(2 * self.rank + 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParameterVectors) -> Result<()> {
        if self.n != other.n || self.rank != other.rank {
            return Err(Error::Dimension("parameter shapes differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Writes the binary container: `b"LR"`, version, rank, `n` as u32, then
    /// little-endian f64 in stack order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = u32::try_from(self.n).map_err(|_| std::io::Error::other("n exceeds u32"))?;
        w.write_all(b"LR")?;
        w.write_all(&[BINARY_VERSION, self.rank as u8])?;
        w.write_all(&n.to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::InvalidConfig(format!("parameter container: {e}"));
        let mut header = [0u8; 8];
        r.read_exact(&mut header).map_err(io)?;
        if &header[..2] != b"LR" || header[2] != BINARY_VERSION {
            return Err(Error::InvalidConfig("not a parameter container (bad magic or version)".into()));
        }
        let rank = header[3] as usize;
        let n = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
        let mut p = Self::zeros(n, rank)?;
        let mut buf = [0u8; 8];
        for x in p.data.iter_mut() {
            r.read_exact(&mut buf).map_err(io)?;
            *x = f64::from_le_bytes(buf);
        }
        Ok(p)
    }
}

pub const BINARY_VERSION: u8 = 1;

fn rank_of_matrix(k: usize) -> Result<usize> {
    match k {
        4 => Ok(1),
        6 => Ok(2),
        _ => Err(Error::Dimension(format!("overlap matrix must be 4x4 or 6x6, got {k}x{k}"))),
    }
}

/// Builds vectors whose overlap matrix equals `target` exactly.
///
/// Draws `2r+2` Gaussian vectors, orthonormalizes them under `(1/N)⟨·,·⟩`
/// and mixes them with a pivoted Cholesky factor of the target.
pub fn sample_prescribed(target: &DMatrix<f64>, n: usize, seed: u64) -> Result<ParameterVectors> {
    let k = target.nrows();
    if target.ncols() != k {
        return Err(Error::Dimension("target must be square".into()));
    }
    let rank = rank_of_matrix(k)?;
    if n < k {
        return Err(Error::Dimension(format!("need n >= {k} neurons, got {n}")));
    }
    if (target - target.transpose()).amax() > 1e-12 * target.amax().max(1.0) {
        return Err(Error::NotPsd { min_pivot: f64::NAN });
    }
    let (f, _) = psd_factor(target)?;
    let mut rng = stream(seed, &[TAG_INIT, 1]);
    let scale = (n as f64).sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // Modified Gram-Schmidt, twice for stability.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&q, b) / (n as f64);
                q.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = (dot(&q, &q)).sqrt();
        if norm < 1e-8 * scale {
            continue;
        }
        q.iter_mut().for_each(|x| *x *= scale / norm);
        basis.push(q);
    }
    let mut p = ParameterVectors::zeros(n, rank)?;
    for i in 0..k {
        let out = p.vector_mut(i);
        for (j, b) in basis.iter().enumerate() {
            let c = f[(i, j)];
            if c != 0.0 {
                out.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
            }
        }
    }
    Ok(p)
}

/// All components i.i.d. standard normal.
pub fn sample_iid(rank: usize, n: usize, seed: u64) -> Result<ParameterVectors> {
    let mut p = ParameterVectors::zeros(n, rank)?;
    let mut rng = stream(seed, &[TAG_INIT, 2]);
    p.data.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
    Ok(p)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four running sums let the compiler vectorize; the order is fixed.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Full `(2r+2)×(2r+2)` matrix of scaled inner products.
pub fn overlap_matrix(params: &ParameterVectors) -> DMatrix<f64> {
    let k = params.n_vectors();
    let inv_n = 1.0 / params.n as f64;
    let mut s = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(params.vector(i), params.vector(j)) * inv_n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn check_variant(params: &ParameterVectors, variant: Variant) -> Result<()> {
    if params.rank != variant.rank() {
        return Err(Error::Dimension(format!("{variant:?} needs rank {}, params have rank {}", variant.rank(), params.rank)));
    }
    Ok(())
}

pub fn extract_overlaps(params: &ParameterVectors, variant: Variant) -> Result<OverlapState> {
    check_variant(params, variant)?;
    OverlapState::from_matrix(variant, &overlap_matrix(params))
}

/// Jacobian of the overlaps listed in `pairs` with respect to the flattened
/// stack (column `i·N + c` is component `c` of stack entry `i`).
pub fn jacobian_pairs(params: &ParameterVectors, pairs: &[Pair]) -> DMatrix<f64> {
    let n = params.n;
    let inv_n = 1.0 / n as f64;
    let mut d = DMatrix::zeros(pairs.len(), params.n_vectors() * n);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        for c in 0..n {
            d[(row, i * n + c)] += params.vector(j)[c] * inv_n;
            d[(row, j * n + c)] += params.vector(i)[c] * inv_n;
        }
    }
    d
}

pub fn jacobian_visible(params: &ParameterVectors, variant: Variant) -> Result<DMatrix<f64>> {
    check_variant(params, variant)?;
    Ok(jacobian_pairs(params, variant.visible_pairs()))
}

pub fn jacobian_invisible(params: &ParameterVectors, variant: Variant) -> Result<DMatrix<f64>> {
    check_variant(params, variant)?;
    Ok(jacobian_pairs(params, variant.invisible_pairs()))
}

/// 10×4N Jacobian of every quadratic scalar of a rank-1 network, ordered
/// (zm, zu, vm, vu, mu, zv, mm, uu, vv, zz).
pub fn jacobian_augmented(params: &ParameterVectors) -> Result<DMatrix<f64>> {
    check_variant(params, Variant::LinearRank1)?;
    let pairs: Vec<Pair> = Variant::LinearRank1
        .visible_pairs()
        .iter()
        .chain(Variant::LinearRank1.invisible_pairs())
        .copied()
        .collect();
    Ok(jacobian_pairs(params, &pairs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullTrajectory {
    /// Stored hidden states `h_0, h_s, h_2s, ...` with `s = store_every`.
    pub h: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Forward Euler of `ḣ = −h + Σ_j u_j (1/N) v_jᵀ φ(h) + m x`,
/// `ŷ = (1/N) zᵀ φ(h)`, from `h_0 = 0`. Output sample `k` is read from
/// `h_{k+1}`.
pub fn simulate(
    params: &ParameterVectors,
    activation: Activation,
    input: &[f64],
    cfg: &SimConfig,
) -> Result<FullTrajectory> {
    cfg.validate()?;
    cfg.check_input(input)?;
    let n = params.n;
    let inv_n = 1.0 / n as f64;
    let alpha = cfg.activation_alpha;
    let mut h = vec![0.0; n];
    let mut phi = vec![0.0; n];
    let mut hs = vec![h.clone()];
    let mut output = Vec::with_capacity(input.len());
    let mut coeff = vec![0.0; params.rank];
    let decay = 1.0 - cfg.dt;
    for (k, &x) in input.iter().enumerate() {
        phi.iter_mut().zip(&h).for_each(|(p, &hi)| *p = activation.apply(hi, alpha));
        for (j, c) in coeff.iter_mut().enumerate() {
            *c = dot(params.v(j), &phi) * inv_n;
        }
        let m = params.m();
        h.iter_mut().zip(m).for_each(|(hi, mi)| *hi = decay * *hi + cfg.dt * mi * x);
        for (j, c) in coeff.iter().enumerate() {
            let c = cfg.dt * c;
            h.iter_mut().zip(params.u(j)).for_each(|(hi, ui)| *hi += c * ui);
        }
        phi.iter_mut().zip(&h).for_each(|(p, &hi)| *p = activation.apply(hi, alpha));
        let y = dot(params.z(), &phi) * inv_n;
        if !y.is_finite() {
            return Err(Error::NonFinite { what: "network output", step: k });
        }
        output.push(y);
        if (k + 1) % cfg.store_every == 0 {
            hs.push(h.clone());
        }
    }
    Ok(FullTrajectory { h: hs, output })
}

/// Pearson correlation of each vector's Q–Q plot against the standard
/// normal, using probability points `(k − 0.5)/N`.
pub fn gaussianity_qq(params: &ParameterVectors) -> Result<Vec<f64>> {
    let n = params.n;
    if n < 10 {
        return Err(Error::InsufficientSamples(format!("Q-Q needs at least 10 components, got {n}")));
    }
    let normal = Normal::standard();
    let quantiles: Vec<f64> = (1..=n).map(|k| normal.inverse_cdf((k as f64 - 0.5) / n as f64)).collect();
    (0..params.n_vectors())
        .map(|i| {
            let mut x = params.vector(i).to_vec();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if !(var > 1e-300) {
                return Err(Error::InsufficientSamples(format!("vector {i} has zero variance")));
            }
            let sd = var.sqrt();
            x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            x.sort_by(f64::total_cmp);
            Ok(pearson(&x, &quantiles))
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
