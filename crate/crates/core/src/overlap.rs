//! Overlap-space description of a low-rank network.
//!
//! The trainable vectors of a rank-`r` network are stacked in the fixed order
//! `m, u_1..u_r, v_1..v_r, z` (index `0..2r+2`). Every overlap is the scaled
//! inner product `(1/N) a_iᵀ a_j` of one pair of stack entries, so each
//! variant is fully described by two lists of index pairs: the loss-visible
//! overlaps and the loss-invisible ones. Together they cover every entry of
//! the symmetric `(2r+2)×(2r+2)` overlap matrix exactly once.
//!
//! Gram matrices are returned at unit scale unless a network size is given;
//! `gram_visible(s, n)` is `D·Dᵀ` for a network of `n` neurons, i.e. the unit
//! matrix divided by `n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{min_symmetric_eigenvalue, psd_factor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LinearRank1,
    NonlinearRank1,
    LinearRank2,
}

/// Index pair into the vector stack.
pub type Pair = (usize, usize);

// Rank-1 stack: m=0, u=1, v=2, z=3.
const R1_LINEAR_VISIBLE: [Pair; 4] = [(3, 0), (3, 1), (2, 0), (2, 1)];
const R1_LINEAR_INVISIBLE: [Pair; 6] = [(0, 1), (3, 2), (0, 0), (1, 1), (2, 2), (3, 3)];
const R1_NONLINEAR_VISIBLE: [Pair; 7] = [(3, 0), (3, 1), (2, 0), (2, 1), (0, 1), (0, 0), (1, 1)];
const R1_NONLINEAR_INVISIBLE: [Pair; 3] = [(3, 2), (2, 2), (3, 3)];

// Rank-2 stack: m=0, u1=1, u2=2, v1=3, v2=4, z=5.
const R2_VISIBLE: [Pair; 9] = [
    (5, 0),
    (5, 1),
    (5, 2),
    (3, 0),
    (4, 0),
    (3, 1),
    (3, 2),
    (4, 1),
    (4, 2),
];
const R2_INVISIBLE: [Pair; 12] = [
    (0, 1),
    (0, 2),
    (5, 3),
    (5, 4),
    (1, 2),
    (3, 4),
    (0, 0),
    (1, 1),
    (2, 2),
    (3, 3),
    (4, 4),
    (5, 5),
];

const R1_LINEAR_VISIBLE_NAMES: [&str; 4] = ["zm", "zu", "vm", "vu"];
const R1_LINEAR_INVISIBLE_NAMES: [&str; 6] = ["mu", "zv", "mm", "uu", "vv", "zz"];
const R1_NONLINEAR_VISIBLE_NAMES: [&str; 7] = ["zm", "zu", "vm", "vu", "mu", "mm", "uu"];
const R1_NONLINEAR_INVISIBLE_NAMES: [&str; 3] = ["zv", "vv", "zz"];
const R2_VISIBLE_NAMES: [&str; 9] = [
    "zm", "zu1", "zu2", "v1m", "v2m", "v1u1", "v1u2", "v2u1", "v2u2",
];
const R2_INVISIBLE_NAMES: [&str; 12] = [
    "mu1", "mu2", "zv1", "zv2", "u1u2", "v1v2", "mm", "u1u1", "u2u2", "v1v1", "v2v2", "zz",
];

impl Variant {
    pub fn rank(self) -> usize {
        match self {
            Variant::LinearRank1 | Variant::NonlinearRank1 => 1,
            Variant::LinearRank2 => 2,
        }
    }

    /// Number of stacked parameter vectors, `2r + 2`.
    pub fn n_vectors(self) -> usize {
        2 * self.rank() + 2
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, Variant::NonlinearRank1)
    }

    pub fn visible_pairs(self) -> &'static [Pair] {
        match self {
            Variant::LinearRank1 => &R1_LINEAR_VISIBLE,
            Variant::NonlinearRank1 => &R1_NONLINEAR_VISIBLE,
            Variant::LinearRank2 => &R2_VISIBLE,
        }
    }

    pub fn invisible_pairs(self) -> &'static [Pair] {
        match self {
            Variant::LinearRank1 => &R1_LINEAR_INVISIBLE,
            Variant::NonlinearRank1 => &R1_NONLINEAR_INVISIBLE,
            Variant::LinearRank2 => &R2_INVISIBLE,
        }
    }

    pub fn visible_names(self) -> &'static [&'static str] {
        match self {
            Variant::LinearRank1 => &R1_LINEAR_VISIBLE_NAMES,
            Variant::NonlinearRank1 => &R1_NONLINEAR_VISIBLE_NAMES,
            Variant::LinearRank2 => &R2_VISIBLE_NAMES,
        }
    }

    pub fn invisible_names(self) -> &'static [&'static str] {
        match self {
            Variant::LinearRank1 => &R1_LINEAR_INVISIBLE_NAMES,
            Variant::NonlinearRank1 => &R1_NONLINEAR_INVISIBLE_NAMES,
            Variant::LinearRank2 => &R2_INVISIBLE_NAMES,
        }
    }

    pub fn n_visible(self) -> usize {
        self.visible_pairs().len()
    }

    pub fn n_invisible(self) -> usize {
        self.invisible_pairs().len()
    }

    /// Canonical column names: visible then invisible.
    pub fn names(self) -> impl Iterator<Item = &'static str> {
        self.visible_names().iter().chain(self.invisible_names()).copied()
    }

    fn check(self, other: Variant) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::VariantMismatch { expected: self, found: other })
        }
    }
}

/// Scalar macroscopic state: visible and invisible overlaps in the canonical
/// per-variant order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapState {
    pub variant: Variant,
    pub visible: Vec<f64>,
    pub invisible: Vec<f64>,
}

impl OverlapState {
    pub fn new(variant: Variant, visible: Vec<f64>, invisible: Vec<f64>) -> Result<Self> {
        if visible.len() != variant.n_visible() || invisible.len() != variant.n_invisible() {
            return Err(Error::Dimension(format!(
                "{:?} expects {}+{} overlaps, got {}+{}",
                variant,
                variant.n_visible(),
                variant.n_invisible(),
                visible.len(),
                invisible.len()
            )));
        }
        Ok(Self { variant, visible, invisible })
    }

    pub fn zeros(variant: Variant) -> Self {
        Self {
            variant,
            visible: vec![0.0; variant.n_visible()],
            invisible: vec![0.0; variant.n_invisible()],
        }
    }

    /// Reads every overlap off a full symmetric overlap matrix.
    pub fn from_matrix(variant: Variant, s: &DMatrix<f64>) -> Result<Self> {
        let k = variant.n_vectors();
        if s.nrows() != k || s.ncols() != k {
            return Err(Error::Dimension(format!(
                "{:?} needs a {k}x{k} overlap matrix, got {}x{}",
                variant,
                s.nrows(),
                s.ncols()
            )));
        }
        let read = |pairs: &[Pair]| pairs.iter().map(|&(i, j)| s[(i, j)]).collect();
        Ok(Self { variant, visible: read(variant.visible_pairs()), invisible: read(variant.invisible_pairs()) })
    }

    /// Assembles the full symmetric overlap matrix of the vector stack.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let k = self.variant.n_vectors();
        let mut s = DMatrix::zeros(k, k);
        for (&(i, j), &x) in self.pairs().zip(self.values()) {
            s[(i, j)] = x;
            s[(j, i)] = x;
        }
        s
    }

    fn pairs(&self) -> impl Iterator<Item = &'static Pair> {
        self.variant.visible_pairs().iter().chain(self.variant.invisible_pairs())
    }

    /// Visible then invisible values.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.visible.iter().chain(&self.invisible)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.variant.names().zip(self.values()).find(|(n, _)| *n == name).map(|(_, &v)| v)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Smallest eigenvalue of the full overlap matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        min_symmetric_eigenvalue(&self.to_matrix())
    }

    /// Advisory PSD check used during ODE evolution: smallest eigenvalue
    /// at least `-1e-8 · trace`.
    pub fn is_advisory_psd(&self) -> bool {
        let s = self.to_matrix();
        self.min_eigenvalue() >= -1e-8 * s.trace().abs().max(1e-300)
    }

    /// Strict check used when the state is built from data: the overlap
    /// matrix must admit a (possibly rank-deficient) Cholesky factor.
    pub fn check_realizable(&self) -> Result<()> {
        psd_factor(&self.to_matrix()).map(|_| ())
    }

    /// Embeds a linear rank-1 state into rank 2 with `u2 = v2 = 0`.
    pub fn embed_rank2(&self) -> Result<Self> {
        Variant::LinearRank1.check(self.variant)?;
        let s1 = self.to_matrix();
        // rank-1 index -> rank-2 index
        let map = [0usize, 1, 3, 5];
        let mut s2 = DMatrix::zeros(6, 6);
        for a in 0..4 {
            for b in 0..4 {
                s2[(map[a], map[b])] = s1[(a, b)];
            }
        }
        Self::from_matrix(Variant::LinearRank2, &s2)
    }

    /// Re-partitions the same ten rank-1 overlaps under another rank-1
    /// variant (linear <-> nonlinear).
    pub fn reinterpret(&self, variant: Variant) -> Result<Self> {
        if variant.n_vectors() != self.variant.n_vectors() {
            return Err(Error::VariantMismatch { expected: variant, found: self.variant });
        }
        Self::from_matrix(variant, &self.to_matrix())
    }

    pub fn scaled_add(&self, alpha: f64, other: &OverlapState) -> Result<Self> {
        self.variant.check(other.variant)?;
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect();
        Ok(Self {
            variant: self.variant,
            visible: add(&self.visible, &other.visible),
            invisible: add(&self.invisible, &other.invisible),
        })
    }
}

/// ∂L/∂σ over the loss-visible overlaps of a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub variant: Variant,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn new(variant: Variant, values: Vec<f64>) -> Result<Self> {
        if values.len() != variant.n_visible() {
            return Err(Error::Dimension(format!(
                "{:?} gradient has {} entries, got {}",
                variant,
                variant.n_visible(),
                values.len()
            )));
        }
        if let Some(step) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "overlap gradient", step });
        }
        Ok(Self { variant, values })
    }

    pub fn zeros(variant: Variant) -> Self {
        Self { variant, values: vec![0.0; variant.n_visible()] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Gradient matrix `J` of the linear rank-1 model, rows (z, v) and
    /// columns (m, u).
    pub fn as_matrix_r1(&self) -> Result<[[f64; 2]; 2]> {
        Variant::LinearRank1.check(self.variant)?;
        let g = &self.values;
        Ok([[g[0], g[1]], [g[2], g[3]]])
    }
}

/// Gram entry between overlaps `p = (i, j)` and `q = (k, l)` at unit scale:
/// the inner product of their parameter gradients (times N).
fn pair_gram_entry(s: &DMatrix<f64>, p: Pair, q: Pair) -> f64 {
    let (i, j) = p;
    let (k, l) = q;
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    d(i, k) * s[(j, l)] + d(i, l) * s[(j, k)] + d(j, k) * s[(i, l)] + d(j, l) * s[(i, k)]
}

/// Gram block between two overlap lists, assembled entrywise from the
/// overlap matrix. Unit scale.
pub fn pair_gram(state: &OverlapState, rows: &[Pair], cols: &[Pair]) -> DMatrix<f64> {
    let s = state.to_matrix();
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| pair_gram_entry(&s, rows[a], cols[b]))
}

fn scale_for(n: f64) -> f64 {
    if n > 0.0 {
        1.0 / n
    } else {
        1.0
    }
}

/// Loss-visible Gram matrix `G = D·Dᵀ` for a network of `n` neurons
/// (pass `n = 1.0` for the unit-scale matrix).
pub fn gram_visible(state: &OverlapState, n: f64) -> DMatrix<f64> {
    let g = match state.variant {
        Variant::LinearRank1 => gram_visible_linear_r1(state),
        Variant::NonlinearRank1 => gram_visible_nonlinear_r1(state),
        Variant::LinearRank2 => {
            pair_gram(state, Variant::LinearRank2.visible_pairs(), Variant::LinearRank2.visible_pairs())
        }
    };
    g * scale_for(n)
}

/// Loss-invisible Gram matrix `G̃ = D̃·Dᵀ` (invisible rows, visible columns).
pub fn gram_invisible(state: &OverlapState, n: f64) -> DMatrix<f64> {
    let g = match state.variant {
        Variant::LinearRank1 => gram_invisible_linear_r1(state),
        Variant::NonlinearRank1 => gram_invisible_nonlinear_r1(state),
        Variant::LinearRank2 => {
            pair_gram(state, Variant::LinearRank2.invisible_pairs(), Variant::LinearRank2.visible_pairs())
        }
    };
    g * scale_for(n)
}

struct R1 {
    zm: f64,
    zu: f64,
    vm: f64,
    vu: f64,
    mu: f64,
    zv: f64,
    mm: f64,
    uu: f64,
    vv: f64,
    zz: f64,
}

impl R1 {
    fn of(state: &OverlapState) -> R1 {
        let s = state.to_matrix();
        R1 {
            zm: s[(3, 0)],
            zu: s[(3, 1)],
            vm: s[(2, 0)],
            vu: s[(2, 1)],
            mu: s[(0, 1)],
            zv: s[(3, 2)],
            mm: s[(0, 0)],
            uu: s[(1, 1)],
            vv: s[(2, 2)],
            zz: s[(3, 3)],
        }
    }
}

#[rustfmt::skip]
fn gram_visible_linear_r1(state: &OverlapState) -> DMatrix<f64> {
    let R1 { mu, zv, mm, uu, vv, zz, .. } = R1::of(state);
    DMatrix::from_row_slice(4, 4, &[
        mm + zz, mu,      zv,      0.0,
        mu,      uu + zz, 0.0,     zv,
        zv,      0.0,     mm + vv, mu,
        0.0,     zv,      mu,      uu + vv,
    ])
}

#[rustfmt::skip]
fn gram_invisible_linear_r1(state: &OverlapState) -> DMatrix<f64> {
    let R1 { zm, zu, vm, vu, .. } = R1::of(state);
    DMatrix::from_row_slice(6, 4, &[
        zu,       zm,       vu,       vm,
        vm,       vu,       zm,       zu,
        2.0 * zm, 0.0,      2.0 * vm, 0.0,
        0.0,      2.0 * zu, 0.0,      2.0 * vu,
        0.0,      0.0,      2.0 * vm, 2.0 * vu,
        2.0 * zm, 2.0 * zu, 0.0,      0.0,
    ])
}

#[rustfmt::skip]
fn gram_visible_nonlinear_r1(state: &OverlapState) -> DMatrix<f64> {
    let R1 { zm, zu, vm, vu, mu, zv, mm, uu, vv, zz } = R1::of(state);
    DMatrix::from_row_slice(7, 7, &[
        mm + zz,  mu,       zv,       0.0,      zu,       2.0 * zm, 0.0,
        mu,       uu + zz,  0.0,      zv,       zm,       0.0,      2.0 * zu,
        zv,       0.0,      mm + vv,  mu,       vu,       2.0 * vm, 0.0,
        0.0,      zv,       mu,       uu + vv,  vm,       0.0,      2.0 * vu,
        zu,       zm,       vu,       vm,       mm + uu,  2.0 * mu, 2.0 * mu,
        2.0 * zm, 0.0,      2.0 * vm, 0.0,      2.0 * mu, 4.0 * mm, 0.0,
        0.0,      2.0 * zu, 0.0,      2.0 * vu, 2.0 * mu, 0.0,      4.0 * uu,
    ])
}

#[rustfmt::skip]
fn gram_invisible_nonlinear_r1(state: &OverlapState) -> DMatrix<f64> {
    let R1 { zm, zu, vm, vu, .. } = R1::of(state);
    DMatrix::from_row_slice(3, 7, &[
        vm,       vu,       zm,       zu,       0.0, 0.0, 0.0,
        0.0,      0.0,      2.0 * vm, 2.0 * vu, 0.0, 0.0, 0.0,
        2.0 * zm, 2.0 * zu, 0.0,      0.0,      0.0, 0.0, 0.0,
    ])
}

/// Augmented 10×10 Gram matrix over all quadratic scalars of a rank-1
/// network, ordered (zm, zu, vm, vu, mu, zv, mm, uu, vv, zz).
#[rustfmt::skip]
pub fn gram_augmented(state: &OverlapState, n: f64) -> Result<DMatrix<f64>> {
    Variant::LinearRank1.check(state.variant)?;
    let R1 { zm, zu, vm, vu, mu, zv, mm, uu, vv, zz } = R1::of(state);
    let g = DMatrix::from_row_slice(10, 10, &[
        zz + mm,  mu,       zv,       0.0,      zu,       vm,       2.0 * zm, 0.0,      0.0,      2.0 * zm,
        mu,       zz + uu,  0.0,      zv,       zm,       vu,       0.0,      2.0 * zu, 0.0,      2.0 * zu,
        zv,       0.0,      vv + mm,  mu,       vu,       zm,       2.0 * vm, 0.0,      2.0 * vm, 0.0,
        0.0,      zv,       mu,       vv + uu,  vm,       zu,       0.0,      2.0 * vu, 2.0 * vu, 0.0,
        zu,       zm,       vu,       vm,       mm + uu,  0.0,      2.0 * mu, 2.0 * mu, 0.0,      0.0,
        vm,       vu,       zm,       zu,       0.0,      zz + vv,  0.0,      0.0,      2.0 * zv, 2.0 * zv,
        2.0 * zm, 0.0,      2.0 * vm, 0.0,      2.0 * mu, 0.0,      4.0 * mm, 0.0,      0.0,      0.0,
        0.0,      2.0 * zu, 0.0,      2.0 * vu, 2.0 * mu, 0.0,      0.0,      4.0 * uu, 0.0,      0.0,
        0.0,      0.0,      2.0 * vm, 2.0 * vu, 0.0,      2.0 * zv, 0.0,      0.0,      4.0 * vv, 0.0,
        2.0 * zm, 2.0 * zu, 0.0,      0.0,      0.0,      2.0 * zv, 0.0,      0.0,      0.0,      4.0 * zz,
    ]);
    Ok(g * scale_for(n))
}

/// Overlap velocity `(−G·∇, −G̃·∇)` at unit scale, returned in the layout of
/// an [`OverlapState`]. Multiply by `1/N` for the per-parameter-step rate of
/// a network trained with an unscaled learning rate.
pub fn flow_rhs(state: &OverlapState, grad: &GradientVector) -> Result<OverlapState> {
    state.variant.check(grad.variant)?;
    match state.variant {
        Variant::LinearRank1 | Variant::NonlinearRank1 => {
            let g = nalgebra::DVector::from_column_slice(&grad.values);
            let vis = -(gram_visible(state, 1.0) * &g);
            let inv = -(gram_invisible(state, 1.0) * &g);
            OverlapState::new(state.variant, vis.as_slice().to_vec(), inv.as_slice().to_vec())
        }
        Variant::LinearRank2 => Ok(flow_rhs_rank2(state, grad)),
    }
}

struct R2 {
    zm: f64,
    mm: f64,
    zz: f64,
    zu: [f64; 2],
    vm: [f64; 2],
    mu: [f64; 2],
    zv: [f64; 2],
    // vu[i][j] = σ(v_i, u_j); uu and vv include the squared norms on the diagonal.
    vu: [[f64; 2]; 2],
    uu: [[f64; 2]; 2],
    vv: [[f64; 2]; 2],
}

impl R2 {
    fn of(state: &OverlapState) -> R2 {
        let s = state.to_matrix();
        let (m, u, v, z) = (0, [1, 2], [3, 4], 5);
        R2 {
            zm: s[(z, m)],
            mm: s[(m, m)],
            zz: s[(z, z)],
            zu: [s[(z, u[0])], s[(z, u[1])]],
            vm: [s[(v[0], m)], s[(v[1], m)]],
            mu: [s[(m, u[0])], s[(m, u[1])]],
            zv: [s[(z, v[0])], s[(z, v[1])]],
            vu: [[s[(v[0], u[0])], s[(v[0], u[1])]], [s[(v[1], u[0])], s[(v[1], u[1])]]],
            uu: [[s[(u[0], u[0])], s[(u[0], u[1])]], [s[(u[1], u[0])], s[(u[1], u[1])]]],
            vv: [[s[(v[0], v[0])], s[(v[0], v[1])]], [s[(v[1], v[0])], s[(v[1], v[1])]]],
        }
    }
}

/// Rank-2 learning equations written out scalar by scalar.
fn flow_rhs_rank2(state: &OverlapState, grad: &GradientVector) -> OverlapState {
    let R2 { zm, mm, zz, zu, vm, mu, zv, vu, uu, vv } = R2::of(state);
    let g = &grad.values;
    let gzm = g[0];
    let gzu = [g[1], g[2]];
    let gvm = [g[3], g[4]];
    let gvu = [[g[5], g[6]], [g[7], g[8]]];
    let two = [0usize, 1];

    let d_zm = -(mm + zz) * gzm
        - two.iter().map(|&j| mu[j] * gzu[j]).sum::<f64>()
        - two.iter().map(|&i| zv[i] * gvm[i]).sum::<f64>();
    let d_zu = |j: usize| {
        -mu[j] * gzm
            - two.iter().map(|&k| uu[j][k] * gzu[k]).sum::<f64>()
            - zz * gzu[j]
            - two.iter().map(|&i| zv[i] * gvu[i][j]).sum::<f64>()
    };
    let d_vm = |i: usize| {
        -zv[i] * gzm
            - two.iter().map(|&k| vv[i][k] * gvm[k]).sum::<f64>()
            - mm * gvm[i]
            - two.iter().map(|&j| mu[j] * gvu[i][j]).sum::<f64>()
    };
    let d_vu = |i: usize, j: usize| {
        -mu[j] * gvm[i]
            - zv[i] * gzu[j]
            - two.iter().map(|&k| vv[i][k] * gvu[k][j]).sum::<f64>()
            - two.iter().map(|&l| uu[j][l] * gvu[i][l]).sum::<f64>()
    };

    let d_mu = |j: usize| {
        -zu[j] * gzm
            - zm * gzu[j]
            - two.iter().map(|&i| vm[i] * gvu[i][j]).sum::<f64>()
            - two.iter().map(|&i| vu[i][j] * gvm[i]).sum::<f64>()
    };
    let d_zv = |i: usize| {
        -vm[i] * gzm
            - zm * gvm[i]
            - two.iter().map(|&j| zu[j] * gvu[i][j]).sum::<f64>()
            - two.iter().map(|&j| vu[i][j] * gzu[j]).sum::<f64>()
    };
    let d_u1u2 = -(zu[0] * gzu[1] + zu[1] * gzu[0])
        - two.iter().map(|&i| vu[i][0] * gvu[i][1] + vu[i][1] * gvu[i][0]).sum::<f64>();
    let d_v1v2 = -(vm[0] * gvm[1] + vm[1] * gvm[0])
        - two.iter().map(|&j| vu[0][j] * gvu[1][j] + vu[1][j] * gvu[0][j]).sum::<f64>();
    let d_mm = -2.0 * (zm * gzm + two.iter().map(|&i| vm[i] * gvm[i]).sum::<f64>());
    let d_uu = |j: usize| -2.0 * (zu[j] * gzu[j] + two.iter().map(|&i| vu[i][j] * gvu[i][j]).sum::<f64>());
    let d_vv = |i: usize| -2.0 * (vm[i] * gvm[i] + two.iter().map(|&j| vu[i][j] * gvu[i][j]).sum::<f64>());
    let d_zz = -2.0 * (zm * gzm + two.iter().map(|&j| zu[j] * gzu[j]).sum::<f64>());

    OverlapState {
        variant: Variant::LinearRank2,
        visible: vec![
            d_zm,
            d_zu(0),
            d_zu(1),
            d_vm(0),
            d_vm(1),
            d_vu(0, 0),
            d_vu(0, 1),
            d_vu(1, 0),
            d_vu(1, 1),
        ],
        invisible: vec![
            d_mu(0),
            d_mu(1),
            d_zv(0),
            d_zv(1),
            d_u1u2,
            d_v1v2,
            d_mm,
            d_uu(0),
            d_uu(1),
            d_vv(0),
            d_vv(1),
            d_zz,
        ],
    }
}

/// Symmetric coefficient matrix `Γ` of one gradient step in vector space:
/// a step of size η maps the stack `a` to `(I − ηΓ) a` (unit scale).
pub fn gamma_matrix(grad: &GradientVector) -> DMatrix<f64> {
    let k = grad.variant.n_vectors();
    let mut gamma = DMatrix::zeros(k, k);
    for (&(i, j), &g) in grad.variant.visible_pairs().iter().zip(&grad.values) {
        gamma[(i, j)] += g;
        gamma[(j, i)] += g;
    }
    gamma
}

/// One explicit Euler step of the overlap learning ODE.
pub fn euler_step(state: &OverlapState, grad: &GradientVector, eta: f64) -> Result<OverlapState> {
    let rhs = flow_rhs(state, grad)?;
    state.scaled_add(eta, &rhs)
}

/// Exact overlap-space image of one discrete gradient step.
///
/// A gradient step replaces every parameter vector by a linear combination of
/// the current ones, `a ← (I − ηΓ) a`, so the overlap matrix evolves in closed
/// form as `S ← M S Mᵀ` with `M = I − ηΓ`. To first order in η this is the
/// Euler step of [`flow_rhs`]; the second-order remainder is what separates
/// discrete gradient descent from gradient flow.
pub fn lift_step(state: &OverlapState, grad: &GradientVector, eta: f64) -> Result<OverlapState> {
    state.variant.check(grad.variant)?;
    let k = state.variant.n_vectors();
    let m = DMatrix::<f64>::identity(k, k) - gamma_matrix(grad) * eta;
    let s = state.to_matrix();
    let next = &m * s * m.transpose();
    OverlapState::from_matrix(state.variant, &next)
}

/// Direct descent on the visible overlaps with identity metric.
pub fn naive_step(state: &OverlapState, grad: &GradientVector, eta: f64) -> Result<OverlapState> {
    state.variant.check(grad.variant)?;
    let mut next = state.clone();
    for (s, g) in next.visible.iter_mut().zip(&grad.values) {
        *s -= eta * g;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_state(variant: Variant, seed: u64) -> OverlapState {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[99]);
        let k = variant.n_vectors();
        let n = 12;
        let x = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        OverlapState::from_matrix(variant, &(&x * x.transpose() / n as f64)).unwrap()
    }

    #[test]
    fn partitions_cover_every_entry_once() {
        for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
            let k = v.n_vectors();
            let mut seen = vec![0; k * k];
            for &(i, j) in v.visible_pairs().iter().chain(v.invisible_pairs()) {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                seen[a * k + b] += 1;
            }
            for a in 0..k {
                for b in a..k {
                    assert_eq!(seen[a * k + b], 1, "{v:?} entry ({a},{b})");
                }
            }
        }
        assert_eq!((Variant::LinearRank1.n_visible(), Variant::LinearRank1.n_invisible()), (4, 6));
        assert_eq!((Variant::NonlinearRank1.n_visible(), Variant::NonlinearRank1.n_invisible()), (7, 3));
        assert_eq!((Variant::LinearRank2.n_visible(), Variant::LinearRank2.n_invisible()), (9, 12));
    }

    #[test]
    fn zero_state_gives_zero_grams() {
        let s = OverlapState::zeros(Variant::LinearRank1);
        assert_eq!(gram_visible(&s, 1.0).amax(), 0.0);
        assert_eq!(gram_augmented(&s, 1.0).unwrap().amax(), 0.0);
    }

    #[test]
    fn invisible_gram_vanishes_without_visible_overlaps() {
        let mut s = random_state(Variant::LinearRank1, 3);
        s.visible.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(gram_invisible(&s, 1.0).amax(), 0.0);
    }

    #[test]
    fn invisible_gram_single_zm_pattern() {
        let n = 7.0;
        let mut s = OverlapState::zeros(Variant::LinearRank1);
        s.visible[0] = 1.0;
        let gt = gram_invisible(&s, n);
        let mut expected = DMatrix::zeros(6, 4);
        expected[(0, 1)] = 1.0 / n;
        expected[(1, 2)] = 1.0 / n;
        expected[(2, 0)] = 2.0 / n;
        expected[(5, 0)] = 2.0 / n;
        assert_eq!(gt, expected);
    }

    #[test]
    fn explicit_grams_match_pair_rule() {
        for v in [Variant::LinearRank1, Variant::NonlinearRank1] {
            let s = random_state(v, 11);
            let gv = pair_gram(&s, v.visible_pairs(), v.visible_pairs());
            let gi = pair_gram(&s, v.invisible_pairs(), v.visible_pairs());
            assert!((gram_visible(&s, 1.0) - gv).amax() < 1e-15);
            assert!((gram_invisible(&s, 1.0) - gi).amax() < 1e-15);
        }
        let s = random_state(Variant::LinearRank1, 12);
        let all: Vec<Pair> = R1_LINEAR_VISIBLE.iter().chain(&R1_LINEAR_INVISIBLE).copied().collect();
        let ga = pair_gram(&s, &all, &all);
        assert!((gram_augmented(&s, 1.0).unwrap() - ga).amax() < 1e-15);
    }

    #[test]
    fn augmented_blocks_embed_visible_and_invisible() {
        let s = random_state(Variant::LinearRank1, 5);
        let ga = gram_augmented(&s, 3.0).unwrap();
        assert_eq!(ga.view((0, 0), (4, 4)).clone_owned(), gram_visible(&s, 3.0));
        assert_eq!(ga.view((4, 0), (6, 4)).clone_owned(), gram_invisible(&s, 3.0));
        assert_eq!(ga, ga.transpose());
    }

    #[test]
    fn augmented_rejects_other_variants() {
        let s = OverlapState::zeros(Variant::NonlinearRank1);
        assert!(matches!(gram_augmented(&s, 1.0), Err(Error::VariantMismatch { .. })));
    }

    #[test]
    fn flow_rhs_unit_norm_example() {
        // Norms 1, cross-overlaps 0, gradient along zm only.
        let s = OverlapState::new(Variant::LinearRank1, vec![0.0; 4], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = GradientVector::new(Variant::LinearRank1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let n = 50.0;
        let rhs = flow_rhs(&s, &g).unwrap();
        let vis: Vec<f64> = rhs.visible.iter().map(|x| x / n).collect();
        assert_eq!(vis, vec![-2.0 / n, 0.0, 0.0, 0.0]);
        // Every invisible rate is proportional to a visible overlap, all zero here.
        assert!(rhs.invisible.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flow_rhs_zero_gradient_is_fixed_point() {
        for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
            let s = random_state(v, 1);
            let rhs = flow_rhs(&s, &GradientVector::zeros(v)).unwrap();
            assert!(rhs.values().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn flow_rhs_variant_mismatch() {
        let s = OverlapState::zeros(Variant::LinearRank1);
        let g = GradientVector::zeros(Variant::NonlinearRank1);
        assert!(matches!(flow_rhs(&s, &g), Err(Error::VariantMismatch { .. })));
    }

    #[test]
    fn rank2_scalar_equations_match_matrix_form() {
        for seed in 0..20 {
            let s = random_state(Variant::LinearRank2, seed);
            let mut rng = crate::rng::stream(seed, &[7]);
            use rand::Rng;
            let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grad = GradientVector::new(Variant::LinearRank2, g.clone()).unwrap();
            let rhs = flow_rhs(&s, &grad).unwrap();
            let gv = nalgebra::DVector::from_vec(g);
            let vis = -(gram_visible(&s, 1.0) * &gv);
            let inv = -(gram_invisible(&s, 1.0) * &gv);
            for (a, b) in rhs.visible.iter().zip(vis.iter()).chain(rhs.invisible.iter().zip(inv.iter())) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn flow_rhs_is_first_order_part_of_lift() {
        // S' = (I − ηΓ) S (I − ηΓ) ⇒ dS/dη at 0 is −(ΓS + SΓ).
        for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
            let s = random_state(v, 21);
            let grad = GradientVector::new(v, (0..v.n_visible()).map(|i| 0.3 - 0.1 * i as f64).collect()).unwrap();
            let gamma = gamma_matrix(&grad);
            let sm = s.to_matrix();
            let tangent = -(&gamma * &sm + &sm * &gamma);
            let rhs = flow_rhs(&s, &grad).unwrap();
            let expected = OverlapState::from_matrix(v, &tangent).unwrap();
            for (a, b) in rhs.values().zip(expected.values()) {
                assert!((a - b).abs() < 1e-12);
            }
            let eta = 1e-4;
            let lifted = lift_step(&s, &grad, eta).unwrap();
            let euler = euler_step(&s, &grad, eta).unwrap();
            let gap = lifted.values().zip(euler.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 10.0 * eta * eta, "{gap}");
        }
    }

    #[test]
    fn embedding_and_reinterpretation() {
        let s = random_state(Variant::LinearRank1, 4);
        let e = s.embed_rank2().unwrap();
        assert_eq!(e.get("zm"), s.get("zm"));
        assert_eq!(e.get("v1u1"), s.get("vu"));
        assert_eq!(e.get("u2u2"), Some(0.0));
        let nl = s.reinterpret(Variant::NonlinearRank1).unwrap();
        assert_eq!(nl.get("mu"), s.get("mu"));
        assert_eq!(nl.reinterpret(Variant::LinearRank1).unwrap(), s);
    }

    proptest! {
        #[test]
        fn gram_visible_symmetric(seed in 0u64..1000) {
            for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
                let g = gram_visible(&random_state(v, seed), 1.0);
                prop_assert_eq!(&g, &g.transpose());
            }
        }

        #[test]
        fn flow_rhs_linear_in_gradient(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
                let s = random_state(v, seed);
                let g1: Vec<f64> = (0..v.n_visible()).map(|i| ((seed + i as u64) % 7) as f64 - 3.0).collect();
                let g2: Vec<f64> = (0..v.n_visible()).map(|i| ((seed * 3 + i as u64) % 5) as f64 - 2.0).collect();
                let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
                let r1 = flow_rhs(&s, &GradientVector::new(v, g1).unwrap()).unwrap();
                let r2 = flow_rhs(&s, &GradientVector::new(v, g2).unwrap()).unwrap();
                let rm = flow_rhs(&s, &GradientVector::new(v, mix).unwrap()).unwrap();
                for ((x, y), z) in r1.values().zip(r2.values()).zip(rm.values()) {
                    prop_assert!((a * x + b * y - z).abs() <= 1e-12 * (1.0 + z.abs()));
                }
            }
        }

        #[test]
        fn descent_direction_on_realizable_states(seed in 0u64..1000) {
            for v in [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2] {
                let s = random_state(v, seed);
                let g = nalgebra::DVector::from_fn(v.n_visible(), |i, _| (i as f64 * 0.7 + seed as f64).sin());
                let q = g.dot(&(gram_visible(&s, 1.0) * &g));
                prop_assert!(q >= -1e-12);
            }
        }
    }
}
