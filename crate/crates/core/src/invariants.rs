//! Conserved quantities of gradient flow.
//!
//! For a linear network the matrix `K = zzᵀ + Σ_i v_i v_iᵀ − mmᵀ − Σ_j u_j u_jᵀ`
//! does not change under gradient flow. It has rank at most `2r+2`, so its
//! trace powers follow from the overlap matrix alone:
//! `Tr((K/N)^k) = Tr((diag(s)·S)^k)` with `s = −1` on m, u and `+1` on v, z.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::network::{overlap_matrix, ParameterVectors};
use crate::overlap::OverlapState;
use crate::{Error, Result};

/// Index pairs of the K entries logged by default.
pub const DEFAULT_K_SAMPLES: [(usize, usize); 3] = [(0, 1), (2, 5), (3, 7)];

fn signs(n_vectors: usize) -> Vec<f64> {
    let r = (n_vectors - 2) / 2;
    (0..n_vectors).map(|i| if i <= r { -1.0 } else { 1.0 }).collect()
}

/// `C_1..C_4` of the scaled matrix `K/N` from a full overlap matrix.
pub fn trace_invariants_matrix(s: &DMatrix<f64>) -> [f64; 4] {
    let sg = signs(s.nrows());
    let ds = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| sg[i] * s[(i, j)]);
    let mut power = ds.clone();
    let mut out = [0.0; 4];
    for c in out.iter_mut() {
        *c = power.trace();
        power = &power * &ds;
    }
    out
}

pub fn trace_invariants(state: &OverlapState) -> [f64; 4] {
    trace_invariants_matrix(&state.to_matrix())
}

pub fn trace_invariants_params(params: &ParameterVectors) -> [f64; 4] {
    trace_invariants_matrix(&overlap_matrix(params))
}

/// Closed form of `C_1` for rank 1.
pub fn c1_closed(state: &OverlapState) -> Option<f64> {
    Some(state.get("zz")? + state.get("vv")? - state.get("mm")? - state.get("uu")?)
}

/// Closed form of `C_2` for rank 1.
pub fn c2_closed(state: &OverlapState) -> Option<f64> {
    let g = |n: &str| state.get(n);
    let (zz, vv, mm, uu) = (g("zz")?, g("vv")?, g("mm")?, g("uu")?);
    let (zv, mu) = (g("zv")?, g("mu")?);
    let (zm, zu, vm, vu) = (g("zm")?, g("zu")?, g("vm")?, g("vu")?);
    Some(
        (zz * zz + vv * vv + 2.0 * zv * zv) + (mm * mm + uu * uu + 2.0 * mu * mu)
            - 2.0 * (zm * zm + zu * zu + vm * vm + vu * vu),
    )
}

/// Entry `(a, b)` of the unscaled `K`.
pub fn k_entry(params: &ParameterVectors, a: usize, b: usize) -> f64 {
    let sg = signs(params.n_vectors());
    (0..params.n_vectors()).map(|i| sg[i] * params.vector(i)[a] * params.vector(i)[b]).sum()
}

/// The explicit `N×N` matrix `K`. Refused for `N > 64`; use the trace
/// invariants and sampled entries instead.
pub fn compute_k(params: &ParameterVectors) -> Result<DMatrix<f64>> {
    let n = params.n();
    if n > 64 {
        return Err(Error::Unavailable(format!("explicit K is only formed for N <= 64, got {n}")));
    }
    Ok(DMatrix::from_fn(n, n, |a, b| k_entry(params, a, b)))
}

/// Filter-task balance diagnostics: `(σ_zu − σ_vm, σ_zu σ_vm − a*(1−c*))`.
pub fn balance_residuals(state: &OverlapState, a_star: f64, c_star: f64) -> Option<(f64, f64)> {
    let (zu, vm) = (state.get("zu")?, state.get("vm")?);
    Some((zu - vm, zu * vm - a_star * (1.0 - c_star)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantRecord {
    pub c: [f64; 4],
    /// Sampled entries of K (parameter-space runs only).
    pub k_samples: Option<Vec<f64>>,
    /// `‖z‖² − ‖m‖²`.
    pub norm_diff_zm: f64,
    /// `Σ‖v_i‖² − Σ‖u_j‖²`.
    pub norm_diff_vu: f64,
    pub balance: Option<(f64, f64)>,
}

impl InvariantRecord {
    pub fn from_state(state: &OverlapState, balance_target: Option<(f64, f64)>) -> Self {
        let s = state.to_matrix();
        let k = s.nrows();
        let r = (k - 2) / 2;
        let sum = |range: std::ops::Range<usize>| range.map(|i| s[(i, i)]).sum::<f64>();
        Self {
            c: trace_invariants_matrix(&s),
            k_samples: None,
            norm_diff_zm: s[(k - 1, k - 1)] - s[(0, 0)],
            norm_diff_vu: sum(1 + r..1 + 2 * r) - sum(1..1 + r),
            balance: balance_target
                .filter(|_| state.variant.rank() == 1)
                .and_then(|(a, c)| balance_residuals(state, a, c)),
        }
    }

    pub fn from_params(
        params: &ParameterVectors,
        state: &OverlapState,
        samples: &[(usize, usize)],
        balance_target: Option<(f64, f64)>,
    ) -> Self {
        let mut rec = Self::from_state(state, balance_target);
        let n = params.n();
        rec.k_samples = Some(
            samples.iter().filter(|&&(a, b)| a < n && b < n).map(|&(a, b)| k_entry(params, a, b)).collect(),
        );
        rec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `max_t |C_k(t) − C_k(0)| / (1 + |C_k(0)|)` for k = 1..4.
    pub c_drift: [f64; 4],
    /// `max_t |K_ab(t) − K_ab(0)| / (1 + |K_ab(0)|)` over the sampled entries.
    pub k_drift: Option<f64>,
    pub norm_diff_drift: [f64; 2],
}

impl DriftReport {
    pub fn max_c_drift(&self) -> f64 {
        self.c_drift.iter().copied().fold(0.0, f64::max)
    }

    /// Largest drift over the C's and sampled K entries; errors if K was not
    /// sampled.
    pub fn max_drift(&self) -> Result<f64> {
        let k = self.k_drift.ok_or_else(|| {
            Error::Unavailable("K entries need parameter checkpoints; overlap-space runs only carry C_k".into())
        })?;
        Ok(self.max_c_drift().max(k))
    }
}

/// Drift of every conserved quantity relative to the first record.
pub fn conservation_report(records: &[InvariantRecord]) -> Result<DriftReport> {
    let first = records.first().ok_or_else(|| Error::Unavailable("empty trace".into()))?;
    let rel = |x: f64, x0: f64| (x - x0).abs() / (1.0 + x0.abs());
    let mut c_drift = [0.0; 4];
    let mut norm_diff_drift = [0.0_f64; 2];
    let mut k_drift: Option<f64> = first.k_samples.as_ref().map(|_| 0.0);
    for rec in records {
        for i in 0..4 {
            c_drift[i] = f64::max(c_drift[i], rel(rec.c[i], first.c[i]));
        }
        norm_diff_drift[0] = norm_diff_drift[0].max(rel(rec.norm_diff_zm, first.norm_diff_zm));
        norm_diff_drift[1] = norm_diff_drift[1].max(rel(rec.norm_diff_vu, first.norm_diff_vu));
        k_drift = match (k_drift, &rec.k_samples, &first.k_samples) {
            (Some(d), Some(now), Some(start)) => {
                Some(now.iter().zip(start).map(|(a, b)| rel(*a, *b)).fold(d, f64::max))
            }
            _ => None,
        };
    }
    Ok(DriftReport { c_drift, k_drift, norm_diff_drift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{extract_overlaps, sample_iid, sample_prescribed};
    use crate::overlap::Variant;

    #[test]
    fn cancellation_gives_zero() {
        let p = sample_iid(1, 20, 0).unwrap();
        let (m, u) = (p.m().to_vec(), p.u(0).to_vec());
        let q = ParameterVectors::from_vectors(&[m.clone(), u.clone(), u, m]).unwrap();
        assert!(compute_k(&q).unwrap().amax() < 1e-14);
        assert!(trace_invariants_params(&q).iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn orthonormal_vectors() {
        let p = sample_prescribed(&DMatrix::identity(4, 4), 50, 2).unwrap();
        let s = extract_overlaps(&p, Variant::LinearRank1).unwrap();
        let c = trace_invariants(&s);
        assert!(c[0].abs() < 1e-10);
        // Unit norms, no cross overlaps: C_2 = 1 + 1 + 1 + 1.
        assert!((c2_closed(&s).unwrap() - 4.0).abs() < 1e-10);
        let k = compute_k(&p).unwrap() / 50.0;
        assert!(((&k * &k).trace() - c[1]).abs() < 1e-10);
    }

    #[test]
    fn reduction_matches_explicit_matrix() {
        for rank in [1, 2] {
            let p = sample_iid(rank, 50, 7).unwrap();
            let k = compute_k(&p).unwrap() / 50.0;
            let c = trace_invariants_params(&p);
            let mut power = k.clone();
            for ck in c {
                assert!((power.trace() - ck).abs() < 1e-10 * (1.0 + ck.abs()));
                power = &power * &k;
            }
            let nonzero = k.symmetric_eigen().eigenvalues.iter().filter(|e| e.abs() > 1e-9).count();
            assert!(nonzero <= 2 * rank + 2);
        }
    }

    #[test]
    fn closed_forms_match_reduction() {
        let p = sample_iid(1, 80, 3).unwrap();
        let s = extract_overlaps(&p, Variant::LinearRank1).unwrap();
        let c = trace_invariants(&s);
        assert!((c1_closed(&s).unwrap() - c[0]).abs() < 1e-12);
        assert!((c2_closed(&s).unwrap() - c[1]).abs() < 1e-12);
        let nl = s.reinterpret(Variant::NonlinearRank1).unwrap();
        assert!((c2_closed(&nl).unwrap() - c[1]).abs() < 1e-12);
    }

    #[test]
    fn explicit_k_refused_for_large_n() {
        assert!(matches!(compute_k(&sample_iid(1, 65, 0).unwrap()), Err(Error::Unavailable(_))));
    }

    #[test]
    fn drift_report() {
        let p = sample_iid(1, 30, 1).unwrap();
        let s = extract_overlaps(&p, Variant::LinearRank1).unwrap();
        let r0 = InvariantRecord::from_params(&p, &s, &DEFAULT_K_SAMPLES, Some((1.0, 0.2)));
        let mut r1 = r0.clone();
        r1.c[2] += 0.5 * (1.0 + r0.c[2].abs());
        let rep = conservation_report(&[r0.clone(), r1]).unwrap();
        assert!((rep.c_drift[2] - 0.5).abs() < 1e-12);
        assert_eq!(rep.k_drift, Some(0.0));
        let bare = InvariantRecord::from_state(&s, None);
        let rep = conservation_report(&[bare]).unwrap();
        assert!(matches!(rep.max_drift(), Err(Error::Unavailable(_))));
        assert!(conservation_report(&[]).is_err());
    }
}
