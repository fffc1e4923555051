//! Loss gradients with respect to the visible overlaps and the parameters.
//!
//! Three independent routes are provided: a closed form for the linear
//! filter task with impulse input, a discrete adjoint through the reduced
//! Euler recursion (any task, any variant) and a discrete adjoint through the
//! N-dimensional recursion. Central differences serve as the test oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective::{gain_derivative, gain_unchecked, SimConfig, KERNEL_SINGULARITY};
use crate::network::{dot, Activation, ParameterVectors};
use crate::overlap::{GradientVector, OverlapState, Variant};
use crate::tasks::{Episode, FilterTaskSpec, InputKind};
use crate::{Error, Result};

pub use crate::effective::KernelCoefficients;

/// Discretization used by [`filter_grad_closed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelScheme {
    /// Geometric modes `(1−dt)^k` and `(1−dt(1−σ_vu))^k`, which are the
    /// exact impulse response of the Euler recursion, summed with the
    /// rectangle rule of the loss.
    EulerExact,
    /// Continuous exponentials integrated with the trapezoid rule. Agrees
    /// with the other routes only up to O(dt).
    Continuous,
}

/// Closed-form `∂L/∂σ` for the linear rank-1 filter task under impulse
/// input.
pub fn filter_grad_closed(
    state: &OverlapState,
    task: &FilterTaskSpec,
    cfg: &SimConfig,
    scheme: KernelScheme,
) -> Result<GradientVector> {
    if task.input_kind != InputKind::Impulse {
        return Err(Error::InvalidConfig("closed-form gradient requires impulse input".into()));
    }
    cfg.validate()?;
    let KernelCoefficients { a: coef_a, b: coef_b } = KernelCoefficients::of(state)?;
    let [_zm, zu, vm, vu] = [state.visible[0], state.visible[1], state.visible[2], state.visible[3]];
    debug_assert!(vu.abs() >= KERNEL_SINGULARITY);
    let dt = cfg.dt;
    let k_max = cfg.n_steps();
    let mut g = [0.0; 4];
    for k in 0..k_max {
        let (fast, slow, dslow, w) = match scheme {
            KernelScheme::EulerExact => {
                let a = 1.0 - dt;
                let b = 1.0 - dt * (1.0 - vu);
                let kf = k as f64;
                let dslow = if k == 0 { 0.0 } else { kf * dt * b.powi(k as i32 - 1) };
                (a.powi(k as i32), b.powi(k as i32), dslow, dt)
            }
            KernelScheme::Continuous => {
                let t = cfg.time(k);
                let slow = (-(1.0 - vu) * t).exp();
                let w = if k == 0 || k + 1 == k_max { 0.5 * dt } else { dt };
                ((-t).exp(), slow, t * slow, w)
            }
        };
        let y = coef_a * fast + coef_b * slow;
        let target = task.a_star * (-task.c_star * cfg.time(k)).exp();
        let e2 = 2.0 * (y - target) * w;
        let diff = slow - fast;
        g[0] += e2 * fast;
        g[1] += e2 * (vm / vu) * diff;
        g[2] += e2 * (zu / vu) * diff;
        g[3] += e2 * (-(zu * vm) / (vu * vu) * diff + (zu * vm / vu) * dslow);
    }
    GradientVector::new(Variant::LinearRank1, g.to_vec())
}

/// Loss and `∂L/∂σ` of one episode by reverse-mode differentiation of the
/// reduced Euler recursion.
pub fn bptt_effective(state: &OverlapState, episode: &Episode, cfg: &SimConfig) -> Result<(f64, GradientVector)> {
    match state.variant {
        Variant::LinearRank1 => adjoint_linear_r1(state, episode, cfg),
        Variant::NonlinearRank1 => adjoint_nonlinear_r1(state, episode, cfg, true),
        Variant::LinearRank2 => adjoint_linear_r2(state, episode, cfg),
    }
}

/// Batch mean of [`bptt_effective`], reduced in episode order.
pub fn bptt_effective_batch(
    state: &OverlapState,
    episodes: &[Episode],
    cfg: &SimConfig,
) -> Result<(f64, GradientVector)> {
    let parts: Vec<Result<(f64, GradientVector)>> =
        episodes.par_iter().map(|ep| bptt_effective(state, ep, cfg)).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; state.variant.n_visible()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g.values).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / episodes.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, GradientVector::new(state.variant, grad)?))
}

fn check(state: &OverlapState, variant: Variant, episode: &Episode, cfg: &SimConfig) -> Result<()> {
    if state.variant != variant {
        return Err(Error::VariantMismatch { expected: variant, found: state.variant });
    }
    cfg.validate()?;
    cfg.check_input(&episode.input)?;
    if episode.target.len() != episode.input.len() || episode.mask.len() != episode.input.len() {
        return Err(Error::Dimension("episode target/mask length differs from input".into()));
    }
    Ok(())
}

fn finite_or(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(step) => Err(Error::NonFinite { what, step }),
        None => Ok(()),
    }
}

fn adjoint_linear_r1(state: &OverlapState, episode: &Episode, cfg: &SimConfig) -> Result<(f64, GradientVector)> {
    check(state, Variant::LinearRank1, episode, cfg)?;
    let [zm, zu, vm, vu] = [state.visible[0], state.visible[1], state.visible[2], state.visible[3]];
    let dt = cfg.dt;
    let k_max = episode.input.len();
    let mut a = vec![0.0; k_max + 1];
    let mut b = vec![0.0; k_max + 1];
    let mut y = Vec::with_capacity(k_max);
    for k in 0..k_max {
        a[k + 1] = a[k] + dt * (-a[k] + episode.input[k]);
        b[k + 1] = b[k] + dt * (-b[k] + vm * a[k] + vu * b[k]);
        y.push(zm * a[k + 1] + zu * b[k + 1]);
    }
    finite_or(&y, "effective output")?;
    let loss = episode.loss(&y, dt);
    let dy = episode.loss_grad(&y, dt);
    let mut g = [0.0; 4];
    let (mut la, mut lb) = (0.0, 0.0);
    for k in (0..k_max).rev() {
        let gk = dy[k];
        g[0] += gk * a[k + 1];
        g[1] += gk * b[k + 1];
        la += gk * zm;
        lb += gk * zu;
        let q = lb * dt;
        g[2] += q * a[k];
        g[3] += q * b[k];
        let la_prev = (1.0 - dt) * la + q * vm;
        let lb_prev = (1.0 - dt) * lb + q * vu;
        la = la_prev;
        lb = lb_prev;
        if !lb.is_finite() {
            return Err(Error::NonFinite { what: "adjoint", step: k });
        }
    }
    Ok((loss, GradientVector::new(Variant::LinearRank1, g.to_vec())?))
}

/// Nonlinear mean-field adjoint. With `gain_pathway = false` the
/// dependence of the gain on Δ is ignored (used to show that those terms
/// matter).
pub(crate) fn adjoint_nonlinear_r1(
    state: &OverlapState,
    episode: &Episode,
    cfg: &SimConfig,
    gain_pathway: bool,
) -> Result<(f64, GradientVector)> {
    check(state, Variant::NonlinearRank1, episode, cfg)?;
    let v = &state.visible;
    let (zm, zu, vm, vu, mu, mm, uu) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let dt = cfg.dt;
    let alpha = cfg.activation_alpha;
    let k_max = episode.input.len();
    let mut a = vec![0.0; k_max + 1];
    let mut b = vec![0.0; k_max + 1];
    // Gain and its Δ-derivative at every state (derivative zeroed when clamped).
    let mut gn = vec![0.0; k_max + 1];
    let mut gp = vec![0.0; k_max + 1];
    let eval = |a: f64, b: f64| {
        let d = mm * a * a + uu * b * b + 2.0 * mu * a * b;
        if d < 0.0 {
            (gain_unchecked(0.0, alpha), 0.0)
        } else {
            let dg = if gain_pathway { gain_derivative(d, alpha) } else { 0.0 };
            (gain_unchecked(d, alpha), dg)
        }
    };
    (gn[0], gp[0]) = eval(0.0, 0.0);
    let mut y = Vec::with_capacity(k_max);
    for k in 0..k_max {
        a[k + 1] = a[k] + dt * (-a[k] + episode.input[k]);
        b[k + 1] = b[k] + dt * (-b[k] + (vm * a[k] + vu * b[k]) * gn[k]);
        (gn[k + 1], gp[k + 1]) = eval(a[k + 1], b[k + 1]);
        y.push((zm * a[k + 1] + zu * b[k + 1]) * gn[k + 1]);
    }
    finite_or(&y, "effective output")?;
    let loss = episode.loss(&y, dt);
    let dy = episode.loss_grad(&y, dt);

    // g order: zm, zu, vm, vu, mu, mm, uu
    let mut g = [0.0; 7];
    let (mut la, mut lb) = (0.0, 0.0);
    for k in (0..k_max).rev() {
        let j = k + 1;
        let gk = dy[k];
        if gk != 0.0 {
            let (aj, bj) = (a[j], b[j]);
            let s = zm * aj + zu * bj;
            let w = gk * s * gp[j];
            g[0] += gk * aj * gn[j];
            g[1] += gk * bj * gn[j];
            g[4] += w * 2.0 * aj * bj;
            g[5] += w * aj * aj;
            g[6] += w * bj * bj;
            la += gk * zm * gn[j] + w * (2.0 * mm * aj + 2.0 * mu * bj);
            lb += gk * zu * gn[j] + w * (2.0 * uu * bj + 2.0 * mu * aj);
        }
        let (ak, bk) = (a[k], b[k]);
        let q = lb * dt;
        let r = vm * ak + vu * bk;
        let w = q * r * gp[k];
        g[2] += q * ak * gn[k];
        g[3] += q * bk * gn[k];
        g[4] += w * 2.0 * ak * bk;
        g[5] += w * ak * ak;
        g[6] += w * bk * bk;
        let la_prev = (1.0 - dt) * la + q * vm * gn[k] + w * (2.0 * mm * ak + 2.0 * mu * bk);
        let lb_prev = (1.0 - dt) * lb + q * vu * gn[k] + w * (2.0 * uu * bk + 2.0 * mu * ak);
        la = la_prev;
        lb = lb_prev;
        if !lb.is_finite() {
            return Err(Error::NonFinite { what: "adjoint", step: k });
        }
    }
    Ok((loss, GradientVector::new(Variant::NonlinearRank1, g.to_vec())?))
}

fn adjoint_linear_r2(state: &OverlapState, episode: &Episode, cfg: &SimConfig) -> Result<(f64, GradientVector)> {
    check(state, Variant::LinearRank2, episode, cfg)?;
    let s = &state.visible;
    let zm = s[0];
    let zu = [s[1], s[2]];
    let vm = [s[3], s[4]];
    let vu = [[s[5], s[6]], [s[7], s[8]]];
    let dt = cfg.dt;
    let k_max = episode.input.len();
    let mut a = vec![0.0; k_max + 1];
    let mut b = vec![[0.0; 2]; k_max + 1];
    let mut y = Vec::with_capacity(k_max);
    for k in 0..k_max {
        a[k + 1] = a[k] + dt * (-a[k] + episode.input[k]);
        for i in 0..2 {
            b[k + 1][i] = b[k][i] + dt * (-b[k][i] + vm[i] * a[k] + vu[i][0] * b[k][0] + vu[i][1] * b[k][1]);
        }
        y.push(zm * a[k + 1] + zu[0] * b[k + 1][0] + zu[1] * b[k + 1][1]);
    }
    finite_or(&y, "effective output")?;
    let loss = episode.loss(&y, dt);
    let dy = episode.loss_grad(&y, dt);

    let mut g_zm = 0.0;
    let mut g_zu = [0.0; 2];
    let mut g_vm = [0.0; 2];
    let mut g_vu = [[0.0; 2]; 2];
    let mut la = 0.0;
    let mut lb = [0.0; 2];
    for k in (0..k_max).rev() {
        let gk = dy[k];
        g_zm += gk * a[k + 1];
        la += gk * zm;
        for j in 0..2 {
            g_zu[j] += gk * b[k + 1][j];
            lb[j] += gk * zu[j];
        }
        let q = [lb[0] * dt, lb[1] * dt];
        for i in 0..2 {
            g_vm[i] += q[i] * a[k];
            for j in 0..2 {
                g_vu[i][j] += q[i] * b[k][j];
            }
        }
        la = (1.0 - dt) * la + q[0] * vm[0] + q[1] * vm[1];
        lb = [
            (1.0 - dt) * lb[0] + q[0] * vu[0][0] + q[1] * vu[1][0],
            (1.0 - dt) * lb[1] + q[0] * vu[0][1] + q[1] * vu[1][1],
        ];
        if !la.is_finite() {
            return Err(Error::NonFinite { what: "adjoint", step: k });
        }
    }
    let values = vec![g_zm, g_zu[0], g_zu[1], g_vm[0], g_vm[1], g_vu[0][0], g_vu[0][1], g_vu[1][0], g_vu[1][1]];
    Ok((loss, GradientVector::new(Variant::LinearRank2, values)?))
}

/// Loss and `∂L/∂θ` of one episode through the N-dimensional recursion.
/// The gradient is returned in the layout of the parameters.
pub fn bptt_full(
    params: &ParameterVectors,
    activation: Activation,
    episode: &Episode,
    cfg: &SimConfig,
) -> Result<(f64, ParameterVectors)> {
    cfg.validate()?;
    cfg.check_input(&episode.input)?;
    let n = params.n();
    let r = params.rank();
    let inv_n = 1.0 / n as f64;
    let dt = cfg.dt;
    let alpha = cfg.activation_alpha;
    let k_max = episode.input.len();
    let linear = activation == Activation::Identity;
    let m = params.m();
    let us: Vec<&[f64]> = (0..r).map(|j| params.u(j)).collect();
    let vs: Vec<&[f64]> = (0..r).map(|j| params.v(j)).collect();
    let z = params.z();

    // Forward, keeping h_k, φ(h_k) and the rank-r recurrent coefficients.
    let mut h = vec![0.0; (k_max + 1) * n];
    let mut phi = if linear { Vec::new() } else { vec![0.0; (k_max + 1) * n] };
    let mut coeff = vec![0.0; k_max * r];
    let mut y = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let (prev, next) = h.split_at_mut((k + 1) * n);
        let hk = &prev[k * n..];
        let hn = &mut next[..n];
        let phi_k: &[f64] = if linear { hk } else { &phi[k * n..(k + 1) * n] };
        for j in 0..r {
            coeff[k * r + j] = dot(vs[j], phi_k) * inv_n;
        }
        let x = episode.input[k];
        for i in 0..n {
            hn[i] = (1.0 - dt) * hk[i] + dt * m[i] * x;
        }
        for j in 0..r {
            let c = dt * coeff[k * r + j];
            hn.iter_mut().zip(us[j]).for_each(|(hi, ui)| *hi += c * ui);
        }
        let out = if linear {
            dot(z, hn) * inv_n
        } else {
            let pn = &mut phi[(k + 1) * n..(k + 2) * n];
            pn.iter_mut().zip(hn.iter()).for_each(|(p, &x)| *p = activation.apply(x, alpha));
            dot(z, pn) * inv_n
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { what: "network output", step: k });
        }
        y.push(out);
    }
    let loss = episode.loss(&y, dt);
    let dy = episode.loss_grad(&y, dt);

    let mut grad = ParameterVectors::zeros(n, r)?;
    let mut lambda = vec![0.0; n];
    let mut lambda_prev = vec![0.0; n];
    let mut dphi_next = vec![1.0; n];
    let mut dphi_cur = vec![1.0; n];
    let state = |k: usize| &h[k * n..(k + 1) * n];
    let phi_at = |k: usize| if linear { state(k) } else { &phi[k * n..(k + 1) * n] };
    let fill_derivative = |k: usize, dp: &mut [f64]| {
        if !linear {
            dp.iter_mut().zip(state(k)).for_each(|(d, &x)| *d = activation.derivative(x, alpha));
        }
    };
    fill_derivative(k_max, &mut dphi_next);
    let z_idx = 2 * r + 1;
    for k in (0..k_max).rev() {
        let gk = dy[k];
        if gk != 0.0 {
            let w = gk * inv_n;
            let gz = grad.vector_mut(z_idx);
            let phi_next = phi_at(k + 1);
            for i in 0..n {
                gz[i] += w * phi_next[i];
                lambda[i] += w * z[i] * dphi_next[i];
            }
        }
        fill_derivative(k, &mut dphi_cur);
        let phi_cur = phi_at(k);
        let x = episode.input[k];
        if x != 0.0 {
            grad.vector_mut(0).iter_mut().zip(&lambda).for_each(|(g, l)| *g += dt * x * l);
        }
        lambda_prev.iter_mut().zip(&lambda).for_each(|(p, l)| *p = (1.0 - dt) * l);
        for j in 0..r {
            let c = coeff[k * r + j];
            grad.vector_mut(1 + j).iter_mut().zip(&lambda).for_each(|(g, l)| *g += dt * c * l);
            let scale = dt * dot(us[j], &lambda) * inv_n;
            grad.vector_mut(1 + r + j).iter_mut().zip(phi_cur).for_each(|(g, p)| *g += scale * p);
            let v = vs[j];
            for i in 0..n {
                lambda_prev[i] += scale * v[i] * dphi_cur[i];
            }
        }
        std::mem::swap(&mut lambda, &mut lambda_prev);
        std::mem::swap(&mut dphi_next, &mut dphi_cur);
        if !lambda[0].is_finite() {
            return Err(Error::NonFinite { what: "adjoint", step: k });
        }
    }
    Ok((loss, grad))
}

/// Batch mean of [`bptt_full`], reduced in episode order.
pub fn bptt_full_batch(
    params: &ParameterVectors,
    activation: Activation,
    episodes: &[Episode],
    cfg: &SimConfig,
) -> Result<(f64, ParameterVectors)> {
    let parts: Vec<Result<(f64, ParameterVectors)>> =
        episodes.par_iter().map(|ep| bptt_full(params, activation, ep, cfg)).collect();
    let mut loss = 0.0;
    let mut grad = ParameterVectors::zeros(params.n(), params.rank())?;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.axpy(1.0, &g)?;
    }
    let inv = 1.0 / episodes.len().max(1) as f64;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Mean loss of the reduced model over a batch of episodes.
pub fn effective_loss(state: &OverlapState, episodes: &[Episode], cfg: &SimConfig) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let y = crate::effective::simulate(state, &ep.input, cfg)?.output;
        total += ep.loss(&y, cfg.dt);
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// Mean loss of the full network over a batch of episodes.
pub fn full_loss(
    params: &ParameterVectors,
    activation: Activation,
    episodes: &[Episode],
    cfg: &SimConfig,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = episodes
        .par_iter()
        .map(|ep| {
            let y = crate::network::simulate(params, activation, &ep.input, cfg)?.output;
            Ok(ep.loss(&y, cfg.dt))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_difference<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let plus = f(&x);
            x[i] = point[i] - eps;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative difference `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}
