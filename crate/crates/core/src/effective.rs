//! Within-episode reduced dynamics.
//!
//! The hidden state of a rank-`r` network started at zero stays in
//! `span{m, u_1..u_r}`, so an episode is simulated with the coordinates `κ`
//! only. All simulators use forward Euler on the grid `t_k = k·dt`:
//! input sample `x_k` drives the step `κ_k → κ_{k+1}`, and output sample `k`
//! is read from `κ_{k+1}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::overlap::{OverlapState, Variant};
use crate::{Error, Result};

/// Activation scale that gives `erf(αh)` unit slope at the origin.
pub const ERF_ALPHA: f64 = 0.886_226_925_452_757_9; // √π / 2

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon_t: f64,
    pub activation_alpha: f64,
    /// Thinning of stored full-network states.
    pub store_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 0.025, horizon_t: 20.0, activation_alpha: ERF_ALPHA, store_every: 1 }
    }
}

impl SimConfig {
    pub fn new(dt: f64, horizon_t: f64) -> Result<Self> {
        let cfg = Self { dt, horizon_t, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon_t >= self.dt) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} shorter than one step {}",
                self.horizon_t, self.dt
            )));
        }
        if !(self.activation_alpha > 0.0) {
            return Err(Error::InvalidConfig("activation_alpha must be positive".into()));
        }
        if self.store_every == 0 {
            return Err(Error::InvalidConfig("store_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of Euler steps, `⌈T/dt⌉` with a little slack for rounding.
    pub fn n_steps(&self) -> usize {
        (self.horizon_t / self.dt - 1e-9).ceil() as usize
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Unit-area impulse: `1/dt` on the first grid point.
    pub fn impulse(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_steps()];
        x[0] = 1.0 / self.dt;
        x
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.n_steps() {
            return Err(Error::Dimension(format!(
                "input has {} samples, grid has {}",
                input.len(),
                self.n_steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTrajectory {
    /// Dimension of κ (2 for rank 1, 3 for rank 2).
    pub dim: usize,
    /// `κ_0..κ_K`, row-major, `κ_0 = 0`.
    pub kappa: Vec<f64>,
    /// `ŷ_0..ŷ_{K−1}`.
    pub output: Vec<f64>,
    /// `Δ(κ_0)..Δ(κ_K)` for the nonlinear variant.
    pub delta: Option<Vec<f64>>,
    /// Number of times a negative Δ was clamped to zero.
    pub delta_clamps: usize,
}

impl EffectiveTrajectory {
    pub fn n_steps(&self) -> usize {
        self.output.len()
    }

    pub fn kappa_at(&self, k: usize) -> &[f64] {
        &self.kappa[k * self.dim..(k + 1) * self.dim]
    }

    /// CSV with columns `t, kappa_0.., [delta], y`; row `k` holds `κ_{k+1}`
    /// and `ŷ_k` at time `(k+1)·dt`.
    pub fn to_csv(&self, cfg: &SimConfig) -> String {
        let mut out = String::from("t");
        for i in 0..self.dim {
            let _ = write!(out, ",kappa_{i}");
        }
        if self.delta.is_some() {
            out.push_str(",delta");
        }
        out.push_str(",y\n");
        for k in 0..self.n_steps() {
            let _ = write!(out, "{}", cfg.time(k + 1));
            for v in self.kappa_at(k + 1) {
                let _ = write!(out, ",{v}");
            }
            if let Some(d) = &self.delta {
                let _ = write!(out, ",{}", d[k + 1]);
            }
            let _ = writeln!(out, ",{}", self.output[k]);
        }
        out
    }
}

/// Mean-field gain `E[φ′(h)]` for `φ(h) = erf(αh)` and `h ~ N(0, Δ)`.
pub fn gain(delta: f64, alpha: f64) -> Result<f64> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::NegativeVariance(delta));
    }
    Ok(gain_unchecked(delta, alpha))
}

pub(crate) fn gain_unchecked(delta: f64, alpha: f64) -> f64 {
    let c0 = 2.0 * alpha / std::f64::consts::PI.sqrt();
    c0 / (1.0 + 2.0 * alpha * alpha * delta).sqrt()
}

/// `dG/dΔ`.
pub fn gain_derivative(delta: f64, alpha: f64) -> f64 {
    let c0 = 2.0 * alpha / std::f64::consts::PI.sqrt();
    let a2 = 2.0 * alpha * alpha;
    -0.5 * c0 * a2 * (1.0 + a2 * delta).powf(-1.5)
}

/// Simulates the reduced dynamics matching the state's variant.
pub fn simulate(state: &OverlapState, input: &[f64], cfg: &SimConfig) -> Result<EffectiveTrajectory> {
    match state.variant {
        Variant::LinearRank1 => simulate_linear_r1(state, input, cfg),
        Variant::NonlinearRank1 => simulate_nonlinear_r1(state, input, cfg),
        Variant::LinearRank2 => simulate_linear_r2(state, input, cfg),
    }
}

fn check_state(state: &OverlapState, variant: Variant, cfg: &SimConfig, input: &[f64]) -> Result<()> {
    if state.variant != variant {
        return Err(Error::VariantMismatch { expected: variant, found: state.variant });
    }
    if !state.is_finite() {
        return Err(Error::NonFinite { what: "overlap state", step: 0 });
    }
    cfg.validate()?;
    cfg.check_input(input)
}

fn non_finite(output: &[f64]) -> Result<()> {
    match output.iter().position(|y| !y.is_finite()) {
        Some(step) => Err(Error::NonFinite { what: "effective output", step }),
        None => Ok(()),
    }
}

/// Linear rank-1: `κ̇_m = −κ_m + x`, `κ̇_u = −κ_u + σ_vm κ_m + σ_vu κ_u`,
/// `ŷ = σ_zm κ_m + σ_zu κ_u`.
pub fn simulate_linear_r1(state: &OverlapState, input: &[f64], cfg: &SimConfig) -> Result<EffectiveTrajectory> {
    check_state(state, Variant::LinearRank1, cfg, input)?;
    let [zm, zu, vm, vu] = [state.visible[0], state.visible[1], state.visible[2], state.visible[3]];
    let dt = cfg.dt;
    let k_max = input.len();
    let mut kappa = Vec::with_capacity(2 * (k_max + 1));
    let mut output = Vec::with_capacity(k_max);
    let (mut a, mut b) = (0.0, 0.0);
    kappa.extend([a, b]);
    for &x in input {
        let a_next = a + dt * (-a + x);
        let b_next = b + dt * (-b + vm * a + vu * b);
        a = a_next;
        b = b_next;
        kappa.extend([a, b]);
        output.push(zm * a + zu * b);
    }
    non_finite(&output)?;
    Ok(EffectiveTrajectory { dim: 2, kappa, output, delta: None, delta_clamps: 0 })
}

/// Nonlinear rank-1 mean-field dynamics with gain `G(Δ)`,
/// `Δ = ‖m‖²κ_m² + ‖u‖²κ_u² + 2σ_mu κ_m κ_u`.
pub fn simulate_nonlinear_r1(
    state: &OverlapState,
    input: &[f64],
    cfg: &SimConfig,
) -> Result<EffectiveTrajectory> {
    check_state(state, Variant::NonlinearRank1, cfg, input)?;
    let v = &state.visible;
    let (zm, zu, vm, vu, mu, mm, uu) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let dt = cfg.dt;
    let alpha = cfg.activation_alpha;
    let k_max = input.len();
    let mut kappa = Vec::with_capacity(2 * (k_max + 1));
    let mut delta = Vec::with_capacity(k_max + 1);
    let mut output = Vec::with_capacity(k_max);
    let mut clamps = 0;
    let mut variance = |a: f64, b: f64| {
        let d = mm * a * a + uu * b * b + 2.0 * mu * a * b;
        if d < 0.0 {
            clamps += 1;
            0.0
        } else {
            d
        }
    };
    let (mut a, mut b) = (0.0, 0.0);
    let mut d = variance(a, b);
    kappa.extend([a, b]);
    delta.push(d);
    for &x in input {
        let g = gain_unchecked(d, alpha);
        let a_next = a + dt * (-a + x);
        let b_next = b + dt * (-b + (vm * a + vu * b) * g);
        a = a_next;
        b = b_next;
        d = variance(a, b);
        kappa.extend([a, b]);
        delta.push(d);
        output.push((zm * a + zu * b) * gain_unchecked(d, alpha));
    }
    non_finite(&output)?;
    Ok(EffectiveTrajectory { dim: 2, kappa, output, delta: Some(delta), delta_clamps: clamps })
}

/// Linear rank-2: `κ = (κ_m, κ_1, κ_2)`,
/// `κ̇_i = −κ_i + σ_{v_i m} κ_m + Σ_j σ_{v_i u_j} κ_j`.
pub fn simulate_linear_r2(state: &OverlapState, input: &[f64], cfg: &SimConfig) -> Result<EffectiveTrajectory> {
    check_state(state, Variant::LinearRank2, cfg, input)?;
    let s = &state.visible;
    let (zm, zu1, zu2, v1m, v2m, v1u1, v1u2, v2u1, v2u2) = (s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], s[8]);
    let dt = cfg.dt;
    let k_max = input.len();
    let mut kappa = Vec::with_capacity(3 * (k_max + 1));
    let mut output = Vec::with_capacity(k_max);
    let (mut a, mut b1, mut b2) = (0.0, 0.0, 0.0);
    kappa.extend([a, b1, b2]);
    for &x in input {
        let a_next = a + dt * (-a + x);
        let b1_next = b1 + dt * (-b1 + v1m * a + v1u1 * b1 + v1u2 * b2);
        let b2_next = b2 + dt * (-b2 + v2m * a + v2u1 * b1 + v2u2 * b2);
        a = a_next;
        b1 = b1_next;
        b2 = b2_next;
        kappa.extend([a, b1, b2]);
        output.push(zm * a + zu1 * b1 + zu2 * b2);
    }
    non_finite(&output)?;
    Ok(EffectiveTrajectory { dim: 3, kappa, output, delta: None, delta_clamps: 0 })
}

/// Coefficients of the two-exponential impulse response of the linear
/// rank-1 network, `A e^{−t} + B e^{−(1−σ_vu)t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelCoefficients {
    pub a: f64,
    pub b: f64,
}

/// Below this |σ_vu| the two-mode split is numerically meaningless.
pub const KERNEL_SINGULARITY: f64 = 1e-8;

impl KernelCoefficients {
    pub fn of(state: &OverlapState) -> Result<Self> {
        if state.variant != Variant::LinearRank1 {
            return Err(Error::VariantMismatch { expected: Variant::LinearRank1, found: state.variant });
        }
        let [zm, zu, vm, vu] = [state.visible[0], state.visible[1], state.visible[2], state.visible[3]];
        if vu.abs() < KERNEL_SINGULARITY {
            return Err(Error::KernelSingularity(vu));
        }
        let b = zu * vm / vu;
        Ok(Self { a: zm - b, b })
    }
}

/// Continuous-time impulse response of the linear rank-1 network.
pub fn impulse_kernel_r1(state: &OverlapState, t: f64) -> Result<f64> {
    let KernelCoefficients { a, b } = KernelCoefficients::of(state)?;
    let vu = state.visible[3];
    Ok(a * (-t).exp() + b * (-(1.0 - vu) * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r1(zm: f64, zu: f64, vm: f64, vu: f64) -> OverlapState {
        OverlapState::new(Variant::LinearRank1, vec![zm, zu, vm, vu], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn grid_length() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.n_steps(), 800);
        assert_eq!(SimConfig::new(0.05, 20.0).unwrap().n_steps(), 400);
        assert_eq!(SimConfig::new(0.3, 1.0).unwrap().n_steps(), 4);
        assert!(SimConfig::new(0.0, 1.0).is_err());
        assert!(SimConfig::new(0.1, 0.01).is_err());
    }

    #[test]
    fn zero_input_gives_zero_trajectory() {
        let cfg = SimConfig::default();
        let x = vec![0.0; cfg.n_steps()];
        let s = r1(0.3, -0.2, 0.5, 0.7);
        let tr = simulate_linear_r1(&s, &x, &cfg).unwrap();
        assert!(tr.kappa.iter().chain(&tr.output).all(|&v| v == 0.0));
        let nl = s.reinterpret(Variant::NonlinearRank1).unwrap();
        let tr = simulate_nonlinear_r1(&nl, &x, &cfg).unwrap();
        assert!(tr.output.iter().all(|&v| v == 0.0));
        let tr = simulate_linear_r2(&s.embed_rank2().unwrap(), &x, &cfg).unwrap();
        assert!(tr.output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_filter_solution_impulse_response() {
        let cfg = SimConfig::default();
        let c = 0.8_f64.sqrt();
        let s = r1(1.0, c, c, 0.8);
        let tr = simulate_linear_r1(&s, &cfg.impulse(), &cfg).unwrap();
        let err = tr
            .output
            .iter()
            .enumerate()
            .map(|(k, y)| (y - (-0.2 * cfg.time(k)).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err < cfg.dt, "{err}");
        assert!((impulse_kernel_r1(&s, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((impulse_kernel_r1(&s, 3.0).unwrap() - (-0.6_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_mode_kernel() {
        let s = r1(1.0, 0.0, 0.7, 0.4);
        for t in [0.0, 0.5, 4.0] {
            assert!((impulse_kernel_r1(&s, t).unwrap() - (-t).exp()).abs() < 1e-15);
        }
        assert!(matches!(impulse_kernel_r1(&r1(1.0, 1.0, 1.0, 0.0), 1.0), Err(Error::KernelSingularity(_))));
    }

    #[test]
    fn kernel_tracks_simulation() {
        let cfg = SimConfig::default();
        for seed in 0..10 {
            let p = noise(4, seed);
            let s = r1(p[0], p[1], p[2], 0.3 + 0.5 * p[3]);
            let tr = simulate_linear_r1(&s, &cfg.impulse(), &cfg).unwrap();
            let err = tr
                .output
                .iter()
                .enumerate()
                .map(|(k, y)| (y - impulse_kernel_r1(&s, cfg.time(k)).unwrap()).abs())
                .fold(0.0, f64::max);
            assert!(err < 5.0 * cfg.dt, "seed {seed}: {err}");
        }
    }

    #[test]
    fn rank2_embedding_reproduces_rank1() {
        let cfg = SimConfig::default();
        let x = noise(cfg.n_steps(), 9);
        let s = r1(0.4, -1.1, 0.6, 0.5);
        let a = simulate_linear_r1(&s, &x, &cfg).unwrap();
        let b = simulate_linear_r2(&s.embed_rank2().unwrap(), &x, &cfg).unwrap();
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn gain_values() {
        assert_eq!(gain(0.0, ERF_ALPHA).unwrap(), 1.0);
        let g = gain(2.0 / std::f64::consts::PI, ERF_ALPHA).unwrap();
        assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(gain(-0.1, ERF_ALPHA), Err(Error::NegativeVariance(_))));
    }

    #[test]
    fn gain_derivative_matches_difference() {
        for d in [0.0, 0.3, 2.0, 10.0] {
            let h = 1e-6;
            let fd = (gain_unchecked(d + h, ERF_ALPHA) - gain_unchecked((d - h).max(0.0), ERF_ALPHA))
                / (d + h - (d - h).max(0.0));
            assert!((gain_derivative(d, ERF_ALPHA) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn nonlinear_small_input_is_linear() {
        let cfg = SimConfig::default();
        let x: Vec<f64> = noise(cfg.n_steps(), 4).iter().map(|v| v * 1e-4).collect();
        let s = r1(0.5, 1.2, 0.9, 0.6);
        let lin = simulate_linear_r1(&s, &x, &cfg).unwrap();
        let nl = simulate_nonlinear_r1(&s.reinterpret(Variant::NonlinearRank1).unwrap(), &x, &cfg).unwrap();
        let scale = lin.output.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let dev = lin.output.iter().zip(&nl.output).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3 * scale, "{dev} vs {scale}");
    }

    #[test]
    fn negative_variance_is_clamped_and_counted() {
        let cfg = SimConfig::new(0.1, 2.0).unwrap();
        // mu far outside Cauchy-Schwarz makes Δ negative once both modes are active.
        let s = OverlapState::new(
            Variant::NonlinearRank1,
            vec![1.0, 1.0, 1.0, 0.5, -5.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        )
        .unwrap();
        let x = vec![1.0; cfg.n_steps()];
        let tr = simulate_nonlinear_r1(&s, &x, &cfg).unwrap();
        assert!(tr.delta_clamps > 0);
        assert!(tr.delta.unwrap().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn grid_refinement_is_first_order() {
        let s = r1(0.5, 1.0, 0.8, 0.5);
        let final_y = |dt: f64| {
            let cfg = SimConfig::new(dt, 5.0).unwrap();
            let x = vec![1.0; cfg.n_steps()];
            *simulate_linear_r1(&s, &x, &cfg).unwrap().output.last().unwrap()
        };
        let d1 = (final_y(0.05) - final_y(0.025)).abs();
        let d2 = (final_y(0.025) - final_y(0.0125)).abs();
        assert!(d1 < 0.05 && d2 < 0.6 * d1, "{d1} {d2}");
    }

    #[test]
    fn csv_layout() {
        let cfg = SimConfig::new(0.5, 1.0).unwrap();
        let s = r1(1.0, 0.0, 0.0, 0.0);
        let tr = simulate_linear_r1(&s, &[2.0, 0.0], &cfg).unwrap();
        assert_eq!(tr.to_csv(&cfg), "t,kappa_0,kappa_1,y\n0.5,1,0,1\n1,0.5,0,0.5\n");
    }

    proptest! {
        #[test]
        fn gain_bounded_and_decreasing(d in 0.0f64..1e6, e in 0.0f64..1e3) {
            let g = gain(d, ERF_ALPHA).unwrap();
            prop_assert!(g > 0.0 && g <= 1.0);
            prop_assert!(gain(d + e, ERF_ALPHA).unwrap() <= g);
        }

        #[test]
        fn linear_in_input(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let cfg = SimConfig::new(0.05, 5.0).unwrap();
            let p = noise(4, seed + 1000);
            let s = r1(p[0], p[1], p[2], p[3]);
            let x1 = noise(cfg.n_steps(), seed);
            let x2 = noise(cfg.n_steps(), seed + 1);
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
            let y1 = simulate_linear_r1(&s, &x1, &cfg).unwrap().output;
            let y2 = simulate_linear_r1(&s, &x2, &cfg).unwrap().output;
            let ym = simulate_linear_r1(&s, &mix, &cfg).unwrap().output;
            for ((u, v), w) in y1.iter().zip(&y2).zip(&ym) {
                prop_assert!((a * u + b * v - w).abs() < 1e-12);
            }
        }
    }
}
