//! Property checks that need no training run: each compares two
//! independent routes to the same quantity and reports the worst gap.

use std::collections::BTreeMap;

use lowrank_core::effective::{self, gain, gain_derivative, SimConfig, ERF_ALPHA};
use lowrank_core::gradients::{bptt_effective, effective_loss, filter_grad_closed, finite_difference, relative_error, KernelScheme};
use lowrank_core::linalg::rel_frobenius;
use lowrank_core::network::{
    self, extract_overlaps, jacobian_augmented, jacobian_invisible, jacobian_visible, sample_iid, sample_prescribed,
    Activation, ParameterVectors,
};
use lowrank_core::overlap::{flow_rhs, gram_augmented, gram_invisible, gram_visible};
use lowrank_core::rng::{derive_seed, stream, StreamRng, TAG_EPISODE};
use lowrank_core::tasks::{Episode, FilterTaskSpec, InputKind, LossKind, TaskSpec};
use lowrank_core::training::{train, Model, Phase, ProtocolSpec, Space, TrainConfig};
use lowrank_core::{GradientVector, OverlapState, Variant};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Property;
use crate::Result;

const TAG_PROPERTY: u64 = 110;
const VARIANTS: [Variant; 3] = [Variant::LinearRank1, Variant::NonlinearRank1, Variant::LinearRank2];

pub fn run(p: &Property, seed: u64, sim: &SimConfig) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match *p {
        Property::LinearExactness { sets, n } => {
            m.insert("linear_exactness.max_err".into(), linear_exactness(sets, n, seed, sim)?);
        }
        Property::GramIdentities { sets, n_max } => {
            m.insert("gram.max_rel_err".into(), gram_identities(sets, n_max, seed)?);
        }
        Property::GradientAgreement { states, eps } => {
            let [ca, cf, af] = gradient_agreement(states, eps, seed, sim)?;
            m.insert("grad.closed_vs_adjoint".into(), ca);
            m.insert("grad.closed_vs_fd".into(), cf);
            m.insert("grad.adjoint_vs_fd".into(), af);
        }
        Property::Gain { samples } => {
            let (bounds, z, deriv) = gain_checks(samples, seed)?;
            m.insert("gain.bound_violations".into(), bounds);
            m.insert("gain.mc_max_z".into(), z);
            m.insert("gain.derivative_err".into(), deriv);
        }
        Property::FlowLinearity { trials } => {
            m.insert("flow.linearity_err".into(), flow_linearity(trials, seed)?);
        }
        Property::Roundtrip { trials, n } => {
            m.insert("roundtrip.max_err".into(), roundtrip(trials, n, seed)?);
        }
        Property::MaskLoss { episodes } => {
            let (formula, masked, grad) = mask_loss(episodes, seed, sim)?;
            m.insert("mask.formula_err".into(), formula);
            m.insert("mask.masked_sensitivity".into(), masked);
            m.insert("mask.grad_err".into(), grad);
        }
        Property::Determinism { epochs } => {
            m.insert("determinism.mismatches".into(), determinism(epochs, seed)?);
        }
    }
    Ok(m)
}

fn rng_for(seed: u64, tags: &[u64]) -> StreamRng {
    let mut all = vec![TAG_PROPERTY];
    all.extend_from_slice(tags);
    stream(seed, &all)
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random vectors with O(1) cross overlaps: i.i.d. vectors mixed by
/// `I + 0.4·G` with Gaussian `G`.
pub fn random_params(rank: usize, n: usize, seed: u64) -> Result<ParameterVectors> {
    let base = sample_iid(rank, n, seed)?;
    let k = base.n_vectors();
    let mut rng = rng_for(seed, &[1]);
    let mix = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } + 0.4 * gaussian(&mut rng));
    let vectors: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..n).map(|c| (0..k).map(|j| mix[(i, j)] * base.vector(j)[c]).sum()).collect())
        .collect();
    Ok(ParameterVectors::from_vectors(&vectors)?)
}

fn white_noise(len: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..len).map(|_| gaussian(rng)).collect()
}

fn linear_exactness(sets: usize, n: usize, seed: u64, sim: &SimConfig) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..sets {
        let params = random_params(1, n, derive_seed(seed, &[2, s as u64]))?;
        let state = extract_overlaps(&params, Variant::LinearRank1)?;
        let mut rng = rng_for(seed, &[3, s as u64]);
        for input in [sim.impulse(), white_noise(sim.n_steps(), &mut rng)] {
            let full = network::simulate(&params, Activation::Identity, &input, sim)?.output;
            let reduced = effective::simulate(&state, &input, sim)?.output;
            let scale = full.iter().fold(1.0_f64, |a, y| a.max(y.abs()));
            let gap = full.iter().zip(&reduced).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(gap / scale);
        }
    }
    Ok(worst)
}

fn gram_identities(sets: usize, n_max: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..sets {
        let variant = VARIANTS[s % 3];
        let mut rng = rng_for(seed, &[4, s as u64]);
        let n = rng.random_range(2 * variant.n_vectors()..=n_max.max(2 * variant.n_vectors()));
        let params = random_params(variant.rank(), n, derive_seed(seed, &[5, s as u64]))?;
        let state = extract_overlaps(&params, variant)?;
        let nf = n as f64;
        let d = jacobian_visible(&params, variant)?;
        let dt = d.transpose();
        worst = worst.max(rel_frobenius(&gram_visible(&state, nf), &(&d * &dt), 1e-12));
        let di = jacobian_invisible(&params, variant)?;
        worst = worst.max(rel_frobenius(&gram_invisible(&state, nf), &(&di * &dt), 1e-12));
        if variant == Variant::LinearRank1 {
            let da = jacobian_augmented(&params)?;
            worst = worst.max(rel_frobenius(&gram_augmented(&state, nf)?, &(&da * da.transpose()), 1e-12));
        }
    }
    Ok(worst)
}

/// Random linear rank-1 state with `|σ_vu| ∈ [0.2, 0.95]`, away from the
/// pole of the kernel coefficients.
fn random_filter_state(rng: &mut StreamRng) -> Result<OverlapState> {
    let mut u = || rng.random_range(-1.5..1.5);
    let (zm, zu, vm) = (u(), u(), u());
    let vu = rng.random_range(0.2..0.95) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Ok(OverlapState::new(Variant::LinearRank1, vec![zm, zu, vm, vu], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0])?)
}

fn gradient_agreement(states: usize, eps: f64, seed: u64, sim: &SimConfig) -> Result<[f64; 3]> {
    let mut worst = [0.0_f64; 3];
    for s in 0..states {
        let mut rng = rng_for(seed, &[6, s as u64]);
        let state = random_filter_state(&mut rng)?;
        let task = FilterTaskSpec { a_star: rng.random_range(0.5..1.5), c_star: rng.random_range(0.1..0.6), input_kind: InputKind::Impulse };
        let spec = TaskSpec::Filter(task.clone());
        let episode = spec.generate_episode(&mut rng, sim)?;
        let closed = filter_grad_closed(&state, &task, sim, KernelScheme::EulerExact)?.values;
        let adjoint = bptt_effective(&state, &episode, sim)?.1.values;
        let loss_at = |v: &[f64]| {
            let st = OverlapState { visible: v.to_vec(), ..state.clone() };
            effective_loss(&st, std::slice::from_ref(&episode), sim).unwrap_or(f64::NAN)
        };
        let fd = finite_difference(loss_at, &state.visible, eps);
        let floor = 1e-8;
        worst[0] = worst[0].max(relative_error(&closed, &adjoint, floor));
        worst[1] = worst[1].max(relative_error(&closed, &fd, floor));
        worst[2] = worst[2].max(relative_error(&adjoint, &fd, floor));
    }
    Ok(worst)
}

/// Returns (bound violations, worst Monte-Carlo z-score, worst relative
/// error of the analytic derivative against central differences).
fn gain_checks(samples: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let deltas = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0];
    let mut violations = 0usize;
    let mut prev = f64::INFINITY;
    let mut worst_z: f64 = 0.0;
    let mut worst_d: f64 = 0.0;
    for (i, &delta) in deltas.iter().enumerate() {
        let g = gain(delta, ERF_ALPHA)?;
        if !(g > 0.0 && g <= 1.0 && g <= prev) {
            violations += 1;
        }
        prev = g;
        let mut rng = rng_for(seed, &[7, i as u64]);
        let draws: Vec<f64> = (0..samples)
            .map(|_| Activation::Erf.derivative(delta.sqrt() * gaussian(&mut rng), ERF_ALPHA))
            .collect();
        let mean = draws.iter().sum::<f64>() / samples as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (samples as f64 - 1.0);
        let se = (var / samples as f64).sqrt();
        let z = if se > 0.0 { (mean - g).abs() / se } else if (mean - g).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
        worst_z = worst_z.max(z);
        if delta > 0.0 {
            let h = 1e-5 * (1.0 + delta);
            let fd = (gain(delta + h, ERF_ALPHA)? - gain(delta - h, ERF_ALPHA)?) / (2.0 * h);
            let exact = gain_derivative(delta, ERF_ALPHA);
            worst_d = worst_d.max((fd - exact).abs() / exact.abs());
        }
    }
    if gain(-1e-3, ERF_ALPHA).is_ok() {
        violations += 1;
    }
    Ok((violations as f64, worst_z, worst_d))
}

fn random_state(variant: Variant, rng: &mut StreamRng) -> Result<OverlapState> {
    let vis = (0..variant.n_visible()).map(|_| gaussian(rng)).collect();
    let inv = (0..variant.n_invisible()).map(|_| gaussian(rng)).collect();
    Ok(OverlapState::new(variant, vis, inv)?)
}

fn flow_linearity(trials: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let variant = VARIANTS[t % 3];
        let mut rng = rng_for(seed, &[8, t as u64]);
        let state = random_state(variant, &mut rng)?;
        let g1: Vec<f64> = (0..variant.n_visible()).map(|_| gaussian(&mut rng)).collect();
        let g2: Vec<f64> = (0..variant.n_visible()).map(|_| gaussian(&mut rng)).collect();
        let (a, b) = (gaussian(&mut rng), gaussian(&mut rng));
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let lhs = flow_rhs(&state, &GradientVector::new(variant, mix)?)?;
        let r1 = flow_rhs(&state, &GradientVector::new(variant, g1)?)?;
        let r2 = flow_rhs(&state, &GradientVector::new(variant, g2)?)?;
        let scale = r1.values().chain(r2.values()).fold(1.0_f64, |m, v| m.max(v.abs()));
        for (l, (x, y)) in lhs.values().zip(r1.values().zip(r2.values())) {
            worst = worst.max((l - (a * x + b * y)).abs() / scale);
        }
    }
    Ok(worst)
}

fn roundtrip(trials: usize, n: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let variant = VARIANTS[t % 3];
        let k = variant.n_vectors();
        let mut rng = rng_for(seed, &[9, t as u64]);
        // Wishart-like target, rank-deficient every third trial.
        let cols = if t % 3 == 2 { k - 1 } else { k };
        let a = DMatrix::from_fn(k, cols, |_, _| gaussian(&mut rng) / (cols as f64).sqrt());
        let target = &a * a.transpose();
        let params = sample_prescribed(&target, n, derive_seed(seed, &[10, t as u64]))?;
        let back = extract_overlaps(&params, variant)?.to_matrix();
        worst = worst.max((back - &target).amax() / target.amax().max(1.0));
    }
    Ok(worst)
}

/// Independent re-implementation of the episode loss.
fn reference_loss(ep: &Episode, y: &[f64], dt: f64) -> f64 {
    let mut sse = 0.0;
    let mut weight = 0.0;
    for k in 0..y.len() {
        let e = y[k] - ep.target[k];
        sse += ep.mask[k] * e * e;
        weight += ep.mask[k];
    }
    match ep.loss_kind {
        LossKind::Integrated => sse * dt,
        LossKind::MaskedMean if weight > 0.0 => sse / weight,
        LossKind::MaskedMean => 0.0,
    }
}

fn mask_loss(episodes: usize, seed: u64, sim: &SimConfig) -> Result<(f64, f64, f64)> {
    let tasks = [
        TaskSpec::Filter(Default::default()),
        TaskSpec::Oscillator(Default::default()),
        TaskSpec::FlipFlop(Default::default()),
        TaskSpec::Decision(Default::default()),
        TaskSpec::Teacher(Default::default()),
    ];
    let (mut formula, mut masked, mut grad) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (ti, task) in tasks.iter().enumerate() {
        for e in 0..episodes {
            let mut rng = rng_for(seed, &[11, ti as u64, e as u64]);
            let ep = task.generate_episode(&mut stream(seed, &[TAG_EPISODE, ti as u64, e as u64]), sim)?;
            let y: Vec<f64> = ep.target.iter().map(|t| t + 0.3 * gaussian(&mut rng)).collect();
            let l = ep.loss(&y, sim.dt);
            formula = formula.max((l - reference_loss(&ep, &y, sim.dt)).abs() / l.abs().max(1e-12));
            formula = formula.max(ep.loss(&ep.target, sim.dt).abs());
            // Outputs outside the mask must not matter.
            let mut shifted = y.clone();
            shifted.iter_mut().zip(&ep.mask).filter(|(_, m)| **m == 0.0).for_each(|(v, _)| *v += 5.0);
            masked = masked.max((ep.loss(&shifted, sim.dt) - l).abs());
            let g = ep.loss_grad(&y, sim.dt);
            let h = 1e-6;
            for k in (0..y.len()).step_by((y.len() / 7).max(1)) {
                let mut p = y.clone();
                p[k] += h;
                let mut q = y.clone();
                q[k] -= h;
                let fd = (ep.loss(&p, sim.dt) - ep.loss(&q, sim.dt)) / (2.0 * h);
                grad = grad.max((fd - g[k]).abs() / g.iter().fold(1e-12_f64, |a, v| a.max(v.abs())));
            }
        }
    }
    Ok((formula, masked, grad))
}

/// Number of differing records between two identical stochastic runs, in
/// parameter and in overlap space.
fn determinism(epochs: usize, seed: u64) -> Result<f64> {
    let sim = SimConfig::new(0.1, 10.0)?;
    let protocol = ProtocolSpec { phases: vec![Phase::new("ff", TaskSpec::FlipFlop(Default::default()), epochs)] };
    let params = random_params(1, 60, seed)?;
    let mut mismatches = 0usize;
    for space in [Space::Parameter, Space::Overlap] {
        let cfg = TrainConfig { space, batch_size: 3, label_noise_std: 0.05, eta: 0.01, seed, ..Default::default() };
        let run = || train(Model::Params { params: params.clone(), variant: Variant::NonlinearRank1 }, &protocol, &cfg, &sim);
        let (a, b) = (run()?, run()?);
        mismatches += a.records.iter().zip(&b.records).filter(|(x, y)| x != y).count();
        mismatches += a.records.len().abs_diff(b.records.len());
        if a.final_model != b.final_model {
            mismatches += 1;
        }
    }
    Ok(mismatches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_params_have_cross_overlaps() {
        let p = random_params(1, 400, 3).unwrap();
        let s = extract_overlaps(&p, Variant::LinearRank1).unwrap();
        assert!(s.visible.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn reference_loss_matches_on_constructed_episode() {
        let ep = Episode {
            input: vec![0.0; 4],
            target: vec![1.0, 0.0, 2.0, 0.0],
            mask: vec![1.0, 0.0, 1.0, 1.0],
            loss_kind: LossKind::MaskedMean,
        };
        // Errors 1, (masked), 0, 2 → (1 + 0 + 4) / 3.
        let y = [0.0, 9.0, 2.0, 2.0];
        assert!((reference_loss(&ep, &y, 0.1) - 5.0 / 3.0).abs() < 1e-15);
        assert!((ep.loss(&y, 0.1) - 5.0 / 3.0).abs() < 1e-15);
    }
}
