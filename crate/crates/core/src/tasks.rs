//! Episode generators: input signal, target, loss mask and loss type.

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::effective::{simulate_nonlinear_r1, SimConfig};
use crate::linalg::psd_factor;
use crate::overlap::{OverlapState, Variant};
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Impulse,
    WhiteNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `Σ_k mask_k (ŷ_k − y*_k)² dt`.
    Integrated,
    /// `Σ_k mask_k (ŷ_k − y*_k)² / Σ_k mask_k`.
    MaskedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterTaskSpec {
    pub a_star: f64,
    pub c_star: f64,
    pub input_kind: InputKind,
}

impl Default for FilterTaskSpec {
    fn default() -> Self {
        Self { a_star: 1.0, c_star: 0.2, input_kind: InputKind::Impulse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OscillatorTaskSpec {
    pub c_star: f64,
    pub omega_star: f64,
    pub input_kind: InputKind,
}

impl Default for OscillatorTaskSpec {
    fn default() -> Self {
        Self { c_star: 0.3, omega_star: 2.0, input_kind: InputKind::Impulse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipFlopSpec {
    pub x_amp: f64,
    pub y_amp: f64,
    pub t_stim: f64,
    pub t_delay: f64,
    /// Range of onset-to-onset intervals between pulses (the first onset is
    /// drawn from the same range).
    pub isd_range: [f64; 2],
    /// Minimum masked time after each pulse offset.
    pub transient_mask: f64,
}

impl Default for FlipFlopSpec {
    fn default() -> Self {
        Self { x_amp: 1.0, y_amp: 0.5, t_stim: 0.2, t_delay: 0.5, isd_range: [2.0, 5.0], transient_mask: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionSpec {
    pub coherences: Vec<f64>,
    pub noise_std: f64,
    pub y_amp: f64,
    /// Defaults to the largest absolute coherence.
    pub c_max: Option<f64>,
    pub t_stim: f64,
    pub t_delay: f64,
}

impl Default for DecisionSpec {
    fn default() -> Self {
        Self {
            coherences: vec![-16.0, -8.0, -2.0, 2.0, 8.0, 16.0],
            noise_std: 0.05,
            y_amp: 1.0,
            c_max: None,
            t_stim: 8.0,
            t_delay: 1.0,
        }
    }
}

impl DecisionSpec {
    pub fn c_max(&self) -> f64 {
        self.c_max.unwrap_or_else(|| self.coherences.iter().fold(0.0, |m, c| f64::max(m, c.abs())))
    }
}

pub const DEFAULT_TEACHER: [f64; 7] = [0.5, 2.3, 2.0, 1.5, 1.6, 1.8, 2.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    /// Visible overlaps of a nonlinear rank-1 teacher,
    /// (σ_zm, σ_zu, σ_vm, σ_vu, σ_mu, ‖m‖², ‖u‖²).
    pub teacher_overlaps: Vec<f64>,
    /// Standard deviation of the white-noise input per grid step.
    pub input_std: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self { teacher_overlaps: DEFAULT_TEACHER.to_vec(), input_std: 1.0 }
    }
}

impl TeacherSpec {
    /// A realizable nonlinear rank-1 state carrying the teacher overlaps.
    pub fn teacher_state(&self) -> Result<OverlapState> {
        complete_nonlinear_r1(&self.teacher_overlaps)
    }
}

/// Completes nonlinear rank-1 visible overlaps with invisible ones so that
/// the full overlap matrix is realizable by real vectors.
pub fn complete_nonlinear_r1(visible: &[f64]) -> Result<OverlapState> {
    if visible.len() != 7 {
        return Err(Error::Dimension(format!("expected 7 visible overlaps, got {}", visible.len())));
    }
    let (zm, zu, vm, vu, mu, mm, uu) =
        (visible[0], visible[1], visible[2], visible[3], visible[4], visible[5], visible[6]);
    let b = Matrix2::new(mm, mu, mu, uu);
    let scale = mm.abs().max(uu.abs()).max(1.0);
    let inv = match b.try_inverse() {
        Some(inv) if b.determinant() > 1e-12 * scale * scale && mm > 0.0 => inv,
        _ => {
            return Err(Error::NotPsd { min_pivot: b.determinant().min(mm).min(uu) });
        }
    };
    let quad = |p: nalgebra::Vector2<f64>, q: nalgebra::Vector2<f64>| p.dot(&(inv * q));
    let (z, v) = (nalgebra::Vector2::new(zm, zu), nalgebra::Vector2::new(vm, vu));
    // Unit residual norms and orthogonal residuals of z and v outside span{m, u}.
    let zz = 1.0 + quad(z, z);
    let vv = 1.0 + quad(v, v);
    let zv = quad(z, v);
    let state = OverlapState::new(Variant::NonlinearRank1, visible.to_vec(), vec![zv, vv, zz])?;
    psd_factor(&state.to_matrix())?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Filter(FilterTaskSpec),
    Oscillator(OscillatorTaskSpec),
    FlipFlop(FlipFlopSpec),
    Decision(DecisionSpec),
    Teacher(TeacherSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Vec<f64>,
    pub loss_kind: LossKind,
}

impl TaskSpec {
    pub fn loss_kind(&self) -> LossKind {
        match self {
            TaskSpec::Filter(_) | TaskSpec::Oscillator(_) => LossKind::Integrated,
            _ => LossKind::MaskedMean,
        }
    }

    /// True if every episode is the same signal (no draw from the seed).
    pub fn is_deterministic(&self) -> bool {
        match self {
            TaskSpec::Filter(f) => f.input_kind == InputKind::Impulse,
            TaskSpec::Oscillator(o) => o.input_kind == InputKind::Impulse,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self {
            TaskSpec::Filter(f) if !(f.c_star > 0.0) => bad(format!("filter c_star must be positive, got {}", f.c_star)),
            TaskSpec::Oscillator(o) if !(o.c_star > 0.0 && o.omega_star > 0.0) => {
                bad("oscillator needs positive c_star and omega_star".into())
            }
            TaskSpec::FlipFlop(f) => {
                if !(f.x_amp > 0.0 && f.y_amp > 0.0) {
                    return bad("flip-flop amplitudes must be positive".into());
                }
                let [lo, hi] = f.isd_range;
                if !(lo <= hi) || f.t_stim + f.t_delay.max(f.transient_mask) >= lo || f.t_stim <= 0.0 {
                    return bad(format!(
                        "flip-flop timing: t_stim {} + delay {} must be below the shortest interval {}",
                        f.t_stim, f.t_delay, lo
                    ));
                }
                Ok(())
            }
            TaskSpec::Decision(d) => {
                let mut sorted: Vec<f64> = d.coherences.clone();
                sorted.sort_by(f64::total_cmp);
                let symmetric = sorted.iter().zip(sorted.iter().rev()).all(|(a, b)| (a + b).abs() < 1e-12);
                if sorted.is_empty() || !symmetric {
                    return bad("decision coherences must be a non-empty set symmetric about 0".into());
                }
                if !(d.noise_std >= 0.0) || !(d.c_max() > 0.0) {
                    return bad("decision noise_std must be >= 0 and c_max > 0".into());
                }
                Ok(())
            }
            TaskSpec::Teacher(t) => t.teacher_state().map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Draws one episode. `rng` is only consumed by stochastic tasks.
    pub fn generate_episode(&self, rng: &mut StreamRng, cfg: &SimConfig) -> Result<Episode> {
        cfg.validate()?;
        let k_max = cfg.n_steps();
        let loss_kind = self.loss_kind();
        let ep = match self {
            TaskSpec::Filter(f) => {
                let input = drive(f.input_kind, rng, cfg);
                let target = filter_response(f.a_star, f.c_star, &input, cfg.dt);
                Episode { input, target, mask: vec![1.0; k_max], loss_kind }
            }
            TaskSpec::Oscillator(o) => {
                let input = drive(o.input_kind, rng, cfg);
                let target = oscillator_response(o.c_star, o.omega_star, &input, cfg.dt);
                Episode { input, target, mask: vec![1.0; k_max], loss_kind }
            }
            TaskSpec::FlipFlop(f) => flip_flop(f, rng, cfg),
            TaskSpec::Decision(d) => decision(d, rng, cfg),
            TaskSpec::Teacher(t) => {
                let input: Vec<f64> =
                    (0..k_max).map(|_| t.input_std * rng.sample::<f64, _>(StandardNormal)).collect();
                let target = teacher_target(t, &input, cfg)?;
                Episode { input, target, mask: vec![1.0; k_max], loss_kind }
            }
        };
        Ok(ep)
    }
}

fn drive(kind: InputKind, rng: &mut StreamRng, cfg: &SimConfig) -> Vec<f64> {
    match kind {
        InputKind::Impulse => cfg.impulse(),
        InputKind::WhiteNoise => (0..cfg.n_steps()).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

/// Output of the one-pole filter `a e^{−ct}` sampled on the grid. The impulse
/// response is exactly `a e^{−c k dt}` at sample `k`.
pub fn filter_response(a: f64, c: f64, input: &[f64], dt: f64) -> Vec<f64> {
    let decay = (-c * dt).exp();
    let mut y = 0.0;
    input
        .iter()
        .map(|&x| {
            y = decay * y + a * dt * x;
            y
        })
        .collect()
}

/// Output of the damped oscillator `e^{−ct} cos(ωt)` on the grid.
pub fn oscillator_response(c: f64, omega: f64, input: &[f64], dt: f64) -> Vec<f64> {
    let r = (-c * dt).exp();
    let (pr, pi) = (r * (omega * dt).cos(), r * (omega * dt).sin());
    let (mut re, mut im) = (0.0, 0.0);
    input
        .iter()
        .map(|&x| {
            let nr = pr * re - pi * im + dt * x;
            let ni = pr * im + pi * re;
            re = nr;
            im = ni;
            re
        })
        .collect()
}

fn flip_flop(f: &FlipFlopSpec, rng: &mut StreamRng, cfg: &SimConfig) -> Episode {
    let k_max = cfg.n_steps();
    let mut input = vec![0.0; k_max];
    let mut target = vec![0.0; k_max];
    let mut mask = vec![0.0; k_max];
    let [lo, hi] = f.isd_range;
    let draw_isd = |rng: &mut StreamRng| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let hold = f.t_delay.max(f.transient_mask);

    let mut onsets = Vec::new();
    let mut t = draw_isd(rng);
    while t < cfg.horizon_t {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        onsets.push((t, sign));
        t += draw_isd(rng);
    }
    let mut current: Option<(f64, f64)> = None;
    let mut next = 0;
    for k in 0..k_max {
        let tk = cfg.time(k);
        while next < onsets.len() && onsets[next].0 <= tk + 1e-12 {
            current = Some(onsets[next]);
            next += 1;
        }
        if let Some((onset, s)) = current {
            let since = tk - onset;
            if since < f.t_stim - 1e-12 {
                input[k] = s * f.x_amp;
            }
            target[k] = s * f.y_amp;
            if since >= f.t_stim + hold - 1e-12 {
                mask[k] = 1.0;
            }
        }
    }
    Episode { input, target, mask, loss_kind: LossKind::MaskedMean }
}

fn decision(d: &DecisionSpec, rng: &mut StreamRng, cfg: &SimConfig) -> Episode {
    let k_max = cfg.n_steps();
    let c = d.coherences[rng.random_range(0..d.coherences.len())];
    let level = d.y_amp * c / d.c_max();
    let mut input = vec![0.0; k_max];
    let mut target = vec![0.0; k_max];
    let mut mask = vec![0.0; k_max];
    for k in 0..k_max {
        let tk = cfg.time(k);
        if tk < d.t_stim - 1e-12 {
            let xi: f64 = StandardNormal.sample(rng);
            input[k] = c + d.noise_std * xi;
        } else if tk >= d.t_stim + d.t_delay - 1e-12 {
            target[k] = level;
            mask[k] = 1.0;
        }
    }
    Episode { input, target, mask, loss_kind: LossKind::MaskedMean }
}

/// Output of the nonlinear teacher network for a given input.
pub fn teacher_target(spec: &TeacherSpec, input: &[f64], cfg: &SimConfig) -> Result<Vec<f64>> {
    let teacher = spec.teacher_state()?;
    Ok(simulate_nonlinear_r1(&teacher, input, cfg)?.output)
}

impl Episode {
    pub fn loss(&self, output: &[f64], dt: f64) -> f64 {
        let sse: f64 = output
            .iter()
            .zip(&self.target)
            .zip(&self.mask)
            .map(|((y, t), m)| if *m == 0.0 { 0.0 } else { m * (y - t) * (y - t) })
            .sum();
        match self.loss_kind {
            LossKind::Integrated => sse * dt,
            LossKind::MaskedMean => {
                let w: f64 = self.mask.iter().sum();
                if w > 0.0 {
                    sse / w
                } else {
                    0.0
                }
            }
        }
    }

    /// `∂L/∂ŷ_k` for every output sample.
    pub fn loss_grad(&self, output: &[f64], dt: f64) -> Vec<f64> {
        let scale = match self.loss_kind {
            LossKind::Integrated => dt,
            LossKind::MaskedMean => {
                let w: f64 = self.mask.iter().sum();
                if w > 0.0 {
                    1.0 / w
                } else {
                    0.0
                }
            }
        };
        output
            .iter()
            .zip(&self.target)
            .zip(&self.mask)
            .map(|((y, t), m)| if *m == 0.0 { 0.0 } else { 2.0 * scale * m * (y - t) })
            .collect()
    }

    pub fn with_label_noise(mut self, std: f64, rng: &mut StreamRng) -> Self {
        if std > 0.0 {
            for t in &mut self.target {
                *t += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn filter_impulse_episode() {
        let spec = TaskSpec::Filter(FilterTaskSpec::default());
        let ep = spec.generate_episode(&mut stream(0, &[]), &cfg()).unwrap();
        assert_eq!(ep.target.len(), 800);
        for (k, y) in ep.target.iter().enumerate() {
            assert!((y - (-0.2 * cfg().time(k)).exp()).abs() < 1e-12);
        }
        assert!(ep.mask.iter().all(|&m| m == 1.0));
        assert!(spec.is_deterministic());
    }

    #[test]
    fn oscillator_impulse_episode() {
        let spec = TaskSpec::Oscillator(OscillatorTaskSpec::default());
        let ep = spec.generate_episode(&mut stream(0, &[]), &cfg()).unwrap();
        for (k, y) in ep.target.iter().enumerate() {
            let t = cfg().time(k);
            assert!((y - (-0.3 * t).exp() * (2.0 * t).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_flop_structure() {
        let spec = FlipFlopSpec::default();
        let task = TaskSpec::FlipFlop(spec.clone());
        task.validate().unwrap();
        for seed in 0..20 {
            let ep = task.generate_episode(&mut stream(seed, &[]), &cfg()).unwrap();
            let mut pulses = 0;
            for k in 0..ep.input.len() {
                if ep.input[k] != 0.0 {
                    assert_eq!(ep.mask[k], 0.0, "mask must be off during pulses");
                    assert_eq!(ep.input[k].abs(), spec.x_amp);
                    if k == 0 || ep.input[k - 1] == 0.0 {
                        pulses += 1;
                    }
                }
                if ep.mask[k] == 1.0 {
                    assert_eq!(ep.target[k].abs(), spec.y_amp);
                }
            }
            assert!((3..=10).contains(&pulses), "{pulses} pulses");
            // Target after a + pulse is +y_amp while the mask is on.
            let first = ep.input.iter().position(|&x| x != 0.0).unwrap();
            let sign = ep.input[first].signum();
            let on = (first..ep.mask.len()).find(|&k| ep.mask[k] == 1.0).unwrap();
            assert_eq!(ep.target[on], sign * spec.y_amp);
            assert!(cfg().time(on) - cfg().time(first) >= spec.t_stim + spec.t_delay - 1e-9);
        }
    }

    #[test]
    fn flip_flop_rejects_bad_timing() {
        let spec = FlipFlopSpec { t_delay: 3.0, ..FlipFlopSpec::default() };
        assert!(TaskSpec::FlipFlop(spec).validate().is_err());
    }

    #[test]
    fn decision_structure() {
        let d = DecisionSpec::default();
        assert_eq!(d.c_max(), 16.0);
        let task = TaskSpec::Decision(d);
        task.validate().unwrap();
        let mut seen_full = false;
        for seed in 0..40 {
            let ep = task.generate_episode(&mut stream(seed, &[]), &cfg()).unwrap();
            let c = ep.input[0].round();
            let on = ep.mask.iter().position(|&m| m == 1.0).unwrap();
            assert!((cfg().time(on) - 9.0).abs() < 1e-9);
            assert!((ep.target[on] - c / 16.0).abs() < 1e-12);
            if c == 16.0 {
                assert_eq!(ep.target[on], 1.0);
                seen_full = true;
            }
            assert!(ep.input[cfg().n_steps() - 1] == 0.0);
        }
        assert!(seen_full);
        let asym = DecisionSpec { coherences: vec![1.0, 2.0], ..DecisionSpec::default() };
        assert!(TaskSpec::Decision(asym).validate().is_err());
    }

    #[test]
    fn teacher_zero_input_gives_zero_target() {
        let spec = TeacherSpec::default();
        let y = teacher_target(&spec, &vec![0.0; cfg().n_steps()], &cfg()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let s = spec.teacher_state().unwrap();
        assert_eq!(s.visible, DEFAULT_TEACHER.to_vec());
    }

    #[test]
    fn teacher_student_identity_has_zero_loss() {
        let spec = TeacherSpec::default();
        let task = TaskSpec::Teacher(spec.clone());
        let ep = task.generate_episode(&mut stream(5, &[]), &cfg()).unwrap();
        let student = spec.teacher_state().unwrap();
        let y = simulate_nonlinear_r1(&student, &ep.input, &cfg()).unwrap().output;
        assert_eq!(ep.loss(&y, cfg().dt), 0.0);
    }

    #[test]
    fn unrealizable_teacher_rejected() {
        let spec = TeacherSpec { teacher_overlaps: vec![0.5, 2.3, 2.0, 1.5, 3.0, 1.0, 1.0], input_std: 1.0 };
        assert!(matches!(spec.teacher_state(), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn episodes_are_reproducible() {
        for task in [
            TaskSpec::FlipFlop(FlipFlopSpec::default()),
            TaskSpec::Decision(DecisionSpec::default()),
            TaskSpec::Teacher(TeacherSpec::default()),
            TaskSpec::Filter(FilterTaskSpec { input_kind: InputKind::WhiteNoise, ..Default::default() }),
        ] {
            let a = task.generate_episode(&mut stream(77, &[1, 2]), &cfg()).unwrap();
            let b = task.generate_episode(&mut stream(77, &[1, 2]), &cfg()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn masked_targets_do_not_affect_loss() {
        let task = TaskSpec::FlipFlop(FlipFlopSpec::default());
        let ep = task.generate_episode(&mut stream(3, &[]), &cfg()).unwrap();
        let out: Vec<f64> = (0..ep.input.len()).map(|k| (k as f64 * 0.01).sin()).collect();
        let mut flipped = ep.clone();
        for (t, m) in flipped.target.iter_mut().zip(&ep.mask) {
            if *m == 0.0 {
                *t = -*t + 17.0;
            }
        }
        assert_eq!(ep.loss(&out, 0.025), flipped.loss(&out, 0.025));
    }

    #[test]
    fn loss_grad_matches_difference() {
        let task = TaskSpec::Decision(DecisionSpec::default());
        let ep = task.generate_episode(&mut stream(8, &[]), &cfg()).unwrap();
        let out: Vec<f64> = (0..ep.input.len()).map(|k| (k as f64 * 0.03).cos()).collect();
        let g = ep.loss_grad(&out, 0.025);
        for k in [0, 400, 700] {
            let mut p = out.clone();
            p[k] += 1e-6;
            let mut m = out.clone();
            m[k] -= 1e-6;
            let fd = (ep.loss(&p, 0.025) - ep.loss(&m, 0.025)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }
}
