//! Optimizers and multi-phase training protocols in parameter space or in
//! overlap space.
//!
//! Learning rates follow the mean-field convention by default: a parameter
//! step is `θ ← θ − η·N·∇_θ L`, which moves every overlap by an amount of
//! order `η` independent of `N`. Overlap-space steps then use the unit-scale
//! Gram matrices with the same `η`, so both spaces describe the same
//! trajectory epoch by epoch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effective::SimConfig;
use crate::gradients::{bptt_effective_batch, bptt_full_batch};
use crate::invariants::{InvariantRecord, DEFAULT_K_SAMPLES};
use crate::linalg::psd_factor;
use crate::network::{extract_overlaps, gaussianity_qq, Activation, ParameterVectors};
use crate::overlap::{euler_step, lift_step, naive_step, GradientVector, OverlapState, Variant};
use crate::rng::{stream, TAG_EPISODE, TAG_INIT, TAG_LABEL_NOISE};
use crate::tasks::{Episode, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Parameter,
    /// Preconditioned overlap dynamics.
    Overlap,
    /// Plain descent on the visible overlaps, no Gram matrix.
    OverlapNaive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapStepper {
    /// Exact overlap image of a discrete gradient step, `S ← M S Mᵀ`.
    Lift,
    /// Explicit Euler step of the overlap ODE.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// Parameter steps of `η·N·∇_θ L`; overlap steps at unit scale.
    MeanField,
    /// Parameter steps of `η·∇_θ L`; overlap steps with the `1/N` Gram
    /// matrices (needs `gram_scale_n`).
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply η by `factor` each time the loss drops below `threshold`
    /// from above.
    DecayOnThreshold { threshold: f64, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    /// Standard deviation of Gaussian noise added to every target sample.
    pub label_noise_std: f64,
    pub space: Space,
    pub stepper: OverlapStepper,
    pub lr_scaling: LrScaling,
    pub gram_scale_n: Option<f64>,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub ckpt_every: usize,
    /// Keep one record every `log_every` epochs (phase ends always logged).
    pub log_every: usize,
    pub k_samples: Vec<(usize, usize)>,
    /// Compute Q–Q Gaussianity at checkpoints (parameter space only).
    pub qq_at_checkpoints: bool,
    /// Filter target `(a*, c*)` for balance diagnostics.
    pub balance_target: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 5e-3,
            epochs: 1000,
            batch_size: 1,
            optimizer: Optimizer::Gd,
            adam: AdamConfig::default(),
            label_noise_std: 0.0,
            space: Space::Parameter,
            stepper: OverlapStepper::Lift,
            lr_scaling: LrScaling::MeanField,
            gram_scale_n: None,
            schedule: LrSchedule::Constant,
            seed: 0,
            divergence_threshold: 1e6,
            ckpt_every: 250,
            log_every: 1,
            k_samples: DEFAULT_K_SAMPLES.to_vec(),
            qq_at_checkpoints: false,
            balance_target: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.log_every == 0 || self.ckpt_every == 0 {
            return bad("log_every and ckpt_every must be at least 1");
        }
        if !(self.label_noise_std >= 0.0) {
            return bad("label_noise_std must be non-negative");
        }
        if self.space == Space::Overlap && self.optimizer == Optimizer::Adam {
            return bad("Adam has no closed overlap-space image; use parameter space or overlap_naive");
        }
        if self.lr_scaling == LrScaling::Raw && self.space != Space::Parameter && self.gram_scale_n.is_none() {
            return bad("raw learning-rate scaling in overlap space needs gram_scale_n");
        }
        if let LrSchedule::DecayOnThreshold { factor, .. } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return bad("schedule factor must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseOverrides {
    pub eta: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<Optimizer>,
    pub label_noise_std: Option<f64>,
    pub schedule: Option<LrSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub label: String,
    pub task: TaskSpec,
    pub epochs: usize,
    #[serde(default)]
    pub overrides: PhaseOverrides,
    /// Index used to key episode streams; defaults to the phase position.
    /// Phases sharing a key see identical episodes.
    #[serde(default)]
    pub stream: Option<u64>,
}

impl Phase {
    pub fn new(label: impl Into<String>, task: TaskSpec, epochs: usize) -> Self {
        Self { label: label.into(), task, epochs, overrides: PhaseOverrides::default(), stream: None }
    }

    pub fn with(mut self, overrides: PhaseOverrides) -> Self {
        self.overrides = overrides;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub phases: Vec<Phase>,
}

/// A model being trained: full vectors or overlaps only.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Params { params: ParameterVectors, variant: Variant },
    Overlaps(OverlapState),
}

impl Model {
    pub fn variant(&self) -> Variant {
        match self {
            Model::Params { variant, .. } => *variant,
            Model::Overlaps(s) => s.variant,
        }
    }

    pub fn overlaps(&self) -> Result<OverlapState> {
        match self {
            Model::Params { params, variant } => extract_overlaps(params, *variant),
            Model::Overlaps(s) => Ok(s.clone()),
        }
    }

    pub fn params(&self) -> Option<&ParameterVectors> {
        match self {
            Model::Params { params, .. } => Some(params),
            Model::Overlaps(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub phase: String,
    pub phase_epoch: usize,
    /// Batch-mean loss at the state before this epoch's update.
    pub loss: f64,
    pub eta: f64,
    pub overlaps: OverlapState,
    pub invariants: InvariantRecord,
    pub grad_norm: f64,
    /// Smallest eigenvalue of the overlap matrix fell below `−1e−8·trace`.
    pub psd_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    /// Number of updates applied before this snapshot.
    pub epoch: usize,
    pub overlaps: OverlapState,
    pub params: Option<ParameterVectors>,
    pub qq: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Diverged { epoch: usize, loss: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub outcome: Outcome,
    pub final_model: Model,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn checkpoint(&self, tag: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.tag == tag)
    }

    pub fn phase_records(&self, phase: &str) -> impl Iterator<Item = &TrainRecord> {
        let phase = phase.to_string();
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn is_completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, eta: f64, cfg: &AdamConfig) {
    if state.m.len() != theta.len() {
        *state = AdamState::new(theta.len());
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= eta * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Draws the episodes for one epoch. Deterministic noise-free tasks yield a
/// single episode, which gives the same batch mean.
pub fn epoch_episodes(
    task: &TaskSpec,
    batch: usize,
    label_noise_std: f64,
    seed: u64,
    stream_key: u64,
    epoch: usize,
    cfg: &SimConfig,
) -> Result<Vec<Episode>> {
    let slots = if task.is_deterministic() && label_noise_std == 0.0 { 1 } else { batch };
    (0..slots)
        .map(|b| {
            let tags = [stream_key, epoch as u64, b as u64];
            let mut rng = stream(seed, &[TAG_EPISODE, tags[0], tags[1], tags[2]]);
            let ep = task.generate_episode(&mut rng, cfg)?;
            let mut noise = stream(seed, &[TAG_LABEL_NOISE, tags[0], tags[1], tags[2]]);
            Ok(ep.with_label_noise(label_noise_std, &mut noise))
        })
        .collect()
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    sim: &'a SimConfig,
    model: Model,
    adam: AdamState,
    records: Vec<TrainRecord>,
    checkpoints: Vec<Checkpoint>,
    global_epoch: usize,
}

impl Trainer<'_> {
    fn snapshot(&mut self, tag: String) -> Result<()> {
        let overlaps = self.model.overlaps()?;
        let params = self.model.params().cloned();
        let qq = match (&params, self.cfg.qq_at_checkpoints) {
            (Some(p), true) => Some(gaussianity_qq(p)?),
            _ => None,
        };
        self.checkpoints.push(Checkpoint { tag, epoch: self.global_epoch, overlaps, params, qq });
        Ok(())
    }

    fn invariants(&self, overlaps: &OverlapState) -> InvariantRecord {
        match &self.model {
            Model::Params { params, .. } => {
                InvariantRecord::from_params(params, overlaps, &self.cfg.k_samples, self.cfg.balance_target)
            }
            Model::Overlaps(_) => InvariantRecord::from_state(overlaps, self.cfg.balance_target),
        }
    }

    fn gradient_step(
        &mut self,
        episodes: &[Episode],
        eta: f64,
        optimizer: Optimizer,
    ) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        match (&mut self.model, cfg.space) {
            (Model::Params { params, variant }, Space::Parameter) => {
                let act = Activation::for_variant(*variant);
                let (loss, mut grad) = bptt_full_batch(params, act, episodes, self.sim)?;
                if cfg.lr_scaling == LrScaling::MeanField {
                    let n = params.n() as f64;
                    grad.as_mut_slice().iter_mut().for_each(|g| *g *= n);
                }
                let norm = grad.as_slice().iter().map(|g| g * g).sum::<f64>().sqrt();
                match optimizer {
                    Optimizer::Gd => params.axpy(-eta, &grad)?,
                    Optimizer::Adam => adam_step(params.as_mut_slice(), grad.as_slice(), &mut self.adam, eta, &cfg.adam),
                }
                Ok((loss, norm))
            }
            (Model::Overlaps(state), space) if space != Space::Parameter => {
                let (loss, grad) = bptt_effective_batch(state, episodes, self.sim)?;
                let norm = grad.norm();
                let scale = match cfg.lr_scaling {
                    LrScaling::MeanField => 1.0,
                    LrScaling::Raw => 1.0 / cfg.gram_scale_n.unwrap_or(1.0),
                };
                let next = match (space, optimizer) {
                    (Space::OverlapNaive, Optimizer::Gd) => naive_step(state, &grad, eta)?,
                    (Space::OverlapNaive, Optimizer::Adam) => {
                        let mut next = state.clone();
                        adam_step(&mut next.visible, &grad.values, &mut self.adam, eta, &cfg.adam);
                        next
                    }
                    (_, Optimizer::Adam) => {
                        return Err(Error::InvalidConfig("Adam is not available in preconditioned overlap space".into()))
                    }
                    _ => match cfg.stepper {
                        OverlapStepper::Lift => lift_step(state, &grad, eta * scale)?,
                        OverlapStepper::Euler => euler_step(state, &grad, eta * scale)?,
                    },
                };
                *state = next;
                Ok((loss, norm))
            }
            _ => Err(Error::InvalidConfig(format!("model kind does not match space {:?}", cfg.space))),
        }
    }
}

fn prepare_model(init: Model, cfg: &TrainConfig) -> Result<Model> {
    match (init, cfg.space) {
        (m @ Model::Params { .. }, Space::Parameter) => Ok(m),
        (Model::Overlaps(_), Space::Parameter) => {
            Err(Error::InvalidConfig("parameter-space training needs parameter vectors".into()))
        }
        (m, _) => Ok(Model::Overlaps(m.overlaps()?)),
    }
}

/// Runs every phase of `protocol` from `init`.
pub fn train(init: Model, protocol: &ProtocolSpec, cfg: &TrainConfig, sim: &SimConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    sim.validate()?;
    for phase in &protocol.phases {
        phase.task.validate()?;
    }
    let model = prepare_model(init, cfg)?;
    if let Model::Params { params, variant } = &model {
        if params.rank() != variant.rank() {
            return Err(Error::Dimension(format!("{variant:?} needs rank {} parameters", variant.rank())));
        }
    }
    let mut t = Trainer {
        cfg,
        sim,
        model,
        adam: AdamState::default(),
        records: Vec::new(),
        checkpoints: Vec::new(),
        global_epoch: 0,
    };
    t.snapshot("initial".into())?;
    let mut outcome = Outcome::Completed;

    'phases: for (pi, phase) in protocol.phases.iter().enumerate() {
        let o = &phase.overrides;
        let mut eta = o.eta.unwrap_or(cfg.eta);
        let batch = o.batch_size.unwrap_or(cfg.batch_size);
        let optimizer = o.optimizer.unwrap_or(cfg.optimizer);
        let noise = o.label_noise_std.unwrap_or(cfg.label_noise_std);
        let schedule = o.schedule.unwrap_or(cfg.schedule);
        if optimizer == Optimizer::Adam && cfg.space == Space::Overlap {
            return Err(Error::InvalidConfig("Adam is not available in preconditioned overlap space".into()));
        }
        let key = phase.stream.unwrap_or(pi as u64);
        let mut prev_loss = f64::INFINITY;
        for e in 0..phase.epochs {
            let episodes = epoch_episodes(&phase.task, batch, noise, cfg.seed, key, e, sim)?;
            let overlaps = t.model.overlaps()?;
            let step = t.gradient_step(&episodes, eta, optimizer);
            let (loss, grad_norm) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { what, step }) => {
                    outcome = Outcome::Diverged {
                        epoch: t.global_epoch,
                        loss: f64::NAN,
                        reason: format!("non-finite {what} at step {step}"),
                    };
                    break 'phases;
                }
                Err(err) => return Err(err),
            };
            let last = e + 1 == phase.epochs;
            if e % cfg.log_every == 0 || last || !loss.is_finite() || loss > cfg.divergence_threshold {
                let invariants = t.invariants(&overlaps);
                t.records.push(TrainRecord {
                    epoch: t.global_epoch,
                    phase: phase.label.clone(),
                    phase_epoch: e,
                    loss,
                    eta,
                    psd_warning: !overlaps.is_advisory_psd(),
                    overlaps,
                    invariants,
                    grad_norm,
                });
            }
            if !loss.is_finite() || loss > cfg.divergence_threshold {
                outcome = Outcome::Diverged {
                    epoch: t.global_epoch,
                    loss,
                    reason: format!("loss exceeded {}", cfg.divergence_threshold),
                };
                break 'phases;
            }
            if let LrSchedule::DecayOnThreshold { threshold, factor } = schedule {
                if loss < threshold && prev_loss >= threshold {
                    eta *= factor;
                }
            }
            prev_loss = loss;
            t.global_epoch += 1;
            if !last && t.global_epoch % cfg.ckpt_every == 0 {
                t.snapshot(format!("epoch_{}", t.global_epoch))?;
            }
        }
        t.snapshot(phase.label.clone())?;
    }

    Ok(TrainTrace { records: t.records, checkpoints: t.checkpoints, outcome, final_model: t.model })
}

/// Trains two bit-identical copies of `init`: one on `task_a` then
/// `task_c`, the other on `task_b` then `task_c`. Both branches draw the
/// same phase-C episodes. Checkpoints are tagged `initial`, `post_ab` and
/// `post_c`.
pub fn train_twins(
    init: Model,
    first: [&Phase; 2],
    common: &Phase,
    cfg: &TrainConfig,
    sim: &SimConfig,
) -> Result<(TrainTrace, TrainTrace)> {
    let branch = |p: &Phase| {
        let mut first = p.clone();
        first.label = "post_ab".into();
        first.stream = Some(0);
        let mut last = common.clone();
        last.label = "post_c".into();
        last.stream = Some(1);
        ProtocolSpec { phases: vec![first, last] }
    };
    let a = train(init.clone(), &branch(first[0]), cfg, sim)?;
    let b = train(init, &branch(first[1]), cfg, sim)?;
    Ok((a, b))
}

/// Random realizable nonlinear rank-1 overlaps: cross overlaps
/// `|N(0, var)|`, squared norms `U[lo, hi]`, redrawn until the overlap
/// matrix is positive semidefinite.
pub fn sample_overlap_init(variant: Variant, cross_var: f64, norm_range: [f64; 2], seed: u64) -> Result<OverlapState> {
    let mut rng = stream(seed, &[TAG_INIT, 3]);
    let k = variant.n_vectors();
    for _ in 0..10_000 {
        let mut s = nalgebra::DMatrix::zeros(k, k);
        for i in 0..k {
            s[(i, i)] = rng.random_range(norm_range[0]..=norm_range[1]);
            for j in 0..i {
                let x: f64 = rng.sample(StandardNormal);
                s[(i, j)] = (x * cross_var.sqrt()).abs();
                s[(j, i)] = s[(i, j)];
            }
        }
        if psd_factor(&s).is_ok() && s.clone().symmetric_eigen().eigenvalues.min() > 1e-9 {
            return OverlapState::from_matrix(variant, &s);
        }
    }
    Err(Error::InvalidConfig("could not draw a realizable overlap initialization".into()))
}

/// Gradient of the loss with respect to the visible overlaps for one epoch
/// batch, exposed for tests and diagnostics.
pub fn overlap_gradient(state: &OverlapState, episodes: &[Episode], sim: &SimConfig) -> Result<(f64, GradientVector)> {
    bptt_effective_batch(state, episodes, sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::sample_iid;
    use crate::tasks::{FilterTaskSpec, FlipFlopSpec};

    fn filter_phase(epochs: usize) -> ProtocolSpec {
        ProtocolSpec { phases: vec![Phase::new("A", TaskSpec::Filter(FilterTaskSpec::default()), epochs)] }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut theta = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut st, 0.1, &AdamConfig::default());
        assert_eq!(theta, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_steps_eta() {
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = theta[0];
            adam_step(&mut theta, &[3.7], &mut st, 1e-3, &AdamConfig::default());
            last = before - theta[0];
        }
        assert!((last - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig { space: Space::Overlap, optimizer: Optimizer::Adam, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { eta: 0.0, ..Default::default() }.validate().is_err());
        let raw = TrainConfig { space: Space::Overlap, lr_scaling: LrScaling::Raw, ..Default::default() };
        assert!(raw.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let p = sample_iid(1, 40, 1).unwrap();
        let cfg = TrainConfig { epochs: 20, ..Default::default() };
        let run = || {
            train(Model::Params { params: p.clone(), variant: Variant::LinearRank1 }, &filter_phase(20), &cfg, &sim)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn batch_size_irrelevant_for_deterministic_task() {
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let s = sample_overlap_init(Variant::LinearRank1, 0.4, [0.5, 2.0], 3).unwrap();
        let run = |batch| {
            let cfg = TrainConfig { space: Space::Overlap, batch_size: batch, ..Default::default() };
            train(Model::Overlaps(s.clone()), &filter_phase(10), &cfg, &sim).unwrap()
        };
        assert_eq!(run(1).records, run(8).records);
    }

    #[test]
    fn lift_equals_parameter_step() {
        // One epoch in each space from the same state lands on the same overlaps.
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let p = sample_iid(1, 60, 2).unwrap();
        let init = Model::Params { params: p, variant: Variant::LinearRank1 };
        let param = train(init.clone(), &filter_phase(3), &TrainConfig { eta: 0.01, ..Default::default() }, &sim).unwrap();
        let cfg = TrainConfig { eta: 0.01, space: Space::Overlap, ..Default::default() };
        let over = train(init, &filter_phase(3), &cfg, &sim).unwrap();
        let a = param.final_model.overlaps().unwrap();
        let b = over.final_model.overlaps().unwrap();
        for (x, y) in a.values().zip(b.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn lr_schedule_decays_on_crossing() {
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let s = sample_overlap_init(Variant::LinearRank1, 0.4, [0.5, 2.0], 4).unwrap();
        let cfg = TrainConfig {
            eta: 0.05,
            space: Space::Overlap,
            schedule: LrSchedule::DecayOnThreshold { threshold: 0.05, factor: 0.2 },
            ..Default::default()
        };
        let tr = train(Model::Overlaps(s), &filter_phase(400), &cfg, &sim).unwrap();
        let crossing = tr.records.windows(2).position(|w| w[0].loss >= 0.05 && w[1].loss < 0.05);
        if let Some(i) = crossing {
            assert!((tr.records[i + 2].eta - 0.01).abs() < 1e-15);
        } else {
            assert!(tr.records.iter().all(|r| r.eta == 0.05));
        }
    }

    #[test]
    fn checkpoints_at_boundaries_and_interval() {
        let sim = SimConfig::new(0.1, 5.0).unwrap();
        let s = sample_overlap_init(Variant::LinearRank1, 0.4, [0.5, 2.0], 5).unwrap();
        let cfg = TrainConfig { space: Space::Overlap, ckpt_every: 4, ..Default::default() };
        let protocol = ProtocolSpec {
            phases: vec![
                Phase::new("A", TaskSpec::Filter(FilterTaskSpec::default()), 6),
                Phase::new("B", TaskSpec::Filter(FilterTaskSpec { c_star: 0.4, ..Default::default() }), 5),
            ],
        };
        let tr = train(Model::Overlaps(s), &protocol, &cfg, &sim).unwrap();
        let tags: Vec<&str> = tr.checkpoints.iter().map(|c| c.tag.as_str()).collect();
        assert_eq!(tags, ["initial", "epoch_4", "A", "epoch_8", "B"]);
        assert!(tr.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
        assert_eq!(tr.records.len(), 11);
    }

    #[test]
    fn divergence_is_reported() {
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let s = sample_overlap_init(Variant::LinearRank1, 0.4, [0.5, 2.0], 6).unwrap();
        let cfg = TrainConfig { eta: 50.0, space: Space::Overlap, divergence_threshold: 1e3, ..Default::default() };
        let tr = train(Model::Overlaps(s), &filter_phase(200), &cfg, &sim).unwrap();
        assert!(matches!(tr.outcome, Outcome::Diverged { .. }));
    }

    #[test]
    fn identical_twins_give_identical_traces() {
        let sim = SimConfig::new(0.1, 10.0).unwrap();
        let s = sample_overlap_init(Variant::NonlinearRank1, 0.4, [0.5, 2.0], 7).unwrap();
        let a = Phase::new("A", TaskSpec::FlipFlop(FlipFlopSpec::default()), 5);
        let c = Phase::new("C", TaskSpec::Teacher(Default::default()), 5);
        let cfg = TrainConfig { space: Space::Overlap, batch_size: 4, eta: 0.01, ..Default::default() };
        let (x, y) = train_twins(Model::Overlaps(s), [&a, &a], &c, &cfg, &sim).unwrap();
        assert_eq!(x.records, y.records);
        assert!(x.checkpoint("post_ab").is_some() && x.checkpoint("post_c").is_some());
    }

    #[test]
    fn overlap_init_is_realizable() {
        for seed in 0..20 {
            let s = sample_overlap_init(Variant::NonlinearRank1, 0.4, [0.5, 2.0], seed).unwrap();
            s.check_realizable().unwrap();
            assert!(s.values().all(|&v| v >= 0.0));
        }
    }
}
