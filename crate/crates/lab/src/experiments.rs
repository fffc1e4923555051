//! Execution of each experiment kind into traces, metrics and tables.

use std::collections::BTreeMap;

use lowrank_core::analysis::{decode_history, degeneracy_probe, functional_twin_targets, max_relative_deviation};
use lowrank_core::analysis::{DecodeDataset, FeatureSet};
use lowrank_core::effective::{self, SimConfig};
use lowrank_core::invariants::conservation_report;
use lowrank_core::network::{self, extract_overlaps, gaussianity_qq, sample_iid, sample_prescribed, Activation};
use lowrank_core::network::ParameterVectors;
use lowrank_core::rng::{derive_seed, stream, TAG_EPISODE};
use lowrank_core::tasks::TaskSpec;
use lowrank_core::training::{
    sample_overlap_init, train, train_twins, Model, Outcome, Phase, ProtocolSpec, Space, TrainConfig, TrainTrace,
};
use lowrank_core::{OverlapState, Variant};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::{
    DegeneracyExperiment, Experiment, ExperimentConfig, InitSpec, MeanFieldExperiment, ProtocolExperiment,
    SpaceComparison, SweepAt, TwinsExperiment,
};
use crate::{LabError, Result};

// Seed namespaces of the lab, disjoint from the core's tags.
const TAG_LAB_INIT: u64 = 101;
const TAG_LAB_PAIR: u64 = 102;
const TAG_LAB_SWEEP: u64 = 103;
const TAG_LAB_PROBE: u64 = 104;

/// A CSV file produced by an experiment in addition to the standard ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub csv: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Labelled training traces.
    pub runs: Vec<(String, TrainTrace)>,
    pub metrics: BTreeMap<String, f64>,
    pub tables: Vec<Table>,
}

impl RunOutput {
    fn new() -> Self {
        Self { runs: Vec::new(), metrics: BTreeMap::new(), tables: Vec::new() }
    }

    /// First run that stopped early, if any.
    pub fn divergence(&self) -> Option<String> {
        self.runs.iter().find_map(|(label, t)| match &t.outcome {
            Outcome::Diverged { epoch, loss, reason } => {
                Some(format!("run {label} diverged at epoch {epoch} (loss {loss}): {reason}"))
            }
            Outcome::Completed => None,
        })
    }

    fn set(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }
}

/// Runs the experiment described by a resolved config.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut out = match &cfg.experiment {
        Experiment::SpaceComparison(x) => space_comparison(x, cfg)?,
        Experiment::Protocol(x) => protocol(x, cfg)?,
        Experiment::Twins(x) => twins(x, cfg)?,
        Experiment::Degeneracy(x) => degeneracy(x, cfg)?,
        Experiment::MeanFieldValidity(x) => mean_field(x, cfg)?,
        Experiment::PropertySuite(x) => {
            let mut out = RunOutput::new();
            for p in &x.properties {
                out.metrics.extend(crate::properties::run(p, cfg.seed, &cfg.sim)?);
            }
            out
        }
    };
    for (label, trace) in &out.runs {
        let metrics = trace_metrics(label, trace);
        out.metrics.extend(metrics);
    }
    Ok(out)
}

/// Overlap matrix of the starting point; `None` for i.i.d. vectors.
fn init_matrix(init: &InitSpec, variant: Variant, seed: u64) -> Result<Option<DMatrix<f64>>> {
    match init {
        InitSpec::Iid => Ok(None),
        InitSpec::Prescribed { matrix } => {
            let k = variant.n_vectors();
            if matrix.len() != k || matrix.iter().any(|r| r.len() != k) {
                return Err(LabError::Config(format!("{variant:?} needs a {k}x{k} overlap matrix")));
            }
            let m = DMatrix::from_fn(k, k, |i, j| matrix[i][j]);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(LabError::Config("prescribed overlap matrix is not symmetric".into()));
            }
            Ok(Some(m))
        }
        InitSpec::RandomOverlaps { cross_var, norm_range } => {
            let s = sample_overlap_init(variant, *cross_var, *norm_range, derive_seed(seed, &[TAG_LAB_INIT]))?;
            Ok(Some(s.to_matrix()))
        }
    }
}

fn init_params(init: &InitSpec, variant: Variant, n: usize, seed: u64) -> Result<ParameterVectors> {
    match init_matrix(init, variant, seed)? {
        None => Ok(sample_iid(variant.rank(), n, seed)?),
        Some(m) => Ok(sample_prescribed(&m, n, seed)?),
    }
}

fn init_overlaps(init: &InitSpec, variant: Variant, seed: u64) -> Result<OverlapState> {
    match init_matrix(init, variant, seed)? {
        None => Err(LabError::Config("overlap-only runs need prescribed or random_overlaps init".into())),
        Some(m) => Ok(OverlapState::from_matrix(variant, &m)?),
    }
}

fn single_phase(task: &TaskSpec, epochs: usize) -> ProtocolSpec {
    ProtocolSpec { phases: vec![Phase::new("train", task.clone(), epochs)] }
}

fn space_name(space: Space) -> &'static str {
    match space {
        Space::Parameter => "parameter",
        Space::Overlap => "overlap",
        Space::OverlapNaive => "overlap_naive",
    }
}

fn space_comparison(x: &SpaceComparison, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let params = init_params(&x.init, x.variant, x.n, cfg.seed)?;
    let protocol = single_phase(&x.task, cfg.train.epochs);
    let traces: Vec<Result<TrainTrace>> = x
        .spaces
        .par_iter()
        .map(|&space| {
            let tc = TrainConfig { space, ..cfg.train.clone() };
            let init = Model::Params { params: params.clone(), variant: x.variant };
            Ok(train(init, &protocol, &tc, &cfg.sim)?)
        })
        .collect();
    let mut out = RunOutput::new();
    for (&space, trace) in x.spaces.iter().zip(traces) {
        out.runs.push((space_name(space).to_string(), trace?));
    }
    if let Some(reference) = out.runs.iter().position(|(l, _)| l == "parameter") {
        let base = &out.runs[reference].1;
        let mut found = Vec::new();
        for (label, trace) in &out.runs {
            if label == "parameter" {
                continue;
            }
            found.push((format!("max_rel_dev.{label}"), max_relative_deviation(&base.losses(), &trace.losses())));
            let dev = base
                .records
                .iter()
                .zip(&trace.records)
                .flat_map(|(a, b)| a.overlaps.values().zip(b.overlaps.values()).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max);
            found.push((format!("max_overlap_dev.{label}"), dev));
        }
        out.metrics.extend(found);
    }
    Ok(out)
}

fn checkpoint_model(trace: &TrainTrace, tag: &str, variant: Variant) -> Result<Model> {
    let ck = trace
        .checkpoint(tag)
        .ok_or_else(|| LabError::Config(format!("checkpoint {tag} not found")))?;
    Ok(match &ck.params {
        Some(p) => Model::Params { params: p.clone(), variant },
        None => Model::Overlaps(ck.overlaps.clone()),
    })
}

fn protocol(x: &ProtocolExperiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let init = if cfg.train.space == Space::Parameter {
        Model::Params { params: init_params(&x.init, x.variant, x.n, cfg.seed)?, variant: x.variant }
    } else {
        match x.init {
            InitSpec::Iid => Model::Overlaps(extract_overlaps(&init_params(&x.init, x.variant, x.n, cfg.seed)?, x.variant)?),
            _ => Model::Overlaps(init_overlaps(&x.init, x.variant, cfg.seed)?),
        }
    };
    let main = train(init, &ProtocolSpec { phases: x.phases.clone() }, &cfg.train, &cfg.sim)?;
    let mut out = RunOutput::new();
    let completed = main.is_completed();
    out.runs.push(("main".into(), main));
    if completed {
        let starts: Vec<Model> = x
            .branches
            .iter()
            .map(|b| checkpoint_model(&out.runs[0].1, &b.from, x.variant))
            .collect::<Result<_>>()?;
        let branches: Vec<Result<TrainTrace>> = x
            .branches
            .par_iter()
            .zip(starts)
            .map(|(b, start)| Ok(train(start, &ProtocolSpec { phases: b.phases.clone() }, &cfg.train, &cfg.sim)?))
            .collect();
        for (b, trace) in x.branches.iter().zip(branches) {
            out.runs.push((b.label.clone(), trace?));
        }
    }
    for [a, b] in &x.compare {
        let sa = find_checkpoint(&out.runs, a)?;
        let sb = find_checkpoint(&out.runs, b)?;
        let diff = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        let vis = diff(&sa.visible, &sb.visible);
        let inv = diff(&sa.invisible, &sb.invisible);
        out.set(format!("diff.{a}.{b}.visible"), vis);
        out.set(format!("diff.{a}.{b}.invisible"), inv);
        out.set(format!("diff.{a}.{b}.all"), vis.max(inv));
    }
    Ok(out)
}

/// Resolves `run:tag` (or `tag` for the main run) to checkpoint overlaps.
fn find_checkpoint(runs: &[(String, TrainTrace)], key: &str) -> Result<OverlapState> {
    let (run, tag) = key.split_once(':').unwrap_or(("main", key));
    let trace = runs
        .iter()
        .find(|(l, _)| l == run)
        .map(|(_, t)| t)
        .ok_or_else(|| LabError::Config(format!("no run named {run}")))?;
    trace
        .checkpoint(tag)
        .map(|c| c.overlaps.clone())
        .ok_or_else(|| LabError::Config(format!("run {run} has no checkpoint {tag}")))
}

fn twins(x: &TwinsExperiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let first_a = Phase::new("A", x.task_a.clone(), x.epochs_ab).with(x.overrides_ab.clone());
    let first_b = Phase::new("B", x.task_b.clone(), x.epochs_ab).with(x.overrides_ab.clone());
    let common = Phase::new("C", x.task_c.clone(), x.epochs_c).with(x.overrides_c.clone());
    let tc = TrainConfig { space: Space::Overlap, ..cfg.train.clone() };
    let pairs: Vec<Result<(TrainTrace, TrainTrace)>> = (0..x.pairs)
        .into_par_iter()
        .map(|p| {
            let seed = derive_seed(cfg.seed, &[TAG_LAB_PAIR, p as u64]);
            let init = init_overlaps(&x.init, x.variant, seed)?;
            let pcfg = TrainConfig { seed, ..tc.clone() };
            Ok(train_twins(Model::Overlaps(init), [&first_a, &first_b], &common, &pcfg, &cfg.sim)?)
        })
        .collect();
    let pairs: Vec<(TrainTrace, TrainTrace)> = pairs.into_iter().collect::<Result<_>>()?;

    let mut out = RunOutput::new();
    let mut csv = String::from("checkpoint,features,mean,sd\n");
    if pairs.iter().all(|(a, b)| a.is_completed() && b.is_completed()) {
        for ck in ["initial", "post_ab", "post_c"] {
            for (set, name) in [(FeatureSet::Visible, "visible"), (FeatureSet::Invisible, "invisible")] {
                let data = DecodeDataset::from_twins(&pairs, ck, set)?;
                let r = decode_history(&data, &x.decode, cfg.seed)?;
                csv.push_str(&format!("{ck},{name},{},{}\n", r.mean, r.sd));
                out.set(format!("decode.{ck}.{name}.mean"), r.mean);
                out.set(format!("decode.{ck}.{name}.sd"), r.sd);
                // Distance from chance in units of the split-to-split spread.
                let z = if r.sd > 0.0 { (r.mean - 0.5).abs() / r.sd } else if r.mean == 0.5 { 0.0 } else { f64::INFINITY };
                out.set(format!("decode.{ck}.{name}.chance_z"), z);
            }
        }
        for phase in ["post_ab", "post_c"] {
            let mut worst_final: f64 = 0.0;
            let mut worst_min: f64 = 0.0;
            for (a, b) in &pairs {
                for t in [a, b] {
                    let losses: Vec<f64> = t.phase_records(phase).map(|r| r.loss).collect();
                    worst_final = worst_final.max(*losses.last().unwrap_or(&f64::NAN));
                    worst_min = worst_min.max(losses.iter().copied().fold(f64::INFINITY, f64::min));
                }
            }
            out.set(format!("loss.{phase}.worst_final"), worst_final);
            out.set(format!("loss.{phase}.worst_min"), worst_min);
        }
        // Largest visible and invisible gap between twins after the common task.
        let gap = |pick: fn(&OverlapState) -> &Vec<f64>| {
            pairs
                .iter()
                .map(|(a, b)| {
                    let (sa, sb) = (&a.checkpoint("post_c").unwrap().overlaps, &b.checkpoint("post_c").unwrap().overlaps);
                    pick(sa).iter().zip(pick(sb)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        };
        out.set("twin_gap.post_c.visible", gap(|s| &s.visible));
        out.set("twin_gap.post_c.invisible", gap(|s| &s.invisible));
    }
    out.tables.push(Table { file: "decode.csv".into(), csv });
    for (p, (a, b)) in pairs.into_iter().enumerate() {
        out.runs.push((format!("pair{p}.a"), a));
        out.runs.push((format!("pair{p}.b"), b));
    }
    Ok(out)
}

fn degeneracy(x: &DegeneracyExperiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (a, b) = functional_twin_targets();
    let r = degeneracy_probe((&a, &b), &x.task, x.n, x.epochs, &cfg.train, &cfg.sim)?;
    let mut out = RunOutput::new();
    out.set("pre_output_distance", r.pre_output_distance);
    out.set("noise_output_distance", r.noise_output_distance);
    out.set("max_output_divergence", r.output_divergence.iter().copied().fold(0.0, f64::max));
    out.set("divergence_epoch", r.divergence_epoch.map_or(f64::INFINITY, |e| e as f64));
    out.set("loss_divergence", r.loss_divergence);
    out.set("ode_deviation.max", r.ode_deviation[0].max(r.ode_deviation[1]));
    let mut csv = String::from("epoch,output_distance\n");
    for (e, d) in r.output_divergence.iter().enumerate() {
        csv.push_str(&format!("{e},{d}\n"));
    }
    out.tables.push(Table { file: "output_divergence.csv".into(), csv });
    Ok(out)
}

/// Root-mean-square gap between the full network and the reduced model
/// driven by the network's own overlaps, relative to the network output.
fn output_mismatch(params: &ParameterVectors, variant: Variant, inputs: &[Vec<f64>], sim: &SimConfig) -> Result<f64> {
    let state = extract_overlaps(params, variant)?;
    let act = Activation::for_variant(variant);
    let (mut num, mut den) = (0.0, 0.0);
    for x in inputs {
        let full = network::simulate(params, act, x, sim)?.output;
        let reduced = effective::simulate(&state, x, sim)?.output;
        for (f, r) in full.iter().zip(&reduced) {
            num += (f - r) * (f - r);
            den += f * f;
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

fn mean_field(x: &MeanFieldExperiment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let variant = Variant::NonlinearRank1;
    let params = init_params(&x.init, variant, x.n, cfg.seed)?;
    let inputs: Vec<Vec<f64>> = (0..x.probe_episodes)
        .map(|e| Ok(x.task.generate_episode(&mut stream(cfg.seed, &[TAG_LAB_PROBE, TAG_EPISODE, e as u64]), &cfg.sim)?.input))
        .collect::<Result<_>>()?;
    let mut out = RunOutput::new();
    out.set("mismatch.initial", output_mismatch(&params, variant, &inputs, &cfg.sim)?);

    let arms: Vec<Result<(TrainTrace, Option<TrainTrace>)>> = x
        .arms
        .par_iter()
        .map(|arm| {
            let protocol = ProtocolSpec {
                phases: vec![Phase::new(arm.label.clone(), x.task.clone(), arm.epochs).with(arm.overrides.clone())],
            };
            let init = || Model::Params { params: params.clone(), variant };
            let pcfg = TrainConfig { space: Space::Parameter, ..cfg.train.clone() };
            let full = train(init(), &protocol, &pcfg, &cfg.sim)?;
            let ode = if arm.with_overlap_twin {
                let ocfg = TrainConfig { space: Space::Overlap, ..cfg.train.clone() };
                Some(train(init(), &protocol, &ocfg, &cfg.sim)?)
            } else {
                None
            };
            Ok((full, ode))
        })
        .collect();

    let mut qq_csv = String::from("arm,m,u,v,z\n");
    let mut trained = None;
    for (arm, result) in x.arms.iter().zip(arms) {
        let (full, ode) = result?;
        if let (Some(p), true) = (full.final_model.params(), full.is_completed()) {
            let qq = gaussianity_qq(p)?;
            qq_csv.push_str(&format!("{},{},{},{},{}\n", arm.label, qq[0], qq[1], qq[2], qq[3]));
            out.set(format!("qq_min.{}", arm.label), qq.iter().copied().fold(f64::INFINITY, f64::min));
            out.set(format!("mismatch.{}", arm.label), output_mismatch(p, variant, &inputs, &cfg.sim)?);
            if trained.is_none() {
                trained = Some(extract_overlaps(p, variant)?);
            }
        }
        if let Some(ode) = ode {
            out.set(format!("loss_dev.{}", arm.label), max_relative_deviation(&full.losses(), &ode.losses()));
            out.runs.push((format!("{}.overlap", arm.label), ode));
        }
        out.runs.push((arm.label.clone(), full));
    }
    out.tables.push(Table { file: "qq.csv".into(), csv: qq_csv });

    if !x.sweep_n.is_empty() {
        let state = match x.sweep_at {
            SweepAt::Initial => extract_overlaps(&params, variant)?,
            SweepAt::Trained => match trained {
                Some(s) => s,
                // The first arm diverged: no trained state to sweep.
                None => return Ok(out),
            },
        };
        let target = state.to_matrix();
        let mut csv = String::from("n,seed,rms\n");
        let mut means = Vec::new();
        for &n in &x.sweep_n {
            let rms: Vec<f64> = (0..x.sweep_seeds)
                .into_par_iter()
                .map(|s| {
                    let p = sample_prescribed(&target, n, derive_seed(cfg.seed, &[TAG_LAB_SWEEP, n as u64, s as u64]))?;
                    output_mismatch(&p, variant, &inputs, &cfg.sim)
                })
                .collect::<Result<_>>()?;
            for (s, r) in rms.iter().enumerate() {
                csv.push_str(&format!("{n},{s},{r}\n"));
            }
            let mean = rms.iter().sum::<f64>() / rms.len() as f64;
            out.set(format!("sweep.rms.n{n}"), mean);
            means.push(mean);
        }
        let worst_ratio = means.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        out.set("sweep.max_ratio", worst_ratio);
        out.tables.push(Table { file: "sweep.csv".into(), csv });
    }
    Ok(out)
}

/// Loss, final overlaps and invariant drift of one trace.
fn trace_metrics(label: &str, trace: &TrainTrace) -> Vec<(String, f64)> {
    let mut m = Vec::new();
    if let Some(last) = trace.records.last() {
        m.push((format!("final_loss.{label}"), last.loss));
    }
    let min_loss = trace.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    m.push((format!("min_loss.{label}"), min_loss));
    if let Some(ck) = trace.checkpoints.last() {
        let s = &ck.overlaps;
        for (name, v) in s.variant.names().zip(s.values()) {
            m.push((format!("final.{label}.{name}"), *v));
        }
        if let (Some(zu), Some(vm)) = (s.get("zu"), s.get("vm")) {
            m.push((format!("final.{label}.zu_vm"), zu * vm));
        }
    }
    let invariants: Vec<_> = trace.records.iter().map(|r| r.invariants.clone()).collect();
    if let Ok(rep) = conservation_report(&invariants) {
        m.push((format!("drift.{label}.c"), rep.max_c_drift()));
        if let Some(k) = rep.k_drift {
            m.push((format!("drift.{label}.k"), k));
        }
        m.push((format!("drift.{label}.max"), rep.max_c_drift().max(rep.k_drift.unwrap_or(0.0))));
    }
    let warnings = trace.records.iter().filter(|r| r.psd_warning).count();
    m.push((format!("psd_warnings.{label}"), warnings as f64));
    m
}
