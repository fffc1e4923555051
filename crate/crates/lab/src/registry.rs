//! Built-in experiment configs.
//!
//! Check names start with `c<k>.` where `k` is the acceptance criterion the
//! check belongs to; the acceptance test groups outcomes by that prefix.
//! `figs/*.json` holds the same configs as files and is kept in sync by a
//! test.

use lowrank_core::analysis::DecodeConfig;
use lowrank_core::effective::SimConfig;
use lowrank_core::tasks::{
    DecisionSpec, FilterTaskSpec, FlipFlopSpec, InputKind, OscillatorTaskSpec, TaskSpec, TeacherSpec,
};
use lowrank_core::training::{LrSchedule, Optimizer, Phase, PhaseOverrides, Space, TrainConfig};
use lowrank_core::Variant;

use crate::config::{
    Branch, CheckSpec, DegeneracyExperiment, Experiment, ExperimentConfig, InitSpec, MeanFieldExperiment,
    ProtocolExperiment, Property, PropertySuite, SpaceComparison, SweepAt, TrainingArm, TwinsExperiment,
};

pub const IDS: [&str; 14] = [
    "fig1c",
    "fig2_degeneracy",
    "fig3_aba",
    "fig4_flipflop",
    "fig4_twins",
    "fig5_filter",
    "fig6_noise_drift",
    "fig7_adam",
    "fig8_gaussianity",
    "fig12_rank2",
    "prop_linear_exactness",
    "prop_gram",
    "prop_gradients",
    "prop_suite",
];

pub fn get(id: &str) -> Option<ExperimentConfig> {
    let cfg = match id {
        "fig1c" => fig1c(),
        "fig2_degeneracy" => fig2_degeneracy(),
        "fig3_aba" => fig3_aba(),
        "fig4_flipflop" => fig4_flipflop(),
        "fig4_twins" => fig4_twins(),
        "fig5_filter" => fig5_filter(),
        "fig6_noise_drift" => fig6_noise_drift(),
        "fig7_adam" => fig7_adam(),
        "fig8_gaussianity" => fig8_gaussianity(),
        "fig12_rank2" => fig12_rank2(),
        "prop_linear_exactness" => property(id, "Full linear network against the 2-D reduction", vec![
            Property::LinearExactness { sets: 100, n: 200 },
        ], vec![CheckSpec::lt("c1.pointwise", "linear_exactness.max_err", 1e-10)]),
        "prop_gram" => property(id, "Gram matrices against explicit Jacobian products", vec![
            Property::GramIdentities { sets: 100, n_max: 200 },
        ], vec![CheckSpec::lt("c2.frobenius", "gram.max_rel_err", 1e-10)]),
        "prop_gradients" => property(id, "Closed-form, adjoint and finite-difference filter gradients", vec![
            Property::GradientAgreement { states: 100, eps: 1e-5 },
        ], vec![
            CheckSpec::lt("c4.closed_vs_adjoint", "grad.closed_vs_adjoint", 1e-4),
            CheckSpec::lt("c4.closed_vs_fd", "grad.closed_vs_fd", 1e-4),
            CheckSpec::lt("c4.adjoint_vs_fd", "grad.adjoint_vs_fd", 1e-4),
        ]),
        "prop_suite" => prop_suite(),
        _ => return None,
    };
    Some(cfg)
}

pub fn all() -> Vec<ExperimentConfig> {
    IDS.iter().map(|id| get(id).expect("registered id")).collect()
}

fn base(id: &str, description: &str, experiment: Experiment, checks: Vec<CheckSpec>) -> ExperimentConfig {
    ExperimentConfig {
        id: id.into(),
        description: description.into(),
        seed: 0,
        output_dir: None,
        sim: SimConfig::default(),
        train: TrainConfig::default(),
        experiment,
        checks,
    }
}

fn property(id: &str, description: &str, properties: Vec<Property>, checks: Vec<CheckSpec>) -> ExperimentConfig {
    base(id, description, Experiment::PropertySuite(PropertySuite { properties }), checks)
}

fn filter(c_star: f64) -> TaskSpec {
    TaskSpec::Filter(FilterTaskSpec { a_star: 1.0, c_star, input_kind: InputKind::Impulse })
}

fn eta(eta: f64) -> PhaseOverrides {
    PhaseOverrides { eta: Some(eta), ..Default::default() }
}

fn fig1c() -> ExperimentConfig {
    let mut cfg = base(
        "fig1c",
        "Filter task: parameter-space GD, preconditioned overlap dynamics and naive overlap descent",
        Experiment::SpaceComparison(SpaceComparison {
            variant: Variant::LinearRank1,
            n: 500,
            task: filter(0.2),
            init: InitSpec::Iid,
            spaces: vec![Space::Parameter, Space::Overlap, Space::OverlapNaive],
        }),
        vec![
            CheckSpec::lt("c3.overlay", "max_rel_dev.overlap", 1e-2),
            CheckSpec::gt("c3.naive_differs", "max_rel_dev.overlap_naive", 0.1),
            CheckSpec::lt("c3.final_loss", "final_loss.parameter", 1e-3),
            CheckSpec::near("c3.vu", "final.parameter.vu", 0.8, 1e-2),
            CheckSpec::near("c3.zm", "final.parameter.zm", 1.0, 1e-2),
            CheckSpec::near("c3.zu_vm", "final.parameter.zu_vm", 0.8, 1e-2),
        ],
    );
    cfg.train.eta = 5e-3;
    cfg.train.epochs = 1000;
    cfg
}

fn fig5_filter() -> ExperimentConfig {
    let mut cfg = base(
        "fig5_filter",
        "Filter task driven by white noise, parameter space against overlap dynamics",
        Experiment::SpaceComparison(SpaceComparison {
            variant: Variant::LinearRank1,
            n: 500,
            task: TaskSpec::Filter(FilterTaskSpec { input_kind: InputKind::WhiteNoise, ..Default::default() }),
            init: InitSpec::Iid,
            spaces: vec![Space::Parameter, Space::Overlap],
        }),
        vec![
            CheckSpec::lt("c3.noise_overlay", "max_rel_dev.overlap", 1e-2),
            CheckSpec::lt("c3.noise_overlap_dev", "max_overlap_dev.overlap", 1e-2),
        ],
    );
    cfg.train.eta = 5e-3;
    cfg.train.epochs = 1000;
    cfg.train.batch_size = 4;
    cfg
}

fn fig2_degeneracy() -> ExperimentConfig {
    let mut cfg = base(
        "fig2_degeneracy",
        "Functional twins: equal visible overlaps, different invisible ones, separated by learning",
        Experiment::Degeneracy(DegeneracyExperiment { n: 500, task: filter(0.2), epochs: 50 }),
        vec![
            CheckSpec::lt("c7.pre_learning", "pre_output_distance", 1e-10),
            CheckSpec::lt("c7.noise_input", "noise_output_distance", 1e-10),
            CheckSpec::gt("c7.learning_reveals", "max_output_divergence", 1e-3),
            CheckSpec::lt("c7.ode_match", "ode_deviation.max", 1e-2),
        ],
    );
    cfg.train.eta = 5e-3;
    cfg
}

// A–B–A protocol settings. The step is small enough that discrete GD stays
// close to the flow, so the invariants hold to 1e-3 over three phases.
const ABA_N: usize = 200;
const ABA_ETA: f64 = 3e-4;
const ABA_EPOCHS: usize = 25_000;
const ABA_LOG_EVERY: usize = 25;
const NOISE_EPOCHS: usize = 20_000;

fn aba_train(cfg: &mut ExperimentConfig) {
    cfg.train.eta = ABA_ETA;
    cfg.train.log_every = ABA_LOG_EVERY;
    cfg.train.ckpt_every = ABA_EPOCHS;
    cfg.train.balance_target = Some((1.0, 0.2));
}

fn fig3_aba() -> ExperimentConfig {
    let phases = vec![
        Phase::new("A1", filter(0.2), ABA_EPOCHS),
        Phase::new("B1", filter(0.4), ABA_EPOCHS),
        Phase::new("A2", filter(0.2), ABA_EPOCHS),
    ];
    let mut cfg = base(
        "fig3_aba",
        "A-B-A protocol with vanilla GD: invariants conserved, A2 returns to A1",
        Experiment::Protocol(ProtocolExperiment {
            variant: Variant::LinearRank1,
            n: ABA_N,
            init: InitSpec::Iid,
            phases,
            branches: vec![],
            compare: vec![["A1".into(), "A2".into()]],
        }),
        vec![
            CheckSpec::lt("c5.c_conserved", "drift.main.c", 1e-3),
            CheckSpec::lt("c5.k_conserved", "drift.main.k", 1e-3),
            CheckSpec::lt("c5.a2_returns", "diff.A1.A2.all", 1e-3),
        ],
    );
    aba_train(&mut cfg);
    cfg
}

// The noise phase runs at the filter task's usual step, where label noise
// moves the invariants well within 20k epochs. Its vanilla counterpart is a
// noise-free continuation from the same checkpoint.
const NOISE_ETA: f64 = 5e-3;
const NOISE_WARMUP: usize = 2000;

fn fig6_noise_drift() -> ExperimentConfig {
    let noisy = PhaseOverrides { label_noise_std: Some(0.1), ..Default::default() };
    let mut cfg = base(
        "fig6_noise_drift",
        "Label noise after convergence on task A, against a matched noise-free continuation",
        Experiment::Protocol(ProtocolExperiment {
            variant: Variant::LinearRank1,
            n: ABA_N,
            init: InitSpec::Iid,
            phases: vec![Phase::new("A1", filter(0.2), NOISE_WARMUP)],
            branches: vec![
                Branch { label: "noisy".into(), from: "A1".into(), phases: vec![Phase::new("A_noisy", filter(0.2), NOISE_EPOCHS).with(noisy)] },
                Branch { label: "control".into(), from: "A1".into(), phases: vec![Phase::new("A_clean", filter(0.2), NOISE_EPOCHS)] },
            ],
            compare: vec![],
        }),
        vec![
            CheckSpec::gt("c5.noise_drift_ratio", "drift.noisy.max", 10.0).over("drift.control.max"),
            // Ten times the conservation tolerance met by the vanilla A-B-A run.
            CheckSpec::gt("c5.noise_drift_level", "drift.noisy.max", 1e-2),
            CheckSpec::near("c5.zu_balanced", "final.noisy.zu", 0.8f64.sqrt(), 0.05),
            CheckSpec::near("c5.vm_balanced", "final.noisy.vm", 0.8f64.sqrt(), 0.05),
            CheckSpec::near("c5.product_kept", "final.noisy.zu_vm", 0.8, 1e-2),
        ],
    );
    aba_train(&mut cfg);
    cfg.train.eta = NOISE_ETA;
    cfg.train.ckpt_every = NOISE_WARMUP;
    cfg
}

const ADAM_EPOCHS: usize = 3000;

fn fig7_adam() -> ExperimentConfig {
    let adam = PhaseOverrides { optimizer: Some(Optimizer::Adam), eta: Some(1e-3), ..Default::default() };
    let phases = |o: &PhaseOverrides| {
        vec![
            Phase::new("A1", filter(0.2), ADAM_EPOCHS).with(o.clone()),
            Phase::new("B1", filter(0.4), ADAM_EPOCHS).with(o.clone()),
            Phase::new("A2", filter(0.2), ADAM_EPOCHS).with(o.clone()),
        ]
    };
    let mut cfg = base(
        "fig7_adam",
        "A-B-A protocol with Adam against the same protocol under vanilla GD",
        Experiment::Protocol(ProtocolExperiment {
            variant: Variant::LinearRank1,
            n: ABA_N,
            init: InitSpec::Iid,
            phases: phases(&adam),
            branches: vec![Branch { label: "vanilla".into(), from: "initial".into(), phases: phases(&eta(5e-3)) }],
            compare: vec![["A1".into(), "A2".into()], ["vanilla:A1".into(), "vanilla:A2".into()]],
        }),
        vec![
            CheckSpec::gt("c6.drift_ratio", "drift.main.max", 10.0).over("drift.vanilla.max"),
            CheckSpec::gt("c6.invisible_moves", "diff.A1.A2.invisible", 0.05),
        ],
    );
    cfg.train.log_every = 5;
    cfg.train.ckpt_every = ADAM_EPOCHS;
    cfg
}

fn flipflop_sim() -> SimConfig {
    SimConfig::new(0.025, 20.0).expect("valid grid")
}

const FF_N: usize = 1000;
// Ends shortly after the loss drop. Past it, slow fine-tuning bends u away
// from Gaussian at any N and the reduction stops describing the network.
const FF_EPOCHS: usize = 1000;

fn flipflop_arms(gf_twin: bool) -> Vec<TrainingArm> {
    let arm = |label: &str, overrides: PhaseOverrides, twin: bool| TrainingArm {
        label: label.into(),
        overrides,
        epochs: FF_EPOCHS,
        with_overlap_twin: twin,
    };
    vec![
        arm("gf", eta(0.05), gf_twin),
        arm("large_eta", eta(0.5), false),
        arm("adam", PhaseOverrides { optimizer: Some(Optimizer::Adam), eta: Some(1e-3), ..Default::default() }, false),
    ]
}

fn mismatch_checks() -> Vec<CheckSpec> {
    vec![
        CheckSpec::gt("c8.large_eta_mismatch", "mismatch.large_eta", 3.0).over("mismatch.gf"),
        CheckSpec::gt("c8.adam_mismatch", "mismatch.adam", 3.0).over("mismatch.gf"),
    ]
}

fn flipflop(id: &str, description: &str, sweep_n: Vec<usize>, gf_twin: bool, checks: Vec<CheckSpec>) -> ExperimentConfig {
    let mut cfg = base(
        id,
        description,
        Experiment::MeanFieldValidity(MeanFieldExperiment {
            task: TaskSpec::FlipFlop(FlipFlopSpec::default()),
            init: InitSpec::Iid,
            sweep_n,
            sweep_seeds: 8,
            sweep_at: SweepAt::Trained,
            n: FF_N,
            arms: flipflop_arms(gf_twin),
            probe_episodes: 4,
        }),
        checks,
    );
    cfg.sim = flipflop_sim();
    cfg.train.batch_size = 10;
    cfg.train.log_every = 10;
    cfg.train.ckpt_every = 100;
    cfg.train.qq_at_checkpoints = true;
    cfg
}

fn fig4_flipflop() -> ExperimentConfig {
    let mut checks = vec![
        CheckSpec::lt("c8.sweep_decreasing", "sweep.max_ratio", 1.0),
        CheckSpec::gt("c8.gaussian", "qq_min.gf", 0.995),
        CheckSpec::lt("c8.ode_overlay", "loss_dev.gf", 0.1),
    ];
    checks.extend(mismatch_checks());
    flipflop(
        "fig4_flipflop",
        "Erf rank-1 flip-flop: size sweep at the trained state, Gaussianity, overlap dynamics overlay, optimizer comparison",
        vec![250, 1000, 4000],
        true,
        checks,
    )
}

fn fig8_gaussianity() -> ExperimentConfig {
    let mut checks = vec![CheckSpec::gt("c8.gaussian", "qq_min.gf", 0.995)];
    checks.extend(mismatch_checks());
    flipflop(
        "fig8_gaussianity",
        "Erf rank-1 flip-flop under small-step GD, large-step GD and Adam",
        vec![],
        false,
        checks,
    )
}

// Shortened phases. Longer ones were tried and change nothing: the decision
// networks never leave their plateau, and decoding after C settles by its
// 10,000th epoch.
fn fig4_twins() -> ExperimentConfig {
    let mut cfg = base(
        "fig4_twins",
        "Twin networks trained on flip-flop or integration, then on a common teacher task",
        Experiment::Twins(TwinsExperiment {
            variant: Variant::NonlinearRank1,
            pairs: 10,
            init: InitSpec::RandomOverlaps { cross_var: 0.4, norm_range: [0.5, 2.0] },
            task_a: TaskSpec::FlipFlop(FlipFlopSpec::default()),
            task_b: TaskSpec::Decision(DecisionSpec::default()),
            task_c: TaskSpec::Teacher(TeacherSpec::default()),
            epochs_ab: 3000,
            epochs_c: 10_000,
            overrides_ab: PhaseOverrides {
                eta: Some(0.01),
                schedule: Some(LrSchedule::DecayOnThreshold { threshold: 0.015, factor: 0.2 }),
                ..Default::default()
            },
            overrides_c: eta(1e-3),
            decode: DecodeConfig::default(),
        }),
        vec![
            CheckSpec::lt("c9.ab_converged", "loss.post_ab.worst_min", 0.015),
            CheckSpec::gt("c9.invisible_decodes", "decode.post_c.invisible.mean", 0.9),
            CheckSpec::lt("c9.visible_at_chance", "decode.post_c.visible.chance_z", 2.0),
        ],
    );
    cfg.sim = SimConfig::new(0.05, 20.0).expect("valid grid");
    cfg.train.batch_size = 128;
    cfg.train.log_every = 10;
    cfg.train.ckpt_every = 1000;
    cfg
}

fn fig12_rank2() -> ExperimentConfig {
    let mut cfg = base(
        "fig12_rank2",
        "Rank-2 linear network on a damped oscillator: parameter space against the 21-D overlap dynamics",
        Experiment::SpaceComparison(SpaceComparison {
            variant: Variant::LinearRank2,
            n: 500,
            task: TaskSpec::Oscillator(OscillatorTaskSpec::default()),
            init: InitSpec::Iid,
            spaces: vec![Space::Parameter, Space::Overlap],
        }),
        vec![
            CheckSpec::lt("c10.overlay", "max_rel_dev.overlap", 1e-2),
            CheckSpec::lt("c10.overlaps", "max_overlap_dev.overlap", 1e-2),
            CheckSpec::lt("c10.converged", "final_loss.parameter", 1e-3),
        ],
    );
    cfg.train.eta = 0.02;
    cfg.train.epochs = 1500;
    cfg
}

fn prop_suite() -> ExperimentConfig {
    property(
        "prop_suite",
        "Gain, flow linearity, overlap round trip, masked loss and determinism",
        vec![
            Property::Gain { samples: 200_000 },
            Property::FlowLinearity { trials: 60 },
            Property::Roundtrip { trials: 30, n: 20_000 },
            Property::MaskLoss { episodes: 4 },
            Property::Determinism { epochs: 20 },
        ],
        vec![
            CheckSpec::lt("c11.gain_bounds", "gain.bound_violations", 0.5),
            CheckSpec::lt("c11.gain_monte_carlo", "gain.mc_max_z", 5.0),
            CheckSpec::lt("c11.gain_derivative", "gain.derivative_err", 1e-6),
            CheckSpec::lt("c11.flow_linear", "flow.linearity_err", 1e-12),
            CheckSpec::lt("c11.roundtrip", "roundtrip.max_err", 1e-10),
            CheckSpec::lt("c11.mask_formula", "mask.formula_err", 1e-12),
            CheckSpec::lt("c11.mask_ignores_unmasked", "mask.masked_sensitivity", 1e-15),
            CheckSpec::lt("c11.mask_gradient", "mask.grad_err", 1e-6),
            CheckSpec::lt("c11.deterministic", "determinism.mismatches", 0.5),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_resolves_and_validates() {
        for id in IDS {
            let cfg = get(id).unwrap();
            assert_eq!(cfg.id, id);
            let text = cfg.to_json_pretty();
            ExperimentConfig::from_json(&text, id).unwrap().resolve(None).unwrap();
        }
        assert!(get("nope").is_none());
    }

    #[test]
    fn check_names_carry_criterion() {
        for cfg in all() {
            assert!(!cfg.checks.is_empty(), "{} has no checks", cfg.id);
            for c in &cfg.checks {
                let k: usize = c.name[1..].split('.').next().unwrap().parse().unwrap();
                assert!(c.name.starts_with('c') && (1..=11).contains(&k), "{}", c.name);
            }
        }
    }
}
