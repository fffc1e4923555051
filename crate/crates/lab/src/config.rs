//! Experiment configuration files.
//!
//! Configs are JSON objects with unknown fields rejected at every level.
//! Resolution fills every default in, so a resolved config written back to
//! disk describes the run completely.

use std::path::{Path, PathBuf};

use lowrank_core::analysis::DecodeConfig;
use lowrank_core::effective::SimConfig;
use lowrank_core::tasks::TaskSpec;
use lowrank_core::training::{Phase, PhaseOverrides, Space, TrainConfig};
use lowrank_core::Variant;
use serde::{Deserialize, Serialize};

use crate::LabError;

pub const SEED_ENV: &str = "LOWRANK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// Master seed; copied into `train.seed` on resolution.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub experiment: Experiment,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
}

/// How the starting point of a run is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Every component i.i.d. standard normal.
    Iid,
    /// Vectors realizing an overlap matrix given row by row in stack order.
    Prescribed { matrix: Vec<Vec<f64>> },
    /// Random realizable overlaps: cross terms `|N(0, cross_var)|`, squared
    /// norms uniform in `norm_range`.
    RandomOverlaps { cross_var: f64, norm_range: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    SpaceComparison(SpaceComparison),
    Protocol(ProtocolExperiment),
    Twins(TwinsExperiment),
    Degeneracy(DegeneracyExperiment),
    MeanFieldValidity(MeanFieldExperiment),
    PropertySuite(PropertySuite),
}

/// One task trained from a shared starting point in several spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceComparison {
    pub variant: Variant,
    pub n: usize,
    pub task: TaskSpec,
    pub init: InitSpec,
    pub spaces: Vec<Space>,
}

/// A continuation that restarts from a checkpoint of the main protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub label: String,
    pub from: String,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolExperiment {
    pub variant: Variant,
    pub n: usize,
    pub init: InitSpec,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    /// Checkpoint pairs whose overlaps are compared, as `run:tag` or `tag`
    /// for the main run.
    #[serde(default)]
    pub compare: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinsExperiment {
    pub variant: Variant,
    pub pairs: usize,
    pub init: InitSpec,
    pub task_a: TaskSpec,
    pub task_b: TaskSpec,
    pub task_c: TaskSpec,
    pub epochs_ab: usize,
    pub epochs_c: usize,
    #[serde(default)]
    pub overrides_ab: PhaseOverrides,
    #[serde(default)]
    pub overrides_c: PhaseOverrides,
    #[serde(default)]
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegeneracyExperiment {
    pub n: usize,
    pub task: TaskSpec,
    pub epochs: usize,
}

/// A parameter-space training run inside a mean-field validity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingArm {
    pub label: String,
    pub overrides: PhaseOverrides,
    pub epochs: usize,
    /// Also run the preconditioned overlap dynamics with the same step.
    #[serde(default)]
    pub with_overlap_twin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldExperiment {
    pub task: TaskSpec,
    pub init: InitSpec,
    /// Network sizes realizing one overlap state, compared against the
    /// reduced model.
    pub sweep_n: Vec<usize>,
    pub sweep_seeds: usize,
    #[serde(default)]
    pub sweep_at: SweepAt,
    pub n: usize,
    pub arms: Vec<TrainingArm>,
    /// Episodes used to measure the full-versus-reduced output mismatch.
    #[serde(default = "default_probe_episodes")]
    pub probe_episodes: usize,
}

/// Overlap state used for the size sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAt {
    /// Final overlaps of the first training arm.
    #[default]
    Trained,
    /// Overlaps of the initial network.
    Initial,
}

fn default_probe_episodes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Property {
    /// Full linear network against the reduced model on shared inputs.
    LinearExactness { sets: usize, n: usize },
    /// Gram matrices from overlaps against explicit Jacobian products.
    GramIdentities { sets: usize, n_max: usize },
    /// Closed-form, adjoint and finite-difference filter gradients.
    GradientAgreement { states: usize, eps: f64 },
    /// Gain bounds and a Monte-Carlo estimate of `E[φ′(h)]`.
    Gain { samples: usize },
    FlowLinearity { trials: usize },
    Roundtrip { trials: usize, n: usize },
    MaskLoss { episodes: usize },
    Determinism { epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySuite {
    pub properties: Vec<Property>,
}

/// A named assertion over one metric, optionally divided by another.
/// Exactly one of `lt`, `gt` or `target` (with `tol`) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub name: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

impl CheckSpec {
    pub fn lt(name: &str, metric: &str, bound: f64) -> Self {
        Self { name: name.into(), metric: metric.into(), denominator: None, lt: Some(bound), gt: None, target: None, tol: None }
    }

    pub fn gt(name: &str, metric: &str, bound: f64) -> Self {
        Self { gt: Some(bound), lt: None, ..Self::lt(name, metric, 0.0) }
    }

    pub fn near(name: &str, metric: &str, target: f64, tol: f64) -> Self {
        Self { target: Some(target), tol: Some(tol), lt: None, ..Self::lt(name, metric, 0.0) }
    }

    pub fn over(mut self, denominator: &str) -> Self {
        self.denominator = Some(denominator.into());
        self
    }

    fn validate(&self) -> Result<(), String> {
        let rules = [self.lt.is_some(), self.gt.is_some(), self.target.is_some()].iter().filter(|&&b| b).count();
        if rules != 1 {
            return Err(format!("check {}: give exactly one of lt, gt, target", self.name));
        }
        if self.target.is_some() != self.tol.is_some() {
            return Err(format!("check {}: target needs tol", self.name));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses JSON text; syntax and schema errors carry line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, LabError> {
        serde_json::from_str(text).map_err(|e| LabError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies the seed override, copies the seed into the training config
    /// and validates the result.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, LabError> {
        if let Some(seed) = seed_override {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.id.trim().is_empty() {
            return bad("id must not be empty".into());
        }
        self.sim.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| LabError::Config(e.to_string()))?;
        for c in &self.checks {
            c.validate().map_err(LabError::Config)?;
        }
        let tasks: Vec<&TaskSpec> = match &self.experiment {
            Experiment::SpaceComparison(x) => {
                if x.spaces.is_empty() {
                    return bad("space_comparison needs at least one space".into());
                }
                check_n(x.n)?;
                vec![&x.task]
            }
            Experiment::Protocol(x) => {
                check_n(x.n)?;
                if x.phases.is_empty() {
                    return bad("protocol needs at least one phase".into());
                }
                let mut labels: Vec<&str> = x.phases.iter().map(|p| p.label.as_str()).collect();
                labels.push("initial");
                for b in &x.branches {
                    if !labels.contains(&b.from.as_str()) {
                        return bad(format!("branch {} starts from unknown checkpoint {}", b.label, b.from));
                    }
                    if b.label == "main" {
                        return bad("branch label 'main' is reserved".into());
                    }
                }
                x.phases.iter().chain(x.branches.iter().flat_map(|b| &b.phases)).map(|p| &p.task).collect()
            }
            Experiment::Twins(x) => {
                if x.pairs < 2 {
                    return bad("twins needs at least two pairs".into());
                }
                vec![&x.task_a, &x.task_b, &x.task_c]
            }
            Experiment::Degeneracy(x) => {
                check_n(x.n)?;
                vec![&x.task]
            }
            Experiment::MeanFieldValidity(x) => {
                check_n(x.n)?;
                for &n in &x.sweep_n {
                    check_n(n)?;
                }
                if x.sweep_seeds == 0 || x.probe_episodes == 0 {
                    return bad("sweep_seeds and probe_episodes must be positive".into());
                }
                if x.sweep_at == SweepAt::Trained && !x.sweep_n.is_empty() && x.arms.is_empty() {
                    return bad("a sweep at the trained state needs a training arm".into());
                }
                vec![&x.task]
            }
            Experiment::PropertySuite(x) => {
                if x.properties.is_empty() {
                    return bad("property_suite needs at least one property".into());
                }
                vec![]
            }
        };
        for t in tasks {
            t.validate().map_err(|e| LabError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn check_n(n: usize) -> Result<(), LabError> {
    if n < 2 {
        return Err(LabError::Config(format!("network size {n} is too small")));
    }
    Ok(())
}

/// Reads `LOWRANK_SEED`; a value that is not an unsigned integer is an error.
pub fn seed_from_env() -> Result<Option<u64>, LabError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "id": "t",
        "experiment": {"kind": "degeneracy", "n": 40, "task": {"kind": "filter"}, "epochs": 3}
    }"#;

    #[test]
    fn defaults_are_materialized() {
        let cfg = ExperimentConfig::from_json(MINIMAL, "inline").unwrap().resolve(Some(9)).unwrap();
        assert_eq!(cfg.train.seed, 9);
        let text = cfg.to_json_pretty();
        assert!(text.contains("\"dt\": 0.025"));
        let again = ExperimentConfig::from_json(&text, "resolved").unwrap().resolve(None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = MINIMAL.replace("\"epochs\": 3", "\"epochs\": 3, \"bogus\": 1");
        assert!(ExperimentConfig::from_json(&text, "inline").is_err());
        let text = MINIMAL.replace("\"id\": \"t\"", "\"id\": \"t\", \"sim\": {\"dtt\": 0.1}");
        assert!(ExperimentConfig::from_json(&text, "inline").is_err());
    }

    #[test]
    fn syntax_error_has_position() {
        let err = ExperimentConfig::from_json("{\n  \"id\": \"x\",\n  oops\n}", "bad.json").unwrap_err();
        match err {
            LabError::Parse { line, column, .. } => assert_eq!((line, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn check_rules_validated() {
        let mut c = CheckSpec::lt("a", "m", 1.0);
        assert!(c.validate().is_ok());
        c.gt = Some(0.0);
        assert!(c.validate().is_err());
        let mut n = CheckSpec::near("b", "m", 1.0, 0.1);
        assert!(n.validate().is_ok());
        n.tol = None;
        assert!(n.validate().is_err());
    }

    #[test]
    fn branch_must_start_at_known_checkpoint() {
        let text = r#"{
            "id": "p",
            "experiment": {
                "kind": "protocol", "variant": "linear_rank1", "n": 20, "init": {"kind": "iid"},
                "phases": [{"label": "A", "task": {"kind": "filter"}, "epochs": 2}],
                "branches": [{"label": "b", "from": "Z", "phases": []}]
            }
        }"#;
        let cfg = ExperimentConfig::from_json(text, "inline").unwrap();
        assert!(matches!(cfg.resolve(None), Err(LabError::Config(_))));
    }
}
