//! Post-hoc analyses: decoding training history from overlaps and probing
//! networks that share their visible overlaps.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effective::SimConfig;
use crate::network::{sample_prescribed, simulate, Activation};
use crate::overlap::{OverlapState, Variant};
use crate::rng::{stream, TAG_EPISODE, TAG_FEATURE_NOISE, TAG_SPLIT};
use crate::tasks::{InputKind, TaskSpec};
use crate::training::{train, Model, Phase, ProtocolSpec, Space, TrainConfig, TrainTrace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Visible,
    Invisible,
}

/// Labelled feature vectors, label 0 for "A first" and 1 for "B first".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl DecodeDataset {
    /// One sample per network at the given checkpoint of each twin branch.
    pub fn from_twins(pairs: &[(TrainTrace, TrainTrace)], checkpoint: &str, set: FeatureSet) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (a, b) in pairs {
            for (trace, label) in [(a, 0u8), (b, 1u8)] {
                let ck = trace
                    .checkpoint(checkpoint)
                    .ok_or_else(|| Error::Unavailable(format!("checkpoint {checkpoint} missing")))?;
                features.push(match set {
                    FeatureSet::Visible => ck.overlaps.visible.clone(),
                    FeatureSet::Invisible => ck.overlaps.invisible.clone(),
                });
                labels.push(label);
            }
        }
        Ok(Self { features, labels })
    }

    fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub mean: f64,
    pub sd: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub splits: usize,
    pub test_size: usize,
    pub noise_std: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { splits: 50, test_size: 4, noise_std: 0.1, iterations: 1000, step: 0.1 }
    }
}

/// Cross-validated logistic-regression accuracy over random train/test
/// splits. Features get fresh Gaussian noise for every split.
pub fn decode_history(data: &DecodeDataset, cfg: &DecodeConfig, seed: u64) -> Result<DecodeResult> {
    let n = data.features.len();
    let counts = data.class_counts();
    if counts[0] < 2 || counts[1] < 2 {
        return Err(Error::InsufficientSamples("need at least two samples per class".into()));
    }
    if cfg.test_size == 0 || cfg.test_size >= n - 1 {
        return Err(Error::InvalidConfig(format!("test size {} incompatible with {n} samples", cfg.test_size)));
    }
    let dim = data.features[0].len();
    let mut accuracies = Vec::with_capacity(cfg.splits);
    for s in 0..cfg.splits {
        let mut noise_rng = stream(seed, &[TAG_FEATURE_NOISE, s as u64]);
        let noisy: Vec<Vec<f64>> = data
            .features
            .iter()
            .map(|f| f.iter().map(|x| x + cfg.noise_std * noise_rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut split_rng = stream(seed, &[TAG_SPLIT, s as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        // Redraw splits whose training part holds a single class.
        let (train_idx, test_idx) = loop {
            order.shuffle(&mut split_rng);
            let (test, train) = order.split_at(cfg.test_size);
            let ones = train.iter().filter(|&&i| data.labels[i] == 1).count();
            if ones > 0 && ones < train.len() {
                break (train.to_vec(), test.to_vec());
            }
        };
        let (mean, sd) = standardizer(&noisy, &train_idx, dim);
        let z = |i: usize| -> Vec<f64> { (0..dim).map(|d| (noisy[i][d] - mean[d]) / sd[d]).collect() };
        let xs: Vec<Vec<f64>> = train_idx.iter().map(|&i| z(i)).collect();
        let ys: Vec<f64> = train_idx.iter().map(|&i| data.labels[i] as f64).collect();
        let (w, b) = fit_logistic(&xs, &ys, cfg.iterations, cfg.step);
        let correct = test_idx
            .iter()
            .filter(|&&i| {
                let x = z(i);
                let score = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
                (score > 0.0) == (data.labels[i] == 1)
            })
            .count();
        accuracies.push(correct as f64 / test_idx.len() as f64);
    }
    let m = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
    let var = accuracies.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / accuracies.len().max(1) as f64;
    Ok(DecodeResult { mean: m, sd: var.sqrt(), accuracies })
}

fn standardizer(x: &[Vec<f64>], idx: &[usize], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| idx.iter().map(|&i| x[i][d]).sum::<f64>() / n).collect();
    let sd = (0..dim)
        .map(|d| {
            let v = idx.iter().map(|&i| (x[i][d] - mean[d]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Plain gradient descent on the mean logistic loss; returns weights and bias.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[f64], iterations: usize, step: f64) -> (Vec<f64>, f64) {
    let dim = xs.first().map_or(0, |x| x.len());
    let n = xs.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..iterations {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let s = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-s).exp());
            let e = p - y;
            gb += e;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += e * xi);
        }
        b -= step * gb / n;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= step * g / n);
    }
    (w, b)
}

/// Two rank-1 overlap matrices with identical visible blocks that differ in
/// `σ_mu` and `‖u‖²`.
pub fn functional_twin_targets() -> (DMatrix<f64>, DMatrix<f64>) {
    let build = |mu: f64, uu: f64| {
        // zm, zu, vm, vu | mu, zv, mm, uu, vv, zz
        let s = OverlapState::new(
            Variant::LinearRank1,
            vec![0.4, 0.5, 0.6, 0.3],
            vec![mu, 0.2, 1.0, uu, 1.5, 1.5],
        )
        .expect("fixed layout");
        s.to_matrix()
    };
    (build(0.1, 0.8), build(0.6, 1.6))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    /// Max output difference on the task input before learning.
    pub pre_output_distance: f64,
    /// Same, on a white-noise input.
    pub noise_output_distance: f64,
    /// Max output difference over the learning run, per epoch.
    pub output_divergence: Vec<f64>,
    /// First epoch whose output difference exceeds 1e−3.
    pub divergence_epoch: Option<usize>,
    /// `max_t |L_a − L_b| / max(L_a, L_b)`.
    pub loss_divergence: f64,
    /// Per network: max relative loss deviation between parameter-space GD
    /// and the overlap dynamics.
    pub ode_deviation: [f64; 2],
}

/// Builds two networks from `targets`, compares them before learning, then
/// trains both on `task` for `epochs` and measures how they separate.
pub fn degeneracy_probe(
    targets: (&DMatrix<f64>, &DMatrix<f64>),
    task: &TaskSpec,
    n: usize,
    epochs: usize,
    cfg: &TrainConfig,
    sim: &SimConfig,
) -> Result<DegeneracyReport> {
    let variant = match targets.0.nrows() {
        4 => Variant::LinearRank1,
        6 => Variant::LinearRank2,
        k => return Err(Error::Dimension(format!("unsupported target size {k}"))),
    };
    let sa = OverlapState::from_matrix(variant, targets.0)?;
    let sb = OverlapState::from_matrix(variant, targets.1)?;
    if sa.visible.iter().zip(&sb.visible).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::InvalidConfig("degeneracy probe needs equal visible overlaps".into()));
    }
    let pa = sample_prescribed(targets.0, n, cfg.seed)?;
    let pb = sample_prescribed(targets.1, n, cfg.seed.wrapping_add(1))?;
    let act = Activation::Identity;

    let probe_input = task.generate_episode(&mut stream(cfg.seed, &[TAG_EPISODE, 999]), sim)?.input;
    let noise_task = TaskSpec::Filter(crate::tasks::FilterTaskSpec { input_kind: InputKind::WhiteNoise, ..Default::default() });
    let noise_input = noise_task.generate_episode(&mut stream(cfg.seed, &[TAG_EPISODE, 998]), sim)?.input;
    let distance = |a: &crate::network::ParameterVectors, b: &crate::network::ParameterVectors, x: &[f64]| -> Result<f64> {
        let ya = simulate(a, act, x, sim)?.output;
        let yb = simulate(b, act, x, sim)?.output;
        Ok(ya.iter().zip(&yb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    };
    let pre_output_distance = distance(&pa, &pb, &probe_input)?;
    let noise_output_distance = distance(&pa, &pb, &noise_input)?;

    let protocol = ProtocolSpec { phases: vec![Phase::new("probe", task.clone(), epochs)] };
    let pcfg = TrainConfig { space: Space::Parameter, ckpt_every: 1, ..cfg.clone() };
    let ta = train(Model::Params { params: pa.clone(), variant }, &protocol, &pcfg, sim)?;
    let tb = train(Model::Params { params: pb.clone(), variant }, &protocol, &pcfg, sim)?;

    let mut output_divergence = Vec::new();
    for (ca, cb) in ta.checkpoints.iter().zip(&tb.checkpoints) {
        let (Some(a), Some(b)) = (&ca.params, &cb.params) else { continue };
        output_divergence.push(distance(a, b, &probe_input)?);
    }
    let divergence_epoch = output_divergence.iter().position(|&d| d > 1e-3);
    let loss_divergence = ta
        .records
        .iter()
        .zip(&tb.records)
        .map(|(a, b)| (a.loss - b.loss).abs() / a.loss.max(b.loss).max(1e-300))
        .fold(0.0, f64::max);

    let ocfg = TrainConfig { space: Space::Overlap, ..cfg.clone() };
    let mut ode_deviation = [0.0; 2];
    for (dev, (params, trace)) in ode_deviation.iter_mut().zip([(pa, &ta), (pb, &tb)]) {
        let ode = train(Model::Params { params, variant }, &protocol, &ocfg, sim)?;
        *dev = max_relative_deviation(&trace.losses(), &ode.losses());
    }

    Ok(DegeneracyReport {
        pre_output_distance,
        noise_output_distance,
        output_divergence,
        divergence_epoch,
        loss_divergence,
        ode_deviation,
    })
}

/// `max_k |a_k − b_k| / |a_k|` over the common prefix.
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1e-300)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chance_level_on_identical_features() {
        let data = DecodeDataset { features: vec![vec![1.0, 2.0]; 20], labels: (0..20).map(|i| (i % 2) as u8).collect() };
        let r = decode_history(&data, &DecodeConfig::default(), 3).unwrap();
        // 50 splits of 4 test samples: binomial sd of the mean is about 0.035.
        assert!((r.mean - 0.5).abs() < 0.15, "{}", r.mean);
        assert!(r.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn separable_features_decode() {
        let features = (0..20).map(|i| vec![if i % 2 == 0 { 0.0 } else { 2.0 }, 0.3]).collect();
        let data = DecodeDataset { features, labels: (0..20).map(|i| (i % 2) as u8).collect() };
        let r = decode_history(&data, &DecodeConfig::default(), 1).unwrap();
        assert!(r.mean > 0.95);
        let again = decode_history(&data, &DecodeConfig::default(), 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn decoder_needs_two_classes() {
        let data = DecodeDataset { features: vec![vec![0.0]; 5], labels: vec![0; 5] };
        assert!(decode_history(&data, &DecodeConfig::default(), 0).is_err());
    }

    #[test]
    fn twin_targets_are_functional_twins() {
        let (a, b) = functional_twin_targets();
        let sa = OverlapState::from_matrix(Variant::LinearRank1, &a).unwrap();
        let sb = OverlapState::from_matrix(Variant::LinearRank1, &b).unwrap();
        assert_eq!(sa.visible, sb.visible);
        assert_ne!(sa.get("mu"), sb.get("mu"));
        assert_ne!(sa.get("uu"), sb.get("uu"));
        sa.check_realizable().unwrap();
        sb.check_realizable().unwrap();
    }

    #[test]
    fn probe_rejects_unequal_visible() {
        let (a, _) = functional_twin_targets();
        let mut b = a.clone();
        b[(3, 0)] += 0.1;
        b[(0, 3)] += 0.1;
        let task = TaskSpec::Filter(Default::default());
        let r = degeneracy_probe((&a, &b), &task, 50, 2, &TrainConfig::default(), &SimConfig::default());
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn identical_targets_give_zero_distances() {
        let (a, _) = functional_twin_targets();
        let task = TaskSpec::Filter(Default::default());
        let sim = SimConfig::new(0.05, 10.0).unwrap();
        let cfg = TrainConfig { seed: 4, ..Default::default() };
        let r = degeneracy_probe((&a, &a), &task, 40, 5, &cfg, &sim).unwrap();
        assert!(r.pre_output_distance < 1e-12);
        assert!(r.output_divergence.iter().all(|&d| d < 1e-9));
        assert!(r.loss_divergence < 1e-9);
    }
}
