//! ADAM, mini-batch training, two-step training and beta sweeps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::geom::Point3;
use crate::loss::{
    beta_loss, homoscedastic_loss, reprojection_loss, BoundsReference, HomoscedasticParams,
    ImageBounds, LossResult, Norm, ReprojectionOptions, ReprojectionOutcome,
};
use crate::model::Regressor;
use crate::scene::{Sample, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract("adam buffers have mismatched lengths".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient {} at parameter {i} (step {})",
            grads[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = *config;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `L_x + beta L_q`.
    Beta { beta: f64, norm: Norm },
    /// Learned log-variance weighting starting from `init`.
    Homoscedastic { init: HomoscedasticParams, norm: Norm },
    /// Mean reprojection error over the visible scene points.
    Reprojection { norm: Norm, options: ReprojectionOptions },
}

impl LossSpec {
    pub fn norm(&self) -> Norm {
        match self {
            LossSpec::Beta { norm, .. }
            | LossSpec::Homoscedastic { norm, .. }
            | LossSpec::Reprojection { norm, .. } => *norm,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LossSpec::Beta { .. } => "beta",
            LossSpec::Homoscedastic { .. } => "homoscedastic",
            LossSpec::Reprojection { .. } => "reprojection",
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Beta { beta, norm } => write!(f, "beta(beta={beta}, norm={norm})"),
            LossSpec::Homoscedastic { init, norm } => write!(
                f,
                "homoscedastic(s_x={}, s_q={}, norm={norm})",
                init.log_var_position, init.log_var_orientation
            ),
            LossSpec::Reprojection { norm, .. } => write!(f, "reprojection(norm={norm})"),
        }
    }
}

/// Stop once the mean loss over the last `window` iterations improves on
/// the previous window by less than `tolerance` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub window: usize,
    pub tolerance: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            window: 500,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub plateau: Option<Plateau>,
    pub loss: LossSpec,
    pub seed: u64,
    /// Keep the regressor fixed and only optimise the log-variances.
    pub freeze_model: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 64,
            max_iterations: 20_000,
            plateau: Some(Plateau::default()),
            loss: LossSpec::Homoscedastic {
                init: HomoscedasticParams::default(),
                norm: Norm::L1,
            },
            seed: 0,
            freeze_model: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate >= 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be a nonnegative number".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.tolerance >= 0.0) {
                return Err(Error::Config("plateau needs window >= 1 and tolerance >= 0".into()));
            }
        }
        if let LossSpec::Beta { beta, .. } = self.loss {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("beta must be positive, got {beta}")));
            }
        }
        if self.freeze_model && !matches!(self.loss, LossSpec::Homoscedastic { .. }) {
            return Err(Error::Config("a frozen model only makes sense with learned weighting".into()));
        }
        Ok(())
    }

    /// Parses a flat `key = value` file (`#` comments) on top of `self`.
    ///
    /// Keys: `learning_rate`, `batch_size`, `adam_beta1`, `adam_beta2`,
    /// `adam_epsilon`, `max_iterations`, `plateau_window`,
    /// `plateau_tolerance`, `plateau` (`on`/`off`), `loss`
    /// (`beta`/`homoscedastic`/`reprojection`), `beta`, `norm`, `init_s_x`,
    /// `init_s_q`, `bounds` (half-width), `bounds_reference`
    /// (`predicted`/`ground-truth`), `seed`, `freeze_model`.
    pub fn apply_text(&self, text: &str) -> Result<TrainConfig> {
        let mut c = self.clone();
        let mut loss_kind = c.loss.name().to_owned();
        let mut beta = match c.loss {
            LossSpec::Beta { beta, .. } => beta,
            _ => 500.0,
        };
        let mut norm = c.loss.norm();
        let mut init = match c.loss {
            LossSpec::Homoscedastic { init, .. } => init,
            _ => HomoscedasticParams::default(),
        };
        let mut options = match c.loss {
            LossSpec::Reprojection { options, .. } => options,
            _ => ReprojectionOptions::default(),
        };
        let mut plateau = c.plateau.unwrap_or_default();
        let mut plateau_on = c.plateau.is_some();

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n,
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse {
                line: n,
                message: format!("invalid {what} {value:?}"),
            };
            let real = || value.parse::<f64>().map_err(|_| bad(key));
            let int = || value.parse::<usize>().map_err(|_| bad(key));
            match key {
                "learning_rate" => c.adam.learning_rate = real()?,
                "adam_beta1" => c.adam.beta1 = real()?,
                "adam_beta2" => c.adam.beta2 = real()?,
                "adam_epsilon" => c.adam.epsilon = real()?,
                "batch_size" => c.batch_size = int()?,
                "max_iterations" => c.max_iterations = int()?,
                "plateau_window" => plateau.window = int()?,
                "plateau_tolerance" => plateau.tolerance = real()?,
                "plateau" => {
                    plateau_on = match value {
                        "on" => true,
                        "off" => false,
                        _ => return Err(bad("plateau switch")),
                    }
                }
                "loss" => loss_kind = value.to_owned(),
                "beta" => beta = real()?,
                "norm" => norm = value.parse()?,
                "init_s_x" => init.log_var_position = real()?,
                "init_s_q" => init.log_var_orientation = real()?,
                "bounds" => options.bounds = ImageBounds::symmetric(real()?, real()?),
                "bounds_reference" => {
                    options.reference = match value {
                        "predicted" => BoundsReference::Predicted,
                        "ground-truth" => BoundsReference::GroundTruth,
                        _ => return Err(bad("bounds reference")),
                    }
                }
                "seed" => c.seed = value.parse().map_err(|_| bad("seed"))?,
                "freeze_model" => c.freeze_model = value.parse().map_err(|_| bad("flag"))?,
                _ => {
                    return Err(Error::Parse {
                        line: n,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        c.plateau = plateau_on.then_some(plateau);
        c.loss = match loss_kind.as_str() {
            "beta" => LossSpec::Beta { beta, norm },
            "homoscedastic" | "sigma" => LossSpec::Homoscedastic { init, norm },
            "reprojection" | "reproj" => LossSpec::Reprojection { norm, options },
            other => return Err(Error::Config(format!("unknown loss {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub final_parameters: Vec<f64>,
    pub final_s: Option<HomoscedasticParams>,
    /// Samples whose reprojection loss had no usable point.
    pub skipped_samples: usize,
    /// Batches in which every sample was skipped.
    pub skipped_batches: usize,
    pub converged: bool,
    pub wall_time: Duration,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.loss_trace == other.loss_trace
            && self.iterations == other.iterations
            && self.final_parameters == other.final_parameters
            && self.final_s == other.final_s
            && self.skipped_samples == other.skipped_samples
            && self.skipped_batches == other.skipped_batches
            && self.converged == other.converged
    }

    /// `iteration,loss` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{},{:.16e}\n", i + 1, l));
        }
        out
    }
}

/// Per-sample loss used by the training loop and for evaluation.
fn sample_loss(
    spec: &LossSpec,
    s: &HomoscedasticParams,
    sample: &Sample,
    points: Option<&[Point3<f64>]>,
    scene: Option<&Scene>,
    pred: &crate::loss::PosePrediction,
) -> Result<Option<LossResult>> {
    match spec {
        LossSpec::Beta { beta, norm } => beta_loss(&sample.pose, pred, *beta, norm).map(Some),
        LossSpec::Homoscedastic { norm, .. } => homoscedastic_loss(&sample.pose, pred, s, norm).map(Some),
        LossSpec::Reprojection { norm, options } => {
            let scene = scene.expect("checked by caller");
            let points = points.expect("checked by caller");
            if points.is_empty() {
                return Ok(None);
            }
            Ok(
                match reprojection_loss(&sample.pose, pred, &scene.intrinsics, points, norm, options)? {
                    ReprojectionOutcome::Evaluated { loss, .. } => Some(loss),
                    ReprojectionOutcome::Skipped => None,
                },
            )
        }
    }
}

fn visible_point_sets(samples: &[Sample], scene: Option<&Scene>, spec: &LossSpec) -> Result<Option<Vec<Vec<Point3<f64>>>>> {
    if !matches!(spec, LossSpec::Reprojection { .. }) {
        return Ok(None);
    }
    let scene = scene.ok_or_else(|| {
        Error::Config("the reprojection loss needs scene geometry".into())
    })?;
    Ok(Some(samples.iter().map(|s| scene.points_at(&s.visible_points)).collect()))
}

/// Mean loss of `model` over `samples`; skipped samples contribute zero.
pub fn mean_loss(model: &Regressor, samples: &[Sample], scene: Option<&Scene>, spec: &LossSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("mean loss over zero samples".into()));
    }
    let points = visible_point_sets(samples, scene, spec)?;
    let s = match spec {
        LossSpec::Homoscedastic { init, .. } => *init,
        _ => HomoscedasticParams::default(),
    };
    let mut total = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        let out = model.forward(&sample.observation)?;
        let pts = points.as_ref().map(|p| p[i].as_slice());
        if let Some(l) = sample_loss(spec, &s, sample, pts, scene, &out.prediction)? {
            total += l.value;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place with mini-batch ADAM.
///
/// Batches are consecutive slices of a seeded per-epoch shuffle; the batch
/// gradient is accumulated in index order and averaged over the batch.
pub fn train(model: &mut Regressor, samples: &[Sample], scene: Option<&Scene>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("training needs at least one sample".into()));
    }
    let start = Instant::now();
    let points = visible_point_sets(samples, scene, &config.loss)?;
    let mut s = match config.loss {
        LossSpec::Homoscedastic { init, .. } => Some(init),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = config.batch_size.min(samples.len());
    let mut cursor = samples.len();

    let n_params = model.parameter_count();
    let mut adam = AdamState::new(n_params);
    let mut adam_s = AdamState::new(2);
    let mut grads = vec![0.0; n_params];

    let mut trace = Vec::with_capacity(config.max_iterations);
    let mut skipped_samples = 0;
    let mut skipped_batches = 0;
    let mut converged = false;

    for iteration in 1..=config.max_iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut indices = order[cursor..cursor + batch].to_vec();
        indices.sort_unstable();
        cursor += batch;

        grads.fill(0.0);
        let mut grad_s = [0.0; 2];
        let mut total = 0.0;
        let mut evaluated = 0;
        let current_s = s.unwrap_or_default();
        for &i in &indices {
            let sample = &samples[i];
            let out = model.forward(&sample.observation).map_err(|e| match e {
                Error::DegenerateHead { norm } => Error::Numerical(format!(
                    "degenerate quaternion head (norm {norm:e}) at iteration {iteration}"
                )),
                other => other,
            })?;
            let pts = points.as_ref().map(|p| p[i].as_slice());
            let Some(l) = sample_loss(&config.loss, &current_s, sample, pts, scene, &out.prediction)? else {
                skipped_samples += 1;
                continue;
            };
            evaluated += 1;
            total += l.value;
            if let Some(gs) = l.grad_s {
                grad_s[0] += gs[0];
                grad_s[1] += gs[1];
            }
            if !config.freeze_model {
                model.backward_into(&out.tape, &l.grad_position, &l.grad_quaternion_raw, &mut grads)?;
            }
        }
        if evaluated == 0 {
            skipped_batches += 1;
        }
        let scale = 1.0 / batch as f64;
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss {loss} at iteration {iteration} ({})",
                config.loss
            )));
        }
        trace.push(loss);

        if evaluated > 0 {
            if !config.freeze_model {
                grads.iter_mut().for_each(|g| *g *= scale);
                adam_step(model.parameters_mut(), &grads, &mut adam, &config.adam)?;
            }
            if let Some(params) = s.as_mut() {
                let mut v = [params.log_var_position, params.log_var_orientation];
                adam_step(&mut v, &[grad_s[0] * scale, grad_s[1] * scale], &mut adam_s, &config.adam)?;
                *params = HomoscedasticParams::new(v[0], v[1])?;
            }
        }

        if let Some(p) = config.plateau {
            let n = trace.len();
            if n >= 2 * p.window {
                let last: f64 = trace[n - p.window..].iter().sum::<f64>() / p.window as f64;
                let prev: f64 = trace[n - 2 * p.window..n - p.window].iter().sum::<f64>() / p.window as f64;
                let improvement = (prev - last) / prev.abs().max(f64::MIN_POSITIVE);
                if improvement < p.tolerance {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(TrainReport {
        iterations: trace.len(),
        loss_trace: trace,
        final_parameters: model.parameters().to_vec(),
        final_s: s,
        skipped_samples,
        skipped_batches,
        converged,
        wall_time: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepReport {
    pub pretrain: TrainReport,
    /// Mean reprojection loss over the training set before fine-tuning.
    pub finetune_initial_loss: f64,
    pub finetune: TrainReport,
}

/// Learned-weighting pretraining followed by reprojection fine-tuning.
pub fn two_step_train(
    model: &mut Regressor,
    samples: &[Sample],
    scene: &Scene,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
) -> Result<TwoStepReport> {
    if !matches!(pretrain.loss, LossSpec::Homoscedastic { .. }) {
        return Err(Error::Config("two-step training pretrains with the learned weighting".into()));
    }
    if !matches!(finetune.loss, LossSpec::Reprojection { .. }) {
        return Err(Error::Config("two-step training fine-tunes with the reprojection loss".into()));
    }
    let first = train(model, samples, Some(scene), pretrain)?;
    let initial = mean_loss(model, samples, Some(scene), &finetune.loss)?;
    let second = train(model, samples, Some(scene), finetune)?;
    Ok(TwoStepReport {
        pretrain: first,
        finetune_initial_loss: initial,
        finetune: second,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub median_position_m: f64,
    pub median_orientation_deg: f64,
    pub report: MetricReport,
}

/// Trains one fresh model per `beta` (same initialisation every time) and
/// evaluates it on `test`. The norm comes from `config.loss`.
pub fn beta_sweep(
    model_factory: impl Fn() -> Result<Regressor>,
    train_samples: &[Sample],
    test_samples: &[Sample],
    betas: &[f64],
    config: &TrainConfig,
    thresholds: (f64, f64),
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::Config("beta grid is empty".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(Error::Config(format!("beta grid entries must be positive, got {b}")));
    }
    let norm = config.loss.norm();
    betas
        .iter()
        .map(|&beta| {
            let mut model = model_factory()?;
            let cfg = TrainConfig {
                loss: LossSpec::Beta { beta, norm },
                ..config.clone()
            };
            train(&mut model, train_samples, None, &cfg)?;
            let report = evaluate(&model, test_samples, thresholds)?;
            Ok(SweepRow {
                beta,
                median_position_m: report.median_position_m,
                median_orientation_deg: report.median_orientation_deg,
                report,
            })
        })
        .collect()
}

/// `beta,median_pos_err_m,median_ori_err_deg` rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,median_pos_err_m,median_ori_err_deg\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            r.beta, r.median_position_m, r.median_orientation_deg
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Pose, Quaternion};
    use crate::model::RegressorConfig;
    use crate::scene::{generate_scene, SceneConfig, ScenePreset, Split};
    use nalgebra::{Vector3, Vector4};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        for g in [0.5, -3.0, 1e-4] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((p[0] - expected).abs() <= 1e-15, "{} vs {expected}", p[0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        let err = adam_step(&mut p, &[1.0, f64::NAN], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(st.t, 0);
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        // position is a linear function of the observation, orientation fixed
        (0..n)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 0.91).cos();
                Sample {
                    id: format!("s{i}"),
                    pose: Pose::new(Vector3::new(2.0 * a - b, 0.5 * b, a + b), Quaternion::identity()).unwrap(),
                    observation: vec![a, b],
                    visible_points: vec![],
                    path_parameter: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn learns_a_linear_map() {
        let samples = toy_samples(64);
        let mut model = Regressor::new(RegressorConfig::new(2).with_hidden(&[16]).with_seed(1)).unwrap();
        model.set_head_bias(&Vector3::zeros(), &Vector4::new(1.0, 0.0, 0.0, 0.0));
        let config = TrainConfig {
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            batch_size: 16,
            max_iterations: 3000,
            plateau: None,
            loss: LossSpec::Beta { beta: 10.0, norm: Norm::L2 },
            ..Default::default()
        };
        let before = mean_loss(&model, &samples, None, &config.loss).unwrap();
        let report = train(&mut model, &samples, None, &config).unwrap();
        let after = mean_loss(&model, &samples, None, &config.loss).unwrap();
        assert_eq!(report.iterations, 3000);
        assert_eq!(report.loss_trace.len(), 3000);
        assert!(after < 0.05 * before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(40);
        let config = TrainConfig {
            batch_size: 8,
            max_iterations: 200,
            ..Default::default()
        };
        let run = || {
            let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[8]).with_seed(3)).unwrap();
            train(&mut m, &samples, None, &config).unwrap()
        };
        assert!(run().same_outcome(&run()));
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let samples = toy_samples(30);
        let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[8]).with_seed(4)).unwrap();
        let before = m.parameters().to_vec();
        let config = TrainConfig {
            adam: AdamConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            batch_size: 30,
            max_iterations: 50,
            plateau: None,
            ..Default::default()
        };
        let r = train(&mut m, &samples, None, &config).unwrap();
        assert_eq!(m.parameters(), before.as_slice());
        assert!(r.loss_trace.iter().all(|l| *l == r.loss_trace[0]));
        assert_eq!(r.final_s, Some(HomoscedasticParams::default()));
    }

    #[test]
    fn log_variances_reach_log_of_task_loss() {
        // frozen model: the task losses are constants, so s* = log L
        let samples = toy_samples(32);
        let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[8]).with_seed(6)).unwrap();
        let norm = Norm::L1;
        let mut lx = 0.0;
        let mut lq = 0.0;
        for s in &samples {
            let out = m.forward(&s.observation).unwrap();
            lx += crate::loss::position_loss(&s.pose.position, &out.prediction.position, &norm).value;
            lq += crate::loss::quaternion_loss(&s.pose.orientation, &out.prediction.quaternion_raw, &norm)
                .unwrap()
                .value;
        }
        lx /= 32.0;
        lq /= 32.0;
        // decreasing step sizes, each phase resuming from the last estimate
        let mut s = HomoscedasticParams::default();
        for lr in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let config = TrainConfig {
                adam: AdamConfig {
                    learning_rate: lr,
                    ..Default::default()
                },
                batch_size: 32,
                max_iterations: 3000,
                plateau: None,
                freeze_model: true,
                loss: LossSpec::Homoscedastic { init: s, norm },
                ..Default::default()
            };
            s = train(&mut m, &samples, None, &config).unwrap().final_s.unwrap();
        }
        assert!((s.log_var_position - lx.ln()).abs() < 1e-6, "{} vs {}", s.log_var_position, lx.ln());
        assert!((s.log_var_orientation - lq.ln()).abs() < 1e-6);
    }

    #[test]
    fn learned_weighting_is_insensitive_to_initial_guess() {
        let samples = toy_samples(32);
        let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[8]).with_seed(6)).unwrap();
        let mut finals = Vec::new();
        for (sx, sq) in [(0.0, -3.0), (4.0, 4.0), (-6.0, 2.0)] {
            let mut s = HomoscedasticParams::new(sx, sq).unwrap();
            for lr in [1e-1, 1e-2, 1e-3] {
                let config = TrainConfig {
                    adam: AdamConfig { learning_rate: lr, ..Default::default() },
                    batch_size: 32,
                    max_iterations: 3000,
                    plateau: None,
                    freeze_model: true,
                    loss: LossSpec::Homoscedastic { init: s, norm: Norm::L1 },
                    ..Default::default()
                };
                s = train(&mut m, &samples, None, &config).unwrap().final_s.unwrap();
            }
            finals.push(s);
        }
        for s in &finals[1..] {
            assert!((s.log_var_position - finals[0].log_var_position).abs() < 1e-4);
            assert!((s.log_var_orientation - finals[0].log_var_orientation).abs() < 1e-4);
        }
    }

    #[test]
    fn plateau_stops_early() {
        let samples = toy_samples(16);
        let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[4]).with_seed(2)).unwrap();
        let config = TrainConfig {
            adam: AdamConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            batch_size: 16,
            max_iterations: 1000,
            plateau: Some(Plateau { window: 10, tolerance: 1e-3 }),
            ..Default::default()
        };
        let r = train(&mut m, &samples, None, &config).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 20);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { adam: AdamConfig { learning_rate: -1.0, ..Default::default() }, ..Default::default() },
            TrainConfig { plateau: Some(Plateau { window: 0, tolerance: 0.0 }), ..Default::default() },
            TrainConfig { loss: LossSpec::Beta { beta: 0.0, norm: Norm::L1 }, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_file_parsing() {
        let text = "# desk run\nlearning_rate = 1e-3\nbatch_size=32\nloss = beta\nbeta = 250 # outdoor\nnorm = huber:0.5\nplateau = off\nseed = 9\n";
        let c = TrainConfig::default().apply_text(text).unwrap();
        assert_eq!(c.adam.learning_rate, 1e-3);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.loss, LossSpec::Beta { beta: 250.0, norm: Norm::Huber { delta: 0.5 } });
        assert_eq!(c.plateau, None);
        assert_eq!(c.seed, 9);

        let c = TrainConfig::default().apply_text("loss = reprojection\nbounds = 2\nbounds_reference = ground-truth").unwrap();
        match c.loss {
            LossSpec::Reprojection { options, .. } => {
                assert_eq!(options.bounds, ImageBounds::symmetric(2.0, 2.0));
                assert_eq!(options.reference, BoundsReference::GroundTruth);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrainConfig::default().apply_text("colour = red"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::default().apply_text("\nbatch_size = -1"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::default().apply_text("loss = beta\nbeta = -1").is_err());
    }

    #[test]
    fn reprojection_needs_a_scene() {
        let samples = toy_samples(4);
        let mut m = Regressor::new(RegressorConfig::new(2).with_hidden(&[4])).unwrap();
        let config = TrainConfig {
            loss: LossSpec::Reprojection { norm: Norm::L1, options: Default::default() },
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &samples, None, &config), Err(Error::Config(_))));
    }

    fn small_scene() -> (Scene, Vec<Sample>, Vec<Sample>) {
        let mut cfg = SceneConfig::preset(ScenePreset::Room, 5);
        cfg.point_count = 200;
        cfg.anchor_count = 8;
        let scene = generate_scene(&cfg).unwrap();
        let train = scene.sample_poses(64, 1, Split::Train).unwrap();
        let test = scene.sample_poses(16, 1, Split::Test).unwrap();
        (scene, train, test)
    }

    #[test]
    fn two_step_records_both_phases() {
        let (scene, train_s, _) = small_scene();
        let mut m = Regressor::new(RegressorConfig::new(scene.observation_dim()).with_hidden(&[16]).with_seed(1)).unwrap();
        let pre = TrainConfig {
            adam: AdamConfig { learning_rate: 1e-2, ..Default::default() },
            batch_size: 16,
            max_iterations: 300,
            plateau: None,
            ..Default::default()
        };
        let fine = TrainConfig {
            max_iterations: 100,
            loss: LossSpec::Reprojection { norm: Norm::L1, options: Default::default() },
            ..pre.clone()
        };
        let r = two_step_train(&mut m, &train_s, &scene, &pre, &fine).unwrap();
        assert_eq!(r.pretrain.loss_trace.len(), 300);
        assert_eq!(r.finetune.loss_trace.len(), 100);
        assert!(r.finetune_initial_loss.is_finite());
        assert!(r.pretrain.final_s.is_some() && r.finetune.final_s.is_none());

        assert!(two_step_train(&mut m, &train_s, &scene, &fine, &pre).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let (scene, train_s, test_s) = small_scene();
        let factory = || Regressor::new(RegressorConfig::new(scene.observation_dim()).with_hidden(&[8]).with_seed(2));
        let config = TrainConfig {
            batch_size: 16,
            max_iterations: 20,
            loss: LossSpec::Beta { beta: 1.0, norm: Norm::L1 },
            ..Default::default()
        };
        let rows = beta_sweep(factory, &train_s, &test_s, &[300.0], &config, (2.0, 5.0)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].beta, 300.0);
        assert!(sweep_csv(&rows).lines().count() == 2);
        assert!(beta_sweep(factory, &train_s, &test_s, &[], &config, (2.0, 5.0)).is_err());
        assert!(beta_sweep(factory, &train_s, &test_s, &[100.0, -1.0], &config, (2.0, 5.0)).is_err());
    }
}
