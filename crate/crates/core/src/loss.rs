//! Pose regression losses with analytic gradients.
//!
//! Every loss takes the ground-truth [`Pose`] and the raw regressor output
//! ([`PosePrediction`]) and returns the gradient with respect to the
//! predicted position and the *unnormalised* quaternion, so the
//! normalisation layer of the pose head is differentiated here.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geom::{self, CameraIntrinsics, Point3, Pose, Quaternion};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_TUKEY_C: f64 = 4.685;

/// Initial log-variances for the learned weighting.
pub const DEFAULT_LOG_VARIANCE_POSITION: f64 = 0.0;
pub const DEFAULT_LOG_VARIANCE_ORIENTATION: f64 = -3.0;

/// Regression norm applied to a residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Norm {
    #[default]
    L1,
    /// Euclidean length (not squared).
    L2,
    /// Elementwise Huber loss, summed.
    Huber { delta: f64 },
    /// Elementwise Tukey biweight loss, summed.
    Tukey { c: f64 },
}

impl Norm {
    pub fn huber(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        Ok(Norm::Huber { delta })
    }

    pub fn tukey(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("tukey c must be positive, got {c}")));
        }
        Ok(Norm::Tukey { c })
    }

    /// Whether `r` is within `tol` of a point where the norm's derivative is
    /// discontinuous (or, for Huber, where its curvature jumps).
    pub fn near_kink(&self, r: &[f64], tol: f64) -> bool {
        match *self {
            Norm::L1 => r.iter().any(|v| v.abs() < tol),
            Norm::L2 => r.iter().map(|v| v * v).sum::<f64>().sqrt() < tol,
            Norm::Huber { delta } => r.iter().any(|v| (v.abs() - delta).abs() < tol),
            Norm::Tukey { c } => r.iter().any(|v| (v.abs() - c).abs() < tol),
        }
    }

    /// Evaluates the norm of `r`, writing its gradient into `grad`.
    pub fn eval_into(&self, r: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(r.len(), grad.len());
        match *self {
            Norm::L1 => {
                for (g, v) in grad.iter_mut().zip(r) {
                    *g = if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                r.iter().map(|v| v.abs()).sum()
            }
            Norm::L2 => {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (g, v) in grad.iter_mut().zip(r) {
                    *g = if n > 0.0 { v / n } else { 0.0 };
                }
                n
            }
            Norm::Huber { delta } => {
                let mut total = 0.0;
                for (g, v) in grad.iter_mut().zip(r) {
                    if v.abs() <= delta {
                        total += 0.5 * v * v;
                        *g = *v;
                    } else {
                        total += delta * (v.abs() - 0.5 * delta);
                        *g = delta * v.signum();
                    }
                }
                total
            }
            Norm::Tukey { c } => {
                let cap = c * c / 6.0;
                let mut total = 0.0;
                for (g, v) in grad.iter_mut().zip(r) {
                    if v.abs() <= c {
                        let t = 1.0 - (v / c).powi(2);
                        total += cap * (1.0 - t * t * t);
                        *g = v * t * t;
                    } else {
                        total += cap;
                        *g = 0.0;
                    }
                }
                total
            }
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::L1 => f.write_str("l1"),
            Norm::L2 => f.write_str("l2"),
            Norm::Huber { delta } => write!(f, "huber:{delta}"),
            Norm::Tukey { c } => write!(f, "tukey:{c}"),
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    /// Accepts `l1`, `l2`, `huber`, `tukey`, and `huber:<delta>` / `tukey:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let param = param
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid norm parameter {p:?}")))
            })
            .transpose()?;
        match (name.to_ascii_lowercase().as_str(), param) {
            ("l1", None) => Ok(Norm::L1),
            ("l2", None) => Ok(Norm::L2),
            ("huber", p) => Norm::huber(p.unwrap_or(DEFAULT_HUBER_DELTA)),
            ("tukey", p) => Norm::tukey(p.unwrap_or(DEFAULT_TUKEY_C)),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

/// Evaluates `n` at `r`, returning the value and gradient.
pub fn norm_eval(n: &Norm, r: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; r.len()];
    let value = n.eval_into(r, &mut grad);
    (value, grad)
}

/// Learned log-variances `s = log(sigma^2)` of the position and orientation tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomoscedasticParams {
    pub log_var_position: f64,
    pub log_var_orientation: f64,
}

impl Default for HomoscedasticParams {
    fn default() -> Self {
        Self {
            log_var_position: DEFAULT_LOG_VARIANCE_POSITION,
            log_var_orientation: DEFAULT_LOG_VARIANCE_ORIENTATION,
        }
    }
}

impl HomoscedasticParams {
    pub fn new(log_var_position: f64, log_var_orientation: f64) -> Result<Self> {
        if !(log_var_position.is_finite() && log_var_orientation.is_finite()) {
            return Err(Error::Config("log-variances must be finite".into()));
        }
        Ok(Self {
            log_var_position,
            log_var_orientation,
        })
    }

    /// Effective weights `exp(-s)` of the two tasks.
    pub fn weights(&self) -> (f64, f64) {
        ((-self.log_var_position).exp(), (-self.log_var_orientation).exp())
    }
}

/// Raw output of the pose head: position and the quaternion before normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub position: Vector3<f64>,
    pub quaternion_raw: Vector4<f64>,
}

impl PosePrediction {
    pub fn new(position: Vector3<f64>, quaternion_raw: Vector4<f64>) -> Self {
        Self {
            position,
            quaternion_raw,
        }
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self::new(pose.position, pose.orientation.to_vector())
    }

    pub fn to_pose(&self) -> Result<Pose> {
        Pose::new(self.position, Quaternion::from_vector(&self.quaternion_raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_position: Vector3<f64>,
    /// Gradient with respect to the unnormalised quaternion.
    pub grad_quaternion_raw: Vector4<f64>,
    /// `(d/ds_x, d/ds_q)` for the learned weighting, otherwise `None`.
    pub grad_s: Option<[f64; 2]>,
}

impl LossResult {
    fn zero() -> Self {
        Self {
            value: 0.0,
            grad_position: Vector3::zeros(),
            grad_quaternion_raw: Vector4::zeros(),
            grad_s: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_position.iter().all(|v| v.is_finite())
            && self.grad_quaternion_raw.iter().all(|v| v.is_finite())
            && self.grad_s.is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Normalises the raw quaternion, returning the unit vector and
/// `(I - q q^T) / |raw|`, the Jacobian of the normalisation.
fn normalize_with_jacobian(raw: &Vector4<f64>) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    let n = raw.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Domain(format!(
            "predicted quaternion has invalid norm {n}"
        )));
    }
    let unit = raw / n;
    let jac = (Matrix4::identity() - unit * unit.transpose()) / n;
    Ok((unit, jac))
}

/// `|x - x_hat|` under `norm`, gradient with respect to `x_hat`.
pub fn position_loss(x: &Vector3<f64>, x_hat: &Vector3<f64>, norm: &Norm) -> LossResult {
    let r = x - x_hat;
    let mut g = [0.0; 3];
    let value = norm.eval_into(r.as_slice(), &mut g);
    LossResult {
        value,
        grad_position: -Vector3::from(g),
        ..LossResult::zero()
    }
}

/// `|q - q_hat / |q_hat||` under `norm`, gradient with respect to the raw `q_hat`.
/// The label is moved to the canonical hemisphere first.
pub fn quaternion_loss(q: &Quaternion, q_hat_raw: &Vector4<f64>, norm: &Norm) -> Result<LossResult> {
    let label = q.canonicalize()?.to_vector();
    let (unit, jac) = normalize_with_jacobian(q_hat_raw)?;
    let r = label - unit;
    let mut g = [0.0; 4];
    let value = norm.eval_into(r.as_slice(), &mut g);
    let grad_unit = -Vector4::from(g);
    Ok(LossResult {
        value,
        grad_quaternion_raw: jac * grad_unit,
        ..LossResult::zero()
    })
}

/// Fixed linear weighting `L_x + beta * L_q`.
pub fn beta_loss(gt: &Pose, pred: &PosePrediction, beta: f64, norm: &Norm) -> Result<LossResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let lx = position_loss(&gt.position, &pred.position, norm);
    let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, norm)?;
    Ok(LossResult {
        value: lx.value + beta * lq.value,
        grad_position: lx.grad_position,
        grad_quaternion_raw: lq.grad_quaternion_raw * beta,
        grad_s: None,
    })
}

/// Learned weighting `L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q`.
///
/// The value is not bounded below by zero: the regularisers `s_x + s_q` may be
/// negative.
pub fn homoscedastic_loss(
    gt: &Pose,
    pred: &PosePrediction,
    s: &HomoscedasticParams,
    norm: &Norm,
) -> Result<LossResult> {
    let lx = position_loss(&gt.position, &pred.position, norm);
    let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, norm)?;
    let (wx, wq) = s.weights();
    Ok(LossResult {
        value: lx.value * wx + s.log_var_position + lq.value * wq + s.log_var_orientation,
        grad_position: lx.grad_position * wx,
        grad_quaternion_raw: lq.grad_quaternion_raw * wq,
        grad_s: Some([1.0 - lx.value * wx, 1.0 - lq.value * wq]),
    })
}

/// Which projection decides whether a point falls outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundsReference {
    #[default]
    Predicted,
    GroundTruth,
}

/// Axis-aligned image window in image coordinates (inclusive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBounds {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ImageBounds {
    /// `|u| <= 1, |v| <= 1`, a 90 degree field of view under identity intrinsics.
    fn default() -> Self {
        Self::symmetric(1.0, 1.0)
    }
}

impl ImageBounds {
    pub fn symmetric(half_width: f64, half_height: f64) -> Self {
        Self {
            u_min: -half_width,
            u_max: half_width,
            v_min: -half_height,
            v_max: half_height,
        }
    }

    pub fn new(u_min: f64, u_max: f64, v_min: f64, v_max: f64) -> Result<Self> {
        if !(u_min < u_max && v_min < v_max) {
            return Err(Error::Config("image bounds must have positive extent".into()));
        }
        Ok(Self {
            u_min,
            u_max,
            v_min,
            v_max,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }

    /// Distance from `(u, v)` to the nearest edge of the window.
    pub fn edge_distance(&self, u: f64, v: f64) -> f64 {
        [
            (u - self.u_min).abs(),
            (u - self.u_max).abs(),
            (v - self.v_min).abs(),
            (v - self.v_max).abs(),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }
}

/// Points at or closer than this depth (under either pose) are not used.
pub const MIN_POINT_DEPTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionOptions {
    pub bounds: ImageBounds,
    pub reference: BoundsReference,
    pub min_depth: f64,
}

impl Default for ReprojectionOptions {
    fn default() -> Self {
        Self {
            bounds: ImageBounds::default(),
            reference: BoundsReference::Predicted,
            min_depth: MIN_POINT_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReprojectionOutcome {
    Evaluated { loss: LossResult, retained: usize },
    /// Every point was excluded; the sample carries no signal.
    Skipped,
}

impl ReprojectionOutcome {
    pub fn loss(&self) -> Option<&LossResult> {
        match self {
            ReprojectionOutcome::Evaluated { loss, .. } => Some(loss),
            ReprojectionOutcome::Skipped => None,
        }
    }
}

/// Mean reprojection residual between the ground-truth and predicted camera
/// over the points that survive depth and image-bound exclusion.
pub fn reprojection_loss(
    gt: &Pose,
    pred: &PosePrediction,
    k: &CameraIntrinsics,
    visible: &[Point3<f64>],
    norm: &Norm,
    options: &ReprojectionOptions,
) -> Result<ReprojectionOutcome> {
    if visible.is_empty() {
        return Err(Error::Domain("reprojection loss needs at least one point".into()));
    }
    if !gt.orientation.is_unit() {
        return Err(Error::Domain("ground-truth orientation is not unit".into()));
    }
    let (unit, norm_jac) = normalize_with_jacobian(&pred.quaternion_raw)?;
    let q_hat = Quaternion::from_vector(&unit);

    let mut total = 0.0;
    let mut grad_pos = Vector3::zeros();
    let mut grad_unit = Vector4::zeros();
    let mut retained = 0usize;
    let mut g = [0.0; 2];
    for point in visible {
        let Ok((uv_gt, depth_gt)) = geom::project_raw(&gt.position, &gt.orientation, k, point) else {
            continue;
        };
        if depth_gt <= options.min_depth {
            continue;
        }
        let Ok((uv_hat, depth_hat, jac)) = geom::project_grad_raw(&pred.position, &q_hat, k, point)
        else {
            continue;
        };
        if depth_hat <= options.min_depth {
            continue;
        }
        let reference = match options.reference {
            BoundsReference::Predicted => uv_hat,
            BoundsReference::GroundTruth => uv_gt,
        };
        if !options.bounds.contains(reference.x, reference.y) {
            continue;
        }
        let r = uv_gt - uv_hat;
        total += norm.eval_into(r.as_slice(), &mut g);
        // d(residual)/d(pred) = -jac
        let upstream = jac.transpose() * Vector2::new(-g[0], -g[1]);
        grad_pos += upstream.fixed_rows::<3>(0);
        grad_unit += upstream.fixed_rows::<4>(3);
        retained += 1;
    }
    if retained == 0 {
        return Ok(ReprojectionOutcome::Skipped);
    }
    let scale = 1.0 / retained as f64;
    Ok(ReprojectionOutcome::Evaluated {
        loss: LossResult {
            value: total * scale,
            grad_position: grad_pos * scale,
            grad_quaternion_raw: norm_jac * (grad_unit * scale),
            grad_s: None,
        },
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-6;
    const KINK: f64 = 1e-4;

    fn random_unit(rng: &mut impl Rng) -> Quaternion {
        loop {
            let v = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if v.norm() > 0.2 {
                return Quaternion::from_vector(&v).normalize().unwrap();
            }
        }
    }

    fn random_vec3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn random_norm(rng: &mut impl Rng) -> Norm {
        match rng.random_range(0..4) {
            0 => Norm::L1,
            1 => Norm::L2,
            2 => Norm::Huber { delta: 0.3 },
            _ => Norm::Tukey { c: 1.5 },
        }
    }

    /// Normwise relative error of an analytic gradient against central differences.
    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    /// Packs `(x_hat, q_hat_raw)` into a 7-vector for finite differences.
    fn fd_pred(f: impl Fn(&PosePrediction) -> f64, pred: &PosePrediction) -> Vec<f64> {
        (0..7)
            .map(|i| {
                let mut p = *pred;
                let mut m = *pred;
                if i < 3 {
                    p.position[i] += H;
                    m.position[i] -= H;
                } else {
                    p.quaternion_raw[i - 3] += H;
                    m.quaternion_raw[i - 3] -= H;
                }
                (f(&p) - f(&m)) / (2.0 * H)
            })
            .collect()
    }

    fn analytic_pred(l: &LossResult) -> Vec<f64> {
        l.grad_position.iter().chain(l.grad_quaternion_raw.iter()).copied().collect()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm_eval(&Norm::L1, &[1.0, -2.0, 3.0]).0, 6.0);
        assert_eq!(norm_eval(&Norm::L2, &[3.0, 4.0]).0, 5.0);
        assert_eq!(norm_eval(&Norm::Huber { delta: 1.0 }, &[0.5]).0, 0.125);
        assert_eq!(norm_eval(&Norm::Huber { delta: 1.0 }, &[3.0]).0, 2.5);
        // outside c the Tukey loss saturates at c^2 / 6
        let (v, g) = norm_eval(&Norm::Tukey { c: 3.0 }, &[5.0]);
        assert_eq!((v, g[0]), (1.5, 0.0));
        assert_eq!(norm_eval(&Norm::L1, &[0.0, 2.0]).1, vec![0.0, 1.0]);
        assert_eq!(norm_eval(&Norm::L2, &[0.0, 0.0]).1, vec![0.0, 0.0]);
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("l1".parse::<Norm>().unwrap(), Norm::L1);
        assert_eq!("L2".parse::<Norm>().unwrap(), Norm::L2);
        assert_eq!("huber".parse::<Norm>().unwrap(), Norm::Huber { delta: 1.0 });
        assert_eq!("tukey".parse::<Norm>().unwrap(), Norm::Tukey { c: 4.685 });
        assert_eq!("huber:0.5".parse::<Norm>().unwrap(), Norm::Huber { delta: 0.5 });
        assert!("huber:-1".parse::<Norm>().is_err());
        assert!("l3".parse::<Norm>().is_err());
        for n in [Norm::L1, Norm::L2, Norm::Huber { delta: 0.25 }, Norm::Tukey { c: 2.0 }] {
            assert_eq!(n.to_string().parse::<Norm>().unwrap(), n);
        }
    }

    #[test]
    fn position_loss_examples() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(position_loss(&x, &x, &Norm::L1).value, 0.0);

        let l = position_loss(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), &Norm::L1);
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad_position, Vector3::new(-1.0, 0.0, 0.0));

        let l = position_loss(&Vector3::new(1.0, 1.0, 1.0), &Vector3::zeros(), &Norm::L2);
        assert!((l.value - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quaternion_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_unit(&mut rng).canonicalize().unwrap();
        let l = quaternion_loss(&q, &(q.to_vector() * 2.0), &Norm::L1).unwrap();
        assert!(l.value < 1e-15);

        let l = quaternion_loss(
            &Quaternion::identity(),
            &Vector4::new(0.0, 1.0, 0.0, 0.0),
            &Norm::L1,
        )
        .unwrap();
        assert_eq!(l.value, 2.0);

        assert!(quaternion_loss(&q, &Vector4::zeros(), &Norm::L1).is_err());
    }

    #[test]
    fn quaternion_label_is_canonicalized() {
        let raw = Vector4::new(1.0, 0.2, 0.0, 0.0);
        let a = quaternion_loss(&Quaternion::identity(), &raw, &Norm::L1).unwrap();
        let b = quaternion_loss(&-Quaternion::identity(), &raw, &Norm::L1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_loss_examples() {
        let gt = Pose::identity();
        let perfect = PosePrediction::from_pose(&gt);
        assert_eq!(beta_loss(&gt, &perfect, 500.0, &Norm::L1).unwrap().value, 0.0);

        // (cos a, sin a, 0, 0) has L1 quaternion residual (1 - cos a) + sin a = 0.01
        let a = (-0.99 / 2f64.sqrt()).asin() + std::f64::consts::FRAC_PI_4;
        let pred = PosePrediction::new(Vector3::new(1.0, 0.0, 0.0), Vector4::new(a.cos(), a.sin(), 0.0, 0.0));
        let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, &Norm::L1).unwrap();
        assert!((lq.value - 0.01).abs() < 1e-15);
        let l = beta_loss(&gt, &pred, 500.0, &Norm::L1).unwrap();
        assert!((l.value - 6.0).abs() < 1e-12);

        let pred = PosePrediction::new(Vector3::new(1.0, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0));
        let l = beta_loss(&gt, &pred, 500.0, &Norm::L1).unwrap();
        assert_eq!(l.value, 1.0);

        assert!(matches!(beta_loss(&gt, &perfect, 0.0, &Norm::L1), Err(Error::Config(_))));
        assert!(matches!(beta_loss(&gt, &perfect, -3.0, &Norm::L1), Err(Error::Config(_))));
    }

    #[test]
    fn beta_loss_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let gt = Pose::new(random_vec3(&mut rng, 5.0), random_unit(&mut rng)).unwrap();
            let pred = PosePrediction::new(
                random_vec3(&mut rng, 5.0),
                random_unit(&mut rng).to_vector() * 1.7,
            );
            let beta = rng.random_range(1.0..1000.0);
            let lx = position_loss(&gt.position, &pred.position, &Norm::L1).value;
            let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, &Norm::L1)
                .unwrap()
                .value;
            let l = beta_loss(&gt, &pred, beta, &Norm::L1).unwrap();
            assert!((l.value - (lx + beta * lq)).abs() <= 1e-12 * l.value.max(1.0));
        }
    }

    /// A prediction with `L_x = 2` and `L_q = 0.5` under L1.
    fn fixed_residual_case() -> (Pose, PosePrediction) {
        let gt = Pose::identity();
        // unit quaternion (cos a, sin a, 0, 0) has L1 residual (1 - cos a) + sin a = 0.5
        // for a solving sin a - cos a = -0.5, i.e. a = asin(-0.5 / sqrt 2) + pi / 4
        let a = (-0.5 / 2f64.sqrt()).asin() + std::f64::consts::FRAC_PI_4;
        let q = Vector4::new(a.cos(), a.sin(), 0.0, 0.0);
        (gt, PosePrediction::new(Vector3::new(2.0, 0.0, 0.0), q))
    }

    #[test]
    fn homoscedastic_examples() {
        let (gt, pred) = fixed_residual_case();
        let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, &Norm::L1).unwrap();
        assert!((lq.value - 0.5).abs() < 1e-15);

        let s = HomoscedasticParams::default();
        assert_eq!((s.log_var_position, s.log_var_orientation), (0.0, -3.0));
        let l = homoscedastic_loss(&gt, &pred, &s, &Norm::L1).unwrap();
        let expected = 2.0 + 0.0 + 0.5 * 3f64.exp() - 3.0;
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 9.0428).abs() < 1e-4);
        let gs = l.grad_s.unwrap();
        assert!((gs[0] + 1.0).abs() < 1e-15);

        let fd = |sx: f64| {
            let s = HomoscedasticParams::new(sx, -3.0).unwrap();
            homoscedastic_loss(&gt, &pred, &s, &Norm::L1).unwrap().value
        };
        assert!(((fd(H) - fd(-H)) / (2.0 * H) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn homoscedastic_reduces_to_sum_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let zero = HomoscedasticParams::new(0.0, 0.0).unwrap();
        for _ in 0..200 {
            let gt = Pose::new(random_vec3(&mut rng, 10.0), random_unit(&mut rng)).unwrap();
            let pred = PosePrediction::new(random_vec3(&mut rng, 10.0), random_unit(&mut rng).to_vector());
            let norm = random_norm(&mut rng);
            let lx = position_loss(&gt.position, &pred.position, &norm).value;
            let lq = quaternion_loss(&gt.orientation, &pred.quaternion_raw, &norm).unwrap().value;
            let l = homoscedastic_loss(&gt, &pred, &zero, &norm).unwrap();
            assert_eq!(l.value, lx + lq);
        }
    }

    #[test]
    fn losses_vanish_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = CameraIntrinsics::new(1.3, 0.9, 0.1, -0.2, 0.0).unwrap();
        for _ in 0..100 {
            let q = random_unit(&mut rng).canonicalize().unwrap();
            let gt = Pose::new(random_vec3(&mut rng, 3.0), q).unwrap();
            let norm = random_norm(&mut rng);
            let exact = PosePrediction::from_pose(&gt);
            assert!(beta_loss(&gt, &exact, 250.0, &norm).unwrap().value < 1e-12);
            // rescaling the raw quaternion only costs rounding
            let pred = PosePrediction::new(gt.position, gt.orientation.to_vector() * 3.0);
            assert!(beta_loss(&gt, &pred, 250.0, &norm).unwrap().value < 1e-12);
            let s = HomoscedasticParams::new(0.7, -1.2).unwrap();
            let l = homoscedastic_loss(&gt, &pred, &s, &norm).unwrap();
            assert!((l.value - (0.7 - 1.2)).abs() < 1e-14);

            let points: Vec<_> = (0..20)
                .map(|_| Point3::from(random_vec3(&mut rng, 5.0)))
                .collect();
            let options = ReprojectionOptions {
                bounds: ImageBounds::symmetric(1e6, 1e6),
                ..Default::default()
            };
            match reprojection_loss(&gt, &pred, &k, &points, &norm, &options).unwrap() {
                ReprojectionOutcome::Evaluated { loss, .. } => assert!(loss.value < 1e-12),
                ReprojectionOutcome::Skipped => {}
            }
        }
    }

    #[test]
    fn reprojection_examples() {
        let k = CameraIntrinsics::identity();
        let gt = Pose::identity();
        let points = [Point3::new(0.0, 0.0, 2.0)];
        let pred = PosePrediction::new(Vector3::new(0.2, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0));
        let out = reprojection_loss(&gt, &pred, &k, &points, &Norm::L1, &Default::default()).unwrap();
        let loss = out.loss().unwrap();
        assert!((loss.value - 0.1).abs() < 1e-15);

        assert!(matches!(
            reprojection_loss(&gt, &pred, &k, &[], &Norm::L1, &Default::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reprojection_skips_when_everything_is_excluded() {
        let k = CameraIntrinsics::identity();
        let gt = Pose::identity();
        // predicted camera shifted so the only point projects to u = 5
        let pred = PosePrediction::new(Vector3::new(10.0, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0));
        let points = [Point3::new(0.0, 0.0, 2.0)];
        let out = reprojection_loss(&gt, &pred, &k, &points, &Norm::L1, &Default::default()).unwrap();
        assert_eq!(out, ReprojectionOutcome::Skipped);

        // judged by the ground-truth projection the point is kept
        let options = ReprojectionOptions {
            reference: BoundsReference::GroundTruth,
            ..Default::default()
        };
        let out = reprojection_loss(&gt, &pred, &k, &points, &Norm::L1, &options).unwrap();
        assert!((out.loss().unwrap().value - 5.0).abs() < 1e-12);

        // behind the camera under either pose
        let behind = [Point3::new(0.0, 0.0, -2.0)];
        let perfect = PosePrediction::from_pose(&gt);
        let out = reprojection_loss(&gt, &perfect, &k, &behind, &Norm::L1, &Default::default()).unwrap();
        assert_eq!(out, ReprojectionOutcome::Skipped);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut worst = [0.0f64; 5];
        let mut counts = [0usize; 5];
        while counts.iter().any(|c| *c < 1000) {
            let norm = random_norm(&mut rng);
            let gt = Pose::new(random_vec3(&mut rng, 2.0), random_unit(&mut rng)).unwrap();
            let pred = PosePrediction::new(
                gt.position + random_vec3(&mut rng, 0.5),
                gt.orientation.to_vector() * rng.random_range(0.5..2.0)
                    + Vector4::from_fn(|_, _| rng.random_range(-0.3..0.3)),
            );
            let rx = gt.position - pred.position;
            let label = gt.orientation.canonicalize().unwrap().to_vector();
            let rq = label - pred.quaternion_raw.normalize();
            if norm.near_kink(rx.as_slice(), KINK) || norm.near_kink(rq.as_slice(), KINK) {
                continue;
            }

            let l = position_loss(&gt.position, &pred.position, &norm);
            let fd = fd_pred(|p| position_loss(&gt.position, &p.position, &norm).value, &pred);
            worst[0] = worst[0].max(rel_err(&analytic_pred(&l), &fd));
            counts[0] += 1;

            let l = quaternion_loss(&gt.orientation, &pred.quaternion_raw, &norm).unwrap();
            let fd = fd_pred(
                |p| quaternion_loss(&gt.orientation, &p.quaternion_raw, &norm).unwrap().value,
                &pred,
            );
            worst[1] = worst[1].max(rel_err(&analytic_pred(&l), &fd));
            counts[1] += 1;

            let beta = rng.random_range(10.0..1000.0);
            let l = beta_loss(&gt, &pred, beta, &norm).unwrap();
            let fd = fd_pred(|p| beta_loss(&gt, p, beta, &norm).unwrap().value, &pred);
            worst[2] = worst[2].max(rel_err(&analytic_pred(&l), &fd));
            counts[2] += 1;

            let s = HomoscedasticParams::new(rng.random_range(-3.0..2.0), rng.random_range(-4.0..1.0))
                .unwrap();
            let l = homoscedastic_loss(&gt, &pred, &s, &norm).unwrap();
            let mut analytic = analytic_pred(&l);
            analytic.extend(l.grad_s.unwrap());
            let mut fd = fd_pred(|p| homoscedastic_loss(&gt, p, &s, &norm).unwrap().value, &pred);
            for i in 0..2 {
                let eval = |d: f64| {
                    let mut t = s;
                    if i == 0 {
                        t.log_var_position += d;
                    } else {
                        t.log_var_orientation += d;
                    }
                    homoscedastic_loss(&gt, &pred, &t, &norm).unwrap().value
                };
                fd.push((eval(H) - eval(-H)) / (2.0 * H));
            }
            worst[3] = worst[3].max(rel_err(&analytic, &fd));
            counts[3] += 1;

            // reprojection: points in front of the ground-truth camera
            let k = CameraIntrinsics::new(
                rng.random_range(0.8..1.5),
                rng.random_range(0.8..1.5),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                0.0,
            )
            .unwrap();
            let r = gt.rotation();
            let points: Vec<_> = (0..8)
                .map(|_| {
                    let cam = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(2.0..6.0),
                    );
                    Point3::from(r.transpose() * (cam - gt.position))
                })
                .collect();
            let options = ReprojectionOptions {
                bounds: ImageBounds::symmetric(4.0, 4.0),
                ..Default::default()
            };
            let q_hat = Quaternion::from_vector(&pred.quaternion_raw.normalize());
            let near_edge = points.iter().any(|g| {
                let a = geom::project_raw(&gt.position, &gt.orientation, &k, g).unwrap().0;
                let Ok((b, d)) = geom::project_raw(&pred.position, &q_hat, &k, g) else {
                    return true;
                };
                d < 0.05
                    || options.bounds.edge_distance(b.x, b.y) < KINK
                    || norm.near_kink((a - b).as_slice(), KINK)
            });
            if near_edge {
                continue;
            }
            let ReprojectionOutcome::Evaluated { loss, .. } =
                reprojection_loss(&gt, &pred, &k, &points, &norm, &options).unwrap()
            else {
                continue;
            };
            let fd = fd_pred(
                |p| match reprojection_loss(&gt, p, &k, &points, &norm, &options).unwrap() {
                    ReprojectionOutcome::Evaluated { loss, .. } => loss.value,
                    ReprojectionOutcome::Skipped => f64::NAN,
                },
                &pred,
            );
            worst[4] = worst[4].max(rel_err(&analytic_pred(&loss), &fd));
            counts[4] += 1;
        }
        for (name, w) in ["position", "quaternion", "beta", "homoscedastic", "reprojection"]
            .iter()
            .zip(worst)
        {
            assert!(w <= 1e-5, "{name}: worst relative error {w:e}");
        }
    }

    proptest! {
        #[test]
        fn quaternion_loss_scale_invariant(
            raw in prop::array::uniform4(-1.0f64..1.0),
            label in prop::array::uniform4(-1.0f64..1.0),
            t in 0.1f64..10.0,
        ) {
            let raw = Vector4::from(raw);
            prop_assume!(raw.norm() > 1e-2);
            let label = Quaternion::from_vector(&Vector4::from(label));
            prop_assume!(label.norm() > 1e-2);
            let label = label.normalize().unwrap();
            for norm in [Norm::L1, Norm::L2, Norm::Huber { delta: 0.5 }] {
                let a = quaternion_loss(&label, &raw, &norm).unwrap();
                let b = quaternion_loss(&label, &(raw * t), &norm).unwrap();
                prop_assert!((a.value - b.value).abs() <= 1e-12);
                // no gradient along the radial direction
                prop_assert!(a.grad_quaternion_raw.dot(&raw).abs() <= 1e-9);
            }
        }

        #[test]
        fn losses_are_nonnegative(
            x in prop::array::uniform3(-10.0f64..10.0),
            raw in prop::array::uniform4(-1.0f64..1.0),
            beta in 1.0f64..2000.0,
        ) {
            let raw = Vector4::from(raw);
            prop_assume!(raw.norm() > 1e-2);
            let pred = PosePrediction::new(Vector3::from(x), raw);
            let gt = Pose::identity();
            for norm in [Norm::L1, Norm::L2, Norm::Huber { delta: 1.0 }, Norm::Tukey { c: 4.685 }] {
                prop_assert!(beta_loss(&gt, &pred, beta, &norm).unwrap().value >= 0.0);
            }
        }
    }
}
