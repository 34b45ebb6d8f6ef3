//! Localisation metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::angular_error_deg;
use crate::loss::{reprojection_loss, Norm, PosePrediction, ReprojectionOptions, ReprojectionOutcome};
use crate::model::Regressor;
use crate::scene::{Sample, Scene};

/// Joint accuracy thresholds `(metres, degrees)`.
pub const ROOM_THRESHOLDS: (f64, f64) = (2.0, 5.0);
pub const STREET_THRESHOLDS: (f64, f64) = (10.0, 10.0);

const CSV_HEADER: &str = "id,pos_err_m,ori_err_deg";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub id: String,
    pub position_m: f64,
    pub orientation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_sample: Vec<SampleError>,
    pub median_position_m: f64,
    pub median_orientation_deg: f64,
    pub mean_position_m: f64,
    pub mean_orientation_deg: f64,
    /// Thresholds used for the summary accuracy.
    pub thresholds: (f64, f64),
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

impl MetricReport {
    pub fn from_errors(per_sample: Vec<SampleError>, thresholds: (f64, f64)) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Domain("cannot summarise zero samples".into()));
        }
        let pos: Vec<f64> = per_sample.iter().map(|e| e.position_m).collect();
        let ori: Vec<f64> = per_sample.iter().map(|e| e.orientation_deg).collect();
        Ok(Self {
            median_position_m: median(&pos).unwrap(),
            median_orientation_deg: median(&ori).unwrap(),
            mean_position_m: mean(pos.iter().copied()),
            mean_orientation_deg: mean(ori.iter().copied()),
            per_sample,
            thresholds,
        })
    }

    /// Fraction of samples with position error `< max_position_m` and
    /// orientation error `< max_orientation_deg`.
    pub fn accuracy_at(&self, max_position_m: f64, max_orientation_deg: f64) -> f64 {
        let hits = self
            .per_sample
            .iter()
            .filter(|e| e.position_m < max_position_m && e.orientation_deg < max_orientation_deg)
            .count();
        hits as f64 / self.per_sample.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy_at(self.thresholds.0, self.thresholds.1)
    }

    /// Per-sample rows followed by `#`-prefixed summary rows.
    pub fn to_csv(&self) -> Result<String> {
        let f = |v: f64| format!("{v:.16e}");
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for e in &self.per_sample {
            if e.id.contains([',', '\n', '\r']) || e.id.starts_with('#') {
                return Err(Error::Domain(format!("sample id {:?} cannot be written to csv", e.id)));
            }
            writeln!(out, "{},{},{}", e.id, f(e.position_m), f(e.orientation_deg)).unwrap();
        }
        let (tx, tq) = self.thresholds;
        writeln!(out, "#median,{},{}", f(self.median_position_m), f(self.median_orientation_deg)).unwrap();
        writeln!(out, "#mean,{},{}", f(self.mean_position_m), f(self.mean_orientation_deg)).unwrap();
        writeln!(out, "#accuracy<{tx}m<{tq}deg,{},", f(self.accuracy())).unwrap();
        Ok(out)
    }
}

pub fn evaluate(model: &Regressor, samples: &[Sample], thresholds: (f64, f64)) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Domain("evaluation needs at least one sample".into()));
    }
    let errors = samples
        .iter()
        .map(|s| {
            let out = model.forward(&s.observation)?;
            Ok(SampleError {
                id: s.id.clone(),
                position_m: (out.prediction.position - s.pose.position).norm(),
                orientation_deg: angular_error_deg(&s.pose.orientation, &out.quaternion_unit),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_errors(errors, thresholds)
}

/// Mean over samples of the mean per-point reprojection residual, using the
/// ground-truth visible points. Points behind either camera are dropped but
/// no image-bound exclusion is applied. Samples with no usable point are
/// not counted; returns `None` if that leaves nothing.
pub fn mean_reprojection_error(
    model: &Regressor,
    samples: &[Sample],
    scene: &Scene,
    norm: &Norm,
) -> Result<Option<f64>> {
    let options = ReprojectionOptions {
        bounds: crate::loss::ImageBounds::symmetric(f64::INFINITY, f64::INFINITY),
        ..Default::default()
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for s in samples {
        if s.visible_points.is_empty() {
            continue;
        }
        let out = model.forward(&s.observation)?;
        let points = scene.points_at(&s.visible_points);
        let pred = PosePrediction::new(out.prediction.position, out.prediction.quaternion_raw);
        if let ReprojectionOutcome::Evaluated { loss, .. } =
            reprojection_loss(&s.pose, &pred, &scene.intrinsics, &points, norm, &options)?
        {
            total += loss.value;
            counted += 1;
        }
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// Reads back the per-sample rows written by [`MetricReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<SampleError>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim_end_matches('\r');
        if n == 1 {
            if line != CSV_HEADER {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected header {CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, p, o] = fields[..] else {
            return Err(Error::Parse {
                line: n,
                message: "expected three columns".into(),
            });
        };
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: n,
                message: format!("cannot parse {s:?}"),
            })
        };
        rows.push(SampleError {
            id: id.to_owned(),
            position_m: num(p)?,
            orientation_deg: num(o)?,
        });
    }
    Ok(rows)
}

pub fn emit_csv(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.to_csv()?).map_err(|e| Error::io(path, e))
}
