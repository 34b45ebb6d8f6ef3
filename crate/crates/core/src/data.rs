//! Pose-label files.
//!
//! One record per line, whitespace separated:
//!
//! ```text
//! # id x y z qw qx qy qz
//! img0.png 0 0 0 1 0 0 0
//! ```
//!
//! Blank lines and lines starting with `#` are ignored, except for two
//! directives written by [`save_pose_file`]:
//!
//! ```text
//! # frame-offset <x> <y> <z>
//! # scene <reference>
//! ```
//!
//! Numbers are parsed with Rust's locale-independent float parser; both LF
//! and CRLF line endings are accepted. Quaternions must have norm in
//! `[0.5, 2]`; they are normalised and moved to the canonical hemisphere.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{Pose, Quaternion};
use crate::scene::{mean_camera_center, visible_subset, Sample, Scene};

pub const HEADER: &str = "# id x y z qw qx qy qz";
const OFFSET_DIRECTIVE: &str = "# frame-offset ";
const SCENE_DIRECTIVE: &str = "# scene ";

/// Accepted range of raw quaternion norms.
pub const QUATERNION_NORM_RANGE: (f64, f64) = (0.5, 2.0);

/// Quaternions this close to unit length are kept as written.
const UNIT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub position: Vector3<f64>,
    pub quaternion: Quaternion,
}

impl PoseRecord {
    pub fn pose(&self) -> Pose {
        Pose {
            position: self.position,
            orientation: self.quaternion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<PoseRecord>,
    /// Reference to the scene file the labels belong to, if any.
    pub scene: Option<String>,
    pub frame_offset: Option<Vector3<f64>>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            records: samples
                .iter()
                .map(|s| PoseRecord {
                    id: s.id.clone(),
                    position: s.pose.position,
                    quaternion: s.pose.orientation,
                })
                .collect(),
            scene: None,
            frame_offset: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn data_err(line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        line,
        message: message.into(),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_reals(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line, format!("cannot parse {f:?} as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(data_err(line, format!("non-finite value {f:?}")))
            }
        })
        .collect()
}

fn label_quaternion(q: Quaternion, line: usize) -> Result<Quaternion> {
    let n = q.norm();
    let (lo, hi) = QUATERNION_NORM_RANGE;
    if !(lo..=hi).contains(&n) {
        return Err(data_err(
            line,
            format!("quaternion norm {n} outside [{lo}, {hi}]"),
        ));
    }
    let unit = if (n - 1.0).abs() <= UNIT_SLACK { q } else { q.normalize()? };
    unit.canonicalize()
}

pub fn parse_pose_text(text: &str) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix(OFFSET_DIRECTIVE) {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(n, "frame-offset needs three values"));
            }
            let v = parse_reals(&fields, n)?;
            if dataset.frame_offset.replace(Vector3::new(v[0], v[1], v[2])).is_some() {
                return Err(data_err(n, "frame offset recorded twice"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix(SCENE_DIRECTIVE) {
            dataset.scene = Some(rest.trim().to_owned());
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                n,
                format!("expected 8 fields `id x y z qw qx qy qz`, found {}", fields.len()),
            ));
        }
        let v = parse_reals(&fields[1..], n)?;
        let id = fields[0].to_owned();
        if !seen.insert(id.clone()) {
            return Err(data_err(n, format!("duplicate id {id:?}")));
        }
        dataset.records.push(PoseRecord {
            id,
            position: Vector3::new(v[0], v[1], v[2]),
            quaternion: label_quaternion(Quaternion::new(v[3], v[4], v[5], v[6]), n)?,
        });
    }
    Ok(dataset)
}

pub fn load_pose_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_text(&text)
}

pub fn format_pose_text(dataset: &Dataset) -> Result<String> {
    let f = |v: f64| format!("{v:.16e}");
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    if let Some(o) = &dataset.frame_offset {
        writeln!(out, "{OFFSET_DIRECTIVE}{} {} {}", f(o.x), f(o.y), f(o.z)).unwrap();
    }
    if let Some(scene) = &dataset.scene {
        if scene.contains(['\n', '\r']) {
            return Err(Error::Domain("scene reference must be a single line".into()));
        }
        writeln!(out, "{SCENE_DIRECTIVE}{scene}").unwrap();
    }
    for r in &dataset.records {
        if r.id.is_empty() || r.id.starts_with('#') || r.id.contains(char::is_whitespace) {
            return Err(Error::Domain(format!(
                "id {:?} cannot be written: it must be nonempty, free of whitespace and not start with '#'",
                r.id
            )));
        }
        let q = &r.quaternion;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            r.id,
            f(r.position.x),
            f(r.position.y),
            f(r.position.z),
            f(q.w),
            f(q.x),
            f(q.y),
            f(q.z)
        )
        .unwrap();
    }
    Ok(out)
}

pub fn save_pose_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_pose_text(dataset)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Moves the origin to the mean camera centre of the records, with the same
/// semantics as [`crate::scene::center_frame`]. Fails if the dataset is
/// empty or already carries an offset.
pub fn apply_frame_centering(dataset: &Dataset) -> Result<Dataset> {
    if dataset.frame_offset.is_some() {
        return Err(Error::Domain("dataset is already centred".into()));
    }
    let poses: Vec<Pose> = dataset.records.iter().map(PoseRecord::pose).collect();
    let offset = mean_camera_center(&poses)?;
    let records = dataset
        .records
        .iter()
        .zip(&poses)
        .map(|(r, p)| PoseRecord {
            position: p.with_world_origin(&offset).position,
            ..r.clone()
        })
        .collect();
    Ok(Dataset {
        records,
        scene: dataset.scene.clone(),
        frame_offset: Some(offset),
    })
}

/// Rebuilds observations and visible point sets for labels expressed in
/// `scene`'s frame. Path parameters are unknown and set to NaN.
pub fn to_samples(dataset: &Dataset, scene: &Scene) -> Result<Vec<Sample>> {
    if let Some(offset) = dataset.frame_offset {
        if (offset - scene.origin).norm() > 1e-9 * (1.0 + scene.origin.norm()) {
            return Err(Error::Data {
                line: 0,
                message: format!(
                    "label frame offset {:?} does not match the scene origin {:?}",
                    offset.as_slice(),
                    scene.origin.as_slice()
                ),
            });
        }
    }
    Ok(dataset
        .records
        .iter()
        .map(|r| {
            let pose = r.pose();
            Sample {
                id: r.id.clone(),
                observation: scene.observation(&pose),
                visible_points: visible_subset(scene, &pose),
                pose,
                path_parameter: f64::NAN,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_line() {
        let d = parse_pose_text("img0.png 0 0 0 1 0 0 0\n").unwrap();
        assert_eq!(d.records.len(), 1);
        let r = &d.records[0];
        assert_eq!(r.id, "img0.png");
        assert_eq!(r.position, Vector3::zeros());
        assert_eq!(r.quaternion, Quaternion::identity());
    }

    #[test]
    fn negative_hemisphere_is_flipped() {
        let d = parse_pose_text("a 1 2 3 -1 0 0 0").unwrap();
        assert_eq!(d.records[0].quaternion, Quaternion::identity());
        let d = parse_pose_text("a 1 2 3 0 -0.6 0.8 0").unwrap();
        assert_eq!(d.records[0].quaternion, Quaternion::new(0.0, 0.6, -0.8, 0.0));
    }

    #[test]
    fn comments_blank_lines_and_crlf() {
        let text = "# header\r\n\r\n  \r\na 1 2 3 2 0 0 0\r\n# trailing\r\nb 0 0 0 0 0 0 1.5\r\n";
        let d = parse_pose_text(text).unwrap();
        assert_eq!(d.records.len(), 2);
        assert_eq!(d.records[0].quaternion, Quaternion::identity());
        assert_eq!(d.records[1].quaternion, Quaternion::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_pose_text("a 0 0 0 1 0 0 0\n\nb 0 0 0 1 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_pose_text("a 0 0 x 1 0 0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        // comma decimal separators are not accepted whatever the locale
        assert!(parse_pose_text("a 0 0 0,5 1 0 0 0").is_err());
    }

    #[test]
    fn quaternion_norm_guard() {
        assert!(matches!(
            parse_pose_text("a 0 0 0 0.1 0 0 0"),
            Err(Error::Data { line: 1, .. })
        ));
        assert!(matches!(
            parse_pose_text("# c\na 0 0 0 3 0 0 0"),
            Err(Error::Data { line: 2, .. })
        ));
        assert!(parse_pose_text("a 0 0 0 0.5 0 0 0").is_ok());
        assert!(parse_pose_text("a 0 0 0 inf 0 0 0").is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(matches!(
            parse_pose_text("a 0 0 0 1 0 0 0\na 1 1 1 1 0 0 0"),
            Err(Error::Data { line: 2, .. })
        ));
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let text = format_pose_text(&Dataset::default()).unwrap();
        assert_eq!(text, format!("{HEADER}\n"));
        assert_eq!(parse_pose_text(&text).unwrap(), Dataset::default());
    }

    #[test]
    fn save_load_is_a_fixed_point() {
        let text = "x/img_1.png 1.5 -2.25 1e3 0.3 -0.1 0.9 0.2\nimg2 0.1 0.2 0.3 -0.7 0.1 0.1 0.7\n";
        let d = parse_pose_text(text).unwrap();
        let once = format_pose_text(&d).unwrap();
        let reloaded = parse_pose_text(&once).unwrap();
        assert_eq!(reloaded, d);
        let twice = format_pose_text(&reloaded).unwrap();
        assert_eq!(once, twice);
        assert_eq!(reloaded.records[0].id, "x/img_1.png");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        save_pose_file(&d, &path).unwrap();
        assert_eq!(load_pose_file(&path).unwrap(), d);
    }

    #[test]
    fn unwritable_ids_are_refused() {
        let mut d = parse_pose_text("a 0 0 0 1 0 0 0").unwrap();
        d.records[0].id = "has space".into();
        assert!(format_pose_text(&d).is_err());
    }

    #[test]
    fn centering_examples() {
        let text = "a 1 0 0 1 0 0 0\nb 3 2 0 0.9 0.1 0.3 0.2\nc -1 4 2 0.5 0.5 0.5 0.5\n";
        let d = parse_pose_text(text).unwrap();
        let c = apply_frame_centering(&d).unwrap();
        let offset = c.frame_offset.unwrap();

        let centers: Vec<_> = c.records.iter().map(|r| r.pose().camera_center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / 3.0;
        assert!(mean.amax() <= 1e-12);

        // recompute the offset from the originals and undo the shift
        let expected = d.records.iter().map(|r| r.pose().camera_center()).sum::<Vector3<f64>>() / 3.0;
        assert!((offset - expected).amax() <= 1e-15);
        for (orig, cen) in d.records.iter().zip(&c.records) {
            let back = cen.pose().with_world_origin(&-offset);
            assert!((back.position - orig.position).amax() <= 1e-12);
        }

        assert!(apply_frame_centering(&c).is_err());
        assert!(apply_frame_centering(&Dataset::default()).is_err());

        let round = parse_pose_text(&format_pose_text(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    proptest! {
        #[test]
        fn load_save_round_trip(
            rows in prop::collection::vec(
                (prop::array::uniform3(-1e4f64..1e4), prop::array::uniform4(-1.0f64..1.0)),
                0..20,
            ),
            scene in prop::option::of("[a-z/._]{1,12}"),
        ) {
            let mut text = String::new();
            let mut count = 0;
            for (i, (x, q)) in rows.iter().enumerate() {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(0.5..=2.0).contains(&n) {
                    continue;
                }
                text.push_str(&format!("id{i} {} {} {} {} {} {} {}\n", x[0], x[1], x[2], q[0], q[1], q[2], q[3]));
                count += 1;
            }
            let mut d = parse_pose_text(&text).unwrap();
            d.scene = scene;
            prop_assert_eq!(d.records.len(), count);
            for r in &d.records {
                prop_assert!(r.quaternion.is_canonical());
                prop_assert!(r.quaternion.is_unit());
            }
            let saved = format_pose_text(&d).unwrap();
            let back = parse_pose_text(&saved).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(format_pose_text(&back).unwrap(), saved);
        }
    }

    #[test]
    fn samples_rebuild_from_labels() {
        use crate::scene::{center_frame, generate_scene, SceneConfig, ScenePreset, Split};
        let mut cfg = SceneConfig::preset(ScenePreset::Room, 3);
        cfg.point_count = 100;
        cfg.anchor_count = 8;
        let scene = generate_scene(&cfg).unwrap();
        let train = scene.sample_poses(10, 4, Split::Train).unwrap();
        let frame = center_frame(&scene, &train, &[]).unwrap();
        let mut d = Dataset::from_samples(&frame.train);
        d.frame_offset = Some(frame.offset);
        let text = format_pose_text(&d).unwrap();
        let back = to_samples(&parse_pose_text(&text).unwrap(), &frame.scene).unwrap();
        for (a, b) in back.iter().zip(&frame.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.visible_points, b.visible_points);
            for (x, y) in a.observation.iter().zip(&b.observation) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(matches!(to_samples(&d, &scene), Err(Error::Data { .. })));
    }
}
