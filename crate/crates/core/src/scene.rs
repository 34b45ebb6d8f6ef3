//! Synthetic scenes standing in for a structure-from-motion reconstruction.
//!
//! World axes follow the camera convention: `x` right, `y` down, `z` into the
//! scene. Points fill an axis-aligned volume around the origin; cameras walk
//! an elliptical arc on the `-z` side, looking at the volume centre with
//! bounded jitter. Train and test cameras come from interleaved, disjoint
//! stretches of that arc.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{project, CameraIntrinsics, Point3, Pose, Quaternion};
use crate::loss::{ImageBounds, MIN_POINT_DEPTH};

/// Minimum number of anchors that must be visible in every sample.
pub const MIN_VISIBLE_ANCHORS: usize = 4;

/// Rejection sampling gives up after this many draws per sample.
pub const MAX_SAMPLE_ATTEMPTS: usize = 1000;

/// Number of alternating train/test stretches along the camera arc.
const PATH_SEGMENTS: usize = 10;
const TRAIN_FRACTION: (f64, f64) = (0.0, 0.7);
const TEST_FRACTION: (f64, f64) = (0.75, 0.95);

const SCENE_MAGIC: &str = "posereg-scene v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    /// About 4 x 3 m, cameras within a few metres.
    Room,
    /// About 500 x 100 m, cameras 100-300 m from the centre.
    Street,
}

impl FromStr for ScenePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "room" => Ok(ScenePreset::Room),
            "street" => Ok(ScenePreset::Street),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn fraction(self) -> (f64, f64) {
        match self {
            Split::Train => TRAIN_FRACTION,
            Split::Test => TEST_FRACTION,
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Test => 0x7465_7374_0000_0002,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Elliptical camera arc `c(phi) = (a sin phi, h + h_amp sin 3phi, -b cos phi)`
/// for `phi` in `[-arc, arc]`, plus jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPath {
    pub semi_axis_x: f64,
    pub semi_axis_z: f64,
    pub height: f64,
    pub height_amplitude: f64,
    /// Half-angle of the arc in radians.
    pub arc_half_angle: f64,
    /// Half-width of the box the look-at target is drawn from (metres).
    pub look_jitter: f64,
    /// Half-width of the box added to the camera centre (metres).
    pub position_jitter: f64,
    /// Maximum extra rotation about a random axis (radians).
    pub rotation_jitter: f64,
}

impl CameraPath {
    fn nominal_center(&self, t: f64) -> Vector3<f64> {
        let phi = self.arc_half_angle * (2.0 * t - 1.0);
        Vector3::new(
            self.semi_axis_x * phi.sin(),
            self.height + self.height_amplitude * (3.0 * phi).sin(),
            -self.semi_axis_z * phi.cos(),
        )
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.semi_axis_x,
            self.semi_axis_z,
            self.height,
            self.height_amplitude,
            self.arc_half_angle,
            self.look_jitter,
            self.position_jitter,
            self.rotation_jitter,
        ];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("camera path parameters must be finite".into()));
        }
        if !(self.semi_axis_x > 0.0 && self.semi_axis_z > 0.0) {
            return Err(Error::Config("camera path semi-axes must be positive".into()));
        }
        if !(self.arc_half_angle > 0.0 && self.arc_half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config("arc half-angle must lie in (0, pi/2)".into()));
        }
        if self.look_jitter < 0.0 || self.position_jitter < 0.0 || self.rotation_jitter < 0.0 {
            return Err(Error::Config("jitter magnitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub point_count: usize,
    pub anchor_count: usize,
    pub volume_min: Vector3<f64>,
    pub volume_max: Vector3<f64>,
    pub path: CameraPath,
    pub intrinsics: CameraIntrinsics,
    pub bounds: ImageBounds,
    pub seed: u64,
}

impl SceneConfig {
    pub fn preset(preset: ScenePreset, seed: u64) -> Self {
        let (half, path) = match preset {
            ScenePreset::Room => (
                Vector3::new(2.0, 1.0, 1.5),
                CameraPath {
                    semi_axis_x: 2.5,
                    semi_axis_z: 3.0,
                    height: 0.0,
                    height_amplitude: 0.2,
                    arc_half_angle: 50f64.to_radians(),
                    look_jitter: 0.3,
                    position_jitter: 0.15,
                    rotation_jitter: 5f64.to_radians(),
                },
            ),
            ScenePreset::Street => (
                Vector3::new(250.0, 10.0, 50.0),
                CameraPath {
                    semi_axis_x: 300.0,
                    semi_axis_z: 160.0,
                    height: 0.0,
                    height_amplitude: 2.0,
                    arc_half_angle: 55f64.to_radians(),
                    look_jitter: 15.0,
                    position_jitter: 5.0,
                    rotation_jitter: 5f64.to_radians(),
                },
            ),
        };
        Self {
            point_count: 1000,
            anchor_count: 32,
            volume_min: -half,
            volume_max: half,
            path,
            intrinsics: CameraIntrinsics::identity(),
            bounds: ImageBounds::default(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.anchor_count < MIN_VISIBLE_ANCHORS {
            return Err(Error::Config(format!(
                "need at least {MIN_VISIBLE_ANCHORS} anchors, got {}",
                self.anchor_count
            )));
        }
        if self.point_count < self.anchor_count {
            return Err(Error::Config(format!(
                "point count {} is smaller than anchor count {}",
                self.point_count, self.anchor_count
            )));
        }
        let finite = self.volume_min.iter().chain(self.volume_max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|i| self.volume_min[i] >= self.volume_max[i]) {
            return Err(Error::Config("point volume must be a nonempty finite box".into()));
        }
        self.path.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3<f64>>,
    /// Indices of the points used to build observations.
    pub anchors: Vec<usize>,
    pub intrinsics: CameraIntrinsics,
    pub bounds: ImageBounds,
    pub volume_min: Vector3<f64>,
    pub volume_max: Vector3<f64>,
    /// Bounding box of the nominal camera path.
    pub extent_min: Vector3<f64>,
    pub extent_max: Vector3<f64>,
    pub path: CameraPath,
    /// World position, in generation coordinates, of the current origin.
    pub origin: Vector3<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pose: Pose,
    /// `(u, v, 1)` per visible anchor, `(0, 0, 0)` otherwise.
    pub observation: Vec<f64>,
    /// Indices of every scene point visible under `pose`.
    pub visible_points: Vec<usize>,
    /// Position along the camera arc, in `[0, 1)`.
    pub path_parameter: f64,
}

fn uniform_in_box(rng: &mut impl Rng, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| rng.random_range(lo[i]..hi[i]))
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let points = (0..config.point_count)
        .map(|_| Point3::from(uniform_in_box(&mut rng, &config.volume_min, &config.volume_max)))
        .collect();

    let mut extent_min = Vector3::repeat(f64::INFINITY);
    let mut extent_max = Vector3::repeat(f64::NEG_INFINITY);
    for i in 0..=256 {
        let c = config.path.nominal_center(i as f64 / 256.0);
        extent_min = extent_min.inf(&c);
        extent_max = extent_max.sup(&c);
    }
    let pad = Vector3::repeat(config.path.position_jitter);
    Ok(Scene {
        points,
        anchors: (0..config.anchor_count).collect(),
        intrinsics: config.intrinsics,
        bounds: config.bounds,
        volume_min: config.volume_min,
        volume_max: config.volume_max,
        extent_min: extent_min - pad,
        extent_max: extent_max + pad,
        path: config.path,
        origin: Vector3::zeros(),
        seed: config.seed,
    })
}

/// World-to-camera rotation looking from `center` towards `target`, with
/// image `y` pointing along world `+y` as far as possible.
fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let forward = (target - center)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Config("camera coincides with its look-at target".into()))?;
    let right = Vector3::y()
        .cross(&forward)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Config("camera looks straight along the vertical axis".into()))?;
    let down = forward.cross(&right);
    Ok(Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]))
}

impl Scene {
    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Length of an observation vector.
    pub fn observation_dim(&self) -> usize {
        3 * self.anchors.len()
    }

    pub fn points_at(&self, indices: &[usize]) -> Vec<Point3<f64>> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    fn is_visible(&self, pose: &Pose, g: &Point3<f64>) -> Option<(f64, f64)> {
        let (uv, depth) = project(pose, &self.intrinsics, g).ok()?;
        (depth > MIN_POINT_DEPTH && self.bounds.contains(uv.x, uv.y)).then_some((uv.x, uv.y))
    }

    pub fn observation(&self, pose: &Pose) -> Vec<f64> {
        let mut obs = vec![0.0; self.observation_dim()];
        for (slot, &a) in obs.chunks_exact_mut(3).zip(&self.anchors) {
            if let Some((u, v)) = self.is_visible(pose, &self.points[a]) {
                slot.copy_from_slice(&[u, v, 1.0]);
            }
        }
        obs
    }

    fn sample_at(&self, rng: &mut impl Rng, t: f64) -> Result<Pose> {
        let path = &self.path;
        let jitter = Vector3::repeat(path.position_jitter);
        let look = Vector3::repeat(path.look_jitter);
        let center = path.nominal_center(t) + uniform_in_box(rng, &-jitter, &jitter);
        let target = uniform_in_box(rng, &-look, &look);
        let base = look_at(&center, &target)?;
        let axis = loop {
            let a = uniform_in_box(rng, &Vector3::repeat(-1.0), &Vector3::repeat(1.0));
            if a.norm() > 0.1 {
                break a;
            }
        };
        let angle = rng.random_range(0.0..=path.rotation_jitter);
        let wiggle = Quaternion::from_axis_angle(&axis, angle)?.to_rotation_matrix()?;
        let pose = Pose::from_center(&(wiggle * base), &center)?;
        Ok(pose.with_world_origin(&self.origin))
    }

    /// Draws `count` samples from the split's stretches of the camera arc.
    pub fn sample_poses(&self, count: usize, seed: u64, split: Split) -> Result<Vec<Sample>> {
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
        let (lo, hi) = split.fraction();
        let width = 1.0 / PATH_SEGMENTS as f64;
        let mut samples = Vec::with_capacity(count);
        for n in 0..count {
            let mut accepted = None;
            for _ in 0..MAX_SAMPLE_ATTEMPTS {
                let segment = rng.random_range(0..PATH_SEGMENTS) as f64;
                let t = (segment + rng.random_range(lo..hi)) * width;
                let pose = self.sample_at(&mut rng, t)?;
                let observation = self.observation(&pose);
                let seen = observation.chunks_exact(3).filter(|s| s[2] == 1.0).count();
                if seen >= MIN_VISIBLE_ANCHORS {
                    accepted = Some((pose, observation, t));
                    break;
                }
            }
            let (pose, observation, t) = accepted.ok_or_else(|| {
                Error::Config(format!(
                    "could not find a pose with {MIN_VISIBLE_ANCHORS} visible anchors \
                     after {MAX_SAMPLE_ATTEMPTS} attempts"
                ))
            })?;
            samples.push(Sample {
                id: format!("{}-{n:05}", split.name()),
                visible_points: visible_subset(self, &pose),
                pose,
                observation,
                path_parameter: t,
            });
        }
        Ok(samples)
    }

    /// Whether a path parameter falls inside the stretches reserved for `split`.
    pub fn in_split_region(t: f64, split: Split) -> bool {
        let (lo, hi) = split.fraction();
        let scaled = t * PATH_SEGMENTS as f64;
        let frac = scaled - scaled.floor();
        (0.0..1.0).contains(&t) && frac >= lo && frac < hi
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let k = self.intrinsics.matrix();
        let b = &self.bounds;
        let p = &self.path;
        let f = |v: f64| format!("{v:.16e}");
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", f(v.x), f(v.y), f(v.z));
        writeln!(out, "{SCENE_MAGIC}").unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(
            out,
            "intrinsics {} {} {} {} {}",
            f(k[(0, 0)]),
            f(k[(0, 1)]),
            f(k[(0, 2)]),
            f(k[(1, 1)]),
            f(k[(1, 2)])
        )
        .unwrap();
        writeln!(out, "bounds {} {} {} {}", f(b.u_min), f(b.u_max), f(b.v_min), f(b.v_max)).unwrap();
        writeln!(out, "volume {} {}", v3(&self.volume_min), v3(&self.volume_max)).unwrap();
        writeln!(out, "extent {} {}", v3(&self.extent_min), v3(&self.extent_max)).unwrap();
        writeln!(out, "origin {}", v3(&self.origin)).unwrap();
        writeln!(
            out,
            "path {} {} {} {} {} {} {} {}",
            f(p.semi_axis_x),
            f(p.semi_axis_z),
            f(p.height),
            f(p.height_amplitude),
            f(p.arc_half_angle),
            f(p.look_jitter),
            f(p.position_jitter),
            f(p.rotation_jitter)
        )
        .unwrap();
        writeln!(out, "points {}", self.points.len()).unwrap();
        for (i, g) in self.points.iter().enumerate() {
            writeln!(out, "{i} {}", v3(&g.coords)).unwrap();
        }
        let anchors: Vec<String> = self.anchors.iter().map(|a| a.to_string()).collect();
        writeln!(out, "anchors {} {}", self.anchors.len(), anchors.join(" ")).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let mut lines = SceneLines::new(text);
        let (n, magic) = lines.next_line()?;
        if magic != SCENE_MAGIC {
            return Err(Error::Parse {
                line: n,
                message: format!("expected {SCENE_MAGIC:?}"),
            });
        }
        let seed = lines.keyed::<u64>("seed", 1)?[0];
        let k = lines.keyed::<f64>("intrinsics", 5)?;
        let b = lines.keyed::<f64>("bounds", 4)?;
        let vol = lines.keyed::<f64>("volume", 6)?;
        let ext = lines.keyed::<f64>("extent", 6)?;
        let origin = lines.keyed::<f64>("origin", 3)?;
        let p = lines.keyed::<f64>("path", 8)?;
        let count = lines.keyed::<usize>("points", 1)?[0];

        let intrinsics = CameraIntrinsics::new(k[0], k[3], k[2], k[4], k[1])?;
        let bounds = ImageBounds::new(b[0], b[1], b[2], b[3])?;
        let path = CameraPath {
            semi_axis_x: p[0],
            semi_axis_z: p[1],
            height: p[2],
            height_amplitude: p[3],
            arc_half_angle: p[4],
            look_jitter: p[5],
            position_jitter: p[6],
            rotation_jitter: p[7],
        };
        path.validate()?;

        let mut points = Vec::with_capacity(count);
        for i in 0..count {
            let (n, line) = lines.next_line()?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected `{i} x y z`"),
                });
            }
            let xyz = parse_fields::<f64>(&fields[1..], n)?;
            if !xyz.iter().all(|v| v.is_finite()) {
                return Err(Error::Data {
                    line: n,
                    message: "point coordinates must be finite".into(),
                });
            }
            points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }

        let (n, line) = lines.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"anchors") || fields.len() < 2 {
            return Err(Error::Parse {
                line: n,
                message: "expected `anchors m i...`".into(),
            });
        }
        let m: usize = parse_fields(&fields[1..2], n)?[0];
        let anchors: Vec<usize> = parse_fields(&fields[2..], n)?;
        if anchors.len() != m {
            return Err(Error::Parse {
                line: n,
                message: format!("anchor list has {} entries, header says {m}", anchors.len()),
            });
        }
        if m < MIN_VISIBLE_ANCHORS || anchors.iter().any(|&a| a >= points.len()) {
            return Err(Error::Data {
                line: n,
                message: "anchors must be at least 4 valid point indices".into(),
            });
        }
        Ok(Scene {
            points,
            anchors,
            intrinsics,
            bounds,
            volume_min: Vector3::new(vol[0], vol[1], vol[2]),
            volume_max: Vector3::new(vol[3], vol[4], vol[5]),
            extent_min: Vector3::new(ext[0], ext[1], ext[2]),
            extent_max: Vector3::new(ext[3], ext[4], ext[5]),
            path,
            origin: Vector3::new(origin[0], origin[1], origin[2]),
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scene::from_text(&text)
    }
}

fn parse_fields<T: FromStr>(fields: &[&str], line: usize) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|f| {
            f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse {f:?}"),
            })
        })
        .collect()
}

/// Line reader for the scene grammar: skips blank lines and `#` comments.
struct SceneLines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> SceneLines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Ok((i + 1, line));
            }
        }
        Err(Error::Parse {
            line: 0,
            message: "unexpected end of scene file".into(),
        })
    }

    fn keyed<T: FromStr>(&mut self, key: &str, count: usize) -> Result<Vec<T>> {
        let (n, line) = self.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&key) || fields.len() != count + 1 {
            return Err(Error::Parse {
                line: n,
                message: format!("expected `{key}` followed by {count} values"),
            });
        }
        parse_fields(&fields[1..], n)
    }
}

/// Indices of the points in front of the camera (depth above the minimum)
/// whose projection lies inside the image bounds.
pub fn visible_subset(scene: &Scene, pose: &Pose) -> Vec<usize> {
    scene
        .points
        .iter()
        .enumerate()
        .filter(|(_, g)| scene.is_visible(pose, g).is_some())
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredFrame {
    pub scene: Scene,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Mean training camera centre that became the new origin.
    pub offset: Vector3<f64>,
}

/// Mean camera centre of a set of poses.
pub fn mean_camera_center<'a>(poses: impl IntoIterator<Item = &'a Pose>) -> Result<Vector3<f64>> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in poses {
        sum += p.camera_center();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("cannot centre an empty set of poses".into()));
    }
    Ok(sum / n as f64)
}

/// Moves the world origin to the mean training camera centre. Scene points
/// and every camera (train and test) move together, so projections and
/// observations are unchanged.
pub fn center_frame(scene: &Scene, train: &[Sample], test: &[Sample]) -> Result<CenteredFrame> {
    let offset = mean_camera_center(train.iter().map(|s| &s.pose))?;
    let shift = |samples: &[Sample]| -> Vec<Sample> {
        samples
            .iter()
            .map(|s| Sample {
                pose: s.pose.with_world_origin(&offset),
                ..s.clone()
            })
            .collect()
    };
    let mut centered = scene.clone();
    for g in &mut centered.points {
        *g -= offset;
    }
    centered.volume_min -= offset;
    centered.volume_max -= offset;
    centered.extent_min -= offset;
    centered.extent_max -= offset;
    centered.origin += offset;
    Ok(CenteredFrame {
        scene: centered,
        train: shift(train),
        test: shift(test),
        offset,
    })
}

/// Undoes [`center_frame`] for a single pose.
pub fn uncenter_pose(pose: &Pose, offset: &Vector3<f64>) -> Pose {
    pose.with_world_origin(&-offset)
}
