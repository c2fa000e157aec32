//! Landmark geometry: similarity normalization, geometric features, neutral
//! calibration and weak-perspective head pose.
//!
//! Landmarks follow the iBUG 68-point layout. Indices below are zero-based
//! (iBUG point `n` is index `n - 1`).

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{HeadPoseSample, LandmarkFrame, LANDMARK_COUNT};

/// iBUG points 37–42.
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
/// iBUG points 43–48.
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;

/// Points used for pairwise-distance features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalientPoint {
    Landmark(usize),
    LeftEyeCenter,
    RightEyeCenter,
}

pub const SALIENT_POINTS: [SalientPoint; 12] = [
    SalientPoint::Landmark(17), // left brow outer
    SalientPoint::Landmark(21), // left brow inner
    SalientPoint::Landmark(22), // right brow inner
    SalientPoint::Landmark(26), // right brow outer
    SalientPoint::LeftEyeCenter,
    SalientPoint::RightEyeCenter,
    SalientPoint::Landmark(30), // nose tip
    SalientPoint::Landmark(48), // mouth corner
    SalientPoint::Landmark(54), // mouth corner
    SalientPoint::Landmark(51), // upper lip center
    SalientPoint::Landmark(57), // lower lip center
    SalientPoint::Landmark(8),  // chin
];

pub const PAIR_COUNT: usize = 66;
pub const FEATURE_LEN: usize = 2 * PAIR_COUNT;
pub const FEATURE_SPEC_VERSION: u32 = 1;
pub const MIN_CALIBRATION_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VisionError {
    #[error("frame has no face")]
    NoFace,
    #[error("expected {LANDMARK_COUNT} points, got {0}")]
    PointCount(usize),
    #[error("eye centers coincide; cannot normalize")]
    DegenerateEyes,
    #[error("neutral calibration needs at least {MIN_CALIBRATION_FRAMES} face frames, got {0}")]
    TooFewFrames(usize),
    #[error("landmark configuration is rank deficient")]
    RankDeficient,
    #[error("invalid reference face model: {0}")]
    InvalidModel(String),
}

/// Landmarks in the canonical frame: centroid at the origin, eye line along
/// +x, interocular distance 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CanonicalLandmarks(Vec<[f64; 2]>);

impl CanonicalLandmarks {
    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn eye_centers(&self) -> ([f64; 2], [f64; 2]) {
        eye_centers(&self.0)
    }

    pub fn max_abs_diff(&self, other: &CanonicalLandmarks) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }
}

fn mean_of(points: &[[f64; 2]], range: std::ops::Range<usize>) -> [f64; 2] {
    let n = range.len() as f64;
    let (sx, sy) = points[range]
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

fn eye_centers(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    (mean_of(points, LEFT_EYE), mean_of(points, RIGHT_EYE))
}

/// Similarity-normalizes a raw point set.
pub fn normalize_points(points: &[[f64; 2]]) -> Result<CanonicalLandmarks, VisionError> {
    if points.len() != LANDMARK_COUNT {
        return Err(VisionError::PointCount(points.len()));
    }
    let centroid = mean_of(points, 0..LANDMARK_COUNT);
    let (left, right) = eye_centers(points);
    let (dx, dy) = (right[0] - left[0], right[1] - left[1]);
    let iod = dx.hypot(dy);
    if iod.is_nan() || iod <= 1e-12 {
        return Err(VisionError::DegenerateEyes);
    }
    // rotate by -angle(eye line) and scale by 1/iod in one step
    let (c, s) = (dx / (iod * iod), dy / (iod * iod));
    let out = points
        .iter()
        .map(|p| {
            let (x, y) = (p[0] - centroid[0], p[1] - centroid[1]);
            [c * x + s * y, -s * x + c * y]
        })
        .collect();
    Ok(CanonicalLandmarks(out))
}

pub fn normalize_landmarks(frame: &LandmarkFrame) -> Result<CanonicalLandmarks, VisionError> {
    match (&frame.points, frame.face_present) {
        (Some(points), true) => normalize_points(points),
        _ => Err(VisionError::NoFace),
    }
}

/// 66 pairwise salient-point distances, then 66 deltas against a neutral
/// baseline (all zero without one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub calibrated: bool,
}

fn salient_coords(points: &[[f64; 2]]) -> [[f64; 2]; 12] {
    let (left, right) = eye_centers(points);
    SALIENT_POINTS.map(|p| match p {
        SalientPoint::Landmark(i) => points[i],
        SalientPoint::LeftEyeCenter => left,
        SalientPoint::RightEyeCenter => right,
    })
}

/// Pairwise distances in `(i, j), i < j` lexicographic order.
pub fn pairwise_distances(canon: &CanonicalLandmarks) -> [f64; PAIR_COUNT] {
    let pts = salient_coords(&canon.0);
    let mut out = [0.0; PAIR_COUNT];
    let mut k = 0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            out[k] = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
            k += 1;
        }
    }
    out
}

pub fn extract_features(canon: &CanonicalLandmarks, neutral_baseline: Option<&CanonicalLandmarks>) -> FeatureVector {
    let dist = pairwise_distances(canon);
    let mut values = Vec::with_capacity(FEATURE_LEN);
    values.extend_from_slice(&dist);
    match neutral_baseline {
        Some(base) => {
            let base = pairwise_distances(base);
            values.extend(dist.iter().zip(&base).map(|(d, b)| d - b));
        }
        None => values.extend(std::iter::repeat_n(0.0, PAIR_COUNT)),
    }
    FeatureVector {
        values,
        calibrated: neutral_baseline.is_some(),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-coordinate median of the normalized face frames, re-normalized.
pub fn calibrate_neutral(frames: &[LandmarkFrame]) -> Result<CanonicalLandmarks, VisionError> {
    let canon: Vec<CanonicalLandmarks> = frames
        .iter()
        .filter(|f| f.face_present)
        .map(normalize_landmarks)
        .collect::<Result<_, _>>()?;
    if canon.len() < MIN_CALIBRATION_FRAMES {
        return Err(VisionError::TooFewFrames(canon.len()));
    }
    let mut column = vec![0.0; canon.len()];
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..LANDMARK_COUNT {
        let mut p = [0.0; 2];
        for (axis, slot) in p.iter_mut().enumerate() {
            for (c, frame) in column.iter_mut().zip(&canon) {
                *c = frame.0[i][axis];
            }
            *slot = median(&mut column);
        }
        points.push(p);
    }
    normalize_points(&points)
}

/// Rigid neutral 3D face: x right, y up, z toward the camera, in interocular units.
#[derive(Debug, Clone)]
pub struct ReferenceFaceModel {
    version: u32,
    points: Vec<[f64; 3]>,
    centered: Vec<Vector3<f64>>,
    scatter_inv: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFaceModelFile {
    model_version: u32,
    #[serde(default)]
    units: Option<String>,
    #[serde(default)]
    axes: Option<String>,
    points: Vec<[f64; 3]>,
}

const BUILTIN_MODEL: &str = include_str!("../data/reference_face_model.json");

impl ReferenceFaceModel {
    pub fn new(version: u32, points: Vec<[f64; 3]>) -> Result<Self, VisionError> {
        if points.len() != LANDMARK_COUNT {
            return Err(VisionError::InvalidModel(format!(
                "{} points, expected {LANDMARK_COUNT}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VisionError::InvalidModel("non-finite coordinate".into()));
        }
        let n = points.len() as f64;
        let mean = points
            .iter()
            .fold(Vector3::zeros(), |acc: Vector3<f64>, p| acc + Vector3::from(*p))
            / n;
        let centered: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p) - mean).collect();
        let scatter = centered.iter().fold(Matrix3::zeros(), |acc, x| acc + x * x.transpose());
        let sv = scatter.singular_values();
        if sv.min() <= 1e-9 * sv.max() {
            return Err(VisionError::InvalidModel("points are coplanar".into()));
        }
        let scatter_inv = scatter
            .try_inverse()
            .ok_or_else(|| VisionError::InvalidModel("singular scatter matrix".into()))?;
        Ok(Self {
            version,
            points,
            centered,
            scatter_inv,
        })
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MODEL).expect("bundled reference model is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, VisionError> {
        let file: ReferenceFaceModelFile =
            serde_json::from_str(json).map_err(|e| VisionError::InvalidModel(e.to_string()))?;
        Self::new(file.model_version, file.points)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, VisionError> {
        let json = std::fs::read_to_string(path.as_ref())
            .map_err(|e| VisionError::InvalidModel(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&json)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Rotation `R = R_roll(z) · R_pitch(x) · R_yaw(y)` from angles in degrees.
pub fn rotation_from_euler(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let (sa, ca) = yaw_deg.to_radians().sin_cos();
    let (sb, cb) = pitch_deg.to_radians().sin_cos();
    let (sg, cg) = roll_deg.to_radians().sin_cos();
    let ry = Matrix3::new(ca, 0.0, sa, 0.0, 1.0, 0.0, -sa, 0.0, ca);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cb, -sb, 0.0, sb, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    rz * rx * ry
}

/// Inverse of [`rotation_from_euler`]; returns `(yaw, pitch, roll)` in degrees.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let pitch = r[(2, 1)].clamp(-1.0, 1.0).asin();
    let yaw = (-r[(2, 0)]).atan2(r[(2, 2)]);
    let roll = (-r[(0, 1)]).atan2(r[(1, 1)]);
    (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
}

/// Weak-perspective head pose from image landmarks (pixels, y down).
///
/// Fits the least-squares linear map from the centered model to the centered
/// image points, snaps it to the nearest scaled pair of orthonormal rows, and
/// completes the rotation with their cross product.
pub fn estimate_head_pose(frame: &LandmarkFrame, model: &ReferenceFaceModel) -> Result<HeadPoseSample, VisionError> {
    let points = match (&frame.points, frame.face_present) {
        (Some(p), true) => p,
        _ => return Err(VisionError::NoFace),
    };
    let rotation = fit_rotation(points, model)?;
    let (yaw, pitch, roll) = euler_from_rotation(&rotation);
    Ok(HeadPoseSample {
        timestamp: frame.timestamp,
        yaw: yaw.clamp(-90.0, 90.0),
        pitch: pitch.clamp(-90.0, 90.0),
        roll: roll.clamp(-90.0, 90.0),
    })
}

/// Rotation matrix of the weak-perspective fit.
pub fn fit_rotation(points: &[[f64; 2]], model: &ReferenceFaceModel) -> Result<Matrix3<f64>, VisionError> {
    if points.len() != LANDMARK_COUNT {
        return Err(VisionError::PointCount(points.len()));
    }
    let n = points.len() as f64;
    let (mu, mv) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mu, mv) = (mu / n, mv / n);
    let mut cross = Matrix2x3::<f64>::zeros();
    for (p, x) in points.iter().zip(&model.centered) {
        // flip the image y axis so that up is positive, matching the model
        let (u, v) = (p[0] - mu, -(p[1] - mv));
        for c in 0..3 {
            cross[(0, c)] += u * x[c];
            cross[(1, c)] += v * x[c];
        }
    }
    let map: Matrix2x3<f64> = cross * model.scatter_inv;
    let svd = map.svd(true, true);
    let (s0, s1) = (svd.singular_values[0], svd.singular_values[1]);
    let (hi, lo) = (s0.max(s1), s0.min(s1));
    if hi.is_nan() || hi <= 1e-12 || lo <= 1e-6 * hi {
        return Err(VisionError::RankDeficient);
    }
    let rows = svd.u.expect("requested") * svd.v_t.expect("requested");
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r3 = r1.cross(&r2);
    Ok(Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]))
}

/// Weak-perspective projection of 3D points into pixel coordinates (y down).
pub fn project(points: &[[f64; 3]], rotation: &Matrix3<f64>, scale: f64, center: [f64; 2]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| {
            let q = rotation * Vector3::from(*p);
            [center[0] + scale * q.x, center[1] - scale * q.y]
        })
        .collect()
}
