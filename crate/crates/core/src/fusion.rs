//! Projection of sound-source azimuths into the camera image.
//!
//! The camera pose in the microphone frame is a rigid transform `T`
//! (`p_mic = R p_cam + t`). Camera coordinates follow the usual pinhole
//! convention: x right, y down, z along the optical axis. Angles measured in
//! the camera's horizontal plane are positive to the right.
//!
//! A source direction becomes an image column; an angular region becomes a
//! full-height rectangle whose pixels are invalidated in the depth image and
//! whose keypoints are discarded.

use std::io::Read;
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Point3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::clustering::AngularRegion;
use crate::error::{Error, Result};
use crate::geometry::unit_direction;
use crate::image::DepthImage;

pub const DEFAULT_FOV_DEG: f64 = 90.0;
/// Step used when sampling a region's angular span.
const REGION_SAMPLE_DEG: f64 = 0.25;

/// Camera axes expressed in the microphone frame for the default mounting:
/// optical axis forward (+x), image right toward -y, image down toward -z.
pub fn nominal_rotation() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

#[derive(Debug, Clone, Deserialize)]
struct ExtrinsicDocument {
    /// Quaternion `[w, x, y, z]`.
    rotation: Option<[f64; 4]>,
    #[serde(default)]
    translation: [f64; 3],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDocument {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_fov")]
    fov_deg: f64,
    extrinsic: Option<ExtrinsicDocument>,
}

fn default_fov() -> f64 {
    DEFAULT_FOV_DEG
}

/// Pinhole intrinsics, image size, field of view and pose in the microphone frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pose: Isometry3<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        fov_deg: f64,
        pose: Isometry3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view must be in (0, 180), got {fov_deg}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        let r = pose.rotation.to_rotation_matrix();
        let m = r.matrix();
        if (m.transpose() * m - Matrix3::identity()).abs().max() > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("extrinsic rotation is not orthonormal".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            fov_deg,
            pose,
        })
    }

    /// Camera at the array origin in the nominal mounting.
    pub fn nominal(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let pose = Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_rotation_matrix(&nominal_rotation()),
        );
        Self::new(fx, fy, cx, cy, width, height, DEFAULT_FOV_DEG, pose).expect("nominal camera is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: CameraDocument = toml::from_str(text).map_err(|e| Error::Parse {
            what: "camera config",
            message: e.to_string(),
        })?;
        let (rotation, translation) = match doc.extrinsic {
            Some(e) => (e.rotation, e.translation),
            None => (None, [0.0; 3]),
        };
        let rotation = match rotation {
            Some([w, x, y, z]) => {
                let q = Quaternion::new(w, x, y, z);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "extrinsic quaternion must have unit norm, got {}",
                        q.norm()
                    )));
                }
                UnitQuaternion::from_quaternion(q)
            }
            None => UnitQuaternion::from_rotation_matrix(&nominal_rotation()),
        };
        let pose = Isometry3::from_parts(Translation3::from(Vector3::from(translation)), rotation);
        Self::new(doc.fx, doc.fy, doc.cx, doc.cy, doc.width, doc.height, doc.fov_deg, pose)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn pose(&self) -> &Isometry3<f64> {
        &self.pose
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.pose.rotation.to_rotation_matrix().matrix()
    }

    /// Camera centre in the microphone frame.
    pub fn translation(&self) -> Vector3<f64> {
        self.pose.translation.vector
    }

    /// Pinhole projection; `None` for points on or behind the image plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * p.x / p.z, self.cy + self.fy * p.y / p.z))
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Moves a pixel from this camera into a second view related by
    /// `transform`, using the depth `depth_m` at the pixel.
    pub fn warp_with_depth(&self, u: f64, v: f64, depth_m: f64, transform: &Isometry3<f64>) -> Result<(f64, f64)> {
        if !(depth_m > 0.0 && depth_m.is_finite()) {
            return Err(Error::InvalidDepth { u, v });
        }
        let p = transform * self.back_project(u, v, depth_m);
        self.project(&p).ok_or(Error::BehindCamera)
    }

    /// `π(T π⁻¹(x, D(x)))` with the depth read from `depth`.
    pub fn warp_pixel(&self, u: f64, v: f64, transform: &Isometry3<f64>, depth: &DepthImage) -> Result<(f64, f64)> {
        let d = depth.at(u, v).ok_or(Error::InvalidDepth { u, v })?;
        self.warp_with_depth(u, v, d as f64, transform)
    }

    /// A microphone-frame direction expressed in camera coordinates
    /// (translation is irrelevant for directions).
    pub fn direction_in_camera(&self, azimuth_deg: f64) -> Vector3<f64> {
        self.pose.rotation.inverse_transform_vector(&unit_direction(azimuth_deg))
    }

    /// Far-field angle of an array azimuth in the camera's horizontal plane.
    pub fn camera_angle_deg(&self, azimuth_deg: f64) -> f64 {
        let d = self.direction_in_camera(azimuth_deg);
        d.x.atan2(d.z).to_degrees()
    }

    fn border_column(&self, right: bool) -> f64 {
        if right {
            (self.width - 1) as f64
        } else {
            0.0
        }
    }

    /// Column of the ray at camera-frame angle `phi_cam_deg`, clamped to the
    /// image border outside the field of view.
    pub fn column_for_camera_angle(&self, phi_cam_deg: f64) -> ColumnProjection {
        if phi_cam_deg.abs() >= self.fov_deg / 2.0 {
            return ColumnProjection {
                column: self.border_column(phi_cam_deg > 0.0),
                clamped: true,
            };
        }
        let column = self.cx + self.fx * phi_cam_deg.to_radians().tan();
        let max = (self.width - 1) as f64;
        if column < 0.0 || column > max {
            ColumnProjection {
                column: column.clamp(0.0, max),
                clamped: true,
            }
        } else {
            ColumnProjection { column, clamped: false }
        }
    }

    /// Column of an array azimuth under the far-field assumption.
    pub fn azimuth_to_column(&self, azimuth_deg: f64) -> ColumnProjection {
        self.column_for_camera_angle(self.camera_angle_deg(azimuth_deg))
    }

    /// Exact column of a point source at `distance_m` along `azimuth_deg`
    /// from the array origin, accounting for the camera offset.
    pub fn source_column_exact(&self, azimuth_deg: f64, distance_m: f64) -> Option<f64> {
        let s = Point3::from(unit_direction(azimuth_deg) * distance_m);
        self.project(&self.pose.inverse_transform_point(&s)).map(|(u, _)| u)
    }

    /// Column of the same source found by first projecting into a virtual
    /// camera at the array origin (same orientation), reading the depth of
    /// the real camera at that pixel in place of the virtual camera's depth,
    /// and warping into the real camera.
    pub fn source_column_depth_substituted(&self, azimuth_deg: f64, depth: &DepthImage) -> Result<f64> {
        let dir = self.direction_in_camera(azimuth_deg);
        let (u, v) = self.project(&Point3::from(dir)).ok_or(Error::BehindCamera)?;
        let d = depth.at(u, v).ok_or(Error::InvalidDepth { u, v })?;
        // Virtual camera -> real camera: X_C = X_M - R^T t.
        let offset = -self.pose.rotation.inverse_transform_vector(&self.translation());
        let shift = Isometry3::translation(offset.x, offset.y, offset.z);
        self.warp_with_depth(u, v, d as f64, &shift).map(|(u, _)| u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnProjection {
    pub column: f64,
    pub clamped: bool,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rect {
    pub col_min: usize,
    pub col_max: usize,
    pub row_min: usize,
    pub row_max: usize,
}

impl Rect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.col_min as f64 && u <= self.col_max as f64 && v >= self.row_min as f64 && v <= self.row_max as f64
    }

    pub fn area(&self) -> usize {
        (self.col_max - self.col_min + 1) * (self.row_max - self.row_min + 1)
    }
}

/// A region's footprint in the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObstacleRect {
    #[serde(flatten)]
    pub region: AngularRegion,
    #[serde(flatten)]
    pub rect: Rect,
    /// The whole region is outside the field of view; `rect` is a
    /// zero-width line on the border and invalidates nothing.
    pub out_of_view: bool,
    /// At least one side was clamped to the image border.
    pub clamped: bool,
}

/// Maps an angular region onto a full-height column band.
pub fn region_to_rectangle(region: &AngularRegion, camera: &CameraModel) -> ObstacleRect {
    let (low, high) = (region.low_deg.min(region.high_deg), region.low_deg.max(region.high_deg));
    let samples = ((high - low) / REGION_SAMPLE_DEG).ceil().max(1.0) as usize;
    let half_fov = camera.fov_deg / 2.0;
    let mut min_col = f64::INFINITY;
    let mut max_col = f64::NEG_INFINITY;
    let (mut out_left, mut out_right) = (false, false);
    for i in 0..=samples {
        let az = low + (high - low) * i as f64 / samples as f64;
        let dir = camera.direction_in_camera(az);
        let phi = dir.x.atan2(dir.z).to_degrees();
        if phi.abs() >= half_fov {
            if phi > 0.0 {
                out_right = true;
            } else {
                out_left = true;
            }
            continue;
        }
        let c = camera.cx + camera.fx * phi.to_radians().tan();
        min_col = min_col.min(c);
        max_col = max_col.max(c);
    }
    let last = (camera.width - 1) as f64;
    let rows = (0, camera.height - 1);
    if min_col > max_col {
        let right = camera.camera_angle_deg(region.center_deg) > 0.0;
        let col = camera.border_column(right) as usize;
        return ObstacleRect {
            region: *region,
            rect: Rect {
                col_min: col,
                col_max: col,
                row_min: rows.0,
                row_max: rows.1,
            },
            out_of_view: true,
            clamped: true,
        };
    }
    if out_left {
        min_col = 0.0;
    }
    if out_right {
        max_col = last;
    }
    let clamped = out_left || out_right || min_col < 0.0 || max_col > last;
    ObstacleRect {
        region: *region,
        rect: Rect {
            col_min: min_col.floor().clamp(0.0, last) as usize,
            col_max: max_col.ceil().clamp(0.0, last) as usize,
            row_min: rows.0,
            row_max: rows.1,
        },
        out_of_view: false,
        clamped,
    }
}

/// Invalid-pixel map for one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleMask {
    pub frame: usize,
    width: usize,
    height: usize,
    rects: Vec<ObstacleRect>,
    valid: Vec<bool>,
}

impl ObstacleMask {
    pub fn new(frame: usize, width: usize, height: usize, rects: Vec<ObstacleRect>) -> Self {
        let mut valid = vec![true; width * height];
        for r in rects.iter().filter(|r| !r.out_of_view) {
            let rr = r.rect;
            for row in rr.row_min..=rr.row_max.min(height.saturating_sub(1)) {
                let base = row * width;
                valid[base + rr.col_min..=base + rr.col_max.min(width - 1)].fill(false);
            }
        }
        Self {
            frame,
            width,
            height,
            rects,
            valid,
        }
    }

    pub fn empty(frame: usize, width: usize, height: usize) -> Self {
        Self::new(frame, width, height, Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rects(&self) -> &[ObstacleRect] {
        &self.rects
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// 8-bit mask image: 255 usable, 0 invalidated.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }

    /// True if the sub-pixel position falls in any in-view rectangle.
    pub fn blocks(&self, u: f64, v: f64) -> bool {
        self.rects.iter().any(|r| !r.out_of_view && r.rect.contains(u, v))
    }
}

pub fn invalidate_depth(depth: &DepthImage, mask: &ObstacleMask) -> Result<DepthImage> {
    if (depth.width(), depth.height()) != (mask.width(), mask.height()) {
        return Err(Error::DimensionMismatch {
            expected: (mask.width(), mask.height()),
            found: (depth.width(), depth.height()),
        });
    }
    let mut out = depth.clone();
    for (d, &ok) in out.data_mut().iter_mut().zip(mask.validity()) {
        if !ok {
            *d = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub score: Option<f64>,
}

/// Splits keypoints into (kept, rejected), preserving order.
pub fn partition_features(keypoints: &[Keypoint], mask: &ObstacleMask) -> (Vec<Keypoint>, Vec<Keypoint>) {
    keypoints.iter().partition(|k| !mask.blocks(k.u, k.v))
}

pub fn filter_features(keypoints: &[Keypoint], mask: &ObstacleMask) -> Vec<Keypoint> {
    partition_features(keypoints, mask).0
}

/// Reads `u,v[,score]` rows; a non-numeric first row is treated as a header.
pub fn read_keypoints_csv<R: Read>(source: R) -> Result<Vec<Keypoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parse = |j: usize| rec.get(j).map(|s| s.parse::<f64>());
        match (parse(0), parse(1)) {
            (Some(Ok(u)), Some(Ok(v))) => {
                let score = match parse(2) {
                    Some(Ok(s)) => Some(s),
                    Some(Err(_)) => {
                        return Err(Error::Parse {
                            what: "keypoints",
                            message: format!("row {}: bad score", i + 1),
                        })
                    }
                    None => None,
                };
                out.push(Keypoint { u, v, score });
            }
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    what: "keypoints",
                    message: format!("row {}: expected u,v[,score]", i + 1),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<Keypoint>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_keypoints_csv(file)
}
