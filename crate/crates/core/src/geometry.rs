//! Cameras on a viewing sphere around the origin, relative azimuth/elevation
//! offsets from the canonical input view, and pinhole ray generation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Objects are normalized into `[-SHAPE_BOUND, SHAPE_BOUND]³`.
pub const SHAPE_BOUND: f64 = 0.87;
pub const DEFAULT_RADIUS: f64 = 1.8;
pub const DEFAULT_FOV_DEG: f64 = 40.0;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Camera-to-world placement. Columns of `rotation` are the camera's right,
/// up and backward axes; the camera looks along its local −z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fov_deg: f64,
}

impl CameraPose {
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    fn axis(&self, k: usize) -> Vec3 {
        [self.rotation[0][k], self.rotation[1][k], self.rotation[2][k]]
    }

    pub fn focal_px(&self, resolution: usize) -> f64 {
        0.5 * resolution as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// World point → (column, row) in continuous pixel coordinates, or `None`
    /// when the point is behind the camera.
    pub fn project(&self, p: Vec3, resolution: usize) -> Option<(f64, f64)> {
        let d = sub(p, self.translation);
        let (x, y, z) = (dot(d, self.axis(0)), dot(d, self.axis(1)), dot(d, self.axis(2)));
        if z >= 0.0 {
            return None;
        }
        let f = self.focal_px(resolution);
        let c = 0.5 * resolution as f64;
        Some((c + f * x / -z, c - f * y / -z))
    }

    pub fn rotation_distance(&self, other: &CameraPose) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += (self.rotation[i][j] - other.rotation[i][j]).powi(2);
            }
        }
        s.sqrt()
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                if (d - if i == j { 1.0 } else { 0.0 }).abs() > tol {
                    return false;
                }
            }
        }
        let det = dot(self.axis(0), cross(self.axis(1), self.axis(2)));
        (det - 1.0).abs() <= tol
    }
}

/// Azimuth/elevation offset from the canonical viewpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl RelativePose {
    pub const IDENTITY: RelativePose = RelativePose { azimuth_deg: 0.0, elevation_deg: 0.0 };

    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&azimuth_deg) || !(-90.0..=90.0).contains(&elevation_deg) {
            return invalid(format!("relative pose out of range: ({azimuth_deg}, {elevation_deg})"));
        }
        Ok(RelativePose { azimuth_deg, elevation_deg })
    }

    pub fn inverse(self) -> RelativePose {
        invert_delta(self)
    }
}

pub fn invert_delta(delta: RelativePose) -> RelativePose {
    RelativePose { azimuth_deg: -delta.azimuth_deg, elevation_deg: -delta.elevation_deg }
}

fn check_camera(radius: f64, fov_deg: f64) -> Result<()> {
    if !(radius > 0.0) {
        return invalid(format!("camera radius must be positive, got {radius}"));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return invalid(format!("field of view must be in (0, 180), got {fov_deg}"));
    }
    Ok(())
}

pub fn canonical_pose(radius: f64, fov_deg: f64) -> Result<CameraPose> {
    check_camera(radius, fov_deg)?;
    Ok(CameraPose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0, 0.0, radius],
        fov_deg,
    })
}

/// Camera on the sphere of `radius` at the given offset from the canonical
/// view, looking at the origin with zero roll.
pub fn pose_from_azel(delta: RelativePose, radius: f64, fov_deg: f64) -> Result<CameraPose> {
    check_camera(radius, fov_deg)?;
    let RelativePose { azimuth_deg, elevation_deg } = RelativePose::new(delta.azimuth_deg, delta.elevation_deg)?;
    if azimuth_deg == 0.0 && elevation_deg == 0.0 {
        return canonical_pose(radius, fov_deg);
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let back = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
    // World +y is the up reference; straight above/below the origin it is
    // parallel to the view axis and ±z takes over.
    let up_ref = if elevation_deg >= 90.0 {
        [0.0, 0.0, -1.0]
    } else if elevation_deg <= -90.0 {
        [0.0, 0.0, 1.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let right = normalize(cross(up_ref, back));
    let up = cross(back, right);
    let rotation = [[right[0], up[0], back[0]], [right[1], up[1], back[1]], [right[2], up[2], back[2]]];
    Ok(CameraPose { rotation, translation: [radius * back[0], radius * back[1], radius * back[2]], fov_deg })
}

/// Fixed camera distance and field of view shared by every sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub radius: f64,
    pub fov_deg: f64,
}

impl Default for Rig {
    fn default() -> Self {
        Rig { radius: DEFAULT_RADIUS, fov_deg: DEFAULT_FOV_DEG }
    }
}

impl Rig {
    pub fn canonical(&self) -> CameraPose {
        canonical_pose(self.radius, self.fov_deg).expect("rig validated")
    }

    /// The canonical pose composed with a relative offset.
    pub fn compose_relative(&self, delta: RelativePose) -> Result<CameraPose> {
        pose_from_azel(delta, self.radius, self.fov_deg)
    }

    /// Ray interval bounding the normalized shape cube, clipped to positive.
    pub fn near_far(&self) -> (f64, f64) {
        let reach = 0.9 * 3f64.sqrt() * SHAPE_BOUND;
        ((self.radius - reach).max(1e-3), self.radius + reach)
    }

    pub fn validate(&self) -> Result<()> {
        check_camera(self.radius, self.fov_deg)
    }
}

pub fn compose_relative(delta: RelativePose) -> Result<CameraPose> {
    Rig::default().compose_relative(delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub resolution: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Pinhole rays through pixel centres, row-major from the top-left pixel.
pub fn camera_rays(pose: &CameraPose, resolution: usize, near: f64, far: f64) -> Result<RayBundle> {
    if resolution < 8 {
        return invalid(format!("resolution must be at least 8, got {resolution}"));
    }
    if !(near > 0.0 && near < far) {
        return invalid(format!("need 0 < near < far, got near={near} far={far}"));
    }
    let f = pose.focal_px(resolution);
    let c = 0.5 * resolution as f64;
    let (r, u, b) = (pose.axis(0), pose.axis(1), pose.axis(2));
    let mut directions = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let x = (col as f64 + 0.5 - c) / f;
            let y = -(row as f64 + 0.5 - c) / f;
            let d = [x * r[0] + y * u[0] - b[0], x * r[1] + y * u[1] - b[1], x * r[2] + y * u[2] - b[2]];
            directions.push(normalize(d));
        }
    }
    Ok(RayBundle { resolution, origins: vec![pose.translation; directions.len()], directions, near, far })
}
