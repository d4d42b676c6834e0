//! Angle arithmetic, pinhole projection, 3D box corners, BEV footprints and
//! rotated-rectangle IoU.
//!
//! Conventions (camera frame, shared by every module): x right, y down,
//! z forward. `theta` is the yaw about the vertical axis with `theta = 0`
//! meaning the box length axis is aligned with the camera x-axis (KITTI
//! `rotation_y`). `(x, y, z)` of a box is the center of its base face.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

use std::f64::consts::PI;

/// Area epsilon absorbing collinear-vertex degeneracy in polygon clipping.
const AREA_EPS: f64 = 1e-9;

/// The 8-component box: location, dimensions, yaw and observation angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
    pub alpha: f64,
}

impl Box3D {
    /// Builds a box with the observation angle derived from `theta` and the location.
    pub fn new(x: f64, y: f64, z: f64, h: f64, w: f64, l: f64, theta: f64) -> Box3D {
        let theta = wrap_angle(theta);
        Box3D {
            x,
            y,
            z,
            h,
            w,
            l,
            theta,
            alpha: alpha_from_theta(theta, x, z),
        }
    }

    pub fn bev_rect(&self) -> BevRect {
        BevRect {
            cx: self.x,
            cz: self.z,
            half_l: self.l / 2.0,
            half_w: self.w / 2.0,
            theta: self.theta,
        }
    }
}

/// Oriented rectangle on the xz road plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevRect {
    pub cx: f64,
    pub cz: f64,
    pub half_l: f64,
    pub half_w: f64,
    pub theta: f64,
}

impl BevRect {
    /// Corner points, counter-clockwise in (x, z).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        // Length axis direction is (cos theta, -sin theta) in (x, z).
        for (i, (u, v)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .into_iter()
            .enumerate()
        {
            let lx = u * self.half_l;
            let lz = v * self.half_w;
            out[i] = (self.cx + c * lx + s * lz, self.cz - s * lx + c * lz);
        }
        out
    }
}

/// Row-major 3x4 projection matrix plus the image extent it maps into.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub p: [[f64; 4]; 3],
    pub image_size: (u32, u32),
}

impl CameraCalib {
    pub fn pinhole(f: f64, cu: f64, cv: f64, width: u32, height: u32) -> CameraCalib {
        CameraCalib {
            p: [
                [f, 0.0, cu, 0.0],
                [0.0, f, cv, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            image_size: (width, height),
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox2D {
    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    assert!(a.is_finite(), "wrap_angle requires a finite angle");
    if (-PI..PI).contains(&a) {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut r = (a + PI).rem_euclid(two_pi) - PI;
    if r >= PI {
        r -= two_pi;
    }
    r
}

/// Wrapped angular distance `|a - b|` in `[0, pi]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Observation angle from yaw and BEV location (KITTI `alpha = theta - atan2(x, z)`).
pub fn alpha_from_theta(theta: f64, x: f64, z: f64) -> f64 {
    wrap_angle(theta - x.atan2(z))
}

/// Inverse of [`alpha_from_theta`].
pub fn theta_from_alpha(alpha: f64, x: f64, z: f64) -> f64 {
    wrap_angle(alpha + x.atan2(z))
}

/// Viewpoint angle for sprite selection under perspective: `theta + atan(x / z)`.
///
/// Two cars with equal yaw at different lateral offsets project differently;
/// the corrected angle is what the renderer actually sees.
pub fn corrected_render_orientation(theta: f64, x: f64, z: f64) -> Result<f64> {
    if z <= 0.0 {
        return Err(Error::Geometry(format!(
            "corrected_render_orientation requires z > 0, got z = {z}"
        )));
    }
    Ok(wrap_angle(theta + (x / z).atan()))
}

/// Projects a camera-frame point to pixels. Errors when the point is at or
/// behind the camera plane.
pub fn project_point(calib: &CameraCalib, point: (f64, f64, f64)) -> Result<(f64, f64)> {
    let (x, y, z) = point;
    let p = &calib.p;
    let w = p[2][0] * x + p[2][1] * y + p[2][2] * z + p[2][3];
    if w <= 0.0 {
        return Err(Error::Geometry(format!(
            "point ({x}, {y}, {z}) is behind the camera"
        )));
    }
    let u = (p[0][0] * x + p[0][1] * y + p[0][2] * z + p[0][3]) / w;
    let v = (p[1][0] * x + p[1][1] * y + p[1][2] * z + p[1][3]) / w;
    Ok((u, v))
}

/// Eight corners of the oriented cuboid. Base face at `y`, top at `y - h`;
/// footprint `l` along the heading, `w` across.
pub fn box_corners(b: &Box3D) -> [(f64, f64, f64); 8] {
    let bev = b.bev_rect().corners();
    let mut out = [(0.0, 0.0, 0.0); 8];
    for (i, &(x, z)) in bev.iter().enumerate() {
        out[i] = (x, b.y, z);
        out[i + 4] = (x, b.y - b.h, z);
    }
    out
}

/// Axis-aligned hull of the projected corners, intersected with the image.
///
/// Returns `Ok(None)` when the hull clips to empty (box outside the frustum),
/// which is distinct from the all-corners-behind-camera error.
pub fn project_box(calib: &CameraCalib, b: &Box3D) -> Result<Option<BBox2D>> {
    let corners = box_corners(b);
    let mut hull: Option<BBox2D> = None;
    for &c in &corners {
        if let Ok((u, v)) = project_point(calib, c) {
            let h = hull.get_or_insert(BBox2D {
                left: u,
                top: v,
                right: u,
                bottom: v,
            });
            h.left = h.left.min(u);
            h.top = h.top.min(v);
            h.right = h.right.max(u);
            h.bottom = h.bottom.max(v);
        }
    }
    let hull = hull.ok_or_else(|| Error::Geometry("box entirely behind camera".into()))?;
    let (iw, ih) = (calib.image_size.0 as f64, calib.image_size.1 as f64);
    let clipped = BBox2D {
        left: hull.left.max(0.0),
        top: hull.top.max(0.0),
        right: hull.right.min(iw),
        bottom: hull.bottom.min(ih),
    };
    if clipped.width() <= 0.0 || clipped.height() <= 0.0 {
        Ok(None)
    } else {
        Ok(Some(clipped))
    }
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, z0) = poly[i];
        let (x1, z1) = poly[(i + 1) % poly.len()];
        acc += x0 * z1 - x1 * z0;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against the half-plane left of
/// the directed edge `(a, b)` (polygons are counter-clockwise).
fn clip_edge(subject: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let intersect = |p: (f64, f64), q: (f64, f64)| {
        let d1 = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let d2 = (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
        let t = d1 / (d1 - d2);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        match (inside(cur), inside(prev)) {
            (true, true) => out.push(cur),
            (true, false) => {
                out.push(intersect(prev, cur));
                out.push(cur);
            }
            (false, true) => out.push(intersect(prev, cur)),
            (false, false) => {}
        }
    }
    out
}

/// Intersection area of two oriented rectangles via convex polygon clipping.
pub fn bev_intersection_area(a: &BevRect, b: &BevRect) -> f64 {
    let mut poly: Vec<(f64, f64)> = a.corners().to_vec();
    let clip = b.corners();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// IoU of two oriented rectangles on the road plane.
pub fn bev_iou(a: &BevRect, b: &BevRect) -> f64 {
    let inter = bev_intersection_area(a, b);
    let area_a = 4.0 * a.half_l * a.half_w;
    let area_b = 4.0 * b.half_l * b.half_w;
    let union = area_a + area_b - inter;
    if union <= AREA_EPS {
        return 0.0;
    }
    let inter = if inter <= AREA_EPS { 0.0 } else { inter };
    (inter / union).clamp(0.0, 1.0)
}
