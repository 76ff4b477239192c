//! Pose representation, the 2x2 pose matrix, and rotated-rectangle geometry.
//!
//! Coordinates are pixel-centered: (0, 0) is the center of the top-left
//! pixel, x grows right and y grows down. A positive angle rotates from +x
//! towards +y, i.e. the matrix `[[cos, -sin], [sin, cos]]` applied directly
//! to pixel coordinates. The same convention is used by the warp, the
//! heatmap labels and the IoU code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn normalize_angle(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Smallest absolute difference between two angles, in `[0, 180]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (normalize_angle(a) - normalize_angle(b)).abs();
    d.min(360.0 - d)
}

/// In-plane pose of a template inside a search image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub xc: f64,
    pub yc: f64,
    /// Degrees in `(-180, 180]`.
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
}

impl Pose {
    /// Builds a pose, normalizing the angle and validating the scales.
    pub fn new(xc: f64, yc: f64, theta: f64, sx: f64, sy: f64) -> Result<Self> {
        if !(sx.is_finite() && sy.is_finite() && sx > 0.0 && sy > 0.0) {
            return Err(Error::invalid(format!(
                "pose scales must be finite and positive, got ({sx}, {sy})"
            )));
        }
        if !(xc.is_finite() && yc.is_finite() && theta.is_finite()) {
            return Err(Error::invalid("pose has non-finite center or angle"));
        }
        Ok(Pose {
            xc,
            yc,
            theta: normalize_angle(theta),
            sx,
            sy,
        })
    }

    pub fn affine(&self) -> Affine2 {
        Affine2::from_pose(self.theta, self.sx, self.sy)
    }

    /// Footprint of a `tw x th` template placed with this pose.
    pub fn footprint(&self, tw: usize, th: usize) -> RotatedBox {
        RotatedBox {
            cx: self.xc,
            cy: self.yc,
            width: tw as f64 * self.sx,
            height: th as f64 * self.sy,
            theta: self.theta,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = normalize_angle(theta);
        self
    }

    pub fn with_center(mut self, xc: f64, yc: f64) -> Self {
        self.xc = xc;
        self.yc = yc;
        self
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
    };

    /// `[[sx cos t, -sy sin t], [sx sin t, sy cos t]]`: rotation after
    /// per-axis scaling.
    pub fn from_pose(theta_deg: f64, sx: f64, sy: f64) -> Self {
        let (s, c) = theta_deg.to_radians().sin_cos();
        Affine2 {
            a11: sx * c,
            a12: -sy * s,
            a21: sx * s,
            a22: sy * c,
        }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn invert(&self) -> Result<Affine2> {
        let d = self.det();
        if d.abs() <= 1e-12 || !d.is_finite() {
            return Err(Error::Singular(d));
        }
        Ok(Affine2 {
            a11: self.a22 / d,
            a12: -self.a12 / d,
            a21: -self.a21 / d,
            a22: self.a11 / d,
        })
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y, self.a21 * x + self.a22 * y)
    }

    pub fn mul(&self, o: &Affine2) -> Affine2 {
        Affine2 {
            a11: self.a11 * o.a11 + self.a12 * o.a21,
            a12: self.a11 * o.a12 + self.a12 * o.a22,
            a21: self.a21 * o.a11 + self.a22 * o.a21,
            a22: self.a21 * o.a12 + self.a22 * o.a22,
        }
    }

    pub fn transpose(&self) -> Affine2 {
        Affine2 {
            a11: self.a11,
            a12: self.a21,
            a21: self.a12,
            a22: self.a22,
        }
    }
}

/// Rectangle of size `width x height` rotated by `theta` about its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub theta: f64,
}

pub type Point = (f64, f64);

impl RotatedBox {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Corners with positive signed area (counter-clockwise in the pinned
    /// convention).
    pub fn corners(&self) -> [Point; 4] {
        let r = Affine2::from_pose(self.theta, 1.0, 1.0);
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(x, y)| {
            let (dx, dy) = r.apply(x, y);
            (self.cx + dx, self.cy + dy)
        })
    }

    /// Axis-aligned extent `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let c = self.corners();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in c {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Whether a point lies inside the (closed) rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let r = Affine2::from_pose(-self.theta, 1.0, 1.0);
        let (u, v) = r.apply(x - self.cx, y - self.cy);
        u.abs() <= self.width / 2.0 && v.abs() <= self.height / 2.0
    }
}

/// Shoelace signed area.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    // Segment p->q against infinite line a->b.
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman clipping of `subject` against convex counter-clockwise
/// `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection area of two rotated boxes.
pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let poly = clip_convex(&a.corners(), &b.corners());
    polygon_area(&poly).abs()
}

/// Exact IoU of two rotated rectangles via polygon clipping.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    // Quick reject on circumscribed circles.
    let ra = 0.5 * a.width.hypot(a.height);
    let rb = 0.5 * b.width.hypot(b.height);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    if inter < 1e-12 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
