//! Oriented rectangles and the geometry the detector and evaluator need:
//! corner extraction, rotated IoU by convex clipping, greedy rotated NMS and
//! point membership.
//!
//! Boxes follow the long-edge-90 convention: `w >= h` and
//! `theta ∈ [-π/2, π/2)`. Construction normalizes any valid input into that
//! form, so two boxes describing the same rectangle compare equal.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersections smaller than this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct OrientedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl TryFrom<RawBox> for OrientedBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        OrientedBox::new(raw.cx, raw.cy, raw.w, raw.h, raw.theta)
    }
}

impl From<OrientedBox> for RawBox {
    fn from(b: OrientedBox) -> Self {
        RawBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            theta: b.theta,
        }
    }
}

/// Wraps an angle into `[-π/2, π/2)`.
pub fn wrap_half_pi(theta: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return theta;
    }
    let mut t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    t
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box parameters must be finite"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "box extents must be positive, got w={w} h={h}"
            )));
        }
        let (w, h, theta) = if h > w {
            (h, w, theta + FRAC_PI_2)
        } else {
            (w, h, theta)
        };
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: wrap_half_pi(theta),
        })
    }

    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, 0.0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn center(&self) -> Point {
        [self.cx, self.cy]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    /// Returns the same rectangle moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Rotates the box by `angle` about `pivot`.
    pub fn rotated_about(&self, pivot: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let dx = self.cx - pivot[0];
        let dy = self.cy - pivot[1];
        Self {
            cx: pivot[0] + c * dx - s * dy,
            cy: pivot[1] + s * dx + c * dy,
            w: self.w,
            h: self.h,
            theta: wrap_half_pi(self.theta + angle),
        }
    }

    /// Mirror image across the vertical line `x = axis`.
    pub fn mirrored_x(&self, axis: f64) -> Self {
        Self {
            cx: 2.0 * axis - self.cx,
            theta: wrap_half_pi(-self.theta),
            ..*self
        }
    }

    /// The four vertices, counter-clockwise in a y-up frame (positive shoelace
    /// area).
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(lx, ly)| {
            [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly]
        })
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.corners();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for [x, y] in pts {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }
}

/// Signed polygon area; positive for counter-clockwise vertex order.
pub fn shoelace_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    // Intersection of segment p→q with the infinite line a→b.
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clip of `subject` against the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().expect("non-empty");
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

/// Area of the intersection of two oriented rectangles.
pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d >= a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let poly = clip_convex(&a.corners(), &b.corners());
    let area = shoelace_area(&poly);
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy rotated non-maximum suppression.
///
/// Boxes are visited by descending score, lower index first on ties; a box is
/// kept when its IoU with every already-kept box is at most `iou_thr`. Returns
/// kept indices in visit order.
pub fn rotated_nms(boxes: &[OrientedBox], scores: &[f64], iou_thr: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::invalid(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::invalid(format!("nms: iou_thr {iou_thr} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| score_order(scores[i], scores[j]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[i], &boxes[k]) <= iou_thr)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Descending score order with NaN last.
pub(crate) fn score_order(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.partial_cmp(&a).expect("non-NaN"),
    }
}

/// True iff `p`, expressed in the box frame, lies within the half-extents
/// (boundary inclusive).
pub fn point_in_box(p: Point, b: &OrientedBox) -> bool {
    let (s, c) = b.theta.sin_cos();
    let dx = p[0] - b.cx;
    let dy = p[1] - b.cy;
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.w / 2.0 && ly.abs() <= b.h / 2.0
}
