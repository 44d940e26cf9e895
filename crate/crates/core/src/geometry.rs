//! 7-DoF box algebra: canonical-frame transforms, enlargement, containment,
//! rotated IoU in bird's-eye view and 3D, heading arithmetic.
//!
//! Conventions, fixed here and mirrored in the file formats:
//! * `l` is the extent along the box heading (the canonical x-axis), `w` the
//!   lateral extent (canonical y), `h` the vertical extent (canonical z).
//! * Headings are radians about +z, stored wrapped to `(-pi, pi]`.
//! * Boundary points count as inside (closed box), so point counts used for
//!   difficulty levels are deterministic.
//! * Everything is `f64`; IoU-threshold label assignment must be reproducible.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

#[allow(unused_imports)]
use num_traits::Float;

/// Intersection areas below this are treated as empty, which keeps
/// sliver polygons produced by clipping out of the IoU.
const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("non-finite value in field `{0}`")]
    NonFinite(&'static str),
    #[error("box dimension `{0}` must be strictly positive, got {1}")]
    NonPositiveDim(&'static str, PrintableF64),
    #[error("enlargement delta must be non-negative, got {0}")]
    NegativeEnlargement(PrintableF64),
}

/// `f64` wrapper so error enums can derive `Eq` while still printing values.
#[derive(Debug, Clone, Copy)]
pub struct PrintableF64(pub f64);

impl PartialEq for PrintableF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}
impl Eq for PrintableF64 {}
impl core::fmt::Display for PrintableF64 {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point in meters. Extra per-point channels (intensity and the like) are
/// carried on the owning [`PointCloud`], not here.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// An ordered list of points tagged with a frame id. Order carries no
/// meaning; consumers either pool, sort, or sample.
///
/// `extras` holds optional per-point channels beyond xyz. It is either empty
/// or has one row per point; rows ride along opaquely through transforms and
/// sampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub frame: u64,
    pub points: Vec<Point3>,
    pub extras: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn new(frame: u64, points: Vec<Point3>) -> Self {
        Self {
            frame,
            points,
            extras: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A 7-DoF oriented box: center `(x, y, z)`, size `(w, l, h)` and heading
/// `theta`. See the module docs for the axis convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    /// Validates finiteness and positive dimensions; wraps the heading into
    /// `(-pi, pi]`.
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        for (name, v) in [("x", x), ("y", y), ("z", z), ("w", w), ("l", l), ("h", h)] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(name));
            }
        }
        for (name, v) in [("w", w), ("l", l), ("h", h)] {
            if v <= 0.0 {
                return Err(GeometryError::NonPositiveDim(name, PrintableF64(v)));
            }
        }
        let theta = wrap_heading(theta)?;
        Ok(Self { x, y, z, w, l, h, theta })
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (sin, cos) = self.theta.sin_cos();
        let hl = self.l * 0.5;
        let hw = self.w * 0.5;
        let corner = |cx: f64, cy: f64| {
            [self.x + cos * cx - sin * cy, self.y + sin * cx + cos * cy]
        };
        [
            corner(hl, -hw),
            corner(hl, hw),
            corner(-hl, hw),
            corner(-hl, -hw),
        ]
    }
}

/// Wraps a finite angle into `(-pi, pi]`, preserving its value modulo 2*pi.
pub fn wrap_heading(theta: f64) -> Result<f64, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFinite("theta"));
    }
    Ok(wrap_angle(theta))
}

/// Total version of [`wrap_heading`] for values already known finite.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    if -PI < theta && theta <= PI {
        return theta;
    }
    let mut t = theta - TAU * (theta / TAU).floor();
    if t > PI {
        t -= TAU;
    } else if t <= -PI {
        // floor rounding can leave t an ulp below the open bound
        t += TAU;
    }
    t
}

/// Reduces an angle modulo `pi` into `[0, pi)`. Used by the heading
/// regression target.
pub(crate) fn mod_pi(theta: f64) -> f64 {
    let mut t = theta - PI * (theta / PI).floor();
    if t >= PI {
        t -= PI;
    } else if t < 0.0 {
        t += PI;
    }
    t
}

/// Transforms one point into the box's canonical frame: origin at the box
/// center, x along heading, z up.
pub fn to_canonical_point(b: &Box7, p: Point3) -> Point3 {
    let (sin, cos) = b.theta.sin_cos();
    let dx = p.x - b.x;
    let dy = p.y - b.y;
    Point3::new(cos * dx + sin * dy, -sin * dx + cos * dy, p.z - b.z)
}

/// Inverse of [`to_canonical_point`].
pub fn from_canonical_point(b: &Box7, p: Point3) -> Point3 {
    let (sin, cos) = b.theta.sin_cos();
    Point3::new(
        b.x + cos * p.x - sin * p.y,
        b.y + sin * p.x + cos * p.y,
        b.z + p.z,
    )
}

/// Transforms a cloud into the box's canonical frame. Extras ride along.
pub fn to_canonical(points: &PointCloud, b: &Box7) -> PointCloud {
    PointCloud {
        frame: points.frame,
        points: points.points.iter().map(|&p| to_canonical_point(b, p)).collect(),
        extras: points.extras.clone(),
    }
}

/// Transforms a canonical-frame cloud back to the global frame.
pub fn from_canonical(points: &PointCloud, b: &Box7) -> PointCloud {
    PointCloud {
        frame: points.frame,
        points: points.points.iter().map(|&p| from_canonical_point(b, p)).collect(),
        extras: points.extras.clone(),
    }
}

/// Grows width and length by the given absolute deltas; center, height and
/// heading are untouched. Height is deliberately never enlarged.
pub fn enlarge(b: &Box7, dw: f64, dl: f64) -> Result<Box7, GeometryError> {
    if !(dw.is_finite() && dl.is_finite()) {
        return Err(GeometryError::NonFinite("enlargement"));
    }
    if dw < 0.0 {
        return Err(GeometryError::NegativeEnlargement(PrintableF64(dw)));
    }
    if dl < 0.0 {
        return Err(GeometryError::NegativeEnlargement(PrintableF64(dl)));
    }
    Ok(Box7 {
        w: b.w + dw,
        l: b.l + dl,
        ..*b
    })
}

/// Closed-box containment: boundary points count as inside.
pub fn contains(b: &Box7, p: Point3) -> bool {
    let c = to_canonical_point(b, p);
    c.x.abs() <= b.l * 0.5 && c.y.abs() <= b.w * 0.5 && c.z.abs() <= b.h * 0.5
}

/// Signed area of a simple polygon (positive when counter-clockwise).
fn signed_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc * 0.5
}

/// Sutherland-Hodgman clip of `subject` against a convex counter-clockwise
/// `clip` polygon. On-edge points are kept.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let side = |p: [f64; 2]| ex * (p[1] - a[1]) - ey * (p[0] - a[0]);

        let input = core::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = side(cur) >= 0.0;
            let prev_in = side(prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(edge_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(edge_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn edge_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let rx = q[0] - p[0];
    let ry = q[1] - p[1];
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let denom = ex * ry - ey * rx;
    if denom == 0.0 {
        // collinear segment; either endpoint lies on the edge line
        return q;
    }
    let t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom;
    [p[0] + t * rx, p[1] + t * ry]
}

/// BEV intersection area of two boxes' rotated footprints.
pub(crate) fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    let inter = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = signed_area(&inter).abs();
    if area <= AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Footprint area via the same shoelace measure the clipper uses, so that
/// `iou(a, a)` is exactly 1 (the analytic `w*l` differs by rounding from the
/// area of the computed corner polygon).
fn corner_area(b: &Box7) -> f64 {
    signed_area(&b.bev_corners()).abs()
}

/// Rotated-rectangle IoU in the ground plane, in `[0, 1]`.
pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = corner_area(a) + corner_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn z_interval(b: &Box7) -> (f64, f64) {
    (b.z - b.h * 0.5, b.z + b.h * 0.5)
}

/// Volume IoU: BEV intersection area times the vertical interval overlap.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    let (a_lo, a_hi) = z_interval(a);
    let (b_lo, b_hi) = z_interval(b);
    let dz = a_hi.min(b_hi) - a_lo.max(b_lo);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    // measure each box's height from the same interval endpoints the
    // overlap uses, so self-IoU stays exactly 1
    let union = corner_area(a) * (a_hi - a_lo) + corner_area(b) * (b_hi - b_lo) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Box7 {
        Box7::new(x, y, z, w, l, h, theta).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng) -> Box7 {
        bx(
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.4..3.0),
            rng.gen_range(0.4..6.0),
            rng.gen_range(0.4..3.0),
            rng.gen_range(-PI..PI),
        )
    }

    #[test]
    fn wrap_heading_identity_and_periodicity() {
        assert_eq!(wrap_heading(0.0).unwrap(), 0.0);
        // 3*pi wraps onto the retained half-open bound +pi
        let w = wrap_heading(3.0 * PI).unwrap();
        assert!((w - PI).abs() < 1e-12, "got {w}");
        assert!(w <= PI);
        let w = wrap_heading(-3.0 * PI / 2.0).unwrap();
        assert!((w - PI / 2.0).abs() < 1e-12);
        assert!(wrap_heading(f64::NAN).is_err());
        assert!(wrap_heading(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_heading_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let t = rng.gen_range(-1e4..1e4);
            let w = wrap_heading(t).unwrap();
            assert!(-PI < w && w <= PI, "{t} wrapped to {w}");
            // equal modulo 2*pi (looser tolerance: large inputs lose ulps)
            let d = mod_diff(w, t);
            assert!(d < 1e-9, "{t} -> {w}, mod diff {d}");
        }
    }

    fn mod_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    #[test]
    fn box_validation() {
        assert!(Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).is_ok());
        assert!(Box7::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box7::new(0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0).is_err());
        assert!(Box7::new(f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).is_err());
        let b = Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.0 * PI).unwrap();
        assert!(-PI < b.theta && b.theta <= PI);
    }

    #[test]
    fn canonical_transform_examples() {
        let b = bx(10.0, 0.0, 0.0, 2.0, 4.0, 1.5, PI / 2.0);
        let p = to_canonical_point(&b, Point3::new(10.0, 1.0, 0.0));
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.z.abs() < 1e-12);

        // box center maps to the origin
        let c = to_canonical_point(&b, b.center());
        assert_eq!(c, Point3::new(0.0, 0.0, 0.0));

        // identity when theta = 0, box at origin
        let b0 = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let p0 = to_canonical_point(&b0, Point3::new(2.0, 3.0, 4.0));
        assert_eq!(p0, Point3::new(2.0, 3.0, 4.0));

        // inverse of the first example
        let q = from_canonical_point(&b, Point3::new(1.0, 0.0, 0.0));
        assert!((q.x - 10.0).abs() < 1e-12 && (q.y - 1.0).abs() < 1e-12);
        assert_eq!(from_canonical_point(&b, Point3::new(0.0, 0.0, 0.0)), b.center());
    }

    #[test]
    fn canonical_roundtrip_many() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let b = random_box(&mut rng);
            let p = Point3::new(
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-5.0..5.0),
            );
            let r = from_canonical_point(&b, to_canonical_point(&b, p));
            assert!((r.x - p.x).abs() <= 1e-9);
            assert!((r.y - p.y).abs() <= 1e-9);
            assert!((r.z - p.z).abs() <= 1e-9);
        }
    }

    #[test]
    fn cloud_roundtrip_carries_extras() {
        let b = bx(1.0, 2.0, 0.5, 2.0, 4.0, 1.5, 0.7);
        let cloud = PointCloud {
            frame: 3,
            points: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.5, 2.5, 1.0)],
            extras: vec![vec![0.9], vec![0.1]],
        };
        let back = from_canonical(&to_canonical(&cloud, &b), &b);
        assert_eq!(back.frame, 3);
        assert_eq!(back.extras, cloud.extras);
        for (a, c) in back.points.iter().zip(&cloud.points) {
            assert!((a.x - c.x).abs() <= 1e-9 && (a.y - c.y).abs() <= 1e-9 && (a.z - c.z).abs() <= 1e-9);
        }
    }

    #[test]
    fn enlarge_examples() {
        let b = bx(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.3);
        let e = enlarge(&b, 1.0, 1.0).unwrap();
        assert_eq!((e.w, e.l), (3.0, 5.0));
        assert_eq!((e.x, e.y, e.z, e.h, e.theta), (b.x, b.y, b.z, b.h, b.theta));

        let same = enlarge(&b, 0.0, 0.0).unwrap();
        assert_eq!(same, b);

        let b2 = bx(0.0, 0.0, 0.0, 1.8, 4.5, 1.5, 0.0);
        let e2 = enlarge(&b2, 0.5, 1.0).unwrap();
        assert!((e2.w - 2.3).abs() < 1e-12 && (e2.l - 5.5).abs() < 1e-12);

        assert!(enlarge(&b, -0.1, 0.0).is_err());
        assert!(enlarge(&b, 0.0, -1.0).is_err());
    }

    #[test]
    fn contains_examples() {
        let b = bx(1.0, 2.0, 3.0, 2.0, 4.0, 1.0, 0.4);
        assert!(contains(&b, b.center()));

        // exactly on the +x face: boundary inclusive
        let face = from_canonical_point(&b, Point3::new(b.l * 0.5, 0.0, 0.0));
        assert!(contains(&b, face));

        // unit box rotated 45 degrees: (0.9, 0, 0) leaves via the y-face
        let r = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        assert!(!contains(&r, Point3::new(0.9, 0.0, 0.0)));
        assert!(contains(&r, Point3::new(0.6, 0.0, 0.0)));
    }

    #[test]
    fn contains_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..2_000 {
            let b = random_box(&mut rng);
            let p = Point3::new(
                b.x + rng.gen_range(-4.0..4.0),
                b.y + rng.gen_range(-4.0..4.0),
                b.z + rng.gen_range(-2.0..2.0),
            );
            let yaw = rng.gen_range(-PI..PI);
            let t = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let (bt, pt) = rigid(&b, p, yaw, t);
            // avoid boundary flips within the stated epsilon
            let c = to_canonical_point(&b, p);
            let margin = (c.x.abs() - b.l * 0.5)
                .abs()
                .min((c.y.abs() - b.w * 0.5).abs())
                .min((c.z.abs() - b.h * 0.5).abs());
            if margin > 1e-9 {
                assert_eq!(contains(&b, p), contains(&bt, pt));
            }
        }
    }

    fn rigid(b: &Box7, p: Point3, yaw: f64, t: [f64; 2]) -> (Box7, Point3) {
        let (s, c) = yaw.sin_cos();
        let rot = |x: f64, y: f64| [c * x - s * y, s * x + c * y];
        let [bx_, by_] = rot(b.x, b.y);
        let nb = Box7::new(bx_ + t[0], by_ + t[1], b.z, b.w, b.l, b.h, b.theta + yaw).unwrap();
        let [px, py] = rot(p.x, p.y);
        (nb, Point3::new(px + t[0], py + t[1], p.z))
    }

    #[test]
    fn bev_iou_examples() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &a), 1.0);

        let b = bx(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);

        let far = bx(10.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &far), 0.0);
    }

    #[test]
    fn iou_3d_examples() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &a), 1.0);

        let b = bx(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);

        let above = bx(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &above), 0.0);
    }

    #[test]
    fn iou_symmetric_and_self_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let mut b = random_box(&mut rng);
            // keep pairs near each other so intersections actually occur
            b.x = a.x + rng.gen_range(-2.0..2.0);
            b.y = a.y + rng.gen_range(-2.0..2.0);
            b.z = a.z + rng.gen_range(-1.0..1.0);
            assert!((bev_iou(&a, &b) - bev_iou(&b, &a)).abs() <= 1e-12);
            assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() <= 1e-12);
            assert_eq!(bev_iou(&a, &a), 1.0);
            assert_eq!(iou_3d(&a, &a), 1.0);
            assert!((0.0..=1.0).contains(&bev_iou(&a, &b)));
            assert!((0.0..=1.0).contains(&iou_3d(&a, &b)));
        }
    }

    #[test]
    fn iou_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let mut b = random_box(&mut rng);
            b.x = a.x + rng.gen_range(-2.0..2.0);
            b.y = a.y + rng.gen_range(-2.0..2.0);
            let base = bev_iou(&a, &b);
            let yaw = rng.gen_range(-PI..PI);
            let t = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0)];
            let (at, _) = rigid(&a, Point3::default(), yaw, t);
            let (bt, _) = rigid(&b, Point3::default(), yaw, t);
            assert!(
                (bev_iou(&at, &bt) - base).abs() <= 1e-9,
                "iou changed under rigid motion: {} vs {}",
                bev_iou(&at, &bt),
                base
            );
        }
    }

    #[test]
    fn overlapping_rotated_boxes_against_half_area() {
        // two unit squares, one rotated 45 degrees: intersection is a
        // regular octagon of area 2*(sqrt(2)-1)
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        let inter = bev_intersection_area(&a, &b);
        let expect = 2.0 * (2.0_f64.sqrt() - 1.0);
        assert!((inter - expect).abs() < 1e-12, "{inter} vs {expect}");
    }
}

