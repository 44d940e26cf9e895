//! Desk-scale data: parametric scenes with surface-sampled boxes, proposal
//! corruption, and the enlargement ambiguity study.
//!
//! Object points lie on the sensor-facing faces only, the way a LiDAR sees
//! one side of everything, and per-object point budgets fall off with
//! distance. That one-sided sparsity is exactly what makes proposal size
//! ambiguous for point-pooled features.

use crate::geometry::{self, Box7, GeometryError, Point3, PointCloud};
use crate::trainer::{jitter_proposal, JitterParams, Proposal};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyntheticError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Size and count distribution for one object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub count_range: (usize, usize),
    /// Mean `(w, l, h)` in meters.
    pub size_mean: [f64; 3],
    pub size_sigma: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub classes: Vec<ClassSpec>,
    /// Placement rectangle `[xmin, xmax, ymin, ymax]`.
    pub area: [f64; 4],
    /// Sensor origin; z is the mount height.
    pub sensor: [f64; 3],
    /// Point budget an object receives at `ref_distance`.
    pub points_base: usize,
    pub ref_distance: f64,
    pub min_points: usize,
    /// Ground density in points per square meter, drawn per scene from this
    /// range; zero disables ground entirely.
    pub ground_density_range: (f64, f64),
    pub ground_noise: f64,
    pub occlusion_prob: f64,
    /// Fraction of the budget an occluded object keeps.
    pub occlusion_keep: (f64, f64),
    /// Extra face-to-face clearance enforced between placed boxes.
    pub placement_margin: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                // vehicle-like
                ClassSpec {
                    count_range: (2, 6),
                    size_mean: [1.9, 4.6, 1.7],
                    size_sigma: [0.15, 0.4, 0.12],
                },
                // pedestrian-like
                ClassSpec {
                    count_range: (2, 6),
                    size_mean: [0.8, 0.9, 1.7],
                    size_sigma: [0.08, 0.1, 0.12],
                },
            ],
            area: [-35.0, 35.0, 4.0, 60.0],
            sensor: [0.0, 0.0, 1.8],
            points_base: 256,
            ref_distance: 10.0,
            min_points: 5,
            ground_density_range: (0.0, 0.25),
            ground_noise: 0.02,
            occlusion_prob: 0.25,
            occlusion_keep: (0.15, 0.5),
            placement_margin: 1.2,
            max_retries: 40,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.classes.is_empty() {
            return Err(SyntheticError::InvalidConfig("at least one class required"));
        }
        for c in &self.classes {
            if c.size_mean.iter().any(|&v| !v.is_finite() || v <= 0.0)
                || c.size_sigma.iter().any(|&v| !v.is_finite() || v < 0.0)
            {
                return Err(SyntheticError::InvalidConfig("class sizes must be positive"));
            }
            if c.count_range.0 > c.count_range.1 {
                return Err(SyntheticError::InvalidConfig("count range inverted"));
            }
        }
        if self.area[0] >= self.area[1] || self.area[2] >= self.area[3] {
            return Err(SyntheticError::InvalidConfig("placement area is empty"));
        }
        if self.ground_density_range.0 > self.ground_density_range.1
            || self.ground_density_range.0 < 0.0
        {
            return Err(SyntheticError::InvalidConfig("ground density range invalid"));
        }
        if self.ref_distance <= 0.0 || self.points_base == 0 {
            return Err(SyntheticError::InvalidConfig("point budget invalid"));
        }
        Ok(())
    }
}

/// One frame: the cloud plus ground-truth boxes with 1-based class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame_id: u64,
    pub cloud: PointCloud,
    pub gts: Vec<(Box7, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SceneStats {
    pub requested: usize,
    pub placed: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn sample_size(spec: &ClassSpec, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ((o, &mean), &sigma) in out.iter_mut().zip(&spec.size_mean).zip(&spec.size_sigma) {
        let v = mean + sigma * normal(rng);
        *o = v.max(0.25 * mean);
    }
    out
}

fn bev_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Places non-overlapping boxes, scatters surface points on their
/// sensor-facing faces with a distance-decayed budget, and sprinkles ground.
/// Placement failures after bounded retries shrink the scene (see stats).
pub fn generate_scene(
    config: &SceneConfig,
    frame_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Scene, SceneStats), SyntheticError> {
    config.validate()?;
    let sensor_xy = [config.sensor[0], config.sensor[1]];

    // draw per-class counts first so the rng stream is stable
    let counts: Vec<usize> = config
        .classes
        .iter()
        .map(|c| rng.gen_range(c.count_range.0..=c.count_range.1))
        .collect();
    let requested: usize = counts.iter().sum();

    let mut gts: Vec<(Box7, usize)> = Vec::with_capacity(requested);
    for (class_idx, &count) in counts.iter().enumerate() {
        let spec = &config.classes[class_idx];
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..config.max_retries {
                let [w, l, h] = sample_size(spec, rng);
                let x = rng.gen_range(config.area[0]..config.area[1]);
                let y = rng.gen_range(config.area[2]..config.area[3]);
                let theta = rng.gen_range(-PI..PI);
                let candidate = Box7::new(x, y, h * 0.5, w, l, h, theta)?;
                let clear = gts.iter().all(|(other, _)| {
                    let margin = config.placement_margin;
                    let a = geometry::enlarge(&candidate, margin, margin).expect("margin >= 0");
                    let b = geometry::enlarge(other, margin, margin).expect("margin >= 0");
                    geometry::bev_iou(&a, &b) == 0.0
                });
                if clear {
                    gts.push((candidate, class_idx + 1));
                    placed = true;
                    break;
                }
            }
            if !placed {
                // fewer objects this scene; reported via stats
            }
        }
    }

    let mut points: Vec<Point3> = Vec::new();
    for (gt, _) in &gts {
        let d = bev_distance([gt.x, gt.y], sensor_xy).max(1.0);
        let falloff = (config.ref_distance / d).powi(2).min(1.0);
        let mut budget = ((config.points_base as f64) * falloff).round() as usize;
        if rng.gen_range(0.0..1.0) < config.occlusion_prob {
            let keep = rng.gen_range(config.occlusion_keep.0..=config.occlusion_keep.1);
            budget = ((budget as f64) * keep).round() as usize;
        }
        let budget = budget.clamp(config.min_points, config.points_base);
        sample_surface_points(gt, sensor_xy, budget, rng, &mut points);
    }

    // ground plane, thinned with the same distance falloff
    let density = if config.ground_density_range.1 > 0.0 {
        rng.gen_range(config.ground_density_range.0..=config.ground_density_range.1)
    } else {
        0.0
    };
    if density > 0.0 {
        let area =
            (config.area[1] - config.area[0]) * (config.area[3] - config.area[2]);
        let count = (density * area).round() as usize;
        for _ in 0..count {
            let x = rng.gen_range(config.area[0]..config.area[1]);
            let y = rng.gen_range(config.area[2]..config.area[3]);
            let d = bev_distance([x, y], sensor_xy).max(1.0);
            let keep = (config.ref_distance / d).powi(2).min(1.0);
            if rng.gen_range(0.0..1.0) >= keep {
                continue;
            }
            let z = config.ground_noise * normal(rng);
            let p = Point3::new(x, y, z);
            // the ground under an object is occluded
            let shadowed = gts.iter().any(|(gt, _)| bev_contains(gt, p));
            if !shadowed {
                points.push(p);
            }
        }
    }

    let placed = gts.len();
    Ok((
        Scene {
            frame_id,
            cloud: PointCloud::new(frame_id, points),
            gts,
        },
        SceneStats { requested, placed },
    ))
}

fn bev_contains(b: &Box7, p: Point3) -> bool {
    let c = geometry::to_canonical_point(b, p);
    c.x.abs() <= b.l * 0.5 && c.y.abs() <= b.w * 0.5
}

/// Uniformly samples `budget` points over the visible lateral faces plus the
/// top face, weighted by face area.
fn sample_surface_points(
    gt: &Box7,
    sensor_xy: [f64; 2],
    budget: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Point3>,
) {
    // canonical outward normals and extents of the four lateral faces
    struct Face {
        // canonical coordinates: fixed axis/value, spans (u, v)
        axis: usize,
        sign: f64,
        area: f64,
    }
    let mut faces: Vec<Face> = Vec::with_capacity(5);
    let (s, c) = gt.theta.sin_cos();
    for (axis, sign) in [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)] {
        // face center and outward normal in the global frame
        let (cx, cy, nx, ny) = if axis == 0 {
            (sign * gt.l * 0.5, 0.0, c * sign, s * sign)
        } else {
            (0.0, sign * gt.w * 0.5, -s * sign, c * sign)
        };
        let center = geometry::from_canonical_point(gt, Point3::new(cx, cy, 0.0));
        let to_sensor = [sensor_xy[0] - center.x, sensor_xy[1] - center.y];
        if to_sensor[0] * nx + to_sensor[1] * ny > 0.0 {
            let area = if axis == 0 { gt.w * gt.h } else { gt.l * gt.h };
            faces.push(Face { axis, sign, area });
        }
    }
    // top face is always swept
    faces.push(Face {
        axis: 2,
        sign: 1.0,
        area: gt.w * gt.l,
    });

    let total_area: f64 = faces.iter().map(|f| f.area).sum();
    for _ in 0..budget {
        let mut pick = rng.gen_range(0.0..total_area);
        let mut chosen = faces.len() - 1;
        for (i, f) in faces.iter().enumerate() {
            if pick < f.area {
                chosen = i;
                break;
            }
            pick -= f.area;
        }
        let f = &faces[chosen];
        let u = rng.gen_range(-0.5..0.5);
        let v = rng.gen_range(-0.5..0.5);
        let canonical = match f.axis {
            0 => Point3::new(f.sign * gt.l * 0.5, u * gt.w, v * gt.h),
            1 => Point3::new(u * gt.l, f.sign * gt.w * 0.5, v * gt.h),
            _ => Point3::new(u * gt.l, v * gt.w, f.sign * gt.h * 0.5),
        };
        out.push(geometry::from_canonical_point(gt, canonical));
    }
}

/// One jittered proposal per gt plus `Poisson(fp_rate)` random background
/// boxes kept below 0.1 IoU against every gt.
pub fn make_proposals(
    scene: &Scene,
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
    noise: &JitterParams,
    fp_rate: f64,
) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(scene.gts.len());
    for (gt, class) in &scene.gts {
        let box7 = jitter_proposal(gt, rng, noise);
        let score = (geometry::iou_3d(&box7, gt) + rng.gen_range(-0.05..0.05)).clamp(0.01, 1.0);
        out.push(Proposal {
            box7,
            class: *class,
            score,
        });
    }
    for _ in 0..poisson(fp_rate, rng) {
        for _attempt in 0..20 {
            let class = rng.gen_range(0..config.classes.len());
            let [w, l, h] = sample_size(&config.classes[class], rng);
            let x = rng.gen_range(config.area[0]..config.area[1]);
            let y = rng.gen_range(config.area[2]..config.area[3]);
            let theta = rng.gen_range(-PI..PI);
            let candidate = Box7::new(x, y, h * 0.5, w, l, h, theta).expect("positive dims");
            let max_iou = scene
                .gts
                .iter()
                .map(|(gt, _)| geometry::iou_3d(&candidate, gt))
                .fold(0.0, f64::max);
            if max_iou <= 0.1 {
                out.push(Proposal {
                    box7: candidate,
                    class: class + 1,
                    score: rng.gen_range(0.01..0.4),
                });
                break;
            }
        }
    }
    out
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let l = (-rate).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen_range(0.0..1.0);
        if p <= l {
            return k;
        }
        k += 1;
    }
}

/// Enlargement statistics over a proposal population: the fraction whose
/// point count is unchanged by the `+enlarge_wl` width/length growth, and
/// the fraction gaining one to nine points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityStats {
    pub total: usize,
    pub frac_same_count: f64,
    pub frac_lt_10_new: f64,
}

pub fn ambiguity_study(
    scenes: &[Scene],
    proposals: &[Vec<Proposal>],
    enlarge_wl: f64,
) -> Result<AmbiguityStats, SyntheticError> {
    let mut total = 0usize;
    let mut same = 0usize;
    let mut lt10 = 0usize;
    for (scene, props) in scenes.iter().zip(proposals) {
        for p in props {
            let enlarged = geometry::enlarge(&p.box7, enlarge_wl, enlarge_wl)?;
            let mut inside = 0usize;
            let mut inside_enlarged = 0usize;
            for &pt in &scene.cloud.points {
                if geometry::contains(&enlarged, pt) {
                    inside_enlarged += 1;
                    if geometry::contains(&p.box7, pt) {
                        inside += 1;
                    }
                }
            }
            let gained = inside_enlarged - inside;
            total += 1;
            if gained == 0 {
                same += 1;
            } else if gained < 10 {
                lt10 += 1;
            }
        }
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(AmbiguityStats {
        total,
        frac_same_count: frac(same),
        frac_lt_10_new: frac(lt10),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generation_is_reproducible() {
        let config = SceneConfig::default();
        let (a, sa) = generate_scene(&config, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let (b, sb) = generate_scene(&config, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.placed >= 1);
    }

    #[test]
    fn object_points_lie_on_their_box_surface() {
        let config = SceneConfig {
            ground_density_range: (0.0, 0.0),
            ..SceneConfig::default()
        };
        let (scene, _) = generate_scene(&config, 0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(!scene.cloud.is_empty());
        for &p in &scene.cloud.points {
            let owner = scene.gts.iter().any(|(gt, _)| {
                let grown = geometry::enlarge(gt, 0.01, 0.01).unwrap();
                geometry::contains(&grown, p)
            });
            assert!(owner, "point {p:?} belongs to no box");
        }
    }

    #[test]
    fn zero_ground_density_means_object_points_only() {
        let config = SceneConfig {
            ground_density_range: (0.0, 0.0),
            occlusion_prob: 0.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (scene, _) = generate_scene(&config, 0, &mut rng).unwrap();
        for &p in &scene.cloud.points {
            // face points can sit an ulp outside after the frame roundtrip
            let on_some_box = scene.gts.iter().any(|(gt, _)| {
                geometry::contains(&geometry::enlarge(gt, 1e-6, 1e-6).unwrap(), p)
            });
            assert!(on_some_box);
        }
    }

    #[test]
    fn placed_boxes_never_overlap() {
        for seed in 0..5u64 {
            let (scene, _) =
                generate_scene(&SceneConfig::default(), seed, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
            for i in 0..scene.gts.len() {
                for j in i + 1..scene.gts.len() {
                    assert_eq!(geometry::iou_3d(&scene.gts[i].0, &scene.gts[j].0), 0.0);
                }
            }
        }
    }

    #[test]
    fn point_budget_decays_with_distance() {
        let config = SceneConfig {
            classes: vec![ClassSpec {
                count_range: (1, 1),
                size_mean: [1.9, 4.6, 1.7],
                size_sigma: [0.0, 0.0, 0.0],
            }],
            area: [-1.0, 1.0, 7.0, 9.0],
            ground_density_range: (0.0, 0.0),
            occlusion_prob: 0.0,
            ..SceneConfig::default()
        };
        let far_config = SceneConfig {
            area: [-1.0, 1.0, 50.0, 55.0],
            ..config.clone()
        };
        let (near, _) = generate_scene(&config, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (far, _) = generate_scene(&far_config, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(near.cloud.len() > 4 * far.cloud.len());
    }

    #[test]
    fn noiseless_proposals_reproduce_gts() {
        let config = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (scene, _) = generate_scene(&config, 0, &mut rng).unwrap();
        let props = make_proposals(&scene, &config, &mut rng, &JitterParams::zero(), 0.0);
        assert_eq!(props.len(), scene.gts.len());
        for (p, (gt, class)) in props.iter().zip(&scene.gts) {
            assert_eq!(p.box7, *gt);
            assert_eq!(p.class, *class);
        }
    }

    #[test]
    fn false_positives_stay_clear_of_gts() {
        let config = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (scene, _) = generate_scene(&config, 0, &mut rng).unwrap();
        let props = make_proposals(&scene, &config, &mut rng, &JitterParams::zero(), 4.0);
        for p in props.iter().skip(scene.gts.len()) {
            for (gt, _) in &scene.gts {
                assert!(geometry::iou_3d(&p.box7, gt) <= 0.1);
            }
        }
    }

    #[test]
    fn proposal_quality_degrades_with_noise() {
        let config = SceneConfig::default();
        let mean_iou = |center: f64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            let mut count = 0usize;
            for f in 0..40 {
                let (scene, _) = generate_scene(&config, f, &mut rng).unwrap();
                let noise = JitterParams {
                    center,
                    log_size: 0.05,
                    heading: 0.1,
                };
                let props = make_proposals(&scene, &config, &mut rng, &noise, 0.0);
                for (p, (gt, _)) in props.iter().zip(&scene.gts) {
                    total += geometry::iou_3d(&p.box7, gt);
                    count += 1;
                }
            }
            total / count as f64
        };
        let low = mean_iou(0.1, 5);
        let high = mean_iou(0.5, 5);
        assert!(low > high, "mean IoU should fall with noise: {low} vs {high}");
    }

    #[test]
    fn ambiguity_extremes() {
        // isolated objects, no ground, snug proposals: nothing to gain
        let config = SceneConfig {
            ground_density_range: (0.0, 0.0),
            placement_margin: 2.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut scenes = Vec::new();
        let mut proposals = Vec::new();
        for f in 0..10 {
            let (scene, _) = generate_scene(&config, f, &mut rng).unwrap();
            // a hair of slack so on-face points are strictly interior
            let props: Vec<Proposal> = scene
                .gts
                .iter()
                .map(|(gt, class)| Proposal {
                    box7: geometry::enlarge(gt, 0.02, 0.02).unwrap(),
                    class: *class,
                    score: 0.9,
                })
                .collect();
            scenes.push(scene);
            proposals.push(props);
        }
        let stats = ambiguity_study(&scenes, &proposals, 1.0).unwrap();
        assert_eq!(stats.frac_same_count, 1.0);

        // saturated ground: every enlargement gains points
        let dense = SceneConfig {
            ground_density_range: (3.0, 3.0),
            area: [-15.0, 15.0, 4.0, 20.0],
            ..SceneConfig::default()
        };
        let mut scenes = Vec::new();
        let mut proposals = Vec::new();
        for f in 0..10 {
            let (scene, _) = generate_scene(&dense, f, &mut rng).unwrap();
            let props = make_proposals(&scene, &dense, &mut rng, &JitterParams::zero(), 0.0);
            scenes.push(scene);
            proposals.push(props);
        }
        let stats = ambiguity_study(&scenes, &proposals, 1.0).unwrap();
        assert!(stats.frac_same_count < 0.05, "got {}", stats.frac_same_count);
        assert!(stats.frac_same_count + stats.frac_lt_10_new <= 1.0);
    }
}
