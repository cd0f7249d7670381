//! Synthetic objects, scenes and classification shapes, plus file IO.

mod io;

pub use io::{parse_cloud, parse_pose, read_cloud, read_pose, write_cloud, write_pose};

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points, Features, Point, PointCloud, Pose};
use crate::losses::ObjectModel;
use crate::tensor::derive_seed;

/// Parametric surface to sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Sphere { diameter: f64 },
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl ShapeKind {
    pub fn label(&self) -> ShapeLabel {
        match self {
            ShapeKind::Sphere { .. } => ShapeLabel::Sphere,
            ShapeKind::Box { .. } => ShapeLabel::Box,
            ShapeKind::Cylinder { .. } => ShapeLabel::Cylinder,
        }
    }

    /// Rotational symmetry that ADD-S should absorb. Boxes are treated as
    /// asymmetric; their colouring tells the faces apart.
    pub fn symmetric(&self) -> bool {
        !matches!(self, ShapeKind::Box { .. })
    }
}

/// Classification target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeLabel {
    Sphere,
    Box,
    Cylinder,
}

impl ShapeLabel {
    pub const ALL: [ShapeLabel; 3] = [ShapeLabel::Sphere, ShapeLabel::Box, ShapeLabel::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeLabel::Sphere => "sphere",
            ShapeLabel::Box => "box",
            ShapeLabel::Cylinder => "cylinder",
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn sample_surface(kind: &ShapeKind, m: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    match *kind {
        ShapeKind::Sphere { diameter } => (0..m).map(|_| unit_vector(rng).map(|v| v * diameter / 2.0)).collect(),
        ShapeKind::Box { extents } => {
            let h = extents.map(|e| e / 2.0);
            let mut pts: Vec<Point> = (0..8)
                .map(|c| {
                    let s = |bit: usize| if c >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    [s(0) * h[0], s(1) * h[1], s(2) * h[2]]
                })
                .take(m)
                .collect();
            let areas = [extents[1] * extents[2], extents[0] * extents[2], extents[0] * extents[1]];
            let total: f64 = areas.iter().sum();
            while pts.len() < m {
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p: Point = std::array::from_fn(|k| rng.random_range(-h[k]..h[k]));
                p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                pts.push(p);
            }
            pts
        }
        ShapeKind::Cylinder { radius, height } => {
            let side = 2.0 * PI * radius * height;
            let caps = 2.0 * PI * radius * radius;
            (0..m)
                .map(|_| {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (side + caps) < side {
                        let z = rng.random_range(-height / 2.0..height / 2.0);
                        [radius * theta.cos(), radius * theta.sin(), z]
                    } else {
                        let r = radius * rng.random::<f64>().sqrt();
                        let z = if rng.random::<bool>() { height / 2.0 } else { -height / 2.0 };
                        [r * theta.cos(), r * theta.sin(), z]
                    }
                })
                .collect()
        }
    }
}

/// Smooth RGB texture over model coordinates, one sinusoid per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Colormap {
    directions: [Point; 3],
    phases: [f64; 3],
    frequency: f64,
}

impl Colormap {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "colormap"));
        Self {
            directions: std::array::from_fn(|_| unit_vector(&mut rng)),
            phases: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
            frequency: 15.0,
        }
    }

    pub fn color(&self, p: &Point) -> [f64; 3] {
        std::array::from_fn(|k| {
            let d = self.directions[k];
            let s = d[0] * p[0] + d[1] * p[1] + d[2] * p[2];
            0.5 + 0.5 * (self.frequency * s + self.phases[k]).sin()
        })
    }

    pub fn features(&self, points: &[Point]) -> Features {
        Features {
            dim: 3,
            values: points.iter().flat_map(|p| self.color(p)).collect(),
        }
    }
}

/// `m` surface samples with exact diameter, analytic symmetry flag and a
/// seeded colour per point.
pub fn gen_object(id: &str, kind: &ShapeKind, m: usize, seed: u64) -> Result<ObjectModel> {
    if m < 4 {
        return Err(Error::Contract(format!("an object needs at least 4 points, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let points = sample_surface(kind, m, &mut rng);
    let mut model = ObjectModel::new(id, points, kind.symmetric())?;
    model.appearance = Some(Colormap::new(derive_seed(seed, id)).features(&model.points));
    Ok(model)
}

/// The three objects used by the pose experiments.
pub fn default_objects(m: usize, seed: u64) -> Result<Vec<ObjectModel>> {
    let kinds = [
        ("sphere", ShapeKind::Sphere { diameter: 0.15 }),
        ("box", ShapeKind::Box { extents: [0.08, 0.12, 0.18] }),
        ("cylinder", ShapeKind::Cylinder { radius: 0.04, height: 0.16 }),
    ];
    kinds.iter().map(|(id, k)| gen_object(id, k, m, seed)).collect()
}

/// Where scene poses are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    /// Largest rotation angle from identity, radians; `π` covers all of SO(3).
    pub max_angle: f64,
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            max_angle: PI,
            translation_min: [-0.1, -0.1, 0.5],
            translation_max: [0.1, 0.1, 0.8],
        }
    }
}

/// Uniform rotation (normalised 4D Gaussian), restricted to angles ≤ `max_angle` by rejection.
pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        let q = q.map(|v| v / n);
        if 2.0 * q[0].abs().min(1.0).acos() <= max_angle {
            return q;
        }
    }
}

pub fn random_pose(rng: &mut impl Rng, range: &PoseRange) -> Pose {
    let q = random_rotation(rng, range.max_angle);
    let t = std::array::from_fn(|k| {
        let (lo, hi) = (range.translation_min[k], range.translation_max[k]);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    Pose::new(q, t).expect("unit quaternion")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub object: String,
    /// Camera-frame points with appearance features.
    pub observed: PointCloud,
    pub gt: Pose,
    pub occlusion: f64,
    pub noise_sigma: f64,
}

/// Posed, occluded and noisy view of `model`.
///
/// Occlusion removes `⌊occlusion·M⌋` points lying furthest along a random
/// direction (in the object frame); the survivors keep their model order.
pub fn gen_scene(model: &ObjectModel, range: &PoseRange, occlusion: f64, noise_sigma: f64, seed: u64) -> Result<SceneSample> {
    if !(0.0..=0.9).contains(&occlusion) {
        return Err(Error::Contract(format!("occlusion must lie in [0, 0.9], got {occlusion}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Contract(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_pose(&mut rng, range);
    let m = model.points.len();
    let removed = (occlusion * m as f64).floor() as usize;
    let dir = unit_vector(&mut rng);
    let mut order: Vec<usize> = (0..m).collect();
    let height = |i: usize| {
        let p = model.points[i];
        p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]
    };
    order.sort_by(|&a, &b| height(b).total_cmp(&height(a)).then(a.cmp(&b)));
    let mut keep = order[removed..].to_vec();
    keep.sort_unstable();
    if keep.len() < 8 {
        return Err(Error::DegenerateScene { remaining: keep.len() });
    }
    let source = PointCloud {
        points: model.points.clone(),
        features: model.appearance.clone(),
    };
    let mut observed = transform_points(&gt, &source.select(&keep));
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("sigma");
        for p in &mut observed.points {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(SceneSample {
        object: model.id.clone(),
        observed,
        gt,
        occlusion,
        noise_sigma,
    })
}

/// Random-size instance of a shape class.
pub fn random_shape(label: ShapeLabel, rng: &mut impl Rng) -> ShapeKind {
    match label {
        ShapeLabel::Sphere => ShapeKind::Sphere {
            diameter: rng.random_range(0.5..1.5),
        },
        ShapeLabel::Box => ShapeKind::Box {
            extents: std::array::from_fn(|_| rng.random_range(0.4..1.2)),
        },
        ShapeLabel::Cylinder => ShapeKind::Cylinder {
            radius: rng.random_range(0.2..0.5),
            height: rng.random_range(0.5..1.5),
        },
    }
}

/// Balanced, shuffled-by-construction labelled clouds: randomly sized,
/// randomly rotated, lightly jittered.
pub fn gen_classification_set(per_class: usize, points: usize, seed: u64) -> Result<Vec<(PointCloud, ShapeLabel)>> {
    let mut out = Vec::with_capacity(3 * per_class);
    for i in 0..per_class {
        for label in ShapeLabel::ALL {
            let s = derive_seed(seed, &format!("{}-{i}", label.name()));
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let kind = random_shape(label, &mut rng);
            let model = gen_object(label.name(), &kind, points, s)?;
            let range = PoseRange {
                translation_min: [0.0; 3],
                translation_max: [0.0; 3],
                ..PoseRange::default()
            };
            let scene = gen_scene(&model, &range, 0.0, 0.01, rng.random())?;
            out.push((PointCloud::new(scene.observed.points), label));
        }
    }
    Ok(out)
}
