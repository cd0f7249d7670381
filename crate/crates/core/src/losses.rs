//! ADD / ADD-S pose losses and the confidence-weighted dense objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, rotmat_unit, Features, Point, Pose};
use crate::par;
use crate::tensor::{CustomBackward, Graph, Tensor, Var};

/// Lower clamp applied to confidences before the log term.
pub const CONFIDENCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the `-log c` regularizer.
    pub w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w: 0.015 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("loss.w must be positive, got {}", self.w)));
        }
        Ok(())
    }
}

/// Sampled object surface in its own frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub id: String,
    pub points: Vec<Point>,
    /// Maximum pairwise distance between `points`, meters.
    pub diameter: f64,
    /// Scored with ADD-S instead of ADD.
    pub symmetric: bool,
    /// Surface appearance, one row per model point.
    pub appearance: Option<Features>,
}

impl ObjectModel {
    pub fn new(id: impl Into<String>, points: Vec<Point>, symmetric: bool) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Contract(format!(
                "an object model needs at least 4 points, got {}",
                points.len()
            )));
        }
        let diameter = max_pairwise_distance(&points);
        Ok(Self {
            id: id.into(),
            points,
            diameter,
            symmetric,
            appearance: None,
        })
    }

    /// The first `m` points (all of them if `m` exceeds the count).
    pub fn subsample(&self, m: usize) -> &[Point] {
        &self.points[..m.min(self.points.len())]
    }
}

pub fn max_pairwise_distance(points: &[Point]) -> f64 {
    let best = par::map_range(points.len(), |i| {
        points[i + 1..]
            .iter()
            .map(|q| dist2(&points[i], q))
            .fold(0.0, f64::max)
    });
    best.into_iter().fold(0.0, f64::max).sqrt()
}

fn transformed(pose: &Pose, points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| pose.apply(p)).collect()
}

/// Mean distance between corresponding model points under the two poses.
pub fn add_loss(model: &ObjectModel, gt: &Pose, pred: &Pose) -> f64 {
    add_distance(&model.points, gt, pred)
}

pub fn add_distance(points: &[Point], gt: &Pose, pred: &Pose) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let a = transformed(gt, points);
    let b = transformed(pred, points);
    a.iter().zip(&b).map(|(p, q)| dist2(p, q).sqrt()).sum::<f64>() / points.len() as f64
}

/// Mean distance from each ground-truth point to the closest predicted point.
pub fn adds_loss(model: &ObjectModel, gt: &Pose, pred: &Pose) -> f64 {
    adds_distance(&model.points, gt, pred)
}

pub fn adds_distance(points: &[Point], gt: &Pose, pred: &Pose) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let a = transformed(gt, points);
    let b = transformed(pred, points);
    let mins = par::map(&a, |p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt());
    mins.iter().sum::<f64>() / points.len() as f64
}

/// `∂L/∂q` for `L(R(q))` given `G = ∂L/∂R`, with `R(q)` the quaternion
/// rotation polynomial.
pub(crate) fn rotmat_quat_grad([w, x, y, z]: [f64; 4], g: &[[f64; 3]; 3]) -> [f64; 4] {
    [
        -2.0 * z * g[0][1] + 2.0 * y * g[0][2] + 2.0 * z * g[1][0] - 2.0 * x * g[1][2] - 2.0 * y * g[2][0]
            + 2.0 * x * g[2][1],
        2.0 * y * g[0][1] + 2.0 * z * g[0][2] + 2.0 * y * g[1][0] - 4.0 * x * g[1][1] - 2.0 * w * g[1][2]
            + 2.0 * z * g[2][0]
            + 2.0 * w * g[2][1]
            - 4.0 * x * g[2][2],
        -4.0 * y * g[0][0] + 2.0 * x * g[0][1] + 2.0 * w * g[0][2] + 2.0 * x * g[1][0] + 2.0 * z * g[1][2]
            - 2.0 * w * g[2][0]
            + 2.0 * z * g[2][1]
            - 4.0 * y * g[2][2],
        -4.0 * z * g[0][0] - 2.0 * w * g[0][1] + 2.0 * x * g[0][2] + 2.0 * w * g[1][0] - 4.0 * z * g[1][1]
            + 2.0 * y * g[1][2]
            + 2.0 * x * g[2][0]
            + 2.0 * y * g[2][1],
    ]
}

/// One hypothesis' loss and its partials w.r.t. the quaternion and translation.
fn hypothesis_loss(
    q: [f64; 4],
    t: [f64; 3],
    model: &[Point],
    targets: &[Point],
    symmetric: bool,
) -> (f64, [f64; 4], [f64; 3]) {
    let r = rotmat_unit(q);
    let predicted: Vec<Point> = model
        .iter()
        .map(|x| {
            let v = r * nalgebra::Vector3::from(*x);
            [v.x + t[0], v.y + t[1], v.z + t[2]]
        })
        .collect();
    let m = model.len() as f64;
    let mut loss = 0.0;
    let mut dt = [0.0; 3];
    let mut g = [[0.0; 3]; 3];
    for (j, target) in targets.iter().enumerate() {
        let k = if symmetric {
            let mut best = (0, f64::INFINITY);
            for (k, p) in predicted.iter().enumerate() {
                let d = dist2(p, target);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        } else {
            j
        };
        let p = &predicted[k];
        let d = [p[0] - target[0], p[1] - target[1], p[2] - target[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        loss += len;
        if len > 0.0 {
            let x = &model[k];
            for a in 0..3 {
                let u = d[a] / len;
                dt[a] += u;
                for b in 0..3 {
                    g[a][b] += u * x[b];
                }
            }
        }
    }
    let dt = dt.map(|v| v / m);
    let g = g.map(|row| row.map(|v| v / m));
    (loss / m, rotmat_quat_grad(q, &g), dt)
}

struct PoseLossRule {
    dq: Vec<[f64; 4]>,
    dt: Vec<[f64; 3]>,
}

impl CustomBackward for PoseLossRule {
    fn name(&self) -> &'static str {
        "pose_losses"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let n = self.dq.len();
        let mut gq = vec![0.0; 4 * n];
        let mut gt = vec![0.0; 3 * n];
        for (i, &go) in grad_out.data().iter().enumerate() {
            for r in 0..4 {
                gq[r * n + i] = go * self.dq[i][r];
            }
            for r in 0..3 {
                gt[r * n + i] = go * self.dt[i][r];
            }
        }
        vec![
            Tensor::new(inputs[0].shape().to_vec(), gq).expect("quat grad"),
            Tensor::new(inputs[1].shape().to_vec(), gt).expect("trans grad"),
        ]
    }
}

/// Per-hypothesis ADD (or ADD-S when `symmetric`) for `N` predicted poses.
///
/// `quats` is `[4 × N]` (unit columns, `w, x, y, z` rows) and `trans` is
/// `[3 × N]`; the result is `[N]`.
pub fn pose_losses(
    graph: &mut Graph,
    quats: Var,
    trans: Var,
    model_points: &[Point],
    gt: &Pose,
    symmetric: bool,
) -> Result<Var> {
    let qs = graph.shape(quats).to_vec();
    let ts = graph.shape(trans).to_vec();
    if qs.len() != 2 || qs[0] != 4 || ts.len() != 2 || ts[0] != 3 || qs[1] != ts[1] {
        return Err(Error::dim("pose_losses", &qs, &ts));
    }
    if model_points.is_empty() {
        return Err(Error::EmptyInput("pose_losses model"));
    }
    let n = qs[1];
    let qv = graph.value(quats).data();
    let tv = graph.value(trans).data();
    let targets: Vec<Point> = model_points.iter().map(|x| gt.apply(x)).collect();
    let per = par::map_range(n, |i| {
        let q = [qv[i], qv[n + i], qv[2 * n + i], qv[3 * n + i]];
        let t = [tv[i], tv[n + i], tv[2 * n + i]];
        hypothesis_loss(q, t, model_points, &targets, symmetric)
    });
    let values: Vec<f64> = per.iter().map(|p| p.0).collect();
    let rule = PoseLossRule {
        dq: per.iter().map(|p| p.1).collect(),
        dt: per.iter().map(|p| p.2).collect(),
    };
    Ok(graph.custom(vec![quats, trans], Tensor::vector(&values), Box::new(rule)))
}

fn check_confidences(conf: &[f64]) -> Result<()> {
    if let Some(c) = conf.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::Contract(format!("confidence must be positive, got {c}")));
    }
    Ok(())
}

/// `(1/N) Σ_i (L_i·c_i − w·ln c_i)` on the graph; `conf` may be `[N]` or `[1 × N]`.
pub fn confidence_weighted_loss(graph: &mut Graph, per_point: Var, conf: Var, config: &LossConfig) -> Result<Var> {
    let n = graph.value(per_point).len();
    if n == 0 {
        return Err(Error::EmptyInput("confidence_weighted_loss"));
    }
    if graph.value(conf).len() != n {
        return Err(Error::dim(
            "confidence_weighted_loss",
            graph.shape(per_point),
            graph.shape(conf),
        ));
    }
    check_confidences(graph.value(conf).data())?;
    let per_point = graph.reshape(per_point, vec![n])?;
    let conf = graph.reshape(conf, vec![n])?;
    let weighted = graph.elementwise(per_point, conf, crate::tensor::Elementwise::Mul, false)?;
    let log_c = graph.log(conf, CONFIDENCE_FLOOR);
    let reg = graph.scale(log_c, -config.w);
    let total = graph.elementwise(weighted, reg, crate::tensor::Elementwise::Add, false)?;
    graph.mean(total)
}

/// Plain-number evaluation of [`confidence_weighted_loss`].
pub fn confidence_weighted_value(per_point: &[f64], conf: &[f64], config: &LossConfig) -> Result<f64> {
    if per_point.is_empty() {
        return Err(Error::EmptyInput("confidence_weighted_loss"));
    }
    if per_point.len() != conf.len() {
        return Err(Error::dim("confidence_weighted_loss", &[per_point.len()], &[conf.len()]));
    }
    check_confidences(conf)?;
    let n = per_point.len() as f64;
    Ok(per_point
        .iter()
        .zip(conf)
        .map(|(l, c)| l * c - config.w * c.max(CONFIDENCE_FLOOR).ln())
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_poses;
    use crate::tensor::{gradcheck, random_tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        Pose::new(q, t).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, m: usize) -> ObjectModel {
        let pts = (0..m)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05)))
            .collect();
        ObjectModel::new("rand", pts, false).unwrap()
    }

    fn square() -> ObjectModel {
        let pts = vec![[0.05, 0.05, 0.0], [-0.05, 0.05, 0.0], [-0.05, -0.05, 0.0], [0.05, -0.05, 0.0]];
        ObjectModel::new("square", pts, true).unwrap()
    }

    #[test]
    fn model_needs_four_points_and_gets_exact_diameter() {
        assert!(ObjectModel::new("x", vec![[0.0; 3]; 3], false).is_err());
        let m = square();
        assert!((m.diameter - (0.02f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_poses_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 50);
        let p = random_pose(&mut rng);
        assert_eq!(add_loss(&m, &p, &p), 0.0);
        assert_eq!(adds_loss(&m, &p, &p), 0.0);
    }

    #[test]
    fn uniform_displacement_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 50);
        let gt = random_pose(&mut rng);
        let mut pred = gt;
        pred.translation[0] += 0.02;
        assert!((add_loss(&m, &gt, &pred) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn add_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 100);
        let (gt, pred) = (random_pose(&mut rng), random_pose(&mut rng));
        let (r1, r2) = (gt.rotation_matrix(), pred.rotation_matrix());
        let mut acc = 0.0;
        for x in &m.points {
            let mut d2 = 0.0;
            for a in 0..3 {
                let mut u = gt.translation[a];
                let mut v = pred.translation[a];
                for b in 0..3 {
                    u += r1[(a, b)] * x[b];
                    v += r2[(a, b)] * x[b];
                }
                d2 += (u - v) * (u - v);
            }
            acc += d2.sqrt();
        }
        assert!((add_loss(&m, &gt, &pred) - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn square_quarter_turn_is_invisible_to_adds() {
        let m = square();
        let gt = Pose::from_translation([0.0, 0.0, 0.5]);
        let quarter = Pose::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2, [0.0; 3]).unwrap();
        let pred = compose_poses(&gt, &quarter);
        assert!(adds_loss(&m, &gt, &pred) < 1e-15);
        assert!(add_loss(&m, &gt, &pred) > 0.05);
    }

    #[test]
    fn add_is_symmetric_adds_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 60);
        for _ in 0..20 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            assert!((add_loss(&m, &a, &b) - add_loss(&m, &b, &a)).abs() < 1e-12);
        }
        // Four points: three clustered, one far away. Under `gt` the far point's
        // image lands on the cluster of `pred`, but not the other way around.
        let pts = vec![[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [0.0, 0.001, 0.0], [0.1, 0.0, 0.0]];
        let m = ObjectModel::new("lopsided", pts, true).unwrap();
        let a = Pose::identity();
        let b = Pose::from_translation([0.1, 0.0, 0.0]);
        let ab = adds_loss(&m, &a, &b);
        let ba = adds_loss(&m, &b, &a);
        assert!((ab - ba).abs() > 1e-3, "{ab} vs {ba}");
    }

    #[test]
    fn losses_are_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 80);
        for _ in 0..20 {
            let (a, b, g) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let (ga, gb) = (compose_poses(&g, &a), compose_poses(&g, &b));
            assert!((add_loss(&m, &a, &b) - add_loss(&m, &ga, &gb)).abs() < 1e-12);
            assert!((adds_loss(&m, &a, &b) - adds_loss(&m, &ga, &gb)).abs() < 1e-12);
            assert!(adds_loss(&m, &a, &b) <= add_loss(&m, &a, &b) + 1e-15);
        }
    }

    #[test]
    fn graph_losses_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 40);
        let gt = random_pose(&mut rng);
        let preds: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let mut q = vec![0.0; 20];
        let mut t = vec![0.0; 15];
        for (i, p) in preds.iter().enumerate() {
            for r in 0..4 {
                q[r * 5 + i] = p.rotation[r];
            }
            for r in 0..3 {
                t[r * 5 + i] = p.translation[r];
            }
        }
        for symmetric in [false, true] {
            let mut g = Graph::new();
            let qv = g.constant(Tensor::new(vec![4, 5], q.clone()).unwrap());
            let tv = g.constant(Tensor::new(vec![3, 5], t.clone()).unwrap());
            let l = pose_losses(&mut g, qv, tv, &m.points, &gt, symmetric).unwrap();
            for (i, p) in preds.iter().enumerate() {
                let want = if symmetric { adds_loss(&m, &gt, p) } else { add_loss(&m, &gt, p) };
                assert!((g.value(l).data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pose_loss_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let m = random_model(&mut rng, 12);
            let gt = random_pose(&mut rng);
            let raw_q = random_tensor(&[4, 3], 1.0, seed);
            let t = random_tensor(&[3, 3], 0.3, seed + 50);
            let weights = random_tensor(&[3], 1.0, seed + 99);
            for symmetric in [false, true] {
                let r = gradcheck::check(&[raw_q.clone(), t.clone()], 1e-5, |g, v| {
                    let q = g.normalize_cols(v[0])?;
                    let l = pose_losses(g, q, v[1], &m.points, &gt, symmetric)?;
                    let w = g.constant(weights.clone());
                    let p = g.mul(l, w)?;
                    Ok(g.sum(p))
                })
                .unwrap();
                assert!(r.max_rel_error <= 1e-4, "seed {seed} sym {symmetric}: {}", r.max_rel_error);
            }
        }
    }

    #[test]
    fn all_unit_confidences_give_mean_loss() {
        let l = [0.1, 0.2, 0.6];
        let v = confidence_weighted_value(&l, &[1.0; 3], &LossConfig::default()).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn confidence_contract() {
        let cfg = LossConfig::default();
        assert!(confidence_weighted_value(&[0.1, 0.2], &[0.5, 0.0], &cfg).is_err());
        assert!(confidence_weighted_value(&[0.1], &[-0.5], &cfg).is_err());
        assert!(confidence_weighted_value(&[0.1], &[f64::NAN], &cfg).is_err());
        // Tiny positive confidences are clamped, not rejected.
        let v = confidence_weighted_value(&[0.1], &[1e-20], &cfg).unwrap();
        assert!((v - (0.1 * 1e-20 - 0.015 * CONFIDENCE_FLOOR.ln())).abs() < 1e-12);
        assert!(LossConfig { w: 0.0 }.validate().is_err());
    }

    #[test]
    fn confidence_gradient_sign_around_stationary_point() {
        // d/dc (c·L − w ln c) = L − w/c, zero at c = w/L = 0.5.
        let cfg = LossConfig { w: 0.015 };
        for (c, sign) in [(0.3, -1.0), (0.5, 0.0), (0.7, 1.0)] {
            let mut g = Graph::new();
            let l = g.constant(Tensor::vector(&[0.03]));
            let cv = g.parameter(Tensor::vector(&[c]));
            let loss = confidence_weighted_loss(&mut g, l, cv, &cfg).unwrap();
            let d = g.backward(loss).unwrap().get(cv).unwrap().data()[0];
            if sign == 0.0 {
                assert!(d.abs() < 1e-15);
            } else {
                assert_eq!(d.signum(), sign);
            }
        }
    }

    #[test]
    fn confidence_loss_matches_direct_summation_and_analytic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig { w: 0.015 };
        for _ in 0..20 {
            let n = rng.random_range(1..20);
            let l: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let mut direct = 0.0;
            for i in 0..n {
                direct += l[i] * c[i] - 0.015 * c[i].ln();
            }
            direct /= n as f64;
            let mut g = Graph::new();
            let lv = g.constant(Tensor::vector(&l));
            let cv = g.parameter(Tensor::vector(&c));
            let loss = confidence_weighted_loss(&mut g, lv, cv, &cfg).unwrap();
            assert!((g.value(loss).item() - direct).abs() < 1e-12);
            assert!((confidence_weighted_value(&l, &c, &cfg).unwrap() - direct).abs() < 1e-12);
            let grads = g.backward(loss).unwrap();
            for i in 0..n {
                let analytic = l[i] / n as f64 - 0.015 / (n as f64 * c[i]);
                assert!((grads.get(cv).unwrap().data()[i] - analytic).abs() < 1e-12);
            }
        }
    }
}
