//! Training, evaluation, refinement, ablation sweeps and the
//! classification experiment.
//!
//! Every random quantity is derived from `RunConfig::seed` and a label
//! naming its role (`train/<epoch>/<i>`, `eval/<i>`, ...), so runs are
//! pure functions of their configuration.

mod ablation;
mod classify;
mod config;
mod output;
mod refine;

pub use ablation::{run_ablation, AblationSpec, AblationTable, Arm, ArmResult};
pub use classify::{classify_experiment, ClassifyArm, ClassifyReport};
pub use config::{flatten_toml, kind_of, ClassifySettings, ConfigValue, DataConfig, Kind, RunConfig, SCHEMA};
pub use output::{loss_curve_csv, write_run_outputs, CHECKPOINT, LOSS_CURVE, REPORT_CSV, REPORT_JSON};
pub use refine::{iterative_refine, IdentityRefiner, LearnedRefiner, Refiner};

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{default_objects, gen_scene, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{compose_poses, transform_points, PointCloud, Pose};
use crate::losses::{confidence_weighted_loss, pose_losses, ObjectModel};
use crate::metrics::{MetricBlock, MetricReport, ObjectMetrics, RunMetadata};
use crate::par;
use crate::posenet::{
    extract_features, init_params, predict, predict_dense, refine_forward, select_pose, NetConfig,
};
use crate::tensor::{derive_seed, Adam, Graph, ParamSet, Tensor};

/// A scene plus the subsampled cloud the network sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub object: usize,
    pub sample: SceneSample,
    pub input: PointCloud,
}

/// The synthetic objects of a run.
pub fn objects_for(config: &RunConfig) -> Result<Vec<ObjectModel>> {
    let mut objects = default_objects(config.data.model_points, derive_seed(config.seed, "objects"))?;
    objects.truncate(config.data.objects);
    Ok(objects)
}

fn scene_from_stream(config: &RunConfig, objects: &[ObjectModel], object: usize, label: &str) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label));
    let occlusion = rng.random::<f64>() * config.data.occlusion_max;
    let sample = gen_scene(
        &objects[object],
        &config.data.pose_range(),
        occlusion,
        config.data.noise_sigma,
        rng.random(),
    )?;
    let n = sample.observed.len();
    let input = if n > config.points {
        let mut keep = index::sample(&mut rng, n, config.points).into_vec();
        keep.sort_unstable();
        sample.observed.select(&keep)
    } else {
        sample.observed.clone()
    };
    Ok(Scene { object, sample, input })
}

/// Scene `i` of training epoch `epoch`; objects cycle in order.
pub fn training_scene(config: &RunConfig, objects: &[ObjectModel], epoch: usize, i: usize) -> Result<Scene> {
    scene_from_stream(config, objects, i % objects.len(), &format!("train/{epoch}/{i}"))
}

/// Scene `i` of the refiner's training stream.
pub fn refiner_scene(config: &RunConfig, objects: &[ObjectModel], epoch: usize, i: usize) -> Result<Scene> {
    scene_from_stream(config, objects, i % objects.len(), &format!("refine/{epoch}/{i}"))
}

/// Held-out scene `i`, disjoint from every training stream.
pub fn eval_scene(config: &RunConfig, objects: &[ObjectModel], i: usize) -> Result<Scene> {
    scene_from_stream(config, objects, i % objects.len(), &format!("eval/{i}"))
}

pub fn eval_scenes(config: &RunConfig, objects: &[ObjectModel]) -> Result<Vec<Scene>> {
    par::map_range(config.data.eval_scenes, |i| eval_scene(config, objects, i))
        .into_iter()
        .collect()
}

/// Weights and everything needed to rebuild the networks around them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub objects: Vec<ObjectModel>,
    pub pose: ParamSet,
    pub refiner: ParamSet,
}

impl TrainedModel {
    /// Freshly initialised networks.
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            objects: objects_for(config)?,
            pose: init_params(&config.net, config.seed)?,
            refiner: init_params(&config.net.as_refiner(), derive_seed(config.seed, "refiner"))?,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(&self.config)?,
            params: ParamSet::merged(&[("pose.", &self.pose), ("refiner.", &self.refiner)]),
        })
    }

    /// Rebuilds from a checkpoint, checking every tensor name and shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable configuration: {e}")))?;
        let mut model = Self::init(&config)?;
        for (prefix, set) in [("pose.", &mut model.pose), ("refiner.", &mut model.refiner)] {
            let stored = ck.params.with_prefix(prefix);
            if stored.len() != set.len() {
                return Err(Error::Checkpoint(format!(
                    "`{prefix}` holds {} tensors, configuration expects {}",
                    stored.len(),
                    set.len()
                )));
            }
            for (name, t) in stored.iter() {
                match set.get_mut(name) {
                    Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{prefix}{name}` {:?} does not fit the configuration",
                            t.shape()
                        )))
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn param_counts(&self) -> BTreeMap<String, usize> {
        BTreeMap::from([
            ("pose".to_string(), self.pose.count()),
            ("pose_pam".to_string(), self.pose.count_prefix("pam.")),
            ("refiner".to_string(), self.refiner.count()),
        ])
    }

    pub fn refiner_for(&self, object: usize) -> LearnedRefiner<'_> {
        LearnedRefiner {
            params: &self.refiner,
            config: self.config.net.as_refiner(),
            object,
        }
    }

    /// Most confident dense hypothesis for `cloud`.
    pub fn estimate(&self, cloud: &PointCloud, object: usize) -> Result<Pose> {
        let preds = predict(&self.pose, &self.config.net, cloud, object)?;
        Ok(select_pose(&preds)?.0)
    }
}

/// Mean training loss of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

pub(crate) fn epoch_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        start
    } else {
        start + (end - start) * epoch as f64 / (epochs - 1) as f64
    }
}

fn check_step(loss: f64, grads: &[Tensor], step: usize, epoch: usize, scene: usize) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Divergence {
            step,
            epoch,
            scene,
            loss,
        });
    }
    Ok(())
}

/// Loss and gradients of the dense objective on one scene.
pub fn pose_step(params: &ParamSet, net: &NetConfig, model: &ObjectModel, scene: &Scene, config: &RunConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let features = extract_features(&mut graph, &bound, net, &scene.input)?;
    let heads = predict_dense(&mut graph, &bound, net, features, &scene.input, scene.object)?;
    if [heads.quats, heads.trans, heads.conf].iter().any(|v| !graph.value(*v).all_finite()) {
        return Ok((f64::NAN, Vec::new()));
    }
    let points = model.subsample(config.loss_points);
    let per = pose_losses(&mut graph, heads.quats, heads.trans, points, &scene.sample.gt, model.symmetric)?;
    let loss = confidence_weighted_loss(&mut graph, per, heads.conf, &config.loss)?;
    let grads = graph.backward(loss)?;
    Ok((graph.value(loss).item(), bound.gradients(params, &grads)))
}

/// Loss, gradients and predicted object-frame residual of the refiner at `current`.
pub fn refiner_step(
    params: &ParamSet,
    net: &NetConfig,
    model: &ObjectModel,
    scene: &Scene,
    current: &Pose,
    config: &RunConfig,
) -> Result<(f64, Vec<Tensor>, Pose)> {
    let inverse = current.inverse();
    let local = transform_points(&inverse, &scene.input);
    let target = compose_poses(&inverse, &scene.sample.gt);
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let heads = refine_forward(&mut graph, &bound, net, &local, scene.object)?;
    let points = model.subsample(config.loss_points);
    let per = pose_losses(&mut graph, heads.quat, heads.trans, points, &target, model.symmetric)?;
    let loss = graph.mean(per)?;
    let grads = graph.backward(loss)?;
    let q = graph.value(heads.quat).data();
    let t = graph.value(heads.trans).data();
    let d = Pose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])?;
    Ok((graph.value(loss).item(), bound.gradients(params, &grads), d))
}

/// Trains the dense network, then the refiner on top of the frozen dense network.
pub fn train_model(config: &RunConfig) -> Result<(TrainedModel, Vec<LossPoint>)> {
    let mut model = TrainedModel::init(config)?;
    let mut curve = Vec::new();
    let mut adam = Adam::new(config.lr);
    let mut step = 0;
    for epoch in 0..config.epochs {
        adam.lr = epoch_lr(config.lr, config.lr_final, epoch, config.epochs);
        let mut total = 0.0;
        for i in 0..config.scenes_per_epoch {
            let scene = training_scene(config, &model.objects, epoch, i)?;
            let object = &model.objects[scene.object];
            let (loss, grads) = pose_step(&model.pose, &config.net, object, &scene, config)?;
            check_step(loss, &grads, step, epoch, i)?;
            adam.step(&mut model.pose, &grads);
            total += loss;
            step += 1;
        }
        let mean_loss = total / config.scenes_per_epoch as f64;
        log::info!("pose epoch {epoch}: loss {mean_loss:.6}");
        curve.push(LossPoint {
            phase: "pose".into(),
            epoch,
            lr: adam.lr,
            mean_loss,
        });
    }

    let refiner_net = config.net.as_refiner();
    let mut adam = Adam::new(config.refine_lr);
    let iters = config.refine_iters.max(1);
    for epoch in 0..config.refine_epochs {
        let mut total = 0.0;
        for i in 0..config.scenes_per_epoch {
            let scene = refiner_scene(config, &model.objects, epoch, i)?;
            let object = &model.objects[scene.object];
            let mut current = model.estimate(&scene.input, scene.object)?;
            for _ in 0..iters {
                let (loss, grads, d) = refiner_step(&model.refiner, &refiner_net, object, &scene, &current, config)?;
                check_step(loss, &grads, step, epoch, i)?;
                adam.step(&mut model.refiner, &grads);
                current = compose_poses(&current, &d);
                total += loss / iters as f64;
                step += 1;
            }
        }
        let mean_loss = total / config.scenes_per_epoch as f64;
        log::info!("refiner epoch {epoch}: loss {mean_loss:.6}");
        curve.push(LossPoint {
            phase: "refiner".into(),
            epoch,
            lr: adam.lr,
            mean_loss,
        });
    }
    Ok((model, curve))
}

/// Per-scene estimates before and after refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub object: usize,
    pub gt: Pose,
    pub unrefined: Pose,
    pub refined: Pose,
}

/// Estimates every scene; independent scenes run in parallel.
pub fn estimate_scenes(model: &TrainedModel, scenes: &[Scene]) -> Result<Vec<SceneResult>> {
    par::map(scenes, |s| {
        let unrefined = model.estimate(&s.input, s.object)?;
        let refiner = model.refiner_for(s.object);
        let refined = iterative_refine(&unrefined, &s.input, &refiner, model.config.refine_iters)?;
        Ok(SceneResult {
            object: s.object,
            gt: s.sample.gt,
            unrefined,
            refined,
        })
    })
    .into_iter()
    .collect()
}

/// Metrics of paired estimates, grouped by object in model order.
pub fn report_from_results(model: &TrainedModel, results: &[SceneResult]) -> Result<MetricReport> {
    let mut unrefined = Vec::new();
    let mut refined = Vec::new();
    for (k, object) in model.objects.iter().enumerate() {
        let mine: Vec<&SceneResult> = results.iter().filter(|r| r.object == k).collect();
        if mine.is_empty() {
            continue;
        }
        let gts: Vec<Pose> = mine.iter().map(|r| r.gt).collect();
        let u: Vec<Pose> = mine.iter().map(|r| r.unrefined).collect();
        let r: Vec<Pose> = mine.iter().map(|r| r.refined).collect();
        unrefined.push(ObjectMetrics::compute(object, &gts, &u)?);
        refined.push(ObjectMetrics::compute(object, &gts, &r)?);
    }
    Ok(MetricReport {
        metadata: RunMetadata {
            seed: model.config.seed,
            config_hash: model.config.hash(),
            refine_iters: model.config.refine_iters,
            loss_w: model.config.loss.w,
            param_counts: model.param_counts(),
        },
        unrefined: MetricBlock::new(unrefined),
        refined: MetricBlock::new(refined),
    })
}

/// Unrefined and `K`-step refined metrics on the same held-out scenes.
pub fn evaluate(model: &TrainedModel, scenes: &[Scene]) -> Result<MetricReport> {
    report_from_results(model, &estimate_scenes(model, scenes)?)
}

/// Everything a `train` run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub curve: Vec<LossPoint>,
    pub report: MetricReport,
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let (model, curve) = train_model(config)?;
    let scenes = eval_scenes(config, &model.objects)?;
    let report = evaluate(&model, &scenes)?;
    Ok(TrainOutcome { model, curve, report })
}

/// Runs seeds `seed, seed+1, …` and keeps the run with the best unrefined
/// ADD(S) AUC (earliest seed on ties). Returns it with every run's AUC.
pub fn train_repeats(config: &RunConfig, repeats: usize) -> Result<(TrainOutcome, Vec<f64>)> {
    let mut best: Option<TrainOutcome> = None;
    let mut aucs = Vec::new();
    for r in 0..repeats.max(1) {
        let mut c = config.clone();
        c.seed = config.seed.wrapping_add(r as u64);
        let outcome = train(&c)?;
        let auc = outcome.report.unrefined.mean.auc;
        aucs.push(auc);
        if best.as_ref().is_none_or(|b| auc > b.report.unrefined.mean.auc) {
            best = Some(outcome);
        }
    }
    Ok((best.expect("at least one run"), aucs))
}
