//! Dense per-point pose network, the global-residual refiner, and the
//! point-cloud classifier.
//!
//! Geometry (`xyz`) and appearance (per-point colour) pass through separate
//! pointwise stacks. Attention modules sit after whichever layers are listed
//! in [`PamSettings::insertion_points`]. The two branches are concatenated
//! per point, averaged into a global feature, and the global feature is
//! appended to every point before the heads.

mod classify;
mod refine;

pub use classify::{classify, classify_logits, init_classifier, softmax_cross_entropy, ClassifierConfig};
pub use refine::{refine_forward, refine_residual, ResidualHeads};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};
use crate::pam::{init_pam, pam_forward, PamSettings};
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

/// Names accepted in `pam.insertion_points` for the pose network.
pub const POSE_INSERTION_POINTS: [&str; 4] = ["geo1", "geo2", "app1", "app2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub appearance_dim: usize,
    pub geo_widths: [usize; 2],
    pub app_widths: [usize; 2],
    pub head_width: usize,
    /// One output layer per object in each head.
    pub num_objects: usize,
    /// Multiplies (centred) coordinates before the geometry branch.
    pub xyz_scale: f64,
    /// Multiplies raw translation outputs.
    pub offset_scale: f64,
    pub pam: PamSettings,
    /// Pointwise layer over the concatenated branches before pooling.
    pub fuse: bool,
    /// Global residual head instead of dense heads; inputs are not centred.
    pub refiner: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            appearance_dim: 3,
            geo_widths: [64, 128],
            app_widths: [64, 128],
            head_width: 128,
            num_objects: 1,
            xyz_scale: 10.0,
            offset_scale: 0.1,
            pam: PamSettings::default(),
            fuse: true,
            refiner: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.geo_widths[1] != self.app_widths[1] {
            return Err(Error::Config(format!(
                "branch output widths differ: geometry {} vs appearance {}",
                self.geo_widths[1], self.app_widths[1]
            )));
        }
        let widths = self.geo_widths.iter().chain(&self.app_widths);
        if widths.chain([&self.head_width, &self.appearance_dim]).any(|&w| w == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        if !(self.xyz_scale > 0.0 && self.offset_scale > 0.0) {
            return Err(Error::Config("xyz_scale and offset_scale must be positive".into()));
        }
        for point in &self.pam.insertion_points {
            let Some(c) = self.insertion_channels(point) else {
                return Err(Error::Config(format!(
                    "unknown pam insertion point `{point}` (expected one of {POSE_INSERTION_POINTS:?})"
                )));
            };
            if self.pam.is_active() {
                self.pam.instance(c).validate()?;
            }
        }
        Ok(())
    }

    pub fn insertion_channels(&self, point: &str) -> Option<usize> {
        match point {
            "geo1" => Some(self.geo_widths[0]),
            "geo2" => Some(self.geo_widths[1]),
            "app1" => Some(self.app_widths[0]),
            "app2" => Some(self.app_widths[1]),
            _ => None,
        }
    }

    /// Width of the concatenated per-point feature (before the global part).
    pub fn fused_width(&self) -> usize {
        self.geo_widths[1] + self.app_widths[1]
    }

    /// Width of the head input: per-point fused plus global feature.
    pub fn head_input(&self) -> usize {
        2 * self.fused_width()
    }

    /// Same backbone with a residual head.
    pub fn as_refiner(&self) -> NetConfig {
        NetConfig {
            refiner: true,
            ..self.clone()
        }
    }
}

fn pam_prefix(point: &str) -> String {
    format!("pam.{point}")
}

/// Output-layer name of `head` for `object`.
pub(crate) fn out_layer(head: &str, object: usize) -> String {
    format!("head.{head}.out{object}")
}

/// Registers all parameters. Backbone tensors are seeded by name, so arms
/// that differ only in attention share identical backbone weights.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut p = ParamSet::new();
    let [g1, g2] = config.geo_widths;
    let [a1, a2] = config.app_widths;
    p.insert_conv("geo.conv1", 3, g1, seed);
    p.insert_conv("geo.conv2", g1, g2, seed);
    p.insert_conv("app.conv1", config.appearance_dim, a1, seed);
    p.insert_conv("app.conv2", a1, a2, seed);
    if config.fuse {
        p.insert_conv("fuse.conv", config.fused_width(), config.fused_width(), seed);
    }
    for point in &config.pam.insertion_points {
        if config.pam.inserts_at(point) {
            let c = config.insertion_channels(point).expect("validated");
            init_pam(&mut p, &pam_prefix(point), &config.pam.instance(c), seed)?;
        }
    }
    if config.refiner {
        refine::init_heads(&mut p, config, seed);
        return Ok(p);
    }
    let (input, h) = (config.head_input(), config.head_width);
    for (head, width) in [("rot", 4), ("trans", 3), ("conf", 1)] {
        p.insert_conv(&format!("head.{head}.hidden"), input, h, seed);
        for k in 0..config.num_objects {
            p.insert_conv(&out_layer(head, k), h, width, seed);
        }
    }
    Ok(p)
}

/// Scalar parameter count of a network built from `config`.
pub fn param_count(config: &NetConfig) -> Result<usize> {
    Ok(init_params(config, 0)?.count())
}

/// `[3 × N]` geometry input: coordinates (centred unless `config.refiner`) times `xyz_scale`.
pub fn geometry_input(cloud: &PointCloud, config: &NetConfig) -> Tensor {
    let n = cloud.len();
    let c = if config.refiner { [0.0; 3] } else { cloud.centroid() };
    let mut data = vec![0.0; 3 * n];
    for (i, p) in cloud.points.iter().enumerate() {
        for k in 0..3 {
            data[k * n + i] = (p[k] - c[k]) * config.xyz_scale;
        }
    }
    Tensor::new(vec![3, n], data).expect("shape")
}

/// `[3 × N]` raw coordinates.
pub fn coordinates(cloud: &PointCloud) -> Tensor {
    let n = cloud.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in cloud.points.iter().enumerate() {
        for k in 0..3 {
            data[k * n + i] = p[k];
        }
    }
    Tensor::new(vec![3, n], data).expect("shape")
}

/// `[d_a × N]` appearance input.
pub fn appearance_input(cloud: &PointCloud, config: &NetConfig) -> Result<Tensor> {
    let f = cloud
        .features
        .as_ref()
        .ok_or_else(|| Error::MissingInput("cloud has no appearance features".into()))?;
    if f.dim != config.appearance_dim {
        return Err(Error::MissingInput(format!(
            "appearance features have dimension {}, network expects {}",
            f.dim, config.appearance_dim
        )));
    }
    let (n, d) = (cloud.len(), f.dim);
    let mut data = vec![0.0; d * n];
    for i in 0..n {
        for (k, v) in f.row(i).iter().enumerate() {
            data[k * n + i] = *v;
        }
    }
    Tensor::new(vec![d, n], data)
}

fn branch(
    graph: &mut Graph,
    params: &Bound,
    config: &NetConfig,
    name: &str,
    input: Var,
    widths: [usize; 2],
) -> Result<Var> {
    let mut x = input;
    for (k, width) in widths.iter().enumerate() {
        x = params.conv(graph, &format!("{name}.conv{}", k + 1), x)?;
        x = graph.relu(x);
        let point = format!("{name}{}", k + 1);
        if config.pam.inserts_at(&point) {
            x = pam_forward(graph, params, &pam_prefix(&point), x, &config.pam.instance(*width))?.output;
        }
    }
    Ok(x)
}

/// Concatenated branch outputs `[fused × N]`.
pub fn fused_features(graph: &mut Graph, params: &Bound, config: &NetConfig, cloud: &PointCloud) -> Result<Var> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let app = appearance_input(cloud, config)?;
    let geo = graph.constant(geometry_input(cloud, config));
    let app = graph.constant(app);
    let geo = branch(graph, params, config, "geo", geo, config.geo_widths)?;
    let app = branch(graph, params, config, "app", app, config.app_widths)?;
    let fused = graph.concat_rows(geo, app)?;
    if !config.fuse {
        return Ok(fused);
    }
    let fused = params.conv(graph, "fuse.conv", fused)?;
    Ok(graph.relu(fused))
}

/// Per-point features `[2·fused × N]`: fused branch outputs stacked on the
/// broadcast global average.
pub fn extract_features(graph: &mut Graph, params: &Bound, config: &NetConfig, cloud: &PointCloud) -> Result<Var> {
    let fused = fused_features(graph, params, config, cloud)?;
    let global = graph.global_avg_pool(fused)?;
    let global = graph.broadcast_cols(global, cloud.len())?;
    graph.concat_rows(fused, global)
}

/// Graph handles of the dense heads.
#[derive(Clone, Copy, Debug)]
pub struct DenseHeads {
    /// `[4 × N]`, unit columns.
    pub quats: Var,
    /// `[3 × N]`, metres.
    pub trans: Var,
    /// `[1 × N]`, in `(0, 1)`.
    pub conf: Var,
}

fn head(graph: &mut Graph, params: &Bound, name: &str, object: usize, features: Var) -> Result<Var> {
    let h = params.conv(graph, &format!("head.{name}.hidden"), features)?;
    let h = graph.relu(h);
    params.conv(graph, &out_layer(name, object), h)
}

pub fn predict_dense(
    graph: &mut Graph,
    params: &Bound,
    config: &NetConfig,
    features: Var,
    cloud: &PointCloud,
    object: usize,
) -> Result<DenseHeads> {
    let fs = graph.shape(features).to_vec();
    if fs.len() != 2 || fs[1] != cloud.len() {
        return Err(Error::dim("predict_dense", &fs, &[3, cloud.len()]));
    }
    if object >= config.num_objects {
        return Err(Error::Config(format!("object index {object} out of range")));
    }
    let raw = head(graph, params, "rot", object, features)?;
    let quats = graph.normalize_cols(raw)?;
    let offset = head(graph, params, "trans", object, features)?;
    let offset = graph.scale(offset, config.offset_scale);
    let anchor = graph.constant(coordinates(cloud));
    let trans = graph.add(anchor, offset)?;
    let logits = head(graph, params, "conf", object, features)?;
    let conf = graph.sigmoid(logits);
    Ok(DenseHeads { quats, trans, conf })
}

/// Per-point hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub rotations: Vec<[f64; 4]>,
    pub translations: Vec<[f64; 3]>,
    pub confidences: Vec<f64>,
}

impl PredictionSet {
    pub fn from_graph(graph: &Graph, heads: &DenseHeads) -> Self {
        let q = graph.value(heads.quats);
        let t = graph.value(heads.trans);
        let c = graph.value(heads.conf);
        let n = q.cols();
        Self {
            rotations: (0..n).map(|i| [q.at(0, i), q.at(1, i), q.at(2, i), q.at(3, i)]).collect(),
            translations: (0..n).map(|i| [t.at(0, i), t.at(1, i), t.at(2, i)]).collect(),
            confidences: c.data().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

/// Inference with frozen parameters.
pub fn predict(params: &ParamSet, config: &NetConfig, cloud: &PointCloud, object: usize) -> Result<PredictionSet> {
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let features = extract_features(&mut graph, &bound, config, cloud)?;
    let heads = predict_dense(&mut graph, &bound, config, features, cloud, object)?;
    Ok(PredictionSet::from_graph(&graph, &heads))
}

/// Hypothesis with the highest confidence; ties go to the lowest index.
pub fn select_pose(preds: &PredictionSet) -> Result<(Pose, usize)> {
    let mut best: Option<usize> = None;
    for (i, &c) in preds.confidences.iter().enumerate() {
        if best.is_none_or(|b| c > preds.confidences[b]) {
            best = Some(i);
        }
    }
    let i = best.ok_or(Error::EmptyInput("prediction set"))?;
    Ok((Pose::new(preds.rotations[i], preds.translations[i])?, i))
}
