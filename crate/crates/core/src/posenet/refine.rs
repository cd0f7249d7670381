//! Global residual head on top of the shared backbone.
//!
//! The observed cloud is first mapped back into the object frame by the
//! current estimate. The head then predicts a single pose `D` in that frame.
//! `D` is the identity when the estimate is already exact. The output layer
//! starts at zero weights with an identity bias, so an untrained refiner
//! leaves poses unchanged.

use super::{fused_features, out_layer, NetConfig};
use crate::error::{Error, Result};
use crate::geometry::{transform_points, PointCloud, Pose};
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

pub(super) fn init_heads(p: &mut ParamSet, config: &NetConfig, seed: u64) {
    let h = config.head_width;
    p.insert_conv("head.refine.hidden", config.fused_width(), h, seed);
    for k in 0..config.num_objects {
        let rot = out_layer("refine.rot", k);
        p.insert(format!("{rot}.w"), Tensor::zeros(&[4, h]));
        p.insert(format!("{rot}.b"), Tensor::vector(&[1.0, 0.0, 0.0, 0.0]));
        let trans = out_layer("refine.trans", k);
        p.insert(format!("{trans}.w"), Tensor::zeros(&[3, h]));
        p.insert(format!("{trans}.b"), Tensor::zeros(&[3]));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualHeads {
    /// `[4 × 1]`, unit.
    pub quat: Var,
    /// `[3 × 1]`, metres.
    pub trans: Var,
}

/// `cloud` must already be in the object frame of the current estimate.
pub fn refine_forward(
    graph: &mut Graph,
    params: &Bound,
    config: &NetConfig,
    cloud: &PointCloud,
    object: usize,
) -> Result<ResidualHeads> {
    if !config.refiner {
        return Err(Error::Config("refine_forward needs a refiner network".into()));
    }
    if object >= config.num_objects {
        return Err(Error::Config(format!("object index {object} out of range")));
    }
    let fused = fused_features(graph, params, config, cloud)?;
    let global = graph.global_avg_pool(fused)?;
    let h = params.conv(graph, "head.refine.hidden", global)?;
    let h = graph.relu(h);
    let raw = params.conv(graph, &out_layer("refine.rot", object), h)?;
    let quat = graph.normalize_cols(raw)?;
    let t = params.conv(graph, &out_layer("refine.trans", object), h)?;
    let trans = graph.scale(t, config.offset_scale);
    Ok(ResidualHeads { quat, trans })
}

/// Object-frame residual `D` for the camera-frame cloud `observed` under `current`.
pub fn refine_residual(
    params: &ParamSet,
    config: &NetConfig,
    observed: &PointCloud,
    current: &Pose,
    object: usize,
) -> Result<Pose> {
    let local = transform_points(&current.inverse(), observed);
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let heads = refine_forward(&mut graph, &bound, config, &local, object)?;
    let q = graph.value(heads.quat).data();
    let t = graph.value(heads.trans).data();
    Pose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
}
