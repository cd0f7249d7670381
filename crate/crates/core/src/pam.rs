//! Point attention module.
//!
//! A feature map `F` (`C` channels by `N` points) is re-weighted by an
//! attention map built from two paths:
//!
//! * the channel path pools `F` over points and passes the `C`-vector
//!   through a bottleneck MLP (`C → C/r → C`), giving one logit per channel;
//! * the geometric path runs a stack of pointwise convolutions
//!   (`C → C/r → … → 1`), giving one logit per point.
//!
//! The logits are broadcast to `C × N`, summed, and squashed once with a
//! sigmoid. The module output is `F + F ⊗ A(F)`, evaluated as `F·(1 + A)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamSet, Var};

/// Settings shared by every module instance in a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PamSettings {
    pub reduction_ratio: usize,
    /// Pointwise convolutions in the geometric path, output layer included.
    pub gap_convs: usize,
    /// Layer names after which a module is inserted.
    pub insertion_points: Vec<String>,
    pub enable_cap: bool,
    pub enable_gap: bool,
}

impl Default for PamSettings {
    fn default() -> Self {
        Self {
            reduction_ratio: 16,
            gap_convs: 3,
            insertion_points: vec!["geo1".into(), "app1".into()],
            enable_cap: true,
            enable_gap: true,
        }
    }
}

impl PamSettings {
    /// No attention anywhere.
    pub fn disabled() -> Self {
        Self {
            enable_cap: false,
            enable_gap: false,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.enable_cap || self.enable_gap
    }

    pub fn inserts_at(&self, layer: &str) -> bool {
        self.is_active() && self.insertion_points.iter().any(|p| p == layer)
    }

    pub fn instance(&self, channels: usize) -> PamConfig {
        PamConfig {
            channels,
            reduction_ratio: self.reduction_ratio,
            gap_convs: self.gap_convs,
            enable_cap: self.enable_cap,
            enable_gap: self.enable_gap,
        }
    }
}

/// Shape of one module instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PamConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub gap_convs: usize,
    pub enable_cap: bool,
    pub enable_gap: bool,
}

impl PamConfig {
    pub fn new(channels: usize, reduction_ratio: usize) -> Self {
        Self {
            channels,
            reduction_ratio,
            gap_convs: 3,
            enable_cap: true,
            enable_gap: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::Config("pam.reduction_ratio must be at least 1".into()));
        }
        if self.channels == 0 || self.channels % self.reduction_ratio != 0 {
            return Err(Error::Config(format!(
                "pam.reduction_ratio {} must divide the channel count {}",
                self.reduction_ratio, self.channels
            )));
        }
        if self.gap_convs < 2 {
            return Err(Error::Config(format!(
                "pam.gap_convs must be at least 2, got {}",
                self.gap_convs
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction_ratio
    }
}

/// Exact weight-plus-bias count of one module instance.
pub fn pam_param_count(config: &PamConfig) -> usize {
    let (c, h) = (config.channels, config.hidden());
    let mut total = 0;
    if config.enable_cap {
        total += c * h + h + h * c + c;
    }
    if config.enable_gap {
        total += c * h + h;
        total += config.gap_convs.saturating_sub(2) * (h * h + h);
        total += h + 1;
    }
    total
}

fn cap_fc(prefix: &str, k: usize) -> String {
    format!("{prefix}.cap.fc{k}")
}

fn gap_conv(prefix: &str, k: usize) -> String {
    format!("{prefix}.gap.conv{k}")
}

/// Registers the parameters of one instance under `prefix`.
pub fn init_pam(params: &mut ParamSet, prefix: &str, config: &PamConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let (c, h) = (config.channels, config.hidden());
    if config.enable_cap {
        params.insert_conv(&cap_fc(prefix, 1), c, h, seed);
        params.insert_conv(&cap_fc(prefix, 2), h, c, seed);
    }
    if config.enable_gap {
        params.insert_conv(&gap_conv(prefix, 1), c, h, seed);
        for k in 2..config.gap_convs {
            params.insert_conv(&gap_conv(prefix, k), h, h, seed);
        }
        params.insert_conv(&gap_conv(prefix, config.gap_convs), h, 1, seed);
    }
    Ok(())
}

fn check_channels(graph: &Graph, features: Var, config: &PamConfig) -> Result<()> {
    let shape = graph.shape(features);
    if shape.len() != 2 || shape[0] != config.channels {
        return Err(Error::dim("pam", shape, &[config.channels]));
    }
    Ok(())
}

/// Channel logits `[C]`: pool, dense, relu, dense. No sigmoid.
pub fn cap_forward(graph: &mut Graph, params: &Bound, prefix: &str, features: Var, config: &PamConfig) -> Result<Var> {
    check_channels(graph, features, config)?;
    let pooled = graph.global_avg_pool(features)?;
    let hidden = params.conv(graph, &cap_fc(prefix, 1), pooled)?;
    let hidden = graph.relu(hidden);
    let logits = params.conv(graph, &cap_fc(prefix, 2), hidden)?;
    graph.reshape(logits, vec![config.channels])
}

/// Point logits `[1 × N]` from the pointwise stack. No sigmoid.
pub fn gap_forward(graph: &mut Graph, params: &Bound, prefix: &str, features: Var, config: &PamConfig) -> Result<Var> {
    check_channels(graph, features, config)?;
    let mut x = features;
    for k in 1..config.gap_convs {
        x = params.conv(graph, &gap_conv(prefix, k), x)?;
        x = graph.relu(x);
    }
    params.conv(graph, &gap_conv(prefix, config.gap_convs), x)
}

/// `A[c, n] = σ(cap[c] + gap[0, n])`.
pub fn combine_paths(graph: &mut Graph, cap_logits: Var, gap_logits: Var) -> Result<Var> {
    let sum = graph.add(cap_logits, gap_logits)?;
    Ok(graph.sigmoid(sum))
}

/// `F·(1 + A)`.
pub fn apply_attention(graph: &mut Graph, features: Var, attention: Var) -> Result<Var> {
    graph.gate(features, attention)
}

pub struct PamOutput {
    pub output: Var,
    /// `None` when both paths are disabled.
    pub attention: Option<Var>,
}

/// Full module. With both paths disabled the input passes through untouched.
pub fn pam_forward(graph: &mut Graph, params: &Bound, prefix: &str, features: Var, config: &PamConfig) -> Result<PamOutput> {
    let cap = if config.enable_cap {
        Some(cap_forward(graph, params, prefix, features, config)?)
    } else {
        None
    };
    let gap = if config.enable_gap {
        Some(gap_forward(graph, params, prefix, features, config)?)
    } else {
        None
    };
    let attention = match (cap, gap) {
        (Some(c), Some(g)) => Some(combine_paths(graph, c, g)?),
        (Some(logits), None) | (None, Some(logits)) => Some(graph.sigmoid(logits)),
        (None, None) => None,
    };
    let output = match attention {
        Some(a) => apply_attention(graph, features, a)?,
        None => features,
    };
    Ok(PamOutput { output, attention })
}
