//! Shared-MLP point classifier with one attention module in the middle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::pam::{init_pam, pam_forward, PamSettings};
use crate::tensor::{Bound, CustomBackward, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub head_width: usize,
    pub num_classes: usize,
    /// Only the `mid` insertion point exists here.
    pub pam: PamSettings,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: [64, 64, 128],
            head_width: 64,
            num_classes: 3,
            pam: PamSettings {
                insertion_points: vec!["mid".into()],
                ..PamSettings::default()
            },
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.head_width == 0 || self.num_classes < 2 {
            return Err(Error::Config("classifier widths must be positive and classes ≥ 2".into()));
        }
        if let Some(p) = self.pam.insertion_points.iter().find(|p| *p != "mid") {
            return Err(Error::Config(format!("unknown classifier insertion point `{p}`")));
        }
        if self.uses_pam() {
            self.pam.instance(self.widths[1]).validate()?;
        }
        Ok(())
    }

    fn uses_pam(&self) -> bool {
        self.pam.inserts_at("mid")
    }
}

pub fn init_classifier(config: &ClassifierConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let [w1, w2, w3] = config.widths;
    let mut p = ParamSet::new();
    p.insert_conv("cls.conv1", 3, w1, seed);
    p.insert_conv("cls.conv2", w1, w2, seed);
    if config.uses_pam() {
        init_pam(&mut p, "pam.mid", &config.pam.instance(w2), seed)?;
    }
    p.insert_conv("cls.conv3", w2, w3, seed);
    p.insert_conv("cls.fc1", w3, config.head_width, seed);
    p.insert_conv("cls.fc2", config.head_width, config.num_classes, seed);
    Ok(p)
}

/// Centred and scaled into the unit ball.
fn normalized_input(cloud: &PointCloud) -> Tensor {
    let c = cloud.centroid();
    let n = cloud.len();
    let radius = cloud
        .points
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let mut data = vec![0.0; 3 * n];
    for (i, p) in cloud.points.iter().enumerate() {
        for k in 0..3 {
            data[k * n + i] = (p[k] - c[k]) * s;
        }
    }
    Tensor::new(vec![3, n], data).expect("shape")
}

/// Class logits `[K]`.
pub fn classify_logits(graph: &mut Graph, params: &Bound, config: &ClassifierConfig, cloud: &PointCloud) -> Result<Var> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let x = graph.constant(normalized_input(cloud));
    let x = params.conv(graph, "cls.conv1", x)?;
    let x = graph.relu(x);
    let x = params.conv(graph, "cls.conv2", x)?;
    let mut x = graph.relu(x);
    if config.uses_pam() {
        x = pam_forward(graph, params, "pam.mid", x, &config.pam.instance(config.widths[1]))?.output;
    }
    let x = params.conv(graph, "cls.conv3", x)?;
    let x = graph.relu(x);
    let x = graph.global_max_pool(x)?;
    let x = params.conv(graph, "cls.fc1", x)?;
    let x = graph.relu(x);
    let x = params.conv(graph, "cls.fc2", x)?;
    graph.reshape(x, vec![config.num_classes])
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

struct SoftmaxCrossEntropy {
    probs: Vec<f64>,
    label: usize,
}

impl CustomBackward for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let g = grad_out.item();
        let data = self
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| g * (p - if k == self.label { 1.0 } else { 0.0 }))
            .collect();
        vec![Tensor::new(inputs[0].shape().to_vec(), data).expect("logit grad")]
    }
}

/// `−log softmax(logits)[label]` as a scalar.
pub fn softmax_cross_entropy(graph: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let z = graph.value(logits);
    if z.shape().len() != 1 || label >= z.len() {
        return Err(Error::dim("softmax_cross_entropy", z.shape(), &[label]));
    }
    let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - z.data()[label];
    let rule = SoftmaxCrossEntropy {
        probs: softmax(z.data()),
        label,
    };
    Ok(graph.custom(vec![logits], Tensor::scalar(loss), Box::new(rule)))
}

/// Class probabilities.
pub fn classify(params: &ParamSet, config: &ClassifierConfig, cloud: &PointCloud) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let logits = classify_logits(&mut graph, &bound, config, cloud)?;
    Ok(softmax(graph.value(logits).data()))
}
