use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_lr, RunConfig};
use crate::data::{gen_classification_set, ShapeLabel};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::par;
use crate::posenet::{classify, classify_logits, init_classifier, softmax_cross_entropy, ClassifierConfig};
use crate::tensor::{derive_seed, Adam, Graph, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyArm {
    pub name: String,
    pub params: usize,
    pub accuracy: f64,
    /// Held-out accuracy per class, in `ShapeLabel::ALL` order.
    pub per_class: Vec<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub seed: u64,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub arms: Vec<ClassifyArm>,
}

impl ClassifyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,params,accuracy");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for a in &self.arms {
            let _ = write!(s, "{},{},{}", a.name, a.params, a.accuracy);
            for v in &a.per_class {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn arm(&self, name: &str) -> Option<&ClassifyArm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn train_classifier(
    cfg: &ClassifierConfig,
    run: &RunConfig,
    train: &[(PointCloud, ShapeLabel)],
) -> Result<(ParamSet, Vec<f64>)> {
    let mut params = init_classifier(cfg, derive_seed(run.seed, "classifier"))?;
    let mut adam = Adam::new(run.classify.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "classify/order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..run.classify.epochs {
        adam.lr = epoch_lr(run.classify.lr, run.classify.lr_final, epoch, run.classify.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (i, &k) in order.iter().enumerate() {
            let (cloud, label) = &train[k];
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph);
            let logits = classify_logits(&mut graph, &bound, cfg, cloud)?;
            let loss = softmax_cross_entropy(&mut graph, logits, label.index())?;
            let value = graph.value(loss).item();
            let grads = bound.gradients(&params, &graph.backward(loss)?);
            if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    step,
                    epoch,
                    scene: i,
                    loss: value,
                });
            }
            adam.step(&mut params, &grads);
            total += value;
            step += 1;
        }
        curve.push(total / train.len() as f64);
    }
    Ok((params, curve))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains the classifier with and without attention on the same data and
/// initial backbone, and scores both on a held-out set.
pub fn classify_experiment(run: &RunConfig) -> Result<ClassifyReport> {
    run.validate()?;
    let c = &run.classify;
    let train = gen_classification_set(c.train_per_class, c.points, derive_seed(run.seed, "classify/train"))?;
    let test = gen_classification_set(c.test_per_class, c.points, derive_seed(run.seed, "classify/test"))?;
    let arms = [("pointnet", run.classifier(false)), ("pointnet+pam", run.classifier(true))];
    let results = par::map(&arms, |(name, cfg)| -> Result<ClassifyArm> {
        let (params, loss_curve) = train_classifier(cfg, run, &train)?;
        let predictions = par::map(&test, |(cloud, _)| classify(&params, cfg, cloud).map(|p| argmax(&p)));
        let mut hits = [0usize; 3];
        let mut totals = [0usize; 3];
        for (pred, (_, label)) in predictions.into_iter().zip(&test) {
            totals[label.index()] += 1;
            if pred? == label.index() {
                hits[label.index()] += 1;
            }
        }
        Ok(ClassifyArm {
            name: name.to_string(),
            params: params.count(),
            accuracy: hits.iter().sum::<usize>() as f64 / test.len() as f64,
            per_class: hits.iter().zip(&totals).map(|(h, t)| *h as f64 / *t as f64).collect(),
            loss_curve,
        })
    });
    Ok(ClassifyReport {
        seed: run.seed,
        config_hash: run.hash(),
        classes: ShapeLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        arms: results.into_iter().collect::<Result<_>>()?,
    })
}
