//! Evaluation metrics and the run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::losses::{add_loss, adds_loss, ObjectModel};

pub const AUC_MAX_THRESHOLD: f64 = 0.10;
pub const ACCURACY_THRESHOLD: f64 = 0.02;

/// ADD for asymmetric objects, ADD-S for symmetric ones.
pub fn pose_error(model: &ObjectModel, gt: &Pose, pred: &Pose) -> f64 {
    if model.symmetric {
        adds_loss(model, gt, pred)
    } else {
        add_loss(model, gt, pred)
    }
}

fn check_errors(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list"));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::Contract(format!("pose errors must be non-negative, got {e}")));
    }
    Ok(())
}

/// Area under the accuracy-vs-threshold step function, with its breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct AucCurve {
    pub auc: f64,
    /// Thresholds where accuracy changes, ascending, all below `max_threshold`.
    pub thresholds: Vec<f64>,
    /// Accuracy just above each threshold.
    pub accuracy: Vec<f64>,
}

/// `acc(τ) = |{e < τ}| / n`, integrated exactly over `[0, max_threshold]`
/// and divided by `max_threshold`.
pub fn auc_curve(errors: &[f64], max_threshold: f64) -> Result<AucCurve> {
    check_errors(errors)?;
    if !(max_threshold > 0.0) {
        return Err(Error::Contract(format!("max_threshold must be positive, got {max_threshold}")));
    }
    let n = errors.len() as f64;
    let mut sorted: Vec<f64> = errors.iter().copied().filter(|&e| e < max_threshold).collect();
    sorted.sort_by(f64::total_cmp);
    let area = sorted.iter().fold(0.0, |acc, e| acc + (max_threshold - e)) / n;
    let mut thresholds = Vec::new();
    let mut accuracy = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        if sorted.get(i + 1) == Some(&e) {
            continue;
        }
        thresholds.push(e);
        accuracy.push((i + 1) as f64 / n);
    }
    Ok(AucCurve {
        auc: (area / max_threshold).clamp(0.0, 1.0),
        thresholds,
        accuracy,
    })
}

/// `|{e < threshold}| / n`.
pub fn accuracy_at_threshold(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors)?;
    Ok(errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object: String,
    pub scenes: usize,
    /// AUC of ADD(-S): ADD-S for symmetric objects, ADD otherwise.
    pub auc: f64,
    pub add_auc: f64,
    pub adds_auc: f64,
    pub acc_at_2cm: f64,
    /// Mean ADD(-S) in metres.
    pub mean_error: f64,
    pub diameter: f64,
}

impl ObjectMetrics {
    /// Metrics over paired ground truths and predictions.
    pub fn compute(model: &ObjectModel, gts: &[Pose], preds: &[Pose]) -> Result<Self> {
        if gts.len() != preds.len() {
            return Err(Error::dim("object metrics", &[gts.len()], &[preds.len()]));
        }
        let add: Vec<f64> = gts.iter().zip(preds).map(|(g, p)| add_loss(model, g, p)).collect();
        let adds: Vec<f64> = gts.iter().zip(preds).map(|(g, p)| adds_loss(model, g, p)).collect();
        let err = if model.symmetric { &adds } else { &add };
        Ok(Self {
            object: model.id.clone(),
            scenes: gts.len(),
            auc: auc_curve(err, AUC_MAX_THRESHOLD)?.auc,
            add_auc: auc_curve(&add, AUC_MAX_THRESHOLD)?.auc,
            adds_auc: auc_curve(&adds, AUC_MAX_THRESHOLD)?.auc,
            acc_at_2cm: accuracy_at_threshold(err, ACCURACY_THRESHOLD)?,
            mean_error: err.iter().sum::<f64>() / err.len() as f64,
            diameter: model.diameter,
        })
    }

    pub fn relative_error(&self) -> f64 {
        self.mean_error / self.diameter
    }
}

/// Unweighted means over objects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: f64,
    pub add_auc: f64,
    pub adds_auc: f64,
    pub acc_at_2cm: f64,
    pub mean_error: f64,
    /// Mean of `mean_error / diameter`.
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub objects: Vec<ObjectMetrics>,
    pub mean: Aggregate,
}

impl MetricBlock {
    pub fn new(objects: Vec<ObjectMetrics>) -> Self {
        let n = objects.len().max(1) as f64;
        let avg = |f: fn(&ObjectMetrics) -> f64| objects.iter().map(f).sum::<f64>() / n;
        let mean = Aggregate {
            auc: avg(|o| o.auc),
            add_auc: avg(|o| o.add_auc),
            adds_auc: avg(|o| o.adds_auc),
            acc_at_2cm: avg(|o| o.acc_at_2cm),
            mean_error: avg(|o| o.mean_error),
            relative_error: avg(ObjectMetrics::relative_error),
        };
        Self { objects, mean }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub refine_iters: usize,
    pub loss_w: f64,
    pub param_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metadata: RunMetadata,
    pub unrefined: MetricBlock,
    pub refined: MetricBlock,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and schema-checks a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        validate_report(&value)?;
        Ok(serde_json::from_value(value)?)
    }

    /// One row per object, unrefined then refined columns, plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "object,auc,add_auc,adds_auc,acc_at_2cm,mean_error,refined_auc,refined_add_auc,refined_adds_auc,refined_acc_at_2cm,refined_mean_error\n",
        );
        let empty = ObjectMetrics {
            object: String::new(),
            scenes: 0,
            auc: f64::NAN,
            add_auc: f64::NAN,
            adds_auc: f64::NAN,
            acc_at_2cm: f64::NAN,
            mean_error: f64::NAN,
            diameter: f64::NAN,
        };
        for (i, u) in self.unrefined.objects.iter().enumerate() {
            let r = self.refined.objects.get(i).unwrap_or(&empty);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                u.object,
                u.auc,
                u.add_auc,
                u.adds_auc,
                u.acc_at_2cm,
                u.mean_error,
                r.auc,
                r.add_auc,
                r.adds_auc,
                r.acc_at_2cm,
                r.mean_error
            );
        }
        let (u, r) = (&self.unrefined.mean, &self.refined.mean);
        let _ = writeln!(
            out,
            "mean,{},{},{},{},{},{},{},{},{},{}",
            u.auc,
            u.add_auc,
            u.adds_auc,
            u.acc_at_2cm,
            u.mean_error,
            r.auc,
            r.add_auc,
            r.adds_auc,
            r.acc_at_2cm,
            r.mean_error
        );
        out
    }
}

fn schema_error(path: &str, what: &str) -> Error {
    Error::Contract(format!("report schema: `{path}` {what}"))
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema_error(&format!("{path}.{key}"), "is missing"))
}

fn number(obj: &Value, path: &str, key: &str) -> Result<f64> {
    field(obj, path, key)?
        .as_f64()
        .ok_or_else(|| schema_error(&format!("{path}.{key}"), "must be a number"))
}

fn fraction(obj: &Value, path: &str, key: &str) -> Result<()> {
    let v = number(obj, path, key)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(schema_error(&format!("{path}.{key}"), "must lie in [0, 1]"));
    }
    Ok(())
}

fn non_negative(obj: &Value, path: &str, key: &str) -> Result<()> {
    if !(number(obj, path, key)? >= 0.0) {
        return Err(schema_error(&format!("{path}.{key}"), "must be non-negative"));
    }
    Ok(())
}

fn validate_block(block: &Value, path: &str) -> Result<()> {
    let objects = field(block, path, "objects")?
        .as_array()
        .ok_or_else(|| schema_error(&format!("{path}.objects"), "must be an array"))?;
    for (i, o) in objects.iter().enumerate() {
        let p = format!("{path}.objects[{i}]");
        if !field(o, &p, "object")?.is_string() {
            return Err(schema_error(&format!("{p}.object"), "must be a string"));
        }
        if field(o, &p, "scenes")?.as_u64().is_none() {
            return Err(schema_error(&format!("{p}.scenes"), "must be a non-negative integer"));
        }
        for k in ["auc", "add_auc", "adds_auc", "acc_at_2cm"] {
            fraction(o, &p, k)?;
        }
        non_negative(o, &p, "mean_error")?;
        non_negative(o, &p, "diameter")?;
    }
    let mean = field(block, path, "mean")?;
    let p = format!("{path}.mean");
    for k in ["auc", "add_auc", "adds_auc", "acc_at_2cm"] {
        fraction(mean, &p, k)?;
    }
    non_negative(mean, &p, "mean_error")?;
    non_negative(mean, &p, "relative_error")
}

/// Structural and range checks on a serialized [`MetricReport`].
pub fn validate_report(value: &Value) -> Result<()> {
    if !value.is_object() {
        return Err(schema_error("$", "must be an object"));
    }
    let meta = field(value, "$", "metadata")?;
    if field(meta, "$.metadata", "seed")?.as_u64().is_none() {
        return Err(schema_error("$.metadata.seed", "must be a non-negative integer"));
    }
    if !field(meta, "$.metadata", "config_hash")?.is_string() {
        return Err(schema_error("$.metadata.config_hash", "must be a string"));
    }
    if field(meta, "$.metadata", "refine_iters")?.as_u64().is_none() {
        return Err(schema_error("$.metadata.refine_iters", "must be a non-negative integer"));
    }
    number(meta, "$.metadata", "loss_w")?;
    let counts = field(meta, "$.metadata", "param_counts")?
        .as_object()
        .ok_or_else(|| schema_error("$.metadata.param_counts", "must be an object"))?;
    if let Some((k, _)) = counts.iter().find(|(_, v)| v.as_u64().is_none()) {
        return Err(schema_error(&format!("$.metadata.param_counts.{k}"), "must be an integer"));
    }
    let unrefined = field(value, "$", "unrefined")?;
    let refined = field(value, "$", "refined")?;
    validate_block(unrefined, "$.unrefined")?;
    validate_block(refined, "$.refined")?;
    let ids = |b: &Value| -> Vec<Value> {
        b["objects"].as_array().unwrap().iter().map(|o| o["object"].clone()).collect()
    };
    if ids(unrefined) != ids(refined) {
        return Err(schema_error("$.refined.objects", "must list the same objects as `unrefined`"));
    }
    Ok(())
}
