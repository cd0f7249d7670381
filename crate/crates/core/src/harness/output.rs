use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LossPoint, TrainOutcome};
use crate::error::Result;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const CHECKPOINT: &str = "model.ckpt";

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("phase,epoch,lr,mean_loss\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.phase, p.epoch, p.lr, p.mean_loss);
    }
    s
}

/// Writes the report, per-object CSV, loss curve and checkpoint into `dir`.
/// Returns the checkpoint path.
pub fn write_run_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_JSON), outcome.report.to_json()?)?;
    fs::write(dir.join(REPORT_CSV), outcome.report.to_csv())?;
    fs::write(dir.join(LOSS_CURVE), loss_curve_csv(&outcome.curve))?;
    let path = dir.join(CHECKPOINT);
    outcome.model.to_checkpoint()?.save(&path)?;
    Ok(path)
}
