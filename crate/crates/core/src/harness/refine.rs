use crate::error::Result;
use crate::geometry::{compose_poses, PointCloud, Pose};
use crate::posenet::{refine_residual, NetConfig};
use crate::tensor::ParamSet;

/// Produces a camera-frame correction for the current estimate.
pub trait Refiner: Sync {
    /// Pose `Δ` such that `Δ ∘ current` is the improved estimate.
    fn residual(&self, current: &Pose, observed: &PointCloud) -> Result<Pose>;
}

/// Always returns the identity.
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn residual(&self, _current: &Pose, _observed: &PointCloud) -> Result<Pose> {
        Ok(Pose::identity())
    }
}

/// The trained residual network for one object.
pub struct LearnedRefiner<'a> {
    pub params: &'a ParamSet,
    pub config: NetConfig,
    pub object: usize,
}

impl Refiner for LearnedRefiner<'_> {
    /// The network predicts `D` in the estimate's object frame;
    /// `current ∘ D ∘ current⁻¹` expresses it in the camera frame.
    fn residual(&self, current: &Pose, observed: &PointCloud) -> Result<Pose> {
        let d = refine_residual(self.params, &self.config, observed, current, self.object)?;
        Ok(compose_poses(&compose_poses(current, &d), &current.inverse()))
    }
}

/// Applies `K` residuals, each composed on the left of the running estimate.
pub fn iterative_refine(initial: &Pose, observed: &PointCloud, refiner: &dyn Refiner, k: usize) -> Result<Pose> {
    let mut current = *initial;
    for _ in 0..k {
        let delta = refiner.residual(&current, observed)?;
        current = compose_poses(&delta, &current);
    }
    Ok(current)
}
