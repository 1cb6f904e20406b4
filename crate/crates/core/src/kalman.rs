//! Exact Kalman filter: gain, mean update and Riccati covariance recursion.
//! Serves as ground truth for every ensemble variant.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, symmetrize};
use crate::model::{StepModel, SystemModel};

/// Largest accepted condition number of `HΣHᵀ + R`.
pub const MAX_INNOVATION_CONDITION: f64 = 1e14;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gains `K_0..K_{T-1}` and covariances `Σ_0..Σ_T` of one oracle run.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

/// `(HΣHᵀ + R)^{-1} HΣ`, i.e. `Kᵀ`, by Cholesky solve.
fn gain_transpose(sigma: &DMatrix<f64>, step: &StepModel) -> Result<DMatrix<f64>> {
    let hs = step.h * sigma;
    let innovation = symmetrize(&(&hs * step.h.transpose() + step.r));
    let ev = sym_eigenvalues(&innovation);
    let (lmin, lmax) = (ev[0], ev[ev.len() - 1]);
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= MAX_INNOVATION_CONDITION) {
        return Err(Error::SingularInnovation { condition });
    }
    let chol = innovation
        .cholesky()
        .ok_or(Error::SingularInnovation { condition })?;
    Ok(chol.solve(&hs))
}

/// `K = ΣHᵀ(HΣHᵀ + R)^{-1}`.
pub fn kalman_gain(sigma: &DMatrix<f64>, step: &StepModel) -> Result<DMatrix<f64>> {
    Ok(gain_transpose(sigma, step)?.transpose())
}

/// `Σ' = AΣAᵀ + Q − AΣHᵀ(HΣHᵀ+R)^{-1}HΣAᵀ`, symmetrized.
pub fn riccati_step(sigma: &DMatrix<f64>, step: &StepModel) -> Result<DMatrix<f64>> {
    let kt = gain_transpose(sigma, step)?;
    Ok(riccati_with_gain(sigma, &kt.transpose(), step))
}

/// Riccati map for a precomputed optimal gain.
pub fn riccati_with_gain(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel) -> DMatrix<f64> {
    let a = step.a;
    let hs = step.h * sigma;
    let next = a * sigma * a.transpose() + step.q - a * gain * hs * a.transpose();
    symmetrize(&next)
}

/// `m' = A(m + K(z − Hm))`.
pub fn kf_mean_step(belief: &GaussianBelief, z: &DVector<f64>, step: &StepModel) -> Result<DVector<f64>> {
    let gain = kalman_gain(&belief.cov, step)?;
    Ok(mean_with_gain(&belief.mean, z, &gain, step))
}

pub fn mean_with_gain(mean: &DVector<f64>, z: &DVector<f64>, gain: &DMatrix<f64>, step: &StepModel) -> DVector<f64> {
    step.a * (mean + gain * (z - step.h * mean))
}

/// Runs the filter over `observations`. `beliefs[t]` is the law of `X_t`
/// given `Z_{0:t-1}`.
pub fn run_kf(model: &SystemModel, observations: &[DVector<f64>]) -> Result<(Vec<GaussianBelief>, GainSchedule)> {
    let horizon = observations.len();
    model.check_horizon(horizon)?;
    let mut beliefs = Vec::with_capacity(horizon + 1);
    let mut gains = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon + 1);
    let mut belief = GaussianBelief {
        mean: model.m0().clone(),
        cov: model.sigma0().clone(),
    };
    for (t, z) in observations.iter().enumerate() {
        let step = model.at(t);
        if z.len() != step.m() {
            return Err(Error::LengthMismatch {
                what: "observation",
                expected: step.m(),
                found: z.len(),
            }
            .at_step(t));
        }
        let gain = kalman_gain(&belief.cov, &step).map_err(|e| e.at_step(t))?;
        let next = GaussianBelief {
            mean: mean_with_gain(&belief.mean, z, &gain, &step),
            cov: riccati_with_gain(&belief.cov, &gain, &step),
        };
        covs.push(belief.cov.clone());
        gains.push(gain);
        beliefs.push(std::mem::replace(&mut belief, next));
    }
    covs.push(belief.cov.clone());
    beliefs.push(belief);
    Ok((beliefs, GainSchedule { gains, covs }))
}

/// Covariance-only oracle: `Σ_0..Σ_T` and `K_0..K_{T-1}` without data.
pub fn gain_schedule(model: &SystemModel, horizon: usize) -> Result<GainSchedule> {
    model.check_horizon(horizon)?;
    let mut covs = vec![model.sigma0().clone()];
    let mut gains = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let step = model.at(t);
        let sigma = &covs[t];
        let gain = kalman_gain(sigma, &step).map_err(|e| e.at_step(t))?;
        let next = riccati_with_gain(sigma, &gain, &step);
        gains.push(gain);
        covs.push(next);
    }
    Ok(GainSchedule { gains, covs })
}
