//! Estimation/control duality.
//!
//! The linear functional `aᵀX_T` is estimated by a batch estimator whose
//! weights come from backward-in-time dual processes. With the Kalman gains
//! as feedback the batch estimator reproduces the Kalman mean; with the
//! noise-copy weights `c, v, w` built from `C_t` it reproduces one member of
//! the recursive ensemble filter. Both facts are checked here numerically.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{helmert_rows, member_update, solve_ct, VariantSpec};
use crate::error::{Error, Result};
use crate::gain::{GammaPair, SolverKind};
use crate::kalman::{run_kf, GainSchedule};
use crate::linalg::psd_sqrt;
use crate::model::{simulate_truth, SystemModel};
use crate::noise::{draw_copies, NoiseStreams, Substream};

/// Weights of the augmented batch estimator for the direction `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualControls {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub u: Vec<DVector<f64>>,
    pub c: DVector<f64>,
    pub v: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub gammas: GammaPair,
}

impl DualControls {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

/// Backward transition products `Φ_{T,t}` and `Ψ_{T,t}` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionProducts {
    pub phi: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
}

impl TransitionProducts {
    pub fn horizon(&self) -> usize {
        self.phi.len() - 1
    }
}

/// Realized noise copies for one member: `X̃_0`, `ξ̃_t`, `ζ̃_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCopies {
    pub x0: DVector<f64>,
    pub xi: Vec<DVector<f64>>,
    pub zeta: Vec<DVector<f64>>,
}

impl NoiseCopies {
    pub fn zeros(model: &SystemModel, horizon: usize) -> Self {
        Self {
            x0: model.m0().clone(),
            xi: vec![DVector::zeros(model.n()); horizon],
            zeta: vec![DVector::zeros(model.m()); horizon],
        }
    }

    /// Copies for `member` drawn from the copy substreams.
    pub fn draw(model: &SystemModel, horizon: usize, streams: &NoiseStreams, member: usize) -> Self {
        let x0 = model.m0() + streams.gaussian(Substream::CopyInit, member as u64, 0, model.sigma0_sqrt());
        let (xi, zeta) = (0..horizon).map(|t| draw_copies(streams, model, member, t)).unzip();
        Self { x0, xi, zeta }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { what, expected, found })
    }
}

/// Dual state `y_t` driven backward from `y_T = a` by arbitrary controls `u`:
/// `y_t = Aᵀy_{t+1} + Hᵀu_t`.
pub fn dual_trajectory(model: &SystemModel, a: &DVector<f64>, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let horizon = u.len();
    model.check_horizon(horizon)?;
    let mut y = vec![a.clone(); horizon + 1];
    for t in (0..horizon).rev() {
        let step = model.at(t);
        y[t] = step.a.transpose() * &y[t + 1] + step.h.transpose() * &u[t];
    }
    Ok(y)
}

/// Optimal dual process with feedback `u_t = −K_tᵀAᵀy_{t+1}`.
/// Returns `(y_0..y_T, u_0..u_{T-1}, b = y_0)`.
pub fn backward_dual(
    model: &SystemModel,
    schedule: &GainSchedule,
    a: &DVector<f64>,
    horizon: usize,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>)> {
    if schedule.gains.len() < horizon {
        return Err(Error::LengthMismatch {
            what: "gain schedule",
            expected: horizon,
            found: schedule.gains.len(),
        });
    }
    model.check_horizon(horizon)?;
    let mut y = vec![a.clone(); horizon + 1];
    let mut u = vec![DVector::zeros(model.m()); horizon];
    for t in (0..horizon).rev() {
        let step = model.at(t);
        let ay = step.a.transpose() * &y[t + 1];
        u[t] = -(schedule.gains[t].transpose() * &ay);
        y[t] = ay + step.h.transpose() * &u[t];
    }
    let b = y[0].clone();
    Ok((y, u, b))
}

/// `y_0ᵀΣ0y_0 + Σ_t (y_{t+1}ᵀQy_{t+1} + u_tᵀRu_t)`, the mean-squared error of
/// the classic estimator written as an LQ cost.
pub fn dual_cost(model: &SystemModel, y: &[DVector<f64>], u: &[DVector<f64>]) -> Result<f64> {
    check_len("dual state", u.len() + 1, y.len())?;
    model.check_horizon(u.len())?;
    let mut cost = y[0].dot(&(model.sigma0() * &y[0]));
    for (t, ut) in u.iter().enumerate() {
        let step = model.at(t);
        cost += y[t + 1].dot(&(step.q * &y[t + 1])) + ut.dot(&(step.r * ut));
    }
    Ok(cost)
}

/// Builds `Φ_{T,t} = (I − H_tᵀK_tᵀ)A_tᵀ Φ_{T,t+1}` and `Ψ_{T,t} = C_t Ψ_{T,t+1}`.
pub fn build_transitions(
    model: &SystemModel,
    schedule: &GainSchedule,
    c_list: &[DMatrix<f64>],
    horizon: usize,
) -> Result<TransitionProducts> {
    check_len("C_t list", horizon, c_list.len())?;
    if schedule.gains.len() < horizon {
        return Err(Error::LengthMismatch {
            what: "gain schedule",
            expected: horizon,
            found: schedule.gains.len(),
        });
    }
    model.check_horizon(horizon)?;
    let n = model.n();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut phi = vec![eye.clone(); horizon + 1];
    let mut psi = vec![eye.clone(); horizon + 1];
    for t in (0..horizon).rev() {
        let step = model.at(t);
        let closed = (&eye - step.h.transpose() * schedule.gains[t].transpose()) * step.a.transpose();
        phi[t] = closed * &phi[t + 1];
        psi[t] = &c_list[t] * &psi[t + 1];
    }
    Ok(TransitionProducts { phi, psi })
}

/// Optimal estimator weights for direction `a`:
/// `b = Φ_{T,0}a`, `u_t = −K_tᵀAᵀΦ_{T,t+1}a`, `c = Ψ_{T,0}a`,
/// `v_t = γ1Ψ_{T,t+1}a`, `w_t = γ2K_tᵀAᵀΨ_{T,t+1}a`.
pub fn optimal_controls(
    model: &SystemModel,
    schedule: &GainSchedule,
    transitions: &TransitionProducts,
    a: &DVector<f64>,
    gammas: GammaPair,
) -> DualControls {
    let horizon = transitions.horizon();
    let mut u = Vec::with_capacity(horizon);
    let mut v = Vec::with_capacity(horizon);
    let mut w = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let step = model.at(t);
        let kta = schedule.gains[t].transpose() * step.a.transpose();
        let y_next = &transitions.phi[t + 1] * a;
        let eta_next = &transitions.psi[t + 1] * a;
        u.push(-(&kta * y_next));
        w.push(&kta * &eta_next * gammas.gamma2());
        v.push(eta_next * gammas.gamma1());
    }
    DualControls {
        a: a.clone(),
        b: &transitions.phi[0] * a,
        c: &transitions.psi[0] * a,
        u,
        v,
        w,
        gammas,
    }
}

/// Augmented estimator
/// `S̃_T = bᵀm0 − Σu_tᵀZ_t + cᵀ(X̃0 − m0) + Σv_tᵀξ̃_t + Σw_tᵀζ̃_t`.
pub fn batch_estimate(
    controls: &DualControls,
    observations: &[DVector<f64>],
    copies: &NoiseCopies,
    model: &SystemModel,
) -> Result<f64> {
    let horizon = controls.horizon();
    check_len("observations", horizon, observations.len())?;
    check_len("process-noise copies", horizon, copies.xi.len())?;
    check_len("measurement-noise copies", horizon, copies.zeta.len())?;
    let m0 = model.m0();
    let mut s = controls.b.dot(m0) + controls.c.dot(&(&copies.x0 - m0));
    for t in 0..horizon {
        s += -controls.u[t].dot(&observations[t]) + controls.v[t].dot(&copies.xi[t]) + controls.w[t].dot(&copies.zeta[t]);
    }
    Ok(s)
}

/// Vector form of the optimal estimator:
/// `Φ_{T,0}ᵀm0 + ΣΦ_{T,t+1}ᵀAK_tZ_t + Ψ_{T,0}ᵀ(X̃0−m0) + γ1ΣΨ_{T,t+1}ᵀξ̃_t + γ2ΣΨ_{T,t+1}ᵀAK_tζ̃_t`.
pub fn batch_state(
    transitions: &TransitionProducts,
    schedule: &GainSchedule,
    model: &SystemModel,
    observations: &[DVector<f64>],
    copies: &NoiseCopies,
    gammas: GammaPair,
) -> Result<DVector<f64>> {
    let horizon = transitions.horizon();
    check_len("observations", horizon, observations.len())?;
    check_len("process-noise copies", horizon, copies.xi.len())?;
    check_len("measurement-noise copies", horizon, copies.zeta.len())?;
    let m0 = model.m0();
    let mut x = transitions.phi[0].transpose() * m0 + transitions.psi[0].transpose() * (&copies.x0 - m0);
    for t in 0..horizon {
        let ak = model.at(t).a * &schedule.gains[t];
        x += transitions.phi[t + 1].transpose() * (&ak * &observations[t]);
        let psi_t = transitions.psi[t + 1].transpose();
        x += &psi_t * &copies.xi[t] * gammas.gamma1();
        x += psi_t * (ak * &copies.zeta[t]) * gammas.gamma2();
    }
    Ok(x)
}

/// `|cᵀΣ0c + Σv_tᵀQv_t + Σw_tᵀRw_t − aᵀΣ_Ta|`: the second-moment matching gap.
pub fn second_moment_identity(controls: &DualControls, model: &SystemModel, schedule: &GainSchedule) -> Result<f64> {
    let horizon = controls.horizon();
    if schedule.covs.len() <= horizon {
        return Err(Error::LengthMismatch {
            what: "gain schedule covariances",
            expected: horizon + 1,
            found: schedule.covs.len(),
        });
    }
    let mut total = controls.c.dot(&(model.sigma0() * &controls.c));
    for t in 0..horizon {
        let step = model.at(t);
        total += controls.v[t].dot(&(step.q * &controls.v[t])) + controls.w[t].dot(&(step.r * &controls.w[t]));
    }
    let target = controls.a.dot(&(&schedule.covs[horizon] * &controls.a));
    Ok((total - target).abs())
}

/// Anomaly matrix with `n + 1` columns whose sample covariance is exactly `sigma`.
pub fn exact_anomalies(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let members = n + 1;
    psd_sqrt(sigma).0 * helmert_rows(members, n) * (n as f64).sqrt()
}

/// `C_0..C_{T-1}` from the oracle covariances for the given variant. The
/// `eakf_svd` route sees an exact-moment ensemble for each `Σ_t`.
pub fn ct_sequence(model: &SystemModel, schedule: &GainSchedule, spec: &VariantSpec, horizon: usize) -> Result<Vec<DMatrix<f64>>> {
    if spec.solver == SolverKind::Etkf {
        return Err(Error::InvalidVariant("etkf acts in ensemble space and has no C_t".into()));
    }
    (0..horizon)
        .map(|t| {
            let sigma = &schedule.covs[t];
            let delta = exact_anomalies(sigma);
            solve_ct(spec.solver, sigma, &schedule.gains[t], &model.at(t), spec.gammas, Some(&delta))
                .map(|s| s.c)
                .map_err(|e| e.at_step(t))
        })
        .collect()
}

/// Runs the recursive filter for one member (with the conditional mean
/// `m̃_t = m_t` and oracle gains) alongside the batch estimator on the same
/// observations and noise copies, for every direction `e_i` and every horizon
/// `0..=T`. Returns the largest absolute deviation.
pub fn verify_batch_recursive(model: &SystemModel, spec: &VariantSpec, horizon: usize, seed: u64) -> Result<f64> {
    spec.check()?;
    let streams = NoiseStreams::new(seed);
    let truth = simulate_truth(model, horizon, &streams)?;
    let observations = &truth.observations;
    let (beliefs, schedule) = run_kf(model, observations)?;
    let c_list = ct_sequence(model, &schedule, spec, horizon)?;
    let copies = NoiseCopies::draw(model, horizon, &streams, 0);

    let mut recursive = vec![copies.x0.clone()];
    for t in 0..horizon {
        let next = member_update(
            &model.at(t),
            &beliefs[t].mean,
            &schedule.gains[t],
            &c_list[t],
            &recursive[t],
            &observations[t],
            &copies.xi[t],
            &copies.zeta[t],
            spec.gammas,
        );
        recursive.push(next);
    }

    let n = model.n();
    let mut worst = 0.0f64;
    for tau in 0..=horizon {
        let transitions = build_transitions(model, &schedule, &c_list[..tau], tau)?;
        let prefix = NoiseCopies {
            x0: copies.x0.clone(),
            xi: copies.xi[..tau].to_vec(),
            zeta: copies.zeta[..tau].to_vec(),
        };
        for i in 0..n {
            let a = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
            let controls = optimal_controls(model, &schedule, &transitions, &a, spec.gammas);
            let s = batch_estimate(&controls, &observations[..tau], &prefix, model)?;
            worst = worst.max((recursive[tau][i] - s).abs());
        }
    }
    Ok(worst)
}
