//! The γ-parameterized recursive ensemble filter.
//!
//! Each member evolves as
//!
//! ```text
//! X̃' = A(m̃ + K(z − Hm̃ + γ2 ζ̃)) + Cᵀ(X̃ − m̃) + γ1 ξ̃
//! ```
//!
//! where `m̃` is the sample mean, `K` the oracle or ensemble gain and `C` comes
//! from the configured solver. The ETKF variant replaces `Cᵀδ` by `δW`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gain::{
    etkf_transform, gamma_rhs, rhs_consistency, solve_denkf, solve_eakf_svd, solve_ensrf_serial, solve_sqrt_general,
    solve_stochastic, CtSolution, GammaPair, SolverKind,
};
use crate::kalman::{gain_schedule, kalman_gain, GainSchedule};
use crate::linalg::psd_sqrt;
use crate::model::{StepModel, SystemModel};
use crate::noise::{NoiseStreams, Substream};

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    /// `n × N`, column `j` is member `j`.
    pub members: DMatrix<f64>,
    pub t: usize,
}

impl EnsembleState {
    pub fn new(members: DMatrix<f64>, t: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::EnsembleTooSmall {
                n_members: members.ncols(),
                required: 2,
            });
        }
        if !members.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { name: "ensemble".into() });
        }
        Ok(Self { members, t })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Sample covariance with divisor `N − 1`.
    pub fn covariance(&self) -> DMatrix<f64> {
        sample_covariance(&anomalies(self).1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GainSource {
    Oracle,
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Application {
    StateSpace,
    Subspace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMode {
    Random,
    Deterministic,
}

/// One point of the EnKF family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantSpec {
    pub gammas: GammaPair,
    pub solver: SolverKind,
    pub gain_source: GainSource,
    pub application: Application,
}

impl VariantSpec {
    pub fn new(gammas: GammaPair, solver: SolverKind, gain_source: GainSource) -> Result<Self> {
        let application = if solver == SolverKind::Etkf {
            Application::Subspace
        } else {
            Application::StateSpace
        };
        let spec = Self {
            gammas,
            solver,
            gain_source,
            application,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Closed-form solvers with their implied gamma pair.
    pub fn with_solver(solver: SolverKind, gain_source: GainSource) -> Result<Self> {
        let gammas = solver.implied_gammas().ok_or_else(|| {
            Error::InvalidVariant(format!("solver {solver} needs an explicit gamma pair"))
        })?;
        Self::new(gammas, solver, gain_source)
    }

    pub fn check(&self) -> Result<()> {
        let app_ok = (self.solver == SolverKind::Etkf) == (self.application == Application::Subspace);
        if !app_ok {
            return Err(Error::InvalidVariant(format!(
                "solver {} cannot be applied in {:?}",
                self.solver, self.application
            )));
        }
        if let Some(implied) = self.solver.implied_gammas() {
            if implied != self.gammas {
                return Err(Error::InvalidVariant(format!(
                    "solver {} requires gammas ({}, {})",
                    self.solver,
                    implied.gamma1(),
                    implied.gamma2()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let source = match self.gain_source {
            GainSource::Oracle => "oracle",
            GainSource::Ensemble => "ensemble",
        };
        write!(f, "{}-{}", self.solver, source)
    }
}

/// Members drawn i.i.d. from `N(m0, Σ0)` on the copy-init substream.
pub fn init_ensemble_random(model: &SystemModel, n_members: usize, streams: &NoiseStreams) -> Result<EnsembleState> {
    if n_members < 2 {
        return Err(Error::EnsembleTooSmall {
            n_members,
            required: 2,
        });
    }
    let mut members = DMatrix::zeros(model.n(), n_members);
    for j in 0..n_members {
        let x = model.m0() + streams.gaussian(Substream::CopyInit, j as u64, 0, model.sigma0_sqrt());
        members.set_column(j, &x);
    }
    EnsembleState::new(members, 0)
}

/// First `rows` rows of the `(N−1) × N` Helmert matrix: orthonormal rows
/// orthogonal to the ones vector.
pub fn helmert_rows(n_members: usize, rows: usize) -> DMatrix<f64> {
    let rows = rows.min(n_members.saturating_sub(1));
    let mut v = DMatrix::zeros(rows, n_members);
    for k in 1..=rows {
        let kf = k as f64;
        let norm = (kf * (kf + 1.0)).sqrt();
        for j in 0..k {
            v[(k - 1, j)] = 1.0 / norm;
        }
        v[(k - 1, k)] = -kf / norm;
    }
    v
}

/// Ensemble whose sample mean is exactly `m0` and sample covariance exactly `Σ0`.
pub fn init_ensemble_deterministic(model: &SystemModel, n_members: usize) -> Result<EnsembleState> {
    let n = model.n();
    let required = (n + 1).max(2);
    if n_members < required {
        return Err(Error::EnsembleTooSmall { n_members, required });
    }
    let root = psd_sqrt(model.sigma0()).0;
    let delta = root * helmert_rows(n_members, n) * ((n_members - 1) as f64).sqrt();
    let mut members = delta;
    for mut col in members.column_iter_mut() {
        col += model.m0();
    }
    EnsembleState::new(members, 0)
}

/// Sample mean and centred anomaly matrix.
pub fn anomalies(ensemble: &EnsembleState) -> (DVector<f64>, DMatrix<f64>) {
    let mean = ensemble.members.column_mean();
    let mut delta = ensemble.members.clone();
    for mut col in delta.column_iter_mut() {
        col -= &mean;
    }
    let drift = delta.column_mean();
    for mut col in delta.column_iter_mut() {
        col -= &drift;
    }
    (mean, delta)
}

pub fn sample_covariance(delta: &DMatrix<f64>) -> DMatrix<f64> {
    let denom = (delta.ncols().max(2) - 1) as f64;
    let cov = delta * delta.transpose() / denom;
    (&cov + cov.transpose()) * 0.5
}

/// Covariance the gain (and `Γ`) are built from at step `t`.
fn source_covariance(
    delta: &DMatrix<f64>,
    schedule: Option<&GainSchedule>,
    spec: &VariantSpec,
    t: usize,
) -> Result<DMatrix<f64>> {
    match spec.gain_source {
        GainSource::Ensemble => Ok(sample_covariance(delta)),
        GainSource::Oracle => {
            let schedule = schedule
                .ok_or_else(|| Error::InvalidVariant("oracle gains require a gain schedule".into()))?;
            schedule.covs.get(t).cloned().ok_or(Error::LengthMismatch {
                what: "gain schedule",
                expected: t + 1,
                found: schedule.covs.len(),
            })
        }
    }
}

/// Gain used at step `t`: the scheduled oracle gain or `Σ̂Hᵀ(HΣ̂Hᵀ+R)^{-1}`.
pub fn effective_gain(
    ensemble: &EnsembleState,
    model: &SystemModel,
    schedule: Option<&GainSchedule>,
    spec: &VariantSpec,
) -> Result<DMatrix<f64>> {
    let t = ensemble.t;
    match spec.gain_source {
        GainSource::Oracle => {
            let schedule = schedule
                .ok_or_else(|| Error::InvalidVariant("oracle gains require a gain schedule".into()))?;
            schedule.gains.get(t).cloned().ok_or(Error::LengthMismatch {
                what: "gain schedule",
                expected: t + 1,
                found: schedule.gains.len(),
            })
        }
        GainSource::Ensemble => {
            let (_, delta) = anomalies(ensemble);
            kalman_gain(&sample_covariance(&delta), &model.at(t))
        }
    }
}

/// Solves for `C_t` with the given solver. `delta` is needed by `eakf_svd`.
pub fn solve_ct(
    solver: SolverKind,
    sigma: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    step: &StepModel,
    gammas: GammaPair,
    delta: Option<&DMatrix<f64>>,
) -> Result<CtSolution> {
    match solver {
        SolverKind::Stochastic => Ok(solve_stochastic(sigma, gain, step)),
        SolverKind::Denkf => Ok(solve_denkf(sigma, gain, step)),
        SolverKind::EnsrfScalar => Ok(solve_ensrf_serial(sigma, gain, step)?.1),
        SolverKind::SqrtGeneral => solve_sqrt_general(sigma, &gamma_rhs(sigma, gain, step, gammas), None),
        SolverKind::EakfSvd => {
            let delta = delta.ok_or_else(|| Error::InvalidVariant("eakf_svd needs ensemble anomalies".into()))?;
            solve_eakf_svd(delta, sigma, &gamma_rhs(sigma, gain, step, gammas))
        }
        SolverKind::Etkf => Err(Error::InvalidVariant(
            "etkf has no state-space C; use etkf_transform".into(),
        )),
    }
}

/// Applies the update to every column given already-transformed anomalies
/// (`Cᵀδ` or `δW`). Noise matrices are `n × N` and `m × N`.
fn update_columns(
    step: &StepModel,
    mean: &DVector<f64>,
    gain: &DMatrix<f64>,
    new_anomalies: &DMatrix<f64>,
    z: &DVector<f64>,
    xi: Option<&DMatrix<f64>>,
    zeta: Option<&DMatrix<f64>>,
    gammas: GammaPair,
) -> DMatrix<f64> {
    let ak = step.a * gain;
    let center = step.a * mean + &ak * (z - step.h * mean);
    let mut out = new_anomalies.clone();
    for mut col in out.column_iter_mut() {
        col += &center;
    }
    if let Some(zeta) = zeta {
        out += &ak * zeta * gammas.gamma2();
    }
    if let Some(xi) = xi {
        out += xi * gammas.gamma1();
    }
    out
}

/// Single-member form of the recursion,
/// `A(m̃ + K(z − Hm̃ + γ2ζ̃)) + Cᵀ(x − m̃) + γ1ξ̃`.
#[allow(clippy::too_many_arguments)]
pub fn member_update(
    step: &StepModel,
    mean: &DVector<f64>,
    gain: &DMatrix<f64>,
    c: &DMatrix<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    xi: &DVector<f64>,
    zeta: &DVector<f64>,
    gammas: GammaPair,
) -> DVector<f64> {
    let anomaly = DMatrix::from_column_slice(x.len(), 1, (c.transpose() * (x - mean)).as_slice());
    let xi = DMatrix::from_column_slice(xi.len(), 1, xi.as_slice());
    let zeta = DMatrix::from_column_slice(zeta.len(), 1, zeta.as_slice());
    update_columns(step, mean, gain, &anomaly, z, Some(&xi), Some(&zeta), gammas).column(0).into_owned()
}

/// Per-step solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub t: usize,
    pub gain: DMatrix<f64>,
    /// `‖CᵀΣC − Γ‖_F`, or the ETKF subspace residual.
    pub ct_residual: f64,
    /// `‖Γ + γ1²Q + γ2²AKRKᵀAᵀ − Riccati(Σ)‖_F`.
    pub rhs_residual: f64,
    pub clipped_eigenvalue: f64,
}

fn copy_matrix(streams: &NoiseStreams, sub: Substream, t: usize, factor: &DMatrix<f64>, n_members: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(factor.nrows(), n_members);
    for j in 0..n_members {
        out.set_column(j, &streams.gaussian(sub, j as u64, t as u64, factor));
    }
    out
}

/// One analysis-plus-forecast step of the filter.
pub fn enkf_step(
    ensemble: &EnsembleState,
    z: &DVector<f64>,
    model: &SystemModel,
    schedule: Option<&GainSchedule>,
    spec: &VariantSpec,
    streams: &NoiseStreams,
) -> Result<(EnsembleState, StepDiagnostics)> {
    spec.check()?;
    let t = ensemble.t;
    model.check_horizon(t + 1)?;
    let step = model.at(t);
    if z.len() != step.m() {
        return Err(Error::LengthMismatch {
            what: "observation",
            expected: step.m(),
            found: z.len(),
        });
    }
    let (mean, delta) = anomalies(ensemble);
    let sigma = source_covariance(&delta, schedule, spec, t)?;
    let gain = match spec.gain_source {
        GainSource::Oracle => effective_gain(ensemble, model, schedule, spec)?,
        GainSource::Ensemble => kalman_gain(&sigma, &step)?,
    };
    let gammas = spec.gammas;
    let (new_anomalies, ct_residual, clipped) = match spec.application {
        Application::StateSpace => {
            let sol = solve_ct(spec.solver, &sigma, &gain, &step, gammas, Some(&delta))?;
            (sol.c.transpose() * &delta, sol.residual, sol.clipped_eigenvalue)
        }
        Application::Subspace => {
            let gamma = gamma_rhs(&sigma, &gain, &step, gammas);
            let tr = etkf_transform(&delta, &gamma)?;
            (&delta * &tr.w, tr.subspace_residual, tr.clipped_eigenvalue)
        }
    };
    let rhs_residual = rhs_consistency(&sigma, &gain, &step, gammas)?;
    let n_members = ensemble.size();
    let xi = (gammas.gamma1() != 0.0).then(|| copy_matrix(streams, Substream::CopyProcess, t, step.q_sqrt, n_members));
    let zeta =
        (gammas.gamma2() != 0.0).then(|| copy_matrix(streams, Substream::CopyMeasurement, t, step.r_sqrt, n_members));
    let members = update_columns(&step, &mean, &gain, &new_anomalies, z, xi.as_ref(), zeta.as_ref(), gammas);
    let next = EnsembleState::new(members, t + 1)?;
    Ok((
        next,
        StepDiagnostics {
            t,
            gain,
            ct_residual,
            rhs_residual,
            clipped_eigenvalue: clipped,
        },
    ))
}

/// Ensemble trajectory and per-step diagnostics of one filter run.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRun {
    pub ensembles: Vec<EnsembleState>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub schedule: Option<GainSchedule>,
}

impl FilterRun {
    pub fn means(&self) -> Vec<DVector<f64>> {
        self.ensembles.iter().map(EnsembleState::mean).collect()
    }

    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.ensembles.iter().map(EnsembleState::covariance).collect()
    }
}

/// Runs the filter over all observations. Oracle gains are computed
/// internally from the model.
pub fn run_filter(
    model: &SystemModel,
    observations: &[DVector<f64>],
    spec: &VariantSpec,
    n_members: usize,
    init: InitMode,
    streams: &NoiseStreams,
) -> Result<FilterRun> {
    spec.check()?;
    let horizon = observations.len();
    model.check_horizon(horizon)?;
    let schedule = match spec.gain_source {
        GainSource::Oracle => Some(gain_schedule(model, horizon)?),
        GainSource::Ensemble => None,
    };
    let mut ensemble = match init {
        InitMode::Random => init_ensemble_random(model, n_members, streams)?,
        InitMode::Deterministic => init_ensemble_deterministic(model, n_members)?,
    };
    let mut ensembles = Vec::with_capacity(horizon + 1);
    let mut diagnostics = Vec::with_capacity(horizon);
    for (t, z) in observations.iter().enumerate() {
        let (next, diag) =
            enkf_step(&ensemble, z, model, schedule.as_ref(), spec, streams).map_err(|e| e.at_step(t))?;
        diagnostics.push(diag);
        ensembles.push(std::mem::replace(&mut ensemble, next));
    }
    ensembles.push(ensemble);
    Ok(FilterRun {
        ensembles,
        diagnostics,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::run_kf;
    use crate::linalg::rel_frobenius;
    use approx::assert_relative_eq;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn det_spec(solver: SolverKind, source: GainSource) -> VariantSpec {
        VariantSpec::new(GammaPair::DETERMINISTIC, solver, source).unwrap()
    }

    #[test]
    fn variant_invariants() {
        assert!(VariantSpec::new(GammaPair::DETERMINISTIC, SolverKind::Stochastic, GainSource::Oracle).is_err());
        assert!(VariantSpec::new(GammaPair::STOCHASTIC, SolverKind::Denkf, GainSource::Oracle).is_err());
        assert!(VariantSpec::with_solver(SolverKind::SqrtGeneral, GainSource::Oracle).is_err());
        let etkf = det_spec(SolverKind::Etkf, GainSource::Ensemble);
        assert_eq!(etkf.application, Application::Subspace);
        let mut bad = etkf;
        bad.application = Application::StateSpace;
        assert!(bad.check().is_err());
    }

    #[test]
    fn helmert_rows_orthonormal_and_centred() {
        for n in 2..7 {
            let v = helmert_rows(n, n - 1);
            assert_relative_eq!(&v * v.transpose(), DMatrix::identity(n - 1, n - 1), epsilon = 1e-14);
            assert!(v.column_sum().amax() < 1e-14);
        }
    }

    #[test]
    fn deterministic_init_has_exact_moments() {
        let model = SystemModel::scalar_benchmark();
        let ens = init_ensemble_deterministic(&model, 3).unwrap();
        assert!(ens.mean()[0].abs() < 1e-15);
        assert_relative_eq!(ens.covariance()[(0, 0)], 1.0, epsilon = 1e-14);

        let model = SystemModel::random_stable(5, 2, 0.9, 0.1, 1.0, 2).unwrap();
        let ens = init_ensemble_deterministic(&model, 6).unwrap();
        assert!(rel_frobenius(&ens.covariance(), model.sigma0()) < 1e-12);
        assert_eq!(
            init_ensemble_deterministic(&model, 5).unwrap_err(),
            Error::EnsembleTooSmall { n_members: 5, required: 6 }
        );
    }

    #[test]
    fn zero_prior_covariance_collapses_members() {
        let model = SystemModel::new(m1(1.0), m1(1.0), m1(0.0), m1(1.0), DVector::from_element(1, 2.5), m1(0.0)).unwrap();
        for ens in [
            init_ensemble_deterministic(&model, 4).unwrap(),
            init_ensemble_random(&model, 4, &NoiseStreams::new(3)).unwrap(),
        ] {
            assert!(ens.members.iter().all(|&x| x == 2.5));
        }
    }

    #[test]
    fn random_init_reproducible() {
        let model = SystemModel::random_stable(3, 1, 0.9, 0.1, 1.0, 1).unwrap();
        let a = init_ensemble_random(&model, 20, &NoiseStreams::new(9)).unwrap();
        let b = init_ensemble_random(&model, 20, &NoiseStreams::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(init_ensemble_random(&model, 1, &NoiseStreams::new(9)).is_err());
    }

    #[test]
    fn random_init_moments() {
        let s0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let model = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            m1(1.0),
            DVector::zeros(2),
            s0.clone(),
        )
        .unwrap();
        let n = 100_000;
        let ens = init_ensemble_random(&model, n, &NoiseStreams::new(17)).unwrap();
        assert!((ens.covariance() - &s0).norm() <= 5.0 / (n as f64).sqrt() * s0.norm());
    }

    #[test]
    fn two_point_anomalies() {
        let ens = EnsembleState::new(DMatrix::from_row_slice(1, 2, &[1.0, 3.0]), 0).unwrap();
        let (mean, delta) = anomalies(&ens);
        assert_eq!(mean[0], 2.0);
        assert_eq!(delta, DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
        let flat = EnsembleState::new(DMatrix::from_element(2, 4, 0.7), 0).unwrap();
        assert_eq!(anomalies(&flat).1, DMatrix::zeros(2, 4));
    }

    #[test]
    fn ensemble_gain_matches_oracle_at_exact_moments() {
        let model = SystemModel::scalar_benchmark();
        let ens = init_ensemble_deterministic(&model, 3).unwrap();
        let schedule = gain_schedule(&model, 1).unwrap();
        let k_oracle = effective_gain(&ens, &model, Some(&schedule), &det_spec(SolverKind::SqrtGeneral, GainSource::Oracle)).unwrap();
        assert_relative_eq!(k_oracle[(0, 0)], 0.5, epsilon = 1e-15);
        let k_ens = effective_gain(&ens, &model, None, &det_spec(SolverKind::SqrtGeneral, GainSource::Ensemble)).unwrap();
        assert_relative_eq!(k_ens, k_oracle, epsilon = 1e-12);

        let flat = EnsembleState::new(DMatrix::zeros(1, 3), 0).unwrap();
        let k = effective_gain(&flat, &model, None, &det_spec(SolverKind::SqrtGeneral, GainSource::Ensemble)).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn deterministic_step_scalar() {
        let model = SystemModel::scalar_benchmark();
        let ens = init_ensemble_deterministic(&model, 3).unwrap();
        let schedule = gain_schedule(&model, 1).unwrap();
        let spec = det_spec(SolverKind::SqrtGeneral, GainSource::Oracle);
        let (next, diag) = enkf_step(&ens, &DVector::from_element(1, 1.0), &model, Some(&schedule), &spec, &NoiseStreams::new(0)).unwrap();
        assert_relative_eq!(next.mean()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(next.covariance()[(0, 0)], 0.5, epsilon = 1e-12);
        assert!(diag.ct_residual < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn deterministic_mean_bookkeeping() {
        let model = SystemModel::random_stable(3, 2, 0.9, 0.2, 0.5, 8).unwrap();
        let ens = init_ensemble_random(&model, 7, &NoiseStreams::new(1)).unwrap();
        let spec = det_spec(SolverKind::SqrtGeneral, GainSource::Ensemble);
        let z = DVector::from_vec(vec![0.4, -1.2]);
        let (next, diag) = enkf_step(&ens, &z, &model, None, &spec, &NoiseStreams::new(1)).unwrap();
        let step = model.at(0);
        let m = ens.mean();
        let expected = step.a * (&m + &diag.gain * (&z - step.h * &m));
        assert_relative_eq!(next.mean(), expected, epsilon = 1e-12);
    }

    #[test]
    fn stochastic_member_update_expands_to_perturbed_observation_form() {
        let model = SystemModel::random_stable(3, 2, 0.9, 0.2, 0.5, 4).unwrap();
        let streams = NoiseStreams::new(5);
        let ens = init_ensemble_random(&model, 6, &streams).unwrap();
        let schedule = gain_schedule(&model, 1).unwrap();
        let spec = VariantSpec::with_solver(SolverKind::Stochastic, GainSource::Oracle).unwrap();
        let z = DVector::from_vec(vec![1.0, -0.5]);
        let (next, _) = enkf_step(&ens, &z, &model, Some(&schedule), &spec, &streams).unwrap();
        let step = model.at(0);
        let k = &schedule.gains[0];
        for j in 0..6 {
            let (xi, zeta) = crate::noise::draw_copies(&streams, &model, j, 0);
            let x = ens.members.column(j).into_owned();
            let expected = step.a * (&x + k * (&z - step.h * &x + zeta)) + xi;
            assert_relative_eq!(next.members.column(j).into_owned(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn run_filter_tracks_kf_deterministically() {
        let model = SystemModel::scalar_benchmark();
        let streams = NoiseStreams::new(42);
        let traj = crate::model::simulate_truth(&model, 50, &streams).unwrap();
        let (beliefs, _) = run_kf(&model, &traj.observations).unwrap();
        let spec = det_spec(SolverKind::SqrtGeneral, GainSource::Oracle);
        let run = run_filter(&model, &traj.observations, &spec, 3, InitMode::Deterministic, &streams).unwrap();
        for (t, ens) in run.ensembles.iter().enumerate() {
            assert!((ens.mean() - &beliefs[t].mean).amax() < 1e-10);
            assert!((ens.covariance() - &beliefs[t].cov).amax() < 1e-10);
        }
    }

    #[test]
    fn run_filter_empty_and_reproducible() {
        let model = SystemModel::scalar_benchmark();
        let streams = NoiseStreams::new(1);
        let spec = VariantSpec::with_solver(SolverKind::Stochastic, GainSource::Ensemble).unwrap();
        let run = run_filter(&model, &[], &spec, 5, InitMode::Random, &streams).unwrap();
        assert_eq!(run.ensembles.len(), 1);
        let traj = crate::model::simulate_truth(&model, 10, &streams).unwrap();
        let a = run_filter(&model, &traj.observations, &spec, 5, InitMode::Random, &streams).unwrap();
        let b = run_filter(&model, &traj.observations, &spec, 5, InitMode::Random, &streams).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ensrf_and_sqrt_general_agree_in_scalar_case() {
        let model = SystemModel::new(m1(0.9), m1(1.0), m1(0.3), m1(0.5), DVector::zeros(1), m1(1.0)).unwrap();
        let streams = NoiseStreams::new(77);
        let traj = crate::model::simulate_truth(&model, 30, &streams).unwrap();
        let ensrf = VariantSpec::with_solver(SolverKind::EnsrfScalar, GainSource::Ensemble).unwrap();
        let sqrt = VariantSpec::new(GammaPair::NO_PERTURBED_OBS, SolverKind::SqrtGeneral, GainSource::Ensemble).unwrap();
        let a = run_filter(&model, &traj.observations, &ensrf, 8, InitMode::Random, &streams).unwrap();
        let b = run_filter(&model, &traj.observations, &sqrt, 8, InitMode::Random, &streams).unwrap();
        for (ea, eb) in a.ensembles.iter().zip(&b.ensembles) {
            assert!((&ea.members - &eb.members).amax() < 1e-10);
        }
    }

    #[test]
    fn singular_innovation_aborts_with_step() {
        let model = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-16]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let spec = det_spec(SolverKind::SqrtGeneral, GainSource::Ensemble);
        let err = run_filter(&model, &[DVector::zeros(2)], &spec, 4, InitMode::Deterministic, &NoiseStreams::new(0)).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 0, .. }));
        assert!(err.is_numerical());
    }
}
