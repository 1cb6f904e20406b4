use std::fmt;

use dualenkf::dual::{
    backward_dual, build_transitions, ct_sequence, dual_cost, dual_trajectory, exact_anomalies, optimal_controls,
    second_moment_identity, verify_batch_recursive,
};
use dualenkf::gain::{gamma_rhs, rhs_consistency, solve_denkf, solve_ensrf_serial};
use dualenkf::kalman::{gain_schedule, riccati_step};
use dualenkf::linalg::min_eigenvalue;
use dualenkf::{
    ensemble::solve_ct, GainSchedule, GainSource, GammaPair, NoiseStreams, SolverKind, Substream, SystemModel,
    VariantSpec,
};
use nalgebra::DVector;

use crate::scenario::Scenario;

/// Longest horizon used by the control-side checks.
pub const LQ_HORIZON: usize = 20;
/// Longest horizon used by the batch/recursive comparison.
pub const BATCH_HORIZON: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    AtMost,
    Above,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub error: Option<String>,
}

impl Check {
    fn measured(name: impl Into<String>, measured: f64, tolerance: f64, comparison: Comparison) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            comparison,
            error: None,
        }
    }

    fn from_result(name: impl Into<String>, result: dualenkf::Result<f64>, tolerance: f64, comparison: Comparison) -> Self {
        match result {
            Ok(v) => Self::measured(name, v, tolerance, comparison),
            Err(e) => Self {
                name: name.into(),
                measured: f64::NAN,
                tolerance,
                comparison,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none()
            && match self.comparison {
                Comparison::AtMost => self.measured <= self.tolerance,
                Comparison::Above => self.measured > self.tolerance,
            }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let op = match self.comparison {
            Comparison::AtMost => "<=",
            Comparison::Above => ">",
        };
        match &self.error {
            Some(e) => write!(f, "{status}  {:<36} error: {e}", self.name),
            None => write!(
                f,
                "{status}  {:<36} measured {:>12.3e}  (need {op} {:.1e})",
                self.name, self.measured, self.tolerance
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn basis(n: usize, i: usize) -> DVector<f64> {
    DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 })
}

fn rel(value: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        value / scale
    } else {
        value
    }
}

fn ensrf_applicable(model: &SystemModel, horizon: usize) -> bool {
    model.m() == 1
        || (0..horizon).all(|t| {
            let r = model.at(t).r;
            (0..r.nrows()).all(|i| (0..r.ncols()).all(|j| i == j || r[(i, j)] == 0.0))
        })
}

/// Variants with an exact `C_t`, for the moment and batch checks.
fn exact_variants(model: &SystemModel, horizon: usize) -> Vec<(&'static str, VariantSpec)> {
    let mk = |g1, g2, solver| VariantSpec::new(GammaPair::new(g1, g2).unwrap(), solver, GainSource::Oracle).unwrap();
    let mut out = vec![("stochastic", mk(1.0, 1.0, SolverKind::Stochastic))];
    if ensrf_applicable(model, horizon) {
        out.push(("ensrf_scalar", mk(1.0, 0.0, SolverKind::EnsrfScalar)));
    }
    out.push(("sqrt_general", mk(0.5, 0.5, SolverKind::SqrtGeneral)));
    out.push(("eakf_svd", mk(0.0, 0.0, SolverKind::EakfSvd)));
    out
}

fn lq_checks(model: &SystemModel, schedule: &GainSchedule, horizon: usize, seed: u64) -> dualenkf::Result<(f64, f64)> {
    let n = model.n();
    let streams = NoiseStreams::new(seed).for_replicate(u64::MAX);
    let mut worst_value = 0.0f64;
    let mut least_increase = f64::INFINITY;
    for i in 0..n {
        let a = basis(n, i);
        let (y, u, _) = backward_dual(model, schedule, &a, horizon)?;
        let opt = dual_cost(model, &y, &u)?;
        let value = a.dot(&(&schedule.covs[horizon] * &a));
        worst_value = worst_value.max(rel((opt - value).abs(), value.abs()));
        for k in 0..10u64 {
            let up: Vec<_> = u
                .iter()
                .enumerate()
                .map(|(t, ut)| {
                    let z = streams.standard_normals(Substream::CopyMeasurement, i as u64 * 10 + k, t as u64, ut.len());
                    ut + z * 0.5
                })
                .collect();
            let yp = dual_trajectory(model, &a, &up)?;
            let cost = dual_cost(model, &yp, &up)?;
            least_increase = least_increase.min(rel(cost - opt, opt.abs()));
        }
    }
    Ok((worst_value, least_increase))
}

fn second_moment_check(model: &SystemModel, schedule: &GainSchedule, spec: &VariantSpec, horizon: usize) -> dualenkf::Result<f64> {
    let c_list = ct_sequence(model, schedule, spec, horizon)?;
    let transitions = build_transitions(model, schedule, &c_list, horizon)?;
    let n = model.n();
    let mut worst = 0.0f64;
    for i in 0..n {
        let a = basis(n, i);
        let controls = optimal_controls(model, schedule, &transitions, &a, spec.gammas);
        let target = schedule.covs[horizon][(i, i)];
        worst = worst.max(rel(second_moment_identity(&controls, model, schedule)?, target));
    }
    Ok(worst)
}

fn grid(points: usize) -> Vec<GammaPair> {
    let axis: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    axis.iter()
        .flat_map(|&a| axis.iter().map(move |&b| GammaPair::new(a, b).unwrap()))
        .collect()
}

fn rhs_grid_check(model: &SystemModel, schedule: &GainSchedule, horizon: usize) -> dualenkf::Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let step = model.at(t);
        let sigma = &schedule.covs[t];
        let scale = riccati_step(sigma, &step)?.norm();
        for g in grid(5) {
            worst = worst.max(rel(rhs_consistency(sigma, &schedule.gains[t], &step, g)?, scale));
        }
    }
    Ok(worst)
}

/// Largest relative `‖CᵀΣC − Γ‖` over the schedule for one solver and gamma pair.
fn residual_check(
    model: &SystemModel,
    schedule: &GainSchedule,
    horizon: usize,
    solver: SolverKind,
    gammas: GammaPair,
) -> dualenkf::Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let step = model.at(t);
        let sigma = &schedule.covs[t];
        let gain = &schedule.gains[t];
        let gamma = gamma_rhs(sigma, gain, &step, gammas);
        let delta = exact_anomalies(sigma);
        let sol = solve_ct(solver, sigma, gain, &step, gammas, Some(&delta)).map_err(|e| e.at_step(t))?;
        worst = worst.max(rel(sol.residual, gamma.norm()));
    }
    Ok(worst)
}

/// DEnKF leaves `¼AKHΣHᵀKᵀAᵀ` unmatched, with a PSD sign. Returns the larger of
/// the relative mismatch and the relative negative part.
fn denkf_check(model: &SystemModel, schedule: &GainSchedule, horizon: usize) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let step = model.at(t);
        let sigma = &schedule.covs[t];
        let gain = &schedule.gains[t];
        let sol = solve_denkf(sigma, gain, &step);
        let akh = step.a * gain * step.h;
        let dropped = (&akh * sigma * akh.transpose() * 0.25).norm();
        let excess = sol.c.transpose() * sigma * &sol.c - gamma_rhs(sigma, gain, &step, GammaPair::NO_PERTURBED_OBS);
        let negative = (-min_eigenvalue(&excess)).max(0.0);
        let scale = dropped.max(sigma.norm() * f64::EPSILON);
        worst = worst.max(rel((sol.residual - dropped).abs(), scale)).max(rel(negative, scale));
    }
    worst
}

/// Scalar systems only: the EnSRF closed form and the general square root pick
/// the same `C`.
fn ensrf_agreement(model: &SystemModel, schedule: &GainSchedule, horizon: usize) -> dualenkf::Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let step = model.at(t);
        let sigma = &schedule.covs[t];
        let gain = &schedule.gains[t];
        let (_, ensrf) = solve_ensrf_serial(sigma, gain, &step)?;
        let general = solve_ct(SolverKind::SqrtGeneral, sigma, gain, &step, GammaPair::NO_PERTURBED_OBS, None)?;
        worst = worst.max((ensrf.c - general.c).amax());
    }
    Ok(worst)
}

fn max_negative_eigenvalue(schedule: &GainSchedule) -> f64 {
    schedule
        .covs
        .iter()
        .map(|s| rel((-min_eigenvalue(s)).max(0.0), s.norm()))
        .fold(0.0, f64::max)
}

/// Runs the identity checks on the scenario's model. Every failure, including
/// a singular innovation, is reported as a failed check.
pub fn verify_suite(scenario: &Scenario) -> VerifyReport {
    verify_model(&scenario.model, scenario.horizon, scenario.seed)
}

pub fn verify_model(model: &SystemModel, horizon: usize, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    let lq_horizon = horizon.clamp(1, LQ_HORIZON);
    let batch_horizon = horizon.min(BATCH_HORIZON);
    let schedule = match model.check_horizon(lq_horizon).and_then(|_| gain_schedule(model, lq_horizon)) {
        Ok(s) => s,
        Err(e) => {
            checks.push(Check::from_result("riccati_schedule", Err(e), 1e-12, Comparison::AtMost));
            return VerifyReport { checks };
        }
    };
    checks.push(Check::measured(
        "riccati_schedule",
        max_negative_eigenvalue(&schedule),
        1e-12,
        Comparison::AtMost,
    ));

    match lq_checks(model, &schedule, lq_horizon, seed) {
        Ok((value, increase)) => {
            checks.push(Check::measured("lq_value_identity", value, 1e-10, Comparison::AtMost));
            checks.push(Check::measured("lq_perturbation_increase", increase, 0.0, Comparison::Above));
        }
        Err(e) => checks.push(Check::from_result("lq_value_identity", Err(e), 1e-10, Comparison::AtMost)),
    }

    checks.push(Check::from_result(
        "rhs_consistency_grid",
        rhs_grid_check(model, &schedule, lq_horizon),
        1e-12,
        Comparison::AtMost,
    ));

    checks.push(Check::from_result(
        "residual/stochastic",
        residual_check(model, &schedule, lq_horizon, SolverKind::Stochastic, GammaPair::STOCHASTIC),
        1e-12,
        Comparison::AtMost,
    ));
    checks.push(Check::measured(
        "residual/denkf_closed_form",
        denkf_check(model, &schedule, lq_horizon),
        1e-12,
        Comparison::AtMost,
    ));
    if ensrf_applicable(model, lq_horizon) {
        checks.push(Check::from_result(
            "residual/ensrf_scalar",
            residual_check(model, &schedule, lq_horizon, SolverKind::EnsrfScalar, GammaPair::NO_PERTURBED_OBS),
            1e-10,
            Comparison::AtMost,
        ));
    }
    if model.n() == 1 && model.m() == 1 {
        checks.push(Check::from_result(
            "ensrf_matches_sqrt_general",
            ensrf_agreement(model, &schedule, lq_horizon),
            1e-10,
            Comparison::AtMost,
        ));
    }
    let sqrt_worst = grid(3)
        .into_iter()
        .map(|g| residual_check(model, &schedule, lq_horizon, SolverKind::SqrtGeneral, g))
        .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)));
    checks.push(Check::from_result("residual/sqrt_general", sqrt_worst, 1e-10, Comparison::AtMost));
    checks.push(Check::from_result(
        "residual/eakf_svd",
        residual_check(model, &schedule, lq_horizon, SolverKind::EakfSvd, GammaPair::DETERMINISTIC),
        1e-10,
        Comparison::AtMost,
    ));

    for (tag, spec) in exact_variants(model, lq_horizon) {
        checks.push(Check::from_result(
            format!("second_moment/{tag}"),
            second_moment_check(model, &schedule, &spec, lq_horizon),
            1e-10,
            Comparison::AtMost,
        ));
    }

    let mut batch_variants = exact_variants(model, batch_horizon);
    batch_variants.insert(1, ("denkf", VariantSpec::with_solver(SolverKind::Denkf, GainSource::Oracle).unwrap()));
    for (tag, spec) in batch_variants {
        checks.push(Check::from_result(
            format!("batch_recursive/{tag}"),
            verify_batch_recursive(model, &spec, batch_horizon, seed),
            1e-9,
            Comparison::AtMost,
        ));
    }
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn scalar_benchmark_passes_everything() {
        let report = verify_model(&SystemModel::scalar_benchmark(), 20, 1);
        assert!(report.all_passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.name == "ensrf_matches_sqrt_general"));
        assert!(report.checks.iter().any(|c| c.name == "batch_recursive/denkf"));
    }

    #[test]
    fn near_singular_innovation_is_a_failed_check() {
        let model = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-16]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let report = verify_model(&model, 5, 1);
        assert!(!report.all_passed());
        let failed: Vec<_> = report.failures().collect();
        assert!(failed[0].error.as_ref().unwrap().contains("singular"), "{report}");
    }

    #[test]
    fn random_stable_report_is_deterministic() {
        let model = SystemModel::random_stable(4, 2, 0.95, 0.1, 1.0, 3).unwrap();
        let a = verify_model(&model, 20, 9);
        let b = verify_model(&model, 20, 9);
        assert_eq!(a.to_string(), b.to_string());
        assert!(a.all_passed(), "{a}");
    }

    #[test]
    fn check_comparisons() {
        assert!(Check::measured("x", 1e-13, 1e-12, Comparison::AtMost).passed());
        assert!(!Check::measured("x", f64::NAN, 1e-12, Comparison::AtMost).passed());
        assert!(!Check::measured("x", 0.0, 0.0, Comparison::Above).passed());
        assert!(Check::measured("x", 1e-3, 0.0, Comparison::Above).passed());
    }
}
