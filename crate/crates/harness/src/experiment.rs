use dualenkf::linalg::rel_frobenius;
use dualenkf::{
    run_filter, run_kf, simulate_truth, Error, GammaPair, GaussianBelief, NoiseStreams, SolverKind, Trajectory,
    VariantSpec,
};
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::records::RunRecord;
use crate::scenario::Scenario;

/// A replicate that was aborted; the rest of the experiment carried on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub run_id: String,
    pub point: usize,
    pub n_members: usize,
    pub replicate: usize,
    pub error: Error,
}

impl RunFailure {
    pub fn is_indefinite_gamma(&self) -> bool {
        matches!(self.error.root(), Error::IndefiniteGamma { .. })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentOutput {
    /// Error summarizing the failures, if any.
    pub fn failure_error(&self) -> Option<HarnessError> {
        let first = self.failures.first()?;
        if self.failures.iter().all(|f| !f.error.is_numerical()) {
            return Some(HarnessError::Numerical(first.error.clone()));
        }
        Some(HarnessError::ReplicatesFailed {
            count: self.failures.len(),
            first: format!("{}: {}", first.run_id, first.error),
        })
    }
}

pub fn run_id(point: usize, n_members: usize, replicate: usize) -> String {
    format!("p{point}-n{n_members}-r{replicate}")
}

/// Truth and exact-filter beliefs for one replicate; shared by every variant
/// point and ensemble size.
struct Reference {
    streams: NoiseStreams,
    truth: Trajectory,
    beliefs: Vec<GaussianBelief>,
}

fn reference(scenario: &Scenario, replicate: usize) -> std::result::Result<Reference, Error> {
    let streams = NoiseStreams::new(scenario.seed).for_replicate(replicate as u64);
    let truth = simulate_truth(&scenario.model, scenario.horizon, &streams)?;
    let (beliefs, _) = run_kf(&scenario.model, &truth.observations)?;
    Ok(Reference { streams, truth, beliefs })
}

fn filter_records(
    scenario: &Scenario,
    reference: &Reference,
    spec: &VariantSpec,
    n_members: usize,
    run_id: &str,
) -> std::result::Result<Vec<RunRecord>, Error> {
    let run = run_filter(
        &scenario.model,
        &reference.truth.observations,
        spec,
        n_members,
        scenario.init,
        &reference.streams,
    )?;
    let variant = spec.to_string();
    let mut records = Vec::with_capacity(run.ensembles.len());
    for (t, ens) in run.ensembles.iter().enumerate() {
        let mean = ens.mean();
        let belief = &reference.beliefs[t];
        // residuals on row t belong to the step that produced the ensemble at t
        let (ct_residual, rhs_residual) = match t.checked_sub(1) {
            Some(s) => (run.diagnostics[s].ct_residual, run.diagnostics[s].rhs_residual),
            None => (0.0, 0.0),
        };
        let record = RunRecord {
            run_id: run_id.to_string(),
            t,
            variant: variant.clone(),
            gamma1: spec.gammas.gamma1(),
            gamma2: spec.gammas.gamma2(),
            n_members,
            seed: scenario.seed,
            mean_err: (&mean - &belief.mean).norm(),
            cov_err: rel_frobenius(&ens.covariance(), &belief.cov),
            ct_residual,
            rhs_residual,
            rmse_truth: (&mean - &reference.truth.states[t]).norm(),
        };
        if !record.is_valid() {
            return Err(Error::NonFinite {
                name: format!("metrics at t = {t}"),
            }
            .at_step(t));
        }
        records.push(record);
    }
    Ok(records)
}

/// Runs every (variant point, N, replicate) combination. Replicates run in
/// parallel; records come back in (point, N, replicate, t) order.
pub fn run_experiment(scenario: &Scenario) -> Result<ExperimentOutput> {
    scenario.validate()?;
    let references: Vec<_> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| reference(scenario, r))
        .collect();
    let mut jobs = Vec::new();
    for (p, spec) in scenario.variants.iter().enumerate() {
        for &n_members in &scenario.ensemble_sizes {
            for r in 0..scenario.replicates {
                jobs.push((p, spec, n_members, r));
            }
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(p, spec, n_members, r)| {
            let id = run_id(p, n_members, r);
            let outcome = match &references[r] {
                Ok(reference) => filter_records(scenario, reference, spec, n_members, &id),
                Err(e) => Err(e.clone()),
            };
            outcome.map_err(|error| RunFailure {
                run_id: id,
                point: p,
                n_members,
                replicate: r,
                error,
            })
        })
        .collect();
    let mut out = ExperimentOutput::default();
    for result in results {
        match result {
            Ok(records) => out.records.extend(records),
            Err(failure) => out.failures.push(failure),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub gammas: GammaPair,
    /// No replicate hit an indefinite gamma right-hand side.
    pub feasible: bool,
    pub failed_replicates: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutput {
    pub experiment: ExperimentOutput,
    pub points: Vec<GridPoint>,
}

/// Runs the square-root filter at every gamma pair of `grid`, using the
/// scenario's first variant for the gain source. Failures stay in the output.
pub fn sweep_gamma(scenario: &Scenario, grid: &[GammaPair]) -> Result<SweepOutput> {
    let template = scenario.variants[0];
    if template.solver != SolverKind::SqrtGeneral {
        return Err(HarnessError::validation(
            "variant.solver",
            format!("gamma sweeps need sqrt_general, got {}", template.solver),
        ));
    }
    if grid.is_empty() {
        return Err(HarnessError::validation("variant.gamma_grid", "empty grid"));
    }
    let variants = grid
        .iter()
        .map(|&g| VariantSpec::new(g, SolverKind::SqrtGeneral, template.gain_source))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let swept = Scenario {
        variants,
        ..scenario.clone()
    };
    let experiment = run_experiment(&swept)?;
    let points = grid
        .iter()
        .enumerate()
        .map(|(p, &gammas)| {
            let failures: Vec<_> = experiment.failures.iter().filter(|f| f.point == p).collect();
            GridPoint {
                gammas,
                feasible: !failures.iter().any(|f| f.is_indefinite_gamma()),
                failed_replicates: failures.len(),
            }
        })
        .collect();
    Ok(SweepOutput { experiment, points })
}

/// `grid_1 × grid_2` in row-major order.
pub fn gamma_grid(gamma1: &[f64], gamma2: &[f64]) -> dualenkf::Result<Vec<GammaPair>> {
    gamma1
        .iter()
        .flat_map(|&a| gamma2.iter().map(move |&b| GammaPair::new(a, b)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ConvergenceOutput {
    pub records: Vec<RunRecord>,
    /// `(N, root-mean-square final-step mean error over replicates)`.
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub warnings: Vec<String>,
}

/// Errors this small mean the filter is exact and there is no Monte-Carlo
/// error to fit.
pub const FLOOR: f64 = 1e-12;

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Final-step mean error against ensemble size on log-log axes.
pub fn convergence_study(scenario: &Scenario, sizes: &[usize], replicates: usize) -> Result<ConvergenceOutput> {
    if sizes.len() < 3 {
        return Err(HarnessError::validation("ensemble_size", "need at least 3 sizes"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::validation("ensemble_size", "sizes must be strictly increasing"));
    }
    if scenario.variants.len() != 1 {
        return Err(HarnessError::validation("variant", "convergence studies take a single variant"));
    }
    let study = Scenario {
        ensemble_sizes: sizes.to_vec(),
        replicates,
        ..scenario.clone()
    };
    let out = run_experiment(&study)?;
    if let Some(err) = out.failure_error() {
        return Err(err);
    }
    let mut warnings = Vec::new();
    if replicates == 1 {
        warnings.push("a single replicate gives a noisy error estimate; the fitted slope is unreliable".to_string());
    }
    let horizon = study.horizon;
    let points: Vec<(usize, f64)> = sizes
        .iter()
        .map(|&n| {
            let finals: Vec<f64> = out
                .records
                .iter()
                .filter(|r| r.t == horizon && r.n_members == n)
                .map(|r| r.mean_err)
                .collect();
            let rms = (finals.iter().map(|e| e * e).sum::<f64>() / finals.len() as f64).sqrt();
            (n, rms)
        })
        .collect();
    let max_error = points.iter().map(|p| p.1).fold(0.0, f64::max);
    if points.iter().any(|p| p.1 <= FLOOR) {
        return Err(HarnessError::FlooredError { max_error });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(ConvergenceOutput {
        records: out.records,
        points,
        slope: ls_slope(&x, &y),
        warnings,
    })
}
