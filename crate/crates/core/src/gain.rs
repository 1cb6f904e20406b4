//! Solvers for the anomaly gain `C_t`.
//!
//! `C_t` is any matrix with `C_tᵀ Σ_t C_t = Γ_t`, where `Γ_t` is
//! [`gamma_rhs`]. Each solver here corresponds to one member of the EnKF
//! family; the ETKF path instead finds an ensemble-space transform `W_t`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kalman::riccati_step;
use crate::linalg::{self, pinv, pinv_sqrt, psd_sqrt, sym_eigenvalues, symmetrize};
use crate::model::StepModel;

/// Relative tolerance on negative eigenvalues of `Γ` before `C_t` is declared nonexistent.
pub const GAMMA_CLIP_RTOL: f64 = 1e-10;

/// Noise-copy scalings `(γ1, γ2)`, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPair {
    gamma1: f64,
    gamma2: f64,
}

impl GammaPair {
    pub const STOCHASTIC: GammaPair = GammaPair { gamma1: 1.0, gamma2: 1.0 };
    pub const NO_PERTURBED_OBS: GammaPair = GammaPair { gamma1: 1.0, gamma2: 0.0 };
    pub const DETERMINISTIC: GammaPair = GammaPair { gamma1: 0.0, gamma2: 0.0 };

    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        for g in [gamma1, gamma2] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidGamma(g));
            }
        }
        Ok(Self { gamma1, gamma2 })
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Stochastic,
    Denkf,
    EnsrfScalar,
    SqrtGeneral,
    EakfSvd,
    Etkf,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [
        SolverKind::Stochastic,
        SolverKind::Denkf,
        SolverKind::EnsrfScalar,
        SolverKind::SqrtGeneral,
        SolverKind::EakfSvd,
        SolverKind::Etkf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Stochastic => "stochastic",
            SolverKind::Denkf => "denkf",
            SolverKind::EnsrfScalar => "ensrf_scalar",
            SolverKind::SqrtGeneral => "sqrt_general",
            SolverKind::EakfSvd => "eakf_svd",
            SolverKind::Etkf => "etkf",
        }
    }

    /// Gamma pair fixed by the closed-form solvers, `None` if any pair is allowed.
    pub fn implied_gammas(&self) -> Option<GammaPair> {
        match self {
            SolverKind::Stochastic => Some(GammaPair::STOCHASTIC),
            SolverKind::Denkf | SolverKind::EnsrfScalar => Some(GammaPair::NO_PERTURBED_OBS),
            _ => None,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidVariant(format!("unknown solver {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtSolution {
    pub c: DMatrix<f64>,
    /// `‖CᵀΣC − Γ‖_F`.
    pub residual: f64,
    pub method: SolverKind,
    /// Smallest eigenvalue of `Γ` before clipping (0 when nothing was clipped).
    pub clipped_eigenvalue: f64,
}

impl CtSolution {
    fn new(c: DMatrix<f64>, sigma: &DMatrix<f64>, gamma: &DMatrix<f64>, method: SolverKind) -> Self {
        let residual = ct_residual(&c, sigma, gamma);
        Self {
            c,
            residual,
            method,
            clipped_eigenvalue: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtkfTransform {
    pub w: DMatrix<f64>,
    /// `‖δWWᵀδᵀ/(N−1) − ΠΓΠ‖_F` with `Π` the projector onto range(δ).
    pub subspace_residual: f64,
    /// `‖Γ − ΠΓΠ‖_F`, the part of `Γ` no ensemble-space transform can reach.
    pub out_of_range: f64,
    pub clipped_eigenvalue: f64,
}

pub fn ct_residual(c: &DMatrix<f64>, sigma: &DMatrix<f64>, gamma: &DMatrix<f64>) -> f64 {
    (c.transpose() * sigma * c - gamma).norm()
}

/// Right-hand side of the `C_t` equation:
///
/// ```text
/// Γ = (A − βAKH) Σ (A − βAKH)ᵀ − ((1−γ2²)/2)² AKHΣHᵀKᵀAᵀ + (1−γ1²) Q,   β = (1+γ2²)/2
/// ```
///
/// so that `Γ + γ1²Q + γ2²AKRKᵀAᵀ` is the Riccati update of `Σ` for every
/// `(γ1, γ2)`.
pub fn gamma_rhs(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel, gammas: GammaPair) -> DMatrix<f64> {
    let (g1, g2) = (gammas.gamma1, gammas.gamma2);
    let a = step.a;
    let akh = a * gain * step.h;
    let beta = 0.5 * (1.0 + g2 * g2);
    let closed = a - &akh * beta;
    let dropped = 0.5 * (1.0 - g2 * g2);
    let rhs = &closed * sigma * closed.transpose() - &akh * sigma * akh.transpose() * (dropped * dropped)
        + step.q * (1.0 - g1 * g1);
    symmetrize(&rhs)
}

/// `‖Γ + γ1²Q + γ2²AKRKᵀAᵀ − Riccati(Σ)‖_F`.
pub fn rhs_consistency(
    sigma: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    step: &StepModel,
    gammas: GammaPair,
) -> Result<f64> {
    let (g1, g2) = (gammas.gamma1, gammas.gamma2);
    let ak = step.a * gain;
    let decomposed = gamma_rhs(sigma, gain, step, gammas)
        + step.q * (g1 * g1)
        + &ak * step.r * ak.transpose() * (g2 * g2);
    Ok((decomposed - riccati_step(sigma, step)?).norm())
}

/// `C = (I − HᵀKᵀ)Aᵀ`, exact for `γ = (1, 1)`.
pub fn solve_stochastic(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel) -> CtSolution {
    let n = step.n();
    let c = (DMatrix::identity(n, n) - step.h.transpose() * gain.transpose()) * step.a.transpose();
    let gamma = gamma_rhs(sigma, gain, step, GammaPair::STOCHASTIC);
    CtSolution::new(c, sigma, &gamma, SolverKind::Stochastic)
}

/// `C = (A − ½AKH)ᵀ`; drops the `¼AKHΣHᵀKᵀAᵀ` term, which becomes the residual.
pub fn solve_denkf(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel) -> CtSolution {
    let a = step.a;
    let c = (a - a * gain * step.h * 0.5).transpose();
    let gamma = gamma_rhs(sigma, gain, step, GammaPair::NO_PERTURBED_OBS);
    CtSolution::new(c, sigma, &gamma, SolverKind::Denkf)
}

/// Reduction rate `α = 1/(1 + √(1 − s))`, the root of `sα² − 2α + 1 = 0`
/// continuous with `α = ½` at `s = 0`.
pub fn ensrf_alpha(s: f64) -> f64 {
    1.0 / (1.0 + (1.0 - s).max(0.0).sqrt())
}

/// Scalar-observation EnSRF: `C = (A − αAKH)ᵀ`.
pub fn solve_ensrf_scalar(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel) -> Result<(f64, CtSolution)> {
    if step.m() != 1 {
        return Err(Error::NotScalarObservation { m: step.m() });
    }
    let hsh = (step.h * sigma * step.h.transpose())[(0, 0)];
    let s = hsh / (hsh + step.r[(0, 0)]);
    let alpha = ensrf_alpha(s);
    let a = step.a;
    let c = (a - a * gain * step.h * alpha).transpose();
    let gamma = gamma_rhs(sigma, gain, step, GammaPair::NO_PERTURBED_OBS);
    Ok((alpha, CtSolution::new(c, sigma, &gamma, SolverKind::EnsrfScalar)))
}

/// EnSRF with serial processing of observations (requires diagonal `R`).
/// The scalar anomaly updates are composed into one `C` so that
/// `Cᵀ = A·(I − α_m k_m h_m)···(I − α_1 k_1 h_1)`.
pub fn solve_ensrf_serial(sigma: &DMatrix<f64>, gain: &DMatrix<f64>, step: &StepModel) -> Result<(Vec<f64>, CtSolution)> {
    let m = step.m();
    if m == 1 {
        let (alpha, sol) = solve_ensrf_scalar(sigma, gain, step)?;
        return Ok((vec![alpha], sol));
    }
    let r = step.r;
    let diagonal = (0..m).all(|i| (0..m).all(|j| i == j || r[(i, j)] == 0.0));
    if !diagonal {
        return Err(Error::NotScalarObservation { m });
    }
    let n = step.n();
    let mut s_i = sigma.clone();
    let mut transform = DMatrix::<f64>::identity(n, n);
    let mut alphas = Vec::with_capacity(m);
    for i in 0..m {
        let h_i = step.h.row(i).into_owned();
        let sh = &s_i * h_i.transpose();
        let hsh = (&h_i * &sh)[(0, 0)];
        let d = hsh + r[(i, i)];
        let k_i = sh / d;
        let alpha = ensrf_alpha(hsh / d);
        let eye = DMatrix::<f64>::identity(n, n);
        transform = (&eye - &k_i * &h_i * alpha) * transform;
        s_i = symmetrize(&((&eye - &k_i * &h_i) * s_i));
        alphas.push(alpha);
    }
    let c = (step.a * transform).transpose();
    let gamma = gamma_rhs(sigma, gain, step, GammaPair::NO_PERTURBED_OBS);
    Ok((alphas, CtSolution::new(c, sigma, &gamma, SolverKind::EnsrfScalar)))
}

fn gamma_sqrt(gamma: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (root, min) = psd_sqrt(gamma);
    let scale = sym_eigenvalues(gamma).iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
    if min < -GAMMA_CLIP_RTOL * scale {
        return Err(Error::IndefiniteGamma { min_eigenvalue: min });
    }
    Ok((root, min))
}

/// `C = Σ^{-1/2} L Γ^{1/2}` with symmetric principal roots and a thresholded
/// pseudo-inverse for `Σ^{-1/2}`. `L` defaults to the identity.
pub fn solve_sqrt_general(sigma: &DMatrix<f64>, gamma: &DMatrix<f64>, unitary: Option<&DMatrix<f64>>) -> Result<CtSolution> {
    let (g_half, clipped) = gamma_sqrt(gamma)?;
    let s_inv_half = pinv_sqrt(sigma);
    let c = match unitary {
        Some(l) => s_inv_half * l * g_half,
        None => s_inv_half * g_half,
    };
    let mut sol = CtSolution::new(c, sigma, gamma, SolverKind::SqrtGeneral);
    sol.clipped_eigenvalue = clipped;
    Ok(sol)
}

/// `√(N−1)·U S⁺ Uᵀ` from the thin SVD `δ = USVᵀ`: the inverse square root of
/// the sample covariance `δδᵀ/(N−1)` on the ensemble range.
pub fn inverse_sqrt_from_anomalies(delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, members) = delta.shape();
    if members < 2 {
        return Err(Error::EnsembleTooSmall {
            n_members: members,
            required: 2,
        });
    }
    let svd = delta.clone().svd(true, false);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let floor = linalg::PINV_RTOL * smax;
    let u = svd.u.as_ref().expect("u computed");
    let mut out = DMatrix::zeros(n, n);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > floor {
            let col = u.column(k);
            out += (col * col.transpose()) / s;
        }
    }
    Ok(symmetrize(&out) * ((members - 1) as f64).sqrt())
}

/// EAKF route: `C = Σ̂^{-1/2} Γ^{1/2}` with `Σ̂^{-1/2}` taken from the anomaly SVD.
/// The residual is measured against `sigma`, the covariance `Γ` was built from.
pub fn solve_eakf_svd(delta: &DMatrix<f64>, sigma: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<CtSolution> {
    let (g_half, clipped) = gamma_sqrt(gamma)?;
    let c = inverse_sqrt_from_anomalies(delta)? * g_half;
    let mut sol = CtSolution::new(c, sigma, gamma, SolverKind::EakfSvd);
    sol.clipped_eigenvalue = clipped;
    Ok(sol)
}

/// Ensemble-space transform `W = (M)^{1/2}`, `M = (N−1)·δ⁺Γδ⁺ᵀ`, so that
/// `δWWᵀδᵀ/(N−1)` equals `Γ` projected onto the ensemble range.
pub fn etkf_transform(delta: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<EtkfTransform> {
    let members = delta.ncols();
    if members < 2 {
        return Err(Error::EnsembleTooSmall {
            n_members: members,
            required: 2,
        });
    }
    if !(delta.amax() > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let (g_half, clipped) = gamma_sqrt(gamma)?;
    let gamma_psd = &g_half * &g_half;
    let scale = (members - 1) as f64;
    let d_pinv = pinv(delta);
    let m = symmetrize(&(&d_pinv * &gamma_psd * d_pinv.transpose() * scale));
    let (w, _) = psd_sqrt(&m);
    let proj = delta * &d_pinv;
    let projected = &proj * gamma * proj.transpose();
    let reached = delta * &w * w.transpose() * delta.transpose() / scale;
    Ok(EtkfTransform {
        subspace_residual: (reached - &projected).norm(),
        out_of_range: (gamma - projected).norm(),
        clipped_eigenvalue: clipped,
        w,
    })
}
