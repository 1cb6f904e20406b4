//! Linear-Gaussian state-space model and truth simulation.
//!
//! ```text
//! X_{t+1} = A X_t + ξ_t,   ξ_t ~ N(0, Q)
//! Z_t     = H X_t + ζ_t,   ζ_t ~ N(0, R)
//! X_0 ~ N(m0, Σ0)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, psd_sqrt, sym_eigenvalues};
use crate::noise::{NoiseStreams, Substream};

pub const SYMMETRY_RTOL: f64 = 1e-12;
pub const PSD_RTOL: f64 = 1e-12;

/// A matrix that is either constant or given per time step.
#[derive(Clone, Debug, PartialEq)]
pub enum MatSeq {
    Constant(DMatrix<f64>),
    Varying(Vec<DMatrix<f64>>),
}

impl MatSeq {
    /// Matrix in effect at step `t`.
    ///
    /// Panics if `t` is past the end of a time-varying sequence; callers check
    /// the horizon with [`SystemModel::check_horizon`] first.
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            MatSeq::Constant(m) => m,
            MatSeq::Varying(v) => &v[t],
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            MatSeq::Constant(_) => None,
            MatSeq::Varying(v) => Some(v.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    fn iter(&self) -> Box<dyn Iterator<Item = &DMatrix<f64>> + '_> {
        match self {
            MatSeq::Constant(m) => Box::new(std::iter::once(m)),
            MatSeq::Varying(v) => Box::new(v.iter()),
        }
    }

    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> MatSeq {
        match self {
            MatSeq::Constant(m) => MatSeq::Constant(f(m)),
            MatSeq::Varying(v) => MatSeq::Varying(v.iter().map(f).collect()),
        }
    }
}

impl From<DMatrix<f64>> for MatSeq {
    fn from(m: DMatrix<f64>) -> Self {
        MatSeq::Constant(m)
    }
}

impl From<Vec<DMatrix<f64>>> for MatSeq {
    fn from(v: Vec<DMatrix<f64>>) -> Self {
        MatSeq::Varying(v)
    }
}

/// Validated state-space model. Construct with [`SystemModel::new`] or
/// [`validate_model`]; every instance satisfies the shape, symmetry and
/// definiteness invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    a: MatSeq,
    h: MatSeq,
    q: MatSeq,
    r: MatSeq,
    m0: DVector<f64>,
    sigma0: DMatrix<f64>,
    q_sqrt: MatSeq,
    r_sqrt: MatSeq,
    sigma0_sqrt: DMatrix<f64>,
}

/// Borrowed view of the matrices in effect at one time step.
#[derive(Clone, Copy, Debug)]
pub struct StepModel<'a> {
    pub a: &'a DMatrix<f64>,
    pub h: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub q_sqrt: &'a DMatrix<f64>,
    pub r_sqrt: &'a DMatrix<f64>,
}

impl StepModel<'_> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }
}

/// Checks every model invariant and returns the checked model.
pub fn validate_model(
    a: impl Into<MatSeq>,
    h: impl Into<MatSeq>,
    q: impl Into<MatSeq>,
    r: impl Into<MatSeq>,
    m0: DVector<f64>,
    sigma0: DMatrix<f64>,
) -> Result<SystemModel> {
    SystemModel::new(a, h, q, r, m0, sigma0)
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { name: name.into() })
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() == (rows, cols) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )))
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if is_symmetric(m, SYMMETRY_RTOL) {
        Ok(())
    } else {
        Err(Error::AsymmetricMatrix(name.into()))
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let ev = sym_eigenvalues(m);
    let scale = ev.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
    let min = ev.first().copied().unwrap_or(0.0);
    if min >= -PSD_RTOL * scale {
        Ok(())
    } else {
        Err(Error::NotPsd {
            name: name.into(),
            min_eigenvalue: min,
        })
    }
}

fn check_pd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let min = sym_eigenvalues(m).first().copied().unwrap_or(0.0);
    if min > 0.0 {
        Ok(())
    } else {
        Err(Error::NotPsd {
            name: name.into(),
            min_eigenvalue: min,
        })
    }
}

impl SystemModel {
    pub fn new(
        a: impl Into<MatSeq>,
        h: impl Into<MatSeq>,
        q: impl Into<MatSeq>,
        r: impl Into<MatSeq>,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        let (a, h, q, r) = (a.into(), h.into(), q.into(), r.into());
        for (name, seq) in [("A", &a), ("H", &h), ("Q", &q), ("R", &r)] {
            if seq.is_empty() {
                return Err(Error::DimensionMismatch(format!("{name} sequence is empty")));
            }
        }
        let n = m0.len();
        let m = h.at(0).nrows();
        if n == 0 || m == 0 {
            return Err(Error::DimensionMismatch("state and observation dimensions must be positive".into()));
        }
        if !m0.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { name: "m0".into() });
        }
        check_finite("Sigma0", &sigma0)?;
        check_shape("Sigma0", &sigma0, n, n)?;
        check_symmetric("Sigma0", &sigma0)?;
        check_psd("Sigma0", &sigma0)?;
        for m_a in a.iter() {
            check_finite("A", m_a)?;
            check_shape("A", m_a, n, n)?;
        }
        for m_h in h.iter() {
            check_finite("H", m_h)?;
            check_shape("H", m_h, m, n)?;
        }
        for m_q in q.iter() {
            check_finite("Q", m_q)?;
            check_shape("Q", m_q, n, n)?;
            check_symmetric("Q", m_q)?;
            check_psd("Q", m_q)?;
        }
        for m_r in r.iter() {
            check_finite("R", m_r)?;
            check_shape("R", m_r, m, m)?;
            check_symmetric("R", m_r)?;
            check_pd("R", m_r)?;
        }
        let sqrt = |x: &DMatrix<f64>| psd_sqrt(x).0;
        Ok(Self {
            q_sqrt: q.map(sqrt),
            r_sqrt: r.map(sqrt),
            sigma0_sqrt: sqrt(&sigma0),
            a,
            h,
            q,
            r,
            m0,
            sigma0,
        })
    }

    /// `A = H = Σ0 = R = 1`, `Q = 0`, `m0 = 0`.
    pub fn scalar_benchmark() -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        Self::new(
            one.clone(),
            one.clone(),
            DMatrix::zeros(1, 1),
            one.clone(),
            DVector::zeros(1),
            one,
        )
        .expect("scalar benchmark is valid")
    }

    /// Random dynamics rescaled to spectral radius `rho`, Gaussian full-rank `H`,
    /// `Q = q·I`, `R = r·I`, `m0 = 0`, `Σ0 = I`.
    pub fn random_stable(n: usize, m: usize, rho: f64, q: f64, r: f64, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::DimensionMismatch("random_stable needs n, m > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let radius = a
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.norm()));
        if radius > 0.0 {
            a *= rho / radius;
        }
        let h = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::new(
            a,
            h,
            DMatrix::identity(n, n) * q,
            DMatrix::identity(m, m) * r,
            DVector::zeros(n),
            DMatrix::identity(n, n),
        )
    }

    pub fn n(&self) -> usize {
        self.m0.len()
    }

    pub fn m(&self) -> usize {
        self.h.at(0).nrows()
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn sigma0_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma0_sqrt
    }

    pub fn a_seq(&self) -> &MatSeq {
        &self.a
    }

    pub fn h_seq(&self) -> &MatSeq {
        &self.h
    }

    pub fn q_seq(&self) -> &MatSeq {
        &self.q
    }

    pub fn r_seq(&self) -> &MatSeq {
        &self.r
    }

    pub fn at(&self, t: usize) -> StepModel<'_> {
        StepModel {
            a: self.a.at(t),
            h: self.h.at(t),
            q: self.q.at(t),
            r: self.r.at(t),
            q_sqrt: self.q_sqrt.at(t),
            r_sqrt: self.r_sqrt.at(t),
        }
    }

    /// Number of steps covered by the time-varying matrices, `None` if all constant.
    pub fn steps_available(&self) -> Option<usize> {
        [&self.a, &self.h, &self.q, &self.r]
            .iter()
            .filter_map(|s| s.len())
            .min()
    }

    pub fn check_horizon(&self, horizon: usize) -> Result<()> {
        match self.steps_available() {
            Some(available) if available < horizon => Err(Error::HorizonTooLong { horizon, available }),
            _ => Ok(()),
        }
    }
}

/// Truth states `X_0..X_T` and observations `Z_0..Z_{T-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }
}

/// Simulates a truth trajectory of `horizon` steps from the truth substreams.
pub fn simulate_truth(model: &SystemModel, horizon: usize, streams: &NoiseStreams) -> Result<Trajectory> {
    model.check_horizon(horizon)?;
    let mut x = model.m0() + streams.gaussian(Substream::TruthInit, 0, 0, model.sigma0_sqrt());
    let mut states = Vec::with_capacity(horizon + 1);
    let mut observations = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let step = model.at(t);
        let zeta = streams.gaussian(Substream::TruthMeasurement, 0, t as u64, step.r_sqrt);
        observations.push(step.h * &x + zeta);
        let xi = streams.gaussian(Substream::TruthProcess, 0, t as u64, step.q_sqrt);
        let next = step.a * &x + xi;
        states.push(std::mem::replace(&mut x, next));
    }
    states.push(x);
    Ok(Trajectory { states, observations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn scalar_benchmark_accepted() {
        let m = validate_model(m1(1.0), m1(1.0), m1(0.0), m1(1.0), DVector::zeros(1), m1(1.0)).unwrap();
        assert_eq!((m.n(), m.m()), (1, 1));
    }

    #[test]
    fn zero_r_rejected() {
        let err = validate_model(m1(1.0), m1(1.0), m1(0.0), m1(0.0), DVector::zeros(1), m1(1.0)).unwrap_err();
        assert_eq!(
            err,
            Error::NotPsd {
                name: "R".into(),
                min_eigenvalue: 0.0
            }
        );
    }

    #[test]
    fn asymmetric_q_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let err = validate_model(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q,
            m1(1.0),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert_eq!(err, Error::AsymmetricMatrix("Q".into()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = validate_model(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DMatrix::zeros(2, 2),
            m1(1.0),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn indefinite_sigma0_rejected() {
        let s0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = validate_model(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            m1(1.0),
            DVector::zeros(2),
            s0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPsd { ref name, .. } if name == "Sigma0"));
    }

    #[test]
    fn time_varying_horizon_checked() {
        let model = SystemModel::new(
            vec![m1(1.0), m1(0.5)],
            m1(1.0),
            m1(0.0),
            m1(1.0),
            DVector::zeros(1),
            m1(1.0),
        )
        .unwrap();
        assert_eq!(model.at(1).a[(0, 0)], 0.5);
        assert!(model.check_horizon(2).is_ok());
        assert_eq!(
            simulate_truth(&model, 3, &NoiseStreams::new(0)).unwrap_err(),
            Error::HorizonTooLong { horizon: 3, available: 2 }
        );
    }

    #[test]
    fn zero_dynamics_give_pure_measurement_noise() {
        let model = SystemModel::new(m1(1.0), m1(1.0), m1(0.0), m1(1.0), DVector::zeros(1), m1(0.0)).unwrap();
        let streams = NoiseStreams::new(5);
        let traj = simulate_truth(&model, 10, &streams).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.observations.len(), 10);
        for (t, z) in traj.observations.iter().enumerate() {
            assert_eq!(traj.states[t][0], 0.0);
            let zeta = streams.standard_normals(Substream::TruthMeasurement, 0, t as u64, 1)[0];
            assert_eq!(z[0], zeta);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = SystemModel::random_stable(3, 2, 0.9, 0.1, 0.5, 4).unwrap();
        let a = simulate_truth(&model, 25, &NoiseStreams::new(11)).unwrap();
        let b = simulate_truth(&model, 25, &NoiseStreams::new(11)).unwrap();
        assert_eq!(a, b);
        let c = simulate_truth(&model, 25, &NoiseStreams::new(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_stable_has_requested_radius() {
        let model = SystemModel::random_stable(5, 2, 0.95, 0.1, 1.0, 3).unwrap();
        let radius = model
            .at(0)
            .a
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.norm()));
        assert!((radius - 0.95).abs() < 1e-10);
    }

    #[test]
    fn empirical_variance_of_first_state() {
        // Var(X_1) = A Σ0 Aᵀ + Q = 1 for the scalar benchmark.
        let model = SystemModel::scalar_benchmark();
        let samples = 100_000;
        let xs: Vec<f64> = (0..samples)
            .map(|seed| simulate_truth(&model, 1, &NoiseStreams::new(seed)).unwrap().states[1][0])
            .collect();
        let mean = xs.iter().sum::<f64>() / samples as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        // sd of the sample variance of a unit normal ≈ √(2/n)
        let band = 3.0 * (2.0 / samples as f64).sqrt();
        assert!((var - 1.0).abs() < band, "var = {var}");
    }

    #[test]
    fn process_noise_moments_match_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let model = SystemModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q.clone(),
            m1(1.0),
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let streams = NoiseStreams::new(8);
        let samples = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for t in 0..samples {
            let (xi, _) = crate::noise::draw_copies(&streams, &model, 0, t);
            acc += &xi * xi.transpose();
        }
        acc /= samples as f64;
        assert!((acc - q).norm() < 5.0 * 2.2 / (samples as f64).sqrt());
    }
}
