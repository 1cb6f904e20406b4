//! Scenario files: a JSON object describing the model, the filter variants
//! to run, and where results go.
//!
//! ```json
//! {
//!   "model": { "generator": "scalar_benchmark" },
//!   "horizon": 20,
//!   "ensemble_size": [10, 100],
//!   "variant": { "solver": "sqrt_general", "gamma1": 0.5, "gamma2": 0.5 },
//!   "seed": 7
//! }
//! ```
//!
//! Explicit models give `A`, `H`, `Q`, `R`, `m0`, `Sigma0` as row-major
//! nested arrays; a list of matrices makes that coefficient time-varying.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualenkf::{GainSource, GammaPair, InitMode, MatSeq, SolverKind, SystemModel, VariantSpec};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" => Ok(OutputFormat::Jsonl),
            other => Err(format!("unknown format {other:?} (expected csv or jsonl)")),
        }
    }
}

/// A validated scenario. `variants` holds every point to run; a gamma grid
/// expands to one point per grid cell.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: SystemModel,
    pub horizon: usize,
    pub ensemble_sizes: Vec<usize>,
    pub variants: Vec<VariantSpec>,
    pub seed: u64,
    pub replicates: usize,
    pub init: InitMode,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Scenario {
    /// Scenario with the file defaults (one replicate, random init, CSV, no output path).
    pub fn new(model: SystemModel, horizon: usize, ensemble_sizes: Vec<usize>, variants: Vec<VariantSpec>, seed: u64) -> Result<Self> {
        let scenario = Self {
            model,
            horizon,
            ensemble_sizes,
            variants,
            seed,
            replicates: 1,
            init: InitMode::Random,
            output: None,
            format: OutputFormat::Csv,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn with_replicates(mut self, replicates: usize) -> Result<Self> {
        self.replicates = replicates;
        self.validate()?;
        Ok(self)
    }

    pub fn with_init(mut self, init: InitMode) -> Result<Self> {
        self.init = init;
        self.validate()?;
        Ok(self)
    }

    /// Cross-field checks. Everything a run could trip over before its first
    /// step is caught here.
    pub fn validate(&self) -> Result<()> {
        let n = self.model.n();
        if self.horizon == 0 {
            return Err(HarnessError::validation("horizon", "must be at least 1"));
        }
        self.model
            .check_horizon(self.horizon)
            .map_err(|e| HarnessError::validation("horizon", e.to_string()))?;
        if self.ensemble_sizes.is_empty() {
            return Err(HarnessError::validation("ensemble_size", "at least one size required"));
        }
        for &size in &self.ensemble_sizes {
            if size < 2 {
                return Err(HarnessError::validation("ensemble_size", format!("N = {size}, need at least 2")));
            }
            if self.init == InitMode::Deterministic && size < n + 1 {
                return Err(HarnessError::validation(
                    "ensemble_size",
                    format!("deterministic init needs N >= n + 1 = {}, got {size}", n + 1),
                ));
            }
        }
        if self.replicates == 0 {
            return Err(HarnessError::validation("replicates", "must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(HarnessError::validation("variant", "no variant points"));
        }
        for spec in &self.variants {
            spec.check().map_err(|e| HarnessError::validation("variant", e.to_string()))?;
            if spec.solver == SolverKind::EnsrfScalar && self.model.m() > 1 && !r_is_diagonal(&self.model, self.horizon) {
                return Err(HarnessError::validation(
                    "variant.solver",
                    "ensrf_scalar needs a scalar observation or diagonal R",
                ));
            }
        }
        Ok(())
    }
}

fn r_is_diagonal(model: &SystemModel, horizon: usize) -> bool {
    (0..horizon).all(|t| {
        let r = model.at(t).r;
        (0..r.nrows()).all(|i| (0..r.ncols()).all(|j| i == j || r[(i, j)] == 0.0))
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let raw: RawScenario = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    raw.into_scenario()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMatrix {
    Single(Vec<Vec<f64>>),
    Sequence(Vec<Vec<Vec<f64>>>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSizes {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    generator: Option<String>,
    n: Option<usize>,
    m: Option<usize>,
    rho: Option<f64>,
    q: Option<f64>,
    r: Option<f64>,
    seed: Option<u64>,
    #[serde(rename = "A")]
    a: Option<RawMatrix>,
    #[serde(rename = "H")]
    h: Option<RawMatrix>,
    #[serde(rename = "Q")]
    q_mat: Option<RawMatrix>,
    #[serde(rename = "R")]
    r_mat: Option<RawMatrix>,
    m0: Option<Vec<f64>>,
    #[serde(rename = "Sigma0")]
    sigma0: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    gamma1: Option<Vec<f64>>,
    gamma2: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    solver: Option<String>,
    gamma1: Option<f64>,
    gamma2: Option<f64>,
    gain_source: Option<String>,
    gamma_grid: Option<RawGrid>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    model: Option<RawModel>,
    horizon: Option<usize>,
    ensemble_size: Option<RawSizes>,
    variant: Option<RawVariant>,
    seed: Option<u64>,
    replicates: Option<usize>,
    init: Option<String>,
    output: Option<PathBuf>,
    format: Option<String>,
}

fn required<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| HarnessError::validation(field, "required"))
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(HarnessError::validation(field, "empty matrix"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::validation(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn mat_seq(raw: RawMatrix, field: &str) -> Result<MatSeq> {
    match raw {
        RawMatrix::Single(rows) => Ok(MatSeq::Constant(matrix(&rows, field)?)),
        RawMatrix::Sequence(seq) => {
            if seq.is_empty() {
                return Err(HarnessError::validation(field, "empty matrix sequence"));
            }
            let mats = seq
                .iter()
                .enumerate()
                .map(|(t, rows)| matrix(rows, &format!("{field}[{t}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(MatSeq::Varying(mats))
        }
    }
}

impl RawModel {
    fn into_model(self) -> Result<SystemModel> {
        let model_err = |e: dualenkf::Error| HarnessError::validation("model", e.to_string());
        match self.generator.as_deref() {
            Some("scalar_benchmark") => Ok(SystemModel::scalar_benchmark()),
            Some("random_stable") => {
                let n = required(self.n, "model.n")?;
                let m = required(self.m, "model.m")?;
                let rho = required(self.rho, "model.rho")?;
                if n == 0 || m == 0 {
                    return Err(HarnessError::validation("model.n", "dimensions must be positive"));
                }
                if !(rho.is_finite() && rho >= 0.0) {
                    return Err(HarnessError::validation("model.rho", "must be finite and non-negative"));
                }
                let q = self.q.unwrap_or(1.0);
                let r = self.r.unwrap_or(1.0);
                if !(q.is_finite() && q >= 0.0) {
                    return Err(HarnessError::validation("model.q", "must be finite and non-negative"));
                }
                if !(r.is_finite() && r > 0.0) {
                    return Err(HarnessError::validation("model.r", "must be finite and positive"));
                }
                SystemModel::random_stable(n, m, rho, q, r, self.seed.unwrap_or(0)).map_err(model_err)
            }
            Some(other) => Err(HarnessError::validation(
                "model.generator",
                format!("unknown generator {other:?} (expected scalar_benchmark or random_stable)"),
            )),
            None => {
                let a = mat_seq(required(self.a, "model.A")?, "model.A")?;
                let h = mat_seq(required(self.h, "model.H")?, "model.H")?;
                let q = mat_seq(required(self.q_mat, "model.Q")?, "model.Q")?;
                let r = mat_seq(required(self.r_mat, "model.R")?, "model.R")?;
                let m0 = DVector::from_vec(required(self.m0, "model.m0")?);
                let sigma0 = matrix(&required(self.sigma0, "model.Sigma0")?, "model.Sigma0")?;
                SystemModel::new(a, h, q, r, m0, sigma0).map_err(model_err)
            }
        }
    }
}

fn gamma(value: f64, field: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&value) {
        return Err(HarnessError::validation(field, format!("{value} outside [0, 1]")));
    }
    Ok(value)
}

impl RawVariant {
    fn into_variants(self) -> Result<Vec<VariantSpec>> {
        let solver: SolverKind = required(self.solver, "variant.solver")?
            .parse()
            .map_err(|e: dualenkf::Error| HarnessError::validation("variant.solver", e.to_string()))?;
        let gain_source = match self.gain_source.as_deref() {
            None | Some("oracle") => GainSource::Oracle,
            Some("ensemble") => GainSource::Ensemble,
            Some(other) => {
                return Err(HarnessError::validation(
                    "variant.gain_source",
                    format!("unknown gain source {other:?} (expected oracle or ensemble)"),
                ))
            }
        };
        let pairs = match self.gamma_grid {
            Some(grid) => {
                if self.gamma1.is_some() || self.gamma2.is_some() {
                    return Err(HarnessError::validation(
                        "variant.gamma_grid",
                        "give either gamma1/gamma2 or gamma_grid, not both",
                    ));
                }
                let g1 = required(grid.gamma1, "variant.gamma_grid.gamma1")?;
                let g2 = required(grid.gamma2, "variant.gamma_grid.gamma2")?;
                if g1.is_empty() || g2.is_empty() {
                    return Err(HarnessError::validation("variant.gamma_grid", "empty axis"));
                }
                let mut pairs = Vec::with_capacity(g1.len() * g2.len());
                for &a in &g1 {
                    for &b in &g2 {
                        pairs.push((gamma(a, "variant.gamma_grid.gamma1")?, gamma(b, "variant.gamma_grid.gamma2")?));
                    }
                }
                pairs
            }
            None => match (self.gamma1, self.gamma2, solver.implied_gammas()) {
                (Some(a), Some(b), _) => vec![(gamma(a, "variant.gamma1")?, gamma(b, "variant.gamma2")?)],
                (None, None, Some(implied)) => vec![(implied.gamma1(), implied.gamma2())],
                (None, _, _) => return Err(HarnessError::validation("variant.gamma1", "required")),
                (_, None, _) => return Err(HarnessError::validation("variant.gamma2", "required")),
            },
        };
        pairs
            .into_iter()
            .map(|(a, b)| {
                let g = GammaPair::new(a, b).map_err(|e| HarnessError::validation("variant", e.to_string()))?;
                VariantSpec::new(g, solver, gain_source).map_err(|e| HarnessError::validation("variant", e.to_string()))
            })
            .collect()
    }
}

impl RawScenario {
    fn into_scenario(self) -> Result<Scenario> {
        let model = required(self.model, "model")?.into_model()?;
        let horizon = required(self.horizon, "horizon")?;
        let ensemble_sizes = match required(self.ensemble_size, "ensemble_size")? {
            RawSizes::One(n) => vec![n],
            RawSizes::Many(list) => list,
        };
        let variants = required(self.variant, "variant")?.into_variants()?;
        let seed = required(self.seed, "seed")?;
        let init = match self.init.as_deref() {
            None | Some("random") => InitMode::Random,
            Some("deterministic") => InitMode::Deterministic,
            Some(other) => {
                return Err(HarnessError::validation(
                    "init",
                    format!("unknown init mode {other:?} (expected random or deterministic)"),
                ))
            }
        };
        let format = match self.format.as_deref() {
            None => OutputFormat::Csv,
            Some(s) => s.parse().map_err(|e: String| HarnessError::validation("format", e))?,
        };
        let scenario = Scenario {
            model,
            horizon,
            ensemble_sizes,
            variants,
            seed,
            replicates: self.replicates.unwrap_or(1),
            init,
            output: self.output,
            format,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: HarnessError) -> (String, String) {
        match err {
            HarnessError::Validation { field, reason } => (field, reason),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn minimal_scalar_file_gets_defaults() {
        let s = parse_scenario(
            r#"{"model": {"generator": "scalar_benchmark"}, "horizon": 5, "ensemble_size": 10,
                "variant": {"solver": "stochastic"}, "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(s.replicates, 1);
        assert_eq!(s.format, OutputFormat::Csv);
        assert_eq!(s.init, InitMode::Random);
        assert_eq!(s.ensemble_sizes, vec![10]);
        assert_eq!(s.variants.len(), 1);
        assert_eq!(s.variants[0].gammas, GammaPair::STOCHASTIC);
        assert_eq!(s.variants[0].gain_source, GainSource::Oracle);
        assert!(s.output.is_none());
    }

    #[test]
    fn missing_r_is_reported_by_path() {
        let err = parse_scenario(
            r#"{"model": {"A": [[1]], "H": [[1]], "Q": [[0]], "m0": [0], "Sigma0": [[1]]},
                "horizon": 5, "ensemble_size": 10, "variant": {"solver": "stochastic"}, "seed": 1}"#,
        )
        .unwrap_err();
        assert_eq!(field_of(err), ("model.R".to_string(), "required".to_string()));
    }

    #[test]
    fn gamma_grid_expands_to_cells() {
        let s = parse_scenario(
            r#"{"model": {"generator": "scalar_benchmark"}, "horizon": 5, "ensemble_size": 10, "seed": 1,
                "variant": {"solver": "sqrt_general", "gamma_grid": {"gamma1": [0, 0.5, 1], "gamma2": [0, 0.5, 1]}}}"#,
        )
        .unwrap();
        assert_eq!(s.variants.len(), 9);
        assert_eq!(s.variants[5].gammas, GammaPair::new(0.5, 1.0).unwrap());
    }

    #[test]
    fn explicit_and_time_varying_matrices() {
        let s = parse_scenario(
            r#"{"model": {"A": [[[1, 0], [0, 1]], [[0.5, 0], [0, 0.5]]], "H": [[1, 0]], "Q": [[0.1, 0], [0, 0.1]],
                          "R": [[2]], "m0": [0, 1], "Sigma0": [[1, 0], [0, 1]]},
                "horizon": 2, "ensemble_size": [3, 6], "variant": {"solver": "denkf", "gain_source": "ensemble"},
                "seed": 1, "init": "deterministic", "format": "jsonl", "replicates": 4, "output": "x.jsonl"}"#,
        )
        .unwrap();
        assert_eq!(s.model.n(), 2);
        assert_eq!(s.model.at(1).a[(0, 0)], 0.5);
        assert_eq!(s.format, OutputFormat::Jsonl);
        assert_eq!(s.init, InitMode::Deterministic);
        assert_eq!(s.replicates, 4);
        assert_eq!(s.variants[0].gain_source, GainSource::Ensemble);
    }

    #[test]
    fn varying_model_shorter_than_horizon_rejected() {
        let err = parse_scenario(
            r#"{"model": {"A": [[[1]], [[1]]], "H": [[1]], "Q": [[0]], "R": [[1]], "m0": [0], "Sigma0": [[1]]},
                "horizon": 3, "ensemble_size": 4, "variant": {"solver": "stochastic"}, "seed": 1}"#,
        )
        .unwrap_err();
        assert_eq!(field_of(err).0, "horizon");
    }

    #[test]
    fn syntax_errors_carry_line() {
        let err = parse_scenario("{\n\"horizon\": 5,\n\"seed\": }").unwrap_err();
        match err {
            HarnessError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        assert_eq!(parse_scenario("{\"horizon\": \"five\"}").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = parse_scenario(r#"{"horizn": 5}"#).unwrap_err();
        assert!(matches!(err, HarnessError::Parse { .. }));
    }

    #[test]
    fn field_validation() {
        let base = |variant: &str, extra: &str| {
            format!(
                r#"{{"model": {{"generator": "random_stable", "n": 3, "m": 2, "rho": 0.9}}, "horizon": 5,
                    "ensemble_size": 3, "variant": {variant}, "seed": 1{extra}}}"#
            )
        };
        let cases = [
            (base(r#"{"solver": "sqrt_general"}"#, ""), "variant.gamma1"),
            (base(r#"{"solver": "sqrt_general", "gamma1": 1.5, "gamma2": 0}"#, ""), "variant.gamma1"),
            (base(r#"{"solver": "bogus"}"#, ""), "variant.solver"),
            (base(r#"{"solver": "stochastic", "gamma1": 0, "gamma2": 0}"#, ""), "variant"),
            (base(r#"{"solver": "stochastic"}"#, r#", "init": "deterministic""#), "ensemble_size"),
            (base(r#"{"solver": "stochastic"}"#, r#", "format": "xml""#), "format"),
            (base(r#"{"solver": "stochastic"}"#, r#", "replicates": 0"#), "replicates"),
        ];
        for (text, field) in cases {
            let err = parse_scenario(&text).unwrap_err();
            assert_eq!(field_of(err).0, field, "{text}");
        }
    }

    #[test]
    fn ensrf_needs_diagonal_r() {
        let err = parse_scenario(
            r#"{"model": {"A": [[1, 0], [0, 1]], "H": [[1, 0], [0, 1]], "Q": [[0, 0], [0, 0]],
                          "R": [[2, 0.5], [0.5, 2]], "m0": [0, 0], "Sigma0": [[1, 0], [0, 1]]},
                "horizon": 2, "ensemble_size": 4, "variant": {"solver": "ensrf_scalar"}, "seed": 1}"#,
        )
        .unwrap_err();
        assert_eq!(field_of(err).0, "variant.solver");
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_scenario(Path::new("/nonexistent/scenario.json")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
