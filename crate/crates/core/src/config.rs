//! TOML run configuration: parsing, validation, and serialization.
//!
//! Matrices are row-major nested arrays. Every coefficient accepts a scalar
//! (1x1), a single matrix (constant in time), or a list of `N` matrices
//! (one per grid step).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate, AmbiguityBound, ModelCoefficients, TimeGrid, TimeVarying, ValidationLimits,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Entries(Vec<f64>),
    PerStep(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettingsDoc {
    pub seed: Option<u64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_n_particles")]
    pub n_particles: usize,
    pub out_dir: Option<String>,
    /// Saddle-gap tolerance for numerical-check failures.
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
}

fn default_n_paths() -> usize {
    10_000
}

fn default_n_particles() -> usize {
    5_000
}

fn default_gap_tol() -> f64 {
    1e-8
}

impl Default for RunSettingsDoc {
    fn default() -> Self {
        Self {
            seed: None,
            n_paths: default_n_paths(),
            n_particles: default_n_particles(),
            out_dir: None,
            gap_tol: default_gap_tol(),
        }
    }
}

pub type RunSettings = RunSettingsDoc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsDoc {
    #[serde(default = "default_delta_r")]
    pub delta_r: f64,
    #[serde(default = "default_coeff_bound")]
    pub coeff_bound: f64,
}

fn default_delta_r() -> f64 {
    1e-10
}

fn default_coeff_bound() -> f64 {
    1e6
}

impl Default for LimitsDoc {
    fn default() -> Self {
        Self { delta_r: default_delta_r(), coeff_bound: default_coeff_bound() }
    }
}

/// The on-disk configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "B")]
    pub sys: MatrixSpec,
    #[serde(rename = "H")]
    pub obs: MatrixSpec,
    pub b: VectorSpec,
    pub h: VectorSpec,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    pub x0: VectorSpec,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    pub mu: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub run: RunSettingsDoc,
    #[serde(default)]
    pub limits: LimitsDoc,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(classify_toml_error)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

fn classify_toml_error(e: toml::de::Error) -> Error {
    let msg = e.to_string();
    if let Some(rest) = msg.split("missing field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return Error::MissingKey(key.to_string());
        }
    }
    Error::ConfigParse(msg)
}

fn build_matrix(field: &str, rows: usize, cols: usize, entries: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if entries.len() != rows || entries.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            field: field.to_string(),
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", entries.len(), entries.first().map_or(0, Vec::len)),
        });
    }
    Ok(DMatrix::from_row_slice(
        rows,
        cols,
        &entries.iter().flatten().copied().collect::<Vec<_>>(),
    ))
}

fn matrix_coeff(
    field: &str,
    spec: &MatrixSpec,
    rows: usize,
    cols: usize,
    steps: usize,
) -> Result<TimeVarying<DMatrix<f64>>> {
    match spec {
        MatrixSpec::Scalar(v) => {
            if rows != 1 || cols != 1 {
                return Err(Error::DimensionMismatch {
                    field: field.to_string(),
                    expected: format!("{rows}x{cols}"),
                    got: "scalar".into(),
                });
            }
            Ok(TimeVarying::Constant(DMatrix::from_element(1, 1, *v)))
        }
        MatrixSpec::Rows(rs) => Ok(TimeVarying::Constant(build_matrix(field, rows, cols, rs)?)),
        MatrixSpec::PerStep(list) => {
            if list.len() != steps {
                return Err(Error::DimensionMismatch {
                    field: field.to_string(),
                    expected: format!("{steps} per-step matrices"),
                    got: format!("{}", list.len()),
                });
            }
            let mats = list
                .iter()
                .map(|rs| build_matrix(field, rows, cols, rs))
                .collect::<Result<Vec<_>>>()?;
            Ok(TimeVarying::PerStep(mats))
        }
    }
}

fn vector_coeff(
    field: &str,
    spec: &VectorSpec,
    len: usize,
    steps: usize,
) -> Result<TimeVarying<DVector<f64>>> {
    let build = |vs: &[f64]| -> Result<DVector<f64>> {
        if vs.len() != len {
            return Err(Error::DimensionMismatch {
                field: field.to_string(),
                expected: format!("{len}"),
                got: format!("{}", vs.len()),
            });
        }
        Ok(DVector::from_column_slice(vs))
    };
    match spec {
        VectorSpec::Scalar(v) => {
            if len != 1 {
                return Err(Error::DimensionMismatch {
                    field: field.to_string(),
                    expected: format!("{len}"),
                    got: "scalar".into(),
                });
            }
            Ok(TimeVarying::Constant(DVector::from_element(1, *v)))
        }
        VectorSpec::Entries(vs) => Ok(TimeVarying::Constant(build(vs)?)),
        VectorSpec::PerStep(list) => {
            if list.len() != steps {
                return Err(Error::DimensionMismatch {
                    field: field.to_string(),
                    expected: format!("{steps} per-step vectors"),
                    got: format!("{}", list.len()),
                });
            }
            Ok(TimeVarying::PerStep(list.iter().map(|vs| build(vs)).collect::<Result<Vec<_>>>()?))
        }
    }
}

/// Parses and fully validates a configuration document.
///
/// Rejects on the first hard violation; `NotPositiveDefinite` names the
/// offending grid step.
pub fn load_config(text: &str) -> Result<(ModelCoefficients, TimeGrid, AmbiguityBound, RunSettings)> {
    let doc = ConfigDoc::parse(text)?;
    build_from_doc(&doc)
}

pub fn build_from_doc(
    doc: &ConfigDoc,
) -> Result<(ModelCoefficients, TimeGrid, AmbiguityBound, RunSettings)> {
    let grid = TimeGrid::new(doc.horizon, doc.steps)?;
    let (n, m, steps) = (doc.n, doc.m, doc.steps);
    let model = ModelCoefficients::new(
        &grid,
        matrix_coeff("B", &doc.sys, n, n, steps)?,
        matrix_coeff("H", &doc.obs, m, n, steps)?,
        vector_coeff("b", &doc.b, n, steps)?,
        vector_coeff("h", &doc.h, m, steps)?,
        matrix_coeff("Q", &doc.q, n, n, steps)?,
        matrix_coeff("R", &doc.r, m, m, steps)?,
        match vector_coeff("x0", &doc.x0, n, 1)? {
            TimeVarying::Constant(v) => v,
            TimeVarying::PerStep(_) => {
                return Err(Error::DimensionMismatch {
                    field: "x0".into(),
                    expected: "a single vector".into(),
                    got: "per-step list".into(),
                })
            }
        },
    )?;
    let ambiguity = AmbiguityBound::new(doc.mu, doc.epsilon)?;
    if doc.run.gap_tol <= 0.0 {
        return Err(Error::ConfigParse(format!(
            "run.gap_tol = {} must be positive",
            doc.run.gap_tol
        )));
    }

    let limits = ValidationLimits {
        delta_r: doc.limits.delta_r,
        coeff_bound: doc.limits.coeff_bound,
        ..ValidationLimits::default()
    };
    let violations = validate(&model, &grid, &limits);
    if let Some(v) = violations.first() {
        if v.field == "R" && v.message.contains("positive definite") {
            return Err(Error::NotPositiveDefinite {
                field: "R".into(),
                step: v.step.unwrap_or(0),
                min_eig: v.magnitude,
            });
        }
        return Err(Error::Invalid(violations.len(), v.to_string()));
    }

    Ok((model, grid, ambiguity, doc.run.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
n = 1
m = 1
B = 0.0
H = 1.0
b = 0.0
h = 0.0
Q = 1.0
R = 1.0
x0 = 0.0
T = 1.0
N = 1000
mu = 0.5
epsilon = 0.5
"#;

    #[test]
    fn scalar_config_loads() {
        let (model, grid, amb, run) = load_config(SCALAR).unwrap();
        assert_eq!(model.n(), 1);
        assert_eq!(grid.steps(), 1000);
        assert_eq!(amb.mu, 0.5);
        assert_eq!(run.n_paths, 10_000);
    }

    #[test]
    fn zero_r_is_not_positive_definite() {
        let text = SCALAR.replace("R = 1.0", "R = 0.0");
        match load_config(&text) {
            Err(Error::NotPositiveDefinite { field, step, .. }) => {
                assert_eq!(field, "R");
                assert_eq!(step, 0);
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn n_equal_one_step_grid_is_rejected() {
        let text = SCALAR.replace("N = 1000", "N = 1");
        assert!(matches!(load_config(&text), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn missing_key_is_named() {
        let text = SCALAR.replace("x0 = 0.0\n", "");
        match load_config(&text) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "x0"),
            other => panic!("expected MissingKey, got {other:?}"),
        }
    }

    #[test]
    fn matrix_form_round_trips() {
        let text = r#"
n = 2
m = 1
B = [[0.0, 1.0], [0.0, 0.0]]
H = [[1.0, 0.0]]
b = [0.0, 0.0]
h = 0.0
Q = [[1.0, 0.0], [0.0, 1.0]]
R = 2.0
x0 = [0.0, 0.0]
T = 1.0
N = 100
mu = 0.1
epsilon = 0.5
"#;
        let doc = ConfigDoc::parse(text).unwrap();
        let serialized = doc.to_toml_string().unwrap();
        let doc2 = ConfigDoc::parse(&serialized).unwrap();
        assert_eq!(doc, doc2);
        let (model, ..) = build_from_doc(&doc2).unwrap();
        assert_eq!(model.n(), 2);
        assert_eq!(model.sys_at(0)[(0, 1)], 1.0);
    }
}
