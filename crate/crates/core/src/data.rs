//! Observed-data and parameter containers, covariate coding and CSV matrix I/O.
//!
//! Matrices on disk are dense CSV: the header row carries the column (unit)
//! labels, the first column carries the row labels. Units are matched between
//! `Y` and `A` by position; labels are kept for reporting only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NmfreError, Result};
use crate::linalg::matrix_rows;

/// Column sums of the basis must equal one to this tolerance.
pub const COLUMN_SUM_TOL: f64 = 1e-10;
/// Rows of the random effects must be centered to this tolerance.
pub const ROW_MEAN_TOL: f64 = 1e-8;

const ORTHODONT_Y: &str = include_str!("../data/orthodont_Y.csv");
const ORTHODONT_A: &str = include_str!("../data/orthodont_A.csv");

/// A dense matrix with row and column labels, as read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub values: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DataSet {
    /// P x N response (variables by units).
    pub y: DMatrix<f64>,
    /// K x N covariates.
    pub a: DMatrix<f64>,
    pub row_labels_y: Vec<String>,
    pub row_labels_a: Vec<String>,
    pub col_labels: Vec<String>,
}

impl DataSet {
    /// Builds a validated data set with default labels.
    pub fn new(y: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let ds = Self::with_default_labels(y, a);
        ds.validate()?;
        Ok(ds)
    }

    /// Like [`DataSet::new`] but allows negative responses. Simulated draws
    /// from the additive-noise model are fitted as-is.
    pub fn new_allow_negative(y: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let ds = Self::with_default_labels(y, a);
        ds.validate_shape_and_finite()?;
        Ok(ds)
    }

    fn with_default_labels(y: DMatrix<f64>, a: DMatrix<f64>) -> Self {
        let row_labels_y = (1..=y.nrows()).map(|i| format!("V{i}")).collect();
        let row_labels_a = (1..=a.nrows()).map(|i| format!("A{i}")).collect();
        let col_labels = (1..=y.ncols()).map(|i| format!("u{i}")).collect();
        Self {
            y,
            a,
            row_labels_y,
            row_labels_a,
            col_labels,
        }
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape_and_finite()?;
        for (j, col) in self.y.column_iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                if v < 0.0 {
                    return Err(NmfreError::NegativeData {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn validate_shape_and_finite(&self) -> Result<()> {
        if self.y.nrows() == 0 || self.y.ncols() == 0 || self.a.nrows() == 0 {
            return Err(NmfreError::DimensionMismatch(format!(
                "empty input: Y is {}x{}, A is {}x{}",
                self.y.nrows(),
                self.y.ncols(),
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.y.ncols() != self.a.ncols() {
            return Err(NmfreError::DimensionMismatch(format!(
                "Y has {} columns but A has {}",
                self.y.ncols(),
                self.a.ncols()
            )));
        }
        check_finite(&self.y, "Y")?;
        check_finite(&self.a, "A")?;
        let labels_ok = self.row_labels_y.len() == self.y.nrows()
            && self.row_labels_a.len() == self.a.nrows()
            && self.col_labels.len() == self.y.ncols();
        if !labels_ok {
            return Err(NmfreError::DimensionMismatch(
                "label counts do not match matrix shape".into(),
            ));
        }
        Ok(())
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(NmfreError::NonFinite { what, row: i, col: j });
        }
    }
    Ok(())
}

/// Parses a labeled CSV matrix from any reader. `origin` is used in errors.
pub fn parse_matrix_csv<R: Read>(reader: R, origin: &Path) -> Result<LabeledMatrix> {
    let parse_err = |record: usize, message: String| NmfreError::Parse {
        path: origin.to_path_buf(),
        record,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(parse_err(0, "header needs a label column and at least one unit".into()));
    }
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let ncols = col_labels.len();

    let mut row_labels = Vec::new();
    let mut body = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i + 1, e.to_string()))?;
        if rec.len() != ncols + 1 {
            return Err(parse_err(
                i + 1,
                format!("expected {} fields, found {}", ncols + 1, rec.len()),
            ));
        }
        row_labels.push(rec[0].to_owned());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(i + 1, format!("not a number: {field:?}")))?;
            body.push(v);
        }
    }
    if row_labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let values = DMatrix::from_row_slice(row_labels.len(), ncols, &body);
    Ok(LabeledMatrix {
        values,
        row_labels,
        col_labels,
    })
}

pub fn read_matrix_csv(path: &Path) -> Result<LabeledMatrix> {
    let file = File::open(path).map_err(|source| NmfreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_matrix_csv(BufReader::new(file), path)
}

/// Writes a labeled matrix using the shortest round-trip decimal form of each value.
pub fn write_matrix_csv<W: Write>(m: &LabeledMatrix, corner: &str, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![corner.to_owned()];
    header.extend(m.col_labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in m.row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn load_dataset(path_y: &Path, path_a: &Path) -> Result<DataSet> {
    let y = read_matrix_csv(path_y)?;
    let a = read_matrix_csv(path_a)?;
    from_labeled(y, a)
}

/// Pairs parsed `Y` and `A` into a validated data set.
pub fn from_labeled(y: LabeledMatrix, a: LabeledMatrix) -> Result<DataSet> {
    if y.values.ncols() != a.values.ncols() {
        return Err(NmfreError::DimensionMismatch(format!(
            "Y has {} columns but A has {}",
            y.values.ncols(),
            a.values.ncols()
        )));
    }
    let ds = DataSet {
        y: y.values,
        a: a.values,
        row_labels_y: y.row_labels,
        row_labels_a: a.row_labels,
        col_labels: y.col_labels,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &DataSet, path_y: &Path, path_a: &Path) -> Result<()> {
    let write = |m: LabeledMatrix, corner: &str, path: &Path| -> Result<()> {
        let io_err = |source| NmfreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let f = File::create(path).map_err(io_err)?;
        write_matrix_csv(&m, corner, BufWriter::new(f)).map_err(io_err)
    };
    write(
        LabeledMatrix {
            values: ds.y.clone(),
            row_labels: ds.row_labels_y.clone(),
            col_labels: ds.col_labels.clone(),
        },
        "variable",
        path_y,
    )?;
    write(
        LabeledMatrix {
            values: ds.a.clone(),
            row_labels: ds.row_labels_a.clone(),
            col_labels: ds.col_labels.clone(),
        },
        "covariate",
        path_a,
    )
}

/// The Orthodont growth data: distances at ages 8, 10, 12, 14 (P = 4) for
/// 27 children, with covariates (intercept, male).
pub fn orthodont() -> DataSet {
    let y = parse_matrix_csv(ORTHODONT_Y.as_bytes(), Path::new("orthodont_Y.csv"))
        .expect("bundled Y parses");
    let a = parse_matrix_csv(ORTHODONT_A.as_bytes(), Path::new("orthodont_A.csv"))
        .expect("bundled A parses");
    from_labeled(y, a).expect("bundled data is valid")
}

/// Raw bundled CSV text for `(Y, A)`.
pub fn orthodont_csv() -> (&'static str, &'static str) {
    (ORTHODONT_Y, ORTHODONT_A)
}

/// Positive/negative-part expansion of a signed covariate row: `a = a⁺ − a⁻`.
pub fn expand_signed_covariate(row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        return Err(NmfreError::NonFinite {
            what: "covariate",
            row: 0,
            col: i,
        });
    }
    let plus = row.iter().map(|&v| v.max(0.0)).collect();
    // `-v` rather than `0 - v` so -0.0 inputs map to +0.0 parts.
    let minus = row.iter().map(|&v| (-v).max(0.0)).collect();
    Ok((plus, minus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// P x Q basis, columns summing to one.
    #[serde(with = "matrix_rows")]
    pub x: DMatrix<f64>,
    /// Q x K covariate effects.
    #[serde(with = "matrix_rows")]
    pub theta: DMatrix<f64>,
    /// Q x N random effects, rows centered.
    #[serde(with = "matrix_rows")]
    pub u: DMatrix<f64>,
    pub lambda: f64,
}

impl ModelParams {
    pub fn q(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamViolation {
    NegativeBasis { row: usize, col: usize, value: f64 },
    NegativeTheta { row: usize, col: usize, value: f64 },
    ColumnSum { column: usize, sum: f64 },
    RowMean { row: usize, mean: f64 },
    NonPositiveLambda(f64),
}

impl std::fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NegativeBasis { row, col, value } => {
                write!(f, "X[{row},{col}] = {value} is negative")
            }
            Self::NegativeTheta { row, col, value } => {
                write!(f, "Theta[{row},{col}] = {value} is negative")
            }
            Self::ColumnSum { column, sum } => {
                write!(f, "column {column} of X sums to {sum}, not 1")
            }
            Self::RowMean { row, mean } => write!(f, "row {row} of U has mean {mean}, not 0"),
            Self::NonPositiveLambda(l) => write!(f, "lambda = {l} is not positive"),
        }
    }
}

/// Lists every violated parameter invariant; empty when the parameters are valid.
pub fn validate_params(p: &ModelParams) -> Vec<ParamViolation> {
    let mut out = Vec::new();
    for ((row, col), &value) in indexed(&p.x) {
        if value < 0.0 {
            out.push(ParamViolation::NegativeBasis { row, col, value });
        }
    }
    for ((row, col), &value) in indexed(&p.theta) {
        if value < 0.0 {
            out.push(ParamViolation::NegativeTheta { row, col, value });
        }
    }
    for (column, c) in p.x.column_iter().enumerate() {
        let sum = c.sum();
        if !((sum - 1.0).abs() <= COLUMN_SUM_TOL) {
            out.push(ParamViolation::ColumnSum { column, sum });
        }
    }
    if p.u.ncols() > 0 {
        for (row, r) in p.u.row_iter().enumerate() {
            let mean = r.mean();
            if !(mean.abs() <= ROW_MEAN_TOL) {
                out.push(ParamViolation::RowMean { row, mean });
            }
        }
    }
    if !(p.lambda > 0.0) {
        out.push(ParamViolation::NonPositiveLambda(p.lambda));
    }
    out
}

fn indexed(m: &DMatrix<f64>) -> impl Iterator<Item = ((usize, usize), &f64)> {
    let nrows = m.nrows();
    m.iter().enumerate().map(move |(i, v)| ((i % nrows, i / nrows), v))
}

/// Warm-start schedule for the working variance: held at 1 for
/// `freeze_iters` iterations, then an exponential moving average toward the
/// residual mean square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub freeze_iters: usize,
    pub ema_rate: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            freeze_iters: 30,
            ema_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub q: usize,
    pub lambda_init: f64,
    /// `df_max / (N Q)`; `None` disables the cap.
    pub cap_ratio: Option<f64>,
    pub tol: f64,
    pub maxit: usize,
    pub n_restarts: usize,
    pub rng_seed: u64,
    /// `None` keeps the working variance (and so lambda) fixed.
    pub warm_start: Option<WarmStart>,
    pub damping_eta: f64,
    /// Iteration budget of the covariate-only initialization.
    pub init_maxit: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            q: 1,
            lambda_init: 1.0,
            cap_ratio: Some(0.21),
            tol: 1e-8,
            maxit: 5000,
            n_restarts: 5,
            rng_seed: 0,
            warm_start: None,
            damping_eta: 0.5,
            init_maxit: 500,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmfreError::InvalidConfig(m));
        if self.q == 0 {
            return bad("q must be positive".into());
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return bad(format!("lambda_init = {} must be positive", self.lambda_init));
        }
        if let Some(r) = self.cap_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("cap_ratio = {r} must lie in (0, 1]"));
            }
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive".into());
        }
        if self.maxit == 0 || self.n_restarts == 0 {
            return bad("maxit and n_restarts must be at least 1".into());
        }
        if !(self.damping_eta > 0.0 && self.damping_eta <= 1.0) {
            return bad(format!("damping_eta = {} must lie in (0, 1]", self.damping_eta));
        }
        if let Some(ws) = self.warm_start {
            if !(ws.ema_rate > 0.0 && ws.ema_rate <= 1.0) {
                return bad(format!("ema_rate = {} must lie in (0, 1]", ws.ema_rate));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| NmfreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
