//! Gossip-matrix certification, stationary vectors, the disagreement
//! projector `Q = I - 1'π`, and spectral utilities for the drift matrix `A`.
//!
//! All vectors follow the row convention: `π` is a `1 x m` row with `πW = π`,
//! and the drift enters updates as `x A` with `x` an `m x d` matrix.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on row sums of a gossip matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance on `‖πW - π‖∞` for an accepted stationary vector.
pub const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("entry ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("entry ({row},{col}) = {value} is negative")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, off by more than {ROW_SUM_TOL}")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("graph is not strongly connected: node {unreachable} unreachable from node 0")]
    Reducible { unreachable: usize },
    #[error("matrix is periodic with period {period}")]
    Periodic { period: usize },
    #[error("stationary vector residual {residual:e} exceeds tolerance")]
    ConvergenceFailure { residual: f64 },
    #[error("symmetric part of the drift matrix has eigenvalue {min_eigenvalue} <= 0")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("cannot parse matrix text: {0}")]
    Parse(String),
}

/// Connectivity and aperiodicity certificates recorded during validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipCertificate {
    pub strongly_connected: bool,
    /// gcd of cycle lengths through any node; 1 for an aperiodic matrix.
    pub period: usize,
    /// Sufficient (not necessary) aperiodicity witness.
    pub has_positive_diagonal: bool,
    pub max_row_sum_error: f64,
    pub doubly_stochastic: bool,
}

/// A certified irreducible, aperiodic, row-stochastic gossip matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipMatrix {
    entries: DMatrix<f64>,
    certificate: GossipCertificate,
}

impl GossipMatrix {
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn certificate(&self) -> &GossipCertificate {
        &self.certificate
    }

    /// Row-major copy of the entries.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        rows_of(&self.entries)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SpectralError> {
        validate_gossip(&matrix_from_rows(rows)?)
    }

    /// Human-readable validation report.
    pub fn report(&self) -> String {
        let c = &self.certificate;
        let mut out = String::new();
        out.push_str(&format!("gossip matrix: m = {}\n", self.m()));
        out.push_str(&format!(
            "  row stochastic      : PASS (max |row sum - 1| = {:.3e})\n",
            c.max_row_sum_error
        ));
        out.push_str(&format!(
            "  irreducible         : {}\n",
            if c.strongly_connected { "PASS (strongly connected)" } else { "FAIL" }
        ));
        out.push_str(&format!(
            "  aperiodic           : {} (period {}, positive diagonal: {})\n",
            if c.period == 1 { "PASS" } else { "FAIL" },
            c.period,
            c.has_positive_diagonal
        ));
        out.push_str(&format!("  doubly stochastic   : {}\n", c.doubly_stochastic));
        if let Ok(pi) = stationary_vector(self) {
            out.push_str(&format!("  stationary vector π : {}\n", fmt_row(pi.as_row())));
        }
        out.push_str(&format!("  contraction (SLEM)  : {:.6}\n", gossip_contraction(self)));
        out
    }
}

impl fmt::Display for GossipMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.m())?;
        for row in self.entries.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Parses the plain-text matrix format: a line holding `m`, then `m`
/// whitespace-separated rows. Blank lines and `#` comments are ignored.
impl FromStr for GossipMatrix {
    type Err = SpectralError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        validate_gossip(&parse_matrix_text(text)?)
    }
}

pub fn parse_matrix_text(text: &str) -> Result<DMatrix<f64>, SpectralError> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| SpectralError::Parse("missing size line".into()))?;
    let m: usize = header
        .parse()
        .map_err(|_| SpectralError::Parse(format!("bad size line {header:?}")))?;
    if m == 0 {
        return Err(SpectralError::Empty);
    }
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| SpectralError::Parse(format!("expected {m} rows, found {i}")))?;
        let row = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| SpectralError::Parse(format!("bad number {tok:?} in row {i}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != m {
            return Err(SpectralError::Parse(format!("row {i} has {} entries, expected {m}", row.len())));
        }
        rows.push(row);
    }
    if lines.next().is_some() {
        return Err(SpectralError::Parse(format!("more than {m} rows")));
    }
    matrix_from_rows(&rows)
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, SpectralError> {
    let n = rows.len();
    if n == 0 {
        return Err(SpectralError::Empty);
    }
    let cols = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(SpectralError::Parse(format!("ragged rows ({} vs {cols})", bad.len())));
    }
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fmt_row(v: &RowDVector<f64>) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", cells.join(", "))
}

/// Certifies `entries` as an irreducible aperiodic row-stochastic matrix.
pub fn validate_gossip(entries: &DMatrix<f64>) -> Result<GossipMatrix, SpectralError> {
    let (rows, cols) = entries.shape();
    if rows != cols {
        return Err(SpectralError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(SpectralError::Empty);
    }
    let m = rows;
    for i in 0..m {
        for j in 0..m {
            let v = entries[(i, j)];
            if !v.is_finite() {
                return Err(SpectralError::NonFinite { row: i, col: j });
            }
            if v < 0.0 {
                return Err(SpectralError::NegativeEntry { row: i, col: j, value: v });
            }
        }
    }
    let mut max_row_sum_error = 0.0_f64;
    for (i, row) in entries.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        let err = (sum - 1.0).abs();
        if err > ROW_SUM_TOL {
            return Err(SpectralError::RowSumViolation { row: i, sum });
        }
        max_row_sum_error = max_row_sum_error.max(err);
    }

    let adjacency: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..m).filter(|&j| entries[(i, j)] > 0.0).collect())
        .collect();
    if let Some(unreachable) = first_unreachable(&adjacency) {
        return Err(SpectralError::Reducible { unreachable });
    }
    let period = graph_period(&adjacency);
    if period != 1 {
        return Err(SpectralError::Periodic { period });
    }
    let has_positive_diagonal = (0..m).any(|i| entries[(i, i)] > 0.0);
    let doubly_stochastic = entries
        .column_iter()
        .all(|c| (c.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

    Ok(GossipMatrix {
        entries: entries.clone(),
        certificate: GossipCertificate {
            strongly_connected: true,
            period,
            has_positive_diagonal,
            max_row_sum_error,
            doubly_stochastic,
        },
    })
}

fn bfs_levels(adjacency: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut level = vec![None; adjacency.len()];
    let mut queue = VecDeque::from([0usize]);
    level[0] = Some(0);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap_or(0);
        for &v in &adjacency[u] {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn first_unreachable(adjacency: &[Vec<usize>]) -> Option<usize> {
    let m = adjacency.len();
    let forward = bfs_levels(adjacency);
    if let Some(i) = forward.iter().position(Option::is_none) {
        return Some(i);
    }
    let mut reverse = vec![Vec::new(); m];
    for (u, outs) in adjacency.iter().enumerate() {
        for &v in outs {
            reverse[v].push(u);
        }
    }
    bfs_levels(&reverse).iter().position(Option::is_none)
}

/// Period of a strongly connected digraph: gcd over edges `u -> v` of
/// `level(u) + 1 - level(v)` for BFS levels from any root.
fn graph_period(adjacency: &[Vec<usize>]) -> usize {
    let level = bfs_levels(adjacency);
    let mut g = 0usize;
    for (u, outs) in adjacency.iter().enumerate() {
        let lu = level[u].unwrap_or(0) as i64;
        for &v in outs {
            let lv = level[v].unwrap_or(0) as i64;
            g = gcd(g, (lu + 1 - lv).unsigned_abs() as usize);
        }
    }
    g
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Left Perron vector `π` of a certified gossip matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryVector(RowDVector<f64>);

impl StationaryVector {
    pub fn as_row(&self) -> &RowDVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    /// The rank-one matrix `1'π`.
    pub fn consensus_matrix(&self) -> DMatrix<f64> {
        let m = self.0.len();
        DMatrix::from_fn(m, m, |_, j| self.0[j])
    }
}

/// Solves `π(W - I) = 0`, `Σπ = 1` directly: the last column of `W' - I`
/// is replaced by the normalisation row and the square system is LU-solved.
pub fn stationary_vector(w: &GossipMatrix) -> Result<StationaryVector, SpectralError> {
    let m = w.m();
    let entries = w.entries();
    let mut system = entries.transpose() - DMatrix::identity(m, m);
    for j in 0..m {
        system[(m - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(m);
    rhs[m - 1] = 1.0;
    let solved = system
        .lu()
        .solve(&rhs)
        .ok_or(SpectralError::ConvergenceFailure { residual: f64::INFINITY })?;
    let pi = solved.transpose();
    let residual = (&pi * entries - &pi).amax();
    let sum_err = (pi.sum() - 1.0).abs();
    if residual > STATIONARY_TOL || sum_err > ROW_SUM_TOL || pi.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
        return Err(SpectralError::ConvergenceFailure { residual: residual.max(sum_err) });
    }
    Ok(StationaryVector(pi))
}

/// The disagreement projector `Q = I - 1'π`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementProjector(DMatrix<f64>);

impl DisagreementProjector {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn projector(pi: &StationaryVector) -> DisagreementProjector {
    let m = pi.len();
    DisagreementProjector(DMatrix::identity(m, m) - pi.consensus_matrix())
}

/// Drift matrix `A` with `yAy' > 0` certified and `λ_min = min Re spectrum(A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMatrix {
    a: DMatrix<f64>,
    lambda_min: f64,
    lambda_max_re: f64,
    sym_min_eigenvalue: f64,
}

impl DriftMatrix {
    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Largest real part over the spectrum.
    pub fn lambda_max_re(&self) -> f64 {
        self.lambda_max_re
    }

    /// Smallest eigenvalue of `(A + A')/2`, the positive-definiteness certificate.
    pub fn sym_min_eigenvalue(&self) -> f64 {
        self.sym_min_eigenvalue
    }

    /// `e^{-tA}`; see [`matrix_exp_neg`].
    pub fn exp_neg(&self, t: f64) -> DMatrix<f64> {
        matrix_exp_neg(self, t)
    }
}

pub fn drift_spectrum(a: &DMatrix<f64>) -> Result<DriftMatrix, SpectralError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(SpectralError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(SpectralError::Empty);
    }
    if let Some(idx) = a.iter().position(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite { row: idx % rows, col: idx / rows });
    }
    let sym = (a + a.transpose()) * 0.5;
    let sym_min_eigenvalue = sym.symmetric_eigenvalues().min();
    if sym_min_eigenvalue <= 0.0 {
        return Err(SpectralError::NotPositiveDefinite { min_eigenvalue: sym_min_eigenvalue });
    }
    let spectrum = a.complex_eigenvalues();
    let lambda_min = spectrum.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let lambda_max_re = spectrum.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(DriftMatrix { a: a.clone(), lambda_min, lambda_max_re, sym_min_eigenvalue })
}

/// `e^{-tA}` by scaling and squaring a Taylor series.
///
/// The argument is scaled so that `‖tA‖₁ / 2^s ≤ 1/2`; 20 Taylor terms then
/// leave a truncation error below `1e-22` relative to the scaled exponential.
pub fn matrix_exp_neg(a: &DriftMatrix, t: f64) -> DMatrix<f64> {
    assert!(t >= 0.0 && t.is_finite(), "matrix_exp_neg requires finite t >= 0, got {t}");
    expm(&(a.matrix() * -t))
}

/// Dense matrix exponential, scaling-and-squaring Taylor.
pub fn expm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.nrows();
    let norm = x.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = x / 2f64.powi(squarings as i32);
    let mut result = DMatrix::<f64>::identity(d, d);
    let mut term = DMatrix::<f64>::identity(d, d);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Second-largest eigenvalue modulus of `W` (0 when `m = 1`). Diagnostic
/// for mixing speed only.
pub fn gossip_contraction(w: &GossipMatrix) -> f64 {
    if w.m() == 1 {
        return 0.0;
    }
    let mut spectrum: Vec<_> = w.entries().complex_eigenvalues().iter().copied().collect();
    let unit = spectrum
        .iter()
        .enumerate()
        .min_by(|(_, x), (_, y)| {
            let dx = (*x - nalgebra::Complex::new(1.0, 0.0)).norm();
            let dy = (*y - nalgebra::Complex::new(1.0, 0.0)).norm();
            dx.total_cmp(&dy)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    spectrum.swap_remove(unit);
    spectrum.iter().map(|z| z.norm()).fold(0.0, f64::max).min(1.0)
}

/// Operator (spectral) norm: the largest singular value.
pub fn operator_norm(x: &DMatrix<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    if x.ncols() == 1 || x.nrows() == 1 {
        return x.norm();
    }
    x.singular_values().max()
}
