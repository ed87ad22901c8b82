//! Sinkhorn–Knopp alternating normalisation.
//!
//! One iteration is a column pass followed by a row pass, so every output
//! has row sums equal to 1 up to rounding. The column side is whatever the
//! iteration budget leaves behind, which is the quantity the diagnostics in
//! [`crate::analyze`] track.
//!
//! Every intermediate is kept in the report's tape. The backward pass in
//! [`crate::grad`] walks that tape in reverse.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matcore::{ds_error, DSError, Mat};

/// Iteration count used by mHC-style projection.
pub const DEFAULT_SK_ITERS: usize = 20;

/// Sums below this are treated as zero.
pub const ZERO_SUM_GUARD: f64 = 1e-300;

/// Intermediates of one column-then-row pass.
#[derive(Clone, Debug)]
pub struct SkStepTape {
    /// Column sums of the iteration input.
    pub col_sums: Vec<f64>,
    /// Column-normalised intermediate.
    pub col_normalized: Mat,
    /// Row sums of `col_normalized`.
    pub row_sums: Vec<f64>,
    /// Iteration output.
    pub output: Mat,
}

/// Outcome of [`sk_normalize`].
#[derive(Clone, Debug, Serialize)]
pub struct SKReport {
    pub result: Mat,
    pub iterations_run: usize,
    /// ℓ1 error after each iteration's row pass.
    pub l1_trace: Vec<DSError>,
    pub converged: bool,
    #[serde(skip)]
    pub input: Mat,
    #[serde(skip)]
    pub tape: Vec<SkStepTape>,
}

impl SKReport {
    pub fn final_error(&self) -> DSError {
        self.l1_trace.last().copied().unwrap_or_default()
    }
}

fn check_input(m: &Mat) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(
            "sk_step",
            format!("{}x{} is not square", m.rows(), m.cols()),
        ));
    }
    if let Some(&neg) = m.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::domain("sk_step", format!("negative entry {neg}")));
    }
    Ok(())
}

fn tape_step(m: &Mat) -> Result<SkStepTape> {
    let n = m.rows();
    let mut col_sums = vec![0.0; n];
    for i in 0..n {
        for (s, &v) in col_sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    if let Some(j) = col_sums.iter().position(|&s| s < ZERO_SUM_GUARD) {
        return Err(Error::domain("sk_step", format!("column {j} sums to zero")));
    }
    let mut col_normalized = m.clone();
    for i in 0..n {
        for (v, s) in col_normalized.row_mut(i).iter_mut().zip(&col_sums) {
            *v /= s;
        }
    }

    let row_sums: Vec<f64> = (0..n)
        .map(|i| col_normalized.row(i).iter().fold(0.0, |acc, &v| acc + v))
        .collect();
    if let Some(i) = row_sums.iter().position(|&s| s < ZERO_SUM_GUARD) {
        return Err(Error::domain("sk_step", format!("row {i} sums to zero")));
    }
    let mut output = col_normalized.clone();
    for (i, s) in row_sums.iter().enumerate() {
        for v in output.row_mut(i) {
            *v /= s;
        }
    }
    Ok(SkStepTape {
        col_sums,
        col_normalized,
        row_sums,
        output,
    })
}

/// One iteration: normalise columns, then rows.
pub fn sk_step(m: &Mat) -> Result<Mat> {
    check_input(m)?;
    Ok(tape_step(m)?.output)
}

/// Runs up to `max_iters` iterations, stopping early once the ℓ1 error is at
/// most `tol`. With `tol = 0` the full budget is spent unless the iterate
/// becomes exactly doubly stochastic.
pub fn sk_normalize(m: &Mat, max_iters: usize, tol: f64) -> Result<SKReport> {
    if max_iters == 0 {
        return Err(Error::Argument("sk_normalize needs max_iters >= 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Argument(format!("tolerance {tol} must be >= 0")));
    }
    check_input(m)?;

    let mut tape: Vec<SkStepTape> = Vec::with_capacity(max_iters);
    let mut l1_trace = Vec::with_capacity(max_iters);
    let mut converged = false;
    for _ in 0..max_iters {
        let step = tape_step(tape.last().map_or(m, |t| &t.output))?;
        let err = ds_error(&step.output)?;
        tape.push(step);
        l1_trace.push(err);
        if err.total <= tol {
            converged = true;
            break;
        }
    }
    let result = tape.last().expect("at least one iteration").output.clone();
    Ok(SKReport {
        result,
        iterations_run: tape.len(),
        l1_trace,
        converged,
        input: m.clone(),
        tape,
    })
}

/// Reverse pass through a recorded run: maps `d loss / d result` to
/// `d loss / d input`.
pub fn sk_backward(report: &SKReport, upstream: &Mat) -> Result<Mat> {
    if upstream.shape() != report.result.shape() {
        return Err(Error::shape(
            "sk_backward",
            format!(
                "upstream {:?} vs result {:?}",
                upstream.shape(),
                report.result.shape()
            ),
        ));
    }
    let n = upstream.rows();
    let mut grad = upstream.clone();
    for step in report.tape.iter().rev() {
        // Row pass: out[i,j] = c[i,j] / r_i.
        let mut d_c = Mat::zeros(n, n);
        for i in 0..n {
            let out_row = step.output.row(i);
            let g_row = grad.row(i);
            let dot = g_row.iter().zip(out_row).fold(0.0, |a, (g, o)| a + g * o);
            for (j, d) in d_c.row_mut(i).iter_mut().enumerate() {
                *d = (g_row[j] - dot) / step.row_sums[i];
            }
        }
        // Column pass: c[i,j] = m[i,j] / s_j.
        let mut col_dot = vec![0.0; n];
        for i in 0..n {
            for ((acc, d), c) in col_dot
                .iter_mut()
                .zip(d_c.row(i))
                .zip(step.col_normalized.row(i))
            {
                *acc += d * c;
            }
        }
        let mut d_m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d_m[(i, j)] = (d_c[(i, j)] - col_dot[j]) / step.col_sums[j];
            }
        }
        grad = d_m;
    }
    Ok(grad)
}

/// The 3x3 slow-convergence example: rows `(1/2, a, a)`, `(1/2, a, a)`,
/// `(a, 1, 1)`.
pub fn adverse_matrix(alpha: f64) -> Mat {
    Mat::from_rows(&[
        vec![0.5, alpha, alpha],
        vec![0.5, alpha, alpha],
        vec![alpha, 1.0, 1.0],
    ])
    .expect("finite alpha")
}
