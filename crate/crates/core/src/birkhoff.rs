//! Doubly stochastic matrices as convex combinations of permutation matrices.
//!
//! [`combine`] is the construction used by the mHC-lite residual map: a
//! weight row over all `n!` permutations times a constant 0/1 matrix of
//! shape `n! x n²`, reshaped to `n x n`. [`birkhoff_decompose`] goes the
//! other way with a greedy scan and is used as a verification oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{ds_error, permutation_matrix, permutations_lex, softmax_map, vecmat, Mat};

/// Entries at or below this count as zero during decomposition.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Largest ℓ1 error accepted by [`birkhoff_decompose`].
pub const DECOMPOSE_INPUT_TOL: f64 = 1e-8;

/// All permutation matrices of order `n` and their stacked 0/1 form.
#[derive(Clone, Debug)]
pub struct PermBasis {
    n: usize,
    one_line: Vec<Vec<usize>>,
    perms: Vec<Mat>,
    combo_matrix: Mat,
}

impl PermBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of permutations, `n!`.
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn perms(&self) -> &[Mat] {
        &self.perms
    }

    /// One-line notation of permutation `k`: row `i` maps to column `perm[i]`.
    pub fn one_line(&self, k: usize) -> &[usize] {
        &self.one_line[k]
    }

    /// `n! x n²`; row `k` is the row-major flattening of permutation `k`.
    pub fn combo_matrix(&self) -> &Mat {
        &self.combo_matrix
    }
}

/// Convex weights over a permutation basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffWeights(Vec<f64>);

impl BirkhoffWeights {
    /// Validates nonnegativity and unit sum (within 1e-12).
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = a.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(
                "BirkhoffWeights::new",
                format!("weight {bad} is not a finite nonnegative value"),
            ));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::domain(
                "BirkhoffWeights::new",
                format!("weights sum to {sum}"),
            ));
        }
        Ok(Self(a))
    }

    /// Softmax of unconstrained logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax_map(logits))
    }

    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut a = vec![0.0; len];
        a[k] = 1.0;
        Self(a)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Number of strictly positive weights.
    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&v| v > 0.0).count()
    }
}

pub fn build_basis(n: usize) -> Result<PermBasis> {
    let one_line = permutations_lex(n)?;
    let perms: Vec<Mat> = one_line.iter().map(|p| permutation_matrix(p)).collect();
    let mut combo = Vec::with_capacity(perms.len() * n * n);
    for p in &perms {
        combo.extend_from_slice(p.data());
    }
    let combo_matrix = Mat::new(perms.len(), n * n, combo)?;
    Ok(PermBasis {
        n,
        one_line,
        perms,
        combo_matrix,
    })
}

/// `reshape(a * combo_matrix)`, i.e. `Σ_k a_k P_k`.
pub fn combine(basis: &PermBasis, w: &BirkhoffWeights) -> Result<Mat> {
    combine_raw(basis, w.as_slice())
}

pub(crate) fn combine_raw(basis: &PermBasis, a: &[f64]) -> Result<Mat> {
    if a.len() != basis.len() {
        return Err(Error::shape(
            "combine",
            format!("{} weights for {} permutations", a.len(), basis.len()),
        ));
    }
    Mat::row_vector(&vecmat(a, &basis.combo_matrix)).reshape(basis.n, basis.n)
}

/// Greedy Birkhoff decomposition.
///
/// Each round picks, among permutations whose entries all lie in the
/// remaining support, the one with the largest bottleneck entry (lowest
/// index on ties), and peels off that bottleneck times the permutation.
pub fn birkhoff_decompose(m: &Mat, basis: &PermBasis) -> Result<BirkhoffWeights> {
    let n = basis.n;
    if m.shape() != (n, n) {
        return Err(Error::shape(
            "birkhoff_decompose",
            format!("{:?} matrix for a basis of order {n}", m.shape()),
        ));
    }
    if let Some(&neg) = m.data().iter().find(|&&v| v < -SUPPORT_EPS) {
        return Err(Error::domain(
            "birkhoff_decompose",
            format!("negative entry {neg}"),
        ));
    }
    let err = ds_error(m)?;
    if err.total > DECOMPOSE_INPUT_TOL {
        return Err(Error::domain(
            "birkhoff_decompose",
            format!(
                "l1 error {:e} exceeds {DECOMPOSE_INPUT_TOL:e}",
                err.total
            ),
        ));
    }

    let mut remaining = m.map(|v| if v > SUPPORT_EPS { v } else { 0.0 });
    let mut weights = vec![0.0; basis.len()];
    // A doubly stochastic support always contains a permutation, and each
    // round zeroes at least one entry, so n² rounds is a hard ceiling.
    for _ in 0..n * n {
        let mut best: Option<(usize, f64, usize)> = None;
        for (k, perm) in basis.one_line.iter().enumerate() {
            let mut bottleneck = f64::INFINITY;
            let mut arg = 0;
            for (i, &j) in perm.iter().enumerate() {
                let v = remaining[(i, j)];
                if v < bottleneck {
                    bottleneck = v;
                    arg = i;
                }
            }
            if bottleneck > 0.0 && best.is_none_or(|(_, b, _)| bottleneck > b) {
                best = Some((k, bottleneck, arg));
            }
        }
        let Some((k, theta, arg_row)) = best else {
            break;
        };
        weights[k] += theta;
        for (i, &j) in basis.one_line[k].iter().enumerate() {
            let v = &mut remaining[(i, j)];
            *v -= theta;
            if i == arg_row || *v <= SUPPORT_EPS {
                *v = 0.0;
            }
        }
    }

    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain(
            "birkhoff_decompose",
            "no permutation fits inside the support",
        ));
    }
    Ok(BirkhoffWeights(weights.into_iter().map(|w| w / total).collect()))
}
