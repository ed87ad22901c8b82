//! Stability diagnostics over populations of residual matrices: relative
//! range of the pre-projection matrices, column-sum boxplots for single
//! matrices and depth products, and JSON/CSV report emission.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperblock::{init_params, BlockParams, Variant};
use crate::matcore::{col_sums, matmul, relative_range, Mat};

/// `ln(10^13)`: past this, a 20-iteration Sinkhorn budget is suspect.
pub fn nu_threshold() -> f64 {
    13.0 * std::f64::consts::LN_10
}

/// Boxplot summary of one scalar population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub label: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
}

impl StabilityStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Largest `|v - 1|` over the population.
    pub fn max_dev_from_one(&self) -> f64 {
        (self.max - 1.0).abs().max((self.min - 1.0).abs())
    }
}

/// Linear-interpolation quantile of sorted data (`h = (N-1) p`).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary plus 1.5·IQR outliers.
pub fn summarize(label: impl Into<String>, values: &[f64]) -> Result<StabilityStats> {
    if values.is_empty() {
        return Err(Error::domain("summarize", "empty population"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("summarize", "population contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(StabilityStats {
        label: label.into(),
        n: sorted.len(),
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[sorted.len() - 1],
        outliers: sorted.iter().copied().filter(|&v| v < lo || v > hi).collect(),
    })
}

/// Result of [`nu_scan`].
#[derive(Clone, Debug, Serialize)]
pub struct NuScan {
    pub stats: StabilityStats,
    /// `ln(1/ν)` per matrix, input order.
    pub values: Vec<f64>,
    /// Fraction of matrices with `ln(1/ν) >= ln(10^13)`.
    pub frac_above_threshold: f64,
}

/// `ln(1/ν)` over a population of strictly positive matrices.
pub fn nu_scan(pre_sk_matrices: &[Mat]) -> Result<NuScan> {
    let mut values = Vec::with_capacity(pre_sk_matrices.len());
    for (k, m) in pre_sk_matrices.iter().enumerate() {
        if let Some(&bad) = m.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain(
                "nu_scan",
                format!("matrix {k} has non-positive entry {bad}"),
            ));
        }
        values.push((1.0 / relative_range(m)?).ln());
    }
    let stats = summarize("ln(1/nu)", &values)?;
    let threshold = nu_threshold();
    let above = values.iter().filter(|&&v| v >= threshold).count();
    Ok(NuScan {
        frac_above_threshold: above as f64 / values.len() as f64,
        stats,
        values,
    })
}

/// Every column sum of every matrix as one population.
pub fn colsum_stats(matrices: &[Mat]) -> Result<StabilityStats> {
    let Some(first) = matrices.first() else {
        return Err(Error::domain("colsum_stats", "no matrices"));
    };
    let shape = first.shape();
    if !first.is_square() {
        return Err(Error::shape("colsum_stats", format!("{shape:?} is not square")));
    }
    let mut values = Vec::with_capacity(matrices.len() * shape.1);
    for (k, m) in matrices.iter().enumerate() {
        if m.shape() != shape {
            return Err(Error::shape(
                "colsum_stats",
                format!("matrix {k} is {:?}, expected {shape:?}", m.shape()),
            ));
        }
        values.extend(col_sums(m));
    }
    summarize("colsum", &values)
}

/// `H_L ⋯ H_2 H_1`: later layers multiply on the left. An empty sequence
/// yields the identity of order `size`, which must then be given.
pub fn depth_product(per_layer: &[Mat], size: Option<usize>) -> Result<Mat> {
    let Some(first) = per_layer.first() else {
        return size
            .map(Mat::identity)
            .ok_or_else(|| Error::Argument("empty product with no declared size".into()));
    };
    let n = first.rows();
    if size.is_some_and(|s| s != n) {
        return Err(Error::shape(
            "depth_product",
            format!("declared size {size:?} but matrices are {n}x{n}"),
        ));
    }
    let mut acc = first.clone();
    for (l, h) in per_layer.iter().enumerate().skip(1) {
        if h.shape() != (n, n) {
            return Err(Error::shape(
                "depth_product",
                format!("layer {l} is {:?}, expected ({n}, {n})", h.shape()),
            ));
        }
        acc = matmul(h, &acc)?;
    }
    Ok(acc)
}

/// Per-token, per-layer residual matrices collected from a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harvest {
    pub variant: Variant,
    pub n: usize,
    pub layers: usize,
    pub tokens: usize,
    /// Token-major: entry `t * layers + l`.
    pub h_res: Vec<Mat>,
    /// Pre-projection matrices in the same layout; empty unless `mhc`.
    #[serde(default)]
    pub pre_sk: Vec<Mat>,
}

impl Harvest {
    pub fn matrix(&self, layer: usize, token: usize) -> &Mat {
        &self.h_res[token * self.layers + layer]
    }

    /// The `layers` matrices of one token, first layer first.
    pub fn token_stack(&self, token: usize) -> &[Mat] {
        &self.h_res[token * self.layers..(token + 1) * self.layers]
    }

    pub fn depth_products(&self) -> Result<Vec<Mat>> {
        (0..self.tokens)
            .map(|t| depth_product(self.token_stack(t), Some(self.n)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: Harvest = serde_json::from_str(&text)?;
        if h.h_res.len() != h.layers * h.tokens {
            return Err(Error::shape(
                "Harvest::load",
                format!(
                    "{} matrices for {} layers x {} tokens",
                    h.h_res.len(),
                    h.layers,
                    h.tokens
                ),
            ));
        }
        Ok(h)
    }
}

/// Per-matrix and depth-product column-sum groups for one harvest, labelled
/// `<prefix>/per-matrix` and `<prefix>/prod`.
pub fn column_sum_groups(prefix: &str, harvest: &Harvest) -> Result<Vec<StabilityStats>> {
    Ok(vec![
        colsum_stats(&harvest.h_res)?.with_label(format!("{prefix}/per-matrix")),
        colsum_stats(&harvest.depth_products()?)?.with_label(format!("{prefix}/prod")),
    ])
}

/// Writes the stats as a JSON array.
pub fn emit_report(stats: &[StabilityStats], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(stats)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<StabilityStats>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// 17 significant digits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV row per group; outliers are `;`-separated in the last column.
pub fn emit_report_csv(stats: &[StabilityStats], path: &Path) -> Result<()> {
    let mut out = String::from("label,n,min,q1,median,q3,max,num_outliers,outliers\n");
    for s in stats {
        let outliers: Vec<String> = s.outliers.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.label,
            s.n,
            fmt_f64(s.min),
            fmt_f64(s.q1),
            fmt_f64(s.median),
            fmt_f64(s.q3),
            fmt_f64(s.max),
            s.outliers.len(),
            outliers.join(";")
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// The 3x3 slow-convergence pattern embedded in a 4x4 strictly positive
/// matrix (fourth stream nearly decoupled).
pub fn adverse_matrix_4(alpha: f64) -> Mat {
    Mat::from_rows(&[
        vec![0.5, alpha, alpha, alpha],
        vec![0.5, alpha, alpha, alpha],
        vec![alpha, 1.0, 1.0, alpha],
        vec![alpha, alpha, alpha, 1.0],
    ])
    .expect("finite alpha")
}

/// An `Mhc` block whose residual logits are `ln` of [`adverse_matrix_4`],
/// with zero weights so the maps ignore the input. Logit spread is
/// `ln(1/alpha)`.
pub fn adversarial_mhc_block(c: usize, alpha: f64) -> Result<BlockParams> {
    let mut p = init_params(Variant::Mhc, 4, c, 0)?;
    p.b_res = adverse_matrix_4(alpha).data().iter().map(|v| v.ln()).collect();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::birkhoff::{combine, BirkhoffWeights};
    use crate::hyperblock::{compute_maps, shared_basis, StreamState};
    use crate::matcore::{ds_error, enumerate_permutations};
    use crate::sinkhorn::{adverse_matrix, sk_normalize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantiles_interpolate_linearly() {
        let s = summarize("x", &[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        assert!(s.outliers.is_empty());
        let s = summarize("x", &[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.outliers, vec![100.0]);
        assert!(summarize("x", &[]).is_err());
    }

    #[test]
    fn nu_scan_cases() {
        let perms = enumerate_permutations(3).unwrap();
        assert!(matches!(nu_scan(&perms), Err(Error::Domain { .. })));

        let init = init_params(Variant::Mhc, 4, 2, 0).unwrap();
        let maps = compute_maps(&init, &StreamState::zeros(4, 2), 20).unwrap();
        let scan = nu_scan(&[maps.pre_sk().unwrap().clone()]).unwrap();
        assert_eq!(scan.values, vec![8.0]);
        assert_eq!(scan.frac_above_threshold, 0.0);

        let logits: Vec<f64> = (0..9).map(|k| -30.0 * k as f64 / 8.0).collect();
        let m = Mat::new(3, 3, logits.iter().map(|z| z.exp()).collect()).unwrap();
        let scan = nu_scan(&[m.clone(), m.scale(1e5)]).unwrap();
        assert!((scan.values[0] - 30.0).abs() < 1e-12);
        assert!((scan.values[1] - scan.values[0]).abs() < 1e-12);
        assert_eq!(scan.frac_above_threshold, 1.0);
    }

    #[test]
    fn colsum_cases() {
        let ids = vec![Mat::identity(4); 5];
        let s = colsum_stats(&ids).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(s.outliers.is_empty());
        assert_eq!(s.n, 20);

        let sk = sk_normalize(&adverse_matrix(1e-13), 20, 0.0).unwrap().result;
        let s = colsum_stats(&[sk]).unwrap();
        assert!((s.max - 1.82).abs() <= 0.02);
        assert!((s.min - 0.59).abs() <= 0.02);
        assert!((s.median - 0.59).abs() <= 0.02);

        assert!(colsum_stats(&[Mat::identity(3), Mat::identity(4)]).is_err());
        assert!(colsum_stats(&[]).is_err());
    }

    #[test]
    fn doubly_stochastic_population_has_flat_box() {
        let basis = shared_basis(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mats: Vec<Mat> = (0..200)
            .map(|_| {
                let logits: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
                combine(basis, &BirkhoffWeights::from_logits(&logits)).unwrap()
            })
            .collect();
        let s = colsum_stats(&mats).unwrap();
        assert!(s.max_dev_from_one() <= 1e-12);
        assert!(s.iqr() <= 1e-12);
    }

    #[test]
    fn depth_product_cases() {
        let perms = enumerate_permutations(4).unwrap();
        let prod = depth_product(&perms[3..9], None).unwrap();
        assert_eq!(ds_error(&prod).unwrap().total, 0.0);
        assert!(prod.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(depth_product(&[], Some(3)).unwrap(), Mat::identity(3));
        assert!(depth_product(&[], None).is_err());
        assert!(depth_product(&[Mat::identity(3), Mat::identity(4)], None).is_err());

        // Order: later layers on the left.
        let a = perms[1].clone();
        let b = perms[3].clone();
        assert_eq!(
            depth_product(&[a.clone(), b.clone()], None).unwrap(),
            matmul(&b, &a).unwrap()
        );
    }

    #[test]
    fn adversarial_stack_drifts() {
        let p = adversarial_mhc_block(4, 1e-14).unwrap();
        let spread = p.b_res.iter().cloned().fold(f64::MIN, f64::max)
            - p.b_res.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread >= 30.0);
        let maps = compute_maps(&p, &StreamState::zeros(4, 4), 20).unwrap();
        let stack = vec![maps.h_res; 24];
        let prod = depth_product(&stack, Some(4)).unwrap();
        let dev = col_sums(&prod)
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(dev > 0.5, "deviation {dev}");
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&[], &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), vec![]);
        assert_eq!(fs::read_to_string(&path).unwrap().trim(), "[]");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..101).map(|_| rng.random::<f64>() * 3.0).collect();
        let stats = vec![
            summarize("a", &vals).unwrap(),
            summarize("b", &[1.0 / 3.0, 0.1, 1e300]).unwrap(),
        ];
        emit_report(&stats, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), stats);

        let csv = dir.path().join("r.csv");
        emit_report_csv(&stats, &csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        let median: f64 = text.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(median.to_bits(), stats[0].median.to_bits());

        let bad = dir.path().join("missing").join("r.json");
        assert!(matches!(emit_report(&stats, &bad), Err(Error::Io { .. })));
    }
}
