//! Hand-derived reverse-mode gradients of the block, and a central
//! finite-difference checker to hold them to account.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hyperblock::{
    block_forward, block_forward_traced, BlockParams, BlockTrace, Branch, StreamState, TanhBranch,
    Variant, EXP_CLAMP,
};
use crate::matcore::Mat;
use crate::sinkhorn::{sk_backward, DEFAULT_SK_ITERS};

/// Loss gradients with respect to every block parameter. Same shapes and
/// group layout as [`BlockParams`].
pub type ParamGrads = BlockParams;

/// Central-difference step for `f64`.
pub const FD_EPS: f64 = 1e-5;

/// Denominator floor of [`rel_err`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default pass threshold for [`grad_check`].
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Backward pass through a recorded forward evaluation.
///
/// `branch_backward(u, dy)` must return `d loss / d u` for the branch input
/// `u`; callers with trainable branches accumulate their own parameter
/// gradients inside it.
pub fn backward_from_trace(
    p: &BlockParams,
    s: &StreamState,
    trace: &BlockTrace,
    upstream: &Mat,
    branch_backward: &mut dyn FnMut(&[f64], &[f64]) -> Vec<f64>,
) -> Result<(ParamGrads, Mat)> {
    let (n, c) = (p.n, p.c);
    if upstream.shape() != (n, c) {
        return Err(Error::shape(
            "block_backward",
            format!("upstream {:?}, expected ({n}, {c})", upstream.shape()),
        ));
    }
    let x = s.x();
    let maps = &trace.maps;
    let cache = &maps.cache;
    let g = upstream;

    // x' = H_res x + H_postᵀ y
    let mut d_hres = Mat::zeros(n, n);
    let mut dx = Mat::zeros(n, c);
    let mut d_hpost = vec![0.0; n];
    let mut dy = vec![0.0; c];
    for i in 0..n {
        let g_row = g.row(i);
        for j in 0..n {
            d_hres[(i, j)] = g_row.iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            let h = maps.h_res[(i, j)];
            for (d, gv) in dx.row_mut(j).iter_mut().zip(g_row) {
                *d += h * gv;
            }
        }
        d_hpost[i] = g_row.iter().zip(&trace.branch_out).map(|(a, b)| a * b).sum();
        for (d, gv) in dy.iter_mut().zip(g_row) {
            *d += maps.h_post[i] * gv;
        }
    }

    // y = f(u), u = H_pre x
    let du = branch_backward(&trace.branch_in, &dy);
    if du.len() != c {
        return Err(Error::Contract(format!(
            "branch backward returned {} values, expected C={c}",
            du.len()
        )));
    }
    let mut d_hpre = vec![0.0; n];
    for i in 0..n {
        d_hpre[i] = du.iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
        for (d, u) in dx.row_mut(i).iter_mut().zip(&du) {
            *d += maps.h_pre[i] * u;
        }
    }

    let dz_pre: Vec<f64> = d_hpre
        .iter()
        .zip(&maps.h_pre)
        .map(|(d, h)| d * h * (1.0 - h))
        .collect();
    let dz_post: Vec<f64> = d_hpost
        .iter()
        .zip(&maps.h_post)
        .map(|(d, h)| {
            let s = 0.5 * h;
            d * 2.0 * s * (1.0 - s)
        })
        .collect();
    let dz_res: Vec<f64> = match p.variant {
        Variant::Unconstrained => d_hres.into_data(),
        Variant::Mhc => {
            let report = maps
                .sk_report
                .as_ref()
                .expect("mhc maps carry a Sinkhorn report");
            let d_e = sk_backward(report, &d_hres)?;
            d_e.data()
                .iter()
                .zip(report.input.data())
                .zip(&cache.z_res)
                .map(|((d, e), z)| if z.abs() <= EXP_CLAMP { d * e } else { 0.0 })
                .collect()
        }
        Variant::MhcLite => {
            let a = maps
                .a_weights
                .as_ref()
                .expect("mhc-lite maps carry weights")
                .as_slice();
            let basis = crate::hyperblock::shared_basis(n)?;
            let combo = basis.combo_matrix();
            let da: Vec<f64> = (0..combo.rows())
                .map(|k| combo.row(k).iter().zip(d_hres.data()).map(|(m, d)| m * d).sum())
                .collect();
            let mean: f64 = a.iter().zip(&da).map(|(a, d)| a * d).sum();
            a.iter().zip(&da).map(|(a, d)| a * (d - mean)).collect()
        }
    };

    let mut grads = p.zeros_like();
    let mut d_normed = vec![0.0; n * c];
    for (alpha, w, proj, dz, d_alpha, d_w, d_b) in [
        (
            p.alpha_pre,
            &p.w_pre,
            &cache.proj_pre,
            &dz_pre,
            &mut grads.alpha_pre,
            &mut grads.w_pre,
            &mut grads.b_pre,
        ),
        (
            p.alpha_post,
            &p.w_post,
            &cache.proj_post,
            &dz_post,
            &mut grads.alpha_post,
            &mut grads.w_post,
            &mut grads.b_post,
        ),
        (
            p.alpha_res,
            &p.w_res,
            &cache.proj_res,
            &dz_res,
            &mut grads.alpha_res,
            &mut grads.w_res,
            &mut grads.b_res,
        ),
    ] {
        d_b.copy_from_slice(dz);
        *d_alpha = dz.iter().zip(proj).map(|(d, q)| d * q).sum();
        for (row, &xn) in cache.normed.iter().enumerate() {
            let scale = alpha * xn;
            let mut acc = 0.0;
            for ((dw, &wv), &d) in d_w.row_mut(row).iter_mut().zip(w.row(row)).zip(dz) {
                *dw = scale * d;
                acc += wv * d;
            }
            d_normed[row] += alpha * acc;
        }
    }

    // x̂' = x̂ / rms(x̂)
    let len = d_normed.len() as f64;
    let mean: f64 = d_normed
        .iter()
        .zip(&cache.normed)
        .map(|(d, v)| d * v)
        .sum::<f64>()
        / len;
    for (k, d) in dx.data_mut().iter_mut().enumerate() {
        *d += (d_normed[k] - cache.normed[k] * mean) / cache.rms;
    }

    Ok((grads, dx))
}

/// Gradients of `⟨upstream, block_forward(p, s)⟩` with respect to the
/// parameters and the input state.
pub fn block_backward<B: Branch + ?Sized>(
    p: &BlockParams,
    s: &StreamState,
    f: &B,
    upstream: &Mat,
    sk_iters: usize,
) -> Result<(ParamGrads, Mat)> {
    let trace = block_forward_traced(p, s, f, sk_iters)?;
    backward_from_trace(p, s, &trace, upstream, &mut |u, dy| f.backward(u, dy))
}

/// Central differences of `loss` over every scalar parameter.
pub fn finite_diff_grad<F>(loss: F, p: &BlockParams, eps: f64) -> ParamGrads
where
    F: Fn(&BlockParams) -> f64,
{
    let mut grads = p.zeros_like();
    let mut probe = p.clone();
    for g in 0..9 {
        let len = p.groups()[g].1.len();
        for i in 0..len {
            let orig = p.groups()[g].1[i];
            probe.groups_mut()[g].1[i] = orig + eps;
            let up = loss(&probe);
            probe.groups_mut()[g].1[i] = orig - eps;
            let down = loss(&probe);
            probe.groups_mut()[g].1[i] = orig;
            grads.groups_mut()[g].1[i] = (up - down) / (2.0 * eps);
        }
    }
    grads
}

/// Central differences of `loss` over every entry of `x`.
pub fn finite_diff_input<F>(loss: F, x: &Mat, eps: f64) -> Mat
where
    F: Fn(&Mat) -> f64,
{
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = loss(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = loss(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * eps);
    }
    out
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub seed: u64,
    pub n: usize,
    pub c: usize,
    pub sk_iters: usize,
    /// One entry per parameter group, then `input`.
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= threshold)
    }
}

/// Compares [`block_backward`] with central differences on a squared-error
/// loss `½‖x' − t‖²`. The state, target and tanh branch are drawn from `seed`.
pub fn grad_check(p: &BlockParams, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(p, seed, DEFAULT_SK_ITERS, FD_EPS)
}

pub fn grad_check_with(
    p: &BlockParams,
    seed: u64,
    sk_iters: usize,
    eps: f64,
) -> Result<GradCheckReport> {
    p.validate()?;
    let (n, c) = (p.n, p.c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    };
    let x = Mat::new(n, c, gaussian(n * c))?;
    let target = Mat::new(n, c, gaussian(n * c))?;
    let branch = TanhBranch::random(c, &mut rng);

    let loss_at = |params: &BlockParams, input: &Mat| -> f64 {
        let (out, _) = block_forward(params, &StreamState::new(input.clone()), &branch, sk_iters)
            .expect("shapes already validated");
        0.5 * out
            .x()
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };

    let state = StreamState::new(x.clone());
    let (out, _) = block_forward(p, &state, &branch, sk_iters)?;
    let residual = Mat::new(
        n,
        c,
        out.x()
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| a - b)
            .collect(),
    )?;
    let (analytic, analytic_dx) = block_backward(p, &state, &branch, &residual, sk_iters)?;
    let numeric = finite_diff_grad(|q| loss_at(q, &x), p, eps);
    let numeric_dx = finite_diff_input(|xi| loss_at(p, xi), &x, eps);

    let max_err = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(&a, &b)| rel_err(a, b))
            .fold(0.0, f64::max)
    };
    let mut groups: Vec<GroupError> = analytic
        .groups()
        .iter()
        .zip(numeric.groups().iter())
        .map(|((name, a), (_, b))| GroupError {
            group: name.to_string(),
            max_rel_err: max_err(a, b),
        })
        .collect();
    groups.push(GroupError {
        group: "input".into(),
        max_rel_err: max_err(analytic_dx.data(), numeric_dx.data()),
    });

    Ok(GradCheckReport {
        variant: p.variant,
        seed,
        n,
        c,
        sk_iters,
        groups,
    })
}

/// Draws parameters from `seed` and runs [`grad_check`] on them.
pub fn random_grad_check(
    variant: Variant,
    n: usize,
    c: usize,
    seed: u64,
    sk_iters: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let p = BlockParams::random(variant, n, c, 1.0, &mut rng);
    grad_check_with(&p, seed, sk_iters, FD_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperblock::{init_params, ZeroBranch};
    use crate::sinkhorn::sk_normalize;

    #[test]
    fn fd_of_constant_and_quadratic() {
        let p = init_params(Variant::MhcLite, 2, 2, 0).unwrap();
        let zero = finite_diff_grad(|_| 3.5, &p, FD_EPS);
        assert!(zero.groups().iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));

        let mut q = p.clone();
        q.alpha_pre = 0.7;
        let g = finite_diff_grad(|r| r.alpha_pre * r.alpha_pre, &q, FD_EPS);
        assert!((g.alpha_pre - 1.4).abs() < 1e-9);
        assert!(g.w_res.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lite_at_init_passes_unit_upstream_through() {
        let p = init_params(Variant::MhcLite, 4, 8, 0).unwrap();
        let s = StreamState::new(Mat::filled(4, 8, 0.3));
        let ones = Mat::filled(4, 8, 1.0);
        let (grads, dx) = block_backward(&p, &s, &ZeroBranch, &ones, 20).unwrap();
        for v in dx.data() {
            assert!((v - 1.0).abs() <= 1e-10, "{v}");
        }
        assert_eq!(grads.alpha_res, 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let p = BlockParams::random(v, 3, 4, 1.0, &mut rng);
            let s = StreamState::new(Mat::filled(3, 4, 0.5));
            let branch = TanhBranch::random(4, &mut rng);
            let (g, dx) = block_backward(&p, &s, &branch, &Mat::zeros(3, 4), 20).unwrap();
            assert!(g.groups().iter().all(|(_, vals)| vals.iter().all(|&x| x == 0.0)));
            assert!(dx.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn alpha_res_gradient_vanishes_with_zero_weights() {
        for v in Variant::ALL {
            let p = init_params(v, 4, 4, 0).unwrap();
            let s = StreamState::new(Mat::filled(4, 4, 1.0));
            let up = Mat::filled(4, 4, 0.7);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let branch = TanhBranch::random(4, &mut rng);
            let (g, _) = block_backward(&p, &s, &branch, &up, 20).unwrap();
            assert_eq!(g.alpha_res, 0.0);
        }
    }

    #[test]
    fn softmax_logit_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = BlockParams::random(Variant::MhcLite, 4, 4, 1.0, &mut rng);
            let x = Mat::new(4, 4, (0..16).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let up = Mat::new(4, 4, (0..16).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let branch = TanhBranch::random(4, &mut rng);
            let (g, _) = block_backward(&p, &StreamState::new(x), &branch, &up, 20).unwrap();
            let s: f64 = g.b_res.iter().sum();
            assert!(s.abs() <= 1e-12, "{s}");
        }
    }

    /// Closed-form Jacobian of one column-then-row pass:
    /// `R_ij = (M_ij / s_j) / t_i` with `s_j = Σ_k M_kj`, `t_i = Σ_k M_ik / s_k`.
    fn one_iteration_adjoint(m: &Mat, g: &Mat) -> Mat {
        let n = m.rows();
        let s: Vec<f64> = (0..n).map(|j| (0..n).map(|k| m[(k, j)]).sum()).collect();
        let t: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| m[(i, k)] / s[k]).sum())
            .collect();
        let mut out = Mat::zeros(n, n);
        for p in 0..n {
            for q in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let c_ij = m[(i, j)] / s[j];
                        // dC_ij/dM_pq
                        let dc = |i: usize, j: usize| -> f64 {
                            let mut v = 0.0;
                            if j == q {
                                if i == p {
                                    v += 1.0 / s[j];
                                }
                                v -= m[(i, j)] / (s[j] * s[j]);
                            }
                            v
                        };
                        let dt: f64 = (0..n).map(|k| dc(i, k)).sum();
                        let dr = dc(i, j) / t[i] - c_ij * dt / (t[i] * t[i]);
                        acc += g[(i, j)] * dr;
                    }
                }
                out[(p, q)] = acc;
            }
        }
        out
    }

    #[test]
    fn single_iteration_adjoint_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let m = Mat::new(4, 4, (0..16).map(|_| rng.random_range(0.05..3.0)).collect()).unwrap();
            let g = Mat::new(4, 4, (0..16).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let report = sk_normalize(&m, 1, 0.0).unwrap();
            let taped = sk_backward(&report, &g).unwrap();
            let closed = one_iteration_adjoint(&m, &g);
            assert!(taped.max_abs_diff(&closed) <= 1e-12);
        }
    }

    #[test]
    fn grad_check_each_variant() {
        for (v, tol) in [
            (Variant::MhcLite, 1e-5),
            (Variant::Mhc, 1e-4),
            (Variant::Unconstrained, 1e-6),
        ] {
            let r = random_grad_check(v, 4, 8, 17, 20).unwrap();
            assert!(r.passes(tol), "{v}: {:?}", r.groups);
            assert_eq!(r.groups.len(), 10);
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-16);
        assert!((rel_err(1.0, 1.0 + 1e-6) - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }
}
