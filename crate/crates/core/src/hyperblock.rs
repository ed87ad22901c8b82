//! Multi-stream residual block with three choices of residual mixing map.
//!
//! For a state `x` of shape `n x C` the block computes
//!
//! ```text
//! x' = H_res x + H_postᵀ f(H_pre x)
//! ```
//!
//! where `H_pre`, `H_post` are `1 x n` gates and `H_res` is `n x n`. All three
//! maps are affine in the RMS-normalised flattened state `x̂'`:
//!
//! * `H_pre = sigmoid(α_pre x̂' W_pre + b_pre)`
//! * `H_post = 2 sigmoid(α_post x̂' W_post + b_post)`
//! * `H_res` depends on [`Variant`]:
//!   - `Unconstrained`: the raw logits reshaped to `n x n`;
//!   - `Mhc`: Sinkhorn–Knopp applied to the entrywise exponential;
//!   - `MhcLite`: a softmax over `n!` logits mixing all permutation matrices.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::birkhoff::{build_basis, combine_raw, BirkhoffWeights, PermBasis};
use crate::error::{Error, Result};
use crate::matcore::{
    permutations_lex, rms, sigmoid, vecmat, Mat, MAX_PERM_ORDER,
};
use crate::sinkhorn::{sk_normalize, SKReport};

/// Logits are clamped to this magnitude before `exp` on the Sinkhorn path.
pub const EXP_CLAMP: f64 = 40.0;

/// Initial value of the three scalar gains.
pub const INIT_ALPHA: f64 = 0.01;

/// Off-identity bias at initialisation.
pub const INIT_OFF_BIAS: f64 = -8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Unconstrained,
    Mhc,
    MhcLite,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unconstrained, Variant::Mhc, Variant::MhcLite];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Unconstrained => "unconstrained",
            Variant::Mhc => "mhc",
            Variant::MhcLite => "mhc-lite",
        }
    }

    /// Width of the residual logit vector: `n²`, or `n!` for mHC-lite.
    pub fn res_width(self, n: usize) -> usize {
        match self {
            Variant::Unconstrained | Variant::Mhc => n * n,
            Variant::MhcLite => (1..=n).product(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "unconstrained" | "hc" => Ok(Variant::Unconstrained),
            "mhc" => Ok(Variant::Mhc),
            "mhc-lite" | "mhclite" | "lite" => Ok(Variant::MhcLite),
            other => Err(Error::Argument(format!("unknown variant '{other}'"))),
        }
    }
}

/// Permutation basis of order `n`, built on first use and shared.
pub fn shared_basis(n: usize) -> Result<&'static PermBasis> {
    static BASES: [OnceLock<PermBasis>; MAX_PERM_ORDER + 1] =
        [const { OnceLock::new() }; MAX_PERM_ORDER + 1];
    if n == 0 || n > MAX_PERM_ORDER {
        // Let build_basis produce the capacity error.
        permutations_lex(n)?;
    }
    if let Some(b) = BASES[n].get() {
        return Ok(b);
    }
    let basis = build_basis(n)?;
    Ok(BASES[n].get_or_init(|| basis))
}

/// The `n x C` multi-stream feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    x: Mat,
}

impl StreamState {
    pub fn new(x: Mat) -> Self {
        Self { x }
    }

    pub fn zeros(n: usize, c: usize) -> Self {
        Self { x: Mat::zeros(n, c) }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn c(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn into_mat(self) -> Mat {
        self.x
    }

    /// Stream-major `1 x nC` view.
    pub fn flatten(&self) -> &[f64] {
        self.x.data()
    }
}

/// Learnable parameters of one block.
///
/// The same struct carries gradients (see [`crate::grad::ParamGrads`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    /// `nC x n`
    pub w_pre: Mat,
    /// `nC x n`
    pub w_post: Mat,
    /// `nC x r`, `r = n²` or `n!`
    pub w_res: Mat,
    pub b_pre: Vec<f64>,
    pub b_post: Vec<f64>,
    pub b_res: Vec<f64>,
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub alpha_res: f64,
}

/// Names of the parameter groups, in [`BlockParams::groups`] order.
pub const GROUP_NAMES: [&str; 9] = [
    "w_pre",
    "w_post",
    "w_res",
    "b_pre",
    "b_post",
    "b_res",
    "alpha_pre",
    "alpha_post",
    "alpha_res",
];

impl BlockParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(variant: Variant, n: usize, c: usize) -> Self {
        let r = variant.res_width(n);
        Self {
            variant,
            n,
            c,
            w_pre: Mat::zeros(n * c, n),
            w_post: Mat::zeros(n * c, n),
            w_res: Mat::zeros(n * c, r),
            b_pre: vec![0.0; n],
            b_post: vec![0.0; n],
            b_res: vec![0.0; r],
            alpha_pre: 0.0,
            alpha_post: 0.0,
            alpha_res: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.variant, self.n, self.c)
    }

    pub fn res_width(&self) -> usize {
        self.b_res.len()
    }

    /// Random parameters for tests and benchmarks: Gaussian weights with
    /// standard deviation `scale / sqrt(nC)`, unit-Gaussian biases, gains in
    /// `[0.5, 1.5)`.
    pub fn random<R: Rng + ?Sized>(
        variant: Variant,
        n: usize,
        c: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(variant, n, c);
        let w_std = scale / ((n * c) as f64).sqrt();
        for w in [&mut p.w_pre, &mut p.w_post, &mut p.w_res] {
            for v in w.data_mut() {
                *v = w_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for b in [&mut p.b_pre, &mut p.b_post, &mut p.b_res] {
            for v in b.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
        p.alpha_pre = rng.random_range(0.5..1.5);
        p.alpha_post = rng.random_range(0.5..1.5);
        p.alpha_res = rng.random_range(0.5..1.5);
        p
    }

    /// Checks every shape against `variant`, `n` and `c`, and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if let Some((name, _)) = self
            .groups()
            .into_iter()
            .find(|(_, vals)| vals.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::domain(
                "BlockParams::validate",
                format!("{name} has a non-finite entry"),
            ));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let (n, c) = (self.n, self.c);
        let r = self.variant.res_width(n);
        let expect = [
            ("w_pre", self.w_pre.shape(), (n * c, n)),
            ("w_post", self.w_post.shape(), (n * c, n)),
            ("w_res", self.w_res.shape(), (n * c, r)),
            ("b_pre", (1, self.b_pre.len()), (1, n)),
            ("b_post", (1, self.b_post.len()), (1, n)),
            ("b_res", (1, self.b_res.len()), (1, r)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::shape(
                    "BlockParams::validate",
                    format!("{name} is {got:?}, expected {want:?} for {} n={n} C={c}", self.variant),
                ));
            }
        }
        Ok(())
    }

    /// Parameter groups as named flat slices, in [`GROUP_NAMES`] order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 9] {
        [
            (GROUP_NAMES[0], self.w_pre.data()),
            (GROUP_NAMES[1], self.w_post.data()),
            (GROUP_NAMES[2], self.w_res.data()),
            (GROUP_NAMES[3], &self.b_pre),
            (GROUP_NAMES[4], &self.b_post),
            (GROUP_NAMES[5], &self.b_res),
            (GROUP_NAMES[6], std::slice::from_ref(&self.alpha_pre)),
            (GROUP_NAMES[7], std::slice::from_ref(&self.alpha_post)),
            (GROUP_NAMES[8], std::slice::from_ref(&self.alpha_res)),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        [
            (GROUP_NAMES[0], self.w_pre.data_mut()),
            (GROUP_NAMES[1], self.w_post.data_mut()),
            (GROUP_NAMES[2], self.w_res.data_mut()),
            (GROUP_NAMES[3], &mut self.b_pre),
            (GROUP_NAMES[4], &mut self.b_post),
            (GROUP_NAMES[5], &mut self.b_res),
            (GROUP_NAMES[6], std::slice::from_mut(&mut self.alpha_pre)),
            (GROUP_NAMES[7], std::slice::from_mut(&mut self.alpha_post)),
            (GROUP_NAMES[8], std::slice::from_mut(&mut self.alpha_res)),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.groups().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ParamsFile>(s)?.try_into()
    }
}

/// On-disk form of [`BlockParams`]: a flat object with one array per field.
/// `serde_json` prints shortest round-trip decimals, so `f64` values survive
/// bit for bit.
#[derive(Serialize, Deserialize)]
struct ParamsFile {
    variant: Variant,
    n: usize,
    c: usize,
    res_width: usize,
    w_pre_shape: [usize; 2],
    w_pre: Vec<f64>,
    w_post_shape: [usize; 2],
    w_post: Vec<f64>,
    w_res_shape: [usize; 2],
    w_res: Vec<f64>,
    b_pre: Vec<f64>,
    b_post: Vec<f64>,
    b_res: Vec<f64>,
    alpha_pre: f64,
    alpha_post: f64,
    alpha_res: f64,
}

impl From<&BlockParams> for ParamsFile {
    fn from(p: &BlockParams) -> Self {
        let shape = |m: &Mat| [m.rows(), m.cols()];
        Self {
            variant: p.variant,
            n: p.n,
            c: p.c,
            res_width: p.res_width(),
            w_pre_shape: shape(&p.w_pre),
            w_pre: p.w_pre.data().to_vec(),
            w_post_shape: shape(&p.w_post),
            w_post: p.w_post.data().to_vec(),
            w_res_shape: shape(&p.w_res),
            w_res: p.w_res.data().to_vec(),
            b_pre: p.b_pre.clone(),
            b_post: p.b_post.clone(),
            b_res: p.b_res.clone(),
            alpha_pre: p.alpha_pre,
            alpha_post: p.alpha_post,
            alpha_res: p.alpha_res,
        }
    }
}

impl TryFrom<ParamsFile> for BlockParams {
    type Error = Error;

    fn try_from(f: ParamsFile) -> Result<Self> {
        let p = BlockParams {
            variant: f.variant,
            n: f.n,
            c: f.c,
            w_pre: Mat::new(f.w_pre_shape[0], f.w_pre_shape[1], f.w_pre)?,
            w_post: Mat::new(f.w_post_shape[0], f.w_post_shape[1], f.w_post)?,
            w_res: Mat::new(f.w_res_shape[0], f.w_res_shape[1], f.w_res)?,
            b_pre: f.b_pre,
            b_post: f.b_post,
            b_res: f.b_res,
            alpha_pre: f.alpha_pre,
            alpha_post: f.alpha_post,
            alpha_res: f.alpha_res,
        };
        if f.res_width != p.res_width() {
            return Err(Error::shape(
                "BlockParams::from_json",
                format!("res_width {} but b_res has {}", f.res_width, p.res_width()),
            ));
        }
        p.validate()?;
        Ok(p)
    }
}

/// Parameters under which every block starts as a plain residual connection.
///
/// Weights are zero and gains are 0.01. `b_pre`/`b_post` are -1 except +1 at
/// `pick_index`. `b_res` puts 0 on the identity (diagonal for `Mhc`,
/// permutation 0 for `MhcLite`) and -8 elsewhere. `Unconstrained` uses the
/// raw logits as the matrix, so it gets the identity itself: 1 on the
/// diagonal, 0 elsewhere.
pub fn init_params(variant: Variant, n: usize, c: usize, pick_index: usize) -> Result<BlockParams> {
    if n == 0 || c == 0 {
        return Err(Error::Argument(format!("need n >= 1 and C >= 1, got n={n} C={c}")));
    }
    if variant == Variant::MhcLite && n > MAX_PERM_ORDER {
        return Err(Error::Capacity(format!(
            "mhc-lite needs n! logits; n={n} exceeds {MAX_PERM_ORDER}"
        )));
    }
    if pick_index >= n {
        return Err(Error::Argument(format!(
            "pick_index {pick_index} out of range for n={n}"
        )));
    }
    let mut p = BlockParams::zeros(variant, n, c);
    p.alpha_pre = INIT_ALPHA;
    p.alpha_post = INIT_ALPHA;
    p.alpha_res = INIT_ALPHA;
    for b in [&mut p.b_pre, &mut p.b_post] {
        b.fill(-1.0);
        b[pick_index] = 1.0;
    }
    match variant {
        Variant::Mhc => {
            for i in 0..n {
                for j in 0..n {
                    p.b_res[i * n + j] = if i == j { 0.0 } else { INIT_OFF_BIAS };
                }
            }
        }
        Variant::MhcLite => {
            p.b_res.fill(INIT_OFF_BIAS);
            p.b_res[0] = 0.0;
        }
        Variant::Unconstrained => {
            for i in 0..n {
                p.b_res[i * n + i] = 1.0;
            }
        }
    }
    Ok(p)
}

/// Intermediates of [`compute_maps`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MapCache {
    /// RMS of the flattened input (including the stabiliser).
    pub rms: f64,
    /// `x̂'`
    pub normed: Vec<f64>,
    /// `x̂' W_pre`, `x̂' W_post`, `x̂' W_res` before gain and bias.
    pub proj_pre: Vec<f64>,
    pub proj_post: Vec<f64>,
    pub proj_res: Vec<f64>,
    /// Residual logits `α_res x̂' W_res + b_res`.
    pub z_res: Vec<f64>,
}

/// The three maps of one block evaluation.
#[derive(Clone, Debug)]
pub struct MixMaps {
    /// `1 x n`, entries in (0, 1)
    pub h_pre: Vec<f64>,
    /// `1 x n`, entries in (0, 2)
    pub h_post: Vec<f64>,
    pub h_res: Mat,
    /// Softmax weights over permutations (`MhcLite`).
    pub a_weights: Option<BirkhoffWeights>,
    /// Sinkhorn run (`Mhc`); its `input` is the pre-projection matrix.
    pub sk_report: Option<SKReport>,
    pub cache: MapCache,
}

impl MixMaps {
    /// Matrix handed to Sinkhorn–Knopp, for `Mhc` only.
    pub fn pre_sk(&self) -> Option<&Mat> {
        self.sk_report.as_ref().map(|r| &r.input)
    }
}

fn affine(alpha: f64, proj: &[f64], bias: &[f64]) -> Vec<f64> {
    proj.iter().zip(bias).map(|(p, b)| alpha * p + b).collect()
}

pub fn compute_maps(p: &BlockParams, s: &StreamState, sk_iters: usize) -> Result<MixMaps> {
    if s.x.shape() != (p.n, p.c) {
        return Err(Error::shape(
            "compute_maps",
            format!("state {:?} for params n={} C={}", s.x.shape(), p.n, p.c),
        ));
    }
    // Shapes only: the full finiteness scan is too costly per token.
    p.check_shapes()?;
    let n = p.n;

    let flat = s.flatten();
    let r = rms(flat);
    let normed: Vec<f64> = flat.iter().map(|v| v / r).collect();

    let proj_pre = vecmat(&normed, &p.w_pre);
    let proj_post = vecmat(&normed, &p.w_post);
    let proj_res = vecmat(&normed, &p.w_res);

    let h_pre: Vec<f64> = affine(p.alpha_pre, &proj_pre, &p.b_pre)
        .into_iter()
        .map(sigmoid)
        .collect();
    let h_post: Vec<f64> = affine(p.alpha_post, &proj_post, &p.b_post)
        .into_iter()
        .map(|z| 2.0 * sigmoid(z))
        .collect();
    let z_res = affine(p.alpha_res, &proj_res, &p.b_res);

    let (h_res, a_weights, sk_report) = match p.variant {
        Variant::Unconstrained => (Mat::new(n, n, z_res.clone())?, None, None),
        Variant::Mhc => {
            if sk_iters == 0 {
                return Err(Error::Argument("mhc needs sk_iters >= 1".into()));
            }
            let e = Mat::new(
                n,
                n,
                z_res
                    .iter()
                    .map(|z| z.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
                    .collect(),
            )?;
            let report = sk_normalize(&e, sk_iters, 0.0)?;
            (report.result.clone(), None, Some(report))
        }
        Variant::MhcLite => {
            let basis = shared_basis(n)?;
            let a = BirkhoffWeights::from_logits(&z_res);
            let h = combine_raw(basis, a.as_slice())?;
            (h, Some(a), None)
        }
    };

    Ok(MixMaps {
        h_pre,
        h_post,
        h_res,
        a_weights,
        sk_report,
        cache: MapCache {
            rms: r,
            normed,
            proj_pre,
            proj_post,
            proj_res,
            z_res,
        },
    })
}

/// The per-block branch `f: R^{1xC} -> R^{1xC}` together with its adjoint.
pub trait Branch {
    fn forward(&self, u: &[f64]) -> Vec<f64>;

    /// Vector-Jacobian product at `u`.
    fn backward(&self, u: &[f64], grad_out: &[f64]) -> Vec<f64>;
}

/// `f ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroBranch;

impl Branch for ZeroBranch {
    fn forward(&self, u: &[f64]) -> Vec<f64> {
        vec![0.0; u.len()]
    }

    fn backward(&self, u: &[f64], _grad_out: &[f64]) -> Vec<f64> {
        vec![0.0; u.len()]
    }
}

/// `f(u) = tanh(u W)` with a fixed `C x C` matrix.
#[derive(Clone, Debug)]
pub struct TanhBranch {
    pub w: Mat,
}

impl TanhBranch {
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        let data = (0..c * c)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            w: Mat::new(c, c, data).expect("finite gaussian draws"),
        }
    }
}

impl Branch for TanhBranch {
    fn forward(&self, u: &[f64]) -> Vec<f64> {
        vecmat(u, &self.w).into_iter().map(f64::tanh).collect()
    }

    fn backward(&self, u: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let pre = vecmat(u, &self.w);
        let d_pre: Vec<f64> = pre
            .iter()
            .zip(grad_out)
            .map(|(z, g)| g * (1.0 - z.tanh().powi(2)))
            .collect();
        // d_u = W d_pre
        (0..self.w.rows())
            .map(|i| self.w.row(i).iter().zip(&d_pre).map(|(w, d)| w * d).sum())
            .collect()
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub maps: MixMaps,
    /// `H_pre x`
    pub branch_in: Vec<f64>,
    /// `f(H_pre x)`
    pub branch_out: Vec<f64>,
    pub output: StreamState,
}

/// Mixes an already-computed set of maps into the state.
pub fn apply_maps(maps: &MixMaps, x: &Mat, branch_out: &[f64]) -> Mat {
    let mut next = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let out = next.row_mut(i);
        for (j, &h) in maps.h_res.row(i).iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(x.row(j)) {
                *o += h * v;
            }
        }
        let hp = maps.h_post[i];
        for (o, &y) in out.iter_mut().zip(branch_out) {
            *o += hp * y;
        }
    }
    next
}

pub(crate) fn pool_streams(weights: &[f64], x: &Mat) -> Vec<f64> {
    vecmat(weights, x)
}

/// Forward pass that also returns the intermediates for [`crate::grad`].
pub fn block_forward_traced<B: Branch + ?Sized>(
    p: &BlockParams,
    s: &StreamState,
    f: &B,
    sk_iters: usize,
) -> Result<BlockTrace> {
    let maps = compute_maps(p, s, sk_iters)?;
    let branch_in = pool_streams(&maps.h_pre, &s.x);
    let branch_out = f.forward(&branch_in);
    if branch_out.len() != p.c {
        return Err(Error::Contract(format!(
            "branch returned {} values, expected C={}",
            branch_out.len(),
            p.c
        )));
    }
    let output = StreamState::new(apply_maps(&maps, &s.x, &branch_out));
    Ok(BlockTrace {
        maps,
        branch_in,
        branch_out,
        output,
    })
}

/// `x' = H_res x + H_postᵀ f(H_pre x)`.
pub fn block_forward<B: Branch + ?Sized>(
    p: &BlockParams,
    s: &StreamState,
    f: &B,
    sk_iters: usize,
) -> Result<(StreamState, MixMaps)> {
    let t = block_forward_traced(p, s, f, sk_iters)?;
    Ok((t.output, t.maps))
}
