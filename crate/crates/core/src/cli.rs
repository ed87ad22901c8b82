//! `mhclite` command-line front end.
//!
//! Data goes to stdout (or the file named by `--out`), diagnostics to
//! stderr. Exit codes: 0 success, 1 failed check or runtime error, 2 usage.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::analyze::{self, column_sum_groups, emit_report, emit_report_csv, nu_scan, Harvest};
use crate::birkhoff::{birkhoff_decompose, combine};
use crate::error::{Error, Result};
use crate::grad::{random_grad_check, GradCheckReport, GRAD_CHECK_TOL};
use crate::hyperblock::{block_forward, shared_basis, BlockParams, StreamState, Variant, ZeroBranch};
use crate::matcore::{col_sums, row_sums, DSError, Mat};
use crate::sinkhorn::{adverse_matrix, sk_normalize, DEFAULT_SK_ITERS};
use crate::toytrain::{harvest_hres, make_task, train, ModelConfig, ToyModel, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mhclite", version, about = "Doubly stochastic residual mixing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run Sinkhorn–Knopp on the 3x3 slow-convergence matrix.
    SkDemo(SkDemoArgs),
    /// ln(1/nu) statistics of the pre-projection matrices in a harvest file.
    NuScan(ReportArgs),
    /// Column-sum statistics (per matrix and depth product) of a harvest file.
    Colsum(ReportArgs),
    /// Birkhoff decomposition of a doubly stochastic JSON matrix.
    Decompose(DecomposeArgs),
    /// Analytic vs finite-difference gradients on random blocks.
    GradCheck(GradCheckArgs),
    /// Train the toy model and write the per-step log as CSV.
    Train(RunConfig),
    /// Median forward latency per block for each variant.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SkDemoArgs {
    #[arg(long, default_value_t = 1e-13)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    iters: usize,
    /// Stop early once the ℓ1 error is at or below this.
    #[arg(long, default_value_t = 0.0)]
    tol: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Harvest file written by `train --harvest-out`.
    harvest: PathBuf,
    /// Report destination; `.csv` selects CSV, anything else JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label prefix (defaults to the harvest's variant).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// JSON array-of-arrays; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// One variant; all three when absent.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Stream widths to test; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize])]
    c: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    sk_iters: usize,
    #[arg(long, default_value_t = GRAD_CHECK_TOL)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    json: bool,
}

/// Everything `train` needs; checked by [`RunConfig::validate`] before any
/// work starts.
#[derive(Args, Debug, Clone)]
struct RunConfig {
    #[arg(long, default_value = "mhc-lite")]
    variant: Variant,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    sk_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Minibatch size; full batch when absent.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 8)]
    d_in: usize,
    #[arg(long, default_value_t = 4)]
    d_out: usize,
    /// CSV log destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained model's per-token H_res matrices here.
    #[arg(long)]
    harvest_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    harvest_tokens: usize,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(1..=crate::matcore::MAX_PERM_ORDER).contains(&self.n) {
            return bad(format!("--n must be in 1..={}", crate::matcore::MAX_PERM_ORDER));
        }
        if self.c == 0 || self.layers == 0 || self.steps == 0 || self.samples == 0 {
            return bad("--c, --layers, --steps and --samples must be positive".into());
        }
        if self.d_in == 0 || self.d_out == 0 {
            return bad("--d-in and --d-out must be positive".into());
        }
        if self.variant == Variant::Mhc && self.sk_iters == 0 {
            return bad("--sk-iters must be positive for mhc".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("--lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == Some(0) {
            return bad("--batch-size must be positive".into());
        }
        if self.harvest_out.is_some() && self.harvest_tokens > self.samples {
            return bad(format!(
                "--harvest-tokens {} exceeds --samples {}",
                self.harvest_tokens, self.samples
            ));
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 768)]
    c: usize,
    /// Timed repetitions per variant.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Tokens pushed through the block per repetition.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_SK_ITERS)]
    sk_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads sharing the repetitions.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    json: bool,
}

/// Parses `argv` (program name first) and runs the subcommand against the
/// process's stdin/stdout/stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(argv, &mut io::stdin().lock(), &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit streams.
pub fn run_with<I, T>(
    argv: I,
    input: &mut dyn Read,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().ansi().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let outcome = match cli.command {
        Command::SkDemo(a) => sk_demo(&a, out),
        Command::NuScan(a) => nu_scan_cmd(&a, out),
        Command::Colsum(a) => colsum_cmd(&a, out),
        Command::Decompose(a) => decompose_cmd(&a, input, out),
        Command::GradCheck(a) => grad_check_cmd(&a, out, err),
        Command::Train(a) => train_cmd(&a, out, err),
        Command::Bench(a) => bench_cmd(&a, out, err),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Argument(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn io_err(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out).map_err(io_err)
}

fn join(v: &[f64], prec: usize) -> String {
    v.iter()
        .map(|x| format!("{x:.prec$}"))
        .collect::<Vec<_>>()
        .join("  ")
}

#[derive(Serialize)]
struct SkDemoOutput {
    alpha: f64,
    iters: usize,
    input: Mat,
    output: Mat,
    column_sums: Vec<f64>,
    row_sums: Vec<f64>,
    iterations_run: usize,
    converged: bool,
    l1_trace: Vec<DSError>,
    elapsed_ns: u128,
}

fn sk_demo(a: &SkDemoArgs, out: &mut dyn Write) -> Result<i32> {
    if !(a.alpha.is_finite() && a.alpha > 0.0) {
        return Err(Error::Argument(format!("--alpha must be positive, got {}", a.alpha)));
    }
    if a.iters == 0 {
        return Err(Error::Argument("--iters must be positive".into()));
    }
    let input = adverse_matrix(a.alpha);
    let start = Instant::now();
    let report = sk_normalize(&input, a.iters, a.tol)?;
    let elapsed_ns = start.elapsed().as_nanos();
    let res = SkDemoOutput {
        alpha: a.alpha,
        iters: a.iters,
        column_sums: col_sums(&report.result),
        row_sums: row_sums(&report.result),
        output: report.result.clone(),
        iterations_run: report.iterations_run,
        converged: report.converged,
        l1_trace: report.l1_trace.clone(),
        elapsed_ns,
        input,
    };
    if a.json {
        write_json(out, &res)?;
        return Ok(0);
    }
    let mut text = format!("input (alpha = {:e}):\n", a.alpha);
    for r in res.input.to_rows() {
        text += &format!("  {}\n", join(&r, 6));
    }
    text += &format!("output after {} iterations:\n", res.iterations_run);
    for r in res.output.to_rows() {
        text += &format!("  {}\n", join(&r, 6));
    }
    text += &format!("column sums: {}\n", join(&res.column_sums, 6));
    text += &format!("row sums:    {}\n", join(&res.row_sums, 6));
    text += "iter  row_l1  col_l1  total\n";
    for (k, e) in res.l1_trace.iter().enumerate() {
        text += &format!("{:>4}  {:.6e}  {:.6e}  {:.6e}\n", k + 1, e.row_l1, e.col_l1, e.total);
    }
    text += &format!("converged: {}  ({} ns)\n", res.converged, res.elapsed_ns);
    out.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(0)
}

fn write_report(stats: &[analyze::StabilityStats], dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
            emit_report_csv(stats, p)
        }
        Some(p) => emit_report(stats, p),
        None => write_json(out, &stats),
    }
}

fn nu_scan_cmd(a: &ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let h = Harvest::load(&a.harvest)?;
    if h.pre_sk.is_empty() {
        return Err(Error::domain(
            "nu-scan",
            format!("harvest for {} has no pre-projection matrices", h.variant),
        ));
    }
    let scan = nu_scan(&h.pre_sk)?;
    let label = a.label.clone().unwrap_or_else(|| h.variant.to_string());
    let stats = scan.stats.clone().with_label(format!("{label}/ln(1/nu)"));
    match &a.out {
        Some(_) => write_report(std::slice::from_ref(&stats), a.out.as_deref(), out)?,
        None => write_json(
            out,
            &serde_json::json!({
                "stats": stats,
                "threshold": analyze::nu_threshold(),
                "frac_above_threshold": scan.frac_above_threshold,
            }),
        )?,
    }
    Ok(0)
}

fn colsum_cmd(a: &ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let h = Harvest::load(&a.harvest)?;
    let label = a.label.clone().unwrap_or_else(|| h.variant.to_string());
    let stats = column_sum_groups(&label, &h)?;
    write_report(&stats, a.out.as_deref(), out)?;
    Ok(0)
}

#[derive(Serialize)]
struct SupportEntry {
    index: usize,
    perm: Vec<usize>,
    weight: f64,
}

fn decompose_cmd(a: &DecomposeArgs, input: &mut dyn Read, out: &mut dyn Write) -> Result<i32> {
    let text = match &a.input {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => {
            let mut s = String::new();
            input
                .read_to_string(&mut s)
                .map_err(|e| Error::io("<stdin>", e))?;
            s
        }
    };
    let m: Mat = serde_json::from_str(&text)?;
    if !m.is_square() {
        return Err(Error::shape("decompose", format!("{:?} is not square", m.shape())));
    }
    let basis = shared_basis(m.rows())?;
    let w = birkhoff_decompose(&m, basis)?;
    let residual = combine(basis, &w)?.max_abs_diff(&m);
    let support: Vec<SupportEntry> = w
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(k, &v)| SupportEntry {
            index: k,
            perm: basis.one_line(k).to_vec(),
            weight: v,
        })
        .collect();
    write_json(
        out,
        &serde_json::json!({
            "n": m.rows(),
            "weights": w.as_slice(),
            "support": support,
            "max_abs_residual": residual,
        }),
    )?;
    Ok(0)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Argument("--jobs must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {jobs} workers: {e}")))
}

fn grad_check_cmd(a: &GradCheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if a.seeds == 0 || a.c.is_empty() || a.c.contains(&0) {
        return Err(Error::Argument("--seeds and every --c must be positive".into()));
    }
    let variants: Vec<Variant> = match a.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut cases = Vec::new();
    for &v in &variants {
        for &c in &a.c {
            for seed in a.seed..a.seed + a.seeds {
                cases.push((v, c, seed));
            }
        }
    }
    let pool = thread_pool(a.jobs)?;
    let reports: Vec<GradCheckReport> = pool.install(|| {
        cases
            .par_iter()
            .map(|&(v, c, seed)| random_grad_check(v, a.n, c, seed, a.sk_iters))
            .collect::<Result<_>>()
    })?;
    let failures = reports.iter().filter(|r| !r.passes(a.threshold)).count();
    if a.json {
        write_json(out, &reports)?;
    } else {
        let mut text = String::from("variant        seed     n    C  max_rel_err  worst_group  result\n");
        for r in &reports {
            let worst = r
                .groups
                .iter()
                .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err))
                .map_or("-", |g| g.group.as_str());
            text += &format!(
                "{:<13} {:>5} {:>5} {:>4}  {:.3e}    {:<11}  {}\n",
                r.variant.as_str(),
                r.seed,
                r.n,
                r.c,
                r.max_rel_err(),
                worst,
                if r.passes(a.threshold) { "PASS" } else { "FAIL" }
            );
        }
        out.write_all(text.as_bytes()).map_err(io_err)?;
    }
    let _ = writeln!(
        err,
        "{} of {} checks within {:e}",
        reports.len() - failures,
        reports.len(),
        a.threshold
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

fn train_cmd(a: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    a.validate()?;
    let data = make_task(a.seed, a.d_in, a.d_out, a.samples)?;
    let mut model = ToyModel::new(&ModelConfig {
        variant: a.variant,
        n: a.n,
        c: a.c,
        layers: a.layers,
        d_in: a.d_in,
        d_out: a.d_out,
        sk_iters: a.sk_iters,
        seed: a.seed,
    })?;
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &data, &cfg)?;
    match &a.out {
        Some(p) => log.write_csv(p)?,
        None => out.write_all(log.to_csv().as_bytes()).map_err(io_err)?,
    }
    let window = (a.steps / 20).max(1);
    let (first, last) = log.smoothed_endpoints(window);
    let max_ds = log.records.iter().map(|r| r.max_ds_error).fold(0.0, f64::max);
    let _ = writeln!(
        err,
        "{} L={} C={}: loss {first:.4e} -> {last:.4e} (mean of {window} steps), max ds_error {max_ds:.3e}",
        a.variant, a.layers, a.c
    );
    if let Some(p) = &a.harvest_out {
        harvest_hres(&model, &data, a.harvest_tokens)?.save(p)?;
        let _ = writeln!(err, "harvest: {} tokens -> {}", a.harvest_tokens, p.display());
    }
    Ok(0)
}

/// Latency summary for one variant.
#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub sk_iters: usize,
    pub reps: usize,
    pub median_ns_per_block: f64,
    pub p10_ns_per_block: f64,
    pub p90_ns_per_block: f64,
}

/// Bench sizes shared by every variant.
#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub n: usize,
    pub c: usize,
    pub sk_iters: usize,
    pub reps: usize,
    /// Tokens pushed through the block per repetition.
    pub batch: usize,
    pub seed: u64,
    pub jobs: usize,
}

/// Times `block_forward` with a zero branch so only the mixing maps and the
/// stream update differ between variants. Variants are interleaved within
/// each repetition so background load hits all of them alike. Samples are
/// per-repetition ns/token.
pub fn bench_variants(variants: &[Variant], spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    let BenchSpec { n, c, sk_iters, reps, batch, seed, jobs } = *spec;
    if reps == 0 || batch == 0 {
        return Err(Error::Argument("--reps and --batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<StreamState> = (0..batch)
        .map(|_| {
            let data = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
            Mat::new(n, c, data).map(StreamState::new)
        })
        .collect::<Result<_>>()?;
    let params: Vec<BlockParams> = variants
        .iter()
        .map(|&v| BlockParams::random(v, n, c, 1.0, &mut rng))
        .collect();
    let time_one = |p: &BlockParams| -> Result<f64> {
        let start = Instant::now();
        for s in &states {
            std::hint::black_box(block_forward(p, s, &ZeroBranch, sk_iters)?);
        }
        Ok(start.elapsed().as_nanos() as f64 / batch as f64)
    };
    let time_rep = |rep: usize| -> Result<Vec<f64>> {
        let k = params.len();
        let mut row = vec![0.0; k];
        for j in 0..k {
            let v = (rep + j) % k;
            row[v] = time_one(&params[v])?;
        }
        Ok(row)
    };
    // Warm caches and the shared permutation basis.
    time_rep(0)?;
    let pool = thread_pool(jobs)?;
    let rows: Vec<Vec<f64>> =
        pool.install(|| (0..reps).into_par_iter().map(time_rep).collect::<Result<_>>())?;
    variants
        .iter()
        .enumerate()
        .map(|(v, &variant)| {
            let mut samples: Vec<f64> = rows.iter().map(|r| r[v]).collect();
            samples.sort_by(f64::total_cmp);
            let stats = analyze::summarize(variant.as_str(), &samples)?;
            let q = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
            Ok(BenchResult {
                variant,
                n,
                c,
                sk_iters,
                reps,
                median_ns_per_block: stats.median,
                p10_ns_per_block: q(0.1),
                p90_ns_per_block: q(0.9),
            })
        })
        .collect()
}

fn bench_cmd(a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if !(1..=crate::matcore::MAX_PERM_ORDER).contains(&a.n) || a.c == 0 || a.sk_iters == 0 {
        return Err(Error::Argument("bench needs 1<=n<=8, C>=1 and sk_iters>=1".into()));
    }
    let spec = BenchSpec {
        n: a.n,
        c: a.c,
        sk_iters: a.sk_iters,
        reps: a.reps,
        batch: a.batch,
        seed: a.seed,
        jobs: a.jobs,
    };
    let results = bench_variants(&[Variant::Mhc, Variant::MhcLite, Variant::Unconstrained], &spec)?;
    if a.json {
        write_json(out, &results)?;
    } else {
        let mut text = format!(
            "n={} C={} reps={} batch={} (sk_iters={} for mhc)\nvariant        median_ns  p10_ns     p90_ns\n",
            a.n, a.c, a.reps, a.batch, a.sk_iters
        );
        for r in &results {
            text += &format!(
                "{:<13}  {:>9.0}  {:>9.0}  {:>9.0}\n",
                r.variant.as_str(),
                r.median_ns_per_block,
                r.p10_ns_per_block,
                r.p90_ns_per_block
            );
        }
        out.write_all(text.as_bytes()).map_err(io_err)?;
    }
    let mhc = results[0].median_ns_per_block;
    let lite = results[1].median_ns_per_block;
    let _ = writeln!(err, "mhc-lite / mhc median ratio: {:.3}", lite / mhc);
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str], stdin: &str) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("mhclite").chain(args.iter().copied());
        let code = run_with(argv, &mut stdin.as_bytes(), &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_are_nonzero() {
        assert_eq!(call(&["frobnicate"], "").0, 2);
        assert_eq!(call(&["sk-demo", "--alpha", "x"], "").0, 2);
        assert_eq!(call(&["sk-demo", "--alpha", "-1"], "").0, 2);
        assert_eq!(call(&[], "").0, 2);
        let (code, out, _) = call(&["--help"], "");
        assert_eq!(code, 0);
        assert!(out.contains("sk-demo"));
    }

    #[test]
    fn sk_demo_json_fields() {
        let (code, out, _) = call(&["sk-demo", "--json"], "");
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["iterations_run"], 20);
        assert_eq!(v["l1_trace"].as_array().unwrap().len(), 20);
        assert_eq!(v["output"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn well_conditioned_sk_demo_converges() {
        let (code, out, _) = call(&["sk-demo", "--alpha", "0.25", "--json"], "");
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let trace = v["l1_trace"].as_array().unwrap();
        assert!(trace.last().unwrap()["total"].as_f64().unwrap() <= 1e-6);
    }

    #[test]
    fn decompose_from_stdin() {
        let (code, out, _) = call(&["decompose"], "[[0.5,0.5],[0.5,0.5]]");
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["support"].as_array().unwrap().len(), 2);
        assert!(v["max_abs_residual"].as_f64().unwrap() <= 1e-15);

        assert_eq!(call(&["decompose"], "[[1,0],[1,0]]").0, 1);
        assert_eq!(call(&["decompose"], "not json").0, 1);
    }

    #[test]
    fn grad_check_exit_codes() {
        let (code, out, _) = call(&["grad-check", "--variant", "mhc-lite", "--seed", "7"], "");
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("PASS"));
        let (code, _, _) = call(
            &["grad-check", "--variant", "mhc", "--threshold", "0"],
            "",
        );
        assert_eq!(code, 1);
    }

    #[test]
    fn train_validates_before_running() {
        assert_eq!(call(&["train", "--layers", "0"], "").0, 2);
        assert_eq!(call(&["train", "--n", "9"], "").0, 2);
        assert_eq!(
            call(&["train", "--samples", "4", "--harvest-out", "x.json"], "").0,
            2
        );
    }

    #[test]
    fn bench_runs_small() {
        let (code, out, _) = call(
            &["bench", "--c", "4", "--reps", "5", "--batch", "2", "--json"],
            "",
        );
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 3);
    }
}
