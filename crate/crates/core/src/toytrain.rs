//! Desk-scale training harness: an `L`-layer multi-stream network with a
//! two-layer tanh perceptron per block, fit to a synthetic teacher with
//! AdamW, global-norm clipping and warmup + cosine decay.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::{fmt_f64, Harvest};
use crate::error::{Error, Result};
use crate::grad::backward_from_trace;
use crate::hyperblock::{
    block_forward_traced, init_params, BlockParams, BlockTrace, Branch, StreamState, Variant,
};
use crate::matcore::{ds_error, vecmat, Mat};
use crate::sinkhorn::DEFAULT_SK_ITERS;

/// Hidden width of the teacher network in [`make_task`].
pub const TEACHER_HIDDEN: usize = 32;

/// Inputs and regression targets, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub targets: Mat,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gaussian_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::new(rows, cols, data).expect("finite gaussian draws")
}

/// Standard-normal inputs labelled by a fixed random teacher
/// `tanh(x W1 / √d_in) W2 / √hidden`.
pub fn make_task(seed: u64, d_in: usize, d_out: usize, samples: usize) -> Result<Dataset> {
    if samples == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::Argument(format!(
            "make_task needs positive sizes, got samples={samples} d_in={d_in} d_out={d_out}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = gaussian_mat(&mut rng, d_in, TEACHER_HIDDEN, 1.0 / (d_in as f64).sqrt());
    let w2 = gaussian_mat(&mut rng, TEACHER_HIDDEN, d_out, 1.0 / (TEACHER_HIDDEN as f64).sqrt());
    let inputs = gaussian_mat(&mut rng, samples, d_in, 1.0);
    let mut targets = Vec::with_capacity(samples * d_out);
    for s in 0..samples {
        let h: Vec<f64> = vecmat(inputs.row(s), &w1).into_iter().map(f64::tanh).collect();
        targets.extend(vecmat(&h, &w2));
    }
    Ok(Dataset {
        inputs,
        targets: Mat::new(samples, d_out, targets)?,
    })
}

/// `f(u) = tanh(u W1 + b1) W2 + b2`, `C -> 4C -> C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(c: usize) -> Self {
        Self {
            w1: Mat::zeros(c, 4 * c),
            b1: vec![0.0; 4 * c],
            w2: Mat::zeros(4 * c, c),
            b2: vec![0.0; c],
        }
    }

    fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            w1: gaussian_mat(rng, c, 4 * c, 1.0 / (c as f64).sqrt()),
            b1: vec![0.0; 4 * c],
            w2: gaussian_mat(rng, 4 * c, c, 0.5 / ((4 * c) as f64).sqrt()),
            b2: vec![0.0; c],
        }
    }

    fn hidden(&self, u: &[f64]) -> Vec<f64> {
        vecmat(u, &self.w1)
            .into_iter()
            .zip(&self.b1)
            .map(|(z, b)| (z + b).tanh())
            .collect()
    }

    /// Input gradient; parameter gradients are added into `grads`.
    fn backward_into(&self, u: &[f64], dy: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let h = self.hidden(u);
        for (k, &hk) in h.iter().enumerate() {
            for (g, d) in grads.w2.row_mut(k).iter_mut().zip(dy) {
                *g += hk * d;
            }
        }
        for (g, d) in grads.b2.iter_mut().zip(dy) {
            *g += d;
        }
        let d_pre: Vec<f64> = (0..h.len())
            .map(|k| {
                let dh: f64 = self.w2.row(k).iter().zip(dy).map(|(w, d)| w * d).sum();
                dh * (1.0 - h[k] * h[k])
            })
            .collect();
        for (i, &ui) in u.iter().enumerate() {
            for (g, d) in grads.w1.row_mut(i).iter_mut().zip(&d_pre) {
                *g += ui * d;
            }
        }
        for (g, d) in grads.b1.iter_mut().zip(&d_pre) {
            *g += d;
        }
        (0..u.len())
            .map(|i| self.w1.row(i).iter().zip(&d_pre).map(|(w, d)| w * d).sum())
            .collect()
    }
}

impl Branch for Mlp {
    fn forward(&self, u: &[f64]) -> Vec<f64> {
        let h = self.hidden(u);
        vecmat(&h, &self.w2)
            .into_iter()
            .zip(&self.b2)
            .map(|(y, b)| y + b)
            .collect()
    }

    fn backward(&self, u: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut scratch = Mlp::zeros(u.len());
        self.backward_into(u, grad_out, &mut scratch)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub layers: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub sk_iters: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MhcLite,
            n: 4,
            c: 16,
            layers: 6,
            d_in: 8,
            d_out: 4,
            sk_iters: DEFAULT_SK_ITERS,
            seed: 0,
        }
    }
}

/// Embedding `d_in -> nC`, `layers` blocks, then the stream sum read out
/// through `C -> d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub variant: Variant,
    pub n: usize,
    pub c: usize,
    pub sk_iters: usize,
    pub blocks: Vec<BlockParams>,
    pub branches: Vec<Mlp>,
    /// `d_in x nC`
    pub embed: Mat,
    /// `C x d_out`
    pub readout: Mat,
}

struct SampleTrace {
    states: Vec<StreamState>,
    traces: Vec<BlockTrace>,
    pooled: Vec<f64>,
    pred: Vec<f64>,
}

impl ToyModel {
    /// Blocks start at the residual-connection initialisation.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Argument("model needs at least one layer".into()));
        }
        if cfg.d_in == 0 || cfg.d_out == 0 {
            return Err(Error::Argument("d_in and d_out must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (n, c) = (cfg.n, cfg.c);
        let block = init_params(cfg.variant, n, c, 0)?;
        Ok(Self {
            variant: cfg.variant,
            n,
            c,
            sk_iters: cfg.sk_iters,
            blocks: vec![block; cfg.layers],
            branches: (0..cfg.layers).map(|_| Mlp::random(c, &mut rng)).collect(),
            embed: gaussian_mat(&mut rng, cfg.d_in, n * c, 1.0 / (cfg.d_in as f64).sqrt()),
            readout: gaussian_mat(&mut rng, c, cfg.d_out, 0.1 / ((n * c) as f64).sqrt()),
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            variant: self.variant,
            n: self.n,
            c: self.c,
            sk_iters: self.sk_iters,
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            branches: vec![Mlp::zeros(self.c); self.layers()],
            embed: Mat::zeros(self.embed.rows(), self.embed.cols()),
            readout: Mat::zeros(self.readout.rows(), self.readout.cols()),
        }
    }

    /// Every parameter tensor with a flag saying whether weight decay applies
    /// (matrices yes, biases and gains no). Order is fixed.
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for (block, mlp) in self.blocks.iter_mut().zip(self.branches.iter_mut()) {
            for (name, t) in block.groups_mut() {
                out.push((t, name.starts_with("w_")));
            }
            out.push((mlp.w1.data_mut(), true));
            out.push((&mut mlp.b1, false));
            out.push((mlp.w2.data_mut(), true));
            out.push((&mut mlp.b2, false));
        }
        out.push((self.embed.data_mut(), true));
        out.push((self.readout.data_mut(), true));
        out
    }

    pub fn num_params(&mut self) -> usize {
        self.tensors_mut().iter().map(|(t, _)| t.len()).sum()
    }

    fn forward_sample(&self, input: &[f64]) -> Result<SampleTrace> {
        let x0 = Mat::new(self.n, self.c, vecmat(input, &self.embed))?;
        let mut states = vec![StreamState::new(x0)];
        let mut traces = Vec::with_capacity(self.layers());
        for (block, mlp) in self.blocks.iter().zip(&self.branches) {
            let t = block_forward_traced(block, states.last().unwrap(), mlp, self.sk_iters)?;
            states.push(t.output.clone());
            traces.push(t);
        }
        let ones = vec![1.0; self.n];
        let pooled = vecmat(&ones, states.last().unwrap().x());
        let pred = vecmat(&pooled, &self.readout);
        Ok(SampleTrace {
            states,
            traces,
            pooled,
            pred,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_sample(input)?.pred)
    }

    /// Mean squared error over `batch` (mean over samples and outputs).
    pub fn loss(&self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &s in batch {
            let pred = self.predict(data.inputs.row(s))?;
            total += pred
                .iter()
                .zip(data.targets.row(s))
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>();
        }
        Ok(total / (batch.len() * data.targets.cols()) as f64)
    }

    /// Loss, gradients and the largest per-layer `ds_error(H_res).total`
    /// seen on the batch.
    pub fn loss_and_grads(&self, data: &Dataset, batch: &[usize]) -> Result<(f64, ToyModel, f64)> {
        let mut grads = self.zeros_like();
        let mut total = 0.0;
        let mut max_ds: f64 = 0.0;
        let scale = 1.0 / (batch.len() * data.targets.cols()) as f64;
        for &s in batch {
            let input = data.inputs.row(s);
            let tr = self.forward_sample(input)?;
            for t in &tr.traces {
                max_ds = max_ds.max(ds_error(&t.maps.h_res)?.total);
            }
            let resid: Vec<f64> = tr
                .pred
                .iter()
                .zip(data.targets.row(s))
                .map(|(p, t)| p - t)
                .collect();
            total += resid.iter().map(|r| r * r).sum::<f64>();
            let d_pred: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();

            for (k, &pk) in tr.pooled.iter().enumerate() {
                for (g, d) in grads.readout.row_mut(k).iter_mut().zip(&d_pred) {
                    *g += pk * d;
                }
            }
            let d_pooled: Vec<f64> = (0..self.c)
                .map(|k| self.readout.row(k).iter().zip(&d_pred).map(|(w, d)| w * d).sum())
                .collect();
            let mut upstream = Mat::zeros(self.n, self.c);
            for i in 0..self.n {
                upstream.row_mut(i).copy_from_slice(&d_pooled);
            }

            for l in (0..self.layers()).rev() {
                let mlp = &self.branches[l];
                let mlp_grads = &mut grads.branches[l];
                let (bg, dx) = backward_from_trace(
                    &self.blocks[l],
                    &tr.states[l],
                    &tr.traces[l],
                    &upstream,
                    &mut |u, dy| mlp.backward_into(u, dy, mlp_grads),
                )?;
                for ((_, acc), (_, g)) in grads.blocks[l].groups_mut().into_iter().zip(bg.groups())
                {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                upstream = dx;
            }
            for (i, &xi) in input.iter().enumerate() {
                for (g, d) in grads.embed.row_mut(i).iter_mut().zip(upstream.data()) {
                    *g += xi * d;
                }
            }
        }
        Ok((total * scale, grads, max_ds))
    }
}

/// Optimiser settings; constants follow the usual nanoGPT-style recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup_frac: 0.02,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warmup over `warmup_frac` of the run, then cosine decay to
    /// `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.steps as f64 * self.warmup_frac).round() as usize).max(1);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let min_lr = self.lr * self.min_lr_ratio;
        let span = (self.steps - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        min_lr + 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()) * (self.lr - min_lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global ℓ2 norm before clipping.
    pub grad_norm: f64,
    /// Global ℓ2 norm of the update direction after clipping.
    pub clipped_grad_norm: f64,
    pub max_ds_error: f64,
    pub ms_per_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,grad_norm,max_ds_error,ms_per_step";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                fmt_f64(r.max_ds_error),
                fmt_f64(r.ms_per_step)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_endpoints(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.records.len().max(1));
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        let n = self.records.len();
        (mean(&self.records[..w]), mean(&self.records[n - w..]))
    }
}

fn global_norm(grads: &mut ToyModel) -> f64 {
    grads
        .tensors_mut()
        .iter()
        .flat_map(|(t, _)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// AdamW training. Single-threaded and deterministic for a given seed.
pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.steps == 0 {
        return Err(Error::Argument("train needs steps >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let batch_size = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.tensors_mut().iter().map(|(t, _)| t.len()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut m2 = m1.clone();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let start = Instant::now();
        let batch: Vec<usize> = if batch_size == data.len() {
            all.clone()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..data.len())).collect()
        };
        let (loss, mut grads, max_ds) = model.loss_and_grads(data, &batch)?;
        if !loss.is_finite() {
            let preview: Vec<usize> = batch.iter().copied().take(16).collect();
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {loss}, batch of {} starting {preview:?}, lr {:e}",
                    batch.len(),
                    cfg.lr_at(step)
                ),
            });
        }

        let grad_norm = global_norm(&mut grads);
        if grad_norm > cfg.grad_clip {
            let s = cfg.grad_clip / grad_norm;
            for (t, _) in grads.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= s);
            }
        }
        let clipped_grad_norm = global_norm(&mut grads);

        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (k, ((param, decay), (g, _))) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors_mut())
            .enumerate()
        {
            for i in 0..param.len() {
                m1[k][i] = cfg.beta1 * m1[k][i] + (1.0 - cfg.beta1) * g[i];
                m2[k][i] = cfg.beta2 * m2[k][i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m1[k][i] / bc1) / ((m2[k][i] / bc2).sqrt() + cfg.adam_eps);
                if decay {
                    param[i] -= lr * cfg.weight_decay * param[i];
                }
                param[i] -= lr * update;
            }
        }

        log.records.push(StepRecord {
            step,
            loss,
            grad_norm,
            clipped_grad_norm,
            max_ds_error: max_ds,
            ms_per_step: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Runs the first `tokens` samples through the model and records every
/// layer's `H_res` (and, for `Mhc`, the matrix fed to Sinkhorn–Knopp).
pub fn harvest_hres(model: &ToyModel, data: &Dataset, tokens: usize) -> Result<Harvest> {
    if tokens > data.len() {
        return Err(Error::Argument(format!(
            "asked for {tokens} tokens from {} samples",
            data.len()
        )));
    }
    let per_token: Vec<(Vec<Mat>, Vec<Mat>)> = (0..tokens)
        .into_par_iter()
        .map(|t| {
            let tr = model.forward_sample(data.inputs.row(t))?;
            let h: Vec<Mat> = tr.traces.iter().map(|t| t.maps.h_res.clone()).collect();
            let pre: Vec<Mat> = tr
                .traces
                .iter()
                .filter_map(|t| t.maps.pre_sk().cloned())
                .collect();
            Ok((h, pre))
        })
        .collect::<Result<_>>()?;
    let (h_res, pre_sk): (Vec<Vec<Mat>>, Vec<Vec<Mat>>) = per_token.into_iter().unzip();
    Ok(Harvest {
        variant: model.variant,
        n: model.n,
        layers: model.layers(),
        tokens,
        h_res: h_res.into_iter().flatten().collect(),
        pre_sk: pre_sk.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            n: 4,
            c: 4,
            layers: 3,
            d_in: 3,
            d_out: 2,
            sk_iters: 20,
            seed: 1,
        }
    }

    #[test]
    fn task_is_deterministic_and_scaled() {
        assert_eq!(make_task(3, 8, 4, 50).unwrap(), make_task(3, 8, 4, 50).unwrap());
        assert_ne!(make_task(3, 8, 4, 50).unwrap(), make_task(4, 8, 4, 50).unwrap());
        assert!(make_task(3, 8, 4, 0).is_err());

        let d = make_task(0, 8, 4, 10_000).unwrap();
        let vals = d.targets.data();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((0.1..=10.0).contains(&var), "teacher variance {var}");
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::random(3, &mut rng);
        let u = [0.3, -1.2, 0.7];
        let dy = [0.5, -0.25, 1.0];
        let du = mlp.backward(&u, &dy);
        let f = |v: &[f64]| -> f64 { mlp.forward(v).iter().zip(&dy).map(|(a, b)| a * b).sum() };
        for i in 0..3 {
            let mut up = u;
            up[i] += 1e-6;
            let mut dn = u;
            dn[i] -= 1e-6;
            let num = (f(&up) - f(&dn)) / 2e-6;
            assert!((num - du[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for variant in Variant::ALL {
            let mut model = ToyModel::new(&small_cfg(variant)).unwrap();
            // Move off the symmetric initialisation so every path is live.
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for (t, _) in model.tensors_mut() {
                for v in t.iter_mut() {
                    *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let data = make_task(5, 3, 2, 4).unwrap();
            let batch = [0, 1, 2, 3];
            let (_, mut grads, _) = model.loss_and_grads(&data, &batch).unwrap();
            let analytic: Vec<f64> = grads
                .tensors_mut()
                .iter()
                .flat_map(|(t, _)| t.to_vec())
                .collect();
            let mut probe = model.clone();
            let mut idx = 0;
            let count = analytic.len();
            for k in (0..count).step_by(7) {
                // Locate flat index k.
                let mut remaining = k;
                let mut tensor = 0;
                let sizes: Vec<usize> = probe.tensors_mut().iter().map(|(t, _)| t.len()).collect();
                while remaining >= sizes[tensor] {
                    remaining -= sizes[tensor];
                    tensor += 1;
                }
                let orig = probe.tensors_mut()[tensor].0[remaining];
                probe.tensors_mut()[tensor].0[remaining] = orig + 1e-5;
                let up = probe.loss(&data, &batch).unwrap();
                probe.tensors_mut()[tensor].0[remaining] = orig - 1e-5;
                let dn = probe.loss(&data, &batch).unwrap();
                probe.tensors_mut()[tensor].0[remaining] = orig;
                let num = (up - dn) / 2e-5;
                // Central differences on an O(1) loss carry ~1e-11 absolute noise.
                let err = crate::grad::rel_err(analytic[k], num);
                assert!(
                    err < 1e-4 || (analytic[k] - num).abs() < 1e-9,
                    "{variant} param {k}: {} vs {num}",
                    analytic[k]
                );
                idx += 1;
            }
            assert!(idx > 10);
        }
    }

    #[test]
    fn zero_lr_keeps_loss_fixed() {
        let mut model = ToyModel::new(&small_cfg(Variant::Mhc)).unwrap();
        let data = make_task(1, 3, 2, 16).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let before = model.clone();
        let log = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model, before);
        let l0 = log.records[0].loss;
        assert!(log.records.iter().all(|r| (r.loss - l0).abs() <= 1e-12));
    }

    #[test]
    fn training_is_deterministic_and_clipped() {
        let data = make_task(1, 3, 2, 32).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            lr: 5e-2,
            batch_size: Some(8),
            seed: 4,
            ..TrainConfig::default()
        };
        let mut a = ToyModel::new(&small_cfg(Variant::MhcLite)).unwrap();
        let mut b = a.clone();
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        let strip = |l: &TrainLog| -> Vec<(f64, f64, f64)> {
            l.records.iter().map(|r| (r.loss, r.grad_norm, r.max_ds_error)).collect()
        };
        assert_eq!(strip(&la), strip(&lb));
        assert_eq!(a, b);
        for r in &la.records {
            assert!(r.clipped_grad_norm <= 1.0 + 1e-9);
            assert!(r.max_ds_error <= 1e-12);
        }
        assert!(train(&mut a, &data, &TrainConfig { steps: 0, ..cfg.clone() }).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = ToyModel::new(&small_cfg(Variant::Unconstrained)).unwrap();
        model.readout.data_mut()[0] = 1e300;
        model.embed.data_mut().fill(1e10);
        let data = make_task(1, 3, 2, 8).unwrap();
        match train(&mut model, &data, &TrainConfig { steps: 3, ..TrainConfig::default() }) {
            Err(Error::Diverged { step, detail }) => {
                assert_eq!(step, 0);
                assert!(detail.contains("batch"));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { steps: 500, lr: 1e-3, ..TrainConfig::default() };
        assert!((cfg.lr_at(0) - 1e-4).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(499) - 1e-4).abs() < 1e-7);
        assert!(cfg.lr_at(200) < cfg.lr_at(100));
    }

    #[test]
    fn harvest_shapes_and_guarantees() {
        let data = make_task(2, 3, 2, 10).unwrap();
        let lite = ToyModel::new(&small_cfg(Variant::MhcLite)).unwrap();
        let h = harvest_hres(&lite, &data, 10).unwrap();
        assert_eq!(h.h_res.len(), 3 * 10);
        assert!(h.pre_sk.is_empty());
        for m in &h.h_res {
            assert!(ds_error(m).unwrap().total <= 1e-13);
        }
        // Zero block weights at init: every token sees the same maps.
        for l in 0..3 {
            for t in 1..10 {
                assert_eq!(h.matrix(l, t), h.matrix(l, 0));
            }
        }
        let mhc = ToyModel::new(&small_cfg(Variant::Mhc)).unwrap();
        let h = harvest_hres(&mhc, &data, 4).unwrap();
        assert_eq!(h.pre_sk.len(), 12);
        assert!(harvest_hres(&mhc, &data, 11).is_err());
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 0,
                loss: 0.1,
                grad_norm: 2.0,
                clipped_grad_norm: 1.0,
                max_ds_error: 0.0,
                ms_per_step: 1.5,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1], "1.0000000000000001e-1");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1);
    }
}
