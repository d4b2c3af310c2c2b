//! Masked-autoencoder pretraining: structured masking over the patch grid,
//! a lightweight transformer decoder that reconstructs the raw 390-sample
//! series per channel, MSE objective over all samples, AdamW with linear
//! warmup and cosine decay.
//!
//! Runs are replayable from (seed, step) alone: batch order and mask noise
//! are derived streams, not carried generator state, so resuming from a
//! checkpoint reproduces the uninterrupted loss sequence exactly.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    encode_streams, patch_embed, transformer_block, EncoderConfig, Model, ParamSet, TapeParams,
};
use crate::rng::Rng;
use crate::scalogram::tokenize;
use crate::signal::Dataset;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Which patch-grid cells to hide from the encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskStrategy {
    /// Mask the union of a random time-column set and scale-row set.
    Structured { p_t: f64, p_f: f64 },
    TimeOnly { p_t: f64 },
    ScaleOnly { p_f: f64 },
    Unstructured { p: f64 },
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::Structured { p_t: 0.6, p_f: 0.5 }
    }
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(MaskStrategy::Structured { p_t: 0.6, p_f: 0.5 }),
            "time_only" => Ok(MaskStrategy::TimeOnly { p_t: 0.8 }),
            "scale_only" => Ok(MaskStrategy::ScaleOnly { p_f: 0.8 }),
            "unstructured" => Ok(MaskStrategy::Unstructured { p: 0.8 }),
            other => Err(Error::Config(format!("unknown mask strategy '{other}'"))),
        }
    }
}

/// Boolean mask over one channel's patch grid; true = masked.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<bool>,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.grid.len() as f64
    }

    /// Patch indices (grid row-major) the encoder still sees.
    pub fn visible_patches(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| !self.grid[i]).collect()
    }

    pub fn masked_patches(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.grid[i]).collect()
    }

    /// Fraction of masked cells per time column, used by the masked-only
    /// loss scope to map grid columns onto raw samples.
    pub fn column_masked_fraction(&self, col: usize) -> f64 {
        let mut n = 0;
        for r in 0..self.rows {
            if self.grid[r * self.cols + col] {
                n += 1;
            }
        }
        n as f64 / self.rows as f64
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round().min(n as f64) as usize
}

/// Build one channel's mask plan. Column/row counts are exact:
/// round(fraction x axis length).
pub fn make_mask(strategy: MaskStrategy, rows: usize, cols: usize, rng: &mut Rng) -> MaskPlan {
    let mut grid = vec![false; rows * cols];
    match strategy {
        MaskStrategy::Structured { p_t, p_f } => {
            let n_cols = round_count(p_t, cols);
            let n_rows = round_count(p_f, rows);
            let mcols = rng.sample_distinct(cols, n_cols);
            let mrows = rng.sample_distinct(rows, n_rows);
            let mut col_mask = vec![false; cols];
            for c in mcols {
                col_mask[c] = true;
            }
            let mut row_mask = vec![false; rows];
            for r in mrows {
                row_mask[r] = true;
            }
            for r in 0..rows {
                for c in 0..cols {
                    grid[r * cols + c] = row_mask[r] || col_mask[c];
                }
            }
        }
        MaskStrategy::TimeOnly { p_t } => {
            let n_cols = round_count(p_t, cols);
            for c in rng.sample_distinct(cols, n_cols) {
                for r in 0..rows {
                    grid[r * cols + c] = true;
                }
            }
        }
        MaskStrategy::ScaleOnly { p_f } => {
            let n_rows = round_count(p_f, rows);
            for r in rng.sample_distinct(rows, n_rows) {
                for c in 0..cols {
                    grid[r * cols + c] = true;
                }
            }
        }
        MaskStrategy::Unstructured { p } => {
            let n = round_count(p, rows * cols);
            for i in rng.sample_distinct(rows * cols, n) {
                grid[i] = true;
            }
        }
    }
    MaskPlan { rows, cols, grid }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    All,
    Masked,
}

/// Precomputed per-segment training inputs: unfolded patch matrices per
/// channel plus the reconstruction target.
pub struct SegmentInputs<T> {
    pub unfolded: Vec<Arc<Tensor<T>>>,
    /// C x time_len raw canonical series.
    pub target: Arc<Tensor<T>>,
}

pub fn prepare_inputs<T: Scalar>(
    dataset: &Dataset,
    cfg: &EncoderConfig,
) -> Result<Vec<SegmentInputs<T>>> {
    dataset
        .segments
        .par_iter()
        .map(|seg| {
            if seg.len() != cfg.time_len {
                return Err(Error::Shape(format!(
                    "segment length {} != canonical {}",
                    seg.len(),
                    cfg.time_len
                )));
            }
            let stacks = tokenize(seg)?;
            let unfolded = stacks
                .iter()
                .map(|s| Ok(Arc::new(crate::model::unfold_stack::<T>(s, cfg)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut target = Tensor::zeros(seg.channels(), cfg.time_len);
            for (c, ch) in seg.samples.iter().enumerate() {
                for (t, &v) in ch.iter().enumerate() {
                    *target.at_mut(c, t) = T::from_f64(v);
                }
            }
            Ok(SegmentInputs {
                unfolded,
                target: Arc::new(target),
            })
        })
        .collect()
}

pub struct MaeOutputs {
    /// C x time_len reconstruction.
    pub recon: Var,
    /// 1 x 1 loss node.
    pub loss: Var,
    /// Per-channel head inputs, for batch-norm running-stat updates.
    pub head_inputs: Vec<Var>,
}

/// Build the full masked-autoencoder graph for one segment.
///
/// Encoder sees [CLS] plus visible patch tokens only; the decoder re-inserts
/// a learned mask token at masked positions, adds decoder position
/// encodings, runs its blocks, and a convolutional head maps each time
/// column back to `patch_time` raw samples.
pub fn mae_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    tp: &TapeParams,
    inputs: &SegmentInputs<T>,
    plans: &[MaskPlan],
    scope: LossScope,
    train_mode: bool,
) -> Result<MaeOutputs> {
    let cfg = &model.cfg;
    let channels = inputs.unfolded.len();
    if plans.len() != channels {
        return Err(Error::Shape(format!(
            "{} mask plans for {} channels",
            plans.len(),
            channels
        )));
    }
    let (gr, gc) = (cfg.grid_rows(), cfg.grid_cols());
    for plan in plans {
        if plan.rows != gr || plan.cols != gc {
            return Err(Error::Shape(format!(
                "mask grid {}x{} does not match patch grid {gr}x{gc}",
                plan.rows, plan.cols
            )));
        }
    }

    // Encoder over visible tokens.
    let mut streams = Vec::with_capacity(channels);
    let mut visible: Vec<Vec<usize>> = Vec::with_capacity(channels);
    for c in 0..channels {
        let full = patch_embed(tape, inputs.unfolded[c].clone(), model, tp);
        let vis = plans[c].visible_patches();
        let mut idx = Vec::with_capacity(vis.len() + 1);
        idx.push(0);
        idx.extend(vis.iter().map(|&p| p + 1));
        streams.push(tape.gather_rows(full, idx));
        visible.push(vis);
    }
    let encoded = encode_streams(tape, streams, model, tp)?;

    // Decoder per channel, shared weights.
    let frozen = if train_mode {
        None
    } else {
        Some((
            model.params.tensor(model.idx.head_bn_mean).clone(),
            model.params.tensor(model.idx.head_bn_var).clone(),
        ))
    };
    let mut recon_rows = Vec::with_capacity(channels);
    let mut head_inputs = Vec::with_capacity(channels);
    for (c, enc) in encoded.iter().enumerate() {
        let proj = {
            let m = tape.matmul(*enc, tp.var(model.idx.dec_proj_w), false, false);
            tape.add_row_broadcast(m, tp.var(model.idx.dec_proj_b))
        };
        let n_vis = visible[c].len();
        let cls_d = tape.slice_rows(proj, 0, 1);
        let vis_patches = tape.slice_rows(proj, 1, n_vis);
        let base = tape.repeat_row(tp.var(model.idx.mask_token), cfg.n_patches());
        let placed = tape.scatter_rows(base, vis_patches, visible[c].clone());
        let pe = tape.constant_shared(model.pe_dec.clone());
        let with_pe = tape.add(placed, pe);
        let mut dec = tape.concat_rows(&[cls_d, with_pe]);
        for blk in &model.idx.dec_blocks {
            dec = transformer_block(tape, dec, blk, tp, cfg.dec_heads);
        }
        let patches = tape.slice_rows(dec, 1, cfg.n_patches());

        // Rearrange the grid into a (grid_rows * dec_hidden) x grid_cols
        // feature map: scale rows stack into the channel axis.
        let parts: Vec<Var> = (0..gr)
            .map(|r| {
                let band = tape.slice_rows(patches, r * gc, gc);
                tape.transpose(band)
            })
            .collect();
        let head_in = tape.concat_rows(&parts);
        head_inputs.push(head_in);
        let bn = tape.batch_norm(
            head_in,
            tp.var(model.idx.head_bn_g),
            tp.var(model.idx.head_bn_b),
            BN_EPS,
            frozen.clone(),
        );
        let c1 = tape.conv1d(
            bn,
            tp.var(model.idx.head_conv1_w),
            tp.var(model.idx.head_conv1_b),
            3,
        );
        let g = tape.gelu(c1);
        let c2 = tape.conv1d(
            g,
            tp.var(model.idx.head_conv2_w),
            tp.var(model.idx.head_conv2_b),
            3,
        ); // patch_time x grid_cols
        let by_col = tape.transpose(c2); // grid_cols x patch_time
        let covered = gc * cfg.patch_time;
        let flat = tape.reshape(by_col, covered, 1);
        let row = if covered < cfg.time_len {
            // Columns dropped by floor patching reconstruct as zero.
            let pad = tape.constant(Tensor::zeros(cfg.time_len - covered, 1));
            let full = tape.concat_rows(&[flat, pad]);
            tape.transpose(full)
        } else {
            tape.transpose(flat)
        };
        recon_rows.push(row);
    }
    let recon = tape.concat_rows(&recon_rows);

    let target = tape.constant_shared(inputs.target.clone());
    let diff = tape.sub(recon, target);
    let sq = tape.square(diff);
    let loss = match scope {
        LossScope::All => tape.mean_all(sq),
        LossScope::Masked => {
            // Weight raw samples by the masked fraction of their time
            // column; samples beyond the covered span get weight 1.
            let mut w = Tensor::zeros(channels, cfg.time_len);
            let mut wsum = T::ZERO;
            for c in 0..channels {
                for t in 0..cfg.time_len {
                    let col = (t / cfg.patch_time).min(gc - 1);
                    let v = T::from_f64(plans[c].column_masked_fraction(col));
                    *w.at_mut(c, t) = v;
                    wsum += v;
                }
            }
            if wsum.to_f64() == 0.0 {
                return Err(Error::Config("masked loss scope with empty mask".into()));
            }
            let wv = tape.constant(w);
            let weighted = tape.mul_elem(sq, wv);
            let m = tape.mean_all(weighted);
            tape.scale(m, (channels * cfg.time_len) as f64 / wsum.to_f64())
        }
    };
    Ok(MaeOutputs {
        recon,
        loss,
        head_inputs,
    })
}

/// Mean squared error over all entries; the standalone reference form.
pub fn mse_loss(recon: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    if !recon.same_shape(target) {
        return Err(Error::Shape(format!(
            "mse shapes {}x{} vs {}x{}",
            recon.rows, recon.cols, target.rows, target.cols
        )));
    }
    let mut acc = 0.0;
    for (a, b) in recon.data.iter().zip(&target.data) {
        acc += (a - b) * (a - b);
    }
    Ok(acc / recon.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub mask: MaskStrategy,
    pub loss_scope: LossScope,
    pub seed: u64,
    pub save_every: usize,
    /// Stop once a step's loss drops below `ratio * first-step loss`.
    pub early_stop_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 16,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            mask: MaskStrategy::default(),
            loss_scope: LossScope::All,
            seed: 0,
            save_every: 0,
            early_stop_ratio: None,
        }
    }
}

/// Linear warmup then cosine decay to zero.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_frac * cfg.steps as f64).round() as usize;
    if step < warmup {
        cfg.lr * (step + 1) as f64 / warmup.max(1) as f64
    } else if cfg.steps <= warmup {
        cfg.lr
    } else {
        let t = (step - warmup) as f64 / (cfg.steps - warmup) as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW state for the trainable tensors of a parameter set.
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One decoupled-weight-decay Adam step. `t` is 1-based. Decay applies
    /// only to matrices (rows > 1); biases, gains, and single tokens are
    /// left undecayed.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: f32,
        weight_decay: f32,
        t: usize,
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let decay = if params.tensor(i).rows > 1 {
                weight_decay
            } else {
                0.0
            };
            let p = params.tensor_mut(i);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p.data[k]);
            }
        }
    }
}

/// Index into the shuffled dataset for a global sample counter; a pure
/// function of (seed, counter), which is what makes resume exact.
fn sample_index(seed: u64, n: usize, counter: usize) -> usize {
    let epoch = counter / n;
    let pos = counter % n;
    let mut rng = Rng::derive(seed, &[0x62617463, epoch as u64]);
    rng.permutation(n)[pos]
}

pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub curve: Vec<TrainRecord>,
    pub steps_run: usize,
}

/// Train the model in place from `start_step`. Checkpoints (if requested)
/// carry parameters, optimizer moments, and the step counter.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    inputs: &[SegmentInputs<f32>],
    cfg: &TrainConfig,
    start_step: usize,
    ckpt_path: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    if inputs.is_empty() {
        return Err(Error::DegenerateInput("empty pretraining dataset".into()));
    }
    let n = inputs.len();
    let (gr, gc) = (model.cfg.grid_rows(), model.cfg.grid_cols());
    let mut curve = Vec::new();
    let mut first_loss: Option<f64> = None;
    let mut steps_run = 0;

    for step in start_step..cfg.steps {
        let lr = lr_at(cfg, step);
        let batch_ids: Vec<usize> = (0..cfg.batch)
            .map(|j| sample_index(cfg.seed, n, step * cfg.batch + j))
            .collect();

        // Forward/backward per element, two at a time; reduce in index
        // order so the accumulated gradient is bit-stable.
        let mut grand: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        let mut loss_sum = 0.0;
        let mut bn_sum: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for (chunk_i, chunk) in batch_ids.chunks(2).enumerate() {
            let results: Vec<Result<_>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j_in_chunk, &seg_id)| {
                    let j = chunk_i * 2 + j_in_chunk;
                    let seg = &inputs[seg_id];
                    let plans: Vec<MaskPlan> = (0..seg.unfolded.len())
                        .map(|c| {
                            let mut rng = Rng::derive(
                                cfg.seed,
                                &[0x6d61736b, step as u64, j as u64, c as u64],
                            );
                            make_mask(cfg.mask, gr, gc, &mut rng)
                        })
                        .collect();
                    let mut tape = Tape::new();
                    let tp = TapeParams::register(&mut tape, &model.params);
                    let out =
                        mae_forward(&mut tape, model, &tp, seg, &plans, cfg.loss_scope, true)?;
                    let loss = tape.value(out.loss).data[0] as f64;
                    // Pooled batch-norm statistics from the head inputs.
                    let feat = gr * model.cfg.dec_hidden;
                    let mut sum_x = vec![0.0f64; feat];
                    let mut sum_x2 = vec![0.0f64; feat];
                    let mut count = 0.0f64;
                    for &hi in &out.head_inputs {
                        let t = tape.value(hi);
                        for r in 0..t.rows {
                            for &x in t.row(r) {
                                sum_x[r] += x as f64;
                                sum_x2[r] += (x as f64) * (x as f64);
                            }
                        }
                        count += t.cols as f64;
                    }
                    let mut grads = tape.backward(out.loss);
                    let by_param: Vec<Option<Tensor<f32>>> = tp
                        .vars()
                        .iter()
                        .map(|&v| grads.take(v))
                        .collect();
                    Ok((loss, by_param, (sum_x, sum_x2, count)))
                })
                .collect();
            for res in results {
                let (loss, by_param, (sx, sx2, cnt)) = res?;
                loss_sum += loss;
                for (slot, g) in grand.iter_mut().zip(by_param) {
                    match (slot.as_mut(), g) {
                        (Some(acc), Some(g)) => acc.add_assign(&g),
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
                match &mut bn_sum {
                    Some((asx, asx2, acnt)) => {
                        for (a, b) in asx.iter_mut().zip(&sx) {
                            *a += b;
                        }
                        for (a, b) in asx2.iter_mut().zip(&sx2) {
                            *a += b;
                        }
                        *acnt += cnt;
                    }
                    none => *none = Some((sx, sx2, cnt)),
                }
            }
        }

        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() {
            let gnorm: f64 = grand
                .iter()
                .flatten()
                .flat_map(|g| g.data.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (lr {lr:.3e}, grad norm {gnorm:.3e})"
            )));
        }

        // Mean gradient and optimizer step.
        let scale = 1.0 / cfg.batch as f32;
        for g in grand.iter_mut().flatten() {
            g.scale_in_place(scale);
        }
        opt.step(&mut model.params, &grand, lr as f32, cfg.weight_decay as f32, step + 1);

        // Batch-norm running statistics (population var over batch x cols).
        if let Some((sx, sx2, cnt)) = bn_sum {
            let mean_i = model.idx.head_bn_mean;
            let var_i = model.idx.head_bn_var;
            let rm = model.params.tensor_mut(mean_i);
            for (r, slot) in rm.data.iter_mut().enumerate() {
                let m = (sx[r] / cnt) as f32;
                *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * m;
            }
            let rv = model.params.tensor_mut(var_i);
            for (r, slot) in rv.data.iter_mut().enumerate() {
                let m = sx[r] / cnt;
                let v = (sx2[r] / cnt - m * m).max(0.0) as f32;
                *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * v;
            }
        }

        curve.push(TrainRecord { step, loss, lr });
        steps_run = step + 1;
        if first_loss.is_none() {
            first_loss = Some(loss);
        }

        if let Some(path) = ckpt_path {
            if cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 {
                save_checkpoint(model, Some(opt), step + 1, path)?;
            }
        }
        if let (Some(ratio), Some(first)) = (cfg.early_stop_ratio, first_loss) {
            if loss < ratio * first {
                break;
            }
        }
    }
    Ok(TrainOutcome { curve, steps_run })
}

/// Evaluate the MAE objective without touching parameters (inference-mode
/// batch norm). Returns per-segment losses and reconstructions.
pub fn evaluate(
    model: &Model<f32>,
    inputs: &[SegmentInputs<f32>],
    mask: MaskStrategy,
    scope: LossScope,
    seed: u64,
) -> Result<Vec<(f64, Tensor<f32>)>> {
    let (gr, gc) = (model.cfg.grid_rows(), model.cfg.grid_cols());
    inputs
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let plans: Vec<MaskPlan> = (0..seg.unfolded.len())
                .map(|c| {
                    let mut rng = Rng::derive(seed, &[0x6576616c, i as u64, c as u64]);
                    make_mask(mask, gr, gc, &mut rng)
                })
                .collect();
            let mut tape = Tape::new();
            let tp = TapeParams::register_frozen(&mut tape, &model.params);
            let out = mae_forward(&mut tape, model, &tp, seg, &plans, scope, false)?;
            Ok((
                tape.value(out.loss).data[0] as f64,
                tape.value(out.recon).clone(),
            ))
        })
        .collect()
}

pub fn save_checkpoint(
    model: &Model<f32>,
    opt: Option<&AdamW>,
    step: usize,
    path: &std::path::Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.meta.insert("kind".into(), "backbone".into());
    ckpt.meta.insert("step".into(), step.to_string());
    ckpt.meta.insert(
        "encoder_config".into(),
        serde_json::to_string(&model.cfg).expect("config serializes"),
    );
    ckpt.add_param_set("model.", &model.params);
    if let Some(opt) = opt {
        for (i, name) in model.params.names().iter().enumerate() {
            ckpt.entries
                .push((format!("opt.m.{name}"), opt.m[i].clone(), false));
            ckpt.entries
                .push((format!("opt.v.{name}"), opt.v[i].clone(), false));
        }
    }
    ckpt.save(path)
}

pub fn load_backbone(path: &std::path::Path) -> Result<(Model<f32>, Option<AdamW>, usize)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: EncoderConfig = serde_json::from_str(ckpt.meta_str("encoder_config")?)
        .map_err(|e| Error::Checkpoint(format!("bad encoder_config: {e}")))?;
    let params = ckpt.param_set("model.");
    let model = Model::from_parts(cfg, params)?;
    let step: usize = ckpt
        .meta
        .get("step")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let has_opt = ckpt.entries.iter().any(|(n, _, _)| n.starts_with("opt.m."));
    let opt = if has_opt {
        let mut opt = AdamW::new(&model.params);
        for (i, name) in model.params.names().iter().enumerate() {
            let m = ckpt.param_set(&format!("opt.m.{name}"));
            let v = ckpt.param_set(&format!("opt.v.{name}"));
            // param_set with a full-name prefix yields one tensor named "".
            if m.len() == 1 {
                opt.m[i] = m.tensor(0).as_ref().clone();
            }
            if v.len() == 1 {
                opt.v[i] = v.tensor(0).as_ref().clone();
            }
        }
        Some(opt)
    } else {
        None
    };
    Ok((model, opt, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::signal::{synth_generate, SynthSpec};

    #[test]
    fn structured_mask_counts() {
        let mut rng = Rng::new(1);
        let plan = make_mask(MaskStrategy::default(), 12, 43, &mut rng);
        // 26 columns and 6 rows exactly.
        let mut col_masked = vec![true; 43];
        let mut row_masked = vec![true; 12];
        for r in 0..12 {
            for c in 0..43 {
                if !plan.grid[r * 43 + c] {
                    col_masked[c] = false;
                    row_masked[r] = false;
                }
            }
        }
        assert_eq!(col_masked.iter().filter(|&&m| m).count(), 26);
        assert_eq!(row_masked.iter().filter(|&&m| m).count(), 6);
        assert_eq!(plan.masked_count(), 516 - 17 * 6);
        assert!((plan.masked_fraction() - 0.802).abs() < 1e-3);
    }

    #[test]
    fn time_only_mask_is_34_columns() {
        let mut rng = Rng::new(2);
        let plan = make_mask(MaskStrategy::TimeOnly { p_t: 0.8 }, 12, 43, &mut rng);
        assert_eq!(plan.masked_count(), 34 * 12);
        for c in 0..43 {
            let col: Vec<bool> = (0..12).map(|r| plan.grid[r * 43 + c]).collect();
            assert!(col.iter().all(|&m| m) || col.iter().all(|&m| !m));
        }
    }

    #[test]
    fn unstructured_full_ratio_masks_everything() {
        let mut rng = Rng::new(3);
        let plan = make_mask(MaskStrategy::Unstructured { p: 1.0 }, 12, 43, &mut rng);
        assert_eq!(plan.masked_count(), 516);
    }

    #[test]
    fn structured_mask_statistics_over_1000_plans() {
        let mut fractions = Vec::new();
        for i in 0..1000 {
            let mut rng = Rng::new(1000 + i);
            fractions.push(make_mask(MaskStrategy::default(), 12, 43, &mut rng).masked_fraction());
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((0.79..=0.81).contains(&mean), "mean masked fraction {mean}");
    }

    #[test]
    fn mse_matches_naive_two_loop() {
        let mut rng = Rng::new(4);
        let a = Tensor::from_fn(3, 17, |_, _| rng.normal());
        let b = Tensor::from_fn(3, 17, |_, _| rng.normal());
        let fast = mse_loss(&a, &b).unwrap();
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..17 {
                let d = a.at(r, c) - b.at(r, c);
                acc += d * d;
            }
        }
        let naive = acc / (3.0 * 17.0);
        assert!((fast - naive).abs() < 1e-12);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 1.0);
        assert!((mse_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    fn small_inputs(n: usize, channels: usize, seed: u64) -> Vec<SegmentInputs<f32>> {
        let spec = SynthSpec {
            channels,
            snr_db: None,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec, n, &mut Rng::new(seed)).unwrap();
        let ds = crate::signal::canonicalize_dataset(&ds).unwrap();
        prepare_inputs(&ds, &EncoderConfig::tiny()).unwrap()
    }

    #[test]
    fn mae_shapes_and_visible_counts() {
        let cfg = EncoderConfig::tiny();
        let model = Model::<f32>::init(cfg.clone(), 5).unwrap();
        let inputs = small_inputs(1, 3, 6);
        let plans: Vec<MaskPlan> = (0..3)
            .map(|c| make_mask(MaskStrategy::default(), 12, 43, &mut Rng::new(c)))
            .collect();
        for plan in &plans {
            assert_eq!(plan.visible_patches().len(), 516 - plan.masked_count());
        }
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &model.params);
        let out = mae_forward(
            &mut tape,
            &model,
            &tp,
            &inputs[0],
            &plans,
            LossScope::All,
            true,
        )
        .unwrap();
        let recon = tape.value(out.recon);
        assert_eq!((recon.rows, recon.cols), (3, 390));
        assert!(recon.all_finite());
    }

    #[test]
    fn all_false_mask_keeps_all_tokens_visible() {
        let plan = MaskPlan {
            rows: 12,
            cols: 43,
            grid: vec![false; 516],
        };
        assert_eq!(plan.visible_patches().len(), 516);
        // 516 patches + [CLS] = 517 tokens reach the encoder.
        assert_eq!(plan.visible_patches().len() + 1, 517);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut model = Model::<f32>::init(EncoderConfig::tiny(), 7).unwrap();
        let before: Vec<Vec<f32>> = model
            .params
            .tensors
            .iter()
            .map(|t| t.data.clone())
            .collect();
        let mut opt = AdamW::new(&model.params);
        let inputs = small_inputs(2, 1, 8);
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            lr: 0.0,
            warmup_frac: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &mut opt, &inputs, &cfg, 0, None).unwrap();
        for (i, t) in model.params.tensors.iter().enumerate() {
            if model.params.is_trainable(i) {
                assert_eq!(t.data, before[i], "{}", model.params.names()[i]);
            }
        }
    }

    #[test]
    fn resume_reproduces_loss_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        let inputs = small_inputs(4, 1, 9);
        let cfg = TrainConfig {
            steps: 5,
            batch: 2,
            lr: 1e-3,
            save_every: 3,
            ..TrainConfig::default()
        };

        let mut m1 = Model::<f32>::init(EncoderConfig::tiny(), 11).unwrap();
        let mut o1 = AdamW::new(&m1.params);
        let full = train(&mut m1, &mut o1, &inputs, &cfg, 0, Some(&ckpt)).unwrap();

        let (mut m2, opt2, step) = load_backbone(&ckpt).unwrap();
        assert_eq!(step, 3);
        let mut o2 = opt2.unwrap();
        let resumed = train(&mut m2, &mut o2, &inputs, &cfg, step, None).unwrap();

        let tail: Vec<f64> = full.curve[3..].iter().map(|r| r.loss).collect();
        let resumed_losses: Vec<f64> = resumed.curve.iter().map(|r| r.loss).collect();
        assert_eq!(tail, resumed_losses);
        for (a, b) in m1.params.tensors.iter().zip(&m2.params.tensors) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn training_is_seed_deterministic_bitwise() {
        let inputs = small_inputs(3, 1, 13);
        let cfg = TrainConfig {
            steps: 4,
            batch: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::<f32>::init(EncoderConfig::tiny(), 17).unwrap();
            let mut o = AdamW::new(&m.params);
            train(&mut m, &mut o, &inputs, &cfg, 0, None).unwrap();
            m.params
                .tensors
                .iter()
                .flat_map(|t| t.data.clone())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }
}
