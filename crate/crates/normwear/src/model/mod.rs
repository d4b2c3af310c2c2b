//! Shared-weight per-channel transformer backbone with liaison-[CLS]
//! channel fusion.
//!
//! Every channel's scalogram stack is patch-embedded and run through the
//! same 12 pre-norm transformer blocks. After every second block a fusion
//! layer (its own transformer block) lets channels exchange information:
//! `cls` fuses the per-channel [CLS] tokens, `mean` fuses per-channel
//! patch means into the [CLS] slot, `cross` is the pairwise C=2 scheme,
//! `all` attends over every token of every channel.
//!
//! Channel-permutation equivariance holds *bitwise*: fusion gathers the
//! channel streams in a canonical content-derived order before any
//! cross-channel reduction, so the floating-point summation order never
//! depends on the order channels were supplied in.

mod params;

pub use params::{ParamBuilder, ParamSet, TapeParams};

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalogram::ScalogramStack;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    Cls,
    Mean,
    Cross,
    All,
    None,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FusionMode::Cls),
            "mean" => Ok(FusionMode::Mean),
            "cross" => Ok(FusionMode::Cross),
            "all" => Ok(FusionMode::All),
            "none" => Ok(FusionMode::None),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Cls => "cls",
            FusionMode::Mean => "mean",
            FusionMode::Cross => "cross",
            FusionMode::All => "all",
            FusionMode::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    /// A fusion layer runs after every `fusion_every`-th encoder block.
    pub fusion_every: usize,
    pub ffn: usize,
    pub fusion: FusionMode,
    pub patch_scale: usize,
    pub patch_time: usize,
    pub scales: usize,
    pub time_len: usize,
    pub dec_hidden: usize,
    pub dec_heads: usize,
    pub dec_blocks: usize,
    pub dec_ffn: usize,
}

impl EncoderConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        EncoderConfig {
            hidden: 768,
            heads: 12,
            depth: 12,
            fusion_every: 2,
            ffn: 3072,
            fusion: FusionMode::Cls,
            patch_scale: 5,
            patch_time: 9,
            scales: 64,
            time_len: 390,
            dec_hidden: 512,
            dec_heads: 16,
            dec_blocks: 2,
            dec_ffn: 2048,
        }
    }

    /// Same topology at quarter width; the default for tests and local runs.
    pub fn desk() -> Self {
        EncoderConfig {
            hidden: 192,
            heads: 6,
            ffn: 768,
            dec_hidden: 128,
            dec_heads: 4,
            dec_ffn: 512,
            ..Self::paper()
        }
    }

    /// Minimal topology for fast pipeline tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            hidden: 64,
            heads: 4,
            depth: 4,
            ffn: 256,
            dec_hidden: 64,
            dec_heads: 2,
            dec_blocks: 2,
            dec_ffn: 256,
            ..Self::paper()
        }
    }

    /// Finite-difference validation size: 13 tokens per channel, depth 2.
    pub fn gradcheck() -> Self {
        EncoderConfig {
            hidden: 16,
            heads: 2,
            depth: 2,
            ffn: 32,
            scales: 10,
            time_len: 54,
            dec_hidden: 16,
            dec_heads: 2,
            dec_blocks: 1,
            dec_ffn: 32,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn grid_rows(&self) -> usize {
        (self.scales - self.patch_scale) / self.patch_scale + 1
    }

    pub fn grid_cols(&self) -> usize {
        (self.time_len - self.patch_time) / self.patch_time + 1
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Patches plus the [CLS] liaison token.
    pub fn tokens_per_channel(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_scale * self.patch_time
    }

    pub fn fusion_layers(&self) -> usize {
        self.depth / self.fusion_every
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.dec_hidden % self.dec_heads != 0 {
            return Err(Error::Config("decoder hidden/heads mismatch".into()));
        }
        if self.fusion_every == 0 || self.depth == 0 {
            return Err(Error::Config(
                "depth and fusion_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Tensor indices of one transformer block inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Index map of the full encoder+decoder parameter set.
#[derive(Clone, Debug)]
pub struct ModelIdx {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub blocks: Vec<BlockIdx>,
    pub fusion: Vec<BlockIdx>,
    pub final_ln_g: usize,
    pub final_ln_b: usize,
    pub dec_proj_w: usize,
    pub dec_proj_b: usize,
    pub mask_token: usize,
    pub dec_blocks: Vec<BlockIdx>,
    pub head_bn_g: usize,
    pub head_bn_b: usize,
    pub head_bn_mean: usize,
    pub head_bn_var: usize,
    pub head_conv1_w: usize,
    pub head_conv1_b: usize,
    pub head_conv2_w: usize,
    pub head_conv2_b: usize,
}

/// Backbone: configuration, parameters, and the index map into them.
/// The fixed sinusoidal position encodings are precomputed once.
pub struct Model<T> {
    pub cfg: EncoderConfig,
    pub params: ParamSet<T>,
    pub idx: ModelIdx,
    pub pe_enc: Arc<Tensor<T>>,
    pub pe_dec: Arc<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

fn build_block<T: Scalar>(
    b: &mut ParamBuilder<T>,
    prefix: &str,
    hidden: usize,
    ffn: usize,
    zero_out: bool,
) -> BlockIdx {
    let proj = |b: &mut ParamBuilder<T>, name: String, r, c| {
        if zero_out {
            b.zeros(&name, r, c, true)
        } else {
            b.trunc_normal(&name, r, c, INIT_STD)
        }
    };
    BlockIdx {
        ln1_g: b.ones(&format!("{prefix}.ln1.g"), 1, hidden),
        ln1_b: b.zeros(&format!("{prefix}.ln1.b"), 1, hidden, true),
        wq: b.trunc_normal(&format!("{prefix}.wq"), hidden, hidden, INIT_STD),
        bq: b.zeros(&format!("{prefix}.bq"), 1, hidden, true),
        wk: b.trunc_normal(&format!("{prefix}.wk"), hidden, hidden, INIT_STD),
        bk: b.zeros(&format!("{prefix}.bk"), 1, hidden, true),
        wv: b.trunc_normal(&format!("{prefix}.wv"), hidden, hidden, INIT_STD),
        bv: b.zeros(&format!("{prefix}.bv"), 1, hidden, true),
        wo: proj(b, format!("{prefix}.wo"), hidden, hidden),
        bo: b.zeros(&format!("{prefix}.bo"), 1, hidden, true),
        ln2_g: b.ones(&format!("{prefix}.ln2.g"), 1, hidden),
        ln2_b: b.zeros(&format!("{prefix}.ln2.b"), 1, hidden, true),
        w1: b.trunc_normal(&format!("{prefix}.w1"), hidden, ffn, INIT_STD),
        b1: b.zeros(&format!("{prefix}.b1"), 1, ffn, true),
        w2: proj(b, format!("{prefix}.w2"), ffn, hidden),
        b2: b.zeros(&format!("{prefix}.b2"), 1, hidden, true),
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: truncated normal (sigma 0.02) projections, zero
    /// biases, unit norm gains. Fusion-block output projections start at
    /// zero so fusion begins as the identity.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let patch_w = b.trunc_normal("enc.patch.w", cfg.patch_dim(), cfg.hidden, INIT_STD);
        let patch_b = b.zeros("enc.patch.b", 1, cfg.hidden, true);
        let cls = b.trunc_normal("enc.cls", 1, cfg.hidden, INIT_STD);
        let blocks = (0..cfg.depth)
            .map(|i| {
                build_block(
                    &mut b,
                    &format!("enc.block{i:02}"),
                    cfg.hidden,
                    cfg.ffn,
                    false,
                )
            })
            .collect();
        let fusion = (0..cfg.fusion_layers())
            .map(|i| build_block(&mut b, &format!("fuse{i:02}"), cfg.hidden, cfg.ffn, true))
            .collect();
        let final_ln_g = b.ones("enc.final_ln.g", 1, cfg.hidden);
        let final_ln_b = b.zeros("enc.final_ln.b", 1, cfg.hidden, true);
        let dec_proj_w = b.trunc_normal("dec.proj.w", cfg.hidden, cfg.dec_hidden, INIT_STD);
        let dec_proj_b = b.zeros("dec.proj.b", 1, cfg.dec_hidden, true);
        let mask_token = b.trunc_normal("dec.mask_token", 1, cfg.dec_hidden, INIT_STD);
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|i| {
                build_block(
                    &mut b,
                    &format!("dec.block{i}"),
                    cfg.dec_hidden,
                    cfg.dec_ffn,
                    false,
                )
            })
            .collect();
        let feat = cfg.grid_rows() * cfg.dec_hidden;
        let mid = 2 * cfg.dec_hidden;
        let head_bn_g = b.ones("dec.head.bn.g", feat, 1);
        let head_bn_b = b.zeros("dec.head.bn.b", feat, 1, true);
        let head_bn_mean = b.zeros("dec.head.bn.mean", feat, 1, false);
        let head_bn_var = b.ones_state("dec.head.bn.var", feat, 1);
        let head_conv1_w = b.trunc_normal("dec.head.conv1.w", mid, feat * 3, INIT_STD);
        let head_conv1_b = b.zeros("dec.head.conv1.b", mid, 1, true);
        let head_conv2_w = b.trunc_normal("dec.head.conv2.w", cfg.patch_time, mid * 3, INIT_STD);
        let head_conv2_b = b.zeros("dec.head.conv2.b", cfg.patch_time, 1, true);
        let pe_enc = Arc::new(position_encoding_2d::<T>(
            cfg.grid_rows(),
            cfg.grid_cols(),
            cfg.hidden,
        ));
        let pe_dec = Arc::new(position_encoding_2d::<T>(
            cfg.grid_rows(),
            cfg.grid_cols(),
            cfg.dec_hidden,
        ));
        Ok(Model {
            pe_enc,
            pe_dec,
            cfg,
            params: b.finish(),
            idx: ModelIdx {
                patch_w,
                patch_b,
                cls,
                blocks,
                fusion,
                final_ln_g,
                final_ln_b,
                dec_proj_w,
                dec_proj_b,
                mask_token,
                dec_blocks,
                head_bn_g,
                head_bn_b,
                head_bn_mean,
                head_bn_var,
                head_conv1_w,
                head_conv1_b,
                head_conv2_w,
                head_conv2_b,
            },
        })
    }

    /// Rebuild the index map for a parameter set restored from a checkpoint.
    pub fn from_parts(cfg: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Model::<T>::init(cfg.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint(
                "checkpoint tensor manifest does not match configuration".into(),
            ));
        }
        for (i, t) in params.tensors.iter().enumerate() {
            let r = &reference.params.tensors[i];
            if t.rows != r.rows || t.cols != r.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    params.names()[i],
                    t.rows,
                    t.cols,
                    r.rows,
                    r.cols
                )));
            }
        }
        Ok(Model {
            cfg,
            params,
            idx: reference.idx,
            pe_enc: reference.pe_enc,
            pe_dec: reference.pe_dec,
        })
    }
}

/// Fixed 2-D sinusoidal position encoding over (scale row, time column),
/// half the width for each axis. The [CLS] token receives none.
pub fn position_encoding_2d<T: Scalar>(rows: usize, cols: usize, hidden: usize) -> Tensor<T> {
    let half = hidden / 2;
    let encode_axis = |pos: usize, width: usize, out: &mut [T]| {
        let mut i = 0;
        while i < width {
            let denom = 10000f64.powf(i as f64 / width as f64);
            let angle = pos as f64 / denom;
            out[i] = T::from_f64(angle.sin());
            if i + 1 < width {
                out[i + 1] = T::from_f64(angle.cos());
            }
            i += 2;
        }
    };
    let mut pe = Tensor::zeros(rows * cols, hidden);
    for r in 0..rows {
        for c in 0..cols {
            let row = pe.row_mut(r * cols + c);
            encode_axis(c, half, &mut row[..half]);
            encode_axis(r, hidden - half, &mut row[half..]);
        }
    }
    pe
}

/// Flatten a scalogram stack into non-overlapping (layers x 5 x 9) patch
/// rows, grid row-major. Feature order within a row is layer-major, then
/// scale offset, then time offset. Partial edge windows are dropped.
pub fn unfold_stack<T: Scalar>(stack: &ScalogramStack, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let (gr, gc) = (cfg.grid_rows(), cfg.grid_cols());
    for layer in &stack.layers {
        if layer.rows != cfg.scales || layer.cols != cfg.time_len {
            return Err(Error::Shape(format!(
                "stack layer is {}x{}, config expects {}x{}",
                layer.rows, layer.cols, cfg.scales, cfg.time_len
            )));
        }
    }
    let mut out = Tensor::zeros(gr * gc, cfg.patch_dim());
    for r in 0..gr {
        for c in 0..gc {
            let row = out.row_mut(r * gc + c);
            let mut f = 0;
            for layer in &stack.layers {
                for dr in 0..cfg.patch_scale {
                    for dc in 0..cfg.patch_time {
                        row[f] = T::from_f64(
                            layer.at(r * cfg.patch_scale + dr, c * cfg.patch_time + dc),
                        );
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch-embed an unfolded stack: linear projection, position encodings on
/// patch tokens, learned [CLS] prepended. Returns a (1+P) x E token matrix.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    unfolded: Arc<Tensor<T>>,
    model: &Model<T>,
    tp: &TapeParams,
) -> Var {
    let x = tape.constant_shared(unfolded);
    let proj = tape.matmul(x, tp.var(model.idx.patch_w), false, false);
    let with_bias = tape.add_row_broadcast(proj, tp.var(model.idx.patch_b));
    let pe = tape.constant_shared(model.pe_enc.clone());
    let with_pe = tape.add(with_bias, pe);
    let cls = tp.var(model.idx.cls);
    tape.concat_rows(&[cls, with_pe])
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let m = tape.matmul(x, w, false, false);
    tape.add_row_broadcast(m, b)
}

/// One pre-norm transformer block.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    blk: &BlockIdx,
    tp: &TapeParams,
    heads: usize,
) -> Var {
    let n1 = tape.layer_norm(x, tp.var(blk.ln1_g), tp.var(blk.ln1_b), LN_EPS);
    let q = linear(tape, n1, tp.var(blk.wq), tp.var(blk.bq));
    let k = linear(tape, n1, tp.var(blk.wk), tp.var(blk.bk));
    let v = linear(tape, n1, tp.var(blk.wv), tp.var(blk.bv));
    let att = tape.mha(q, k, v, heads);
    let o = linear(tape, att, tp.var(blk.wo), tp.var(blk.bo));
    let x = tape.add(x, o);
    let n2 = tape.layer_norm(x, tp.var(blk.ln2_g), tp.var(blk.ln2_b), LN_EPS);
    let h = linear(tape, n2, tp.var(blk.w1), tp.var(blk.b1));
    let h = tape.gelu(h);
    let f = linear(tape, h, tp.var(blk.w2), tp.var(blk.b2));
    tape.add(x, f)
}

/// Canonical channel order: indices sorted by the lexicographic order of
/// the channels' token values. Content-derived, so it is invariant under
/// input permutation; ties mean identical content, where order cannot
/// change any reduction result.
fn canonical_order<T: Scalar>(tape: &Tape<T>, streams: &[Var]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by(|&a, &b| {
        let ta = &tape.value(streams[a]).data;
        let tb = &tape.value(streams[b]).data;
        let la = ta.len().min(tb.len());
        for i in 0..la {
            match ta[i].partial_cmp(&tb[i]) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(ord) => return ord,
            }
        }
        ta.len().cmp(&tb.len())
    });
    order
}

fn fuse_cls_or_mean<T: Scalar>(
    tape: &mut Tape<T>,
    streams: &mut [Var],
    blk: &BlockIdx,
    tp: &TapeParams,
    heads: usize,
    mean_pool: bool,
) {
    let order = canonical_order(tape, streams);
    let summaries: Vec<Var> = order
        .iter()
        .map(|&c| {
            if mean_pool {
                let rows = tape.value(streams[c]).rows;
                let patches = tape.slice_rows(streams[c], 1, rows - 1);
                tape.mean_rows(patches)
            } else {
                tape.gather_rows(streams[c], vec![0])
            }
        })
        .collect();
    let stacked = tape.concat_rows(&summaries);
    let fused = transformer_block(tape, stacked, blk, tp, heads);
    for (pos, &c) in order.iter().enumerate() {
        let row = tape.slice_rows(fused, pos, 1);
        let new_cls = if mean_pool {
            // The pooled vector plays the [CLS] role inside the fusion
            // block; its residual update is applied to the real [CLS].
            let pooled = summaries[pos];
            let delta = tape.sub(row, pooled);
            let old = tape.gather_rows(streams[c], vec![0]);
            tape.add(old, delta)
        } else {
            row
        };
        streams[c] = tape.scatter_rows(streams[c], new_cls, vec![0]);
    }
}

fn fuse_all<T: Scalar>(
    tape: &mut Tape<T>,
    streams: &mut [Var],
    blk: &BlockIdx,
    tp: &TapeParams,
    heads: usize,
) {
    let order = canonical_order(tape, streams);
    let parts: Vec<Var> = order.iter().map(|&c| streams[c]).collect();
    let cat = tape.concat_rows(&parts);
    let fused = transformer_block(tape, cat, blk, tp, heads);
    let mut offset = 0;
    for &c in &order {
        let rows = tape.value(streams[c]).rows;
        streams[c] = tape.slice_rows(fused, offset, rows);
        offset += rows;
    }
}

/// Pairwise cross-attention fusion: each channel's [CLS] attends over the
/// other channel's patch tokens; both updates use pre-fusion values.
fn fuse_cross<T: Scalar>(
    tape: &mut Tape<T>,
    streams: &mut [Var],
    blk: &BlockIdx,
    tp: &TapeParams,
    heads: usize,
) -> Result<()> {
    if streams.len() != 2 {
        return Err(Error::Unsupported(format!(
            "cross-attention fusion handles exactly 2 channels, got {}",
            streams.len()
        )));
    }
    let mut new_cls = Vec::with_capacity(2);
    for (a, b) in [(0, 1), (1, 0)] {
        let cls = tape.gather_rows(streams[a], vec![0]);
        let rows_b = tape.value(streams[b]).rows;
        let other = tape.slice_rows(streams[b], 1, rows_b - 1);
        let n_cls = tape.layer_norm(cls, tp.var(blk.ln1_g), tp.var(blk.ln1_b), LN_EPS);
        let n_other = tape.layer_norm(other, tp.var(blk.ln1_g), tp.var(blk.ln1_b), LN_EPS);
        let q = linear(tape, n_cls, tp.var(blk.wq), tp.var(blk.bq));
        let k = linear(tape, n_other, tp.var(blk.wk), tp.var(blk.bk));
        let v = linear(tape, n_other, tp.var(blk.wv), tp.var(blk.bv));
        let att = tape.mha(q, k, v, heads);
        let o = linear(tape, att, tp.var(blk.wo), tp.var(blk.bo));
        let x = tape.add(cls, o);
        let n2 = tape.layer_norm(x, tp.var(blk.ln2_g), tp.var(blk.ln2_b), LN_EPS);
        let h = linear(tape, n2, tp.var(blk.w1), tp.var(blk.b1));
        let h = tape.gelu(h);
        let f = linear(tape, h, tp.var(blk.w2), tp.var(blk.b2));
        new_cls.push(tape.add(x, f));
    }
    for (c, cls) in new_cls.into_iter().enumerate() {
        streams[c] = tape.scatter_rows(streams[c], cls, vec![0]);
    }
    Ok(())
}

/// Run the shared-weight encoder over per-channel token streams, applying
/// the configured fusion after every second block, then the final layer
/// norm. Streams may have different token counts (masked visibility).
pub fn encode_streams<T: Scalar>(
    tape: &mut Tape<T>,
    mut streams: Vec<Var>,
    model: &Model<T>,
    tp: &TapeParams,
) -> Result<Vec<Var>> {
    if streams.is_empty() {
        return Err(Error::DegenerateInput(
            "encode needs at least one channel".into(),
        ));
    }
    let cfg = &model.cfg;
    let mut fusion_i = 0;
    for (bi, blk) in model.idx.blocks.iter().enumerate() {
        for s in streams.iter_mut() {
            *s = transformer_block(tape, *s, blk, tp, cfg.heads);
        }
        if (bi + 1) % cfg.fusion_every == 0 && fusion_i < model.idx.fusion.len() {
            let fblk = &model.idx.fusion[fusion_i];
            match cfg.fusion {
                FusionMode::None => {}
                FusionMode::Cls => fuse_cls_or_mean(tape, &mut streams, fblk, tp, cfg.heads, false),
                FusionMode::Mean => fuse_cls_or_mean(tape, &mut streams, fblk, tp, cfg.heads, true),
                FusionMode::All => fuse_all(tape, &mut streams, fblk, tp, cfg.heads),
                FusionMode::Cross => fuse_cross(tape, &mut streams, fblk, tp, cfg.heads)?,
            }
            fusion_i += 1;
        }
    }
    let streams = streams
        .into_iter()
        .map(|s| {
            tape.layer_norm(
                s,
                tp.var(model.idx.final_ln_g),
                tp.var(model.idx.final_ln_b),
                LN_EPS,
            )
        })
        .collect();
    Ok(streams)
}

/// Final hidden states per channel.
#[derive(Clone, Debug)]
pub struct EncoderState<T> {
    /// One (1+P) x E matrix per channel; row 0 is the [CLS] vector.
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn channels(&self) -> usize {
        self.hidden.len()
    }

    pub fn cls(&self, channel: usize) -> &[T] {
        self.hidden[channel].row(0)
    }

    /// Patch rows from all channels concatenated (no [CLS] rows), the
    /// layout the temporal-fusion scorer consumes.
    pub fn patch_matrix(&self) -> Tensor<T> {
        let cols = self.hidden[0].cols;
        let rows: usize = self.hidden.iter().map(|h| h.rows - 1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut r = 0;
        for h in &self.hidden {
            for src in 1..h.rows {
                out.row_mut(r).copy_from_slice(h.row(src));
                r += 1;
            }
        }
        out
    }

    /// Concatenated per-channel [CLS] vectors (C*E features).
    pub fn cls_concat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.hidden.len() * self.hidden[0].cols);
        for h in &self.hidden {
            out.extend_from_slice(h.row(0));
        }
        out
    }
}

/// Inference entry: tokenized stacks in, full-token encoder state out.
pub fn encode_segment<T: Scalar>(
    model: &Model<T>,
    stacks: &[ScalogramStack],
) -> Result<EncoderState<T>> {
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &model.params);
    let streams = stacks
        .iter()
        .map(|stack| {
            let unfolded = Arc::new(unfold_stack::<T>(stack, &model.cfg)?);
            Ok(patch_embed(&mut tape, unfolded, model, &tp))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = encode_streams(&mut tape, streams, model, &tp)?;
    let hidden: Vec<Tensor<T>> = out.iter().map(|&v| tape.value(v).clone()).collect();
    for h in &hidden {
        h.check_finite("encoder output")?;
    }
    Ok(EncoderState { hidden })
}
