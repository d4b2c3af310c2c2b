//! Memory-stream-inspired temporal fusion: task-conditioned pooling of
//! backbone patch embeddings, a variational projection into the text
//! space, alignment losses, and zero-shot retrieval.
//!
//! Three per-patch scores are combined into pooling weights:
//! - relevance: softmaxed cross-attention between patch keys and the query
//!   sentence embedding,
//! - recency: fixed exponential decay over the patch's time column,
//! - importance: a learned two-logit gate tempered by Gumbel-softmax
//!   (noisy during training, the plain tempered softmax at inference).
//!
//! The gate follows the standard Gumbel-softmax construction with
//! independent per-class noise draws; a single shared draw is an
//! alternative reading of the sampling step, but it cancels in the
//! two-class softmax and would disable the noise entirely.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{EncoderState, ParamBuilder, ParamSet, TapeParams};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::text::{TaskTemplates, TextEmbedder};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MsitfConfig {
    /// Backbone embedding width E.
    pub hidden: usize,
    /// Text space width.
    pub text_dim: usize,
    /// Score mixing weights for importance / relevance / recency.
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Recency decay rate in time columns.
    pub eta: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Refine-loss L1 weight.
    pub lambda: f64,
    /// Time columns per channel (patch grid width).
    pub grid_cols: usize,
}

impl MsitfConfig {
    pub fn new(hidden: usize, text_dim: usize, grid_cols: usize) -> Self {
        MsitfConfig {
            hidden,
            text_dim,
            alpha: 1.0,
            beta: 1.0,
            kappa: 1.0,
            eta: 8.0,
            tau: 0.5,
            lambda: 0.5,
            grid_cols,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MsitfIdx {
    pub key_w: usize,
    pub key_b: usize,
    pub val_w: usize,
    pub val_b: usize,
    pub imp_w: usize,
    pub imp_b: usize,
    pub query_w: usize,
    pub query_b: usize,
    pub mu_w: usize,
    pub mu_b: usize,
    pub logsig_w: usize,
    pub logsig_b: usize,
    pub log_gamma: usize,
}

pub struct MsitfModel<T> {
    pub cfg: MsitfConfig,
    pub params: ParamSet<T>,
    pub idx: MsitfIdx,
}

impl<T: Scalar> MsitfModel<T> {
    pub fn init(cfg: MsitfConfig, seed: u64) -> Self {
        let std = 0.02;
        let mut b = ParamBuilder::new(seed);
        let idx = MsitfIdx {
            key_w: b.trunc_normal("key.w", cfg.hidden, cfg.hidden, std),
            key_b: b.zeros("key.b", 1, cfg.hidden, true),
            val_w: b.trunc_normal("val.w", cfg.hidden, cfg.hidden, std),
            val_b: b.zeros("val.b", 1, cfg.hidden, true),
            imp_w: b.trunc_normal("imp.w", cfg.hidden, 2, std),
            imp_b: b.zeros("imp.b", 1, 2, true),
            query_w: b.trunc_normal("query.w", cfg.text_dim, cfg.hidden, std),
            query_b: b.zeros("query.b", 1, cfg.hidden, true),
            mu_w: b.trunc_normal("mu.w", cfg.hidden, cfg.text_dim, std),
            mu_b: b.zeros("mu.b", 1, cfg.text_dim, true),
            logsig_w: b.trunc_normal("logsig.w", cfg.hidden, cfg.text_dim, std),
            logsig_b: b.zeros("logsig.b", 1, cfg.text_dim, true),
            log_gamma: b.zeros("log_gamma", 1, 1, true),
        };
        MsitfModel {
            cfg,
            params: b.finish(),
            idx,
        }
    }

    pub fn from_parts(cfg: MsitfConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = MsitfModel::<T>::init(cfg.clone(), 0);
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint(
                "alignment checkpoint manifest mismatch".into(),
            ));
        }
        Ok(MsitfModel {
            cfg,
            params,
            idx: reference.idx,
        })
    }
}

/// Per-forward stochastic mode. Noise tensors are supplied by the caller
/// so runs replay exactly from derived seed streams.
pub enum ScoreMode<T> {
    /// Gumbel noise (P x 2) on the gate logits and a standard-normal draw
    /// (1 x text_dim) for the variational head.
    Train {
        gumbel: Tensor<T>,
        eps: Tensor<T>,
    },
    Eval,
}

impl<T: Scalar> ScoreMode<T> {
    pub fn train_from_rng(rng: &mut Rng, patches: usize, text_dim: usize) -> Self {
        let gumbel = Tensor::from_fn(patches, 2, |_, _| T::from_f64(rng.gumbel()));
        let eps = Tensor::from_fn(1, text_dim, |_, _| T::from_f64(rng.normal()));
        ScoreMode::Train { gumbel, eps }
    }
}

/// Time-column index per patch row of a C-channel patch matrix.
pub fn column_indices(channels: usize, grid_rows: usize, grid_cols: usize) -> Vec<usize> {
    let mut cols = Vec::with_capacity(channels * grid_rows * grid_cols);
    for _ in 0..channels {
        for _ in 0..grid_rows {
            for c in 0..grid_cols {
                cols.push(c);
            }
        }
    }
    cols
}

/// Exponential-decay recency weights over time columns, normalized to sum
/// one across all rows. The last column carries unnormalized weight 1.
pub fn recency_weights(cols: &[usize], grid_cols: usize, eta: f64) -> Vec<f64> {
    let last = (grid_cols - 1) as f64;
    let mut w: Vec<f64> = cols
        .iter()
        .map(|&c| (-(last - c as f64) / eta).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

pub struct MsitfGraph {
    /// 1 x text_dim fused, projected embedding.
    pub yhat: Var,
    /// 1 x P diagnostic score rows.
    pub relevance: Var,
    pub recency: Var,
    pub importance: Var,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let m = tape.matmul(x, w, false, false);
    tape.add_row_broadcast(m, b)
}

/// Build the fusion graph for one sample: patch matrix (P x E, channels
/// already concatenated, no [CLS] rows) plus the query embedding in, the
/// aligned embedding out.
pub fn msitf_graph<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    cols: &[usize],
    query: &[f64],
    model: &MsitfModel<T>,
    tp: &TapeParams,
    mode: &ScoreMode<T>,
) -> Result<MsitfGraph> {
    let cfg = &model.cfg;
    let p = tape.value(h).rows;
    if cols.len() != p {
        return Err(Error::Shape(format!(
            "{} column indices for {p} patch rows",
            cols.len()
        )));
    }
    if query.len() != cfg.text_dim {
        return Err(Error::Shape(format!(
            "query dim {} != text dim {}",
            query.len(),
            cfg.text_dim
        )));
    }

    // Relevance: softmax over patches of (k(H) . proj(query)) / sqrt(E).
    let keys = linear(tape, h, tp.var(model.idx.key_w), tp.var(model.idx.key_b));
    let qrow = tape.constant(Tensor::from_vec(
        1,
        cfg.text_dim,
        query.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let qproj = linear(
        tape,
        qrow,
        tp.var(model.idx.query_w),
        tp.var(model.idx.query_b),
    );
    let logits = tape.matmul(qproj, keys, false, true);
    let scaled = tape.scale(logits, 1.0 / (cfg.hidden as f64).sqrt());
    let relevance = tape.softmax_rows(scaled);

    // Recency: fixed decay over the patch's time column.
    let rec = recency_weights(cols, cfg.grid_cols, cfg.eta);
    let recency = tape.constant(Tensor::from_vec(
        1,
        p,
        rec.iter().map(|&v| T::from_f64(v)).collect(),
    ));

    // Importance: tempered (Gumbel-)softmax over two logits, class-1 slot.
    let gate_logits = linear(tape, h, tp.var(model.idx.imp_w), tp.var(model.idx.imp_b));
    let noisy = match mode {
        ScoreMode::Train { gumbel, eps: _ } => {
            let g = tape.constant(gumbel.clone());
            tape.add(gate_logits, g)
        }
        ScoreMode::Eval => gate_logits,
    };
    let tempered = tape.scale(noisy, 1.0 / cfg.tau);
    let gate_soft = tape.softmax_rows(tempered);
    let gate_col = tape.slice_cols(gate_soft, 1, 1);
    let importance = tape.transpose(gate_col);

    // Combined pooling weights, renormalized to sum one.
    let a_imp = tape.scale(importance, cfg.alpha);
    let b_rel = tape.scale(relevance, cfg.beta);
    let k_rec = tape.scale(recency, cfg.kappa);
    let sum1 = tape.add(a_imp, b_rel);
    let combined = tape.add(sum1, k_rec);
    let total = tape.sum_rowwise(combined);
    if tape.value(total).data[0].to_f64() <= 0.0 {
        return Err(Error::Numeric(
            "combined pooling weights sum to zero".into(),
        ));
    }
    let inv = tape.recip(total);
    let weights = tape.mul_scalar_node(combined, inv);

    // Weighted sum of value projections.
    let values = linear(tape, h, tp.var(model.idx.val_w), tp.var(model.idx.val_b));
    let agg = tape.matmul(weights, values, false, false);

    // Variational projection into the text space.
    let mu = linear(tape, agg, tp.var(model.idx.mu_w), tp.var(model.idx.mu_b));
    let yhat = match mode {
        ScoreMode::Eval => mu,
        ScoreMode::Train { eps, gumbel: _ } => {
            let ls = linear(
                tape,
                agg,
                tp.var(model.idx.logsig_w),
                tp.var(model.idx.logsig_b),
            );
            let ls = tape.clamp(ls, -6.0, 2.0);
            let sigma = tape.exp(ls);
            let e = tape.constant(eps.clone());
            let noise = tape.mul_elem(sigma, e);
            tape.add(mu, noise)
        }
    };

    Ok(MsitfGraph {
        yhat,
        relevance,
        recency,
        importance,
    })
}

/// Batch contrastive loss (softmax over in-batch candidates at learnable
/// temperature): -(1/N) sum_i log softmax_row_i(Yhat Y^T / gamma)[i].
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    yhat: Var,
    y: Var,
    log_gamma: Var,
) -> Var {
    let logits = tape.matmul(yhat, y, false, true);
    let neg = tape.scale(log_gamma, -1.0);
    let inv_gamma = tape.exp(neg);
    let scaled = tape.mul_scalar_node(logits, inv_gamma);
    let ls = tape.log_softmax_rows(scaled);
    let diag = tape.diag_mean(ls);
    tape.scale(diag, -1.0)
}

/// Refine loss: (1/N) sum_i (1 - cos(Yhat_i, Y_i)) + lambda * |Yhat_i - Y_i|_1.
pub fn refine_loss<T: Scalar>(tape: &mut Tape<T>, yhat: Var, y: Var, lambda: f64) -> Result<Var> {
    let d = tape.row_dot(yhat, y);
    let na = tape.row_l2(yhat)?;
    let nb = tape.row_l2(y)?;
    let nn = tape.mul_elem(na, nb);
    let cos = tape.div(d, nn);
    let n = tape.value(cos).rows;
    let ones = tape.constant(Tensor::from_vec(n, 1, vec![T::ONE; n]));
    let cos_term = tape.sub(ones, cos);
    let diff = tape.sub(yhat, y);
    let absdiff = tape.abs(diff);
    let l1 = tape.sum_rowwise(absdiff);
    let l1w = tape.scale(l1, lambda);
    let per_sample = tape.add(cos_term, l1w);
    Ok(tape.mean_all(per_sample))
}

/// One labeled sample for alignment training: frozen-backbone patch matrix
/// plus its time-column indices and class label.
pub struct AlignSample {
    pub h: Arc<Tensor<f32>>,
    pub cols: Arc<Vec<usize>>,
    pub label: String,
}

impl AlignSample {
    pub fn from_state(state: &EncoderState<f32>, grid_rows: usize, grid_cols: usize, label: String) -> Self {
        AlignSample {
            h: Arc::new(state.patch_matrix()),
            cols: Arc::new(column_indices(state.channels(), grid_rows, grid_cols)),
            label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignConfig {
    pub epochs: usize,
    pub refine_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub no_refine: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            epochs: 40,
            refine_epochs: 40,
            batch: 32,
            lr: 1e-3,
            weight_decay: 5e-6,
            lr_decay: 0.997,
            seed: 0,
            no_refine: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Contrastive,
    Refine,
}

/// Two-phase alignment training on frozen backbone features: contrastive
/// first, then the cosine+L1 refinement. Ground-truth sentences sample one
/// template variant per (epoch, sample). Returns per-epoch mean losses.
pub fn align_train(
    model: &mut MsitfModel<f32>,
    samples: &[AlignSample],
    task: &TaskTemplates,
    embedder: &dyn TextEmbedder,
    cfg: &AlignConfig,
) -> Result<Vec<(String, usize, f64)>> {
    if samples.is_empty() {
        return Err(Error::DegenerateInput("no alignment samples".into()));
    }
    if task.labels.is_empty() {
        return Err(Error::Config("empty template list".into()));
    }
    let query = embedder.embed(&task.query)?.vector;
    // Pre-embed every template variant of every label.
    let mut label_variants: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for lt in &task.labels {
        let variants = lt
            .templates
            .iter()
            .enumerate()
            .map(|(i, _)| Ok(embedder.embed(&lt.render(i))?.vector))
            .collect::<Result<Vec<_>>>()?;
        label_variants.push((lt.label.clone(), variants));
    }
    let variants_of = |label: &str| -> Result<&Vec<Vec<f64>>> {
        label_variants
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("no templates for label '{label}'")))
    };

    let mut opt = crate::pretrain::AdamW::new(&model.params);
    let mut curve = Vec::new();
    let mut global_step = 0usize;
    let phases: &[(Phase, u64)] = if cfg.no_refine {
        &[(Phase::Contrastive, 0u64)]
    } else {
        &[(Phase::Contrastive, 0), (Phase::Refine, 1)]
    };
    for &(phase, phase_id) in phases {
        let epochs = match phase {
            Phase::Contrastive => cfg.epochs,
            Phase::Refine => cfg.refine_epochs,
        };
        for epoch in 0..epochs {
            let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
            let mut order =
                Rng::derive(cfg.seed, &[0x616c69676e, phase_id, epoch as u64]);
            let perm = order.permutation(samples.len());
            let mut epoch_loss = 0.0;
            let mut batches = 0.0;
            for batch_ids in perm.chunks(cfg.batch) {
                let mut tape = Tape::new();
                let tp = TapeParams::register(&mut tape, &model.params);
                let mut yhat_rows = Vec::with_capacity(batch_ids.len());
                let mut y_rows: Vec<f32> = Vec::new();
                for &sid in batch_ids {
                    let s = &samples[sid];
                    let mut noise_rng = Rng::derive(
                        cfg.seed,
                        &[0x6e6f697365, phase_id, global_step as u64, sid as u64],
                    );
                    let mode = ScoreMode::train_from_rng(
                        &mut noise_rng,
                        s.h.rows,
                        model.cfg.text_dim,
                    );
                    let h = tape.constant_shared(s.h.clone());
                    let g = msitf_graph(&mut tape, h, &s.cols, &query, model, &tp, &mode)?;
                    yhat_rows.push(g.yhat);
                    let variants = variants_of(&s.label)?;
                    let pick = Rng::derive(
                        cfg.seed,
                        &[0x74656d70, phase_id, epoch as u64, sid as u64],
                    )
                    .below(variants.len());
                    y_rows.extend(variants[pick].iter().map(|&v| v as f32));
                }
                let yhat = tape.concat_rows(&yhat_rows);
                let y = tape.constant(Tensor::from_vec(
                    batch_ids.len(),
                    model.cfg.text_dim,
                    y_rows,
                ));
                let loss = match phase {
                    Phase::Contrastive => {
                        contrastive_loss(&mut tape, yhat, y, tp.var(model.idx.log_gamma))
                    }
                    Phase::Refine => refine_loss(&mut tape, yhat, y, model.cfg.lambda)?,
                };
                let loss_val = tape.value(loss).data[0] as f64;
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite alignment loss at step {global_step}"
                    )));
                }
                let mut grads = tape.backward(loss);
                let by_param: Vec<Option<Tensor<f32>>> =
                    tp.vars().iter().map(|&v| grads.take(v)).collect();
                opt.step(
                    &mut model.params,
                    &by_param,
                    lr as f32,
                    cfg.weight_decay as f32,
                    global_step + 1,
                );
                global_step += 1;
                epoch_loss += loss_val;
                batches += 1.0;
            }
            let phase_name = match phase {
                Phase::Contrastive => "contrastive",
                Phase::Refine => "refine",
            };
            curve.push((phase_name.to_string(), epoch, epoch_loss / batches));
        }
    }
    Ok(curve)
}

/// Eval-mode aligned embedding for one sample.
pub fn embed_sample(
    model: &MsitfModel<f32>,
    h: &Arc<Tensor<f32>>,
    cols: &[usize],
    query: &[f64],
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let tp = TapeParams::register_frozen(&mut tape, &model.params);
    let hv = tape.constant_shared(h.clone());
    let g = msitf_graph(&mut tape, hv, cols, query, model, &tp, &ScoreMode::Eval)?;
    Ok(tape.value(g.yhat).data.clone())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Nearest-candidate retrieval: unit-normalized dot products, ties broken
/// by the lowest candidate index. Returns (argmax, scores).
pub fn zero_shot(
    model: &MsitfModel<f32>,
    sample_h: &Arc<Tensor<f32>>,
    cols: &[usize],
    query: &[f64],
    candidates: &[Vec<f64>],
) -> Result<(usize, Vec<f64>)> {
    if candidates.len() < 2 {
        return Err(Error::Config(
            "zero-shot retrieval needs at least 2 candidates".into(),
        ));
    }
    let yhat: Vec<f64> = embed_sample(model, sample_h, cols, query)?
        .iter()
        .map(|&v| v as f64)
        .collect();
    let yu = unit(&yhat);
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let cu = unit(c);
            yu.iter().zip(&cu).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

pub fn save_stack(
    backbone: &crate::model::Model<f32>,
    msitf: &MsitfModel<f32>,
    path: &std::path::Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.meta.insert("kind".into(), "stack".into());
    ckpt.meta.insert(
        "encoder_config".into(),
        serde_json::to_string(&backbone.cfg).expect("config serializes"),
    );
    ckpt.meta.insert(
        "msitf_config".into(),
        serde_json::to_string(&msitf.cfg).expect("config serializes"),
    );
    ckpt.add_param_set("model.", &backbone.params);
    ckpt.add_param_set("msitf.", &msitf.params);
    ckpt.save(path)
}

pub fn load_stack(
    path: &std::path::Path,
) -> Result<(crate::model::Model<f32>, MsitfModel<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let enc_cfg: crate::model::EncoderConfig =
        serde_json::from_str(ckpt.meta_str("encoder_config")?)
            .map_err(|e| Error::Checkpoint(format!("bad encoder_config: {e}")))?;
    let msitf_cfg: MsitfConfig = serde_json::from_str(ckpt.meta_str("msitf_config")?)
        .map_err(|e| Error::Checkpoint(format!("bad msitf_config: {e}")))?;
    let backbone = crate::model::Model::from_parts(enc_cfg, ckpt.param_set("model."))?;
    let msitf = MsitfModel::from_parts(msitf_cfg, ckpt.param_set("msitf."))?;
    Ok((backbone, msitf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::ReferenceEmbedder;

    fn tiny_model(seed: u64) -> MsitfModel<f64> {
        MsitfModel::init(MsitfConfig::new(8, 6, 4), seed)
    }

    fn run_graph(
        model: &MsitfModel<f64>,
        h: Tensor<f64>,
        cols: &[usize],
        query: &[f64],
        mode: &ScoreMode<f64>,
    ) -> (Tape<f64>, MsitfGraph) {
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &model.params);
        let hv = tape.constant(h);
        let g = msitf_graph(&mut tape, hv, cols, query, model, &tp, mode).unwrap();
        (tape, g)
    }

    #[test]
    fn relevance_uniform_for_identical_rows_and_sums_to_one() {
        let model = tiny_model(1);
        let mut rng = Rng::new(2);
        let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut h = Tensor::zeros(5, 8);
        for r in 0..5 {
            h.row_mut(r).copy_from_slice(&row);
        }
        let query: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let (tape, g) = run_graph(&model, h, &[0, 1, 2, 3, 0], &query, &ScoreMode::Eval);
        let rel = tape.value(g.relevance);
        let sum: f64 = rel.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for &v in &rel.data {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        // softmax over logits (0, ln 3) = (0.25, 0.75); checked through the
        // same row-softmax the relevance scores use.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(1, 2, vec![0.0, 3.0f64.ln()]));
        let s = tape.softmax_rows(x);
        let v = tape.value(s);
        assert!((v.data[0] - 0.25).abs() < 1e-12);
        assert!((v.data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn recency_closed_forms() {
        // 3 columns, eta = 1: unnormalized (e^-2, e^-1, 1).
        let w = recency_weights(&[0, 1, 2], 3, 1.0);
        let raw = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
        let sum: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(&raw) {
            assert!((a - b / sum).abs() < 1e-12);
        }
        // Last column carries the maximum.
        assert!(w[2] > w[1] && w[1] > w[0]);
        // eta -> infinity: uniform.
        let wu = recency_weights(&[0, 1, 2, 3], 4, 1e12);
        for &v in &wu {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn importance_eval_gate_is_tempered_sigmoid() {
        // Equal logits -> 0.5; logit gap delta -> sigmoid(delta / tau).
        let mut model = tiny_model(3);
        // Force the gate head to produce a fixed logit pair via bias only.
        model.params.set_tensor(model.idx.imp_w, Tensor::zeros(8, 2));
        let check = |b0: f64, b1: f64, expect: f64| {
            let mut m = MsitfModel::<f64>::init(model.cfg.clone(), 3);
            m.params.set_tensor(m.idx.imp_w, Tensor::zeros(8, 2));
            m.params
                .set_tensor(m.idx.imp_b, Tensor::from_vec(1, 2, vec![b0, b1]));
            let h = Tensor::from_fn(3, 8, |r, c| (r + c) as f64 * 0.1);
            let q = vec![0.1; 6];
            let (tape, g) = run_graph(&m, h, &[0, 1, 2], &q, &ScoreMode::Eval);
            for &v in &tape.value(g.importance).data {
                assert!((v - expect).abs() < 1e-9, "gate {v} expect {expect}");
            }
        };
        check(0.3, 0.3, 0.5);
        // delta = 0.5 at tau = 0.5: sigmoid(1).
        check(0.0, 0.5, 1.0 / (1.0 + (-1.0f64).exp()));
    }

    #[test]
    fn importance_train_tie_gates_average_half() {
        let model = tiny_model(4);
        let h = Tensor::zeros(1, 8); // zero logits both classes
        let q = vec![0.1; 6];
        let mut rng = Rng::new(7);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mode = ScoreMode::train_from_rng(&mut rng, 1, 6);
            let (tape, g) = run_graph(&model, h.clone(), &[0], &q, &mode);
            sum += tape.value(g.importance).data[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean gate {mean}");
    }

    #[test]
    fn aggregate_matches_naive_weighted_sum() {
        let model = tiny_model(5);
        let mut rng = Rng::new(6);
        let h = Tensor::from_fn(7, 8, |_, _| rng.normal());
        let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let cols = vec![0, 1, 2, 3, 0, 1, 2];
        let (tape, g) = run_graph(&model, h.clone(), &cols, &q, &ScoreMode::Eval);

        // Recompute the aggregation with plain loops from the diagnostic
        // scores and parameter tensors.
        let rel = tape.value(g.relevance).data.clone();
        let rec = tape.value(g.recency).data.clone();
        let imp = tape.value(g.importance).data.clone();
        let mut w: Vec<f64> = (0..7).map(|i| imp[i] + rel[i] + rec[i]).collect();
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let val_w = model.params.tensor(model.idx.val_w);
        let val_b = model.params.tensor(model.idx.val_b);
        let mut agg = vec![0.0f64; 8];
        for (i, &wi) in w.iter().enumerate() {
            for d in 0..8 {
                let mut v = val_b.data[d];
                for k in 0..8 {
                    v += h.at(i, k) * val_w.at(k, d);
                }
                agg[d] += wi * v;
            }
        }
        // mu(agg) equals the eval-mode output.
        let mu_w = model.params.tensor(model.idx.mu_w);
        let mu_b = model.params.tensor(model.idx.mu_b);
        let yhat = tape.value(g.yhat);
        for d in 0..6 {
            let mut v = mu_b.data[d];
            for k in 0..8 {
                v += agg[k] * mu_w.at(k, d);
            }
            assert!((yhat.data[d] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn variational_sampling_is_centered_on_mu() {
        let model = tiny_model(8);
        let mut rng = Rng::new(9);
        let h = Tensor::from_fn(4, 8, |_, _| rng.normal());
        let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let cols = vec![0, 1, 2, 3];
        let (tape_eval, g_eval) = run_graph(&model, h.clone(), &cols, &q, &ScoreMode::Eval);
        let mu = tape_eval.value(g_eval.yhat).data.clone();
        let n = 10_000;
        let mut sums = vec![0.0f64; 6];
        let mut draw_rng = Rng::new(10);
        for _ in 0..n {
            // Zero the Gumbel noise so only the variational draw varies.
            let eps = Tensor::from_fn(1, 6, |_, _| draw_rng.normal());
            let mode = ScoreMode::Train {
                gumbel: Tensor::zeros(4, 2),
                eps,
            };
            let (tape, g) = run_graph(&model, h.clone(), &cols, &q, &mode);
            for (s, &v) in sums.iter_mut().zip(&tape.value(g.yhat).data) {
                *s += v;
            }
        }
        // sigma <= e^2; sample mean within 3 sigma / sqrt(n) of mu.
        let tol = 3.0 * (2.0f64).exp() / (n as f64).sqrt();
        for (d, &mu_d) in mu.iter().enumerate() {
            let mean = sums[d] / n as f64;
            assert!((mean - mu_d).abs() < tol, "dim {d}: {mean} vs {mu_d}");
        }
    }

    #[test]
    fn contrastive_closed_forms() {
        // N=1 is exactly zero.
        let mut tape = Tape::<f64>::new();
        let yh = tape.constant(Tensor::from_vec(1, 2, vec![0.3, -0.7]));
        let y = tape.constant(Tensor::from_vec(1, 2, vec![2.0, 0.5]));
        let lg = tape.constant(Tensor::from_vec(1, 1, vec![0.0]));
        let loss = contrastive_loss(&mut tape, yh, y, lg);
        assert!(tape.value(loss).data[0].abs() < 1e-12);

        // Identity pairs in R^2 at gamma = 1: -log(e/(e+1)).
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let yh = tape.constant(eye.clone());
        let y = tape.constant(eye);
        let lg = tape.constant(Tensor::from_vec(1, 1, vec![0.0]));
        let loss = contrastive_loss(&mut tape, yh, y, lg);
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.value(loss).data[0] - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_scaling_equals_temperature_change() {
        let mut rng = Rng::new(11);
        let yh_t = Tensor::from_fn(3, 4, |_, _| rng.normal());
        let y_t = Tensor::from_fn(3, 4, |_, _| rng.normal());
        let c: f64 = 2.5;
        let eval = |yh: &Tensor<f64>, y: &Tensor<f64>, gamma: f64| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(yh.clone());
            let b = tape.constant(y.clone());
            let lg = tape.constant(Tensor::from_vec(1, 1, vec![gamma.ln()]));
            let loss = contrastive_loss(&mut tape, a, b, lg);
            tape.value(loss).data[0]
        };
        let base = eval(&yh_t.map(|v| v * c), &y_t, 1.0);
        let temp = eval(&yh_t, &y_t, 1.0 / c);
        assert!((base - temp).abs() < 1e-10);
    }

    #[test]
    fn refine_closed_forms() {
        let eval = |yh: Tensor<f64>, y: Tensor<f64>, lambda: f64| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(yh);
            let b = tape.constant(y);
            let loss = refine_loss(&mut tape, a, b, lambda).unwrap();
            tape.value(loss).data[0]
        };
        // Identical pairs: zero.
        let v = Tensor::from_vec(2, 2, vec![0.6, 0.8, 1.0, 0.0]);
        assert!(eval(v.clone(), v.clone(), 0.5).abs() < 1e-12);
        // Antipodal unit vectors at lambda = 0: cost 2.
        let y = v.map(|x| -x);
        assert!((eval(v.clone(), y, 0.0) - 2.0).abs() < 1e-12);
        // Worked orthogonal case: (1,0) vs (0,1), lambda 0.5 -> 2 exactly.
        let a = Tensor::from_vec(1, 2, vec![1.0, 0.0]);
        let b = Tensor::from_vec(1, 2, vec![0.0, 1.0]);
        assert!((eval(a, b, 0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn refine_rejects_zero_norm_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let b = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(refine_loss(&mut tape, a, b, 0.5).is_err());
    }

    #[test]
    fn msitf_gradients_match_finite_differences() {
        // Eval-mode soft path (tempered sigmoid gates), f64, contrastive +
        // refine composite over a 3-sample batch.
        let model = tiny_model(20);
        let mut rng = Rng::new(21);
        let hs: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::from_fn(5, 8, |_, _| rng.normal() * 0.7))
            .collect();
        let cols = vec![0usize, 1, 2, 3, 0];
        let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let y_t = Tensor::from_fn(3, 6, |_, _| rng.normal());

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            let m = MsitfModel {
                cfg: model.cfg.clone(),
                params: params.clone(),
                idx: model.idx.clone(),
            };
            let mut tape = Tape::new();
            let tp = TapeParams::register(&mut tape, &m.params);
            let rows: Vec<Var> = hs
                .iter()
                .map(|h| {
                    let hv = tape.constant(h.clone());
                    msitf_graph(&mut tape, hv, &cols, &q, &m, &tp, &ScoreMode::Eval)
                        .unwrap()
                        .yhat
                })
                .collect();
            let yhat = tape.concat_rows(&rows);
            let y = tape.constant(y_t.clone());
            let c = contrastive_loss(&mut tape, yhat, y, tp.var(m.idx.log_gamma));
            let r = refine_loss(&mut tape, yhat, y, m.cfg.lambda).unwrap();
            let total = tape.add(c, r);
            tape.value(total).data[0]
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &model.params);
        let rows: Vec<Var> = hs
            .iter()
            .map(|h| {
                let hv = tape.constant(h.clone());
                msitf_graph(&mut tape, hv, &cols, &q, &model, &tp, &ScoreMode::Eval)
                    .unwrap()
                    .yhat
            })
            .collect();
        let yhat = tape.concat_rows(&rows);
        let y = tape.constant(y_t.clone());
        let c = contrastive_loss(&mut tape, yhat, y, tp.var(model.idx.log_gamma));
        let r = refine_loss(&mut tape, yhat, y, model.cfg.lambda).unwrap();
        let total = tape.add(c, r);
        let mut grads = tape.backward(total);

        let h = 1e-5;
        for (i, name) in model.params.names().iter().enumerate() {
            let g = grads.take(tp.var(i));
            let gt = g.unwrap_or_else(|| {
                let t = model.params.tensor(i);
                Tensor::zeros(t.rows, t.cols)
            });
            // Probe a handful of coordinates per tensor.
            let len = model.params.tensor(i).len();
            let probes: Vec<usize> = (0..len.min(5)).map(|k| k * (len / 5).max(1) % len).collect();
            for &e in &probes {
                let mut plus = model.params.clone();
                Arc::make_mut(&mut plus.tensors[i]).data[e] += h;
                let mut minus = model.params.clone();
                Arc::make_mut(&mut minus.tensors[i]).data[e] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let analytic = gt.data[e];
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-3,
                    "{name}[{e}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn zero_lr_alignment_keeps_parameters() {
        let mut model = MsitfModel::<f32>::init(MsitfConfig::new(8, 128, 4), 30);
        let before: Vec<Vec<f32>> = model.params.tensors.iter().map(|t| t.data.clone()).collect();
        let mut rng = Rng::new(31);
        let samples: Vec<AlignSample> = (0..6)
            .map(|i| AlignSample {
                h: Arc::new(Tensor::from_fn(4, 8, |_, _| rng.normal() as f32)),
                cols: Arc::new(vec![0, 1, 2, 3]),
                label: if i % 2 == 0 { "low" } else { "high" }.to_string(),
            })
            .collect();
        let task = crate::text::default_templates(&["low".into(), "high".into()]);
        let cfg = AlignConfig {
            epochs: 2,
            refine_epochs: 1,
            batch: 3,
            lr: 0.0,
            weight_decay: 0.0,
            ..AlignConfig::default()
        };
        align_train(
            &mut model,
            &samples,
            &task,
            &ReferenceEmbedder::default(),
            &cfg,
        )
        .unwrap();
        for (t, b) in model.params.tensors.iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn zero_shot_tie_breaks_to_lowest_index() {
        let model = MsitfModel::<f32>::init(MsitfConfig::new(8, 128, 4), 32);
        let h = Arc::new(Tensor::from_fn(4, 8, |r, c| ((r * c) as f32).sin()));
        let cols = vec![0, 1, 2, 3];
        let q = vec![0.05; 128];
        let cand = vec![1.0; 128];
        let (best, scores) =
            zero_shot(&model, &h, &cols, &q, &[cand.clone(), cand.clone()]).unwrap();
        assert_eq!(best, 0);
        assert!((scores[0] - scores[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_selects_aligned_direction() {
        let model = MsitfModel::<f32>::init(MsitfConfig::new(8, 128, 4), 33);
        let h = Arc::new(Tensor::from_fn(4, 8, |r, c| ((r + c) as f32 * 0.3).cos()));
        let cols = vec![0, 1, 2, 3];
        let q = vec![0.05; 128];
        let yhat = embed_sample(&model, &h, &cols, &q).unwrap();
        let aligned: Vec<f64> = yhat.iter().map(|&v| v as f64 * 3.0).collect();
        let other: Vec<f64> = yhat.iter().map(|&v| -v as f64).collect();
        let (best, _) = zero_shot(&model, &h, &cols, &q, &[other, aligned]).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn stack_checkpoint_round_trip() {
        let backbone =
            crate::model::Model::<f32>::init(crate::model::EncoderConfig::gradcheck(), 40)
                .unwrap();
        let msitf = MsitfModel::<f32>::init(MsitfConfig::new(16, 128, 6), 41);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.ckpt");
        save_stack(&backbone, &msitf, &path).unwrap();
        let (b2, m2) = load_stack(&path).unwrap();
        assert_eq!(b2.cfg, backbone.cfg);
        for (a, b) in backbone.params.tensors.iter().zip(&b2.params.tensors) {
            assert_eq!(a.data, b.data);
        }
        for (a, b) in msitf.params.tensors.iter().zip(&m2.params.tensors) {
            assert_eq!(a.data, b.data);
        }
    }
}
