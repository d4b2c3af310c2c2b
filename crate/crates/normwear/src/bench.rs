//! Empirical verification of the fusion and temporal-fusion complexity
//! claims: isolated attention-core kernels are timed over grids of channel
//! count C, per-channel token count L, patch count p, and candidate count
//! c, and scaling exponents are fitted on log-log data.
//!
//! The kernels count exactly the operations the complexity derivations
//! count (score dot products, softmax, weighted averaging) over
//! pre-generated inputs; projections shared by all schemes are excluded.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest timed region; below this the inner loop is repeated.
const MIN_TIMED_NS: f64 = 1e5;

// ---------------------------------------------------------------------------
// Attention-core kernels (f32, plain loops, deterministic op counts)
// ---------------------------------------------------------------------------

fn softmax_inplace(row: &mut [f32]) {
    let mut m = f32::MIN;
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Self-attention core over a single token matrix: scores, softmax,
/// weighted average. Returns the output to keep the work observable.
fn self_attention_core(tokens: &Tensor<f32>) -> Tensor<f32> {
    let (n, d) = (tokens.rows, tokens.cols);
    let mut out = Tensor::zeros(n, d);
    let mut scores = vec![0.0f32; n];
    for i in 0..n {
        let qi = tokens.row(i);
        for j in 0..n {
            let kj = tokens.row(j);
            let mut acc = 0.0f32;
            for t in 0..d {
                acc += qi[t] * kj[t];
            }
            scores[j] = acc / (d as f32).sqrt();
        }
        softmax_inplace(&mut scores);
        let orow = out.row_mut(i);
        for j in 0..n {
            let w = scores[j];
            let vj = tokens.row(j);
            for t in 0..d {
                orow[t] += w * vj[t];
            }
        }
    }
    out
}

/// One query vector attending over a token matrix.
fn cross_attention_one(query: &[f32], tokens: &Tensor<f32>, out: &mut [f32]) {
    let (n, d) = (tokens.rows, tokens.cols);
    let mut scores = vec![0.0f32; n];
    for j in 0..n {
        let kj = tokens.row(j);
        let mut acc = 0.0f32;
        for t in 0..d {
            acc += query[t] * kj[t];
        }
        scores[j] = acc / (d as f32).sqrt();
    }
    softmax_inplace(&mut scores);
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for j in 0..n {
        let w = scores[j];
        let vj = tokens.row(j);
        for t in 0..d {
            out[t] += w * vj[t];
        }
    }
}

/// All-attention fusion: one self-attention over the concatenation of
/// every channel's tokens.
pub fn fuse_all_core(channels: &[Tensor<f32>]) -> Tensor<f32> {
    let d = channels[0].cols;
    let total: usize = channels.iter().map(|c| c.rows).sum();
    let mut cat = Tensor::zeros(total, d);
    let mut r = 0;
    for ch in channels {
        for i in 0..ch.rows {
            cat.row_mut(r).copy_from_slice(ch.row(i));
            r += 1;
        }
    }
    self_attention_core(&cat)
}

/// [CLS]-attention fusion: self-attention over row 0 of each channel.
pub fn fuse_cls_core(channels: &[Tensor<f32>]) -> Tensor<f32> {
    let d = channels[0].cols;
    let mut cls = Tensor::zeros(channels.len(), d);
    for (c, ch) in channels.iter().enumerate() {
        cls.row_mut(c).copy_from_slice(ch.row(0));
    }
    self_attention_core(&cls)
}

/// Mean-pool fusion: per-channel means, then self-attention over them.
pub fn fuse_mean_core(channels: &[Tensor<f32>]) -> Tensor<f32> {
    let d = channels[0].cols;
    let mut pooled = Tensor::zeros(channels.len(), d);
    for (c, ch) in channels.iter().enumerate() {
        let row = pooled.row_mut(c);
        for i in 0..ch.rows {
            let src = ch.row(i);
            for t in 0..d {
                row[t] += src[t];
            }
        }
        let inv = 1.0 / ch.rows as f32;
        for t in 0..d {
            row[t] *= inv;
        }
    }
    self_attention_core(&pooled)
}

/// Generalized pairwise cross-attention: every channel's [CLS] attends
/// over every other channel's patch tokens.
pub fn fuse_cross_core(channels: &[Tensor<f32>]) -> Tensor<f32> {
    let d = channels[0].cols;
    let c = channels.len();
    let mut out = Tensor::zeros(c * (c - 1), d);
    let mut r = 0;
    for (i, ch_i) in channels.iter().enumerate() {
        for (j, ch_j) in channels.iter().enumerate() {
            if i == j {
                continue;
            }
            let (head, tail) = out.data.split_at_mut((r + 1) * d);
            let _ = tail;
            cross_attention_one(ch_i.row(0), ch_j, &mut head[r * d..]);
            r += 1;
        }
    }
    out
}

/// MSiTF inference path: key/value maps, relevance, recency, importance,
/// weighted aggregation, candidate retrieval.
pub struct MsitfBenchInputs {
    pub h: Tensor<f32>,
    pub key_w: Tensor<f32>,
    pub val_w: Tensor<f32>,
    pub imp_w: Tensor<f32>,
    pub query: Vec<f32>,
    pub candidates: Tensor<f32>,
}

impl MsitfBenchInputs {
    pub fn generate(p: usize, c: usize, d: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        MsitfBenchInputs {
            h: Tensor::from_fn(p, d, |_, _| rng.normal() as f32 * 0.3),
            key_w: Tensor::from_fn(d, d, |_, _| rng.normal() as f32 * 0.1),
            val_w: Tensor::from_fn(d, d, |_, _| rng.normal() as f32 * 0.1),
            imp_w: Tensor::from_fn(d, 2, |_, _| rng.normal() as f32 * 0.1),
            query: (0..d).map(|_| rng.normal() as f32).collect(),
            candidates: Tensor::from_fn(c, d, |_, _| rng.normal() as f32),
        }
    }
}

pub fn msitf_core(inp: &MsitfBenchInputs) -> (usize, f32) {
    let (p, d) = (inp.h.rows, inp.h.cols);
    let keys = inp.h.matmul(&inp.key_w, false, false);
    let values = inp.h.matmul(&inp.val_w, false, false);
    // Relevance.
    let mut rel = vec![0.0f32; p];
    for i in 0..p {
        let row = keys.row(i);
        let mut acc = 0.0f32;
        for t in 0..d {
            acc += row[t] * inp.query[t];
        }
        rel[i] = acc / (d as f32).sqrt();
    }
    softmax_inplace(&mut rel);
    // Recency over a nominal time axis of p positions.
    let eta = 8.0f32;
    let mut rec: Vec<f32> = (0..p)
        .map(|i| (-((p - 1 - i) as f32) / eta).exp())
        .collect();
    let rsum: f32 = rec.iter().sum();
    for v in rec.iter_mut() {
        *v /= rsum;
    }
    // Importance gates (tempered softmax of two logits).
    let logits = inp.h.matmul(&inp.imp_w, false, false);
    let tau = 0.5f32;
    // Combined weights and aggregation.
    let mut agg = vec![0.0f32; d];
    let mut wsum = 0.0f32;
    let mut weights = vec![0.0f32; p];
    for i in 0..p {
        let l0 = logits.at(i, 0) / tau;
        let l1 = logits.at(i, 1) / tau;
        let m = l0.max(l1);
        let imp = (l1 - m).exp() / ((l0 - m).exp() + (l1 - m).exp());
        let w = imp + rel[i] + rec[i];
        weights[i] = w;
        wsum += w;
    }
    for i in 0..p {
        let w = weights[i] / wsum;
        let row = values.row(i);
        for t in 0..d {
            agg[t] += w * row[t];
        }
    }
    // Retrieval: argmax dot product over candidates.
    let mut best = 0;
    let mut best_score = f32::MIN;
    for k in 0..inp.candidates.rows {
        let row = inp.candidates.row(k);
        let mut acc = 0.0f32;
        for t in 0..d {
            acc += row[t] * agg[t];
        }
        if acc > best_score {
            best_score = acc;
            best = k;
        }
    }
    (best, best_score)
}

// ---------------------------------------------------------------------------
// Timing harness and exponent fitting
// ---------------------------------------------------------------------------

/// Median wall time of `f` in nanoseconds. The inner loop is calibrated so
/// each timed region exceeds the timer-resolution floor.
pub fn time_median_ns<F: FnMut()>(mut f: F, reps: usize) -> f64 {
    // Calibration pass (also the warmup).
    let t0 = Instant::now();
    f();
    let once = t0.elapsed().as_nanos() as f64;
    let iters = if once < MIN_TIMED_NS {
        ((MIN_TIMED_NS / once.max(1.0)).ceil() as usize).clamp(1, 1_000_000)
    } else {
        1
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..iters {
            f();
        }
        samples.push(t.elapsed().as_nanos() as f64 / iters as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

#[derive(Clone, Debug)]
pub struct BenchPoint {
    pub x: f64,
    pub median_ns: f64,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub scheme: String,
    pub axis: String,
    pub points: Vec<BenchPoint>,
    pub exponent: f64,
    pub r2: f64,
    pub flagged: bool,
}

/// Least-squares slope and R^2 of ln(t) against ln(x).
pub fn fit_loglog(points: &[BenchPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_ns.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let slope = sxy / sxx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let pred = ym + slope * (x - xm);
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - ym) * (y - ym);
    }
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, r2)
}

/// Time `run` over a grid, retrying with more repetitions while the log-log
/// fit is too noisy; a persistently noisy curve comes back flagged.
fn measure_curve<F: FnMut(f64) -> Box<dyn FnMut()>>(
    scheme: &str,
    axis: &str,
    grid: &[f64],
    mut make_op: F,
    base_reps: usize,
) -> Result<BenchResult> {
    if grid.len() < 5 {
        return Err(Error::Config(format!(
            "{scheme}/{axis}: need at least 5 grid points, got {}",
            grid.len()
        )));
    }
    let mut reps = base_reps.max(3);
    for attempt in 0..3 {
        let points: Vec<BenchPoint> = grid
            .iter()
            .map(|&x| {
                let mut op = make_op(x);
                BenchPoint {
                    x,
                    median_ns: time_median_ns(&mut op, reps),
                }
            })
            .collect();
        let (exponent, r2) = fit_loglog(&points);
        // R^2 gates noise only when the curve actually varies; a flat curve
        // (near-zero exponent) is judged by its spread instead.
        let spread = points
            .iter()
            .map(|p| p.median_ns)
            .fold(f64::MIN, f64::max)
            / points.iter().map(|p| p.median_ns).fold(f64::MAX, f64::min);
        let clean = r2 >= 0.9 || (exponent.abs() < 0.25 && spread < 1.5);
        if clean || attempt == 2 {
            return Ok(BenchResult {
                scheme: scheme.to_string(),
                axis: axis.to_string(),
                points,
                exponent,
                r2,
                flagged: !clean,
            });
        }
        reps *= 2;
    }
    unreachable!()
}

fn random_channels(c: usize, l: usize, d: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = Rng::new(seed);
    (0..c)
        .map(|_| Tensor::from_fn(l, d, |_, _| rng.normal() as f32 * 0.5))
        .collect()
}

/// The fusion-scheme sweeps: all-attention over L, [CLS]-attention over L
/// and C, mean-pool over L, pairwise cross-attention over C.
pub fn bench_fusion(d: usize, reps: usize) -> Result<Vec<BenchResult>> {
    let l_grid = [16.0, 32.0, 64.0, 128.0, 256.0];
    let c_grid = [8.0, 16.0, 32.0, 64.0, 128.0];
    let mut results = Vec::new();

    results.push(measure_curve(
        "all",
        "L",
        &l_grid,
        |l| {
            let ch = random_channels(2, l as usize, d, 11);
            Box::new(move || {
                std::hint::black_box(fuse_all_core(&ch));
            })
        },
        reps,
    )?);
    results.push(measure_curve(
        "cls",
        "L",
        &l_grid,
        |l| {
            let ch = random_channels(8, l as usize, d, 13);
            Box::new(move || {
                std::hint::black_box(fuse_cls_core(&ch));
            })
        },
        reps,
    )?);
    results.push(measure_curve(
        "cls",
        "C",
        &c_grid,
        |c| {
            let ch = random_channels(c as usize, 4, d, 17);
            Box::new(move || {
                std::hint::black_box(fuse_cls_core(&ch));
            })
        },
        reps,
    )?);
    results.push(measure_curve(
        "mean",
        "L",
        &[64.0, 128.0, 256.0, 512.0, 1024.0],
        |l| {
            let ch = random_channels(4, l as usize, d, 19);
            Box::new(move || {
                std::hint::black_box(fuse_mean_core(&ch));
            })
        },
        reps,
    )?);
    results.push(measure_curve(
        "cross",
        "C",
        &[4.0, 8.0, 16.0, 32.0, 64.0],
        |c| {
            let ch = random_channels(c as usize, 64, d, 23);
            Box::new(move || {
                std::hint::black_box(fuse_cross_core(&ch));
            })
        },
        reps,
    )?);
    Ok(results)
}

/// The temporal-fusion sweeps: patch count p and candidate count c.
pub fn bench_msitf(d: usize, reps: usize) -> Result<Vec<BenchResult>> {
    let mut results = Vec::new();
    results.push(measure_curve(
        "msitf",
        "p",
        &[256.0, 512.0, 1024.0, 2048.0, 4096.0],
        |p| {
            let inp = MsitfBenchInputs::generate(p as usize, 16, d, 29);
            Box::new(move || {
                std::hint::black_box(msitf_core(&inp));
            })
        },
        reps,
    )?);
    results.push(measure_curve(
        "msitf",
        "c",
        &[4096.0, 8192.0, 16384.0, 32768.0, 65536.0],
        |c| {
            let inp = MsitfBenchInputs::generate(8, c as usize, d, 31);
            Box::new(move || {
                std::hint::black_box(msitf_core(&inp));
            })
        },
        reps,
    )?);
    Ok(results)
}

// ---------------------------------------------------------------------------
// Allocation tracking (opt-in global allocator for memory benchmarks)
// ---------------------------------------------------------------------------

static ALLOCATED: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Byte-counting wrapper around the system allocator. Binaries that want
/// memory high-water readings declare it as their `#[global_allocator]`.
pub struct TrackingAlloc;

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            let cur = ALLOCATED.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        ALLOCATED.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

pub fn tracking_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

fn reset_peak() {
    PEAK.store(ALLOCATED.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Allocation high-water mark of one call, minus the baseline held before
/// it. Requires the tracking allocator; errors otherwise.
pub fn measure_peak<F: FnOnce()>(f: F) -> Result<usize> {
    if !tracking_installed() {
        return Err(Error::Unsupported(
            "memory benchmark requires the tracking allocator (run via the CLI)".into(),
        ));
    }
    let base = ALLOCATED.load(Ordering::Relaxed);
    reset_peak();
    f();
    Ok(peak_bytes().saturating_sub(base))
}

/// Peak-allocation sweeps over p and c for the temporal-fusion path.
pub fn bench_msitf_memory(d: usize) -> Result<Vec<BenchResult>> {
    let curve = |axis: &str, grid: &[f64], gen: &dyn Fn(f64) -> MsitfBenchInputs| {
        let points = grid
            .iter()
            .map(|&x| {
                let peak = measure_peak(|| {
                    let inp = gen(x);
                    std::hint::black_box(msitf_core(&inp));
                })?;
                Ok(BenchPoint {
                    x,
                    median_ns: peak as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (exponent, r2) = fit_loglog(&points);
        Ok(BenchResult {
            scheme: "msitf_mem".to_string(),
            axis: axis.to_string(),
            points,
            exponent,
            r2,
            flagged: r2 < 0.9,
        })
    };
    Ok(vec![
        curve("p", &[1024.0, 2048.0, 4096.0, 8192.0, 16384.0], &|p| {
            MsitfBenchInputs::generate(p as usize, 8, d, 37)
        })?,
        curve("c", &[8192.0, 16384.0, 32768.0, 65536.0, 131072.0], &|c| {
            MsitfBenchInputs::generate(8, c as usize, d, 41)
        })?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglog_fit_recovers_known_exponent() {
        let points: Vec<BenchPoint> = [1.0f64, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&x| BenchPoint {
                x,
                median_ns: 3.0 * x.powf(2.0),
            })
            .collect();
        let (slope, r2) = fit_loglog(&points);
        assert!((slope - 2.0).abs() < 1e-9);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_core_doubles_quadratically_in_flops() {
        // Structural sanity: output shape and determinism of the kernels.
        let ch = random_channels(3, 8, 16, 1);
        let a = fuse_all_core(&ch);
        assert_eq!((a.rows, a.cols), (24, 16));
        let b = fuse_all_core(&ch);
        assert_eq!(a.data, b.data);
        let cls = fuse_cls_core(&ch);
        assert_eq!((cls.rows, cls.cols), (3, 16));
        let mp = fuse_mean_core(&ch);
        assert_eq!((mp.rows, mp.cols), (3, 16));
        let cr = fuse_cross_core(&ch);
        assert_eq!((cr.rows, cr.cols), (6, 16));
    }

    #[test]
    fn msitf_core_runs_and_is_deterministic() {
        let inp = MsitfBenchInputs::generate(64, 10, 32, 5);
        let (a, sa) = msitf_core(&inp);
        let (b, sb) = msitf_core(&inp);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a < 10);
    }

    #[test]
    fn measure_peak_requires_tracking_allocator() {
        if !tracking_installed() {
            assert!(measure_peak(|| {}).is_err());
        }
    }
}
