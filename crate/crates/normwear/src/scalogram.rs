//! CWT tokenization: each preprocessed channel becomes a 3-layer scalogram
//! stack (raw series, first derivative, second derivative), each layer a
//! 64 x 390 Mexican-Hat continuous wavelet transform, z-scored per layer.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::SignalSegment;
use crate::tensor::Tensor;

pub const SCALES: usize = 64;
pub const TIME_LEN: usize = 390;
pub const LAYERS: usize = 3;

/// Kernel support half-width in units of the scale; +/-8a captures
/// essentially all Ricker energy.
const SUPPORT_SCALES: f64 = 8.0;

/// Per-channel tokenizer output: 3 x 64 x 390, stored layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalogramStack {
    /// layers[l] is a SCALES x TIME_LEN matrix.
    pub layers: [Tensor<f64>; LAYERS],
}

impl ScalogramStack {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Tensor::all_finite)
    }
}

/// Central differences with one-sided stencils at both ends.
pub fn derivatives(series: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = series.len();
    if t < 3 {
        return Err(Error::DegenerateInput(format!(
            "derivatives need at least 3 samples, got {t}"
        )));
    }
    let diff = |x: &[f64]| -> Vec<f64> {
        let mut d = vec![0.0; t];
        d[0] = x[1] - x[0];
        d[t - 1] = x[t - 1] - x[t - 2];
        for i in 1..t - 1 {
            d[i] = (x[i + 1] - x[i - 1]) / 2.0;
        }
        d
    };
    let d1 = diff(series);
    let d2 = diff(&d1);
    Ok((d1, d2))
}

/// L2-normalized Mexican Hat (Ricker) wavelet at scale `a`:
/// psi_a(t) = 2/(sqrt(3a) pi^(1/4)) (1 - (t/a)^2) exp(-t^2 / (2a^2)).
pub fn ricker(t: f64, a: f64) -> f64 {
    debug_assert!(a > 0.0);
    let norm = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    let u = t / a;
    norm * (1.0 - u * u) * (-0.5 * u * u).exp()
}

/// Direct-convolution CWT over scales 1..=SCALES with "same" alignment and
/// zero extension at the series bounds. Summation order per output sample
/// is fixed (ascending kernel index), so results are bit-reproducible.
pub fn cwt(series: &[f64]) -> Tensor<f64> {
    let t = series.len();
    let mut out = Tensor::zeros(SCALES, t);
    for scale_idx in 0..SCALES {
        let a = (scale_idx + 1) as f64;
        let radius = (SUPPORT_SCALES * a).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|k| ricker(k as f64, a)).collect();
        let row = out.row_mut(scale_idx);
        for (i, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let src = i as isize + j as isize - radius;
                if src >= 0 && (src as usize) < t {
                    acc += w * series[src as usize];
                }
            }
            *slot = acc;
        }
    }
    out
}

/// Z-score a layer over all its entries; layers with nearly zero spread
/// (constant or all-zero) are set to zero instead.
fn zscore_layer(layer: &mut Tensor<f64>) {
    let n = layer.len() as f64;
    let mean = layer.data.iter().sum::<f64>() / n;
    let var = layer.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        for v in &mut layer.data {
            *v = 0.0;
        }
    } else {
        for v in &mut layer.data {
            *v = (*v - mean) / std;
        }
    }
}

/// Tokenize one canonical channel into its 3-layer z-scored scalogram stack.
pub fn tokenize_channel(series: &[f64]) -> Result<ScalogramStack> {
    if series.len() != TIME_LEN {
        return Err(Error::Shape(format!(
            "tokenizer expects canonical length {TIME_LEN}, got {}",
            series.len()
        )));
    }
    let (d1, d2) = derivatives(series)?;
    let mut layers = [cwt(series), cwt(&d1), cwt(&d2)];
    for layer in &mut layers {
        zscore_layer(layer);
    }
    let stack = ScalogramStack { layers };
    if !stack.all_finite() {
        return Err(Error::Numeric("non-finite scalogram".into()));
    }
    Ok(stack)
}

/// Tokenize all channels of a canonical segment.
pub fn tokenize(segment: &SignalSegment) -> Result<Vec<ScalogramStack>> {
    segment.validate()?;
    segment
        .samples
        .iter()
        .map(|ch| tokenize_channel(ch))
        .collect()
}

// ---------------------------------------------------------------------------
// Scalogram dump: 8 little-endian u32 header values
// (magic, version, C, layers, scales, time, reserved, reserved)
// followed by C*3*64*390 little-endian f32 values, channel-major then
// layer-major then row-major.
// ---------------------------------------------------------------------------

pub const DUMP_MAGIC: u32 = 0x4e57_5343; // "NWSC"
pub const DUMP_VERSION: u32 = 1;

pub fn save_stacks(stacks: &[ScalogramStack], path: &Path) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = [
        DUMP_MAGIC,
        DUMP_VERSION,
        stacks.len() as u32,
        LAYERS as u32,
        SCALES as u32,
        TIME_LEN as u32,
        0,
        0,
    ];
    let mut bytes = Vec::with_capacity(32 + stacks.len() * LAYERS * SCALES * TIME_LEN * 4);
    for v in header {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for stack in stacks {
        for layer in &stack.layers {
            for &v in &layer.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_stacks(path: &Path) -> Result<Vec<ScalogramStack>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    if word(0) != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    if word(1) != DUMP_VERSION {
        return Err(bad("unsupported version"));
    }
    let c = word(2) as usize;
    if (word(3), word(4), word(5)) != (LAYERS as u32, SCALES as u32, TIME_LEN as u32) {
        return Err(bad("unexpected tensor shape"));
    }
    let expected = 32 + c * LAYERS * SCALES * TIME_LEN * 4;
    if bytes.len() != expected {
        return Err(bad("payload size mismatch"));
    }
    let mut off = 32;
    let mut next = || {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
        v
    };
    let mut stacks = Vec::with_capacity(c);
    for _ in 0..c {
        let mut layers = [
            Tensor::zeros(SCALES, TIME_LEN),
            Tensor::zeros(SCALES, TIME_LEN),
            Tensor::zeros(SCALES, TIME_LEN),
        ];
        for layer in &mut layers {
            for v in &mut layer.data {
                *v = next();
            }
        }
        stacks.push(ScalogramStack { layers });
    }
    Ok(stacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn derivatives_of_line_and_constant() {
        let line: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let (d1, d2) = derivatives(&line).unwrap();
        for &v in &d1 {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for &v in &d2[1..19] {
            assert!(v.abs() < 1e-12);
        }
        let (c1, c2) = derivatives(&vec![4.2; 10]).unwrap();
        assert!(c1.iter().all(|v| v.abs() < 1e-12));
        assert!(c2.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn derivatives_exact_for_quadratic() {
        let quad: Vec<f64> = (0..30).map(|t| (t as f64) * (t as f64)).collect();
        let (d1, d2) = derivatives(&quad).unwrap();
        for (t, &v) in d1.iter().enumerate().take(29).skip(1) {
            assert!((v - 2.0 * t as f64).abs() < 1e-9, "d1[{t}]={v}");
        }
        // d2 is the central difference of d1, exact (=2) away from both ends.
        for (t, &v) in d2.iter().enumerate().take(28).skip(2) {
            assert!((v - 2.0).abs() < 1e-9, "d2[{t}]={v}");
        }
    }

    #[test]
    fn derivatives_reject_short_input() {
        assert!(derivatives(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ricker_symmetry_zero_mean_and_peak() {
        for &a in &[1.0, 3.0, 17.0] {
            for &t in &[0.3, 1.7, 5.0, 11.0] {
                assert_eq!(ricker(t, a), ricker(-t, a));
            }
            let radius = (8.0 * a).ceil() as isize;
            let sum: f64 = (-radius..=radius).map(|k| ricker(k as f64, a)).sum();
            assert!(sum.abs() < 1e-6, "a={a}: sum {sum}");
        }
        // Closed-form peak value at scale 1.
        assert!((ricker(0.0, 1.0) - 0.8673).abs() < 1e-4);
    }

    #[test]
    fn cwt_zero_and_linearity() {
        let zero = vec![0.0; TIME_LEN];
        let out = cwt(&zero);
        assert!(out.data.iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(4);
        let x: Vec<f64> = (0..TIME_LEN).map(|_| rng.normal()).collect();
        let alpha = 2.5;
        let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let a = cwt(&x);
        let b = cwt(&scaled);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((alpha * u - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn cwt_peak_scale_tracks_frequency() {
        // The Ricker band-pass peaks near angular frequency sqrt(2)/a.
        // Build a sine whose frequency matches a target scale and check the
        // max-energy row (brute-force sweep) lands within +/-2 scales.
        for &target in &[6usize, 12, 24] {
            let a = target as f64;
            let omega = std::f64::consts::SQRT_2 / a; // rad/sample
            let x: Vec<f64> = (0..TIME_LEN).map(|i| (omega * i as f64).sin()).collect();
            let sc = cwt(&x);
            // Mean |energy| per row, ignoring boundary zones of width 8a.
            let mut best = (0usize, f64::MIN);
            for s in 0..SCALES {
                let guard = (8.0 * (s + 1) as f64).ceil() as usize;
                if 2 * guard + 8 >= TIME_LEN {
                    continue;
                }
                let row = sc.row(s);
                let inner = &row[guard..TIME_LEN - guard];
                let e = inner.iter().map(|v| v * v).sum::<f64>() / inner.len() as f64;
                if e > best.1 {
                    best = (s, e);
                }
            }
            let found = best.0 + 1;
            assert!(
                (found as isize - target as isize).unsigned_abs() <= 2,
                "target scale {target}, argmax {found}"
            );
        }
    }

    #[test]
    fn tokenize_shapes_and_moments() {
        let mut rng = Rng::new(8);
        let seg = SignalSegment {
            samples: (0..4)
                .map(|_| (0..TIME_LEN).map(|_| rng.normal()).collect())
                .collect(),
            rate_hz: 65.0,
            channel_names: (0..4).map(|c| format!("ch{c}")).collect(),
            subject_id: "s0".into(),
            label: None,
        };
        let stacks = tokenize(&seg).unwrap();
        assert_eq!(stacks.len(), 4);
        for stack in &stacks {
            for layer in &stack.layers {
                assert_eq!((layer.rows, layer.cols), (SCALES, TIME_LEN));
                let n = layer.len() as f64;
                let mean = layer.data.iter().sum::<f64>() / n;
                let var =
                    layer.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-6);
                assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tokenize_zero_channel_stays_zero() {
        let seg = SignalSegment {
            samples: vec![vec![0.0; TIME_LEN]],
            rate_hz: 65.0,
            channel_names: vec!["ch0".into()],
            subject_id: "s0".into(),
            label: None,
        };
        let stacks = tokenize(&seg).unwrap();
        for layer in &stacks[0].layers {
            assert!(layer.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tokenize_is_deterministic() {
        let mut rng = Rng::new(12);
        let x: Vec<f64> = (0..TIME_LEN).map(|_| rng.normal()).collect();
        let a = tokenize_channel(&x).unwrap();
        let b = tokenize_channel(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shift_covariance_in_interior() {
        // Shifting the input shifts interior columns, away from the
        // boundary zone of width 8a.
        let mut rng = Rng::new(13);
        let base: Vec<f64> = (0..TIME_LEN + 10).map(|_| rng.normal()).collect();
        let x: Vec<f64> = base[..TIME_LEN].to_vec();
        let shifted: Vec<f64> = base[5..TIME_LEN + 5].to_vec();
        let a = cwt(&x);
        let b = cwt(&shifted);
        for s in 0..8 {
            let guard = (8.0 * (s + 1) as f64).ceil() as usize + 5;
            for c in guard..TIME_LEN - guard {
                let va = a.at(s, c + 5);
                let vb = b.at(s, c);
                assert!(
                    (va - vb).abs() < 1e-9 * (1.0 + va.abs()),
                    "scale {s} col {c}: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn layer_independence() {
        // Substituting one source layer changes only that layer.
        let mut rng = Rng::new(14);
        let x: Vec<f64> = (0..TIME_LEN).map(|_| rng.normal()).collect();
        let (d1, _) = derivatives(&x).unwrap();
        let other: Vec<f64> = (0..TIME_LEN).map(|_| rng.normal()).collect();
        let (_, d2_other) = derivatives(&other).unwrap();

        let build = |d2src: &[f64]| {
            let mut layers = [cwt(&x), cwt(&d1), cwt(d2src)];
            for layer in &mut layers {
                zscore_layer(layer);
            }
            layers
        };
        let (_, d2) = derivatives(&x).unwrap();
        let base = build(&d2);
        let subst = build(&d2_other);
        assert_eq!(base[0], subst[0]);
        assert_eq!(base[1], subst[1]);
        assert_ne!(base[2], subst[2]);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = Rng::new(21);
        let seg = SignalSegment {
            samples: (0..2)
                .map(|_| (0..TIME_LEN).map(|_| rng.normal()).collect())
                .collect(),
            rate_hz: 65.0,
            channel_names: vec!["a".into(), "b".into()],
            subject_id: "s0".into(),
            label: None,
        };
        let stacks = tokenize(&seg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stacks.nwsc");
        save_stacks(&stacks, &path).unwrap();
        let back = load_stacks(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in stacks.iter().zip(&back) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                for (x, y) in la.data.iter().zip(&lb.data) {
                    assert!((*x as f32) == (*y as f32));
                }
            }
        }
    }
}
