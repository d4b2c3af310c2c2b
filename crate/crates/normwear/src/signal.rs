//! Signal ingestion, canonical preprocessing, mixup augmentation, and
//! synthetic labeled-data generation.
//!
//! Canonical form is 65 Hz x 6 s = 390 samples per channel. Preprocessing
//! per channel is resample (linear interpolation) -> detrend (OLS line
//! removal) -> Gaussian smooth (sigma 1.3 samples), then crop or zero-pad
//! the tail to exactly 390 samples.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CANONICAL_RATE_HZ: f64 = 65.0;
pub const CANONICAL_SECONDS: f64 = 6.0;
pub const CANONICAL_LEN: usize = 390;

/// Target label attached to a segment.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(String),
    Value(f64),
}

impl Label {
    pub fn as_text(&self) -> String {
        match self {
            Label::Class(s) => s.clone(),
            Label::Value(v) => format!("{v}"),
        }
    }
}

/// A multichannel fixed-rate time-series window.
#[derive(Clone, Debug)]
pub struct SignalSegment {
    /// One row per channel, all the same length.
    pub samples: Vec<Vec<f64>>,
    pub rate_hz: f64,
    pub channel_names: Vec<String>,
    pub subject_id: String,
    pub label: Option<Label>,
}

impl SignalSegment {
    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::DegenerateInput("segment has no channels".into()));
        }
        let t = self.samples[0].len();
        if self.samples.iter().any(|ch| ch.len() != t) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        if self.channel_names.len() != self.samples.len() {
            return Err(Error::Shape("channel name count mismatch".into()));
        }
        for ch in &self.samples {
            for &v in ch {
                if !v.is_finite() {
                    return Err(Error::Numeric("non-finite sample".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

/// A labeled (or unlabeled, for pretraining) collection of segments.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub segments: Vec<SignalSegment>,
    pub task_kind: TaskKind,
}

impl Dataset {
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .segments
            .iter()
            .filter_map(|s| match &s.label {
                Some(Label::Class(c)) => Some(c.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn check_uniform(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Ok(());
        }
        let names = &self.segments[0].channel_names;
        for s in &self.segments {
            if &s.channel_names != names {
                return Err(Error::Shape("segments disagree on channel names".into()));
            }
        }
        Ok(())
    }
}

/// Remove the ordinary-least-squares line fit over the sample index.
pub fn detrend(series: &[f64]) -> Result<Vec<f64>> {
    let t = series.len();
    if t < 2 {
        return Err(Error::DegenerateInput(format!(
            "detrend needs at least 2 samples, got {t}"
        )));
    }
    let n = t as f64;
    // OLS of y on x = 0..t-1: slope = cov(x,y)/var(x), intercept = ym - slope*xm
    let xm = (n - 1.0) / 2.0;
    let ym = series.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    Ok(series
        .iter()
        .enumerate()
        .map(|(i, &y)| y - (ym + slope * (i as f64 - xm)))
        .collect())
}

/// Discrete Gaussian smoothing, kernel truncated at +/-4 sigma and
/// renormalized to sum 1. Boundaries use edge replication.
pub fn gaussian_smooth(series: &[f64], sigma_samples: f64) -> Result<Vec<f64>> {
    if sigma_samples <= 0.0 {
        return Err(Error::Config(format!(
            "gaussian_smooth sigma must be positive, got {sigma_samples}"
        )));
    }
    let radius = (4.0 * sigma_samples).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as isize)..=(radius as isize) {
        let u = k as f64 / sigma_samples;
        kernel.push((-0.5 * u * u).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }
    let t = series.len() as isize;
    let out = (0..t)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let src = (i + j as isize - radius as isize).clamp(0, t - 1);
                acc += w * series[src as usize];
            }
            acc
        })
        .collect();
    Ok(out)
}

/// Linear-interpolation resampling. Output length is
/// round(len * rate_out / rate_in); the first sample is preserved exactly
/// and positions past the last input sample replicate it.
pub fn resample(series: &[f64], rate_in: f64, rate_out: f64) -> Result<Vec<f64>> {
    if rate_in <= 0.0 || rate_out <= 0.0 {
        return Err(Error::Config(format!(
            "resample rates must be positive, got {rate_in} -> {rate_out}"
        )));
    }
    let t_in = series.len();
    if t_in < 2 {
        return Err(Error::DegenerateInput(format!(
            "resample needs at least 2 samples, got {t_in}"
        )));
    }
    if (rate_in - rate_out).abs() < f64::EPSILON * rate_in {
        return Ok(series.to_vec());
    }
    let t_out = ((t_in as f64) * rate_out / rate_in).round() as usize;
    let step = rate_in / rate_out;
    let out = (0..t_out)
        .map(|j| {
            let pos = j as f64 * step;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= t_in {
                series[t_in - 1]
            } else {
                let frac = pos - i0 as f64;
                series[i0] * (1.0 - frac) + series[i0 + 1] * frac
            }
        })
        .collect();
    Ok(out)
}

/// Full per-channel preprocessing: resample to 65 Hz, detrend, smooth,
/// then crop (first 6 s) or zero-pad the tail to 390 samples.
pub fn canonicalize(segment: &SignalSegment) -> Result<SignalSegment> {
    segment.validate()?;
    let mut channels = Vec::with_capacity(segment.channels());
    for ch in &segment.samples {
        let resampled = resample(ch, segment.rate_hz, CANONICAL_RATE_HZ)?;
        let detrended = detrend(&resampled)?;
        let mut smoothed = gaussian_smooth(&detrended, 1.3)?;
        smoothed.resize(CANONICAL_LEN, 0.0);
        channels.push(smoothed);
    }
    Ok(SignalSegment {
        samples: channels,
        rate_hz: CANONICAL_RATE_HZ,
        channel_names: segment.channel_names.clone(),
        subject_id: segment.subject_id.clone(),
        label: segment.label.clone(),
    })
}

pub fn canonicalize_dataset(dataset: &Dataset) -> Result<Dataset> {
    let segments = dataset
        .segments
        .iter()
        .map(canonicalize)
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        segments,
        task_kind: dataset.task_kind,
    })
}

/// Chunk-swap mixup: each new sample is a copy of one segment with a
/// random window replaced by a window of another. The chunk size and both
/// start offsets are drawn uniformly; multichannel segments share one
/// (size, start, start) triple across channels so cross-channel alignment
/// is preserved. The source segment's label is propagated.
pub fn mixup_augment(dataset: &Dataset, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if dataset.segments.len() < 2 {
        return Err(Error::Augmentation(format!(
            "mixup needs at least 2 segments, got {}",
            dataset.segments.len()
        )));
    }
    let l = dataset.segments[0].len();
    if dataset.segments.iter().any(|s| s.len() != l) {
        return Err(Error::Augmentation(
            "mixup needs all segments the same length".into(),
        ));
    }
    let m = dataset.segments.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let i1 = rng.below(m);
        let i2 = rng.below(m);
        let lambda = rng.below(l + 1); // chunk size, integer uniform on [0, l]
        let s1 = rng.below(l - lambda + 1);
        let s2 = rng.below(l - lambda + 1);
        let x1 = &dataset.segments[i1];
        let x2 = &dataset.segments[i2];
        let mut mixed = x1.clone();
        for (ch_out, ch_src) in mixed.samples.iter_mut().zip(&x2.samples) {
            ch_out[s1..s1 + lambda].copy_from_slice(&ch_src[s2..s2 + lambda]);
        }
        out.push(mixed);
    }
    Ok(Dataset {
        segments: out,
        task_kind: dataset.task_kind,
    })
}

/// Per-class frequency band for synthetic data.
#[derive(Clone, Debug)]
pub struct SynthClass {
    pub name: String,
    pub band_hz: (f64, f64),
}

/// Description of a synthetic labeled task.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub channels: usize,
    pub classes: Vec<SynthClass>,
    /// None = noise free.
    pub snr_db: Option<f64>,
    pub subjects: usize,
    pub rate_hz: f64,
    pub seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            channels: 1,
            classes: vec![
                SynthClass {
                    name: "low".into(),
                    band_hz: (1.5, 2.5),
                },
                SynthClass {
                    name: "high".into(),
                    band_hz: (7.5, 8.5),
                },
            ],
            snr_db: Some(10.0),
            subjects: 10,
            rate_hz: CANONICAL_RATE_HZ,
            seconds: CANONICAL_SECONDS,
        }
    }
}

/// Generate labeled segments: class k is a sum of three sinusoids drawn
/// from band k plus Gaussian noise at the requested SNR. Subject ids are
/// assigned round-robin so subject-stratified splits are exercisable.
pub fn synth_generate(spec: &SynthSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if spec.classes.is_empty() {
        return Err(Error::Config("synth spec has no classes".into()));
    }
    if spec.channels == 0 || spec.subjects == 0 {
        return Err(Error::Config("synth spec needs channels and subjects".into()));
    }
    for c in &spec.classes {
        if c.band_hz.0 >= c.band_hz.1 || c.band_hz.0 <= 0.0 {
            return Err(Error::Config(format!(
                "invalid band {:?} for class {}",
                c.band_hz, c.name
            )));
        }
    }
    let t = (spec.rate_hz * spec.seconds).round() as usize;
    let dt = 1.0 / spec.rate_hz;
    let channel_names: Vec<String> = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes.len();
        let band = spec.classes[class].band_hz;
        let subject = format!("s{:03}", i % spec.subjects);
        let mut samples = Vec::with_capacity(spec.channels);
        for _ in 0..spec.channels {
            let mut ch = vec![0.0_f64; t];
            for _ in 0..3 {
                let f = rng.uniform(band.0, band.1);
                let phase = rng.uniform(0.0, std::f64::consts::TAU);
                let amp = rng.uniform(0.5, 1.0);
                for (k, v) in ch.iter_mut().enumerate() {
                    *v += amp * (std::f64::consts::TAU * f * k as f64 * dt + phase).sin();
                }
            }
            if let Some(snr_db) = spec.snr_db {
                let p_sig = ch.iter().map(|v| v * v).sum::<f64>() / t as f64;
                let p_noise = p_sig / 10f64.powf(snr_db / 10.0);
                let sd = p_noise.sqrt();
                for v in ch.iter_mut() {
                    *v += sd * rng.normal();
                }
            }
            samples.push(ch);
        }
        segments.push(SignalSegment {
            samples,
            rate_hz: spec.rate_hz,
            channel_names: channel_names.clone(),
            subject_id: subject,
            label: Some(Label::Class(spec.classes[class].name.clone())),
        });
    }
    Ok(Dataset {
        segments,
        task_kind: TaskKind::Classification,
    })
}

// ---------------------------------------------------------------------------
// CSV format
//
// One file per segment:
//   # rate_hz=<r>,channels=<c1;c2;...>,subject=<id>[,label=<v>]
//   v_ch1,v_ch2,...          (one row per time step)
// A manifest file lists segment paths (relative to the manifest directory).
// ---------------------------------------------------------------------------

pub fn save_segment_csv(segment: &SignalSegment, path: &Path) -> Result<()> {
    let mut text = String::new();
    let mut header = format!(
        "# rate_hz={},channels={},subject={}",
        segment.rate_hz,
        segment.channel_names.join(";"),
        segment.subject_id
    );
    if let Some(label) = &segment.label {
        let _ = write!(header, ",label={}", label.as_text());
    }
    text.push_str(&header);
    text.push('\n');
    let t = segment.len();
    for i in 0..t {
        for (c, ch) in segment.samples.iter().enumerate() {
            if c > 0 {
                text.push(',');
            }
            // f32 round trip precision is the format contract
            let _ = write!(text, "{:.9e}", ch[i] as f32);
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_segment_csv(path: &Path) -> Result<SignalSegment> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty file".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| perr(1, "header must start with '#'".into()))?
        .trim();
    let mut rate_hz = None;
    let mut channel_names: Option<Vec<String>> = None;
    let mut subject = None;
    let mut label = None;
    for field in header.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| perr(1, format!("malformed header field '{field}'")))?;
        match key.trim() {
            "rate_hz" => {
                rate_hz = Some(value.parse::<f64>().map_err(|_| {
                    perr(1, format!("rate_hz is not a number: '{value}'"))
                })?)
            }
            "channels" => {
                channel_names = Some(value.split(';').map(|s| s.trim().to_string()).collect())
            }
            "subject" => subject = Some(value.trim().to_string()),
            "label" => label = Some(value.trim().to_string()),
            other => return Err(perr(1, format!("unknown header key '{other}'"))),
        }
    }
    let rate_hz = rate_hz.ok_or_else(|| perr(1, "missing header key 'rate_hz'".into()))?;
    let channel_names =
        channel_names.ok_or_else(|| perr(1, "missing header key 'channels'".into()))?;
    let subject = subject.ok_or_else(|| perr(1, "missing header key 'subject'".into()))?;
    let c = channel_names.len();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); c];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != c {
            return Err(perr(
                lineno + 1,
                format!("expected {c} cells, found {}", cells.len()),
            ));
        }
        for (ch, cell) in samples.iter_mut().zip(&cells) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| perr(lineno + 1, format!("non-numeric cell '{cell}'")))?;
            ch.push(v);
        }
    }
    let label = label.map(|text| match text.parse::<f64>() {
        Ok(v) => Label::Value(v),
        Err(_) => Label::Class(text),
    });
    let seg = SignalSegment {
        samples,
        rate_hz,
        channel_names,
        subject_id: subject,
        label,
    };
    seg.validate()?;
    Ok(seg)
}

/// Write a dataset as one CSV per segment plus `manifest.txt` in `dir`.
/// Returns the manifest path.
pub fn save_csv(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (i, seg) in dataset.segments.iter().enumerate() {
        let name = format!("seg_{i:05}.csv");
        save_segment_csv(seg, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(mpath)
}

/// Load a dataset from a manifest listing segment CSV paths.
pub fn load_csv(manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut segments = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        segments.push(load_segment_csv(&base.join(line))?);
    }
    let task_kind = if segments
        .iter()
        .any(|s| matches!(s.label, Some(Label::Value(_))))
    {
        TaskKind::Regression
    } else {
        TaskKind::Classification
    };
    let ds = Dataset {
        segments,
        task_kind,
    };
    ds.check_uniform()?;
    Ok(ds)
}
