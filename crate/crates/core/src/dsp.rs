//! STFT analysis/synthesis, log1p features and streaming framing.
//!
//! Batch [`stft`]/[`istft`] are built on the same per-frame routines as
//! [`StreamFramer`]/[`StreamSynth`], which is what makes streaming output
//! bit-identical to batch output.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{WaveBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthesis samples whose squared-window envelope is below this are
/// scaled by `1 / ENVELOPE_FLOOR` instead (only the outer edges).
const ENVELOPE_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Square-root periodic Hann, used for both analysis and synthesis so
    /// the analysis-synthesis product is a Hann window.
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    #[serde(rename = "win")]
    pub win_length: usize,
    #[serde(rename = "hop")]
    pub hop_length: usize,
    #[serde(rename = "fft")]
    pub fft_size: usize,
    #[serde(default = "default_window")]
    pub window: WindowKind,
}

fn default_window() -> WindowKind {
    WindowKind::Hann
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win_length: 640,
            hop_length: 320,
            fft_size: 1024,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        let StftConfig {
            win_length: w,
            hop_length: h,
            fft_size: n,
            ..
        } = *self;
        if h == 0 || h > w || w > n {
            return Err(Error::Config(format!(
                "stft geometry needs 0 < hop <= win <= fft, got hop={h} win={w} fft={n}"
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a signal of `len` samples (0 if too short).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.win_length {
            0
        } else {
            1 + (len - self.win_length) / self.hop_length
        }
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        match self.window {
            WindowKind::Hann => (0..self.win_length)
                .map(|i| (std::f64::consts::PI * i as f64 / n).sin())
                .collect(),
        }
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / SAMPLE_RATE as f64
    }
}

/// `T x F` complex spectrogram, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramComplex {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub config: StftConfig,
}

impl SpectrogramComplex {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c *= s);
        out
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        Self {
            frames,
            bins: config.bins(),
            data: vec![Complex64::new(0.0, 0.0); frames * config.bins()],
            config,
        }
    }
}

/// `T x F` nonnegative log1p magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMagFeatures {
    pub values: Tensor,
}

impl LogMagFeatures {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape(
                "log_mag",
                format!("expected T x F, got {:?}", values.shape()),
            ));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("log1p features must be finite and >= 0".into()));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// FFT plans and windows for one geometry; cheap to clone.
#[derive(Clone)]
pub struct FrameCodec {
    config: StftConfig,
    window: Arc<Vec<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FrameCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameCodec").field("config", &self.config).finish()
    }
}

impl FrameCodec {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: Arc::new(config.window()),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Windowed, zero-padded DFT of one `win_length` frame; first F bins.
    pub fn analyze(&self, frame: &[f64]) -> Vec<Complex64> {
        let n = self.config.fft_size;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(self.window.iter()) {
            b.re = x * w;
        }
        self.forward.process(&mut buf);
        buf.truncate(self.config.bins());
        buf
    }

    /// Inverse DFT of one half-spectrum row, windowed for overlap-add.
    pub fn synthesize(&self, row: &[Complex64]) -> Vec<f64> {
        let n = self.config.fft_size;
        let f = self.config.bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..f].copy_from_slice(row);
        for k in f..n {
            buf[k] = row[n - k].conj();
        }
        // DC and Nyquist of a real signal are real.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf[..self.config.win_length]
            .iter()
            .zip(self.window.iter())
            .map(|(c, &w)| c.re * scale * w)
            .collect()
    }
}

pub fn stft(wave: &WaveBuffer, config: &StftConfig) -> Result<SpectrogramComplex> {
    stft_samples(&wave.samples, config)
}

pub fn stft_samples(samples: &[f64], config: &StftConfig) -> Result<SpectrogramComplex> {
    let codec = FrameCodec::new(*config)?;
    if samples.len() < config.win_length {
        return Err(Error::TooShort {
            len: samples.len(),
            win: config.win_length,
        });
    }
    let mut framer = StreamFramer::with_codec(codec);
    let frames = framer.push(samples);
    Ok(collect_frames(frames.iter().map(|f| f.spectrum.as_slice()), *config))
}

fn collect_frames<'a>(rows: impl Iterator<Item = &'a [Complex64]>, config: StftConfig) -> SpectrogramComplex {
    let mut data = Vec::new();
    let mut frames = 0;
    for r in rows {
        data.extend_from_slice(r);
        frames += 1;
    }
    SpectrogramComplex {
        frames,
        bins: config.bins(),
        data,
        config,
    }
}

/// Overlap-add resynthesis; output length `(T-1)*hop + win`.
pub fn istft(spec: &SpectrogramComplex, config: &StftConfig) -> Result<WaveBuffer> {
    if spec.bins != config.bins() || spec.data.len() != spec.frames * spec.bins {
        return Err(Error::shape(
            "istft",
            format!("{} bins for fft size {}", spec.bins, config.fft_size),
        ));
    }
    let mut synth = StreamSynth::new(*config)?;
    let mut out = Vec::with_capacity(spec.frames * config.hop_length + config.win_length);
    for t in 0..spec.frames {
        out.extend(synth.push(spec.frame(t)));
    }
    if spec.frames > 0 {
        out.extend(synth.finish());
    }
    WaveBuffer::new(out, SAMPLE_RATE)
}

pub fn log1p_features(spec: &SpectrogramComplex) -> LogMagFeatures {
    let data = spec.data.iter().map(|c| c.norm().ln_1p()).collect();
    LogMagFeatures {
        values: Tensor::new(vec![spec.frames, spec.bins], data).expect("shape matches data"),
    }
}

pub(crate) fn log1p_row(row: &[Complex64]) -> Vec<f64> {
    row.iter().map(|c| c.norm().ln_1p()).collect()
}

/// Magnitude `max(exp(v) - 1, 0)` with the noisy phase.
pub(crate) fn apply_logmag_row(enhanced: &[f64], noisy: &[Complex64]) -> Vec<Complex64> {
    enhanced
        .iter()
        .zip(noisy)
        .map(|(&v, &c)| {
            let mag = v.exp_m1().max(0.0);
            let n = c.norm();
            if n > 0.0 {
                c * (mag / n)
            } else {
                Complex64::new(mag, 0.0)
            }
        })
        .collect()
}

pub fn reconstruct_from_logmag(enhanced: &LogMagFeatures, noisy: &SpectrogramComplex) -> Result<WaveBuffer> {
    if enhanced.frames() != noisy.frames || enhanced.bins() != noisy.bins {
        return Err(Error::shape(
            "reconstruct_from_logmag",
            format!(
                "features {}x{} vs spectrogram {}x{}",
                enhanced.frames(),
                enhanced.bins(),
                noisy.frames,
                noisy.bins
            ),
        ));
    }
    let rows = (0..noisy.frames).map(|t| apply_logmag_row(enhanced.values.row(t), noisy.frame(t)));
    let mut data = Vec::with_capacity(noisy.data.len());
    rows.for_each(|r| data.extend(r));
    let spec = SpectrogramComplex { data, ..noisy.clone() };
    istft(&spec, &noisy.config)
}

/// One analysis frame from the framer.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Raw (unwindowed) `win_length` samples.
    pub samples: Vec<f64>,
    pub spectrum: Vec<Complex64>,
}

/// Incremental framer: emits frame `t` as soon as sample
/// `t*hop + win - 1` has been pushed.
#[derive(Clone, Debug)]
pub struct StreamFramer {
    codec: FrameCodec,
    pending: Vec<f64>,
    next_frame: usize,
}

impl StreamFramer {
    pub fn new(config: StftConfig) -> Result<Self> {
        Ok(Self::with_codec(FrameCodec::new(config)?))
    }

    pub fn with_codec(codec: FrameCodec) -> Self {
        Self {
            codec,
            pending: Vec::new(),
            next_frame: 0,
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    pub fn push(&mut self, samples: &[f64]) -> Vec<Frame> {
        self.pending.extend_from_slice(samples);
        let (win, hop) = (self.codec.config.win_length, self.codec.config.hop_length);
        let mut out = Vec::new();
        let mut start = 0;
        while self.pending.len() - start >= win {
            let frame = &self.pending[start..start + win];
            out.push(Frame {
                index: self.next_frame,
                samples: frame.to_vec(),
                spectrum: self.codec.analyze(frame),
            });
            self.next_frame += 1;
            start += hop;
        }
        self.pending.drain(..start);
        out
    }
}

/// Incremental overlap-add. Each pushed frame finalizes `hop` samples;
/// [`StreamSynth::finish`] flushes the remaining `win - hop`.
#[derive(Clone, Debug)]
pub struct StreamSynth {
    codec: FrameCodec,
    window_sq: Vec<f64>,
    acc: Vec<f64>,
    env: Vec<f64>,
}

impl StreamSynth {
    pub fn new(config: StftConfig) -> Result<Self> {
        Ok(Self::with_codec(FrameCodec::new(config)?))
    }

    pub fn with_codec(codec: FrameCodec) -> Self {
        let win = codec.config.win_length;
        Self {
            window_sq: codec.window.iter().map(|w| w * w).collect(),
            acc: vec![0.0; win],
            env: vec![0.0; win],
            codec,
        }
    }

    pub fn push(&mut self, row: &[Complex64]) -> Vec<f64> {
        let y = self.codec.synthesize(row);
        for i in 0..y.len() {
            self.acc[i] += y[i];
            self.env[i] += self.window_sq[i];
        }
        let hop = self.codec.config.hop_length;
        let out = normalize(&self.acc[..hop], &self.env[..hop]);
        self.acc.drain(..hop);
        self.env.drain(..hop);
        self.acc.resize(y.len(), 0.0);
        self.env.resize(y.len(), 0.0);
        out
    }

    pub fn finish(&mut self) -> Vec<f64> {
        let keep = self.codec.config.win_length - self.codec.config.hop_length;
        let out = normalize(&self.acc[..keep], &self.env[..keep]);
        self.acc.iter_mut().for_each(|v| *v = 0.0);
        self.env.iter_mut().for_each(|v| *v = 0.0);
        out
    }
}

fn normalize(acc: &[f64], env: &[f64]) -> Vec<f64> {
    acc.iter().zip(env).map(|(a, e)| a / e.max(ENVELOPE_FLOOR)).collect()
}
