//! Waveform I/O, dataset manifests and synthetic noisy/clean pair generation.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate of every signal handled by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("samples must be finite".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power over the whole clip.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Clamp to [-1, 1] and round to the nearest 16-bit code.
pub fn quantize16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveBuffer> {
    let path = path.as_ref();
    let reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(Error::io(path, e)),
        Err(e) => return Err(Error::Wav(format!("{}: {e}", path.display()))),
    };
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::NotMono {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            bits: spec.bits_per_sample,
            format: match spec.sample_format {
                hound::SampleFormat::Int => "integer",
                hound::SampleFormat::Float => "float",
            },
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    WaveBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &WaveBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        e => Error::Wav(format!("{}: {e}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in &wave.samples {
        w.write_sample(quantize16(s)).map_err(map)?;
    }
    w.finalize().map_err(map)
}

/// Reads a WAV file and checks that it is at the pipeline sample rate.
pub fn read_wav_16k(path: impl AsRef<Path>) -> Result<WaveBuffer> {
    let w = read_wav(&path)?;
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            path: path.as_ref().to_path_buf(),
            found: w.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
}

/// A list of noisy/clean pairs; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub noisy: WaveBuffer,
    pub clean: WaveBuffer,
}

impl DatasetManifest {
    /// Parses a JSON Lines manifest; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            entries.push(entry);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads entry `i`, enforcing equal length and sample rate per pair.
    pub fn read(&self, i: usize) -> Result<Utterance> {
        let e = &self.entries[i];
        let noisy = read_wav_16k(self.resolve(&e.noisy))?;
        let clean = read_wav_16k(self.resolve(&e.clean))?;
        if noisy.len() != clean.len() {
            return Err(Error::Manifest {
                path: self.root.clone(),
                reason: format!(
                    "entry {}: noisy has {} samples, clean has {}",
                    e.id,
                    noisy.len(),
                    clean.len()
                ),
            });
        }
        Ok(Utterance {
            id: e.id.clone(),
            noisy,
            clean,
        })
    }

    pub fn read_all(&self) -> Result<Vec<Utterance>> {
        (0..self.entries.len()).map(|i| self.read(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    Pink,
    BabbleSurrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

/// Synthetic noise of the given kind, unit variance on average.
pub fn make_noise(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    let mut white = || -> f64 { StandardNormal.sample(&mut rng) };
    match kind {
        NoiseKind::White => (0..len).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    (b0 + b1 + b2 + w * 0.1848) * 0.25
                })
                .collect()
        }
        NoiseKind::BabbleSurrogate => {
            // Speech-shaped noise: two-pole lowpass around 1 kHz with a slow
            // syllabic amplitude modulation.
            let sr = SAMPLE_RATE as f64;
            let a = (-2.0 * std::f64::consts::PI * 1000.0 / sr).exp();
            let (mut y1, mut y2) = (0.0, 0.0);
            let mod_rate = 4.0;
            (0..len)
                .map(|n| {
                    let w = white();
                    y1 = a * y1 + (1.0 - a) * w;
                    y2 = a * y2 + (1.0 - a) * y1;
                    let m = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * mod_rate * n as f64 / sr).sin();
                    y2 * m * 12.0
                })
                .collect()
        }
    }
}

/// `clean + alpha * noise` with `alpha` chosen so the mixture has exactly
/// `spec.snr_db` (full-clip power). Noise shorter than `clean` is tiled;
/// longer noise is cut at a seeded random offset.
pub fn mix_at_snr(clean: &WaveBuffer, noise: &WaveBuffer, spec: &MixSpec) -> Result<WaveBuffer> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !spec.snr_db.is_finite() {
        return Err(Error::InvalidArgument("snr_db must be finite".into()));
    }
    let pc = clean.power();
    if pc == 0.0 {
        return Err(Error::ZeroPower);
    }
    if noise.is_empty() {
        return Err(Error::ZeroPower);
    }
    let n = clean.len();
    let offset = if noise.len() > n {
        ChaCha8Rng::seed_from_u64(spec.seed).gen_range(0..=noise.len() - n)
    } else {
        0
    };
    let seg: Vec<f64> = (0..n).map(|i| noise.samples[(offset + i) % noise.len()]).collect();
    let pn = power(&seg);
    if pn == 0.0 {
        return Err(Error::ZeroPower);
    }
    let alpha = (pc / (pn * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let samples = clean.samples.iter().zip(&seg).map(|(c, v)| c + alpha * v).collect();
    WaveBuffer::new(samples, clean.sample_rate)
}

/// A constant-pitch stretch of a synthetic utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchSegment {
    pub start: usize,
    pub end: usize,
    pub f0: f64,
}

pub fn synth_speechlike(duration_s: f64, seed: u64) -> Result<WaveBuffer> {
    synth_speechlike_with_segments(duration_s, seed).map(|(w, _)| w)
}

/// Harmonic signal with piecewise-constant pitch (100-300 Hz, 100-400 ms
/// segments), two slowly drifting formants and syllable-rate amplitude
/// modulation. Peak is normalized to 0.9.
pub fn synth_speechlike_with_segments(duration_s: f64, seed: u64) -> Result<(WaveBuffer, Vec<PitchSegment>)> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let sr = SAMPLE_RATE as f64;
    let len = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut segments = Vec::new();
    let mut start = 0;
    while start < len {
        let dur = (rng.gen_range(0.1..0.4) * sr) as usize;
        let end = (start + dur).min(len);
        segments.push(PitchSegment {
            start,
            end,
            f0: rng.gen_range(100.0..300.0),
        });
        start = end;
    }

    let tau = 2.0 * std::f64::consts::PI;
    let f1_base = rng.gen_range(400.0..800.0);
    let f2_base = rng.gen_range(1100.0..2000.0);
    let drift_rate = rng.gen_range(0.5..2.0);
    let drift_phase = rng.gen_range(0.0..tau);
    let am_rate = rng.gen_range(3.0..5.0);
    let am_phase = rng.gen_range(0.0..tau);
    let max_harmonics = 40;
    let mut phases = vec![0.0f64; max_harmonics];
    for (h, p) in phases.iter_mut().enumerate() {
        *p = rng.gen_range(0.0..tau) * (h as f64 / max_harmonics as f64);
    }

    let mut out = vec![0.0; len];
    for seg in &segments {
        let nh = ((sr / 2.0 - 200.0) / seg.f0).floor().min(max_harmonics as f64) as usize;
        for (n, o) in out.iter_mut().enumerate().take(seg.end).skip(seg.start) {
            let t = n as f64 / sr;
            let drift = (tau * drift_rate * t + drift_phase).sin();
            let f1 = f1_base * (1.0 + 0.25 * drift);
            let f2 = f2_base * (1.0 - 0.15 * drift);
            let mut acc = 0.0;
            for (h, phase) in phases.iter_mut().enumerate().take(nh) {
                let f = seg.f0 * (h + 1) as f64;
                let env = formant(f, f1, 120.0) + 0.6 * formant(f, f2, 180.0) + 0.05;
                acc += env * phase.sin() / ((h + 1) as f64).sqrt();
                *phase = (*phase + tau * f / sr) % tau;
            }
            let am = 0.55 + 0.45 * (tau * am_rate * t + am_phase).sin();
            *o = acc * am;
        }
        // Keep phases running into silence-free continuation.
        for (h, phase) in phases.iter_mut().enumerate().skip(nh) {
            let f = seg.f0 * (h + 1) as f64;
            *phase = (*phase + tau * f / sr * (seg.end - seg.start) as f64) % tau;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Ok((WaveBuffer::new(out, SAMPLE_RATE)?, segments))
}

fn formant(f: f64, center: f64, bw: f64) -> f64 {
    let x = (f - center) / bw;
    1.0 / (1.0 + x * x)
}

/// A synthetic clean/noisy pair with a drawn SNR and noise kind.
pub fn synth_pair(
    duration_s: f64,
    seed: u64,
    snr_range: (f64, f64),
    kinds: &[NoiseKind],
) -> Result<(WaveBuffer, WaveBuffer, MixSpec)> {
    let clean = synth_speechlike(duration_s, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let spec = MixSpec {
        snr_db: rng.gen_range(snr_range.0..=snr_range.1),
        noise_kind: kinds[rng.gen_range(0..kinds.len())],
        seed: rng.gen(),
    };
    let noise = WaveBuffer::new(make_noise(spec.noise_kind, clean.len() * 2, spec.seed), SAMPLE_RATE)?;
    let noisy = mix_at_snr(&clean, &noise, &spec)?;
    Ok((clean, noisy, spec))
}

/// Writes `count` synthetic pairs plus a `manifest.jsonl` into `dir`.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    duration_s: f64,
    seed: u64,
    snr_range: (f64, f64),
    kinds: &[NoiseKind],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (clean, noisy, _) = synth_pair(duration_s, seed.wrapping_add(i as u64), snr_range, kinds)?;
        let id = format!("utt{i:05}");
        let (c, n) = (format!("{id}_clean.wav"), format!("{id}_noisy.wav"));
        write_wav(dir.join(&c), &clean)?;
        write_wav(dir.join(&n), &noisy)?;
        entries.push(ManifestEntry {
            id,
            noisy: n.into(),
            clean: c.into(),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    };
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    Ok(path)
}
