//! Objective metrics: SI-SDR, log-spectral distance and N-step token
//! prediction accuracy, plus per-manifest reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audio::DatasetManifest;
use crate::dsp::{stft_samples, StftConfig};
use crate::enhance::enhance_batch;
use crate::error::{Error, Result};
use crate::model::{argmax, SeModel};
use crate::ssl::load_external_features;
use crate::tensor::Tensor;

pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(
            "si_sdr",
            format!("reference {} samples, estimate {}", reference.len(), estimate.len()),
        ));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::ZeroPower);
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / rr;
    let mut target = 0.0;
    let mut resid = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    if resid == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / resid).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// RMS over frames of the per-frame RMS difference (dB) of magnitude
/// spectra, with magnitudes floored at 1e-8.
pub fn log_spectral_distance(reference: &[f64], estimate: &[f64], config: &StftConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(
            "log_spectral_distance",
            format!("reference {} samples, estimate {}", reference.len(), estimate.len()),
        ));
    }
    let a = stft_samples(reference, config)?;
    let b = stft_samples(estimate, config)?;
    let db = |c: rustfft::num_complex::Complex64| 20.0 * c.norm().max(1e-8).log10();
    let mut acc = 0.0;
    for t in 0..a.frames {
        let ms = a
            .frame(t)
            .iter()
            .zip(b.frame(t))
            .map(|(x, y)| (db(*x) - db(*y)).powi(2))
            .sum::<f64>()
            / a.bins as f64;
        acc += ms;
    }
    Ok((acc / a.frames as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracy {
    /// Accuracy for `n = 1..=N`.
    pub per_n: Vec<f64>,
    /// Mean over valid `(t, n)`.
    pub mean: f64,
    pub positions: usize,
}

/// `logits` is `T x (N*K)`; group `n` predicts `targets[t + n + 1]`.
/// Positions `t < T - N` are scored.
pub fn token_accuracy(logits: &Tensor, targets: &[usize], n: usize, k: usize) -> Result<TokenAccuracy> {
    let t_len = targets.len();
    if logits.rows() != t_len || logits.cols() != n * k {
        return Err(Error::shape(
            "token_accuracy",
            format!("logits {:?} for {t_len} targets, N={n}, K={k}", logits.shape()),
        ));
    }
    if t_len <= n {
        return Err(Error::NoValidPositions { frames: t_len, n });
    }
    let valid = t_len - n;
    let mut hits = vec![0usize; n];
    for t in 0..valid {
        let row = logits.row(t);
        for (j, h) in hits.iter_mut().enumerate() {
            if argmax(&row[j * k..(j + 1) * k]) == targets[t + j + 1] {
                *h += 1;
            }
        }
    }
    let per_n: Vec<f64> = hits.iter().map(|&h| h as f64 / valid as f64).collect();
    // Every n has the same number of positions.
    let mean = per_n.iter().sum::<f64>() / n as f64;
    Ok(TokenAccuracy {
        per_n,
        mean,
        positions: valid * n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    pub noisy_si_sdr: f64,
    pub enhanced_si_sdr: f64,
    pub noisy_lsd: f64,
    pub enhanced_lsd: f64,
    /// Keyed by `n`.
    pub token_acc: BTreeMap<usize, f64>,
    pub token_acc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceReport>,
    pub mean_noisy_si_sdr: f64,
    pub mean_enhanced_si_sdr: f64,
    pub mean_si_sdr_improvement: f64,
    pub mean_noisy_lsd: f64,
    pub mean_enhanced_lsd: f64,
    pub token_acc: BTreeMap<usize, f64>,
    pub token_acc_mean: f64,
}

impl MetricReport {
    pub fn from_utterances(utterances: Vec<UtteranceReport>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let n = utterances.len() as f64;
        let mean = |f: &dyn Fn(&UtteranceReport) -> f64| utterances.iter().map(f).sum::<f64>() / n;
        let mean_noisy_si_sdr = mean(&|u| u.noisy_si_sdr);
        let mean_enhanced_si_sdr = mean(&|u| u.enhanced_si_sdr);
        let mut token_acc = BTreeMap::new();
        for k in utterances[0].token_acc.keys() {
            token_acc.insert(*k, mean(&|u| u.token_acc.get(k).copied().unwrap_or(0.0)));
        }
        Ok(Self {
            mean_noisy_si_sdr,
            mean_enhanced_si_sdr,
            mean_si_sdr_improvement: mean_enhanced_si_sdr - mean_noisy_si_sdr,
            mean_noisy_lsd: mean(&|u| u.noisy_lsd),
            mean_enhanced_lsd: mean(&|u| u.enhanced_lsd),
            token_acc_mean: mean(&|u| u.token_acc_mean),
            token_acc,
            utterances,
        })
    }
}

/// Enhances every entry of `manifest` and scores it against the clean
/// reference.
pub fn evaluate_manifest(model: &SeModel, manifest: &DatasetManifest, unit_mask: bool) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut reports = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let utt = manifest.read(i)?;
        let external = match &model.config.ssl.external_features_path {
            Some(dir) => Some(load_external_features(dir.join(format!("{}.cse", utt.id)))?),
            None => None,
        };
        reports.push(evaluate_pair(
            model,
            &utt.id,
            &utt.noisy.samples,
            &utt.clean.samples,
            external,
            unit_mask,
        )?);
    }
    MetricReport::from_utterances(reports)
}

pub fn evaluate_pair(
    model: &SeModel,
    id: &str,
    noisy: &[f64],
    clean: &[f64],
    external: Option<crate::ssl::SslFeatureStack>,
    unit_mask: bool,
) -> Result<UtteranceReport> {
    let out = enhance_batch(model, noisy, external, unit_mask)?;
    let stft = &model.config.stft;
    let acc = token_accuracy(
        &out.inference.logits,
        &out.inference.tokens,
        model.n_predict(),
        model.codebook_size(),
    )?;
    Ok(UtteranceReport {
        id: id.to_string(),
        noisy_si_sdr: si_sdr(clean, noisy)?,
        enhanced_si_sdr: si_sdr(clean, &out.samples)?,
        noisy_lsd: log_spectral_distance(clean, noisy, stft)?,
        enhanced_lsd: log_spectral_distance(clean, &out.samples, stft)?,
        token_acc: acc.per_n.iter().enumerate().map(|(i, &a)| (i + 1, a)).collect(),
        token_acc_mean: acc.mean,
    })
}
