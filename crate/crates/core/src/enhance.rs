//! Waveform-in, waveform-out enhancement: whole-file and frame-by-frame.

use rustfft::num_complex::Complex64;

use crate::config::InputVariant;
use crate::dsp::{apply_logmag_row, log1p_row, reconstruct_from_logmag, LogMagFeatures, StreamFramer, StreamSynth};
use crate::error::{Error, Result};
use crate::model::{Inference, ModelInput, SeModel};
use crate::ssl::{SslFeatureStack, SslStream};
use crate::tensor::nn::KvCache;
use crate::tensor::{fill_positional_row, kernels};

#[derive(Clone, Debug)]
pub struct Enhanced {
    /// Same length as the input.
    pub samples: Vec<f64>,
    pub inference: Inference,
}

/// Whole-utterance enhancement.
pub fn enhance_batch(
    model: &SeModel,
    samples: &[f64],
    external: Option<SslFeatureStack>,
    unit_mask: bool,
) -> Result<Enhanced> {
    let (mut input, spec) = ModelInput::from_samples(samples, &model.config)?;
    input.external = external;
    let inference = model.infer(&input, unit_mask)?;
    let wave = reconstruct_from_logmag(&LogMagFeatures::new(inference.enhanced.clone())?, &spec)?;
    let mut out = wave.samples;
    out.resize(samples.len(), 0.0);
    Ok(Enhanced {
        samples: out,
        inference,
    })
}

/// Frame-at-a-time enhancement with the incremental encoder, KV caches
/// and overlap-add. Output for frame `t` is final as soon as it is
/// pushed, so latency is one window.
pub struct StreamEnhancer<'m> {
    model: &'m SeModel,
    framer: StreamFramer,
    synth: StreamSynth,
    ssl: SslStream,
    weights: Vec<f64>,
    g_caches: Vec<KvCache>,
    f_caches: Vec<KvCache>,
    unit_mask: bool,
    consumed: usize,
    produced: usize,
    tokens: Vec<usize>,
}

impl<'m> StreamEnhancer<'m> {
    pub fn new(model: &'m SeModel, unit_mask: bool) -> Result<Self> {
        if model.config.ssl.external_features_path.is_some() {
            return Err(Error::InvalidArgument(
                "streaming needs the built-in encoder; external features are offline only".into(),
            ));
        }
        if !model.config.model.causal {
            return Err(Error::NotCausal("model.causal is false".into()));
        }
        Ok(Self {
            model,
            framer: StreamFramer::new(model.config.stft)?,
            synth: StreamSynth::new(model.config.stft)?,
            ssl: SslStream::new(&model.ssl)?,
            weights: model.layer_weights.weights(&model.store),
            g_caches: model.g.new_caches(),
            f_caches: model.f.new_caches(),
            unit_mask,
            consumed: 0,
            produced: 0,
            tokens: Vec::new(),
        })
    }

    /// Token indices of the frames processed so far.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn push(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        self.consumed += samples.len();
        let mut out = Vec::new();
        for frame in self.framer.push(samples) {
            let row = self.frame(frame.index, &frame.samples, &frame.spectrum)?;
            out.extend(self.synth.push(&row));
        }
        self.produced += out.len();
        Ok(out)
    }

    /// Flushes the overlap-add tail; total output length equals total input.
    pub fn finish(mut self) -> Vec<f64> {
        let mut out = if self.framer.frames_emitted() > 0 {
            self.synth.finish()
        } else {
            Vec::new()
        };
        let remaining = self.consumed.saturating_sub(self.produced);
        out.resize(remaining, 0.0);
        out
    }

    fn frame(&mut self, t: usize, raw: &[f64], spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
        let m = self.model;
        let store = &m.store;
        let x = log1p_row(spectrum);
        let layers = self.ssl.step(&m.ssl, store, raw)?;
        let mut c = vec![0.0; m.config.ssl.dim];
        for (w, l) in self.weights.iter().zip(&layers) {
            for (o, v) in c.iter_mut().zip(l) {
                *o += w * v;
            }
        }
        let e = m.vq.encoder.apply_row(store, &c);
        let (idx, _) = m.codebook.nearest(&e);
        self.tokens.push(idx);
        let mut z = c;
        match m.config.model.variant {
            InputVariant::RawSsl => {}
            InputVariant::PlusIndexEmbedding => {
                let table = store.get(m.embedding.expect("embedding exists for this variant"));
                z.extend_from_slice(table.row(idx));
            }
            InputVariant::PlusCodebookVector => z.extend_from_slice(m.codebook.codewords.row(idx)),
        }
        let mut h = m.g_in.apply_row(store, &z);
        add_positions(t, &mut h);
        let hs = m.g.step(store, &h, &mut self.g_caches);
        let h = m.g_norm.apply_row(store, hs.last().expect("at least one layer"));
        let enhanced: Vec<f64> = if self.unit_mask {
            x
        } else {
            let mut f = m.fusion.apply_row(store, &x, &h);
            add_positions(t, &mut f);
            let fs = m.f.step(store, &f, &mut self.f_caches);
            let fo = m.f_norm.apply_row(store, fs.last().expect("at least one layer"));
            let logits = m.f_out.apply_row(store, &fo);
            x.iter().zip(&logits).map(|(v, l)| v * kernels::sigmoid(*l)).collect()
        };
        if enhanced.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "stream_enhance" });
        }
        Ok(apply_logmag_row(&enhanced, spectrum))
    }
}

fn add_positions(t: usize, row: &mut [f64]) {
    let mut pe = vec![0.0; row.len()];
    fill_positional_row(t, &mut pe);
    row.iter_mut().zip(&pe).for_each(|(a, b)| *a += b);
}

/// Streams `samples` through [`StreamEnhancer`] in `chunk`-sample pieces.
pub fn enhance_streaming(model: &SeModel, samples: &[f64], chunk: usize, unit_mask: bool) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be >= 1 sample".into()));
    }
    let mut s = StreamEnhancer::new(model, unit_mask)?;
    let mut out = Vec::with_capacity(samples.len());
    for piece in samples.chunks(chunk) {
        out.extend(s.push(piece)?);
    }
    out.extend(s.finish());
    Ok(out)
}
