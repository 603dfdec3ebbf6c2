//! The full enhancement network: causal SSL features, layer weighting, VQ,
//! input variant `Z`, feature encoder g, FiLM fusion with the noisy log1p
//! spectrum, mask estimator f, and the N-token semantic head on g.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Fusion, InputVariant};
use crate::dsp::{log1p_features, stft_samples, SpectrogramComplex, StreamFramer};
use crate::error::{Error, Result};
use crate::ssl::{LayerWeights, PseudoSsl, SslFeatureStack};
use crate::tensor::nn::{LayerNorm, Linear, TransformerStack};
use crate::tensor::{positional_encoding, Graph, ParamId, ParamStore, Tensor, Var};
use crate::vq::{init_codebook, quantize, vq_forward, Codebook, EmaState, QuantMode, VqGraphOut, VqLayers};

/// Per-utterance network input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// Raw analysis frames, `T x win`.
    pub frames: Tensor,
    /// Noisy log1p magnitudes `X'`, `T x F`.
    pub noisy: Tensor,
    /// Precomputed SSL layers replacing the built-in encoder.
    pub external: Option<SslFeatureStack>,
}

impl ModelInput {
    /// Frames and features of a waveform, plus its complex spectrogram.
    pub fn from_samples(samples: &[f64], config: &Config) -> Result<(Self, SpectrogramComplex)> {
        let spec = stft_samples(samples, &config.stft)?;
        let mut framer = StreamFramer::new(config.stft)?;
        let mut data = Vec::with_capacity(spec.frames * config.stft.win_length);
        for f in framer.push(samples) {
            data.extend(f.samples);
        }
        let frames = Tensor::new(vec![spec.frames, config.stft.win_length], data)?;
        let noisy = log1p_features(&spec).values;
        Ok((
            Self {
                frames,
                noisy,
                external: None,
            },
            spec,
        ))
    }

    pub fn len(&self) -> usize {
        self.noisy.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn crop(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames.slice_rows(start, end),
            noisy: self.noisy.slice_rows(start, end),
            external: self.external.as_ref().map(|s| s.slice_frames(start, end)),
        }
    }
}

/// `gamma(h) * alpha(x') + beta(h)`.
#[derive(Clone, Debug)]
pub struct Film {
    pub alpha: Linear,
    pub gamma: Linear,
    pub beta: Linear,
}

impl Film {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let a = self.alpha.forward(g, store, x)?;
        let gm = self.gamma.forward(g, store, h)?;
        let b = self.beta.forward(g, store, h)?;
        let m = g.mul(gm, a)?;
        g.add(m, b)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
        let a = self.alpha.apply_row(store, x);
        let gm = self.gamma.apply_row(store, h);
        let b = self.beta.apply_row(store, h);
        gm.iter().zip(&a).zip(&b).map(|((g, a), b)| g * a + b).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.alpha.params();
        p.extend(self.gamma.params());
        p.extend(self.beta.params());
        p
    }
}

#[derive(Clone, Debug)]
pub enum FusionLayer {
    Film(Film),
    /// Affine map of `x' ++ h`.
    Concat(Linear),
}

impl FusionLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        match self {
            FusionLayer::Film(f) => f.forward(g, store, x, h),
            FusionLayer::Concat(l) => {
                let xh = g.concat_cols(&[x, h])?;
                l.forward(g, store, xh)
            }
        }
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
        match self {
            FusionLayer::Film(f) => f.apply_row(store, x, h),
            FusionLayer::Concat(l) => {
                let xh: Vec<f64> = x.iter().chain(h).copied().collect();
                l.apply_row(store, &xh)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            FusionLayer::Film(f) => f.params(),
            FusionLayer::Concat(l) => l.params(),
        }
    }
}

/// How the quantizer behaves in one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub enum Quantizer<'a> {
    /// Nearest codeword of the model's codebook.
    #[default]
    Live,
    /// Fixed assignment; see [`QuantMode::Frozen`].
    Frozen {
        indices: &'a [usize],
        quantized: &'a Tensor,
        offsets: &'a Tensor,
    },
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub quantizer: Quantizer<'a>,
    /// Debug: replace the estimated mask with ones.
    pub unit_mask: bool,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub ssl_layers: Vec<Var>,
    /// Weighted SSL features `c`.
    pub c: Var,
    pub vq: VqGraphOut,
    pub z: Var,
    pub h: Var,
    pub fused: Var,
    pub mask: Var,
    /// `X' * mask`.
    pub enhanced: Var,
    /// `T x (N*K)`; group `n` holds the logits for frame `t + n + 1`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SeModel {
    pub config: Config,
    pub store: ParamStore,
    pub ssl: PseudoSsl,
    pub layer_weights: LayerWeights,
    pub vq: VqLayers,
    pub embedding: Option<ParamId>,
    pub g_in: Linear,
    pub g: TransformerStack,
    pub g_norm: LayerNorm,
    pub fusion: FusionLayer,
    pub f: TransformerStack,
    pub f_norm: LayerNorm,
    pub f_out: Linear,
    pub head: Linear,
    pub codebook: Codebook,
    pub ema: EmaState,
    /// False until the codebook has been seeded from data.
    pub codebook_ready: bool,
}

impl SeModel {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let (m, v) = (&config.model, &config.vq);
        let d_ssl = config.ssl.dim;
        let bins = config.stft.bins();
        let ssl = PseudoSsl::new(&mut store, "ssl", &config.ssl, config.stft.win_length)?;
        let layer_weights = LayerWeights::new(&mut store, "ssl_weights", config.ssl.layers);
        let vq = VqLayers::new(&mut store, "vq", d_ssl, v.code_dim, &mut rng);
        let embedding = (m.variant == InputVariant::PlusIndexEmbedding).then(|| {
            store.add(
                "embedding",
                Tensor::randn(&[v.codebook_size, m.emb_dim], 1.0, &mut rng),
                true,
            )
        });
        let z_dim = match m.variant {
            InputVariant::RawSsl => d_ssl,
            InputVariant::PlusIndexEmbedding => d_ssl + m.emb_dim,
            InputVariant::PlusCodebookVector => d_ssl + v.code_dim,
        };
        let g_in = Linear::new(&mut store, "g.input", z_dim, m.g_dim, true, 1.0, true, &mut rng);
        let g = TransformerStack::new(
            &mut store, "g.layers", m.g_dim, m.heads, m.layers, m.causal, true, &mut rng,
        )?;
        let g_norm = LayerNorm::new(&mut store, "g.norm", m.g_dim, true);
        let fusion = match m.fusion {
            Fusion::Film => {
                let film = Film {
                    alpha: Linear::new(&mut store, "film.alpha", bins, m.f_dim, true, 1.0, true, &mut rng),
                    gamma: Linear::new(&mut store, "film.gamma", m.g_dim, m.f_dim, true, 0.1, true, &mut rng),
                    beta: Linear::new(&mut store, "film.beta", m.g_dim, m.f_dim, true, 0.1, true, &mut rng),
                };
                // Start near identity modulation.
                let gb = film.gamma.bias.expect("gamma has a bias");
                store.set(gb, Tensor::full(&[m.f_dim], 1.0))?;
                FusionLayer::Film(film)
            }
            Fusion::Concat => FusionLayer::Concat(Linear::new(
                &mut store,
                "fusion.concat",
                bins + m.g_dim,
                m.f_dim,
                true,
                1.0,
                true,
                &mut rng,
            )),
        };
        let f = TransformerStack::new(
            &mut store, "f.layers", m.f_dim, m.heads, m.layers, m.causal, true, &mut rng,
        )?;
        let f_norm = LayerNorm::new(&mut store, "f.norm", m.f_dim, true);
        let f_out = Linear::new(&mut store, "f.output", m.f_dim, bins, true, 1.0, true, &mut rng);
        let head = Linear::new(
            &mut store,
            "semantic_head",
            m.g_dim,
            m.n_predict * v.codebook_size,
            true,
            1.0,
            true,
            &mut rng,
        );
        let codebook = Codebook::new(Tensor::zeros(&[v.codebook_size, v.code_dim]))?;
        let ema = EmaState::new(&codebook, v);
        Ok(Self {
            config: config.clone(),
            store,
            ssl,
            layer_weights,
            vq,
            embedding,
            g_in,
            g,
            g_norm,
            fusion,
            f,
            f_norm,
            f_out,
            head,
            codebook,
            ema,
            codebook_ready: false,
        })
    }

    pub fn bins(&self) -> usize {
        self.config.stft.bins()
    }

    pub fn codebook_size(&self) -> usize {
        self.config.vq.codebook_size
    }

    pub fn n_predict(&self) -> usize {
        self.config.model.n_predict
    }

    /// SSL layer outputs, from the encoder or the external stack.
    pub fn ssl_layers(&self, g: &mut Graph, input: &ModelInput) -> Result<Vec<Var>> {
        match &input.external {
            Some(stack) => {
                if stack.layers.len() != self.config.ssl.layers || stack.dim() != self.config.ssl.dim {
                    return Err(Error::shape(
                        "external_features",
                        format!(
                            "{} layers of width {}, model expects {} of width {}",
                            stack.layers.len(),
                            stack.dim(),
                            self.config.ssl.layers,
                            self.config.ssl.dim
                        ),
                    ));
                }
                if stack.frames() != input.len() {
                    return Err(Error::shape(
                        "external_features",
                        format!(
                            "{} feature frames for {} spectrogram frames",
                            stack.frames(),
                            input.len()
                        ),
                    ));
                }
                stack.layers.iter().map(|l| g.constant(l.clone())).collect()
            }
            None => {
                let x = g.constant(input.frames.clone())?;
                self.ssl.features(g, &self.store, x)
            }
        }
    }

    /// Weighted SSL features `c` without gradients; used to seed the codebook.
    pub fn encoded_features(&self, input: &ModelInput) -> Result<Tensor> {
        let mut g = Graph::inference();
        let layers = self.ssl_layers(&mut g, input)?;
        let c = self.layer_weights.forward(&mut g, &self.store, &layers)?;
        let e = self.vq.encode(&mut g, &self.store, c)?;
        Ok(g.value(e).clone())
    }

    /// Seeds the codebook from encoder outputs of `inputs` (k-means++).
    pub fn init_codebook(&mut self, inputs: &[&ModelInput], seed: u64) -> Result<()> {
        let mut rows = Vec::new();
        let mut n = 0;
        for input in inputs {
            let e = self.encoded_features(input)?;
            n += e.rows();
            rows.extend_from_slice(e.data());
        }
        let rows = Tensor::new(vec![n, self.config.vq.code_dim], rows)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.codebook = init_codebook(&rows, self.codebook_size(), &mut rng)?;
        self.ema = EmaState::new(&self.codebook, &self.config.vq);
        self.codebook_ready = true;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput, opts: ForwardOptions<'_>) -> Result<ForwardOut> {
        let t = input.len();
        if input.frames.rows() != t || input.noisy.cols() != self.bins() {
            return Err(Error::shape(
                "se_model",
                format!(
                    "{} frames, {}x{} features, model expects {} bins",
                    input.frames.rows(),
                    t,
                    input.noisy.cols(),
                    self.bins()
                ),
            ));
        }
        let store = &self.store;
        let m = &self.config.model;
        let ssl_layers = self.ssl_layers(g, input)?;
        let c = self.layer_weights.forward(g, store, &ssl_layers)?;
        let mode = match opts.quantizer {
            Quantizer::Live => QuantMode::Nearest(&self.codebook),
            Quantizer::Frozen {
                indices,
                quantized,
                offsets,
            } => QuantMode::Frozen {
                indices,
                quantized,
                offsets,
            },
        };
        let vq = vq_forward(g, store, &self.vq, c, mode, self.config.vq.xi)?;
        let z = match m.variant {
            InputVariant::RawSsl => c,
            InputVariant::PlusIndexEmbedding => {
                let table = g.param(store, self.embedding.expect("embedding exists for this variant"));
                let e = g.embedding(table, &vq.indices)?;
                g.concat_cols(&[c, e])?
            }
            InputVariant::PlusCodebookVector => g.concat_cols(&[c, vq.straight_through])?,
        };
        let h = self.encode_g(g, store, z)?;

        let x = g.constant(input.noisy.clone())?;
        let fused = self.fusion.forward(g, store, x, h)?;
        let pe = g.constant(positional_encoding(0, t, m.f_dim))?;
        let f0 = g.add(fused, pe)?;
        let fs = self.f.forward(g, store, f0)?;
        let fo = self.f_norm.forward(g, store, *fs.last().expect("at least one layer"))?;
        let fo = self.f_out.forward(g, store, fo)?;
        let mask = if opts.unit_mask {
            g.constant(Tensor::full(&[t, self.bins()], 1.0))?
        } else {
            g.sigmoid(fo)?
        };
        let enhanced = g.mul(x, mask)?;
        let logits = self.head.forward(g, store, h)?;
        Ok(ForwardOut {
            ssl_layers,
            c,
            vq,
            z,
            h,
            fused,
            mask,
            enhanced,
            logits,
        })
    }

    /// Inference-only forward returning concrete values.
    pub fn infer(&self, input: &ModelInput, unit_mask: bool) -> Result<Inference> {
        let mut g = Graph::inference();
        let out = self.forward(
            &mut g,
            input,
            ForwardOptions {
                unit_mask,
                ..Default::default()
            },
        )?;
        Ok(Inference {
            enhanced: g.value(out.enhanced).clone(),
            mask: g.value(out.mask).clone(),
            tokens: out.vq.indices.clone(),
            logits: g.value(out.logits).clone(),
        })
    }

    /// `g` over an arbitrary `Z`: input affine, positions, causal stack,
    /// final norm.
    pub fn encode_g(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let t = g.value(z).rows();
        let h0 = self.g_in.forward(g, store, z)?;
        let pe = g.constant(positional_encoding(0, t, self.config.model.g_dim))?;
        let h0 = g.add(h0, pe)?;
        let hs = self.g.forward(g, store, h0)?;
        self.g_norm.forward(g, store, *hs.last().expect("at least one layer"))
    }

    /// Predictor branch alone: `Z -> (h, logits)`.
    pub fn predict_from_z(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let h = self.encode_g(g, store, z)?;
        let logits = self.head.forward(g, store, h)?;
        Ok((h, logits))
    }

    /// Parameters of the predictor branch (`g` and the semantic head).
    pub fn predictor_params(&self) -> Vec<ParamId> {
        let mut p = self.g_in.params();
        for b in &self.g.blocks {
            p.extend(b.params());
        }
        p.push(self.g_norm.gain);
        p.push(self.g_norm.bias);
        p.extend(self.head.params());
        p
    }

    /// Frozen-quantizer arguments reproducing the live assignment at the
    /// current parameters: `(indices, quantized, offsets)`.
    pub fn freeze_quantizer(&self, input: &ModelInput) -> Result<(Vec<usize>, Tensor, Tensor)> {
        let e = self.encoded_features(input)?;
        let (idx, q) = quantize(&e, &self.codebook)?;
        let off: Vec<f64> = q.data().iter().zip(e.data()).map(|(a, b)| a - b).collect();
        let off = Tensor::new(e.shape().to_vec(), off)?;
        Ok((idx, q, off))
    }

    /// Parameters in a fixed order with their names.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.store.ids().map(|id| (self.store.name(id), id))
    }
}

/// Concrete outputs of [`SeModel::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub enhanced: Tensor,
    pub mask: Tensor,
    pub tokens: Vec<usize>,
    pub logits: Tensor,
}

impl Inference {
    /// Argmax token for each of the N groups at frame `t`.
    pub fn predicted(&self, t: usize, k: usize) -> Vec<usize> {
        self.logits.row(t).chunks(k).map(argmax).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
