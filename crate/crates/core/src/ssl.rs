//! Pseudo-SSL encoder producing per-layer features, the softmax-weighted
//! layer sum, prefix (past-only) evaluation and external feature files.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::nn::{KvCache, LayerNorm, Linear, TransformerStack};
use crate::tensor::{fill_positional_row, kernels, positional_encoding, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    /// Number of transformer layers `I` (one feature layer each).
    pub layers: usize,
    /// Feature width `D_ssl`.
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Causal attention and left-only convolution; `false` gives the
    /// bidirectional comparison encoder.
    pub causal: bool,
    pub freeze_frontend: bool,
    #[serde(default)]
    pub freeze_transformer: bool,
    /// Compute frame `t` by running the encoder on frames `<= t` only.
    #[serde(default)]
    pub prefix_mode: bool,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory of `<utterance id>.cse` feature files replacing the
    /// built-in encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_features_path: Option<PathBuf>,
}

fn default_heads() -> usize {
    4
}

fn default_kernel() -> usize {
    3
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: default_heads(),
            causal: true,
            freeze_frontend: true,
            freeze_transformer: false,
            prefix_mode: false,
            conv_kernel: default_kernel(),
            seed: 0,
            external_features_path: None,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("ssl.layers must be >= 1".into()));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("ssl.conv_kernel must be >= 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "ssl.dim {} not divisible by ssl.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Whether frame `t` of the output can only see frames `<= t`.
    pub fn is_causal_output(&self) -> bool {
        self.causal || self.prefix_mode
    }

    fn shifts(&self) -> Vec<isize> {
        let k = self.conv_kernel as isize;
        if self.causal {
            (0..k).collect()
        } else {
            let half = k / 2;
            (0..k).map(|i| i - half).collect()
        }
    }
}

/// Per-layer outputs `s_i`, each `T x D_ssl`.
#[derive(Clone, Debug, PartialEq)]
pub struct SslFeatureStack {
    pub layers: Vec<Tensor>,
}

impl SslFeatureStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("feature stack needs at least one layer".into()))?;
        if first.shape().len() != 2 {
            return Err(Error::shape(
                "ssl_stack",
                format!("layer 0 has shape {:?}", first.shape()),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != first.shape() {
                return Err(Error::shape(
                    "ssl_stack",
                    format!("layer {i} has shape {:?}, layer 0 has {:?}", l.shape(), first.shape()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.slice_rows(start, end)).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        for (i, l) in self.layers.iter().enumerate() {
            c.insert_tensor(format!("layer.{i}"), l);
        }
        c.save(path)
    }
}

pub fn load_external_features(path: impl AsRef<Path>) -> Result<SslFeatureStack> {
    let c = Container::load(path)?;
    if let Some(bad) = c
        .names()
        .find(|n| n.strip_prefix("layer.").and_then(|i| i.parse::<usize>().ok()).is_none())
    {
        return Err(Error::UnknownTensor(bad.to_string()));
    }
    let count = c.len();
    let layers = (0..count)
        .map(|i| c.tensor(&format!("layer.{i}")))
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::MissingTensor("layer.0".into()));
    }
    SslFeatureStack::new(layers)
}

/// Convex combination `sum_i softmax(logits)_i * layers_i`.
pub fn weighted_sum(stack: &SslFeatureStack, logits: &[f64]) -> Result<Tensor> {
    if logits.len() != stack.layers.len() {
        return Err(Error::shape(
            "weighted_sum",
            format!("{} logits for {} layers", logits.len(), stack.layers.len()),
        ));
    }
    let mut w = logits.to_vec();
    kernels::softmax_in_place(&mut w);
    let mut out = Tensor::zeros(stack.layers[0].shape());
    for (wi, l) in w.iter().zip(&stack.layers) {
        for (o, x) in out.data_mut().iter_mut().zip(l.data()) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Trainable layer-weight logits.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub logits: ParamId,
    pub count: usize,
}

impl LayerWeights {
    pub fn new(store: &mut ParamStore, name: &str, count: usize) -> Self {
        Self {
            logits: store.add(name, Tensor::zeros(&[1, count]), true),
            count,
        }
    }

    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        let mut w = store.get(self.logits).data().to_vec();
        kernels::softmax_in_place(&mut w);
        w
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<Var> {
        let l = g.param(store, self.logits);
        let w = g.softmax(l)?;
        g.weighted_sum(w, layers)
    }
}

/// Framed waveform -> linear -> GELU -> conv over frames -> GELU -> norm
/// -> positions -> `I` transformer blocks.
#[derive(Clone, Debug)]
pub struct PseudoSsl {
    pub config: SslConfig,
    pub frame_len: usize,
    proj: Linear,
    conv: Linear,
    norm: LayerNorm,
    stack: TransformerStack,
}

impl PseudoSsl {
    pub fn new(store: &mut ParamStore, name: &str, config: &SslConfig, frame_len: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fe = !config.freeze_frontend;
        let d = config.dim;
        Ok(Self {
            proj: Linear::new(
                store,
                &format!("{name}.frontend.proj"),
                frame_len,
                d,
                true,
                1.0,
                fe,
                &mut rng,
            ),
            conv: Linear::new(
                store,
                &format!("{name}.frontend.conv"),
                config.conv_kernel * d,
                d,
                true,
                1.0,
                fe,
                &mut rng,
            ),
            norm: LayerNorm::new(store, &format!("{name}.frontend.norm"), d, fe),
            stack: TransformerStack::new(
                store,
                &format!("{name}.layers"),
                d,
                config.heads,
                config.layers,
                config.causal,
                !config.freeze_transformer,
                &mut rng,
            )?,
            config: config.clone(),
            frame_len,
        })
    }

    /// One full pass; returns every layer output.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Vec<Var>> {
        let (t, w) = {
            let v = g.value(frames);
            (v.rows(), v.cols())
        };
        if w != self.frame_len {
            return Err(Error::shape(
                "pseudo_ssl",
                format!("frames are {w} wide, expected {}", self.frame_len),
            ));
        }
        let a = self.proj.forward(g, store, frames)?;
        let a = g.gelu(a)?;
        let taps = self
            .config
            .shifts()
            .into_iter()
            .map(|s| if s == 0 { Ok(a) } else { g.shift_rows(a, s) })
            .collect::<Result<Vec<_>>>()?;
        let b = g.concat_cols(&taps)?;
        let b = self.conv.forward(g, store, b)?;
        let b = g.gelu(b)?;
        let b = self.norm.forward(g, store, b)?;
        let pe = g.constant(positional_encoding(0, t, self.config.dim))?;
        let x = g.add(b, pe)?;
        self.stack.forward(g, store, x)
    }

    /// Frame `t` of each layer is the last frame of a pass over frames
    /// `0..=t`. Quadratic in `T`.
    pub fn forward_prefix(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Vec<Var>> {
        let t_len = g.value(frames).rows();
        if t_len == 0 {
            return Err(Error::InvalidArgument("prefix evaluation of an empty input".into()));
        }
        let mut per_layer: Vec<Vec<Var>> = vec![Vec::with_capacity(t_len); self.config.layers];
        for t in 0..t_len {
            let prefix = g.slice_rows(frames, 0, t + 1)?;
            let outs = self.forward(g, store, prefix)?;
            for (acc, o) in per_layer.iter_mut().zip(outs) {
                acc.push(g.slice_rows(o, t, t + 1)?);
            }
        }
        per_layer.iter().map(|rows| g.concat_rows(rows)).collect()
    }

    /// Full pass or prefix evaluation according to the config.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Vec<Var>> {
        if self.config.prefix_mode {
            self.forward_prefix(g, store, frames)
        } else {
            self.forward(g, store, frames)
        }
    }

    /// Convenience: evaluate without gradients.
    pub fn stack(&self, store: &ParamStore, frames: &Tensor, prefix: bool) -> Result<SslFeatureStack> {
        let mut g = Graph::inference();
        let x = g.constant(frames.clone())?;
        let outs = if prefix {
            self.forward_prefix(&mut g, store, x)?
        } else {
            self.forward(&mut g, store, x)?
        };
        SslFeatureStack::new(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.proj.params();
        p.extend(self.conv.params());
        p.extend([self.norm.gain, self.norm.bias]);
        for b in &self.stack.blocks {
            p.extend(b.params());
        }
        p
    }
}

/// Frame-at-a-time evaluation of [`PseudoSsl`].
#[derive(Clone, Debug)]
pub struct SslStream {
    taps: VecDeque<Vec<f64>>,
    caches: Vec<KvCache>,
    /// Only used for a non-causal encoder in prefix mode.
    history: Vec<f64>,
    t: usize,
}

impl SslStream {
    pub fn new(enc: &PseudoSsl) -> Result<Self> {
        if !enc.config.is_causal_output() {
            return Err(Error::NotCausal(
                "the bidirectional encoder needs prefix mode for streaming".into(),
            ));
        }
        Ok(Self {
            taps: VecDeque::new(),
            caches: vec![KvCache::default(); enc.config.layers],
            history: Vec::new(),
            t: 0,
        })
    }

    /// Layer outputs for the next frame.
    pub fn step(&mut self, enc: &PseudoSsl, store: &ParamStore, frame: &[f64]) -> Result<Vec<Vec<f64>>> {
        let t = self.t;
        self.t += 1;
        if !enc.config.causal {
            self.history.extend_from_slice(frame);
            let frames = Tensor::new(vec![t + 1, enc.frame_len], self.history.clone())?;
            let mut g = Graph::inference();
            let x = g.constant(frames)?;
            let outs = enc.forward(&mut g, store, x)?;
            return Ok(outs.iter().map(|&o| g.value(o).row(t).to_vec()).collect());
        }
        let a: Vec<f64> = enc
            .proj
            .apply_row(store, frame)
            .into_iter()
            .map(kernels::gelu)
            .collect();
        self.taps.push_front(a);
        self.taps.truncate(enc.config.conv_kernel);
        let d = enc.config.dim;
        let mut conv_in = vec![0.0; enc.config.conv_kernel * d];
        for (k, tap) in self.taps.iter().enumerate() {
            conv_in[k * d..(k + 1) * d].copy_from_slice(tap);
        }
        let b: Vec<f64> = enc
            .conv
            .apply_row(store, &conv_in)
            .into_iter()
            .map(kernels::gelu)
            .collect();
        let b = enc.norm.apply_row(store, &b);
        let mut pe = vec![0.0; d];
        fill_positional_row(t, &mut pe);
        let x: Vec<f64> = b.iter().zip(&pe).map(|(u, v)| u + v).collect();
        Ok(enc.stack.step(store, &x, &mut self.caches))
    }
}
