//! Parameterized layers. Each layer records itself on a [`Graph`] for
//! training and also has a row-at-a-time path used by streaming inference.

use rand::Rng;

use super::kernels::{self, linear_row};
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from N(0, (gain / sqrt(in_dim))^2), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let std = gain / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_dim, out_dim], std, rng),
            trainable,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        linear_row(
            x,
            store.get(self.weight).data(),
            self.bias.map(|b| store.get(b).data()),
            &mut out,
        );
        out
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        kernels::layer_norm_row(
            x,
            store.get(self.gain).data(),
            store.get(self.bias).data(),
            LAYER_NORM_EPS,
            &mut out,
            &mut scratch,
        );
        out
    }
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub causal: bool,
}

/// Keys and values seen so far by one attention layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl SelfAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        out_gain: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::shape(
                "causal_mha",
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, 1.0, trainable, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, 1.0, trainable, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, 1.0, trainable, rng),
            output: Linear::new(
                store,
                &format!("{name}.output"),
                dim,
                dim,
                true,
                out_gain,
                trainable,
                rng,
            ),
            heads,
            causal,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.attention(q, k, v, self.heads, self.causal)?;
        self.output.forward(g, store, a)
    }

    /// Attends from one new frame to every cached frame (itself included).
    pub fn step(&self, store: &ParamStore, x: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let d = self.query.out_dim;
        let q = self.query.apply_row(store, x);
        cache.keys.extend(self.key.apply_row(store, x));
        cache.values.extend(self.value.apply_row(store, x));
        cache.len += 1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; d];
        let mut p = vec![0.0; cache.len];
        for h in 0..self.heads {
            let off = h * dh;
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = kernels::dot(&q[off..off + dh], &cache.keys[j * d + off..j * d + off + dh]) * scale;
            }
            kernels::softmax_in_place(&mut p);
            for (j, &pj) in p.iter().enumerate() {
                let vj = &cache.values[j * d + off..j * d + off + dh];
                for (o, &vc) in out[off..off + dh].iter_mut().zip(vj) {
                    *o += pj * vc;
                }
            }
        }
        self.output.apply_row(store, &out)
    }
}

/// Pre-norm block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`, FFN width 4x.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        depth: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let out_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, trainable),
            attn: SelfAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                heads,
                causal,
                out_gain,
                trainable,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, trainable),
            up: Linear::new(
                store,
                &format!("{name}.ffn.up"),
                dim,
                4 * dim,
                true,
                1.0,
                trainable,
                rng,
            ),
            down: Linear::new(
                store,
                &format!("{name}.ffn.down"),
                4 * dim,
                dim,
                true,
                out_gain,
                trainable,
                rng,
            ),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let b = self.norm2.forward(g, store, x)?;
        let b = self.up.forward(g, store, b)?;
        let b = g.gelu(b)?;
        let b = self.down.forward(g, store, b)?;
        g.add(x, b)
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let a = self.norm1.apply_row(store, x);
        let a = self.attn.step(store, &a, cache);
        let x: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let b = self.norm2.apply_row(store, &x);
        let b: Vec<f64> = self.up.apply_row(store, &b).into_iter().map(kernels::gelu).collect();
        let b = self.down.apply_row(store, &b);
        x.iter().zip(&b).map(|(u, v)| u + v).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.norm1.gain, self.norm1.bias, self.norm2.gain, self.norm2.bias];
        for l in [
            &self.attn.query,
            &self.attn.key,
            &self.attn.value,
            &self.attn.output,
            &self.up,
            &self.down,
        ] {
            p.extend(l.params());
        }
        p
    }
}

/// A stack of transformer blocks; `forward` returns every block's output.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub dim: usize,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        causal: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.{i}"),
                    dim,
                    heads,
                    causal,
                    layers,
                    trainable,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn new_caches(&self) -> Vec<KvCache> {
        vec![KvCache::default(); self.blocks.len()]
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], caches: &mut [KvCache]) -> Vec<Vec<f64>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.to_vec();
        for (b, c) in self.blocks.iter().zip(caches.iter_mut()) {
            cur = b.step(store, &cur, c);
            outs.push(cur.clone());
        }
        outs
    }

    pub fn is_causal(&self) -> bool {
        self.blocks.iter().all(|b| b.attn.causal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(store: &mut ParamStore, dim: usize, heads: usize) -> TransformerBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        TransformerBlock::new(store, "b", dim, heads, true, 1, true, &mut rng).unwrap()
    }

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SelfAttention::new(&mut store, "a", 10, 4, true, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2);
        for id in [b.attn.output.weight, b.down.weight] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false).unwrap();
        let y = b.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn single_frame_attention_is_value_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = SelfAttention::new(&mut store, "a", 6, 3, true, 1.0, true, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false).unwrap();
        let y = attn.forward(&mut g, &store, xv).unwrap();
        let v = attn.value.apply_row(&store, x.row(0));
        let want = attn.output.apply_row(&store, &v);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_query_key_gives_uniform_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = SelfAttention::new(&mut store, "a", 4, 2, true, 1.0, true, &mut rng).unwrap();
        for l in [&attn.query, &attn.key] {
            store.set(l.weight, Tensor::zeros(&[4, 4])).unwrap();
        }
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false).unwrap();
        let v = attn.value.forward(&mut g, &store, xv).unwrap();
        let q = attn.query.forward(&mut g, &store, xv).unwrap();
        let k = attn.key.forward(&mut g, &store, xv).unwrap();
        let a = g.attention(q, k, v, 2, true).unwrap();
        let vv = g.value(v).clone();
        for t in 0..6 {
            for c in 0..4 {
                let mean: f64 = (0..=t).map(|j| vv.row(j)[c]).sum::<f64>() / (t + 1) as f64;
                assert!((g.value(a).row(t)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streaming_step_matches_batch_forward() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[7, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false).unwrap();
        let y = b.forward(&mut g, &store, xv).unwrap();
        let mut cache = KvCache::default();
        for t in 0..7 {
            let row = b.step(&store, x.row(t), &mut cache);
            for (a, w) in row.iter().zip(g.value(y).row(t)) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_frames_do_not_change_past_outputs() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            let xv = g.input(x.clone(), false).unwrap();
            let y = b.forward(&mut g, &store, xv).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        for t in 0..5 {
            let mut x2 = x.clone();
            for v in x2.data_mut()[(t + 1) * 8..].iter_mut() {
                *v += 3.0;
            }
            let out = run(&x2);
            assert_eq!(&out.data()[..(t + 1) * 8], &base.data()[..(t + 1) * 8]);
        }
    }
}
