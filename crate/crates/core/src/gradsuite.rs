//! Finite-difference checks of every differentiable component, from the
//! graph primitives up to the whole model at T=6.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, ModelConfig};
use crate::dsp::StftConfig;
use crate::error::Result;
use crate::model::{ForwardOptions, ModelInput, Quantizer, SeModel};
use crate::ssl::SslConfig;
use crate::tensor::gradcheck::{check_inputs, check_params, projection_loss, GradCheckConfig, GradCheckReport};
use crate::tensor::nn::{Linear, SelfAttention, TransformerBlock};
use crate::tensor::{Graph, OpKind, ParamStore, Tensor, Var};
use crate::train::{se_loss, semantic_ce_loss};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub probes: usize,
    /// Backward rule to corrupt (test hook).
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: 100,
            fault: None,
        }
    }
}

/// Shrinks `base` to the gradient-check geometry: T=6 frames, F=9 bins,
/// width 8. Variant, fusion, N and causality are kept.
pub fn tiny_config(base: &Config) -> Config {
    let mut c = base.clone();
    c.stft = StftConfig {
        win_length: 16,
        hop_length: 8,
        fft_size: 16,
        ..StftConfig::default()
    };
    c.ssl = SslConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        freeze_frontend: false,
        freeze_transformer: false,
        prefix_mode: false,
        external_features_path: None,
        ..base.ssl.clone()
    };
    c.vq.codebook_size = 6;
    c.vq.code_dim = 4;
    c.model = ModelConfig {
        g_dim: 8,
        f_dim: 8,
        heads: 2,
        layers: 2,
        emb_dim: 3,
        n_predict: base.model.n_predict.min(3),
        ..base.model.clone()
    };
    c
}

struct Ctx {
    cfg: GradCheckConfig,
    rng: ChaCha8Rng,
    out: Vec<ComponentResult>,
}

impl Ctx {
    fn record(&mut self, name: &str, rep: GradCheckReport) {
        self.out.push(ComponentResult {
            component: name.to_string(),
            probes: rep.probes,
            max_rel_error: rep.max_rel_error,
            passed: rep.passed(TOLERANCE),
        });
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Values bounded away from zero, for kinked ops.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::uniform(shape, 0.2, 1.5, &mut self.rng);
        let signs = Tensor::uniform(shape, -1.0, 1.0, &mut self.rng);
        t.data_mut().iter_mut().zip(signs.data()).for_each(|(v, s)| {
            if *s < 0.0 {
                *v = -*v
            }
        });
        t
    }

    fn inputs<F>(&mut self, name: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let rep = check_inputs(inputs, &self.cfg, f)?;
        self.record(name, rep);
        Ok(())
    }
}

pub fn run(base: &Config, opts: SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut ctx = Ctx {
        cfg: GradCheckConfig {
            probes: opts.probes,
            seed: opts.seed,
            fault: opts.fault,
            ..GradCheckConfig::default()
        },
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        out: Vec::new(),
    };
    primitives(&mut ctx)?;
    layers(&mut ctx)?;
    full_model(&mut ctx, base, opts.seed)?;
    Ok(ctx.out)
}

fn primitives(ctx: &mut Ctx) -> Result<()> {
    let p34 = ctx.randn(&[3, 4]);
    let p35 = ctx.randn(&[3, 5]);
    let (a, b, w, bias) = (
        ctx.randn(&[3, 4]),
        ctx.randn(&[3, 4]),
        ctx.randn(&[4, 5]),
        ctx.randn(&[5]),
    );
    ctx.inputs("primitive:linear", &[a.clone(), w.clone(), bias.clone()], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        projection_loss(g, y, &p35)
    })?;
    ctx.inputs("primitive:matmul", &[a.clone(), w.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        projection_loss(g, y, &p35)
    })?;
    ctx.inputs("primitive:elementwise", &[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let m = g.mul(s, d)?;
        let m = g.scale(m, 0.7)?;
        projection_loss(g, m, &p34)
    })?;
    let row = ctx.randn(&[4]);
    ctx.inputs("primitive:add_row", &[a.clone(), row], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        projection_loss(g, y, &p34)
    })?;
    let p37 = ctx.randn(&[3, 7]);
    let c = ctx.randn(&[3, 3]);
    ctx.inputs("primitive:concat_slice", &[a.clone(), c], |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        let z = g.concat_rows(&[y, y])?;
        let z = g.slice_rows(z, 2, 5)?;
        let z = g.slice_cols(z, 0, 7)?;
        let z = g.mul(z, y)?;
        projection_loss(g, z, &p37)
    })?;
    let p43 = ctx.randn(&[4, 3]);
    ctx.inputs("primitive:reshape_shift", std::slice::from_ref(&a), |g, v| {
        let r = g.reshape(v[0], &[4, 3])?;
        let s = g.shift_rows(r, 1)?;
        let t = g.shift_rows(r, -2)?;
        let u = g.add(s, t)?;
        let u = g.mul(u, r)?;
        projection_loss(g, u, &p43)
    })?;
    let kinked = ctx.away_from_zero(&[3, 4]);
    ctx.inputs("primitive:activations", &[kinked], |g, v| {
        let s = g.sigmoid(v[0])?;
        let r = g.relu(v[0])?;
        let e = g.gelu(v[0])?;
        let y = g.add(s, r)?;
        let y = g.mul(y, e)?;
        projection_loss(g, y, &p34)
    })?;
    ctx.inputs("primitive:softmax", std::slice::from_ref(&a), |g, v| {
        let y = g.softmax(v[0])?;
        projection_loss(g, y, &p34)
    })?;
    let (gain, lb) = (ctx.randn(&[4]), ctx.randn(&[4]));
    ctx.inputs("primitive:layer_norm", &[a.clone(), gain, lb], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        projection_loss(g, y, &p34)
    })?;
    let table = ctx.randn(&[5, 4]);
    let p44 = ctx.randn(&[4, 4]);
    ctx.inputs("primitive:embedding", &[table], |g, v| {
        let y = g.embedding(v[0], &[1, 3, 1, 0])?;
        projection_loss(g, y, &p44)
    })?;
    // L1 targets kept away from the estimate so no |.| kink is crossed.
    let gap = ctx.away_from_zero(&[3, 4]);
    let target: Vec<f64> = a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect();
    let target = Tensor::new(vec![3, 4], target)?;
    ctx.inputs("primitive:losses", std::slice::from_ref(&a), |g, v| {
        let t = g.constant(target.clone())?;
        let l1 = g.l1_loss(v[0], t)?;
        let l2 = g.mse_loss(v[0], t)?;
        let ce = g.cross_entropy(v[0], &[Some(1), None, Some(3)])?;
        let s = g.add(l1, l2)?;
        g.add(s, ce)
    })?;
    ctx.inputs("primitive:reductions", &[a.clone(), b.clone()], |g, v| {
        let m = g.mul(v[0], v[1])?;
        let s = g.sum(m)?;
        let mm = g.mean(v[0])?;
        let mm = g.mul(mm, s)?;
        g.add(s, mm)
    })?;
    let (x1, x2, wl) = (ctx.randn(&[3, 4]), ctx.randn(&[3, 4]), ctx.randn(&[1, 2]));
    ctx.inputs("primitive:weighted_sum", &[x1, x2, wl], |g, v| {
        let w = g.softmax(v[2])?;
        let y = g.weighted_sum(w, &[v[0], v[1]])?;
        projection_loss(g, y, &p34)
    })?;
    Ok(())
}

fn layers(ctx: &mut Ctx) -> Result<()> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng.gen());
    let attn = SelfAttention::new(&mut store, "mha", 8, 2, true, 1.0, true, &mut rng)?;
    let block = TransformerBlock::new(&mut store, "block", 8, 2, true, 2, true, &mut rng)?;
    let enc = Linear::new(&mut store, "vq.encoder", 8, 4, true, 1.0, true, &mut rng);
    let dec = Linear::new(&mut store, "vq.decoder", 4, 8, true, 1.0, true, &mut rng);
    let head = Linear::new(&mut store, "head", 8, 3 * 6, true, 1.0, true, &mut rng);
    let x = ctx.randn(&[6, 8]);
    let p68 = ctx.randn(&[6, 8]);

    ctx.inputs("causal_mha:input", std::slice::from_ref(&x), |g, v| {
        let y = attn.forward(g, &store, v[0])?;
        projection_loss(g, y, &p68)
    })?;
    let (q, k, vv) = (ctx.randn(&[6, 8]), ctx.randn(&[6, 8]), ctx.randn(&[6, 8]));
    ctx.inputs("causal_mha:qkv", &[q, k, vv], |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, true)?;
        projection_loss(g, y, &p68)
    })?;
    let rep = check_params(&store, Some(&mha_params(&attn)), &ctx.cfg, |g, s| {
        let xv = g.constant(x.clone())?;
        let y = attn.forward(g, s, xv)?;
        projection_loss(g, y, &p68)
    })?;
    ctx.record("causal_mha:params", rep);

    ctx.inputs("transformer_block:input", std::slice::from_ref(&x), |g, v| {
        let y = block.forward(g, &store, v[0])?;
        projection_loss(g, y, &p68)
    })?;
    let rep = check_params(&store, Some(&block.params()), &ctx.cfg, |g, s| {
        let xv = g.constant(x.clone())?;
        let y = block.forward(g, s, xv)?;
        projection_loss(g, y, &p68)
    })?;
    ctx.record("transformer_block:params", rep);

    let mut ed = enc.params();
    ed.extend(dec.params());
    let rep = check_params(&store, Some(&ed), &ctx.cfg, |g, s| {
        let xv = g.constant(x.clone())?;
        let e = enc.forward(g, s, xv)?;
        let e = g.gelu(e)?;
        let d = dec.forward(g, s, e)?;
        g.mse_loss(d, xv)
    })?;
    ctx.record("vq_projections", rep);

    let idx = [0usize, 5, 2, 2, 4, 1];
    let rep = check_params(&store, Some(&head.params()), &ctx.cfg, |g, s| {
        let xv = g.constant(x.clone())?;
        let l = head.forward(g, s, xv)?;
        semantic_ce_loss(g, l, &idx, 3, 6)
    })?;
    ctx.record("semantic_head", rep);
    Ok(())
}

fn mha_params(a: &SelfAttention) -> Vec<crate::tensor::ParamId> {
    let mut p = Vec::new();
    for l in [&a.query, &a.key, &a.value, &a.output] {
        p.extend(l.params());
    }
    p
}

fn full_model(ctx: &mut Ctx, base: &Config, seed: u64) -> Result<()> {
    let mut c = tiny_config(base);
    c.train.seed = seed;
    let mut model = SeModel::new(&c)?;
    let t = 6;
    let input = ModelInput {
        frames: Tensor::uniform(&[t, c.stft.win_length], -1.0, 1.0, &mut ctx.rng),
        noisy: Tensor::uniform(&[t, c.stft.bins()], 0.05, 2.0, &mut ctx.rng),
        external: None,
    };
    model.init_codebook(&[&input], seed)?;
    let clean = Tensor::uniform(&[t, c.stft.bins()], 0.0, 1.5, &mut ctx.rng);
    let (idx, q, off) = model.freeze_quantizer(&input)?;
    let (n, k) = (model.n_predict(), model.codebook_size());

    let film_ids = model.fusion.params();
    let loss = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let m = SeModel {
            store: s.clone(),
            ..model.clone()
        };
        let out = m.forward(
            g,
            &input,
            ForwardOptions {
                quantizer: Quantizer::Frozen {
                    indices: &idx,
                    quantized: &q,
                    offsets: &off,
                },
                unit_mask: false,
            },
        )?;
        let y = g.constant(clean.clone())?;
        let se = se_loss(g, out.enhanced, y)?;
        let commit = g.scale(out.vq.commit, m.config.vq.xi)?;
        let vq = g.add(out.vq.recon, commit)?;
        let ce = semantic_ce_loss(g, out.logits, &idx, n, k)?;
        let a = g.add(se, vq)?;
        g.add(a, ce)
    };
    let rep = check_params(&model.store, Some(&film_ids), &ctx.cfg, loss)?;
    ctx.record(
        if base.model.fusion == crate::config::Fusion::Film {
            "film"
        } else {
            "fusion_concat"
        },
        rep,
    );
    let rep = check_params(&model.store, None, &ctx.cfg, loss)?;
    ctx.record("full_model", rep);
    Ok(())
}

pub fn all_passed(results: &[ComponentResult]) -> bool {
    results.iter().all(|r| r.passed)
}
