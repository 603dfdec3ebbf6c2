//! One-stage vector quantization: linear encoder E, nearest-codeword
//! lookup, linear decoder D, the three VQ loss terms and EMA codebook
//! maintenance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    /// Number of codewords `K`.
    pub codebook_size: usize,
    /// Code width `D_code`.
    pub code_dim: usize,
    /// Commitment weight.
    pub xi: f64,
    pub ema_decay: f64,
    #[serde(default = "default_eps")]
    pub ema_eps: f64,
    /// Codewords unused for this many consecutive updates are re-seeded.
    #[serde(default = "default_restart")]
    pub restart_after: u32,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_restart() -> u32 {
    50
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            code_dim: 64,
            xi: 0.1,
            ema_decay: 0.99,
            ema_eps: default_eps(),
            restart_after: default_restart(),
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.code_dim == 0 {
            return Err(Error::Config("vq.codebook_size and vq.code_dim must be >= 1".into()));
        }
        if !(self.xi >= 0.0) {
            return Err(Error::Config(format!("vq.xi must be >= 0, got {}", self.xi)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "vq.ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.ema_eps > 0.0) {
            return Err(Error::Config("vq.ema_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// `K x D_code` codeword table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codewords: Tensor,
}

impl Codebook {
    pub fn new(codewords: Tensor) -> Result<Self> {
        if codewords.shape().len() != 2 || codewords.rows() == 0 {
            return Err(Error::InvalidArgument(
                "codebook must be a non-empty K x D matrix".into(),
            ));
        }
        if !codewords.is_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Self { codewords })
    }

    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    /// Index of the nearest codeword (lowest index on ties) and its squared
    /// distance.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let d: f64 = self
                .codewords
                .row(k)
                .iter()
                .zip(x)
                .map(|(c, v)| (c - v) * (c - v))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.codewords.row(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("gathered rows are D wide")
    }
}

/// Nearest-codeword indices and the selected codewords for each row.
pub fn quantize(encoded: &Tensor, codebook: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    if encoded.cols() != codebook.dim() {
        return Err(Error::shape(
            "quantize",
            format!("encoded width {} vs code width {}", encoded.cols(), codebook.dim()),
        ));
    }
    let indices: Vec<usize> = (0..encoded.rows())
        .map(|t| codebook.nearest(encoded.row(t)).0)
        .collect();
    let q = codebook.gather(&indices);
    Ok((indices, q))
}

/// The linear maps E (`D_ssl -> D_code`) and D (`D_code -> D_ssl`).
#[derive(Clone, Debug)]
pub struct VqLayers {
    pub encoder: Linear,
    pub decoder: Linear,
}

impl VqLayers {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ssl_dim: usize, code_dim: usize, rng: &mut R) -> Self {
        Self {
            encoder: Linear::new(
                store,
                &format!("{name}.encoder"),
                ssl_dim,
                code_dim,
                true,
                1.0,
                true,
                rng,
            ),
            decoder: Linear::new(
                store,
                &format!("{name}.decoder"),
                code_dim,
                ssl_dim,
                true,
                1.0,
                true,
                rng,
            ),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Result<Var> {
        self.encoder.forward(g, store, c)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        self.decoder.forward(g, store, e)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }
}

/// How the quantizer picks codewords inside a graph.
#[derive(Clone, Debug)]
pub enum QuantMode<'a> {
    /// Nearest codeword, straight-through to the encoder.
    Nearest(&'a Codebook),
    /// Fixed assignment and codewords; the straight-through value is
    /// `E(c) + offsets` so that it genuinely moves with the encoder and
    /// finite differences can check the path.
    Frozen {
        indices: &'a [usize],
        quantized: &'a Tensor,
        offsets: &'a Tensor,
    },
}

/// VQ branch of one forward pass.
#[derive(Clone, Debug)]
pub struct VqGraphOut {
    pub encoded: Var,
    /// Forward value = selected codewords; gradient passes to `encoded`.
    pub straight_through: Var,
    pub indices: Vec<usize>,
    pub quantized: Tensor,
    pub decoded: Var,
    /// `mse(c, D(e))`.
    pub recon: Var,
    /// `mse(sg[E(c)], e)`; monitored only, carries no gradient.
    pub codebook_term: f64,
    /// `mse(E(c), sg[e])`, before the `xi` weight.
    pub commit: Var,
    /// `recon + codebook_term + xi * commit`.
    pub loss: Var,
}

pub fn vq_forward(
    g: &mut Graph,
    store: &ParamStore,
    layers: &VqLayers,
    c: Var,
    mode: QuantMode<'_>,
    xi: f64,
) -> Result<VqGraphOut> {
    if !(xi >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "commitment weight must be >= 0, got {xi}"
        )));
    }
    let encoded = layers.encode(g, store, c)?;
    let (indices, quantized, st) = match mode {
        QuantMode::Nearest(cb) => {
            let (idx, q) = quantize(g.value(encoded), cb)?;
            let st = g.straight_through(encoded, q.clone())?;
            (idx, q, st)
        }
        QuantMode::Frozen {
            indices,
            quantized,
            offsets,
        } => {
            let off = g.constant(offsets.clone())?;
            let st = g.add(encoded, off)?;
            (indices.to_vec(), quantized.clone(), st)
        }
    };
    let decoded = layers.decode(g, store, st)?;
    let recon = g.mse_loss(decoded, c)?;
    let enc_v = g.value(encoded);
    let codebook_term = enc_v
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / enc_v.len().max(1) as f64;
    let target = g.constant(quantized.clone())?;
    let commit = g.mse_loss(encoded, target)?;
    let cb = g.constant(Tensor::scalar(codebook_term))?;
    let wc = g.scale(commit, xi)?;
    let loss = g.add(recon, cb)?;
    let loss = g.add(loss, wc)?;
    Ok(VqGraphOut {
        encoded,
        straight_through: st,
        indices,
        quantized,
        decoded,
        recon,
        codebook_term,
        commit,
        loss,
    })
}

/// Exponential moving averages backing the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub cluster_size: Vec<f64>,
    pub sums: Tensor,
    /// Consecutive updates without an assignment, per codeword.
    pub idle: Vec<u32>,
    pub decay: f64,
    pub eps: f64,
    pub restart_after: u32,
}

impl EmaState {
    /// Starts with unit cluster sizes and sums equal to the codewords.
    pub fn new(codebook: &Codebook, config: &VqConfig) -> Self {
        Self {
            cluster_size: vec![1.0; codebook.size()],
            sums: codebook.codewords.clone(),
            idle: vec![0; codebook.size()],
            decay: config.ema_decay,
            eps: config.ema_eps,
            restart_after: config.restart_after,
        }
    }

    /// One EMA step. Returns the number of re-seeded codewords.
    pub fn update<R: Rng>(
        &mut self,
        codebook: &mut Codebook,
        encoded: &Tensor,
        assignments: &[usize],
        rng: &mut R,
    ) -> Result<usize> {
        let k = codebook.size();
        let d = codebook.dim();
        if encoded.rows() != assignments.len() || encoded.cols() != d {
            return Err(Error::shape(
                "ema_update",
                format!(
                    "{} assignments for a {}x{} batch (code width {d})",
                    assignments.len(),
                    encoded.rows(),
                    encoded.cols()
                ),
            ));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidArgument(format!(
                "assignment {bad} outside codebook of {k}"
            )));
        }
        let mut counts = vec![0.0; k];
        let mut batch_sums = Tensor::zeros(&[k, d]);
        for (t, &a) in assignments.iter().enumerate() {
            counts[a] += 1.0;
            for (s, v) in batch_sums.row_mut(a).iter_mut().zip(encoded.row(t)) {
                *s += v;
            }
        }
        let g = self.decay;
        for i in 0..k {
            self.cluster_size[i] = g * self.cluster_size[i] + (1.0 - g) * counts[i];
            let (m, b) = (self.sums.row_mut(i), batch_sums.row(i));
            for (mv, bv) in m.iter_mut().zip(b) {
                *mv = g * *mv + (1.0 - g) * bv;
            }
        }
        let total: f64 = self.cluster_size.iter().sum();
        for i in 0..k {
            let smoothed = (self.cluster_size[i] + self.eps) / (total + k as f64 * self.eps) * total;
            let m = self.sums.row(i).to_vec();
            for (c, mv) in codebook.codewords.row_mut(i).iter_mut().zip(&m) {
                *c = mv / smoothed;
            }
        }
        let mut restarted = 0;
        for i in 0..k {
            if counts[i] > 0.0 {
                self.idle[i] = 0;
                continue;
            }
            self.idle[i] += 1;
            if self.idle[i] >= self.restart_after && encoded.rows() > 0 {
                let row = encoded.row(rng.gen_range(0..encoded.rows())).to_vec();
                codebook.codewords.row_mut(i).copy_from_slice(&row);
                self.sums.row_mut(i).copy_from_slice(&row);
                self.cluster_size[i] = 1.0;
                self.idle[i] = 0;
                restarted += 1;
            }
        }
        if !codebook.codewords.is_finite() {
            return Err(Error::NonFinite { op: "ema_update" });
        }
        Ok(restarted)
    }
}

/// Independent seedings tried by [`init_codebook`]; the lowest total
/// squared distance wins.
const SEEDINGS: usize = 4;

/// Seeds `k` codewords from data rows with greedy k-means++: each step
/// draws a few candidate rows with probability proportional to squared
/// distance from the codewords chosen so far and keeps the one that lowers
/// the total squared distance most. The whole seeding is repeated
/// [`SEEDINGS`] times and the best kept.
pub fn init_codebook<R: Rng>(rows: &Tensor, k: usize, rng: &mut R) -> Result<Codebook> {
    if rows.rows() == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "codebook init needs data rows and k >= 1".into(),
        ));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..SEEDINGS {
        let (chosen, potential) = greedy_seed(rows, k, rng);
        if best.as_ref().is_none_or(|(_, p)| potential < *p) {
            best = Some((chosen, potential));
        }
    }
    let (chosen, _) = best.expect("at least one seeding");
    Codebook::new(Tensor::new(vec![k, rows.cols()], chosen)?)
}

fn greedy_seed<R: Rng>(rows: &Tensor, k: usize, rng: &mut R) -> (Vec<f64>, f64) {
    let n = rows.rows();
    let d = rows.cols();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    chosen.extend_from_slice(rows.row(first));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best: Vec<f64> = (0..n).map(|i| dist(rows.row(i), rows.row(first))).collect();
    let mut trial = vec![0.0; n];
    let mut winner = vec![0.0; n];
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let mut pick = None;
        let mut pick_cost = f64::INFINITY;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut r = rng.gen_range(0.0..total);
                let mut c = n - 1;
                for (i, &b) in best.iter().enumerate() {
                    if r < b {
                        c = i;
                        break;
                    }
                    r -= b;
                }
                c
            } else {
                rng.gen_range(0..n)
            };
            let row = rows.row(cand);
            let mut cost = 0.0;
            for (i, t) in trial.iter_mut().enumerate() {
                *t = best[i].min(dist(rows.row(i), row));
                cost += *t;
            }
            if cost < pick_cost {
                pick_cost = cost;
                pick = Some(cand);
                std::mem::swap(&mut trial, &mut winner);
            }
        }
        let pick = pick.expect("at least one trial");
        std::mem::swap(&mut best, &mut winner);
        chosen.extend_from_slice(rows.row(pick));
    }
    (chosen, best.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, projection_loss, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn identity_layers(store: &mut ParamStore, d: usize) -> VqLayers {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = VqLayers::new(store, "vq", d, d, &mut rng);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.row_mut(i)[i] = 1.0;
        }
        store.set(l.encoder.weight, eye.clone()).unwrap();
        store.set(l.decoder.weight, eye).unwrap();
        l
    }

    #[test]
    fn zero_and_identity_maps() {
        let mut store = ParamStore::new();
        let l = identity_layers(&mut store, 3);
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 3]), false).unwrap();
        let e = l.encode(&mut g, &store, z).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let x = g
            .input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap(), false)
            .unwrap();
        let e = l.encode(&mut g, &store, x).unwrap();
        let d = l.decode(&mut g, &store, e).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(g.value(d).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn exact_codeword_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::new(Tensor::randn(&[16, 4], 1.0, &mut rng)).unwrap();
        let (idx, q) = quantize(&cb.codewords.slice_rows(7, 8), &cb).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(q.row(0), cb.codewords.row(7));

        let cb = Codebook::new(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(quantize(&Tensor::zeros(&[1, 1]), &cb).unwrap().0, vec![0]);
        assert!(Codebook::new(Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::new(Tensor::randn(&[64, 8], 1.0, &mut rng)).unwrap();
        let x = Tensor::randn(&[1000, 8], 1.0, &mut rng);
        let (idx, _) = quantize(&x, &cb).unwrap();
        for (t, &i) in idx.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..64 {
                let d: f64 = (0..8).map(|j| (x.row(t)[j] - cb.codewords.row(k)[j]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(i, best);
        }
    }

    fn loss_terms(c: &Tensor, cb: &Codebook, xi: f64) -> (f64, f64, f64, f64, Vec<usize>) {
        let mut store = ParamStore::new();
        let l = identity_layers(&mut store, c.cols());
        let mut g = Graph::new();
        let cv = g.input(c.clone(), false).unwrap();
        let o = vq_forward(&mut g, &store, &l, cv, QuantMode::Nearest(cb), xi).unwrap();
        (
            g.value(o.recon).item(),
            o.codebook_term,
            g.value(o.commit).item(),
            g.value(o.loss).item(),
            o.indices,
        )
    }

    #[test]
    fn hand_computed_instance() {
        // c = [[1,0],[0,2]], codewords [[1,1],[0,3]]: rows pick 0 and 1,
        // every squared error is 0 or 1, each term averages to 0.5.
        let c = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let cb = Codebook::new(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 3.0]).unwrap()).unwrap();
        let (r, b, m, total, idx) = loss_terms(&c, &cb, 0.1);
        assert_eq!(idx, vec![0, 1]);
        assert_eq!((r, b, m), (0.5, 0.5, 0.5));
        assert!((total - 1.05).abs() < 1e-15);
        let (r, b, _, total, _) = loss_terms(&c, &cb, 0.0);
        assert_eq!(total, r + b);
    }

    #[test]
    fn perfect_quantization_gives_zero_loss() {
        let c = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 3.0]).unwrap();
        let cb = Codebook::new(c.clone()).unwrap();
        let (r, b, m, total, _) = loss_terms(&c, &cb, 0.1);
        assert_eq!((r, b, m, total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn negative_xi_is_rejected() {
        let mut store = ParamStore::new();
        let l = identity_layers(&mut store, 2);
        let cb = Codebook::new(Tensor::zeros(&[1, 2])).unwrap();
        let mut g = Graph::new();
        let c = g.input(Tensor::zeros(&[1, 2]), false).unwrap();
        assert!(vq_forward(&mut g, &store, &l, c, QuantMode::Nearest(&cb), -0.1).is_err());
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap(), true).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let st = g.straight_through(x, q.clone()).unwrap();
        assert_eq!(g.value(st), &q);
        let proj = Tensor::new(vec![1, 2], vec![3.0, -5.0]).unwrap();
        let l = projection_loss(&mut g, st, &proj).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &proj);
    }

    #[test]
    fn encoder_decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let l = VqLayers::new(&mut store, "vq", 6, 4, &mut rng);
        let c = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let cb = Codebook::new(Tensor::randn(&[8, 4], 1.0, &mut rng)).unwrap();
        let mut g = Graph::inference();
        let cv = g.constant(c.clone()).unwrap();
        let enc = l.encode(&mut g, &store, cv).unwrap();
        let (idx, q) = quantize(g.value(enc), &cb).unwrap();
        let mut offsets = q.clone();
        for (o, e) in offsets.data_mut().iter_mut().zip(g.value(enc).data()) {
            *o -= e;
        }
        let proj = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let rep = check_params(&store, None, &GradCheckConfig::default(), |g, s| {
            let cv = g.constant(c.clone())?;
            let o = vq_forward(
                g,
                s,
                &l,
                cv,
                QuantMode::Frozen {
                    indices: &idx,
                    quantized: &q,
                    offsets: &offsets,
                },
                0.1,
            )?;
            let p = projection_loss(g, o.decoded, &proj)?;
            let rc = g.add(o.recon, p)?;
            let wc = g.scale(o.commit, 0.1)?;
            g.add(rc, wc)
        })
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn ema_converges_geometrically_to_repeated_vector() {
        let cfg = VqConfig {
            codebook_size: 2,
            code_dim: 2,
            ..VqConfig::default()
        };
        let mut cb = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap()).unwrap();
        let mut ema = EmaState::new(&cb, &cfg);
        let v = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = cb.codewords.row(1).to_vec();
        for n in 1..=40 {
            ema.update(&mut cb, &v, &[0], &mut rng).unwrap();
            let gap = 0.99f64.powi(n);
            // Closed form: c_n - v = gamma^n (c_0 - v), up to smoothing drift.
            assert!((cb.codewords.row(0)[0] - (1.0 - gap)).abs() < 1e-4, "step {n}");
            assert!((cb.codewords.row(0)[1] - (-2.0 * (1.0 - gap))).abs() < 1e-4);
            for (a, b) in cb.codewords.row(1).iter().zip(&other) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn idle_codewords_restart_after_threshold() {
        let cfg = VqConfig {
            codebook_size: 2,
            code_dim: 1,
            restart_after: 3,
            ..VqConfig::default()
        };
        let mut cb = Codebook::new(Tensor::new(vec![2, 1], vec![0.0, 100.0]).unwrap()).unwrap();
        let mut ema = EmaState::new(&cb, &cfg);
        let x = Tensor::new(vec![2, 1], vec![0.1, -0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(ema.update(&mut cb, &x, &[0, 0], &mut rng).unwrap(), 0);
        assert_eq!(ema.update(&mut cb, &x, &[0, 0], &mut rng).unwrap(), 0);
        assert_eq!(ema.update(&mut cb, &x, &[0, 0], &mut rng).unwrap(), 1);
        assert!(cb.codewords.row(1)[0].abs() <= 0.1);
        assert!(ema.update(&mut cb, &x, &[0], &mut rng).is_err());
    }

    #[test]
    fn ema_stays_within_seen_norms() {
        let cfg = VqConfig {
            codebook_size: 8,
            code_dim: 3,
            ..VqConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Tensor::randn(&[200, 3], 1.0, &mut rng);
        let mut cb = init_codebook(&data, 8, &mut rng).unwrap();
        let mut ema = EmaState::new(&cb, &cfg);
        let max_norm = (0..200)
            .map(|i| data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        for _ in 0..100 {
            let (idx, _) = quantize(&data, &cb).unwrap();
            ema.update(&mut cb, &data, &idx, &mut rng).unwrap();
            for k in 0..8 {
                let n = cb.codewords.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n <= max_norm * (1.0 + 1e-3));
            }
        }
    }

    fn lloyd(data: &Tensor, init: Codebook) -> Codebook {
        let mut cb = init;
        for _ in 0..200 {
            let (idx, _) = quantize(data, &cb).unwrap();
            let mut sums = Tensor::zeros(cb.codewords.shape());
            let mut n = vec![0usize; cb.size()];
            for (t, &i) in idx.iter().enumerate() {
                n[i] += 1;
                for (s, v) in sums.row_mut(i).iter_mut().zip(data.row(t)) {
                    *s += v;
                }
            }
            let before = cb.clone();
            for k in 0..cb.size() {
                if n[k] > 0 {
                    for (c, s) in cb.codewords.row_mut(k).iter_mut().zip(sums.row(k)) {
                        *c = s / n[k] as f64;
                    }
                }
            }
            if cb == before {
                break;
            }
        }
        cb
    }

    pub(crate) fn quant_mse(data: &Tensor, cb: &Codebook) -> f64 {
        let (_, q) = quantize(data, cb).unwrap();
        data.data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn ema_codebook_is_close_to_kmeans_on_clustered_data() {
        let (clusters, dim) = (8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = Tensor::randn(&[clusters, dim], 5.0, &mut rng);
        let n = 4000;
        let mut data = Tensor::zeros(&[n, dim]);
        for i in 0..n {
            let c = rng.gen_range(0..clusters);
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.row_mut(i)[j] = centers.row(c)[j] + 0.5 * z;
            }
        }
        let oracle = (0..5)
            .map(|_| lloyd(&data, init_codebook(&data, clusters, &mut rng).unwrap()))
            .map(|cb| quant_mse(&data, &cb))
            .fold(f64::INFINITY, f64::min);

        let cfg = VqConfig {
            codebook_size: clusters,
            code_dim: dim,
            ..VqConfig::default()
        };
        let batch = |rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..256).map(|_| data.row(rng.gen_range(0..n)).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let first = batch(&mut rng);
        let mut cb = init_codebook(&first, clusters, &mut rng).unwrap();
        let mut ema = EmaState::new(&cb, &cfg);
        for _ in 0..600 {
            let b = batch(&mut rng);
            let (idx, _) = quantize(&b, &cb).unwrap();
            ema.update(&mut cb, &b, &idx, &mut rng).unwrap();
        }
        let got = quant_mse(&data, &cb);
        assert!(got <= 1.5 * oracle, "ema {got} vs k-means {oracle}");
    }
}
