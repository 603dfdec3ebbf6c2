//! Multi-task optimisation: masked-spectrum L1, VQ loss and N-token
//! cross-entropy, Adam plus EMA codebook steps, and the epoch loop with
//! validation, metrics log and checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::DatasetManifest;
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainingState};
use crate::config::Config;
use crate::dsp::{log1p_features, stft_samples};
use crate::enhance::enhance_batch;
use crate::error::{Error, Result};
use crate::eval::{si_sdr, token_accuracy};
use crate::model::{ForwardOptions, ModelInput, SeModel};
use crate::ssl::{load_external_features, SslFeatureStack};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

/// Mean absolute error between enhanced and clean log1p features.
pub fn se_loss(g: &mut Graph, enhanced: Var, clean: Var) -> Result<Var> {
    g.l1_loss(enhanced, clean)
}

/// Row `t*N + n` targets token `t + n + 1`; rows with `t >= T - N` are
/// ignored.
pub fn semantic_targets(indices: &[usize], n: usize) -> Result<Vec<Option<usize>>> {
    let t_len = indices.len();
    if n == 0 || t_len <= n {
        return Err(Error::NoValidPositions { frames: t_len, n });
    }
    let valid = t_len - n;
    Ok((0..t_len * n)
        .map(|r| {
            let (t, j) = (r / n, r % n);
            (t < valid).then(|| indices[t + j + 1])
        })
        .collect())
}

/// Mean negative log-likelihood of the future tokens. `logits` is
/// `T x (N*K)`; `indices` are treated as fixed labels.
pub fn semantic_ce_loss(g: &mut Graph, logits: Var, indices: &[usize], n: usize, k: usize) -> Result<Var> {
    let targets = semantic_targets(indices, n)?;
    let t_len = indices.len();
    let lg = g.reshape(logits, &[t_len * n, k])?;
    g.cross_entropy(lg, &targets)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_se: f64,
    pub l_vq: f64,
    pub vq_recon: f64,
    pub vq_codebook: f64,
    pub vq_commit: f64,
    pub l_ce: f64,
    pub total: f64,
    /// Mean next-N token accuracy of this batch.
    pub token_acc: f64,
}

/// One training or validation example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub input: ModelInput,
    /// Clean log1p features `Y'`.
    pub clean: Tensor,
    pub noisy_samples: Vec<f64>,
    pub clean_samples: Vec<f64>,
}

impl TrainItem {
    pub fn new(
        id: impl Into<String>,
        noisy: &[f64],
        clean: &[f64],
        config: &Config,
        external: Option<SslFeatureStack>,
    ) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(Error::InvalidArgument(format!(
                "noisy has {} samples, clean {}",
                noisy.len(),
                clean.len()
            )));
        }
        let (mut input, _) = ModelInput::from_samples(noisy, config)?;
        input.external = external;
        let clean_feats = log1p_features(&stft_samples(clean, &config.stft)?).values;
        Ok(Self {
            id: id.into(),
            input,
            clean: clean_feats,
            noisy_samples: noisy.to_vec(),
            clean_samples: clean.to_vec(),
        })
    }

    pub fn frames(&self) -> usize {
        self.input.len()
    }

    /// Feature-level crop; waveforms are left untouched.
    pub fn crop(&self, start: usize, end: usize) -> Self {
        Self {
            id: self.id.clone(),
            input: self.input.crop(start, end),
            clean: self.clean.slice_rows(start, end),
            noisy_samples: Vec::new(),
            clean_samples: Vec::new(),
        }
    }
}

/// Reads every manifest entry, with external features when configured.
pub fn load_items(manifest: &DatasetManifest, config: &Config) -> Result<Vec<TrainItem>> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    (0..manifest.len())
        .map(|i| {
            let u = manifest.read(i)?;
            let ext = match &config.ssl.external_features_path {
                Some(dir) => Some(load_external_features(dir.join(format!("{}.cse", u.id)))?),
                None => None,
            };
            TrainItem::new(u.id, &u.noisy.samples, &u.clean.samples, config, ext)
        })
        .collect()
}

/// Graph handles and values of the batch loss.
pub struct MtlOut {
    pub total: Var,
    pub l_se: Var,
    pub l_vq: Var,
    pub l_ce: Var,
    pub breakdown: LossBreakdown,
    /// Encoder outputs of every frame in the batch, row-stacked.
    pub encoded: Tensor,
    pub indices: Vec<usize>,
}

/// Records the weighted loss for `items` on `g`; per-item terms are
/// averaged before weighting.
pub fn mtl_loss(g: &mut Graph, model: &SeModel, items: &[&TrainItem], opts: ForwardOptions<'_>) -> Result<MtlOut> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let t = &model.config.train;
    let (n, k) = (model.n_predict(), model.codebook_size());
    let (mut se, mut vq, mut ce) = (Vec::new(), Vec::new(), Vec::new());
    let mut bd = LossBreakdown::default();
    let mut encoded = Vec::new();
    let mut indices = Vec::new();
    for item in items {
        let out = model.forward(g, &item.input, opts)?;
        let y = g.constant(item.clean.clone())?;
        se.push(se_loss(g, out.enhanced, y)?);
        vq.push(out.vq.loss);
        ce.push(semantic_ce_loss(g, out.logits, &out.vq.indices, n, k)?);
        bd.vq_recon += g.value(out.vq.recon).item();
        bd.vq_codebook += out.vq.codebook_term;
        bd.vq_commit += g.value(out.vq.commit).item();
        bd.token_acc += token_accuracy(g.value(out.logits), &out.vq.indices, n, k)?.mean;
        encoded.extend_from_slice(g.value(out.vq.encoded).data());
        indices.extend_from_slice(&out.vq.indices);
    }
    let b = items.len() as f64;
    let l_se = batch_mean(g, &se)?;
    let l_vq = batch_mean(g, &vq)?;
    let l_ce = batch_mean(g, &ce)?;
    let a = g.scale(l_se, t.lambda_se)?;
    let v = g.scale(l_vq, t.lambda_vq)?;
    let c = g.scale(l_ce, t.lambda_ce)?;
    let total = g.add(a, v)?;
    let total = g.add(total, c)?;
    bd.l_se = g.value(l_se).item();
    bd.l_vq = g.value(l_vq).item();
    bd.l_ce = g.value(l_ce).item();
    bd.total = g.value(total).item();
    bd.vq_recon /= b;
    bd.vq_codebook /= b;
    bd.vq_commit /= b;
    bd.token_acc /= b;
    let rows = indices.len();
    Ok(MtlOut {
        total,
        l_se,
        l_vq,
        l_ce,
        breakdown: bd,
        encoded: Tensor::new(vec![rows, model.config.vq.code_dim], encoded)?,
        indices,
    })
}

fn batch_mean(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}

/// One optimisation step: forward, backward, Adam, then EMA codebook
/// update. Seeds the codebook from this batch if it is not ready.
pub fn mtl_step(
    model: &mut SeModel,
    adam: &mut AdamState,
    items: &[&TrainItem],
    step_seed: u64,
) -> Result<LossBreakdown> {
    if !model.codebook_ready {
        let inputs: Vec<&ModelInput> = items.iter().map(|i| &i.input).collect();
        model.init_codebook(&inputs, model.config.train.seed)?;
    }
    let mut g = Graph::new();
    let out = mtl_loss(&mut g, model, items, ForwardOptions::default())?;
    let grads = g.backward(out.total)?;
    adam.step(&mut model.store, &grads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let SeModel { ema, codebook, .. } = model;
    ema.update(codebook, &out.encoded, &out.indices, &mut rng)?;
    Ok(out.breakdown)
}

pub fn new_adam(model: &SeModel) -> AdamState {
    AdamState::new(
        &model.store,
        AdamConfig {
            lr: model.config.train.lr,
            ..AdamConfig::default()
        },
    )
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Model, optimizer and position in the schedule. Every random choice is
/// derived from `(seed, epoch, step)` so a restored trainer continues
/// exactly where the saved one stopped.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SeModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
}

impl Trainer {
    pub fn new(model: SeModel) -> Self {
        let adam = new_adam(&model);
        Self {
            model,
            adam,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            best_val: None,
        }
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// Shuffled item order for `epoch`, split into batches.
    pub fn epoch_batches(&self, items: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config().train.seed, 1, epoch as u64));
        order.shuffle(&mut rng);
        order.chunks(self.config().train.batch).map(<[usize]>::to_vec).collect()
    }

    fn cropped(&self, items: &[TrainItem], idx: usize) -> TrainItem {
        let item = &items[idx];
        let crop = self.config().train.crop_frames;
        let t = item.frames();
        if t <= crop {
            return item.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config().train.seed, 2 + idx as u64, self.epoch as u64));
        let start = rng.gen_range(0..=t - crop);
        item.crop(start, start + crop)
    }

    /// Runs the next scheduled step. Returns the losses and whether the
    /// step finished an epoch.
    pub fn step(&mut self, items: &[TrainItem]) -> Result<(LossBreakdown, bool)> {
        if items.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let batches = self.epoch_batches(items.len(), self.epoch);
        let batch: Vec<TrainItem> = batches[self.step_in_epoch]
            .iter()
            .map(|&i| self.cropped(items, i))
            .collect();
        let refs: Vec<&TrainItem> = batch.iter().collect();
        let seed = mix(self.config().train.seed, 3, self.global_step);
        let bd = mtl_step(&mut self.model, &mut self.adam, &refs, seed)?;
        self.global_step += 1;
        self.step_in_epoch += 1;
        let done = self.step_in_epoch == batches.len();
        if done {
            self.epoch += 1;
            self.step_in_epoch = 0;
        }
        Ok((bd, done))
    }

    /// Runs steps until the current epoch ends; returns the step losses.
    pub fn run_epoch(&mut self, items: &[TrainItem]) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::new();
        loop {
            let (bd, done) = self.step(items)?;
            out.push(bd);
            if done {
                return Ok(out);
            }
        }
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            adam: self.adam.clone(),
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            global_step: self.global_step,
            best_val: self.best_val,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.state()))
    }

    /// Restores a trainer; the checkpoint must carry optimizer state.
    pub fn load(path: impl AsRef<Path>, requested: Option<&Config>) -> Result<Self> {
        let path = path.as_ref();
        let (model, state) = load_checkpoint(path, requested)?;
        let state = state.ok_or_else(|| Error::MissingTensor("adam.step".into()))?;
        Ok(Self {
            model,
            adam: state.adam,
            epoch: state.epoch,
            step_in_epoch: state.step_in_epoch,
            global_step: state.global_step,
            best_val: state.best_val,
        })
    }
}

/// Validation pass over full-length utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub l_se: f64,
    pub l_vq: f64,
    pub l_ce: f64,
    pub total: f64,
    pub si_sdr: f64,
    pub noisy_si_sdr: f64,
    pub token_acc: f64,
}

pub fn validate(model: &SeModel, items: &[TrainItem]) -> Result<Validation> {
    if items.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut v = Validation {
        l_se: 0.0,
        l_vq: 0.0,
        l_ce: 0.0,
        total: 0.0,
        si_sdr: 0.0,
        noisy_si_sdr: 0.0,
        token_acc: 0.0,
    };
    for item in items {
        let mut g = Graph::inference();
        let out = mtl_loss(&mut g, model, &[item], ForwardOptions::default())?;
        let b = out.breakdown;
        v.l_se += b.l_se;
        v.l_vq += b.l_vq;
        v.l_ce += b.l_ce;
        v.total += b.total;
        v.token_acc += b.token_acc;
        if !item.noisy_samples.is_empty() {
            let enh = enhance_batch(model, &item.noisy_samples, item.input.external.clone(), false)?;
            v.si_sdr += si_sdr(&item.clean_samples, &enh.samples)?;
            v.noisy_si_sdr += si_sdr(&item.clean_samples, &item.noisy_samples)?;
        }
    }
    let n = items.len() as f64;
    for x in [
        &mut v.l_se,
        &mut v.l_vq,
        &mut v.l_ce,
        &mut v.total,
        &mut v.si_sdr,
        &mut v.noisy_si_sdr,
        &mut v.token_acc,
    ] {
        *x /= n;
    }
    Ok(v)
}

/// Per-epoch summary passed to the progress callback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossBreakdown,
    pub validation: Validation,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub metrics: PathBuf,
    pub epochs: Vec<EpochSummary>,
}

pub struct TrainLoop<'a> {
    pub out_dir: &'a Path,
    pub train: &'a [TrainItem],
    pub val: &'a [TrainItem],
    pub resume: Option<&'a Path>,
}

/// Trains to `train.epochs`, validating after each epoch. Appends one
/// JSON line per validation pass to `metrics.jsonl` and keeps
/// `last.ckpt` and `best.ckpt` (highest validation SI-SDR).
pub fn train_loop(
    config: &Config,
    spec: TrainLoop<'_>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    if spec.train.is_empty() {
        return Err(Error::EmptyManifest);
    }
    std::fs::create_dir_all(spec.out_dir).map_err(|e| Error::io(spec.out_dir, e))?;
    let last = spec.out_dir.join("last.ckpt");
    let best = spec.out_dir.join("best.ckpt");
    let metrics = spec.out_dir.join("metrics.jsonl");
    let mut trainer = match spec.resume {
        Some(p) => Trainer::load(p, Some(config))?,
        None => {
            std::fs::write(&metrics, b"").map_err(|e| Error::io(&metrics, e))?;
            Trainer::new(SeModel::new(config)?)
        }
    };
    let n = trainer.config().model.n_predict;
    let mut epochs = Vec::new();
    while trainer.epoch < config.train.epochs {
        let epoch = trainer.epoch;
        let steps = trainer.run_epoch(spec.train)?;
        let mut train = LossBreakdown::default();
        for s in &steps {
            train.l_se += s.l_se;
            train.l_vq += s.l_vq;
            train.vq_recon += s.vq_recon;
            train.vq_codebook += s.vq_codebook;
            train.vq_commit += s.vq_commit;
            train.l_ce += s.l_ce;
            train.total += s.total;
            train.token_acc += s.token_acc;
        }
        let k = steps.len() as f64;
        for x in [
            &mut train.l_se,
            &mut train.l_vq,
            &mut train.vq_recon,
            &mut train.vq_codebook,
            &mut train.vq_commit,
            &mut train.l_ce,
            &mut train.total,
            &mut train.token_acc,
        ] {
            *x /= k;
        }
        let val_items = if spec.val.is_empty() { spec.train } else { spec.val };
        let validation = validate(&trainer.model, val_items)?;
        let is_best = trainer.best_val.is_none_or(|b| validation.si_sdr > b);
        if is_best {
            trainer.best_val = Some(validation.si_sdr);
        }
        let mut line = serde_json::json!({
            "epoch": epoch + 1,
            "l_se": validation.l_se,
            "l_vq": validation.l_vq,
            "l_ce": validation.l_ce,
            "total": validation.total,
            "si_sdr": validation.si_sdr,
        });
        line[format!("token_acc@{n}")] = validation.token_acc.into();
        line["train_total"] = train.total.into();
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics)
            .map_err(|e| Error::io(&metrics, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&metrics, e))?;
        trainer.save(&last)?;
        if is_best {
            trainer.save(&best)?;
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            steps: steps.len(),
            train,
            validation,
            best: is_best,
        };
        progress(&summary);
        epochs.push(summary);
    }
    if !best.exists() {
        trainer.save(&best)?;
    }
    if !last.exists() {
        trainer.save(&last)?;
    }
    Ok(TrainOutcome {
        last,
        best,
        metrics,
        epochs,
    })
}

/// Splits items into (train, validation): the first `val_count` entries
/// validate when no separate set is given.
pub fn split_validation(mut items: Vec<TrainItem>, val_count: usize) -> (Vec<TrainItem>, Vec<TrainItem>) {
    if items.len() <= 1 || val_count == 0 {
        let val = items.clone();
        return (items, val);
    }
    let k = val_count.min(items.len() / 2).max(1);
    let train = items.split_off(k);
    (train, items)
}
