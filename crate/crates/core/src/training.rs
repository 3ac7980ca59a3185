//! AdamW, the learning-rate schedule, the mixed-batch training loop, and
//! checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{sample_rng, BatchPlan};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{HeadSpec, Model, ModelConfig};
use crate::objectives::{pair_loss, text_loss, Objective, PrefixSampling};
use crate::parallel::{try_map, Exec};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};
use crate::tokenizer::Vocab;
use crate::vision::{random_resized_crop, Image};

/// Linear warmup from 0 to `peak` over the first `warmup_frac * total`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, warmup_frac: f64, peak: f64) -> f64 {
    let total_f = total as f64;
    let w = warmup_frac * total_f;
    let s = (step.min(total)) as f64;
    if s < w {
        peak * s / w
    } else if total_f > w {
        peak * (total_f - s) / (total_f - w)
    } else {
        peak
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub hp: AdamW,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>, hp: AdamW) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect::<Vec<_>>();
        OptimState { hp, step: 0, m: zeros(), v: zeros() }
    }

    /// Extend the moment lists for parameters added after construction.
    pub fn sync(&mut self, params: &ParamStore<T>) {
        for p in params.iter().skip(self.m.len()) {
            self.m.push(Tensor::zeros(p.tensor.shape()));
            self.v.push(Tensor::zeros(p.tensor.shape()));
        }
    }
}

/// One decoupled-decay Adam update: `p <- p(1 - lr wd)`, then
/// `p <- p - lr mhat / (sqrt(vhat) + eps)` with bias-corrected moments.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter().enumerate() {
        let p = params.get(id);
        if g.shape() != p.tensor.shape() || state.m[id].shape() != p.tensor.shape() {
            return Err(Error::ShapeConflict {
                name: p.name.clone(),
                expected: p.tensor.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let hp = state.hp;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let c1 = T::from_f64(1.0 / (1.0 - hp.beta1.powi(t)));
    let c2 = T::from_f64(1.0 / (1.0 - hp.beta2.powi(t)));
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(1.0 - lr * hp.weight_decay);
    let eps = T::from_f64(hp.eps);
    for (id, g) in grads.iter().enumerate() {
        let p = params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let (m, v) = (state.m[id].data_mut(), state.v[id].data_mut());
        for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::ONE - b1) * gi;
            *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            *w *= decay;
            *w -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x.to_f64() * x.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Evaluate per-sample losses in parallel (each on its own tape), then
/// average gradients in sample order. Returns the per-sample losses.
pub fn accumulate_gradients<T, S, F>(
    model: &Model<T>,
    samples: &[S],
    exec: Exec,
    loss_fn: F,
) -> Result<(Vec<f64>, Vec<Tensor<T>>)>
where
    T: Real,
    S: Sync,
    F: Fn(&mut Graph<'_, T>, usize, &S) -> Result<Var> + Sync + Send,
{
    let per_sample = try_map(exec, samples, |i, s| -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::with_params(&model.params);
        let loss = loss_fn(&mut g, i, s)?;
        let value = g.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?.param_grads(&g);
        Ok((value, grads))
    })?;
    let mut total: Vec<Tensor<T>> = model.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let mut losses = Vec::with_capacity(per_sample.len());
    let inv = T::from_f64(1.0 / samples.len().max(1) as f64);
    for (loss, grads) in per_sample {
        losses.push(loss);
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x * inv;
            }
        }
    }
    Ok((losses, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub optimizer: AdamW,
    pub pairs_per_batch: usize,
    pub docs_per_batch: usize,
    /// Objective for text-only documents; pairs always use PrefixLM.
    pub objective: Objective,
    pub prefix: PrefixSampling,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Random resized crop scale range; `None` disables augmentation.
    pub crop_scale: Option<[f64; 2]>,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            peak_lr: 5e-4,
            warmup_frac: 0.02,
            optimizer: AdamW::default(),
            pairs_per_batch: 16,
            docs_per_batch: 2,
            objective: Objective::PrefixLm,
            prefix: PrefixSampling::Uniform,
            seed: 0,
            grad_clip: None,
            crop_scale: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!("warmup_frac {} outside (0, 1)", self.warmup_frac)));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.pairs_per_batch + self.docs_per_batch == 0 {
            return Err(Error::Config("batch holds no samples".into()));
        }
        Ok(())
    }
}

/// Tokenized training data held in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub pairs: Vec<(Image, Vec<u32>)>,
    pub docs: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_pair: Option<f64>,
    pub loss_text: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

enum Item<'a> {
    Pair(&'a Image, &'a [u32]),
    Doc(&'a [u32]),
}

/// Pretraining state: model, optimizer, and the position in the batch
/// schedule.
pub struct Trainer<'d> {
    pub model: Model<f32>,
    pub opt: OptimState<f32>,
    pub cfg: TrainConfig,
    pub exec: Exec,
    data: &'d TrainData,
    vocab: &'d Vocab,
    plan: BatchPlan,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model<f32>, cfg: TrainConfig, data: &'d TrainData, vocab: &'d Vocab) -> Result<Self> {
        cfg.validate()?;
        let plan =
            BatchPlan::new(data.pairs.len(), data.docs.len(), cfg.pairs_per_batch, cfg.docs_per_batch, cfg.seed)?;
        let opt = OptimState::new(&model.params, cfg.optimizer);
        Ok(Trainer { model, opt, cfg, exec: Exec::available(), data, vocab, plan })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, data: &'d TrainData, vocab: &'d Vocab) -> Result<Self> {
        let model = ckpt.to_model(false)?;
        let mut t = Trainer::new(model, cfg, data, vocab)?;
        t.opt = ckpt.optimizer_state(&t.model.params)?;
        Ok(t)
    }

    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    pub fn done(&self) -> bool {
        self.opt.step >= self.cfg.steps
    }

    /// Run one optimizer step on the next mixed batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.opt.step;
        let lr = lr_at(step, self.cfg.steps, self.cfg.warmup_frac, self.cfg.peak_lr);
        let batch = self.plan.batch(step);
        let items: Vec<Item<'_>> = batch
            .pairs
            .iter()
            .map(|&i| Item::Pair(&self.data.pairs[i].0, &self.data.pairs[i].1))
            .chain(batch.docs.iter().map(|&i| Item::Doc(&self.data.docs[i])))
            .collect();
        let (model, cfg, vocab) = (&self.model, &self.cfg, self.vocab);
        let (losses, mut grads) = accumulate_gradients(model, &items, self.exec, |g, i, item| {
            let mut rng = sample_rng(cfg.seed, step, i);
            match item {
                Item::Pair(img, ids) => {
                    let img = match cfg.crop_scale {
                        Some([lo, hi]) => random_resized_crop(img, (img.height, img.width), (lo, hi), &mut rng)?,
                        None => (*img).clone(),
                    };
                    let x = g.constant(img.to_tensor());
                    pair_loss(model, g, cfg.prefix, x, ids, &mut rng)
                }
                Item::Doc(ids) => text_loss(model, g, cfg.objective, cfg.prefix, ids, vocab, &mut rng),
            }
        })?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NanLoss { step, batch: bad as u64 });
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adamw_step(&mut self.model.params, &grads, &mut self.opt, lr)?;
        let np = batch.pairs.len();
        Ok(StepMetrics { step, lr, loss_pair: mean(&losses[..np]), loss_text: mean(&losses[np..]) })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_training(&self.model, Some(&self.opt), self.cfg.seed)
    }

    /// Train to `cfg.steps`, appending metrics lines to `metrics` and
    /// writing `step_{n}.svlm` checkpoints into `ckpt_dir` when configured.
    pub fn run(&mut self, metrics: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<()> {
        while !self.done() {
            let m = self.step()?;
            serde_json::to_writer(&mut *metrics, &m)?;
            metrics.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
            if let (Some(every), Some(dir)) = (self.cfg.checkpoint_every, ckpt_dir) {
                if every > 0 && self.opt.step.is_multiple_of(every) {
                    self.checkpoint().save(&dir.join(format!("step_{}.svlm", self.opt.step)))?;
                }
            }
        }
        metrics.flush().map_err(|e| Error::io("<metrics>", e))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const MAGIC: &[u8; 4] = b"SVLM";
pub const VERSION: u32 = 1;

/// Metadata stored as the config JSON block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub heads: Vec<HeadSpec>,
    pub step: u64,
    /// Master seed; with `step` it fixes every later batch and sample draw.
    pub seed: u64,
    pub optimizer: Option<AdamW>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model parameters then optimizer moments (`opt.m.*`, `opt.v.*`).
    pub records: Vec<(String, StoredTensor)>,
}

/// What [`Checkpoint::restore`] did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RestoreReport {
    pub restored: usize,
    /// Model parameters left at their fresh initialization.
    pub fresh: Vec<String>,
    /// Checkpoint records with no matching parameter.
    pub ignored: Vec<String>,
}

impl Checkpoint {
    pub fn from_training<T: Real>(model: &Model<T>, opt: Option<&OptimState<T>>, seed: u64) -> Self {
        let mut records: Vec<(String, StoredTensor)> =
            model.params.iter().map(|p| (p.name.clone(), StoredTensor::from_real(&p.tensor))).collect();
        if let Some(o) = opt {
            for (p, m) in model.params.iter().zip(&o.m) {
                records.push((format!("opt.m.{}", p.name), StoredTensor::from_real(m)));
            }
            for (p, v) in model.params.iter().zip(&o.v) {
                records.push((format!("opt.v.{}", p.name), StoredTensor::from_real(v)));
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                heads: model.heads().cloned().collect(),
                step: opt.map_or(0, |o| o.step),
                seed,
                optimizer: opt.map(|o| o.hp),
            },
            records,
        }
    }

    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        Self::from_training(model, None, 0)
    }

    fn record(&self, name: &str) -> Option<&StoredTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy matching tensors into `model`. Without `allow_partial`, any
    /// missing or unknown parameter is an error; shape conflicts always are.
    pub fn restore<T: Real>(&self, model: &mut Model<T>, allow_partial: bool) -> Result<RestoreReport> {
        let mut report = RestoreReport::default();
        for (name, t) in &self.records {
            if name.starts_with("opt.") {
                continue;
            }
            match model.params.by_name_mut(name) {
                Some(p) => {
                    if p.tensor.shape() != t.shape() {
                        return Err(Error::ShapeConflict {
                            name: name.clone(),
                            expected: p.tensor.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                    p.tensor = t.to_real();
                    report.restored += 1;
                }
                None if allow_partial => report.ignored.push(name.clone()),
                None => return Err(Error::UnknownParameter(name.clone())),
            }
        }
        for p in model.params.iter() {
            if self.record(&p.name).is_none() {
                if !allow_partial {
                    return Err(Error::MissingParameter(p.name.clone()));
                }
                report.fresh.push(p.name.clone());
            }
        }
        Ok(report)
    }

    /// Rebuild the model (with its heads) and restore every tensor.
    pub fn to_model<T: Real>(&self, allow_partial: bool) -> Result<Model<T>> {
        let mut model = Model::new(self.meta.model.clone(), 0)?;
        for h in &self.meta.heads {
            model.add_head(h.clone(), 0)?;
        }
        self.restore(&mut model, allow_partial)?;
        Ok(model)
    }

    pub fn optimizer_state<T: Real>(&self, params: &ParamStore<T>) -> Result<OptimState<T>> {
        let hp = self.meta.optimizer.ok_or_else(|| Error::MissingParameter("optimizer state".into()))?;
        let mut st = OptimState::new(params, hp);
        st.step = self.meta.step;
        for (id, p) in params.iter().enumerate() {
            for (prefix, slot) in [("opt.m.", &mut st.m[id]), ("opt.v.", &mut st.v[id])] {
                let name = format!("{prefix}{}", p.name);
                let t = self.record(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::ShapeConflict {
                        name,
                        expected: p.tensor.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                *slot = t.to_real();
            }
        }
        Ok(st)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        if bytes.len() < 4 + 4 + 8 + 4 {
            return Err(Error::Truncated("header".into()));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len, body_end, "config block")?;
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
        let mut records = Vec::new();
        while r.pos < body_end {
            let n = r.u32_within(body_end)? as usize;
            let name = String::from_utf8(r.take(n, body_end, "record name")?.to_vec())
                .map_err(|_| Error::Truncated("record name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.take(1, body_end, "dtype")?[0])
                .ok_or_else(|| Error::Truncated(format!("bad dtype for {name}")))?;
            let rank = r.take(1, body_end, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, body_end, "dims")?.try_into().expect("8 bytes"));
                shape.push(d as usize);
            }
            let count: usize = shape.iter().product();
            let payload = r.take(count * dtype.size(), body_end, &name)?;
            let t = match dtype {
                DType::F32 => {
                    StoredTensor::F32(Tensor::new(shape.clone(), payload.chunks(4).map(f32::read_le).collect())?)
                }
                DType::F64 => {
                    StoredTensor::F64(Tensor::new(shape.clone(), payload.chunks(8).map(f64::read_le).collect())?)
                }
            };
            records.push((name, t));
        }
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, end: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos.checked_add(n).is_none_or(|e| e > end) {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.bytes.len();
        Ok(u32::from_le_bytes(self.take(4, end, "version")?.try_into().expect("4 bytes")))
    }

    fn u32_within(&mut self, end: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, end, "record header")?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let end = self.bytes.len();
        Ok(u64::from_le_bytes(self.take(8, end, "config length")?.try_into().expect("8 bytes")))
    }
}
