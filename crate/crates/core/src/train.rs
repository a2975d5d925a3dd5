//! AdamW with warmup + cosine schedule, the deterministic training loop,
//! count evaluation with density stratification, and the ablation grid.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{partition_by_count, read_manifest, SceneRecord, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::image::{read_density, read_image, DensityMap, Image};
use crate::model::{prepare_exemplars, Model, ModelConfig, PreparedInput};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_mae,val_rmse";
pub const STATE_MAGIC: &[u8; 4] = b"CVTS";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::desk()
    }
}

impl OptimConfig {
    pub fn reference() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 200,
            warmup_epochs: 10,
            clip_norm: 0.0,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        OptimConfig { lr: 1e-3, batch_size: 4, epochs: 16, warmup_epochs: 3, ..OptimConfig::reference() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 10] = [
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "epochs",
        "warmup_epochs",
        "clip_norm",
        "train_seed",
    ];

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let v = [
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.warmup_epochs.to_string(),
            self.clip_norm.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().zip(v).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; returns `Ok(false)` when the key is not an optimizer key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("{key}: cannot parse {value:?}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "lr" => self.lr = real()?,
            "weight_decay" => self.weight_decay = real()?,
            "beta1" => self.beta1 = real()?,
            "beta2" => self.beta2 = real()?,
            "eps" => self.eps = real()?,
            "batch_size" => self.batch_size = int()?,
            "epochs" => self.epochs = int()?,
            "warmup_epochs" => self.warmup_epochs = int()?,
            "clip_norm" => self.clip_norm = real()?,
            "train_seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update at `lr` (already scheduled). `state.step` is advanced to
/// the 1-based step index used for bias correction.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adamw: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Config(format!("adamw: tensor {i} has {} values but {} gradients", p.len(), g.len())));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in tensor {i} at index {j}; step aborted")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *x -= lr * (update + cfg.weight_decay * *x);
        }
    }
    Ok(())
}

/// Learning-rate multiplier at (fractional) `epoch`: linear 0→1 over the
/// warmup, then cosine 1→0 reaching 0 at `epochs`.
pub fn lr_schedule(epoch: f64, cfg: &OptimConfig) -> f64 {
    let w = cfg.warmup_epochs as f64;
    let total = cfg.epochs as f64;
    if epoch < w {
        return epoch / w;
    }
    let t = ((epoch - w) / (total - w)).clamp(0.0, 1.0);
    0.5 * (1.0 + (PI * t).cos())
}

/// One loaded scene.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub density: DensityMap,
    pub record: SceneRecord,
}

impl Sample {
    pub fn count(&self) -> f64 {
        self.record.count() as f64
    }
}

/// Loads every scene listed in `dir/manifest.tsv`.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = dir.join(MANIFEST_NAME);
    if !manifest.is_file() {
        return Err(Error::Data(format!(
            "no dataset at {}: {} is missing (generate one with `cacvit gen-data`)",
            dir.display(),
            manifest.display()
        )));
    }
    read_manifest(&manifest)?
        .into_iter()
        .map(|record| {
            let image = read_image(&dir.join(&record.image_path))?;
            let density = read_density(&dir.join(&record.density_path))?;
            let name = record.image_path.display().to_string();
            Ok(Sample { name, image, density, record })
        })
        .collect()
}

/// Model inputs for each sample, using its first `k_shots` exemplar boxes.
pub fn prepare_samples(model: &Model, samples: &[Sample]) -> Result<Vec<PreparedInput>> {
    samples
        .iter()
        .map(|s| {
            let mut boxes = s.record.exemplar_boxes();
            if boxes.is_empty() {
                return Err(Error::Data(format!("{}: scene has no exemplar boxes", s.name)));
            }
            boxes.truncate(model.cfg.k_shots);
            let ex = prepare_exemplars(&s.image, &boxes, &model.cfg)?;
            model.prepare(&s.image, &ex)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub gt: f64,
    pub pred: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub rows: Vec<EvalRow>,
    pub threshold: Option<f64>,
    pub low: Option<Box<EvalReport>>,
    pub high: Option<Box<EvalReport>>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> EvalReport {
        let n = rows.len().max(1) as f64;
        let mae = rows.iter().map(|r| (r.pred - r.gt).abs()).sum::<f64>() / n;
        let mse = rows.iter().map(|r| (r.pred - r.gt).powi(2)).sum::<f64>() / n;
        EvalReport { mae, rmse: mse.sqrt(), rows, threshold: None, low: None, high: None }
    }

    /// Adds low (`gt <= threshold`) and high sub-reports; an empty bucket is left out.
    pub fn stratified(rows: Vec<EvalRow>, threshold: f64) -> EvalReport {
        let (low, high) = partition_by_count(&rows, |r| r.gt, threshold);
        let sub = |r: Vec<EvalRow>| (!r.is_empty()).then(|| Box::new(EvalReport::from_rows(r)));
        EvalReport { threshold: Some(threshold), low: sub(low), high: sub(high), ..EvalReport::from_rows(rows) }
    }

    pub fn is_single_bucket(&self) -> bool {
        self.threshold.is_some() && (self.low.is_none() || self.high.is_none())
    }

    /// `image,gt,pred,abs_err` rows, then `#`-prefixed summary lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,gt,pred,abs_err\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.image, r.gt, r.pred, (r.pred - r.gt).abs());
        }
        let _ = writeln!(out, "# all n={} mae={} rmse={}", self.rows.len(), self.mae, self.rmse);
        if let Some(t) = self.threshold {
            for (label, sub) in [("low", &self.low), ("high", &self.high)] {
                match sub {
                    Some(s) => {
                        let _ = writeln!(out, "# {label} threshold={t} n={} mae={} rmse={}", s.rows.len(), s.mae, s.rmse);
                    }
                    None => {
                        let _ = writeln!(out, "# {label} threshold={t} n=0");
                    }
                }
            }
        }
        out
    }
}

pub fn predict_counts(model: &Model, inputs: &[PreparedInput]) -> Result<Vec<f64>> {
    inputs.iter().map(|p| model.forward_prepared(p, false).map(|o| o.count)).collect()
}

/// Count metrics over `samples`, stratified at `threshold` when given. Rows
/// are sorted by image name. Rows
/// are sorted by image name.
pub fn evaluate(model: &Model, samples: &[Sample], threshold: Option<f64>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let preds = predict_counts(model, &prepare_samples(model, samples)?)?;
    let mut rows: Vec<EvalRow> = samples
        .iter()
        .zip(preds)
        .map(|(s, pred)| EvalRow { image: s.name.clone(), gt: s.count(), pred })
        .collect();
    rows.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(match threshold {
        Some(t) => EvalReport::stratified(rows, t),
        None => EvalReport::from_rows(rows),
    })
}

/// MAE of always predicting the mean training count.
pub fn mean_baseline_mae(train: &[Sample], val: &[Sample]) -> f64 {
    let mean = train.iter().map(Sample::count).sum::<f64>() / train.len() as f64;
    val.iter().map(|s| (s.count() - mean).abs()).sum::<f64>() / val.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_mae, r.val_rmse);
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("metrics CSV must start with {METRICS_HEADER:?}")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("malformed metrics row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_mae: f[2].parse().map_err(|_| bad())?,
                val_rmse: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory receiving `best.ckpt`, `metrics.csv` and `state.bin`.
    pub out_dir: PathBuf,
    /// Continue from `out_dir/state.bin`.
    pub resume: bool,
    /// Stop after this many completed epochs (the state file allows resuming).
    pub stop_after: Option<usize>,
}

pub struct TrainResult {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// Model restored from the best checkpoint.
    pub best: Model,
    pub last: Model,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.bin";

struct Progress {
    epochs_done: usize,
    best_val_mae: f64,
    best_epoch: usize,
    metrics: Vec<EpochMetrics>,
}

fn encode_state(model: &Model, opt: &AdamState, p: &Progress) -> Vec<u8> {
    let mut buf = STATE_MAGIC.to_vec();
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    let cfg: String = model.cfg.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let text = metrics_csv(&p.metrics);
    for block in [cfg.as_bytes(), text.as_bytes()] {
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        buf.extend_from_slice(block);
    }
    for v in [p.epochs_done as u64, p.best_epoch as u64, opt.step] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&p.best_val_mae.to_le_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (i, (_, t)) in params.iter().enumerate() {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for src in [t.data(), &opt.m[i], &opt.v[i]] {
            for x in src {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("training state truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, dst: &mut [f64]) -> Result<()> {
        let src = self.take(8 * dst.len())?;
        for (d, b) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(())
    }
}

fn decode_state(bytes: &[u8], model: &mut Model, opt: &mut AdamState) -> Result<Progress> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != STATE_MAGIC {
        return Err(Error::Format("missing CVTS magic".into()));
    }
    if c.take(4)? != STATE_VERSION.to_le_bytes() {
        return Err(Error::Format("unsupported training state version".into()));
    }
    let mut blocks = Vec::new();
    for _ in 0..2 {
        let n = c.u64()? as usize;
        blocks.push(String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Format("state text is not UTF-8".into()))?);
    }
    let cfg: String = model.cfg.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    if blocks[0] != cfg {
        return Err(Error::Config("training state was written for a different model configuration".into()));
    }
    let metrics = parse_metrics_csv(&blocks[1])?;
    let epochs_done = c.u64()? as usize;
    let best_epoch = c.u64()? as usize;
    opt.step = c.u64()?;
    let best_val_mae = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let count = c.u64()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Format(format!("state holds {count} tensors, model has {}", params.len())));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let n = c.u64()? as usize;
        if n != p.len() {
            return Err(Error::Format(format!("state tensor {i} has {n} values, model tensor {}", p.len())));
        }
        c.f64s(p.data_mut())?;
        c.f64s(&mut opt.m[i])?;
        c.f64s(&mut opt.v[i])?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after training state".into()));
    }
    Ok(Progress { epochs_done, best_val_mae, best_epoch, metrics })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. Every epoch visits the training set in a
/// permutation drawn from `optim.seed` and the epoch index, accumulates
/// per-sample gradients in that fixed order, and keeps the checkpoint with the
/// lowest validation MAE. `on_epoch` sees each epoch's metrics.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    optim: &OptimConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainResult> {
    optim.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let train_inputs = prepare_samples(model, train_set)?;
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamState::new(&sizes);
    let mut progress = Progress { epochs_done: 0, best_val_mae: f64::INFINITY, best_epoch: 0, metrics: Vec::new() };
    let state_path = opts.out_dir.join(STATE_FILE);
    if opts.resume {
        let bytes = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
        progress = decode_state(&bytes, model, &mut opt)?;
    }

    let n_batches = train_set.len().div_ceil(optim.batch_size);
    let mut val_inputs: Option<Vec<PreparedInput>> = None;
    while progress.epochs_done < optim.epochs {
        if opts.stop_after.is_some_and(|s| progress.epochs_done >= s) {
            break;
        }
        let epoch = progress.epochs_done;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(optim.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
            for &i in batch {
                let (loss, grads) = model.loss_and_grads(&train_inputs[i], &train_set[i].density).map_err(|e| match e {
                    Error::NonFinite { .. } | Error::Numerical(_) => {
                        Error::Numerical(format!("epoch {epoch} batch {b}: {e}"))
                    }
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {epoch} batch {b}")));
                }
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= scale);
            if optim.clip_norm > 0.0 {
                let norm = acc.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > optim.clip_norm {
                    let s = optim.clip_norm / norm;
                    acc.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            let t = epoch as f64 + (b as f64 + 0.5) / n_batches as f64;
            let lr = optim.lr * lr_schedule(t, optim);
            adamw_step(&mut model.params_mut(), &acc, &mut opt, optim, lr)
                .map_err(|e| Error::Numerical(format!("epoch {epoch} batch {b}: {e}")))?;
        }

        let vi = match &val_inputs {
            Some(v) => v,
            None => val_inputs.insert(prepare_samples(model, val_set)?),
        };
        let preds = predict_counts(model, vi)?;
        let rows = val_set.iter().zip(preds).map(|(s, pred)| EvalRow { image: s.name.clone(), gt: s.count(), pred }).collect();
        let report = EvalReport::from_rows(rows);
        let m = EpochMetrics { epoch, train_loss: loss_sum / train_set.len() as f64, val_mae: report.mae, val_rmse: report.rmse };
        on_epoch(&m);
        if m.val_mae < progress.best_val_mae {
            progress.best_val_mae = m.val_mae;
            progress.best_epoch = epoch;
            write_file(&opts.out_dir.join(BEST_CHECKPOINT), &model.checkpoint_bytes())?;
        }
        progress.metrics.push(m);
        progress.epochs_done += 1;
        write_file(&opts.out_dir.join(METRICS_FILE), metrics_csv(&progress.metrics).as_bytes())?;
        write_file(&state_path, &encode_state(model, &opt, &progress))?;
    }

    let best_path = opts.out_dir.join(BEST_CHECKPOINT);
    let best_bytes = fs::read(&best_path).map_err(|e| Error::io(&best_path, e))?;
    Ok(TrainResult {
        metrics: progress.metrics,
        best_epoch: progress.best_epoch,
        best_val_mae: progress.best_val_mae,
        best: Model::from_checkpoint(&best_bytes)?,
        last: model.clone(),
    })
}

/// Mean of `values` over a trailing window of `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub use_cls: bool,
    pub use_se: bool,
    pub use_me: bool,
    pub val_mae: f64,
    pub val_rmse: f64,
}

pub const ABLATION_HEADER: &str = "row,cls,se,me,val_mae,val_rmse";

/// The five toggle combinations B1–B5: none, CLS, CLS+SE, CLS+ME, CLS+SE+ME.
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [(false, false, false), (true, false, false), (true, true, false), (true, false, true), (true, true, true)]
        .iter()
        .enumerate()
        .map(|(i, &(cls, se, me))| {
            (format!("B{}", i + 1), ModelConfig { use_cls: cls, use_se: se, use_me: me, ..base.clone() })
        })
        .collect()
}

/// Trains one grid row in `out_dir/<row>` and evaluates its best checkpoint on `val`.
pub fn run_ablation_row(
    name: &str,
    cfg: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    optim: &OptimConfig,
    out_dir: &Path,
) -> Result<AblationRow> {
    let mut model = Model::new(cfg.clone())?;
    let opts = TrainOptions { out_dir: out_dir.join(name), ..TrainOptions::default() };
    let result = train(&mut model, train_set, val_set, optim, &opts, |_| {})?;
    let report = evaluate(&result.best, val_set, None)?;
    Ok(AblationRow {
        name: name.to_string(),
        use_cls: cfg.use_cls,
        use_se: cfg.use_se,
        use_me: cfg.use_me,
        val_mae: report.mae,
        val_rmse: report.rmse,
    })
}

/// Trains and evaluates every grid row with the same seeds and data order.
pub fn ablation_grid(
    base: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    optim: &OptimConfig,
    out_dir: &Path,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let row = run_ablation_row(&name, &cfg, train_set, val_set, optim, out_dir)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.name, r.use_cls, r.use_se, r.use_me, r.val_mae, r.val_rmse);
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(Error::Format(format!("ablation CSV must start with {ABLATION_HEADER:?}")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("malformed ablation row {l:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(AblationRow {
                name: f[0].to_string(),
                use_cls: f[1].parse().map_err(|_| bad())?,
                use_se: f[2].parse().map_err(|_| bad())?,
                use_me: f[3].parse().map_err(|_| bad())?,
                val_mae: f[4].parse().map_err(|_| bad())?,
                val_rmse: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
