//! Training loop: synthetic pairs → model → loss → Adam, with checkpoints
//! and a JSONL loss log.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::decode::decode_single;
use crate::error::{Error, Result};
use crate::evalkit::{loc_err, rot_err, Level};
use crate::imaging::{save_image, Image};
use crate::loss::{total_loss, LossReport};
use crate::model::{Model, ModelConfig, OutputMaps};
use crate::synth::dataset::ImageCorpus;
use crate::synth::{make_labels, sigma_for, LabelMaps, PairConfig, TrainingPair};
use crate::tensornet::{read_weight_file, write_weight_file, AdamConfig, NamedTensor, WeightFile};

pub const EMA_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Pairs per step, accumulated one at a time.
    pub batch: usize,
    pub lr: f64,
    pub level: Level,
    pub template_size: (usize, usize),
    pub search_size: (usize, usize),
    pub angle_range: (f64, f64),
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            level: Level::S1,
            template_size: (36, 36),
            search_size: (128, 128),
            angle_range: (-180.0, 180.0),
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted as a null update.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("steps and batch must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        let (_, hi) = self.level.scale_range();
        if hi > self.model.s_max {
            return Err(Error::invalid(format!(
                "level {} reaches scale {hi}, above s_max {}",
                self.level, self.model.s_max
            )));
        }
        self.model.validate()
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            template_size: Some(self.template_size),
            search_size: self.search_size,
            scale_range: Some(self.level.scale_range()),
            angle_range: self.angle_range,
            ..Default::default()
        }
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone)]
pub enum PairSource {
    /// Fresh pairs drawn from source images; pair `i` uses stream `i`.
    Corpus { corpus: ImageCorpus, pair: PairConfig },
    /// A fixed list, cycled.
    Pairs(Vec<TrainingPair>),
}

impl PairSource {
    pub fn get(&self, seed: u64, index: u64) -> Result<TrainingPair> {
        match self {
            PairSource::Corpus { corpus, pair } => corpus.pair(seed, index, pair),
            PairSource::Pairs(list) if list.is_empty() => Err(Error::invalid("no training pairs")),
            PairSource::Pairs(list) => Ok(list[(index % list.len() as u64) as usize].clone()),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Batch means of the loss terms (`n_pos` summed).
    #[serde(flatten)]
    pub loss: LossReport,
    pub ema_total: f64,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        center: avg(|r| r.center),
        cos_l1: avg(|r| r.cos_l1),
        sign_ce: avg(|r| r.sign_ce),
        sx_l1: avg(|r| r.sx_l1),
        sy_l1: avg(|r| r.sy_l1),
        total: avg(|r| r.total),
        n_pos: reports.iter().map(|r| r.n_pos).sum(),
        empty_mask: reports.iter().any(|r| r.empty_mask),
    }
}

type Batch = Vec<(TrainingPair, LabelMaps)>;

/// Model plus optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model<f32>,
    step: usize,
    ema: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model, cfg.seed)?;
        Ok(Trainer {
            cfg,
            model,
            step: 0,
            ema: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// One optimizer step on an already-built batch. Weights are left
    /// untouched when the loss or the update is non-finite.
    fn apply(&mut self, batch: &Batch) -> Result<StepLog> {
        let step = self.step + 1;
        self.model.params_mut().zero_grad();
        let mut reports = Vec::with_capacity(batch.len());
        for (pair, labels) in batch {
            let cache = self.model.forward_train(&pair.template, &pair.search)?;
            let (report, grads) = total_loss(cache.outputs(), labels)?;
            if !report.total.is_finite() {
                log::error!("non-finite loss at step {step}: {report:?}");
                return Err(Error::NonFiniteLoss { step });
            }
            self.model.backward(&cache, &grads)?;
            reports.push(report);
        }
        let before = self.model.params().clone();
        let params = self.model.params_mut();
        params.scale_grads(1.0 / batch.len() as f32);
        params.adam_step(&AdamConfig {
            lr: self.cfg.lr,
            ..Default::default()
        })?;
        if !params.params().iter().all(|p| p.value.all_finite()) {
            *self.model.params_mut() = before;
            log::error!("update at step {step} produced non-finite weights");
            return Err(Error::NonFiniteLoss { step });
        }
        self.model.params_mut().zero_grad();
        let loss = mean_report(&reports);
        let ema = match self.ema {
            None => loss.total,
            Some(e) => (1.0 - EMA_ALPHA) * e + EMA_ALPHA * loss.total,
        };
        self.ema = Some(ema);
        self.step = step;
        Ok(StepLog {
            step,
            loss,
            ema_total: ema,
        })
    }

    /// Trains until `cfg.steps`, generating the next batch on a worker
    /// thread while the current one trains. `on_step` sees every log line;
    /// checkpoints go to `checkpoint_dir` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        source: &PairSource,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<()> {
        let (start, end) = (self.step, self.cfg.steps);
        if start >= end {
            return Ok(());
        }
        let (tx, rx) = sync_channel::<Result<Batch>>(1);
        let producer = BatchMaker { cfg: self.cfg.clone() };
        std::thread::scope(|s| {
            s.spawn(move || {
                for step in start..end {
                    let b = producer.make_batch(source, step);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        break;
                    }
                }
            });
            let out = (|| {
                for batch in rx.iter() {
                    let log = self.apply(&batch?)?;
                    on_step(&log)?;
                    let every = self.cfg.checkpoint_every;
                    if let Some(dir) = checkpoint_dir {
                        if every > 0 && self.step % every == 0 {
                            self.save_checkpoint(&checkpoint_path(dir, self.step))?;
                        }
                    }
                    if self.step >= end {
                        break;
                    }
                }
                Ok(())
            })();
            // Unblocks the producer if training stopped early.
            drop(rx);
            out
        })
    }

    /// Writes weights to `path` and optimizer state to `path.opt`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut wf = self.model.to_weight_file()?;
        wf.meta["step"] = self.step.into();
        write_weight_file(path, &wf)?;
        let (adam_step, tensors) = self.model.params().optimizer_state().unwrap_or((0, Vec::new()));
        let side = WeightFile {
            meta: serde_json::json!({
                "step": self.step,
                "adam_step": adam_step,
                "ema_bits": self.ema.map(f64::to_bits),
                "train": self.cfg,
            }),
            tensors: tensors
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.into_data(),
                })
                .collect(),
        };
        write_weight_file(&sidecar_path(path), &side)
    }

    /// Restores a checkpoint. `cfg` must describe the same model; its
    /// `steps` may extend the original run.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::<f32>::load_weights(path)?;
        if model.config() != &cfg.model {
            return Err(Error::invalid("checkpoint model config differs from the training config"));
        }
        let side = read_weight_file(&sidecar_path(path))?;
        let meta_u64 = |k: &str| {
            side.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::WeightFormat(format!("optimizer sidecar lacks `{k}`")))
        };
        let step = meta_u64("step")? as usize;
        let adam_step = meta_u64("adam_step")?;
        let ema = side.meta.get("ema_bits").and_then(|v| v.as_u64()).map(f64::from_bits);
        if adam_step > 0 {
            let tensors: HashMap<String, Vec<f32>> =
                side.tensors.into_iter().map(|t| (t.name, t.data)).collect();
            model.params_mut().set_optimizer_state(adam_step, &tensors)?;
        }
        Ok(Trainer { cfg, model, step, ema })
    }
}

// The producer side only needs the config, so the model is never shared.
struct BatchMaker {
    cfg: TrainConfig,
}

impl BatchMaker {
    fn make_batch(&self, source: &PairSource, step: usize) -> Result<Batch> {
        let m = &self.cfg.model;
        (0..self.cfg.batch)
            .map(|b| {
                let pair = source.get(self.cfg.seed, (step * self.cfg.batch + b) as u64)?;
                let tsize = (pair.template.width(), pair.template.height());
                let labels = make_labels(
                    &[pair.gt],
                    tsize,
                    (pair.search.width(), pair.search.height()),
                    sigma_for(tsize, m.sigma_ratio),
                    m.s_max,
                )?;
                Ok((pair, labels))
            })
            .collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

/// Output locations for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub weights: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Full training run: optional resume, JSONL log (appended on resume),
/// final weights.
pub fn train(cfg: TrainConfig, source: &PairSource, out: &TrainOutputs) -> Result<(Model<f32>, Vec<StepLog>)> {
    let mut trainer = match &out.resume {
        Some(p) => Trainer::resume(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    let mut log_file = match &out.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(out.resume.is_some())
                .truncate(out.resume.is_none())
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut logs = Vec::new();
    let total = trainer.config().steps;
    trainer.run(source, out.checkpoint_dir.as_deref(), |l| {
        if l.step == 1 || l.step % 100 == 0 || l.step == total {
            log::info!("step {}/{total}: loss {:.4} (ema {:.4})", l.step, l.loss.total, l.ema_total);
        }
        if let Some((p, w)) = log_file.as_mut() {
            writeln!(w, "{}", serde_json::to_string(l)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        logs.push(l.clone());
        Ok(())
    })?;
    if let Some((p, mut w)) = log_file {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let model = trainer.into_model();
    if let Some(p) = &out.weights {
        model.save_weights(p)?;
    }
    Ok((model, logs))
}

/// Result of training on one frozen pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub steps: usize,
    pub center_err: f64,
    pub rot_err: f64,
    /// Whether the score argmax is the pixel nearest the true center.
    pub argmax_at_gt: bool,
    pub ema_at_10: f64,
    pub ema_final: f64,
}

impl OverfitReport {
    pub const MAX_CENTER_ERR: f64 = 3.0;
    pub const MAX_ROT_ERR: f64 = 15.0;

    pub fn passed(&self) -> bool {
        self.center_err <= Self::MAX_CENTER_ERR && self.rot_err < Self::MAX_ROT_ERR && self.ema_final < self.ema_at_10
    }
}

/// Trains on `pair` alone for `cfg.steps` steps and decodes it. On failure
/// the final maps are written as PNGs into `dump_dir` (if given) and an
/// error describing the miss is returned.
pub fn overfit_check(cfg: TrainConfig, pair: &TrainingPair, dump_dir: Option<&Path>) -> Result<OverfitReport> {
    let mut trainer = Trainer::new(cfg)?;
    let source = PairSource::Pairs(vec![pair.clone()]);
    let mut ema_at_10 = f64::NAN;
    trainer.run(&source, None, |l| {
        if l.step == 10 {
            ema_at_10 = l.ema_total;
        }
        Ok(())
    })?;
    let model = trainer.model();
    let maps = model.forward(&pair.template, &pair.search)?;
    let pred = decode_single(&maps, model.config().s_max)?;
    let (w, h) = (maps.width, maps.height);
    let gx = pair.gt.xc.round().clamp(0.0, (w - 1) as f64) as usize;
    let gy = pair.gt.yc.round().clamp(0.0, (h - 1) as f64) as usize;
    let report = OverfitReport {
        steps: trainer.step(),
        center_err: loc_err(&pair.gt, &pred.pose),
        rot_err: rot_err(&pair.gt, &pred.pose),
        argmax_at_gt: pred.pose.xc.round() as usize == gx && pred.pose.yc.round() as usize == gy,
        ema_at_10: if ema_at_10.is_nan() { trainer.ema().unwrap_or(f64::NAN) } else { ema_at_10 },
        ema_final: trainer.ema().unwrap_or(f64::NAN),
    };
    if !report.passed() {
        if let Some(dir) = dump_dir {
            dump_maps(&maps, dir)?;
        }
        return Err(Error::invalid(format!("overfit check failed: {report:?}")));
    }
    Ok(report)
}

/// Writes each output map as a grayscale PNG (`cos` shifted to `[0, 1]`).
pub fn dump_maps(maps: &OutputMaps<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named: [(&str, Vec<f32>); 5] = [
        ("score", maps.score.clone()),
        ("cos", maps.cos.iter().map(|v| (v + 1.0) / 2.0).collect()),
        ("sign", maps.sign.clone()),
        ("sx", maps.sx.clone()),
        ("sy", maps.sy.clone()),
    ];
    for (name, data) in named {
        let img = Image::from_vec(maps.width, maps.height, 1, data)?;
        save_image(&img, dir.join(format!("{name}.png")))?;
    }
    Ok(())
}
