//! Losses, metrics, optimizer, checkpoints and the training loop.

mod checkpoint;
mod loss;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointEntry, Payload, CHECKPOINT_VERSION, CONFIG_ENTRY};
pub use loss::{depth_loss, edge_loss, total_loss, LossTerms, LossWeights};
pub use metrics::{metrics, EvalReport, MetricAccumulator, RelDenominator};
pub use optim::{poly_lr, sgd_update, Sgd};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, make_edge_target, sample_rng, stack, AugmentConfig, DepthSample, EDGE_THRESHOLD};
use crate::error::{ensure, Error, Result};
use crate::model::{parse, parse_kv, parse_list, EgdNet, ModelConfig};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub power: f64,
    pub max_epoch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub edge_threshold: f64,
    pub augment: bool,
    pub augment_cfg: AugmentConfig,
    pub rel_denominator: RelDenominator,
    /// Write `epoch_NNN.egdc` every this many epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_lr: 0.01,
            power: 0.9,
            max_epoch: 25,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            edge_threshold: EDGE_THRESHOLD,
            augment: true,
            augment_cfg: AugmentConfig::default(),
            rel_denominator: RelDenominator::GroundTruth,
            checkpoint_every: 1,
            max_steps: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "init_lr",
    "power",
    "max_epoch",
    "batch_size",
    "momentum",
    "weight_decay",
    "seed",
    "lambda1",
    "lambda2",
    "edge_threshold",
    "augment",
    "flip_prob",
    "rotation",
    "jitter",
    "rel_denominator",
    "checkpoint_every",
    "max_steps",
];

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("`{key}` needs two comma-separated values"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(self.init_lr > 0.0) {
            return err("init_lr must be positive");
        }
        if !(self.power > 0.0) {
            return err("power must be positive");
        }
        if self.max_epoch == 0 || self.batch_size == 0 {
            return err("max_epoch and batch_size must be at least 1");
        }
        if self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 {
            return err("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return err("momentum must be in [0,1) and weight_decay non-negative");
        }
        self.augment_cfg.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "init_lr" => self.init_lr = parse(key, value)?,
            "power" => self.power = parse(key, value)?,
            "max_epoch" => self.max_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda1" => self.weights.lambda1 = parse(key, value)?,
            "lambda2" => self.weights.lambda2 = parse(key, value)?,
            "edge_threshold" => self.edge_threshold = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "flip_prob" => self.augment_cfg.flip_prob = parse(key, value)?,
            "rotation" => self.augment_cfg.rotation = pair(key, value)?,
            "jitter" => self.augment_cfg.jitter = pair(key, value)?,
            "rel_denominator" => self.rel_denominator = value.parse().map_err(Error::Config)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let a = &self.augment_cfg;
        let _ = writeln!(s, "init_lr = {}", self.init_lr);
        let _ = writeln!(s, "power = {}", self.power);
        let _ = writeln!(s, "max_epoch = {}", self.max_epoch);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda1 = {}", self.weights.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.weights.lambda2);
        let _ = writeln!(s, "edge_threshold = {}", self.edge_threshold);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "flip_prob = {}", a.flip_prob);
        let _ = writeln!(s, "rotation = {},{}", a.rotation.0, a.rotation.1);
        let _ = writeln!(s, "jitter = {},{}", a.jitter.0, a.jitter.1);
        let _ = writeln!(s, "rel_denominator = {}", self.rel_denominator);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        if let Some(m) = self.max_steps {
            let _ = writeln!(s, "max_steps = {m}");
        }
        s
    }
}

/// Model and training settings read from one `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses model and training keys; any other key is an error.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_kv(text)? {
            if !cfg.model.apply(&key, &value)? && !cfg.train.apply(&key, &value)? {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_kv_text(&self) -> String {
        format!("{}{}", self.model.to_kv_text(), self.train.to_kv_text())
    }
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub depth: f64,
    pub edge: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub steps: usize,
    pub log: Vec<StepLog>,
    pub sgd: Sgd<T>,
    pub checkpoint: Checkpoint,
    pub written: Vec<PathBuf>,
}

/// Edge targets for a batch, shaped like the edge logits.
pub fn edge_targets<T: Scalar>(samples: &[DepthSample], threshold: f64) -> Result<Tensor<T>> {
    let (w, h) = (samples[0].width, samples[0].height);
    let mut out = Vec::with_capacity(samples.len() * (h / 2) * (w / 2));
    for s in samples {
        let t = make_edge_target(&s.depth, &s.valid, h, w, threshold)?;
        out.extend(t.into_iter().map(|v| T::lit(v as f64)));
    }
    Tensor::from_vec(out, &[samples.len(), 1, h / 2, w / 2])
}

/// Forward, loss and backward on one batch. Gradients accumulate on the
/// model's parameter tensors.
pub fn batch_loss<T: Scalar>(model: &EgdNet<T>, samples: &[DepthSample], cfg: &TrainConfig) -> Result<LossTerms<T>> {
    let batch = stack::<T>(samples)?;
    let target = edge_targets::<T>(samples, cfg.edge_threshold)?;
    let out = model.forward(&batch.rgb, Mode::Train)?;
    total_loss(&out.depth, &batch.depth, &out.edge_logits, &target, &batch.mask, cfg.weights)
}

fn augment_batch(
    data: &[DepthSample],
    idx: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    workers: usize,
) -> Vec<DepthSample> {
    let one = |i: usize| {
        if cfg.augment {
            augment(&data[i], &cfg.augment_cfg, &mut sample_rng(cfg.seed, epoch, i))
        } else {
            data[i].clone()
        }
    };
    if workers <= 1 || idx.len() <= 1 || !cfg.augment {
        return idx.iter().map(|&i| one(i)).collect();
    }
    let chunk = idx.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| one(i)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("augment worker")).collect()
    })
}

/// Runs SGD over `data`, reshuffling every epoch. Each sample's augmentation
/// stream depends only on (seed, epoch, index), so results do not depend on
/// `workers`. Checkpoints go to `out_dir` when given.
pub fn train<T: Scalar>(
    model: &EgdNet<T>,
    cfg: &TrainConfig,
    data: &[DepthSample],
    out_dir: Option<&Path>,
    workers: usize,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "train: empty dataset");
    let (w, h) = (model.cfg.input_width, model.cfg.input_height);
    ensure!(
        data.iter().all(|s| (s.width, s.height) == (w, h)),
        "train: samples must be {w}x{h} to match the model config"
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut written = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.max_epoch {
        let lr = poly_lr(epoch, cfg.init_lr, cfg.max_epoch, cfg.power)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(u64::MAX - epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch = augment_batch(data, idx, cfg, epoch, workers);
            let terms = batch_loss(model, &batch, cfg)?;
            let total = terms.total.item()?.to_f64().unwrap_or(f64::NAN);
            if !total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            terms.total.backward()?;
            sgd.step(&model.vs, lr)?;
            let entry = StepLog {
                epoch,
                step,
                lr,
                total,
                depth: terms.depth.item()?.to_f64().unwrap_or(f64::NAN),
                edge: terms.edge.item()?.to_f64().unwrap_or(f64::NAN),
            };
            log::info!(
                "epoch {epoch} step {step} lr {lr:.6} loss {:.5} depth {:.5} edge {:.5}",
                entry.total,
                entry.depth,
                entry.edge
            );
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{:03}.egdc", epoch + 1));
                Checkpoint::capture(model, Some(&sgd)).save(&path)?;
                written.push(path);
            }
        }
    }
    let checkpoint = Checkpoint::capture(model, Some(&sgd));
    if let Some(dir) = out_dir {
        let path = dir.join("final.egdc");
        checkpoint.save(&path)?;
        written.push(path);
    }
    Ok(TrainOutcome {
        steps: step,
        log,
        sgd,
        checkpoint,
        written,
    })
}

/// Eval-mode prediction, clamped to the model's depth range, scored over
/// every valid pixel of every sample.
pub fn evaluate<T: Scalar>(model: &EgdNet<T>, data: &[DepthSample], denominator: RelDenominator) -> Result<EvalReport> {
    ensure!(!data.is_empty(), "evaluate: empty dataset");
    let mut acc = MetricAccumulator::new(denominator);
    for chunk in data.chunks(8) {
        let batch = stack::<T>(chunk)?;
        let pred = model.predict_depth(&batch.rgb)?;
        let p: Vec<f64> = pred.to_f64_vec();
        let g: Vec<f64> = batch.depth.to_f64_vec();
        acc.add(&p, &g, &batch.mask)?;
    }
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn run_config_parses_both_sections() {
        let cfg = RunConfig::from_kv_text("input_width = 64\ninput_height = 48\ninit_lr = 0.05 # faster\nrotation = -2,2\n").unwrap();
        assert_eq!(cfg.model.input_width, 64);
        assert_eq!(cfg.train.init_lr, 0.05);
        assert_eq!(cfg.train.augment_cfg.rotation, (-2.0, 2.0));
        assert_eq!(RunConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
        assert!(RunConfig::from_kv_text("learning_rate = 0.1").is_err());
        assert!(RunConfig::from_kv_text("init_lr = -1").is_err());
        assert!(RunConfig::from_kv_text("rel_denominator = both").is_err());
    }

    #[test]
    fn one_epoch_of_eight_is_one_step() {
        let data = synth_generate(1, 8, 32, 32).unwrap();
        let model = EgdNet::<f32>::new(ModelConfig::tiny(32, 32), 0).unwrap();
        let cfg = TrainConfig {
            max_epoch: 1,
            ..TrainConfig::default()
        };
        let out = train(&model, &cfg, &data, None, 1, |_| {}).unwrap();
        assert_eq!(out.steps, 1);
        assert!(out.log[0].total.is_finite());
    }

    #[test]
    fn evaluation_counts_valid_pixels() {
        let mut data = synth_generate(2, 1, 32, 32).unwrap();
        data[0].valid[0] = false;
        let model = EgdNet::<f32>::new(ModelConfig::tiny(32, 32), 0).unwrap();
        let r = evaluate(&model, &data, RelDenominator::GroundTruth).unwrap();
        assert_eq!(r.n_valid_pixels, 32 * 32 - 1);
        assert_eq!(evaluate(&model, &data, RelDenominator::GroundTruth).unwrap(), r);
    }
}
