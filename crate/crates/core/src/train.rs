//! The two-stage training protocol and evaluation over a dataset.
//!
//! Stage one fits the parsing estimator to the ground-truth masks with an
//! L1 loss. Stage two trains the super-resolver on L1 against the HR
//! images, consuming the parsing maps the (by default frozen) estimator
//! predicts. Batches are assembled by seeded shuffling without
//! replacement per epoch, so a (seed, config, dataset) triple fixes the
//! whole run bit for bit.

use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fio;
use crate::metrics::{self, MetricReport, MetricRow};
use crate::networks::{FishFsrNet, ModelConfig, ParsingNet};
use crate::optim::AdamState;
use crate::params::{Forward, ParameterStore};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Which network a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Parsing,
    Sr,
}

impl TrainStage {
    pub fn label(&self) -> &'static str {
        match self {
            TrainStage::Parsing => "parsing",
            TrainStage::Sr => "sr",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (in addition to the final
    /// one) when a directory is set.
    pub ckpt_interval: Option<usize>,
    pub ckpt_dir: Option<PathBuf>,
    /// Stage two only: keep training the parsing estimator jointly
    /// instead of freezing it.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 200,
            lr: 1e-4,
            seed: 0,
            ckpt_interval: None,
            ckpt_dir: None,
            joint: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::config("batch size and max steps must be >= 1"));
        }
        Ok(())
    }
}

/// One loss-trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub stage: &'static str,
    pub loss: f64,
}

/// Per-step losses, recorded before each update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.stage, r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Seeded epoch shuffling without replacement.
struct BatchPlan {
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl BatchPlan {
    fn new(n: usize, seed: u64) -> Self {
        let mut plan = BatchPlan { order: (0..n).collect(), cursor: 0, rng: SplitMix64::new(seed) };
        plan.reshuffle();
        plan
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Stack per-sample tensors along the batch dimension.
fn stack(tensors: &[&Tensor<f32>]) -> Tensor<f32> {
    let s = tensors[0].shape();
    let mut out = Tensor::zeros(Shape::new(tensors.len() * s.n, s.c, s.h, s.w));
    let stride = s.numel();
    for (i, t) in tensors.iter().enumerate() {
        debug_assert_eq!(t.shape(), s);
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(t.data());
    }
    out
}

fn checkpoint_path(dir: &Path, stage: TrainStage, tag: &str) -> PathBuf {
    dir.join(format!("{}_{tag}.fckp", stage.label()))
}

/// Location of the final checkpoint a stage writes under `dir`.
pub fn final_checkpoint_path(dir: &Path, stage: TrainStage) -> PathBuf {
    checkpoint_path(dir, stage, "final")
}

struct CheckpointSink<'a> {
    cfg: &'a TrainConfig,
    model_cfg: &'a ModelConfig,
    stage: TrainStage,
    written: Vec<PathBuf>,
}

impl<'a> CheckpointSink<'a> {
    fn new(cfg: &'a TrainConfig, model_cfg: &'a ModelConfig, stage: TrainStage) -> Result<Self> {
        if let Some(dir) = &cfg.ckpt_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(CheckpointSink { cfg, model_cfg, stage, written: Vec::new() })
    }

    fn maybe_write(&mut self, step: usize, store: &ParameterStore<f32>) -> Result<()> {
        let (Some(dir), Some(interval)) = (&self.cfg.ckpt_dir, self.cfg.ckpt_interval) else {
            return Ok(());
        };
        if (step + 1) % interval == 0 {
            let path = checkpoint_path(dir, self.stage, &format!("step{:06}", step + 1));
            fio::write_checkpoint(&path, self.model_cfg, store)?;
            self.written.push(path);
        }
        Ok(())
    }

    fn write_final(&mut self, store: &ParameterStore<f32>) -> Result<()> {
        if let Some(dir) = &self.cfg.ckpt_dir {
            let path = final_checkpoint_path(dir, self.stage);
            fio::write_checkpoint(&path, self.model_cfg, store)?;
            self.written.push(path);
        }
        Ok(())
    }
}

/// Outcome of one training stage.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    pub checkpoints: Vec<PathBuf>,
}

/// Fit the parsing estimator to the ground-truth masks.
pub fn train_parsingnet(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &[Sample],
    parsingnet: &ParsingNet,
    store: &mut ParameterStore<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    store.set_trainable_by_prefix("parsingnet.");
    let mut adam = AdamState::new(store, cfg.lr);
    let mut plan = BatchPlan::new(dataset.len(), cfg.seed);
    let mut trace = LossTrace::default();
    let mut sink = CheckpointSink::new(cfg, model_cfg, TrainStage::Parsing)?;

    for step in 0..cfg.max_steps {
        let batch = plan.next_batch(cfg.batch_size);
        let lr = stack(&batch.iter().map(|&i| &dataset[i].lr).collect::<Vec<_>>());
        let gt = stack(&batch.iter().map(|&i| &dataset[i].parsing_gt).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let mut fx = Forward::new(&mut tape, store, true);
        let x = fx.tape.constant(lr);
        let y = fx.tape.constant(gt);
        let pred = parsingnet.forward(&mut fx, x)?;
        let loss = fx.tape.l1_loss(pred, y)?;
        let loss_value = fx.tape.scalar_value(loss) as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { step });
        }
        trace.rows.push(TraceRow { step, stage: TrainStage::Parsing.label(), loss: loss_value });
        fx.tape.backward(loss)?;
        let grads = fx.take_grads();
        drop(tape);
        adam.step(store, grads)?;
        sink.maybe_write(step, store)?;
    }
    sink.write_final(store)?;
    Ok(TrainOutcome { trace, checkpoints: sink.written })
}

/// Train the super-resolver against HR ground truth, using the parsing
/// maps predicted by the estimator. With `cfg.joint` unset the estimator
/// is frozen: its prediction happens on a gradient-free tape and its
/// parameters cannot move.
pub fn train_fishfsrnet(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &[Sample],
    parsingnet: &ParsingNet,
    fish: &FishFsrNet,
    store: &mut ParameterStore<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let scale = fish.config().scale;
    for s in dataset {
        let (hs, ls) = (s.hr.shape(), s.lr.shape());
        if hs.h != ls.h * scale || hs.w != ls.w * scale {
            return Err(Error::config(format!(
                "sample {} is {}x{} over {}x{}, not the configured x{scale}",
                s.id, hs.h, hs.w, ls.h, ls.w
            )));
        }
    }
    if cfg.joint {
        store.set_all_trainable(true);
    } else {
        store.set_trainable_by_prefix("fish.");
    }
    let mut adam = AdamState::new(store, cfg.lr);
    let mut plan = BatchPlan::new(dataset.len(), cfg.seed);
    let mut trace = LossTrace::default();
    let mut sink = CheckpointSink::new(cfg, model_cfg, TrainStage::Sr)?;

    for step in 0..cfg.max_steps {
        let batch = plan.next_batch(cfg.batch_size);
        let lr = stack(&batch.iter().map(|&i| &dataset[i].lr).collect::<Vec<_>>());
        let hr = stack(&batch.iter().map(|&i| &dataset[i].hr).collect::<Vec<_>>());

        let (loss_value, grads) = if cfg.joint {
            let mut tape = Tape::new();
            let mut fx = Forward::new(&mut tape, store, true);
            let x = fx.tape.constant(lr);
            let y = fx.tape.constant(hr);
            let map = parsingnet.forward(&mut fx, x)?;
            let sr = fish.forward(&mut fx, x, map)?;
            let loss = fx.tape.l1_loss(sr, y)?;
            let v = fx.tape.scalar_value(loss) as f64;
            if v.is_finite() {
                fx.tape.backward(loss)?;
            }
            (v, fx.take_grads())
        } else {
            // frozen estimator: predict on a gradient-free tape
            let map = {
                let mut tape = Tape::new();
                let mut fx = Forward::new(&mut tape, store, false);
                let x = fx.tape.constant(lr.clone());
                let p = parsingnet.forward(&mut fx, x)?;
                fx.tape.value(p)
            };
            let mut tape = Tape::new();
            let mut fx = Forward::new(&mut tape, store, true);
            let x = fx.tape.constant(lr);
            let y = fx.tape.constant(hr);
            let m = fx.tape.constant(map);
            let sr = fish.forward(&mut fx, x, m)?;
            let loss = fx.tape.l1_loss(sr, y)?;
            let v = fx.tape.scalar_value(loss) as f64;
            if v.is_finite() {
                fx.tape.backward(loss)?;
            }
            (v, fx.take_grads())
        };
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { step });
        }
        trace.rows.push(TraceRow { step, stage: TrainStage::Sr.label(), loss: loss_value });
        adam.step(store, grads)?;
        sink.maybe_write(step, store)?;
    }
    sink.write_final(store)?;
    Ok(TrainOutcome { trace, checkpoints: sink.written })
}

/// Super-resolve one LR image with an explicit parsing map.
pub fn infer_with_map(
    fish: &FishFsrNet,
    store: &ParameterStore<f32>,
    lr: &Tensor<f32>,
    map: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, store, false);
    let x = fx.tape.constant(lr.clone());
    let m = fx.tape.constant(map.clone());
    let sr = fish.forward(&mut fx, x, m)?;
    Ok(tape.value(sr))
}

/// Predict the parsing map for one LR image.
pub fn predict_map(
    parsingnet: &ParsingNet,
    store: &ParameterStore<f32>,
    lr: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, store, false);
    let x = fx.tape.constant(lr.clone());
    let p = parsingnet.forward(&mut fx, x)?;
    Ok(tape.value(p))
}

/// Evaluate the full pipeline over a dataset: PSNR and SSIM on the
/// [0, 255] luma of the clamped SR output, parsing accuracy of the
/// estimator against the ground-truth masks.
pub fn evaluate(
    parsingnet: &ParsingNet,
    fish: &FishFsrNet,
    store: &ParameterStore<f32>,
    dataset: &[Sample],
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let map = predict_map(parsingnet, store, &sample.lr)?;
        let sr = infer_with_map(fish, store, &sample.lr, &map)?;
        let sr_y = metrics::rgb_to_y(&sr.clamp01())?.map(|v| v * 255.0);
        let hr_y = metrics::rgb_to_y(&sample.hr)?.map(|v| v * 255.0);
        rows.push(MetricRow {
            id: sample.id.clone(),
            psnr: metrics::psnr(&sr_y, &hr_y, 255.0)?,
            ssim: metrics::ssim(&sr_y, &hr_y, 255.0)?,
            parsing_acc: metrics::parsing_accuracy(&map, &sample.parsing_gt)?,
        });
    }
    Ok(MetricReport::from_rows(rows))
}

/// Mean Y-channel PSNR of the pipeline over a dataset, with the map
/// override applied to every sample (used by the perturbation checks).
pub fn psnr_with_maps(
    fish: &FishFsrNet,
    store: &ParameterStore<f32>,
    dataset: &[Sample],
    maps: &[Tensor<f32>],
) -> Result<f64> {
    let mut total = 0.0;
    for (sample, map) in dataset.iter().zip(maps) {
        let sr = infer_with_map(fish, store, &sample.lr, map)?;
        let sr_y = metrics::rgb_to_y(&sr.clamp01())?.map(|v| v * 255.0);
        let hr_y = metrics::rgb_to_y(&sample.hr)?.map(|v| v * 255.0);
        total += metrics::psnr(&sr_y, &hr_y, 255.0)?;
    }
    Ok(total / dataset.len() as f64)
}
