//! Seeded training loop, evaluation, and the Sync × CTC ablation grid.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{f1_score, levenshtein, perplexity};
use crate::corpus::{Dataset, Label, Manifest, Mode, Sample, World};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle};
use crate::model::{save_checkpoint, EncoderConfig, LossSetup, LossTerm, Model, ModelConfig, SyncVariant};
use crate::params::Gradients;
use crate::seed;
use crate::tensor::Mat;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub lambda: f64,
    pub sync_variant: SyncVariant,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Defaults to `<out>/data` when run from the command line.
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate and checkpoint every N epochs; 0 means only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Word,
            alpha: 0.1,
            lambda: 1.0,
            sync_variant: SyncVariant::Full,
            mask_ratio: 0.3,
            epochs: 40,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_epochs: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            data_dir: None,
            checkpoint_dir: None,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::Config(s));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.sync_variant == SyncVariant::Masked && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.peak_lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("optimizer hyperparameters out of range".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        Ok(())
    }

    /// Objective weights actually in force (λ is ignored with sync off).
    pub fn loss_setup(&self) -> LossSetup {
        LossSetup {
            alpha: self.alpha,
            lambda: if self.sync_variant == SyncVariant::Off { 0.0 } else { self.lambda },
            variant: self.sync_variant,
        }
    }
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Sizes the model for a world and a token alphabet.
pub fn encoder_config(model: &ModelConfig, world: &World, manifest: &Manifest) -> EncoderConfig {
    let wc = &world.config;
    EncoderConfig {
        model: model.clone(),
        visual_dim: wc.visual_dim,
        sync_vocab: manifest.token_vocab,
        classes: world.num_words(),
        graphemes: world.num_graphemes(),
        max_transcript: 2 + wc.dataset.max_sentence_words * (wc.max_word_len + 1),
    }
}

/// Frames replaced by the mask embedding: `max(1, round(ratio·T))` distinct
/// positions drawn from the sample's mask stream.
pub fn draw_frame_mask(num_frames: usize, ratio: f64, base_seed: u64, epoch: usize, index: usize) -> Vec<bool> {
    let k = ((ratio * num_frames as f64).round() as usize).clamp(1, num_frames);
    let mut rng = seed::rng(base_seed, &[seed::MASK, epoch as u64, index as u64]);
    let mut mask = vec![false; num_frames];
    for t in rand::seq::index::sample(&mut rng, num_frames, k) {
        mask[t] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub l_task: f64,
    pub l_sync: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub eval_metric: Option<EvalMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetric {
    pub name: String,
    pub value: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = model.params.zero_grads().0;
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = model.params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        model.params.round_to_f32();
    }
}

fn check_compatible(cfg: &TrainConfig, model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("split '{}' is empty", data.manifest.split)));
    }
    if data.manifest.mode != cfg.mode {
        return Err(Error::Config(format!(
            "train.mode is {:?} but the dataset is {:?}",
            cfg.mode, data.manifest.mode
        )));
    }
    if data.manifest.token_vocab != model.config.sync_vocab || data.manifest.visual_dim != model.config.visual_dim {
        return Err(Error::CheckpointMismatch(format!(
            "model expects {} tokens / {} features, dataset has {} / {}",
            model.config.sync_vocab, model.config.visual_dim, data.manifest.token_vocab, data.manifest.visual_dim
        )));
    }
    Ok(())
}

/// Trains `model` in place. With `out` set, writes `metrics.jsonl`,
/// periodic `epoch_NNN.ckpt` files and `final.ckpt` there.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    world: &World,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(cfg, &model, train_set)?;
    if let Some(e) = eval_set {
        check_compatible(cfg, &model, e)?;
    }
    let setup = cfg.loss_setup();
    let pad = train_set.manifest.pad_id;
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let ckpt_dir = out.map(|d| cfg.checkpoint_dir.clone().unwrap_or_else(|| d.to_path_buf()));
    let meta = serde_json::json!({
        "train": cfg,
        "train_split": train_set.manifest.content_hash(),
        "eval_split": eval_set.map(|e| e.manifest.content_hash()),
        "world_fingerprint": world.fingerprint(),
    });

    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut lr = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &[seed::SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum_task, mut sum_sync) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossBundle, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set.samples[i];
                    let mut drop = seed::rng(cfg.seed, &[seed::DROPOUT, epoch as u64, i as u64]);
                    let mask = (setup.variant == SyncVariant::Masked)
                        .then(|| draw_frame_mask(s.num_frames, cfg.mask_ratio, cfg.seed, epoch, i));
                    model.loss_and_grad(s, &setup, LossTerm::Total, Some(&mut drop), mask.as_deref(), pad)
                })
                .collect();
            let mut grads = model.params.zero_grads();
            for (r, &i) in results.into_iter().zip(batch) {
                let (b, g) = r?;
                if !b.l_total.is_finite() || !g.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("sample {i}: task {} sync {}", b.l_task, b.l_sync),
                    });
                }
                sum_task += b.l_task;
                sum_sync += b.l_sync;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            lr = lr_schedule(step + 1, warmup_steps, total_steps, cfg.peak_lr);
            adam.step(&mut model, &grads, cfg, lr);
            step += 1;
        }
        if !model.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: "parameters diverged".into(),
            });
        }

        let last = epoch + 1 == cfg.epochs;
        let checkpoint_now = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let eval_metric = match eval_set {
            Some(e) if checkpoint_now => Some(evaluate(&model, e, world)?.headline()),
            _ => None,
        };
        let l_task = sum_task / n as f64;
        let l_sync = sum_sync / n as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            steps: step,
            lr,
            l_task,
            l_sync,
            l_total: losses::total_loss(l_task, l_sync, setup.lambda)?,
            lambda: setup.lambda,
            eval_metric,
        };
        if let Some((w, p)) = &mut metrics {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let (Some(dir), true) = (&ckpt_dir, checkpoint_now) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let name = if last { FINAL_CHECKPOINT.to_string() } else { format!("epoch_{:03}.ckpt", epoch + 1) };
            save_checkpoint(&dir.join(name), &model, cfg.seed, &meta)?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub mode: Mode,
    pub samples: usize,
    /// SHA-256 of the evaluated split's manifest.
    pub split_hash: String,
    pub top1: Option<f64>,
    /// Indexed by word id; words absent from the split score 0.
    pub per_word_f1: Option<Vec<f64>>,
    /// Top-1 restricted to samples whose label belongs to a homophene pair.
    pub homophene_top1: Option<f64>,
    pub predictions: Option<Vec<usize>>,
    pub wer: Option<f64>,
    pub mean_lm_loss: Option<f64>,
    pub perplexity: Option<f64>,
}

impl MetricsReport {
    fn headline(&self) -> EvalMetric {
        match self.mode {
            Mode::Word => EvalMetric {
                name: "top1".into(),
                value: self.top1.unwrap_or(f64::NAN),
            },
            Mode::Sentence => EvalMetric {
                name: "wer".into(),
                value: self.wer.unwrap_or(f64::NAN),
            },
        }
    }
}

fn split_words(graphemes: &[u16], sep: u16) -> Vec<&[u16]> {
    graphemes.split(|&g| g == sep).filter(|w| !w.is_empty()).collect()
}

/// Read-only evaluation of `model` on a split.
pub fn evaluate(model: &Model, data: &Dataset, world: &World) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("split '{}' is empty", data.manifest.split)));
    }
    if data.manifest.visual_dim != model.config.visual_dim {
        return Err(Error::CheckpointMismatch(format!(
            "model expects {} visual features, split has {}",
            model.config.visual_dim, data.manifest.visual_dim
        )));
    }
    let mut report = MetricsReport {
        split: data.manifest.split.clone(),
        mode: data.manifest.mode,
        samples: data.len(),
        split_hash: data.manifest.content_hash(),
        top1: None,
        per_word_f1: None,
        homophene_top1: None,
        predictions: None,
        wer: None,
        mean_lm_loss: None,
        perplexity: None,
    };
    match data.manifest.mode {
        Mode::Word => {
            let preds = data
                .samples
                .par_iter()
                .map(|s| model.predict_word(s))
                .collect::<Result<Vec<_>>>()?;
            let labels = word_labels(&data.samples)?;
            let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            report.top1 = Some(hits as f64 / labels.len() as f64);
            report.per_word_f1 = Some((0..world.num_words()).map(|w| f1_score(&preds, &labels, w)).collect());
            let homophones = world.homophene_words();
            let (mut h_hits, mut h_n) = (0usize, 0usize);
            for (p, l) in preds.iter().zip(&labels) {
                if homophones.contains(l) {
                    h_n += 1;
                    h_hits += usize::from(p == l);
                }
            }
            report.homophene_top1 = (h_n > 0).then(|| h_hits as f64 / h_n as f64);
            report.predictions = Some(preds);
        }
        Mode::Sentence => {
            let sep = world.separator();
            let per_sample = data
                .samples
                .par_iter()
                .map(|s| sentence_scores(model, s, sep))
                .collect::<Result<Vec<_>>>()?;
            let (edits, words, nll) = per_sample
                .iter()
                .fold((0usize, 0usize, 0.0), |(e, w, l), s| (e + s.0, w + s.1, l + s.2));
            let mean_nll = nll / per_sample.len() as f64;
            report.wer = Some(edits as f64 / words.max(1) as f64);
            report.mean_lm_loss = Some(mean_nll);
            report.perplexity = Some(perplexity(mean_nll));
        }
    }
    Ok(report)
}

fn word_labels(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.word().ok_or_else(|| Error::InvalidArgument("word split holds a transcript".into())))
        .collect()
}

/// (word edits, reference words, teacher-forced LM loss) for one sentence.
fn sentence_scores(model: &Model, s: &Sample, sep: u16) -> Result<(usize, usize, f64)> {
    let Label::Graphemes(reference) = &s.label else {
        return Err(Error::InvalidArgument("sentence split holds a word label".into()));
    };
    let frames = model.input_frames(s)?;
    let (h, _) = model.encode(&frames, false)?;
    let hyp = model.greedy_transcribe(&frames)?;
    let ref_words = split_words(reference, sep);
    let edits = levenshtein(&split_words(&hyp, sep), &ref_words);

    let mut prefix = vec![model.config.bos()];
    prefix.extend(reference.iter().map(|&g| g as usize));
    let mut next: Vec<usize> = reference.iter().map(|&g| g as usize).collect();
    next.push(model.config.eos());
    let logits = model.decode_lm(&h, &prefix)?;
    let lm = losses::lm_loss(&logits, &next)?.value;
    Ok((edits, ref_words.len(), lm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sync: bool,
    pub ctc: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub wer: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "sync,ctc,alpha,lambda,wer,perplexity";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.sync, r.ctc, r.alpha, r.lambda, r.wer, r.perplexity));
        }
        s
    }

    pub fn cell(&self, sync: bool, ctc: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.sync == sync && r.ctc == ctc)
    }
}

/// Trains the four {sync off/on} × {CTC off/on} cells from one seed and
/// init; CTC on uses `base.alpha`, sync on uses `base.lambda` (full variant).
pub fn run_ablation_grid(
    base: &TrainConfig,
    model: &ModelConfig,
    world: &World,
    train_set: &Dataset,
    eval_set: &Dataset,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if base.mode != Mode::Sentence || train_set.manifest.mode != Mode::Sentence {
        return Err(Error::Config("the ablation grid needs sentence-mode data".into()));
    }
    if base.alpha == 0.0 {
        return Err(Error::Config("alpha must be > 0 so the CTC-on cells differ".into()));
    }
    let enc = encoder_config(model, world, &train_set.manifest);
    let mut rows = Vec::with_capacity(4);
    for (sync, ctc) in [(false, false), (false, true), (true, false), (true, true)] {
        let cfg = TrainConfig {
            alpha: if ctc { base.alpha } else { 0.0 },
            sync_variant: if sync { SyncVariant::Full } else { SyncVariant::Off },
            ..base.clone()
        };
        let init = Model::new(enc.clone(), base.seed)?;
        let cell_dir = out.map(|d| d.join(format!("sync_{}_ctc_{}", u8::from(sync), u8::from(ctc))));
        let trained = train(&cfg, init, train_set, None, world, cell_dir.as_deref())?;
        let m = evaluate(&trained.model, eval_set, world)?;
        rows.push(AblationRow {
            sync,
            ctc,
            alpha: cfg.alpha,
            lambda: cfg.loss_setup().lambda,
            wer: m.wer.unwrap_or(f64::NAN),
            perplexity: m.perplexity.unwrap_or(f64::NAN),
        });
    }
    Ok(AblationReport { seed: base.seed, rows })
}
