//! Losses, optimiser, schedule and the training / evaluation loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{LossMode, TrainConfig};
use crate::data::{collate, Batch, BiTemporalSample, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_captions, CaptionEvalReport, ConfusionAccumulator, MetricsReport};
use crate::model::ChangeMinds;
use crate::nn::{ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Mean pixel cross-entropy of `[N, C]` logits.
pub fn cd_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize]) -> Result<Var<'g, T>> {
    let classes = logits.dim(1);
    if logits.dim(0) != targets.len() {
        return Err(Error::Shape(format!("{} pixel logits for {} targets", logits.dim(0), targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Validation(format!("mask class {bad} outside 0..{classes}")));
    }
    Ok(logits.cross_entropy(Rc::new(targets.iter().map(|&t| Some(t)).collect())))
}

/// Mean word cross-entropy of `[M, N]` logits, PAD targets ignored.
pub fn cc_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize]) -> Result<Var<'g, T>> {
    let vocab = logits.dim(1);
    if logits.dim(0) != targets.len() {
        return Err(Error::Shape(format!("{} word logits for {} targets", logits.dim(0), targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Validation(format!("caption token {bad} outside vocabulary of {vocab}")));
    }
    Ok(logits.cross_entropy(Rc::new(targets.iter().map(|&t| (t != PAD).then_some(t)).collect())))
}

#[derive(Clone, Copy, Debug)]
pub struct BalancedLoss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    /// Constant factor applied to the change-detection loss.
    pub weight: Option<f64>,
}

/// `L_cc + L_cd * (L_cc / L_cd)` with the ratio held constant; plain `L_cc`
/// when `L_cd` is zero.
pub fn balanced_multitask_loss<'g, T: Scalar>(l_cc: Var<'g, T>, l_cd: Var<'g, T>) -> BalancedLoss<'g, T> {
    let (cc, cd) = (l_cc.item().as_f64(), l_cd.item().as_f64());
    if cd == 0.0 {
        return BalancedLoss { total: l_cc, weight: None };
    }
    let ratio = cc / cd;
    BalancedLoss { total: l_cc.add(l_cd.scale(c(ratio))), weight: Some(ratio) }
}

/// Next-token targets of a teacher-forced batch, `[B*(max_len-1)]`.
pub fn caption_targets<T: Scalar>(batch: &Batch<T>) -> Vec<usize> {
    batch.caption_ids.iter().flat_map(|ids| ids.iter().skip(1).copied()).collect()
}

/// Adam without weight decay coupling; parameters without a gradient are
/// left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(id.index()).and_then(|m| m.as_ref()).map(|(m, v)| (m, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) {
        if self.moments.len() <= id.index() {
            self.moments.resize(id.index() + 1, None);
        }
        self.moments[id.index()] = Some((m, v));
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t, eps, wd) = (c::<T>(b1), c::<T>(b2), c::<T>(self.eps), c::<T>(self.weight_decay));
        let step_size = c::<T>(lr / bc1);
        let inv_bc2_sqrt = c::<T>(1.0 / bc2.sqrt());
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = params.value_mut(id);
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
            let one = T::one();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi + wd * *pi;
                *mi = b1t * *mi + (one - b1t) * gi;
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Per-step cosine decay from `base` at step 0 to `min` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base;
        }
        let progress = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_cd: Option<f64>,
    pub l_cc: Option<f64>,
    pub total: f64,
    pub weight: Option<f64>,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,L_cd,L_cc,L_total,weight,lr";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, opt(self.l_cd), opt(self.l_cc), self.total, opt(self.weight), self.lr)
    }
}

/// Appends loss records to a CSV file.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out })
    }

    pub fn append(&mut self, record: &LossRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Teacher-forced and greedy results on a set of samples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionAccumulator,
    pub captions: Option<CaptionEvalReport>,
    /// `(sample_id, greedy words)` in input order.
    pub decoded: Vec<(String, Vec<String>)>,
    pub teacher_forced_accuracy: f64,
    /// Greedy captions identical to one of the references.
    pub exact_matches: usize,
}

/// Metrics on `samples` using one shared representation per pair. Rows of
/// a head that `mode` does not train are reported as absent.
pub fn evaluate<T: Scalar>(
    model: &ChangeMinds<T>,
    samples: &[BiTemporalSample],
    vocab: &Vocabulary,
    mode: LossMode,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty sample set".into()));
    }
    let classes = model.num_classes();
    let mut confusion = ConfusionAccumulator::new(classes);
    let (mut hits, mut total) = (0usize, 0usize);
    let mut decoded = Vec::with_capacity(samples.len());
    let mut exact_matches = 0;
    let max_len = model.config.data.max_caption_len;
    for s in samples {
        let batch: Batch<T> = crate::data::collate_eval(&[s], max_len)?;
        let (t1, t2) = batch.images(0);
        let g = Graph::inference(&model.params);
        let rep = model.representation(&g, &t1, &t2)?;
        let probs = model.cd_head.logits(&rep, batch.height, batch.width).value();
        confusion.update(&probs.argmax_rows(), batch.mask(0))?;

        let memory = model.cc_head.memory(&rep);
        let ids = &batch.caption_ids[0];
        let (logits, _) = model.cc_head.logits(&g, &memory, &ids[..ids.len() - 1])?;
        let (h, n) = ChangeMinds::<T>::teacher_forced_hits(&logits.value(), &ids[1..]);
        hits += h;
        total += n;

        let greedy = model.cc_head.greedy_decode(&g, &memory, model.config.decoder.max_decode_len)?;
        let words = vocab.decode(&greedy.ids);
        if s.references.contains(&words) {
            exact_matches += 1;
        }
        decoded.push((s.sample_id.clone(), words));
    }

    let (cd, cc) = (mode.trains_cd(), mode.trains_cc());
    let mut report = MetricsReport::default();
    report.push("mIoU", if cd { Some(confusion.miou()?) } else { None });
    for k in 0..classes {
        let name = model.config.data.class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        report.push(format!("IoU_{name}"), cd.then(|| confusion.iou(k)));
    }
    let change = confusion.binarized().f1_ciou(1);
    report.push("F1", (cd && !change.empty).then_some(change.f1));
    report.push("cIoU", (cd && !change.empty).then_some(change.ciou));
    let cands: Vec<Vec<String>> = decoded.iter().map(|(_, w)| w.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = samples.iter().map(|s| s.references.clone()).collect();
    let captions =
        if cc && refs.iter().all(|r| !r.is_empty()) { Some(evaluate_captions(&cands, &refs)?) } else { None };
    for n in 0..4 {
        report.push(format!("BLEU-{}", n + 1), captions.as_ref().map(|c| c.bleu[n]));
    }
    report.push("ROUGE-L", captions.as_ref().map(|c| c.rouge_l));
    report.push("CIDEr-D", captions.as_ref().map(|c| c.cider_d));
    let teacher_forced_accuracy = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    report.push("TF_accuracy", cc.then_some(teacher_forced_accuracy));
    report.push("exact_captions", cc.then_some(exact_matches as f64));
    Ok(Evaluation { report, confusion, captions, decoded, teacher_forced_accuracy, exact_matches })
}

/// Losses and gradients of one batch without touching the parameters.
pub fn batch_gradients<T: Scalar>(
    model: &ChangeMinds<T>,
    batch: &Batch<T>,
    mode: LossMode,
    step: usize,
) -> Result<(Gradients<T>, LossRecord)> {
    let g = Graph::new(&model.params);
    let out = model.forward_multitask(&g, batch, mode)?;
    let l_cd = out.cd_logits().map(|l| cd_loss(l, &batch.masks)).transpose()?;
    let l_cc = out.cc_logits().map(|l| cc_loss(l, &caption_targets(batch))).transpose()?;
    let (total, weight) = match (l_cd, l_cc) {
        (Some(cd), Some(cc)) => {
            let b = balanced_multitask_loss(cc, cd);
            (b.total, b.weight)
        }
        (Some(cd), None) => (cd, None),
        (None, Some(cc)) => (cc, None),
        (None, None) => return Err(Error::Contract("loss mode trains neither head".into())),
    };
    let record = LossRecord {
        step,
        l_cd: l_cd.map(|v| v.item().as_f64()),
        l_cc: l_cc.map(|v| v.item().as_f64()),
        total: total.item().as_f64(),
        weight,
        lr: 0.0,
    };
    if !record.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, l_cd: record.l_cd, l_cc: record.l_cc });
    }
    Ok((g.backward(total), record))
}

/// Callback hooks invoked while fitting.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) {}
    fn on_eval(&mut self, _epoch: usize, _eval: &Evaluation) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub final_eval: Option<Evaluation>,
    pub best_miou: Option<f64>,
    pub best_bleu4: Option<f64>,
}

pub struct Trainer<T: Scalar> {
    pub model: ChangeMinds<T>,
    pub optimizer: Adam<T>,
    pub schedule: CosineSchedule,
    pub mode: LossMode,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// `total_steps` sizes the cosine schedule.
    pub fn new(model: ChangeMinds<T>, total_steps: usize) -> Self {
        let cfg = model.config.train.clone();
        Self {
            optimizer: Adam::new(&cfg),
            schedule: CosineSchedule { base: cfg.lr, min: cfg.min_lr, total_steps },
            mode: cfg.loss_mode,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            model,
        }
    }

    /// Continues from a checkpoint: parameters, optimiser moments and the
    /// schedule position are restored.
    pub fn resume(ckpt: &Checkpoint<T>, total_steps: usize) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut trainer = Self::new(model, total_steps);
        ckpt.restore_optimizer(&trainer.model, &mut trainer.optimizer);
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    /// Planned optimiser steps for a training set of `n` samples.
    pub fn planned_steps(cfg: &TrainConfig, n: usize) -> usize {
        let per_epoch = n.div_ceil(cfg.batch_size.max(1));
        let steps = per_epoch * cfg.epochs;
        if cfg.max_steps > 0 {
            steps.min(cfg.max_steps)
        } else {
            steps
        }
    }

    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossRecord> {
        let (grads, mut record) = batch_gradients(&self.model, batch, self.mode, self.step)?;
        let lr = self.schedule.lr(self.step);
        self.optimizer.update(&mut self.model.params, &grads, lr);
        record.lr = lr;
        self.step += 1;
        Ok(record)
    }

    /// Runs the configured epochs (or `max_steps`), evaluating every
    /// `eval_interval` epochs on `val`, or on `train` when `val` is empty.
    /// With a `run_dir`, writes `loss_log.csv`, `last.ckpt` and the two
    /// best-so-far checkpoints.
    pub fn fit(
        &mut self,
        train: &[BiTemporalSample],
        val: &[BiTemporalSample],
        vocab: &Vocabulary,
        run_dir: Option<&Path>,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let cfg = self.model.config.train.clone();
        let max_len = self.model.config.data.max_caption_len;
        let total = self.schedule.total_steps;
        let mut log = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(LossLog::create(&dir.join("loss_log.csv"))?)
            }
            None => None,
        };
        let eval_set = if val.is_empty() { train } else { val };
        let mut summary = TrainSummary { records: Vec::new(), final_eval: None, best_miou: None, best_bleu4: None };
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch = 0;
        while self.step < total {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.batch_size) {
                if self.step >= total {
                    break;
                }
                let samples: Vec<&BiTemporalSample> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = collate(&samples, max_len, &mut self.rng)?;
                let record = self.train_step(&batch)?;
                if let Some(l) = log.as_mut() {
                    l.append(&record)?;
                }
                observer.on_step(&record);
                summary.records.push(record);
            }
            epoch += 1;
            let last = self.step >= total;
            if last || (cfg.eval_interval > 0 && epoch % cfg.eval_interval == 0) {
                let eval = evaluate(&self.model, eval_set, vocab, self.mode)?;
                observer.on_eval(epoch, &eval);
                if let Some(dir) = run_dir {
                    append_eval_log(&dir.join("eval_log.csv"), epoch, self.step, &eval.report)?;
                    let miou = eval.report.get("mIoU");
                    if miou > summary.best_miou && self.mode.trains_cd() {
                        Checkpoint::capture(&self.model, Some(&self.optimizer), vocab, self.step)
                            .save(&dir.join("best_miou.ckpt"))?;
                    }
                    let bleu = eval.report.get("BLEU-4");
                    if bleu > summary.best_bleu4 && self.mode.trains_cc() {
                        Checkpoint::capture(&self.model, Some(&self.optimizer), vocab, self.step)
                            .save(&dir.join("best_bleu4.ckpt"))?;
                    }
                }
                summary.best_miou = best(summary.best_miou, eval.report.get("mIoU"));
                summary.best_bleu4 = best(summary.best_bleu4, eval.report.get("BLEU-4"));
                summary.final_eval = Some(eval);
            }
        }
        if let Some(dir) = run_dir {
            Checkpoint::capture(&self.model, Some(&self.optimizer), vocab, self.step).save(&dir.join("last.ckpt"))?;
        }
        Ok(summary)
    }
}

/// One row per evaluation: `epoch,step,<metric>...`; absent values are empty.
fn append_eval_log(path: &Path, epoch: usize, step: usize, report: &MetricsReport) -> Result<()> {
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        let names: Vec<&str> = report.rows.iter().map(|(n, _)| n.as_str()).collect();
        text.push_str(&format!("epoch,step,{}\n", names.join(",")));
    }
    let values: Vec<String> = report.rows.iter().map(|(_, v)| v.map(|x| x.to_string()).unwrap_or_default()).collect();
    text.push_str(&format!("{epoch},{step},{}\n", values.join(",")));
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn best(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, y) => x.or(y),
    }
}
