mod common;

use changeminds::autograd::Graph;
use changeminds::checkpoint::Checkpoint;
use changeminds::config::TrainConfig;
use changeminds::data::{collate_eval, Batch, PAD};
use changeminds::training::{
    balanced_multitask_loss, batch_gradients, cc_loss, cd_loss, CosineSchedule, LossRecord, Trainer,
};
use changeminds::{ChangeMindsF32, ChangeMindsF64, Error, LossMode, RunConfig, Tensor};

use common::synthetic_set;

/// Logits whose softmax rows equal `probs`.
fn log_probs(rows: &[&[f64]]) -> Tensor<f64> {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
    Tensor::from_vec([rows.len(), rows[0].len()], data)
}

fn cd(logits: Tensor<f64>, targets: &[usize]) -> changeminds::Result<f64> {
    let g = Graph::standalone();
    Ok(cd_loss(g.constant(logits), targets)?.item())
}

fn cc(logits: Tensor<f64>, targets: &[usize]) -> changeminds::Result<f64> {
    let g = Graph::standalone();
    Ok(cc_loss(g.constant(logits), targets)?.item())
}

#[test]
fn change_loss_examples() {
    let two_pixels = log_probs(&[&[0.5, 0.5], &[0.25, 0.75]]);
    assert!((cd(two_pixels, &[0, 0]).unwrap() - 1.0397).abs() < 1e-4);
    let uniform = Tensor::zeros([4, 3]);
    assert!((cd(uniform, &[0, 1, 2, 1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    let sharp = Tensor::from_vec([2, 3], vec![60.0, 0.0, 0.0, 0.0, 0.0, 60.0]);
    assert!(cd(sharp, &[0, 2]).unwrap() < 1e-12);
    assert!(matches!(cd(Tensor::zeros([2, 3]), &[0, 3]), Err(Error::Validation(_))));
}

#[test]
fn caption_loss_examples() {
    let half = log_probs(&[&[0.5, 0.5, 1e-300], &[1e-300, 0.5, 0.5]]);
    assert!((cc(half, &[1, 2]).unwrap() - 2f64.ln()).abs() < 1e-9);
    let sharp = Tensor::from_vec([2, 4], vec![0.0, 60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 60.0]);
    assert!(cc(sharp, &[1, 3]).unwrap() < 1e-12);
    assert_eq!(cc(Tensor::zeros([3, 4]), &[PAD, PAD, PAD]).unwrap(), 0.0);
    assert!(matches!(cc(Tensor::zeros([1, 4]), &[4]), Err(Error::Validation(_))));
}

#[test]
fn balanced_loss_examples() {
    let g = Graph::<f64>::standalone();
    let (l_cc, l_cd) = (g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(4.0)));
    let b = balanced_multitask_loss(l_cc, l_cd);
    assert_eq!((b.total.item(), b.weight), (4.0, Some(0.5)));
    let x = g.constant(Tensor::scalar(1.7));
    assert_eq!(balanced_multitask_loss(x, x).total.item(), 3.4);
    let b = balanced_multitask_loss(l_cc, g.constant(Tensor::scalar(0.0)));
    assert_eq!((b.total.item(), b.weight), (2.0, None));
}

#[test]
fn schedule_runs_from_base_to_minimum() {
    let cfg = TrainConfig::default();
    let s = CosineSchedule { base: cfg.lr, min: cfg.min_lr, total_steps: 500 };
    assert_eq!(s.lr(0), 1e-4);
    assert!((s.lr(499) - 1e-7).abs() <= 1e-9);
    assert!((1..500).all(|k| s.lr(k) <= s.lr(k - 1)));
}

fn one_batch(cfg: &RunConfig, n: usize, seed: u64) -> (Batch<f32>, usize) {
    let (samples, vocab) = synthetic_set(n, seed, cfg);
    let refs: Vec<_> = samples.iter().collect();
    (collate_eval(&refs, cfg.data.max_caption_len).unwrap(), vocab.len())
}

#[test]
fn overfitting_one_batch_lowers_the_loss() {
    let cfg = RunConfig::tiny();
    let (batch, vocab) = one_batch(&cfg, 2, 20);
    let mut trainer = Trainer::new(ChangeMindsF32::new(&cfg, vocab).unwrap(), 50);
    let losses: Vec<f64> = (0..50).map(|_| trainer.train_step(&batch).unwrap().total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut cfg = RunConfig::tiny();
    cfg.train.loss_mode = LossMode::CdOnly;
    let (batch, vocab) = one_batch(&cfg, 1, 21);
    let mut model = ChangeMindsF32::new(&cfg, vocab).unwrap();
    let bias = model.cd_head.classifier.bias.unwrap();
    model.params.value_mut(bias).data_mut()[0] = f32::NAN;
    match batch_gradients(&model, &batch, LossMode::CdOnly, 7) {
        Err(Error::NonFiniteLoss { step, l_cd, l_cc }) => {
            assert_eq!(step, 7);
            assert!(l_cd.is_some_and(f64::is_nan) && l_cc.is_none());
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|(_, r)| r)),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = RunConfig::tiny();
    let (batch, vocab_len) = one_batch(&cfg, 2, 22);
    let (_, vocab) = synthetic_set(2, 22, &cfg);
    let mut trainer = Trainer::new(ChangeMindsF32::new(&cfg, vocab_len).unwrap(), 10);
    trainer.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    Checkpoint::capture(&trainer.model, Some(&trainer.optimizer), &vocab, trainer.step).save(&path).unwrap();

    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.step, 1);
    assert_eq!(loaded.vocab, vocab);
    assert_eq!(loaded.config, cfg);
    let model = loaded.to_model().unwrap();
    for (id, name, value) in trainer.model.params.iter() {
        assert_eq!(model.params.value(id), value, "{name}");
    }
    let (_, a) = batch_gradients(&trainer.model, &batch, LossMode::Multitask, 0).unwrap();
    let (_, b) = batch_gradients(&model, &batch, LossMode::Multitask, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_continues_the_schedule() {
    let cfg = RunConfig::tiny();
    let (batch, vocab_len) = one_batch(&cfg, 2, 23);
    let (_, vocab) = synthetic_set(2, 23, &cfg);
    let mut trainer = Trainer::new(ChangeMindsF32::new(&cfg, vocab_len).unwrap(), 10);
    for _ in 0..3 {
        trainer.train_step(&batch).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    Checkpoint::capture(&trainer.model, Some(&trainer.optimizer), &vocab, trainer.step).save(&path).unwrap();

    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), 10).unwrap();
    assert_eq!(resumed.step, 3);
    let next: LossRecord = resumed.train_step(&batch).unwrap();
    let reference = trainer.train_step(&batch).unwrap();
    assert_eq!(next.lr, trainer.schedule.lr(3));
    assert_eq!(next, reference);
    for (id, _, value) in trainer.model.params.iter() {
        assert_eq!(resumed.model.params.value(id), value);
    }
}

#[test]
fn checkpoint_load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = Checkpoint::<f32>::load(&dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }), "{missing}");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&garbage), Err(Error::Checkpoint(_))));

    let cfg = RunConfig::tiny();
    let (_, vocab) = synthetic_set(1, 24, &cfg);
    let model = ChangeMindsF32::new(&cfg, vocab.len()).unwrap();
    let good = dir.path().join("good.ckpt");
    Checkpoint::capture(&model, None, &vocab, 0).save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&cut), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::<f64>::load(&good), Err(Error::Checkpoint(_))));

    let mut other = cfg.clone();
    other.decoder.dim = 64;
    let mut ckpt = Checkpoint::<f32>::load(&good).unwrap();
    ckpt.config = other;
    assert!(matches!(ckpt.to_model(), Err(Error::Checkpoint(_))));
}

#[test]
fn fit_writes_logs_and_checkpoints() {
    let mut cfg = RunConfig::tiny();
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    let (samples, vocab) = synthetic_set(4, 25, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let total = Trainer::<f64>::planned_steps(&cfg.train, samples.len());
    assert_eq!(total, 4);
    let mut trainer = Trainer::new(ChangeMindsF64::new(&cfg, vocab.len()).unwrap(), total);
    let summary = trainer.fit(&samples, &[], &vocab, Some(dir.path()), &mut ()).unwrap();
    assert_eq!(summary.records.len(), 4);
    let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert_eq!(log.lines().next(), Some(LossRecord::CSV_HEADER));
    let evals = std::fs::read_to_string(dir.path().join("eval_log.csv")).unwrap();
    assert_eq!(evals.lines().count(), 3);
    for name in ["last.ckpt", "best_miou.ckpt", "best_bleu4.ckpt"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(summary.best_miou.is_some() && summary.best_bleu4.is_some());
    assert!(matches!(trainer.fit(&[], &[], &vocab, None, &mut ()), Err(Error::Validation(_))));
}
