//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in order
//! and a failing criterion does not hide the others.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use changeminds::autograd::{check_gradients, check_gradients_in, numeric_gradient, Graph, Var};
use changeminds::changelstm::{mlstm_scan, Direction, XlstmBlock};
use changeminds::config::ChangeLstmConfig;
use changeminds::encoder::WindowAttention;
use changeminds::metrics::{bleu_scores, cider_d, rouge_l, ConfusionAccumulator, ROUGE_BETA};
use changeminds::nn::{Init, ParamStore};
use changeminds::predictor::MultiHeadAttention;
use changeminds::training::{balanced_multitask_loss, cc_loss, cd_loss, Evaluation, LossRecord, Trainer};
use changeminds::{ChangeMindsF32, LossMode, RunConfig, Tensor};

use common::{oracle, synthetic_set, words};

type Check = Result<String, String>;

struct Suite {
    failed: usize,
    known: usize,
}

impl Suite {
    fn run(&mut self, name: &str, budget: Option<Duration>, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let (Some(limit), Ok(detail)) = (budget, &outcome) {
            if elapsed > limit {
                outcome = Err(format!("{detail}; took {elapsed:.1?}, budget {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }

    /// A failing line that does not affect the exit status.
    fn known_failure(&mut self, name: &str, detail: &str) {
        self.known += 1;
        println!("FAIL {name}: {detail} [known, not counted]");
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `||a - b||_inf / ||b||_inf`.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = max_abs(a.iter().zip(b).map(|(x, y)| x - y));
    diff / max_abs(b.iter().copied()).max(1e-12)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0, known: 0 };
    suite.run("attention_oracle", Some(Duration::from_secs(5)), attention_oracle);
    suite.run("mlstm_single_step", None, mlstm_single_step);
    suite.run("mlstm_stabilized_vs_naive", None, mlstm_vs_naive);
    suite.run("mlstm_causality", None, mlstm_causality);
    suite.run("mlstm_extreme_gates_finite", None, mlstm_extreme_gates);
    suite.run("gradient_checks", Some(Duration::from_secs(30)), gradient_checks);
    suite.run("metric_oracles", None, metric_oracles);
    suite.run("metric_hand_examples", None, metric_hand_examples);
    let rouge = rouge_hand_value();
    if (rouge - 0.8216).abs() > 5e-5 {
        suite.known_failure(
            "rouge_l_hand_example_as_stated",
            &format!("expected 0.8216, the stated formula with P=3/4, R=1, beta=1.2 evaluates to {rouge:.6}"),
        );
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let first = dir.path().join("run_a");
    let second = dir.path().join("run_b");
    let mut overfit_eval = None;
    suite.run("overfit_tiny", Some(Duration::from_secs(600)), || {
        let eval = overfit_run(&first)?;
        let miou = eval.report.get("mIoU").unwrap_or(0.0);
        let detail = format!(
            "mIoU {miou:.4}, teacher-forced accuracy {:.4}, exact captions {}/16",
            eval.teacher_forced_accuracy, eval.exact_matches
        );
        overfit_eval = Some(eval.clone());
        ensure(miou >= 0.90 && eval.teacher_forced_accuracy >= 0.95 && eval.exact_matches >= 12, || detail.clone())?;
        Ok(detail)
    });
    suite.run("balanced_loss_identity", None, || balanced_identity(&first.join("loss_log.csv")));
    suite.run("determinism", None, || {
        let a = overfit_eval.as_ref().ok_or("first run did not finish")?;
        let b = overfit_run(&second)?;
        let head = |p: &Path| -> Result<Vec<String>, String> {
            let text = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
            Ok(text.lines().take(11).map(str::to_string).collect())
        };
        let (la, lb) = (head(&first.join("loss_log.csv"))?, head(&second.join("loss_log.csv"))?);
        ensure(la.len() == 11 && la == lb, || "first 10 logged steps differ".into())?;
        ensure(a.report == b.report && a.decoded == b.decoded, || {
            format!("final reports differ:\n{}\n{}", a.report.to_csv(), b.report.to_csv())
        })?;
        Ok("first 10 loss rows and final reports identical".into())
    });
    suite.run("ablation_harness", None, ablation);

    println!("{} failed, {} known", suite.failed, suite.known);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn attention_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let heads = rng.random_range(1..=3);
        let dim = heads * rng.random_range(1..=4);
        let span = rng.random_range(1..=4);
        let windows = rng.random_range(1..=3);
        let l = span * span;
        let mut store = ParamStore::<f64>::default();
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let attn = WindowAttention::new(&mut Init::new(&mut store, &mut init_rng), "attn", dim, heads, span, 0.5);
        store.value_mut(attn.bias_table).data_mut().iter_mut().for_each(|b| *b = 0.0);
        let x = uniform(&mut rng, &[windows, l, dim], -1.0, 1.0);

        let g = Graph::inference(&store);
        let (out, weights) = attn.forward(g.constant(x.clone()), span, None).map_err(|e| e.to_string())?;

        let wq = store.value(attn.qkv.weight).data();
        let bq = store.value(attn.qkv.bias.expect("qkv bias")).data();
        let wp = store.value(attn.proj.weight).data();
        let bp = store.value(attn.proj.bias.expect("proj bias")).data();
        let dh = dim / heads;
        let mut expect_out = Vec::new();
        let mut expect_attn = Vec::new();
        for w in 0..windows {
            let tok = |i: usize| &x.data()[(w * l + i) * dim..(w * l + i + 1) * dim];
            let proj = |i: usize, col: usize| -> f64 {
                (0..dim).map(|a| tok(i)[a] * wq[a * 3 * dim + col]).sum::<f64>() + bq[col]
            };
            let mut ctx = vec![0.0; l * dim];
            let mut maps = vec![0.0; heads * l * l];
            for h in 0..heads {
                for i in 0..l {
                    let mut scores = vec![0.0; l];
                    for (j, s) in scores.iter_mut().enumerate() {
                        for e in 0..dh {
                            *s += proj(i, h * dh + e) * proj(j, dim + h * dh + e);
                        }
                        *s /= (dh as f64).sqrt();
                    }
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
                    for j in 0..l {
                        let p = (scores[j] - top).exp() / z;
                        maps[(h * l + i) * l + j] = p;
                        for e in 0..dh {
                            ctx[i * dim + h * dh + e] += p * proj(j, 2 * dim + h * dh + e);
                        }
                    }
                }
            }
            for i in 0..l {
                for o in 0..dim {
                    expect_out.push((0..dim).map(|a| ctx[i * dim + a] * wp[a * dim + o]).sum::<f64>() + bp[o]);
                }
            }
            expect_attn.extend(maps);
        }
        worst = worst.max(rel_error(out.value().data(), &expect_out));
        worst = worst.max(rel_error(weights.value().data(), &expect_attn));
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("50 instances, max relative error {worst:.3e}"))
}

/// `(q, k, v, igate, fgate pre-activation, ogate)` for one random sequence.
type MlstmInputs = [Tensor<f64>; 6];

fn mlstm_inputs(rng: &mut ChaCha8Rng, len: usize, heads: usize, dk: usize, dv: usize, gate: f64) -> MlstmInputs {
    [
        uniform(rng, &[len, heads * dk], -1.0, 1.0),
        uniform(rng, &[len, heads * dk], -1.0, 1.0),
        uniform(rng, &[len, heads * dv], -1.0, 1.0),
        uniform(rng, &[len, heads], -gate, gate),
        uniform(rng, &[len, heads], -gate, gate),
        uniform(rng, &[len, heads * dv], -gate, gate),
    ]
}

fn scan_values(x: &MlstmInputs, heads: usize) -> changeminds::Result<Vec<f64>> {
    let g = Graph::<f64>::standalone();
    let v: Vec<Var<'_, f64>> = x.iter().map(|t| g.constant(t.clone())).collect();
    let out = mlstm_scan(v[0], v[1], v[2], v[3], v[4].log_sigmoid(), v[5], heads)?;
    Ok(out.value().data().to_vec())
}

/// Unstabilised recurrence with explicit exponential gates.
fn naive_mlstm(x: &MlstmInputs, heads: usize) -> Vec<f64> {
    let [q, k, v, ig, fg, og] = x;
    let len = q.dim(0);
    let (dk, dv) = (q.dim(1) / heads, v.dim(1) / heads);
    let mut out = vec![0.0; len * heads * dv];
    for h in 0..heads {
        let mut c = vec![vec![0.0; dk]; dv];
        let mut n = vec![0.0; dk];
        for t in 0..len {
            let i = ig.data()[t * heads + h].exp();
            let f = 1.0 / (1.0 + (-fg.data()[t * heads + h]).exp());
            let kt: Vec<f64> = (0..dk).map(|a| k.data()[t * heads * dk + h * dk + a] / (dk as f64).sqrt()).collect();
            let qt = &q.data()[t * heads * dk + h * dk..t * heads * dk + (h + 1) * dk];
            for (b, row) in c.iter_mut().enumerate() {
                let vb = v.data()[t * heads * dv + h * dv + b];
                for (cell, &ka) in row.iter_mut().zip(&kt) {
                    *cell = f * *cell + i * vb * ka;
                }
            }
            for a in 0..dk {
                n[a] = f * n[a] + i * kt[a];
            }
            let den = (0..dk).map(|a| n[a] * qt[a]).sum::<f64>().abs().max(1.0);
            for b in 0..dv {
                let o = 1.0 / (1.0 + (-og.data()[t * heads * dv + h * dv + b]).exp());
                let num: f64 = (0..dk).map(|a| c[b][a] * qt[a]).sum();
                out[t * heads * dv + h * dv + b] = o * num / den;
            }
        }
    }
    out
}

fn mlstm_single_step() -> Check {
    let one = |w| Tensor::from_vec([1, w], vec![1.0; w]);
    let zero = |w| Tensor::from_vec([1, w], vec![0.0; w]);
    let x: MlstmInputs = [one(1), one(1), one(1), zero(1), zero(1), zero(1)];
    let h = scan_values(&x, 1).map_err(|e| e.to_string())?[0];
    ensure((h - 0.5).abs() <= 1e-9, || format!("h_1 = {h}"))?;
    Ok(format!("h_1 = {h}"))
}

fn mlstm_vs_naive() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..=16);
        let heads = rng.random_range(1..=2);
        let (dk, dv) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = mlstm_inputs(&mut rng, len, heads, dk, dv, 3.0);
        let got = scan_values(&x, heads).map_err(|e| e.to_string())?;
        worst = worst.max(rel_error(&got, &naive_mlstm(&x, heads)));
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("100 sequences, max relative error {worst:.3e}"))
}

fn xlstm_block(seed: u64, dim: usize, direction: Direction) -> (ParamStore<f64>, XlstmBlock) {
    let mut store = ParamStore::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ChangeLstmConfig { dim, depth: 1, heads: 2, conv_kernel: 3 };
    let block = XlstmBlock::new(&mut Init::new(&mut store, &mut rng), "block", &cfg, direction);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|w| *w += rng.random_range(-0.3..0.3));
    }
    (store, block)
}

fn block_values(store: &ParamStore<f64>, block: &XlstmBlock, x: &Tensor<f64>) -> Vec<f64> {
    let g = Graph::inference(store);
    block.forward(g.constant(x.clone())).expect("block forward").value().data().to_vec()
}

fn mlstm_causality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let len = 12;
    let (heads, dk, dv, dim) = (2, 3, 2, 8);
    let (fwd_store, fwd) = xlstm_block(1, dim, Direction::Forward);
    let (rev_store, rev) = xlstm_block(2, dim, Direction::Reverse);
    for trial in 0..20 {
        let p = rng.random_range(0..len);

        let base = mlstm_inputs(&mut rng, len, heads, dk, dv, 3.0);
        let mut moved = base.clone();
        for t in moved.iter_mut() {
            let w = t.dim(1);
            t.data_mut()[p * w..(p + 1) * w].iter_mut().for_each(|x| *x += 0.7);
        }
        let (a, b) = (scan_values(&base, heads).unwrap(), scan_values(&moved, heads).unwrap());
        let w = heads * dv;
        ensure(a[..p * w] == b[..p * w], || format!("trial {trial}: scan output before {p} changed"))?;
        ensure(a[p * w..] != b[p * w..], || format!("trial {trial}: scan ignores position {p}"))?;

        let x = uniform(&mut rng, &[len, dim], -1.0, 1.0);
        let mut y = x.clone();
        y.data_mut()[p * dim..(p + 1) * dim].iter_mut().for_each(|v| *v += 0.7);
        let (a, b) = (block_values(&fwd_store, &fwd, &x), block_values(&fwd_store, &fwd, &y));
        ensure(a[..p * dim] == b[..p * dim], || format!("trial {trial}: forward block leaks from {p}"))?;
        let (a, b) = (block_values(&rev_store, &rev, &x), block_values(&rev_store, &rev, &y));
        ensure(a[(p + 1) * dim..] == b[(p + 1) * dim..], || format!("trial {trial}: reverse block leaks from {p}"))?;
    }
    Ok("20 positions: scan and forward block causal, reverse block anti-causal".into())
}

fn mlstm_extreme_gates() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..100 {
        let x = mlstm_inputs(&mut rng, 32, 2, 3, 3, 50.0);
        let out = scan_values(&x, 2).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(out.iter().all(|v| v.is_finite()), || format!("trial {trial}: non-finite output"))?;
    }
    Ok("100 sequences with gates in [-50, 50], all outputs finite".into())
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let eps = 1e-6;
    let mut lines = Vec::new();
    let mut record = |name: &str, err: f64| -> Result<(), String> {
        lines.push(format!("{name} {err:.1e}"));
        ensure(err <= 1e-3, || format!("{name}: relative error {err:.3e}"))
    };

    let (heads, d, len) = (2, 4, 6);
    let x = mlstm_inputs(&mut rng, len, heads, d / heads, d / heads, 3.0);
    let proj = uniform(&mut rng, &[len, d], -1.0, 1.0);
    let report = check_gradients(&x, eps, |g, v| {
        mlstm_scan(v[0], v[1], v[2], v[3], v[4].log_sigmoid(), v[5], heads)
            .expect("scan")
            .mul(g.constant(proj.clone()))
            .sum()
    });
    record("mlstm_scan", report.max_rel_error)?;

    for (seed, direction) in [(3, Direction::Forward), (4, Direction::Reverse)] {
        let (store, block) = xlstm_block(seed, 4, direction);
        let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let proj = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let report = check_gradients_in(&store, &[x], eps, |g, v| {
            block.forward(v[0]).expect("block").mul(g.constant(proj.clone())).sum()
        });
        record(&format!("xlstm_block_{direction:?}").to_lowercase(), report.max_rel_error)?;
    }

    let mut store = ParamStore::<f64>::default();
    let mut init_rng = ChaCha8Rng::seed_from_u64(5);
    let attn = MultiHeadAttention::new(&mut Init::new(&mut store, &mut init_rng), "cross", 4, 2);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.8..0.8));
    }
    let query = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let source = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let proj = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let report = check_gradients_in(&store, &[query, source], eps, |g, v| {
        let kv = attn.key_values(v[1]);
        attn.attend(v[0], kv, None).0.mul(g.constant(proj.clone())).sum()
    });
    record("cross_attention", report.max_rel_error)?;

    // Toy two-head model sharing one weight matrix.
    let weight = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let cd_in = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let cc_in = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let cd_targets = [0usize, 1, 3, 2, 1];
    let cc_targets = [1usize, 0, 3, 2];
    let losses = |g: &'_ Graph<'_, f64>, w: Var<'_, f64>| -> (f64, f64) {
        let l_cd = cd_loss(g.constant(cd_in.clone()).matmul(w), &cd_targets).expect("cd loss");
        let l_cc = cc_loss(g.constant(cc_in.clone()).matmul(w.tanh()), &cc_targets).expect("cc loss");
        (l_cd.item(), l_cc.item())
    };
    let g = Graph::<f64>::standalone();
    let w = g.leaf(weight.clone());
    let l_cd = cd_loss(g.constant(cd_in.clone()).matmul(w), &cd_targets).expect("cd loss");
    let l_cc = cc_loss(g.constant(cc_in.clone()).matmul(w.tanh()), &cc_targets).expect("cc loss");
    let balanced = balanced_multitask_loss(l_cc, l_cd);
    let ratio = balanced.weight.ok_or("balanced loss reported no weight")?;
    let analytic = g.backward(balanced.total).get(w).cloned().ok_or("no gradient for the toy weight")?;
    let numeric_cd = numeric_gradient(std::slice::from_ref(&weight), eps, |xs| {
        let g = Graph::standalone();
        losses(&g, g.constant(xs[0].clone())).0
    });
    let numeric_cc = numeric_gradient(&[weight], eps, |xs| {
        let g = Graph::standalone();
        losses(&g, g.constant(xs[0].clone())).1
    });
    let expected: Vec<f64> =
        numeric_cc[0].data().iter().zip(numeric_cd[0].data()).map(|(cc, cd)| cc + ratio * cd).collect();
    record("balanced_multitask_loss", rel_error(analytic.data(), &expected))?;

    Ok(lines.join(", "))
}

fn parse_optional(field: &str) -> Result<Option<f64>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some).map_err(|e| format!("bad number `{field}`: {e}"))
    }
}

fn balanced_identity(log: &Path) -> Check {
    let text = std::fs::read_to_string(log).map_err(|e| format!("{}: {e}", log.display()))?;
    let mut lines = text.lines();
    ensure(lines.next() == Some(LossRecord::CSV_HEADER), || "unexpected loss log header".into())?;
    let mut checked = 0;
    for line in lines.take(100) {
        let f: Vec<&str> = line.split(',').collect();
        let (l_cd, l_cc) = (parse_optional(f[1])?, parse_optional(f[2])?);
        let total: f64 = f[3].parse().map_err(|_| format!("bad total in `{line}`"))?;
        let weight = parse_optional(f[4])?;
        let (Some(l_cd), Some(l_cc), Some(weight)) = (l_cd, l_cc, weight) else {
            return Err(format!("step {} lacks a multitask record", f[0]));
        };
        ensure(l_cd > 0.0 && l_cc > 0.0, || format!("step {}: non-positive loss", f[0]))?;
        ensure((total - 2.0 * l_cc).abs() <= 1e-6 * total, || {
            format!("step {}: total {total} vs 2*L_CC {}", f[0], 2.0 * l_cc)
        })?;
        ensure((weight - l_cc / l_cd).abs() <= 1e-6 * weight, || {
            format!("step {}: weight {weight} vs L_CC/L_CD {}", f[0], l_cc / l_cd)
        })?;
        checked += 1;
    }
    ensure(checked == 100, || format!("only {checked} logged steps"))?;
    Ok("100 logged steps satisfy total = 2*L_CC and weight = L_CC/L_CD".into())
}

fn overfit_run(run_dir: &Path) -> Result<Evaluation, String> {
    let mut cfg = RunConfig::tiny();
    cfg.train.seed = 42;
    cfg.train.max_steps = 300;
    cfg.train.epochs = 1000;
    cfg.train.eval_interval = 0;
    let (samples, vocab) = synthetic_set(16, 42, &cfg);
    let model = ChangeMindsF32::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
    let total = Trainer::<f32>::planned_steps(&cfg.train, samples.len());
    ensure(total == 300, || format!("planned {total} steps"))?;
    let summary =
        Trainer::new(model, total).fit(&samples, &[], &vocab, Some(run_dir), &mut ()).map_err(|e| e.to_string())?;
    summary.final_eval.ok_or_else(|| "no final evaluation".into())
}

fn ablation() -> Check {
    let mut schema: Option<Vec<String>> = None;
    let mut runs = 0;
    for mode in [LossMode::CdOnly, LossMode::CcOnly, LossMode::Multitask] {
        for depth in 0..=2 {
            let mut cfg = RunConfig::tiny();
            cfg.train.loss_mode = mode;
            cfg.lstm.depth = depth;
            cfg.train.max_steps = 3;
            cfg.train.epochs = 10;
            cfg.train.eval_interval = 0;
            let (samples, vocab) = synthetic_set(8, 7, &cfg);
            let model = ChangeMindsF32::new(&cfg, vocab.len()).map_err(|e| e.to_string())?;
            let total = Trainer::<f32>::planned_steps(&cfg.train, samples.len());
            let summary = Trainer::new(model, total)
                .fit(&samples, &[], &vocab, None, &mut ())
                .map_err(|e| format!("{mode} L={depth}: {e}"))?;
            let eval = summary.final_eval.ok_or_else(|| format!("{mode} L={depth}: no report"))?;
            let names: Vec<String> = eval.report.rows.iter().map(|(n, _)| n.clone()).collect();
            if let Some(expected) = &schema {
                ensure(*expected == names, || format!("{mode} L={depth}: report rows differ"))?;
            }
            schema = Some(names);
            let finite = |k: &str| eval.report.get(k).is_some_and(f64::is_finite);
            ensure(!mode.trains_cd() || finite("mIoU"), || format!("{mode} L={depth}: no mIoU"))?;
            ensure(!mode.trains_cc() || finite("BLEU-4"), || format!("{mode} L={depth}: no BLEU-4"))?;
            ensure(summary.records.iter().all(|r| r.total.is_finite()), || format!("{mode} L={depth}: bad loss"))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} runs (3 loss modes x L in 0..=2) with identical report rows"))
}

fn random_sentence(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let len = rng.random_range(1..=max);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=6);
        let cands: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 8)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            (0..n).map(|_| (0..rng.random_range(1..=4)).map(|_| random_sentence(&mut rng, 8)).collect()).collect();
        let bleu = bleu_scores(&cands, &refs, 4).map_err(|e| e.to_string())?;
        let mut errs = Vec::new();
        for k in 1..=4 {
            errs.push((format!("BLEU-{k}"), (bleu[k - 1] - oracle::bleu(&cands, &refs, k)).abs()));
        }
        let rouge = rouge_l(&cands, &refs).map_err(|e| e.to_string())?;
        errs.push(("ROUGE-L".into(), (rouge - oracle::rouge_l(&cands, &refs, ROUGE_BETA)).abs()));
        let cider = cider_d(&cands, &refs).map_err(|e| e.to_string())?;
        errs.push(("CIDEr-D".into(), (cider - oracle::cider_d(&cands, &refs, 6.0)).abs()));

        let classes = rng.random_range(2..=4);
        let pixels = rng.random_range(1..=64);
        let pred: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..classes)).collect();
        let truth: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..classes)).collect();
        let mut conf = ConfusionAccumulator::new(classes);
        conf.update(&pred, &truth).map_err(|e| e.to_string())?;
        let (miou, f1, ciou) = oracle::segmentation(&pred, &truth, classes);
        let change = conf.binarized().f1_ciou(1);
        errs.push(("mIoU".into(), (conf.miou().map_err(|e| e.to_string())? - miou).abs()));
        errs.push(("F1".into(), (change.f1 - f1).abs()));
        errs.push(("cIoU".into(), (change.ciou - ciou).abs()));
        for (name, err) in errs {
            ensure(err <= 1e-9, || format!("case {case}: {name} differs by {err:.3e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("100 corpora and masks, max absolute difference {worst:.1e}"))
}

fn rouge_hand_value() -> f64 {
    rouge_l(&[words("a b c d")], &[vec![words("a c d")]]).expect("rouge")
}

fn metric_hand_examples() -> Check {
    let mut conf = ConfusionAccumulator::new(2);
    conf.update(&[0, 1, 0, 1], &[0, 1, 1, 1]).map_err(|e| e.to_string())?;
    let miou = conf.miou().map_err(|e| e.to_string())?;
    ensure((miou - 7.0 / 12.0).abs() <= 1e-12, || format!("mIoU {miou}"))?;

    let mut counts = ConfusionAccumulator::new(2);
    counts.update(&[1, 1, 1, 0], &[1, 1, 0, 1]).map_err(|e| e.to_string())?;
    let scores = counts.f1_ciou(1);
    ensure((scores.f1 - 4.0 / 6.0).abs() <= 1e-12 && (scores.ciou - 0.5).abs() <= 1e-12, || {
        format!("F1 {} cIoU {}", scores.f1, scores.ciou)
    })?;

    let b1 = bleu_scores(&[words("a b c")], &[vec![words("a b d")]], 1).map_err(|e| e.to_string())?[0];
    ensure((b1 - 2.0 / 3.0).abs() <= 1e-12, || format!("BLEU-1 {b1}"))?;

    let rouge = rouge_hand_value();
    let formula = (1.0 + 1.44) * 0.75 / (1.0 + 1.44 * 0.75);
    ensure((rouge - formula).abs() <= 1e-12, || format!("ROUGE-L {rouge} vs {formula}"))?;
    Ok(format!("mIoU {miou:.4}, F1 {:.4}, cIoU {:.4}, BLEU-1 {b1:.4}, ROUGE-L {rouge:.6}", scores.f1, scores.ciou))
}
