#![allow(dead_code)]

use changeminds::data::{generate_synthetic, tokenize, BiTemporalSample, SynthSpec, Vocabulary};
use changeminds::RunConfig;

/// Synthetic samples encoded with a vocabulary built from their captions.
pub fn synthetic_set(n: usize, seed: u64, cfg: &RunConfig) -> (Vec<BiTemporalSample>, Vocabulary) {
    let raw = generate_synthetic(&SynthSpec {
        num_samples: n,
        seed,
        image_size: cfg.data.image_size,
        ..SynthSpec::default()
    })
    .expect("valid spec");
    let sentences: Vec<Vec<String>> = raw.iter().flat_map(|s| s.captions.iter().map(|c| tokenize(c))).collect();
    let vocab = Vocabulary::build(sentences.iter().map(Vec::as_slice));
    let samples = raw.iter().map(|s| s.to_sample(&vocab, cfg.data.max_caption_len)).collect();
    (samples, vocab)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Brute-force caption and segmentation metrics: plain vectors, linear
/// searches and explicit loops.
pub mod oracle {
    fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i + n <= tokens.len() {
            out.push(tokens[i..i + n].to_vec());
            i += 1;
        }
        out
    }

    fn count(list: &[Vec<String>], g: &[String]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }

    fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = Vec::new();
        for g in list {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
        let mut c = 0usize;
        let mut r = 0usize;
        for (cand, rs) in cands.iter().zip(refs) {
            c += cand.len();
            let mut best = rs[0].len();
            for x in rs {
                let d = (x.len() as i64 - cand.len() as i64).abs();
                let bd = (best as i64 - cand.len() as i64).abs();
                if d < bd || (d == bd && x.len() < best) {
                    best = x.len();
                }
            }
            r += best;
        }
        let mut logs = 0.0;
        for k in 1..=n {
            let mut hit = 0usize;
            let mut tot = 0usize;
            for (cand, rs) in cands.iter().zip(refs) {
                let cg = grams(cand, k);
                tot += cg.len();
                for g in distinct(&cg) {
                    let mut m = 0;
                    for x in rs {
                        m = m.max(count(&grams(x, k), &g));
                    }
                    hit += count(&cg, &g).min(m);
                }
            }
            if hit == 0 || tot == 0 {
                return 0.0;
            }
            logs += (hit as f64 / tot as f64).ln();
        }
        let bp = if c == 0 {
            0.0
        } else if c < r {
            (1.0 - r as f64 / c as f64).exp()
        } else {
            1.0
        };
        bp * (logs / n as f64).exp()
    }

    pub fn lcs(a: &[String], b: &[String]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
            }
        }
        t[a.len()][b.len()]
    }

    pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], beta: f64) -> f64 {
        let mut total = 0.0;
        for (cand, rs) in cands.iter().zip(refs) {
            let mut p: f64 = 0.0;
            let mut r: f64 = 0.0;
            for x in rs {
                let l = lcs(cand, x) as f64;
                if !cand.is_empty() {
                    p = p.max(l / cand.len() as f64);
                }
                if !x.is_empty() {
                    r = r.max(l / x.len() as f64);
                }
            }
            if p > 0.0 && r > 0.0 {
                total += (1.0 + beta * beta) * p * r / (r + beta * beta * p);
            }
        }
        total / cands.len() as f64
    }

    fn weights(tokens: &[String], n: usize, refs: &[Vec<Vec<String>>]) -> Vec<(Vec<String>, f64)> {
        let docs = refs.len() as f64;
        let gs = grams(tokens, n);
        distinct(&gs)
            .into_iter()
            .map(|g| {
                let df = refs.iter().filter(|rs| rs.iter().any(|x| count(&grams(x, n), &g) > 0)).count();
                let w = count(&gs, &g) as f64 * (docs.ln() - (df.max(1) as f64).ln());
                (g, w)
            })
            .collect()
    }

    pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], sigma: f64) -> f64 {
        let mut total = 0.0;
        for (cand, rs) in cands.iter().zip(refs) {
            let mut per_ref = 0.0;
            for x in rs {
                let delta = cand.len() as f64 - x.len() as f64;
                let pen = (-delta * delta / (2.0 * sigma * sigma)).exp();
                let mut orders = 0.0;
                for n in 1..=4 {
                    let h = weights(cand, n, refs);
                    let q = weights(x, n, refs);
                    let mut dot = 0.0;
                    for (g, hv) in &h {
                        for (g2, qv) in &q {
                            if g == g2 {
                                dot += hv.min(*qv) * qv;
                            }
                        }
                    }
                    let nh = h.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                    let nq = q.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                    if nh != 0.0 && nq != 0.0 {
                        dot /= nh * nq;
                    }
                    orders += dot * pen;
                }
                per_ref += orders / 4.0;
            }
            total += 10.0 * per_ref / rs.len() as f64;
        }
        total / cands.len() as f64
    }

    /// `(mIoU, F1, cIoU)` from pixel loops; change means class > 0.
    pub fn segmentation(pred: &[usize], truth: &[usize], classes: usize) -> (f64, f64, f64) {
        let mut miou = 0.0;
        for c in 0..classes {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..pred.len() {
                if pred[i] == c && truth[i] == c {
                    tp += 1;
                } else if pred[i] == c {
                    fp += 1;
                } else if truth[i] == c {
                    fn_ += 1;
                }
            }
            miou += if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..pred.len() {
            match (pred[i] > 0, truth[i] > 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let (f1, ciou) = if tp + fp + fn_ == 0 {
            (0.0, 0.0)
        } else {
            (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / (tp + fp + fn_) as f64)
        };
        (miou / classes as f64, f1, ciou)
    }
}
