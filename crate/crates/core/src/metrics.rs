//! Segmentation and caption metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Pixel confusion counts, `matrix[truth * C + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    matrix: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, matrix: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Metric(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let c = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= c || t >= c {
                return Err(Error::Metric(format!("class id {} out of range for {c} classes", p.max(t))));
            }
            self.matrix[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Metric("cannot merge accumulators with different class counts".into()));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.matrix[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.count(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.num_classes).filter(|&t| t != class).map(|t| self.count(t, class)).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != class).map(|p| self.count(class, p)).sum()
    }

    /// IoU of one class; 1 when the class is absent from prediction and truth.
    pub fn iou(&self, class: usize) -> f64 {
        let tp = self.true_positives(class);
        let denom = tp + self.false_positives(class) + self.false_negatives(class);
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Metric("mIoU of an empty accumulator".into()));
        }
        Ok((0..self.num_classes).map(|c| self.iou(c)).sum::<f64>() / self.num_classes as f64)
    }

    /// Collapses all classes above 0 into a single change class.
    pub fn binarized(&self) -> Self {
        let mut out = Self::new(2);
        let c = self.num_classes;
        for t in 0..c {
            for p in 0..c {
                out.matrix[usize::from(t > 0) * 2 + usize::from(p > 0)] += self.count(t, p);
            }
        }
        out
    }

    pub fn f1_ciou(&self, change_class: usize) -> ChangeScores {
        let tp = self.true_positives(change_class);
        let fp = self.false_positives(change_class);
        let fn_ = self.false_negatives(change_class);
        if tp + fp + fn_ == 0 {
            log::debug!("no predicted or true change pixels; F1 and cIoU reported as 0");
            return ChangeScores { f1: 0.0, ciou: 0.0, empty: true };
        }
        ChangeScores {
            f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
            ciou: tp as f64 / (tp + fp + fn_) as f64,
            empty: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeScores {
    pub f1: f64,
    pub ciou: f64,
    /// Neither prediction nor truth contained the change class.
    pub empty: bool,
}

type NgramCounts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Metric("empty candidate set".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Metric(format!("{} candidates for {} reference lists", cands.len(), refs.len())));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Metric(format!("sample {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU for orders `1..=max_n`, returned per order.
pub fn bleu_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::Metric(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        cand_len += cand.len();
        // closest reference length, shorter one on ties
        ref_len += rs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(cand.len()), l)).unwrap_or(0);
        for n in 1..=max_n {
            let counts = ngrams(cand, n);
            let ref_counts: Vec<_> = rs.iter().map(|r| ngrams(r, n)).collect();
            for (g, &cnt) in &counts {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += cnt.min(max_ref);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    Ok(bleu_scores(cands, refs, n)?[n - 1])
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure using the best precision and recall over references,
/// averaged over the corpus.
pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut sum = 0.0;
    for (cand, rs) in cands.iter().zip(refs) {
        let (mut p, mut r) = (0.0f64, 0.0f64);
        for rf in rs {
            let l = lcs_len(cand, rf) as f64;
            if !cand.is_empty() {
                p = p.max(l / cand.len() as f64);
            }
            if !rf.is_empty() {
                r = r.max(l / rf.len() as f64);
            }
        }
        if p > 0.0 && r > 0.0 {
            sum += (1.0 + beta2) * p * r / (r + beta2 * p);
        }
    }
    Ok(sum / cands.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vecs: Vec<BTreeMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &BTreeMap<&[String], usize>, log_docs: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    for n in 1..=4 {
        let v: BTreeMap<&[String], f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_docs - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf { vecs, norms, len: tokens.len() }
}

/// CIDEr-D with document frequencies taken over the corpus references.
pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
    for rs in refs {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in rs {
            for n in 1..=4 {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (refs.len() as f64).ln();
    let mut total = 0.0;
    for (cand, rs) in cands.iter().zip(refs) {
        let hyp = tfidf(cand, &df, log_docs);
        let mut score = 0.0;
        for r in rs {
            let rv = tfidf(r, &df, log_docs);
            let delta = hyp.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..4 {
                let mut dot = 0.0;
                for (g, &hv) in &hyp.vecs[n] {
                    if let Some(&rv_g) = rv.vecs[n].get(g) {
                        dot += hv.min(rv_g) * rv_g;
                    }
                }
                if hyp.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                    dot /= hyp.norms[n] * rv.norms[n];
                }
                score += dot * penalty;
            }
        }
        total += score / 4.0 / rs.len() as f64 * 10.0;
    }
    Ok(total / cands.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
}

pub fn evaluate_captions(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<CaptionEvalReport> {
    let b = bleu_scores(cands, refs, 4)?;
    Ok(CaptionEvalReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge_l(cands, refs)?,
        cider_d: cider_d(cands, refs)?,
        candidate_tokens: cands.iter().map(Vec::len).sum(),
        reference_tokens: refs.iter().flatten().map(Vec::len).sum(),
    })
}

/// Ordered `metric,value` table; absent metrics keep their row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, Option<f64>)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: Option<f64>) {
        self.rows.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, value) in &self.rows {
            match value {
                Some(v) => writeln!(out, "{name},{v}").unwrap(),
                None => writeln!(out, "{name},absent").unwrap(),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n{}\n", "metric", "-".repeat(width + 12));
        for (name, value) in &self.rows {
            match value {
                Some(v) => writeln!(out, "{name:<width$}  {v:.6}").unwrap(),
                None => writeln!(out, "{name:<width$}  absent").unwrap(),
            }
        }
        out
    }
}
