//! Evaluation metrics and the homophene / attention-locality analyses.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::HomophenePair;
use crate::error::{Error, Result};
use crate::model::AttentionRecord;

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of one hypothesis against a nonempty reference.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("WER reference is empty".into()));
    }
    Ok(levenshtein(hypothesis, reference) as f64 / reference.len() as f64)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// One-vs-rest F1 of `class`; 0 when the class is never predicted and never
/// present.
pub fn f1_score(predictions: &[usize], labels: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == class, y == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Predictions of one trained method on the shared eval split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodPredictions {
    pub method: String,
    /// Identifies the eval split the predictions were made on.
    pub split_id: String,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodBucket {
    pub method: String,
    pub mean_f1: f64,
    /// Unweighted mean over included words of `(F1 − F1_vanilla) / F1_vanilla`, in %.
    pub relative_gain_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomopheneBucket {
    pub distance: usize,
    pub pair_count: usize,
    pub words: Vec<usize>,
    /// Words dropped from gains because vanilla F1 is 0.
    pub excluded: Vec<usize>,
    pub vanilla_mean_f1: f64,
    pub methods: Vec<MethodBucket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomopheneReport {
    pub vanilla: String,
    pub aggregation: String,
    pub buckets: Vec<HomopheneBucket>,
}

pub const HOMOPHENE_CSV_HEADER: &str =
    "distance,pair_count,word_count,method,mean_f1,vanilla_mean_f1,relative_gain_pct,excluded_words";

impl HomopheneReport {
    /// One row per (bucket, method); `relative_gain_pct` is empty when no word
    /// in the bucket has positive vanilla F1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HOMOPHENE_CSV_HEADER);
        s.push('\n');
        for b in &self.buckets {
            let excluded = b
                .excluded
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(";");
            for m in &b.methods {
                let gain = m.relative_gain_pct.map(|g| format!("{g:.6}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.6},{:.6},{},{}",
                    b.distance,
                    b.pair_count,
                    b.words.len(),
                    m.method,
                    m.mean_f1,
                    b.vanilla_mean_f1,
                    gain,
                    excluded
                );
            }
        }
        s
    }
}

/// Relative F1 gain of each method over the vanilla method, bucketed by the
/// grapheme edit distance of the homophene pair a word belongs to.
pub fn homophene_f1_gain(
    methods: &[MethodPredictions],
    vanilla: &str,
    labels: &[usize],
    pairs: &[HomophenePair],
) -> Result<HomopheneReport> {
    let base = methods
        .iter()
        .find(|m| m.method == vanilla)
        .ok_or_else(|| Error::InvalidArgument(format!("no predictions for vanilla method {vanilla:?}")))?;
    for m in methods {
        if m.split_id != base.split_id {
            return Err(Error::SplitMismatch(format!(
                "{} was evaluated on split {}, {} on {}",
                m.method, m.split_id, base.method, base.split_id
            )));
        }
        if m.predictions.len() != labels.len() {
            return Err(Error::SplitMismatch(format!(
                "{} has {} predictions for {} labels",
                m.method,
                m.predictions.len(),
                labels.len()
            )));
        }
    }

    let mut by_distance: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for p in pairs {
        let e = by_distance.entry(p.grapheme_distance).or_default();
        e.0 += 1;
        for w in [p.word1, p.word2] {
            if !e.1.contains(&w) {
                e.1.push(w);
            }
        }
    }

    let mut buckets = Vec::with_capacity(by_distance.len());
    for (distance, (pair_count, mut words)) in by_distance {
        words.sort_unstable();
        let vanilla_f1: Vec<f64> = words.iter().map(|&w| f1_score(&base.predictions, labels, w)).collect();
        let excluded: Vec<usize> = words
            .iter()
            .zip(&vanilla_f1)
            .filter(|(_, &f)| f <= 0.0)
            .map(|(&w, _)| w)
            .collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let method_rows = methods
            .iter()
            .map(|m| {
                let f1: Vec<f64> = words.iter().map(|&w| f1_score(&m.predictions, labels, w)).collect();
                let gains: Vec<f64> = f1
                    .iter()
                    .zip(&vanilla_f1)
                    .filter(|(_, &v)| v > 0.0)
                    .map(|(&f, &v)| 100.0 * (f - v) / v)
                    .collect();
                MethodBucket {
                    method: m.method.clone(),
                    mean_f1: mean(&f1),
                    relative_gain_pct: (!gains.is_empty()).then(|| mean(&gains)),
                }
            })
            .collect();
        buckets.push(HomopheneBucket {
            distance,
            pair_count,
            vanilla_mean_f1: mean(&vanilla_f1),
            words,
            excluded,
            methods: method_rows,
        });
    }
    Ok(HomopheneReport {
        vanilla: vanilla.to_string(),
        aggregation: "one-vs-rest F1 per word; bucket gain is the unweighted mean over member words with vanilla F1 > 0".into(),
        buckets,
    })
}

/// Mean attention distance of one head: `(1/T) Σᵢ Σⱼ A[i,j]·|i − j|`.
pub fn head_attention_distance(att: &crate::tensor::Mat) -> Result<f64> {
    let t_len = att.rows();
    if att.cols() != t_len || t_len == 0 {
        return Err(Error::ShapeMismatch(format!("attention is {}x{}", att.rows(), att.cols())));
    }
    let mut total = 0.0;
    for i in 0..t_len {
        let row = att.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&a| a < 0.0) {
            return Err(Error::NotStochastic { row: i, sum });
        }
        total += row
            .iter()
            .enumerate()
            .map(|(j, a)| a * (i as f64 - j as f64).abs())
            .sum::<f64>();
    }
    Ok(total / t_len as f64)
}

/// Per layer, per head distance for one sample.
pub fn mean_attention_distance(record: &AttentionRecord) -> Result<Vec<Vec<f64>>> {
    record
        .layers
        .iter()
        .map(|heads| heads.iter().map(head_attention_distance).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDistanceReport {
    /// `distances[layer][head][sample]`
    pub distances: Vec<Vec<Vec<f64>>>,
}

pub const ATTENTION_CSV_HEADER: &str = "layer,head,sample,mean_distance";
pub const ATTENTION_SUMMARY_CSV_HEADER: &str = "layer,head,mean,q10,q50,q90";

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl AttentionDistanceReport {
    pub fn push(&mut self, record: &AttentionRecord) -> Result<()> {
        let d = mean_attention_distance(record)?;
        if self.distances.is_empty() {
            self.distances = d.iter().map(|h| vec![Vec::new(); h.len()]).collect();
        }
        if d.len() != self.distances.len() {
            return Err(Error::ShapeMismatch("attention records differ in layer count".into()));
        }
        for (layer, heads) in d.into_iter().enumerate() {
            for (head, v) in heads.into_iter().enumerate() {
                self.distances[layer][head].push(v);
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.distances.first().and_then(|h| h.first()).map_or(0, Vec::len)
    }

    /// Mean over every layer, head and sample.
    pub fn overall_mean(&self) -> f64 {
        let all: Vec<f64> = self.distances.iter().flatten().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn summaries(&self) -> Vec<HeadSummary> {
        let mut out = Vec::new();
        for (layer, heads) in self.distances.iter().enumerate() {
            for (head, vals) in heads.iter().enumerate() {
                let mut sorted = vals.clone();
                sorted.sort_by(f64::total_cmp);
                out.push(HeadSummary {
                    layer,
                    head,
                    mean: vals.iter().sum::<f64>() / vals.len() as f64,
                    q10: quantile(&sorted, 0.1),
                    q50: quantile(&sorted, 0.5),
                    q90: quantile(&sorted, 0.9),
                });
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(ATTENTION_SUMMARY_CSV_HEADER);
        s.push('\n');
        for h in self.summaries() {
            let _ = writeln!(s, "{},{},{:.9},{:.9},{:.9},{:.9}", h.layer, h.head, h.mean, h.q10, h.q50, h.q90);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(ATTENTION_CSV_HEADER);
        s.push('\n');
        for (layer, heads) in self.distances.iter().enumerate() {
            for (head, vals) in heads.iter().enumerate() {
                for (sample, v) in vals.iter().enumerate() {
                    let _ = writeln!(s, "{layer},{head},{sample},{v:.9}");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use proptest::prelude::*;

    #[test]
    fn levenshtein_examples() {
        let s = |x: &str| x.chars().collect::<Vec<_>>();
        assert_eq!(levenshtein(&s("million"), &s("billion")), 1);
        assert_eq!(levenshtein(&s("living"), &s("giving")), 1);
        assert_eq!(levenshtein(&s("abc"), &s("abc")), 0);
        assert_eq!(levenshtein(&s(""), &s("abc")), 3);
        assert_eq!(levenshtein(&s("kitten"), &s("sitting")), 3);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((wer(&["a", "b"], &["a", "c", "b"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer::<&str>(&[], &["a", "b", "c"]).unwrap(), 1.0);
        assert!(wer::<&str>(&["a"], &[]).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(12f64.ln()) - 12.0).abs() < 1e-12);
        assert!((perplexity(40.7f64.ln()) - 40.7).abs() < 1e-12);
    }

    #[test]
    fn attention_distance_examples() {
        let mut eye = Mat::zeros(4, 4);
        for i in 0..4 {
            eye[(i, i)] = 1.0;
        }
        assert_eq!(head_attention_distance(&eye).unwrap(), 0.0);
        let uniform = Mat::filled(3, 3, 1.0 / 3.0);
        assert!((head_attention_distance(&uniform).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        let mut first = Mat::zeros(4, 4);
        for i in 0..4 {
            first[(i, 0)] = 1.0;
        }
        assert_eq!(head_attention_distance(&first).unwrap(), 1.5);
        let bad = Mat::filled(2, 2, 0.6);
        assert!(matches!(head_attention_distance(&bad), Err(Error::NotStochastic { .. })));
    }

    fn pair(a: usize, b: usize, d: usize) -> HomophenePair {
        HomophenePair {
            word1: a,
            word2: b,
            grapheme_distance: d,
            viseme_identical: true,
        }
    }

    fn method(name: &str, preds: Vec<usize>) -> MethodPredictions {
        MethodPredictions {
            method: name.into(),
            split_id: "eval".into(),
            predictions: preds,
        }
    }

    #[test]
    fn identical_predictions_give_zero_gain() {
        let labels = vec![0, 1, 0, 1, 2, 3, 2, 3];
        let preds = vec![0, 0, 0, 1, 2, 2, 3, 3];
        let r = homophene_f1_gain(
            &[method("vanilla", preds.clone()), method("sync", preds)],
            "vanilla",
            &labels,
            &[pair(0, 1, 1), pair(2, 3, 2)],
        )
        .unwrap();
        assert_eq!(r.buckets.len(), 2);
        for b in &r.buckets {
            for m in &b.methods {
                assert_eq!(m.relative_gain_pct, Some(0.0));
            }
        }
        assert!(r.to_csv().starts_with(HOMOPHENE_CSV_HEADER));
    }

    #[test]
    fn zero_vanilla_f1_words_are_excluded() {
        let labels = vec![0, 1, 0, 1];
        let vanilla = vec![0, 0, 0, 0];
        let sync = vec![0, 1, 0, 1];
        let r = homophene_f1_gain(
            &[method("vanilla", vanilla), method("sync", sync)],
            "vanilla",
            &labels,
            &[pair(0, 1, 1)],
        )
        .unwrap();
        let b = &r.buckets[0];
        assert_eq!(b.excluded, vec![1]);
        let sync_row = b.methods.iter().find(|m| m.method == "sync").unwrap();
        // Word 0: vanilla F1 = 2/3, sync F1 = 1.
        assert!((sync_row.relative_gain_pct.unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_splits_are_rejected() {
        let mut other = method("sync", vec![0, 1]);
        other.split_id = "other".into();
        let err = homophene_f1_gain(&[method("vanilla", vec![0, 1]), other], "vanilla", &[0, 1], &[pair(0, 1, 1)]);
        assert!(matches!(err, Err(Error::SplitMismatch(_))));
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(
            a in proptest::collection::vec(0u8..4, 0..8),
            b in proptest::collection::vec(0u8..4, 0..8),
            c in proptest::collection::vec(0u8..4, 0..8),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        }

        #[test]
        fn attention_distance_is_bounded(t_len in 1usize..8, raw in proptest::collection::vec(0.01f64..1.0, 64)) {
            let mut m = Mat::zeros(t_len, t_len);
            for i in 0..t_len {
                let row = &raw[i * t_len..(i + 1) * t_len];
                let s: f64 = row.iter().sum();
                for j in 0..t_len {
                    m[(i, j)] = row[j] / s;
                }
            }
            let d = head_attention_distance(&m).unwrap();
            let bound = (0..t_len)
                .map(|i| (0..t_len).map(|j| (i as f64 - j as f64).abs()).fold(0.0, f64::max))
                .sum::<f64>() / t_len as f64;
            prop_assert!(d >= 0.0 && d <= bound + 1e-12 && d <= (t_len - 1) as f64);
        }
    }
}
