//! Classification metrics and paired bootstrap significance testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Polarity;
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn from_pairs(gold: &[Polarity], pred: &[Polarity]) -> Self {
        let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (g, p) in gold.iter().zip(pred) {
            m[g.index()][p.index()] += 1;
        }
        ConfusionMatrix(m)
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..NUM_CLASSES).map(|i| self.0[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Precision, recall and F1 per class. Undefined ratios are 0.
    pub fn class_scores(&self) -> Vec<ClassScores> {
        (0..NUM_CLASSES)
            .map(|c| {
                let tp = self.0[c][c] as f64;
                let predicted: usize = (0..NUM_CLASSES).map(|g| self.0[g][c]).sum();
                let support: usize = self.0[c].iter().sum();
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = if support == 0 { 0.0 } else { tp / support as f64 };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }

    /// Unweighted mean of the three per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        self.class_scores().iter().map(|s| s.f1).sum::<f64>() / NUM_CLASSES as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBuckets {
    /// Sentences with at least this many tokens count as long.
    pub threshold: usize,
    pub long_count: usize,
    pub short_count: usize,
    pub long_accuracy: Option<f64>,
    pub short_accuracy: Option<f64>,
}

/// Evaluation summary. `runtime_secs` is excluded from serialization so
/// reports written to disk stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub buckets: LengthBuckets,
    pub ids: Vec<String>,
    pub gold: Vec<Polarity>,
    pub predicted: Vec<Polarity>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn from_predictions(
        ids: Vec<String>,
        gold: Vec<Polarity>,
        predicted: Vec<Polarity>,
        lengths: &[usize],
        threshold: usize,
    ) -> Self {
        let confusion = ConfusionMatrix::from_pairs(&gold, &predicted);
        let mut long = (0, 0);
        let mut short = (0, 0);
        for ((g, p), &len) in gold.iter().zip(&predicted).zip(lengths) {
            let bucket = if len >= threshold { &mut long } else { &mut short };
            bucket.0 += 1;
            bucket.1 += usize::from(g == p);
        }
        let acc = |(n, c): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
        EvalReport {
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            per_class: confusion.class_scores(),
            confusion,
            buckets: LengthBuckets {
                threshold,
                long_count: long.0,
                short_count: short.0,
                long_accuracy: acc(long),
                short_accuracy: acc(short),
            },
            ids,
            gold,
            predicted,
            runtime_secs: 0.0,
        }
    }

    /// 1.0 where the prediction is right, 0.0 otherwise.
    pub fn correctness(&self) -> Vec<f64> {
        self.gold
            .iter()
            .zip(&self.predicted)
            .map(|(g, p)| if g == p { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Mean of `a - b` on the original sample.
    pub observed_diff: f64,
    pub p_value: f64,
    pub resamples: usize,
}

/// Two-sided paired bootstrap test on per-instance scores.
///
/// Each resample draws instances with replacement; the p-value is the share of
/// resampled mean differences that deviate from the observed one by at least
/// the observed magnitude, with add-one smoothing. Resample `r` uses stream
/// `r` of a ChaCha generator seeded with `seed`, so the result does not depend
/// on thread scheduling.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Comparison(format!(
            "paired samples must be non-empty and of equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    let extreme: usize = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mean = (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum::<f64>() / n as f64;
            usize::from((mean - observed).abs() >= observed.abs())
        })
        .sum();
    Ok(BootstrapResult {
        observed_diff: observed,
        p_value: (extreme + 1) as f64 / (resamples + 1) as f64,
        resamples,
    })
}

/// Compares two systems evaluated on the same instances, possibly over several
/// seeds each. Per-instance correctness is averaged across seeds before the
/// paired bootstrap.
pub fn compare(a: &[EvalReport], b: &[EvalReport], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    let ids = &a
        .first()
        .ok_or_else(|| Error::Comparison("no reports for system A".into()))?
        .ids;
    if b.is_empty() {
        return Err(Error::Comparison("no reports for system B".into()));
    }
    if a.iter().chain(b).any(|r| &r.ids != ids) {
        return Err(Error::Comparison("reports cover different instance sets".into()));
    }
    let mean_correct = |reports: &[EvalReport]| -> Vec<f64> {
        let mut acc = vec![0.0; ids.len()];
        for r in reports {
            acc.iter_mut().zip(r.correctness()).for_each(|(s, c)| *s += c);
        }
        acc.iter().map(|s| s / reports.len() as f64).collect()
    };
    paired_bootstrap(&mean_correct(a), &mean_correct(b), resamples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::*;

    #[test]
    fn perfect_and_all_class_zero() {
        let gold = vec![Positive, Negative, Neutral];
        let cm = ConfusionMatrix::from_pairs(&gold, &gold);
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.macro_f1(), 1.0);

        let cm = ConfusionMatrix::from_pairs(&gold, &[Positive; 3]);
        assert!((cm.accuracy() - 1.0 / 3.0).abs() < 1e-15);
        assert!((cm.macro_f1() - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn buckets_partition() {
        let gold = vec![Positive, Negative, Neutral, Positive];
        let pred = vec![Positive, Positive, Neutral, Negative];
        let r = EvalReport::from_predictions(
            (0..4).map(|i| i.to_string()).collect(),
            gold,
            pred,
            &[30, 5, 21, 20],
            21,
        );
        assert_eq!(r.buckets.long_count + r.buckets.short_count, 4);
        assert_eq!(r.buckets.long_accuracy, Some(1.0));
        assert_eq!(r.buckets.short_accuracy, Some(0.0));
    }

    #[test]
    fn bootstrap_extremes() {
        let a = vec![1.0; 100];
        let r = paired_bootstrap(&a, &a, 2000, 1).unwrap();
        assert_eq!(r.p_value, 1.0);
        let b = vec![0.0; 100];
        let r = paired_bootstrap(&a, &b, 10_000, 1).unwrap();
        assert!(r.p_value < 0.001);
        let mixed: Vec<f64> = (0..100).map(|i| f64::from(i % 3 == 0)).collect();
        let r1 = paired_bootstrap(&mixed, &b, 500, 9).unwrap();
        let r2 = paired_bootstrap(&mixed, &b, 500, 9).unwrap();
        assert_eq!(r1, r2);
        assert!(paired_bootstrap(&a, &b[..10], 10, 1).is_err());
    }

    #[test]
    fn compare_rejects_mismatched_sets() {
        let mk = |ids: &[&str]| {
            EvalReport::from_predictions(
                ids.iter().map(|s| s.to_string()).collect(),
                vec![Positive; ids.len()],
                vec![Positive; ids.len()],
                &vec![1; ids.len()],
                21,
            )
        };
        assert!(matches!(compare(&[mk(&["a"])], &[mk(&["b"])], 10, 0), Err(Error::Comparison(_))));
        assert_eq!(compare(&[mk(&["a", "b"])], &[mk(&["a", "b"])], 10, 0).unwrap().p_value, 1.0);
    }

    #[test]
    fn mean_std_sample() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}
