//! Rank statistics, hallucination metrics and binned summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{bail, Error, Result};

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        bail!(Numeric, "{name} contains a non-finite value");
    }
    Ok(())
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
}

/// Largest sample for which a perfect correlation gets a permutation p-value.
const EXACT_PERFECT_MAX_N: usize = 8;

/// Spearman rank correlation with a two-sided p-value.
///
/// The p-value uses the Student-t approximation with `n − 2` degrees of
/// freedom. For a perfect correlation the approximation degenerates; there
/// the p-value is the exact permutation probability for `n ≤ 8` and 0 above.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        bail!(Dimension, "spearman inputs have lengths {} and {}", x.len(), y.len());
    }
    if x.len() < 3 {
        bail!(Usage, "spearman needs at least 3 pairs, got {}", x.len());
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    for (name, r) in [("x", &rx), ("y", &ry)] {
        if r.iter().all(|v| *v == r[0]) {
            bail!(Undefined, "correlation undefined: {name} is constant");
        }
    }
    let rho = pearson(&rx, &ry);
    let n = x.len();
    let p_value = if 1.0 - rho.abs() < 1e-12 {
        if n <= EXACT_PERFECT_MAX_N {
            perfect_permutation_p(&rx, &ry)
        } else {
            0.0
        }
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df ≥ 1");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p_value })
}

/// Fraction of the `n!` orderings of `ry` whose |ρ| is (numerically) 1.
fn perfect_permutation_p(rx: &[f64], ry: &[f64]) -> f64 {
    let mut perm = ry.to_vec();
    let n = perm.len();
    let (mut hits, mut total) = (0u64, 0u64);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut visit = |p: &[f64]| {
        total += 1;
        if 1.0 - pearson(rx, p).abs() < 1e-12 {
            hits += 1;
        }
    };
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i)
            } else {
                perm.swap(c[i], i)
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `before` tends to exceed `after`.
    Greater,
    /// `before` tends to fall below `after`.
    Less,
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sided" | "two-sided" => Ok(Self::TwoSided),
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            other => Err(Error::Config(format!("unknown alternative {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl PairedSample {
    pub fn new(before: Vec<f64>, after: Vec<f64>) -> Result<Self> {
        let s = Self { before, after };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.before.len() != self.after.len() {
            bail!(Dimension, "paired sample has {} and {} entries", self.before.len(), self.after.len());
        }
        if self.before.is_empty() {
            bail!(Usage, "paired sample is empty");
        }
        check_finite("before", &self.before)?;
        check_finite("after", &self.after)
    }

    /// `before − after` for every pair.
    pub fn differences(&self) -> Vec<f64> {
        self.before.iter().zip(&self.after).map(|(b, a)| b - a).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences that entered the test.
    pub n: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Largest nonzero-difference count handled by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Wilcoxon signed-rank test on `before − after`.
///
/// Zero differences are dropped and tied magnitudes share average ranks.
/// Up to 20 remaining pairs the null distribution of `W+` is enumerated
/// exactly over all sign assignments (conditional on the observed ranks);
/// above that a normal approximation with tie-corrected variance is used.
pub fn wilcoxon_signed_rank(sample: &PairedSample, alternative: Alternative) -> Result<Wilcoxon> {
    sample.validate()?;
    let d: Vec<f64> = sample.differences().into_iter().filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        bail!(Degenerate, "all paired differences are zero");
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_greater, p_less, method) = if n <= WILCOXON_EXACT_MAX_N {
        // average ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = (1u64 << n) as f64;
        let obs = (2.0 * w_plus).round() as usize;
        let ge: u64 = counts[obs..].iter().sum();
        let le: u64 = counts[..=obs].iter().sum();
        (ge as f64 / all, le as f64 / all, WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            var -= (t * t * t - t) / 48.0;
        }
        let z = (w_plus - mean) / var.sqrt();
        (normal_sf(z), normal_cdf(z), WilcoxonMethod::Normal)
    };
    let p_value = match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    };
    Ok(Wilcoxon { w_plus, w_minus, n, p_value, method })
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Objects a caption mentions, and the subset absent from the image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionObjects {
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chair {
    /// Fraction of captions with at least one hallucinated object.
    pub chair_s: f64,
    /// Hallucinated mentions over all mentions.
    pub chair_i: f64,
}

pub fn chair_scores(captions: &[CaptionObjects]) -> Result<Chair> {
    if captions.is_empty() {
        bail!(Undefined, "CHAIR is undefined on an empty corpus");
    }
    let (mut with_hall, mut hall, mut mentioned) = (0usize, 0usize, 0usize);
    for (i, c) in captions.iter().enumerate() {
        if !c.hallucinated.is_subset(&c.mentioned) {
            bail!(Usage, "caption {i}: hallucinated objects must also be mentioned");
        }
        with_hall += usize::from(!c.hallucinated.is_empty());
        hall += c.hallucinated.len();
        mentioned += c.mentioned.len();
    }
    if mentioned == 0 {
        bail!(Undefined, "CHAIR_i is undefined when no objects are mentioned");
    }
    Ok(Chair { chair_s: with_hall as f64 / captions.len() as f64, chair_i: hall as f64 / mentioned as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

/// Accuracy always exists; the others are `None` when their denominator is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

impl Classification {
    pub fn precision(&self) -> Result<f64> {
        self.precision.ok_or_else(|| Error::Undefined("precision undefined: no positive predictions".into()))
    }

    pub fn recall(&self) -> Result<f64> {
        self.recall.ok_or_else(|| Error::Undefined("recall undefined: no positive labels".into()))
    }

    pub fn f1(&self) -> Result<f64> {
        self.precision()?;
        self.recall()?;
        Ok(self.f1.expect("defined with precision and recall"))
    }
}

/// Yes/no metrics with "yes" as the positive class.
pub fn binary_classification_metrics(predictions: &[Answer], labels: &[Answer]) -> Result<Classification> {
    if predictions.len() != labels.len() {
        bail!(Dimension, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    if predictions.is_empty() {
        bail!(Usage, "no predictions");
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::Yes) => fneg += 1,
            (Answer::No, Answer::No) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(Classification {
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        true_negatives: tn,
    })
}

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    /// `bins + 1` edges: each bin's smallest statistic, then the overall max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub statistic_means: Vec<f64>,
    /// `bins × metrics`
    pub metric_means: Vec<Vec<f64>>,
    /// Set when a constant statistic forced a single bin.
    pub collapsed: bool,
}

impl BinnedReport {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn to_csv(&self, metric_names: &[&str]) -> String {
        let width = self.metric_means.first().map_or(0, Vec::len);
        let mut out = String::from("bin,lower,upper,count,statistic_mean");
        for j in 0..width {
            match metric_names.get(j) {
                Some(name) => out.push_str(&format!(",{name}")),
                None => out.push_str(&format!(",metric_{j}")),
            }
        }
        out.push('\n');
        for b in 0..self.num_bins() {
            out.push_str(&format!(
                "{b},{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.counts[b],
                self.statistic_means[b]
            ));
            for m in &self.metric_means[b] {
                out.push_str(&format!(",{m}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Equal-count binning of images by `statistic`, averaging the statistic and
/// every metric column inside each bin.
///
/// Images are sorted by statistic (ties keep input order) and split into
/// `n_bins` contiguous groups whose sizes differ by at most one.
pub fn binned_analysis(statistic: &[f64], metrics: &[Vec<f64>], n_bins: usize) -> Result<BinnedReport> {
    if statistic.len() != metrics.len() {
        bail!(Dimension, "{} statistics for {} metric rows", statistic.len(), metrics.len());
    }
    if n_bins == 0 {
        bail!(Usage, "need at least one bin");
    }
    if n_bins > statistic.len() {
        bail!(Usage, "{n_bins} bins for {} samples", statistic.len());
    }
    check_finite("statistic", statistic)?;
    let width = metrics[0].len();
    for (i, row) in metrics.iter().enumerate() {
        if row.len() != width {
            bail!(Dimension, "metric row {i} has {} values, expected {width}", row.len());
        }
        check_finite("metrics", row)?;
    }

    let n = statistic.len();
    let collapsed = statistic.iter().all(|v| *v == statistic[0]);
    let bins = if collapsed { 1 } else { n_bins };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| statistic[a].total_cmp(&statistic[b]));

    let mut report =
        BinnedReport { edges: vec![], counts: vec![], statistic_means: vec![], metric_means: vec![], collapsed };
    for b in 0..bins {
        let members = &order[b * n / bins..(b + 1) * n / bins];
        let k = members.len() as f64;
        report.edges.push(statistic[members[0]]);
        report.counts.push(members.len());
        report.statistic_means.push(members.iter().map(|&i| statistic[i]).sum::<f64>() / k);
        report.metric_means.push((0..width).map(|j| members.iter().map(|&i| metrics[i][j]).sum::<f64>() / k).collect());
    }
    report.edges.push(statistic[order[n - 1]]);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    /// Two-sided p by listing every sign assignment of the observed ranks.
    fn brute_force_wilcoxon(d: &[f64]) -> f64 {
        let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
        let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let obs: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = d.len();
        let (mut ge, mut le) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            ge += u64::from(w >= obs - 1e-9);
            le += u64::from(w <= obs + 1e-9);
        }
        let all = (1u64 << n) as f64;
        (2.0 * (ge as f64 / all).min(le as f64 / all)).min(1.0)
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_hand_case() {
        let s = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.rho, 0.8);
    }

    #[test]
    fn spearman_perfect_correlations() {
        let x = [0.3, 1.2, 5.0, 7.7, 9.1];
        let up = spearman_rho(&x, &x).unwrap();
        assert_eq!(up.rho, 1.0);
        // only the identity and the reversal reach |ρ| = 1 among 5! orderings
        assert!((up.p_value - 2.0 / 120.0).abs() < 1e-15);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman_rho(&x, &rev).unwrap().rho, -1.0);
        let big: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(spearman_rho(&big, &big).unwrap().p_value, 0.0);
    }

    #[test]
    fn spearman_t_approximation() {
        // n = 4 gives 2 degrees of freedom, where the t tail has the closed
        // form P(|T| > t) = 1 − t/√(t² + 2)
        let s = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        let t = 0.8 * (2.0f64 / (1.0 - 0.64)).sqrt();
        assert!((s.p_value - (1.0 - t / (t * t + 2.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
        assert!(matches!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn wilcoxon_all_positive_ten() {
        let before: Vec<f64> = (1..=10).map(|i| 10.0 + f64::from(i)).collect();
        let after = vec![10.0; 10];
        let w = wilcoxon_signed_rank(&PairedSample::new(before, after).unwrap(), Alternative::TwoSided).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Exact);
        assert_eq!(w.w_plus, 55.0);
        assert!((w.p_value - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_symmetric_pair() {
        let s = PairedSample::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let w = wilcoxon_signed_rank(&s, Alternative::TwoSided).unwrap();
        assert_eq!((w.w_plus, w.w_minus), (1.5, 1.5));
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_one_sided_tails() {
        let s = PairedSample::new(vec![3.0, 4.0, 5.0], vec![0.0; 3]).unwrap();
        assert_eq!(wilcoxon_signed_rank(&s, Alternative::Greater).unwrap().p_value, 1.0 / 8.0);
        assert_eq!(wilcoxon_signed_rank(&s, Alternative::Less).unwrap().p_value, 1.0);
    }

    #[test]
    fn wilcoxon_zero_differences() {
        let s = PairedSample::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(wilcoxon_signed_rank(&s, Alternative::TwoSided), Err(Error::Degenerate(_))));
    }

    #[test]
    fn wilcoxon_normal_branch() {
        // n = 30 distinct magnitudes, all positive: z = (465 − 232.5)/√2363.75
        let before: Vec<f64> = (1..=30).map(f64::from).collect();
        let w = wilcoxon_signed_rank(&PairedSample::new(before, vec![0.0; 30]).unwrap(), Alternative::Greater).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Normal);
        let z = (465.0 - 232.5) / 2363.75f64.sqrt();
        assert!((w.p_value - normal_sf(z)).abs() < 1e-15);
        assert!(w.p_value < 1e-5);
    }

    #[test]
    fn chair_examples() {
        let clean = CaptionObjects { mentioned: set(&["dog"]), hallucinated: set(&[]) };
        assert_eq!(chair_scores(std::slice::from_ref(&clean)).unwrap(), Chair { chair_s: 0.0, chair_i: 0.0 });
        let all = CaptionObjects { mentioned: set(&["a", "b"]), hallucinated: set(&["a", "b"]) };
        assert_eq!(chair_scores(&[all]).unwrap().chair_i, 1.0);

        let corpus = vec![
            CaptionObjects { mentioned: set(&["a", "b", "c"]), hallucinated: set(&["a", "b"]) },
            CaptionObjects { mentioned: set(&["d", "e"]), hallucinated: set(&["e"]) },
            CaptionObjects { mentioned: set(&["f", "g", "h"]), hallucinated: set(&[]) },
            CaptionObjects { mentioned: set(&["i", "j"]), hallucinated: set(&[]) },
        ];
        assert_eq!(chair_scores(&corpus).unwrap(), Chair { chair_s: 0.5, chair_i: 0.3 });
    }

    #[test]
    fn chair_errors() {
        assert!(matches!(chair_scores(&[]), Err(Error::Undefined(_))));
        assert!(matches!(chair_scores(&[CaptionObjects::default()]), Err(Error::Undefined(_))));
        let bad = CaptionObjects { mentioned: set(&["a"]), hallucinated: set(&["b"]) };
        assert!(matches!(chair_scores(&[bad]), Err(Error::Usage(_))));
    }

    #[test]
    fn classification_examples() -> Result<()> {
        use Answer::{No, Yes};
        let labels = [Yes, No, Yes, No];
        let perfect = binary_classification_metrics(&labels, &labels).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision()?, perfect.recall()?, perfect.f1()?), (1.0, 1.0, 1.0, 1.0));

        let silent = binary_classification_metrics(&[No; 4], &labels).unwrap();
        assert_eq!(silent.accuracy, 0.5);
        assert_eq!(silent.recall, Some(0.0));
        assert!(matches!(silent.precision(), Err(Error::Undefined(_))));

        let preds = [Yes, Yes, Yes, Yes, No, No];
        let truth = [Yes, Yes, Yes, No, Yes, Yes];
        let m = binary_classification_metrics(&preds, &truth).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (3, 1, 2));
        assert_eq!((m.precision, m.recall), (Some(0.75), Some(0.6)));
        assert!((m.f1.unwrap() - 2.0 / (1.0 / 0.75 + 1.0 / 0.6)).abs() < 1e-15);

        let no_pos = binary_classification_metrics(&[No, Yes], &[No, No]).unwrap();
        assert!(matches!(no_pos.recall(), Err(Error::Undefined(_))));
        Ok(())
    }

    #[test]
    fn binning_examples() {
        let stat: Vec<f64> = (1..=10).map(f64::from).collect();
        let metrics: Vec<Vec<f64>> = stat.iter().map(|s| vec![2.0 * s]).collect();
        let r = binned_analysis(&stat, &metrics, 10).unwrap();
        assert_eq!(r.counts, vec![1; 10]);
        assert_eq!(r.statistic_means, stat);
        assert!(!r.collapsed);
        let metric_col: Vec<f64> = r.metric_means.iter().map(|m| m[0]).collect();
        assert_eq!(spearman_rho(&r.statistic_means, &metric_col).unwrap().rho, 1.0);

        let flat = binned_analysis(&[3.0; 6], &vec![vec![1.0]; 6], 3).unwrap();
        assert!(flat.collapsed);
        assert_eq!(flat.counts, vec![6]);

        assert!(matches!(binned_analysis(&[1.0, 2.0], &[vec![], vec![]], 3), Err(Error::Usage(_))));
        let csv = r.to_csv(&["chair_s"]);
        assert!(csv.starts_with("bin,lower,upper,count,statistic_mean,chair_s\n0,1,2,1,1,2\n"));
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = spearman_rho(&x, &y);
            let fx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() + 3.0 * v).collect();
            let fy: Vec<f64> = y.iter().map(|v| v.powi(3) - 7.0).collect();
            match (base, spearman_rho(&fx, &fy)) {
                (Ok(a), Ok(b)) => prop_assert!((a.rho - b.rho).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }

        #[test]
        fn wilcoxon_exact_matches_enumeration(
            d in prop::collection::vec(prop::sample::select(vec![-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0, 4.5]), 1..=12)
        ) {
            let s = PairedSample::new(d.clone(), vec![0.0; d.len()]).unwrap();
            match wilcoxon_signed_rank(&s, Alternative::TwoSided) {
                Ok(w) => prop_assert!((w.p_value - brute_force_wilcoxon(&d)).abs() < 1e-12),
                Err(e) => prop_assert!(matches!(e, Error::Degenerate(_)) && d.iter().all(|v| *v == 0.0)),
            }
        }

        #[test]
        fn chair_scores_are_fractions(
            caps in prop::collection::vec((1usize..6, 0usize..6), 1..10)
        ) {
            let corpus: Vec<CaptionObjects> = caps.iter().map(|&(m, h)| {
                let mentioned: BTreeSet<String> = (0..m).map(|i| format!("o{i}")).collect();
                let hallucinated = mentioned.iter().take(h.min(m)).cloned().collect();
                CaptionObjects { mentioned, hallucinated }
            }).collect();
            let c = chair_scores(&corpus).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.chair_s) && (0.0..=1.0).contains(&c.chair_i));
            let none = caps.iter().all(|&(_, h)| h == 0);
            prop_assert_eq!(none, c.chair_s == 0.0);
            prop_assert_eq!(none, c.chair_i == 0.0);
        }

        #[test]
        fn bin_means_stay_within_members(
            stat in prop::collection::vec(-5.0f64..5.0, 1..40), bins in 1usize..8
        ) {
            prop_assume!(bins <= stat.len());
            let metrics: Vec<Vec<f64>> = stat.iter().map(|s| vec![s * s]).collect();
            let r = binned_analysis(&stat, &metrics, bins).unwrap();
            prop_assert_eq!(r.counts.iter().sum::<usize>(), stat.len());
            for b in 0..r.num_bins() {
                prop_assert!(r.edges[b] <= r.statistic_means[b] + 1e-12);
                prop_assert!(r.statistic_means[b] <= r.edges[b + 1] + 1e-12);
            }
        }
    }
}
