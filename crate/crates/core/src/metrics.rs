//! Evaluation protocol: confusion-derived metrics at a threshold, rank AUC,
//! interpolated EER, normalized minimum detection cost, category-weighted
//! accuracy and a threshold calibration sweep.
//!
//! Real is the target (positive) class throughout unless a caller asks for
//! the fake-positive view. The false-positive rate at threshold `t` is the
//! fraction of fakes scored `>= t`; the false-negative rate is the fraction of
//! reals scored `< t`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{decide, Category, DecisionPolicy, Label, Score};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub id: String,
    pub score: Score,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    pub fn new(entries: Vec<ScoredEntry>) -> Result<ScoredSet> {
        if entries.is_empty() {
            return Err(Error::invalid("scored set is empty"));
        }
        Ok(ScoredSet { entries })
    }

    /// Convenience constructor with generated ids.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Label)>) -> Result<ScoredSet> {
        let entries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, label))| {
                Ok(ScoredEntry {
                    id: i.to_string(),
                    score: Score::new(s)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScoredSet::new(entries)
    }

    pub fn entries(&self) -> &[ScoredEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Same scores with every label flipped.
    pub fn label_swapped(&self) -> ScoredSet {
        ScoredSet {
            entries: self
                .entries
                .iter()
                .map(|e| ScoredEntry {
                    label: e.label.flipped(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let reals = self.count(Label::Real);
        let fakes = self.len() - reals;
        if reals == 0 || fakes == 0 {
            return Err(Error::invalid("metric needs both real and fake samples"));
        }
        Ok((reals, fakes))
    }
}

/// Which label counts as the positive class for precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    #[default]
    Real,
    Fake,
}

impl PositiveClass {
    fn label(self) -> Label {
        match self {
            PositiveClass::Real => Label::Real,
            PositiveClass::Fake => Label::Fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        if p + r == 0.0 {
            None
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion(set: &ScoredSet, policy: DecisionPolicy, positive: PositiveClass) -> Confusion {
    let pos = positive.label();
    let mut c = Confusion::default();
    for e in set.entries() {
        let predicted = decide(e.score, policy);
        match (predicted == pos, e.label == pos) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Flat record in the column order of the comparison tables. Ratios that are
/// undefined for the given set are `None`, never a silent zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub eer: Option<f64>,
    pub dcf: Option<f64>,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricReport {
    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "auc={}", opt(self.auc))?;
        writeln!(f, "accuracy={:.4}", self.accuracy)?;
        writeln!(f, "f1={}", opt(self.f1))?;
        writeln!(f, "precision={}", opt(self.precision))?;
        writeln!(f, "recall={}", opt(self.recall))?;
        writeln!(f, "eer={}", opt(self.eer))?;
        writeln!(f, "dcf={}", opt(self.dcf))?;
        writeln!(f, "threshold={}", self.threshold)?;
        write!(f, "tp={} fp={} tn={} fn={}", self.tp, self.fp, self.tn, self.fn_)
    }
}

/// Confusion-derived part of a [`MetricReport`]; the ranking metrics are left
/// unset.
pub fn threshold_metrics(set: &ScoredSet, policy: DecisionPolicy) -> MetricReport {
    threshold_metrics_with(set, policy, PositiveClass::Real)
}

pub fn threshold_metrics_with(set: &ScoredSet, policy: DecisionPolicy, positive: PositiveClass) -> MetricReport {
    let c = confusion(set, policy, positive);
    MetricReport {
        auc: None,
        accuracy: c.accuracy(),
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        eer: None,
        dcf: None,
        threshold: policy.threshold(),
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    }
}

/// Full report; ranking metrics are `None` when a class is missing.
pub fn evaluate(set: &ScoredSet, policy: DecisionPolicy, dcf: DcfParams) -> MetricReport {
    let mut report = threshold_metrics(set, policy);
    report.auc = roc_auc(set).ok();
    report.eer = eer(set).ok();
    report.dcf = min_dcf(set, dcf).ok().map(|d| d.value);
    report
}

/// Probability that a random real outscores a random fake, ties counted 1/2.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let (reals, fakes) = set.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = set.entries().iter().map(|e| (e.score.value(), e.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk tie groups in ascending order, tracking fakes strictly below.
    let mut fakes_below = 0usize;
    let mut twice_wins = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut r, mut f) = (0usize, 0usize);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            match sorted[j].1 {
                Label::Real => r += 1,
                Label::Fake => f += 1,
            }
            j += 1;
        }
        twice_wins += (r as u128) * (2 * fakes_below + f) as u128;
        fakes_below += f;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * reals as f64 * fakes as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Acceptance threshold; `+inf` rejects everything.
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Error rates at every distinct score plus the reject-all point, in
/// ascending threshold order.
pub fn operating_points(set: &ScoredSet) -> Result<Vec<OperatingPoint>> {
    let (reals, fakes) = set.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = set.entries().iter().map(|e| (e.score.value(), e.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    let (mut reals_below, mut fakes_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(OperatingPoint {
            threshold: t,
            fpr: (fakes - fakes_below) as f64 / fakes as f64,
            fnr: reals_below as f64 / reals as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Real => reals_below += 1,
                Label::Fake => fakes_below += 1,
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        fnr: 1.0,
    });
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two adjacent
/// operating points where `fnr - fpr` changes sign.
pub fn eer(set: &ScoredSet) -> Result<f64> {
    let points = operating_points(set)?;
    // fnr - fpr is strictly increasing along the sweep: -1 at the first point, +1 at the last.
    let j = points
        .iter()
        .position(|p| p.fnr - p.fpr >= 0.0)
        .expect("reject-all point has fnr - fpr = 1");
    let b = points[j];
    let db = b.fnr - b.fpr;
    if db == 0.0 || j == 0 {
        return Ok(b.fpr);
    }
    let a = points[j - 1];
    let da = a.fnr - a.fpr;
    let t = -da / (db - da);
    Ok(a.fpr + t * (b.fpr - a.fpr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.5,
        }
    }
}

impl DcfParams {
    pub fn new(c_miss: f64, c_fa: f64, p_target: f64) -> Result<DcfParams> {
        let p = DcfParams { c_miss, c_fa, p_target };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.c_miss.is_finite() && self.c_fa.is_finite()) {
            return Err(Error::config("detection costs must be positive and finite"));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::config("p_target must lie strictly inside (0, 1)"));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Normalized cost at one operating point.
    pub fn cost(&self, fnr: f64, fpr: f64) -> f64 {
        (self.c_miss * self.p_target * fnr + self.c_fa * (1.0 - self.p_target) * fpr) / self.normalizer()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfResult {
    pub value: f64,
    pub threshold: f64,
    pub fnr: f64,
    pub fpr: f64,
}

/// Normalized minimum detection cost over all thresholds (real = target).
pub fn min_dcf(set: &ScoredSet, params: DcfParams) -> Result<DcfResult> {
    params.validate()?;
    let points = operating_points(set)?;
    let best = points
        .iter()
        .map(|p| (params.cost(p.fnr, p.fpr), p))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least two operating points");
    Ok(DcfResult {
        value: best.0,
        threshold: best.1.threshold,
        fnr: best.1.fnr,
        fpr: best.1.fpr,
    })
}

/// Sample count and accuracy of one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub category: Option<Category>,
    pub n: usize,
    pub accuracy: f64,
}

impl CategoryStat {
    pub fn new(category: Option<Category>, n: usize, accuracy: f64) -> Result<CategoryStat> {
        if n == 0 {
            return Err(Error::invalid("category stat needs n >= 1"));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!("accuracy {accuracy} outside [0, 1]")));
        }
        Ok(CategoryStat { category, n, accuracy })
    }
}

/// `sum(n_i * a_i) / sum(n_i)`.
pub fn weighted_accuracy(stats: &[CategoryStat]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::invalid("weighted accuracy of an empty list"));
    }
    for s in stats {
        CategoryStat::new(s.category, s.n, s.accuracy)?;
    }
    let total: usize = stats.iter().map(|s| s.n).sum();
    let weighted: f64 = stats.iter().map(|s| s.n as f64 * s.accuracy).sum();
    Ok(weighted / total as f64)
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Normalized detection cost at exactly this threshold.
    pub dcf: Option<f64>,
    /// Threshold-free, repeated on every row for convenience.
    pub eer: Option<f64>,
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..20).map(|i| f64::from(i) * 0.05).collect()
}

/// Evaluates every threshold in `thresholds` (sorted ascending in the output).
pub fn calibrate(set: &ScoredSet, thresholds: &[f64], params: DcfParams) -> Result<Vec<CalibrationRow>> {
    params.validate()?;
    if thresholds.is_empty() {
        return Err(Error::config("threshold sweep is empty"));
    }
    let mut grid = thresholds
        .iter()
        .map(|&t| DecisionPolicy::new(t))
        .collect::<Result<Vec<_>>>()?;
    grid.sort_by(|a, b| a.threshold().total_cmp(&b.threshold()));
    grid.dedup();
    let both = set.require_both_classes().is_ok();
    let eer_value = eer(set).ok();
    let (reals, fakes) = (set.count(Label::Real), set.count(Label::Fake));
    Ok(grid
        .into_iter()
        .map(|policy| {
            let c = confusion(set, policy, PositiveClass::Real);
            let dcf = both.then(|| params.cost(c.fn_ as f64 / reals as f64, c.fp as f64 / fakes as f64));
            CalibrationRow {
                threshold: policy.threshold(),
                tp: c.tp,
                fp: c.fp,
                tn: c.tn,
                fn_: c.fn_,
                accuracy: c.accuracy(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                dcf,
                eer: eer_value,
            }
        })
        .collect())
}

/// Highest-accuracy row; ties go to the lower threshold.
pub fn best_threshold(rows: &[CalibrationRow]) -> Option<&CalibrationRow> {
    rows.iter().fold(None, |best: Option<&CalibrationRow>, r| match best {
        Some(b) if b.accuracy >= r.accuracy => Some(b),
        _ => Some(r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(reals: &[f64], fakes: &[f64]) -> ScoredSet {
        ScoredSet::from_pairs(
            reals
                .iter()
                .map(|&s| (s, Label::Real))
                .chain(fakes.iter().map(|&s| (s, Label::Fake))),
        )
        .unwrap()
    }

    fn policy(t: f64) -> DecisionPolicy {
        DecisionPolicy::new(t).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let r = threshold_metrics(&s, policy(0.3));
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (1.0, Some(1.0), Some(1.0), Some(1.0))
        );
        assert_eq!(roc_auc(&s).unwrap(), 1.0);
        assert_eq!(eer(&s).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, DcfParams::default()).unwrap().value, 0.0);
        assert_eq!(min_dcf(&s, DcfParams::new(7.0, 0.3, 0.9).unwrap()).unwrap().value, 0.0);
    }

    #[test]
    fn hand_counted_confusion() {
        let r = threshold_metrics(&set(&[0.9, 0.2], &[0.4, 0.1]), policy(0.3));
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 1));
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (0.5, Some(0.5), Some(0.5), Some(0.5))
        );
    }

    #[test]
    fn missing_class_leaves_ratios_undefined() {
        let s = set(&[], &[0.1, 0.7]);
        let r = threshold_metrics(&s, policy(0.3));
        assert_eq!(r.recall, None);
        assert_eq!(r.precision, Some(0.0));
        assert_eq!(r.f1, None);
        assert!(roc_auc(&s).is_err());
        assert!(eer(&s).is_err());
        assert!(min_dcf(&s, DcfParams::default()).is_err());
        let full = evaluate(&s, policy(0.3), DcfParams::default());
        assert_eq!((full.auc, full.eer, full.dcf), (None, None, None));
        assert!(ScoredSet::new(vec![]).is_err());
    }

    #[test]
    fn fake_positive_view() {
        let s = set(&[0.9, 0.2], &[0.4, 0.1, 0.05]);
        let real = threshold_metrics(&s, policy(0.3));
        let fake = threshold_metrics_with(&s, policy(0.3), PositiveClass::Fake);
        assert_eq!(
            (fake.tp, fake.fp, fake.tn, fake.fn_),
            (real.tn, real.fn_, real.tp, real.fp)
        );
        assert_eq!(fake.accuracy, real.accuracy);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 0.0);
        assert_eq!(roc_auc(&set(&[0.9, 0.4], &[0.6, 0.1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&set(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn eer_and_dcf_examples() {
        let s = set(&[0.8, 0.7, 0.3], &[0.6, 0.2, 0.1]);
        assert!((eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((min_dcf(&s, DcfParams::default()).unwrap().value - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(eer(&set(&[0.2, 0.8], &[0.2, 0.8])).unwrap(), 0.5);
        assert_eq!(eer(&set(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn huge_miss_cost_accepts_every_real() {
        let s = set(&[0.8, 0.7, 0.3], &[0.6, 0.2, 0.1]);
        let d = min_dcf(&s, DcfParams::new(1e6, 1.0, 0.5).unwrap()).unwrap();
        assert_eq!(d.fnr, 0.0);
        assert!(d.threshold <= 0.3);
    }

    #[test]
    fn dcf_params_validation() {
        assert!(DcfParams::new(0.0, 1.0, 0.5).is_err());
        assert!(DcfParams::new(1.0, 1.0, 1.0).is_err());
        assert!(DcfParams::new(1.0, -1.0, 0.5).is_err());
    }

    #[test]
    fn weighted_accuracy_cases() {
        let stat = |n, a| CategoryStat::new(None, n, a).unwrap();
        assert!((weighted_accuracy(&[stat(3, 0.7), stat(10, 0.7)]).unwrap() - 0.7).abs() < 1e-15);
        assert!((weighted_accuracy(&[stat(5, 0.42)]).unwrap() - 0.42).abs() < 1e-15);
        assert!((weighted_accuracy(&[stat(1, 1.0), stat(3, 0.0)]).unwrap() - 0.25).abs() < 1e-15);
        assert!(weighted_accuracy(&[]).is_err());
        assert!(CategoryStat::new(None, 0, 0.5).is_err());
        assert!(CategoryStat::new(None, 1, 1.5).is_err());
    }

    #[test]
    fn calibration_sweep_is_sorted_and_deduplicated() {
        let s = set(&[0.8, 0.7, 0.3], &[0.6, 0.2, 0.1]);
        let rows = calibrate(&s, &[0.5, 0.3, 0.5, 0.1], DcfParams::default()).unwrap();
        let ts: Vec<f64> = rows.iter().map(|r| r.threshold).collect();
        assert_eq!(ts, vec![0.1, 0.3, 0.5]);
        assert!(calibrate(&s, &[], DcfParams::default()).is_err());
        assert!(calibrate(&s, &[1.0], DcfParams::default()).is_err());
        let best = best_threshold(&rows).unwrap();
        assert_eq!(best.threshold, 0.3);
        assert_eq!(default_threshold_grid().len(), 19);
    }

    fn arb_set() -> impl Strategy<Value = ScoredSet> {
        prop::collection::vec((0u8..=20, any::<bool>()), 2..60).prop_filter_map("both classes", |v| {
            let pairs: Vec<(f64, Label)> = v
                .into_iter()
                .map(|(s, r)| (f64::from(s) / 20.0, if r { Label::Real } else { Label::Fake }))
                .collect();
            let s = ScoredSet::from_pairs(pairs).ok()?;
            (s.count(Label::Real) > 0 && s.count(Label::Fake) > 0).then_some(s)
        })
    }

    proptest! {
        #[test]
        fn auc_complements_under_label_swap(s in arb_set()) {
            let a = roc_auc(&s).unwrap();
            let b = roc_auc(&s.label_swapped()).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(s in arb_set()) {
            let warped = ScoredSet::new(s.entries().iter().map(|e| ScoredEntry {
                score: Score::new(e.score.value().powi(3)).unwrap(),
                ..e.clone()
            }).collect()).unwrap();
            prop_assert_eq!(roc_auc(&s).unwrap(), roc_auc(&warped).unwrap());
        }

        #[test]
        fn dcf_bounded_by_twice_eer(s in arb_set()) {
            let e = eer(&s).unwrap();
            let d = min_dcf(&s, DcfParams::default()).unwrap().value;
            prop_assert!(e >= 0.0 && d >= 0.0);
            prop_assert!(d <= 2.0 * e + 1e-12, "dcf {} eer {}", d, e);
        }

        #[test]
        fn calibration_counts_are_monotone(s in arb_set()) {
            let rows = calibrate(&s, &default_threshold_grid(), DcfParams::default()).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].tp + w[1].fp <= w[0].tp + w[0].fp);
                prop_assert!(w[1].tp <= w[0].tp && w[1].fp <= w[0].fp);
                prop_assert!(w[1].tn >= w[0].tn && w[1].fn_ >= w[0].fn_);
            }
        }
    }
}
