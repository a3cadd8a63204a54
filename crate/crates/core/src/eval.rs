//! Individual- and aggregate-level evaluation metrics.
//!
//! Individual classification is scored per race with one-vs-rest AUC and
//! decile calibration curves. Aggregate composition is scored at the tract
//! level with record-count-weighted RMSE and signed bias of estimated versus
//! self-reported race shares.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::race::{argmax, RaceCategory, RaceVector, NUM_RACES};

/// Number of equal-width calibration bins over [0, 1].
pub const CALIBRATION_BINS: usize = 10;

/// Mann-Whitney AUC of `scores` for the positive class; tied scores count ½.
pub fn auc_one_vs_rest(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (mid)ranks of the positives, ranks starting at 1.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid_rank * positives as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// One calibration bin. Empty bins keep `count == 0` and no means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn populated(&self) -> impl Iterator<Item = &CalibrationBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }

    /// Signed gaps `observed - mean_predicted` of the populated bins.
    pub fn gaps(&self) -> Vec<f64> {
        self.populated()
            .map(|b| b.observed.unwrap() - b.mean_predicted.unwrap())
            .collect()
    }
}

/// Bin index of a score: `[0, 0.1)`, ..., `[0.9, 1.0]` (last edge closed).
fn calibration_bin(score: f64) -> usize {
    ((score.clamp(0.0, 1.0) * CALIBRATION_BINS as f64).floor() as usize).min(CALIBRATION_BINS - 1)
}

/// Mean predicted probability and positive fraction per decile bin.
pub fn calibration_curve(scores: &[f64], labels: &[bool]) -> CalibrationCurve {
    let mut sum = [0.0; CALIBRATION_BINS];
    let mut pos = [0usize; CALIBRATION_BINS];
    let mut count = [0usize; CALIBRATION_BINS];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = calibration_bin(s);
        sum[b] += s;
        count[b] += 1;
        pos[b] += l as usize;
    }
    let bins = (0..CALIBRATION_BINS)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                lower: b as f64 / CALIBRATION_BINS as f64,
                upper: (b + 1) as f64 / CALIBRATION_BINS as f64,
                count: n,
                mean_predicted: (n > 0).then(|| sum[b] / n as f64),
                observed: (n > 0).then(|| pos[b] as f64 / n as f64),
            }
        })
        .collect();
    CalibrationCurve { bins }
}

/// How tract shares are estimated from individual posteriors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Mean of the posterior vectors.
    #[default]
    Prob,
    /// Share of records whose argmax is each race.
    Argmax,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "prob" => Ok(AggregationMode::Prob),
            "argmax" => Ok(AggregationMode::Argmax),
            other => Err(Error::Config(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

/// Estimated and self-reported race shares of one tract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractAggregate {
    pub tract_id: String,
    pub estimated: RaceVector,
    pub truth: RaceVector,
    pub n: usize,
}

/// Group labelled records by tract and average their posteriors, in tract order.
pub fn aggregate_tracts(
    d: &Dataset,
    posteriors: &[RaceVector],
    mode: AggregationMode,
) -> Result<Vec<TractAggregate>> {
    if d.len() != posteriors.len() {
        return Err(Error::Config(format!(
            "{} records but {} posteriors",
            d.len(),
            posteriors.len()
        )));
    }
    let mut acc: BTreeMap<&str, (RaceVector, RaceVector, usize)> = BTreeMap::new();
    for (rec, post) in d.records.iter().zip(posteriors) {
        let label = rec
            .label_index()
            .ok_or_else(|| Error::Data(format!("record {} has no known label", rec.record_id)))?;
        let e = acc
            .entry(rec.tract_id())
            .or_insert(([0.0; NUM_RACES], [0.0; NUM_RACES], 0));
        match mode {
            AggregationMode::Prob => {
                for r in 0..NUM_RACES {
                    e.0[r] += post[r];
                }
            }
            AggregationMode::Argmax => e.0[argmax(post)] += 1.0,
        }
        e.1[label] += 1.0;
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(tract, (est, truth, n))| {
            let k = n as f64;
            TractAggregate {
                tract_id: tract.to_string(),
                estimated: est.map(|x| x / k),
                truth: truth.map(|x| x / k),
                n,
            }
        })
        .collect())
}

fn weighted_errors(aggs: &[TractAggregate], race: usize) -> (f64, f64, f64) {
    let mut sq = 0.0;
    let mut signed = 0.0;
    let mut weight = 0.0;
    for a in aggs {
        let n = a.n as f64;
        let err = a.estimated[race] - a.truth[race];
        sq += n * err * err;
        signed += n * err;
        weight += n;
    }
    (sq, signed, weight)
}

/// Tract-size-weighted RMSE of the estimated share of `race`.
pub fn tract_rmse(aggs: &[TractAggregate], race: usize) -> f64 {
    let (sq, _, w) = weighted_errors(aggs, race);
    if w == 0.0 {
        return f64::NAN;
    }
    (sq / w).sqrt()
}

/// Tract-size-weighted mean signed error; positive means overestimation.
pub fn tract_bias(aggs: &[TractAggregate], race: usize) -> f64 {
    let (_, signed, w) = weighted_errors(aggs, race);
    if w == 0.0 {
        return f64::NAN;
    }
    signed / w
}

/// Metrics of one race under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceMetrics {
    pub race: RaceCategory,
    /// `None` when the race is absent (or universal) in the evaluation data.
    pub auc: Option<f64>,
    pub calibration: CalibrationCurve,
    pub rmse: f64,
    pub bias: f64,
}

/// All metrics of one method on one evaluation dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub state: String,
    pub method: String,
    pub layout: String,
    pub races: Vec<RaceMetrics>,
}

/// Score one method's posteriors against the labels of `d`.
pub fn evaluate_method(
    d: &Dataset,
    posteriors: &[RaceVector],
    method: &str,
    layout: &str,
    mode: AggregationMode,
) -> Result<EvalReport> {
    let aggs = aggregate_tracts(d, posteriors, mode)?;
    let labels: Vec<usize> = d
        .records
        .iter()
        .map(|r| r.label_index().expect("checked by aggregate_tracts"))
        .collect();
    let races = (0..NUM_RACES)
        .map(|r| {
            let scores: Vec<f64> = posteriors.iter().map(|p| p[r]).collect();
            let is_r: Vec<bool> = labels.iter().map(|&l| l == r).collect();
            let auc = match auc_one_vs_rest(&scores, &is_r) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(RaceMetrics {
                race: RaceCategory::ALL[r],
                auc,
                calibration: calibration_curve(&scores, &is_r),
                rmse: tract_rmse(&aggs, r),
                bias: tract_bias(&aggs, r),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        state: d.provenance.join("+"),
        method: method.to_string(),
        layout: layout.to_string(),
        races,
    })
}

/// Named posterior set for [`full_report`].
#[derive(Debug, Clone)]
pub struct MethodPosteriors {
    /// Column label, e.g. `bisg` or `gbm/extended`.
    pub label: String,
    pub layout: String,
    pub posteriors: Vec<RaceVector>,
}

/// Reports for several methods on the same evaluation dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub state: String,
    pub reports: Vec<EvalReport>,
}

/// Metric selector for comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Rmse,
    Bias,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auc, Metric::Rmse, Metric::Bias];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Rmse => "rmse",
            Metric::Bias => "bias",
        }
    }

    fn of(self, m: &RaceMetrics) -> Option<f64> {
        match self {
            Metric::Auc => m.auc,
            Metric::Rmse => Some(m.rmse).filter(|v| v.is_finite()),
            Metric::Bias => Some(m.bias).filter(|v| v.is_finite()),
        }
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into())
}

impl ReportSet {
    /// One row per (method, race).
    pub fn rows(&self) -> impl Iterator<Item = (&EvalReport, &RaceMetrics)> {
        self.reports
            .iter()
            .flat_map(|rep| rep.races.iter().map(move |m| (rep, m)))
    }

    pub fn metric(&self, method: &str, race: usize, metric: Metric) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| metric.of(&r.races[race]))
    }

    /// Long-format CSV: `state,method,layout,race,auc,rmse,bias`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,method,layout,race,auc,rmse,bias\n");
        for (rep, m) in self.rows() {
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.state,
                rep.method,
                rep.layout,
                m.race,
                cell(m.auc),
                cell(Metric::Rmse.of(m)),
                cell(Metric::Bias.of(m)),
            );
        }
        out
    }

    /// Plot-ready calibration rows: `state,method,race,bin,mean,observed,n`.
    pub fn calibration_csv(&self) -> String {
        let mut out = String::from("state,method,race,bin,mean_predicted,observed,n\n");
        for (rep, m) in self.rows() {
            for (i, b) in m.calibration.bins.iter().enumerate() {
                let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.state,
                    rep.method,
                    m.race,
                    i,
                    cell(b.mean_predicted),
                    cell(b.observed),
                    b.count
                );
            }
        }
        out
    }

    /// Wide comparison table for one metric: races as rows, methods as columns.
    pub fn comparison_csv(&self, metric: Metric) -> String {
        let mut out = String::from("state,race");
        for rep in &self.reports {
            out.push(',');
            out.push_str(&rep.method);
        }
        out.push('\n');
        for r in 0..NUM_RACES {
            let _ = write!(out, "{},{}", self.state, RaceCategory::ALL[r]);
            for rep in &self.reports {
                let v = metric.of(&rep.races[r]);
                let _ = write!(
                    out,
                    ",{}",
                    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
                );
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table for one metric with aligned columns.
    pub fn comparison_text(&self, metric: Metric) -> String {
        let width = self
            .reports
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = format!(
            "{} ({})\n{:<10}",
            metric.as_str().to_uppercase(),
            self.state,
            "race"
        );
        for rep in &self.reports {
            let _ = write!(out, " {:>width$}", rep.method);
        }
        out.push('\n');
        for r in 0..NUM_RACES {
            let _ = write!(out, "{:<10}", RaceCategory::ALL[r].as_str());
            for rep in &self.reports {
                let _ = write!(out, " {:>width$}", fmt_cell(metric.of(&rep.races[r])));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate every posterior set against the labels of one state's dataset.
pub fn full_report(
    d: &Dataset,
    methods: &[MethodPosteriors],
    mode: AggregationMode,
) -> Result<ReportSet> {
    let reports = methods
        .iter()
        .map(|m| evaluate_method(d, &m.posteriors, &m.label, &m.layout, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportSet {
        state: d.provenance.join("+"),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PersonRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// O(n_pos * n_neg) pair enumeration.
    fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_one_vs_rest(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap(),
            0.75
        );
        assert_eq!(
            auc_one_vs_rest(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auc_one_vs_rest(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            auc_one_vs_rest(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let a = auc_one_vs_rest(&scores, &labels).unwrap();
            prop_assert!((a - auc_by_pairs(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            // Strictly monotone transform leaves AUC unchanged.
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc_one_vs_rest(&t, &labels).unwrap(), a);
        }
    }

    #[test]
    fn calibration_single_bin_and_edges() {
        let c = calibration_curve(&[0.05; 4], &[true, false, true, false]);
        assert_eq!(c.populated().count(), 1);
        assert_eq!(c.bins[0].observed, Some(0.5));
        assert_eq!(c.bins[3].count, 0);
        assert_eq!(c.bins[3].observed, None);
        let edge = calibration_curve(&[1.0, 0.0, 0.1], &[true, false, false]);
        assert_eq!(edge.bins[9].count, 1);
        assert_eq!(edge.bins[0].count, 1);
        assert_eq!(edge.bins[1].count, 1);
        assert_eq!(edge.total(), 3);
    }

    #[test]
    fn calibrated_monte_carlo_scores_are_close_to_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240601);
        let n = 100_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.random::<f64>() < s).collect();
        let c = calibration_curve(&scores, &labels);
        assert_eq!(c.total(), n);
        let worst = c.gaps().into_iter().map(f64::abs).fold(0.0, f64::max);
        assert!(worst <= 0.02, "max gap {worst}");
    }

    fn rec(id: usize, tract_block: &str, label: RaceCategory) -> PersonRecord {
        PersonRecord {
            record_id: id.to_string(),
            surname: "X".into(),
            first_name: String::new(),
            middle_name: String::new(),
            state: "NC".into(),
            block_id: tract_block.into(),
            label: Some(label),
        }
    }

    const T1: &str = "370010201001000";
    const T2: &str = "370010202001000";
    const T3: &str = "370010203001000";

    #[test]
    fn tract_aggregation_by_hand() {
        use RaceCategory::*;
        let d = Dataset::new(vec![
            rec(0, T1, White),
            rec(1, T1, Black),
            rec(2, T2, Hispanic),
            rec(3, T3, Asian),
            rec(4, T2, White),
            rec(5, T3, Asian),
        ]);
        let posts = vec![
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.2, 0.0, 0.6, 0.2, 0.0],
            [0.0, 0.0, 0.0, 0.5, 0.5],
            [0.6, 0.2, 0.0, 0.0, 0.2],
            [0.1, 0.1, 0.1, 0.6, 0.1],
        ];
        let aggs = aggregate_tracts(&d, &posts, AggregationMode::Prob).unwrap();
        assert_eq!(aggs.len(), 3);
        assert_eq!(aggs[0].tract_id, "37001020100");
        assert_eq!(aggs[0].estimated, [0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(aggs[0].truth, [0.5, 0.5, 0.0, 0.0, 0.0]);
        // Hand-averaged: ((0.2,0,0.6,0.2,0) + (0.6,0.2,0,0,0.2)) / 2
        let expect2 = [0.4, 0.1, 0.3, 0.1, 0.1];
        for r in 0..5 {
            assert!((aggs[1].estimated[r] - expect2[r]).abs() < 1e-15);
        }
        assert_eq!(aggs[1].truth, [0.5, 0.0, 0.5, 0.0, 0.0]);
        let expect3 = [0.05, 0.05, 0.05, 0.55, 0.3];
        for r in 0..5 {
            assert!((aggs[2].estimated[r] - expect3[r]).abs() < 1e-15);
        }
        for a in &aggs {
            assert!((a.estimated.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((a.truth.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let argm = aggregate_tracts(&d, &posts, AggregationMode::Argmax).unwrap();
        assert_eq!(argm[1].estimated, [0.5, 0.0, 0.5, 0.0, 0.0]);
    }

    fn agg(n: usize, err: f64) -> TractAggregate {
        TractAggregate {
            tract_id: "t".into(),
            estimated: [0.5 + err, 0.5 - err, 0.0, 0.0, 0.0],
            truth: [0.5, 0.5, 0.0, 0.0, 0.0],
            n,
        }
    }

    #[test]
    fn weighted_rmse_and_bias_two_tracts() {
        let aggs = [agg(1, 0.1), agg(3, -0.1)];
        // bias = (0.1 - 0.3) / 4 = -0.05; rmse = sqrt((0.01 + 0.03) / 4) = 0.1
        assert!((tract_bias(&aggs, 0) - -0.05).abs() < 1e-15);
        assert!((tract_rmse(&aggs, 0) - 0.1).abs() < 1e-15);
        let single = [agg(7, -0.2)];
        assert!((tract_rmse(&single, 0) - 0.2).abs() < 1e-15);
        assert!((tract_bias(&single, 0) - -0.2).abs() < 1e-15);
        let exact = [agg(5, 0.0)];
        assert_eq!((tract_rmse(&exact, 0), tract_bias(&exact, 0)), (0.0, 0.0));
    }

    fn random_fixture(seed: u64, n: usize) -> (Dataset, Vec<RaceVector>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tracts = [T1, T2, T3];
        let records = (0..n)
            .map(|i| {
                rec(
                    i,
                    tracts[rng.random_range(0..3)],
                    RaceCategory::ALL[rng.random_range(0..5)],
                )
            })
            .collect();
        let posts = (0..n)
            .map(|_| {
                let raw: RaceVector = std::array::from_fn(|_| rng.random::<f64>());
                let s: f64 = raw.iter().sum();
                raw.map(|x| x / s)
            })
            .collect();
        (Dataset::new(records), posts)
    }

    #[test]
    fn report_invariants() {
        let (d, posts) = random_fixture(3, 400);
        let methods = vec![
            MethodPosteriors {
                label: "a".into(),
                layout: "base".into(),
                posteriors: posts.clone(),
            },
            MethodPosteriors {
                label: "b".into(),
                layout: "base".into(),
                posteriors: posts.clone(),
            },
        ];
        let set = full_report(&d, &methods, AggregationMode::Prob).unwrap();
        assert_eq!(set.rows().count(), 2 * NUM_RACES);
        assert_eq!(set.reports[0].races, set.reports[1].races);
        let bias_sum: f64 = (0..NUM_RACES).map(|r| set.reports[0].races[r].bias).sum();
        assert!(bias_sum.abs() < 1e-9);
        for (_, m) in set.rows() {
            assert!(m.rmse + 1e-15 >= m.bias.abs());
            assert_eq!(m.calibration.total(), d.len());
        }
        assert_eq!(set.to_csv().lines().count(), 1 + 2 * NUM_RACES);
        assert_eq!(
            set.comparison_csv(Metric::Auc).lines().count(),
            1 + NUM_RACES
        );
        assert!(set.comparison_text(Metric::Rmse).contains("hispanic"));
        assert_eq!(
            set.calibration_csv().lines().count(),
            1 + 2 * NUM_RACES * CALIBRATION_BINS
        );
    }
}
