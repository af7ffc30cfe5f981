//! Confusion-matrix metrics and multi-model comparison reports.
//!
//! FAKE is the positive class throughout: a sample counts as predicted FAKE
//! when its probability is at least the threshold.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::datapipe::{BatchStream, DataError, FileLoader, StreamConfig};
use crate::ingest::{CropIndex, IndexRow};
use crate::manifest::{Label, Split};
use crate::model::Classifier;
use crate::Scalar;

pub const DEFAULT_TEST_SAMPLE: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Claimed and computed accuracy may differ by this much (in percent)
/// before a footnote is attached.
pub const ACCURACY_TOLERANCE_PCT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels and probabilities differ in length ({labels} vs {probabilities})")]
    LengthMismatch { labels: usize, probabilities: usize },
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("no models to compare")]
    NoModels,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics<T: Scalar>(&self) -> Metrics<T> {
        let ratio = |num: u64, den: u64| (den > 0).then(|| T::of(num as f64) / T::of(den as f64));
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f_score = match (precision, recall) {
            (Some(p), Some(r)) if p + r > T::zero() => Some(T::of(2.0) * p * r / (p + r)),
            _ => None,
        };
        Metrics {
            precision,
            recall,
            f_score,
            accuracy: ratio(self.tp + self.tn, self.total()),
        }
    }
}

/// Tallies predictions against ground truth (1 = FAKE, 0 = REAL).
pub fn confusion<T: Scalar>(labels: &[T], probabilities: &[T], threshold: T) -> Result<Confusion, EvalError> {
    if labels.len() != probabilities.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            probabilities: probabilities.len(),
        });
    }
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(EvalError::Threshold(threshold.as_f64()));
    }
    let half = T::of(0.5);
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(probabilities) {
        match (y >= half, p >= threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn undefined_or<T: Scalar, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(x.as_f64()),
        None => s.serialize_str("undefined"),
    }
}

/// Ratios in `[0, 1]`; `None` where the denominator is zero. Serialized
/// absent values read `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct Metrics<T> {
    #[serde(serialize_with = "undefined_or")]
    pub precision: Option<T>,
    #[serde(serialize_with = "undefined_or")]
    pub recall: Option<T>,
    #[serde(serialize_with = "undefined_or")]
    pub f_score: Option<T>,
    #[serde(serialize_with = "undefined_or")]
    pub accuracy: Option<T>,
}

/// Draws up to `n` test rows without replacement, returned in index order.
pub fn sample_test_set(rows: &[IndexRow], n: usize, seed: u64) -> Result<Vec<IndexRow>, EvalError> {
    let test: Vec<&IndexRow> = rows.iter().filter(|r| r.split == Split::Test).collect();
    if test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, test.len(), n.min(test.len())).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| test[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct Evaluation<T> {
    pub confusion: Confusion,
    pub metrics: Metrics<T>,
    pub threshold: f64,
    pub samples: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSample {
    pub crop_path: String,
    pub label: Label,
    pub probability_fake: f64,
}

/// Scores a seeded sample of the test split.
pub fn evaluate<T: Scalar>(
    model: &Classifier<T>,
    index: &CropIndex,
    n: usize,
    seed: u64,
    threshold: f64,
) -> Result<Evaluation<T>, EvalError> {
    let rows = sample_test_set(&index.rows, n, seed)?;
    let mut cfg = StreamConfig::new(Split::Test, model.input_size()).with_seed(None);
    cfg.cache = false;
    cfg.augment = false;
    let mut stream = BatchStream::<T>::from_rows(&index.root, rows.clone(), cfg, std::sync::Arc::new(FileLoader))?;
    let mut labels = Vec::with_capacity(rows.len());
    let mut probs = Vec::with_capacity(rows.len());
    for batch in stream.epoch() {
        let batch = batch?;
        probs.extend(model.predict(&batch.pixels, batch.len())?);
        labels.extend(batch.labels);
    }
    let confusion = confusion(&labels, &probs, T::of(threshold))?;
    Ok(Evaluation {
        confusion,
        metrics: confusion.metrics(),
        threshold,
        samples: rows
            .into_iter()
            .zip(&probs)
            .map(|(r, p)| ScoredSample {
                crop_path: r.crop_path,
                label: r.label,
                probability_fake: p.as_f64(),
            })
            .collect(),
    })
}

/// One model's counts plus an optional externally reported accuracy in
/// percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub confusion: Confusion,
    #[serde(default)]
    pub claimed_accuracy_pct: Option<f64>,
}

/// Published test-sample counts for the three backbones (128 FAKE, 128 REAL
/// per model) together with the accuracies printed alongside them.
pub fn reference_results() -> Vec<ModelResult> {
    vec![
        ModelResult {
            model: "ResNet50".into(),
            confusion: Confusion::new(106, 22, 103, 25),
            claimed_accuracy_pct: Some(82.081),
        },
        ModelResult {
            model: "EfficientNetB0".into(),
            confusion: Confusion::new(108, 20, 104, 24),
            claimed_accuracy_pct: Some(83.01),
        },
        ModelResult {
            model: "InceptionResNetV2".into(),
            confusion: Confusion::new(120, 8, 83, 45),
            claimed_accuracy_pct: Some(90.08),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(serialize_with = "undefined_or")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub recall: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub f_score: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub accuracy: Option<f64>,
    /// Footnote markers such as `"[1]"`; empty when none apply.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricWinner {
    pub metric: String,
    /// Every model sharing the best value.
    pub models: Vec<String>,
    pub tie: bool,
}

/// Per-metric series for a grouped bar chart, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSeries {
    pub metric: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub best: Vec<MetricWinner>,
    pub footnotes: Vec<String>,
    pub plot: Vec<PlotSeries>,
}

pub const METRIC_NAMES: [&str; 4] = ["precision", "recall", "f_score", "accuracy"];

fn metric_values(m: &Metrics<f64>) -> [Option<f64>; 4] {
    [m.precision, m.recall, m.f_score, m.accuracy]
}

/// Recomputes every metric from raw counts and ranks the models.
pub fn compare_models(results: &[ModelResult]) -> Result<ComparisonReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoModels);
    }
    let metrics: Vec<Metrics<f64>> = results.iter().map(|r| r.confusion.metrics()).collect();
    let mut footnotes = Vec::new();
    let rows = results
        .iter()
        .zip(&metrics)
        .map(|(r, m)| {
            let mut notes = Vec::new();
            if let Some(claimed) = r.claimed_accuracy_pct {
                let computed = m.accuracy.map(|a| a * 100.0);
                let off = computed.is_none_or(|c| (c - claimed).abs() > ACCURACY_TOLERANCE_PCT);
                if off {
                    footnotes.push(format!(
                        "{}: reported accuracy {claimed}% differs from {} computed from the confusion matrix",
                        r.model,
                        computed.map_or("undefined".into(), |c| format!("{c}%")),
                    ));
                    notes.push(format!("[{}]", footnotes.len()));
                }
            }
            ReportRow {
                model: r.model.clone(),
                tp: r.confusion.tp,
                fp: r.confusion.fp,
                tn: r.confusion.tn,
                fn_: r.confusion.fn_,
                precision: m.precision,
                recall: m.recall,
                f_score: m.f_score,
                accuracy: m.accuracy,
                notes,
            }
        })
        .collect();

    let mut best = Vec::new();
    let mut plot = Vec::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<Option<f64>> = metrics.iter().map(|m| metric_values(m)[k]).collect();
        let top = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let models: Vec<String> = results
            .iter()
            .zip(&vals)
            .filter(|(_, v)| **v == Some(top))
            .map(|(r, _)| r.model.clone())
            .collect();
        if !models.is_empty() {
            best.push(MetricWinner {
                metric: name.to_string(),
                tie: models.len() > 1,
                models,
            });
        }
        plot.push(PlotSeries {
            metric: name.to_string(),
            values: vals.iter().map(|v| v.map(|x| x * 100.0)).collect(),
        });
    }
    Ok(ComparisonReport {
        rows,
        best,
        footnotes,
        plot,
    })
}

impl ComparisonReport {
    pub fn winner(&self, metric: &str) -> Option<&MetricWinner> {
        self.best.iter().find(|w| w.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Write {
            path: "report.csv".into(),
            message: e.to_string(),
        };
        w.write_record(["model", "tp", "fp", "tn", "fn", "precision", "recall", "f_score", "accuracy"])
            .map_err(err)?;
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.tn.to_string(),
                r.fn_.to_string(),
                cell(r.precision),
                cell(r.recall),
                cell(r.f_score),
                cell(r.accuracy),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Write {
            path: "report.csv".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |p: &Path, e: std::io::Error| EvalError::Write {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| io(&csv_path, e))?;
        let json_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| io(&json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-4)
    }

    #[test]
    fn published_rows() {
        let expect = [
            (0.8281, 0.8092, 0.8185, 0.8164),
            (0.8438, 0.8182, 0.8308, 0.8281),
            (0.9375, 0.7273, 0.8191, 0.7930),
        ];
        for (r, (p, rc, f, a)) in reference_results().iter().zip(expect) {
            let m: Metrics<f64> = r.confusion.metrics();
            assert!(close(m.precision, p), "{} precision {:?}", r.model, m.precision);
            assert!(close(m.recall, rc), "{} recall {:?}", r.model, m.recall);
            assert!((m.f_score.unwrap() - f).abs() < 5e-4, "{} f {:?}", r.model, m.f_score);
            assert!(close(m.accuracy, a), "{} accuracy {:?}", r.model, m.accuracy);
        }
    }

    #[test]
    fn exact_accuracies() {
        let acc: Vec<f64> = reference_results()
            .iter()
            .map(|r| r.confusion.metrics::<f64>().accuracy.unwrap() * 100.0)
            .collect();
        assert_eq!(acc, vec![81.640625, 82.8125, 79.296875]);
    }

    #[test]
    fn comparison_flags_discrepancy() {
        let rep = compare_models(&reference_results()).unwrap();
        assert_eq!(rep.winner("precision").unwrap().models, vec!["InceptionResNetV2"]);
        assert_eq!(rep.winner("recall").unwrap().models, vec!["EfficientNetB0"]);
        assert_eq!(rep.winner("accuracy").unwrap().models, vec!["EfficientNetB0"]);
        let irv2 = &rep.rows[2];
        assert!(!irv2.notes.is_empty());
        assert!(rep.footnotes.iter().any(|f| f.contains("90.08") && f.contains("79.296875")));
    }

    #[test]
    fn ties_are_reported() {
        let a = ModelResult {
            model: "a".into(),
            confusion: Confusion::new(5, 5, 5, 5),
            claimed_accuracy_pct: None,
        };
        let b = ModelResult { model: "b".into(), ..a.clone() };
        let rep = compare_models(&[a, b]).unwrap();
        let w = rep.winner("accuracy").unwrap();
        assert!(w.tie);
        assert_eq!(w.models.len(), 2);
    }

    #[test]
    fn undefined_metrics() {
        let m: Metrics<f64> = Confusion::new(0, 0, 5, 0).metrics();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.accuracy, Some(1.0));
        let json = serde_json::to_value(m).unwrap();
        assert_eq!(json["precision"], "undefined");
        assert_eq!(json["accuracy"], 1.0);
    }

    #[test]
    fn threshold_boundary_counts_as_fake() {
        let c = confusion(&[1.0, 0.0], &[0.5, 0.5], 0.5).unwrap();
        assert_eq!(c, Confusion::new(1, 1, 0, 0));
        assert!(confusion(&[1.0], &[0.5], 1.5).is_err());
        assert!(confusion(&[1.0], &[], 0.5).is_err());
        assert_eq!(confusion::<f64>(&[], &[], 0.5).unwrap(), Confusion::default());
        assert_eq!(confusion(&[1.0, 1.0], &[0.9, 0.2], 0.5).unwrap(), Confusion::new(1, 0, 0, 1));
    }

    #[test]
    fn csv_layout() {
        let rep = compare_models(&reference_results()[..1]).unwrap();
        let csv = rep.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "model,tp,fp,tn,fn,precision,recall,f_score,accuracy");
        assert!(lines.next().unwrap().starts_with("ResNet50,106,22,103,25,0.828125,"));
    }

    #[test]
    fn test_sample_is_seeded_and_test_only() {
        let rows: Vec<IndexRow> = (0..300)
            .map(|i| IndexRow {
                crop_path: format!("c{i}"),
                video: "v".into(),
                label: Label::Fake,
                split: if i % 3 == 0 { Split::Test } else { Split::Train },
                frame_index: i,
                box_index: 0,
            })
            .collect();
        let a = sample_test_set(&rows, 50, 1).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|r| r.split == Split::Test));
        assert_eq!(a, sample_test_set(&rows, 50, 1).unwrap());
        assert_eq!(sample_test_set(&rows, 1000, 1).unwrap().len(), 100);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 0..120), 0.0f64..=1.0).prop_map(|(pairs, t)| {
            let labels = pairs.iter().map(|(y, _)| if *y { 1.0 } else { 0.0 }).collect();
            (labels, pairs.into_iter().map(|(_, p)| p).collect(), t)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn agrees_with_recount((labels, probs, t) in instance()) {
            let c = confusion(&labels, &probs, t).unwrap();
            let count = |y: f64, fake: bool| labels.iter().zip(&probs).filter(|(l, p)| **l == y && (**p >= t) == fake).count() as u64;
            let (tp, fp, tn, fn_) = (count(1.0, true), count(0.0, true), count(0.0, false), count(1.0, false));
            prop_assert_eq!(c, Confusion::new(tp, fp, tn, fn_));
            let m: Metrics<f64> = c.metrics();
            if tp + fp > 0 {
                prop_assert!((m.precision.unwrap() - tp as f64 / (tp + fp) as f64).abs() <= 1e-12);
            }
            if !labels.is_empty() {
                prop_assert!((m.accuracy.unwrap() - (tp + tn) as f64 / labels.len() as f64).abs() <= 1e-12);
            }
        }

        #[test]
        fn threshold_monotone((labels, probs, t) in instance(), dt in 0.0f64..=1.0) {
            let hi = (t + dt).min(1.0);
            let a = confusion(&labels, &probs, t).unwrap();
            let b = confusion(&labels, &probs, hi).unwrap();
            prop_assert!(b.tp <= a.tp);
            prop_assert!(b.tn >= a.tn);
        }

        #[test]
        fn relabeling_swaps_roles((labels, probs, t) in instance()) {
            let c = confusion(&labels, &probs, t).unwrap();
            // REAL as the positive class: tp<->tn and fp<->fn
            let swapped = Confusion::new(c.tn, c.fn_, c.tp, c.fp);
            let (m, s): (Metrics<f64>, Metrics<f64>) = (c.metrics(), swapped.metrics());
            prop_assert_eq!(m.accuracy, s.accuracy);
            let npv = (c.tn + c.fn_ > 0).then(|| c.tn as f64 / (c.tn + c.fn_) as f64);
            let specificity = (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64);
            prop_assert_eq!(s.precision, npv);
            prop_assert_eq!(s.recall, specificity);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let c = Confusion::new(tp, fp, tn, fn_);
            let m: Metrics<f64> = c.metrics();
            for v in [m.precision, m.recall, m.f_score, m.accuracy].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f_score) {
                prop_assert!(f <= p.max(r) + 1e-12 && f >= p.min(r) - 1e-12);
            }
            prop_assert_eq!(m.accuracy.is_none(), c.total() == 0);
        }

        #[test]
        fn confusion_sums_to_n(pairs in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 0..200), t in 0.0f64..=1.0) {
            let labels: Vec<f64> = pairs.iter().map(|(y, _)| if *y { 1.0 } else { 0.0 }).collect();
            let probs: Vec<f64> = pairs.iter().map(|(_, p)| *p).collect();
            let c = confusion(&labels, &probs, t).unwrap();
            prop_assert_eq!(c.total() as usize, pairs.len());
            prop_assert_eq!((c.tp + c.fn_) as usize, labels.iter().filter(|&&y| y == 1.0).count());
        }
    }
}
