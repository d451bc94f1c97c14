//! Pixelwise overlap metrics and their fold-level aggregation.
//!
//! Empty-mask conventions: when both masks are empty every metric is 1.
//! Otherwise a zero denominator yields 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold applied to probability maps before counting.
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

/// Counts over two binary maps (`true` = lesion).
pub fn confusion_counts(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Binarize a probability map at [`THRESHOLD`] (inclusive).
pub fn binarize(p: &[f32]) -> Vec<bool> {
    p.iter().map(|&v| v >= THRESHOLD).collect()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FN)`.
pub fn sen(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    ratio(c.tp, c.tp + c.fn_)
}

/// `TP / (TP + FP)`.
pub fn ppv(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    ratio(c.tp, c.tp + c.fp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dsc: f64,
    pub sen: f64,
    pub ppv: f64,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Scores {
        Scores {
            dsc: dsc(c),
            sen: sen(c),
            ppv: ppv(c),
        }
    }

    fn mean(items: impl ExactSizeIterator<Item = Scores>) -> Scores {
        let n = items.len().max(1) as f64;
        let mut acc = Scores {
            dsc: 0.0,
            sen: 0.0,
            ppv: 0.0,
        };
        for s in items {
            acc.dsc += s.dsc;
            acc.sen += s.sen;
            acc.ppv += s.ppv;
        }
        Scores {
            dsc: acc.dsc / n,
            sen: acc.sen / n,
            ppv: acc.ppv / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub fold: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (`n − 1`); zero for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dsc: MeanStd,
    pub sen: MeanStd,
    pub ppv: MeanStd,
}

impl Summary {
    fn of(scores: &[Scores]) -> Summary {
        let col = |f: fn(&Scores) -> f64| scores.iter().map(f).collect::<Vec<_>>();
        Summary {
            dsc: MeanStd::of(&col(|s| s.dsc)),
            sen: MeanStd::of(&col(|s| s.sen)),
            ppv: MeanStd::of(&col(|s| s.ppv)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub images: usize,
    #[serde(flatten)]
    pub mean: Scores,
    /// Spread over the fold's images, kept for transparency.
    pub image_std: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageScore>,
    pub per_fold: Vec<FoldScore>,
    /// Mean ± sample std across fold means.
    pub summary: Summary,
    /// Free-form provenance, e.g. the spread convention and checkpoint choice.
    pub metadata: std::collections::BTreeMap<String, String>,
}

/// Fold means over images, then mean ± std over folds. `folds[i]` holds the
/// per-image scores of fold `i`.
pub fn aggregate_report(folds: &[Vec<(String, Scores)>]) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::Dataset("cannot aggregate an empty report".into()));
    }
    let mut per_image = Vec::new();
    let mut per_fold = Vec::with_capacity(folds.len());
    for (fold, images) in folds.iter().enumerate() {
        if images.is_empty() {
            return Err(Error::Dataset(format!("fold {fold} has no images")));
        }
        let scores: Vec<Scores> = images.iter().map(|(_, s)| *s).collect();
        let spread = Summary::of(&scores);
        per_fold.push(FoldScore {
            fold,
            images: images.len(),
            mean: Scores::mean(scores.iter().copied()),
            image_std: Scores {
                dsc: spread.dsc.std,
                sen: spread.sen.std,
                ppv: spread.ppv.std,
            },
        });
        per_image.extend(images.iter().map(|(id, s)| ImageScore {
            id: id.clone(),
            fold,
            scores: *s,
        }));
    }
    let fold_means: Vec<Scores> = per_fold.iter().map(|f| f.mean).collect();
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("spread".into(), "sample std across fold means".into());
    metadata.insert("threshold".into(), THRESHOLD.to_string());
    Ok(MetricsReport {
        per_image,
        per_fold,
        summary: Summary::of(&fold_means),
        metadata,
    })
}

fn pct(m: MeanStd) -> String {
    format!("{:.3}±{:.3}", 100.0 * m.mean, 100.0 * m.std)
}

impl MetricsReport {
    /// One JSON record per line: images, then folds, then the summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.per_image {
            let mut v = serde_json::to_value(r)?;
            v["record"] = "image".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        for r in &self.per_fold {
            let mut v = serde_json::to_value(r)?;
            v["record"] = "fold".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "dsc": self.summary.dsc,
            "sen": self.summary.sen,
            "ppv": self.summary.ppv,
            "metadata": self.metadata,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    /// Percentages with three decimals, one row per fold plus the summary.
    pub fn to_table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "{:<10} {:>18} {:>18} {:>18}",
            "", "DSC (%)", "SEN (%)", "PPV (%)"
        );
        for f in &self.per_fold {
            let _ = writeln!(
                t,
                "{:<10} {:>18.3} {:>18.3} {:>18.3}",
                format!("fold {}", f.fold),
                100.0 * f.mean.dsc,
                100.0 * f.mean.sen,
                100.0 * f.mean.ppv
            );
        }
        let s = &self.summary;
        let _ = writeln!(
            t,
            "{:<10} {:>18} {:>18} {:>18}",
            "mean",
            pct(s.dsc),
            pct(s.sen),
            pct(s.ppv)
        );
        t
    }
}

/// Rows of a comparison table, one per named experiment.
pub fn comparison_table(rows: &[(String, Summary)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<width$} {:>18} {:>18} {:>18}",
        "Method", "DSC (%)", "SEN (%)", "PPV (%)"
    );
    for (name, s) in rows {
        let _ = writeln!(
            t,
            "{:<width$} {:>18} {:>18} {:>18}",
            name,
            pct(s.dsc),
            pct(s.sen),
            pct(s.ppv)
        );
    }
    t
}
