//! Multi-label evaluation: precision-recall and ROC curves, per-class
//! average precision by the non-interpolated step formula
//! `AP = sum_n (R_n - R_{n-1}) P_n`, micro (decision-pooled) and macro
//! (class-averaged) mAP, and ROC-AUC with tied scores processed as a
//! single threshold step.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;

use crate::checkpoint::Checkpoint;
use crate::data::{
    crop_bbox_margin, preprocess, augment, AttributeGroup, AugmentMode, Dataset, LabelScheme,
    Split, DEFAULT_BBOX_MARGIN,
};
use crate::error::{Error, Result};
use crate::model;
use crate::tensor::Tensor;

/// One ranked decision: a classifier score and the binary ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPair {
    pub score: f64,
    pub positive: bool,
}

/// Evaluation-time binarization. Three-valued data maps positives and
/// ambiguous labels to positive and -1 to negative; binary data is the
/// identity.
pub fn binarize_eval_labels(raw: &[i8], scheme: LabelScheme) -> Result<Vec<bool>> {
    raw.iter()
        .map(|&v| match (scheme, v) {
            (LabelScheme::PosNegAmbiguous, -1) => Ok(false),
            (LabelScheme::PosNegAmbiguous, 0 | 1) => Ok(true),
            (LabelScheme::Binary, 0) => Ok(false),
            (LabelScheme::Binary, 1) => Ok(true),
            (_, other) => Err(Error::Parameter(format!(
                "label {other} outside the raw domain"
            ))),
        })
        .collect()
}

fn check_finite(pairs: &[EvalPair]) -> Result<()> {
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::Numeric("metric scores must be finite".into()));
    }
    Ok(())
}

/// Stable descending sort by score (ties keep input order).
fn ranked(pairs: &[EvalPair]) -> Vec<EvalPair> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    sorted
}

/// Precision-recall points, one per distinct score threshold, in recall
/// order. Tied scores enter together.
pub fn pr_curve(pairs: &[EvalPair]) -> Result<Vec<(f64, f64)>> {
    check_finite(pairs)?;
    let total_pos = pairs.iter().filter(|p| p.positive).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let sorted = ranked(pairs);
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    Ok(points)
}

/// Non-interpolated average precision over the threshold sweep.
pub fn average_precision(pairs: &[EvalPair]) -> Result<f64> {
    let points = pr_curve(pairs)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// ROC points (FPR, TPR) from (0,0) to (1,1), one step per distinct score.
pub fn roc_curve(pairs: &[EvalPair]) -> Result<Vec<(f64, f64)>> {
    check_finite(pairs)?;
    let total_pos = pairs.iter().filter(|p| p.positive).count();
    let total_neg = pairs.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC needs at least one positive and one negative".into(),
        ));
    }
    let sorted = ranked(pairs);
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / total_neg as f64, tp as f64 / total_pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve; equals the rank statistic with
/// ties counted one half.
pub fn roc_auc(pairs: &[EvalPair]) -> Result<f64> {
    let points = roc_curve(pairs)?;
    let mut auc = 0.0;
    for win in points.windows(2) {
        let (x0, y0) = win[0];
        let (x1, y1) = win[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(auc)
}

/// Micro mAP: pool every (sample, class) decision into one ranked list
/// (sample-major order) and take its average precision.
pub fn micro_map(scores: &[Vec<f64>], truths: &[Vec<bool>]) -> Result<f64> {
    average_precision(&pool_pairs(scores, truths, None))
}

/// Macro mAP: the arithmetic mean of the supplied per-class APs.
pub fn macro_map(per_class_aps: &[f64]) -> Result<f64> {
    if per_class_aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "macro mAP needs at least one class with a defined AP".into(),
        ));
    }
    Ok(per_class_aps.iter().sum::<f64>() / per_class_aps.len() as f64)
}

/// Flatten an M x N score/truth grid into ranked pairs, optionally
/// restricted to a subset of class columns.
pub fn pool_pairs(
    scores: &[Vec<f64>],
    truths: &[Vec<bool>],
    classes: Option<&[usize]>,
) -> Vec<EvalPair> {
    let mut pairs = Vec::new();
    for (row_s, row_t) in scores.iter().zip(truths) {
        match classes {
            Some(cols) => {
                for &c in cols {
                    pairs.push(EvalPair {
                        score: row_s[c],
                        positive: row_t[c],
                    });
                }
            }
            None => {
                for (s, t) in row_s.iter().zip(row_t) {
                    pairs.push(EvalPair {
                        score: *s,
                        positive: *t,
                    });
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Evaluate on the entire image.
    Whole,
    /// Crop to the bounding box with a 10% margin; records without a bbox
    /// fall back to the whole image (counted in the report).
    Bbox,
}

impl CropMode {
    pub fn parse(s: &str) -> Result<CropMode> {
        match s {
            "whole" => Ok(CropMode::Whole),
            "bbox" => Ok(CropMode::Bbox),
            other => Err(Error::Parameter(format!(
                "crop mode must be whole or bbox, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub group: AttributeGroup,
    pub positives: usize,
    pub negatives: usize,
    pub ap: Option<f64>,
    pub roc_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub micro_map: Option<f64>,
    pub macro_map: Option<f64>,
    pub micro_roc_auc: Option<f64>,
    pub macro_roc_auc: Option<f64>,
    /// Classes with zero positives, excluded from the macro means.
    pub excluded_classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: AttributeGroup,
    pub classes: Vec<String>,
    #[serde(flatten)]
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub crop_mode: CropMode,
    pub num_samples: usize,
    /// Records lacking a bbox that fell back to the whole image.
    pub bbox_fallbacks: usize,
    pub classes: Vec<ClassReport>,
    pub overall: AggregateReport,
    pub groups: Vec<GroupReport>,
}

/// A labelled curve for CSV export.
#[derive(Debug, Clone)]
pub struct CurveSet {
    /// (class-or-"all", "pr"|"roc", points)
    pub curves: Vec<(String, &'static str, Vec<(f64, f64)>)>,
}

impl CurveSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,kind,x,y\n");
        for (class, kind, points) in &self.curves {
            for (x, y) in points {
                out.push_str(&format!("{class},{kind},{x},{y}\n"));
            }
        }
        out
    }
}

fn aggregate(
    scores: &[Vec<f64>],
    truths: &[Vec<bool>],
    class_indices: &[usize],
    class_reports: &[ClassReport],
) -> AggregateReport {
    let pooled = pool_pairs(scores, truths, Some(class_indices));
    let micro = average_precision(&pooled).ok();
    let micro_auc = roc_auc(&pooled).ok();
    let defined_aps: Vec<f64> = class_indices
        .iter()
        .filter_map(|&c| class_reports[c].ap)
        .collect();
    let macro_ = macro_map(&defined_aps).ok();
    let defined_aucs: Vec<f64> = class_indices
        .iter()
        .filter_map(|&c| class_reports[c].roc_auc)
        .collect();
    let macro_auc = if defined_aucs.is_empty() {
        None
    } else {
        Some(defined_aucs.iter().sum::<f64>() / defined_aucs.len() as f64)
    };
    let excluded = class_indices
        .iter()
        .filter(|&&c| class_reports[c].ap.is_none())
        .map(|&c| class_reports[c].name.clone())
        .collect();
    AggregateReport {
        micro_map: micro,
        macro_map: macro_,
        micro_roc_auc: micro_auc,
        macro_roc_auc: macro_auc,
        excluded_classes: excluded,
    }
}

/// Score every record of `split` with the checkpointed model and compute
/// the full report plus exportable curves. Undefined per-class metrics
/// (no positives, or a single truth class) become exclusions, not errors.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    crop_mode: CropMode,
) -> Result<(MetricsReport, CurveSet)> {
    let records = dataset.split_records(split);
    if records.is_empty() {
        return Err(Error::Parameter(format!(
            "split {} is empty",
            split.as_str()
        )));
    }
    let schema = &dataset.schema;
    if schema.num_classes() != ckpt.config.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} classes, dataset schema has {}",
            ckpt.config.num_classes,
            schema.num_classes()
        )));
    }
    let n = schema.num_classes();
    let crop_size = ckpt.config.input_size.1 as u32;
    let canonical = ckpt.canonical_size.max(crop_size);

    let mut bbox_fallbacks = 0usize;
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    let mut truths: Vec<Vec<bool>> = Vec::with_capacity(records.len());
    // eval path draws no randomness; the rng only satisfies the forward API
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    for chunk in records.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * 3 * (crop_size * crop_size) as usize);
        for rec in chunk {
            let pixels = match (crop_mode, &rec.bbox) {
                (CropMode::Bbox, Some(_)) => crop_bbox_margin(rec, DEFAULT_BBOX_MARGIN)?,
                (CropMode::Bbox, None) => {
                    bbox_fallbacks += 1;
                    rec.pixels.clone()
                }
                (CropMode::Whole, _) => rec.pixels.clone(),
            };
            let tensor = preprocess(&pixels, canonical, ckpt.mean_rgb)?;
            let cropped = augment(&tensor, crop_size, AugmentMode::Eval, &mut rng)?;
            batch.extend_from_slice(cropped.data());
        }
        let batch = Tensor::new(
            vec![chunk.len(), 3, crop_size as usize, crop_size as usize],
            batch,
        )?;
        let (batch_scores, _) = model::forward(&ckpt.config, &ckpt.params, batch, false, &mut rng)?;
        for (row, rec) in batch_scores.data().chunks(n).zip(chunk) {
            scores.push(row.iter().map(|&v| v as f64).collect());
            truths.push(binarize_eval_labels(&rec.labels, dataset.scheme)?);
        }
    }

    let class_names = schema.class_names();
    let mut class_reports = Vec::with_capacity(n);
    let mut curves = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let pairs: Vec<EvalPair> = scores
            .iter()
            .zip(&truths)
            .map(|(s, t)| EvalPair {
                score: s[c],
                positive: t[c],
            })
            .collect();
        let positives = pairs.iter().filter(|p| p.positive).count();
        let negatives = pairs.len() - positives;
        let ap = average_precision(&pairs).ok();
        let auc = roc_auc(&pairs).ok();
        if let Ok(points) = pr_curve(&pairs) {
            curves.push((name.clone(), "pr", points));
        }
        if let Ok(points) = roc_curve(&pairs) {
            curves.push((name.clone(), "roc", points));
        }
        class_reports.push(ClassReport {
            name: name.clone(),
            group: schema.group_of(c).expect("class index within schema"),
            positives,
            negatives,
            ap,
            roc_auc: auc,
        });
    }

    let all_indices: Vec<usize> = (0..n).collect();
    let overall = aggregate(&scores, &truths, &all_indices, &class_reports);
    let pooled = pool_pairs(&scores, &truths, None);
    if let Ok(points) = pr_curve(&pooled) {
        curves.push(("all".to_string(), "pr", points));
    }
    if let Ok(points) = roc_curve(&pooled) {
        curves.push(("all".to_string(), "roc", points));
    }

    let mut groups = Vec::new();
    for group in AttributeGroup::ALL {
        let range = schema.group_range(group);
        if range.is_empty() {
            continue;
        }
        let indices: Vec<usize> = range.clone().collect();
        let agg = aggregate(&scores, &truths, &indices, &class_reports);
        groups.push(GroupReport {
            group,
            classes: class_names[range].to_vec(),
            aggregate: agg,
        });
    }

    Ok((
        MetricsReport {
            split,
            crop_mode,
            num_samples: records.len(),
            bbox_fallbacks,
            classes: class_reports,
            overall,
            groups,
        },
        CurveSet { curves },
    ))
}
