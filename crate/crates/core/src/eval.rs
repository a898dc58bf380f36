//! Scoring recognitions against ground truth. Two protocols exist:
//! `customer` credits a ground-truth cluster when at least one prediction
//! of the right product touches it (non-empty intersection), while
//! `management` demands instance-level localization (IoU above a
//! threshold, 0.5 by default). On top of the per-image matching this
//! module computes mean average precision over products (area under the
//! precision-recall curve, all-points interpolation), mean per-image
//! product recall, mean per-image multi-label accuracy (Jaccard overlap of
//! product-id sets), and a pooled precision-recall curve.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::detect::{intersection_area, AnnotationMode, GtBox, GtImage};
use crate::error::{Error, Result};
use crate::refine::{Recognition, RecognitionStatus};

/// Matching rules for one evaluation run.
#[derive(Clone, Copy, Debug)]
pub struct MatchProtocol {
    pub mode: AnnotationMode,
    /// Minimum IoU (exclusive) for a management-mode match; ignored in
    /// customer mode.
    pub iou_threshold: f64,
}

impl MatchProtocol {
    pub fn customer() -> Self {
        MatchProtocol { mode: AnnotationMode::Customer, iou_threshold: 0.5 }
    }

    pub fn management() -> Self {
        MatchProtocol { mode: AnnotationMode::Management, iou_threshold: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Validation(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Intersection over union of two `(x, y, w, h)` boxes.
pub fn iou(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> f64 {
    let inter = intersection_area(a, b) as f64;
    let union = (a.2 * a.3 + b.2 * b.3) as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// How one prediction fared in the greedy assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    /// Matched a previously unmatched ground-truth box.
    TruePositive { gt_index: usize },
    /// Customer mode only: another prediction of the same product already
    /// credited this cluster; counts neither as hit nor as error.
    DuplicateCluster { gt_index: usize },
    FalsePositive,
}

/// One accepted prediction with its assignment outcome.
#[derive(Clone, Debug)]
pub struct PredOutcome {
    pub product_id: String,
    pub confidence: f32,
    pub outcome: MatchOutcome,
}

/// Per-image assignment: outcomes for the accepted predictions in
/// descending-confidence order, and a found-flag per ground-truth box.
#[derive(Clone, Debug)]
pub struct ImageAssignment {
    pub predictions: Vec<PredOutcome>,
    pub matched_gt: Vec<bool>,
}

/// Greedy one-to-one assignment of predictions to ground truth, in
/// descending confidence order. Ambiguous (rejected) recognitions and
/// recognitions without candidates are excluded up front. A prediction may
/// claim an unmatched ground-truth box of the same product when it passes
/// the protocol's geometric gate (customer: any overlap; management:
/// IoU above the threshold); among eligible boxes it takes the highest
/// IoU, first index on ties.
pub fn match_detections(
    preds: &[Recognition],
    gt: &[GtBox],
    protocol: &MatchProtocol,
) -> Result<ImageAssignment> {
    protocol.validate()?;
    let mut order: Vec<&Recognition> = preds
        .iter()
        .filter(|r| r.status == RecognitionStatus::Accepted && r.top().is_some())
        .collect();
    order.sort_by(|a, b| b.region.confidence.total_cmp(&a.region.confidence));

    let mut matched = vec![false; gt.len()];
    let mut predictions = Vec::with_capacity(order.len());
    for rec in order {
        let product = &rec.top().expect("filtered above").product_id;
        let pb = rec.region.bounds();
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if matched[gi] || g.product_id != *product {
                continue;
            }
            let overlap = iou(pb, g.bounds());
            let eligible = match protocol.mode {
                AnnotationMode::Customer => intersection_area(pb, g.bounds()) > 0,
                AnnotationMode::Management => overlap > protocol.iou_threshold,
            };
            if eligible && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, gi));
            }
        }
        let outcome = if let Some((_, gi)) = best {
            matched[gi] = true;
            MatchOutcome::TruePositive { gt_index: gi }
        } else if protocol.mode == AnnotationMode::Customer {
            gt.iter()
                .enumerate()
                .find(|(gi, g)| {
                    matched[*gi]
                        && g.product_id == *product
                        && intersection_area(pb, g.bounds()) > 0
                })
                .map(|(gi, _)| MatchOutcome::DuplicateCluster { gt_index: gi })
                .unwrap_or(MatchOutcome::FalsePositive)
        } else {
            MatchOutcome::FalsePositive
        };
        predictions.push(PredOutcome {
            product_id: product.clone(),
            confidence: rec.region.confidence,
            outcome,
        });
    }
    Ok(ImageAssignment { predictions, matched_gt: matched })
}

/// Confidence-labeled prediction for the ranking metrics. Duplicate
/// cluster hits are excluded before this point — they are neither true nor
/// false positives.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPrediction {
    pub confidence: f32,
    pub true_positive: bool,
}

/// Area under the precision-recall curve of one product by all-points
/// interpolation: predictions are ranked by descending confidence, and
/// each recall step is weighted by the precision envelope (the largest
/// precision at that recall or beyond). `total_gt` is the product's
/// ground-truth box count.
pub fn average_precision(preds: &[LabeledPrediction], total_gt: usize) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::MetricUndefined(
            "average precision needs at least one ground-truth instance".into(),
        ));
    }
    let mut ranked = preds.to_vec();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len()); // (is hit, precision)
    for (i, p) in ranked.iter().enumerate() {
        if p.true_positive {
            tp += 1;
        }
        points.push((p.true_positive, tp as f64 / (i + 1) as f64));
    }
    // Each true positive advances recall by exactly 1/total_gt, weighted by
    // the envelope; summing envelopes and dividing once keeps a perfect
    // ranking at exactly 1.0.
    let mut envelope = 0.0f64;
    let mut envelope_sum = 0.0f64;
    for &(is_hit, precision) in points.iter().rev() {
        envelope = envelope.max(precision);
        if is_hit {
            envelope_sum += envelope;
        }
    }
    Ok(envelope_sum / total_gt as f64)
}

/// Unweighted mean of per-product average precisions over the products
/// with at least one ground-truth instance. Products that were predicted
/// but never appear in the ground truth do not participate.
pub fn mean_average_precision(
    predictions_by_product: &BTreeMap<String, Vec<LabeledPrediction>>,
    gt_counts: &BTreeMap<String, usize>,
) -> Result<f64> {
    let empty: Vec<LabeledPrediction> = Vec::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (product, &count) in gt_counts {
        if count == 0 {
            continue;
        }
        let preds = predictions_by_product.get(product).unwrap_or(&empty);
        sum += average_precision(preds, count)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::MetricUndefined(
            "no product has any ground-truth instance".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Recall of one image: found ground-truth products over total (customer
/// counts distinct product types, management counts instances). An image
/// with no ground truth counts as fully recalled.
pub fn image_recall(assignment: &ImageAssignment, gt: &[GtBox], mode: AnnotationMode) -> f64 {
    if gt.is_empty() {
        return 1.0;
    }
    match mode {
        AnnotationMode::Management => {
            let found = assignment.matched_gt.iter().filter(|&&m| m).count();
            found as f64 / gt.len() as f64
        }
        AnnotationMode::Customer => {
            let total: BTreeSet<&str> = gt.iter().map(|g| g.product_id.as_str()).collect();
            let found: BTreeSet<&str> = gt
                .iter()
                .zip(&assignment.matched_gt)
                .filter(|(_, &m)| m)
                .map(|(g, _)| g.product_id.as_str())
                .collect();
            found.len() as f64 / total.len() as f64
        }
    }
}

/// Mean per-image recall over `(assignment, ground truth)` pairs.
pub fn product_recall(
    per_image: &[(&ImageAssignment, &[GtBox])],
    mode: AnnotationMode,
) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::MetricUndefined("no images to evaluate".into()));
    }
    let sum: f64 = per_image.iter().map(|(a, g)| image_recall(a, g, mode)).sum();
    Ok(sum / per_image.len() as f64)
}

/// Jaccard overlap of two product-id sets; both empty counts as 1.
pub fn set_accuracy(predicted: &BTreeSet<String>, actual: &BTreeSet<String>) -> f64 {
    let union = predicted.union(actual).count();
    if union == 0 {
        return 1.0;
    }
    let inter = predicted.intersection(actual).count();
    inter as f64 / union as f64
}

/// Mean per-image multi-label accuracy over `(predicted, actual)`
/// product-id set pairs.
pub fn mamca(per_image: &[(BTreeSet<String>, BTreeSet<String>)]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::MetricUndefined("no images to evaluate".into()));
    }
    let sum: f64 = per_image.iter().map(|(p, g)| set_accuracy(p, g)).sum();
    Ok(sum / per_image.len() as f64)
}

/// One cumulative precision-recall point.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision-recall points over pooled predictions, one point
/// per distinct confidence value in descending order. Recall is against
/// `total_gt` pooled ground-truth boxes.
pub fn pr_curve(preds: &[LabeledPrediction], total_gt: usize) -> Vec<PrPoint> {
    let mut ranked = preds.to_vec();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut iter = ranked.iter().enumerate().peekable();
    while let Some((i, p)) = iter.next() {
        if p.true_positive {
            tp += 1;
        }
        let at_boundary = iter
            .peek()
            .is_none_or(|(_, next)| next.confidence != p.confidence);
        if at_boundary {
            points.push(PrPoint {
                threshold: p.confidence,
                precision: tp as f64 / (i + 1) as f64,
                recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
            });
        }
    }
    points
}

/// Per-image scoring breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct ImageBreakdown {
    pub image: String,
    pub gt_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    /// Customer mode: extra predictions on already-credited clusters.
    pub duplicate_cluster_hits: usize,
    pub recall: f64,
    pub accuracy: f64,
}

/// Evaluation report, serialized as the JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub iou_threshold: f64,
    pub map: f64,
    pub pr: f64,
    pub mamca: f64,
    /// How the area under the PR curve is approximated.
    pub ap_interpolation: String,
    /// The multi-label accuracy definition in use.
    pub mamca_definition: String,
    pub per_image: Vec<ImageBreakdown>,
}

/// Scores recognitions against ground truth and returns the report plus
/// the pooled precision-recall curve. Evaluation covers the union of
/// images present in either input; every ground-truth image must be
/// annotated in the protocol's mode.
pub fn evaluate(
    recognitions: &BTreeMap<String, Vec<Recognition>>,
    ground_truth: &BTreeMap<String, GtImage>,
    protocol: &MatchProtocol,
) -> Result<(EvalReport, Vec<PrPoint>)> {
    protocol.validate()?;
    for (image, gt) in ground_truth {
        if gt.mode != protocol.mode {
            return Err(Error::Validation(format!(
                "image '{image}' is annotated in {} mode but the protocol is {} mode",
                gt.mode, protocol.mode
            )));
        }
    }
    let mut images: BTreeSet<&String> = recognitions.keys().collect();
    images.extend(ground_truth.keys());

    let no_recs: Vec<Recognition> = Vec::new();
    let no_gt: Vec<GtBox> = Vec::new();
    let mut per_image = Vec::new();
    let mut pooled: Vec<LabeledPrediction> = Vec::new();
    let mut by_product: BTreeMap<String, Vec<LabeledPrediction>> = BTreeMap::new();
    let mut gt_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut recalls = Vec::new();
    let mut accuracies = Vec::new();
    let mut total_gt = 0usize;

    for &image in &images {
        let recs = recognitions.get(image).unwrap_or(&no_recs);
        let gt = ground_truth.get(image).map_or(no_gt.as_slice(), |g| g.boxes.as_slice());
        let assignment = match_detections(recs, gt, protocol)?;

        for g in gt {
            *gt_counts.entry(g.product_id.clone()).or_default() += 1;
        }
        total_gt += gt.len();

        let (mut tp, mut fp, mut dup) = (0usize, 0usize, 0usize);
        let mut predicted_ids: BTreeSet<String> = BTreeSet::new();
        for p in &assignment.predictions {
            predicted_ids.insert(p.product_id.clone());
            match p.outcome {
                MatchOutcome::TruePositive { .. } => {
                    tp += 1;
                    let lp = LabeledPrediction { confidence: p.confidence, true_positive: true };
                    pooled.push(lp);
                    by_product.entry(p.product_id.clone()).or_default().push(lp);
                }
                MatchOutcome::FalsePositive => {
                    fp += 1;
                    let lp = LabeledPrediction { confidence: p.confidence, true_positive: false };
                    pooled.push(lp);
                    by_product.entry(p.product_id.clone()).or_default().push(lp);
                }
                MatchOutcome::DuplicateCluster { .. } => dup += 1,
            }
        }
        let actual_ids: BTreeSet<String> =
            gt.iter().map(|g| g.product_id.clone()).collect();
        let recall = image_recall(&assignment, gt, protocol.mode);
        let accuracy = set_accuracy(&predicted_ids, &actual_ids);
        recalls.push(recall);
        accuracies.push(accuracy);
        per_image.push(ImageBreakdown {
            image: image.clone(),
            gt_count: gt.len(),
            true_positives: tp,
            false_positives: fp,
            duplicate_cluster_hits: dup,
            recall,
            accuracy,
        });
    }

    let map = mean_average_precision(&by_product, &gt_counts)?;
    if recalls.is_empty() {
        return Err(Error::MetricUndefined("no images to evaluate".into()));
    }
    let pr = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let mamca_value = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let curve = pr_curve(&pooled, total_gt);
    let report = EvalReport {
        mode: protocol.mode.to_string(),
        iou_threshold: protocol.iou_threshold,
        map,
        pr,
        mamca: mamca_value,
        ap_interpolation: "all_points".to_string(),
        mamca_definition: "jaccard".to_string(),
        per_image,
    };
    Ok((report, curve))
}

/// Writes the report as pretty-printed JSON.
pub fn write_report_json(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, report)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the curve as CSV with header `threshold,precision,recall`.
pub fn write_pr_curve_csv(path: impl AsRef<Path>, points: &[PrPoint]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(b"threshold,precision,recall\n").map_err(|e| Error::io(path, e))?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
