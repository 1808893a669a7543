//! Moment retrieval and highlight detection metrics.
//!
//! Boundary conventions: R1@X counts a hit only when IoU is strictly above X,
//! while AP matching accepts IoU equal to the threshold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Window};

/// A scored span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Moment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Moment {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn span(&self) -> Window {
        [self.start, self.end]
    }
}

impl From<[f64; 3]> for Moment {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Moment> for [f64; 3] {
    fn from(m: Moment) -> Self {
        [m.start, m.end, m.score]
    }
}

pub const NMS_THRESHOLD: f64 = 0.7;
pub const HD_POSITIVE_THRESHOLD: f64 = 0.5;
pub const SHORT_BUCKET_MAX: f64 = 10.0;
pub const MIDDLE_BUCKET_MAX: f64 = 30.0;

/// IoU thresholds `0.5, 0.55, …, 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn temporal_iou(a: Window, b: Window) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Order used everywhere for ranking: score descending, then earlier start,
/// then earlier end.
pub fn rank_order(a: &Moment, b: &Moment) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

pub fn sort_moments(moments: &mut [Moment]) {
    moments.sort_by(rank_order);
}

/// Greedy suppression: keep the best-ranked moment, drop every moment whose
/// IoU with a kept one exceeds `thr`.
pub fn nms(moments: &[Moment], thr: f64) -> Vec<Moment> {
    let mut sorted = moments.to_vec();
    sort_moments(&mut sorted);
    let mut kept: Vec<Moment> = Vec::with_capacity(sorted.len());
    for m in sorted {
        if kept.iter().all(|k| temporal_iou(k.span(), m.span()) <= thr) {
            kept.push(m);
        }
    }
    kept
}

fn top1(moments: &[Moment]) -> Option<&Moment> {
    moments.iter().min_by(|a, b| rank_order(a, b))
}

fn best_iou(span: Window, gts: &[Window]) -> f64 {
    gts.iter()
        .map(|g| temporal_iou(span, *g))
        .fold(0.0, f64::max)
}

/// Fraction of queries whose top-ranked moment has IoU strictly above `x`
/// with any ground-truth window.
pub fn recall1_at(preds: &[Vec<Moment>], gts: &[Vec<Window>], x: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| top1(p).is_some_and(|m| best_iou(m.span(), g) > x))
        .count();
    hits as f64 / preds.len() as f64
}

pub fn miou(preds: &[Vec<Moment>], gts: &[Vec<Window>]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| top1(p).map_or(0.0, |m| best_iou(m.span(), g)))
        .sum();
    total / preds.len() as f64
}

/// Interpolated AP of one query at IoU threshold `thr`.
pub fn average_precision(moments: &[Moment], gts: &[Window], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut sorted = moments.to_vec();
    sort_moments(&mut sorted);
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(sorted.len());
    let mut recall = Vec::with_capacity(sorted.len());
    for (rank, m) in sorted.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let iou = temporal_iou(m.span(), *g);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    interpolated_ap(&precision, &recall)
}

/// Area under the precision envelope of a precision-recall curve.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mpre.push(0.0);
    mrec.push(0.0);
    mpre.extend_from_slice(precision);
    mrec.extend_from_slice(recall);
    mpre.push(0.0);
    mrec.push(1.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

impl MapResult {
    pub fn at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - thr).abs() < 1e-9)
            .map(|i| self.per_threshold[i])
    }
}

pub fn map_mr(preds: &[Vec<Moment>], gts: &[Vec<Window>], thresholds: &[f64]) -> MapResult {
    let n = preds.len().max(1) as f64;
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            preds
                .iter()
                .zip(gts)
                .map(|(p, g)| average_precision(p, g, t))
                .sum::<f64>()
                / n
        })
        .collect();
    let average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    MapResult {
        thresholds: thresholds.to_vec(),
        per_threshold,
        average,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdResult {
    pub map: f64,
    pub hit1: f64,
    pub queries: usize,
    /// Queries dropped because no clip reached the relevance threshold.
    pub excluded: usize,
}

/// Non-interpolated AP of a clip ranking; ties keep the lower index first.
pub fn ranking_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return 0.0;
    }
    let order = rank_clips(scores);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / n_rel as f64
}

/// Clip indices by descending score, ties by ascending index.
pub fn rank_clips(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn hd_metrics(preds: &[Vec<f64>], gts: &[Vec<f64>], positive_thr: f64) -> HdResult {
    let mut ap_sum = 0.0;
    let mut hit_sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let relevant: Vec<bool> = g.iter().map(|&s| s >= positive_thr).collect();
        if !relevant.iter().any(|&r| r) || p.len() != g.len() {
            excluded += 1;
            continue;
        }
        used += 1;
        ap_sum += ranking_ap(p, &relevant);
        if let Some(&top) = rank_clips(p).first() {
            if relevant[top] {
                hit_sum += 1.0;
            }
        }
    }
    let denom = used.max(1) as f64;
    HdResult {
        map: ap_sum / denom,
        hit1: hit_sum / denom,
        queries: used,
        excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Middle,
    Long,
}

impl LengthBucket {
    pub fn of(length: f64) -> Self {
        if length < SHORT_BUCKET_MAX {
            Self::Short
        } else if length <= MIDDLE_BUCKET_MAX {
            Self::Middle
        } else {
            Self::Long
        }
    }
}

/// Window a query is bucketed by: the one overlapping the top-ranked
/// prediction most, or the first window when there is no prediction.
pub fn matched_window(moments: &[Moment], gts: &[Window]) -> Option<Window> {
    let first = *gts.first()?;
    let Some(top) = top1(moments) else {
        return Some(first);
    };
    let mut best = (first, temporal_iou(top.span(), first));
    for g in &gts[1..] {
        let iou = temporal_iou(top.span(), *g);
        if iou > best.1 {
            best = (*g, iou);
        }
    }
    Some(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketedMap {
    pub short: Option<f64>,
    pub middle: Option<f64>,
    pub long: Option<f64>,
}

/// Average mAP per length bucket; empty buckets are `None`.
pub fn stratified_map(preds: &[Vec<Moment>], gts: &[Vec<Window>]) -> BucketedMap {
    let mut groups: HashMap<LengthBucket, (Vec<Vec<Moment>>, Vec<Vec<Window>>)> = HashMap::new();
    for (p, g) in preds.iter().zip(gts) {
        let Some(w) = matched_window(p, g) else {
            continue;
        };
        let entry = groups.entry(LengthBucket::of(w[1] - w[0])).or_default();
        entry.0.push(p.clone());
        entry.1.push(g.clone());
    }
    let thresholds = map_thresholds();
    let get = |b| {
        groups
            .get(&b)
            .map(|(p, g)| map_mr(p, g, &thresholds).average)
    };
    BucketedMap {
        short: get(LengthBucket::Short),
        middle: get(LengthBucket::Middle),
        long: get(LengthBucket::Long),
    }
}

/// The full evaluation summary. Rates are stored in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub r1_at_0_3: f64,
    pub r1_at_0_5: f64,
    pub r1_at_0_7: f64,
    pub map_at_0_5: f64,
    pub map_at_0_75: f64,
    pub map_avg: f64,
    pub miou: f64,
    pub short_map: Option<f64>,
    pub middle_map: Option<f64>,
    pub long_map: Option<f64>,
    pub hd_map: Option<f64>,
    pub hit_at_1: Option<f64>,
    pub queries: usize,
    pub hd_queries: usize,
    pub hd_excluded: usize,
}

impl MetricReport {
    pub fn compute(
        preds: &[Vec<Moment>],
        gts: &[Vec<Window>],
        saliency_preds: &[Vec<f64>],
        saliency_gts: &[Option<Vec<f64>>],
    ) -> Self {
        let thresholds = map_thresholds();
        let map = map_mr(preds, gts, &thresholds);
        let buckets = stratified_map(preds, gts);
        let (hd_p, hd_g): (Vec<Vec<f64>>, Vec<Vec<f64>>) = saliency_preds
            .iter()
            .zip(saliency_gts)
            .filter_map(|(p, g)| g.as_ref().map(|g| (p.clone(), g.clone())))
            .unzip();
        let without_gt = saliency_gts.iter().filter(|g| g.is_none()).count();
        let hd = hd_metrics(&hd_p, &hd_g, HD_POSITIVE_THRESHOLD);
        let has_hd = hd.queries > 0;
        Self {
            r1_at_0_3: recall1_at(preds, gts, 0.3),
            r1_at_0_5: recall1_at(preds, gts, 0.5),
            r1_at_0_7: recall1_at(preds, gts, 0.7),
            map_at_0_5: map.at(0.5).unwrap_or(0.0),
            map_at_0_75: map.at(0.75).unwrap_or(0.0),
            map_avg: map.average,
            miou: miou(preds, gts),
            short_map: buckets.short,
            middle_map: buckets.middle,
            long_map: buckets.long,
            hd_map: has_hd.then_some(hd.map),
            hit_at_1: has_hd.then_some(hd.hit1),
            queries: preds.len(),
            hd_queries: hd.queries,
            hd_excluded: hd.excluded + without_gt,
        }
    }

    /// Human-readable table with rates scaled to percentages.
    pub fn render_table(&self) -> String {
        let pct = |v: f64| format!("{:>7.2}", v * 100.0);
        let opt = |v: Option<f64>| v.map_or_else(|| format!("{:>7}", "n/a"), pct);
        let rows = [
            ("R1@0.3", pct(self.r1_at_0_3)),
            ("R1@0.5", pct(self.r1_at_0_5)),
            ("R1@0.7", pct(self.r1_at_0_7)),
            ("mAP@0.5", pct(self.map_at_0_5)),
            ("mAP@0.75", pct(self.map_at_0_75)),
            ("mAP avg", pct(self.map_avg)),
            ("mIoU", pct(self.miou)),
            ("mAP short", opt(self.short_map)),
            ("mAP middle", opt(self.middle_map)),
            ("mAP long", opt(self.long_map)),
            ("HD mAP", opt(self.hd_map)),
            ("HIT@1", opt(self.hit_at_1)),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<12}{value}\n"));
        }
        out.push_str(&format!(
            "{:<12}{:>7}\n{:<12}{:>7}\n",
            "queries", self.queries, "hd queries", self.hd_queries
        ));
        out
    }
}

/// Evaluates predictions keyed by query id against annotations. Queries
/// without a prediction count as empty predictions.
pub fn evaluate(
    predictions: &HashMap<String, (Vec<Moment>, Vec<f64>)>,
    annotations: &[Annotation],
) -> MetricReport {
    let mut preds = Vec::with_capacity(annotations.len());
    let mut gts = Vec::with_capacity(annotations.len());
    let mut sal_p = Vec::with_capacity(annotations.len());
    let mut sal_g = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let (m, s) = predictions
            .get(&ann.qid)
            .cloned()
            .unwrap_or_else(|| (Vec::new(), vec![f64::NEG_INFINITY; ann.n_clips()]));
        preds.push(m);
        gts.push(ann.relevant_windows.clone());
        sal_p.push(s);
        sal_g.push(ann.saliency.clone());
    }
    MetricReport::compute(&preds, &gts, &sal_p, &sal_g)
}
