use std::cmp::Ordering;

use crate::geometry::{iou, BBox, Detection};

/// Indices of `order` sorted by descending score. Ties keep input order.
pub(crate) fn by_descending_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Greedy suppression over boxes already ordered best-first. Returns the
/// positions (into `boxes`) that survive, stopping after `limit` survivors.
pub(crate) fn greedy(boxes: &[BBox], overlap: f64, limit: Option<usize>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if limit.is_some_and(|l| kept.len() >= l) {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], b) < overlap) {
            kept.push(i);
        }
    }
    kept
}

/// Non-maximum suppression: keep the best-scoring detection, drop every
/// detection overlapping a kept one by IoU >= `overlap`, repeat. The output
/// is sorted by descending score; equal scores keep their input order.
pub fn nms(dets: Vec<Detection>, overlap: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = by_descending_score(&scores);
    let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let keep = greedy(&boxes, overlap, None);
    let mut slots: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
    keep.into_iter()
        .map(|k| slots[order[k]].take().expect("each index kept once"))
        .collect()
}
