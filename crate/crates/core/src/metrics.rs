//! Frame-level evaluation: ranking metrics, span proposals, and detection
//! precision, plus the corpus-level protocol that ties them together.
//!
//! Scores are compared at frame granularity: segment scores are expanded by
//! the per-video frame rate and concatenated across videos. The detection
//! view extracts span proposals from the frame scores by a fixed threshold
//! sweep and matches them greedily against ground-truth spans at several IoU
//! thresholds.
//!
//! Degenerate inputs (a single class, no positive frames, no ground-truth
//! spans) are errors, never silent defaults.

use crate::autodiff::Element;
use crate::corpus::{expand_to_frames, FeatureSequence, Label};
use crate::error::{Error, Result};
use crate::model::RefineModel;

/// Half-open frame interval `[start, end)`.
pub type Span = (usize, usize);

/// A detected span with its confidence (mean in-span score).
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// The fixed threshold sweep used for proposal extraction.
pub const PROPOSAL_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// The fixed IoU grid for detection precision.
pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn check_binary(labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::UndefinedMetric("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    check_binary(labels)
}

// ---------------------------------------------------------------------------
// Ranking metrics
// ---------------------------------------------------------------------------

/// Area under the ROC curve by the rank statistic: average ranks are assigned
/// to tied scores, so ties count half. O(n log n). Errors when only one class
/// is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the average (i + j + 2) / 2.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Average precision with step interpolation: items are ranked by score
/// descending (ties keep their original order), and each positive contributes
/// the precision at its rank. Errors when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

// ---------------------------------------------------------------------------
// Spans and proposals
// ---------------------------------------------------------------------------

/// Maximal runs of ones in a binary mask, as half-open spans.
pub fn mask_to_spans(mask: &[u8]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (1, None) => start = Some(i),
            (0, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, mask.len()));
    }
    spans
}

/// Sweep the fixed thresholds over the frame scores; each maximal run of
/// frames scoring at or above a threshold becomes a proposal whose confidence
/// is the mean in-run score. Identical spans found at several thresholds are
/// emitted once.
pub fn extract_proposals(frame_scores: &[f64]) -> Vec<Proposal> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for &theta in &PROPOSAL_THRESHOLDS {
        let mask: Vec<u8> = frame_scores
            .iter()
            .map(|&s| u8::from(s >= theta))
            .collect();
        for (start, end) in mask_to_spans(&mask) {
            if seen.insert((start, end)) {
                let confidence =
                    frame_scores[start..end].iter().sum::<f64>() / (end - start) as f64;
                out.push(Proposal {
                    start,
                    end,
                    confidence,
                });
            }
        }
    }
    out
}

/// Intersection over union of two half-open spans.
pub fn span_iou(a: Span, b: Span) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One video's detections: its proposals and its ground-truth spans.
#[derive(Debug, Clone, Default)]
pub struct VideoDetections {
    pub proposals: Vec<Proposal>,
    pub gt: Vec<Span>,
}

/// Detection precision across a set of videos.
#[derive(Debug, Clone)]
pub struct MapReport {
    /// (IoU threshold, AP) pairs in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    pub avg: f64,
}

fn ap_at_iou(videos: &[VideoDetections], theta: f64, total_gt: usize) -> f64 {
    // Pool proposals across videos, ranked by confidence (stable for ties).
    let mut pooled: Vec<(usize, &Proposal)> = videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| v.proposals.iter().map(move |p| (vi, p)))
        .collect();
    pooled.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());

    let mut matched: Vec<Vec<bool>> = videos.iter().map(|v| vec![false; v.gt.len()]).collect();
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &(vi, p)) in pooled.iter().enumerate() {
        // Best remaining ground-truth span in the proposal's own video.
        let mut best: Option<(usize, f64)> = None;
        for (gi, &gt) in videos[vi].gt.iter().enumerate() {
            if matched[vi][gi] {
                continue;
            }
            let iou = span_iou((p.start, p.end), gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= theta {
                matched[vi][gi] = true;
                tp += 1;
                sum += tp as f64 / (k + 1) as f64;
            }
        }
    }
    sum / total_gt as f64
}

/// AP at each IoU threshold in [`IOU_THRESHOLDS`], plus their mean. Matching
/// is greedy in confidence order, one proposal to at most one ground-truth
/// span within the same video. Errors when no video has any ground truth.
pub fn map_at_iou(videos: &[VideoDetections]) -> Result<MapReport> {
    let total_gt: usize = videos.iter().map(|v| v.gt.len()).sum();
    if total_gt == 0 {
        return Err(Error::UndefinedMetric(
            "detection AP needs at least one ground-truth span".into(),
        ));
    }
    let per_threshold: Vec<(f64, f64)> = IOU_THRESHOLDS
        .iter()
        .map(|&t| (t, ap_at_iou(videos, t, total_gt)))
        .collect();
    let avg = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapReport { per_threshold, avg })
}

// ---------------------------------------------------------------------------
// Corpus protocol
// ---------------------------------------------------------------------------

/// One video's frame-level scoring products.
#[derive(Debug, Clone)]
pub struct ScoredSequence {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    pub frame_gt: Vec<u8>,
    pub abnormal: bool,
}

/// The headline numbers of one evaluation.
#[derive(Debug, Clone)]
pub struct MetricsSummary {
    /// Frame-level ROC AUC over every video.
    pub auc: f64,
    /// Frame-level ROC AUC restricted to abnormal videos.
    pub ano_auc: f64,
    /// Frame-level average precision over every video.
    pub ap: f64,
    /// Detection precision over abnormal videos.
    pub map: MapReport,
}

/// Score a corpus with a model: expand each video's segment scores to frames
/// and pair them with ground truth. Abnormal videos must carry a mask; the
/// scores themselves are computed from features alone.
pub fn score_corpus<F: Element>(
    model: &RefineModel<F>,
    sequences: &[FeatureSequence],
) -> Result<Vec<ScoredSequence>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let scored = model.score_sequence(&seq.features)?;
        let frame_scores = expand_to_frames(&scored.scores, seq.frames_per_segment);
        let abnormal = seq.label == Label::Abnormal;
        let frame_gt = match (&seq.frame_mask, abnormal) {
            (Some(mask), _) => {
                if mask.len() != frame_scores.len() {
                    return Err(Error::Corpus(format!(
                        "{}: mask has {} frames but scores cover {}",
                        seq.video_id,
                        mask.len(),
                        frame_scores.len()
                    )));
                }
                mask.clone()
            }
            (None, false) => vec![0u8; frame_scores.len()],
            (None, true) => {
                return Err(Error::Corpus(format!(
                    "{}: abnormal video without a mask cannot be evaluated",
                    seq.video_id
                )))
            }
        };
        out.push(ScoredSequence {
            video_id: seq.video_id.clone(),
            frame_scores,
            frame_gt,
            abnormal,
        });
    }
    Ok(out)
}

/// The evaluation protocol over scored videos: pooled frame AUC and AP, the
/// abnormal-only AUC, and detection precision over abnormal videos.
pub fn evaluate(videos: &[ScoredSequence]) -> Result<MetricsSummary> {
    if videos.is_empty() {
        return Err(Error::UndefinedMetric("no videos to evaluate".into()));
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut ano_scores = Vec::new();
    let mut ano_labels = Vec::new();
    let mut detections = Vec::new();
    for v in videos {
        all_scores.extend_from_slice(&v.frame_scores);
        all_labels.extend_from_slice(&v.frame_gt);
        if v.abnormal {
            ano_scores.extend_from_slice(&v.frame_scores);
            ano_labels.extend_from_slice(&v.frame_gt);
            detections.push(VideoDetections {
                proposals: extract_proposals(&v.frame_scores),
                gt: mask_to_spans(&v.frame_gt),
            });
        }
    }
    Ok(MetricsSummary {
        auc: roc_auc(&all_scores, &all_labels)?,
        ano_auc: roc_auc(&ano_scores, &ano_labels)?,
        ap: average_precision(&all_scores, &all_labels)?,
        map: map_at_iou(&detections)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic pair-counting AUC: the probability a random positive
    /// outranks a random negative, ties counting half.
    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (&sp, &lp) in scores.iter().zip(labels.iter()) {
            if lp != 1 {
                continue;
            }
            for (&sn, &ln) in scores.iter().zip(labels.iter()) {
                if ln != 0 {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Quadratic AP: precision at each positive's rank, computed by explicit
    /// counting against the stable descending order.
    fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
        let mut total = 0.0;
        let mut n_pos = 0.0;
        for (k, &i) in order.iter().enumerate() {
            if labels[i] == 1 {
                n_pos += 1.0;
                let hits = order[..=k].iter().filter(|&&j| labels[j] == 1).count();
                total += hits as f64 / (k + 1) as f64;
            }
        }
        total / n_pos
    }

    fn random_instance(rng: &mut ChaCha8Rng, with_ties: bool) -> (Vec<f64>, Vec<u8>) {
        let n = rng.gen_range(4usize..60);
        loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s: f64 = rng.gen_range(0.0..1.0);
                    if with_ties {
                        (s * 8.0).round() / 8.0
                    } else {
                        s
                    }
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < n {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for i in 0..150 {
            let (scores, labels) = random_instance(&mut rng, i % 2 == 0);
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = auc_oracle(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-9,
                "instance {i}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn ap_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for i in 0..150 {
            let (scores, labels) = random_instance(&mut rng, i % 3 == 0);
            let fast = average_precision(&scores, &labels).unwrap();
            let slow = ap_oracle(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-9,
                "instance {i}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn auc_known_values() {
        // Perfect separation, total inversion, and a half-tied case.
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..30 {
            let (scores, labels) = random_instance(&mut rng, false);
            let base = roc_auc(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            assert!((roc_auc(&exp, &labels).unwrap() - base).abs() < 1e-12);
            assert!((roc_auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_of_negated_scores_complements() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..30 {
            let (scores, labels) = random_instance(&mut rng, false);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&neg, &labels).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_to_spans_examples() {
        assert_eq!(mask_to_spans(&[0, 1, 1, 0, 1]), vec![(1, 3), (4, 5)]);
        assert_eq!(mask_to_spans(&[1, 1, 1]), vec![(0, 3)]);
        assert_eq!(mask_to_spans(&[0, 0]), Vec::<Span>::new());
        assert_eq!(mask_to_spans(&[]), Vec::<Span>::new());
    }

    #[test]
    fn proposal_extraction_worked_example() {
        let scores = [0.05, 0.45, 0.85, 0.85, 0.45, 0.05];
        let props = extract_proposals(&scores);
        assert_eq!(props.len(), 2);
        assert_eq!((props[0].start, props[0].end), (1, 5));
        assert!((props[0].confidence - 0.65).abs() < 1e-12);
        assert_eq!((props[1].start, props[1].end), (2, 4));
        assert!((props[1].confidence - 0.85).abs() < 1e-12);
    }

    #[test]
    fn proposals_cover_every_thresholded_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for _ in 0..30 {
            let n = rng.gen_range(5usize..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let props = extract_proposals(&scores);
            for &theta in &PROPOSAL_THRESHOLDS {
                for (i, &s) in scores.iter().enumerate() {
                    if s >= theta {
                        assert!(
                            props.iter().any(|p| p.start <= i && i < p.end),
                            "frame {i} (score {s}) uncovered at theta {theta}"
                        );
                    }
                }
            }
            // Deduplication: spans are unique.
            let mut seen = std::collections::HashSet::new();
            for p in &props {
                assert!(seen.insert((p.start, p.end)));
            }
        }
    }

    #[test]
    fn span_iou_cases() {
        assert_eq!(span_iou((0, 4), (0, 4)), 1.0);
        assert_eq!(span_iou((0, 4), (4, 8)), 0.0);
        assert!((span_iou((0, 4), (2, 6)) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(span_iou((0, 0), (0, 0)), 0.0);
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let videos = vec![VideoDetections {
            proposals: vec![
                Proposal {
                    start: 3,
                    end: 9,
                    confidence: 0.9,
                },
                Proposal {
                    start: 20,
                    end: 25,
                    confidence: 0.8,
                },
            ],
            gt: vec![(3, 9), (20, 25)],
        }];
        let report = map_at_iou(&videos).unwrap();
        for &(_, ap) in &report.per_threshold {
            assert_eq!(ap, 1.0);
        }
        assert_eq!(report.avg, 1.0);
    }

    #[test]
    fn detection_ap_hand_example() {
        // One GT span; the confident proposal misses (IoU 0), the weaker one
        // hits exactly. Ranked list: FP then TP -> AP = 1/2.
        let videos = vec![VideoDetections {
            proposals: vec![
                Proposal {
                    start: 0,
                    end: 4,
                    confidence: 0.9,
                },
                Proposal {
                    start: 10,
                    end: 14,
                    confidence: 0.5,
                },
            ],
            gt: vec![(10, 14)],
        }];
        let report = map_at_iou(&videos).unwrap();
        for &(_, ap) in &report.per_threshold {
            assert_eq!(ap, 0.5);
        }
    }

    #[test]
    fn detection_ap_is_monotone_in_iou_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        for _ in 0..60 {
            let n_vids = rng.gen_range(1usize..4);
            let videos: Vec<VideoDetections> = (0..n_vids)
                .map(|_| {
                    let n = rng.gen_range(10usize..60);
                    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let mut mask = vec![0u8; n];
                    let len = rng.gen_range(1usize..=n / 2);
                    let start = rng.gen_range(0..=n - len);
                    mask[start..start + len].fill(1);
                    VideoDetections {
                        proposals: extract_proposals(&scores),
                        gt: mask_to_spans(&mask),
                    }
                })
                .collect();
            let report = map_at_iou(&videos).unwrap();
            for pair in report.per_threshold.windows(2) {
                assert!(
                    pair[1].1 <= pair[0].1 + 1e-12,
                    "AP rose from {:?} to {:?}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let videos = vec![VideoDetections {
            proposals: vec![Proposal {
                start: 0,
                end: 2,
                confidence: 0.5,
            }],
            gt: vec![],
        }];
        assert!(matches!(
            map_at_iou(&videos),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn evaluate_combines_views_correctly() {
        // Two videos: one normal (all-zero GT), one abnormal with a clean
        // plateau. Hand-checkable pooled metrics.
        let normal = ScoredSequence {
            video_id: "n".into(),
            frame_scores: vec![0.1, 0.2, 0.1, 0.15],
            frame_gt: vec![0, 0, 0, 0],
            abnormal: false,
        };
        let abnormal = ScoredSequence {
            video_id: "a".into(),
            frame_scores: vec![0.05, 0.9, 0.95, 0.3],
            frame_gt: vec![0, 1, 1, 0],
            abnormal: true,
        };
        let summary = evaluate(&[normal, abnormal.clone()]).unwrap();
        assert_eq!(summary.auc, 1.0); // 0.9/0.95 outrank every negative
        assert_eq!(summary.ano_auc, 1.0);
        assert_eq!(summary.ap, 1.0);
        assert!(summary.map.avg > 0.0);
        // Restricting to the abnormal video changes the negative pool.
        let fewer = evaluate(std::slice::from_ref(&abnormal)).unwrap();
        assert_eq!(fewer.ano_auc, summary.ano_auc);
    }

    #[test]
    fn evaluate_requires_both_classes() {
        let only_normal = ScoredSequence {
            video_id: "n".into(),
            frame_scores: vec![0.1, 0.2],
            frame_gt: vec![0, 0],
            abnormal: false,
        };
        assert!(evaluate(&[only_normal]).is_err());
    }
}
