//! Segmentation metrics from dataset-aggregated confusion matrices, per-image
//! agreement mIoU, and the cluster-based region similarity analysis.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Tile;
use crate::error::{GramError, Result};
use crate::model::{RoutingPlan, SegModel};
use crate::rng::{stream, streams};

/// 2x2 pixel counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn add_pair(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(GramError::Metric(format!(
                "prediction has {} pixels, reference has {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p > 1 || t > 1 {
                return Err(GramError::Metric(format!("mask value out of range: pred {p}, true {t}")));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }
}

pub fn accumulate_confusion<P: AsRef<[u8]>, T: AsRef<[u8]>>(preds: &[P], truths: &[T]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(GramError::Metric(format!(
            "{} predicted masks vs {} reference masks",
            preds.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in preds.iter().zip(truths) {
        cm.add_pair(p.as_ref(), t.as_ref())?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub non_slum: ClassMetrics,
    pub slum: ClassMetrics,
    pub mean: ClassMetrics,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let o = 1 - c;
    let tp = cm.counts[c][c];
    let fp = cm.counts[o][c];
    let fn_ = cm.counts[c][o];
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        iou: ratio(tp, tp + fp + fn_),
        f1,
        precision,
        recall,
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(GramError::Metric("empty confusion matrix".into()));
    }
    let a = class_metrics(cm, 0);
    let b = class_metrics(cm, 1);
    let mean = ClassMetrics {
        iou: (a.iou + b.iou) / 2.0,
        f1: (a.f1 + b.f1) / 2.0,
        precision: (a.precision + b.precision) / 2.0,
        recall: (a.recall + b.recall) / 2.0,
    };
    Ok(MetricsReport {
        non_slum: a,
        slum: b,
        mean,
        confusion: *cm,
    })
}

impl MetricsReport {
    pub fn miou(&self) -> f64 {
        self.mean.iou
    }

    /// Plain-text table with columns mIoU, F1, Precision, Recall.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>10} {:>8}", "class", "mIoU", "F1", "Precision", "Recall");
        for (name, m) in [("non-slum", &self.non_slum), ("slum", &self.slum), ("mean", &self.mean)] {
            let _ = writeln!(
                s,
                "{:<10} {:>8.4} {:>8.4} {:>10.4} {:>8.4}",
                name, m.iou, m.f1, m.precision, m.recall
            );
        }
        s
    }
}

/// Two-class mIoU between two masks, a class absent from both counting as
/// IoU 1 (agreement semantics, unlike [`compute_metrics`]).
pub fn agreement_miou(a: &[u8], b: &[u8]) -> Result<f64> {
    let mut cm = ConfusionMatrix::default();
    cm.add_pair(b, a)?;
    let mut sum = 0.0;
    for c in 0..2 {
        let o = 1 - c;
        let union = cm.counts[c][c] + cm.counts[o][c] + cm.counts[c][o];
        sum += if union == 0 {
            1.0
        } else {
            cm.counts[c][c] as f64 / union as f64
        };
    }
    Ok(sum / 2.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns one label per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(GramError::Analysis(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut rng = stream(seed, streams::KMEANS, &[]);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(points[idx].clone());
        let c = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(labels)
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Cluster the features of every group jointly and compare the groups'
/// occupied-cluster sets. Returns a symmetric `groups x groups` Jaccard matrix.
pub fn group_similarity(groups: &[Vec<Vec<f64>>], num_clusters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    for g in groups {
        if g.len() < num_clusters {
            return Err(GramError::Analysis(format!(
                "region has {} tiles, fewer than {num_clusters} clusters",
                g.len()
            )));
        }
    }
    let all: Vec<Vec<f64>> = groups.iter().flatten().cloned().collect();
    let labels = kmeans(&all, num_clusters, seed, 100)?;
    let mut sets = Vec::new();
    let mut at = 0;
    for g in groups {
        sets.push(labels[at..at + g.len()].iter().copied().collect::<BTreeSet<usize>>());
        at += g.len();
    }
    Ok(sets.iter().map(|a| sets.iter().map(|b| jaccard(a, b)).collect()).collect())
}

/// [`group_similarity`] restricted to `rows x cols`; both sides are clustered together.
pub fn similarity_from_features(
    rows: &[Vec<Vec<f64>>],
    cols: &[Vec<Vec<f64>>],
    num_clusters: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let groups: Vec<Vec<Vec<f64>>> = rows.iter().chain(cols).cloned().collect();
    let full = group_similarity(&groups, num_clusters, seed)?;
    Ok(full[..rows.len()].iter().map(|r| r[rows.len()..].to_vec()).collect())
}

/// Encoder features of a tile: pooled tokens averaged over every routing region.
pub fn tile_features(model: &SegModel, tile: &Tile) -> Result<Vec<f64>> {
    let img = tile.image_f64();
    let mut acc = vec![0.0; model.config.token_dim];
    for d in 0..model.config.num_regions {
        let out = model.forward(&img, d, RoutingPlan::Inference)?;
        for (a, v) in acc.iter_mut().zip(&out.pooled) {
            *a += v;
        }
    }
    let n = model.config.num_regions as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Similarity of each target tile group (rows) to each source region (cols).
pub fn region_similarity_matrix(
    model: &SegModel,
    targets: &[Vec<&Tile>],
    sources: &[Vec<&Tile>],
    num_clusters: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let feats = |groups: &[Vec<&Tile>]| -> Result<Vec<Vec<Vec<f64>>>> {
        groups
            .iter()
            .map(|g| g.par_iter().map(|t| tile_features(model, t)).collect())
            .collect()
    };
    similarity_from_features(&feats(targets)?, &feats(sources)?, num_clusters, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix {
            counts: [[50, 10], [5, 35]],
        };
        let r = compute_metrics(&cm).unwrap();
        assert!((r.slum.iou - 0.70).abs() < 1e-12);
        assert!((r.slum.precision - 35.0 / 45.0).abs() < 1e-12);
        assert!((r.slum.recall - 0.875).abs() < 1e-12);
        assert!((r.slum.f1 - 0.823_529_411_764_706).abs() < 1e-12);
        assert!(r.to_table().contains("Precision"));
    }

    #[test]
    fn perfect_and_degenerate_predictions() {
        let truth = vec![1u8; 16];
        let cm = accumulate_confusion(std::slice::from_ref(&truth), std::slice::from_ref(&truth)).unwrap();
        assert_eq!(cm.counts, [[0, 0], [0, 16]]);
        let comp = accumulate_confusion(&[vec![0u8; 16]], &[truth]).unwrap();
        assert_eq!(comp.counts, [[0, 0], [16, 0]]);
        assert_eq!(compute_metrics(&comp).unwrap().slum.iou, 0.0);
        let both = ConfusionMatrix {
            counts: [[8, 0], [0, 8]],
        };
        let r = compute_metrics(&both).unwrap();
        assert_eq!(r.mean, ClassMetrics { iou: 1.0, f1: 1.0, precision: 1.0, recall: 1.0 });
        assert!(compute_metrics(&ConfusionMatrix::default()).is_err());
        assert!(accumulate_confusion(&[vec![0u8; 3]], &[vec![0u8; 4]]).is_err());
    }

    #[test]
    fn agreement_miou_counts_absent_class_as_agreement() {
        assert_eq!(agreement_miou(&[0; 16], &[0; 16]).unwrap(), 1.0);
        assert_eq!(agreement_miou(&[1; 16], &[0; 16]).unwrap(), 0.0);
        // slum: inter 1, union 2; non-slum: inter 1, union 2.
        assert!((agreement_miou(&[1, 1, 0], &[1, 0, 0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![i as f64 * 0.01, 0.0]);
            pts.push(vec![10.0 + i as f64 * 0.01, 5.0]);
        }
        let labels = kmeans(&pts, 2, 3, 100).unwrap();
        for i in 0..10 {
            assert_eq!(labels[2 * i], labels[0]);
            assert_eq!(labels[2 * i + 1], labels[1]);
        }
        assert_ne!(labels[0], labels[1]);
        assert!(kmeans(&pts, 21, 0, 10).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [4, 5].into();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.0);
        assert_eq!(jaccard(&a, &[2, 3, 4].into()), 0.5);
    }

    #[test]
    fn similarity_is_symmetric_on_same_groups() {
        let groups: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|g| (0..6).map(|i| vec![g as f64 + 0.1 * i as f64, (i % 2) as f64]).collect())
            .collect();
        let m = similarity_from_features(&groups, &groups, 4, 1).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }
}
