//! Confusion matrices, mIoU and embedding-cluster separation.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::labels::IGNORE;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pixels whose target is [`IGNORE`] are skipped.
    pub fn update(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return validation(format!("{} predictions for {} targets", pred.len(), target.len()));
        }
        for (&p, &t) in pred.iter().zip(target) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::Data(format!("class id {} outside {} classes", p.max(t), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return validation("confusion matrices differ in class count");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes that appear in neither prediction nor truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn compute_miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    let k = cm.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|t| cm.get(t, c)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Leave-one-out nearest-centroid accuracy in cosine space.
    pub accuracy: f64,
    /// Mean silhouette with cosine distance; 0 when undefined.
    pub silhouette: f64,
    pub silhouette_defined: bool,
    /// Labels dropped because they had a single sample.
    pub excluded: Vec<usize>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Nearest-centroid accuracy and silhouette for labelled embeddings.
pub fn embedding_separation(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<SeparationReport> {
    if embeddings.len() != labels.len() {
        return validation("one label per embedding is required");
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let count = |c: usize| labels.iter().filter(|&&l| l == c).count();
    let excluded: Vec<usize> = classes.iter().copied().filter(|&c| count(c) < 2).collect();
    if !excluded.is_empty() {
        log::warn!("embedding separation: excluding singleton labels {excluded:?}");
    }
    classes.retain(|c| !excluded.contains(c));
    if classes.len() < 2 {
        return validation("need at least two labels with two or more samples each");
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
    let dim = embeddings[keep[0]].len();
    let x: Vec<Vec<f64>> = keep.iter().map(|&i| unit(&embeddings[i])).collect();
    let y: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let sums: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let mut s = vec![0.0; dim];
            for (xi, _) in x.iter().zip(&y).filter(|(_, &l)| l == c) {
                for (a, b) in s.iter_mut().zip(xi) {
                    *a += b;
                }
            }
            s
        })
        .collect();

    let mut correct = 0usize;
    for (i, xi) in x.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (ci, &c) in classes.iter().enumerate() {
            let centroid: Vec<f64> = if c == y[i] { sums[ci].iter().zip(xi).map(|(s, v)| s - v).collect() } else { sums[ci].clone() };
            let sim = cosine(xi, &centroid);
            if sim > best.0 {
                best = (sim, c);
            }
        }
        correct += usize::from(best.1 == y[i]);
    }

    let mut total = 0.0;
    let mut defined = true;
    for (i, xi) in x.iter().enumerate() {
        let mean_dist = |c: usize| {
            let (mut s, mut n) = (0.0, 0usize);
            for (j, xj) in x.iter().enumerate() {
                if j != i && y[j] == c {
                    s += 1.0 - cosine(xi, xj);
                    n += 1;
                }
            }
            s / n as f64
        };
        let a = mean_dist(y[i]);
        let b = classes.iter().filter(|&&c| c != y[i]).map(|&c| mean_dist(c)).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m <= 1e-12 {
            defined = false;
        } else {
            total += (b - a) / m;
        }
    }
    let silhouette = if defined { total / x.len() as f64 } else { 0.0 };
    Ok(SeparationReport { accuracy: correct as f64 / x.len() as f64, silhouette, silhouette_defined: defined, excluded })
}
