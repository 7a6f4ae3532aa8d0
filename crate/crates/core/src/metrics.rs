//! Segmentation and depth evaluation.

use crate::frameio::{LabelMap, IGNORE};
use crate::raster::{check_plane, Field, ShapeError};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{which} label {label} at pixel {pixel} is not below {num_classes} classes")]
    Label {
        which: &'static str,
        label: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("confusion matrices have {0} and {1} classes")]
    ClassMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
}

/// Rows are ground truth, columns predictions. Column `C` counts valid
/// ground-truth pixels whose prediction is IGNORE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * (num_classes + 1)],
        }
    }

    /// Builds a matrix from C×C rows (no IGNORE predictions).
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let n = rows.len();
        let mut cm = Self::new(n);
        for (g, row) in rows.iter().enumerate() {
            for (p, &v) in row.iter().enumerate().take(n + 1) {
                cm.counts[g * (n + 1) + p] = v;
            }
        }
        cm
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count for ground truth `gt` and prediction `pred`; `pred == C` is the
    /// "none" column.
    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.num_classes + 1) + pred]
    }

    pub fn none_count(&self, gt: usize) -> u64 {
        self.get(gt, self.num_classes)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..=self.num_classes).map(|p| self.get(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, pred)).sum()
    }

    /// Adds one frame; IGNORE ground truth contributes nothing.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<(), MetricsError> {
        check_plane(gt.plane(), pred.plane())?;
        let c = self.num_classes;
        for (i, (&g, &p)) in gt.as_slice().iter().zip(pred.as_slice()).enumerate() {
            if g == IGNORE {
                continue;
            }
            if usize::from(g) >= c {
                return Err(MetricsError::Label { which: "ground-truth", label: g, pixel: i, num_classes: c });
            }
            let col = if p == IGNORE {
                c
            } else if usize::from(p) < c {
                usize::from(p)
            } else {
                return Err(MetricsError::Label { which: "predicted", label: p, pixel: i, num_classes: c });
            };
            self.counts[usize::from(g) * (c + 1) + col] += 1;
        }
        Ok(())
    }

    pub fn add(&mut self, other: &Self) -> Result<(), MetricsError> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::ClassMismatch(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub pix_acc: f64,
    pub mean_acc: f64,
    pub miou: f64,
    pub fwiou: f64,
}

/// Per-class IoU; `None` for classes absent from ground truth.
pub fn class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes())
        .map(|c| {
            let row = cm.row_sum(c);
            (row > 0).then(|| {
                let d = cm.get(c, c) as f64;
                d / ((row + cm.col_sum(c)) as f64 - d)
            })
        })
        .collect()
}

pub fn segmentation_metrics(cm: &ConfusionMatrix) -> Result<SegmentationMetrics, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let total = total as f64;
    let diag: u64 = (0..cm.num_classes()).map(|c| cm.get(c, c)).sum();
    let ious = class_iou(cm);
    let present: Vec<usize> = (0..cm.num_classes()).filter(|&c| cm.row_sum(c) > 0).collect();
    let n = present.len() as f64;
    let mean_acc = present.iter().map(|&c| cm.get(c, c) as f64 / cm.row_sum(c) as f64).sum::<f64>() / n;
    let miou = ious.iter().flatten().sum::<f64>() / n;
    let fwiou = present
        .iter()
        .map(|&c| cm.row_sum(c) as f64 / total * ious[c].unwrap_or(0.0))
        .sum();
    Ok(SegmentationMetrics {
        pix_acc: diag as f64 / total,
        mean_acc,
        miou,
        fwiou,
    })
}

/// Root mean square depth error over pixels with `gt > 0`.
pub fn depth_rms<T: Real>(pred: &Field<T>, gt: &Field<T>) -> Result<f64, MetricsError> {
    pred.check_shape(gt.shape())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if g > T::zero() {
            let d = (p - g).to_f64_lossy();
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((sum / n as f64).sqrt())
}
