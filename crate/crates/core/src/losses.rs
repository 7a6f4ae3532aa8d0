//! Loss terms with analytic gradients, and a finite-difference checker.
//!
//! Every mean is taken over the pixels that participate in a term, never over
//! the full image, so the loss scale does not depend on mask coverage.

use crate::frameio::{Frame, LabelMap, IGNORE};
use crate::masks::ValidityMask;
use crate::raster::{check_plane, Field, ShapeError};
use crate::scalar::Real;
use crate::warp::{
    coordinate_depth_derivative, correspondences_with_depth, sample_field, WarpConfig, WarpError,
};
use crate::geometry::relative_transform;

/// Default weight of the geometric consistency term.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Weight of the geometric depth term.
pub const DEFAULT_LAMBDA_D: f64 = 0.1;

pub const SSIM_ALPHA: f64 = 0.85;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("label {label} at pixel {pixel} is not below {num_classes} classes")]
    Label {
        label: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("no labeled pixels to compute class frequencies from")]
    NoLabeledPixels,
    #[error("{0}")]
    Contract(String),
}

/// Loss value, gradient with respect to the term's input, and the number of
/// pixels averaged over.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Field<T>,
    pub count: usize,
}

impl<T: Real> LossGrad<T> {
    fn zero(shape: (usize, usize, usize)) -> Self {
        Self {
            loss: T::zero(),
            grad: Field::zeros(shape.0, shape.1, shape.2),
            count: 0,
        }
    }
}

/// Per-class weights for the supervised term.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights<T> {
    pub weights: Vec<T>,
}

impl<T: Real> ClassWeights<T> {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![T::one(); num_classes],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn median<T: Real>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::lit(2.0)
    }
}

/// Median frequency balancing.
///
/// `freq_c` is the pixel count of class `c` divided by the labeled pixel count
/// of the images in which `c` appears; `weight_c = median(freq) / freq_c`.
/// Classes that never appear get weight 0 and stay out of the median.
pub fn median_freq_weights<'a, T: Real>(
    label_maps: impl IntoIterator<Item = &'a LabelMap>,
    num_classes: usize,
) -> Result<ClassWeights<T>, LossError> {
    let mut class_pixels = vec![0u64; num_classes];
    let mut image_pixels = vec![0u64; num_classes];
    let mut any = false;
    for labels in label_maps {
        let mut counts = vec![0u64; num_classes];
        let mut labeled = 0u64;
        for (i, &l) in labels.as_slice().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let c = usize::from(l);
            if c >= num_classes {
                return Err(LossError::Label {
                    label: l,
                    pixel: i,
                    num_classes,
                });
            }
            counts[c] += 1;
            labeled += 1;
        }
        any |= labeled > 0;
        for c in 0..num_classes {
            if counts[c] > 0 {
                class_pixels[c] += counts[c];
                image_pixels[c] += labeled;
            }
        }
    }
    if !any {
        return Err(LossError::NoLabeledPixels);
    }
    let freq: Vec<Option<T>> = (0..num_classes)
        .map(|c| {
            (class_pixels[c] > 0).then(|| T::lit(class_pixels[c] as f64) / T::lit(image_pixels[c] as f64))
        })
        .collect();
    let med = median(freq.iter().flatten().copied().collect());
    Ok(ClassWeights {
        weights: freq
            .into_iter()
            .map(|f| f.map_or(T::zero(), |f| med / f))
            .collect(),
    })
}

/// Numerically stable softmax of one logit vector into `out`.
pub fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `-log softmax(z)[y]` computed as `logsumexp(z) - z[y]`.
fn neg_log_prob<T: Real>(logits: &[T], y: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = logits.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln() - logits[y]
}

/// Shared kernel: mean over selected pixels of `w[y]·CE`, with gradient
/// `w[y]·(softmax − onehot)/count`.
fn cross_entropy_kernel<T: Real>(
    logits: &Field<T>,
    target: impl Fn(usize) -> Option<(usize, T)>,
) -> LossGrad<T> {
    let c = logits.channels();
    let n = logits.pixel_count();
    let selected: Vec<(usize, usize, T)> = (0..n).filter_map(|i| target(i).map(|(y, w)| (i, y, w))).collect();
    let mut out = LossGrad::zero(logits.shape());
    if selected.is_empty() {
        return out;
    }
    let inv = T::one() / T::from_usize_lossy(selected.len());
    let mut p = vec![T::zero(); c];
    let mut total = T::zero();
    for &(i, y, w) in &selected {
        let z = logits.at(i);
        total += w * neg_log_prob(z, y);
        softmax_into(z, &mut p);
        let g = out.grad.at_mut(i);
        for k in 0..c {
            let onehot = if k == y { T::one() } else { T::zero() };
            g[k] = w * (p[k] - onehot) * inv;
        }
    }
    out.loss = total * inv;
    out.count = selected.len();
    out
}

fn check_labels<T: Real>(logits: &Field<T>, labels: &LabelMap) -> Result<(), LossError> {
    check_plane((logits.height(), logits.width()), labels.plane())?;
    let c = logits.channels();
    if let Some((i, &l)) = labels
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, &l)| l != IGNORE && usize::from(l) >= c)
    {
        return Err(LossError::Label {
            label: l,
            pixel: i,
            num_classes: c,
        });
    }
    Ok(())
}

/// Class-weighted cross-entropy over the non-IGNORE pixels.
pub fn weighted_cross_entropy<T: Real>(
    logits: &Field<T>,
    labels: &LabelMap,
    weights: &ClassWeights<T>,
) -> Result<LossGrad<T>, LossError> {
    check_labels(logits, labels)?;
    if weights.len() != logits.channels() {
        return Err(LossError::Contract(format!(
            "{} class weights for {} channels",
            weights.len(),
            logits.channels()
        )));
    }
    let l = labels.as_slice();
    Ok(cross_entropy_kernel(logits, |i| {
        (l[i] != IGNORE).then(|| (usize::from(l[i]), weights.weights[usize::from(l[i])]))
    }))
}

/// Unweighted cross-entropy against fused teacher labels, over pixels valid in
/// `mask` and labeled by the teacher. The teacher receives no gradient.
pub fn consistency_loss<T: Real>(
    student_logits: &Field<T>,
    teacher_labels: &LabelMap,
    mask: &ValidityMask,
) -> Result<LossGrad<T>, LossError> {
    check_labels(student_logits, teacher_labels)?;
    check_plane(teacher_labels.plane(), mask.plane())?;
    let l = teacher_labels.as_slice();
    Ok(cross_entropy_kernel(student_logits, |i| {
        (mask.is_valid(i) && l[i] != IGNORE).then(|| (usize::from(l[i]), T::one()))
    }))
}

/// Mean absolute depth error over pixels with `gt > 0`; subgradient
/// `sign(pred − gt)/count` with `sign(0) = 0`.
pub fn depth_l1<T: Real>(pred: &Field<T>, gt: &Field<T>) -> Result<LossGrad<T>, LossError> {
    pred.check_shape(gt.shape())?;
    let mut out = LossGrad::zero(pred.shape());
    let count = gt.as_slice().iter().filter(|&&g| g > T::zero()).count();
    if count == 0 {
        return Ok(out);
    }
    let inv = T::one() / T::from_usize_lossy(count);
    let mut total = T::zero();
    for (i, (&p, &g)) in pred.as_slice().iter().zip(gt.as_slice()).enumerate() {
        if g > T::zero() {
            let d = p - g;
            total += d.abs();
            out.grad.as_mut_slice()[i] = if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
    }
    out.loss = total * inv;
    out.count = count;
    Ok(out)
}

/// Constants of the photometric term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig<T> {
    /// Weight of the SSIM part against the L1 part.
    pub alpha: T,
    pub c1: T,
    pub c2: T,
}

impl<T: Real> Default for PhotometricConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(SSIM_ALPHA),
            c1: T::lit(SSIM_C1),
            c2: T::lit(SSIM_C2),
        }
    }
}

/// 3×3 window statistics, clipped at the image border.
struct WindowStats<T> {
    n: T,
    mx: T,
    my: T,
    sx: T,
    sy: T,
    sxy: T,
}

fn window<T: Real>(h: usize, w: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    let r0 = r.saturating_sub(1);
    let r1 = (r + 1).min(h - 1);
    let c0 = c.saturating_sub(1);
    let c1 = (c + 1).min(w - 1);
    (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |cc| (rr, cc)))
}

fn window_stats<T: Real>(x: &Field<T>, y: &Field<T>, r: usize, c: usize, ch: usize) -> WindowStats<T> {
    let (h, w) = (x.height(), x.width());
    let mut n = 0usize;
    let (mut ex, mut ey, mut exx, mut eyy, mut exy) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for (rr, cc) in window::<T>(h, w, r, c) {
        let a = x.get(rr, cc, ch);
        let b = y.get(rr, cc, ch);
        ex += a;
        ey += b;
        exx += a * a;
        eyy += b * b;
        exy += a * b;
        n += 1;
    }
    let nt = T::from_usize_lossy(n);
    let (mx, my) = (ex / nt, ey / nt);
    WindowStats {
        n: nt,
        mx,
        my,
        sx: exx / nt - mx * mx,
        sy: eyy / nt - my * my,
        sxy: exy / nt - mx * my,
    }
}

/// Photometric loss of a warped source image against the target image:
/// per masked pixel and channel, `α(1 − SSIM)/2 + (1 − α)|I − I'|`, averaged
/// over channels and masked pixels. SSIM uses 3×3 mean-pooled windows.
/// The gradient is with respect to the warped image.
pub fn photometric_ssim_loss<T: Real>(
    target: &Field<T>,
    warped: &Field<T>,
    mask: &[bool],
) -> Result<LossGrad<T>, LossError> {
    photometric_ssim_loss_with(target, warped, mask, &PhotometricConfig::default())
}

pub fn photometric_ssim_loss_with<T: Real>(
    target: &Field<T>,
    warped: &Field<T>,
    mask: &[bool],
    cfg: &PhotometricConfig<T>,
) -> Result<LossGrad<T>, LossError> {
    warped.check_shape(target.shape())?;
    let (h, w, chans) = target.shape();
    if mask.len() != h * w {
        return Err(ShapeError {
            expected: (h, w, 1),
            found: (mask.len(), 1, 1),
        }
        .into());
    }
    let mut out = LossGrad::zero(target.shape());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 || chans == 0 {
        return Ok(out);
    }
    let two = T::lit(2.0);
    let half_alpha = cfg.alpha / two;
    let l1_weight = T::one() - cfg.alpha;
    let scale = T::one() / T::from_usize_lossy(count * chans);
    let mut total = T::zero();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            for ch in 0..chans {
                let s = window_stats(target, warped, r, c, ch);
                let a = two * s.mx * s.my + cfg.c1;
                let b = two * s.sxy + cfg.c2;
                let cc = s.mx * s.mx + s.my * s.my + cfg.c1;
                let d = s.sx + s.sy + cfg.c2;
                let ssim = a * b / (cc * d);
                let diff = warped.get(r, c, ch) - target.get(r, c, ch);
                total += half_alpha * (T::one() - ssim) + l1_weight * diff.abs();

                let ds_dmy = two * s.mx * b / (cc * d) - ssim * two * s.my / cc;
                let ds_dsy = -ssim / d;
                let ds_dsxy = two * a / (cc * d);
                let k = -half_alpha * scale / s.n;
                for (rr, qc) in window::<T>(h, w, r, c) {
                    let yq = warped.get(rr, qc, ch);
                    let xq = target.get(rr, qc, ch);
                    let g = k * (ds_dmy + ds_dsy * two * (yq - s.my) + ds_dsxy * (xq - s.mx));
                    let cur = out.grad.get(rr, qc, ch);
                    out.grad.set(rr, qc, ch, cur + g);
                }
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let cur = out.grad.get(r, c, ch);
                out.grad.set(r, c, ch, cur + l1_weight * sign * scale);
            }
        }
    }
    out.loss = total * scale;
    out.count = count;
    Ok(out)
}

/// Photometric loss as a function of a target depth map: the source color is
/// warped into the target through `depth`, and the gradient is chained through
/// the bilinear coordinate derivatives to each depth value. `mask` is held
/// fixed; pixels without an in-view correspondence are dropped from it.
pub fn photometric_depth_loss<T: Real>(
    target: &Frame<T>,
    source: &Frame<T>,
    depth: &Field<T>,
    mask: &[bool],
    warp: &WarpConfig<T>,
) -> Result<LossGrad<T>, LossError> {
    let corr = correspondences_with_depth(source, target, depth, warp)?;
    let sampled = sample_field(&corr, &source.color)?;
    if mask.len() != sampled.sampled.len() {
        return Err(ShapeError {
            expected: (target.height(), target.width(), 1),
            found: (mask.len(), 1, 1),
        }
        .into());
    }
    let live: Vec<bool> = mask.iter().zip(&sampled.sampled).map(|(&m, &s)| m && s).collect();
    let photo = photometric_ssim_loss(&target.color, &sampled.values, &live)?;
    let rel = relative_transform(&target.pose, &source.pose);
    let (h, w) = target.plane();
    let mut grad = Field::zeros(h, w, 1);
    for i in 0..h * w {
        if !sampled.sampled[i] {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let (du, dv) = coordinate_depth_derivative(&target.intrinsics, &source.intrinsics, &rel, r, c, depth.as_slice()[i]);
        let g: T = (0..source.color.channels())
            .map(|ch| {
                photo.grad.get(r, c, ch) * (sampled.d_dx.get(r, c, ch) * du + sampled.d_dy.get(r, c, ch) * dv)
            })
            .sum();
        grad.as_mut_slice()[i] = g;
    }
    Ok(LossGrad {
        loss: photo.loss,
        grad,
        count: photo.count,
    })
}

/// Component losses feeding [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub l_s: T,
    pub l_g: T,
    pub l_ds: Option<T>,
    pub l_dg: Option<T>,
    pub count_s: usize,
    pub count_g: usize,
    pub count_ds: usize,
    pub count_dg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    /// `l_s + lambda·l_g`
    pub total: T,
    pub l_s: T,
    pub l_g: T,
    /// `l_ds + lambda_d·l_dg` when the depth terms are present.
    pub depth_total: Option<T>,
    pub l_ds: Option<T>,
    pub l_dg: Option<T>,
    pub lambda: T,
    pub lambda_d: T,
    pub count_s: usize,
    pub count_g: usize,
    pub count_ds: usize,
    pub count_dg: usize,
}

pub fn total_loss<T: Real>(parts: &LossParts<T>, lambda: T, lambda_d: T) -> LossReport<T> {
    let depth_total = match (parts.l_ds, parts.l_dg) {
        (None, None) => None,
        (ds, dg) => Some(ds.unwrap_or_else(T::zero) + lambda_d * dg.unwrap_or_else(T::zero)),
    };
    LossReport {
        total: parts.l_s + lambda * parts.l_g,
        l_s: parts.l_s,
        l_g: parts.l_g,
        depth_total,
        l_ds: parts.l_ds,
        l_dg: parts.l_dg,
        lambda,
        lambda_d,
        count_s: parts.count_s,
        count_g: parts.count_g,
        count_ds: parts.count_ds,
        count_dg: parts.count_dg,
    }
}

/// Denominator floor for relative errors of near-zero gradient components.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Component with the largest error.
    pub worst_index: usize,
    pub probes: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// Folds two reports into the worse of the two.
    pub fn merge(self, other: Self) -> Self {
        let worst = if other.max_rel_err > self.max_rel_err { other } else { self };
        Self {
            probes: self.probes + other.probes,
            tolerance: self.tolerance.min(other.tolerance),
            ..worst
        }
    }
}

/// Compares the analytic gradient of `loss_fn` at `point` with central finite
/// differences on the listed components (all of them when `probes` is `None`).
pub fn gradcheck<T: Real>(
    loss_fn: impl Fn(&[T]) -> (T, Vec<T>),
    point: &[T],
    probes: Option<&[usize]>,
    step: T,
    tolerance: f64,
) -> GradcheckReport {
    let (_, analytic) = loss_fn(point);
    let all: Vec<usize>;
    let indices = match probes {
        Some(p) => p,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        probes: indices.len(),
        tolerance,
    };
    for &j in indices {
        let orig = x[j];
        x[j] = orig + step;
        let up = loss_fn(&x).0;
        x[j] = orig - step;
        let down = loss_fn(&x).0;
        x[j] = orig;
        let numeric = ((up - down) / (step + step)).to_f64_lossy();
        let a = analytic[j].to_f64_lossy();
        let denom = a.abs().max(numeric.abs()).max(GRADCHECK_ABS_FLOOR);
        let err = (a - numeric).abs() / denom;
        if !(err <= report.max_rel_err) {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = j;
        }
    }
    report
}
