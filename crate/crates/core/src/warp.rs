//! Depth-based inverse warping of per-pixel fields from a source view into a
//! target view, plus a forward z-buffer splat used as an independent oracle.
//!
//! For a target pixel `p` with depth `d`, the source location is
//! `p' = K T d K⁻¹ p` where `T` maps target-camera to source-camera
//! coordinates. Source values are read with bilinear interpolation.

use rayon::prelude::*;

use crate::frameio::{Frame, LabelMap, ProbMap, IGNORE};
use crate::geometry::{relative_transform, Intrinsics, Pixel, RigidTransform, Vec3};
use crate::masks::{Reason, ValidityMask};
use crate::raster::{check_plane, Field, ShapeError};
use crate::scalar::Real;

pub const DEFAULT_OCCLUSION_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("frames {source_index} and {target_index} differ in size: {source_plane:?} vs {target_plane:?}")]
    FrameMismatch {
        source_index: usize,
        target_index: usize,
        source_plane: (usize, usize),
        target_plane: (usize, usize),
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpConfig<T> {
    /// Absolute depth disagreement, in meters, above which a pixel is occluded.
    pub occl_threshold: T,
}

impl<T: Real> Default for WarpConfig<T> {
    fn default() -> Self {
        Self {
            occl_threshold: T::lit(DEFAULT_OCCLUSION_THRESHOLD),
        }
    }
}

/// Coordinates within this distance of an integer are snapped onto it, so
/// that reprojection round-off never smears an exact pixel hit.
#[inline]
fn snap<T: Real>(v: T) -> T {
    let tol = T::epsilon().sqrt() * T::lit(4.0);
    let r = v.round();
    if (v - r).abs() <= tol {
        r
    } else {
        v
    }
}

/// The four bilinear taps around a continuous coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint<T> {
    pub col0: usize,
    pub row0: usize,
    pub col1: usize,
    pub row1: usize,
    /// Fractional offsets from `(col0, row0)`, each in [0, 1].
    pub ax: T,
    pub ay: T,
}

impl<T: Real> Footprint<T> {
    /// `None` when `p` lies outside `[0, W−1] × [0, H−1]`.
    pub fn new(p: Pixel<T>, width: usize, height: usize) -> Option<Self> {
        if width == 0 || height == 0 {
            return None;
        }
        let max_x = T::from_usize_lossy(width - 1);
        let max_y = T::from_usize_lossy(height - 1);
        if !(p.x >= T::zero() && p.x <= max_x && p.y >= T::zero() && p.y <= max_y) {
            return None;
        }
        let col0 = p.x.floor().to_usize()?.min(width.saturating_sub(2));
        let row0 = p.y.floor().to_usize()?.min(height.saturating_sub(2));
        Some(Self {
            col0,
            row0,
            col1: (col0 + 1).min(width - 1),
            row1: (row0 + 1).min(height - 1),
            ax: p.x - T::from_usize_lossy(col0),
            ay: p.y - T::from_usize_lossy(row0),
        })
    }

    /// `(row, col, weight)` for the four taps, top-left first.
    #[inline]
    pub fn taps(&self) -> [(usize, usize, T); 4] {
        let (ax, ay) = (self.ax, self.ay);
        let (bx, by) = (T::one() - ax, T::one() - ay);
        [
            (self.row0, self.col0, bx * by),
            (self.row0, self.col1, ax * by),
            (self.row1, self.col0, bx * ay),
            (self.row1, self.col1, ax * ay),
        ]
    }

    /// The single tap carrying all the weight, if the coordinate is integral.
    #[inline]
    pub fn exact_tap(&self) -> Option<(usize, usize)> {
        let taps = self.taps();
        let nonzero: Vec<_> = taps.iter().filter(|t| t.2 != T::zero()).collect();
        match nonzero.as_slice() {
            [(r, c, _)] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Nearest pixel `(row, col)`.
    #[inline]
    pub fn nearest(&self) -> (usize, usize) {
        let half = T::lit(0.5);
        (
            if self.ay >= half { self.row1 } else { self.row0 },
            if self.ax >= half { self.col1 } else { self.col0 },
        )
    }
}

/// Interpolated channel vector and its derivatives with respect to `x`
/// (column) and `y` (row).
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSample<T> {
    pub value: Vec<T>,
    pub d_dx: Vec<T>,
    pub d_dy: Vec<T>,
}

fn sample_footprint<T: Real>(field: &Field<T>, fp: &Footprint<T>, out: &mut BilinearSample<T>) {
    let v00 = field.pixel(fp.row0, fp.col0);
    let v01 = field.pixel(fp.row0, fp.col1);
    let v10 = field.pixel(fp.row1, fp.col0);
    let v11 = field.pixel(fp.row1, fp.col1);
    let [(_, _, w00), (_, _, w01), (_, _, w10), (_, _, w11)] = fp.taps();
    let (ax, ay) = (fp.ax, fp.ay);
    let (bx, by) = (T::one() - ax, T::one() - ay);
    let dx_live = fp.col1 != fp.col0;
    let dy_live = fp.row1 != fp.row0;
    for ch in 0..field.channels() {
        out.value[ch] = w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] + w11 * v11[ch];
        out.d_dx[ch] = if dx_live {
            by * (v01[ch] - v00[ch]) + ay * (v11[ch] - v10[ch])
        } else {
            T::zero()
        };
        out.d_dy[ch] = if dy_live {
            bx * (v10[ch] - v00[ch]) + ax * (v11[ch] - v01[ch])
        } else {
            T::zero()
        };
    }
}

/// Samples `field` at `p`; `None` signals out-of-view.
pub fn bilinear_sample<T: Real>(field: &Field<T>, p: Pixel<T>) -> Option<BilinearSample<T>> {
    let fp = Footprint::new(p, field.width(), field.height())?;
    let c = field.channels();
    let mut out = BilinearSample {
        value: vec![T::zero(); c],
        d_dx: vec![T::zero(); c],
        d_dy: vec![T::zero(); c],
    };
    sample_footprint(field, &fp, &mut out);
    Some(out)
}

/// Per-target-pixel correspondence into a source view.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences<T> {
    height: usize,
    width: usize,
    /// Source coordinate for every pixel whose reprojection lands in view.
    pub coords: Vec<Option<Pixel<T>>>,
    /// z of the reprojected point in the source camera; NaN without target depth.
    pub transformed_depth: Vec<T>,
    /// Bilinear source depth at `coords`; NaN where not sampled.
    pub sampled_source_depth: Vec<T>,
    pub mask: ValidityMask,
}

impl<T: Real> Correspondences<T> {
    #[inline]
    pub fn plane(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn footprint(&self, i: usize) -> Option<Footprint<T>> {
        self.coords[i].and_then(|p| Footprint::new(p, self.width, self.height))
    }
}

fn check_frames<T: Real>(source: &Frame<T>, target: &Frame<T>) -> Result<(), WarpError> {
    if source.plane() != target.plane() {
        return Err(WarpError::FrameMismatch {
            source_index: source.index,
            target_index: target.index,
            source_plane: source.plane(),
            target_plane: target.plane(),
        });
    }
    Ok(())
}

/// Reprojects every target pixel through the target's own depth map.
pub fn correspondences<T: Real>(
    source: &Frame<T>,
    target: &Frame<T>,
    cfg: &WarpConfig<T>,
) -> Result<Correspondences<T>, WarpError> {
    correspondences_with_depth(source, target, &target.depth, cfg)
}

/// Reprojects every target pixel through `depth` (e.g. a predicted depth map).
pub fn correspondences_with_depth<T: Real>(
    source: &Frame<T>,
    target: &Frame<T>,
    depth: &Field<T>,
    cfg: &WarpConfig<T>,
) -> Result<Correspondences<T>, WarpError> {
    check_frames(source, target)?;
    depth.check_shape((target.height(), target.width(), 1))?;
    let (h, w) = target.plane();
    let rel = relative_transform(&target.pose, &source.pose);
    let kt = target.intrinsics;
    let ks = source.intrinsics;
    let src_depth = source.depth.as_slice();
    let thr = cfg.occl_threshold;

    let per_pixel: Vec<(Option<Pixel<T>>, T, T, Reason)> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let nan = T::nan();
            let d = depth.as_slice()[i];
            if !(d > T::zero()) {
                return (None, nan, nan, Reason::NoDepth);
            }
            let (row, col) = (i / w, i % w);
            let x = rel.apply(kt.ray(Pixel::center(row, col)) * d);
            if !(x.z > T::zero()) {
                return (None, x.z, nan, Reason::OutOfView);
            }
            let p = Pixel::new(snap(ks.fx * x.x / x.z + ks.cx), snap(ks.fy * x.y / x.z + ks.cy));
            let Some(fp) = Footprint::new(p, w, h) else {
                return (None, x.z, nan, Reason::OutOfView);
            };
            let mut sampled = T::zero();
            for (r, c, wt) in fp.taps() {
                if wt == T::zero() {
                    continue;
                }
                let sd = src_depth[r * w + c];
                if !(sd > T::zero()) {
                    return (Some(p), x.z, nan, Reason::NoDepth);
                }
                sampled += wt * sd;
            }
            let reason = if (sampled - x.z).abs() > thr {
                Reason::Occluded
            } else {
                Reason::Valid
            };
            (Some(p), x.z, sampled, reason)
        })
        .collect();

    let mut coords = Vec::with_capacity(h * w);
    let mut transformed_depth = Vec::with_capacity(h * w);
    let mut sampled_source_depth = Vec::with_capacity(h * w);
    let mut reasons = Vec::with_capacity(h * w);
    for (p, z, s, r) in per_pixel {
        coords.push(p);
        transformed_depth.push(z);
        sampled_source_depth.push(s);
        reasons.push(r);
    }
    Ok(Correspondences {
        height: h,
        width: w,
        coords,
        transformed_depth,
        sampled_source_depth,
        mask: ValidityMask::from_reasons(h, w, reasons).expect("sized by construction"),
    })
}

/// Warps a source probability map along `corr`.
///
/// Pixels whose weighted source taps include an invalid probability are
/// marked NO_DEPTH (there is no source prediction to carry). Interpolated
/// vectors are renormalized; integral hits are copied verbatim.
pub fn warp_probmap<T: Real>(
    corr: &Correspondences<T>,
    source_probs: &ProbMap<T>,
) -> Result<(ProbMap<T>, ValidityMask), WarpError> {
    check_plane(corr.plane(), source_probs.plane())?;
    let (h, w) = corr.plane();
    let c = source_probs.channels();
    let values = source_probs.values();
    let per_pixel: Vec<Option<Vec<T>>> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            if !corr.mask.is_valid(i) {
                return None;
            }
            let fp = corr.footprint(i)?;
            if let Some((r, col)) = fp.exact_tap() {
                let j = r * w + col;
                return source_probs.is_valid(j).then(|| values.at(j).to_vec());
            }
            if fp
                .taps()
                .iter()
                .any(|&(r, col, wt)| wt != T::zero() && !source_probs.is_valid(r * w + col))
            {
                return None;
            }
            let mut s = BilinearSample {
                value: vec![T::zero(); c],
                d_dx: vec![T::zero(); c],
                d_dy: vec![T::zero(); c],
            };
            sample_footprint(values, &fp, &mut s);
            let total: T = s.value.iter().copied().sum();
            if !(total > T::zero()) {
                return None;
            }
            Some(s.value.into_iter().map(|v| v / total).collect())
        })
        .collect();

    let mut out = Field::zeros(h, w, c);
    let mut valid = vec![false; h * w];
    let mut mask = corr.mask.clone();
    for (i, v) in per_pixel.into_iter().enumerate() {
        match v {
            Some(v) => {
                out.at_mut(i).copy_from_slice(&v);
                valid[i] = true;
            }
            None => mask.mark(i, Reason::NoDepth),
        }
    }
    // Pixels with no correspondence carry the warp's own reason already.
    let probs = ProbMap::from_parts(out, valid).expect("sized by construction");
    Ok((probs, mask))
}

/// Result of an inverse warp in target geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult<T> {
    pub warped: ProbMap<T>,
    pub sampled_source_depth: Field<T>,
    pub transformed_depth: Field<T>,
    pub coords: Vec<Option<Pixel<T>>>,
}

/// Warps `source_probs` (defined on `source`) into the view of `target`.
pub fn inverse_warp<T: Real>(
    source: &Frame<T>,
    source_probs: &ProbMap<T>,
    target: &Frame<T>,
    cfg: &WarpConfig<T>,
) -> Result<(WarpResult<T>, ValidityMask), WarpError> {
    let corr = correspondences(source, target, cfg)?;
    let (warped, mask) = warp_probmap(&corr, source_probs)?;
    let (h, w) = corr.plane();
    let field = |v: &[T]| Field::from_vec(h, w, 1, v.to_vec()).expect("sized by construction");
    let sampled_source_depth = field(&corr.sampled_source_depth);
    let transformed_depth = field(&corr.transformed_depth);
    Ok((
        WarpResult {
            warped,
            sampled_source_depth,
            transformed_depth,
            coords: corr.coords,
        },
        mask,
    ))
}

/// A field sampled along correspondences, with coordinate derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField<T> {
    pub values: Field<T>,
    pub d_dx: Field<T>,
    pub d_dy: Field<T>,
    /// True where a sample was taken (correspondence in view).
    pub sampled: Vec<bool>,
}

/// Bilinearly samples any source field (e.g. color) at every in-view
/// correspondence, NO_DEPTH and OCCLUDED pixels included. Other pixels are 0.
pub fn sample_field<T: Real>(corr: &Correspondences<T>, field: &Field<T>) -> Result<SampledField<T>, WarpError> {
    check_plane(corr.plane(), (field.height(), field.width()))?;
    let (h, w) = corr.plane();
    let c = field.channels();
    let samples: Vec<Option<BilinearSample<T>>> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let fp = corr.footprint(i)?;
            let mut s = BilinearSample {
                value: vec![T::zero(); c],
                d_dx: vec![T::zero(); c],
                d_dy: vec![T::zero(); c],
            };
            sample_footprint(field, &fp, &mut s);
            Some(s)
        })
        .collect();
    let mut values = Field::zeros(h, w, c);
    let mut d_dx = Field::zeros(h, w, c);
    let mut d_dy = Field::zeros(h, w, c);
    let mut sampled = vec![false; h * w];
    for (i, s) in samples.into_iter().enumerate() {
        if let Some(s) = s {
            values.at_mut(i).copy_from_slice(&s.value);
            d_dx.at_mut(i).copy_from_slice(&s.d_dx);
            d_dy.at_mut(i).copy_from_slice(&s.d_dy);
            sampled[i] = true;
        }
    }
    Ok(SampledField {
        values,
        d_dx,
        d_dy,
        sampled,
    })
}

/// Nearest-neighbor warp of a source boolean plane (e.g. a boundary mask).
/// Pixels without a correspondence read `false`.
pub fn warp_flags_nearest<T: Real>(corr: &Correspondences<T>, flags: &[bool]) -> Result<Vec<bool>, WarpError> {
    let (h, w) = corr.plane();
    if flags.len() != h * w {
        return Err(ShapeError {
            expected: (h, w, 1),
            found: (flags.len(), 1, 1),
        }
        .into());
    }
    Ok((0..h * w)
        .map(|i| {
            corr.footprint(i)
                .map(|fp| {
                    let (r, c) = fp.nearest();
                    flags[r * w + c]
                })
                .unwrap_or(false)
        })
        .collect())
}

/// Nearest-neighbor warp of a source label map; unmatched pixels are IGNORE.
pub fn warp_labels_nearest<T: Real>(corr: &Correspondences<T>, labels: &LabelMap) -> Result<LabelMap, WarpError> {
    check_plane(corr.plane(), labels.plane())?;
    let (h, w) = corr.plane();
    let out = (0..h * w)
        .map(|i| {
            corr.footprint(i)
                .map(|fp| {
                    let (r, c) = fp.nearest();
                    labels.get(r, c)
                })
                .unwrap_or(IGNORE)
        })
        .collect();
    Ok(LabelMap::new(h, w, out).expect("sized by construction"))
}

/// Derivative of the source coordinate `(x, y)` with respect to the target
/// depth at pixel `(row, col)`, for the relative transform `rel`.
pub fn coordinate_depth_derivative<T: Real>(
    target_k: &Intrinsics<T>,
    source_k: &Intrinsics<T>,
    rel: &RigidTransform<T>,
    row: usize,
    col: usize,
    depth: T,
) -> (T, T) {
    let ray = target_k.ray(Pixel::center(row, col));
    let x = rel.apply(ray * depth);
    let dx: Vec3<T> = rel.rotation().mul_vec(ray);
    let iz = T::one() / x.z;
    (
        source_k.fx * (dx.x * iz - x.x * dx.z * iz * iz),
        source_k.fy * (dx.y * iz - x.y * dx.z * iz * iz),
    )
}

/// Output of [`forward_splat_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplatResult<T> {
    pub labels: LabelMap,
    pub coverage: Vec<bool>,
    /// Winning z-buffer depth; infinity where uncovered.
    pub depth: Vec<T>,
}

/// Forward-splats source labels into the target with a z-buffer.
///
/// Deliberately shares no code with the inverse path: each source pixel with
/// depth is lifted to world coordinates with the source pose, brought into the
/// target camera with the inverse target pose, and rounded to the nearest
/// target pixel. The smallest depth wins; ties keep the earliest source pixel.
pub fn forward_splat_oracle<T: Real>(
    source: &Frame<T>,
    source_labels: &LabelMap,
    target: &Frame<T>,
) -> Result<SplatResult<T>, WarpError> {
    check_frames(source, target)?;
    check_plane(source.plane(), source_labels.plane())?;
    let (h, w) = target.plane();
    let ms = source.pose.to_matrix();
    let mt = target.pose.to_matrix();
    let (ks, kt) = (&source.intrinsics, &target.intrinsics);
    let mut zbuf = vec![T::infinity(); h * w];
    let mut labels = vec![IGNORE; h * w];
    for row in 0..source.height() {
        for col in 0..source.width() {
            let i = row * source.width() + col;
            let d = source.depth_at(i);
            if !(d > T::zero()) {
                continue;
            }
            let cam = [
                (T::from_usize_lossy(col) - ks.cx) / ks.fx * d,
                (T::from_usize_lossy(row) - ks.cy) / ks.fy * d,
                d,
            ];
            let mut world = [T::zero(); 3];
            for (a, wv) in world.iter_mut().enumerate() {
                *wv = ms[a][0] * cam[0] + ms[a][1] * cam[1] + ms[a][2] * cam[2] + ms[a][3];
            }
            let rel = [world[0] - mt[0][3], world[1] - mt[1][3], world[2] - mt[2][3]];
            // Rotation transpose brings world offsets into the target camera.
            let mut tc = [T::zero(); 3];
            for (a, tv) in tc.iter_mut().enumerate() {
                *tv = mt[0][a] * rel[0] + mt[1][a] * rel[1] + mt[2][a] * rel[2];
            }
            if !(tc[2] > T::zero()) {
                continue;
            }
            let u = kt.fx * tc[0] / tc[2] + kt.cx;
            let v = kt.fy * tc[1] / tc[2] + kt.cy;
            let (uc, vr) = ((u + T::lit(0.5)).floor(), (v + T::lit(0.5)).floor());
            if uc < T::zero() || vr < T::zero() {
                continue;
            }
            let (uc, vr) = (uc.to_usize().unwrap_or(usize::MAX), vr.to_usize().unwrap_or(usize::MAX));
            if uc >= w || vr >= h {
                continue;
            }
            let j = vr * w + uc;
            if tc[2] < zbuf[j] {
                zbuf[j] = tc[2];
                labels[j] = source_labels.as_slice()[i];
            }
        }
    }
    let coverage = zbuf.iter().map(|z| z.is_finite()).collect();
    Ok(SplatResult {
        labels: LabelMap::new(h, w, labels).expect("sized by construction"),
        coverage,
        depth: zbuf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, RigidTransform, Vec3};

    fn grid() -> Field<f64> {
        Field::from_vec(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    /// Central-difference oracle for the sample value.
    fn fd(field: &Field<f64>, x: f64, y: f64, step: f64) -> (f64, f64) {
        let at = |x, y| bilinear_sample(field, Pixel::new(x, y)).unwrap().value[0];
        (
            (at(x + step, y) - at(x - step, y)) / (2.0 * step),
            (at(x, y + step) - at(x, y - step)) / (2.0 * step),
        )
    }

    #[test]
    fn bilinear_hand_values() {
        let f = grid();
        assert_eq!(bilinear_sample(&f, Pixel::new(0.5, 0.5)).unwrap().value[0], 1.5);
        assert_eq!(bilinear_sample(&f, Pixel::new(0.0, 0.0)).unwrap().value[0], 0.0);
        let s = bilinear_sample(&f, Pixel::new(0.25, 0.0)).unwrap();
        assert_eq!(s.value[0], 0.25);
        // The field is exactly x + 2y, so both derivatives are constant.
        let (ox, oy) = fd(&f, 0.25, 0.5, 1e-5);
        assert!((s.d_dx[0] - 1.0).abs() < 1e-12 && (ox - 1.0).abs() < 1e-9);
        assert!((s.d_dy[0] - 2.0).abs() < 1e-12 && (oy - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bilinear_out_of_view() {
        let f = grid();
        assert!(bilinear_sample(&f, Pixel::new(-0.01, 0.0)).is_none());
        assert!(bilinear_sample(&f, Pixel::new(0.0, 1.01)).is_none());
        assert_eq!(bilinear_sample(&f, Pixel::new(1.0, 1.0)).unwrap().value[0], 3.0);
    }

    #[test]
    fn bilinear_derivative_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let f = Field::from_fn(9, 11, 2, |_, _, _| rng.random::<f64>());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            // Stay away from cell edges where the derivative jumps.
            let x = rng.random_range(0..10) as f64 + rng.random_range(0.01..0.99);
            let y = rng.random_range(0..8) as f64 + rng.random_range(0.01..0.99);
            let s = bilinear_sample(&f, Pixel::new(x, y)).unwrap();
            let at = |x, y| bilinear_sample(&f, Pixel::new(x, y)).unwrap().value;
            let h = 1e-4;
            for ch in 0..2 {
                let nx = (at(x + h, y)[ch] - at(x - h, y)[ch]) / (2.0 * h);
                let ny = (at(x, y + h)[ch] - at(x, y - h)[ch]) / (2.0 * h);
                let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel(s.d_dx[ch], nx) <= 1e-4, "{} vs {}", s.d_dx[ch], nx);
                assert!(rel(s.d_dy[ch], ny) <= 1e-4, "{} vs {}", s.d_dy[ch], ny);
            }
        }
    }

    fn wall_frame(index: usize, tx: f64, depth: f64, w: usize, h: usize) -> Frame<f64> {
        let k = Intrinsics::new(100.0, 100.0, (w / 2) as f64, (h / 2) as f64, w, h).unwrap();
        Frame {
            index,
            color: Field::zeros(h, w, 3),
            depth: Field::filled(h, w, 1, depth),
            pose: RigidTransform::new(Mat3::identity(), Vec3::new(tx, 0.0, 0.0)).unwrap(),
            intrinsics: k,
            labels: None,
        }
    }

    fn column_probs(h: usize, w: usize) -> ProbMap<f64> {
        let v = Field::from_fn(h, w, 2, |_, c, ch| {
            let a = c as f64 / (w - 1) as f64;
            if ch == 0 { a } else { 1.0 - a }
        });
        ProbMap::new(v, vec![true; h * w]).unwrap()
    }

    #[test]
    fn identity_warp_is_exact_and_masks_holes() {
        let mut f = wall_frame(0, 0.0, 2.0, 20, 10);
        f.depth.set(3, 4, 0, 0.0);
        let probs = column_probs(10, 20);
        let (res, mask) = inverse_warp(&f, &probs, &f, &WarpConfig::default()).unwrap();
        for i in 0..200 {
            if i == 3 * 20 + 4 {
                assert_eq!(mask.reason(i), Reason::NoDepth);
                assert!(!res.warped.is_valid(i));
            } else {
                assert!(mask.is_valid(i), "pixel {i}: {:?}", mask.reason(i));
                assert_eq!(res.warped.at(i), probs.at(i));
            }
        }
    }

    #[test]
    fn lateral_shift_gives_analytic_disparity() {
        // Source camera 0.1 m to the right: a wall point at 2 m appears 5 px
        // further left in the source.
        let target = wall_frame(0, 0.0, 2.0, 100, 20);
        let source = wall_frame(1, 0.1, 2.0, 100, 20);
        let corr = correspondences(&source, &target, &WarpConfig::default()).unwrap();
        let mut valid = 0;
        for r in 0..20 {
            for c in 0..100 {
                let i = r * 100 + c;
                if corr.mask.is_valid(i) {
                    valid += 1;
                    let p = corr.coords[i].unwrap();
                    assert!((p.x - (c as f64 - 5.0)).abs() <= 1e-4);
                    assert!((p.y - r as f64).abs() <= 1e-9);
                } else {
                    assert_eq!(corr.mask.reason(i), Reason::OutOfView);
                    assert!(c < 5);
                }
            }
        }
        assert_eq!(valid, 95 * 20);
        let probs = column_probs(20, 100);
        let (warped, _) = warp_probmap(&corr, &probs).unwrap();
        for c in 5..100 {
            assert_eq!(warped.at(c), probs.at(c - 5));
        }
    }

    #[test]
    fn occlusion_threshold_monotone() {
        let target = wall_frame(0, 0.0, 2.0, 40, 10);
        let mut source = wall_frame(1, 0.05, 2.0, 40, 10);
        for c in 10..20 {
            for r in 0..10 {
                source.depth.set(r, c, 0, 1.0);
            }
        }
        let mut prev: Option<ValidityMask> = None;
        for thr in [2.0, 0.5, 0.05, 0.01] {
            let m = correspondences(&source, &target, &WarpConfig { occl_threshold: thr }).unwrap().mask;
            if let Some(p) = &prev {
                for i in 0..m.reasons().len() {
                    if p.reason(i) == Reason::Occluded {
                        assert_eq!(m.reason(i), Reason::Occluded);
                    }
                }
            }
            prev = Some(m);
        }
        assert!(prev.unwrap().count(Reason::Occluded) > 0);
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = wall_frame(0, 0.0, 2.0, 10, 10);
        let b = wall_frame(1, 0.0, 2.0, 12, 10);
        assert!(matches!(
            correspondences(&a, &b, &WarpConfig::default()),
            Err(WarpError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn splat_identity_and_empty_depth() {
        let f = wall_frame(0, 0.0, 2.0, 12, 8);
        let labels = LabelMap::from_fn(8, 12, |r, c| ((r + c) % 3) as u8);
        let s = forward_splat_oracle(&f, &labels, &f).unwrap();
        assert!(s.coverage.iter().all(|&c| c));
        assert_eq!(s.labels, labels);
        let mut empty = f.clone();
        empty.depth = Field::zeros(8, 12, 1);
        let s = forward_splat_oracle(&empty, &labels, &f).unwrap();
        assert!(s.coverage.iter().all(|&c| !c));
    }

    #[test]
    fn depth_derivative_matches_finite_differences() {
        let k = Intrinsics::new(90.0, 95.0, 31.5, 23.5, 64, 48).unwrap();
        let a = 0.3f64;
        let rot = Mat3::from_rows([[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]]);
        let rel = RigidTransform::new(rot, Vec3::new(0.2, -0.1, 0.05)).unwrap();
        let proj = |d: f64| {
            let x = rel.apply(k.ray(Pixel::center(10, 40)) * d);
            (k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy)
        };
        let (du, dv) = coordinate_depth_derivative(&k, &k, &rel, 10, 40, 2.0);
        let h = 1e-6;
        let (a1, b1) = proj(2.0 + h);
        let (a0, b0) = proj(2.0 - h);
        assert!((du - (a1 - a0) / (2.0 * h)).abs() < 1e-6);
        assert!((dv - (b1 - b0) / (2.0 * h)).abs() < 1e-6);
    }
}
