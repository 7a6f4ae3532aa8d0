//! Per-pixel validity masks gating every consistency term.

use crate::frameio::{LabelMap, ProbMap};
use crate::raster::{check_plane, ShapeError};
use crate::scalar::Real;

/// Boundary radius at the reference width of 640 pixels.
pub const REFERENCE_BOUNDARY_RADIUS: usize = 8;
pub const REFERENCE_WIDTH: usize = 640;

/// Why a pixel is excluded. Discriminants are the PNG export codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reason {
    Valid = 0,
    NoDepth = 1,
    OutOfView = 2,
    Occluded = 3,
    Boundary = 4,
    Inconsistent = 5,
}

impl Reason {
    pub const ALL: [Reason; 6] = [
        Reason::Valid,
        Reason::NoDepth,
        Reason::OutOfView,
        Reason::Occluded,
        Reason::Boundary,
        Reason::Inconsistent,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    /// Higher wins when masks are combined: NO_DEPTH > OUT_OF_VIEW >
    /// OCCLUDED > BOUNDARY > INCONSISTENT > VALID.
    #[inline]
    pub fn precedence(self) -> u8 {
        match self {
            Reason::Valid => 0,
            Reason::Inconsistent => 1,
            Reason::Boundary => 2,
            Reason::Occluded => 3,
            Reason::OutOfView => 4,
            Reason::NoDepth => 5,
        }
    }

    #[inline]
    pub fn max(self, other: Self) -> Self {
        if other.precedence() > self.precedence() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("compose needs at least one mask")]
    Empty,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Per-pixel reason codes; a pixel is valid iff its reason is [`Reason::Valid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    reasons: Vec<Reason>,
}

impl ValidityMask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            reasons: vec![Reason::Valid; height * width],
        }
    }

    pub fn from_reasons(height: usize, width: usize, reasons: Vec<Reason>) -> Result<Self, ShapeError> {
        if reasons.len() != height * width {
            return Err(ShapeError {
                expected: (height, width, 1),
                found: (reasons.len(), 1, 1),
            });
        }
        Ok(Self {
            height,
            width,
            reasons,
        })
    }

    /// Marks `reason` wherever `excluded` is true.
    pub fn from_flags(
        height: usize,
        width: usize,
        excluded: &[bool],
        reason: Reason,
    ) -> Result<Self, ShapeError> {
        Self::from_reasons(
            height,
            width,
            excluded
                .iter()
                .map(|&x| if x { reason } else { Reason::Valid })
                .collect(),
        )
    }

    /// Valid exactly where `valid` is true, `reason` elsewhere.
    pub fn from_valid(height: usize, width: usize, valid: &[bool], reason: Reason) -> Result<Self, ShapeError> {
        Self::from_reasons(
            height,
            width,
            valid
                .iter()
                .map(|&v| if v { Reason::Valid } else { reason })
                .collect(),
        )
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn reasons(&self) -> &[Reason] {
        &self.reasons
    }

    #[inline]
    pub fn reason(&self, i: usize) -> Reason {
        self.reasons[i]
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.reasons[i] == Reason::Valid
    }

    pub fn valid(&self) -> Vec<bool> {
        self.reasons.iter().map(|&r| r == Reason::Valid).collect()
    }

    pub fn count_valid(&self) -> usize {
        self.reasons.iter().filter(|&&r| r == Reason::Valid).count()
    }

    pub fn count(&self, reason: Reason) -> usize {
        self.reasons.iter().filter(|&&r| r == reason).count()
    }

    /// Records `reason` at pixel `i` unless a higher-precedence reason is set.
    #[inline]
    pub fn mark(&mut self, i: usize, reason: Reason) {
        self.reasons[i] = self.reasons[i].max(reason);
    }

    pub fn combine(&self, other: &Self) -> Result<Self, ShapeError> {
        check_plane(self.plane(), other.plane())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            reasons: self
                .reasons
                .iter()
                .zip(&other.reasons)
                .map(|(&a, &b)| a.max(b))
                .collect(),
        })
    }
}

/// Logical AND of validity; each invalid pixel keeps its highest-precedence reason.
pub fn compose(masks: &[&ValidityMask]) -> Result<ValidityMask, MaskError> {
    let (first, rest) = masks.split_first().ok_or(MaskError::Empty)?;
    let mut out = (*first).clone();
    for m in rest {
        out = out.combine(m)?;
    }
    Ok(out)
}

/// Boundary radius for an image of the given width, scaled from 8 px at 640.
pub fn default_boundary_radius(width: usize) -> usize {
    (REFERENCE_BOUNDARY_RADIUS * width + REFERENCE_WIDTH / 2) / REFERENCE_WIDTH
}

/// Flags every pixel whose Chebyshev neighborhood of `radius` contains a
/// different label. [`IGNORE`](crate::frameio::IGNORE) counts as a label.
///
/// A window holds a single label iff its minimum equals its maximum, so the
/// test reduces to separable running min/max filters.
pub fn boundary_mask(labels: &LabelMap, radius: usize) -> Vec<bool> {
    let (h, w) = labels.plane();
    if radius == 0 || h * w == 0 {
        return vec![false; h * w];
    }
    let src = labels.as_slice();
    let mut row_min = vec![0u8; h * w];
    let mut row_max = vec![0u8; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            let win = &row[lo..=hi];
            row_min[r * w + c] = *win.iter().min().unwrap();
            row_max[r * w + c] = *win.iter().max().unwrap();
        }
    }
    let mut out = vec![false; h * w];
    for c in 0..w {
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius).min(h - 1);
            let mut mn = u8::MAX;
            let mut mx = u8::MIN;
            for rr in lo..=hi {
                mn = mn.min(row_min[rr * w + c]);
                mx = mx.max(row_max[rr * w + c]);
            }
            out[r * w + c] = mn != mx;
        }
    }
    out
}

/// True where both maps are valid, agree on the argmax label, and the pixel is
/// not flagged as boundary.
pub fn depth_consistency_mask<T: Real>(
    student: &ProbMap<T>,
    teacher_warped: &ProbMap<T>,
    boundary: &[bool],
) -> Result<Vec<bool>, ShapeError> {
    check_plane(student.plane(), teacher_warped.plane())?;
    if boundary.len() != student.height() * student.width() {
        return Err(ShapeError {
            expected: (student.height(), student.width(), 1),
            found: (boundary.len(), 1, 1),
        });
    }
    let a = student.argmax_labels();
    let b = teacher_warped.argmax_labels();
    Ok((0..boundary.len())
        .map(|i| {
            student.is_valid(i)
                && teacher_warped.is_valid(i)
                && a.as_slice()[i] == b.as_slice()[i]
                && !boundary[i]
        })
        .collect())
}

/// [`depth_consistency_mask`] with reason codes: BOUNDARY where flagged,
/// INCONSISTENT where the labels disagree or either map is invalid.
pub fn depth_consistency_validity<T: Real>(
    student: &ProbMap<T>,
    teacher_warped: &ProbMap<T>,
    boundary: &[bool],
) -> Result<ValidityMask, ShapeError> {
    let ok = depth_consistency_mask(student, teacher_warped, boundary)?;
    let reasons = ok
        .iter()
        .zip(boundary)
        .map(|(&ok, &b)| match (ok, b) {
            (true, _) => Reason::Valid,
            (false, true) => Reason::Boundary,
            (false, false) => Reason::Inconsistent,
        })
        .collect();
    ValidityMask::from_reasons(student.height(), student.width(), reasons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frameio::IGNORE;
    use crate::raster::Field;
    use proptest::prelude::*;

    fn brute_boundary(labels: &LabelMap, radius: usize) -> Vec<bool> {
        let (h, w) = labels.plane();
        let r = radius as isize;
        let mut out = vec![false; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let me = labels.get(y as usize, x as usize);
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize
                            && labels.get(yy as usize, xx as usize) != me
                        {
                            out[y as usize * w + x as usize] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn uniform_labels_have_no_boundary() {
        let l = LabelMap::filled(5, 7, 3);
        for r in 0..4 {
            assert!(boundary_mask(&l, r).iter().all(|&b| !b));
        }
    }

    #[test]
    fn radius_zero_flags_nothing() {
        let l = LabelMap::from_fn(4, 4, |r, c| ((r + c) % 2) as u8);
        assert!(boundary_mask(&l, 0).iter().all(|&b| !b));
    }

    #[test]
    fn split_halves_flag_four_columns() {
        let l = LabelMap::from_fn(8, 8, |_, c| u8::from(c >= 4));
        let m = boundary_mask(&l, 2);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m[r * 8 + c], (2..=5).contains(&c), "({r},{c})");
            }
        }
    }

    #[test]
    fn default_radius_scales_with_width() {
        assert_eq!(default_boundary_radius(640), 8);
        assert_eq!(default_boundary_radius(320), 4);
        assert_eq!(default_boundary_radius(160), 2);
        assert_eq!(default_boundary_radius(80), 1);
    }

    #[test]
    fn compose_precedence_and_locality() {
        let a = ValidityMask::from_reasons(1, 3, vec![Reason::NoDepth, Reason::Valid, Reason::Valid]).unwrap();
        let b = ValidityMask::from_reasons(1, 3, vec![Reason::Occluded, Reason::Valid, Reason::Boundary]).unwrap();
        let c = compose(&[&a, &b]).unwrap();
        assert_eq!(c.reasons(), &[Reason::NoDepth, Reason::Valid, Reason::Boundary]);
        let all = ValidityMask::all_valid(1, 3);
        assert_eq!(compose(&[&all, &all]).unwrap(), all);
        assert!(compose(&[]).is_err());
        assert!(compose(&[&all, &ValidityMask::all_valid(2, 3)]).is_err());
    }

    #[test]
    fn consistency_mask_cases() {
        let p = ProbMap::new(
            Field::from_vec(1, 3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3]).unwrap(),
            vec![true; 3],
        )
        .unwrap();
        assert_eq!(depth_consistency_mask(&p, &p, &[false; 3]).unwrap(), vec![true; 3]);
        let q = ProbMap::new(
            Field::from_vec(1, 3, 2, vec![0.9, 0.1, 0.6, 0.4, 0.7, 0.3]).unwrap(),
            vec![true; 3],
        )
        .unwrap();
        assert_eq!(
            depth_consistency_mask(&p, &q, &[false, false, true]).unwrap(),
            vec![true, false, false]
        );
        let v = depth_consistency_validity(&p, &q, &[false, false, true]).unwrap();
        assert_eq!(v.reasons(), &[Reason::Valid, Reason::Inconsistent, Reason::Boundary]);
    }

    fn label_map() -> impl Strategy<Value = LabelMap> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            prop::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], h * w)
                .prop_map(move |v| LabelMap::new(h, w, v).unwrap())
        })
    }

    fn mask(h: usize, w: usize) -> impl Strategy<Value = ValidityMask> {
        prop::collection::vec(0u8..6, h * w).prop_map(move |codes| {
            ValidityMask::from_reasons(h, w, codes.into_iter().map(|c| Reason::from_code(c).unwrap()).collect())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn boundary_matches_brute_force(l in label_map(), r in 0usize..4) {
            prop_assert_eq!(boundary_mask(&l, r), brute_boundary(&l, r));
        }

        #[test]
        fn boundary_monotone_in_radius(l in label_map(), r1 in 0usize..4, dr in 0usize..3) {
            let small = boundary_mask(&l, r1);
            let large = boundary_mask(&l, r1 + dr);
            prop_assert!(small.iter().zip(&large).all(|(&s, &b)| !s || b));
        }

        #[test]
        fn boundary_permutation_invariant(l in label_map(), r in 0usize..4, shift in 1u8..4) {
            let permuted = LabelMap::new(
                l.height(),
                l.width(),
                l.as_slice().iter().map(|&x| if x == IGNORE { IGNORE } else { (x + shift) % 4 }).collect(),
            ).unwrap();
            prop_assert_eq!(boundary_mask(&l, r), boundary_mask(&permuted, r));
        }

        #[test]
        fn compose_commutes_and_associates((a, b, c) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| (mask(h, w), mask(h, w), mask(h, w)))) {
            prop_assert_eq!(compose(&[&a, &b]).unwrap(), compose(&[&b, &a]).unwrap());
            let left = compose(&[&compose(&[&a, &b]).unwrap(), &c]).unwrap();
            let right = compose(&[&a, &compose(&[&b, &c]).unwrap()]).unwrap();
            prop_assert_eq!(&left, &right);
            for i in 0..a.reasons().len() {
                prop_assert_eq!(left.is_valid(i), a.is_valid(i) && b.is_valid(i) && c.is_valid(i));
            }
        }
    }
}
