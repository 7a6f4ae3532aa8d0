//! Neighbor selection, multi-view probability merging and pseudo-labels.

use rayon::prelude::*;

use crate::frameio::{argmax, Frame, LabelMap, ProbMap, SceneSequence, IGNORE};
use crate::masks::{boundary_mask, compose, default_boundary_radius, Reason, ValidityMask};
use crate::raster::{check_plane, Field, ShapeError};
use crate::scalar::Real;
use crate::warp::{correspondences, warp_flags_nearest, warp_probmap, Correspondences, WarpConfig, WarpError};

pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_MIN_COVIS: f64 = 0.3;
pub const DEFAULT_MAX_NEIGHBORS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{0}")]
    Config(String),
}

impl From<crate::masks::MaskError> for FusionError {
    fn from(e: crate::masks::MaskError) -> Self {
        match e {
            crate::masks::MaskError::Shape(s) => Self::Shape(s),
            other => Self::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig<T> {
    pub stride: usize,
    pub min_covis: T,
    pub max_neighbors: usize,
    /// Merge the target's own prediction alongside its warped neighbors.
    pub include_self: bool,
    pub warp: WarpConfig<T>,
    /// `None` scales 8 px at 640 columns to the image width.
    pub boundary_radius: Option<usize>,
}

impl<T: Real> Default for FusionConfig<T> {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            min_covis: T::lit(DEFAULT_MIN_COVIS),
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            include_self: true,
            warp: WarpConfig::default(),
            boundary_radius: None,
        }
    }
}

impl<T: Real> FusionConfig<T> {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.stride == 0 {
            return Err(FusionError::Config("stride must be at least 1".into()));
        }
        if !(self.min_covis >= T::zero()) {
            return Err(FusionError::Config(format!("min_covis {} must be non-negative", self.min_covis)));
        }
        if !(self.warp.occl_threshold >= T::zero()) {
            return Err(FusionError::Config("occlusion threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn radius_for(&self, width: usize) -> usize {
        self.boundary_radius.unwrap_or_else(|| default_boundary_radius(width))
    }
}

/// Fraction of target depth-valid pixels with a valid correspondence.
pub fn covisibility_of<T: Real>(corr: &Correspondences<T>, target: &Frame<T>) -> T {
    let with_depth = target.depth.as_slice().iter().filter(|&&d| d > T::zero()).count();
    if with_depth == 0 {
        return T::zero();
    }
    T::from_usize_lossy(corr.mask.count_valid()) / T::from_usize_lossy(with_depth)
}

/// Fraction of `target`'s depth-valid pixels that reproject into `source`
/// in view, in front of the camera and unoccluded.
pub fn covisibility<T: Real>(target: &Frame<T>, source: &Frame<T>, cfg: &WarpConfig<T>) -> Result<T, FusionError> {
    let corr = correspondences(source, target, cfg)?;
    Ok(covisibility_of(&corr, target))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    /// File index of the neighbor frame.
    pub index: usize,
    /// Position in the sequence.
    pub position: usize,
    pub covisibility: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet<T> {
    pub target_index: usize,
    pub neighbors: Vec<Neighbor<T>>,
}

fn candidate_positions(len: usize, target: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 1;
    loop {
        let gap = stride * k;
        let before = target.checked_sub(gap);
        let after = (target + gap < len).then_some(target + gap);
        if before.is_none() && after.is_none() {
            break;
        }
        out.extend(before);
        out.extend(after);
        k += 1;
    }
    out
}

fn neighbor_order<T: Real>(target_pos: usize, a: &Neighbor<T>, b: &Neighbor<T>) -> std::cmp::Ordering {
    b.covisibility
        .partial_cmp(&a.covisibility)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.position.abs_diff(target_pos).cmp(&b.position.abs_diff(target_pos)))
        .then(a.index.cmp(&b.index))
}

#[cfg(test)]
fn rank_neighbors<T: Real>(target_pos: usize, mut cands: Vec<Neighbor<T>>, max: usize) -> Vec<Neighbor<T>> {
    cands.sort_by(|a, b| neighbor_order(target_pos, a, b));
    cands.truncate(max);
    cands
}

fn scan_neighbors<T: Real>(
    seq: &SceneSequence<T>,
    target_pos: usize,
    cfg: &FusionConfig<T>,
) -> Result<Vec<(Neighbor<T>, Correspondences<T>)>, FusionError> {
    cfg.validate()?;
    let target = seq
        .frames
        .get(target_pos)
        .ok_or_else(|| FusionError::Config(format!("target position {target_pos} out of range")))?;
    let mut found = Vec::new();
    for pos in candidate_positions(seq.len(), target_pos, cfg.stride) {
        let source = &seq.frames[pos];
        let corr = correspondences(source, target, &cfg.warp)?;
        let covis = covisibility_of(&corr, target);
        if covis >= cfg.min_covis {
            found.push((
                Neighbor {
                    index: source.index,
                    position: pos,
                    covisibility: covis,
                },
                corr,
            ));
        }
    }
    found.sort_by(|a, b| neighbor_order(target_pos, &a.0, &b.0));
    found.truncate(cfg.max_neighbors);
    Ok(found)
}

/// Frames at `target ± stride·k` whose covisibility reaches `min_covis`,
/// best first (ties: smaller gap, then lower index), at most `max_neighbors`.
pub fn select_neighbors<T: Real>(
    seq: &SceneSequence<T>,
    target_pos: usize,
    cfg: &FusionConfig<T>,
) -> Result<NeighborSet<T>, FusionError> {
    let kept = scan_neighbors(seq, target_pos, cfg)?;
    Ok(NeighborSet {
        target_index: seq.frames[target_pos].index,
        neighbors: kept.into_iter().map(|(n, _)| n).collect(),
    })
}

/// A probability map already in target geometry, with its mask.
#[derive(Debug, Clone, Copy)]
pub struct WarpedView<'a, T> {
    /// Index of the frame the prediction came from; fixes accumulation order.
    pub source_index: usize,
    pub probs: &'a ProbMap<T>,
    pub mask: &'a ValidityMask,
}

/// Merged prediction for one target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused<T> {
    /// Normalized sum of the contributing vectors.
    pub probs: ProbMap<T>,
    /// Argmax of the sum; IGNORE where nothing contributed.
    pub labels: LabelMap,
    /// Valid where at least one view contributed.
    pub mask: ValidityMask,
    /// Number of contributing views per pixel.
    pub support: Vec<u16>,
}

/// Sums probabilities over the views valid at each pixel, then takes the
/// argmax (ties to the lowest class). Views are accumulated in ascending
/// `source_index` order regardless of input order.
pub fn merge<T: Real>(
    plane: (usize, usize),
    channels: usize,
    views: &[WarpedView<'_, T>],
) -> Result<Fused<T>, FusionError> {
    let (h, w) = plane;
    let mut order: Vec<&WarpedView<'_, T>> = views.iter().collect();
    order.sort_by_key(|v| v.source_index);
    for v in &order {
        check_plane(plane, v.probs.plane())?;
        check_plane(plane, v.mask.plane())?;
        if v.probs.channels() != channels {
            return Err(ShapeError {
                expected: (h, w, channels),
                found: v.probs.values().shape(),
            }
            .into());
        }
    }
    let mut sums = Field::zeros(h, w, channels);
    let mut support = vec![0u16; h * w];
    let mut closest = vec![Reason::OutOfView; h * w];
    for v in &order {
        for i in 0..h * w {
            let r = v.mask.reason(i);
            if r == Reason::Valid && v.probs.is_valid(i) {
                for (acc, &p) in sums.at_mut(i).iter_mut().zip(v.probs.at(i)) {
                    *acc += p;
                }
                support[i] = support[i].saturating_add(1);
            } else if r != Reason::Valid && r.precedence() < closest[i].precedence() {
                closest[i] = r;
            }
        }
    }
    let mut labels = vec![IGNORE; h * w];
    let mut valid = vec![false; h * w];
    let mut reasons = closest;
    for i in 0..h * w {
        if support[i] == 0 {
            sums.at_mut(i).iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let s = sums.at(i);
        labels[i] = argmax(s) as u8;
        let total: T = s.iter().copied().sum();
        if total > T::zero() {
            sums.at_mut(i).iter_mut().for_each(|x| *x /= total);
            valid[i] = true;
            reasons[i] = Reason::Valid;
        } else {
            labels[i] = IGNORE;
            sums.at_mut(i).iter_mut().for_each(|x| *x = T::zero());
        }
    }
    Ok(Fused {
        probs: ProbMap::from_parts(sums, valid).expect("sized by construction"),
        labels: LabelMap::new(h, w, labels).expect("sized by construction"),
        mask: ValidityMask::from_reasons(h, w, reasons).expect("sized by construction"),
        support,
    })
}

/// Neighbor sets and correspondences for every frame of a sequence. Depends
/// only on geometry, so it can be reused across any number of predictions.
#[derive(Debug, Clone)]
pub struct FusionPlan<T> {
    pub config: FusionConfig<T>,
    pub targets: Vec<TargetPlan<T>>,
}

#[derive(Debug, Clone)]
pub struct TargetPlan<T> {
    pub position: usize,
    pub neighbors: NeighborSet<T>,
    correspondences: Vec<Correspondences<T>>,
}

impl<T: Real> FusionPlan<T> {
    pub fn build(seq: &SceneSequence<T>, cfg: &FusionConfig<T>) -> Result<Self, FusionError> {
        cfg.validate()?;
        let targets = (0..seq.len())
            .into_par_iter()
            .map(|pos| {
                let kept = scan_neighbors(seq, pos, cfg)?;
                let (neighbors, correspondences): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
                Ok(TargetPlan {
                    position: pos,
                    neighbors: NeighborSet {
                        target_index: seq.frames[pos].index,
                        neighbors,
                    },
                    correspondences,
                })
            })
            .collect::<Result<Vec<_>, FusionError>>()?;
        Ok(Self { config: *cfg, targets })
    }

    /// Fuses the prediction of one target position.
    pub fn fuse_target(
        &self,
        seq: &SceneSequence<T>,
        probs: &[ProbMap<T>],
        target_pos: usize,
    ) -> Result<Fused<T>, FusionError> {
        if probs.len() != seq.len() {
            return Err(FusionError::Config(format!(
                "{} probability maps for {} frames",
                probs.len(),
                seq.len()
            )));
        }
        let plan = &self.targets[target_pos];
        let target = &seq.frames[target_pos];
        let own = &probs[target_pos];
        check_plane(target.plane(), own.plane())?;
        let channels = own.channels();
        let mut warped = Vec::with_capacity(plan.correspondences.len());
        for (n, corr) in plan.neighbors.neighbors.iter().zip(&plan.correspondences) {
            let src_probs = &probs[n.position];
            let (p, warp_mask) = warp_probmap(corr, src_probs)?;
            let radius = self.config.radius_for(src_probs.width());
            let edges = boundary_mask(&src_probs.argmax_labels(), radius);
            let edges = warp_flags_nearest(corr, &edges)?;
            let edge_mask = ValidityMask::from_flags(target.height(), target.width(), &edges, Reason::Boundary)?;
            let mask = compose(&[&warp_mask, &edge_mask])?;
            warped.push((n.index, p, mask));
        }
        let own_mask = ValidityMask::from_valid(target.height(), target.width(), own.valid(), Reason::NoDepth)?;
        let mut views: Vec<WarpedView<'_, T>> = warped
            .iter()
            .map(|(idx, p, m)| WarpedView {
                source_index: *idx,
                probs: p,
                mask: m,
            })
            .collect();
        if self.config.include_self {
            views.push(WarpedView {
                source_index: target.index,
                probs: own,
                mask: &own_mask,
            });
        }
        merge(target.plane(), channels, &views)
    }

    /// Fuses every frame; frames are independent and run in parallel.
    pub fn fuse(&self, seq: &SceneSequence<T>, probs: &[ProbMap<T>]) -> Result<Vec<Fused<T>>, FusionError> {
        (0..seq.len())
            .into_par_iter()
            .map(|pos| self.fuse_target(seq, probs, pos))
            .collect()
    }
}

/// Pseudo-labels for every frame: select neighbors, warp their predictions
/// in, mask boundaries and occlusions, and merge.
pub fn pseudo_label_sequence<T: Real>(
    seq: &SceneSequence<T>,
    probs: &[ProbMap<T>],
    cfg: &FusionConfig<T>,
) -> Result<Vec<Fused<T>>, FusionError> {
    FusionPlan::build(seq, cfg)?.fuse(seq, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(values: Vec<f64>, h: usize, w: usize, c: usize) -> ProbMap<f64> {
        let valid = (0..h * w).map(|i| values[i * c..(i + 1) * c].iter().any(|&v| v != 0.0)).collect();
        ProbMap::from_parts(Field::from_vec(h, w, c, values).unwrap(), valid).unwrap()
    }

    #[test]
    fn merge_sums_then_argmaxes() {
        let a = pm(vec![0.6, 0.4], 1, 1, 2);
        let b = pm(vec![0.2, 0.8], 1, 1, 2);
        let m = ValidityMask::all_valid(1, 1);
        let views = [
            WarpedView { source_index: 0, probs: &a, mask: &m },
            WarpedView { source_index: 1, probs: &b, mask: &m },
        ];
        let f = merge((1, 1), 2, &views).unwrap();
        assert_eq!(f.labels.as_slice(), &[1]);
        assert!((f.probs.at(0)[0] - 0.4).abs() < 1e-12);
        assert!((f.probs.at(0)[1] - 0.6).abs() < 1e-12);
        let single = merge((1, 1), 2, &views[..1]).unwrap();
        assert_eq!(single.labels.as_slice(), &[0]);
    }

    #[test]
    fn merge_tie_goes_to_lowest_class() {
        let a = pm(vec![0.3, 0.7], 1, 1, 2);
        let b = pm(vec![0.7, 0.3], 1, 1, 2);
        let m = ValidityMask::all_valid(1, 1);
        let f = merge((1, 1), 2, &[
            WarpedView { source_index: 0, probs: &a, mask: &m },
            WarpedView { source_index: 1, probs: &b, mask: &m },
        ])
        .unwrap();
        assert_eq!(f.labels.as_slice(), &[0]);
    }

    #[test]
    fn merge_empty_and_masked() {
        let f = merge::<f64>((2, 2), 3, &[]).unwrap();
        assert!(f.labels.as_slice().iter().all(|&l| l == IGNORE));
        assert_eq!(f.mask.count_valid(), 0);
        let a = pm(vec![0.6, 0.4, 0.1, 0.9], 1, 2, 2);
        let m = ValidityMask::from_reasons(1, 2, vec![Reason::Valid, Reason::Occluded]).unwrap();
        let f = merge((1, 2), 2, &[WarpedView { source_index: 3, probs: &a, mask: &m }]).unwrap();
        assert_eq!(f.labels.as_slice(), &[0, IGNORE]);
        assert_eq!(f.mask.reason(1), Reason::Occluded);
    }

    #[test]
    fn candidate_scan_alternates_sides() {
        assert_eq!(candidate_positions(30, 12, 5), vec![7, 17, 2, 22, 27]);
        assert_eq!(candidate_positions(1, 0, 1), Vec::<usize>::new());
    }

    #[test]
    fn ranking_prefers_covisibility_then_gap_then_index() {
        let n = |position, covisibility| Neighbor { index: position, position, covisibility };
        let ranked = rank_neighbors(10, vec![n(0, 0.5), n(20, 0.5), n(5, 0.5), n(15, 0.9)], 3);
        let order: Vec<_> = ranked.iter().map(|n| n.position).collect();
        assert_eq!(order, vec![15, 5, 0]);
    }

    fn views_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4 * 3), 1..5)
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant(raw in views_strategy(), rot in 0usize..5) {
            let maps: Vec<_> = raw.iter().map(|v| pm(v.clone(), 2, 2, 3)).collect();
            let m = ValidityMask::all_valid(2, 2);
            let views: Vec<_> = maps.iter().enumerate()
                .map(|(i, p)| WarpedView { source_index: i, probs: p, mask: &m })
                .collect();
            let mut rotated = views.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            prop_assert_eq!(merge((2, 2), 3, &views).unwrap(), merge((2, 2), 3, &rotated).unwrap());
        }

        #[test]
        fn merge_argmax_scale_invariant(raw in views_strategy(), scale in 0.1f64..10.0) {
            let maps: Vec<_> = raw.iter().map(|v| pm(v.clone(), 2, 2, 3)).collect();
            let scaled: Vec<_> = raw.iter().map(|v| pm(v.iter().map(|x| x * scale).collect(), 2, 2, 3)).collect();
            let m = ValidityMask::all_valid(2, 2);
            fn mk<'a>(ps: &'a [ProbMap<f64>], m: &'a ValidityMask) -> Vec<WarpedView<'a, f64>> {
                ps.iter().enumerate().map(|(i, p)| WarpedView { source_index: i, probs: p, mask: m }).collect()
            }
            let a = merge((2, 2), 3, &mk(&maps, &m)).unwrap();
            let b = merge((2, 2), 3, &mk(&scaled, &m)).unwrap();
            prop_assert_eq!(a.labels, b.labels);
            for i in 0..4 {
                let s: f64 = a.probs.at(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
            }
        }

        #[test]
        fn unanimous_argmax_preserved(raw in views_strategy()) {
            let maps: Vec<_> = raw.iter().map(|v| pm(v.clone(), 2, 2, 3)).collect();
            let m = ValidityMask::all_valid(2, 2);
            let views: Vec<_> = maps.iter().enumerate()
                .map(|(i, p)| WarpedView { source_index: i, probs: p, mask: &m })
                .collect();
            let fused = merge((2, 2), 3, &views).unwrap();
            for i in 0..4 {
                let first = argmax(maps[0].at(i));
                if maps.iter().all(|p| argmax(p.at(i)) == first) {
                    prop_assert_eq!(usize::from(fused.labels.as_slice()[i]), first);
                }
            }
        }
    }
}
