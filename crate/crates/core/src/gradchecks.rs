//! Seeded gradient-check problems for every loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frameio::{LabelMap, IGNORE};
use crate::losses::{
    consistency_loss, depth_l1, gradcheck, photometric_depth_loss, photometric_ssim_loss, weighted_cross_entropy,
    ClassWeights, GradcheckReport,
};
use crate::masks::{Reason, ValidityMask};
use crate::raster::Field;
use crate::synth::{random_pair_spec, render};
use crate::warp::WarpConfig;

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_PROBES: usize = 1000;
pub const TOL_CROSS_ENTROPY: f64 = 1e-4;
pub const TOL_DEPTH_L1: f64 = 1e-4;
pub const TOL_PHOTOMETRIC: f64 = 1e-3;
/// Chained through bilinear sampling, whose derivative jumps at pixel edges.
pub const TOL_PHOTOMETRIC_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    WeightedCrossEntropy,
    Consistency,
    DepthL1,
    Photometric,
    PhotometricDepth,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::WeightedCrossEntropy,
        Term::Consistency,
        Term::DepthL1,
        Term::Photometric,
        Term::PhotometricDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::WeightedCrossEntropy => "wce",
            Term::Consistency => "cons",
            Term::DepthL1 => "depth",
            Term::Photometric => "photo",
            Term::PhotometricDepth => "photo-depth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Term::WeightedCrossEntropy | Term::Consistency => TOL_CROSS_ENTROPY,
            Term::DepthL1 => TOL_DEPTH_L1,
            Term::Photometric => TOL_PHOTOMETRIC,
            Term::PhotometricDepth => TOL_PHOTOMETRIC_DEPTH,
        }
    }
}

fn probes(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

fn field(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field<f64> {
    Field::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Runs the check for `term` on a problem drawn from `seed`, with `count`
/// random probe components.
pub fn check_term(term: Term, seed: u64, count: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(term as u64);
    let step = GRADCHECK_STEP;
    let tol = term.tolerance();
    match term {
        Term::WeightedCrossEntropy | Term::Consistency => {
            let (h, w, c) = (12, 10, 5);
            let logits = field(h, w, c, &mut rng, -3.0, 3.0);
            let labels = LabelMap::new(
                h,
                w,
                (0..h * w)
                    .map(|_| if rng.random::<f64>() < 0.1 { IGNORE } else { rng.random_range(0..c as u8) })
                    .collect(),
            )
            .expect("sized");
            let weights = ClassWeights {
                weights: (0..c).map(|_| rng.random_range(0.2..3.0)).collect(),
            };
            let valid: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < 0.8).collect();
            let mask = ValidityMask::from_valid(h, w, &valid, Reason::Occluded).expect("sized");
            let idx = probes(&mut rng, logits.as_slice().len(), count);
            let f = |x: &[f64]| {
                let z = Field::from_vec(h, w, c, x.to_vec()).expect("sized");
                let r = if term == Term::Consistency {
                    consistency_loss(&z, &labels, &mask)
                } else {
                    weighted_cross_entropy(&z, &labels, &weights)
                }
                .expect("valid problem");
                (r.loss, r.grad.into_vec())
            };
            gradcheck(f, logits.as_slice(), Some(&idx), step, tol)
        }
        Term::DepthL1 => {
            let (h, w) = (16, 12);
            let gt = Field::from_vec(
                h,
                w,
                1,
                (0..h * w)
                    .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.5..5.0) })
                    .collect(),
            )
            .expect("sized");
            // Offsets of at least 0.01 keep every component far from the kink.
            let pred: Vec<f64> = gt
                .as_slice()
                .iter()
                .map(|g| {
                    let off = rng.random_range(0.01..0.5);
                    g + if rng.random::<bool>() { off } else { -off }
                })
                .collect();
            let idx = probes(&mut rng, pred.len(), count);
            let f = |x: &[f64]| {
                let r = depth_l1(&Field::from_vec(h, w, 1, x.to_vec()).expect("sized"), &gt).expect("shapes");
                (r.loss, r.grad.into_vec())
            };
            gradcheck(f, &pred, Some(&idx), step, tol)
        }
        Term::Photometric => {
            let (h, w) = (10, 12);
            let target = field(h, w, 3, &mut rng, 0.05, 0.95);
            let warped: Vec<f64> = target
                .as_slice()
                .iter()
                .map(|t| {
                    let off = rng.random_range(0.01..0.2);
                    (t + if rng.random::<bool>() { off } else { -off }).clamp(0.0, 1.0)
                })
                .collect();
            let mask: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < 0.8).collect();
            let idx = probes(&mut rng, warped.len(), count);
            let f = |x: &[f64]| {
                let y = Field::from_vec(h, w, 3, x.to_vec()).expect("sized");
                let r = photometric_ssim_loss(&target, &y, &mask).expect("shapes");
                (r.loss, r.grad.into_vec())
            };
            gradcheck(f, &warped, Some(&idx), step, tol)
        }
        Term::PhotometricDepth => photometric_depth_check(seed, &mut rng, count),
    }
}

/// Depth chain through bilinear sampling. Probes skip pixels whose source
/// coordinate sits within a step of a pixel edge (the sampled value has a
/// kink there) or whose photometric residual is near zero on some channel.
fn photometric_depth_check(seed: u64, rng: &mut ChaCha8Rng, count: usize) -> GradcheckReport {
    let mut spec = random_pair_spec(seed, 40, 30, 2);
    spec.texture = crate::synth::Texture::Flat;
    let seq = render::<f64>(&spec).expect("valid spec");
    let (source, target) = (&seq.frames[0], &seq.frames[1]);
    // Smooth color so the sampled field has gradient inside pixels.
    let mut smooth = source.clone();
    let (h, w) = smooth.plane();
    for r in 0..h {
        for c in 0..w {
            let base = smooth.color.pixel(r, c).to_vec();
            for (ch, b) in base.iter().enumerate() {
                let v = 0.5 * b + 0.25 * (1.0 + ((r as f64) * 0.7 + (c as f64) * 0.45 + ch as f64).sin());
                smooth.color.set(r, c, ch, v);
            }
        }
    }
    let depth: Vec<f64> = target.depth.as_slice().iter().map(|d| d * rng.random_range(0.97..1.03)).collect();
    let warp = WarpConfig { occl_threshold: 1e9 };
    let depth_field = |x: &[f64]| Field::from_vec(h, w, 1, x.to_vec()).expect("sized");
    let corr = crate::warp::correspondences_with_depth(&smooth, target, &depth_field(&depth), &warp).expect("frames match");
    let sampled = crate::warp::sample_field(&corr, &smooth.color).expect("shapes");
    let mask: Vec<bool> = corr.coords.iter().map(|c| c.is_some()).collect();
    let margin = 0.02;
    let off_edge = |v: f64| {
        let f = v - v.floor();
        f > margin && f < 1.0 - margin
    };
    let eligible: Vec<usize> = (0..h * w)
        .filter(|&i| {
            let Some(p) = corr.coords[i] else { return false };
            let (r, c) = (i / w, i % w);
            let interior = p.x > 1.0 && p.y > 1.0 && p.x < (w - 2) as f64 && p.y < (h - 2) as f64;
            let residual = (0..3).all(|ch| (sampled.values.get(r, c, ch) - target.color.get(r, c, ch)).abs() > 1e-3);
            interior && off_edge(p.x) && off_edge(p.y) && residual
        })
        .collect();
    let idx: Vec<usize> = (0..count).map(|_| eligible[rng.random_range(0..eligible.len())]).collect();
    let f = |x: &[f64]| {
        let r = photometric_depth_loss(target, &smooth, &depth_field(x), &mask, &warp).expect("frames match");
        (r.loss, r.grad.into_vec())
    };
    // Depth values are meters; a smaller step keeps probes inside one cell.
    gradcheck(f, &depth, Some(&idx), 1e-6, TOL_PHOTOMETRIC_DEPTH)
}
