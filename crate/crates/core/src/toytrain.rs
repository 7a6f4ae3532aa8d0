//! Per-pixel linear softmax segmenter trained with a supervised term on a
//! labeled set and a multi-view consistency term on an unlabeled sequence.
//!
//! The teacher is a snapshot of the student weights. Its predictions on the
//! target sequence are fused across views into pseudo-labels, which stay
//! fixed until the next snapshot and never receive gradient.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frameio::{Frame, FrameIoError, LabelMap, ProbMap, SceneSequence};
use crate::fusion::{FusionConfig, FusionError, FusionPlan, Fused};
use crate::losses::{
    consistency_loss, median_freq_weights, softmax_into, total_loss, weighted_cross_entropy, ClassWeights,
    LossError, LossParts, LossReport,
};
use crate::raster::{Field, ShapeError};
use crate::scalar::Real;

/// Feature vector `(r, g, b, x/W, y/H, 1)`.
pub const NUM_FEATURES: usize = 6;
pub const DEFAULT_SNAPSHOT_PERIOD: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_ITERATIONS: usize = 1500;
/// Supervised-only iterations before the consistency term switches on.
pub const DEFAULT_WARMUP: usize = 300;
/// Standard deviation of the seeded weight initialization.
pub const INIT_SIGMA: f64 = 0.01;

pub const MODEL_MAGIC: &[u8; 4] = b"TOYM";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no labeled frames")]
    NoLabeledFrames,
    #[error(transparent)]
    Io(#[from] FrameIoError),
}

pub fn featurize<T: Real>(frame: &Frame<T>) -> Field<T> {
    let (h, w) = frame.plane();
    let (wf, hf) = (T::from_usize_lossy(w), T::from_usize_lossy(h));
    let mut out = Field::zeros(h, w, NUM_FEATURES);
    for r in 0..h {
        for c in 0..w {
            let rgb = frame.color.pixel(r, c);
            let f = out.pixel_mut(r, c);
            f[..3].copy_from_slice(rgb);
            f[3] = T::from_usize_lossy(c) / wf;
            f[4] = T::from_usize_lossy(r) / hf;
            f[5] = T::one();
        }
    }
    out
}

/// Student weights Θ (C×F, row-major), teacher snapshot Θ', and the number of
/// completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub num_classes: usize,
    pub num_features: usize,
    pub weights: Vec<T>,
    pub snapshot_weights: Vec<T>,
    pub iteration: usize,
}

impl<T: Real> ToyModel<T> {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self::from_weights(num_classes, num_features, vec![T::zero(); num_classes * num_features])
            .expect("sized by construction")
    }

    pub fn from_weights(num_classes: usize, num_features: usize, weights: Vec<T>) -> Result<Self, ShapeError> {
        if weights.len() != num_classes * num_features {
            return Err(ShapeError {
                expected: (num_classes, num_features, 1),
                found: (weights.len(), 1, 1),
            });
        }
        Ok(Self {
            num_classes,
            num_features,
            snapshot_weights: weights.clone(),
            weights,
            iteration: 0,
        })
    }

    /// Gaussian initialization with standard deviation [`INIT_SIGMA`].
    pub fn seeded(num_classes: usize, num_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, INIT_SIGMA).expect("positive sigma");
        let w = (0..num_classes * num_features).map(|_| T::lit(n.sample(&mut rng))).collect();
        Self::from_weights(num_classes, num_features, w).expect("sized by construction")
    }

    pub fn logits(&self, features: &Field<T>) -> Result<Field<T>, ShapeError> {
        logits_with(&self.weights, self.num_classes, features)
    }

    /// Logits and softmax probabilities of the student.
    pub fn forward(&self, features: &Field<T>) -> Result<(Field<T>, ProbMap<T>), ShapeError> {
        let z = self.logits(features)?;
        let p = softmax_map(&z);
        Ok((z, p))
    }

    /// Teacher probabilities, computed with the snapshot weights.
    pub fn teacher_forward(&self, features: &Field<T>) -> Result<ProbMap<T>, ShapeError> {
        Ok(softmax_map(&logits_with(&self.snapshot_weights, self.num_classes, features)?))
    }

    pub fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>, ShapeError> {
        Ok(self.forward(&featurize(frame))?.1)
    }

    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        ToyModel {
            num_classes: self.num_classes,
            num_features: self.num_features,
            weights: c(&self.weights),
            snapshot_weights: c(&self.snapshot_weights),
            iteration: self.iteration,
        }
    }
}

fn logits_with<T: Real>(weights: &[T], num_classes: usize, features: &Field<T>) -> Result<Field<T>, ShapeError> {
    let f = features.channels();
    if weights.len() != num_classes * f {
        return Err(ShapeError {
            expected: (num_classes, f, 1),
            found: (weights.len() / f.max(1), f, 1),
        });
    }
    let (h, w) = (features.height(), features.width());
    let mut out = Field::zeros(h, w, num_classes);
    for i in 0..h * w {
        let x = features.at(i);
        let z = out.at_mut(i);
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = weights[c * f..(c + 1) * f].iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }
    Ok(out)
}

fn softmax_map<T: Real>(logits: &Field<T>) -> ProbMap<T> {
    let (h, w, c) = logits.shape();
    let mut p = Field::zeros(h, w, c);
    for i in 0..h * w {
        softmax_into(logits.at(i), p.at_mut(i));
    }
    ProbMap::from_parts(p, vec![true; h * w]).expect("sized by construction")
}

/// `dL/dW[c][f] = Σ_p dL/dz[p][c] · x[p][f]`, reduced in pixel order.
fn weight_gradient<T: Real>(features: &Field<T>, dlogits: &Field<T>, out: &mut [T], scale: T) {
    let f = features.channels();
    let c = dlogits.channels();
    let mut acc = vec![T::zero(); c * f];
    for i in 0..features.pixel_count() {
        let x = features.at(i);
        for (k, &g) in dlogits.at(i).iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (a, &xf) in acc[k * f..(k + 1) * f].iter_mut().zip(x) {
                *a += g * xf;
            }
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o += scale * a;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub lambda: T,
    pub snapshot_period: usize,
    pub learning_rate: T,
    pub iterations: usize,
    pub seed: u64,
    /// Iterations with the consistency term off; the teacher snapshot is
    /// refreshed when it switches on.
    pub warmup: usize,
    /// Alternate labeled frames with their horizontal mirror images.
    pub mirror: bool,
    pub fusion: FusionConfig<T>,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(crate::losses::DEFAULT_LAMBDA),
            snapshot_period: DEFAULT_SNAPSHOT_PERIOD,
            learning_rate: T::lit(DEFAULT_LEARNING_RATE),
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            warmup: DEFAULT_WARMUP,
            mirror: true,
            fusion: FusionConfig::default(),
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.snapshot_period == 0 {
            return Err(TrainError::Config("snapshot_period must be >= 1".into()));
        }
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.fusion.validate()?;
        Ok(())
    }
}

/// A labeled training image, pre-featurized.
struct Labeled<T> {
    features: Field<T>,
    labels: LabelMap,
}

fn labeled_items<T: Real>(frames: &[Frame<T>], mirror: bool) -> Result<Vec<[Labeled<T>; 2]>, TrainError> {
    let items: Vec<_> = frames
        .iter()
        .filter_map(|f| f.labels.as_ref().map(|l| (f, l)))
        .map(|(f, l)| {
            let plain = Labeled {
                features: featurize(f),
                labels: l.clone(),
            };
            let flipped = if mirror {
                let m = Frame {
                    color: f.color.mirrored(),
                    ..f.clone()
                };
                Labeled {
                    features: featurize(&m),
                    labels: l.mirrored(),
                }
            } else {
                Labeled {
                    features: plain.features.clone(),
                    labels: plain.labels.clone(),
                }
            };
            [plain, flipped]
        })
        .collect();
    if items.is_empty() {
        return Err(TrainError::NoLabeledFrames);
    }
    Ok(items)
}

/// Labeled batch per iteration: a seeded permutation of the labeled frames per
/// epoch, each with a seeded mirror flag.
pub fn labeled_schedule(num_labeled: usize, iterations: usize, seed: u64, mirror: bool) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..num_labeled).collect();
    let mut out = Vec::with_capacity(iterations);
    while out.len() < iterations {
        order.shuffle(&mut rng);
        for &i in &order {
            if out.len() == iterations {
                break;
            }
            let flip = mirror && rng.random::<bool>();
            out.push((i, flip));
        }
    }
    out
}

fn num_classes_of<T: Real>(labeled: &SceneSequence<T>) -> usize {
    labeled.num_classes
}

/// Supervised loss and its weight gradient for one labeled item.
fn supervised_term<T: Real>(
    model: &ToyModel<T>,
    item: &Labeled<T>,
    weights: &ClassWeights<T>,
    grad: &mut [T],
) -> Result<(T, usize), TrainError> {
    let z = model.logits(&item.features)?;
    let l = weighted_cross_entropy(&z, &item.labels, weights)?;
    weight_gradient(&item.features, &l.grad, grad, T::one());
    Ok((l.loss, l.count))
}

fn apply_update<T: Real>(model: &mut ToyModel<T>, grad: &[T], lr: T) {
    for (w, &g) in model.weights.iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

fn check_finite<T: Real>(report: &LossReport<T>, model: &ToyModel<T>, iteration: usize) -> Result<(), TrainError> {
    if !report.total.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(TrainError::Diverged { iteration });
    }
    Ok(())
}

/// Gradient descent on the supervised term only.
pub fn train_supervised<T: Real>(
    labeled: &SceneSequence<T>,
    cfg: &TrainConfig<T>,
) -> Result<(ToyModel<T>, Vec<LossReport<T>>), TrainError> {
    cfg.validate()?;
    let items = labeled_items(&labeled.frames, cfg.mirror)?;
    let c = num_classes_of(labeled);
    let weights: ClassWeights<T> = median_freq_weights(items.iter().map(|i| &i[0].labels), c)?;
    let schedule = labeled_schedule(items.len(), cfg.iterations, cfg.seed, cfg.mirror);
    let mut model = ToyModel::seeded(c, NUM_FEATURES, cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    for (it, &(i, flip)) in schedule.iter().enumerate() {
        if it % cfg.snapshot_period == 0 {
            model.snapshot_weights.clone_from(&model.weights);
        }
        let mut grad = vec![T::zero(); model.weights.len()];
        let (l_s, count_s) = supervised_term(&model, &items[i][usize::from(flip)], &weights, &mut grad)?;
        apply_update(&mut model, &grad, cfg.learning_rate);
        let report = total_loss(
            &LossParts {
                l_s,
                count_s,
                ..Default::default()
            },
            T::zero(),
            T::lit(crate::losses::DEFAULT_LAMBDA_D),
        );
        check_finite(&report, &model, it)?;
        model.iteration = it + 1;
        log.push(report);
    }
    Ok((model, log))
}

/// Stateful semi-supervised trainer. [`S4Trainer::update`] is a pure function
/// of the student weights and the cached fused labels.
pub struct S4Trainer<'a, T> {
    cfg: TrainConfig<T>,
    items: Vec<[Labeled<T>; 2]>,
    class_weights: ClassWeights<T>,
    schedule: Vec<(usize, bool)>,
    target: &'a SceneSequence<T>,
    target_features: Vec<Field<T>>,
    plan: Option<FusionPlan<T>>,
    fused: Option<Vec<Fused<T>>>,
    model: ToyModel<T>,
    log: Vec<LossReport<T>>,
}

impl<'a, T: Real> S4Trainer<'a, T> {
    pub fn new(labeled: &SceneSequence<T>, target: &'a SceneSequence<T>, cfg: &TrainConfig<T>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if target.num_classes != labeled.num_classes {
            return Err(TrainError::Config(format!(
                "labeled set has {} classes, target {}",
                labeled.num_classes, target.num_classes
            )));
        }
        let items = labeled_items(&labeled.frames, cfg.mirror)?;
        let c = num_classes_of(labeled);
        let class_weights = median_freq_weights(items.iter().map(|i| &i[0].labels), c)?;
        let active = cfg.lambda != T::zero() && cfg.warmup < cfg.iterations && !target.is_empty();
        let plan = if active {
            Some(FusionPlan::build(target, &cfg.fusion)?)
        } else {
            None
        };
        Ok(Self {
            schedule: labeled_schedule(items.len(), cfg.iterations, cfg.seed, cfg.mirror),
            cfg: *cfg,
            items,
            class_weights,
            target_features: if active { target.frames.iter().map(featurize).collect() } else { vec![] },
            target,
            plan,
            fused: None,
            model: ToyModel::seeded(c, NUM_FEATURES, cfg.seed),
            log: Vec::with_capacity(cfg.iterations),
        })
    }

    pub fn model(&self) -> &ToyModel<T> {
        &self.model
    }

    /// Mutable access, e.g. to perturb the snapshot without refreshing labels.
    pub fn model_mut(&mut self) -> &mut ToyModel<T> {
        &mut self.model
    }

    pub fn fused(&self) -> Option<&[Fused<T>]> {
        self.fused.as_deref()
    }

    fn consistency_active(&self, it: usize) -> bool {
        self.plan.is_some() && it >= self.cfg.warmup
    }

    /// Copies the student into the snapshot and recomputes fused labels from
    /// the snapshot's predictions when the consistency term is in use.
    pub fn refresh_teacher(&mut self) -> Result<(), TrainError> {
        self.model.snapshot_weights.clone_from(&self.model.weights);
        if let Some(plan) = &self.plan {
            let probs = self
                .target_features
                .iter()
                .map(|f| self.model.teacher_forward(f))
                .collect::<Result<Vec<_>, _>>()?;
            self.fused = Some(plan.fuse(self.target, &probs)?);
        }
        Ok(())
    }

    /// Weight gradient of `L_S + λ L_G` at iteration `it` and the loss report.
    pub fn update(&self, it: usize) -> Result<(Vec<T>, LossReport<T>), TrainError> {
        let mut grad = vec![T::zero(); self.model.weights.len()];
        let (i, flip) = self.schedule[it];
        let (l_s, count_s) = supervised_term(&self.model, &self.items[i][usize::from(flip)], &self.class_weights, &mut grad)?;
        let mut parts = LossParts {
            l_s,
            count_s,
            ..Default::default()
        };
        if self.consistency_active(it) {
            let fused = self
                .fused
                .as_ref()
                .ok_or_else(|| TrainError::Config("teacher labels not computed".into()))?;
            let pos = it % self.target.len();
            let feats = &self.target_features[pos];
            let z = self.model.logits(feats)?;
            let l = consistency_loss(&z, &fused[pos].labels, &fused[pos].mask)?;
            weight_gradient(feats, &l.grad, &mut grad, self.cfg.lambda);
            parts.l_g = l.loss;
            parts.count_g = l.count;
        }
        let lambda = if self.consistency_active(it) { self.cfg.lambda } else { T::zero() };
        Ok((grad, total_loss(&parts, lambda, T::lit(crate::losses::DEFAULT_LAMBDA_D))))
    }

    /// Runs one iteration and returns its loss report.
    pub fn step(&mut self) -> Result<LossReport<T>, TrainError> {
        let it = self.model.iteration;
        let first_active = self.consistency_active(it) && self.fused.is_none();
        if it % self.cfg.snapshot_period == 0 || first_active {
            if self.consistency_active(it) {
                self.refresh_teacher()?;
            } else {
                self.model.snapshot_weights.clone_from(&self.model.weights);
            }
        }
        let (grad, report) = self.update(it)?;
        apply_update(&mut self.model, &grad, self.cfg.learning_rate);
        check_finite(&report, &self.model, it)?;
        self.model.iteration = it + 1;
        self.log.push(report);
        Ok(report)
    }

    pub fn run(mut self) -> Result<(ToyModel<T>, Vec<LossReport<T>>), TrainError> {
        while self.model.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok((self.model, self.log))
    }
}

/// Full semi-supervised training.
pub fn train_s4<T: Real>(
    labeled: &SceneSequence<T>,
    target: &SceneSequence<T>,
    cfg: &TrainConfig<T>,
) -> Result<(ToyModel<T>, Vec<LossReport<T>>), TrainError> {
    S4Trainer::new(labeled, target, cfg)?.run()
}

/// Encodes `weights` as `TOYM`, u32 C, u32 F, then C·F little-endian f32.
pub fn encode_model<T: Real>(model: &ToyModel<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * model.weights.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(model.num_features as u32).to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_f32_lossy().to_le_bytes());
    }
    out
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<ToyModel<T>, FrameIoError> {
    let bad = |m: String| FrameIoError::Format(m);
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(bad("not a TOYM model file".into()));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (c, f) = (u(4), u(8));
    let n = c.checked_mul(f).ok_or_else(|| bad("model dimensions overflow".into()))?;
    if bytes.len() != 12 + 4 * n {
        return Err(bad(format!("model payload is {} bytes, expected {}", bytes.len() - 12, 4 * n)));
    }
    let w = bytes[12..]
        .chunks_exact(4)
        .map(|b| T::lit(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
        .collect();
    ToyModel::from_weights(c, f, w).map_err(|e| bad(e.to_string()))
}

pub fn write_model<T: Real>(path: &Path, model: &ToyModel<T>) -> Result<(), FrameIoError> {
    std::fs::write(path, encode_model(model)).map_err(|e| FrameIoError::io(path, e))
}

pub fn read_model<T: Real>(path: &Path) -> Result<ToyModel<T>, FrameIoError> {
    let bytes = std::fs::read(path).map_err(|e| FrameIoError::io(path, e))?;
    decode_model(&bytes)
}

/// One row per iteration: `iteration,total,l_s,l_g,count_s,count_g`.
pub fn write_loss_log<T: Real>(path: &Path, log: &[LossReport<T>]) -> Result<(), FrameIoError> {
    let mut s = String::from("iteration,total,l_s,l_g,lambda,count_s,count_g\n");
    for (i, r) in log.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, r.total, r.l_s, r.l_g, r.lambda, r.count_s, r.count_g
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| FrameIoError::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| FrameIoError::io(path, e))
}
