//! Analytic renderer for box-in-a-room scenes with exact depth, labels and
//! poses, plus the domain-shift benchmark generator.
//!
//! World frame is y-up. Cameras use x right, y down, z forward, so a pose's
//! rotation columns are the right, down and forward axes in world
//! coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frameio::{Frame, LabelMap, SceneSequence, IGNORE};
use crate::geometry::{Intrinsics, Mat3, Pixel, RigidTransform, Vec3};
use crate::raster::Field;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
}

fn spec_err<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::Spec(msg.into()))
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn encloses(&self, o: &Aabb) -> bool {
        (0..3).all(|a| o.min[a] >= self.min[a] && o.max[a] <= self.max[a])
    }

    fn is_proper(&self) -> bool {
        (0..3).all(|a| self.min[a] < self.max[a] && self.min[a].is_finite() && self.max[a].is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub extent: Aabb,
    pub floor_class: u8,
    pub wall_class: u8,
    pub ceiling_class: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub extent: Aabb,
    pub class: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// Albedo scaled by `1 ± contrast/2` on alternating squares of side
    /// `period` meters in each face's own plane.
    Checker { period: f64, contrast: f64 },
}

/// Cameras on a horizontal circular arc, all looking at `look_at`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub start_deg: f64,
    pub end_deg: f64,
    pub frames: usize,
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraSpec {
    /// Principal point at the image center and the given horizontal field of view.
    pub fn with_hfov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of additive gaussian color noise.
    pub color_sigma: f64,
    /// Probability that a depth pixel is zeroed.
    pub depth_dropout: f64,
    /// Radial falloff: color is scaled by `1 - vignetting·r²`, with `r` the
    /// distance from the principal point over the half diagonal.
    #[serde(default)]
    pub vignetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub room: RoomSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    /// Linear RGB albedo per class.
    pub albedo: Vec<[f64; 3]>,
    pub texture: Texture,
    pub trajectory: TrajectorySpec,
    pub camera: CameraSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    /// Index of the first frame; later frames count up by one.
    #[serde(default)]
    pub first_index: usize,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec is plain data")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_classes == 0 || self.num_classes > usize::from(IGNORE) - 1 {
            return spec_err(format!("num_classes {} outside 1..=254", self.num_classes));
        }
        if self.albedo.len() != self.num_classes {
            return spec_err(format!("{} albedos for {} classes", self.albedo.len(), self.num_classes));
        }
        if !self.room.extent.is_proper() {
            return spec_err("room extent must have min < max on every axis");
        }
        let classes = [self.room.floor_class, self.room.wall_class, self.room.ceiling_class]
            .into_iter()
            .chain(self.boxes.iter().map(|b| b.class));
        for c in classes {
            if usize::from(c) >= self.num_classes {
                return spec_err(format!("class id {c} not below {}", self.num_classes));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.extent.is_proper() || !self.room.extent.encloses(&b.extent) {
                return spec_err(format!("box {i} is degenerate or not inside the room"));
            }
        }
        let t = &self.trajectory;
        if t.frames == 0 {
            return spec_err("trajectory needs at least one frame");
        }
        if !(t.radius >= 0.0) || !t.radius.is_finite() {
            return spec_err("trajectory radius must be finite and non-negative");
        }
        if t.radius == 0.0 && t.frames > 1 && t.start_deg != t.end_deg {
            return spec_err("zero-radius trajectory with an angular range is degenerate");
        }
        if let Texture::Checker { period, contrast } = self.texture {
            if !(period > 0.0) || !(0.0..=1.0).contains(&contrast) {
                return spec_err("checker needs period > 0 and contrast in [0, 1]");
            }
        }
        let n = self.noise;
        if !(n.color_sigma >= 0.0) || !(0.0..=1.0).contains(&n.depth_dropout) {
            return spec_err("noise sigma must be >= 0 and dropout in [0, 1]");
        }
        if !(0.0..=1.0).contains(&n.vignetting) {
            return spec_err("vignetting must be in [0, 1]");
        }
        Intrinsics::new(self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy, self.camera.width, self.camera.height)
            .map_err(|e| SynthError::Spec(e.to_string()))?;
        for k in 0..t.frames {
            let pos = camera_position(t, k);
            if !self.room.extent.contains(pos) || self.boxes.iter().any(|b| b.extent.contains(pos)) {
                return spec_err(format!("camera {k} is outside the room or inside a box"));
            }
        }
        Ok(())
    }

    /// Camera-to-world pose of trajectory frame `k`.
    pub fn pose(&self, k: usize) -> Result<RigidTransform<f64>, SynthError> {
        let t = &self.trajectory;
        look_at(camera_position(t, k), t.look_at)
    }
}

fn camera_position(t: &TrajectorySpec, k: usize) -> [f64; 3] {
    let frac = if t.frames > 1 { k as f64 / (t.frames - 1) as f64 } else { 0.0 };
    let a = (t.start_deg + (t.end_deg - t.start_deg) * frac).to_radians();
    [t.center[0] + t.radius * a.sin(), t.center[1] + t.height, t.center[2] + t.radius * a.cos()]
}

/// Pose of a camera at `eye` facing `target`, with the world y axis up.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<RigidTransform<f64>, SynthError> {
    let eye = Vec3::from_array(eye);
    let Some(forward) = (Vec3::from_array(target) - eye).normalized() else {
        return spec_err("camera looks at its own position");
    };
    let Some(right) = forward.cross(Vec3::new(0.0, 1.0, 0.0)).normalized() else {
        return spec_err("camera looks straight up or down");
    };
    let down = forward.cross(right);
    RigidTransform::new(Mat3::from_columns(right, down, forward), eye).map_err(|e| SynthError::Spec(e.to_string()))
}

/// Nearest surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    t: f64,
    class: u8,
    /// Axis of the face normal.
    axis: usize,
    point: [f64; 3],
}

fn intersect(spec: &SceneSpec, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    let mut best: Option<(f64, u8, usize)> = None;
    for b in &spec.boxes {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        let mut miss = false;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < b.extent.min[a] || o[a] > b.extent.max[a] {
                    miss = true;
                }
                continue;
            }
            let ta = (b.extent.min[a] - o[a]) / d[a];
            let tb = (b.extent.max[a] - o[a]) / d[a];
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            if lo > t0 {
                t0 = lo;
                axis = a;
            }
            t1 = t1.min(hi);
        }
        if !miss && t0 <= t1 && t0 > 0.0 && best.is_none_or(|(bt, _, _)| t0 < bt) {
            best = Some((t0, b.class, axis));
        }
    }
    // The room is seen from inside: the exit face is the visible one.
    let room = &spec.room;
    let (mut t_exit, mut axis, mut positive) = (f64::INFINITY, 0, false);
    for a in 0..3 {
        if d[a] == 0.0 {
            continue;
        }
        let (bound, pos) = if d[a] > 0.0 { (room.extent.max[a], true) } else { (room.extent.min[a], false) };
        let t = (bound - o[a]) / d[a];
        if t < t_exit {
            t_exit = t;
            axis = a;
            positive = pos;
        }
    }
    if t_exit.is_finite() && t_exit > 0.0 && best.is_none_or(|(bt, _, _)| t_exit < bt) {
        let class = match (axis, positive) {
            (1, false) => room.floor_class,
            (1, true) => room.ceiling_class,
            _ => room.wall_class,
        };
        best = Some((t_exit, class, axis));
    }
    best.map(|(t, class, axis)| Hit {
        t,
        class,
        axis,
        point: [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]],
    })
}

fn shade(spec: &SceneSpec, hit: &Hit) -> [f64; 3] {
    let albedo = spec.albedo[usize::from(hit.class)];
    let factor = match spec.texture {
        Texture::Flat => 1.0,
        Texture::Checker { period, contrast } => {
            let (u, v) = ((hit.axis + 1) % 3, (hit.axis + 2) % 3);
            let parity = ((hit.point[u] / period).floor() + (hit.point[v] / period).floor()).rem_euclid(2.0);
            if parity < 0.5 {
                1.0 + contrast / 2.0
            } else {
                1.0 - contrast / 2.0
            }
        }
    };
    albedo.map(|a| (a * factor).clamp(0.0, 1.0))
}

/// Renders trajectory frame `k` of `spec`.
pub fn render_view(spec: &SceneSpec, k: usize) -> Result<Frame<f64>, SynthError> {
    let cam = spec.camera;
    let intr = Intrinsics::new(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    let pose = spec.pose(k)?;
    let (h, w) = (cam.height, cam.width);
    let r = pose.rotation();
    let o = pose.translation().to_array();
    let mut color = Field::zeros(h, w, 3);
    let mut depth = Field::zeros(h, w, 1);
    let mut labels = LabelMap::filled(h, w, IGNORE);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64);
    let half_diag2 = ((w * w + h * h) as f64) / 4.0;
    let noise = Normal::new(0.0, spec.noise.color_sigma.max(0.0)).map_err(|e| SynthError::Spec(e.to_string()))?;
    for row in 0..h {
        for col in 0..w {
            // Camera ray with unit z, so the hit parameter is the z-depth.
            let d = r.mul_vec(intr.ray(Pixel::center(row, col))).to_array();
            let mut rgb = [0.0; 3];
            if let Some(hit) = intersect(spec, o, d) {
                rgb = shade(spec, &hit);
                if spec.noise.vignetting > 0.0 {
                    let (dx, dy) = (col as f64 - cam.cx, row as f64 - cam.cy);
                    let g = 1.0 - spec.noise.vignetting * (dx * dx + dy * dy) / half_diag2;
                    rgb = rgb.map(|v| v * g);
                }
                labels.set(row, col, hit.class);
                depth.set(row, col, 0, hit.t);
            }
            if spec.noise.color_sigma > 0.0 {
                for v in &mut rgb {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            if spec.noise.depth_dropout > 0.0 && rng.random::<f64>() < spec.noise.depth_dropout {
                depth.set(row, col, 0, 0.0);
            }
            color.pixel_mut(row, col).copy_from_slice(&rgb);
        }
    }
    Ok(Frame {
        index: spec.first_index + k,
        color,
        depth,
        pose,
        intrinsics: intr,
        labels: Some(labels),
    })
}

/// Renders every trajectory frame, in parallel; each frame draws noise from its
/// own stream so the output does not depend on scheduling.
pub fn render<T: Real>(spec: &SceneSpec) -> Result<SceneSequence<T>, SynthError> {
    spec.validate()?;
    let frames = (0..spec.trajectory.frames)
        .into_par_iter()
        .map(|k| render_view(spec, k).map(|f| f.cast::<T>()))
        .collect::<Result<Vec<_>, _>>()?;
    SceneSequence::new(frames, spec.num_classes).map_err(|e| SynthError::Spec(e.to_string()))
}

/// A small randomized two-class-plus scene with `frames` views on a short arc.
/// Used for warp verification: moderate motion, textured surfaces, no noise.
pub fn random_pair_spec(seed: u64, width: usize, height: usize, frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::new();
    for class in 3..6u8 {
        let cx = rng.random_range(-1.6..1.6);
        let cz = rng.random_range(-1.6..1.6);
        let sx = rng.random_range(0.3..0.7);
        let sz = rng.random_range(0.3..0.7);
        let top = rng.random_range(0.4..1.4);
        boxes.push(BoxSpec {
            extent: Aabb {
                min: [cx - sx, 0.0, cz - sz],
                max: [cx + sx, top, cz + sz],
            },
            class,
        });
    }
    let start = rng.random_range(0.0..360.0);
    let sweep = rng.random_range(8.0..20.0);
    SceneSpec {
        num_classes: 6,
        room: RoomSpec {
            extent: Aabb {
                min: [-4.0, 0.0, -4.0],
                max: [4.0, 2.8, 4.0],
            },
            floor_class: 0,
            wall_class: 1,
            ceiling_class: 2,
        },
        boxes,
        albedo: vec![
            [0.55, 0.45, 0.3],
            [0.8, 0.78, 0.7],
            [0.9, 0.9, 0.9],
            [0.2, 0.3, 0.7],
            [0.7, 0.25, 0.2],
            [0.3, 0.6, 0.3],
        ],
        texture: Texture::Checker {
            period: 0.25,
            contrast: 0.4,
        },
        trajectory: TrajectorySpec {
            center: [0.0, 0.0, 0.0],
            radius: 3.3,
            height: 1.5,
            start_deg: start,
            end_deg: start + sweep * (frames.max(2) - 1) as f64,
            frames,
            look_at: [0.0, 0.6, 0.0],
        },
        camera: CameraSpec::with_hfov(width, height, 70.0),
        noise: NoiseSpec::default(),
        seed,
        first_index: 0,
    }
}

/// Labeled source set, unlabeled target sequence and labeled held-out eval
/// sequence of the domain-shift benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark<T> {
    pub source: SceneSequence<T>,
    /// Labels removed; ground truth kept separately in `target_labels`.
    pub target: SceneSequence<T>,
    pub target_labels: Vec<LabelMap>,
    pub eval: SceneSequence<T>,
}

pub const BENCHMARK_SOURCE_FRAMES: usize = 20;
pub const BENCHMARK_TARGET_FRAMES: usize = 60;
pub const BENCHMARK_EVAL_FRAMES: usize = 20;
pub const BENCHMARK_CLASSES: usize = 4;
pub const BENCHMARK_WIDTH: usize = 80;
pub const BENCHMARK_HEIGHT: usize = 60;

/// Scene variant shared by all three splits, before albedos and cameras.
fn benchmark_layout(seed: u64) -> (RoomSpec, Vec<BoxSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a70);
    let mut jitter = || rng.random_range(-0.15..0.15);
    let (j0, j1, j2, j3) = (jitter(), jitter(), jitter(), jitter());
    let room = RoomSpec {
        extent: Aabb {
            min: [-3.5, 0.0, -3.5],
            max: [3.5, 2.6, 3.5],
        },
        floor_class: 0,
        wall_class: 1,
        ceiling_class: 1,
    };
    let boxes = vec![
        BoxSpec {
            extent: Aabb {
                min: [-1.3 + j0, 0.0, -0.6 + j1],
                max: [-0.2 + j0, 0.75, 0.5 + j1],
            },
            class: 2,
        },
        BoxSpec {
            extent: Aabb {
                min: [0.3 + j2, 0.0, -0.4 + j3],
                max: [1.2 + j2, 1.5, 0.4 + j3],
            },
            class: 3,
        },
    ];
    (room, boxes)
}

/// Albedos of variant A (source) and the shifted variant B (target and eval).
pub const ALBEDO_A: [[f64; 3]; 4] = [[0.55, 0.42, 0.28], [0.82, 0.80, 0.74], [0.25, 0.33, 0.70], [0.70, 0.30, 0.22]];
pub const ALBEDO_B: [[f64; 3]; 4] = [[0.45, 0.45, 0.40], [0.70, 0.66, 0.55], [0.40, 0.36, 0.62], [0.72, 0.36, 0.30]];

/// Camera of variant A, and the shifted camera of variant B.
pub const NOISE_A: NoiseSpec = NoiseSpec { color_sigma: 0.03, depth_dropout: 0.0, vignetting: 0.0 };
pub const NOISE_B: NoiseSpec = NoiseSpec { color_sigma: 0.03, depth_dropout: 0.0, vignetting: 0.6 };

fn benchmark_spec(
    layout: &(RoomSpec, Vec<BoxSpec>),
    noise_seed: u64,
    albedo: &[[f64; 3]; 4],
    noise: NoiseSpec,
    trajectory: TrajectorySpec,
) -> SceneSpec {
    SceneSpec {
        num_classes: BENCHMARK_CLASSES,
        room: layout.0.clone(),
        boxes: layout.1.clone(),
        albedo: albedo.to_vec(),
        texture: Texture::Checker {
            period: 0.3,
            contrast: 0.3,
        },
        trajectory,
        camera: CameraSpec::with_hfov(BENCHMARK_WIDTH, BENCHMARK_HEIGHT, 70.0),
        noise,
        seed: noise_seed,
        first_index: 0,
    }
}

/// Source, target and eval specs of the benchmark for `seed`.
pub fn domain_shift_specs(seed: u64) -> [SceneSpec; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..360.0);
    let look = [0.0, 0.5, 0.0];
    let layout = benchmark_layout(seed);
    let source = benchmark_spec(
        &layout,
        seed.wrapping_mul(3).wrapping_add(1),
        &ALBEDO_A,
        NOISE_A,
        TrajectorySpec {
            center: [0.0; 3],
            radius: 2.8,
            height: 1.7,
            start_deg: phase,
            end_deg: phase + 342.0,
            frames: BENCHMARK_SOURCE_FRAMES,
            look_at: look,
        },
    );
    let target = benchmark_spec(
        &layout,
        seed.wrapping_mul(3).wrapping_add(2),
        &ALBEDO_B,
        NOISE_B,
        TrajectorySpec {
            center: [0.0; 3],
            radius: 2.4,
            height: 1.2,
            start_deg: phase + 30.0,
            end_deg: phase + 30.0 + 150.0,
            frames: BENCHMARK_TARGET_FRAMES,
            look_at: look,
        },
    );
    let eval = benchmark_spec(
        &layout,
        seed.wrapping_mul(3).wrapping_add(3),
        &ALBEDO_B,
        NOISE_B,
        TrajectorySpec {
            center: [0.0; 3],
            radius: 2.6,
            height: 1.0,
            start_deg: phase + 37.0,
            end_deg: phase + 37.0 + 142.5,
            frames: BENCHMARK_EVAL_FRAMES,
            look_at: look,
        },
    );
    [source, target, eval]
}

pub fn make_domain_shift_benchmark<T: Real>(seed: u64) -> Result<Benchmark<T>, SynthError> {
    let [s, t, e] = domain_shift_specs(seed);
    let source = render(&s)?;
    let mut target = render(&t)?;
    let target_labels = target
        .frames
        .iter_mut()
        .map(|f| f.labels.take().expect("rendered frames are labeled"))
        .collect();
    let eval = render(&e)?;
    Ok(Benchmark {
        source,
        target,
        target_labels,
        eval,
    })
}
