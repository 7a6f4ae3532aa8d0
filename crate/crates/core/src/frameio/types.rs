use crate::geometry::{Intrinsics, RigidTransform};
use crate::raster::{check_plane, Field, ShapeError};
use crate::scalar::Real;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Label space size used when a scene does not declare its own.
pub const DEFAULT_NUM_CLASSES: usize = 37;

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvariantError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("pixel {pixel}: {msg}")]
    Pixel { pixel: usize, msg: String },
    #[error("{0}")]
    Other(String),
}

/// Per-pixel class ids, [`IGNORE`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, ShapeError> {
        if labels.len() != height * width {
            return Err(ShapeError {
                expected: (height, width, 1),
                found: (labels.len(), 1, 1),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            labels,
        }
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
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn mirrored(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Every label is below `num_classes` or [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<(), InvariantError> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && usize::from(l) >= num_classes)
        {
            Some(i) => Err(InvariantError::Pixel {
                pixel: i,
                msg: format!("label {} not below {num_classes} classes", self.labels[i]),
            }),
            None => Ok(()),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel class probabilities with a validity plane.
///
/// Valid pixels hold a distribution; invalid pixels hold all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    values: Field<T>,
    valid: Vec<bool>,
}

impl<T: Real> ProbMap<T> {
    /// Checked constructor.
    pub fn new(values: Field<T>, valid: Vec<bool>) -> Result<Self, InvariantError> {
        let p = Self::from_parts(values, valid)?;
        p.validate()?;
        Ok(p)
    }

    /// Pairs values with validity, checking only the shapes.
    pub fn from_parts(values: Field<T>, valid: Vec<bool>) -> Result<Self, InvariantError> {
        if valid.len() != values.pixel_count() {
            return Err(ShapeError {
                expected: (values.height(), values.width(), 1),
                found: (valid.len(), 1, 1),
            }
            .into());
        }
        Ok(Self { values, valid })
    }

    pub fn invalid(height: usize, width: usize, channels: usize) -> Self {
        Self {
            values: Field::zeros(height, width, channels),
            valid: vec![false; height * width],
        }
    }

    /// One-hot encoding; [`IGNORE`] pixels become invalid.
    pub fn one_hot(labels: &LabelMap, channels: usize) -> Result<Self, InvariantError> {
        labels.validate(channels)?;
        let mut values = Field::zeros(labels.height(), labels.width(), channels);
        let mut valid = vec![false; labels.as_slice().len()];
        for (i, &l) in labels.as_slice().iter().enumerate() {
            if l != IGNORE {
                values.at_mut(i)[usize::from(l)] = T::one();
                valid[i] = true;
            }
        }
        Ok(Self { values, valid })
    }

    #[inline]
    pub fn values(&self) -> &Field<T> {
        &self.values
    }

    #[inline]
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    #[inline]
    pub fn plane(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[T] {
        self.values.at(i)
    }

    pub fn into_parts(self) -> (Field<T>, Vec<bool>) {
        (self.values, self.valid)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        let tol = T::lit(PROB_SUM_TOLERANCE);
        for (i, &ok) in self.valid.iter().enumerate() {
            let v = self.values.at(i);
            if ok {
                if v.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
                    return Err(InvariantError::Pixel {
                        pixel: i,
                        msg: "negative or non-finite probability".into(),
                    });
                }
                let s: T = v.iter().copied().sum();
                if (s - T::one()).abs() > tol {
                    return Err(InvariantError::Pixel {
                        pixel: i,
                        msg: format!("probabilities sum to {s}"),
                    });
                }
            } else if v.iter().any(|&x| x != T::zero()) {
                return Err(InvariantError::Pixel {
                    pixel: i,
                    msg: "invalid pixel with non-zero probabilities".into(),
                });
            }
        }
        Ok(())
    }

    /// Argmax labels; invalid pixels become [`IGNORE`].
    pub fn argmax_labels(&self) -> LabelMap {
        let labels = (0..self.valid.len())
            .map(|i| {
                if self.valid[i] {
                    argmax(self.values.at(i)) as u8
                } else {
                    IGNORE
                }
            })
            .collect();
        LabelMap {
            height: self.height(),
            width: self.width(),
            labels,
        }
    }

    pub fn cast<U: Real>(&self) -> ProbMap<U> {
        ProbMap {
            values: self.values.cast(),
            valid: self.valid.clone(),
        }
    }
}

/// One registered RGB-D view.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    /// Frame number from the on-disk file name.
    pub index: usize,
    /// H×W×3, each channel in [0, 1].
    pub color: Field<T>,
    /// H×W×1 in meters; 0 means missing.
    pub depth: Field<T>,
    /// Camera-to-world pose.
    pub pose: RigidTransform<T>,
    pub intrinsics: Intrinsics<T>,
    pub labels: Option<LabelMap>,
}

impl<T: Real> Frame<T> {
    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn plane(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    #[inline]
    pub fn depth_at(&self, i: usize) -> T {
        self.depth.as_slice()[i]
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), InvariantError> {
        let plane = self.plane();
        self.color.check_shape((plane.0, plane.1, 3))?;
        self.depth.check_shape((plane.0, plane.1, 1))?;
        if let Some(i) = self
            .depth
            .as_slice()
            .iter()
            .position(|&d| !(d >= T::zero()) || !d.is_finite())
        {
            return Err(InvariantError::Pixel {
                pixel: i,
                msg: "negative or non-finite depth".into(),
            });
        }
        if let Some(i) = self
            .color
            .as_slice()
            .iter()
            .position(|&c| !(c >= T::zero() && c <= T::one()))
        {
            return Err(InvariantError::Pixel {
                pixel: i / 3,
                msg: "color outside [0, 1]".into(),
            });
        }
        if let Some(labels) = &self.labels {
            check_plane(plane, labels.plane())?;
            labels.validate(num_classes)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Frame<U> {
        Frame {
            index: self.index,
            color: self.color.cast(),
            depth: self.depth.cast(),
            pose: self.pose.cast(),
            intrinsics: self.intrinsics.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Ordered frames of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence<T> {
    pub frames: Vec<Frame<T>>,
    pub num_classes: usize,
}

impl<T: Real> SceneSequence<T> {
    pub fn new(frames: Vec<Frame<T>>, num_classes: usize) -> Result<Self, InvariantError> {
        let s = Self {
            frames,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of the frame carrying file index `index`.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.index == index)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.num_classes == 0 || self.num_classes > usize::from(IGNORE) {
            return Err(InvariantError::Other(format!(
                "num_classes {} outside 1..=254",
                self.num_classes
            )));
        }
        if let Some(first) = self.frames.first() {
            for f in &self.frames {
                check_plane(first.plane(), f.plane())?;
                f.validate(self.num_classes)?;
            }
        }
        if self.frames.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(InvariantError::Other(
                "frame indices are not strictly increasing".into(),
            ));
        }
        Ok(())
    }
}
