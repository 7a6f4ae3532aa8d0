use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use rayon::prelude::*;

use super::png::{open_image, read_depth_png, read_label_png, write_depth_png, write_label_png};
use super::{Frame, FrameIoError, SceneSequence, DEFAULT_NUM_CLASSES};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::raster::Field;
use crate::scalar::Real;

/// `%06d.<ext>`
pub fn frame_file_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep at most this many frames (lowest indices first).
    pub limit: Option<usize>,
    /// Overrides `classes.txt` and the 37-class default.
    pub num_classes: Option<usize>,
    /// Skip `label/` even when present.
    pub skip_labels: bool,
}

pub fn load_scene<T: Real>(
    dir: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<SceneSequence<T>, FrameIoError> {
    load_scene_with(
        dir,
        &LoadOptions {
            limit,
            ..LoadOptions::default()
        },
    )
}

/// Sorted frame indices found in `dir` (files named `%06d.<ext>`).
pub fn list_frame_indices(dir: impl AsRef<Path>, ext: &str) -> Result<Vec<usize>, FrameIoError> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| FrameIoError::io(dir, e))?;
    let suffix = format!(".{ext}");
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| FrameIoError::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(&suffix) {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    indices.dedup();
    Ok(indices)
}

fn read_text(path: &Path) -> Result<String, FrameIoError> {
    fs::read_to_string(path).map_err(|e| FrameIoError::io(path, e))
}

fn parse_reals(path: &Path, text: &str, expected: usize) -> Result<Vec<f64>, FrameIoError> {
    let vals = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| FrameIoError::parse(path, format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(FrameIoError::parse(
            path,
            format!("expected {expected} numbers, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

fn read_intrinsics<T: Real>(path: &Path) -> Result<Intrinsics<T>, FrameIoError> {
    let v = parse_reals(path, &read_text(path)?, 6)?;
    let (w, h) = (v[4], v[5]);
    if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 {
        return Err(FrameIoError::parse(path, format!("bad image size {w} x {h}")));
    }
    Intrinsics::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]), T::lit(v[3]), w as usize, h as usize)
        .map_err(|e| FrameIoError::parse(path, e.to_string()))
}

fn read_pose<T: Real>(path: &Path, index: usize) -> Result<RigidTransform<T>, FrameIoError> {
    let v = parse_reals(path, &read_text(path)?, 16)?;
    let mut m = [[T::zero(); 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = T::lit(v[4 * i + j]);
        }
    }
    RigidTransform::from_matrix(m).map_err(|e| FrameIoError::Frame {
        index,
        msg: format!("{}: {e}", path.display()),
    })
}

fn read_color<T: Real>(path: &Path) -> Result<Field<T>, FrameIoError> {
    let rgb: RgbImage = match open_image(path)? {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        other => {
            return Err(FrameIoError::parse(
                path,
                format!("color PNG must be 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = rgb.dimensions();
    let scale = T::lit(255.0);
    let data = rgb.into_raw().into_iter().map(|b| T::lit(f64::from(b)) / scale).collect();
    Ok(Field::from_vec(h as usize, w as usize, 3, data).expect("decoder dimensions"))
}

fn load_frame<T: Real>(
    dir: &Path,
    index: usize,
    intrinsics: Intrinsics<T>,
    with_labels: bool,
) -> Result<Frame<T>, FrameIoError> {
    let file = |sub: &str, ext: &str| dir.join(sub).join(frame_file_name(index, ext));
    let color = read_color(&file("color", "png"))?;
    let depth = read_depth_png(file("depth", "png"))?;
    let pose = read_pose(&file("pose", "txt"), index)?;
    let label_path = file("label", "png");
    let labels = if with_labels && label_path.exists() {
        Some(read_label_png(&label_path)?)
    } else {
        None
    };
    let expected = (intrinsics.height, intrinsics.width);
    let mismatch = |what: &str, found: (usize, usize)| FrameIoError::Frame {
        index,
        msg: format!(
            "{what} is {}x{} but intrinsics say {}x{}",
            found.1, found.0, expected.1, expected.0
        ),
    };
    if (color.height(), color.width()) != expected {
        return Err(mismatch("color", (color.height(), color.width())));
    }
    if (depth.height(), depth.width()) != expected {
        return Err(mismatch("depth", (depth.height(), depth.width())));
    }
    if let Some(l) = &labels {
        if l.plane() != expected {
            return Err(mismatch("label", l.plane()));
        }
    }
    Ok(Frame {
        index,
        color,
        depth,
        pose,
        intrinsics,
        labels,
    })
}

pub fn load_scene_with<T: Real>(
    dir: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<SceneSequence<T>, FrameIoError> {
    let dir = dir.as_ref();
    let intrinsics = read_intrinsics::<T>(&dir.join("intrinsics.txt"))?;
    let num_classes = match opts.num_classes {
        Some(n) => n,
        None => {
            let path = dir.join("classes.txt");
            if path.exists() {
                let v = parse_reals(&path, &read_text(&path)?, 1)?[0];
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(FrameIoError::parse(&path, format!("bad class count {v}")));
                }
                v as usize
            } else {
                DEFAULT_NUM_CLASSES
            }
        }
    };
    let mut indices = list_frame_indices(dir.join("color"), "png")?;
    if let Some(limit) = opts.limit {
        indices.truncate(limit);
    }
    let frames = indices
        .par_iter()
        .map(|&i| load_frame(dir, i, intrinsics, !opts.skip_labels))
        .collect::<Result<Vec<_>, _>>()?;
    for f in &frames {
        f.validate(num_classes).map_err(|e| FrameIoError::Frame {
            index: f.index,
            msg: e.to_string(),
        })?;
    }
    Ok(SceneSequence::new(frames, num_classes)?)
}

fn create_dir(path: &Path) -> Result<(), FrameIoError> {
    fs::create_dir_all(path).map_err(|e| FrameIoError::io(path, e))
}

fn write_text(path: PathBuf, text: String) -> Result<(), FrameIoError> {
    fs::write(&path, text).map_err(|e| FrameIoError::io(path, e))
}

/// Writes `seq` in the on-disk layout. Color is quantized to 8 bits and
/// depth to whole millimeters.
pub fn write_scene<T: Real>(seq: &SceneSequence<T>, dir: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let dir = dir.as_ref();
    for sub in ["color", "depth", "pose"] {
        create_dir(&dir.join(sub))?;
    }
    let has_labels = seq.frames.iter().any(|f| f.labels.is_some());
    if has_labels {
        create_dir(&dir.join("label"))?;
    }
    if let Some(first) = seq.frames.first() {
        let k = &first.intrinsics;
        write_text(
            dir.join("intrinsics.txt"),
            format!("{} {} {} {}\n{} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
        )?;
    }
    write_text(dir.join("classes.txt"), format!("{}\n", seq.num_classes))?;
    seq.frames.par_iter().try_for_each(|f| -> Result<(), FrameIoError> {
        let file = |sub: &str, ext: &str| dir.join(sub).join(frame_file_name(f.index, ext));
        let bytes: Vec<u8> = f
            .color
            .as_slice()
            .iter()
            .map(|&c| (c.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = file("color", "png");
        RgbImage::from_raw(f.width() as u32, f.height() as u32, bytes)
            .expect("buffer length matches dimensions")
            .save(&path)
            .map_err(|source| FrameIoError::Image { path, source })?;
        write_depth_png(&f.depth, file("depth", "png"))?;
        let m = f.pose.to_matrix();
        let text: String = m
            .iter()
            .map(|row| {
                let cells: Vec<String> = row.iter().map(|v| v.to_f64_lossy().to_string()).collect();
                cells.join(" ") + "\n"
            })
            .collect();
        write_text(file("pose", "txt"), text)?;
        if let Some(labels) = &f.labels {
            write_label_png(labels, file("label", "png"))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frameio::LabelMap;
    use crate::geometry::{Mat3, Vec3};

    fn tiny_scene(n: usize) -> SceneSequence<f64> {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 1.5, 4, 3).unwrap();
        let frames = (0..n)
            .map(|i| Frame {
                index: i,
                color: Field::from_fn(3, 4, 3, |r, c, ch| (((r + c + ch + i) % 5) * 51) as f64 / 255.0),
                depth: Field::from_fn(3, 4, 1, |r, c, _| if r == 0 && c == 0 { 0.0 } else { 2.5 }),
                pose: RigidTransform::new(Mat3::identity(), Vec3::new(i as f64 * 0.1, 0.0, 0.0)).unwrap(),
                intrinsics: k,
                labels: Some(LabelMap::from_fn(3, 4, |_, c| c as u8)),
            })
            .collect();
        SceneSequence::new(frames, 5).unwrap()
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_scene(10);
        write_scene(&seq, dir.path()).unwrap();
        let loaded: SceneSequence<f64> = load_scene(dir.path(), None).unwrap();
        assert_eq!(loaded, seq);
        let limited: SceneSequence<f64> = load_scene(dir.path(), Some(5)).unwrap();
        assert_eq!(limited.len(), 5);
        assert_eq!(limited.frames[4].index, 4);
        let again: SceneSequence<f64> = load_scene(dir.path(), None).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn reflected_pose_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(3), dir.path()).unwrap();
        fs::write(
            dir.path().join("pose/000002.txt"),
            "1 0 0 0\n0 1 0 0\n0 0 -1 0\n0 0 0 1\n",
        )
        .unwrap();
        match load_scene::<f64>(dir.path(), None) {
            Err(FrameIoError::Frame { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected frame error, got {other:?}"),
        }
    }

    #[test]
    fn missing_depth_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(2), dir.path()).unwrap();
        fs::remove_file(dir.path().join("depth/000001.png")).unwrap();
        let err = load_scene::<f64>(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("000001"), "{err}");
    }

    #[test]
    fn default_class_count_without_classes_file() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("classes.txt")).unwrap();
        let seq: SceneSequence<f64> = load_scene(dir.path(), None).unwrap();
        assert_eq!(seq.num_classes, DEFAULT_NUM_CLASSES);
    }
}
