use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};

use super::{FrameIoError, LabelMap};
use crate::masks::{Reason, ValidityMask};
use crate::raster::Field;
use crate::scalar::Real;

pub const MILLIMETERS_PER_METER: f64 = 1000.0;

pub(crate) fn open_image(path: &Path) -> Result<DynamicImage, FrameIoError> {
    if !path.exists() {
        return Err(FrameIoError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| FrameIoError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_error(path: &Path, source: image::ImageError) -> FrameIoError {
    FrameIoError::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_label_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let path = path.as_ref();
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.as_slice().to_vec())
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| save_error(path, e))
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap, FrameIoError> {
    let path = path.as_ref();
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(LabelMap::new(h as usize, w as usize, img.into_raw()).expect("decoder dimensions"))
        }
        other => Err(FrameIoError::parse(
            path,
            format!("label PNG must be 8-bit grayscale, found {:?}", other.color()),
        )),
    }
}

/// Writes reason codes 0–5 as an 8-bit grayscale PNG.
pub fn write_mask_png(mask: &ValidityMask, path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let path = path.as_ref();
    let raw = mask.reasons().iter().map(|&r| r as u8).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| save_error(path, e))
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<ValidityMask, FrameIoError> {
    let path = path.as_ref();
    let labels = read_label_png(path)?;
    let reasons = labels
        .as_slice()
        .iter()
        .map(|&code| {
            Reason::from_code(code)
                .ok_or_else(|| FrameIoError::parse(path, format!("unknown mask reason code {code}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ValidityMask::from_reasons(labels.height(), labels.width(), reasons).expect("dimensions"))
}

/// Writes depth in meters as 16-bit millimeters. Non-positive depth becomes 0.
pub fn write_depth_png<T: Real>(depth: &Field<T>, path: impl AsRef<Path>) -> Result<(), FrameIoError> {
    let path = path.as_ref();
    let raw: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&d| {
            let mm = (d.to_f64_lossy() * MILLIMETERS_PER_METER).round();
            if mm > 0.0 {
                mm.min(f64::from(u16::MAX)) as u16
            } else {
                0
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| save_error(path, e))
}

/// Reads a 16-bit millimeter depth PNG into meters.
pub fn read_depth_png<T: Real>(path: impl AsRef<Path>) -> Result<Field<T>, FrameIoError> {
    let path = path.as_ref();
    match open_image(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let scale = T::lit(MILLIMETERS_PER_METER);
            let data = img
                .into_raw()
                .into_iter()
                .map(|mm| T::lit(f64::from(mm)) / scale)
                .collect();
            Ok(Field::from_vec(h as usize, w as usize, 1, data).expect("decoder dimensions"))
        }
        other => Err(FrameIoError::parse(
            path,
            format!("depth PNG must be 16-bit grayscale, found {:?}", other.color()),
        )),
    }
}
