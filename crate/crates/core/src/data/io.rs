use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
const EXTENSIONS: [&str; 2] = ["png", "pgm"];

/// Reads an 8- or 16-bit grayscale PNG/PGM as a `(1, 1, h, w)` tensor in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect()
        }
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected 8- or 16-bit grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Tensor::new([1, 1, h, w], data)
}

fn quantize(t: &Tensor<f32>, max: f32) -> Result<(u32, u32, Vec<f32>)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid("write_gray", format!("expects one plane, got {s}")));
    }
    let data = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * max).round()).collect();
    Ok((s.w as u32, s.h as u32, data))
}

pub fn write_gray8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (w, h, data) = quantize(t, 255.0)?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w, h, data.into_iter().map(|v| v as u8).collect()).expect("buffer size");
    buf.save(path).map_err(|e| Error::io(path, e))
}

pub fn write_gray16(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (w, h, data) = quantize(t, 65535.0)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, data.into_iter().map(|v| v as u16).collect()).expect("buffer size");
    buf.save(path).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resampling with half-pixel centres.
pub fn resize_nearest(x: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = x.shape();
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data().chunks(s.plane()) {
        for r in 0..oh {
            let sr = pick(r, oh, s.h);
            for c in 0..ow {
                data.push(plane[sr * s.w + pick(c, ow, s.w)]);
            }
        }
    }
    Tensor::new(s.with_hw(oh, ow), data).expect("resize shape")
}

/// Maps file stem to path for every PNG/PGM directly inside `dir`.
fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_owned(), path.clone()) {
            return Err(Error::Dataset(format!(
                "stem {stem} is ambiguous: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn load_pair(stem: &str, image: &Path, mask: &Path, resize_to: Option<usize>) -> Result<Sample> {
    let mut img = read_gray(image)?;
    let mut msk = read_gray(mask)?;
    if let Some(size) = resize_to {
        img = resize_bilinear(&img, size, size);
        msk = resize_nearest(&msk, size, size);
    }
    if img.shape() != msk.shape() {
        return Err(Error::Dataset(format!(
            "{stem}: image {} and mask {} differ in size",
            img.shape(),
            msk.shape()
        )));
    }
    Ok(Sample {
        image: img,
        mask: msk.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        id: stem.to_owned(),
    })
}

/// Loads `dir/images/*` with the same-stem `dir/masks/*`, sorted by stem.
pub fn load_dataset(dir: &Path, resize_to: Option<usize>) -> Result<Vec<Sample>> {
    if resize_to == Some(0) {
        return Err(Error::Config("resize_to must be ≥ 1".into()));
    }
    let images = list_stems(&dir.join(IMAGES_DIR))?;
    let masks = list_stems(&dir.join(MASKS_DIR))?;
    let pairs = images
        .iter()
        .map(|(stem, img)| {
            masks
                .get(stem)
                .map(|m| (stem, img, m))
                .ok_or_else(|| Error::Dataset(format!("image {stem} has no mask in {}", dir.join(MASKS_DIR).display())))
        })
        .collect::<Result<Vec<_>>>()?;
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        log::warn!("mask {stem} has no image; skipped");
    }
    pairs
        .into_par_iter()
        .map(|(stem, img, m)| load_pair(stem, img, m, resize_to))
        .collect()
}

/// Writes samples as 16-bit images and 0/255 masks under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (images, masks) = (dir.join(IMAGES_DIR), dir.join(MASKS_DIR));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    samples.par_iter().try_for_each(|s| {
        write_gray16(&images.join(format!("{}.png", s.id)), &s.image)?;
        write_gray8(&masks.join(format!("{}.png", s.id)), &s.mask)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_keeps_values() {
        let x = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let y = resize_nearest(&x, 4, 4);
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
        assert_eq!(y.at(0, 0, 0, 3), 1.0);
        assert_eq!(y.at(0, 0, 3, 0), 1.0);
        assert_eq!(resize_nearest(&y, 2, 2), x);
    }

    #[test]
    fn gray16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn([1, 1, 3, 5], |_, _, r, c| ((r * 5 + c) as f32 * 4099.0).round() / 65535.0);
        write_gray16(&p, &t).unwrap();
        assert_eq!(read_gray(&p).unwrap(), t);
    }

    #[test]
    fn color_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(4, 4).save(&p).unwrap();
        let err = read_gray(&p).unwrap_err();
        assert!(err.to_string().contains("grayscale"));
    }
}
