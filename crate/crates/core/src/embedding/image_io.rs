use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use super::{BackendDescriptor, ImageTensor, Preprocessing};
use crate::{Error, Result};

const LUMA_R: f64 = 0.299;
const LUMA_B: f64 = 0.114;

/// BT.601 luma written as `G + 0.299 (R - G) + 0.114 (B - G)`, which equals
/// `0.299 R + 0.587 G + 0.114 B` and returns `v` exactly when `R = G = B = v`.
fn luma([r, g, b]: [f64; 3]) -> f64 {
    g + LUMA_R * (r - g) + LUMA_B * (b - g)
}

/// Grayscale conversion of an image holding raw `[0,1]` pixels: BT.601 luma
/// replicated to all three channels.
pub fn grayscale(x: &ImageTensor) -> ImageTensor {
    let mut out = x.clone();
    for px in out.as_mut_slice().chunks_exact_mut(3) {
        let y = luma([px[0], px[1], px[2]]);
        px.fill(y);
    }
    out
}

/// Grayscale conversion of a model-space image: the luma is taken in the raw
/// domain and mapped back through `prep`. Achromatic pixels are returned
/// untouched.
pub fn grayscale_model(x: &ImageTensor, prep: &Preprocessing) -> ImageTensor {
    let mut out = x.clone();
    for px in out.as_mut_slice().chunks_exact_mut(3) {
        let raw = [0, 1, 2].map(|c| prep.to_raw(px[c], c));
        if raw[0] == raw[1] && raw[1] == raw[2] {
            continue;
        }
        let y = luma(raw);
        for (c, v) in px.iter_mut().enumerate() {
            *v = prep.to_model(y, c);
        }
    }
    out
}

/// Resize an 8-bit RGB image to the backend resolution and map it into model
/// space.
pub fn preprocess(raw: &RgbImage, desc: &BackendDescriptor) -> Result<ImageTensor> {
    let r = desc.resolution as u32;
    let resized;
    let src = if raw.width() == r && raw.height() == r {
        raw
    } else {
        resized = image::imageops::resize(raw, r, r, FilterType::CatmullRom);
        &resized
    };
    let prep = desc.preprocessing();
    let data = src
        .pixels()
        .flat_map(|p| p.0)
        .enumerate()
        .map(|(i, v)| prep.to_model(f64::from(v) / 255.0, i % 3))
        .collect();
    ImageTensor::new(r as usize, r as usize, data)
}

/// Back to 8-bit RGB, clamping to the raw `[0,1]` range.
pub fn to_rgb8(x: &ImageTensor, prep: &Preprocessing) -> RgbImage {
    let buf = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| (prep.to_raw(v, i % 3).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(x.width() as u32, x.height() as u32, buf).expect("buffer matches shape")
}

pub fn load_png(path: &Path, desc: &BackendDescriptor) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    preprocess(&img.to_rgb8(), desc)
}

pub fn save_png(path: &Path, x: &ImageTensor, prep: &Preprocessing) -> Result<()> {
    to_rgb8(x, prep).save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn desc_with(shift: f64, scale: f64, res: usize) -> BackendDescriptor {
        BackendDescriptor {
            shift: [shift; 3],
            scale: [scale; 3],
            resolution: res,
            ..BackendDescriptor::toy()
        }
    }

    #[test]
    fn red_pixel_luma() {
        let x = ImageTensor::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let g = grayscale(&x);
        for v in g.as_slice() {
            assert_abs_diff_eq!(*v, 0.299, epsilon = 1e-15);
        }
    }

    #[test]
    fn achromatic_is_fixed_point() {
        let x = ImageTensor::new(1, 2, vec![0.3, 0.3, 0.3, 0.77, 0.77, 0.77]).unwrap();
        assert_eq!(grayscale(&x), x);
        // dyadic constants keep the raw/model mapping exact
        let prep = Preprocessing {
            shift: [0.5, 0.25, 0.125],
            scale: [0.5, 0.25, 2.0],
        };
        let y = ImageTensor::new(1, 1, (0..3).map(|c| prep.to_model(0.75, c)).collect()).unwrap();
        assert_ne!(y.as_slice()[0], y.as_slice()[1]);
        assert_eq!(grayscale_model(&y, &prep), y);
    }

    #[test]
    fn preprocess_maps_values() {
        let zero = RgbImage::new(2, 2);
        let t = preprocess(&zero, &desc_with(0.0, 1.0, 2)).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));

        let white = RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]));
        let t = preprocess(&white, &desc_with(0.0, 1.0, 2)).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 1.0));

        let mid = RgbImage::from_pixel(2, 2, image::Rgb([128, 128, 128]));
        let t = preprocess(&mid, &desc_with(0.5, 0.25, 2)).unwrap();
        let expected = (128.0 / 255.0 - 0.5) / 0.25;
        assert_abs_diff_eq!(t.as_slice()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(t.as_slice()[0], 0.00784, epsilon = 1e-5);
    }

    #[test]
    fn preprocess_resizes() {
        let img = RgbImage::from_pixel(16, 12, image::Rgb([10, 20, 30]));
        let t = preprocess(&img, &desc_with(0.0, 1.0, 8)).unwrap();
        assert_eq!((t.height(), t.width()), (8, 8));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let x = ImageTensor::new(1, 2, vec![0.0, 0.5, 1.0, 1.7, -0.3, 0.25]).unwrap();
        save_png(&path, &x, &Preprocessing::IDENTITY).unwrap();
        // 1x2 on disk, 2x2 backend: loading resizes
        let back = load_png(&path, &desc_with(0.0, 1.0, 2)).unwrap();
        assert_eq!((back.height(), back.width()), (2, 2));
        let raw = image::open(&path).unwrap().to_rgb8();
        assert_eq!(raw.as_raw(), &vec![0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn undecodable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(load_png(&path, &BackendDescriptor::toy()).is_err());
        assert!(matches!(
            load_png(&dir.path().join("missing.png"), &BackendDescriptor::toy()),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn grayscale_is_idempotent_and_equalizing(v in prop::collection::vec(-0.5f64..1.5, 48)) {
            let x = ImageTensor::new(4, 4, v).unwrap();
            let g = grayscale(&x);
            prop_assert_eq!(&grayscale(&g), &g);
            for px in g.as_slice().chunks_exact(3) {
                prop_assert!(px[0] == px[1] && px[1] == px[2]);
            }
            prop_assert_eq!(grayscale_model(&x, &Preprocessing::IDENTITY), g);
        }
    }
}
