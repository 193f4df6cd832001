//! Image and depth map files.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageBuffer, ImageEncoder, Luma, Rgb};

use crate::error::{Error, Result};
use crate::hazegen::DepthMap;
use crate::numcore::{Scalar, Tensor};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

/// Reads a PNG or PPM image as `(1, 3, H, W)` in [0, 1]. Grayscale images are
/// replicated across channels.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<T> = match img {
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            (0..3)
                .flat_map(|c| {
                    rgb.pixels()
                        .map(move |p| T::of(p.0[c] as f64 / 65535.0))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        _ => {
            let rgb = img.to_rgb8();
            (0..3)
                .flat_map(|c| {
                    rgb.pixels()
                        .map(move |p| T::of(p.0[c] as f64 / 255.0))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };
    Tensor::new(&[1, 3, h, w], data)
}

/// Writes a `(1, C, H, W)` image with C in {1, 3} as 8-bit PNG, or as binary
/// PPM when the extension is `ppm`. Values are clamped to [0, 1].
pub fn save_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || (c != 1 && c != 3) {
        return Err(Error::Shape(format!(
            "cannot save a {b}x{c} image, need one image with 1 or 3 channels"
        )));
    }
    let n = h * w;
    let px = |ch: usize, i: usize| {
        (image.data()[ch * n + i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let buf: Vec<u8> = (0..n)
        .flat_map(|i| (0..3).map(move |k| px(if c == 1 { 0 } else { k }, i)))
        .collect();
    let rgb: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from the tensor");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(
                rgb.as_raw(),
                w as u32,
                h as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| image_err(path, e))
    } else {
        rgb.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_err(path, e))
    }
}

/// Writes depth values in `[d_min, d_max]` as a 16-bit grayscale PNG.
pub fn save_depth_png(path: &Path, depth: &DepthMap, d_min: f64, d_max: f64) -> Result<()> {
    super::check_range(d_min, d_max)?;
    let span = d_max - d_min;
    let buf: Vec<u16> = depth
        .values
        .iter()
        .map(|&d| (((d - d_min) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, buf)
            .expect("buffer sized from the map");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Reads a grayscale PNG as a depth map with values in [0, 1].
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = img.to_luma16();
    let values = gray.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    DepthMap::new(gray.height() as usize, gray.width() as usize, values)
}
