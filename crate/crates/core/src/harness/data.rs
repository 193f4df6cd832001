//! In-memory training pairs and cropping.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hazegen::{load_image, Manifest, Split};
use crate::numcore::{Scalar, Tensor};

/// A decoded hazy/clean pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T: Scalar> {
    /// Hazy image path as written in the manifest.
    pub id: String,
    pub scene_id: String,
    pub beta: f64,
    pub hazy: Tensor<T>,
    pub clean: Tensor<T>,
}

/// Decodes every pair of `split`, in manifest order.
pub fn load_pairs<T: Scalar>(manifest: &Manifest, split: Split) -> Result<Vec<Pair<T>>> {
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let hazy: Tensor<T> = load_image(&manifest.resolve(&e.hazy))?;
        let clean: Tensor<T> = load_image(&manifest.resolve(&e.clean))?;
        if hazy.shape() != clean.shape() {
            return Err(Error::Shape(format!(
                "{}: hazy {:?} vs clean {:?}",
                e.hazy.display(),
                hazy.shape(),
                clean.shape()
            )));
        }
        out.push(Pair {
            id: e.hazy.display().to_string(),
            scene_id: e.scene_id.clone(),
            beta: e.beta,
            hazy,
            clean,
        });
    }
    Ok(out)
}

/// Top-left corner of a `size x size` window drawn uniformly over all valid
/// offsets of a `height x width` image.
pub fn crop_window(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if size == 0 || size > height || size > width {
        return Err(Error::Param(format!(
            "cannot crop {size}x{size} from a {height}x{width} image"
        )));
    }
    Ok((
        rng.random_range(0..=height - size),
        rng.random_range(0..=width - size),
    ))
}

/// Crops `(B, C, H, W)` to the window at `(y, x)`.
pub fn crop<T: Scalar>(
    t: &Tensor<T>,
    y: usize,
    x: usize,
    size_h: usize,
    size_w: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if y + size_h > h || x + size_w > w {
        return Err(Error::Param(format!(
            "window {size_h}x{size_w} at ({y}, {x}) exceeds {h}x{w}"
        )));
    }
    let data = t.data();
    let mut out = Vec::with_capacity(b * c * size_h * size_w);
    for plane in 0..b * c {
        for row in y..y + size_h {
            let start = (plane * h + row) * w + x;
            out.extend_from_slice(&data[start..start + size_w]);
        }
    }
    Tensor::new(&[b, c, size_h, size_w], out)
}

/// The same random `size x size` window cut from both images.
pub fn random_crop_pair<T: Scalar>(
    hazy: &Tensor<T>,
    clean: &Tensor<T>,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if hazy.shape() != clean.shape() {
        return Err(Error::Shape(format!(
            "crop pair: hazy {:?} vs clean {:?}",
            hazy.shape(),
            clean.shape()
        )));
    }
    let (_, _, h, w) = hazy.dims4()?;
    let (y, x) = crop_window(h, w, size, rng)?;
    Ok((
        crop(hazy, y, x, size, size)?,
        crop(clean, y, x, size, size)?,
    ))
}
