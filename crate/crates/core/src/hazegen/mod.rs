//! Synthetic haze via the atmospheric scattering model.
//!
//! A clean image `J` seen through homogeneous haze with scattering
//! coefficient `beta`, relative depth `D` and atmospheric light `A` becomes
//! `I = J * T + A * (1 - T)` with transmission `T = exp(-beta * D)`.

mod dataset;
mod io;

pub use dataset::{
    make_dataset, procedural_scene, write_procedural_scenes, DatasetConfig, DepthStyle, Manifest,
    ManifestEntry, Split, MANIFEST_FILE,
};
pub use io::{load_depth_png, load_image, save_depth_png, save_image};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

/// Relative scene depth, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return shape_err(format!(
                "depth map: {} values for {height}x{width}",
                values.len()
            ));
        }
        Ok(DepthMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DepthMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Mean of `exp(-beta * D)` over pixels.
    pub fn mean_transmission(&self, beta: f64) -> f64 {
        self.values.iter().map(|d| (-beta * d).exp()).sum::<f64>() / self.values.len() as f64
    }
}

/// How a depth map is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthKind {
    /// Rises linearly from the top row to the bottom row.
    LinearRamp,
    /// Rises with distance from the image centre.
    Radial,
    /// A 16-bit grayscale PNG, rescaled to the requested range.
    FromFile(PathBuf),
}

fn check_range(d_min: f64, d_max: f64) -> Result<()> {
    if !(d_min >= 0.0) || !(d_min < d_max) || !d_max.is_finite() {
        return Err(Error::Param(format!(
            "depth range needs 0 <= d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    Ok(())
}

pub fn depth_map(
    kind: &DepthKind,
    height: usize,
    width: usize,
    d_min: f64,
    d_max: f64,
) -> Result<DepthMap> {
    check_range(d_min, d_max)?;
    if height == 0 || width == 0 {
        return Err(Error::Param(format!(
            "depth map dims must be positive, got {height}x{width}"
        )));
    }
    let span = d_max - d_min;
    let values = match kind {
        DepthKind::LinearRamp => {
            let denom = (height.max(2) - 1) as f64;
            (0..height * width)
                .map(|i| d_min + span * (i / width) as f64 / denom)
                .collect()
        }
        DepthKind::Radial => {
            let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
            let r_max = (cy * cy + cx * cx).sqrt().max(f64::MIN_POSITIVE);
            (0..height * width)
                .map(|i| {
                    let (y, x) = ((i / width) as f64, (i % width) as f64);
                    d_min + span * ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / r_max
                })
                .collect()
        }
        DepthKind::FromFile(path) => {
            let raw = load_depth_png(path)?;
            if raw.height != height || raw.width != width {
                return shape_err(format!(
                    "depth file {} is {}x{}, expected {height}x{width}",
                    path.display(),
                    raw.height,
                    raw.width
                ));
            }
            raw.values.into_iter().map(|v| d_min + span * v).collect()
        }
    };
    DepthMap::new(height, width, values)
}

/// Inputs to [`synthesize`].
#[derive(Debug, Clone, PartialEq)]
pub struct HazeScene {
    /// Clean image `(1, C, H, W)` in [0, 1].
    pub clean: Tensor<f64>,
    pub depth: DepthMap,
    pub beta: f64,
    /// Atmospheric light: one value broadcast over channels, or one per channel.
    pub airlight: Vec<f64>,
}

fn validate_common(
    clean: &Tensor<f64>,
    depth: &DepthMap,
    airlight: &[f64],
) -> Result<(usize, usize)> {
    let (b, c, h, w) = clean.dims4()?;
    if b != 1 {
        return shape_err(format!("haze synthesis takes one image, got batch {b}"));
    }
    if (depth.height, depth.width) != (h, w) {
        return shape_err(format!(
            "depth {}x{} vs image {h}x{w}",
            depth.height, depth.width
        ));
    }
    if airlight.len() != 1 && airlight.len() != c {
        return shape_err(format!(
            "{} airlight values for {c} channels",
            airlight.len()
        ));
    }
    if let Some(a) = airlight.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Param(format!("airlight {a} outside [0, 1]")));
    }
    if let Some(d) = depth
        .values
        .iter()
        .find(|d| !(**d >= 0.0) || !d.is_finite())
    {
        return Err(Error::Param(format!(
            "depth {d} must be finite and nonnegative"
        )));
    }
    if let Some(v) = clean.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("clean value {v} outside [0, 1]")));
    }
    Ok((c, h * w))
}

fn synthesize_checked(
    clean: &Tensor<f64>,
    depth: &DepthMap,
    beta: f64,
    airlight: &[f64],
    c: usize,
    n: usize,
) -> Tensor<f64> {
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let a = airlight[if airlight.len() == 1 { 0 } else { i / n }];
            let t = (-beta * depth.values[i % n]).exp();
            let v = j * t + a * (1.0 - t);
            debug_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            v.clamp(0.0, 1.0)
        })
        .collect();
    debug_assert_eq!(clean.len(), c * n);
    Tensor::new(clean.shape(), data).expect("same shape as the clean image")
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Param(format!(
            "scattering coefficient must be finite and nonnegative, got {beta}"
        )));
    }
    Ok(())
}

/// Hazy image for `scene`.
pub fn synthesize(scene: &HazeScene) -> Result<Tensor<f64>> {
    check_beta(scene.beta)?;
    let (c, n) = validate_common(&scene.clean, &scene.depth, &scene.airlight)?;
    Ok(synthesize_checked(
        &scene.clean,
        &scene.depth,
        scene.beta,
        &scene.airlight,
        c,
        n,
    ))
}

/// One hazy image per coefficient, lightest first.
pub fn intensity_series(
    clean: &Tensor<f64>,
    depth: &DepthMap,
    airlight: &[f64],
    betas: &[f64],
) -> Result<Vec<Tensor<f64>>> {
    for &b in betas {
        check_beta(b)?;
    }
    if betas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Param(format!(
            "scattering coefficients must be strictly increasing: {betas:?}"
        )));
    }
    let (c, n) = validate_common(clean, depth, airlight)?;
    Ok(betas
        .iter()
        .map(|&b| synthesize_checked(clean, depth, b, airlight, c, n))
        .collect())
}

/// `count` log-spaced coefficients whose mean transmissions over `depth` run
/// from `t_light` down to `t_dense`.
pub fn beta_grid(depth: &DepthMap, count: usize, t_light: f64, t_dense: f64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::Param(format!(
            "beta grid needs at least 2 values, got {count}"
        )));
    }
    if !(0.0 < t_dense && t_dense < t_light && t_light < 1.0) {
        return Err(Error::Param(format!(
            "transmission targets need 0 < {t_dense} < {t_light} < 1"
        )));
    }
    let floor =
        depth.values.iter().filter(|&&d| d == 0.0).count() as f64 / depth.values.len() as f64;
    if floor >= t_dense {
        return Err(Error::Param(format!(
            "{:.1}% of the depth map is zero; mean transmission cannot reach {t_dense}",
            100.0 * floor
        )));
    }
    let solve = |target: f64| -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        while depth.mean_transmission(hi) > target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if depth.mean_transmission(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (b0, b1) = (solve(t_light).ln(), solve(t_dense).ln());
    Ok((0..count)
        .map(|i| (b0 + (b1 - b0) * i as f64 / (count - 1) as f64).exp())
        .collect())
}

/// Haze intensity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntensityBin {
    Light,
    Medium,
    Dense,
}

impl IntensityBin {
    pub fn as_str(self) -> &'static str {
        match self {
            IntensityBin::Light => "light",
            IntensityBin::Medium => "medium",
            IntensityBin::Dense => "dense",
        }
    }
}

impl fmt::Display for IntensityBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntensityBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(IntensityBin::Light),
            "medium" => Ok(IntensityBin::Medium),
            "dense" => Ok(IntensityBin::Dense),
            _ => Err(Error::Manifest(format!("unknown intensity bin {s:?}"))),
        }
    }
}

/// Result of [`bin_by_intensity`].
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub labels: Vec<IntensityBin>,
    /// The `(q1, q2)` quantiles that induced the labels.
    pub quantiles: (f64, f64),
    /// Lowest score in the medium and dense bins (`None` when a bin is empty).
    pub cut_scores: (Option<f64>, Option<f64>),
}

impl Binning {
    /// Sizes of the light, medium and dense bins.
    pub fn counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for l in &self.labels {
            out[*l as usize] += 1;
        }
        out
    }
}

/// Splits samples into light/medium/dense by rank of `scores` (higher means
/// denser haze). Ranks are taken after a stable sort, so equal scores keep
/// index order. The lowest `round(q1 * n)` ranks are light and ranks from
/// `round(q2 * n)` on are dense.
pub fn bin_by_intensity(scores: &[f64], quantiles: (f64, f64)) -> Result<Binning> {
    let (q1, q2) = quantiles;
    if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
        return Err(Error::Param(format!(
            "quantiles need 0 < q1 < q2 < 1, got ({q1}, {q2})"
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Param(format!("intensity score {s} is not finite")));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let light_end = (q1 * n as f64).round() as usize;
    let dense_start = ((q2 * n as f64).round() as usize).max(light_end);
    let mut labels = vec![IntensityBin::Medium; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < light_end {
            labels[i] = IntensityBin::Light;
        } else if rank >= dense_start {
            labels[i] = IntensityBin::Dense;
        }
    }
    let cut = |rank: usize| (rank < n).then(|| scores[order[rank]]);
    Ok(Binning {
        labels,
        quantiles,
        cut_scores: (cut(light_end), cut(dense_start)),
    })
}
