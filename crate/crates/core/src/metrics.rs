//! Image quality metrics and the Charbonnier training objective.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Backward, Graph, Scalar, Tensor, Var};

/// Default Charbonnier epsilon.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn congruent<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Param(format!(
            "charbonnier: eps must be positive, got {eps}"
        )));
    }
    Ok(())
}

/// `sqrt(d^2 + eps^2) - eps`, evaluated without cancellation.
fn excess<T: Scalar>(d: T, eps: T) -> T {
    let d2 = d * d;
    d2 / ((d2 + eps * eps).sqrt() + eps)
}

/// Mean over elements of `sqrt(d^2 + eps^2)` with `d = clean - restored`.
///
/// Computed as `eps + mean(sqrt(d^2 + eps^2) - eps)` so identical inputs give
/// exactly `eps`.
pub fn charbonnier_value<T: Scalar>(
    clean: &Tensor<T>,
    restored: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    congruent("charbonnier", clean, restored)?;
    check_eps(eps)?;
    if clean.is_empty() {
        return shape_err("charbonnier: empty input");
    }
    let e = T::of(eps);
    let total = clean
        .data()
        .iter()
        .zip(restored.data())
        .fold(T::zero(), |acc, (&c, &r)| acc + excess(c - r, e));
    Ok((e + total / T::of(clean.len() as f64)).as_f64())
}

struct CharbonnierRule<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for CharbonnierRule<T> {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(
        &self,
        inputs: &[Var<T>],
        _: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = grad_out.data()[0] / T::of(inputs[0].value().len() as f64);
        let eps2 = self.eps * self.eps;
        let gc: Vec<T> = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(&c, &r)| {
                let d = c - r;
                scale * d / (d * d + eps2).sqrt()
            })
            .collect();
        let gr = gc.iter().map(|&v| -v).collect();
        Ok(vec![
            Some(Tensor::new(inputs[0].shape(), gc)?),
            Some(Tensor::new(inputs[1].shape(), gr)?),
        ])
    }
}

/// Differentiable [`charbonnier_value`].
pub fn charbonnier<T: Scalar>(
    g: &Graph<T>,
    clean: &Var<T>,
    restored: &Var<T>,
    eps: f64,
) -> Result<Var<T>> {
    let value = charbonnier_value(clean.value(), restored.value(), eps)?;
    g.custom(
        Box::new(CharbonnierRule { eps: T::of(eps) }),
        vec![clean.clone(), restored.clone()],
        Tensor::scalar(T::of(value)),
    )
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    congruent("psnr", a, b)?;
    if a.is_empty() {
        return shape_err("psnr: empty input");
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// How colour images are reduced before SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsimMode {
    /// Compare the per-pixel channel mean.
    #[default]
    Luma,
    /// Compare each channel separately and average.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
    pub mode: SsimMode,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            peak: 1.0,
            mode: SsimMode::Luma,
        }
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64], peak: f64) -> f64 {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// Gaussian-windowed SSIM with default options (11 taps, sigma 1.5, luma).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, &SsimOptions::default())
}

/// SSIM of two `(B, C, H, W)` images, averaged over batch items (and channels
/// in [`SsimMode::PerChannel`]).
pub fn ssim_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, opts: &SsimOptions) -> Result<f64> {
    congruent("ssim", a, b)?;
    let (batch, ch, h, w) = a.dims4()?;
    if opts.window == 0 || opts.window.is_multiple_of(2) || !(opts.sigma > 0.0) {
        return Err(Error::Param(format!(
            "ssim: window {} / sigma {} invalid",
            opts.window, opts.sigma
        )));
    }
    if h < opts.window || w < opts.window {
        return Err(Error::Param(format!(
            "ssim: {h}x{w} image is smaller than the {} window",
            opts.window
        )));
    }
    let taps = gaussian_window(opts.window, opts.sigma);
    let plane = |t: &Tensor<T>, bi: usize, ci: usize| -> Vec<f64> {
        t.data()[(bi * ch + ci) * h * w..][..h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };
    let luma = |t: &Tensor<T>, bi: usize| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for ci in 0..ch {
            out.iter_mut()
                .zip(plane(t, bi, ci))
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= ch as f64);
        out
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        match opts.mode {
            SsimMode::Luma => {
                total += ssim_plane(&luma(a, bi), &luma(b, bi), h, w, &taps, opts.peak);
                count += 1;
            }
            SsimMode::PerChannel => {
                for ci in 0..ch {
                    total +=
                        ssim_plane(&plane(a, bi, ci), &plane(b, bi, ci), h, w, &taps, opts.peak);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Metrics for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub charbonnier: f64,
}

impl ImageMetrics {
    pub fn compute<T: Scalar>(
        image_id: impl Into<String>,
        clean: &Tensor<T>,
        restored: &Tensor<T>,
    ) -> Result<Self> {
        Ok(ImageMetrics {
            image_id: image_id.into(),
            psnr: psnr(clean, restored, 1.0)?,
            ssim: ssim(clean, restored)?,
            charbonnier: charbonnier_value(clean, restored, CHARBONNIER_EPS)?,
        })
    }
}

/// Dataset-level averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMeans {
    pub psnr: f64,
    pub ssim: f64,
    pub charbonnier: f64,
}

/// Per-image metrics plus optional means for an unrestored baseline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub baseline: Option<MetricMeans>,
}

impl MetricReport {
    pub fn means(&self) -> MetricMeans {
        let n = self.images.len().max(1) as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| self.images.iter().map(f).sum::<f64>() / n;
        MetricMeans {
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
            charbonnier: sum(|m| m.charbonnier),
        }
    }

    /// One `image_id, psnr, ssim, charbonnier` line per image, then a `mean`
    /// row and, if present, a `baseline_mean` row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# image_id, psnr, ssim, charbonnier\n");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{}, {:.6}, {:.6}, {:.8}",
                m.image_id, m.psnr, m.ssim, m.charbonnier
            );
        }
        let mut row = |id: &str, m: MetricMeans| {
            let _ = writeln!(
                out,
                "{id}, {:.6}, {:.6}, {:.8}",
                m.psnr, m.ssim, m.charbonnier
            );
        };
        row("mean", self.means());
        if let Some(b) = self.baseline {
            row("baseline_mean", b);
        }
        out
    }

    /// Parses [`MetricReport::to_text`] output. Summary rows are recomputed
    /// from the image rows except for `baseline_mean`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut report = MetricReport::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Manifest(format!("report line {}: {line:?}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let (psnr, ssim, charbonnier) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
            match fields[0] {
                "mean" => {}
                "baseline_mean" => {
                    report.baseline = Some(MetricMeans {
                        psnr,
                        ssim,
                        charbonnier,
                    })
                }
                id => report.images.push(ImageMetrics {
                    image_id: id.to_string(),
                    psnr,
                    ssim,
                    charbonnier,
                }),
            }
        }
        Ok(report)
    }
}
