//! Full-resolution evaluation and plain-text tables for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::data::Pair;
use crate::harness::train::{moving_average, LOSS_AVERAGE_WINDOW};
use crate::hazegen::Manifest;
use crate::metrics::{ImageMetrics, MetricMeans, MetricReport};
use crate::model::Network;
use crate::numcore::Scalar;

/// Dehazes every pair at full resolution and scores it against the clean
/// image. The baseline row scores the hazy input itself.
pub fn evaluate<T: Scalar>(net: &Network<T>, pairs: &[Pair<T>]) -> Result<MetricReport> {
    let mut images = Vec::with_capacity(pairs.len());
    let mut baseline = Vec::with_capacity(pairs.len());
    for p in pairs {
        let restored = net.dehaze(&p.hazy)?;
        images.push(ImageMetrics::compute(p.id.clone(), &p.clean, &restored)?);
        baseline.push(ImageMetrics::compute(p.id.clone(), &p.clean, &p.hazy)?);
    }
    let base = MetricReport {
        images: baseline,
        baseline: None,
    };
    Ok(MetricReport {
        images,
        baseline: (!pairs.is_empty()).then(|| base.means()),
    })
}

/// `step, loss, moving_average` columns; the average column starts once a
/// full window is available.
pub fn loss_curve_table(log: &[(u64, f64, f64)]) -> String {
    let losses: Vec<f64> = log.iter().map(|r| r.2).collect();
    let avg = moving_average(&losses, LOSS_AVERAGE_WINDOW);
    let mut out = String::from("# step loss moving_average\n");
    for (i, (step, _, loss)) in log.iter().enumerate() {
        match (i + 1).checked_sub(LOSS_AVERAGE_WINDOW) {
            Some(k) => writeln!(out, "{step} {loss:.8} {:.8}", avg[k]),
            None => writeln!(out, "{step} {loss:.8} nan"),
        }
        .expect("writing to a String");
    }
    out
}

/// Mean PSNR of the hazy input and the restored output per intensity step,
/// where step `k` is a pair's rank by `beta` within its scene.
pub fn psnr_by_intensity_table(
    manifest: &Manifest,
    restored: &MetricReport,
    hazy: &MetricReport,
) -> Result<String> {
    let mut rank: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_scene: BTreeMap<&str, Vec<(f64, String)>> = BTreeMap::new();
    for e in &manifest.entries {
        by_scene
            .entry(&e.scene_id)
            .or_default()
            .push((e.beta, e.hazy.display().to_string()));
    }
    for list in by_scene.values_mut() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (k, (_, id)) in list.iter().enumerate() {
            rank.insert(id.clone(), k);
        }
    }
    let beta_of: BTreeMap<String, f64> = manifest
        .entries
        .iter()
        .map(|e| (e.hazy.display().to_string(), e.beta))
        .collect();
    let hazy_psnr: BTreeMap<&str, f64> = hazy
        .images
        .iter()
        .map(|m| (m.image_id.as_str(), m.psnr))
        .collect();

    // step -> (beta sum, hazy sum, restored sum, count)
    let mut rows: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
    for m in &restored.images {
        let k = *rank
            .get(&m.image_id)
            .ok_or_else(|| Error::Manifest(format!("{} is not in the manifest", m.image_id)))?;
        let h = *hazy_psnr
            .get(m.image_id.as_str())
            .ok_or_else(|| Error::Manifest(format!("no hazy score for {}", m.image_id)))?;
        let r = rows.entry(k).or_default();
        r.0 += beta_of[&m.image_id];
        r.1 += h;
        r.2 += m.psnr;
        r.3 += 1;
    }
    let mut out = String::from("# intensity mean_beta hazy_psnr restored_psnr count\n");
    for (k, (b, h, r, n)) in rows {
        let n_f = n as f64;
        writeln!(out, "{k} {:.6} {:.4} {:.4} {n}", b / n_f, h / n_f, r / n_f)
            .expect("writing to a String");
    }
    Ok(out)
}

/// Per-image metrics of the hazy inputs, for [`psnr_by_intensity_table`].
pub fn hazy_report<T: Scalar>(pairs: &[Pair<T>]) -> Result<MetricReport> {
    let images = pairs
        .iter()
        .map(|p| ImageMetrics::compute(p.id.clone(), &p.clean, &p.hazy))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        images,
        baseline: None,
    })
}

/// Summary line for a report.
pub fn summary(report: &MetricReport) -> String {
    let MetricMeans { psnr, ssim, .. } = report.means();
    let mut s = format!(
        "{} images  psnr {psnr:.3} dB  ssim {ssim:.4}",
        report.images.len()
    );
    if let Some(b) = report.baseline {
        write!(
            s,
            "  (hazy input: psnr {:.3} dB  ssim {:.4})",
            b.psnr, b.ssim
        )
        .expect("writing to a String");
    }
    s
}
