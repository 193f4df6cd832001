//! Paired hazy/clean dataset generation and the manifest format.
//!
//! The manifest is plain text, one pair per line:
//!
//! ```text
//! scene_id, pair_path_clean, pair_path_hazy, beta, bin, split
//! ```
//!
//! Paths are relative to the manifest's directory. Lines starting with `#`
//! are comments; `# error: <path>: <message>` records a scene that could not
//! be processed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    beta_grid, bin_by_intensity, depth_map, intensity_series, load_image, save_depth_png,
    save_image, DepthKind, IntensityBin,
};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::prior::{dark_channel_density, DarkChannelEstimator};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Depth maps used for generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStyle {
    Ramp,
    Radial,
    /// Ramp or radial, drawn per scene.
    Mixed,
}

/// Settings for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub intensities: usize,
    pub depth: DepthStyle,
    pub d_min: f64,
    pub d_max: f64,
    /// Mean transmission at the lightest and densest intensity.
    pub transmission: (f64, f64),
    /// Range of the per-scene atmospheric light.
    pub airlight: (f64, f64),
    /// Fixed per-channel atmospheric light; overrides `airlight` when set.
    pub airlight_rgb: Option<[f64; 3]>,
    pub quantiles: (f64, f64),
    /// Fraction of scenes held out for testing.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            intensities: 8,
            depth: DepthStyle::Mixed,
            d_min: 0.2,
            d_max: 2.0,
            transmission: (0.95, 0.15),
            airlight: (0.7, 1.0),
            airlight_rgb: None,
            quantiles: (0.183, 0.817),
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.intensities < 2 {
            return bad(format!(
                "need at least 2 intensities, got {}",
                self.intensities
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            ));
        }
        let (a0, a1) = self.airlight;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!(
                "airlight range ({a0}, {a1}) must lie within [0, 1]"
            ));
        }
        super::check_range(self.d_min, self.d_max)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub clean: PathBuf,
    pub hazy: PathBuf,
    pub beta: f64,
    pub bin: IntensityBin,
    pub split: Split,
}

/// Pairs plus per-file errors. `root` is the directory paths are relative to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<(String, String)>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut out =
            String::from("# scene_id, pair_path_clean, pair_path_hazy, beta, bin, split\n");
        for (path, msg) in &self.errors {
            out.push_str(&format!("# error: {path}: {}\n", msg.replace('\n', " ")));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{}, {}, {}, {:.17e}, {}, {}\n",
                e.scene_id,
                e.clean.display(),
                e.hazy.display(),
                e.beta,
                e.bin,
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut m = Manifest {
            root: root.to_path_buf(),
            ..Default::default()
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# error:") {
                let (path, msg) = rest.trim().split_once(": ").unwrap_or((rest.trim(), ""));
                m.errors.push((path.to_string(), msg.to_string()));
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad =
                |what: &str| Error::Manifest(format!("line {}: {what}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            m.entries.push(ManifestEntry {
                scene_id: fields[0].to_string(),
                clean: PathBuf::from(fields[1]),
                hazy: PathBuf::from(fields[2]),
                beta: fields[3].parse().map_err(|_| bad("bad beta"))?,
                bin: fields[4].parse().map_err(|_| bad("bad bin"))?,
                split: fields[5].parse().map_err(|_| bad("bad split"))?,
            });
        }
        Ok(m)
    }

    /// Reads `path`, or `path/manifest.txt` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        Self::parse(&text, file.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// FNV-1a, used to derive a per-scene RNG stream from the scene id.
fn stream_of(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn scene_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_of(id));
    rng
}

fn sanitize(stem: &str) -> String {
    let s: String = stem
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "scene".into()
    } else {
        s
    }
}

/// A textured clean image `(1, 3, H, W)` with every channel in [0.05, 0.65],
/// so any atmospheric light of at least 0.7 brightens every pixel as haze
/// thickens.
pub fn procedural_scene(rng: &mut impl Rng, height: usize, width: usize) -> Tensor<f64> {
    let mut data = vec![0.0; 3 * height * width];
    for c in 0..3 {
        let base: f64 = rng.random_range(0.15..0.45);
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.08),
                )
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.0..height as f64),
                    rng.random_range(0.0..width as f64),
                    rng.random_range(2.0..(height.min(width) as f64 / 3.0).max(2.5)),
                    rng.random_range(-0.15..0.15),
                )
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = base;
                for &(fy, fx, phase, amp) in &waves {
                    v += amp * (fy * yf + fx * xf + phase).sin();
                }
                for &(cy, cx, r, amp) in &blobs {
                    v += amp * (-((yf - cy).powi(2) + (xf - cx).powi(2)) / (2.0 * r * r)).exp();
                }
                data[(c * height + y) * width + x] = v.clamp(0.05, 0.65);
            }
        }
    }
    Tensor::new(&[1, 3, height, width], data).expect("sized above")
}

/// Writes `count` procedural scenes as `scene_NNN.png` into `dir`.
pub fn write_procedural_scenes(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let id = format!("scene_{i:03}");
            let img = procedural_scene(&mut scene_rng(seed, &id), height, width);
            let path = dir.join(format!("{id}.png"));
            save_image(&path, &img)?;
            Ok(path)
        })
        .collect()
}

struct SceneOutput {
    id: String,
    clean: PathBuf,
    pairs: Vec<(PathBuf, f64, f64)>,
}

fn process_scene(
    path: &Path,
    id: &str,
    out_dir: &Path,
    cfg: &DatasetConfig,
) -> Result<SceneOutput> {
    let clean: Tensor<f64> = load_image(path)?;
    let (_, _, h, w) = clean.dims4()?;
    let mut rng = scene_rng(cfg.seed, id);
    let style = match cfg.depth {
        DepthStyle::Mixed if rng.random_bool(0.5) => DepthStyle::Ramp,
        DepthStyle::Mixed => DepthStyle::Radial,
        s => s,
    };
    let kind = if style == DepthStyle::Ramp {
        DepthKind::LinearRamp
    } else {
        DepthKind::Radial
    };
    let depth = depth_map(&kind, h, w, cfg.d_min, cfg.d_max)?;
    let airlight = match cfg.airlight_rgb {
        Some(rgb) => rgb.to_vec(),
        None if cfg.airlight.0 == cfg.airlight.1 => vec![cfg.airlight.0],
        None => vec![rng.random_range(cfg.airlight.0..=cfg.airlight.1)],
    };
    let betas = beta_grid(
        &depth,
        cfg.intensities,
        cfg.transmission.0,
        cfg.transmission.1,
    )?;
    let series = intensity_series(&clean, &depth, &airlight, &betas)?;

    let rel = PathBuf::from("scenes").join(id);
    std::fs::create_dir_all(out_dir.join(&rel))?;
    let clean_rel = rel.join("clean.png");
    save_image(&out_dir.join(&clean_rel), &clean)?;
    save_depth_png(
        &out_dir.join(rel.join("depth.png")),
        &depth,
        cfg.d_min,
        cfg.d_max,
    )?;
    let mut pairs = Vec::with_capacity(series.len());
    for (k, (hazy, beta)) in series.iter().zip(&betas).enumerate() {
        let hazy_rel = rel.join(format!("hazy_{k}.png"));
        save_image(&out_dir.join(&hazy_rel), hazy)?;
        pairs.push((
            hazy_rel,
            *beta,
            dark_channel_density(hazy, DarkChannelEstimator::DEFAULT_WINDOW)?,
        ));
    }
    Ok(SceneOutput {
        id: id.to_string(),
        clean: clean_rel,
        pairs,
    })
}

/// Builds a paired dataset from every file in `clean_dir` and writes it, plus
/// `manifest.txt`, under `out_dir`. Files that fail are recorded as errors in
/// the manifest and skipped.
pub fn make_dataset(clean_dir: &Path, out_dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(clean_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    std::fs::create_dir_all(out_dir)?;

    let mut manifest = Manifest {
        root: out_dir.to_path_buf(),
        ..Default::default()
    };
    let mut scenes = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for path in &files {
        let stem = sanitize(
            &path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut id = stem.clone();
        let mut k = 1;
        while !seen.insert(id.clone()) {
            id = format!("{stem}_{k}");
            k += 1;
        }
        match process_scene(path, &id, out_dir, cfg) {
            Ok(s) => scenes.push(s),
            Err(e) => manifest
                .errors
                .push((path.display().to_string(), e.to_string())),
        }
    }

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut scene_rng(cfg.seed, "\u{0}split"));
    let n_test = (cfg.test_fraction * scenes.len() as f64).round() as usize;
    let mut split = vec![Split::Train; scenes.len()];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }

    let scores: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.pairs.iter().map(|p| p.2))
        .collect();
    let labels = if scores.is_empty() {
        Vec::new()
    } else {
        bin_by_intensity(&scores, cfg.quantiles)?.labels
    };
    let mut label = labels.into_iter();
    for (s, sp) in scenes.iter().zip(&split) {
        for (hazy, beta, _) in &s.pairs {
            manifest.entries.push(ManifestEntry {
                scene_id: s.id.clone(),
                clean: s.clean.clone(),
                hazy: hazy.clone(),
                beta: *beta,
                bin: label.next().expect("one label per pair"),
                split: *sp,
            });
        }
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
