//! Degradation prior over haze-intensity rating levels.
//!
//! An [`IntensityEstimator`] scores an image with a logit vector over a token
//! vocabulary of length `L`. A [`RatingLevelSet`] maps each of its `N` levels
//! to one vocabulary position, and [`close_set_prior`] takes the softmax over
//! just those positions. The built-in [`DarkChannelEstimator`] is a
//! deterministic stand-in for a multimodal quality model; it uses an identity
//! mapping (`L == N`).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// Default levels, ordered from clearest to densest haze. The order is what the
/// dark-channel ramp uses to place each level along the density axis.
pub const DEFAULT_LEVELS: [&str; 14] = [
    "clear",
    "excellent",
    "good",
    "slight",
    "thin",
    "mist",
    "fair",
    "hazy",
    "poor",
    "moderate",
    "fog",
    "thick",
    "bad",
    "dense",
];

/// Logit assigned to vocabulary positions that no level maps to.
pub const UNMAPPED_LOGIT: f64 = -1.0e9;

/// Logit drop per unit of dark-channel distance from a level's anchor.
pub const RAMP_SLOPE: f64 = 12.0;

/// Ordered rating levels and their vocabulary positions (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingLevelSet {
    levels: Vec<String>,
    token_index: Vec<usize>,
    vocab_len: usize,
}

impl RatingLevelSet {
    pub fn new(entries: Vec<(String, usize)>, vocab_len: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config(
                "a rating level set needs at least one level".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (name, idx) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate rating level {name:?}")));
            }
            if *idx < 1 || *idx > vocab_len {
                return Err(Error::Mapping(format!(
                    "level {name:?} maps to token {idx}, outside [1, {vocab_len}]"
                )));
            }
        }
        let (levels, token_index) = entries.into_iter().unzip();
        Ok(RatingLevelSet {
            levels,
            token_index,
            vocab_len,
        })
    }

    /// Identity-mapped set over `names`.
    pub fn identity<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_ref().to_string(), i + 1))
            .collect();
        Self::new(entries, names.len())
    }

    /// `n` levels spread evenly over [`DEFAULT_LEVELS`], keeping both ends when
    /// `n > 1`. `graded(14)` is the full default set.
    pub fn graded(n: usize) -> Result<Self> {
        let total = DEFAULT_LEVELS.len();
        if n == 0 || n > total {
            return Err(Error::Config(format!(
                "graded level set size must be in 1..={total}, got {n}"
            )));
        }
        let names: Vec<&str> = if n == 1 {
            vec![DEFAULT_LEVELS[0]]
        } else {
            (0..n)
                .map(|i| DEFAULT_LEVELS[(i * (total - 1) + (n - 1) / 2) / (n - 1)])
                .collect()
        };
        Self::identity(&names)
    }

    /// Parses `level_name = token_index` lines; `#` starts a comment. The
    /// vocabulary length is the largest index present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, idx) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `level = index`", lineno + 1))
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "line {}: bad token index {:?}",
                    lineno + 1,
                    idx.trim()
                ))
            })?;
            entries.push((name.trim().to_string(), idx));
        }
        let vocab_len = entries.iter().map(|(_, i)| *i).max().unwrap_or(0);
        Self::new(entries, vocab_len)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (name, idx) in self.levels.iter().zip(&self.token_index) {
            let _ = writeln!(out, "{name} = {idx}");
        }
        out
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    /// 1-based vocabulary position of each level.
    pub fn token_index(&self) -> &[usize] {
        &self.token_index
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }
}

impl Default for RatingLevelSet {
    fn default() -> Self {
        Self::identity(&DEFAULT_LEVELS).expect("default levels are valid")
    }
}

/// Probability of each rating level.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationPrior {
    probs: Vec<f64>,
}

impl DegradationPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Param("empty prior".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Param(format!(
                "prior entries must be finite and nonnegative: {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("prior sums to {s}, not 1")));
        }
        Ok(DegradationPrior { probs })
    }

    pub fn uniform(n: usize) -> Self {
        DegradationPrior {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[j] = 1.0;
        DegradationPrior { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax over the logits at the level set's mapped positions.
pub fn close_set_prior(logits: &[f64], levels: &RatingLevelSet) -> Result<DegradationPrior> {
    let mut mapped = Vec::with_capacity(levels.len());
    for (name, &idx) in levels.levels().iter().zip(levels.token_index()) {
        let v = *logits.get(idx.wrapping_sub(1)).ok_or_else(|| {
            Error::Mapping(format!(
                "level {name:?} maps to token {idx} but only {} logits were given",
                logits.len()
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("logit for level {name:?}")));
        }
        mapped.push(v);
    }
    let m = mapped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mapped.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    DegradationPrior::new(exps.into_iter().map(|e| e / z).collect())
}

/// Image-to-logits scorer whose output feeds [`close_set_prior`].
///
/// Implementations must be deterministic and return finite logits.
pub trait IntensityEstimator {
    /// Configuration string describing what is being asked of the scorer.
    fn query(&self) -> &str;

    fn levels(&self) -> &RatingLevelSet;

    /// Logits over the full vocabulary (length `levels().vocab_len()`).
    fn logits(&self, image: &Tensor<f64>) -> Result<Vec<f64>>;

    fn prior<T: Scalar>(&self, image: &Tensor<T>) -> Result<DegradationPrior>
    where
        Self: Sized,
    {
        let logits = self.logits(&image.cast())?;
        close_set_prior(&logits, self.levels())
    }
}

/// Haze scorer based on the mean dark channel.
#[derive(Debug, Clone)]
pub struct DarkChannelEstimator {
    levels: RatingLevelSet,
    window: usize,
}

impl DarkChannelEstimator {
    pub const DEFAULT_WINDOW: usize = 7;

    pub fn new(levels: RatingLevelSet, window: usize) -> Result<Self> {
        check_window(window)?;
        Ok(DarkChannelEstimator { levels, window })
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

impl IntensityEstimator for DarkChannelEstimator {
    fn query(&self) -> &str {
        "mean dark channel haze density"
    }

    fn levels(&self) -> &RatingLevelSet {
        &self.levels
    }

    fn logits(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        dark_channel_estimator(image, &self.levels, self.window)
    }
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Param(format!(
            "dark-channel window must be odd and >= 1, got {window}"
        )));
    }
    Ok(())
}

fn check_unit_range<T: Scalar>(image: &Tensor<T>) -> Result<()> {
    if let Some(v) = image
        .data()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::Range(format!("image value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Per-pixel dark channel of each batch item: the minimum over colour
/// channels, then a `window x window` minimum filter (truncated at borders).
/// Returns a `(B, 1, H, W)` tensor.
pub fn dark_channel<T: Scalar>(image: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    check_window(window)?;
    let (b, c, h, w) = image.dims4()?;
    let r = window / 2;
    let mut out = Vec::with_capacity(b * h * w);
    let mut rowmin = vec![T::zero(); h * w];
    for bi in 0..b {
        let mut m = vec![T::infinity(); h * w];
        for ci in 0..c {
            let plane = &image.data()[(bi * c + ci) * h * w..][..h * w];
            m.iter_mut().zip(plane).for_each(|(a, &v)| *a = a.min(v));
        }
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                rowmin[y * w + x] = m[y * w + lo..=y * w + hi]
                    .iter()
                    .copied()
                    .fold(T::infinity(), T::min);
            }
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                out.push(
                    (lo..=hi)
                        .map(|yy| rowmin[yy * w + x])
                        .fold(T::infinity(), T::min),
                );
            }
        }
    }
    Tensor::new(&[b, 1, h, w], out)
}

/// Mean dark channel over all pixels of all batch items, in [0, 1].
pub fn dark_channel_density<T: Scalar>(image: &Tensor<T>, window: usize) -> Result<f64> {
    check_unit_range(image)?;
    let dc = dark_channel(image, window)?;
    Ok(dc.data().iter().map(|v| v.as_f64()).sum::<f64>() / dc.len() as f64)
}

/// Anchor of level `i` of `n` along the density axis: `i / (n - 1)`.
pub fn level_anchor(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Logits for the mean dark-channel density `d` of `image`.
///
/// Level `i` of `N` receives `-RAMP_SLOPE * |d - i/(N-1)|`, a piecewise-linear
/// ramp peaking at the level's anchor; so `d = 0` favours the first (clearest)
/// level and `d = 1` the last (densest). Unmapped positions get
/// [`UNMAPPED_LOGIT`].
pub fn dark_channel_estimator<T: Scalar>(
    image: &Tensor<T>,
    levels: &RatingLevelSet,
    window: usize,
) -> Result<Vec<f64>> {
    let d = dark_channel_density(image, window)?;
    Ok(density_logits(d, levels))
}

pub fn density_logits(d: f64, levels: &RatingLevelSet) -> Vec<f64> {
    let n = levels.len();
    let mut logits = vec![UNMAPPED_LOGIT; levels.vocab_len()];
    for (i, &idx) in levels.token_index().iter().enumerate() {
        logits[idx - 1] = -RAMP_SLOPE * (d - level_anchor(i, n)).abs();
    }
    logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn levels_l10_n3() -> RatingLevelSet {
        RatingLevelSet::new(vec![("a".into(), 2), ("b".into(), 5), ("c".into(), 9)], 10).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform_prior() {
        let p = close_set_prior(&[0.3; 14], &RatingLevelSet::graded(5).unwrap()).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dominant_logit_wins() {
        let mut logits = vec![0.0; 5];
        logits[3] = 20.0;
        let p = close_set_prior(&logits, &RatingLevelSet::graded(5).unwrap()).unwrap();
        assert!(p.probs()[3] > 0.999);
    }

    #[test]
    fn hand_softmax_over_mapped_positions() {
        let mut logits = vec![7.0; 10];
        logits[1] = 0.0;
        logits[4] = 2f64.ln();
        logits[8] = 2f64.ln();
        let p = close_set_prior(&logits, &levels_l10_n3()).unwrap();
        let want = [0.2, 0.4, 0.4];
        for (a, b) in p.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_index_is_a_mapping_error() {
        assert!(matches!(
            close_set_prior(&[0.0; 5], &levels_l10_n3()),
            Err(Error::Mapping(_))
        ));
        assert!(matches!(
            RatingLevelSet::new(vec![("a".into(), 0)], 3),
            Err(Error::Mapping(_))
        ));
        assert!(RatingLevelSet::new(vec![("a".into(), 1), ("a".into(), 2)], 3).is_err());
    }

    #[test]
    fn default_set_has_fourteen_levels_including_itu_and_haze_terms() {
        let set = RatingLevelSet::default();
        assert_eq!(set.len(), 14);
        for name in [
            "bad",
            "poor",
            "fair",
            "good",
            "excellent",
            "clear",
            "fog",
            "mist",
        ] {
            assert!(set.levels().iter().any(|l| l == name), "{name}");
        }
        assert_eq!(set.vocab_len(), 14);
        assert_eq!(RatingLevelSet::graded(14).unwrap(), set);
        let two = RatingLevelSet::graded(2).unwrap();
        assert_eq!(two.levels(), &["clear".to_string(), "dense".to_string()]);
    }

    #[test]
    fn config_file_roundtrip() {
        let text = "# levels\nclear = 3\n fog = 1 \n\nmist=7\n";
        let set = RatingLevelSet::parse(text).unwrap();
        assert_eq!(set.levels(), &["clear", "fog", "mist"]);
        assert_eq!(set.token_index(), &[3, 1, 7]);
        assert_eq!(set.vocab_len(), 7);
        assert_eq!(RatingLevelSet::parse(&set.to_config_string()).unwrap(), set);
        assert!(RatingLevelSet::parse("clear 3").is_err());
    }

    #[test]
    fn white_image_is_densest_and_black_is_clearest() {
        let levels = RatingLevelSet::default();
        let white = Tensor::<f64>::full(&[1, 3, 8, 8], 1.0);
        let black = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let pw = close_set_prior(
            &dark_channel_estimator(&white, &levels, 3).unwrap(),
            &levels,
        )
        .unwrap();
        let pb = close_set_prior(
            &dark_channel_estimator(&black, &levels, 3).unwrap(),
            &levels,
        )
        .unwrap();
        assert_eq!(pw.argmax(), 13);
        assert_eq!(pb.argmax(), 0);
    }

    #[test]
    fn half_grey_matches_hand_ramp() {
        let levels = RatingLevelSet::graded(5).unwrap();
        let img = Tensor::<f64>::full(&[1, 3, 6, 6], 0.5);
        assert_eq!(dark_channel_density(&img, 3).unwrap(), 0.5);
        let logits = dark_channel_estimator(&img, &levels, 3).unwrap();
        // anchors 0, .25, .5, .75, 1 -> |d - a| = .5, .25, 0, .25, .5
        let want = [-6.0, -3.0, 0.0, -3.0, -6.0];
        for (a, b) in logits.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_rejects_bad_inputs() {
        let levels = RatingLevelSet::default();
        let img = Tensor::<f64>::full(&[1, 3, 4, 4], 1.5);
        assert!(matches!(
            dark_channel_estimator(&img, &levels, 3),
            Err(Error::Range(_))
        ));
        let ok = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        assert!(matches!(
            dark_channel_estimator(&ok, &levels, 4),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn unmapped_positions_get_sentinel() {
        let levels = levels_l10_n3();
        let img = Tensor::<f64>::full(&[1, 3, 4, 4], 0.2);
        let logits = dark_channel_estimator(&img, &levels, 1).unwrap();
        assert_eq!(logits.len(), 10);
        assert_eq!(logits[0], UNMAPPED_LOGIT);
        assert!(logits[1] > UNMAPPED_LOGIT);
    }

    #[test]
    fn dark_channel_min_filter_spreads_minimum() {
        let mut img = Tensor::<f64>::full(&[1, 3, 5, 5], 0.8);
        img.data_mut()[25 + 12] = 0.1; // green channel, centre pixel
        let dc = dark_channel(&img, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let near = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(dc.at4(0, 0, y, x), if near { 0.1 } else { 0.8 });
            }
        }
    }

    #[test]
    fn estimator_is_deterministic() {
        let est = DarkChannelEstimator::new(RatingLevelSet::default(), 5).unwrap();
        let img = Tensor::<f32>::from_fn(&[1, 3, 9, 7], |i| ((i * 37) % 101) as f32 / 100.0);
        assert_eq!(est.prior(&img).unwrap(), est.prior(&img).unwrap());
    }

    proptest! {
        #[test]
        fn prior_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 14),
            shift in -1e3f64..1e3,
        ) {
            let set = RatingLevelSet::default();
            let a = close_set_prior(&logits, &set).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = close_set_prior(&shifted, &set).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(a.argmax(), b.argmax());
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
