//! Per-sample energy series and the landscape features derived from them.
//!
//! Extrema are temporal: an interior timepoint is a local maximum when its
//! energy is strictly above both neighbours. A run of equal values is judged
//! against the values flanking the run and reported at its midpoint
//! (`(start + end) / 2`, rounded down). Runs touching either end of the
//! series are never extrema.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binarize::BinaryStateSequence;
use crate::error::{Error, Result};
use crate::ingest::Network;
use crate::mem::MemModel;

pub const DEFAULT_FRACTION: f64 = 0.2;
pub const DEFAULT_WINDOW: usize = 5;
pub const FEATURE_LEN: usize = 10;

/// Fixed layout of [`feature_vector`].
pub const FEATURE_NAMES: [&str; FEATURE_LEN] = [
    "top_mean",
    "top_std",
    "top_min",
    "top_max",
    "bottom_mean",
    "bottom_std",
    "bottom_min",
    "bottom_max",
    "n_transitions",
    "mean_transition_magnitude",
];

/// Where a landscape came from: data-driven clusters or one canonical network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    HighOrder,
    Network(Network),
}

impl Source {
    /// High-order followed by the four canonical networks.
    pub fn all() -> [Source; 5] {
        [
            Source::HighOrder,
            Source::Network(Network::Dmn),
            Source::Network(Network::Sn),
            Source::Network(Network::Smn),
            Source::Network(Network::Ln),
        ]
    }

    pub fn is_high_order(self) -> bool {
        self == Source::HighOrder
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::HighOrder => f.write_str("high_order"),
            Source::Network(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "high_order" {
            Ok(Source::HighOrder)
        } else {
            Ok(Source::Network(s.parse()?))
        }
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergySeries {
    pub values: Vec<f64>,
    pub source: Source,
}

impl EnergySeries {
    pub fn new(values: Vec<f64>, source: Source) -> Self {
        Self { values, source }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `E(x_t)` for every timepoint of `seq`.
pub fn energy_series(model: &MemModel, seq: &BinaryStateSequence, source: Source) -> Result<EnergySeries> {
    if model.n_units() != seq.n_units() {
        return Err(Error::Mismatch(format!(
            "model has {} units, sequence has {}",
            model.n_units(),
            seq.n_units()
        )));
    }
    let values = seq.codes().iter().map(|&c| model.energy(c)).collect::<Result<_>>()?;
    Ok(EnergySeries { values, source })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtremaSet {
    pub minima: Vec<(usize, f64)>,
    pub maxima: Vec<(usize, f64)>,
}

impl ExtremaSet {
    pub fn is_empty(&self) -> bool {
        self.minima.is_empty() && self.maxima.is_empty()
    }

    /// Minima and maxima merged in time order; `true` marks a maximum.
    pub fn merged(&self) -> Vec<(usize, f64, bool)> {
        let mut all: Vec<(usize, f64, bool)> = self
            .minima
            .iter()
            .map(|&(i, v)| (i, v, false))
            .chain(self.maxima.iter().map(|&(i, v)| (i, v, true)))
            .collect();
        all.sort_by_key(|e| e.0);
        all
    }
}

pub fn find_extrema(series: &EnergySeries) -> ExtremaSet {
    find_extrema_in(&series.values)
}

pub(crate) fn find_extrema_in(values: &[f64]) -> ExtremaSet {
    let mut out = ExtremaSet::default();
    if values.len() < 3 {
        return out;
    }
    // maximal runs of equal values: (start, end, value)
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    for (t, &v) in values.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.2 == v => run.1 = t,
            _ => runs.push((t, t, v)),
        }
    }
    for w in runs.windows(3) {
        let (left, (start, end, v), right) = (w[0].2, w[1], w[2].2);
        let mid = (start + end) / 2;
        if v > left && v > right {
            out.maxima.push((mid, v));
        } else if v < left && v < right {
            out.minima.push((mid, v));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelopes {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

fn interpolate(points: &[(usize, f64)], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut seg = 0;
    for t in 0..len {
        if t <= points[0].0 {
            out.push(points[0].1);
            continue;
        }
        let last = points[points.len() - 1];
        if t >= last.0 {
            out.push(last.1);
            continue;
        }
        while points[seg + 1].0 < t {
            seg += 1;
        }
        let (t0, v0) = points[seg];
        let (t1, v1) = points[seg + 1];
        let a = (t - t0) as f64 / (t1 - t0) as f64;
        out.push(v0 + a * (v1 - v0));
    }
    out
}

/// Centered moving average; the window shrinks symmetrically-clipped at the edges.
fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return x.to_vec();
    }
    let half = window / 2;
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(x.len() - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

/// Upper band through the maxima and lower band through the minima, linearly
/// interpolated (held constant beyond the first and last extremum), then
/// smoothed with a centered moving average of width `smooth_window`.
pub fn envelopes(series: &EnergySeries, extrema: &ExtremaSet, smooth_window: usize) -> Result<Envelopes> {
    let t = series.len();
    if smooth_window == 0 || smooth_window.is_multiple_of(2) || smooth_window > t {
        return Err(Error::Range(format!(
            "smooth window {smooth_window} must be odd, positive and at most {t}"
        )));
    }
    if extrema.maxima.is_empty() {
        return Err(Error::EmptyExtrema("maxima"));
    }
    if extrema.minima.is_empty() {
        return Err(Error::EmptyExtrema("minima"));
    }
    Ok(Envelopes {
        upper: moving_average(&interpolate(&extrema.maxima, t), smooth_window),
        lower: moving_average(&interpolate(&extrema.minima, t), smooth_window),
    })
}

fn extreme_count(fraction: f64, t: usize) -> usize {
    // guard against 0.2 * 15 = 3.0000000000000004
    (((fraction * t as f64) - 1e-9).ceil() as usize).clamp(1, t)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 0.5 {
        Ok(())
    } else {
        Err(Error::Range(format!("fraction {fraction} outside (0, 0.5]")))
    }
}

/// The `ceil(fraction * T)` largest values (descending) and smallest values
/// (ascending); ties go to the earlier timepoint.
pub fn extreme_values(series: &EnergySeries, fraction: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_fraction(fraction)?;
    let v = &series.values;
    if v.is_empty() {
        return Err(Error::EmptySample);
    }
    let k = extreme_count(fraction, v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let top = idx[..k].iter().map(|&i| v[i]).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let bottom = idx[..k].iter().map(|&i| v[i]).collect();
    Ok((top, bottom))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub count: usize,
    pub magnitudes: Vec<f64>,
}

/// Adjacent minimum/maximum pairs in time order and their energy gaps.
pub fn transitions(extrema: &ExtremaSet) -> Transitions {
    let merged = extrema.merged();
    let magnitudes: Vec<f64> = merged
        .windows(2)
        .filter(|w| w[0].2 != w[1].2)
        .map(|w| (w[1].1 - w[0].1).abs())
        .collect();
    Transitions { count: magnitudes.len(), magnitudes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeFeatures {
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub n_transitions: usize,
    pub transition_magnitudes: Vec<f64>,
    pub extrema: ExtremaSet,
    /// `None` when the series has no local maximum or no local minimum.
    pub envelopes: Option<Envelopes>,
    pub feature_vector: [f64; FEATURE_LEN],
}

fn summary(v: &[f64]) -> [f64; 4] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

pub fn extract_features(series: &EnergySeries, fraction: f64, smooth_window: usize) -> Result<LandscapeFeatures> {
    if series.len() < 5 {
        return Err(Error::Validation(format!(
            "landscape features need at least 5 timepoints, got {}",
            series.len()
        )));
    }
    let (top, bottom) = extreme_values(series, fraction)?;
    let extrema = find_extrema(series);
    let tr = transitions(&extrema);
    if series.values.iter().all(|&v| v == series.values[0]) {
        log::warn!("{} energy series is constant; landscape features are degenerate", series.source);
    }
    let window = smooth_window.clamp(1, series.len());
    let window = if window.is_multiple_of(2) { window - 1 } else { window };
    let envelopes = match envelopes(series, &extrema, window) {
        Ok(e) => Some(e),
        Err(Error::EmptyExtrema(_)) => None,
        Err(e) => return Err(e),
    };
    let t = summary(&top);
    let b = summary(&bottom);
    let mean_mag = if tr.magnitudes.is_empty() {
        0.0
    } else {
        tr.magnitudes.iter().sum::<f64>() / tr.magnitudes.len() as f64
    };
    let feature_vector = [t[0], t[1], t[2], t[3], b[0], b[1], b[2], b[3], tr.count as f64, mean_mag];
    Ok(LandscapeFeatures {
        top,
        bottom,
        n_transitions: tr.count,
        transition_magnitudes: tr.magnitudes,
        extrema,
        envelopes,
        feature_vector,
    })
}

/// `[mean, std, min, max]` of the top and bottom sets, transition count and
/// mean transition magnitude. Standard deviations are population (÷n).
pub fn feature_vector(series: &EnergySeries, fraction: f64) -> Result<[f64; FEATURE_LEN]> {
    Ok(extract_features(series, fraction, 1)?.feature_vector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::MemModel;
    use proptest::prelude::*;

    fn es(v: &[f64]) -> EnergySeries {
        EnergySeries::new(v.to_vec(), Source::HighOrder)
    }

    #[test]
    fn energy_series_examples() {
        let m = MemModel::from_upper(vec![0.5, -0.2, 0.1], &[0.3, -0.4, 0.7]).unwrap();
        let zeros = BinaryStateSequence::from_codes(&[0, 0, 0, 0], 3).unwrap();
        assert!(energy_series(&m, &zeros, Source::HighOrder).unwrap().values.iter().all(|&v| v == 0.0));
        let constant = BinaryStateSequence::from_codes(&[5, 5, 5], 3).unwrap();
        let s = energy_series(&m, &constant, Source::HighOrder).unwrap();
        assert!(s.values.iter().all(|&v| v == m.energy(5).unwrap()));
        let other = BinaryStateSequence::from_codes(&[1, 2], 2).unwrap();
        assert!(matches!(energy_series(&m, &other, Source::HighOrder), Err(Error::Mismatch(_))));
    }

    #[test]
    fn extrema_examples() {
        assert!(find_extrema(&es(&[1.0, 2.0, 3.0, 4.0])).is_empty());
        let e = find_extrema(&es(&[1.0, 3.0, 1.0]));
        assert_eq!(e.maxima, vec![(1, 3.0)]);
        assert!(e.minima.is_empty());
        // plateau 2..=4 flanked by lower values, reported at its midpoint
        let e = find_extrema(&es(&[0.0, 1.0, 5.0, 5.0, 5.0, 2.0, 3.0]));
        assert_eq!(e.maxima, vec![(3, 5.0)]);
        assert_eq!(e.minima, vec![(5, 2.0)]);
        // a plateau at the start of the series is never an extremum
        let e = find_extrema(&es(&[2.0, 2.0, 1.0, 3.0]));
        assert_eq!(e.minima, vec![(2, 1.0)]);
        assert!(e.maxima.is_empty());
    }

    #[test]
    fn transition_examples() {
        let ex = ExtremaSet { minima: vec![(2, 1.0), (9, 0.5)], maxima: vec![(5, 4.0)] };
        let tr = transitions(&ex);
        assert_eq!(tr.count, 2);
        assert_eq!(tr.magnitudes, vec![3.0, 3.5]);
        let single = ExtremaSet { minima: vec![], maxima: vec![(1, 2.0)] };
        assert_eq!(transitions(&single).count, 0);
    }

    // T - 2 interior extrema, hence T - 3 adjacent pairs
    #[test]
    fn sawtooth_period_two() {
        let a = 1.7;
        let v: Vec<f64> = (0..41).map(|t| if t % 2 == 0 { 0.0 } else { a }).collect();
        let tr = transitions(&find_extrema(&es(&v)));
        assert_eq!(tr.count, v.len() - 3);
        assert!(tr.magnitudes.iter().all(|&m| m == a));
    }

    #[test]
    fn extreme_value_examples() {
        let v: Vec<f64> = vec![3.0, 9.0, 1.0, 4.0, 7.0, 2.0, 8.0, 5.0, 6.0, 0.0];
        let (top, bottom) = extreme_values(&es(&v), 0.2).unwrap();
        assert_eq!(top, vec![9.0, 8.0]);
        assert_eq!(bottom, vec![0.0, 1.0]);
        let (top, bottom) = extreme_values(&es(&[4.0, 1.0, 3.0, 2.0]), 0.5).unwrap();
        assert_eq!(top, vec![4.0, 3.0]);
        assert_eq!(bottom, vec![1.0, 2.0]);
        assert!(matches!(extreme_values(&es(&v), 0.6), Err(Error::Range(_))));
        assert!(matches!(extreme_values(&es(&v), 0.0), Err(Error::Range(_))));
        // 0.2 * 15 must give 3, not 4
        let v: Vec<f64> = (0..15).map(f64::from).collect();
        assert_eq!(extreme_values(&es(&v), 0.2).unwrap().0.len(), 3);
    }

    #[test]
    fn feature_vector_of_ramp() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let f = feature_vector(&es(&v), 0.2).unwrap();
        assert_eq!(f, [9.5, 0.5, 9.0, 10.0, 1.5, 0.5, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_series_features() {
        let f = extract_features(&es(&[2.5; 12]), 0.2, 5).unwrap();
        assert_eq!(f.feature_vector, [2.5, 0.0, 2.5, 2.5, 2.5, 0.0, 2.5, 2.5, 0.0, 0.0]);
        assert!(f.envelopes.is_none());
    }

    #[test]
    fn envelope_cases() {
        let s = es(&[0.0, 3.0, 1.0, 1.5, 2.0, 2.5]);
        let ex = find_extrema(&s);
        let env = envelopes(&s, &ex, 1).unwrap();
        assert_eq!(env.upper, vec![3.0; 6]);
        assert_eq!(env.lower, vec![1.0; 6]);
        assert!(matches!(
            envelopes(&es(&[1.0, 2.0, 3.0]), &ExtremaSet::default(), 1),
            Err(Error::EmptyExtrema(_))
        ));
        assert!(matches!(envelopes(&s, &ex, 4), Err(Error::Range(_))));
    }

    #[test]
    fn sine_envelope_tracks_amplitude() {
        let amp = 2.3;
        let v: Vec<f64> = (0..400)
            .map(|t| amp * (2.0 * std::f64::consts::PI * t as f64 / 40.0 + 0.3).sin())
            .collect();
        let s = es(&v);
        let env = envelopes(&s, &find_extrema(&s), 1).unwrap();
        for t in 40..360 {
            assert!((env.upper[t] - amp).abs() <= 0.05 * amp);
            assert!((env.lower[t] + amp).abs() <= 0.05 * amp);
        }
    }

    /// Reference scan: compare every interior point with its nearest
    /// differing neighbours, then collapse equal runs to their midpoints.
    fn oracle_extrema(v: &[f64]) -> ExtremaSet {
        let mut out = ExtremaSet::default();
        let n = v.len();
        let mut t = 0;
        while t < n {
            let mut end = t;
            while end + 1 < n && v[end + 1] == v[t] {
                end += 1;
            }
            if t > 0 && end + 1 < n {
                let (l, r) = (v[t - 1], v[end + 1]);
                if v[t] > l && v[t] > r {
                    out.maxima.push(((t + end) / 2, v[t]));
                }
                if v[t] < l && v[t] < r {
                    out.minima.push(((t + end) / 2, v[t]));
                }
            }
            t = end + 1;
        }
        out
    }

    proptest! {
        #[test]
        fn extrema_match_scan(v in prop::collection::vec(0i32..6, 3..200)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert_eq!(find_extrema(&es(&v)), oracle_extrema(&v));
        }

        #[test]
        fn extrema_alternate_and_magnitudes_positive(v in prop::collection::vec(-5i32..5, 3..200)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let ex = find_extrema(&es(&v));
            let merged = ex.merged();
            for w in merged.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
                prop_assert_ne!(w[0].2, w[1].2);
            }
            prop_assert!(transitions(&ex).magnitudes.iter().all(|&m| m > 0.0));
        }

        #[test]
        fn upper_envelope_dominates(v in prop::collection::vec(-50.0f64..50.0, 5..150), w in 0usize..4) {
            let s = es(&v);
            let ex = find_extrema(&s);
            prop_assume!(!ex.maxima.is_empty() && !ex.minima.is_empty());
            let largest_odd = if v.len() % 2 == 0 { v.len() - 1 } else { v.len() };
            let window = (2 * w + 1).min(largest_odd);
            let env = envelopes(&s, &ex, window).unwrap();
            for t in 0..v.len() {
                prop_assert!(env.upper[t] >= env.lower[t]);
            }
        }

        #[test]
        fn shift_moves_locations_not_spreads(v in prop::collection::vec(-10.0f64..10.0, 5..120), c in -5.0f64..5.0) {
            let a = feature_vector(&es(&v), 0.2).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = feature_vector(&es(&shifted), 0.2).unwrap();
            for k in [0usize, 2, 3, 4, 6, 7] {
                prop_assert!((b[k] - a[k] - c).abs() < 1e-9);
            }
            for k in [1usize, 5] {
                prop_assert!((b[k] - a[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn time_reversal_keeps_set_statistics(v in prop::collection::vec(-10.0f64..10.0, 5..120)) {
            let a = feature_vector(&es(&v), 0.2).unwrap();
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            let b = feature_vector(&es(&rev), 0.2).unwrap();
            for k in 0..9 {
                prop_assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn top_and_bottom_disjoint(
            v in prop::collection::hash_set(-1000i32..1000, 5..100),
            fraction in prop::sample::select(vec![0.1, 0.2, 0.25, 0.4, 0.5]),
        ) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assume!(2 * extreme_count(fraction, v.len()) <= v.len());
            let (top, bottom) = extreme_values(&es(&v), fraction).unwrap();
            prop_assert!(top.iter().all(|x| !bottom.contains(x)));
        }
    }
}
