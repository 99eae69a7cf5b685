//! Effective-zone selection.
//!
//! Contrast transit shows up as high temporal variance of flow magnitude,
//! so the zone is the set of pixels whose magnitude variance clears a
//! percentile threshold, and the model only ever sees flow sampled at a
//! small fixed set of those pixels. The zone is always computed from the
//! clip in its original order; features may then be extracted from any
//! reordering of the same clip at the same points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optical_flow::FlowField;

/// Per-pixel population variance of flow magnitude across a sequence of
/// fields.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl VarianceMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Mismatch(format!(
                "variance map length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(VarianceMap {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The sampled zone: where features are read, and enough context to
/// reproduce the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSpec {
    /// `(x, y)` sample points, in sampling order.
    pub points: Vec<(usize, usize)>,
    pub seed: u64,
    pub percentile: f64,
    /// How many pixels cleared the threshold before sampling.
    pub eligible_count: usize,
}

impl ZoneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidParam("zone has no points".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::InvalidParam(format!(
                "percentile {} outside (0,100)",
                self.percentile
            )));
        }
        if self.points.len() > self.eligible_count {
            return Err(Error::Mismatch(format!(
                "{} points sampled from {} eligible",
                self.points.len(),
                self.eligible_count
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &self.points {
            if !seen.insert(p) {
                return Err(Error::InvalidParam(format!("duplicate zone point {p:?}")));
            }
        }
        Ok(())
    }
}

/// Population variance of `|flow|` per pixel over the sequence. Two-pass
/// (mean, then squared deviations) so near-constant magnitudes do not
/// cancel catastrophically.
pub fn magnitude_variance_map(flows: &[FlowField]) -> Result<VarianceMap> {
    let first = flows
        .first()
        .ok_or_else(|| Error::InvalidParam("no flow fields".into()))?;
    let (w, h) = (first.width(), first.height());
    for f in flows {
        if f.width() != w || f.height() != h {
            return Err(Error::Mismatch("flow field dims disagree".into()));
        }
    }
    let n = flows.len() as f64;
    let mags: Vec<Vec<f64>> = flows.iter().map(|f| f.magnitudes()).collect();
    let mut mean = vec![0.0; w * h];
    for m in &mags {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let mut var = vec![0.0; w * h];
    for m in &mags {
        for i in 0..var.len() {
            let d = m[i] - mean[i];
            var[i] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    VarianceMap::new(w, h, var)
}

/// Threshold at the nearest-rank percentile and sample `k` distinct
/// points uniformly from the strictly-greater pixels. Fewer than `k`
/// eligible pixels means every one of them is taken; zero eligible
/// pixels is an error (nothing moves).
pub fn select_effective_points(
    map: &VarianceMap,
    percentile: f64,
    k: usize,
    seed: u64,
) -> Result<ZoneSpec> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidParam(format!(
            "percentile {percentile} outside (0,100)"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    let n = map.data.len();
    let mut sorted = map.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("variances are finite"));
    // nearest rank, 1-based: ceil(p/100 * n)
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    let rank = rank.clamp(1, n);
    let threshold = sorted[rank - 1];

    let eligible: Vec<usize> = (0..n).filter(|&i| map.data[i] > threshold).collect();
    if eligible.is_empty() {
        return Err(Error::StaticClip);
    }

    let take = k.min(eligible.len());
    // partial Fisher-Yates over the eligible list, pixel-index order
    let mut pool = eligible;
    let mut rng = crate::rng::seeded(seed);
    let mut points = Vec::with_capacity(take);
    let count = pool.len();
    for i in 0..take {
        let j = rng.gen_range(i..count);
        pool.swap(i, j);
        let idx = pool[i];
        points.push((idx % map.width, idx / map.width));
    }
    Ok(ZoneSpec {
        points,
        seed,
        percentile,
        eligible_count: count,
    })
}

/// Feature vectors for a flow sequence: step `t` is
/// `[dx(p_1..p_k), dy(p_1..p_k)]` read from `flows[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    steps: Vec<Vec<f64>>,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(steps: Vec<Vec<f64>>) -> Result<Self> {
        let dim = steps
            .first()
            .ok_or_else(|| Error::InvalidParam("empty feature sequence".into()))?
            .len();
        if steps.iter().any(|s| s.len() != dim) {
            return Err(Error::Mismatch("feature steps have unequal dims".into()));
        }
        Ok(FeatureSequence { steps, dim })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn step(&self, t: usize) -> &[f64] {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }
}

/// Read zone features from a flow sequence. With `standardize` each
/// dimension is shifted and scaled to mean 0, variance 1 over the
/// sequence; dimensions with near-zero spread (< 1e-9) are zeroed rather
/// than blown up.
pub fn extract_features(
    flows: &[FlowField],
    zone: &ZoneSpec,
    standardize: bool,
) -> Result<FeatureSequence> {
    if flows.is_empty() {
        return Err(Error::InvalidParam("no flow fields".into()));
    }
    let (w, h) = (flows[0].width(), flows[0].height());
    for &(x, y) in &zone.points {
        if x >= w || y >= h {
            return Err(Error::Mismatch(format!(
                "zone point ({x},{y}) outside {w}x{h} field"
            )));
        }
    }
    let k = zone.points.len();
    let mut steps: Vec<Vec<f64>> = flows
        .iter()
        .map(|f| {
            let mut v = Vec::with_capacity(2 * k);
            for &(x, y) in &zone.points {
                v.push(f.at(x, y).0);
            }
            for &(x, y) in &zone.points {
                v.push(f.at(x, y).1);
            }
            v
        })
        .collect();

    if standardize {
        let s = steps.len() as f64;
        for d in 0..2 * k {
            let mean = steps.iter().map(|v| v[d]).sum::<f64>() / s;
            let var = steps.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / s;
            let sd = var.sqrt();
            if sd < 1e-9 {
                for v in &mut steps {
                    v[d] = 0.0;
                }
            } else {
                for v in &mut steps {
                    v[d] = (v[d] - mean) / sd;
                }
            }
        }
    }
    FeatureSequence::new(steps)
}
