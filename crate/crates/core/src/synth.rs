//! Synthetic contrast-injection clips.
//!
//! Each clip shows a bright front advancing along a smooth random
//! vessel curve over a slowly drifting background. A severity in [0,1]
//! caps how far along the curve the front gets before it halts; 1.0 is
//! a normal injection that fills the whole vessel. Everything a clip
//! contains comes from one seeded stream, so a (config, seed) pair
//! pins the clip bit for bit.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::video_io::{save_dzlv, Frame, VideoClip, MIN_FRAMES};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Curve fraction the front advances per frame.
    pub front_speed: f64,
    /// Fraction of the curve reached before the front halts; 1.0 fills
    /// the vessel.
    pub rho: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of the drifting low-frequency background.
    pub drift_amplitude: f64,
    /// Clips with rho below this are labeled abnormal.
    pub truth_threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 512,
            height: 512,
            frames: 40,
            front_speed: 0.025,
            rho: 1.0,
            noise_sigma: 0.01,
            drift_amplitude: 0.05,
            truth_threshold: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::InvalidParam(format!(
                "frames {} below minimum {MIN_FRAMES}",
                self.frames
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParam(format!("rho {} outside [0,1]", self.rho)));
        }
        if !(self.front_speed > 0.0 && self.front_speed.is_finite()) {
            return Err(Error::InvalidParam("front_speed must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.drift_amplitude < 0.0 {
            return Err(Error::InvalidParam("noise/drift must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.truth_threshold) {
            return Err(Error::InvalidParam("truth_threshold outside [0,1]".into()));
        }
        Ok(())
    }
}

const BG_BASE: f64 = 0.35;
const RIDGE_GAIN: f64 = 0.55;

/// Uniform Catmull-Rom through the control points, endpoints doubled.
fn catmull_rom(points: &[(f64, f64)], per_segment: usize) -> Vec<(f64, f64)> {
    let n = points.len();
    let at = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * per_segment + 1);
    for seg in 0..n - 1 {
        let p0 = at(seg as isize - 1);
        let p1 = at(seg as isize);
        let p2 = at(seg as isize + 1);
        let p3 = at(seg as isize + 2);
        for s in 0..per_segment {
            let t = s as f64 / per_segment as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let blend = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * ((2.0 * b)
                    + (-a + c) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((blend(p0.0, p1.0, p2.0, p3.0), blend(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(points[n - 1]);
    out
}

struct Vessel {
    samples: Vec<(f64, f64)>,
    /// cumulative arc length up to each sample
    cum: Vec<f64>,
}

impl Vessel {
    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Index of the last sample within `frac` of the total arc length.
    fn samples_up_to(&self, frac: f64) -> &[(f64, f64)] {
        let target = frac.clamp(0.0, 1.0) * self.length();
        let end = self.cum.partition_point(|&c| c <= target);
        &self.samples[..end.max(1)]
    }
}

fn make_vessel(width: usize, height: usize, rng: &mut impl Rng) -> Vessel {
    let n = rng.gen_range(3..=5usize);
    let w = width as f64;
    let h = height as f64;
    // control points march left to right with jitter so the curve never
    // doubles back into a knot
    let points: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let fx = 0.12 + 0.76 * i as f64 / (n - 1) as f64;
            let x = fx * w + rng.gen_range(-0.04..0.04) * w;
            let y = rng.gen_range(0.2..0.8) * h;
            (x, y)
        })
        .collect();
    let samples = catmull_rom(&points, 64);
    let mut cum = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    cum.push(0.0);
    for pair in samples.windows(2) {
        total += ((pair[1].0 - pair[0].0).powi(2) + (pair[1].1 - pair[0].1).powi(2)).sqrt();
        cum.push(total);
    }
    Vessel { samples, cum }
}

struct Drift {
    freq: (f64, f64),
    phase: (f64, f64),
    velocity: (f64, f64),
    amplitude: f64,
}

impl Drift {
    fn seeded(amplitude: f64, rng: &mut impl Rng) -> Drift {
        Drift {
            freq: (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)),
            phase: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
            velocity: (rng.gen_range(0.005..0.02), rng.gen_range(0.005..0.02)),
            amplitude,
        }
    }

    fn at(&self, fx: f64, fy: f64, t: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        let t = t as f64;
        self.amplitude
            * (tau * (fx * self.freq.0 + self.phase.0 + t * self.velocity.0)).sin()
            * (tau * (fy * self.freq.1 + self.phase.1 + t * self.velocity.1)).sin()
    }
}

/// Stamp a Gaussian blob by max-blend, so overlapping stamps form a
/// ridge of even brightness instead of beads.
fn splat(canvas: &mut [f64], width: usize, height: usize, cx: f64, cy: f64, sigma: f64) {
    let reach = (3.0 * sigma).ceil() as isize;
    let x0 = (cx.round() as isize - reach).max(0);
    let x1 = (cx.round() as isize + reach).min(width as isize - 1);
    let y0 = (cy.round() as isize - reach).max(0);
    let y1 = (cy.round() as isize + reach).min(height as isize - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = RIDGE_GAIN * (-d2 * inv).exp();
            let cell = &mut canvas[y as usize * width + x as usize];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Render one clip. Returns the clip and whether it is labeled abnormal
/// (rho below the configured threshold).
pub fn generate_clip(cfg: &SynthConfig, seed: u64) -> Result<(VideoClip, bool)> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let vessel = make_vessel(cfg.width, cfg.height, &mut rng);
    let drift = Drift::seeded(cfg.drift_amplitude, &mut rng);
    let ridge_sigma = (cfg.width.min(cfg.height) as f64 * 0.012).max(1.2);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).unwrap())
    } else {
        None
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut ridge = vec![0.0; cfg.width * cfg.height];
    let mut stamped = 0usize;
    for t in 0..cfg.frames {
        let fill = (t as f64 * cfg.front_speed).min(cfg.rho);
        // the ridge only ever grows; stamp the newly reached samples
        let reached = vessel.samples_up_to(fill);
        if t > 0 {
            for &(x, y) in &reached[stamped..] {
                splat(&mut ridge, cfg.width, cfg.height, x, y, ridge_sigma);
            }
            stamped = reached.len();
        }

        let mut data = vec![0.0; cfg.width * cfg.height];
        for y in 0..cfg.height {
            let fy = y as f64 / cfg.height as f64;
            for x in 0..cfg.width {
                let fx = x as f64 / cfg.width as f64;
                let mut v = BG_BASE + drift.at(fx, fy, t) + ridge[y * cfg.width + x];
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                data[y * cfg.width + x] = v.clamp(0.0, 1.0);
            }
        }
        frames.push(Frame::new(cfg.width, cfg.height, data)?);
    }
    Ok((VideoClip::new(frames)?, cfg.rho < cfg.truth_threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Clip file name, relative to the manifest's directory.
    pub file: String,
    /// true = abnormal
    pub truth: bool,
    pub rho: f64,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if self.file.is_empty() {
            return Err(Error::Format("manifest entry with empty file".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Format(format!(
                "manifest rho {} outside [0,1]",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Write a corpus of clips plus its manifest.json. Normal clips use
/// rho = 1; abnormal severities are drawn uniformly from the given
/// range. Per-clip seeds derive from the master seed.
pub fn generate_corpus(
    cfg: &SynthConfig,
    n_normal: usize,
    n_abnormal: usize,
    severity: (f64, f64),
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if n_normal == 0 || n_abnormal == 0 {
        return Err(Error::InvalidParam("need at least one clip per class".into()));
    }
    let (lo, hi) = severity;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "severity range ({lo}, {hi}) invalid"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut severity_rng = seeded(derive_seed(seed, 0));
    let mut entries = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..n_normal + n_abnormal {
        let abnormal = i >= n_normal;
        let rho = if abnormal {
            if lo == hi {
                lo
            } else {
                severity_rng.gen_range(lo..=hi)
            }
        } else {
            1.0
        };
        let clip_seed = derive_seed(seed, 1 + i as u64);
        let clip_cfg = SynthConfig { rho, ..cfg.clone() };
        let (clip, truth) = generate_clip(&clip_cfg, clip_seed)?;
        let file = if abnormal {
            format!("abnormal_{:03}.dzlv", i - n_normal)
        } else {
            format!("normal_{i:03}.dzlv")
        };
        save_dzlv(&out_dir.join(&file), &clip)?;
        entries.push(ManifestEntry {
            file,
            truth,
            rho,
            seed: clip_seed,
        });
    }
    let manifest = serde_json::to_string_pretty(&entries)?;
    std::fs::write(out_dir.join("manifest.json"), manifest)
        .map_err(|e| Error::io(&out_dir.join("manifest.json"), e))?;
    Ok(entries)
}

/// Read and validate a manifest. Entries must be non-empty with
/// distinct file names.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(bytes)?;
    if entries.is_empty() {
        return Err(Error::Format("manifest has no entries".into()));
    }
    let mut seen = HashSet::new();
    for e in &entries {
        e.validate()?;
        if !seen.insert(e.file.as_str()) {
            return Err(Error::Format(format!("duplicate manifest file {:?}", e.file)));
        }
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes)
}

/// Manifest entries with their clips, file names resolved relative to
/// the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let entries = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.file);
            (e, p)
        })
        .collect())
}
