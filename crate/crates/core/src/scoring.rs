//! The per-clip score: how well the trained model recovers which frames
//! a seeded shuffle displaced.
//!
//! A healthy injection keeps the zone moving for the whole clip, so
//! displaced frames stand out in the flow features and recovery
//! accuracy stays high. When the front halts early the tail frames are
//! interchangeable, recovery fails there, and the score drops; low
//! score is the abnormality signal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disarrange::{apply_disarrangement, make_disarrangement};
use crate::error::{Error, Result};
use crate::model::{predict_accuracy, Checkpoint};
use crate::optical_flow::{clip_flow_sequence, FlowParams};
use crate::rng::derive_seed;
use crate::video_io::VideoClip;
use crate::zone::{
    extract_features, magnitude_variance_map, select_effective_points, FeatureSequence, ZoneSpec,
};

/// Fraction of frames each scoring shuffle displaces.
pub const SHUFFLE_THETA: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneConfig {
    /// Variance percentile a pixel must exceed to be zone-eligible.
    pub percentile: f64,
    /// Number of zone points sampled; feature dim is twice this.
    pub k: usize,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        ZoneConfig {
            percentile: 80.0,
            k: 100,
        }
    }
}

/// Flow variance zone of a clip, from its unshuffled flows.
pub fn compute_zone(
    clip: &VideoClip,
    flow_params: &FlowParams,
    zone_cfg: &ZoneConfig,
    seed: u64,
) -> Result<ZoneSpec> {
    let flows = clip_flow_sequence(clip, flow_params)?;
    let map = magnitude_variance_map(&flows)?;
    select_effective_points(&map, zone_cfg.percentile, zone_cfg.k, seed)
}

/// Flow features of a clip at fixed zone points.
pub fn clip_features(
    clip: &VideoClip,
    zone: &ZoneSpec,
    flow_params: &FlowParams,
    standardize: bool,
) -> Result<FeatureSequence> {
    let flows = clip_flow_sequence(clip, flow_params)?;
    extract_features(&flows, zone, standardize)
}

/// Per-step displacement targets for a shuffled clip: step t of the
/// feature sequence leads into frame t+1, so it carries that frame's
/// bit. Frame 0 is never scored.
pub fn step_targets(labels: &[u8]) -> Vec<u8> {
    labels[1..].to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DzlScore {
    pub clip: String,
    /// Mean recovery accuracy over the repeats.
    pub score: f64,
    pub n_repeats: usize,
    pub repeats: Vec<f64>,
    pub seed: u64,
}

/// Score one clip: fix the zone on the original flows, then repeatedly
/// shuffle, recompute flows, and measure how much of the displacement
/// pattern the model recovers. Repeat seeds derive from (seed, repeat),
/// the zone seed from (seed, 0).
pub fn dzl_score(
    clip_id: &str,
    clip: &VideoClip,
    flow_params: &FlowParams,
    zone_cfg: &ZoneConfig,
    model: &Checkpoint,
    n_repeats: usize,
    seed: u64,
) -> Result<DzlScore> {
    if n_repeats == 0 {
        return Err(Error::InvalidParam("n_repeats must be at least 1".into()));
    }
    if model.params.feature_dim != 2 * zone_cfg.k {
        return Err(Error::Mismatch(format!(
            "model expects feature dim {}, zone of {} points yields {}",
            model.params.feature_dim,
            zone_cfg.k,
            2 * zone_cfg.k
        )));
    }
    let zone = compute_zone(clip, flow_params, zone_cfg, derive_seed(seed, 0))?;

    let mut repeats = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let rec = make_disarrangement(clip.len(), SHUFFLE_THETA, derive_seed(seed, 1 + r as u64))?;
        let shuffled = apply_disarrangement(clip, &rec)?;
        let features = clip_features(&shuffled, &zone, flow_params, model.standardized)?;
        let acc = predict_accuracy(&model.params, &features, &step_targets(&rec.labels))?;
        repeats.push(acc);
    }
    Ok(DzlScore {
        clip: clip_id.to_string(),
        score: repeats.iter().sum::<f64>() / n_repeats as f64,
        n_repeats,
        repeats,
        seed,
    })
}

/// Score a batch of clips in parallel. Clip i's seed derives from
/// (master_seed, i), so results depend only on input order, not on
/// scheduling.
pub fn score_corpus(
    items: &[(String, VideoClip)],
    flow_params: &FlowParams,
    zone_cfg: &ZoneConfig,
    model: &Checkpoint,
    n_repeats: usize,
    master_seed: u64,
) -> Result<Vec<DzlScore>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, (id, clip))| {
            dzl_score(
                id,
                clip,
                flow_params,
                zone_cfg,
                model,
                n_repeats,
                derive_seed(master_seed, i as u64),
            )
        })
        .collect()
}

/// One training example from a clip: zone on the original flows, one
/// seeded shuffle, features from the shuffled flows, per-step targets.
/// Layout matches [`dzl_score`]: zone seed (seed, 0), shuffle (seed, 1).
pub fn training_instance(
    clip: &VideoClip,
    flow_params: &FlowParams,
    zone_cfg: &ZoneConfig,
    standardize: bool,
    seed: u64,
) -> Result<(FeatureSequence, Vec<u8>)> {
    let zone = compute_zone(clip, flow_params, zone_cfg, derive_seed(seed, 0))?;
    let rec = make_disarrangement(clip.len(), SHUFFLE_THETA, derive_seed(seed, 1))?;
    let shuffled = apply_disarrangement(clip, &rec)?;
    let features = clip_features(&shuffled, &zone, flow_params, standardize)?;
    Ok((features, step_targets(&rec.labels)))
}

/// Training examples for a whole corpus, one per clip, in input order.
/// Clip i's seed derives from (master_seed, i).
pub fn training_set(
    clips: &[(String, VideoClip)],
    flow_params: &FlowParams,
    zone_cfg: &ZoneConfig,
    standardize: bool,
    master_seed: u64,
) -> Result<Vec<(FeatureSequence, Vec<u8>)>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, (_, clip))| {
            training_instance(
                clip,
                flow_params,
                zone_cfg,
                standardize,
                derive_seed(master_seed, i as u64),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallLabel {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StenosisCall {
    pub score: f64,
    pub threshold: f64,
    pub call: CallLabel,
}

/// Binary call from a score: abnormal on a strictly lower score, so a
/// score equal to the threshold stays normal.
pub fn classify(score: &DzlScore, threshold: f64) -> Result<StenosisCall> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParam(format!(
            "threshold {threshold} outside (0,1)"
        )));
    }
    Ok(StenosisCall {
        score: score.score,
        threshold,
        call: if score.score < threshold {
            CallLabel::Abnormal
        } else {
            CallLabel::Normal
        },
    })
}

/// Threshold maximizing Youden's J (TPR - FPR) where "call abnormal"
/// means score strictly below the threshold. Candidates are midpoints
/// of adjacent distinct scores; earliest maximum wins.
pub fn youden_threshold(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::Mismatch(format!(
            "{} scores for {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParam("non-finite score".into()));
    }
    let n_pos = truths.iter().filter(|&&t| t).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!(
            "threshold selection needs both classes, got {n_pos}/{n_neg}"
        )));
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(distinct[0]);
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let tp = scores
            .iter()
            .zip(truths)
            .filter(|(s, &y)| y && **s < t)
            .count();
        let fp = scores
            .iter()
            .zip(truths)
            .filter(|(s, &y)| !y && **s < t)
            .count();
        let j = tp as f64 / n_pos as f64 - fp as f64 / n_neg as f64;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderDecoderParams;
    use crate::synth::{generate_clip, SynthConfig};

    fn test_clip(seed: u64) -> VideoClip {
        let cfg = SynthConfig {
            width: 64,
            height: 64,
            frames: 8,
            front_speed: 0.15,
            noise_sigma: 0.005,
            ..SynthConfig::default()
        };
        generate_clip(&cfg, seed).unwrap().0
    }

    fn fast_flow() -> FlowParams {
        FlowParams {
            pyramid_levels: 2,
            window_size: 9,
            iterations: 2,
            ..FlowParams::default()
        }
    }

    fn zone_cfg(k: usize) -> ZoneConfig {
        ZoneConfig {
            percentile: 80.0,
            k,
        }
    }

    /// Model that always answers "not displaced".
    fn all_clear_model(feature_dim: usize) -> Checkpoint {
        let mut params = EncoderDecoderParams::zeros(feature_dim, 4, 1).unwrap();
        params.b_out[0] = 5.0;
        Checkpoint {
            params,
            seed: 0,
            standardized: true,
        }
    }

    #[test]
    fn all_clear_model_scores_the_label_balance() {
        let clip = test_clip(3);
        let model = all_clear_model(12);
        let seed = 17;
        let out = dzl_score("c", &clip, &fast_flow(), &zone_cfg(6), &model, 4, seed).unwrap();
        assert_eq!(out.repeats.len(), 4);
        // an always-negative model is right exactly on the unshuffled steps
        for (r, &acc) in out.repeats.iter().enumerate() {
            let rec = make_disarrangement(8, SHUFFLE_THETA, derive_seed(seed, 1 + r as u64)).unwrap();
            let targets = step_targets(&rec.labels);
            let zeros = targets.iter().filter(|&&l| l == 0).count();
            let want = zeros as f64 / targets.len() as f64;
            assert_eq!(acc, want, "repeat {r}");
        }
        let mean = out.repeats.iter().sum::<f64>() / 4.0;
        assert_eq!(out.score, mean);
    }

    #[test]
    fn single_repeat_equals_one_manual_pass() {
        let clip = test_clip(5);
        let model = all_clear_model(12);
        let seed = 23;
        let out = dzl_score("c", &clip, &fast_flow(), &zone_cfg(6), &model, 1, seed).unwrap();

        let zone = compute_zone(&clip, &fast_flow(), &zone_cfg(6), derive_seed(seed, 0)).unwrap();
        let rec = make_disarrangement(8, SHUFFLE_THETA, derive_seed(seed, 1)).unwrap();
        let shuffled = apply_disarrangement(&clip, &rec).unwrap();
        let feats = clip_features(&shuffled, &zone, &fast_flow(), true).unwrap();
        let acc = predict_accuracy(&model.params, &feats, &step_targets(&rec.labels)).unwrap();
        assert_eq!(out.score, acc);
    }

    #[test]
    fn scoring_is_deterministic() {
        let clip = test_clip(7);
        let model = all_clear_model(8);
        let a = dzl_score("x", &clip, &fast_flow(), &zone_cfg(4), &model, 3, 9).unwrap();
        let b = dzl_score("x", &clip, &fast_flow(), &zone_cfg(4), &model, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_scores_match_per_clip_calls() {
        let items: Vec<(String, VideoClip)> = (0..3)
            .map(|i| (format!("clip{i}"), test_clip(30 + i)))
            .collect();
        let model = all_clear_model(8);
        let scores =
            score_corpus(&items, &fast_flow(), &zone_cfg(4), &model, 2, 77).unwrap();
        assert_eq!(scores.len(), 3);
        for (i, (id, clip)) in items.iter().enumerate() {
            let solo = dzl_score(
                id,
                clip,
                &fast_flow(),
                &zone_cfg(4),
                &model,
                2,
                derive_seed(77, i as u64),
            )
            .unwrap();
            assert_eq!(scores[i], solo);
        }
    }

    #[test]
    fn static_clip_fails_zone_selection() {
        let frames = vec![crate::video_io::Frame::new(16, 16, vec![0.5; 256]).unwrap(); 6];
        let clip = VideoClip::new(frames).unwrap();
        let model = all_clear_model(8);
        let err = dzl_score("s", &clip, &fast_flow(), &zone_cfg(4), &model, 1, 0);
        assert!(matches!(err, Err(Error::StaticClip)));
    }

    #[test]
    fn zone_dim_mismatch_is_rejected() {
        let clip = test_clip(11);
        let model = all_clear_model(10); // expects k=5
        assert!(matches!(
            dzl_score("m", &clip, &fast_flow(), &zone_cfg(6), &model, 1, 0),
            Err(Error::Mismatch(_))
        ));
        assert!(dzl_score("m", &clip, &fast_flow(), &zone_cfg(5), &model, 0, 0).is_err());
    }

    #[test]
    fn training_set_is_deterministic_and_sized() {
        let clips: Vec<(String, VideoClip)> = (0..2)
            .map(|i| (format!("t{i}"), test_clip(50 + i)))
            .collect();
        let a = training_set(&clips, &fast_flow(), &zone_cfg(6), true, 4).unwrap();
        let b = training_set(&clips, &fast_flow(), &zone_cfg(6), true, 4).unwrap();
        assert_eq!(a.len(), 2);
        for ((fa, la), (fb, lb)) in a.iter().zip(&b) {
            assert_eq!(fa.dim(), 12);
            assert_eq!(fa.len(), 7);
            assert_eq!(la.len(), 7);
            for t in 0..fa.len() {
                assert_eq!(fa.step(t), fb.step(t));
            }
            assert_eq!(la, lb);
        }
        // per-clip seeds follow the corpus layout
        let solo = training_instance(&clips[1].1, &fast_flow(), &zone_cfg(6), true, derive_seed(4, 1))
            .unwrap();
        for t in 0..solo.0.len() {
            assert_eq!(a[1].0.step(t), solo.0.step(t));
        }
        assert_eq!(a[1].1, solo.1);
    }

    #[test]
    fn classify_boundaries() {
        let score = |s: f64| DzlScore {
            clip: "c".into(),
            score: s,
            n_repeats: 1,
            repeats: vec![s],
            seed: 0,
        };
        assert_eq!(classify(&score(0.77), 0.80).unwrap().call, CallLabel::Abnormal);
        assert_eq!(classify(&score(0.85), 0.80).unwrap().call, CallLabel::Normal);
        assert_eq!(classify(&score(0.80), 0.80).unwrap().call, CallLabel::Normal);
        assert!(classify(&score(0.5), 0.0).is_err());
        assert!(classify(&score(0.5), 1.0).is_err());
    }

    #[test]
    fn youden_picks_the_separating_midpoint() {
        let scores = [0.2, 0.3, 0.7, 0.8];
        let truths = [true, true, false, false];
        let t = youden_threshold(&scores, &truths).unwrap();
        assert_eq!(t, 0.5);

        // degenerate single class
        assert!(youden_threshold(&[0.2, 0.4], &[true, true]).is_err());
        // all scores tied: falls back to that value
        assert_eq!(youden_threshold(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);

        // J ties at 0.5 for t=0.2 and t=0.65; earliest candidate wins
        let scores = [0.1, 0.4, 0.3, 0.9];
        let truths = [true, true, false, false];
        let t = youden_threshold(&scores, &truths).unwrap();
        assert_eq!(t, 0.2);
    }
}
