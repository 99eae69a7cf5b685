//! Frame disarrangement and order diagnostics.
//!
//! A disarrangement picks a subset S of positions (|S| = theta*T rounded
//! half up), applies a uniformly random derangement to S, and leaves the
//! rest alone. Every position in S ends up holding a frame that does not
//! belong there, which is what the displacement labels record.
//!
//! The diagnostics ask an order model where its argmax lands while
//! walking the shuffled clip. At a shuffled position the true successor
//! and the shuffled successor are different frames, so with a strict
//! argmax the model can hit at most one of them; unshuffled positions
//! carry the same frame either way. Those two facts give the counting
//! identity checked by [`lemma_residual`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::{Frame, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisarrangeRecord {
    /// Frame count of the clip this record shuffles.
    pub t: usize,
    pub theta: f64,
    pub seed: u64,
    /// Shuffled positions, sorted ascending.
    pub selected: Vec<usize>,
    /// Full permutation over 0..t: frame at input position `s` moves to
    /// output position `permutation[s]`. Identity off `selected`, a
    /// derangement on it.
    pub permutation: Vec<usize>,
    /// `labels[u] = 1` iff output position `u` holds a displaced frame.
    pub labels: Vec<u8>,
    /// Count of positions left alone: `t - selected.len()`.
    pub alpha: usize,
}

/// Half-up rounding of theta*t, the shuffled-subset size.
pub fn shuffle_count(t: usize, theta: f64) -> usize {
    (theta * t as f64 + 0.5).floor() as usize
}

impl DisarrangeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.t < crate::video_io::MIN_FRAMES {
            return Err(Error::InvalidParam(format!("record t={} too small", self.t)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "theta {} outside (0,1]",
                self.theta
            )));
        }
        if self.permutation.len() != self.t || self.labels.len() != self.t {
            return Err(Error::Mismatch("permutation/labels length != t".into()));
        }
        let m = self.selected.len();
        if m != shuffle_count(self.t, self.theta) {
            return Err(Error::Mismatch(format!(
                "selected size {m} != rounded theta*t"
            )));
        }
        if m < 2 {
            return Err(Error::InvalidParam(
                "fewer than 2 shuffled positions".into(),
            ));
        }
        if self.alpha != self.t - m {
            return Err(Error::Mismatch("alpha != t - |selected|".into()));
        }
        if !self.selected.windows(2).all(|w| w[0] < w[1])
            || self.selected.iter().any(|&s| s >= self.t)
        {
            return Err(Error::InvalidParam(
                "selected must be sorted, distinct, in range".into(),
            ));
        }
        // bijection check
        let mut seen = vec![false; self.t];
        for &p in &self.permutation {
            if p >= self.t || seen[p] {
                return Err(Error::InvalidParam("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        // identity off S, derangement on S, labels consistent
        let in_s = {
            let mut v = vec![false; self.t];
            for &s in &self.selected {
                v[s] = true;
            }
            v
        };
        for u in 0..self.t {
            if in_s[u] {
                if self.permutation[u] == u {
                    return Err(Error::InvalidParam(format!(
                        "selected position {u} is a fixed point"
                    )));
                }
                if !in_s[self.permutation[u]] {
                    return Err(Error::InvalidParam(
                        "permutation maps selected outside selected".into(),
                    ));
                }
            } else if self.permutation[u] != u {
                return Err(Error::InvalidParam(format!(
                    "unselected position {u} moved"
                )));
            }
            let want = u8::from(self.permutation[u] != u);
            if self.labels[u] != want {
                return Err(Error::Mismatch(format!("label at {u} inconsistent")));
            }
        }
        Ok(())
    }

    /// Positions of the inverse permutation: `inverse()[u]` is the input
    /// position whose frame lands at output position `u`.
    pub fn source_of(&self) -> Vec<usize> {
        let mut inv = vec![0; self.t];
        for (s, &d) in self.permutation.iter().enumerate() {
            inv[d] = s;
        }
        inv
    }

    /// The record that undoes this one. Same subset, same labels.
    pub fn inverse(&self) -> DisarrangeRecord {
        DisarrangeRecord {
            t: self.t,
            theta: self.theta,
            seed: self.seed,
            selected: self.selected.clone(),
            permutation: self.source_of(),
            labels: self.labels.clone(),
            alpha: self.alpha,
        }
    }
}

/// Draw a disarrangement: subset uniform over size-m subsets, then a
/// uniform derangement on it by rejection (reshuffle until no fixed
/// point). Everything comes from the one seeded stream.
pub fn make_disarrangement(t: usize, theta: f64, seed: u64) -> Result<DisarrangeRecord> {
    if t < crate::video_io::MIN_FRAMES {
        return Err(Error::InvalidParam(format!(
            "t={t} below minimum {}",
            crate::video_io::MIN_FRAMES
        )));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidParam(format!("theta {theta} outside (0,1]")));
    }
    let m = shuffle_count(t, theta);
    if m < 2 {
        return Err(Error::InvalidParam(format!(
            "theta*t rounds to {m}; need at least 2 positions to derange"
        )));
    }
    let mut rng = crate::rng::seeded(seed);

    // subset: partial Fisher-Yates over 0..t
    let mut pool: Vec<usize> = (0..t).collect();
    for i in 0..m {
        let j = rng.gen_range(i..t);
        pool.swap(i, j);
    }
    let mut selected: Vec<usize> = pool[..m].to_vec();
    selected.sort_unstable();

    // derangement on the subset by rejection; a uniform shuffle conditioned
    // on "no fixed point" is uniform over derangements
    let mut targets = selected.clone();
    let mut attempts = 0;
    loop {
        for i in (1..m).rev() {
            let j = rng.gen_range(0..=i);
            targets.swap(i, j);
        }
        if selected.iter().zip(&targets).all(|(a, b)| a != b) {
            break;
        }
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidParam(
                "derangement rejection did not terminate".into(),
            ));
        }
    }

    let mut permutation: Vec<usize> = (0..t).collect();
    for (i, &s) in selected.iter().enumerate() {
        permutation[s] = targets[i];
    }
    let labels = permutation
        .iter()
        .enumerate()
        .map(|(u, &p)| u8::from(p != u))
        .collect();
    Ok(DisarrangeRecord {
        t,
        theta,
        seed,
        selected,
        permutation,
        labels,
        alpha: t - m,
    })
}

/// Reorder a clip by a record: input frame `s` lands at output position
/// `permutation[s]`.
pub fn apply_disarrangement(clip: &VideoClip, rec: &DisarrangeRecord) -> Result<VideoClip> {
    if clip.len() != rec.t {
        return Err(Error::Mismatch(format!(
            "clip has {} frames, record expects {}",
            clip.len(),
            rec.t
        )));
    }
    rec.validate()?;
    clip.reordered(&rec.source_of())
}

// ------------------------------------------------- order diagnostics --

/// Anything that can judge how plausible `candidate` is as the next frame
/// after `prefix` (oldest first). Scores are compared, never normalized,
/// so any monotone family works. An empty prefix asks for a prior.
pub trait NextFrameModel {
    fn score(&self, prefix: &[&Frame], candidate: &Frame) -> f64;
}

/// Strict argmax over candidate scores: the winning index, or None on a
/// shared maximum. Ties give no credit anywhere downstream.
fn strict_argmax(scores: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let top = scores[best];
    if scores.iter().filter(|&&s| s == top).count() > 1 {
        None
    } else {
        Some(best)
    }
}

/// How many positions of the clip, walked in true order, have the true
/// next frame as the model's strict argmax over all frames of the clip.
/// Positions 1..T-1 are scored; position 0 has nothing before it.
pub fn sequence_intensity(model: &dyn NextFrameModel, clip: &VideoClip) -> usize {
    let frames = clip.frames();
    let mut hits = 0;
    for t in 1..frames.len() {
        let prefix: Vec<&Frame> = frames[..t].iter().collect();
        let scores: Vec<f64> = frames.iter().map(|c| model.score(&prefix, c)).collect();
        if strict_argmax(&scores) == Some(t) {
            hits += 1;
        }
    }
    hits
}

/// Where the model's argmax lands at one position of the shuffled clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderHit {
    pub position: usize,
    pub shuffled: bool,
    /// argmax == the frame that belongs here in true order
    pub true_hit: bool,
    /// argmax == the frame the shuffle actually put here
    pub shuffled_hit: bool,
}

/// Walk the shuffled clip and record, per position, whether the model's
/// strict argmax picks the true successor or the shuffled successor.
/// Both checks condition on the same (shuffled) prefix — that shared
/// conditioning is what makes them mutually exclusive at shuffled
/// positions. Position 0 is scored on an empty prefix.
pub fn order_hits(
    model: &dyn NextFrameModel,
    clip: &VideoClip,
    rec: &DisarrangeRecord,
) -> Result<Vec<OrderHit>> {
    if clip.len() != rec.t {
        return Err(Error::Mismatch(format!(
            "clip has {} frames, record expects {}",
            clip.len(),
            rec.t
        )));
    }
    rec.validate()?;
    let shuffled = apply_disarrangement(clip, rec)?;
    let source = rec.source_of();
    let originals = clip.frames();
    let mut out = Vec::with_capacity(rec.t);
    for s in 0..rec.t {
        let prefix: Vec<&Frame> = shuffled.frames()[..s].iter().collect();
        let scores: Vec<f64> = originals.iter().map(|c| model.score(&prefix, c)).collect();
        let arg = strict_argmax(&scores);
        out.push(OrderHit {
            position: s,
            shuffled: rec.permutation[s] != s,
            true_hit: arg == Some(s),
            shuffled_hit: arg == Some(source[s]),
        });
    }
    Ok(out)
}

/// How many shuffled positions have the frame the shuffle put there as
/// the model's strict argmax, walking the shuffled clip.
pub fn reorder_difficulty(
    model: &dyn NextFrameModel,
    clip: &VideoClip,
    rec: &DisarrangeRecord,
) -> Result<usize> {
    Ok(order_hits(model, clip, rec)?
        .iter()
        .filter(|h| h.shuffled && h.shuffled_hit)
        .count())
}

/// Counting slack of the order identity: the number of shuffled positions
/// where the argmax landed on neither the true nor the shuffled
/// successor. Zero exactly when every shuffled position resolves to one
/// of the two; never negative, because a strict argmax can hit at most
/// one of two distinct frames.
pub fn lemma_residual(
    model: &dyn NextFrameModel,
    clip: &VideoClip,
    rec: &DisarrangeRecord,
) -> Result<usize> {
    let hits = order_hits(model, clip, rec)?;
    let shuffled = rec.selected.len(); // == t - alpha
    let landed: usize = hits
        .iter()
        .filter(|h| h.shuffled)
        .map(|h| usize::from(h.true_hit) + usize::from(h.shuffled_hit))
        .sum();
    Ok(shuffled - landed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Clip of constant frames; frame t is filled with (t+1)/(T+1), so
    /// content identifies position.
    fn indexed_clip(t: usize) -> VideoClip {
        let frames = (0..t)
            .map(|i| Frame::new(8, 8, vec![(i + 1) as f64 / (t + 1) as f64; 64]).unwrap())
            .collect();
        VideoClip::new(frames).unwrap()
    }

    fn frame_index(clip: &VideoClip, f: &Frame) -> usize {
        clip.frames()
            .iter()
            .position(|g| g.data()[0] == f.data()[0])
            .expect("frame from this clip")
    }

    /// Scores candidates by an arbitrary table over (position, candidate).
    struct TableModel<'a> {
        clip: &'a VideoClip,
        table: Vec<Vec<f64>>,
    }

    impl NextFrameModel for TableModel<'_> {
        fn score(&self, prefix: &[&Frame], candidate: &Frame) -> f64 {
            self.table[prefix.len()][frame_index(self.clip, candidate)]
        }
    }

    fn one_hot_table(t: usize, pick: impl Fn(usize) -> usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|pos| {
                let mut row = vec![0.0; t];
                row[pick(pos)] = 1.0;
                row
            })
            .collect()
    }

    #[test]
    fn shuffle_count_rounds_half_up() {
        assert_eq!(shuffle_count(4, 0.5), 2);
        assert_eq!(shuffle_count(5, 0.5), 3); // 2.5 rounds up
        assert_eq!(shuffle_count(24, 0.5), 12);
        assert_eq!(shuffle_count(7, 0.5), 4); // 3.5 rounds up
        assert_eq!(shuffle_count(10, 0.25), 3); // 2.5 rounds up
    }

    #[test]
    fn record_shape_holds() {
        let rec = make_disarrangement(10, 0.5, 3).unwrap();
        rec.validate().unwrap();
        assert_eq!(rec.selected.len(), 5);
        assert_eq!(rec.alpha, 5);
        assert_eq!(rec.labels.iter().map(|&l| l as usize).sum::<usize>(), 5);
        // same seed, same record
        assert_eq!(rec, make_disarrangement(10, 0.5, 3).unwrap());
        assert_ne!(rec, make_disarrangement(10, 0.5, 4).unwrap());
    }

    #[test]
    fn too_small_subset_is_rejected() {
        // theta*t rounds to 1
        assert!(make_disarrangement(5, 0.2, 0).is_err());
        assert!(make_disarrangement(4, 1.5, 0).is_err());
        assert!(make_disarrangement(4, 0.0, 0).is_err());
    }

    #[test]
    fn swap_of_first_and_third_matches_by_hand() {
        // T=4, swap positions 0 and 2: output = [f2, f1, f0, f3],
        // labels 1,0,1,0
        let clip = indexed_clip(4);
        let rec = DisarrangeRecord {
            t: 4,
            theta: 0.5,
            seed: 0,
            selected: vec![0, 2],
            permutation: vec![2, 1, 0, 3],
            labels: vec![1, 0, 1, 0],
            alpha: 2,
        };
        rec.validate().unwrap();
        let shuffled = apply_disarrangement(&clip, &rec).unwrap();
        for (pos, want_src) in [(0usize, 2usize), (1, 1), (2, 0), (3, 3)] {
            assert_eq!(frame_index(&clip, &shuffled.frames()[pos]), want_src);
        }
    }

    #[test]
    fn apply_then_inverse_is_identity() {
        let clip = indexed_clip(9);
        let rec = make_disarrangement(9, 0.6, 11).unwrap();
        let shuffled = apply_disarrangement(&clip, &rec).unwrap();
        let restored = apply_disarrangement(&shuffled, &rec.inverse()).unwrap();
        assert_eq!(restored, clip);
    }

    #[test]
    fn perfect_model_scores_every_position() {
        let t = 8;
        let clip = indexed_clip(t);
        let perfect = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| pos),
        };
        assert_eq!(sequence_intensity(&perfect, &clip), t - 1);

        let never = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| (pos + 1) % t),
        };
        assert_eq!(sequence_intensity(&never, &clip), 0);

        // flat scores tie everywhere; strict argmax gives no credit
        let uniform = TableModel {
            clip: &clip,
            table: vec![vec![1.0; t]; t],
        };
        assert_eq!(sequence_intensity(&uniform, &clip), 0);
    }

    #[test]
    fn reorder_difficulty_counts_shuffled_successor_hits() {
        let t = 8;
        let clip = indexed_clip(t);
        let rec = make_disarrangement(t, 0.5, 5).unwrap();
        let source = rec.source_of();
        // always picks whatever the shuffle put at the position
        let follower = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| source[pos]),
        };
        assert_eq!(
            reorder_difficulty(&follower, &clip, &rec).unwrap(),
            rec.selected.len()
        );
        assert_eq!(lemma_residual(&follower, &clip, &rec).unwrap(), 0);

        // perfect model: true hits everywhere, no shuffled hits
        let perfect = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| pos),
        };
        assert_eq!(reorder_difficulty(&perfect, &clip, &rec).unwrap(), 0);
        assert_eq!(lemma_residual(&perfect, &clip, &rec).unwrap(), 0);
    }

    #[test]
    fn third_frame_argmax_leaves_residual_one() {
        let t = 8;
        let clip = indexed_clip(t);
        let rec = make_disarrangement(t, 0.5, 9).unwrap();
        let source = rec.source_of();
        let stray_pos = rec.selected[1];
        let stray = (0..t)
            .find(|&c| c != stray_pos && c != source[stray_pos])
            .unwrap();
        let model = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| if pos == stray_pos { stray } else { pos }),
        };
        assert_eq!(lemma_residual(&model, &clip, &rec).unwrap(), 1);
    }

    #[test]
    fn unshuffled_positions_agree_on_both_indices() {
        let t = 10;
        let clip = indexed_clip(t);
        let rec = make_disarrangement(t, 0.5, 21).unwrap();
        let model = TableModel {
            clip: &clip,
            table: one_hot_table(t, |pos| (pos * 3 + 1) % t),
        };
        for h in order_hits(&model, &clip, &rec).unwrap() {
            if !h.shuffled {
                assert_eq!(h.true_hit, h.shuffled_hit, "position {}", h.position);
            }
        }
    }

    proptest! {
        #[test]
        fn derangement_properties(t in 4usize..16, theta in 0.3f64..1.0, seed in 0u64..500) {
            let rec = match make_disarrangement(t, theta, seed) {
                Ok(r) => r,
                Err(_) => return Ok(()), // subset rounded below 2
            };
            rec.validate().unwrap();
            prop_assert_eq!(rec.selected.len(), shuffle_count(t, theta));
            prop_assert_eq!(rec.alpha, t - rec.selected.len());
            // every selected position moves, every other stays
            for u in 0..t {
                let sel = rec.selected.contains(&u);
                prop_assert_eq!(rec.permutation[u] != u, sel);
                prop_assert_eq!(rec.labels[u] == 1, sel);
            }
        }

        #[test]
        fn apply_inverse_round_trips(t in 4usize..12, seed in 0u64..200) {
            let clip = indexed_clip(t);
            let rec = make_disarrangement(t, 0.5, seed).unwrap();
            let shuffled = apply_disarrangement(&clip, &rec).unwrap();
            let restored = apply_disarrangement(&shuffled, &rec.inverse()).unwrap();
            prop_assert_eq!(restored, clip);
        }

        // exclusivity and the counting identity, for arbitrary models
        #[test]
        fn residual_bounds_hold_for_random_models(
            t in 4usize..12,
            seed in 0u64..300,
            model_seed in 0u64..300,
        ) {
            let clip = indexed_clip(t);
            let rec = make_disarrangement(t, 0.5, seed).unwrap();
            let mut rng = crate::rng::seeded(model_seed);
            let table: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..t).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let model = TableModel { clip: &clip, table };
            let hits = order_hits(&model, &clip, &rec).unwrap();
            for h in &hits {
                if h.shuffled {
                    prop_assert!(!(h.true_hit && h.shuffled_hit));
                }
            }
            let residual = lemma_residual(&model, &clip, &rec).unwrap();
            prop_assert!(residual <= rec.selected.len());
        }
    }
}
