//! Ranking metrics over anomaly scores.
//!
//! Convention throughout: lower score means more abnormal, and the
//! positive class is the abnormal one. A perfect scorer therefore puts
//! every positive strictly below every negative.

use crate::error::{Error, Result};

/// 1-based ranks ascending by value; tied runs share their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn validate_ranked(scores: &[f64], positives: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positives.len() {
        return Err(Error::Mismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParam("non-finite score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Probability that a random positive scores below a random negative,
/// ties counting half. Rank-sum form, so it runs in O(n log n).
pub fn auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = validate_ranked(scores, positives)?;
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    // u counts (positive, negative) pairs with positive ranked above
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(1.0 - u / (n_pos as f64 * n_neg as f64))
}

/// Mean precision at the rank of each positive, ranking ascending by
/// score with ties kept in input order.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (n_pos, _) = validate_ranked(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: equal scores stay in input order
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// ROC curve points (fpr, tpr), one per distinct score plus the (0,0)
/// origin. "Call positive" means score at or below the sweeping
/// threshold, so the curve ends at (1,1). Trapezoidal area under these
/// points equals [`auc`].
pub fn roc_points(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = validate_ranked(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut pts = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if positives[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(pts)
}

// Abramowitz-Stegun 7.1.26 polynomial, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// One-sided Mann-Whitney test that `low` values run stochastically
/// below `high` values. Normal approximation with tie correction and
/// continuity correction. Returns the p-value.
pub fn mann_whitney_one_sided_p(low: &[f64], high: &[f64]) -> Result<f64> {
    if low.is_empty() || high.is_empty() {
        return Err(Error::Degenerate("empty group".into()));
    }
    if low.iter().chain(high).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("non-finite value".into()));
    }
    let n1 = low.len() as f64;
    let n2 = high.len() as f64;
    let combined: Vec<f64> = low.iter().chain(high).copied().collect();
    let ranks = average_ranks(&combined);
    let r1: f64 = ranks[..low.len()].iter().sum();
    // pairs where low > high, ties half
    let u = r1 - n1 * (n1 + 1.0) / 2.0;

    let n = n1 + n2;
    let mut tie_term = 0.0;
    let mut sorted = combined.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Err(Error::Degenerate("all values tied".into()));
    }
    let z = (u - n1 * n2 / 2.0 + 0.5) / var.sqrt();
    Ok(normal_cdf(z))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!(
            "{} values against {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("need at least 2 pairs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("non-finite value".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::Degenerate("constant ranks".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Pair-counting form of the same probability, O(n^2).
    fn auc_by_pairs(scores: &[f64], positives: &[bool]) -> f64 {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &p) in positives.iter().enumerate() {
            if !p {
                continue;
            }
            for (j, &q) in positives.iter().enumerate() {
                if q {
                    continue;
                }
                pairs += 1.0;
                if scores[i] < scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
        hits / pairs
    }

    /// Precision at each positive's rank, counted pairwise: an item
    /// outranks another when its score is lower, or equal with a smaller
    /// input index.
    fn ap_by_rank_counting(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        let outranks = |i: usize, j: usize| {
            scores[i] < scores[j] || (scores[i] == scores[j] && i <= j)
        };
        let mut sum = 0.0;
        let mut n_pos = 0.0;
        for i in 0..n {
            if !positives[i] {
                continue;
            }
            n_pos += 1.0;
            let rank = (0..n).filter(|&j| outranks(j, i)).count();
            let tp = (0..n).filter(|&j| positives[j] && outranks(j, i)).count();
            sum += tp as f64 / rank as f64;
        }
        sum / n_pos
    }

    fn trapezoid(pts: &[(f64, f64)]) -> f64 {
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    fn random_instance(seed: u64, max_n: usize, quantize: bool) -> (Vec<f64>, Vec<bool>) {
        let mut rng = crate::rng::seeded(seed);
        loop {
            let n = rng.gen_range(2..=max_n);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.0..1.0);
                    if quantize {
                        (v * 8.0).round() / 8.0 // force ties
                    } else {
                        v
                    }
                })
                .collect();
            let positives: Vec<bool> = (0..n).map(|_| rng.gen_range(0..2) == 1).collect();
            if positives.iter().any(|&p| p) && positives.iter().any(|&p| !p) {
                return (scores, positives);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting() {
        for seed in 0..60 {
            let (scores, positives) = random_instance(seed, 30, seed % 2 == 0);
            let fast = auc(&scores, &positives).unwrap();
            let slow = auc_by_pairs(&scores, &positives);
            assert!((fast - slow).abs() <= 1e-12, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        // two of three positives below the negative
        let a = auc(&[0.1, 0.2, 0.8, 0.5], &[true, true, true, false]).unwrap();
        assert!((a - 2.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn ap_known_by_hand() {
        // ranking P N P N: precision 1/1 at first positive, 2/3 at second
        let scores = [0.1, 0.2, 0.3, 0.4];
        let positives = [true, false, true, false];
        let ap = average_precision(&scores, &positives).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn ap_matches_rank_counting() {
        for seed in 100..160 {
            let (scores, positives) = random_instance(seed, 30, seed % 2 == 0);
            let fast = average_precision(&scores, &positives).unwrap();
            let slow = ap_by_rank_counting(&scores, &positives);
            assert!((fast - slow).abs() <= 1e-12, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn roc_shape_and_area() {
        for seed in 200..240 {
            let (scores, positives) = random_instance(seed, 25, seed % 2 == 0);
            let pts = roc_points(&scores, &positives).unwrap();
            assert_eq!(pts[0], (0.0, 0.0));
            assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
            for w in pts.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            let area = trapezoid(&pts);
            let a = auc(&scores, &positives).unwrap();
            assert!((area - a).abs() <= 1e-12, "seed {seed}: {area} vs {a}");
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[false, false]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            roc_points(&[0.1, 0.2], &[true, true]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
        assert!(mann_whitney_one_sided_p(&[f64::INFINITY], &[0.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mann_whitney_reference_values() {
        // frozen from an independent implementation of the same
        // asymptotic test (tie + continuity corrections)
        let p = mann_whitney_one_sided_p(
            &[1.2, 0.8, 2.5, 1.9, 0.7],
            &[2.1, 3.3, 2.5, 4.0, 3.1, 2.8],
        )
        .unwrap();
        assert!((p - 0.008682732031024).abs() <= 1e-6, "got {p}");

        let p = mann_whitney_one_sided_p(&[1.0, 3.0, 5.0, 7.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((p - 0.332502771051015).abs() <= 1e-6, "got {p}");

        let p = mann_whitney_one_sided_p(
            &[0.1, 0.2, 0.3, 0.15, 0.25, 0.05],
            &[0.9, 0.8, 0.95, 0.85, 0.7, 0.75],
        )
        .unwrap();
        assert!((p - 0.00253743404897013).abs() <= 1e-6, "got {p}");
    }

    #[test]
    fn mann_whitney_null_and_degenerate() {
        let p = mann_whitney_one_sided_p(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(p > 0.4 && p < 0.7, "got {p}");
        assert!(matches!(
            mann_whitney_one_sided_p(&[1.0, 1.0], &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn spearman_reference_values() {
        let r = spearman(&[1.0, 2.0, 2.0, 3.0, 5.0], &[2.0, 1.0, 3.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.763157894736842).abs() <= 1e-12, "got {r}");

        let up = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&up, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((spearman(&up, &[40.0, 30.0, 20.0, 10.0]).unwrap() + 1.0).abs() <= 1e-12);

        let a = [0.0, 0.3, -0.27, -0.89, -0.45, -0.99, 0.06, 1.34, -0.49];
        let b = [-0.62, 0.49, 0.36, 0.11, -0.93, -0.03, 0.7, -1.34, -0.46];
        let r = spearman(&a, &b).unwrap();
        assert!((r - 0.016666666666667).abs() <= 1e-12, "got {r}");
    }

    #[test]
    fn spearman_rejects_constant_and_short() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        // ranks depend only on order, so any increasing affine map
        // leaves every metric bit-identical
        #[test]
        fn monotone_transform_is_invisible(seed in 0u64..400) {
            let (scores, positives) = random_instance(seed, 20, seed % 3 == 0);
            let mapped: Vec<f64> = scores.iter().map(|s| 3.5 * s + 2.0).collect();
            prop_assert_eq!(
                auc(&scores, &positives).unwrap(),
                auc(&mapped, &positives).unwrap()
            );
            prop_assert_eq!(
                average_precision(&scores, &positives).unwrap(),
                average_precision(&mapped, &positives).unwrap()
            );
        }

        #[test]
        fn auc_complements_when_labels_flip(seed in 500u64..800) {
            let (scores, positives) = random_instance(seed, 20, seed % 2 == 0);
            let flipped: Vec<bool> = positives.iter().map(|&p| !p).collect();
            let a = auc(&scores, &positives).unwrap();
            let b = auc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }
}
