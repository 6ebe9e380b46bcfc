use std::io::Write;

use serde::{Deserialize, Serialize};

use super::SandyModel;
use crate::envs::MaskedDynamics;
use crate::par::{self, Parallelism};
use crate::{Error, Result, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Ordered by decreasing `tau`, hence nondecreasing rates.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl RocResult {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "tau,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.tau, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

pub const GRID_POINTS: usize = 101;
pub const GRID_MIN: f64 = 1e-6;

/// `tau = 0` followed by log-spaced values from `1e-6` to `max_score`.
pub fn tau_grid(max_score: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    if max_score > GRID_MIN {
        let (lo, hi) = (GRID_MIN.ln(), max_score.ln());
        grid.extend((0..GRID_POINTS).map(|k| (lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64).exp()));
        grid[1] = GRID_MIN;
        *grid.last_mut().expect("nonempty") = max_score;
    } else if max_score > 0.0 {
        grid.push(max_score);
    }
    grid
}

/// Rates of the rule `score > tau` at every grid value. The AUC integrates
/// the achieved points by trapezoids, closed by the `(0, 0)` and `(1, 1)`
/// corners of the all-negative and all-positive rules.
pub fn roc_from_scores(scores: &[f64], labels: &[bool], grid: Option<&[f64]>) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "roc labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("roc test set"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Precondition("NaN mask score".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix counts: positives/negatives with index >= k
    let n = pairs.len();
    let mut pos_above = vec![0usize; n + 1];
    let mut neg_above = vec![0usize; n + 1];
    for k in (0..n).rev() {
        pos_above[k] = pos_above[k + 1] + pairs[k].1 as usize;
        neg_above[k] = neg_above[k + 1] + (!pairs[k].1) as usize;
    }
    let (positives, negatives) = (pos_above[0], neg_above[0]);
    let max = pairs[n - 1].0;
    let owned;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned = tau_grid(max);
            &owned
        }
    };
    let rate = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let mut points: Vec<RocPoint> = grid
        .iter()
        .map(|&tau| {
            let k = pairs.partition_point(|p| p.0 <= tau);
            RocPoint {
                tau,
                fpr: rate(neg_above[k], negatives),
                tpr: rate(pos_above[k], positives),
            }
        })
        .collect();
    points.sort_by(|a, b| b.tau.total_cmp(&a.tau));
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    curve.extend(points.iter().map(|p| (p.fpr, p.tpr)));
    curve.push((1.0, 1.0));
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auc = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocResult {
        points,
        auc,
        positives,
        negatives,
    })
}

/// Ground-truth labels and model scores for every mask entry of every
/// test transition, swept over the default grid.
pub fn roc_eval(
    model: &SandyModel,
    env: &dyn MaskedDynamics,
    test: &[Transition],
    grid: Option<&[f64]>,
    par: Parallelism,
) -> Result<RocResult> {
    if test.is_empty() {
        return Err(Error::Empty("roc test set"));
    }
    let scores = model.scores_for(test, par)?;
    let labels = par::try_map_indexed(par, test.len(), |i| {
        let t = &test[i];
        Ok(env.step(t.s.values(), t.a.values())?.1.entries().to_vec())
    })?;
    let scores: Vec<f64> = scores.into_iter().flatten().collect();
    let labels: Vec<bool> = labels.into_iter().flatten().collect();
    roc_from_scores(&scores, &labels, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Probability that a random positive outscores a random negative,
    /// ties counted half.
    fn exact_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut total) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if !l {
                continue;
            }
            for (t, &m) in scores.iter().zip(labels) {
                if m {
                    continue;
                }
                total += 1.0;
                wins += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
            }
        }
        wins / total
    }

    #[test]
    fn perfect_scores_give_unit_auc() {
        let labels = [true, false, true, false, false];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.0 }).collect();
        let roc = roc_from_scores(&scores, &labels, None).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!((roc.positives, roc.negatives), (2, 3));
    }

    #[test]
    fn random_scores_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random::<bool>()).collect();
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let roc = roc_from_scores(&scores, &labels, None).unwrap();
        assert!((roc.auc - 0.5).abs() < 0.05, "{}", roc.auc);
    }

    #[test]
    fn endpoints_and_monotonicity() {
        let scores = [0.1, 0.5, 0.3, 0.8, 0.05];
        let labels = [false, true, false, true, true];
        let roc = roc_from_scores(&scores, &labels, None).unwrap();
        let first = roc.points.first().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        let last = roc.points.last().unwrap();
        assert_eq!((last.tau, last.fpr, last.tpr), (0.0, 1.0, 1.0));
        for w in roc.points.windows(2) {
            assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
        assert!((0.0..=1.0).contains(&roc.auc));
    }

    #[test]
    fn errors() {
        assert!(roc_from_scores(&[], &[], None).is_err());
        assert!(roc_from_scores(&[0.1], &[true, false], None).is_err());
    }

    #[test]
    fn grid_shape() {
        let g = tau_grid(2.0);
        assert_eq!(g.len(), 102);
        assert_eq!((g[0], g[1], g[101]), (0.0, 1e-6, 2.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn csv_header() {
        let roc = roc_from_scores(&[0.5], &[true], Some(&[0.0])).unwrap();
        let mut buf = Vec::new();
        roc.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("tau,fpr,tpr\n0,0,1\n"));
    }

    proptest! {
        #[test]
        fn full_grid_matches_rank_statistic(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            // thresholds just below every distinct score resolve every tie block
            let mut grid: Vec<f64> = scores.iter().map(|s| s - 0.125).collect();
            grid.push(10.0);
            let roc = roc_from_scores(&scores, &labels, Some(&grid)).unwrap();
            prop_assert!((roc.auc - exact_auc(&scores, &labels)).abs() < 1e-12);
        }
    }
}
