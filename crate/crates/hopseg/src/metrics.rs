//! Evaluation metrics: per-class IoU over accumulated confusion counts,
//! and Spearman rank correlation for validating the distance ordering.

use crate::error::{Error, Result};

/// Confusion counts, `counts[truth * cls + pred]`.
#[derive(Debug, Clone)]
pub struct Confusion {
    pub cls: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(cls: usize) -> Result<Self> {
        if cls < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {cls}")));
        }
        Ok(Confusion {
            cls,
            counts: vec![0; cls * cls],
        })
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} reference labels",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= self.cls || t >= self.cls {
                return Err(Error::InvalidInput(format!(
                    "label {} out of range for {} classes",
                    p.max(t),
                    self.cls
                )));
            }
            self.counts[t * self.cls + p] += 1;
        }
        Ok(())
    }

    /// Per-class intersection over union. A class absent from both the
    /// predictions and the reference has no defined IoU and is `None`.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.cls)
            .map(|c| {
                let tp = self.counts[c * self.cls + c];
                let row: u64 = (0..self.cls).map(|p| self.counts[c * self.cls + p]).sum();
                let col: u64 = (0..self.cls).map(|t| self.counts[t * self.cls + c]).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes that are present; absent classes are
    /// excluded from the mean rather than counted as zero.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::InvalidInput("no labels accumulated".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Single-map convenience.
pub fn miou(pred: &[u8], truth: &[u8], cls: usize) -> Result<f64> {
    let mut conf = Confusion::new(cls)?;
    conf.add(pred, truth)?;
    conf.miou()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // ties share the average rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 points".into()));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("values must be finite".into()));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidInput("rank variance is zero, correlation undefined".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let labels = vec![0u8, 1, 2, 1, 0, 2];
        assert_eq!(miou(&labels, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let pred = vec![0u8; 8];
        let truth = vec![1u8; 8];
        assert_eq!(miou(&pred, &truth, 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_confusion() {
        // truth:  0 0 1 1 1 2
        // pred:   0 1 1 1 2 2
        // class0: tp=1 fn=1 fp=0 -> 1/2
        // class1: tp=2 fn=1 fp=1 -> 2/4
        // class2: tp=1 fn=0 fp=1 -> 1/2
        let truth = vec![0u8, 0, 1, 1, 1, 2];
        let pred = vec![0u8, 1, 1, 1, 2, 2];
        let mut conf = Confusion::new(3).unwrap();
        conf.add(&pred, &truth).unwrap();
        let iou = conf.iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(0.5));
        assert_eq!(iou[2], Some(0.5));
        assert_eq!(conf.miou().unwrap(), 0.5);
    }

    #[test]
    fn absent_class_is_excluded_not_zeroed() {
        // class 2 never appears anywhere: mean over classes 0 and 1 only
        let truth = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 0, 1, 0];
        let mut conf = Confusion::new(3).unwrap();
        conf.add(&pred, &truth).unwrap();
        let iou = conf.iou();
        assert_eq!(iou[2], None);
        let expect = (1.0 + 1.0 / 3.0) / 2.0; // class0 2/(2+1), wait: tp=2 fp=1 fn=0 -> 2/3
        let got = conf.miou().unwrap();
        assert!((got - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15, "{got} {expect}");
    }

    #[test]
    fn accumulates_across_maps() {
        let mut conf = Confusion::new(2).unwrap();
        conf.add(&[0, 1], &[0, 1]).unwrap();
        conf.add(&[1, 0], &[0, 1]).unwrap();
        // class0: tp=1 fp=1 fn=1 -> 1/3; class1 same
        assert!((conf.miou().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_and_mismatched() {
        let mut conf = Confusion::new(2).unwrap();
        assert!(conf.add(&[0, 2], &[0, 1]).is_err());
        assert!(conf.add(&[0], &[0, 1]).is_err());
        assert!(Confusion::new(1).is_err());
    }

    #[test]
    fn spearman_on_monotone_data() {
        let xs = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let up = vec![10.0, 20.0, 30.0, 40.0, 50.0];
        let down = vec![5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_ignores_monotone_warping() {
        let xs = vec![0.1, 0.5, 1.0, 2.0, 7.0];
        let warped: Vec<f64> = xs.iter().map(|v| f64::exp(*v)).collect();
        assert!((spearman(&xs, &warped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        // hand computation: xs ranks [1.5, 1.5, 3], ys ranks [1, 2, 3]
        let xs = vec![2.0, 2.0, 5.0];
        let ys = vec![1.0, 2.0, 3.0];
        let r = spearman(&xs, &ys).unwrap();
        // cov = 1.5, vx = 1.5, vy = 2 -> 1.5/sqrt(3)
        assert!((r - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[f64::NAN, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn miou_is_permutation_invariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = crate::seed::seeded_rng(seed, "miou-perm");
            use rand::Rng;
            let n = 40;
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
            let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
            let base = miou(&pred, &truth, 3).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let p2: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
            let t2: Vec<u8> = idx.iter().map(|&i| truth[i]).collect();
            prop_assert_eq!(miou(&p2, &t2, 3).unwrap(), base);
        }

        #[test]
        fn iou_stays_in_unit_interval(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seed::seeded_rng(seed, "iou-range");
            let n = 25;
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
            let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
            let mut conf = Confusion::new(4).unwrap();
            conf.add(&pred, &truth).unwrap();
            for iou in conf.iou().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&iou));
            }
        }
    }
}
