//! Height-error metrics.
//!
//! RMSE uses every pixel. The ratio and log metrics (Rel, Rel(log10),
//! RMSE(log10), delta) only use pixels where both the truth and the
//! prediction are at least `epsilon`. Relative log error is
//! `|log10 p - log10 t| / |log10 t|` and skips truths with `log10 t == 0`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel: f64,
    pub rel_log10: f64,
    pub rmse: f64,
    pub rmse_log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_evaluated: u64,
    pub n_masked: u64,
}

#[derive(Default)]
struct Sums {
    n: u64,
    sq: f64,
    kept: u64,
    rel: f64,
    rel_log: f64,
    rel_log_n: u64,
    sq_log: f64,
    within: [u64; 3],
}

impl Sums {
    fn push(&mut self, p: f64, t: f64, eps: f64) {
        self.n += 1;
        self.sq += (p - t) * (p - t);
        if t < eps || p < eps {
            return;
        }
        self.kept += 1;
        self.rel += (p - t).abs() / t;
        let (lp, lt) = (p.log10(), t.log10());
        self.sq_log += (lp - lt) * (lp - lt);
        if lt.abs() >= 1e-12 {
            self.rel_log += (lp - lt).abs() / lt.abs();
            self.rel_log_n += 1;
        }
        let ratio = (p / t).max(t / p);
        for (i, w) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *w += 1;
            }
        }
    }

    fn report(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no pixels to evaluate".into()));
        }
        if self.kept == 0 {
            return Err(Error::NoData("every pixel is masked for the ratio metrics".into()));
        }
        let k = self.kept as f64;
        Ok(MetricReport {
            rel: self.rel / k,
            rel_log10: if self.rel_log_n == 0 {
                0.0
            } else {
                self.rel_log / self.rel_log_n as f64
            },
            rmse: (self.sq / self.n as f64).sqrt(),
            rmse_log10: (self.sq_log / k).sqrt(),
            delta1: self.within[0] as f64 / k,
            delta2: self.within[1] as f64 / k,
            delta3: self.within[2] as f64 / k,
            n_evaluated: self.kept,
            n_masked: self.n - self.kept,
        })
    }
}

fn accumulate(sums: &mut Sums, pred: &RasterGrid, truth: &RasterGrid, eps: f64) -> Result<()> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and truth {}x{} differ",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    if pred.data().iter().chain(truth.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric inputs must be finite".into()));
    }
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        sums.push(p as f64, t as f64, eps);
    }
    Ok(())
}

pub fn evaluate(pred: &RasterGrid, truth: &RasterGrid, epsilon: f64) -> Result<MetricReport> {
    evaluate_batch(&[(pred, truth)], epsilon)
}

/// Pools all pixels of all pairs, as if they were one raster.
pub fn evaluate_batch(pairs: &[(&RasterGrid, &RasterGrid)], epsilon: f64) -> Result<MetricReport> {
    let mut sums = Sums::default();
    for (p, t) in pairs {
        accumulate(&mut sums, p, t, epsilon)?;
    }
    sums.report()
}

/// Fixed-width table: one header line and one line of values per row.
pub fn format_table(rows: &[(&str, MetricReport)]) -> String {
    let mut out = format!(
        "{:<16}{:>10}{:>12}{:>10}{:>13}{:>8}{:>8}{:>8}\n",
        "model", "Rel", "Rel(log10)", "RMSE", "RMSE(log10)", "d1", "d2", "d3"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<16}{:>10.3}{:>12.3}{:>10.3}{:>13.3}{:>8.3}{:>8.3}{:>8.3}",
            name, r.rel, r.rel_log10, r.rmse, r.rmse_log10, r.delta1, r.delta2, r.delta3
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn grid(v: &[f32]) -> RasterGrid {
        RasterGrid::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let t = grid(&[1.0, 2.5, 7.0, 30.0]);
        let r = evaluate(&t, &t, DEFAULT_EPSILON).unwrap();
        assert_eq!((r.rel, r.rmse, r.rmse_log10, r.rel_log10), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!((r.n_evaluated, r.n_masked), (4, 0));
    }

    #[test]
    fn truth_two_pred_four() {
        let r = evaluate(&grid(&[4.0]), &grid(&[2.0]), DEFAULT_EPSILON).unwrap();
        assert_eq!(r.rel, 1.0);
        assert_eq!(r.rmse, 2.0);
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn truth_ten_pred_eleven() {
        let r = evaluate(&grid(&[11.0]), &grid(&[10.0]), DEFAULT_EPSILON).unwrap();
        assert!((r.rel - 0.1).abs() < 1e-12);
        assert_eq!(r.delta1, 1.0);
        // log10(10) = 1, so relative log error is just the log difference
        assert!((r.rel_log10 - 1.1f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn masking_rules() {
        let r = evaluate(&grid(&[0.0, 3.0, 5.0]), &grid(&[0.0, 0.001, 5.0]), DEFAULT_EPSILON).unwrap();
        assert_eq!((r.n_evaluated, r.n_masked), (1, 2));
        let d = 3.0 - 0.001f32 as f64;
        assert!((r.rmse - (d * d / 3.0).sqrt()).abs() < 1e-12);
        assert!(evaluate(&grid(&[0.0]), &grid(&[1.0]), DEFAULT_EPSILON).is_err());
        assert!(evaluate(&grid(&[1.0]), &grid(&[1.0, 2.0]), DEFAULT_EPSILON).is_err());
        assert!(evaluate(&grid(&[f32::NAN]), &grid(&[1.0]), DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn batch_pooling() {
        let (p1, t1) = (grid(&[1.0, 4.0]), grid(&[2.0, 3.0]));
        let (p2, t2) = (grid(&[9.0, 0.5, 6.0]), grid(&[7.0, 0.6, 6.5]));
        let single = evaluate(&p1, &t1, DEFAULT_EPSILON).unwrap();
        assert_eq!(evaluate_batch(&[(&p1, &t1)], DEFAULT_EPSILON).unwrap(), single);
        assert_eq!(evaluate_batch(&[(&p1, &t1), (&p1, &t1)], DEFAULT_EPSILON).unwrap().rel, single.rel);
        let joined = evaluate(
            &grid(&[1.0, 4.0, 9.0, 0.5, 6.0]),
            &grid(&[2.0, 3.0, 7.0, 0.6, 6.5]),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let pooled = evaluate_batch(&[(&p1, &t1), (&p2, &t2)], DEFAULT_EPSILON).unwrap();
        assert_eq!(pooled, joined);
    }

    #[test]
    fn table_layout() {
        let t = grid(&[1.0, 2.0]);
        let r = evaluate(&t, &t, DEFAULT_EPSILON).unwrap();
        let s = format_table(&[("ordinal", r)]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[0].contains("RMSE(log10)"));
    }

    #[test]
    fn json_field_names() {
        let t = grid(&[1.0, 2.0]);
        let r = evaluate(&t, &t, DEFAULT_EPSILON).unwrap();
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["delta1", "delta2", "delta3", "n_evaluated", "n_masked", "rel", "rel_log10", "rmse", "rmse_log10"]
        );
        let back: MetricReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn random_pair(seed: u64, n: usize) -> (RasterGrid, RasterGrid) {
        let mut rng = SplitMix64::new(seed);
        let t: Vec<f32> = (0..n).map(|_| rng.uniform(0.0, 20.0) as f32).collect();
        let p: Vec<f32> = (0..n).map(|_| rng.uniform(0.0, 20.0) as f32).collect();
        (grid(&p), grid(&t))
    }

    proptest! {
        #[test]
        fn delta_is_symmetric(seed in any::<u64>()) {
            let (p, t) = random_pair(seed, 64);
            let a = evaluate(&p, &t, DEFAULT_EPSILON).unwrap();
            let b = evaluate(&t, &p, DEFAULT_EPSILON).unwrap();
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
            prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
        }

        #[test]
        fn scale_behaviour(seed in any::<u64>(), c in prop::sample::select(vec![0.5f32, 2.0, 4.0, 8.0])) {
            // powers of two keep the scaled values exact
            let (p, t) = random_pair(seed, 64);
            let ps = grid(&p.data().iter().map(|v| v * c).collect::<Vec<_>>());
            let ts = grid(&t.data().iter().map(|v| v * c).collect::<Vec<_>>());
            let eps = DEFAULT_EPSILON;
            let a = evaluate(&p, &t, eps).unwrap();
            let b = evaluate(&ps, &ts, eps * c as f64).unwrap();
            prop_assert!((a.rel - b.rel).abs() < 1e-12);
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
            prop_assert!((a.rmse * c as f64 - b.rmse).abs() < 1e-9 * b.rmse.max(1.0));
        }

        #[test]
        fn worsening_one_pixel_never_helps(seed in any::<u64>(), i in 0usize..32, step in 0.01f32..5.0) {
            let (p, t) = random_pair(seed, 32);
            let mut worse = p.data().to_vec();
            let (pi, ti) = (worse[i], t.data()[i]);
            // move away from the truth while staying above the mask threshold
            worse[i] = if pi >= ti { pi + step } else { (pi - step).max(0.02) };
            prop_assume!(pi >= 0.02);
            let a = evaluate(&p, &t, DEFAULT_EPSILON).unwrap();
            let b = evaluate(&grid(&worse), &t, DEFAULT_EPSILON).unwrap();
            prop_assert!(b.rmse >= a.rmse);
            prop_assert!(b.rel >= a.rel - 1e-15);
            prop_assert!(b.rel_log10 >= a.rel_log10 - 1e-15);
            prop_assert!(b.rmse_log10 >= a.rmse_log10 - 1e-15);
            prop_assert!(b.delta1 <= a.delta1 && b.delta2 <= a.delta2 && b.delta3 <= a.delta3);
        }
    }
}
