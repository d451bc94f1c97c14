//! Built-in checks run by `cf2net selftest`: analytic loss gradients against
//! central differences, and the overlap metrics against direct pixel
//! counting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    bce, region_loss, total_loss, weighted_dice, weighted_edge_bce, DiceMode, HeadMaps, LossValue,
    LossWeights,
};
use crate::metrics::{confusion_counts, dsc, ppv, sen};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// `|a − b| / max(|a|, |b|, 1e-6)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn check(
    name: &str,
    x: &[f64],
    f: impl Fn(&[f64]) -> Result<LossValue<f64>>,
) -> Result<CheckResult> {
    let analytic = f(x)?.grad;
    let numeric = numeric_gradient(x, FD_STEP, |p| f(p).map(|l| l.value).unwrap_or(f64::NAN));
    let err = max_relative_error(&analytic, &numeric);
    Ok(CheckResult {
        name: name.into(),
        passed: err <= FD_TOLERANCE,
        detail: format!("max relative error {err:.2e}"),
    })
}

/// Every loss on random 4×4 double-precision inputs.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let probs = |rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect::<Vec<f64>>()
    };
    let mask = |rng: &mut ChaCha8Rng| {
        let mut y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        y
    };
    let p = probs(&mut rng);
    let y = mask(&mut rng);
    let w = rng.gen_range(0.1..0.9);
    let weights = LossWeights::default();
    let mut out = vec![
        check("weighted_dice (standard)", &p, |p| {
            weighted_dice(p, &y, w, DiceMode::Standard, 1e-6)
        })?,
        check("weighted_dice (paper-literal)", &p, |p| {
            weighted_dice(p, &y, w, DiceMode::PaperLiteral, 1e-6)
        })?,
        check("bce", &p, |p| bce(p, &y, 1e-6))?,
        check("weighted_edge_bce", &p, |p| {
            weighted_edge_bce(p, &y, w, 1e-6)
        })?,
        check("region_loss", &p, |p| region_loss(p, &y, n, &weights))?,
    ];
    // Total over the three heads, each perturbed through one shared vector.
    let heads = [probs(&mut rng), probs(&mut rng), probs(&mut rng)].concat();
    let edge_target = mask(&mut rng);
    let total = |x: &[f64]| -> Result<LossValue<f64>> {
        let t = total_loss(
            HeadMaps {
                fusion: Some(&x[..n]),
                aux: Some(&x[n..2 * n]),
                edge: Some(&x[2 * n..]),
            },
            &y,
            Some(&edge_target),
            n,
            &weights,
        )?;
        let g = t.head_grads(&weights);
        let grad = [g.fusion, g.aux, g.edge]
            .into_iter()
            .flatten()
            .flatten()
            .collect();
        Ok(LossValue {
            value: t.value,
            grad,
        })
    };
    out.push(check("total_loss", &heads, total)?);
    Ok(out)
}

/// DSC/SEN/PPV against explicit pixel sums on random 16×16 pairs, plus the
/// harmonic-mean identity.
pub fn metric_suite(seed: u64, pairs: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut identity_failures = 0usize;
    for _ in 0..pairs {
        let (fp_rate, gt_rate) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let pred: Vec<bool> = (0..256).map(|_| rng.gen_bool(fp_rate)).collect();
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(gt_rate)).collect();
        let c = confusion_counts(&pred, &gt)?;
        let inter = pred.iter().zip(&gt).filter(|(p, g)| **p && **g).count() as f64;
        let np = pred.iter().filter(|p| **p).count() as f64;
        let ng = gt.iter().filter(|g| **g).count() as f64;
        let expect = |num: f64, den: f64| {
            if np == 0.0 && ng == 0.0 {
                1.0
            } else if den == 0.0 {
                0.0
            } else {
                num / den
            }
        };
        let (d, s, v) = (dsc(&c), sen(&c), ppv(&c));
        if d != expect(2.0 * inter, np + ng) || s != expect(inter, ng) || v != expect(inter, np) {
            mismatches += 1;
        }
        if s + v > 0.0 && (d - 2.0 * s * v / (s + v)).abs() > 1e-12 {
            identity_failures += 1;
        }
    }
    Ok(CheckResult {
        name: format!("metric oracle ({pairs} pairs)"),
        passed: mismatches == 0 && identity_failures == 0,
        detail: format!(
            "{mismatches} count mismatches, {identity_failures} harmonic-mean failures"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_in_suites_pass() {
        for r in gradient_suite(1).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(metric_suite(2, 100).unwrap().passed);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let bogus = |p: &[f64]| -> Result<LossValue<f64>> {
            Ok(LossValue {
                value: p.iter().map(|v| v * v).sum(),
                grad: p.to_vec(),
            })
        };
        assert!(!check("bogus", &[0.3, 0.7], bogus).unwrap().passed);
    }
}
