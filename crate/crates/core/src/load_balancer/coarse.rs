use serde::{Deserialize, Serialize};

use super::BalanceError;
use crate::cost_model::FlopsTable;
use crate::model_spec::BucketRequest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionBatchSize {
    pub resolution: BucketRequest,
    pub tflops: f64,
    pub batch_size: u64,
}

/// Floor that tolerates ratios landing a hair below an integer.
pub(crate) fn batch_floor(target: f64, alpha: f64, tflops: f64) -> u64 {
    let x = target / (alpha * tflops);
    (x * (1.0 + 1e-12)).floor() as u64
}

/// `B_r = floor(F_target / (alpha * F_r))` for every table row, in row order.
pub fn coarse_batch_sizes(
    table: &FlopsTable,
    target: BucketRequest,
    alpha: f64,
) -> Result<Vec<ResolutionBatchSize>, BalanceError> {
    if !(alpha > 0.0) {
        return Err(BalanceError::BadAlpha(alpha));
    }
    let f_target = table
        .get(target)
        .ok_or_else(|| BalanceError::MissingTarget(target.to_string()))?;
    table
        .rows
        .iter()
        .map(|row| {
            let batch_size = batch_floor(f_target, alpha, row.tflops);
            if batch_size == 0 {
                return Err(BalanceError::AlphaTooLarge {
                    resolution: row.request().to_string(),
                    tflops: row.tflops,
                    target: f_target,
                    alpha,
                });
            }
            Ok(ResolutionBatchSize {
                resolution: row.request(),
                tflops: row.tflops,
                batch_size,
            })
        })
        .collect()
}

fn weighted_total(f_target: f64, alpha: f64, table: &FlopsTable, weights: &[f64]) -> f64 {
    table
        .rows
        .iter()
        .zip(weights)
        .map(|(r, w)| w * batch_floor(f_target, alpha, r.tflops) as f64)
        .sum()
}

/// Largest `alpha` whose weighted batch total `sum_r w_r * B_r(alpha)` reaches
/// `global_batch`, keeping every `B_r >= 1`.
///
/// Bisection brackets the step where the total falls below the goal; the
/// answer is then taken from the exact breakpoints `F_target / (F_r * n)`
/// inside that bracket.
pub fn solve_alpha(
    table: &FlopsTable,
    target: BucketRequest,
    weights: &[f64],
    global_batch: u64,
) -> Result<f64, BalanceError> {
    if weights.len() != table.rows.len() {
        return Err(BalanceError::WeightMismatch {
            rows: table.rows.len(),
            weights: weights.len(),
        });
    }
    if (global_batch as usize) < table.rows.len() {
        return Err(BalanceError::GlobalBatchTooSmall {
            global_batch,
            resolutions: table.rows.len(),
        });
    }
    let f_target = table
        .get(target)
        .ok_or_else(|| BalanceError::MissingTarget(target.to_string()))?;
    let goal = global_batch as f64;
    let f_max = table.rows.iter().fold(0.0f64, |m, r| m.max(r.tflops));
    let alpha_max = f_target / f_max;
    let total = |a: f64| weighted_total(f_target, a, table, weights);

    if total(alpha_max) >= goal {
        return Ok(alpha_max);
    }
    let mut lo = alpha_max;
    let mut found = false;
    for _ in 0..200 {
        lo /= 2.0;
        if total(lo) >= goal {
            found = true;
            break;
        }
    }
    if !found {
        return Err(BalanceError::Unreachable(global_batch));
    }
    let mut hi = alpha_max;
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if total(mid) >= goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut best = lo;
    for (row, &w) in table.rows.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let n_lo = (f_target / (hi * row.tflops)).ceil().max(1.0) as u64;
        let n_hi = (f_target / (lo * row.tflops)).floor() as u64 + 1;
        for n in n_lo..=n_hi {
            let a = f_target / (row.tflops * n as f64);
            if a >= lo && a > best && total(a) >= goal {
                best = a;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::FlopsRow;
    use proptest::prelude::*;

    fn target() -> BucketRequest {
        BucketRequest::new(204, 256, 256)
    }

    #[test]
    fn reference_table_alpha_one() {
        let sizes = coarse_batch_sizes(&FlopsTable::bundled(), target(), 1.0).unwrap();
        let b: Vec<u64> = sizes.iter().map(|s| s.batch_size).collect();
        assert_eq!(b, vec![1, 1, 1, 1, 3, 3, 38]);
        // Floor characterization.
        for s in &sizes {
            assert!(s.batch_size as f64 * s.tflops <= 1717.20);
            assert!((s.batch_size + 1) as f64 * s.tflops > 1717.20);
        }
    }

    #[test]
    fn single_row_self_ratio() {
        let t = FlopsTable::new(vec![FlopsRow {
            frames: 204,
            height: 256,
            width: 256,
            tflops: 1717.2,
        }]);
        let s = coarse_batch_sizes(&t, target(), 1.0).unwrap();
        assert_eq!(s[0].batch_size, 1);
        let err = coarse_batch_sizes(&t, target(), 2.0).unwrap_err();
        match err {
            BalanceError::AlphaTooLarge { resolution, .. } => assert_eq!(resolution, "204x256x256"),
            e => panic!("{e}"),
        }
    }

    fn equal_pair() -> FlopsTable {
        FlopsTable::new(vec![
            FlopsRow {
                frames: 204,
                height: 256,
                width: 256,
                tflops: 100.0,
            },
            FlopsRow {
                frames: 204,
                height: 192,
                width: 320,
                tflops: 100.0,
            },
        ])
    }

    #[test]
    fn alpha_for_equal_pair() {
        let a = solve_alpha(&equal_pair(), target(), &[1.0, 1.0], 4).unwrap();
        assert!((a - 0.5).abs() < 1e-12, "alpha {a}");
    }

    #[test]
    fn alpha_single_resolution() {
        let t = FlopsTable::new(vec![FlopsRow {
            frames: 204,
            height: 256,
            width: 256,
            tflops: 10.0,
        }]);
        let a = solve_alpha(&t, target(), &[1.0], 1).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(coarse_batch_sizes(&t, target(), a).unwrap()[0].batch_size, 1);
    }

    #[test]
    fn alpha_pigeonhole() {
        assert!(matches!(
            solve_alpha(&FlopsTable::bundled(), target(), &[1.0; 7], 6),
            Err(BalanceError::GlobalBatchTooSmall { .. })
        ));
    }

    #[test]
    fn alpha_reaches_goal_on_reference_table() {
        let t = FlopsTable::bundled();
        for goal in [7u64, 48, 100, 256] {
            let a = solve_alpha(&t, target(), &[1.0; 7], goal).unwrap();
            let sizes = coarse_batch_sizes(&t, target(), a).unwrap();
            let sum: u64 = sizes.iter().map(|s| s.batch_size).sum();
            assert!(sum >= goal);
            // Slightly larger alpha falls short.
            if a < 1.0 {
                let bigger = coarse_batch_sizes(&t, target(), a * (1.0 + 1e-9)).unwrap();
                let s2: u64 = bigger.iter().map(|s| s.batch_size).sum();
                assert!(s2 < goal, "goal {goal}: {s2}");
            }
        }
    }

    proptest! {
        #[test]
        fn batch_sizes_monotone(
            mut flops in proptest::collection::vec(1.0f64..2000.0, 2..8),
            alpha in 0.01f64..1.0,
            bump in 1.0f64..3.0,
        ) {
            flops.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let target_f = *flops.last().unwrap();
            let mut prev = u64::MAX;
            for f in &flops {
                let b = batch_floor(target_f, alpha, *f);
                prop_assert!(b <= prev);
                prev = b;
                prop_assert!(batch_floor(target_f, alpha * bump, *f) <= b);
            }
        }
    }
}
