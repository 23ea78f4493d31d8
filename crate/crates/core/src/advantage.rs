//! Group-relative advantage estimation.

use crate::error::{Error, Result};

pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

/// Standardizes rewards within a group: `(r_i - mean) / std` using the
/// population standard deviation.
///
/// A group whose reward spread is below `std_floor` carries no learning
/// signal and yields all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < std_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn standardizes_binary_rewards() {
        assert_eq!(
            group_advantages(&[1.0, 0.0, 0.0, 1.0], DEFAULT_STD_FLOOR).unwrap(),
            vec![1.0, -1.0, -1.0, 1.0]
        );
        assert_eq!(
            group_advantages(&[1.0, 0.0], DEFAULT_STD_FLOOR).unwrap(),
            vec![1.0, -1.0]
        );
    }

    #[test]
    fn degenerate_group_is_zero() {
        assert_eq!(
            group_advantages(&[1.0; 4], DEFAULT_STD_FLOOR).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn rejects_singleton_groups() {
        assert!(matches!(
            group_advantages(&[1.0], DEFAULT_STD_FLOOR),
            Err(Error::GroupTooSmall(1))
        ));
        assert!(group_advantages(&[], DEFAULT_STD_FLOOR).is_err());
    }

    proptest! {
        #[test]
        fn standardized_moments(rewards in proptest::collection::vec(-10.0..10.0f64, 2..32)) {
            let adv = group_advantages(&rewards, DEFAULT_STD_FLOOR).unwrap();
            let (m, s) = mean_std(&adv);
            prop_assert!(m.abs() < 1e-12);
            if mean_std(&rewards).1 >= DEFAULT_STD_FLOOR {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(adv.iter().all(|&a| a == 0.0));
            }
        }

        #[test]
        fn shift_and_scale_invariant(
            rewards in proptest::collection::vec(0u8..2, 2..32),
            shift in -5.0..5.0f64,
            scale in 0.1..10.0f64,
        ) {
            let rewards: Vec<f64> = rewards.into_iter().map(f64::from).collect();
            let base = group_advantages(&rewards, DEFAULT_STD_FLOOR).unwrap();
            let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
            let adv = group_advantages(&moved, DEFAULT_STD_FLOOR).unwrap();
            for (a, b) in base.iter().zip(&adv) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
