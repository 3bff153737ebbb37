//! Training objectives: reconstruction MSE, rating MSE and their blend.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Mean squared difference between a clean vector and its reconstruction.
pub fn loss_dm(x0: &[f64], x0_hat: &[f64]) -> Result<f64> {
    if x0.len() != x0_hat.len() || x0.is_empty() {
        return Err(Error::validation(format!(
            "loss_dm: dimensions {} and {}",
            x0.len(),
            x0_hat.len()
        )));
    }
    let sum: f64 = x0.iter().zip(x0_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / x0.len() as f64)
}

pub fn loss_rating(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::validation(format!(
            "loss_rating: {} predictions for {} ratings",
            preds.len(),
            truths.len()
        )));
    }
    let sum: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / preds.len() as f64)
}

/// `lambda * l_dm + (1 - lambda) * l_rating`.
pub fn loss_joint(l_dm: f64, l_rating: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_dm + (1.0 - lambda) * l_rating)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Batched `loss_dm` averaged over rows, with its gradient w.r.t. `x0_hat`.
pub fn dm_loss_grad(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if x0.shape() != x0_hat.shape() || x0.is_empty() {
        return Err(Error::validation("dm_loss_grad: shape mismatch"));
    }
    let n = x0.len() as f64;
    let diff = x0_hat - x0;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// One observed rating between row `user` of a user matrix and row `item`
/// of an item matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingPair {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Rating MSE for dot-product predictions, with gradients w.r.t. both the
/// user and the item matrices.
pub fn rating_loss_grad(
    users: &Array2<f64>,
    items: &Array2<f64>,
    pairs: &[RatingPair],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if pairs.is_empty() {
        return Err(Error::validation("rating loss over zero ratings"));
    }
    if users.ncols() != items.ncols() {
        return Err(Error::validation("user and item widths differ"));
    }
    let n = pairs.len() as f64;
    let mut du = Array2::zeros(users.raw_dim());
    let mut dv = Array2::zeros(items.raw_dim());
    let mut loss = 0.0;
    for p in pairs {
        let u = users.row(p.user);
        let v = items.row(p.item);
        let resid = u.dot(&v) - p.rating;
        loss += resid * resid;
        let k = 2.0 * resid / n;
        du.row_mut(p.user).scaled_add(k, &v);
        dv.row_mut(p.item).scaled_add(k, &u);
    }
    Ok((loss / n, du, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeededRng, Stream};
    use proptest::prelude::*;

    #[test]
    fn dm_examples() {
        assert_eq!(loss_dm(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_dm(&[1.0, 2.0], &[3.0, 2.0]).unwrap(), 2.0);
        assert!(loss_dm(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rating_examples() {
        assert_eq!(loss_rating(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_rating(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert!(loss_rating(&[], &[]).is_err());
    }

    #[test]
    fn joint_examples() {
        assert_eq!(loss_joint(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(loss_joint(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(loss_joint(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert!(loss_joint(2.0, 4.0, 1.5).is_err());
        assert!(loss_joint(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn dm_gradient_vanishes_at_minimum() {
        let x = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let (l, g) = dm_loss_grad(&x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rating_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(1, Stream::Init);
        let u = Array2::from_shape_fn((3, 4), |_| rng.normal());
        let v = Array2::from_shape_fn((5, 4), |_| rng.normal());
        let pairs: Vec<RatingPair> = (0..8)
            .map(|k| RatingPair {
                user: k % 3,
                item: (k * 2) % 5,
                rating: rng.uniform_range(0.0, 5.0),
            })
            .collect();
        let (_, du, dv) = rating_loss_grad(&u, &v, &pairs).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut up = u.clone();
                up[[i, j]] += h;
                let mut um = u.clone();
                um[[i, j]] -= h;
                let fd = (rating_loss_grad(&up, &v, &pairs).unwrap().0 - rating_loss_grad(&um, &v, &pairs).unwrap().0)
                    / (2.0 * h);
                assert!((fd - du[[i, j]]).abs() < 1e-6);
            }
        }
        for i in 0..5 {
            for j in 0..4 {
                let mut vp = v.clone();
                vp[[i, j]] += h;
                let mut vm = v.clone();
                vm[[i, j]] -= h;
                let fd = (rating_loss_grad(&u, &vp, &pairs).unwrap().0 - rating_loss_grad(&u, &vm, &pairs).unwrap().0)
                    / (2.0 * h);
                assert!((fd - dv[[i, j]]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn dm_is_permutation_invariant_and_nonnegative(
            v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
            seed: u64,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let l = loss_dm(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
            let mut perm: Vec<usize> = (0..a.len()).collect();
            SeededRng::new(seed, Stream::Shuffle).shuffle(&mut perm);
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
            prop_assert!((loss_dm(&pa, &pb).unwrap() - l).abs() <= 1e-12 * l.max(1.0));
        }

        #[test]
        fn rating_loss_is_quadratic_in_residuals(
            v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            c in -4.0f64..4.0,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let scaled: Vec<f64> = p.iter().zip(&t).map(|(p, t)| t + c * (p - t)).collect();
            let base = loss_rating(&p, &t).unwrap();
            let l = loss_rating(&scaled, &t).unwrap();
            prop_assert!((l - c * c * base).abs() <= 1e-9 * (1.0 + l));
        }
    }
}
