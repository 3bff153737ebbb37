use ndarray::Array2;

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear beta schedule with derived alpha and cumulative alpha tables.
/// Steps are 1-based throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "invalid beta bounds: need 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                return beta_start;
            }
            let f = i as f64 / (steps - 1) as f64;
            (1.0 - f) * beta_start + f * beta_end
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step standard deviation: `sqrt(beta_t)`, zero at the last step.
    pub fn sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.beta(t).sqrt()
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if x0.len() != eps.len() {
            return Err(Error::validation(format!(
                "x0 has {} entries, noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        let (a, b) = self.q_coefficients(t);
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Row-wise `q_sample` with a per-row step.
    pub fn q_sample_batch(&self, x0: &Array2<f64>, t: &[usize], eps: &Array2<f64>) -> Result<Array2<f64>> {
        if x0.shape() != eps.shape() || t.len() != x0.nrows() {
            return Err(Error::validation("q_sample_batch: shape mismatch"));
        }
        let mut out = x0.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            self.check_step(t[i])?;
            let (a, b) = self.q_coefficients(t[i]);
            row.zip_mut_with(&eps.row(i), |x, e| *x = a * *x + b * e);
        }
        Ok(out)
    }

    fn q_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(c_x0, c_xt)` of the q-posterior mean at step `t >= 2`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        if t < 2 {
            return Err(Error::validation(
                "posterior mean is defined for t >= 2; the last step returns x0_hat",
            ));
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c_x0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab_t);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        Ok((c_x0, c_xt))
    }

    pub fn posterior_mean(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        if x_t.len() != x0_hat.len() {
            return Err(Error::validation("posterior_mean: dimension mismatch"));
        }
        let (c0, ct) = self.posterior_coefficients(t)?;
        Ok(x_t.iter().zip(x0_hat).map(|(xt, x0)| c0 * x0 + ct * xt).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeededRng, Stream};

    #[test]
    fn two_step_schedule() {
        let s = build_schedule(2, BETA_START, BETA_END).unwrap();
        assert_eq!(s.betas(), &[1e-4, 0.02]);
        assert_eq!(s.alphas(), &[0.9999, 0.98]);
        assert_eq!(s.alpha_bars()[0], 0.9999);
        assert!((s.alpha_bars()[1] - 0.979902).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, BETA_START, BETA_END).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert_eq!(s.alpha_bars(), &[0.9999]);
    }

    #[test]
    fn invalid_bounds() {
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(5, 0.0, 0.02).is_err());
        assert!(build_schedule(5, 0.03, 0.02).is_err());
        assert!(build_schedule(5, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_matches_fold_and_decreases() {
        for steps in [5, 10, 20, 50] {
            let s = build_schedule(steps, BETA_START, BETA_END).unwrap();
            for t in 1..=steps {
                let fold: f64 = (1..=t).fold(1.0, |acc, k| acc * (1.0 - s.beta(k)));
                assert!((s.alpha_bar(t) - fold).abs() < 1e-12);
                if t > 1 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    assert!(s.beta(t) >= s.beta(t - 1));
                }
            }
        }
    }

    #[test]
    fn q_sample_zero_noise_and_range() {
        let s = build_schedule(10, BETA_START, BETA_END).unwrap();
        let x0 = [1.0, -2.0];
        let xt = s.q_sample(&x0, 4, &[0.0, 0.0]).unwrap();
        let r = s.alpha_bar(4).sqrt();
        assert_eq!(xt, vec![r * 1.0, r * -2.0]);
        assert!(s.q_sample(&x0, 0, &[0.0, 0.0]).is_err());
        assert!(s.q_sample(&x0, 11, &[0.0, 0.0]).is_err());
        let x1 = s.q_sample(&x0, 1, &[1.0, 1.0]).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() + (1.0 - s.alpha_bar(1).sqrt()) * 2.0;
        assert!(x1.iter().zip(&x0).all(|(a, b)| (a - b).abs() <= bound + 1e-15));
    }

    #[test]
    fn posterior_coefficients_are_consistent() {
        // If x_t = sqrt(abar_t) x0 exactly (no noise), the q-posterior mean
        // must equal sqrt(abar_{t-1}) x0.
        let mut rng = SeededRng::new(11, Stream::Noise);
        for _ in 0..20 {
            let steps = 2 + rng.below(40);
            let start = rng.uniform_range(1e-5, 1e-2);
            let end = rng.uniform_range(start, 0.5);
            let s = build_schedule(steps, start, end).unwrap();
            for t in 2..=steps {
                let (c0, ct) = s.posterior_coefficients(t).unwrap();
                let lhs = c0 + ct * s.alpha_bar(t).sqrt();
                assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_hand_values() {
        let s = build_schedule(2, BETA_START, BETA_END).unwrap();
        // c0 = sqrt(0.9999) * 0.02 / (1 - 0.979902)
        // ct = sqrt(0.98) * (1 - 0.9999) / (1 - 0.979902)
        let c0 = 0.999_949_998_749_937_5 * 0.02 / 0.020_098;
        let ct = 0.989_949_493_661_166_5 * 1e-4 / 0.020_098;
        let mu = s.posterior_mean(&[1.0, 2.0], &[3.0, -1.0], 2).unwrap();
        assert!((mu[0] - (3.0 * c0 + ct)).abs() < 1e-9);
        assert!((mu[1] - (-c0 + 2.0 * ct)).abs() < 1e-9);
        assert!(s.posterior_mean(&[1.0], &[1.0], 1).is_err());
    }

    #[test]
    fn posterior_mean_tiny_beta_limit() {
        let s = build_schedule(3, 1e-7, 1e-7).unwrap();
        let mu = s.posterior_mean(&[0.7], &[-3.0], 3).unwrap();
        // With beta -> 0 the x_t coefficient dominates: (t-1)/t of x_t plus
        // 1/t of x0_hat for a constant schedule.
        assert!((mu[0] - (0.7 * 2.0 / 3.0 - 3.0 / 3.0)).abs() < 1e-5);
    }

    #[test]
    fn posterior_mean_vanishing_current_beta() {
        // Hand-built schedule whose last beta is negligible: mu -> x_t.
        let betas = vec![0.1, 1e-14];
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = vec![alphas[0], alphas[0] * alphas[1]];
        let s = NoiseSchedule {
            beta_start: 0.1,
            beta_end: 1e-14,
            betas,
            alphas,
            alpha_bars,
        };
        let mu = s.posterior_mean(&[0.7, -1.2], &[5.0, 5.0], 2).unwrap();
        assert!((mu[0] - 0.7).abs() < 1e-9);
        assert!((mu[1] + 1.2).abs() < 1e-9);
    }
}
