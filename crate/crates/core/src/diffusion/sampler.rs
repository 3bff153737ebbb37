use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserParams;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// How the reverse-step mean is formed from the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanParam {
    /// Network output is a clean-vector estimate; the mean is the
    /// q-posterior mean given that estimate.
    #[default]
    X0Posterior,
    /// Network output is plugged into the noise-prediction mean
    /// `(x_t - beta_t / sqrt(1 - abar_t) * f) / sqrt(alpha_t)`.
    EpsForm,
}

impl MeanParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x0_posterior" => Ok(MeanParam::X0Posterior),
            "eq6_eps" | "eps_form" => Ok(MeanParam::EpsForm),
            other => Err(Error::Config(format!("unknown mean_param `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MeanParam::X0Posterior => "x0_posterior",
            MeanParam::EpsForm => "eq6_eps",
        }
    }
}

/// One reverse step for every row of `x_t`. At `t = 1` the x0-posterior
/// mode returns the network output itself and no noise is added.
pub fn p_sample_step(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t: &Array2<f64>,
    t: usize,
    cond: Option<&Array2<f64>>,
    noise: &Array2<f64>,
    mean_param: MeanParam,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if noise.shape() != x_t.shape() {
        return Err(Error::validation("noise draw shape mismatch"));
    }
    let steps = vec![t; x_t.nrows()];
    let f = params.forward(x_t, &steps, cond)?;
    let mean = match mean_param {
        MeanParam::X0Posterior => {
            if t == 1 {
                return Ok(f);
            }
            let (c0, ct) = sched.posterior_coefficients(t)?;
            f * c0 + x_t * ct
        }
        MeanParam::EpsForm => {
            let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            (x_t - &(f * k)) / sched.alpha(t).sqrt()
        }
    };
    let sigma = sched.sigma(t);
    Ok(if sigma > 0.0 { mean + &(noise * sigma) } else { mean })
}

/// Draws `rows` vectors: start from standard normal noise and run every
/// reverse step from `T` down to 1.
pub fn sample_batch(
    params: &DenoiserParams,
    cond: Option<&Array2<f64>>,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    rows: usize,
    mean_param: MeanParam,
) -> Result<Array2<f64>> {
    let dim = params.config.feature_dim;
    if let Some(c) = cond {
        if c.nrows() != rows {
            return Err(Error::validation(format!(
                "{} conditions for {rows} samples",
                c.nrows()
            )));
        }
    }
    let mut x = Array2::from_shape_fn((rows, dim), |_| rng.normal());
    for t in (1..=sched.steps()).rev() {
        let noise = if sched.sigma(t) > 0.0 {
            Array2::from_shape_fn((rows, dim), |_| rng.normal())
        } else {
            Array2::zeros((rows, dim))
        };
        x = p_sample_step(params, sched, &x, t, cond, &noise, mean_param)?;
    }
    Ok(x)
}

/// Single-vector convenience wrapper around [`sample_batch`].
pub fn sample(
    params: &DenoiserParams,
    cond: Option<&[f64]>,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    mean_param: MeanParam,
) -> Result<Vec<f64>> {
    let cond = match cond {
        Some(c) => {
            Some(Array2::from_shape_vec((1, c.len()), c.to_vec()).map_err(|e| Error::validation(e.to_string()))?)
        }
        None => None,
    };
    let x = sample_batch(params, cond.as_ref(), sched, rng, 1, mean_param)?;
    Ok(x.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, CondInject, DenoiserConfig, BETA_END, BETA_START};
    use crate::rng::Stream;

    fn params(seed: u64) -> DenoiserParams {
        let cfg = DenoiserConfig {
            feature_dim: 4,
            down_dim: 3,
            mid_dim: 3,
            temb_dim: 4,
            cond_inject: CondInject::InputOnly,
        };
        DenoiserParams::init(cfg, &mut SeededRng::new(seed, Stream::Init)).unwrap()
    }

    #[test]
    fn last_step_returns_network_output() {
        let p = params(1);
        let s = build_schedule(5, BETA_START, BETA_END).unwrap();
        let x = Array2::from_elem((2, 4), 0.3);
        let noise = Array2::from_elem((2, 4), 10.0);
        let out = p_sample_step(&p, &s, &x, 1, None, &noise, MeanParam::X0Posterior).unwrap();
        assert_eq!(out, p.forward(&x, &[1, 1], None).unwrap());
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let p = params(2);
        let s = build_schedule(5, BETA_START, BETA_END).unwrap();
        let x = Array2::from_elem((1, 4), -0.4);
        let z = Array2::zeros((1, 4));
        let a = p_sample_step(&p, &s, &x, 4, None, &z, MeanParam::X0Posterior).unwrap();
        let b = p_sample_step(&p, &s, &x, 4, None, &z, MeanParam::X0Posterior).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_variance_matches_beta() {
        let p = params(3);
        let s = build_schedule(10, BETA_START, BETA_END).unwrap();
        let t = 7;
        let n = 50_000;
        let x = Array2::from_elem((n, 4), 0.25);
        let mut rng = SeededRng::new(5, Stream::Noise);
        let noise = Array2::from_shape_fn((n, 4), |_| rng.normal());
        let out = p_sample_step(&p, &s, &x, t, None, &noise, MeanParam::X0Posterior).unwrap();
        let var_expected = s.beta(t);
        for col in out.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Standard error of a sample variance: var * sqrt(2 / (n - 1)).
            let se = var_expected * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - var_expected).abs() < 3.0 * se, "var {var} vs {var_expected}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = params(4);
        let s = build_schedule(10, BETA_START, BETA_END).unwrap();
        let c = [0.1, 0.2, 0.3, 0.4];
        let a = sample(
            &p,
            Some(&c),
            &s,
            &mut SeededRng::new(9, Stream::Inference),
            MeanParam::X0Posterior,
        )
        .unwrap();
        let b = sample(
            &p,
            Some(&c),
            &s,
            &mut SeededRng::new(9, Stream::Inference),
            MeanParam::X0Posterior,
        )
        .unwrap();
        assert_eq!(a, b);
        let c2 = sample(
            &p,
            Some(&c),
            &s,
            &mut SeededRng::new(10, Stream::Inference),
            MeanParam::X0Posterior,
        )
        .unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn zero_params_sample_to_zero() {
        let p = DenoiserParams::zeros(DenoiserConfig::default());
        let s = build_schedule(10, BETA_START, BETA_END).unwrap();
        let out = sample(
            &p,
            None,
            &s,
            &mut SeededRng::new(1, Stream::Inference),
            MeanParam::X0Posterior,
        )
        .unwrap();
        assert_eq!(out, vec![0.0; 32]);
    }

    #[test]
    fn eps_form_mean() {
        let p = DenoiserParams::zeros(DenoiserConfig {
            feature_dim: 2,
            ..DenoiserConfig::default()
        });
        let s = build_schedule(4, BETA_START, BETA_END).unwrap();
        let x = Array2::from_elem((1, 2), 1.0);
        let z = Array2::zeros((1, 2));
        // Zero network output: mean = x_t / sqrt(alpha_t).
        let out = p_sample_step(&p, &s, &x, 3, None, &z, MeanParam::EpsForm).unwrap();
        assert!((out[[0, 0]] - 1.0 / s.alpha(3).sqrt()).abs() < 1e-15);
    }
}
