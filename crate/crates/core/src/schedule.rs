//! Cosine log-SNR schedule for a variance-preserving process.
//!
//! `λ(t) = -2 log tan(a t + b)` with `b = atan(exp(-λmax/2))` and
//! `a = atan(exp(-λmin/2)) - b`, so `λ(0) = λmax` and `λ(1) = λmin`.
//! `α² = sigmoid(λ)`, `σ² = sigmoid(-λ)`.  Times are always `f64`.

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    a: f64,
    b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEval {
    pub t: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine(-20.0, 20.0).unwrap()
    }
}

pub fn alpha_sigma(lambda: f64) -> (f64, f64) {
    (sigmoid(lambda).sqrt(), sigmoid(-lambda).sqrt())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Posterior `q(z_s | z_t, x) = N(cz·z_t + cx·x, var)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub cz: f64,
    pub cx: f64,
    pub var: f64,
}

impl NoiseSchedule {
    pub fn cosine(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) {
            return Err(config_err!(
                "schedule needs finite lambda_min < lambda_max, got [{lambda_min}, {lambda_max}]"
            ));
        }
        let b = (-lambda_max / 2.0).exp().atan();
        let a = (-lambda_min / 2.0).exp().atan() - b;
        Ok(NoiseSchedule {
            lambda_min,
            lambda_max,
            a,
            b,
        })
    }

    pub fn log_snr(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        // endpoints exactly, the closed form is off by rounding there
        if t == 0.0 {
            return Ok(self.lambda_max);
        }
        if t == 1.0 {
            return Ok(self.lambda_min);
        }
        Ok(-2.0 * (self.a * t + self.b).tan().ln())
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        let lambda = self.log_snr(t)?;
        let (alpha, sigma) = alpha_sigma(lambda);
        Ok(ScheduleEval {
            t,
            lambda,
            alpha,
            sigma,
        })
    }

    fn ordered(&self, s: f64, t: f64) -> Result<(ScheduleEval, ScheduleEval, f64)> {
        check_time(s)?;
        check_time(t)?;
        if s >= t {
            return Err(Error::Order { s, t });
        }
        let (es, et) = (self.eval(s)?, self.eval(t)?);
        // 1 - e^{λt-λs}, in (0, 1]
        let one_minus = -(et.lambda - es.lambda).exp_m1();
        Ok((es, et, one_minus))
    }

    /// `σ²_{t|s} = (1 - e^{λt-λs}) σt²`.
    pub fn transition_variance(&self, s: f64, t: f64) -> Result<f64> {
        let (_, et, om) = self.ordered(s, t)?;
        Ok(om * et.sigma * et.sigma)
    }

    pub fn posterior(&self, s: f64, t: f64) -> Result<Posterior> {
        let (es, et, om) = self.ordered(s, t)?;
        Ok(Posterior {
            cz: (et.lambda - es.lambda).exp() * es.alpha / et.alpha,
            cx: om * es.alpha,
            var: om * es.sigma * es.sigma,
        })
    }

    /// Mean and variance of `q(z_s | z_t, x)`.
    pub fn posterior_mean_var<T: Real>(
        &self,
        z_t: &Tensor<T>,
        x: &Tensor<T>,
        s: f64,
        t: f64,
    ) -> Result<(Tensor<T>, f64)> {
        if z_t.dims() != x.dims() {
            return Err(shape_err!(
                "posterior: z_t {:?} vs x {:?}",
                z_t.dims(),
                x.dims()
            ));
        }
        let p = self.posterior(s, t)?;
        Ok((z_t.lincomb(T::of(p.cz), x, T::of(p.cx))?, p.var))
    }
}

/// Uniform grid `1 = t_0 > t_1 > ... > t_steps = 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=steps)
        .map(|i| 1.0 - i as f64 / steps as f64)
        .collect();
    g[steps] = 0.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.log_snr(0.0).unwrap(), 20.0);
        assert_eq!(s.log_snr(1.0).unwrap(), -20.0);
        assert!(matches!(s.log_snr(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.log_snr(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn midpoint_closed_form() {
        let s = NoiseSchedule::default();
        let b = (-10f64).exp().atan();
        let a = 10f64.exp().atan() - b;
        let want = -2.0 * (a / 2.0 + b).tan().ln();
        assert!((s.log_snr(0.5).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn alpha_sigma_values() {
        let (a, s) = alpha_sigma(0.0);
        assert!((a - 0.5f64.sqrt()).abs() < 1e-15 && (s - 0.5f64.sqrt()).abs() < 1e-15);
        let (_, s) = alpha_sigma(20.0);
        let want = 1.0 / (1.0 + 20f64.exp());
        assert!((s * s - want).abs() / want < 1e-12);
        assert!((s * s - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn transition_limits() {
        let sc = NoiseSchedule::default();
        let t = 0.4;
        assert!(sc.transition_variance(t - 1e-9, t).unwrap() < 1e-6);
        let et = sc.eval(t).unwrap();
        let v = sc.transition_variance(0.0, t).unwrap();
        assert!((v - et.sigma.powi(2)).abs() / et.sigma.powi(2) < 1e-8);
        assert!(matches!(
            sc.transition_variance(0.5, 0.5),
            Err(Error::Order { .. })
        ));
    }

    #[test]
    fn degenerate_posterior() {
        let sc = NoiseSchedule::default();
        let t = 0.6;
        let et = sc.eval(t).unwrap();
        let z = Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let x = z.scale(1.0 / et.alpha);
        let (m, _) = sc.posterior_mean_var(&z, &x, t - 1e-10, t).unwrap();
        assert!(m.max_abs_diff(&z) < 1e-8);
    }

    #[test]
    fn scalar_posterior_mean() {
        let sc = NoiseSchedule::default();
        let (s, t) = (0.3, 0.7);
        let (es, et) = (sc.eval(s).unwrap(), sc.eval(t).unwrap());
        let z: Tensor = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let (m, _) = sc.posterior_mean_var(&z, &x, s, t).unwrap();
        let want = (et.lambda - es.lambda).exp() * es.alpha / et.alpha;
        assert!((m.item() - want).abs() < 1e-15);
    }

    #[test]
    fn grid_shape() {
        assert_eq!(time_grid(4), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(time_grid(1), vec![1.0, 0.0]);
    }
}
