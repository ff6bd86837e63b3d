//! Gaussian probability path between a codeword `x0` (at `t = 0`) and a feature
//! vector `x1` (at `t = 1`).
//!
//! The mean follows a logistic interpolation `μ_t = x0 + (x1 − x0)·α(t)` with
//!
//! ```text
//! α(t) = [(1 + e^{k/2}) / (1 + e^{−k(t−½)}) − 1] / (e^{k/2} − 1)
//! ```
//!
//! so that `α(0) = 0`, `α(½) = ½`, `α(1) = 1`, and `k` controls how sharply the
//! path switches around `t = ½`. The standard deviation is the bridge
//! `σ_t = σ·√(t(1−t))`, zero at both ends and `σ/2` at the midpoint. The
//! conditional vector field realizing the path is
//!
//! ```text
//! u = (σ'_t/σ_t)·(x_t − μ_t) + μ'_t
//! ```
//!
//! `σ'_t/σ_t` diverges at 0 and 1, so everything that evaluates the field or
//! draws from the path requires `t ∈ [t_eps, t_max]` and errors outside it.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Path hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    /// Logistic steepness.
    pub k: f64,
    /// Bridge noise scale; `σ_t` peaks at `sigma / 2`.
    pub sigma: f64,
    pub t_eps: f64,
    pub t_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            k: 6.0,
            sigma: 0.1,
            t_eps: 0.03,
            t_max: 0.97,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::invalid(format!(
                "k must be positive and finite, got {}",
                self.k
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 0.5) {
            return Err(Error::invalid(format!(
                "t_eps must lie in (0, 0.5), got {}",
                self.t_eps
            )));
        }
        if !(self.t_max > 0.5 && self.t_max < 1.0) {
            return Err(Error::invalid(format!(
                "t_max must lie in (0.5, 1), got {}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Errors unless `t ∈ [t_eps, t_max]`.
    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_eps && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                what: "t",
                value: t,
                lo: self.t_eps,
                hi: self.t_max,
            })
        }
    }

    pub fn point(
        &self,
        x0: ArrayView1<'_, f64>,
        x1: ArrayView1<'_, f64>,
        t: f64,
    ) -> Result<PathPoint> {
        self.check_time(t)?;
        Ok(PathPoint {
            t,
            mean: mean(x0, x1, t, self.k)?,
            std: std(t, self.sigma)?,
        })
    }
}

/// Marginal of the path at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub mean: Array1<f64>,
    pub std: f64,
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "steepness k must be positive and finite, got {k}"
        )))
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

fn check_open_unit(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

/// Logistic interpolation coefficient `α(t)`.
pub fn alpha(t: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    check_unit(t)?;
    // With E = e^{k/2} and q = e^{-k(t-1/2)} the closed form reduces to
    // (E - q) / ((1 + q)(E - 1)); at t = 0, q == E bit-for-bit.
    let e = (0.5 * k).exp();
    let q = (-k * (t - 0.5)).exp();
    Ok((e - q) / ((1.0 + q) * (0.5 * k).exp_m1()))
}

/// `dα/dt`.
pub fn alpha_derivative(t: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    check_unit(t)?;
    let e = (0.5 * k).exp();
    let q = (-k * (t - 0.5)).exp();
    Ok((1.0 + e) / (0.5 * k).exp_m1() * k * q / ((1.0 + q) * (1.0 + q)))
}

fn check_dims(x0: &ArrayView1<'_, f64>, x1: &ArrayView1<'_, f64>) -> Result<()> {
    if x0.len() == x1.len() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "x0 has length {}, x1 has length {}",
            x0.len(),
            x1.len()
        )))
    }
}

/// `μ_t(x0, x1)`.
pub fn mean(
    x0: ArrayView1<'_, f64>,
    x1: ArrayView1<'_, f64>,
    t: f64,
    k: f64,
) -> Result<Array1<f64>> {
    check_dims(&x0, &x1)?;
    let a = alpha(t, k)?;
    Ok(Zip::from(&x0)
        .and(&x1)
        .map_collect(|&a0, &a1| a0 + (a1 - a0) * a))
}

/// `dμ_t/dt`.
pub fn mean_derivative(
    x0: ArrayView1<'_, f64>,
    x1: ArrayView1<'_, f64>,
    t: f64,
    k: f64,
) -> Result<Array1<f64>> {
    check_dims(&x0, &x1)?;
    let da = alpha_derivative(t, k)?;
    Ok(Zip::from(&x0)
        .and(&x1)
        .map_collect(|&a0, &a1| (a1 - a0) * da))
}

/// Bridge standard deviation `σ_t = σ·√(t(1−t))`.
pub fn std(t: f64, sigma: f64) -> Result<f64> {
    check_open_unit(t)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(sigma * (t * (1.0 - t)).sqrt())
}

/// `σ'_t/σ_t = (1 − 2t) / (2t(1 − t))`, independent of `σ`.
pub fn std_log_derivative(t: f64) -> Result<f64> {
    check_open_unit(t)?;
    Ok((1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)))
}

/// Draws `x_t = μ_t + σ_t·noise` for caller-supplied standard-normal `noise`.
pub fn perturb(
    x0: ArrayView1<'_, f64>,
    x1: ArrayView1<'_, f64>,
    t: f64,
    params: &ScheduleParams,
    noise: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    params.check_time(t)?;
    if noise.len() != x0.len() {
        return Err(Error::invalid(format!(
            "noise has length {}, expected {}",
            noise.len(),
            x0.len()
        )));
    }
    let mut m = mean(x0, x1, t, params.k)?;
    let s = std(t, params.sigma)?;
    if s != 0.0 {
        m.scaled_add(s, &noise);
    }
    Ok(m)
}

/// Conditional vector field at `x_t`. `x_ref0` is the terminal-side endpoint:
/// the true codeword when analysing the path, the estimator's output when
/// sampling.
pub fn vector_field(
    x_t: ArrayView1<'_, f64>,
    x_ref0: ArrayView1<'_, f64>,
    x1: ArrayView1<'_, f64>,
    t: f64,
    params: &ScheduleParams,
) -> Result<Array1<f64>> {
    params.check_time(t)?;
    if x_t.len() != x1.len() {
        return Err(Error::invalid(format!(
            "x_t has length {}, x1 has length {}",
            x_t.len(),
            x1.len()
        )));
    }
    let ratio = std_log_derivative(t)?;
    let mu = mean(x_ref0, x1, t, params.k)?;
    let mut u = mean_derivative(x_ref0, x1, t, params.k)?;
    Zip::from(&mut u)
        .and(&x_t)
        .and(&mu)
        .for_each(|u, &x, &m| *u += ratio * (x - m));
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    // Literal form as printed, used as an independent route.
    fn alpha_literal(t: f64, k: f64) -> f64 {
        let e = (k / 2.0).exp();
        ((1.0 + e) / (1.0 + (-k * (t - 0.5)).exp()) - 1.0) / (e - 1.0)
    }

    #[test]
    fn alpha_fixed_points() {
        assert_eq!(alpha(0.0, 10.0).unwrap(), 0.0);
        assert!((alpha(0.5, 10.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((alpha(1.0, 10.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_against_high_precision() {
        // 40-digit evaluation of the printed closed form
        assert!((alpha(0.75, 6.0).unwrap() - 0.850_853_547_929_667).abs() < 1e-12);
        assert!((alpha(0.75, 6.0).unwrap() - alpha_literal(0.75, 6.0)).abs() < 1e-12);
    }

    #[test]
    fn alpha_rejects_bad_inputs() {
        assert!(matches!(alpha(0.3, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(alpha(0.3, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(alpha(1.2, 3.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn mean_examples() {
        let x0 = array![1.0, -2.0, 0.5];
        let x1 = array![3.0, 4.0, -1.0];
        assert_eq!(mean(x0.view(), x1.view(), 0.0, 6.0).unwrap(), x0);
        let mid = mean(x0.view(), x1.view(), 0.5, 6.0).unwrap();
        for i in 0..3 {
            assert!((mid[i] - (x0[i] + x1[i]) / 2.0).abs() < 1e-14);
        }
        let m = mean(Array1::zeros(4).view(), Array1::ones(4).view(), 0.9, 8.0).unwrap();
        for v in m {
            assert!((v - 0.978_030_179_558_755_9).abs() < 1e-12);
        }
        assert!(mean(x0.view(), Array1::zeros(2).view(), 0.5, 6.0).is_err());
    }

    #[test]
    fn mean_derivative_examples() {
        let x = array![0.3, -0.7];
        let d = mean_derivative(x.view(), x.view(), 0.37, 6.0).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));

        let k: f64 = 6.0;
        let x0 = array![0.0, 1.0];
        let x1 = array![2.0, -1.0];
        let d = mean_derivative(x0.view(), x1.view(), 0.5, k).unwrap();
        let e = (k / 2.0).exp();
        let c = k * (1.0 + e) / (4.0 * (e - 1.0));
        assert!((d[0] - 2.0 * c).abs() < 1e-12);
        assert!((d[1] + 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn std_examples() {
        assert!((std(0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((std(0.9, 2.0).unwrap() - 0.6).abs() < 1e-12);
        assert!((std(0.03, 0.5).unwrap() - 0.085_293_610_546_159_9).abs() < 1e-15);
        assert!(matches!(std(0.0, 1.0), Err(Error::OutOfDomain { .. })));
        assert!(matches!(std(1.0, 1.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn std_log_derivative_examples() {
        assert_eq!(std_log_derivative(0.5).unwrap(), 0.0);
        assert!((std_log_derivative(0.25).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        // d/dt log σ_t at 0.97, evaluated to 25 digits
        assert!((std_log_derivative(0.97).unwrap() + 16.151_202_749_140_893).abs() < 1e-10);
        let h = 1e-6;
        let fd =
            ((std(0.97 + h, 1.0).unwrap()).ln() - (std(0.97 - h, 1.0).unwrap()).ln()) / (2.0 * h);
        assert!((fd - std_log_derivative(0.97).unwrap()).abs() / fd.abs() < 1e-6);
        assert!(std_log_derivative(0.0).is_err());
        assert!(std_log_derivative(1.0).is_err());
    }

    #[test]
    fn perturb_degenerate_cases() {
        let p = ScheduleParams::default();
        let x0 = array![1.0, 0.0, -1.0];
        let x1 = array![0.2, 0.4, 0.6];
        let mu = mean(x0.view(), x1.view(), 0.4, p.k).unwrap();
        let zero = Array1::zeros(3);
        assert_eq!(
            perturb(x0.view(), x1.view(), 0.4, &p, zero.view()).unwrap(),
            mu
        );
        let quiet = ScheduleParams { sigma: 0.0, ..p };
        let z = array![3.0, -2.0, 1.0];
        assert_eq!(
            perturb(x0.view(), x1.view(), 0.4, &quiet, z.view()).unwrap(),
            mu
        );
        assert!(matches!(
            perturb(x0.view(), x1.view(), 0.99, &p, z.view()),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn perturb_monte_carlo_moments() {
        let p = ScheduleParams {
            sigma: 0.8,
            ..Default::default()
        };
        let x0 = array![1.0, -0.5];
        let x1 = array![-0.3, 2.0];
        let t = 0.35;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let (mut s1, mut s2) = (Array1::<f64>::zeros(2), Array1::<f64>::zeros(2));
        for _ in 0..n {
            let z = Array1::from_shape_fn(2, |_| rng.sample::<f64, _>(StandardNormal));
            let x = perturb(x0.view(), x1.view(), t, &p, z.view()).unwrap();
            s1 += &x;
            s2 += &(&x * &x);
        }
        let want_mu = mean(x0.view(), x1.view(), t, p.k).unwrap();
        let want_sd = std(t, p.sigma).unwrap();
        let nf = n as f64;
        for i in 0..2 {
            let m = s1[i] / nf;
            let sd = (s2[i] / nf - m * m).sqrt();
            let se_mean = want_sd / nf.sqrt();
            // standard error of the sample std for a Gaussian is σ/√(2n)
            let se_sd = want_sd / (2.0 * nf).sqrt();
            assert!(
                (m - want_mu[i]).abs() < 3.0 * se_mean,
                "mean {m} vs {}",
                want_mu[i]
            );
            assert!((sd - want_sd).abs() < 3.0 * se_sd, "sd {sd} vs {want_sd}");
        }
    }

    #[test]
    fn vector_field_examples() {
        let p = ScheduleParams::default();
        let x0 = array![0.5, -1.0, 2.0];
        let x1 = array![1.5, 0.0, -1.0];
        for t in [0.2, 0.5] {
            let mu = mean(x0.view(), x1.view(), t, p.k).unwrap();
            let u = vector_field(mu.view(), x0.view(), x1.view(), t, &p).unwrap();
            let d = mean_derivative(x0.view(), x1.view(), t, p.k).unwrap();
            for i in 0..3 {
                assert!((u[i] - d[i]).abs() < 1e-12);
            }
        }
        // scalar case, evaluated to 25 digits
        let p = ScheduleParams {
            k: 6.0,
            sigma: 1.0,
            ..Default::default()
        };
        let u = vector_field(
            array![0.3].view(),
            array![0.0].view(),
            array![1.0].view(),
            0.25,
            &p,
        )
        .unwrap();
        assert!((u[0] - 1.189_792_363_153_317_8).abs() < 1e-12);
        assert!(vector_field(
            array![0.3].view(),
            array![0.0].view(),
            array![1.0].view(),
            0.01,
            &p
        )
        .is_err());
    }

    #[test]
    fn schedule_params_validation() {
        assert!(ScheduleParams::default().validate().is_ok());
        let bad = [
            ScheduleParams {
                k: 0.0,
                ..Default::default()
            },
            ScheduleParams {
                sigma: -0.1,
                ..Default::default()
            },
            ScheduleParams {
                t_eps: 0.0,
                ..Default::default()
            },
            ScheduleParams {
                t_eps: 0.5,
                ..Default::default()
            },
            ScheduleParams {
                t_max: 1.0,
                ..Default::default()
            },
            ScheduleParams {
                t_max: 0.5,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn alpha_monotone_on_grid() {
        for k in [1.0, 6.0, 10.0, 20.0] {
            let mut prev = alpha(0.0, k).unwrap();
            for i in 1..=10_000 {
                let a = alpha(i as f64 / 10_000.0, k).unwrap();
                assert!(a > prev, "k={k} i={i}");
                prev = a;
            }
        }
    }

    #[test]
    fn steeper_k_is_closer_to_step() {
        for (k1, k2) in [(1.0, 6.0), (6.0, 10.0), (10.0, 20.0)] {
            for t in [0.1, 0.9] {
                let step = if t > 0.5 { 1.0 } else { 0.0 };
                let d1 = (alpha(t, k1).unwrap() - step).abs();
                let d2 = (alpha(t, k2).unwrap() - step).abs();
                assert!(d2 <= d1, "k {k1}->{k2} at t={t}");
            }
        }
    }

    #[test]
    fn bridge_peak_and_symmetry() {
        let sigma = 0.7;
        assert!((std(0.5, sigma).unwrap() - sigma / 2.0).abs() < 1e-15);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            assert!((std(t, sigma).unwrap() - std(1.0 - t, sigma).unwrap()).abs() < 1e-15);
            assert!(std(t, sigma).unwrap() <= sigma / 2.0);
        }
    }

    proptest! {
        #[test]
        fn logistic_symmetry(t in 0.0f64..=1.0, k in 0.1f64..40.0) {
            let s = alpha(t, k).unwrap() + alpha(1.0 - t, k).unwrap();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn boundary_identities(
            x0 in proptest::collection::vec(-10.0f64..10.0, 5),
            x1 in proptest::collection::vec(-10.0f64..10.0, 5),
            k in 0.1f64..30.0,
        ) {
            let x0 = Array1::from(x0);
            let x1 = Array1::from(x1);
            prop_assert_eq!(mean(x0.view(), x1.view(), 0.0, k).unwrap(), x0.clone());
            let end = mean(x0.view(), x1.view(), 1.0, k).unwrap();
            for i in 0..5 {
                prop_assert!((end[i] - x1[i]).abs() <= 1e-12 * x1[i].abs().max(x0[i].abs()).max(1.0));
            }
        }

        #[test]
        fn derivatives_match_finite_differences(t in 0.02f64..0.98, k in 0.5f64..20.0) {
            let h = 1e-6;
            let x0 = array![0.3, -1.2];
            let x1 = array![1.1, 0.4];
            let fd = (mean(x0.view(), x1.view(), t + h, k).unwrap()
                - mean(x0.view(), x1.view(), t - h, k).unwrap()) / (2.0 * h);
            let d = mean_derivative(x0.view(), x1.view(), t, k).unwrap();
            for i in 0..2 {
                prop_assert!((fd[i] - d[i]).abs() <= 1e-5 * d[i].abs());
            }
            let fd_log = (std(t + h, 1.0).unwrap().ln() - std(t - h, 1.0).unwrap().ln()) / (2.0 * h);
            let r = std_log_derivative(t).unwrap();
            prop_assert!((fd_log - r).abs() <= 1e-5 * r.abs().max(1e-3));
        }
    }
}
