//! Euler integration of the estimator-induced vector field.
//!
//! Sampling starts from the feature vector `x1` at `t = t_max` and steps down
//! to `t_eps` on a uniform grid of `N` steps. At each step the estimator's
//! codeword guess `x̂0` stands in for the true codeword in the conditional
//! vector field, and the state moves by `−u·dt` (time runs backwards). One
//! estimator evaluation is made per step. No noise is injected, so sampling is
//! deterministic.

use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::estimator::TargetEstimator;
use crate::schedules::{vector_field, ScheduleParams};
use crate::taxonomy::TaxonomyCodebook;
use crate::{Error, Result};

/// Slack for `t − dt ≥ t_eps` when the grid endpoint is computed in floating point.
const GRID_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub schedule: ScheduleParams,
    pub record_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(num_steps: usize, schedule: ScheduleParams) -> Self {
        Self {
            num_steps,
            schedule,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid("sampler num_steps must be >= 1"));
        }
        self.schedule.validate()
    }

    /// Time after `n` of `N` steps; the last grid point is exactly `t_eps`.
    pub fn time_at(&self, n: usize) -> f64 {
        let s = &self.schedule;
        if n >= self.num_steps {
            s.t_eps
        } else {
            s.t_max - n as f64 * (s.t_max - s.t_eps) / self.num_steps as f64
        }
    }
}

/// States visited by the sampler, from `(t_max, x1)` to `(t_eps, x̂0)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub entries: Vec<(f64, Array1<f64>)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    /// Index of the entry whose time is closest to `t` (earliest on ties).
    pub fn nearest(&self, t: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (ti, _)) in self.entries.iter().enumerate() {
            let d = (ti - t).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// One comma-separated row per entry: `t` then the state values, all with
    /// nine significant digits.
    pub fn write_delimited<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, state) in &self.entries {
            write_row(&mut w, *t, state.view())?;
        }
        Ok(())
    }
}

pub(crate) fn write_row<W: Write>(
    w: &mut W,
    t: f64,
    values: ArrayView1<'_, f64>,
) -> std::io::Result<()> {
    write!(w, "{}", format_sig9(t))?;
    for v in values {
        write!(w, ",{}", format_sig9(*v))?;
    }
    writeln!(w)
}

/// Fixed-point decimal rendering with nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0.00000000".into();
    }
    // rely on std for correct rounding, then move the decimal point
    let sci = format!("{:.8e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let sign = if v < 0.0 { "-" } else { "" };
    if exp < 0 {
        format!("{sign}0.{}{digits}", "0".repeat((-exp - 1) as usize))
    } else {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            format!("{sign}{digits}{}", "0".repeat(int_len - digits.len()))
        } else {
            format!("{sign}{}.{}", &digits[..int_len], &digits[int_len..])
        }
    }
}

/// Moves `state` from `t` to `t − dt`.
#[allow(clippy::too_many_arguments)]
pub fn euler_step<E: TargetEstimator + ?Sized>(
    state: ArrayView1<'_, f64>,
    t: f64,
    x1: ArrayView1<'_, f64>,
    condition_stack: ArrayView2<'_, f64>,
    estimator: &E,
    schedule: &ScheduleParams,
    dt: f64,
) -> Result<Array1<f64>> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("step size must be >= 0, got {dt}")));
    }
    schedule.check_time(t)?;
    if t - dt < schedule.t_eps - GRID_SLACK {
        return Err(Error::OutOfDomain {
            what: "t - dt",
            value: t - dt,
            lo: schedule.t_eps,
            hi: schedule.t_max,
        });
    }
    let x0_hat = estimator.estimate(state, condition_stack, t)?;
    let u = vector_field(state, x0_hat.view(), x1, t, schedule)?;
    let mut next = state.to_owned();
    next.scaled_add(-dt, &u);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(
            "euler step",
            format!("non-finite state at t = {t}"),
        ));
    }
    Ok(next)
}

/// Integrates from `(t_max, x1)` down to `t_eps` in `num_steps` uniform steps.
pub fn sample<E: TargetEstimator + ?Sized>(
    x1: ArrayView1<'_, f64>,
    condition_stack: ArrayView2<'_, f64>,
    estimator: &E,
    config: &SamplerConfig,
) -> Result<(Array1<f64>, Option<Trajectory>)> {
    let (state, traj) = integrate(
        x1,
        condition_stack,
        estimator,
        config,
        config.record_trajectory,
    )?;
    Ok((state, traj))
}

fn integrate<E: TargetEstimator + ?Sized>(
    x1: ArrayView1<'_, f64>,
    condition_stack: ArrayView2<'_, f64>,
    estimator: &E,
    config: &SamplerConfig,
    record: bool,
) -> Result<(Array1<f64>, Option<Trajectory>)> {
    config.validate()?;
    if x1.len() != estimator.dim() {
        return Err(Error::invalid(format!(
            "x1 has length {}, estimator dim is {}",
            x1.len(),
            estimator.dim()
        )));
    }
    let mut state = x1.to_owned();
    let mut traj = record.then(|| Trajectory {
        entries: Vec::with_capacity(config.num_steps + 1),
    });
    if let Some(tr) = traj.as_mut() {
        tr.entries.push((config.time_at(0), state.clone()));
    }
    for n in 0..config.num_steps {
        let t = config.time_at(n);
        let dt = t - config.time_at(n + 1);
        state = euler_step(
            state.view(),
            t,
            x1,
            condition_stack,
            estimator,
            &config.schedule,
            dt,
        )
        .map_err(|e| match e {
            Error::Numeric { stage, detail } => Error::Numeric {
                stage: format!("{stage} {}", n + 1),
                detail,
            },
            other => other,
        })?;
        if let Some(tr) = traj.as_mut() {
            tr.entries.push((config.time_at(n + 1), state.clone()));
        }
    }
    Ok((state, traj))
}

/// Result of [`infer_class`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub final_state: Array1<f64>,
    pub trajectory: Option<Trajectory>,
}

/// Samples, then classifies the final state against the codebook. If
/// classification fails the error carries the full trajectory.
pub fn infer_class<E: TargetEstimator + ?Sized>(
    x1: ArrayView1<'_, f64>,
    condition_stack: ArrayView2<'_, f64>,
    estimator: &E,
    codebook: &TaxonomyCodebook,
    config: &SamplerConfig,
) -> Result<Inference> {
    // the trajectory is always recorded so a failure can be diagnosed
    let (final_state, traj) = integrate(x1, condition_stack, estimator, config, true)?;
    let traj = traj.expect("recorded");
    match codebook.classify(final_state.view()) {
        Ok((predicted, scores)) => Ok(Inference {
            predicted,
            scores,
            final_state,
            trajectory: config.record_trajectory.then_some(traj),
        }),
        Err(source) => Err(Error::Inference {
            source: Box::new(source),
            trajectory: Box::new(traj),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::mean;
    use crate::taxonomy::ClassTaxonomy;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Always returns a fixed vector, whatever the input.
    struct Constant(Array1<f64>);

    impl TargetEstimator for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn estimate(
            &self,
            _: ArrayView1<'_, f64>,
            _: ArrayView2<'_, f64>,
            _: f64,
        ) -> Result<Array1<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cond(l: usize) -> Array2<f64> {
        Array2::zeros((1, l))
    }

    fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    #[test]
    fn euler_step_tracks_mean_path() {
        let sched = ScheduleParams::default();
        let x0 = Array1::from(vec![1.0, -0.5, 0.25]);
        let x1 = Array1::from(vec![-0.3, 0.8, 1.1]);
        let oracle = Constant(x0.clone());
        let t = 0.6;
        for dt in [1e-2, 5e-3, 2.5e-3] {
            let start = mean(x0.view(), x1.view(), t, sched.k).unwrap();
            let next = euler_step(
                start.view(),
                t,
                x1.view(),
                cond(3).view(),
                &oracle,
                &sched,
                dt,
            )
            .unwrap();
            let want = mean(x0.view(), x1.view(), t - dt, sched.k).unwrap();
            let err = (&next - &want).mapv(f64::abs).sum();
            let scale = (&x1 - &x0).mapv(f64::abs).sum();
            // local error of a first-order step on a smooth path: bounded by C·dt²
            assert!(err <= 10.0 * dt * dt * scale, "dt={dt} err={err}");
        }
    }

    #[test]
    fn zero_step_and_fixed_point() {
        let sched = ScheduleParams::default();
        let x = Array1::from(vec![0.4, -0.2]);
        let est = Constant(Array1::from(vec![1.0, 1.0]));
        let same = euler_step(x.view(), 0.5, x.view(), cond(2).view(), &est, &sched, 0.0).unwrap();
        assert_eq!(same, x);

        // estimator returning x1 makes μ_t = x1 and μ'_t = 0, so u = 0 at x_t = x1
        let x1 = Array1::from(vec![0.3, 0.7]);
        let est = Constant(x1.clone());
        let next =
            euler_step(x1.view(), 0.8, x1.view(), cond(2).view(), &est, &sched, 0.1).unwrap();
        assert_eq!(next, x1);
    }

    #[test]
    fn euler_step_domain_checks() {
        let sched = ScheduleParams::default();
        let x = Array1::from(vec![0.4, -0.2]);
        let est = Constant(x.clone());
        assert!(euler_step(x.view(), 0.1, x.view(), cond(2).view(), &est, &sched, 0.08).is_err());
        assert!(euler_step(x.view(), 0.99, x.view(), cond(2).view(), &est, &sched, 0.01).is_err());
        assert!(euler_step(x.view(), 0.5, x.view(), cond(2).view(), &est, &sched, -0.1).is_err());
    }

    #[test]
    fn single_step_equals_euler_step() {
        let sched = ScheduleParams::default();
        let x0 = Array1::from(vec![1.0, 0.0, -1.0, 0.0]);
        let x1 = Array1::from(vec![0.2, 0.9, -0.4, 0.3]);
        let est = Constant(x0.clone());
        let cfg = SamplerConfig::new(1, sched);
        let (out, traj) = sample(x1.view(), cond(4).view(), &est, &cfg).unwrap();
        assert!(traj.is_none());
        let direct = euler_step(
            x1.view(),
            sched.t_max,
            x1.view(),
            cond(4).view(),
            &est,
            &sched,
            sched.t_max - sched.t_eps,
        )
        .unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn oracle_integration_reaches_codeword() {
        let sched = ScheduleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x0 = Array1::from_shape_fn(64, |_| rng.sample::<f64, _>(StandardNormal));
            let x1 = Array1::from_shape_fn(64, |_| rng.sample::<f64, _>(StandardNormal));
            let (out, _) = sample(
                x1.view(),
                cond(64).view(),
                &Constant(x0.clone()),
                &SamplerConfig::new(100, sched),
            )
            .unwrap();
            assert!(cosine(out.view(), x0.view()) >= 0.99);
        }
    }

    #[test]
    fn trajectory_shape_and_grid() {
        let sched = ScheduleParams::default();
        let x1 = Array1::from(vec![0.2, 0.9, -0.4, 0.3]);
        let est = Constant(Array1::from(vec![1.0, 0.0, -1.0, 0.0]));
        let cfg = SamplerConfig {
            record_trajectory: true,
            ..SamplerConfig::new(10, sched)
        };
        let (out, traj) = sample(x1.view(), cond(4).view(), &est, &cfg).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.len(), 11);
        assert_eq!(traj.entries[0].0, sched.t_max);
        assert_eq!(traj.entries[0].1, x1);
        assert_eq!(traj.entries[10].0, sched.t_eps);
        assert_eq!(traj.entries[10].1, out);
        let times: Vec<f64> = traj.times().collect();
        let step = (sched.t_max - sched.t_eps) / 10.0;
        for w in times.windows(2) {
            assert!(w[1] < w[0]);
            assert!((w[0] - w[1] - step).abs() < 1e-12);
        }
        assert_eq!(traj.nearest(0.5), Some(5));
        assert_eq!(traj.nearest(2.0), Some(0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = ScheduleParams::default();
        let x1 = Array1::from(vec![0.2, 0.9, -0.4, 0.3]);
        let est = Constant(Array1::from(vec![1.0, 0.0, -1.0, 0.0]));
        let cfg = SamplerConfig::new(7, sched);
        let a = sample(x1.view(), cond(4).view(), &est, &cfg).unwrap().0;
        let b = sample(x1.view(), cond(4).view(), &est, &cfg).unwrap().0;
        assert_eq!(a.mapv(f64::to_bits), b.mapv(f64::to_bits));
    }

    #[test]
    fn constant_codeword_estimator_wins_as_steps_grow() {
        let tax = ClassTaxonomy::new(["a", "b", "c", "d"]).unwrap();
        let cb = TaxonomyCodebook::build(&tax, 32).unwrap();
        // x1 strongly aligned with class 0; the estimator insists on class 2
        let x1 = &cb.codeword(0) * 3.0;
        let est = Constant(cb.codeword(2).to_owned());
        let sched = ScheduleParams::default();
        let mut last_score = f64::NEG_INFINITY;
        let mut predicted = Vec::new();
        for n in [1, 2, 4, 10, 20, 100] {
            let inf = infer_class(
                x1.view(),
                cond(32).view(),
                &est,
                &cb,
                &SamplerConfig::new(n, sched),
            )
            .unwrap();
            assert!(inf.scores[2] >= last_score - 1e-12);
            last_score = inf.scores[2];
            predicted.push(inf.predicted);
        }
        assert_eq!(*predicted.last().unwrap(), 2);
    }

    #[test]
    fn zero_final_state_surfaces_trajectory() {
        let tax = ClassTaxonomy::new(["a", "b"]).unwrap();
        let cb = TaxonomyCodebook::build(&tax, 8).unwrap();
        let zero = Array1::zeros(8);
        let est = Constant(zero.clone());
        match infer_class(
            zero.view(),
            cond(8).view(),
            &est,
            &cb,
            &SamplerConfig::new(3, ScheduleParams::default()),
        ) {
            Err(Error::Inference { source, trajectory }) => {
                assert!(matches!(*source, Error::DegenerateInput(_)));
                assert_eq!(trajectory.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_state_names_the_step() {
        struct Blowup;
        impl TargetEstimator for Blowup {
            fn dim(&self) -> usize {
                2
            }
            fn estimate(
                &self,
                _: ArrayView1<'_, f64>,
                _: ArrayView2<'_, f64>,
                _: f64,
            ) -> Result<Array1<f64>> {
                Ok(Array1::from(vec![f64::INFINITY, 0.0]))
            }
        }
        let x1 = Array1::from(vec![1.0, 1.0]);
        let err = sample(
            x1.view(),
            cond(2).view(),
            &Blowup,
            &SamplerConfig::new(3, ScheduleParams::default()),
        )
        .unwrap_err();
        match err {
            Error::Numeric { stage, .. } => assert_eq!(stage, "euler step 1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(-1.0), "-1.00000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(0.001234567891), "0.00123456789");
        assert_eq!(format_sig9(9.9999999999), "10.0000000");
        assert_eq!(format_sig9(1.5e10), "15000000000");
        for v in [0.123456789, -3.05175781234567, 1e-7, 42.0] {
            let back: f64 = format_sig9(v).parse().unwrap();
            assert!((back - v).abs() <= 5e-9 * v.abs());
        }
        let mut buf = Vec::new();
        let traj = Trajectory {
            entries: vec![(0.97, Array1::from(vec![1.0, -0.25]))],
        };
        traj.write_delimited(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "0.970000000,1.00000000,-0.250000000\n"
        );
    }
}
