//! Diffusion noise schedules.
//!
//! A schedule holds per-step `beta[t]`, `alpha[t] = 1 - beta[t]` and the
//! cumulative signal fraction `gamma[t] = prod_{s<=t} alpha[s]` for
//! `t = 1..=T`, with `gamma[0] = 1` stored explicitly so interval sampling
//! and the final reverse step are exact. `gamma` is always derived by the
//! running product, so `gamma[t] == gamma[t-1] * alpha[t]` holds bitwise.

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Schedule family plus its construction parameters (kept for config echo
/// and checkpoint round-trips).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { s: f64 },
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear { .. } => "linear",
            ScheduleKind::Cosine { .. } => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,  // beta[t-1] holds step t
    alpha: Vec<f64>, // alpha[t-1] holds step t
    gamma: Vec<f64>, // gamma[t] holds step t; gamma[0] == 1
}

impl NoiseSchedule {
    /// `beta[t]` interpolates `beta_start..=beta_end` linearly and endpoint
    /// exactly across `t = 1..=T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(CoreError::InvalidConfig("schedule needs steps >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "linear schedule requires 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (1..=steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    let u = (t - 1) as f64 / (steps - 1) as f64;
                    beta_start * (1.0 - u) + beta_end * u
                }
            })
            .collect();
        Self::from_betas(ScheduleKind::Linear {
            beta_start,
            beta_end,
        }, beta)
    }

    /// Squared-cosine schedule: `gamma_f(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)` and
    /// `beta[t] = 1 - gamma_f(t)/gamma_f(t-1)` clamped to at most 0.999.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps < 1 {
            return Err(CoreError::InvalidConfig("schedule needs steps >= 1".into()));
        }
        if s <= 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "cosine schedule requires s > 0, got {s}"
            )));
        }
        let f = |t: f64| {
            let x = ((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let beta: Vec<f64> = (1..=steps)
            .map(|t| {
                let g_t = f(t as f64) / f0;
                let g_prev = f((t - 1) as f64) / f0;
                (1.0 - g_t / g_prev).min(0.999)
            })
            .collect();
        Self::from_betas(ScheduleKind::Cosine { s }, beta)
    }

    /// Rebuild from a stored beta array (checkpoint load path); `alpha` and
    /// `gamma` are re-derived, which reproduces them bitwise.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(CoreError::InvalidConfig("empty beta array".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(CoreError::InvalidConfig(
                "every beta must lie strictly in (0, 1)".into(),
            ));
        }
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut gamma = Vec::with_capacity(beta.len() + 1);
        gamma.push(1.0);
        for (t, &a) in alpha.iter().enumerate() {
            gamma.push(gamma[t] * a);
        }
        if gamma.windows(2).any(|w| w[1] >= w[0]) || *gamma.last().unwrap() <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "gamma must be strictly decreasing and positive".into(),
            ));
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha,
            gamma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta[t]` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha[t]` for `t in 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `gamma[t]` for `t in 0..=T` (`gamma[0] == 1`).
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Draw `(gamma, t)` for training: `t` uniform on `{1..T}`, then `gamma`
    /// uniform on `[gamma[t], gamma[t-1]]`, so the model sees a continuum of
    /// noise levels rather than the T grid points.
    pub fn sample_gamma(&self, rng: &mut Rng) -> (f64, usize) {
        let t = 1 + rng.index(self.steps());
        let u = rng.uniform();
        (self.gamma_within(t, u), t)
    }

    /// Deterministic interior of [`Self::sample_gamma`]: interpolant `u = 0`
    /// gives exactly `gamma[t]`, `u = 1` exactly `gamma[t-1]`.
    pub fn gamma_within(&self, t: usize, u: f64) -> f64 {
        let lo = self.gamma[t];
        let hi = self.gamma[t - 1];
        lo * (1.0 - u) + hi * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Double-double cumulative product: ~31 significant digits, used as the
    /// extended-precision oracle for gamma.
    fn dd_product(factors: impl Iterator<Item = f64>) -> f64 {
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        for b in factors {
            let p = hi * b;
            let e = hi.mul_add(b, -p); // exact two-product error
            let lo2 = lo * b + e;
            let s = p + lo2;
            let err = lo2 - (s - p);
            hi = s;
            lo = err;
        }
        hi + lo
    }

    #[test]
    fn linear_paper_schedule_endpoints_exact() {
        let s = NoiseSchedule::linear(2000, 1e-6, 1e-2).unwrap();
        assert_eq!(s.beta(1), 1e-6);
        assert_eq!(s.beta(2000), 1e-2);
        assert_eq!(s.steps(), 2000);
    }

    #[test]
    fn single_step_gamma() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.gamma(1), 1.0 - 0.3);
        assert_eq!(s.gamma(0), 1.0);
    }

    #[test]
    fn linear_gamma_matches_extended_precision_product() {
        let s = NoiseSchedule::linear(2000, 1e-6, 1e-2).unwrap();
        let oracle = dd_product(s.betas().iter().map(|&b| 1.0 - b));
        let got = s.gamma(2000);
        assert!(
            ((got - oracle) / oracle).abs() < 1e-9,
            "gamma[2000] {got} vs oracle {oracle}"
        );
        assert!(got < 1e-4, "near-total noise expected, got {got}");
    }

    #[test]
    fn cosine_reference_point_and_monotonicity() {
        let s = NoiseSchedule::cosine(2000, 0.008).unwrap();
        assert_eq!(s.gamma(0), 1.0);
        for t in 1..=2000 {
            assert!(s.gamma(t) < s.gamma(t - 1), "gamma not decreasing at {t}");
        }
    }

    #[test]
    fn cosine_matches_formula_oracle() {
        let steps = 10usize;
        let s_off = 0.008;
        let sched = NoiseSchedule::cosine(steps, s_off).unwrap();
        // Direct evaluation of the construction: beta from the cos^2 ratio
        // with its 0.999 clamp, gamma as the running product.
        let f = |t: f64| {
            (((t / steps as f64 + s_off) / (1.0 + s_off)) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let mut expect_gamma = 1.0f64;
        for t in 1..=steps {
            let beta = (1.0 - (f(t as f64) / f(0.0)) / (f((t - 1) as f64) / f(0.0))).min(0.999);
            expect_gamma *= 1.0 - beta;
            let got = sched.gamma(t);
            assert!(
                (got - expect_gamma).abs() <= 1e-12 * expect_gamma.max(1e-300),
                "gamma[{t}] {got} vs formula {expect_gamma}"
            );
            assert!((sched.beta(t) - beta).abs() < 1e-15);
        }
        // away from the clamp the raw ratio formula itself must hold
        for t in 1..steps {
            let raw = f(t as f64) / f(0.0);
            assert!((sched.gamma(t) - raw).abs() < 1e-12, "gamma[{t}] vs raw formula");
        }
    }

    #[test]
    fn gamma_product_identity_is_exact() {
        for sched in [
            NoiseSchedule::linear(500, 1e-5, 5e-2).unwrap(),
            NoiseSchedule::cosine(500, 0.008).unwrap(),
        ] {
            for t in 1..=500 {
                assert_eq!(sched.gamma(t), sched.gamma(t - 1) * sched.alpha(t));
            }
        }
    }

    #[test]
    fn construction_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 1e-6, 1e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 1e-2).is_err());
        assert!(NoiseSchedule::linear(10, 1e-2, 1e-6).is_err());
        assert!(NoiseSchedule::linear(10, 1e-3, 1.0).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
        assert!(NoiseSchedule::from_betas(
            ScheduleKind::Linear {
                beta_start: 0.5,
                beta_end: 0.5
            },
            vec![]
        )
        .is_err());
    }

    #[test]
    fn sample_gamma_stays_in_range() {
        let sched = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let (g, t) = sched.sample_gamma(&mut rng);
            assert!((1..=50).contains(&t));
            assert!(g > sched.gamma(50) && g <= 1.0, "gamma {g} out of range");
            assert!(g >= sched.gamma(t) && g <= sched.gamma(t - 1));
        }
    }

    #[test]
    fn sample_gamma_single_step_mean() {
        let sched = NoiseSchedule::linear(1, 0.4, 0.4).unwrap();
        let mut rng = Rng::new(6);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += sched.sample_gamma(&mut rng).0;
        }
        let mean = acc / n as f64;
        let expect = (1.0 + sched.gamma(1)) / 2.0;
        assert!(
            (mean - expect).abs() / expect < 0.01,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn stubbed_interpolant_hits_interval_bounds() {
        let sched = NoiseSchedule::linear(10, 1e-3, 1e-1).unwrap();
        assert_eq!(sched.gamma_within(5, 0.0), sched.gamma(5));
        assert_eq!(sched.gamma_within(5, 1.0), sched.gamma(4));
    }

    #[test]
    fn step_index_marginal_is_uniform() {
        let steps = 20usize;
        let sched = NoiseSchedule::linear(steps, 1e-4, 1e-2).unwrap();
        let mut rng = Rng::new(7);
        let n = 1_000_000usize;
        let mut counts = vec![0usize; steps];
        for _ in 0..n {
            let (_, t) = sched.sample_gamma(&mut rng);
            counts[t - 1] += 1;
        }
        // 3-sigma multinomial bound per bin
        let p = 1.0 / steps as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "bin {i} deviates {dev} > {}", 3.0 * sigma);
        }
    }
}
