//! Linear-path flow matching: corruption, losses, Euler integration and the
//! latent signal-to-noise diagnostic.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};

/// Upper bound of the training τ sampler; caps the `(1−τ)⁻²` weight at 4·10⁴.
pub const TAU_CLAMP: f64 = 0.995;

/// Reported when the residual is exactly zero.
pub const SNR_CAP_DB: f64 = 120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow time {0} outside [0, 1]")]
    FlowTime(f64),
    #[error("velocity undefined at τ = 0")]
    ZeroTime,
    #[error("shape mismatch {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("invalid solver config: {0}")]
    Solver(String),
    #[error("non-finite state at solver step {step}")]
    NonFinite { step: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("reference signal is identically zero")]
    ZeroSignal,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// What the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Clean-target estimate Ẑ (z-prediction).
    #[default]
    Clean,
    /// Path velocity `ε − Z` (v-prediction).
    Velocity,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "z",
            Self::Velocity => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub steps: usize,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            tau_start: 1.0,
            tau_end: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::Solver("steps must be ≥ 1".into()));
        }
        let in_unit = |t: f64| (0.0..=1.0).contains(&t);
        if !in_unit(self.tau_start) || !in_unit(self.tau_end) || self.tau_start < self.tau_end {
            return Err(FlowError::Solver(format!(
                "need 1 ≥ τ_start ({}) ≥ τ_end ({}) ≥ 0",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), FlowError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FlowError::FlowTime(tau));
    }
    Ok(())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), FlowError> {
    if a.shape() != b.shape() {
        return Err(FlowError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `Z_τ = (1−τ)·Z + τ·ε`.
pub fn corrupt<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, tau: T) -> Result<Tensor<T>, FlowError> {
    check_tau(tau.as_f64())?;
    same_shape(z, eps)?;
    let keep = T::one() - tau;
    Ok(z.zip_map(eps, |a, e| keep * a + tau * e)?)
}

/// Training flow time, uniform on `[0, TAU_CLAMP]`.
pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..=TAU_CLAMP)
}

/// `(1−τ)⁻²`, with the denominator floored at `(1−TAU_CLAMP)²`.
pub fn s1_weight(tau: f64) -> f64 {
    let gap = (1.0 - tau).max(1.0 - TAU_CLAMP);
    1.0 / (gap * gap)
}

/// Stage-1 loss: `mean((Ẑ − Z)²) / (1−τ)²`.
pub fn loss_s1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, tau: T) -> Result<T, FlowError> {
    check_tau(tau.as_f64())?;
    same_shape(pred, target)?;
    let mse = pred.sub(target)?.sum_squares() / T::lit(pred.len() as f64);
    finite(mse * T::lit(s1_weight(tau.as_f64())))
}

/// `mean((v̂ − (ε − Z))²)`.
pub fn loss_vpred<T: Scalar>(v: &Tensor<T>, z: &Tensor<T>, eps: &Tensor<T>) -> Result<T, FlowError> {
    same_shape(v, z)?;
    same_shape(z, eps)?;
    let target = eps.sub(z)?;
    let mse = v.sub(&target)?.sum_squares() / T::lit(v.len() as f64);
    finite(mse)
}

fn finite<T: Scalar>(x: T) -> Result<T, FlowError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(FlowError::NonFiniteLoss)
    }
}

/// Mean squared error on the graph, optionally restricted to `mask`ed entries
/// (1 = kept) and scaled by `weight`.
pub fn mse_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, mask: Option<&Tensor<T>>, weight: f64) -> Result<Var, FlowError> {
    same_shape(g.value(pred), target)?;
    let t = g.constant(target.clone());
    let mut diff = g.sub(pred, t)?;
    let count = match mask {
        Some(m) => {
            same_shape(m, target)?;
            let mv = g.constant(m.clone());
            diff = g.mul(diff, mv)?;
            m.sum().as_f64()
        }
        None => target.len() as f64,
    };
    if count == 0.0 {
        return Err(FlowError::Shape(target.shape().to_vec(), vec![0]));
    }
    let ss = g.sum_squares(diff)?;
    Ok(g.scale(ss, T::lit(weight / count))?)
}

/// Graph version of [`loss_s1`].
pub fn loss_s1_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, tau: f64, mask: Option<&Tensor<T>>) -> Result<Var, FlowError> {
    check_tau(tau)?;
    mse_graph(g, pred, target, mask, s1_weight(tau))
}

/// Graph version of [`loss_vpred`].
pub fn loss_vpred_graph<T: Scalar>(g: &mut Graph<T>, v: Var, z: &Tensor<T>, eps: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Var, FlowError> {
    same_shape(z, eps)?;
    mse_graph(g, v, &eps.sub(z)?, mask, 1.0)
}

/// Velocity implied by a clean-target estimate: `v̂ = (Z_τ − Ẑ)/τ`.
pub fn zpred_to_velocity<T: Scalar>(zhat: &Tensor<T>, z_tau: &Tensor<T>, tau: T) -> Result<Tensor<T>, FlowError> {
    check_tau(tau.as_f64())?;
    if tau == T::zero() {
        return Err(FlowError::ZeroTime);
    }
    same_shape(zhat, z_tau)?;
    let inv = T::one() / tau;
    Ok(z_tau.zip_map(zhat, |zt, zh| (zt - zh) * inv)?)
}

/// Uniform Euler integration from `tau_start` down to `tau_end`.
///
/// With [`Parameterization::Clean`] the predictor output is converted with
/// [`zpred_to_velocity`]; a step that lands on τ = 0 assigns `Z ← Ẑ`
/// directly. `predictor(z, τ)` must return the network output for the state
/// at flow time τ.
pub fn ode_solve<T, E, F>(mut predictor: F, z_init: &Tensor<T>, cfg: &SolverConfig, param: Parameterization) -> Result<Tensor<T>, E>
where
    T: Scalar,
    E: From<FlowError>,
    F: FnMut(&Tensor<T>, T) -> Result<Tensor<T>, E>,
{
    cfg.validate()?;
    if !z_init.is_finite() {
        return Err(FlowError::NonFinite { step: 0 }.into());
    }
    let mut z = z_init.clone();
    if cfg.tau_start == cfg.tau_end {
        return Ok(z);
    }
    let h = (cfg.tau_start - cfg.tau_end) / cfg.steps as f64;
    for step in 0..cfg.steps {
        let tau = cfg.tau_start - h * step as f64;
        let next = if step + 1 == cfg.steps {
            cfg.tau_end
        } else {
            cfg.tau_start - h * (step + 1) as f64
        };
        let out = predictor(&z, T::lit(tau))?;
        same_shape(&out, &z)?;
        z = euler_update(z, out, tau, next, param)?;
        if !z.is_finite() {
            return Err(FlowError::NonFinite { step }.into());
        }
    }
    Ok(z)
}

fn euler_update<T: Scalar>(z: Tensor<T>, out: Tensor<T>, tau: f64, next: f64, param: Parameterization) -> Result<Tensor<T>, FlowError> {
    Ok(match param {
            Parameterization::Clean if next == 0.0 => out,
            Parameterization::Clean => {
                let v = zpred_to_velocity(&out, &z, T::lit(tau))?;
                let dt = T::lit(next - tau);
                z.zip_map(&v, |a, b| a + dt * b)?
            }
            Parameterization::Velocity => {
                let dt = T::lit(next - tau);
                z.zip_map(&out, |a, b| a + dt * b)?
            }
    })
}


/// `10·log10(‖Z‖² / ‖Ẑ − Z‖²)`, capped at [`SNR_CAP_DB`].
pub fn latent_snr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, FlowError> {
    same_shape(pred, target)?;
    let signal: f64 = target.data().iter().map(|v| v.as_f64().powi(2)).sum();
    if signal == 0.0 {
        return Err(FlowError::ZeroSignal);
    }
    let noise: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(x.to_vec())
    }

    fn rand(n: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn corrupt_endpoints_and_midpoint() {
        let (z, e) = (rand(7, 1), rand(7, 2));
        assert_eq!(corrupt(&z, &e, 0.0).unwrap(), z);
        assert_eq!(corrupt(&z, &e, 1.0).unwrap(), e);
        assert_eq!(corrupt(&v(&[2.0]), &v(&[0.0]), 0.5).unwrap(), v(&[1.0]));
        assert!(corrupt(&z, &v(&[1.0]), 0.5).is_err());
        assert!(corrupt(&z, &e, 1.2).is_err());
    }

    #[test]
    fn path_derivative_is_noise_minus_clean() {
        let (z, e) = (rand(5, 3), rand(5, 4));
        let h = 1e-6;
        let a = corrupt(&z, &e, 0.4 + h).unwrap();
        let b = corrupt(&z, &e, 0.4 - h).unwrap();
        let fd = a.sub(&b).unwrap().scale(1.0 / (2.0 * h));
        assert!(fd.sub(&e.sub(&z).unwrap()).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn stage1_loss_closed_forms() {
        let z = rand(4, 5);
        assert_eq!(loss_s1(&z, &z, 0.7).unwrap(), 0.0);
        assert_eq!(loss_s1(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 0.0).unwrap(), 1.0);
        assert_eq!(loss_s1(&v(&[1.0]), &v(&[0.0]), 0.5).unwrap(), 4.0);
    }

    #[test]
    fn stage1_loss_equals_two_fraction_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let (z, e, zh) = (rand(6, seed), rand(6, seed + 100), rand(6, seed + 200));
            let tau: f64 = rng.random_range(0.0..=0.9);
            let zt = corrupt(&z, &e, tau).unwrap();
            let literal: f64 = (0..6)
                .map(|i| {
                    let a = (zh.data()[i] - zt.data()[i]) / (1.0 - tau);
                    let b = (z.data()[i] - zt.data()[i]) / (1.0 - tau);
                    (a - b).powi(2)
                })
                .sum::<f64>()
                / 6.0;
            assert!((loss_s1(&zh, &z, tau).unwrap() - literal).abs() <= 1e-12 * literal.max(1.0));
        }
    }

    #[test]
    fn velocity_loss_cases() {
        let (z, e) = (rand(3, 1), rand(3, 2));
        assert_eq!(loss_vpred(&e.sub(&z).unwrap(), &z, &e).unwrap(), 0.0);
        assert_eq!(loss_vpred(&v(&[1.0]), &v(&[0.0]), &v(&[0.0])).unwrap(), 1.0);
        let vh = rand(3, 7);
        let want: f64 = (0..3).map(|i| (vh.data()[i] - (e.data()[i] - z.data()[i])).powi(2)).sum::<f64>() / 3.0;
        assert!((loss_vpred(&vh, &z, &e).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn graph_losses_match_plain_versions() {
        let (z, e, p) = (rand(6, 1), rand(6, 2), rand(6, 3));
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let l = loss_s1_graph(&mut g, pv, &z, 0.3, None).unwrap();
        assert!((g.value(l).data()[0] - loss_s1(&p, &z, 0.3).unwrap()).abs() < 1e-14);
        let l = loss_vpred_graph(&mut g, pv, &z, &e, None).unwrap();
        assert!((g.value(l).data()[0] - loss_vpred(&p, &z, &e).unwrap()).abs() < 1e-14);
        let mask = v(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let l = mse_graph(&mut g, pv, &z, Some(&mask), 1.0).unwrap();
        let want = [0, 2, 5].iter().map(|&i| (p.data()[i] - z.data()[i]).powi(2)).sum::<f64>() / 3.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn velocity_conversion_cases() {
        let zt = rand(4, 1);
        assert!(zpred_to_velocity(&zt, &zt, 0.3).unwrap().data().iter().all(|&x| x == 0.0));
        let (z, e) = (rand(4, 2), rand(4, 3));
        let vel = zpred_to_velocity(&z, &e, 1.0).unwrap();
        assert_eq!(vel, e.sub(&z).unwrap());
        assert_eq!(zpred_to_velocity(&v(&[0.0]), &v(&[1.0]), 0.5).unwrap(), v(&[2.0]));
        assert_eq!(zpred_to_velocity(&z, &e, 0.0), Err(FlowError::ZeroTime));
    }

    fn constant(c: &Tensor<f64>) -> impl FnMut(&Tensor<f64>, f64) -> Result<Tensor<f64>, FlowError> + '_ {
        move |_, _| Ok(c.clone())
    }

    #[test]
    fn constant_predictor_is_integrated_exactly() {
        let (target, noise) = (rand(8, 1), rand(8, 2));
        for steps in [1, 5, 20] {
            let cfg = SolverConfig {
                steps,
                ..Default::default()
            };
            let z = ode_solve(constant(&target), &noise, &cfg, Parameterization::Clean).unwrap();
            assert!(z.sub(&target).unwrap().max_abs() <= 1e-12);
            let cfg = SolverConfig {
                steps,
                tau_start: 1.0,
                tau_end: 0.35,
            };
            let z = ode_solve(constant(&target), &noise, &cfg, Parameterization::Clean).unwrap();
            let want = corrupt(&target, &noise, 0.35).unwrap();
            assert!(z.sub(&want).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_interval_returns_initial_state() {
        let noise = rand(3, 2);
        let cfg = SolverConfig {
            steps: 4,
            tau_start: 0.5,
            tau_end: 0.5,
        };
        let z = ode_solve(constant(&rand(3, 1)), &noise, &cfg, Parameterization::Clean).unwrap();
        assert_eq!(z, noise);
    }

    #[test]
    fn invalid_solver_configs_rejected() {
        for cfg in [
            SolverConfig { steps: 0, ..Default::default() },
            SolverConfig { steps: 2, tau_start: 0.2, tau_end: 0.5 },
            SolverConfig { steps: 2, tau_start: 1.2, tau_end: 0.0 },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn non_finite_prediction_reports_step() {
        let noise = rand(2, 2);
        let mut calls = 0;
        let r: Result<_, FlowError> = ode_solve(
            |z: &Tensor<f64>, _| {
                calls += 1;
                Ok(if calls == 3 { z.map(|_| f64::NAN) } else { z.clone() })
            },
            &noise,
            &SolverConfig::default(),
            Parameterization::Clean,
        );
        assert_eq!(r, Err(FlowError::NonFinite { step: 2 }));
    }

    /// For a clean-target predictor `Ẑ(τ) = q(τ)` the exact flow satisfies
    /// `dZ/dτ = (Z − q(τ))/τ`, i.e. `Z(τ) = τ·(Z(1) − F(τ) + F(1))` with
    /// `F(s) = ∫ q(s)/s² ds = −a/s + b·ln s + c·s`.
    #[test]
    fn euler_converges_at_first_order() {
        let (a, b, c) = (0.7, -1.3, 2.1);
        let z1 = 0.4;
        let tau_end = 0.2;
        let f = |s: f64| -a / s + b * s.ln() + c * s;
        let exact = tau_end * (z1 - f(tau_end) + f(1.0));
        let err = |steps| {
            let cfg = SolverConfig {
                steps,
                tau_start: 1.0,
                tau_end,
            };
            let out = ode_solve(|_: &Tensor<f64>, t: f64| -> Result<_, FlowError> { Ok(v(&[a + b * t + c * t * t])) }, &v(&[z1]), &cfg, Parameterization::Clean).unwrap();
            (out.data()[0] - exact).abs()
        };
        let errs: Vec<f64> = [40, 80, 160, 320].iter().map(|&n| err(n)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn velocity_parameterization_integrates_constant_field() {
        let (z0, noise) = (rand(4, 1), rand(4, 2));
        let vel = noise.sub(&z0).unwrap();
        let z = ode_solve(constant(&vel), &noise, &SolverConfig::default(), Parameterization::Velocity).unwrap();
        assert!(z.sub(&z0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn snr_cases() {
        let z = rand(10, 1);
        assert_eq!(latent_snr(&z, &z).unwrap(), SNR_CAP_DB);
        assert!(latent_snr(&z.scale(0.0), &z).unwrap().abs() < 1e-12);
        let s2: f64 = z.sum_squares();
        let residual = Tensor::full(&[10], (s2 / 100.0 / 10.0).sqrt());
        let pred = z.add(&residual).unwrap();
        assert!((latent_snr(&pred, &z).unwrap() - 20.0).abs() < 1e-10);
        assert_eq!(latent_snr(&z, &z.scale(0.0)), Err(FlowError::ZeroSignal));
    }

    #[test]
    fn tau_sampler_respects_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = sample_tau(&mut rng);
            assert!((0.0..=TAU_CLAMP).contains(&t));
        }
        assert!((s1_weight(1.0) - 4e4).abs() < 1e-6);
    }
}
