//! Conditional diffusion processes: forward noising, the noise-prediction
//! training loss, and the iterative-refinement reverse sampler.
//!
//! Images live in `[0, 1]` storage form; the model works in `[-1, 1]` so the
//! signal and unit-variance noise share scale. The conversion happens at
//! this module's boundary via [`normalize_to_model`] /
//! [`denormalize_from_model`].

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// A training/evaluation batch: the bicubic-upsampled low-resolution
/// condition and the high-resolution target, both in model range and
/// spatially aligned.
#[derive(Debug, Clone)]
pub struct ConditionedBatch<T> {
    pub x_cond: Tensor<T>,
    pub y0: Tensor<T>,
}

impl<T: Element> ConditionedBatch<T> {
    pub fn new(x_cond: Tensor<T>, y0: Tensor<T>) -> Result<Self> {
        if x_cond.shape() != y0.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "conditioned_batch",
                lhs: x_cond.shape().to_vec(),
                rhs: y0.shape().to_vec(),
            });
        }
        x_cond.dims4()?;
        let bound = T::from_f64(1.0 + 1e-6);
        for (name, t) in [("x_cond", &x_cond), ("y0", &y0)] {
            if t.data().iter().any(|&v| v.abs() > bound) {
                return Err(CoreError::InvalidArgument {
                    op: "conditioned_batch",
                    msg: format!("{name} holds values outside the model range [-1, 1]"),
                });
            }
        }
        Ok(ConditionedBatch { x_cond, y0 })
    }

    pub fn batch_size(&self) -> usize {
        self.y0.shape()[0]
    }
}

/// `[0,1]` storage form to `[-1,1]` model range.
pub fn normalize_to_model<T: Element>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| v + v - T::one())
}

/// `[-1,1]` model range back to `[0,1]` storage form (clamped).
pub fn denormalize_from_model<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    x.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
}

/// Closed-form forward marginal: `sqrt(gamma) * y0 + sqrt(1-gamma) * eps`.
pub fn forward_marginal<T: Element>(
    y0: &Tensor<T>,
    gamma: f64,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::InvalidArgument {
            op: "forward_marginal",
            msg: format!("gamma must be in (0, 1], got {gamma}"),
        });
    }
    Tensor::axpby(
        y0,
        T::from_f64(gamma.sqrt()),
        eps,
        T::from_f64((1.0 - gamma).sqrt()),
    )
    .map_err(|_| CoreError::ShapeMismatch {
        op: "forward_marginal",
        lhs: y0.shape().to_vec(),
        rhs: eps.shape().to_vec(),
    })
}

/// Single forward chain step: `sqrt(alpha_t) * y_prev + sqrt(1-alpha_t) * eps`.
pub fn forward_step<T: Element>(
    y_prev: &Tensor<T>,
    alpha_t: f64,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !(alpha_t > 0.0 && alpha_t < 1.0) {
        return Err(CoreError::InvalidArgument {
            op: "forward_step",
            msg: format!("alpha_t must be in (0, 1), got {alpha_t}"),
        });
    }
    Tensor::axpby(
        y_prev,
        T::from_f64(alpha_t.sqrt()),
        eps,
        T::from_f64((1.0 - alpha_t).sqrt()),
    )
    .map_err(|_| CoreError::ShapeMismatch {
        op: "forward_step",
        lhs: y_prev.shape().to_vec(),
        rhs: eps.shape().to_vec(),
    })
}

/// Anything that can predict the injected noise from the condition, the noisy
/// image and the per-sample noise level. Implemented by the bound U-Net and
/// by test stubs.
pub trait NoisePredictor<T: Element> {
    fn predict(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_noisy: Var,
        gammas: &[f64],
    ) -> Result<Var>;
}

/// The `(gamma, t, eps)` draw of one training step. Draw order is fixed:
/// one `(gamma, t)` pair per sample in batch order, then the noise tensor
/// row-major.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T> {
    pub gammas: Vec<f64>,
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
}

pub fn draw_noise<T: Element>(
    shape: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> NoiseDraw<T> {
    let n = shape[0];
    let mut gammas = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let (g, t) = sched.sample_gamma(rng);
        gammas.push(g);
        ts.push(t);
    }
    let eps = Tensor::randn(shape.to_vec(), rng);
    NoiseDraw { gammas, ts, eps }
}

/// Apply the forward marginal per sample with that sample's gamma.
pub fn noisy_batch<T: Element>(
    y0: &Tensor<T>,
    gammas: &[f64],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = y0.dims4()?;
    if gammas.len() != n {
        return Err(CoreError::InvalidArgument {
            op: "noisy_batch",
            msg: format!("{} gammas for batch of {n}", gammas.len()),
        });
    }
    let stride = c * h * w;
    let mut out = vec![T::zero(); y0.numel()];
    for (i, &gamma) in gammas.iter().enumerate() {
        let sg = T::from_f64(gamma.sqrt());
        let se = T::from_f64((1.0 - gamma).sqrt());
        let ys = &y0.data()[i * stride..(i + 1) * stride];
        let es = &eps.data()[i * stride..(i + 1) * stride];
        for ((o, &y), &e) in out[i * stride..(i + 1) * stride]
            .iter_mut()
            .zip(ys)
            .zip(es)
        {
            *o = y * sg + e * se;
        }
    }
    Tensor::new(y0.shape().to_vec(), out)
}

/// Build the training loss `mean(|f(x, noisy, gamma) - eps|^p)` on `g`.
/// Differentiable through the predictor only.
pub fn training_loss_expr<T: Element, P: NoisePredictor<T>>(
    g: &mut Graph<T>,
    predictor: &P,
    batch: &ConditionedBatch<T>,
    draw: &NoiseDraw<T>,
    p_norm: u32,
) -> Result<Var> {
    let noisy = noisy_batch(&batch.y0, &draw.gammas, &draw.eps)?;
    let x_cond = g.input(&batch.x_cond)?;
    let noisy_v = g.input(&noisy)?;
    let eps_v = g.input(&draw.eps)?;
    let pred = predictor.predict(g, x_cond, noisy_v, &draw.gammas)?;
    let diff = g.sub(pred, eps_v)?;
    let powed = g.abs_pow(diff, p_norm)?;
    g.mean_all(powed)
}

/// Convenience wrapper: draw noise, build the expression, return the loss
/// value (used by validation and tests; the training loop keeps the graph to
/// run backward).
pub fn training_loss<T: Element, P: NoisePredictor<T>>(
    predictor: &P,
    batch: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    p_norm: u32,
) -> Result<f64> {
    if batch.batch_size() == 0 {
        return Err(CoreError::InvalidArgument {
            op: "training_loss",
            msg: "empty batch".into(),
        });
    }
    let draw = draw_noise(batch.y0.shape(), sched, rng);
    let mut g = Graph::new();
    let loss = training_loss_expr(&mut g, predictor, batch, &draw, p_norm)?;
    Ok(g.scalar_value(loss).as_f64())
}

/// One reverse refinement step (the predictor is evaluated without gradient
/// tracking):
///
/// `y_{t-1} = (y_t - (1-alpha_t)/sqrt(1-gamma_t) * f) / sqrt(alpha_t)
///            + sqrt(1-alpha_t) * z`
///
/// with `z ~ N(0, I)` drawn row-major for `t > 1` and `z = 0` for `t = 1`.
/// Elementwise evaluation order is exactly as written, so a scripted
/// recomputation with the same draws reproduces the output bitwise.
pub fn reverse_step<T: Element, P: NoisePredictor<T>>(
    predictor: &P,
    x_cond: &Tensor<T>,
    y_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if t < 1 || t > sched.steps() {
        return Err(CoreError::InvalidArgument {
            op: "reverse_step",
            msg: format!("t must be in 1..={}, got {t}", sched.steps()),
        });
    }
    if x_cond.shape() != y_t.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "reverse_step",
            lhs: x_cond.shape().to_vec(),
            rhs: y_t.shape().to_vec(),
        });
    }
    let n = x_cond.shape()[0];
    let gamma_t = sched.gamma(t);
    let alpha_t = sched.alpha(t);

    let mut g = Graph::new();
    let xc = g.input(x_cond)?;
    let yv = g.input(y_t)?;
    let pred = predictor.predict(&mut g, xc, yv, &vec![gamma_t; n])?;
    let eps_hat = g.value(pred);

    let coef = T::from_f64((1.0 - alpha_t) / (1.0 - gamma_t).sqrt());
    let sqrt_alpha = T::from_f64(alpha_t.sqrt());
    let noise_scale = T::from_f64((1.0 - alpha_t).sqrt());
    let mut out = vec![T::zero(); y_t.numel()];
    if t > 1 {
        for ((o, &y), &e) in out.iter_mut().zip(y_t.data()).zip(eps_hat) {
            let z = T::from_f64(rng.gaussian());
            *o = (y - coef * e) / sqrt_alpha + noise_scale * z;
        }
    } else {
        for ((o, &y), &e) in out.iter_mut().zip(y_t.data()).zip(eps_hat) {
            *o = (y - coef * e) / sqrt_alpha;
        }
    }
    Tensor::new(y_t.shape().to_vec(), out)
}

/// Full T-step iterative refinement from pure noise, conditioned on
/// `x_cond`. Draw order: `y_T` row-major first, then each step's `z`. The
/// returned `y_0` is clamped to the model range.
pub fn sample<T: Element, P: NoisePredictor<T>>(
    predictor: &P,
    x_cond: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let mut y = Tensor::randn(x_cond.shape().to_vec(), rng);
    for t in (1..=sched.steps()).rev() {
        y = reverse_step(predictor, x_cond, &y, t, sched, rng)?;
    }
    Ok(y.clamp(-T::one(), T::one()))
}

/// Test/validation stub: always predicts zero noise.
pub struct ZeroPredictor;

impl<T: Element> NoisePredictor<T> for ZeroPredictor {
    fn predict(
        &self,
        g: &mut Graph<T>,
        _x_cond: Var,
        y_noisy: Var,
        _gammas: &[f64],
    ) -> Result<Var> {
        let zeros = Tensor::zeros(g.shape(y_noisy).to_vec());
        g.input(&zeros)
    }
}

/// Test stub that returns a fixed tensor (e.g. the exact noise used to build
/// the input, for algebra-collapse checks).
pub struct FixedPredictor<T>(pub Tensor<T>);

impl<T: Element> NoisePredictor<T> for FixedPredictor<T> {
    fn predict(
        &self,
        g: &mut Graph<T>,
        _x_cond: Var,
        _y_noisy: Var,
        _gammas: &[f64],
    ) -> Result<Var> {
        g.input(&self.0)
    }
}
