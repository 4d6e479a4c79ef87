//! Optimization loop: Adam with bias correction, learning-rate milestones,
//! global-norm gradient clipping, EMA shadow weights, periodic validation
//! and checkpointing.
//!
//! Reproducibility contract: the seed fully determines the batch sequence,
//! the noise draws, the dropout masks and the validation sampling, so two
//! runs with identical config produce byte-identical metrics logs.

pub mod checkpoint;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::denoiser::params::ParamSet;
use crate::denoiser::Denoiser;
use crate::denoiser::DenoiserPredictor;
use crate::diffusion::{self, ConditionedBatch};
use crate::error::{CoreError, Result};
use crate::imaging::{augment, DatasetHandle, Image, ImagePair, Split};
use crate::metrics;
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{Element, Tensor};

// rng stream tags off the master seed
const STREAM_DATA: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_VAL: u64 = 4;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_factor: f64,
    pub total_iters: u64,
    pub val_every: u64,
    /// EMA shadow weights; absent in the first-generation setup.
    pub ema_decay: Option<f64>,
    /// Global-norm gradient clipping; absent in the first-generation setup.
    pub clip_max_norm: Option<f64>,
    pub p_norm: u32,
    pub seed: u64,
    /// Validation sampling step count; `None` samples at the full schedule.
    pub val_steps: Option<usize>,
    /// Size of the fixed validation subset.
    pub val_items: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::InvalidConfig(m));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return fail(format!("lr_factor must be in (0, 1], got {}", self.lr_factor));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return fail(format!("ema_decay must be in [0, 1), got {d}"));
            }
        }
        if let Some(c) = self.clip_max_norm {
            if !(c > 0.0) {
                return fail(format!("clip_max_norm must be positive, got {c}"));
            }
        }
        if self.p_norm != 1 && self.p_norm != 2 {
            return fail(format!("p_norm must be 1 or 2, got {}", self.p_norm));
        }
        if self.val_every == 0 {
            return fail("val_every must be >= 1".into());
        }
        if self.val_items == 0 {
            return fail("val_items must be >= 1".into());
        }
        if let Some(v) = self.val_steps {
            if v == 0 {
                return fail("val_steps must be >= 1 when set".into());
            }
        }
        Ok(())
    }
}

/// Everything the optimizer carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub step: u64,
    pub params: ParamSet<T>,
    pub ema_params: ParamSet<T>,
    pub adam_m: ParamSet<T>,
    pub adam_v: ParamSet<T>,
    pub schedule: NoiseSchedule,
    pub rng: Rng,
}

/// Bias-corrected Adam update in place; `t` is the 1-based step count.
/// Gradients must align with the parameter order.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    m: &mut ParamSet<T>,
    v: &mut ParamSet<T>,
    t: u64,
    grads: &[Vec<T>],
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::InvalidArgument {
            op: "adam_step",
            msg: format!("{} grads for {} params", grads.len(), params.len()),
        });
    }
    for (i, grad) in grads.iter().enumerate() {
        let name = params.name(crate::denoiser::params::ParamId(i)).to_string();
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(CoreError::NonFiniteGrad { name });
        }
    }
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one_m_b1 = T::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = T::from_f64(1.0 - hyper.beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - hyper.beta1.powi(t as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - hyper.beta2.powi(t as i32)));
    let eps = T::from_f64(hyper.eps);
    let lr_t = T::from_f64(lr);

    for i in 0..params.len() {
        let id = crate::denoiser::params::ParamId(i);
        let grad = &grads[i];
        let pv = params.get_mut(id).data_mut();
        let mv = m.get_mut(id).data_mut();
        let vv = v.get_mut(id).data_mut();
        for j in 0..pv.len() {
            let g = grad[j];
            mv[j] = b1 * mv[j] + one_m_b1 * g;
            vv[j] = b2 * vv[j] + one_m_b2 * g * g;
            let m_hat = mv[j] * corr1;
            let v_hat = vv[j] * corr2;
            pv[j] = pv[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm across all gradients (always computed in f64, ascending
/// tensor then element order).
pub fn global_grad_norm<T: Element>(grads: &[Vec<T>]) -> f64 {
    let mut acc = 0.0f64;
    for g in grads {
        for &v in g {
            let x = v.as_f64();
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Scale gradients so the global norm does not exceed `max_norm`; returns
/// the pre-clip norm.
pub fn clip_grad_norm<T: Element>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update<T: Element>(
    ema: &mut ParamSet<T>,
    params: &ParamSet<T>,
    decay: f64,
) -> Result<()> {
    params.check_mirror(ema, "ema_update")?;
    let d = T::from_f64(decay);
    let one_m_d = T::from_f64(1.0 - decay);
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = d * *ev + one_m_d * pv;
        }
    }
    Ok(())
}

/// Stepwise learning-rate decay: `base * factor^(milestones <= step)`,
/// milestone-inclusive.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let hits = cfg.lr_milestones.iter().filter(|&&m| m <= step).count();
    cfg.base_lr * cfg.lr_factor.powi(hits as i32)
}

// -- data plumbing ---------------------------------------------------------------

/// Source of training batches and the fixed validation subset.
pub trait BatchSource<T: Element> {
    fn training_len(&self) -> usize;

    /// Next deterministic batch: iteration order is a seeded shuffle
    /// (reshuffled each epoch), flips are drawn from the same stream.
    fn next_batch(&mut self, batch_size: usize, rng: &mut Rng) -> Result<ConditionedBatch<T>>;

    /// First `count` validation items (id order, no augmentation) as
    /// `(x_cond, y0)` in model range.
    fn validation_items(&self, count: usize) -> Result<Vec<(Tensor<T>, Tensor<T>)>>;
}

/// Preloaded corpus-backed source (train + val splits).
pub struct CorpusSource {
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    order: Vec<usize>,
    cursor: usize,
}

impl CorpusSource {
    pub fn load(root: &Path, hr_size: usize, scale: usize) -> Result<Self> {
        let train_handle = DatasetHandle::open(root, Split::Train, hr_size, scale)?;
        let val_handle = DatasetHandle::open(root, Split::Val, hr_size, scale)?;
        let mut train = Vec::with_capacity(train_handle.len());
        for id in train_handle.ids() {
            train.push(train_handle.load_pair(id)?);
        }
        let mut val = Vec::with_capacity(val_handle.len());
        for id in val_handle.ids() {
            val.push(val_handle.load_pair(id)?);
        }
        let len = train.len();
        Ok(CorpusSource {
            train,
            val,
            order: (0..len).collect(),
            cursor: len, // forces a shuffle on first draw
        })
    }

    pub fn val_len(&self) -> usize {
        self.val.len()
    }

    fn pair_to_model<T: Element>(pair: &ImagePair) -> (Tensor<T>, Tensor<T>) {
        let x = diffusion::normalize_to_model(&pair.lr_up.to_tensor::<T>());
        let y = diffusion::normalize_to_model(&pair.hr.to_tensor::<T>());
        (x, y)
    }
}

fn stack_batch<T: Element>(items: &[(Tensor<T>, Tensor<T>)]) -> Result<ConditionedBatch<T>> {
    let (_, c, h, w) = items[0].0.dims4()?;
    let n = items.len();
    let mut x = Vec::with_capacity(n * c * h * w);
    let mut y = Vec::with_capacity(n * c * h * w);
    for (xi, yi) in items {
        x.extend_from_slice(xi.data());
        y.extend_from_slice(yi.data());
    }
    ConditionedBatch::new(
        Tensor::new(vec![n, c, h, w], x)?,
        Tensor::new(vec![n, c, h, w], y)?,
    )
}

impl<T: Element> BatchSource<T> for CorpusSource {
    fn training_len(&self) -> usize {
        self.train.len()
    }

    fn next_batch(&mut self, batch_size: usize, rng: &mut Rng) -> Result<ConditionedBatch<T>> {
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor >= self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let pair = &self.train[self.order[self.cursor]];
            self.cursor += 1;
            let flipped = augment(pair, rng);
            items.push(Self::pair_to_model::<T>(&flipped));
        }
        stack_batch(&items)
    }

    fn validation_items(&self, count: usize) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        if self.val.is_empty() {
            return Err(CoreError::Dataset("empty validation split".into()));
        }
        Ok(self
            .val
            .iter()
            .take(count)
            .map(Self::pair_to_model::<T>)
            .collect())
    }
}

// -- the loop ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub losses: Vec<f64>,
    pub metrics_path: PathBuf,
    pub latest_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_psnr: Option<f64>,
}

fn write_line(file: &mut std::fs::File, path: &Path, line: &str) -> Result<()> {
    file.write_all(line.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| CoreError::io(path, e))
}

fn validation_pass<T: Element>(
    denoiser: &Denoiser<T>,
    ema: Option<&ParamSet<T>>,
    items: &[(Tensor<T>, Tensor<T>)],
    sched: &NoiseSchedule,
    val_steps: Option<usize>,
    val_rng_root: &Rng,
    step: u64,
) -> Result<(f64, f64)> {
    // EMA weights when available, raw otherwise
    let mut model = denoiser.clone();
    if let Some(ema) = ema {
        model.set_params(ema.clone())?;
    }
    let val_sched = match val_steps {
        Some(k) if k < sched.steps() => {
            eprintln!("[val] sampling at reduced T={k} (train T={})", sched.steps());
            match sched.kind() {
                ScheduleKind::Linear {
                    beta_start,
                    beta_end,
                } => NoiseSchedule::linear(k, beta_start, beta_end)?,
                ScheduleKind::Cosine { s } => NoiseSchedule::cosine(k, s)?,
            }
        }
        _ => sched.clone(),
    };
    let predictor = DenoiserPredictor(&model);
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut ssim_count = 0usize;
    for (i, (x_cond, y0)) in items.iter().enumerate() {
        let mut rng = val_rng_root.fork(step * 65_536 + i as u64);
        let sampled = diffusion::sample(&predictor, x_cond, &val_sched, &mut rng)?;
        let sr = Image::from_tensor(&diffusion::denormalize_from_model(&sampled))?;
        let hr = Image::from_tensor(&diffusion::denormalize_from_model(y0))?;
        psnr_acc += metrics::psnr(&sr, &hr, 1.0)?;
        if sr.width() >= 11 && sr.height() >= 11 {
            ssim_acc += metrics::ssim_default(&sr, &hr)?;
            ssim_count += 1;
        }
    }
    let n = items.len() as f64;
    let mean_ssim = if ssim_count > 0 {
        ssim_acc / ssim_count as f64
    } else {
        f64::NAN
    };
    Ok((psnr_acc / n, mean_ssim))
}

/// Run Algorithm-style training for `cfg.total_iters` iterations, writing
/// `metrics.tsv` plus `latest.ckpt`/`best.ckpt` under `out_dir`.
///
/// The metrics log has one row per step:
/// `step<TAB>loss<TAB>lr<TAB>grad_norm<TAB>val_psnr<TAB>val_ssim`
/// with `-` in the validation columns outside validation steps.
pub fn train_loop<T: Element>(
    denoiser: &mut Denoiser<T>,
    data: &mut dyn BatchSource<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out_dir: &Path,
    config_echo: &str,
) -> Result<(TrainState<T>, TrainSummary)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.tsv");
    let mut metrics_file =
        std::fs::File::create(&metrics_path).map_err(|e| CoreError::io(&metrics_path, e))?;
    write_line(
        &mut metrics_file,
        &metrics_path,
        "step\tloss\tlr\tgrad_norm\tval_psnr\tval_ssim",
    )?;

    let master = Rng::new(cfg.seed);
    let mut rng_data = master.fork(STREAM_DATA);
    let mut rng_noise = master.fork(STREAM_NOISE);
    let dropout_root = master.fork(STREAM_DROPOUT);
    let val_root = master.fork(STREAM_VAL);

    let mut adam_m = denoiser.params().zeros_like();
    let mut adam_v = denoiser.params().zeros_like();
    let mut ema = denoiser.params().clone();
    let hyper = AdamHyper::default();

    let mut losses = Vec::with_capacity(cfg.total_iters as usize);
    let mut latest_ckpt: Option<PathBuf> = None;
    let mut best_ckpt: Option<PathBuf> = None;
    let mut best_psnr = f64::NEG_INFINITY;
    let val_items: Vec<(Tensor<T>, Tensor<T>)> = if cfg.total_iters >= cfg.val_every {
        data.validation_items(cfg.val_items)?
    } else {
        Vec::new()
    };

    let write_ckpt = |denoiser: &Denoiser<T>,
                      ema: &ParamSet<T>,
                      adam_m: &ParamSet<T>,
                      adam_v: &ParamSet<T>,
                      step: u64,
                      rng: &Rng,
                      path: &Path|
     -> Result<()> {
        let state = TrainState {
            step,
            params: denoiser.params().clone(),
            ema_params: ema.clone(),
            adam_m: adam_m.clone(),
            adam_v: adam_v.clone(),
            schedule: sched.clone(),
            rng: rng.clone(),
        };
        checkpoint::save(&state, config_echo, path)
    };

    for step in 0..cfg.total_iters {
        let abort = |e: CoreError| CoreError::NumericalAbort {
            step,
            msg: e.to_string(),
        };

        let batch = data.next_batch(cfg.batch_size, &mut rng_data)?;
        let draw = diffusion::draw_noise(batch.y0.shape(), sched, &mut rng_noise);

        let mut g = crate::tensor::graph::Graph::new();
        let bound = denoiser
            .bind(&mut g, true)?
            .with_dropout(dropout_root.fork(step));
        let loss_var =
            diffusion::training_loss_expr(&mut g, &bound, &batch, &draw, cfg.p_norm)
                .map_err(abort)?;
        let loss = g.scalar_value(loss_var).as_f64();
        if !loss.is_finite() {
            return Err(abort(CoreError::NonFinite { op: "loss" }));
        }
        g.backward(loss_var).map_err(abort)?;
        let mut grads: Vec<Vec<T>> = bound
            .grads(&g)
            .into_iter()
            .map(|(_, gr)| gr.to_vec())
            .collect();

        let grad_norm = match cfg.clip_max_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_grad_norm(&grads),
        };
        let lr = lr_at(step, cfg);
        adam_step(
            denoiser.params_mut(),
            &mut adam_m,
            &mut adam_v,
            step + 1,
            &grads,
            lr,
            hyper,
        )
        .map_err(abort)?;
        if let Some(d) = cfg.ema_decay {
            ema_update(&mut ema, denoiser.params(), d)?;
        }
        losses.push(loss);

        let validate_now = (step + 1) % cfg.val_every == 0 && !val_items.is_empty();
        let (val_psnr_s, val_ssim_s) = if validate_now {
            let (p, s) = validation_pass(
                denoiser,
                cfg.ema_decay.map(|_| &ema),
                &val_items,
                sched,
                cfg.val_steps,
                &val_root,
                step,
            )?;
            let path = out_dir.join("latest.ckpt");
            write_ckpt(denoiser, &ema, &adam_m, &adam_v, step + 1, &rng_noise, &path)?;
            latest_ckpt = Some(path);
            if p > best_psnr {
                best_psnr = p;
                let path = out_dir.join("best.ckpt");
                write_ckpt(denoiser, &ema, &adam_m, &adam_v, step + 1, &rng_noise, &path)?;
                best_ckpt = Some(path);
            }
            (format!("{p:.4}"), format!("{s:.6}"))
        } else {
            ("-".to_string(), "-".to_string())
        };

        write_line(
            &mut metrics_file,
            &metrics_path,
            &format!("{step}\t{loss:.6e}\t{lr:.6e}\t{grad_norm:.6e}\t{val_psnr_s}\t{val_ssim_s}"),
        )?;
    }

    if cfg.total_iters > 0 {
        let path = out_dir.join("latest.ckpt");
        write_ckpt(
            denoiser,
            &ema,
            &adam_m,
            &adam_v,
            cfg.total_iters,
            &rng_noise,
            &path,
        )?;
        latest_ckpt = Some(path);
    }
    metrics_file
        .flush()
        .map_err(|e| CoreError::io(&metrics_path, e))?;

    let state = TrainState {
        step: cfg.total_iters,
        params: denoiser.params().clone(),
        ema_params: ema,
        adam_m,
        adam_v,
        schedule: sched.clone(),
        rng: rng_noise,
    };
    let summary = TrainSummary {
        steps_run: cfg.total_iters,
        losses,
        metrics_path,
        latest_checkpoint: latest_ckpt,
        best_checkpoint: best_ckpt,
        best_val_psnr: (best_psnr > f64::NEG_INFINITY).then_some(best_psnr),
    };
    Ok((state, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(value: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("w", Tensor::scalar(value));
        s
    }

    fn base_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            base_lr: 3e-6,
            lr_milestones: vec![],
            lr_factor: 0.5,
            total_iters: 10,
            val_every: 10_000,
            ema_decay: None,
            clip_max_norm: None,
            p_norm: 2,
            seed: 0,
            val_steps: None,
            val_items: 2,
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = scalar_set(1.0);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        adam_step(&mut p, &mut m, &mut v, 1, &[vec![1.0]], 0.1, AdamHyper::default()).unwrap();
        let delta: f64 = 1.0 - p.get(crate::denoiser::params::ParamId(0)).data()[0];
        assert!((delta - 0.1).abs() < 1e-8, "first-step update {delta}");
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut p = scalar_set(0.7);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        adam_step(&mut p, &mut m, &mut v, 1, &[vec![0.0]], 0.1, AdamHyper::default()).unwrap();
        assert_eq!(p.get(crate::denoiser::params::ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn adam_matches_scripted_recurrence() {
        let grads = [0.3f64, -1.1, 0.05];
        let h = AdamHyper::default();
        let lr = 0.01;

        let mut p = scalar_set(0.5);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        for (i, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &mut m, &mut v, (i + 1) as u64, &[vec![g]], lr, h).unwrap();
        }

        // hand-scripted recurrence
        let (mut ms, mut vs, mut ps) = (0.0f64, 0.0f64, 0.5f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            ms = h.beta1 * ms + (1.0 - h.beta1) * g;
            vs = h.beta2 * vs + (1.0 - h.beta2) * g * g;
            let mh = ms / (1.0 - h.beta1.powi(t));
            let vh = vs / (1.0 - h.beta2.powi(t));
            ps -= lr * mh / (vh.sqrt() + h.eps);
        }
        let got = p.get(crate::denoiser::params::ParamId(0)).data()[0];
        assert!((got - ps).abs() < 1e-12, "{got} vs {ps}");
    }

    #[test]
    fn adam_rejects_nan_grad_with_tensor_name() {
        let mut p = scalar_set(1.0);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        let err = adam_step(
            &mut p,
            &mut m,
            &mut v,
            1,
            &[vec![f64::NAN]],
            0.1,
            AdamHyper::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn clip_norm_behaviour() {
        // below the bound: unchanged
        let mut g = vec![vec![0.3f64, 0.4]];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(g[0], vec![0.3, 0.4]);

        // [3,4] has norm 5 -> scaled to [0.6, 0.8]
        let mut g = vec![vec![3.0f64, 4.0]];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[0][1] - 0.8).abs() < 1e-12);

        // random grads: post-clip norm = min(pre, max)
        let mut rng = Rng::new(1);
        let mut g: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..17).map(|_| rng.gaussian()).collect())
            .collect();
        let pre = clip_grad_norm(&mut g, 1.0);
        let post = global_grad_norm(&g);
        assert!((post - pre.min(1.0)).abs() < 1e-9, "pre {pre} post {post}");
    }

    #[test]
    fn ema_boundary_and_closed_form() {
        let params = scalar_set(2.0);
        // decay 0 -> ema = params
        let mut ema = scalar_set(-1.0);
        ema_update(&mut ema, &params, 0.0).unwrap();
        assert_eq!(ema.get(crate::denoiser::params::ParamId(0)).data()[0], 2.0);

        // fixed point
        let mut ema = scalar_set(2.0);
        ema_update(&mut ema, &params, 0.73).unwrap();
        assert_eq!(ema.get(crate::denoiser::params::ParamId(0)).data()[0], 2.0);

        // geometric closed form over k updates
        let (e0, p, d, k) = (5.0f64, 2.0f64, 0.9999f64, 100);
        let mut ema = scalar_set(e0);
        for _ in 0..k {
            ema_update(&mut ema, &params, d).unwrap();
        }
        let expect = p + d.powi(k) * (e0 - p);
        let got = ema.get(crate::denoiser::params::ParamId(0)).data()[0];
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn lr_milestones_inclusive() {
        let cfg = TrainConfig {
            base_lr: 3e-6,
            lr_milestones: vec![150_000, 230_000],
            lr_factor: 0.5,
            ..base_cfg()
        };
        assert_eq!(lr_at(0, &cfg), 3e-6);
        assert_eq!(lr_at(149_999, &cfg), 3e-6);
        assert_eq!(lr_at(150_000, &cfg), 1.5e-6, "milestone is inclusive");
        assert_eq!(lr_at(200_000, &cfg), 1.5e-6);
        assert_eq!(lr_at(230_000, &cfg), 7.5e-7);
        assert_eq!(lr_at(300_000, &cfg), 7.5e-7);
        // non-increasing
        let mut prev = f64::INFINITY;
        for s in (0..400_000).step_by(10_000) {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(base_cfg().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..base_cfg() },
            TrainConfig { base_lr: 0.0, ..base_cfg() },
            TrainConfig { lr_factor: 0.0, ..base_cfg() },
            TrainConfig { lr_factor: 1.5, ..base_cfg() },
            TrainConfig { ema_decay: Some(1.0), ..base_cfg() },
            TrainConfig { clip_max_norm: Some(0.0), ..base_cfg() },
            TrainConfig { p_norm: 3, ..base_cfg() },
            TrainConfig { val_every: 0, ..base_cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
