//! The conditional U-Net noise predictor `f(x, y_t, gamma)`.
//!
//! Six input channels (bicubic-upsampled condition first, noisy image
//! second), residual blocks with group normalization and FiLM-style
//! noise-level conditioning, optional single-head self-attention at
//! configured spatial sizes, average-pool downsampling, nearest+conv
//! upsampling, symmetric level skips, and a zero-initialized output head so
//! a fresh network predicts exactly zero.

pub mod embedding;
pub mod params;

use std::collections::BTreeSet;

use crate::diffusion::NoisePredictor;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::attention::attention_body;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};
use params::{ParamId, ParamSet};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub attention_resolutions: BTreeSet<usize>,
    pub dropout_p: f64,
    pub groups: usize,
    pub gamma_embed_dim: usize,
    /// Spatial size the network trains and samples at; fixes where the
    /// attention resolutions land in the level structure.
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Channel width at level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial size at level `i`.
    pub fn resolution(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.base_channels == 0 || self.channel_multipliers.is_empty() {
            return fail("base_channels and channel_multipliers must be non-empty".into());
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return fail("channel multipliers must be positive".into());
        }
        if self.res_blocks_per_level < 1 {
            return fail("res_blocks_per_level must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            // every normalized width is a multiple of base_channels, so this
            // also covers the concatenated decoder inputs
            return fail(format!(
                "base_channels {} must be divisible by groups {}",
                self.base_channels, self.groups
            ));
        }
        let max_mult = *self.channel_multipliers.iter().max().unwrap();
        if (self.base_channels * max_mult) % self.groups != 0 {
            return fail("widest level not divisible by groups".into());
        }
        if self.gamma_embed_dim < 2 || self.gamma_embed_dim % 2 != 0 {
            return fail("gamma_embed_dim must be even and >= 2".into());
        }
        if self.in_channels != 2 * self.out_channels {
            return fail(format!(
                "in_channels {} must be twice out_channels {}",
                self.in_channels, self.out_channels
            ));
        }
        let down_factor = 1usize << (self.levels() - 1);
        if self.input_size == 0 || self.input_size % down_factor != 0 {
            return fail(format!(
                "input_size {} must be divisible by 2^(levels-1) = {down_factor}",
                self.input_size
            ));
        }
        let produced: BTreeSet<usize> = (0..self.levels()).map(|i| self.resolution(i)).collect();
        for r in &self.attention_resolutions {
            if !produced.contains(r) {
                return fail(format!(
                    "attention resolution {r} not produced by the level structure {produced:?}"
                ));
            }
        }
        Ok(())
    }
}

// -- layout -------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvL {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct NormL {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct LinearL {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlockL {
    norm1: NormL,
    conv1: ConvL,
    emb_proj: LinearL,
    norm2: NormL,
    conv2: ConvL,
    skip: Option<ConvL>,
    out_ch: usize,
}

#[derive(Debug, Clone)]
struct AttnL {
    norm: NormL,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct LevelL {
    blocks: Vec<ResBlockL>,
    attn: Option<AttnL>,
}

#[derive(Debug, Clone)]
struct UNetLayout {
    emb1: LinearL,
    emb2: LinearL,
    conv_in: ConvL,
    enc: Vec<LevelL>,
    mid1: ResBlockL,
    mid_attn: AttnL,
    mid2: ResBlockL,
    dec: Vec<LevelL>, // indexed by level, walked deepest-first
    ups: Vec<ConvL>,  // ups[i]: conv after nearest-2x leaving decoder level i
    head_norm: NormL,
    head_conv: ConvL,
}

enum Init {
    Kaiming(usize),
    Zeros,
    Ones,
}

struct Registrar<'r, T> {
    rng: &'r mut Rng,
    params: ParamSet<T>,
}

impl<T: Element> Registrar<'_, T> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        let tensor = match init {
            Init::Kaiming(fan_in) => Tensor::kaiming(shape, fan_in, self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        };
        self.params.push(name, tensor)
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, zero: bool) -> ConvL {
        let w_init = if zero {
            Init::Zeros
        } else {
            Init::Kaiming(in_ch * k * k)
        };
        ConvL {
            w: self.add(format!("{name}.w"), vec![out_ch, in_ch, k, k], w_init),
            b: self.add(format!("{name}.b"), vec![out_ch], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, ch: usize) -> NormL {
        NormL {
            gain: self.add(format!("{name}.gain"), vec![ch], Init::Ones),
            bias: self.add(format!("{name}.bias"), vec![ch], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, zero: bool) -> LinearL {
        let w_init = if zero { Init::Zeros } else { Init::Kaiming(in_dim) };
        LinearL {
            w: self.add(format!("{name}.w"), vec![in_dim, out_dim], w_init),
            b: self.add(format!("{name}.b"), vec![out_dim], Init::Zeros),
        }
    }

    fn res_block(&mut self, name: &str, in_ch: usize, out_ch: usize, emb_dim: usize) -> ResBlockL {
        ResBlockL {
            norm1: self.norm(&format!("{name}.norm1"), in_ch),
            conv1: self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, false),
            // zero-init projection keeps the block the identity map at init
            emb_proj: self.linear(&format!("{name}.emb"), emb_dim, 2 * out_ch, true),
            norm2: self.norm(&format!("{name}.norm2"), out_ch),
            conv2: self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, true),
            skip: (in_ch != out_ch).then(|| self.conv(&format!("{name}.skip"), in_ch, out_ch, 1, false)),
            out_ch,
        }
    }

    fn attn(&mut self, name: &str, ch: usize) -> AttnL {
        AttnL {
            norm: self.norm(&format!("{name}.norm"), ch),
            wq: self.add(format!("{name}.wq"), vec![ch, ch], Init::Kaiming(ch)),
            wk: self.add(format!("{name}.wk"), vec![ch, ch], Init::Kaiming(ch)),
            wv: self.add(format!("{name}.wv"), vec![ch, ch], Init::Kaiming(ch)),
            wo: self.add(format!("{name}.wo"), vec![ch, ch], Init::Kaiming(ch)),
        }
    }
}

fn build_layout<T: Element>(cfg: &DenoiserConfig, reg: &mut Registrar<'_, T>) -> UNetLayout {
    let levels = cfg.levels();
    let emb_out = 4 * cfg.gamma_embed_dim;
    let emb1 = reg.linear("emb.lin1", cfg.gamma_embed_dim, emb_out, false);
    let emb2 = reg.linear("emb.lin2", emb_out, emb_out, false);
    let conv_in = reg.conv("conv_in", cfg.in_channels, cfg.width(0), 3, false);

    let mut enc = Vec::with_capacity(levels);
    for i in 0..levels {
        let ch = cfg.width(i);
        let mut blocks = Vec::with_capacity(cfg.res_blocks_per_level);
        for j in 0..cfg.res_blocks_per_level {
            let in_ch = if j == 0 {
                if i == 0 {
                    cfg.width(0)
                } else {
                    cfg.width(i - 1)
                }
            } else {
                ch
            };
            blocks.push(reg.res_block(&format!("enc.{i}.block.{j}"), in_ch, ch, emb_out));
        }
        let attn = cfg
            .attention_resolutions
            .contains(&cfg.resolution(i))
            .then(|| reg.attn(&format!("enc.{i}.attn"), ch));
        enc.push(LevelL { blocks, attn });
    }

    let mid_ch = cfg.width(levels - 1);
    let mid1 = reg.res_block("mid.block.0", mid_ch, mid_ch, emb_out);
    let mid_attn = reg.attn("mid.attn", mid_ch);
    let mid2 = reg.res_block("mid.block.1", mid_ch, mid_ch, emb_out);

    let mut dec = Vec::with_capacity(levels);
    for i in 0..levels {
        let ch = cfg.width(i);
        let mut blocks = Vec::with_capacity(cfg.res_blocks_per_level);
        for j in 0..cfg.res_blocks_per_level {
            let in_ch = if j == 0 { 2 * ch } else { ch };
            blocks.push(reg.res_block(&format!("dec.{i}.block.{j}"), in_ch, ch, emb_out));
        }
        let attn = cfg
            .attention_resolutions
            .contains(&cfg.resolution(i))
            .then(|| reg.attn(&format!("dec.{i}.attn"), ch));
        dec.push(LevelL { blocks, attn });
    }

    let mut ups = Vec::with_capacity(levels.saturating_sub(1));
    for i in 1..levels {
        ups.push(reg.conv(&format!("up.{i}"), cfg.width(i), cfg.width(i - 1), 3, false));
    }

    let head_norm = reg.norm("head.norm", cfg.width(0));
    let head_conv = reg.conv("head.conv", cfg.width(0), cfg.out_channels, 3, true);

    UNetLayout {
        emb1,
        emb2,
        conv_in,
        enc,
        mid1,
        mid_attn,
        mid2,
        dec,
        ups,
        head_norm,
        head_conv,
    }
}

// -- model ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    layout: UNetLayout,
    params: ParamSet<T>,
}

impl<T: Element> Denoiser<T> {
    /// Construct with deterministic initialization from `rng`: Kaiming
    /// fan-in everywhere except the zero-initialized output head, each res
    /// block's second conv, and each per-block gamma projection.
    pub fn build(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut reg = Registrar {
            rng,
            params: ParamSet::new(),
        };
        let layout = build_layout(&config, &mut reg);
        Ok(Denoiser {
            config,
            layout,
            params: reg.params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replace the full parameter set (checkpoint load, EMA swap). Names and
    /// shapes must mirror the built set.
    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        self.params.check_mirror(&params, "set_params")?;
        self.params = params;
        Ok(())
    }

    /// Register every parameter on `g` and return a forward-capable handle.
    /// `trainable` decides whether gradients are tracked.
    pub fn bind<'d>(
        &'d self,
        g: &mut Graph<T>,
        trainable: bool,
    ) -> Result<BoundDenoiser<'d, T>> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (_, tensor) in self.params.iter() {
            let v = if trainable {
                g.param(tensor)?
            } else {
                g.input(tensor)?
            };
            vars.push(v);
        }
        Ok(BoundDenoiser {
            denoiser: self,
            vars,
            dropout_rng: None,
        })
    }

    /// One-shot inference: predict the noise content of `y_t` given the
    /// upsampled condition and per-sample (or shared) noise levels.
    pub fn predict_eps(
        &self,
        x_cond_up: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xc = g.input(x_cond_up)?;
        let yv = g.input(y_t)?;
        let out = bound.forward(&mut g, xc, yv, gammas)?;
        Ok(g.to_tensor(out))
    }
}

/// A denoiser registered on a graph. Enable dropout only for training binds
/// by attaching the per-iteration rng.
pub struct BoundDenoiser<'d, T> {
    denoiser: &'d Denoiser<T>,
    vars: Vec<Var>,
    dropout_rng: Option<std::cell::RefCell<Rng>>,
}

impl<T: Element> BoundDenoiser<'_, T> {
    pub fn with_dropout(mut self, rng: Rng) -> Self {
        self.dropout_rng = Some(std::cell::RefCell::new(rng));
        self
    }

    fn v(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Walk parameter grads in canonical order after a backward pass.
    pub fn grads<'g>(&self, g: &'g Graph<T>) -> Vec<(&str, &'g [T])> {
        self.denoiser
            .params
            .iter()
            .map(|(name, _)| name)
            .zip(self.vars.iter().map(|&v| g.grad(v).expect("trainable bind")))
            .map(|(name, grad)| (name, grad))
            .collect()
    }

    fn conv(&self, g: &mut Graph<T>, l: &ConvL, x: Var, pad: usize) -> Result<Var> {
        g.conv2d(x, self.v(l.w), self.v(l.b), 1, pad)
    }

    fn norm(&self, g: &mut Graph<T>, l: &NormL, x: Var) -> Result<Var> {
        g.group_norm(
            x,
            self.v(l.gain),
            self.v(l.bias),
            self.denoiser.config.groups,
            T::from_f64(NORM_EPS),
        )
    }

    fn linear(&self, g: &mut Graph<T>, l: &LinearL, x: Var) -> Result<Var> {
        let p = g.matmul(x, self.v(l.w))?;
        g.add_row_broadcast(p, self.v(l.b))
    }

    fn res_block(&self, g: &mut Graph<T>, l: &ResBlockL, h: Var, emb: Var) -> Result<Var> {
        let t = self.norm(g, &l.norm1, h)?;
        let t = g.silu(t)?;
        let t = self.conv(g, &l.conv1, t, 1)?;

        let proj = self.linear(g, &l.emb_proj, emb)?;
        let scale = g.slice_cols(proj, 0, l.out_ch)?;
        let shift = g.slice_cols(proj, l.out_ch, 2 * l.out_ch)?;

        let t = self.norm(g, &l.norm2, t)?;
        let t = g.scale_shift_channels(t, scale, shift)?;
        let t = g.silu(t)?;
        let t = self.conv(g, &l.conv2, t, 1)?;
        // dropout after the second convolution
        let t = match &self.dropout_rng {
            Some(rng) => g.dropout(
                t,
                self.denoiser.config.dropout_p,
                true,
                &mut rng.borrow_mut(),
            )?,
            None => t,
        };
        let residual = match &l.skip {
            Some(sk) => self.conv(g, sk, h, 0)?,
            None => h,
        };
        g.add(residual, t)
    }

    fn attn_block(&self, g: &mut Graph<T>, l: &AttnL, x: Var) -> Result<Var> {
        let n = self.norm(g, &l.norm, x)?;
        let body = attention_body(g, n, self.v(l.wq), self.v(l.wk), self.v(l.wv), self.v(l.wo))?;
        g.add(x, body)
    }

    /// Forward pass on the six-channel concatenation; returns the predicted
    /// noise at the input's spatial shape.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_t: Var,
        gammas: &[f64],
    ) -> Result<Var> {
        self.forward_impl(g, x_cond, y_t, gammas, None)
    }

    /// Forward with one level's skip tensor zeroed (used to verify the skip
    /// path actually reaches the output).
    #[cfg(test)]
    pub(crate) fn forward_ablating_skip(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_t: Var,
        gammas: &[f64],
        level: usize,
    ) -> Result<Var> {
        self.forward_impl(g, x_cond, y_t, gammas, Some(level))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_t: Var,
        gammas: &[f64],
        ablate_skip: Option<usize>,
    ) -> Result<Var> {
        let cfg = &self.denoiser.config;
        let layout = &self.denoiser.layout;
        let &[n, _, h, w] = g.shape(x_cond) else {
            return Err(CoreError::InvalidArgument {
                op: "denoiser",
                msg: format!("expected rank-4 condition, got {:?}", g.shape(x_cond)),
            });
        };
        if g.shape(x_cond) != g.shape(y_t) {
            return Err(CoreError::ShapeMismatch {
                op: "denoiser",
                lhs: g.shape(x_cond).to_vec(),
                rhs: g.shape(y_t).to_vec(),
            });
        }
        if h != cfg.input_size || w != cfg.input_size {
            return Err(CoreError::InvalidArgument {
                op: "denoiser",
                msg: format!(
                    "spatial size {h}x{w} does not match configured input_size {}",
                    cfg.input_size
                ),
            });
        }
        if gammas.len() != n {
            return Err(CoreError::InvalidArgument {
                op: "denoiser",
                msg: format!("{} gammas for batch of {n}", gammas.len()),
            });
        }

        // noise-level embedding -> shared MLP trunk
        let emb_raw = embedding::gamma_embedding_batch(gammas, cfg.gamma_embed_dim)?;
        let emb_t = Tensor::new(
            vec![n, cfg.gamma_embed_dim],
            emb_raw.into_iter().map(T::from_f64).collect(),
        )?;
        let emb_in = g.input(&emb_t)?;
        let e = self.linear(g, &layout.emb1, emb_in)?;
        let e = g.silu(e)?;
        let emb = self.linear(g, &layout.emb2, e)?;

        // condition first, noisy second
        let x6 = g.concat_channels(x_cond, y_t)?;
        let mut hcur = self.conv(g, &layout.conv_in, x6, 1)?;

        let levels = cfg.levels();
        let mut skips: Vec<Var> = Vec::with_capacity(levels);
        for (i, level) in layout.enc.iter().enumerate() {
            for block in &level.blocks {
                hcur = self.res_block(g, block, hcur, emb)?;
            }
            if let Some(attn) = &level.attn {
                hcur = self.attn_block(g, attn, hcur)?;
            }
            if ablate_skip == Some(i) {
                let zeros = Tensor::zeros(g.shape(hcur).to_vec());
                skips.push(g.input(&zeros)?);
            } else {
                skips.push(hcur);
            }
            if i < levels - 1 {
                hcur = g.avg_pool2(hcur)?;
            }
        }

        hcur = self.res_block(g, &layout.mid1, hcur, emb)?;
        hcur = self.attn_block(g, &layout.mid_attn, hcur)?;
        hcur = self.res_block(g, &layout.mid2, hcur, emb)?;

        for i in (0..levels).rev() {
            let level = &layout.dec[i];
            hcur = g.concat_channels(hcur, skips[i])?;
            for block in &level.blocks {
                hcur = self.res_block(g, block, hcur, emb)?;
            }
            if let Some(attn) = &level.attn {
                hcur = self.attn_block(g, attn, hcur)?;
            }
            if i > 0 {
                hcur = g.upsample_nearest2(hcur)?;
                hcur = self.conv(g, &layout.ups[i - 1], hcur, 1)?;
            }
        }

        let out = self.norm(g, &layout.head_norm, hcur)?;
        let out = g.silu(out)?;
        self.conv(g, &layout.head_conv, out, 1)
    }
}

impl<T: Element> NoisePredictor<T> for BoundDenoiser<'_, T> {
    fn predict(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_noisy: Var,
        gammas: &[f64],
    ) -> Result<Var> {
        self.forward(g, x_cond, y_noisy, gammas)
    }
}

/// Inference adapter: binds fresh per prediction so samplers can hold a
/// plain `&Denoiser`.
pub struct DenoiserPredictor<'d, T>(pub &'d Denoiser<T>);

impl<T: Element> NoisePredictor<T> for DenoiserPredictor<'_, T> {
    fn predict(
        &self,
        g: &mut Graph<T>,
        x_cond: Var,
        y_noisy: Var,
        gammas: &[f64],
    ) -> Result<Var> {
        let bound = self.0.bind(g, false)?;
        bound.forward(g, x_cond, y_noisy, gammas)
    }
}
