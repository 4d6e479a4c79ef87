//! Append-only compute tape with reverse-mode differentiation.
//!
//! Nodes are created in topological order, so the backward pass is a single
//! reverse sweep over the arena. Gradient buffers accumulate across repeated
//! `backward` calls; zeroing is an explicit caller action.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Direction for [`Graph::resample2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleDir {
    Up,
    Down,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    AbsPow(Var, u32),
    MeanAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    AvgPool2(Var),
    UpsampleNearest2(Var),
    Matmul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    SoftmaxRows(Var),
    NchwToNlc(Var),
    NlcToNchw(Var),
    ConcatChannels(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ScaleShiftChannels {
        x: Var,
        scale: Var,
        shift: Var,
    },
    AddRowBroadcast {
        x: Var,
        bias: Var,
    },
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Reverse-mode compute graph over element type `T`.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable the per-op finite scan (it is on by default so a diverging
    /// computation fails at the op that produced it, never silently).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            other => self.any_parent_needs_grad(other),
        };
        let grad = needs_grad.then(|| vec![T::zero(); value.len()]);
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_parent_needs_grad(&self, op: &Op<T>) -> bool {
        let mut needs = false;
        self.for_each_parent(op, |v| needs |= self.nodes[v.0].grad.is_some());
        needs
    }

    fn for_each_parent(&self, op: &Op<T>, mut f: impl FnMut(Var)) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::AbsPow(a, _)
            | Op::MeanAll(a)
            | Op::AvgPool2(a)
            | Op::UpsampleNearest2(a)
            | Op::SoftmaxRows(a)
            | Op::NchwToNlc(a)
            | Op::NlcToNchw(a)
            | Op::Reshape(a) => f(*a),
            Op::Conv2d { x, w, b, .. } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::GroupNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::Dropout { x, .. } | Op::SliceCols { x, .. } => f(*x),
            Op::Matmul { a, b } | Op::Bmm { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::ScaleShiftChannels { x, scale, shift } => {
                f(*x);
                f(*scale);
                f(*shift);
            }
            Op::AddRowBroadcast { x, bias } => {
                f(*x);
                f(*bias);
            }
        }
    }

    // -- leaves ------------------------------------------------------------

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("input", t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Trainable leaf; `backward` accumulates into its grad buffer.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        let v = self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Leaf)?;
        self.nodes[v.0].grad = Some(vec![T::zero(); t.numel()]);
        Ok(v)
    }

    // -- accessors ----------------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape/value always consistent")
    }

    pub fn zero_grad(&mut self, v: Var) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            g.fill(T::zero());
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(CoreError::InvalidArgument {
                op,
                msg: format!("expected rank-4 input, got {other:?}"),
            }),
        }
    }

    // -- elementwise ---------------------------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", self.nodes[a.0].shape.clone(), value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push("sub", self.nodes[a.0].shape.clone(), value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", self.nodes[a.0].shape.clone(), value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push("scale", self.nodes[a.0].shape.clone(), value, Op::Scale(a, c))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push("silu", self.nodes[a.0].shape.clone(), value, Op::Silu(a))
    }

    /// `|x|^p` for p in {1, 2}.
    pub fn abs_pow(&mut self, a: Var, p: u32) -> Result<Var> {
        if p != 1 && p != 2 {
            return Err(CoreError::InvalidArgument {
                op: "abs_pow",
                msg: format!("p must be 1 or 2, got {p}"),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if p == 1 { x.abs() } else { x * x })
            .collect();
        self.push("abs_pow", self.nodes[a.0].shape.clone(), value, Op::AbsPow(a, p))
    }

    /// Mean over all elements; returns a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        let m = kernels::sum(&self.nodes[a.0].value) / T::from_f64(n as f64);
        self.push("mean_all", vec![1], vec![m], Op::MeanAll(a))
    }

    // -- neural-net ops -------------------------------------------------------

    /// Cross-correlation with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4("conv2d", x)?;
        let (f, kc, kh, kw) = self.dims4("conv2d", w)?;
        if kc != c {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CoreError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel extents must be odd, got {kh}x{kw}"),
            });
        }
        if stride < 1 {
            return Err(CoreError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if self.nodes[b.0].shape != [f] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[b.0].shape.clone(),
                rhs: vec![f],
            });
        }
        let oh = ConvDims::out_extent(h, kh, stride, pad);
        let ow = ConvDims::out_extent(wd, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(CoreError::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "non-integer output extent for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            });
        };
        let dims = ConvDims {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let value = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &dims,
        );
        self.push(
            "conv2d",
            vec![n, f, oh, ow],
            value,
            Op::Conv2d { x, w, b, dims },
        )
    }

    /// Per-(sample, group) normalization followed by channel gain/bias.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.dims4("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(CoreError::InvalidArgument {
                op: "group_norm",
                msg: format!("channels {c} not divisible by groups {groups}"),
            });
        }
        if eps <= T::zero() {
            return Err(CoreError::InvalidArgument {
                op: "group_norm",
                msg: "eps must be positive".into(),
            });
        }
        for (nm, v) in [("gain", gain), ("bias", bias)] {
            if self.nodes[v.0].shape != [c] {
                return Err(CoreError::InvalidArgument {
                    op: "group_norm",
                    msg: format!("{nm} must have shape [{c}], got {:?}", self.nodes[v.0].shape),
                });
            }
        }
        let (value, stats) = kernels::group_norm_forward(
            &self.nodes[x.0].value,
            n,
            c,
            h * w,
            groups,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
            eps,
        );
        self.push(
            "group_norm",
            vec![n, c, h, w],
            value,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                stats,
            },
        )
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::InvalidArgument {
                op: "dropout",
                msg: format!("p must be in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let value = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(
            "dropout",
            self.nodes[x.0].shape.clone(),
            value,
            Op::Dropout { x, mask },
        )
    }

    /// 2x scale change: `Up` replicates each pixel into a 2x2 block, `Down`
    /// averages each 2x2 block.
    pub fn resample2(&mut self, x: Var, dir: ResampleDir) -> Result<Var> {
        match dir {
            ResampleDir::Up => self.upsample_nearest2(x),
            ResampleDir::Down => self.avg_pool2(x),
        }
    }

    /// 2x2 average pooling; extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::InvalidArgument {
                op: "avg_pool2",
                msg: format!("extents must be even, got {h}x{w}"),
            });
        }
        let value = kernels::avg_pool2_forward(&self.nodes[x.0].value, n, c, h, w);
        self.push("avg_pool2", vec![n, c, h / 2, w / 2], value, Op::AvgPool2(x))
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("upsample_nearest2", x)?;
        let value = kernels::upsample2_forward(&self.nodes[x.0].value, n, c, h, w);
        self.push(
            "upsample_nearest2",
            vec![n, c, 2 * h, 2 * w],
            value,
            Op::UpsampleNearest2(x),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.nodes[a.0].shape.as_slice() {
            &[m, k] => (m, k),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "matmul",
                    msg: format!("lhs must be rank 2, got {other:?}"),
                })
            }
        };
        let (k2, n) = match self.nodes[b.0].shape.as_slice() {
            &[k2, n] => (k2, n),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "matmul",
                    msg: format!("rhs must be rank 2, got {other:?}"),
                })
            }
        };
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        self.push("matmul", vec![m, n], value, Op::Matmul { a, b })
    }

    /// Batched matmul `[B,M,K] x [B,K,N]`, or `[B,M,K] x [B,N,K]` when
    /// `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ba, m, k) = match self.nodes[a.0].shape.as_slice() {
            &[ba, m, k] => (ba, m, k),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "bmm",
                    msg: format!("lhs must be rank 3, got {other:?}"),
                })
            }
        };
        let (bb, n) = match (self.nodes[b.0].shape.as_slice(), transpose_b) {
            (&[bb, k2, n], false) if k2 == k => (bb, n),
            (&[bb, n, k2], true) if k2 == k => (bb, n),
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "bmm",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                })
            }
        };
        if ba != bb {
            return Err(CoreError::ShapeMismatch {
                op: "bmm",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![T::zero(); ba * m * n];
        for bi in 0..ba {
            let ai = &av[bi * m * k..(bi + 1) * m * k];
            let bvi = &bv[bi * k * n..(bi + 1) * k * n];
            let ci = if transpose_b {
                kernels::matmul_nt(ai, bvi, m, k, n)
            } else {
                kernels::matmul(ai, bvi, m, k, n)
            };
            value[bi * m * n..(bi + 1) * m * n].copy_from_slice(&ci);
        }
        self.push("bmm", vec![ba, m, n], value, Op::Bmm { a, b, transpose_b })
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().ok_or(CoreError::InvalidArgument {
            op: "softmax_rows",
            msg: "rank must be >= 1".into(),
        })?;
        let value = kernels::softmax_rows_forward(&self.nodes[x.0].value, cols);
        self.push("softmax_rows", shape, value, Op::SoftmaxRows(x))
    }

    /// `[N,C,H,W]` to token layout `[N, H*W, C]`.
    pub fn nchw_to_nlc(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("nchw_to_nlc", x)?;
        let l = h * w;
        let src = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..l {
                    value[(ni * l + p) * c + ci] = src[(ni * c + ci) * l + p];
                }
            }
        }
        self.push("nchw_to_nlc", vec![n, l, c], value, Op::NchwToNlc(x))
    }

    /// Inverse of [`Self::nchw_to_nlc`]; `h * w` must equal the token count.
    pub fn nlc_to_nchw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = match self.nodes[x.0].shape.as_slice() {
            &[n, l, c] => (n, l, c),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "nlc_to_nchw",
                    msg: format!("expected rank-3 input, got {other:?}"),
                })
            }
        };
        if l != h * w {
            return Err(CoreError::InvalidArgument {
                op: "nlc_to_nchw",
                msg: format!("token count {l} != {h}x{w}"),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..l {
                    value[(ni * c + ci) * l + p] = src[(ni * l + p) * c + ci];
                }
            }
        }
        self.push("nlc_to_nchw", vec![n, c, h, w], value, Op::NlcToNchw(x))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.dims4("concat_channels", a)?;
        let (nb, cb, hb, wb) = self.dims4("concat_channels", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(CoreError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let hw = h * w;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![T::zero(); n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut value[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        self.push(
            "concat_channels",
            vec![n, ca + cb, h, w],
            value,
            Op::ConcatChannels(a, b),
        )
    }

    /// Column slice of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = match self.nodes[x.0].shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "slice_cols",
                    msg: format!("expected rank-2 input, got {other:?}"),
                })
            }
        };
        if start >= end || end > c {
            return Err(CoreError::InvalidArgument {
                op: "slice_cols",
                msg: format!("invalid column range {start}..{end} for {c} columns"),
            });
        }
        let src = &self.nodes[x.0].value;
        let width = end - start;
        let mut value = vec![T::zero(); r * width];
        for i in 0..r {
            value[i * width..(i + 1) * width].copy_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(
            "slice_cols",
            vec![r, width],
            value,
            Op::SliceCols { x, start, end },
        )
    }

    /// FiLM-style conditioning: `x * (1 + scale[n,c]) + shift[n,c]`.
    pub fn scale_shift_channels(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("scale_shift_channels", x)?;
        for v in [scale, shift] {
            if self.nodes[v.0].shape != [n, c] {
                return Err(CoreError::ShapeMismatch {
                    op: "scale_shift_channels",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[v.0].shape.clone(),
                });
            }
        }
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value;
        let bv = &self.nodes[shift.0].value;
        let mut value = vec![T::zero(); xv.len()];
        for nc in 0..n * c {
            let s = T::one() + sv[nc];
            let b = bv[nc];
            for (o, &v) in value[nc * hw..(nc + 1) * hw]
                .iter_mut()
                .zip(&xv[nc * hw..(nc + 1) * hw])
            {
                *o = v * s + b;
            }
        }
        self.push(
            "scale_shift_channels",
            vec![n, c, h, w],
            value,
            Op::ScaleShiftChannels { x, scale, shift },
        )
    }

    /// `[R,C] + bias[C]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = match self.nodes[x.0].shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(CoreError::InvalidArgument {
                    op: "add_row_broadcast",
                    msg: format!("expected rank-2 input, got {other:?}"),
                })
            }
        };
        if self.nodes[bias.0].shape != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut value = vec![T::zero(); xv.len()];
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        self.push(
            "add_row_broadcast",
            vec![r, c],
            value,
            Op::AddRowBroadcast { x, bias },
        )
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(CoreError::InvalidArgument {
                op: "reshape",
                msg: format!(
                    "cannot view {:?} as {shape:?}",
                    self.nodes[x.0].shape
                ),
            });
        }
        let value = self.nodes[x.0].value.clone();
        self.push("reshape", shape, value, Op::Reshape(x))
    }

    // -- backward -------------------------------------------------------------

    /// Accumulate `d loss / d node` into every grad-tracking ancestor of a
    /// scalar `loss` node. Buffers accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::InvalidArgument {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].shape
                ),
            });
        }
        if self.nodes[loss.0].grad.is_none() {
            return Ok(()); // loss does not depend on any tracked leaf
        }

        // The sweep runs on a scratch buffer holding only this call's
        // contributions; they are folded into the persistent buffers as each
        // node finishes, which is what makes repeated calls accumulate.
        let mut local: Vec<Option<Vec<T>>> = self
            .nodes
            .iter()
            .map(|n| n.grad.as_ref().map(|g| vec![T::zero(); g.len()]))
            .collect();
        if let Some(l) = local[loss.0].as_mut() {
            l[0] = T::one();
        }

        for id in (0..=loss.0).rev() {
            let Some(grad) = local[id].take() else {
                continue;
            };
            // fold this node's finished local grad into the persistent buffer
            if let Some(dst) = self.nodes[id].grad.as_mut() {
                kernels::axpy(dst, T::one(), &grad);
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.dispatch_backward(id, &op, &grad, &mut local);
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn accum(local: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        if let Some(g) = local[v.0].as_mut() {
            kernels::axpy(g, T::one(), delta);
        }
    }

    fn wants(local: &[Option<Vec<T>>], v: Var) -> bool {
        local[v.0].is_some()
    }

    fn dispatch_backward(&self, id: usize, op: &Op<T>, g: &[T], local: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(local, a, g);
                Self::accum(local, b, g);
            }
            Op::Sub(a, b) => {
                Self::accum(local, a, g);
                if Self::wants(local, b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    Self::accum(local, b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if Self::wants(local, a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    Self::accum(local, a, &da);
                }
                if Self::wants(local, b) {
                    let db: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    Self::accum(local, b, &db);
                }
            }
            Op::Scale(a, c) => {
                if Self::wants(local, a) {
                    let da: Vec<T> = g.iter().map(|&v| v * c).collect();
                    Self::accum(local, a, &da);
                }
            }
            Op::Silu(a) => {
                if Self::wants(local, a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(&gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s * (T::one() + x * (T::one() - s)))
                        })
                        .collect();
                    Self::accum(local, a, &da);
                }
            }
            Op::AbsPow(a, p) => {
                if Self::wants(local, a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(&gv, &x)| {
                            if p == 1 {
                                // subgradient 0 at the kink
                                let s = if x > T::zero() {
                                    T::one()
                                } else if x < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                gv * s
                            } else {
                                gv * T::from_f64(2.0) * x
                            }
                        })
                        .collect();
                    Self::accum(local, a, &da);
                }
            }
            Op::MeanAll(a) => {
                if Self::wants(local, a) {
                    let n = self.nodes[a.0].value.len();
                    let w = g[0] / T::from_f64(n as f64);
                    let da = vec![w; n];
                    Self::accum(local, a, &da);
                }
            }
            Op::Conv2d { x, w, b, ref dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    dims,
                    Self::wants(local, x),
                    Self::wants(local, w) || Self::wants(local, b),
                );
                if let Some(dx) = dx {
                    Self::accum(local, x, &dx);
                }
                if let Some(dw) = dw {
                    Self::accum(local, w, &dw);
                }
                if let Some(db) = db {
                    Self::accum(local, b, &db);
                }
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                ref stats,
            } => {
                let &[n, c, h, w] = self.nodes[x.0].shape.as_slice() else {
                    unreachable!()
                };
                let (dx, dgain, dbias) = kernels::group_norm_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[gain.0].value,
                    stats,
                    g,
                    n,
                    c,
                    h * w,
                    groups,
                );
                Self::accum(local, x, &dx);
                Self::accum(local, gain, &dgain);
                Self::accum(local, bias, &dbias);
            }
            Op::Dropout { x, ref mask } => {
                if Self::wants(local, x) {
                    let dx: Vec<T> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    Self::accum(local, x, &dx);
                }
            }
            Op::AvgPool2(a) => {
                if Self::wants(local, a) {
                    let &[n, c, h, w] = self.nodes[a.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let dx = kernels::avg_pool2_backward(g, n, c, h, w);
                    Self::accum(local, a, &dx);
                }
            }
            Op::UpsampleNearest2(a) => {
                if Self::wants(local, a) {
                    let &[n, c, h, w] = self.nodes[a.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let dx = kernels::upsample2_backward(g, n, c, h, w);
                    Self::accum(local, a, &dx);
                }
            }
            Op::Matmul { a, b } => {
                let &[m, k] = self.nodes[a.0].shape.as_slice() else {
                    unreachable!()
                };
                let n = self.nodes[b.0].shape[1];
                if Self::wants(local, a) {
                    let da = kernels::matmul_backward_a(g, &self.nodes[b.0].value, m, k, n);
                    Self::accum(local, a, &da);
                }
                if Self::wants(local, b) {
                    let db = kernels::matmul_backward_b(&self.nodes[a.0].value, g, m, k, n);
                    Self::accum(local, b, &db);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let &[ba, m, k] = self.nodes[a.0].shape.as_slice() else {
                    unreachable!()
                };
                let n = self.nodes[id].shape[2];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if Self::wants(local, a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..ba {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bvi = &bv[bi * k * n..(bi + 1) * k * n];
                        let dai = if transpose_b {
                            // c = a b^T (b is [n,k]): da = g * b
                            kernels::matmul(gi, bvi, m, n, k)
                        } else {
                            kernels::matmul_backward_a(gi, bvi, m, k, n)
                        };
                        da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&dai);
                    }
                    Self::accum(local, a, &da);
                }
                if Self::wants(local, b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..ba {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let ai = &av[bi * m * k..(bi + 1) * m * k];
                        let dbi = if transpose_b {
                            // db[n,k] = g^T * a
                            kernels::matmul_backward_b(gi, ai, m, n, k)
                        } else {
                            kernels::matmul_backward_b(ai, gi, m, k, n)
                        };
                        db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&dbi);
                    }
                    Self::accum(local, b, &db);
                }
            }
            Op::SoftmaxRows(a) => {
                if Self::wants(local, a) {
                    let cols = *self.nodes[id].shape.last().unwrap();
                    let dx = kernels::softmax_rows_backward(&self.nodes[id].value, g, cols);
                    Self::accum(local, a, &dx);
                }
            }
            Op::NchwToNlc(a) => {
                if Self::wants(local, a) {
                    let &[n, c, h, w] = self.nodes[a.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let l = h * w;
                    let mut dx = vec![T::zero(); g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..l {
                                dx[(ni * c + ci) * l + p] = g[(ni * l + p) * c + ci];
                            }
                        }
                    }
                    Self::accum(local, a, &dx);
                }
            }
            Op::NlcToNchw(a) => {
                if Self::wants(local, a) {
                    let &[n, l, c] = self.nodes[a.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let mut dx = vec![T::zero(); g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..l {
                                dx[(ni * l + p) * c + ci] = g[(ni * c + ci) * l + p];
                            }
                        }
                    }
                    Self::accum(local, a, &dx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let &[n, ca, h, w] = self.nodes[a.0].shape.as_slice() else {
                    unreachable!()
                };
                let cb = self.nodes[b.0].shape[1];
                let hw = h * w;
                if Self::wants(local, a) {
                    let mut da = vec![T::zero(); n * ca * hw];
                    for ni in 0..n {
                        da[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(
                            &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw],
                        );
                    }
                    Self::accum(local, a, &da);
                }
                if Self::wants(local, b) {
                    let mut db = vec![T::zero(); n * cb * hw];
                    for ni in 0..n {
                        db[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(
                            &g[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw],
                        );
                    }
                    Self::accum(local, b, &db);
                }
            }
            Op::SliceCols { x, start, end } => {
                if Self::wants(local, x) {
                    let &[r, c] = self.nodes[x.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let width = end - start;
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + end]
                            .copy_from_slice(&g[i * width..(i + 1) * width]);
                    }
                    Self::accum(local, x, &dx);
                }
            }
            Op::ScaleShiftChannels { x, scale, shift } => {
                let &[n, c, h, w] = self.nodes[x.0].shape.as_slice() else {
                    unreachable!()
                };
                let hw = h * w;
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[scale.0].value;
                if Self::wants(local, x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for nc in 0..n * c {
                        let s = T::one() + sv[nc];
                        for (d, &gv) in dx[nc * hw..(nc + 1) * hw]
                            .iter_mut()
                            .zip(&g[nc * hw..(nc + 1) * hw])
                        {
                            *d = gv * s;
                        }
                    }
                    Self::accum(local, x, &dx);
                }
                if Self::wants(local, scale) {
                    let mut ds = vec![T::zero(); n * c];
                    for nc in 0..n * c {
                        ds[nc] = kernels::dot(&g[nc * hw..(nc + 1) * hw], &xv[nc * hw..(nc + 1) * hw]);
                    }
                    Self::accum(local, scale, &ds);
                }
                if Self::wants(local, shift) {
                    let mut db = vec![T::zero(); n * c];
                    for nc in 0..n * c {
                        db[nc] = kernels::sum(&g[nc * hw..(nc + 1) * hw]);
                    }
                    Self::accum(local, shift, &db);
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                Self::accum(local, x, g);
                if Self::wants(local, bias) {
                    let &[r, c] = self.nodes[x.0].shape.as_slice() else {
                        unreachable!()
                    };
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        kernels::axpy(&mut db, T::one(), &g[i * c..(i + 1) * c]);
                    }
                    Self::accum(local, bias, &db);
                }
            }
            Op::Reshape(a) => {
                Self::accum(local, a, g);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
