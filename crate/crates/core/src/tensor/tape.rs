use super::conv::{self, ConvDims, ConvGeometry};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct LayerNormSaved<T> {
    group_of: Vec<usize>,
    inner_of: Vec<usize>,
    group_size: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug)]
struct EntropySaved {
    levels: Vec<Vec<f64>>,
    tau: f64,
    mean_probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        saved: Box<LayerNormSaved<T>>,
    },
    ScaleChannels(Var, Vec<T>),
    SliceAxis {
        x: Var,
        axis: usize,
        start: usize,
    },
    PadFirstFrame(Var, usize),
    RepeatTime(Var, usize),
    RepeatSpace(Var, usize),
    AvgPoolTime {
        x: Var,
        window: usize,
        stride: usize,
        pad_left: usize,
    },
    StraightThrough(Var),
    Gather {
        codebook: Var,
        indices: Vec<usize>,
    },
    EntropyPenalty(Var, Box<EntropySaved>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Tape::backward`] walks the record once in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    checked: bool,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank5(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::shape(op, format!("expected [B,C,T,H,W], got {shape:?}")))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
            macs: 0,
        }
    }

    /// A tape that fails any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input (parameter or data that needs gradients).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when
    /// `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.nodes[x.0].value.map(f);
        self.push(value, op, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "silu", |v| v / (T::one() + (-v).exp()), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", |v| v.abs(), Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: T = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(x), "mean")
    }

    /// General convolution over `[B, C_in, T, H, W]` with a weight holding
    /// `C_out * C_in * kernel_volume` values and an optional `[C_out]` bias.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, c_out: usize, geom: ConvGeometry) -> Result<Var> {
        let [batch, c_in, t, h, wd] = rank5("conv", self.shape(x))?;
        if batch * c_in * t * h * wd == 0 {
            return Err(Error::Empty("conv"));
        }
        let expected = c_out * c_in * geom.kernel_volume();
        if self.val(w).len() != expected {
            return Err(Error::shape(
                "conv",
                format!(
                    "weight {:?} does not match C_out={c_out}, C_in={c_in}, kernel {:?}",
                    self.shape(w),
                    geom.kernel
                ),
            ));
        }
        if let Some(b) = b {
            if self.val(b).len() != c_out {
                return Err(Error::shape("conv", format!("bias {:?} for C_out={c_out}", self.shape(b))));
            }
        }
        let output = geom.output_extent([t, h, wd])?;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            input: [t, h, wd],
            output,
            geom,
        };
        let data = conv::forward(&dims, self.val(x), self.val(w), b.map(|b| self.val(b)));
        self.macs += dims.macs();
        let value = Tensor::new(vec![batch, c_out, output[0], output[1], output[2]], data)?;
        self.push(value, Op::Conv { x, w, b, dims }, "conv")
    }

    /// 3D convolution; `w` is `[C_out, C_in, kt, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        temporal: super::TemporalPadding,
    ) -> Result<Var> {
        let ws = self.shape(w);
        let [c_out, _, kt, kh, kw] = <[usize; 5]>::try_from(ws)
            .map_err(|_| Error::shape("conv3d", format!("weight must be rank 5, got {ws:?}")))?;
        self.conv(x, w, b, c_out, ConvGeometry::new([kt, kh, kw], stride, temporal))
    }

    /// Per-frame 2D convolution; `w` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 2]) -> Result<Var> {
        let ws = self.shape(w);
        let [c_out, _, kh, kw] = <[usize; 4]>::try_from(ws)
            .map_err(|_| Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")))?;
        let geom = ConvGeometry::new(
            [1, kh, kw],
            [1, stride[0], stride[1]],
            super::TemporalPadding::Symmetric,
        );
        self.conv(x, w, b, c_out, geom)
    }

    /// Per-pixel temporal convolution; `w` is `[C_out, C_in, kt]`.
    pub fn conv1d_temporal(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        temporal: super::TemporalPadding,
    ) -> Result<Var> {
        let ws = self.shape(w);
        let [c_out, _, kt] = <[usize; 3]>::try_from(ws)
            .map_err(|_| Error::shape("conv1d_temporal", format!("weight must be rank 3, got {ws:?}")))?;
        let geom = ConvGeometry::new([kt, 1, 1], [stride, 1, 1], temporal);
        self.conv(x, w, b, c_out, geom)
    }

    /// Layer normalization over `axes` with an affine transform whose shape
    /// is the extents of those axes. Variance is biased and gets `1e-6` added.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, axes: &[usize]) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::shape("layer_norm", "normalization axes must be nonempty"));
        }
        let mut norm = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || norm[a] {
                return Err(Error::shape("layer_norm", format!("bad axes {axes:?} for {shape:?}")));
            }
            norm[a] = true;
        }
        let affine: Vec<usize> = (0..shape.len()).filter(|&a| norm[a]).map(|a| shape[a]).collect();
        for p in [scale, shift] {
            if self.shape(p) != affine.as_slice() {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine shape {:?}, expected {affine:?}", self.shape(p)),
                ));
            }
        }
        let group_shape: Vec<usize> = (0..shape.len()).filter(|&a| !norm[a]).map(|a| shape[a]).collect();
        let gstr = strides(&group_shape);
        let istr = strides(&affine);
        let n: usize = shape.iter().product();
        let n_groups: usize = group_shape.iter().product();
        let group_size: usize = affine.iter().product();
        let mut group_of = vec![0; n];
        let mut inner_of = vec![0; n];
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..n {
            let (mut g, mut i, mut gi, mut ii) = (0, 0, 0, 0);
            for (a, &ix) in idx.iter().enumerate() {
                if norm[a] {
                    i += ix * istr[ii];
                    ii += 1;
                } else {
                    g += ix * gstr[gi];
                    gi += 1;
                }
            }
            group_of[flat] = g;
            inner_of[flat] = i;
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let xs = self.val(x);
        let mut mean = vec![T::zero(); n_groups];
        for (k, &v) in xs.iter().enumerate() {
            mean[group_of[k]] += v;
        }
        let m = T::of(group_size as f64);
        mean.iter_mut().for_each(|v| *v = *v / m);
        let mut var = vec![T::zero(); n_groups];
        for (k, &v) in xs.iter().enumerate() {
            let d = v - mean[group_of[k]];
            var[group_of[k]] += d * d;
        }
        let rstd: Vec<T> = var.iter().map(|&v| (v / m + T::of(EPS)).sqrt().recip()).collect();
        let xhat: Vec<T> = xs
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - mean[group_of[k]]) * rstd[group_of[k]])
            .collect();
        let (sc, sh) = (self.val(scale), self.val(shift));
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(k, &h)| h * sc[inner_of[k]] + sh[inner_of[k]])
            .collect();
        let saved = Box::new(LayerNormSaved {
            group_of,
            inner_of,
            group_size,
            xhat,
            rstd,
        });
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                scale,
                shift,
                saved,
            },
            "layer_norm",
        )
    }

    /// Multiplies channel `c` (axis 1) by the constant `factors[c]`.
    pub fn scale_channels(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let [_, c, t, h, w] = rank5("scale_channels", self.shape(x))?;
        if factors.len() != c {
            return Err(Error::shape("scale_channels", format!("{} factors for {c} channels", factors.len())));
        }
        let plane = t * h * w;
        let mut value = self.value(x).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v *= factors[(k / plane) % c];
        }
        self.push(value, Op::ScaleChannels(x, factors.to_vec()), "scale_channels")
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("slice {start}..{} of axis {axis} in {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.val(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(Tensor::new(oshape, out)?, Op::SliceAxis { x, axis, start }, "slice_axis")
    }

    /// Prepends `count` copies of frame 0 along the time axis.
    pub fn pad_first_frame(&mut self, x: Var, count: usize) -> Result<Var> {
        let [b, c, t, h, w] = rank5("pad_first_frame", self.shape(x))?;
        if t == 0 {
            return Err(Error::Empty("pad_first_frame"));
        }
        let plane = h * w;
        let src = self.val(x);
        let mut out = Vec::with_capacity(b * c * (t + count) * plane);
        for bc in 0..b * c {
            let clip = &src[bc * t * plane..(bc + 1) * t * plane];
            for _ in 0..count {
                out.extend_from_slice(&clip[..plane]);
            }
            out.extend_from_slice(clip);
        }
        self.push(
            Tensor::new(vec![b, c, t + count, h, w], out)?,
            Op::PadFirstFrame(x, count),
            "pad_first_frame",
        )
    }

    /// Repeats every frame `factor` times.
    pub fn repeat_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, t, h, w] = rank5("repeat_time", self.shape(x))?;
        let plane = h * w;
        let src = self.val(x);
        let mut out = Vec::with_capacity(b * c * t * factor * plane);
        for frame in src.chunks(plane.max(1)) {
            for _ in 0..factor {
                out.extend_from_slice(frame);
            }
        }
        self.push(
            Tensor::new(vec![b, c, t * factor, h, w], out)?,
            Op::RepeatTime(x, factor),
            "repeat_time",
        )
    }

    /// Nearest-neighbour spatial upsampling by `factor`.
    pub fn repeat_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, t, h, w] = rank5("repeat_space", self.shape(x))?;
        let src = self.val(x);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * t * oh * ow];
        for (f, frame) in out.chunks_mut(oh * ow).enumerate() {
            let s = &src[f * h * w..(f + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    frame[y * ow + xx] = s[(y / factor) * w + xx / factor];
                }
            }
        }
        self.push(
            Tensor::new(vec![b, c, t, oh, ow], out)?,
            Op::RepeatSpace(x, factor),
            "repeat_space",
        )
    }

    /// Temporal average pooling; out-of-range frames replicate the nearest
    /// edge frame. Causal pooling pads `window - stride` frames on the left.
    pub fn avg_pool_time(&mut self, x: Var, window: usize, stride: usize, causal: bool) -> Result<Var> {
        let [b, c, t, h, w] = rank5("avg_pool_time", self.shape(x))?;
        if window == 0 || stride == 0 || window < stride {
            return Err(Error::shape("avg_pool_time", "need window >= stride > 0"));
        }
        if t % stride != 0 {
            return Err(Error::shape(
                "avg_pool_time",
                format!("{t} frames not divisible by stride {stride}"),
            ));
        }
        let total = window - stride;
        let pad_left = if causal { total } else { total / 2 };
        let to = t / stride;
        let plane = h * w;
        let src = self.val(x);
        let inv = T::of(1.0 / window as f64);
        let mut out = vec![T::zero(); b * c * to * plane];
        for bc in 0..b * c {
            for o in 0..to {
                let dst = &mut out[(bc * to + o) * plane..][..plane];
                for j in 0..window {
                    let ti = (o * stride + j) as i64 - pad_left as i64;
                    let ti = ti.clamp(0, t as i64 - 1) as usize;
                    let s = &src[(bc * t + ti) * plane..][..plane];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += v * inv;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![b, c, to, h, w], out)?,
            Op::AvgPoolTime {
                x,
                window,
                stride,
                pad_left,
            },
            "avg_pool_time",
        )
    }

    /// Forward value `values`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, values: Tensor<T>) -> Result<Var> {
        if values.shape() != self.shape(x) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", values.shape(), self.shape(x)),
            ));
        }
        self.push(values, Op::StraightThrough(x), "straight_through")
    }

    /// Looks up codebook rows: `codebook` is `[K, C]`, `indices` holds one row
    /// index per (batch, position) and the output has `shape = [B, C, T, H, W]`.
    pub fn gather_rows(&mut self, codebook: Var, indices: Vec<usize>, shape: [usize; 5]) -> Result<Var> {
        let cs = self.shape(codebook).to_vec();
        let [k, c] = <[usize; 2]>::try_from(cs.as_slice())
            .map_err(|_| Error::shape("gather_rows", format!("codebook must be [K, C], got {cs:?}")))?;
        let [b, sc, t, h, w] = shape;
        let plane = t * h * w;
        if sc != c || indices.len() != b * plane {
            return Err(Error::shape("gather_rows", "indices do not match output shape"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange {
                index: bad as u64,
                size: k as u64,
            });
        }
        let cb = self.val(codebook);
        let mut out = vec![T::zero(); b * c * plane];
        for bi in 0..b {
            for p in 0..plane {
                let row = indices[bi * plane + p];
                for ch in 0..c {
                    out[(bi * c + ch) * plane + p] = cb[row * c + ch];
                }
            }
        }
        self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Gather { codebook, indices },
            "gather_rows",
        )
    }

    /// Batch entropy penalty over soft level assignments.
    ///
    /// For channel `i` at each position, `p(k) ∝ exp(-(x - levels[i][k])² / tau)`.
    /// The result is the mean per-position entropy (summed over channels)
    /// minus the entropy of the batch-averaged assignment (summed over
    /// channels).
    pub fn entropy_penalty(&mut self, x: Var, levels: &[Vec<f64>], tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Config(format!("entropy temperature must be positive, got {tau}")));
        }
        let [b, c, t, h, w] = rank5("entropy_penalty", self.shape(x))?;
        if levels.len() != c {
            return Err(Error::shape("entropy_penalty", format!("{} level sets for {c} channels", levels.len())));
        }
        let plane = t * h * w;
        let positions = b * plane;
        if positions == 0 {
            return Err(Error::Empty("entropy_penalty"));
        }
        let xs = self.val(x);
        let mut mean_probs: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.len()]).collect();
        let mut per_sample = 0.0;
        let mut logp = Vec::new();
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..plane {
                    let v = xs[(bi * c + ch) * plane + p].f64();
                    log_softmax_levels(v, &levels[ch], tau, &mut logp);
                    for (k, &lp) in logp.iter().enumerate() {
                        let pk = lp.exp();
                        per_sample -= pk * lp;
                        mean_probs[ch][k] += pk;
                    }
                }
            }
        }
        let inv = 1.0 / positions as f64;
        per_sample *= inv;
        let mut batch = 0.0;
        for mp in &mut mean_probs {
            for v in mp.iter_mut() {
                *v *= inv;
                if *v > 0.0 {
                    batch -= *v * v.ln();
                }
            }
        }
        let saved = Box::new(EntropySaved {
            levels: levels.to_vec(),
            tau,
            mean_probs,
        });
        self.push(
            Tensor::scalar(T::of(per_sample - batch)),
            Op::EntropyPenalty(x, saved),
            "entropy_penalty",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        if self.checked {
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of node {i}")));
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient for a broadcast binary operand: summed when the operand was
    /// a scalar broadcast against a larger tensor.
    fn reduce_to(&self, v: Var, full: Vec<T>) -> Vec<T> {
        if self.val(v).len() == 1 && full.len() != 1 {
            vec![full.into_iter().sum()]
        } else {
            full
        }
    }

    fn broadcast_get(data: &[T], k: usize) -> T {
        if data.len() == 1 {
            data[0]
        } else {
            data[k]
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.needs(*a) {
                    let c = self.reduce_to(*a, g.to_vec());
                    self.accumulate(grads, *a, c);
                }
                if self.needs(*b) {
                    let c = self.reduce_to(*b, g.iter().map(|&v| v * sign).collect());
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let full = g.iter().enumerate().map(|(k, &gv)| gv * Self::broadcast_get(bv, k)).collect();
                    let c = self.reduce_to(*a, full);
                    self.accumulate(grads, *a, c);
                }
                if self.needs(*b) {
                    let full = g.iter().enumerate().map(|(k, &gv)| gv * Self::broadcast_get(av, k)).collect();
                    let c = self.reduce_to(*b, full);
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(x) | Op::StraightThrough(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Silu(x) => {
                let contribution = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &v)| {
                        let s = (T::one() + (-v).exp()).recip();
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, contribution);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let contribution = g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                self.accumulate(grads, *x, contribution);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let contribution = g.iter().zip(self.val(*x)).map(|(&gv, &v)| gv * two * v).collect();
                self.accumulate(grads, *x, contribution);
            }
            Op::Abs(x) => {
                let contribution = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, contribution);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Conv { x, w, b, dims } => {
                if self.needs(*x) {
                    let gx = conv::backward_input(dims, g, self.val(*w));
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let gw = conv::backward_weight(dims, g, self.val(*x));
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = conv::backward_bias(dims, g);
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                saved,
            } => {
                let sc = self.val(*scale);
                let affine = sc.len();
                if self.needs(*scale) || self.needs(*shift) {
                    let mut gs = vec![T::zero(); affine];
                    let mut gb = vec![T::zero(); affine];
                    for (k, &gv) in g.iter().enumerate() {
                        let inner = saved.inner_of[k];
                        gs[inner] += gv * saved.xhat[k];
                        gb[inner] += gv;
                    }
                    self.accumulate(grads, *scale, gs);
                    self.accumulate(grads, *shift, gb);
                }
                if self.needs(*x) {
                    let n_groups = saved.rstd.len();
                    let mut sum_d = vec![T::zero(); n_groups];
                    let mut sum_dx = vec![T::zero(); n_groups];
                    let dxhat: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| gv * sc[saved.inner_of[k]])
                        .collect();
                    for (k, &d) in dxhat.iter().enumerate() {
                        let grp = saved.group_of[k];
                        sum_d[grp] += d;
                        sum_dx[grp] += d * saved.xhat[k];
                    }
                    let m = T::of(saved.group_size as f64);
                    let gx = dxhat
                        .iter()
                        .enumerate()
                        .map(|(k, &d)| {
                            let grp = saved.group_of[k];
                            saved.rstd[grp] / m * (m * d - sum_d[grp] - saved.xhat[k] * sum_dx[grp])
                        })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ScaleChannels(x, factors) => {
                let s = node.value.shape();
                let plane = s[2] * s[3] * s[4];
                let c = s[1];
                let contribution = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gv)| gv * factors[(k / plane) % c])
                    .collect();
                self.accumulate(grads, *x, contribution);
            }
            Op::SliceAxis { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PadFirstFrame(x, count) => {
                let s = self.shape(*x);
                let (bc, t, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
                let tp = t + count;
                let mut gx = vec![T::zero(); bc * t * plane];
                for k in 0..bc {
                    for f in 0..tp {
                        let dst_f = f.saturating_sub(*count);
                        let src = &g[(k * tp + f) * plane..][..plane];
                        let dst = &mut gx[(k * t + dst_f) * plane..][..plane];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RepeatTime(x, factor) => {
                let s = self.shape(*x);
                let plane = s[3] * s[4];
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for (f, dst) in gx.chunks_mut(plane.max(1)).enumerate() {
                    for r in 0..*factor {
                        let src = &g[(f * factor + r) * plane..][..plane];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RepeatSpace(x, factor) => {
                let s = self.shape(*x);
                let (h, w) = (s[3], s[4]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for (f, dst) in gx.chunks_mut(h * w).enumerate() {
                    let src = &g[f * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPoolTime {
                x,
                window,
                stride,
                pad_left,
            } => {
                let s = self.shape(*x);
                let (bc, t, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
                let to = t / stride;
                let inv = T::of(1.0 / *window as f64);
                let mut gx = vec![T::zero(); bc * t * plane];
                for k in 0..bc {
                    for o in 0..to {
                        let src = &g[(k * to + o) * plane..][..plane];
                        for j in 0..*window {
                            let ti = (o * stride + j) as i64 - *pad_left as i64;
                            let ti = ti.clamp(0, t as i64 - 1) as usize;
                            let dst = &mut gx[(k * t + ti) * plane..][..plane];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { codebook, indices } => {
                let s = node.value.shape();
                let (b, c) = (s[0], s[1]);
                let plane = s[2] * s[3] * s[4];
                let mut gc = vec![T::zero(); self.val(*codebook).len()];
                for bi in 0..b {
                    for p in 0..plane {
                        let row = indices[bi * plane + p];
                        for ch in 0..c {
                            gc[row * c + ch] += g[(bi * c + ch) * plane + p];
                        }
                    }
                }
                self.accumulate(grads, *codebook, gc);
            }
            Op::EntropyPenalty(x, saved) => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let plane = s[2] * s[3] * s[4];
                let inv = 1.0 / (b * plane) as f64;
                let upstream = g[0].f64();
                let log_mean: Vec<Vec<f64>> = saved
                    .mean_probs
                    .iter()
                    .map(|mp| mp.iter().map(|&v| v.max(1e-300).ln()).collect())
                    .collect();
                let xs = self.val(*x);
                let mut gx = vec![T::zero(); xs.len()];
                let mut logp = Vec::new();
                let mut dp = Vec::new();
                for bi in 0..b {
                    for ch in 0..c {
                        let levels = &saved.levels[ch];
                        for p in 0..plane {
                            let idx = (bi * c + ch) * plane + p;
                            let v = xs[idx].f64();
                            log_softmax_levels(v, levels, saved.tau, &mut logp);
                            dp.clear();
                            dp.extend(logp.iter().zip(&log_mean[ch]).map(|(&lp, &lm)| inv * (lm - lp)));
                            let avg: f64 = logp.iter().zip(&dp).map(|(&lp, &d)| lp.exp() * d).sum();
                            let mut dv = 0.0;
                            for (k, &level) in levels.iter().enumerate() {
                                let pk = logp[k].exp();
                                let dlogit = pk * (dp[k] - avg);
                                dv += dlogit * (-2.0 * (v - level) / saved.tau);
                            }
                            gx[idx] = T::of(upstream * dv);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn log_softmax_levels(v: f64, levels: &[f64], tau: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(levels.iter().map(|&l| -(v - l) * (v - l) / tau));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    out.iter_mut().for_each(|z| *z -= lse);
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Silu(x)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Square(x)
        | Op::Abs(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::ScaleChannels(x, _)
        | Op::PadFirstFrame(x, _)
        | Op::RepeatTime(x, _)
        | Op::RepeatSpace(x, _)
        | Op::StraightThrough(x)
        | Op::EntropyPenalty(x, _) => vec![*x],
        Op::SliceAxis { x, .. } | Op::AvgPoolTime { x, .. } => vec![*x],
        Op::Conv { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::LayerNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
        Op::Gather { codebook, .. } => vec![*codebook],
    }
}
