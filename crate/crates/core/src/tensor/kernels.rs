//! Forward and backward kernels on plain tensors. The tape in `tape.rs`
//! strings these together; they are also usable directly for inference.

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Square 2-D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Padding that keeps the spatial extent at stride 1.
    pub fn same(self) -> Self {
        let p = self.dilation * (self.kernel - 1) / 2;
        self.padding(p)
    }

    /// Span of input covered by one output element: `k + (k - 1)(d - 1)`.
    pub fn receptive_field(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.dilation - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "kernel, stride and dilation must be >= 1 in {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("zero channel count in {self:?}")));
        }
        Ok(())
    }

    /// `floor((extent + 2p - d(k-1) - 1) / s) + 1`
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        let padded = extent + 2 * self.padding;
        let field = self.receptive_field();
        if field > padded {
            return Err(Error::Shape(format!(
                "effective kernel extent {field} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - field) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        )
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGeometry> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, input has {}",
            spec.in_channels, s.c
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv weights are {}, expected {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    Ok(ConvGeometry {
        c: s.c,
        h: s.h,
        w: s.w,
        oh: spec.output_extent(s.h)?,
        ow: spec.output_extent(s.w)?,
    })
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds one `C x H x W` image into a `(C k k) x (oh ow)` column matrix.
fn im2col<T: Real>(image: &[T], g: &ConvGeometry, spec: &ConvSpec, col: &mut [T]) {
    let k = spec.kernel;
    let l = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy =
                        (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeometry, spec: &ConvSpec, image: &mut [T]) {
    let k = spec.kernel;
    let l = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy =
                        (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dilated cross-correlation with zero padding plus per-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weights, spec)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::Shape(format!(
                "conv bias has {} entries for {} output channels",
                b.len(),
                spec.out_channels
            )));
        }
    }
    let n = input.shape().n;
    let rows = g.c * spec.kernel * spec.kernel;
    let l = g.oh * g.ow;
    let oc = spec.out_channels;
    let out_shape = Shape::new(n, oc, g.oh, g.ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let pointwise = is_pointwise(spec);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * l]
    };
    let image_len = g.c * g.h * g.w;

    for b in 0..n {
        let image = &input.data()[b * image_len..(b + 1) * image_len];
        let cols: &[T] = if pointwise {
            image
        } else {
            im2col(image, &g, spec, &mut col);
            &col
        };
        let dst = &mut out[b * oc * l..(b + 1) * oc * l];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_exact_mut(l).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            oc,
            rows,
            l,
            weights.data(),
            (rows as isize, 1),
            cols,
            (l as isize, 1),
            beta,
            dst,
            (l as isize, 1),
        );
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weights, spec)?;
    let n = input.shape().n;
    let rows = g.c * spec.kernel * spec.kernel;
    let l = g.oh * g.ow;
    let oc = spec.out_channels;
    if grad_out.shape() != Shape::new(n, oc, g.oh, g.ow) {
        return Err(Error::Shape(format!(
            "conv output gradient is {}, expected {}",
            grad_out.shape(),
            Shape::new(n, oc, g.oh, g.ow)
        )));
    }
    let pointwise = is_pointwise(spec);
    let image_len = g.c * g.h * g.w;
    let mut dw = vec![T::zero(); weights.numel()];
    let mut db = vec![T::zero(); oc];
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * l]
    };
    let mut dcol = if want_input && !pointwise {
        vec![T::zero(); rows * l]
    } else {
        Vec::new()
    };

    for b in 0..n {
        let image = &input.data()[b * image_len..(b + 1) * image_len];
        let go = &grad_out.data()[b * oc * l..(b + 1) * oc * l];
        for (o, chunk) in go.chunks_exact(l).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        let cols: &[T] = if pointwise {
            image
        } else {
            im2col(image, &g, spec, &mut col);
            &col
        };
        // dW (oc x rows) += dOut (oc x l) * cols^T (l x rows)
        T::gemm(
            oc,
            l,
            rows,
            go,
            (l as isize, 1),
            cols,
            (1, l as isize),
            T::one(),
            &mut dw,
            (rows as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * image_len..(b + 1) * image_len];
            // dCols (rows x l) = W^T (rows x oc) * dOut (oc x l)
            if pointwise {
                T::gemm(
                    rows,
                    oc,
                    l,
                    weights.data(),
                    (1, rows as isize),
                    go,
                    (l as isize, 1),
                    T::zero(),
                    dst,
                    (l as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    oc,
                    l,
                    weights.data(),
                    (1, rows as isize),
                    go,
                    (l as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (l as isize, 1),
                );
                col2im(&dcol, &g, spec, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape(), d)),
        weights: Tensor::from_parts(weights.shape(), dw),
        bias: db,
    })
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index of the selected maximum (first in
/// row-major scan order on ties).
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "maxpool2 needs even extents, got {s}"
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + s.w, top + s.w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, out), argmax))
}

pub fn maxpool2_backward<T: Real>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx[idx] += g;
    }
    Tensor::from_parts(input_shape, dx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in input.data().chunks_exact(s.plane()) {
        for row in plane.chunks_exact(s.w) {
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub fn upsample_nearest2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let in_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut dx = vec![T::zero(); in_shape.numel()];
    let g = grad_out.data();
    for plane in 0..s.n * s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                dx[plane * in_shape.plane() + (y / 2) * in_shape.w + x / 2] +=
                    g[plane * s.plane() + y * s.w + x];
            }
        }
    }
    Tensor::from_parts(in_shape, dx)
}

fn check_channel_vec<T>(name: &str, v: &[T], channels: usize) -> Result<()> {
    if v.len() != channels {
        return Err(Error::Shape(format!(
            "batch-norm {name} has {} entries for {channels} channels",
            v.len()
        )));
    }
    Ok(())
}

/// Saved state of a batch-norm forward pass.
pub struct BatchNormForward<T> {
    pub output: Tensor<T>,
    /// Normalized input.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased per-channel variance of the batch.
    pub batch_var: Vec<T>,
}

/// Normalizes with `(mean, var)` and applies `gamma * xhat + beta`.
fn batchnorm_apply<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let s = input.shape();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); s.numel()];
    let mut xhat = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let z = (input.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = z;
                out[i] = gamma[c] * z + beta[c];
            }
        }
    }
    (
        Tensor::from_parts(s, out),
        Tensor::from_parts(s, xhat),
        inv_std,
    )
}

pub fn batchnorm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<BatchNormForward<T>> {
    let s = input.shape();
    check_channel_vec("gamma", gamma, s.c)?;
    check_channel_vec("beta", beta, s.c)?;
    let plane = s.plane();
    let count = T::lit((s.n * plane) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            acc += input.data()[start..start + plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        mean[c] = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for &x in &input.data()[start..start + plane] {
                let d = x - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / count;
    }
    let (output, xhat, inv_std) = batchnorm_apply(input, gamma, beta, &mean, &var, eps);
    Ok(BatchNormForward {
        output,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

pub fn batchnorm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<BatchNormForward<T>> {
    let c = input.shape().c;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    check_channel_vec("running mean", running_mean, c)?;
    check_channel_vec("running variance", running_var, c)?;
    let (output, xhat, inv_std) =
        batchnorm_apply(input, gamma, beta, running_mean, running_var, eps);
    Ok(BatchNormForward {
        output,
        xhat,
        inv_std,
        batch_mean: running_mean.to_vec(),
        batch_var: running_var.to_vec(),
    })
}

/// Momentum update of running statistics from a training batch. The running
/// variance tracks the unbiased batch variance.
pub fn batchnorm_update_running<T: Real>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    count: usize,
    momentum: T,
) {
    let correction = if count > 1 {
        T::lit(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    for c in 0..running_mean.len() {
        running_mean[c] = (T::one() - momentum) * running_mean[c] + momentum * batch_mean[c];
        running_var[c] =
            (T::one() - momentum) * running_var[c] + momentum * batch_var[c] * correction;
    }
}

/// Spec-level batch norm: normalizes, and in training mode also advances the
/// running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    eps: T,
    momentum: T,
    training: bool,
) -> Result<Tensor<T>> {
    if training {
        let fwd = batchnorm_train(input, gamma, beta, eps)?;
        check_channel_vec("running mean", running_mean, gamma.len())?;
        check_channel_vec("running variance", running_var, gamma.len())?;
        let s = input.shape();
        batchnorm_update_running(
            running_mean,
            running_var,
            &fwd.batch_mean,
            &fwd.batch_var,
            s.n * s.plane(),
            momentum,
        );
        Ok(fwd.output)
    } else {
        Ok(batchnorm_eval(input, gamma, beta, running_mean, running_var, eps)?.output)
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    training: bool,
) -> BatchNormGrads<T> {
    let s = grad_out.shape();
    let plane = s.plane();
    let m = T::lit((s.n * plane) as f64);
    let g = grad_out.data();
    let xh = xhat.data();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    for c in 0..s.c {
        let scale = gamma[c] * inv_std[c];
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                dx[i] = if training {
                    scale * (g[i] - (dbeta[c] + xh[i] * dgamma[c]) / m)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    BatchNormGrads {
        input: Tensor::from_parts(s, dx),
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, alpha: T) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { alpha * x })
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn exp<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.exp())
}

/// Stacks along the channel axis in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Shape(format!("concat of {first} with {s}")));
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            let len = t.shape().c * first.plane();
            out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn slice_channels<T: Real>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::Shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        out.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_parts(s.with_channels(len), out))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    ))
}

/// `s * a + (1 - s) * b` where the single-channel `s` broadcasts over channels.
pub fn blend<T: Real>(switch: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ss, sa) = (switch.shape(), a.shape());
    if sa != b.shape() {
        return Err(Error::Shape(format!(
            "blend branches {} and {}",
            sa,
            b.shape()
        )));
    }
    if ss != sa.with_channels(1) {
        return Err(Error::Shape(format!("blend switch {ss} for branches {sa}")));
    }
    let plane = sa.plane();
    let mut out = Vec::with_capacity(sa.numel());
    for n in 0..sa.n {
        let sw = &switch.data()[n * plane..(n + 1) * plane];
        for c in 0..sa.c {
            let base = (n * sa.c + c) * plane;
            for i in 0..plane {
                let (x, y) = (a.data()[base + i], b.data()[base + i]);
                out.push(y + sw[i] * (x - y));
            }
        }
    }
    Ok(Tensor::from_parts(sa, out))
}

fn pool_factors(s: Shape, th: usize, tw: usize) -> Result<(usize, usize)> {
    if th == 0 || tw == 0 || !s.h.is_multiple_of(th) || !s.w.is_multiple_of(tw) {
        return Err(Error::Shape(format!(
            "average pool target {th}x{tw} does not divide {}x{}",
            s.h, s.w
        )));
    }
    Ok((s.h / th, s.w / tw))
}

/// Averages non-overlapping blocks so the output is `th x tw`.
pub fn avgpool_to<T: Real>(input: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let (fy, fx) = pool_factors(s, th, tw)?;
    let out_shape = Shape::new(s.n, s.c, th, tw);
    let mut out = vec![T::zero(); out_shape.numel()];
    let x = input.data();
    for plane in 0..s.n * s.c {
        for y in 0..s.h {
            for xx in 0..s.w {
                out[plane * th * tw + (y / fy) * tw + xx / fx] +=
                    x[plane * s.plane() + y * s.w + xx];
            }
        }
    }
    let scale = T::one() / T::lit((fy * fx) as f64);
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn avgpool_to_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    let (fy, fx) = pool_factors(input_shape, gs.h, gs.w)?;
    let scale = T::one() / T::lit((fy * fx) as f64);
    let s = input_shape;
    let mut dx = vec![T::zero(); s.numel()];
    for plane in 0..s.n * s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                dx[plane * s.plane() + y * s.w + x] =
                    grad_out.data()[plane * gs.plane() + (y / fy) * gs.w + x / fx] * scale;
            }
        }
    }
    Ok(Tensor::from_parts(s, dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn same_convolution_keeps_extent() {
        let spec = ConvSpec::new(1, 1, 3).padding(1);
        assert_eq!(spec.output_extent(512).unwrap(), 512);
    }

    #[test]
    fn dilated_output_extent() {
        let spec = ConvSpec::new(1, 1, 3).dilation(2);
        assert_eq!(spec.output_extent(7).unwrap(), 3);
    }

    #[test]
    fn zero_kernel_passes_bias() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, h, w]| (h * 3 + w) as f64);
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, Some(&[0.7]), &ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 0.7);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 2, 3, 3));
        assert!(conv2d(&x, &w, None, &ConvSpec::new(3, 1, 3)).is_err());
        // effective kernel 5 > 4
        let spec = ConvSpec::new(2, 1, 3).dilation(2);
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
        assert!(conv2d(&x, &w, Some(&[0.0, 0.0]), &ConvSpec::new(2, 1, 3)).is_err());
    }

    #[test]
    fn maxpool_basics() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.item(), 4.0);
        assert_eq!(arg, vec![3]);
        let c = Tensor::<f64>::full(Shape::new(1, 2, 8, 8), 3.5);
        let (y, _) = maxpool2(&c).unwrap();
        assert_eq!(y, Tensor::full(Shape::new(1, 2, 4, 4), 3.5));
        assert!(maxpool2(&Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4))).is_err());
        assert_eq!(
            maxpool2(&Tensor::<f32>::zeros(Shape::new(1, 1, 512, 512)))
                .unwrap()
                .0
                .shape(),
            Shape::new(1, 1, 256, 256)
        );
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = t(Shape::new(1, 1, 2, 2), &[5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool2(&x).unwrap();
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::scalar(1.0));
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates() {
        let x = t(Shape::new(1, 1, 1, 1), &[5.0]);
        assert_eq!(
            upsample_nearest2(&x),
            Tensor::full(Shape::new(1, 1, 2, 2), 5.0)
        );
        let m = Tensor::<f32>::zeros(Shape::new(1, 1, 64, 64));
        assert_eq!(upsample_nearest2(&m).shape(), Shape::new(1, 1, 128, 128));
    }

    #[test]
    fn batchnorm_cases() {
        // zero-mean unit-variance channel stays put
        let x = t(Shape::new(1, 1, 1, 4), &[-1.0, 1.0, -1.0, 1.0]);
        let f = batchnorm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        assert!(f.output.max_abs_diff(&x) < 1e-5);
        // constant channel maps to beta
        let c = Tensor::full(Shape::new(2, 1, 3, 3), 4.2);
        let f = batchnorm_train(&c, &[1.7], &[0.3], 1e-5).unwrap();
        assert!(f.output.data().iter().all(|&v| v == 0.3));
        // affine arithmetic on a normalized value of 0.5
        let v = t(Shape::new(1, 1, 1, 1), &[0.5]);
        let y = batchnorm_eval(&v, &[2.0], &[1.0], &[0.0], &[1.0 - 1e-5], 1e-5).unwrap();
        assert!((y.output.item() - 2.0).abs() < 1e-12);
        assert!(batchnorm_train(&x, &[1.0, 1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn batchnorm_running_statistics() {
        let x = t(Shape::new(1, 1, 1, 4), &[1.0, 2.0, 3.0, 4.0]);
        let mut mean = [0.0];
        let mut var = [1.0];
        batchnorm(&x, &[1.0], &[0.0], &mut mean, &mut var, 1e-5, 0.1, true).unwrap();
        assert!((mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let before = (mean, var);
        batchnorm(&x, &[1.0], &[0.0], &mut mean, &mut var, 1e-5, 0.1, false).unwrap();
        assert_eq!(before, (mean, var));
    }

    #[test]
    fn activations() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1.0, 3.0, -5.0]);
        assert_eq!(leaky_relu(&x, 0.1).data(), &[-0.1, 3.0, -0.5]);
        assert_eq!(leaky_relu(&x, 0.0).data(), &[0.0, 3.0, 0.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0f64).is_finite());
        assert!((exp(&x).data()[1] - 3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 64, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 128, 4, 4));
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape().c, 192);
        let c = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 4));
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn avgpool_cases() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 128, 128), 0.25);
        let y = avgpool_to(&x, 32, 32).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 32, 32));
        assert!(y.data().iter().all(|&v| v == 0.25));
        assert!(avgpool_to(&x, 48, 48).is_err());
        let z = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(avgpool_to(&z, 1, 1).unwrap().item(), 3.0);
    }

    #[test]
    fn blend_limits() {
        let a = t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]);
        let b = t(Shape::new(1, 2, 1, 1), &[10.0, 20.0]);
        let one = t(Shape::new(1, 1, 1, 1), &[1.0]);
        let zero = t(Shape::new(1, 1, 1, 1), &[0.0]);
        assert_eq!(blend(&one, &a, &b).unwrap(), a);
        assert_eq!(blend(&zero, &a, &b).unwrap(), b);
        assert!(blend(&a, &a, &b).is_err());
    }
}
