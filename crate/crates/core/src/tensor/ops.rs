//! Differentiable kernels: convolution, activations, resampling,
//! elementwise arithmetic, reductions, and the Gram matrix.

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::str::FromStr;

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
pub enum ActKind {
    Elu,
    Relu,
    /// Negative-side slope, conventionally 0.2 in the discriminator.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Identity,
}

impl FromStr for ActKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ActKind> {
        match s {
            "elu" => Ok(ActKind::Elu),
            "relu" => Ok(ActKind::Relu),
            "leaky_relu" => Ok(ActKind::LeakyRelu(0.2)),
            "sigmoid" => Ok(ActKind::Sigmoid),
            "tanh" => Ok(ActKind::Tanh),
            "identity" => Ok(ActKind::Identity),
            other => Err(Error::InvalidArg {
                op: "activation",
                detail: format!("unknown kind {other:?}"),
            }),
        }
    }
}

impl ActKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActKind::Elu => "elu",
            ActKind::Relu => "relu",
            ActKind::LeakyRelu(_) => "leaky_relu",
            ActKind::Sigmoid => "sigmoid",
            ActKind::Tanh => "tanh",
            ActKind::Identity => "identity",
        }
    }

    #[inline]
    fn eval(&self, x: f64) -> f64 {
        match *self {
            ActKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            ActKind::Relu => x.max(0.0),
            ActKind::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            ActKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActKind::Tanh => x.tanh(),
            ActKind::Identity => x,
        }
    }

    #[inline]
    fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            ActKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            ActKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActKind::Identity => 1.0,
        }
    }
}

/// Apply `kind` elementwise.
pub fn activation(kind: ActKind, input: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = input.data().iter().map(|&x| kind.eval(x)).collect();
    Tensor::from_op(
        kind.name(),
        input.shape(),
        data,
        vec![input.clone()],
        Box::new(move |grad_out, parents| {
            let x = &parents[0];
            let xs = x.data();
            let delta: Vec<f64> = grad_out
                .iter()
                .zip(xs.iter())
                .map(|(&g, &xi)| g * kind.derivative(xi))
                .collect();
            drop(xs);
            x.accumulate_grad(&delta);
        }),
    )
}

fn binary_shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_shape_check("add", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Tensor::from_op(
        "add",
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad_out, parents| {
            parents[0].accumulate_grad(grad_out);
            parents[1].accumulate_grad(grad_out);
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_shape_check("sub", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    Tensor::from_op(
        "sub",
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad_out, parents| {
            parents[0].accumulate_grad(grad_out);
            let neg: Vec<f64> = grad_out.iter().map(|g| -g).collect();
            parents[1].accumulate_grad(&neg);
        }),
    )
}

/// Hadamard product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_shape_check("mul", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Tensor::from_op(
        "mul",
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad_out, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                let bd = b.data();
                let delta: Vec<f64> = grad_out.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
                drop(bd);
                a.accumulate_grad(&delta);
            }
            if b.requires_grad() {
                let ad = a.data();
                let delta: Vec<f64> = grad_out.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
                drop(ad);
                b.accumulate_grad(&delta);
            }
        }),
    )
}

/// `scale * x + offset`, elementwise.
pub fn affine(x: &Tensor, scale: f64, offset: f64) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| scale * v + offset).collect();
    Tensor::from_op(
        "affine",
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(move |grad_out, parents| {
            let delta: Vec<f64> = grad_out.iter().map(|&g| g * scale).collect();
            parents[0].accumulate_grad(&delta);
        }),
    )
}

pub fn abs(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
    Tensor::from_op(
        "abs",
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|grad_out, parents| {
            let x = &parents[0];
            let xs = x.data();
            let delta: Vec<f64> = grad_out
                .iter()
                .zip(xs.iter())
                .map(|(&g, &v)| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            drop(xs);
            x.accumulate_grad(&delta);
        }),
    )
}

/// Full reduction to a 1×1×1×1 scalar.
pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    let len = x.len();
    Tensor::from_op(
        "sum_all",
        Shape::scalar(),
        vec![s],
        vec![x.clone()],
        Box::new(move |grad_out, parents| {
            let delta = vec![grad_out[0]; len];
            parents[0].accumulate_grad(&delta);
        }),
    )
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::InvalidArg {
            op: "mean_all",
            detail: "empty tensor".to_string(),
        });
    }
    let len = x.len();
    let s: f64 = x.data().iter().sum::<f64>() / len as f64;
    Tensor::from_op(
        "mean_all",
        Shape::scalar(),
        vec![s],
        vec![x.clone()],
        Box::new(move |grad_out, parents| {
            let delta = vec![grad_out[0] / len as f64; len];
            parents[0].accumulate_grad(&delta);
        }),
    )
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Shape {
            op: "concat_channels",
            detail: format!("{} vs {}", sa, sb),
        });
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = vec![0.0; out_shape.len()];
    {
        let ad = a.data();
        let bd = b.data();
        for n in 0..sa.n {
            let dst = &mut data[n * out_shape.c * plane..];
            dst[..sa.c * plane].copy_from_slice(&ad[n * sa.c * plane..(n + 1) * sa.c * plane]);
            dst[sa.c * plane..(sa.c + sb.c) * plane]
                .copy_from_slice(&bd[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
    }
    let (ca, cb) = (sa.c, sb.c);
    Tensor::from_op(
        "concat_channels",
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |grad_out, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let n_count = a.shape().n;
            let ctot = ca + cb;
            if a.requires_grad() {
                let mut da = vec![0.0; a.len()];
                for n in 0..n_count {
                    da[n * ca * plane..(n + 1) * ca * plane]
                        .copy_from_slice(&grad_out[n * ctot * plane..n * ctot * plane + ca * plane]);
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; b.len()];
                for n in 0..n_count {
                    db[n * cb * plane..(n + 1) * cb * plane].copy_from_slice(
                        &grad_out[n * ctot * plane + ca * plane..(n + 1) * ctot * plane],
                    );
                }
                b.accumulate_grad(&db);
            }
        }),
    )
}

/// Select sample `i` from the batch axis as a 1×c×h×w tensor.
pub fn slice_sample(x: &Tensor, i: usize) -> Result<Tensor> {
    let s = x.shape();
    if i >= s.n {
        return Err(Error::InvalidArg {
            op: "slice_sample",
            detail: format!("index {i} out of batch {}", s.n),
        });
    }
    let per = s.c * s.h * s.w;
    let data = x.data()[i * per..(i + 1) * per].to_vec();
    Tensor::from_op(
        "slice_sample",
        Shape::new(1, s.c, s.h, s.w),
        data,
        vec![x.clone()],
        Box::new(move |grad_out, parents| {
            let p = &parents[0];
            let mut delta = vec![0.0; p.len()];
            delta[i * per..(i + 1) * per].copy_from_slice(grad_out);
            p.accumulate_grad(&delta);
        }),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ResampleMode {
    NearestUp2,
    AvgDown2,
}

pub fn resample(input: &Tensor, mode: ResampleMode) -> Result<Tensor> {
    match mode {
        ResampleMode::NearestUp2 => nearest_up2(input),
        ResampleMode::AvgDown2 => avg_down2(input),
    }
}

/// Nearest-neighbor 2× spatial upsample.
pub fn nearest_up2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut data = vec![0.0; out_shape.len()];
    {
        let xs = input.data();
        for nc in 0..s.n * s.c {
            let src = &xs[nc * s.h * s.w..];
            let dst = &mut data[nc * out_shape.h * out_shape.w..];
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = src[y * s.w + x];
                    let base = (2 * y) * out_shape.w + 2 * x;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + out_shape.w] = v;
                    dst[base + out_shape.w + 1] = v;
                }
            }
        }
    }
    Tensor::from_op(
        "nearest_up2",
        out_shape,
        data,
        vec![input.clone()],
        Box::new(move |grad_out, parents| {
            let p = &parents[0];
            let s = p.shape();
            let ow = s.w * 2;
            let mut delta = vec![0.0; p.len()];
            for nc in 0..s.n * s.c {
                let g = &grad_out[nc * s.h * 2 * ow..];
                let d = &mut delta[nc * s.h * s.w..];
                for y in 0..s.h {
                    for x in 0..s.w {
                        let base = (2 * y) * ow + 2 * x;
                        d[y * s.w + x] = g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                    }
                }
            }
            p.accumulate_grad(&delta);
        }),
    )
}

/// 2×2 average-pool downsample; spatial extents must be even.
pub fn avg_down2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidArg {
            op: "avg_down2",
            detail: format!("odd spatial extents {}x{}", s.h, s.w),
        });
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut data = vec![0.0; out_shape.len()];
    {
        let xs = input.data();
        for nc in 0..s.n * s.c {
            let src = &xs[nc * s.h * s.w..];
            let dst = &mut data[nc * out_shape.h * out_shape.w..];
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let base = (2 * y) * s.w + 2 * x;
                    dst[y * out_shape.w + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + s.w] + src[base + s.w + 1]);
                }
            }
        }
    }
    Tensor::from_op(
        "avg_down2",
        out_shape,
        data,
        vec![input.clone()],
        Box::new(move |grad_out, parents| {
            let p = &parents[0];
            let s = p.shape();
            let (oh, ow) = (s.h / 2, s.w / 2);
            let mut delta = vec![0.0; p.len()];
            for nc in 0..s.n * s.c {
                let g = &grad_out[nc * oh * ow..];
                let d = &mut delta[nc * s.h * s.w..];
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = 0.25 * g[y * ow + x];
                        let base = (2 * y) * s.w + 2 * x;
                        d[base] = gv;
                        d[base + 1] = gv;
                        d[base + s.w] = gv;
                        d[base + s.w + 1] = gv;
                    }
                }
            }
            p.accumulate_grad(&delta);
        }),
    )
}

#[derive(Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: i64,
    dilation: usize,
}

impl ConvGeom {
    /// Valid output range along one axis for a given kernel offset, so the
    /// hot loops run branch-free over in-bounds pixels only.
    #[inline]
    fn out_range(k: usize, dilation: usize, stride: usize, padding: i64, in_len: usize, out_len: usize) -> (usize, usize) {
        // in coordinate: o*stride + k*dilation - padding ∈ [0, in_len)
        let off = k as i64 * dilation as i64 - padding;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(stride)
        };
        let hi_in = in_len as i64 - 1 - off;
        if hi_in < 0 {
            return (1, 0);
        }
        let hi = ((hi_in as usize) / stride).min(out_len.saturating_sub(1));
        (lo, hi)
    }
}

/// 2-D convolution with zero padding.
///
/// `weight` is (out_c, in_c, kh, kw) with odd kh, kw; `bias` is a per-output-
/// channel vector shaped (1, out_c, 1, 1). Output extents follow the usual
/// size formula. Gradients w.r.t. input, weight, and bias are all defined.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if stride == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            detail: "non-positive stride".to_string(),
        });
    }
    if dilation == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            detail: "non-positive dilation".to_string(),
        });
    }
    if ws.h % 2 == 0 || ws.w % 2 == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            detail: format!("kernel extents must be odd, got {}x{}", ws.h, ws.w),
        });
    }
    if ws.c != is.c {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input has {} channels, weight expects {}", is.c, ws.c),
        });
    }
    let bs = bias.shape();
    if bs != Shape::new(1, ws.n, 1, 1) {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("bias must be 1x{}x1x1, got {}", ws.n, bs),
        });
    }
    let span_h = dilation * (ws.h - 1) + 1;
    let span_w = dilation * (ws.w - 1) + 1;
    let num_h = is.h as i64 + 2 * padding as i64 - span_h as i64;
    let num_w = is.w as i64 + 2 * padding as i64 - span_w as i64;
    if num_h < 0 || num_w < 0 {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!(
                "kernel span {}x{} exceeds padded input {}x{}",
                span_h,
                span_w,
                is.h + 2 * padding,
                is.w + 2 * padding
            ),
        });
    }
    let geom = ConvGeom {
        in_c: is.c,
        in_h: is.h,
        in_w: is.w,
        out_c: ws.n,
        out_h: num_h as usize / stride + 1,
        out_w: num_w as usize / stride + 1,
        kh: ws.h,
        kw: ws.w,
        stride,
        padding: padding as i64,
        dilation,
    };
    let out_shape = Shape::new(is.n, geom.out_c, geom.out_h, geom.out_w);
    let data = conv_forward(&input.data(), &weight.data(), &bias.data(), is.n, geom);

    Tensor::from_op(
        "conv2d",
        out_shape,
        data,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |grad_out, parents| {
            let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
            let batch = input.shape().n;
            if bias.requires_grad() {
                let mut db = vec![0.0; geom.out_c];
                let plane = geom.out_h * geom.out_w;
                for n in 0..batch {
                    for oc in 0..geom.out_c {
                        let base = (n * geom.out_c + oc) * plane;
                        db[oc] += grad_out[base..base + plane].iter().sum::<f64>();
                    }
                }
                bias.accumulate_grad(&db);
            }
            if weight.requires_grad() {
                let dw = conv_grad_weight(&input.data(), grad_out, batch, geom);
                weight.accumulate_grad(&dw);
            }
            if input.requires_grad() {
                let dx = conv_grad_input(&weight.data(), grad_out, batch, geom);
                input.accumulate_grad(&dx);
            }
        }),
    )
}

/// Below this element count the parallel split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 14;

fn for_each_chunk<F: Fn(usize, &mut [f64]) + Sync>(buf: &mut [f64], chunk: usize, work: usize, f: F) {
    if work >= PAR_THRESHOLD {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in buf.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let work = batch * g.out_c * out_plane * g.in_c * g.kh * g.kw;
    let mut out = vec![0.0; batch * g.out_c * out_plane];
    for_each_chunk(&mut out, out_plane, work, |slab, dst| {
        let n = slab / g.out_c;
        let oc = slab % g.out_c;
        dst.fill(bias[oc]);
        for ic in 0..g.in_c {
            let src = &input[(n * g.in_c + ic) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = ConvGeom::out_range(ky, g.dilation, g.stride, g.padding, g.in_h, g.out_h);
                if oy_lo > oy_hi {
                    continue;
                }
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) =
                        ConvGeom::out_range(kx, g.dilation, g.stride, g.padding, g.in_w, g.out_w);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    let wv = weight[((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_y = ky as i64 * g.dilation as i64 - g.padding;
                    let off_x = kx as i64 * g.dilation as i64 - g.padding;
                    for oy in oy_lo..=oy_hi {
                        let iy = (oy * g.stride) as i64 + off_y;
                        let in_row = &src[iy as usize * g.in_w..];
                        let out_row = &mut dst[oy * g.out_w..];
                        let mut ix = (ox_lo * g.stride) as i64 + off_x;
                        for ox in ox_lo..=ox_hi {
                            out_row[ox] += wv * in_row[ix as usize];
                            ix += g.stride as i64;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_weight(input: &[f64], grad_out: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let w_per_oc = g.in_c * g.kh * g.kw;
    let work = batch * g.out_c * g.out_h * g.out_w * w_per_oc;
    let mut dw = vec![0.0; g.out_c * w_per_oc];
    for_each_chunk(&mut dw, w_per_oc, work, |oc, dwc| {
        for n in 0..batch {
            let gslab = &grad_out[(n * g.out_c + oc) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for ic in 0..g.in_c {
                let src = &input[(n * g.in_c + ic) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) =
                        ConvGeom::out_range(ky, g.dilation, g.stride, g.padding, g.in_h, g.out_h);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) =
                            ConvGeom::out_range(kx, g.dilation, g.stride, g.padding, g.in_w, g.out_w);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let off_y = ky as i64 * g.dilation as i64 - g.padding;
                        let off_x = kx as i64 * g.dilation as i64 - g.padding;
                        let mut acc = 0.0;
                        for oy in oy_lo..=oy_hi {
                            let iy = (oy * g.stride) as i64 + off_y;
                            let in_row = &src[iy as usize * g.in_w..];
                            let g_row = &gslab[oy * g.out_w..];
                            let mut ix = (ox_lo * g.stride) as i64 + off_x;
                            for ox in ox_lo..=ox_hi {
                                acc += g_row[ox] * in_row[ix as usize];
                                ix += g.stride as i64;
                            }
                        }
                        dwc[(ic * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

fn conv_grad_input(weight: &[f64], grad_out: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let work = batch * g.out_c * g.out_h * g.out_w * g.in_c * g.kh * g.kw;
    let mut dx = vec![0.0; batch * g.in_c * in_plane];
    for_each_chunk(&mut dx, g.in_c * in_plane, work, |n, dslab| {
        for oc in 0..g.out_c {
            let gslab = &grad_out[(n * g.out_c + oc) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for ic in 0..g.in_c {
                let d = &mut dslab[ic * in_plane..(ic + 1) * in_plane];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) =
                        ConvGeom::out_range(ky, g.dilation, g.stride, g.padding, g.in_h, g.out_h);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) =
                            ConvGeom::out_range(kx, g.dilation, g.stride, g.padding, g.in_w, g.out_w);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wv = weight[((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let off_y = ky as i64 * g.dilation as i64 - g.padding;
                        let off_x = kx as i64 * g.dilation as i64 - g.padding;
                        for oy in oy_lo..=oy_hi {
                            let iy = (oy * g.stride) as i64 + off_y;
                            let d_row = &mut d[iy as usize * g.in_w..];
                            let g_row = &gslab[oy * g.out_w..];
                            let mut ix = (ox_lo * g.stride) as i64 + off_x;
                            for ox in ox_lo..=ox_hi {
                                d_row[ix as usize] += wv * g_row[ox];
                                ix += g.stride as i64;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Channel-correlation (Gram) matrix of a single-sample feature map,
/// normalized by channels × spatial positions. Output is 1×1×c×c.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.n != 1 {
        return Err(Error::InvalidArg {
            op: "gram",
            detail: format!("expects a single sample, got batch {}", s.n),
        });
    }
    let (c, k) = (s.c, s.h * s.w);
    if k == 0 || c == 0 {
        return Err(Error::InvalidArg {
            op: "gram",
            detail: "empty feature map".to_string(),
        });
    }
    let norm = (c * k) as f64;
    let mut data = vec![0.0; c * c];
    {
        let f = features.data();
        for i in 0..c {
            let fi = &f[i * k..(i + 1) * k];
            for j in i..c {
                let fj = &f[j * k..(j + 1) * k];
                let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
                data[i * c + j] = dot / norm;
                data[j * c + i] = dot / norm;
            }
        }
    }
    Tensor::from_op(
        "gram",
        Shape::new(1, 1, c, c),
        data,
        vec![features.clone()],
        Box::new(move |grad_out, parents| {
            let p = &parents[0];
            let f = p.data();
            let mut delta = vec![0.0; p.len()];
            // dG_ij/dF_ak = (δ_ia F_jk + δ_ja F_ik) / norm
            for a in 0..c {
                let d = &mut delta[a * k..(a + 1) * k];
                for j in 0..c {
                    let gsym = grad_out[a * c + j] + grad_out[j * c + a];
                    if gsym == 0.0 {
                        continue;
                    }
                    let fj = &f[j * k..(j + 1) * k];
                    for (dv, &fv) in d.iter_mut().zip(fj) {
                        *dv += gsym * fv / norm;
                    }
                }
            }
            drop(f);
            p.accumulate_grad(&delta);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop convolution, kept deliberately naive: the
    /// oracle the fast kernel is checked against.
    pub(crate) fn conv_oracle(
        input: &[f64],
        (n, ic, ih, iw): (usize, usize, usize, usize),
        weight: &[f64],
        (oc, kh, kw): (usize, usize, usize),
        bias: &[f64],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> (Vec<f64>, (usize, usize)) {
        let oh = (ih + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
        let ow = (iw + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
        let mut out = vec![0.0; n * oc * oh * ow];
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for i in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky * dilation) as i64 - padding as i64;
                                    let ix = (ox * stride + kx * dilation) as i64 - padding as i64;
                                    if iy < 0 || ix < 0 || iy >= ih as i64 || ix >= iw as i64 {
                                        continue;
                                    }
                                    acc += weight[((o * ic + i) * kh + ky) * kw + kx]
                                        * input[((b * ic + i) * ih + iy as usize) * iw + ix as usize];
                                }
                            }
                        }
                        out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, (oh, ow))
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, tracked: bool) -> Tensor {
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        if tracked {
            Tensor::param(shape, data).unwrap()
        } else {
            Tensor::constant(shape, data).unwrap()
        }
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let input = Tensor::constant(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::constant(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let b = Tensor::constant(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let out = conv2d(&input, &w, &b, 1, 0, 1).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_counts_neighbors() {
        // 3×3 ones against 3×3 ones with padding 1: center 9, edges 6, corners 4.
        let input = Tensor::constant(Shape::new(1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let w = Tensor::constant(Shape::new(1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let b = Tensor::constant(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let out = conv2d(&input, &w, &b, 1, 1, 1).unwrap();
        assert_eq!(out.to_vec(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), false);
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), false);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), false);
        let out = conv2d(&input, &w, &b, 2, 1, 1).unwrap();
        let (expect, (oh, ow)) = conv_oracle(
            &input.to_vec(),
            (1, 2, 4, 4),
            &w.to_vec(),
            (2, 3, 3),
            &b.to_vec(),
            2,
            1,
            1,
        );
        assert_eq!((out.shape().h, out.shape().w), (oh, ow));
        for (a, e) in out.to_vec().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_args() {
        let input = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let w_even = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(conv2d(&input, &w_even, &b, 1, 0, 1).is_err());
        assert!(conv2d(&input, &w, &b, 1, 0, 1).is_err()); // channel mismatch
        let w_ok = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(conv2d(&input, &w_ok, &b, 0, 0, 1).is_err()); // zero stride
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, Shape::new(1, 2, 5, 5), true);
        let w = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3), true);
        let b = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1), true);
        let params = [input.clone(), w.clone(), b.clone()];
        let err = finite_diff_check(
            || {
                let y = conv2d(&input, &w, &b, 2, 1, 1)?;
                mean_all(&mul(&y, &y)?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn dilated_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, Shape::new(1, 1, 6, 6), true);
        let w = rand_tensor(&mut rng, Shape::new(2, 1, 3, 3), true);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), true);
        let params = [input.clone(), w.clone(), b.clone()];
        let err = finite_diff_check(
            || {
                let y = conv2d(&input, &w, &b, 1, 2, 2)?;
                mean_all(&mul(&y, &y)?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn activation_values() {
        let x = Tensor::constant(Shape::new(1, 1, 1, 3), vec![0.0, -3.0, 3.0]).unwrap();
        let s = activation(ActKind::Sigmoid, &x).unwrap();
        assert_eq!(s.to_vec()[0], 0.5);
        let r = activation(ActKind::Relu, &x).unwrap();
        assert_eq!(r.to_vec(), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn unknown_activation_kind_rejected() {
        assert!("swish".parse::<ActKind>().is_err());
        assert_eq!("elu".parse::<ActKind>().unwrap(), ActKind::Elu);
    }

    #[test]
    fn elu_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Stay away from the origin where elu'' jumps.
        let data: Vec<f64> = (0..16)
            .map(|_| {
                let m = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = Tensor::param(Shape::new(1, 1, 4, 4), data).unwrap();
        for kind in [
            ActKind::Elu,
            ActKind::LeakyRelu(0.2),
            ActKind::Sigmoid,
            ActKind::Tanh,
            ActKind::Identity,
            ActKind::Relu,
        ] {
            let err = finite_diff_check(
                || mean_all(&mul(&activation(kind, &x)?, &x)?),
                &[x.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{} err {err}", kind.name());
        }
    }

    #[test]
    fn resample_examples() {
        let one = Tensor::constant(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap();
        let up = nearest_up2(&one).unwrap();
        assert_eq!(up.to_vec(), vec![5.0; 4]);

        let four = Tensor::constant(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let down = avg_down2(&four).unwrap();
        assert_eq!(down.to_vec(), vec![4.0]);

        let odd = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(avg_down2(&odd).is_err());
    }

    #[test]
    fn up_then_down_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 5, 4), false);
        let rt = avg_down2(&nearest_up2(&x).unwrap()).unwrap();
        for (a, b) in x.to_vec().iter().zip(rt.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), true);
        for mode in [ResampleMode::NearestUp2, ResampleMode::AvgDown2] {
            let err = finite_diff_check(
                || {
                    let y = resample(&x, mode)?;
                    mean_all(&mul(&y, &y)?)
                },
                &[x.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn concat_and_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), true);
        let b = rand_tensor(&mut rng, Shape::new(2, 1, 3, 3), true);
        let err = finite_diff_check(
            || {
                let y = concat_channels(&a, &b)?;
                let s0 = slice_sample(&y, 0)?;
                let s1 = slice_sample(&y, 1)?;
                mean_all(&mul(&add(&s0, &s1)?, &s0)?)
            },
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn gram_example_and_symmetry() {
        // 2 channels over 4 positions, ch1 ≡ 1, ch2 ≡ 2:
        // unnormalized [[4,8],[8,16]]; ÷ (2·4) → [[0.5,1],[1,2]].
        let f = Tensor::constant(
            Shape::new(1, 2, 2, 2),
            vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0],
        )
        .unwrap();
        let g = gram(&f).unwrap();
        assert_eq!(g.to_vec(), vec![0.5, 1.0, 1.0, 2.0]);

        let zero = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(gram(&zero).unwrap().to_vec().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), false);
        let g = gram(&f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.get(0, 0, i, j), g.get(0, 0, j, i));
            }
        }

        let batched = Tensor::zeros(Shape::new(2, 3, 2, 2));
        assert!(gram(&batched).is_err());
    }

    #[test]
    fn gram_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = rand_tensor(&mut rng, Shape::new(1, 3, 3, 3), true);
        let err = finite_diff_check(
            || {
                let g = gram(&f)?;
                mean_all(&mul(&g, &g)?)
            },
            &[f.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn conv_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), false);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 6, 6), false);
        let y = rand_tensor(&mut rng, Shape::new(1, 2, 6, 6), false);
        let (alpha, beta) = (0.7, -1.3);
        let lhs = conv2d(
            &add(&affine(&x, alpha, 0.0).unwrap(), &affine(&y, beta, 0.0).unwrap()).unwrap(),
            &w,
            &b,
            1,
            1,
            1,
        )
        .unwrap();
        let rhs = add(
            &affine(&conv2d(&x, &w, &b, 1, 1, 1).unwrap(), alpha, 0.0).unwrap(),
            &affine(&conv2d(&y, &w, &b, 1, 1, 1).unwrap(), beta, 0.0).unwrap(),
        )
        .unwrap();
        for (a, e) in lhs.to_vec().iter().zip(rhs.to_vec()) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}
