//! Forward definitions and vector-Jacobian products for every recorded op.

use super::conv::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Floor applied to `log` inputs so that `0 · log 0` evaluates to 0.
pub const LOG_FLOOR: f64 = 1e-12;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    ScalarMul(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        geom: ConvGeom,
    },
    Relu(Tensor),
    MaxPool2d {
        input: Tensor,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Tensor,
        kernel: usize,
    },
    AdaptiveAvgPool2d {
        input: Tensor,
        out_h: usize,
        out_w: usize,
    },
    UpsampleNearest {
        input: Tensor,
        factor: usize,
    },
    Softmax {
        input: Tensor,
        axis: usize,
    },
    Log(Tensor),
    Exp(Tensor),
    /// `map` sends each input index to its output index; `None` means every
    /// axis was reduced.
    Sum {
        input: Tensor,
        map: Option<Vec<usize>>,
    },
    Mean {
        input: Tensor,
        map: Option<Vec<usize>>,
        count: usize,
    },
    L2Normalize {
        input: Tensor,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Mse(Tensor, Tensor),
    Square(Tensor),
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    Narrow {
        input: Tensor,
        axis: usize,
        start: usize,
    },
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            ndim: shape.len(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Maps each input flat index to its output flat index when `axes` are
/// reduced away. Returns (output shape, map).
fn reduction_map(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        check_axis(op, shape, a)?;
        if reduced[a] {
            return Err(Error::InvalidAxis {
                op,
                axis: a,
                ndim: shape.len(),
            });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    // Stride of each kept input axis inside the output.
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        if !reduced[i] {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    let n = numel(shape);
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        *slot = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![a, b]
            }
            Op::ScalarMul(a, _) | Op::AddScalar(a) | Op::Relu(a) | Op::Log(a) | Op::Exp(a) | Op::Square(a) => {
                vec![a]
            }
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::MaxPool2d { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::AdaptiveAvgPool2d { input, .. }
            | Op::UpsampleNearest { input, .. }
            | Op::Softmax { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::Narrow { input, .. } => vec![input],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
        }
    }

    /// Vector-Jacobian product: given `g = d loss / d out`, returns
    /// `d loss / d input` for each input that requires gradients.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut grads = Vec::with_capacity(2);
        match self {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    grads.push((a.clone(), g.to_vec()));
                }
                if b.requires_grad() {
                    grads.push((b.clone(), g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    grads.push((a.clone(), g.to_vec()));
                }
                if b.requires_grad() {
                    grads.push((b.clone(), g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    grads.push((a.clone(), g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect()));
                }
                if b.requires_grad() {
                    let ad = a.data();
                    grads.push((b.clone(), g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let bd = b.data();
                if a.requires_grad() {
                    grads.push((a.clone(), g.iter().zip(bd.iter()).map(|(g, y)| g / y).collect()));
                }
                if b.requires_grad() {
                    let od = out.data();
                    let gb = g
                        .iter()
                        .zip(od.iter())
                        .zip(bd.iter())
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    grads.push((b.clone(), gb));
                }
            }
            Op::ScalarMul(a, s) => grads.push((a.clone(), g.iter().map(|v| v * s).collect())),
            Op::AddScalar(a) => grads.push((a.clone(), g.to_vec())),
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = conv::dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                    grads.push((a.clone(), ga));
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *dst += av * gv;
                            }
                        }
                    }
                    grads.push((b.clone(), gb));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if input.requires_grad() {
                    let wd = weight.data();
                    grads.push((input.clone(), conv::backward_input(g, &wd, geom)));
                }
                if weight.requires_grad() {
                    let xd = input.data();
                    let xp = conv::pad_input(&xd, geom);
                    grads.push((weight.clone(), conv::backward_weight(g, &xp, geom)));
                }
                if let Some(b) = bias {
                    if b.requires_grad() {
                        grads.push((b.clone(), conv::backward_bias(g, geom)));
                    }
                }
            }
            Op::Relu(a) => {
                let ad = a.data();
                let ga = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                grads.push((a.clone(), ga));
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; input.numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gi[src] += gv;
                }
                grads.push((input.clone(), gi));
            }
            Op::AvgPool2d { input, kernel } => {
                let (n, c, h, w) = nchw("avg_pool2d", input).expect("shape checked in forward");
                let (ho, wo) = (h / kernel, w / kernel);
                let scale = 1.0 / (kernel * kernel) as f64;
                let mut gi = vec![0.0; input.numel()];
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[plane * ho * wo + oy * wo + ox] * scale;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    gi[plane * h * w + (oy * kernel + ky) * w + ox * kernel + kx] += gv;
                                }
                            }
                        }
                    }
                }
                grads.push((input.clone(), gi));
            }
            Op::AdaptiveAvgPool2d { input, out_h, out_w } => {
                let (n, c, h, w) = nchw("adaptive_avg_pool2d", input).expect("shape checked in forward");
                let mut gi = vec![0.0; input.numel()];
                for plane in 0..n * c {
                    for oy in 0..*out_h {
                        let (y0, y1) = adaptive_range(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = adaptive_range(ox, w, *out_w);
                            let gv = g[(plane * out_h + oy) * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for v in &mut gi[plane * h * w + y * w + x0..plane * h * w + y * w + x1] {
                                    *v += gv;
                                }
                            }
                        }
                    }
                }
                grads.push((input.clone(), gi));
            }
            Op::UpsampleNearest { input, factor } => {
                let (n, c, h, w) = nchw("upsample_nearest", input).expect("shape checked in forward");
                let (ho, wo) = (h * factor, w * factor);
                let mut gi = vec![0.0; input.numel()];
                for plane in 0..n * c {
                    for oy in 0..ho {
                        let src_row = plane * h * w + (oy / factor) * w;
                        let g_row = &g[plane * ho * wo + oy * wo..][..wo];
                        for (ox, gv) in g_row.iter().enumerate() {
                            gi[src_row + ox / factor] += gv;
                        }
                    }
                }
                grads.push((input.clone(), gi));
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                let y = out.data();
                let mut gi = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let s: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            gi[idx] = y[idx] * (g[idx] - s);
                        }
                    }
                }
                grads.push((input.clone(), gi));
            }
            Op::Log(a) => {
                let ad = a.data();
                let ga = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x >= LOG_FLOOR { g / x } else { 0.0 })
                    .collect();
                grads.push((a.clone(), ga));
            }
            Op::Exp(a) => {
                let od = out.data();
                grads.push((a.clone(), g.iter().zip(od.iter()).map(|(g, y)| g * y).collect()));
            }
            Op::Sum { input, map } => {
                let gi = match map {
                    Some(map) => map.iter().map(|&o| g[o]).collect(),
                    None => vec![g[0]; input.numel()],
                };
                grads.push((input.clone(), gi));
            }
            Op::Mean { input, map, count } => {
                let scale = 1.0 / *count as f64;
                let gi = match map {
                    Some(map) => map.iter().map(|&o| g[o] * scale).collect(),
                    None => vec![g[0] * scale; input.numel()],
                };
                grads.push((input.clone(), gi));
            }
            Op::L2Normalize {
                input,
                axis,
                eps,
                norms,
            } => {
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                let y = out.data();
                let mut gi = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let gy: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                            for k in 0..len {
                                let idx = base + k * inner;
                                gi[idx] = (g[idx] - y[idx] * gy) / norm;
                            }
                        } else {
                            for k in 0..len {
                                let idx = base + k * inner;
                                gi[idx] = g[idx] / eps;
                            }
                        }
                    }
                }
                grads.push((input.clone(), gi));
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let scale = 2.0 * g[0] / a.numel() as f64;
                let diff: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| (x - y) * scale).collect();
                if b.requires_grad() {
                    grads.push((b.clone(), diff.iter().map(|v| -v).collect()));
                }
                if a.requires_grad() {
                    grads.push((a.clone(), diff));
                }
            }
            Op::Square(a) => {
                let ad = a.data();
                grads.push((a.clone(), g.iter().zip(ad.iter()).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    if t.requires_grad() {
                        let mut gi = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        grads.push((t.clone(), gi));
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                let chunk = out.shape()[*axis] * inner;
                let mut gi = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gi[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                }
                grads.push((input.clone(), gi));
            }
        }
        grads
    }
}

fn adaptive_range(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(op, self, other)?;
        let (a, b) = (self.data(), other.data());
        Ok(a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|x| f(*x)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "div", |x, y| x / y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Div(self.clone(), other.clone())))
    }

    pub fn scalar_mul(&self, s: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|x| x * s), Op::ScalarMul(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|x| x + s), Op::AddScalar(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(Error::InvalidShape {
                    op: "matmul",
                    lhs: self.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                })
            }
        };
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for (dst, bv) in out[i * n..(i + 1) * n].iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *dst += av * bv;
                }
            }
        }
        drop((a, b));
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone())))
    }

    /// 2-D convolution of an NCHW input with an `[c_out, c_in, kh, kw]`
    /// kernel and optional per-channel bias, zero padding on all sides.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let shape_err = || Error::InvalidShape {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (batch, c_in, h, w) = nchw("conv2d", self)?;
        let (c_out, wc_in, kh, kw) = match *weight.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err()),
        };
        if wc_in != c_in || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err());
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = {
            let xd = self.data();
            let wd = weight.data();
            let bd = bias.map(|b| b.data());
            let xp = conv::pad_input(&xd, &geom);
            conv::forward(&xp, &wd, bd.as_deref().map(|v| v.as_slice()), &geom)
        };
        Ok(Tensor::from_op(
            vec![batch, c_out, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|x| x.max(0.0)), Op::Relu(self.clone()))
    }

    /// Max pooling with a square window and stride equal to the window.
    pub fn max_pool2d(&self, kernel: usize) -> Result<Tensor> {
        let (n, c, h, w) = nchw("max_pool2d", self)?;
        if kernel == 0 || kernel > h || kernel > w {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                lhs: self.shape().to_vec(),
                rhs: vec![kernel, kernel],
            });
        }
        let (ho, wo) = (h / kernel, w / kernel);
        let x = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = plane * h * w + (oy * kernel + ky) * w + ox * kernel + kx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            out,
            Op::MaxPool2d {
                input: self.clone(),
                argmax,
            },
        ))
    }

    pub fn avg_pool2d(&self, kernel: usize) -> Result<Tensor> {
        let (n, c, h, w) = nchw("avg_pool2d", self)?;
        if kernel == 0 || kernel > h || kernel > w {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                lhs: self.shape().to_vec(),
                rhs: vec![kernel, kernel],
            });
        }
        let (ho, wo) = (h / kernel, w / kernel);
        let x = self.data();
        let scale = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s += x[plane * h * w + (oy * kernel + ky) * w + ox * kernel + kx];
                        }
                    }
                    out[plane * ho * wo + oy * wo + ox] = s * scale;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            out,
            Op::AvgPool2d {
                input: self.clone(),
                kernel,
            },
        ))
    }

    /// Average pooling to a fixed `out_size × out_size` grid; window `i`
    /// spans `[floor(i·H/out), ceil((i+1)·H/out))`.
    pub fn adaptive_avg_pool2d(&self, out_size: usize) -> Result<Tensor> {
        let (n, c, h, w) = nchw("adaptive_avg_pool2d", self)?;
        if out_size == 0 || out_size > h || out_size > w {
            return Err(Error::InvalidShape {
                op: "adaptive_avg_pool2d",
                lhs: self.shape().to_vec(),
                rhs: vec![out_size, out_size],
            });
        }
        let x = self.data();
        let mut out = vec![0.0; n * c * out_size * out_size];
        for plane in 0..n * c {
            for oy in 0..out_size {
                let (y0, y1) = adaptive_range(oy, h, out_size);
                for ox in 0..out_size {
                    let (x0, x1) = adaptive_range(ox, w, out_size);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += x[plane * h * w + y * w + x0..plane * h * w + y * w + x1].iter().sum::<f64>();
                    }
                    out[(plane * out_size + oy) * out_size + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c, out_size, out_size],
            out,
            Op::AdaptiveAvgPool2d {
                input: self.clone(),
                out_h: out_size,
                out_w: out_size,
            },
        ))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = nchw("upsample_nearest", self)?;
        if factor == 0 {
            return Err(Error::InvalidShape {
                op: "upsample_nearest",
                lhs: self.shape().to_vec(),
                rhs: vec![factor],
            });
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                let src = &x[plane * h * w + (oy / factor) * w..][..w];
                let dst = &mut out[plane * ho * wo + oy * wo..][..wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / factor];
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            out,
            Op::UpsampleNearest {
                input: self.clone(),
                factor,
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let m = (0..len).map(|k| x[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= s;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|x| x.max(LOG_FLOOR).ln()), Op::Log(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(f64::exp), Op::Exp(self.clone()))
    }

    /// Sums over `axes`, dropping them from the shape.
    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        let (out_shape, map) = reduction_map("sum", self.shape(), axes)?;
        let mut out = vec![0.0; numel(&out_shape)];
        for (v, &o) in self.data().iter().zip(&map) {
            out[o] += v;
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Sum {
                input: self.clone(),
                map: Some(map),
            },
        ))
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        let (out_shape, map) = reduction_map("mean", self.shape(), axes)?;
        let count = axes.iter().map(|&a| self.shape()[a]).product::<usize>().max(1);
        let mut out = vec![0.0; numel(&out_shape)];
        for (v, &o) in self.data().iter().zip(&map) {
            out[o] += v;
        }
        let scale = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Mean {
                input: self.clone(),
                map: Some(map),
                count,
            },
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(
            Vec::new(),
            vec![total],
            Op::Sum {
                input: self.clone(),
                map: None,
            },
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let count = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            Vec::new(),
            vec![total / count as f64],
            Op::Mean {
                input: self.clone(),
                map: None,
                count,
            },
        )
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        check_axis("l2_normalize", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = (0..len).map(|k| x[base + k * inner].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(eps);
                for k in 0..len {
                    out[base + k * inner] = x[base + k * inner] / denom;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::L2Normalize {
                input: self.clone(),
                axis,
                eps,
                norms,
            },
        ))
    }

    /// Mean squared error between two same-shape tensors; scalar result.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        let sq = self.zip_with(other, "mse", |x, y| (x - y) * (x - y))?;
        let value = sq.iter().sum::<f64>() / sq.len() as f64;
        Ok(Tensor::from_op(Vec::new(), vec![value], Op::Mse(self.clone(), other.clone())))
    }

    pub fn square(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|x| x * x), Op::Square(self.clone()))
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for t in &tensors[1..] {
            let compatible = t.ndim() == first.ndim()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::InvalidShape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in tensors {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Concat {
                inputs: tensors.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        if start + len > self.shape()[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = o * full * inner + start * inner;
            out.extend_from_slice(&x[src..src + len * inner]);
        }
        drop(x);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }
}
