//! Forward and backward kernels for the differentiable operations.
//!
//! Each operation comes as a pure forward function plus the matching
//! vector-Jacobian product. [`Graph`](super::Graph) strings them together;
//! they are also usable directly on tensors.

use rand::Rng;

use super::{Element, Tensor};
use crate::error::{domain_err, shape_err, Result};
use crate::par;

/// Spatial padding rule for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Output extent is `ceil(in / stride)`. Any odd padding goes on the
    /// bottom/right edge, so a stride-1 4×4 kernel pads 1 above and 2 below.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub filters: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: usize, stride: usize, filters: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            filters,
            padding: Padding::Same,
        }
    }

    pub fn valid(kernel: usize, stride: usize, filters: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            filters,
            padding: Padding::Valid,
        }
    }

    fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return domain_err("stride must be positive");
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return domain_err("kernel extent must be positive");
        }
        Ok(())
    }

    /// Output extent and leading padding of a forward convolution along one axis.
    fn forward_axis(&self, input: usize, k: usize) -> Result<(usize, usize)> {
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(s);
                let total = ((out - 1) * s + k).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if input < k {
                    return shape_err(format!("input extent {} smaller than kernel {}", input, k));
                }
                Ok(((input - k) / s + 1, 0))
            }
        }
    }

    /// Output extent and leading padding of a transposed convolution: the
    /// padding is that of the forward convolution mapping the output back.
    fn transposed_axis(&self, input: usize, k: usize) -> (usize, usize) {
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let out = input * s;
                let total = ((input - 1) * s + k).saturating_sub(out);
                (out, total / 2)
            }
            Padding::Valid => ((input - 1) * s + k, 0),
        }
    }
}

/// Geometry shared by im2col and col2im. The "image" side is the padded
/// spatial map; the "column" side is the strided grid of kernel placements.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    img_h: usize,
    img_w: usize,
    col_h: usize,
    col_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.col_h * self.col_w
    }

    fn is_identity(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.pad_top == 0
            && self.pad_left == 0
            && self.img_h == self.col_h
            && self.img_w == self.col_w
    }

    /// Image coordinate read by kernel tap `i` at column position `o`.
    #[inline]
    fn src(&self, o: usize, i: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + i) as isize - pad as isize;
        if p >= 0 && (p as usize) < extent {
            Some(p as usize)
        } else {
            None
        }
    }
}

/// Rows ordered channel-major, then kernel row, then kernel column.
fn im2col<T: Element>(img: &[T], g: &Geometry, out: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * ncol..(row + 1) * ncol];
                for oy in 0..g.col_h {
                    let line = &mut dst[oy * g.col_w..(oy + 1) * g.col_w];
                    match g.src(oy, i, g.pad_top, g.img_h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(y) => {
                            let src = &plane[y * g.img_w..(y + 1) * g.img_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, j, g.pad_left, g.img_w) {
                                    Some(x) => src[x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image (adjoint of [`im2col`]).
fn col2im<T: Element>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.col_h {
                    let Some(y) = g.src(oy, i, g.pad_top, g.img_h) else {
                        continue;
                    };
                    let dst = &mut plane[y * g.img_w..(y + 1) * g.img_w];
                    for ox in 0..g.col_w {
                        if let Some(x) = g.src(ox, j, g.pad_left, g.img_w) {
                            dst[x] = dst[x] + src[oy * g.col_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, filters: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != filters {
            return shape_err(format!("bias has {} entries, expected {}", b.len(), filters));
        }
    }
    Ok(())
}

fn check_input<T: Element>(input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = input.nchw()?;
    if input.is_empty() {
        return domain_err(format!("zero-size input {:?}", input.dims()));
    }
    Ok(dims)
}

fn conv_geometry<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, Geometry)> {
    spec.check()?;
    let (n, c, h, w) = check_input(input)?;
    let kd = kernel.dims();
    if kd.len() != 4 || kd[1] != c || kd[2] != spec.kernel.0 || kd[3] != spec.kernel.1 {
        return shape_err(format!(
            "kernel {:?} incompatible with input channels {} and spec {:?}",
            kd, c, spec.kernel
        ));
    }
    if kd[0] != spec.filters {
        return shape_err(format!(
            "kernel has {} filters, spec says {}",
            kd[0], spec.filters
        ));
    }
    let (oh, pt) = spec.forward_axis(h, kd[2])?;
    let (ow, pl) = spec.forward_axis(w, kd[3])?;
    Ok((
        n,
        Geometry {
            channels: c,
            img_h: h,
            img_w: w,
            col_h: oh,
            col_w: ow,
            kh: kd[2],
            kw: kd[3],
            stride: spec.stride,
            pad_top: pt,
            pad_left: pl,
        },
    ))
}

fn transposed_geometry<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, Geometry)> {
    spec.check()?;
    let (n, c, h, w) = check_input(input)?;
    let kd = kernel.dims();
    if kd.len() != 4 || kd[0] != c || kd[2] != spec.kernel.0 || kd[3] != spec.kernel.1 {
        return shape_err(format!(
            "transposed kernel {:?} incompatible with input channels {} and spec {:?}",
            kd, c, spec.kernel
        ));
    }
    if kd[1] != spec.filters {
        return shape_err(format!(
            "kernel has {} filters, spec says {}",
            kd[1], spec.filters
        ));
    }
    let (oh, pt) = spec.transposed_axis(h, kd[2]);
    let (ow, pl) = spec.transposed_axis(w, kd[3]);
    Ok((
        n,
        Geometry {
            channels: kd[1],
            img_h: oh,
            img_w: ow,
            col_h: h,
            col_w: w,
            kh: kd[2],
            kw: kd[3],
            stride: spec.stride,
            pad_top: pt,
            pad_left: pl,
        },
    ))
}

/// Sums per-sample partial results in sample order.
fn reduce_in_order<T: Element>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

/// 2-D convolution (cross-correlation) of an N×C×H×W input with an
/// F×C×Kh×Kw kernel.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, g) = conv_geometry(input, kernel, spec)?;
    let f = spec.filters;
    check_bias(bias, f)?;
    let in_per = g.channels * g.img_h * g.img_w;
    let out_per = f * g.cols();
    let mut out = vec![T::zero(); n * out_per];
    par::for_each_chunk_mut(&mut out, out_per, |s, dst| {
        if let Some(b) = bias {
            for (ch, row) in dst.chunks_mut(g.cols()).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[ch]);
            }
        }
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let owned;
        let cols: &[T] = if g.is_identity() {
            x
        } else {
            let mut buf = vec![T::zero(); g.rows() * g.cols()];
            im2col(x, &g, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(
            f,
            g.rows(),
            g.cols(),
            T::one(),
            kernel.data(),
            (g.rows(), 1),
            cols,
            (g.cols(), 1),
            T::one(),
            dst,
            (g.cols(), 1),
        );
    });
    Tensor::new(&[n, f, g.col_h, g.col_w], out)
}

/// Gradients of [`conv2d`]. `need_input` skips the input gradient for
/// constant inputs.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, g) = conv_geometry(input, kernel, spec)?;
    let f = spec.filters;
    let in_per = g.channels * g.img_h * g.img_w;
    let out_per = f * g.cols();
    if grad_out.len() != n * out_per {
        return shape_err("conv2d gradient has wrong size");
    }
    let krows = g.rows();
    let parts = par::map_indices(n, |s| {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let dy = &grad_out.data()[s * out_per..(s + 1) * out_per];
        let owned;
        let cols: &[T] = if g.is_identity() {
            x
        } else {
            let mut buf = vec![T::zero(); krows * g.cols()];
            im2col(x, &g, &mut buf);
            owned = buf;
            &owned
        };
        let mut dk = vec![T::zero(); f * krows];
        T::gemm(
            f,
            g.cols(),
            krows,
            T::one(),
            dy,
            (g.cols(), 1),
            cols,
            (1, g.cols()),
            T::zero(),
            &mut dk,
            (krows, 1),
        );
        let db: Vec<T> = dy.chunks(g.cols()).map(|r| r.iter().copied().sum()).collect();
        let dx = need_input.then(|| {
            let mut dcols = vec![T::zero(); krows * g.cols()];
            T::gemm(
                krows,
                f,
                g.cols(),
                T::one(),
                kernel.data(),
                (1, krows),
                dy,
                (g.cols(), 1),
                T::zero(),
                &mut dcols,
                (g.cols(), 1),
            );
            if g.is_identity() {
                dcols
            } else {
                let mut img = vec![T::zero(); in_per];
                col2im(&dcols, &g, &mut img);
                img
            }
        });
        (dx, dk, db)
    });
    let mut dks = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    let mut dxs = Vec::with_capacity(if need_input { n * in_per } else { 0 });
    for (dx, dk, db) in parts {
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
        dks.push(dk);
        dbs.push(db);
    }
    let dk = Tensor::new(kernel.dims(), reduce_in_order(dks, f * krows))?;
    let db = Tensor::new(&[f], reduce_in_order(dbs, f))?;
    let dx = if need_input {
        Some(Tensor::new(input.dims(), dxs)?)
    } else {
        None
    };
    Ok((dx, dk, db))
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same spec.
/// The kernel is Cin×Cout×Kh×Kw and each spatial extent grows by `stride`.
pub fn conv2d_transposed<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, g) = transposed_geometry(input, kernel, spec)?;
    let cin = kernel.dims()[0];
    let cout = spec.filters;
    check_bias(bias, cout)?;
    let in_per = cin * g.cols();
    let out_plane = g.img_h * g.img_w;
    let out_per = cout * out_plane;
    let krows = g.rows();
    let mut out = vec![T::zero(); n * out_per];
    par::for_each_chunk_mut(&mut out, out_per, |s, dst| {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        if g.is_identity() {
            T::gemm(
                cout,
                cin,
                g.cols(),
                T::one(),
                kernel.data(),
                (1, krows),
                x,
                (g.cols(), 1),
                T::zero(),
                dst,
                (g.cols(), 1),
            );
        } else {
            let mut cols = vec![T::zero(); krows * g.cols()];
            T::gemm(
                krows,
                cin,
                g.cols(),
                T::one(),
                kernel.data(),
                (1, krows),
                x,
                (g.cols(), 1),
                T::zero(),
                &mut cols,
                (g.cols(), 1),
            );
            col2im(&cols, &g, dst);
        }
        if let Some(b) = bias {
            for (ch, plane) in dst.chunks_mut(out_plane).enumerate() {
                let bv = b.data()[ch];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Tensor::new(&[n, cout, g.img_h, g.img_w], out)
}

/// Gradients of [`conv2d_transposed`].
pub fn conv2d_transposed_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, g) = transposed_geometry(input, kernel, spec)?;
    let cin = kernel.dims()[0];
    let cout = spec.filters;
    let in_per = cin * g.cols();
    let out_plane = g.img_h * g.img_w;
    let out_per = cout * out_plane;
    if grad_out.len() != n * out_per {
        return shape_err("transposed conv gradient has wrong size");
    }
    let krows = g.rows();
    let parts = par::map_indices(n, |s| {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let dy = &grad_out.data()[s * out_per..(s + 1) * out_per];
        let owned;
        let dcols: &[T] = if g.is_identity() {
            dy
        } else {
            let mut buf = vec![T::zero(); krows * g.cols()];
            im2col(dy, &g, &mut buf);
            owned = buf;
            &owned
        };
        let mut dk = vec![T::zero(); cin * krows];
        T::gemm(
            cin,
            g.cols(),
            krows,
            T::one(),
            x,
            (g.cols(), 1),
            dcols,
            (1, g.cols()),
            T::zero(),
            &mut dk,
            (krows, 1),
        );
        let db: Vec<T> = dy.chunks(out_plane).map(|r| r.iter().copied().sum()).collect();
        let dx = need_input.then(|| {
            let mut dx = vec![T::zero(); in_per];
            T::gemm(
                cin,
                krows,
                g.cols(),
                T::one(),
                kernel.data(),
                (krows, 1),
                dcols,
                (g.cols(), 1),
                T::zero(),
                &mut dx,
                (g.cols(), 1),
            );
            dx
        });
        (dx, dk, db)
    });
    let mut dks = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    let mut dxs = Vec::with_capacity(if need_input { n * in_per } else { 0 });
    for (dx, dk, db) in parts {
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
        dks.push(dk);
        dbs.push(db);
    }
    let dk = Tensor::new(kernel.dims(), reduce_in_order(dks, cin * krows))?;
    let db = Tensor::new(&[cout], reduce_in_order(dbs, cout))?;
    let dx = if need_input {
        Some(Tensor::new(input.dims(), dxs)?)
    } else {
        None
    };
    Ok((dx, dk, db))
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Element = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Values a batch-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T: Element> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

pub enum BatchNormMode<'a, T: Element> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the running stats.
    Eval(&'a RunningStats<T>),
    /// Like `Train`, folding the batch statistics in with the given momentum.
    Refit(&'a mut RunningStats<T>, f64),
}

pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BatchNormMode<'_, T>,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (n, c, h, w) = input.nchw()?;
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!(
            "batch norm over {} channels got gamma {} / beta {}",
            c,
            gamma.len(),
            beta.len()
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = BN_EPSILON;
    let (means, vars, train) = match &mode {
        BatchNormMode::Train(_) | BatchNormMode::Refit(..) => {
            if count < 2 {
                return domain_err(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {}",
                    count
                ));
            }
            let mut means = vec![0.0f64; c];
            let mut vars = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += input.data()[off..off + plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    q += input.data()[off..off + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                means[ch] = m;
                vars[ch] = q / count as f64;
            }
            (means, vars, true)
        }
        BatchNormMode::Eval(stats) => (
            stats.mean.data().iter().map(|v| v.as_f64()).collect(),
            stats.var.data().iter().map(|v| v.as_f64()).collect(),
            false,
        ),
    };
    let inv_std: Vec<T> = vars
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let mut normalized = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let m = T::from_f64(means[ch]);
            let (g, be, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            for i in off..off + plane {
                let xh = (input.data()[i] - m) * is;
                normalized[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    let update = match mode {
        BatchNormMode::Train(stats) => Some((stats, BN_MOMENTUM)),
        BatchNormMode::Refit(stats, mom) => Some((stats, mom)),
        BatchNormMode::Eval(_) => None,
    };
    if let Some((stats, mom)) = update {
        for ch in 0..c {
            let rm = stats.mean.data()[ch].as_f64();
            let rv = stats.var.data()[ch].as_f64();
            stats.mean.data_mut()[ch] = T::from_f64(mom * rm + (1.0 - mom) * means[ch]);
            stats.var.data_mut()[ch] = T::from_f64(mom * rv + (1.0 - mom) * vars[ch]);
        }
    }
    Ok((
        Tensor::new(input.dims(), out)?,
        BatchNormSaved {
            normalized: Tensor::new(input.dims(), normalized)?,
            inv_std,
            train,
        },
    ))
}

/// Returns (d_input, d_gamma, d_beta).
pub fn batch_norm_backward<T: Element>(
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = saved.normalized.nchw()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let xh = saved.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += dy[i].as_f64();
                sum_dy_xh += (dy[i] * xh[i]).as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xh);
        dbeta[ch] = T::from_f64(sum_dy);
        let g = gamma.data()[ch];
        let is = saved.inv_std[ch];
        if saved.train {
            let mean_dy = T::from_f64(sum_dy / count);
            let mean_dy_xh = T::from_f64(sum_dy_xh / count);
            let scale = g * is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
                }
            }
        } else {
            let scale = g * is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.dims(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::LeakyRelu => {
            let slope = T::from_f64(LEAKY_RELU_SLOPE);
            input.map(|x| if x >= T::zero() { x } else { slope * x })
        }
        Activation::Tanh => input.map(|x| x.tanh()),
        Activation::Sigmoid => input.map(sigmoid_scalar),
    }
}

/// Vector-Jacobian product of an activation given its input and output.
pub fn activation_backward<T: Element>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    match kind {
        Activation::LeakyRelu => {
            let slope = T::from_f64(LEAKY_RELU_SLOPE);
            input.zip_map(grad_out, |x, g| if x >= T::zero() { g } else { slope * g })
        }
        Activation::Tanh => output.zip_map(grad_out, |y, g| g * (T::one() - y * y)),
        Activation::Sigmoid => output.zip_map(grad_out, |y, g| g * y * (T::one() - y)),
    }
}

/// Inverted dropout. Returns the output and the per-element multiplier.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return domain_err(format!("dropout rate {} outside [0, 1)", rate));
    }
    if !train || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.dims(), data)?, Some(mask)))
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return shape_err(format!(
            "concat needs matching N,H,W: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(&[na, ca + cb, ha, wa], data)
}

/// Channels `start..start+len` of an N×C×H×W tensor.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if start + len > c {
        return shape_err(format!("channel slice {}..{} out of {}", start, start + len, c));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for s in 0..n {
        let off = (s * c + start) * plane;
        data.extend_from_slice(&x.data()[off..off + len * plane]);
    }
    Tensor::new(&[n, len, h, w], data)
}

pub fn split_channels<T: Element>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.nchw()?.1;
    if at > c {
        return shape_err(format!("split point {} beyond {} channels", at, c));
    }
    Ok((slice_channels(x, 0, at)?, slice_channels(x, at, c - at)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn valid_all_ones_is_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, &ConvSpec::valid(3, 1, 1)).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
        let same = conv2d(&x, &k, None, &ConvSpec::same(3, 1, 1)).unwrap();
        assert_eq!(same.dims(), &[1, 1, 3, 3]);
        assert_eq!(same.data()[4], 9.0);
    }

    #[test]
    fn same_padding_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 1, 64, 64]);
        let k = Tensor::<f32>::zeros(&[64, 1, 4, 4]);
        let y = conv2d(&x, &k, None, &ConvSpec::same(4, 2, 64)).unwrap();
        assert_eq!(y.dims(), &[1, 64, 32, 32]);
        let x = Tensor::<f32>::zeros(&[1, 8, 4, 4]);
        let k = Tensor::<f32>::zeros(&[8, 8, 4, 4]);
        let y = conv2d(&x, &k, None, &ConvSpec::same(4, 1, 8)).unwrap();
        assert_eq!(y.dims(), &[1, 8, 4, 4]);
    }

    #[test]
    fn stride_one_four_by_four_pads_one_before_two_after() {
        // A delta at the origin of the input shows where each output reads.
        let mut x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        x.data_mut()[0] = 1.0;
        let k = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = conv2d(&x, &k, None, &ConvSpec::same(4, 1, 1)).unwrap();
        // Output (0,0) places kernel tap (1,1) on input (0,0).
        assert_eq!(y.data()[0], 5.0);
        assert_eq!(y.data()[1], 4.0);
        assert_eq!(y.data()[4], 1.0);
        assert_eq!(y.data()[5], 0.0);
    }

    #[test]
    fn transposed_shapes_and_identity() {
        let x = Tensor::<f32>::zeros(&[1, 128, 4, 4]);
        let k = Tensor::<f32>::zeros(&[128, 96, 4, 4]);
        let y = conv2d_transposed(&x, &k, None, &ConvSpec::same(4, 2, 96)).unwrap();
        assert_eq!(y.dims(), &[1, 96, 8, 8]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let mut k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = conv2d_transposed(&x, &k, Some(&b), &ConvSpec::same(1, 1, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_input() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[3, 1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &k, None, &ConvSpec::same(2, 2, 3)),
            Err(crate::TensorError::Shape(_))
        ));
        let empty = Tensor::<f32>::zeros(&[0, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&empty, &k, None, &ConvSpec::same(2, 2, 1)),
            Err(crate::TensorError::Domain(_))
        ));
    }

    #[test]
    fn batch_norm_constant_input_yields_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::full(&[1], 0.7);
        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm(&x, &gamma, &beta, BatchNormMode::Train(&mut stats)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_standardizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Large spread keeps var/(var+eps) within 1e-4 of one.
        let x = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random::<f64>() * 40.0 - 20.0 + 3.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut stats = RunningStats::new(3);
        let (y, _) = batch_norm(&x, &gamma, &beta, BatchNormMode::Train(&mut stats)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        // running stats moved 1% toward the batch statistics
        assert!(stats.mean.data()[0] > 0.0);
    }

    #[test]
    fn batch_norm_on_standardized_input_only_shrinks_by_epsilon() {
        // With unit variance the epsilon term scales outputs by 1/sqrt(1+eps).
        let data = vec![-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f64>::new(&[2, 1, 2, 2], data).unwrap();
        let (y, _) = batch_norm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BatchNormMode::Train(&mut RunningStats::new(1)),
        )
        .unwrap();
        let shrink = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * shrink - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_value() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let r = batch_norm(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            BatchNormMode::Train(&mut RunningStats::new(2)),
        );
        assert!(r.is_err());
    }

    #[test]
    fn activation_closed_forms() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, -1.0, 2.0]).unwrap();
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
        let t = activation(&x, Activation::Tanh);
        assert_eq!(t.data()[0], 0.0);
        let l = activation(&x, Activation::LeakyRelu);
        assert!((l.data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(l.data()[2], 2.0);
        // saturating arguments stay inside the open interval
        let big = Tensor::<f64>::new(&[2], vec![-30.0, 30.0]).unwrap();
        let s = activation(&big, Activation::Sigmoid);
        assert!(s.data()[0] > 0.0 && s.data()[1] < 1.0);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[10], |i| i as f64);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::full(&[1_000_000], 1.0);
        let (y, _) = dropout(&x, 0.5, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((survivors - 0.5).abs() < 0.002);
        let mean = y.sum() / 1e6;
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(&[2, 64, 4, 4], &mut rng);
        let d = random(&[2, 64, 4, 4], &mut rng);
        let cat = concat_channels(&d, &s).unwrap();
        assert_eq!(cat.dims(), &[2, 128, 4, 4]);
        let (a, b) = split_channels(&cat, 64).unwrap();
        assert_eq!(a, d);
        assert_eq!(b, s);
        let empty = Tensor::<f64>::zeros(&[2, 0, 4, 4]);
        assert_eq!(concat_channels(&s, &empty).unwrap(), s);
        let wrong = Tensor::<f64>::zeros(&[2, 1, 3, 4]);
        assert!(concat_channels(&s, &wrong).is_err());
    }
}
