//! CPU kernels registered as candle custom ops.
//!
//! Candle's built-in conv backward routes the weight gradient through a
//! convolution whose kernel is the whole feature map, and it has no
//! differentiable grid sampler. The ops here supply a convolution lowered to
//! im2col + gemm on both passes, bilinear warping with gradients for data and
//! flow, bilinear resizing, and a fused leaky ReLU.
//! All kernels are generic over `f32` and `f64`; `f64` exists for
//! finite-difference gradient checks.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};
use num_like::Real;

type CResult<T> = candle_core::Result<T>;

pub(crate) mod num_like {
    /// Minimal float abstraction over the two CPU dtypes the kernels support.
    pub trait Real:
        Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::AddAssign
        + Default
        + 'static
    {
        fn of(v: f64) -> Self;
        fn floor(self) -> Self;
        fn to_isize(self) -> isize;
        fn minf(self, o: Self) -> Self;
        fn maxf(self, o: Self) -> Self;
    }
    impl Real for f32 {
        fn of(v: f64) -> Self {
            v as f32
        }
        fn floor(self) -> Self {
            f32::floor(self)
        }
        fn to_isize(self) -> isize {
            self as isize
        }
        fn minf(self, o: Self) -> Self {
            self.min(o)
        }
        fn maxf(self, o: Self) -> Self {
            self.max(o)
        }
    }
    impl Real for f64 {
        fn of(v: f64) -> Self {
            v
        }
        fn floor(self) -> Self {
            f64::floor(self)
        }
        fn to_isize(self) -> isize {
            self as isize
        }
        fn minf(self, o: Self) -> Self {
            self.min(o)
        }
        fn maxf(self, o: Self) -> Self {
            self.max(o)
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, $name:expr, |$x:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $x = contiguous(v, $layout, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = contiguous(v, $layout, $name)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(v1), CpuStorage::F32(v2)) => {
                let $a = contiguous(v1, $l1, $name)?;
                let $b = contiguous(v2, $l2, $name)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(v1), CpuStorage::F64(v2)) => {
                let $a = contiguous(v1, $l1, $name)?;
                let $b = contiguous(v2, $l2, $name)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported or mixed dtypes", $name),
        }
    };
}

// ---------------------------------------------------------------------------
// Convolution via im2col + gemm

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let extent = self.dilation * (self.kernel - 1) + 1;
        (
            (h + 2 * self.padding - extent) / self.stride + 1,
            (w + 2 * self.padding - extent) / self.stride + 1,
        )
    }
}

/// Output columns `ox` whose input column `ox * stride + offset` lies in `0..w`.
fn valid_columns(ow: usize, w: usize, stride: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = if offset < 0 { ((-offset) as usize).div_ceil(stride) } else { 0 };
    let hi = if offset >= w as isize {
        0
    } else {
        ((w as isize - offset) as usize).div_ceil(stride).min(ow)
    };
    lo.min(hi)..hi
}

fn im2col_kernel<T: Real>(x: &[T], dims: (usize, usize, usize, usize), g: ConvGeometry) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = g.output_size(h, w);
    let kk = g.kernel * g.kernel;
    let mut out = vec![T::default(); n * c * kk * oh * ow];
    for b in 0..n {
        for ci in 0..c {
            let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = ((b * c + ci) * kk + ky * g.kernel + kx) * oh * ow;
                    let offset = (kx * g.dilation) as isize - g.padding as isize;
                    let cols = valid_columns(ow, w, g.stride, offset);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut out[row + oy * ow..row + (oy + 1) * ow];
                        if g.stride == 1 {
                            let start = (cols.start as isize + offset) as usize;
                            dst[cols.clone()].copy_from_slice(&src[start..start + cols.len()]);
                        } else {
                            for ox in cols.clone() {
                                dst[ox] = src[(ox as isize * g.stride as isize + offset) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<T: Real>(cols: &[T], n: usize, g: ConvGeometry, (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = g.output_size(h, w);
    let kk = g.kernel * g.kernel;
    let mut out = vec![T::default(); n * c * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut out[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = ((b * c + ci) * kk + ky * g.kernel + kx) * oh * ow;
                    let offset = (kx * g.dilation) as isize - g.padding as isize;
                    let valid = valid_columns(ow, w, g.stride, offset);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        if g.stride == 1 {
                            let start = (valid.start as isize + offset) as usize;
                            for (d, &s) in dst[start..start + valid.len()].iter_mut().zip(&src[valid.clone()]) {
                                *d += s;
                            }
                        } else {
                            for ox in valid.clone() {
                                dst[(ox as isize * g.stride as isize + offset) as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn gemm_into<T: Real>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    (lhs, lhs_rs, lhs_cs): (&[T], isize, isize),
    (rhs, rhs_rs, rhs_cs): (&[T], isize, isize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: callers pass slices covering every addressed element under the given strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::of(1.0),
            T::of(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

/// 2-D convolution `(x, weight (O, C, k, k), bias (O))` lowered to im2col + gemm.
struct Conv {
    geom: ConvGeometry,
}

struct ConvGradInput {
    geom: ConvGeometry,
    channels: usize,
    height: usize,
    width: usize,
}

struct ConvGradWeight {
    geom: ConvGeometry,
    out_channels: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn columns<'a, T: Real>(&self, x: &'a [T], c: usize, h: usize, w: usize) -> std::borrow::Cow<'a, [T]> {
        if self.is_pointwise() {
            std::borrow::Cow::Borrowed(x)
        } else {
            std::borrow::Cow::Owned(im2col_kernel(x, (1, c, h, w), *self))
        }
    }
}

fn conv_fwd<T: Real>(x: &[T], dims: (usize, usize, usize, usize), wt: &[T], bias: &[T], g: ConvGeometry) -> Vec<T> {
    let (n, c, h, w) = dims;
    let o = bias.len();
    let (oh, ow) = g.output_size(h, w);
    let p = oh * ow;
    let kdim = c * g.kernel * g.kernel;
    let mut y = vec![T::default(); n * o * p];
    for b in 0..n {
        let cols = g.columns(&x[b * c * h * w..(b + 1) * c * h * w], c, h, w);
        let yb = &mut y[b * o * p..(b + 1) * o * p];
        for (oc, &bv) in bias.iter().enumerate() {
            yb[oc * p..(oc + 1) * p].fill(bv);
        }
        gemm_into((o, p, kdim), yb, true, (wt, kdim as isize, 1), (&cols, p as isize, 1));
    }
    y
}

fn conv_grad_input<T: Real>(grad: &[T], n: usize, wt: &[T], op: &ConvGradInput) -> Vec<T> {
    let g = op.geom;
    let (c, h, w) = (op.channels, op.height, op.width);
    let (oh, ow) = g.output_size(h, w);
    let p = oh * ow;
    let kk = g.kernel * g.kernel;
    let kdim = c * kk;
    let o = wt.len() / kdim;
    if g.stride == 1 && 2 * g.padding == g.dilation * (g.kernel - 1) {
        // Same-size stride-1 convolution: the adjoint is a convolution with the
        // spatially flipped, channel-transposed kernel.
        let mut flipped = vec![T::default(); wt.len()];
        for oc in 0..o {
            for ci in 0..c {
                for t in 0..kk {
                    flipped[(ci * o + oc) * kk + kk - 1 - t] = wt[(oc * c + ci) * kk + t];
                }
            }
        }
        return conv_fwd(grad, (n, o, oh, ow), &flipped, &vec![T::default(); c], g);
    }
    let mut dx = Vec::with_capacity(n * c * h * w);
    let mut cols = vec![T::default(); kdim * p];
    for b in 0..n {
        let gb = &grad[b * o * p..(b + 1) * o * p];
        gemm_into((kdim, p, o), &mut cols, false, (wt, 1, kdim as isize), (gb, p as isize, 1));
        if g.is_pointwise() {
            dx.extend_from_slice(&cols);
        } else {
            dx.extend(col2im_kernel(&cols, 1, g, (c, h, w)));
        }
    }
    dx
}

fn conv_grad_weight<T: Real>(x: &[T], dims: (usize, usize, usize, usize), grad: &[T], op: &ConvGradWeight) -> Vec<T> {
    let g = op.geom;
    let (n, c, h, w) = dims;
    let (oh, ow) = g.output_size(h, w);
    let p = oh * ow;
    let kdim = c * g.kernel * g.kernel;
    let o = op.out_channels;
    // Accumulated as (kdim, o): both operands are then read along their contiguous axis.
    let mut dwt = vec![T::default(); kdim * o];
    for b in 0..n {
        let cols = g.columns(&x[b * c * h * w..(b + 1) * c * h * w], c, h, w);
        let gb = &grad[b * o * p..(b + 1) * o * p];
        gemm_into((kdim, o, p), &mut dwt, b > 0, (&cols, p as isize, 1), (gb, 1, p as isize));
    }
    let mut dw = vec![T::default(); o * kdim];
    for kidx in 0..kdim {
        for oc in 0..o {
            dw[oc * kdim + kidx] = dwt[kidx * o + oc];
        }
    }
    dw
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (o, c, k, k2) = l2.shape().dims4()?;
        if c != dims.1 || k != self.geom.kernel || k2 != k || l3.shape().dims1()? != o {
            candle_core::bail!("conv2d: weight {:?} / bias {:?} do not match input {:?}", l2.shape(), l3.shape(), l1.shape());
        }
        let (oh, ow) = self.geom.output_size(dims.2, dims.3);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(conv_fwd(
                contiguous(x, l1, "conv2d")?,
                dims,
                contiguous(w, l2, "conv2d")?,
                contiguous(b, l3, "conv2d")?,
                self.geom,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(conv_fwd(
                contiguous(x, l1, "conv2d")?,
                dims,
                contiguous(w, l2, "conv2d")?,
                contiguous(b, l3, "conv2d")?,
                self.geom,
            )),
            _ => candle_core::bail!("conv2d: unsupported or mixed dtypes"),
        };
        Ok((out, Shape::from((dims.0, o, oh, ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, c, h, wd) = x.dims4()?;
        let dx = if x.track_op() {
            let op = ConvGradInput {
                geom: self.geom,
                channels: c,
                height: h,
                width: wd,
            };
            Some(grad.apply_op2_no_bwd(&w.contiguous()?, &op)?)
        } else {
            None
        };
        let dw = if w.track_op() {
            let op = ConvGradWeight {
                geom: self.geom,
                out_channels: w.dim(0)?,
            };
            Some(x.contiguous()?.apply_op2_no_bwd(&grad, &op)?.reshape(w.shape())?)
        } else {
            None
        };
        let db = if b.track_op() {
            let (n, o, oh, ow) = grad.dims4()?;
            Some(grad.reshape((n, o, oh * ow))?.sum(2)?.sum(0)?)
        } else {
            None
        };
        Ok((dx, dw, db))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = l1.shape().dims4()?.0;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-input", |g, w| conv_grad_input(g, n, w, self));
        Ok((out, Shape::from((n, self.channels, self.height, self.width))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let kdim = dims.1 * self.geom.kernel * self.geom.kernel;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-weight", |x, g| conv_grad_weight(x, dims, g, self));
        Ok((out, Shape::from((self.out_channels, kdim))))
    }
}

/// Convolution of `x (N, C, H, W)` with `weight (O, C, k, k)` plus `bias (O)`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv { geom })
}

// ---------------------------------------------------------------------------
// Bilinear warp with edge-clamped sampling coordinates.

struct Warp;
struct WarpBackward;

#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    // Zero where the sampling coordinate was clamped.
    dx_active: bool,
    dy_active: bool,
}

#[inline]
fn axis_tap<T: Real>(pos: T, size: usize) -> (usize, usize, T, bool) {
    let max = T::of((size - 1) as f64);
    let active = pos >= T::of(0.0) && pos <= max;
    let p = pos.maxf(T::of(0.0)).minf(max);
    if size == 1 {
        return (0, 0, T::of(0.0), false);
    }
    let mut i0 = p.floor().to_isize().max(0) as usize;
    if i0 > size - 2 {
        i0 = size - 2;
    }
    let frac = p - T::of(i0 as f64);
    (i0, i0 + 1, frac, active)
}

#[inline]
fn tap<T: Real>(x: usize, y: usize, fx: T, fy: T, w: usize, h: usize) -> Tap<T> {
    let (x0, x1, wx, dx_active) = axis_tap(T::of(x as f64) + fx, w);
    let (y0, y1, wy, dy_active) = axis_tap(T::of(y as f64) + fy, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        wx,
        wy,
        dx_active,
        dy_active,
    }
}

fn warp_fwd_kernel<T: Real>(
    data: &[T],
    flow: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let hw = h * w;
    let one = T::of(1.0);
    let mut out = vec![T::default(); n * c * hw];
    for b in 0..n {
        let fl = &flow[b * 2 * hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, fl[p], fl[hw + p], w, h);
                let w00 = (one - t.wx) * (one - t.wy);
                let w01 = t.wx * (one - t.wy);
                let w10 = (one - t.wx) * t.wy;
                let w11 = t.wx * t.wy;
                for ch in 0..c {
                    let plane = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    out[(b * c + ch) * hw + p] = plane[t.y0 * w + t.x0] * w00
                        + plane[t.y0 * w + t.x1] * w01
                        + plane[t.y1 * w + t.x0] * w10
                        + plane[t.y1 * w + t.x1] * w11;
                }
            }
        }
    }
    out
}

/// Returns `[grad_data | grad_flow]` concatenated in one buffer.
fn warp_bwd_kernel<T: Real>(
    data: &[T],
    flow: &[T],
    grad: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let hw = h * w;
    let one = T::of(1.0);
    let mut gd = vec![T::default(); n * c * hw];
    let mut gf = vec![T::default(); n * 2 * hw];
    for b in 0..n {
        let fl = &flow[b * 2 * hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, fl[p], fl[hw + p], w, h);
                let w00 = (one - t.wx) * (one - t.wy);
                let w01 = t.wx * (one - t.wy);
                let w10 = (one - t.wx) * t.wy;
                let w11 = t.wx * t.wy;
                let mut gx = T::default();
                let mut gy = T::default();
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = grad[base + p];
                    let plane = &data[base..base + hw];
                    let v00 = plane[t.y0 * w + t.x0];
                    let v01 = plane[t.y0 * w + t.x1];
                    let v10 = plane[t.y1 * w + t.x0];
                    let v11 = plane[t.y1 * w + t.x1];
                    let gplane = &mut gd[base..base + hw];
                    gplane[t.y0 * w + t.x0] += g * w00;
                    gplane[t.y0 * w + t.x1] += g * w01;
                    gplane[t.y1 * w + t.x0] += g * w10;
                    gplane[t.y1 * w + t.x1] += g * w11;
                    gx += g * ((v01 - v00) * (one - t.wy) + (v11 - v10) * t.wy);
                    gy += g * ((v10 - v00) * (one - t.wx) + (v11 - v01) * t.wx);
                }
                if t.dx_active {
                    gf[b * 2 * hw + p] = gx;
                }
                if t.dy_active {
                    gf[b * 2 * hw + hw + p] = gy;
                }
            }
        }
    }
    gd.extend_from_slice(&gf);
    gd
}

fn warp_dims(l1: &Layout, l2: &Layout) -> CResult<(usize, usize, usize, usize)> {
    let (n, c, h, w) = l1.shape().dims4()?;
    let (fnb, fc, fh, fw) = l2.shape().dims4()?;
    if fnb != n || fc != 2 || fh != h || fw != w {
        candle_core::bail!(
            "warp: data {:?} and flow {:?} are not congruent",
            l1.shape(),
            l2.shape()
        );
    }
    Ok((n, c, h, w))
}

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = warp_dims(l1, l2)?;
        let out = dispatch2!(s1, l1, s2, l2, "bilinear-warp", |d, f| warp_fwd_kernel(
            d, f, dims
        ));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        data: &Tensor,
        flow: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = data.dims4()?;
        let both = Tensor::cat(
            &[
                data.flatten_all()?,
                grad.contiguous()?.flatten_all()?,
            ],
            0,
        )?;
        let packed = both.apply_op2_no_bwd(&flow.contiguous()?, &WarpBackward)?;
        let gd = packed
            .narrow(0, 0, n * c * h * w)?
            .reshape((n, c, h, w))?;
        let gf = packed
            .narrow(0, n * c * h * w, n * 2 * h * w)?
            .reshape((n, 2, h, w))?;
        Ok((Some(gd), Some(gf)))
    }
}

impl CustomOp2 for WarpBackward {
    fn name(&self) -> &'static str {
        "bilinear-warp-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (n, _, h, w) = l2.shape().dims4()?;
        let total = l1.shape().elem_count();
        let c = total / 2 / (n * h * w);
        let out = dispatch2!(s1, l1, s2, l2, "bilinear-warp-bwd", |packed, f| {
            let (d, g) = packed.split_at(total / 2);
            warp_bwd_kernel(d, f, g, (n, c, h, w))
        });
        Ok((out, Shape::from(n * c * h * w + n * 2 * h * w)))
    }
}

/// `out(p) = data(p + flow(p))`, bilinear, coordinates clamped to the frame.
pub(crate) fn warp(data: &Tensor, flow: &Tensor) -> CResult<Tensor> {
    data.contiguous()?.apply_op2(&flow.contiguous()?, Warp)
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers, clamped edges).

struct Resize {
    out_h: usize,
    out_w: usize,
}

struct ResizeAdjoint {
    in_h: usize,
    in_w: usize,
}

fn resize_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_kernel<T: Real>(
    x: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = resize_taps(oh, ih);
    let tx = resize_taps(ow, iw);
    let one = T::of(1.0);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * iw + x0] * (one - fx) + src[y0 * iw + x1] * fx;
                let bot = src[y1 * iw + x0] * (one - fx) + src[y1 * iw + x1] * fx;
                dst[oy * ow + ox] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

fn resize_adjoint_kernel<T: Real>(
    g: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = resize_taps(oh, ih);
    let tx = resize_taps(ow, iw);
    let one = T::of(1.0);
    let mut out = vec![T::default(); planes * ih * iw];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = src[oy * ow + ox];
                dst[y0 * iw + x0] += v * (one - fx) * (one - fy);
                dst[y0 * iw + x1] += v * fx * (one - fy);
                dst[y1 * iw + x0] += v * (one - fx) * fy;
                dst[y1 * iw + x1] += v * fx * fy;
            }
        }
    }
    out
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "bilinear-resize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let out = dispatch1!(storage, layout, "bilinear-resize", |x| resize_kernel(
            x,
            n * c,
            (h, w),
            (self.out_h, self.out_w)
        ));
        Ok((out, Shape::from((n, c, self.out_h, self.out_w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let op = ResizeAdjoint { in_h: h, in_w: w };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for ResizeAdjoint {
    fn name(&self) -> &'static str {
        "bilinear-resize-adjoint"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, oh, ow) = layout.shape().dims4()?;
        let out = dispatch1!(storage, layout, "bilinear-resize-adjoint", |g| {
            resize_adjoint_kernel(g, n * c, (self.in_h, self.in_w), (oh, ow))
        });
        Ok((out, Shape::from((n, c, self.in_h, self.in_w))))
    }
}

pub(crate) fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Resize { out_h, out_w })
}

// ---------------------------------------------------------------------------
// Leaky ReLU

struct LeakyRelu {
    slope: f64,
}

struct LeakyReluGrad {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let slope = self.slope;
        let out = dispatch1!(storage, layout, "leaky-relu", |x| lrelu_fwd(x, slope));
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let op = LeakyReluGrad { slope: self.slope };
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(
            &grad.contiguous()?,
            &op,
        )?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let slope = self.slope;
        let out = dispatch2!(s1, l1, s2, l2, "leaky-relu-grad", |x, g| lrelu_bwd(x, g, slope));
        Ok((out, l1.shape().clone()))
    }
}

fn lrelu_fwd<T: Real>(x: &[T], slope: f64) -> Vec<T> {
    let s = T::of(slope);
    let zero = T::of(0.0);
    x.iter().map(|&v| if v > zero { v } else { v * s }).collect()
}

fn lrelu_bwd<T: Real>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
    let s = T::of(slope);
    let zero = T::of(0.0);
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| if v > zero { gv } else { gv * s })
        .collect()
}

pub(crate) fn leaky_relu(x: &Tensor, slope: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}
