//! CPU convolution and max-pooling kernels with backward passes.
//!
//! Candle's stock CPU conv backward goes through a naive transposed
//! convolution, which dominates training time on small machines. These ops
//! lower everything to im2col + gemm (or direct loops for depthwise
//! convolutions) in both directions.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

/// Element types supported by the kernels.
pub trait Scalar: Copy + Send + Sync + 'static + PartialOrd + std::ops::AddAssign + std::ops::Mul<Output = Self> {
    const ZERO: Self;
    const ONE: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> CResult<Self> {
        if x.len() != 4 || w.len() != 4 {
            candle_core::bail!("conv2d expects 4d input and weight, got {x:?} and {w:?}");
        }
        let (batch, in_c, in_h, in_w) = (x[0], x[1], x[2], x[3]);
        let (out_c, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 || cg * groups != in_c {
            candle_core::bail!("conv2d channel/group mismatch: input {x:?}, weight {w:?}, groups {groups}");
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw || stride == 0 {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {in_h}x{in_w}");
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, in_c, in_h, in_w, out_c, kh, kw, stride, pad, groups, out_h, out_w })
    }

    fn cg(&self) -> usize {
        self.in_c / self.groups
    }

    fn og(&self) -> usize {
        self.out_c / self.groups
    }

    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cg() == 1 && self.og() == 1
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

/// Row-major `dst[m×n] (+)= lhs[m×k] · rhs[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    (lhs_rs, lhs_cs): (isize, isize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (isize, isize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: callers size every buffer for the given strides and extents.
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
            if accumulate { T::ONE } else { T::ZERO },
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

/// Unrolls the input patches of one group of one sample into `cols` (K × P).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, c0: usize, cols: &mut [T]) {
    let p = g.p();
    let plane = g.in_h * g.in_w;
    for c in 0..g.cg() {
        let src = &x[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::ZERO } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (K × P) back onto one group of one sample's input gradient.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, c0: usize, dx: &mut [T]) {
    let p = g.p();
    let plane = g.in_h * g.in_w;
    for c in 0..g.cg() {
        let dst = &mut dx[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, k, og, cg) = (g.p(), g.k(), g.og(), g.cg());
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * p;
    let mut out = vec![T::ZERO; g.batch * out_plane];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
        return out;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_plane..(n + 1) * in_plane];
        for grp in 0..g.groups {
            let rhs: &[T] = if g.is_pointwise() {
                &xs[grp * cg * p..(grp + 1) * cg * p]
            } else {
                im2col(xs, g, grp * cg, &mut cols);
                &cols
            };
            let dst = &mut out[n * out_plane + grp * og * p..n * out_plane + (grp + 1) * og * p];
            let lhs = &w[grp * og * k..(grp + 1) * og * k];
            matmul(og, p, k, dst, false, lhs, (k as isize, 1), rhs, (p as isize, 1));
        }
    }
    out
}

fn conv_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, k, og, cg) = (g.p(), g.k(), g.og(), g.cg());
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * p;
    let mut dx = vec![T::ZERO; g.batch * in_plane];
    if g.is_depthwise() {
        depthwise_backward_input(dy, w, g, &mut dx);
        return dx;
    }
    let mut cols = vec![T::ZERO; k * p];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let dys = &dy[n * out_plane + grp * og * p..n * out_plane + (grp + 1) * og * p];
            let lhs = &w[grp * og * k..(grp + 1) * og * k];
            let dxs = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                let dst = &mut dxs[grp * cg * p..(grp + 1) * cg * p];
                matmul(k, p, og, dst, false, lhs, (1, k as isize), dys, (p as isize, 1));
            } else {
                matmul(k, p, og, &mut cols, false, lhs, (1, k as isize), dys, (p as isize, 1));
                col2im(&cols, g, grp * cg, dxs);
            }
        }
    }
    dx
}

fn conv_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, k, og, cg) = (g.p(), g.k(), g.og(), g.cg());
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * p;
    let mut dw = vec![T::ZERO; g.out_c * k];
    if g.is_depthwise() {
        depthwise_backward_weight(x, dy, g, &mut dw);
        return dw;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_plane..(n + 1) * in_plane];
        for grp in 0..g.groups {
            let rhs: &[T] = if g.is_pointwise() {
                &xs[grp * cg * p..(grp + 1) * cg * p]
            } else {
                im2col(xs, g, grp * cg, &mut cols);
                &cols
            };
            let dys = &dy[n * out_plane + grp * og * p..n * out_plane + (grp + 1) * og * p];
            let dst = &mut dw[grp * og * k..(grp + 1) * og * k];
            // dW[og×k] += dY[og×p] · cols^T[p×k]
            matmul(og, k, p, dst, true, dys, (p as isize, 1), rhs, (1, p as isize));
        }
    }
    dw
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let plane = g.in_h * g.in_w;
    let p = g.p();
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let src = &x[(n * g.in_c + c) * plane..(n * g.in_c + c + 1) * plane];
            let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(n * g.out_c + c) * p..(n * g.out_c + c + 1) * p];
            for oy in 0..g.out_h {
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for kx in 0..g.kw {
                        let wv = ker[ky * g.kw + kx];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.in_h * g.in_w;
    let p = g.p();
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let src = &dy[(n * g.out_c + c) * p..(n * g.out_c + c + 1) * p];
            let dst = &mut dx[(n * g.in_c + c) * plane..(n * g.in_c + c + 1) * plane];
            for oy in 0..g.out_h {
                let grow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for kx in 0..g.kw {
                        let wv = ker[ky * g.kw + kx];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                drow[ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom, dw: &mut [T]) {
    let plane = g.in_h * g.in_w;
    let p = g.p();
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let src = &x[(n * g.in_c + c) * plane..(n * g.in_c + c + 1) * plane];
            let gsrc = &dy[(n * g.out_c + c) * p..(n * g.out_c + c + 1) * p];
            let ker = &mut dw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for oy in 0..g.out_h {
                let grow = &gsrc[oy * g.out_w..(oy + 1) * g.out_w];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for kx in 0..g.kw {
                        let mut acc = T::ZERO;
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                acc += gv * srow[ix as usize];
                            }
                        }
                        ker[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:literal, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!(concat!($name, " supports matching f32/f64 inputs only")),
        }
    };
}

struct Conv2dFwd {
    stride: usize,
    pad: usize,
    groups: usize,
}

impl CustomOp2 for Conv2dFwd {
    fn name(&self) -> &'static str {
        "egopath-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad, self.groups)?;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d", |x, w| conv_forward(x, w, &g));
        Ok((out, Shape::from((g.batch, g.out_c, g.out_h, g.out_w))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &Conv2dGradInput { stride: self.stride, pad: self.pad, groups: self.groups, input_dims: x.dims().to_vec() },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &Conv2dGradWeight { stride: self.stride, pad: self.pad, groups: self.groups, weight_dims: w.dims().to_vec() },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

struct Conv2dGradInput {
    stride: usize,
    pad: usize,
    groups: usize,
    input_dims: Vec<usize>,
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "egopath-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(&self.input_dims, l2.dims(), self.stride, self.pad, self.groups)?;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d backward", |dy, w| conv_backward_input(dy, w, &g));
        Ok((out, Shape::from(self.input_dims.clone())))
    }
}

struct Conv2dGradWeight {
    stride: usize,
    pad: usize,
    groups: usize,
    weight_dims: Vec<usize>,
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "egopath-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), &self.weight_dims, self.stride, self.pad, self.groups)?;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d backward", |x, dy| conv_backward_weight(x, dy, &g));
        Ok((out, Shape::from(self.weight_dims.clone())))
    }
}

/// 2-D convolution (no bias) with symmetric stride and zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dFwd { stride, pad, groups })
}

#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    planes: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl PoolGeom {
    fn new(dims: &[usize], k: usize, stride: usize, pad: usize) -> CResult<Self> {
        if dims.len() != 4 {
            candle_core::bail!("max_pool2d expects a 4d input, got {dims:?}");
        }
        if dims[2] + 2 * pad < k || dims[3] + 2 * pad < k || pad >= k {
            candle_core::bail!("max_pool2d window {k} incompatible with input {dims:?}");
        }
        Ok(Self {
            planes: dims[0] * dims[1],
            in_h: dims[2],
            in_w: dims[3],
            k,
            stride,
            pad,
            out_h: (dims[2] + 2 * pad - k) / stride + 1,
            out_w: (dims[3] + 2 * pad - k) / stride + 1,
        })
    }

    /// Clipped input range covered by output index `o` along an axis of length `len`.
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = (start + self.k as isize).min(len as isize) as usize;
        (start.max(0) as usize, end)
    }

    /// Flat index (within the plane) of the first maximum of each window.
    #[inline]
    fn argmax<T: Scalar>(&self, plane: &[T], oy: usize, ox: usize) -> usize {
        let (y0, y1) = self.window(oy, self.in_h);
        let (x0, x1) = self.window(ox, self.in_w);
        let mut at = y0 * self.in_w + x0;
        let mut best = plane[at];
        for iy in y0..y1 {
            let row = &plane[iy * self.in_w..iy * self.in_w + x1];
            for (ix, &v) in row.iter().enumerate().skip(x0) {
                if v > best {
                    best = v;
                    at = iy * self.in_w + ix;
                }
            }
        }
        at
    }
}

fn pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let plane = g.in_h * g.in_w;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for pl in 0..g.planes {
        let src = &x[pl * plane..(pl + 1) * plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                out.push(src[g.argmax(src, oy, ox)]);
            }
        }
    }
    out
}

fn pool_backward<T: Scalar>(x: &[T], dy: &[T], g: &PoolGeom) -> Vec<T> {
    let plane = g.in_h * g.in_w;
    let oplane = g.out_h * g.out_w;
    let mut dx = vec![T::ZERO; x.len()];
    for pl in 0..g.planes {
        let src = &x[pl * plane..(pl + 1) * plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let at = g.argmax(src, oy, ox);
                dx[pl * plane + at] += dy[pl * oplane + oy * g.out_w + ox];
            }
        }
    }
    dx
}

struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "egopath-max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = PoolGeom::new(l.dims(), self.k, self.stride, self.pad)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(pool_forward(contiguous(v, l)?, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(pool_forward(contiguous(v, l)?, &g)),
            _ => candle_core::bail!("max_pool2d supports f32/f64 only"),
        };
        let d = l.dims();
        Ok((out, Shape::from((d[0], d[1], g.out_h, g.out_w))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let dx = x.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2dGrad { k: self.k, stride: self.stride, pad: self.pad })?;
        Ok(Some(dx))
    }
}

struct MaxPool2dGrad {
    k: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp2 for MaxPool2dGrad {
    fn name(&self) -> &'static str {
        "egopath-max-pool2d-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = PoolGeom::new(l1.dims(), self.k, self.stride, self.pad)?;
        let out = dispatch2!(s1, l1, s2, l2, "max_pool2d backward", |x, dy| pool_backward(x, dy, &g));
        Ok((out, l1.shape().clone()))
    }
}

/// Max pooling with a square window and implicit `-inf` padding.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2d { k, stride, pad })
}

/// Per-channel mean and biased variance of an NCHW buffer.
fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            sum += x[start..start + plane].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            sq += x[start..start + plane].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

fn nchw(dims: &[usize]) -> CResult<(usize, usize, usize)> {
    match dims {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => candle_core::bail!("batch norm expects a 4d input, got {dims:?}"),
    }
}

struct ChannelStats;

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "egopath-channel-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, c, plane) = nchw(l.dims())?;
        fn pack<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
            let (m, v) = channel_stats(x, n, c, plane);
            m.into_iter().chain(v).map(T::from_f64).collect()
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(pack(contiguous(v, l)?, n, c, plane)),
            CpuStorage::F64(v) => CpuStorage::F64(pack(contiguous(v, l)?, n, c, plane)),
            _ => candle_core::bail!("batch norm supports f32/f64 only"),
        };
        Ok((out, Shape::from((2, c))))
    }
}

fn bn_forward<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, plane) = dims;
    let (mean, var) = channel_stats(x, n, c, plane);
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        let scale = gamma[ch].to_f64() / (var[ch] + eps).sqrt();
        let shift = beta[ch].to_f64() - mean[ch] * scale;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for (o, v) in out[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                *o = T::from_f64(v.to_f64() * scale + shift);
            }
        }
    }
    out
}

/// Per-channel `(Σ dy·x̂, Σ dy)`.
fn bn_param_sums<T: Scalar>(x: &[T], dy: &[T], dims: (usize, usize, usize), eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, plane) = dims;
    let (mean, var) = channel_stats(x, n, c, plane);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for (xv, g) in x[start..start + plane].iter().zip(&dy[start..start + plane]) {
                let g = g.to_f64();
                dbeta[ch] += g;
                dgamma[ch] += g * (xv.to_f64() - mean[ch]) * inv[ch];
            }
        }
    }
    (dgamma, dbeta, mean, inv)
}

fn bn_backward_input<T: Scalar>(x: &[T], gamma: &[T], dy: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, plane) = dims;
    let (dgamma, dbeta, mean, inv) = bn_param_sums(x, dy, dims, eps);
    let count = (n * plane) as f64;
    let mut dx = vec![T::ZERO; x.len()];
    for ch in 0..c {
        let k = gamma[ch].to_f64() * inv[ch] / count;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for ((o, xv), g) in dx[start..start + plane].iter_mut().zip(&x[start..start + plane]).zip(&dy[start..start + plane]) {
                let xhat = (xv.to_f64() - mean[ch]) * inv[ch];
                *o = T::from_f64(k * (count * g.to_f64() - dbeta[ch] - xhat * dgamma[ch]));
            }
        }
    }
    dx
}

struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "egopath-batch-norm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nchw(l1.dims())?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(bn_forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(bn_forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims, self.eps))
            }
            _ => candle_core::bail!("batch norm supports matching f32/f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, gamma: &Tensor, _beta: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = x.apply_op3_no_bwd(gamma, &grad, &BatchNormGradInput { eps: self.eps })?;
        let sums = x.apply_op2_no_bwd(&grad, &BatchNormGradParams { eps: self.eps })?;
        Ok((Some(dx), Some(sums.get(0)?), Some(sums.get(1)?)))
    }
}

struct BatchNormGradInput {
    eps: f64,
}

impl CustomOp3 for BatchNormGradInput {
    fn name(&self) -> &'static str {
        "egopath-batch-norm-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nchw(l1.dims())?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => {
                CpuStorage::F32(bn_backward_input(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, dims, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => {
                CpuStorage::F64(bn_backward_input(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, dims, self.eps))
            }
            _ => candle_core::bail!("batch norm supports matching f32/f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

struct BatchNormGradParams {
    eps: f64,
}

impl CustomOp2 for BatchNormGradParams {
    fn name(&self) -> &'static str {
        "egopath-batch-norm-grad-params"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nchw(l1.dims())?;
        fn pack<T: Scalar>(x: &[T], dy: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
            let (dg, db, _, _) = bn_param_sums(x, dy, dims, eps);
            dg.into_iter().chain(db).map(T::from_f64).collect()
        }
        let out = dispatch2!(s1, l1, s2, l2, "batch norm backward", |x, dy| pack(x, dy, dims, self.eps));
        Ok((out, Shape::from((2, dims.1))))
    }
}

/// Per-channel batch mean and biased variance, shape `(2, C)`, without gradient.
pub fn batch_channel_stats(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.detach().apply_op1_no_bwd(&ChannelStats)
}

/// Batch normalization with batch statistics: `γ·(x − μ)/√(σ² + eps) + β`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn reference_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        x.conv2d(w, pad, stride, 1, groups).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv_matches_candle_reference() {
        let dev = Device::Cpu;
        let cases = [
            // (n, c, h, w, o, k, stride, pad, groups)
            (2, 3, 9, 7, 4, 3, 1, 1, 1),
            (1, 4, 8, 8, 6, 3, 2, 1, 2),
            (2, 5, 6, 6, 5, 5, 2, 2, 5),
            (2, 6, 5, 5, 3, 1, 1, 0, 1),
            (1, 3, 11, 11, 2, 7, 2, 3, 1),
            (1, 4, 6, 6, 8, 1, 2, 0, 1),
        ];
        for (n, c, h, wd, o, k, s, p, g) in cases {
            let x = Tensor::randn(0f64, 1.0, (n, c, h, wd), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (o, c / g, k, k), &dev).unwrap();
            let ours = conv2d(&x, &w, s, p, g).unwrap();
            let theirs = reference_conv(&x, &w, s, p, g);
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_abs_diff(&ours, &theirs) < 1e-10, "case {:?}", (n, c, h, wd, o, k, s, p, g));
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        for (c, o, k, s, p, g) in [(2, 3, 3, 2, 1, 1), (3, 3, 3, 1, 1, 3), (4, 2, 1, 1, 0, 1), (4, 4, 3, 1, 1, 2)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c, 5, 6), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c / g, k, k), &dev).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1.0, conv2d(&x, &w, s, p, g).unwrap().shape(), &dev).unwrap();
            let loss = |x: &Tensor, w: &Tensor| -> f64 {
                (conv2d(x, w, s, p, g).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let grads = (conv2d(&x, &w, s, p, g).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
                let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
                for i in (0..base.len()).step_by(7) {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus[i] += 1e-5;
                    minus[i] -= 1e-5;
                    let tp = Tensor::from_vec(plus, var.shape(), &dev).unwrap();
                    let tm = Tensor::from_vec(minus, var.shape(), &dev).unwrap();
                    let (lp, lm) = if is_x {
                        (loss(&tp, other.as_tensor()), loss(&tm, other.as_tensor()))
                    } else {
                        (loss(other.as_tensor(), &tp), loss(other.as_tensor(), &tm))
                    };
                    let fd = (lp - lm) / 2e-5;
                    assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "fd {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn max_pool_forward_and_backward() {
        let dev = Device::Cpu;
        let data: Vec<f32> = (0..16).map(|v| ((v * 7) % 16) as f32).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 1, 4, 4), &dev).unwrap()).unwrap();
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let out: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        // Brute force over the padded windows.
        let mut expected = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f32::NEG_INFINITY;
                for iy in (oy * 2) as i32 - 1..=(oy * 2) as i32 + 1 {
                    for ix in (ox * 2) as i32 - 1..=(ox * 2) as i32 + 1 {
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            m = m.max(data[(iy * 4 + ix) as usize]);
                        }
                    }
                }
                expected.push(m);
            }
        }
        assert_eq!(out, expected);
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f32> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g.iter().sum::<f32>(), 4.0);
        for (i, v) in g.iter().enumerate() {
            if *v > 0.0 {
                assert!(expected.contains(&data[i]));
            }
        }
    }

    #[test]
    fn batch_norm_matches_composite_expression() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (3, 4, 5, 2), &dev).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1f64, 0.5, 4, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.5, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5, 2), &dev).unwrap();
        let eps = 1e-5;
        let ours = batch_norm_train(&x, &g, &b, eps).unwrap();
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let centered = x.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let inv = var.affine(1.0, eps).unwrap().sqrt().unwrap().recip().unwrap();
        let theirs = centered
            .broadcast_mul(&inv)
            .unwrap()
            .broadcast_mul(&g.reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_abs_diff(&ours, &theirs) < 1e-10);
        let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            assert!(max_abs_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-9);
        }
        let stats = batch_channel_stats(&x).unwrap();
        assert!(max_abs_diff(&stats.get(0).unwrap(), &mean.flatten_all().unwrap()) < 1e-12);
        assert!(max_abs_diff(&stats.get(1).unwrap(), &var.flatten_all().unwrap()) < 1e-12);
    }
}
