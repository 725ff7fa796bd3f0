//! Forward and backward kernels, independent of the tape.
//!
//! Convolutions lower to `im2col` + GEMM. Layouts are NCHW throughout; kernels
//! are `[Cout, Cin, k, k]` for standard convolution, `[C, 1, k, k]` for
//! depthwise and `[Cin, Cout, k, k]` for transposed convolution.

use super::{arg_err, shape_err, Element, Result, Tensor};

/// Sliding-window geometry of a single-image convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn conv(
        op: &'static str,
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return arg_err(op, format!("kernel {kernel} and stride {stride} must be >= 1"));
        }
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return arg_err(op, format!("padded input {}x{} smaller than kernel {kernel}", in_h + 2 * pad, in_w + 2 * pad));
        }
        Ok(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate read by output position `o` at kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output positions `lo..hi` whose tap `t` lands inside `0..extent`; the
    /// first one reads input coordinate `start`.
    #[inline]
    fn valid(&self, t: usize, extent: usize, out_len: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = if self.pad > t { (self.pad - t).div_ceil(s) } else { 0 };
        let hi = if extent + self.pad > t { (extent + self.pad - t).div_ceil(s).min(out_len) } else { 0 };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + t - self.pad)
    }
}

/// Sum with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn fast_sum<T: Element>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        s = s + v;
    }
    s
}

/// Dot product with the same accumulation pattern as [`fast_sum`].
#[inline]
pub fn fast_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let split = n - n % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in split..n {
        s = s + a[i] * b[i];
    }
    s
}

/// `dst[i] += w * src[i]` over the length of `dst`.
#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], w: T) {
    let n = dst.len();
    for (d, &v) in dst.iter_mut().zip(&src[..n]) {
        *d = *d + w * v;
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, out_h*out_w]` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (k, ow) = (g.kernel, g.out_w);
    let cols = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi, start) = g.valid(kj, g.in_w, ow);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.source(oy, ki, g.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the matrix back into a `[C, H, W]` image.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (k, ow) = (g.kernel, g.out_w);
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi, start) = g.valid(kj, g.in_w, ow);
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.in_h) else { continue };
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], usize, ConvGeometry)> {
    let [b, cin, h, w] = input.dims4(op)?;
    let [cout, kcin, kh, kw] = kernel.dims4(op)?;
    if kcin != cin {
        return shape_err(op, format!("input has {cin} channels but kernel expects {kcin} (kernel {:?})", kernel.shape()));
    }
    if kh != kw {
        return shape_err(op, format!("kernel must be square, got {kh}x{kw}"));
    }
    let g = ConvGeometry::conv(op, cin, h, w, kh, stride, padding)?;
    Ok(([b, cin, h, w], cout, g))
}

pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let ([b, cin, h, w], cout, g) = conv_dims("conv2d", input, kernel, stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[b, cout, g.out_h, g.out_w]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let x = input.data();
    let k = kernel.data();
    for bi in 0..b {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let cm: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let yb = &mut out.data_mut()[bi * cout * cols..(bi + 1) * cout * cols];
        T::gemm(cout, rows, cols, T::one(), k, rows as isize, 1, cm, cols as isize, 1, T::zero(), yb, cols as isize, 1);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to the input and/or the kernel.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let ([b, cin, h, w], cout, g) = conv_dims("conv2d_backward", input, kernel, stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    if grad_out.shape() != [b, cout, g.out_h, g.out_w] {
        return shape_err("conv2d_backward", format!("output gradient {:?}", grad_out.shape()));
    }
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut dk = need_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let x = input.data();
    let k = kernel.data();
    let in_len = cin * h * w;
    for bi in 0..b {
        let dyb = &grad_out.data()[bi * cout * cols..(bi + 1) * cout * cols];
        if let Some(dk) = dk.as_mut() {
            let xb = &x[bi * in_len..(bi + 1) * in_len];
            let cm: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut col);
                &col
            };
            // dK[Cout, rows] += dY[Cout, cols] * col^T
            T::gemm(
                cout,
                cols,
                rows,
                T::one(),
                dyb,
                cols as isize,
                1,
                cm,
                1,
                cols as isize,
                T::one(),
                dk.data_mut(),
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * in_len..(bi + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(rows, cout, cols, T::one(), k, 1, rows as isize, dyb, cols as isize, 1, T::zero(), dxb, cols as isize, 1);
            } else {
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    k,
                    1,
                    rows as isize,
                    dyb,
                    cols as isize,
                    1,
                    T::zero(),
                    &mut col,
                    cols as isize,
                    1,
                );
                col2im(&col, &g, dxb);
            }
        }
    }
    Ok((dx, dk))
}

fn depthwise_dims<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], ConvGeometry)> {
    let [b, c, h, w] = input.dims4(op)?;
    let [kc, one, kh, kw] = kernel.dims4(op)?;
    if kc != c || one != 1 || kh != kw {
        return shape_err(op, format!("kernel {:?} does not fit {c} input channels (expected [{c}, 1, k, k])", kernel.shape()));
    }
    let g = ConvGeometry::conv(op, 1, h, w, kh, stride, padding)?;
    Ok(([b, c, h, w], g))
}

/// Per-plane layout for depthwise convolution. The zero-padded input is split
/// into `stride * stride` phase images of width `pw`, and outputs are computed
/// on rows of the same width, so every tap becomes one contiguous axpy.
/// Columns past `out_w` in a wide row are scratch.
struct PhasePlan {
    stride: usize,
    out_h: usize,
    out_w: usize,
    pw: usize,
    phase_len: usize,
    row_off: Vec<usize>,
    col_off: Vec<usize>,
}

impl PhasePlan {
    fn new(g: &ConvGeometry) -> Self {
        let s = g.stride;
        let pw = (g.in_w + 2 * g.pad).div_ceil(s);
        let ph = (g.in_h + 2 * g.pad).div_ceil(s);
        // One spare row keeps the scratch columns of the last wide row in bounds.
        let phase_len = (ph + 1) * pw;
        let row_off = (0..g.in_h).map(|r| ((r + g.pad) % s) * s * phase_len + ((r + g.pad) / s) * pw).collect();
        let col_off = (0..g.in_w).map(|c| ((c + g.pad) % s) * phase_len + (c + g.pad) / s).collect();
        PhasePlan { stride: s, out_h: g.out_h, out_w: g.out_w, pw, phase_len, row_off, col_off }
    }

    fn buffer_len(&self) -> usize {
        self.stride * self.stride * self.phase_len
    }

    fn wide_len(&self) -> usize {
        self.out_h * self.pw
    }

    fn tap_offset(&self, ki: usize, kj: usize) -> usize {
        let s = self.stride;
        ((ki % s) * s + kj % s) * self.phase_len + (ki / s) * self.pw + kj / s
    }

    fn pack<T: Element>(&self, plane: &[T], buf: &mut [T]) {
        buf.fill(T::zero());
        let w = self.col_off.len();
        for (row, &ro) in plane.chunks_exact(w).zip(&self.row_off) {
            if self.stride == 1 {
                let c0 = ro + self.col_off[0];
                buf[c0..c0 + w].copy_from_slice(row);
            } else {
                for (&v, &co) in row.iter().zip(&self.col_off) {
                    buf[ro + co] = v;
                }
            }
        }
    }

    fn unpack_add<T: Element>(&self, buf: &[T], plane: &mut [T]) {
        let w = self.col_off.len();
        for (row, &ro) in plane.chunks_exact_mut(w).zip(&self.row_off) {
            if self.stride == 1 {
                let c0 = ro + self.col_off[0];
                axpy(row, &buf[c0..c0 + w], T::one());
            } else {
                for (d, &co) in row.iter_mut().zip(&self.col_off) {
                    *d = *d + buf[ro + co];
                }
            }
        }
    }

    fn narrow<T: Element>(&self, wide: &[T], out: &mut [T]) {
        for (dst, src) in out.chunks_exact_mut(self.out_w).zip(wide.chunks_exact(self.pw)) {
            dst.copy_from_slice(&src[..self.out_w]);
        }
    }

    fn widen<T: Element>(&self, narrow: &[T], wide: &mut [T]) {
        wide.fill(T::zero());
        for (src, dst) in narrow.chunks_exact(self.out_w).zip(wide.chunks_exact_mut(self.pw)) {
            dst[..self.out_w].copy_from_slice(src);
        }
    }
}

pub fn depthwise_conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let ([b, c, h, w], g) = depthwise_dims("depthwise_conv2d", input, kernel, stride, padding)?;
    let (oh, ow, kk) = (g.out_h, g.out_w, g.kernel);
    let plan = PhasePlan::new(&g);
    let mut buf = vec![T::zero(); plan.buffer_len()];
    let mut wide = vec![T::zero(); plan.wide_len()];
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let x = input.data();
    let kd = kernel.data();
    let y = out.data_mut();
    for plane in 0..b * c {
        let ch = plane % c;
        plan.pack(&x[plane * h * w..(plane + 1) * h * w], &mut buf);
        wide.fill(T::zero());
        for ki in 0..kk {
            for kj in 0..kk {
                let off = plan.tap_offset(ki, kj);
                axpy(&mut wide, &buf[off..], kd[ch * kk * kk + ki * kk + kj]);
            }
        }
        plan.narrow(&wide, &mut y[plane * oh * ow..(plane + 1) * oh * ow]);
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let ([b, c, h, w], g) = depthwise_dims("depthwise_conv2d_backward", input, kernel, stride, padding)?;
    let (oh, ow, kk) = (g.out_h, g.out_w, g.kernel);
    if grad_out.shape() != [b, c, oh, ow] {
        return shape_err("depthwise_conv2d_backward", format!("output gradient {:?}", grad_out.shape()));
    }
    let plan = PhasePlan::new(&g);
    let mut buf = vec![T::zero(); plan.buffer_len()];
    let mut dbuf = vec![T::zero(); plan.buffer_len()];
    let mut wide = vec![T::zero(); plan.wide_len()];
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut dk = need_kernel.then(|| Tensor::zeros(kernel.shape()));
    let x = input.data();
    let kd = kernel.data();
    let dy = grad_out.data();
    let n = plan.wide_len();
    for plane in 0..b * c {
        let ch = plane % c;
        plan.widen(&dy[plane * oh * ow..(plane + 1) * oh * ow], &mut wide);
        if let Some(dk) = dk.as_mut() {
            plan.pack(&x[plane * h * w..(plane + 1) * h * w], &mut buf);
            let dkp = &mut dk.data_mut()[ch * kk * kk..(ch + 1) * kk * kk];
            for ki in 0..kk {
                for kj in 0..kk {
                    let off = plan.tap_offset(ki, kj);
                    dkp[ki * kk + kj] = dkp[ki * kk + kj] + fast_dot(&wide, &buf[off..off + n]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dbuf.fill(T::zero());
            for ki in 0..kk {
                for kj in 0..kk {
                    let off = plan.tap_offset(ki, kj);
                    axpy(&mut dbuf[off..off + n], &wide, kd[ch * kk * kk + ki * kk + kj]);
                }
            }
            plan.unpack_add(&dbuf, &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w]);
        }
    }
    Ok((dx, dk))
}

fn transpose_dims<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<([usize; 4], usize, ConvGeometry)> {
    let [b, cin, h, w] = input.dims4(op)?;
    let [kcin, cout, kh, kw] = kernel.dims4(op)?;
    if kcin != cin || kh != kw {
        return shape_err(
            op,
            format!("kernel {:?} does not fit {cin} input channels (expected [{cin}, Cout, k, k])", kernel.shape()),
        );
    }
    if !(stride == 1 || stride == 2) {
        return arg_err(op, format!("stride must be 1 or 2, got {stride}"));
    }
    if kh != 2 * stride {
        return arg_err(op, format!("kernel size must be 2*stride = {}, got {kh}", 2 * stride));
    }
    // The adjoint convolution maps [Cout, s*H, s*W] down to [H, W].
    let g = ConvGeometry {
        channels: cout,
        in_h: h * stride,
        in_w: w * stride,
        kernel: kh,
        stride,
        pad: (kh - stride) / 2,
        out_h: h,
        out_w: w,
    };
    Ok(([b, cin, h, w], cout, g))
}

pub fn conv2d_transpose<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let ([b, cin, h, w], cout, g) = transpose_dims("conv2d_transpose", input, kernel, stride)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_len = cout * g.in_h * g.in_w;
    let mut out = Tensor::zeros(&[b, cout, g.in_h, g.in_w]);
    let mut col = vec![T::zero(); rows * cols];
    for bi in 0..b {
        let xb = &input.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        // col[rows, HW] = K^T[rows, Cin] * x[Cin, HW]
        T::gemm(
            rows,
            cin,
            cols,
            T::one(),
            kernel.data(),
            1,
            rows as isize,
            xb,
            cols as isize,
            1,
            T::zero(),
            &mut col,
            cols as isize,
            1,
        );
        col2im(&col, &g, &mut out.data_mut()[bi * out_len..(bi + 1) * out_len]);
    }
    Ok(out)
}

pub fn conv2d_transpose_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let ([b, cin, h, w], cout, g) = transpose_dims("conv2d_transpose_backward", input, kernel, stride)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    if grad_out.shape() != [b, cout, g.in_h, g.in_w] {
        return shape_err("conv2d_transpose_backward", format!("output gradient {:?}", grad_out.shape()));
    }
    let out_len = cout * g.in_h * g.in_w;
    let in_len = cin * h * w;
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut dk = need_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut col = vec![T::zero(); rows * cols];
    for bi in 0..b {
        im2col(&grad_out.data()[bi * out_len..(bi + 1) * out_len], &g, &mut col);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * in_len..(bi + 1) * in_len];
            T::gemm(
                cin,
                rows,
                cols,
                T::one(),
                kernel.data(),
                rows as isize,
                1,
                &col,
                cols as isize,
                1,
                T::zero(),
                dxb,
                cols as isize,
                1,
            );
        }
        if let Some(dk) = dk.as_mut() {
            let xb = &input.data()[bi * in_len..(bi + 1) * in_len];
            T::gemm(
                cin,
                cols,
                rows,
                T::one(),
                xb,
                cols as isize,
                1,
                &col,
                1,
                cols as isize,
                T::one(),
                dk.data_mut(),
                rows as isize,
                1,
            );
        }
    }
    Ok((dx, dk))
}

/// Cached quantities of a batch-norm forward pass needed by its backward.
#[derive(Debug, Clone)]
pub struct BnCache<T: Element> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// `true` when the statistics came from the batch itself.
    pub batch_stats: bool,
}

/// Per-channel mean and biased variance over the `B*H*W` positions.
pub fn channel_moments<T: Element>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [b, c, h, w] = x.dims4("batch_norm")?;
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (i, p) in x.data().chunks_exact(hw).enumerate() {
        mean[i % c] = mean[i % c] + fast_sum(p);
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    for (i, p) in x.data().chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        let mut acc = [T::zero(); 4];
        for (j, &v) in p.iter().enumerate() {
            acc[j % 4] = acc[j % 4] + (v - m) * (v - m);
        }
        var[i % c] = var[i % c] + (acc[0] + acc[2]) + (acc[1] + acc[3]);
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    Ok((mean, var))
}

/// `gamma * (x - mean) * inv_std + beta`, channel-wise.
pub fn batch_norm_apply<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [b, c, h, w] = x.dims4("batch_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err("batch_norm", format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()));
    }
    let hw = h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    debug_assert_eq!(x.len(), b * c * hw);
    let mut normalized = x.clone();
    let mut y = Tensor::zeros(x.shape());
    for (i, (xh, yv)) in normalized.data_mut().chunks_exact_mut(hw).zip(y.data_mut().chunks_exact_mut(hw)).enumerate() {
        let ch = i % c;
        let (g, be, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
        for (a, o) in xh.iter_mut().zip(yv) {
            *a = (*a - m) * is;
            *o = g * *a + be;
        }
    }
    Ok((y, BnCache { normalized, inv_std, batch_stats: false }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Element>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = grad_out.dims4("batch_norm_backward")?;
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let xh = cache.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    debug_assert_eq!(dy.len(), b * c * hw);
    for (i, (d, x)) in dy.chunks_exact(hw).zip(xh.chunks_exact(hw)).enumerate() {
        let ch = i % c;
        dbeta.data_mut()[ch] = dbeta.data()[ch] + fast_sum(d);
        dgamma.data_mut()[ch] = dgamma.data()[ch] + fast_dot(d, x);
    }
    let dx = need_input.then(|| {
        let mut dx = grad_out.clone();
        for (i, (d, x)) in dx.data_mut().chunks_exact_mut(hw).zip(xh.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (sb, sg) = (dbeta.data()[ch] / n, dgamma.data()[ch] / n);
                for (v, &xv) in d.iter_mut().zip(x) {
                    *v = scale * (*v - sb - xv * sg);
                }
            } else {
                d.iter_mut().for_each(|v| *v = scale * *v);
            }
        }
        dx
    });
    Ok((dx, dgamma, dbeta))
}
