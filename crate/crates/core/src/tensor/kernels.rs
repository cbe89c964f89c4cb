//! Raw forward/backward kernels on flat N×C×H×W buffers.
//!
//! Convolutions go through im2col and a strided GEMM. The functions here do
//! no shape validation; the tape layer checks shapes before calling them.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if ph < kh || pw < kw || stride == 0 {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: im2col is the identity.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of im2col columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c`, row-major with optional transposes.
/// `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover m×k, k×n and m×n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution. `weight` is OutC×C×kh×kw.
pub(crate) fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, weight: &[f64], bias: &[f64], out_c: usize) -> Vec<f64> {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_c * ncol;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncol] };
    for b in 0..n {
        let xs = &x[b * in_sz..(b + 1) * in_sz];
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in o.chunks_mut(ncol).enumerate() {
            chunk.fill(bias[oc]);
        }
        let cm: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(out_c, rows, ncol, weight, false, cm, false, 1.0, o);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_c: usize,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_c * ncol;
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(gb) = gb.as_deref_mut() {
            for (oc, chunk) in go.chunks(ncol).enumerate() {
                gb[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xs = &x[b * in_sz..(b + 1) * in_sz];
            let cm: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(out_c, ncol, rows, go, false, cm, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, out_c, ncol, weight, true, go, false, 1.0, gxs);
            } else {
                gemm(rows, out_c, ncol, weight, true, go, false, 0.0, &mut cols);
                col2im(&cols, g, gxs);
            }
        }
    }
}

/// Transposed convolution: `g` describes the equivalent forward convolution
/// from the (larger) output back to the input, so `g.c` is the output channel
/// count and `g.oh × g.ow` the input spatial size. `weight` is InC×OutC×kh×kw.
pub(crate) fn conv_transpose_forward(y: &[f64], n: usize, g: &ConvGeom, weight: &[f64], bias: &[f64], in_c: usize) -> Vec<f64> {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.c * g.h * g.w;
    let in_sz = in_c * ncol;
    let plane = g.h * g.w;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let ys = &y[b * in_sz..(b + 1) * in_sz];
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        for (oc, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.fill(bias[oc]);
        }
        gemm(rows, in_c, ncol, weight, true, ys, false, 0.0, &mut cols);
        col2im(&cols, g, o);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    y: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    in_c: usize,
    gout: &[f64],
    mut gy: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.c * g.h * g.w;
    let in_sz = in_c * ncol;
    let plane = g.h * g.w;
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(gb) = gb.as_deref_mut() {
            for (oc, chunk) in go.chunks(plane).enumerate() {
                gb[oc] += chunk.iter().sum::<f64>();
            }
        }
        if gy.is_none() && gw.is_none() {
            continue;
        }
        im2col(go, g, &mut cols);
        if let Some(gy) = gy.as_deref_mut() {
            gemm(
                in_c,
                rows,
                ncol,
                weight,
                false,
                &cols,
                false,
                1.0,
                &mut gy[b * in_sz..(b + 1) * in_sz],
            );
        }
        if let Some(gw) = gw.as_deref_mut() {
            let ys = &y[b * in_sz..(b + 1) * in_sz];
            gemm(in_c, ncol, rows, ys, false, &cols, true, 1.0, gw);
        }
    }
}

/// Source taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn resize_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let top = r0[s.i0] * (1.0 - s.frac) + r0[s.i1] * s.frac;
                let bot = r1[s.i0] * (1.0 - s.frac) + r1[s.i1] * s.frac;
                dst[oy * ow + ox] = top * (1.0 - t.frac) + bot * t.frac;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(gout: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &gout[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                gi[t.i0 * w + s.i0] += g * (1.0 - t.frac) * (1.0 - s.frac);
                gi[t.i0 * w + s.i1] += g * (1.0 - t.frac) * s.frac;
                gi[t.i1 * w + s.i0] += g * t.frac * (1.0 - s.frac);
                gi[t.i1 * w + s.i1] += g * t.frac * s.frac;
            }
        }
    }
    gx
}

/// Corner indices and weights of a clamp-to-edge bilinear read at `(y, x)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bilinear {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub fy: f64,
    pub fx: f64,
}

impl Bilinear {
    pub fn at(y: f64, x: f64, h: usize, w: usize) -> Self {
        let yf = y.floor();
        let xf = x.floor();
        let clamp = |v: f64, n: usize| -> usize { v.max(0.0).min((n - 1) as f64) as usize };
        Self {
            y0: clamp(yf, h),
            y1: clamp(yf + 1.0, h),
            x0: clamp(xf, w),
            x1: clamp(xf + 1.0, w),
            fy: y - yf,
            fx: x - xf,
        }
    }

    pub fn read(&self, img: &[f64], w: usize) -> f64 {
        let v00 = img[self.y0 * w + self.x0];
        let v01 = img[self.y0 * w + self.x1];
        let v10 = img[self.y1 * w + self.x0];
        let v11 = img[self.y1 * w + self.x1];
        (1.0 - self.fy) * ((1.0 - self.fx) * v00 + self.fx * v01) + self.fy * ((1.0 - self.fx) * v10 + self.fx * v11)
    }

    /// (d/dy, d/dx) of the read.
    pub fn coord_grad(&self, img: &[f64], w: usize) -> (f64, f64) {
        let v00 = img[self.y0 * w + self.x0];
        let v01 = img[self.y0 * w + self.x1];
        let v10 = img[self.y1 * w + self.x0];
        let v11 = img[self.y1 * w + self.x1];
        let dy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }

    pub fn scatter(&self, g: f64, grad: &mut [f64], w: usize) {
        grad[self.y0 * w + self.x0] += g * (1.0 - self.fy) * (1.0 - self.fx);
        grad[self.y0 * w + self.x1] += g * (1.0 - self.fy) * self.fx;
        grad[self.y1 * w + self.x0] += g * self.fy * (1.0 - self.fx);
        grad[self.y1 * w + self.x1] += g * self.fy * self.fx;
    }
}

/// Sum over non-overlapping `s×s` patches.
pub(crate) fn sum_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..][..w];
            let orow = &mut out[(p * oh + y / s) * ow..][..ow];
            for (xx, &v) in row.iter().enumerate() {
                orow[xx / s] += v;
            }
        }
    }
    out
}

pub(crate) fn sum_pool_backward(gout: &[f64], planes: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            let grow = &gout[(p * oh + y / s) * ow..][..ow];
            let row = &mut gx[(p * h + y) * w..][..w];
            for (xx, v) in row.iter_mut().enumerate() {
                *v = grow[xx / s];
            }
        }
    }
    gx
}
