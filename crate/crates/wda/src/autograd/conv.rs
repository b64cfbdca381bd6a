//! Convolution kernels: im2col + GEMM for dense 2-d convolution, plus a
//! direct loop for depthwise filters.
//!
//! Layout is `[B, C, H, W]` row-major throughout. 1x1/stride-1 convolutions
//! skip im2col and run a single GEMM per image. Backward passes recompute
//! the column buffer instead of caching it, trading FLOPs for memory.

use super::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Stride and dilation apply to both axes; `pad` is `(rows, cols)` so
/// factorized 1x3 / 3x1 kernels can pad only the axis they span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: (usize, usize),
    pub dilation: usize,
}

impl ConvCfg {
    pub const fn unit() -> Self {
        ConvCfg { stride: 1, pad: (0, 0), dilation: 1 }
    }

    /// 3x3 "same" convolution at dilation `d` keeps H and W when pad = d.
    pub const fn same3(dilation: usize) -> Self {
        ConvCfg { stride: 1, pad: (dilation, dilation), dilation }
    }

    /// Stride-1 "same" padding for an odd `kh` x `kw` kernel.
    pub const fn same(kh: usize, kw: usize) -> Self {
        ConvCfg { stride: 1, pad: ((kh - 1) / 2, (kw - 1) / 2), dilation: 1 }
    }

    fn out_len(&self, input: usize, k: usize, pad: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(input + 2 * pad >= span, "conv: kernel exceeds padded input");
        (input + 2 * pad - span) / self.stride + 1
    }

    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (self.out_len(h, kh, self.pad.0), self.out_len(w, kw, self.pad.1))
    }
}

fn shape4(a: &ArrayD<impl Sized>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor");
    (s[0], s[1], s[2], s[3])
}

/// `cols` is written as a `[Cin*kh*kw, OH*OW]` row-major matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: ConvCfg,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let n = oh * ow;
    debug_assert_eq!(cols.len(), cin * kh * kw * n);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..cin {
        let xb = ci * h * w;
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * n;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + i * cfg.dilation) as isize - cfg.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xb + iy as usize * w;
                    let crow = row + oy * ow;
                    if cfg.stride == 1 {
                        // ix = ox + j*dilation - pad; copy the in-bounds span.
                        let shift = j as isize * cfg.dilation as isize - cfg.pad.1 as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let src = (xrow as isize + ox_lo as isize + shift) as usize;
                            cols[crow + ox_lo..crow + ox_hi]
                                .copy_from_slice(&x[src..src + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * cfg.stride + j * cfg.dilation) as isize - cfg.pad.1 as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[crow + ox] = x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`]: accumulates columns back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: ConvCfg,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let n = oh * ow;
    for ci in 0..cin {
        let xb = ci * h * w;
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * n;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + i * cfg.dilation) as isize - cfg.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xb + iy as usize * w;
                    let crow = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + j * cfg.dilation) as isize - cfg.pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[xrow + ix as usize] = dx[xrow + ix as usize] + cols[crow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// y[b] = W [Cout, Cin*kh*kw] x cols(x[b]) [Cin*kh*kw, OH*OW].
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    cfg: ConvCfg,
    scratch: &mut Vec<T>,
) -> ArrayD<T> {
    let (b, cin, h, wd) = shape4(x);
    let (cout, wcin, kh, kw) = shape4(w);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    let (oh, ow) = cfg.out_hw(h, wd, kh, kw);
    let n = oh * ow;
    let k = cin * kh * kw;
    let xs = x.as_slice().expect("conv2d: x not contiguous");
    let ws = w.as_slice().expect("conv2d: w not contiguous");
    let mut y = vec![T::zero(); b * cout * n];
    let unit_1x1 = kh == 1 && kw == 1 && cfg.stride == 1 && cfg.pad == (0, 0);
    if !unit_1x1 {
        scratch.resize(k * n, T::zero());
    }
    for bi in 0..b {
        let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let yb = &mut y[bi * cout * n..(bi + 1) * cout * n];
        let cols: &[T] = if unit_1x1 {
            xb
        } else {
            im2col(xb, cin, h, wd, kh, kw, cfg, oh, ow, scratch);
            scratch
        };
        unsafe {
            T::gemm(
                cout,
                k,
                n,
                T::one(),
                ws.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::zero(),
                yb.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, cout, oh, ow]), y).unwrap()
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gy: &ArrayD<T>,
    cfg: ConvCfg,
    need_dx: bool,
    need_dw: bool,
    scratch: &mut Vec<T>,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>) {
    let (b, cin, h, wd) = shape4(x);
    let (cout, _, kh, kw) = shape4(w);
    let (oh, ow) = cfg.out_hw(h, wd, kh, kw);
    let n = oh * ow;
    let k = cin * kh * kw;
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = gy.as_slice().unwrap();
    let unit_1x1 = kh == 1 && kw == 1 && cfg.stride == 1 && cfg.pad == (0, 0);
    let mut dx = if need_dx { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); ws.len()] } else { Vec::new() };
    // dcols holds W^T gy for one image outside the 1x1 fast path.
    let mut dcols = if need_dx && !unit_1x1 { vec![T::zero(); k * n] } else { Vec::new() };
    if !unit_1x1 && need_dw {
        scratch.resize(k * n, T::zero());
    }
    for bi in 0..b {
        let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let gb = &gs[bi * cout * n..(bi + 1) * cout * n];
        if need_dw {
            let cols: &[T] = if unit_1x1 {
                xb
            } else {
                im2col(xb, cin, h, wd, kh, kw, cfg, oh, ow, scratch);
                scratch
            };
            // dW [cout,k] += gy_b [cout,n] x cols^T [n,k]
            unsafe {
                T::gemm(
                    cout,
                    n,
                    k,
                    T::one(),
                    gb.as_ptr(),
                    n as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if need_dx {
            if unit_1x1 {
                let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                // dx_b [cin,n] = W^T [cin,cout] x gy_b [cout,n]
                unsafe {
                    T::gemm(
                        cin,
                        cout,
                        n,
                        T::one(),
                        ws.as_ptr(),
                        1,
                        k as isize,
                        gb.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        dxb.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            } else {
                unsafe {
                    T::gemm(
                        k,
                        cout,
                        n,
                        T::one(),
                        ws.as_ptr(),
                        1,
                        k as isize,
                        gb.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                col2im_add(&dcols, cin, h, wd, kh, kw, cfg, oh, ow, dxb);
            }
        }
    }
    (
        need_dx.then(|| ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap()),
        need_dw.then(|| ArrayD::from_shape_vec(w.raw_dim(), dw).unwrap()),
    )
}

/// Depthwise convolution: weight `[C,1,kh,kw]`, each channel filtered alone.
pub fn depthwise_forward<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, cfg: ConvCfg) -> ArrayD<T> {
    let (b, c, h, wd) = shape4(x);
    let (wc, one, kh, kw) = shape4(w);
    assert_eq!(wc, c, "depthwise: channel mismatch");
    assert_eq!(one, 1, "depthwise: weight must be [C,1,kh,kw]");
    let (oh, ow) = cfg.out_hw(h, wd, kh, kw);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut y = vec![T::zero(); b * c * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * wd;
            let yb = (bi * c + ci) * oh * ow;
            let wb = ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..kh {
                        let iy = (oy * cfg.stride + i * cfg.dilation) as isize - cfg.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix =
                                (ox * cfg.stride + j * cfg.dilation) as isize - cfg.pad.1 as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc = acc
                                    + ws[wb + i * kw + j] * xs[xb + iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    y[yb + oy * ow + ox] = acc;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), y).unwrap()
}

/// Gradients of [`depthwise_forward`].
pub fn depthwise_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gy: &ArrayD<T>,
    cfg: ConvCfg,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>) {
    let (b, c, h, wd) = shape4(x);
    let (_, _, kh, kw) = shape4(w);
    let (oh, ow) = cfg.out_hw(h, wd, kh, kw);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = gy.as_slice().unwrap();
    let mut dx = if need_dx { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); ws.len()] } else { Vec::new() };
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * wd;
            let yb = (bi * c + ci) * oh * ow;
            let wb = ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gs[yb + oy * ow + ox];
                    for i in 0..kh {
                        let iy = (oy * cfg.stride + i * cfg.dilation) as isize - cfg.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix =
                                (ox * cfg.stride + j * cfg.dilation) as isize - cfg.pad.1 as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = xb + iy as usize * wd + ix as usize;
                            if need_dx {
                                dx[xi] = dx[xi] + g * ws[wb + i * kw + j];
                            }
                            if need_dw {
                                dw[wb + i * kw + j] = dw[wb + i * kw + j] + g * xs[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap()),
        need_dw.then(|| ArrayD::from_shape_vec(w.raw_dim(), dw).unwrap()),
    )
}
