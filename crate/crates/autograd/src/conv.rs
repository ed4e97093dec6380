//! 2-D convolution through im2col + GEMM.

use crate::array::Array;
use crate::error::{invalid, Result, TensorError};
use crate::var::Var;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output spatial size of a convolution, or an error when the kernel does
/// not fit the padded input.
pub fn conv_output_size(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return invalid(
            "conv2d",
            format!("kernel {kernel} stride {stride} pad {pad} does not fit {h}x{w}"),
        );
    }
    Ok((
        (h + 2 * pad - kernel) / stride + 1,
        (w + 2 * pad - kernel) / stride + 1,
    ))
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in
/// `[0, w)`.
fn valid_cols(g: &ConvGeometry, k: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride).min(ow);
    let hi = if g.w + g.pad <= k {
        0
    } else {
        ((g.w + g.pad - k - 1) / g.stride + 1).min(ow)
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj, ow);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj, ow);
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let vals = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &v) in dst_row[start..].iter_mut().step_by(g.stride).zip(vals) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Var {
    /// Zero-padded 2-D convolution. `weight` is [C_out, C_in, K_h, K_w] and
    /// `bias`, when present, is [C_out].
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.dims4()?;
        let (c_out, wc_in, kh, kw) = weight.dims4()?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        if kh != kw {
            return invalid("conv2d", "only square kernels are supported");
        }
        let (oh, ow) = conv_output_size(h, w, kh, stride, pad)?;
        let geo = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
        };
        let k = geo.patch();
        let p = oh * ow;
        let x = self.value().data();
        let wt = weight.value().data();
        let mut out = vec![0.0; n * c_out * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for b in 0..n {
            let xb = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
            let ob = &mut out[b * c_out * p..(b + 1) * c_out * p];
            if let Some(bias) = bias {
                for (o, &bv) in bias.value().data().iter().enumerate() {
                    ob[o * p..(o + 1) * p].fill(bv);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            let src: &[f64] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut cols);
                &cols
            };
            gemm(c_out, k, p, wt, (k, 1), src, (p, 1), beta, ob);
        }
        let value = Array::from_vec(&[n, c_out, oh, ow], out)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Var::from_op(value, parents, move |g, _, parents| {
            let x = parents[0].value().data();
            let wt = parents[1].value().data();
            let gd = g.data();
            let want_x = parents[0].requires_grad();
            let want_w = parents[1].requires_grad();
            let mut dx = want_x.then(|| vec![0.0; n * c_in * h * w]);
            let mut dw = want_w.then(|| vec![0.0; c_out * k]);
            let mut cols = vec![0.0; k * p];
            for b in 0..n {
                let gb = &gd[b * c_out * p..(b + 1) * c_out * p];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
                    let src: &[f64] = if geo.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &geo, &mut cols);
                        &cols
                    };
                    // dW += dOut * cols^T
                    gemm(c_out, p, k, gb, (p, 1), src, (1, p), 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * c_in * h * w..(b + 1) * c_in * h * w];
                    if geo.is_pointwise() {
                        gemm(k, c_out, p, wt, (1, k), gb, (p, 1), 1.0, dxb);
                    } else {
                        // dcols = W^T * dOut, scattered back onto the input.
                        gemm(k, c_out, p, wt, (1, k), gb, (p, 1), 0.0, &mut cols);
                        col2im(&cols, &geo, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Array::from_vec(&[n, c_in, h, w], d).expect("shape")),
                dw.map(|d| Array::from_vec(&[c_out, c_in, kh, kw], d).expect("shape")),
            ];
            if parents.len() == 3 {
                grads.push(parents[2].requires_grad().then(|| {
                    let mut db = vec![0.0; c_out];
                    for b in 0..n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let s = (b * c_out + o) * p;
                            *acc += gd[s..s + p].iter().sum::<f64>();
                        }
                    }
                    Array::from_vec(&[c_out], db).expect("shape")
                }));
            }
            grads
        }))
    }
}
