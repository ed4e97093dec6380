//! Elementwise, reduction and layout ops.

use crate::array::Array;
use crate::error::{invalid, Result, TensorError};
use crate::var::Var;

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Gradient for input `i` only when it is wanted.
fn want(parents: &[Var], i: usize, f: impl FnOnce() -> Array) -> Option<Array> {
    parents[i].requires_grad().then(f)
}

/// View a shape as [outer, dim(axis), inner].
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Var {
    pub fn add(&self, rhs: &Var) -> Result<Var> {
        same_shape("add", self, rhs)?;
        let value = self.value().zip_map(rhs.value(), |a, b| a + b);
        Ok(Var::from_op(value, vec![self.clone(), rhs.clone()], |g, _, p| {
            vec![want(p, 0, || g.clone()), want(p, 1, || g.clone())]
        }))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        same_shape("sub", self, rhs)?;
        let value = self.value().zip_map(rhs.value(), |a, b| a - b);
        Ok(Var::from_op(value, vec![self.clone(), rhs.clone()], |g, _, p| {
            vec![want(p, 0, || g.clone()), want(p, 1, || g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        same_shape("mul", self, rhs)?;
        let value = self.value().zip_map(rhs.value(), |a, b| a * b);
        Ok(Var::from_op(value, vec![self.clone(), rhs.clone()], |g, _, p| {
            vec![
                want(p, 0, || g.zip_map(p[1].value(), |g, b| g * b)),
                want(p, 1, || g.zip_map(p[0].value(), |g, a| g * a)),
            ]
        }))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        same_shape("div", self, rhs)?;
        let value = self.value().zip_map(rhs.value(), |a, b| a / b);
        Ok(Var::from_op(value, vec![self.clone(), rhs.clone()], |g, out, p| {
            vec![
                want(p, 0, || g.zip_map(p[1].value(), |g, b| g / b)),
                want(p, 1, || {
                    let t = g.zip_map(out, |g, o| g * o);
                    t.zip_map(p[1].value(), |t, b| -t / b)
                }),
            ]
        }))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.value().map(|v| v + s);
        Var::from_op(value, vec![self.clone()], |g, _, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        let value = self.value().map(|v| v * s);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.map(|v| v * s))]
        })
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    /// Multiply by a constant array of the same shape.
    pub fn mul_const(&self, factor: &Array) -> Result<Var> {
        self.mul(&Var::constant(factor.clone()))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value().map(f);
        Var::from_op(value, vec![self.clone()], move |g, out, p| {
            let x = p[0].value().data();
            let data = g
                .data()
                .iter()
                .zip(x)
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Array::from_vec(g.shape(), data).expect("same shape"))]
        })
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqr(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn recip(&self) -> Var {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sum(&self) -> Var {
        let value = Array::scalar(self.value().sum());
        Var::from_op(value, vec![self.clone()], |g, _, p| {
            vec![Some(Array::full(p[0].shape(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// `sum(self * mask) / sum(mask)` for a constant non-negative mask.
    pub fn masked_mean(&self, mask: &Array) -> Result<Var> {
        if mask.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                lhs: self.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let weight = mask.sum();
        if weight <= 0.0 {
            return invalid("masked_mean", "mask selects no elements");
        }
        Ok(self.mul_const(mask)?.sum().mul_scalar(1.0 / weight))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().clone().reshape(shape)?;
        Ok(Var::from_op(value, vec![self.clone()], |g, _, p| {
            vec![Some(g.clone().reshape(p[0].shape()).expect("same size"))]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return invalid(
                "narrow",
                format!("axis {axis} range {start}+{len} out of shape {shape:?}"),
            );
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let value = Array::from_vec(&out_shape, data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut dx = Array::zeros(&shape);
            let d = dx.data_mut();
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                let gb = o * len * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[gb..gb + len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => v.shape().to_vec(),
            None => return invalid("concat", "no inputs"),
        };
        if axis >= first.len() {
            return invalid("concat", format!("axis {axis} out of rank {}", first.len()));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                let src = p.value().data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let value = Array::from_vec(&out_shape, data)?;
        Ok(Var::from_op(value, parts.to_vec(), move |g, _, p| {
            let mut grads: Vec<Vec<f64>> = dims
                .iter()
                .map(|&d| Vec::with_capacity(outer * d * inner))
                .collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (buf, &d) in grads.iter_mut().zip(&dims) {
                    buf.extend_from_slice(&gd[pos..pos + d * inner]);
                    pos += d * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(buf, v)| {
                    v.requires_grad()
                        .then(|| Array::from_vec(v.shape(), buf).expect("split shape"))
                })
                .collect()
        }))
    }

    /// Mean over the channel axis, keeping it: [N,C,H,W] -> [N,1,H,W].
    pub fn mean_channels(&self) -> Result<Var> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let src = self.value().data();
        let mut data = vec![0.0; n * hw];
        for b in 0..n {
            let out = &mut data[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                out.iter_mut().zip(plane).for_each(|(o, &v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= c as f64);
        }
        let value = Array::from_vec(&[n, 1, h, w], data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut dx = vec![0.0; n * c * hw];
            for b in 0..n {
                let gp = &g.data()[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let dp = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    dp.iter_mut().zip(gp).for_each(|(d, &g)| *d = g / c as f64);
                }
            }
            vec![Some(Array::from_vec(&[n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Per-channel spatial mean: [N,C,H,W] -> [N,C].
    pub fn spatial_mean(&self) -> Result<Var> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let data: Vec<f64> = self
            .value()
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Array::from_vec(&[n, c], data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(Array::from_vec(&[n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Repeat a [N,C] var over an h x w grid.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Var> {
        let (n, c) = match self.shape() {
            &[n, c] => (n, c),
            s => {
                return Err(TensorError::Rank {
                    op: "broadcast_spatial",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for &v in self.value().data() {
            data.extend(std::iter::repeat_n(v, hw));
        }
        let value = Array::from_vec(&[n, c, h, w], data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let data = g.data().chunks_exact(hw).map(|p| p.iter().sum()).collect();
            vec![Some(Array::from_vec(&[n, c], data).expect("shape"))]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 {
            return invalid("upsample_nearest", "factor must be positive");
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value().data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    data.push(row[x / factor]);
                }
            }
        }
        let value = Array::from_vec(&[n, c, oh, ow], data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(oh * ow)) {
                for y in 0..oh {
                    for x in 0..ow {
                        plane[(y / factor) * w + x / factor] += gp[y * ow + x];
                    }
                }
            }
            vec![Some(Array::from_vec(&[n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Mean over every k x k window, no padding: output is (H-k+1) x (W-k+1).
    pub fn box_filter(&self, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4()?;
        if k == 0 || k > h || k > w {
            return invalid("box_filter", format!("window {k} does not fit {h}x{w}"));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let norm = 1.0 / (k * k) as f64;
        let src = self.value().data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = &plane[(y + dy) * w + x..(y + dy) * w + x + k];
                        s += row.iter().sum::<f64>();
                    }
                    data.push(s * norm);
                }
            }
        }
        let value = Array::from_vec(&[n, c, oh, ow], data)?;
        Ok(Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(oh * ow)) {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = gp[y * ow + x] * norm;
                        for dy in 0..k {
                            plane[(y + dy) * w + x..(y + dy) * w + x + k]
                                .iter_mut()
                                .for_each(|d| *d += gv);
                        }
                    }
                }
            }
            vec![Some(Array::from_vec(&[n, c, h, w], dx).expect("shape"))]
        }))
    }
}
