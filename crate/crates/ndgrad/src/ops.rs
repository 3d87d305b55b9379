use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::push;
use crate::tensor::{numel, Tensor};

type Buf = Rc<Vec<f64>>;

/// Recorded operation with whatever it needs for its vector-Jacobian product.
pub(crate) enum Op {
    Leaf,
    Add { lhs_bcast: bool, rhs_bcast: bool },
    Sub { lhs_bcast: bool, rhs_bcast: bool },
    Mul { lhs: Buf, rhs: Buf, lhs_bcast: bool, rhs_bcast: bool },
    Scale(f64),
    Shift,
    MatMul { lhs: Buf, lhs_shape: Vec<usize>, rhs: Buf, rhs_shape: Vec<usize> },
    Tanh { out: Buf },
    Exp { out: Buf },
    Log { input: Buf },
    Square { input: Buf },
    SumAxis { outer: usize, len: usize, inner: usize },
    Concat { outer: usize, widths: Vec<usize> },
    RepeatRows { rows: usize },
    Reshape,
    Clamp { input: Buf, lo: f64, hi: f64 },
    Minimum { lhs: Buf, rhs: Buf },
}

fn reduce_if(bcast: bool, g: &[f64]) -> Vec<f64> {
    if bcast {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

impl Op {
    pub(crate) fn vjp(&self, g: &[f64], out_shape: &[usize], parents: &[Option<usize>]) -> Vec<Option<Vec<f64>>> {
        let want = |i: usize| parents.get(i).copied().flatten().is_some();
        match self {
            Op::Leaf => Vec::new(),
            Op::Add { lhs_bcast, rhs_bcast } => vec![
                want(0).then(|| reduce_if(*lhs_bcast, g)),
                want(1).then(|| reduce_if(*rhs_bcast, g)),
            ],
            Op::Sub { lhs_bcast, rhs_bcast } => vec![
                want(0).then(|| reduce_if(*lhs_bcast, g)),
                want(1).then(|| {
                    let mut r = reduce_if(*rhs_bcast, g);
                    r.iter_mut().for_each(|v| *v = -*v);
                    r
                }),
            ],
            Op::Mul { lhs, rhs, lhs_bcast, rhs_bcast } => {
                let at = |b: &Buf, bc: bool, i: usize| if bc { b[0] } else { b[i] };
                let dl = want(0).then(|| {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(rhs, *rhs_bcast, i)).collect();
                    reduce_if(*lhs_bcast, &full)
                });
                let dr = want(1).then(|| {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(lhs, *lhs_bcast, i)).collect();
                    reduce_if(*rhs_bcast, &full)
                });
                vec![dl, dr]
            }
            Op::Scale(k) => vec![Some(g.iter().map(|v| v * k).collect())],
            Op::Shift | Op::Reshape => vec![Some(g.to_vec())],
            Op::MatMul { lhs, lhs_shape, rhs, rhs_shape } => {
                let (m, k) = (lhs_shape[0], lhs_shape[1]);
                let n = if rhs_shape.len() == 2 { rhs_shape[1] } else { 1 };
                // out = lhs[m,k] * rhs[k,n]; dlhs = g * rhs^T; drhs = lhs^T * g
                let dl = want(0).then(|| {
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let di = &mut d[i * k..(i + 1) * k];
                        for (p, dp) in di.iter_mut().enumerate() {
                            let rp = &rhs[p * n..(p + 1) * n];
                            *dp = gi.iter().zip(rp).map(|(a, b)| a * b).sum();
                        }
                    }
                    d
                });
                let dr = want(1).then(|| {
                    let mut d = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = lhs[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            let dp = &mut d[p * n..(p + 1) * n];
                            dp.iter_mut().zip(gi).for_each(|(d, gv)| *d += a * gv);
                        }
                    }
                    d
                });
                vec![dl, dr]
            }
            Op::Tanh { out } => vec![Some(g.iter().zip(out.iter()).map(|(gi, y)| gi * (1.0 - y * y)).collect())],
            Op::Exp { out } => vec![Some(g.iter().zip(out.iter()).map(|(gi, y)| gi * y).collect())],
            Op::Log { input } => vec![Some(g.iter().zip(input.iter()).map(|(gi, x)| gi / x).collect())],
            Op::Square { input } => vec![Some(g.iter().zip(input.iter()).map(|(gi, x)| 2.0 * gi * x).collect())],
            Op::SumAxis { outer, len, inner } => {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(d)]
            }
            Op::Concat { outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (i, w) in widths.iter().enumerate() {
                    if want(i) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        out.push(Some(d));
                    } else {
                        out.push(None);
                    }
                    offset += w;
                }
                out
            }
            Op::RepeatRows { rows } => {
                let cols = out_shape[1];
                let mut d = vec![0.0; cols];
                for r in 0..*rows {
                    d.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                }
                vec![Some(d)]
            }
            Op::Clamp { input, lo, hi } => vec![Some(
                g.iter()
                    .zip(input.iter())
                    .map(|(gi, x)| if *x >= *lo && *x <= *hi { *gi } else { 0.0 })
                    .collect(),
            )],
            Op::Minimum { lhs, rhs } => {
                // Ties route the gradient to the left operand.
                let pick_l = |i: usize| lhs[i] <= rhs[i];
                vec![
                    want(0).then(|| g.iter().enumerate().map(|(i, gi)| if pick_l(i) { *gi } else { 0.0 }).collect()),
                    want(1).then(|| g.iter().enumerate().map(|(i, gi)| if pick_l(i) { 0.0 } else { *gi }).collect()),
                ]
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape and broadcast flags for an elementwise binary op.
fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, bool, bool)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), false, false));
    }
    if b.is_scalar_like() {
        return Ok((a.shape().to_vec(), false, true));
    }
    if a.is_scalar_like() {
        return Ok((b.shape().to_vec(), true, false));
    }
    Err(mismatch(op, a, b))
}

fn zip_bcast(a: &Tensor, b: &Tensor, n: usize, a_b: bool, b_b: bool, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = if a_b { a.data[0] } else { a.data[i] };
            let y = if b_b { b.data[0] } else { b.data[i] };
            f(x, y)
        })
        .collect()
}

fn unary(t: &Tensor, op: impl FnOnce(Buf) -> Op, f: impl Fn(f64) -> f64, save_out: bool) -> Tensor {
    let out: Vec<f64> = t.data.iter().map(|&x| f(x)).collect();
    let out = Rc::new(out);
    let saved = if save_out { Rc::clone(&out) } else { Rc::clone(&t.data) };
    // Unary ops cannot fail to record: there is exactly one operand.
    let node = push(|| op(saved), &[t], &t.shape).unwrap_or(None);
    Tensor {
        shape: t.shape.clone(),
        data: out,
        node,
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, lb, rb) = binary_shape("add", self, rhs)?;
        let data = zip_bcast(self, rhs, numel(&shape), lb, rb, |x, y| x + y);
        let node = push(|| Op::Add { lhs_bcast: lb, rhs_bcast: rb }, &[self, rhs], &shape)?;
        Ok(Tensor::from_op(data, shape, node))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, lb, rb) = binary_shape("sub", self, rhs)?;
        let data = zip_bcast(self, rhs, numel(&shape), lb, rb, |x, y| x - y);
        let node = push(|| Op::Sub { lhs_bcast: lb, rhs_bcast: rb }, &[self, rhs], &shape)?;
        Ok(Tensor::from_op(data, shape, node))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, lb, rb) = binary_shape("mul", self, rhs)?;
        let data = zip_bcast(self, rhs, numel(&shape), lb, rb, |x, y| x * y);
        let node = push(
            || Op::Mul {
                lhs: Rc::clone(&self.data),
                rhs: Rc::clone(&rhs.data),
                lhs_bcast: lb,
                rhs_bcast: rb,
            },
            &[self, rhs],
            &shape,
        )?;
        Ok(Tensor::from_op(data, shape, node))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        unary(self, |_| Op::Scale(k), |x| x * k, false)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: f64) -> Tensor {
        unary(self, |_| Op::Shift, |x| x + c, false)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, |out| Op::Tanh { out }, f64::tanh, true)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, |out| Op::Exp { out }, f64::exp, true)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, |input| Op::Log { input }, f64::ln, false)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |input| Op::Square { input }, |x| x * x, false)
    }

    /// Elementwise clamp; gradient is zero where the bound is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, |input| Op::Clamp { input, lo, hi }, |x| x.clamp(lo, hi), false)
    }

    pub fn minimum(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("minimum", self, rhs));
        }
        let data = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a.min(*b)).collect();
        let node = push(
            || Op::Minimum {
                lhs: Rc::clone(&self.data),
                rhs: Rc::clone(&rhs.data),
            },
            &[self, rhs],
            &self.shape,
        )?;
        Ok(Tensor::from_op(data, self.shape.clone(), node))
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Rank { op: "matmul", rank: self.rank() });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n, out_shape) = match rhs.shape() {
            [k2, n] => (*k2, *n, vec![m, *n]),
            [k2] => (*k2, 1, vec![m]),
            _ => return Err(Error::Rank { op: "matmul", rank: rhs.rank() }),
        };
        if k != k2 {
            return Err(mismatch("matmul", self, rhs));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let oi = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rp = &rhs.data[p * n..(p + 1) * n];
                oi.iter_mut().zip(rp).for_each(|(o, b)| *o += a * b);
            }
        }
        let node = push(
            || Op::MatMul {
                lhs: Rc::clone(&self.data),
                lhs_shape: self.shape.clone(),
                rhs: Rc::clone(&rhs.data),
                rhs_shape: rhs.shape.clone(),
            },
            &[self, rhs],
            &out_shape,
        )?;
        Ok(Tensor::from_op(out, out_shape, node))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data.iter().sum();
        let node = push(|| Op::SumAxis { outer: 1, len: n, inner: 1 }, &[self], &[]).unwrap_or(None);
        Tensor::from_op(vec![s], Vec::new(), node)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Rank { op: "sum_axis", rank: self.rank() });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let node = push(|| Op::SumAxis { outer, len, inner }, &[self], &shape)?;
        Ok(Tensor::from_op(out, shape, node))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Rank { op: "concat", rank: 0 })?;
        if axis >= first.rank() {
            return Err(Error::Rank { op: "concat", rank: first.rank() });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, p));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis..].iter().product()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let node = push(|| Op::Concat { outer, widths }, parts, &shape)?;
        Ok(Tensor::from_op(out, shape, node))
    }

    /// `[k] -> [rows, k]` by stacking copies.
    pub fn repeat_rows(&self, rows: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Rank { op: "repeat_rows", rank: self.rank() });
        }
        let mut out = Vec::with_capacity(rows * self.numel());
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        let shape = vec![rows, self.numel()];
        let node = push(|| Op::RepeatRows { rows }, &[self], &shape)?;
        Ok(Tensor::from_op(out, shape, node))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let node = push(|| Op::Reshape, &[self], shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::clone(&self.data),
            node,
        })
    }
}
