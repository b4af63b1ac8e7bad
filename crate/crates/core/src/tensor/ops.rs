//! Elementwise, reduction and shape operations. No implicit broadcasting:
//! operands of binary ops share a shape, and [`Tensor::expand`] is the only
//! way to repeat values.

use super::{numel_of, strides_of, BackwardArgs, Scalar, Tensor};
use crate::error::{ensure, invalid, Result};

impl<T: Scalar> Tensor<T> {
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::op_result(name, data, self.shape().to_vec(), vec![self.clone()], move |a| {
            let x = a.inputs[0].data();
            let g = a
                .grad_output
                .iter()
                .zip(x)
                .zip(a.output)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    fn binary<F, DA, DB>(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: F,
        da: DA,
        db: DB,
    ) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + Send + Sync + 'static,
        DB: Fn(T, T) -> T + Send + Sync + 'static,
    {
        ensure!(
            self.shape() == other.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::op_result(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |args| {
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                let g = args.grad_output;
                let ga = args.inputs[0].requires_grad().then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| g * da(a, b))
                        .collect()
                });
                let gb = args.inputs[1].requires_grad().then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| g * db(a, b))
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |v| -v, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.unary("add_scalar", move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.unary("mul_scalar", move |v| v * c, move |_, _| c)
    }

    /// Subgradient 0 at 0.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Tensor<T> {
        self.unary(
            "elu",
            |v| if v > T::zero() { v } else { v.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    /// `ln(1 + e^x)` in overflow-free form.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            "softplus",
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    /// Subgradient 0 at 0.
    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |v| v * v, |x, _| x + x)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(
            "clamp",
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::op_result("sum", vec![total], Vec::new(), vec![self.clone()], move |a| {
            vec![Some(vec![a.grad_output[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        ensure!(axis < self.dims(), "sum_axis: axis {axis} out of range for {:?}", self.shape());
        let shape = self.shape();
        let outer = numel_of(&shape[..axis]);
        let len = shape[axis];
        let inner = numel_of(&shape[axis + 1..]);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok(Tensor::op_result("sum_axis", out, out_shape, vec![self.clone()], move |a| {
            let mut g = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = &a.grad_output[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    g.extend_from_slice(src);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Mean over the spatial extents of an NCHW tensor, giving (N, C, 1, 1).
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = super::nchw(self, "global_avg_pool")?;
        let hw = h * w;
        ensure!(hw > 0, "global_avg_pool: empty spatial extent");
        let scale = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        Ok(Tensor::op_result(
            "global_avg_pool",
            out,
            vec![n, c, 1, 1],
            vec![self.clone()],
            move |a| {
                let mut g = Vec::with_capacity(n * c * hw);
                for &go in a.grad_output {
                    g.extend(std::iter::repeat_n(go * scale, hw));
                }
                vec![Some(g)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        ensure!(
            numel_of(shape) == self.numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Ok(Tensor::op_result(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |a| vec![Some(a.grad_output.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.dims();
        ensure!(axes.len() == rank, "permute: {} axes for rank {rank}", axes.len());
        let mut seen = vec![false; rank];
        for &ax in axes {
            ensure!(ax < rank && !seen[ax], "permute: invalid axes {:?}", axes);
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let out_shape_bw = out_shape.clone();
        Ok(Tensor::op_result(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            move |a| vec![Some(permute_data(a.grad_output, &out_shape_bw, &inverse))],
        ))
    }

    /// Repeats size-1 axes up to `shape`. Ranks must match.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let src = self.shape().to_vec();
        ensure!(
            src.len() == shape.len(),
            "expand: rank mismatch {:?} -> {:?}",
            src,
            shape
        );
        for (&s, &t) in src.iter().zip(shape) {
            ensure!(s == t || s == 1, "expand: cannot expand {:?} to {:?}", src, shape);
        }
        let out_n = numel_of(shape);
        let src_strides = strides_of(&src);
        // stride 0 along expanded axes
        let eff: Vec<usize> = src
            .iter()
            .zip(&src_strides)
            .zip(shape)
            .map(|((&s, &st), &t)| if s == 1 && t != 1 { 0 } else { st })
            .collect();
        let x = self.data();
        let mut out = Vec::with_capacity(out_n);
        for_each_index(shape, |idx| {
            let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
            out.push(x[off]);
        });
        let in_n = self.numel();
        let shape_bw = shape.to_vec();
        Ok(Tensor::op_result("expand", out, shape.to_vec(), vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); in_n];
            let mut k = 0;
            for_each_index(&shape_bw, |idx| {
                let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
                g[off] += a.grad_output[k];
                k += 1;
            });
            vec![Some(g)]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        ensure!(axis < self.dims(), "narrow: axis {axis} out of range for {:?}", self.shape());
        let shape = self.shape().to_vec();
        ensure!(
            start + len <= shape[axis],
            "narrow: [{start}, {}) exceeds extent {} on axis {axis}",
            start + len,
            shape[axis]
        );
        let outer = numel_of(&shape[..axis]);
        let inner = numel_of(&shape[axis + 1..]);
        let full = shape[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let in_n = self.numel();
        Ok(Tensor::op_result("narrow", out, out_shape, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); in_n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&a.grad_output[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        ensure!(axis < self.dims(), "split: axis {axis} out of range");
        ensure!(
            sizes.iter().sum::<usize>() == self.shape()[axis],
            "split: sizes {:?} do not cover extent {}",
            sizes,
            self.shape()[axis]
        );
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors.first().ok_or_else(|| invalid!("concat: no operands"))?;
        let rank = first.dims();
        ensure!(axis < rank, "concat: axis {axis} out of range for rank {rank}");
        for t in tensors {
            ensure!(t.dims() == rank, "concat: rank mismatch");
            for d in 0..rank {
                ensure!(
                    d == axis || t.shape()[d] == first.shape()[d],
                    "concat: shapes {:?} and {:?} disagree off axis {axis}",
                    first.shape(),
                    t.shape()
                );
            }
        }
        let outer = numel_of(&first.shape()[..axis]);
        let inner = numel_of(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::op_result("concat", out, shape, tensors.to_vec(), move |a| {
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&len| Vec::with_capacity(outer * len * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&a.grad_output[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(a.inputs)
                .map(|(g, t)| t.requires_grad().then_some(g))
                .collect()
        }))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Calls `f` with every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&s| s == 0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut d = shape.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn permute_data<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    if rank == 0 {
        return x.to_vec();
    }
    // innermost axis handled as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = perm_strides[last];
    for_each_index(&out_shape[..last], |idx| {
        let base: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.extend((0..run).map(|k| x[base + k * run_stride]));
    });
    out
}

impl<T: Scalar> BackwardArgs<'_, T> {
    /// Whether input `i` wants a gradient.
    pub fn wants(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn sigmoid_and_elu_at_zero() {
        let z = t(&[0.0], &[1]);
        assert_eq!(z.sigmoid().data(), &[0.5]);
        assert_eq!(z.elu().add_scalar(1.0).data(), &[1.0]);
    }

    #[test]
    fn pool_of_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 4, 5], 2.5);
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.shape(), &[1, 3, 1, 1]);
        assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        assert!(t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0], &[1, 2])).is_err());
        assert!(t(&[1.0, 2.0], &[2]).mul(&t(&[1.0], &[1])).is_err());
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = t(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[2, 2, 3]);
        let b = t(&(0..6).map(|v| -(v as f64)).collect::<Vec<_>>(), &[2, 1, 3]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        let parts = c.split(1, &[2, 1]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3]);
        let b = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn permute_matches_transpose() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let p = a.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn expand_repeats_and_backward_sums() {
        let a = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2, 1]).unwrap();
        let e = a.expand(&[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        e.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 3.0]);
        assert!(a.expand(&[3, 3]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let x = t(&[-800.0, 0.0, 800.0], &[3]);
        let y = x.softplus();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let s = a.sum_axis(0).unwrap();
        assert_eq!(s.shape(), &[1, 3]);
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
        let s = a.sum_axis(1).unwrap();
        assert_eq!(s.data(), &[6.0, 15.0]);
    }
}
