use super::{gemm, MatView, Scalar, Tensor};
use crate::error::{ensure, Result};

impl<T: Scalar> Tensor<T> {
    /// (m, k) x (k, n) -> (m, n)
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            self.dims() == 2 && other.dims() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.reshape(&[1, self.shape()[0], self.shape()[1]])?;
        let b = other.reshape(&[1, other.shape()[0], other.shape()[1]])?;
        let c = a.bmm(&b)?;
        let (m, n) = (c.shape()[1], c.shape()[2]);
        c.reshape(&[m, n])
    }

    /// `x @ w^T` for a row batch `x` of shape (m, k) and weight `w` of shape (n, k).
    pub fn matmul_t(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            self.dims() == 2 && w.dims() == 2 && self.shape()[1] == w.shape()[1],
            "matmul_t: incompatible shapes {:?} x {:?}^T",
            self.shape(),
            w.shape()
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = w.shape()[0];
        let mut out = vec![T::zero(); m * n];
        let xv = MatView::row_major(m, k);
        let wv = MatView::row_major(n, k);
        gemm(self.data(), xv, w.data(), wv.t(), &mut out, MatView::row_major(m, n), false);
        Ok(Tensor::op_result(
            "matmul_t",
            out,
            vec![m, n],
            vec![self.clone(), w.clone()],
            move |a| {
                let g = a.grad_output;
                let gv = MatView::row_major(m, n);
                let gx = a.wants(0).then(|| {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(g, gv, a.inputs[1].data(), wv, &mut gx, xv, false);
                    gx
                });
                let gw = a.wants(1).then(|| {
                    let mut gw = vec![T::zero(); n * k];
                    gemm(g, gv.t(), a.inputs[0].data(), xv, &mut gw, wv, false);
                    gw
                });
                vec![gx, gw]
            },
        ))
    }

    /// Batched (b, m, k) x (b, k, n) -> (b, m, n).
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            self.dims() == 3
                && other.dims() == 3
                && self.shape()[0] == other.shape()[0]
                && self.shape()[2] == other.shape()[1],
            "bmm: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (batch, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        let (av, bv, cv) = (
            MatView::row_major(m, k),
            MatView::row_major(k, n),
            MatView::row_major(m, n),
        );
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                &self.data()[i * m * k..(i + 1) * m * k],
                av,
                &other.data()[i * k * n..(i + 1) * k * n],
                bv,
                &mut out[i * m * n..(i + 1) * m * n],
                cv,
                false,
            );
        }
        Ok(Tensor::op_result(
            "bmm",
            out,
            vec![batch, m, n],
            vec![self.clone(), other.clone()],
            move |a| {
                let g = a.grad_output;
                let (x, y) = (a.inputs[0].data(), a.inputs[1].data());
                let ga = a.wants(0).then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            cv,
                            &y[i * k * n..(i + 1) * k * n],
                            bv.t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            av,
                            false,
                        );
                    }
                    ga
                });
                let gb = a.wants(1).then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            &x[i * m * k..(i + 1) * m * k],
                            av.t(),
                            &g[i * m * n..(i + 1) * m * n],
                            cv,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            bv,
                            false,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }
}
