//! Matrix products with optional transposes and a broadcast batch axis.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major matrix view `rows x cols`, read transposed when `t` is set.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub t: bool,
}

impl<T> MatView<'_, T> {
    fn op_rows(&self) -> usize {
        if self.t {
            self.cols
        } else {
            self.rows
        }
    }
    fn op_cols(&self) -> usize {
        if self.t {
            self.rows
        } else {
            self.cols
        }
    }
    fn strides(&self) -> (isize, isize) {
        if self.t {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = op(a) * op(b) + beta * out`, `out` row-major `m x n`.
pub(crate) fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, n) = (a.op_rows(), a.op_cols(), b.op_cols());
    assert_eq!(k, b.op_rows(), "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views were bounds-checked above and `out` is a distinct
    // mutable slice of exactly m*n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    match t.shape() {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        s => panic!("matmul operand must be rank 2 or 3, got {s:?}"),
    }
}

/// Batched `op(a) * op(b)`. A rank-2 operand is shared by every batch item.
/// With `reduce`, batch results are summed into a single rank-2 matrix.
pub(crate) fn matmul_tensors<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool, reduce: bool) -> Tensor<T> {
    let (ba, ra, ca) = dims(a);
    let (bb, rb, cb) = dims(b);
    let batched = a.rank() == 3 || b.rank() == 3;
    let batch = if a.rank() == 3 && b.rank() == 3 {
        assert_eq!(ba, bb, "matmul batch mismatch {:?} vs {:?}", a.shape(), b.shape());
        ba
    } else {
        ba.max(bb)
    };
    fn view<T: Scalar>(t: &Tensor<T>, i: usize, rows: usize, cols: usize, tr: bool, rank3: bool) -> MatView<'_, T> {
        let off = if rank3 { i * rows * cols } else { 0 };
        MatView { data: &t.data()[off..off + rows * cols], rows, cols, t: tr }
    }
    let probe_a = view(a, 0, ra, ca, ta, false);
    let probe_b = view(b, 0, rb, cb, tb, false);
    let (m, n) = (probe_a.op_rows(), probe_b.op_cols());
    assert_eq!(
        probe_a.op_cols(),
        probe_b.op_rows(),
        "matmul inner mismatch {:?}{} x {:?}{}",
        a.shape(),
        if ta { "^T" } else { "" },
        b.shape(),
        if tb { "^T" } else { "" }
    );
    if reduce || !batched {
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..batch {
            let beta = if i == 0 { T::zero() } else { T::one() };
            gemm(view(a, i, ra, ca, ta, a.rank() == 3), view(b, i, rb, cb, tb, b.rank() == 3), beta, out.data_mut());
        }
        out
    } else {
        let mut out = Tensor::zeros(&[batch, m, n]);
        for (i, chunk) in out.data_mut().chunks_mut(m * n).enumerate() {
            gemm(view(a, i, ra, ca, ta, a.rank() == 3), view(b, i, rb, cb, tb, b.rank() == 3), T::zero(), chunk);
        }
        out
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` where `op` transposes the last two axes when
    /// the corresponding flag is set. Rank-2 operands broadcast over the
    /// batch axis of a rank-3 partner.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let out = matmul_tensors(&a, ta, &b, tb, false);
        let reduce_a = a.rank() == 2 && b.rank() == 3;
        let reduce_b = b.rank() == 2 && a.rank() == 3;
        self.graph().push(
            out,
            &[self, other],
            Box::new(move |gc, needs| {
                let ga = needs[0].then(|| {
                    let g = if ta {
                        matmul_tensors(&b, tb, gc, true, reduce_a)
                    } else {
                        matmul_tensors(gc, false, &b, !tb, reduce_a)
                    };
                    g.reshape(a.shape()).expect("grad shape")
                });
                let gb = needs[1].then(|| {
                    let g = if tb {
                        matmul_tensors(gc, true, &a, ta, reduce_b)
                    } else {
                        matmul_tensors(&a, !ta, gc, false, reduce_b)
                    };
                    g.reshape(b.shape()).expect("grad shape")
                });
                vec![ga, gb]
            }),
        )
    }
}
