use crate::gemm::{gemm, MatRef};
use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::Tensor;

impl Graph {
    /// `x[.., K] · w[K, N] (+ b[N])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "linear weight must be [in, out]");
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), k, "linear: input dim {} vs weight {:?}", xv.last_dim(), wv.shape());
        let m = xv.numel() / k.max(1);
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().expect("linear input needs a feature axis") = n;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "linear bias length");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rm(xv.data(), k),
            MatRef::rm(wv.data(), n),
            1.0,
            &mut out,
        );
        let y = Tensor::new(&out_shape, out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(y, Op::Linear { x, w, b }, &parents)
    }

    /// Batched product over axis 0 of 3-D operands, with optional transposes
    /// of the two trailing axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.ndim() == 3 && bv.ndim() == 3, "bmm expects 3-D operands");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        let batch = av.shape()[0];
        let (m, k) = op_dims(av.shape(), trans_a);
        let (k2, n) = op_dims(bv.shape(), trans_b);
        assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb) = (m * k, k * n);
        for i in 0..batch {
            let ai = &av.data()[i * sa..(i + 1) * sa];
            let bi = &bv.data()[i * sb..(i + 1) * sb];
            gemm(
                m,
                k,
                n,
                1.0,
                view(ai, trans_a, m, k),
                view(bi, trans_b, k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let y = Tensor::new(&[batch, m, n], out);
        self.push(
            y,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }
}

/// Logical `(rows, cols)` of a stored matrix after an optional transpose.
fn op_dims(shape: &[usize], trans: bool) -> (usize, usize) {
    if trans {
        (shape[2], shape[1])
    } else {
        (shape[1], shape[2])
    }
}

/// View of a stored matrix as its logical `rows × cols` operand.
fn view(data: &[f64], trans: bool, rows: usize, cols: usize) -> MatRef<'_> {
    if trans {
        // stored as cols × rows
        let _ = cols;
        MatRef::tr(data, rows)
    } else {
        MatRef::rm(data, cols)
    }
}

pub(crate) fn backward_linear(
    g: &Graph,
    x: Var,
    w: Var,
    b: Option<Var>,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let xv = g.value(x);
    let wv = g.value(w);
    let (k, n) = (wv.shape()[0], wv.shape()[1]);
    let m = xv.numel() / k.max(1);
    if let Some(slot) = acc.slot(x) {
        gemm(
            m,
            n,
            k,
            1.0,
            MatRef::rm(gy.data(), n),
            MatRef::tr(wv.data(), n),
            1.0,
            slot.data_mut(),
        );
    }
    if let Some(slot) = acc.slot(w) {
        gemm(
            k,
            m,
            n,
            1.0,
            MatRef::tr(xv.data(), k),
            MatRef::rm(gy.data(), n),
            1.0,
            slot.data_mut(),
        );
    }
    if let Some(b) = b {
        if let Some(slot) = acc.slot(b) {
            let sd = slot.data_mut();
            for row in gy.data().chunks(n) {
                for (s, v) in sd.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
}

pub(crate) fn backward_bmm(
    g: &Graph,
    a: Var,
    b: Var,
    trans_a: bool,
    trans_b: bool,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let av = g.value(a);
    let bv = g.value(b);
    let batch = av.shape()[0];
    let (m, k) = op_dims(av.shape(), trans_a);
    let (_, n) = op_dims(bv.shape(), trans_b);
    let (sa, sb, sy) = (m * k, k * n, m * n);
    if let Some(slot) = acc.slot(a) {
        let sd = slot.data_mut();
        for i in 0..batch {
            let bi = &bv.data()[i * sb..(i + 1) * sb];
            let gi = &gy.data()[i * sy..(i + 1) * sy];
            let out = &mut sd[i * sa..(i + 1) * sa];
            if trans_a {
                // dA (stored k×m) = op(B)[k×n] · dY^T[n×m]
                gemm(k, n, m, 1.0, view(bi, trans_b, k, n), MatRef::tr(gi, n), 1.0, out);
            } else {
                // dA[m×k] = dY[m×n] · op(B)^T[n×k]
                let bt = if trans_b {
                    MatRef::rm(bi, k)
                } else {
                    MatRef::tr(bi, n)
                };
                gemm(m, n, k, 1.0, MatRef::rm(gi, n), bt, 1.0, out);
            }
        }
    }
    if let Some(slot) = acc.slot(b) {
        let sd = slot.data_mut();
        for i in 0..batch {
            let ai = &av.data()[i * sa..(i + 1) * sa];
            let gi = &gy.data()[i * sy..(i + 1) * sy];
            let out = &mut sd[i * sb..(i + 1) * sb];
            if trans_b {
                // dB (stored n×k) = dY^T[n×m] · op(A)[m×k]
                gemm(n, m, k, 1.0, MatRef::tr(gi, n), view(ai, trans_a, m, k), 1.0, out);
            } else {
                // dB[k×n] = op(A)^T[k×m] · dY[m×n]
                let at = if trans_a {
                    MatRef::rm(ai, m)
                } else {
                    MatRef::tr(ai, k)
                };
                gemm(k, m, n, 1.0, at, MatRef::rm(gi, n), 1.0, out);
            }
        }
    }
}

pub(crate) fn backward_softmax(x: Var, y: &Tensor, gy: &Tensor, acc: &mut Accumulator<'_>) {
    let n = y.last_dim();
    if let Some(slot) = acc.slot(x) {
        for ((s, yr), gr) in slot
            .data_mut()
            .chunks_mut(n)
            .zip(y.data().chunks(n))
            .zip(gy.data().chunks(n))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((sv, yv), gv) in s.iter_mut().zip(yr).zip(gr) {
                *sv += yv * (gv - dot);
            }
        }
    }
}
