use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Records per-row losses whose gradient was computed alongside the value.
    ///
    /// `x` is `[B, ..]`, `losses` has one entry per row, and `grad` holds
    /// `d losses[b] / d x[b, ..]` with the shape of `x`.
    pub fn row_loss(&mut self, x: Var, losses: Vec<f64>, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "row_loss gradient shape");
        assert_eq!(self.shape(x)[0], losses.len(), "one loss per row");
        let n = losses.len();
        self.push(Tensor::new(&[n], losses), Op::RowLoss { x, grad }, &[x])
    }

    /// Cross-entropy of each row of `logits: [N, V]` against `targets`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "cross_entropy_rows expects [N, V]");
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), n, "one target per row");
        let mut losses = Vec::with_capacity(n);
        let mut grad = vec![0.0; n * v];
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v, "target {t} outside {v} classes");
            let row = &lv.data()[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            losses.push(lse - row[t]);
            let gr = &mut grad[r * v..(r + 1) * v];
            for (gv, x) in gr.iter_mut().zip(row) {
                *gv = (x - lse).exp();
            }
            gr[t] -= 1.0;
        }
        self.row_loss(logits, losses, Tensor::new(&[n, v], grad))
    }
}

pub(crate) fn backward_row_loss(x: Var, grad: &Tensor, gy: &Tensor, acc: &mut Accumulator<'_>) {
    if let Some(slot) = acc.slot(x) {
        let rows = gy.numel();
        let inner = grad.numel() / rows.max(1);
        for ((s, gr), w) in slot
            .data_mut()
            .chunks_mut(inner.max(1))
            .zip(grad.data().chunks(inner.max(1)))
            .zip(gy.data())
        {
            for (sv, gv) in s.iter_mut().zip(gr) {
                *sv += w * gv;
            }
        }
    }
}
