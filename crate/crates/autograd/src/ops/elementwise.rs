use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().map(|x| f(*x)).collect())
}

fn suffix_len(x: &[usize], y: &[usize]) -> usize {
    assert!(
        y.len() <= x.len() && x[x.len() - y.len()..] == *y,
        "shape {y:?} is not a suffix of {x:?}"
    );
    y.iter().product()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let n = suffix_len(xv.shape(), self.value(b).shape());
        let bv = self.value(b).data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, bb) in chunk.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.push(out, Op::AddSuffix(x, b), &[x, b])
    }

    /// `x * s` where `s`'s shape equals the trailing dimensions of `x`.
    pub fn mul_suffix(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let n = suffix_len(xv.shape(), self.value(s).shape());
        let sv = self.value(s).data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, ss) in chunk.iter_mut().zip(sv) {
                *o *= ss;
            }
        }
        self.push(out, Op::MulSuffix(x, s), &[x, s])
    }

    /// Per-channel bias on axis 1 of an `[N, C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape());
        let bv = self.value(b);
        assert_eq!(bv.shape(), [c], "channel bias shape");
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                let bias = bv.data()[ch];
                for v in &mut data[off..off + inner] {
                    *v += bias;
                }
            }
        }
        self.push(out, Op::AddChannel(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = map(self.value(x), |v| v * c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    /// Multiplies each slice along axis 0 by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape()[0], factors.len(), "one factor per leading index");
        let inner = xv.numel() / factors.len().max(1);
        let mut out = xv.clone();
        for (chunk, f) in out.data_mut().chunks_mut(inner.max(1)).zip(&factors) {
            for v in chunk {
                *v *= f;
            }
        }
        self.push(out, Op::ScaleRows(x, factors), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = map(self.value(x), |v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = map(self.value(x), |v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = map(self.value(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
        });
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }
}

pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn backward_mul(g: &Graph, a: Var, b: Var, gy: &Tensor, acc: &mut Accumulator<'_>) {
    if acc.wants(a) {
        let t = zip_map(gy, g.value(b), |x, y| x * y);
        acc.add(a, &t);
    }
    if acc.wants(b) {
        let t = zip_map(gy, g.value(a), |x, y| x * y);
        acc.add(b, &t);
    }
}

pub(crate) fn backward_add_suffix(x: Var, b: Var, gy: &Tensor, acc: &mut Accumulator<'_>) {
    acc.add(x, gy);
    if let Some(slot) = acc.slot(b) {
        let n = slot.numel();
        let sd = slot.data_mut();
        for chunk in gy.data().chunks(n) {
            for (s, v) in sd.iter_mut().zip(chunk) {
                *s += v;
            }
        }
    }
}

pub(crate) fn backward_mul_suffix(
    g: &Graph,
    x: Var,
    s: Var,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let sv = g.value(s).data();
    let n = sv.len();
    if acc.wants(x) {
        let mut t = gy.clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (v, ss) in chunk.iter_mut().zip(sv) {
                *v *= ss;
            }
        }
        acc.add(x, &t);
    }
    if let Some(slot) = acc.slot(s) {
        let xd = g.value(x).data();
        let sd = slot.data_mut();
        for (gc, xc) in gy.data().chunks(n).zip(xd.chunks(n)) {
            for ((acc_v, gv), xv) in sd.iter_mut().zip(gc).zip(xc) {
                *acc_v += gv * xv;
            }
        }
    }
}

pub(crate) fn backward_add_channel(x: Var, b: Var, gy: &Tensor, acc: &mut Accumulator<'_>) {
    acc.add(x, gy);
    let (n, c, inner) = channel_layout(gy.shape());
    if let Some(slot) = acc.slot(b) {
        let sd = slot.data_mut();
        for i in 0..n {
            for (ch, s) in sd.iter_mut().enumerate().take(c) {
                let off = (i * c + ch) * inner;
                *s += gy.data()[off..off + inner].iter().sum::<f64>();
            }
        }
    }
}

pub(crate) fn backward_scale_rows(x: Var, f: &[f64], gy: &Tensor, acc: &mut Accumulator<'_>) {
    if let Some(slot) = acc.slot(x) {
        let inner = (gy.numel() / f.len().max(1)).max(1);
        for ((sc, gc), fv) in slot
            .data_mut()
            .chunks_mut(inner)
            .zip(gy.data().chunks(inner))
            .zip(f)
        {
            for (s, gv) in sc.iter_mut().zip(gc) {
                *s += gv * fv;
            }
        }
    }
}

pub(crate) fn backward_relu(x: Var, y: &Tensor, gy: &Tensor, acc: &mut Accumulator<'_>) {
    if let Some(slot) = acc.slot(x) {
        for ((s, gv), yv) in slot.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
            if *yv > 0.0 {
                *s += gv;
            }
        }
    }
}

pub(crate) fn backward_silu(g: &Graph, x: Var, gy: &Tensor, acc: &mut Accumulator<'_>) {
    let xv = g.value(x).data();
    if let Some(slot) = acc.slot(x) {
        for ((s, gv), v) in slot.data_mut().iter_mut().zip(gy.data()).zip(xv) {
            let sg = sigmoid(*v);
            *s += gv * sg * (1.0 + v * (1.0 - sg));
        }
    }
}

pub(crate) fn backward_gelu(g: &Graph, x: Var, gy: &Tensor, acc: &mut Accumulator<'_>) {
    let xv = g.value(x).data();
    if let Some(slot) = acc.slot(x) {
        for ((s, gv), v) in slot.data_mut().iter_mut().zip(gy.data()).zip(xv) {
            let inner = GELU_C * (v + GELU_K * v * v * v);
            let t = inner.tanh();
            let dinner = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
            let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
            *s += gv * d;
        }
    }
}
