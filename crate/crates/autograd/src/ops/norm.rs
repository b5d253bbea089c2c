use super::elementwise::channel_layout;
use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

impl Graph {
    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert!(gv.len() == n && bv.len() == n, "layer_norm affine length");
        let rows = xv.numel() / n.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let y = Tensor::new(xv.shape(), out);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Training-mode batch norm over every axis except 1 of `[N, C, ...]`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape());
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let xd = xv.data();
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                s += xd[off..off + inner].iter().sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                q += xd[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for j in off..off + inner {
                    let h = (xd[j] - mean[ch]) * rstd[ch];
                    xhat[j] = h;
                    out[j] = h * gv[ch] + bv[ch];
                }
            }
        }
        let y = Tensor::new(xv.shape(), out);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        );
        (v, BatchStats { mean, var })
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, inner) = channel_layout(xv.shape());
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        let od = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for v in &mut od[off..off + inner] {
                    *v = (*v - mean[ch]) * rstd[ch] * gv[ch] + bv[ch];
                }
            }
        }
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                rstd,
            },
            &[x, gamma, beta],
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_layer_norm(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let n = gy.last_dim();
    let gv = g.value(gamma).data();
    if let Some(slot) = acc.slot(x) {
        let sd = slot.data_mut();
        let mut dxhat = vec![0.0; n];
        for (r, rs) in rstd.iter().enumerate() {
            let gr = &gy.data()[r * n..(r + 1) * n];
            let hr = &xhat[r * n..(r + 1) * n];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..n {
                dxhat[j] = gr[j] * gv[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * hr[j];
            }
            m1 /= n as f64;
            m2 /= n as f64;
            for j in 0..n {
                sd[r * n + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
            }
        }
    }
    if let Some(slot) = acc.slot(gamma) {
        let sd = slot.data_mut();
        for (gr, hr) in gy.data().chunks(n).zip(xhat.chunks(n)) {
            for j in 0..n {
                sd[j] += gr[j] * hr[j];
            }
        }
    }
    if let Some(slot) = acc.slot(beta) {
        let sd = slot.data_mut();
        for gr in gy.data().chunks(n) {
            for (s, v) in sd.iter_mut().zip(gr) {
                *s += v;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batch_norm(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let (n, c, inner) = channel_layout(gy.shape());
    let gv = g.value(gamma).data();
    let gd = gy.data();
    let count = (n * inner) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gh = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * inner;
            for j in off..off + inner {
                sum_g[ch] += gd[j];
                sum_gh[ch] += gd[j] * xhat[j];
            }
        }
    }
    if let Some(slot) = acc.slot(x) {
        let sd = slot.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                let m1 = sum_g[ch] / count;
                let m2 = sum_gh[ch] / count;
                let k = gv[ch] * rstd[ch];
                for j in off..off + inner {
                    sd[j] += k * (gd[j] - m1 - xhat[j] * m2);
                }
            }
        }
    }
    if let Some(slot) = acc.slot(gamma) {
        for (s, v) in slot.data_mut().iter_mut().zip(&sum_gh) {
            *s += v;
        }
    }
    if let Some(slot) = acc.slot(beta) {
        for (s, v) in slot.data_mut().iter_mut().zip(&sum_g) {
            *s += v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_channel_affine(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    rstd: &[f64],
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let (n, c, inner) = channel_layout(gy.shape());
    let gv = g.value(gamma).data();
    let xd = g.value(x).data();
    let gd = gy.data();
    if let Some(slot) = acc.slot(x) {
        let sd = slot.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                let k = gv[ch] * rstd[ch];
                for j in off..off + inner {
                    sd[j] += gd[j] * k;
                }
            }
        }
    }
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * inner;
            for j in off..off + inner {
                dgamma[ch] += gd[j] * (xd[j] - mean[ch]) * rstd[ch];
                dbeta[ch] += gd[j];
            }
        }
    }
    if let Some(slot) = acc.slot(gamma) {
        for (s, v) in slot.data_mut().iter_mut().zip(&dgamma) {
            *s += v;
        }
    }
    if let Some(slot) = acc.slot(beta) {
        for (s, v) in slot.data_mut().iter_mut().zip(&dbeta) {
            *s += v;
        }
    }
}
