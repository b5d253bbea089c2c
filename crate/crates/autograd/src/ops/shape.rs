use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::{numel, strides, Tensor};

/// Index value that makes [`Graph::gather`] emit a zero.
pub const GATHER_ZERO: usize = usize::MAX;

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshaped(shape);
        self.push(y, Op::Reshape(x), &[x])
    }

    /// General axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x);
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let y = Tensor::new(&shape, data);
        self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, or 0 where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), idx.len(), "gather index count vs output shape");
        let xd = self.value(x).data();
        let out: Vec<f64> = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xd[i] })
            .collect();
        let y = Tensor::new(shape, out);
        self.push(y, Op::Gather { x, idx }, &[x])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
            total_axis += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let a = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let y = Tensor::new(&shape, out);
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }
}

/// Row-major permutation of a flat buffer.
pub fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    assert_eq!(perm.len(), nd, "permutation rank");
    let mut seen = vec![false; nd];
    for &p in perm {
        assert!(p < nd && !seen[p], "invalid permutation {perm:?}");
        seen[p] = true;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    if nd == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    let last = nd - 1;
    let inner_n = out_shape[last];
    let inner_s = src_strides[last];
    let mut counter = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        if inner_s == 1 {
            out.extend_from_slice(&data[base..base + inner_n]);
        } else {
            for j in 0..inner_n {
                out.push(data[base + j * inner_s]);
            }
        }
        // advance the outer counters
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            counter[d] += 1;
            base += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn backward_permute(
    g: &Graph,
    x: Var,
    perm: &[usize],
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    if !acc.wants(x) {
        return;
    }
    let _ = g;
    let inv = inverse_permutation(perm);
    let (data, shape) = permute_data(gy.data(), gy.shape(), &inv);
    acc.add(x, &Tensor::new(&shape, data));
}

pub(crate) fn backward_gather(x: Var, idx: &[usize], gy: &Tensor, acc: &mut Accumulator<'_>) {
    if let Some(slot) = acc.slot(x) {
        let sd = slot.data_mut();
        for (&i, gv) in idx.iter().zip(gy.data()) {
            if i != GATHER_ZERO {
                sd[i] += gv;
            }
        }
    }
}

pub(crate) fn backward_concat(
    g: &Graph,
    parts: &[Var],
    axis: usize,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let shape = gy.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut start = 0;
    for &p in parts {
        let a = g.shape(p)[axis];
        if let Some(slot) = acc.slot(p) {
            let sd = slot.data_mut();
            for o in 0..outer {
                let src = &gy.data()[(o * total + start) * inner..(o * total + start + a) * inner];
                for (s, v) in sd[o * a * inner..(o + 1) * a * inner].iter_mut().zip(src) {
                    *s += v;
                }
            }
        }
        start += a;
    }
}
