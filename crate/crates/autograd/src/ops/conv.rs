use crate::gemm::{gemm, MatRef};
use crate::graph::{Accumulator, Graph, Op, Var};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution or pooling window on `[N, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    fn new(
        x_shape: &[usize],
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        assert_eq!(x_shape.len(), 4, "expected [N, C, H, W], got {x_shape:?}");
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "window {kernel:?} larger than padded input {h}x{w}"
        );
        Self {
            n,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input coordinate for output position `o` and tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, s: usize, p: usize, size: usize) -> Option<usize> {
        let v = (o * s + t) as isize - p as isize;
        (v >= 0 && (v as usize) < size).then_some(v as usize)
    }
}

fn im2col(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match Conv2dGeom::src(oy, ki, g.sh, g.ph, g.h) {
                        None => d.fill(0.0),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, dv) in d.iter_mut().enumerate() {
                                *dv = match Conv2dGeom::src(ox, kj, g.sw, g.pw, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let Some(iy) = Conv2dGeom::src(oy, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = Conv2dGeom::src(ox, kj, g.sw, g.pw, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Dense 2-D convolution. `w` is `[Cout, Cin, kh, kw]`; no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        let geom = Conv2dGeom::new(self.shape(x), ws[0], (ws[2], ws[3]), stride, pad);
        assert_eq!(ws[1], geom.cin, "conv2d input channels {} vs weight {:?}", geom.cin, ws);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (k, hw) = (geom.k(), geom.ho * geom.wo);
        let mut out = vec![0.0; geom.n * geom.cout * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * hw] };
        for b in 0..geom.n {
            let xb = &xv[b * geom.cin * geom.h * geom.w..(b + 1) * geom.cin * geom.h * geom.w];
            let colv: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            gemm(
                geom.cout,
                k,
                hw,
                1.0,
                MatRef::rm(wv, k),
                MatRef::rm(colv, hw),
                0.0,
                &mut out[b * geom.cout * hw..(b + 1) * geom.cout * hw],
            );
        }
        let y = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out);
        self.push(y, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Per-channel 2-D convolution. `w` is `[C, 1, kh, kw]`; no bias.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let ws = self.shape(w).to_vec();
        let geom = Conv2dGeom::new(self.shape(x), ws[0], (ws[2], ws[3]), stride, pad);
        assert!(
            ws[0] == geom.cin && ws[1] == 1,
            "depthwise weight {:?} for {} channels",
            ws,
            geom.cin
        );
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (hw_in, hw_out) = (geom.h * geom.w, geom.ho * geom.wo);
        let mut out = vec![0.0; geom.n * geom.cin * hw_out];
        for plane_idx in 0..geom.n * geom.cin {
            let c = plane_idx % geom.cin;
            let xp = &xv[plane_idx * hw_in..(plane_idx + 1) * hw_in];
            let op = &mut out[plane_idx * hw_out..(plane_idx + 1) * hw_out];
            let wk = &wv[c * geom.kh * geom.kw..(c + 1) * geom.kh * geom.kw];
            for oy in 0..geom.ho {
                for ki in 0..geom.kh {
                    let Some(iy) = Conv2dGeom::src(oy, ki, geom.sh, geom.ph, geom.h) else {
                        continue;
                    };
                    for ox in 0..geom.wo {
                        let mut s = 0.0;
                        for kj in 0..geom.kw {
                            if let Some(ix) = Conv2dGeom::src(ox, kj, geom.sw, geom.pw, geom.w) {
                                s += wk[ki * geom.kw + kj] * xp[iy * geom.w + ix];
                            }
                        }
                        op[oy * geom.wo + ox] += s;
                    }
                }
            }
        }
        let y = Tensor::new(&[geom.n, geom.cin, geom.ho, geom.wo], out);
        self.push(y, Op::DepthwiseConv2d { x, w, geom }, &[x, w])
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let c = self.shape(x)[1];
        let geom = Conv2dGeom::new(self.shape(x), c, kernel, stride, pad);
        let xv = self.value(x).data();
        let (hw_in, hw_out) = (geom.h * geom.w, geom.ho * geom.wo);
        let mut out = vec![f64::NEG_INFINITY; geom.n * c * hw_out];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..geom.n * c {
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let o = plane * hw_out + oy * geom.wo + ox;
                    for ki in 0..geom.kh {
                        let Some(iy) = Conv2dGeom::src(oy, ki, geom.sh, geom.ph, geom.h) else {
                            continue;
                        };
                        for kj in 0..geom.kw {
                            if let Some(ix) = Conv2dGeom::src(ox, kj, geom.sw, geom.pw, geom.w) {
                                let i = plane * hw_in + iy * geom.w + ix;
                                if xv[i] > out[o] {
                                    out[o] = xv[i];
                                    argmax[o] = i;
                                }
                            }
                        }
                    }
                }
            }
        }
        let y = Tensor::new(&[geom.n, c, geom.ho, geom.wo], out);
        self.push(y, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Depthwise 1-D convolution along axis 1 of `[N, L, C]` with `w: [C, k]`
    /// and `pad` zeros on both ends.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "depthwise_conv1d expects [N, L, C]");
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], c, "depthwise_conv1d weight {:?} for {} channels", ws, c);
        let k = ws[1];
        assert!(l + 2 * pad >= k, "sequence shorter than kernel");
        let lo = l + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * lo * c];
        for b in 0..n {
            for t in 0..lo {
                let orow = &mut out[(b * lo + t) * c..(b * lo + t + 1) * c];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= l {
                        continue;
                    }
                    let irow = &xv[(b * l + src as usize) * c..(b * l + src as usize + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wv[ch * k + j] * irow[ch];
                    }
                }
            }
        }
        let y = Tensor::new(&[n, lo, c], out);
        self.push(y, Op::DepthwiseConv1d { x, w, pad }, &[x, w])
    }
}

pub(crate) fn backward_conv2d(
    g: &Graph,
    x: Var,
    w: Var,
    geom: &Conv2dGeom,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let (k, hw) = (geom.k(), geom.ho * geom.wo);
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * hw;
    let want_w = acc.wants(w);
    let want_x = acc.wants(x);
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * hw] };
    if want_w {
        let mut dw = vec![0.0; wv.len()];
        for b in 0..geom.n {
            let xb = &xv[b * in_sz..(b + 1) * in_sz];
            let colv: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, geom, &mut cols);
                &cols
            };
            gemm(
                geom.cout,
                hw,
                k,
                1.0,
                MatRef::rm(&gy.data()[b * out_sz..(b + 1) * out_sz], hw),
                MatRef::tr(colv, hw),
                1.0,
                &mut dw,
            );
        }
        acc.add(w, &Tensor::new(g.shape(w), dw));
    }
    if want_x {
        let slot = acc.slot(x).expect("x wants grad");
        let sd = slot.data_mut();
        for b in 0..geom.n {
            let gyb = &gy.data()[b * out_sz..(b + 1) * out_sz];
            let dxb = &mut sd[b * in_sz..(b + 1) * in_sz];
            if geom.is_pointwise() {
                gemm(geom.cin, geom.cout, hw, 1.0, MatRef::tr(wv, k), MatRef::rm(gyb, hw), 1.0, dxb);
            } else {
                gemm(k, geom.cout, hw, 1.0, MatRef::tr(wv, k), MatRef::rm(gyb, hw), 0.0, &mut cols);
                col2im_add(&cols, geom, dxb);
            }
        }
    }
}

pub(crate) fn backward_depthwise_conv2d(
    g: &Graph,
    x: Var,
    w: Var,
    geom: &Conv2dGeom,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let (hw_in, hw_out) = (geom.h * geom.w, geom.ho * geom.wo);
    let kk = geom.kh * geom.kw;
    let mut dx = acc.wants(x).then(|| vec![0.0; xv.len()]);
    let mut dw = acc.wants(w).then(|| vec![0.0; wv.len()]);
    for plane in 0..geom.n * geom.cin {
        let c = plane % geom.cin;
        for oy in 0..geom.ho {
            for ki in 0..geom.kh {
                let Some(iy) = Conv2dGeom::src(oy, ki, geom.sh, geom.ph, geom.h) else {
                    continue;
                };
                for ox in 0..geom.wo {
                    let gv = gy.data()[plane * hw_out + oy * geom.wo + ox];
                    for kj in 0..geom.kw {
                        if let Some(ix) = Conv2dGeom::src(ox, kj, geom.sw, geom.pw, geom.w) {
                            let xi = plane * hw_in + iy * geom.w + ix;
                            let wi = c * kk + ki * geom.kw + kj;
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += gv * wv[wi];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += gv * xv[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        acc.add(x, &Tensor::new(g.shape(x), dx));
    }
    if let Some(dw) = dw {
        acc.add(w, &Tensor::new(g.shape(w), dw));
    }
}

pub(crate) fn backward_max_pool2d(x: Var, argmax: &[usize], gy: &Tensor, acc: &mut Accumulator<'_>) {
    if let Some(slot) = acc.slot(x) {
        let sd = slot.data_mut();
        for (&i, gv) in argmax.iter().zip(gy.data()) {
            sd[i] += gv;
        }
    }
}

pub(crate) fn backward_depthwise_conv1d(
    g: &Graph,
    x: Var,
    w: Var,
    pad: usize,
    gy: &Tensor,
    acc: &mut Accumulator<'_>,
) {
    let xs = g.shape(x);
    let (n, l, c) = (xs[0], xs[1], xs[2]);
    let k = g.shape(w)[1];
    let lo = gy.shape()[1];
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let mut dx = acc.wants(x).then(|| vec![0.0; xv.len()]);
    let mut dw = acc.wants(w).then(|| vec![0.0; wv.len()]);
    for b in 0..n {
        for t in 0..lo {
            let grow = &gy.data()[(b * lo + t) * c..(b * lo + t + 1) * c];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= l {
                    continue;
                }
                let base = (b * l + src as usize) * c;
                for ch in 0..c {
                    if let Some(dx) = dx.as_mut() {
                        dx[base + ch] += grow[ch] * wv[ch * k + j];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[ch * k + j] += grow[ch] * xv[base + ch];
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        acc.add(x, &Tensor::new(g.shape(x), dx));
    }
    if let Some(dw) = dw {
        acc.add(w, &Tensor::new(g.shape(w), dw));
    }
}
