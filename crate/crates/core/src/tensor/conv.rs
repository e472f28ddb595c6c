//! Direct 3D convolution, depthwise causal 1D convolution over sequences,
//! and nearest-neighbor upsampling.
//!
//! The 3D kernel is a direct cross-correlation arranged as row saxpy updates:
//! per output element the accumulation order is bias, then (c, kd, kh, kw)
//! ascending, which is exactly the naive triple-loop order. The arrangement
//! only changes how elements are visited, not the order of additions into
//! any one output value, so results are bit-identical to the naive form.

use super::{BackwardFn, Element, GradSink, Node, Tensor};
use crate::error::{Error, Result};

#[inline]
fn axpy<E: Element>(dst: &mut [E], a: E, src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four independent accumulator chains. Deterministic
/// (fixed association) but not the plain left-to-right order; used only in
/// backward passes, which are verified by finite differences.
#[inline]
fn dot4<E: Element>(a: &[E], b: &[E]) -> E {
    let n = a.len().min(b.len());
    let mut s0 = E::zero();
    let mut s1 = E::zero();
    let mut s2 = E::zero();
    let mut s3 = E::zero();
    let m = n / 4 * 4;
    let mut j = 0;
    while j < m {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    while j < n {
        s += a[j] * b[j];
        j += 1;
    }
    s
}

/// Valid output range for stride 1: iw = ow + kw - p must land in [0, w_in).
/// Returns (ow_lo, ow_hi_exclusive, iw_lo).
#[inline]
fn range_s1(p: usize, kw: usize, w_in: usize, ow_len: usize) -> Option<(usize, usize, usize)> {
    let lo = p.saturating_sub(kw);
    let hi = (w_in + p).saturating_sub(kw).min(ow_len);
    if lo >= hi {
        return None;
    }
    Some((lo, hi, lo + kw - p))
}

/// Valid output range for stride s: iw = ow*s + kw - p in [0, w_in).
/// Returns (ow_lo, ow_hi_inclusive).
#[inline]
fn range_strided(p: usize, kw: usize, w_in: usize, ow_len: usize, s: usize) -> Option<(usize, usize)> {
    let lo = if kw >= p { 0 } else { (p - kw + s - 1) / s };
    let num = w_in - 1 + p;
    if num < kw {
        return None;
    }
    let hi = ((num - kw) / s).min(ow_len - 1);
    if lo > hi {
        return None;
    }
    Some((lo, hi))
}

struct ConvDims {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_dims(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::ShapeMismatch {
            what: "conv3d",
            details: format!("expected 5D input and kernel, got {xs:?} and {ws:?}"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidRange {
            what: "conv3d stride",
            details: "stride must be >= 1".into(),
        });
    }
    let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (k, wc, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if wc != c {
        return Err(Error::ShapeMismatch {
            what: "conv3d channels",
            details: format!("input has {c} channels, kernel expects {wc}"),
        });
    }
    if kd > d + 2 * padding || kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::ShapeMismatch {
            what: "conv3d kernel",
            details: format!(
                "kernel ({kd},{kh},{kw}) larger than padded input ({},{},{})",
                d + 2 * padding,
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    Ok(ConvDims {
        n,
        c,
        d,
        h,
        w,
        k,
        kd,
        kh,
        kw,
        od: (d + 2 * padding - kd) / stride + 1,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
        stride,
        padding,
    })
}

fn conv3d_forward<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, dm: &ConvDims) -> Vec<E> {
    let (s, p) = (dm.stride, dm.padding);
    let mut out = vec![E::zero(); dm.n * dm.k * dm.od * dm.oh * dm.ow];
    let x_cs = dm.d * dm.h * dm.w;
    let w_ks = dm.c * dm.kd * dm.kh * dm.kw;

    for n in 0..dm.n {
        let xn = &x[n * dm.c * x_cs..(n + 1) * dm.c * x_cs];
        for k in 0..dm.k {
            let wk = &w[k * w_ks..(k + 1) * w_ks];
            let b = bias.map_or(E::zero(), |b| b[k]);
            let out_base = ((n * dm.k) + k) * dm.od * dm.oh * dm.ow;
            for od in 0..dm.od {
                for oh in 0..dm.oh {
                    let row_base = out_base + (od * dm.oh + oh) * dm.ow;
                    let out_row = &mut out[row_base..row_base + dm.ow];
                    if bias.is_some() {
                        out_row.fill(b);
                    }
                    for c in 0..dm.c {
                        let xc = &xn[c * x_cs..(c + 1) * x_cs];
                        for kd in 0..dm.kd {
                            let id = (od * s + kd) as isize - p as isize;
                            if id < 0 || id >= dm.d as isize {
                                continue;
                            }
                            for kh in 0..dm.kh {
                                let ih = (oh * s + kh) as isize - p as isize;
                                if ih < 0 || ih >= dm.h as isize {
                                    continue;
                                }
                                let xrow_base = (id as usize * dm.h + ih as usize) * dm.w;
                                let xrow = &xc[xrow_base..xrow_base + dm.w];
                                let wrow_base = ((c * dm.kd + kd) * dm.kh + kh) * dm.kw;
                                if s == 1 {
                                    for kw in 0..dm.kw {
                                        let wv = wk[wrow_base + kw];
                                        if let Some((lo, hi, iw)) = range_s1(p, kw, dm.w, dm.ow) {
                                            axpy(
                                                &mut out_row[lo..hi],
                                                wv,
                                                &xrow[iw..iw + (hi - lo)],
                                            );
                                        }
                                    }
                                } else {
                                    for kw in 0..dm.kw {
                                        let wv = wk[wrow_base + kw];
                                        if let Some((lo, hi)) =
                                            range_strided(p, kw, dm.w, dm.ow, s)
                                        {
                                            for ow in lo..=hi {
                                                out_row[ow] += wv * xrow[ow * s + kw - p];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv3dBack {
    x: usize,
    w: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

impl<E: Element> BackwardFn<E> for Conv3dBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = nodes[self.x].shape.clone();
        let ws = nodes[self.w].shape.clone();
        let dm = conv_dims(&xs, &ws, self.stride, self.padding).expect("validated in forward");
        let (s, p) = (dm.stride, dm.padding);
        let x_cs = dm.d * dm.h * dm.w;
        let w_ks = dm.c * dm.kd * dm.kh * dm.kw;
        let o_ks = dm.od * dm.oh * dm.ow;

        // Input gradient: scatter each output-grad row through the kernel.
        if sink.grad_mut(self.x).is_some() {
            let wv_all = &nodes[self.w].value;
            let gx = sink.grad_mut(self.x).unwrap();
            for n in 0..dm.n {
                for k in 0..dm.k {
                    let wk = &wv_all[k * w_ks..(k + 1) * w_ks];
                    let g_base = ((n * dm.k) + k) * o_ks;
                    for od in 0..dm.od {
                        for oh in 0..dm.oh {
                            let grow = &g[g_base + (od * dm.oh + oh) * dm.ow..]
                                [..dm.ow];
                            for c in 0..dm.c {
                                let gx_c =
                                    (n * dm.c + c) * x_cs;
                                for kd in 0..dm.kd {
                                    let id = (od * s + kd) as isize - p as isize;
                                    if id < 0 || id >= dm.d as isize {
                                        continue;
                                    }
                                    for kh in 0..dm.kh {
                                        let ih = (oh * s + kh) as isize - p as isize;
                                        if ih < 0 || ih >= dm.h as isize {
                                            continue;
                                        }
                                        let gx_row_base = gx_c
                                            + (id as usize * dm.h + ih as usize) * dm.w;
                                        let wrow_base =
                                            ((c * dm.kd + kd) * dm.kh + kh) * dm.kw;
                                        if s == 1 {
                                            for kw in 0..dm.kw {
                                                let wv = wk[wrow_base + kw];
                                                if let Some((lo, hi, iw)) =
                                                    range_s1(p, kw, dm.w, dm.ow)
                                                {
                                                    axpy(
                                                        &mut gx[gx_row_base + iw
                                                            ..gx_row_base + iw + (hi - lo)],
                                                        wv,
                                                        &grow[lo..hi],
                                                    );
                                                }
                                            }
                                        } else {
                                            for kw in 0..dm.kw {
                                                let wv = wk[wrow_base + kw];
                                                if let Some((lo, hi)) =
                                                    range_strided(p, kw, dm.w, dm.ow, s)
                                                {
                                                    for ow in lo..=hi {
                                                        gx[gx_row_base + ow * s + kw - p] +=
                                                            wv * grow[ow];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // Kernel gradient: per kernel element, a dot over the output grid.
        if sink.grad_mut(self.w).is_some() {
            let xv_all = &nodes[self.x].value;
            let gw = sink.grad_mut(self.w).unwrap();
            for k in 0..dm.k {
                for c in 0..dm.c {
                    for kd in 0..dm.kd {
                        for kh in 0..dm.kh {
                            let wrow_base = ((k * dm.c + c) * dm.kd + kd) * dm.kh * dm.kw
                                + kh * dm.kw;
                            for kw in 0..dm.kw {
                                let mut acc = E::zero();
                                for n in 0..dm.n {
                                    let xc = &xv_all
                                        [(n * dm.c + c) * x_cs..(n * dm.c + c + 1) * x_cs];
                                    let g_base = ((n * dm.k) + k) * o_ks;
                                    for od in 0..dm.od {
                                        let id = (od * s + kd) as isize - p as isize;
                                        if id < 0 || id >= dm.d as isize {
                                            continue;
                                        }
                                        for oh in 0..dm.oh {
                                            let ih = (oh * s + kh) as isize - p as isize;
                                            if ih < 0 || ih >= dm.h as isize {
                                                continue;
                                            }
                                            let grow = &g[g_base
                                                + (od * dm.oh + oh) * dm.ow..][..dm.ow];
                                            let xrow_base = (id as usize * dm.h
                                                + ih as usize)
                                                * dm.w;
                                            let xrow =
                                                &xc[xrow_base..xrow_base + dm.w];
                                            if s == 1 {
                                                if let Some((lo, hi, iw)) =
                                                    range_s1(p, kw, dm.w, dm.ow)
                                                {
                                                    acc += dot4(
                                                        &grow[lo..hi],
                                                        &xrow[iw..iw + (hi - lo)],
                                                    );
                                                }
                                            } else if let Some((lo, hi)) =
                                                range_strided(p, kw, dm.w, dm.ow, s)
                                            {
                                                for ow in lo..=hi {
                                                    acc += grow[ow]
                                                        * xrow[ow * s + kw - p];
                                                }
                                            }
                                        }
                                    }
                                }
                                gw[wrow_base + kw] += acc;
                            }
                        }
                    }
                }
            }
        }

        if let Some(bid) = self.bias {
            if let Some(gb) = sink.grad_mut(bid) {
                for n in 0..dm.n {
                    for k in 0..dm.k {
                        let g_base = ((n * dm.k) + k) * o_ks;
                        let mut acc = E::zero();
                        for &gv in &g[g_base..g_base + o_ks] {
                            acc += gv;
                        }
                        gb[k] += acc;
                    }
                }
            }
        }
    }
}

/// Direct 3D cross-correlation with optional bias.
///
/// `x`: [N, C, D, H, W], `w`: [K, C, kd, kh, kw], `bias`: [K].
/// Output spatial size is floor((in + 2p - k)/s) + 1 per axis.
pub fn conv3d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    x.expect_same_tape(w)?;
    if let Some(b) = bias {
        x.expect_same_tape(b)?;
    }
    let dm = conv_dims(&x.shape(), &w.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != dm.k {
            return Err(Error::ShapeMismatch {
                what: "conv3d bias",
                details: format!("bias length {} != {} filters", b.len(), dm.k),
            });
        }
    }
    let value = x.with_value(|xv| {
        w.with_value(|wv| match bias {
            Some(b) => b.with_value(|bv| conv3d_forward(xv, wv, Some(bv), &dm)),
            None => conv3d_forward(xv, wv, None, &dm),
        })
    });
    let rg = x.requires_grad()
        || w.requires_grad()
        || bias.map_or(false, |b| b.requires_grad());
    x.tape().push(
        vec![dm.n, dm.k, dm.od, dm.oh, dm.ow],
        value,
        rg,
        "conv3d",
        Some(Box::new(Conv3dBack {
            x: x.id(),
            w: w.id(),
            bias: bias.map(|b| b.id()),
            stride,
            padding,
        })),
    )
}

struct Conv1dBack {
    x: usize,
    w: usize,
    bias: usize,
}

impl<E: Element> BackwardFn<E> for Conv1dBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = &nodes[self.x].shape;
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let ws = &nodes[self.w].shape;
        let k = ws[1];

        if sink.grad_mut(self.x).is_some() {
            let wv = nodes[self.w].value.clone();
            let gx = sink.grad_mut(self.x).unwrap();
            for ni in 0..n {
                for t in 0..l {
                    let grow = &g[(ni * l + t) * c..(ni * l + t + 1) * c];
                    for j in 0..k {
                        let ts = t as isize + j as isize - (k as isize - 1);
                        if ts < 0 {
                            continue;
                        }
                        let gx_row =
                            &mut gx[(ni * l + ts as usize) * c..(ni * l + ts as usize + 1) * c];
                        for ci in 0..c {
                            gx_row[ci] += wv[ci * k + j] * grow[ci];
                        }
                    }
                }
            }
        }

        if sink.grad_mut(self.w).is_some() {
            let xv = nodes[self.x].value.clone();
            let gw = sink.grad_mut(self.w).unwrap();
            for ni in 0..n {
                for t in 0..l {
                    let grow = &g[(ni * l + t) * c..(ni * l + t + 1) * c];
                    for j in 0..k {
                        let ts = t as isize + j as isize - (k as isize - 1);
                        if ts < 0 {
                            continue;
                        }
                        let xrow = &xv[(ni * l + ts as usize) * c..(ni * l + ts as usize + 1) * c];
                        for ci in 0..c {
                            gw[ci * k + j] += grow[ci] * xrow[ci];
                        }
                    }
                }
            }
        }

        if let Some(gb) = sink.grad_mut(self.bias) {
            for ni in 0..n {
                for t in 0..l {
                    let grow = &g[(ni * l + t) * c..(ni * l + t + 1) * c];
                    for ci in 0..c {
                        gb[ci] += grow[ci];
                    }
                }
            }
        }
    }
}

/// Depthwise causal 1D convolution over a sequence.
///
/// `x`: [N, L, C], `w`: [C, K], `bias`: [C]. Output position t sees inputs
/// t-K+1..=t (zero-padded on the left), so the sequence length is preserved.
pub fn conv1d_depthwise<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    x.expect_same_tape(w)?;
    x.expect_same_tape(bias)?;
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 2 {
        return Err(Error::ShapeMismatch {
            what: "conv1d_depthwise",
            details: format!("expected x [N,L,C] and w [C,K], got {xs:?} and {ws:?}"),
        });
    }
    let (n, l, c) = (xs[0], xs[1], xs[2]);
    let k = ws[1];
    if ws[0] != c {
        return Err(Error::ShapeMismatch {
            what: "conv1d_depthwise channels",
            details: format!("input has {c} channels, kernel has {}", ws[0]),
        });
    }
    if bias.len() != c {
        return Err(Error::ShapeMismatch {
            what: "conv1d_depthwise bias",
            details: format!("bias length {} != {c} channels", bias.len()),
        });
    }

    let value = x.with_value(|xv| {
        w.with_value(|wv| {
            bias.with_value(|bv| {
                let mut out = vec![E::zero(); n * l * c];
                for ni in 0..n {
                    for t in 0..l {
                        let orow = &mut out[(ni * l + t) * c..(ni * l + t + 1) * c];
                        orow.copy_from_slice(bv);
                        for j in 0..k {
                            let ts = t as isize + j as isize - (k as isize - 1);
                            if ts < 0 {
                                continue;
                            }
                            let xrow =
                                &xv[(ni * l + ts as usize) * c..(ni * l + ts as usize + 1) * c];
                            for ci in 0..c {
                                orow[ci] += wv[ci * k + j] * xrow[ci];
                            }
                        }
                    }
                }
                out
            })
        })
    });
    let rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
    x.tape().push(
        vec![n, l, c],
        value,
        rg,
        "conv1d_depthwise",
        Some(Box::new(Conv1dBack {
            x: x.id(),
            w: w.id(),
            bias: bias.id(),
        })),
    )
}

struct UpsampleBack {
    x: usize,
}

impl<E: Element> BackwardFn<E> for UpsampleBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = &nodes[self.x].shape;
        let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        if let Some(gx) = sink.grad_mut(self.x) {
            for nc in 0..n * c {
                let g_nc = &g[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                let gx_nc = &mut gx[nc * d * h * w..(nc + 1) * d * h * w];
                for z in 0..od {
                    for y in 0..oh {
                        let grow = &g_nc[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                        let gx_row = ((z / 2) * h + y / 2) * w;
                        for x in 0..ow {
                            gx_nc[gx_row + x / 2] += grow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor upsampling by a factor of 2 in every spatial dimension.
/// Backward sums gradients over each replication group.
pub fn upsample_nearest2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::ShapeMismatch {
            what: "upsample_nearest2",
            details: format!("expected 5D input, got {xs:?}"),
        });
    }
    let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let value = x.with_value(|xv| {
        let mut out = vec![E::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((z / 2) * h + y / 2) * w;
                    let drow = (z * oh + y) * ow;
                    for x in 0..ow {
                        dst[drow + x] = src[srow + x / 2];
                    }
                }
            }
        }
        out
    });
    x.tape().push(
        vec![n, c, od, oh, ow],
        value,
        x.requires_grad(),
        "upsample_nearest2",
        Some(Box::new(UpsampleBack { x: x.id() })),
    )
}
