//! Shape plumbing between volumetric feature maps and flattened sequences,
//! plus the dense linear projection applied along the channel axis.
//!
//! The flatten rule is (z, y, x) row-major: sequence position
//! t = (z*H + y)*W + x. `vol_to_seq` followed by `seq_to_vol` is the
//! identity.

use super::{BackwardFn, Element, GradSink, Node, Tensor};
use crate::error::{Error, Result};

struct PermuteBack {
    x: usize,
    to_seq: bool,
}

fn permute_to_seq<E: Element>(x: &[E], n: usize, c: usize, l: usize, out: &mut [E]) {
    // [N, C, L_spatial] -> [N, L, C]
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * l..(ni * c + ci + 1) * l];
            for (t, &v) in src.iter().enumerate() {
                out[(ni * l + t) * c + ci] = v;
            }
        }
    }
}

fn permute_from_seq<E: Element>(x: &[E], n: usize, c: usize, l: usize, out: &mut [E]) {
    // [N, L, C] -> [N, C, L_spatial]
    for ni in 0..n {
        for t in 0..l {
            let src = &x[(ni * l + t) * c..(ni * l + t + 1) * c];
            for (ci, &v) in src.iter().enumerate() {
                out[(ni * c + ci) * l + t] = v;
            }
        }
    }
}

impl<E: Element> BackwardFn<E> for PermuteBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = &nodes[self.x].shape;
        let (n, c, l) = if self.to_seq {
            (xs[0], xs[1], xs[2..].iter().product::<usize>())
        } else {
            (xs[0], xs[2], xs[1])
        };
        if let Some(gx) = sink.grad_mut(self.x) {
            let mut buf = vec![E::zero(); g.len()];
            if self.to_seq {
                permute_from_seq(g, n, c, l, &mut buf);
            } else {
                permute_to_seq(g, n, c, l, &mut buf);
            }
            for (d, &v) in gx.iter_mut().zip(&buf) {
                *d += v;
            }
        }
    }
}

/// Flatten [N, C, D, H, W] into a sequence [N, L, C] with L = D*H*W.
pub fn vol_to_seq<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::ShapeMismatch {
            what: "vol_to_seq",
            details: format!("expected 5D input, got {xs:?}"),
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let l: usize = xs[2..].iter().product();
    let value = x.with_value(|xv| {
        let mut out = vec![E::zero(); xv.len()];
        permute_to_seq(xv, n, c, l, &mut out);
        out
    });
    x.tape().push(
        vec![n, l, c],
        value,
        x.requires_grad(),
        "vol_to_seq",
        Some(Box::new(PermuteBack {
            x: x.id(),
            to_seq: true,
        })),
    )
}

/// Inverse of [`vol_to_seq`]: [N, L, C] back to [N, C, D, H, W].
pub fn seq_to_vol<E: Element>(x: &Tensor<E>, spatial: (usize, usize, usize)) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::ShapeMismatch {
            what: "seq_to_vol",
            details: format!("expected [N, L, C], got {xs:?}"),
        });
    }
    let (n, l, c) = (xs[0], xs[1], xs[2]);
    let (d, h, w) = spatial;
    if d * h * w != l {
        return Err(Error::ShapeMismatch {
            what: "seq_to_vol",
            details: format!("spatial {spatial:?} product != sequence length {l}"),
        });
    }
    let value = x.with_value(|xv| {
        let mut out = vec![E::zero(); xv.len()];
        permute_from_seq(xv, n, c, l, &mut out);
        out
    });
    x.tape().push(
        vec![n, c, d, h, w],
        value,
        x.requires_grad(),
        "seq_to_vol",
        Some(Box::new(PermuteBack {
            x: x.id(),
            to_seq: false,
        })),
    )
}

struct ReverseBack {
    x: usize,
}

fn reverse_seq_values<E: Element>(x: &[E], n: usize, l: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for ni in 0..n {
        for t in 0..l {
            let src = &x[(ni * l + t) * c..(ni * l + t + 1) * c];
            let dst = (ni * l + (l - 1 - t)) * c;
            out[dst..dst + c].copy_from_slice(src);
        }
    }
    out
}

impl<E: Element> BackwardFn<E> for ReverseBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = &nodes[self.x].shape;
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        if let Some(gx) = sink.grad_mut(self.x) {
            let rev = reverse_seq_values(g, n, l, c);
            for (d, &v) in gx.iter_mut().zip(&rev) {
                *d += v;
            }
        }
    }
}

/// Flip a sequence [N, L, C] along its L axis.
pub fn reverse_seq<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::ShapeMismatch {
            what: "reverse_seq",
            details: format!("expected [N, L, C], got {xs:?}"),
        });
    }
    let (n, l, c) = (xs[0], xs[1], xs[2]);
    let value = x.with_value(|xv| reverse_seq_values(xv, n, l, c));
    x.tape().push(
        xs,
        value,
        x.requires_grad(),
        "reverse_seq",
        Some(Box::new(ReverseBack { x: x.id() })),
    )
}

struct LinearBack {
    x: usize,
    w: usize,
    bias: Option<usize>,
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl<E: Element> BackwardFn<E> for LinearBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let (rows, ci, co) = (self.rows, self.c_in, self.c_out);

        if sink.grad_mut(self.x).is_some() {
            let wv = &nodes[self.w].value;
            let gx = sink.grad_mut(self.x).unwrap();
            for r in 0..rows {
                let grow = &g[r * co..(r + 1) * co];
                let gx_row = &mut gx[r * ci..(r + 1) * ci];
                for i in 0..ci {
                    let wrow = &wv[i * co..(i + 1) * co];
                    let mut acc = E::zero();
                    for o in 0..co {
                        acc += grow[o] * wrow[o];
                    }
                    gx_row[i] += acc;
                }
            }
        }

        if sink.grad_mut(self.w).is_some() {
            let xv = &nodes[self.x].value;
            let gw = sink.grad_mut(self.w).unwrap();
            for r in 0..rows {
                let grow = &g[r * co..(r + 1) * co];
                let xrow = &xv[r * ci..(r + 1) * ci];
                for i in 0..ci {
                    let xv_i = xrow[i];
                    let gw_row = &mut gw[i * co..(i + 1) * co];
                    for o in 0..co {
                        gw_row[o] += xv_i * grow[o];
                    }
                }
            }
        }

        if let Some(bid) = self.bias {
            if let Some(gb) = sink.grad_mut(bid) {
                for r in 0..rows {
                    let grow = &g[r * co..(r + 1) * co];
                    for o in 0..co {
                        gb[o] += grow[o];
                    }
                }
            }
        }
    }
}

/// Dense projection along the last axis: [..., C_in] x [C_in, C_out] + bias.
pub fn linear<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    x.expect_same_tape(w)?;
    if let Some(b) = bias {
        x.expect_same_tape(b)?;
    }
    let xs = x.shape();
    let ws = w.shape();
    if xs.is_empty() || ws.len() != 2 {
        return Err(Error::ShapeMismatch {
            what: "linear",
            details: format!("expected x [..., C_in] and w [C_in, C_out], got {xs:?} and {ws:?}"),
        });
    }
    let ci = *xs.last().unwrap();
    if ws[0] != ci {
        return Err(Error::ShapeMismatch {
            what: "linear",
            details: format!("input channels {ci} != weight rows {}", ws[0]),
        });
    }
    let co = ws[1];
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::ShapeMismatch {
                what: "linear bias",
                details: format!("bias length {} != {co} outputs", b.len()),
            });
        }
    }
    let rows = x.len() / ci;
    let value = x.with_value(|xv| {
        w.with_value(|wv| {
            let mut out = vec![E::zero(); rows * co];
            if let Some(b) = bias {
                b.with_value(|bv| {
                    for r in 0..rows {
                        out[r * co..(r + 1) * co].copy_from_slice(bv);
                    }
                });
            }
            for r in 0..rows {
                let xrow = &xv[r * ci..(r + 1) * ci];
                let orow = &mut out[r * co..(r + 1) * co];
                for i in 0..ci {
                    let xi = xrow[i];
                    let wrow = &wv[i * co..(i + 1) * co];
                    for (o, &wv_o) in orow.iter_mut().zip(wrow) {
                        *o += xi * wv_o;
                    }
                }
            }
            out
        })
    });
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = co;
    let rg = x.requires_grad() || w.requires_grad() || bias.map_or(false, |b| b.requires_grad());
    x.tape().push(
        out_shape,
        value,
        rg,
        "linear",
        Some(Box::new(LinearBack {
            x: x.id(),
            w: w.id(),
            bias: bias.map(|b| b.id()),
            rows,
            c_in: ci,
            c_out: co,
        })),
    )
}

struct SliceLastBack {
    x: usize,
    start: usize,
    len: usize,
}

impl<E: Element> BackwardFn<E> for SliceLastBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let xs = &nodes[self.x].shape;
        let c = *xs.last().unwrap();
        let rows = nodes[self.x].value.len() / c;
        if let Some(gx) = sink.grad_mut(self.x) {
            for r in 0..rows {
                let grow = &g[r * self.len..(r + 1) * self.len];
                let gx_row = &mut gx[r * c + self.start..r * c + self.start + self.len];
                for (d, &v) in gx_row.iter_mut().zip(grow) {
                    *d += v;
                }
            }
        }
    }
}

/// Slice a contiguous channel range out of the last axis.
pub fn slice_last_dim<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    let c = *xs.last().ok_or_else(|| Error::ShapeMismatch {
        what: "slice_last_dim",
        details: "scalar input".into(),
    })?;
    if start + len > c || len == 0 {
        return Err(Error::ShapeMismatch {
            what: "slice_last_dim",
            details: format!("range {start}..{} out of {c} channels", start + len),
        });
    }
    let rows = x.len() / c;
    let value = x.with_value(|xv| {
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        out
    });
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = len;
    x.tape().push(
        out_shape,
        value,
        x.requires_grad(),
        "slice_last_dim",
        Some(Box::new(SliceLastBack {
            x: x.id(),
            start,
            len,
        })),
    )
}

struct ConcatBack {
    a: usize,
    b: usize,
    n: usize,
    a_block: usize,
    b_block: usize,
}

impl<E: Element> BackwardFn<E> for ConcatBack {
    fn backward(&self, _nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let stride = self.a_block + self.b_block;
        if let Some(ga) = sink.grad_mut(self.a) {
            for ni in 0..self.n {
                let src = &g[ni * stride..ni * stride + self.a_block];
                let dst = &mut ga[ni * self.a_block..(ni + 1) * self.a_block];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if let Some(gb) = sink.grad_mut(self.b) {
            for ni in 0..self.n {
                let src = &g[ni * stride + self.a_block..(ni + 1) * stride];
                let dst = &mut gb[ni * self.b_block..(ni + 1) * self.b_block];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
}

/// Concatenate two feature maps along the channel axis (dim 1).
pub fn concat_channels<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    a.expect_same_tape(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::ShapeMismatch {
            what: "concat_channels",
            details: format!("{sa:?} vs {sb:?}"),
        });
    }
    let n = sa[0];
    let a_block = a.len() / n;
    let b_block = b.len() / n;
    let value = a.with_value(|av| {
        b.with_value(|bv| {
            let mut out = Vec::with_capacity(av.len() + bv.len());
            for ni in 0..n {
                out.extend_from_slice(&av[ni * a_block..(ni + 1) * a_block]);
                out.extend_from_slice(&bv[ni * b_block..(ni + 1) * b_block]);
            }
            out
        })
    });
    let mut out_shape = sa.clone();
    out_shape[1] = sa[1] + sb[1];
    let rg = a.requires_grad() || b.requires_grad();
    a.tape().push(
        out_shape,
        value,
        rg,
        "concat_channels",
        Some(Box::new(ConcatBack {
            a: a.id(),
            b: b.id(),
            n,
            a_block,
            b_block,
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
    use crate::tensor::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_unflatten_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [2usize, 3, 2, 3, 4];
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&shape, data.clone(), false).unwrap();
        let seq = vol_to_seq(&x).unwrap();
        assert_eq!(seq.shape(), vec![2, 24, 3]);
        let back = seq_to_vol(&seq, (2, 3, 4)).unwrap();
        assert_eq!(back.value(), data);
    }

    #[test]
    fn flatten_order_is_zyx_row_major() {
        // Single channel 1x1x(1,2,2): t = (z*H + y)*W + x.
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[1, 1, 1, 2, 2], vec![10.0, 11.0, 12.0, 13.0], false)
            .unwrap();
        let seq = vol_to_seq(&x).unwrap();
        assert_eq!(seq.value(), vec![10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn reverse_seq_flips_and_roundtrips() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        let r = reverse_seq(&x).unwrap();
        assert_eq!(r.value(), vec![5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        let rr = reverse_seq(&r).unwrap();
        assert_eq!(rr.value(), x.value());
    }

    #[test]
    fn linear_hand_case() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let w = tape
            .leaf(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0], false)
            .unwrap();
        let b = tape.leaf(&[3], vec![0.5, 0.5, 0.5], false).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value(), vec![1.5, 2.5, 3.5, 3.5, 4.5, 7.5]);
    }

    #[test]
    fn seq_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, c, dd, hh, ww) = (1usize, 2usize, 2usize, 2usize, 3usize);
        let l = dd * hh * ww;
        let xn = n * c * l;
        let (ci, co) = (c, 4usize);
        let total = xn + ci * co + co;
        let x0: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            |params, need_grad| {
                let tape: Tape<f64> = Tape::new();
                let x = tape.leaf(&[n, c, dd, hh, ww], params[..xn].to_vec(), true)?;
                let w = tape.leaf(&[ci, co], params[xn..xn + ci * co].to_vec(), true)?;
                let b = tape.leaf(&[co], params[xn + ci * co..].to_vec(), true)?;
                let seq = vol_to_seq(&x)?;
                let rev = reverse_seq(&seq)?;
                let proj = linear(&rev, &w, Some(&b))?;
                let lo = slice_last_dim(&proj, 0, 2)?;
                let hi = slice_last_dim(&proj, 2, 2)?;
                let gated = lo.mul(&hi.sigmoid()?)?;
                let vol = seq_to_vol(&gated, (dd, hh, ww))?;
                let cat = concat_channels(&vol, &x)?;
                let root = cat.mul(&cat)?.mean()?;
                let val = root.scalar_value();
                if need_grad {
                    tape.backward(&root)?;
                    let mut grad = x.grad().unwrap();
                    grad.extend(w.grad().unwrap());
                    grad.extend(b.grad().unwrap());
                    Ok((val, Some(grad)))
                } else {
                    Ok((val, None))
                }
            },
            &x0,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel {}", report.max_rel_err);
    }

    #[test]
    fn concat_shapes_must_agree() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&[1, 2, 2, 2, 2], vec![0.0; 16], false).unwrap();
        let b = tape.leaf(&[1, 2, 2, 2, 3], vec![0.0; 24], false).unwrap();
        assert!(concat_channels(&a, &b).is_err());
    }
}
