//! Instance normalization over spatial dimensions.

use super::{BackwardFn, Element, GradSink, Node, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

struct InstanceNormBack<E: Element> {
    x: usize,
    gain: usize,
    offset: usize,
    // Per (sample, channel) group: mean and 1/sqrt(var + eps) from forward.
    mean: Vec<E>,
    inv_std: Vec<E>,
    channels: usize,
    spatial: usize,
}

impl<E: Element> BackwardFn<E> for InstanceNormBack<E> {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let m = self.spatial;
        let inv_m = E::one() / E::from_f64(m as f64);
        let xv = &nodes[self.x].value;
        let gainv = &nodes[self.gain].value;
        let groups = self.mean.len();

        // gain / offset gradients.
        for gi in 0..groups {
            let c = gi % self.channels;
            let base = gi * m;
            let mu = self.mean[gi];
            let inv = self.inv_std[gi];
            if let Some(gg) = sink.grad_mut(self.gain) {
                let mut acc = E::zero();
                for i in 0..m {
                    let xhat = (xv[base + i] - mu) * inv;
                    acc += g[base + i] * xhat;
                }
                gg[c] += acc;
            }
            if let Some(gb) = sink.grad_mut(self.offset) {
                let mut acc = E::zero();
                for i in 0..m {
                    acc += g[base + i];
                }
                gb[c] += acc;
            }
        }

        if sink.grad_mut(self.x).is_none() {
            return;
        }
        let gx = sink.grad_mut(self.x).unwrap();
        for gi in 0..groups {
            let c = gi % self.channels;
            let base = gi * m;
            let mu = self.mean[gi];
            let inv = self.inv_std[gi];
            let gain = gainv[c];
            // Standard normalization backward: with gyh = gy * gain,
            // dx = inv * (gyh - mean(gyh) - xhat * mean(gyh * xhat)).
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for i in 0..m {
                let gyh = g[base + i] * gain;
                let xhat = (xv[base + i] - mu) * inv;
                s1 += gyh;
                s2 += gyh * xhat;
            }
            s1 *= inv_m;
            s2 *= inv_m;
            for i in 0..m {
                let gyh = g[base + i] * gain;
                let xhat = (xv[base + i] - mu) * inv;
                gx[base + i] += inv * (gyh - s1 - xhat * s2);
            }
        }
    }
}

/// Instance normalization: per-(sample, channel) zero-mean unit-variance over
/// the spatial dimensions, followed by a learnable per-channel affine.
///
/// `x`: [N, C, spatial...], `gain`/`offset`: [C]. Population variance with
/// epsilon 1e-5 inside the square root.
pub fn instance_norm<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    offset: &Tensor<E>,
) -> Result<Tensor<E>> {
    x.expect_same_tape(gain)?;
    x.expect_same_tape(offset)?;
    let xs = x.shape();
    if xs.len() < 3 {
        return Err(Error::ShapeMismatch {
            what: "instance_norm",
            details: format!("expected [N, C, spatial...], got {xs:?}"),
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    if gain.len() != c || offset.len() != c {
        return Err(Error::ShapeMismatch {
            what: "instance_norm affine",
            details: format!(
                "gain/offset must have {c} channels, got {} and {}",
                gain.len(),
                offset.len()
            ),
        });
    }

    let eps = E::from_f64(NORM_EPS);
    let mut mean = vec![E::zero(); n * c];
    let mut inv_std = vec![E::zero(); n * c];
    let value = x.with_value(|xv| {
        gain.with_value(|gv| {
            offset.with_value(|bv| {
                let mut out = vec![E::zero(); xv.len()];
                for gi in 0..n * c {
                    let base = gi * spatial;
                    let group = &xv[base..base + spatial];
                    let inv_m = E::one() / E::from_f64(spatial as f64);
                    let mut mu = E::zero();
                    for &v in group {
                        mu += v;
                    }
                    mu *= inv_m;
                    let mut var = E::zero();
                    for &v in group {
                        let d = v - mu;
                        var += d * d;
                    }
                    var *= inv_m;
                    let inv = E::one() / (var + eps).sqrt();
                    mean[gi] = mu;
                    inv_std[gi] = inv;
                    let (g, b) = (gv[gi % c], bv[gi % c]);
                    for (o, &v) in out[base..base + spatial].iter_mut().zip(group) {
                        *o = (v - mu) * inv * g + b;
                    }
                }
                out
            })
        })
    });
    let rg = x.requires_grad() || gain.requires_grad() || offset.requires_grad();
    x.tape().push(
        xs,
        value,
        rg,
        "instance_norm",
        Some(Box::new(InstanceNormBack {
            x: x.id(),
            gain: gain.id(),
            offset: offset.id(),
            mean,
            inv_std,
            channels: c,
            spatial,
        })),
    )
}
