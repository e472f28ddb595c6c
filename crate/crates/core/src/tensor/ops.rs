//! Elementwise operations and reductions.
//!
//! Binary ops require equal shapes or a scalar (single-element) operand on
//! either side. `abs` and `relu` use subgradient 0 at their kinks.

use super::{BackwardFn, Element, GradSink, Node, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary_values<E: Element>(kind: BinKind, a: &[E], b: &[E]) -> Vec<E> {
    let apply = |x: E, y: E| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| apply(x, y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| apply(x, b[0])).collect()
    } else {
        b.iter().map(|&y| apply(a[0], y)).collect()
    }
}

struct BinaryBack {
    kind: BinKind,
    a: usize,
    b: usize,
}

impl<E: Element> BackwardFn<E> for BinaryBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let va = &nodes[self.a].value;
        let vb = &nodes[self.b].value;
        let pick = |v: &[E], i: usize| if v.len() == 1 { v[0] } else { v[i] };

        if let Some(ga) = sink.grad_mut(self.a) {
            match self.kind {
                BinKind::Add => {
                    if ga.len() == g.len() {
                        for (d, &gi) in ga.iter_mut().zip(g) {
                            *d += gi;
                        }
                    } else {
                        ga[0] += g.iter().fold(E::zero(), |s, &v| s + v);
                    }
                }
                BinKind::Sub => {
                    if ga.len() == g.len() {
                        for (d, &gi) in ga.iter_mut().zip(g) {
                            *d += gi;
                        }
                    } else {
                        ga[0] += g.iter().fold(E::zero(), |s, &v| s + v);
                    }
                }
                BinKind::Mul => {
                    if ga.len() == g.len() {
                        for i in 0..g.len() {
                            ga[i] += g[i] * pick(vb, i);
                        }
                    } else {
                        let mut s = E::zero();
                        for i in 0..g.len() {
                            s += g[i] * pick(vb, i);
                        }
                        ga[0] += s;
                    }
                }
                BinKind::Div => {
                    if ga.len() == g.len() {
                        for i in 0..g.len() {
                            ga[i] += g[i] / pick(vb, i);
                        }
                    } else {
                        let mut s = E::zero();
                        for i in 0..g.len() {
                            s += g[i] / pick(vb, i);
                        }
                        ga[0] += s;
                    }
                }
            }
        }
        if let Some(gb) = sink.grad_mut(self.b) {
            match self.kind {
                BinKind::Add => {
                    if gb.len() == g.len() {
                        for (d, &gi) in gb.iter_mut().zip(g) {
                            *d += gi;
                        }
                    } else {
                        gb[0] += g.iter().fold(E::zero(), |s, &v| s + v);
                    }
                }
                BinKind::Sub => {
                    if gb.len() == g.len() {
                        for (d, &gi) in gb.iter_mut().zip(g) {
                            *d -= gi;
                        }
                    } else {
                        gb[0] -= g.iter().fold(E::zero(), |s, &v| s + v);
                    }
                }
                BinKind::Mul => {
                    if gb.len() == g.len() {
                        for i in 0..g.len() {
                            gb[i] += g[i] * pick(va, i);
                        }
                    } else {
                        let mut s = E::zero();
                        for i in 0..g.len() {
                            s += g[i] * pick(va, i);
                        }
                        gb[0] += s;
                    }
                }
                BinKind::Div => {
                    // d(a/b)/db = -a / b^2
                    if gb.len() == g.len() {
                        for i in 0..g.len() {
                            let bv = pick(vb, i);
                            gb[i] -= g[i] * pick(va, i) / (bv * bv);
                        }
                    } else {
                        let bv = vb[0];
                        let mut s = E::zero();
                        for i in 0..g.len() {
                            s -= g[i] * pick(va, i) / (bv * bv);
                        }
                        gb[0] += s;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Abs,
    Exp,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
}

fn sigmoid_val<E: Element>(x: E) -> E {
    // Stable in both tails.
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn softplus_val<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

struct UnaryBack {
    kind: UnaryKind,
    x: usize,
}

impl<E: Element> BackwardFn<E> for UnaryBack {
    fn backward(&self, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        let vx = &nodes[self.x].value;
        if let Some(gx) = sink.grad_mut(self.x) {
            for i in 0..g.len() {
                let x = vx[i];
                let d = match self.kind {
                    UnaryKind::Abs => {
                        if x > E::zero() {
                            E::one()
                        } else if x < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        }
                    }
                    UnaryKind::Exp => x.exp(),
                    UnaryKind::Sigmoid => {
                        let s = sigmoid_val(x);
                        s * (E::one() - s)
                    }
                    UnaryKind::Silu => {
                        let s = sigmoid_val(x);
                        s * (E::one() + x * (E::one() - s))
                    }
                    UnaryKind::Relu => {
                        if x > E::zero() {
                            E::one()
                        } else {
                            E::zero()
                        }
                    }
                    UnaryKind::Softplus => sigmoid_val(x),
                };
                gx[i] += g[i] * d;
            }
        }
    }
}

struct ScaleBack<E: Element> {
    x: usize,
    c: E,
}

impl<E: Element> BackwardFn<E> for ScaleBack<E> {
    fn backward(&self, _nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            for i in 0..g.len() {
                gx[i] += g[i] * self.c;
            }
        }
    }
}

struct ShiftBack {
    x: usize,
}

impl<E: Element> BackwardFn<E> for ShiftBack {
    fn backward(&self, _nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            for i in 0..g.len() {
                gx[i] += g[i];
            }
        }
    }
}

struct SumBack<E: Element> {
    x: usize,
    scale: E,
}

impl<E: Element> BackwardFn<E> for SumBack<E> {
    fn backward(&self, _nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            let gv = g[0] * self.scale;
            for d in gx.iter_mut() {
                *d += gv;
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    fn binary(&self, other: &Tensor<E>, kind: BinKind, name: &'static str) -> Result<Tensor<E>> {
        self.expect_same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (la, lb) = (self.len(), other.len());
        if la != lb && la != 1 && lb != 1 {
            return Err(Error::ShapeMismatch {
                what: name,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let value = self.with_value(|a| other.with_value(|b| binary_values(kind, a, b)));
        let shape = if la >= lb { sa } else { sb };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape().push(
            shape,
            value,
            rg,
            name,
            Some(Box::new(BinaryBack {
                kind,
                a: self.id(),
                b: other.id(),
            })),
        )
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Div, "div")
    }

    fn unary(&self, kind: UnaryKind, name: &'static str) -> Result<Tensor<E>> {
        let value = self.with_value(|x| {
            x.iter()
                .map(|&v| match kind {
                    UnaryKind::Abs => v.abs(),
                    UnaryKind::Exp => v.exp(),
                    UnaryKind::Sigmoid => sigmoid_val(v),
                    UnaryKind::Silu => v * sigmoid_val(v),
                    UnaryKind::Relu => v.max(E::zero()),
                    UnaryKind::Softplus => softplus_val(v),
                })
                .collect()
        });
        self.tape().push(
            self.shape(),
            value,
            self.requires_grad(),
            name,
            Some(Box::new(UnaryBack {
                kind,
                x: self.id(),
            })),
        )
    }

    pub fn abs(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Abs, "abs")
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Exp, "exp")
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn silu(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Silu, "silu")
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Relu, "relu")
    }

    pub fn softplus(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Softplus, "softplus")
    }

    pub fn scalar_mul(&self, c: E) -> Result<Tensor<E>> {
        let value = self.with_value(|x| x.iter().map(|&v| v * c).collect());
        self.tape().push(
            self.shape(),
            value,
            self.requires_grad(),
            "scalar_mul",
            Some(Box::new(ScaleBack { x: self.id(), c })),
        )
    }

    pub fn add_scalar(&self, c: E) -> Result<Tensor<E>> {
        let value = self.with_value(|x| x.iter().map(|&v| v + c).collect());
        self.tape().push(
            self.shape(),
            value,
            self.requires_grad(),
            "add_scalar",
            Some(Box::new(ShiftBack { x: self.id() })),
        )
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.scalar_mul(-E::one())
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor<E>> {
        let value = self.with_value(|x| x.iter().fold(E::zero(), |s, &v| s + v));
        self.tape().push(
            vec![1],
            vec![value],
            self.requires_grad(),
            "sum",
            Some(Box::new(SumBack {
                x: self.id(),
                scale: E::one(),
            })),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor<E>> {
        let n = self.len();
        let inv = E::one() / E::from_f64(n as f64);
        let value = self.with_value(|x| x.iter().fold(E::zero(), |s, &v| s + v) * inv);
        self.tape().push(
            vec![1],
            vec![value],
            self.requires_grad(),
            "mean",
            Some(Box::new(SumBack {
                x: self.id(),
                scale: inv,
            })),
        )
    }
}
