//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records one scalar operation per node together with the local
//! partial derivatives to its (at most two) parents. [`Var`] implements
//! [`crate::math::Scalar`], so every generic kernel in the crate can run on the
//! tape unchanged; a backward sweep then yields the gradient with respect to
//! the leaves in a single pass.
//!
//! Replays are deterministic: node order and the reduction order of the
//! backward sweep are fixed by construction, so repeated evaluations at
//! identical inputs are bit-identical.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::math::Scalar;

#[derive(Clone, Copy)]
struct Node {
    p0: u32,
    p1: u32,
    d0: f64,
    d1: f64,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn with_capacity(n: usize) -> Tape {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf variable. Gradients are reported with respect to leaves.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(0, 0.0, 0, 0.0);
        // Leaves point at themselves with zero partials; the backward sweep
        // leaves their adjoint untouched.
        self.nodes.borrow_mut()[idx as usize] = Node {
            p0: idx,
            p1: idx,
            d0: 0.0,
            d1: 0.0,
        };
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    fn push(&self, p0: u32, d0: f64, p1: u32, d1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = u32::try_from(nodes.len()).expect("tape overflow");
        nodes.push(Node { p0, p1, d0, d1 });
        idx
    }
}

/// Scalar value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn val(self) -> f64 {
        self.val
    }

    fn unary(self, val: f64, d: f64) -> Var<'t> {
        let idx = self.tape.push(self.idx, d, self.idx, 0.0);
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }

    fn binary(self, other: Var<'t>, val: f64, d0: f64, d1: f64) -> Var<'t> {
        let idx = self.tape.push(self.idx, d0, other.idx, d1);
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }

    /// Backward sweep seeded with `dL/dself = 1`.
    pub fn backward(self) -> Grads {
        let nodes = self.tape.nodes.borrow();
        let mut adj = vec![0.0f64; nodes.len()];
        adj[self.idx as usize] = 1.0;
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.p0 as usize != i {
                adj[n.p0 as usize] += n.d0 * a;
            }
            if n.p1 as usize != i {
                adj[n.p1 as usize] += n.d1 * a;
            }
        }
        Grads { adj }
    }
}

pub struct Grads {
    adj: Vec<f64>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx as usize]
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let inv = 1.0 / o.val;
        self.binary(o, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }

    fn lift(self, c: f64) -> Var<'t> {
        self.tape.var(c)
    }

    fn addc(self, c: f64) -> Var<'t> {
        self.unary(self.val + c, 1.0)
    }

    fn mulc(self, c: f64) -> Var<'t> {
        self.unary(self.val * c, c)
    }

    fn sqrt(self) -> Var<'t> {
        let s = self.val.sqrt();
        // Subgradient 0 at the origin so an exact point-on-pixel hit does not
        // poison the whole gradient with infinities.
        let d = if s == 0.0 { 0.0 } else { 0.5 / s };
        self.unary(s, d)
    }

    fn sin(self) -> Var<'t> {
        self.unary(self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Var<'t> {
        self.unary(self.val.cos(), -self.val.sin())
    }

    fn abs(self) -> Var<'t> {
        let d = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.val.abs(), d)
    }

    fn min_c(self, c: f64) -> Var<'t> {
        if self.val < c {
            self.unary(self.val, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }

    fn max_c(self, c: f64) -> Var<'t> {
        if self.val > c {
            self.unary(self.val, 1.0)
        } else {
            self.unary(c, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(-2.0);
        let z = x * y + x;
        assert_eq!(z.val(), -3.0);
        let g = z.backward();
        assert_eq!(g.wrt(x), -1.0); // y + 1
        assert_eq!(g.wrt(y), 3.0); // x
    }

    #[test]
    fn chain_through_trig_and_sqrt() {
        let f = |x: f64| (x.sin() * x + 2.0).sqrt();
        for &x0 in &[0.3, 1.7, -0.9] {
            let t = Tape::new();
            let x = t.var(x0);
            let y = (x.sin() * x).addc(2.0).sqrt();
            assert!((y.val() - f(x0)).abs() < 1e-15);
            let g = y.backward();
            let fd = central_diff(f, x0, 1e-6);
            assert!(
                (g.wrt(x) - fd).abs() < 1e-8,
                "x={x0}: analytic {} vs fd {fd}",
                g.wrt(x)
            );
        }
    }

    #[test]
    fn division_and_reuse() {
        // f(a, b) = a/b + a*a/b, reusing a and b in several nodes.
        let f = |a: f64, b: f64| a / b + a * a / b;
        let (a0, b0) = (1.3, -0.7);
        let t = Tape::new();
        let a = t.var(a0);
        let b = t.var(b0);
        let y = a / b + a * a / b;
        let g = y.backward();
        let fa = central_diff(|a| f(a, b0), a0, 1e-6);
        let fb = central_diff(|b| f(a0, b), b0, 1e-6);
        assert!((g.wrt(a) - fa).abs() < 1e-8);
        assert!((g.wrt(b) - fb).abs() < 1e-8);
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let t = Tape::new();
        let x = t.var(0.0);
        let y = x.abs();
        assert_eq!(y.backward().wrt(x), 0.0);
    }

    #[test]
    fn clamp_branches() {
        let t = Tape::new();
        let x = t.var(0.3);
        let low = x.max_c(0.5); // clamped to constant
        let high = x.min_c(0.5); // passes through
        assert_eq!(low.val(), 0.5);
        assert_eq!(high.val(), 0.3);
        assert_eq!(low.backward().wrt(x), 0.0);
        assert_eq!(high.backward().wrt(x), 1.0);
    }

    #[test]
    fn constants_do_not_accumulate_gradient() {
        let t = Tape::new();
        let x = t.var(2.0);
        let c = x.lift(10.0);
        let y = x * c;
        let g = y.backward();
        assert_eq!(g.wrt(x), 10.0);
        assert_eq!(g.wrt(c), 2.0); // adjoint exists but is never fed back
    }
}
