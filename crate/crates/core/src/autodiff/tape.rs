//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1 x 1`. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and the backward sweep simply walks it in reverse.
//!
//! The primitive set is deliberately small: affine maps, matrix products,
//! elementwise arithmetic, `tanh`, the logistic sigmoid, squares, full sums and
//! a "pointwise" node whose local partial derivative is supplied by the caller
//! (used for score functions such as the pinball loss).

use ndarray::{Array2, Zip};

use super::kernels::{column_sums, dot, dot_at, dot_bt, sigmoid, tanh};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Pointwise { input: Var, partial: Array2<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Record of a computation, replayable backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.take(v).unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked (parameters, or inputs we
    /// differentiate against).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x . w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut value = dot(self.value(x), self.value(w));
        let bias = self.value(b);
        assert_eq!(bias.nrows(), 1, "affine: bias must be a row vector");
        value += bias;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Affine { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = dot(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + row` with a `1 x m` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: expected a row vector");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * v);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Elementwise map whose value and local derivative are computed by `f`
    /// from the input entry and its `(row, col)` position.
    pub fn pointwise<F>(&mut self, a: Var, f: F) -> Var
    where
        F: Fn(usize, usize, f64) -> (f64, f64),
    {
        let input = self.value(a);
        let mut value = Array2::zeros(input.raw_dim());
        let mut partial = Array2::zeros(input.raw_dim());
        for ((r, c), &x) in input.indexed_iter() {
            let (v, d) = f(r, c, x);
            value[[r, c]] = v;
            partial[[r, c]] = d;
        }
        let ng = self.needs(a);
        self.push(value, Op::Pointwise { input: a, partial }, ng)
    }

    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{op}: operand shapes differ"
        );
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss node, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    if self.needs(*x) {
                        let gx = dot_bt(&g, self.value(*w));
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let gw = dot_at(self.value(*x), &g);
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        let gb = column_sums(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = dot_bt(&g, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = dot_at(self.value(*a), &g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let gr = column_sums(&g);
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= 2.0 * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pointwise { input, partial } => accumulate(&mut grads, *input, g * partial),
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, contribution: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(3.0));
        let loss = tape.square(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn tanh_at_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(1.7));
        let w = tape.param(scalar(0.0));
        let wx = tape.matmul(x, w);
        let loss = tape.tanh(wx);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 0.0);
        assert_eq!(g.get(w).unwrap()[[0, 0]], 1.7);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0]]);
        let c = tape.constant(array![[3.0, 4.0]]);
        let p = tape.mul(x, c);
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x)  =>  d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(array![[0.5, -2.0]]);
        let xx = tape.mul(x, x);
        let s = tape.add(xx, x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[2.0, -3.0]]);
    }
}
