//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly. [`Tape::grad`] walks the
//! recorded graph backwards and expresses each vector-Jacobian product with
//! ordinary tape operations, so the gradients it returns are themselves
//! differentiable. This is what the gradient penalty of the critic needs: the
//! norm of `dD/dx` is part of a loss that is differentiated again with respect
//! to the critic weights.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::tensor::{gemm, Mat};

const NONE: u32 = u32::MAX;

/// A linear re-indexing between two matrix shapes.
///
/// `src[o]` names the flat input element copied into flat output element `o`,
/// or `NONE` for a zero. Gathering through the map and scatter-adding through
/// it are adjoint to each other.
#[derive(Debug)]
pub struct IndexMap {
    in_shape: (usize, usize),
    out_shape: (usize, usize),
    src: Vec<u32>,
}

impl IndexMap {
    pub fn new(in_shape: (usize, usize), out_shape: (usize, usize), src: Vec<Option<usize>>) -> Self {
        assert_eq!(src.len(), out_shape.0 * out_shape.1, "index map length");
        let limit = in_shape.0 * in_shape.1;
        let src = src
            .into_iter()
            .map(|s| match s {
                Some(i) => {
                    assert!(i < limit, "index map source out of range");
                    i as u32
                }
                None => NONE,
            })
            .collect();
        Self { in_shape, out_shape, src }
    }

    fn gather(&self, input: &Mat) -> Mat {
        let data = input.as_slice();
        let out: Vec<f64> =
            self.src.iter().map(|&s| if s == NONE { 0.0 } else { data[s as usize] }).collect();
        Mat::from_vec(self.out_shape.0, self.out_shape.1, out).expect("gather shape")
    }

    fn scatter(&self, input: &Mat) -> Mat {
        let mut out = Mat::zeros(self.in_shape.0, self.in_shape.1);
        let dst = out.as_mut_slice();
        for (&s, &v) in self.src.iter().zip(input.as_slice()) {
            if s != NONE {
                dst[s as usize] += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Rc<Mat>),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SumAll(usize),
    BroadcastScalar(usize),
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sqrt(usize),
    Reshape(usize),
    Gather(usize, Rc<IndexMap>),
    Scatter(usize, Rc<IndexMap>),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | SumRows(a) | BroadcastRows(a)
            | SumCols(a) | BroadcastCols(a) | SumAll(a) | BroadcastScalar(a) | Sigmoid(a)
            | Softplus(a) | Tanh(a) | Exp(a) | Log(a) | Recip(a) | Sqrt(a) | Reshape(a)
            | Gather(a, _) | Scatter(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// An append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.rows(), v.cols())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Mat::filled(1, 1, v))
    }

    fn push_leaf(&self, value: Mat, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            op.parents().iter().flatten().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var_of(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the sum of `output`'s entries with respect to each of `wrt`.
    ///
    /// The returned variables live on the same tape and can be differentiated
    /// again. Inputs that `output` does not depend on receive zeros.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let n = output.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n].iter().map(|node| node.op.clone()).collect();
        // Nodes through which some `wrt` reaches `output`.
        let mut reach = vec![false; n];
        for w in wrt {
            if w.id < n {
                reach[w.id] = true;
            }
        }
        for id in 0..n {
            if !reach[id] {
                reach[id] = ops[id].parents().iter().flatten().any(|&p| reach[p]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        let shape = output.value().shape();
        grads[output.id] = Some(self.constant(Mat::filled(shape.0, shape.1, 1.0)));

        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            if !reach[id] {
                continue;
            }
            for (p, gp) in self.vjp(id, &ops[id], g, &reach) {
                grads[p] = Some(match grads[p] {
                    Some(prev) => prev + gp,
                    None => gp,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = w.value().shape();
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    fn vjp<'t>(&'t self, id: usize, op: &Op, g: Var<'t>, reach: &[bool]) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let me = self.var_of(id);
        let v = |i: usize| self.var_of(i);
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t>| {
            if reach[p] {
                out.push((p, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| -g);
            }
            Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Neg(a) => emit(*a, &|| -g),
            Scale(a, c) => emit(*a, &|| g.scale(*c)),
            AddScalar(a) => emit(*a, &|| g),
            MulConst(a, m) => emit(*a, &|| g.mul_const(Rc::clone(m))),
            MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                emit(*a, &|| if ta { v(*b).mm_t(g, tb, true) } else { g.mm_t(v(*b), false, !tb) });
                emit(*b, &|| if tb { g.mm_t(v(*a), true, ta) } else { v(*a).mm_t(g, !ta, false) });
            }
            SumRows(a) => {
                let n = self.value_of(*a).rows();
                emit(*a, &|| g.broadcast_rows(n));
            }
            BroadcastRows(a) => emit(*a, &|| g.sum_rows()),
            SumCols(a) => {
                let m = self.value_of(*a).cols();
                emit(*a, &|| g.broadcast_cols(m));
            }
            BroadcastCols(a) => emit(*a, &|| g.sum_cols()),
            SumAll(a) => {
                let (r, c) = self.value_of(*a).shape();
                emit(*a, &|| g.broadcast_scalar(r, c));
            }
            BroadcastScalar(a) => emit(*a, &|| g.sum()),
            Sigmoid(a) => emit(*a, &|| g * (me - me * me)),
            Softplus(a) => emit(*a, &|| g * v(*a).sigmoid()),
            Tanh(a) => emit(*a, &|| g - g * me * me),
            Exp(a) => emit(*a, &|| g * me),
            Log(a) => emit(*a, &|| g * v(*a).recip()),
            Recip(a) => emit(*a, &|| -(g * me * me)),
            Sqrt(a) => emit(*a, &|| (g * me.recip()).scale(0.5)),
            Reshape(a) => {
                let (r, c) = self.value_of(*a).shape();
                emit(*a, &|| g.reshape(r, c));
            }
            Gather(a, map) => emit(*a, &|| g.scatter(Rc::clone(map))),
            Scatter(a, map) => emit(*a, &|| g.gather(Rc::clone(map))),
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    /// Whether this value depends on a leaf created with [`Tape::var`].
    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The single entry of a `1 x 1` value.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    fn unary(self, op: Op, f: impl Fn(&Mat) -> Mat) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |m| m.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |m| m.map(|x| x + c))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(self, m: Rc<Mat>) -> Var<'t> {
        assert_eq!(self.shape(), m.shape(), "mul_const shape");
        let mm = Rc::clone(&m);
        self.unary(Op::MulConst(self.id, m), move |x| x.zip_map(&mm, |a, b| a * b))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.mm_t(other, false, false)
    }

    /// `op(self) * op(other)` with optional transposes.
    pub fn mm_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let value = gemm(&self.value(), ta, &other.value(), tb);
        self.tape.push(value, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |m| {
            let mut out = Mat::zeros(1, m.cols());
            for i in 0..m.rows() {
                for (o, v) in out.as_mut_slice().iter_mut().zip(m.row_slice(i)) {
                    *o += v;
                }
            }
            out
        })
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        assert_eq!(self.shape().0, 1, "broadcast_rows expects a single row");
        self.unary(Op::BroadcastRows(self.id), |m| Mat::from_fn(n, m.cols(), |_, j| m.get(0, j)))
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |m| {
            Mat::from_fn(m.rows(), 1, |i, _| m.row_slice(i).iter().sum())
        })
    }

    /// Repeats an `r x 1` column `c` times.
    pub fn broadcast_cols(self, c: usize) -> Var<'t> {
        assert_eq!(self.shape().1, 1, "broadcast_cols expects a single column");
        self.unary(Op::BroadcastCols(self.id), |m| Mat::from_fn(m.rows(), c, |i, _| m.get(i, 0)))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |m| Mat::filled(1, 1, m.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn broadcast_scalar(self, r: usize, c: usize) -> Var<'t> {
        assert_eq!(self.shape(), (1, 1), "broadcast_scalar expects 1x1");
        self.unary(Op::BroadcastScalar(self.id), |m| Mat::filled(r, c, m.get(0, 0)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |m| m.map(sigmoid))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |m| m.map(softplus))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |m| m.map(f64::tanh))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |m| m.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), |m| m.map(f64::ln))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |m| m.map(|x| 1.0 / x))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |m| m.map(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn reshape(self, r: usize, c: usize) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |m| {
            Mat::from_vec(r, c, m.as_slice().to_vec()).expect("reshape preserves length")
        })
    }

    pub fn gather(self, map: Rc<IndexMap>) -> Var<'t> {
        assert_eq!(self.shape(), map.in_shape, "gather input shape");
        let m2 = Rc::clone(&map);
        self.unary(Op::Gather(self.id, map), move |m| m2.gather(m))
    }

    pub fn scatter(self, map: Rc<IndexMap>) -> Var<'t> {
        assert_eq!(self.shape(), map.out_shape, "scatter input shape");
        let m2 = Rc::clone(&map);
        self.unary(Op::Scatter(self.id, map), move |m| m2.scatter(m))
    }

    /// LeakyReLU as a product with a constant slope mask.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(Rc::new(mask))
    }

    /// PReLU with a learnable `1 x 1` negative slope.
    pub fn prelu(self, slope: Var<'t>) -> Var<'t> {
        let v = self.value();
        let pos = v.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let neg = v.map(|x| if x > 0.0 { 0.0 } else { 1.0 });
        let (r, c) = v.shape();
        self.mul_const(Rc::new(pos)) + slope.broadcast_scalar(r, c) * self.mul_const(Rc::new(neg))
    }

    /// Adds a `1 x c` bias to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let n = self.shape().0;
        self + bias.broadcast_rows(n)
    }

    /// Concatenates along columns.
    pub fn hcat(self, other: Var<'t>) -> Var<'t> {
        let (r, c1) = self.shape();
        let (r2, c2) = other.shape();
        assert_eq!(r, r2, "hcat row mismatch");
        let c = c1 + c2;
        let left = IndexMap::new(
            (r, c1),
            (r, c),
            (0..r * c).map(|o| {
                let (i, j) = (o / c, o % c);
                (j < c1).then(|| i * c1 + j)
            }).collect(),
        );
        let right = IndexMap::new(
            (r, c2),
            (r, c),
            (0..r * c).map(|o| {
                let (i, j) = (o / c, o % c);
                (j >= c1).then(|| i * c2 + (j - c1))
            }).collect(),
        );
        self.gather(Rc::new(left)) + other.gather(Rc::new(right))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(start + len <= c, "slice_cols out of range");
        let map = IndexMap::new((r, c), (r, len), (0..r * len).map(|o| Some((o / len) * c + start + o % len)).collect());
        self.gather(Rc::new(map))
    }

    /// Rows picked by `idx` (repetition allowed).
    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let (r, c) = self.shape();
        let map = IndexMap::new(
            (r, c),
            (idx.len(), c),
            idx.iter().flat_map(|&i| (0..c).map(move |j| Some(i * c + j))).collect(),
        );
        self.gather(Rc::new(map))
    }

    /// Row-wise log-sum-exp as an `r x 1` column.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let v = self.value();
        let maxes = Mat::from_fn(v.rows(), 1, |i, _| {
            v.row_slice(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        let c = v.cols();
        let shift = self.tape.constant(maxes.clone());
        let spread = self.tape.constant(Mat::from_fn(v.rows(), c, |i, _| maxes.get(i, 0)));
        (self - spread).exp().sum_cols().ln() + shift
    }

    /// Row-wise Euclidean norm as an `r x 1` column, `sqrt(sum x^2 + eps)`.
    pub fn row_norm(self, eps: f64) -> Var<'t> {
        self.square().sum_cols().add_scalar(eps).sqrt()
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.tape.push(value, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.tape.push(value, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "elementwise product shape mismatch");
        self.tape.push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |m| m.map(|x| -x))
    }
}
