//! Tape-based reverse-mode automatic differentiation over [`Grid`]s.
//!
//! A [`Graph`] owns every [`Node`] created while evaluating an expression.
//! Nodes are appended in evaluation order, so the tape is already in
//! topological order and `backward` walks it from the root down to index 0.
//!
//! Conventions:
//! - relu has subgradient 0 at 0;
//! - clamp passes gradient 1 strictly inside `(lo, hi)` and 0 at or outside the bounds;
//! - empty reductions produce 0 with zero gradient;
//! - broadcasting only covers a single-element grid against a full grid;
//! - gradients accumulate across repeated `backward` calls until [`Graph::zero_grad`].

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

pub use gradcheck::{finite_diff_check, GradCheckReport, InputReport};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    Neg,
    AddConst(f64),
    MulConst(f64),
}

impl Elementwise {
    fn name(&self) -> &'static str {
        match self {
            Elementwise::Relu => "relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Log => "log",
            Elementwise::Clamp { .. } => "clamp",
            Elementwise::Neg => "neg",
            Elementwise::AddConst(_) => "add_const",
            Elementwise::MulConst(_) => "mul_const",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Extent of a reduction.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Over {
    /// Every element; produces a scalar.
    All,
    /// Everything but the batch axis; produces a length-B vector.
    PerImage,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Elementwise {
        input: NodeId,
        func: Elementwise,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        op: BinaryOp,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: conv::Geometry,
    },
    Reduce {
        input: NodeId,
        reduction: Reduction,
        over: Over,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    ClipNonNegative {
        input: NodeId,
        defit: bool,
    },
}

/// One value in the graph together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Node<T> {
    value: Grid<T>,
    grad: Option<Grid<T>>,
    op: Op,
    requires_grad: bool,
}

impl<T: Real> Node<T> {
    pub fn value(&self) -> &Grid<T> {
        &self.value
    }

    /// Accumulated gradient; `None` until a backward pass reaches this node.
    pub fn grad(&self) -> Option<&Grid<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Real>(op: &'static str, grid: &Grid<T>) -> Result<()> {
    match grid.first_non_finite() {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Grid<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Grid<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of `id`, or zeros when no backward pass has reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Grid<T> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Grid::zeros(self.value(id).shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Grid<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Grid<T>, requires_grad: bool) -> Result<NodeId> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Grid<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn elementwise(&mut self, input: NodeId, func: Elementwise) -> Result<NodeId> {
        let x = self.value(input);
        if func == Elementwise::Log {
            if let Some((index, &v)) = x.data().iter().enumerate().find(|(_, &v)| v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value: v.as_f64(),
                });
            }
        }
        let value = match func {
            Elementwise::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Elementwise::Sigmoid => x.map(sigmoid),
            Elementwise::Log => x.map(|v| v.ln()),
            Elementwise::Clamp { lo, hi } => {
                let (lo, hi) = (T::of(lo), T::of(hi));
                x.map(|v| v.max(lo).min(hi))
            }
            Elementwise::Neg => x.map(|v| -v),
            Elementwise::AddConst(c) => {
                let c = T::of(c);
                x.map(|v| v + c)
            }
            Elementwise::MulConst(c) => {
                let c = T::of(c);
                x.map(|v| v * c)
            }
        };
        check_finite(func.name(), &value)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Elementwise { input, func }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Elementwise::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Elementwise::Sigmoid)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Elementwise::Log)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.elementwise(x, Elementwise::Clamp { lo, hi })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Elementwise::Neg)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.elementwise(x, Elementwise::AddConst(c))
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.elementwise(x, Elementwise::MulConst(c))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.neg(x)?;
        self.add_const(n, 1.0)
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, op: BinaryOp) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.is_scalar() {
            va.shape().to_vec()
        } else if va.is_scalar() {
            vb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "binary",
                format!("incompatible shapes {:?} and {:?}", va.shape(), vb.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = (0..n)
            .map(|i| {
                let x = if va.is_scalar() {
                    va.data()[0]
                } else {
                    va.data()[i]
                };
                let y = if vb.is_scalar() {
                    vb.data()[0]
                } else {
                    vb.data()[i]
                };
                f(x, y)
            })
            .collect();
        let value = Grid::new(&shape, data)?;
        check_finite("binary", &value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { a, b, op }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Cross-correlation of a `(B, C_in, H, W)` input with a
    /// `(C_out, C_in, k, k)` kernel plus a per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geometry = conv::Geometry::infer(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let value = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Grid::new(&geometry.output_shape(), value)?;
        check_finite("conv2d", &value)?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn reduce(&mut self, input: NodeId, reduction: Reduction, over: Over) -> Result<NodeId> {
        let x = self.value(input);
        let value = match over {
            Over::All => {
                let n = x.len();
                let s = x.sum();
                let v = match reduction {
                    _ if n == 0 => T::zero(),
                    Reduction::Sum => s,
                    Reduction::Mean => s / T::of(n as f64),
                };
                Grid::scalar(v)
            }
            Over::PerImage => {
                if x.shape().len() != 4 {
                    return Err(Error::shape(
                        "reduce",
                        format!("per-image reduction needs rank 4, got {:?}", x.shape()),
                    ));
                }
                let b = x.shape()[0];
                let per = x.len().checked_div(b).unwrap_or(0);
                let data = (0..b)
                    .map(|i| {
                        let s = x.data()[i * per..(i + 1) * per]
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + v);
                        match reduction {
                            _ if per == 0 => T::zero(),
                            Reduction::Sum => s,
                            Reduction::Mean => s / T::of(per as f64),
                        }
                    })
                    .collect();
                Grid::new(&[b], data)?
            }
        };
        check_finite("reduce", &value)?;
        let rg = self.needs(input);
        Ok(self.push(
            value,
            Op::Reduce {
                input,
                reduction,
                over,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(x, Reduction::Sum, Over::All)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(x, Reduction::Mean, Over::All)
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::shape(
                "upsample_nearest",
                "factor must be at least 1",
            ));
        }
        let x = self.value(input);
        let [b, c, h, w] = x.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for r in 0..oh {
                let row = &plane[(r / factor) * w..(r / factor + 1) * w];
                for col in 0..ow {
                    data.push(row[col / factor]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("needs rank >= 2, got {:?}", x.shape()),
            ));
        }
        shape[rank - 2] = oh;
        shape[rank - 1] = ow;
        let value = Grid::new(&shape, data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    /// `max(0, x)` applied elementwise, used for the non-negative risk correction.
    ///
    /// Forward is identical in both modes. Where `x < 0` the plain mode passes
    /// no gradient, while `defit` passes the gradient of `-x` so that training
    /// pushes the negative correction back up.
    pub fn clip_non_negative(&mut self, input: NodeId, defit: bool) -> Result<NodeId> {
        let value = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(input);
        Ok(self.push(value, Op::ClipNonNegative { input, defit }, rg))
    }

    /// Reverse-mode sweep from a single-element `root`.
    ///
    /// Every node that requires a gradient gets `∂root/∂value` added to its
    /// accumulated gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.needs(root) {
            return Ok(());
        }
        let mut pending: Vec<Option<Grid<T>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Grid::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(upstream) = pending[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &mut pending);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => g.add_assign(&upstream),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, index: usize, upstream: &Grid<T>, pending: &mut [Option<Grid<T>>]) {
        let node = &self.nodes[index];
        let mut send = |target: NodeId, grad: Grid<T>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut pending[target.0] {
                Some(g) => g.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        let g = upstream.data();
        match &node.op {
            Op::Leaf => {}
            Op::Elementwise { input, func } => {
                let x = self.value(*input);
                let y = &node.value;
                let data: Vec<T> = match *func {
                    Elementwise::Relu => x
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Elementwise::Sigmoid => y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect(),
                    Elementwise::Log => x.data().iter().zip(g).map(|(&v, &gv)| gv / v).collect(),
                    Elementwise::Clamp { lo, hi } => {
                        let (lo, hi) = (T::of(lo), T::of(hi));
                        x.data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gv)| if v > lo && v < hi { gv } else { T::zero() })
                            .collect()
                    }
                    Elementwise::Neg => g.iter().map(|&gv| -gv).collect(),
                    Elementwise::AddConst(_) => g.to_vec(),
                    Elementwise::MulConst(c) => {
                        let c = T::of(c);
                        g.iter().map(|&gv| gv * c).collect()
                    }
                };
                send(*input, Grid::new(x.shape(), data).expect("shape preserved"));
            }
            Op::Binary { a, b, op } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let operand = |v: &Grid<T>, i: usize| {
                    if v.is_scalar() {
                        v.data()[0]
                    } else {
                        v.data()[i]
                    }
                };
                let scale_a = |i: usize| match op {
                    BinaryOp::Add | BinaryOp::Sub => T::one(),
                    BinaryOp::Mul => operand(vb, i),
                };
                let scale_b = |i: usize| match op {
                    BinaryOp::Add => T::one(),
                    BinaryOp::Sub => -T::one(),
                    BinaryOp::Mul => operand(va, i),
                };
                let reduce_to = |v: &Grid<T>, scale: &dyn Fn(usize) -> T| {
                    let contrib = g.iter().enumerate().map(|(i, &gv)| gv * scale(i));
                    if v.is_scalar() && g.len() != 1 {
                        let total = contrib.fold(T::zero(), |acc, x| acc + x);
                        Grid::full(v.shape(), total)
                    } else {
                        Grid::new(v.shape(), contrib.collect()).expect("shape preserved")
                    }
                };
                if self.needs(*a) {
                    send(*a, reduce_to(va, &scale_a));
                }
                if self.needs(*b) {
                    send(*b, reduce_to(vb, &scale_b));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let grads = conv::backward(
                    geometry,
                    x.data(),
                    k.data(),
                    g,
                    conv::Wanted {
                        input: self.needs(*input),
                        kernel: self.needs(*kernel),
                        bias: self.needs(*bias),
                    },
                );
                if let Some(gx) = grads.input {
                    send(*input, Grid::new(x.shape(), gx).expect("shape preserved"));
                }
                if let Some(gk) = grads.kernel {
                    send(*kernel, Grid::new(k.shape(), gk).expect("shape preserved"));
                }
                if let Some(gb) = grads.bias {
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Grid::new(&shape, gb).expect("shape preserved"));
                }
            }
            Op::Reduce {
                input,
                reduction,
                over,
            } => {
                let x = self.value(*input);
                let n = x.len();
                let data = match over {
                    Over::All => {
                        let scale = match reduction {
                            Reduction::Sum => T::one(),
                            Reduction::Mean => T::one() / T::of(n.max(1) as f64),
                        };
                        vec![g[0] * scale; n]
                    }
                    Over::PerImage => {
                        let b = x.shape()[0];
                        let per = n.checked_div(b).unwrap_or(0);
                        let scale = match reduction {
                            Reduction::Sum => T::one(),
                            Reduction::Mean => T::one() / T::of(per.max(1) as f64),
                        };
                        let mut data = Vec::with_capacity(n);
                        for &gv in g.iter().take(b) {
                            data.extend(std::iter::repeat_n(gv * scale, per));
                        }
                        data
                    }
                };
                send(*input, Grid::new(x.shape(), data).expect("shape preserved"));
            }
            Op::Upsample { input, factor } => {
                let x = self.value(*input);
                let [_, _, h, w] = x.dims4();
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                let mut data = vec![T::zero(); x.len()];
                for (plane, gplane) in data.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
                    for r in 0..oh {
                        let dst = &mut plane[(r / f) * w..(r / f + 1) * w];
                        for (col, &gv) in gplane[r * ow..(r + 1) * ow].iter().enumerate() {
                            dst[col / f] = dst[col / f] + gv;
                        }
                    }
                }
                send(*input, Grid::new(x.shape(), data).expect("shape preserved"));
            }
            Op::ClipNonNegative { input, defit } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if *defit && v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*input, Grid::new(x.shape(), data).expect("shape preserved"));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(shape: &[usize], v: &[f64]) -> Grid<f64> {
        Grid::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(grid(&[3], &[0.0, -3.0, 2.0]), true).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let p = g.constant(grid(&[1], &[0.8])).unwrap();
        let l = g.log(p).unwrap();
        assert!((g.value(l).data()[0] - (-0.22314)).abs() < 1e-4);
    }

    #[test]
    fn log_of_non_positive_names_index() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(grid(&[3], &[1.0, 0.5, 0.0])).unwrap();
        match g.log(x) {
            Err(Error::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 2);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn binary_examples_and_scalar_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(grid(&[2], &[3.0, 1.0])).unwrap();
        let b = g.constant(grid(&[2], &[1.0, 4.0])).unwrap();
        let d = g.sub(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[2.0, -3.0]);

        let zero = g.constant(Grid::scalar(0.0)).unwrap();
        let one = g.constant(Grid::scalar(1.0)).unwrap();
        let s = g.add(a, zero).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let m = g.mul(one, a).unwrap();
        assert_eq!(g.value(m), g.value(a));

        let c = g.constant(grid(&[3], &[1.0, 2.0, 3.0])).unwrap();
        match g.add(a, c) {
            Err(Error::Shape { detail, .. }) => {
                assert!(detail.contains("[2]") && detail.contains("[3]"), "{detail}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(grid(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item(), 6.0);

        let c = g.constant(Grid::full(&[2, 2], 1.5)).unwrap();
        let m = g.mean(c).unwrap();
        assert_eq!(g.value(m).item(), 1.5);

        let p = g
            .constant(grid(&[1, 1, 2, 2], &[0.9, 0.9, 0.1, 0.1]))
            .unwrap();
        let per = g.reduce(p, Reduction::Sum, Over::PerImage).unwrap();
        assert_eq!(g.value(per).shape(), &[1]);
        assert!((g.value(per).data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reduction_is_zero_with_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Grid::zeros(&[0]), true).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().len(), 0);
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(grid(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true)
            .unwrap();
        let same = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let up = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(up).shape(), &[1, 1, 4, 4]);
        assert_eq!(
            g.value(up).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let s = g.sum(up).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Grid::zeros(&[4]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Grid::zeros(&[4]), true).unwrap();
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Grid::zeros(&[3]), true).unwrap();
        let sg = g.sigmoid(x).unwrap();
        let s = g.sum(sg).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 3]);
    }

    #[test]
    fn node_used_twice_accumulates_both_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(grid(&[3], &[1.0, -2.0, 0.5]), true).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(grid(&[2], &[1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Grid::zeros(&[2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn clamp_and_relu_gradient_conventions() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(grid(&[5], &[0.0, 0.5, 1.0, -1.0, 2.0]), true)
            .unwrap();
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let r = g.relu(x).unwrap();
        let sc = g.sum(c).unwrap();
        g.backward(sc).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
        g.zero_grad();
        let sr = g.sum(r).unwrap();
        g.backward(sr).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn clip_modes_differ_only_in_gradient() {
        for defit in [false, true] {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(grid(&[2], &[-0.5, 0.25]), true).unwrap();
            let c = g.clip_non_negative(x, defit).unwrap();
            assert_eq!(g.value(c).data(), &[0.0, 0.25]);
            let s = g.sum(c).unwrap();
            g.backward(s).unwrap();
            let expected = if defit { [-1.0, 1.0] } else { [0.0, 1.0] };
            assert_eq!(g.grad(x).unwrap().data(), &expected);
        }
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(grid(&[2], &[1.0, 1e300])).unwrap();
        let y = g.constant(grid(&[2], &[1.0, 1e300])).unwrap();
        assert!(matches!(
            g.mul(x, y),
            Err(Error::NonFinite {
                op: "binary",
                index: 1
            })
        ));
        assert!(g.leaf(grid(&[1], &[f64::NAN]), true).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(grid(&[2], &[1.0, 2.0]), true).unwrap();
        let c = g.constant(grid(&[2], &[3.0, 4.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
