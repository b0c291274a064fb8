//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Leaves are
//! either trainable parameters (tagged with a name so gradients can be looked
//! up after [`Graph::backward`]) or constants. Nodes whose inputs are all
//! constant are themselves constant and are skipped by the backward pass, which
//! is how frozen networks stay out of the gradient computation.
//!
//! Images use channels-last layout: `[batch, height, width, channels]`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::array::{gemm, Array, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn out_rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Upsample2x(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Exp(usize),
    Softplus(usize),
    Abs(usize),
    Sqr(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    SliceLast {
        x: usize,
        start: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Operation tape. Create one per optimization step.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    id: usize,
    graph: &'g Graph<T>,
}

/// Parameter gradients produced by [`Graph::backward`], keyed by the name the
/// parameter was bound with.
#[derive(Debug, Default)]
pub struct Gradients<T: Float> {
    by_name: BTreeMap<String, Array<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, value: Array<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&self, value: Arc<Array<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Binds a trainable parameter. Binding the same name twice returns the
    /// same node so gradients accumulate in one place.
    pub fn param(&self, name: &str, value: &Arc<Array<T>>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { id, graph: self };
        }
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: value.clone(),
                op: Op::Leaf,
                tracked: true,
            });
            Var {
                id: nodes.len() - 1,
                graph: self,
            }
        };
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].tracked {
            return Gradients::default();
        }
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |target: usize, contrib: Array<T>| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Array<T> { &nodes[i].value };
            let tracked = |i: usize| nodes[i].tracked;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if tracked(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if tracked(*b) {
                        send(*b, g.map(|v| -v));
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if tracked(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if tracked(*b) {
                        send(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => send(*a, g),
                Op::AddBias(x, b) => {
                    if tracked(*b) {
                        let n = val(*b).len();
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        send(*b, Array::from_vec(val(*b).shape(), gb));
                    }
                    send(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if tracked(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                        send(*a, Array::from_vec(&[m, k], ga));
                    }
                    if tracked(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                        send(*b, Array::from_vec(&[k, n], gb));
                    }
                }
                Op::Conv2d { x, w, cols, geom } => {
                    let rows = geom.out_rows();
                    let patch = geom.patch();
                    if tracked(*w) {
                        let mut gw = vec![T::zero(); patch * geom.cout];
                        gemm(
                            patch,
                            rows,
                            geom.cout,
                            cols,
                            true,
                            g.data(),
                            false,
                            &mut gw,
                            false,
                        );
                        send(*w, Array::from_vec(&[patch, geom.cout], gw));
                    }
                    if tracked(*x) {
                        let mut gcols = vec![T::zero(); rows * patch];
                        gemm(
                            rows,
                            geom.cout,
                            patch,
                            g.data(),
                            false,
                            val(*w).data(),
                            true,
                            &mut gcols,
                            false,
                        );
                        send(*x, col2im(&gcols, geom));
                    }
                }
                Op::Upsample2x(x) => {
                    let s = val(*x).shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut gx = vec![T::zero(); n * h * w * c];
                    let gd = g.data();
                    for b in 0..n {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let src = ((b * 2 * h + y) * 2 * w + xx) * c;
                                let dst = ((b * h + y / 2) * w + xx / 2) * c;
                                for ch in 0..c {
                                    gx[dst + ch] += gd[src + ch];
                                }
                            }
                        }
                    }
                    send(*x, Array::from_vec(s, gx));
                }
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    send(
                        *x,
                        g.zip_map(
                            val(*x),
                            |gv, xv| if xv > T::zero() { gv } else { gv * slope },
                        ),
                    );
                }
                Op::Tanh(x) => {
                    send(*x, g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y)));
                }
                Op::Exp(x) => send(*x, g.zip_map(&node.value, |gv, y| gv * y)),
                Op::Softplus(x) => send(
                    *x,
                    g.zip_map(val(*x), |gv, xv| gv / (T::one() + (-xv).exp())),
                ),
                Op::Abs(x) => send(
                    *x,
                    g.zip_map(val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Sqr(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv * (xv + xv))),
                Op::Reshape(x) => send(*x, g.reshape(val(*x).shape())),
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).last_dim();
                        if tracked(p) {
                            let mut gp = Vec::with_capacity(rows * width);
                            for r in 0..rows {
                                let base = r * total + offset;
                                gp.extend_from_slice(&g.data()[base..base + width]);
                            }
                            send(p, Array::from_vec(val(p).shape(), gp));
                        }
                        offset += width;
                    }
                }
                Op::SliceLast { x, start } => {
                    let src = val(*x);
                    let total = src.last_dim();
                    let width = node.value.last_dim();
                    let mut gx = vec![T::zero(); src.len()];
                    for (r, row) in g.data().chunks(width).enumerate() {
                        gx[r * total + start..r * total + start + width].copy_from_slice(row);
                    }
                    send(*x, Array::from_vec(src.shape(), gx));
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    send(*x, Array::full(val(*x).shape(), gv));
                }
                Op::MeanAll(x) => {
                    let n = T::from_usize(val(*x).len()).unwrap();
                    let gv = g.item() / n;
                    send(*x, Array::full(val(*x).shape(), gv));
                }
                Op::SumLast(x) => {
                    let src = val(*x);
                    let width = src.last_dim();
                    let mut gx = Vec::with_capacity(src.len());
                    for &gv in g.data() {
                        gx.extend(std::iter::repeat_n(gv, width));
                    }
                    send(*x, Array::from_vec(src.shape(), gx));
                }
            }
        }

        let by_name = self
            .params
            .borrow()
            .iter()
            .filter_map(|(name, &id)| grads[id].take().map(|g| (name.clone(), g)))
            .collect();
        Gradients { by_name }
    }
}

fn im2col<T: Float>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let patch = geom.patch();
    let mut cols = vec![T::zero(); geom.out_rows() * patch];
    let cin = geom.cin;
    for b in 0..geom.n {
        for oy in 0..geom.oh {
            for ox in 0..geom.ow {
                let row = ((b * geom.oh + oy) * geom.ow + ox) * patch;
                for ky in 0..geom.k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for kx in 0..geom.k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        let src = ((b * geom.h + iy as usize) * geom.w + ix as usize) * cin;
                        let dst = row + (ky * geom.k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], geom: &ConvGeom) -> Array<T> {
    let patch = geom.patch();
    let cin = geom.cin;
    let mut x = vec![T::zero(); geom.n * geom.h * geom.w * cin];
    for b in 0..geom.n {
        for oy in 0..geom.oh {
            for ox in 0..geom.ow {
                let row = ((b * geom.oh + oy) * geom.ow + ox) * patch;
                for ky in 0..geom.k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for kx in 0..geom.k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        let dst = ((b * geom.h + iy as usize) * geom.w + ix as usize) * cin;
                        let src = row + (ky * geom.k + kx) * cin;
                        for c in 0..cin {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    Array::from_vec(&[geom.n, geom.h, geom.w, cin], x)
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Array<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Whether gradients flow back through this node.
    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, value: Array<T>, op: Op<T>) -> Self {
        let tracked = self.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn binary(self, other: Self, value: Array<T>, op: Op<T>) -> Self {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
        let tracked = self.is_tracked() || other.is_tracked();
        self.graph.push(value, op, tracked)
    }

    /// Constant copy of this node's value; gradients stop here.
    pub fn detach(self) -> Self {
        self.graph.constant_arc(self.value())
    }

    pub fn add(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::lit(s);
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Self {
        let s = T::lit(s);
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        assert_eq!(b.len(), x.last_dim(), "bias length mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.binary(bias, out, Op::AddBias(self.id, bias.id))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(
            b.shape()[0],
            k,
            "matmul inner dims {:?} {:?}",
            a.shape(),
            b.shape()
        );
        let n = b.shape()[1];
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.binary(
            other,
            Array::from_vec(&[m, n], out),
            Op::MatMul(self.id, other.id),
        )
    }

    /// Square-kernel convolution of an NHWC input with a `[k*k*cin, cout]`
    /// weight matrix (patch order: row, column, channel).
    pub fn conv2d(self, weight: Self, k: usize, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d input must be NHWC");
        let (n, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        assert_eq!(w.shape()[0], k * k * cin, "conv2d weight rows");
        let cout = w.shape()[1];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            k,
            stride,
            pad,
            oh,
            ow,
            cout,
        };
        let cols = im2col(x.data(), &geom);
        let rows = geom.out_rows();
        let mut out = vec![T::zero(); rows * cout];
        gemm(
            rows,
            geom.patch(),
            cout,
            &cols,
            false,
            w.data(),
            false,
            &mut out,
            false,
        );
        let value = Array::from_vec(&[n, oh, ow, cout], out);
        let cols = if self.is_tracked() || weight.is_tracked() {
            cols
        } else {
            Vec::new()
        };
        self.binary(
            weight,
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                cols,
                geom,
            },
        )
    }

    /// Nearest-neighbour 2× spatial upsampling of an NHWC tensor.
    pub fn upsample2x(self) -> Self {
        let x = self.value();
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        let xd = x.data();
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let dst = ((b * 2 * h + y) * 2 * w + xx) * c;
                    let src = ((b * h + y / 2) * w + xx / 2) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        self.unary(
            Array::from_vec(&[n, 2 * h, 2 * w, c], out),
            Op::Upsample2x(self.id),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::lit(slope);
        let v = self.value().map(|a| if a > T::zero() { a } else { a * s });
        self.unary(v, Op::LeakyRelu(self.id, s))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn tanh(self) -> Self {
        let v = self.value().map(|a| a.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|a| a.exp());
        self.unary(v, Op::Exp(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Self {
        let v = self
            .value()
            .map(|a| a.max(T::zero()) + (-a.abs()).exp().ln_1p());
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn abs(self) -> Self {
        let v = self.value().map(|a| a.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sqr(self) -> Self {
        let v = self.value().map(|a| a * a);
        self.unary(v, Op::Sqr(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Self {
        let s = self.shape();
        let rest = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "concat of zero vars");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].shape().len() - 1];
        for v in &values {
            assert_eq!(
                &v.shape()[..v.shape().len() - 1],
                lead,
                "concat leading dims"
            );
        }
        let rows = values[0].rows();
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let w = v.last_dim();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let tracked = parts.iter().any(|p| p.is_tracked());
        graph.push(
            Array::from_vec(&shape, out),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            tracked,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let total = x.last_dim();
        assert!(start + len <= total, "slice out of range");
        let mut out = Vec::with_capacity(x.rows() * len);
        for row in x.data().chunks(total) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.unary(
            Array::from_vec(&shape, out),
            Op::SliceLast { x: self.id, start },
        )
    }

    pub fn sum(self) -> Self {
        let v = self.value().data().iter().copied().sum();
        self.unary(Array::scalar(v), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let x = self.value();
        let n = T::from_usize(x.len()).unwrap();
        let v = x.data().iter().copied().sum::<T>() / n;
        self.unary(Array::scalar(v), Op::MeanAll(self.id))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Self {
        let x = self.value();
        let width = x.last_dim();
        let out: Vec<T> = x
            .data()
            .chunks(width)
            .map(|r| r.iter().copied().sum())
            .collect();
        let shape = &x.shape()[..x.shape().len().saturating_sub(1)];
        self.unary(Array::from_vec(shape, out), Op::SumLast(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(
        x0: &Array<f64>,
        f: impl for<'a> Fn(&'a Graph<f64>, Var<'a, f64>) -> f64,
    ) -> Vec<f64> {
        let eps = 1e-5;
        (0..x0.len())
            .map(|i| {
                let mut plus = x0.clone();
                plus.data_mut()[i] += eps;
                let mut minus = x0.clone();
                minus.data_mut()[i] -= eps;
                let gp = Graph::new();
                let fp = f(&gp, gp.constant(plus));
                let gm = Graph::new();
                let fm = f(&gm, gm.constant(minus));
                (fp - fm) / (2.0 * eps)
            })
            .collect()
    }

    fn check(
        shape: &[usize],
        seed: u64,
        f: impl for<'a> Fn(&'a Graph<f64>, Var<'a, f64>) -> Var<'a, f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array::<f64>::randn(shape, 1.0, &mut rng);
        let g = Graph::new();
        let x = g.param("x", &Arc::new(x0.clone()));
        let loss = f(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.get("x").expect("gradient for x").clone();
        let numeric = numeric_grad(&x0, |g, v| f(g, v).item());
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Array::<f64>::randn(&[3 * 3 * 2, 3], 0.5, &mut rng);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let w = w.clone();
            check(&[2, 5, 5, 2], 3, move |g, x| {
                let wv = g.constant(w.clone());
                x.conv2d(wv, 3, stride, pad).tanh().sum()
            });
        }
        let x = Array::<f64>::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        check(&[18, 3], 5, move |g, w| {
            g.constant(x.clone()).conv2d(w, 3, 2, 1).sqr().mean()
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check(&[3, 4], 1, |g, x| {
            let b = g.constant(Array::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]));
            x.add_bias(b).softplus().mul(x).exp().sum_last().mean()
        });
        check(&[2, 2, 2, 3], 2, |_, x| {
            x.upsample2x().leaky_relu(0.2).abs().sum()
        });
        check(&[4, 6], 3, |_, x| {
            let a = x.slice_last(0, 2);
            let b = x.slice_last(2, 4);
            Var::concat(&[b, a.scale(3.0)]).sqr().flatten().mean()
        });
        check(&[3, 5], 4, |g, x| {
            let w = g.constant(Array::from_vec(
                &[5, 2],
                (0..10).map(|i| i as f64 * 0.1).collect(),
            ));
            x.matmul(w)
                .sub(x.slice_last(0, 2))
                .add_scalar(1.0)
                .tanh()
                .sum()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f32>::new();
        let p = g.param("p", &Arc::new(Array::full(&[2], 1.0)));
        let c = g.constant(Array::full(&[2], 2.0));
        let frozen = p.detach();
        let loss = c.mul(frozen).sum();
        assert!(!loss.is_tracked());
        assert!(g.backward(loss).is_empty());
        let loss = c.mul(p).sum();
        assert_eq!(g.backward(loss).get("p").unwrap().data(), &[2.0, 2.0]);
    }
}
