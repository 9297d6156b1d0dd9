//! Reverse-mode differentiation over a per-evaluation operation tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. Tapes are cheap and short-lived: build one per
//! loss evaluation and drop it afterwards.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::ops::Index;

use super::kernels::{self, ConvGeom};
use super::{NumericsError, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Vector-Jacobian product for a caller-defined primitive:
/// `(upstream gradient, input values, output value) -> one gradient per input`.
pub type CustomVjp = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv3x3 { x: Var, k: Var, b: Var, geom: ConvGeom },
    BiasFirst(Var, Var),
    BiasLast(Var, Var),
    Silu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    SelectRow(Var, usize),
    Sum(Var),
    Custom {
        name: String,
        inputs: Vec<Var>,
        vjp: Option<CustomVjp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Records a leaf (input or parameter).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(&vb, op)?;
        va.zip_map(&vb, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var, NumericsError> {
        let v = super::elementwise(super::ElementwiseKind::Sqrt, &self.value(a), None)?;
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = kernels::matmul(&self.value(a), &self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NumericsError> {
        let v = kernels::transpose(&self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn conv3x3(&self, x: Var, k: Var, b: Var) -> Result<Var, NumericsError> {
        let (v, geom) = {
            let (vx, vk, vb) = (self.value(x), self.value(k), self.value(b));
            let geom = ConvGeom::check(&vx, &vk, &vb)?;
            (kernels::conv3x3(&vx, &vk, &vb)?, geom)
        };
        Ok(self.push(v, Op::Conv3x3 { x, k, b, geom }))
    }

    /// Adds `b[C]` to every element of channel `c` of `x[C, ...]`.
    pub fn bias_first(&self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let v = {
            let (vx, vb) = (self.value(x), self.value(b));
            let c = vx.shape().first().copied().unwrap_or(0);
            if vb.shape() != [c] {
                return Err(NumericsError::ShapeMismatch {
                    op: "bias_first",
                    left: vx.shape().to_vec(),
                    right: vb.shape().to_vec(),
                });
            }
            let inner = vx.len() / c.max(1);
            let mut out = vx.data().to_vec();
            for (ch, &bias) in vb.data().iter().enumerate() {
                out[ch * inner..(ch + 1) * inner].iter_mut().for_each(|o| *o += bias);
            }
            Tensor::from_parts(vx.shape().to_vec(), out)
        };
        Ok(self.push(v, Op::BiasFirst(x, b)))
    }

    /// Adds `b[D]` to every row of `x[N×D]`.
    pub fn bias_last(&self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let v = {
            let (vx, vb) = (self.value(x), self.value(b));
            let d = vx.shape().last().copied().unwrap_or(0);
            if vb.shape() != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "bias_last",
                    left: vx.shape().to_vec(),
                    right: vb.shape().to_vec(),
                });
            }
            let mut out = vx.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
            }
            Tensor::from_parts(vx.shape().to_vec(), out)
        };
        Ok(self.push(v, Op::BiasLast(x, b)))
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&self, a: Var) -> Result<Var, NumericsError> {
        let v = {
            let va = self.value(a);
            let (_, d) = kernels::dims2(&va, "softmax_rows")?;
            let mut out = va.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
            Tensor::from_parts(va.shape().to_vec(), out)
        };
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Concatenates along the first axis; trailing dimensions must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        let v = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals.first().ok_or(NumericsError::Empty("concat"))?;
            let tail = first.shape().get(1..).unwrap_or(&[]).to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for t in &vals {
                if t.shape().len() != tail.len() + 1 || t.shape()[1..] != tail[..] {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        left: first.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Row `index` of a 2-D table, as a `[1×D]` tensor.
    pub fn select_row(&self, table: Var, index: usize) -> Result<Var, NumericsError> {
        let v = {
            let vt = self.value(table);
            let (rows, d) = kernels::dims2(&vt, "select_row")?;
            if index >= rows {
                return Err(NumericsError::Index { index, len: rows });
            }
            Tensor::from_parts(vec![1, d], vt.data()[index * d..(index + 1) * d].to_vec())
        };
        Ok(self.push(v, Op::SelectRow(table, index)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Records a caller-defined primitive. Without a `vjp`, the primitive is
    /// unregistered for differentiation and [`Graph::backward`] rejects any
    /// tape that needs to pass a gradient through it.
    pub fn custom(&self, name: impl Into<String>, inputs: &[Var], value: Tensor, vjp: Option<CustomVjp>) -> Var {
        self.push(
            value,
            Op::Custom {
                name: name.into(),
                inputs: inputs.to_vec(),
                vjp,
            },
        )
    }

    /// Reverse sweep from a one-element output. Entry `i` of the result is the
    /// gradient with respect to node `i`, or `None` if it does not influence
    /// the output.
    pub fn backward(&self, output: Var) -> Result<Vec<Option<Tensor>>, NumericsError> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.len() != 1 {
            return Err(NumericsError::NonScalarOutput(nodes[output.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                    acc(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
                Op::Neg(a) => acc(&mut grads, *a, g.scale(-1.0)),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)?),
                Op::Sqrt(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| 0.5 * x / y)?),
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_into(g.data(), vb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_into(va.data(), g.data(), &mut gb, k, m, n);
                    acc(&mut grads, *a, Tensor::from_parts(vec![m, k], ga));
                    acc(&mut grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
                Op::Transpose(a) => acc(&mut grads, *a, kernels::transpose(&g)?),
                Op::Conv3x3 { x, k, b, geom } => {
                    let (dx, dk, db) = kernels::conv3x3_backward(val(*x), val(*k), g.data(), *geom);
                    acc(&mut grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                    acc(&mut grads, *k, Tensor::from_parts(val(*k).shape().to_vec(), dk));
                    acc(&mut grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
                Op::BiasFirst(x, b) => {
                    let c = val(*b).len();
                    let inner = g.len() / c.max(1);
                    let gb = (0..c).map(|ch| g.data()[ch * inner..(ch + 1) * inner].iter().sum()).collect();
                    acc(&mut grads, *b, Tensor::from_parts(vec![c], gb));
                    acc(&mut grads, *x, g.clone());
                }
                Op::BiasLast(x, b) => {
                    let d = val(*b).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, r)| *o += r);
                    }
                    acc(&mut grads, *b, Tensor::from_parts(vec![d], gb));
                    acc(&mut grads, *x, g.clone());
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(val(*a), |gy, x| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })?;
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => acc(&mut grads, *a, g.zip_map(val(*a), |gy, x| gy * sigmoid(x))?),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let d = y.shape()[1];
                    let mut out = vec![0.0; y.len()];
                    for ((o, gy), yy) in out.chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            o[j] = yy[j] * (gy[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(val(*a), |gy, x| if x < *lo || x > *hi { 0.0 } else { gy })?;
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = val(*p).shape().to_vec();
                        let n = val(*p).len();
                        acc(&mut grads, *p, Tensor::from_parts(shape, g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Reshape(a) => acc(&mut grads, *a, g.reshape(val(*a).shape())?),
                Op::SelectRow(table, index) => {
                    let vt = val(*table);
                    let d = vt.shape()[1];
                    let mut gt = Tensor::zeros(vt.shape());
                    gt.data_mut()[index * d..(index + 1) * d].copy_from_slice(g.data());
                    acc(&mut grads, *table, gt);
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), gs));
                }
                Op::Custom { name, inputs, vjp } => {
                    let Some(vjp) = vjp else {
                        return Err(NumericsError::Unregistered(name.clone()));
                    };
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let gs = vjp(&g, &ins, &node.value);
                    if gs.len() != inputs.len() {
                        return Err(NumericsError::Unregistered(format!("{name} (vjp arity)")));
                    }
                    for (v, gi) in inputs.iter().zip(gs) {
                        val(*v).expect_same_shape(&gi, "custom vjp")?;
                        acc(&mut grads, *v, gi);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Parameter leaves registered on a graph, addressable by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(graph: &Graph, params: &ParamStore) -> Self {
        Self {
            vars: params.iter().map(|(k, t)| (k.clone(), graph.leaf(t.clone()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl Index<&str> for ParamVars {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }
}

/// Evaluates a scalar function of `params` and its gradient with respect to
/// every parameter. Parameters the function ignores receive zero gradients.
pub fn value_and_grad<F, E>(params: &ParamStore, f: F) -> Result<(f64, ParamStore), E>
where
    F: FnOnce(&Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let graph = Graph::new();
    let vars = ParamVars::register(&graph, params);
    let out = f(&graph, &vars)?;
    let value = graph.value(out).item();
    let mut grads = graph.backward(out)?;
    let store = vars
        .iter()
        .map(|(name, v)| {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(params.get(name).expect("registered").shape()));
            (name.clone(), g)
        })
        .collect();
    Ok((value, store))
}

/// Evaluates a scalar function of `params` without differentiating it.
pub fn value_only<F, E>(params: &ParamStore, f: F) -> Result<f64, E>
where
    F: FnOnce(&Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let graph = Graph::new();
    let vars = ParamVars::register(&graph, params);
    let out = f(&graph, &vars)?;
    let v = graph.value(out);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarOutput(v.shape().to_vec()).into());
    }
    Ok(v.item())
}
