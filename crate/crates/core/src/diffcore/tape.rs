//! Array-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of a forward pass over rank-2
//! arrays. Parameters are borrowed from a [`ParamStore`] and interned by
//! name, so a weight used at every time step is a single leaf whose
//! gradient accumulates across uses. [`Graph::backward`] replays the
//! record in reverse from a scalar root.
//!
//! Binary element-wise operations broadcast singleton rows/columns in
//! either operand; the backward pass sums the gradient back onto the
//! operand's shape.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

use super::params::ParamStore;
use super::GradMap;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Rows(Var, usize),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Reshape(Var),
}

enum Value<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

struct Node<'a> {
    op: Op,
    value: Value<'a>,
}

/// Forward record of one loss evaluation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
}

fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `grad` down to `shape`, undoing a broadcast.
fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    /// Leaf for a stored parameter. Repeated calls return the same leaf.
    ///
    /// Panics when the entry does not exist; model code only asks for
    /// entries it created.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter entry `{name}`"));
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Borrowed(value),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Entry names of every parameter leaf recorded so far.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        broadcast_shape(self.shape(a), self.shape(b));
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        broadcast_shape(self.shape(a), self.shape(b));
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        broadcast_shape(self.shape(a), self.shape(b));
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(Op::Scale(a, k), v)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Offset(a), v)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(elu_scalar);
        self.push(Op::Elu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// `len` consecutive rows starting at `start`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::Rows(a, start), v)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.rows(a, i, 1)
    }

    /// Column-wise concatenation; all parts share the row count.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("hcat: row counts differ");
        self.push(Op::HCat(parts.to_vec()), v)
    }

    /// Row-wise concatenation; all parts share the column count.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vcat: column counts differ");
        self.push(Op::VCat(parts.to_vec()), v)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        self.push(Op::Reshape(a), v)
    }

    /// Reverse pass from a 1×1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param | Op::Const => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    accumulate(&mut grads[b.0], reduce_to(g.clone(), sb));
                    accumulate(&mut grads[a.0], reduce_to(g, sa));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    accumulate(&mut grads[b.0], reduce_to(-&g, sb));
                    accumulate(&mut grads[a.0], reduce_to(g, sa));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = reduce_to(&g * vb, va.dim());
                    let gb = reduce_to(&g * va, vb.dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.dot(&vb.t());
                    let gb = va.t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::Offset(a) => accumulate(&mut grads[a.0], g),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut d = x.mapv(|x| if x > 0.0 { 1.0 } else { x.exp() });
                    d *= &g;
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => {
                    let y = self.value(Var(i));
                    accumulate(&mut grads[a.0], g * y);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], g / x);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], g * x * 2.0);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    accumulate(&mut grads[a.0], Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Rows(a, start) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    let len = g.nrows();
                    full.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    accumulate(&mut grads[a.0], full);
                }
                Op::HCat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let part = g.slice(s![.., col..col + w]).to_owned();
                        accumulate(&mut grads[p.0], part);
                        col += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        let part = g.slice(s![row..row + h, ..]).to_owned();
                        accumulate(&mut grads[p.0], part);
                        row += h;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(
                        &mut grads[a.0],
                        Array2::from_shape_vec(shape, flat).expect("reshape grad"),
                    );
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            if v.0 <= root.0 {
                if let Some(g) = grads[v.0].take() {
                    params.insert(name.clone(), g);
                }
            }
        }
        Gradients { params }
    }
}

/// Result of a reverse pass: gradients of every parameter leaf reached.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    /// Gradient map over every entry of `store`; entries the pass never
    /// reached get exact zeros.
    pub fn into_full(mut self, store: &ParamStore) -> GradMap {
        store
            .iter()
            .map(|(name, value)| {
                let g = self.params.remove(name).unwrap_or_else(|| Array2::zeros(value.dim()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Only the entries the pass reached.
    pub fn into_touched(self) -> GradMap {
        self.params
    }
}
