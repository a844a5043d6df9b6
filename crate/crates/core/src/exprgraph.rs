//! Expression graphs standing in for neural networks.
//!
//! All nets live in a hash-consed arena ([`Graph`]); a [`Net`] is a handle to
//! one output node. Structurally identical nodes are created once, so shared
//! subexpressions (for example, the iterate `û_t` inside `û_{t+1}`, or a
//! derivative reached along two paths) are counted once.
//!
//! Parameter counting convention:
//!
//! | node      | parameters                                          |
//! |-----------|-----------------------------------------------------|
//! | input     | 0                                                   |
//! | constant  | 1 (a bias)                                          |
//! | affine    | weights + 1 bias                                    |
//! | activation| 1 wiring edge                                       |
//! | add       | 2 wiring edges                                      |
//! | mul       | 10: the subnetwork `½(a+b)² − ½a² − ½b²`, i.e. an     |
//! |           | affine `a+b` (3), three squares (3), an affine (4)  |
//!
//! A mul node is stored once and evaluated through that three-squares form.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU32, Ordering};

use serde_json::{json, Value};
use thiserror::Error;

use crate::field::{Factor, ScalarField};
use crate::grid::{Grid, GridError, GridFunction};
use crate::operator::{DiscreteOperator, OperatorError};
use crate::report::{fmt17, num};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("net belongs to a different graph")]
    ForeignNet,
    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("point has {got} coordinates, graph expects {expected}")]
    PointDimension { expected: usize, got: usize },
    #[error("coefficient matrix has {got} entries, expected {expected}")]
    CoefficientShape { expected: usize, got: usize },
    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: u32, value: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Pinned backpropagation constant: `size(∂g) <= C_BP · (depth(g) + N(g))`.
pub const C_BP: f64 = 3.0;
/// Pinned recursion constant: `N_{t+1} <= C_REC · (d²(N_A + N_t) + N_t + N_f + N_c)`.
pub const C_REC: f64 = 3.0;
/// Pinned constant of the unrolled size bound
/// `N_T <= C_UNROLL · (d^{2T}(N_0 + N_A) + T(N_f + N_c))` for `T <= 5`.
///
/// The largest measured ratio is 46.3, for `d = 1` with variable coefficients,
/// where each step adds higher derivatives of `Ã` and `c̃` that the `d^{2T}`
/// factor does not absorb.
pub const C_UNROLL: f64 = 64.0;
/// Last step at which the unrolled bound is asserted; later steps are reported.
pub const UNROLLED_MAX_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Sin,
    Cos,
    Exp,
    Square,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sin => "sin",
            Activation::Cos => "cos",
            Activation::Exp => "exp",
            Activation::Square => "square",
        }
    }

    fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Sin => y.sin(),
            Activation::Cos => y.cos(),
            Activation::Exp => y.exp(),
            Activation::Square => y * y,
        }
    }

    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Sin => y.cos(),
            Activation::Cos => -y.sin(),
            Activation::Exp => y.exp(),
            Activation::Square => 2.0 * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input(usize),
    Const(f64),
    Affine { terms: Vec<(f64, u32)>, bias: f64 },
    Act(Activation, u32),
    Add(u32, u32),
    Mul(u32, u32),
}

impl Node {
    pub fn params(&self) -> usize {
        match self {
            Node::Input(_) => 0,
            Node::Const(_) => 1,
            Node::Affine { terms, .. } => terms.len() + 1,
            Node::Act(..) => 1,
            Node::Add(..) => 2,
            Node::Mul(..) => 10,
        }
    }

    fn children(&self) -> Vec<u32> {
        match self {
            Node::Input(_) | Node::Const(_) => Vec::new(),
            Node::Affine { terms, .. } => terms.iter().map(|t| t.1).collect(),
            Node::Act(_, a) => vec![*a],
            Node::Add(a, b) | Node::Mul(a, b) => vec![*a, *b],
        }
    }

    fn key(&self) -> Key {
        match self {
            Node::Input(i) => Key::Input(*i),
            Node::Const(v) => Key::Const(canonical_bits(*v)),
            Node::Affine { terms, bias } => Key::Affine(
                terms.iter().map(|(w, n)| (canonical_bits(*w), *n)).collect(),
                canonical_bits(*bias),
            ),
            Node::Act(a, n) => Key::Act(*a, *n),
            Node::Add(a, b) => Key::Add(*a, *b),
            Node::Mul(a, b) => Key::Mul(*a, *b),
        }
    }
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Input(usize),
    Const(u64),
    Affine(Vec<(u64, u32)>, u64),
    Act(Activation, u32),
    Add(u32, u32),
    Mul(u32, u32),
}

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Net {
    graph: u32,
    node: u32,
}

impl Net {
    pub fn node(self) -> u32 {
        self.node
    }
}

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

#[derive(Debug)]
pub struct Graph {
    id: u32,
    dim: usize,
    nodes: Vec<Node>,
    index: HashMap<Key, u32>,
    derivatives: HashMap<(u32, usize), u32>,
}

impl Graph {
    pub fn new(dim: usize) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            dim,
            nodes: Vec::new(),
            index: HashMap::new(),
            derivatives: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nodes ever created in the arena, reachable or not.
    pub fn arena_len(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, net: Net) -> Result<&Node, GraphError> {
        self.check(net)?;
        Ok(&self.nodes[net.node as usize])
    }

    fn check(&self, net: Net) -> Result<(), GraphError> {
        if net.graph == self.id && (net.node as usize) < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::ForeignNet)
        }
    }

    fn net(&self, node: u32) -> Net {
        Net { graph: self.id, node }
    }

    fn intern(&mut self, node: Node) -> u32 {
        let key = node.key();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.index.insert(key, id);
        id
    }

    fn const_value(&self, id: u32) -> Option<f64> {
        match self.nodes[id as usize] {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn input(&mut self, axis: usize) -> Result<Net, GraphError> {
        if axis >= self.dim {
            return Err(GraphError::AxisOutOfRange { axis, dim: self.dim });
        }
        let id = self.intern(Node::Input(axis));
        Ok(self.net(id))
    }

    pub fn constant(&mut self, value: f64) -> Net {
        let id = self.c(value);
        self.net(id)
    }

    fn c(&mut self, value: f64) -> u32 {
        self.intern(Node::Const(if value == 0.0 { 0.0 } else { value }))
    }

    /// `Σ w_i · net_i + bias`. Constants are folded into the bias, nested
    /// single-input affines are flattened, repeated inputs are merged and zero
    /// weights dropped.
    pub fn affine(&mut self, terms: &[(f64, Net)], bias: f64) -> Result<Net, GraphError> {
        for (_, n) in terms {
            self.check(*n)?;
        }
        let raw: Vec<(f64, u32)> = terms.iter().map(|(w, n)| (*w, n.node)).collect();
        let id = self.aff(&raw, bias);
        Ok(self.net(id))
    }

    fn aff(&mut self, terms: &[(f64, u32)], bias: f64) -> u32 {
        let mut bias = bias;
        let mut flat: Vec<(f64, u32)> = Vec::with_capacity(terms.len());
        for &(w, n) in terms {
            if w == 0.0 {
                continue;
            }
            match &self.nodes[n as usize] {
                Node::Const(v) => bias += w * v,
                Node::Affine { terms: inner, bias: b } if inner.len() == 1 => {
                    flat.push((w * inner[0].0, inner[0].1));
                    bias += w * b;
                }
                _ => flat.push((w, n)),
            }
        }
        flat.sort_by_key(|t| t.1);
        let mut merged: Vec<(f64, u32)> = Vec::with_capacity(flat.len());
        for (w, n) in flat {
            match merged.last_mut() {
                Some(last) if last.1 == n => last.0 += w,
                _ => merged.push((w, n)),
            }
        }
        merged.retain(|t| t.0 != 0.0);
        if merged.is_empty() {
            return self.c(bias);
        }
        if merged.len() == 1 && merged[0].0 == 1.0 && bias == 0.0 {
            return merged[0].1;
        }
        self.intern(Node::Affine {
            terms: merged,
            bias: if bias == 0.0 { 0.0 } else { bias },
        })
    }

    pub fn act(&mut self, act: Activation, net: Net) -> Result<Net, GraphError> {
        self.check(net)?;
        let id = self.activation(act, net.node);
        Ok(self.net(id))
    }

    fn activation(&mut self, act: Activation, n: u32) -> u32 {
        match self.const_value(n) {
            Some(v) => self.c(act.apply(v)),
            None => self.intern(Node::Act(act, n)),
        }
    }

    pub fn add(&mut self, a: Net, b: Net) -> Result<Net, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let id = self.plus(a.node, b.node);
        Ok(self.net(id))
    }

    fn plus(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.c(x + y),
            (Some(0.0), None) => b,
            (None, Some(0.0)) => a,
            (Some(x), None) => self.aff(&[(1.0, b)], x),
            (None, Some(y)) => self.aff(&[(1.0, a)], y),
            (None, None) => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                self.intern(Node::Add(lo, hi))
            }
        }
    }

    pub fn mul(&mut self, a: Net, b: Net) -> Result<Net, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let id = self.times(a.node, b.node);
        Ok(self.net(id))
    }

    fn times(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.c(x * y),
            (Some(x), None) => self.aff(&[(x, b)], 0.0),
            (None, Some(y)) => self.aff(&[(y, a)], 0.0),
            (None, None) => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                self.intern(Node::Mul(lo, hi))
            }
        }
    }

    /// `s · net`.
    pub fn scale(&mut self, s: f64, net: Net) -> Result<Net, GraphError> {
        self.affine(&[(s, net)], 0.0)
    }

    /// Graph of a closed-form field: each separable term becomes a product of
    /// one-dimensional factors, monomials via squares and products, waves as
    /// `sin(ωx + φ)` of an affine input.
    pub fn from_field(&mut self, field: &ScalarField) -> Result<Net, GraphError> {
        if field.dim() != self.dim {
            return Err(GraphError::PointDimension {
                expected: self.dim,
                got: field.dim(),
            });
        }
        let mut terms = Vec::new();
        let mut bias = 0.0;
        for term in field.terms() {
            let mut prod: Option<u32> = None;
            let mut scale = term.coef;
            for (axis, factor) in term.factors.iter().enumerate() {
                let x = self.intern(Node::Input(axis));
                let piece = match *factor {
                    Factor::Poly(0) => None,
                    Factor::Poly(p) => Some(self.power(x, p)),
                    Factor::Wave { omega, phase, quarter } => {
                        let shift = phase + quarter as f64 * FRAC_PI_2;
                        if omega == 0.0 {
                            scale *= shift.sin();
                            None
                        } else {
                            let arg = self.aff(&[(omega, x)], shift);
                            Some(self.activation(Activation::Sin, arg))
                        }
                    }
                };
                if let Some(p) = piece {
                    prod = Some(match prod {
                        None => p,
                        Some(q) => self.times(q, p),
                    });
                }
            }
            match prod {
                None => bias += scale,
                Some(p) => terms.push((scale, p)),
            }
        }
        let id = self.aff(&terms, bias);
        Ok(self.net(id))
    }

    fn power(&mut self, x: u32, p: u32) -> u32 {
        match p {
            0 => self.c(1.0),
            1 => x,
            _ if p.is_multiple_of(2) => {
                let half = self.power(x, p / 2);
                self.activation(Activation::Square, half)
            }
            _ => {
                let rest = self.power(x, p - 1);
                self.times(x, rest)
            }
        }
    }

    /// Reachable node ids in ascending (topological) order.
    fn reachable(&self, roots: &[u32]) -> Vec<u32> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<u32> = roots.to_vec();
        let mut out = Vec::new();
        while let Some(n) = stack.pop() {
            if seen[n as usize] {
                continue;
            }
            seen[n as usize] = true;
            out.push(n);
            stack.extend(self.nodes[n as usize].children());
        }
        out.sort_unstable();
        out
    }

    /// `∂ net / ∂ x_axis` as a new net. Forward tangent propagation over the
    /// nodes reachable from `net`, memoised per `(node, axis)` so every node is
    /// differentiated once for the lifetime of the arena.
    pub fn differentiate(&mut self, net: Net, axis: usize) -> Result<Net, GraphError> {
        self.check(net)?;
        if axis >= self.dim {
            return Err(GraphError::AxisOutOfRange { axis, dim: self.dim });
        }
        if let Some(&d) = self.derivatives.get(&(net.node, axis)) {
            return Ok(self.net(d));
        }
        let order: Vec<u32> = self
            .reachable(&[net.node])
            .into_iter()
            .filter(|n| !self.derivatives.contains_key(&(*n, axis)))
            .collect();
        for n in order {
            let d = self.tangent(n, axis);
            self.derivatives.insert((n, axis), d);
        }
        Ok(self.net(self.derivatives[&(net.node, axis)]))
    }

    fn tangent(&mut self, n: u32, axis: usize) -> u32 {
        let d = |g: &Self, m: u32| g.derivatives[&(m, axis)];
        match self.nodes[n as usize].clone() {
            Node::Input(i) => self.c(if i == axis { 1.0 } else { 0.0 }),
            Node::Const(_) => self.c(0.0),
            Node::Affine { terms, .. } => {
                let dt: Vec<(f64, u32)> = terms.iter().map(|&(w, m)| (w, d(self, m))).collect();
                self.aff(&dt, 0.0)
            }
            Node::Act(act, z) => {
                let dz = d(self, z);
                match act {
                    Activation::Sin => {
                        let cz = self.activation(Activation::Cos, z);
                        self.times(cz, dz)
                    }
                    Activation::Cos => {
                        let sz = self.activation(Activation::Sin, z);
                        let p = self.times(sz, dz);
                        self.aff(&[(-1.0, p)], 0.0)
                    }
                    Activation::Exp => self.times(n, dz),
                    Activation::Square => {
                        let p = self.times(z, dz);
                        self.aff(&[(2.0, p)], 0.0)
                    }
                }
            }
            Node::Add(a, b) => {
                let (da, db) = (d(self, a), d(self, b));
                self.plus(da, db)
            }
            Node::Mul(a, b) => {
                let (da, db) = (d(self, a), d(self, b));
                let left = self.times(da, b);
                let right = self.times(a, db);
                self.plus(left, right)
            }
        }
    }

    /// `∂_i ∂_j net`, always differentiating the lower axis first so that
    /// `(i, j)` and `(j, i)` give the same node.
    pub fn second(&mut self, net: Net, i: usize, j: usize) -> Result<Net, GraphError> {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let first = self.differentiate(net, lo)?;
        self.differentiate(first, hi)
    }

    pub fn param_count(&self, net: Net) -> Result<usize, GraphError> {
        self.param_count_many(&[net])
    }

    /// Parameters of the union of the subgraphs below `nets`.
    pub fn param_count_many(&self, nets: &[Net]) -> Result<usize, GraphError> {
        let mut roots = Vec::with_capacity(nets.len());
        for n in nets {
            self.check(*n)?;
            roots.push(n.node);
        }
        Ok(self
            .reachable(&roots)
            .iter()
            .map(|&n| self.nodes[n as usize].params())
            .sum())
    }

    pub fn node_count(&self, net: Net) -> Result<usize, GraphError> {
        self.check(net)?;
        Ok(self.reachable(&[net.node]).len())
    }

    /// Longest path in layers: affine, activation and add nodes are one layer,
    /// a mul node is three (affine, square, affine).
    pub fn depth(&self, net: Net) -> Result<usize, GraphError> {
        self.check(net)?;
        let order = self.reachable(&[net.node]);
        let mut depth: HashMap<u32, usize> = HashMap::with_capacity(order.len());
        for &n in &order {
            let node = &self.nodes[n as usize];
            let below = node.children().iter().map(|c| depth[c]).max().unwrap_or(0);
            let own = match node {
                Node::Input(_) | Node::Const(_) => 0,
                Node::Mul(..) => below + 3,
                _ => below + 1,
            };
            depth.insert(n, own);
        }
        Ok(depth[&net.node])
    }

    /// Activations used by the subnetwork, counting the squares inside mul nodes.
    pub fn activations(&self, net: Net) -> Result<BTreeSet<Activation>, GraphError> {
        self.check(net)?;
        let mut out = BTreeSet::new();
        for n in self.reachable(&[net.node]) {
            match self.nodes[n as usize] {
                Node::Act(a, _) => {
                    out.insert(a);
                }
                Node::Mul(..) => {
                    out.insert(Activation::Square);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Compiles the subgraph below `net` for repeated evaluation.
    pub fn tape(&self, net: Net) -> Result<Tape, GraphError> {
        self.check(net)?;
        let order = self.reachable(&[net.node]);
        let mut slot = HashMap::with_capacity(order.len());
        for (i, &n) in order.iter().enumerate() {
            slot.insert(n, i as u32);
        }
        let mut ops = Vec::with_capacity(order.len());
        let mut weights = Vec::new();
        for &n in &order {
            let op = match &self.nodes[n as usize] {
                Node::Input(i) => Op::Input(*i),
                Node::Const(v) => Op::Const(*v),
                Node::Affine { terms, bias } => {
                    let start = weights.len();
                    weights.extend(terms.iter().map(|(w, m)| (*w, slot[m])));
                    Op::Affine {
                        start,
                        len: terms.len(),
                        bias: *bias,
                    }
                }
                Node::Act(a, m) => Op::Act(*a, slot[m]),
                Node::Add(a, b) => Op::Add(slot[a], slot[b]),
                Node::Mul(a, b) => Op::Mul(slot[a], slot[b]),
            };
            ops.push(op);
        }
        Ok(Tape {
            dim: self.dim,
            ops,
            weights,
            ids: order,
        })
    }

    pub fn evaluate(&self, net: Net, x: &[f64]) -> Result<f64, GraphError> {
        self.tape(net)?.eval(x)
    }

    /// Values at every interior node of `grid`.
    pub fn sample(&self, net: Net, grid: &Grid) -> Result<GridFunction, GraphError> {
        let tape = self.tape(net)?;
        tape.sample(grid)
    }

    /// Gradient at `x` by reverse accumulation over the tape.
    pub fn gradient(&self, net: Net, x: &[f64]) -> Result<Vec<f64>, GraphError> {
        let tape = self.tape(net)?;
        let vals = tape.forward(x)?;
        let mut adj = vec![0.0; vals.len()];
        let mut grad = vec![0.0; self.dim];
        *adj.last_mut().expect("tape is non-empty") = 1.0;
        for i in (0..tape.ops.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match tape.ops[i] {
                Op::Input(axis) => grad[axis] += g,
                Op::Const(_) => {}
                Op::Affine { start, len, .. } => {
                    for &(w, s) in &tape.weights[start..start + len] {
                        adj[s as usize] += w * g;
                    }
                }
                Op::Act(a, s) => adj[s as usize] += a.slope(vals[s as usize]) * g,
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (vals[a as usize], vals[b as usize]);
                    adj[a as usize] += vb * g;
                    adj[b as usize] += va * g;
                }
            }
        }
        Ok(grad)
    }

    /// Structural dump of the subgraph below `net`.
    pub fn dump(&self, net: Net) -> Result<Value, GraphError> {
        self.check(net)?;
        let order = self.reachable(&[net.node]);
        let nodes: Vec<Value> = order
            .iter()
            .map(|&n| {
                let node = &self.nodes[n as usize];
                let body = match node {
                    Node::Input(i) => json!({"op": "input", "axis": i}),
                    Node::Const(v) => json!({"op": "const", "value": num(*v)}),
                    Node::Affine { terms, bias } => json!({
                        "op": "affine",
                        "inputs": terms.iter().map(|t| t.1).collect::<Vec<_>>(),
                        "weights": terms.iter().map(|t| num(t.0)).collect::<Vec<_>>(),
                        "bias": num(*bias),
                    }),
                    Node::Act(a, m) => json!({"op": "activation", "activation": a.name(), "inputs": [m]}),
                    Node::Add(a, b) => json!({"op": "add", "inputs": [a, b]}),
                    Node::Mul(a, b) => json!({"op": "mul-via-squares", "inputs": [a, b]}),
                };
                let mut body = body;
                body["id"] = json!(n);
                body["params"] = json!(node.params());
                body
            })
            .collect();
        Ok(json!({
            "schema_version": 1,
            "dim": self.dim,
            "output": net.node,
            "node_count": order.len(),
            "param_count": self.param_count(net)?,
            "depth": self.depth(net)?,
            "nodes": nodes,
        }))
    }

    /// `û + η(Σ_ij ã_ij ∂_ij û + Σ_j (Σ_i ∂_i ã_ij) ∂_j û − c̃ û + f)`, i.e.
    /// `û − η(L̃û − f)` for `L̃ = −div(Ã∇·) + c̃`. `a` is row-major `d×d` and
    /// symmetric; only its upper triangle is read.
    pub fn build_iterate(&mut self, u: Net, a: &[Net], c: Net, f: Net, eta: f64) -> Result<Net, GraphError> {
        let d = self.dim;
        if a.len() != d * d {
            return Err(GraphError::CoefficientShape {
                expected: d * d,
                got: a.len(),
            });
        }
        for n in a.iter().chain([&u, &c, &f]) {
            self.check(*n)?;
        }
        let mut terms: Vec<(f64, u32)> = Vec::new();
        for i in 0..d {
            for j in i..d {
                let aij = a[i * d + j].node;
                if self.const_value(aij) == Some(0.0) {
                    continue;
                }
                let dij = self.second(u, i, j)?.node;
                let prod = self.times(aij, dij);
                terms.push((if i == j { 1.0 } else { 2.0 }, prod));
            }
        }
        for j in 0..d {
            let mut parts = Vec::with_capacity(d);
            for i in 0..d {
                let entry = if i <= j { a[i * d + j] } else { a[j * d + i] };
                parts.push((1.0, self.differentiate(entry, i)?.node));
            }
            let drift = self.aff(&parts, 0.0);
            if self.const_value(drift) == Some(0.0) {
                continue;
            }
            let du = self.differentiate(u, j)?.node;
            let prod = self.times(drift, du);
            terms.push((1.0, prod));
        }
        let cu = self.times(c.node, u.node);
        terms.push((-1.0, cu));
        terms.push((1.0, f.node));
        let update = self.aff(&terms, 0.0);
        let id = self.aff(&[(1.0, u.node), (eta, update)], 0.0);
        Ok(self.net(id))
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input(usize),
    Const(f64),
    Affine { start: usize, len: usize, bias: f64 },
    Act(Activation, u32),
    Add(u32, u32),
    Mul(u32, u32),
}

/// A subgraph flattened into evaluation order.
#[derive(Debug, Clone)]
pub struct Tape {
    dim: usize,
    ops: Vec<Op>,
    weights: Vec<(f64, u32)>,
    ids: Vec<u32>,
}

impl Tape {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>, GraphError> {
        if x.len() < self.dim {
            return Err(GraphError::PointDimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut v = vec![0.0; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            let val = match *op {
                Op::Input(axis) => x[axis],
                Op::Const(c) => c,
                Op::Affine { start, len, bias } => self.weights[start..start + len]
                    .iter()
                    .fold(bias, |acc, &(w, s)| acc + w * v[s as usize]),
                Op::Act(a, s) => a.apply(v[s as usize]),
                Op::Add(a, b) => v[a as usize] + v[b as usize],
                Op::Mul(a, b) => {
                    let (p, q) = (v[a as usize], v[b as usize]);
                    let s = p + q;
                    0.5 * (s * s) - 0.5 * (p * p) - 0.5 * (q * q)
                }
            };
            if !val.is_finite() {
                return Err(GraphError::NonFinite {
                    node: self.ids[i],
                    value: val,
                });
            }
            v[i] = val;
        }
        Ok(v)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, GraphError> {
        Ok(*self.forward(x)?.last().expect("tape is non-empty"))
    }

    pub fn sample(&self, grid: &Grid) -> Result<GridFunction, GraphError> {
        let mut values = Vec::with_capacity(grid.len());
        for node in 0..grid.len() {
            values.push(self.eval(&grid.point(node))?);
        }
        Ok(GridFunction::new(*grid, values)?)
    }
}

/// Size audit of one step of the iterate sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthRecord {
    pub t: usize,
    pub n_t: usize,
    /// `C_REC · (d²(N_A + N_{t-1}) + N_{t-1} + N_f + N_c)`; `N_0` at `t = 0`.
    pub bound: f64,
    /// `C_UNROLL · (d^{2t}(N_0 + N_A) + t(N_f + N_c))`.
    pub unrolled: f64,
}

/// Networks of the iterate sequence together with the component sizes.
#[derive(Debug, Clone)]
pub struct Growth {
    pub iterates: Vec<Net>,
    pub records: Vec<GrowthRecord>,
    pub n_a: usize,
    pub n_c: usize,
    pub n_f: usize,
    pub n_0: usize,
}

impl Growth {
    /// Largest `N_{t+1} / (d²(N_A+N_t) + N_t + N_f + N_c)` over the sequence.
    pub fn recurrence_ratio(&self, dim: usize) -> f64 {
        let d2 = (dim * dim) as f64;
        self.records
            .windows(2)
            .map(|w| {
                let prev = w[0].n_t as f64;
                w[1].n_t as f64 / (d2 * (self.n_a as f64 + prev) + prev + self.n_f as f64 + self.n_c as f64)
            })
            .fold(0.0, f64::max)
    }

    /// Largest `N_t / (d^{2t}(N_0 + N_A) + t(N_f + N_c))` over the sequence.
    pub fn unrolled_ratio(&self) -> f64 {
        self.records
            .iter()
            .map(|r| C_UNROLL * r.n_t as f64 / r.unrolled)
            .fold(0.0, f64::max)
    }

    /// Steps whose size exceeds the recurrence bound, or the unrolled bound up
    /// to [`UNROLLED_MAX_STEPS`].
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            if r.n_t as f64 > r.bound {
                out.push(format!("size recurrence: N_{} = {} exceeds {}", r.t, r.n_t, fmt17(r.bound)));
            }
            if r.t <= UNROLLED_MAX_STEPS && r.n_t as f64 > r.unrolled {
                out.push(format!("unrolled size bound: N_{} = {} exceeds {}", r.t, r.n_t, fmt17(r.unrolled)));
            }
        }
        out
    }

    /// Columns `t,N_t,bound_t,unrolled_t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,N_t,bound_t,unrolled_t\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.t, r.n_t, fmt17(r.bound), fmt17(r.unrolled)));
        }
        out
    }
}

/// Builds `û_1, …, û_T` from `û_0` with [`Graph::build_iterate`].
pub fn grow(
    graph: &mut Graph,
    u0: Net,
    a: &[Net],
    c: Net,
    f: Net,
    eta: f64,
    steps: usize,
) -> Result<Growth, GraphError> {
    let d = graph.dim();
    let d2 = (d * d) as f64;
    let n_a = graph.param_count_many(a)?;
    let n_c = graph.param_count(c)?;
    let n_f = graph.param_count(f)?;
    let n_0 = graph.param_count(u0)?;
    let unrolled = |t: usize| C_UNROLL * (d2.powi(t as i32) * (n_0 + n_a) as f64 + t as f64 * (n_f + n_c) as f64);
    let mut iterates = vec![u0];
    let mut records = vec![GrowthRecord {
        t: 0,
        n_t: n_0,
        bound: n_0 as f64,
        unrolled: unrolled(0),
    }];
    for t in 1..=steps {
        let prev = *iterates.last().expect("u_0 present");
        let prev_n = records[t - 1].n_t as f64;
        let next = graph.build_iterate(prev, a, c, f, eta)?;
        records.push(GrowthRecord {
            t,
            n_t: graph.param_count(next)?,
            bound: C_REC * (d2 * (n_a as f64 + prev_n) + prev_n + n_f as f64 + n_c as f64),
            unrolled: unrolled(t),
        });
        iterates.push(next);
    }
    Ok(Growth {
        iterates,
        records,
        n_a,
        n_c,
        n_f,
        n_0,
    })
}

/// Constants entering the cap on `‖u_t − û_t‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualConstants {
    pub eta: f64,
    pub growth: f64,
    pub eps_nn: f64,
    pub eps_spn: f64,
    pub delta: f64,
    pub gamma: f64,
    pub lambda_k: f64,
    pub f_spn_norm: f64,
    /// Discretisation allowance added to the cap.
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub t: usize,
    /// `‖u_t − û_t‖` with `û_t` evaluated at the grid nodes.
    pub measured: f64,
    /// `max_nodes |u_t − û_t|`.
    pub max_node: f64,
    /// Norm of `d_t` from `d_{t+1} = (I − ηL̃)d_t + η r`, `d_0 = 0`, the exact
    /// recurrence of the difference when both iterates use the grid operator.
    pub recurrence: f64,
    /// Norm of `r_t` from `r_{t+1} = (I − ηL̃)r_t − r`, `r_0 = 0`, the recurrence
    /// as it appears in the proof (without the step size on the source term).
    pub proof_recurrence: f64,
    /// `t² max{1, (t² e η C)^t} (ε_nn + ε_spn + drift_t)` with
    /// `drift_t = 4(1 + δ/(γ−δ)) λ_k^t ‖f_spn‖` (zero when `δ = 0`).
    pub cap: f64,
    pub applicable: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualTrace {
    pub rows: Vec<ResidualRow>,
}

impl ResidualTrace {
    pub fn violations(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.applicable && !r.pass)
            .map(|r| {
                format!(
                    "residual bound: step {} measured {} exceeds cap {}",
                    r.t,
                    fmt17(r.measured),
                    fmt17(r.cap)
                )
            })
            .collect()
    }

    /// Columns `t,measured,max_node,recurrence,proof_recurrence,cap,status`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,measured,max_node,recurrence,proof_recurrence,cap,status\n");
        for r in &self.rows {
            let status = match (r.applicable, r.pass) {
                (false, _) => "inapplicable",
                (true, true) => "pass",
                (true, false) => "fail",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.t,
                fmt17(r.measured),
                fmt17(r.max_node),
                fmt17(r.recurrence),
                fmt17(r.proof_recurrence),
                fmt17(r.cap),
                status
            ));
        }
        out
    }
}

/// Compares the network iterates (driven by `f_nn`) with the grid iterates
/// (driven by `f̃_spn`), and evaluates both residual recurrences with
/// `r = f̃_spn − f_nn` sampled on the grid.
pub fn residual_trace(
    graph: &Graph,
    networks: &[Net],
    grid_iterates: &[GridFunction],
    op_t: &DiscreteOperator,
    r: &GridFunction,
    k: &ResidualConstants,
) -> Result<ResidualTrace, GraphError> {
    let grid = *op_t.grid();
    let mut d = GridFunction::zeros(grid);
    let mut rp = GridFunction::zeros(grid);
    let mut rows = Vec::with_capacity(networks.len());
    let applicable = k.delta == 0.0 || k.gamma > k.delta;
    for (t, (net, u)) in networks.iter().zip(grid_iterates).enumerate() {
        let hat = graph.sample(*net, &grid)?;
        let diff = u.sub(&hat)?;
        let tf = t as f64;
        let amp = (tf * tf * std::f64::consts::E * k.eta * k.growth).powi(t as i32).max(1.0);
        let drift = if k.delta == 0.0 {
            0.0
        } else {
            4.0 * (1.0 + k.delta / (k.gamma - k.delta)) * k.lambda_k.powi(t as i32) * k.f_spn_norm
        };
        let cap = tf * tf * amp * (k.eps_nn + k.eps_spn + drift);
        let measured = diff.norm_l2();
        rows.push(ResidualRow {
            t,
            measured,
            max_node: diff.max_abs(),
            recurrence: d.norm_l2(),
            proof_recurrence: rp.norm_l2(),
            cap,
            applicable,
            pass: measured <= cap + k.slack,
        });
        d = d.axpy(-k.eta, &op_t.apply(&d)?)?.axpy(k.eta, r)?;
        rp = rp.axpy(-k.eta, &op_t.apply(&rp)?)?.sub(r)?;
    }
    Ok(ResidualTrace { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.05..0.95)).collect())
            .collect()
    }

    #[test]
    fn evaluation_examples() {
        let mut g = Graph::new(1);
        let five = g.constant(5.0);
        assert_eq!(g.evaluate(five, &[0.3]).unwrap(), 5.0);
        let x = g.input(0).unwrap();
        let lin = g.affine(&[(2.0, x)], 1.0).unwrap();
        assert_eq!(g.evaluate(lin, &[0.25]).unwrap(), 1.5);
        let arg = g.scale(PI, x).unwrap();
        let s = g.act(Activation::Sin, arg).unwrap();
        assert!((g.evaluate(s, &[0.5]).unwrap() - 1.0).abs() <= 1e-15);
        let sq = g.mul(x, x).unwrap();
        assert!((g.evaluate(sq, &[0.3]).unwrap() - 0.09).abs() <= 1e-15);
    }

    #[test]
    fn smart_constructors_fold() {
        let mut g = Graph::new(2);
        let x = g.input(0).unwrap();
        let y = g.input(1).unwrap();
        let zero = g.constant(0.0);
        assert_eq!(g.add(x, zero).unwrap(), x);
        assert_eq!(g.mul(x, zero).unwrap(), zero);
        let one = g.constant(1.0);
        assert_eq!(g.mul(one, y).unwrap(), y);
        assert_eq!(g.mul(x, y).unwrap(), g.mul(y, x).unwrap());
        assert_eq!(g.add(x, y).unwrap(), g.add(y, x).unwrap());
        let inner = g.affine(&[(2.0, x)], 1.0).unwrap();
        let outer = g.affine(&[(3.0, inner)], -1.0).unwrap();
        assert_eq!(g.node(outer).unwrap(), &Node::Affine { terms: vec![(6.0, x.node())], bias: 2.0 });
        let before = g.arena_len();
        let again = g.affine(&[(6.0, x)], 2.0).unwrap();
        assert_eq!(again, outer);
        assert_eq!(g.arena_len(), before);
        let cancel = g.affine(&[(1.0, x), (-1.0, x)], 0.5).unwrap();
        assert_eq!(g.node(cancel).unwrap(), &Node::Const(0.5));
    }

    #[test]
    fn foreign_nets_and_bad_axes() {
        let mut g = Graph::new(1);
        let mut h = Graph::new(1);
        let x = g.input(0).unwrap();
        let y = h.input(0).unwrap();
        assert_eq!(g.add(x, y).unwrap_err(), GraphError::ForeignNet);
        assert!(matches!(g.input(1), Err(GraphError::AxisOutOfRange { .. })));
        assert!(matches!(g.differentiate(x, 2), Err(GraphError::AxisOutOfRange { .. })));
        assert!(matches!(g.evaluate(x, &[]), Err(GraphError::PointDimension { .. })));
    }

    #[test]
    fn non_finite_names_node() {
        let mut g = Graph::new(1);
        let x = g.input(0).unwrap();
        let big = g.scale(1e3, x).unwrap();
        let e = g.act(Activation::Exp, big).unwrap();
        assert!(g.evaluate(e, &[0.1]).is_ok());
        assert_eq!(
            g.evaluate(e, &[0.9]).unwrap_err(),
            GraphError::NonFinite {
                node: e.node(),
                value: f64::INFINITY
            }
        );
    }

    #[test]
    fn derivative_examples() {
        let mut g = Graph::new(1);
        let x = g.input(0).unwrap();
        let dx = g.differentiate(x, 0).unwrap();
        assert_eq!(g.node(dx).unwrap(), &Node::Const(1.0));

        let sq = g.act(Activation::Square, x).unwrap();
        let dsq = g.differentiate(sq, 0).unwrap();
        let three_x = g.scale(3.0, x).unwrap();
        let s3 = g.act(Activation::Sin, three_x).unwrap();
        let ds3 = g.differentiate(s3, 0).unwrap();
        for p in points(1, 100, 1) {
            let t = p[0];
            assert!((g.evaluate(dsq, &p).unwrap() - 2.0 * t).abs() <= 1e-12);
            assert!((g.evaluate(ds3, &p).unwrap() - 3.0 * (3.0 * t).cos()).abs() <= 1e-12);
            let step = 1e-5;
            let fd = (g.evaluate(s3, &[t + step]).unwrap() - g.evaluate(s3, &[t - step]).unwrap()) / (2.0 * step);
            let exact = g.evaluate(ds3, &p).unwrap();
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn mul_is_exact_product() {
        let mut g = Graph::new(2);
        let f = g.from_field(&ScalarField::sine_product(1.3, &[2, 1])).unwrap();
        let h = g.from_field(&ScalarField::affine(0.5, &[1.0, -2.0])).unwrap();
        let fh = g.mul(f, h).unwrap();
        let sum = g.add(f, h).unwrap();
        let base = g.param_count_many(&[f, h]).unwrap();
        assert!(g.param_count(fh).unwrap() <= base + 10);
        assert!(g.param_count(sum).unwrap() <= base + 2);
        for p in points(2, 100, 2) {
            let (a, b) = (g.evaluate(f, &p).unwrap(), g.evaluate(h, &p).unwrap());
            assert!((g.evaluate(fh, &p).unwrap() - a * b).abs() <= 1e-12);
            assert!((g.evaluate(sum, &p).unwrap() - (a + b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn field_graphs_match_fields() {
        let fields = [
            ScalarField::bubble(2, 3.0),
            ScalarField::sine_product(0.7, &[1, 3]),
            ScalarField::quadratic(1.0, &[0.5, -0.25]),
            ScalarField::monomial(2, 1, 5, 2.0),
        ];
        for field in &fields {
            let mut g = Graph::new(2);
            let net = g.from_field(field).unwrap();
            for p in points(2, 50, 3) {
                assert!((g.evaluate(net, &p).unwrap() - field.eval(&p)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reverse_gradient_matches_forward_derivatives() {
        let mut g = Graph::new(3);
        let f = g.from_field(&ScalarField::sine_product(1.0, &[1, 2, 1])).unwrap();
        let b = g.from_field(&ScalarField::bubble(3, 2.0)).unwrap();
        let fb = g.mul(f, b).unwrap();
        let e = g.act(Activation::Exp, fb).unwrap();
        let net = g.add(e, f).unwrap();
        let partials: Vec<Net> = (0..3).map(|i| g.differentiate(net, i).unwrap()).collect();
        for p in points(3, 50, 4) {
            let grad = g.gradient(net, &p).unwrap();
            for i in 0..3 {
                let fwd = g.evaluate(partials[i], &p).unwrap();
                assert!((grad[i] - fwd).abs() <= 1e-12 * fwd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn second_derivatives_are_canonical() {
        let s_field = ScalarField::sine_product(1.0, &[1, 2]);
        let l_field = ScalarField::affine(1.0, &[0.5, 0.5]);
        let mut g = Graph::new(2);
        let s = g.from_field(&s_field).unwrap();
        let l = g.from_field(&l_field).unwrap();
        let f = g.mul(s, l).unwrap();
        assert_eq!(g.second(f, 0, 1).unwrap(), g.second(f, 1, 0).unwrap());
        let d01 = g.second(f, 0, 1).unwrap();
        let idx = |a: usize, b: usize| crate::grid::MultiIndex::new(vec![a, b]);
        for p in points(2, 30, 5) {
            // (sl)_xy = s_xy l + s_x l_y + s_y l_x, since l_xy = 0
            let want = s_field.eval_partial(&p, &idx(1, 1)) * l_field.eval(&p)
                + s_field.eval_partial(&p, &idx(1, 0)) * l_field.eval_partial(&p, &idx(0, 1))
                + s_field.eval_partial(&p, &idx(0, 1)) * l_field.eval_partial(&p, &idx(1, 0));
            assert!((g.evaluate(d01, &p).unwrap() - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn iterate_examples() {
        let mut g = Graph::new(1);
        let one = g.constant(1.0);
        let c0 = 2.0;
        let c = g.constant(c0);
        let zero = g.constant(0.0);
        let eta = 0.01;
        let next = g.build_iterate(zero, &[one], c, zero, eta).unwrap();
        assert_eq!(g.node(next).unwrap(), &Node::Const(0.0));

        let u = g.from_field(&ScalarField::sine_product(1.0, &[1])).unwrap();
        let f = g.from_field(&ScalarField::bubble(1, 1.0)).unwrap();
        let next = g.build_iterate(u, &[one], c, f, eta).unwrap();
        for p in points(1, 100, 6) {
            let x = p[0];
            let want = (1.0 - eta * (PI * PI + c0)) * (PI * x).sin() + eta * x * (1.0 - x);
            assert!((g.evaluate(next, &p).unwrap() - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn variable_coefficient_iterate_matches_symbolic_update() {
        let a_field = ScalarField::affine(1.0, &[0.3]).plus(&ScalarField::sine_product(0.1, &[1]));
        let c_field = ScalarField::constant(1, 0.5);
        let u_field = ScalarField::sine_product(1.0, &[2]).plus(&ScalarField::bubble(1, 0.5));
        let f_field = ScalarField::sine_product(0.2, &[1]);
        let mut g = Graph::new(1);
        let a = g.from_field(&a_field).unwrap();
        let c = g.from_field(&c_field).unwrap();
        let u = g.from_field(&u_field).unwrap();
        let f = g.from_field(&f_field).unwrap();
        let eta = 0.003;
        let next = g.build_iterate(u, &[a], c, f, eta).unwrap();
        let d1 = crate::grid::MultiIndex::new(vec![1]);
        let d2 = crate::grid::MultiIndex::new(vec![2]);
        for p in points(1, 100, 7) {
            let lu = -a_field.eval(&p) * u_field.eval_partial(&p, &d2) - a_field.eval_partial(&p, &d1) * u_field.eval_partial(&p, &d1)
                + c_field.eval(&p) * u_field.eval(&p);
            let want = u_field.eval(&p) - eta * (lu - f_field.eval(&p));
            assert!((g.evaluate(next, &p).unwrap() - want).abs() <= 1e-10);
        }
        let acts = g.activations(next).unwrap();
        assert!(acts.iter().all(|a| matches!(a, Activation::Sin | Activation::Cos | Activation::Exp | Activation::Square)));
    }

    #[test]
    fn dump_is_consistent() {
        let mut g = Graph::new(2);
        let f = g.from_field(&ScalarField::bubble(2, 1.0)).unwrap();
        let dump = g.dump(f).unwrap();
        let text = crate::report::to_json_string(&dump);
        let back: Value = serde_json::from_str(&text).unwrap();
        let nodes = back["nodes"].as_array().unwrap();
        assert_eq!(nodes.len() as u64, back["node_count"].as_u64().unwrap());
        let total: u64 = nodes.iter().map(|n| n["params"].as_u64().unwrap()).sum();
        assert_eq!(total, back["param_count"].as_u64().unwrap());
    }

    #[test]
    fn derivative_size_stays_linear() {
        let mut g = Graph::new(2);
        let s = g.from_field(&ScalarField::sine_product(1.0, &[1, 2])).unwrap();
        let l = g.from_field(&ScalarField::affine(1.0, &[0.5, 0.5])).unwrap();
        let mut net = g.mul(s, l).unwrap();
        for step in 0..4 {
            let d = g.differentiate(net, step % 2).unwrap();
            let size = g.param_count(d).unwrap() as f64;
            let budget = C_BP * (g.depth(net).unwrap() + g.param_count(net).unwrap()) as f64;
            assert!(size <= budget, "step {step}: {size} > {budget}");
            net = d;
        }
    }

    fn coefficient_nets(g: &mut Graph, variable: bool) -> Vec<Net> {
        let d = g.dim();
        let mut a = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let field = match (variable, i == j) {
                    (false, true) => ScalarField::constant(d, 1.0),
                    (false, false) => ScalarField::zero(d),
                    (true, true) => ScalarField::constant(d, 1.0).plus(&ScalarField::sine_product(0.1, &vec![1; d])),
                    (true, false) => ScalarField::sine_product(0.05, &vec![1; d]),
                };
                a.push(g.from_field(&field).unwrap());
            }
        }
        a
    }

    #[test]
    fn growth_obeys_pinned_constants() {
        for d in 1..=3 {
            for variable in [false, true] {
                let mut g = Graph::new(d);
                let a = coefficient_nets(&mut g, variable);
                let c = g.from_field(&ScalarField::constant(d, 1.0)).unwrap();
                let f = g.from_field(&ScalarField::sine_product(1.0, &vec![1; d])).unwrap();
                let u0 = g.constant(0.0);
                let growth = grow(&mut g, u0, &a, c, f, 0.01, 5).unwrap();
                assert!(growth.violations().is_empty(), "{:?}", growth.violations());
                assert!(growth.recurrence_ratio(d) <= C_REC);
                assert!(growth.unrolled_ratio() <= C_UNROLL);
                let sizes: Vec<usize> = growth.records.iter().map(|r| r.n_t).collect();
                assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
                let acts = g.activations(*growth.iterates.last().unwrap()).unwrap();
                assert!(!acts.is_empty());
            }
        }
    }

    #[test]
    fn growth_csv_has_one_row_per_step() {
        let mut g = Graph::new(1);
        let a = coefficient_nets(&mut g, false);
        let c = g.constant(0.0);
        let f = g.from_field(&ScalarField::bubble(1, 1.0)).unwrap();
        let u0 = g.constant(0.0);
        let zero_steps = grow(&mut g, u0, &a, c, f, 0.1, 0).unwrap();
        assert_eq!(zero_steps.to_csv().lines().count(), 2);
        assert_eq!(zero_steps.records[0].n_t, 1);
        let three = grow(&mut g, u0, &a, c, f, 0.1, 3).unwrap();
        assert_eq!(three.to_csv().lines().count(), 5);
    }

    #[test]
    fn source_only_residual_is_a_geometric_sum() {
        let grid = Grid::new(1, 63).unwrap();
        let c0 = 1.0;
        let coeff = crate::operator::CoefficientField::laplacian(1, c0);
        let op = crate::operator::assemble(&coeff, &grid).unwrap();
        let f_field = ScalarField::sine_product(1.0, &[1]);
        let wobble = ScalarField::sine_product(1e-6, &[2]);
        let mut g = Graph::new(1);
        let one = g.constant(1.0);
        let c = g.constant(c0);
        let f = g.from_field(&f_field).unwrap();
        let f_nn = g.from_field(&f_field.plus(&wobble)).unwrap();
        let zero = g.constant(0.0);
        let eta = 0.01;
        let steps = 5;
        let exact = grow(&mut g, zero, &[one], c, f, eta, steps).unwrap();
        let approx = grow(&mut g, zero, &[one], c, f_nn, eta, steps).unwrap();
        let grid_iterates: Vec<GridFunction> = exact.iterates.iter().map(|n| g.sample(*n, &grid).unwrap()).collect();
        let r = GridFunction::sample(grid, |x| -wobble.eval(x)).unwrap();
        let consts = ResidualConstants {
            eta,
            growth: 1.0,
            eps_nn: 1e-6 * 4.0 * PI * PI,
            eps_spn: 0.0,
            delta: 0.0,
            gamma: 1.0,
            lambda_k: 1.0,
            f_spn_norm: 0.0,
            slack: 0.0,
        };
        let trace = residual_trace(&g, &approx.iterates, &grid_iterates, &op, &r, &consts).unwrap();
        let mu = 4.0 * PI * PI + c0;
        let amplitude = 1e-6 * 0.5_f64.sqrt();
        for row in &trace.rows {
            let series: f64 = (0..row.t).map(|i| (1.0 - eta * mu).powi(i as i32)).sum();
            assert!((row.measured - eta * series * amplitude).abs() <= 1e-9, "{row:?}");
        }
        assert!((trace.rows[1].proof_recurrence - r.norm_l2()).abs() <= 1e-15);
        assert!((trace.rows[1].recurrence - eta * r.norm_l2()).abs() <= 1e-15);
        assert!((trace.rows[1].measured - trace.rows[1].recurrence).abs() <= 1e-12);
    }
}
