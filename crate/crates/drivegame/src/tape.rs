//! Reverse-mode automatic differentiation over a recorded computation tape.
//!
//! The tape holds a flat list of vector-valued nodes in evaluation order.
//! Leaves reference named value groups (network weights, state inputs);
//! everything else is one of a small set of primitives chosen to cover the
//! cost terms, the vehicle dynamics updates, and tanh networks. A forward
//! pass caches every node value, a backward pass accumulates exact adjoints
//! into per-group gradient vectors.
//!
//! Tapes are immutable once built: forward/backward take `&self` and keep
//! all mutable state in [`Evaluation`], so one tape can be evaluated from
//! several threads with different bindings at once.

use thiserror::Error;

/// Index of a node on a tape.
pub type NodeId = usize;

/// Index of a named leaf group on a tape.
pub type GroupId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("leaf group `{0}` has no bound value")]
    UnboundLeaf(String),
    #[error("leaf group `{name}` bound with length {got}, declared {want}")]
    BindingShape { name: String, got: usize, want: usize },
    #[error("non-finite value produced at node {node}{}", label_suffix(.label))]
    NonFinite { node: NodeId, label: Option<String> },
    #[error("output node has length {0}, backward needs a scalar output")]
    NonScalarOutput(usize),
    #[error("tape has no output node set")]
    MissingOutput,
}

fn label_suffix(label: &Option<String>) -> String {
    match label {
        Some(l) => format!(" ({l})"),
        None => String::new(),
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const(Vec<f64>),
    Leaf(GroupId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `w` (row-major rows x cols) times `x` (length cols).
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Tanh(NodeId),
    Square(NodeId),
    Max0(NodeId),
    Recip(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize, len: usize },
    /// Wraps each element into (-pi, pi]; derivative 1 almost everywhere.
    WrapAngle(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    len: usize,
    label: Option<String>,
}

#[derive(Debug, Clone)]
struct Group {
    name: String,
    len: usize,
    /// Parameter groups are swept by [`Tape::finite_diff_check`]; plain
    /// input groups still receive exact gradients from backward.
    is_param: bool,
}

/// Recorded computation graph. Build with the node constructors, then
/// evaluate repeatedly with [`Tape::forward`] / [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    groups: Vec<Group>,
    output: Option<NodeId>,
}

/// Per-call leaf values, indexed by [`GroupId`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    values: Vec<Option<Vec<f64>>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, group: GroupId, values: Vec<f64>) {
        if self.values.len() <= group {
            self.values.resize(group + 1, None);
        }
        self.values[group] = Some(values);
    }

    pub fn get(&self, group: GroupId) -> Option<&[f64]> {
        self.values.get(group).and_then(|v| v.as_deref())
    }
}

/// Cached forward values for one evaluation of a tape.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.values[node]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node][0]
    }
}

/// Gradients accumulated for every leaf group by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_group: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn group(&self, group: GroupId) -> &[f64] {
        &self.by_group[group]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_name(&self, group: GroupId) -> &str {
        &self.groups[group].name
    }

    pub fn group_len(&self, group: GroupId) -> usize {
        self.groups[group].len
    }

    pub fn len_of(&self, node: NodeId) -> usize {
        self.nodes[node].len
    }

    /// Marks the scalar node whose adjoint seeds the backward sweep.
    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Attaches a debug label reported by numeric-error diagnostics.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node].label = Some(label.into());
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        self.nodes.push(Node { op, len, label: None });
        self.nodes.len() - 1
    }

    // ---- leaves -----------------------------------------------------------

    /// Declares a trainable parameter group and returns a node reading it.
    pub fn param(&mut self, name: impl Into<String>, len: usize) -> (GroupId, NodeId) {
        self.declare(name, len, true)
    }

    /// Declares a non-parameter input group (state, observation, batch data).
    pub fn input(&mut self, name: impl Into<String>, len: usize) -> (GroupId, NodeId) {
        self.declare(name, len, false)
    }

    fn declare(&mut self, name: impl Into<String>, len: usize, is_param: bool) -> (GroupId, NodeId) {
        self.groups.push(Group { name: name.into(), len, is_param });
        let gid = self.groups.len() - 1;
        let nid = self.push(Op::Leaf(gid), len);
        (gid, nid)
    }

    /// Another node reading an already-declared group (weight sharing).
    pub fn leaf(&mut self, group: GroupId) -> NodeId {
        let len = self.groups[group].len;
        self.push(Op::Leaf(group), len)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        self.push(Op::Const(values), len)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    // ---- primitives -------------------------------------------------------

    /// Elementwise sum; a length-1 operand broadcasts over the other.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let len = self.broadcast_len(a, b);
        self.push(Op::Add(a, b), len)
    }

    /// Elementwise product; a length-1 operand broadcasts over the other.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let len = self.broadcast_len(a, b);
        self.push(Op::Mul(a, b), len)
    }

    fn broadcast_len(&self, a: NodeId, b: NodeId) -> usize {
        let (la, lb) = (self.nodes[a].len, self.nodes[b].len);
        if la == lb {
            la
        } else if la == 1 {
            lb
        } else if lb == 1 {
            la
        } else {
            panic!("shape mismatch: {la} vs {lb}");
        }
    }

    /// Row-major `rows x cols` matrix node times a length-`cols` vector node.
    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.nodes[w].len, rows * cols, "matrix node length");
        assert_eq!(self.nodes[x].len, cols, "vector node length");
        self.push(Op::MatVec { w, x, rows, cols }, rows)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Tanh(x), len)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Square(x), len)
    }

    /// Elementwise max(0, x). Subgradient 0 at the kink.
    pub fn max0(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Max0(x), len)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Recip(x), len)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Sin(x), len)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Cos(x), len)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let len = parts.iter().map(|&p| self.nodes[p].len).sum();
        self.push(Op::Concat(parts.to_vec()), len)
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.nodes[src].len, "slice out of range");
        self.push(Op::Slice { src, start, len }, len)
    }

    pub fn wrap_angle(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::WrapAngle(x), len)
    }

    // ---- convenience compounds (still built from the primitives) ----------

    /// Multiplication by a compile-time scalar constant.
    pub fn scale(&mut self, c: f64, x: NodeId) -> NodeId {
        let cn = self.scalar(c);
        self.mul(cn, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(-1.0, x)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// a / b as a * recip(b).
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let rb = self.recip(b);
        self.mul(a, rb)
    }

    /// Sum of all elements, realized as a ones-row matvec.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].len;
        let ones = self.constant(vec![1.0; n]);
        self.matvec(ones, x, 1, n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let all = self.concat(xs);
        let s = self.sum(all);
        self.scale(1.0 / xs.len() as f64, s)
    }

    // ---- evaluation --------------------------------------------------------

    /// Evaluates every node in order. Errors on unbound leaves, shape
    /// mismatches against declared group lengths, and non-finite values.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation, TapeError> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Const(c) => c.clone(),
                Op::Leaf(gid) => {
                    let group = &self.groups[*gid];
                    let bound = bindings
                        .get(*gid)
                        .ok_or_else(|| TapeError::UnboundLeaf(group.name.clone()))?;
                    if bound.len() != group.len {
                        return Err(TapeError::BindingShape {
                            name: group.name.clone(),
                            got: bound.len(),
                            want: group.len,
                        });
                    }
                    bound.to_vec()
                }
                Op::Add(a, b) => broadcast_zip(&values[*a], &values[*b], |x, y| x + y),
                Op::Mul(a, b) => broadcast_zip(&values[*a], &values[*b], |x, y| x * y),
                Op::MatVec { w, x, rows, cols } => {
                    let wv = &values[*w];
                    let xv = &values[*x];
                    let mut out = vec![0.0; *rows];
                    for r in 0..*rows {
                        let row = &wv[r * cols..(r + 1) * cols];
                        out[r] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
                    }
                    out
                }
                Op::Tanh(x) => values[*x].iter().map(|v| v.tanh()).collect(),
                Op::Square(x) => values[*x].iter().map(|v| v * v).collect(),
                Op::Max0(x) => values[*x].iter().map(|v| v.max(0.0)).collect(),
                Op::Recip(x) => values[*x].iter().map(|v| 1.0 / v).collect(),
                Op::Sin(x) => values[*x].iter().map(|v| v.sin()).collect(),
                Op::Cos(x) => values[*x].iter().map(|v| v.cos()).collect(),
                Op::Concat(parts) => {
                    let mut out = Vec::with_capacity(node.len);
                    for p in parts {
                        out.extend_from_slice(&values[*p]);
                    }
                    out
                }
                Op::Slice { src, start, len } => values[*src][*start..*start + *len].to_vec(),
                Op::WrapAngle(x) => values[*x].iter().map(|v| wrap_angle(*v)).collect(),
            };
            if v.iter().any(|x| !x.is_finite()) {
                return Err(TapeError::NonFinite { node: id, label: node.label.clone() });
            }
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    /// Reverse sweep from the designated scalar output, seeded with 1.
    pub fn backward(&self, eval: &Evaluation) -> Result<Gradients, TapeError> {
        let output = self.output.ok_or(TapeError::MissingOutput)?;
        self.backward_from(eval, output)
    }

    /// Reverse sweep seeded at an arbitrary scalar node.
    pub fn backward_from(&self, eval: &Evaluation, seed: NodeId) -> Result<Gradients, TapeError> {
        if self.nodes[seed].len != 1 {
            return Err(TapeError::NonScalarOutput(self.nodes[seed].len));
        }
        let mut adjoint: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.len]).collect();
        adjoint[seed][0] = 1.0;
        let mut grads: Vec<Vec<f64>> = self.groups.iter().map(|g| vec![0.0; g.len]).collect();

        for id in (0..self.nodes.len()).rev() {
            if adjoint[id].iter().all(|&a| a == 0.0) {
                continue;
            }
            let out_adj = std::mem::take(&mut adjoint[id]);
            match &self.nodes[id].op {
                Op::Const(_) => {}
                Op::Leaf(gid) => {
                    for (g, a) in grads[*gid].iter_mut().zip(&out_adj) {
                        *g += a;
                    }
                }
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut adjoint[*a], &out_adj, None);
                    accumulate_broadcast(&mut adjoint[*b], &out_adj, None);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&eval.values[*a], &eval.values[*b]);
                    accumulate_broadcast(&mut adjoint[*a], &out_adj, Some(vb));
                    accumulate_broadcast(&mut adjoint[*b], &out_adj, Some(va));
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = eval.values[*x].clone();
                    let wv = eval.values[*w].clone();
                    {
                        let wadj = &mut adjoint[*w];
                        for r in 0..*rows {
                            for c in 0..*cols {
                                wadj[r * cols + c] += out_adj[r] * xv[c];
                            }
                        }
                    }
                    {
                        let xadj = &mut adjoint[*x];
                        for r in 0..*rows {
                            for c in 0..*cols {
                                xadj[c] += wv[r * cols + c] * out_adj[r];
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &eval.values[id];
                    for ((xa, a), yi) in adjoint[*x].iter_mut().zip(&out_adj).zip(y) {
                        *xa += a * (1.0 - yi * yi);
                    }
                }
                Op::Square(x) => {
                    let xv = eval.values[*x].clone();
                    for ((xa, a), xi) in adjoint[*x].iter_mut().zip(&out_adj).zip(&xv) {
                        *xa += a * 2.0 * xi;
                    }
                }
                Op::Max0(x) => {
                    let xv = eval.values[*x].clone();
                    for ((xa, a), xi) in adjoint[*x].iter_mut().zip(&out_adj).zip(&xv) {
                        if *xi > 0.0 {
                            *xa += a;
                        }
                    }
                }
                Op::Recip(x) => {
                    let y = &eval.values[id];
                    for ((xa, a), yi) in adjoint[*x].iter_mut().zip(&out_adj).zip(y) {
                        *xa -= a * yi * yi;
                    }
                }
                Op::Sin(x) => {
                    let xv = eval.values[*x].clone();
                    for ((xa, a), xi) in adjoint[*x].iter_mut().zip(&out_adj).zip(&xv) {
                        *xa += a * xi.cos();
                    }
                }
                Op::Cos(x) => {
                    let xv = eval.values[*x].clone();
                    for ((xa, a), xi) in adjoint[*x].iter_mut().zip(&out_adj).zip(&xv) {
                        *xa -= a * xi.sin();
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let plen = self.nodes[*p].len;
                        for (pa, a) in adjoint[*p].iter_mut().zip(&out_adj[offset..offset + plen]) {
                            *pa += a;
                        }
                        offset += plen;
                    }
                }
                Op::Slice { src, start, .. } => {
                    for (i, a) in out_adj.iter().enumerate() {
                        adjoint[*src][start + i] += a;
                    }
                }
                Op::WrapAngle(x) => {
                    for (xa, a) in adjoint[*x].iter_mut().zip(&out_adj) {
                        *xa += a;
                    }
                }
            }
        }
        Ok(Gradients { by_group: grads })
    }

    /// Central-difference check of every parameter-group coordinate against
    /// the backward gradients. Returns the worst relative error seen.
    pub fn finite_diff_check(&self, bindings: &Bindings, epsilon: f64) -> Result<f64, TapeError> {
        assert!(epsilon > 0.0, "epsilon must be positive");
        let eval = self.forward(bindings)?;
        let grads = self.backward(&eval)?;
        let output = self.output.ok_or(TapeError::MissingOutput)?;

        let coords: Vec<(GroupId, usize)> = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_param)
            .flat_map(|(gid, g)| (0..g.len).map(move |i| (gid, i)))
            .collect();

        let errs = crate::par::map(&coords, |&(gid, i)| {
            let mut local = bindings.clone();
            let base = bindings.get(gid).expect("bound param").to_vec();
            let mut plus = base.clone();
            plus[i] += epsilon;
            local.set(gid, plus);
            let fp = self.forward(&local).map(|e| e.scalar(output));
            let mut minus = base.clone();
            minus[i] -= epsilon;
            local.set(gid, minus);
            let fm = self.forward(&local).map(|e| e.scalar(output));
            match (fp, fm) {
                (Ok(fp), Ok(fm)) => {
                    let numeric = (fp - fm) / (2.0 * epsilon);
                    let analytic = grads.group(gid)[i];
                    relative_error(analytic, numeric)
                }
                _ => f64::INFINITY,
            }
        });
        Ok(errs.into_iter().fold(0.0f64, f64::max))
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() / scale
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    // Angles within this band of the +-pi cut collapse onto +pi exactly.
    // Opposing-traffic heading differences sit right on the cut; without
    // the band, rounding jitter of symmetric states lands the two wrapped
    // values 2*pi apart.
    const CUT_BAND: f64 = 1e-6;
    let two_pi = 2.0 * PI;
    let mut x = a % two_pi;
    if x > PI {
        x -= two_pi;
    } else if x <= -PI {
        x += two_pi;
    }
    if x.abs() > PI - CUT_BAND {
        PI
    } else {
        x
    }
}

fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (la, lb) if la == lb => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        (1, _) => b.iter().map(|y| f(a[0], *y)).collect(),
        (_, 1) => a.iter().map(|x| f(*x, b[0])).collect(),
        (la, lb) => panic!("shape mismatch: {la} vs {lb}"),
    }
}

/// Adds `adj` (optionally times `factor`) into `dst`, reducing over the
/// broadcast dimension when `dst` has length 1.
fn accumulate_broadcast(dst: &mut [f64], adj: &[f64], factor: Option<&[f64]>) {
    match (dst.len(), adj.len()) {
        (ld, la) if ld == la => {
            for i in 0..ld {
                let f = factor.map_or(1.0, |fv| if fv.len() == 1 { fv[0] } else { fv[i] });
                dst[i] += adj[i] * f;
            }
        }
        (1, la) => {
            let mut acc = 0.0;
            for i in 0..la {
                let f = factor.map_or(1.0, |fv| if fv.len() == 1 { fv[0] } else { fv[i] });
                acc += adj[i] * f;
            }
            dst[0] += acc;
        }
        (ld, la) => panic!("adjoint shape mismatch: {ld} vs {la}"),
    }
}

/// Export for tests and diagnostics.
pub fn wrap_to_pi(a: f64) -> f64 {
    wrap_angle(a)
}
