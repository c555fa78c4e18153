//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Builder methods evaluate eagerly and record the node, so a graph always
//! carries the values of its last evaluation. [`Graph::eval`] replays the
//! recorded nodes against new bindings without touching the stored values.

use super::matrix::{self, gemm, Matrix};
use super::GradError;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Param(String),
    Const,
    Identity(NodeId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Adds a `1 x c` row to every row.
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    XLogX(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, end: usize },
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape { input: NodeId, rows: usize, cols: usize },
    BlockMix { weights: NodeId, values: NodeId, n: usize },
    BlockGram { left: NodeId, right: NodeId, n: usize },
    BlockTranspose { input: NodeId, n: usize },
    /// Takes its value from `hard` and passes gradients to `soft` unchanged.
    StraightThrough { soft: NodeId, hard: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::Identity(_) => "identity",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::XLogX(_) => "xlogx",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::BlockMix { .. } => "block_mix",
            Op::BlockGram { .. } => "block_gram",
            Op::BlockTranspose { .. } => "block_transpose",
            Op::StraightThrough { .. } => "straight_through",
        }
    }

}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Matrix,
}

/// Gradient of a scalar seed with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(String, NodeId, (usize, usize))>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for each parameter node; unreachable parameters get zeros.
    pub fn params(&self) -> impl Iterator<Item = (&str, Matrix)> + '_ {
        self.params.iter().map(|(name, id, (r, c))| {
            let g = self.grads[id.0].clone().unwrap_or_else(|| Matrix::zeros(*r, *c));
            (name.as_str(), g)
        })
    }

    pub fn param(&self, name: &str) -> Option<Matrix> {
        self.params().find(|(n, _)| *n == name).map(|(_, g)| g)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

fn shape_err(node: usize, op: &Op, detail: String) -> GradError {
    GradError::Shape { node, op: op.name(), detail }
}

/// Forward rule for one op given the values of its inputs.
fn forward<'a>(node: usize, op: &Op, val: impl Fn(NodeId) -> &'a Matrix) -> Result<Matrix, GradError> {
    use Op::*;
    let same = |a: &Matrix, b: &Matrix| -> Result<(), GradError> {
        if a.shape() != b.shape() {
            return Err(shape_err(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    };
    let out = match op {
        Input(_) | Param(_) | Const => unreachable!("leaf nodes have no forward rule"),
        Identity(a) => val(*a).clone(),
        MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.cols() != b.rows() {
                return Err(shape_err(node, op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            a.matmul(b)
        }
        Add(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same(a, b)?;
            a.zip_map(b, |x, y| x + y)
        }
        Sub(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same(a, b)?;
            a.zip_map(b, |x, y| x - y)
        }
        Mul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same(a, b)?;
            a.zip_map(b, |x, y| x * y)
        }
        Div(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same(a, b)?;
            a.zip_map(b, |x, y| x / y)
        }
        AddRow(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(shape_err(node, op, format!("row {:?} onto {:?}", b.shape(), a.shape())));
            }
            a.add_row(b)
        }
        Tanh(a) => val(*a).map(f64::tanh),
        Sigmoid(a) => val(*a).map(matrix::sigmoid),
        SoftmaxRows(a) => val(*a).softmax_rows(),
        LogSoftmaxRows(a) => val(*a).log_softmax_rows(),
        Log(a) => val(*a).map(f64::ln),
        Abs(a) => val(*a).map(f64::abs),
        Sqrt(a) => val(*a).map(f64::sqrt),
        XLogX(a) => val(*a).map(matrix::xlogx),
        Sum(a) => Matrix::scalar(val(*a).sum()),
        Mean(a) => {
            let a = val(*a);
            if a.is_empty() {
                return Err(shape_err(node, op, "mean of empty matrix".into()));
            }
            Matrix::scalar(a.sum() / a.len() as f64)
        }
        SumRows(a) => val(*a).sum_rows(),
        ConcatCols(parts) => {
            let vals: Vec<&Matrix> = parts.iter().map(|p| val(*p)).collect();
            if vals.is_empty() || vals.iter().any(|v| v.rows() != vals[0].rows()) {
                return Err(shape_err(node, op, "row counts differ".into()));
            }
            Matrix::concat_cols(&vals)
        }
        SliceCols { input, start, end } => {
            let a = val(*input);
            if start >= end || *end > a.cols() {
                return Err(shape_err(node, op, format!("cols {start}..{end} of {:?}", a.shape())));
            }
            a.slice_cols(*start, *end)
        }
        Scale(a, s) => val(*a).map(|x| x * s),
        Transpose(a) => val(*a).transpose(),
        Reshape { input, rows, cols } => {
            let a = val(*input);
            if a.len() != rows * cols {
                return Err(shape_err(node, op, format!("{:?} to {rows}x{cols}", a.shape())));
            }
            a.reshape(*rows, *cols)
        }
        BlockMix { weights, values, n } => {
            let (w, v) = (val(*weights), val(*values));
            if w.cols() != *n || w.rows() != v.rows() || w.rows() % n != 0 {
                return Err(shape_err(node, op, format!("weights {:?} values {:?} n={n}", w.shape(), v.shape())));
            }
            matrix::block_mix(w, v, *n)
        }
        BlockGram { left, right, n } => {
            let (a, b) = (val(*left), val(*right));
            if a.shape() != b.shape() || a.rows() % n != 0 {
                return Err(shape_err(node, op, format!("{:?} vs {:?} n={n}", a.shape(), b.shape())));
            }
            matrix::block_gram(a, b, *n)
        }
        BlockTranspose { input, n } => {
            let a = val(*input);
            if a.cols() != *n || a.rows() % n != 0 {
                return Err(shape_err(node, op, format!("{:?} n={n}", a.shape())));
            }
            matrix::block_transpose(a, *n)
        }
        StraightThrough { soft, hard } => {
            let (s, h) = (val(*soft), val(*hard));
            same(s, h)?;
            h.clone()
        }
    };
    if !out.is_finite() {
        return Err(GradError::NonFinite { node, op: op.name() });
    }
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn leaf(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, value: Matrix) -> NodeId {
        self.leaf(Op::Input(name.to_string()), value)
    }

    pub fn param(&mut self, name: &str, value: Matrix) -> NodeId {
        self.leaf(Op::Param(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(Op::Const, value)
    }

    /// Records `op`, evaluating it against the current node values.
    pub fn push(&mut self, op: Op) -> Result<NodeId, GradError> {
        let id = self.nodes.len();
        let value = forward(id, &op, |i| &self.nodes[i.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn identity(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Identity(a))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Div(a, b))
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::AddRow(a, bias))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sigmoid(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::LogSoftmaxRows(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Log(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Abs(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sqrt(a))
    }
    pub fn xlogx(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::XLogX(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Mean(a))
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::SumRows(a))
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId, GradError> {
        self.push(Op::SliceCols { input, start, end })
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, GradError> {
        self.push(Op::Scale(a, s))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Transpose(a))
    }
    pub fn reshape(&mut self, input: NodeId, rows: usize, cols: usize) -> Result<NodeId, GradError> {
        self.push(Op::Reshape { input, rows, cols })
    }
    pub fn block_mix(&mut self, weights: NodeId, values: NodeId, n: usize) -> Result<NodeId, GradError> {
        self.push(Op::BlockMix { weights, values, n })
    }
    pub fn block_gram(&mut self, left: NodeId, right: NodeId, n: usize) -> Result<NodeId, GradError> {
        self.push(Op::BlockGram { left, right, n })
    }
    pub fn block_transpose(&mut self, input: NodeId, n: usize) -> Result<NodeId, GradError> {
        self.push(Op::BlockTranspose { input, n })
    }
    /// Forward value `hard`, gradient routed to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: Matrix) -> Result<NodeId, GradError> {
        let hard = self.constant(hard);
        self.push(Op::StraightThrough { soft, hard })
    }

    /// Re-evaluates the graph with `bindings` for named inputs and
    /// (optionally) parameters. Every input must be bound; unbound parameters
    /// keep their recorded value. Returns the named outputs.
    pub fn eval(&self, bindings: &HashMap<String, Matrix>) -> Result<HashMap<String, Matrix>, GradError> {
        let values = self.eval_all(bindings)?;
        Ok(self.outputs.iter().map(|(name, id)| (name.clone(), values[id.0].clone())).collect())
    }

    /// Like [`Graph::eval`] but returns every node value.
    pub fn eval_all(&self, bindings: &HashMap<String, Matrix>) -> Result<Vec<Matrix>, GradError> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) => {
                    let v = bindings.get(name).ok_or_else(|| GradError::Unbound(name.clone()))?;
                    if v.shape() != node.value.shape() {
                        return Err(shape_err(i, &node.op, format!("bound {:?}, recorded {:?}", v.shape(), node.value.shape())));
                    }
                    v.clone()
                }
                Op::Param(name) => match bindings.get(name) {
                    Some(v) if v.shape() != node.value.shape() => {
                        return Err(shape_err(i, &node.op, format!("bound {:?}, recorded {:?}", v.shape(), node.value.shape())));
                    }
                    Some(v) => v.clone(),
                    None => node.value.clone(),
                },
                Op::Const => node.value.clone(),
                op => forward(i, op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse pass from the scalar node `seed` using the recorded values.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients, GradError> {
        let values: Vec<&Matrix> = self.nodes.iter().map(|n| &n.value).collect();
        self.backward_with(&values, seed)
    }

    pub fn backward_with(&self, values: &[&Matrix], seed: NodeId) -> Result<Gradients, GradError> {
        if values[seed.0].shape() != (1, 1) {
            return Err(GradError::NotScalar { node: seed.0, shape: values[seed.0].shape() });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Matrix::scalar(1.0));
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            for (input, contrib) in local_grads(op, &g, values[i], |id| values[id.0]) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), NodeId(i), n.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Vector-Jacobian products of one node with respect to each of its inputs.
fn local_grads<'a>(
    op: &Op,
    g: &Matrix,
    out: &Matrix,
    val: impl Fn(NodeId) -> &'a Matrix,
) -> Vec<(NodeId, Matrix)> {
    use Op::*;
    match op {
        Input(_) | Param(_) | Const => vec![],
        Identity(a) => vec![(*a, g.clone())],
        MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = Matrix::zeros(av.rows(), av.cols());
            gemm(g, false, bv, true, &mut ga, 0.0);
            let mut gb = Matrix::zeros(bv.rows(), bv.cols());
            gemm(av, true, g, false, &mut gb, 0.0);
            vec![(*a, ga), (*b, gb)]
        }
        Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            vec![(*a, g.zip_map(bv, |x, y| x * y)), (*b, g.zip_map(av, |x, y| x * y))]
        }
        Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.zip_map(bv, |x, y| x / y);
            let mut gb = g.zip_map(av, |x, y| -x * y);
            gb = gb.zip_map(bv, |x, y| x / (y * y));
            vec![(*a, ga), (*b, gb)]
        }
        AddRow(a, b) => {
            let mut gb = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*b, gb)]
        }
        Tanh(a) => vec![(*a, g.zip_map(out, |x, y| x * (1.0 - y * y)))],
        Sigmoid(a) => vec![(*a, g.zip_map(out, |x, y| x * y * (1.0 - y)))],
        SoftmaxRows(a) => {
            let mut ga = Matrix::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let (gr, yr) = (g.row(r), out.row(r));
                let s = matrix::dot(gr, yr);
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o = yr[c] * (gr[c] - s);
                }
            }
            vec![(*a, ga)]
        }
        LogSoftmaxRows(a) => {
            let mut ga = Matrix::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let (gr, yr) = (g.row(r), out.row(r));
                let s: f64 = gr.iter().sum();
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o = gr[c] - yr[c].exp() * s;
                }
            }
            vec![(*a, ga)]
        }
        Log(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y))],
        Abs(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 }))],
        Sqrt(a) => vec![(*a, g.zip_map(out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }))],
        XLogX(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x * (y.ln() + 1.0) } else { 0.0 }))],
        Sum(a) => {
            let av = val(*a);
            vec![(*a, Matrix::filled(av.rows(), av.cols(), g.data()[0]))]
        }
        Mean(a) => {
            let av = val(*a);
            vec![(*a, Matrix::filled(av.rows(), av.cols(), g.data()[0] / av.len() as f64))]
        }
        SumRows(a) => {
            let av = val(*a);
            let mut ga = Matrix::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                ga.row_mut(r).iter_mut().for_each(|v| *v = g.data()[r]);
            }
            vec![(*a, ga)]
        }
        ConcatCols(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let w = val(*p).cols();
                    let part = g.slice_cols(offset, offset + w);
                    offset += w;
                    (*p, part)
                })
                .collect()
        }
        SliceCols { input, start, end } => {
            let av = val(*input);
            let mut ga = Matrix::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                ga.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
            }
            vec![(*input, ga)]
        }
        Scale(a, s) => vec![(*a, g.map(|x| x * s))],
        Transpose(a) => vec![(*a, g.transpose())],
        Reshape { input, .. } => {
            let av = val(*input);
            vec![(*input, g.reshape(av.rows(), av.cols()))]
        }
        BlockMix { weights, values, n } => {
            let (w, v) = (val(*weights), val(*values));
            let gw = matrix::block_gram(g, v, *n);
            let gv = matrix::block_mix(&matrix::block_transpose(w, *n), g, *n);
            vec![(*weights, gw), (*values, gv)]
        }
        BlockGram { left, right, n } => {
            let (a, b) = (val(*left), val(*right));
            let ga = matrix::block_mix(g, b, *n);
            let gb = matrix::block_mix(&matrix::block_transpose(g, *n), a, *n);
            vec![(*left, ga), (*right, gb)]
        }
        BlockTranspose { input, n } => vec![(*input, matrix::block_transpose(g, *n))],
        StraightThrough { soft, .. } => vec![(*soft, g.clone())],
    }
}
