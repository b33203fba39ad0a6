use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// c (m x n) += op(a) . op(b) with optional transposition of the stored
/// operands: ta means a is stored (k x m), tb means b is stored (n x k).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    crow[j] += acc;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let brow = &b[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = a[l * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => unreachable!("no backward rule needs double transposition"),
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LN_EPS: f64 = 1e-5;
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { p: usize, start: usize },
    SliceCols { p: usize, start: usize },
    Reshape(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Max2(usize, usize),
    Min2(usize, usize),
    ReduceMin0 { p: usize, arg: Vec<usize> },
    ReduceMax0 { p: usize, arg: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    RepeatRowsEach { p: usize, times: usize },
    SumGroupRows { p: usize, group: usize },
    ScaleRows { x: usize, s: usize },
    Dropout { p: usize, mask: Vec<f64> },
    Embed { table: usize, ids: Vec<usize> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    GridSample {
        feat: usize,
        coords: usize,
        h: usize,
        w: usize,
    },
    SmoothL1 { a: usize, b: usize, beta: f64 },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug)]
struct Inner {
    nodes: Vec<Node>,
    eval: bool,
    rng: ChaCha8Rng,
}

/// Append-only computation tape shared by its tensors.
#[derive(Debug, Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to one node of a [`Graph`]. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                eval: false,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        self.push(rows, cols, data, false, Op::Leaf { trainable: false })
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(1, 1, vec![v])
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Trainable leaf.
    pub fn param(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        self.push(rows, cols, data, true, Op::Leaf { trainable: true })
    }

    /// Trainable leaf with uniform Xavier initialization.
    pub fn param_xavier(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.param(rows, cols, data)
    }

    /// Trainable leaf with small Gaussian-ish uniform init for embeddings.
    pub fn param_embedding(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.02..0.02)).collect();
        self.param(rows, cols, data)
    }

    /// Watermark for [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Drop every node created after the watermark. Handles to dropped
    /// nodes become invalid.
    pub fn rewind(&self, mark: usize) {
        let mut inner = self.inner.borrow_mut();
        assert!(mark <= inner.nodes.len(), "rewind past the end of the tape");
        inner.nodes.truncate(mark);
    }

    /// When set, dropout is the identity.
    pub fn set_eval(&self, eval: bool) {
        self.inner.borrow_mut().eval = eval;
    }

    pub fn is_eval(&self) -> bool {
        self.inner.borrow().eval
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of trainable
    /// leaves accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.graph.inner) {
            return Err(NumericsError::GraphMismatch("backward"));
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let loss_node = &inner.nodes[loss.id];
        if loss_node.rows != 1 || loss_node.cols != 1 {
            return Err(NumericsError::NonScalarLoss {
                rows: loss_node.rows,
                cols: loss_node.cols,
            });
        }

        let nodes = &mut inner.nodes;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);

        // parents always precede children on the tape, so one reverse
        // sweep visits nodes in a valid topological order
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let (rows, cols) = (nodes[id].rows, nodes[id].cols);
            let op = nodes[id].op.clone();

            let needs = |nodes: &Vec<Node>, p: usize| nodes[p].needs_grad;
            macro_rules! acc {
                ($p:expr, $write:expr) => {{
                    let p = $p;
                    if needs(nodes, p) {
                        let buf = local[p]
                            .get_or_insert_with(|| vec![0.0; nodes[p].rows * nodes[p].cols]);
                        #[allow(clippy::redundant_closure_call)]
                        ($write)(buf);
                    }
                }};
            }

            match op {
                Op::Leaf { trainable } => {
                    if trainable {
                        let node = &mut nodes[id];
                        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                        for (gd, gs) in grad.iter_mut().zip(&g) {
                            *gd += gs;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::AddRow(a, v) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc!(v, |buf: &mut Vec<f64>| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let bd = &nodes[b].data;
                        let ad = &nodes[a].data;
                        (
                            g.iter().zip(bd).map(|(gs, bv)| gs * bv).collect(),
                            g.iter().zip(ad).map(|(gs, av)| gs * av).collect(),
                        )
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let ad = &nodes[a].data;
                        let bd = &nodes[b].data;
                        let da = g.iter().zip(bd).map(|(gs, bv)| gs / bv).collect();
                        let db = g
                            .iter()
                            .zip(ad.iter().zip(bd))
                            .map(|(gs, (av, bv))| -gs * av / (bv * bv))
                            .collect();
                        (da, db)
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
                Op::Neg(a) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s * c;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let k = nodes[a].cols;
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let ad = &nodes[a].data;
                        let bd = &nodes[b].data;
                        let mut da = vec![0.0; nodes[a].data.len()];
                        let mut db = vec![0.0; nodes[b].data.len()];
                        // dA = dC . B^T ; dB = A^T . dC
                        gemm(rows, cols, k, &g, false, bd, true, &mut da);
                        gemm(k, rows, cols, ad, true, &g, false, &mut db);
                        (da, db)
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
                Op::Transpose(a) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        // out is (rows x cols) = (a.cols x a.rows)
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c * rows + r] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut row0 = 0usize;
                    for p in parts {
                        let (pr, stride) = (nodes[p].rows, nodes[p].cols * nodes[p].rows);
                        let start = row0 * cols;
                        acc!(p, |buf: &mut Vec<f64>| {
                            for (d, s) in buf.iter_mut().zip(&g[start..start + stride]) {
                                *d += s;
                            }
                        });
                        row0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col0 = 0usize;
                    for p in parts {
                        let pc = nodes[p].cols;
                        acc!(p, |buf: &mut Vec<f64>| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    buf[r * pc + c] += g[r * cols + col0 + c];
                                }
                            }
                        });
                        col0 += pc;
                    }
                }
                Op::SliceRows { p, start } => {
                    let pc = nodes[p].cols;
                    acc!(p, |buf: &mut Vec<f64>| {
                        for (i, s) in g.iter().enumerate() {
                            buf[start * pc + i] += s;
                        }
                    });
                }
                Op::SliceCols { p, start } => {
                    let pc = nodes[p].cols;
                    acc!(p, |buf: &mut Vec<f64>| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[r * pc + start + c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let dx: Vec<f64> = {
                        let y = &nodes[id].data;
                        let mut dx = vec![0.0; y.len()];
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for c in 0..cols {
                                dx[r * cols + c] = yr[c] * (gr[c] - dot);
                            }
                        }
                        dx
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (dx, dgamma, dbeta): (Vec<f64>, Vec<f64>, Vec<f64>) = {
                        let xd = &nodes[x].data;
                        let gd = &nodes[gamma].data;
                        let n = cols as f64;
                        let mut dx = vec![0.0; xd.len()];
                        let mut dgamma = vec![0.0; cols];
                        let mut dbeta = vec![0.0; cols];
                        for r in 0..rows {
                            let xr = &xd[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let mean = xr.iter().sum::<f64>() / n;
                            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv_std = 1.0 / (var + LN_EPS).sqrt();
                            let xhat: Vec<f64> =
                                xr.iter().map(|v| (v - mean) * inv_std).collect();
                            let gg: Vec<f64> =
                                gr.iter().zip(gd).map(|(gv, gam)| gv * gam).collect();
                            let mean_gg = gg.iter().sum::<f64>() / n;
                            let mean_gg_xhat =
                                gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                            for c in 0..cols {
                                dx[r * cols + c] =
                                    (gg[c] - mean_gg - xhat[c] * mean_gg_xhat) * inv_std;
                                dgamma[c] += gr[c] * xhat[c];
                                dbeta[c] += gr[c];
                            }
                        }
                        (dx, dgamma, dbeta)
                    };
                    acc!(x, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                    acc!(gamma, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dgamma) {
                            *d += s;
                        }
                    });
                    acc!(beta, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dbeta) {
                            *d += s;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let dx: Vec<f64> = nodes[a]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(x, gs)| gs * gelu_tanh_grad(*x))
                        .collect();
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                }
                Op::Relu(a) => {
                    let dx: Vec<f64> = nodes[a]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(x, gs)| if *x > 0.0 { *gs } else { 0.0 })
                        .collect();
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let dx: Vec<f64> = nodes[id]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(y, gs)| gs * y * (1.0 - y))
                        .collect();
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                }
                Op::Max2(a, b) | Op::Min2(a, b) => {
                    let take_a: Vec<bool> = {
                        let ad = &nodes[a].data;
                        let bd = &nodes[b].data;
                        let is_max = matches!(nodes[id].op, Op::Max2(..));
                        ad.iter()
                            .zip(bd)
                            .map(|(av, bv)| if is_max { av >= bv } else { av <= bv })
                            .collect()
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for ((d, s), t) in buf.iter_mut().zip(&g).zip(&take_a) {
                            if *t {
                                *d += s;
                            }
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for ((d, s), t) in buf.iter_mut().zip(&g).zip(&take_a) {
                            if !*t {
                                *d += s;
                            }
                        }
                    });
                }
                Op::ReduceMin0 { p, arg } | Op::ReduceMax0 { p, arg } => {
                    let pc = nodes[p].cols;
                    acc!(p, |buf: &mut Vec<f64>| {
                        for (c, &r) in arg.iter().enumerate() {
                            buf[r * pc + c] += g[c];
                        }
                    });
                }
                Op::SumAll(a) => {
                    acc!(a, |buf: &mut Vec<f64>| {
                        for d in buf.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let scale = 1.0 / (nodes[a].rows * nodes[a].cols) as f64;
                    acc!(a, |buf: &mut Vec<f64>| {
                        for d in buf.iter_mut() {
                            *d += g[0] * scale;
                        }
                    });
                }
                Op::RepeatRowsEach { p, times } => {
                    acc!(p, |buf: &mut Vec<f64>| {
                        for r in 0..rows {
                            let src = r / times;
                            for c in 0..cols {
                                buf[src * cols + c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::SumGroupRows { p, group } => {
                    acc!(p, |buf: &mut Vec<f64>| {
                        let prows = nodes[p].rows;
                        for r in 0..prows {
                            let dst = r / group;
                            for c in 0..cols {
                                buf[r * cols + c] += g[dst * cols + c];
                            }
                        }
                    });
                }
                Op::ScaleRows { x, s } => {
                    let (dx, ds): (Vec<f64>, Vec<f64>) = {
                        let xd = &nodes[x].data;
                        let sd = &nodes[s].data;
                        let mut dx = vec![0.0; xd.len()];
                        let mut ds = vec![0.0; sd.len()];
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] = g[r * cols + c] * sd[r];
                                ds[r] += g[r * cols + c] * xd[r * cols + c];
                            }
                        }
                        (dx, ds)
                    };
                    acc!(x, |buf: &mut Vec<f64>| {
                        for (d, sv) in buf.iter_mut().zip(&dx) {
                            *d += sv;
                        }
                    });
                    acc!(s, |buf: &mut Vec<f64>| {
                        for (d, sv) in buf.iter_mut().zip(&ds) {
                            *d += sv;
                        }
                    });
                }
                Op::Dropout { p, mask } => {
                    acc!(p, |buf: &mut Vec<f64>| {
                        for ((d, s), m) in buf.iter_mut().zip(&g).zip(&mask) {
                            *d += s * m;
                        }
                    });
                }
                Op::Embed { table, ids } => {
                    let d = cols;
                    acc!(table, |buf: &mut Vec<f64>| {
                        for (r, &row) in ids.iter().enumerate() {
                            for c in 0..d {
                                buf[row * d + c] += g[r * d + c];
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let v = nodes[logits].cols;
                    acc!(logits, |buf: &mut Vec<f64>| {
                        for (r, (&t, &wt)) in targets.iter().zip(&weights).enumerate() {
                            for c in 0..v {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                buf[r * v + c] += g[0] * wt * (probs[r * v + c] - onehot);
                            }
                        }
                    });
                }
                Op::GridSample { feat, coords, h, w } => {
                    let d = cols;
                    let (dfeat, dcoords): (Vec<f64>, Vec<f64>) = {
                        let fd = &nodes[feat].data;
                        let cd = &nodes[coords].data;
                        let mut dfeat = vec![0.0; fd.len()];
                        let mut dcoords = vec![0.0; cd.len()];
                        for r in 0..rows {
                            let bil = BilinearCell::locate(cd[r * 2], cd[r * 2 + 1], h, w);
                            let gr = &g[r * d..(r + 1) * d];
                            for (idx, wgt) in bil.taps() {
                                for c in 0..d {
                                    dfeat[idx * d + c] += wgt * gr[c];
                                }
                            }
                            let (dxp, dyp) = bil.coord_grads(fd, d, gr);
                            dcoords[r * 2] += dxp;
                            dcoords[r * 2 + 1] += dyp;
                        }
                        (dfeat, dcoords)
                    };
                    acc!(feat, |buf: &mut Vec<f64>| {
                        for (dst, s) in buf.iter_mut().zip(&dfeat) {
                            *dst += s;
                        }
                    });
                    acc!(coords, |buf: &mut Vec<f64>| {
                        for (dst, s) in buf.iter_mut().zip(&dcoords) {
                            *dst += s;
                        }
                    });
                }
                Op::SmoothL1 { a, b, beta } => {
                    let d: Vec<f64> = {
                        let ad = &nodes[a].data;
                        let bd = &nodes[b].data;
                        let n = ad.len() as f64;
                        ad.iter()
                            .zip(bd)
                            .map(|(av, bv)| {
                                let diff = av - bv;
                                let slope = if diff.abs() < beta {
                                    diff / beta
                                } else {
                                    diff.signum()
                                };
                                g[0] * slope / n
                            })
                            .collect()
                    };
                    acc!(a, |buf: &mut Vec<f64>| {
                        for (dst, s) in buf.iter_mut().zip(&d) {
                            *dst += s;
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        for (dst, s) in buf.iter_mut().zip(&d) {
                            *dst -= s;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Bilinear interpolation cell for one normalized coordinate pair.
struct BilinearCell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    w: usize,
    x_clamped: bool,
    y_clamped: bool,
    x_scale: f64,
    y_scale: f64,
}

impl BilinearCell {
    fn locate(xn: f64, yn: f64, h: usize, w: usize) -> Self {
        let x_clamped = !(0.0..=1.0).contains(&xn);
        let y_clamped = !(0.0..=1.0).contains(&yn);
        let xc = xn.clamp(0.0, 1.0);
        let yc = yn.clamp(0.0, 1.0);
        let x_scale = (w - 1) as f64;
        let y_scale = (h - 1) as f64;
        let xp = xc * x_scale;
        let yp = yc * y_scale;
        let x0 = (xp.floor() as usize).min(w - 1);
        let y0 = (yp.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        BilinearCell {
            x0,
            x1,
            y0,
            y1,
            fx: xp - x0 as f64,
            fy: yp - y0 as f64,
            w,
            x_clamped,
            y_clamped,
            x_scale,
            y_scale,
        }
    }

    fn taps(&self) -> [(usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0 * self.w + self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0 * self.w + self.x1, fx * (1.0 - fy)),
            (self.y1 * self.w + self.x0, (1.0 - fx) * fy),
            (self.y1 * self.w + self.x1, fx * fy),
        ]
    }

    fn sample(&self, feat: &[f64], d: usize, out: &mut [f64]) {
        for (idx, wgt) in self.taps() {
            let row = &feat[idx * d..(idx + 1) * d];
            for c in 0..d {
                out[c] += wgt * row[c];
            }
        }
    }

    /// Gradients of the output wrt the normalized coordinates, dotted
    /// with the incoming gradient. Clamped coordinates get zero.
    fn coord_grads(&self, feat: &[f64], d: usize, g: &[f64]) -> (f64, f64) {
        let row = |y: usize, x: usize| &feat[(y * self.w + x) * d..(y * self.w + x) * d + d];
        let (mut dxp, mut dyp) = (0.0, 0.0);
        let (fx, fy) = (self.fx, self.fy);
        let (r00, r01, r10, r11) = (
            row(self.y0, self.x0),
            row(self.y0, self.x1),
            row(self.y1, self.x0),
            row(self.y1, self.x1),
        );
        for c in 0..d {
            dxp += g[c] * ((r01[c] - r00[c]) * (1.0 - fy) + (r11[c] - r10[c]) * fy);
            dyp += g[c] * ((r10[c] - r00[c]) * (1.0 - fx) + (r11[c] - r01[c]) * fx);
        }
        (
            if self.x_clamped { 0.0 } else { dxp * self.x_scale },
            if self.y_clamped { 0.0 } else { dyp * self.y_scale },
        )
    }
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].rows
    }

    pub fn cols(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.graph.inner.borrow();
        (inner.nodes[self.id].rows, inner.nodes[self.id].cols)
    }

    pub fn elem_count(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!((node.rows, node.cols), (1, 1), "not a scalar tensor");
        node.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Overwrite a leaf's values in place (optimizer updates, loading).
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.graph.inner.borrow_mut();
        let node = &mut inner.nodes[self.id];
        assert_eq!(data.len(), node.data.len(), "set_data length mismatch");
        node.data.copy_from_slice(data);
    }

    fn same_graph(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(NumericsError::GraphMismatch(op))
        }
    }

    fn binary_same_shape(
        &self,
        other: &Tensor,
        op_name: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_graph(other, op_name)?;
        let (r, c) = self.shape();
        if (r, c) != other.shape() {
            return Err(NumericsError::Shape {
                op: op_name,
                detail: format!("{:?} vs {:?}", (r, c), other.shape()),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        let needs = a.needs_grad || b.needs_grad;
        drop(inner);
        Ok(self
            .graph
            .push(r, c, data, needs, make(self.id, other.id)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn max2(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "max2", Op::Max2, f64::max)
    }

    pub fn min2(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "min2", Op::Min2, f64::min)
    }

    /// Broadcast-add a (1 x n) row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.same_graph(row, "add_row")?;
        let (r, c) = self.shape();
        if row.shape() != (1, c) {
            return Err(NumericsError::Shape {
                op: "add_row",
                detail: format!("lhs {:?}, rhs {:?}", (r, c), row.shape()),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let v = &inner.nodes[row.id];
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(a.data[i * c + j] + v.data[j]);
            }
        }
        let needs = a.needs_grad || v.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, Op::AddRow(self.id, row.id)))
    }

    pub fn neg(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data.iter().map(|v| -v).collect();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, Op::Neg(self.id)))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data.iter().map(|v| v * factor).collect();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, Op::Scale(self.id, factor)))
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data.iter().map(|v| v + value).collect();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, Op::AddScalar(self.id)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "matmul")?;
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                detail: format!("{m}x{k} . {k2}x{n}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &a.data, false, &b.data, false, &mut data);
        let needs = a.needs_grad || b.needs_grad;
        drop(inner);
        Ok(self
            .graph
            .push(m, n, data, needs, Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data[i * c + j];
            }
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(c, r, data, needs, Op::Transpose(self.id)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start + len > r || len == 0 {
            return Err(NumericsError::Shape {
                op: "slice_rows",
                detail: format!("[{start}, {}) of {r} rows", start + len),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data[start * c..(start + len) * c].to_vec();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            len,
            c,
            data,
            needs,
            Op::SliceRows { p: self.id, start },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start + len > c || len == 0 {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                detail: format!("[{start}, {}) of {c} cols", start + len),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&a.data[i * c + start..i * c + start + len]);
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            r,
            len,
            data,
            needs,
            Op::SliceCols { p: self.id, start },
        ))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if rows * cols != r * c {
            return Err(NumericsError::Shape {
                op: "reshape",
                detail: format!("{r}x{c} -> {rows}x{cols}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data.clone();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(rows, cols, data, needs, Op::Reshape(self.id)))
    }

    /// Row-wise softmax over the last axis. Entries at or below the mask
    /// sentinel stay exactly zero.
    pub fn softmax(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &a.data[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for j in 0..c {
                let e = if row[j] <= MASKED_LOGIT {
                    0.0
                } else {
                    (row[j] - max).exp()
                };
                data[i * c + j] = e;
                total += e;
            }
            for j in 0..c {
                data[i * c + j] /= total;
            }
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, Op::Softmax(self.id)))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.same_graph(gamma, "layer_norm")?;
        self.same_graph(beta, "layer_norm")?;
        let (r, c) = self.shape();
        if gamma.shape() != (1, c) || beta.shape() != (1, c) {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    (r, c),
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let gd = &inner.nodes[gamma.id].data;
        let bd = &inner.nodes[beta.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs =
            x.needs_grad || inner.nodes[gamma.id].needs_grad || inner.nodes[beta.id].needs_grad;
        drop(inner);
        Ok(self.graph.push(
            r,
            c,
            data,
            needs,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
        ))
    }

    fn unary(
        &self,
        make: impl Fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let data = a.data.iter().map(|v| f(*v)).collect();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(r, c, data, needs, make(self.id)))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(Op::Gelu, gelu_tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    fn reduce0(&self, is_min: bool) -> Result<Tensor> {
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = vec![0.0; c];
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = a.data[j];
            let mut best_r = 0;
            for i in 1..r {
                let v = a.data[i * c + j];
                if (is_min && v < best) || (!is_min && v > best) {
                    best = v;
                    best_r = i;
                }
            }
            data[j] = best;
            arg[j] = best_r;
        }
        let needs = a.needs_grad;
        drop(inner);
        let op = if is_min {
            Op::ReduceMin0 { p: self.id, arg }
        } else {
            Op::ReduceMax0 { p: self.id, arg }
        };
        Ok(self.graph.push(1, c, data, needs, op))
    }

    /// Column-wise minimum over rows, yielding (1 x cols).
    pub fn reduce_min0(&self) -> Result<Tensor> {
        self.reduce0(true)
    }

    /// Column-wise maximum over rows, yielding (1 x cols).
    pub fn reduce_max0(&self) -> Result<Tensor> {
        self.reduce0(false)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let total: f64 = a.data.iter().sum();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(1, 1, vec![total], needs, Op::SumAll(self.id)))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let total: f64 = a.data.iter().sum::<f64>() / a.data.len() as f64;
        let needs = a.needs_grad;
        drop(inner);
        Ok(self
            .graph
            .push(1, 1, vec![total], needs, Op::MeanAll(self.id)))
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows_each(&self, times: usize) -> Result<Tensor> {
        if times == 0 {
            return Err(NumericsError::Shape {
                op: "repeat_rows_each",
                detail: "times must be positive".into(),
            });
        }
        let (r, c) = self.shape();
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&a.data[i * c..(i + 1) * c]);
            }
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            r * times,
            c,
            data,
            needs,
            Op::RepeatRowsEach {
                p: self.id,
                times,
            },
        ))
    }

    /// Sum consecutive groups of `group` rows.
    pub fn sum_group_rows(&self, group: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if group == 0 || r % group != 0 {
            return Err(NumericsError::Shape {
                op: "sum_group_rows",
                detail: format!("{r} rows not divisible into groups of {group}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let out_rows = r / group;
        let mut data = vec![0.0; out_rows * c];
        for i in 0..r {
            let dst = i / group;
            for j in 0..c {
                data[dst * c + j] += a.data[i * c + j];
            }
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            out_rows,
            c,
            data,
            needs,
            Op::SumGroupRows {
                p: self.id,
                group,
            },
        ))
    }

    /// Scale row i by s[i]; `s` is (rows x 1).
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        self.same_graph(s, "scale_rows")?;
        let (r, c) = self.shape();
        if s.shape() != (r, 1) {
            return Err(NumericsError::Shape {
                op: "scale_rows",
                detail: format!("x {:?}, s {:?}", (r, c), s.shape()),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let sd = &inner.nodes[s.id].data;
        let mut data = Vec::with_capacity(r * c);
        for (i, &sv) in sd.iter().enumerate() {
            for j in 0..c {
                data.push(a.data[i * c + j] * sv);
            }
        }
        let needs = a.needs_grad || inner.nodes[s.id].needs_grad;
        drop(inner);
        Ok(self.graph.push(
            r,
            c,
            data,
            needs,
            Op::ScaleRows {
                x: self.id,
                s: s.id,
            },
        ))
    }

    /// Inverted dropout with keep-probability rescaling. Identity when
    /// the graph is in eval mode.
    pub fn dropout(&self, p: f64) -> Result<Tensor> {
        let (r, c) = self.shape();
        let mut inner = self.graph.inner.borrow_mut();
        if inner.eval || p <= 0.0 {
            drop(inner);
            // keep the node count stable between train and eval graphs
            return self.scale(1.0);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if inner.rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let a = &inner.nodes[self.id];
        let data = a.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let needs = a.needs_grad;
        drop(inner);
        Ok(self
            .graph
            .push(r, c, data, needs, Op::Dropout { p: self.id, mask }))
    }

    /// Gather rows of an embedding table by id.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.shape();
        if ids.is_empty() {
            return Err(NumericsError::Shape {
                op: "embed",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Shape {
                op: "embed",
                detail: format!("index {bad} out of vocabulary {v}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&a.data[i * d..(i + 1) * d]);
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            ids.len(),
            d,
            data,
            needs,
            Op::Embed {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Weighted cross-entropy with integer targets: the scalar
    /// `sum_i w_i * (logsumexp(logits_i) - logits_i[target_i])`.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
        let (r, v) = self.shape();
        if targets.len() != r || weights.len() != r {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                detail: format!(
                    "{r} logit rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                detail: format!("target {bad} out of vocabulary {v}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let mut probs = vec![0.0; r * v];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &a.data[i * v..(i + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                total += e;
            }
            for j in 0..v {
                probs[i * v + j] /= total;
            }
            let lse = max + total.ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let needs = a.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            1,
            1,
            vec![loss],
            needs,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Bilinear sample of a (h*w x d) feature grid at (m x 2) normalized
    /// coordinates in [0,1]^2 (align-corners convention; out-of-range
    /// coordinates clamp and receive zero coordinate gradient).
    pub fn grid_sample(&self, coords: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        self.same_graph(coords, "grid_sample")?;
        let (rows, d) = self.shape();
        if rows != h * w {
            return Err(NumericsError::Shape {
                op: "grid_sample",
                detail: format!("feature rows {rows} != {h}*{w}"),
            });
        }
        let (m, two) = coords.shape();
        if two != 2 {
            return Err(NumericsError::Shape {
                op: "grid_sample",
                detail: format!("coords must be m x 2, got {m}x{two}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let feat = &inner.nodes[self.id];
        let cd = &inner.nodes[coords.id].data;
        let mut data = vec![0.0; m * d];
        for r in 0..m {
            let cell = BilinearCell::locate(cd[r * 2], cd[r * 2 + 1], h, w);
            cell.sample(&feat.data, d, &mut data[r * d..(r + 1) * d]);
        }
        let needs = feat.needs_grad || inner.nodes[coords.id].needs_grad;
        drop(inner);
        Ok(self.graph.push(
            m,
            d,
            data,
            needs,
            Op::GridSample {
                feat: self.id,
                coords: coords.id,
                h,
                w,
            },
        ))
    }

    /// Smooth-L1 (Huber) loss against a target, mean over elements.
    pub fn smooth_l1(&self, target: &Tensor, beta: f64) -> Result<Tensor> {
        self.same_graph(target, "smooth_l1")?;
        if self.shape() != target.shape() {
            return Err(NumericsError::Shape {
                op: "smooth_l1",
                detail: format!("{:?} vs {:?}", self.shape(), target.shape()),
            });
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[target.id];
        let n = a.data.len() as f64;
        let total: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(av, bv)| {
                let d = (av - bv).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let needs = a.needs_grad || b.needs_grad;
        drop(inner);
        Ok(self.graph.push(
            1,
            1,
            vec![total / n],
            needs,
            Op::SmoothL1 {
                a: self.id,
                b: target.id,
                beta,
            },
        ))
    }
}

/// Stack tensors vertically (all must share the column count).
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(NumericsError::Shape {
        op: "concat_rows",
        detail: "empty part list".into(),
    })?;
    let cols = first.cols();
    let graph = first.graph.clone();
    let mut rows = 0;
    let mut data = Vec::new();
    let mut needs = false;
    for p in parts {
        p.same_graph(first, "concat_rows")?;
        if p.cols() != cols {
            return Err(NumericsError::Shape {
                op: "concat_rows",
                detail: format!("column mismatch {} vs {cols}", p.cols()),
            });
        }
        let inner = graph.inner.borrow();
        let node = &inner.nodes[p.id];
        rows += node.rows;
        needs |= node.needs_grad;
        data.extend_from_slice(&node.data);
    }
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(rows, cols, data, needs, Op::ConcatRows(ids)))
}

/// Stack tensors horizontally (all must share the row count).
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(NumericsError::Shape {
        op: "concat_cols",
        detail: "empty part list".into(),
    })?;
    let rows = first.rows();
    let graph = first.graph.clone();
    let mut cols = 0;
    let mut needs = false;
    for p in parts {
        p.same_graph(first, "concat_cols")?;
        if p.rows() != rows {
            return Err(NumericsError::Shape {
                op: "concat_cols",
                detail: format!("row mismatch {} vs {rows}", p.rows()),
            });
        }
        cols += p.cols();
        needs |= graph.inner.borrow().nodes[p.id].needs_grad;
    }
    let mut data = Vec::with_capacity(rows * cols);
    {
        let inner = graph.inner.borrow();
        for r in 0..rows {
            for p in parts {
                let node = &inner.nodes[p.id];
                data.extend_from_slice(&node.data[r * node.cols..(r + 1) * node.cols]);
            }
        }
    }
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(rows, cols, data, needs, Op::ConcatCols(ids)))
}

/// Sentinel added to masked attention logits; softmax maps it to zero.
pub const ATTENTION_MASK_VALUE: f64 = MASKED_LOGIT;
