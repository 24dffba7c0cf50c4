use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::{DiffTensor, NodeRef, Real, Result, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// An operand captured by a record: its node (if recorded) and its values.
#[derive(Clone)]
pub(crate) struct Saved<T: Real> {
    pub(crate) node: Option<usize>,
    pub(crate) values: Arc<Vec<T>>,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Saved<T>,
        b: Saved<T>,
        n: usize,
        k: usize,
        m: usize,
    },
    BatchMatMul {
        a: Saved<T>,
        b: Saved<T>,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Sub {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Saved<T>,
        b: Saved<T>,
    },
    Scale {
        x: Option<usize>,
        c: f64,
    },
    BiasAdd {
        x: Option<usize>,
        bias: Option<usize>,
        cols: usize,
    },
    RowMul {
        x: Saved<T>,
        s: Saved<T>,
        cols: usize,
    },
    RowAdd {
        x: Option<usize>,
        b: Option<usize>,
        cols: usize,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        rows: usize,
    },
    Slice {
        x: Option<usize>,
        in_cols: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Option<usize>,
    },
    Transpose {
        x: Option<usize>,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Repeat {
        x: Option<usize>,
        times: usize,
    },
    Sum {
        x: Option<usize>,
        n: usize,
    },
    Mean {
        x: Option<usize>,
        n: usize,
    },
    Silu {
        x: Saved<T>,
    },
    LeakyRelu {
        x: Saved<T>,
        slope: f64,
    },
    Gelu {
        x: Saved<T>,
    },
    Abs {
        x: Saved<T>,
    },
    RmsNorm {
        x: Saved<T>,
        rstd: Vec<f64>,
        cols: usize,
    },
    LayerNorm {
        x: Option<usize>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        cols: usize,
    },
    Softmax {
        x: Option<usize>,
        y: Vec<f64>,
        cols: usize,
    },
    Upsample2x {
        x: Option<usize>,
        dims: [usize; 4],
    },
    Im2Col {
        x: Option<usize>,
        dims: [usize; 4],
    },
}

pub(crate) struct Record<T: Real> {
    pub(crate) op: Op<T>,
}

/// Arena of backward records for one forward pass.
///
/// Records are appended in forward order and replayed in exact reverse order
/// by [`Tape::backward`]. While the tape is inactive (see [`Tape::no_grad`])
/// nothing is recorded and every result is an unrecorded constant.
pub struct Tape<T: Real = f32> {
    id: Cell<u64>,
    records: RefCell<Vec<Record<T>>>,
    active: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: Cell::new(NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)),
            records: RefCell::new(Vec::new()),
            active: Cell::new(true),
        }
    }

    /// A tape that never records; used for gradient-free evaluation.
    pub fn inactive() -> Self {
        let tape = Self::new();
        tape.active.set(false);
        tape
    }

    pub fn is_active(&self) -> bool {
        self.active.get()
    }

    pub fn set_active(&self, active: bool) {
        self.active.set(active);
    }

    /// Runs `f` with recording switched to `track`, restoring the previous mode.
    pub fn tracking<R>(&self, track: bool, f: impl FnOnce() -> R) -> R {
        let prev = self.active.replace(track);
        let out = f();
        self.active.set(prev);
        out
    }

    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.tracking(false, f)
    }

    /// Number of records appended so far.
    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every record. Tensors recorded before the reset become foreign.
    pub fn reset(&self) {
        self.records.borrow_mut().clear();
        self.id.set(NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed));
    }

    /// Registers `t` as a differentiable leaf. Inactive tapes return a
    /// detached copy.
    pub fn leaf(&self, t: &DiffTensor<T>) -> DiffTensor<T> {
        if !self.is_active() {
            return t.detach();
        }
        let node = self.push(Op::Leaf);
        DiffTensor::from_parts(t.shape().to_vec(), Arc::clone(t.values_arc()), Some(node))
    }

    fn push(&self, op: Op<T>) -> NodeRef {
        let mut records = self.records.borrow_mut();
        records.push(Record { op });
        NodeRef {
            tape: self.id.get(),
            index: records.len() - 1,
        }
    }

    /// Resolves operand nodes, rejecting tensors recorded on another tape.
    pub(crate) fn nodes(&self, op: &'static str, inputs: &[&DiffTensor<T>]) -> Result<Vec<Option<usize>>> {
        let id = self.id.get();
        inputs
            .iter()
            .map(|t| match t.node() {
                None => Ok(None),
                Some(n) if n.tape == id => Ok(Some(n.index)),
                Some(_) => Err(TensorError::ForeignTape { op }),
            })
            .collect()
    }

    /// Wraps freshly computed values, appending a record when the tape is
    /// active and at least one operand is recorded.
    pub(crate) fn emit(
        &self,
        shape: Vec<usize>,
        values: Vec<T>,
        nodes: &[Option<usize>],
        make_op: impl FnOnce() -> Op<T>,
    ) -> DiffTensor<T> {
        let node = if self.is_active() && nodes.iter().any(Option::is_some) {
            Some(self.push(make_op()))
        } else {
            None
        };
        DiffTensor::from_parts(shape, Arc::new(values), node)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &DiffTensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = match loss.node() {
            Some(n) if n.tape == self.id.get() => n.index,
            _ => return Err(TensorError::NotRecorded),
        };
        let records = self.records.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..records.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for idx in (0..=root).rev() {
            // operands always precede their result on the tape
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_deref() else { continue };
            propagate(&records[idx].op, g, lower);
        }
        Ok(Gradients {
            tape: self.id.get(),
            grads,
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], node: Option<usize>, contrib: Vec<T>) {
    let Some(i) = node else { return };
    match &mut grads[i] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn map<T: Real>(g: &[T], f: impl Fn(usize, f64) -> f64) -> Vec<T> {
    g.iter().enumerate().map(|(i, v)| T::from_f64(f(i, v.as_f64()))).collect()
}

fn propagate<T: Real>(op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, n, k, m } => {
            if a.node.is_some() {
                accumulate(grads, a.node, kernels::matmul_nt(g, &b.values, *n, *k, *m));
            }
            if b.node.is_some() {
                accumulate(grads, b.node, kernels::matmul_tn(&a.values, g, *n, *k, *m));
            }
        }
        Op::BatchMatMul { a, b, batch, n, k, m } => {
            let (n, k, m) = (*n, *k, *m);
            if a.node.is_some() {
                let mut ga = Vec::with_capacity(batch * n * k);
                for bi in 0..*batch {
                    ga.extend(kernels::matmul_nt(
                        &g[bi * n * m..(bi + 1) * n * m],
                        &b.values[bi * k * m..(bi + 1) * k * m],
                        n,
                        k,
                        m,
                    ));
                }
                accumulate(grads, a.node, ga);
            }
            if b.node.is_some() {
                let mut gb = Vec::with_capacity(batch * k * m);
                for bi in 0..*batch {
                    gb.extend(kernels::matmul_tn(
                        &a.values[bi * n * k..(bi + 1) * n * k],
                        &g[bi * n * m..(bi + 1) * n * m],
                        n,
                        k,
                        m,
                    ));
                }
                accumulate(grads, b.node, gb);
            }
        }
        Op::Add { a, b } => {
            accumulate(grads, *a, g.to_vec());
            accumulate(grads, *b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(grads, *a, g.to_vec());
            if b.is_some() {
                accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            if a.node.is_some() {
                accumulate(grads, a.node, g.iter().zip(b.values.iter()).map(|(&gv, &bv)| gv * bv).collect());
            }
            if b.node.is_some() {
                accumulate(grads, b.node, g.iter().zip(a.values.iter()).map(|(&gv, &av)| gv * av).collect());
            }
        }
        Op::Scale { x, c } => accumulate(grads, *x, map(g, |_, v| v * c)),
        Op::BiasAdd { x, bias, cols } => {
            accumulate(grads, *x, g.to_vec());
            if bias.is_some() {
                let mut acc = vec![0.0f64; *cols];
                for row in g.chunks_exact(*cols) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.as_f64();
                    }
                }
                accumulate(grads, *bias, acc.into_iter().map(T::from_f64).collect());
            }
        }
        Op::RowMul { x, s, cols } => {
            if x.node.is_some() {
                let gx = g
                    .chunks_exact(*cols)
                    .zip(s.values.iter())
                    .flat_map(|(row, &sv)| row.iter().map(move |&v| v * sv))
                    .collect();
                accumulate(grads, x.node, gx);
            }
            if s.node.is_some() {
                let gs = g
                    .chunks_exact(*cols)
                    .zip(x.values.chunks_exact(*cols))
                    .map(|(grow, xrow)| T::from_f64(grow.iter().zip(xrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum()))
                    .collect();
                accumulate(grads, s.node, gs);
            }
        }
        Op::RowAdd { x, b, cols } => {
            accumulate(grads, *x, g.to_vec());
            if b.is_some() {
                let gb = g
                    .chunks_exact(*cols)
                    .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum()))
                    .collect();
                accumulate(grads, *b, gb);
            }
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(node, width) in parts {
                if node.is_some() {
                    let mut gp = Vec::with_capacity(rows * width);
                    for r in 0..*rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + width]);
                    }
                    accumulate(grads, node, gp);
                }
                offset += width;
            }
        }
        Op::Slice { x, in_cols, start, len } => {
            let rows = g.len() / len;
            let mut gx = vec![T::default(); rows * in_cols];
            for r in 0..rows {
                gx[r * in_cols + start..r * in_cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            accumulate(grads, *x, gx);
        }
        Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
        Op::Transpose { x, batch, rows, cols } => {
            accumulate(grads, *x, kernels::transpose(g, *batch, *cols, *rows));
        }
        Op::Repeat { x, times } => {
            let inner = g.len() / times;
            let mut acc = vec![0.0f64; inner];
            for chunk in g.chunks_exact(inner) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v.as_f64();
                }
            }
            accumulate(grads, *x, acc.into_iter().map(T::from_f64).collect());
        }
        Op::Sum { x, n } => accumulate(grads, *x, vec![g[0]; *n]),
        Op::Mean { x, n } => accumulate(grads, *x, vec![T::from_f64(g[0].as_f64() / *n as f64); *n]),
        Op::Silu { x } => {
            let gx = map(g, |i, gv| {
                let xv = x.values[i].as_f64();
                let s = kernels::sigmoid(xv);
                gv * s * (1.0 + xv * (1.0 - s))
            });
            accumulate(grads, x.node, gx);
        }
        Op::LeakyRelu { x, slope } => {
            let gx = map(g, |i, gv| if x.values[i].as_f64() > 0.0 { gv } else { gv * slope });
            accumulate(grads, x.node, gx);
        }
        Op::Gelu { x } => {
            let gx = map(g, |i, gv| gv * kernels::gelu_grad(x.values[i].as_f64()));
            accumulate(grads, x.node, gx);
        }
        Op::Abs { x } => {
            let gx = map(g, |i, gv| {
                let xv = x.values[i].as_f64();
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            });
            accumulate(grads, x.node, gx);
        }
        Op::RmsNorm { x, rstd, cols } => {
            let mut gx = Vec::with_capacity(g.len());
            for ((grow, xrow), &r) in g.chunks_exact(*cols).zip(x.values.chunks_exact(*cols)).zip(rstd) {
                let dot: f64 = grow.iter().zip(xrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / *cols as f64;
                let r3 = r * r * r;
                gx.extend(
                    grow.iter()
                        .zip(xrow)
                        .map(|(gv, xv)| T::from_f64(r * gv.as_f64() - r3 * xv.as_f64() * dot)),
                );
            }
            accumulate(grads, x.node, gx);
        }
        Op::LayerNorm { x, xhat, rstd, cols } => {
            let mut gx = Vec::with_capacity(g.len());
            let c = *cols as f64;
            for ((grow, hrow), &r) in g.chunks_exact(*cols).zip(xhat.chunks_exact(*cols)).zip(rstd) {
                let mean_g: f64 = grow.iter().map(|v| v.as_f64()).sum::<f64>() / c;
                let mean_gh: f64 = grow.iter().zip(hrow).map(|(a, b)| a.as_f64() * b).sum::<f64>() / c;
                gx.extend(
                    grow.iter()
                        .zip(hrow)
                        .map(|(gv, h)| T::from_f64(r * (gv.as_f64() - mean_g - h * mean_gh))),
                );
            }
            accumulate(grads, *x, gx);
        }
        Op::Softmax { x, y, cols } => {
            let mut gx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(*cols).zip(y.chunks_exact(*cols)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b).sum();
                gx.extend(grow.iter().zip(yrow).map(|(gv, yv)| T::from_f64(yv * (gv.as_f64() - dot))));
            }
            accumulate(grads, *x, gx);
        }
        Op::Upsample2x { x, dims: [b, h, w, c] } => {
            accumulate(grads, *x, kernels::upsample2x_backward(g, *b, *h, *w, *c));
        }
        Op::Im2Col { x, dims: [b, h, w, c] } => {
            accumulate(grads, *x, kernels::col2im3x3(g, *b, *h, *w, *c));
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Real = f32> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `t`.
    ///
    /// `None` when `t` is not recorded on the tape that produced these
    /// gradients (for example a detached tensor). A recorded tensor that the
    /// loss does not depend on gets an all-zero gradient.
    pub fn wrt(&self, t: &DiffTensor<T>) -> Option<DiffTensor<T>> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        let values = match self.grads.get(node.index)? {
            Some(g) => g.clone(),
            None => vec![T::default(); t.len()],
        };
        Some(DiffTensor::from_parts(t.shape().to_vec(), Arc::new(values), None))
    }

    /// Like [`Gradients::wrt`] but zero-filled for unrecorded tensors.
    pub fn wrt_or_zero(&self, t: &DiffTensor<T>) -> DiffTensor<T> {
        self.wrt(t).unwrap_or_else(|| DiffTensor::zeros(t.shape()))
    }
}
