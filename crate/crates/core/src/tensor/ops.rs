//! Primitive tensor operations. None of them broadcast implicitly: operands
//! of elementwise ops must have equal shapes, and the few ops that combine a
//! matrix with a vector say which axis the vector runs along in their name.

use super::kernels;
use super::tape::{Op, Saved};
use super::{DiffTensor, Real, Result, Tape, TensorError};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn saved<T: Real>(t: &DiffTensor<T>, node: Option<usize>) -> Saved<T> {
    Saved {
        node,
        values: t.values_arc().clone(),
    }
}

/// Splits a shape into (product of leading extents, last extent).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<Vec<Option<usize>>> {
        if a.shape() != b.shape() {
            return Err(mismatch(op, a.shape(), b.shape()));
        }
        self.nodes(op, &[a, b])
    }

    /// `[n,k] · [k,m] → [n,m]`.
    pub fn matmul(&self, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let nodes = self.nodes("matmul", &[a, b])?;
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = kernels::matmul(a.values(), b.values(), n, k, m);
        Ok(self.emit(vec![n, m], out, &nodes, || Op::MatMul {
            a: saved(a, nodes[0]),
            b: saved(b, nodes[1]),
            n,
            k,
            m,
        }))
    }

    /// Batched product `[B,n,k] · [B,k,m] → [B,n,m]`.
    pub fn bmm(&self, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(mismatch("bmm", a.shape(), b.shape()));
        }
        let nodes = self.nodes("bmm", &[a, b])?;
        let (batch, n, k, m) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = Vec::with_capacity(batch * n * m);
        for bi in 0..batch {
            out.extend(kernels::matmul(
                &a.values()[bi * n * k..(bi + 1) * n * k],
                &b.values()[bi * k * m..(bi + 1) * k * m],
                n,
                k,
                m,
            ));
        }
        Ok(self.emit(vec![batch, n, m], out, &nodes, || Op::BatchMatMul {
            a: saved(a, nodes[0]),
            b: saved(b, nodes[1]),
            batch,
            n,
            k,
            m,
        }))
    }

    pub fn add(&self, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.same_shape("add", a, b)?;
        let out = a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect();
        Ok(self.emit(a.shape().to_vec(), out, &nodes, || Op::Add { a: nodes[0], b: nodes[1] }))
    }

    pub fn sub(&self, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.same_shape("sub", a, b)?;
        let out = a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect();
        Ok(self.emit(a.shape().to_vec(), out, &nodes, || Op::Sub { a: nodes[0], b: nodes[1] }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.same_shape("mul", a, b)?;
        let out = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
        Ok(self.emit(a.shape().to_vec(), out, &nodes, || Op::Mul {
            a: saved(a, nodes[0]),
            b: saved(b, nodes[1]),
        }))
    }

    pub fn scale(&self, x: &DiffTensor<T>, c: f64) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("scale", &[x])?;
        let out = x.values().iter().map(|&v| T::from_f64(v.as_f64() * c)).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::Scale { x: nodes[0], c }))
    }

    /// Adds `bias [m]` to every row of `x [.., m]`.
    pub fn bias_add(&self, x: &DiffTensor<T>, bias: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let (_, cols) = rows_cols(x.shape());
        if bias.rank() != 1 || bias.shape()[0] != cols {
            return Err(mismatch("bias_add", x.shape(), bias.shape()));
        }
        let nodes = self.nodes("bias_add", &[x, bias])?;
        let b = bias.values();
        let out = x
            .values()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::BiasAdd {
            x: nodes[0],
            bias: nodes[1],
            cols,
        }))
    }

    /// `x @ w + b` for `x [n,k]`, `w [k,m]`, `b [m]`.
    pub fn linear(&self, x: &DiffTensor<T>, w: &DiffTensor<T>, b: Option<&DiffTensor<T>>) -> Result<DiffTensor<T>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.bias_add(&y, b),
            None => Ok(y),
        }
    }

    /// Multiplies row `i` of `x [rows, cols]` by `s[i]`.
    pub fn row_mul(&self, x: &DiffTensor<T>, s: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let (rows, cols) = rows_cols(x.shape());
        if s.len() != rows || s.rank() != 1 {
            return Err(mismatch("row_mul", x.shape(), s.shape()));
        }
        let nodes = self.nodes("row_mul", &[x, s])?;
        let out = x
            .values()
            .chunks_exact(cols)
            .zip(s.values())
            .flat_map(|(row, &sv)| row.iter().map(move |&v| v * sv))
            .collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::RowMul {
            x: saved(x, nodes[0]),
            s: saved(s, nodes[1]),
            cols,
        }))
    }

    /// Adds `b[i]` to every entry of row `i` of `x [rows, cols]`.
    pub fn row_add(&self, x: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let (rows, cols) = rows_cols(x.shape());
        if b.len() != rows || b.rank() != 1 {
            return Err(mismatch("row_add", x.shape(), b.shape()));
        }
        let nodes = self.nodes("row_add", &[x, b])?;
        let out = x
            .values()
            .chunks_exact(cols)
            .zip(b.values())
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::RowAdd {
            x: nodes[0],
            b: nodes[1],
            cols,
        }))
    }

    /// Concatenates along the last axis. Leading extents must agree.
    pub fn concat(&self, parts: &[&DiffTensor<T>]) -> Result<DiffTensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", &[], "no operands"))?;
        let lead = &first.shape()[..first.rank() - 1];
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
        }
        let nodes = self.nodes("concat", parts)?;
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.emit(shape, out, &nodes, || Op::Concat {
            parts: nodes.iter().copied().zip(widths.iter().copied()).collect(),
            rows,
        }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, x: &DiffTensor<T>, start: usize, len: usize) -> Result<DiffTensor<T>> {
        let (rows, cols) = rows_cols(x.shape());
        if len == 0 || start + len > cols {
            return Err(invalid(
                "slice_last",
                x.shape(),
                format!("range {start}..{} out of bounds", start + len),
            ));
        }
        let nodes = self.nodes("slice_last", &[x])?;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.values()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.emit(shape, out, &nodes, || Op::Slice {
            x: nodes[0],
            in_cols: cols,
            start,
            len,
        }))
    }

    pub fn reshape(&self, x: &DiffTensor<T>, shape: &[usize]) -> Result<DiffTensor<T>> {
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(mismatch("reshape", x.shape(), shape));
        }
        let nodes = self.nodes("reshape", &[x])?;
        Ok(self.emit(shape.to_vec(), x.values().to_vec(), &nodes, || Op::Reshape { x: nodes[0] }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        if x.rank() < 2 {
            return Err(invalid("transpose", x.shape(), "rank must be at least 2"));
        }
        let nodes = self.nodes("transpose", &[x])?;
        let r = x.rank();
        let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
        let batch = x.len() / (rows * cols);
        let out = kernels::transpose(x.values(), batch, rows, cols);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(self.emit(shape, out, &nodes, || Op::Transpose {
            x: nodes[0],
            batch,
            rows,
            cols,
        }))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&self, x: &DiffTensor<T>, times: usize) -> Result<DiffTensor<T>> {
        if times == 0 {
            return Err(invalid("repeat", x.shape(), "times must be positive"));
        }
        let nodes = self.nodes("repeat", &[x])?;
        let mut out = Vec::with_capacity(times * x.len());
        for _ in 0..times {
            out.extend_from_slice(x.values());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(x.shape());
        Ok(self.emit(shape, out, &nodes, || Op::Repeat { x: nodes[0], times }))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("sum", &[x])?;
        let s: f64 = x.values().iter().map(|v| v.as_f64()).sum();
        let n = x.len();
        Ok(self.emit(vec![1], vec![T::from_f64(s)], &nodes, || Op::Sum { x: nodes[0], n }))
    }

    pub fn mean(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("mean", &[x])?;
        let n = x.len();
        let s: f64 = x.values().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        Ok(self.emit(vec![1], vec![T::from_f64(s)], &nodes, || Op::Mean { x: nodes[0], n }))
    }

    /// `x·sigmoid(x)`, evaluated in the element precision.
    pub fn silu(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("silu", &[x])?;
        let out = x.values().iter().map(|&v| v / (T::one() + (-v).exp())).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::Silu { x: saved(x, nodes[0]) }))
    }

    /// `max(x, 0) + slope·min(x, 0)`; the derivative at 0 is taken as `slope`.
    pub fn leaky_relu(&self, x: &DiffTensor<T>, slope: f64) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("leaky_relu", &[x])?;
        let out = x
            .values()
            .iter()
            .map(|v| {
                let v = v.as_f64();
                T::from_f64(if v > 0.0 { v } else { v * slope })
            })
            .collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::LeakyRelu {
            x: saved(x, nodes[0]),
            slope,
        }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("gelu", &[x])?;
        let out = x.values().iter().map(|v| T::from_f64(kernels::gelu(v.as_f64()))).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::Gelu { x: saved(x, nodes[0]) }))
    }

    /// `|x|`, with derivative 0 at the origin.
    pub fn abs(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("abs", &[x])?;
        let out = x.values().iter().map(|v| v.abs()).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::Abs { x: saved(x, nodes[0]) }))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&self, x: &DiffTensor<T>, eps: f64) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("rms_norm", &[x])?;
        let (rows, cols) = rows_cols(x.shape());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.values().chunks_exact(cols) {
            let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|v| T::from_f64(v.as_f64() * r)));
        }
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::RmsNorm {
            x: saved(x, nodes[0]),
            rstd,
            cols,
        }))
    }

    /// `(x − mean) / sqrt(var + eps)` over the last axis (population variance,
    /// no affine parameters).
    pub fn layer_norm(&self, x: &DiffTensor<T>, eps: f64) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("layer_norm", &[x])?;
        let (rows, cols) = rows_cols(x.shape());
        let mut rstd = Vec::with_capacity(rows);
        let mut xhat = Vec::with_capacity(x.len());
        for row in x.values().chunks_exact(cols) {
            let mu: f64 = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v.as_f64() - mu) * r));
        }
        let out = xhat.iter().map(|&v| T::from_f64(v)).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::LayerNorm {
            x: nodes[0],
            xhat,
            rstd,
            cols,
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let nodes = self.nodes("softmax", &[x])?;
        let (_, cols) = rows_cols(x.shape());
        let mut y = Vec::with_capacity(x.len());
        for row in x.values().chunks_exact(cols) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let start = y.len();
            y.extend(row.iter().map(|v| (v.as_f64() - max).exp()));
            let z: f64 = y[start..].iter().sum();
            y[start..].iter_mut().for_each(|v| *v /= z);
        }
        let out = y.iter().map(|&v| T::from_f64(v)).collect();
        Ok(self.emit(x.shape().to_vec(), out, &nodes, || Op::Softmax { x: nodes[0], y, cols }))
    }

    fn nhwc(op: &'static str, x: &DiffTensor<T>) -> Result<[usize; 4]> {
        match x.shape() {
            &[b, h, w, c] => Ok([b, h, w, c]),
            s => Err(invalid(op, s, "expected [batch, height, width, channels]")),
        }
    }

    /// Nearest-neighbour 2× upsampling of `[B,H,W,C]`.
    pub fn upsample2x(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let [b, h, w, c] = Self::nhwc("upsample2x", x)?;
        let nodes = self.nodes("upsample2x", &[x])?;
        let out = kernels::upsample2x(x.values(), b, h, w, c);
        Ok(self.emit(vec![b, 2 * h, 2 * w, c], out, &nodes, || Op::Upsample2x {
            x: nodes[0],
            dims: [b, h, w, c],
        }))
    }

    /// Zero-padded 3×3 patches of `[B,H,W,C]` as `[B·H·W, 9·C]`.
    pub fn im2col3x3(&self, x: &DiffTensor<T>) -> Result<DiffTensor<T>> {
        let [b, h, w, c] = Self::nhwc("im2col3x3", x)?;
        let nodes = self.nodes("im2col3x3", &[x])?;
        let out = kernels::im2col3x3(x.values(), b, h, w, c);
        Ok(self.emit(vec![b * h * w, 9 * c], out, &nodes, || Op::Im2Col {
            x: nodes[0],
            dims: [b, h, w, c],
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> DiffTensor<f64> {
        DiffTensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tape.matmul(&a, &id).unwrap().values(), a.values());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let err = tape.matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 2], &[0.0; 4])).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn rms_norm_of_three_four() {
        let tape = Tape::new();
        let y = tape.rms_norm(&t(&[2], &[3.0, 4.0]), 1e-6).unwrap();
        let d = (12.5f64 + 1e-6).sqrt();
        assert!((y.values()[0] - 3.0 / d).abs() < 1e-12);
        assert!((y.values()[0] - 0.8485).abs() < 1e-4);
        assert!((y.values()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn leaky_relu_negative_one() {
        let tape = Tape::new();
        let y = tape.leaky_relu(&t(&[1], &[-1.0]), 0.2).unwrap();
        assert!((y.item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let y = tape.softmax(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 100.0])).unwrap();
        for row in y.values().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = tape.concat(&[&a, &b]).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(tape.slice_last(&c, 2, 1).unwrap().values(), b.values());
        assert_eq!(tape.slice_last(&c, 0, 2).unwrap().values(), a.values());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let x = t(&[1, 1, 2, 1], &[1.0, 2.0]);
        let y = tape.upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 1]);
        assert_eq!(y.values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let tape = Tape::<f64>::inactive();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.is_recorded());
        assert!(tape.is_empty());
    }

    #[test]
    fn no_grad_restores_mode() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.no_grad(|| tape.mul(&x, &x).unwrap());
        assert!(!y.is_recorded());
        assert!(tape.is_active());
        assert!(tape.mul(&x, &x).unwrap().is_recorded());
    }

    #[test]
    fn foreign_tape_is_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(&t(&[1], &[1.0]));
        assert_eq!(b.scale(&x, 2.0).unwrap_err(), TensorError::ForeignTape { op: "scale" });
    }
}
