use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MeanPoolTime(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A dynamic computation tape.
///
/// Nodes are appended in creation order, so reverse creation order is a valid
/// reverse topological order and `backward` visits every node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(outer, n, inner)` extents for iterating the lanes along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn as_2d(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [] => Some((1, 1)),
        [n] => Some((1, n)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

/// Index plan for a broadcast binary op: `out[i, j] = f(a[i*ar + j*ac], b[i*br + j*bc])`.
struct Broadcast {
    shape: Vec<usize>,
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            let n = a.iter().product();
            return Ok(Self {
                shape: a.to_vec(),
                rows: 1,
                cols: n,
                a: (0, 1),
                b: (0, 1),
            });
        }
        let err = || TensorError::Shape(format!("cannot broadcast {a:?} with {b:?}"));
        let (ar, ac) = as_2d(a).ok_or_else(err)?;
        let (br, bc) = as_2d(b).ok_or_else(err)?;
        let rows = ar.max(br);
        let cols = ac.max(bc);
        let fits = |r: usize, c: usize| (r == rows || r == 1) && (c == cols || c == 1);
        if !fits(ar, ac) || !fits(br, bc) {
            return Err(err());
        }
        let strides = |r: usize, c: usize| {
            (
                if r == 1 { 0 } else { c },
                if c == 1 { 0 } else { 1 },
            )
        };
        Ok(Self {
            shape: vec![rows, cols],
            rows,
            cols,
            a: strides(ar, ac),
            b: strides(br, bc),
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                f(
                    i * self.cols + j,
                    i * self.a.0 + j * self.a.1,
                    i * self.b.0 + j * self.b.1,
                );
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: all extents and strides are derived from checked tensor shapes,
    // so every index touched by dgemm lies inside the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    /// Record an input value. Gradients accumulate on leaves that require them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul inner dims differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let plan = Broadcast::plan(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; plan.rows * plan.cols];
        plan.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
        self.push(name, Tensor::new(plan.shape, out)?, op, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast along rows or columns of a matrix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push(name, t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::Shift(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)` (Swish).
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let src = self.value(x);
        let (outer, n, inner) = lanes(src.shape(), axis)?;
        let d = src.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..n).map(|i| (d[at(i)] - max).exp()).sum();
                let log_total = total.ln();
                for i in 0..n {
                    out[at(i)] = if log {
                        d[at(i)] - max - log_total
                    } else {
                        (d[at(i)] - max).exp() / total
                    };
                }
            }
        }
        Tensor::new(src.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, false)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, true)?;
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Normalise each lane along `axis` to zero mean and unit variance, then
    /// apply a per-position `gain` and `bias` (each of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-10;
        let src = self.value(x);
        let (outer, n, inner) = lanes(src.shape(), axis)?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != n || b.len() != n {
            return Err(TensorError::Shape(format!(
                "layer_norm gain/bias length {}/{} does not match axis extent {n}",
                g.len(),
                b.len()
            )));
        }
        let d = src.data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let mean = (0..n).map(|i| d[at(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (d[at(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std.push(is);
                for i in 0..n {
                    let h = (d[at(i)] - mean) * is;
                    xhat[at(i)] = h;
                    out[at(i)] = h * g[i] + b[i];
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        };
        self.push("layer_norm", t, op, &[x, gain, bias])
    }

    /// Rows of `table` selected by `ids`, giving a `[ids.len(), d]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Shape(format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(src.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", t, op, &[table])
    }

    /// Per-channel 1-D convolution over time with zero "same" padding.
    ///
    /// `x` is `[T, C]`, `kernel` is `[K, C]` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = self.value(x).dims2()?;
        let (k, c2) = self.value(kernel).dims2()?;
        if c != c2 || k % 2 == 0 {
            return Err(TensorError::Shape(format!(
                "depthwise_conv1d: input [{t}, {c}] with kernel [{k}, {c2}] (kernel must be odd and match channels)"
            )));
        }
        let pad = k / 2;
        let (xs, ws) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                for ch in 0..c {
                    out[ti * c + ch] += ws[ki * c + ch] * xs[s * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![t, c], out)?;
        self.push("depthwise_conv1d", out, Op::DepthwiseConv1d { x, kernel }, &[x, kernel])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = lanes(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::Shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let n = self.shape(p)[axis];
            let d = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * n * inner;
                out[dst..dst + n * inner].copy_from_slice(&d[src..src + n * inner]);
            }
            offset += n;
        }
        let t = Tensor::new(shape, out)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", t, op, parts)
    }

    /// Arithmetic mean over the rows of a `[T, d]` matrix, giving `[1, d]`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if t == 0 {
            return Err(TensorError::Shape("mean_pool_time over zero rows".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in src.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        let t = Tensor::new(vec![1, d], out)?;
        self.push("mean_pool_time", t, Op::MeanPoolTime(x), &[x])
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner) = lanes(src.shape(), axis)?;
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for r in 0..inner {
                    out[o * inner + r] += d[(o * n + i) * inner + r];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        self.push("sum_axis", t, Op::SumAxis { x, axis }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner) = lanes(src.shape(), axis)?;
        if start + len > n {
            return Err(TensorError::Shape(format!(
                "slice {start}..{} exceeds extent {n} on axis {axis}",
                start + len
            )));
        }
        let d = src.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push("slice", t, Op::Slice { x, axis, start }, &[x])
    }

    /// `out[i, 0] = x[i, cols[i]]` for an `[R, C]` matrix and `R` column indices.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(TensorError::Shape(format!(
                "gather_cols: {} indices for [{r}, {c}]",
                cols.len()
            )));
        }
        let d = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let t = Tensor::new(vec![r, 1], out)?;
        let op = Op::GatherCols {
            x,
            cols: cols.to_vec(),
        };
        self.push("gather_cols", t, op, &[x])
    }

    /// Populate gradients of `loss` on every leaf that requires them.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if wants(*a) {
                    // dA = G B^T
                    add_into(&mut grads[a.0], m * k, |ga| {
                        gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, 1.0)
                    });
                }
                if wants(*b) {
                    // dB = A^T G
                    add_into(&mut grads[b.0], k * n, |gb| {
                        gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, 1.0)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let plan = Broadcast::plan(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (val(*a), val(*b));
                let (da, db): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match node.op {
                    Op::Add(..) => (|_, _| 1.0, |_, _| 1.0),
                    Op::Sub(..) => (|_, _| 1.0, |_, _| -1.0),
                    Op::Mul(..) => (|_, y| y, |x, _| x),
                    _ => (|_, y| 1.0 / y, |x, y| -x / (y * y)),
                };
                if wants(*a) {
                    add_into(&mut grads[a.0], len_of(*a), |ga| {
                        plan.for_each(|o, ia, ib| ga[ia] += g[o] * da(av[ia], bv[ib]))
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], len_of(*b), |gb| {
                        plan.for_each(|o, ia, ib| gb[ib] += g[o] * db(av[ia], bv[ib]))
                    });
                }
            }
            Op::Scale(x, c) => self.pointwise(*x, grads, |j| g[j] * c),
            Op::Shift(x) | Op::Reshape(x) => self.pointwise(*x, grads, |j| g[j]),
            Op::Tanh(x) => self.pointwise(*x, grads, |j| g[j] * (1.0 - y[j] * y[j])),
            Op::Sigmoid(x) => self.pointwise(*x, grads, |j| g[j] * y[j] * (1.0 - y[j])),
            Op::Silu(x) => {
                let xv = val(*x);
                self.pointwise(*x, grads, |j| {
                    let s = sigmoid(xv[j]);
                    g[j] * s * (1.0 + xv[j] * (1.0 - s))
                })
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                self.pointwise(*x, grads, |j| g[j] * sigmoid(xv[j]))
            }
            Op::Exp(x) => self.pointwise(*x, grads, |j| g[j] * y[j]),
            Op::Ln(x) => {
                let xv = val(*x);
                self.pointwise(*x, grads, |j| g[j] / xv[j])
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                if !wants(*x) {
                    return Ok(());
                }
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = lanes(node.value.shape(), *axis)?;
                add_into(&mut grads[x.0], y.len(), |gx| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + r;
                            if log {
                                let gsum: f64 = (0..n).map(|i| g[at(i)]).sum();
                                for i in 0..n {
                                    gx[at(i)] += g[at(i)] - y[at(i)].exp() * gsum;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                                for i in 0..n {
                                    gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, n, inner) = lanes(node.value.shape(), *axis)?;
                let gv = val(*gain);
                if wants(*x) {
                    add_into(&mut grads[x.0], y.len(), |gx| {
                        for o in 0..outer {
                            for r in 0..inner {
                                let at = |i: usize| (o * n + i) * inner + r;
                                let is = inv_std[o * inner + r];
                                let (mut m1, mut m2) = (0.0, 0.0);
                                for i in 0..n {
                                    let gh = g[at(i)] * gv[i];
                                    m1 += gh;
                                    m2 += gh * xhat[at(i)];
                                }
                                m1 /= n as f64;
                                m2 /= n as f64;
                                for i in 0..n {
                                    let gh = g[at(i)] * gv[i];
                                    gx[at(i)] += is * (gh - m1 - xhat[at(i)] * m2);
                                }
                            }
                        }
                    });
                }
                if wants(*gain) {
                    add_into(&mut grads[gain.0], n, |gg| {
                        for o in 0..outer {
                            for i in 0..n {
                                for r in 0..inner {
                                    let at = (o * n + i) * inner + r;
                                    gg[i] += g[at] * xhat[at];
                                }
                            }
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[bias.0], n, |gb| {
                        for o in 0..outer {
                            for i in 0..n {
                                for r in 0..inner {
                                    gb[i] += g[(o * n + i) * inner + r];
                                }
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let (_, d) = self.value(*table).dims2()?;
                    add_into(&mut grads[table.0], len_of(*table), |gt| {
                        for (row, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                gt[id * d + c] += g[row * d + c];
                            }
                        }
                    });
                }
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (t, c) = self.value(*x).dims2()?;
                let (k, _) = self.value(*kernel).dims2()?;
                let pad = k / 2;
                let (xs, ws) = (val(*x), val(*kernel));
                let taps = || {
                    (0..t).flat_map(move |ti| {
                        (0..k).filter_map(move |ki| {
                            let src = ti + ki;
                            (src >= pad && src - pad < t).then(|| (ti, ki, src - pad))
                        })
                    })
                };
                if wants(*x) {
                    add_into(&mut grads[x.0], t * c, |gx| {
                        for (ti, ki, s) in taps() {
                            for ch in 0..c {
                                gx[s * c + ch] += g[ti * c + ch] * ws[ki * c + ch];
                            }
                        }
                    });
                }
                if wants(*kernel) {
                    add_into(&mut grads[kernel.0], k * c, |gw| {
                        for (ti, ki, s) in taps() {
                            for ch in 0..c {
                                gw[ki * c + ch] += g[ti * c + ch] * xs[s * c + ch];
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = lanes(node.value.shape(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if wants(p) {
                        add_into(&mut grads[p.0], outer * n * inner, |gp| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * n * inner;
                                for (a, b) in gp[dst..dst + n * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + n * inner])
                                {
                                    *a += b;
                                }
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::MeanPoolTime(x) => {
                let (t, d) = self.value(*x).dims2()?;
                self.pointwise(*x, grads, |j| g[j % d] / t as f64);
            }
            Op::Sum(x) => self.pointwise(*x, grads, |_| g[0]),
            Op::SumAxis { x, axis } => {
                let (_, n, inner) = lanes(self.shape(*x), *axis)?;
                self.pointwise(*x, grads, |j| {
                    let o = j / (n * inner);
                    let r = j % inner;
                    g[o * inner + r]
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                self.pointwise(*x, grads, |j| g[(j % c) * r + j / c]);
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let (outer, n, inner) = lanes(self.shape(*x), *axis)?;
                    let len = node.value.shape()[*axis];
                    add_into(&mut grads[x.0], len_of(*x), |gx| {
                        for o in 0..outer {
                            let dst = (o * n + start) * inner;
                            let src = o * len * inner;
                            for (a, b) in gx[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::GatherCols { x, cols } => {
                if wants(*x) {
                    let (_, c) = self.value(*x).dims2()?;
                    add_into(&mut grads[x.0], len_of(*x), |gx| {
                        for (i, &j) in cols.iter().enumerate() {
                            gx[i * c + j] += g[i];
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Accumulate `dx[j] = f(j)` for an op whose input has the output's length
    /// (or, for reductions, whatever length `x` has).
    fn pointwise(&self, x: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let n = self.nodes[x.0].value.len();
        add_into(&mut grads[x.0], n, |gx| {
            for (j, v) in gx.iter_mut().enumerate() {
                *v += f(j);
            }
        });
    }
}
