use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    SquaredRelu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        index: Vec<Option<usize>>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// also a topological order of the dataflow graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not require grad or is not upstream of the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never accumulates gradient.
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.dims2(), bv.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(dim_err("matmul", av.shape(), bv.shape())),
        };
        if k != k2 {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let src = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + b` with `b` broadcast over every slice of the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.rank() != 1 || bv.numel() != n {
            return Err(dim_err("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if xv.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Row softmax of an `r×c` score matrix where row `i` only sees columns
    /// `0..=i + (c - r)`; the rest get probability zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if c < r {
            return Err(TensorError::Shape(format!(
                "causal softmax needs cols >= rows, got {r}x{c}"
            )));
        }
        if xv.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("causal_softmax"));
        }
        let offset = c - r;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let visible = i + offset + 1;
            let max = row[..visible]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..visible {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for o in &mut out[i * c..i * c + visible] {
                *o /= total;
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(value, Op::CausalSoftmax(x), &[x]))
    }

    /// Normalizes each slice of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(
                "layer_norm eps must be positive".into(),
            ));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let s = &xv.data()[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (s[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| gelu_parts(v).0)?;
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0))?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    /// `max(x, 0)^2`.
    pub fn squared_relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| {
            let r = v.max(0.0);
            r * r
        })?;
        Ok(self.push(value, Op::SquaredRelu(x), &[x]))
    }

    /// Cross-correlation of an `H×W×Cin` input with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (h, w, cin) = match xv.shape()[..] {
            [h, w, c] => (h, w, c),
            _ => return Err(dim_err("conv2d", xv.shape(), kv.shape())),
        };
        let (kh, kw, kcin, cout) = match kv.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(dim_err("conv2d", xv.shape(), kv.shape())),
        };
        if kcin != cin || stride == 0 {
            return Err(dim_err("conv2d", xv.shape(), kv.shape()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err("conv2d", xv.shape(), kv.shape()));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let patch = kh * kw * cin;
        let cols = im2col(xv.data(), (h, w, cin), (kh, kw), stride, padding, (ho, wo));
        let mut out = vec![0.0; ho * wo * cout];
        gemm(
            ho * wo,
            patch,
            cout,
            &cols,
            false,
            kv.data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[ho, wo, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols,
            },
            &[x, kernel],
        ))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = lv.dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Shape(format!(
                "cross_entropy: {t} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(TensorError::Contract(format!(
                    "target {} outside vocab {v}",
                    targets[r]
                )));
            }
            let row = lv.row(r);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite("cross_entropy"));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[targets[r]];
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() == 0 || pv.shape()[1..] != tail[..] {
                return Err(dim_err("concat", self.shape(*first), pv.shape()));
            }
            rows += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || len == 0 || start + len > xv.shape()[0] {
            return Err(TensorError::Shape(format!(
                "slice_rows {start}+{len} of {:?}",
                xv.shape()
            )));
        }
        let stride = xv.numel() / xv.shape()[0];
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(
            &shape,
            xv.data()[start * stride..(start + len) * stride].to_vec(),
        )?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(TensorError::Shape(format!(
                "slice_cols {start}+{len} of {r}x{c}"
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(&[r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Row lookup into an `N×D` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = tv.dims2()?;
        if index.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let mut data = vec![0.0; index.len() * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= n {
                    return Err(TensorError::Contract(format!(
                        "row {i} outside table of {n}"
                    )));
                }
                data[r * d..(r + 1) * d].copy_from_slice(tv.row(i));
            }
        }
        let value = Tensor::new(&[index.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        Ok(self.push(value, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        Ok(self.push(value, Op::Mean(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: vec![None; self.nodes.len()],
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.numel()])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, da, true);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, db, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let n = self.value(*b).numel();
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                if let Some(d) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                if let Some(d) = self.acc(grads, *x) {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let dd = gv.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * dd..(r + 1) * dd];
                        let hr = &xhat[r * dd..(r + 1) * dd];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / dd as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / dd as f64;
                        for j in 0..dd {
                            dx[r * dd + j] += is * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(dd).zip(xhat.chunks(dd)) {
                        for j in 0..dd {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for gr in g.chunks(dd) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::SquaredRelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * 2.0 * xv[i].max(0.0);
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let ks = self.value(*kernel).shape().to_vec();
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let patch = kh * kw * cin;
                if let Some(dk) = self.acc(grads, *kernel) {
                    gemm(patch, ho * wo, cout, cols, true, g, false, dk, true);
                }
                if self.nodes[x.0].requires_grad {
                    let kv = self.value(*kernel).data();
                    let mut dcols = vec![0.0; ho * wo * patch];
                    gemm(ho * wo, cout, patch, g, false, kv, true, &mut dcols, false);
                    let dx = self.acc(grads, *x).unwrap();
                    col2im(
                        &dcols,
                        dx,
                        (h, w, cin),
                        (kh, kw),
                        *stride,
                        *padding,
                        (ho, wo),
                    );
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            d[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2().unwrap();
                    if let Some(d) = self.acc(grads, p) {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let stride = node.value.numel() / node.value.shape()[0];
                if let Some(d) = self.acc(grads, *x) {
                    let base = start * stride;
                    d[base..base + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                if let Some(d) = self.acc(grads, *x) {
                    for (i, gr) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            d[i * c + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::Gather { table, index } => {
                let dd = self.value(*table).shape()[1];
                if let Some(d) = self.acc(grads, *table) {
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(i) = *ix {
                            for j in 0..dd {
                                d[i * dd + j] += g[r * dd + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

fn im2col(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let patch = kh * kw * cin;
    let mut cols = vec![0.0; ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = base + (ky * kw + kx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    (h, w, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (ho, wo): (usize, usize),
) {
    let patch = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = base + (ky * kw + kx) * cin;
                    for c in 0..cin {
                        dx[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}
