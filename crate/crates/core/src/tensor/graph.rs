use super::kernels::{self, ConvShape};
use super::{as_matrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn unit() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        shape: ConvShape,
        out_channels: usize,
    },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var, f64),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    GradReverse(Var, f64),
    Sum(Var),
    SpatialMean(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    SqDistMatrix(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Conv3d { .. } => "conv3d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GradReverse(..) => "grad_reverse",
            Op::Sum(_) => "sum",
            Op::SpatialMean(_) => "spatial_mean",
            Op::Concat(_) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::SqDistMatrix(_) => "sq_dist_matrix",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddChannelBias(a, b)
            | Op::AddRowBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv3d { input, kernel, .. } => vec![*input, *kernel],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a, _)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::GradReverse(a, _)
            | Op::Sum(a)
            | Op::SpatialMean(a)
            | Op::SqDistMatrix(a) => vec![*a],
            Op::Concat(v) | Op::StackRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// the node list is a topological order and backward is a reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_dims(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push(value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(dims)?;
        self.push(value, Op::Reshape(a))
    }

    /// 3-D cross-correlation of a `C×T×H×W` input with a `C_out×C×kT×kH×kW` kernel.
    pub fn conv3d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let (x_dims, k_dims) = (self.dims(input).to_vec(), self.dims(kernel).to_vec());
        let [c, t, h, w] = <[usize; 4]>::try_from(x_dims.as_slice()).map_err(|_| {
            Error::shape("conv3d", format!("input must be C×T×H×W, got {x_dims:?}"))
        })?;
        let [co, kc, kt, kh, kw] = <[usize; 5]>::try_from(k_dims.as_slice())
            .map_err(|_| Error::shape("conv3d", format!("kernel must be 5-D, got {k_dims:?}")))?;
        if kc != c {
            return Err(Error::shape(
                "conv3d",
                format!("kernel expects {kc} channels, input has {c}"),
            ));
        }
        let input_ext = [t, h, w];
        let kernel_ext = [kt, kh, kw];
        let mut output = [0usize; 3];
        for axis in 0..3 {
            let span = input_ext[axis] + 2 * geom.padding[axis];
            if geom.stride[axis] == 0 || span < kernel_ext[axis] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "non-positive output extent on axis {axis}: input {:?}, kernel {:?}, stride {:?}, padding {:?}",
                        input_ext, kernel_ext, geom.stride, geom.padding
                    ),
                ));
            }
            output[axis] = (span - kernel_ext[axis]) / geom.stride[axis] + 1;
        }
        let shape = ConvShape {
            channels: c,
            input: input_ext,
            kernel: kernel_ext,
            stride: geom.stride,
            padding: geom.padding,
            output,
        };
        let cols = kernels::im2col(self.value(input).data(), &shape);
        let p = shape.col_cols();
        let mut out = vec![0.0; co * p];
        kernels::gemm(
            co,
            shape.col_rows(),
            p,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![co, output[0], output[1], output[2]], out)?;
        self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                shape,
                out_channels: co,
            },
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×...` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.dims(x)[0];
        if self.dims(bias) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", self.dims(bias), self.dims(x)),
            ));
        }
        let per = self.value(x).len() / c;
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk, bv) in value.data_mut().chunks_exact_mut(per).zip(&b) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(value, Op::AddChannelBias(x, bias))
    }

    /// Adds `bias` to every row of an `R×C` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = as_matrix("add_row_bias", self.value(x))?;
        if self.dims(bias) != [c] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for input {:?}", self.dims(bias), self.dims(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        self.push(value, Op::AddRowBias(x, bias))
    }

    /// `x·w + b` for a batch of row vectors.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row_bias(xw, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + offset)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with the argument clamped from below at `floor`; the
    /// gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::Ln(a, floor), |x| x.max(floor).ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("sqrt of a non-positive value".into()));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_matrix("softmax_rows", self.value(a))?;
        let data = kernels::softmax_rows(self.value(a).data(), c);
        self.push(Tensor::new(vec![r, c], data)?, Op::SoftmaxRows(a))
    }

    /// Identity on the forward pass; scales the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::usage(format!(
                "grad_reverse lambda must be >= 0, got {lambda}"
            )));
        }
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a, lambda))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Averages a `C×(...)` tensor over every axis after the first, giving a
    /// length-`C` vector.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.len() < 2 {
            return Err(Error::shape(
                "spatial_mean",
                format!("need a channel axis plus at least one more, got {dims:?}"),
            ));
        }
        let c = dims[0];
        let per = self.value(a).len() / c;
        let data = self
            .value(a)
            .data()
            .chunks_exact(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        self.push(Tensor::vector(data), Op::SpatialMean(a))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat of zero tensors"));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.dims(p).len() != 1 {
                return Err(Error::shape(
                    "concat",
                    format!("expected vectors, got {:?}", self.dims(p)),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length tensors (flattened) as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::usage("stack_rows of zero tensors"));
        };
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            if self.value(r).len() != width {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row {:?} vs first row {:?}", self.dims(r), self.dims(first)),
                ));
            }
            data.extend_from_slice(self.value(r).data());
        }
        self.push(
            Tensor::new(vec![rows.len(), width], data)?,
            Op::StackRows(rows.to_vec()),
        )
    }

    /// All pairwise squared Euclidean distances between the rows of an `N×D`
    /// matrix, as an `N×N` matrix.
    pub fn sq_dist_matrix(&mut self, a: Var) -> Result<Var> {
        let (n, d) = as_matrix("sq_dist_matrix", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let xi = &x[i * d..(i + 1) * d];
                let xj = &x[j * d..(j + 1) * d];
                let dist: f64 = xi.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        self.push(Tensor::new(vec![n, n], out)?, Op::SqDistMatrix(a))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the `grad`
    /// buffers of every reachable leaf that requires a gradient. Calling it
    /// again without [`Graph::zero_grad`] adds to the existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.nodes[idx].op.name()
                )));
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.dims().to_vec(), g)?),
                }
                continue;
            }
            let contributions = self.local_grads(idx, &g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` against upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |a: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(a, (0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix("matmul", &self.nodes[a.0].value)?;
                let n = node.value.dims()[1];
                let mut res = Vec::new();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut da, 0.0);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut db, 0.0);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = as_matrix("transpose", &node.value)?;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Conv3d {
                input,
                kernel,
                shape,
                out_channels,
            } => {
                let p = shape.col_cols();
                let k = shape.col_rows();
                let mut res = Vec::new();
                if needs(*kernel) {
                    let cols = kernels::im2col(val(*input), shape);
                    let mut dk = vec![0.0; out_channels * k];
                    kernels::gemm(*out_channels, p, k, g, false, &cols, true, &mut dk, 0.0);
                    res.push((*kernel, dk));
                }
                if needs(*input) {
                    let mut dcols = vec![0.0; k * p];
                    kernels::gemm(
                        k,
                        *out_channels,
                        p,
                        val(*kernel),
                        true,
                        g,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; val(*input).len()];
                    kernels::col2im(&dcols, shape, &mut dx);
                    res.push((*input, dx));
                }
                res
            }
            Op::AddChannelBias(x, b) => {
                let c = val(*b).len();
                let per = g.len() / c;
                let db = g.chunks_exact(per).map(|ch| ch.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::AddRowBias(x, b) => {
                let c = val(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => elementwise(*a, &|_| *f),
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(*a);
                elementwise(*a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Exp(a) => elementwise(*a, &|i| y[i]),
            Op::Ln(a, floor) => {
                let x = val(*a);
                elementwise(*a, &|i| if x[i] > *floor { 1.0 / x[i] } else { 0.0 })
            }
            Op::Sqrt(a) => elementwise(*a, &|i| 0.5 / y[i]),
            Op::Square(a) => {
                let x = val(*a);
                elementwise(*a, &|i| 2.0 * x[i])
            }
            Op::Sigmoid(a) => elementwise(*a, &|i| y[i] * (1.0 - y[i])),
            Op::SoftmaxRows(a) => {
                let c = node.value.dims()[1];
                let mut da = vec![0.0; g.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(da.chunks_exact_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::GradReverse(a, lambda) => vec![(*a, g.iter().map(|v| -lambda * v).collect())],
            Op::SpatialMean(a) => {
                let n = val(*a).len();
                let c = g.len();
                let per = n / c;
                let mut da = Vec::with_capacity(n);
                for &gc in g {
                    da.extend(std::iter::repeat_n(gc / per as f64, per));
                }
                vec![(*a, da)]
            }
            Op::Concat(parts) | Op::StackRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).len();
                        let piece = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::SqDistMatrix(a) => {
                let (n, d) = as_matrix("sq_dist_matrix", &self.nodes[a.0].value)?;
                let x = val(*a);
                // dX = 2 (diag(rowsum S) X - S X) with S = G + Gᵀ
                let mut s = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        s[i * n + j] = g[i * n + j] + g[j * n + i];
                    }
                }
                let mut sx = vec![0.0; n * d];
                kernels::gemm(n, n, d, &s, false, x, false, &mut sx, 0.0);
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    let rs: f64 = s[i * n..(i + 1) * n].iter().sum();
                    for t in 0..d {
                        da[i * d + t] = 2.0 * (rs * x[i * d + t] - sx[i * d + t]);
                    }
                }
                vec![(*a, da)]
            }
        };
        Ok(out)
    }
}
