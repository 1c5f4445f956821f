//! Reverse-mode differentiation over an eagerly evaluated operation graph.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the records in reverse, accumulating gradients for every leaf that
//! was created with `requires_grad`. Nodes are appended in execution order,
//! so parents always precede children and the record list is its own
//! topological order.
//!
//! Shape errors are rejected at record time with a diagnostic naming the
//! offending dimension; value-dependent checks (scalar loss, finite data)
//! happen where the contract demands them.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{numel, Tensor};
use crate::warp as warpk;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: usize,
    graph: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, f32),
    Abs(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    RsqrtEps(Var, f32),
    MulScalar { x: Var, s: Var },
    Reshape(Var),
    SliceRows { x: Var, from: usize },
    StackRows(Vec<Var>),
    SliceChannels { x: Var, from: usize, to: usize },
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    AddBiasRow(Var, Var),
    AddBiasChannel { x: Var, bias: Var, leaky: Option<f32> },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, leaky: Option<f32>, dims: ConvDims },
    Up2x(Var),
    Down2x(Var),
    Warp { features: Var, flow: Var },
    MulMask { x: Var, mask: Var },
    ScaleChannels { x: Var, scales: Var },
    RepeatBatch(Var, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Operation recorder and evaluator. See module docs.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Leaves that never influence the loss
    /// get an all-zero gradient of their own shape.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        assert_eq!(self.graph, graph.id, "gradients queried against a different graph");
        assert_eq!(v.graph, graph.id, "var belongs to a different graph");
        let shape = graph.nodes[v.node].value.shape().to_vec();
        match &self.grads[v.node] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "var belongs to a different graph");
        &self.nodes[v.node].value
    }

    /// Register a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it. The data is snapshotted.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t.clone(), needs)
    }

    /// Register a non-differentiable input, consuming the tensor.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_grad(false), false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var { node: self.nodes.len() - 1, graph: self.id }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.graph != self.id || v.node >= self.nodes.len() {
            return Err(Error::Invalid(format!("{op}: var from another graph")));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.node].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Var {
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("zip shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(op, t, needs)
    }

    fn unary_map(&mut self, op: Op, a: Var, f: impl Fn(f32) -> f32) -> Var {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("map shape");
        let needs = self.needs(a);
        self.push(op, t, needs)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "sub")?;
        self.check(b, "sub")?;
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.check(a, "scale")?;
        Ok(self.unary_map(Op::ScaleConst(a, c), a, |x| x * c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a, "abs")?;
        Ok(self.unary_map(Op::Abs(a), a, f32::abs))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.check(a, "leaky_relu")?;
        Ok(self.unary_map(Op::LeakyRelu(a, slope), a, |x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sigmoid")?;
        Ok(self.unary_map(Op::Sigmoid(a), a, sigmoid_stable))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a, "tanh")?;
        Ok(self.unary_map(Op::Tanh(a), a, |x| x.tanh()))
    }

    /// Numerically stable ln(1 + exp(x)).
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.check(a, "softplus")?;
        Ok(self.unary_map(Op::Softplus(a), a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p()))
    }

    /// Elementwise (x + eps)^(-1/2).
    pub fn rsqrt_eps(&mut self, a: Var, eps: f32) -> Result<Var> {
        self.check(a, "rsqrt_eps")?;
        Ok(self.unary_map(Op::RsqrtEps(a, eps), a, |x| 1.0 / (x + eps).sqrt()))
    }

    /// Multiply a tensor by a scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x, "mul_scalar")?;
        self.check(s, "mul_scalar")?;
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scale must be scalar, got {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data()[0];
        let needs = self.needs(x) || self.needs(s);
        let data: Vec<f32> = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("mul_scalar shape");
        Ok(self.push(Op::MulScalar { x, s }, t, needs))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a, "reshape")?;
        let t = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), t, needs))
    }

    /// Rows `from..to` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        self.check(a, "slice_rows")?;
        let shape = self.value(a).shape();
        let [rows, cols] = shape else {
            return Err(Error::shape("slice_rows", format!("expected rank 2, got {shape:?}")));
        };
        let (rows, cols) = (*rows, *cols);
        if from >= to || to > rows {
            return Err(Error::shape("slice_rows", format!("rows {from}..{to} of {rows}")));
        }
        let data = self.value(a).data()[from * cols..to * cols].to_vec();
        let t = Tensor::new(vec![to - from, cols], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows { x: a, from }, t, needs))
    }

    /// Stack 1-D vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows given".to_string()));
        }
        for v in rows {
            self.check(*v, "stack_rows")?;
        }
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut needs = false;
        for v in rows {
            let t = self.value(*v);
            if t.rank() != 1 || t.len() != n {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row shape {:?}, expected [{n}]", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
            needs |= self.needs(*v);
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), t, needs))
    }

    /// Channels `from..to` of a B x C x H x W tensor.
    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        self.check(a, "slice_channels")?;
        let shape = self.value(a).shape();
        let [b, c, h, w] = shape else {
            return Err(Error::shape("slice_channels", format!("expected rank 4, got {shape:?}")));
        };
        let (b, c, h, w) = (*b, *c, *h, *w);
        if from >= to || to > c {
            return Err(Error::shape("slice_channels", format!("channels {from}..{to} of {c}")));
        }
        let hw = h * w;
        let cc = to - from;
        let mut data = Vec::with_capacity(b * cc * hw);
        for bi in 0..b {
            let base = (bi * c + from) * hw;
            data.extend_from_slice(&self.value(a).data()[base..base + cc * hw]);
        }
        let t = Tensor::new(vec![b, cc, h, w], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceChannels { x: a, from, to }, t, needs))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum_all")?;
        let s: f32 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a, "mean_all")?;
        let n = self.value(a).len() as f32;
        let s: f32 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s / n), needs))
    }

    /// Sum of each row of a 2-D tensor.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        self.check(a, "row_sums")?;
        let shape = self.value(a).shape();
        let [rows, cols] = shape else {
            return Err(Error::shape("row_sums", format!("expected rank 2, got {shape:?}")));
        };
        let (rows, cols) = (*rows, *cols);
        let data: Vec<f32> =
            self.value(a).data().chunks(cols).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(vec![rows], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::RowSums(a), t, needs))
    }

    /// Inner product of two 1-D vectors as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_all(prod)
    }

    // ---- linear ----------------------------------------------------------

    /// (m x k) . (k x n) -> m x n
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let ([m, ka], [kb, n]) = (two_dims("matmul", self.value(a))?, two_dims("matmul", self.value(b))?);
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm_nn(m, ka, n, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), t, needs))
    }

    /// (m x k) . (n x k)^T -> m x n
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul_nt")?;
        self.check(b, "matmul_nt")?;
        let ([m, ka], [n, kb]) =
            (two_dims("matmul_nt", self.value(a))?, two_dims("matmul_nt", self.value(b))?);
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm_nt(m, ka, n, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT(a, b), t, needs))
    }

    /// Add a length-F bias to every row of a B x F tensor.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x, "add_bias_row")?;
        self.check(bias, "add_bias_row")?;
        let [b, f] = two_dims("add_bias_row", self.value(x))?;
        if self.value(bias).shape() != [f] {
            return Err(Error::shape(
                "add_bias_row",
                format!("bias {:?} vs feature dim {f}", self.value(bias).shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for row in data.chunks_mut(f) {
            for (v, bv) in row.iter_mut().zip(bd) {
                *v += *bv;
            }
        }
        let t = Tensor::new(vec![b, f], data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBiasRow(x, bias), t, needs))
    }

    /// input . weight^T + bias, the dense layer primitive.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(input, weight)?;
        self.add_bias_row(y, bias)
    }

    /// Add a length-C bias to every channel plane of a (B x) C x H x W tensor.
    pub fn add_bias_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.add_bias_channel_impl(x, bias, None)
    }

    /// Fused bias + leaky rectification over channel planes.
    pub fn add_bias_channel_act(&mut self, x: Var, bias: Var, slope: f32) -> Result<Var> {
        self.add_bias_channel_impl(x, bias, Some(slope))
    }

    fn add_bias_channel_impl(&mut self, x: Var, bias: Var, leaky: Option<f32>) -> Result<Var> {
        self.check(x, "add_bias_channel")?;
        self.check(bias, "add_bias_channel")?;
        let (_b, c, h, w) = four_dims("add_bias_channel", self.value(x))?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_bias_channel",
                format!("bias {:?} vs {c} channels", self.value(bias).shape()),
            ));
        }
        let hw = h * w;
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for item in data.chunks_mut(c * hw) {
            for (ch, plane) in item.chunks_mut(hw).enumerate() {
                let bv = bd[ch];
                match leaky {
                    None => {
                        for v in plane {
                            *v += bv;
                        }
                    }
                    Some(s) => {
                        for v in plane {
                            let y = *v + bv;
                            *v = if y > 0.0 { y } else { s * y };
                        }
                    }
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBiasChannel { x, bias, leaky }, t, needs))
    }

    // ---- convolution and resampling ---------------------------------------

    /// Cross-correlation with square kernel and zero padding. Input may be
    /// C x H x W or B x C x H x W; weight is C_out x C_in x k x k.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv2d_impl(input, weight, bias, stride, pad, None)
    }

    /// conv2d fused with a trailing leaky rectification.
    pub fn conv2d_act(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        slope: f32,
    ) -> Result<Var> {
        self.conv2d_impl(input, weight, bias, stride, pad, Some(slope))
    }

    fn conv2d_impl(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        leaky: Option<f32>,
    ) -> Result<Var> {
        self.check(input, "conv2d")?;
        self.check(weight, "conv2d")?;
        let batched = self.value(input).rank() == 4;
        let x = if batched {
            input
        } else {
            let s = self.value(input).shape().to_vec();
            if s.len() != 3 {
                return Err(Error::shape("conv2d", format!("input rank {} not 3 or 4", s.len())));
            }
            self.reshape(input, &[1, s[0], s[1], s[2]])?
        };
        let (b, c_in, h, w) = four_dims("conv2d", self.value(x))?;
        let ws = self.value(weight).shape().to_vec();
        let [c_out, wc_in, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight rank {} != 4", ws.len())));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} not square")));
        }
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in} != weight in-channels {wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
        }
        let h_out = kernels::conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("height {h} with k={kh} stride={stride} pad={pad} is not integral"))
        })?;
        let w_out = kernels::conv_out_extent(w, kw, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("width {w} with k={kw} stride={stride} pad={pad} is not integral"))
        })?;
        let dims = ConvDims { batch: b, c_in, h, w, c_out, k: kh, stride, pad, h_out, w_out };
        if let Some(bv) = bias {
            if self.value(bv).shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {c_out} output channels", self.value(bv).shape()),
                ));
            }
        }
        let mut out = vec![0.0f32; b * dims.out_item()];
        kernels::conv2d_forward(self.value(x).data(), self.value(weight).data(), &dims, &mut out);
        let hw_out = h_out * w_out;
        if let Some(bv) = bias {
            let bd = self.value(bv).data().to_vec();
            for item in out.chunks_mut(c_out * hw_out) {
                for (ch, plane) in item.chunks_mut(hw_out).enumerate() {
                    let b = bd[ch];
                    for v in plane {
                        *v += b;
                    }
                }
            }
        }
        if let Some(s) = leaky {
            for v in out.iter_mut() {
                if *v <= 0.0 {
                    *v *= s;
                }
            }
        }
        let t = Tensor::new(vec![b, c_out, h_out, w_out], out)?;
        let needs =
            self.needs(x) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let mut y = self.push(Op::Conv2d { input: x, weight, bias, leaky, dims }, t, needs);
        if !batched {
            y = self.reshape(y, &[c_out, h_out, w_out])?;
        }
        Ok(y)
    }

    /// Nearest-neighbor x2 upsampling of a (B x) C x H x W tensor.
    pub fn resample2x_up(&mut self, a: Var) -> Result<Var> {
        self.check(a, "resample2x_up")?;
        let (shape, planes, h, w) = plane_dims("resample2x_up", self.value(a))?;
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h * 2;
        out_shape[r - 1] = w * 2;
        let mut out = vec![0.0f32; numel(&out_shape)];
        kernels::up2x_forward(self.value(a).data(), planes, h, w, &mut out);
        let t = Tensor::new(out_shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Up2x(a), t, needs))
    }

    /// 2x2 mean pooling of a (B x) C x H x W tensor with even extents.
    pub fn resample2x_down(&mut self, a: Var) -> Result<Var> {
        self.check(a, "resample2x_down")?;
        let (shape, planes, h, w) = plane_dims("resample2x_down", self.value(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("resample2x_down", format!("odd extent {h}x{w}")));
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h / 2;
        out_shape[r - 1] = w / 2;
        let mut out = vec![0.0f32; numel(&out_shape)];
        kernels::down2x_forward(self.value(a).data(), planes, h, w, &mut out);
        let t = Tensor::new(out_shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Down2x(a), t, needs))
    }

    // ---- warping -----------------------------------------------------------

    /// Bilinear warp of B x C x H x W features along a B x 2 x H x W flow of
    /// normalized offsets; border samples clamp.
    pub fn warp(&mut self, features: Var, flow: Var) -> Result<Var> {
        self.check(features, "warp")?;
        self.check(flow, "warp")?;
        let (b, c, h, w) = four_dims("warp", self.value(features))?;
        let (fb, fc, fh, fw) = four_dims("warp", self.value(flow))?;
        if fc != 2 || fb != b || fh != h || fw != w {
            return Err(Error::shape(
                "warp",
                format!("flow {fb}x{fc}x{fh}x{fw} does not match features {b}x{c}x{h}x{w} (need {b}x2x{h}x{w})"),
            ));
        }
        let mut out = vec![0.0f32; b * c * h * w];
        warpk::warp_forward_batched(
            self.value(features).data(),
            self.value(flow).data(),
            b,
            c,
            h,
            w,
            &mut out,
        );
        let t = Tensor::new(vec![b, c, h, w], out)?;
        let needs = self.needs(features) || self.needs(flow);
        Ok(self.push(Op::Warp { features, flow }, t, needs))
    }

    /// Multiply B x C x H x W features by a B x 1 x H x W mask, broadcast
    /// over channels.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        self.check(x, "mul_mask")?;
        self.check(mask, "mul_mask")?;
        let (b, c, h, w) = four_dims("mul_mask", self.value(x))?;
        if self.value(mask).shape() != [b, 1, h, w] {
            return Err(Error::shape(
                "mul_mask",
                format!("mask {:?}, expected [{b}, 1, {h}, {w}]", self.value(mask).shape()),
            ));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let m = &self.value(mask).data()[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let plane = &mut out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (v, mv) in plane.iter_mut().zip(m) {
                    *v *= *mv;
                }
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(mask);
        Ok(self.push(Op::MulMask { x, mask }, t, needs))
    }

    /// Scale each channel plane of B x C x H x W by a per-(batch, channel)
    /// factor from a B x C tensor.
    pub fn scale_channels(&mut self, x: Var, scales: Var) -> Result<Var> {
        self.check(x, "scale_channels")?;
        self.check(scales, "scale_channels")?;
        let (b, c, h, w) = four_dims("scale_channels", self.value(x))?;
        if self.value(scales).shape() != [b, c] {
            return Err(Error::shape(
                "scale_channels",
                format!("scales {:?}, expected [{b}, {c}]", self.value(scales).shape()),
            ));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let sd = self.value(scales).data();
        for bi in 0..b {
            for ch in 0..c {
                let s = sd[bi * c + ch];
                for v in &mut out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    *v *= s;
                }
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(scales);
        Ok(self.push(Op::ScaleChannels { x, scales }, t, needs))
    }

    /// Tile a C x H x W tensor into a batch of B copies.
    pub fn repeat_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        self.check(x, "repeat_batch")?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("repeat_batch", format!("expected rank 3, got {s:?}")));
        }
        if batch == 0 {
            return Err(Error::shape("repeat_batch", "batch must be >= 1".to_string()));
        }
        let item = self.value(x).data();
        let mut data = Vec::with_capacity(batch * item.len());
        for _ in 0..batch {
            data.extend_from_slice(item);
        }
        let t = Tensor::new(vec![batch, s[0], s[1], s[2]], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::RepeatBatch(x, batch), t, needs))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Reverse-mode gradient accumulation from a scalar loss node. The graph
    /// is not consumed; calling twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss, "backward")?;
        if self.nodes[loss.node].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.node].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.node].needs_grad {
            grads[loss.node] = Some(vec![1.0]);
        }
        for i in (0..=loss.node).rev() {
            if grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f32>>], v: Var, write: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.node].needs_grad {
            return;
        }
        let buf = grads[v.node].get_or_insert_with(|| vec![0.0f32; self.nodes[v.node].value.len()]);
        write(buf);
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| axpy(d, g, 1.0));
                self.accum(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| axpy(d, g, 1.0));
                self.accum(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::ScaleConst(a, c) => {
                let c = *c;
                self.accum(grads, *a, |d| axpy(d, g, c));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * if *a > 0.0 {
                            1.0
                        } else if *a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                let s = *slope;
                self.accum(grads, *a, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * if *a > 0.0 { 1.0 } else { s };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * sigmoid_stable(*a);
                    }
                });
            }
            Op::RsqrtEps(a, _eps) => {
                let y = node.value.data();
                self.accum(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (-0.5 * y * y * y);
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.accum(grads, *x, |d| axpy(d, g, sv));
                self.accum(grads, *s, |d| {
                    d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f32>();
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |d| axpy(d, g, 1.0));
            }
            Op::SliceRows { x, from } => {
                let cols = self.value(*x).shape()[1];
                let off = from * cols;
                self.accum(grads, *x, |d| axpy(&mut d[off..off + g.len()], g, 1.0));
            }
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (i, r) in rows.iter().enumerate() {
                    self.accum(grads, *r, |d| axpy(d, &g[i * n..(i + 1) * n], 1.0));
                }
            }
            Op::SliceChannels { x, from, to } => {
                let [b, c, h, w] = self.value(*x).shape() else { unreachable!() };
                let (b, c, hw) = (*b, *c, h * w);
                let cc = to - from;
                self.accum(grads, *x, |d| {
                    for bi in 0..b {
                        let src = &g[bi * cc * hw..(bi + 1) * cc * hw];
                        let dst = &mut d[(bi * c + from) * hw..(bi * c + from + cc) * hw];
                        axpy(dst, src, 1.0);
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accum(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let gv = g[0] / self.value(*a).len() as f32;
                self.accum(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::RowSums(a) => {
                let cols = self.value(*a).shape()[1];
                self.accum(grads, *a, |d| {
                    for (row, gr) in d.chunks_mut(cols).zip(g) {
                        for v in row {
                            *v += gr;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.value(*a).shape() else { unreachable!() };
                let [_, n] = self.value(*b).shape() else { unreachable!() };
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| kernels::sgemm_nt(m, n, k, g, bv, 1.0, d));
                self.accum(grads, *b, |d| kernels::sgemm_tn(k, m, n, av, g, 1.0, d));
            }
            Op::MatmulNT(a, b) => {
                let [m, k] = self.value(*a).shape() else { unreachable!() };
                let [n, _] = self.value(*b).shape() else { unreachable!() };
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| kernels::sgemm_nn(m, n, k, g, bv, 1.0, d));
                self.accum(grads, *b, |d| kernels::sgemm_tn(n, m, k, g, av, 1.0, d));
            }
            Op::AddBiasRow(x, bias) => {
                let f = self.value(*bias).len();
                self.accum(grads, *x, |d| axpy(d, g, 1.0));
                self.accum(grads, *bias, |d| {
                    for row in g.chunks(f) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::AddBiasChannel { x, bias, leaky } => {
                let [_, c, h, w] = self.value(*x).shape() else { unreachable!() };
                let (c, hw) = (*c, h * w);
                let g_eff = apply_act_backward(g, node.value.data(), *leaky);
                let g_eff = g_eff.as_deref().unwrap_or(g);
                self.accum(grads, *x, |d| axpy(d, g_eff, 1.0));
                self.accum(grads, *bias, |d| {
                    for item in g_eff.chunks(c * hw) {
                        for (ch, plane) in item.chunks(hw).enumerate() {
                            d[ch] += plane.iter().sum::<f32>();
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, bias, leaky, dims } => {
                let g_eff = apply_act_backward(g, node.value.data(), *leaky);
                let g_eff = g_eff.as_deref().unwrap_or(g);
                let want_input = self.nodes[input.node].needs_grad;
                let want_weight = self.nodes[weight.node].needs_grad;
                let (gi, gw) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g_eff,
                    dims,
                    want_input,
                    want_weight,
                );
                if let Some(gi) = gi {
                    self.accum(grads, *input, |d| axpy(d, &gi, 1.0));
                }
                if let Some(gw) = gw {
                    self.accum(grads, *weight, |d| axpy(d, &gw, 1.0));
                }
                if let Some(bv) = bias {
                    let hw = dims.h_out * dims.w_out;
                    self.accum(grads, *bv, |d| {
                        for item in g_eff.chunks(dims.c_out * hw) {
                            for (ch, plane) in item.chunks(hw).enumerate() {
                                d[ch] += plane.iter().sum::<f32>();
                            }
                        }
                    });
                }
            }
            Op::Up2x(a) => {
                let t = self.value(*a);
                let (planes, h, w) = plane_dims("up2x_back", t).map(|(_, p, h, w)| (p, h, w)).expect("checked at record");
                self.accum(grads, *a, |d| kernels::up2x_backward(g, planes, h, w, d));
            }
            Op::Down2x(a) => {
                let t = self.value(*a);
                let (planes, h, w) = plane_dims("down2x_back", t).map(|(_, p, h, w)| (p, h, w)).expect("checked at record");
                self.accum(grads, *a, |d| kernels::down2x_backward(g, planes, h, w, d));
            }
            Op::Warp { features, flow } => {
                let [b, c, h, w] = self.value(*features).shape() else { unreachable!() };
                let (b, c, h, w) = (*b, *c, *h, *w);
                let want_feat = self.nodes[features.node].needs_grad;
                let want_flow = self.nodes[flow.node].needs_grad;
                let (gf, gl) = warpk::warp_backward_batched(
                    self.value(*features).data(),
                    self.value(*flow).data(),
                    g,
                    b,
                    c,
                    h,
                    w,
                    want_feat,
                    want_flow,
                );
                if let Some(gf) = gf {
                    self.accum(grads, *features, |d| axpy(d, &gf, 1.0));
                }
                if let Some(gl) = gl {
                    self.accum(grads, *flow, |d| axpy(d, &gl, 1.0));
                }
            }
            Op::MulMask { x, mask } => {
                let [b, c, h, w] = self.value(*x).shape() else { unreachable!() };
                let (b, c, hw) = (*b, *c, h * w);
                let xv = self.value(*x).data();
                let mv = self.value(*mask).data();
                self.accum(grads, *x, |d| {
                    for bi in 0..b {
                        let m = &mv[bi * hw..(bi + 1) * hw];
                        for ch in 0..c {
                            let o = (bi * c + ch) * hw;
                            for p in 0..hw {
                                d[o + p] += g[o + p] * m[p];
                            }
                        }
                    }
                });
                self.accum(grads, *mask, |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * hw;
                            for p in 0..hw {
                                d[bi * hw + p] += g[o + p] * xv[o + p];
                            }
                        }
                    }
                });
            }
            Op::ScaleChannels { x, scales } => {
                let [b, c, h, w] = self.value(*x).shape() else { unreachable!() };
                let (b, c, hw) = (*b, *c, h * w);
                let xv = self.value(*x).data();
                let sv = self.value(*scales).data();
                self.accum(grads, *x, |d| {
                    for i in 0..b * c {
                        let s = sv[i];
                        for p in 0..hw {
                            d[i * hw + p] += g[i * hw + p] * s;
                        }
                    }
                });
                self.accum(grads, *scales, |d| {
                    for i in 0..b * c {
                        let mut acc = 0.0f32;
                        for p in 0..hw {
                            acc += g[i * hw + p] * xv[i * hw + p];
                        }
                        d[i] += acc;
                    }
                });
            }
            Op::RepeatBatch(x, batch) => {
                let item = self.value(*x).len();
                self.accum(grads, *x, |d| {
                    for bi in 0..*batch {
                        axpy(d, &g[bi * item..(bi + 1) * item], 1.0);
                    }
                });
            }
        }
    }
}

/// Gradient through a fused trailing leaky rectification. Valid because the
/// activation preserves sign (slope > 0), so the branch can be read off the
/// stored output.
fn apply_act_backward(g: &[f32], output: &[f32], leaky: Option<f32>) -> Option<Vec<f32>> {
    let slope = leaky?;
    Some(
        g.iter()
            .zip(output)
            .map(|(gv, y)| if *y > 0.0 { *gv } else { *gv * slope })
            .collect(),
    )
}

fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn sigmoid_stable(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn two_dims(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn four_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(Error::shape(op, format!("expected rank 4, got {s:?}"))),
    }
}

/// Shape, plane count and spatial extents of a rank-3/4 tensor.
fn plane_dims(op: &'static str, t: &Tensor) -> Result<(Vec<usize>, usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((t.shape().to_vec(), *c, *h, *w)),
        [b, c, h, w] => Ok((t.shape().to_vec(), b * c, *h, *w)),
        s => Err(Error::shape(op, format!("expected rank 3 or 4, got {s:?}"))),
    }
}

/// Central finite-difference check of the gradient of `f`.
///
/// `f` receives leaves for the given inputs and must return a scalar node.
/// Returns the maximum over all input entries of
/// |analytic - numeric| / max(1, |numeric|); non-finite values surface as
/// infinity so callers treat them as failures.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Invalid("finite_diff_check: step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad(true))).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("f must be scalar-valued, got {:?}", g.value(loss).shape()),
        ));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(&g, *v)).collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(&t.clone().with_grad(false))).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()? as f64)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * step as f64);
            let a = analytic[i].data()[e] as f64;
            if !numeric.is_finite() || !a.is_finite() {
                return Ok(f64::INFINITY);
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
