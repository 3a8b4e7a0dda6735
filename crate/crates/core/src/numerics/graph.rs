use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    AvgPool2d(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        hs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectiveScan { .. } => "selective_scan",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of forward operations; `backward` replays it in exact reverse order.
///
/// A graph optionally borrows a [`ParamStore`]; each parameter becomes a
/// single leaf no matter how many times it is used, so contributions from all
/// use sites sum into one gradient.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Tensor<T>>,
    grad_enabled: bool,
    corrupt: Option<String>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            overrides: HashMap::new(),
            grad_enabled: true,
            corrupt: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Graph that records no gradient requirements; backward yields nothing.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test hook: scale the upstream gradient of every `op_name` node during
    /// backward so that the gradient oracle must flag it.
    pub fn corrupt_gradient_of(&mut self, op_name: impl Into<String>) {
        self.corrupt = Some(op_name.into());
    }

    /// Use `value` instead of the stored parameter `id` (finite-difference
    /// probes). Must be called before the parameter is first read.
    pub fn override_param(&mut self, id: ParamId, value: Tensor<T>) {
        debug_assert!(!self.param_vars.contains_key(&id));
        self.overrides.insert(id, value);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Leaf that receives a gradient (probe inputs, oracle checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let value = self.param_value(id);
        let v = self.leaf(value, true, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter read as a constant (no gradient flows into it).
    pub fn param_detached(&mut self, id: ParamId) -> Var {
        let value = self.param_value(id);
        self.constant(value)
    }

    fn param_value(&self, id: ParamId) -> Tensor<T> {
        match self.overrides.get(&id) {
            Some(v) => v.clone(),
            None => self
                .params
                .expect("graph has no parameter store")
                .value(id)
                .cast::<T>(),
        }
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

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

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::Maximum(a, b),
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("unary preserves shape");
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let c = T::lit(s);
        self.unary(x, Op::Scale(x, s), |v| v * c)
    }

    pub fn offset(&mut self, x: Var, s: f64) -> Var {
        let c = T::lit(s);
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `s - x`
    pub fn rsub(&mut self, s: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.offset(n, s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(l).min(h))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", src.shape(), "rank 0"))?;
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    // ---------------------------------------------------------------- linalg

    /// `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` or `[b,m,k]x[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, shared) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], true),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], false),
            (3, 2) if sa[2] == sb[0] => (1, sa[0] * sa[1], sa[2], sb[1], true),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        for bi in 0..batch {
            let ab = &va[bi * m * k..(bi + 1) * m * k];
            let bb = if shared {
                vb
            } else {
                &vb[bi * k * n..(bi + 1) * k * n]
            };
            T::gemm(
                m,
                k,
                n,
                ab,
                k as isize,
                1,
                bb,
                n as isize,
                1,
                &mut out[bi * m * n..],
                false,
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x @ w + b` for `x:[..,in]`, `w:[in,out]`, `b:[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let rank = self.shape(y).len();
                let n = self.shape(b)[0];
                let mut bs = vec![1; rank];
                bs[rank - 1] = n;
                let b = self.reshape(b, bs)?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let idx = permute_index(&s, perm);
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Explicit broadcast: same rank, size-1 axes expand.
    pub fn broadcast_to(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || s.iter().zip(&shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::dim("broadcast", &s, &shape));
        }
        let idx = broadcast_index(&shape, &s);
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::BroadcastTo(x), &[x]))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                "sum_axis",
                &s,
                format!("axis {axis} out of range"),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ----------------------------------------------------------------- norms

    /// Normalize over the last axis with affine `gamma`, `beta` of that size.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &s, "rank 0"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", &s, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..n {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization of `x:[C, ...]` with `groups` channel groups and
    /// per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || groups == 0 || s[0] % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                &s,
                format!("channels not divisible into {groups} groups"),
            ));
        }
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", &s, self.shape(gamma)));
        }
        let spatial: usize = s[1..].iter().product();
        let per = c / groups * spatial;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..groups {
            let chunk = &src[gi * per..(gi + 1) * per];
            let (mean, rstd) = moments(chunk, eps);
            for (j, &v) in chunk.iter().enumerate() {
                let ch = (gi * per + j) / spatial;
                out[gi * per + j] = (v - mean) * rstd * g[ch] + b[ch];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    // ------------------------------------------------------------ spatial ops

    /// Non-overlapping `k x k` average pooling on `[C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                &s,
                format!("not poolable by {k}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let scale = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = (ch * ho + y / k) * wo + xx / k;
                    out[o] = out[o] + src[(ch * h + y) * w + xx] * scale;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2d(x, k), &[x]))
    }

    /// 2-D convolution of `x:[Cin,H,W]` with `w:[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let geo =
            ConvGeom::new(&sx, &sw, stride, pad).ok_or_else(|| Error::dim("conv2d", &sx, &sw))?;
        if let Some(b) = b {
            if self.shape(b) != [geo.cout] {
                return Err(Error::dim("conv2d", &sw, self.shape(b)));
            }
        }
        let cols = geo.im2col(self.value(x).data());
        let (q, p) = (geo.q(), geo.p());
        let mut out = vec![T::zero(); geo.cout * p];
        T::gemm(
            geo.cout,
            q,
            p,
            self.value(w).data(),
            q as isize,
            1,
            &cols,
            p as isize,
            1,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (co, row) in out.chunks_mut(p).enumerate() {
                for v in row.iter_mut() {
                    *v = *v + bv[co];
                }
            }
        }
        let value = Tensor::new(vec![geo.cout, geo.ho, geo.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &inputs,
        ))
    }

    /// Per-channel 1-D convolution of `x:[C,L]` with `w:[C,k]`, stride 1,
    /// zero padding `pad` on both ends.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[0] != sw[0] || sx[1] + 2 * pad < sw[1] {
            return Err(Error::dim("depthwise_conv1d", &sx, &sw));
        }
        let (c, l, k) = (sx[0], sx[1], sw[1]);
        let lo = l + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); c * lo];
        for ch in 0..c {
            for o in 0..lo {
                let mut acc = T::zero();
                for j in 0..k {
                    let i = (o + j) as isize - pad as isize;
                    if i >= 0 && (i as usize) < l {
                        acc = acc + wv[ch * k + j] * xv[ch * l + i as usize];
                    }
                }
                out[ch * lo + o] = acc;
            }
        }
        let value = Tensor::new(vec![c, lo], out)?;
        Ok(self.push(value, Op::DepthwiseConv1d { x, w, pad }, &[x, w]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::shape("concat", &[], "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                &first,
                format!("axis {axis} out of range"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                &s,
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Fused selective-scan recurrence over `x:[T,d]`.
    ///
    /// `delta:[T,d]` are positive step sizes, `a:[d,N]` the (negative)
    /// transition rates, `b,c:[T,N]` the input-dependent input/output maps and
    /// `d:[d]` the skip gain. Per step, with `h_0 = 0`:
    /// `h_t = exp(delta_t * a) * h_{t-1} + (delta_t * b_t) * x_t`,
    /// `y_t = <c_t, h_t> + d * x_t`.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 2 || sa.len() != 2 || sa[0] != sx[1] {
            return Err(Error::dim("selective_scan", &sx, &sa));
        }
        let (t_len, dm, n) = (sx[0], sx[1], sa[1]);
        for (v, want) in [
            (delta, vec![t_len, dm]),
            (b, vec![t_len, n]),
            (c, vec![t_len, n]),
            (d, vec![dm]),
        ] {
            if self.shape(v) != want.as_slice() {
                return Err(Error::dim("selective_scan", &want, self.shape(v)));
            }
        }
        let xv = self.value(x).data();
        let dv = self.value(delta).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let cv = self.value(c).data();
        let skip = self.value(d).data();
        let mut hs = vec![T::zero(); t_len * dm * n];
        let mut y = vec![T::zero(); t_len * dm];
        for t in 0..t_len {
            for i in 0..dm {
                let dt = dv[t * dm + i];
                let xi = xv[t * dm + i];
                let mut acc = T::zero();
                for s in 0..n {
                    let prev = if t == 0 {
                        T::zero()
                    } else {
                        hs[((t - 1) * dm + i) * n + s]
                    };
                    let h = (dt * av[i * n + s]).exp() * prev + dt * bv[t * n + s] * xi;
                    hs[(t * dm + i) * n + s] = h;
                    acc = acc + cv[t * n + s] * h;
                }
                y[t * dm + i] = acc + skip[i] * xi;
            }
        }
        let value = Tensor::new(vec![t_len, dm], y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                hs,
            },
            &[x, delta, a, b, c, d],
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode gradients of scalar `loss` for every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let corrupted;
                let upstream = match &self.corrupt {
                    Some(name) if name == node.op.name() => {
                        corrupted = g.iter().map(|&v| v * T::lit(1.5)).collect::<Vec<_>>();
                        &corrupted
                    }
                    _ => &g,
                };
                for (v, local) in self.local_grads(i, upstream) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => {
                            for (a, l) in acc.iter_mut().zip(&local) {
                                *a = *a + *l;
                            }
                        }
                        slot @ None => *slot = Some(local),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        let params = self.nodes[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.rg(*a) {
                    out.push((*a, reduce_to(g, node.value.shape(), shp(*a), |_, gv| gv)));
                }
                if self.rg(*b) {
                    out.push((
                        *b,
                        reduce_to(g, node.value.shape(), shp(*b), |_, gv| gv * sign),
                    ));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let os = node.value.shape();
                let ia = index_or_identity(os, shp(*a));
                let ib = index_or_identity(os, shp(*b));
                let (va, vb) = (val(*a), val(*b));
                let kind = node.op.name();
                for (&(v, is_a), idx) in [(a, true), (b, false)].iter().zip([&ia, &ib]) {
                    if !self.rg(*v) {
                        continue;
                    }
                    let mut acc = vec![T::zero(); self.nodes[v.0].value.numel()];
                    for k in 0..g.len() {
                        let (x, z) = (va[ia[k]], vb[ib[k]]);
                        let d = match (kind, is_a) {
                            ("mul", true) => z,
                            ("mul", false) => x,
                            ("div", true) => T::one() / z,
                            ("div", false) => -x / (z * z),
                            ("minimum", true) => bool_t(x <= z),
                            ("minimum", false) => bool_t(x > z),
                            ("maximum", true) => bool_t(x >= z),
                            (_, _) => bool_t(x < z),
                        };
                        acc[idx[k]] = acc[idx[k]] + g[k] * d;
                    }
                    out.push((*v, acc));
                }
            }
            Op::Scale(x, s) => {
                let c = T::lit(*s);
                out.push((*x, g.iter().map(|&v| v * c).collect()));
            }
            Op::Offset(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sigmoid(x) => out.push((*x, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv)))),
            Op::Softplus(x) => out.push((*x, zip_map(g, val(*x), |gv, xv| gv * sigmoid(xv)))),
            Op::Gelu(x) => out.push((*x, zip_map(g, val(*x), |gv, xv| gv * gelu_parts(xv).1))),
            Op::Exp(x) => out.push((*x, zip_map(g, y, |gv, yv| gv * yv))),
            Op::Log(x) => out.push((*x, zip_map(g, val(*x), |gv, xv| gv / xv))),
            Op::Abs(x) => out.push((*x, zip_map(g, val(*x), |gv, xv| gv * sign(xv)))),
            Op::Clamp(x, lo, hi) => {
                let (l, h) = (T::lit(*lo), T::lit(*hi));
                out.push((
                    *x,
                    zip_map(
                        g,
                        val(*x),
                        |gv, xv| if xv >= l && xv <= h { gv } else { T::zero() },
                    ),
                ));
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (batch, m, k, n, shared) = match (sa.len(), sb.len()) {
                    (2, 2) => (1, sa[0], sa[1], sb[1], true),
                    (3, 3) => (sa[0], sa[1], sa[2], sb[2], false),
                    _ => (1, sa[0] * sa[1], sa[2], sb[1], true),
                };
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bmat = if shared {
                            vb
                        } else {
                            &vb[bi * k * n..(bi + 1) * k * n]
                        };
                        // dA = dC * B^T
                        T::gemm(
                            m,
                            n,
                            k,
                            gb,
                            n as isize,
                            1,
                            bmat,
                            1,
                            n as isize,
                            &mut ga[bi * m * k..],
                            false,
                        );
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gbm = vec![T::zero(); vb.len()];
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let amat = &va[bi * m * k..(bi + 1) * m * k];
                        let dst = if shared {
                            &mut gbm[..]
                        } else {
                            &mut gbm[bi * k * n..]
                        };
                        // dB = A^T * dC
                        T::gemm(
                            k,
                            m,
                            n,
                            amat,
                            1,
                            k as isize,
                            gc,
                            n as isize,
                            1,
                            dst,
                            shared && bi > 0,
                        );
                    }
                    out.push((*b, gbm));
                }
            }
            Op::Permute(x, perm) => {
                let idx = permute_index(shp(*x), perm);
                let mut gx = vec![T::zero(); g.len()];
                for (k, &src) in idx.iter().enumerate() {
                    gx[src] = g[k];
                }
                out.push((*x, gx));
            }
            Op::BroadcastTo(x) => {
                out.push((*x, reduce_to(g, node.value.shape(), shp(*x), |_, gv| gv)))
            }
            Op::SumAxis(x, axis) => {
                let s = shp(*x);
                let (outer, len, inner) = split_axis(s, *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for ii in 0..inner {
                            gx[(o * len + l) * inner + ii] = g[o * inner + ii];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()])),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let n = *shp(*x).last().unwrap();
                let xv = val(*x);
                let gm = val(*gamma);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                for r in 0..xv.len() / n {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mean, rstd) = moments(row, *eps);
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = (0..n).map(|j| gr[j] * gm[j]).collect();
                    norm_backward(&xhat, &dxhat, rstd, &mut gx[r * n..(r + 1) * n]);
                    for j in 0..n {
                        gg[j] = gg[j] + gr[j] * xhat[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gbeta));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let s = shp(*x);
                let c = s[0];
                let spatial: usize = s[1..].iter().product();
                let per = c / groups * spatial;
                let xv = val(*x);
                let gm = val(*gamma);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for gi in 0..*groups {
                    let range = gi * per..(gi + 1) * per;
                    let chunk = &xv[range.clone()];
                    let (mean, rstd) = moments(chunk, *eps);
                    let xhat: Vec<T> = chunk.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = range.clone().map(|j| g[j] * gm[j / spatial]).collect();
                    norm_backward(&xhat, &dxhat, rstd, &mut gx[range.clone()]);
                    for (off, j) in range.enumerate() {
                        let ch = j / spatial;
                        gg[ch] = gg[ch] + g[j] * xhat[off];
                        gbeta[ch] = gbeta[ch] + g[j];
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gbeta));
            }
            Op::AvgPool2d(x, k) => {
                let s = shp(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / k, w / k);
                let scale = T::lit(1.0 / (k * k) as f64);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + yy) * w + xx] =
                                g[(ch * ho + yy / k) * wo + xx / k] * scale;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let geo = ConvGeom::new(shp(*x), shp(*w), *stride, *pad).unwrap();
                let (q, p) = (geo.q(), geo.p());
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); geo.cout * q];
                    T::gemm(
                        geo.cout, p, q, g, p as isize, 1, cols, 1, p as isize, &mut gw, false,
                    );
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        out.push((
                            *b,
                            g.chunks(p).map(|row| row.iter().copied().sum()).collect(),
                        ));
                    }
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); q * p];
                    T::gemm(
                        q,
                        geo.cout,
                        p,
                        val(*w),
                        1,
                        q as isize,
                        g,
                        p as isize,
                        1,
                        &mut gcols,
                        false,
                    );
                    out.push((*x, geo.col2im(&gcols)));
                }
            }
            Op::DepthwiseConv1d { x, w, pad } => {
                let (c, l) = (shp(*x)[0], shp(*x)[1]);
                let k = shp(*w)[1];
                let lo = node.value.shape()[1];
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); c * l];
                let mut gw = vec![T::zero(); c * k];
                for ch in 0..c {
                    for o in 0..lo {
                        let go = g[ch * lo + o];
                        for j in 0..k {
                            let i = (o + j) as isize - *pad as isize;
                            if i >= 0 && (i as usize) < l {
                                let i = i as usize;
                                gx[ch * l + i] = gx[ch * l + i] + go * wv[ch * k + j];
                                gw[ch * k + j] = gw[ch * k + j] + go * xv[ch * l + i];
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
            }
            Op::Concat(inputs, axis) => {
                let os = node.value.shape();
                let (outer, total, inner) = split_axis(os, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = shp(*x);
                let (outer, full, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                hs,
            } => {
                let sx = shp(*x);
                let (t_len, dm) = (sx[0], sx[1]);
                let n = shp(*a)[1];
                let (xv, dv, av, bv, cv, sv) =
                    (val(*x), val(*delta), val(*a), val(*b), val(*c), val(*d));
                let mut gx = vec![T::zero(); t_len * dm];
                let mut gd = vec![T::zero(); t_len * dm];
                let mut ga = vec![T::zero(); dm * n];
                let mut gb = vec![T::zero(); t_len * n];
                let mut gc = vec![T::zero(); t_len * n];
                let mut gs = vec![T::zero(); dm];
                // carry[i*n+s] = dL/dh_t flowing back from step t+1
                let mut carry = vec![T::zero(); dm * n];
                for t in (0..t_len).rev() {
                    for i in 0..dm {
                        let gy = g[t * dm + i];
                        let xi = xv[t * dm + i];
                        let dt = dv[t * dm + i];
                        gs[i] = gs[i] + gy * xi;
                        gx[t * dm + i] = gx[t * dm + i] + gy * sv[i];
                        for s in 0..n {
                            let hidx = (t * dm + i) * n + s;
                            let h = hs[hidx];
                            gc[t * n + s] = gc[t * n + s] + gy * h;
                            let gh = gy * cv[t * n + s] + carry[i * n + s];
                            let abar = (dt * av[i * n + s]).exp();
                            let prev = if t == 0 {
                                T::zero()
                            } else {
                                hs[((t - 1) * dm + i) * n + s]
                            };
                            let g_abar = gh * prev;
                            gd[t * dm + i] = gd[t * dm + i]
                                + g_abar * abar * av[i * n + s]
                                + gh * bv[t * n + s] * xi;
                            ga[i * n + s] = ga[i * n + s] + g_abar * abar * dt;
                            gb[t * n + s] = gb[t * n + s] + gh * dt * xi;
                            gx[t * dm + i] = gx[t * dm + i] + gh * dt * bv[t * n + s];
                            carry[i * n + s] = gh * abar;
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*delta, gd));
                out.push((*a, ga));
                out.push((*b, gb));
                out.push((*c, gc));
                out.push((*d, gs));
            }
        }
        out
    }
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not require one or
    /// was created after the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradients of every parameter leaf reachable from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.wrt(v).map(|t| (p, t)))
    }
}

// ------------------------------------------------------------------ helpers

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// GELU value and derivative (tanh approximation).
#[inline]
fn gelu_parts<T: Scalar>(v: T) -> (T, T) {
    let c = T::lit(0.797_884_560_802_865_4);
    let k = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (v + k * v * v * v);
    let t = u.tanh();
    let y = half * v * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * v * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * v * v);
    (y, dy)
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn bool_t<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Mean and reciprocal standard deviation (biased variance).
fn moments<T: Scalar>(xs: &[T], eps: f64) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::lit(eps)).sqrt())
}

fn norm_backward<T: Scalar>(xhat: &[T], dxhat: &[T], rstd: T, dst: &mut [T]) {
    let n = T::lit(xhat.len() as f64);
    let s1: T = dxhat.iter().copied().sum();
    let s2: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    for j in 0..xhat.len() {
        dst[j] = rstd / n * (n * dxhat[j] - s1 - xhat[j] * s2);
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, a, b)),
        })
        .collect()
}

/// For each element of `out`, the flat offset of the source element of a
/// tensor of shape `inp` broadcast to `out`.
fn broadcast_index(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let st = strides(inp);
    let eff: Vec<usize> = (0..out.len())
        .map(|d| if inp[d] == 1 && out[d] != 1 { 0 } else { st[d] })
        .collect();
    odometer(out, &eff)
}

fn index_or_identity(out: &[usize], inp: &[usize]) -> Vec<usize> {
    if out == inp {
        (0..out.iter().product()).collect()
    } else {
        broadcast_index(out, inp)
    }
}

/// For each element of the permuted tensor, the flat source offset.
fn permute_index(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let st = strides(src_shape);
    let out: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    odometer(&out, &eff)
}

fn odometer(shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * shape[d];
            idx[d] = 0;
        }
    }
    res
}

/// Sum-reduce a broadcast gradient back to `inp`'s shape.
fn reduce_to<T: Scalar>(
    g: &[T],
    out: &[usize],
    inp: &[usize],
    f: impl Fn(usize, T) -> T,
) -> Vec<T> {
    if out == inp {
        return g.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    }
    let idx = broadcast_index(out, inp);
    let mut acc = vec![T::zero(); inp.iter().product()];
    for (k, &i) in idx.iter().enumerate() {
        acc[i] = acc[i] + f(k, g[k]);
    }
    acc
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn q(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.p();
        for ci in 0..self.cin {
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let row = (ci * self.kh + r) * self.kw + s;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + r) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + s) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * p + oy * self.wo + ox,
                                (ci * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.q() * self.p()];
        self.for_each_tap(|c, i| cols[c] = x[i]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        self.for_each_tap(|c, i| x[i] = x[i] + cols[c]);
        x
    }
}
