use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Square,
    Powf,
    Relu,
    MatMul,
    Reshape,
    SumAxes,
    MeanAxes,
    Conv2d,
    BatchNorm,
    BilinearResize,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Square,
        OpKind::Powf,
        OpKind::Relu,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::SumAxes,
        OpKind::MeanAxes,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::BilinearResize,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Square => "square",
            OpKind::Powf => "powf",
            OpKind::Relu => "relu",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::SumAxes => "sum_axes",
            OpKind::MeanAxes => "mean_axes",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Powf(Var, T),
    Relu(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Reshape(Var),
    SumAxes(Var),
    MeanAxes(Var, usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, training: bool },
    BilinearResize { x: Var, in_h: usize, in_w: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Square(..) => OpKind::Square,
            Op::Powf(..) => OpKind::Powf,
            Op::Relu(..) => OpKind::Relu,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SumAxes(..) => OpKind::SumAxes,
            Op::MeanAxes(..) => OpKind::MeanAxes,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the reduced axes.
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

/// Ordered record of executed operations.
///
/// A tape is built once per forward pass and consumed by [`Tape::backward`].
/// Values on it never change after they are recorded.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            fault: None,
        }
    }

    /// Perturbs the backward rule of one operation kind. Used by the
    /// gradient-check mutation tests to prove the checker catches errors.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a named trainable parameter; binding the same name twice
    /// returns the first handle so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers an existing node under a parameter name, so later `param`
    /// calls with that name resolve to it.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Same values, cut from the graph: nothing downstream of the returned
    /// handle can send gradient into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb)?;
        let av = kernels::expand(self.value(a).data(), sa, &out_shape);
        let bv = kernels::expand(self.value(b).data(), sb, &out_shape);
        let data = av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::from_vec(&out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, rg, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, rg, Op::Square(x))
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        let rg = self.rg(x);
        self.push(t, rg, Op::Powf(x, p))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu(x))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    fn check_axes(&self, x: Var, axes: &[usize]) -> Result<()> {
        let rank = self.shape(x).len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::Shape(format!(
                "reduction axes {axes:?} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Sum over `axes`, keeping them as singleton extents.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let (shape, data) = kernels::sum_axes(self.value(x).data(), self.shape(x), axes);
        let t = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SumAxes(x)))
    }

    /// Mean over `axes`, keeping them as singleton extents.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let (out_shape, data) = kernels::sum_axes(self.value(x).data(), shape, axes);
        let inv = T::one() / T::from_f64(count as f64);
        let t = Tensor::from_vec(&out_shape, data.into_iter().map(|v| v * inv).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::MeanAxes(x, count)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes).expect("all axes are in range");
        self.reshape(s, &[]).expect("one element")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.mean_axes(x, &axes).expect("all axes are in range");
        self.reshape(s, &[]).expect("one element")
    }

    /// Cross-correlation of `x[b,c,h,w]` with `w[o,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects rank-4 input and weight, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {sx:?} has {} channels, weight {sw:?} expects {}",
                sx[1], sw[1]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let (out_h, out_w) = match (
            kernels::conv_output_size(sx[2], sw[2], stride, pad),
            kernels::conv_output_size(sx[3], sw[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernel {sw:?} with stride {stride} pad {pad} does not fit input {sx:?}"
                )))
            }
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::from_vec(&[geom.batch, geom.out_ch, out_h, out_w], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, geom }))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Shape(format!("batchnorm expects rank ≥ 2, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm affine shapes {:?}/{:?} for {c} features",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, numel(&s[2..])))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], invstd: &[T], n: usize, c: usize, r: usize) -> Tensor<T> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * r;
                let (m, is, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
                out.extend(xv[base..base + r].iter().map(|&v| (v - m) * is * gg + bb));
            }
        }
        Tensor::from_vec(self.shape(x), out).expect("same shape as input")
    }

    /// Batch norm over every axis except axis 1, using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, r) = self.bn_layout(x, gamma, beta)?;
        let count = n * r;
        let xv = self.value(x).data();
        let inv_count = T::one() / T::from_f64(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (s * c + ch) * r;
                *m = *m + xv[base..base + r].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_count);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * r;
                let m = mean[ch];
                var[ch] = var[ch] + xv[base..base + r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_count);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let t = self.bn_apply(x, gamma, beta, &mean, &invstd, n, c, r);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let v = self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                training: true,
            },
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (n, c, r) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batchnorm running stats sized {} for {c} features", mean.len())));
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let t = self.bn_apply(x, gamma, beta, mean, &invstd, n, c, r);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
                training: false,
            },
        ))
    }

    /// Align-corners=false bilinear resize of every `[h, w]` plane of a rank-4 tensor.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("bilinear_resize expects rank 4, got {s:?}")));
        }
        if out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("bilinear_resize {s:?} to {out_h}×{out_w}")));
        }
        let data = kernels::bilinear_resize_values(self.value(x).data(), s[0] * s[1], s[2], s[3], out_h, out_w);
        let t = Tensor::from_vec(&[s[0], s[1], out_h, out_w], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::BilinearResize {
                x,
                in_h: s[2],
                in_w: s[3],
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy expects [batch, classes] logits for {} labels, got {s:?}",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut total = T::zero();
        for (row, &label) in lv.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total = total + (z.ln() - (row[label] - max));
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let t = Tensor::scalar(total / T::from_f64(b as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Describes the first recorded value containing NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let (i, node) = self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite())?;
        Some(self.describe(Var(i), node.op.kind()))
    }

    fn describe(&self, v: Var, kind: OpKind) -> String {
        match self.params.iter().find(|(_, &pv)| pv == v) {
            Some((name, _)) => format!("parameter `{name}`"),
            None => format!("tape node #{} ({kind}, shape {:?})", v.0, self.shape(v)),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 || ls.iter().any(|&e| e != 1) {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(ls, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contribs = self.local_grads(&node.op, &node.value, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    *c = c.map(|v| v * T::from_f64(1.5));
                }
            }
            for (input, c) in contribs {
                if !self.rg(input) {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&c)?,
                    None => grads[input.0] = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let shape_of = |v: Var| self.shape(v).to_vec();
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.shape(v), data);
        let gd = g.data();
        let mut res = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(op, Op::Sub(..));
                if self.rg(a) {
                    res.push((a, like(a, kernels::reduce_to(gd, out.shape(), &shape_of(a)))?));
                }
                if self.rg(b) {
                    let mut d = kernels::reduce_to(gd, out.shape(), &shape_of(b));
                    if neg {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((b, like(b, d)?));
                }
            }
            Op::Mul(a, b) => {
                let os = out.shape();
                let av = kernels::expand(self.value(a).data(), self.shape(a), os);
                let bv = kernels::expand(self.value(b).data(), self.shape(b), os);
                if self.rg(a) {
                    let d: Vec<T> = gd.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
                    res.push((a, like(a, kernels::reduce_to(&d, os, &shape_of(a)))?));
                }
                if self.rg(b) {
                    let d: Vec<T> = gd.iter().zip(&av).map(|(&g, &x)| g * x).collect();
                    res.push((b, like(b, kernels::reduce_to(&d, os, &shape_of(b)))?));
                }
            }
            Op::Scale(x, c) => res.push((x, g.map(|v| v * c))),
            Op::AddScalar(x) => res.push((x, g.clone())),
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let d = gd.iter().zip(self.value(x).data()).map(|(&g, &v)| g * two * v).collect();
                res.push((x, like(x, d)?));
            }
            Op::Powf(x, p) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| g * p * v.powf(p - T::one()))
                    .collect();
                res.push((x, like(x, d)?));
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                res.push((x, like(x, d)?));
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let d = kernels::matmul_nt(gd, self.value(b).data(), m, n, k);
                    res.push((a, like(a, d)?));
                }
                if self.rg(b) {
                    let d = kernels::matmul_tn(self.value(a).data(), gd, k, m, n);
                    res.push((b, like(b, d)?));
                }
            }
            Op::Reshape(x) => res.push((x, like(x, gd.to_vec())?)),
            Op::SumAxes(x) => {
                let d = kernels::expand(gd, g.shape(), self.shape(x));
                res.push((x, like(x, d)?));
            }
            Op::MeanAxes(x, count) => {
                let inv = T::one() / T::from_f64(count as f64);
                let d = kernels::expand(gd, g.shape(), self.shape(x)).into_iter().map(|v| v * inv).collect();
                res.push((x, like(x, d)?));
            }
            Op::Conv2d { x, w, b, ref geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    gd,
                    geom,
                    self.rg(x),
                    self.rg(w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    res.push((x, like(x, dx)?));
                }
                if let Some(dw) = dw {
                    res.push((w, like(w, dw)?));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    res.push((b, like(b, db)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref mean,
                ref invstd,
                training,
            } => {
                let s = self.shape(x);
                let (n, c, r) = (s[0], s[1], numel(&s[2..]));
                let xv = self.value(x).data();
                let gam = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for sidx in 0..n {
                    for ch in 0..c {
                        let base = (sidx * c + ch) * r;
                        for j in base..base + r {
                            let xhat = (xv[j] - mean[ch]) * invstd[ch];
                            dgamma[ch] = dgamma[ch] + gd[j] * xhat;
                            dbeta[ch] = dbeta[ch] + gd[j];
                        }
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    let cnt = T::from_f64((n * r) as f64);
                    for sidx in 0..n {
                        for ch in 0..c {
                            let base = (sidx * c + ch) * r;
                            for j in base..base + r {
                                dx[j] = if training {
                                    let xhat = (xv[j] - mean[ch]) * invstd[ch];
                                    gam[ch] * invstd[ch] / cnt * (cnt * gd[j] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    gd[j] * gam[ch] * invstd[ch]
                                };
                            }
                        }
                    }
                    res.push((x, like(x, dx)?));
                }
                if self.rg(gamma) {
                    res.push((gamma, like(gamma, dgamma)?));
                }
                if self.rg(beta) {
                    res.push((beta, like(beta, dbeta)?));
                }
            }
            Op::BilinearResize { x, in_h, in_w } => {
                let s = out.shape();
                let d = kernels::bilinear_resize_backward(gd, s[0] * s[1], in_h, in_w, s[2], s[3]);
                res.push((x, like(x, d)?));
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let k = self.shape(logits)[1];
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * k + l] = d[row * k + l] - scale;
                }
                res.push((logits, like(logits, d)?));
            }
        }
        Ok(res)
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros standing in for "no gradient reached it".
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Gradient of the parameter bound under `name`.
    pub fn param(&self, tape: &Tape<T>, name: &str) -> Option<&Tensor<T>> {
        tape.param_var(name).and_then(|v| self.get(v))
    }
}
