use super::kernels::{self, ConvDims};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    /// Natural log; strictly positive inputs only.
    Log,
    Abs,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    LogSumExp,
}

/// An operation whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the size of that input.
    fn vjp(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Vec<Vec<F>>;
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> BatchNormState<F> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            mean: vec![F::zero(); features],
            var: vec![F::one(); features],
        }
    }
}

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Unary(Var, Unary),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<F>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<F>,
        rstd: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    ConcatCols(Var, Var),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    PairwiseAdd(Var, Var),
    Reduce {
        x: Var,
        kind: Reduce,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    tracks: bool,
    grad: Option<Tensor<F>>,
}

/// Ordered record of operations for one forward pass.
///
/// Nodes are appended as ops execute, so the record is topologically ordered
/// by construction and the reverse sweep is a plain descending walk. A tape
/// built with [`Tape::inference`] keeps values only.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records backward information.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Tape::param`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let tracks = self.recording && inputs.iter().any(|&v| self.tracks(v));
        let op = if tracks { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracks,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A learnable leaf whose gradient is retained after [`Tape::backward`].
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: self.recording,
            tracks: self.recording,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x + c).collect())
            .expect("same shape");
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let v = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&x| x <= F::zero() || x.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    value: bad.f64(),
                });
            }
        }
        let data = v.data().iter().map(|&x| unary_fwd(kind, x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Unary(a, kind), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("total function")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope)).expect("total function")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("total function")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("total function")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs).expect("total function")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus).expect("total function")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg).expect("total function")
    }

    /// Cross-correlation without padding:
    /// `out[b,o,t] = sum_{i,k} x[b,i,t*stride+k] * w[o,i,k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let d = self.conv_dims(x, w, stride)?;
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &d);
        let t = Tensor::new(vec![d.batch, d.out_ch, d.out_time], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, stride }, &[x, w]))
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 {
            return Err(Error::Rank {
                op: "conv1d input",
                expected: 3,
                shape: sx.to_vec(),
            });
        }
        if sw.len() != 3 {
            return Err(Error::Rank {
                op: "conv1d kernel",
                expected: 3,
                shape: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::dim("conv1d", "stride must be >= 1"));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv1d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            ));
        }
        if sw[2] == 0 || sw[2] > sx[2] {
            return Err(Error::dim(
                "conv1d",
                format!("kernel length {} vs input length {}", sw[2], sx[2]),
            ));
        }
        Ok(ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            time: sx[2],
            out_ch: sw[0],
            klen: sw[2],
            stride,
            out_time: (sx[2] - sw[2]) / stride + 1,
        })
    }

    /// `out = x w^T + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 {
            return Err(Error::dim(
                "linear",
                format!("expected [batch,in], [out,in], [out]; got {sx:?}, {sw:?}, {sb:?}"),
            ));
        }
        if sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(Error::dim(
                "linear",
                format!("input {sx:?}, weights {sw:?}, bias {sb:?}"),
            ));
        }
        let (batch, n_in, n_out) = (sx[0], sx[1], sw[0]);
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n_in,
        );
        let t = Tensor::new(vec![batch, n_out], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Per-sample normalization over every non-batch axis, then elementwise
    /// gain and offset (each holding one value per normalized element).
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Rank {
                op: "layer_norm",
                expected: 2,
                shape: sx,
            });
        }
        let feat: usize = sx[1..].iter().product();
        if feat == 0 {
            return Err(Error::EmptyReduction { op: "layer_norm" });
        }
        for (name, p) in [("gain", gain), ("offset", offset)] {
            if self.value(p).len() != feat {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} has {} values, need {feat}", self.value(p).len()),
                ));
            }
        }
        let xv = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(sx[0]);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(feat) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / feat as f64;
            let var = row
                .iter()
                .map(|v| (v.f64() - mean).powi(2))
                .sum::<f64>()
                / feat as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = F::of((v.f64() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + o[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            &[x, gain, offset],
        ))
    }

    /// Batch norm over the rows of `x: [batch, features]` using batch
    /// statistics; updates `state` as `(1-momentum)*running + momentum*batch`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        state: &mut BatchNormState<F>,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (batch, feat) = self.bn_dims(x, gain, offset, state)?;
        if batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; feat];
        let mut var = vec![0.0f64; feat];
        for row in xv.chunks(feat) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        for row in xv.chunks(feat) {
            for j in 0..feat {
                var[j] += (row[j].f64() - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for j in 0..feat {
            state.mean[j] = F::of((1.0 - momentum) * state.mean[j].f64() + momentum * mean[j]);
            state.var[j] = F::of((1.0 - momentum) * state.var[j].f64() + momentum * var[j]);
        }
        self.bn_apply(x, gain, offset, &mean, rstd, true)
    }

    /// Batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        state: &BatchNormState<F>,
        eps: f64,
    ) -> Result<Var> {
        self.bn_dims(x, gain, offset, state)?;
        let mean: Vec<f64> = state.mean.iter().map(|m| m.f64()).collect();
        let rstd = state.var.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
        self.bn_apply(x, gain, offset, &mean, rstd, false)
    }

    fn bn_dims(
        &self,
        x: Var,
        gain: Var,
        offset: Var,
        state: &BatchNormState<F>,
    ) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::Rank {
                op: "batch_norm",
                expected: 2,
                shape: sx.to_vec(),
            });
        }
        let feat = sx[1];
        let ok = self.value(gain).len() == feat
            && self.value(offset).len() == feat
            && state.mean.len() == feat
            && state.var.len() == feat;
        if !ok {
            return Err(Error::dim(
                "batch_norm",
                format!("{feat} features vs gain/offset/state sizes"),
            ));
        }
        Ok((sx[0], feat))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        mean: &[f64],
        rstd: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let feat = sx[1];
        let xv = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(feat) {
            for j in 0..feat {
                let h = F::of((row[j].f64() - mean[j]) * rstd[j]);
                xhat.push(h);
                out.push(h * g[j] + o[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
                train,
            },
            &[x, gain, offset],
        ))
    }

    /// Non-overlapping max pooling over the last axis of `[batch, ch, time]`;
    /// a trailing remainder shorter than `k` is dropped.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Rank {
                op: "max_pool1d",
                expected: 3,
                shape: sx,
            });
        }
        if k == 0 || sx[2] < k {
            return Err(Error::dim(
                "max_pool1d",
                format!("window {k} vs length {}", sx[2]),
            ));
        }
        let (t_in, t_out) = (sx[2], sx[2] / k);
        let xv = self.value(x).data();
        let rows = sx[0] * sx[1];
        let mut out = Vec::with_capacity(rows * t_out);
        let mut argmax = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            for t in 0..t_out {
                let base = r * t_in + t * k;
                let mut best = base;
                for j in base + 1..base + k {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let t = Tensor::new(vec![sx[0], sx[1], t_out], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[batch, a] ++ [batch, b] -> [batch, a + b]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat_cols", format!("{sa:?} vs {sb:?}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..sa[0] {
            out.extend_from_slice(&va[r * sa[1]..(r + 1) * sa[1]]);
            out.extend_from_slice(&vb[r * sb[1]..(r + 1) * sb[1]]);
        }
        let t = Tensor::new(vec![sa[0], sa[1] + sb[1]], out)?;
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Gathers rows (first-axis slices) by index; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::Rank {
                op: "select_rows",
                expected: 1,
                shape: sx,
            });
        }
        let row: usize = sx[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[0]) {
            return Err(Error::dim(
                "select_rows",
                format!("row {bad} out of {}", sx[0]),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..end` of a `[rows, cols]` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start > end || end > sx[1] {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {sx:?}"),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(sx[0] * (end - start));
        for r in xv.chunks(sx[1]) {
            out.extend_from_slice(&r[start..end]);
        }
        let t = Tensor::new(vec![sx[0], end - start], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a: [n, h]`, `b: [m, h]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("pairwise_add", format!("{sa:?} vs {sb:?}")));
        }
        let h = sa[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * sb[0] * h);
        for ra in va.chunks(h) {
            for rb in vb.chunks(h) {
                out.extend(ra.iter().zip(rb).map(|(&x, &y)| x + y));
            }
        }
        let t = Tensor::new(vec![sa[0], sb[0], h], out)?;
        Ok(self.push(t, Op::PairwiseAdd(a, b), &[a, b]))
    }

    /// Reduces over `axis`, or over every element when `axis` is `None`.
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, sx.iter().product(), 1, Vec::new()),
            Some(a) => {
                if a >= sx.len() {
                    return Err(Error::dim(
                        "reduce",
                        format!("axis {a} out of range for {sx:?}"),
                    ));
                }
                let mut os = sx.clone();
                os.remove(a);
                (
                    sx[..a].iter().product(),
                    sx[a],
                    sx[a + 1..].iter().product(),
                    os,
                )
            }
        };
        if len == 0 {
            return Err(Error::EmptyReduction { op: "reduce" });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(len);
        for o in 0..outer {
            for j in 0..inner {
                lane.clear();
                lane.extend((0..len).map(|l| xv[(o * len + l) * inner + j].f64()));
                let r = match kind {
                    Reduce::Sum => lane.iter().sum(),
                    Reduce::Mean => lane.iter().sum::<f64>() / len as f64,
                    Reduce::LogSumExp => super::logsumexp(&lane),
                };
                out.push(F::of(r));
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Reduce { x, kind, len, inner }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::Sum, None).expect("non-empty")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Mean, None)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().ok_or(Error::Rank {
            op: "log_softmax",
            expected: 1,
            shape: sx.clone(),
        })?;
        if cols == 0 {
            return Err(Error::EmptyReduction { op: "log_softmax" });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut lane = Vec::with_capacity(cols);
        for row in xv.chunks(cols) {
            lane.clear();
            lane.extend(row.iter().map(|v| v.f64()));
            let lse = super::logsumexp(&lane);
            out.extend(lane.iter().map(|&v| F::of(v - lse)));
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for `x: [rows, cols]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(Error::dim(
                "pick",
                format!("{sx:?} with {} indices", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[1]) {
            return Err(Error::dim("pick", format!("column {bad} out of {}", sx[1])));
        }
        let xv = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| xv[r * sx[1] + c])
            .collect();
        let t = Tensor::new(vec![sx[0]], out)?;
        Ok(self.push(
            t,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Scales each row of `[rows, cols]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Rank {
                op: "l2_normalize_rows",
                expected: 2,
                shape: sx,
            });
        }
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(sx[0]);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(sx[1].max(1)) {
            let n = row.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding("l2_normalize_rows"));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| F::of(v.f64() / n)));
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, Op::L2NormRows { x, norms }, &[x]))
    }

    /// Records a value computed outside the tape together with its VJP.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of [`Tape::param`]
    /// leaves accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("{loss:?} is not on this tape")));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: lv.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].tracks {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<F>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracks {
                continue;
            }
            self.vjp(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &x) in acc.data_mut().iter_mut().zip(&g) {
                            *a += x;
                        }
                    }
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.len());
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn val(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn vjp(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.tracks(v) {
                        self.send(adj, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.tracks(*a) {
                    self.send(adj, *a, g.to_vec());
                }
                if self.tracks(*b) {
                    self.send(adj, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.tracks(*a) {
                    let c = g.iter().zip(self.val(*b)).map(|(&g, &y)| g * y).collect();
                    self.send(adj, *a, c);
                }
                if self.tracks(*b) {
                    let c = g.iter().zip(self.val(*a)).map(|(&g, &x)| g * x).collect();
                    self.send(adj, *b, c);
                }
            }
            Op::Scale(a, c) => self.send(adj, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) => self.send(adj, *a, g.to_vec()),
            Op::Unary(a, kind) => {
                let x = self.val(*a);
                let y = out.data();
                let c = (0..g.len())
                    .map(|j| g[j] * unary_deriv(*kind, x[j], y[j]))
                    .collect();
                self.send(adj, *a, c);
            }
            Op::Conv1d { x, w, stride } => {
                let d = self.conv_dims(*x, *w, *stride).expect("validated in forward");
                if self.tracks(*x) {
                    let c = kernels::conv1d_grad_input(g, self.val(*w), &d);
                    self.send(adj, *x, c);
                }
                if self.tracks(*w) {
                    let c = kernels::conv1d_grad_kernel(g, self.val(*x), &d);
                    self.send(adj, *w, c);
                }
            }
            Op::Linear { x, w, b } => {
                let n_in = self.shape(*x)[1];
                let n_out = self.shape(*w)[0];
                let (xv, wv) = (self.val(*x), self.val(*w));
                if self.tracks(*x) {
                    let mut gx = vec![F::zero(); xv.len()];
                    for (gr, gxr) in g.chunks(n_out).zip(gx.chunks_mut(n_in)) {
                        for (o, wr) in wv.chunks(n_in).enumerate() {
                            kernels::axpy(gr[o], wr, gxr);
                        }
                    }
                    self.send(adj, *x, gx);
                }
                if self.tracks(*w) {
                    let mut gw = vec![F::zero(); wv.len()];
                    for (gr, xr) in g.chunks(n_out).zip(xv.chunks(n_in)) {
                        for (o, gwr) in gw.chunks_mut(n_in).enumerate() {
                            kernels::axpy(gr[o], xr, gwr);
                        }
                    }
                    self.send(adj, *w, gw);
                }
                if self.tracks(*b) {
                    let mut gb = vec![F::zero(); n_out];
                    for gr in g.chunks(n_out) {
                        for (a, &v) in gb.iter_mut().zip(gr) {
                            *a += v;
                        }
                    }
                    self.send(adj, *b, gb);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let feat = self.val(*gain).len();
                if self.tracks(*x) {
                    let gv = self.val(*gain);
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks(feat).zip(xhat.chunks(feat)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..feat {
                            let gh = (gr[j] * gv[j]).f64();
                            m1 += gh;
                            m2 += gh * hr[j].f64();
                        }
                        m1 /= feat as f64;
                        m2 /= feat as f64;
                        for j in 0..feat {
                            let gh = (gr[j] * gv[j]).f64();
                            gx.push(F::of(rstd[r] * (gh - m1 - hr[j].f64() * m2)));
                        }
                    }
                    self.send(adj, *x, gx);
                }
                self.affine_param_grads(g, xhat, feat, *gain, *offset, adj);
            }
            Op::BatchNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
                train,
            } => {
                let feat = self.val(*gain).len();
                if self.tracks(*x) {
                    let gv = self.val(*gain);
                    let batch = g.len() / feat;
                    let mut gx = vec![F::zero(); g.len()];
                    if *train {
                        let mut m1 = vec![0.0f64; feat];
                        let mut m2 = vec![0.0f64; feat];
                        for (gr, hr) in g.chunks(feat).zip(xhat.chunks(feat)) {
                            for j in 0..feat {
                                let gh = (gr[j] * gv[j]).f64();
                                m1[j] += gh;
                                m2[j] += gh * hr[j].f64();
                            }
                        }
                        for j in 0..feat {
                            m1[j] /= batch as f64;
                            m2[j] /= batch as f64;
                        }
                        for (n, gxv) in gx.iter_mut().enumerate() {
                            let j = n % feat;
                            let gh = (g[n] * gv[j]).f64();
                            *gxv = F::of(rstd[j] * (gh - m1[j] - xhat[n].f64() * m2[j]));
                        }
                    } else {
                        for (n, gxv) in gx.iter_mut().enumerate() {
                            let j = n % feat;
                            *gxv = F::of((g[n] * gv[j]).f64() * rstd[j]);
                        }
                    }
                    self.send(adj, *x, gx);
                }
                self.affine_param_grads(g, xhat, feat, *gain, *offset, adj);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![F::zero(); self.nodes[x.0].value.len()];
                for (&j, &gv) in argmax.iter().zip(g) {
                    gx[j] += gv;
                }
                self.send(adj, *x, gx);
            }
            Op::Reshape(x) => self.send(adj, *x, g.to_vec()),
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = g.chunks(ca + cb);
                if self.tracks(*a) {
                    let c = rows.clone().flat_map(|r| r[..ca].to_vec()).collect();
                    self.send(adj, *a, c);
                }
                if self.tracks(*b) {
                    let c = rows.flat_map(|r| r[ca..].to_vec()).collect();
                    self.send(adj, *b, c);
                }
            }
            Op::SelectRows { x, idx } => {
                let n = self.nodes[x.0].value.len();
                let row = n / self.shape(*x)[0].max(1);
                let mut gx = vec![F::zero(); n];
                for (k, &r) in idx.iter().enumerate() {
                    for (a, &v) in gx[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                    {
                        *a += v;
                    }
                }
                self.send(adj, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let width = out.shape()[1];
                let mut gx = vec![F::zero(); self.nodes[x.0].value.len()];
                for (gxr, gr) in gx.chunks_mut(cols).zip(g.chunks(width.max(1))) {
                    gxr[*start..*start + width].copy_from_slice(&gr[..width]);
                }
                self.send(adj, *x, gx);
            }
            Op::PairwiseAdd(a, b) => {
                let (n, m, h) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                if self.tracks(*a) {
                    let mut ga = vec![F::zero(); n * h];
                    for i in 0..n {
                        for j in 0..m {
                            let src = &g[(i * m + j) * h..][..h];
                            for (x, &v) in ga[i * h..(i + 1) * h].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                    self.send(adj, *a, ga);
                }
                if self.tracks(*b) {
                    let mut gb = vec![F::zero(); m * h];
                    for i in 0..n {
                        for j in 0..m {
                            let src = &g[(i * m + j) * h..][..h];
                            for (x, &v) in gb[j * h..(j + 1) * h].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                    self.send(adj, *b, gb);
                }
            }
            Op::Reduce { x, kind, len, inner } => {
                let xv = self.val(*x);
                let (len, inner) = (*len, *inner);
                let mut gx = vec![F::zero(); xv.len()];
                for (n, gxv) in gx.iter_mut().enumerate() {
                    let o = n / (len * inner);
                    let j = n % inner;
                    let k = o * inner + j;
                    *gxv = match kind {
                        Reduce::Sum => g[k],
                        Reduce::Mean => F::of(g[k].f64() / len as f64),
                        Reduce::LogSumExp => {
                            F::of(g[k].f64() * (xv[n].f64() - out.data()[k].f64()).exp())
                        }
                    };
                }
                self.send(adj, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let cols = *out.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.data().chunks(cols)) {
                    let s: f64 = gr.iter().map(|v| v.f64()).sum();
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &y)| F::of(gv.f64() - y.f64().exp() * s)),
                    );
                }
                self.send(adj, *x, gx);
            }
            Op::Pick { x, idx } => {
                let cols = self.shape(*x)[1];
                let mut gx = vec![F::zero(); self.nodes[x.0].value.len()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
                self.send(adj, *x, gx);
            }
            Op::L2NormRows { x, norms } => {
                let cols = self.shape(*x)[1];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(cols).zip(out.data().chunks(cols)).zip(norms) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &y)| F::of((gv.f64() - y.f64() * dotp) / n)),
                    );
                }
                self.send(adj, *x, gx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> =
                    inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.vjp(&ins, out, g);
                for (v, c) in inputs.iter().zip(grads) {
                    if self.tracks(*v) {
                        self.send(adj, *v, c);
                    }
                }
            }
        }
    }

    fn affine_param_grads(
        &self,
        g: &[F],
        xhat: &[F],
        feat: usize,
        gain: Var,
        offset: Var,
        adj: &mut [Option<Vec<F>>],
    ) {
        if self.tracks(gain) {
            let mut gg = vec![0.0f64; feat];
            for (n, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                gg[n % feat] += gv.f64() * h.f64();
            }
            self.send(adj, gain, gg.into_iter().map(F::of).collect());
        }
        if self.tracks(offset) {
            let mut go = vec![0.0f64; feat];
            for (n, &gv) in g.iter().enumerate() {
                go[n % feat] += gv.f64();
            }
            self.send(adj, offset, go.into_iter().map(F::of).collect());
        }
    }
}

fn unary_fwd<F: Real>(kind: Unary, x: F) -> F {
    let zero = F::zero();
    match kind {
        Unary::Relu => x.max(zero),
        Unary::LeakyRelu(s) => {
            if x > zero {
                x
            } else {
                x * F::of(s)
            }
        }
        Unary::Sigmoid => F::of(sigmoid(x.f64())),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Softplus => {
            let v = x.f64();
            F::of(v.max(0.0) + (-v.abs()).exp().ln_1p())
        }
        Unary::Neg => -x,
    }
}

fn unary_deriv<F: Real>(kind: Unary, x: F, y: F) -> F {
    let zero = F::zero();
    match kind {
        Unary::Relu => {
            if x > zero {
                F::one()
            } else {
                zero
            }
        }
        Unary::LeakyRelu(s) => {
            if x > zero {
                F::one()
            } else {
                F::of(s)
            }
        }
        Unary::Sigmoid => y * (F::one() - y),
        Unary::Exp => y,
        Unary::Log => F::one() / x,
        Unary::Abs => {
            if x > zero {
                F::one()
            } else if x < zero {
                -F::one()
            } else {
                zero
            }
        }
        Unary::Softplus => F::of(sigmoid(x.f64())),
        Unary::Neg => -F::one(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
