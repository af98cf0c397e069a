use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation: which inputs produced the node, plus whatever
/// the reverse pass needs. Nodes are appended in forward order, so walking
/// the vector backwards is exactly the reverse pass.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    AddRowBias { x: usize, bias: usize },
    ConcatCols { a: usize, b: usize, a_cols: usize },
    SliceCols { a: usize, start: usize, end: usize },
    ConcatRows { a: usize, b: usize, a_rows: usize },
    SliceRows { a: usize, start: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Abs { a: usize },
    LogFloored { a: usize, eps: f64 },
    SoftmaxRows { a: usize },
    LayerNormRows { x: usize, gamma: usize, beta: usize, eps: f64 },
    SumAll { a: usize },
    MeanAll { a: usize },
    Mse { a: usize, b: usize },
    KlRows { p: usize, q: usize, eps: f64 },
    Maximum { a: usize, b: usize },
    Minimum { a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Reverse-mode tape. Records every operation of a forward pass;
/// [`Tape::backward`] replays them in reverse and leaves per-node gradient
/// buffers that can be read back or folded into a [`ParamSet`].
///
/// A tape is single-threaded and lives for one forward/backward round;
/// parameters persist outside it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_cache: HashMap<String, TensorId>,
}

const KL_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and gradients. Parameters live outside the
    /// tape and are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_cache.clear();
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any
    /// reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Records a constant input. No gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    /// Records a parameter leaf. Trainable parameters are tracked and
    /// receive gradients; frozen ones enter as constants. Repeated use of
    /// the same name returns the cached node so gradients from all uses
    /// accumulate in one place.
    pub fn param(&mut self, p: &Parameter) -> TensorId {
        if let Some(&id) = self.param_cache.get(&p.name) {
            return id;
        }
        let id = self.push(p.value.clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.nodes[id.0].param = Some(p.name.clone());
        }
        self.param_cache.insert(p.name.clone(), id);
        id
    }

    // ── Shape helpers ───────────────────────────────────────────────

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check_2d(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── Core linear algebra ─────────────────────────────────────────

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check_2d("matmul", a)?;
        let (kb, n) = self.check_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let x = av[i * ka + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a: a.0, b: b.0 },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_2d("transpose", a)?;
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a: a.0 }, needs))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            ));
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a: a.0 }, needs))
    }

    // ── Elementwise binary ops (scalar-tensor broadcast only) ───────

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let (shape, data) = if sa == sb {
            (sa, av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
        } else if av.len() == 1 {
            (sb, bv.iter().map(|&y| f(av[0], y)).collect::<Vec<_>>())
        } else if bv.len() == 1 {
            (sa, av.iter().map(|&x| f(x, bv[0])).collect::<Vec<_>>())
        } else {
            return Err(Error::shape(
                name,
                format!("shape mismatch {:?} vs {:?} (only scalar broadcast supported)", sa, sb),
            ));
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("maximum", a, b, f64::max, Op::Maximum { a: a.0, b: b.0 })
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("minimum", a, b, f64::min, Op::Minimum { a: a.0, b: b.0 })
    }

    // ── Elementwise unary ops ───────────────────────────────────────

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let value = &self.nodes[a.0].value;
        let data = value.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a.0);
        self.push(t, op, needs)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| c * x, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::abs, Op::Abs { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a: a.0 })
    }

    /// Smooth GELU-style nonlinearity (tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, gelu_value, Op::Gelu { a: a.0 })
    }

    /// Natural log with the argument floored at `eps`; keeps downstream
    /// losses finite on (near-)zero probabilities.
    pub fn log_floored(&mut self, a: TensorId, eps: f64) -> TensorId {
        self.unary(a, |x| x.max(eps).ln(), Op::LogFloored { a: a.0, eps })
    }

    // ── Bias / concat / slice ───────────────────────────────────────

    /// `x + bias` where `bias` has one row broadcast over all rows of `x`.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let cols = self.nodes[x.0].value.cols();
        let rows = self.nodes[x.0].value.rows();
        if self.nodes[bias.0].value.numel() != cols {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} does not match row width {}", self.shape(bias), cols),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = xv[r * cols + j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x.0) || self.needs(bias.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::AddRowBias { x: x.0, bias: bias.0 },
            needs,
        ))
    }

    /// Channel-wise concatenation: channels of `a` precede channels of `b`.
    /// Leading dimensions must agree.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(
                "concat_channels",
                format!("leading dimensions disagree: {:?} vs {:?}", sa, sb),
            ));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.nodes[a.0].value.rows();
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConcatCols { a: a.0, b: b.0, a_cols: ca },
            needs,
        ))
    }

    /// Contiguous channel slice `[start, end)`.
    pub fn slice_channels(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let cols = self.nodes[a.0].value.cols();
        if start > end || end > cols {
            return Err(Error::shape(
                "slice_channels",
                format!("slice {}..{} out of range for width {}", start, end, cols),
            ));
        }
        let rows = self.nodes[a.0].value.rows();
        let av = self.nodes[a.0].value.data();
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = w;
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SliceCols { a: a.0, start, end },
            needs,
        ))
    }

    /// Splits the channel axis evenly in two, order preserved. The coupling
    /// algebra requires an even channel width.
    pub fn split_channels(&mut self, a: TensorId) -> Result<(TensorId, TensorId)> {
        let cols = self.nodes[a.0].value.cols();
        if cols % 2 != 0 {
            return Err(Error::shape(
                "split_channels",
                format!("the prompter requires an even channel width, got {}", cols),
            ));
        }
        let half = cols / 2;
        let lo = self.slice_channels(a, 0, half)?;
        let hi = self.slice_channels(a, half, cols)?;
        Ok((lo, hi))
    }

    /// Row-wise (token-wise) concatenation of two rank-2 tensors.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.check_2d("concat_rows", a)?;
        let (rb, cb) = self.check_2d("concat_rows", b)?;
        if ca != cb {
            return Err(Error::shape(
                "concat_rows",
                format!("column widths disagree: {} vs {}", ca, cb),
            ));
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        out.extend_from_slice(self.nodes[b.0].value.data());
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(vec![ra + rb, ca], out)?,
            Op::ConcatRows { a: a.0, b: b.0, a_rows: ra },
            needs,
        ))
    }

    /// Contiguous row slice `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.check_2d("slice_rows", a)?;
        if start > end || end > r {
            return Err(Error::shape(
                "slice_rows",
                format!("slice {}..{} out of range for {} rows", start, end, r),
            ));
        }
        let out = self.nodes[a.0].value.data()[start * c..end * c].to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::new(vec![end - start, c], out)?,
            Op::SliceRows { a: a.0, start },
            needs,
        ))
    }

    // ── Row-structured ops ──────────────────────────────────────────

    /// Row-wise softmax with max-subtraction; each output row is
    /// nonnegative and sums to one.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let cols = self.nodes[a.0].value.cols();
        let rows = self.nodes[a.0].value.rows();
        if cols == 0 {
            return Err(Error::shape("softmax_rows", "zero-width rows"));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { a: a.0 }, needs))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let cols = self.nodes[x.0].value.cols();
        let rows = self.nodes[x.0].value.rows();
        if self.nodes[gamma.0].value.numel() != cols || self.nodes[beta.0].value.numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias must have width {} (got {:?}, {:?})",
                    cols,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = gv[j] * (row[j] - mean) * inv + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps: LAYER_NORM_EPS,
            },
            needs,
        ))
    }

    // ── Reductions and losses ───────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a.0);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].value.data();
        let m = data.iter().sum::<f64>() / data.len().max(1) as f64;
        let needs = self.needs(a.0);
        self.push(Tensor::scalar(m), Op::MeanAll { a: a.0 }, needs)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let n = av.len().max(1) as f64;
        let v = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a: a.0, b: b.0 }, needs))
    }

    /// KL divergence Σ p·(log p − log q) of two row-stochastic tensors,
    /// with logs floored at 1e-12. KL(p, p) is exactly zero.
    pub fn kl_div(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        if self.shape(p) != self.shape(q) {
            return Err(Error::shape(
                "kl_div",
                format!("{:?} vs {:?}", self.shape(p), self.shape(q)),
            ));
        }
        let pv = self.nodes[p.0].value.data();
        let qv = self.nodes[q.0].value.data();
        let eps = KL_EPS;
        let v = pv
            .iter()
            .zip(qv)
            .map(|(&pi, &qi)| pi * (pi.max(eps).ln() - qi.max(eps).ln()))
            .sum::<f64>();
        let needs = self.needs(p.0) || self.needs(q.0);
        Ok(self.push(Tensor::scalar(v), Op::KlRows { p: p.0, q: q.0, eps }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are stored per node and
    /// can be read with [`Tape::grad`] or folded into parameters with
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds each trainable parameter leaf's gradient into the owning
    /// [`Parameter`]'s grad buffer. Frozen parameters are untouched by
    /// construction (they were recorded as constants).
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let Some(Some(g)) = self.grads.get(idx) else { continue };
            if let Some(p) = params.get_mut(name) {
                p.value.accumulate_grad(g);
            }
        }
    }

    /// Names of parameter leaves that received a gradient in the last
    /// backward pass. Used by the freeze audits.
    pub fn params_with_grad(&self) -> Vec<String> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(idx, node)| {
                let name = node.param.as_ref()?;
                match self.grads.get(idx) {
                    Some(Some(g)) if g.iter().any(|&v| v != 0.0) => Some(name.clone()),
                    _ => None,
                }
            })
            .collect()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: usize, n: usize, f: &mut dyn FnMut(&mut [f64])| {
            let buf = grads[target].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let numel = |id: usize| self.nodes[id].value.numel();
        let needs = |id: usize| self.nodes[id].needs_grad;

        // Adds `contribution[i]` (or its sum, for a broadcast scalar
        // operand) into the operand's gradient.
        let acc_broadcast = |grads: &mut [Option<Vec<f64>>],
                             target: usize,
                             out_len: usize,
                             contrib: &mut dyn FnMut(usize) -> f64| {
            let n = self.nodes[target].value.numel();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; n]);
            if n == out_len {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += contrib(i);
                }
            } else {
                // scalar operand broadcast over the output
                let mut s = 0.0;
                for i in 0..out_len {
                    s += contrib(i);
                }
                buf[0] += s;
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[*b].value.shape()[1];
                if needs(*a) {
                    let bv = self.nodes[*b].value.data();
                    acc(grads, *a, m * k, &mut |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    let av = self.nodes[*a].value.data();
                    acc(grads, *b, k * n, &mut |db| {
                        for p in 0..k {
                            for i in 0..m {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }

            Op::Transpose { a } => {
                let (r, c) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                if needs(*a) {
                    acc(grads, *a, r * c, &mut |da| {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }

            Op::Reshape { a } | Op::AddScalar { a } => {
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for (d, &gi) in da.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| g[i]);
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| g[i]);
                }
            }

            Op::Sub { a, b } => {
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| g[i]);
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| -g[i]);
                }
            }

            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| g[i] * pick(bv, i));
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| g[i] * pick(av, i));
                }
            }

            Op::Div { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| g[i] / pick(bv, i));
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| {
                        let bi = pick(bv, i);
                        -g[i] * pick(av, i) / (bi * bi)
                    });
                }
            }

            Op::Maximum { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| {
                        if pick(av, i) >= pick(bv, i) { g[i] } else { 0.0 }
                    });
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| {
                        if pick(av, i) < pick(bv, i) { g[i] } else { 0.0 }
                    });
                }
            }

            Op::Minimum { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if needs(*a) {
                    acc_broadcast(grads, *a, g.len(), &mut |i| {
                        if pick(av, i) <= pick(bv, i) { g[i] } else { 0.0 }
                    });
                }
                if needs(*b) {
                    acc_broadcast(grads, *b, g.len(), &mut |i| {
                        if pick(av, i) > pick(bv, i) { g[i] } else { 0.0 }
                    });
                }
            }

            Op::Neg { a } => {
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for (d, &gi) in da.iter_mut().zip(g) {
                            *d -= gi;
                        }
                    });
                }
            }

            Op::Scale { a, c } => {
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for (d, &gi) in da.iter_mut().zip(g) {
                            *d += c * gi;
                        }
                    });
                }
            }

            Op::AddRowBias { x, bias } => {
                let cols = self.nodes[*bias].value.numel();
                if needs(*x) {
                    acc(grads, *x, numel(*x), &mut |dx| {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
                if needs(*bias) {
                    acc(grads, *bias, cols, &mut |db| {
                        for (i, &gi) in g.iter().enumerate() {
                            db[i % cols] += gi;
                        }
                    });
                }
            }

            Op::ConcatCols { a, b, a_cols } => {
                let cb = self.nodes[*b].value.cols();
                let total = a_cols + cb;
                let rows = g.len() / total.max(1);
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for r in 0..rows {
                            for j in 0..*a_cols {
                                da[r * a_cols + j] += g[r * total + j];
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, *b, numel(*b), &mut |db| {
                        for r in 0..rows {
                            for j in 0..cb {
                                db[r * cb + j] += g[r * total + a_cols + j];
                            }
                        }
                    });
                }
            }

            Op::SliceCols { a, start, end } => {
                let cols = self.nodes[*a].value.cols();
                let w = end - start;
                let rows = self.nodes[*a].value.rows();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for r in 0..rows {
                            for j in 0..w {
                                da[r * cols + start + j] += g[r * w + j];
                            }
                        }
                    });
                }
            }

            Op::ConcatRows { a, b, a_rows } => {
                let c = self.nodes[*a].value.cols();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for (d, &gi) in da.iter_mut().zip(&g[..a_rows * c]) {
                            *d += gi;
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, *b, numel(*b), &mut |db| {
                        for (d, &gi) in db.iter_mut().zip(&g[a_rows * c..]) {
                            *d += gi;
                        }
                    });
                }
            }

            Op::SliceRows { a, start } => {
                let c = self.nodes[*a].value.cols();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for (i, &gi) in g.iter().enumerate() {
                            da[start * c + i] += gi;
                        }
                    });
                }
            }

            Op::Gelu { a } => {
                let av = self.nodes[*a].value.data();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * gelu_derivative(av[i]);
                        }
                    });
                }
            }

            Op::Sigmoid { a } => {
                let yv = self.nodes[idx].value.data();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * yv[i] * (1.0 - yv[i]);
                        }
                    });
                }
            }

            Op::Abs { a } => {
                let av = self.nodes[*a].value.data();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * sign(av[i]);
                        }
                    });
                }
            }

            Op::LogFloored { a, eps } => {
                let av = self.nodes[*a].value.data();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for i in 0..g.len() {
                            if av[i] >= *eps {
                                da[i] += g[i] / av[i];
                            }
                        }
                    });
                }
            }

            Op::SoftmaxRows { a } => {
                let yv = self.nodes[idx].value.data();
                let cols = self.nodes[idx].value.cols();
                let rows = self.nodes[idx].value.rows();
                if needs(*a) {
                    acc(grads, *a, numel(*a), &mut |da| {
                        for r in 0..rows {
                            let y = &yv[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for j in 0..cols {
                                da[r * cols + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }

            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                let cols = self.nodes[*x].value.cols();
                let rows = self.nodes[*x].value.rows();
                // recompute per-row statistics for the reverse pass
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if needs(*gamma) {
                        acc(grads, *gamma, cols, &mut |dg| {
                            for j in 0..cols {
                                dg[j] += gr[j] * xhat[j];
                            }
                        });
                    }
                    if needs(*beta) {
                        acc(grads, *beta, cols, &mut |db| {
                            for j in 0..cols {
                                db[j] += gr[j];
                            }
                        });
                    }
                    if needs(*x) {
                        let h: Vec<f64> = (0..cols).map(|j| gv[j] * gr[j]).collect();
                        let mean_h = h.iter().sum::<f64>() / cols as f64;
                        let mean_hx = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        acc(grads, *x, rows * cols, &mut |dx| {
                            for j in 0..cols {
                                dx[r * cols + j] += inv * (h[j] - mean_h - xhat[j] * mean_hx);
                            }
                        });
                    }
                }
            }

            Op::SumAll { a } => {
                if needs(*a) {
                    let go = g[0];
                    acc(grads, *a, numel(*a), &mut |da| {
                        for d in da.iter_mut() {
                            *d += go;
                        }
                    });
                }
            }

            Op::MeanAll { a } => {
                if needs(*a) {
                    let go = g[0] / numel(*a).max(1) as f64;
                    acc(grads, *a, numel(*a), &mut |da| {
                        for d in da.iter_mut() {
                            *d += go;
                        }
                    });
                }
            }

            Op::Mse { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let n = av.len().max(1) as f64;
                let go = g[0];
                if needs(*a) {
                    acc(grads, *a, av.len(), &mut |da| {
                        for i in 0..av.len() {
                            da[i] += go * 2.0 * (av[i] - bv[i]) / n;
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, *b, bv.len(), &mut |db| {
                        for i in 0..bv.len() {
                            db[i] -= go * 2.0 * (av[i] - bv[i]) / n;
                        }
                    });
                }
            }

            Op::KlRows { p, q, eps } => {
                let pv = self.nodes[*p].value.data();
                let qv = self.nodes[*q].value.data();
                let go = g[0];
                if needs(*p) {
                    acc(grads, *p, pv.len(), &mut |dp| {
                        for i in 0..pv.len() {
                            let lp = pv[i].max(*eps).ln();
                            let lq = qv[i].max(*eps).ln();
                            let extra = if pv[i] >= *eps { 1.0 } else { 0.0 };
                            dp[i] += go * (lp - lq + extra);
                        }
                    });
                }
                if needs(*q) {
                    acc(grads, *q, qv.len(), &mut |dq| {
                        for i in 0..qv.len() {
                            if qv[i] >= *eps {
                                dq[i] -= go * pv[i] / qv[i];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(1);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let i = tape.constant(Tensor::identity(3));
        let xid = tape.constant(x.clone());
        let y = tape.matmul(i, xid).unwrap();
        assert!(tape.value(y).bits_eq(&x));
    }

    #[test]
    fn matmul_hand_computed() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        // d/dA sum(A @ B) = ones(m,n) @ B^T
        let mut tape = Tape::new();
        let a_param = Parameter::trainable("a", t2(2, 3, &[0.3, -0.2, 0.5, 1.0, 0.1, -0.4]));
        let bt = t2(3, 2, &[2.0, -1.0, 0.5, 3.0, 1.5, 0.25]);
        let a = tape.param(&a_param);
        let b = tape.constant(bt.clone());
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let got = tape.grad(a).unwrap();
        // ones(2,2) @ B^T: each row of the gradient is the row sums of B.
        let row_sums: Vec<f64> = (0..3).map(|p| bt.data()[p * 2] + bt.data()[p * 2 + 1]).collect();
        for i in 0..2 {
            for p in 0..3 {
                assert!((got[i * 3 + p] - row_sums[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_concat_roundtrip_bitwise() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(9);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let xid = tape.constant(x.clone());
        let (lo, hi) = tape.split_channels(xid).unwrap();
        let back = tape.concat_channels(lo, hi).unwrap();
        assert!(tape.value(back).bits_eq(&x));
    }

    #[test]
    fn split_hand_case_and_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let (lo, hi) = tape.split_channels(x).unwrap();
        assert_eq!(tape.value(lo).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(hi).data(), &[3.0, 4.0]);

        let z = tape.constant(Tensor::zeros(vec![2, 4]));
        let (zl, zh) = tape.split_channels(z).unwrap();
        assert!(tape.value(zl).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(zh).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_rejects_odd_width() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 5]));
        let err = tape.split_channels(x).unwrap_err().to_string();
        assert!(err.contains("even channel width"), "{err}");
    }

    #[test]
    fn concat_definition_and_empty_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let b = tape.constant(t2(1, 2, &[3.0, 4.0]));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let empty = tape.constant(Tensor::zeros(vec![2, 0]));
        let same = tape.concat_channels(x, empty).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
    }

    #[test]
    fn concat_rejects_leading_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 3]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(t2(1, 2, &[1000.0, 0.0]));
        let yb = tape.softmax_rows(big).unwrap();
        let d = tape.value(yb).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(3);
        let x = tape.constant(Tensor::randn(vec![5, 7], 3.0, &mut rng));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..5 {
            let s: f64 = v.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(11);
        let logits = tape.constant(Tensor::randn(vec![4, 6], 2.0, &mut rng));
        let p = tape.softmax_rows(logits).unwrap();
        let kl = tape.kl_div(p, p).unwrap();
        assert!(tape.value(kl).data()[0].abs() < 1e-12);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grads() {
        let mut tape = Tape::new();
        let p = Parameter::trainable("w", Tensor::full(vec![2, 2], 0.5));
        let _w = tape.param(&p);
        let c = tape.scalar(7.0);
        tape.backward(c).unwrap();
        assert!(tape.params_with_grad().is_empty());
    }

    #[test]
    fn backward_sum_of_param_gives_ones() {
        let mut tape = Tape::new();
        let p = Parameter::trainable("w", Tensor::full(vec![2, 3], 0.5));
        let w = tape.param(&p);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = Parameter::trainable("w", Tensor::full(vec![2, 3], 0.5));
        let w = tape.param(&p);
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shared_param_leaf_accumulates_both_uses() {
        // y = sum(w) + sum(w) => dy/dw = 2
        let mut tape = Tape::new();
        let p = Parameter::trainable("w", Tensor::full(vec![1, 2], 1.0));
        let w1 = tape.param(&p);
        let w2 = tape.param(&p);
        assert_eq!(w1, w2);
        let s1 = tape.sum_all(w1);
        let s2 = tape.sum_all(w2);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w1).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn ops_deterministic_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let mut rng = rng_from_seed(21);
            let x = tape.constant(Tensor::randn(vec![4, 8], 1.0, &mut rng));
            let w = tape.constant(Tensor::randn(vec![8, 8], 0.3, &mut rng));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.gelu(h);
            let s = tape.softmax_rows(a).unwrap();
            tape.value(s).clone()
        };
        let a = run();
        let b = run();
        assert!(a.bits_eq(&b));
    }
}
