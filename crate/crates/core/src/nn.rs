//! Multi-layer perceptrons with hand-written backward passes, cell-line
//! projection heads, and the momentum copies and FIFO queues used for
//! queue-based negative sampling.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{normalize_rows, normalize_rows_backward, Matrix, RngStream};

/// Anything that owns a fixed, ordered list of parameter tensors.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    /// A copy with every tensor zeroed; used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Shapes of two parameter sets must match tensor by tensor.
pub fn check_same_shapes<P: Parameters>(a: &P, b: &P, op: &'static str) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::shape(op, format!("{} vs {} tensors", ta.len(), tb.len())));
    }
    for (k, (x, y)) in ta.iter().zip(&tb).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("tensor {k}: {:?} vs {:?}", x.shape(), y.shape())));
        }
    }
    Ok(())
}

// ── Layers ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self { weight: rng.normal_matrix(fan_in, fan_out, std), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    /// Returns `(grads, input_grad)` for upstream gradient `g` at input `x`.
    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<(Linear, Matrix)> {
        let grads = Linear { weight: x.matmul_tn(g)?, bias: g.column_sums() };
        let dx = g.matmul_nt(&self.weight)?;
        Ok((grads, dx))
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ── MLP ─────────────────────────────────────────────────────────────────────

/// Stack of affine layers with the activation between them (not after the
/// last), optionally followed by per-row L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub normalize_output: bool,
}

/// Intermediate values from a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    /// Row norms of the last pre-activation when normalization is on.
    norms: Option<Vec<f64>>,
    pub output: Matrix,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; one layer per adjacent pair.
    pub fn init(dims: &[usize], activation: Activation, normalize_output: bool, rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid MLP dimensions {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Ok(Self { layers, activation, normalize_output })
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {k} outputs {} but layer {} expects {}", pair[0].out_dim(), k + 1, pair[1].in_dim()),
                ));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(Error::shape("Mlp::from_layers", format!("layer {k} bias shape {:?}", l.bias.shape())));
            }
        }
        Ok(Self { layers, activation, normalize_output })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &Matrix) -> Result<MlpTrace> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input has {} columns, first layer expects {}", input.cols(), self.in_dim()),
            ));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = if k + 1 < n { z.map(|v| self.activation.apply(v)) } else { z.clone() };
            pre.push(z);
        }
        let (output, norms) = if self.normalize_output {
            let (y, norms) = normalize_rows(&h)?;
            (y, Some(norms))
        } else {
            (h, None)
        };
        Ok(MlpTrace { inputs, pre, norms, output })
    }

    /// Reverse pass from a trace. Returns parameter gradients (as an `Mlp`
    /// of the same shape) and the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, output_grad: &Matrix) -> Result<(Mlp, Matrix)> {
        if output_grad.shape() != trace.output.shape() {
            return Err(Error::shape(
                "mlp_backward",
                format!("output grad {:?} vs output {:?}", output_grad.shape(), trace.output.shape()),
            ));
        }
        let mut g = match &trace.norms {
            Some(norms) => normalize_rows_backward(&trace.output, norms, output_grad)?,
            None => output_grad.clone(),
        };
        let n = self.layers.len();
        let mut grads: Vec<Option<Linear>> = vec![None; n];
        for k in (0..n).rev() {
            if k + 1 < n {
                let pre = &trace.pre[k];
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= self.activation.derivative(p);
                }
            }
            let (lg, dx) = self.layers[k].backward(&trace.inputs[k], &g)?;
            grads[k] = Some(lg);
            g = dx;
        }
        let layers = grads.into_iter().map(|l| l.expect("every layer visited")).collect();
        Ok((Mlp { layers, activation: self.activation, normalize_output: self.normalize_output }, g))
    }

    /// Forward then backward in one call.
    pub fn backward_from_input(&self, input: &Matrix, output_grad: &Matrix) -> Result<(Mlp, Matrix)> {
        let trace = self.forward_trace(input)?;
        self.backward(&trace, output_grad)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

// ── Projection heads ────────────────────────────────────────────────────────

/// One linear head per cell line, applied row by row according to the
/// row's cell-line index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeads {
    pub heads: BTreeMap<usize, Linear>,
}

impl ProjectionHeads {
    pub fn init(n_cell_lines: usize, dim: usize, rng: &mut RngStream) -> Self {
        let heads = (0..n_cell_lines).map(|c| (c, Linear::init(dim, dim, rng))).collect();
        Self { heads }
    }

    fn head(&self, cell: usize) -> Result<&Linear> {
        self.heads
            .get(&cell)
            .ok_or_else(|| Error::Data(format!("no projection head for cell line {cell}")))
    }

    pub fn forward(&self, x: &Matrix, cells: &[usize]) -> Result<Matrix> {
        if cells.len() != x.rows() {
            return Err(Error::shape("ProjectionHeads::forward", format!("{} rows, {} cell ids", x.rows(), cells.len())));
        }
        let dim = self.heads.values().next().map(|h| h.out_dim()).unwrap_or(0);
        let mut out = Matrix::zeros(x.rows(), dim);
        for (r, &c) in cells.iter().enumerate() {
            let y = self.head(c)?.forward(&Matrix::row_vector(x.row(r)))?;
            out.row_mut(r).copy_from_slice(y.data());
        }
        Ok(out)
    }

    /// Gradients for every head (zero for heads not used by this batch) and
    /// the input gradient.
    pub fn backward(&self, x: &Matrix, cells: &[usize], g: &Matrix) -> Result<(ProjectionHeads, Matrix)> {
        let mut grads = self.zeros_like();
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for (r, &c) in cells.iter().enumerate() {
            let head = self.head(c)?;
            let (lg, d) = head.backward(&Matrix::row_vector(x.row(r)), &Matrix::row_vector(g.row(r)))?;
            let acc = grads.heads.get_mut(&c).expect("same keys");
            acc.weight.axpy(1.0, &lg.weight)?;
            acc.bias.axpy(1.0, &lg.bias)?;
            dx.row_mut(r).copy_from_slice(d.data());
        }
        Ok((grads, dx))
    }
}

impl Parameters for ProjectionHeads {
    fn tensors(&self) -> Vec<&Matrix> {
        self.heads.values().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.heads.values_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

// ── Encoders ────────────────────────────────────────────────────────────────

/// An MLP body, optional per-cell-line heads, and unit normalization of the
/// final embedding. Without heads the body normalizes its own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub body: Mlp,
    pub heads: Option<ProjectionHeads>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    body: MlpTrace,
    head_norms: Option<Vec<f64>>,
    pub embedding: Matrix,
}

impl Encoder {
    pub fn init(dims: &[usize], activation: Activation, n_cell_lines: Option<usize>, rng: &mut RngStream) -> Result<Self> {
        let body = Mlp::init(dims, activation, n_cell_lines.is_none(), rng)?;
        let heads = n_cell_lines.map(|n| ProjectionHeads::init(n, body.out_dim(), rng));
        Ok(Self { body, heads })
    }

    pub fn in_dim(&self) -> usize {
        self.body.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.body.out_dim()
    }

    pub fn forward(&self, x: &Matrix, cells: &[usize]) -> Result<Matrix> {
        Ok(self.forward_trace(x, cells)?.embedding)
    }

    pub fn forward_trace(&self, x: &Matrix, cells: &[usize]) -> Result<EncoderTrace> {
        let body = self.body.forward_trace(x)?;
        match &self.heads {
            None => {
                let embedding = body.output.clone();
                Ok(EncoderTrace { body, head_norms: None, embedding })
            }
            Some(heads) => {
                let projected = heads.forward(&body.output, cells)?;
                let (embedding, norms) = normalize_rows(&projected)?;
                Ok(EncoderTrace { body, head_norms: Some(norms), embedding })
            }
        }
    }

    pub fn backward(&self, trace: &EncoderTrace, cells: &[usize], g: &Matrix) -> Result<(Encoder, Matrix)> {
        match (&self.heads, &trace.head_norms) {
            (Some(heads), Some(norms)) => {
                let g_proj = normalize_rows_backward(&trace.embedding, norms, g)?;
                let (head_grads, g_body) = heads.backward(&trace.body.output, cells, &g_proj)?;
                let (body, dx) = self.body.backward(&trace.body, &g_body)?;
                Ok((Encoder { body, heads: Some(head_grads) }, dx))
            }
            (None, None) => {
                let (body, dx) = self.body.backward(&trace.body, g)?;
                Ok((Encoder { body, heads: None }, dx))
            }
            _ => Err(Error::shape("Encoder::backward", "trace does not match encoder layout")),
        }
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.body.tensors();
        if let Some(h) = &self.heads {
            t.extend(h.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.body.tensors_mut();
        if let Some(h) = &mut self.heads {
            t.extend(h.tensors_mut());
        }
        t
    }
}

// ── Network bundle ──────────────────────────────────────────────────────────

/// Both encoders and both batch classifiers. Classifiers map an embedding to
/// batch logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub enc_d: Encoder,
    pub enc_g: Encoder,
    pub clf_d: Mlp,
    pub clf_g: Mlp,
}

/// Architecture of a [`Networks`] bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub drug_dim: usize,
    pub screen_dim: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub n_batches: usize,
    pub activation: Activation,
    /// Number of cell lines when per-cell-line heads are used on the drug branch.
    pub cell_line_heads: Option<usize>,
}

impl Networks {
    pub fn init(arch: &Architecture, rng: &mut RngStream) -> Result<Self> {
        let mut dims_d = vec![arch.drug_dim];
        dims_d.extend(&arch.encoder_hidden);
        dims_d.push(arch.embedding_dim);
        let mut dims_g = vec![arch.screen_dim];
        dims_g.extend(&arch.encoder_hidden);
        dims_g.push(arch.embedding_dim);
        let mut dims_c = vec![arch.embedding_dim];
        dims_c.extend(&arch.classifier_hidden);
        dims_c.push(arch.n_batches.max(1));
        let enc_d = Encoder::init(&dims_d, arch.activation, arch.cell_line_heads, &mut rng.fork("enc_d"))?;
        let enc_g = Encoder::init(&dims_g, arch.activation, None, &mut rng.fork("enc_g"))?;
        let clf_d = Mlp::init(&dims_c, arch.activation, false, &mut rng.fork("clf_d"))?;
        let clf_g = Mlp::init(&dims_c, arch.activation, false, &mut rng.fork("clf_g"))?;
        Ok(Self { enc_d, enc_g, clf_d, clf_g })
    }

    pub fn encoder_tensors(&self) -> Vec<&Matrix> {
        let mut t = self.enc_d.tensors();
        t.extend(self.enc_g.tensors());
        t
    }

    pub fn classifier_tensors(&self) -> Vec<&Matrix> {
        let mut t = self.clf_d.tensors();
        t.extend(self.clf_g.tensors());
        t
    }
}

impl Parameters for Networks {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.encoder_tensors();
        t.extend(self.classifier_tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.enc_d.tensors_mut();
        t.extend(self.enc_g.tensors_mut());
        t.extend(self.clf_d.tensors_mut());
        t.extend(self.clf_g.tensors_mut());
        t
    }
}

// ── Momentum state and queues ───────────────────────────────────────────────

/// `shadow ← m·shadow + (1−m)·online`, tensor by tensor.
pub fn momentum_blend<P: Parameters>(shadow: &mut P, online: &P, m: f64) -> Result<()> {
    check_same_shapes(shadow, online, "momentum_update")?;
    for (s, o) in shadow.tensors_mut().into_iter().zip(online.tensors()) {
        for (sv, ov) in s.data_mut().iter_mut().zip(o.data()) {
            *sv = m * *sv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Drug,
    Screen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueueScope {
    Global,
    CellLine(usize),
    Condition(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueKey {
    pub modality: Modality,
    pub scope: QueueScope,
}

impl QueueKey {
    pub fn new(modality: Modality, scope: QueueScope) -> Self {
        Self { modality, scope }
    }
}

impl fmt::Display for QueueKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}", self.modality, self.scope)
    }
}

/// One queued momentum output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub embedding: Vec<f64>,
    pub posterior: Vec<f64>,
    pub batch_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FifoQueue {
    pub capacity: usize,
    pub items: VecDeque<QueueItem>,
}

impl FifoQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: QueueItem) {
        if self.capacity == 0 {
            return;
        }
        while self.items.len() >= self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    /// Embeddings, posteriors and batch ids as dense blocks, oldest first.
    pub fn to_blocks(&self) -> Result<(Matrix, Matrix, Vec<usize>)> {
        let emb: Vec<&[f64]> = self.items.iter().map(|i| i.embedding.as_slice()).collect();
        let post: Vec<&[f64]> = self.items.iter().map(|i| i.posterior.as_slice()).collect();
        let ids = self.items.iter().map(|i| i.batch_id).collect();
        Ok((Matrix::from_rows(&emb)?, Matrix::from_rows(&post)?, ids))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub coefficient: f64,
    pub shadow: Networks,
    pub queues: BTreeMap<QueueKey, FifoQueue>,
}

impl MomentumState {
    /// Shadow copy of `online` with the two global per-modality queues.
    pub fn new(online: &Networks, coefficient: f64, capacity: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&coefficient) {
            return Err(Error::Config(format!("momentum coefficient {coefficient} outside [0, 1]")));
        }
        let mut queues = BTreeMap::new();
        for m in [Modality::Drug, Modality::Screen] {
            queues.insert(QueueKey::new(m, QueueScope::Global), FifoQueue::new(capacity));
        }
        Ok(Self { coefficient, shadow: online.clone(), queues })
    }

    /// Declare an additional queue for both modalities.
    pub fn declare_scope(&mut self, scope: QueueScope, capacity: usize) {
        for m in [Modality::Drug, Modality::Screen] {
            self.queues.entry(QueueKey::new(m, scope)).or_insert_with(|| FifoQueue::new(capacity));
        }
    }

    pub fn momentum_update(&mut self, online: &Networks) -> Result<()> {
        momentum_blend(&mut self.shadow, online, self.coefficient)
    }

    pub fn queue(&self, key: &QueueKey) -> Result<&FifoQueue> {
        self.queues.get(key).ok_or_else(|| Error::UnknownQueue(key.to_string()))
    }

    pub fn enqueue(&mut self, key: QueueKey, items: Vec<QueueItem>) -> Result<()> {
        let queue = self.queues.get_mut(&key).ok_or_else(|| Error::UnknownQueue(key.to_string()))?;
        if let (Some(first), Some(existing)) = (items.first(), queue.items.front()) {
            if first.embedding.len() != existing.embedding.len() {
                return Err(Error::shape(
                    "enqueue",
                    format!("embedding dim {} into queue of dim {}", first.embedding.len(), existing.embedding.len()),
                ));
            }
        }
        for item in items {
            queue.push(item);
        }
        Ok(())
    }
}
