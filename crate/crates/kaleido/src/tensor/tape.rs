//! The computation record: eager forward execution plus reverse-mode backward.
//!
//! Nodes are appended in execution order, so the record is topologically
//! ordered by construction and every output is produced exactly once.
//! `backward` walks the record in reverse and accumulates gradients; calling
//! it again without resetting accumulates further, which the batch loop
//! relies on.

use crate::error::{KbError, Result};

/// Handle to one node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Probability floor applied inside KL divergence when a prediction entry
/// underflows to zero where the target has mass.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    GatherRows { table: usize, indices: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    MeanRows { x: usize },
    SumAll { x: usize },
    AddN { parts: Vec<usize> },
    CrossEntropyRows { logits: usize, labels: Vec<usize> },
    KlDiv { target: Vec<f64>, pred: usize },
    BceWithLogits { logit: usize, y: f64 },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Reshape { x: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of primitive operations with their intermediate values.
pub struct Tape {
    nodes: Vec<Node>,
    kl_clamp_events: u64,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected 1-D or 2-D shape, got {shape:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kl_clamp_events: 0 }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Number of times KL divergence had to clamp a zero prediction.
    pub fn kl_clamp_events(&self) -> u64 {
        self.kl_clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    /// Empty until `backward` has run.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].grad {
            Some(g) => g,
            None => &[],
        }
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    // ── Node constructors ───────────────────────────────────────────────

    /// A leaf holding `data`; gradients accumulate here during backward.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KbError::Shape(format!(
                "leaf shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &super::Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = rows_cols(self.shape(a));
        let (kb, n) = rows_cols(self.shape(b));
        if ka != kb {
            return Err(KbError::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * ka..(i + 1) * ka];
                let orow = &mut out[i * n..(i + 1) * n];
                for (k, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * n..(k + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(x));
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose { x: x.0 }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(KbError::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcasts `row` over every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(x));
        let (rr, rc) = rows_cols(self.shape(row));
        if rr != 1 || rc != c {
            return Err(KbError::Shape(format!(
                "add_row wants a [1,{c}] row, got {:?}",
                self.shape(row)
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let rowd = &self.nodes[row.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::AddRow { x: x.0, row: row.0 }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(KbError::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x: x.0, c })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Gelu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Sigmoid { x: x.0 })
    }

    /// Max-subtracted softmax along `axis`. Rejects non-finite input.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(KbError::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if self.nodes[x.0].data.iter().any(|v| !v.is_finite()) {
            return Err(KbError::Numeric("softmax input is not finite".into()));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * axis_len * inner + k * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    mx = mx.max(xd[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..axis_len {
                    let e = (xd[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..axis_len {
                    out[at(k)] /= sum;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x: x.0, axis }))
    }

    /// Rowwise softmax of a 2-D node.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let axis = self.shape(x).len() - 1;
        self.softmax(x, axis)
    }

    /// Rowwise layer normalization: normalize each row of `x` to zero mean
    /// and unit variance, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, d) = rows_cols(self.shape(x));
        if d < 2 {
            return Err(KbError::Contract(format!("layer_norm wants d >= 2, got {d}")));
        }
        let (_, gd) = rows_cols(self.shape(gain));
        let (_, bd) = rows_cols(self.shape(bias));
        if gd != d || bd != d {
            return Err(KbError::Shape(format!(
                "layer_norm gain/bias dims {gd}/{bd} do not match d={d}"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let gaind = &self.nodes[gain.0].data;
        let biasd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; xd.len()];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * gaind[j] + biasd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }))
    }

    /// Row lookup: out[i] = table[indices[i]]. Used for embeddings and for
    /// selecting hidden states at given sequence positions.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(table));
        for &ix in indices {
            if ix >= r {
                return Err(KbError::Index(format!("gather_rows index {ix} >= {r}")));
            }
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            out.extend_from_slice(&td[ix * c..(ix + 1) * c]);
        }
        Ok(self.push(
            vec![indices.len(), c],
            out,
            Op::GatherRows { table: table.0, indices: indices.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(x));
        if start + len > c {
            return Err(KbError::Shape(format!("slice_cols {start}..{} > {c}", start + len)));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: x.0, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KbError::Contract("concat_rows of nothing".into()));
        }
        let (_, c0) = rows_cols(self.shape(parts[0]));
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != c0 {
                return Err(KbError::Shape(format!("concat_rows column mismatch {c} vs {c0}")));
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * c0);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            vec![total_rows, c0],
            out,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KbError::Contract("concat_cols of nothing".into()));
        }
        let (r0, _) = rows_cols(self.shape(parts[0]));
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != r0 {
                return Err(KbError::Shape(format!("concat_cols row mismatch {r} vs {r0}")));
            }
            total_cols += c;
        }
        let mut out = vec![0.0; r0 * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            let pd = &self.nodes[p.0].data;
            for i in 0..r0 {
                out[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(
            vec![r0, total_cols],
            out,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    /// Mean over rows: [k, m] -> [1, m].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(x));
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(vec![1, c], out, Op::MeanRows { x: x.0 }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { x: x.0 })
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            if self.nodes[p.0].data.len() != 1 {
                return Err(KbError::Contract("add_n wants scalar nodes".into()));
            }
        }
        let s: f64 = parts.iter().map(|p| self.nodes[p.0].data[0]).sum();
        Ok(self.push(vec![1], vec![s], Op::AddN { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Mean cross-entropy over rows of `logits` against integer labels.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(logits));
        if labels.len() != r {
            return Err(KbError::Shape(format!("{} labels for {r} rows", labels.len())));
        }
        for &l in labels {
            if l >= c {
                return Err(KbError::Index(format!("label {l} out of range for {c} classes")));
            }
        }
        let xd = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            total -= log_softmax_at(row, label);
        }
        total /= r as f64;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropyRows { logits: logits.0, labels: labels.to_vec() },
        ))
    }

    /// Cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() == 1 {
            let r = self.reshape(logits, vec![1, shape[0]])?;
            self.cross_entropy_rows(r, &[label])
        } else {
            self.cross_entropy_rows(logits, &[label])
        }
    }

    /// KL divergence from a fixed target distribution to the predicted
    /// distribution node. The target is data, not a differentiable input.
    pub fn kl_div(&mut self, target: &[f64], pred: NodeId) -> Result<NodeId> {
        let pd = &self.nodes[pred.0].data;
        if target.len() != pd.len() {
            return Err(KbError::Shape(format!(
                "kl_div lengths differ: target {} vs pred {}",
                target.len(),
                pd.len()
            )));
        }
        validate_distribution(target, "target")?;
        validate_distribution(pd, "pred")?;
        let mut loss = 0.0;
        let mut clamped = 0u64;
        for (&t, &p) in target.iter().zip(pd.iter()) {
            if t <= 0.0 {
                continue;
            }
            let p_safe = if p < KL_CLAMP {
                clamped += 1;
                KL_CLAMP
            } else {
                p
            };
            loss += t * (t.ln() - p_safe.ln());
        }
        self.kl_clamp_events += clamped;
        Ok(self.push(vec![1], vec![loss], Op::KlDiv { target: target.to_vec(), pred: pred.0 }))
    }

    /// Binary cross-entropy on a single logit, computed in log-space.
    pub fn bce_with_logits(&mut self, logit: NodeId, y: f64) -> Result<NodeId> {
        if self.nodes[logit.0].data.len() != 1 {
            return Err(KbError::Contract("bce_with_logits wants a scalar logit".into()));
        }
        let x = self.nodes[logit.0].data[0];
        let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { logit: logit.0, y }))
    }

    /// 2-D convolution over a CHW input.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(KbError::Shape(format!("conv2d wants CHW and OIKK, got {xs:?} {ws:?}")));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(KbError::Shape(format!("conv2d channels: input {ci} vs weight {wci}")));
        }
        if self.nodes[b.0].data.len() != co {
            return Err(KbError::Shape("conv2d bias length mismatch".into()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let wdat = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            let w_oc = &wdat[oc * ci * kh * kw..(oc + 1) * ci * kh * kw];
            for oy in 0..ho {
                let (ky0, ky1) = kernel_span(oy, stride, pad, kh, h);
                let orow = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                for (ox, o) in orow.iter_mut().enumerate() {
                    let (kx0, kx1) = kernel_span(ox, stride, pad, kw, wd);
                    let mut acc = bd[oc];
                    for ic in 0..ci {
                        for ky in ky0..ky1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xd[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                            let wrow = &w_oc[(ic * kh + ky) * kw..(ic * kh + ky + 1) * kw];
                            for kx in kx0..kx1 {
                                acc += xrow[ox * stride + kx - pad] * wrow[kx];
                            }
                        }
                    }
                    *o = acc;
                }
            }
        }
        Ok(self.push(
            vec![co, ho, wo],
            out,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(KbError::Shape(format!(
                "reshape to {shape:?} from {:?}",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x: x.0 }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates gradient buffers for every node reachable from `loss`.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(KbError::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            if node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        // Seed with d(loss)/d(loss) = 1 on a fresh pass buffer so that
        // accumulation across repeated backward calls stays correct.
        let n = self.nodes.len();
        let mut pass: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        pass[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if pass[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut pass[i]);
            self.backprop_node(i, &grad, &mut pass);
            pass[i] = grad;
        }
        for i in 0..n {
            let acc = self.nodes[i].grad.as_mut().unwrap();
            for (a, g) in acc.iter_mut().zip(&pass[i]) {
                *a += g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, grad: &[f64], pass: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(&self.nodes[*a].shape);
                let (_, n) = rows_cols(&self.nodes[*b].shape);
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                // dA[i,k] = sum_j G[i,j] * B[k,j]
                let da = &mut pass[*a];
                for r in 0..m {
                    let grow = &grad[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let brow = &bd[kk * n..(kk + 1) * n];
                        let mut s = 0.0;
                        for (g, bv) in grow.iter().zip(brow) {
                            s += g * bv;
                        }
                        da[r * k + kk] += s;
                    }
                }
                // dB[k,j] += A[i,k] * G[i,j]
                let db = &mut pass[*b];
                for r in 0..m {
                    let grow = &grad[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let av = ad[r * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (c, r) = rows_cols(&node.shape);
                let dx = &mut pass[*x];
                for i2 in 0..c {
                    for j in 0..r {
                        dx[j * c + i2] += grad[i2 * r + j];
                    }
                }
            }
            Op::Add { a, b } => {
                for (d, g) in pass[*a].iter_mut().zip(grad) {
                    *d += g;
                }
                for (d, g) in pass[*b].iter_mut().zip(grad) {
                    *d += g;
                }
            }
            Op::AddRow { x, row } => {
                let (r, c) = rows_cols(&node.shape);
                for (d, g) in pass[*x].iter_mut().zip(grad) {
                    *d += g;
                }
                let dr = &mut pass[*row];
                for i2 in 0..r {
                    for j in 0..c {
                        dr[j] += grad[i2 * c + j];
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                for ((d, g), bv) in pass[*a].iter_mut().zip(grad).zip(bd) {
                    *d += g * bv;
                }
                for ((d, g), av) in pass[*b].iter_mut().zip(grad).zip(ad) {
                    *d += g * av;
                }
            }
            Op::Scale { x, c } => {
                for (d, g) in pass[*x].iter_mut().zip(grad) {
                    *d += g * c;
                }
            }
            Op::Gelu { x } => {
                let xd = &self.nodes[*x].data;
                for ((d, g), &v) in pass[*x].iter_mut().zip(grad).zip(xd) {
                    let inner = GELU_C * (v + GELU_A * v * v * v);
                    let t = inner.tanh();
                    let sech2 = 1.0 - t * t;
                    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner);
                }
            }
            Op::Sigmoid { x } => {
                for ((d, g), &s) in pass[*x].iter_mut().zip(grad).zip(&node.data) {
                    *d += g * s * (1.0 - s);
                }
            }
            Op::Softmax { x, axis } => {
                let shape = &node.shape;
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let s = &node.data;
                let dx = &mut pass[*x];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |k: usize| o * axis_len * inner + k * inner + i2;
                        let mut dot = 0.0;
                        for k in 0..axis_len {
                            dot += grad[at(k)] * s[at(k)];
                        }
                        for k in 0..axis_len {
                            dx[at(k)] += s[at(k)] * (grad[at(k)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, d) = rows_cols(&self.nodes[*x].shape);
                let xd = &self.nodes[*x].data;
                let gaind = &self.nodes[*gain].data;
                let df = d as f64;
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for row in 0..r {
                    let xs = &xd[row * d..(row + 1) * d];
                    let gs = &grad[row * d..(row + 1) * d];
                    let mean = xs.iter().sum::<f64>() / df;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gs.iter().zip(gaind).map(|(g, gn)| g * gn).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let dxrow = &mut pass[*x][row * d..(row + 1) * d];
                    for j in 0..d {
                        dxrow[j] +=
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                    }
                }
                for (dst, v) in pass[*gain].iter_mut().zip(&dgain) {
                    *dst += v;
                }
                for (dst, v) in pass[*bias].iter_mut().zip(&dbias) {
                    *dst += v;
                }
            }
            Op::GatherRows { table, indices } => {
                let (_, c) = rows_cols(&self.nodes[*table].shape);
                let dt = &mut pass[*table];
                for (k, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[ix * c + j] += grad[k * c + j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = rows_cols(&self.nodes[*x].shape);
                let dx = &mut pass[*x];
                for i2 in 0..r {
                    for j in 0..*len {
                        dx[i2 * c + start + j] += grad[i2 * len + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    for (d, g) in pass[p].iter_mut().zip(&grad[offset..offset + len]) {
                        *d += g;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total_cols) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = rows_cols(&self.nodes[p].shape);
                    let dp = &mut pass[p];
                    for i2 in 0..r {
                        for j in 0..c {
                            dp[i2 * c + j] += grad[i2 * total_cols + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = rows_cols(&self.nodes[*x].shape);
                let inv = 1.0 / r as f64;
                let dx = &mut pass[*x];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] += grad[j] * inv;
                    }
                }
            }
            Op::SumAll { x } => {
                let g = grad[0];
                for d in pass[*x].iter_mut() {
                    *d += g;
                }
            }
            Op::AddN { parts } => {
                let g = grad[0];
                for &p in parts {
                    pass[p][0] += g;
                }
            }
            Op::CrossEntropyRows { logits, labels } => {
                let (r, c) = rows_cols(&self.nodes[*logits].shape);
                let xd = &self.nodes[*logits].data;
                let g = grad[0] / r as f64;
                let dl = &mut pass[*logits];
                for (i2, &label) in labels.iter().enumerate() {
                    let row = &xd[i2 * c..(i2 + 1) * c];
                    let sm = softmax_vec(row);
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[i2 * c + j] += g * (sm[j] - onehot);
                    }
                }
            }
            Op::KlDiv { target, pred } => {
                let pd = &self.nodes[*pred].data;
                let g = grad[0];
                let dp = &mut pass[*pred];
                for (j, (&t, &p)) in target.iter().zip(pd).enumerate() {
                    if t > 0.0 && p >= KL_CLAMP {
                        dp[j] += g * (-t / p);
                    }
                }
            }
            Op::BceWithLogits { logit, y } => {
                let x = self.nodes[*logit].data[0];
                pass[*logit][0] += grad[0] * (stable_sigmoid(x) - y);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = &self.nodes[*x].shape;
                let ws = &self.nodes[*w].shape;
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let xd = &self.nodes[*x].data;
                let wdat = &self.nodes[*w].data;
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdat.len()];
                let mut db = vec![0.0; co];
                for oc in 0..co {
                    let w_oc = &wdat[oc * ci * kh * kw..(oc + 1) * ci * kh * kw];
                    let dw_oc = &mut dw[oc * ci * kh * kw..(oc + 1) * ci * kh * kw];
                    for oy in 0..ho {
                        let (ky0, ky1) = kernel_span(oy, stride, pad, kh, h);
                        let grow = &grad[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                        for (ox, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let (kx0, kx1) = kernel_span(ox, stride, pad, kw, wd);
                            db[oc] += g;
                            for ic in 0..ci {
                                for ky in ky0..ky1 {
                                    let iy = oy * stride + ky - pad;
                                    let base = (ic * h + iy) * wd;
                                    let xrow = &xd[base..base + wd];
                                    let dxrow = &mut dx[base..base + wd];
                                    let wbase = (ic * kh + ky) * kw;
                                    for kx in kx0..kx1 {
                                        let xi = ox * stride + kx - pad;
                                        dw_oc[wbase + kx] += g * xrow[xi];
                                        dxrow[xi] += g * w_oc[wbase + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                for (d, v) in pass[*x].iter_mut().zip(&dx) {
                    *d += v;
                }
                for (d, v) in pass[*w].iter_mut().zip(&dw) {
                    *d += v;
                }
                for (d, v) in pass[*b].iter_mut().zip(&db) {
                    *d += v;
                }
            }
            Op::Reshape { x } => {
                for (d, g) in pass[*x].iter_mut().zip(grad) {
                    *d += g;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Valid kernel index range so the input coordinate stays in bounds.
#[inline]
fn kernel_span(out_pos: usize, stride: usize, pad: usize, k: usize, size: usize) -> (usize, usize) {
    let base = out_pos * stride;
    let k0 = pad.saturating_sub(base);
    let k1 = k.min(size + pad - base);
    (k0, k1)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(row: &[f64], ix: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row[ix] - lse
}

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(KbError::Contract(format!("kl_div {name} has negative entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(KbError::Contract(format!("kl_div {name} sums to {sum}, not 1")));
    }
    Ok(())
}
