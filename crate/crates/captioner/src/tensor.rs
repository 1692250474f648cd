//! Dense f64 tensors and a Wengert-tape reverse-mode autodiff engine.
//!
//! Everything on the tape is a 2-D matrix (scalars are `[1,1]`); images are
//! flattened into patch matrices before they enter the graph. All reductions
//! run in a fixed sequential order so forward results are bit-identical
//! across runs.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Plain n-dimensional value: shape + row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {:?}", other))),
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable parameter with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters receive no gradient and no optimizer updates.
    pub trainable: bool,
}

/// Flat registry of model parameters. Gradients accumulate additively until
/// [`ParamStore::zero_grad`] is called.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }
}

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Matmul(NodeId, NodeId),
    /// `a · bᵀ` where `b` is stored `[n, k]`.
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Row-broadcast bias add: `a [r,c] + b [1,c]`.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Dropout {
        a: NodeId,
        mask: Vec<f64>,
    },
    /// Weighted negative log-likelihood over rows of a logits matrix;
    /// `None` targets are ignored. Output is a `[1,1]` scalar.
    Nll {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
    },
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

/// Operation tape: records the forward pass, replays it in reverse for
/// gradients. Parent nodes always precede children, so one reverse sweep
/// implements the chain rule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, NodeId>,
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

/// `c = alpha * a·b (+ c)` for row-major matrices, with optional transposes.
fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    // Strides select the transposed view without copying.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.dims(id)
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.data.clone(),
        }
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "constant [{rows},{cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Const))
    }

    /// Record a parameter leaf. The same `ParamId` always maps to the same
    /// node within one tape, so tied weights share a single leaf and their
    /// gradients accumulate together.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_cache.get(&id) {
            return Ok(n);
        }
        let p = store.get(id);
        let (r, c) = p.value.dims2()?;
        let node = self.push(r, c, p.value.data.clone(), Op::Param(id));
        self.param_cache.insert(id, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: [{m},{ka}] vs [{kb},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            0.0,
            &mut out,
        );
        check_finite(&out, "matmul")?;
        Ok(self.push(m, n, out, Op::Matmul(a, b)))
    }

    /// `a [m,k] · bᵀ` with `b` stored `[n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt inner dims differ: [{m},{ka}] vs [{n},{kb}]ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            true,
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            0.0,
            &mut out,
        );
        check_finite(&out, "matmul_nt")?;
        Ok(self.push(m, n, out, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "add shapes differ: [{ra},{ca}] vs [{rb},{cb}]"
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        Ok(self.push(ra, ca, out, Op::Add(a, b)))
    }

    /// `a [r,c] + bias [1,c]`, broadcast over rows. The only implicit
    /// broadcast the engine supports.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if rb != 1 || cb != c {
            return Err(Error::Shape(format!(
                "add_bias expects bias [1,{c}], got [{rb},{cb}]"
            )));
        }
        let bias = &self.nodes[b.0].data;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        check_finite(&out, "add_bias")?;
        Ok(self.push(r, c, out, Op::AddBias(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        check_finite(&out, "scale")?;
        Ok(self.push(r, c, out, Op::Scale(a, factor)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "mul shapes differ: [{ra},{ca}] vs [{rb},{cb}]"
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        Ok(self.push(ra, ca, out, Op::Mul(a, b)))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_val(x)).collect();
        check_finite(&out, "gelu")?;
        Ok(self.push(r, c, out, Op::Gelu(a)))
    }

    /// Row-wise softmax with max subtraction. Each output row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if c == 0 {
            return Err(Error::Shape("softmax over zero-length rows".into()));
        }
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        check_finite(&out, "softmax")?;
        Ok(self.push(r, c, out, Op::SoftmaxRows(a)))
    }

    /// Per-row layer normalization followed by the `gain`/`bias` affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (rg, cg) = self.dims(gain);
        let (rb, cb) = self.dims(bias);
        if c == 0 || eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm requires cols >= 1 and eps > 0 (cols={c}, eps={eps})"
            )));
        }
        if (rg, cg) != (1, c) || (rb, cb) != (1, c) {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [1,{c}], got [{rg},{cg}] / [{rb},{cb}]"
            )));
        }
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; r * c];
        for (orow, xrow) in out
            .chunks_mut(c)
            .zip(self.nodes[x.0].data.chunks(c))
        {
            let mean = xrow.iter().sum::<f64>() / c as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                orow[j] = (xrow[j] - mean) * inv * g[j] + b[j];
            }
        }
        check_finite(&out, "layer_norm")?;
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "token id {id} out of range for table of {v} rows"
                )));
            }
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::Index(format!(
                "slice_rows {start}..{} out of [{r},{c}]",
                start + len
            )));
        }
        let out = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::Index(format!(
                "slice_cols {start}..{} out of [{r},{c}]",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.dims(p);
            if rp != r {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {r} vs {rp}"
                )));
            }
            total += cp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, cp) = self.dims(p);
                let src = &self.nodes[p.0].data;
                out.extend_from_slice(&src[i * cp..(i + 1) * cp]);
            }
        }
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Inverted-dropout with a caller-supplied mask of `0` / `1/(1-p)` entries.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(Error::Shape(format!(
                "dropout mask length {} vs tensor [{r},{c}]",
                mask.len()
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(r, c, out, Op::Dropout { a, mask }))
    }

    /// Mean negative log-softmax probability of `targets` over the
    /// non-ignored rows of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<NodeId> {
        let (r, v) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {r} logit rows",
                targets.len()
            )));
        }
        let mut tgt = Vec::with_capacity(r);
        let mut supervised = 0usize;
        for &t in targets {
            if t == ignore_id {
                tgt.push(None);
            } else if t >= v {
                return Err(Error::Index(format!(
                    "target id {t} out of range for vocab {v}"
                )));
            } else {
                tgt.push(Some(t));
                supervised += 1;
            }
        }
        if supervised == 0 {
            return Err(Error::Contract("no supervised positions".into()));
        }
        let w = 1.0 / supervised as f64;
        let weights = tgt
            .iter()
            .map(|t| if t.is_some() { w } else { 0.0 })
            .collect();
        self.nll(logits, tgt, weights)
    }

    /// Weighted NLL: `Σ_rows w_i · (−log softmax(logits_i)[target_i])`.
    /// REINFORCE losses use per-row advantage weights.
    pub fn nll(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        let (r, v) = self.dims(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::Shape(format!(
                "nll: {} targets / {} weights for {r} rows",
                targets.len(),
                weights.len()
            )));
        }
        let mut loss = 0.0;
        for (i, row) in self.nodes[logits.0].data.chunks(v).enumerate() {
            if let Some(t) = targets[i] {
                if t >= v {
                    return Err(Error::Index(format!(
                        "target id {t} out of range for vocab {v}"
                    )));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += weights[i] * (lse - row[t]);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("nll produced a non-finite loss".into()));
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Nll {
                logits,
                targets,
                weights,
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        check_finite(std::slice::from_ref(&s), "sum_all")?;
        Ok(self.push(1, 1, vec![s], Op::SumAll(a)))
    }

    /// Reverse sweep from a scalar loss. Gradients of trainable parameters
    /// accumulate into `store` (additively across calls).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got [{r},{c}]"
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let go = std::mem::take(&mut grads[i]);
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => store.accumulate(*pid, &go),
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (_, n) = self.dims(*b);
                    // dA += dC·Bᵀ ; dB += Aᵀ·dC
                    let bd = &self.nodes[b.0].data;
                    let ad = &self.nodes[a.0].data;
                    let mut da = std::mem::take(&mut grads[a.0]);
                    gemm(false, true, m, n, k, 1.0, &go, bd, 1.0, &mut da);
                    grads[a.0] = da;
                    let mut db = std::mem::take(&mut grads[b.0]);
                    gemm(true, false, k, m, n, 1.0, ad, &go, 1.0, &mut db);
                    grads[b.0] = db;
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (n, _) = self.dims(*b);
                    // C = A·Bᵀ: dA += dC·B ; dB += dCᵀ·A
                    let bd = &self.nodes[b.0].data;
                    let ad = &self.nodes[a.0].data;
                    let mut da = std::mem::take(&mut grads[a.0]);
                    gemm(false, false, m, n, k, 1.0, &go, bd, 1.0, &mut da);
                    grads[a.0] = da;
                    let mut db = std::mem::take(&mut grads[b.0]);
                    gemm(true, false, n, m, k, 1.0, &go, ad, 1.0, &mut db);
                    grads[b.0] = db;
                }
                Op::Add(a, b) => {
                    for (g, d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, d) in grads[b.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::AddBias(a, b) => {
                    let (_, c) = self.dims(*a);
                    for (g, d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                    let db = &mut grads[b.0];
                    for row in go.chunks(c) {
                        for (g, d) in db.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    for (g, d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d * f;
                    }
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    for j in 0..go.len() {
                        let av = self.nodes[ai].data[j];
                        let bv = self.nodes[bi].data[j];
                        grads[ai][j] += go[j] * bv;
                        grads[bi][j] += go[j] * av;
                    }
                }
                Op::Gelu(a) => {
                    let xs = &self.nodes[a.0].data;
                    let da = &mut grads[a.0];
                    for j in 0..go.len() {
                        da[j] += go[j] * gelu_grad(xs[j]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let c = node.cols;
                    let y = &node.data;
                    let da = &mut grads[a.0];
                    for row in 0..node.rows {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &go[row * c..(row + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for j in 0..c {
                            da[row * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let c = node.cols;
                    let cn = c as f64;
                    let xs = &self.nodes[x.0].data;
                    let g = &self.nodes[gain.0].data;
                    let (xi, gi, bi) = (x.0, gain.0, bias.0);
                    let mut dx = std::mem::take(&mut grads[xi]);
                    let mut dg = std::mem::take(&mut grads[gi]);
                    let mut db = std::mem::take(&mut grads[bi]);
                    for row in 0..node.rows {
                        let xr = &xs[row * c..(row + 1) * c];
                        let gr = &go[row * c..(row + 1) * c];
                        let mean = xr.iter().sum::<f64>() / cn;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cn;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * g[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dg[j] += gr[j] * xhat;
                            db[j] += gr[j];
                        }
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * g[j];
                            dx[row * c + j] +=
                                inv / cn * (cn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    grads[xi] = dx;
                    grads[gi] = dg;
                    grads[bi] = db;
                }
                Op::Embedding { table, ids } => {
                    let (_, d) = self.dims(*table);
                    let dt = &mut grads[table.0];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += go[i * d + j];
                        }
                    }
                }
                Op::SliceRows { a, start } => {
                    let (_, c) = self.dims(*a);
                    let da = &mut grads[a.0];
                    for (g, d) in da[start * c..start * c + go.len()].iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (_, c) = self.dims(*a);
                    let w = node.cols;
                    let da = &mut grads[a.0];
                    for i in 0..node.rows {
                        for j in 0..w {
                            da[i * c + start + j] += go[i * w + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, cp) = self.dims(p);
                        let dp = &mut grads[p.0];
                        for i in 0..node.rows {
                            for j in 0..cp {
                                dp[i * cp + j] += go[i * total + offset + j];
                            }
                        }
                        offset += cp;
                    }
                }
                Op::Dropout { a, mask } => {
                    let da = &mut grads[a.0];
                    for j in 0..go.len() {
                        da[j] += go[j] * mask[j];
                    }
                }
                Op::Nll {
                    logits,
                    targets,
                    weights,
                } => {
                    let (_, v) = self.dims(*logits);
                    let gscale = go[0];
                    let ld = &self.nodes[logits.0].data;
                    let dl = &mut grads[logits.0];
                    for (row, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let w = weights[row] * gscale;
                        if w == 0.0 {
                            continue;
                        }
                        let lr = &ld[row * v..(row + 1) * v];
                        let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = lr.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (lr[j] - max).exp() / sum;
                            dl[row * v + j] += w * (p - if j == *t { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = go[0];
                    for d in grads[a.0].iter_mut() {
                        *d += g;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(store: &ParamStore, id: ParamId) -> (Tape, NodeId) {
        let mut t = Tape::new();
        let n = t.param(store, id).unwrap();
        (t, n)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 2, vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2,3]") && msg.contains("[2,2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax_rows(a).unwrap();
        for v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = t.constant(1, 3, vec![1000.0, 0.0, -1000.0]).unwrap();
        let s = t.softmax_rows(b).unwrap();
        let d = t.data(s);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t
            .constant(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect())
            .unwrap();
        let s = t.softmax_rows(a).unwrap();
        for row in t.data(s).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(1, 4, vec![5.0; 4]).unwrap();
        let g = t.constant(1, 4, vec![1.0; 4]).unwrap();
        let b = t.constant(1, 4, vec![0.0; 4]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in t.data(y) {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_analytic() {
        // [1,2,3], eps→0: xhat = [-sqrt(3/2), 0, sqrt(3/2)]
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let g = t.constant(1, 3, vec![1.0; 3]).unwrap();
        let b = t.constant(1, 3, vec![0.0; 3]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-300).unwrap();
        let e = (1.5f64).sqrt();
        let d = t.data(y);
        assert!((d[0] + e).abs() < 1e-9 && d[1].abs() < 1e-9 && (d[2] - e).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut t = Tape::new();
        let logits = t.constant(1, 4, vec![0.5; 4]).unwrap();
        let l = t.cross_entropy(logits, &[2], usize::MAX).unwrap();
        assert!((t.data(l)[0] - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut t = Tape::new();
        let logits = t.constant(2, 4, vec![0.0; 8]).unwrap();
        let err = t.cross_entropy(logits, &[0, 0], 0).unwrap_err();
        assert!(err.to_string().contains("no supervised positions"));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut t = Tape::new();
        let logits = t.constant(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(
            t.cross_entropy(logits, &[7], usize::MAX),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let (mut t, xn) = tape_with(&store, x);
        let loss = t.sum_all(xn).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let (mut t, xn) = tape_with(&store, x);
        let sq = t.mul(xn, xn).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let (mut t, xn) = tape_with(&store, x);
        assert!(matches!(t.backward(xn, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let (mut t, xn) = tape_with(&store, x);
        let loss = t.sum_all(xn).unwrap();
        t.backward(loss, &mut store).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(x).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_param_receives_no_grad() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        store.get_mut(x).trainable = false;
        let (mut t, xn) = tape_with(&store, x);
        let loss = t.sum_all(xn).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn param_node_is_cached_for_weight_tying() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut t = Tape::new();
        let a = t.param(&store, x).unwrap();
        let b = t.param(&store, x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let a = t
                .constant(3, 3, (0..9).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let b = t
                .constant(3, 3, (0..9).map(|i| (i as f64).cos()).collect())
                .unwrap();
            let m = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(m).unwrap();
            t.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
