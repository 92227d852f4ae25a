//! The variable-block chain network.
//!
//! A model is a cascade of LSTM-style cells, one per variable block on a chain
//! prefix. Every cell owns its parameters; nothing is shared along the chain.
//! Gate parameters are stored stacked in the order input, forget, output,
//! proposal, so a cell's pre-activations are one `4q`-vector
//! `z = W h_prev + U x + b`. A softmax head reads the last hidden state.
//!
//! Gradients are derived by hand; [`backward`] walks the cached
//! [`ForwardTrace`] from the head back to the first cell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::error::{io_err, DvcError, Result};
use crate::numerics::{argmax, cross_entropy, sigmoid, softmax_in_place, Matrix, Rng};

/// Number of stacked gates per cell.
pub const GATES: usize = 4;
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_O: usize = 2;
const GATE_A: usize = 3;

/// Largest state size the default rule will pick.
pub const MAX_STATE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Recurrent weights, `4q x q`.
    pub w: Matrix,
    /// Input weights, `4q x p_t`.
    pub u: Matrix,
    /// Biases, `4q`.
    pub b: Vec<f64>,
}

impl CellParams {
    pub fn zeros(q: usize, p_t: usize) -> Self {
        Self {
            w: Matrix::zeros(GATES * q, q),
            u: Matrix::zeros(GATES * q, p_t),
            b: vec![0.0; GATES * q],
        }
    }

    pub fn q(&self) -> usize {
        self.w.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }

    fn check(&self) -> Result<()> {
        let q = self.q();
        if self.w.rows() != GATES * q || self.u.rows() != GATES * q || self.b.len() != GATES * q {
            return Err(DvcError::Shape(format!(
                "cell expects 4q={} rows; w {}x{}, u {}x{}, b {}",
                GATES * q,
                self.w.rows(),
                self.w.cols(),
                self.u.rows(),
                self.u.cols(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    /// `K x q`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// How the hidden-state size is chosen for a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StateSize {
    /// `min(20, smallest block size)` over the whole partition.
    #[default]
    MinBlock,
    Fixed(usize),
}

impl StateSize {
    pub fn resolve(self, partition: &BlockPartition) -> usize {
        match self {
            StateSize::MinBlock => MAX_STATE.min(partition.min_block_size()),
            StateSize::Fixed(q) => q,
        }
    }
}

/// A chain-prefix network: one cell per block id, then a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct DvcModel {
    block_ids: Vec<usize>,
    /// Feature indices feeding each cell.
    inputs: Vec<Vec<usize>>,
    cells: Vec<CellParams>,
    head: SoftmaxHead,
    q: usize,
    partition: BlockPartition,
}

/// Per-gate activations of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Single cell update:
/// `i, f, o = sigmoid(.)`, `a = tanh(.)`, `c = c_prev * f + i * a`, `h = o * tanh(c)`.
pub fn cell_forward(
    cell: &CellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<CellOutput> {
    cell.check()?;
    let q = cell.q();
    if x.len() != cell.input_dim() || h_prev.len() != q || c_prev.len() != q {
        return Err(DvcError::Shape(format!(
            "cell with q={q}, p_t={} got x {}, h {}, c {}",
            cell.input_dim(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = vec![0.0; GATES * q];
    let mut c = vec![0.0; q];
    let mut tc = vec![0.0; q];
    let mut h = vec![0.0; q];
    step(
        cell, x, h_prev, c_prev, None, &mut z, &mut c, &mut tc, &mut h,
    );
    Ok(CellOutput {
        i: z[GATE_I * q..(GATE_I + 1) * q].to_vec(),
        f: z[GATE_F * q..(GATE_F + 1) * q].to_vec(),
        o: z[GATE_O * q..(GATE_O + 1) * q].to_vec(),
        a: z[GATE_A * q..(GATE_A + 1) * q].to_vec(),
        c,
        h,
    })
}

/// Writes activated gates into `z` and the new state into `c`, `tc = tanh(c)`, `h`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn step(
    cell: &CellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    masks: Option<(&[f64], &[f64])>,
    z: &mut [f64],
    c: &mut [f64],
    tc: &mut [f64],
    h: &mut [f64],
) {
    let q = h.len();
    z.copy_from_slice(&cell.b);
    cell.w.matvec_acc(h_prev, z);
    cell.u.matvec_acc(x, z);
    for v in &mut z[..3 * q] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * q..] {
        *v = v.tanh();
    }
    for j in 0..q {
        let (mut i, f, mut o, a) = (z[j], z[q + j], z[2 * q + j], z[3 * q + j]);
        if let Some((mi, mo)) = masks {
            i *= mi[j];
            o *= mo[j];
        }
        c[j] = c_prev[j] * f + i * a;
        tc[j] = c[j].tanh();
        h[j] = o * tc[j];
    }
}

/// Inverted-dropout masks on the input and output gates of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMasks {
    /// `l x q`, entries 0 or `1 / (1 - rate)`.
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

impl GateMasks {
    pub fn sample(cells: usize, q: usize, rate: f64, rng: &mut Rng) -> Self {
        let keep = 1.0 - rate;
        let mut draw = || {
            (0..cells * q)
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let input = draw();
        let output = draw();
        Self { input, output }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    q: usize,
    /// Cell inputs, concatenated.
    x: Vec<f64>,
    x_offsets: Vec<usize>,
    /// `l x 4q` activated gates (i, f, o, a).
    gates: Vec<f64>,
    /// `(l + 1) x q`, row 0 is the zero initial state.
    c: Vec<f64>,
    h: Vec<f64>,
    /// `l x q`.
    tanh_c: Vec<f64>,
    masks: Option<GateMasks>,
    pub posteriors: Vec<f64>,
}

impl ForwardTrace {
    pub fn cells(&self) -> usize {
        self.tanh_c.len() / self.q.max(1)
    }

    fn gate(&self, t: usize, g: usize) -> &[f64] {
        let q = self.q;
        &self.gates[t * GATES * q + g * q..t * GATES * q + (g + 1) * q]
    }

    pub fn input_gate(&self, t: usize) -> &[f64] {
        self.gate(t, GATE_I)
    }

    pub fn forget_gate(&self, t: usize) -> &[f64] {
        self.gate(t, GATE_F)
    }

    pub fn output_gate(&self, t: usize) -> &[f64] {
        self.gate(t, GATE_O)
    }

    pub fn proposal(&self, t: usize) -> &[f64] {
        self.gate(t, GATE_A)
    }

    /// Memory after cell `t` (0-based).
    pub fn memory(&self, t: usize) -> &[f64] {
        &self.c[(t + 1) * self.q..(t + 2) * self.q]
    }

    /// Hidden state after cell `t` (0-based).
    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.h[(t + 1) * self.q..(t + 2) * self.q]
    }

    fn x(&self, t: usize) -> &[f64] {
        &self.x[self.x_offsets[t]..self.x_offsets[t + 1]]
    }
}

/// Gradient buffers shaped like a [`DvcModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub cells: Vec<CellParams>,
    pub head: SoftmaxHead,
}

impl Gradients {
    pub fn zeros_like(model: &DvcModel) -> Self {
        Self {
            cells: model
                .cells
                .iter()
                .map(|c| CellParams::zeros(c.q(), c.input_dim()))
                .collect(),
            head: SoftmaxHead {
                w: Matrix::zeros(model.k(), model.q),
                b: vec![0.0; model.k()],
            },
        }
    }

    pub fn clear(&mut self) {
        for c in &mut self.cells {
            c.w.as_mut_slice().fill(0.0);
            c.u.as_mut_slice().fill(0.0);
            c.b.fill(0.0);
        }
        self.head.w.as_mut_slice().fill(0.0);
        self.head.b.fill(0.0);
    }

    /// Tensors in the same order as [`DvcModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.cells.len() + 2);
        for c in &self.cells {
            out.push(c.w.as_slice());
            out.push(c.u.as_slice());
            out.push(c.b.as_slice());
        }
        out.push(self.head.w.as_slice());
        out.push(self.head.b.as_slice());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

fn glorot(
    m: &mut Matrix,
    rows: std::ops::Range<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for r in rows {
        for v in m.row_mut(r) {
            *v = rng.uniform(-s, s);
        }
    }
}

/// Fresh model on `chain_prefix` (block ids of `partition`, in chain order).
///
/// Weights are Glorot-uniform per gate, biases zero except the forget gate at 1.
pub fn init_model(
    chain_prefix: &[usize],
    partition: &BlockPartition,
    classes: usize,
    state: StateSize,
    rng: &mut Rng,
) -> Result<DvcModel> {
    if chain_prefix.is_empty() {
        return Err(DvcError::EmptyChain);
    }
    if classes < 2 {
        return Err(DvcError::Config(format!(
            "need >= 2 classes, got {classes}"
        )));
    }
    let q = state.resolve(partition);
    if q == 0 {
        return Err(DvcError::Config("state size must be >= 1".into()));
    }
    let mut inputs = Vec::with_capacity(chain_prefix.len());
    let mut cells = Vec::with_capacity(chain_prefix.len());
    for &id in chain_prefix {
        if id >= partition.len() {
            return Err(DvcError::Partition(format!(
                "block id {id} out of range for {} blocks",
                partition.len()
            )));
        }
        let feats = partition.block(id).features.clone();
        let p_t = feats.len();
        let mut cell = CellParams::zeros(q, p_t);
        for g in 0..GATES {
            glorot(&mut cell.w, g * q..(g + 1) * q, q, q, rng);
            glorot(&mut cell.u, g * q..(g + 1) * q, p_t, q, rng);
        }
        cell.b[GATE_F * q..(GATE_F + 1) * q].fill(1.0);
        inputs.push(feats);
        cells.push(cell);
    }
    let mut head = SoftmaxHead {
        w: Matrix::zeros(classes, q),
        b: vec![0.0; classes],
    };
    glorot(&mut head.w, 0..classes, q, classes, rng);
    Ok(DvcModel {
        block_ids: chain_prefix.to_vec(),
        inputs,
        cells,
        head,
        q,
        partition: partition.clone(),
    })
}

impl DvcModel {
    /// Assembles a model from explicit parameters.
    pub fn from_parts(
        chain_prefix: &[usize],
        partition: &BlockPartition,
        cells: Vec<CellParams>,
        head: SoftmaxHead,
    ) -> Result<Self> {
        if chain_prefix.is_empty() {
            return Err(DvcError::EmptyChain);
        }
        if cells.len() != chain_prefix.len() {
            return Err(DvcError::Shape(format!(
                "{} cells for a chain of {}",
                cells.len(),
                chain_prefix.len()
            )));
        }
        let q = head.w.cols();
        if head.w.rows() < 2 || head.b.len() != head.w.rows() {
            return Err(DvcError::Shape(
                "head needs K >= 2 rows and K biases".into(),
            ));
        }
        let mut inputs = Vec::new();
        for (&id, cell) in chain_prefix.iter().zip(&cells) {
            cell.check()?;
            if id >= partition.len() {
                return Err(DvcError::Partition(format!("block id {id} out of range")));
            }
            let feats = &partition.block(id).features;
            if cell.q() != q || cell.input_dim() != feats.len() {
                return Err(DvcError::Shape(format!(
                    "cell for block {id}: q {} / p_t {}, expected {q} / {}",
                    cell.q(),
                    cell.input_dim(),
                    feats.len()
                )));
            }
            inputs.push(feats.clone());
        }
        Ok(Self {
            block_ids: chain_prefix.to_vec(),
            inputs,
            cells,
            head,
            q,
            partition: partition.clone(),
        })
    }

    pub fn block_ids(&self) -> &[usize] {
        &self.block_ids
    }

    pub fn cells(&self) -> &[CellParams] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [CellParams] {
        &mut self.cells
    }

    pub fn head(&self) -> &SoftmaxHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut SoftmaxHead {
        &mut self.head
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn k(&self) -> usize {
        self.head.w.rows()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Feature indices of cell `t`.
    pub fn cell_inputs(&self, t: usize) -> &[usize] {
        &self.inputs[t]
    }

    /// Every feature the model reads, in chain order.
    pub fn used_features(&self) -> Vec<usize> {
        self.inputs.concat()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: per cell `w`, `u`, `b`; then head `w`, `b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.cells.len() + 2);
        for c in &self.cells {
            out.push(c.w.as_slice());
            out.push(c.u.as_slice());
            out.push(c.b.as_slice());
        }
        out.push(self.head.w.as_slice());
        out.push(self.head.b.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.cells.len() + 2);
        for c in &mut self.cells {
            out.push(c.w.as_mut_slice());
            out.push(c.u.as_mut_slice());
            out.push(c.b.as_mut_slice());
        }
        out.push(self.head.w.as_mut_slice());
        out.push(self.head.b.as_mut_slice());
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DvcError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Squared Frobenius norm summed over all weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.w.frobenius_sq() + c.u.frobenius_sq())
            .sum::<f64>()
            + self.head.w.frobenius_sq()
    }

    /// Gathers the cell inputs from a full feature vector.
    pub fn gather(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.inputs.iter().map(Vec::len).sum());
        for feats in &self.inputs {
            for &f in feats {
                out.push(*x.get(f).ok_or(DvcError::FeatureIndex {
                    index: f,
                    features: x.len(),
                })?);
            }
        }
        Ok(out)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.inputs.len() + 1);
        off.push(0);
        for f in &self.inputs {
            off.push(off.last().unwrap() + f.len());
        }
        off
    }

    /// Forward pass from a full feature vector, no dropout.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let gathered = self.gather(x)?;
        let mut trace = ForwardTrace::default();
        self.forward_gathered(&gathered, None, &mut trace);
        Ok(trace)
    }

    /// Class posteriors for a full feature vector.
    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.posteriors)
    }

    /// Predicted class (ties to the lowest index).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.posteriors(x)?))
    }

    /// Forward pass on pre-gathered inputs, reusing `trace`'s buffers.
    pub(crate) fn forward_gathered(
        &self,
        x: &[f64],
        masks: Option<GateMasks>,
        trace: &mut ForwardTrace,
    ) {
        let q = self.q;
        let l = self.cells.len();
        trace.q = q;
        trace.x.clear();
        trace.x.extend_from_slice(x);
        if trace.x_offsets.len() != l + 1 {
            trace.x_offsets = self.offsets();
        }
        trace.gates.resize(l * GATES * q, 0.0);
        trace.c.resize((l + 1) * q, 0.0);
        trace.h.resize((l + 1) * q, 0.0);
        trace.tanh_c.resize(l * q, 0.0);
        trace.c[..q].fill(0.0);
        trace.h[..q].fill(0.0);
        trace.masks = masks;
        for t in 0..l {
            let (c_before, c_after) = trace.c.split_at_mut((t + 1) * q);
            let (h_before, h_after) = trace.h.split_at_mut((t + 1) * q);
            let masks = trace
                .masks
                .as_ref()
                .map(|m| (&m.input[t * q..(t + 1) * q], &m.output[t * q..(t + 1) * q]));
            step(
                &self.cells[t],
                &trace.x[trace.x_offsets[t]..trace.x_offsets[t + 1]],
                &h_before[t * q..],
                &c_before[t * q..],
                masks,
                &mut trace.gates[t * GATES * q..(t + 1) * GATES * q],
                &mut c_after[..q],
                &mut trace.tanh_c[t * q..(t + 1) * q],
                &mut h_after[..q],
            );
        }
        trace.posteriors.clear();
        trace.posteriors.extend_from_slice(&self.head.b);
        self.head
            .w
            .matvec_acc(&trace.h[l * q..], &mut trace.posteriors);
        softmax_in_place(&mut trace.posteriors).expect("head has K >= 2 outputs");
    }

    /// Adds `scale * d(cross-entropy)/d(params)` for the traced example into
    /// `grads` and returns the example's loss.
    pub(crate) fn backward_trace(
        &self,
        trace: &ForwardTrace,
        label: usize,
        scale: f64,
        grads: &mut Gradients,
        scratch: &mut BackwardScratch,
    ) -> f64 {
        let q = self.q;
        let l = self.cells.len();
        let k = self.k();
        let loss = cross_entropy(&trace.posteriors, label).expect("label checked by caller");

        scratch.resize(q, k);
        let BackwardScratch {
            dlogits,
            dh,
            dc,
            dz,
            dh_prev,
        } = scratch;
        for (j, (d, p)) in dlogits.iter_mut().zip(&trace.posteriors).enumerate() {
            *d = scale * (p - if j == label { 1.0 } else { 0.0 });
        }
        let h_last = &trace.h[l * q..];
        grads.head.w.rank1_acc(dlogits, h_last);
        for (g, d) in grads.head.b.iter_mut().zip(dlogits.iter()) {
            *g += d;
        }
        dh.fill(0.0);
        self.head.w.matvec_t_acc(dlogits, dh);
        dc.fill(0.0);

        for t in (0..l).rev() {
            let gates = &trace.gates[t * GATES * q..(t + 1) * GATES * q];
            let tc = &trace.tanh_c[t * q..(t + 1) * q];
            let c_prev = &trace.c[t * q..(t + 1) * q];
            let h_prev = &trace.h[t * q..(t + 1) * q];
            for j in 0..q {
                let (i, f, o, a) = (gates[j], gates[q + j], gates[2 * q + j], gates[3 * q + j]);
                let (mi, mo) = match &trace.masks {
                    Some(m) => (m.input[t * q + j], m.output[t * q + j]),
                    None => (1.0, 1.0),
                };
                let od = o * mo;
                let id = i * mi;
                let d_o = dh[j] * tc[j] * mo;
                let dcj = dc[j] + dh[j] * od * (1.0 - tc[j] * tc[j]);
                dz[j] = dcj * a * mi * i * (1.0 - i);
                dz[q + j] = dcj * c_prev[j] * f * (1.0 - f);
                dz[2 * q + j] = d_o * o * (1.0 - o);
                dz[3 * q + j] = dcj * id * (1.0 - a * a);
                dc[j] = dcj * f;
            }
            let cell = &self.cells[t];
            let g = &mut grads.cells[t];
            g.u.rank1_acc(dz, trace.x(t));
            for (gb, d) in g.b.iter_mut().zip(dz.iter()) {
                *gb += d;
            }
            if t > 0 {
                g.w.rank1_acc(dz, h_prev);
                dh_prev.fill(0.0);
                cell.w.matvec_t_acc(dz, dh_prev);
                std::mem::swap(dh, dh_prev);
            }
        }
        loss
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            block_ids: self.block_ids.clone(),
            q: self.q,
            classes: self.k(),
            gate_order: ["i", "f", "o", "a"].map(String::from).to_vec(),
            partition: self.partition.clone(),
            cells: self.cells.clone(),
            head: self.head.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(DvcError::Config(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        let m = Self::from_parts(&doc.block_ids, &doc.partition, doc.cells, doc.head)?;
        if m.q != doc.q || m.k() != doc.classes {
            return Err(DvcError::Shape(
                "model header disagrees with parameters".into(),
            ));
        }
        Ok(m)
    }
}

const MODEL_FORMAT: &str = "dvc-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    block_ids: Vec<usize>,
    q: usize,
    classes: usize,
    gate_order: Vec<String>,
    partition: BlockPartition,
    cells: Vec<CellParams>,
    head: SoftmaxHead,
}

/// Reusable buffers for [`DvcModel::backward_trace`].
#[derive(Debug, Default, Clone)]
pub(crate) struct BackwardScratch {
    dlogits: Vec<f64>,
    dh: Vec<f64>,
    dc: Vec<f64>,
    dz: Vec<f64>,
    dh_prev: Vec<f64>,
}

impl BackwardScratch {
    fn resize(&mut self, q: usize, k: usize) {
        self.dlogits.resize(k, 0.0);
        self.dh.resize(q, 0.0);
        self.dc.resize(q, 0.0);
        self.dz.resize(GATES * q, 0.0);
        self.dh_prev.resize(q, 0.0);
    }
}

/// Dropout on the input and output gates; `rate = 0` disables it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
}

/// Mean cross-entropy plus `l2 / 2 * sum ||W||^2` over a minibatch, and its gradient.
///
/// With dropout active, masks are drawn from `rng` per example and reused in
/// the backward pass.
pub fn backward(
    model: &DvcModel,
    batch: &[(&[f64], usize)],
    l2: f64,
    dropout: DropoutConfig,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let loss = backward_into(model, batch, l2, dropout, rng, &mut grads)?;
    Ok((loss, grads))
}

pub(crate) fn backward_into(
    model: &DvcModel,
    batch: &[(&[f64], usize)],
    l2: f64,
    dropout: DropoutConfig,
    rng: &mut Rng,
    grads: &mut Gradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DvcError::EmptyDataset);
    }
    let mut trace = ForwardTrace::default();
    let mut scratch = BackwardScratch::default();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(x, label) in batch {
        if label >= model.k() {
            return Err(DvcError::LabelOutOfRange {
                label,
                classes: model.k(),
            });
        }
        let gathered = model.gather(x)?;
        let masks = (dropout.rate > 0.0)
            .then(|| GateMasks::sample(model.len(), model.q, dropout.rate, rng));
        model.forward_gathered(&gathered, masks, &mut trace);
        loss += scale * model.backward_trace(&trace, label, scale, grads, &mut scratch);
    }
    if l2 > 0.0 {
        add_l2(model, l2, grads);
        loss += 0.5 * l2 * model.weight_norm_sq();
    }
    Ok(loss)
}

pub(crate) fn add_l2(model: &DvcModel, l2: f64, grads: &mut Gradients) {
    for (g, c) in grads.cells.iter_mut().zip(&model.cells) {
        crate::numerics::axpy(l2, c.w.as_slice(), g.w.as_mut_slice());
        crate::numerics::axpy(l2, c.u.as_slice(), g.u.as_mut_slice());
    }
    crate::numerics::axpy(l2, model.head.w.as_slice(), grads.head.w.as_mut_slice());
}

/// Mean penalized loss without gradients; the objective [`backward`] differentiates.
pub fn batch_loss(
    model: &DvcModel,
    batch: &[(&[f64], usize)],
    l2: f64,
    masks: Option<&[GateMasks]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DvcError::EmptyDataset);
    }
    let mut trace = ForwardTrace::default();
    let mut loss = 0.0;
    for (n, &(x, label)) in batch.iter().enumerate() {
        let gathered = model.gather(x)?;
        model.forward_gathered(&gathered, masks.map(|m| m[n].clone()), &mut trace);
        loss += cross_entropy(&trace.posteriors, label)?;
    }
    Ok(loss / batch.len() as f64 + 0.5 * l2 * model.weight_norm_sq())
}

/// Gradient with caller-fixed dropout masks (one per example); used to check
/// the masked backward pass against finite differences.
pub fn backward_with_masks(
    model: &DvcModel,
    batch: &[(&[f64], usize)],
    l2: f64,
    masks: &[GateMasks],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() || masks.len() != batch.len() {
        return Err(DvcError::Shape("one mask set per example required".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut trace = ForwardTrace::default();
    let mut scratch = BackwardScratch::default();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (&(x, label), m) in batch.iter().zip(masks) {
        let gathered = model.gather(x)?;
        model.forward_gathered(&gathered, Some(m.clone()), &mut trace);
        loss += scale * model.backward_trace(&trace, label, scale, &mut grads, &mut scratch);
    }
    if l2 > 0.0 {
        add_l2(model, l2, &mut grads);
        loss += 0.5 * l2 * model.weight_norm_sq();
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn partition(sizes: &[usize]) -> BlockPartition {
        let mut blocks = Vec::new();
        let mut next = 0;
        for &s in sizes {
            blocks.push((next..next + s).collect());
            next += s;
        }
        BlockPartition::new(blocks, next).unwrap()
    }

    fn random_x(p: usize, rng: &mut Rng) -> Vec<f64> {
        (0..p).map(|_| rng.normal()).collect()
    }

    #[test]
    fn state_size_rule() {
        let mut rng = Rng::new(0);
        let m = init_model(&[0], &partition(&[5, 8]), 2, StateSize::MinBlock, &mut rng).unwrap();
        assert_eq!(m.q(), 5);
        let m = init_model(
            &[0, 1],
            &partition(&[30, 40]),
            3,
            StateSize::MinBlock,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.q(), 20);
        assert!(matches!(
            init_model(&[], &partition(&[3]), 2, StateSize::MinBlock, &mut rng),
            Err(DvcError::EmptyChain)
        ));
        assert!(init_model(&[0], &partition(&[3]), 1, StateSize::MinBlock, &mut rng).is_err());
    }

    #[test]
    fn init_is_deterministic_with_forget_bias() {
        let part = partition(&[4, 4]);
        let a = init_model(&[1, 0], &part, 3, StateSize::MinBlock, &mut Rng::new(9)).unwrap();
        let b = init_model(&[1, 0], &part, 3, StateSize::MinBlock, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let q = a.q();
        for c in a.cells() {
            assert!(c.b[..q].iter().all(|&v| v == 0.0));
            assert!(c.b[q..2 * q].iter().all(|&v| v == 1.0));
            assert!(c.b[2 * q..].iter().all(|&v| v == 0.0));
            let s = (6.0 / (2 * q) as f64).sqrt();
            assert!(c.w.as_slice().iter().all(|v| v.abs() <= s));
        }
    }

    #[test]
    fn zero_weight_cell() {
        let cell = CellParams::zeros(3, 2);
        let c_prev = [0.4, -1.0, 2.0];
        let out = cell_forward(&cell, &[1.0, -1.0], &[0.3, 0.2, 0.1], &c_prev).unwrap();
        for j in 0..3 {
            assert_eq!(out.i[j], 0.5);
            assert_eq!(out.f[j], 0.5);
            assert_eq!(out.o[j], 0.5);
            assert_eq!(out.a[j], 0.0);
            assert_eq!(out.c[j], 0.5 * c_prev[j]);
            assert_eq!(out.h[j], 0.5 * (0.5 * c_prev[j]).tanh());
        }
    }

    #[test]
    fn saturated_gates_pass_memory_through() {
        let mut cell = CellParams::zeros(2, 1);
        cell.b[0..2].fill(-50.0); // input gate closed
        cell.b[2..4].fill(50.0); // forget gate open
        let c_prev = [0.7, -0.3];
        let out = cell_forward(&cell, &[2.0], &[0.1, 0.9], &c_prev).unwrap();
        for j in 0..2 {
            assert!((out.c[j] - c_prev[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_cell_by_hand() {
        let mut cell = CellParams::zeros(1, 1);
        cell.w.as_mut_slice().fill(1.0);
        cell.u.as_mut_slice().fill(1.0);
        let out = cell_forward(&cell, &[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(
            (out.i[0], out.f[0], out.o[0], out.a[0]),
            (0.5, 0.5, 0.5, 0.0)
        );
        assert_eq!(out.c[0], 0.5);
        assert_eq!(out.h[0], 0.5 * 0.5f64.tanh());
        assert!(cell_forward(&cell, &[0.0, 1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn forward_contract() {
        let part = partition(&[3, 2, 4]);
        let mut rng = Rng::new(4);
        let mut m = init_model(&[2, 0], &part, 3, StateSize::MinBlock, &mut rng).unwrap();
        for _ in 0..10 {
            let x = random_x(9, &mut rng);
            let tr = m.forward(&x).unwrap();
            assert!((tr.posteriors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for t in 0..tr.cells() {
                for g in [tr.input_gate(t), tr.forget_gate(t), tr.output_gate(t)] {
                    assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
                }
                assert!(tr.proposal(t).iter().all(|v| v.abs() < 1.0));
                assert!(tr.hidden(t).iter().all(|v| v.is_finite()));
            }
        }
        assert!(matches!(
            m.forward(&[0.0; 4]),
            Err(DvcError::FeatureIndex { .. })
        ));
        m.head_mut().w.as_mut_slice().fill(0.0);
        let tr = m.forward(&random_x(9, &mut rng)).unwrap();
        for p in tr.posteriors {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell_chain_equals_cell_then_head() {
        let part = partition(&[2, 3]);
        let mut rng = Rng::new(8);
        let m = init_model(&[1], &part, 2, StateSize::MinBlock, &mut rng).unwrap();
        let x = random_x(5, &mut rng);
        let q = m.q();
        let out = cell_forward(&m.cells()[0], &x[2..5], &vec![0.0; q], &vec![0.0; q]).unwrap();
        let mut logits = m.head().b.clone();
        m.head().w.matvec_acc(&out.h, &mut logits);
        let expect = crate::numerics::softmax(&logits).unwrap();
        assert_eq!(m.posteriors(&x).unwrap(), expect);
    }

    #[test]
    fn features_outside_the_chain_are_ignored() {
        let part = partition(&[2, 2, 2]);
        let mut rng = Rng::new(3);
        let m = init_model(&[2, 0], &part, 2, StateSize::MinBlock, &mut rng).unwrap();
        let mut x = random_x(6, &mut rng);
        let before = m.posteriors(&x).unwrap();
        x[2] += 100.0;
        x[3] -= 7.0;
        assert_eq!(m.posteriors(&x).unwrap(), before);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let part = partition(&[3, 4]);
        let mut rng = Rng::new(21);
        let m = init_model(&[0, 1], &part, 3, StateSize::Fixed(3), &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_x(7, &mut rng)).collect();
        let batch: Vec<(&[f64], usize)> = xs
            .iter()
            .zip([0, 2, 1, 2])
            .map(|(x, y)| (x.as_slice(), y))
            .collect();
        for l2 in [0.0, 0.05] {
            let (loss, g) =
                backward(&m, &batch, l2, DropoutConfig::default(), &mut Rng::new(0)).unwrap();
            assert!((loss - batch_loss(&m, &batch, l2, None).unwrap()).abs() < 1e-12);
            let mut probe = m.clone();
            let num = finite_diff_grad(
                |th| {
                    probe.set_flat_params(th).unwrap();
                    batch_loss(&probe, &batch, l2, None).unwrap()
                },
                &m.flat_params(),
                1e-5,
            );
            let ana = g.flatten();
            let worst = ana
                .iter()
                .zip(&num)
                .map(|(a, b)| rel_err(*a, *b))
                .fold(0.0, f64::max);
            assert!(worst < 1e-4, "l2 = {l2}: max rel err {worst}");
        }
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        let part = partition(&[2, 3, 2]);
        let mut rng = Rng::new(5);
        let m = init_model(&[1, 2, 0], &part, 2, StateSize::Fixed(2), &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_x(7, &mut rng)).collect();
        let batch: Vec<(&[f64], usize)> = xs
            .iter()
            .zip([1, 0, 1])
            .map(|(x, y)| (x.as_slice(), y))
            .collect();
        let masks: Vec<GateMasks> = (0..3)
            .map(|_| GateMasks::sample(3, 2, 0.3, &mut rng))
            .collect();
        let (_, g) = backward_with_masks(&m, &batch, 0.0, &masks).unwrap();
        let mut probe = m.clone();
        let num = finite_diff_grad(
            |th| {
                probe.set_flat_params(th).unwrap();
                batch_loss(&probe, &batch, 0.0, Some(&masks)).unwrap()
            },
            &m.flat_params(),
            1e-5,
        );
        let worst = g
            .flatten()
            .iter()
            .zip(&num)
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn l2_adds_exactly_l2_times_weights() {
        let part = partition(&[3, 3]);
        let mut rng = Rng::new(2);
        let m = init_model(&[0, 1], &part, 2, StateSize::MinBlock, &mut rng).unwrap();
        let x = random_x(6, &mut rng);
        let batch = [(x.as_slice(), 1)];
        let (_, g0) =
            backward(&m, &batch, 0.0, DropoutConfig::default(), &mut Rng::new(0)).unwrap();
        let (_, g1) =
            backward(&m, &batch, 0.1, DropoutConfig::default(), &mut Rng::new(0)).unwrap();
        for t in 0..2 {
            for (pair, w) in [
                (
                    g0.cells[t]
                        .w
                        .as_slice()
                        .iter()
                        .zip(g1.cells[t].w.as_slice()),
                    m.cells()[t].w.as_slice(),
                ),
                (
                    g0.cells[t]
                        .u
                        .as_slice()
                        .iter()
                        .zip(g1.cells[t].u.as_slice()),
                    m.cells()[t].u.as_slice(),
                ),
            ] {
                for ((a, b), w) in pair.zip(w) {
                    assert!((b - a - 0.1 * w).abs() < 1e-15);
                }
            }
            assert_eq!(g0.cells[t].b, g1.cells[t].b);
        }
        assert_eq!(g0.head.b, g1.head.b);
    }

    #[test]
    fn duplicated_example_matches_single() {
        let part = partition(&[2, 2]);
        let mut rng = Rng::new(6);
        let m = init_model(&[1, 0], &part, 2, StateSize::MinBlock, &mut rng).unwrap();
        let x = random_x(4, &mut rng);
        let (l1, g1) = backward(
            &m,
            &[(x.as_slice(), 0)],
            0.0,
            DropoutConfig::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        let (l2, g2) = backward(
            &m,
            &[(x.as_slice(), 0), (x.as_slice(), 0)],
            0.0,
            DropoutConfig::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let part = partition(&[3, 2]);
        let mut rng = Rng::new(12);
        let m = init_model(&[1, 0], &part, 2, StateSize::MinBlock, &mut rng).unwrap();
        let back = DvcModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let x = random_x(5, &mut rng);
        let a = m.posteriors(&x).unwrap();
        let b = back.posteriors(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    mod props {
        use super::super::*;
        use crate::numerics::finite_diff_grad;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn random_small_models_pass_gradient_check(
                seed in any::<u64>(),
                l in 1usize..=3,
                q in 1usize..=5,
                k in 2usize..=4,
                sizes in prop::collection::vec(1usize..=6, 3),
            ) {
                let mut blocks = Vec::new();
                let mut next = 0;
                for &s in &sizes { blocks.push((next..next + s).collect()); next += s; }
                let part = BlockPartition::new(blocks, next).unwrap();
                let mut rng = Rng::new(seed);
                let prefix: Vec<usize> = (0..l).collect();
                let m = init_model(&prefix, &part, k, StateSize::Fixed(q), &mut rng).unwrap();
                let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..next).map(|_| rng.normal()).collect()).collect();
                let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % k)).collect();
                let (_, g) = backward(&m, &batch, 0.0, DropoutConfig::default(), &mut rng).unwrap();
                let mut probe = m.clone();
                let num = finite_diff_grad(|th| {
                    probe.set_flat_params(th).unwrap();
                    batch_loss(&probe, &batch, 0.0, None).unwrap()
                }, &m.flat_params(), 1e-5);
                for (a, b) in g.flatten().iter().zip(&num) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                    prop_assert!(rel < 1e-4, "{} vs {}", a, b);
                }
            }
        }
    }
}
