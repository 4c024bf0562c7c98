//! End-to-end refinement of all circuit parameters by maximizing the
//! conditional log-likelihood.
//!
//! Constant gates are trained through unconstrained logits `ln w` and
//! written back as `softmax(logits)`, Gaussian variances through their
//! logarithm. Gradients come from one reverse pass over the cached forward
//! values: a product passes its adjoint to every child, a gating node
//! passes `adjoint * r_k` to child `k` where `r_k` is the child's posterior
//! responsibility, and the gate parameters receive
//! `adjoint * (r_k - g_k)` per logit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::circuit::{Circuit, CircuitError, GatingFunction, NodeId, NodeKind};
use crate::data::{shuffle, Dataset};
use crate::leaves::{Family, DISPERSION_FLOOR};
use crate::math::{self, exp, log, log_sum_exp, sqrt, WEIGHT_FLOOR};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("non-finite gradient at node {node}")]
    NanGradient { node: NodeId },
    #[error("training diverged at epoch {epoch}: train CLL {train_cll} fell more than {limit} nats below the initial {initial}")]
    Diverged { epoch: usize, train_cll: f64, initial: f64, limit: f64 },
    #[error("invalid optimizer settings: {0}")]
    Control(String),
    #[error("data does not match the circuit: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    LeafCoeffs,
    LeafLogDispersion,
    GateLogits,
    GateCoeffs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub node: NodeId,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
}

/// All trainable parameters of a circuit as one flat vector. Blocks follow
/// node-id order; a leaf's coefficients are immediately followed by its log
/// variance when it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Vec<ParamBlock>,
    /// Offset of each node's first parameter (`usize::MAX` for products).
    node_offset: Vec<usize>,
}

impl ParamVector {
    pub fn from_circuit(c: &Circuit) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        let mut node_offset = vec![usize::MAX; c.nodes().len()];
        let mut push = |node: NodeId, role: ParamRole, vals: &[f64], values: &mut Vec<f64>| {
            layout.push(ParamBlock { node, role, offset: values.len(), len: vals.len() });
            values.extend_from_slice(vals);
        };
        for (id, node) in c.nodes().iter().enumerate() {
            match &node.kind {
                NodeKind::Product(_) => {}
                NodeKind::Leaf(leaf) => {
                    node_offset[id] = values.len();
                    push(id, ParamRole::LeafCoeffs, leaf.coeffs(), &mut values);
                    if leaf.family() == Family::Gaussian {
                        push(id, ParamRole::LeafLogDispersion, &[log(leaf.dispersion())], &mut values);
                    }
                }
                NodeKind::Gating { gate, .. } => {
                    node_offset[id] = values.len();
                    match gate {
                        GatingFunction::Constant(w) => {
                            let logits: Vec<f64> = w.iter().map(|&wk| log(wk.max(WEIGHT_FLOOR))).collect();
                            push(id, ParamRole::GateLogits, &logits, &mut values);
                        }
                        GatingFunction::Softmax { coeffs, .. } => push(id, ParamRole::GateCoeffs, coeffs, &mut values),
                    }
                }
            }
        }
        ParamVector { values, layout, node_offset }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector { values: vec![0.0; self.values.len()], layout: self.layout.clone(), node_offset: self.node_offset.clone() }
    }

    pub fn norm(&self) -> f64 {
        sqrt(math::dot(&self.values, &self.values))
    }

    /// Clamps every log variance to the dispersion floor.
    pub fn project(&mut self) {
        let floor = log(DISPERSION_FLOOR);
        for b in &self.layout {
            if b.role == ParamRole::LeafLogDispersion {
                let v = &mut self.values[b.offset];
                *v = v.max(floor);
            }
        }
    }

    /// Writes the parameters into `c`, which must have the layout this
    /// vector was built from.
    pub fn write_to(&self, c: &mut Circuit) {
        for (id, &off) in self.node_offset.iter().enumerate() {
            if off == usize::MAX {
                continue;
            }
            match &mut c.node_mut(id).kind {
                NodeKind::Product(_) => {}
                NodeKind::Leaf(leaf) => {
                    let n = leaf.num_params();
                    leaf.set_params(&self.values[off..off + n]);
                }
                NodeKind::Gating { gate, .. } => match gate {
                    GatingFunction::Constant(w) => {
                        let k = w.len();
                        *w = math::softmax(&self.values[off..off + k]);
                    }
                    GatingFunction::Softmax { coeffs, .. } => {
                        let n = coeffs.len();
                        coeffs.copy_from_slice(&self.values[off..off + n]);
                    }
                },
            }
        }
    }
}

/// Reusable per-point buffers.
struct Workspace {
    values: Vec<f64>,
    adjoint: Vec<f64>,
    /// Log gate weights of every gating node, at `gate_at[id]`.
    log_weights: Vec<f64>,
    gate_at: Vec<usize>,
}

impl Workspace {
    fn new(c: &Circuit) -> Self {
        let mut gate_at = vec![usize::MAX; c.nodes().len()];
        let mut total = 0;
        for (id, node) in c.nodes().iter().enumerate() {
            if let NodeKind::Gating { children, .. } = &node.kind {
                gate_at[id] = total;
                total += children.len();
            }
        }
        Workspace { values: vec![0.0; c.nodes().len()], adjoint: vec![0.0; c.nodes().len()], log_weights: vec![0.0; total], gate_at }
    }
}

/// Adds `scale * d log P(y|x) / d theta` into `grad` and returns
/// `log P(y|x)`.
fn point_grad(c: &Circuit, y: &[f64], x: &[f64], scale: f64, ws: &mut Workspace, grad: &mut ParamVector) -> Result<f64, OptError> {
    for &id in c.order() {
        let node = c.node(id);
        let v = match &node.kind {
            NodeKind::Leaf(leaf) => {
                let ld = leaf
                    .log_density(y[node.scope.vars()[0]], x)
                    .map_err(|source| CircuitError::Leaf { node: id, source })?;
                if !ld.is_finite() {
                    return Err(CircuitError::Numeric { node: id, what: format!("leaf log-density {ld}") }.into());
                }
                ld
            }
            NodeKind::Product(children) => children.iter().map(|&ch| ws.values[ch]).sum(),
            NodeKind::Gating { children, gate } => {
                let lw = gate.log_weights(x);
                let at = ws.gate_at[id];
                ws.log_weights[at..at + lw.len()].copy_from_slice(&lw);
                let terms: Vec<f64> = children.iter().zip(&lw).map(|(&ch, w)| w + ws.values[ch]).collect();
                let v = log_sum_exp(&terms);
                if !v.is_finite() {
                    return Err(CircuitError::Numeric { node: id, what: format!("gating value {v}") }.into());
                }
                v
            }
        };
        ws.values[id] = v;
        ws.adjoint[id] = 0.0;
    }
    let root = c.root();
    ws.adjoint[root] = scale;
    let nx = x.len();
    for &id in c.order().iter().rev() {
        let a = ws.adjoint[id];
        if a == 0.0 {
            continue;
        }
        let node = c.node(id);
        let off = grad.node_offset[id];
        match &node.kind {
            NodeKind::Leaf(leaf) => {
                let n = leaf.num_params();
                leaf.accumulate_grad(y[node.scope.vars()[0]], x, a, &mut grad.values[off..off + n]);
            }
            NodeKind::Product(children) => {
                for &ch in children {
                    ws.adjoint[ch] += a;
                }
            }
            NodeKind::Gating { children, gate } => {
                let at = ws.gate_at[id];
                let v = ws.values[id];
                for (k, &ch) in children.iter().enumerate() {
                    let lw = ws.log_weights[at + k];
                    let resp = exp(lw + ws.values[ch] - v);
                    ws.adjoint[ch] += a * resp;
                    let d = a * (resp - exp(lw));
                    match gate {
                        GatingFunction::Constant(_) => grad.values[off + k] += d,
                        GatingFunction::Softmax { .. } => {
                            let row = &mut grad.values[off + k * (nx + 1)..off + (k + 1) * (nx + 1)];
                            for (g, xj) in row[..nx].iter_mut().zip(x) {
                                *g += d * xj;
                            }
                            row[nx] += d;
                        }
                    }
                }
            }
        }
    }
    Ok(ws.values[root])
}

fn check_data(c: &Circuit, data: &Dataset) -> Result<(), OptError> {
    if data.num_y() != c.num_y() || data.num_x() != c.num_x() {
        return Err(OptError::Data(format!(
            "dataset has {} targets and {} features, circuit {} and {}",
            data.num_y(),
            data.num_x(),
            c.num_y(),
            c.num_x()
        )));
    }
    Ok(())
}

fn first_nan(grad: &ParamVector) -> Option<NodeId> {
    grad.layout.iter().find(|b| grad.values[b.offset..b.offset + b.len].iter().any(|v| !v.is_finite())).map(|b| b.node)
}

/// Mean conditional log-likelihood over `rows` and its gradient.
pub fn cll_and_grad(c: &Circuit, data: &Dataset, rows: &[usize]) -> Result<(f64, ParamVector), OptError> {
    check_data(c, data)?;
    let mut grad = ParamVector::from_circuit(c).zeros_like();
    let mut ws = Workspace::new(c);
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for &r in rows {
        total += point_grad(c, data.y_row(r), data.x_row(r), scale, &mut ws, &mut grad)?;
    }
    if let Some(node) = first_nan(&grad) {
        return Err(OptError::NanGradient { node });
    }
    Ok((total * scale, grad))
}

/// Gradient of `log P(y | x)` at a single point.
pub fn point_cll_and_grad(c: &Circuit, y: &[f64], x: &[f64]) -> Result<(f64, ParamVector), OptError> {
    if y.len() != c.num_y() || x.len() != c.num_x() {
        return Err(OptError::Data("point dimensions do not match the circuit".into()));
    }
    let mut grad = ParamVector::from_circuit(c).zeros_like();
    let mut ws = Workspace::new(c);
    let v = point_grad(c, y, x, 1.0, &mut ws, &mut grad)?;
    if let Some(node) = first_nan(&grad) {
        return Err(OptError::NanGradient { node });
    }
    Ok((v, grad))
}

/// Mean conditional log-likelihood without gradients.
pub fn mean_cll(c: &Circuit, data: &Dataset) -> Result<f64, OptError> {
    check_data(c, data)?;
    let mut s = 0.0;
    for r in 0..data.n_rows() {
        s += c.log_density_of(data.y_row(r), data.x_row(r))?;
    }
    Ok(s / data.n_rows().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptControl {
    pub step: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Abort when train CLL falls this many nats below its initial value.
    pub divergence_nats: f64,
}

impl Default for OptControl {
    fn default() -> Self {
        OptControl {
            step: 1e-2,
            batch: 128,
            epochs: 100,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            divergence_nats: 10.0,
        }
    }
}

impl OptControl {
    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.step > 0.0) || self.batch == 0 {
            return Err(OptError::Control(format!("step {} and batch {} must be positive", self.step, self.batch)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(OptError::Control("moment decay rates must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_cll: f64,
    pub valid_cll: f64,
    /// Mean minibatch gradient norm.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub initial_train_cll: f64,
    pub initial_valid_cll: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned; 0 is the initialization.
    pub best_epoch: usize,
    pub best_valid_cll: f64,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, ctrl: &OptControl) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(ctrl.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(ctrl.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad.values[i];
            self.m[i] = ctrl.beta1 * self.m[i] + (1.0 - ctrl.beta1) * g;
            self.v[i] = ctrl.beta2 * self.v[i] + (1.0 - ctrl.beta2) * g * g;
            params.values[i] += ctrl.step * (self.m[i] / bc1) / (sqrt(self.v[i] / bc2) + ctrl.eps);
        }
        params.project();
    }
}

/// One pass over `rows` in a seeded order. Returns the mean minibatch
/// gradient norm.
fn run_epoch(
    current: &mut Circuit,
    params: &mut ParamVector,
    adam: &mut Adam,
    data: &Dataset,
    rows: &mut [usize],
    epoch: usize,
    ctrl: &OptControl,
) -> Result<f64, OptError> {
    shuffle(rows, &mut rng::stream(ctrl.seed, &[epoch as u64]));
    let mut norm_sum = 0.0;
    let mut batches = 0;
    for batch in rows.chunks(ctrl.batch) {
        let (_, grad) = cll_and_grad(current, data, batch)?;
        norm_sum += grad.norm();
        batches += 1;
        adam.step(params, &grad, ctrl);
        params.write_to(current);
    }
    Ok(norm_sum / batches.max(1) as f64)
}

/// Trains with Adam on seeded shuffled minibatches and returns the
/// parameters of the epoch with the best validation CLL (the training CLL
/// when `valid` is empty).
pub fn train(c: &Circuit, train_data: &Dataset, valid: &Dataset, ctrl: &OptControl) -> Result<(Circuit, TrainLog), OptError> {
    train_with_clock(c, train_data, valid, ctrl, &mut || 0.0)
}

/// As [`train`]; `clock` returns seconds since an arbitrary origin and
/// times each epoch.
pub fn train_with_clock(
    c: &Circuit,
    train_data: &Dataset,
    valid: &Dataset,
    ctrl: &OptControl,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(Circuit, TrainLog), OptError> {
    ctrl.validate()?;
    check_data(c, train_data)?;
    if train_data.n_rows() == 0 {
        return Err(OptError::Data("empty training set".into()));
    }
    let has_valid = valid.n_rows() > 0;
    if has_valid {
        check_data(c, valid)?;
    }
    let mut current = c.clone();
    let mut params = ParamVector::from_circuit(c);
    let mut adam = Adam::new(params.len());

    let initial_train = mean_cll(&current, train_data)?;
    let initial_valid = if has_valid { mean_cll(&current, valid)? } else { initial_train };
    let mut log = TrainLog {
        initial_train_cll: initial_train,
        initial_valid_cll: initial_valid,
        best_valid_cll: initial_valid,
        ..TrainLog::default()
    };
    let mut best = current.clone();
    let mut since_best = 0;
    let mut rows: Vec<usize> = (0..train_data.n_rows()).collect();
    for epoch in 1..=ctrl.epochs {
        let start = clock();
        let grad_norm = run_epoch(&mut current, &mut params, &mut adam, train_data, &mut rows, epoch, ctrl)?;
        let train_cll = mean_cll(&current, train_data)?;
        let valid_cll = if has_valid { mean_cll(&current, valid)? } else { train_cll };
        log.epochs.push(EpochLog { epoch, train_cll, valid_cll, grad_norm, seconds: clock() - start });
        if !(train_cll >= initial_train - ctrl.divergence_nats) {
            return Err(OptError::Diverged { epoch, train_cll, initial: initial_train, limit: ctrl.divergence_nats });
        }
        if valid_cll > log.best_valid_cll {
            log.best_valid_cll = valid_cll;
            log.best_epoch = epoch;
            best = current.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= ctrl.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

/// Retrains from `c` on the union of both sets for exactly `epochs` epochs
/// (typically the best epoch found by [`train`]) and keeps the final
/// parameters.
pub fn refit_on_union(c: &Circuit, train_data: &Dataset, valid: &Dataset, epochs: usize, ctrl: &OptControl) -> Result<Circuit, OptError> {
    ctrl.validate()?;
    let union = train_data.concat(valid).map_err(|e| OptError::Data(format!("{e}")))?;
    check_data(c, &union)?;
    let mut current = c.clone();
    let mut params = ParamVector::from_circuit(c);
    let mut adam = Adam::new(params.len());
    let mut rows: Vec<usize> = (0..union.n_rows()).collect();
    for epoch in 1..=epochs {
        run_epoch(&mut current, &mut params, &mut adam, &union, &mut rows, epoch, ctrl)?;
    }
    Ok(current)
}
