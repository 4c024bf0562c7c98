//! Conditional sum-product networks as an id-indexed node table.
//!
//! A circuit encodes `P(Y | X)` with three node kinds: univariate GLM
//! leaves, decomposable products and complete gating nodes whose mixing
//! weights are a normalized function of `x`. For a fixed `x` the circuit is
//! an ordinary sum-product network over `Y`, so densities, marginals and
//! max-product decoding are single passes over a precomputed topological
//! order, all carried out in log space.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng as _, RngCore};

use crate::leaves::{GlmLeaf, LeafError};
use crate::math::{self, log, log_sum_exp, WEIGHT_FLOOR};
use crate::rng;

pub type NodeId = usize;

/// Sorted, duplicate-free set of target-variable indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Scope(Vec<usize>);

impl Scope {
    pub fn new(vars: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = vars.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Scope(v)
    }

    pub fn single(var: usize) -> Self {
        Scope(vec![var])
    }

    pub fn vars(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    pub fn union<'a>(scopes: impl IntoIterator<Item = &'a Scope>) -> Scope {
        Scope::new(scopes.into_iter().flat_map(|s| s.0.iter().copied()))
    }
}

/// Normalized nonnegative map from `x` to the mixing weights of a gating
/// node.
#[derive(Debug, Clone, PartialEq)]
pub enum GatingFunction {
    /// Input-independent weights (a plain sum node).
    Constant(Vec<f64>),
    /// Multinomial logistic regression: `k` rows of `num_x + 1`
    /// coefficients (intercept last), row-major.
    Softmax { k: usize, coeffs: Vec<f64> },
}

impl GatingFunction {
    pub fn arity(&self) -> usize {
        match self {
            GatingFunction::Constant(w) => w.len(),
            GatingFunction::Softmax { k, .. } => *k,
        }
    }

    /// Feature dimension expected by a softmax gate.
    pub fn num_x(&self) -> Option<usize> {
        match self {
            GatingFunction::Constant(_) => None,
            GatingFunction::Softmax { k, coeffs } => (*k > 0).then(|| coeffs.len() / k - 1),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GatingFunction::Constant(w) => w.iter().map(|&wk| log(wk.max(WEIGHT_FLOOR))).collect(),
            GatingFunction::Softmax { k, coeffs } => {
                let p = x.len() + 1;
                (0..*k)
                    .map(|r| {
                        let c = &coeffs[r * p..(r + 1) * p];
                        math::dot(&c[..x.len()], x) + c[x.len()]
                    })
                    .collect()
            }
        }
    }

    /// Log mixing weights with each weight clamped to at least `1e-300`.
    pub fn log_weights(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GatingFunction::Constant(w) => w.iter().map(|&wk| log(wk.max(WEIGHT_FLOOR))).collect(),
            GatingFunction::Softmax { .. } => {
                let floor = log(WEIGHT_FLOOR);
                math::log_softmax(&self.logits(x)).into_iter().map(|l| l.max(floor)).collect()
            }
        }
    }

    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GatingFunction::Constant(w) => w.clone(),
            GatingFunction::Softmax { .. } => math::softmax(&self.logits(x)),
        }
    }

    fn check(&self, num_x: usize) -> Result<(), String> {
        match self {
            GatingFunction::Constant(w) => {
                if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err("constant weights must be finite and nonnegative".into());
                }
                let s: f64 = w.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(format!("constant weights sum to {s}, not 1"));
                }
            }
            GatingFunction::Softmax { k, coeffs } => {
                if coeffs.len() != k * (num_x + 1) {
                    return Err(format!(
                        "softmax gate has {} coefficients, expected {} x {}",
                        coeffs.len(),
                        k,
                        num_x + 1
                    ));
                }
                if coeffs.iter().any(|c| !c.is_finite()) {
                    return Err("non-finite softmax coefficient".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf(GlmLeaf),
    Product(Vec<NodeId>),
    Gating { children: Vec<NodeId>, gate: GatingFunction },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub scope: Scope,
    pub kind: NodeKind,
}

impl Node {
    pub fn leaf(var: usize, leaf: GlmLeaf) -> Self {
        Node { scope: Scope::single(var), kind: NodeKind::Leaf(leaf) }
    }

    pub fn product(scope: Scope, children: Vec<NodeId>) -> Self {
        Node { scope, kind: NodeKind::Product(children) }
    }

    pub fn gating(scope: Scope, children: Vec<NodeId>, gate: GatingFunction) -> Self {
        Node { scope, kind: NodeKind::Gating { children, gate } }
    }

    pub fn children(&self) -> &[NodeId] {
        match &self.kind {
            NodeKind::Leaf(_) => &[],
            NodeKind::Product(c) => c,
            NodeKind::Gating { children, .. } => children,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            NodeKind::Leaf(_) => "leaf",
            NodeKind::Product(_) => "product",
            NodeKind::Gating { .. } => "gating",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RootOutOfRange { root: NodeId },
    DanglingChild { node: NodeId, child: NodeId },
    Cycle { node: NodeId },
    Unreachable { node: NodeId },
    NoChildren { node: NodeId },
    EmptyScope { node: NodeId },
    ScopeUnion { node: NodeId },
    Decomposability { node: NodeId, var: usize },
    Completeness { node: NodeId, child: NodeId },
    GateArity { node: NodeId, expected: usize, found: usize },
    InvalidGate { node: NodeId, reason: String },
    LeafScope { node: NodeId },
    LeafDimension { node: NodeId, expected: usize, found: usize },
    VariableOutOfRange { node: NodeId, var: usize },
    RootScope { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RootOutOfRange { root } => write!(f, "root id {root} does not exist"),
            Violation::DanglingChild { node, child } => write!(f, "node {node}: child id {child} does not exist"),
            Violation::Cycle { node } => write!(f, "node {node}: cycle"),
            Violation::Unreachable { node } => write!(f, "node {node}: not reachable from the root"),
            Violation::NoChildren { node } => write!(f, "node {node}: internal node without children"),
            Violation::EmptyScope { node } => write!(f, "node {node}: empty scope"),
            Violation::ScopeUnion { node } => write!(f, "node {node}: scope is not the union of its children's scopes"),
            Violation::Decomposability { node, var } => {
                write!(f, "node {node}: product children overlap on variable {var} (decomposability)")
            }
            Violation::Completeness { node, child } => {
                write!(f, "node {node}: child {child} has a different scope (completeness)")
            }
            Violation::GateArity { node, expected, found } => {
                write!(f, "node {node}: gate has {found} outputs for {expected} children")
            }
            Violation::InvalidGate { node, reason } => write!(f, "node {node}: {reason}"),
            Violation::LeafScope { node } => write!(f, "node {node}: leaf scope must hold exactly one variable"),
            Violation::LeafDimension { node, expected, found } => {
                write!(f, "node {node}: leaf expects {found} features, circuit has {expected}")
            }
            Violation::VariableOutOfRange { node, var } => write!(f, "node {node}: variable {var} out of range"),
            Violation::RootScope { expected, found } => {
                write!(f, "root scope covers {found} of {expected} target variables")
            }
        }
    }
}

impl Violation {
    /// The node the violation is attached to, if any.
    pub fn node(&self) -> Option<NodeId> {
        match *self {
            Violation::RootOutOfRange { .. } | Violation::RootScope { .. } => None,
            Violation::DanglingChild { node, .. }
            | Violation::Cycle { node }
            | Violation::Unreachable { node }
            | Violation::NoChildren { node }
            | Violation::EmptyScope { node }
            | Violation::ScopeUnion { node }
            | Violation::Decomposability { node, .. }
            | Violation::Completeness { node, .. }
            | Violation::GateArity { node, .. }
            | Violation::InvalidGate { node, .. }
            | Violation::LeafScope { node }
            | Violation::LeafDimension { node, .. }
            | Violation::VariableOutOfRange { node, .. } => Some(node),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CircuitError {
    #[error("invalid circuit: {0}")]
    Invalid(ValidationReport),
    #[error("numeric failure at node {node}: {what}")]
    Numeric { node: NodeId, what: String },
    #[error("leaf node {node}: {source}")]
    Leaf { node: NodeId, source: LeafError },
    #[error("evidence: {0}")]
    Evidence(String),
}

/// Postorder over the nodes reachable from `root`; `Err(node)` names a
/// node on a cycle.
fn postorder(nodes: &[Node], root: NodeId) -> Result<Vec<NodeId>, NodeId> {
    // 0 = unseen, 1 = on stack, 2 = done.
    let mut state = vec![0u8; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    let mut stack: Vec<(NodeId, usize)> = vec![(root, 0)];
    state[root] = 1;
    while let Some(&mut (id, ref mut next)) = stack.last_mut() {
        let children = nodes[id].children();
        if *next < children.len() {
            let c = children[*next];
            *next += 1;
            match state[c] {
                0 => {
                    state[c] = 1;
                    stack.push((c, 0));
                }
                1 => return Err(c),
                _ => {}
            }
        } else {
            state[id] = 2;
            order.push(id);
            stack.pop();
        }
    }
    Ok(order)
}

/// Checks completeness, decomposability, acyclicity, scope unions and
/// parameter shapes, reporting every violation found.
pub fn validate(num_y: usize, num_x: usize, nodes: &[Node], root: NodeId) -> ValidationReport {
    let mut v = Vec::new();
    if root >= nodes.len() {
        v.push(Violation::RootOutOfRange { root });
        return ValidationReport { violations: v };
    }
    let mut dangling = false;
    for (id, node) in nodes.iter().enumerate() {
        for &c in node.children() {
            if c >= nodes.len() {
                v.push(Violation::DanglingChild { node: id, child: c });
                dangling = true;
            }
        }
        if node.scope.is_empty() {
            v.push(Violation::EmptyScope { node: id });
        }
        if let Some(&var) = node.scope.vars().iter().find(|&&var| var >= num_y) {
            v.push(Violation::VariableOutOfRange { node: id, var });
        }
        match &node.kind {
            NodeKind::Leaf(leaf) => {
                if node.scope.len() != 1 {
                    v.push(Violation::LeafScope { node: id });
                }
                if leaf.num_x() != num_x {
                    v.push(Violation::LeafDimension { node: id, expected: num_x, found: leaf.num_x() });
                }
            }
            NodeKind::Product(children) => {
                if children.is_empty() {
                    v.push(Violation::NoChildren { node: id });
                }
            }
            NodeKind::Gating { children, gate } => {
                if children.is_empty() {
                    v.push(Violation::NoChildren { node: id });
                }
                if gate.arity() != children.len() {
                    v.push(Violation::GateArity { node: id, expected: children.len(), found: gate.arity() });
                }
                if let Err(reason) = gate.check(num_x) {
                    v.push(Violation::InvalidGate { node: id, reason });
                }
            }
        }
    }
    if dangling {
        return ValidationReport { violations: v };
    }
    // Cycles anywhere in the table, not only below the root.
    let mut on_cycle = Vec::new();
    for start in 0..nodes.len() {
        if let Err(c) = postorder(nodes, start) {
            if !on_cycle.contains(&c) {
                on_cycle.push(c);
                v.push(Violation::Cycle { node: c });
            }
        }
    }
    if !on_cycle.is_empty() {
        return ValidationReport { violations: v };
    }
    let order = postorder(nodes, root).expect("acyclic");
    let mut reachable = vec![false; nodes.len()];
    for &id in &order {
        reachable[id] = true;
    }
    for (id, r) in reachable.iter().enumerate() {
        if !r {
            v.push(Violation::Unreachable { node: id });
        }
    }
    for &id in &order {
        let node = &nodes[id];
        match &node.kind {
            NodeKind::Leaf(_) => {}
            NodeKind::Product(children) => {
                let mut seen: BTreeMap<usize, ()> = BTreeMap::new();
                let mut reported = false;
                for &c in children {
                    for &var in nodes[c].scope.vars() {
                        if seen.insert(var, ()).is_some() && !reported {
                            v.push(Violation::Decomposability { node: id, var });
                            reported = true;
                        }
                    }
                }
                if !children.is_empty() && Scope::union(children.iter().map(|&c| &nodes[c].scope)) != node.scope {
                    v.push(Violation::ScopeUnion { node: id });
                }
            }
            NodeKind::Gating { children, .. } => {
                for &c in children {
                    if nodes[c].scope != node.scope {
                        v.push(Violation::Completeness { node: id, child: c });
                    }
                }
                if !children.is_empty() && Scope::union(children.iter().map(|&c| &nodes[c].scope)) != node.scope {
                    v.push(Violation::ScopeUnion { node: id });
                }
            }
        }
    }
    let root_scope = &nodes[root].scope;
    if *root_scope != Scope::new(0..num_y) {
        v.push(Violation::RootScope { expected: num_y, found: root_scope.len() });
    }
    ValidationReport { violations: v }
}

/// Observation state of one target variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Observed(f64),
    Marginalized,
}

/// A query: the full feature vector and per-target observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub x: Vec<f64>,
    pub y: Vec<Slot>,
}

impl Evidence {
    pub fn observed(y: &[f64], x: &[f64]) -> Self {
        Evidence { x: x.to_vec(), y: y.iter().map(|&v| Slot::Observed(v)).collect() }
    }

    pub fn marginal(num_y: usize, x: &[f64]) -> Self {
        Evidence { x: x.to_vec(), y: vec![Slot::Marginalized; num_y] }
    }
}

/// Node counts, depth and leaf families of a circuit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructureSummary {
    pub leaves: usize,
    pub products: usize,
    pub gatings: usize,
    pub edges: usize,
    pub depth: usize,
    pub families: BTreeMap<String, usize>,
    pub root_kind: String,
    /// Scopes of the root's children when the root is a product.
    pub root_partition: Vec<Vec<usize>>,
}

impl fmt::Display for StructureSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "root: {}", self.root_kind)?;
        writeln!(f, "nodes: {} (leaf {}, product {}, gating {})", self.leaves + self.products + self.gatings, self.leaves, self.products, self.gatings)?;
        writeln!(f, "edges: {}", self.edges)?;
        writeln!(f, "depth: {}", self.depth)?;
        let fams: Vec<String> = self.families.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(f, "leaf families: {}", fams.join(" "))?;
        if !self.root_partition.is_empty() {
            let parts: Vec<String> = self
                .root_partition
                .iter()
                .map(|b| b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            writeln!(f, "root partition: {}", parts.join("|"))?;
        }
        Ok(())
    }
}

/// A validated circuit. Immutable once built; every query method takes
/// `&self` and allocates its own scratch space, so one circuit can be
/// shared across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    num_y: usize,
    num_x: usize,
    nodes: Vec<Node>,
    root: NodeId,
    order: Vec<NodeId>,
}

impl Circuit {
    pub fn new(num_y: usize, num_x: usize, nodes: Vec<Node>, root: NodeId) -> Result<Self, CircuitError> {
        let report = validate(num_y, num_x, &nodes, root);
        if !report.is_valid() {
            return Err(CircuitError::Invalid(report));
        }
        let order = postorder(&nodes, root).expect("validated circuits are acyclic");
        Ok(Circuit { num_y, num_x, nodes, root, order })
    }

    pub fn num_y(&self) -> usize {
        self.num_y
    }

    pub fn num_x(&self) -> usize {
        self.num_x
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Reachable node ids with children before parents.
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self.num_y, self.num_x, &self.nodes, self.root)
    }

    pub fn into_parts(self) -> (usize, usize, Vec<Node>, NodeId) {
        (self.num_y, self.num_x, self.nodes, self.root)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    /// Node plus edge visits made by one bottom-up pass.
    pub fn evaluation_visits(&self) -> usize {
        self.order.iter().map(|&id| 1 + self.nodes[id].children().len()).sum()
    }

    fn check_x(&self, x: &[f64]) -> Result<(), CircuitError> {
        if x.len() != self.num_x {
            return Err(CircuitError::Evidence(format!("expected {} features, got {}", self.num_x, x.len())));
        }
        Ok(())
    }

    /// Bottom-up log values of every reachable node. `y(var)` returns the
    /// observed value or `None` for a marginalized variable.
    pub(crate) fn forward<F: Fn(usize) -> Option<f64>>(
        &self,
        y: F,
        x: &[f64],
        values: &mut [f64],
    ) -> Result<(), CircuitError> {
        for &id in &self.order {
            let node = &self.nodes[id];
            let v = match &node.kind {
                NodeKind::Leaf(leaf) => match y(node.scope.vars()[0]) {
                    None => 0.0,
                    Some(val) => {
                        let ld = leaf.log_density(val, x).map_err(|source| CircuitError::Leaf { node: id, source })?;
                        if !ld.is_finite() {
                            return Err(CircuitError::Numeric { node: id, what: format!("leaf log-density {ld}") });
                        }
                        ld
                    }
                },
                NodeKind::Product(children) => children.iter().map(|&c| values[c]).sum(),
                NodeKind::Gating { children, gate } => {
                    let lw = gate.log_weights(x);
                    if let Some(bad) = lw.iter().find(|w| !w.is_finite()) {
                        return Err(CircuitError::Numeric { node: id, what: format!("gating log-weight {bad}") });
                    }
                    if children.iter().all(|&c| values[c] == 0.0) {
                        // Normalized weights: keep full marginals exactly 0.
                        0.0
                    } else {
                        let terms: Vec<f64> = children.iter().zip(&lw).map(|(&c, w)| w + values[c]).collect();
                        log_sum_exp(&terms)
                    }
                }
            };
            if v.is_nan() {
                return Err(CircuitError::Numeric { node: id, what: "NaN value".into() });
            }
            values[id] = v;
        }
        Ok(())
    }

    fn check_evidence(&self, ev: &Evidence) -> Result<(), CircuitError> {
        self.check_x(&ev.x)?;
        if ev.y.len() != self.num_y {
            return Err(CircuitError::Evidence(format!("expected {} target slots, got {}", self.num_y, ev.y.len())));
        }
        Ok(())
    }

    /// `log P(y | x)` for fully observed `y`.
    pub fn log_density(&self, ev: &Evidence) -> Result<f64, CircuitError> {
        self.check_evidence(ev)?;
        if ev.y.iter().any(|s| matches!(s, Slot::Marginalized)) {
            return Err(CircuitError::Evidence("log_density needs every target observed; use log_marginal".into()));
        }
        self.log_marginal(ev)
    }

    /// Log-probability of the observed targets with the marginalized ones
    /// summed (or integrated) out.
    pub fn log_marginal(&self, ev: &Evidence) -> Result<f64, CircuitError> {
        self.check_evidence(ev)?;
        let mut values = vec![0.0; self.nodes.len()];
        self.forward(
            |v| match ev.y[v] {
                Slot::Observed(val) => Some(val),
                Slot::Marginalized => None,
            },
            &ev.x,
            &mut values,
        )?;
        Ok(values[self.root])
    }

    /// `log P(y | x)` from plain slices.
    pub fn log_density_of(&self, y: &[f64], x: &[f64]) -> Result<f64, CircuitError> {
        self.check_x(x)?;
        if y.len() != self.num_y {
            return Err(CircuitError::Evidence(format!("expected {} targets, got {}", self.num_y, y.len())));
        }
        let mut values = vec![0.0; self.nodes.len()];
        self.forward(|v| Some(y[v]), x, &mut values)?;
        Ok(values[self.root])
    }

    /// Max-product decoding: gating sums become maxima, then the best child
    /// (lowest index on ties) is followed down to the leaf modes.
    pub fn mpe(&self, x: &[f64]) -> Result<Vec<f64>, CircuitError> {
        self.check_x(x)?;
        let mut values = vec![0.0; self.nodes.len()];
        let mut best = vec![0usize; self.nodes.len()];
        for &id in &self.order {
            let node = &self.nodes[id];
            values[id] = match &node.kind {
                NodeKind::Leaf(leaf) => {
                    let ld = leaf
                        .log_density(leaf.mode(x), x)
                        .map_err(|source| CircuitError::Leaf { node: id, source })?;
                    if !ld.is_finite() {
                        return Err(CircuitError::Numeric { node: id, what: format!("leaf log-density {ld}") });
                    }
                    ld
                }
                NodeKind::Product(children) => children.iter().map(|&c| values[c]).sum(),
                NodeKind::Gating { children, gate } => {
                    let lw = gate.log_weights(x);
                    let mut b = 0;
                    let mut bv = f64::NEG_INFINITY;
                    for (k, (&c, w)) in children.iter().zip(&lw).enumerate() {
                        let t = w + values[c];
                        if t > bv {
                            bv = t;
                            b = k;
                        }
                    }
                    if !bv.is_finite() {
                        return Err(CircuitError::Numeric { node: id, what: format!("max-product value {bv}") });
                    }
                    best[id] = b;
                    bv
                }
            };
        }
        let mut y = vec![0.0; self.num_y];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Leaf(leaf) => y[node.scope.vars()[0]] = leaf.mode(x),
                NodeKind::Product(children) => stack.extend(children.iter().copied()),
                NodeKind::Gating { children, .. } => stack.push(children[best[id]]),
            }
        }
        Ok(y)
    }

    /// Ancestral sample of `y` given `x`.
    pub fn sample<R: RngCore + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>, CircuitError> {
        self.check_x(x)?;
        let mut y = vec![0.0; self.num_y];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Leaf(leaf) => y[node.scope.vars()[0]] = leaf.sample(x, rng),
                NodeKind::Product(children) => stack.extend(children.iter().copied()),
                NodeKind::Gating { children, gate } => {
                    let w = gate.weights(x);
                    if w.iter().any(|v| !v.is_finite()) {
                        return Err(CircuitError::Numeric { node: id, what: "non-finite gating weight".into() });
                    }
                    let u = rng.random::<f64>();
                    let mut acc = 0.0;
                    let mut pick = children.len() - 1;
                    for (k, wk) in w.iter().enumerate() {
                        acc += wk;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    stack.push(children[pick]);
                }
            }
        }
        Ok(y)
    }

    /// Reproducible sample from a seed.
    pub fn sample_seeded(&self, x: &[f64], seed: u64) -> Result<Vec<f64>, CircuitError> {
        self.sample(x, &mut rng::seeded(seed))
    }

    /// `E[y_j | x]` for every target, by pushing path weights top-down.
    pub fn expected_value(&self, x: &[f64]) -> Result<Vec<f64>, CircuitError> {
        self.check_x(x)?;
        let mut weight = vec![0.0; self.nodes.len()];
        weight[self.root] = 1.0;
        let mut mean = vec![0.0; self.num_y];
        for &id in self.order.iter().rev() {
            let w = weight[id];
            if w == 0.0 {
                continue;
            }
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Leaf(leaf) => mean[node.scope.vars()[0]] += w * leaf.mean(x),
                NodeKind::Product(children) => {
                    for &c in children {
                        weight[c] += w;
                    }
                }
                NodeKind::Gating { children, gate } => {
                    for (&c, g) in children.iter().zip(gate.weights(x)) {
                        weight[c] += w * g;
                    }
                }
            }
        }
        if let Some(j) = mean.iter().position(|m| !m.is_finite()) {
            return Err(CircuitError::Numeric { node: self.root, what: format!("non-finite mean for target {j}") });
        }
        Ok(mean)
    }

    pub fn summary(&self) -> StructureSummary {
        let mut s = StructureSummary::default();
        let mut depth = vec![0usize; self.nodes.len()];
        for &id in &self.order {
            let node = &self.nodes[id];
            s.edges += node.children().len();
            depth[id] = node.children().iter().map(|&c| depth[c] + 1).max().unwrap_or(0);
            match &node.kind {
                NodeKind::Leaf(leaf) => {
                    s.leaves += 1;
                    *s.families.entry(leaf.family().name().to_string()).or_insert(0) += 1;
                }
                NodeKind::Product(_) => s.products += 1,
                NodeKind::Gating { .. } => s.gatings += 1,
            }
        }
        s.depth = depth[self.root];
        let root = &self.nodes[self.root];
        s.root_kind = root.kind_name().to_string();
        if let NodeKind::Product(children) = &root.kind {
            let mut parts: Vec<Vec<usize>> = children.iter().map(|&c| self.nodes[c].scope.vars().to_vec()).collect();
            parts.sort();
            s.root_partition = parts;
        }
        s
    }
}
