//! Circuit model files: UTF-8 JSON, reals written with 17 significant
//! digits so every `f64` round-trips exactly.
//!
//! ```text
//! {"format_version":1,"num_y":2,"num_x":1,"root":3,"nodes":[
//!   {"id":0,"kind":"leaf","scope":[0],"leaf":{"family":"bernoulli","link":"logit","coeffs":[..],"extra":{}}},
//!   {"id":2,"kind":"gating","scope":[0],"children":[0,1],"gate":{"kind":"softmax","params":[..]}},
//!   ...]}
//! ```
//!
//! Softmax gate params are `K` rows of `num_x + 1` (intercept last),
//! constant gate params are the weights. Gaussian leaves store their
//! variance as `extra.dispersion`, categorical leaves their class count as
//! `extra.classes`.

use std::fmt::Write as _;
use std::path::Path;

use cspn_core::circuit::{Circuit, CircuitError, GatingFunction, Node, NodeKind, Scope};
use cspn_core::leaves::{Family, GlmLeaf};
use serde::Deserialize;
use serde_json::value::RawValue;
use serde_json::{Map, Value};

pub const FORMAT_VERSION: u64 = 1;

/// Malformed model file. `offset` is the byte offset of the failing JSON
/// token or node record.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ModelParseError {
    pub offset: Option<usize>,
    pub node: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ModelParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(o) = self.offset {
            write!(f, "byte {o}: ")?;
        }
        if let Some(n) = self.node {
            write!(f, "node {n}: ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: ModelParseError },
}

/// Formats a real with 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn reals(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&real(*v));
    }
    out.push(']');
}

fn ints(out: &mut String, vs: &[usize]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push(']');
}

pub fn to_json(c: &Circuit) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"format_version\":{FORMAT_VERSION},\"num_y\":{},\"num_x\":{},\"root\":{},\"nodes\":[",
        c.num_y(),
        c.num_x(),
        c.root()
    );
    for (id, node) in c.nodes().iter().enumerate() {
        out.push_str(if id == 0 { "\n" } else { ",\n" });
        let _ = write!(out, "{{\"id\":{id},\"kind\":\"{}\",\"scope\":", node.kind_name());
        ints(&mut out, node.scope.vars());
        match &node.kind {
            NodeKind::Leaf(leaf) => {
                let family = leaf.family();
                let _ = write!(out, ",\"leaf\":{{\"family\":\"{}\",\"link\":\"{}\",\"coeffs\":", family.name(), leaf.link().name());
                reals(&mut out, leaf.coeffs());
                out.push_str(",\"extra\":{");
                match family {
                    Family::Gaussian => {
                        let _ = write!(out, "\"dispersion\":{}", real(leaf.dispersion()));
                    }
                    Family::Categorical(k) => {
                        let _ = write!(out, "\"classes\":{k}");
                    }
                    _ => {}
                }
                out.push_str("}}");
            }
            NodeKind::Product(children) => {
                out.push_str(",\"children\":");
                ints(&mut out, children);
            }
            NodeKind::Gating { children, gate } => {
                out.push_str(",\"children\":");
                ints(&mut out, children);
                let (kind, params) = match gate {
                    GatingFunction::Constant(w) => ("constant", w.as_slice()),
                    GatingFunction::Softmax { coeffs, .. } => ("softmax", coeffs.as_slice()),
                };
                let _ = write!(out, ",\"gate\":{{\"kind\":\"{kind}\",\"params\":");
                reals(&mut out, params);
                out.push('}');
            }
        }
        out.push('}');
    }
    out.push_str("\n]}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopRecord<'a> {
    format_version: u64,
    num_y: usize,
    num_x: usize,
    root: usize,
    #[serde(borrow)]
    nodes: Vec<&'a RawValue>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    kind: String,
    scope: Vec<usize>,
    children: Option<Vec<usize>>,
    gate: Option<GateRecord>,
    leaf: Option<LeafRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GateRecord {
    kind: String,
    params: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafRecord {
    family: String,
    link: String,
    coeffs: Vec<f64>,
    #[serde(default)]
    extra: Map<String, Value>,
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn json_error(text: &str, base: usize, e: &serde_json::Error, node: Option<usize>) -> ModelParseError {
    let slice = &text[base..];
    ModelParseError { offset: Some(base + byte_offset(slice, e.line(), e.column())), node, message: e.to_string() }
}

fn build_node(rec: NodeRecord, num_x: usize) -> Result<Node, String> {
    let scope = Scope::new(rec.scope.iter().copied());
    match rec.kind.as_str() {
        "leaf" => {
            let leaf = rec.leaf.ok_or("leaf node without a \"leaf\" record")?;
            if rec.children.is_some() || rec.gate.is_some() {
                return Err("leaf node with children or gate".into());
            }
            let family = match leaf.family.as_str() {
                "bernoulli" => Family::Bernoulli,
                "poisson" => Family::Poisson,
                "gaussian" => Family::Gaussian,
                "categorical" => {
                    let k = leaf.extra.get("classes").and_then(Value::as_u64).ok_or("categorical leaf without extra.classes")?;
                    Family::Categorical(k as usize)
                }
                other => return Err(format!("unknown leaf family \"{other}\"")),
            };
            let want_link = family.canonical_link().name();
            if leaf.link != want_link {
                return Err(format!("link \"{}\" does not match family {} (expected \"{want_link}\")", leaf.link, family.name()));
            }
            let dispersion = match family {
                Family::Gaussian => leaf.extra.get("dispersion").and_then(Value::as_f64).ok_or("gaussian leaf without extra.dispersion")?,
                _ => 1.0,
            };
            let glm = GlmLeaf::new(family, leaf.coeffs, dispersion).map_err(|e| e.to_string())?;
            let var = *rec.scope.first().ok_or("leaf with empty scope")?;
            if rec.scope.len() != 1 {
                return Err("leaf scope must hold exactly one variable".into());
            }
            Ok(Node::leaf(var, glm))
        }
        "product" => {
            if rec.gate.is_some() || rec.leaf.is_some() {
                return Err("product node with gate or leaf record".into());
            }
            Ok(Node::product(scope, rec.children.ok_or("product node without children")?))
        }
        "gating" => {
            let children = rec.children.ok_or("gating node without children")?;
            let gate = rec.gate.ok_or("gating node without a \"gate\" record")?;
            let gate = match gate.kind.as_str() {
                "constant" => GatingFunction::Constant(gate.params),
                "softmax" => GatingFunction::Softmax { k: children.len(), coeffs: gate.params },
                other => return Err(format!("unknown gate kind \"{other}\"")),
            };
            if let GatingFunction::Softmax { k, coeffs } = &gate {
                if coeffs.len() != k * (num_x + 1) {
                    return Err(format!("softmax gate has {} params, expected {}", coeffs.len(), k * (num_x + 1)));
                }
            }
            Ok(Node::gating(scope, children, gate))
        }
        other => Err(format!("unknown node kind \"{other}\"")),
    }
}

pub fn from_json(text: &str) -> Result<Circuit, ModelParseError> {
    let top: TopRecord = serde_json::from_str(text).map_err(|e| json_error(text, 0, &e, None))?;
    if top.format_version != FORMAT_VERSION {
        return Err(ModelParseError { offset: None, node: None, message: format!("unsupported format_version {}", top.format_version) });
    }
    let n = top.nodes.len();
    let mut slots: Vec<Option<Node>> = (0..n).map(|_| None).collect();
    let mut offsets = vec![0usize; n];
    for raw in &top.nodes {
        let base = raw.get().as_ptr() as usize - text.as_ptr() as usize;
        let rec: NodeRecord = serde_json::from_str(raw.get()).map_err(|e| json_error(text, base, &e, None))?;
        let id = rec.id;
        let err = |message: String| ModelParseError { offset: Some(base), node: Some(id), message };
        if id >= n {
            return Err(err(format!("id out of range for {n} nodes")));
        }
        if slots[id].is_some() {
            return Err(err("duplicate id".into()));
        }
        offsets[id] = base;
        slots[id] = Some(build_node(rec, top.num_x).map_err(err)?);
    }
    let nodes: Vec<Node> = slots.into_iter().map(|s| s.expect("ids cover 0..n")).collect();
    Circuit::new(top.num_y, top.num_x, nodes, top.root).map_err(|e| match e {
        CircuitError::Invalid(report) => {
            // Report the cycle first: it is the most specific structural defect.
            let v = report
                .violations
                .iter()
                .find(|v| matches!(v, cspn_core::circuit::Violation::Cycle { .. }))
                .unwrap_or(&report.violations[0]);
            let node = v.node();
            ModelParseError { offset: node.map(|id| offsets[id]), node, message: v.to_string() }
        }
        other => ModelParseError { offset: None, node: None, message: other.to_string() },
    })
}

pub fn save_model(c: &Circuit, path: &Path) -> Result<(), ModelIoError> {
    std::fs::write(path, to_json(c)).map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })
}

pub fn load_model(path: &Path) -> Result<Circuit, ModelIoError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })?;
    from_json(&text).map_err(|source| ModelIoError::Parse { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cspn_core::random_circuit::{random_circuit, RandomCircuitParams};

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324, 0.0] {
            let s = real(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
            let json: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(json.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn random_circuits_round_trip_exactly() {
        for seed in 0..20 {
            let c = random_circuit(&RandomCircuitParams::mixed(1 + seed as usize % 5, 2), seed);
            let back = from_json(&to_json(&c)).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_family_names_the_tag() {
        let text = r#"{"format_version":1,"num_y":1,"num_x":0,"root":0,"nodes":[
{"id":0,"kind":"leaf","scope":[0],"leaf":{"family":"weibull","link":"log","coeffs":[0.0]}}]}"#;
        let e = from_json(text).unwrap_err();
        assert!(e.message.contains("weibull"), "{e}");
        assert_eq!(e.node, Some(0));
        assert_eq!(e.offset, Some(text.find("{\"id\"").unwrap()));
    }

    #[test]
    fn syntax_error_has_byte_offset() {
        let text = "{\"format_version\":1,\n\"num_y\":1,,}";
        let e = from_json(text).unwrap_err();
        assert_eq!(e.offset, Some(text.find(",,").unwrap() + 1));
    }
}
