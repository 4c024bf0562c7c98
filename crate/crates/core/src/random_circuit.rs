//! Random valid circuits, for property tests and the acceptance checks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::circuit::{Circuit, GatingFunction, Node, NodeId, Scope};
use crate::data::shuffle;
use crate::leaves::{Family, GlmLeaf};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct RandomCircuitParams {
    pub num_y: usize,
    pub num_x: usize,
    /// Maximum number of gating layers on any root-to-leaf path.
    pub max_gating_depth: usize,
    /// Maximum children per gating node (at least 2).
    pub max_children: usize,
    /// Scale of the random GLM and gate coefficients.
    pub coeff_scale: f64,
    /// Leaf family of each target; empty means all Bernoulli.
    pub families: Vec<Family>,
}

impl RandomCircuitParams {
    pub fn binary(num_y: usize, num_x: usize) -> Self {
        RandomCircuitParams { num_y, num_x, max_gating_depth: 3, max_children: 3, coeff_scale: 1.5, families: vec![] }
    }

    /// Targets cycling through Bernoulli, Poisson, Gaussian and
    /// three-class categorical leaves.
    pub fn mixed(num_y: usize, num_x: usize) -> Self {
        let cycle = [Family::Bernoulli, Family::Poisson, Family::Gaussian, Family::Categorical(3)];
        RandomCircuitParams {
            num_y,
            num_x,
            max_gating_depth: 2,
            max_children: 3,
            coeff_scale: 0.7,
            families: (0..num_y).map(|j| cycle[j % 4]).collect(),
        }
    }
}

struct Builder<'a> {
    p: &'a RandomCircuitParams,
    rng: Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn normal(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * self.p.coeff_scale
    }

    fn leaf(&mut self, var: usize) -> NodeId {
        let family = self.p.families.get(var).copied().unwrap_or(Family::Bernoulli);
        let rows = match family {
            Family::Categorical(c) => c,
            _ => 1,
        };
        let coeffs = (0..rows * (self.p.num_x + 1)).map(|_| self.normal()).collect();
        let dispersion = if family == Family::Gaussian { 0.5 + self.rng.random::<f64>() } else { 1.0 };
        let leaf = GlmLeaf::new(family, coeffs, dispersion).expect("valid random leaf");
        self.push(Node::leaf(var, leaf))
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn gate(&mut self, k: usize) -> GatingFunction {
        if self.p.num_x == 0 || self.rng.random::<f64>() < 0.3 {
            let raw: Vec<f64> = (0..k).map(|_| 0.05 + self.rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            GatingFunction::Constant(raw.into_iter().map(|w| w / s).collect())
        } else {
            let coeffs = (0..k * (self.p.num_x + 1)).map(|_| self.normal()).collect();
            GatingFunction::Softmax { k, coeffs }
        }
    }

    fn build(&mut self, vars: &[usize], depth: usize) -> NodeId {
        let scope = Scope::new(vars.iter().copied());
        let can_gate = depth < self.p.max_gating_depth;
        if vars.len() == 1 {
            if can_gate && self.rng.random::<f64>() < 0.4 {
                return self.gating(vars, &scope, depth);
            }
            return self.leaf(vars[0]);
        }
        if can_gate && self.rng.random::<f64>() < 0.5 {
            return self.gating(vars, &scope, depth);
        }
        // Random partition into 2..=len non-empty blocks.
        let mut order = vars.to_vec();
        shuffle(&mut order, &mut self.rng);
        let blocks = 2 + self.rng.random_range(0..(vars.len() - 1).min(2));
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); blocks];
        for (i, v) in order.into_iter().enumerate() {
            let b = if i < blocks { i } else { self.rng.random_range(0..blocks) };
            parts[b].push(v);
        }
        let children: Vec<NodeId> = parts.iter().map(|part| self.build(part, depth)).collect();
        self.push(Node::product(scope, children))
    }

    fn gating(&mut self, vars: &[usize], scope: &Scope, depth: usize) -> NodeId {
        let k = 2 + self.rng.random_range(0..self.p.max_children.max(2) - 1);
        let children: Vec<NodeId> = (0..k).map(|_| self.build(vars, depth + 1)).collect();
        let gate = self.gate(k);
        self.push(Node::gating(scope.clone(), children, gate))
    }
}

/// A random valid circuit with GLM leaves.
pub fn random_circuit(params: &RandomCircuitParams, seed: u64) -> Circuit {
    assert!(params.num_y >= 1, "at least one target");
    let mut b = Builder { p: params, rng: rng::seeded(seed), nodes: Vec::new() };
    let vars: Vec<usize> = (0..params.num_y).collect();
    let root = b.build(&vars, 0);
    Circuit::new(params.num_y, params.num_x, b.nodes, root).expect("generator emits valid circuits")
}

/// Every binary assignment of `num_y` variables, in counting order with
/// variable 0 as the least significant bit.
pub fn binary_assignments(num_y: usize) -> Vec<Vec<f64>> {
    (0..1usize << num_y)
        .map(|m| (0..num_y).map(|j| ((m >> j) & 1) as f64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_circuits_validate() {
        for seed in 0..40 {
            let c = random_circuit(&RandomCircuitParams::binary(1 + (seed as usize % 6), 2), seed);
            assert!(c.validate().is_valid());
        }
    }

    #[test]
    fn assignments_enumerate_the_cube() {
        let a = binary_assignments(3);
        assert_eq!(a.len(), 8);
        assert_eq!(a[5], vec![1.0, 0.0, 1.0]);
    }
}
