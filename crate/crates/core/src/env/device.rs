//! Device placement with an additive runtime proxy.
//!
//! Step time is modelled as the busiest device's compute plus total
//! cross-device traffic divided by bandwidth. The reward adds weighted
//! communication, imbalance and memory-overflow terms on top.

use serde::{Deserialize, Serialize};

use super::{check_cursor, usage_fraction, ConstraintMode, Environment, Placement, RewardSpec, StepState};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub devices: usize,
    /// Memory capacity of every device, in bytes.
    pub mem_capacity: f64,
    /// Bytes transferred per work unit.
    pub bandwidth: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::InvalidParams("devices must be at least 1".into()));
        }
        if !(self.mem_capacity >= 0.0) || self.mem_capacity.is_nan() {
            return Err(Error::InvalidParams(format!("mem_capacity {} must be >= 0", self.mem_capacity)));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidParams(format!("bandwidth {} must be > 0", self.bandwidth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub makespan: f64,
    pub cross_bytes: f64,
    pub imbalance: f64,
    pub mem_overflow: f64,
    pub per_device_mem: Vec<f64>,
    pub per_device_compute: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DeviceEnv {
    graph: Graph,
    spec: DeviceSpec,
    reward: RewardSpec,
    order: Vec<usize>,
}

pub fn build_device_env(graph: Graph, spec: DeviceSpec, reward: RewardSpec) -> Result<DeviceEnv> {
    if graph.kind() != GraphKind::Device {
        return Err(Error::InvalidParams("device environment needs a graph of kind \"device\"".into()));
    }
    spec.validate()?;
    reward.validate()?;
    let order = graph.topological_order()?;
    if reward.constraint_mode == ConstraintMode::Mask {
        let total = graph.total_memory();
        let room = spec.devices as f64 * spec.mem_capacity;
        if total > room {
            return Err(Error::InfeasibleInstance(format!(
                "total memory {total} exceeds {} devices x {} capacity = {room}",
                spec.devices, spec.mem_capacity
            )));
        }
        if let Some(n) = graph.nodes().iter().find(|n| n.memory > spec.mem_capacity) {
            return Err(Error::InfeasibleInstance(format!(
                "node {} needs {} bytes, device capacity is {}",
                n.id, n.memory, spec.mem_capacity
            )));
        }
    }
    Ok(DeviceEnv { graph, spec, reward, order })
}

impl DeviceEnv {
    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    fn mask_for(&self, load: &[f64], node: usize) -> Vec<bool> {
        match self.reward.constraint_mode {
            ConstraintMode::Penalty => vec![true; self.spec.devices],
            ConstraintMode::Mask => {
                let need = self.graph.node(node).memory;
                load.iter().map(|&used| used + need <= self.spec.mem_capacity).collect()
            }
        }
    }

    /// Devices that can still accept `node` given the partial placement.
    pub fn capacity_mask(&self, partial: &Placement, node: usize) -> Result<Vec<bool>> {
        check_cursor(&self.order, partial, node)?;
        let mut load = vec![0.0; self.spec.devices];
        for (i, loc) in partial.as_slice().iter().enumerate() {
            if let Some(d) = *loc {
                load[d] += self.graph.node(i).memory;
            }
        }
        Ok(self.mask_for(&load, node))
    }

    pub fn cost_breakdown(&self, p: &Placement) -> Result<CostBreakdown> {
        let assign = p.locations()?;
        Ok(self.breakdown_of(&assign))
    }

    pub(crate) fn breakdown_of(&self, assign: &[usize]) -> CostBreakdown {
        let m = self.spec.devices;
        let mut per_device_mem = vec![0.0; m];
        let mut per_device_compute = vec![0.0; m];
        for (node, &d) in self.graph.nodes().iter().zip(assign) {
            per_device_mem[d] += node.memory;
            per_device_compute[d] += node.compute;
        }
        let cross_bytes: f64 = self
            .graph
            .edges()
            .iter()
            .filter(|e| assign[e.src] != assign[e.dst])
            .map(|e| e.bytes)
            .sum();
        let max_compute = per_device_compute.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_compute = per_device_compute.iter().copied().fold(f64::INFINITY, f64::min);
        let mem_overflow = per_device_mem
            .iter()
            .map(|&used| (used - self.spec.mem_capacity).max(0.0))
            .sum();
        CostBreakdown {
            makespan: max_compute + cross_bytes / self.spec.bandwidth,
            cross_bytes,
            imbalance: max_compute - min_compute,
            mem_overflow,
            per_device_mem,
            per_device_compute,
        }
    }

    /// Weighted cost before shaping.
    pub fn raw_cost(&self, cb: &CostBreakdown) -> f64 {
        let r = &self.reward;
        cb.makespan
            + r.alpha * (cb.cross_bytes / self.spec.bandwidth)
            + r.beta * cb.imbalance
            + r.lambda * cb.mem_overflow
    }

    pub fn device_reward(&self, cb: &CostBreakdown) -> f64 {
        self.reward.shape(self.raw_cost(cb))
    }
}

impl Environment for DeviceEnv {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn num_locations(&self) -> usize {
        self.spec.devices
    }

    fn order(&self) -> &[usize] {
        &self.order
    }

    fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    fn initial_state(&self) -> StepState {
        let m = self.spec.devices;
        StepState {
            partial: Placement::unassigned(self.graph.len()),
            load: vec![0.0; m],
            usage: vec![0.0; m],
            cursor: 0,
        }
    }

    fn step_mask(&self, state: &StepState) -> Vec<bool> {
        self.mask_for(&state.load, self.order[state.cursor])
    }

    fn apply(&self, state: &mut StepState, loc: usize) -> f64 {
        let node = self.order[state.cursor];
        state.partial.set(node, loc);
        state.load[loc] += self.graph.node(node).memory;
        state.usage[loc] = usage_fraction(state.load[loc], self.spec.mem_capacity);
        state.cursor += 1;
        if state.cursor == self.order.len() {
            let assign = state.partial.locations().expect("all nodes placed at final step");
            self.placement_return(&assign)
        } else {
            0.0
        }
    }

    /// Penalty proportional to the memory that could not be placed.
    fn dead_end_reward(&self, state: &StepState) -> f64 {
        let remaining: f64 = self.order[state.cursor..]
            .iter()
            .map(|&n| self.graph.node(n).memory)
            .sum();
        -(self.reward.lambda * remaining)
    }

    fn placement_return(&self, assign: &[usize]) -> f64 {
        self.device_reward(&self.breakdown_of(assign))
    }

    fn is_feasible(&self, assign: &[usize]) -> bool {
        let mut load = vec![0.0; self.spec.devices];
        for (node, &d) in self.graph.nodes().iter().zip(assign) {
            load[d] += node.memory;
        }
        load.iter().all(|&used| used <= self.spec.mem_capacity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Shaping;
    use crate::graph::{Edge, Node};

    fn graph(mem: &[f64], compute: &[f64], edges: &[(usize, usize, f64)]) -> Graph {
        let nodes = mem
            .iter()
            .zip(compute)
            .enumerate()
            .map(|(id, (&memory, &compute))| Node { id, op_type: 0, compute, memory })
            .collect();
        let edges = edges.iter().map(|&(src, dst, bytes)| Edge { src, dst, bytes }).collect();
        Graph::new(GraphKind::Device, 1, nodes, edges).unwrap()
    }

    fn spec(devices: usize, cap: f64, bw: f64) -> DeviceSpec {
        DeviceSpec { devices, mem_capacity: cap, bandwidth: bw }
    }

    #[test]
    fn single_node_env() {
        let env = build_device_env(graph(&[1.0], &[1.0], &[]), spec(2, 4.0, 1.0), RewardSpec::default()).unwrap();
        assert_eq!(env.order(), &[0]);
        assert_eq!(env.num_locations(), 2);
    }

    #[test]
    fn infeasible_total_memory() {
        let g = graph(&[3.0, 3.0, 4.0], &[1.0; 3], &[]);
        let err = build_device_env(g.clone(), spec(2, 4.0, 1.0), RewardSpec::default()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleInstance(_)));
        let penalty = RewardSpec { constraint_mode: ConstraintMode::Penalty, ..RewardSpec::default() };
        assert!(build_device_env(g, spec(2, 4.0, 1.0), penalty).is_ok());
    }

    #[test]
    fn cycle_propagates() {
        let g = graph(&[1.0, 1.0], &[1.0, 1.0], &[(0, 1, 1.0), (1, 0, 1.0)]);
        assert!(matches!(build_device_env(g, spec(2, 4.0, 1.0), RewardSpec::default()), Err(Error::Cycle { .. })));
    }

    #[test]
    fn grid_graph_rejected() {
        let raw = crate::graph::RawGraph {
            kind: GraphKind::Grid,
            op_types: 1,
            nodes: vec![Node { id: 0, op_type: 0, compute: 1.0, memory: 1.0 }],
            edges: vec![],
        };
        let g = Graph::from_raw(raw).unwrap();
        assert!(build_device_env(g, spec(1, 1.0, 1.0), RewardSpec::default()).is_err());
    }

    #[test]
    fn mask_examples() {
        // nodes 0 (mem 3) then 1 (mem 2)
        let env = build_device_env(graph(&[3.0, 2.0, 1.0], &[1.0; 3], &[]), spec(2, 4.0, 1.0), RewardSpec::default())
            .unwrap();
        let mut p = Placement::unassigned(3);
        p.set(0, 0);
        assert_eq!(env.capacity_mask(&p, 1).unwrap(), vec![false, true]);

        let zero = build_device_env(graph(&[4.0, 4.0, 0.0], &[1.0; 3], &[]), spec(2, 4.0, 1.0), RewardSpec::default())
            .unwrap();
        let mut p = Placement::unassigned(3);
        p.set(0, 0);
        p.set(1, 1);
        assert_eq!(zero.capacity_mask(&p, 2).unwrap(), vec![true, true]);

        let full = build_device_env(graph(&[4.0, 4.0, 1.0], &[1.0; 3], &[]), spec(3, 4.0, 1.0), RewardSpec::default())
            .unwrap();
        let mut p = Placement::unassigned(3);
        p.set(0, 0);
        p.set(1, 1);
        assert_eq!(full.capacity_mask(&p, 2).unwrap(), vec![false, false, true]);
    }

    #[test]
    fn all_false_mask_when_devices_full() {
        let g = graph(&[4.0, 4.0, 1.0], &[1.0; 3], &[]);
        let penalty = RewardSpec { constraint_mode: ConstraintMode::Penalty, ..RewardSpec::default() };
        let env = build_device_env(g.clone(), spec(2, 4.0, 1.0), penalty).unwrap();
        let mut p = Placement::unassigned(3);
        p.set(0, 0);
        p.set(1, 1);
        assert_eq!(env.capacity_mask(&p, 2).unwrap(), vec![true, true]);

        let env = DeviceEnv { graph: g, spec: spec(2, 4.0, 1.0), reward: RewardSpec::default(), order: vec![0, 1, 2] };
        assert_eq!(env.capacity_mask(&p, 2).unwrap(), vec![false, false]);
        let mut s = env.initial_state();
        env.apply(&mut s, 0);
        env.apply(&mut s, 1);
        assert_eq!(env.dead_end_reward(&s), -10.0);
    }

    #[test]
    fn mask_order_violation_is_state_error() {
        let env = build_device_env(graph(&[1.0, 1.0], &[1.0; 2], &[(0, 1, 1.0)]), spec(2, 4.0, 1.0), RewardSpec::default())
            .unwrap();
        let p = Placement::unassigned(2);
        assert!(matches!(env.capacity_mask(&p, 1), Err(Error::State(_))));
        let mut p = Placement::unassigned(2);
        p.set(0, 0);
        assert!(matches!(env.capacity_mask(&p, 0), Err(Error::State(_))));
    }

    #[test]
    fn breakdown_examples() {
        let g = graph(&[1.0; 3], &[2.0, 3.0, 5.0], &[(1, 2, 8.0), (0, 1, 1.0)]);
        let env = build_device_env(g, spec(2, 10.0, 4.0), RewardSpec::default()).unwrap();
        let cb = env.cost_breakdown(&Placement::complete(&[0, 0, 1])).unwrap();
        assert_eq!(cb.makespan, 7.0);
        assert_eq!(cb.cross_bytes, 8.0);
        assert_eq!(cb.imbalance, 0.0);

        let cb = env.cost_breakdown(&Placement::complete(&[1, 1, 1])).unwrap();
        assert_eq!(cb.makespan, 10.0);
        assert_eq!(cb.cross_bytes, 0.0);
        assert_eq!(cb.imbalance, 10.0);
        assert_eq!(cb.per_device_compute, vec![0.0, 10.0]);

        assert!(matches!(env.cost_breakdown(&Placement::unassigned(3)), Err(Error::IncompletePlacement { node: 0 })));
    }

    #[test]
    fn reward_examples() {
        let g = graph(&[1.0], &[49.0], &[]);
        let reward = RewardSpec { alpha: 0.0, beta: 0.0, lambda: 0.0, shaping: Shaping::Sqrt, ..RewardSpec::default() };
        let env = build_device_env(g, spec(1, 1.0, 1.0), reward).unwrap();
        let cb = env.cost_breakdown(&Placement::complete(&[0])).unwrap();
        assert_eq!(env.device_reward(&cb), -7.0);
    }

    #[test]
    fn overflow_charged_in_penalty_mode() {
        let g = graph(&[3.0, 3.0], &[1.0, 1.0], &[]);
        let reward = RewardSpec { constraint_mode: ConstraintMode::Penalty, ..RewardSpec::default() };
        let env = build_device_env(g, spec(2, 4.0, 1.0), reward).unwrap();
        let cb = env.cost_breakdown(&Placement::complete(&[1, 1])).unwrap();
        assert_eq!(cb.mem_overflow, 2.0);
        assert_eq!(env.raw_cost(&cb), 2.0 + 0.5 * 2.0 + 10.0 * 2.0);
        assert!(!env.is_feasible(&[1, 1]));
        assert!(env.is_feasible(&[0, 1]));
    }

    #[test]
    fn apply_tracks_usage_and_terminal_reward() {
        let g = graph(&[1.0, 2.0], &[1.0, 1.0], &[(0, 1, 2.0)]);
        let env = build_device_env(g, spec(2, 4.0, 1.0), RewardSpec::default()).unwrap();
        let mut s = env.initial_state();
        assert_eq!(env.apply(&mut s, 0), 0.0);
        assert_eq!(s.usage, vec![0.25, 0.0]);
        let r = env.apply(&mut s, 1);
        assert_eq!(s.usage, vec![0.25, 0.5]);
        assert_eq!(r, env.placement_return(&[0, 1]));
        // makespan 1 + 2, alpha * 2, imbalance 0
        assert_eq!(r, -5.0);
    }
}
