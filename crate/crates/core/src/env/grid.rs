//! Netlist placement on a `width x height` grid of unit-size cells.
//!
//! Cost is half-perimeter wirelength (Manhattan distance per 2-pin edge)
//! plus a quadratic per-cell density overflow term. With `step_rewards`
//! the agent receives the negated cost delta of every placement step, so
//! the episode return telescopes to the negated final cost.

use serde::{Deserialize, Serialize};

use super::{check_cursor, usage_fraction, ConstraintMode, Environment, Placement, RewardSpec, Shaping, StepState};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cell_capacity: usize,
    pub density_weight: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParams("grid width and height must be at least 1".into()));
        }
        if self.cell_capacity == 0 {
            return Err(Error::InvalidParams("cell_capacity must be at least 1".into()));
        }
        if !self.density_weight.is_finite() || self.density_weight < 0.0 {
            return Err(Error::InvalidParams(format!("density_weight {} must be >= 0", self.density_weight)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// `(x, y)` coordinates of location `j`.
    pub fn coords(&self, j: usize) -> (i64, i64) {
        ((j % self.width) as i64, (j / self.width) as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCost {
    pub hpwl: f64,
    pub density: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct GridEnv {
    graph: Graph,
    spec: GridSpec,
    reward: RewardSpec,
    step_rewards: bool,
    order: Vec<usize>,
    /// Other endpoint of every incident edge, parallel edges repeated.
    incident: Vec<Vec<usize>>,
}

pub fn build_grid_env(graph: Graph, spec: GridSpec, reward: RewardSpec, step_rewards: bool) -> Result<GridEnv> {
    if graph.kind() != GraphKind::Grid {
        return Err(Error::InvalidParams("grid environment needs a graph of kind \"grid\"".into()));
    }
    spec.validate()?;
    reward.validate()?;
    if step_rewards && reward.shaping == Shaping::Sqrt {
        return Err(Error::InvalidParams("per-step rewards require identity shaping".into()));
    }
    let n = graph.len();
    let slots = spec.cells() * spec.cell_capacity;
    if reward.constraint_mode == ConstraintMode::Mask && n > slots {
        return Err(Error::InfeasibleInstance(format!(
            "{n} nodes exceed {}x{} grid with cell capacity {} ({slots} slots)",
            spec.width, spec.height, spec.cell_capacity
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(graph.degree(i)), i));

    let mut incident = vec![Vec::new(); n];
    for e in graph.edges() {
        incident[e.src].push(e.dst);
        incident[e.dst].push(e.src);
    }
    Ok(GridEnv { graph, spec, reward, step_rewards, order, incident })
}

fn overflow_sq(occupancy: f64, capacity: f64) -> f64 {
    let over = (occupancy - capacity).max(0.0);
    over * over
}

impl GridEnv {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn step_rewards(&self) -> bool {
        self.step_rewards
    }

    fn manhattan(&self, a: usize, b: usize) -> f64 {
        let (xa, ya) = self.spec.coords(a);
        let (xb, yb) = self.spec.coords(b);
        ((xa - xb).abs() + (ya - yb).abs()) as f64
    }

    fn occupancy(&self, partial: &Placement) -> Vec<f64> {
        let mut occ = vec![0.0; self.spec.cells()];
        for loc in partial.as_slice().iter().flatten() {
            occ[*loc] += 1.0;
        }
        occ
    }

    fn mask_for(&self, occ: &[f64]) -> Vec<bool> {
        match self.reward.constraint_mode {
            ConstraintMode::Penalty => vec![true; self.spec.cells()],
            ConstraintMode::Mask => {
                let cap = self.spec.cell_capacity as f64;
                occ.iter().map(|&o| o < cap).collect()
            }
        }
    }

    pub fn hpwl(&self, p: &Placement) -> Result<f64> {
        let assign = p.locations()?;
        Ok(self.hpwl_of(&assign))
    }

    fn hpwl_of(&self, assign: &[usize]) -> f64 {
        self.graph
            .edges()
            .iter()
            .map(|e| self.manhattan(assign[e.src], assign[e.dst]))
            .sum()
    }

    pub fn density_cost(&self, p: &Placement) -> Result<f64> {
        let assign = p.locations()?;
        Ok(self.density_of(&assign))
    }

    fn density_of(&self, assign: &[usize]) -> f64 {
        let mut occ = vec![0.0; self.spec.cells()];
        for &j in assign {
            occ[j] += 1.0;
        }
        let cap = self.spec.cell_capacity as f64;
        occ.iter().map(|&o| overflow_sq(o, cap)).sum()
    }

    pub fn grid_cost(&self, p: &Placement) -> Result<GridCost> {
        let assign = p.locations()?;
        Ok(self.cost_of(&assign))
    }

    fn cost_of(&self, assign: &[usize]) -> GridCost {
        let hpwl = self.hpwl_of(assign);
        let density = self.density_of(assign);
        GridCost { hpwl, density, total: hpwl + self.spec.density_weight * density }
    }

    pub fn grid_mask(&self, partial: &Placement, node: usize) -> Result<Vec<bool>> {
        check_cursor(&self.order, partial, node)?;
        Ok(self.mask_for(&self.occupancy(partial)))
    }

    /// Change in partial cost from placing `node` on cell `j`. Partial HPWL
    /// counts only edges whose endpoints are both placed.
    pub fn incremental_cost(&self, partial: &Placement, node: usize, j: usize) -> Result<f64> {
        check_cursor(&self.order, partial, node)?;
        if j >= self.spec.cells() {
            return Err(Error::Index { index: j, len: self.spec.cells() });
        }
        let occ = self.occupancy(partial);
        if !self.mask_for(&occ)[j] {
            return Err(Error::State(format!("cell {j} is full")));
        }
        Ok(self.delta(partial, &occ, node, j))
    }

    fn delta(&self, partial: &Placement, occ: &[f64], node: usize, j: usize) -> f64 {
        let wire: f64 = self.incident[node]
            .iter()
            .filter_map(|&other| partial.get(other))
            .map(|loc| self.manhattan(loc, j))
            .sum();
        let cap = self.spec.cell_capacity as f64;
        let density = overflow_sq(occ[j] + 1.0, cap) - overflow_sq(occ[j], cap);
        wire + self.spec.density_weight * density
    }
}

impl Environment for GridEnv {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn num_locations(&self) -> usize {
        self.spec.cells()
    }

    fn order(&self) -> &[usize] {
        &self.order
    }

    fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    fn initial_state(&self) -> StepState {
        let m = self.spec.cells();
        StepState {
            partial: Placement::unassigned(self.graph.len()),
            load: vec![0.0; m],
            usage: vec![0.0; m],
            cursor: 0,
        }
    }

    fn step_mask(&self, state: &StepState) -> Vec<bool> {
        self.mask_for(&state.load)
    }

    fn apply(&self, state: &mut StepState, loc: usize) -> f64 {
        let node = self.order[state.cursor];
        let delta = if self.step_rewards { self.delta(&state.partial, &state.load, node, loc) } else { 0.0 };
        state.partial.set(node, loc);
        state.load[loc] += 1.0;
        state.usage[loc] = usage_fraction(state.load[loc], self.spec.cell_capacity as f64);
        state.cursor += 1;
        if self.step_rewards {
            -delta
        } else if state.cursor == self.order.len() {
            let assign = state.partial.locations().expect("all nodes placed at final step");
            self.placement_return(&assign)
        } else {
            0.0
        }
    }

    /// Penalty proportional to the number of nodes left unplaced.
    fn dead_end_reward(&self, state: &StepState) -> f64 {
        -(self.reward.lambda * (self.order.len() - state.cursor) as f64)
    }

    fn placement_return(&self, assign: &[usize]) -> f64 {
        self.reward.shape(self.cost_of(assign).total)
    }

    fn is_feasible(&self, assign: &[usize]) -> bool {
        self.density_of(assign) == 0.0
    }
}
