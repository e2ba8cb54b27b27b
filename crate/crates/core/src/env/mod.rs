//! Placement environments.
//!
//! An environment fixes the order in which nodes are placed, the feasibility
//! mask for each step, and the rewards. Transitions are deterministic: the
//! next [`StepState`] depends only on the current state and the chosen
//! location.

mod device;
mod grid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub use device::{build_device_env, CostBreakdown, DeviceEnv, DeviceSpec};
pub use grid::{build_grid_env, GridCost, GridEnv, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shaping {
    Identity,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Infeasible locations are removed from the action space.
    Mask,
    /// Every location is allowed; overflow is charged in the reward.
    Penalty,
}

/// Composite reward weights and how constraints are enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    /// Weight on communication time (cross bytes / bandwidth).
    pub alpha: f64,
    /// Weight on compute imbalance.
    pub beta: f64,
    /// Overflow and dead-end penalty weight.
    pub lambda: f64,
    pub shaping: Shaping,
    pub constraint_mode: ConstraintMode,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            lambda: 10.0,
            shaping: Shaping::Identity,
            constraint_mode: ConstraintMode::Mask,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams(format!("reward {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Maps a non-negative raw cost to a reward.
    pub fn shape(&self, raw: f64) -> f64 {
        match self.shaping {
            Shaping::Identity => -raw,
            Shaping::Sqrt => -raw.max(0.0).sqrt(),
        }
    }
}

/// Assignment of node index to location index; `None` means unassigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement {
    assign: Vec<Option<usize>>,
}

impl Placement {
    pub fn unassigned(n: usize) -> Self {
        Self { assign: vec![None; n] }
    }

    pub fn complete(assign: &[usize]) -> Self {
        Self { assign: assign.iter().copied().map(Some).collect() }
    }

    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    pub fn get(&self, node: usize) -> Option<usize> {
        self.assign[node]
    }

    pub fn set(&mut self, node: usize, loc: usize) {
        self.assign[node] = Some(loc);
    }

    pub fn is_complete(&self) -> bool {
        self.assign.iter().all(Option::is_some)
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.assign
    }

    /// Location per node, or `IncompletePlacement` naming the first gap.
    pub fn locations(&self) -> Result<Vec<usize>> {
        self.assign
            .iter()
            .enumerate()
            .map(|(node, a)| a.ok_or(Error::IncompletePlacement { node }))
            .collect()
    }
}

/// Environment state between placement steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub partial: Placement,
    /// Raw per-location load (bytes for devices, node count for grid cells).
    pub load: Vec<f64>,
    /// Per-location used-capacity fraction, clamped to [0, 1].
    pub usage: Vec<f64>,
    /// Position in the environment's node order of the next node to place.
    pub cursor: usize,
}

pub(crate) fn usage_fraction(load: f64, capacity: f64) -> f64 {
    if capacity > 0.0 {
        (load / capacity).clamp(0.0, 1.0)
    } else if load > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Behaviour shared by the device and grid environments.
pub trait Environment: Sync {
    fn graph(&self) -> &Graph;

    fn num_locations(&self) -> usize;

    /// Order in which nodes are placed.
    fn order(&self) -> &[usize];

    fn reward_spec(&self) -> &RewardSpec;

    fn initial_state(&self) -> StepState;

    /// Feasibility mask for the node at `state.cursor`.
    fn step_mask(&self, state: &StepState) -> Vec<bool>;

    /// Places the node at `state.cursor` on `loc` and returns the step reward.
    /// The final step's reward includes the terminal reward.
    fn apply(&self, state: &mut StepState, loc: usize) -> f64;

    /// Reward for aborting at `state` because no location is feasible.
    fn dead_end_reward(&self, state: &StepState) -> f64;

    /// Undiscounted episode return of a complete placement.
    fn placement_return(&self, assign: &[usize]) -> f64;

    /// Capacity feasibility of a complete placement.
    fn is_feasible(&self, assign: &[usize]) -> bool;

    fn num_nodes(&self) -> usize {
        self.graph().len()
    }

    fn current_node(&self, state: &StepState) -> Option<usize> {
        self.order().get(state.cursor).copied()
    }

    fn constraint_mode(&self) -> ConstraintMode {
        self.reward_spec().constraint_mode
    }

    /// Node-indexed placement from actions taken in [`Environment::order`].
    fn placement_of(&self, actions: &[usize]) -> Placement {
        let mut p = Placement::unassigned(self.num_nodes());
        for (&node, &loc) in self.order().iter().zip(actions) {
            p.set(node, loc);
        }
        p
    }
}

/// Checks that `node` is the next one to place given `partial`.
pub(crate) fn check_cursor(order: &[usize], partial: &Placement, node: usize) -> Result<usize> {
    if partial.len() != order.len() {
        return Err(Error::State(format!(
            "placement has {} entries, graph has {} nodes",
            partial.len(),
            order.len()
        )));
    }
    let cursor = order
        .iter()
        .position(|&n| n == node)
        .ok_or(Error::Index { index: node, len: order.len() })?;
    if partial.get(node).is_some() {
        return Err(Error::State(format!("node {node} is already assigned")));
    }
    if let Some(&missing) = order[..cursor].iter().find(|&&n| partial.get(n).is_none()) {
        return Err(Error::State(format!(
            "node {missing} precedes node {node} in placement order but is unassigned"
        )));
    }
    Ok(cursor)
}

/// Either environment, for callers that pick the kind at run time.
#[derive(Debug, Clone)]
pub enum PlacementEnv {
    Device(DeviceEnv),
    Grid(GridEnv),
}

macro_rules! delegate {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            PlacementEnv::Device($env) => $body,
            PlacementEnv::Grid($env) => $body,
        }
    };
}

impl Environment for PlacementEnv {
    fn graph(&self) -> &Graph {
        delegate!(self, e => e.graph())
    }
    fn num_locations(&self) -> usize {
        delegate!(self, e => e.num_locations())
    }
    fn order(&self) -> &[usize] {
        delegate!(self, e => e.order())
    }
    fn reward_spec(&self) -> &RewardSpec {
        delegate!(self, e => e.reward_spec())
    }
    fn initial_state(&self) -> StepState {
        delegate!(self, e => e.initial_state())
    }
    fn step_mask(&self, state: &StepState) -> Vec<bool> {
        delegate!(self, e => e.step_mask(state))
    }
    fn apply(&self, state: &mut StepState, loc: usize) -> f64 {
        delegate!(self, e => e.apply(state, loc))
    }
    fn dead_end_reward(&self, state: &StepState) -> f64 {
        delegate!(self, e => e.dead_end_reward(state))
    }
    fn placement_return(&self, assign: &[usize]) -> f64 {
        delegate!(self, e => e.placement_return(assign))
    }
    fn is_feasible(&self, assign: &[usize]) -> bool {
        delegate!(self, e => e.is_feasible(assign))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_locations_reports_first_gap() {
        let mut p = Placement::unassigned(3);
        p.set(0, 1);
        p.set(2, 0);
        assert!(matches!(p.locations(), Err(Error::IncompletePlacement { node: 1 })));
        p.set(1, 1);
        assert_eq!(p.locations().unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn shaping() {
        let mut spec = RewardSpec::default();
        assert_eq!(spec.shape(49.0), -49.0);
        spec.shaping = Shaping::Sqrt;
        assert_eq!(spec.shape(49.0), -7.0);
    }

    #[test]
    fn usage_is_clamped() {
        assert_eq!(usage_fraction(3.0, 4.0), 0.75);
        assert_eq!(usage_fraction(9.0, 4.0), 1.0);
        assert_eq!(usage_fraction(0.0, 0.0), 0.0);
        assert_eq!(usage_fraction(1.0, 0.0), 1.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let spec = RewardSpec { beta: -0.1, ..RewardSpec::default() };
        assert!(spec.validate().is_err());
    }
}
