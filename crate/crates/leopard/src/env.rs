//! Fixed-horizon grid environments with ground-truth and shaped rewards.
//!
//! `CliffWalking` is the standard 4x12 layout: -1 per step, -100 for walking
//! off the cliff (which teleports the agent back to the start), and reaching
//! the goal does not end the episode -- the goal is absorbing and grants +5
//! per timestep spent there. `GridWorld` is a small 5x5 sparse-goal world
//! used for generalization tests.
//!
//! State features are a one-hot position encoding plus a normalized timestep,
//! so both the tabular and the MLP reward models can consume them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Transition;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode over: timestep {timestep} has reached the horizon {horizon}")]
    EpisodeOver { timestep: usize, horizon: usize },
    #[error("action index {0} out of range")]
    BadAction(usize),
    #[error("{0} is not supported for this environment")]
    UnsupportedEnvironment(&'static str),
    #[error("horizon must be at least 2, got {0}")]
    BadHorizon(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    CliffWalking,
    GridWorld,
}

/// Grid movement actions shared by both environments.
pub const ACTION_UP: usize = 0;
pub const ACTION_RIGHT: usize = 1;
pub const ACTION_DOWN: usize = 2;
pub const ACTION_LEFT: usize = 3;
pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub pos: usize,
    pub timestep: usize,
}

struct MoveOutcome {
    next_pos: usize,
    fell_off_cliff: bool,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, horizon: usize) -> Result<Self, EnvError> {
        if horizon < 2 {
            return Err(EnvError::BadHorizon(horizon));
        }
        Ok(Self { kind, horizon })
    }

    pub fn cliff_walking(horizon: usize) -> Result<Self, EnvError> {
        Self::new(EnvKind::CliffWalking, horizon)
    }

    pub fn grid_world(horizon: usize) -> Result<Self, EnvError> {
        Self::new(EnvKind::GridWorld, horizon)
    }

    pub fn rows(&self) -> usize {
        match self.kind {
            EnvKind::CliffWalking => 4,
            EnvKind::GridWorld => 5,
        }
    }

    pub fn cols(&self) -> usize {
        match self.kind {
            EnvKind::CliffWalking => 12,
            EnvKind::GridWorld => 5,
        }
    }

    pub fn n_positions(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    /// One-hot position plus normalized timestep.
    pub fn feature_dim(&self) -> usize {
        self.n_positions() + 1
    }

    pub fn start_pos(&self) -> usize {
        match self.kind {
            EnvKind::CliffWalking => self.index(3, 0), // bottom-left
            EnvKind::GridWorld => self.index(0, 0),
        }
    }

    pub fn goal_pos(&self) -> usize {
        match self.kind {
            EnvKind::CliffWalking => self.index(3, 11), // bottom-right
            EnvKind::GridWorld => self.index(4, 4),
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn row_col(&self, pos: usize) -> (usize, usize) {
        (pos / self.cols(), pos % self.cols())
    }

    pub fn is_cliff(&self, pos: usize) -> bool {
        match self.kind {
            EnvKind::CliffWalking => {
                let (row, col) = self.row_col(pos);
                row == 3 && (1..=10).contains(&col)
            }
            EnvKind::GridWorld => false,
        }
    }

    pub fn features(&self, pos: usize, timestep: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.feature_dim()];
        v[pos] = 1.0;
        v[self.n_positions()] = timestep as f64 / self.horizon as f64;
        v
    }

    /// Position index encoded in a feature vector.
    pub fn decode_pos(&self, features: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..self.n_positions() {
            if features[i] > features[best] {
                best = i;
            }
        }
        best
    }

    /// Deterministic movement: the goal is absorbing in place, walls clamp,
    /// cliff cells teleport back to the start.
    fn move_result(&self, pos: usize, action: usize) -> Result<MoveOutcome, EnvError> {
        if action >= N_ACTIONS {
            return Err(EnvError::BadAction(action));
        }
        if pos == self.goal_pos() {
            return Ok(MoveOutcome {
                next_pos: pos,
                fell_off_cliff: false,
            });
        }
        let (row, col) = self.row_col(pos);
        let (row, col) = match action {
            ACTION_UP => (row.saturating_sub(1), col),
            ACTION_RIGHT => (row, (col + 1).min(self.cols() - 1)),
            ACTION_DOWN => ((row + 1).min(self.rows() - 1), col),
            _ => (row, col.saturating_sub(1)),
        };
        let target = self.index(row, col);
        if self.is_cliff(target) {
            Ok(MoveOutcome {
                next_pos: self.start_pos(),
                fell_off_cliff: true,
            })
        } else {
            Ok(MoveOutcome {
                next_pos: target,
                fell_off_cliff: false,
            })
        }
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            pos: self.start_pos(),
            timestep: 0,
        }
    }

    pub fn step(&self, state: EnvState, action: usize) -> Result<(EnvState, Transition), EnvError> {
        if state.timestep >= self.horizon {
            return Err(EnvError::EpisodeOver {
                timestep: state.timestep,
                horizon: self.horizon,
            });
        }
        let outcome = self.move_result(state.pos, action)?;
        let next = EnvState {
            pos: outcome.next_pos,
            timestep: state.timestep + 1,
        };
        let transition = Transition::new(
            self.features(state.pos, state.timestep),
            action,
            self.features(next.pos, next.timestep),
        );
        Ok((next, transition))
    }

    /// Hidden objective used only by oracles and evaluation.
    pub fn ground_truth_reward(&self, t: &Transition) -> f64 {
        let pos = self.decode_pos(&t.state);
        // re-simulate the deterministic move so the reward is a pure
        // function of the transition
        let outcome = self
            .move_result(pos, t.action)
            .expect("transition action within range");
        match self.kind {
            EnvKind::CliffWalking => {
                if outcome.fell_off_cliff {
                    -100.0
                } else if outcome.next_pos == self.goal_pos() {
                    5.0
                } else {
                    -1.0
                }
            }
            EnvKind::GridWorld => {
                if outcome.next_pos == self.goal_pos() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Shaped variant for the preference oracle: the cliff penalty stays,
    /// other steps interpolate between -1 at the start and +5 at the goal by
    /// normalized L1 progress.
    pub fn shaped_reward(&self, t: &Transition) -> Result<f64, EnvError> {
        if self.kind != EnvKind::CliffWalking {
            return Err(EnvError::UnsupportedEnvironment("shaped reward"));
        }
        let pos = self.decode_pos(&t.state);
        let outcome = self.move_result(pos, t.action)?;
        if outcome.fell_off_cliff {
            return Ok(-100.0);
        }
        let (r, c) = self.row_col(outcome.next_pos);
        let (sr, sc) = self.row_col(self.start_pos());
        let (gr, gc) = self.row_col(self.goal_pos());
        let d_start = (r.abs_diff(sr) + c.abs_diff(sc)) as f64;
        let d_goal = (r.abs_diff(gr) + c.abs_diff(gc)) as f64;
        Ok(shaped_interpolation(d_start, d_goal))
    }

    pub fn return_of(&self, transitions: &[Transition]) -> f64 {
        transitions.iter().map(|t| self.ground_truth_reward(t)).sum()
    }
}

/// Weighted reward of -1 and +5 by normalized L1 progress: -1 at the start,
/// +5 at the goal, linear in between.
pub fn shaped_interpolation(d_start: f64, d_goal: f64) -> f64 {
    let w = if d_start + d_goal == 0.0 {
        1.0
    } else {
        1.0 - d_goal / (d_start + d_goal)
    };
    (1.0 - w) * (-1.0) + w * 5.0
}

/// Finite-horizon value iteration over the tabular MDP; the independent
/// optimum that learned policies are checked against.
pub fn dp_optimal_return(spec: &EnvSpec) -> f64 {
    let n = spec.n_positions();
    let mut value = vec![0.0; n];
    for _ in 0..spec.horizon {
        let mut next = vec![f64::NEG_INFINITY; n];
        for pos in 0..n {
            if spec.is_cliff(pos) {
                next[pos] = 0.0; // never occupied
                continue;
            }
            for action in 0..N_ACTIONS {
                let outcome = spec.move_result(pos, action).unwrap();
                let r = step_reward(spec, pos, action);
                let v = r + value[outcome.next_pos];
                if v > next[pos] {
                    next[pos] = v;
                }
            }
        }
        value = next;
    }
    value[spec.start_pos()]
}

fn step_reward(spec: &EnvSpec, pos: usize, action: usize) -> f64 {
    let outcome = spec.move_result(pos, action).unwrap();
    match spec.kind {
        EnvKind::CliffWalking => {
            if outcome.fell_off_cliff {
                -100.0
            } else if outcome.next_pos == spec.goal_pos() {
                5.0
            } else {
                -1.0
            }
        }
        EnvKind::GridWorld => {
            if outcome.next_pos == spec.goal_pos() {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Greedy rollout under the DP-optimal finite-horizon policy; used to check
/// that the optimum is achievable in the environment itself.
pub fn dp_optimal_rollout_return(spec: &EnvSpec) -> f64 {
    let n = spec.n_positions();
    // values[t][pos] = optimal return-to-go with (horizon - t) steps left
    let mut values = vec![vec![0.0; n]; spec.horizon + 1];
    for t in (0..spec.horizon).rev() {
        for pos in 0..n {
            if spec.is_cliff(pos) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for action in 0..N_ACTIONS {
                let outcome = spec.move_result(pos, action).unwrap();
                let v = step_reward(spec, pos, action) + values[t + 1][outcome.next_pos];
                best = best.max(v);
            }
            values[t][pos] = best;
        }
    }
    let mut state = spec.reset();
    let mut total = 0.0;
    while state.timestep < spec.horizon {
        let t = state.timestep;
        let (mut best_a, mut best_v) = (0, f64::NEG_INFINITY);
        for action in 0..N_ACTIONS {
            let outcome = spec.move_result(state.pos, action).unwrap();
            let v = step_reward(spec, state.pos, action) + values[t + 1][outcome.next_pos];
            if v > best_v {
                best_v = v;
                best_a = action;
            }
        }
        let (next, transition) = spec.step(state, best_a).unwrap();
        total += spec.ground_truth_reward(&transition);
        state = next;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cliff() -> EnvSpec {
        EnvSpec::cliff_walking(48).unwrap()
    }

    #[test]
    fn reset_starts_bottom_left_at_timestep_zero() {
        let spec = cliff();
        let s = spec.reset();
        assert_eq!(s.pos, spec.index(3, 0));
        assert_eq!(s.timestep, 0);
        let grid = EnvSpec::grid_world(10).unwrap();
        assert_eq!(grid.reset().pos, grid.index(0, 0));
    }

    #[test]
    fn cliff_step_teleports_to_start() {
        let spec = cliff();
        let s = EnvState {
            pos: spec.index(2, 1),
            timestep: 0,
        };
        let (next, t) = spec.step(s, ACTION_DOWN).unwrap();
        assert_eq!(next.pos, spec.start_pos());
        assert_eq!(spec.ground_truth_reward(&t), -100.0);
    }

    #[test]
    fn wall_moves_leave_position_unchanged() {
        let spec = cliff();
        let s = spec.reset();
        let (next, t) = spec.step(s, ACTION_LEFT).unwrap();
        assert_eq!(next.pos, s.pos);
        assert_eq!(next.timestep, 1);
        assert_eq!(spec.ground_truth_reward(&t), -1.0);
    }

    #[test]
    fn goal_is_absorbing_and_pays_five() {
        let spec = cliff();
        let s = EnvState {
            pos: spec.index(2, 11),
            timestep: 0,
        };
        let (next, t) = spec.step(s, ACTION_DOWN).unwrap();
        assert_eq!(next.pos, spec.goal_pos());
        assert_eq!(spec.ground_truth_reward(&t), 5.0);
        let (next2, t2) = spec.step(next, ACTION_UP).unwrap();
        assert_eq!(next2.pos, spec.goal_pos());
        assert_eq!(spec.ground_truth_reward(&t2), 5.0);
    }

    #[test]
    fn stepping_past_horizon_is_an_error() {
        let spec = cliff();
        let s = EnvState {
            pos: spec.start_pos(),
            timestep: 48,
        };
        assert_eq!(
            spec.step(s, ACTION_UP).unwrap_err(),
            EnvError::EpisodeOver {
                timestep: 48,
                horizon: 48
            }
        );
    }

    #[test]
    fn shaped_reward_hits_both_endpoints_and_midpoint() {
        let spec = cliff();
        // arriving at the goal: w = 1
        let s = EnvState {
            pos: spec.index(2, 11),
            timestep: 0,
        };
        let (_, t) = spec.step(s, ACTION_DOWN).unwrap();
        assert_eq!(spec.shaped_reward(&t).unwrap(), 5.0);
        // staying at the start (wall bump): w = 0
        let (_, t) = spec.step(spec.reset(), ACTION_LEFT).unwrap();
        assert_eq!(spec.shaped_reward(&t).unwrap(), -1.0);
        // arriving at (1,6): d_start = 8, d_goal = 7
        let s = EnvState {
            pos: spec.index(2, 6),
            timestep: 0,
        };
        let (_, t) = spec.step(s, ACTION_UP).unwrap();
        let expect = shaped_interpolation(8.0, 7.0);
        assert!((spec.shaped_reward(&t).unwrap() - expect).abs() < 1e-12);

        let grid = EnvSpec::grid_world(10).unwrap();
        let (_, t) = grid.step(grid.reset(), ACTION_RIGHT).unwrap();
        assert_eq!(
            grid.shaped_reward(&t).unwrap_err(),
            EnvError::UnsupportedEnvironment("shaped reward")
        );
    }

    #[test]
    fn shaped_midpoint_interpolates_to_two() {
        // no 4x12 cell is exactly equidistant (the start-goal L1 distance is
        // odd), so the midpoint case is checked on the interpolation itself
        assert_eq!(shaped_interpolation(3.0, 3.0), 2.0);
        assert_eq!(shaped_interpolation(0.0, 5.0), -1.0);
        assert_eq!(shaped_interpolation(5.0, 0.0), 5.0);
    }

    #[test]
    fn episodes_have_exactly_horizon_transitions() {
        let spec = cliff();
        let mut state = spec.reset();
        let mut count = 0;
        while state.timestep < spec.horizon {
            let (next, _) = spec.step(state, ACTION_RIGHT).unwrap();
            state = next;
            count += 1;
        }
        assert_eq!(count, 48);
        assert!(spec.step(state, ACTION_RIGHT).is_err());
    }

    #[test]
    fn dp_optimum_matches_hand_computed_value() {
        // up, 11 rights, down reaches the goal in 13 moves: 12 steps at -1,
        // then 36 transitions worth +5 each (entry plus 35 at the goal).
        let spec = cliff();
        let expect = -12.0 + 36.0 * 5.0;
        assert_eq!(dp_optimal_return(&spec), expect);
        assert_eq!(dp_optimal_rollout_return(&spec), expect);
    }

    #[test]
    fn ground_truth_is_pure_in_the_transition() {
        let spec = cliff();
        let s = EnvState {
            pos: spec.index(2, 3),
            timestep: 5,
        };
        let (_, t) = spec.step(s, ACTION_RIGHT).unwrap();
        let r1 = spec.ground_truth_reward(&t);
        let r2 = spec.ground_truth_reward(&t.clone());
        assert_eq!(r1, r2);
        assert_eq!(r1, -1.0);
    }
}
