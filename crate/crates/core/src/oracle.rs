//! Exact finite-horizon planner over the true game dynamics.
//!
//! The planner enumerates `(player cell, consumed mask, moves left)` and
//! solves the undiscounted objective by backward induction. Rewards are
//! integers, so values are stored exactly as small integers.

use crate::error::{Error, Result};
use crate::gridworld::{Action, GridState, ObjectClass, CELLS, GRID, MAX_TURNS};

/// Largest number of consumable sites the planner accepts.
pub const MAX_SITES: usize = 16;

const OFF_GRID: i8 = -3;
const TARGET: i8 = 3;

/// Planner state: player cell, bitmask of consumed sites (bit `i` for
/// site `i` in row-major order at planning time) and the turn counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExactState {
    pub player: (usize, usize),
    pub consumed: u32,
    pub turn: u32,
}

/// Value table for one starting state, covering every horizon up to the
/// requested one.
#[derive(Clone, Debug)]
pub struct Planner {
    start_turn: u32,
    limit_turn: u32,
    target: Option<usize>,
    /// Site index per cell, if the cell held a consumable at planning time.
    site_of: [Option<u8>; CELLS],
    site_reward: Vec<i8>,
    /// `values[h]` is indexed by `mask * CELLS + cell`.
    values: Vec<Vec<i8>>,
}

impl Planner {
    /// Plans from `state` for at most `horizon` moves (never past the turn
    /// limit).
    pub fn new(state: &GridState, horizon: u32) -> Result<Planner> {
        if state.is_terminal() {
            return Err(Error::Config("cannot plan from a terminal state".into()));
        }
        let mut site_of = [None; CELLS];
        let mut site_reward = Vec::new();
        let mut target = None;
        for cell in 0..CELLS {
            match state.class_at(cell / GRID, cell % GRID) {
                ObjectClass::Target => target = Some(cell),
                class if class.is_consumable() => {
                    site_of[cell] = Some(site_reward.len() as u8);
                    site_reward.push(class.reward() as i8);
                }
                _ => {}
            }
        }
        if site_reward.len() > MAX_SITES {
            return Err(Error::TooManySites {
                sites: site_reward.len(),
                max: MAX_SITES,
            });
        }
        let start_turn = state.turn();
        let limit_turn = start_turn.saturating_add(horizon).min(MAX_TURNS);
        let mut planner = Planner {
            start_turn,
            limit_turn,
            target,
            site_of,
            site_reward,
            values: Vec::new(),
        };
        planner.solve();
        Ok(planner)
    }

    fn masks(&self) -> usize {
        1 << self.site_reward.len()
    }

    /// Immediate reward, successor cell/mask, and whether the move ends the
    /// episode (ignoring the turn limit).
    fn transition(&self, cell: usize, mask: usize, action: Action) -> (i8, usize, usize, bool) {
        let (dr, dc) = action.delta();
        let r = (cell / GRID) as i32 + i32::from(dr);
        let c = (cell % GRID) as i32 + i32::from(dc);
        if !(0..GRID as i32).contains(&r) || !(0..GRID as i32).contains(&c) {
            return (OFF_GRID, cell, mask, true);
        }
        let next = r as usize * GRID + c as usize;
        if Some(next) == self.target {
            return (TARGET, next, mask, true);
        }
        match self.site_of[next] {
            Some(i) if mask & (1 << i) == 0 => (self.site_reward[usize::from(i)], next, mask | (1 << i), false),
            _ => (0, next, mask, false),
        }
    }

    fn q(&self, moves_left: usize, cell: usize, mask: usize, action: Action) -> i8 {
        let (reward, next, next_mask, done) = self.transition(cell, mask, action);
        if done || moves_left == 1 {
            reward
        } else {
            reward + self.values[moves_left - 1][next_mask * CELLS + next]
        }
    }

    fn solve(&mut self) {
        let horizon = (self.limit_turn - self.start_turn) as usize;
        let size = self.masks() * CELLS;
        self.values = vec![vec![0; size]];
        for h in 1..=horizon {
            let layer: Vec<i8> = (0..size)
                .map(|i| {
                    let (mask, cell) = (i / CELLS, i % CELLS);
                    Action::ALL
                        .iter()
                        .map(|&a| self.q(h, cell, mask, a))
                        .max()
                        .unwrap()
                })
                .collect();
            self.values.push(layer);
        }
    }

    /// Moves available from `state` before the planning horizon runs out.
    pub fn moves_left(&self, state: &ExactState) -> usize {
        self.limit_turn.saturating_sub(state.turn) as usize
    }

    /// Optimal undiscounted return from `state`.
    pub fn value(&self, state: &ExactState) -> f64 {
        let h = self.moves_left(state);
        f64::from(self.values[h][self.index(state)])
    }

    /// Optimal action from `state`. Among actions achieving the optimal
    /// value, prefers the one that secures it in the fewest moves, then the
    /// lowest action index. `None` when no moves remain.
    pub fn action(&self, state: &ExactState) -> Option<Action> {
        let h = self.moves_left(state);
        let (cell, mask) = (self.cell(state), state.consumed as usize);
        let best = self.values[h][self.index(state)];
        (1..=h).find_map(|j| Action::ALL.iter().copied().find(|&a| self.q(j, cell, mask, a) == best))
    }

    /// Planner view of a live state reached from the planning root.
    ///
    /// # Panics
    /// If the state is terminal.
    pub fn exact_state(&self, state: &GridState) -> ExactState {
        assert!(!state.is_terminal(), "exact_state of a terminal state");
        let mut consumed = 0;
        for (cell, site) in self.site_of.iter().enumerate() {
            if let Some(i) = site {
                if state.terrain(cell / GRID, cell % GRID) == 0 {
                    consumed |= 1 << i;
                }
            }
        }
        let (r, c) = state.player();
        ExactState {
            player: (r as usize, c as usize),
            consumed,
            turn: state.turn(),
        }
    }

    fn cell(&self, state: &ExactState) -> usize {
        state.player.0 * GRID + state.player.1
    }

    fn index(&self, state: &ExactState) -> usize {
        state.consumed as usize * CELLS + self.cell(state)
    }
}

/// Maximum achievable undiscounted return from `state` within `horizon`
/// moves.
pub fn optimal_return(state: &GridState, horizon: u32) -> Result<f64> {
    let planner = Planner::new(state, horizon)?;
    Ok(planner.value(&planner.exact_state(state)))
}

/// Greedy action with respect to the exact values; see [`Planner::action`]
/// for tie-breaking.
/// Returns `None` only when `horizon` is zero or the turn limit is reached.
pub fn optimal_action(state: &GridState, horizon: u32) -> Result<Option<Action>> {
    let planner = Planner::new(state, horizon)?;
    Ok(planner.action(&planner.exact_state(state)))
}

/// Follows the planner's actions from `state` until the episode ends or the
/// horizon runs out; returns the realised return.
pub fn greedy_rollout(state: &GridState, horizon: u32) -> Result<f64> {
    let planner = Planner::new(state, horizon)?;
    let mut state = state.clone();
    let mut total = 0.0;
    while !state.is_terminal() {
        let Some(action) = planner.action(&planner.exact_state(&state)) else {
            break;
        };
        total += state.apply(action).0;
    }
    Ok(total)
}
