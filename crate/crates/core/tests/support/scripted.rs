//! Scripted deterministic worker on a fixed maze, for abstract-model fixtures.
//!
//! A segment starts in some (cell, heading) state and follows the BFS-shortest
//! action sequence to a target state, then idles by walking into the wall
//! ahead. Ordinary targets are "parking" states (wall ahead) so idling keeps
//! the state fixed; reward-bearing segments end on entering the goal cell.

#![allow(dead_code)]

use std::collections::VecDeque;

use forecaster::abstract_wm::{encode_extended, AbstractSample};
use forecaster::env::{Cell, Heading, MazeLayout, ACTION_FORWARD, ACTION_LEFT, ACTION_RIGHT};
use forecaster::goal_codec::GoalVector;
use forecaster::replay::ExtendedTransition;
use forecaster::world_model::WorldModel;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type State = (Cell, Heading);

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedSegment {
    pub start: State,
    pub target: State,
    pub actions: Vec<usize>,
    pub reward: f64,
}

fn successor(layout: &MazeLayout, (cell, h): State, action: usize) -> State {
    match action {
        ACTION_FORWARD => (layout.forward_cell(cell, h), h),
        ACTION_LEFT => (cell, (h + 3) % 4),
        _ => (cell, (h + 1) % 4),
    }
}

/// Shortest action sequences from `start` to every state within `k` actions.
/// Paths never pass through the goal cell; goal states appear only as ends.
pub fn reachable(layout: &MazeLayout, start: State, k: usize) -> Vec<(State, Vec<usize>)> {
    let mut out = vec![(start, Vec::new())];
    let mut queue = VecDeque::from([(start, Vec::new())]);
    let mut seen = vec![start];
    while let Some((s, path)) = queue.pop_front() {
        if path.len() == k || s.0 == layout.goal() {
            continue;
        }
        for a in [ACTION_FORWARD, ACTION_LEFT, ACTION_RIGHT] {
            let n = successor(layout, s, a);
            if seen.contains(&n) {
                continue;
            }
            seen.push(n);
            let mut p = path.clone();
            p.push(a);
            out.push((n, p.clone()));
            queue.push_back((n, p));
        }
    }
    out
}

pub fn is_parking(layout: &MazeLayout, (cell, h): State) -> bool {
    layout.forward_cell(cell, h) == cell
}

/// Replays `actions` (padded with idling to `k`) and returns the end state
/// and whether the goal was entered.
pub fn replay(layout: &MazeLayout, start: State, actions: &[usize], k: usize) -> (State, bool) {
    let mut s = start;
    for i in 0..k {
        let a = actions.get(i).copied().unwrap_or(ACTION_FORWARD);
        s = successor(layout, s, a);
        if s.0 == layout.goal() {
            return (s, true);
        }
    }
    (s, false)
}

fn all_states(layout: &MazeLayout) -> Vec<State> {
    layout
        .open_cells()
        .into_iter()
        .filter(|&c| c != layout.goal())
        .flat_map(|c| (0..4).map(move |h| (c, h)))
        .collect()
}

/// `n` segments of length `k`; about `reward_fraction` of them end in the goal.
pub fn scripted_segments(layout: &MazeLayout, k: usize, n: usize, reward_fraction: f64, seed: u64) -> Vec<ScriptedSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = all_states(layout);
    let near_goal: Vec<(State, State, Vec<usize>)> = states
        .iter()
        .filter_map(|&s| {
            reachable(layout, s, k)
                .into_iter()
                .find(|(t, _)| t.0 == layout.goal())
                .map(|(t, p)| (s, t, p))
        })
        .collect();
    assert!(!near_goal.is_empty(), "goal unreachable within {k} steps from anywhere");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if rng.gen::<f64>() < reward_fraction {
            let (start, target, actions) = near_goal.choose(&mut rng).unwrap().clone();
            out.push(ScriptedSegment {
                start,
                target,
                actions,
                reward: 1.0,
            });
            continue;
        }
        let start = *states.choose(&mut rng).unwrap();
        let options: Vec<(State, Vec<usize>)> = reachable(layout, start, k)
            .into_iter()
            .filter(|(t, p)| !p.is_empty() && t.0 != layout.goal() && is_parking(layout, *t))
            .collect();
        if let Some((target, actions)) = options.choose(&mut rng).cloned() {
            out.push(ScriptedSegment {
                start,
                target,
                actions,
                reward: 0.0,
            });
        }
    }
    out
}

/// Extended tuple for a segment; the goal is the encoded target observation.
pub fn to_extended(layout: &MazeLayout, wm: &WorldModel, seg: &ScriptedSegment) -> ExtendedTransition {
    let end_observation = layout.observe(seg.target.0, seg.target.1);
    let goal = GoalVector(wm.encode_cold(&end_observation).unwrap().0);
    ExtendedTransition {
        start_observation: layout.observe(seg.start.0, seg.start.1),
        end_observation,
        goal,
        cumulative_reward: seg.reward,
        episode: 0,
        start_step: 0,
    }
}

pub fn encode_segments(layout: &MazeLayout, wm: &WorldModel, segs: &[ScriptedSegment]) -> Vec<AbstractSample> {
    let ext: Vec<ExtendedTransition> = segs.iter().map(|s| to_extended(layout, wm, s)).collect();
    let refs: Vec<&ExtendedTransition> = ext.iter().collect();
    encode_extended(&refs, wm).unwrap()
}

/// Mean over coordinates of the per-coordinate variance of the targets.
pub fn target_variance(samples: &[AbstractSample]) -> f64 {
    let d = samples[0].target.dim();
    let n = samples.len() as f64;
    (0..d)
        .map(|j| {
            let mean = samples.iter().map(|s| s.target.0[j]).sum::<f64>() / n;
            samples.iter().map(|s| (s.target.0[j] - mean).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / d as f64
}

/// World model fitted to short random walks from uniformly drawn states,
/// then used frozen. An untrained encoder maps every observation to nearly
/// the same latent.
pub fn fitted_encoder(layout: &MazeLayout, latent: usize, hidden: usize, updates: usize, seed: u64) -> WorldModel {
    use forecaster::env::Transition;
    use forecaster::replay::StoredTransition;
    use forecaster::world_model::WorldModelDims;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = all_states(layout);
    let mut chunks: Vec<Vec<StoredTransition>> = Vec::new();
    while chunks.len() < 600 {
        let mut s = *states.choose(&mut rng).unwrap();
        let mut chunk = Vec::new();
        for step in 0..8u64 {
            let action = rng.gen_range(0..3);
            let next = successor(layout, s, action);
            let reached = next.0 == layout.goal();
            chunk.push(StoredTransition {
                episode: chunks.len() as u64,
                step,
                transition: Transition {
                    observation: layout.observe(s.0, s.1),
                    action,
                    reward: if reached { 1.0 } else { 0.0 },
                    next_observation: layout.observe(next.0, next.1),
                    terminal: reached,
                    truncated: false,
                },
            });
            if reached {
                break;
            }
            s = next;
        }
        if chunk.len() == 8 {
            chunks.push(chunk);
        }
    }
    let mut wm = WorldModel::new(WorldModelDims::new(latent, hidden), &mut rng).unwrap();
    for _ in 0..updates {
        let batch: Vec<Vec<StoredTransition>> = chunks.choose_multiple(&mut rng, 8).cloned().collect();
        wm.update(&batch, 1e-3).unwrap();
    }
    wm
}
