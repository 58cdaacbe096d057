//! Tree search over goals.
//!
//! At every node the manager proposes X goal codes; each is decoded and
//! rolled forward one option step by the abstract model. After m levels the
//! X^m root-to-leaf paths are scored with per-option discount `gamma^K` and
//! the first goal of the best one is returned.
//!
//! Node `n`'s children are numbered `n * X + c + 1` (breadth-first), and node
//! `n` samples its candidates from its own ChaCha stream `n` under a shared
//! base seed. Expansion order therefore never affects the tree.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::abstract_wm::AbstractWorldModel;
use crate::error::{Error, Result};
use crate::goal_codec::{GoalCode, GoalCodec, GoalVector, SampleMode};
use crate::hierarchy::Manager;
use crate::world_model::LatentState;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanNode {
    pub latent: LatentState,
    pub incoming_goal: Option<GoalVector>,
    pub incoming_code: Option<GoalCode>,
    pub edge_reward: f64,
    pub depth: usize,
    pub children: Vec<PlanNode>,
}

impl PlanNode {
    pub fn root(latent: LatentState) -> Self {
        Self {
            latent,
            incoming_goal: None,
            incoming_code: None,
            edge_reward: 0.0,
            depth: 0,
            children: Vec::new(),
        }
    }

    /// Number of edges below this node.
    pub fn edge_count(&self) -> usize {
        self.children.iter().map(|c| 1 + c.edge_count()).sum()
    }

    pub fn height(&self) -> usize {
        self.children.iter().map(|c| 1 + c.height()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanPath {
    pub codes: Vec<GoalCode>,
    pub goals: Vec<GoalVector>,
    pub edge_rewards: Vec<f64>,
    pub score: f64,
}

/// `sum_i discount^i * rewards[i]`, accumulated front to back.
pub fn path_score(edge_rewards: &[f64], discount: f64) -> f64 {
    let mut score = 0.0;
    let mut w = 1.0;
    for r in edge_rewards {
        score += w * r;
        w *= discount;
    }
    score
}

/// Frozen models and settings used for one planning call.
#[derive(Clone, Copy, Debug)]
pub struct PlanningModels<'a> {
    pub manager: &'a Manager,
    pub codec: &'a GoalCodec,
    pub abstract_model: &'a AbstractWorldModel,
    pub branching: usize,
    pub depth: usize,
    pub mode: SampleMode,
}

/// Sampling stream for node `node_id` under `base_seed`.
pub fn node_rng(base_seed: u64, node_id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(base_seed);
    r.set_stream(node_id);
    r
}

pub fn child_id(node_id: u64, branching: usize, child: usize) -> u64 {
    node_id * branching as u64 + child as u64 + 1
}

/// The X candidate codes proposed at a node.
pub fn sample_candidates(
    models: &PlanningModels<'_>,
    latent: &LatentState,
    base_seed: u64,
    node_id: u64,
) -> Result<Vec<GoalCode>> {
    let mut r = node_rng(base_seed, node_id);
    (0..models.branching)
        .map(|_| models.manager.manager_sample(latent, &mut r, models.mode))
        .collect()
}

/// Builds a tree with a base seed drawn from `rng`.
pub fn build_tree<R: Rng + ?Sized>(
    s0: &LatentState,
    models: &PlanningModels<'_>,
    rng: &mut R,
) -> Result<PlanNode> {
    build_tree_seeded(s0, models, rng.gen())
}

pub fn build_tree_seeded(s0: &LatentState, models: &PlanningModels<'_>, base_seed: u64) -> Result<PlanNode> {
    if models.branching == 0 || models.depth == 0 {
        return Err(Error::Config(format!(
            "planner needs branching >= 1 and depth >= 1 (got {} and {})",
            models.branching, models.depth
        )));
    }
    let mut root = PlanNode::root(s0.clone());
    expand(&mut root, 0, models, base_seed)?;
    Ok(root)
}

fn expand(node: &mut PlanNode, node_id: u64, models: &PlanningModels<'_>, base_seed: u64) -> Result<()> {
    if node.depth == models.depth {
        return Ok(());
    }
    let codes = sample_candidates(models, &node.latent, base_seed, node_id)?;
    for (c, code) in codes.into_iter().enumerate() {
        let goal = models.codec.decode_goal(&code)?;
        let (latent, reward) = models.abstract_model.predict_abstract(&node.latent, &goal)?;
        let mut child = PlanNode {
            latent,
            incoming_goal: Some(goal),
            incoming_code: Some(code),
            edge_reward: reward,
            depth: node.depth + 1,
            children: Vec::new(),
        };
        expand(&mut child, child_id(node_id, models.branching, c), models, base_seed)?;
        node.children.push(child);
    }
    Ok(())
}

/// All root-to-leaf paths in depth-first order (child 0 first).
pub fn enumerate_paths(root: &PlanNode, discount: f64) -> Vec<PlanPath> {
    fn walk(node: &PlanNode, prefix: &mut PlanPath, discount: f64, out: &mut Vec<PlanPath>) {
        if node.children.is_empty() {
            let mut p = prefix.clone();
            p.score = path_score(&p.edge_rewards, discount);
            out.push(p);
            return;
        }
        for child in &node.children {
            if let (Some(code), Some(goal)) = (&child.incoming_code, &child.incoming_goal) {
                prefix.codes.push(code.clone());
                prefix.goals.push(goal.clone());
            }
            prefix.edge_rewards.push(child.edge_reward);
            walk(child, prefix, discount, out);
            prefix.edge_rewards.pop();
            if child.incoming_code.is_some() && child.incoming_goal.is_some() {
                prefix.codes.pop();
                prefix.goals.pop();
            }
        }
    }
    let mut out = Vec::new();
    if root.children.is_empty() {
        return out;
    }
    let mut prefix = PlanPath {
        codes: Vec::new(),
        goals: Vec::new(),
        edge_rewards: Vec::new(),
        score: 0.0,
    };
    walk(root, &mut prefix, discount, &mut out);
    out
}

/// Index of the best-scoring path; the earliest wins ties.
pub fn best_path_index(paths: &[PlanPath]) -> Result<usize> {
    if paths.is_empty() {
        return Err(Error::Usage("select_goal needs at least one path".into()));
    }
    let mut best = 0;
    for (i, p) in paths.iter().enumerate().skip(1) {
        if p.score > paths[best].score {
            best = i;
        }
    }
    Ok(best)
}

/// First goal on the best path.
pub fn select_goal(paths: &[PlanPath]) -> Result<(GoalCode, GoalVector)> {
    let p = &paths[best_path_index(paths)?];
    match (p.codes.first(), p.goals.first()) {
        (Some(z), Some(g)) => Ok((z.clone(), g.clone())),
        _ => Err(Error::Usage("best path carries no goal".into())),
    }
}

/// Builds, scores and selects in one call.
pub fn plan<R: Rng + ?Sized>(
    s0: &LatentState,
    models: &PlanningModels<'_>,
    discount: f64,
    rng: &mut R,
) -> Result<(GoalCode, GoalVector)> {
    let tree = build_tree(s0, models, rng)?;
    select_goal(&enumerate_paths(&tree, discount))
}

/// Indented text rendering: one line per edge with depth, code indices and
/// edge reward; leaves also show the path score. Rewards use 9 decimals so
/// that dumps round-trip through [`parse_dump`] to within 1e-9.
pub fn dump_tree(root: &PlanNode, discount: f64) -> String {
    fn walk(node: &PlanNode, rewards: &mut Vec<f64>, discount: f64, out: &mut String) {
        for child in &node.children {
            rewards.push(child.edge_reward);
            let code = child
                .incoming_code
                .as_ref()
                .map(|z| z.indices().iter().map(usize::to_string).collect::<Vec<_>>().join(","))
                .unwrap_or_default();
            let _ = write!(
                out,
                "{}depth={} code=[{}] reward={:.9}",
                "  ".repeat(child.depth),
                child.depth,
                code,
                child.edge_reward
            );
            if child.children.is_empty() {
                let _ = write!(out, " path_score={:.9}", path_score(rewards, discount));
            }
            out.push('\n');
            walk(child, rewards, discount, out);
            rewards.pop();
        }
    }
    let mut out = format!(
        "plan-tree branching={} depth={} discount={:.9}\n",
        root.children.len(),
        root.height(),
        discount
    );
    walk(root, &mut Vec::new(), discount, &mut out);
    out
}

/// One edge line of a dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpEdge {
    pub depth: usize,
    pub code: Vec<usize>,
    pub reward: f64,
    pub path_score: Option<f64>,
}

/// Parses the edge lines of [`dump_tree`] output.
pub fn parse_dump(text: &str) -> Result<Vec<DumpEdge>> {
    let bad = |line: &str| Error::Format(format!("unrecognised plan dump line: {line:?}"));
    let mut edges = Vec::new();
    for line in text.lines().skip(1) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut depth = None;
        let mut code = None;
        let mut reward = None;
        let mut score = None;
        for field in trimmed.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "depth" => depth = v.parse().ok(),
                "code" => {
                    let inner = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')).ok_or_else(|| bad(line))?;
                    code = if inner.is_empty() {
                        Some(Vec::new())
                    } else {
                        inner.split(',').map(|c| c.parse().ok()).collect::<Option<Vec<usize>>>()
                    };
                }
                "reward" => reward = v.parse().ok(),
                "path_score" => score = Some(v.parse().map_err(|_| bad(line))?),
                _ => return Err(bad(line)),
            }
        }
        match (depth, code, reward) {
            (Some(depth), Some(code), Some(reward)) => edges.push(DumpEdge {
                depth,
                code,
                reward,
                path_score: score,
            }),
            _ => return Err(bad(line)),
        }
    }
    Ok(edges)
}
