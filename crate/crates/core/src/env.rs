//! Egocentric gridworld maze.
//!
//! The agent occupies a cell and faces one of four headings. It sees a
//! `(2V+1) x (2V+1)` window rotated so that "ahead" is always up, with three
//! binary channels (wall, open, goal), plus a one-hot heading. Reward is 1 on
//! entering the goal cell, which ends the episode; everything else is 0.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VIEW_RADIUS: usize = 2;
pub const VIEW_SIDE: usize = 2 * VIEW_RADIUS + 1;
pub const NUM_CHANNELS: usize = 3;
pub const PATCH_LEN: usize = NUM_CHANNELS * VIEW_SIDE * VIEW_SIDE;
pub const PROPRIO_LEN: usize = 4;
/// Length of the flat observation vector fed to the models.
pub const OBS_LEN: usize = PATCH_LEN + PROPRIO_LEN;

pub const NUM_ACTIONS: usize = 3;
pub const ACTION_FORWARD: usize = 0;
pub const ACTION_LEFT: usize = 1;
pub const ACTION_RIGHT: usize = 2;

pub const CHANNEL_WALL: usize = 0;
pub const CHANNEL_OPEN: usize = 1;
pub const CHANNEL_GOAL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    S,
    M,
}

impl SizeClass {
    pub fn side(self) -> usize {
        match self {
            SizeClass::S => 9,
            SizeClass::M => 15,
        }
    }

    pub fn max_episode_steps(self) -> usize {
        match self {
            SizeClass::S => 400,
            SizeClass::M => 1000,
        }
    }
}

impl FromStr for SizeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" => Ok(SizeClass::S),
            "M" | "m" => Ok(SizeClass::M),
            other => Err(Error::Config(format!("unknown maze size class '{other}'"))),
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::S => "S",
            SizeClass::M => "M",
        })
    }
}

/// `(row, col)`, row 0 at the top.
pub type Cell = (usize, usize);

/// Headings: 0 north, 1 east, 2 south, 3 west.
pub type Heading = usize;

fn heading_delta(h: Heading) -> (isize, isize) {
    match h % 4 {
        0 => (-1, 0),
        1 => (0, 1),
        2 => (1, 0),
        _ => (0, -1),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeLayout {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start: Cell,
    goal: Cell,
    seed: u64,
}

impl MazeLayout {
    /// Validates the layout invariants: odd dimensions, wall border, open
    /// start and goal, goal reachable from start.
    pub fn new(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        start: Cell,
        goal: Cell,
        seed: u64,
    ) -> Result<Self> {
        if width.is_multiple_of(2) || height.is_multiple_of(2) || width < 3 || height < 3 {
            return Err(Error::Config(format!(
                "maze dimensions must be odd and at least 3, got {width}x{height}"
            )));
        }
        if walls.len() != width * height {
            return Err(Error::Config("wall grid size does not match dimensions".into()));
        }
        let layout = Self {
            width,
            height,
            walls,
            start,
            goal,
            seed,
        };
        for r in 0..height {
            for c in 0..width {
                let border = r == 0 || c == 0 || r == height - 1 || c == width - 1;
                if border && !layout.is_wall((r, c)) {
                    return Err(Error::Config(format!("border cell ({r},{c}) is open")));
                }
            }
        }
        for (what, cell) in [("start", start), ("goal", goal)] {
            if cell.0 >= height || cell.1 >= width || layout.is_wall(cell) {
                return Err(Error::Config(format!("{what} cell {cell:?} is not open")));
            }
        }
        if layout.shortest_path().is_none() {
            return Err(Error::Config("goal is unreachable from start".into()));
        }
        Ok(layout)
    }

    /// Recursive-backtracker maze on the odd-cell lattice; start and goal are
    /// distinct lattice cells drawn from the same seeded generator.
    pub fn generate(size: SizeClass, seed: u64) -> Self {
        let side = size.side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut walls = vec![true; side * side];
            let lattice = (side - 1) / 2;
            let mut visited = vec![false; lattice * lattice];
            let to_cell = |i: usize, j: usize| (2 * i + 1, 2 * j + 1);
            let (si, sj) = (rng.gen_range(0..lattice), rng.gen_range(0..lattice));
            let mut stack = vec![(si, sj)];
            visited[si * lattice + sj] = true;
            let (r, c) = to_cell(si, sj);
            walls[r * side + c] = false;
            while let Some(&(i, j)) = stack.last() {
                let mut nbrs = Vec::with_capacity(4);
                if i > 0 && !visited[(i - 1) * lattice + j] {
                    nbrs.push((i - 1, j));
                }
                if i + 1 < lattice && !visited[(i + 1) * lattice + j] {
                    nbrs.push((i + 1, j));
                }
                if j > 0 && !visited[i * lattice + j - 1] {
                    nbrs.push((i, j - 1));
                }
                if j + 1 < lattice && !visited[i * lattice + j + 1] {
                    nbrs.push((i, j + 1));
                }
                match nbrs.choose(&mut rng) {
                    None => {
                        stack.pop();
                    }
                    Some(&(ni, nj)) => {
                        visited[ni * lattice + nj] = true;
                        let (r0, c0) = to_cell(i, j);
                        let (r1, c1) = to_cell(ni, nj);
                        walls[((r0 + r1) / 2) * side + (c0 + c1) / 2] = false;
                        walls[r1 * side + c1] = false;
                        stack.push((ni, nj));
                    }
                }
            }
            let cells = lattice * lattice;
            let s = rng.gen_range(0..cells);
            let mut g = rng.gen_range(0..cells - 1);
            if g >= s {
                g += 1;
            }
            let start = to_cell(s / lattice, s % lattice);
            let goal = to_cell(g / lattice, g % lattice);
            if let Ok(layout) = MazeLayout::new(side, side, walls, start, goal, seed) {
                return layout;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.0 * self.width + cell.1]
    }

    fn wall_at(&self, r: isize, c: isize) -> bool {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            true
        } else {
            self.is_wall((r as usize, c as usize))
        }
    }

    pub fn open_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&cell| !self.is_wall(cell))
            .collect()
    }

    /// Cell reached by moving forward from `cell` facing `heading`.
    pub fn forward_cell(&self, cell: Cell, heading: Heading) -> Cell {
        let (dr, dc) = heading_delta(heading);
        let (r, c) = (cell.0 as isize + dr, cell.1 as isize + dc);
        if self.wall_at(r, c) {
            cell
        } else {
            (r as usize, c as usize)
        }
    }

    /// BFS distance in cells from start to goal, `None` if unreachable.
    pub fn shortest_path(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let idx = |c: Cell| c.0 * self.width + c.1;
        dist[idx(self.start)] = 0;
        let mut queue = VecDeque::from([self.start]);
        while let Some(cell) = queue.pop_front() {
            if cell == self.goal {
                return Some(dist[idx(cell)]);
            }
            for h in 0..4 {
                let next = self.forward_cell(cell, h);
                if next != cell && dist[idx(next)] == usize::MAX {
                    dist[idx(next)] = dist[idx(cell)] + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }

    /// Fewest-actions sequence taking the agent from `(from, heading)` into
    /// `to`, searching over (cell, heading) states.
    pub fn action_path(&self, from: Cell, heading: Heading, to: Cell) -> Option<Vec<usize>> {
        let state = |c: Cell, h: Heading| (c.0 * self.width + c.1) * 4 + h;
        let n = self.width * self.height * 4;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([(from, heading)]);
        seen[state(from, heading)] = true;
        while let Some((cell, h)) = queue.pop_front() {
            if cell == to {
                let mut actions = Vec::new();
                let mut s = state(cell, h);
                while let Some((prev, a)) = parent[s] {
                    actions.push(a);
                    s = prev;
                }
                actions.reverse();
                return Some(actions);
            }
            let nexts = [
                (self.forward_cell(cell, h), h, ACTION_FORWARD),
                (cell, (h + 3) % 4, ACTION_LEFT),
                (cell, (h + 1) % 4, ACTION_RIGHT),
            ];
            for (nc, nh, a) in nexts {
                let ns = state(nc, nh);
                if !seen[ns] {
                    seen[ns] = true;
                    parent[ns] = Some((state(cell, h), a));
                    queue.push_back((nc, nh));
                }
            }
        }
        None
    }

    /// Egocentric observation of the agent at `(cell, heading)`.
    pub fn observe(&self, cell: Cell, heading: Heading) -> Observation {
        let mut patch = vec![0.0; PATCH_LEN];
        let (fr, fc) = heading_delta(heading);
        let (rr, rc) = heading_delta(heading + 1);
        let v = VIEW_RADIUS as isize;
        for i in 0..VIEW_SIDE {
            for j in 0..VIEW_SIDE {
                let ahead = v - i as isize;
                let right = j as isize - v;
                let r = cell.0 as isize + ahead * fr + right * rr;
                let c = cell.1 as isize + ahead * fc + right * rc;
                let k = i * VIEW_SIDE + j;
                if self.wall_at(r, c) {
                    patch[CHANNEL_WALL * VIEW_SIDE * VIEW_SIDE + k] = 1.0;
                } else {
                    patch[CHANNEL_OPEN * VIEW_SIDE * VIEW_SIDE + k] = 1.0;
                    if (r as usize, c as usize) == self.goal {
                        patch[CHANNEL_GOAL * VIEW_SIDE * VIEW_SIDE + k] = 1.0;
                    }
                }
            }
        }
        let mut proprio = [0.0; PROPRIO_LEN];
        proprio[heading % 4] = 1.0;
        Observation { patch, proprio }
    }

    /// Plain-text grid: `#` wall, `.` open, `S` start, `G` goal.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if (r, c) == self.start {
                    'S'
                } else if (r, c) == self.goal {
                    'G'
                } else if self.is_wall((r, c)) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn load(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let mut walls = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Config(format!("maze row {r} has ragged width")));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        start = Some((r, c));
                        walls.push(false);
                    }
                    'G' => {
                        goal = Some((r, c));
                        walls.push(false);
                    }
                    other => {
                        return Err(Error::Config(format!("unexpected maze character '{other}'")))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::Config("maze has no start 'S'".into()))?;
        let goal = goal.ok_or_else(|| Error::Config("maze has no goal 'G'".into()))?;
        MazeLayout::new(width, height, walls, start, goal, 0)
    }
}

/// Free-function form: BFS distance from start to goal.
pub fn oracle_shortest_path(layout: &MazeLayout) -> usize {
    layout
        .shortest_path()
        .expect("layout invariant guarantees reachability")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Channel-major `[channel][row][col]`, row 0 farthest ahead, col 0 leftmost.
    pub patch: Vec<f64>,
    /// One-hot heading.
    pub proprio: [f64; PROPRIO_LEN],
}

impl Observation {
    pub fn patch_value(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.patch[channel * VIEW_SIDE * VIEW_SIDE + row * VIEW_SIDE + col]
    }

    /// `patch ++ proprio`, length [`OBS_LEN`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_LEN);
        v.extend_from_slice(&self.patch);
        v.extend_from_slice(&self.proprio);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_observation: Observation,
    /// Episode ended, either by reaching the goal or by truncation.
    pub terminal: bool,
    pub truncated: bool,
}

/// A running episode on a fixed layout.
#[derive(Clone, Debug)]
pub struct MazeEnv {
    layout: MazeLayout,
    max_episode_steps: usize,
    cell: Cell,
    heading: Heading,
    steps: usize,
    done: bool,
    current: Observation,
}

impl MazeEnv {
    pub fn new(layout: MazeLayout, max_episode_steps: usize) -> Self {
        let current = layout.observe(layout.start(), 0);
        let cell = layout.start();
        Self {
            layout,
            max_episode_steps,
            cell,
            heading: 0,
            steps: 0,
            done: false,
            current,
        }
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn cell(&self) -> Cell {
        self.cell
    }

    pub fn heading(&self) -> Heading {
        self.heading
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    /// Agent back at the start cell facing north.
    pub fn reset(&mut self) -> Observation {
        self.cell = self.layout.start();
        self.heading = 0;
        self.steps = 0;
        self.done = false;
        self.current = self.layout.observe(self.cell, self.heading);
        self.current.clone()
    }

    pub fn step(&mut self, action: usize) -> Result<Transition> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        match action {
            ACTION_FORWARD => self.cell = self.layout.forward_cell(self.cell, self.heading),
            ACTION_LEFT => self.heading = (self.heading + 3) % 4,
            ACTION_RIGHT => self.heading = (self.heading + 1) % 4,
            other => return Err(Error::Usage(format!("invalid action {other}"))),
        }
        self.steps += 1;
        let reached = self.cell == self.layout.goal();
        let truncated = !reached && self.steps >= self.max_episode_steps;
        self.done = reached || truncated;
        let next = self.layout.observe(self.cell, self.heading);
        let observation = std::mem::replace(&mut self.current, next.clone());
        Ok(Transition {
            observation,
            action,
            reward: if reached { 1.0 } else { 0.0 },
            next_observation: next,
            terminal: self.done,
            truncated,
        })
    }
}
