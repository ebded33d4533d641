//! Gridworld maze with a five-token action alphabet.
//!
//! Cells are indexed row-major (`id = y * width + x`) and the cell index is the
//! policy state. `y` grows downward, so `Up` decreases it.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{StateId, TabularPolicy};
use crate::seeds::{stream_rng, Stream};

/// Wall density used by seeded generation when none is given.
pub const DEFAULT_WALL_DENSITY: f64 = 0.25;
const MAX_GENERATION_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum MazeError {
    #[error("maze dimensions must be at least 2x2, got {width}x{height}")]
    Dimensions { width: u32, height: u32 },
    #[error("{which} cell ({x}, {y}) is outside the grid")]
    CellOutOfRange { which: &'static str, x: u32, y: u32 },
    #[error("start and goal are the same cell")]
    StartIsGoal,
    #[error("goal is unreachable from start")]
    Disconnected,
    #[error("wall between ({}, {}) and ({}, {}) does not separate adjacent cells", .0.x, .0.y, .1.x, .1.y)]
    WallNotAdjacent(Cell, Cell),
    #[error("max_steps must be positive")]
    MaxSteps,
    #[error("wall density must lie in [0, 1), got {0}")]
    Density(f64),
    #[error("no connected layout found after {0} attempts")]
    GenerationFailed(u64),
    #[error("policy has {0} actions, the maze alphabet has 5")]
    Alphabet(usize),
    #[error("policy probabilities at state {0} are not a valid distribution")]
    Probabilities(StateId),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl From<[u32; 2]> for Cell {
    fn from([x, y]: [u32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Cell> for [u32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// JSON description of a maze. Give either `walls` or `seed` (or neither for an
/// open grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walls: Option<Vec<[Cell; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_density: Option<f64>,
    pub start: Cell,
    pub goal: Cell,
    pub max_steps: usize,
}

impl Default for MazeSpec {
    /// The 8x8 seeded maze used by the default experiments.
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            walls: None,
            seed: Some(7),
            wall_density: None,
            start: Cell::new(0, 0),
            goal: Cell::new(5, 5),
            max_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    width: u32,
    height: u32,
    /// Blocked edges as ordered pairs of cell ids.
    walls: BTreeSet<(u32, u32)>,
    start: Cell,
    goal: Cell,
    max_steps: usize,
    distance: Vec<Option<u32>>,
}

impl Maze {
    pub fn new(
        width: u32,
        height: u32,
        walls: &[[Cell; 2]],
        start: Cell,
        goal: Cell,
        max_steps: usize,
    ) -> Result<Self, MazeError> {
        check_shape(width, height, start, goal, max_steps)?;
        let mut blocked = BTreeSet::new();
        for &[a, b] in walls {
            for c in [a, b] {
                if c.x >= width || c.y >= height {
                    return Err(MazeError::CellOutOfRange { which: "wall", x: c.x, y: c.y });
                }
            }
            if a.x.abs_diff(b.x) + a.y.abs_diff(b.y) != 1 {
                return Err(MazeError::WallNotAdjacent(a, b));
            }
            blocked.insert(edge(a.y * width + a.x, b.y * width + b.x));
        }
        Self::assemble(width, height, blocked, start, goal, max_steps)
    }

    /// Random walls, each interior edge blocked with probability `density`.
    /// Layouts that disconnect start from goal are redrawn.
    pub fn generate(
        width: u32,
        height: u32,
        seed: u64,
        density: f64,
        start: Cell,
        goal: Cell,
        max_steps: usize,
    ) -> Result<Self, MazeError> {
        check_shape(width, height, start, goal, max_steps)?;
        if !(0.0..1.0).contains(&density) {
            return Err(MazeError::Density(density));
        }
        let edges = interior_edges(width, height);
        for attempt in 0..MAX_GENERATION_ATTEMPTS {
            let mut rng = stream_rng(seed, Stream::Maze, attempt);
            let blocked: BTreeSet<_> = edges.iter().copied().filter(|_| rng.gen::<f64>() < density).collect();
            match Self::assemble(width, height, blocked, start, goal, max_steps) {
                Err(MazeError::Disconnected) => continue,
                other => return other,
            }
        }
        Err(MazeError::GenerationFailed(MAX_GENERATION_ATTEMPTS))
    }

    pub fn from_spec(spec: &MazeSpec) -> Result<Self, MazeError> {
        match (&spec.walls, spec.seed) {
            (Some(walls), _) => Self::new(spec.width, spec.height, walls, spec.start, spec.goal, spec.max_steps),
            (None, Some(seed)) => Self::generate(
                spec.width,
                spec.height,
                seed,
                spec.wall_density.unwrap_or(DEFAULT_WALL_DENSITY),
                spec.start,
                spec.goal,
                spec.max_steps,
            ),
            (None, None) => Self::new(spec.width, spec.height, &[], spec.start, spec.goal, spec.max_steps),
        }
    }

    /// Spec with the walls listed explicitly.
    pub fn to_spec(&self) -> MazeSpec {
        MazeSpec {
            width: self.width,
            height: self.height,
            walls: Some(self.walls.iter().map(|&(a, b)| [self.cell(a), self.cell(b)]).collect()),
            seed: None,
            wall_density: None,
            start: self.start,
            goal: self.goal,
            max_steps: self.max_steps,
        }
    }

    fn assemble(
        width: u32,
        height: u32,
        walls: BTreeSet<(u32, u32)>,
        start: Cell,
        goal: Cell,
        max_steps: usize,
    ) -> Result<Self, MazeError> {
        let mut maze = Self { width, height, walls, start, goal, max_steps, distance: Vec::new() };
        maze.distance = maze.distances_to(goal);
        if maze.distance[maze.id(start) as usize].is_none() {
            return Err(MazeError::Disconnected);
        }
        Ok(maze)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn cell_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn walls(&self) -> impl Iterator<Item = (Cell, Cell)> + '_ {
        self.walls.iter().map(|&(a, b)| (self.cell(a), self.cell(b)))
    }

    pub fn id(&self, cell: Cell) -> u32 {
        cell.y * self.width + cell.x
    }

    pub fn state(&self, cell: Cell) -> StateId {
        StateId(self.id(cell))
    }

    pub fn cell(&self, id: u32) -> Cell {
        Cell::new(id % self.width, id / self.width)
    }

    pub fn is_goal(&self, cell: Cell) -> bool {
        cell == self.goal
    }

    pub fn is_blocked(&self, a: Cell, b: Cell) -> bool {
        self.walls.contains(&edge(self.id(a), self.id(b)))
    }

    /// Shortest wall-respecting distance to the goal, `None` if unreachable.
    pub fn distance(&self, cell: Cell) -> Option<u32> {
        self.distance[self.id(cell) as usize]
    }

    pub fn shortest_path_length(&self) -> u32 {
        self.distance(self.start).expect("start is connected by construction")
    }

    /// Breadth-first distances from `target` to every cell.
    fn distances_to(&self, target: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.cell_count()];
        dist[self.id(target) as usize] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.id(c) as usize].unwrap_or(0);
            for a in Action::ALL {
                let n = step(self, c, a);
                if dist[self.id(n) as usize].is_none() {
                    dist[self.id(n) as usize] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

fn check_shape(width: u32, height: u32, start: Cell, goal: Cell, max_steps: usize) -> Result<(), MazeError> {
    if width < 2 || height < 2 {
        return Err(MazeError::Dimensions { width, height });
    }
    for (which, c) in [("start", start), ("goal", goal)] {
        if c.x >= width || c.y >= height {
            return Err(MazeError::CellOutOfRange { which, x: c.x, y: c.y });
        }
    }
    if start == goal {
        return Err(MazeError::StartIsGoal);
    }
    if max_steps == 0 {
        return Err(MazeError::MaxSteps);
    }
    Ok(())
}

fn edge(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

fn interior_edges(width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let id = y * width + x;
            if x + 1 < width {
                edges.push((id, id + 1));
            }
            if y + 1 < height {
                edges.push((id, id + width));
            }
        }
    }
    edges
}

/// Moves one cell unless a wall or the boundary is in the way.
pub fn step(maze: &Maze, cell: Cell, action: Action) -> Cell {
    let next = match action {
        Action::Up if cell.y > 0 => Cell::new(cell.x, cell.y - 1),
        Action::Down if cell.y + 1 < maze.height => Cell::new(cell.x, cell.y + 1),
        Action::Left if cell.x > 0 => Cell::new(cell.x - 1, cell.y),
        Action::Right if cell.x + 1 < maze.width => Cell::new(cell.x + 1, cell.y),
        _ => return cell,
    };
    if maze.is_blocked(cell, next) {
        cell
    } else {
        next
    }
}

/// One episode. `states[t]` is the cell where `actions[t]` was emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub actions: Vec<Action>,
    pub behavior_probs: Vec<f64>,
    pub reached_goal: bool,
    pub length: usize,
    pub final_state: StateId,
}

/// Samples until the goal is entered or `max_steps` actions have been emitted.
pub fn rollout(maze: &Maze, policy: &TabularPolicy, seed: u64) -> Result<Trajectory, MazeError> {
    rollout_with_rng(maze, policy, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn rollout_with_rng<R: Rng>(maze: &Maze, policy: &TabularPolicy, rng: &mut R) -> Result<Trajectory, MazeError> {
    if policy.actions() != Action::COUNT {
        return Err(MazeError::Alphabet(policy.actions()));
    }
    let mut cell = maze.start;
    let mut traj = Trajectory {
        states: Vec::with_capacity(maze.max_steps),
        actions: Vec::with_capacity(maze.max_steps),
        behavior_probs: Vec::with_capacity(maze.max_steps),
        reached_goal: false,
        length: 0,
        final_state: maze.state(cell),
    };
    while traj.length < maze.max_steps {
        let state = maze.state(cell);
        let probs = policy.action_probs(state);
        let index = WeightedIndex::new(&probs).map_err(|_| MazeError::Probabilities(state))?.sample(rng);
        let action = Action::ALL[index];
        traj.states.push(state);
        traj.actions.push(action);
        traj.behavior_probs.push(probs[index]);
        traj.length += 1;
        cell = step(maze, cell, action);
        if maze.is_goal(cell) {
            traj.reached_goal = true;
            break;
        }
    }
    traj.final_state = maze.state(cell);
    Ok(traj)
}

/// 1 if the goal was reached, including on the final allowed step.
pub fn accuracy_reward(trajectory: &Trajectory) -> f64 {
    if trajectory.reached_goal {
        1.0
    } else {
        0.0
    }
}

/// Decrease in goal distance caused by `action`: +1, 0 or -1.
///
/// Only for measurement; training never reads it.
pub fn latent_utility(maze: &Maze, cell: Cell, action: Action) -> f64 {
    let d = |c: Cell| maze.distance(c).map_or(0.0, f64::from);
    d(cell) - d(step(maze, cell, action))
}

pub fn write_trajectories_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<(), MazeError> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(w: u32, h: u32) -> Maze {
        Maze::new(w, h, &[], Cell::new(0, 0), Cell::new(w - 1, h - 1), 64).unwrap()
    }

    #[test]
    fn two_by_two_open() {
        assert_eq!(open(2, 2).shortest_path_length(), 2);
    }

    #[test]
    fn construction_errors() {
        let c = Cell::new;
        assert!(matches!(Maze::new(1, 4, &[], c(0, 0), c(0, 3), 8), Err(MazeError::Dimensions { .. })));
        assert!(matches!(Maze::new(3, 3, &[], c(1, 1), c(1, 1), 8), Err(MazeError::StartIsGoal)));
        assert!(matches!(
            Maze::new(3, 3, &[], c(0, 0), c(3, 0), 8),
            Err(MazeError::CellOutOfRange { which: "goal", .. })
        ));
        assert!(matches!(
            Maze::new(3, 3, &[[c(0, 0), c(2, 0)]], c(0, 0), c(2, 2), 8),
            Err(MazeError::WallNotAdjacent(..))
        ));
        let sealed = [[c(2, 2), c(1, 2)], [c(2, 2), c(2, 1)]];
        assert!(matches!(Maze::new(3, 3, &sealed, c(0, 0), c(2, 2), 8), Err(MazeError::Disconnected)));
    }

    #[test]
    fn step_rules() {
        let c = Cell::new;
        let maze = Maze::new(4, 4, &[[c(1, 1), c(1, 2)]], c(0, 0), c(3, 3), 16).unwrap();
        assert_eq!(step(&maze, c(1, 1), Action::Right), c(2, 1));
        assert_eq!(step(&maze, c(1, 1), Action::Up), c(1, 0));
        assert_eq!(step(&maze, c(1, 1), Action::Down), c(1, 1));
        assert_eq!(step(&maze, c(1, 2), Action::Up), c(1, 2));
        assert_eq!(step(&maze, c(0, 2), Action::Left), c(0, 2));
        assert_eq!(step(&maze, c(3, 0), Action::Up), c(3, 0));
        for a in [c(0, 0), c(2, 3), c(3, 3)] {
            assert_eq!(step(&maze, a, Action::Stay), a);
        }
    }

    #[test]
    fn utility_signs() {
        let c = Cell::new;
        let maze = Maze::new(3, 3, &[[c(0, 0), c(1, 0)]], c(0, 0), c(2, 2), 16).unwrap();
        assert_eq!(latent_utility(&maze, c(0, 0), Action::Down), 1.0);
        assert_eq!(latent_utility(&maze, c(0, 0), Action::Stay), 0.0);
        assert_eq!(latent_utility(&maze, c(0, 0), Action::Right), 0.0);
        assert_eq!(latent_utility(&maze, c(0, 1), Action::Up), -1.0);
    }

    #[test]
    fn point_mass_policy_follows_path() {
        let maze = open(3, 3);
        let mut policy = TabularPolicy::uniform(5).unwrap();
        // Right, right, down, down.
        for (id, a) in [(0, Action::Right), (1, Action::Right), (2, Action::Down), (5, Action::Down)] {
            let mut row = vec![-50.0; 5];
            row[a.index()] = 50.0;
            policy.set_logits(StateId(id), row).unwrap();
        }
        let t = rollout(&maze, &policy, 3).unwrap();
        assert!(t.reached_goal);
        assert_eq!(t.length, 4);
        assert_eq!(t.states, vec![StateId(0), StateId(1), StateId(2), StateId(5)]);
        assert_eq!(t.final_state, StateId(8));
        assert_eq!(accuracy_reward(&t), 1.0);
    }

    #[test]
    fn goal_on_last_step_counts() {
        let c = Cell::new;
        let maze = Maze::new(2, 2, &[], c(0, 0), c(1, 0), 1).unwrap();
        let mut policy = TabularPolicy::uniform(5).unwrap();
        let mut row = vec![-50.0; 5];
        row[Action::Right.index()] = 50.0;
        policy.set_logits(StateId(0), row).unwrap();
        let t = rollout(&maze, &policy, 0).unwrap();
        assert_eq!((t.length, t.reached_goal), (1, true));
    }

    #[test]
    fn stay_policy_never_arrives() {
        let maze = open(4, 4);
        let mut policy = TabularPolicy::uniform(5).unwrap();
        let mut row = vec![-50.0; 5];
        row[Action::Stay.index()] = 50.0;
        policy.set_logits(StateId(0), row).unwrap();
        let t = rollout(&maze, &policy, 0).unwrap();
        assert_eq!((t.length, t.reached_goal), (64, false));
        assert_eq!(accuracy_reward(&t), 0.0);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let maze = Maze::from_spec(&MazeSpec::default()).unwrap();
        let policy = TabularPolicy::uniform(5).unwrap();
        assert_eq!(rollout(&maze, &policy, 11).unwrap(), rollout(&maze, &policy, 11).unwrap());
        assert!(rollout(&maze, &TabularPolicy::uniform(4).unwrap(), 0).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let maze = Maze::from_spec(&MazeSpec::default()).unwrap();
        let json = serde_json::to_string(&maze.to_spec()).unwrap();
        let back = Maze::from_spec(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, maze);
        assert!(serde_json::from_str::<MazeSpec>(
            r#"{"width":2,"height":2,"start":[0,0],"goal":[1,1],"max_steps":4,"bogus":1}"#
        )
        .is_err());
    }
}
