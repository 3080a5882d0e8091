//! Partially observable grid mazes where an indicator seen at the start
//! decides which goal is correct.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};

pub const STEP_PENALTY: f64 = -0.01;
pub const IMAZE_TRAIN_LENGTHS: [usize; 3] = [5, 7, 9];
pub const IMAZE_EVAL_LENGTHS: [usize; 12] = [4, 6, 8, 10, 15, 20, 25, 30, 35, 40, 100, 200];
const MAX_GENERATION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 3] = [Self::Forward, Self::TurnLeft, Self::TurnRight];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| contract(format!("maze action {i} outside 0..3")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    const ALL: [Heading; 4] = [Self::North, Self::East, Self::South, Self::West];

    fn left(self) -> Self {
        Self::ALL[(self as usize + 3) % 4]
    }

    fn right(self) -> Self {
        Self::ALL[(self as usize + 1) % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Self::North => (-1, 0),
            Self::East => (0, 1),
            Self::South => (1, 0),
            Self::West => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 2] = [Self::Green, Self::Yellow];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Open,
    /// Goal tagged with the indicator color that makes it correct.
    Goal(Color),
}

/// Tokens of the symbolic observation vocabulary.
pub mod obs {
    pub const FRONT_WALL: usize = 0;
    pub const FRONT_OPEN: usize = 1;
    pub const FRONT_GOAL_GREEN: usize = 2;
    pub const FRONT_GOAL_YELLOW: usize = 3;
    pub const LEFT_WALL: usize = 4;
    pub const LEFT_OPEN: usize = 5;
    pub const RIGHT_WALL: usize = 6;
    pub const RIGHT_OPEN: usize = 7;
    pub const INDICATOR_NONE: usize = 8;
    pub const INDICATOR_GREEN: usize = 9;
    pub const INDICATOR_YELLOW: usize = 10;
    pub const HEADING: usize = 11;
    pub const VOCAB: usize = 15;

    pub const NAMES: [&str; VOCAB] = [
        "front:wall",
        "front:open",
        "front:goal-green",
        "front:goal-yellow",
        "left:wall",
        "left:open",
        "right:wall",
        "right:open",
        "indicator:none",
        "indicator:green",
        "indicator:yellow",
        "heading:north",
        "heading:east",
        "heading:south",
        "heading:west",
    ];
}

/// Five tokens: front cell, left and right openness, indicator, heading.
pub type Observation = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Layout plus the indicator placement for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    pub grid: Vec<Vec<Cell>>,
    pub start: (usize, usize),
    pub heading: Heading,
    pub indicator: Color,
    pub max_steps: usize,
}

impl MazeSpec {
    pub fn cell(&self, (r, c): (usize, usize)) -> Cell {
        self.grid[r][c]
    }

    fn neighbour(&self, (r, c): (usize, usize), h: Heading) -> Option<(usize, usize)> {
        let (dr, dc) = h.delta();
        let r = r.checked_add_signed(dr)?;
        let c = c.checked_add_signed(dc)?;
        (r < self.grid.len() && c < self.grid[r].len()).then_some((r, c))
    }

    fn cell_towards(&self, pos: (usize, usize), h: Heading) -> Cell {
        self.neighbour(pos, h).map_or(Cell::Wall, |p| self.cell(p))
    }

    pub fn goals(&self) -> Vec<((usize, usize), Color)> {
        let mut out = Vec::new();
        for (r, row) in self.grid.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if let Cell::Goal(color) = cell {
                    out.push(((r, c), *color));
                }
            }
        }
        out
    }

    pub fn correct_goal(&self) -> Option<(usize, usize)> {
        self.goals()
            .into_iter()
            .find(|(_, c)| *c == self.indicator)
            .map(|(p, _)| p)
    }

    /// Cells reachable from the start through non-wall cells.
    pub fn reachable(&self) -> Vec<Vec<bool>> {
        let mut seen: Vec<Vec<bool>> = self.grid.iter().map(|r| vec![false; r.len()]).collect();
        let mut queue = VecDeque::from([self.start]);
        seen[self.start.0][self.start.1] = true;
        while let Some(p) = queue.pop_front() {
            for h in Heading::ALL {
                if let Some(q) = self.neighbour(p, h) {
                    if self.cell(q) != Cell::Wall && !seen[q.0][q.1] {
                        seen[q.0][q.1] = true;
                        // Goals end the episode, so paths do not pass through them.
                        if self.cell(q) == Cell::Open {
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        seen
    }
}

/// Environment state for one episode.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    spec: MazeSpec,
    pos: (usize, usize),
    heading: Heading,
    steps: usize,
    done: bool,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> Self {
        Self {
            pos: spec.start,
            heading: spec.heading,
            spec,
            steps: 0,
            done: false,
        }
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    pub fn position(&self) -> ((usize, usize), Heading) {
        (self.pos, self.heading)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> Observation {
        self.pos = self.spec.start;
        self.heading = self.spec.heading;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let front = match self.spec.cell_towards(self.pos, self.heading) {
            Cell::Wall => obs::FRONT_WALL,
            Cell::Open => obs::FRONT_OPEN,
            Cell::Goal(Color::Green) => obs::FRONT_GOAL_GREEN,
            Cell::Goal(Color::Yellow) => obs::FRONT_GOAL_YELLOW,
        };
        let side = |h: Heading, wall: usize, open: usize| {
            if self.spec.cell_towards(self.pos, h) == Cell::Wall {
                wall
            } else {
                open
            }
        };
        let indicator = if self.pos == self.spec.start {
            match self.spec.indicator {
                Color::Green => obs::INDICATOR_GREEN,
                Color::Yellow => obs::INDICATOR_YELLOW,
            }
        } else {
            obs::INDICATOR_NONE
        };
        vec![
            front,
            side(self.heading.left(), obs::LEFT_WALL, obs::LEFT_OPEN),
            side(self.heading.right(), obs::RIGHT_WALL, obs::RIGHT_OPEN),
            indicator,
            obs::HEADING + self.heading as usize,
        ]
    }

    pub fn step(&mut self, action: Action) -> Result<Step> {
        if self.done {
            return Err(contract("step after the episode ended"));
        }
        self.steps += 1;
        let mut reward = STEP_PENALTY;
        let mut success = false;
        match action {
            Action::TurnLeft => self.heading = self.heading.left(),
            Action::TurnRight => self.heading = self.heading.right(),
            Action::Forward => {
                if let Some(next) = self.spec.neighbour(self.pos, self.heading) {
                    match self.spec.cell(next) {
                        Cell::Wall => {}
                        Cell::Open => self.pos = next,
                        Cell::Goal(color) => {
                            self.pos = next;
                            self.done = true;
                            success = color == self.spec.indicator;
                            reward += if success { 1.0 } else { -1.0 };
                        }
                    }
                }
            }
        }
        if self.steps >= self.spec.max_steps {
            self.done = true;
        }
        Ok(Step {
            observation: self.observe(),
            reward,
            done: self.done,
            success,
        })
    }

    pub fn step_index(&mut self, action: usize) -> Result<Step> {
        self.step(Action::from_index(action)?)
    }
}

/// Vertical corridor of `length` cells ending in a T junction with an exit on
/// each side. Green means the left exit, yellow the right one.
pub fn imaze(length: usize, indicator: Color) -> Result<MazeSpec> {
    if length < 2 {
        return Err(contract(format!("corridor length {length} below 2")));
    }
    let rows = length + 3;
    let mut grid = vec![vec![Cell::Wall; 5]; rows];
    grid[1][1] = Cell::Goal(Color::Green);
    grid[1][2] = Cell::Open;
    grid[1][3] = Cell::Goal(Color::Yellow);
    for row in grid.iter_mut().take(length + 2).skip(2) {
        row[2] = Cell::Open;
    }
    Ok(MazeSpec {
        grid,
        start: (length + 1, 2),
        heading: Heading::North,
        indicator,
        max_steps: 4 * (length + 10),
    })
}

pub fn imaze_env<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Result<MazeEnv> {
    let color = *Color::ALL.choose(rng).expect("two colors");
    Ok(MazeEnv::new(imaze(length, color)?))
}

/// Maze size ranges (cells per side) for the random-maze task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MazeSplit {
    Train,
    Test,
    Large,
}

impl MazeSplit {
    pub fn sizes(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Self::Train | Self::Test => 3..=5,
            Self::Large => 6..=8,
        }
    }
}

impl fmt::Display for MazeSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Large => "large",
        })
    }
}

impl FromStr for MazeSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown maze split {other:?}"))),
        }
    }
}

/// Random perfect maze of `size x size` cells with the indicator at the start
/// and one goal per color.
pub fn random_maze<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<MazeSpec> {
    if size < 2 {
        return Err(contract(format!("maze size {size} below 2")));
    }
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let spec = carve(size, rng);
        if spec.correct_goal().is_some() && spec.goals().len() == 2 {
            let seen = spec.reachable();
            if spec.goals().iter().all(|((r, c), _)| seen[*r][*c]) {
                return Ok(spec);
            }
        }
    }
    Err(Error::Generation(format!("no solvable {size}x{size} maze")))
}

fn carve<R: Rng + ?Sized>(size: usize, rng: &mut R) -> MazeSpec {
    let n = 2 * size + 1;
    let mut grid = vec![vec![Cell::Wall; n]; n];
    let mut visited = vec![vec![false; size]; size];
    let mut stack = vec![(rng.gen_range(0..size), rng.gen_range(0..size))];
    visited[stack[0].0][stack[0].1] = true;
    grid[2 * stack[0].0 + 1][2 * stack[0].1 + 1] = Cell::Open;
    while let Some(&(r, c)) = stack.last() {
        let mut next = Vec::new();
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            if let (Some(nr), Some(nc)) = (r.checked_add_signed(dr), c.checked_add_signed(dc)) {
                if nr < size && nc < size && !visited[nr][nc] {
                    next.push((nr, nc));
                }
            }
        }
        match next.choose(rng) {
            None => {
                stack.pop();
            }
            Some(&(nr, nc)) => {
                visited[nr][nc] = true;
                grid[r + nr + 1][c + nc + 1] = Cell::Open;
                grid[2 * nr + 1][2 * nc + 1] = Cell::Open;
                stack.push((nr, nc));
            }
        }
    }
    let cells: Vec<(usize, usize)> = (0..size)
        .flat_map(|r| (0..size).map(move |c| (2 * r + 1, 2 * c + 1)))
        .collect();
    let picks: Vec<(usize, usize)> = cells.choose_multiple(rng, 3).copied().collect();
    let start = picks[0];
    grid[picks[1].0][picks[1].1] = Cell::Goal(Color::Green);
    grid[picks[2].0][picks[2].1] = Cell::Goal(Color::Yellow);
    let heading = *Heading::ALL.choose(rng).expect("four headings");
    let indicator = *Color::ALL.choose(rng).expect("two colors");
    MazeSpec {
        grid,
        start,
        heading,
        indicator,
        max_steps: 4 * (size * size + 10),
    }
}

pub fn random_maze_env<R: Rng + ?Sized>(split: MazeSplit, rng: &mut R) -> Result<MazeEnv> {
    let size = rng.gen_range(split.sizes());
    Ok(MazeEnv::new(random_maze(size, rng)?))
}

/// Actions of a shortest route from the start to the correct goal, computed
/// with full knowledge of the layout.
pub fn shortest_route(spec: &MazeSpec) -> Option<Vec<Action>> {
    let goal = spec.correct_goal()?;
    let state = |p: (usize, usize), h: Heading| (p, h);
    let mut prev = std::collections::HashMap::new();
    let start = state(spec.start, spec.heading);
    let mut queue = VecDeque::from([start]);
    prev.insert(start, None);
    while let Some((p, h)) = queue.pop_front() {
        if p == goal {
            let mut actions = Vec::new();
            let mut cur = (p, h);
            while let Some(&Some((before, a))) = prev.get(&cur) {
                actions.push(a);
                cur = before;
            }
            actions.reverse();
            return Some(actions);
        }
        if matches!(spec.cell(p), Cell::Goal(_)) {
            continue;
        }
        let mut moves = vec![(Action::TurnLeft, (p, h.left())), (Action::TurnRight, (p, h.right()))];
        if let Some(q) = spec.neighbour(p, h) {
            if spec.cell(q) != Cell::Wall {
                moves.push((Action::Forward, (q, h)));
            }
        }
        for (a, s) in moves {
            if let std::collections::hash_map::Entry::Vacant(e) = prev.entry(s) {
                e.insert(Some(((p, h), a)));
                queue.push_back(s);
            }
        }
    }
    None
}
