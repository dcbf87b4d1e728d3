//! Deterministic four-rooms gridworld.
//!
//! States are full `(x, y, dir)` triples, actions are the three MiniGrid
//! navigation moves, and dynamics are deterministic. Everything here is an
//! immutable value; edits ([`ShiftEdit`]) produce new configurations.

mod layout;
mod search;
mod shift;

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::LayoutParseError;
pub use search::{reachable_states, shortest_action_path, shortest_path_where};
pub use shift::{apply_shift, ShiftEdit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("no action path from {from} to {to}")]
    Unreachable { from: AgentState, to: AgentState },
    #[error("unknown room `{0}`")]
    UnknownRoom(String),
    #[error(transparent)]
    Parse(#[from] LayoutParseError),
}

/// A grid cell, `x` is the column and `y` the row (row 0 at the top).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Agent heading. `N` points towards row 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Dir {
        Dir::ALL[i % 4]
    }

    pub fn left(self) -> Dir {
        Dir::from_index(self.index() + 3)
    }

    pub fn right(self) -> Dir {
        Dir::from_index(self.index() + 1)
    }

    /// Clockwise rotation from north in degrees.
    pub fn degrees(self) -> u32 {
        self.index() as u32 * 90
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Dir::N => (0, -1),
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub x: usize,
    pub y: usize,
    pub dir: Dir,
}

impl AgentState {
    pub const fn new(x: usize, y: usize, dir: Dir) -> Self {
        AgentState { x, y, dir }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }

    pub fn at(cell: Cell, dir: Dir) -> Self {
        AgentState::new(cell.x, cell.y, dir)
    }
}

impl fmt::Display for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {:?})", self.x, self.y, self.dir)
    }
}

/// The three navigation actions, in their fixed index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::Forward];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

/// Named rectangular region of interior cells, bounds inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub id: String,
    pub min: Cell,
    pub max: Cell,
}

impl Room {
    pub fn contains(&self, c: Cell) -> bool {
        (self.min.x..=self.max.x).contains(&c.x) && (self.min.y..=self.max.y).contains(&c.y)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.min.y..=self.max.y).flat_map(move |y| (self.min.x..=self.max.x).map(move |x| Cell::new(x, y)))
    }
}

pub const TOP_LEFT: &str = "top-left";
pub const TOP_RIGHT: &str = "top-right";
pub const BOTTOM_LEFT: &str = "bottom-left";
pub const BOTTOM_RIGHT: &str = "bottom-right";
pub const FOUR_ROOMS: [&str; 4] = [TOP_LEFT, TOP_RIGHT, BOTTOM_LEFT, BOTTOM_RIGHT];

/// Static grid layout: walls, goal and room regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    id: String,
    width: usize,
    height: usize,
    walls: Vec<bool>,
    goal: Cell,
    rooms: Vec<Room>,
}

/// Door offsets along each interior wall segment, measured from the outer
/// border end of the segment (0 is the cell next to the border).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoorOffsets {
    /// Vertical wall, upper segment.
    pub top: usize,
    /// Vertical wall, lower segment.
    pub bottom: usize,
    /// Horizontal wall, left segment.
    pub left: usize,
    /// Horizontal wall, right segment.
    pub right: usize,
}

impl DoorOffsets {
    /// One door in the middle of every segment.
    pub fn centered(size: usize) -> Self {
        let mid = size.saturating_sub(3) / 4;
        DoorOffsets { top: mid, bottom: mid, left: mid, right: mid }
    }
}

/// Builds the four-rooms layout: an outer wall, a one-cell cross dividing the
/// interior into quadrants, one door per cross-arm and the goal in the
/// top-left interior corner.
pub fn build_four_rooms(size: usize, doors: DoorOffsets) -> Result<GridSpec, GridError> {
    if size < 9 || size.is_multiple_of(2) {
        return Err(GridError::InvalidLayout(format!("size must be odd and >= 9, got {size}")));
    }
    let mid = size / 2;
    let seg = mid - 1;
    for (name, off) in [("top", doors.top), ("bottom", doors.bottom), ("left", doors.left), ("right", doors.right)] {
        if off >= seg {
            return Err(GridError::InvalidLayout(format!("{name} door offset {off} outside its wall segment of length {seg}")));
        }
    }
    let mut walls = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            if x == 0 || y == 0 || x == size - 1 || y == size - 1 || x == mid || y == mid {
                walls[y * size + x] = true;
            }
        }
    }
    let doors = [
        Cell::new(mid, 1 + doors.top),
        Cell::new(mid, size - 2 - doors.bottom),
        Cell::new(1 + doors.left, mid),
        Cell::new(size - 2 - doors.right, mid),
    ];
    for d in doors {
        walls[d.y * size + d.x] = false;
    }
    GridSpec::new(format!("four-rooms-{size}"), size, size, walls, Cell::new(1, 1))
}

/// The default 13x13 layout with centred doors.
pub fn default_four_rooms() -> GridSpec {
    build_four_rooms(13, DoorOffsets::centered(13)).expect("default layout is valid")
}

impl GridSpec {
    /// Validates and builds a spec. Rooms are inferred from the wall layout.
    pub fn new(id: impl Into<String>, width: usize, height: usize, walls: Vec<bool>, goal: Cell) -> Result<GridSpec, GridError> {
        if width < 3 || height < 3 {
            return Err(GridError::InvalidLayout(format!("grid {width}x{height} too small")));
        }
        if walls.len() != width * height {
            return Err(GridError::InvalidLayout("wall mask size mismatch".into()));
        }
        let rooms = infer_rooms(width, height, &walls);
        let spec = GridSpec { id: id.into(), width, height, walls, goal, rooms };
        spec.validate()?;
        Ok(spec)
    }

    /// An open box: walls on the border only.
    pub fn open(width: usize, height: usize, goal: Cell) -> Result<GridSpec, GridError> {
        let walls = (0..width * height)
            .map(|i| {
                let (x, y) = (i % width, i / width);
                x == 0 || y == 0 || x == width - 1 || y == height - 1
            })
            .collect();
        GridSpec::new(format!("open-{width}x{height}"), width, height, walls, goal)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let g = self.goal;
        if !self.in_bounds(g) {
            return Err(GridError::InvalidLayout(format!("goal {g} out of bounds")));
        }
        if self.is_wall(g) {
            return Err(GridError::InvalidLayout(format!("goal {g} is a wall")));
        }
        let containing = self.rooms.iter().filter(|r| r.contains(g)).count();
        if containing != 1 {
            return Err(GridError::InvalidLayout(format!("goal {g} lies in {containing} rooms")));
        }
        for x in 0..self.width {
            for y in [0, self.height - 1] {
                if !self.is_wall(Cell::new(x, y)) {
                    return Err(GridError::InvalidLayout(format!("border cell ({x}, {y}) is open")));
                }
            }
        }
        for y in 0..self.height {
            for x in [0, self.width - 1] {
                if !self.is_wall(Cell::new(x, y)) {
                    return Err(GridError::InvalidLayout(format!("border cell ({x}, {y}) is open")));
                }
            }
        }
        let open: Vec<Cell> = self.open_cells().collect();
        let seed = AgentState::at(g, Dir::N);
        let reached: BTreeSet<Cell> = reachable_states(self, &[seed]).into_iter().map(|s| s.cell()).collect();
        if reached.len() != open.len() {
            return Err(GridError::InvalidLayout(format!(
                "{} of {} open cells are disconnected from the goal",
                open.len() - reached.len(),
                open.len()
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn rooms(&self) -> &[Room] {
        &self.rooms
    }

    pub fn room(&self, id: &str) -> Result<&Room, GridError> {
        self.rooms.iter().find(|r| r.id == id).ok_or_else(|| GridError::UnknownRoom(id.to_string()))
    }

    /// Room containing `cell`, if any (door cells belong to none).
    pub fn room_of(&self, cell: Cell) -> Option<&Room> {
        self.rooms.iter().find(|r| r.contains(cell))
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.walls[c.y * self.width + c.x]
    }

    pub fn is_border(&self, c: Cell) -> bool {
        c.x == 0 || c.y == 0 || c.x + 1 == self.width || c.y + 1 == self.height
    }

    /// Wall cells in row-major order.
    pub fn wall_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(|c| self.is_wall(*c))
    }

    /// Non-wall cells in row-major order.
    pub fn open_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(|c| !self.is_wall(*c))
    }

    fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Cell::new(x, y)))
    }

    /// All `(cell, dir)` states on open cells.
    pub fn all_states(&self) -> Vec<AgentState> {
        self.open_cells().flat_map(|c| Dir::ALL.map(|d| AgentState::at(c, d))).collect()
    }

    pub fn is_valid_state(&self, s: &AgentState) -> bool {
        !self.is_wall(s.cell())
    }

    /// Cell one step ahead of `s`, or `None` when that leaves the grid.
    pub fn ahead(&self, s: &AgentState) -> Option<Cell> {
        let (dx, dy) = s.dir.offset();
        let x = s.x.checked_add_signed(dx)?;
        let y = s.y.checked_add_signed(dy)?;
        let c = Cell::new(x, y);
        self.in_bounds(c).then_some(c)
    }

    /// Deterministic transition. Returns the next state and whether it sits
    /// on the goal cell.
    pub fn step(&self, s: &AgentState, a: Action) -> (AgentState, bool) {
        let next = match a {
            Action::TurnLeft => AgentState { dir: s.dir.left(), ..*s },
            Action::TurnRight => AgentState { dir: s.dir.right(), ..*s },
            Action::Forward => match self.ahead(s) {
                Some(c) if !self.is_wall(c) => AgentState::at(c, s.dir),
                _ => *s,
            },
        };
        (next, next.cell() == self.goal)
    }

    pub(crate) fn set_wall(&mut self, c: Cell, wall: bool) {
        let w = self.width;
        self.walls[c.y * w + c.x] = wall;
        self.rooms = infer_rooms(self.width, self.height, &self.walls);
    }

    pub(crate) fn set_goal(&mut self, c: Cell) {
        self.goal = c;
    }
}

/// Four quadrants when the grid has odd dimensions and the central cross is
/// present (allowing door gaps); otherwise a single interior room.
fn infer_rooms(width: usize, height: usize, walls: &[bool]) -> Vec<Room> {
    let interior = Room { id: "interior".into(), min: Cell::new(1, 1), max: Cell::new(width - 2, height - 2) };
    if width < 5 || height < 5 || width.is_multiple_of(2) || height.is_multiple_of(2) {
        return vec![interior];
    }
    let (mx, my) = (width / 2, height / 2);
    let wall = |x: usize, y: usize| walls[y * width + x];
    let col_gaps = (1..height - 1).filter(|&y| !wall(mx, y)).count();
    let row_gaps = (1..width - 1).filter(|&x| !wall(x, my)).count();
    // A cross with at most two gaps per arm still reads as four rooms.
    if !wall(mx, my) || col_gaps > 4 || row_gaps > 4 {
        return vec![interior];
    }
    let quad =
        |id: &str, x0: usize, x1: usize, y0: usize, y1: usize| Room { id: id.into(), min: Cell::new(x0, y0), max: Cell::new(x1, y1) };
    vec![
        quad(TOP_LEFT, 1, mx - 1, 1, my - 1),
        quad(TOP_RIGHT, mx + 1, width - 2, 1, my - 1),
        quad(BOTTOM_LEFT, 1, mx - 1, my + 1, height - 2),
        quad(BOTTOM_RIGHT, mx + 1, width - 2, my + 1, height - 2),
    ]
}

/// Categorical distribution over agent states with explicit support.
///
/// The support is kept sorted so that lookups and serialization are
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StartRepr", into = "StartRepr")]
pub struct StartDistribution {
    support: Vec<AgentState>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StartRepr {
    support: Vec<AgentState>,
    probs: Vec<f64>,
}

impl TryFrom<StartRepr> for StartDistribution {
    type Error = GridError;
    fn try_from(r: StartRepr) -> Result<Self, GridError> {
        StartDistribution::new(r.support.into_iter().zip(r.probs).collect())
    }
}

impl From<StartDistribution> for StartRepr {
    fn from(d: StartDistribution) -> Self {
        StartRepr { support: d.support, probs: d.probs }
    }
}

impl StartDistribution {
    pub fn new(mut weighted: Vec<(AgentState, f64)>) -> Result<Self, GridError> {
        if weighted.is_empty() {
            return Err(GridError::InvalidConfig("empty start distribution".into()));
        }
        weighted.sort_by_key(|a| a.0);
        if weighted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GridError::InvalidConfig("duplicate start state".into()));
        }
        if weighted.iter().any(|(_, p)| !p.is_finite() || *p < 0.0) {
            return Err(GridError::InvalidConfig("negative or non-finite start probability".into()));
        }
        let total: f64 = weighted.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(GridError::InvalidConfig(format!("start probabilities sum to {total}")));
        }
        let (support, probs) = weighted.into_iter().unzip();
        Ok(StartDistribution { support, probs })
    }

    pub fn uniform(states: impl IntoIterator<Item = AgentState>) -> Result<Self, GridError> {
        let mut states: Vec<AgentState> = states.into_iter().collect();
        states.sort();
        states.dedup();
        let p = 1.0 / states.len().max(1) as f64;
        let mut probs = vec![p; states.len()];
        // Absorb rounding so the invariant holds exactly for any support size.
        if let Some(last) = probs.last_mut() {
            *last = 1.0 - p * (states.len() - 1) as f64;
        }
        StartDistribution::new(states.into_iter().zip(probs).collect())
    }

    pub fn point(s: AgentState) -> Self {
        StartDistribution { support: vec![s], probs: vec![1.0] }
    }

    /// Uniform over every open, non-goal cell of `room` in all four headings.
    pub fn room(spec: &GridSpec, room: &str) -> Result<Self, GridError> {
        let r = spec.room(room)?;
        let states = r.cells().filter(|c| !spec.is_wall(*c) && *c != spec.goal()).flat_map(|c| Dir::ALL.map(|d| AgentState::at(c, d)));
        StartDistribution::uniform(states)
    }

    pub fn support(&self) -> &[AgentState] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, s: &AgentState) -> f64 {
        self.support.binary_search(s).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentState {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in self.support.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *s;
            }
        }
        // Only reachable through rounding in the last bucket.
        *self.support.iter().zip(&self.probs).rev().find(|(_, p)| **p > 0.0).map(|(s, _)| s).unwrap()
    }
}

pub const DEFAULT_HORIZON: usize = 100;

/// An environment: layout, start distribution, horizon and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub id: String,
    #[serde(with = "layout::serde_spec")]
    pub spec: GridSpec,
    pub start: StartDistribution,
    pub horizon: usize,
    pub step_reward: f64,
    pub goal_reward: f64,
}

impl EnvConfig {
    /// Sparse-reward environment starting uniformly in `room`.
    pub fn new(spec: GridSpec, room: &str) -> Result<Self, GridError> {
        let start = StartDistribution::room(&spec, room)?;
        let id = format!("{}/{}", spec.id(), room);
        let env = EnvConfig { id, spec, start, horizon: DEFAULT_HORIZON, step_reward: 0.0, goal_reward: 1.0 };
        env.validate()?;
        Ok(env)
    }

    pub fn with_start(spec: GridSpec, id: impl Into<String>, start: StartDistribution) -> Result<Self, GridError> {
        let env = EnvConfig { id: id.into(), spec, start, horizon: DEFAULT_HORIZON, step_reward: 0.0, goal_reward: 1.0 };
        env.validate()?;
        Ok(env)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.horizon == 0 {
            return Err(GridError::InvalidConfig("horizon must be >= 1".into()));
        }
        if let Some(s) = self.start.support().iter().find(|s| !self.spec.is_valid_state(s)) {
            return Err(GridError::InvalidConfig(format!("start state {s} is on a wall")));
        }
        Ok(())
    }

    /// Transition with rewards: `(next, reward, done)`.
    pub fn step(&self, s: &AgentState, a: Action) -> (AgentState, f64, bool) {
        let (next, at_goal) = self.spec.step(s, a);
        let r = if at_goal { self.goal_reward } else { self.step_reward };
        (next, r, at_goal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_shape() {
        let spec = default_four_rooms();
        assert_eq!(spec.rooms().len(), 4);
        assert_eq!(spec.open_cells().count(), 104);
        assert_eq!(spec.goal(), Cell::new(1, 1));
        assert_eq!(spec.room_of(spec.goal()).unwrap().id, TOP_LEFT);
        // doors mid-segment
        for d in [Cell::new(6, 3), Cell::new(6, 9), Cell::new(3, 6), Cell::new(9, 6)] {
            assert!(!spec.is_wall(d), "door {d}");
            assert!(spec.room_of(d).is_none());
        }
    }

    #[test]
    fn four_rooms_size_checks() {
        assert!(matches!(build_four_rooms(8, DoorOffsets::centered(8)), Err(GridError::InvalidLayout(_))));
        assert!(matches!(build_four_rooms(7, DoorOffsets::centered(7)), Err(GridError::InvalidLayout(_))));
        let spec = build_four_rooms(9, DoorOffsets::centered(9)).unwrap();
        assert_eq!(spec.open_cells().count(), 4 * 9 + 4);
        let bad = DoorOffsets { top: 3, ..DoorOffsets::centered(9) };
        assert!(matches!(build_four_rooms(9, bad), Err(GridError::InvalidLayout(_))));
    }

    #[test]
    fn rotation_table() {
        let spec = default_four_rooms();
        let s = AgentState::new(3, 3, Dir::N);
        assert_eq!(spec.step(&s, Action::TurnLeft).0, AgentState::new(3, 3, Dir::W));
        assert_eq!(spec.step(&s, Action::TurnRight).0, AgentState::new(3, 3, Dir::E));
        let env = EnvConfig::new(spec, TOP_LEFT).unwrap();
        assert_eq!(env.step(&s, Action::TurnLeft), (AgentState::new(3, 3, Dir::W), 0.0, false));
    }

    #[test]
    fn blocked_forward_and_goal() {
        let env = EnvConfig::new(default_four_rooms(), TOP_LEFT).unwrap();
        let s = AgentState::new(1, 2, Dir::W);
        assert_eq!(env.step(&s, Action::Forward), (s, 0.0, false));
        let s = AgentState::new(1, 2, Dir::N);
        assert_eq!(env.step(&s, Action::Forward), (AgentState::new(1, 1, Dir::N), 1.0, true));
    }

    #[test]
    fn start_room_excludes_goal_and_walls() {
        let spec = default_four_rooms();
        let d = StartDistribution::room(&spec, TOP_LEFT).unwrap();
        assert_eq!(d.support().len(), 24 * 4);
        assert!(d.support().iter().all(|s| s.cell() != spec.goal()));
        let total: f64 = d.probs().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert!(matches!(StartDistribution::room(&spec, "attic"), Err(GridError::UnknownRoom(_))));
    }

    #[test]
    fn env_rejects_zero_horizon_and_wall_starts() {
        let spec = default_four_rooms();
        let env = EnvConfig::new(spec.clone(), TOP_LEFT).unwrap();
        assert!(env.clone().with_horizon(0).validate().is_err());
        let wall = StartDistribution::point(AgentState::new(0, 0, Dir::N));
        assert!(EnvConfig::with_start(spec, "x", wall).is_err());
    }

    #[test]
    fn corridor_layout_has_single_room() {
        let spec = GridSpec::open(7, 3, Cell::new(5, 1)).unwrap();
        assert_eq!(spec.rooms().len(), 1);
        assert_eq!(spec.all_states().len(), 20);
    }
}
