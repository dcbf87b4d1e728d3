use std::collections::{BTreeSet, VecDeque};

use super::{Action, AgentState, Dir, GridError, GridSpec};

fn dense(spec: &GridSpec, s: &AgentState) -> usize {
    (s.y * spec.width() + s.x) * 4 + s.dir.index()
}

fn undense(spec: &GridSpec, i: usize) -> AgentState {
    let cell = i / 4;
    AgentState::new(cell % spec.width(), cell / spec.width(), Dir::from_index(i % 4))
}

/// Breadth-first closure of `from` under every action.
pub fn reachable_states(spec: &GridSpec, from: &[AgentState]) -> BTreeSet<AgentState> {
    let mut seen = vec![false; spec.width() * spec.height() * 4];
    let mut queue = VecDeque::new();
    for s in from {
        if spec.is_valid_state(s) && !std::mem::replace(&mut seen[dense(spec, s)], true) {
            queue.push_back(*s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for a in Action::ALL {
            let (n, _) = spec.step(&s, a);
            if !std::mem::replace(&mut seen[dense(spec, &n)], true) {
                queue.push_back(n);
            }
        }
    }
    seen.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| undense(spec, i)).collect()
}

/// Minimum-length action sequence from `from` to the first state satisfying
/// `done`. Expansion is FIFO with actions tried in index order, so ties
/// resolve the same way on every run.
pub fn shortest_path_where(spec: &GridSpec, from: AgentState, done: impl Fn(&AgentState) -> bool) -> Option<(AgentState, Vec<Action>)> {
    if done(&from) {
        return Some((from, Vec::new()));
    }
    let n = spec.width() * spec.height() * 4;
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; n];
    let mut seen = vec![false; n];
    let start = dense(spec, &from);
    seen[start] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(s) = queue.pop_front() {
        let si = dense(spec, &s);
        for a in Action::ALL {
            let (next, _) = spec.step(&s, a);
            let ni = dense(spec, &next);
            if seen[ni] {
                continue;
            }
            seen[ni] = true;
            parent[ni] = Some((si, a));
            if done(&next) {
                let mut path = Vec::new();
                let mut cur = ni;
                while let Some((p, act)) = parent[cur] {
                    path.push(act);
                    cur = p;
                }
                path.reverse();
                return Some((next, path));
            }
            queue.push_back(next);
        }
    }
    None
}

pub fn shortest_action_path(spec: &GridSpec, from: AgentState, to: AgentState) -> Result<Vec<Action>, GridError> {
    if !spec.is_valid_state(&from) || !spec.is_valid_state(&to) {
        return Err(GridError::Unreachable { from, to });
    }
    shortest_path_where(spec, from, |s| *s == to).map(|(_, p)| p).ok_or(GridError::Unreachable { from, to })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_four_rooms, default_four_rooms, Cell, DoorOffsets};
    use proptest::prelude::*;

    fn replay(spec: &GridSpec, mut s: AgentState, path: &[Action]) -> AgentState {
        for a in path {
            s = spec.step(&s, *a).0;
        }
        s
    }

    /// Exhaustive closure oracle: apply every action to every known state until
    /// nothing new appears.
    fn brute_closure(spec: &GridSpec, from: AgentState) -> BTreeSet<AgentState> {
        let mut set = BTreeSet::from([from]);
        loop {
            let next: BTreeSet<AgentState> =
                set.iter().flat_map(|s| Action::ALL.map(|a| spec.step(s, a).0)).chain(set.iter().copied()).collect();
            if next == set {
                return set;
            }
            set = next;
        }
    }

    /// Length of the shortest replayable path of length <= `max`, by trying
    /// every sequence.
    fn brute_min_len(spec: &GridSpec, from: AgentState, to: AgentState, max: usize) -> Option<usize> {
        let mut frontier = vec![from];
        for len in 0..=max {
            if frontier.contains(&to) {
                return Some(len);
            }
            frontier = frontier.iter().flat_map(|s| Action::ALL.map(|a| spec.step(s, a).0)).collect();
        }
        None
    }

    #[test]
    fn two_by_two_closure() {
        let spec = GridSpec::open(4, 4, Cell::new(2, 2)).unwrap();
        let from = AgentState::new(1, 1, Dir::E);
        let r = reachable_states(&spec, &[from]);
        assert_eq!(r.len(), 16);
        assert_eq!(r, brute_closure(&spec, from));
    }

    #[test]
    fn single_cell_closure() {
        let spec = GridSpec::open(3, 3, Cell::new(1, 1)).unwrap();
        let r = reachable_states(&spec, &[AgentState::new(1, 1, Dir::S)]);
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn default_layout_is_one_component() {
        let spec = default_four_rooms();
        let from = AgentState::new(11, 11, Dir::W);
        let r = reachable_states(&spec, &[from]);
        assert_eq!(r.len(), spec.open_cells().count() * 4);
        assert_eq!(r, brute_closure(&spec, from));
        let small = build_four_rooms(9, DoorOffsets::centered(9)).unwrap();
        let r = reachable_states(&small, &[AgentState::new(1, 1, Dir::N)]);
        assert_eq!(r.len(), small.open_cells().count() * 4);
    }

    #[test]
    fn closure_is_fixed_point() {
        let spec = default_four_rooms();
        let r = reachable_states(&spec, &[AgentState::new(2, 2, Dir::N)]);
        let again = reachable_states(&spec, &r.iter().copied().collect::<Vec<_>>());
        assert_eq!(r, again);
    }

    #[test]
    fn trivial_paths() {
        let spec = default_four_rooms();
        let s = AgentState::new(3, 3, Dir::E);
        assert!(shortest_action_path(&spec, s, s).unwrap().is_empty());
        assert_eq!(shortest_action_path(&spec, s, AgentState::new(4, 3, Dir::E)).unwrap(), vec![Action::Forward]);
    }

    #[test]
    fn cell_behind_same_heading_takes_five() {
        let spec = default_four_rooms();
        let from = AgentState::new(3, 3, Dir::E);
        let to = AgentState::new(2, 3, Dir::E);
        let path = shortest_action_path(&spec, from, to).unwrap();
        assert_eq!(replay(&spec, from, &path), to);
        // turn around, step, turn around again
        assert_eq!(path.len(), 5);
        assert_eq!(brute_min_len(&spec, from, to, 5), Some(5));
    }

    #[test]
    fn unreachable_target() {
        let spec = default_four_rooms();
        let from = AgentState::new(3, 3, Dir::E);
        let wall = AgentState::new(0, 0, Dir::E);
        assert!(matches!(shortest_action_path(&spec, from, wall), Err(GridError::Unreachable { .. })));
    }

    fn small_grid() -> impl Strategy<Value = GridSpec> {
        (3usize..=5, 3usize..=5, proptest::collection::vec(any::<bool>(), 9)).prop_filter_map("connected layouts only", |(w, h, mask)| {
            let walls: Vec<bool> = (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    x == 0 || y == 0 || x == w - 1 || y == h - 1 || mask[(y * 3 + x) % 9] && (x + y) % 3 == 0
                })
                .collect();
            let goal = (0..w * h).find(|i| !walls[*i])?;
            GridSpec::new("prop", w, h, walls, Cell::new(goal % w, goal / w)).ok()
        })
    }

    proptest! {
        #[test]
        fn paths_replay_and_are_minimal(spec in small_grid(), a in any::<usize>(), b in any::<usize>()) {
            let states = spec.all_states();
            let from = states[a % states.len()];
            let to = states[b % states.len()];
            let path = shortest_action_path(&spec, from, to).unwrap();
            prop_assert_eq!(replay(&spec, from, &path), to);
            if path.len() <= 6 {
                prop_assert_eq!(brute_min_len(&spec, from, to, 6), Some(path.len()));
            } else {
                prop_assert_eq!(brute_min_len(&spec, from, to, 6), None);
            }
        }

        #[test]
        fn dynamics_properties(i in any::<usize>()) {
            let spec = default_four_rooms();
            let states = spec.all_states();
            let s = states[i % states.len()];
            for a in Action::ALL {
                prop_assert_eq!(spec.step(&s, a), spec.step(&s, a));
            }
            let l = spec.step(&s, Action::TurnLeft).0;
            prop_assert_eq!(spec.step(&l, Action::TurnRight).0, s);
            let f = spec.step(&s, Action::Forward).0;
            prop_assert_eq!(f.dir, s.dir);
            prop_assert_eq!(l.cell(), s.cell());
            prop_assert_eq!(spec.step(&s, Action::TurnRight).0.cell(), s.cell());
        }
    }
}
