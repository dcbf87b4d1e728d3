//! Plain-text layout maps.
//!
//! ```text
//! 7 3
//! #######
//! #....G#
//! #######
//! ```
//!
//! The header is `width height`; then one row per line with `#` for walls,
//! `.` for floor and `G` for the (single) goal.

use std::fmt::Write as _;

use thiserror::Error;

use super::{Cell, GridError, GridSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutParseError {
    #[error("missing or malformed `width height` header")]
    Header,
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("row {row} has {found} cells, expected {expected}")]
    RowWidth { row: usize, expected: usize, found: usize },
    #[error("unexpected character {ch:?} at ({x}, {y})")]
    Char { ch: char, x: usize, y: usize },
    #[error("layout must contain exactly one goal, found {0}")]
    GoalCount(usize),
}

impl GridSpec {
    pub fn to_layout_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.width(), self.height()).unwrap();
        for y in 0..self.height() {
            for x in 0..self.width() {
                let c = Cell::new(x, y);
                out.push(if c == self.goal() {
                    'G'
                } else if self.is_wall(c) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_layout_text(id: impl Into<String>, text: &str) -> Result<GridSpec, GridError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(LayoutParseError::Header)?;
        let dims: Vec<usize> =
            header.split_whitespace().map(|t| t.parse().map_err(|_| LayoutParseError::Header)).collect::<Result<_, _>>()?;
        let [width, height] = dims[..] else {
            return Err(LayoutParseError::Header.into());
        };
        let rows: Vec<&str> = lines.map(str::trim_end).collect();
        if rows.len() != height {
            return Err(LayoutParseError::RowCount { expected: height, found: rows.len() }.into());
        }
        let mut walls = Vec::with_capacity(width * height);
        let mut goals = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            let n = row.chars().count();
            if n != width {
                return Err(LayoutParseError::RowWidth { row: y, expected: width, found: n }.into());
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'G' => {
                        walls.push(false);
                        goals.push(Cell::new(x, y));
                    }
                    _ => return Err(LayoutParseError::Char { ch, x, y }.into()),
                }
            }
        }
        if goals.len() != 1 {
            return Err(LayoutParseError::GoalCount(goals.len()).into());
        }
        GridSpec::new(id, width, height, walls, goals[0])
    }
}

/// Serde adapter storing a spec as `{ id, layout }`.
pub(crate) mod serde_spec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::GridSpec;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        id: String,
        layout: String,
    }

    pub fn serialize<S: Serializer>(spec: &GridSpec, s: S) -> Result<S::Ok, S::Error> {
        Repr { id: spec.id().to_string(), layout: spec.to_layout_text() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GridSpec, D::Error> {
        let r = Repr::deserialize(d)?;
        GridSpec::from_layout_text(r.id, &r.layout).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_four_rooms, default_four_rooms, DoorOffsets};
    use proptest::prelude::*;

    #[test]
    fn corridor_text() {
        let spec = GridSpec::from_layout_text("c", "7 3\n#######\n#....G#\n#######\n").unwrap();
        assert_eq!(spec.goal(), Cell::new(5, 1));
        assert_eq!(spec.open_cells().count(), 5);
        assert_eq!(spec.to_layout_text(), "7 3\n#######\n#....G#\n#######\n");
    }

    #[test]
    fn parse_errors() {
        let e = |t: &str| GridSpec::from_layout_text("x", t).unwrap_err();
        assert_eq!(e("7\n"), GridError::Parse(LayoutParseError::Header));
        assert_eq!(e("3 3\n###\n#G#\n"), GridError::Parse(LayoutParseError::RowCount { expected: 3, found: 2 }));
        assert_eq!(e("3 3\n###\n#G.#\n###\n"), GridError::Parse(LayoutParseError::RowWidth { row: 1, expected: 3, found: 4 }));
        assert_eq!(e("3 3\n###\n#x#\n###\n"), GridError::Parse(LayoutParseError::Char { ch: 'x', x: 1, y: 1 }));
        assert_eq!(e("3 3\n###\n#.#\n###\n"), GridError::Parse(LayoutParseError::GoalCount(0)));
        assert!(matches!(e("3 3\n#.#\n#G#\n###\n"), GridError::InvalidLayout(_)));
    }

    #[test]
    fn default_layout_round_trips() {
        let spec = default_four_rooms();
        let back = GridSpec::from_layout_text(spec.id(), &spec.to_layout_text()).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn four_rooms_round_trip(half in 4usize..9, t in 0usize..8, b in 0usize..8, l in 0usize..8, r in 0usize..8) {
            let size = 2 * half + 1;
            let seg = half - 1;
            let doors = DoorOffsets { top: t % seg, bottom: b % seg, left: l % seg, right: r % seg };
            let spec = build_four_rooms(size, doors).unwrap();
            let back = GridSpec::from_layout_text(spec.id(), &spec.to_layout_text()).unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
