use serde::{Deserialize, Serialize};

use super::{Cell, EnvConfig, GridError, StartDistribution};

/// A train/test distribution shift expressed as an edit of the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShiftEdit {
    /// Start uniformly in another room (the start-region shift).
    StartRegion {
        room: String,
    },
    RemoveWall {
        cell: Cell,
    },
    AddWall {
        cell: Cell,
    },
    MoveGoal {
        cell: Cell,
    },
}

pub fn apply_shift(config: &EnvConfig, edit: &ShiftEdit) -> Result<EnvConfig, GridError> {
    let mut out = config.clone();
    let spec = &config.spec;
    let invalid = |msg: String| Err(GridError::InvalidEdit(msg));
    match edit {
        ShiftEdit::StartRegion { room } => {
            out.start = StartDistribution::room(spec, room)?;
            out.id = format!("{}/{}", spec.id(), room);
            return Ok(out);
        }
        ShiftEdit::RemoveWall { cell } => {
            if !spec.in_bounds(*cell) || spec.is_border(*cell) {
                return invalid(format!("cannot remove border or out-of-bounds cell {cell}"));
            }
            if !spec.is_wall(*cell) {
                return invalid(format!("{cell} is not a wall"));
            }
            out.spec.set_wall(*cell, false);
        }
        ShiftEdit::AddWall { cell } => {
            if !spec.in_bounds(*cell) || spec.is_wall(*cell) {
                return invalid(format!("{cell} is already a wall or out of bounds"));
            }
            if *cell == spec.goal() {
                return invalid(format!("{cell} is the goal"));
            }
            if config.start.support().iter().any(|s| s.cell() == *cell) {
                return invalid(format!("{cell} is in the start support"));
            }
            out.spec.set_wall(*cell, true);
        }
        ShiftEdit::MoveGoal { cell } => {
            if spec.is_wall(*cell) {
                return invalid(format!("goal target {cell} is a wall"));
            }
            out.spec.set_goal(*cell);
        }
    }
    out.spec.validate().map_err(|e| GridError::InvalidEdit(e.to_string()))?;
    let suffix = match edit {
        ShiftEdit::RemoveWall { cell } => format!("-w{}_{}", cell.x, cell.y),
        ShiftEdit::AddWall { cell } => format!("+w{}_{}", cell.x, cell.y),
        ShiftEdit::MoveGoal { cell } => format!("@g{}_{}", cell.x, cell.y),
        ShiftEdit::StartRegion { .. } => unreachable!(),
    };
    let new_id = format!("{}{}", spec.id(), suffix);
    out.spec = out.spec.with_id(new_id);
    out.validate().map_err(|e| GridError::InvalidEdit(e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{default_four_rooms, BOTTOM_RIGHT, TOP_LEFT};

    fn train() -> EnvConfig {
        EnvConfig::new(default_four_rooms(), TOP_LEFT).unwrap()
    }

    #[test]
    fn start_region_changes_only_start() {
        let env = train();
        let test = apply_shift(&env, &ShiftEdit::StartRegion { room: BOTTOM_RIGHT.into() }).unwrap();
        assert_eq!(test.spec, env.spec);
        assert_eq!(test.horizon, env.horizon);
        assert_ne!(test.start, env.start);
        assert!(test.start.support().iter().all(|s| s.x > 6 && s.y > 6));
        // original untouched
        assert_eq!(env, train());
    }

    #[test]
    fn border_and_goal_edits_rejected() {
        let env = train();
        let e = apply_shift(&env, &ShiftEdit::RemoveWall { cell: Cell::new(0, 4) });
        assert!(matches!(e, Err(GridError::InvalidEdit(_))));
        let e = apply_shift(&env, &ShiftEdit::MoveGoal { cell: Cell::new(6, 6) });
        assert!(matches!(e, Err(GridError::InvalidEdit(_))));
        let e = apply_shift(&env, &ShiftEdit::AddWall { cell: Cell::new(3, 3) });
        assert!(matches!(e, Err(GridError::InvalidEdit(_))), "start support cell");
    }

    #[test]
    fn interior_wall_edits() {
        let env = train();
        let opened = apply_shift(&env, &ShiftEdit::RemoveWall { cell: Cell::new(6, 10) }).unwrap();
        assert!(!opened.spec.is_wall(Cell::new(6, 10)));
        assert_eq!(opened.spec.rooms().len(), 4);
        // Closing the only door into the bottom-right room disconnects it.
        let e = apply_shift(&env, &ShiftEdit::AddWall { cell: Cell::new(6, 9) })
            .and_then(|c| apply_shift(&c, &ShiftEdit::AddWall { cell: Cell::new(9, 6) }));
        assert!(matches!(e, Err(GridError::InvalidEdit(_))));
        let moved = apply_shift(&env, &ShiftEdit::MoveGoal { cell: Cell::new(11, 11) }).unwrap();
        assert_eq!(moved.spec.goal(), Cell::new(11, 11));
    }
}
