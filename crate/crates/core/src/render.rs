//! Frame descriptors for playback, and an SVG projection of them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{AgentState, Cell, GridSpec};
use crate::trajectory::{SegmentTag, Trajectory};

pub const FRAME_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("agent state {0} is not on an open cell")]
    InvalidState(AgentState),
    #[error("start index {from} is past the trajectory end ({len})")]
    FromOutOfRange { from: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub goal: Cell,
    pub agent: AgentState,
    pub step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<SegmentTag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub highlight: Vec<Cell>,
}

/// Per-frame annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameMeta {
    pub step_index: usize,
    pub segment: Option<SegmentTag>,
    pub highlight: Vec<Cell>,
}

pub fn frame(spec: &GridSpec, state: AgentState, meta: FrameMeta) -> Result<FrameDescriptor, RenderError> {
    if !spec.is_valid_state(&state) {
        return Err(RenderError::InvalidState(state));
    }
    Ok(FrameDescriptor {
        version: FRAME_VERSION,
        width: spec.width(),
        height: spec.height(),
        walls: spec.wall_cells().collect(),
        goal: spec.goal(),
        agent: state,
        step_index: meta.step_index,
        segment: meta.segment,
        highlight: meta.highlight,
    })
}

/// One frame per step from `from` on, plus the terminal frame.
pub fn trajectory_frames(traj: &Trajectory, spec: &GridSpec, from: usize) -> Result<Vec<FrameDescriptor>, RenderError> {
    if from > traj.len() {
        return Err(RenderError::FromOutOfRange { from, len: traj.len() });
    }
    (from..=traj.len())
        .map(|i| frame(spec, traj.state_at(i), FrameMeta { step_index: i, segment: traj.tag_at(i), highlight: vec![] }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgStyle {
    pub cell: u32,
    pub floor: &'static str,
    pub wall: &'static str,
    pub goal: &'static str,
    pub agent: &'static str,
    pub highlight: &'static str,
}

impl Default for SvgStyle {
    fn default() -> Self {
        SvgStyle { cell: 24, floor: "#f4f4f4", wall: "#3b3b3b", goal: "#3fa34d", agent: "#d1453b", highlight: "#f2c94c" }
    }
}

/// Deterministic SVG for one frame. Element order: floor, walls (row-major),
/// goal, highlights, agent. The agent is a triangle drawn pointing north and
/// rotated by its heading.
pub fn svg_frame(d: &FrameDescriptor, style: &SvgStyle) -> String {
    let c = style.cell;
    let (w, h) = (d.width as u32 * c, d.height as u32 * c);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect class="floor" x="0" y="0" width="{w}" height="{h}" fill="{}"/>"#, style.floor);
    let mut walls = d.walls.clone();
    walls.sort_by_key(|cell| (cell.y, cell.x));
    for cell in &walls {
        let _ = writeln!(
            out,
            r#"<rect class="wall" x="{}" y="{}" width="{c}" height="{c}" fill="{}"/>"#,
            cell.x as u32 * c,
            cell.y as u32 * c,
            style.wall
        );
    }
    let _ = writeln!(
        out,
        r#"<rect class="goal" x="{}" y="{}" width="{c}" height="{c}" fill="{}"/>"#,
        d.goal.x as u32 * c,
        d.goal.y as u32 * c,
        style.goal
    );
    for cell in &d.highlight {
        let _ = writeln!(
            out,
            r#"<rect class="highlight" x="{}" y="{}" width="{c}" height="{c}" fill="none" stroke="{}" stroke-width="2"/>"#,
            cell.x as u32 * c,
            cell.y as u32 * c,
            style.highlight
        );
    }
    let (cx, cy) = (d.agent.x as u32 * c + c / 2, d.agent.y as u32 * c + c / 2);
    let r = c as i64 * 2 / 5;
    let seg = match d.segment {
        Some(SegmentTag::Exploration) => " exploration",
        _ => "",
    };
    let _ = writeln!(
        out,
        r#"<polygon class="agent{seg}" points="0,{} {},{} {},{}" fill="{}" transform="translate({cx} {cy}) rotate({})"/>"#,
        -r,
        r * 4 / 5,
        r,
        -r * 4 / 5,
        r,
        style.agent,
        d.agent.dir.degrees()
    );
    out.push_str("</svg>\n");
    out
}
