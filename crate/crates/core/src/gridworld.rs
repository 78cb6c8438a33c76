//! Fully observed grid maze with image observations, random trajectory generation and
//! the `GCQD` dataset container.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::Reader;
use crate::error::{GcqError, Result};

pub const WALL_LEVEL: f32 = 0.0;
pub const FREE_LEVEL: f32 = 0.5;
pub const AGENT_LEVEL: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Stay,
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Action::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Stay => "stay",
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Action::ALL.iter().copied().find(|a| a.name() == s)
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Stay => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeSpec {
    pub height: usize,
    pub width: usize,
    /// Row-major, `true` for walls.
    pub walls: Vec<bool>,
    pub cell_pixels: usize,
    /// Moves off one edge re-enter on the opposite edge.
    pub wraparound: bool,
}

impl MazeSpec {
    pub fn open_torus(height: usize, width: usize, cell_pixels: usize) -> Self {
        MazeSpec {
            height,
            width,
            walls: vec![false; height * width],
            cell_pixels,
            wraparound: true,
        }
    }

    /// Parses rows of `#` (wall) and `.` (free).
    pub fn from_ascii(rows: &[&str], cell_pixels: usize, wraparound: bool) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut walls = Vec::with_capacity(height * width);
        for row in rows {
            if row.len() != width {
                return Err(GcqError::InvalidMaze("ragged rows".into()));
            }
            for ch in row.chars() {
                walls.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(GcqError::InvalidMaze(format!("unexpected character `{other}`"))),
                });
            }
        }
        let spec = MazeSpec {
            height,
            width,
            walls,
            cell_pixels,
            wraparound,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_ascii(&self) -> Vec<String> {
        (0..self.height)
            .map(|r| {
                (0..self.width)
                    .map(|c| if self.is_wall(r, c) { '#' } else { '.' })
                    .collect()
            })
            .collect()
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[row * self.width + col]
    }

    pub fn frame_height(&self) -> usize {
        self.height * self.cell_pixels
    }

    pub fn frame_width(&self) -> usize {
        self.width * self.cell_pixels
    }

    pub fn free_cells(&self) -> Vec<EnvState> {
        (0..self.height)
            .flat_map(|row| (0..self.width).map(move |col| EnvState { row, col }))
            .filter(|s| !self.is_wall(s.row, s.col))
            .collect()
    }

    /// Bounded mazes need a wall border; every maze needs two or more connected free
    /// cells.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.walls.len() != self.height * self.width {
            return Err(GcqError::InvalidMaze("wall bitmap does not match dimensions".into()));
        }
        if self.cell_pixels == 0 {
            return Err(GcqError::InvalidMaze("cell_pixels must be positive".into()));
        }
        if !self.wraparound {
            for r in 0..self.height {
                for c in 0..self.width {
                    let border = r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                    if border && !self.is_wall(r, c) {
                        return Err(GcqError::InvalidMaze(format!("border cell ({r}, {c}) is free")));
                    }
                }
            }
        }
        let free = self.free_cells();
        if free.len() < 2 {
            return Err(GcqError::InvalidMaze("fewer than two free cells".into()));
        }
        let reached = self.distances_from(free[0]).iter().filter(|d| d.is_some()).count();
        if reached != free.len() {
            return Err(GcqError::DisconnectedMaze);
        }
        Ok(())
    }

    /// Breadth-first move counts from `start` to every cell; `None` for walls and
    /// unreachable cells.
    pub fn distances_from(&self, start: EnvState) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.height * self.width];
        let mut queue = VecDeque::new();
        dist[start.row * self.width + start.col] = Some(0);
        queue.push_back(start);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur.row * self.width + cur.col].unwrap();
            for a in &Action::ALL[1..] {
                let next = step_env(self, cur, *a);
                let slot = &mut dist[next.row * self.width + next.col];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    pub fn shortest_path_len(&self, from: EnvState, to: EnvState) -> Option<usize> {
        self.distances_from(from)[to.row * self.width + to.col]
    }
}

/// Moves the agent if the target cell is free; otherwise it stays.
pub fn step_env(spec: &MazeSpec, state: EnvState, action: Action) -> EnvState {
    let (dr, dc) = action.delta();
    let (h, w) = (spec.height as i64, spec.width as i64);
    let (mut r, mut c) = (state.row as i64 + dr, state.col as i64 + dc);
    if spec.wraparound {
        r = r.rem_euclid(h);
        c = c.rem_euclid(w);
    } else if r < 0 || c < 0 || r >= h || c >= w {
        return state;
    }
    let (r, c) = (r as usize, c as usize);
    if spec.is_wall(r, c) {
        state
    } else {
        EnvState { row: r, col: c }
    }
}

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

pub fn render(spec: &MazeSpec, state: EnvState) -> Frame {
    let (fh, fw, cp) = (spec.frame_height(), spec.frame_width(), spec.cell_pixels);
    let mut pixels = vec![0.0f32; fh * fw];
    for y in 0..fh {
        for x in 0..fw {
            let (r, c) = (y / cp, x / cp);
            pixels[y * fw + x] = if (r, c) == (state.row, state.col) {
                AGENT_LEVEL
            } else if spec.is_wall(r, c) {
                WALL_LEVEL
            } else {
                FREE_LEVEL
            };
        }
    }
    Frame {
        height: fh,
        width: fw,
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Uniform over all five actions at every step.
    RandomWalk,
    /// Keep heading until blocked, then pick a new direction.
    WallBounce,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::RandomWalk => "random_walk",
            Policy::WallBounce => "wall_bounce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random_walk" => Some(Policy::RandomWalk),
            "wall_bounce" => Some(Policy::WallBounce),
            _ => None,
        }
    }
}

/// Start cell and attempted actions of one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub start: EnvState,
    pub actions: Vec<Action>,
}

impl Walk {
    pub fn states(&self, spec: &MazeSpec) -> Vec<EnvState> {
        replay(spec, self.start, &self.actions)
    }
}

pub fn replay(spec: &MazeSpec, start: EnvState, actions: &[Action]) -> Vec<EnvState> {
    let mut out = Vec::with_capacity(actions.len() + 1);
    let mut cur = start;
    out.push(cur);
    for &a in actions {
        cur = step_env(spec, cur, a);
        out.push(cur);
    }
    out
}

/// Generates `count` walks of `length` states. Record `i` draws from its own stream
/// of the seeded generator, so records do not depend on each other.
pub fn generate_walks(spec: &MazeSpec, count: usize, length: usize, policy: Policy, seed: u64) -> Result<Vec<Walk>> {
    if length < 2 {
        return Err(GcqError::InvalidParameter {
            name: "length",
            reason: "trajectories need at least two frames".into(),
        });
    }
    spec.validate()?;
    let free = spec.free_cells();
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let start = free[rng.gen_range(0..free.len())];
            let mut actions = Vec::with_capacity(length - 1);
            let mut cur = start;
            let mut heading = Action::ALL[rng.gen_range(1..5)];
            for _ in 1..length {
                let a = match policy {
                    Policy::RandomWalk => Action::ALL[rng.gen_range(0..5)],
                    Policy::WallBounce => {
                        if step_env(spec, cur, heading) == cur {
                            heading = Action::ALL[rng.gen_range(1..5)];
                        }
                        heading
                    }
                };
                cur = step_env(spec, cur, a);
                actions.push(a);
            }
            Walk { start, actions }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub frames: Vec<Frame>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub records: Vec<TrajectoryRecord>,
}

pub fn render_walk(spec: &MazeSpec, walk: &Walk) -> TrajectoryRecord {
    TrajectoryRecord {
        frames: walk.states(spec).into_iter().map(|s| render(spec, s)).collect(),
        actions: walk.actions.clone(),
    }
}

pub fn generate_dataset(spec: &MazeSpec, count: usize, length: usize, policy: Policy, seed: u64) -> Result<Dataset> {
    let walks = generate_walks(spec, count, length, policy, seed)?;
    Ok(Dataset {
        length,
        height: spec.frame_height(),
        width: spec.frame_width(),
        records: walks.iter().map(|w| render_walk(spec, w)).collect(),
    })
}

pub const DATASET_MAGIC: &[u8; 4] = b"GCQD";

impl Dataset {
    /// `GCQD` layout: magic, u32 record count, length n, frame height, frame width; then
    /// per record n frames of f32 pixels and n - 1 action codes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let frame = self.height * self.width;
        let mut out = Vec::with_capacity(20 + self.records.len() * (self.length * frame * 4 + self.length));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.records.len(), self.length, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for rec in &self.records {
            for f in &rec.frames {
                for p in &f.pixels {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
            out.extend(rec.actions.iter().map(|a| a.code()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "GCQD");
        r.magic(DATASET_MAGIC)?;
        let count = r.u32()? as usize;
        let length = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        if length == 0 || height == 0 || width == 0 {
            return Err(GcqError::decode("GCQD", "zero dimension"));
        }
        let frame = height
            .checked_mul(width)
            .ok_or_else(|| GcqError::decode("GCQD", "frame size overflow"))?;
        let record_bytes = frame
            .checked_mul(length)
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(length - 1))
            .ok_or_else(|| GcqError::decode("GCQD", "record size overflow"))?;
        if count.checked_mul(record_bytes) != Some(r.remaining()) {
            return Err(GcqError::decode("GCQD", "payload length does not match header"));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let frames = (0..length)
                .map(|_| {
                    let pixels = r.f32s(frame)?;
                    if pixels.iter().any(|p| !p.is_finite()) {
                        return Err(GcqError::decode("GCQD", "non-finite pixel"));
                    }
                    Ok(Frame { height, width, pixels })
                })
                .collect::<Result<Vec<_>>>()?;
            let actions = r
                .take(length - 1)?
                .iter()
                .map(|&c| Action::from_code(c).ok_or_else(|| GcqError::decode("GCQD", format!("bad action code {c}"))))
                .collect::<Result<Vec<_>>>()?;
            records.push(TrajectoryRecord { frames, actions });
        }
        r.finish()?;
        Ok(Dataset {
            length,
            height,
            width,
            records,
        })
    }
}

/// 64-bit FNV-1a digest, used to report dataset identity.
pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
