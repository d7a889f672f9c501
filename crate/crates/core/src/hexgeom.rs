//! Hexagonal grid geometry.
//!
//! Board positions are addressed with odd-q offset coordinates (flat-top
//! hexes, odd columns shoved down half a cell). Everything that needs exact
//! hex structure (distances, rotation, agent-centric frames) works in axial
//! coordinates, with cube coordinates used internally for rotation.
//!
//! Headings index [`DIRECTIONS`]. Incrementing a heading turns the agent
//! counter-clockwise on screen (LEFT); decrementing turns it clockwise (RIGHT).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HexError {
    #[error("hex diameter must be odd and positive, got {0}")]
    InvalidDiameter(i32),
}

/// Board position in odd-q offset layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OffsetCoord {
    pub col: i32,
    pub row: i32,
}

impl OffsetCoord {
    pub const fn new(col: i32, row: i32) -> Self {
        Self { col, row }
    }

    pub fn in_bounds(self, edge: i32) -> bool {
        (0..edge).contains(&self.col) && (0..edge).contains(&self.row)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AxialCoord {
    pub q: i32,
    pub r: i32,
}

impl AxialCoord {
    pub const ORIGIN: AxialCoord = AxialCoord { q: 0, r: 0 };

    pub const fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    /// Cube triple `(x, y, z)` with `x + y + z = 0`.
    pub fn cube(self) -> (i32, i32, i32) {
        (self.q, -self.q - self.r, self.r)
    }

    fn from_cube(x: i32, _y: i32, z: i32) -> Self {
        Self { q: x, r: z }
    }

    /// Rotate about the origin by `steps` sixths of a turn. Positive steps
    /// carry `DIRECTIONS[k]` onto `DIRECTIONS[k + steps]`.
    pub fn rotate(self, steps: i32) -> Self {
        let mut c = self.cube();
        for _ in 0..steps.rem_euclid(6) {
            c = (-c.1, -c.2, -c.0);
        }
        Self::from_cube(c.0, c.1, c.2)
    }

    pub fn neighbor(self, heading: Heading) -> Self {
        self + DIRECTIONS[heading.index()]
    }

    pub fn neighbors(self) -> [AxialCoord; 6] {
        DIRECTIONS.map(|d| self + d)
    }

    pub fn length(self) -> i32 {
        let (x, y, z) = self.cube();
        (x.abs() + y.abs() + z.abs()) / 2
    }

    /// Center of the hex in the plane (unit edge length, y pointing down).
    pub fn pixel(self) -> (f64, f64) {
        let q = self.q as f64;
        let r = self.r as f64;
        (1.5 * q, 3f64.sqrt() * (r + q / 2.0))
    }

    pub fn to_offset(self) -> OffsetCoord {
        axial_to_offset(self)
    }
}

impl Add for AxialCoord {
    type Output = AxialCoord;
    fn add(self, o: AxialCoord) -> AxialCoord {
        AxialCoord::new(self.q + o.q, self.r + o.r)
    }
}

impl Sub for AxialCoord {
    type Output = AxialCoord;
    fn sub(self, o: AxialCoord) -> AxialCoord {
        AxialCoord::new(self.q - o.q, self.r - o.r)
    }
}

impl Neg for AxialCoord {
    type Output = AxialCoord;
    fn neg(self) -> AxialCoord {
        AxialCoord::new(-self.q, -self.r)
    }
}

impl fmt::Display for AxialCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.q, self.r)
    }
}

/// Unit steps in axial coordinates, indexed by heading.
pub const DIRECTIONS: [AxialCoord; 6] = [
    AxialCoord::new(1, 0),
    AxialCoord::new(1, -1),
    AxialCoord::new(0, -1),
    AxialCoord::new(-1, 0),
    AxialCoord::new(-1, 1),
    AxialCoord::new(0, 1),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Heading(u8);

impl Heading {
    pub fn new(direction: i32) -> Self {
        Heading(direction.rem_euclid(6) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn turned(self, steps: i32) -> Self {
        Heading::new(self.0 as i32 + steps)
    }

    pub fn opposite(self) -> Self {
        self.turned(3)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub position: AxialCoord,
    pub heading: Heading,
}

impl Pose {
    pub fn new(position: AxialCoord, heading: Heading) -> Self {
        Self { position, heading }
    }
}

/// The four movement primitives. STOP lives in the world's action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Move {
    Forward,
    Backward,
    Left,
    Right,
}

pub fn offset_to_axial(c: OffsetCoord) -> AxialCoord {
    AxialCoord::new(c.col, c.row - (c.col - (c.col & 1)) / 2)
}

pub fn axial_to_offset(a: AxialCoord) -> OffsetCoord {
    OffsetCoord::new(a.q, a.r + (a.q - (a.q & 1)) / 2)
}

pub fn hex_distance(a: AxialCoord, b: AxialCoord) -> i32 {
    (a - b).length()
}

/// Every cell within `(diameter - 1) / 2` of the origin.
pub fn hex_disk_mask(diameter: i32) -> Result<BTreeSet<AxialCoord>, HexError> {
    if diameter < 1 || diameter % 2 == 0 {
        return Err(HexError::InvalidDiameter(diameter));
    }
    let k = (diameter - 1) / 2;
    let mut cells = BTreeSet::new();
    for q in -k..=k {
        for r in (-k).max(-q - k)..=k.min(-q + k) {
            cells.insert(AxialCoord::new(q, r));
        }
    }
    Ok(cells)
}

/// Express `c` in the agent frame of `pose`: the pose position becomes the
/// origin and the pose heading becomes heading 0.
pub fn to_agent_frame(c: AxialCoord, pose: Pose) -> AxialCoord {
    (c - pose.position).rotate(-(pose.heading.index() as i32))
}

/// Inverse of [`to_agent_frame`].
pub fn from_agent_frame(c: AxialCoord, pose: Pose) -> AxialCoord {
    c.rotate(pose.heading.index() as i32) + pose.position
}

/// Translate and rotate a cell map into the agent-centric frame of `pose`.
pub fn recenter_rotate<V: Clone>(
    cells: &BTreeMap<AxialCoord, V>,
    pose: Pose,
) -> BTreeMap<AxialCoord, V> {
    cells
        .iter()
        .map(|(&c, v)| (to_agent_frame(c, pose), v.clone()))
        .collect()
}

pub fn step(pose: Pose, action: Move) -> Pose {
    match action {
        Move::Forward => Pose::new(pose.position.neighbor(pose.heading), pose.heading),
        Move::Backward => Pose::new(pose.position.neighbor(pose.heading.opposite()), pose.heading),
        Move::Left => Pose::new(pose.position, pose.heading.turned(1)),
        Move::Right => Pose::new(pose.position, pose.heading.turned(-1)),
    }
}

/// Angle in radians between the planar directions of two nonzero axial vectors.
pub fn angle_between(a: AxialCoord, b: AxialCoord) -> f64 {
    let (ax, ay) = a.pixel();
    let (bx, by) = b.pixel();
    let dot = ax * bx + ay * by;
    let norm = (ax * ax + ay * ay).sqrt() * (bx * bx + by * by).sqrt();
    (dot / norm).clamp(-1.0, 1.0).acos()
}

/// Heading index whose direction is closest in angle to `v` (v nonzero).
pub fn nearest_direction(v: AxialCoord) -> usize {
    let mut best = 0;
    let mut best_angle = f64::INFINITY;
    for (k, d) in DIRECTIONS.iter().enumerate() {
        let a = angle_between(v, *d);
        if a < best_angle - 1e-9 {
            best = k;
            best_angle = a;
        }
    }
    best
}
