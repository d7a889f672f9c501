//! A reduced CerealBar board: cards, obstacles, the follower's transition
//! function, and its partial, possibly stale view of the board.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgeom::{
    angle_between, offset_to_axial, step, AxialCoord, Move, OffsetCoord, Pose,
    DIRECTIONS,
};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("{action} is not executable: {reason}")]
    Inexecutable { action: Action, reason: String },
    #[error("invalid world: {0}")]
    InvalidState(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Forward,
    Backward,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Forward,
        Action::Backward,
        Action::Left,
        Action::Right,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_move(self) -> Option<Move> {
        match self {
            Action::Forward => Some(Move::Forward),
            Action::Backward => Some(Move::Backward),
            Action::Left => Some(Move::Left),
            Action::Right => Some(Move::Right),
            Action::Stop => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "FORWARD",
            Action::Backward => "BACKWARD",
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Stop => "STOP",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of actions, iterated in [`Action::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSet(u8);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);
    pub const FULL: ActionSet = ActionSet(0b11111);

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= 1 << a.index();
    }

    pub fn remove(&mut self, a: Action) {
        self.0 &= !(1 << a.index());
    }

    pub fn without(mut self, a: Action) -> Self {
        self.remove(a);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut s = ActionSet::EMPTY;
        for a in iter {
            s.insert(a);
        }
        s
    }
}

pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "orange", "pink"];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "heart", "diamond"];
pub const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CardId(pub u32);

/// Card properties without position or selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CardFace {
    pub color: u8,
    pub shape: u8,
    pub count: u8,
}

impl CardFace {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        CardFace {
            color: rng.gen_range(0..COLORS.len() as u8),
            shape: rng.gen_range(0..SHAPES.len() as u8),
            count: rng.gen_range(1..=3),
        }
    }

    pub fn color_name(self) -> &'static str {
        COLORS[self.color as usize]
    }

    pub fn shape_name(self) -> &'static str {
        SHAPES[self.shape as usize]
    }

    pub fn count_word(self) -> &'static str {
        COUNT_WORDS[self.count as usize - 1]
    }

    pub fn shares_property(self, other: CardFace) -> bool {
        self.color == other.color || self.shape == other.shape || self.count == other.count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Card {
    pub id: CardId,
    pub position: AxialCoord,
    pub face: CardFace,
    pub selected: bool,
}

/// Exactly three cards whose colors, shapes and counts are each pairwise distinct.
pub fn is_valid_set(cards: &[Card]) -> bool {
    cards.len() == 3 && pairwise_distinct(cards)
}

/// Whether `selected` can still be extended into a valid set.
pub fn can_complete_set(selected: &[Card]) -> bool {
    selected.len() <= 3 && pairwise_distinct(selected)
}

fn pairwise_distinct(cards: &[Card]) -> bool {
    cards.iter().enumerate().all(|(i, a)| {
        cards[i + 1..]
            .iter()
            .all(|b| !a.face.shares_property(b.face))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Board edge size in offset coordinates.
    pub edge: i32,
    /// Visibility cone radius. At `2 * edge` or more the follower sees the
    /// whole board.
    pub vis_radius: i32,
    /// Simulated wall time per action, seconds.
    pub action_duration: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            edge: 25,
            vis_radius: 6,
            action_duration: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn in_bounds(&self, c: AxialCoord) -> bool {
        c.to_offset().in_bounds(self.edge)
    }

    pub fn cells(&self) -> impl Iterator<Item = AxialCoord> + '_ {
        (0..self.edge)
            .flat_map(move |col| (0..self.edge).map(move |row| offset_to_axial(OffsetCoord::new(col, row))))
    }

    pub fn full_visibility(&self) -> bool {
        self.vis_radius >= 2 * self.edge
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: WorldConfig,
    pub obstacles: BTreeSet<AxialCoord>,
    pub cards: Vec<Card>,
    pub follower: Pose,
    pub leader: Pose,
    /// Simulated seconds since the episode began.
    pub clock: f64,
    /// Actions executed so far.
    pub tick: u32,
    /// Set once STOP is executed.
    pub completed: bool,
    respawn_seed: u64,
    respawns: u32,
    next_card_id: u32,
}

/// Side effects of one transition that reward attribution needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub toggled: Option<CardId>,
    /// The toggle left a selection that cannot become a valid set.
    pub invalid_set: bool,
    /// The toggle completed a valid set, which was cleared and replaced.
    pub set_completed: bool,
}

impl WorldState {
    pub fn new(
        config: WorldConfig,
        obstacles: BTreeSet<AxialCoord>,
        cards: Vec<Card>,
        follower: Pose,
        leader: Pose,
        respawn_seed: u64,
    ) -> Result<Self, WorldError> {
        if obstacles.contains(&follower.position) {
            return Err(WorldError::InvalidState("follower on an obstacle".into()));
        }
        if !config.in_bounds(follower.position) {
            return Err(WorldError::InvalidState("follower out of bounds".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &cards {
            if !seen.insert(c.position) {
                return Err(WorldError::InvalidState(format!("two cards at {}", c.position)));
            }
            if !(1..=3).contains(&c.face.count) {
                return Err(WorldError::InvalidState(format!("card count {}", c.face.count)));
            }
            if obstacles.contains(&c.position) || !config.in_bounds(c.position) {
                return Err(WorldError::InvalidState(format!("card at {} not placeable", c.position)));
            }
        }
        let next_card_id = cards.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        Ok(WorldState {
            config,
            obstacles,
            cards,
            follower,
            leader,
            clock: 0.0,
            tick: 0,
            completed: false,
            respawn_seed,
            respawns: 0,
            next_card_id,
        })
    }

    pub fn card_at(&self, c: AxialCoord) -> Option<&Card> {
        self.cards.iter().find(|k| k.position == c)
    }

    pub fn card(&self, id: CardId) -> Option<&Card> {
        self.cards.iter().find(|k| k.id == id)
    }

    pub fn selected_cards(&self) -> Vec<Card> {
        self.cards.iter().filter(|c| c.selected).copied().collect()
    }

    pub fn passable(&self, c: AxialCoord) -> bool {
        self.config.in_bounds(c) && !self.obstacles.contains(&c)
    }

    pub fn executable_actions(&self) -> ActionSet {
        let mut set = ActionSet::EMPTY;
        for a in Action::ALL {
            match a {
                Action::Forward | Action::Backward => {
                    let next = step(self.follower, a.as_move().unwrap());
                    if self.passable(next.position) {
                        set.insert(a);
                    }
                }
                _ => set.insert(a),
            }
        }
        set
    }

    pub fn apply_action(&self, a: Action) -> Result<(WorldState, StepEvents), WorldError> {
        let mut next = self.clone();
        let mut events = StepEvents::default();
        match a.as_move() {
            None => next.completed = true,
            Some(m) => {
                let pose = step(self.follower, m);
                if !self.passable(pose.position) {
                    let reason = if self.config.in_bounds(pose.position) {
                        format!("obstacle at {}", pose.position)
                    } else {
                        format!("{} is off the board", pose.position)
                    };
                    return Err(WorldError::Inexecutable { action: a, reason });
                }
                let moved = pose.position != self.follower.position;
                next.follower = pose;
                if moved {
                    if let Some(card) = next.cards.iter_mut().find(|c| c.position == pose.position) {
                        card.selected = !card.selected;
                        events.toggled = Some(card.id);
                        let selected = next.selected_cards();
                        events.invalid_set = !can_complete_set(&selected);
                        if is_valid_set(&selected) {
                            next.clear_set();
                            events.set_completed = true;
                        }
                    }
                }
            }
        }
        next.clock += self.config.action_duration;
        next.tick += 1;
        Ok((next, events))
    }

    fn clear_set(&mut self) {
        self.cards.retain(|c| !c.selected);
        let mut rng = ChaCha8Rng::seed_from_u64(self.respawn_seed ^ (self.respawns as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.respawns += 1;
        let mut free: Vec<AxialCoord> = self
            .config
            .cells()
            .filter(|c| {
                !self.obstacles.contains(c) && self.card_at(*c).is_none() && *c != self.follower.position
            })
            .collect();
        free.shuffle(&mut rng);
        for position in free.into_iter().take(3) {
            let id = CardId(self.next_card_id);
            self.next_card_id += 1;
            self.cards.push(Card {
                id,
                position,
                face: CardFace::random(&mut rng),
                selected: false,
            });
        }
    }

    pub fn is_visible(&self, c: AxialCoord) -> bool {
        let rel = c - self.follower.position;
        let d = rel.length();
        if self.config.full_visibility() || d <= 1 {
            return true;
        }
        d <= self.config.vis_radius
            && angle_between(rel, DIRECTIONS[self.follower.heading.index()])
                <= std::f64::consts::FRAC_PI_3 + 1e-9
    }

    pub fn observe(&self, memory: Option<&Observation>) -> Observation {
        let mut obs = match memory {
            Some(m) => m.clone(),
            None => Observation {
                tick: self.tick,
                follower: self.follower,
                cells: BTreeMap::new(),
                trajectory: Vec::new(),
            },
        };
        obs.tick = self.tick;
        obs.follower = self.follower;
        if obs.trajectory.last() != Some(&self.follower.position) {
            obs.trajectory.push(self.follower.position);
        }
        for cell in obs.cells.values_mut() {
            cell.visible = false;
        }
        for c in self.config.cells() {
            if self.is_visible(c) {
                obs.cells.insert(
                    c,
                    CellMemory {
                        obstacle: self.obstacles.contains(&c),
                        card: self.card_at(c).map(CardSnapshot::from),
                        last_seen: self.tick,
                        visible: true,
                    },
                );
            }
        }
        obs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CardSnapshot {
    pub id: CardId,
    pub face: CardFace,
    pub selected: bool,
}

impl From<&Card> for CardSnapshot {
    fn from(c: &Card) -> Self {
        CardSnapshot {
            id: c.id,
            face: c.face,
            selected: c.selected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellMemory {
    pub obstacle: bool,
    pub card: Option<CardSnapshot>,
    pub last_seen: u32,
    pub visible: bool,
}

/// What the follower knows: every cell it has ever seen, as last seen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub tick: u32,
    pub follower: Pose,
    #[serde(with = "cell_pairs")]
    pub cells: BTreeMap<AxialCoord, CellMemory>,
    pub trajectory: Vec<AxialCoord>,
}

/// Coordinate-keyed maps as a list of pairs, since JSON keys must be strings.
mod cell_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    use super::{AxialCoord, CellMemory};

    pub fn serialize<S: Serializer>(m: &BTreeMap<AxialCoord, CellMemory>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<AxialCoord, CellMemory>, D::Error> {
        Ok(Vec::<(AxialCoord, CellMemory)>::deserialize(d)?.into_iter().collect())
    }
}

impl Observation {
    pub fn cell(&self, c: AxialCoord) -> Option<&CellMemory> {
        self.cells.get(&c)
    }

    /// Cards the follower knows about, visible or remembered.
    pub fn known_cards(&self) -> impl Iterator<Item = (AxialCoord, &CardSnapshot)> {
        self.cells
            .iter()
            .filter_map(|(c, m)| m.card.as_ref().map(|k| (*c, k)))
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("observation serializes");
        let hash = Sha256::digest(&bytes);
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
