//! Scripted leader. Generates scenarios with a ground-truth plan and a
//! templated instruction, critiques each follower action with delayed, noisy
//! binary feedback, and reboots the follower when it strays.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hexgeom::{hex_distance, step, AxialCoord, Heading, Pose, DIRECTIONS};
use crate::world::{
    can_complete_set, Action, Card, CardFace, CardId, StepEvents, WorldConfig, WorldState,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    /// +1 or -1.
    pub sign: i8,
    pub wall_time: f64,
}

impl FeedbackSignal {
    pub fn positive(wall_time: f64) -> Self {
        FeedbackSignal { sign: 1, wall_time }
    }

    pub fn negative(wall_time: f64) -> Self {
        FeedbackSignal { sign: -1, wall_time }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Probability of critiquing any given action.
    pub feedback_prob: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    /// Probability that an emitted signal has the wrong sign.
    pub sign_error: f64,
    /// Reboot once the follower is farther than this from every plan waypoint.
    pub reboot_distance: i32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            feedback_prob: 0.65,
            delay_min: 0.3,
            delay_max: 1.0,
            sign_error: 0.07,
            reboot_distance: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    pub cards: usize,
    pub obstacle_density: f64,
    /// Farthest the first target may be from the follower.
    pub first_target_range: i32,
    /// Farthest the second target may be from the first.
    pub second_target_range: i32,
    pub two_target_prob: f64,
    pub preselect_prob: f64,
    pub max_plan_len: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            world: WorldConfig::default(),
            cards: 18,
            obstacle_density: 0.08,
            first_target_range: 6,
            second_target_range: 5,
            two_target_prob: 0.4,
            preselect_prob: 0.3,
            max_plan_len: 30,
        }
    }
}

/// Ground-truth intent behind an instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Cards to toggle, in order.
    pub targets: Vec<CardId>,
    pub stop: AxialCoord,
    /// Shortest action sequence, ending with STOP.
    pub actions: Vec<Action>,
    /// Cells visited along `actions`, including the start.
    pub waypoints: Vec<AxialCoord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub world: WorldState,
    pub plan: Plan,
    pub instruction: Vec<String>,
}

/// Minimum number of moves from every pose to a goal cell. Cells holding a
/// card other than the goal are never entered.
pub struct DistanceField {
    edge: i32,
    dist: Vec<u32>,
}

impl DistanceField {
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn new(world: &WorldState, goal: AxialCoord) -> Self {
        let edge = world.config.edge;
        let mut field = DistanceField {
            edge,
            dist: vec![Self::UNREACHABLE; (edge * edge * 6) as usize],
        };
        if !world.passable(goal) {
            return field;
        }
        let cards: BTreeSet<AxialCoord> = world.cards.iter().map(|c| c.position).collect();
        let enterable = |c: AxialCoord| world.passable(c) && (c == goal || !cards.contains(&c));
        let mut queue = VecDeque::new();
        for h in 0..6 {
            let p = Pose::new(goal, Heading::new(h));
            field.set(p, 0);
            queue.push_back(p);
        }
        while let Some(p) = queue.pop_front() {
            let d = field.get(p);
            let h = p.heading;
            let mut preds = vec![
                Pose::new(p.position, h.turned(-1)),
                Pose::new(p.position, h.turned(1)),
            ];
            if enterable(p.position) {
                preds.push(Pose::new(p.position - DIRECTIONS[h.index()], h));
                preds.push(Pose::new(p.position + DIRECTIONS[h.index()], h));
            }
            for q in preds {
                if world.passable(q.position) && field.get(q) == Self::UNREACHABLE {
                    field.set(q, d + 1);
                    queue.push_back(q);
                }
            }
        }
        field
    }

    fn index(&self, p: Pose) -> Option<usize> {
        let o = p.position.to_offset();
        o.in_bounds(self.edge)
            .then(|| ((o.col * self.edge + o.row) * 6) as usize + p.heading.index())
    }

    fn set(&mut self, p: Pose, d: u32) {
        if let Some(i) = self.index(p) {
            self.dist[i] = d;
        }
    }

    pub fn get(&self, p: Pose) -> u32 {
        self.index(p).map_or(Self::UNREACHABLE, |i| self.dist[i])
    }

    /// First move, in FORWARD/LEFT/RIGHT/BACKWARD preference order, that
    /// brings `pose` one step closer.
    pub fn best_move(&self, world: &WorldState, pose: Pose) -> Option<Action> {
        let d = self.get(pose);
        if d == 0 || d == Self::UNREACHABLE {
            return None;
        }
        [Action::Forward, Action::Left, Action::Right, Action::Backward]
            .into_iter()
            .find(|a| {
                let next = step(pose, a.as_move().unwrap());
                world.passable(next.position) && self.get(next) == d - 1
            })
    }
}

const SINGLE_TEMPLATES: [&str; 20] = [
    "pick up {a}",
    "get {a}",
    "grab {a}",
    "select {a}",
    "collect {a}",
    "take {a}",
    "go get {a}",
    "go to {a} and pick it up",
    "head over to {a} and grab it",
    "walk to {a}",
    "please pick up {a}",
    "get {a} and stop there",
    "grab {a} , then wait",
    "move to {a} and select it",
    "your next card is {a}",
    "pick {a} up",
    "find {a} and take it",
    "go and collect {a}",
    "turn toward {a} and grab it",
    "select {a} next",
];

const DOUBLE_TEMPLATES: [&str; 20] = [
    "pick up {a} and {b}",
    "get {a} then {b}",
    "grab {a} and then {b}",
    "select {a} , then {b}",
    "collect {a} followed by {b}",
    "take {a} and after that {b}",
    "go get {a} then get {b}",
    "first grab {a} , then {b}",
    "pick up {a} , then go to {b}",
    "get {a} and then pick up {b}",
    "walk to {a} then {b}",
    "grab {a} before {b}",
    "select {a} and {b} in that order",
    "collect {a} , next {b}",
    "head to {a} and then to {b}",
    "pick {a} up and then {b}",
    "first {a} , then {b}",
    "go for {a} then {b}",
    "take {a} then grab {b}",
    "get {a} first and {b} second",
];

fn describe<R: Rng>(face: CardFace, rng: &mut R) -> String {
    let plural = if face.count > 1 { "s" } else { "" };
    if rng.gen_bool(0.5) {
        format!("the {} {} {}{}", face.count_word(), face.color_name(), face.shape_name(), plural)
    } else {
        format!(
            "the card with {} {} {}{}",
            face.count_word(),
            face.color_name(),
            face.shape_name(),
            plural
        )
    }
}

fn instruction_for<R: Rng>(faces: &[CardFace], rng: &mut R) -> Vec<String> {
    let text = match faces {
        [a] => SINGLE_TEMPLATES
            .choose(rng)
            .unwrap()
            .replace("{a}", &describe(*a, rng)),
        [a, b] => {
            let t = DOUBLE_TEMPLATES.choose(rng).unwrap();
            let da = describe(*a, rng);
            let db = describe(*b, rng);
            t.replace("{a}", &da).replace("{b}", &db)
        }
        _ => unreachable!("plans have one or two targets"),
    };
    text.split_whitespace().map(str::to_owned).collect()
}

/// Replays greedy moves down successive distance fields. Returns the action
/// sequence (with trailing STOP) and visited cells.
fn plan_path(
    world: &WorldState,
    targets: &[CardId],
    max_len: usize,
) -> Option<(Vec<Action>, Vec<AxialCoord>)> {
    let mut state = world.clone();
    let mut actions = Vec::new();
    let mut cells = vec![state.follower.position];
    for &t in targets {
        let goal = state.card(t)?.position;
        let field = DistanceField::new(&state, goal);
        while state.follower.position != goal {
            let a = field.best_move(&state, state.follower)?;
            state = state.apply_action(a).ok()?.0;
            actions.push(a);
            if cells.last() != Some(&state.follower.position) {
                cells.push(state.follower.position);
            }
            if actions.len() > max_len {
                return None;
            }
        }
    }
    actions.push(Action::Stop);
    Some((actions, cells))
}

/// Deterministic in `(seed, config)`.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig) -> Scenario {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        if let Some(s) = try_generate(seed, config, &mut rng) {
            return s;
        }
    }
    unreachable!()
}

fn try_generate(seed: u64, config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Option<Scenario> {
    let wc = config.world;
    let cells: Vec<AxialCoord> = wc.cells().collect();
    let obstacles: BTreeSet<AxialCoord> = cells
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(config.obstacle_density))
        .collect();
    let mut free: Vec<AxialCoord> = cells.iter().copied().filter(|c| !obstacles.contains(c)).collect();
    free.shuffle(rng);
    if free.len() < config.cards + 2 {
        return None;
    }
    let mut cards: Vec<Card> = free[..config.cards]
        .iter()
        .enumerate()
        .map(|(i, &position)| Card {
            id: CardId(i as u32),
            position,
            face: CardFace::random(rng),
            selected: false,
        })
        .collect();
    let follower = Pose::new(free[config.cards], Heading::new(rng.gen_range(0..6)));
    let leader = Pose::new(free[config.cards + 1], Heading::new(rng.gen_range(0..6)));
    let preselect = rng.gen_bool(config.preselect_prob);
    if preselect {
        let i = rng.gen_range(0..cards.len());
        cards[i].selected = true;
    }
    let world = WorldState::new(wc, obstacles, cards, follower, leader, rng.gen())
        .ok()?;

    let face_counts = world.cards.iter().fold(BTreeMap::new(), |mut m, c| {
        *m.entry(c.face).or_insert(0) += 1;
        m
    });
    let selected = world.selected_cards();
    let compatible = |c: &Card, extra: &[Card]| {
        let mut sel = selected.clone();
        sel.extend_from_slice(extra);
        sel.push(*c);
        !c.selected && face_counts[&c.face] == 1 && can_complete_set(&sel) && sel.len() < 3
    };

    let mut first: Vec<&Card> = world
        .cards
        .iter()
        .filter(|c| {
            let d = hex_distance(c.position, follower.position);
            (2..=config.first_target_range).contains(&d) && world.is_visible(c.position) && compatible(c, &[])
        })
        .collect();
    first.shuffle(rng);
    let t1 = **first.first()?;
    let mut targets = vec![t1];
    if !preselect && rng.gen_bool(config.two_target_prob) {
        let mut second: Vec<&Card> = world
            .cards
            .iter()
            .filter(|c| {
                let d = hex_distance(c.position, t1.position);
                c.id != t1.id && (2..=config.second_target_range).contains(&d) && compatible(c, &[t1])
            })
            .collect();
        second.shuffle(rng);
        if let Some(t2) = second.first() {
            targets.push(**t2);
        }
    }
    let ids: Vec<CardId> = targets.iter().map(|c| c.id).collect();
    let (actions, waypoints) = plan_path(&world, &ids, config.max_plan_len)?;
    let faces: Vec<CardFace> = targets.iter().map(|c| c.face).collect();
    let instruction = instruction_for(&faces, rng);
    let plan = Plan {
        targets: ids,
        stop: targets.last().unwrap().position,
        actions,
        waypoints,
    };
    let scenario = Scenario {
        seed,
        world,
        plan,
        instruction,
    };
    verify_plan(&scenario).then_some(scenario)
}

/// Replays the plan and checks it toggles exactly the targets and stops at
/// the intended cell.
pub fn verify_plan(s: &Scenario) -> bool {
    let mut state = s.world.clone();
    let mut toggles: BTreeMap<CardId, u32> = BTreeMap::new();
    for &a in &s.plan.actions {
        match state.apply_action(a) {
            Ok((next, ev)) => {
                if let Some(id) = ev.toggled {
                    *toggles.entry(id).or_default() += 1;
                }
                state = next;
            }
            Err(_) => return false,
        }
    }
    let net: BTreeSet<CardId> = toggles.into_iter().filter(|(_, n)| n % 2 == 1).map(|(id, _)| id).collect();
    state.completed
        && state.follower.position == s.plan.stop
        && net == s.plan.targets.iter().copied().collect()
}

/// The leader for one scenario: knows the plan and the starting board.
#[derive(Clone, Debug)]
pub struct Leader {
    pub config: OracleConfig,
    pub plan: Plan,
    initial_selection: BTreeMap<CardId, bool>,
}

impl Leader {
    pub fn new(config: OracleConfig, scenario: &Scenario) -> Self {
        Leader {
            config,
            plan: scenario.plan.clone(),
            initial_selection: scenario.world.cards.iter().map(|c| (c.id, c.selected)).collect(),
        }
    }

    fn toggled_from_start(&self, world: &WorldState, id: CardId) -> bool {
        match (world.card(id), self.initial_selection.get(&id)) {
            (Some(c), Some(&start)) => c.selected != start,
            // cleared as part of a completed set
            (None, Some(_)) => true,
            // respawned card, never part of the plan
            _ => false,
        }
    }

    /// Next card to reach, or `None` once only stopping remains.
    pub fn subgoal(&self, world: &WorldState) -> Option<CardId> {
        self.plan
            .targets
            .iter()
            .copied()
            .find(|&t| !self.toggled_from_start(world, t))
    }

    fn stray_toggles(&self, world: &WorldState) -> bool {
        world.cards.iter().any(|c| {
            !self.plan.targets.contains(&c.id)
                && self.initial_selection.get(&c.id).map_or(c.selected, |&s| s != c.selected)
        })
    }

    /// Whether `action` from `before` follows a shortest path to the current subgoal.
    pub fn action_is_correct(
        &self,
        before: &WorldState,
        action: Action,
        after: &WorldState,
        events: &StepEvents,
    ) -> bool {
        if let Some(id) = events.toggled {
            if !self.plan.targets.contains(&id) {
                return false;
            }
        }
        let goal = match self.subgoal(before) {
            Some(t) => match before.card(t) {
                Some(c) => c.position,
                None => return false,
            },
            None => self.plan.stop,
        };
        if action == Action::Stop {
            return self.subgoal(before).is_none()
                && before.follower.position == self.plan.stop
                && !self.stray_toggles(before);
        }
        if self.subgoal(before).is_none() && before.follower.position == self.plan.stop {
            return false;
        }
        let field = DistanceField::new(before, goal);
        let d0 = field.get(before.follower);
        d0 != DistanceField::UNREACHABLE && field.get(after.follower) + 1 == d0
    }

    /// Feedback on one executed action. Wall times are relative to the
    /// start of the episode.
    pub fn emit_feedback<R: Rng + ?Sized>(
        &self,
        before: &WorldState,
        action: Action,
        after: &WorldState,
        events: &StepEvents,
        action_start: f64,
        rng: &mut R,
    ) -> Vec<FeedbackSignal> {
        if !rng.gen_bool(self.config.feedback_prob) {
            return Vec::new();
        }
        let mut sign: i8 = if self.action_is_correct(before, action, after, events) { 1 } else { -1 };
        if rng.gen_bool(self.config.sign_error) {
            sign = -sign;
        }
        let delay = if self.config.delay_max > self.config.delay_min {
            rng.gen_range(self.config.delay_min..=self.config.delay_max)
        } else {
            self.config.delay_min
        };
        vec![FeedbackSignal {
            sign,
            wall_time: action_start + delay,
        }]
    }

    /// Whether the follower, now in `after`, has gone too far astray.
    pub fn maybe_reboot(&self, after: &WorldState, events: &StepEvents) -> bool {
        if let Some(id) = events.toggled {
            if !self.plan.targets.contains(&id) && self.toggled_from_start(after, id) {
                return true;
            }
        }
        let pos = after.follower.position;
        self.plan
            .waypoints
            .iter()
            .all(|&w| hex_distance(w, pos) > self.config.reboot_distance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn replay(s: &Scenario) -> Vec<(WorldState, Action, WorldState, StepEvents)> {
        let mut out = Vec::new();
        let mut state = s.world.clone();
        for &a in &s.plan.actions {
            let (next, ev) = state.apply_action(a).unwrap();
            out.push((state, a, next.clone(), ev));
            state = next;
        }
        out
    }

    #[test]
    fn scenarios_are_deterministic() {
        let c = ScenarioConfig::default();
        let a = generate_scenario(42, &c);
        let b = generate_scenario(42, &c);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, generate_scenario(43, &c));
    }

    #[test]
    fn plan_replay_reaches_stop() {
        let c = ScenarioConfig::default();
        for seed in 0..50 {
            let s = generate_scenario(seed, &c);
            assert!(verify_plan(&s), "seed {seed}");
            assert_eq!(*s.plan.actions.last().unwrap(), Action::Stop);
            assert!(!s.instruction.is_empty());
        }
    }

    #[test]
    fn plans_never_hit_obstacles() {
        let c = ScenarioConfig::default();
        let mut bad = 0;
        for seed in 0..1000 {
            let s = generate_scenario(seed, &c);
            let mut state = s.world.clone();
            for &a in &s.plan.actions {
                match state.apply_action(a) {
                    Ok((n, _)) => state = n,
                    Err(_) => {
                        bad += 1;
                        break;
                    }
                }
            }
        }
        assert_eq!(bad, 0);
    }

    #[test]
    fn optimal_replay_gets_only_praise() {
        let cfg = OracleConfig {
            feedback_prob: 1.0,
            sign_error: 0.0,
            ..OracleConfig::default()
        };
        let sc = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..100 {
            let s = generate_scenario(seed, &sc);
            let leader = Leader::new(cfg, &s);
            for (before, a, after, ev) in replay(&s) {
                let fb = leader.emit_feedback(&before, a, &after, &ev, before.clock, &mut rng);
                assert_eq!(fb.len(), 1);
                assert_eq!(fb[0].sign, 1, "seed {seed} action {a}");
                assert!(fb[0].wall_time > before.clock);
                assert!(fb[0].wall_time - before.clock >= cfg.delay_min);
                assert!(fb[0].wall_time - before.clock <= cfg.delay_max);
                if a != Action::Stop {
                    assert!(!leader.maybe_reboot(&after, &ev));
                }
            }
        }
    }

    #[test]
    fn turning_away_is_criticized() {
        let cfg = OracleConfig {
            feedback_prob: 1.0,
            sign_error: 0.0,
            ..OracleConfig::default()
        };
        let sc = ScenarioConfig::default();
        let mut checked = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..200 {
            let s = generate_scenario(seed, &sc);
            let leader = Leader::new(cfg, &s);
            let (after, ev) = s.world.apply_action(Action::Left).unwrap();
            let goal = s.world.card(s.plan.targets[0]).unwrap().position;
            let field = DistanceField::new(&s.world, goal);
            // only where turning left is strictly off every shortest path
            if field.get(after.follower) + 1 == field.get(s.world.follower) {
                continue;
            }
            let fb = leader.emit_feedback(&s.world, Action::Left, &after, &ev, 0.0, &mut rng);
            assert_eq!(fb, vec![FeedbackSignal { sign: -1, wall_time: fb[0].wall_time }]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn sign_error_rate() {
        let cfg = OracleConfig {
            feedback_prob: 1.0,
            sign_error: 0.07,
            ..OracleConfig::default()
        };
        let s = generate_scenario(3, &ScenarioConfig::default());
        let leader = Leader::new(cfg, &s);
        let (after, ev) = s.world.apply_action(s.plan.actions[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let neg = (0..10_000)
            .filter(|_| leader.emit_feedback(&s.world, s.plan.actions[0], &after, &ev, 0.0, &mut rng)[0].sign < 0)
            .count();
        let frac = neg as f64 / 10_000.0;
        assert!((frac - 0.07).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn feedback_is_deterministic_per_seed() {
        let s = generate_scenario(11, &ScenarioConfig::default());
        let leader = Leader::new(OracleConfig::default(), &s);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            replay(&s)
                .iter()
                .flat_map(|(b, a, n, ev)| leader.emit_feedback(b, *a, n, ev, b.clock, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(77), run(77));
    }

    #[test]
    fn reboot_when_far_from_waypoints() {
        let s = generate_scenario(21, &ScenarioConfig::default());
        let leader = Leader::new(OracleConfig::default(), &s);
        let t = leader.config.reboot_distance;
        // find a passable cell exactly threshold+1 from every waypoint's nearest
        let far = s
            .world
            .config
            .cells()
            .find(|&c| {
                s.world.passable(c)
                    && s.world.card_at(c).is_none()
                    && s.plan.waypoints.iter().map(|&w| hex_distance(w, c)).min() == Some(t + 1)
            })
            .unwrap();
        let mut w = s.world.clone();
        w.follower.position = far;
        assert!(leader.maybe_reboot(&w, &StepEvents::default()));
        let mut near = s.world.clone();
        near.follower.position = s.plan.waypoints[0];
        assert!(!leader.maybe_reboot(&near, &StepEvents::default()));
    }

    #[test]
    fn stray_toggle_triggers_reboot() {
        let s = generate_scenario(5, &ScenarioConfig::default());
        let leader = Leader::new(OracleConfig::default(), &s);
        let other = s.world.cards.iter().find(|c| !s.plan.targets.contains(&c.id)).unwrap();
        let mut w = s.world.clone();
        w.cards.iter_mut().find(|c| c.id == other.id).unwrap().selected ^= true;
        let ev = StepEvents {
            toggled: Some(other.id),
            ..StepEvents::default()
        };
        assert!(leader.maybe_reboot(&w, &ev));
        // toggling it back is a correction
        assert!(!leader.maybe_reboot(&s.world, &ev));
    }
}
