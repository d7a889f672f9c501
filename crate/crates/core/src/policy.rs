//! Log-linear follower policy over hashed features, with executable-action
//! masking, ensemble voting, and rollout sampling.

use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::sync::Arc;

use fnv::FnvHasher;
use rand::Rng;
use thiserror::Error;

use crate::hexgeom::{nearest_direction, to_agent_frame, AxialCoord, Pose, DIRECTIONS};
use crate::rewards::{StepInput, Trace, TraceEnd, TraceStep};
use crate::simleader::{FeedbackSignal, Leader, Scenario};
use crate::world::{Action, ActionSet, CardFace, CardSnapshot, Observation, COLORS, COUNT_WORDS, SHAPES};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action {0} is masked out")]
    MaskedAction(Action),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse feature or gradient vector: sorted, unique indices.
pub type FeatureVector = Vec<(u32, f64)>;

/// Probability per action, indexed by [`Action::index`].
pub type ActionDist = [f64; 5];

fn merge_sorted(mut v: Vec<(u32, f64)>) -> FeatureVector {
    v.sort_unstable_by_key(|(i, _)| *i);
    let mut out: FeatureVector = Vec::with_capacity(v.len());
    for (i, x) in v {
        match out.last_mut() {
            Some((j, y)) if *j == i => *y += x,
            _ => out.push((i, x)),
        }
    }
    out
}

/// A card descriptor parsed from the instruction: any of count, color, shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Descriptor {
    pub count: Option<u8>,
    pub color: Option<u8>,
    pub shape: Option<u8>,
}

impl Descriptor {
    fn mentioned(&self) -> u8 {
        self.count.is_some() as u8 + self.color.is_some() as u8 + self.shape.is_some() as u8
    }

    fn matched(&self, face: CardFace) -> u8 {
        (self.count == Some(face.count)) as u8
            + (self.color == Some(face.color)) as u8
            + (self.shape == Some(face.shape)) as u8
    }

    pub fn matches_exactly(&self, face: CardFace) -> bool {
        self.mentioned() > 0 && self.matched(face) == self.mentioned()
    }
}

/// Descriptors in instruction order. A shape word closes a descriptor.
pub fn parse_descriptors(tokens: &[String]) -> Vec<Descriptor> {
    let mut out = Vec::new();
    let mut cur = Descriptor::default();
    for tok in tokens {
        let singular = tok.strip_suffix('s').unwrap_or(tok);
        if let Some(i) = COUNT_WORDS.iter().position(|w| w == tok) {
            cur.count = Some(i as u8 + 1);
        } else if let Some(i) = COLORS.iter().position(|w| w == tok) {
            cur.color = Some(i as u8);
        } else if let Some(i) = SHAPES.iter().position(|w| *w == tok || *w == singular) {
            cur.shape = Some(i as u8);
            out.push(std::mem::take(&mut cur));
        }
    }
    if cur.mentioned() > 0 {
        out.push(cur);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct CardMatch {
    exact: bool,
    matched: u8,
    /// Descriptor slot, capped at 2.
    slot: u8,
}

fn best_match(descs: &[Descriptor], face: CardFace) -> CardMatch {
    let mut best = CardMatch {
        exact: false,
        matched: 0,
        slot: 2,
    };
    for (i, d) in descs.iter().enumerate() {
        let m = CardMatch {
            exact: d.matches_exactly(face),
            matched: d.matched(face),
            slot: i.min(2) as u8,
        };
        if (m.exact, m.matched) > (best.exact, best.matched) {
            best = m;
        }
    }
    best
}

fn distance_bucket(d: i32) -> u8 {
    match d {
        0..=3 => d as u8,
        4..=5 => 4,
        6..=8 => 5,
        _ => 6,
    }
}

/// Direction bucket of an agent-frame offset; 6 means "here".
fn sector(rel: AxialCoord) -> u8 {
    if rel == AxialCoord::ORIGIN {
        6
    } else {
        nearest_direction(rel) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum SlotStatus {
    Done,
    Pending,
    Unknown,
}

/// Maps (instruction, observation, action) to hashed indicator features.
/// Every spatial feature is computed in the agent-centric frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Featurizer {
    pub dim: usize,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer { dim: 1 << 18 }
    }
}

fn key<T: Hash>(t: T) -> u64 {
    let mut h = FnvHasher::default();
    t.hash(&mut h);
    h.finish()
}

impl Featurizer {
    pub fn new(dim: usize) -> Self {
        assert!(dim.is_power_of_two(), "feature dimension must be a power of two");
        Featurizer { dim }
    }

    /// Action-independent feature keys.
    fn context_keys(&self, instruction: &[String], obs: &Observation) -> Vec<u64> {
        let pose = obs.follower;
        let descs = parse_descriptors(instruction);
        let mut keys = vec![key("bias")];
        for t in instruction {
            keys.push(key(("uni", t)));
        }
        for w in instruction.windows(2) {
            keys.push(key(("bi", &w[0], &w[1])));
        }

        let frame = |c: AxialCoord| to_agent_frame(c, pose);
        let mut slot_cards: Vec<Option<(AxialCoord, CardSnapshot)>> = vec![None; descs.len()];
        for (pos, card) in obs.known_cards() {
            let m = best_match(&descs, card.face);
            let rel = frame(pos);
            let d = rel.length();
            let (sec, db) = (sector(rel), distance_bucket(d));
            keys.push(key(("card", m, card.selected, sec, db)));
            keys.push(key(("card_dir", m.exact, m.slot, card.selected, sec)));
            if d == 0 {
                keys.push(key(("here", m.exact, m.slot, card.selected)));
            }
            if m.exact && (m.slot as usize) < descs.len() {
                slot_cards[m.slot as usize] = Some((pos, *card));
            }
        }

        let status: Vec<SlotStatus> = slot_cards
            .iter()
            .map(|c| match c {
                Some((_, k)) if k.selected => SlotStatus::Done,
                Some(_) => SlotStatus::Pending,
                None => SlotStatus::Unknown,
            })
            .collect();
        keys.push(key(("progress", &status)));
        let all_done = !status.is_empty() && status.iter().all(|s| *s == SlotStatus::Done);
        keys.push(key(("all_done", all_done)));
        match status.iter().position(|s| *s != SlotStatus::Done) {
            Some(i) => match slot_cards[i] {
                Some((pos, _)) => {
                    let rel = frame(pos);
                    let (sec, db) = (sector(rel), distance_bucket(rel.length()));
                    keys.push(key(("next", sec, db)));
                    keys.push(key(("next_dir", sec)));
                    keys.push(key(("next_dist", db)));
                }
                None => keys.push(key("next_unknown")),
            },
            None => keys.push(key("next_none")),
        }

        let standing_on = obs.cell(pose.position).and_then(|m| m.card);
        for (name, dir) in [("front", pose.heading), ("back", pose.heading.opposite())] {
            let cell = pose.position + DIRECTIONS[dir.index()];
            let kind: (u8, bool, bool) = match obs.cell(cell) {
                None => (0, false, false),
                Some(m) if m.obstacle => (1, false, false),
                Some(m) => match m.card {
                    Some(k) => (2, best_match(&descs, k.face).exact, k.selected),
                    None => (3, obs.trajectory.contains(&cell), false),
                },
            };
            keys.push(key((name, kind)));
            keys.push(key((name, kind, standing_on.is_some(), all_done)));
        }
        keys
    }

    fn row(&self, keys: &[u64], a: Action) -> FeatureVector {
        let mask = (self.dim - 1) as u64;
        merge_sorted(
            keys.iter()
                .map(|&k| ((key((k, a.index() as u8)) & mask) as u32, 1.0))
                .collect(),
        )
    }

    pub fn featurize(&self, instruction: &[String], obs: &Observation, a: Action) -> FeatureVector {
        self.row(&self.context_keys(instruction, obs), a)
    }

    /// Features for every executable action at one step.
    pub fn featurize_all(&self, input: &StepInput) -> ActionFeatures {
        let keys = self.context_keys(&input.instruction, &input.observation);
        let mut rows: [FeatureVector; 5] = Default::default();
        for a in input.mask.iter() {
            rows[a.index()] = self.row(&keys, a);
        }
        ActionFeatures {
            mask: input.mask,
            rows,
        }
    }
}

/// Per-action feature rows for one decision; masked-out rows are empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionFeatures {
    pub mask: ActionSet,
    pub rows: [FeatureVector; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        PolicyParams {
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn dot(&self, f: &FeatureVector) -> f64 {
        f.iter().map(|&(i, x)| self.weights[i as usize] * x).sum()
    }

    pub fn scores(&self, feats: &ActionFeatures) -> [f64; 5] {
        let mut s = [f64::NEG_INFINITY; 5];
        for a in feats.mask.iter() {
            s[a.index()] = self.dot(&feats.rows[a.index()]);
        }
        s
    }

    pub fn distribution(&self, feats: &ActionFeatures) -> ActionDist {
        masked_softmax(&self.scores(feats), feats.mask)
    }
}

/// Softmax over masked-in entries; masked-out entries are exactly 0.
pub fn masked_softmax(scores: &[f64; 5], mask: ActionSet) -> ActionDist {
    let max = mask.iter().map(|a| scores[a.index()]).fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; 5];
    let mut z = 0.0;
    for a in mask.iter() {
        let e = (scores[a.index()] - max).exp();
        p[a.index()] = e;
        z += e;
    }
    for a in mask.iter() {
        p[a.index()] /= z;
    }
    p
}

/// Highest-probability masked-in action; ties go to the earlier action.
pub fn argmax(dist: &ActionDist, mask: ActionSet) -> Action {
    let mut best = None;
    for a in mask.iter() {
        match best {
            Some((_, p)) if dist[a.index()] <= p => {}
            _ => best = Some((a, dist[a.index()])),
        }
    }
    best.expect("mask is nonempty").0
}

pub fn action_distribution(
    params: &PolicyParams,
    featurizer: &Featurizer,
    instruction: &[String],
    obs: &Observation,
    mask: ActionSet,
) -> ActionDist {
    let input = StepInput {
        instruction: Arc::from(instruction.to_vec()),
        observation: obs.clone(),
        mask,
    };
    params.distribution(&featurizer.featurize_all(&input))
}

/// Gradient of `log pi(a)` with respect to the weights:
/// `phi(a) - sum_b pi(b) phi(b)`.
pub fn logprob_grad(
    params: &PolicyParams,
    feats: &ActionFeatures,
    a: Action,
) -> Result<FeatureVector, PolicyError> {
    if !feats.mask.contains(a) {
        return Err(PolicyError::MaskedAction(a));
    }
    let pi = params.distribution(feats);
    let mut acc: Vec<(u32, f64)> = feats.rows[a.index()].clone();
    for b in feats.mask.iter() {
        let p = pi[b.index()];
        acc.extend(feats.rows[b.index()].iter().map(|&(i, x)| (i, -p * x)));
    }
    Ok(merge_sorted(acc).into_iter().filter(|(_, g)| *g != 0.0).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<PolicyParams>,
}

impl Ensemble {
    pub fn new(members: Vec<PolicyParams>) -> Result<Self, PolicyError> {
        if members.is_empty() {
            return Err(PolicyError::EmptyEnsemble);
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[PolicyParams] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn votes(&self, feats: &ActionFeatures) -> [u32; 5] {
        let mut v = [0; 5];
        for m in &self.members {
            v[argmax(&m.distribution(feats), feats.mask).index()] += 1;
        }
        v
    }

    pub fn distribution(&self, feats: &ActionFeatures) -> ActionDist {
        vote_distribution(&self.votes(feats), feats.mask)
    }
}

/// Probability proportional to `exp(votes)` over masked-in actions.
pub fn vote_distribution(votes: &[u32; 5], mask: ActionSet) -> ActionDist {
    masked_softmax(&votes.map(f64::from), mask)
}

pub fn ensemble_distribution(
    ensemble: &Ensemble,
    featurizer: &Featurizer,
    instruction: &[String],
    obs: &Observation,
    mask: ActionSet,
) -> ActionDist {
    let input = StepInput {
        instruction: Arc::from(instruction.to_vec()),
        observation: obs.clone(),
        mask,
    };
    ensemble.distribution(&featurizer.featurize_all(&input))
}

/// Anything that yields an action distribution for a step.
pub trait ActionSampler: Sync {
    fn distribution(&self, input: &StepInput) -> ActionDist;
}

pub struct LinearPolicy<'a> {
    pub params: &'a PolicyParams,
    pub featurizer: Featurizer,
}

impl ActionSampler for LinearPolicy<'_> {
    fn distribution(&self, input: &StepInput) -> ActionDist {
        self.params.distribution(&self.featurizer.featurize_all(input))
    }
}

pub struct EnsemblePolicy<'a> {
    pub ensemble: &'a Ensemble,
    pub featurizer: Featurizer,
}

impl ActionSampler for EnsemblePolicy<'_> {
    fn distribution(&self, input: &StepInput) -> ActionDist {
        self.ensemble.distribution(&self.featurizer.featurize_all(input))
    }
}

/// Puts all mass on the wrapped sampler's most likely action.
pub struct Greedy<S>(pub S);

impl<S: ActionSampler> ActionSampler for Greedy<S> {
    fn distribution(&self, input: &StepInput) -> ActionDist {
        let d = self.0.distribution(input);
        let mut out = [0.0; 5];
        out[argmax(&d, input.mask).index()] = 1.0;
        out
    }
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDist, mask: ActionSet, rng: &mut R) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for a in mask.iter() {
        let p = dist[a.index()];
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(a);
        if u < acc {
            return a;
        }
    }
    last.expect("distribution has mass on the mask")
}

/// Execute one instruction. With a leader, feedback is collected and the
/// leader may reboot; without one, only STOP or the step limit ends it.
pub fn sample_rollout<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    sampler: &dyn ActionSampler,
    scenario: &Scenario,
    leader: Option<&Leader>,
    sample_rng: &mut R1,
    oracle_rng: &mut R2,
    max_steps: usize,
) -> Trace {
    assert!(max_steps >= 1);
    let instruction: Arc<[String]> = Arc::from(scenario.instruction.clone());
    let mut world = scenario.world.clone();
    let mut obs = world.observe(None);
    let mut steps = Vec::new();
    let mut feedback: Vec<FeedbackSignal> = Vec::new();
    let mut end = TraceEnd::Truncated;
    let mut reboot_time = None;
    for _ in 0..max_steps {
        let mask = world.executable_actions();
        let input = Arc::new(StepInput {
            instruction: instruction.clone(),
            observation: obs.clone(),
            mask,
        });
        let dist = sampler.distribution(&input);
        let action = sample_action(&dist, mask, sample_rng);
        let start = world.clock;
        let (next, events) = world
            .apply_action(action)
            .expect("sampled actions are executable");
        if let Some(l) = leader {
            feedback.extend(l.emit_feedback(&world, action, &next, &events, start, oracle_rng));
        }
        steps.push(TraceStep {
            input,
            action,
            wall_time: start,
            behavior_prob: dist[action.index()],
            toggled: events.toggled,
            invalid_set: events.invalid_set,
        });
        world = next;
        if action == Action::Stop {
            end = TraceEnd::Stopped;
            break;
        }
        if leader.is_some_and(|l| l.maybe_reboot(&world, &events)) {
            end = TraceEnd::Rebooted;
            reboot_time = Some(world.clock);
            break;
        }
        obs = world.observe(Some(&obs));
    }
    if let Some(t) = reboot_time {
        feedback.retain(|f| f.wall_time < t);
    }
    feedback.sort_by(|a, b| a.wall_time.total_cmp(&b.wall_time));
    if let Some(t) = reboot_time {
        feedback.push(FeedbackSignal::negative(t));
    }
    Trace {
        id: scenario.seed,
        round: 0,
        scenario_seed: scenario.seed,
        instruction,
        steps,
        feedback,
        end,
        final_position: world.follower.position,
    }
}

/// Follows the scenario's plan exactly.
pub struct PlanReplay<'a> {
    pub scenario: &'a Scenario,
}

impl ActionSampler for PlanReplay<'_> {
    fn distribution(&self, input: &StepInput) -> ActionDist {
        let i = input.observation.tick as usize;
        let a = self.scenario.plan.actions.get(i).copied().unwrap_or(Action::Stop);
        let mut d = [0.0; 5];
        d[a.index()] = 1.0;
        d
    }
}

/// Demonstration trace: the plan replayed with unit propensities.
pub fn demonstration(scenario: &Scenario, id: u64) -> Trace {
    let mut none = rand::rngs::mock::StepRng::new(0, 0);
    let mut none2 = rand::rngs::mock::StepRng::new(0, 0);
    let mut t = sample_rollout(
        &PlanReplay { scenario },
        scenario,
        None,
        &mut none,
        &mut none2,
        scenario.plan.actions.len(),
    );
    t.id = id;
    t
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HXCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub dim: u64,
    pub seed: u64,
    pub round: u32,
}

/// Binary checkpoint: magic, version, dim, seed, round, then little-endian f64 weights.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &PolicyParams,
    seed: u64,
    round: u32,
) -> Result<(), PolicyError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.dim() as u64).to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&round.to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.dim() * 8);
    for x in &params.weights {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointHeader, PolicyParams), PolicyError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let round = u32::from_le_bytes(b4);
    let mut raw = vec![0u8; dim as usize * 8];
    r.read_exact(&mut raw)?;
    let weights: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if weights.iter().any(|x| !x.is_finite()) {
        return Err(PolicyError::Checkpoint("non-finite weight".into()));
    }
    Ok((CheckpointHeader { dim, seed, round }, PolicyParams { weights }))
}

/// Re-express an observation after moving the whole board and the follower
/// by the same rigid motion: rotate by `steps` sixths about the origin, then
/// translate by `shift`.
pub fn transform_observation(obs: &Observation, steps: i32, shift: AxialCoord) -> Observation {
    let tf = |c: AxialCoord| c.rotate(steps) + shift;
    Observation {
        tick: obs.tick,
        follower: Pose::new(tf(obs.follower.position), obs.follower.heading.turned(steps)),
        cells: obs.cells.iter().map(|(c, m)| (tf(*c), *m)).collect(),
        trajectory: obs.trajectory.iter().map(|c| tf(*c)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simleader::{generate_scenario, OracleConfig, ScenarioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn random_features<R: Rng>(rng: &mut R, dim: usize, mask: ActionSet) -> ActionFeatures {
        let mut rows: [FeatureVector; 5] = Default::default();
        for a in mask.iter() {
            let v = (0..6).map(|_| (rng.gen_range(0..dim as u32), rng.gen_range(-1.0..1.0))).collect();
            rows[a.index()] = merge_sorted(v);
        }
        ActionFeatures { mask, rows }
    }

    fn random_mask<R: Rng>(rng: &mut R) -> ActionSet {
        loop {
            let m: ActionSet = Action::ALL.into_iter().filter(|_| rng.gen_bool(0.7)).collect();
            if !m.is_empty() {
                return m;
            }
        }
    }

    #[test]
    fn descriptors_parse_in_order() {
        let d = parse_descriptors(&tokens("pick up the two red stars then the card with one blue heart"));
        assert_eq!(
            d,
            vec![
                Descriptor { count: Some(2), color: Some(0), shape: Some(3) },
                Descriptor { count: Some(1), color: Some(1), shape: Some(4) },
            ]
        );
    }

    #[test]
    fn featurize_is_deterministic_and_action_specific() {
        let s = generate_scenario(4, &ScenarioConfig::default());
        let obs = s.world.observe(None);
        let f = Featurizer::new(1 << 16);
        let a = f.featurize(&s.instruction, &obs, Action::Forward);
        assert_eq!(a, f.featurize(&s.instruction, &obs, Action::Forward));
        let b = f.featurize(&s.instruction, &obs, Action::Left);
        assert_ne!(a, b);
        assert!(a.iter().all(|(i, _)| (*i as usize) < f.dim));
    }

    #[test]
    fn features_invariant_to_joint_rotation() {
        let f = Featurizer::new(1 << 18);
        for seed in 0..20 {
            let s = generate_scenario(seed, &ScenarioConfig::default());
            let mut w = s.world.clone();
            let mut obs = w.observe(None);
            for a in &s.plan.actions[..s.plan.actions.len().min(4)] {
                w = w.apply_action(*a).unwrap().0;
                obs = w.observe(Some(&obs));
            }
            for steps in 1..6 {
                let moved = transform_observation(&obs, steps, AxialCoord::new(3, -7));
                for a in Action::ALL {
                    assert_eq!(f.featurize(&s.instruction, &obs, a), f.featurize(&s.instruction, &moved, a));
                }
            }
        }
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = PolicyParams::zeros(64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = random_features(&mut rng, 64, ActionSet::FULL);
        assert!(p.distribution(&feats).iter().all(|x| (*x - 0.2).abs() < 1e-15));
        let mask = ActionSet::FULL.without(Action::Forward);
        let feats = random_features(&mut rng, 64, mask);
        let d = p.distribution(&feats);
        assert_eq!(d[Action::Forward.index()], 0.0);
        assert!(mask.iter().all(|a| (d[a.index()] - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_action_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask: ActionSet = [Action::Stop].into_iter().collect();
        let feats = random_features(&mut rng, 32, mask);
        let mut p = PolicyParams::zeros(32);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let g = logprob_grad(&p, &feats, Action::Stop).unwrap();
        assert!(g.iter().all(|(_, x)| x.abs() < 1e-12));
        assert!(matches!(logprob_grad(&p, &feats, Action::Left), Err(PolicyError::MaskedAction(Action::Left))));
    }

    #[test]
    fn expected_score_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mask = random_mask(&mut rng);
            let feats = random_features(&mut rng, 32, mask);
            let mut p = PolicyParams::zeros(32);
            p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-2.0..2.0));
            let pi = p.distribution(&feats);
            let mut total = [0.0; 32];
            for a in mask.iter() {
                for (i, g) in logprob_grad(&p, &feats, a).unwrap() {
                    total[i as usize] += pi[a.index()] * g;
                }
            }
            assert!(total.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn vote_fixture() {
        let mut votes = [0; 5];
        votes[Action::Forward.index()] = 7;
        votes[Action::Left.index()] = 3;
        let d = vote_distribution(&votes, ActionSet::FULL);
        let z = 7f64.exp() + 3f64.exp() + 3.0;
        assert!((d[0] - 7f64.exp() / z).abs() < 1e-15);
        assert!((d[2] - 3f64.exp() / z).abs() < 1e-15);
        for i in [1, 3, 4] {
            assert!((d[i] - 1.0 / z).abs() < 1e-15);
        }
    }

    #[test]
    fn single_member_ensemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = PolicyParams::zeros(64);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let feats = random_features(&mut rng, 64, ActionSet::FULL);
        let e = Ensemble::new(vec![p.clone()]).unwrap();
        let d = e.distribution(&feats);
        let top = argmax(&p.distribution(&feats), ActionSet::FULL);
        let z = 1f64.exp() + 4.0;
        assert!((d[top.index()] - 1f64.exp() / z).abs() < 1e-15);

        let many = Ensemble::new(vec![p.clone(); 4]).unwrap();
        let mut votes = [0; 5];
        votes[top.index()] = 4;
        assert_eq!(many.distribution(&feats), vote_distribution(&votes, ActionSet::FULL));
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn plan_replay_rollout_matches_plan() {
        let s = generate_scenario(6, &ScenarioConfig::default());
        let leader = Leader::new(OracleConfig::default(), &s);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let t = sample_rollout(&PlanReplay { scenario: &s }, &s, Some(&leader), &mut r1, &mut r2, 100);
        assert_eq!(t.steps.iter().map(|x| x.action).collect::<Vec<_>>(), s.plan.actions);
        assert_eq!(t.end, TraceEnd::Stopped);
        assert!(t.steps.iter().all(|x| x.behavior_prob == 1.0));
        t.validate().unwrap();

        let one = sample_rollout(&PlanReplay { scenario: &s }, &s, Some(&leader), &mut r1, &mut r2, 1);
        assert_eq!(one.steps.len(), 1);
    }

    #[test]
    fn rollout_records_sampling_probabilities() {
        let s = generate_scenario(10, &ScenarioConfig::default());
        let f = Featurizer::new(1 << 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = PolicyParams::zeros(f.dim);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        let pol = LinearPolicy { params: &p, featurizer: f };
        let leader = Leader::new(OracleConfig::default(), &s);
        let mut t = sample_rollout(&pol, &s, Some(&leader), &mut rng, &mut ChaCha8Rng::seed_from_u64(5), 40);
        t.round = 1;
        for st in &t.steps {
            let d = pol.distribution(&st.input);
            assert_eq!(st.behavior_prob, d[st.action.index()]);
        }
        t.validate().unwrap();
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut bad: &[u8] = b"NOPE....";
        assert!(read_checkpoint(&mut bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn checkpoint_round_trip(weights in prop::collection::vec(-1e6f64..1e6, 0..200), seed: u64, round: u32) {
                let p = PolicyParams { weights };
                let mut buf = Vec::new();
                write_checkpoint(&mut buf, &p, seed, round).unwrap();
                let (h, q) = read_checkpoint(&mut buf.as_slice()).unwrap();
                prop_assert_eq!(h, CheckpointHeader { dim: p.dim() as u64, seed, round });
                prop_assert_eq!(
                    q.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    p.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }

            #[test]
            fn softmax_properties(scores in prop::array::uniform5(-30f64..30.0), shift in -100f64..100.0, bits in 1u8..32) {
                let mask: ActionSet = Action::ALL.into_iter().filter(|a| bits & (1 << a.index()) != 0).collect();
                let p = masked_softmax(&scores, mask);
                let q = masked_softmax(&scores.map(|s| s + shift), mask);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for a in Action::ALL {
                    if !mask.contains(a) {
                        prop_assert_eq!(p[a.index()], 0.0);
                    }
                    prop_assert!((p[a.index()] - q[a.index()]).abs() < 1e-9);
                }
            }

            #[test]
            fn ensemble_argmax_is_plurality(v in prop::array::uniform5(0u32..12), bits in 1u8..32) {
                let mask: ActionSet = Action::ALL.into_iter().filter(|a| bits & (1 << a.index()) != 0).collect();
                let d = vote_distribution(&v, mask);
                let best = mask.iter().map(|a| v[a.index()]).max().unwrap();
                let winners: Vec<_> = mask.iter().filter(|a| v[a.index()] == best).collect();
                if winners.len() == 1 {
                    prop_assert_eq!(argmax(&d, mask), winners[0]);
                }
                for a in Action::ALL {
                    if !mask.contains(a) {
                        prop_assert_eq!(d[a.index()], 0.0);
                    }
                }
            }
        }
    }
}
