//! Top-down 2D pick-and-place world with a good and a bad peg, scripted
//! demonstrators, generator-assigned frame labels and rollout evaluation.

use flowguide_numkit::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{Frame, FrameLabel, Stage, Trajectory, Usefulness};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ACTION_DIM: usize = 3;
pub const PROPRIO_DIM: usize = 3;

/// Background used by prior useful episodes.
pub const STYLE_PRIOR: u8 = 0;
/// Background shared by target demos, adversarial episodes and evaluation.
pub const STYLE_TARGET: u8 = 1;

const GRIPPER_SPAWN: [[f32; 2]; 2] = [[0.25, 0.75], [0.08, 0.22]];
const NUT_SPAWN: [[f32; 2]; 2] = [[0.25, 0.75], [0.6, 0.85]];
const PICK_PAUSE: usize = 2;
const RELEASE_PAUSE: usize = 2;

// Shape sizes in pixels of a 64-pixel image.
const GRIPPER_OUTER: f32 = 4.0;
const GRIPPER_INNER: f32 = 2.0;
const NUT_RADIUS: f32 = 3.0;
const PEG_RADIUS: f32 = 3.0;

const COLOR_GRIPPER: [u8; 3] = [235, 235, 235];
const COLOR_NUT: [u8; 3] = [240, 200, 40];
const COLOR_PEG_GOOD: [u8; 3] = [60, 200, 90];
const COLOR_PEG_BAD: [u8; 3] = [200, 60, 160];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub image_size: usize,
    /// Step cap for generated episodes and evaluation rollouts.
    pub episode_cap: usize,
    /// Per-axis bound on |dx| and |dy|.
    pub max_step: f32,
    /// Distance the scripted demonstrators cover per transit step.
    pub expert_speed: f32,
    pub pick_radius: f32,
    pub success_radius: f32,
    pub peg_good: [f32; 2],
    pub peg_bad: [f32; 2],
    pub useful_episodes: usize,
    pub adversarial_episodes: usize,
    pub target_demos: usize,
    /// Standard deviation of demonstrator noise on transit steps, world units.
    pub noise: f32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            episode_cap: 80,
            max_step: 0.08,
            expert_speed: 0.05,
            pick_radius: 0.06,
            success_radius: 0.06,
            peg_good: [0.85, 0.3],
            peg_bad: [0.15, 0.3],
            useful_episodes: 200,
            adversarial_episodes: 200,
            target_demos: 10,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be at least 16, got {}", self.image_size)));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode_cap must be positive".into()));
        }
        let positive = [self.max_step, self.expert_speed, self.pick_radius, self.success_radius];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.noise >= 0.0) {
            return Err(Error::Config("bench distances must be positive and noise non-negative".into()));
        }
        if self.expert_speed + 2.0 * self.noise > self.max_step {
            return Err(Error::Config(
                "expert_speed + 2·noise must not exceed max_step, or demonstrations get clipped".into(),
            ));
        }
        for p in [self.peg_good, self.peg_bad] {
            if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Config("peg positions must lie in [0,1]²".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: [f32; 2],
    pub holding: bool,
    pub nut: [f32; 2],
    pub peg_good: [f32; 2],
    pub peg_bad: [f32; 2],
    pub background: u8,
}

impl WorldState {
    pub fn proprio(&self) -> Vec<f32> {
        vec![self.gripper[0], self.gripper[1], if self.holding { 1.0 } else { 0.0 }]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionVec {
    pub dx: f32,
    pub dy: f32,
    pub grip: f32,
}

impl ActionVec {
    pub const IDLE: ActionVec = ActionVec {
        dx: 0.0,
        dy: 0.0,
        grip: -1.0,
    };

    pub fn new(dx: f32, dy: f32, grip: f32) -> Self {
        Self { dx, dy, grip }
    }

    pub fn to_vec(self) -> Vec<f32> {
        vec![self.dx, self.dy, self.grip]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.grip.is_finite()
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn sample_in(rng: &mut Rng, region: [[f32; 2]; 2]) -> [f32; 2] {
    [
        rng.uniform_range(region[0][0] as f64, region[0][1] as f64) as f32,
        rng.uniform_range(region[1][0] as f64, region[1][1] as f64) as f32,
    ]
}

/// Random start state with the given background.
pub fn initial_state(cfg: &BenchConfig, background: u8, rng: &mut Rng) -> WorldState {
    let gripper = sample_in(rng, GRIPPER_SPAWN);
    let nut = sample_in(rng, NUT_SPAWN);
    WorldState {
        gripper,
        holding: false,
        nut,
        peg_good: cfg.peg_good,
        peg_bad: cfg.peg_bad,
        background,
    }
}

/// Deterministic transition. Displacements are clamped to `max_step` per axis
/// and the gripper to the unit square; non-finite components count as zero.
pub fn step(w: &WorldState, a: &ActionVec, cfg: &BenchConfig) -> WorldState {
    let clean = |x: f32| if x.is_finite() { x } else { 0.0 };
    let dx = clean(a.dx).clamp(-cfg.max_step, cfg.max_step);
    let dy = clean(a.dy).clamp(-cfg.max_step, cfg.max_step);
    let grip = clean(a.grip);
    let mut next = *w;
    next.gripper = [(w.gripper[0] + dx).clamp(0.0, 1.0), (w.gripper[1] + dy).clamp(0.0, 1.0)];
    if grip > 0.0 && !w.holding && dist(next.gripper, w.nut) <= cfg.pick_radius {
        next.holding = true;
    } else if grip < 0.0 {
        next.holding = false;
    }
    if next.holding {
        next.nut = next.gripper;
    }
    next
}

pub fn is_success(w: &WorldState, cfg: &BenchConfig) -> bool {
    !w.holding && dist(w.nut, w.peg_good) <= cfg.success_radius
}

// Both styles share the checker layout so that only colour separates them.
fn background_rgb(style: u8, row: usize, col: usize, size: usize) -> [u8; 3] {
    let tile = (size / 8).max(1);
    let even = ((row / tile) + (col / tile)) % 2 == 0;
    match (style, even) {
        (STYLE_PRIOR, true) => [50, 90, 130],
        (STYLE_PRIOR, false) => [40, 70, 110],
        (_, true) => [120, 95, 60],
        (_, false) => [100, 80, 50],
    }
}

/// Inclusive pixel bounds `(row0, row1, col0, col1)` of the gripper sprite.
pub fn gripper_bbox(pos: [f32; 2], cfg: &BenchConfig) -> (usize, usize, usize, usize) {
    let s = cfg.image_size as f32;
    let r = GRIPPER_OUTER * s / 64.0;
    let span = |c: f32| {
        let lo = (c * s - r - 0.5).ceil().max(0.0) as usize;
        let hi = ((c * s + r - 0.5).floor().max(0.0) as usize).min(cfg.image_size - 1);
        (lo, hi)
    };
    let (c0, c1) = span(pos[0]);
    let (r0, r1) = span(pos[1]);
    (r0, r1, c0, c1)
}

// Paints pixels whose centres satisfy `inside(dx, dy)` with offsets in 64-pixel units.
fn paint(img: &mut Image, pos: [f32; 2], reach: f32, color: [u8; 3], inside: impl Fn(f32, f32) -> bool) {
    let size = img.width();
    let s = size as f32;
    let scale = 64.0 / s;
    let cx = pos[0] * s;
    let cy = pos[1] * s;
    let r = reach / scale;
    let r0 = (cy - r - 0.5).ceil().max(0.0) as usize;
    let r1 = ((cy + r - 0.5).floor().max(0.0) as usize).min(size - 1);
    let c0 = (cx - r - 0.5).ceil().max(0.0) as usize;
    let c1 = ((cx + r - 0.5).floor().max(0.0) as usize).min(size - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let dx = (col as f32 + 0.5 - cx) * scale;
            let dy = (row as f32 + 0.5 - cy) * scale;
            if inside(dx, dy) {
                img.put_rgb(row, col, color);
            }
        }
    }
}

pub fn render(w: &WorldState, cfg: &BenchConfig) -> Image {
    let n = cfg.image_size;
    let mut img = Image::filled(n, n, [0, 0, 0]);
    for row in 0..n {
        for col in 0..n {
            img.put_rgb(row, col, background_rgb(w.background, row, col, n));
        }
    }
    let disc = |r: f32| move |dx: f32, dy: f32| dx * dx + dy * dy <= r * r;
    paint(&mut img, w.peg_good, PEG_RADIUS, COLOR_PEG_GOOD, disc(PEG_RADIUS));
    paint(&mut img, w.peg_bad, PEG_RADIUS, COLOR_PEG_BAD, disc(PEG_RADIUS));
    paint(&mut img, w.nut, NUT_RADIUS, COLOR_NUT, |dx, dy| dx.abs() + dy.abs() <= NUT_RADIUS);
    paint(&mut img, w.gripper, GRIPPER_OUTER, COLOR_GRIPPER, |dx, dy| {
        let m = dx.abs().max(dy.abs());
        (GRIPPER_INNER..=GRIPPER_OUTER).contains(&m)
    });
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Good,
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Reach,
    Pick(usize),
    Carry,
    Release(usize),
    Done,
}

/// Waypoint-following demonstrator. Transit steps cover `expert_speed` plus
/// Gaussian noise whose norm is clipped at 2σ; the step that lands on a
/// waypoint is exact and noise-free.
#[derive(Clone, Debug)]
pub struct ScriptedDemonstrator {
    goal: Goal,
    phase: Phase,
    // carry steps still spent heading for the good peg before turning
    hesitation: usize,
    noise: f32,
    rng: Rng,
}

impl ScriptedDemonstrator {
    pub fn expert(noise: f32, rng: Rng) -> Self {
        Self::new(Goal::Good, 0, noise, rng)
    }

    /// Demonstrator that carries the nut toward the good peg for `hesitation`
    /// steps and then to the bad peg.
    pub fn adversarial(hesitation: usize, noise: f32, rng: Rng) -> Self {
        Self::new(Goal::Bad, hesitation, noise, rng)
    }

    fn new(goal: Goal, hesitation: usize, noise: f32, rng: Rng) -> Self {
        Self {
            goal,
            phase: Phase::Reach,
            hesitation,
            noise,
            rng,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn move_toward(&mut self, from: [f32; 2], to: [f32; 2], speed: f32) -> (f32, f32) {
        let d = dist(from, to);
        if d <= speed {
            return (to[0] - from[0], to[1] - from[1]);
        }
        let (mut nx, mut ny) = (0.0f32, 0.0f32);
        if self.noise > 0.0 {
            nx = self.noise * self.rng.normal_f32();
            ny = self.noise * self.rng.normal_f32();
            let norm = nx.hypot(ny);
            let cap = 2.0 * self.noise;
            if norm > cap {
                nx *= cap / norm;
                ny *= cap / norm;
            }
        }
        (
            (to[0] - from[0]) / d * speed + nx,
            (to[1] - from[1]) / d * speed + ny,
        )
    }

    /// Next action and the stage it belongs to.
    pub fn act(&mut self, w: &WorldState, cfg: &BenchConfig) -> (ActionVec, Stage) {
        loop {
            match self.phase {
                Phase::Reach => {
                    if w.holding || dist(w.gripper, w.nut) < 1e-6 {
                        self.phase = Phase::Pick(PICK_PAUSE);
                        continue;
                    }
                    let (dx, dy) = self.move_toward(w.gripper, w.nut, cfg.expert_speed);
                    return (ActionVec::new(dx, dy, -1.0), Stage::Reach);
                }
                Phase::Pick(left) => {
                    if left == 0 {
                        self.phase = Phase::Carry;
                        continue;
                    }
                    self.phase = Phase::Pick(left - 1);
                    return (ActionVec::new(0.0, 0.0, 1.0), Stage::PickUp);
                }
                Phase::Carry => {
                    let dest = match self.goal {
                        Goal::Bad if self.hesitation == 0 => w.peg_bad,
                        _ => w.peg_good,
                    };
                    if self.goal == Goal::Bad && self.hesitation > 0 {
                        self.hesitation -= 1;
                    }
                    if dist(w.gripper, dest) < 1e-6 {
                        self.phase = Phase::Release(RELEASE_PAUSE);
                        continue;
                    }
                    let (dx, dy) = self.move_toward(w.gripper, dest, cfg.expert_speed);
                    return (ActionVec::new(dx, dy, 1.0), Stage::Transfer);
                }
                Phase::Release(left) => {
                    if left == 0 {
                        self.phase = Phase::Done;
                        continue;
                    }
                    self.phase = Phase::Release(left - 1);
                    return (ActionVec::new(0.0, 0.0, -1.0), Stage::Place);
                }
                Phase::Done => return (ActionVec::IDLE, Stage::Place),
            }
        }
    }
}

/// Whether a displacement points closer to the bad peg than to the good one.
pub fn heads_toward_bad(from: [f32; 2], delta: [f32; 2], w: &WorldState) -> bool {
    let n = delta[0].hypot(delta[1]);
    if n < 1e-9 {
        return false;
    }
    let cos_to = |p: [f32; 2]| {
        let v = [p[0] - from[0], p[1] - from[1]];
        let vn = v[0].hypot(v[1]);
        if vn < 1e-9 {
            1.0
        } else {
            (v[0] * delta[0] + v[1] * delta[1]) / (vn * n)
        }
    };
    cos_to(w.peg_bad) > cos_to(w.peg_good)
}

/// A generated episode with its full state log.
#[derive(Clone, Debug)]
pub struct Episode {
    pub states: Vec<WorldState>,
    pub actions: Vec<ActionVec>,
    pub stages: Vec<Stage>,
    pub labels: Vec<FrameLabel>,
    pub success: bool,
}

/// Runs a demonstrator to completion. Frame `t` is `(s_t, a_t)`; the final
/// frame repeats the idle action.
pub fn run_demonstrator(
    mut demo: ScriptedDemonstrator,
    start: WorldState,
    cfg: &BenchConfig,
) -> Episode {
    let mut states = vec![start];
    let mut actions = Vec::new();
    let mut stages = Vec::new();
    while !demo.is_done() && actions.len() < cfg.episode_cap {
        let w = *states.last().expect("seeded");
        let (a, stage) = demo.act(&w, cfg);
        if demo.is_done() {
            break;
        }
        states.push(step(&w, &a, cfg));
        actions.push(a);
        stages.push(stage);
    }
    actions.push(ActionVec::IDLE);
    stages.push(Stage::Place);
    let labels = label_frames(&states, &stages, demo.goal);
    let success = is_success(states.last().expect("seeded"), cfg);
    Episode {
        states,
        actions,
        stages,
        labels,
        success,
    }
}

/// Generator-side usefulness labels.
///
/// Good-goal episodes are useful throughout. For bad-goal episodes, frames
/// before the nut is first held are useful, frames whose step heads closer to
/// the bad peg while holding are adversarial, and every other frame after the
/// pick-up is non-harmful.
pub fn label_frames(states: &[WorldState], stages: &[Stage], goal: Goal) -> Vec<FrameLabel> {
    let n = states.len();
    let progress = |t: usize| if n > 1 { t as f32 / (n - 1) as f32 } else { 0.0 };
    let mut picked = false;
    (0..n)
        .map(|t| {
            let s = &states[t];
            picked |= s.holding;
            let usefulness = match goal {
                Goal::Good => Usefulness::Useful,
                Goal::Bad if !picked => Usefulness::Useful,
                Goal::Bad => {
                    let toward_bad = s.holding
                        && t + 1 < n
                        && heads_toward_bad(
                            s.gripper,
                            [states[t + 1].gripper[0] - s.gripper[0], states[t + 1].gripper[1] - s.gripper[1]],
                            s,
                        );
                    if toward_bad {
                        Usefulness::Adversarial
                    } else {
                        Usefulness::NonHarmful
                    }
                }
            };
            FrameLabel {
                stage: stages[t],
                usefulness,
                stage_progress: progress(t),
            }
        })
        .collect()
}

/// Renders an episode into a labeled trajectory.
pub fn episode_to_trajectory(ep: &Episode, id: String, source: &str, cfg: &BenchConfig) -> Trajectory {
    let frames = ep
        .states
        .iter()
        .zip(&ep.actions)
        .zip(&ep.labels)
        .map(|((s, a), l)| Frame {
            image: render(s, cfg),
            action: a.to_vec(),
            proprio: s.proprio(),
            label: Some(*l),
        })
        .collect();
    Trajectory {
        id,
        source: source.to_string(),
        frames,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Target,
    PriorUseful,
    PriorAdversarial,
}

impl EpisodeKind {
    fn stream_base(self) -> u64 {
        match self {
            EpisodeKind::Target => 1 << 32,
            EpisodeKind::PriorUseful => 2 << 32,
            EpisodeKind::PriorAdversarial => 3 << 32,
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            EpisodeKind::Target => "target",
            EpisodeKind::PriorUseful => "prior_useful",
            EpisodeKind::PriorAdversarial => "prior_adversarial",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            EpisodeKind::Target => "target",
            EpisodeKind::PriorUseful => "useful",
            EpisodeKind::PriorAdversarial => "adv",
        }
    }
}

/// One generated episode; its randomness comes only from `(seed, kind, index)`.
pub fn generate_episode(cfg: &BenchConfig, kind: EpisodeKind, index: usize) -> Episode {
    let mut rng = Rng::with_stream(cfg.seed, kind.stream_base() + index as u64);
    let background = match kind {
        EpisodeKind::PriorUseful => STYLE_PRIOR,
        _ => STYLE_TARGET,
    };
    let start = initial_state(cfg, background, &mut rng);
    let demo = match kind {
        EpisodeKind::PriorAdversarial => {
            let hesitation = 1 + rng.below(3);
            ScriptedDemonstrator::adversarial(hesitation, cfg.noise, rng.fork(rng.stream() ^ (1 << 63)))
        }
        _ => ScriptedDemonstrator::expert(cfg.noise, rng.fork(rng.stream() ^ (1 << 63))),
    };
    run_demonstrator(demo, start, cfg)
}

fn generate_kind(cfg: &BenchConfig, kind: EpisodeKind, count: usize) -> Vec<Trajectory> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let ep = generate_episode(cfg, kind, i);
            episode_to_trajectory(&ep, format!("{}-{i:04}", kind.prefix()), kind.source(), cfg)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BenchData {
    pub target: Vec<Trajectory>,
    pub prior: Vec<Trajectory>,
}

/// Target demos on the target background; a prior of useful episodes on the
/// other background followed by adversarial episodes on the target background.
pub fn generate_datasets(cfg: &BenchConfig) -> Result<BenchData> {
    cfg.validate()?;
    let target = generate_kind(cfg, EpisodeKind::Target, cfg.target_demos);
    let mut prior = generate_kind(cfg, EpisodeKind::PriorUseful, cfg.useful_episodes);
    prior.extend(generate_kind(cfg, EpisodeKind::PriorAdversarial, cfg.adversarial_episodes));
    Ok(BenchData { target, prior })
}

/// Closed-loop controller queried for a chunk of actions, executed open-loop.
pub trait Policy {
    /// Called before every rollout.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &Image, state: &WorldState) -> Vec<ActionVec>;
}

/// The scripted expert with access to the true state.
pub struct ExpertPolicy {
    cfg: BenchConfig,
    demo: ScriptedDemonstrator,
    seed: u64,
    episode: u64,
}

impl ExpertPolicy {
    pub fn new(cfg: &BenchConfig, seed: u64) -> Self {
        Self {
            cfg: cfg.clone(),
            demo: ScriptedDemonstrator::expert(cfg.noise, Rng::new(seed)),
            seed,
            episode: 0,
        }
    }
}

impl Policy for ExpertPolicy {
    fn reset(&mut self) {
        self.episode += 1;
        self.demo = ScriptedDemonstrator::expert(self.cfg.noise, Rng::with_stream(self.seed, self.episode));
    }

    fn act(&mut self, _obs: &Image, state: &WorldState) -> Vec<ActionVec> {
        vec![self.demo.act(state, &self.cfg).0]
    }
}

/// Uniform actions over the full action box.
pub struct RandomPolicy {
    rng: Rng,
    max_step: f32,
}

impl RandomPolicy {
    pub fn new(cfg: &BenchConfig, seed: u64) -> Self {
        Self {
            rng: Rng::new(seed),
            max_step: cfg.max_step,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Image, _state: &WorldState) -> Vec<ActionVec> {
        let m = self.max_step as f64;
        vec![ActionVec::new(
            self.rng.uniform_range(-m, m) as f32,
            self.rng.uniform_range(-m, m) as f32,
            self.rng.uniform_range(-1.0, 1.0) as f32,
        )]
    }
}

pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, _obs: &Image, _state: &WorldState) -> Vec<ActionVec> {
        vec![ActionVec::default()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Episodes aborted because the policy produced a non-finite action.
    pub non_finite: Vec<usize>,
    pub mean_steps: f64,
}

/// Rolls out `episodes` episodes on the target background from start states
/// drawn from `(eval_seed, episode)` streams.
pub fn evaluate_policy(policy: &mut dyn Policy, cfg: &BenchConfig, episodes: usize, eval_seed: u64) -> EvalReport {
    let mut successes = 0;
    let mut non_finite = Vec::new();
    let mut total_steps = 0usize;
    for ep in 0..episodes {
        let mut rng = Rng::with_stream(eval_seed, (4 << 32) + ep as u64);
        let mut w = initial_state(cfg, STYLE_TARGET, &mut rng);
        policy.reset();
        let mut steps = 0;
        let mut ok = false;
        'episode: while steps < cfg.episode_cap {
            let chunk = policy.act(&render(&w, cfg), &w);
            if chunk.is_empty() {
                break;
            }
            for a in chunk {
                if !a.is_finite() {
                    non_finite.push(ep);
                    break 'episode;
                }
                w = step(&w, &a, cfg);
                steps += 1;
                if is_success(&w, cfg) {
                    ok = true;
                    break 'episode;
                }
                if steps >= cfg.episode_cap {
                    break 'episode;
                }
            }
        }
        successes += ok as usize;
        total_steps += steps;
    }
    if !non_finite.is_empty() {
        log::warn!("{} rollout(s) hit non-finite actions", non_finite.len());
    }
    EvalReport {
        episodes,
        successes,
        success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        non_finite,
        mean_steps: if episodes == 0 { 0.0 } else { total_steps as f64 / episodes as f64 },
    }
}
