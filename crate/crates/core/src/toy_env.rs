//! Planar hinged-lid objects manipulated by a point end effector.
//!
//! Each object has a base segment, a lid rotating about a hinge, and a
//! handle knob on the lid. The action is `[dx, dy, grip]` in `[-1, 1]^3`;
//! the first two components are scaled by `a_max` into a displacement and
//! `grip > 0` requests (or keeps) a grasp. While grasped, the end effector
//! rides the handle and only the tangential part of the displacement moves
//! the lid.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact_planner::mpr_reward;
use crate::ltl::{Label, Proposition};
use crate::tl_mdp::{EnvTransition, LabeledEnv, TlError};

pub const WORLD_BOUND: f64 = 2.0;
pub const ACTION_DIM: usize = 3;
/// Distance between the closed lid and the base segment.
pub const BASE_GAP: f64 = 0.06;
/// Length of the handle knob, sticking out of the lid along its normal.
pub const KNOB_LENGTH: f64 = 0.05;

pub const APPROACHED: &str = "toilet_approached";
pub const GRASPED: &str = "lid_grasped";
pub const OPENED: &str = "lid_opened";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid object {id}: {message}")]
    InvalidObject { id: usize, message: String },
    #[error("step called on a terminal state")]
    Terminal,
    #[error("action must have {ACTION_DIM} finite components")]
    BadAction,
    #[error("invalid split request: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LidUp,
    LidSideways,
}

impl Category {
    pub fn flipped(self) -> Self {
        match self {
            Category::LidUp => Category::LidSideways,
            Category::LidSideways => Category::LidUp,
        }
    }

    /// Rotation of the object frame in the world.
    pub fn frame_angle(self) -> f64 {
        match self {
            Category::LidUp => 0.0,
            Category::LidSideways => PI / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedObject {
    pub id: usize,
    pub hinge: [f64; 2],
    pub lid_length: f64,
    /// Position of the handle along the lid, as a fraction of its length.
    pub handle_offset: f64,
    pub theta_max: f64,
    pub category: Category,
}

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn add(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl ArticulatedObject {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| {
            Err(EnvError::InvalidObject {
                id: self.id,
                message: m.to_string(),
            })
        };
        if !(0.3..=0.8).contains(&self.lid_length) {
            return bad("lid length outside [0.3, 0.8]");
        }
        if !(PI / 3.0 - 1e-12..=2.0 * PI / 3.0 + 1e-12).contains(&self.theta_max) {
            return bad("theta_max outside [pi/3, 2pi/3]");
        }
        if !(0.5..=1.0).contains(&self.handle_offset) {
            return bad("handle offset outside [0.5, 1]");
        }
        if self.hinge.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return bad("hinge outside [-1, 1]^2");
        }
        Ok(())
    }

    /// Unit vector from the hinge along the lid at opening angle `theta`.
    pub fn lid_direction(&self, theta: f64) -> [f64; 2] {
        unit(self.category.frame_angle() + theta)
    }

    /// Unit vector in the direction of increasing `theta` at the lid.
    pub fn lid_normal(&self, theta: f64) -> [f64; 2] {
        unit(self.category.frame_angle() + theta + PI / 2.0)
    }

    pub fn lid_end(&self, theta: f64) -> [f64; 2] {
        add(self.hinge, self.lid_direction(theta), self.lid_length)
    }

    pub fn handle_radius(&self) -> f64 {
        self.handle_offset * self.lid_length
    }

    pub fn handle(&self, theta: f64) -> [f64; 2] {
        add(self.hinge, self.lid_direction(theta), self.handle_radius())
    }

    /// Far end of the handle knob.
    pub fn knob_tip(&self, theta: f64) -> [f64; 2] {
        add(self.handle(theta), self.lid_normal(theta), KNOB_LENGTH)
    }

    /// Endpoints of the fixed base segment, parallel to the closed lid.
    pub fn base_segment(&self) -> ([f64; 2], [f64; 2]) {
        let start = add(self.hinge, self.lid_normal(0.0), -BASE_GAP);
        (start, add(start, self.lid_direction(0.0), self.lid_length))
    }

    pub fn theta_goal(&self, goal_fraction: f64) -> f64 {
        goal_fraction * self.theta_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub d_approach: f64,
    pub d_grasp: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub w_reach: f64,
    pub w_articulation: f64,
    pub w_mpr: f64,
    pub mpr_eps: f64,
    pub goal_fraction: f64,
    /// A held grasp is released only when the toggle drops below this value,
    /// so sampling noise around zero does not drop the handle.
    pub release_below: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            d_approach: 0.15,
            d_grasp: 0.05,
            a_max: 0.05,
            horizon: 200,
            w_reach: 0.1,
            w_articulation: 2.0,
            w_mpr: 0.005,
            mpr_eps: 0.05,
            goal_fraction: 0.8,
            release_below: -0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: [f64; 2],
    pub grasped: bool,
    pub theta: f64,
    pub t: usize,
}

impl EnvState {
    /// Proprioception: effector position, grasp flag, lid angle.
    pub fn proprioception(&self) -> [f64; 4] {
        [self.effector[0], self.effector[1], if self.grasped { 1.0 } else { 0.0 }, self.theta]
    }
}

/// Weighted reward components of one transition; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub reach: f64,
    pub articulation: f64,
    pub mpr: f64,
}

impl RewardComponents {
    pub fn total(&self) -> f64 {
        self.reach + self.articulation + self.mpr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: RewardComponents,
    pub label: Label,
    /// Set on the step where the grasp first engages.
    pub grasp_started: bool,
}

pub fn label(state: &EnvState, object: &ArticulatedObject, cfg: &EnvConfig) -> Label {
    let mut l = Label::new();
    let p = |s: &str| Proposition::new(s).expect("valid proposition");
    if distance(state.effector, object.handle(state.theta)) < cfg.d_approach {
        l.insert(p(APPROACHED));
    }
    if state.grasped {
        l.insert(p(GRASPED));
    }
    if state.theta >= object.theta_goal(cfg.goal_fraction) {
        l.insert(p(OPENED));
    }
    l
}

pub fn propositions() -> Vec<Proposition> {
    [APPROACHED, GRASPED, OPENED]
        .iter()
        .map(|s| Proposition::new(*s).expect("valid proposition"))
        .collect()
}

pub fn success(state: &EnvState, object: &ArticulatedObject, cfg: &EnvConfig) -> bool {
    state.theta >= object.theta_goal(cfg.goal_fraction)
}

/// Start state: lid closed, no grasp, effector in the upper start band at
/// least 0.8 m from the handle.
pub fn reset<R: Rng + ?Sized>(object: &ArticulatedObject, rng: &mut R) -> EnvState {
    let handle = object.handle(0.0);
    loop {
        let e = [rng.random_range(-1.5..1.5), rng.random_range(1.2..1.8)];
        if distance(e, handle) >= 0.8 {
            return EnvState {
                effector: e,
                grasped: false,
                theta: 0.0,
                t: 0,
            };
        }
    }
}

/// Pure transition function. `o_mp` is the planner's contact target used by
/// the MPR component; `None` disables that component. MPR is offset by its
/// maximum `1/mpr_eps`, so every per-step term except articulation is
/// non-positive and prolonging an episode never pays.
pub fn transition(
    state: &EnvState,
    action: &[f64],
    object: &ArticulatedObject,
    cfg: &EnvConfig,
    o_mp: Option<[f64; 2]>,
) -> Result<StepOutcome, EnvError> {
    if state.t >= cfg.horizon {
        return Err(EnvError::Terminal);
    }
    if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::BadAction);
    }
    let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let delta = [cfg.a_max * a[0], cfg.a_max * a[1]];
    let hold = if state.grasped { a[2] >= cfg.release_below } else { a[2] > 0.0 };
    let mut next = *state;
    next.t += 1;
    let mut grasp_started = false;
    if state.grasped && hold {
        let tangent = object.lid_normal(state.theta);
        let along = delta[0] * tangent[0] + delta[1] * tangent[1];
        next.theta = (state.theta + along / object.handle_radius()).clamp(0.0, object.theta_max);
        next.effector = object.handle(next.theta);
    } else {
        next.effector = [
            (state.effector[0] + delta[0]).clamp(-WORLD_BOUND, WORLD_BOUND),
            (state.effector[1] + delta[1]).clamp(-WORLD_BOUND, WORLD_BOUND),
        ];
        next.grasped = hold && distance(next.effector, object.handle(state.theta)) < cfg.d_grasp;
        grasp_started = next.grasped;
    }
    let reward = RewardComponents {
        reach: -cfg.w_reach * distance(next.effector, object.handle(next.theta)),
        articulation: cfg.w_articulation * (next.theta - state.theta),
        mpr: o_mp.map_or(0.0, |m| cfg.w_mpr * (mpr_reward(m, next.effector, cfg.mpr_eps) - 1.0 / cfg.mpr_eps)),
    };
    Ok(StepOutcome {
        label: label(&next, object, cfg),
        state: next,
        reward,
        grasp_started,
    })
}

/// Stateful wrapper used by rollouts.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub object: ArticulatedObject,
    pub config: EnvConfig,
    pub state: EnvState,
    pub o_mp: Option<[f64; 2]>,
    last_reward: RewardComponents,
    first_grasp: Option<[f64; 2]>,
}

impl ToyEnv {
    pub fn new<R: Rng + ?Sized>(object: ArticulatedObject, config: EnvConfig, rng: &mut R) -> Result<Self, EnvError> {
        object.validate()?;
        let state = reset(&object, rng);
        Ok(Self {
            object,
            config,
            state,
            o_mp: None,
            last_reward: RewardComponents::default(),
            first_grasp: None,
        })
    }

    pub fn last_reward(&self) -> RewardComponents {
        self.last_reward
    }

    /// Effector position when the grasp first engaged this episode.
    pub fn first_grasp(&self) -> Option<[f64; 2]> {
        self.first_grasp
    }

    pub fn success(&self) -> bool {
        success(&self.state, &self.object, &self.config)
    }

    pub fn label(&self) -> Label {
        label(&self.state, &self.object, &self.config)
    }

    pub fn advance(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let out = transition(&self.state, action, &self.object, &self.config, self.o_mp)?;
        if out.grasp_started && self.first_grasp.is_none() {
            self.first_grasp = Some(out.state.effector);
        }
        self.state = out.state;
        self.last_reward = out.reward;
        Ok(out)
    }
}

impl LabeledEnv for ToyEnv {
    type State = EnvState;

    fn state(&self) -> EnvState {
        self.state
    }

    fn is_terminal(&self) -> bool {
        self.state.t >= self.config.horizon
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvTransition, TlError> {
        let out = self.advance(action).map_err(|e| TlError::Env(e.to_string()))?;
        Ok(EnvTransition {
            r_env: out.reward.total(),
            label: out.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSplit {
    pub seen: Vec<ArticulatedObject>,
    pub unseen: Vec<ArticulatedObject>,
    pub transfer: Vec<ArticulatedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Seen,
    Unseen,
    Transfer,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Seen => "seen",
            SplitName::Unseen => "unseen",
            SplitName::Transfer => "transfer",
        }
    }
}

impl ObjectSplit {
    pub fn get(&self, name: SplitName) -> &[ArticulatedObject] {
        match name {
            SplitName::Seen => &self.seen,
            SplitName::Unseen => &self.unseen,
            SplitName::Transfer => &self.transfer,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &ArticulatedObject> {
        self.seen.iter().chain(&self.unseen).chain(&self.transfer)
    }

    pub fn to_json(&self) -> Result<String, EnvError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let split: ObjectSplit = serde_json::from_str(&fs::read_to_string(path)?)?;
        for o in split.all() {
            o.validate()?;
        }
        Ok(split)
    }
}

/// Seen objects draw lid length from [0.3, 0.55) and hinge x from
/// [-0.4, -0.05); unseen objects from [0.55, 0.8] and [0.05, 0.4]. Transfer
/// objects reuse the seen ranges with the flipped category.
pub fn make_splits(n_seen: usize, n_unseen: usize, seed: u64) -> Result<ObjectSplit, EnvError> {
    if n_seen == 0 || n_unseen == 0 {
        return Err(EnvError::Split("split sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = 0;
    let mut draw = |rng: &mut ChaCha8Rng, lid: (f64, f64), hx: (f64, f64), category: Category| {
        let o = ArticulatedObject {
            id,
            hinge: [rng.random_range(hx.0..hx.1), rng.random_range(-0.6..-0.4)],
            lid_length: rng.random_range(lid.0..lid.1),
            handle_offset: rng.random_range(0.5..=1.0),
            theta_max: rng.random_range(PI / 3.0..=2.0 * PI / 3.0),
            category,
        };
        id += 1;
        o
    };
    let seen_ranges = ((0.3, 0.55), (-0.4, -0.05));
    let unseen_ranges = ((0.55, 0.8), (0.05, 0.4));
    let base = Category::LidUp;
    let seen = (0..n_seen).map(|_| draw(&mut rng, seen_ranges.0, seen_ranges.1, base)).collect();
    let unseen = (0..n_unseen).map(|_| draw(&mut rng, unseen_ranges.0, unseen_ranges.1, base)).collect();
    let transfer = (0..n_unseen)
        .map(|_| draw(&mut rng, seen_ranges.0, seen_ranges.1, base.flipped()))
        .collect();
    Ok(ObjectSplit { seen, unseen, transfer })
}

/// Moves to the handle, grasps, and sweeps the lid open. Used as a
/// reference controller in tests and evaluation fixtures.
pub fn scripted_action(state: &EnvState, object: &ArticulatedObject, cfg: &EnvConfig) -> [f64; 3] {
    if state.grasped {
        let n = object.lid_normal(state.theta);
        return [n[0], n[1], 1.0];
    }
    let h = object.handle(state.theta);
    let d = [h[0] - state.effector[0], h[1] - state.effector[1]];
    let dist = d[0].hypot(d[1]);
    let scale = if dist > cfg.a_max { 1.0 / dist } else { 1.0 / cfg.a_max };
    [d[0] * scale, d[1] * scale, if dist < cfg.d_grasp + cfg.a_max { 1.0 } else { -1.0 }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltl::label as mk_label;

    fn object() -> ArticulatedObject {
        ArticulatedObject {
            id: 0,
            hinge: [-0.2, -0.5],
            lid_length: 0.5,
            handle_offset: 1.0,
            theta_max: PI / 2.0,
            category: Category::LidUp,
        }
    }

    fn state_at(e: [f64; 2], grasped: bool, theta: f64) -> EnvState {
        EnvState {
            effector: e,
            grasped,
            theta,
            t: 0,
        }
    }

    #[test]
    fn reset_is_seeded_and_far() {
        let o = object();
        let a = reset(&o, &mut ChaCha8Rng::seed_from_u64(3));
        let b = reset(&o, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        for seed in 0..1000 {
            let s = reset(&o, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(s.theta, 0.0);
            assert!(!s.grasped);
            assert!(distance(s.effector, o.handle(0.0)) >= 0.8);
        }
    }

    #[test]
    fn moving_toward_handle_pays_more_reach() {
        let o = object();
        let cfg = EnvConfig::default();
        let s = state_at([0.3, 0.5], false, 0.0);
        let toward = transition(&s, &[0.0, -1.0, -1.0], &o, &cfg, None).unwrap();
        let away = transition(&s, &[0.0, 1.0, -1.0], &o, &cfg, None).unwrap();
        assert!(toward.reward.reach > away.reward.reach);
    }

    #[test]
    fn tangential_motion_rotates_lid_by_arc_length() {
        let o = object();
        let cfg = EnvConfig::default();
        let theta = 0.3;
        let s = state_at(o.handle(theta), true, theta);
        let n = o.lid_normal(theta);
        let out = transition(&s, &[n[0] * 0.4, n[1] * 0.4, 1.0], &o, &cfg, None).unwrap();
        let delta = 0.4 * cfg.a_max;
        assert!((out.state.theta - theta - delta / o.lid_length).abs() < 1e-12);
        assert!(distance(out.state.effector, o.handle(out.state.theta)) < 1e-12);
        assert!((out.reward.articulation - cfg.w_articulation * delta / o.lid_length).abs() < 1e-12);
    }

    #[test]
    fn grasp_needs_proximity() {
        let o = object();
        let cfg = EnvConfig::default();
        let h = o.handle(0.0);
        let far = state_at([h[0], h[1] + 0.2], false, 0.0);
        assert!(!transition(&far, &[0.0, 0.0, 1.0], &o, &cfg, None).unwrap().state.grasped);
        let near = state_at([h[0], h[1] + 0.03], false, 0.0);
        let out = transition(&near, &[0.0, 0.0, 1.0], &o, &cfg, None).unwrap();
        assert!(out.state.grasped && out.grasp_started);
        let released = transition(&out.state, &[0.0, 0.0, -1.0], &o, &cfg, None).unwrap();
        assert!(!released.state.grasped);
    }

    #[test]
    fn theta_is_clamped() {
        let o = object();
        let cfg = EnvConfig::default();
        let mut s = state_at(o.handle(o.theta_max - 0.01), true, o.theta_max - 0.01);
        for _ in 0..5 {
            let n = o.lid_normal(s.theta);
            s = transition(&s, &[n[0], n[1], 1.0], &o, &cfg, None).unwrap().state;
            assert!(s.theta <= o.theta_max);
        }
        assert_eq!(s.theta, o.theta_max);
        let mut s = state_at(o.handle(0.0), true, 0.0);
        let n = o.lid_normal(0.0);
        s = transition(&s, &[-n[0], -n[1], 1.0], &o, &cfg, None).unwrap().state;
        assert_eq!(s.theta, 0.0);
    }

    #[test]
    fn labels_follow_thresholds() {
        let o = object();
        let cfg = EnvConfig::default();
        assert!(label(&state_at([1.5, 1.5], false, 0.0), &o, &cfg).is_empty());
        let h = o.handle(0.0);
        assert_eq!(label(&state_at([h[0] + 0.1, h[1]], false, 0.0), &o, &cfg), mk_label([APPROACHED]));
        let full = state_at(o.handle(o.theta_max), true, o.theta_max);
        assert_eq!(label(&full, &o, &cfg), mk_label([APPROACHED, GRASPED, OPENED]));
    }

    #[test]
    fn success_threshold_is_strict() {
        let o = object();
        let cfg = EnvConfig::default();
        let goal = o.theta_goal(cfg.goal_fraction);
        assert!(!success(&state_at([0.0; 2], false, 0.0), &o, &cfg));
        assert!(success(&state_at([0.0; 2], false, o.theta_max), &o, &cfg));
        assert!(!success(&state_at([0.0; 2], false, goal - 1e-9), &o, &cfg));
        assert!(success(&state_at([0.0; 2], false, goal), &o, &cfg));
    }

    #[test]
    fn terminal_state_rejects_steps() {
        let o = object();
        let cfg = EnvConfig::default();
        let mut s = state_at([0.0, 1.0], false, 0.0);
        s.t = cfg.horizon;
        assert!(matches!(transition(&s, &[0.0; 3], &o, &cfg, None), Err(EnvError::Terminal)));
        assert!(matches!(
            transition(&state_at([0.0, 1.0], false, 0.0), &[0.0; 2], &o, &cfg, None),
            Err(EnvError::BadAction)
        ));
    }

    #[test]
    fn splits_are_seeded_disjoint_and_flipped() {
        let a = make_splits(8, 4, 7).unwrap();
        assert_eq!(a, make_splits(8, 4, 7).unwrap());
        for s in &a.seen {
            assert!(s.lid_length < 0.55 && s.hinge[0] < -0.05);
            s.validate().unwrap();
        }
        for u in &a.unseen {
            assert!(u.lid_length >= 0.55 && u.hinge[0] >= 0.05);
            u.validate().unwrap();
        }
        assert!(a.transfer.iter().all(|o| o.category == Category::LidSideways));
        let ids: std::collections::BTreeSet<_> = a.all().map(|o| o.id).collect();
        assert_eq!(ids.len(), 16);
        let back: ObjectSplit = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(make_splits(0, 1, 0).is_err());
    }

    #[test]
    fn sideways_objects_are_rotated() {
        let mut o = object();
        o.category = Category::LidSideways;
        let h = o.handle(0.0);
        assert!((h[0] - o.hinge[0]).abs() < 1e-12);
        assert!((h[1] - o.hinge[1] - o.lid_length).abs() < 1e-12);
    }

    #[test]
    fn scripted_controller_opens_every_object() {
        let split = make_splits(10, 5, 1).unwrap();
        let cfg = EnvConfig::default();
        for o in split.all() {
            let mut env = ToyEnv::new(o.clone(), cfg, &mut ChaCha8Rng::seed_from_u64(o.id as u64)).unwrap();
            while !env.success() && !env.is_terminal() {
                let a = scripted_action(&env.state, &env.object, &cfg);
                env.advance(&a).unwrap();
            }
            assert!(env.success(), "object {} not opened", o.id);
            assert!(env.first_grasp().is_some());
        }
    }
}
