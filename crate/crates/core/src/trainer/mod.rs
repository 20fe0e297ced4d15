//! Training orchestration: exploration rollouts through the task-augmented
//! environment, replay, noise-estimator and critic updates with in-buffer
//! action improvement, contact planner refinement, evaluation, ablations,
//! and run directories.
//!
//! A run directory holds `seg.ckpt`, `policy.ckpt`, `critic.ckpt`,
//! `cp.ckpt`, `encoder.ckpt`, `vocab.json`, `splits.json`, `contacts.csv`,
//! the metric exports, and `manifest.json` (config, version, seed).
//! Everything is a pure function of the config and the segmentation
//! weights; runs are single-threaded.

pub mod buffer;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::{ReplayBuffer, Transition};
pub use metrics::{export_metrics, metrics_csv, read_metrics_csv, summarize, MetricsRow, Summary, CSV_HEADER};

use crate::contact_planner::{
    update_planner, write_contacts_csv, ContactLog, ContactRecord, CpConfig, CpNet, EpisodeContacts, PlannerError, PlannerSample,
};
use crate::diffusion_policy::{
    critic_targets, estimator_update, make_schedule, sample_actions, ActionBox, Critic, EstimatorSpec, NoiseEstimator, NoiseSchedule,
    PolicyError,
};
use crate::ltl::{closure, parse, Formula, LtlError};
use crate::nn::{read_checkpoint, write_checkpoint, AdamState, NnError};
use crate::perception::{pretrain_segmentation, generate_dataset, PerceptionError, PretrainConfig, SceneConfig, SegNet, synthesize_scene};
use crate::task_encoder::{tokenize, EncoderConfig, EncoderError, EncoderTrace, TaskEncoder, TokenVocab};
use crate::tl_mdp::{self, RewardConfig, TlError, TlState};
use crate::toy_env::{self, make_splits, ArticulatedObject, EnvConfig, EnvError, ObjectSplit, SplitName, ToyEnv, ACTION_DIM};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const CLOSURE_CAP: usize = 4096;
const PROPRIO_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error(transparent)]
    Ltl(#[from] LtlError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tl(#[from] TlError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_seen: 32,
            n_unseen: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            beta_min: 1e-4,
            beta_max: 0.2,
            time_dim: 16,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: String,
    pub seed: u64,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub splits: SplitConfig,
    pub env: EnvConfig,
    pub scene: SceneConfig,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderConfig,
    pub planner: CpConfig,
    pub diffusion: DiffusionConfig,
    pub critic_hidden: Vec<usize>,
    pub r_phi: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Critic-gradient improvement step, annealed linearly to `beta_final`.
    pub beta: f64,
    pub beta_final: f64,
    pub lr_estimator: f64,
    pub lr_critic: f64,
    pub lr_encoder: f64,
    pub lr_planner: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub train_every: usize,
    pub tau_cp: f64,
    pub cp_window: usize,
    pub cp_steps: usize,
    /// Objects drawn per planner update; bounds its cost as the seen split grows.
    pub cp_batch: usize,
    pub use_ltl: bool,
    pub use_affordance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: "F(toilet_approached & F(lid_grasped & F lid_opened))".into(),
            seed: 0,
            total_steps: 200_000,
            eval_every: 20_000,
            eval_episodes: 12,
            splits: SplitConfig::default(),
            env: EnvConfig::default(),
            scene: SceneConfig::default(),
            pretrain: PretrainConfig::default(),
            encoder: EncoderConfig::default(),
            planner: CpConfig::default(),
            diffusion: DiffusionConfig::default(),
            critic_hidden: vec![64, 64],
            r_phi: 1.0,
            gamma: 0.99,
            rho: 0.995,
            beta: 2.0,
            beta_final: 0.2,
            lr_estimator: 3e-4,
            lr_critic: 3e-4,
            lr_encoder: 1e-4,
            lr_planner: 1e-3,
            buffer_capacity: 100_000,
            batch_size: 128,
            warmup_steps: 1000,
            train_every: 4,
            tau_cp: 0.3,
            cp_window: 20,
            cp_steps: 5,
            cp_batch: 8,
            use_ltl: true,
            use_affordance: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn formula(&self) -> Result<Formula, TrainError> {
        Ok(parse(&self.task)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let phi = self.formula()?;
        let props = toy_env::propositions();
        for p in phi.propositions() {
            if !props.contains(&p) {
                return Err(TrainError::Config(format!("proposition {p} is not produced by the environment")));
            }
        }
        closure(&phi, &props, CLOSURE_CAP)?;
        self.encoder.validate()?;
        let vocab = TokenVocab::new(props.iter());
        tokenize(&phi, &vocab, self.encoder.max_len)?;
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.batch_size == 0 || self.train_every == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, train_every and buffer_capacity must be positive");
        }
        if self.splits.n_seen == 0 || self.splits.n_unseen == 0 {
            return bad("split sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.rho) {
            return bad("gamma and rho must lie in [0, 1]");
        }
        if self.beta < 0.0 || self.beta_final < 0.0 {
            return bad("improvement step must be non-negative");
        }
        if self.planner.top_k == 0 || self.cp_window == 0 || self.cp_batch == 0 {
            return bad("planner top_k, cp_window and cp_batch must be positive");
        }
        make_schedule(self.diffusion.steps, self.diffusion.beta_min, self.diffusion.beta_max)?;
        if !self.diffusion.time_dim.is_multiple_of(2) {
            return bad("diffusion time_dim must be even");
        }
        Ok(())
    }

    pub fn obs_dim(&self, seg_dim: usize) -> usize {
        seg_dim + self.encoder.d_model + if self.use_affordance { 2 } else { 0 } + PROPRIO_DIM
    }
}

/// Every model used to act, plus the observation layout.
#[derive(Debug, Clone)]
pub struct Agent {
    pub segnet: SegNet,
    pub encoder: TaskEncoder,
    pub vocab: TokenVocab,
    pub estimator: NoiseEstimator,
    pub critic: Critic,
    pub planner: CpNet,
    pub schedule: NoiseSchedule,
    pub bounds: ActionBox,
    pub scene: SceneConfig,
    pub use_ltl: bool,
    pub use_affordance: bool,
    phi_cache: HashMap<Formula, Array1<f64>>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, segnet: SegNet, rng: &mut R) -> Result<Self, TrainError> {
        let vocab = TokenVocab::new(toy_env::propositions().iter());
        let encoder = TaskEncoder::new(cfg.encoder, vocab.len(), rng)?;
        let obs_dim = cfg.obs_dim(segnet.feature_dim());
        let estimator = NoiseEstimator::new(
            EstimatorSpec {
                action_dim: ACTION_DIM,
                obs_dim,
                time_dim: cfg.diffusion.time_dim,
                steps: cfg.diffusion.steps,
                hidden: cfg.diffusion.hidden.clone(),
            },
            rng,
        )?;
        let critic = Critic::new(obs_dim, ACTION_DIM, &cfg.critic_hidden, rng)?;
        let planner = CpNet::new(cfg.planner, rng)?;
        Ok(Self {
            segnet,
            encoder,
            vocab,
            estimator,
            critic,
            planner,
            schedule: make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)?,
            bounds: ActionBox::symmetric(ACTION_DIM, 1.0),
            scene: cfg.scene,
            use_ltl: cfg.use_ltl,
            use_affordance: cfg.use_affordance,
            phi_cache: HashMap::new(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.estimator.spec.obs_dim
    }

    fn phi_range(&self) -> std::ops::Range<usize> {
        let start = self.segnet.feature_dim();
        start..start + self.encoder.dim()
    }

    pub fn tokens(&self, phi: &Formula) -> Result<Vec<usize>, TrainError> {
        Ok(tokenize(phi, &self.vocab, self.encoder.config().max_len)?)
    }

    /// Task embedding; the zero vector when the task input is ablated.
    pub fn embed(&mut self, phi: &Formula) -> Result<Array1<f64>, TrainError> {
        if !self.use_ltl {
            return Ok(Array1::zeros(self.encoder.dim()));
        }
        if let Some(v) = self.phi_cache.get(phi) {
            return Ok(v.clone());
        }
        let v = self.encoder.encode(&self.tokens(phi)?)?;
        self.phi_cache.insert(phi.clone(), v.clone());
        Ok(v)
    }

    pub fn invalidate_embeddings(&mut self) {
        self.phi_cache.clear();
    }

    /// Vision feature of a freshly synthesized scene.
    pub fn perceive<R: Rng + ?Sized>(&self, env: &ToyEnv, rng: &mut R) -> Result<Vec<f64>, TrainError> {
        let scene = synthesize_scene(&env.object, &env.state, &self.scene, rng);
        Ok(self.segnet.extract_features(&scene.points.view())?.to_vec())
    }

    /// Points the segmentation network assigns to the object; the whole
    /// cloud if it assigns none.
    pub fn object_cloud<R: Rng + ?Sized>(&self, env: &ToyEnv, rng: &mut R) -> Result<Array2<f64>, TrainError> {
        let scene = synthesize_scene(&env.object, &env.state, &self.scene, rng);
        let pred = self.segnet.predict(&scene.points.view())?;
        let keep: Vec<usize> = (0..pred.len()).filter(|&i| pred[i].is_object()).collect();
        if keep.is_empty() {
            return Ok(scene.points);
        }
        Ok(scene.points.select(Axis(0), &keep))
    }

    pub fn observation(&mut self, o_pn: &[f64], phi: &Formula, o_mp: [f64; 2], s_prop: [f64; 4]) -> Result<Vec<f64>, TrainError> {
        let emb = self.embed(phi)?;
        Ok(self.assemble(o_pn, &emb.view(), o_mp, s_prop))
    }

    fn assemble(&self, o_pn: &[f64], phi: &ArrayView1<f64>, o_mp: [f64; 2], s_prop: [f64; 4]) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend_from_slice(o_pn);
        obs.extend(phi.iter());
        if self.use_affordance {
            obs.extend_from_slice(&o_mp);
        }
        obs.extend_from_slice(&s_prop);
        obs
    }

    /// Deploy action: σ = 0 and no improvement.
    pub fn act_deploy<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Vec<f64>, TrainError> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(sample_actions(&o.view(), &self.schedule, &self.estimator, true, &self.bounds, rng)?.row(0).to_vec())
    }

    /// Exploration action: σ = 1 sample followed by one improvement step.
    pub fn act_explore<R: Rng + ?Sized>(&self, obs: &[f64], beta: f64, rng: &mut R) -> Result<Vec<f64>, TrainError> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| TrainError::Config(e.to_string()))?;
        let a = sample_actions(&o.view(), &self.schedule, &self.estimator, false, &self.bounds, rng)?;
        if beta == 0.0 {
            return Ok(a.row(0).to_vec());
        }
        Ok(self.critic.improve_actions(&o.view(), &a.view(), beta, &self.bounds)?.row(0).to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        write_checkpoint(&dir.join("seg.ckpt"), &self.segnet.to_checkpoint()?)?;
        write_checkpoint(&dir.join("policy.ckpt"), &self.estimator.to_checkpoint()?)?;
        write_checkpoint(&dir.join("critic.ckpt"), &self.critic.to_checkpoint()?)?;
        write_checkpoint(&dir.join("cp.ckpt"), &self.planner.to_checkpoint()?)?;
        write_checkpoint(&dir.join("encoder.ckpt"), &self.encoder.to_checkpoint()?)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        Ok(())
    }

    /// Rebuilds the agent of a run directory; the layout flags come from
    /// its manifest.
    pub fn load(dir: &Path) -> Result<(Self, Manifest), TrainError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let cfg = &manifest.config;
        let segnet = SegNet::from_checkpoint(&read_checkpoint(&dir.join("seg.ckpt"))?)?;
        let estimator = NoiseEstimator::from_checkpoint(&read_checkpoint(&dir.join("policy.ckpt"))?)?;
        let critic = Critic::from_checkpoint(&read_checkpoint(&dir.join("critic.ckpt"))?)?;
        let planner = CpNet::from_checkpoint(&read_checkpoint(&dir.join("cp.ckpt"))?)?;
        let encoder = TaskEncoder::from_checkpoint(&read_checkpoint(&dir.join("encoder.ckpt"))?)?;
        let vocab = TokenVocab::load(&dir.join("vocab.json"))?;
        if estimator.spec.obs_dim != cfg.obs_dim(segnet.feature_dim()) || critic.obs_dim != estimator.spec.obs_dim {
            return Err(TrainError::Config("checkpoint observation sizes do not match the manifest".into()));
        }
        if vocab.len() != encoder.vocab_size() {
            return Err(TrainError::Config("vocabulary does not match encoder".into()));
        }
        let agent = Self {
            segnet,
            encoder,
            vocab,
            estimator,
            critic,
            planner,
            schedule: make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)?,
            bounds: ActionBox::symmetric(ACTION_DIM, 1.0),
            scene: cfg.scene,
            use_ltl: cfg.use_ltl,
            use_affordance: cfg.use_affordance,
            phi_cache: HashMap::new(),
        };
        Ok((agent, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub segnet_checksum: String,
    pub obs_dim: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    /// Mean episode length over successful episodes; the horizon when none
    /// succeeded.
    pub avg_success_steps: f64,
    pub episodes: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ENV: u64 = 1;
const STREAM_SCENE: u64 = 2;
const STREAM_POLICY: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_EVAL: u64 = 6;

/// Runs `episodes` episodes cycling over `objects`, with `policy` choosing
/// actions. Episode `i` draws its start state from its own seeded stream.
pub fn evaluate_with<F>(
    objects: &[ArticulatedObject],
    episodes: usize,
    env_cfg: &EnvConfig,
    formula: &Formula,
    seed: u64,
    mut policy: F,
) -> Result<EvalResult, TrainError>
where
    F: FnMut(&ToyEnv, &Formula, &mut ChaCha8Rng) -> Result<Vec<f64>, TrainError>,
{
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    if objects.is_empty() {
        return Err(TrainError::Config("evaluation split is empty".into()));
    }
    let mut wins = 0usize;
    let mut steps = 0usize;
    let cfg = RewardConfig::default();
    for i in 0..episodes {
        let mut rng = stream_rng(seed.wrapping_add(i as u64), STREAM_EVAL);
        let mut env = ToyEnv::new(objects[i % objects.len()].clone(), *env_cfg, &mut rng)?;
        let mut state = TlState::new(env.state, formula.clone());
        while !tl_mdp::is_terminal(&state, &env) {
            let a = policy(&env, &state.formula, &mut rng)?;
            state = tl_mdp::step(&state, &a, &mut env, &cfg)?.state;
        }
        if env.success() {
            wins += 1;
            steps += env.state.t;
        }
    }
    Ok(EvalResult {
        success_rate: wins as f64 / episodes as f64,
        avg_success_steps: if wins == 0 { env_cfg.horizon as f64 } else { steps as f64 / wins as f64 },
        episodes,
    })
}

/// Deploy-mode evaluation of `agent`.
pub fn evaluate(
    agent: &mut Agent,
    objects: &[ArticulatedObject],
    episodes: usize,
    env_cfg: &EnvConfig,
    formula: &Formula,
    seed: u64,
) -> Result<EvalResult, TrainError> {
    let mut o_mp = [0.0; 2];
    evaluate_with(objects, episodes, env_cfg, formula, seed, |env, phi, rng| {
        if env.state.t == 0 {
            o_mp = if agent.use_affordance {
                let cloud = agent.object_cloud(env, rng)?;
                agent.planner.mpo(&cloud.view())?
            } else {
                [0.0; 2]
            };
        }
        let o_pn = agent.perceive(env, rng)?;
        let obs = agent.observation(&o_pn, phi, o_mp, env.state.proprioception())?;
        agent.act_deploy(&obs, rng)
    })
}

/// Result of [`run_training`].
pub struct RunOutput {
    pub history: Vec<MetricsRow>,
    pub agent: Agent,
    pub contacts: Vec<ContactRecord>,
    pub split: ObjectSplit,
    pub manifest: Manifest,
}

#[derive(Default)]
struct Accumulator {
    est_loss: f64,
    critic_loss: f64,
    ticks: usize,
    cp_loss: f64,
    cp_updates: usize,
    reach: f64,
    articulation: f64,
    mpr: f64,
    task: f64,
    episodes: usize,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    agent: Agent,
    split: ObjectSplit,
    formula: Formula,
    formulas: Vec<Formula>,
    formula_ids: HashMap<Formula, usize>,
    tokens: Vec<Vec<usize>>,
    buffer: ReplayBuffer<Transition>,
    adam_est: AdamState,
    adam_critic: AdamState,
    adam_enc: AdamState,
    adam_cp: AdamState,
    env_rng: ChaCha8Rng,
    scene_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    contact_log: ContactLog,
    recent: VecDeque<bool>,
    clouds: BTreeMap<usize, Array2<f64>>,
    acc: Accumulator,
    history: Vec<MetricsRow>,
    step: usize,
    episode: usize,
    verbose: bool,
}

impl<'a> Trainer<'a> {
    fn formula_id(&mut self, phi: &Formula) -> Result<usize, TrainError> {
        if let Some(&id) = self.formula_ids.get(phi) {
            return Ok(id);
        }
        let id = self.formulas.len();
        self.tokens.push(self.agent.tokens(phi)?);
        self.formulas.push(phi.clone());
        self.formula_ids.insert(phi.clone(), id);
        Ok(id)
    }

    fn beta(&self) -> f64 {
        let frac = if self.cfg.total_steps == 0 { 0.0 } else { self.step as f64 / self.cfg.total_steps as f64 };
        self.cfg.beta + (self.cfg.beta_final - self.cfg.beta) * frac.min(1.0)
    }

    fn run(&mut self) -> Result<(), TrainError> {
        while self.step < self.cfg.total_steps {
            self.run_episode()?;
        }
        let evaluated = self.history.last().is_some_and(|r| r.step == self.step);
        if self.step > 0 && !evaluated {
            self.evaluate_all()?;
        }
        Ok(())
    }

    fn run_episode(&mut self) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let object = self.split.seen[self.env_rng.random_range(0..self.split.seen.len())].clone();
        let mut env = ToyEnv::new(object.clone(), cfg.env, &mut self.env_rng)?;
        let mut o_mp = [0.0; 2];
        if cfg.use_affordance {
            let cloud = self.agent.object_cloud(&env, &mut self.scene_rng)?;
            o_mp = self.agent.planner.mpo(&cloud.view())?;
            env.o_mp = Some(o_mp);
            self.clouds.insert(object.id, cloud);
        }
        let reward_cfg = RewardConfig { r_phi: cfg.r_phi };
        let mut state = TlState::new(env.state, self.formula.clone());
        let mut o_pn = self.agent.perceive(&env, &mut self.scene_rng)?;
        let mut fid = self.formula_id(&self.formula.clone())?;
        let mut totals = [0.0; 4];
        loop {
            let s_prop = env.state.proprioception();
            let obs = self.agent.observation(&o_pn, &state.formula, o_mp, s_prop)?;
            let action = if self.step < cfg.warmup_steps {
                self.agent.act_explore(&obs, 0.0, &mut self.policy_rng)?
            } else {
                self.agent.act_explore(&obs, self.beta(), &mut self.policy_rng)?
            };
            let out = tl_mdp::step(&state, &action, &mut env, &reward_cfg)?;
            let reward = if cfg.use_ltl { out.reward } else { out.r_env };
            let comps = env.last_reward();
            totals[0] += comps.reach;
            totals[1] += comps.articulation;
            totals[2] += comps.mpr;
            totals[3] += reward - out.r_env;
            let next_o_pn = self.agent.perceive(&env, &mut self.scene_rng)?;
            let next_fid = self.formula_id(&out.state.formula)?;
            self.buffer.push(Transition {
                o_pn: std::mem::take(&mut o_pn),
                next_o_pn: next_o_pn.clone(),
                o_mp,
                s_prop,
                next_s_prop: env.state.proprioception(),
                formula: fid,
                next_formula: next_fid,
                improved: action.clone(),
                action,
                reward,
                done: out.state.formula.is_decided(),
            });
            self.step += 1;
            if self.step >= cfg.warmup_steps && self.step.is_multiple_of(cfg.train_every) {
                if let Err(e) = self.train_tick() {
                    return Err(self.diverged(e));
                }
            }
            if self.step.is_multiple_of(cfg.eval_every) {
                self.evaluate_all()?;
            }
            o_pn = next_o_pn;
            fid = next_fid;
            state = out.state;
            if out.done || self.step >= cfg.total_steps {
                break;
            }
        }
        self.acc.reach += totals[0];
        self.acc.articulation += totals[1];
        self.acc.mpr += totals[2];
        self.acc.task += totals[3];
        self.acc.episodes += 1;
        self.end_episode(&env, &object)
    }

    fn end_episode(&mut self, env: &ToyEnv, object: &ArticulatedObject) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let success = env.success();
        self.contact_log.push(EpisodeContacts {
            object_id: object.id,
            episode: self.episode,
            success,
            first_grasp: env.first_grasp(),
            terminal: env.state.effector,
        });
        self.episode += 1;
        self.recent.push_back(success);
        while self.recent.len() > cfg.cp_window {
            self.recent.pop_front();
        }
        let rate = self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64;
        if cfg.use_affordance && rate > cfg.tau_cp {
            let mut samples: Vec<PlannerSample> = self
                .contact_log
                .records()
                .into_iter()
                .filter(|r| r.sr > 0.0)
                .filter_map(|r| {
                    let cloud = self.clouds.get(&r.object_id)?.clone();
                    Some(PlannerSample {
                        object_id: r.object_id,
                        cloud,
                        target: r.target()?,
                        sr: r.sr,
                    })
                })
                .collect();
            if samples.len() > cfg.cp_batch {
                let mut keep = rand::seq::index::sample(&mut self.train_rng, samples.len(), cfg.cp_batch).into_vec();
                keep.sort_unstable();
                samples = keep.into_iter().map(|i| samples[i].clone()).collect();
            }
            let losses = update_planner(&mut self.agent.planner, &samples, &mut self.adam_cp, cfg.cp_steps)
                .map_err(|e| self.diverged(e.into()))?;
            if let Some(&l) = losses.last() {
                self.acc.cp_loss += l;
                self.acc.cp_updates += 1;
            }
        }
        Ok(())
    }

    fn train_tick(&mut self) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let idx = self.buffer.sample_indices(cfg.batch_size, &mut self.train_rng);
        let n = idx.len();
        let obs_dim = self.agent.obs_dim();
        let phi_range = self.agent.phi_range();
        let current: BTreeSet<usize> = idx.iter().map(|&i| self.buffer.get(i).formula).collect();
        let next: BTreeSet<usize> = idx.iter().map(|&i| self.buffer.get(i).next_formula).collect();
        let mut phis: HashMap<usize, Array1<f64>> = HashMap::new();
        let mut traces: HashMap<usize, EncoderTrace> = HashMap::new();
        for &id in current.union(&next) {
            if cfg.use_ltl && current.contains(&id) {
                let (phi, trace) = self.agent.encoder.encode_traced(&self.tokens[id])?;
                phis.insert(id, phi);
                traces.insert(id, trace);
            } else {
                let phi = self.agent.embed(&self.formulas[id].clone())?;
                phis.insert(id, phi);
            }
        }
        let mut obs = Array2::zeros((n, obs_dim));
        let mut next_obs = Array2::zeros((n, obs_dim));
        let mut actions = Array2::zeros((n, ACTION_DIM));
        let mut improved = Array2::zeros((n, ACTION_DIM));
        let mut rewards = Array1::zeros(n);
        let mut dones = Array1::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i);
            let o = self.agent.assemble(&t.o_pn, &phis[&t.formula].view(), t.o_mp, t.s_prop);
            let no = self.agent.assemble(&t.next_o_pn, &phis[&t.next_formula].view(), t.o_mp, t.next_s_prop);
            obs.row_mut(r).assign(&ArrayView1::from(&o));
            next_obs.row_mut(r).assign(&ArrayView1::from(&no));
            actions.row_mut(r).assign(&ArrayView1::from(&t.action));
            improved.row_mut(r).assign(&ArrayView1::from(&t.improved));
            rewards[r] = t.reward;
            dones[r] = if t.done { 1.0 } else { 0.0 };
        }

        let improved = self.agent.critic.improve_actions(&obs.view(), &improved.view(), self.beta(), &self.agent.bounds)?;
        for (r, &i) in idx.iter().enumerate() {
            self.buffer.get_mut(i).improved = improved.row(r).to_vec();
        }

        let est_loss = estimator_update(
            &mut self.agent.estimator,
            &self.agent.schedule,
            &obs.view(),
            &improved.view(),
            &mut self.adam_est,
            &mut self.train_rng,
        )?;

        let agent = &mut self.agent;
        let y = critic_targets(
            &agent.critic,
            &agent.estimator,
            &agent.schedule,
            &agent.bounds,
            &rewards.view(),
            &dones.view(),
            &next_obs.view(),
            cfg.gamma,
            &mut self.train_rng,
        )?;
        let g = agent.critic.regression(&obs.view(), &actions.view(), &y.view())?;
        let mut p = agent.critic.online.params();
        self.adam_critic.step(&mut p, &g.params)?;
        agent.critic.online.set_params(&p)?;
        agent.critic.polyak(cfg.rho)?;

        if cfg.use_ltl {
            let mut grads = vec![0.0; agent.encoder.num_params()];
            for (&id, trace) in &traces {
                let mut dphi = Array1::zeros(phi_range.len());
                for (r, &i) in idx.iter().enumerate() {
                    if self.buffer.get(i).formula == id {
                        dphi += &g.obs.slice(s![r, phi_range.clone()]);
                    }
                }
                agent.encoder.backward_into(trace, &dphi.view(), &mut grads)?;
            }
            let mut p = agent.encoder.params();
            self.adam_enc.step(&mut p, &grads)?;
            agent.encoder.set_params(&p)?;
            agent.invalidate_embeddings();
        }
        self.acc.est_loss += est_loss;
        self.acc.critic_loss += g.loss;
        self.acc.ticks += 1;
        Ok(())
    }

    fn diverged(&self, e: TrainError) -> TrainError {
        TrainError::Diverged {
            step: self.step,
            message: e.to_string(),
        }
    }

    fn evaluate_all(&mut self) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let acc = std::mem::take(&mut self.acc);
        let per_tick = |v: f64| if acc.ticks == 0 { 0.0 } else { v / acc.ticks as f64 };
        let per_ep = |v: f64| if acc.episodes == 0 { 0.0 } else { v / acc.episodes as f64 };
        let cp_loss = if acc.cp_updates == 0 { 0.0 } else { acc.cp_loss / acc.cp_updates as f64 };
        for name in [SplitName::Seen, SplitName::Unseen, SplitName::Transfer] {
            let objects = self.split.get(name).to_vec();
            let res = evaluate(&mut self.agent, &objects, cfg.eval_episodes, &cfg.env, &self.formula, cfg.seed ^ 0x5EED)?;
            let row = MetricsRow {
                step: self.step,
                split: name.as_str().to_string(),
                success_rate: res.success_rate,
                avg_success_steps: res.avg_success_steps,
                estimator_loss: per_tick(acc.est_loss),
                critic_loss: per_tick(acc.critic_loss),
                cp_loss,
                reward_reach: per_ep(acc.reach),
                reward_articulation: per_ep(acc.articulation),
                reward_mpr: per_ep(acc.mpr),
                reward_task: per_ep(acc.task),
                episodes: acc.episodes,
            };
            if self.verbose {
                eprintln!(
                    "step {:>7} {:<8} success {:.3} steps {:>6.1} est {:.4} critic {:.4} cp {:.4} reward reach {:.3} art {:.3} mpr {:.3} task {:.3} episodes {}",
                    row.step,
                    row.split,
                    row.success_rate,
                    row.avg_success_steps,
                    row.estimator_loss,
                    row.critic_loss,
                    row.cp_loss,
                    row.reward_reach,
                    row.reward_articulation,
                    row.reward_mpr,
                    row.reward_task,
                    row.episodes
                );
            }
            self.history.push(row);
        }
        Ok(())
    }
}

/// Pretrains the segmentation network on freshly generated scenes.
pub fn pretrain(cfg: &PretrainConfig) -> Result<(SegNet, crate::perception::PretrainReport), TrainError> {
    let train = generate_dataset(cfg.train_scenes, &cfg.scene, cfg.seed);
    let test = generate_dataset(cfg.test_scenes, &cfg.scene, cfg.seed.wrapping_add(0x7E57));
    Ok(pretrain_segmentation(&train, &test, cfg)?)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Trains one agent. `segnet` is used frozen. With an output directory the
/// run's checkpoints, metrics, contacts and manifest are written there.
pub fn run_training(cfg: &TrainConfig, segnet: SegNet, opts: &RunOptions) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let split = make_splits(cfg.splits.n_seen, cfg.splits.n_unseen, cfg.splits.seed)?;
    let checksum_before = segnet.checksum();
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let agent = Agent::new(cfg, segnet, &mut init_rng)?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        seed: cfg.seed,
        segnet_checksum: format!("{checksum_before:016x}"),
        obs_dim: agent.obs_dim(),
        config: cfg.clone(),
    };
    let mut t = Trainer {
        cfg,
        adam_est: AdamState::new(agent.estimator.net.num_params(), cfg.lr_estimator),
        adam_critic: AdamState::new(agent.critic.online.num_params(), cfg.lr_critic),
        adam_enc: AdamState::new(agent.encoder.num_params(), cfg.lr_encoder),
        adam_cp: AdamState::new(agent.planner.num_params(), cfg.lr_planner),
        agent,
        split,
        formula: cfg.formula()?,
        formulas: Vec::new(),
        formula_ids: HashMap::new(),
        tokens: Vec::new(),
        buffer: ReplayBuffer::new(cfg.buffer_capacity),
        env_rng: stream_rng(cfg.seed, STREAM_ENV),
        scene_rng: stream_rng(cfg.seed, STREAM_SCENE),
        policy_rng: stream_rng(cfg.seed, STREAM_POLICY),
        train_rng: stream_rng(cfg.seed, STREAM_TRAIN),
        contact_log: ContactLog::new(cfg.cp_window),
        recent: VecDeque::new(),
        clouds: BTreeMap::new(),
        acc: Accumulator::default(),
        history: Vec::new(),
        step: 0,
        episode: 0,
        verbose: opts.verbose,
    };
    let result = t.run();
    if let (Err(e), Some(dir)) = (&result, &opts.out_dir) {
        fs::create_dir_all(dir)?;
        let dump = serde_json::json!({
            "error": e.to_string(),
            "step": t.step,
            "episode": t.episode,
            "history": t.history,
        });
        fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&dump)? + "\n")?;
    }
    result?;
    if t.agent.segnet.checksum() != checksum_before {
        return Err(TrainError::Config("segmentation weights changed during training".into()));
    }
    let contacts = t.contact_log.records();
    let out = RunOutput {
        history: t.history,
        agent: t.agent,
        contacts,
        split: t.split,
        manifest,
    };
    if let Some(dir) = &opts.out_dir {
        write_run(dir, &out)?;
    }
    Ok(out)
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    out.agent.save(dir)?;
    out.split.save(&dir.join("splits.json"))?;
    write_contacts_csv(&dir.join("contacts.csv"), &out.contacts)?;
    if !out.history.is_empty() {
        export_metrics(&out.history, dir)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&out.manifest)? + "\n")?;
    Ok(())
}

/// Loads a run directory and evaluates it on one split.
pub fn evaluate_run(dir: &Path, split: SplitName, episodes: usize, seed: u64) -> Result<EvalResult, TrainError> {
    let (mut agent, manifest) = Agent::load(dir)?;
    let splits = ObjectSplit::load(&dir.join("splits.json"))?;
    let cfg = &manifest.config;
    evaluate(&mut agent, splits.get(split), episodes, &cfg.env, &cfg.formula()?, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dart,
    WithoutAffordance,
    WithoutLtl,
    WithoutBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dart, Variant::WithoutAffordance, Variant::WithoutLtl, Variant::WithoutBoth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dart => "dart",
            Variant::WithoutAffordance => "wo_aff",
            Variant::WithoutLtl => "wo_ltl",
            Variant::WithoutBoth => "wo_aff_ltl",
        }
    }

    /// The base config with only the ablation flags changed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.use_affordance = matches!(self, Variant::Dart | Variant::WithoutLtl);
        cfg.use_ltl = matches!(self, Variant::Dart | Variant::WithoutAffordance);
        cfg
    }
}

/// Top-level fields whose values differ between two configs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>, TrainError> {
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Err(TrainError::Config("config did not serialize to an object".into()));
    };
    Ok(ma.keys().filter(|k| ma.get(*k) != mb.get(*k)).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub success_rate: f64,
    pub avg_success_steps: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,split,success_rate,avg_success_steps\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.seed, r.split, r.success_rate, r.avg_success_steps));
    }
    out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median final success per variant for one split.
pub fn ablation_medians(rows: &[AblationRow], split: &str) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == split) {
        by.entry(r.variant.clone()).or_default().push(r.success_rate);
    }
    by.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}

/// Trains every variant on every seed with the same frozen segmentation
/// network and reports final success per split.
pub fn run_ablation(
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
    segnet: &SegNet,
    opts: &RunOptions,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    let mut manifest = serde_json::Map::new();
    for &variant in variants {
        let vcfg = variant.apply(base);
        manifest.insert(variant.name().into(), serde_json::to_value(config_diff(base, &vcfg)?)?);
        for &seed in seeds {
            let mut cfg = vcfg.clone();
            cfg.seed = seed;
            let run_opts = RunOptions {
                out_dir: opts.out_dir.as_ref().map(|d| d.join(variant.name()).join(format!("seed{seed}"))),
                verbose: opts.verbose,
            };
            if opts.verbose {
                eprintln!("== {} seed {seed}", variant.name());
            }
            let out = run_training(&cfg, segnet.clone(), &run_opts)?;
            let last = out.history.iter().map(|r| r.step).max();
            for r in out.history.iter().filter(|r| Some(r.step) == last) {
                rows.push(AblationRow {
                    variant: variant.name().into(),
                    seed,
                    split: r.split.clone(),
                    success_rate: r.success_rate,
                    avg_success_steps: r.avg_success_steps,
                });
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
        let m = serde_json::json!({
            "version": VERSION,
            "seeds": seeds,
            "base_config": base,
            "changed_fields": manifest,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    }
    Ok(rows)
}
