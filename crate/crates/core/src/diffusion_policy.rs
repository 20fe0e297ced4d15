//! Diffusion policy: noise schedule, reverse denoising sampler, noise
//! estimator regression, critic-gradient action improvement, and the
//! bootstrapped critic with a Polyak-averaged target.
//!
//! Noise levels are indexed `k = 1..=K`. The sampler starts from
//! `â_0 ~ N(0, I)` and its `j`-th iteration denoises at level `k = K - j`:
//!
//! ```text
//! â_{j+1} = (â_j − (1−α_k)/√(1−ᾱ_k) · ε(â_j, ǒ, k)) / √α_k + σ·√((1−α_k)/α_k)·z
//! ```
//!
//! with `σ = 0` when deploying and `σ = 1` while exploring. The estimator is
//! trained on `√ᾱ_k a + √(1−ᾱ_k) z`, the corruption whose reverse process
//! the coefficients above describe.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, AdamState, Checkpoint, DenseNet, NnError};
use crate::task_encoder::positional_embedding;

/// Floor on `1 − ᾱ_k` in the sampler's noise coefficient.
pub const ONE_MINUS_ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite critic action gradient")]
    NonFiniteGradient,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self, PolicyError> {
        if alpha.is_empty() {
            return Err(PolicyError::Schedule("at least one step required".into()));
        }
        if alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(PolicyError::Schedule("alphas must lie in (0, 1]".into()));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `α_k` for `k` in `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// `ᾱ_k` for `k` in `1..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `α_k = 1 − β_k` with `β_k` linear from `beta_min` to `beta_max`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, PolicyError> {
    if steps == 0 {
        return Err(PolicyError::Schedule("K must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(PolicyError::Schedule("need 0 < beta_min <= beta_max < 1".into()));
    }
    let alphas = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            1.0 - (beta_min + frac * (beta_max - beta_min))
        })
        .collect();
    NoiseSchedule::from_alphas(alphas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self {
            low: vec![-bound; dim],
            high: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn clamp_row(&self, mut row: ndarray::ArrayViewMut1<f64>) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = v.clamp(self.low[j], self.high[j]);
        }
    }

    pub fn clamp(&self, a: &mut Array2<f64>) {
        for row in a.rows_mut() {
            self.clamp_row(row);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
}

/// Dense network `(â, ǒ, emb(k)) → ε̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimator {
    pub spec: EstimatorSpec,
    pub net: DenseNet,
    time_table: Array2<f64>,
}

impl NoiseEstimator {
    pub fn new<R: Rng + ?Sized>(spec: EstimatorSpec, rng: &mut R) -> Result<Self, PolicyError> {
        let mut widths = vec![spec.action_dim + spec.obs_dim + spec.time_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.action_dim);
        let net = DenseNet::mlp(&widths, Activation::Relu, rng)?;
        let time_table = positional_embedding(spec.steps + 1, spec.time_dim);
        Ok(Self { spec, net, time_table })
    }

    pub fn input(&self, actions: &ArrayView2<f64>, obs: &ArrayView2<f64>, ks: &[usize]) -> Result<Array2<f64>, PolicyError> {
        let (a, o, t) = (self.spec.action_dim, self.spec.obs_dim, self.spec.time_dim);
        let n = actions.nrows();
        if actions.ncols() != a || obs.ncols() != o || obs.nrows() != n || ks.len() != n {
            return Err(PolicyError::Shape(format!(
                "estimator input: actions {:?}, obs {:?}, {} levels",
                actions.dim(),
                obs.dim(),
                ks.len()
            )));
        }
        let mut x = Array2::zeros((n, a + o + t));
        x.slice_mut(s![.., ..a]).assign(actions);
        x.slice_mut(s![.., a..a + o]).assign(obs);
        for (i, &k) in ks.iter().enumerate() {
            x.slice_mut(s![i, a + o..]).assign(&self.time_table.row(k));
        }
        Ok(x)
    }

    pub fn predict(&self, actions: &ArrayView2<f64>, obs: &ArrayView2<f64>, ks: &[usize]) -> Result<Array2<f64>, PolicyError> {
        Ok(self.net.forward(&self.input(actions, obs, ks)?.view())?)
    }

    /// Observation part of the first layer's product, `obs · W_obs`. The
    /// observation is fixed across sampler iterations, so it is computed once.
    fn obs_cache(&self, obs: &ArrayView2<f64>) -> Result<Array2<f64>, PolicyError> {
        let (a, o) = (self.spec.action_dim, self.spec.obs_dim);
        if obs.ncols() != o {
            return Err(PolicyError::Shape(format!("estimator obs has {} columns, expected {o}", obs.ncols())));
        }
        Ok(obs.dot(&self.net.layers()[0].weight.slice(s![a..a + o, ..])))
    }

    /// Same as [`predict`](Self::predict) at a single level `k`, given
    /// [`obs_cache`](Self::obs_cache).
    fn predict_cached(&self, actions: &ArrayView2<f64>, cache: &Array2<f64>, k: usize) -> Result<Array2<f64>, PolicyError> {
        let (a, o) = (self.spec.action_dim, self.spec.obs_dim);
        let first = &self.net.layers()[0];
        let mut z = actions.dot(&first.weight.slice(s![..a, ..]));
        z += cache;
        let time = self.time_table.row(k).dot(&first.weight.slice(s![a + o.., ..])) + &first.bias;
        z += &time;
        Ok(self.net.forward_from_first(z)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, NnError> {
        let meta = serde_json::to_string(&self.spec).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Checkpoint::new("noise_estimator", meta, self.net.tensor_specs("estimator"), self.net.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        ckpt.expect_kind("noise_estimator")?;
        let spec: EstimatorSpec = serde_json::from_str(&ckpt.meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut est = Self::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        est.net.set_params(&ckpt.params)?;
        Ok(est)
    }
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Denoises `a0` (one row per sample). With `trace`, every intermediate
/// `â_j` is appended (the last one after clamping).
pub fn sample_from<R: Rng + ?Sized>(
    a0: Array2<f64>,
    obs: &ArrayView2<f64>,
    schedule: &NoiseSchedule,
    est: &NoiseEstimator,
    deploy: bool,
    bounds: &ActionBox,
    rng: &mut R,
    mut trace: Option<&mut Vec<Array2<f64>>>,
) -> Result<Array2<f64>, PolicyError> {
    let n = a0.nrows();
    let mut a = a0;
    if let Some(t) = trace.as_deref_mut() {
        t.push(a.clone());
    }
    let big_k = schedule.steps();
    let cache = est.obs_cache(obs)?;
    if a.dim() != (n, est.spec.action_dim) || cache.nrows() != n {
        return Err(PolicyError::Shape(format!("sampler: actions {:?}, obs {:?}", a.dim(), obs.dim())));
    }
    for j in 0..big_k {
        let k = big_k - j;
        let alpha = schedule.alpha(k);
        let one_minus_bar = (1.0 - schedule.alpha_bar(k)).max(ONE_MINUS_ALPHA_BAR_FLOOR);
        let eps = est.predict_cached(&a.view(), &cache, k)?;
        let coef = (1.0 - alpha) / one_minus_bar.sqrt();
        a.scaled_add(-coef, &eps);
        a /= alpha.sqrt();
        if !deploy {
            let z = normal_matrix(n, a.ncols(), rng);
            a.scaled_add(((1.0 - alpha) / alpha).sqrt(), &z);
        }
        if j + 1 == big_k {
            bounds.clamp(&mut a);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(a.clone());
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("sampled action").into());
    }
    Ok(a)
}

/// Draws `â_0 ~ N(0, I)` per row of `obs` and denoises it.
pub fn sample_actions<R: Rng + ?Sized>(
    obs: &ArrayView2<f64>,
    schedule: &NoiseSchedule,
    est: &NoiseEstimator,
    deploy: bool,
    bounds: &ActionBox,
    rng: &mut R,
) -> Result<Array2<f64>, PolicyError> {
    let a0 = normal_matrix(obs.nrows(), est.spec.action_dim, rng);
    sample_from(a0, obs, schedule, est, deploy, bounds, rng, None)
}

pub fn sample_action<R: Rng + ?Sized>(
    obs: &[f64],
    schedule: &NoiseSchedule,
    est: &NoiseEstimator,
    deploy: bool,
    bounds: &ActionBox,
    rng: &mut R,
) -> Result<Vec<f64>, PolicyError> {
    let o = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| PolicyError::Shape(e.to_string()))?;
    Ok(sample_actions(&o, schedule, est, deploy, bounds, rng)?.row(0).to_vec())
}

/// Sampler trace `â_0 … â_K` as CSV, one row per iteration.
pub fn write_trace_csv(path: &Path, trace: &[Array2<f64>], row: usize) -> Result<(), PolicyError> {
    let dim = trace.first().map_or(0, |t| t.ncols());
    let mut out = String::from("iteration");
    for d in 0..dim {
        out.push_str(&format!(",a{d}"));
    }
    out.push('\n');
    for (j, a) in trace.iter().enumerate() {
        out.push_str(&j.to_string());
        for v in a.row(row) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Regression loss on given levels and noise: mean over the batch of
/// `|z − ε(√ᾱ_k a + √(1−ᾱ_k) z, ǒ, k)|²`, with its parameter gradient.
pub fn estimator_loss_with(
    est: &NoiseEstimator,
    schedule: &NoiseSchedule,
    obs: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    ks: &[usize],
    z: &ArrayView2<f64>,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let n = actions.nrows();
    if n == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    if z.dim() != actions.dim() {
        return Err(PolicyError::Shape("noise and action shapes differ".into()));
    }
    let mut noisy = actions.to_owned();
    for (i, mut row) in noisy.rows_mut().into_iter().enumerate() {
        let ab = schedule.alpha_bar(ks[i]);
        row *= ab.sqrt();
        row.scaled_add((1.0 - ab).sqrt(), &z.row(i));
    }
    let x = est.input(&noisy.view(), obs, ks)?;
    let (pred, trace) = est.net.forward_traced(&x.view())?;
    let diff = &pred - z;
    let loss = diff.mapv(|v| v * v).sum() / n as f64;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("estimator loss").into());
    }
    let upstream = diff * (2.0 / n as f64);
    let grads = est.net.backward(&trace, &upstream.view())?;
    Ok((loss, grads.params))
}

/// Samples `k ~ U{1..K}` and `z ~ N(0, I)` per row, then evaluates
/// [`estimator_loss_with`].
pub fn estimator_loss<R: Rng + ?Sized>(
    est: &NoiseEstimator,
    schedule: &NoiseSchedule,
    obs: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let n = actions.nrows();
    let ks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let z = normal_matrix(n, actions.ncols(), rng);
    estimator_loss_with(est, schedule, obs, actions, &ks, &z.view())
}

/// Anything that can report `Q(ǒ, a)` and `∇_a Q(ǒ, a)`.
pub trait ActionValue {
    fn value(&self, obs: &[f64], action: &[f64]) -> Result<f64, PolicyError>;
    fn action_gradient(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, PolicyError>;
}

/// One ascent step `a + β ∇_a Q`, clamped to the action box.
pub fn improve_action<Q: ActionValue + ?Sized>(
    action: &[f64],
    obs: &[f64],
    critic: &Q,
    beta: f64,
    bounds: &ActionBox,
) -> Result<Vec<f64>, PolicyError> {
    let g = critic.action_gradient(obs, action)?;
    if g.len() != action.len() || g.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFiniteGradient);
    }
    Ok(action
        .iter()
        .zip(&g)
        .enumerate()
        .map(|(j, (a, d))| (a + beta * d).clamp(bounds.low[j], bounds.high[j]))
        .collect())
}

/// Q network over `[ǒ, a]` with a Polyak-averaged target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub online: DenseNet,
    pub target: DenseNet,
}

/// Gradients of a critic regression step.
pub struct CriticGrad {
    pub loss: f64,
    pub params: Vec<f64>,
    /// `∂loss/∂ǒ`, one row per sample.
    pub obs: Array2<f64>,
}

fn concat_cols(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut x = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    x.slice_mut(s![.., ..a.ncols()]).assign(a);
    x.slice_mut(s![.., a.ncols()..]).assign(b);
    x
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self, PolicyError> {
        let mut widths = vec![obs_dim + action_dim];
        widths.extend(hidden);
        widths.push(1);
        let online = DenseNet::mlp(&widths, Activation::Relu, rng)?;
        let target = online.clone();
        Ok(Self {
            obs_dim,
            action_dim,
            online,
            target,
        })
    }

    fn input(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<Array2<f64>, PolicyError> {
        if obs.ncols() != self.obs_dim || actions.ncols() != self.action_dim || obs.nrows() != actions.nrows() {
            return Err(PolicyError::Shape(format!("critic input: obs {:?}, actions {:?}", obs.dim(), actions.dim())));
        }
        Ok(concat_cols(obs, actions))
    }

    pub fn q(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<Array1<f64>, PolicyError> {
        Ok(self.online.forward(&self.input(obs, actions)?.view())?.column(0).to_owned())
    }

    pub fn q_target(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<Array1<f64>, PolicyError> {
        Ok(self.target.forward(&self.input(obs, actions)?.view())?.column(0).to_owned())
    }

    /// `∇_a Q` per row.
    pub fn action_gradients(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<Array2<f64>, PolicyError> {
        let x = self.input(obs, actions)?;
        let (_, trace) = self.online.forward_traced(&x.view())?;
        let ones = Array2::ones((x.nrows(), 1));
        let g = self.online.input_gradient(&trace, &ones.view())?;
        Ok(g.slice(s![.., self.obs_dim..]).to_owned())
    }

    /// Batched [`improve_action`].
    pub fn improve_actions(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>, beta: f64, bounds: &ActionBox) -> Result<Array2<f64>, PolicyError> {
        let g = self.action_gradients(obs, actions)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        let mut out = actions.to_owned();
        out.scaled_add(beta, &g);
        bounds.clamp(&mut out);
        Ok(out)
    }

    /// Mean squared error of `Q(ǒ, a)` against fixed `targets`.
    pub fn regression(&self, obs: &ArrayView2<f64>, actions: &ArrayView2<f64>, targets: &ArrayView1<f64>) -> Result<CriticGrad, PolicyError> {
        let n = obs.nrows();
        if n == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        let x = self.input(obs, actions)?;
        let (q, trace) = self.online.forward_traced(&x.view())?;
        let diff = &q.column(0) - targets;
        let loss = diff.mapv(|v| v * v).sum() / n as f64;
        if !loss.is_finite() {
            return Err(NnError::NonFinite("critic loss").into());
        }
        let upstream = (diff * (2.0 / n as f64)).insert_axis(Axis(1));
        let g = self.online.backward(&trace, &upstream.view())?;
        Ok(CriticGrad {
            loss,
            params: g.params,
            obs: g.input.slice(s![.., ..self.obs_dim]).to_owned(),
        })
    }

    /// `θ_target ← ρ θ_target + (1 − ρ) θ`.
    pub fn polyak(&mut self, rho: f64) -> Result<(), PolicyError> {
        let online = self.online.params();
        let mut target = self.target.params();
        for (t, o) in target.iter_mut().zip(&online) {
            *t = rho * *t + (1.0 - rho) * o;
        }
        self.target.set_params(&target)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, NnError> {
        let mut specs = self.online.tensor_specs("online");
        specs.extend(self.target.tensor_specs("target"));
        let mut params = self.online.params();
        self.target.write_params(&mut params);
        let hidden: Vec<usize> = self.online.widths()[1..self.online.widths().len() - 1].to_vec();
        let meta = serde_json::json!({"obs_dim": self.obs_dim, "action_dim": self.action_dim, "hidden": hidden});
        Checkpoint::new("critic", meta.to_string(), specs, params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        ckpt.expect_kind("critic")?;
        let meta: serde_json::Value = serde_json::from_str(&ckpt.meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let field = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| NnError::Checkpoint(format!("missing {k}")));
        let hidden: Vec<usize> = meta["hidden"]
            .as_array()
            .ok_or_else(|| NnError::Checkpoint("missing hidden".into()))?
            .iter()
            .filter_map(|v| v.as_u64().map(|x| x as usize))
            .collect();
        let mut c = Self::new(field("obs_dim")?, field("action_dim")?, &hidden, &mut ChaCha8Rng::seed_from_u64(0))?;
        let n = c.online.num_params();
        if ckpt.params.len() != 2 * n {
            return Err(NnError::Checkpoint("critic parameter count".into()).into());
        }
        c.online.set_params(&ckpt.params[..n])?;
        c.target.set_params(&ckpt.params[n..])?;
        Ok(c)
    }
}

impl ActionValue for Critic {
    fn value(&self, obs: &[f64], action: &[f64]) -> Result<f64, PolicyError> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| PolicyError::Shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| PolicyError::Shape(e.to_string()))?;
        Ok(self.q(&o, &a)?[0])
    }

    fn action_gradient(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| PolicyError::Shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| PolicyError::Shape(e.to_string()))?;
        Ok(self.action_gradients(&o, &a)?.row(0).to_vec())
    }
}

/// A batch of transitions for the critic.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
    pub next_obs: Array2<f64>,
}

/// `y = r + γ (1 − done) Q_target(ǒ′, â′)`, `â′` drawn in deploy mode.
#[allow(clippy::too_many_arguments)]
pub fn critic_targets<R: Rng + ?Sized>(
    critic: &Critic,
    est: &NoiseEstimator,
    schedule: &NoiseSchedule,
    bounds: &ActionBox,
    rewards: &ArrayView1<f64>,
    dones: &ArrayView1<f64>,
    next_obs: &ArrayView2<f64>,
    gamma: f64,
    rng: &mut R,
) -> Result<Array1<f64>, PolicyError> {
    let next_a = sample_actions(next_obs, schedule, est, true, bounds, rng)?;
    let q_next = critic.q_target(next_obs, &next_a.view())?;
    let mut y = rewards.to_owned();
    for i in 0..y.len() {
        if dones[i] < 0.5 {
            y[i] += gamma * q_next[i];
        }
    }
    Ok(y)
}

/// One critic step: targets, regression, Adam on the online network, then
/// the Polyak blend. Returns the loss and `∂loss/∂ǒ`.
#[allow(clippy::too_many_arguments)]
pub fn critic_update<R: Rng + ?Sized>(
    batch: &CriticBatch,
    critic: &mut Critic,
    est: &NoiseEstimator,
    schedule: &NoiseSchedule,
    bounds: &ActionBox,
    gamma: f64,
    rho: f64,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<(f64, Array2<f64>), PolicyError> {
    let y = critic_targets(
        critic,
        est,
        schedule,
        bounds,
        &batch.rewards.view(),
        &batch.dones.view(),
        &batch.next_obs.view(),
        gamma,
        rng,
    )?;
    let g = critic.regression(&batch.obs.view(), &batch.actions.view(), &y.view())?;
    let mut p = critic.online.params();
    adam.step(&mut p, &g.params)?;
    critic.online.set_params(&p)?;
    critic.polyak(rho)?;
    Ok((g.loss, g.obs))
}

/// Adam step on the estimator for one batch; returns the loss.
pub fn estimator_update<R: Rng + ?Sized>(
    est: &mut NoiseEstimator,
    schedule: &NoiseSchedule,
    obs: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<f64, PolicyError> {
    let (loss, grads) = estimator_loss(est, schedule, obs, actions, rng)?;
    let mut p = est.net.params();
    adam.step(&mut p, &grads)?;
    est.net.set_params(&p)?;
    Ok(loss)
}
