//! Affordance scoring over object points, max-affordance point selection,
//! the distance shaping reward, and success-weighted planner updates.
//!
//! The planner network embeds each point (centered on the cloud centroid)
//! with a shared stack, concatenates the point feature with the max over its
//! nearest neighbours and the max over the whole cloud, and maps that to a
//! sigmoid score. Training pulls the score-weighted mean of the current top-K
//! points toward recorded contact positions, weighted by success rate.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, AdamState, Checkpoint, DenseNet, NnError, Trace};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("empty object cloud")]
    EmptyCloud,
    #[error("top-K size {k} invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("score and point counts differ")]
    Mismatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `1 / max(|o_mp - s_eff|, eps)`.
pub fn mpr_reward(o_mp: [f64; 2], s_eff: [f64; 2], eps: f64) -> f64 {
    1.0 / (o_mp[0] - s_eff[0]).hypot(o_mp[1] - s_eff[1]).max(eps)
}

/// Indices of the `k` highest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>, PlannerError> {
    if k == 0 || k > scores.len() {
        return Err(PlannerError::InvalidK { k, n: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Mean position of the `k` highest-scoring points.
pub fn select_mpo(scores: &[f64], points: &ArrayView2<f64>, k: usize) -> Result<[f64; 2], PlannerError> {
    if scores.len() != points.nrows() {
        return Err(PlannerError::Mismatch);
    }
    let idx = top_k(scores, k)?;
    let mut m = [0.0; 2];
    for &i in &idx {
        m[0] += points[[i, 0]];
        m[1] += points[[i, 1]];
    }
    Ok([m[0] / k as f64, m[1] / k as f64])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub neighbors: usize,
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for CpConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_dim: 32,
            head_hidden: 32,
            neighbors: 8,
            top_k: 8,
            temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpNet {
    pub config: CpConfig,
    pub local: DenseNet,
    pub head: DenseNet,
}

/// Intermediates of [`CpNet::score_traced`].
pub struct CpTrace {
    local: Trace,
    head: Trace,
    /// Per point and feature: the neighbour supplying the neighbourhood max.
    nbr_arg: Array2<usize>,
    global_arg: Vec<usize>,
    scores: Vec<f64>,
}

fn neighbours(points: &ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let k = k.min(n);
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .map(|j| {
                    let dx = points[[i, 0]] - points[[j, 0]];
                    let dy = points[[i, 1]] - points[[j, 1]];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CpNet {
    pub fn new<R: Rng + ?Sized>(config: CpConfig, rng: &mut R) -> Result<Self, NnError> {
        let local = DenseNet::new(
            &[2, config.hidden, config.feature_dim],
            &[Activation::Relu, Activation::Relu],
            rng,
        )?;
        let head = DenseNet::mlp(&[3 * config.feature_dim, config.head_hidden, 1], Activation::Relu, rng)?;
        Ok(Self { config, local, head })
    }

    pub fn num_params(&self) -> usize {
        self.local.num_params() + self.head.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.local.params();
        self.head.write_params(&mut p);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::Shape("planner parameter count".into()));
        }
        let mut src = params;
        self.local.read_params(&mut src)?;
        self.head.read_params(&mut src)
    }

    pub fn score_points(&self, points: &ArrayView2<f64>) -> Result<Vec<f64>, PlannerError> {
        Ok(self.score_traced(points)?.scores)
    }

    pub fn score_traced(&self, points: &ArrayView2<f64>) -> Result<CpTrace, PlannerError> {
        let n = points.nrows();
        if n == 0 {
            return Err(PlannerError::EmptyCloud);
        }
        let centroid = points.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let centered = points - &centroid;
        let (f, local) = self.local.forward_traced(&centered.view())?;
        let d = f.ncols();
        let nbrs = neighbours(points, self.config.neighbors);
        let mut cat = Array2::zeros((n, 3 * d));
        let mut nbr_arg = Array2::zeros((n, d));
        let mut global_arg = vec![0; d];
        for j in 0..d {
            for i in 1..n {
                if f[[i, j]] > f[[global_arg[j], j]] {
                    global_arg[j] = i;
                }
            }
        }
        for i in 0..n {
            for j in 0..d {
                let mut best = nbrs[i][0];
                for &q in &nbrs[i][1..] {
                    if f[[q, j]] > f[[best, j]] {
                        best = q;
                    }
                }
                nbr_arg[[i, j]] = best;
                cat[[i, j]] = f[[i, j]];
                cat[[i, d + j]] = f[[best, j]];
                cat[[i, 2 * d + j]] = f[[global_arg[j], j]];
            }
        }
        let (logits, head) = self.head.forward_traced(&cat.view())?;
        let scores: Vec<f64> = logits.column(0).iter().map(|&z| sigmoid(z)).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(NnError::NonFinite("affordance scores").into());
        }
        Ok(CpTrace {
            local,
            head,
            nbr_arg,
            global_arg,
            scores,
        })
    }

    /// Adds the parameter gradient for upstream `dscores` into `grads`.
    pub fn backward_into(&self, trace: &CpTrace, dscores: &[f64], grads: &mut [f64]) -> Result<(), PlannerError> {
        let n = trace.scores.len();
        if dscores.len() != n {
            return Err(PlannerError::Mismatch);
        }
        let dlogit = Array2::from_shape_fn((n, 1), |(i, _)| {
            let s = trace.scores[i];
            dscores[i] * s * (1.0 - s)
        });
        let (gl, gh) = grads.split_at_mut(self.local.num_params());
        let dcat = self.head.backward_into(&trace.head, &dlogit.view(), Some(gh))?;
        let d = self.config.feature_dim;
        let mut df = dcat.slice(s![.., ..d]).to_owned();
        for i in 0..n {
            for j in 0..d {
                df[[trace.nbr_arg[[i, j]], j]] += dcat[[i, d + j]];
                df[[trace.global_arg[j], j]] += dcat[[i, 2 * d + j]];
            }
        }
        self.local.backward_into(&trace.local, &df.view(), Some(gl))?;
        Ok(())
    }

    /// Hard top-K mean of the scored cloud.
    pub fn mpo(&self, points: &ArrayView2<f64>) -> Result<[f64; 2], PlannerError> {
        let scores = self.score_points(points)?;
        select_mpo(&scores, points, self.config.top_k.min(points.nrows()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, NnError> {
        let mut specs = self.local.tensor_specs("local");
        specs.extend(self.head.tensor_specs("head"));
        let meta = serde_json::to_string(&self.config).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Checkpoint::new("contact_planner", meta, specs, self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NnError> {
        ckpt.expect_kind("contact_planner")?;
        let cfg: CpConfig = serde_json::from_str(&ckpt.meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut net = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.set_params(&ckpt.params)?;
        Ok(net)
    }
}

/// Softmax over the scores of the top-K set (temperature `t`), the weighted
/// mean position, and the gradient of that mean w.r.t. every score.
pub struct SoftMpo {
    pub position: [f64; 2],
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn soft_mpo(scores: &[f64], points: &ArrayView2<f64>, k: usize, t: f64) -> Result<SoftMpo, PlannerError> {
    let indices = top_k(scores, k)?;
    let m = indices.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = indices.iter().map(|&i| ((scores[i] - m) / t).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    let mut position = [0.0; 2];
    for (&i, &w) in indices.iter().zip(&weights) {
        position[0] += w * points[[i, 0]];
        position[1] += w * points[[i, 1]];
    }
    Ok(SoftMpo {
        position,
        indices,
        weights,
    })
}

impl SoftMpo {
    /// Score gradient of `<upstream, position>`.
    pub fn score_gradient(&self, points: &ArrayView2<f64>, upstream: [f64; 2], t: f64, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            let dx = points[[i, 0]] - self.position[0];
            let dy = points[[i, 1]] - self.position[1];
            g[i] = w * (upstream[0] * dx + upstream[1] * dy) / t;
        }
        g
    }
}

/// One object's training instance for the planner loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerSample {
    pub object_id: usize,
    pub cloud: Array2<f64>,
    pub target: [f64; 2],
    pub sr: f64,
}

/// `Σ sr · |soft_mpo − target|²` and its parameter gradient.
pub fn planner_loss(cp: &CpNet, samples: &[PlannerSample]) -> Result<(f64, Vec<f64>), PlannerError> {
    let mut grads = vec![0.0; cp.num_params()];
    let mut loss = 0.0;
    let (k, t) = (cp.config.top_k, cp.config.temperature);
    for s in samples.iter().filter(|s| s.sr > 0.0) {
        let view = s.cloud.view();
        let trace = cp.score_traced(&view)?;
        let soft = soft_mpo(&trace.scores, &view, k.min(s.cloud.nrows()), t)?;
        let diff = [soft.position[0] - s.target[0], soft.position[1] - s.target[1]];
        loss += s.sr * (diff[0] * diff[0] + diff[1] * diff[1]);
        let up = [2.0 * s.sr * diff[0], 2.0 * s.sr * diff[1]];
        let ds = soft.score_gradient(&view, up, t, s.cloud.nrows());
        cp.backward_into(&trace, &ds, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Runs `steps` Adam steps on the planner loss. Samples with `sr = 0` do
/// not contribute; with none left the planner is untouched. Returns the loss
/// before each step.
pub fn update_planner(
    cp: &mut CpNet,
    samples: &[PlannerSample],
    adam: &mut AdamState,
    steps: usize,
) -> Result<Vec<f64>, PlannerError> {
    if samples.iter().all(|s| s.sr <= 0.0) {
        return Ok(Vec::new());
    }
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = planner_loss(cp, samples)?;
        history.push(loss);
        let mut p = cp.params();
        adam.step(&mut p, &grads)?;
        cp.set_params(&p)?;
    }
    Ok(history)
}

/// Contact summary of one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeContacts {
    pub object_id: usize,
    pub episode: usize,
    pub success: bool,
    pub first_grasp: Option<[f64; 2]>,
    pub terminal: [f64; 2],
}

impl EpisodeContacts {
    /// Contact positions logged for the episode: the first grasp when one
    /// happened, the terminal effector position otherwise.
    pub fn contacts(&self) -> Vec<[f64; 2]> {
        match self.first_grasp {
            Some(g) => vec![g],
            None => vec![self.terminal],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub object_id: usize,
    pub dgt: Vec<[f64; 2]>,
    pub sr: f64,
    pub episode: usize,
}

impl ContactRecord {
    pub fn target(&self) -> Option<[f64; 2]> {
        if self.dgt.is_empty() {
            return None;
        }
        let n = self.dgt.len() as f64;
        let sx: f64 = self.dgt.iter().map(|p| p[0]).sum();
        let sy: f64 = self.dgt.iter().map(|p| p[1]).sum();
        Some([sx / n, sy / n])
    }
}

/// Trailing per-object window of episode contacts.
#[derive(Debug, Clone, Default)]
pub struct ContactLog {
    window: usize,
    episodes: BTreeMap<usize, VecDeque<EpisodeContacts>>,
}

impl ContactLog {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            episodes: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, ep: EpisodeContacts) {
        let q = self.episodes.entry(ep.object_id).or_default();
        q.push_back(ep);
        while q.len() > self.window {
            q.pop_front();
        }
    }

    /// Per object: success rate over the window and the contacts of the
    /// successful episodes (all contacts when none succeeded).
    pub fn records(&self) -> Vec<ContactRecord> {
        self.episodes
            .iter()
            .map(|(&id, q)| record_contact(id, q.iter()))
            .collect()
    }
}

pub fn record_contact<'a>(object_id: usize, window: impl Iterator<Item = &'a EpisodeContacts>) -> ContactRecord {
    let eps: Vec<_> = window.collect();
    let wins = eps.iter().filter(|e| e.success).count();
    let sr = if eps.is_empty() { 0.0 } else { wins as f64 / eps.len() as f64 };
    let dgt = eps
        .iter()
        .filter(|e| e.success || wins == 0)
        .flat_map(|e| e.contacts())
        .collect();
    ContactRecord {
        object_id,
        dgt,
        sr,
        episode: eps.last().map_or(0, |e| e.episode),
    }
}

pub fn write_contacts_csv(path: &Path, records: &[ContactRecord]) -> Result<(), PlannerError> {
    let mut out = String::from("object_id,sr,contact_x,contact_y,episode\n");
    for r in records {
        for c in &r.dgt {
            out.push_str(&format!("{},{},{},{},{}\n", r.object_id, r.sr, c[0], c[1], r.episode));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Centroid of the cloud; used by tests and diagnostics.
pub fn centroid(points: &ArrayView2<f64>) -> Array1<f64> {
    points.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numerical_gradient};
    use ndarray::array;

    #[test]
    fn mpr_values() {
        assert_eq!(mpr_reward([0.5, 0.0], [0.0, 0.0], 1e-3), 2.0);
        assert_eq!(mpr_reward([0.0, 0.0], [0.0, 0.0], 1e-3), 1000.0);
        assert_eq!(mpr_reward([0.0, 2.0], [0.0, 0.0], 1e-3), 0.5);
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let r = mpr_reward([0.0, 0.0], [0.01 * i as f64 + 0.1, 0.0], 0.1);
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn select_mpo_examples() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [6.0, 6.0]];
        assert_eq!(select_mpo(&[0.9, 0.8, 0.1, 0.1], &pts.view(), 2).unwrap(), [0.5, 0.0]);
        assert_eq!(select_mpo(&[0.1, 0.8, 0.9, 0.1], &pts.view(), 1).unwrap(), [5.0, 5.0]);
        assert_eq!(select_mpo(&[0.5; 4], &pts.view(), 4).unwrap(), [3.0, 2.75]);
        assert_eq!(select_mpo(&[0.5; 4], &pts.view(), 1).unwrap(), [0.0, 0.0]);
        assert!(matches!(select_mpo(&[0.5; 4], &pts.view(), 0), Err(PlannerError::InvalidK { .. })));
        assert!(select_mpo(&[0.5; 4], &pts.view(), 5).is_err());
    }

    fn cloud(seed: u64, n: usize) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |_| r.random_range(-0.5..0.5))
    }

    fn small_cp(seed: u64) -> CpNet {
        CpNet::new(
            CpConfig {
                hidden: 6,
                feature_dim: 5,
                head_hidden: 4,
                neighbors: 4,
                top_k: 4,
                temperature: 0.1,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn scores_are_probabilities_and_equivariant() {
        let cp = CpNet::new(CpConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pts = cloud(2, 50);
        let s = cp.score_points(&pts.view()).unwrap();
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
        let perm: Vec<usize> = (0..50).map(|i| (i * 7 + 3) % 50).collect();
        let shuffled = pts.select(ndarray::Axis(0), &perm);
        let s2 = cp.score_points(&shuffled.view()).unwrap();
        for (a, &p) in perm.iter().enumerate() {
            assert!((s2[a] - s[p]).abs() < 1e-12);
        }
        assert!(matches!(cp.score_points(&Array2::zeros((0, 2)).view()), Err(PlannerError::EmptyCloud)));
    }

    #[test]
    fn planner_gradient_matches_finite_differences() {
        let cp = small_cp(3);
        let samples = vec![
            PlannerSample {
                object_id: 0,
                cloud: cloud(4, 20),
                target: [0.3, -0.2],
                sr: 0.75,
            },
            PlannerSample {
                object_id: 1,
                cloud: cloud(5, 15),
                target: [-0.1, 0.4],
                sr: 1.0,
            },
        ];
        let (_, g) = planner_loss(&cp, &samples).unwrap();
        let numeric = numerical_gradient(&cp.params(), 1e-6, |p| {
            let mut c = cp.clone();
            c.set_params(p).unwrap();
            planner_loss(&c, &samples).unwrap().0
        });
        let err = max_relative_error(&g, &numeric, 1e-6);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_success_records_do_not_move_the_planner() {
        let mut cp = small_cp(6);
        let before = cp.params();
        let samples = vec![PlannerSample {
            object_id: 0,
            cloud: cloud(7, 20),
            target: [0.3, 0.3],
            sr: 0.0,
        }];
        let (loss, g) = planner_loss(&cp, &samples).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let mut adam = AdamState::new(cp.num_params(), 1e-2);
        assert!(update_planner(&mut cp, &samples, &mut adam, 10).unwrap().is_empty());
        assert_eq!(cp.params(), before);
    }

    #[test]
    fn window_success_rate_and_contacts() {
        let mut log = ContactLog::new(4);
        for (i, ok) in [false, true, true, false, true].into_iter().enumerate() {
            log.push(EpisodeContacts {
                object_id: 2,
                episode: i,
                success: ok,
                first_grasp: if ok { Some([i as f64, 0.0]) } else { None },
                terminal: [9.0, 9.0],
            });
        }
        let r = &log.records()[0];
        assert_eq!(r.sr, 0.75);
        assert_eq!(r.dgt, vec![[1.0, 0.0], [2.0, 0.0], [4.0, 0.0]]);
        assert_eq!(r.target(), Some([7.0 / 3.0, 0.0]));

        let fails = ContactLog::new(20);
        assert!(fails.records().is_empty());
        let ep = EpisodeContacts {
            object_id: 0,
            episode: 0,
            success: false,
            first_grasp: None,
            terminal: [1.0, 2.0],
        };
        assert_eq!(ep.contacts(), vec![[1.0, 2.0]]);
        let r = record_contact(0, [ep].iter());
        assert_eq!(r.sr, 0.0);
    }

    #[test]
    fn contacts_csv_has_one_row_per_contact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("contacts.csv");
        let rec = ContactRecord {
            object_id: 3,
            dgt: vec![[0.5, 0.25], [1.0, 0.0]],
            sr: 0.5,
            episode: 9,
        };
        write_contacts_csv(&path, &[rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "object_id,sr,contact_x,contact_y,episode\n3,0.5,0.5,0.25,9\n3,0.5,1,0,9\n");
    }
}
