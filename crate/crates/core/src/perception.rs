//! Synthetic labeled scenes, occlusion with imagined hand points, and the
//! point segmentation network whose pooled feature is the vision
//! observation.
//!
//! A scene holds the lid and handle knob (functional part), the base
//! (object rest), a disc around the end effector (hand), and a fixed mount
//! segment (arm). Hand points hidden behind the lid along the camera ray
//! (pointing up, `+y`) are dropped and, when imagination is on, replaced by
//! points sampled from the known effector pose.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{checksum, Activation, AdamState, Checkpoint, DenseNet, NnError};
use crate::toy_env::{distance, ArticulatedObject, Category, EnvState, WORLD_BOUND};

pub const NUM_CLASSES: usize = 4;
pub const ARM_SEGMENT: ([f64; 2], [f64; 2]) = ([1.9, 0.9], [1.9, 1.9]);
const DATASET_MAGIC: &[u8; 8] = b"DARTSEGD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("segmentation training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty point cloud")]
    Empty,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PointClass {
    FunctionalPart = 0,
    ObjectRest = 1,
    Hand = 2,
    Arm = 3,
}

impl PointClass {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(PointClass::FunctionalPart),
            1 => Some(PointClass::ObjectRest),
            2 => Some(PointClass::Hand),
            3 => Some(PointClass::Arm),
            _ => None,
        }
    }

    pub fn is_object(self) -> bool {
        matches!(self, PointClass::FunctionalPart | PointClass::ObjectRest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Array2<f64>,
    pub classes: Vec<PointClass>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, class: PointClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub lid_points: usize,
    pub knob_points: usize,
    pub base_points: usize,
    pub hand_points: usize,
    pub arm_points: usize,
    pub hand_radius: f64,
    pub jitter: f64,
    pub occlusion: bool,
    pub imagination: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            lid_points: 80,
            knob_points: 16,
            base_points: 96,
            hand_points: 32,
            arm_points: 32,
            hand_radius: 0.05,
            jitter: 0.005,
            occlusion: true,
            imagination: true,
        }
    }
}

impl SceneConfig {
    pub fn nominal_points(&self) -> usize {
        self.lid_points + self.knob_points + self.base_points + self.hand_points + self.arm_points
    }
}

fn on_segment<R: Rng + ?Sized>(a: [f64; 2], b: [f64; 2], rng: &mut R) -> [f64; 2] {
    let t: f64 = rng.random();
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Whether the upward ray from `p` crosses segment `a`–`b`.
pub fn occluded_by(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    if dx.abs() < 1e-12 {
        return false;
    }
    let t = (p[0] - a[0]) / dx;
    if !(0.0..=1.0).contains(&t) {
        return false;
    }
    a[1] + t * (b[1] - a[1]) > p[1]
}

/// `count` points on the effector disc in a fixed sunflower pattern.
pub fn imagine_hand_points(center: [f64; 2], radius: f64, count: usize) -> Array2<f64> {
    let golden = PI * (3.0 - 5f64.sqrt());
    Array2::from_shape_fn((count, 2), |(i, j)| {
        let r = radius * ((i as f64 + 0.5) / count as f64).sqrt();
        let a = i as f64 * golden;
        if j == 0 {
            center[0] + r * a.cos()
        } else {
            center[1] + r * a.sin()
        }
    })
}

pub fn synthesize_scene<R: Rng + ?Sized>(
    object: &ArticulatedObject,
    state: &EnvState,
    cfg: &SceneConfig,
    rng: &mut R,
) -> LabeledPointCloud {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(cfg.nominal_points());
    let mut classes = Vec::with_capacity(cfg.nominal_points());
    let theta = state.theta;
    let hinge = object.hinge;
    let lid_end = object.lid_end(theta);
    let (knob_a, knob_b) = (object.handle(theta), object.knob_tip(theta));
    let (base_a, base_b) = object.base_segment();
    let mut push = |p: [f64; 2], c: PointClass| {
        pts.push(p);
        classes.push(c);
    };
    for _ in 0..cfg.lid_points {
        push(on_segment(hinge, lid_end, rng), PointClass::FunctionalPart);
    }
    for _ in 0..cfg.knob_points {
        push(on_segment(knob_a, knob_b, rng), PointClass::FunctionalPart);
    }
    for _ in 0..cfg.base_points {
        push(on_segment(base_a, base_b, rng), PointClass::ObjectRest);
    }
    for _ in 0..cfg.hand_points {
        let r = cfg.hand_radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        push(
            [state.effector[0] + r * a.cos(), state.effector[1] + r * a.sin()],
            PointClass::Hand,
        );
    }
    for _ in 0..cfg.arm_points {
        push(on_segment(ARM_SEGMENT.0, ARM_SEGMENT.1, rng), PointClass::Arm);
    }
    if cfg.jitter > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter).expect("positive jitter");
        for p in pts.iter_mut() {
            p[0] += noise.sample(rng);
            p[1] += noise.sample(rng);
        }
    }
    let mut keep_pts = Vec::with_capacity(pts.len());
    let mut keep_cls = Vec::with_capacity(pts.len());
    let mut dropped = 0;
    for (p, c) in pts.into_iter().zip(classes) {
        if cfg.occlusion && c == PointClass::Hand && occluded_by(p, hinge, lid_end) {
            dropped += 1;
            continue;
        }
        keep_pts.push(p);
        keep_cls.push(c);
    }
    if cfg.imagination && dropped > 0 {
        let imagined = imagine_hand_points(state.effector, cfg.hand_radius, dropped);
        for row in imagined.rows() {
            keep_pts.push([row[0], row[1]]);
            keep_cls.push(PointClass::Hand);
        }
    }
    let n = keep_pts.len();
    let points = Array2::from_shape_fn((n, 2), |(i, j)| keep_pts[i][j].clamp(-WORLD_BOUND, WORLD_BOUND));
    LabeledPointCloud {
        points,
        classes: keep_cls,
    }
}

/// Shared per-point stack, max pooling, and a per-point head reading the
/// point feature concatenated with the pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub local: DenseNet,
    pub head: DenseNet,
}

/// Intermediates of [`SegNet::forward_traced`].
pub struct SegTrace {
    local: crate::nn::Trace,
    head: crate::nn::Trace,
    argmax: Vec<usize>,
    rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_dim: 64,
            head_hidden: 64,
        }
    }
}

fn max_pool(features: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let mut pooled = Array1::from_elem(features.ncols(), f64::NEG_INFINITY);
    let mut argmax = vec![0; features.ncols()];
    for (i, row) in features.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > pooled[j] {
                pooled[j] = v;
                argmax[j] = i;
            }
        }
    }
    (pooled, argmax)
}

/// Row-wise concatenation `[x, broadcast(g)]`.
fn concat_global(x: &Array2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), x.ncols() + g.len()));
    out.slice_mut(s![.., ..x.ncols()]).assign(x);
    out.slice_mut(s![.., x.ncols()..]).assign(&g.broadcast((x.nrows(), g.len())).expect("broadcast"));
    out
}

impl SegNet {
    pub fn new<R: Rng + ?Sized>(cfg: SegNetConfig, rng: &mut R) -> Result<Self, NnError> {
        let local = DenseNet::new(&[2, cfg.hidden, cfg.feature_dim], &[Activation::Relu, Activation::Relu], rng)?;
        let head = DenseNet::mlp(&[2 * cfg.feature_dim, cfg.head_hidden, NUM_CLASSES], Activation::Relu, rng)?;
        Ok(Self { local, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.local.output_dim()
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
            return Err(NnError::Shape("segmentation parameter count".into()));
        }
        let mut src = params;
        self.local.read_params(&mut src)?;
        self.head.read_params(&mut src)
    }

    pub fn checksum(&self) -> u64 {
        checksum(&self.params())
    }

    /// Pooled global feature `o_pn`.
    pub fn extract_features(&self, points: &ArrayView2<f64>) -> Result<Array1<f64>, PerceptionError> {
        if points.nrows() == 0 {
            return Err(PerceptionError::Empty);
        }
        let f = self.local.forward(points)?;
        Ok(max_pool(&f).0)
    }

    /// Per-point class logits and the pooled feature.
    pub fn forward(&self, points: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), PerceptionError> {
        let (logits, pooled, _) = self.forward_traced(points)?;
        Ok((logits, pooled))
    }

    pub fn forward_traced(&self, points: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, SegTrace), PerceptionError> {
        if points.nrows() == 0 {
            return Err(PerceptionError::Empty);
        }
        let (f, local) = self.local.forward_traced(points)?;
        let (pooled, argmax) = max_pool(&f);
        let (logits, head) = self.head.forward_traced(&concat_global(&f, &pooled).view())?;
        Ok((
            logits,
            pooled,
            SegTrace {
                local,
                head,
                argmax,
                rows: points.nrows(),
            },
        ))
    }

    /// Adds the parameter gradient for upstream `dlogits` into `grads`.
    pub fn backward_into(&self, trace: &SegTrace, dlogits: &ArrayView2<f64>, grads: &mut [f64]) -> Result<(), PerceptionError> {
        let nl = self.local.num_params();
        let (gl, gh) = grads.split_at_mut(nl);
        let dcat = self.head.backward_into(&trace.head, dlogits, Some(gh))?;
        let d = self.feature_dim();
        let mut df = dcat.slice(s![.., ..d]).to_owned();
        let dg = dcat.slice(s![.., d..]).sum_axis(Axis(0));
        for (j, &i) in trace.argmax.iter().enumerate() {
            df[[i, j]] += dg[j];
        }
        debug_assert_eq!(df.nrows(), trace.rows);
        self.local.backward_into(&trace.local, &df.view(), Some(gl))?;
        Ok(())
    }

    pub fn predict(&self, points: &ArrayView2<f64>) -> Result<Vec<PointClass>, PerceptionError> {
        let (logits, _) = self.forward(points)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                PointClass::from_index(best).expect("four logits")
            })
            .collect())
    }

    pub fn accuracy(&self, scenes: &[LabeledPointCloud]) -> Result<f64, PerceptionError> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for sc in scenes {
            let pred = self.predict(&sc.points.view())?;
            hit += pred.iter().zip(&sc.classes).filter(|(a, b)| a == b).count();
            total += sc.len();
        }
        Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, NnError> {
        let cfg = SegNetConfig {
            hidden: self.local.widths()[1],
            feature_dim: self.feature_dim(),
            head_hidden: self.head.widths()[1],
        };
        let mut specs = self.local.tensor_specs("local");
        specs.extend(self.head.tensor_specs("head"));
        let meta = serde_json::to_string(&cfg).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Checkpoint::new("segnet", meta, specs, self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NnError> {
        ckpt.expect_kind("segnet")?;
        let cfg: SegNetConfig = serde_json::from_str(&ckpt.meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut net = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.set_params(&ckpt.params)?;
        Ok(net)
    }
}

/// Mean cross-entropy over the points of one scene and its logit gradient.
pub fn cross_entropy(logits: &Array2<f64>, classes: &[PointClass]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let target = classes[i] as usize;
        loss += -(row[target] - m - z.ln());
        for j in 0..row.len() {
            let p = (row[j] - m).exp() / z;
            grad[[i, j]] = (p - if j == target { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

/// Random object over the full parameter ranges of both categories.
pub fn random_object<R: Rng + ?Sized>(rng: &mut R, id: usize) -> ArticulatedObject {
    ArticulatedObject {
        id,
        hinge: [rng.random_range(-0.4..0.4), rng.random_range(-0.6..-0.4)],
        lid_length: rng.random_range(0.3..=0.8),
        handle_offset: rng.random_range(0.5..=1.0),
        theta_max: rng.random_range(PI / 3.0..=2.0 * PI / 3.0),
        category: if rng.random::<bool>() { Category::LidUp } else { Category::LidSideways },
    }
}

/// Random pose: lid anywhere in its range; effector near the handle half of
/// the time, anywhere in the world otherwise.
pub fn random_state<R: Rng + ?Sized>(object: &ArticulatedObject, rng: &mut R) -> EnvState {
    let theta = rng.random_range(0.0..=object.theta_max);
    let effector = if rng.random::<bool>() {
        let h = object.handle(theta);
        let r = 0.3 * rng.random::<f64>();
        let a = rng.random_range(0.0..2.0 * PI);
        [
            (h[0] + r * a.cos()).clamp(-WORLD_BOUND, WORLD_BOUND),
            (h[1] + r * a.sin()).clamp(-WORLD_BOUND, WORLD_BOUND),
        ]
    } else {
        [rng.random_range(-1.8..1.8), rng.random_range(-1.8..1.8)]
    };
    let grasped = distance(effector, object.handle(theta)) < 0.05;
    EnvState {
        effector,
        grasped,
        theta,
        t: 0,
    }
}

pub fn generate_dataset(n: usize, cfg: &SceneConfig, seed: u64) -> Vec<LabeledPointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let o = random_object(&mut rng, i);
            let s = random_state(&o, &mut rng);
            synthesize_scene(&o, &s, cfg, &mut rng)
        })
        .collect()
}

/// Binary cache: magic, version, scene count, per-scene point counts (all
/// little-endian u64), then every coordinate as f64 and every class as u8.
pub fn write_dataset(path: &Path, scenes: &[LabeledPointCloud]) -> Result<(), PerceptionError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(scenes.len() as u64).to_le_bytes());
    for sc in scenes {
        out.extend_from_slice(&(sc.len() as u64).to_le_bytes());
    }
    for sc in scenes {
        for v in sc.points.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for sc in scenes {
        out.extend(sc.classes.iter().map(|&c| c as u8));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledPointCloud>, PerceptionError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| PerceptionError::Dataset(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], PerceptionError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) != DATASET_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut counts = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        counts.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
    }
    let mut points = Vec::with_capacity(n);
    for &c in &counts {
        let raw = take(c * 16)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        points.push(Array2::from_shape_vec((c, 2), v).map_err(|e| bad(&e.to_string()))?);
    }
    let mut scenes = Vec::with_capacity(n);
    for (pts, &c) in points.into_iter().zip(&counts) {
        let classes = take(c)?
            .iter()
            .map(|&b| PointClass::from_index(b as usize).ok_or_else(|| bad("bad class byte")))
            .collect::<Result<Vec<_>, _>>()?;
        scenes.push(LabeledPointCloud { points: pts, classes });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub seed: u64,
    pub net: SegNetConfig,
    pub scene: SceneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train_scenes: 1200,
            test_scenes: 200,
            epochs: 40,
            batch_scenes: 8,
            lr: 3e-3,
            seed: 0,
            net: SegNetConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub checksum: u64,
}

/// Trains a fresh network on `train`; the returned network is frozen by
/// convention: nothing downstream updates its parameters.
pub fn pretrain_segmentation(
    train: &[LabeledPointCloud],
    test: &[LabeledPointCloud],
    cfg: &PretrainConfig,
) -> Result<(SegNet, PretrainReport), PerceptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SegNet::new(cfg.net, &mut rng)?;
    let mut adam = AdamState::new(net.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_scenes.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = vec![0.0; net.num_params()];
            for &i in chunk {
                let sc = &train[i];
                let (logits, _, trace) = net.forward_traced(&sc.points.view())?;
                let (loss, mut dlogits) = cross_entropy(&logits, &sc.classes);
                if !loss.is_finite() {
                    return Err(PerceptionError::Diverged { epoch });
                }
                total += loss;
                dlogits /= chunk.len() as f64;
                net.backward_into(&trace, &dlogits.view(), &mut grads)?;
            }
            let mut params = net.params();
            adam.step(&mut params, &grads).map_err(|_| PerceptionError::Diverged { epoch })?;
            net.set_params(&params)?;
        }
        epoch_loss.push(total / train.len().max(1) as f64);
    }
    let report = PretrainReport {
        epoch_loss,
        train_accuracy: net.accuracy(train)?,
        test_accuracy: net.accuracy(test)?,
        checksum: net.checksum(),
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numerical_gradient};

    fn object() -> ArticulatedObject {
        ArticulatedObject {
            id: 0,
            hinge: [-0.2, -0.5],
            lid_length: 0.5,
            handle_offset: 0.9,
            theta_max: PI / 2.0,
            category: Category::LidUp,
        }
    }

    fn state(e: [f64; 2], theta: f64) -> EnvState {
        EnvState {
            effector: e,
            grasped: false,
            theta,
            t: 0,
        }
    }

    #[test]
    fn far_hand_scene_has_nominal_counts() {
        let cfg = SceneConfig::default();
        let sc = synthesize_scene(&object(), &state([1.0, 1.5], 0.0), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(sc.len(), cfg.nominal_points());
        assert_eq!(sc.count(PointClass::FunctionalPart), cfg.lid_points + cfg.knob_points);
        assert_eq!(sc.count(PointClass::ObjectRest), cfg.base_points);
        assert_eq!(sc.count(PointClass::Hand), cfg.hand_points);
        assert_eq!(sc.count(PointClass::Arm), cfg.arm_points);
        assert!(sc.points.iter().all(|v| v.abs() <= WORLD_BOUND));
    }

    #[test]
    fn hand_under_lid_is_occluded_then_imagined() {
        let o = object();
        let under = state([0.0, -0.53], 0.0);
        let plain = SceneConfig {
            imagination: false,
            ..Default::default()
        };
        let sc = synthesize_scene(&o, &under, &plain, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(sc.count(PointClass::Hand) < plain.hand_points);
        let sc = synthesize_scene(&o, &under, &SceneConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(sc.count(PointClass::Hand), plain.hand_points);
        assert_eq!(sc.len(), plain.nominal_points());
    }

    #[test]
    fn zero_jitter_points_lie_on_geometry() {
        let o = object();
        let cfg = SceneConfig {
            jitter: 0.0,
            ..Default::default()
        };
        let theta = 0.7;
        let sc = synthesize_scene(&o, &state([1.0, 1.5], theta), &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let dist_to_segment = |p: [f64; 2], a: [f64; 2], b: [f64; 2]| {
            let d = [b[0] - a[0], b[1] - a[1]];
            let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])).clamp(0.0, 1.0);
            distance(p, [a[0] + t * d[0], a[1] + t * d[1]])
        };
        for (row, c) in sc.points.rows().into_iter().zip(&sc.classes) {
            if *c == PointClass::FunctionalPart {
                let p = [row[0], row[1]];
                let lid = dist_to_segment(p, o.hinge, o.lid_end(theta));
                let knob = dist_to_segment(p, o.handle(theta), o.knob_tip(theta));
                assert!(lid.min(knob) < 1e-12);
            }
        }
    }

    #[test]
    fn imagined_points_stay_on_disc() {
        let p = imagine_hand_points([0.0, 0.0], 0.05, 40);
        assert_eq!(p.nrows(), 40);
        assert!(p.rows().into_iter().all(|r| r[0].hypot(r[1]) <= 0.05));
        assert_eq!(imagine_hand_points([0.0, 0.0], 0.05, 0).nrows(), 0);
        assert_eq!(p, imagine_hand_points([0.0, 0.0], 0.05, 40));
    }

    fn small_net(seed: u64) -> SegNet {
        SegNet::new(
            SegNetConfig {
                hidden: 6,
                feature_dim: 5,
                head_hidden: 7,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn pooled_feature_is_permutation_invariant_and_logits_equivariant() {
        let net = SegNet::new(SegNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let sc = synthesize_scene(&object(), &state([1.0, 1.5], 0.2), &SceneConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
        let n = sc.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        let shuffled = sc.points.select(Axis(0), &perm);
        let (l1, g1) = net.forward(&sc.points.view()).unwrap();
        let (l2, g2) = net.forward(&shuffled.view()).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(l1.select(Axis(0), &perm), l2);
        assert_eq!(net.extract_features(&sc.points.view()).unwrap(), g1);
    }

    #[test]
    fn distinct_scenes_give_distinct_features() {
        let net = SegNet::new(SegNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = SceneConfig::default();
        let a = synthesize_scene(&object(), &state([1.0, 1.5], 0.0), &cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let b = synthesize_scene(&object(), &state([-1.0, 0.5], 1.2), &cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let fa = net.extract_features(&a.points.view()).unwrap();
        let fb = net.extract_features(&b.points.view()).unwrap();
        assert!((&fa - &fb).mapv(|v| v * v).sum() > 0.0);
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let net = small_net(7);
        let sc = synthesize_scene(&object(), &state([0.3, 0.2], 0.4), &SceneConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
        let pts = sc.points.slice(s![..40, ..]).to_owned();
        let cls = &sc.classes[..40];
        let (logits, _, trace) = net.forward_traced(&pts.view()).unwrap();
        let (_, dl) = cross_entropy(&logits, cls);
        let mut g = vec![0.0; net.num_params()];
        net.backward_into(&trace, &dl.view(), &mut g).unwrap();
        let numeric = numerical_gradient(&net.params(), 1e-6, |p| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            cross_entropy(&n.forward(&pts.view()).unwrap().0, cls).0
        });
        let err = max_relative_error(&g, &numeric, 1e-6);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn single_class_dataset_is_learned_exactly() {
        let cfg = SceneConfig {
            lid_points: 0,
            knob_points: 0,
            base_points: 0,
            hand_points: 0,
            arm_points: 64,
            ..Default::default()
        };
        let data = generate_dataset(10, &cfg, 1);
        let pre = PretrainConfig {
            epochs: 2,
            net: SegNetConfig {
                hidden: 8,
                feature_dim: 8,
                head_hidden: 8,
            },
            scene: cfg,
            ..Default::default()
        };
        let (net, report) = pretrain_segmentation(&data, &data, &pre).unwrap();
        assert_eq!(report.test_accuracy, 1.0);
        assert_eq!(report.checksum, net.checksum());
    }

    #[test]
    fn dataset_cache_round_trip() {
        let data = generate_dataset(5, &SceneConfig::default(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small_net(9);
        let back = SegNet::from_checkpoint(&Checkpoint::from_bytes(&net.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
