//! The 3D Gaussian store: initialization from sparse points, covariance
//! construction, the densify/prune/opacity-reset lifecycle and group-id
//! bookkeeping.
//!
//! Attributes live in flat per-attribute buffers so optimizers can step them
//! directly; [`GaussianPrimitive`] is the per-splat view used for
//! construction and inspection.

use crate::geometry::CameraView;
use crate::nn::{logit, Activation, Checkpoint, Mlp, NnError};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of the per-primitive state embedding `d`.
pub const STATE_DIM: usize = 32;
/// Dimension of the trainable opacity feature vector decoded by the OEM.
pub const OPACITY_FEATURE_DIM: usize = 16;
/// Decoded opacity below which a primitive is pruned.
pub const PRUNE_OPACITY: f64 = 0.005;
/// Decoded opacity every primitive is pushed to (or below) on reset.
pub const OPACITY_RESET_TARGET: f64 = 0.01;
/// Fraction of the scene extent separating clone-sized from split-sized
/// primitives.
pub const DENSIFY_SIZE_FRACTION: f64 = 0.01;
const SPLIT_SCALE_SHRINK: f64 = 1.6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot initialize a scene from an empty point cloud")]
    EmptyPointCloud,
    #[error(transparent)]
    Checkpoint(#[from] NnError),
}

/// One splat.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// Unit quaternion, scalar-first (w, x, y, z).
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_feats: [f64; OPACITY_FEATURE_DIM],
    pub color: Vector3<f64>,
    pub state: [f64; STATE_DIM],
    /// 0 means unassigned.
    pub group_id: u32,
}

/// Lifecycle schedule and grouping parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub densification_interval: u64,
    pub opacity_reset_interval: u64,
    pub densify_from: u64,
    pub densify_until: u64,
    pub densify_grad_threshold: f64,
    pub warm_up: u64,
    pub images_per_group: usize,
    pub valid_distance: f64,
    pub overlap_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            densification_interval: 100,
            opacity_reset_interval: 3000,
            densify_from: 500,
            densify_until: 15_000,
            densify_grad_threshold: 0.0002,
            warm_up: 3000,
            images_per_group: 178,
            valid_distance: 50.0,
            overlap_count: 5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.densify_from > self.densify_until {
            return Err(format!(
                "densify_from ({}) must not exceed densify_until ({})",
                self.densify_from, self.densify_until
            ));
        }
        if self.images_per_group == 0 {
            return Err("images_per_group must be at least 1".into());
        }
        if self.valid_distance <= 0.0 {
            return Err("valid_distance must be positive".into());
        }
        Ok(())
    }
}

/// Flat per-attribute buffers; entry `i` of each buffer belongs to splat `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub positions: Vec<f64>,     // 3 per splat
    pub rotations: Vec<f64>,     // 4 per splat (w, x, y, z)
    pub log_scales: Vec<f64>,    // 3 per splat
    pub opacity_feats: Vec<f64>, // OPACITY_FEATURE_DIM per splat
    pub colors: Vec<f64>,        // 3 per splat
    pub states: Vec<f64>,        // STATE_DIM per splat
    pub group_ids: Vec<u32>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.group_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_ids.is_empty()
    }

    pub fn push(&mut self, p: &GaussianPrimitive) {
        self.positions.extend_from_slice(p.position.as_slice());
        self.rotations.extend_from_slice(&p.rotation);
        self.log_scales.extend_from_slice(p.log_scale.as_slice());
        self.opacity_feats.extend_from_slice(&p.opacity_feats);
        self.colors.extend_from_slice(p.color.as_slice());
        self.states.extend_from_slice(&p.state);
        self.group_ids.push(p.group_id);
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            position: self.position(i),
            rotation: self.rotations[4 * i..4 * i + 4].try_into().unwrap(),
            log_scale: Vector3::from_column_slice(&self.log_scales[3 * i..3 * i + 3]),
            opacity_feats: self.opacity_feats
                [OPACITY_FEATURE_DIM * i..OPACITY_FEATURE_DIM * (i + 1)]
                .try_into()
                .unwrap(),
            color: Vector3::from_column_slice(&self.colors[3 * i..3 * i + 3]),
            state: self.states[STATE_DIM * i..STATE_DIM * (i + 1)]
                .try_into()
                .unwrap(),
            group_id: self.group_ids[i],
        }
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    /// Half the diagonal of the position bounding box.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for chunk in self.positions.chunks_exact(3) {
            for k in 0..3 {
                lo[k] = lo[k].min(chunk[k]);
                hi[k] = hi[k].max(chunk[k]);
            }
        }
        let mut d2 = 0.0;
        for k in 0..3 {
            d2 += (hi[k] - lo[k]).powi(2);
        }
        0.5 * d2.sqrt()
    }

    /// Renormalizes each stored quaternion; call after every optimizer step.
    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 1e-12 {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("scene.count", serde_json::json!(self.len()));
        ckpt.push_block("scene.positions", self.positions.clone());
        ckpt.push_block("scene.rotations", self.rotations.clone());
        ckpt.push_block("scene.log_scales", self.log_scales.clone());
        ckpt.push_block("scene.opacity_feats", self.opacity_feats.clone());
        ckpt.push_block("scene.colors", self.colors.clone());
        ckpt.push_block("scene.states", self.states.clone());
        ckpt.push_block(
            "scene.group_ids",
            self.group_ids.iter().map(|&g| g as f64).collect(),
        );
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self, SceneError> {
        let get = |name: &str| -> Result<Vec<f64>, SceneError> {
            ckpt.block(name)
                .map(|b| b.to_vec())
                .ok_or_else(|| NnError::MalformedCheckpoint(format!("missing block {name}")).into())
        };
        Ok(Self {
            positions: get("scene.positions")?,
            rotations: get("scene.rotations")?,
            log_scales: get("scene.log_scales")?,
            opacity_feats: get("scene.opacity_feats")?,
            colors: get("scene.colors")?,
            states: get("scene.states")?,
            group_ids: get("scene.group_ids")?
                .into_iter()
                .map(|v| v as u32)
                .collect(),
        })
    }
}

/// Builds one primitive per sparse point. Scales come from the mean distance
/// to the 3 nearest neighbors, opacity features decode to ~0.1 under the
/// initial OEM (see the deformation module's init contract), and state
/// embeddings start as small Gaussian noise.
pub fn init_from_points(
    points: &[(Vector3<f64>, Vector3<f64>)],
    rng: &mut impl Rng,
) -> Result<GaussianScene, SceneError> {
    if points.is_empty() {
        return Err(SceneError::EmptyPointCloud);
    }
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut scene = GaussianScene::default();
    for (i, (pos, color)) in points.iter().enumerate() {
        let scale = mean_knn_distance(points, i, 3).clamp(1e-4, 1e4);
        let mut opacity_feats = [0.0; OPACITY_FEATURE_DIM];
        opacity_feats[0] = logit(0.1);
        for v in opacity_feats.iter_mut().skip(1) {
            *v = noise.sample(rng);
        }
        let mut state = [0.0; STATE_DIM];
        for v in state.iter_mut() {
            *v = noise.sample(rng);
        }
        scene.push(&GaussianPrimitive {
            position: *pos,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_feats,
            color: *color,
            state,
            group_id: 0,
        });
    }
    Ok(scene)
}

fn mean_knn_distance(points: &[(Vector3<f64>, Vector3<f64>)], i: usize, k: usize) -> f64 {
    if points.len() == 1 {
        return 0.1;
    }
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, (p, _))| (p - points[i].0).norm())
        .collect();
    dists.sort_by(|a, b| a.total_cmp(b));
    let k = k.min(dists.len());
    dists[..k].iter().sum::<f64>() / k as f64
}

/// Normalizes a stored quaternion and returns its rotation matrix.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Sigma = R S S^T R^T` with `S = diag(exp(s))`; symmetric PSD with
/// eigenvalues `exp(2s)`.
pub fn covariance3d(rotation: &[f64; 4], log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation);
    let s = Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let m = r * s;
    m * m.transpose()
}

#[derive(Debug, Clone)]
pub struct DensifyReport {
    /// For each primitive of the new scene, the index it descends from in the
    /// old scene (`None` for freshly spawned clones/splits). Optimizer moment
    /// buffers are remapped with this.
    pub parent_of: Vec<Option<usize>>,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

/// Clone/split primitives whose mean positional gradient exceeds the
/// threshold and prune low-opacity ones. Active only inside the configured
/// window at the configured interval; returns `None` when the call is a
/// scheduled no-op.
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    mean_grads: &[f64],
    decoded_opacity: &[f64],
    cfg: &SceneConfig,
    iteration: u64,
    scene_extent: f64,
    prune_unassigned: bool,
    rng: &mut impl Rng,
) -> Option<DensifyReport> {
    if iteration < cfg.densify_from
        || iteration > cfg.densify_until
        || cfg.densification_interval == 0
        || iteration % cfg.densification_interval != 0
    {
        return None;
    }
    assert_eq!(mean_grads.len(), scene.len());
    assert_eq!(decoded_opacity.len(), scene.len());

    let size_threshold = scene_extent * DENSIFY_SIZE_FRACTION;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = GaussianScene::default();
    let mut parent_of = Vec::new();
    let mut report = DensifyReport {
        parent_of: Vec::new(),
        pruned: 0,
        cloned: 0,
        split: 0,
    };

    for i in 0..scene.len() {
        if decoded_opacity[i] < PRUNE_OPACITY || (prune_unassigned && scene.group_ids[i] == 0) {
            report.pruned += 1;
            continue;
        }
        let prim = scene.primitive(i);
        let max_scale = prim.log_scale.map(f64::exp).max();
        let over = mean_grads[i] > cfg.densify_grad_threshold;
        if over && max_scale >= size_threshold {
            // Split: two smaller children sampled from the parent Gaussian
            // replace it.
            let rot = quat_to_rotation(&prim.rotation);
            let scales = prim.log_scale.map(f64::exp);
            for _ in 0..2 {
                let local = Vector3::new(
                    normal.sample(rng) * scales.x,
                    normal.sample(rng) * scales.y,
                    normal.sample(rng) * scales.z,
                );
                let mut child = prim.clone();
                child.position = prim.position + rot * local;
                child.log_scale = prim.log_scale.map(|s| s - SPLIT_SCALE_SHRINK.ln());
                out.push(&child);
                parent_of.push(None);
            }
            report.split += 1;
        } else if over {
            // Clone: keep the parent and add an identical child.
            out.push(&prim);
            parent_of.push(Some(i));
            out.push(&prim);
            parent_of.push(None);
            report.cloned += 1;
        } else {
            out.push(&prim);
            parent_of.push(Some(i));
        }
    }

    *scene = out;
    report.parent_of = parent_of;
    Some(report)
}

/// Pushes every decoded opacity to at most [`OPACITY_RESET_TARGET`] by moving
/// the opacity feature vector along a line on which the OEM logit provably
/// crosses the target. Returns the indices that were reset so the caller can
/// clear their optimizer moments.
pub fn opacity_reset(
    scene: &mut GaussianScene,
    f_eta: &Mlp,
    cfg: &SceneConfig,
    iteration: u64,
) -> Vec<usize> {
    if cfg.opacity_reset_interval == 0 || iteration % cfg.opacity_reset_interval != 0 {
        return Vec::new();
    }
    let target = logit(OPACITY_RESET_TARGET);
    let mut reset = Vec::new();
    for i in 0..scene.len() {
        let range = OPACITY_FEATURE_DIM * i..OPACITY_FEATURE_DIM * (i + 1);
        let feats: &mut [f64] = &mut scene.opacity_feats[range];
        let current = eval_scalar(f_eta, feats);
        if current <= target {
            continue;
        }
        if let Some(new_feats) = solve_feats_below(f_eta, feats, target, i as u64) {
            feats.copy_from_slice(&new_feats);
            reset.push(i);
        }
    }
    reset
}

/// Reset rule for the OEM-disabled path where opacity decodes as
/// `sigmoid(feats[0])`.
pub fn opacity_reset_plain(scene: &mut GaussianScene, cfg: &SceneConfig, iteration: u64) -> Vec<usize> {
    if cfg.opacity_reset_interval == 0 || iteration % cfg.opacity_reset_interval != 0 {
        return Vec::new();
    }
    let target = logit(OPACITY_RESET_TARGET);
    let mut reset = Vec::new();
    for i in 0..scene.len() {
        let v = &mut scene.opacity_feats[OPACITY_FEATURE_DIM * i];
        if *v > target {
            *v = target;
            reset.push(i);
        }
    }
    reset
}

fn eval_scalar(net: &Mlp, feats: &[f64]) -> f64 {
    let input = crate::nn::Tensor::from_vec(&[feats.len()], feats.to_vec());
    net.infer(&input).expect("OEM input width").data[0]
}

/// Finds feats' = feats + a*d with `net(feats') <= target` for one of several
/// probe directions. For the single-hidden-layer ReLU nets the OEM uses, the
/// logit is piecewise linear along any line, so the crossing is solved
/// exactly from the ReLU breakpoints.
fn solve_feats_below(net: &Mlp, feats: &[f64], target: f64, salt: u64) -> Option<Vec<f64>> {
    use rand::SeedableRng;
    let mut directions: Vec<Vec<f64>> = Vec::new();
    // Shrink toward the origin first (a pure rescale of the feature vector).
    directions.push(feats.iter().map(|v| -v).collect());
    let mut e0 = vec![0.0; feats.len()];
    e0[0] = -1.0;
    directions.push(e0);
    directions.push(logit_gradient(net, feats).iter().map(|v| -v).collect());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    for _ in 0..8 {
        directions.push((0..feats.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }

    for d in directions {
        if d.iter().all(|v| v.abs() < 1e-15) {
            continue;
        }
        if let Some(a) = line_search_below(net, feats, &d, target) {
            let out: Vec<f64> = feats.iter().zip(d.iter()).map(|(f, di)| f + a * di).collect();
            if eval_scalar(net, &out) <= target {
                return Some(out);
            }
        }
    }
    None
}

fn logit_gradient(net: &Mlp, feats: &[f64]) -> Vec<f64> {
    let input = crate::nn::Tensor::from_vec(&[feats.len()], feats.to_vec());
    let (_, tape) = net.forward(&input).expect("OEM input width");
    let d_out = crate::nn::Tensor::vector(vec![1.0]);
    net.backward(&tape, &d_out).expect("fresh tape").d_input.data
}

/// Smallest |a| with `net(feats + a d) <= target` along one direction.
fn line_search_below(net: &Mlp, feats: &[f64], d: &[f64], target: f64) -> Option<f64> {
    let eval = |a: f64| -> f64 {
        let x: Vec<f64> = feats.iter().zip(d.iter()).map(|(f, di)| f + a * di).collect();
        eval_scalar(net, &x)
    };

    // Exact breakpoints exist for a single hidden ReLU layer.
    let mut candidates: Vec<f64> = vec![0.0];
    if net.num_layers() == 2 && net.spec.activations[0] == Activation::Relu {
        let w1 = &net.weights[0];
        let b1 = &net.biases[0];
        let hidden = w1.shape[0];
        let in_w = w1.shape[1];
        for kk in 0..hidden {
            let row = &w1.data[kk * in_w..(kk + 1) * in_w];
            let g: f64 = row.iter().zip(feats.iter()).map(|(w, f)| w * f).sum::<f64>() + b1.data[kk];
            let h: f64 = row.iter().zip(d.iter()).map(|(w, di)| w * di).sum();
            if h.abs() > 1e-15 {
                candidates.push(-g / h);
            }
        }
    }
    // Bracket far beyond the last breakpoint so the outer linear segments are
    // represented too.
    let span = candidates
        .iter()
        .fold(1.0f64, |acc, a| acc.max(a.abs()))
        * 4.0
        + 1e4;
    candidates.push(-span);
    candidates.push(span);
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();

    let values: Vec<f64> = candidates.iter().map(|&a| eval(a)).collect();
    let mut best: Option<f64> = None;
    let mut consider = |a: f64| {
        if best.map_or(true, |b| a.abs() < b.abs()) {
            best = Some(a);
        }
    };
    for w in 0..candidates.len() {
        if values[w] <= target {
            consider(candidates[w]);
        }
        if w + 1 < candidates.len() {
            let (a0, a1) = (candidates[w], candidates[w + 1]);
            let (f0, f1) = (values[w], values[w + 1]);
            if (f0 - target) * (f1 - target) < 0.0 {
                // Linear segment: exact crossing, nudged past the target.
                let t = (target - f0) / (f1 - f0);
                let mut a = a0 + t * (a1 - a0);
                // Guard against rounding leaving us a hair above target.
                let mut guard = 0;
                while eval(a) > target && guard < 64 {
                    a += (a1 - a0) * 1e-12 * (1 << guard) as f64;
                    guard += 1;
                }
                if eval(a) <= target {
                    consider(a);
                }
            }
        }
    }
    best
}

/// Walks groups in index order; a primitive within `d_valid` of any camera in
/// group `i` gets id `i`, so later groups overwrite earlier ones. Primitives
/// near no camera keep id 0.
pub fn assign_group_ids(scene: &mut GaussianScene, camera_groups: &[Vec<CameraView>], d_valid: f64) {
    for i in 0..scene.len() {
        scene.group_ids[i] = 0;
    }
    for (gi, cams) in camera_groups.iter().enumerate() {
        let gid = (gi + 1) as u32;
        for i in 0..scene.len() {
            let p = scene.position(i);
            if cams
                .iter()
                .any(|c| (p - c.camera_center()).norm() < d_valid)
            {
                scene.group_ids[i] = gid;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::nn::MlpSpec;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn unit_view(center: Vector3<f64>) -> CameraView {
        CameraView {
            pose: Pose {
                rotation: Matrix3::identity(),
                translation: center,
            },
            intrinsics: Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap(),
            timestamp: 0.0,
        }
    }

    /// OEM initialized so its logit equals the first feature component; see
    /// the deformation module for the full init contract.
    fn passthrough_oem() -> Mlp {
        let mut rng = StdRng::seed_from_u64(3);
        let mut net = Mlp::init(
            MlpSpec::relu_net(vec![OPACITY_FEATURE_DIM, 64, 1], 0.0),
            &mut rng,
        );
        for w in &mut net.weights {
            w.data.fill(0.0);
        }
        for b in &mut net.biases {
            b.data.fill(0.0);
        }
        net.weights[0].data[0] = 1.0; // unit 0 <- +feat[0]
        net.weights[0].data[OPACITY_FEATURE_DIM] = -1.0; // unit 1 <- -feat[0]
        net.weights[1].data[0] = 1.0;
        net.weights[1].data[1] = -1.0;
        net.bump_version();
        net
    }

    fn single_point_scene() -> GaussianScene {
        let mut rng = StdRng::seed_from_u64(1);
        init_from_points(
            &[(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0))],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn init_single_point() {
        let scene = single_point_scene();
        assert_eq!(scene.len(), 1);
        let p = scene.primitive(0);
        assert_eq!(p.position, Vector3::zeros());
        assert_eq!(p.color, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.group_id, 0);
        assert_abs_diff_eq!(p.opacity_feats[0], logit(0.1), epsilon = 1e-12);
    }

    #[test]
    fn init_rejects_empty() {
        let mut rng = StdRng::seed_from_u64(2);
        assert!(matches!(
            init_from_points(&[], &mut rng),
            Err(SceneError::EmptyPointCloud)
        ));
    }

    #[test]
    fn init_grid_scales_bounded() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut points = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                points.push((
                    Vector3::new(x as f64, y as f64, 0.0),
                    Vector3::new(0.5, 0.5, 0.5),
                ));
            }
        }
        let scene = init_from_points(&points, &mut rng).unwrap();
        assert_eq!(scene.len(), 100);
        for i in 0..scene.len() {
            let p = scene.primitive(i);
            assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
            let scale = p.log_scale.map(f64::exp);
            for k in 0..3 {
                assert!(
                    (0.5..=2.0).contains(&scale[k]),
                    "scale {scale:?} outside [0.5, 2]"
                );
            }
        }
    }

    #[test]
    fn covariance_identity_and_axis_scaling() {
        let q = [1.0, 0.0, 0.0, 0.0];
        let cov = covariance3d(&q, &Vector3::zeros());
        assert!((cov - Matrix3::identity()).abs().max() < 1e-12);

        let cov = covariance3d(&q, &Vector3::new(2.0f64.ln(), 0.0, 0.0));
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((cov - expect).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_match_scales() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let raw: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let s = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let cov = covariance3d(&raw, &s);
            let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(|a, b| a.total_cmp(b));
            expect.sort_by(|a, b| a.total_cmp(b));
            for (e, x) in eig.iter().zip(expect.iter()) {
                assert!((e - x).abs() < 1e-9 * x.max(1.0));
            }
        }
    }

    fn densify_cfg() -> SceneConfig {
        SceneConfig {
            densification_interval: 1,
            densify_from: 0,
            densify_until: 100,
            densify_grad_threshold: 0.1,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn densify_noop_when_below_threshold() {
        let mut scene = single_point_scene();
        let before = scene.clone();
        let mut rng = StdRng::seed_from_u64(6);
        let report = densify_and_prune(
            &mut scene,
            &[0.01],
            &[0.5],
            &densify_cfg(),
            10,
            10.0,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(scene, before);
        assert_eq!(report.pruned + report.cloned + report.split, 0);
    }

    #[test]
    fn densify_clones_small_primitive() {
        let mut scene = single_point_scene();
        // Force a tiny scale so the clone branch triggers.
        for v in scene.log_scales.iter_mut() {
            *v = (0.01f64).ln();
        }
        let parent = scene.primitive(0);
        let mut rng = StdRng::seed_from_u64(7);
        let report = densify_and_prune(
            &mut scene,
            &[1.0],
            &[0.5],
            &densify_cfg(),
            10,
            100.0,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.cloned, 1);
        assert_eq!(scene.len(), 2);
        let child = scene.primitive(1);
        assert_eq!(child, parent);
        assert_eq!(report.parent_of, vec![Some(0), None]);
    }

    #[test]
    fn densify_splits_large_primitive() {
        let mut scene = single_point_scene();
        for v in scene.log_scales.iter_mut() {
            *v = (5.0f64).ln();
        }
        let mut rng = StdRng::seed_from_u64(8);
        let report = densify_and_prune(
            &mut scene,
            &[1.0],
            &[0.5],
            &densify_cfg(),
            10,
            10.0,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.split, 1);
        assert_eq!(scene.len(), 2);
        let expect_scale = (5.0f64 / 1.6).ln();
        for i in 0..2 {
            assert_abs_diff_eq!(scene.primitive(i).log_scale.x, expect_scale, epsilon = 1e-12);
        }
        assert_eq!(report.parent_of, vec![None, None]);
    }

    #[test]
    fn densify_prunes_transparent_primitive() {
        let mut scene = single_point_scene();
        let mut rng = StdRng::seed_from_u64(9);
        let report = densify_and_prune(
            &mut scene,
            &[0.0],
            &[1e-4],
            &densify_cfg(),
            10,
            10.0,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.pruned, 1);
        assert!(scene.is_empty());
    }

    #[test]
    fn densify_respects_schedule() {
        let mut scene = single_point_scene();
        let cfg = SceneConfig {
            densification_interval: 100,
            densify_from: 500,
            densify_until: 1000,
            ..SceneConfig::default()
        };
        let mut rng = StdRng::seed_from_u64(10);
        // Outside the window or off the interval: no-op.
        for iter in [0, 400, 550, 1100] {
            assert!(densify_and_prune(
                &mut scene,
                &[1.0],
                &[0.5],
                &cfg,
                iter,
                10.0,
                false,
                &mut rng
            )
            .is_none());
        }
        assert!(densify_and_prune(
            &mut scene,
            &[0.0],
            &[0.5],
            &cfg,
            600,
            10.0,
            false,
            &mut rng
        )
        .is_some());
    }

    #[test]
    fn opacity_reset_caps_decoded_opacity() {
        let oem = passthrough_oem();
        let mut scene = single_point_scene();
        scene.opacity_feats[0] = logit(0.9);
        let cfg = SceneConfig {
            opacity_reset_interval: 10,
            ..SceneConfig::default()
        };
        let reset = opacity_reset(&mut scene, &oem, &cfg, 10);
        assert_eq!(reset, vec![0]);
        let decoded = crate::nn::sigmoid(eval_scalar(&oem, &scene.opacity_feats[..OPACITY_FEATURE_DIM]));
        assert!(decoded <= OPACITY_RESET_TARGET + 1e-12, "decoded {decoded}");
    }

    #[test]
    fn opacity_reset_leaves_low_opacity_untouched() {
        let oem = passthrough_oem();
        let mut scene = single_point_scene();
        scene.opacity_feats[0] = logit(0.005);
        let before = scene.opacity_feats.clone();
        let cfg = SceneConfig {
            opacity_reset_interval: 10,
            ..SceneConfig::default()
        };
        let reset = opacity_reset(&mut scene, &oem, &cfg, 10);
        assert!(reset.is_empty());
        assert_eq!(scene.opacity_feats, before);
    }

    #[test]
    fn opacity_reset_full_scene_scan() {
        // A trained-ish (random) OEM still gets every primitive below target.
        let mut rng = StdRng::seed_from_u64(11);
        let oem = Mlp::init(
            MlpSpec::relu_net(vec![OPACITY_FEATURE_DIM, 64, 1], 0.0),
            &mut rng,
        );
        let points: Vec<(Vector3<f64>, Vector3<f64>)> = (0..200)
            .map(|i| {
                (
                    Vector3::new(i as f64 * 0.1, 0.0, 0.0),
                    Vector3::new(0.5, 0.5, 0.5),
                )
            })
            .collect();
        let mut scene = init_from_points(&points, &mut rng).unwrap();
        for v in scene.opacity_feats.iter_mut() {
            use rand::Rng;
            *v = rng.gen_range(-3.0..3.0);
        }
        let cfg = SceneConfig {
            opacity_reset_interval: 1,
            ..SceneConfig::default()
        };
        opacity_reset(&mut scene, &oem, &cfg, 1);
        let mut max_decoded: f64 = 0.0;
        for i in 0..scene.len() {
            let feats = &scene.opacity_feats[OPACITY_FEATURE_DIM * i..OPACITY_FEATURE_DIM * (i + 1)];
            max_decoded = max_decoded.max(crate::nn::sigmoid(eval_scalar(&oem, feats)));
        }
        assert!(
            max_decoded <= OPACITY_RESET_TARGET + 1e-12,
            "max decoded {max_decoded}"
        );
    }

    #[test]
    fn group_assignment_rules() {
        let mut rng = StdRng::seed_from_u64(12);
        let d = 10.0;
        let points = vec![
            (Vector3::new(0.0, 0.0, 5.0), Vector3::zeros()), // near group 1
            (Vector3::new(0.0, 0.0, 50.0), Vector3::zeros()), // near nothing
            (Vector3::new(0.0, 0.0, 25.0), Vector3::zeros()), // near groups 2 and 3
        ];
        let mut scene = init_from_points(&points, &mut rng).unwrap();
        let groups = vec![
            vec![unit_view(Vector3::new(0.0, 0.0, 0.0))],
            vec![unit_view(Vector3::new(0.0, 0.0, 20.0))],
            vec![unit_view(Vector3::new(0.0, 0.0, 30.0))],
        ];
        assign_group_ids(&mut scene, &groups, d);
        assert_eq!(scene.group_ids[0], 1);
        assert_eq!(scene.group_ids[1], 0);
        // Sequential assignment: the later group wins.
        assert_eq!(scene.group_ids[2], 3);
    }

    #[test]
    fn scene_checkpoint_round_trips_bit_exact() {
        let mut rng = StdRng::seed_from_u64(13);
        let points: Vec<(Vector3<f64>, Vector3<f64>)> = (0..20)
            .map(|i| {
                (
                    Vector3::new(i as f64, (i * 7 % 5) as f64, 0.3),
                    Vector3::new(0.1, 0.2, 0.3),
                )
            })
            .collect();
        let scene = init_from_points(&points, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ckpt");
        let mut ckpt = Checkpoint::new();
        scene.save_into(&mut ckpt);
        ckpt.write(&path).unwrap();
        let back = GaussianScene::load_from(&Checkpoint::read(&path).unwrap()).unwrap();
        assert_eq!(scene, back);
    }
}
