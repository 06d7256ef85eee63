//! The two inference modes — direct optimization of mesh and camera
//! parameters, and a small learned predictor with supervised pretraining plus
//! self-supervised finetuning — and the three evaluation metrics.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    compute_structure, eval_loss, loss_gradient, unpack, FrameParams, LossOptions, ParamLayout,
    ParamVector, PreparedScene,
};
use crate::camera::{camera_frame, CameraParams};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SceneObservations};
use crate::math::{Scalar, Vec3, Vec3f};
use crate::mesh::{joints3d, mesh_vertices, BlendshapeModel, BodyParams};
use crate::scenegen::{sample_scene, GroundTruthScene, SceneSpec};
use crate::tape::{Tape, Var};

// ---------------------------------------------------------------------------
// Direct optimization
// ---------------------------------------------------------------------------

/// How the starting point of a fit is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    Random,
    #[default]
    Truth,
    /// Caller supplies the vector (e.g. loaded from a file).
    Provided,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Stepwise weight schedule: `(start_iteration, weights)`, first entry at 0.
    pub schedule: Vec<(usize, LossWeights)>,
    /// Segmentation mode and the other loss switches; the scheduled weights
    /// override `base.weights` per iteration.
    pub base: LossOptions,
    pub init: InitMode,
    /// Stop after `patience` consecutive steps whose loss decrease falls
    /// below this threshold.
    pub convergence_threshold: f64,
    pub patience: usize,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-2,
            iterations: 500,
            schedule: vec![(0, LossWeights::default())],
            base: LossOptions::default(),
            init: InitMode::Truth,
            convergence_threshold: 1e-12,
            patience: 20,
            divergence_limit: 1e12,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iteration budget must be positive"));
        }
        if self.schedule.is_empty() {
            return Err(Error::config("weight schedule must not be empty"));
        }
        Ok(())
    }

    fn options_at(&self, iteration: usize) -> LossOptions {
        let mut weights = self.schedule[0].1;
        for &(start, w) in &self.schedule {
            if start <= iteration {
                weights = w;
            }
        }
        LossOptions {
            weights,
            ..self.base
        }
    }
}

/// True geometry used for per-iteration metric tracking. All positions are
/// camera-frame (rotated and translated), so the global pose and the focal
/// versus depth ambiguity show up in the metrics, matching the evaluation
/// protocol the baselines are ranked by.
#[derive(Clone, Debug)]
pub struct TruthGeometry {
    pub vertices: Vec<Vec<Vec3f>>,
    pub joints: Vec<Vec<Vec3f>>,
}

impl TruthGeometry {
    pub fn from_scene(scene: &GroundTruthScene) -> TruthGeometry {
        TruthGeometry {
            vertices: scene
                .true_vertices
                .iter()
                .zip(&scene.truth)
                .map(|(v, fp)| camera_frame(v, &fp.cam))
                .collect(),
            joints: scene
                .true_joints
                .iter()
                .zip(&scene.truth)
                .map(|(j, fp)| camera_frame(j, &fp.cam))
                .collect(),
        }
    }
}

/// Surface, per-joint and reconstruction errors (mm), averaged over frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricRow {
    pub surface_mm: f64,
    pub per_joint_mm: f64,
    pub reconstruction_mm: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub final_params: ParamVector,
    pub loss_trajectory: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    pub wall_time: Duration,
    pub iterations_run: usize,
    pub stopped_by_convergence: bool,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_trajectory.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_metrics(&self) -> Option<MetricRow> {
        self.metrics.last().copied()
    }
}

/// Metrics of a parameter vector against true geometry, averaged over frames.
pub fn metrics_against_truth(
    model: &BlendshapeModel,
    pv: &ParamVector,
    truth: &TruthGeometry,
) -> Result<MetricRow> {
    let frames = unpack(pv)?;
    if frames.len() != truth.vertices.len() {
        return Err(Error::config("metric frame count mismatch"));
    }
    let mut row = MetricRow::default();
    for (f, fp) in frames.iter().enumerate() {
        let verts = camera_frame(&mesh_vertices(model, &fp.body)?, &fp.cam);
        let joints = joints3d(&verts, &model.joint_regressor)?;
        row.surface_mm += surface_error(&verts, &truth.vertices[f])?;
        row.per_joint_mm += per_joint_error(&joints, &truth.joints[f])?;
        row.reconstruction_mm += reconstruction_error(&joints, &truth.joints[f])?;
    }
    let n = frames.len() as f64;
    row.surface_mm /= n;
    row.per_joint_mm /= n;
    row.reconstruction_mm /= n;
    Ok(row)
}

/// Plain gradient descent on the total loss. Per step: recompute visibility
/// and assignments, take the analytic gradient, update `p <- p - lr * g`.
/// Stops at the budget or after `patience` consecutive steps with loss
/// decrease below the threshold. A non-finite or exploding loss aborts with
/// the last finite state.
pub fn fit_direct(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    init: &ParamVector,
    cfg: &FitConfig,
    truth: Option<&TruthGeometry>,
) -> Result<FitReport> {
    cfg.validate()?;
    unpack(init)?; // pre: finite, positive focal
    let start = Instant::now();
    let mut pv = init.clone();
    let mut trajectory = Vec::new();
    let mut metrics = Vec::new();
    let mut prev_loss = f64::INFINITY;
    let mut flat_steps = 0usize;
    let mut stopped = false;
    let mut iterations_run = 0usize;

    for it in 0..cfg.iterations {
        let opts = cfg.options_at(it);
        let step = loss_gradient(model, scene, &pv, &opts);
        let (terms, grad) = match step {
            Ok(ok) => ok,
            Err(e) if it == 0 => return Err(e),
            Err(_) => {
                return Err(Error::Divergence {
                    iteration: it,
                    loss: prev_loss,
                    last_params: pv.data,
                })
            }
        };
        if !terms.total.is_finite() || terms.total > cfg.divergence_limit {
            return Err(Error::Divergence {
                iteration: it,
                loss: terms.total,
                last_params: pv.data,
            });
        }
        trajectory.push(terms.total);
        if let Some(t) = truth {
            metrics.push(metrics_against_truth(model, &pv, t)?);
        }
        iterations_run = it + 1;

        let decrease = prev_loss - terms.total;
        if decrease < cfg.convergence_threshold {
            flat_steps += 1;
            if flat_steps >= cfg.patience {
                stopped = true;
                break;
            }
        } else {
            flat_steps = 0;
        }
        prev_loss = terms.total;

        for (p, g) in pv.data.iter_mut().zip(&grad.data) {
            *p -= cfg.learning_rate * g;
        }
    }

    Ok(FitReport {
        final_params: pv,
        loss_trajectory: trajectory,
        metrics,
        wall_time: start.elapsed(),
        iterations_run,
        stopped_by_convergence: stopped,
    })
}

/// Builds an initial parameter vector: `Truth` copies the ground truth,
/// `Random` draws from the sampling ranges of `spec` (same draw order as the
/// scene generator, seeded by `seed`).
pub fn initial_params(
    mode: InitMode,
    model: &BlendshapeModel,
    spec: &SceneSpec,
    truth: Option<&ParamVector>,
    frames: usize,
    shared_shape: bool,
    seed: u64,
) -> Result<ParamVector> {
    match mode {
        InitMode::Truth | InitMode::Provided => truth
            .cloned()
            .ok_or_else(|| Error::config("no parameter vector available for this init mode")),
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = ParamLayout::for_model(model, frames, shared_shape);
            let mut data = vec![0.0; layout.len()];
            fn uniform(rng: &mut ChaCha8Rng, c: f64, r: f64) -> f64 {
                c + (2.0 * rng.gen::<f64>() - 1.0) * r
            }
            for f in 0..frames {
                for i in layout.shape_range(f) {
                    data[i] = uniform(&mut rng, 0.0, spec.shape_range);
                }
                for i in layout.pose_range(f) {
                    data[i] = uniform(&mut rng, spec.pose_center, spec.pose_range);
                }
                let cam = layout.camera_range(f);
                for i in cam.start..cam.start + 3 {
                    data[i] = uniform(&mut rng, 0.0, spec.euler_range);
                }
                for i in cam.start + 3..cam.start + 5 {
                    data[i] = uniform(&mut rng, 0.0, spec.trans_range);
                }
                data[cam.start + 5] = spec.focal_range.0
                    + rng.gen::<f64>() * (spec.focal_range.1 - spec.focal_range.0);
            }
            Ok(ParamVector { layout, data })
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Mean Euclidean distance between corresponding joints, in millimeters.
pub fn per_joint_error(pred: &[Vec3f], gt: &[Vec3f]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::config(format!(
            "per-joint error needs equal nonempty sets, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (*p - *g).norm()).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Per-joint error up to a 3D translation. The translation is the closed-form
/// centroid alignment (exact for the squared objective); the identity
/// translation is also tried so the result never exceeds [`per_joint_error`].
/// Rotation is deliberately not compensated.
pub fn reconstruction_error(pred: &[Vec3f], gt: &[Vec3f]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::config(
            "reconstruction error needs equal nonempty sets",
        ));
    }
    let n = pred.len() as f64;
    let mut centroid_diff = Vec3f::ZERO;
    for (p, g) in pred.iter().zip(gt) {
        centroid_diff = centroid_diff + (*g - *p);
    }
    let t_centroid = centroid_diff.scale_c(1.0 / n);
    let value_at = |t: Vec3f| -> f64 {
        1000.0
            * pred
                .iter()
                .zip(gt)
                .map(|(p, g)| (*p + t - *g).norm())
                .sum::<f64>()
            / n
    };
    Ok(value_at(t_centroid).min(value_at(Vec3f::ZERO)))
}

/// Mean per-vertex distance in millimeters; correspondence by index.
pub fn surface_error(pred: &[Vec3f], gt: &[Vec3f]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::config(format!(
            "surface error needs identical topology, got {} vs {} vertices",
            pred.len(),
            gt.len()
        )));
    }
    per_joint_error(pred, gt)
}

// ---------------------------------------------------------------------------
// Observation features
// ---------------------------------------------------------------------------

/// Feature vector of one frame: normalized keypoint coordinates (absent ones
/// at the crop center), segmentation area fraction, centroid and second
/// central moments in normalized coordinates, and the mean flow over the
/// foreground (zero without a flow field).
pub fn frame_features(obs: &SceneObservations) -> Vec<f64> {
    let w = obs.geom.width as f64;
    let h = obs.geom.height as f64;
    let mut out = Vec::with_capacity(feature_dim(obs.keypoints2d.len()));
    for kp in &obs.keypoints2d {
        if kp.present {
            out.push(kp.pos[0] / w);
            out.push(kp.pos[1] / h);
        } else {
            out.push(0.5);
            out.push(0.5);
        }
    }
    let mask = &obs.segmentation;
    let fg = mask.foreground_count();
    let area = fg as f64 / (w * h);
    let (mut cx, mut cy) = (0.5, 0.5);
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    if fg > 0 {
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    sx += x as f64 / w;
                    sy += y as f64 / h;
                }
            }
        }
        cx = sx / fg as f64;
        cy = sy / fg as f64;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    let dx = x as f64 / w - cx;
                    let dy = y as f64 / h - cy;
                    mxx += dx * dx;
                    myy += dy * dy;
                    mxy += dx * dy;
                }
            }
        }
        mxx /= fg as f64;
        myy /= fg as f64;
        mxy /= fg as f64;
    }
    out.extend_from_slice(&[area, cx, cy, mxx, myy, mxy]);
    let (mut fu, mut fv) = (0.0, 0.0);
    if let Some(flow) = &obs.flow {
        if fg > 0 {
            for y in 0..mask.height {
                for x in 0..mask.width {
                    if mask.get(x, y) {
                        let f = flow.get(x, y);
                        fu += f[0] as f64 / w;
                        fv += f[1] as f64 / h;
                    }
                }
            }
            fu /= fg as f64;
            fv /= fg as f64;
        }
    }
    out.extend_from_slice(&[fu, fv]);
    out
}

pub fn feature_dim(keypoints: usize) -> usize {
    2 * keypoints + 8
}

/// Length of one frame's parameter block (the regression target).
pub fn frame_param_dim(model: &BlendshapeModel) -> usize {
    model.shape_dim() + 3 * model.joint_count + 6
}

fn frame_tail(fp: &FrameParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(fp.body.shape.len() + 3 * fp.body.pose.len() + 6);
    out.extend_from_slice(&fp.body.shape);
    for aa in &fp.body.pose {
        out.extend_from_slice(&[aa.x, aa.y, aa.z]);
    }
    out.extend_from_slice(&[
        fp.cam.euler.x,
        fp.cam.euler.y,
        fp.cam.euler.z,
        fp.cam.translation[0],
        fp.cam.translation[1],
        fp.cam.focal,
    ]);
    out
}

fn tail_to_frame<S: Scalar>(model: &BlendshapeModel, tail: &[S]) -> FrameParams<S> {
    let m = model.shape_dim();
    let j = model.joint_count;
    let shape = tail[..m].to_vec();
    let pose = tail[m..m + 3 * j]
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let cam = &tail[m + 3 * j..];
    FrameParams {
        body: BodyParams { shape, pose },
        cam: CameraParams {
            focal: cam[5],
            euler: Vec3::new(cam[0], cam[1], cam[2]),
            translation: [cam[3], cam[4]],
        },
    }
}

/// Synthetic supervised dataset: `(frame features, frame parameter block)`
/// pairs from single-frame scenes with seeds `seed0..seed0+count`.
pub fn build_dataset(
    model: &BlendshapeModel,
    base: &SceneSpec,
    count: usize,
    seed0: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec {
            seed: seed0 + i as u64,
            frames: 1,
            ..base.clone()
        };
        let scene = sample_scene(model, &spec)?;
        out.push((
            frame_features(&scene.observations[0]),
            frame_tail(&scene.truth[0]),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Toy regressor
// ---------------------------------------------------------------------------

/// One-hidden-layer affine regressor from an observation feature vector to a
/// per-frame parameter block. The hidden layer is linear, so the map is a
/// rank-factored affine function; features and targets are standardized
/// internally with statistics folded into the stored parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRegressor {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Row-major `hidden x input`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `output x hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub feat_mean: Vec<f64>,
    /// Reciprocal feature deviation; exactly zero for constant dimensions.
    pub feat_scale: Vec<f64>,
    pub targ_mean: Vec<f64>,
    pub targ_scale: Vec<f64>,
}

impl ToyRegressor {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden_dim * self.input_dim
            && self.b1.len() == self.hidden_dim
            && self.w2.len() == self.output_dim * self.hidden_dim
            && self.b2.len() == self.output_dim
            && self.feat_mean.len() == self.input_dim
            && self.feat_scale.len() == self.input_dim
            && self.targ_mean.len() == self.output_dim
            && self.targ_scale.len() == self.output_dim;
        if !ok {
            return Err(Error::config("regressor dimensions are inconsistent"));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("non-finite regressor weight"));
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        let xs: Vec<f64> = features
            .iter()
            .zip(&self.feat_mean)
            .zip(&self.feat_scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect();
        let mut hidden = self.b1.clone();
        for (r, hv) in hidden.iter_mut().enumerate() {
            for (c, x) in xs.iter().enumerate() {
                *hv += self.w1[r * self.input_dim + c] * x;
            }
        }
        let mut out = self.b2.clone();
        for (r, ov) in out.iter_mut().enumerate() {
            for (c, h) in hidden.iter().enumerate() {
                *ov += self.w2[r * self.hidden_dim + c] * h;
            }
        }
        out.iter()
            .zip(&self.targ_mean)
            .zip(&self.targ_scale)
            .map(|((y, m), s)| y * s + m)
            .collect()
    }

    /// Predicted per-frame parameters for every frame of a scene.
    pub fn predict(&self, model: &BlendshapeModel, scene: &PreparedScene) -> Vec<FrameParams> {
        scene
            .frames
            .iter()
            .map(|f| tail_to_frame(model, &self.forward(&frame_features(&f.obs))))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RegressorConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden_dim: 32,
            learning_rate: 1e-4,
            epochs: 200,
            holdout_fraction: 0.2,
        }
    }
}

/// Supervised pretraining: full-batch gradient descent on the mean squared
/// parameter error, in standardized feature/target space. The trailing
/// `holdout_fraction` of the dataset is held out and its raw-unit MSE
/// returned alongside the regressor.
pub fn pretrain_regressor(
    dataset: &[(Vec<f64>, Vec<f64>)],
    cfg: &RegressorConfig,
) -> Result<(ToyRegressor, f64)> {
    if dataset.len() < 100 {
        return Err(Error::config(format!(
            "pretraining needs at least 100 pairs, got {}",
            dataset.len()
        )));
    }
    let input_dim = dataset[0].0.len();
    let output_dim = dataset[0].1.len();
    for (f, t) in dataset {
        if f.len() != input_dim || t.len() != output_dim {
            return Err(Error::config("ragged dataset"));
        }
    }
    let holdout = ((dataset.len() as f64 * cfg.holdout_fraction) as usize).min(dataset.len() - 1);
    let train = &dataset[..dataset.len() - holdout];
    let held = &dataset[dataset.len() - holdout..];

    let stats = |dim: usize, pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in train {
            for (m, v) in mean.iter_mut().zip(pick(row)) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for row in train {
            for ((s, v), m) in std.iter_mut().zip(pick(row)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
        (mean, std)
    };
    let (feat_mean, feat_std) = stats(input_dim, &|r| &r.0);
    let (targ_mean, targ_std) = stats(output_dim, &|r| &r.1);
    if feat_std.iter().all(|&s| s < 1e-12) {
        return Err(Error::config("degenerate dataset: all features constant"));
    }
    let feat_scale: Vec<f64> = feat_std
        .iter()
        .map(|&s| if s < 1e-12 { 0.0 } else { 1.0 / s })
        .collect();
    let targ_scale: Vec<f64> = targ_std.iter().map(|&s| s.max(1e-12)).collect();

    let hidden = cfg.hidden_dim;
    let mut reg = ToyRegressor {
        input_dim,
        hidden_dim: hidden,
        output_dim,
        w1: vec![0.0; hidden * input_dim],
        b1: vec![0.0; hidden],
        w2: vec![0.0; output_dim * hidden],
        b2: vec![0.0; output_dim],
        feat_mean,
        feat_scale,
        targ_mean,
        targ_scale,
    };
    // Partial-identity factors keep the initial map full-rank so gradient
    // descent does not stall at the zero saddle.
    for r in 0..hidden.min(input_dim) {
        reg.w1[r * input_dim + r] = 1.0;
    }
    for r in 0..output_dim.min(hidden) {
        reg.w2[r * hidden + r] = 1.0;
    }

    // Standardize once.
    let xs: Vec<Vec<f64>> = train
        .iter()
        .map(|(f, _)| {
            f.iter()
                .zip(&reg.feat_mean)
                .zip(&reg.feat_scale)
                .map(|((x, m), s)| (x - m) * s)
                .collect()
        })
        .collect();
    let ts: Vec<Vec<f64>> = train
        .iter()
        .map(|(_, t)| {
            t.iter()
                .zip(&reg.targ_mean)
                .zip(&reg.targ_scale)
                .map(|((y, m), s)| (y - m) / s)
                .collect()
        })
        .collect();

    let n = train.len() as f64;
    let mut hidden_buf = vec![0.0; hidden];
    let mut err_buf = vec![0.0; output_dim];
    for _ in 0..cfg.epochs {
        let mut gw1 = vec![0.0; reg.w1.len()];
        let mut gb1 = vec![0.0; hidden];
        let mut gw2 = vec![0.0; reg.w2.len()];
        let mut gb2 = vec![0.0; output_dim];
        for (x, t) in xs.iter().zip(&ts) {
            for (r, hv) in hidden_buf.iter_mut().enumerate() {
                let mut acc = reg.b1[r];
                for (c, xv) in x.iter().enumerate() {
                    acc += reg.w1[r * input_dim + c] * xv;
                }
                *hv = acc;
            }
            for (r, ev) in err_buf.iter_mut().enumerate() {
                let mut acc = reg.b2[r];
                for (c, hv) in hidden_buf.iter().enumerate() {
                    acc += reg.w2[r * hidden + c] * hv;
                }
                *ev = acc - t[r];
            }
            // dL/dy = 2 err / (n * output_dim)
            let scale = 2.0 / (n * output_dim as f64);
            for (r, ev) in err_buf.iter().enumerate() {
                let e = ev * scale;
                gb2[r] += e;
                for (c, hv) in hidden_buf.iter().enumerate() {
                    gw2[r * hidden + c] += e * hv;
                }
            }
            for c in 0..hidden {
                let mut back = 0.0;
                for (r, ev) in err_buf.iter().enumerate() {
                    back += reg.w2[r * hidden + c] * ev * scale;
                }
                gb1[c] += back;
                for (k, xv) in x.iter().enumerate() {
                    gw1[c * input_dim + k] += back * xv;
                }
            }
        }
        let lr = cfg.learning_rate;
        for (w, g) in reg.w1.iter_mut().zip(&gw1) {
            *w -= lr * g;
        }
        for (w, g) in reg.b1.iter_mut().zip(&gb1) {
            *w -= lr * g;
        }
        for (w, g) in reg.w2.iter_mut().zip(&gw2) {
            *w -= lr * g;
        }
        for (w, g) in reg.b2.iter_mut().zip(&gb2) {
            *w -= lr * g;
        }
    }

    let mse = if held.is_empty() {
        0.0
    } else {
        let mut acc = 0.0;
        for (f, t) in held {
            let y = reg.forward(f);
            acc += y
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / output_dim as f64;
        }
        acc / held.len() as f64
    };
    reg.validate()?;
    Ok((reg, mse))
}

// ---------------------------------------------------------------------------
// Self-supervised finetuning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub options: LossOptions,
    /// Abort when a prediction drives the focal length below this.
    pub min_focal: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-4,
            steps: 100,
            options: LossOptions::default(),
            min_focal: 1.0,
        }
    }
}

struct RegressorVars<'t> {
    w1: Vec<Var<'t>>,
    b1: Vec<Var<'t>>,
    w2: Vec<Var<'t>>,
    b2: Vec<Var<'t>>,
}

impl<'t> RegressorVars<'t> {
    fn register(tape: &'t Tape, reg: &ToyRegressor) -> RegressorVars<'t> {
        RegressorVars {
            w1: reg.w1.iter().map(|&v| tape.var(v)).collect(),
            b1: reg.b1.iter().map(|&v| tape.var(v)).collect(),
            w2: reg.w2.iter().map(|&v| tape.var(v)).collect(),
            b2: reg.b2.iter().map(|&v| tape.var(v)).collect(),
        }
    }

    fn forward(&self, reg: &ToyRegressor, features: &[f64]) -> Vec<Var<'t>> {
        let xs: Vec<f64> = features
            .iter()
            .zip(&reg.feat_mean)
            .zip(&reg.feat_scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect();
        let mut hidden = Vec::with_capacity(reg.hidden_dim);
        for r in 0..reg.hidden_dim {
            let mut acc = self.b1[r];
            for (c, &x) in xs.iter().enumerate() {
                if x != 0.0 {
                    acc = acc + self.w1[r * reg.input_dim + c].mulc(x);
                }
            }
            hidden.push(acc);
        }
        let mut out = Vec::with_capacity(reg.output_dim);
        for r in 0..reg.output_dim {
            let mut acc = self.b2[r];
            for (c, &h) in hidden.iter().enumerate() {
                acc = acc + self.w2[r * reg.hidden_dim + c] * h;
            }
            out.push(acc.mulc(reg.targ_scale[r]).addc(reg.targ_mean[r]));
        }
        out
    }
}

/// Self-supervised finetuning: gradient descent on the mean total loss over
/// unlabeled scenes, gradients flowing through the regressor's outputs into
/// its weights. Labels are never touched; zero steps returns the regressor
/// unchanged bit-for-bit.
pub fn selfsup_finetune(
    regressor: &ToyRegressor,
    model: &BlendshapeModel,
    scenes: &[PreparedScene],
    cfg: &FinetuneConfig,
) -> Result<ToyRegressor> {
    regressor.validate()?;
    if scenes.is_empty() {
        return Err(Error::config("finetuning needs at least one scene"));
    }
    let mut reg = regressor.clone();
    for step in 0..cfg.steps {
        // Frozen structures from the current predictions.
        let mut structures = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let frames = reg.predict(model, scene);
            for fp in &frames {
                if !(fp.cam.focal.is_finite() && fp.cam.focal >= cfg.min_focal) {
                    return Err(Error::Divergence {
                        iteration: step,
                        loss: f64::NAN,
                        last_params: Vec::new(),
                    });
                }
            }
            structures.push(compute_structure(model, scene, &frames, &cfg.options)?);
        }

        let tape = Tape::with_capacity(1 << 18);
        let vars = RegressorVars::register(&tape, &reg);
        let mut total: Option<Var> = None;
        for (scene, structure) in scenes.iter().zip(&structures) {
            let frames: Vec<FrameParams<Var>> = scene
                .frames
                .iter()
                .map(|f| tail_to_frame(model, &vars.forward(&reg, &frame_features(&f.obs))))
                .collect();
            let terms = eval_loss(model, scene, &frames, structure, &cfg.options)?;
            total = Some(match total {
                None => terms.total,
                Some(t) => t + terms.total,
            });
        }
        let total = total
            .expect("nonempty scenes")
            .mulc(1.0 / scenes.len() as f64);
        if !total.val().is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                loss: total.val(),
                last_params: Vec::new(),
            });
        }
        let grads = total.backward();
        let lr = cfg.learning_rate;
        for (w, v) in reg.w1.iter_mut().zip(&vars.w1) {
            *w -= lr * grads.wrt(*v);
        }
        for (w, v) in reg.b1.iter_mut().zip(&vars.b1) {
            *w -= lr * grads.wrt(*v);
        }
        for (w, v) in reg.w2.iter_mut().zip(&vars.w2) {
            *w -= lr * grads.wrt(*v);
        }
        for (w, v) in reg.b2.iter_mut().zip(&vars.b2) {
            *w -= lr * grads.wrt(*v);
        }
    }
    Ok(reg)
}

/// Mean surface error (mm) of the regressor's predictions over a scene set,
/// evaluated against the generating ground truth.
pub fn regressor_surface_error(
    regressor: &ToyRegressor,
    model: &BlendshapeModel,
    scenes: &[(PreparedScene, TruthGeometry)],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (scene, truth) in scenes {
        let frames = regressor.predict(model, scene);
        for (f, fp) in frames.iter().enumerate() {
            let verts = camera_frame(&mesh_vertices(model, &fp.body)?, &fp.cam);
            acc += surface_error(&verts, &truth.vertices[f])?;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
