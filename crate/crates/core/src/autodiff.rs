//! Parameter flattening, analytic gradients of the total loss, and the
//! finite-difference oracle that certifies them.
//!
//! A flat parameter vector covers, per frame, `[shape (M), pose (3J), alpha,
//! beta, gamma, T_x, T_y, f]`; multi-frame scenes may share the shape block
//! across frames (a person's shape is constant), in which case the layout is
//! `[shape][frame 0 tail][frame 1 tail]...` with tail length `3J + 6`.
//!
//! Every evaluation freezes its nondifferentiable choices first — visibility
//! masks, out-of-frame drops, nearest-neighbor assignments, near-threshold
//! bits — in a [`LossStructure`]. The analytic gradient and every
//! finite-difference probe evaluate the same pinned, piecewise-smooth
//! function, so central differences certify the chain rule directly.

use std::ops::Range;

use crate::camera::{camera_frame, project, project_camera_frame, CameraParams, ImageGeometry};
use crate::error::{Error, Result};
use crate::losses::{
    bilinear_sample, image_chamfer, keypoint_loss, model_chamfer_frozen, model_chamfer_near,
    model_distance_argmin, model_distance_map_frozen, motion_effective_mask, motion_loss_masked,
    seg_loss, seg_proj_assign, seg_proj_loss_frozen, LossWeights, MaskGrid, SceneObservations,
    SegMode, SegProjAssign,
};
use crate::math::{Scalar, Vec3};
use crate::mesh::{joints3d, mesh_vertices, BlendshapeModel, BodyParams};
use crate::tape::{Tape, Var};
use crate::visibility::{compute_visibility, VisibilityMask};

/// Default central-difference step; angles and meters are treated equally.
pub const FD_STEP: f64 = 1e-5;

/// Documented flat layout of the optimizable unknowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub shape_dim: usize,
    pub joint_count: usize,
    pub frames: usize,
    pub shared_shape: bool,
}

impl ParamLayout {
    pub fn new(shape_dim: usize, joint_count: usize, frames: usize, shared_shape: bool) -> Self {
        ParamLayout {
            shape_dim,
            joint_count,
            frames,
            shared_shape,
        }
    }

    pub fn for_model(model: &BlendshapeModel, frames: usize, shared_shape: bool) -> Self {
        Self::new(model.shape_dim(), model.joint_count, frames, shared_shape)
    }

    /// Pose plus camera entries of one frame.
    pub fn tail_len(&self) -> usize {
        3 * self.joint_count + 6
    }

    pub fn len(&self) -> usize {
        if self.shared_shape {
            self.shape_dim + self.frames * self.tail_len()
        } else {
            self.frames * (self.shape_dim + self.tail_len())
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_range(&self, frame: usize) -> Range<usize> {
        if self.shared_shape {
            0..self.shape_dim
        } else {
            let base = frame * (self.shape_dim + self.tail_len());
            base..base + self.shape_dim
        }
    }

    fn tail_start(&self, frame: usize) -> usize {
        if self.shared_shape {
            self.shape_dim + frame * self.tail_len()
        } else {
            frame * (self.shape_dim + self.tail_len()) + self.shape_dim
        }
    }

    pub fn pose_range(&self, frame: usize) -> Range<usize> {
        let s = self.tail_start(frame);
        s..s + 3 * self.joint_count
    }

    /// Camera block `[alpha, beta, gamma, T_x, T_y, f]`.
    pub fn camera_range(&self, frame: usize) -> Range<usize> {
        let s = self.tail_start(frame) + 3 * self.joint_count;
        s..s + 6
    }

    /// Named parameter blocks for reporting, in layout order.
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        if self.shared_shape {
            out.push(("shape".to_string(), self.shape_range(0)));
        }
        for f in 0..self.frames {
            if !self.shared_shape {
                out.push((format!("f{f}.shape"), self.shape_range(f)));
            }
            out.push((format!("f{f}.pose"), self.pose_range(f)));
            let cam = self.camera_range(f);
            out.push((format!("f{f}.euler"), cam.start..cam.start + 3));
            out.push((format!("f{f}.trans"), cam.start + 3..cam.start + 5));
            out.push((format!("f{f}.focal"), cam.start + 5..cam.end));
        }
        out
    }
}

/// Flattened parameters in the documented layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

/// Gradient of the total loss, same layout as [`ParamVector`].
pub type GradVector = ParamVector;

/// Per-frame unknowns in structured form.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameParams<S = f64> {
    pub body: BodyParams<S>,
    pub cam: CameraParams<S>,
}

/// Flattens per-frame parameters. With `shared_shape`, all frames must carry
/// identical shape coefficients.
pub fn pack(frames: &[FrameParams], shared_shape: bool) -> Result<ParamVector> {
    if frames.is_empty() {
        return Err(Error::config("pack of zero frames"));
    }
    let m = frames[0].body.shape.len();
    let j = frames[0].body.pose.len();
    for (i, fp) in frames.iter().enumerate() {
        if fp.body.shape.len() != m || fp.body.pose.len() != j {
            return Err(Error::config(format!("frame {i} disagrees on dimensions")));
        }
        if shared_shape && fp.body.shape != frames[0].body.shape {
            return Err(Error::config(
                "shared-shape layout requires identical shape coefficients per frame",
            ));
        }
    }
    let layout = ParamLayout::new(m, j, frames.len(), shared_shape);
    let mut data = Vec::with_capacity(layout.len());
    if shared_shape {
        data.extend_from_slice(&frames[0].body.shape);
    }
    for fp in frames {
        if !shared_shape {
            data.extend_from_slice(&fp.body.shape);
        }
        for aa in &fp.body.pose {
            data.extend_from_slice(&[aa.x, aa.y, aa.z]);
        }
        data.extend_from_slice(&[
            fp.cam.euler.x,
            fp.cam.euler.y,
            fp.cam.euler.z,
            fp.cam.translation[0],
            fp.cam.translation[1],
            fp.cam.focal,
        ]);
    }
    Ok(ParamVector { layout, data })
}

fn unpack_slice<S: Scalar>(layout: &ParamLayout, data: &[S]) -> Vec<FrameParams<S>> {
    let mut out = Vec::with_capacity(layout.frames);
    for f in 0..layout.frames {
        let shape = data[layout.shape_range(f)].to_vec();
        let pose = data[layout.pose_range(f)]
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        let cam = &data[layout.camera_range(f)];
        out.push(FrameParams {
            body: BodyParams { shape, pose },
            cam: CameraParams {
                focal: cam[5],
                euler: Vec3::new(cam[0], cam[1], cam[2]),
                translation: [cam[3], cam[4]],
            },
        });
    }
    out
}

/// Structured view of a parameter vector; enforces finiteness and a positive
/// focal length.
pub fn unpack(pv: &ParamVector) -> Result<Vec<FrameParams>> {
    if pv.data.len() != pv.layout.len() {
        return Err(Error::config(format!(
            "parameter vector carries {} entries, layout expects {}",
            pv.data.len(),
            pv.layout.len()
        )));
    }
    for &v in &pv.data {
        if !v.is_finite() {
            return Err(Error::config("non-finite parameter entry"));
        }
    }
    let frames = unpack_slice(&pv.layout, &pv.data);
    for (f, fp) in frames.iter().enumerate() {
        if fp.cam.focal <= 0.0 {
            return Err(Error::config(format!(
                "frame {f}: focal length must be positive, got {}",
                fp.cam.focal
            )));
        }
    }
    Ok(frames)
}

/// Registers one tape leaf per layout entry (in layout order) and returns the
/// structured view over them. Shared shape coefficients reuse the same leaves
/// across frames, so their adjoints accumulate.
pub fn unpack_vars<'t>(
    tape: &'t Tape,
    pv: &ParamVector,
) -> Result<(Vec<Var<'t>>, Vec<FrameParams<Var<'t>>>)> {
    unpack(pv)?; // validation on values
    let leaves: Vec<Var<'t>> = pv.data.iter().map(|&v| tape.var(v)).collect();
    let frames = unpack_slice(&pv.layout, &leaves);
    Ok((leaves, frames))
}

// ---------------------------------------------------------------------------
// Scenes prepared for loss evaluation
// ---------------------------------------------------------------------------

/// Observations of one scene (1 or 2 frames) plus derived segmentation data
/// that is constant with respect to the parameters.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub frames: Vec<PreparedFrame>,
    pub geom: ImageGeometry,
}

#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub obs: SceneObservations,
    /// Half-resolution mask, its exact Chamfer map and its foreground pixel
    /// centers (coordinates in half-resolution units).
    pub half_mask: MaskGrid,
    pub half_chamfer: Option<Vec<f64>>,
    pub fg_half: Vec<[f64; 2]>,
}

impl PreparedScene {
    pub fn new(frames: Vec<SceneObservations>) -> Result<PreparedScene> {
        if frames.is_empty() || frames.len() > 2 {
            return Err(Error::config(format!(
                "scenes carry 1 or 2 frames, got {}",
                frames.len()
            )));
        }
        let geom = frames[0].geom;
        let mut prepared = Vec::with_capacity(frames.len());
        for (i, obs) in frames.into_iter().enumerate() {
            obs.validate()?;
            if obs.geom != geom {
                return Err(Error::config(format!(
                    "frame {i} geometry disagrees with frame 0"
                )));
            }
            let half_mask = obs.segmentation.downsample_half();
            let half_chamfer = if half_mask.foreground_count() > 0 {
                Some(image_chamfer(&half_mask)?)
            } else {
                None
            };
            let fg_half = half_mask.foreground_pixels();
            prepared.push(PreparedFrame {
                obs,
                half_mask,
                half_chamfer,
                fg_half,
            });
        }
        Ok(PreparedScene {
            frames: prepared,
            geom,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// True when the scene carries a frame pair with a flow field.
    pub fn has_motion_pair(&self) -> bool {
        self.frames.len() == 2 && self.frames[0].obs.flow.is_some()
    }
}

// ---------------------------------------------------------------------------
// Loss configuration and frozen structure
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub seg_mode: SegMode,
    /// Divide the keypoint loss by the number of present keypoints.
    pub kpt_mean: bool,
    /// Freeze the bilinear sample location of the motion loss (gradients then
    /// flow only through the predicted displacement).
    pub freeze_flow_sample_point: bool,
}

impl LossOptions {
    pub fn with_weights(weights: LossWeights) -> LossOptions {
        LossOptions {
            weights,
            ..LossOptions::default()
        }
    }
}

/// Nondifferentiable choices pinned for one evaluation.
#[derive(Clone, Debug)]
pub struct LossStructure {
    pub frames: Vec<FrameStructure>,
}

#[derive(Clone, Debug)]
pub struct FrameStructure {
    pub vis: VisibilityMask,
    /// Visibility combined with the out-of-frame drop for the motion loss
    /// (frame 0 of a pair only; empty otherwise).
    pub motion_mask: Vec<bool>,
    pub motion_dropped: usize,
    /// Indices of visible vertices, the point set of the segmentation losses.
    pub visible_ids: Vec<u32>,
    pub seg_assign: Option<SegProjAssign>,
    pub dmap_argmin: Option<Vec<u32>>,
    pub dmap_near: Option<Vec<bool>>,
}

/// Derives the frozen structure from the parameter values: ray-cast
/// visibility per frame, the motion drop mask, and the active segmentation
/// assignments.
pub fn compute_structure(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    frames: &[FrameParams],
    opts: &LossOptions,
) -> Result<LossStructure> {
    if frames.len() != scene.frame_count() {
        return Err(Error::config(format!(
            "{} parameter frames for a {}-frame scene",
            frames.len(),
            scene.frame_count()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut projections = Vec::with_capacity(frames.len());
    for fp in frames {
        let verts = mesh_vertices(model, &fp.body)?;
        let cf = camera_frame(&verts, &fp.cam);
        let vis = compute_visibility(&cf, &model.facets)?;
        let proj = project_camera_frame(&cf, fp.cam.focal, &scene.geom)?;
        let visible_ids: Vec<u32> = vis
            .vertices
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| i as u32)
            .collect();
        projections.push(proj);
        out.push(FrameStructure {
            vis,
            motion_mask: Vec::new(),
            motion_dropped: 0,
            visible_ids,
            seg_assign: None,
            dmap_argmin: None,
            dmap_near: None,
        });
    }

    if opts.weights.motion > 0.0 && scene.has_motion_pair() {
        let (mask, dropped) =
            motion_effective_mask(&projections[0], &out[0].vis.vertices, &scene.geom);
        out[0].motion_mask = mask;
        out[0].motion_dropped = dropped;
    }

    if opts.weights.seg > 0.0 {
        let half = scene.geom.half();
        for (f, frame) in scene.frames.iter().enumerate() {
            let points: Vec<[f64; 2]> = out[f]
                .visible_ids
                .iter()
                .map(|&i| {
                    let p = projections[f][i as usize];
                    [p[0] * 0.5, p[1] * 0.5]
                })
                .collect();
            match opts.seg_mode {
                SegMode::Projected => {
                    out[f].seg_assign = Some(seg_proj_assign(&points, &frame.fg_half)?);
                }
                SegMode::Chamfer => {
                    let argmin = model_distance_argmin(&points, half.width, half.height)?;
                    let dist = model_distance_map_frozen(&points, &argmin, half.width, half.height);
                    out[f].dmap_near = Some(model_chamfer_near(&dist));
                    out[f].dmap_argmin = Some(argmin);
                }
            }
        }
    }

    Ok(LossStructure { frames: out })
}

/// Weighted loss terms of one evaluation. The individual terms are
/// unweighted; `total` carries the lambda weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<S> {
    pub kpt: S,
    pub motion: S,
    pub seg: S,
    pub total: S,
    pub motion_all_invisible: bool,
}

impl LossTerms<f64> {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Evaluates the lambda-weighted total loss with a pinned structure. Works on
/// plain values and on tape variables alike.
pub fn eval_loss<S: Scalar>(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    frames: &[FrameParams<S>],
    structure: &LossStructure,
    opts: &LossOptions,
) -> Result<LossTerms<S>> {
    if frames.len() != scene.frame_count() || structure.frames.len() != frames.len() {
        return Err(Error::config("loss evaluation dimension mismatch"));
    }
    let ctx = frames[0].cam.focal;
    let zero = ctx.lift(0.0);
    let mut kpt = zero;
    let mut seg = zero;
    let mut motion = zero;
    let mut motion_all_invisible = false;

    let mut projections: Vec<Vec<[S; 2]>> = Vec::with_capacity(frames.len());
    for (f, fp) in frames.iter().enumerate() {
        let verts = mesh_vertices(model, &fp.body)?;
        let proj = project(&verts, &fp.cam, &scene.geom)?;

        if opts.weights.kpt > 0.0 {
            let joints = joints3d(&verts, &model.joint_regressor)?;
            let pred = project(&joints, &fp.cam, &scene.geom)?;
            kpt = kpt + keypoint_loss(&pred, &scene.frames[f].obs.keypoints2d, opts.kpt_mean)?;
        }

        if opts.weights.seg > 0.0 {
            let st = &structure.frames[f];
            let points: Vec<[S; 2]> = st
                .visible_ids
                .iter()
                .map(|&i| [proj[i as usize][0].mulc(0.5), proj[i as usize][1].mulc(0.5)])
                .collect();
            let frame = &scene.frames[f];
            match opts.seg_mode {
                SegMode::Projected => {
                    let assign = st
                        .seg_assign
                        .as_ref()
                        .ok_or_else(|| Error::config("missing segmentation assignment"))?;
                    seg = seg + seg_proj_loss_frozen(&points, &frame.fg_half, assign)?;
                }
                SegMode::Chamfer => {
                    let half = scene.geom.half();
                    let argmin = st
                        .dmap_argmin
                        .as_ref()
                        .ok_or_else(|| Error::config("missing distance-map argmin"))?;
                    let near = st
                        .dmap_near
                        .as_ref()
                        .ok_or_else(|| Error::config("missing near-threshold bits"))?;
                    let dist = model_distance_map_frozen(&points, argmin, half.width, half.height);
                    let (cm, sm) = model_chamfer_frozen(&dist, near);
                    let ci = frame
                        .half_chamfer
                        .as_ref()
                        .ok_or(Error::EmptyObservation("empty segmentation mask"))?;
                    seg = seg + seg_loss(&sm, ci, &frame.half_mask.data, &cm)?;
                }
            }
        }

        projections.push(proj);
    }

    if opts.weights.motion > 0.0 && scene.has_motion_pair() {
        let flow = scene.frames[0].obs.flow.as_ref().expect("checked above");
        let (m, diag) = motion_loss_masked(
            &projections[0],
            &projections[1],
            flow,
            &structure.frames[0].motion_mask,
            opts.freeze_flow_sample_point,
        )?;
        motion = m;
        motion_all_invisible = diag.all_invisible;
    }

    let total =
        kpt.mulc(opts.weights.kpt) + motion.mulc(opts.weights.motion) + seg.mulc(opts.weights.seg);
    Ok(LossTerms {
        kpt,
        motion,
        seg,
        total,
        motion_all_invisible,
    })
}

/// Total loss at a parameter vector: freeze structure, then evaluate.
pub fn total_loss(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    opts: &LossOptions,
) -> Result<LossTerms<f64>> {
    let frames = unpack(pv)?;
    let structure = compute_structure(model, scene, &frames, opts)?;
    eval_loss(model, scene, &frames, &structure, opts)
}

/// Analytic gradient via the reverse-mode tape, with structure frozen at the
/// evaluation point.
pub fn loss_gradient(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    opts: &LossOptions,
) -> Result<(LossTerms<f64>, GradVector)> {
    let frames = unpack(pv)?;
    let structure = compute_structure(model, scene, &frames, opts)?;
    loss_gradient_with_structure(model, scene, pv, &structure, opts)
}

/// Gradient against an externally pinned structure.
pub fn loss_gradient_with_structure(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    structure: &LossStructure,
    opts: &LossOptions,
) -> Result<(LossTerms<f64>, GradVector)> {
    let tape = Tape::with_capacity(1 << 16);
    let (leaves, var_frames) = unpack_vars(&tape, pv)?;
    let terms = eval_loss(model, scene, &var_frames, structure, opts)?;
    let grads = terms.total.backward();
    let data: Vec<f64> = leaves.iter().map(|&l| grads.wrt(l)).collect();
    Ok((
        LossTerms {
            kpt: terms.kpt.val(),
            motion: terms.motion.val(),
            seg: terms.seg.val(),
            total: terms.total.val(),
            motion_all_invisible: terms.motion_all_invisible,
        },
        GradVector {
            layout: pv.layout,
            data,
        },
    ))
}

/// Central differences of an arbitrary scalar function of a flat vector.
pub fn finite_diff_fn<F>(mut f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut probe = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let hi = f(&probe)?;
        probe[i] = at[i] - h;
        let lo = f(&probe)?;
        probe[i] = at[i];
        out.push((hi - lo) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences of the total loss, with visibility and all assignments
/// frozen to their values at `pv` for every probe.
pub fn finite_diff(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    opts: &LossOptions,
    h: f64,
) -> Result<GradVector> {
    let frames = unpack(pv)?;
    let structure = compute_structure(model, scene, &frames, opts)?;
    let layout = pv.layout;
    let data = finite_diff_fn(
        |probe| {
            let fp = unpack_slice(&layout, probe);
            Ok(eval_loss(model, scene, &fp, &structure, opts)?.total)
        },
        &pv.data,
        h,
    )?;
    Ok(GradVector { layout, data })
}

// ---------------------------------------------------------------------------
// Switching-surface margins for gradient certification
// ---------------------------------------------------------------------------

/// Distances of the current evaluation point to the nondifferentiable
/// switching surfaces that finite-difference probes could cross.
#[derive(Clone, Copy, Debug)]
pub struct SwitchingMargins {
    /// Bilinear sampling locations to the nearest cell boundary (pixels).
    pub bilinear_cell: f64,
    /// Motion L1 terms to their sign change (pixels).
    pub l1_sign: f64,
    /// Distance-map values to the 0.5 threshold (Chamfer mode).
    pub chamfer_threshold: f64,
    /// Smallest distance-map value (the sqrt kink at zero, Chamfer mode).
    pub dmap_zero: f64,
}

/// Probe-safety thresholds: a draw closer than this to any switching surface
/// is resampled before gradient certification. Sized for [`FD_STEP`] probes
/// with pixel sensitivities up to a few hundred pixels per parameter unit.
#[derive(Clone, Copy, Debug)]
pub struct MarginThresholds {
    pub bilinear_cell: f64,
    pub l1_sign: f64,
    pub chamfer_threshold: f64,
    pub dmap_zero: f64,
}

impl Default for MarginThresholds {
    fn default() -> Self {
        MarginThresholds {
            bilinear_cell: 5e-3,
            l1_sign: 1e-2,
            chamfer_threshold: 5e-3,
            dmap_zero: 5e-2,
        }
    }
}

impl SwitchingMargins {
    pub fn clears(&self, thr: &MarginThresholds) -> bool {
        self.bilinear_cell >= thr.bilinear_cell
            && self.l1_sign >= thr.l1_sign
            && self.chamfer_threshold >= thr.chamfer_threshold
            && self.dmap_zero >= thr.dmap_zero
    }
}

fn boundary_distance(raw: f64, max: f64) -> f64 {
    if raw < 0.0 {
        -raw
    } else if raw > max {
        raw - max
    } else {
        let frac = raw - raw.floor();
        frac.min(1.0 - frac)
    }
}

/// Measures all switching margins at `pv` under the active losses.
pub fn switching_margins(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    opts: &LossOptions,
) -> Result<SwitchingMargins> {
    let frames = unpack(pv)?;
    let structure = compute_structure(model, scene, &frames, opts)?;
    let mut margins = SwitchingMargins {
        bilinear_cell: f64::INFINITY,
        l1_sign: f64::INFINITY,
        chamfer_threshold: f64::INFINITY,
        dmap_zero: f64::INFINITY,
    };

    let mut projections = Vec::with_capacity(frames.len());
    for fp in &frames {
        let verts = mesh_vertices(model, &fp.body)?;
        projections.push(project(&verts, &fp.cam, &scene.geom)?);
    }

    if opts.weights.motion > 0.0 && scene.has_motion_pair() {
        let flow = scene.frames[0].obs.flow.as_ref().expect("checked");
        let (wm1, hm1) = ((flow.width - 1) as f64, (flow.height - 1) as f64);
        for (i, active) in structure.frames[0].motion_mask.iter().enumerate() {
            if !active {
                continue;
            }
            let p1 = projections[0][i];
            let p2 = projections[1][i];
            margins.bilinear_cell = margins
                .bilinear_cell
                .min(boundary_distance(p1[0], wm1))
                .min(boundary_distance(p1[1], hm1));
            let s = bilinear_sample(flow, p1[0], p1[1]);
            margins.l1_sign = margins
                .l1_sign
                .min((p2[0] - p1[0] - s[0]).abs())
                .min((p2[1] - p1[1] - s[1]).abs());
        }
    }

    if opts.weights.seg > 0.0 && opts.seg_mode == SegMode::Chamfer {
        let half = scene.geom.half();
        for (f, st) in structure.frames.iter().enumerate() {
            let points: Vec<[f64; 2]> = st
                .visible_ids
                .iter()
                .map(|&i| {
                    let p = projections[f][i as usize];
                    [p[0] * 0.5, p[1] * 0.5]
                })
                .collect();
            if let Some(argmin) = &st.dmap_argmin {
                let dist = model_distance_map_frozen(&points, argmin, half.width, half.height);
                for d in dist {
                    margins.chamfer_threshold = margins.chamfer_threshold.min((d - 0.5).abs());
                    margins.dmap_zero = margins.dmap_zero.min(d);
                }
            }
        }
    }

    Ok(margins)
}

// ---------------------------------------------------------------------------
// Gradient certification
// ---------------------------------------------------------------------------

/// Worst relative error between analytic and finite-difference gradients for
/// one named parameter block.
#[derive(Clone, Debug)]
pub struct BlockError {
    pub name: String,
    pub rel_error: f64,
    pub analytic_inf_norm: f64,
    pub fd_inf_norm: f64,
}

/// Per-block relative errors: infinity-norm of the difference over the
/// infinity-norm of the larger side (floored at 1e-6 so absent blocks compare
/// as zero).
pub fn compare_gradients(analytic: &GradVector, fd: &GradVector) -> Result<Vec<BlockError>> {
    if analytic.layout != fd.layout {
        return Err(Error::config("gradient layouts disagree"));
    }
    let mut out = Vec::new();
    for (name, range) in analytic.layout.blocks() {
        let mut diff: f64 = 0.0;
        let mut na: f64 = 0.0;
        let mut nf: f64 = 0.0;
        for i in range {
            diff = diff.max((analytic.data[i] - fd.data[i]).abs());
            na = na.max(analytic.data[i].abs());
            nf = nf.max(fd.data[i].abs());
        }
        out.push(BlockError {
            name,
            rel_error: diff / na.max(nf).max(1e-6),
            analytic_inf_norm: na,
            fd_inf_norm: nf,
        });
    }
    Ok(out)
}

/// Outcome of certifying one scene/parameter draw.
#[derive(Clone, Debug)]
pub enum GradCheckOutcome {
    /// Draw was too close to a switching surface; caller should resample.
    Resample(SwitchingMargins),
    /// Per-block comparison results.
    Checked(Vec<BlockError>),
}

/// Certifies one draw: rejects boundary draws, otherwise compares the
/// analytic gradient against central differences.
pub fn gradcheck_scene(
    model: &BlendshapeModel,
    scene: &PreparedScene,
    pv: &ParamVector,
    opts: &LossOptions,
    thresholds: &MarginThresholds,
    h: f64,
) -> Result<GradCheckOutcome> {
    let margins = switching_margins(model, scene, pv, opts)?;
    if !margins.clears(thresholds) {
        return Ok(GradCheckOutcome::Resample(margins));
    }
    let (_, analytic) = loss_gradient(model, scene, pv, opts)?;
    let fd = finite_diff(model, scene, pv, opts, h)?;
    Ok(GradCheckOutcome::Checked(compare_gradients(
        &analytic, &fd,
    )?))
}
