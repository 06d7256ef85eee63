//! Synthetic ground-truth generation: parameter sampling, keypoint rendering,
//! z-buffered mask rasterization and dense two-frame flow fields.
//!
//! Conventions shared by the rasterizer and its per-pixel oracle: pixel `p`
//! covers `[p-0.5, p+0.5)` with its sample at the integer center; a boundary
//! pixel (edge function exactly zero) belongs to the facet whose directed
//! edge `d` satisfies `d.y > 0 || (d.y == 0 && d.x < 0)` after triangles are
//! normalized to positive signed area; depth ties between facets go to the
//! lowest facet index.
//!
//! Randomness comes from the counter-based ChaCha8 stream cipher seeded per
//! scene; every draw is a `f64` uniform in `[0, 1)`, consumed in the order
//! documented on [`sample_scene`]. Fixtures depend on that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{pack, FrameParams, ParamVector, PreparedScene};
use crate::camera::{camera_frame, project_camera_frame, CameraParams, ImageGeometry, Z_MIN};
use crate::error::{Error, Result};
use crate::losses::{FlowGrid, Keypoint2d, MaskGrid, SceneObservations};
use crate::math::{Vec3, Vec3f};
use crate::mesh::{joints3d, mesh_vertices, BlendshapeModel, BodyParams};
use crate::visibility::compute_visibility;

/// Sampling ranges and noise levels for one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub geom: ImageGeometry,
    /// 1 or 2 frames; 2 adds a flow field.
    pub frames: usize,
    /// Shape coefficients drawn uniformly from `[-shape_range, shape_range]`.
    pub shape_range: f64,
    /// Pose components drawn from `pose_center +- pose_range`.
    pub pose_range: f64,
    pub pose_center: f64,
    pub euler_range: f64,
    pub trans_range: f64,
    pub focal_range: (f64, f64),
    /// Frame-2 deltas, drawn around the frame-1 values.
    pub pose_delta: f64,
    pub euler_delta: f64,
    pub trans_delta: f64,
    /// Keypoint noise (pixels) applied by [`perturb_observations`].
    pub noise_kpt: f64,
    /// Mask morphology rounds: positive dilates, negative erodes.
    pub mask_ops: i32,
    pub shared_shape: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            geom: ImageGeometry {
                width: 64,
                height: 64,
            },
            frames: 2,
            shape_range: 0.5,
            pose_range: 0.35,
            pose_center: 0.0,
            euler_range: 0.08,
            trans_range: 0.08,
            focal_range: (60.0, 80.0),
            pose_delta: 0.12,
            euler_delta: 0.02,
            trans_delta: 0.03,
            noise_kpt: 0.0,
            mask_ops: 0,
            shared_shape: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > 2 {
            return Err(Error::config("frames must be 1 or 2"));
        }
        if !(self.focal_range.0 > 0.0 && self.focal_range.1 >= self.focal_range.0) {
            return Err(Error::config("focal range must be positive and ordered"));
        }
        let max_component = self.pose_center.abs() + self.pose_range + self.pose_delta;
        if max_component * 3f64.sqrt() >= std::f64::consts::PI {
            return Err(Error::config(
                "pose range can exceed the axis-angle principal branch",
            ));
        }
        if self.noise_kpt < 0.0 {
            return Err(Error::config("keypoint noise must be nonnegative"));
        }
        Ok(())
    }
}

/// A sampled scene: true parameters, their exact renders, and the true
/// geometry per frame.
#[derive(Clone, Debug)]
pub struct GroundTruthScene {
    pub truth: Vec<FrameParams>,
    pub shared_shape: bool,
    pub observations: Vec<SceneObservations>,
    pub true_vertices: Vec<Vec<Vec3f>>,
    pub true_joints: Vec<Vec<Vec3f>>,
}

impl GroundTruthScene {
    pub fn truth_vector(&self) -> Result<ParamVector> {
        pack(&self.truth, self.shared_shape)
    }

    pub fn prepared(&self) -> Result<PreparedScene> {
        PreparedScene::new(self.observations.clone())
    }
}

/// Deterministic scene sampling. Draw order, all `f64` uniforms: shape (M),
/// pose (3J), euler (3), translation (2), focal (1); for two-frame scenes the
/// frame-2 deltas follow in the same order (pose, euler, translation), with
/// the focal length copied from frame 1. A draw that violates the depth
/// precondition, hides every vertex, or rasterizes an empty mask is discarded
/// and redrawn, up to 100 times.
pub fn sample_scene(model: &BlendshapeModel, spec: &SceneSpec) -> Result<GroundTruthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..100 {
        let frames = draw_params(model, spec, &mut rng);
        match try_render(model, spec, &frames) {
            Ok(scene) => return Ok(scene),
            Err(RenderAttempt::Invalid) => continue,
            Err(RenderAttempt::Fatal(e)) => return Err(e),
        }
    }
    Err(Error::SceneGen(format!(
        "no valid draw within 100 attempts for seed {}",
        spec.seed
    )))
}

fn draw_params(
    model: &BlendshapeModel,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<FrameParams> {
    let uniform = |rng: &mut ChaCha8Rng, c: f64, r: f64| c + (2.0 * rng.gen::<f64>() - 1.0) * r;
    let shape: Vec<f64> = (0..model.shape_dim())
        .map(|_| uniform(rng, 0.0, spec.shape_range))
        .collect();
    let pose: Vec<Vec3f> = (0..model.joint_count)
        .map(|_| {
            Vec3::new(
                uniform(rng, spec.pose_center, spec.pose_range),
                uniform(rng, spec.pose_center, spec.pose_range),
                uniform(rng, spec.pose_center, spec.pose_range),
            )
        })
        .collect();
    let euler = Vec3::new(
        uniform(rng, 0.0, spec.euler_range),
        uniform(rng, 0.0, spec.euler_range),
        uniform(rng, 0.0, spec.euler_range),
    );
    let translation = [
        uniform(rng, 0.0, spec.trans_range),
        uniform(rng, 0.0, spec.trans_range),
    ];
    let focal = spec.focal_range.0 + rng.gen::<f64>() * (spec.focal_range.1 - spec.focal_range.0);
    let first = FrameParams {
        body: BodyParams { shape, pose },
        cam: CameraParams {
            focal,
            euler,
            translation,
        },
    };
    let mut frames = vec![first.clone()];
    if spec.frames == 2 {
        let mut second = first;
        for aa in second.body.pose.iter_mut() {
            aa.x = uniform(rng, aa.x, spec.pose_delta);
            aa.y = uniform(rng, aa.y, spec.pose_delta);
            aa.z = uniform(rng, aa.z, spec.pose_delta);
        }
        second.cam.euler = Vec3::new(
            uniform(rng, second.cam.euler.x, spec.euler_delta),
            uniform(rng, second.cam.euler.y, spec.euler_delta),
            uniform(rng, second.cam.euler.z, spec.euler_delta),
        );
        second.cam.translation = [
            uniform(rng, second.cam.translation[0], spec.trans_delta),
            uniform(rng, second.cam.translation[1], spec.trans_delta),
        ];
        frames.push(second);
    }
    frames
}

enum RenderAttempt {
    /// Draw violated a validity condition; redraw.
    Invalid,
    Fatal(Error),
}

fn try_render(
    model: &BlendshapeModel,
    spec: &SceneSpec,
    frames: &[FrameParams],
) -> std::result::Result<GroundTruthScene, RenderAttempt> {
    let mut observations = Vec::with_capacity(frames.len());
    let mut true_vertices = Vec::with_capacity(frames.len());
    let mut true_joints = Vec::with_capacity(frames.len());
    for fp in frames {
        let verts = mesh_vertices(model, &fp.body).map_err(RenderAttempt::Fatal)?;
        let cf = camera_frame(&verts, &fp.cam);
        if cf.iter().any(|p| p.z < Z_MIN) {
            return Err(RenderAttempt::Invalid);
        }
        let vis = compute_visibility(&cf, &model.facets).map_err(RenderAttempt::Fatal)?;
        if vis.visible_vertex_count() == 0 {
            return Err(RenderAttempt::Invalid);
        }
        let joints = joints3d(&verts, &model.joint_regressor).map_err(RenderAttempt::Fatal)?;
        let jcf = camera_frame(&joints, &fp.cam);
        if jcf.iter().any(|p| p.z < Z_MIN) {
            return Err(RenderAttempt::Invalid);
        }
        let kp =
            project_camera_frame(&jcf, fp.cam.focal, &spec.geom).map_err(RenderAttempt::Fatal)?;
        let mask = rasterize_mask(&verts, &model.facets, &fp.cam, &spec.geom)
            .map_err(RenderAttempt::Fatal)?;
        if mask.foreground_count() == 0 {
            return Err(RenderAttempt::Invalid);
        }
        observations.push(SceneObservations {
            keypoints2d: kp
                .iter()
                .map(|p| Keypoint2d {
                    pos: *p,
                    present: true,
                })
                .collect(),
            segmentation: mask,
            flow: None,
            geom: spec.geom,
        });
        true_vertices.push(verts);
        true_joints.push(joints);
    }
    if frames.len() == 2 {
        let flow = rasterize_flow(
            &true_vertices[0],
            &true_vertices[1],
            &model.facets,
            &frames[0].cam,
            &frames[1].cam,
            &spec.geom,
        )
        .map_err(RenderAttempt::Fatal)?;
        observations[0].flow = Some(flow);
    }
    Ok(GroundTruthScene {
        truth: frames.to_vec(),
        shared_shape: spec.shared_shape && frames.len() > 1,
        observations,
        true_vertices,
        true_joints,
    })
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Edge function `cross(v - u, p - u)`; positive on the interior side after
/// winding normalization.
fn edge(u: [f64; 2], v: [f64; 2], p: [f64; 2]) -> f64 {
    (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0])
}

/// The documented boundary rule for pixels exactly on an edge.
fn edge_accepts_boundary(u: [f64; 2], v: [f64; 2]) -> bool {
    let dy = v[1] - u[1];
    let dx = v[0] - u[0];
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

/// Per-pixel nearest covering facet: camera-frame depth (perspective-correct
/// from screen barycentric weights), facet index and the weights in facet
/// vertex order.
struct Coverage {
    best: Vec<Option<(f64, u32, [f64; 3])>>,
}

fn raster_coverage(
    proj: &[[f64; 2]],
    depth: &[f64],
    facets: &[[usize; 3]],
    geom: &ImageGeometry,
) -> Coverage {
    let (w, h) = (geom.width, geom.height);
    let mut best: Vec<Option<(f64, u32, [f64; 3])>> = vec![None; w * h];
    for (fi, facet) in facets.iter().enumerate() {
        let mut ids = *facet;
        let mut a = proj[ids[0]];
        let mut b = proj[ids[1]];
        let c = proj[ids[2]];
        let mut area2 = edge(a, b, c);
        if area2 == 0.0 {
            continue; // projects to a segment
        }
        if area2 < 0.0 {
            ids.swap(0, 1);
            std::mem::swap(&mut a, &mut b);
            area2 = -area2;
        }
        let max_xf = a[0].max(b[0]).max(c[0]).floor().min((w - 1) as f64);
        let max_yf = a[1].max(b[1]).max(c[1]).floor().min((h - 1) as f64);
        if max_xf < 0.0 || max_yf < 0.0 {
            continue;
        }
        let min_x = a[0].min(b[0]).min(c[0]).ceil().max(0.0) as usize;
        let min_y = a[1].min(b[1]).min(c[1]).ceil().max(0.0) as usize;
        let (max_x, max_y) = (max_xf as usize, max_yf as usize);
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let p = [x as f64, y as f64];
                let e_ab = edge(a, b, p);
                let e_bc = edge(b, c, p);
                let e_ca = edge(c, a, p);
                let inside = (e_ab > 0.0 || (e_ab == 0.0 && edge_accepts_boundary(a, b)))
                    && (e_bc > 0.0 || (e_bc == 0.0 && edge_accepts_boundary(b, c)))
                    && (e_ca > 0.0 || (e_ca == 0.0 && edge_accepts_boundary(c, a)));
                if !inside {
                    continue;
                }
                // Barycentric weights for (ids[0], ids[1], ids[2]).
                let l0 = e_bc / area2;
                let l1 = e_ca / area2;
                let l2 = e_ab / area2;
                let zinv = l0 / depth[ids[0]] + l1 / depth[ids[1]] + l2 / depth[ids[2]];
                let z = 1.0 / zinv;
                let slot = &mut best[y * w + x];
                let replace = match slot {
                    None => true,
                    Some((bz, bf, _)) => z < *bz || (z == *bz && (fi as u32) < *bf),
                };
                if replace {
                    // Weights reported in the facet's original vertex order.
                    let bary = if ids == *facet {
                        [l0, l1, l2]
                    } else {
                        [l1, l0, l2]
                    };
                    *slot = Some((z, fi as u32, bary));
                }
            }
        }
    }
    Coverage { best }
}

/// Binary union mask: a pixel is foreground iff its center lies inside the
/// projection of any facet.
pub fn rasterize_mask(
    vertices: &[Vec3f],
    facets: &[[usize; 3]],
    cam: &CameraParams,
    geom: &ImageGeometry,
) -> Result<MaskGrid> {
    let cf = camera_frame(vertices, cam);
    let proj = project_camera_frame(&cf, cam.focal, geom)?;
    let depth: Vec<f64> = cf.iter().map(|p| p.z).collect();
    let cov = raster_coverage(&proj, &depth, facets, geom);
    let mut mask = MaskGrid::new(geom.width, geom.height);
    for (i, slot) in cov.best.iter().enumerate() {
        mask.data[i] = slot.is_some();
    }
    Ok(mask)
}

/// Dense frame-1 to frame-2 flow: for each pixel the nearest (z-buffered)
/// frame-1 facet covering it, with the per-vertex projected displacement
/// interpolated by screen barycentric weights. Background pixels carry zero.
pub fn rasterize_flow(
    verts1: &[Vec3f],
    verts2: &[Vec3f],
    facets: &[[usize; 3]],
    cam1: &CameraParams,
    cam2: &CameraParams,
    geom: &ImageGeometry,
) -> Result<FlowGrid> {
    if verts1.len() != verts2.len() {
        return Err(Error::config("flow rasterization needs identical topology"));
    }
    let cf1 = camera_frame(verts1, cam1);
    let proj1 = project_camera_frame(&cf1, cam1.focal, geom)?;
    let cf2 = camera_frame(verts2, cam2);
    let proj2 = project_camera_frame(&cf2, cam2.focal, geom)?;
    let depth: Vec<f64> = cf1.iter().map(|p| p.z).collect();
    let cov = raster_coverage(&proj1, &depth, facets, geom);
    let mut flow = FlowGrid::new(geom.width, geom.height);
    for (i, slot) in cov.best.iter().enumerate() {
        if let Some((_, fi, bary)) = slot {
            let facet = facets[*fi as usize];
            let mut u = 0.0;
            let mut v = 0.0;
            for (k, &vid) in facet.iter().enumerate() {
                u += bary[k] * (proj2[vid][0] - proj1[vid][0]);
                v += bary[k] * (proj2[vid][1] - proj1[vid][1]);
            }
            flow.data[i] = [u as f32, v as f32];
        }
    }
    Ok(flow)
}

// ---------------------------------------------------------------------------
// Observation perturbation
// ---------------------------------------------------------------------------

/// Applies keypoint noise and mask morphology; the flow field stays clean.
/// Deterministic: perturbation draws come from a fresh ChaCha8 stream seeded
/// with `spec.seed ^ 0x9e3779b97f4a7c15`, consumed frame by frame, keypoint by
/// keypoint (one Box-Muller pair per keypoint: du then dv).
pub fn perturb_observations(scene: &GroundTruthScene, spec: &SceneSpec) -> GroundTruthScene {
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    for obs in out.observations.iter_mut() {
        if spec.noise_kpt > 0.0 {
            for kp in obs.keypoints2d.iter_mut() {
                let u1 = 1.0 - rng.gen::<f64>(); // (0, 1]
                let u2 = rng.gen::<f64>();
                let r = (-2.0 * u1.ln()).sqrt();
                kp.pos[0] += spec.noise_kpt * r * (std::f64::consts::TAU * u2).cos();
                kp.pos[1] += spec.noise_kpt * r * (std::f64::consts::TAU * u2).sin();
            }
        }
        if spec.mask_ops > 0 {
            for _ in 0..spec.mask_ops {
                obs.segmentation = obs.segmentation.dilate();
            }
        } else if spec.mask_ops < 0 {
            for _ in 0..(-spec.mask_ops) {
                obs.segmentation = obs.segmentation.erode();
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Test meshes
// ---------------------------------------------------------------------------

/// Icosphere (subdivided icosahedron) with outward-oriented facets.
pub fn icosphere(subdivisions: u32, radius: f64, center: Vec3f) -> (Vec<Vec3f>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3f> = vec![
        Vec3::new(-1.0, phi, 0.0),
        Vec3::new(1.0, phi, 0.0),
        Vec3::new(-1.0, -phi, 0.0),
        Vec3::new(1.0, -phi, 0.0),
        Vec3::new(0.0, -1.0, phi),
        Vec3::new(0.0, 1.0, phi),
        Vec3::new(0.0, -1.0, -phi),
        Vec3::new(0.0, 1.0, -phi),
        Vec3::new(phi, 0.0, -1.0),
        Vec3::new(phi, 0.0, 1.0),
        Vec3::new(-phi, 0.0, -1.0),
        Vec3::new(-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|v| v.normalized())
    .collect();
    let mut facets: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(facets.len() * 4);
        for f in &facets {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoints.entry(key).or_insert_with(|| {
                    let m = (verts[a] + verts[b]).scale_c(0.5).normalized();
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        facets = next;
    }
    let verts: Vec<Vec3f> = verts
        .into_iter()
        .map(|v| v.scale_c(radius) + center)
        .collect();
    // Normalize winding outward.
    let mut facets = facets;
    for f in facets.iter_mut() {
        let n = (verts[f[1]] - verts[f[0]]).cross(verts[f[2]] - verts[f[0]]);
        let centroid = (verts[f[0]] + verts[f[1]] + verts[f[2]]).scale_c(1.0 / 3.0);
        if n.dot(centroid - center) < 0.0 {
            f.swap(1, 2);
        }
    }
    (verts, facets)
}

/// Random triangle soup in front of the camera, for visibility benchmarks and
/// equivalence tests.
pub fn random_triangle_soup(seed: u64, facet_count: usize) -> (Vec<Vec3f>, Vec<[usize; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verts = Vec::with_capacity(3 * facet_count);
    let mut facets = Vec::with_capacity(facet_count);
    while facets.len() < facet_count {
        let c = Vec3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            1.5 + rng.gen::<f64>() * 2.5,
        );
        let base = verts.len();
        let mut tri = [Vec3f::ZERO; 3];
        for t in tri.iter_mut() {
            *t = c + Vec3::new(
                rng.gen::<f64>() * 0.4 - 0.2,
                rng.gen::<f64>() * 0.4 - 0.2,
                rng.gen::<f64>() * 0.4 - 0.2,
            );
        }
        let area2 = (tri[1] - tri[0]).cross(tri[2] - tri[0]).norm();
        if area2 < 1e-6 {
            continue;
        }
        verts.extend_from_slice(&tri);
        facets.push([base, base + 1, base + 2]);
    }
    (verts, facets)
}
