//! Parametric body model: blendshape forward pass and the linear
//! vertex-to-joint map.
//!
//! A mesh is produced from a rest shape plus two families of per-vertex offset
//! fields: shape blendshapes scaled by the `shape` coefficients, and pose
//! blendshapes scaled by the entries of the per-joint rotation matrices minus
//! their rest values. There is no skinning stage after the blendshape sum; all
//! synthetic ground truth in this crate comes through the same forward model.

use crate::error::{Error, Result};
use crate::math::{Mat3, Scalar, Vec3, Vec3f};

/// Immutable model constants: rest vertices, blendshape fields, topology and
/// the joint regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeModel {
    /// Rest position of every vertex, meters.
    pub rest_vertices: Vec<Vec3f>,
    /// `M` shape offset fields, each of length `n`.
    pub shape_blendshapes: Vec<Vec<Vec3f>>,
    /// `9*J` pose offset fields, each of length `n`, indexed joint-major by
    /// the row-major rotation-matrix entry they couple to.
    pub pose_blendshapes: Vec<Vec<Vec3f>>,
    /// Triangles as vertex index triples, counter-clockwise from outside.
    pub facets: Vec<[usize; 3]>,
    /// `K x n` vertex-to-joint weights; rows are convex combinations.
    pub joint_regressor: Vec<Vec<f64>>,
    /// Number of articulated parts `J`; the pose has `3*J` entries.
    pub joint_count: usize,
    /// Rest pose as `J` axis-angle triples.
    pub rest_pose: Vec<Vec3f>,
}

/// Row sums of the joint regressor may deviate from 1 by at most this much.
pub const REGRESSOR_ROW_SUM_TOL: f64 = 1e-9;

impl BlendshapeModel {
    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_blendshapes.len()
    }

    pub fn facet_count(&self) -> usize {
        self.facets.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.joint_regressor.len()
    }

    /// Checks every structural invariant; all loaders and constructors call
    /// this before handing a model out.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        if n < 3 {
            return Err(Error::config(format!("need at least 3 vertices, got {n}")));
        }
        if self.shape_dim() < 1 {
            return Err(Error::config("need at least one shape blendshape"));
        }
        if self.keypoint_count() < 1 {
            return Err(Error::config("need at least one joint regressor row"));
        }
        if self.joint_count < 1 {
            return Err(Error::config("need at least one joint"));
        }
        if self.pose_blendshapes.len() != 9 * self.joint_count {
            return Err(Error::config(format!(
                "expected {} pose blendshapes (9 per joint), got {}",
                9 * self.joint_count,
                self.pose_blendshapes.len()
            )));
        }
        if self.rest_pose.len() != self.joint_count {
            return Err(Error::config(format!(
                "rest pose has {} joints, model has {}",
                self.rest_pose.len(),
                self.joint_count
            )));
        }
        for (m, field) in self.shape_blendshapes.iter().enumerate() {
            if field.len() != n {
                return Err(Error::config(format!(
                    "shape blendshape {m} has {} entries, expected {n}",
                    field.len()
                )));
            }
        }
        for (p, field) in self.pose_blendshapes.iter().enumerate() {
            if field.len() != n {
                return Err(Error::config(format!(
                    "pose blendshape {p} has {} entries, expected {n}",
                    field.len()
                )));
            }
        }
        for (f, facet) in self.facets.iter().enumerate() {
            for &v in facet {
                if v >= n {
                    return Err(Error::config(format!(
                        "facet {f} references vertex {v}, model has {n}"
                    )));
                }
            }
            if facet[0] == facet[1] || facet[1] == facet[2] || facet[0] == facet[2] {
                return Err(Error::config(format!(
                    "facet {f} is degenerate: {facet:?}"
                )));
            }
        }
        for (k, row) in self.joint_regressor.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!(
                    "regressor row {k} has {} weights, expected {n}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for &w in row {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::config(format!(
                        "regressor row {k} has negative or non-finite weight {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > REGRESSOR_ROW_SUM_TOL {
                return Err(Error::config(format!(
                    "regressor row {k} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// The desk-scale model shipped with the crate: an ellipsoid lattice of
    /// 8 rings x 8 segments (n = 64, F = 124) centered 2.5 m in front of the
    /// camera, with J = 4 bending joints, M = 4 shape modes and K = 8 joints
    /// regressed from the rings.
    pub fn desk_default() -> BlendshapeModel {
        const RINGS: usize = 8;
        const COLS: usize = 8;
        const CENTER: Vec3f = Vec3 {
            x: 0.0,
            y: 0.0,
            z: 2.5,
        };
        let half_height = 0.85;

        let mut rest = Vec::with_capacity(RINGS * COLS);
        for r in 0..RINGS {
            let y = -half_height + 2.0 * half_height * (r as f64) / ((RINGS - 1) as f64);
            let profile = (1.0 - (y / 0.95).powi(2)).max(0.0).sqrt();
            let radius = 0.26 * profile;
            for c in 0..COLS {
                let phi = std::f64::consts::TAU * (c as f64) / (COLS as f64);
                rest.push(Vec3::new(
                    CENTER.x + radius * phi.cos(),
                    CENTER.y + y,
                    CENTER.z + radius * phi.sin(),
                ));
            }
        }

        let vid = |r: usize, c: usize| r * COLS + (c % COLS);
        let mut facets: Vec<[usize; 3]> = Vec::new();
        for r in 0..RINGS - 1 {
            for c in 0..COLS {
                facets.push([vid(r, c), vid(r, c + 1), vid(r + 1, c + 1)]);
                facets.push([vid(r, c), vid(r + 1, c + 1), vid(r + 1, c)]);
            }
        }
        // Close the two pole octagons with fans anchored at column 0.
        for c in 1..COLS - 1 {
            facets.push([vid(0, 0), vid(0, c), vid(0, c + 1)]);
            facets.push([vid(RINGS - 1, 0), vid(RINGS - 1, c), vid(RINGS - 1, c + 1)]);
        }
        // Orient every facet outward (positive dot of normal with the centroid
        // direction from the body center).
        for facet in &mut facets {
            let [a, b, c] = *facet;
            let n = (rest[b] - rest[a]).cross(rest[c] - rest[a]);
            let centroid = (rest[a] + rest[b] + rest[c]).scale_c(1.0 / 3.0);
            if n.dot(centroid - CENTER) < 0.0 {
                facet.swap(1, 2);
            }
        }

        // Shape modes: girth, height, taper, lateral bend.
        let radial = |p: Vec3f| Vec3::new(p.x - CENTER.x, 0.0, p.z - CENTER.z);
        let mut shapes = vec![Vec::with_capacity(rest.len()); 4];
        for &p in &rest {
            let y = p.y - CENTER.y;
            shapes[0].push(radial(p).scale_c(0.20));
            shapes[1].push(Vec3::new(0.0, y * 0.10, 0.0));
            shapes[2].push(radial(p).scale_c(0.15 * y / half_height));
            shapes[3].push(Vec3::new(0.08 * (y / half_height).powi(2), 0.0, 0.0));
        }

        // Pose fields: joint j applies (R_j - I) to vertices near its center,
        // faded by a Gaussian band weight. Entry (row, col) of R_j couples to
        // the offset field w_j(i) * (rest_i - q_j)_col * e_row.
        let joint_count = 4;
        let joint_y = [-0.6, -0.2, 0.2, 0.6];
        let mut pose_fields = Vec::with_capacity(9 * joint_count);
        for &cy in &joint_y {
            let q = Vec3::new(CENTER.x, CENTER.y + cy, CENTER.z);
            for row in 0..3 {
                for col in 0..3 {
                    let mut field = Vec::with_capacity(rest.len());
                    for &p in &rest {
                        let mut w = (-((p.y - q.y) / 0.25).powi(2)).exp();
                        if w < 1e-3 {
                            w = 0.0;
                        }
                        let arm = [p.x - q.x, p.y - q.y, p.z - q.z][col];
                        let mut off = Vec3f::ZERO;
                        match row {
                            0 => off.x = w * arm,
                            1 => off.y = w * arm,
                            _ => off.z = w * arm,
                        }
                        field.push(off);
                    }
                    pose_fields.push(field);
                }
            }
        }

        // One regressed joint per ring. The convex weights are deliberately
        // asymmetric (rotating per ring) so radial shape changes move the
        // joints and stay observable through the keypoint loss.
        let mut regressor = Vec::with_capacity(RINGS);
        for r in 0..RINGS {
            let mut row = vec![0.0; rest.len()];
            let mut sum = 0.0;
            for c in 0..COLS {
                let phi = std::f64::consts::TAU * (c as f64) / (COLS as f64);
                let w = 1.0 + 0.45 * (phi + r as f64 * std::f64::consts::FRAC_PI_4).cos();
                row[vid(r, c)] = w;
                sum += w;
            }
            for w in row.iter_mut() {
                *w /= sum;
            }
            regressor.push(row);
        }

        let model = BlendshapeModel {
            rest_vertices: rest,
            shape_blendshapes: shapes,
            pose_blendshapes: pose_fields,
            facets,
            joint_regressor: regressor,
            joint_count,
            rest_pose: vec![Vec3f::ZERO; joint_count],
        };
        model.validate().expect("desk model must satisfy invariants");
        model
    }
}

/// The optimizable body unknowns: `M` shape coefficients and `J` axis-angle
/// joint rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams<S = f64> {
    pub shape: Vec<S>,
    pub pose: Vec<Vec3<S>>,
}

impl BodyParams<f64> {
    pub fn rest(model: &BlendshapeModel) -> BodyParams {
        BodyParams {
            shape: vec![0.0; model.shape_dim()],
            pose: model.rest_pose.clone(),
        }
    }

    /// Finiteness plus the axis-angle principal branch `|theta_j| < pi`.
    pub fn validate(&self) -> Result<()> {
        for &b in &self.shape {
            if !b.is_finite() {
                return Err(Error::config("non-finite shape coefficient"));
            }
        }
        for (j, aa) in self.pose.iter().enumerate() {
            if !aa.is_finite() {
                return Err(Error::config(format!("non-finite pose for joint {j}")));
            }
            if aa.norm() >= std::f64::consts::PI {
                return Err(Error::config(format!(
                    "joint {j} rotation magnitude {} outside the principal branch",
                    aa.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Axis-angle to rotation matrix.
///
/// The angle is the vector magnitude and the axis its direction; below
/// magnitude 1e-8 a quadratic series keeps the map smooth through zero.
pub fn rodrigues<S: Scalar>(axis_angle: Vec3<S>) -> Mat3<S> {
    let t2 = axis_angle.dot(axis_angle);
    let (a, b) = if t2.value() < 1e-16 {
        // sin(phi)/phi and (1-cos(phi))/phi^2 expanded around zero.
        (
            t2.mulc(-1.0 / 6.0).addc(1.0),
            t2.mulc(-1.0 / 24.0).addc(0.5),
        )
    } else {
        let phi = t2.sqrt();
        (phi.sin() / phi, (phi.cos().mulc(-1.0).addc(1.0)) / t2)
    };
    let (x, y, z) = (axis_angle.x, axis_angle.y, axis_angle.z);
    // R = I + a*K + b*K^2 with K the skew matrix of the input.
    let m = [
        [
            (y * y + z * z).mulc(-1.0) * b + b.lift(1.0),
            x * y * b - z * a,
            x * z * b + y * a,
        ],
        [
            x * y * b + z * a,
            (x * x + z * z).mulc(-1.0) * b + b.lift(1.0),
            y * z * b - x * a,
        ],
        [
            x * z * b - y * a,
            y * z * b + x * a,
            (x * x + y * y).mulc(-1.0) * b + b.lift(1.0),
        ],
    ];
    Mat3 { m }
}

/// Concatenated row-major flattenings of the per-joint rotation matrices;
/// entry `n` of the result is the coefficient the `n`th pose blendshape
/// couples to.
pub fn pose_feature<S: Scalar>(pose: &[Vec3<S>]) -> Vec<S> {
    let mut out = Vec::with_capacity(9 * pose.len());
    for &aa in pose {
        out.extend_from_slice(&rodrigues(aa).flatten());
    }
    out
}

/// Blendshape forward pass:
/// `X_i = rest_i + sum_m shape_m * s_{m,i} + sum_n (pf_n - pf*_n) * p_{n,i}`.
pub fn mesh_vertices<S: Scalar>(
    model: &BlendshapeModel,
    params: &BodyParams<S>,
) -> Result<Vec<Vec3<S>>> {
    if params.shape.len() != model.shape_dim() {
        return Err(Error::config(format!(
            "params carry {} shape coefficients, model expects {}",
            params.shape.len(),
            model.shape_dim()
        )));
    }
    if params.pose.len() != model.joint_count {
        return Err(Error::config(format!(
            "params carry {} joints, model expects {}",
            params.pose.len(),
            model.joint_count
        )));
    }

    let pf = pose_feature(&params.pose);
    let pf_rest = pose_feature(&model.rest_pose);
    let delta: Vec<S> = pf
        .iter()
        .zip(&pf_rest)
        .map(|(&v, &r)| v.addc(-r))
        .collect();
    let ctx = delta[0];

    let n = model.vertex_count();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rest = model.rest_vertices[i];
        let mut x = ctx.lift(rest.x);
        let mut y = ctx.lift(rest.y);
        let mut z = ctx.lift(rest.z);
        for (m, &beta) in params.shape.iter().enumerate() {
            let s = model.shape_blendshapes[m][i];
            if s.x != 0.0 {
                x = x + beta.mulc(s.x);
            }
            if s.y != 0.0 {
                y = y + beta.mulc(s.y);
            }
            if s.z != 0.0 {
                z = z + beta.mulc(s.z);
            }
        }
        for (nn, &d) in delta.iter().enumerate() {
            let p = model.pose_blendshapes[nn][i];
            if p.x != 0.0 {
                x = x + d.mulc(p.x);
            }
            if p.y != 0.0 {
                y = y + d.mulc(p.y);
            }
            if p.z != 0.0 {
                z = z + d.mulc(p.z);
            }
        }
        out.push(Vec3::new(x, y, z));
    }
    Ok(out)
}

/// Applies the joint regressor to each coordinate channel.
pub fn joints3d<S: Scalar>(vertices: &[Vec3<S>], regressor: &[Vec<f64>]) -> Result<Vec<Vec3<S>>> {
    if vertices.is_empty() {
        return Err(Error::config("joints3d on an empty vertex list"));
    }
    let ctx = vertices[0].x;
    let mut out = Vec::with_capacity(regressor.len());
    for (k, row) in regressor.iter().enumerate() {
        if row.len() != vertices.len() {
            return Err(Error::config(format!(
                "regressor row {k} has {} weights for {} vertices",
                row.len(),
                vertices.len()
            )));
        }
        let mut acc = Vec3::new(ctx.lift(0.0), ctx.lift(0.0), ctx.lift(0.0));
        for (&w, &v) in row.iter().zip(vertices) {
            if w != 0.0 {
                acc = acc + v.scale_c(w);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3f;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PI: f64 = std::f64::consts::PI;

    /// Independent rotation route: axis-angle -> unit quaternion -> matrix.
    fn quaternion_rotation(aa: Vec3f) -> Mat3f {
        let angle = aa.norm();
        let (w, v) = if angle < 1e-300 {
            (1.0, Vec3f::ZERO)
        } else {
            let axis = aa.scale_c(1.0 / angle);
            ((angle / 2.0).cos(), axis.scale_c((angle / 2.0).sin()))
        };
        let (x, y, z) = (v.x, v.y, v.z);
        Mat3 {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    fn max_abs_diff(a: &Mat3f, b: &Mat3f) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                worst = worst.max((a.m[r][c] - b.m[r][c]).abs());
            }
        }
        worst
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        let r = rodrigues(Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(r.m, Mat3f::IDENTITY.m);
    }

    #[test]
    fn rodrigues_half_turn_about_z() {
        let r = rodrigues(Vec3::new(0.0, 0.0, PI));
        let expected = Mat3 {
            m: [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        assert!(max_abs_diff(&r, &expected) < 1e-12);
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let aa = Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            )
            .normalized()
            .scale_c(rng.gen::<f64>() * 3.0);
            let r = rodrigues(aa);
            let q = quaternion_rotation(aa);
            assert!(max_abs_diff(&r, &q) < 1e-12, "aa={aa:?}");
        }
    }

    #[test]
    fn rodrigues_small_angle_branch_is_continuous() {
        // Straddle the 1e-8 series switch; entries may differ only by the
        // angle gap itself, not by a branch jump.
        let below = rodrigues(Vec3::new(0.9e-8, 0.0, 0.0));
        let above = rodrigues(Vec3::new(1.1e-8, 0.0, 0.0));
        assert!(max_abs_diff(&below, &above) < 3e-9);
        for aa in [Vec3::new(0.9e-8, 0.0, 0.0), Vec3::new(1.1e-8, 0.0, 0.0)] {
            assert!(max_abs_diff(&rodrigues(aa), &quaternion_rotation(aa)) < 1e-15);
        }
    }

    #[test]
    fn rodrigues_orthonormal_det_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let aa = Vec3::new(
                rng.gen::<f64>() * 6.0 - 3.0,
                rng.gen::<f64>() * 6.0 - 3.0,
                rng.gen::<f64>() * 6.0 - 3.0,
            );
            let r = rodrigues(aa);
            let rrt = r.mul_mat(&r.transpose());
            assert!(max_abs_diff(&rrt, &Mat3f::IDENTITY) < 1e-12);
            assert!((r.det() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_feature_identity_tiling() {
        let pf = pose_feature(&[Vec3f::ZERO, Vec3f::ZERO]);
        let tile = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(pf.len(), 18);
        assert_eq!(&pf[..9], &tile);
        assert_eq!(&pf[9..], &tile);
    }

    #[test]
    fn pose_feature_half_turn_entry_layout() {
        let pf = pose_feature(&[Vec3::new(0.0, 0.0, PI)]);
        let expected = [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0];
        for (got, want) in pf.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_feature_is_per_joint_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pose: Vec<Vec3f> = (0..3)
            .map(|_| {
                Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
            })
            .collect();
        let pf = pose_feature(&pose);
        for (j, &aa) in pose.iter().enumerate() {
            let flat = rodrigues(aa).flatten();
            assert_eq!(&pf[9 * j..9 * (j + 1)], &flat);
        }
    }

    /// Naive scalar-loop evaluation of the forward model, no skips, no shared
    /// subexpressions.
    fn mesh_vertices_oracle(model: &BlendshapeModel, params: &BodyParams) -> Vec<Vec3f> {
        let pf = pose_feature(&params.pose);
        let pf_rest = pose_feature(&model.rest_pose);
        let mut out = Vec::new();
        for i in 0..model.vertex_count() {
            let mut p = [
                model.rest_vertices[i].x,
                model.rest_vertices[i].y,
                model.rest_vertices[i].z,
            ];
            for c in 0..3 {
                for m in 0..model.shape_dim() {
                    let s = model.shape_blendshapes[m][i];
                    p[c] += params.shape[m] * [s.x, s.y, s.z][c];
                }
                for nn in 0..model.pose_blendshapes.len() {
                    let b = model.pose_blendshapes[nn][i];
                    p[c] += (pf[nn] - pf_rest[nn]) * [b.x, b.y, b.z][c];
                }
            }
            out.push(Vec3::new(p[0], p[1], p[2]));
        }
        out
    }

    fn random_params(model: &BlendshapeModel, rng: &mut ChaCha8Rng) -> BodyParams {
        BodyParams {
            shape: (0..model.shape_dim())
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect(),
            pose: (0..model.joint_count)
                .map(|_| {
                    Vec3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn rest_params_reproduce_rest_vertices_exactly() {
        let model = BlendshapeModel::desk_default();
        let verts = mesh_vertices(&model, &BodyParams::rest(&model)).unwrap();
        assert_eq!(verts, model.rest_vertices);
    }

    #[test]
    fn unit_shape_coefficient_adds_one_blendshape() {
        let model = BlendshapeModel::desk_default();
        let mut params = BodyParams::rest(&model);
        params.shape[0] = 1.0;
        let verts = mesh_vertices(&model, &params).unwrap();
        for (i, v) in verts.iter().enumerate() {
            let want = model.rest_vertices[i] + model.shape_blendshapes[0][i];
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let model = BlendshapeModel::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let params = random_params(&model, &mut rng);
            let fast = mesh_vertices(&model, &params).unwrap();
            let slow = mesh_vertices_oracle(&model, &params);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((*a - *b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_affine_in_shape() {
        let model = BlendshapeModel::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pose: Vec<Vec3f> = (0..model.joint_count)
            .map(|_| Vec3::new(rng.gen::<f64>() - 0.5, 0.2, 0.0))
            .collect();
        let mk = |shape: Vec<f64>| BodyParams {
            shape,
            pose: pose.clone(),
        };
        let b1: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let b2: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let v_sum = mesh_vertices(&model, &mk(sum)).unwrap();
        let v1 = mesh_vertices(&model, &mk(b1)).unwrap();
        let v2 = mesh_vertices(&model, &mk(b2)).unwrap();
        let v0 = mesh_vertices(&model, &mk(vec![0.0; 4])).unwrap();
        for i in 0..v_sum.len() {
            let lhs = v_sum[i] - v1[i];
            let rhs = v2[i] - v0[i];
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let model = BlendshapeModel::desk_default();
        let bad = BodyParams {
            shape: vec![0.0; 2],
            pose: model.rest_pose.clone(),
        };
        assert!(matches!(
            mesh_vertices(&model, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn joints_selector_and_centroid_rows() {
        let verts = vec![
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(-1.0, 0.5, 2.0),
            Vec3::new(0.0, -4.0, 1.0),
        ];
        let mut selector = vec![0.0; 3];
        selector[1] = 1.0;
        let uniform = vec![1.0 / 3.0; 3];
        let joints = joints3d(&verts, &[selector, uniform]).unwrap();
        assert_eq!(joints[0], verts[1]);
        let centroid = (verts[0] + verts[1] + verts[2]).scale_c(1.0 / 3.0);
        assert!((joints[1] - centroid).norm() < 1e-15);
    }

    #[test]
    fn joints_match_loop_oracle() {
        let model = BlendshapeModel::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let verts: Vec<Vec3f> = (0..model.vertex_count())
            .map(|_| {
                Vec3::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                )
            })
            .collect();
        let joints = joints3d(&verts, &model.joint_regressor).unwrap();
        for (k, row) in model.joint_regressor.iter().enumerate() {
            let mut want = Vec3f::ZERO;
            for (i, &w) in row.iter().enumerate() {
                want.x += w * verts[i].x;
                want.y += w * verts[i].y;
                want.z += w * verts[i].z;
            }
            assert!((joints[k] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn joints_commute_with_rigid_motion() {
        let model = BlendshapeModel::desk_default();
        let verts = model.rest_vertices.clone();
        let r = rodrigues(Vec3::new(0.3, -0.2, 0.5));
        let t = Vec3::new(0.7, -1.1, 0.4);
        let moved: Vec<Vec3f> = verts.iter().map(|&v| r.mul_vec(v) + t).collect();
        let joints_then_move: Vec<Vec3f> = joints3d(&verts, &model.joint_regressor)
            .unwrap()
            .into_iter()
            .map(|j| r.mul_vec(j) + t)
            .collect();
        let move_then_joints = joints3d(&moved, &model.joint_regressor).unwrap();
        for (a, b) in joints_then_move.iter().zip(&move_then_joints) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn desk_model_has_documented_dimensions() {
        let model = BlendshapeModel::desk_default();
        assert_eq!(model.vertex_count(), 64);
        assert_eq!(model.facet_count(), 124);
        assert_eq!(model.joint_count, 4);
        assert_eq!(model.shape_dim(), 4);
        assert_eq!(model.keypoint_count(), 8);
        model.validate().unwrap();
    }
}
