//! Per-vertex visibility by ray casting from the camera center.
//!
//! One ray is cast from the origin through each facet centroid; among all
//! facets the ray hits, the one with the minimum distance to the origin is
//! selected, and the source facet is visible iff it is the selected one.
//! Vertices inherit visibility from their incident facets. A brute-force path
//! and a BVH-accelerated path produce bit-identical flags; ties in hit
//! distance are resolved toward the lowest facet index in both.
//!
//! Visibility is never differentiated; it enters the losses only as a
//! constant mask per evaluation.

use crate::camera::Z_MIN;
use crate::error::{Error, Result};
use crate::math::{Vec3, Vec3f};

/// Rays with |<N, d>| below this are treated as parallel to the facet.
pub const RAY_EPS: f64 = 1e-8;

/// Facets with squared-norm of the edge cross product below this are
/// degenerate.
pub const DEGENERATE_AREA_EPS: f64 = 1e-12;

/// A ray from the camera center.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    /// Cast origin; always the camera center here.
    pub origin: Vec3f,
    /// Unit direction.
    pub dir: Vec3f,
}

impl Ray {
    /// Ray from the origin through `target`.
    pub fn through(target: Vec3f) -> Ray {
        Ray {
            origin: Vec3f::ZERO,
            dir: target.normalized(),
        }
    }
}

/// Per-facet and derived per-vertex visibility flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    pub vertices: Vec<bool>,
    pub facets: Vec<bool>,
}

impl VisibilityMask {
    pub fn visible_vertex_count(&self) -> usize {
        self.vertices.iter().filter(|v| **v).count()
    }
}

/// Ray/facet intersection following the three hit conditions: the facet is
/// not parallel to the ray, not behind it, and the plane intersection point
/// lies on the inner side of all three directed edges.
///
/// Returns the distance from the ray origin on a hit. The ray origin is
/// assumed to be (0,0,0), matching every caller in this crate.
pub fn ray_facet_intersect(ray: &Ray, v0: Vec3f, v1: Vec3f, v2: Vec3f) -> Result<Option<f64>> {
    let n_raw = (v1 - v0).cross(v2 - v0);
    if n_raw.dot(n_raw) < DEGENERATE_AREA_EPS * DEGENERATE_AREA_EPS {
        return Err(Error::DegenerateFacet {
            index: 0,
            area: n_raw.norm() / 2.0,
        });
    }
    Ok(intersect_normalized(ray.dir, v0, v1, v2, n_raw.normalized()))
}

/// Hit test with a precomputed unit normal; shared by both visibility paths
/// so they are bit-identical by construction.
fn intersect_normalized(d: Vec3f, v0: Vec3f, v1: Vec3f, v2: Vec3f, n: Vec3f) -> Option<f64> {
    let nd = n.dot(d);
    if nd.abs() <= RAY_EPS {
        return None; // parallel
    }
    let nv0 = n.dot(v0);
    if nd * nv0 <= 0.0 {
        return None; // behind the ray (or plane through the origin)
    }
    let t = nv0 / nd;
    let p = d.scale_c(t);
    // Directed edges (v1,v0), (v2,v1), (v0,v2): the plane point must fall on
    // the normal side of each.
    if (v1 - v0).cross(p - v0).dot(n) < 0.0 {
        return None;
    }
    if (v2 - v1).cross(p - v1).dot(n) < 0.0 {
        return None;
    }
    if (v0 - v2).cross(p - v2).dot(n) < 0.0 {
        return None;
    }
    Some(t)
}

struct FacetData {
    v: [Vec3f; 3],
    normal: Vec3f,
    centroid: Vec3f,
}

fn prepare_facets(vertices: &[Vec3f], facets: &[[usize; 3]]) -> Result<Vec<FacetData>> {
    let mut out = Vec::with_capacity(facets.len());
    let mut too_close = Vec::new();
    for (i, f) in facets.iter().enumerate() {
        let v = [vertices[f[0]], vertices[f[1]], vertices[f[2]]];
        let n_raw = (v[1] - v[0]).cross(v[2] - v[0]);
        if n_raw.dot(n_raw) < DEGENERATE_AREA_EPS * DEGENERATE_AREA_EPS {
            return Err(Error::DegenerateFacet {
                index: i,
                area: n_raw.norm() / 2.0,
            });
        }
        let centroid = (v[0] + v[1] + v[2]).scale_c(1.0 / 3.0);
        if centroid.z <= Z_MIN {
            too_close.push(i);
        }
        out.push(FacetData {
            v,
            normal: n_raw.normalized(),
            centroid,
        });
    }
    if !too_close.is_empty() {
        return Err(Error::DepthViolation { indices: too_close });
    }
    Ok(out)
}

/// Brute-force per-facet visibility: every centroid ray is tested against
/// every facet.
pub fn facet_visibility(vertices: &[Vec3f], facets: &[[usize; 3]]) -> Result<Vec<bool>> {
    let data = prepare_facets(vertices, facets)?;
    let mut flags = vec![false; facets.len()];
    for (i, src) in data.iter().enumerate() {
        let d = src.centroid.normalized();
        let mut best_t = f64::INFINITY;
        let mut best_idx = usize::MAX;
        for (j, g) in data.iter().enumerate() {
            if let Some(t) = intersect_normalized(d, g.v[0], g.v[1], g.v[2], g.normal) {
                if t < best_t {
                    best_t = t;
                    best_idx = j;
                }
            }
        }
        flags[i] = best_idx == i;
    }
    Ok(flags)
}

/// BVH-accelerated visibility; bit-identical to [`facet_visibility`].
pub fn facet_visibility_accelerated(
    vertices: &[Vec3f],
    facets: &[[usize; 3]],
) -> Result<Vec<bool>> {
    let data = prepare_facets(vertices, facets)?;
    let bvh = Bvh::build(&data);
    let mut flags = vec![false; facets.len()];
    for (i, src) in data.iter().enumerate() {
        let d = src.centroid.normalized();
        let (best_t, best_idx) = bvh.closest_hit(d, &data);
        let _ = best_t;
        flags[i] = best_idx == i;
    }
    Ok(flags)
}

/// Lifts facet flags to vertices: a vertex is visible iff it belongs to at
/// least one visible facet.
pub fn vertex_visibility(facet_flags: &[bool], facets: &[[usize; 3]], n: usize) -> VisibilityMask {
    let mut vertices = vec![false; n];
    for (f, facet) in facets.iter().enumerate() {
        if facet_flags[f] {
            for &v in facet {
                vertices[v] = true;
            }
        }
    }
    VisibilityMask {
        vertices,
        facets: facet_flags.to_vec(),
    }
}

/// Full pipeline from camera-frame vertices to a vertex mask.
pub fn compute_visibility(vertices: &[Vec3f], facets: &[[usize; 3]]) -> Result<VisibilityMask> {
    let flags = facet_visibility(vertices, facets)?;
    Ok(vertex_visibility(&flags, facets, vertices.len()))
}

// A small median-split BVH over facet bounding boxes. Ray traversal prunes
// nodes whose entry distance exceeds the current best hit and resolves ties
// toward the lowest facet index, like the brute-force path.
struct BvhNode {
    lo: Vec3f,
    hi: Vec3f,
    // Internal: child node indices. Leaf: range into `order`.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

pub(crate) struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(data: &[FacetData]) -> Bvh {
        let mut order: Vec<u32> = (0..data.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * data.len().max(1));
        let len = order.len();
        Self::build_range(data, &mut order, &mut nodes, 0, len);
        Bvh { nodes, order }
    }

    fn bounds(data: &[FacetData], order: &[u32], start: usize, count: usize) -> (Vec3f, Vec3f) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &fi in &order[start..start + count] {
            for v in &data[fi as usize].v {
                lo = Vec3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
                hi = Vec3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
            }
        }
        (lo, hi)
    }

    fn build_range(
        data: &[FacetData],
        order: &mut [u32],
        nodes: &mut Vec<BvhNode>,
        start: usize,
        count: usize,
    ) -> u32 {
        let (lo, hi) = Self::bounds(data, order, start, count);
        let idx = nodes.len() as u32;
        nodes.push(BvhNode {
            lo,
            hi,
            left: 0,
            right: 0,
            start: start as u32,
            count: count as u32,
        });
        if count > LEAF_SIZE {
            let extent = hi - lo;
            let axis = if extent.x >= extent.y && extent.x >= extent.z {
                0
            } else if extent.y >= extent.z {
                1
            } else {
                2
            };
            let key = |fi: u32| {
                let c = data[fi as usize].centroid;
                match axis {
                    0 => c.x,
                    1 => c.y,
                    _ => c.z,
                }
            };
            let mid = count / 2;
            order[start..start + count]
                .select_nth_unstable_by(mid, |&a, &b| key(a).total_cmp(&key(b)));
            let left = Self::build_range(data, order, nodes, start, mid);
            let right = Self::build_range(data, order, nodes, start + mid, count - mid);
            nodes[idx as usize].left = left;
            nodes[idx as usize].right = right;
            nodes[idx as usize].count = 0;
        }
        idx
    }

    /// Slab test; returns the entry distance of the ray into the box, or
    /// `None` when the box is missed entirely.
    fn enter_distance(lo: Vec3f, hi: Vec3f, d: Vec3f) -> Option<f64> {
        let mut tmin = 0.0f64;
        let mut tmax = f64::INFINITY;
        for axis in 0..3 {
            let (l, h, dd) = match axis {
                0 => (lo.x, hi.x, d.x),
                1 => (lo.y, hi.y, d.y),
                _ => (lo.z, hi.z, d.z),
            };
            if dd == 0.0 {
                if l > 0.0 || h < 0.0 {
                    return None; // parallel to the slab and outside it
                }
                continue;
            }
            let inv = 1.0 / dd;
            let t1 = l * inv;
            let t2 = h * inv;
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
        if tmin <= tmax {
            Some(tmin)
        } else {
            None
        }
    }

    /// Minimum-distance hit over all facets, ties toward the lowest index.
    fn closest_hit(&self, d: Vec3f, data: &[FacetData]) -> (f64, usize) {
        let mut best_t = f64::INFINITY;
        let mut best_idx = usize::MAX;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            match Self::enter_distance(node.lo, node.hi, d) {
                Some(enter) if enter <= best_t => {}
                _ => continue,
            }
            if node.count > 0 {
                for &fi in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let g = &data[fi as usize];
                    if let Some(t) = intersect_normalized(d, g.v[0], g.v[1], g.v[2], g.normal) {
                        let fi = fi as usize;
                        if t < best_t || (t == best_t && fi < best_idx) {
                            best_t = t;
                            best_idx = fi;
                        }
                    }
                }
            } else {
                // Visit the nearer child first for earlier pruning.
                let l = node.left;
                let r = node.right;
                let dl = Self::enter_distance(self.nodes[l as usize].lo, self.nodes[l as usize].hi, d);
                let dr = Self::enter_distance(self.nodes[r as usize].lo, self.nodes[r as usize].hi, d);
                match (dl, dr) {
                    (Some(a), Some(b)) => {
                        if a <= b {
                            stack.push(r);
                            stack.push(l);
                        } else {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        (best_t, best_idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_z2() -> [Vec3f; 3] {
        [
            Vec3::new(-1.0, -1.0, 2.0),
            Vec3::new(1.0, -1.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
        ]
    }

    #[test]
    fn axis_aligned_hit_at_distance_two() {
        let ray = Ray {
            origin: Vec3f::ZERO,
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let [a, b, c] = tri_z2();
        let t = ray_facet_intersect(&ray, a, b, c).unwrap();
        assert_eq!(t, Some(2.0));
    }

    #[test]
    fn behind_ray_misses() {
        let ray = Ray {
            origin: Vec3f::ZERO,
            dir: Vec3::new(0.0, 0.0, -1.0),
        };
        let [a, b, c] = tri_z2();
        assert_eq!(ray_facet_intersect(&ray, a, b, c).unwrap(), None);
    }

    #[test]
    fn degenerate_facet_is_an_error() {
        let ray = Ray {
            origin: Vec3f::ZERO,
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let a = Vec3::new(0.0, 0.0, 2.0);
        let b = Vec3::new(1.0, 0.0, 2.0);
        let c = Vec3::new(2.0, 0.0, 2.0); // collinear
        assert!(matches!(
            ray_facet_intersect(&ray, a, b, c),
            Err(Error::DegenerateFacet { .. })
        ));
    }

    /// Independent barycentric (Moller-Trumbore style) hit oracle.
    fn barycentric_oracle(d: Vec3f, v0: Vec3f, v1: Vec3f, v2: Vec3f) -> Option<(f64, f64, f64, f64)> {
        let e1 = v1 - v0;
        let e2 = v2 - v0;
        let pvec = d.cross(e2);
        let det = e1.dot(pvec);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let tvec = Vec3f::ZERO - v0;
        let u = tvec.dot(pvec) * inv;
        let qvec = tvec.cross(e1);
        let v = d.dot(qvec) * inv;
        let t = e2.dot(qvec) * inv;
        Some((t, u, v, 1.0 - u - v))
    }

    #[test]
    fn matches_barycentric_oracle_away_from_boundaries() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        while checked < 1000 {
            let rv = |rng: &mut rand_chacha::ChaCha8Rng| {
                Vec3::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                )
            };
            let v0 = rv(&mut rng);
            let v1 = rv(&mut rng);
            let v2 = rv(&mut rng);
            let dir = rv(&mut rng);
            if dir.norm() < 1e-3 {
                continue;
            }
            let d = dir.normalized();
            let area2 = (v1 - v0).cross(v2 - v0).norm();
            if area2 < 1e-3 {
                continue;
            }
            let n = (v1 - v0).cross(v2 - v0).normalized();
            // Exclude draws near the parallel, behind-ray and edge boundaries.
            if n.dot(d).abs() < 1e-6 {
                continue;
            }
            let oracle = barycentric_oracle(d, v0, v1, v2);
            if let Some((t, u, v, w)) = oracle {
                if t.abs() < 1e-6 || u.abs() < 1e-6 || v.abs() < 1e-6 || w.abs() < 1e-6 {
                    continue;
                }
                let got = ray_facet_intersect(
                    &Ray {
                        origin: Vec3f::ZERO,
                        dir: d,
                    },
                    v0,
                    v1,
                    v2,
                )
                .unwrap();
                let oracle_hit = t > 0.0 && u > 0.0 && v > 0.0 && w > 0.0;
                match (got, oracle_hit) {
                    (Some(dist), true) => assert!((dist - t).abs() < 1e-9),
                    (None, false) => {}
                    other => panic!("disagreement {other:?} (t={t}, u={u}, v={v})"),
                }
                checked += 1;
            }
        }
    }

    fn two_stacked_triangles() -> (Vec<Vec3f>, Vec<[usize; 3]>) {
        let verts = vec![
            Vec3::new(-1.0, -1.0, 2.0),
            Vec3::new(1.0, -1.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
            Vec3::new(-1.0, -1.0, 4.0),
            Vec3::new(1.0, -1.0, 4.0),
            Vec3::new(0.0, 1.0, 4.0),
        ];
        let facets = vec![[0, 1, 2], [3, 4, 5]];
        (verts, facets)
    }

    #[test]
    fn single_triangle_is_visible_and_occluded_pair_resolves() {
        let (verts, facets) = two_stacked_triangles();
        let flags = facet_visibility(&verts[..3], &facets[..1]).unwrap();
        assert_eq!(flags, vec![true]);
        let flags = facet_visibility(&verts, &facets).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn duplicate_facets_tie_to_lowest_index_in_both_paths() {
        let verts = vec![
            Vec3::new(-1.0, -1.0, 2.0),
            Vec3::new(1.0, -1.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
        ];
        let facets = vec![[0, 1, 2], [0, 1, 2]];
        let brute = facet_visibility(&verts, &facets).unwrap();
        let accel = facet_visibility_accelerated(&verts, &facets).unwrap();
        assert_eq!(brute, vec![true, false]);
        assert_eq!(brute, accel);
    }

    #[test]
    fn vertex_flags_follow_incidence() {
        let facets = vec![[0, 1, 2], [2, 3, 4]];
        let mask = vertex_visibility(&[true, false], &facets, 5);
        assert_eq!(mask.vertices, vec![true, true, true, false, false]);
        let mask = vertex_visibility(&[false, false], &facets, 5);
        assert!(mask.vertices.iter().all(|v| !v));
        let mask = vertex_visibility(&[true, true], &facets, 5);
        assert!(mask.vertices.iter().all(|v| *v));
    }

    #[test]
    fn visibility_is_scale_invariant() {
        let (verts, facets) = two_stacked_triangles();
        let flags = facet_visibility(&verts, &facets).unwrap();
        let scaled: Vec<Vec3f> = verts.iter().map(|v| v.scale_c(3.7)).collect();
        assert_eq!(facet_visibility(&scaled, &facets).unwrap(), flags);
    }

    #[test]
    fn deleting_a_facet_never_hides_another() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let mut verts = Vec::new();
        let mut facets = Vec::new();
        for _ in 0..30 {
            let c = Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                2.0 + rng.gen::<f64>() * 2.0,
            );
            let base = verts.len();
            for _ in 0..3 {
                verts.push(
                    c + Vec3::new(
                        rng.gen::<f64>() * 0.6 - 0.3,
                        rng.gen::<f64>() * 0.6 - 0.3,
                        rng.gen::<f64>() * 0.6 - 0.3,
                    ),
                );
            }
            facets.push([base, base + 1, base + 2]);
        }
        let flags = facet_visibility(&verts, &facets).unwrap();
        let removed = 7;
        let kept: Vec<[usize; 3]> = facets
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != removed)
            .map(|(_, f)| *f)
            .collect();
        let new_flags = facet_visibility(&verts, &kept).unwrap();
        let mut j = 0;
        for (i, facet) in facets.iter().enumerate() {
            if i == removed {
                continue;
            }
            assert_eq!(kept[j], *facet);
            if flags[i] {
                assert!(new_flags[j], "facet {i} lost visibility after deletion");
            }
            j += 1;
        }
    }

    #[test]
    fn accelerated_matches_brute_force_on_random_soups() {
        use rand::{Rng, SeedableRng};
        for seed in 0..10u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let f = 1 + (rng.gen::<u32>() % 300) as usize;
            let mut verts = Vec::new();
            let mut facets = Vec::new();
            for _ in 0..f {
                let c = Vec3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    1.5 + rng.gen::<f64>() * 2.5,
                );
                let base = verts.len();
                for _ in 0..3 {
                    verts.push(
                        c + Vec3::new(
                            rng.gen::<f64>() * 0.4 - 0.2,
                            rng.gen::<f64>() * 0.4 - 0.2,
                            rng.gen::<f64>() * 0.4 - 0.2,
                        ),
                    );
                }
                facets.push([base, base + 1, base + 2]);
            }
            let brute = facet_visibility(&verts, &facets).unwrap();
            let accel = facet_visibility_accelerated(&verts, &facets).unwrap();
            assert_eq!(brute, accel, "seed {seed}");
        }
    }
}
