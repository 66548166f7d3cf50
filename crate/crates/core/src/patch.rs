//! Patch geometry: neighborhood extraction, canonical-frame alignment, and
//! the inverse mapping for predicted normals.
//!
//! A patch is the query point plus its N-1 nearest neighbours, rows ordered
//! by ascending distance to the query (ties broken by lower point index).
//! Alignment centers the patch at the query, scales by the farthest-neighbour
//! distance, and rotates so the covariance eigenvectors land on the axes
//! (largest to x, smallest to z) under a deterministic sign rule.

use crate::dataset::PointCloud;
use crate::error::{Error, Result};
use crate::nn::graph::Mat;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A patch in world coordinates, before alignment.
#[derive(Clone, Debug)]
pub struct RawPatch {
    /// N x 3 world coordinates; row 0 is the query point.
    pub coords: Mat,
    pub query_world: Vector3<f64>,
    /// Point-cloud indices for every row (index 0 = query).
    pub source_indices: Vec<usize>,
}

/// A patch in the canonical frame.
#[derive(Clone, Debug)]
pub struct AlignedPatch {
    /// N x 3 coordinates; row 0 is the origin, max row norm is 1.
    pub coords: Mat,
    /// Normalization radius (max query-to-neighbour distance).
    pub scale: f64,
    /// Rotation applied to centered coordinates; rows are the eigenvectors.
    pub rotation: Matrix3<f64>,
    pub query_world: Vector3<f64>,
    pub source_indices: Vec<usize>,
    /// Set when the covariance was rank-deficient and the rotation fell back
    /// to the identity.
    pub frame_warning: bool,
}

fn row3(m: &Mat, i: usize) -> Vector3<f64> {
    Vector3::new(m[[i, 0]], m[[i, 1]], m[[i, 2]])
}

/// Extract the query point and its N-1 nearest neighbours, distance-ordered.
pub fn extract_patch(cloud: &PointCloud, query: usize, n: usize) -> Result<RawPatch> {
    let t = cloud.len();
    if query >= t {
        return Err(Error::Validation(format!(
            "query index {query} out of range for {t} points"
        )));
    }
    if n < 1 || n > t {
        return Err(Error::Validation(format!(
            "patch size {n} exceeds cloud size {t}; use a smaller patch size"
        )));
    }
    let q = cloud.point(query);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(t - 1);
    for i in 0..t {
        if i == query {
            continue;
        }
        let p = cloud.point(i);
        let d = p - q;
        cand.push((d.norm_squared(), i));
    }
    let keep = n - 1;
    if keep > 0 && keep < cand.len() {
        cand.select_nth_unstable_by(keep - 1, |a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        });
        cand.truncate(keep);
    }
    cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut coords = Mat::zeros((n, 3));
    let mut source_indices = Vec::with_capacity(n);
    coords[[0, 0]] = q.x;
    coords[[0, 1]] = q.y;
    coords[[0, 2]] = q.z;
    source_indices.push(query);
    for (r, (_, idx)) in cand.iter().take(keep).enumerate() {
        let p = cloud.point(*idx);
        coords[[r + 1, 0]] = p.x;
        coords[[r + 1, 1]] = p.y;
        coords[[r + 1, 2]] = p.z;
        source_indices.push(*idx);
    }
    Ok(RawPatch {
        coords,
        query_world: q,
        source_indices,
    })
}

/// Per-row k-nearest-neighbour table over an M x 3 coordinate matrix,
/// self excluded, ascending distance, ties broken by lower index.
/// Returns a flattened M*k index vector.
pub fn knn_indices(coords: &Mat, k: usize) -> Result<Vec<usize>> {
    let m = coords.nrows();
    if k >= m {
        return Err(Error::Validation(format!(
            "k = {k} must be smaller than the point count {m}"
        )));
    }
    let mut out = vec![0usize; m * k];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for i in 0..m {
        cand.clear();
        let pi = row3(coords, i);
        for j in 0..m {
            if j == i {
                continue;
            }
            let d = row3(coords, j) - pi;
            cand.push((d.norm_squared(), j));
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, (_, j)) in cand.iter().enumerate() {
            out[i * k + slot] = *j;
        }
    }
    Ok(out)
}

/// Relative tolerance below which a cubic-moment sum counts as a tie.
const CUBIC_TIE_TOL: f64 = 1e-12;

fn fix_sign(e: &mut Vector3<f64>, centered: &Mat) {
    let mut s = 0.0;
    let mut abs_s = 0.0;
    for i in 0..centered.nrows() {
        let p = row3(centered, i).dot(e);
        let c = p * p * p;
        s += c;
        abs_s += c.abs();
    }
    if s < -CUBIC_TIE_TOL * abs_s.max(1.0) {
        *e = -*e;
    } else if s.abs() <= CUBIC_TIE_TOL * abs_s.max(1.0) {
        // Tie: make the first non-negligible component positive.
        for c in 0..3 {
            if e[c].abs() > 1e-12 {
                if e[c] < 0.0 {
                    *e = -*e;
                }
                break;
            }
        }
    }
}

/// Normalize to the unit sphere and rotate into the PCA frame.
pub fn align_patch(raw: &RawPatch) -> Result<AlignedPatch> {
    let n = raw.coords.nrows();
    if n < 3 {
        return Err(Error::DegeneratePatch(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let q = row3(&raw.coords, 0);
    let mut centered = Mat::zeros((n, 3));
    let mut scale: f64 = 0.0;
    for i in 0..n {
        let y = row3(&raw.coords, i) - q;
        centered[[i, 0]] = y.x;
        centered[[i, 1]] = y.y;
        centered[[i, 2]] = y.z;
        scale = scale.max(y.norm());
    }
    if scale < 1e-300 {
        return Err(Error::DegeneratePatch(
            "all patch points coincide with the query".into(),
        ));
    }

    // Covariance anchored at the query point, not the centroid.
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let y = row3(&centered, i);
        cov += y * y.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lam_max = eig.eigenvalues[order[0]];
    let lam_mid = eig.eigenvalues[order[1]];
    let rank_deficient = lam_mid <= lam_max * 1e-12;

    let (rotation, frame_warning) = if rank_deficient {
        log::warn!("rank-deficient patch covariance; using identity frame");
        (Matrix3::identity(), true)
    } else {
        let mut ex = eig.eigenvectors.column(order[0]).into_owned();
        let mut ey = eig.eigenvectors.column(order[1]).into_owned();
        let mut ez = eig.eigenvectors.column(order[2]).into_owned();
        fix_sign(&mut ex, &centered);
        fix_sign(&mut ey, &centered);
        fix_sign(&mut ez, &centered);
        if ex.dot(&ey.cross(&ez)) < 0.0 {
            ez = -ez;
        }
        (
            Matrix3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()]),
            false,
        )
    };

    let mut coords = Mat::zeros((n, 3));
    for i in 0..n {
        let y = rotation * row3(&centered, i) / scale;
        coords[[i, 0]] = y.x;
        coords[[i, 1]] = y.y;
        coords[[i, 2]] = y.z;
    }
    Ok(AlignedPatch {
        coords,
        scale,
        rotation,
        query_world: q,
        source_indices: raw.source_indices.clone(),
        frame_warning,
    })
}

/// Map a normal predicted in the canonical frame back to world coordinates.
pub fn unalign_normal(patch: &AlignedPatch, n_hat: &Vector3<f64>) -> Result<Vector3<f64>> {
    let norm = n_hat.norm();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::Validation(format!(
            "normal must be unit length, got norm {norm}"
        )));
    }
    let world = patch.rotation.transpose() * n_hat;
    Ok(world.normalize())
}

/// Map a world-frame normal into the patch's canonical frame (training
/// supervision happens in the aligned frame).
pub fn align_normal(patch: &AlignedPatch, n_world: &Vector3<f64>) -> Vector3<f64> {
    (patch.rotation * n_world).normalize()
}

/// Uniform random rotation (Shoemake quaternion method), used by training
/// augmentation and test fixtures.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let quat = nalgebra::Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner()
}

/// Apply a rotation (and optional translation) to an N x 3 matrix of points.
pub fn transform_points(coords: &Mat, rot: &Matrix3<f64>, shift: &Vector3<f64>) -> Mat {
    let mut out = Mat::zeros(coords.dim());
    for i in 0..coords.nrows() {
        let p = rot * row3(coords, i) + shift;
        out[[i, 0]] = p.x;
        out[[i, 1]] = p.y;
        out[[i, 2]] = p.z;
    }
    out
}

impl AlignedPatch {
    /// Check the documented frame invariants; used by tests and debug paths.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.coords.nrows();
        for c in 0..3 {
            if self.coords[[0, c]].abs() > 1e-12 {
                return Err(Error::Validation("row 0 must be the origin".into()));
            }
        }
        let mut max_norm: f64 = 0.0;
        for i in 0..n {
            max_norm = max_norm.max(row3(&self.coords, i).norm());
        }
        if (max_norm - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("max row norm {max_norm} != 1")));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::Validation("rotation is not orthonormal".into()));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("rotation determinant is not +1".into()));
        }
        Ok(())
    }
}
