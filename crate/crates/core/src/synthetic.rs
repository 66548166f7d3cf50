//! Synthetic shapes with analytic normals, used as fixtures and oracles.

use crate::dataset::{PointCloud, Variant};
use crate::error::Result;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Near-uniform sphere sampling via the Fibonacci lattice; normals are radial.
pub fn sphere(n: usize, radius: f64) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let theta = golden * i as f64;
        let dir = Vector3::new(r * theta.cos(), y, r * theta.sin());
        points.push(dir * radius);
        normals.push(dir);
    }
    PointCloud::from_points("sphere", Variant::Clean, points)
        .and_then(|c| c.with_normals(normals))
        .expect("synthetic sphere is valid")
}

/// Ellipsoid with semi-axes (a, b, c); the normal at p is the gradient of
/// x^2/a^2 + y^2/b^2 + z^2/c^2, normalized.
pub fn ellipsoid(n: usize, axes: [f64; 3]) -> PointCloud {
    let base = sphere(n, 1.0);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for i in 0..n {
        let u = base.point(i);
        let p = Vector3::new(u.x * axes[0], u.y * axes[1], u.z * axes[2]);
        let grad = Vector3::new(
            p.x / (axes[0] * axes[0]),
            p.y / (axes[1] * axes[1]),
            p.z / (axes[2] * axes[2]),
        );
        points.push(p);
        normals.push(grad.normalize());
    }
    PointCloud::from_points("ellipsoid", Variant::Clean, points)
        .and_then(|c| c.with_normals(normals))
        .expect("synthetic ellipsoid is valid")
}

/// Graph surface z = a x^2 + b x y + c y^2 sampled on a jittered grid over
/// [-extent, extent]^2. Normals come from the analytic gradient
/// (-dz/dx, -dz/dy, 1) / norm.
pub fn quadric_graph(side: usize, coeffs: [f64; 3], extent: f64, seed: u64) -> PointCloud {
    let [a, b, c] = coeffs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(side * side);
    let mut normals = Vec::with_capacity(side * side);
    let step = 2.0 * extent / (side.max(2) - 1) as f64;
    for i in 0..side {
        for j in 0..side {
            let jx: f64 = rng.gen_range(-0.3..0.3) * step;
            let jy: f64 = rng.gen_range(-0.3..0.3) * step;
            let x = -extent + i as f64 * step + jx;
            let y = -extent + j as f64 * step + jy;
            let z = a * x * x + b * x * y + c * y * y;
            let dzdx = 2.0 * a * x + b * y;
            let dzdy = b * x + 2.0 * c * y;
            points.push(Vector3::new(x, y, z));
            normals.push(Vector3::new(-dzdx, -dzdy, 1.0).normalize());
        }
    }
    PointCloud::from_points("quadric", Variant::Clean, points)
        .and_then(|cl| cl.with_normals(normals))
        .expect("synthetic quadric is valid")
}

/// Displace points with isotropic Gaussian noise of standard deviation
/// `sigma_rel` times the bounding-box diagonal. Ground-truth normals keep the
/// clean surface values, matching the pre-noised benchmark convention.
pub fn with_gaussian_noise(cloud: &PointCloud, sigma_rel: f64, seed: u64) -> PointCloud {
    let (mut lo, mut hi) = (
        Vector3::from_element(f64::INFINITY),
        Vector3::from_element(f64::NEG_INFINITY),
    );
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let sigma = sigma_rel * (hi - lo).norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, sigma).expect("positive sigma");
    let points = (0..cloud.len())
        .map(|i| {
            cloud.point(i)
                + Vector3::new(
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                )
        })
        .collect();
    let mut out = PointCloud::from_points(&format!("{}_noisy", cloud.name), Variant::NoiseMed, points)
        .expect("noisy cloud is valid");
    out.normals = cloud.normals.clone();
    out.eval_indices = cloud.eval_indices.clone();
    out
}

/// Write `<name>.xyz` (+ `.normals`, `.pidx` when present) into a directory,
/// producing a dataset readable by [`crate::dataset::load_shape`].
pub fn save_cloud(dir: &Path, cloud: &PointCloud) -> Result<()> {
    let mut xyz = String::new();
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        xyz.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    std::fs::write(dir.join(format!("{}.xyz", cloud.name)), xyz)?;
    if let Some(normals) = &cloud.normals {
        let mut buf = String::new();
        for n in normals {
            buf.push_str(&format!("{} {} {}\n", n.x, n.y, n.z));
        }
        std::fs::write(dir.join(format!("{}.normals", cloud.name)), buf)?;
    }
    if let Some(idx) = &cloud.eval_indices {
        let mut buf = String::new();
        for i in idx {
            buf.push_str(&format!("{i}\n"));
        }
        std::fs::write(dir.join(format!("{}.pidx", cloud.name)), buf)?;
    }
    Ok(())
}
