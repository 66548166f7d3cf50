//! Classical reference methods: PCA plane fitting and order-n jet fitting.
//!
//! These serve as CLI baselines and as independent oracles in tests: the jet
//! normal comes from the closed-form first-order coefficients of a
//! least-squares polynomial height field fitted in the aligned frame.

use crate::error::{Error, Result};
use crate::nn::graph::Mat;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Taylor coefficients of a degree-n height field z = J(x, y).
///
/// `alpha` is indexed by monomial (i, j) with i + j <= n, ordered by total
/// degree and then by ascending i: (0,0), (0,1), (1,0), (0,2), (1,1), (2,0)...
#[derive(Clone, Debug)]
pub struct JetCoefficients {
    pub order: usize,
    pub alpha: Vec<f64>,
    /// Sum of squared residuals of the least-squares fit.
    pub residual: f64,
    /// Set when the design matrix was rank-deficient and the minimum-norm
    /// solution was taken.
    pub conditioning_warning: bool,
}

/// Monomial exponents (i, j) for a given order, in coefficient order.
pub fn jet_monomials(order: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(jet_coefficient_count(order));
    for deg in 0..=order {
        for i in 0..=deg {
            out.push((i, deg - i));
        }
    }
    out
}

pub fn jet_coefficient_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

impl JetCoefficients {
    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        let pos = jet_monomials(self.order)
            .iter()
            .position(|&(a, b)| a == i && b == j)
            .expect("monomial within order");
        self.alpha[pos]
    }
}

/// Plane-fit normal: eigenvector of the centroid-centered covariance with the
/// smallest eigenvalue. Sign convention: non-negative z component; if the z
/// component vanishes, the first nonzero component is made positive.
pub fn pca_normal(patch: &Mat) -> Result<Vector3<f64>> {
    let n = patch.nrows();
    if n < 3 {
        return Err(Error::DegeneratePatch(format!(
            "plane fit needs at least 3 points, got {n}"
        )));
    }
    let mut centroid = Vector3::zeros();
    for i in 0..n {
        centroid += Vector3::new(patch[[i, 0]], patch[[i, 1]], patch[[i, 2]]);
    }
    centroid /= n as f64;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let d = Vector3::new(patch[[i, 0]], patch[[i, 1]], patch[[i, 2]]) - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam_max = eig.eigenvalues[order[0]];
    let lam_mid = eig.eigenvalues[order[1]];
    if lam_max <= 0.0 || lam_mid <= lam_max * 1e-12 {
        return Err(Error::DegeneratePatch(
            "points are collinear or coincident".into(),
        ));
    }
    let mut normal = eig.eigenvectors.column(order[2]).into_owned().normalize();
    if normal.z < 0.0 {
        normal = -normal;
    } else if normal.z == 0.0 {
        for c in 0..3 {
            if normal[c].abs() > 1e-12 {
                if normal[c] < 0.0 {
                    normal = -normal;
                }
                break;
            }
        }
    }
    Ok(normal)
}

/// Least-squares jet fit of the aligned patch: minimizes
/// sum_i (z_i - J(x_i, y_i))^2 over the Taylor coefficients.
///
/// The Vandermonde columns are scaled to unit norm before the orthogonal
/// (SVD) solve; a rank-deficient system falls back to the minimum-norm
/// solution and sets `conditioning_warning`.
pub fn fit_jet(patch: &Mat, order: usize) -> Result<JetCoefficients> {
    if order < 1 {
        return Err(Error::Validation("jet order must be at least 1".into()));
    }
    let n = patch.nrows();
    let m = jet_coefficient_count(order);
    if n < m {
        return Err(Error::Validation(format!(
            "jet of order {order} needs at least {m} points, got {n}"
        )));
    }
    let monomials = jet_monomials(order);
    let mut design = DMatrix::zeros(n, m);
    let mut rhs = DVector::zeros(n);
    for r in 0..n {
        let (x, y, z) = (patch[[r, 0]], patch[[r, 1]], patch[[r, 2]]);
        for (c, &(i, j)) in monomials.iter().enumerate() {
            design[(r, c)] = x.powi(i as i32) * y.powi(j as i32);
        }
        rhs[r] = z;
    }
    // column scaling guards against ill-conditioning at higher orders
    let mut col_scale = vec![1.0f64; m];
    for c in 0..m {
        let norm = design.column(c).norm();
        if norm > 0.0 {
            col_scale[c] = norm;
            for r in 0..n {
                design[(r, c)] /= norm;
            }
        }
    }
    let svd = design.clone().svd(true, true);
    let sv_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = sv_max * 1e-12;
    let rank = svd.rank(eps);
    let warning = rank < m;
    let scaled = svd
        .solve(&rhs, eps)
        .map_err(|e| Error::Numerical(format!("jet solve failed: {e}")))?;
    let alpha: Vec<f64> = scaled
        .iter()
        .zip(&col_scale)
        .map(|(b, s)| b / s)
        .collect();
    let residual = {
        let fitted = design * &scaled;
        (&rhs - fitted).norm_squared()
    };
    Ok(JetCoefficients {
        order,
        alpha,
        residual,
        conditioning_warning: warning,
    })
}

/// Normal from the first-order jet coefficients:
/// (-a10, -a01, 1) / sqrt(1 + a10^2 + a01^2).
pub fn jet_normal(coeffs: &JetCoefficients) -> Vector3<f64> {
    let a10 = coeffs.coeff(1, 0);
    let a01 = coeffs.coeff(0, 1);
    let denom = (1.0 + a10 * a10 + a01 * a01).sqrt();
    Vector3::new(-a10 / denom, -a01 / denom, 1.0 / denom)
}
