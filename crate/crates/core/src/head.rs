//! Normal output head: point-wise weights from the hyper-surface, weighted
//! max-pooled normal regression, and the training losses.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mat, Var};
use crate::nn::{Init, Linear, ParamStore};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

/// Lower bound added to the sigmoid weight response, keeping every point
/// minimally influential; weights live strictly inside (c, c + 1).
pub const WEIGHT_FLOOR: f64 = 0.01;
/// Loss mix: total = GAMMA_SIN * sine + GAMMA_WT * weight.
pub const GAMMA_SIN: f64 = 0.1;
pub const GAMMA_WT: f64 = 1.0;
/// Weight-target bandwidth: delta = max(DELTA_FLOOR, DELTA_SCALE * mean d^2).
pub const DELTA_FLOOR: f64 = 0.0025;
pub const DELTA_SCALE: f64 = 0.3;

/// Head parameters: two-layer weight regressor (phi) and two-layer normal
/// map (H), each with a mid-width of embed_dim / 2.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub phi1: Linear,
    pub phi2: Linear,
    pub h1: Linear,
    pub h2: Linear,
}

impl HeadParams {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        embed_dim: usize,
    ) -> HeadParams {
        let mid = (embed_dim / 2).max(1);
        HeadParams {
            phi1: Linear::define(store, rng, &format!("{name}.phi1"), embed_dim, mid, Init::FanIn),
            phi2: Linear::define(store, rng, &format!("{name}.phi2"), mid, 1, Init::FanIn),
            h1: Linear::define(store, rng, &format!("{name}.h1"), embed_dim, mid, Init::FanIn),
            h2: Linear::define(store, rng, &format!("{name}.h2"), mid, 3, Init::FanIn),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str) -> Result<HeadParams> {
        Ok(HeadParams {
            phi1: Linear::resolve(store, &format!("{name}.phi1"), true)?,
            phi2: Linear::resolve(store, &format!("{name}.phi2"), true)?,
            h1: Linear::resolve(store, &format!("{name}.h1"), true)?,
            h2: Linear::resolve(store, &format!("{name}.h2"), true)?,
        })
    }
}

/// w_i = c + sigmoid(phi(surface_i)); output M x 1, each inside (c, c + 1).
pub fn point_weights(g: &mut Graph, store: &ParamStore, hp: &HeadParams, surface: Var) -> Var {
    let h = hp.phi1.apply(g, store, surface);
    let h = g.relu(h);
    let pre = hp.phi2.apply(g, store, h);
    let sig = g.sigmoid(pre);
    g.add_const(sig, WEIGHT_FLOOR)
}

/// Normal regression: channel-wise max over the weighted surface rows, mapped
/// to R^3 and normalized. Returns (raw 1x3, unit 1x3); errors when the raw
/// map output collapses to zero.
pub fn predict_normal(
    g: &mut Graph,
    store: &ParamStore,
    hp: &HeadParams,
    surface: Var,
    weights: Var,
) -> Result<(Var, Var)> {
    if g.value(weights).nrows() != g.value(surface).nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} surface rows",
            g.value(weights).nrows(),
            g.value(surface).nrows()
        )));
    }
    let weighted = g.mul_col(surface, weights);
    let pooled = g.max_rows(weighted);
    let h = hp.h1.apply(g, store, pooled);
    let h = g.relu(h);
    let raw = hp.h2.apply(g, store, h);
    let norm: f64 = g.value(raw).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numerical(format!(
            "normal map collapsed to zero (norm {norm})"
        )));
    }
    let n_hat = g.normalize_row(raw);
    Ok((raw, n_hat))
}

/// Graph-side sine loss: || n_hat x n_gt ||, a 1 x 1 node.
pub fn sin_loss_graph(g: &mut Graph, n_hat: Var, n_gt: Var) -> Var {
    let c = g.cross(n_hat, n_gt);
    g.vec_norm(c)
}

/// Graph-side weight loss: mean squared difference to the targets.
pub fn weight_loss_graph(g: &mut Graph, weights: Var, targets: Var) -> Var {
    let d = g.sub(targets, weights);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Graph-side total loss with the default mixing factors.
pub fn total_loss_graph(g: &mut Graph, l_sin: Var, l_wt: Var) -> Var {
    let a = g.scale(l_sin, GAMMA_SIN);
    let b = g.scale(l_wt, GAMMA_WT);
    g.add(a, b)
}

/// Sine of the angle between two (near-)unit vectors; sign-blind.
pub fn sin_loss(n_hat: &Vector3<f64>, n_gt: &Vector3<f64>) -> f64 {
    n_hat.cross(n_gt).norm()
}

/// Tangent-distance weight targets: d_m = |p_m . n|, bandwidth
/// delta = max(0.0025, 0.3 * mean d^2), target w_m = exp(-d_m^2 / delta).
pub fn weight_targets(coords: &Mat, n_gt: &Vector3<f64>) -> (Vec<f64>, f64) {
    let m = coords.nrows();
    let mut d = Vec::with_capacity(m);
    let mut mean_sq = 0.0;
    for i in 0..m {
        let p = Vector3::new(coords[[i, 0]], coords[[i, 1]], coords[[i, 2]]);
        let di = p.dot(n_gt).abs();
        mean_sq += di * di;
        d.push(di);
    }
    mean_sq /= m as f64;
    let delta = DELTA_FLOOR.max(DELTA_SCALE * mean_sq);
    let targets = d.iter().map(|di| (-di * di / delta).exp()).collect();
    (targets, delta)
}

/// Mean squared difference between predicted and target weights.
pub fn weight_loss(weights: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(weights.len(), targets.len());
    let m = weights.len() as f64;
    weights
        .iter()
        .zip(targets)
        .map(|(w, t)| (t - w) * (t - w))
        .sum::<f64>()
        / m
}

/// total = 0.1 * sine + 1.0 * weight.
pub fn total_loss(l_sin: f64, l_wt: f64) -> f64 {
    GAMMA_SIN * l_sin + GAMMA_WT * l_wt
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(55)
    }

    #[test]
    fn weights_track_sigmoid_of_phi() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let hp = HeadParams::define(&mut store, &mut r, "head", 8);
        // zero phi: sigmoid(0) = 0.5 exactly
        store.set(hp.phi1.w, Mat::zeros((8, 4)));
        store.set(hp.phi2.w, Mat::zeros((4, 1)));
        let mut g = Graph::new();
        let surface = g.leaf(Mat::from_shape_fn((5, 8), |_| r.gen_range(-1.0..1.0)));
        let w = point_weights(&mut g, &store, &hp, surface);
        for i in 0..5 {
            assert_eq!(g.value(w)[[i, 0]], WEIGHT_FLOOR + 0.5);
        }
        // strongly negative bias drives weights to the floor
        store.set(hp.phi2.b.unwrap(), Mat::from_elem((1, 1), -100.0));
        let mut g2 = Graph::new();
        let surface2 = g2.leaf(Mat::from_shape_fn((5, 8), |_| r.gen_range(-1.0..1.0)));
        let w2 = point_weights(&mut g2, &store, &hp, surface2);
        for i in 0..5 {
            let v = g2.value(w2)[[i, 0]];
            assert!(v > WEIGHT_FLOOR && v < WEIGHT_FLOOR + 1e-12);
        }
    }

    #[test]
    fn weights_stay_strictly_inside_open_interval() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let hp = HeadParams::define(&mut store, &mut r, "head", 8);
        for _ in 0..200 {
            let mut g = Graph::new();
            let surface = g.leaf(Mat::from_shape_fn((6, 8), |_| r.gen_range(-50.0..50.0)));
            let w = point_weights(&mut g, &store, &hp, surface);
            for v in g.value(w).iter() {
                assert!(*v > WEIGHT_FLOOR && *v < WEIGHT_FLOOR + 1.0);
            }
        }
    }

    /// Head fixture with strictly positive first-layer weights so the toy
    /// mid-width never relu-collapses to an all-zero map.
    fn positive_head(store: &mut ParamStore, r: &mut ChaCha8Rng, e: usize) -> HeadParams {
        let hp = HeadParams::define(store, r, "head", e);
        let mid = e / 2;
        store.set(hp.h1.w, Mat::from_shape_fn((e, mid), |(i, j)| 0.1 + 0.03 * (i + j) as f64));
        store.set(hp.h2.w, Mat::from_shape_fn((mid, 3), |(i, j)| 0.2 + 0.05 * (i * 3 + j) as f64));
        hp
    }

    #[test]
    fn predict_normal_single_row_pooling() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let hp = positive_head(&mut store, &mut r, 6);
        let surface = Mat::from_shape_fn((1, 6), |_| r.gen_range(0.1..1.0));
        let weights = Mat::from_elem((1, 1), 0.7);
        let mut g = Graph::new();
        let sv = g.leaf(surface.clone());
        let wv = g.leaf(weights);
        let (_, n_hat) = predict_normal(&mut g, &store, &hp, sv, wv).unwrap();
        // single row: pooled features are just 0.7 * surface
        let mut g2 = Graph::new();
        let direct = g2.leaf(surface.mapv(|v| v * 0.7));
        let h = hp.h1.apply(&mut g2, &store, direct);
        let h = g2.relu(h);
        let raw = hp.h2.apply(&mut g2, &store, h);
        let expected = g2.normalize_row(raw);
        let dev = (g.value(n_hat) - g2.value(expected))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev < 1e-12);
    }

    #[test]
    fn predict_normal_direction_invariant_to_weight_scale() {
        // with a positive surface, doubling all weights scales the pooled
        // features uniformly; after the linear map the direction is not
        // exactly preserved in general, so probe with the identity-like H.
        let mut r = rng();
        let mut store = ParamStore::new();
        let hp = positive_head(&mut store, &mut r, 6);
        store.set(hp.h1.b.unwrap(), Mat::zeros((1, 3)));
        store.set(hp.h2.b.unwrap(), Mat::zeros((1, 3)));
        let surface = Mat::from_shape_fn((4, 6), |_| r.gen_range(0.1..1.0));
        let run = |wmul: f64| {
            let mut g = Graph::new();
            let sv = g.leaf(surface.clone());
            let wv = g.leaf(Mat::from_shape_fn((4, 1), |(i, _)| 0.2 + 0.1 * i as f64).mapv(|v| v * wmul));
            let (_, n) = predict_normal(&mut g, &store, &hp, sv, wv).unwrap();
            g.value(n).clone()
        };
        let base = run(1.0);
        let doubled = run(2.0);
        let dev = (&base - &doubled).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev < 1e-9, "direction changed by {dev}");
        let norm: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn predict_normal_rejects_zero_map() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let hp = HeadParams::define(&mut store, &mut r, "head", 4);
        store.set(hp.h2.w, Mat::zeros((2, 3)));
        store.set(hp.h2.b.unwrap(), Mat::zeros((1, 3)));
        let mut g = Graph::new();
        let sv = g.leaf(Mat::from_elem((3, 4), 0.5));
        let wv = g.leaf(Mat::from_elem((3, 1), 0.5));
        assert!(matches!(
            predict_normal(&mut g, &store, &hp, sv, wv),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn sine_loss_reference_values() {
        let z = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(sin_loss(&z, &z), 0.0);
        assert_eq!(sin_loss(&z, &Vector3::new(1.0, 0.0, 0.0)), 1.0);
        assert!(sin_loss(&z, &-z) < 1e-15);
    }

    #[test]
    fn weight_targets_on_tangent_plane() {
        let n = Vector3::new(0.0, 0.0, 1.0);
        let coords = Mat::from_shape_vec(
            (3, 3),
            vec![0.0, 0.0, 0.0, 0.5, 0.1, 0.0, -0.3, 0.8, 0.0],
        )
        .unwrap();
        let (w, delta) = weight_targets(&coords, &n);
        assert_eq!(delta, DELTA_FLOOR, "flat data activates the floor");
        for wi in w {
            assert_eq!(wi, 1.0);
        }
    }

    #[test]
    fn weight_targets_single_point_case() {
        // d = 0.1: delta = max(0.0025, 0.3 * 0.01) = 0.003, w = exp(-0.01/0.003)
        let n = Vector3::new(0.0, 0.0, 1.0);
        let coords = Mat::from_shape_vec((1, 3), vec![0.3, 0.0, 0.1]).unwrap();
        let (w, delta) = weight_targets(&coords, &n);
        assert!((delta - 0.003).abs() < 1e-15);
        let expected = (-0.01f64 / 0.003).exp();
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((expected - 0.035674).abs() < 1e-6);
    }

    #[test]
    fn weight_targets_scale_calibrated_when_data_dominates() {
        let mut r = rng();
        let n = Vector3::new(0.0, 0.0, 1.0);
        // heights large enough that 0.3 * mean d^2 > 0.0025
        let coords = Mat::from_shape_fn((20, 3), |(_, c)| {
            if c == 2 {
                r.gen_range(0.3..1.0)
            } else {
                r.gen_range(-1.0..1.0)
            }
        });
        let (w1, d1) = weight_targets(&coords, &n);
        let scaled = coords.mapv(|v| v * 4.0);
        let (w2, d2) = weight_targets(&scaled, &n);
        assert!(d1 > DELTA_FLOOR && d2 > DELTA_FLOOR);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12, "scale changed the calibrated targets");
        }
    }

    #[test]
    fn weight_targets_monotone_under_floor() {
        // tiny heights keep delta at the floor; targets decrease in d
        let n = Vector3::new(0.0, 0.0, 1.0);
        let coords = Mat::from_shape_vec(
            (4, 3),
            vec![
                0.0, 0.0, 0.000, //
                0.0, 0.0, 0.005, //
                0.0, 0.0, 0.010, //
                0.0, 0.0, 0.020,
            ],
        )
        .unwrap();
        let (w, delta) = weight_targets(&coords, &n);
        assert_eq!(delta, DELTA_FLOOR);
        for pair in w.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn weight_loss_reference_values() {
        assert_eq!(weight_loss(&[0.3, 0.9], &[0.3, 0.9]), 0.0);
        assert_eq!(weight_loss(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        let quarters = weight_loss(&[0.0, 0.0, 0.0, 0.0], &[0.1, 0.1, 0.1, 0.1]);
        assert!((quarters - 0.01).abs() < 1e-15);
    }

    #[test]
    fn total_loss_constants() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 0.0), 0.1);
        assert_eq!(total_loss(0.0, 1.0), 1.0);
        assert!((total_loss(0.5, 0.2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn graph_losses_match_plain_functions() {
        let mut r = rng();
        for _ in 0..20 {
            let a = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)).normalize();
            let b = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)).normalize();
            let mut g = Graph::new();
            let av = g.leaf(Mat::from_shape_vec((1, 3), vec![a.x, a.y, a.z]).unwrap());
            let bv = g.leaf(Mat::from_shape_vec((1, 3), vec![b.x, b.y, b.z]).unwrap());
            let ls = sin_loss_graph(&mut g, av, bv);
            assert!((g.value(ls)[[0, 0]] - sin_loss(&a, &b)).abs() < 1e-12);

            let w: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let t: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let wv = g.leaf(Mat::from_shape_vec((6, 1), w.clone()).unwrap());
            let tv = g.leaf(Mat::from_shape_vec((6, 1), t.clone()).unwrap());
            let lw = weight_loss_graph(&mut g, wv, tv);
            assert!((g.value(lw)[[0, 0]] - weight_loss(&w, &t)).abs() < 1e-12);

            let tot = total_loss_graph(&mut g, ls, lw);
            let expected = total_loss(g.value(ls)[[0, 0]], g.value(lw)[[0, 0]]);
            assert!((g.value(tot)[[0, 0]] - expected).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn sine_loss_bounded_symmetric_and_zero_iff_parallel(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            bx in -1.0f64..1.0, by in -1.0f64..1.0, bz in -1.0f64..1.0,
        ) {
            let a = Vector3::new(ax, ay, az + 1.5).normalize();
            let b = Vector3::new(bx, by, bz + 1.5).normalize();
            let fwd = sin_loss(&a, &b);
            let bwd = sin_loss(&b, &a);
            prop_assert!(fwd >= 0.0 && fwd <= 1.0 + 1e-12);
            prop_assert!((fwd - bwd).abs() < 1e-12);
            let cosang = a.dot(&b).abs();
            if fwd < 1e-7 {
                prop_assert!(cosang > 1.0 - 1e-7);
            }
        }
    }
}
