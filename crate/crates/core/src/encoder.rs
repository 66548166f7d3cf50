//! Hierarchical patch feature encoder with attention-driven fusion.
//!
//! Features are built over three nested scales [N, N/2, N/4]. Each scale runs
//! densely connected per-point layers with one k-NN max aggregation; between
//! scales an attention-weighted global vector of the larger scale is
//! concatenated onto the surviving (nearest-to-query) rows and mixed down.
//! The final fused code has M = N/4 rows of width `global_dim`, alongside a
//! local relative-position code of width `local_dim` per neighbour.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mat, Var};
use crate::nn::{init_matrix, Init, Linear, ParamId, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How the per-scale global vector is formed during fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Channel-mean of point-softmax attention with a learnable scale.
    Attention,
    /// Plain point-wise max pooling.
    Max,
    /// Max over encoding channels of the point-softmax scores.
    Eq18Max,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Attention => f.write_str("attention"),
            FusionMode::Max => f.write_str("max"),
            FusionMode::Eq18Max => f.write_str("eq18max"),
        }
    }
}

/// One dense encoding stage: two 2-layer blocks around a k-NN aggregation.
#[derive(Clone, Copy, Debug)]
pub struct DenseStage {
    /// Input lift (3 -> d), present only at the coordinate scale.
    pub lift: Option<Linear>,
    pub a1: Linear,
    pub a2: Linear,
    pub b1: Linear,
    pub b2: Linear,
}

impl DenseStage {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        d: usize,
        with_lift: bool,
    ) -> DenseStage {
        let lift = if with_lift {
            Some(Linear::define(store, rng, &format!("{name}.lift"), input_dim, d, Init::FanIn))
        } else {
            None
        };
        DenseStage {
            lift,
            a1: Linear::define(store, rng, &format!("{name}.a1"), d, d, Init::FanIn),
            a2: Linear::define(store, rng, &format!("{name}.a2"), 2 * d, d, Init::FanIn),
            b1: Linear::define(store, rng, &format!("{name}.b1"), 2 * d, d, Init::FanIn),
            b2: Linear::define(store, rng, &format!("{name}.b2"), 3 * d, d, Init::FanIn),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, with_lift: bool) -> Result<DenseStage> {
        Ok(DenseStage {
            lift: if with_lift {
                Some(Linear::resolve(store, &format!("{name}.lift"), true)?)
            } else {
                None
            },
            a1: Linear::resolve(store, &format!("{name}.a1"), true)?,
            a2: Linear::resolve(store, &format!("{name}.a2"), true)?,
            b1: Linear::resolve(store, &format!("{name}.b1"), true)?,
            b2: Linear::resolve(store, &format!("{name}.b2"), true)?,
        })
    }
}

/// Parameters of one fusion step between adjacent scales.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub q: Option<Linear>,
    pub v: Option<Linear>,
    pub psi: Option<Linear>,
    pub lambda: Option<ParamId>,
    pub theta1: Linear,
    pub theta2: Linear,
}

/// Initial value of the learnable attention scale.
pub const LAMBDA_INIT: f64 = 0.1;

impl FusionParams {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        mode: FusionMode,
    ) -> FusionParams {
        let (q, v, psi) = match mode {
            FusionMode::Max => (None, None, None),
            _ => (
                Some(Linear::define(store, rng, &format!("{name}.q"), d_in, d_in, Init::FanIn)),
                Some(Linear::define(store, rng, &format!("{name}.v"), d_in, d_in, Init::FanIn)),
                Some(Linear::define(store, rng, &format!("{name}.psi"), d_in, d_in, Init::FanIn)),
            ),
        };
        let lambda = match mode {
            FusionMode::Attention => Some(store.define(
                &format!("{name}.lambda"),
                init_matrix(rng, 1, 1, Init::Const(LAMBDA_INIT)),
            )),
            _ => None,
        };
        FusionParams {
            mode,
            q,
            v,
            psi,
            lambda,
            theta1: Linear::define(store, rng, &format!("{name}.theta1"), 2 * d_in, d_out, Init::FanIn),
            theta2: Linear::define(store, rng, &format!("{name}.theta2"), d_out, d_out, Init::FanIn),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, mode: FusionMode) -> Result<FusionParams> {
        let (q, v, psi) = match mode {
            FusionMode::Max => (None, None, None),
            _ => (
                Some(Linear::resolve(store, &format!("{name}.q"), true)?),
                Some(Linear::resolve(store, &format!("{name}.v"), true)?),
                Some(Linear::resolve(store, &format!("{name}.psi"), true)?),
            ),
        };
        let lambda = match mode {
            FusionMode::Attention => Some(store.id(&format!("{name}.lambda"))?),
            _ => None,
        };
        Ok(FusionParams {
            mode,
            q,
            v,
            psi,
            lambda,
            theta1: Linear::resolve(store, &format!("{name}.theta1"), true)?,
            theta2: Linear::resolve(store, &format!("{name}.theta2"), true)?,
        })
    }
}

/// All encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stage0: DenseStage,
    pub stage1: DenseStage,
    pub fuse0: FusionParams,
    pub fuse1: FusionParams,
    pub local_e1: Linear,
    pub local_e2: Linear,
}

/// Width of the hidden layer inside the local-code embedding.
pub const LOCAL_EMBED_MID: usize = 32;

/// Per-scale features plus the fused and local codes.
pub struct FeatureHierarchy {
    /// Point counts per scale, strictly decreasing, ending at M = N/4.
    pub scales: Vec<usize>,
    /// F_s per scale (the coarsest is `fused_g`).
    pub features: Vec<Var>,
    /// M x global_dim fused code.
    pub fused_g: Var,
    /// (M*k) x local_dim relative-position code.
    pub local_c: Var,
}

/// Intermediate attention quantities (Eq. 6 shapes).
pub struct AttnVars {
    pub q: Var,
    pub v: Var,
    /// N_s x 1 scores; non-negative, summing to one.
    pub a: Var,
}

/// One dense scale: per-point layers with dense concatenation and a k-NN max
/// aggregation between the two blocks. `knn_idx` is the flattened M*k table.
pub fn encode_scale(
    g: &mut Graph,
    store: &ParamStore,
    stage: &DenseStage,
    input: Var,
    knn_idx: &Arc<Vec<usize>>,
    k: usize,
) -> Var {
    let rows = g.value(input).nrows();
    assert_eq!(knn_idx.len(), rows * k, "knn table does not match scale size");
    let h0 = match &stage.lift {
        Some(lift) => {
            let lifted = lift.apply(g, store, input);
            g.relu(lifted)
        }
        None => input,
    };
    let a1 = stage.a1.apply(g, store, h0);
    let h1 = g.relu(a1);
    let cat01 = g.concat_cols(&[h0, h1]);
    let a2 = stage.a2.apply(g, store, cat01);
    let h2 = g.relu(a2);
    let gathered = g.gather_rows(h2, knn_idx.clone());
    let agg = g.max_pool_groups(gathered, k);
    let u = g.concat_cols(&[h2, agg]);
    let b1 = stage.b1.apply(g, store, u);
    let h3 = g.relu(b1);
    let cat_u3 = g.concat_cols(&[u, h3]);
    let b2 = stage.b2.apply(g, store, cat_u3);
    g.relu(b2)
}

/// Eq. 6: q = Q(F), v = V(F), a = channel mean of point-wise softmax of q.
pub fn attention_scores(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    f_s: Var,
) -> Result<AttnVars> {
    let (q_lin, v_lin) = match (&fp.q, &fp.v) {
        (Some(q), Some(v)) => (q, v),
        _ => {
            return Err(Error::Unsupported(
                "attention scores are not available in max fusion mode".into(),
            ))
        }
    };
    let q = q_lin.apply(g, store, f_s);
    let v = v_lin.apply(g, store, f_s);
    let sm = g.softmax_cols(q);
    let a = g.mean_cols(sm);
    Ok(AttnVars { q, v, a })
}

/// Eq. 7: the attention-weighted sum of v rows, mapped by psi and gated by
/// the learnable scale. Output is 1 x D.
pub fn weighted_global(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    attn: &AttnVars,
) -> Result<Var> {
    let psi = fp
        .psi
        .as_ref()
        .ok_or_else(|| Error::Unsupported("psi undefined in max fusion mode".into()))?;
    let lambda = fp
        .lambda
        .ok_or_else(|| Error::Unsupported("lambda undefined outside attention mode".into()))?;
    let at = g.transpose(attn.a);
    let pooled = g.matmul(at, attn.v);
    let mapped = psi.apply(g, store, pooled);
    let lam = g.param_leaf(store.value(lambda).clone(), lambda);
    Ok(g.mul_scalar_var(mapped, lam))
}

/// Plain max-pooled global vector (the basic fusion path).
pub fn max_global(g: &mut Graph, f_s: Var) -> Var {
    g.max_rows(f_s)
}

/// Max-pooled attention variant: scores are the per-point max over channels
/// of the softmax-normalized q, with no learnable scale.
pub fn eq18_global(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    f_s: Var,
) -> Result<Var> {
    let (q_lin, v_lin, psi) = match (&fp.q, &fp.v, &fp.psi) {
        (Some(q), Some(v), Some(p)) => (q, v, p),
        _ => {
            return Err(Error::Unsupported(
                "eq18 fusion needs q/v/psi parameters".into(),
            ))
        }
    };
    let q = q_lin.apply(g, store, f_s);
    let v = v_lin.apply(g, store, f_s);
    let sm = g.softmax_cols(q);
    let amax = g.max_cols(sm);
    let at = g.transpose(amax);
    let pooled = g.matmul(at, v);
    Ok(psi.apply(g, store, pooled))
}

/// Compute the scale's global vector according to the fusion mode.
pub fn global_vector(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    f_s: Var,
) -> Result<Var> {
    match fp.mode {
        FusionMode::Attention => {
            let attn = attention_scores(g, store, fp, f_s)?;
            weighted_global(g, store, fp, &attn)
        }
        FusionMode::Max => Ok(max_global(g, f_s)),
        FusionMode::Eq18Max => eq18_global(g, store, fp, f_s),
    }
}

/// Eq. 8: duplicate the global vector onto the first `n_next` rows of F_s and
/// mix with a two-layer per-point transform.
pub fn fuse_scale(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    global: Var,
    f_s: Var,
    n_next: usize,
) -> Result<Var> {
    let n_s = g.value(f_s).nrows();
    if n_next > n_s {
        return Err(Error::ShapeMismatch(format!(
            "cannot fuse up: next scale {n_next} exceeds current {n_s}"
        )));
    }
    if g.value(global).nrows() != 1 || g.value(global).ncols() != g.value(f_s).ncols() {
        return Err(Error::ShapeMismatch(format!(
            "global vector {:?} does not match feature width {}",
            g.value(global).dim(),
            g.value(f_s).ncols()
        )));
    }
    let slice_idx = Arc::new((0..n_next).collect::<Vec<usize>>());
    let sliced = g.gather_rows(f_s, slice_idx);
    let bcast_idx = Arc::new(vec![0usize; n_next]);
    let dup = g.gather_rows(global, bcast_idx);
    let cat = g.concat_cols(&[dup, sliced]);
    let t1 = fp.theta1.apply(g, store, cat);
    let h = g.relu(t1);
    let t2 = fp.theta2.apply(g, store, h);
    Ok(g.relu(t2))
}

/// Raw relative-position features for the final scale: for each of the first
/// `m` rows, its k neighbours contribute (dx, dy, dz, distance).
pub fn local_relative_features(coords: &Mat, m: usize, knn_idx: &[usize], k: usize) -> Mat {
    assert_eq!(knn_idx.len(), m * k);
    let mut out = Mat::zeros((m * k, 4));
    for i in 0..m {
        for j in 0..k {
            let nb = knn_idx[i * k + j];
            let dx = coords[[nb, 0]] - coords[[i, 0]];
            let dy = coords[[nb, 1]] - coords[[i, 1]];
            let dz = coords[[nb, 2]] - coords[[i, 2]];
            let row = i * k + j;
            out[[row, 0]] = dx;
            out[[row, 1]] = dy;
            out[[row, 2]] = dz;
            out[[row, 3]] = (dx * dx + dy * dy + dz * dz).sqrt();
        }
    }
    out
}

/// Embed raw relative features into the local code of width `local_dim`.
pub fn local_code(
    g: &mut Graph,
    store: &ParamStore,
    e1: &Linear,
    e2: &Linear,
    rel: Var,
) -> Var {
    let h = e1.apply(g, store, rel);
    let h = g.relu(h);
    let out = e2.apply(g, store, h);
    g.relu(out)
}

/// Full encoder: scales [N, N/2, N/4], two fusion steps, local code.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    ep: &EncoderParams,
    coords: Var,
    knn0: &Arc<Vec<usize>>,
    knn1: &Arc<Vec<usize>>,
    local_rel: Var,
    k: usize,
) -> Result<FeatureHierarchy> {
    let n = g.value(coords).nrows();
    assert!(n % 4 == 0, "patch size must be divisible by 4");
    let (n1, m) = (n / 2, n / 4);

    let f0 = encode_scale(g, store, &ep.stage0, coords, knn0, k);
    let g0 = global_vector(g, store, &ep.fuse0, f0)?;
    let h1 = fuse_scale(g, store, &ep.fuse0, g0, f0, n1)?;
    let f1 = encode_scale(g, store, &ep.stage1, h1, knn1, k);
    let g1 = global_vector(g, store, &ep.fuse1, f1)?;
    let fused_g = fuse_scale(g, store, &ep.fuse1, g1, f1, m)?;
    let local_c = local_code(g, store, &ep.local_e1, &ep.local_e2, local_rel);

    Ok(FeatureHierarchy {
        scales: vec![n, n1, m],
        features: vec![f0, f1, fused_g],
        fused_g,
        local_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::patch::knn_indices;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(77)
    }

    fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        Mat::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0))
    }

    fn identity_psi(store: &mut ParamStore, d: usize) -> FusionParams {
        let mut r = rng();
        let mut fp = FusionParams::define(store, &mut r, "attn", d, d, FusionMode::Attention);
        let psi = fp.psi.unwrap();
        store.set(psi.w, Mat::from_shape_fn((d, d), |(i, j)| if i == j { 1.0 } else { 0.0 }));
        store.set(fp.lambda.unwrap(), Mat::from_elem((1, 1), 1.0));
        fp.mode = FusionMode::Attention;
        fp
    }

    #[test]
    fn encode_scale_output_shape() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let stage = DenseStage::define(&mut store, &mut r, "s", 3, 16, true);
        let coords = random_coords(&mut r, 8);
        let knn = Arc::new(knn_indices(&coords, 3).unwrap());
        let mut g = Graph::new();
        let cv = g.leaf(coords);
        let f = encode_scale(&mut g, &store, &stage, cv, &knn, 3);
        assert_eq!(g.value(f).dim(), (8, 16));
    }

    #[test]
    fn encode_scale_duplicate_points_get_equal_features() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let stage = DenseStage::define(&mut store, &mut r, "s", 3, 8, true);
        let mut coords = random_coords(&mut r, 6);
        for c in 0..3 {
            coords[[4, c]] = coords[[2, c]];
        }
        let knn = Arc::new(knn_indices(&coords, 3).unwrap());
        let mut g = Graph::new();
        let cv = g.leaf(coords);
        let f = encode_scale(&mut g, &store, &stage, cv, &knn, 3);
        let fv = g.value(f);
        for c in 0..8 {
            assert!((fv[[2, c]] - fv[[4, c]]).abs() < 1e-12, "col {c}");
        }
    }

    #[test]
    fn encode_scale_is_permutation_consistent() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let stage = DenseStage::define(&mut store, &mut r, "s", 3, 8, true);
        let coords = random_coords(&mut r, 10);
        let knn = Arc::new(knn_indices(&coords, 4).unwrap());
        let mut g = Graph::new();
        let cv = g.leaf(coords.clone());
        let base_var = encode_scale(&mut g, &store, &stage, cv, &knn, 4);
        let base = g.value(base_var).clone();

        // reverse the rows; geometry (hence per-point features) must follow
        let perm: Vec<usize> = (0..10).rev().collect();
        let permuted = Mat::from_shape_fn((10, 3), |(i, c)| coords[[perm[i], c]]);
        let knn_p = Arc::new(knn_indices(&permuted, 4).unwrap());
        let mut g2 = Graph::new();
        let cv2 = g2.leaf(permuted);
        let out_var = encode_scale(&mut g2, &store, &stage, cv2, &knn_p, 4);
        let out = g2.value(out_var).clone();
        for i in 0..10 {
            for c in 0..8 {
                assert!((out[[i, c]] - base[[perm[i], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_for_constant_single_channel() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let fp = FusionParams::define(&mut store, &mut r, "f", 1, 1, FusionMode::Attention);
        // force q = identity so the scores see the raw constant column
        store.set(fp.q.unwrap().w, Mat::from_elem((1, 1), 1.0));
        let mut g = Graph::new();
        let f = g.leaf(Mat::from_elem((5, 1), 0.7));
        let attn = attention_scores(&mut g, &store, &fp, f).unwrap();
        let a = g.value(attn.a);
        for i in 0..5 {
            assert!((a[[i, 0]] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_scores_sum_to_one() {
        let mut r = rng();
        for d in [1usize, 8, 128] {
            let mut store = ParamStore::new();
            let fp = FusionParams::define(&mut store, &mut r, "f", d, d, FusionMode::Attention);
            for _ in 0..50 {
                let f = Mat::from_shape_fn((11, d), |_| r.gen_range(-30.0..30.0));
                let mut g = Graph::new();
                let fv = g.leaf(f);
                let attn = attention_scores(&mut g, &store, &fp, fv).unwrap();
                let total: f64 = g.value(attn.a).iter().sum();
                assert!((total - 1.0).abs() < 1e-5, "D={d}: sum {total}");
                assert!(g.value(attn.a).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn attention_two_channel_peaks_average() {
        // channel 0 peaks at point 0, channel 1 at point 1; scores average
        let mut store = ParamStore::new();
        let mut r = rng();
        let fp = FusionParams::define(&mut store, &mut r, "f", 2, 2, FusionMode::Attention);
        let q = fp.q.unwrap();
        store.set(q.w, Mat::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 }));
        let mut f = Mat::zeros((6, 2));
        f[[0, 0]] = 60.0;
        f[[1, 1]] = 60.0;
        let mut g = Graph::new();
        let fv = g.leaf(f.clone());
        let attn = attention_scores(&mut g, &store, &fp, fv).unwrap();
        let a = g.value(attn.a);
        // independent oracle: softmax each column of f, then average
        let mut expected = vec![0.0f64; 6];
        for col in 0..2 {
            let mx = (0..6).map(|i| f[[i, col]]).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = (0..6).map(|i| (f[[i, col]] - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            for i in 0..6 {
                expected[i] += exps[i] / s / 2.0;
            }
        }
        for i in 0..6 {
            assert!((a[[i, 0]] - expected[i]).abs() < 1e-12, "row {i}");
        }
        assert!(a[[0, 0]] > 0.45 && a[[1, 0]] > 0.45);
    }

    #[test]
    fn weighted_global_one_hot_selects_row() {
        let mut store = ParamStore::new();
        let fp = identity_psi(&mut store, 3);
        store.set(fp.psi.unwrap().b.unwrap(), Mat::zeros((1, 3)));
        let v_data = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let mut g = Graph::new();
        let mut a = Mat::zeros((4, 1));
        a[[2, 0]] = 1.0;
        let attn = AttnVars {
            q: g.leaf(Mat::zeros((4, 3))),
            v: g.leaf(v_data.clone()),
            a: g.leaf(a),
        };
        let out = weighted_global(&mut g, &store, &fp, &attn).unwrap();
        for j in 0..3 {
            assert!((g.value(out)[[0, j]] - v_data[[2, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_global_lambda_zero_gates_off() {
        let mut store = ParamStore::new();
        let fp = identity_psi(&mut store, 3);
        store.set(fp.lambda.unwrap(), Mat::zeros((1, 1)));
        let mut g = Graph::new();
        let attn = AttnVars {
            q: g.leaf(Mat::zeros((4, 3))),
            v: g.leaf(Mat::from_elem((4, 3), 2.5)),
            a: g.leaf(Mat::from_elem((4, 1), 0.25)),
        };
        let out = weighted_global(&mut g, &store, &fp, &attn).unwrap();
        assert!(g.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weighted_global_uniform_scores_average_rows() {
        let mut store = ParamStore::new();
        let fp = identity_psi(&mut store, 2);
        store.set(fp.psi.unwrap().b.unwrap(), Mat::zeros((1, 2)));
        store.set(fp.lambda.unwrap(), Mat::from_elem((1, 1), 0.5));
        let v = Mat::from_shape_vec((2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut g = Graph::new();
        let attn = AttnVars {
            q: g.leaf(Mat::zeros((2, 2))),
            v: g.leaf(v),
            a: g.leaf(Mat::from_elem((2, 1), 0.5)),
        };
        let out = weighted_global(&mut g, &store, &fp, &attn).unwrap();
        // psi(mean of rows) * lambda = [3, 5] * 0.5
        assert!((g.value(out)[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((g.value(out)[[0, 1]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn max_global_single_and_dominant_rows() {
        let mut g = Graph::new();
        let single = g.leaf(Mat::from_shape_vec((1, 3), vec![0.3, -0.4, 2.0]).unwrap());
        let out = max_global(&mut g, single);
        assert_eq!(g.value(out).as_slice().unwrap(), &[0.3, -0.4, 2.0]);

        let mut m = Mat::from_elem((5, 3), -1.0);
        for c in 0..3 {
            m[[3, c]] = 10.0 + c as f64;
        }
        let dom = g.leaf(m);
        let out2 = max_global(&mut g, dom);
        assert_eq!(g.value(out2).as_slice().unwrap(), &[10.0, 11.0, 12.0]);
    }

    #[test]
    fn eq18_one_hot_reduces_to_row_selection() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let fp = FusionParams::define(&mut store, &mut r, "e", 2, 2, FusionMode::Eq18Max);
        // identity q and psi, zero bias
        let q = fp.q.unwrap();
        let psi = fp.psi.unwrap();
        let v_lin = fp.v.unwrap();
        let eye = Mat::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        store.set(q.w, eye.clone());
        store.set(psi.w, eye.clone());
        store.set(v_lin.w, eye);
        // huge q at row 1 in both channels -> both softmax columns one-hot there
        let mut f = Mat::zeros((4, 2));
        f[[1, 0]] = 80.0;
        f[[1, 1]] = 80.0;
        let mut g = Graph::new();
        let fv = g.leaf(f);
        let out = eq18_global(&mut g, &store, &fp, fv).unwrap();
        // v row 1 is (80, 80) under identity V; max-pooled score there is ~1
        assert!((g.value(out)[[0, 0]] - 80.0).abs() < 1e-6);
        assert!((g.value(out)[[0, 1]] - 80.0).abs() < 1e-6);
    }

    #[test]
    fn fuse_scale_preserves_rows_and_ignores_dropped_tail() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let fp = FusionParams::define(&mut store, &mut r, "f", 4, 6, FusionMode::Max);
        let f = Mat::from_shape_fn((8, 4), |_| r.gen_range(-1.0..1.0));
        let global = Mat::from_shape_fn((1, 4), |_| r.gen_range(-1.0..1.0));

        let run = |feats: &Mat, n_next: usize| {
            let mut g = Graph::new();
            let fv = g.leaf(feats.clone());
            let gv = g.leaf(global.clone());
            let out = fuse_scale(&mut g, &store, &fp, gv, fv, n_next).unwrap();
            g.value(out).clone()
        };
        // same-size fusion keeps row count
        assert_eq!(run(&f, 8).nrows(), 8);
        // rows past the slice cannot influence the output
        let base = run(&f, 4);
        let mut tail_changed = f.clone();
        for c in 0..4 {
            tail_changed[[6, c]] += 5.0;
        }
        let after = run(&tail_changed, 4);
        assert_eq!(base, after);
    }

    #[test]
    fn fuse_scale_lambda_zero_degrades_to_local_only() {
        // with a zero global vector the output must match theta(0 : F_slice)
        let mut store = ParamStore::new();
        let mut r = rng();
        let fp = FusionParams::define(&mut store, &mut r, "f", 3, 5, FusionMode::Max);
        let f = Mat::from_shape_fn((6, 3), |_| r.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let fv = g.leaf(f.clone());
        let zero_g = g.leaf(Mat::zeros((1, 3)));
        let fused = fuse_scale(&mut g, &store, &fp, zero_g, fv, 3).unwrap();

        let mut g2 = Graph::new();
        let padded = {
            let mut p = Mat::zeros((3, 6));
            for i in 0..3 {
                for c in 0..3 {
                    p[[i, 3 + c]] = f[[i, c]];
                }
            }
            p
        };
        let pv = g2.leaf(padded);
        let t1 = fp.theta1.apply(&mut g2, &store, pv);
        let h = g2.relu(t1);
        let t2 = fp.theta2.apply(&mut g2, &store, h);
        let direct = g2.relu(t2);
        assert_eq!(g.value(fused), g2.value(direct));
    }

    #[test]
    fn local_features_exclude_self_and_shift_invariant() {
        let mut r = rng();
        let coords = random_coords(&mut r, 12);
        let k = 4;
        let knn = knn_indices(&coords, k).unwrap();
        let rel = local_relative_features(&coords, 12, &knn, k);
        // distinct random points: no zero-displacement rows
        for row in 0..rel.nrows() {
            assert!(rel[[row, 3]] > 0.0, "row {row} has zero displacement");
        }
        // translation invariance
        let shifted = coords.mapv(|v| v + 11.5);
        let knn_s = knn_indices(&shifted, k).unwrap();
        let rel_s = local_relative_features(&shifted, 12, &knn_s, k);
        let max_dev = (&rel - &rel_s).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 1e-9, "deviation {max_dev}");
        // uniform scaling scales displacement magnitudes
        let scaled = coords.mapv(|v| v * 3.0);
        let knn_c = knn_indices(&scaled, k).unwrap();
        let rel_c = local_relative_features(&scaled, 12, &knn_c, k);
        for row in 0..rel.nrows() {
            assert!((rel_c[[row, 3]] - 3.0 * rel[[row, 3]]).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_forward_shapes_and_m_quarter() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let ep = EncoderParams {
            stage0: DenseStage::define(&mut store, &mut r, "s0", 3, 8, true),
            stage1: DenseStage::define(&mut store, &mut r, "s1", 8, 12, false),
            fuse0: FusionParams::define(&mut store, &mut r, "f0", 8, 12, FusionMode::Attention),
            fuse1: FusionParams::define(&mut store, &mut r, "f1", 12, 16, FusionMode::Attention),
            local_e1: Linear::define(&mut store, &mut r, "l1", 4, 8, Init::FanIn),
            local_e2: Linear::define(&mut store, &mut r, "l2", 8, 10, Init::FanIn),
        };
        let n = 32;
        let k = 3;
        let coords = random_coords(&mut r, n);
        let knn0 = Arc::new(knn_indices(&coords, k).unwrap());
        let half = coords.slice(ndarray::s![..n / 2, ..]).to_owned();
        let knn1 = Arc::new(knn_indices(&half, k).unwrap());
        let fin = coords.slice(ndarray::s![..n / 4, ..]).to_owned();
        let knn_local = knn_indices(&fin, k).unwrap();
        let rel = local_relative_features(&fin, n / 4, &knn_local, k);

        let mut g = Graph::new();
        let cv = g.leaf(coords);
        let rv = g.leaf(rel);
        let hier = encoder_forward(&mut g, &store, &ep, cv, &knn0, &knn1, rv, k).unwrap();
        assert_eq!(hier.scales, vec![32, 16, 8]);
        assert_eq!(g.value(hier.fused_g).dim(), (8, 16));
        assert_eq!(g.value(hier.local_c).dim(), (8 * k, 10));
        // scales strictly decreasing, M = N/4 exactly
        assert!(hier.scales.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*hier.scales.last().unwrap(), n / 4);
    }
}
