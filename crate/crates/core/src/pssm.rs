//! Patch-wise state-space model: token construction and the Mamba-block
//! chain that fits the implicit hyper-surface.
//!
//! Tokens are ordered by each point's distance to the query (the patch's
//! native row order), so the recurrence walks outward from the query point.
//! Two SSM forms are provided: the exact recurrence (`ssm_scan`, also the
//! training path) and the global-convolution form (`ssm_conv`), which only
//! exists for time-invariant parameters and serves as an independent
//! cross-check.

use crate::error::{Error, Result};
use crate::nn::graph::{scan_forward, Graph, Mat, Var};
use crate::nn::{init_matrix, Init, Linear, ParamId, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Allowed Mamba-chain depths.
pub const DEPTH_RANGE: std::ops::RangeInclusive<usize> = 6..=8;

pub fn validate_depth(depth: usize) -> Result<()> {
    if DEPTH_RANGE.contains(&depth) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "chain depth {depth} outside the supported range {:?}",
            DEPTH_RANGE
        )))
    }
}

/// Parameters of the token constructor: residual stack over the concatenated
/// (G, C) code followed by an output transform and a max-pool over the k
/// neighbour rows of each point.
#[derive(Clone, Copy, Debug)]
pub struct TokenizerParams {
    pub rin: Linear,
    pub ra: Linear,
    pub rb: Linear,
    pub out: Linear,
}

impl TokenizerParams {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        global_dim: usize,
        local_dim: usize,
        embed_dim: usize,
    ) -> TokenizerParams {
        TokenizerParams {
            rin: Linear::define(store, rng, &format!("{name}.rin"), global_dim + local_dim, embed_dim, Init::FanIn),
            ra: Linear::define(store, rng, &format!("{name}.ra"), embed_dim, embed_dim, Init::FanIn),
            rb: Linear::define(store, rng, &format!("{name}.rb"), embed_dim, embed_dim, Init::FanIn),
            out: Linear::define(store, rng, &format!("{name}.out"), embed_dim, embed_dim, Init::FanIn),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str) -> Result<TokenizerParams> {
        Ok(TokenizerParams {
            rin: Linear::resolve(store, &format!("{name}.rin"), true)?,
            ra: Linear::resolve(store, &format!("{name}.ra"), true)?,
            rb: Linear::resolve(store, &format!("{name}.rb"), true)?,
            out: Linear::resolve(store, &format!("{name}.out"), true)?,
        })
    }
}

/// Build the M x E token sequence from the fused code (M x C_G) and the local
/// code ((M*k) x C_C). The fused row is broadcast over its k neighbour rows,
/// mixed by a residual per-point stack, transformed, and max-pooled over k.
pub fn tokenize(
    g: &mut Graph,
    store: &ParamStore,
    tp: &TokenizerParams,
    fused_g: Var,
    local_c: Var,
    k: usize,
) -> Result<Var> {
    let m = g.value(fused_g).nrows();
    let rows = g.value(local_c).nrows();
    if rows != m * k {
        return Err(Error::ShapeMismatch(format!(
            "local code has {rows} rows, expected {m} x {k}"
        )));
    }
    let bcast: Arc<Vec<usize>> = Arc::new((0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect());
    let dup = g.gather_rows(fused_g, bcast);
    let cat = g.concat_cols(&[dup, local_c]);
    let r0 = tp.rin.apply(g, store, cat);
    let r0 = g.relu(r0);
    let ra = tp.ra.apply(g, store, r0);
    let ra = g.relu(ra);
    let rb = tp.rb.apply(g, store, ra);
    let res = g.add(r0, rb);
    let t = tp.out.apply(g, store, res);
    Ok(g.max_pool_groups(t, k))
}

/// State-space parameters, either time-invariant (per-channel discretized
/// system, admits the convolution form) or selective (per-token step sizes
/// and input/output maps, scan only).
#[derive(Clone, Debug)]
pub enum SsmParameters {
    TimeInvariant {
        /// D x S discrete transition per channel and state.
        a_bar: Mat,
        /// D x S input map.
        b_bar: Mat,
        /// D x S output map.
        c_out: Mat,
    },
    Selective {
        /// D x S continuous-time transition (negative for stability).
        a: Mat,
        /// L x D per-token step sizes; abar = exp(delta * a), bbar = delta * b.
        delta: Mat,
        /// L x S input map per token.
        b: Mat,
        /// L x S output map per token.
        c: Mat,
    },
}

/// Exact recurrence h_t = abar h_{t-1} + bbar x_t, y_t = c h_t with h_0 = 0.
pub fn ssm_scan(params: &SsmParameters, x: &Mat) -> Result<Mat> {
    let (l, d) = x.dim();
    match params {
        SsmParameters::TimeInvariant { a_bar, b_bar, c_out } => {
            let s = a_bar.ncols();
            if a_bar.nrows() != d || b_bar.dim() != (d, s) || c_out.dim() != (d, s) {
                return Err(Error::ShapeMismatch(
                    "time-invariant parameter shapes do not match the input".into(),
                ));
            }
            let mut y = Mat::zeros((l, d));
            let mut h = vec![0.0f64; d * s];
            for t in 0..l {
                for di in 0..d {
                    let xv = x[[t, di]];
                    let mut acc = 0.0;
                    for si in 0..s {
                        let idx = di * s + si;
                        h[idx] = a_bar[[di, si]] * h[idx] + b_bar[[di, si]] * xv;
                        acc += c_out[[di, si]] * h[idx];
                    }
                    y[[t, di]] = acc;
                }
            }
            Ok(y)
        }
        SsmParameters::Selective { a, delta, b, c } => {
            let s = a.ncols();
            if delta.dim() != (l, d) || a.nrows() != d || b.dim() != (l, s) || c.dim() != (l, s) {
                return Err(Error::ShapeMismatch(
                    "selective parameter shapes do not match the input".into(),
                ));
            }
            let (y, _, _) = scan_forward(delta, a, b, c, x, false);
            Ok(y)
        }
    }
}

/// Global-convolution form: y = x * K with K_j = c abar^j bbar per channel.
/// Only defined for time-invariant parameters; selective parameters must use
/// [`ssm_scan`].
pub fn ssm_conv(params: &SsmParameters, x: &Mat) -> Result<Mat> {
    let (l, d) = x.dim();
    match params {
        SsmParameters::Selective { .. } => Err(Error::Unsupported(
            "token-varying parameters have no convolution kernel; use ssm_scan".into(),
        )),
        SsmParameters::TimeInvariant { a_bar, b_bar, c_out } => {
            let s = a_bar.ncols();
            if a_bar.nrows() != d || b_bar.dim() != (d, s) || c_out.dim() != (d, s) {
                return Err(Error::ShapeMismatch(
                    "time-invariant parameter shapes do not match the input".into(),
                ));
            }
            // kernel[d][j] = sum_s c[d,s] * a_bar[d,s]^j * b_bar[d,s]
            let mut kernel = Mat::zeros((d, l));
            for di in 0..d {
                let mut pow = vec![1.0f64; s];
                for j in 0..l {
                    let mut acc = 0.0;
                    for si in 0..s {
                        acc += c_out[[di, si]] * pow[si] * b_bar[[di, si]];
                        pow[si] *= a_bar[[di, si]];
                    }
                    kernel[[di, j]] = acc;
                }
            }
            let mut y = Mat::zeros((l, d));
            for t in 0..l {
                for di in 0..d {
                    let mut acc = 0.0;
                    for j in 0..=t {
                        acc += kernel[[di, j]] * x[[t - j, di]];
                    }
                    y[[t, di]] = acc;
                }
            }
            Ok(y)
        }
    }
}

/// Parameters of one Mamba block.
#[derive(Clone, Debug)]
pub struct MambaBlockParams {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub out_proj: Linear,
    pub state_dim: usize,
    pub dt_rank: usize,
}

impl MambaBlockParams {
    /// Define one block. The output projection is zero-initialized so a
    /// freshly built chain is the identity map. The step-size projection bias
    /// is set so softplus lands in [1e-3, 1e-1], and the continuous
    /// transition starts at -(1..=S) per state.
    #[allow(clippy::too_many_arguments)]
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        embed_dim: usize,
        expand: usize,
        state_dim: usize,
        dt_rank: usize,
        conv_width: usize,
    ) -> MambaBlockParams {
        let inner = embed_dim * expand;
        let ln_gamma = store.define(&format!("{name}.ln.gamma"), Mat::from_elem((1, embed_dim), 1.0));
        let ln_beta = store.define(&format!("{name}.ln.beta"), Mat::zeros((1, embed_dim)));
        let in_proj = Linear::define(store, rng, &format!("{name}.in_proj"), embed_dim, inner, Init::FanIn);
        let gate_proj = Linear::define(store, rng, &format!("{name}.gate_proj"), embed_dim, inner, Init::FanIn);
        let conv_w = store.define(
            &format!("{name}.conv.w"),
            init_matrix(rng, inner, conv_width, Init::FanIn),
        );
        let conv_b = store.define(&format!("{name}.conv.b"), Mat::zeros((1, inner)));
        let x_proj = Linear::define_no_bias(
            store,
            rng,
            &format!("{name}.x_proj"),
            inner,
            dt_rank + 2 * state_dim,
            Init::FanIn,
        );
        let dt_proj = {
            let mut lin = Linear::define(store, rng, &format!("{name}.dt_proj"), dt_rank, inner, Init::FanIn);
            // bias = softplus^{-1}(dt) with dt log-uniform in [1e-3, 1e-1]
            let mut bias = Mat::zeros((1, inner));
            for c in 0..inner {
                let u: f64 = rng.gen_range(0.0..1.0);
                let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                bias[[0, c]] = (dt.exp() - 1.0).ln();
            }
            let b = lin.b.take().expect("dt_proj has a bias");
            store.set(b, bias);
            lin.b = Some(b);
            lin
        };
        let a_log = {
            let mut m = Mat::zeros((inner, state_dim));
            for di in 0..inner {
                for si in 0..state_dim {
                    m[[di, si]] = ((si + 1) as f64).ln();
                }
            }
            store.define(&format!("{name}.a_log"), m)
        };
        let out_proj = Linear::define(store, rng, &format!("{name}.out_proj"), inner, embed_dim, Init::Zeros);
        MambaBlockParams {
            ln_gamma,
            ln_beta,
            in_proj,
            gate_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            out_proj,
            state_dim,
            dt_rank,
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, state_dim: usize, dt_rank: usize) -> Result<MambaBlockParams> {
        Ok(MambaBlockParams {
            ln_gamma: store.id(&format!("{name}.ln.gamma"))?,
            ln_beta: store.id(&format!("{name}.ln.beta"))?,
            in_proj: Linear::resolve(store, &format!("{name}.in_proj"), true)?,
            gate_proj: Linear::resolve(store, &format!("{name}.gate_proj"), true)?,
            conv_w: store.id(&format!("{name}.conv.w"))?,
            conv_b: store.id(&format!("{name}.conv.b"))?,
            x_proj: Linear::resolve(store, &format!("{name}.x_proj"), false)?,
            dt_proj: Linear::resolve(store, &format!("{name}.dt_proj"), true)?,
            a_log: store.id(&format!("{name}.a_log"))?,
            out_proj: Linear::resolve(store, &format!("{name}.out_proj"), true)?,
            state_dim,
            dt_rank,
        })
    }
}

/// One Mamba block:
///   t' = DWConv(Linear(LN(t_in)))
///   s  = Linear(SSM(silu(t')) * silu(Linear(LN(t_in))))
///   out = s + t_in
pub fn mamba_block(g: &mut Graph, store: &ParamStore, bp: &MambaBlockParams, t_in: Var) -> Var {
    let gamma = g.param_leaf(store.value(bp.ln_gamma).clone(), bp.ln_gamma);
    let beta = g.param_leaf(store.value(bp.ln_beta).clone(), bp.ln_beta);
    let xn = g.layer_norm(t_in, gamma, beta, 1e-5);

    let xa = bp.in_proj.apply(g, store, xn);
    let conv_w = g.param_leaf(store.value(bp.conv_w).clone(), bp.conv_w);
    let conv_b = g.param_leaf(store.value(bp.conv_b).clone(), bp.conv_b);
    let xc = g.dw_causal_conv(xa, conv_w, conv_b);
    let xs = g.silu(xc);

    let proj = bp.x_proj.apply(g, store, xs);
    let (r, s) = (bp.dt_rank, bp.state_dim);
    let dt_low = g.slice_cols(proj, 0, r);
    let b_mat = g.slice_cols(proj, r, r + s);
    let c_mat = g.slice_cols(proj, r + s, r + 2 * s);
    let dt_full = bp.dt_proj.apply(g, store, dt_low);
    let delta = g.softplus(dt_full);
    let a_log = g.param_leaf(store.value(bp.a_log).clone(), bp.a_log);
    let a_exp = g.exp(a_log);
    let a_cont = g.scale(a_exp, -1.0);
    let y = g.selective_scan(delta, a_cont, b_mat, c_mat, xs);

    let zg = bp.gate_proj.apply(g, store, xn);
    let zs = g.silu(zg);
    let gated = g.mul(y, zs);
    let out = bp.out_proj.apply(g, store, gated);
    g.add(out, t_in)
}

/// Sequential composition of the block chain over the token sequence.
pub fn run_chain(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[MambaBlockParams],
    tokens: Var,
) -> Result<Var> {
    validate_depth(blocks.len())?;
    let mut t = tokens;
    for bp in blocks {
        t = mamba_block(g, store, bp, t);
    }
    Ok(t)
}
