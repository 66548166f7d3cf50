//! Full network assembly: encoder, tokenizer, block chain, output head.

use crate::encoder::{
    encoder_forward, local_relative_features, DenseStage, EncoderParams, FeatureHierarchy,
    FusionMode, FusionParams, LOCAL_EMBED_MID,
};
use crate::error::{Error, Result};
use crate::head::{
    point_weights, predict_normal, sin_loss_graph, total_loss_graph, weight_loss_graph,
    weight_targets, HeadParams,
};
use crate::nn::graph::{Graph, Mat, Var};
use crate::nn::{Init, Linear, ParamStore};
use crate::patch::{knn_indices, AlignedPatch};
use crate::pssm::{mamba_block, tokenize, validate_depth, MambaBlockParams, TokenizerParams};
use nalgebra::Vector3;
use ndarray::s;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Architecture hyper-parameters. Everything is recorded in checkpoints so a
/// saved model is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Patch size N; scales run [N, N/2, N/4].
    pub patch_size: usize,
    /// Neighbourhood size for feature aggregation and the local code.
    pub knn: usize,
    /// Width of the finest dense stage.
    pub scale0_dim: usize,
    /// Width of the middle dense stage.
    pub scale1_dim: usize,
    /// Width of the fused code G.
    pub global_dim: usize,
    /// Width of the local code C.
    pub local_dim: usize,
    /// Token embedding width E.
    pub embed_dim: usize,
    /// SSM state size per channel.
    pub state_dim: usize,
    /// Depth-wise convolution width inside each block.
    pub conv_width: usize,
    /// Inner expansion factor of each block.
    pub expand: usize,
    /// Rank of the step-size projection.
    pub dt_rank: usize,
    /// Number of Mamba blocks.
    pub depth: usize,
    pub fusion: FusionMode,
    /// When false the chain is skipped and tokens feed the head directly.
    pub mamba_enabled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            patch_size: 700,
            knn: 16,
            scale0_dim: 64,
            scale1_dim: 96,
            global_dim: 128,
            local_dim: 64,
            embed_dim: 128,
            state_dim: 16,
            conv_width: 4,
            expand: 2,
            dt_rank: 8,
            depth: 7,
            fusion: FusionMode::Attention,
            mamba_enabled: true,
        }
    }
}

impl NetworkConfig {
    /// Token count M = N/4.
    pub fn token_count(&self) -> usize {
        self.patch_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 4 != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be divisible by 4",
                self.patch_size
            )));
        }
        if self.token_count() <= self.knn {
            return Err(Error::Config(format!(
                "patch size {} leaves {} tokens, not enough for k = {}",
                self.patch_size,
                self.token_count(),
                self.knn
            )));
        }
        if self.mamba_enabled {
            validate_depth(self.depth)?;
        }
        for (name, v) in [
            ("scale0_dim", self.scale0_dim),
            ("scale1_dim", self.scale1_dim),
            ("global_dim", self.global_dim),
            ("local_dim", self.local_dim),
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("conv_width", self.conv_width),
            ("expand", self.expand),
            ("dt_rank", self.dt_rank),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Pre-computed per-patch network input: aligned geometry, neighbour tables,
/// and (for training) the supervision targets in the aligned frame.
#[derive(Clone, Debug)]
pub struct PatchInput {
    /// N x 3 aligned coordinates, distance-ordered from the query.
    pub coords: Mat,
    pub knn0: Arc<Vec<usize>>,
    pub knn1: Arc<Vec<usize>>,
    /// (M*k) x 4 relative displacement features at the final scale.
    pub local_rel: Mat,
    /// Ground-truth normal in the aligned frame (training only).
    pub n_gt_aligned: Option<Vector3<f64>>,
    /// M x 1 weight targets (training only).
    pub w_targets: Option<Mat>,
}

impl PatchInput {
    pub fn new(
        patch: &AlignedPatch,
        cfg: &NetworkConfig,
        n_gt_world: Option<&Vector3<f64>>,
    ) -> Result<PatchInput> {
        let n = patch.coords.nrows();
        if n != cfg.patch_size {
            return Err(Error::ShapeMismatch(format!(
                "patch has {n} points, config expects {}",
                cfg.patch_size
            )));
        }
        cfg.validate()?;
        let k = cfg.knn;
        let m = cfg.token_count();
        let knn0 = Arc::new(knn_indices(&patch.coords, k)?);
        let half = patch.coords.slice(s![..n / 2, ..]).to_owned();
        let knn1 = Arc::new(knn_indices(&half, k)?);
        let fine = patch.coords.slice(s![..m, ..]).to_owned();
        let knn_local = knn_indices(&fine, k)?;
        let local_rel = local_relative_features(&fine, m, &knn_local, k);

        let (n_gt_aligned, w_targets) = match n_gt_world {
            Some(nw) => {
                let aligned = (patch.rotation * nw).normalize();
                let (targets, _) = weight_targets(&fine, &aligned);
                (
                    Some(aligned),
                    Some(Mat::from_shape_vec((m, 1), targets).expect("target shape")),
                )
            }
            None => (None, None),
        };
        Ok(PatchInput {
            coords: patch.coords.clone(),
            knn0,
            knn1,
            local_rel,
            n_gt_aligned,
            w_targets,
        })
    }
}

/// All learnable components.
pub struct Model {
    pub cfg: NetworkConfig,
    pub encoder: EncoderParams,
    pub tokenizer: TokenizerParams,
    pub blocks: Vec<MambaBlockParams>,
    pub head: HeadParams,
}

/// Handles to the interesting intermediate nodes of one forward pass.
pub struct ForwardOut {
    pub hierarchy: FeatureHierarchy,
    pub tokens: Var,
    pub surface: Var,
    pub weights: Var,
    pub raw_normal: Var,
    pub n_hat: Var,
}

pub struct LossVars {
    pub sin: Var,
    pub wt: Option<Var>,
    pub total: Var,
}

impl Model {
    /// Define all parameters in canonical order.
    pub fn init(cfg: NetworkConfig, store: &mut ParamStore, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams {
            stage0: DenseStage::define(store, &mut rng, "encoder.s0", 3, cfg.scale0_dim, true),
            fuse0: FusionParams::define(
                store,
                &mut rng,
                "encoder.fuse0",
                cfg.scale0_dim,
                cfg.scale1_dim,
                cfg.fusion,
            ),
            stage1: DenseStage::define(store, &mut rng, "encoder.s1", cfg.scale1_dim, cfg.scale1_dim, false),
            fuse1: FusionParams::define(
                store,
                &mut rng,
                "encoder.fuse1",
                cfg.scale1_dim,
                cfg.global_dim,
                cfg.fusion,
            ),
            local_e1: Linear::define(store, &mut rng, "encoder.local.e1", 4, LOCAL_EMBED_MID, Init::FanIn),
            local_e2: Linear::define(
                store,
                &mut rng,
                "encoder.local.e2",
                LOCAL_EMBED_MID,
                cfg.local_dim,
                Init::FanIn,
            ),
        };
        let tokenizer = TokenizerParams::define(
            store,
            &mut rng,
            "tokenizer",
            cfg.global_dim,
            cfg.local_dim,
            cfg.embed_dim,
        );
        let blocks = if cfg.mamba_enabled {
            (0..cfg.depth)
                .map(|i| {
                    MambaBlockParams::define(
                        store,
                        &mut rng,
                        &format!("block{i}"),
                        cfg.embed_dim,
                        cfg.expand,
                        cfg.state_dim,
                        cfg.dt_rank,
                        cfg.conv_width,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let head = HeadParams::define(store, &mut rng, "head", cfg.embed_dim);
        Ok(Model {
            cfg,
            encoder,
            tokenizer,
            blocks,
            head,
        })
    }

    /// Re-bind parameter handles against a store loaded from a checkpoint.
    pub fn resolve(cfg: NetworkConfig, store: &ParamStore) -> Result<Model> {
        cfg.validate()?;
        let encoder = EncoderParams {
            stage0: DenseStage::resolve(store, "encoder.s0", true)?,
            fuse0: FusionParams::resolve(store, "encoder.fuse0", cfg.fusion)?,
            stage1: DenseStage::resolve(store, "encoder.s1", false)?,
            fuse1: FusionParams::resolve(store, "encoder.fuse1", cfg.fusion)?,
            local_e1: Linear::resolve(store, "encoder.local.e1", true)?,
            local_e2: Linear::resolve(store, "encoder.local.e2", true)?,
        };
        let tokenizer = TokenizerParams::resolve(store, "tokenizer")?;
        let blocks = if cfg.mamba_enabled {
            (0..cfg.depth)
                .map(|i| {
                    MambaBlockParams::resolve(store, &format!("block{i}"), cfg.state_dim, cfg.dt_rank)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = HeadParams::resolve(store, "head")?;
        Ok(Model {
            cfg,
            encoder,
            tokenizer,
            blocks,
            head,
        })
    }

    /// Forward pass over one patch; builds nodes in `g`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PatchInput) -> Result<ForwardOut> {
        let coords = g.leaf(input.coords.clone());
        let local_rel = g.leaf(input.local_rel.clone());
        let hierarchy = encoder_forward(
            g,
            store,
            &self.encoder,
            coords,
            &input.knn0,
            &input.knn1,
            local_rel,
            self.cfg.knn,
        )?;
        let tokens = tokenize(
            g,
            store,
            &self.tokenizer,
            hierarchy.fused_g,
            hierarchy.local_c,
            self.cfg.knn,
        )?;
        let surface = if self.cfg.mamba_enabled {
            let mut t = tokens;
            for bp in &self.blocks {
                t = mamba_block(g, store, bp, t);
            }
            t
        } else {
            tokens
        };
        let weights = point_weights(g, store, &self.head, surface);
        let (raw_normal, n_hat) = predict_normal(g, store, &self.head, surface, weights)?;
        Ok(ForwardOut {
            hierarchy,
            tokens,
            surface,
            weights,
            raw_normal,
            n_hat,
        })
    }

    /// Attach the training losses to a forward pass.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardOut,
        input: &PatchInput,
        use_wt_loss: bool,
    ) -> Result<LossVars> {
        let n_gt = input.n_gt_aligned.ok_or_else(|| {
            Error::Validation("patch input carries no ground-truth normal".into())
        })?;
        let gt = g.leaf(Mat::from_shape_vec((1, 3), vec![n_gt.x, n_gt.y, n_gt.z]).expect("1x3"));
        let sin = sin_loss_graph(g, out.n_hat, gt);
        if use_wt_loss {
            let targets = input.w_targets.as_ref().ok_or_else(|| {
                Error::Validation("patch input carries no weight targets".into())
            })?;
            let tv = g.leaf(targets.clone());
            let wt = weight_loss_graph(g, out.weights, tv);
            let total = total_loss_graph(g, sin, wt);
            Ok(LossVars {
                sin,
                wt: Some(wt),
                total,
            })
        } else {
            let total = g.scale(sin, crate::head::GAMMA_SIN);
            Ok(LossVars {
                sin,
                wt: None,
                total,
            })
        }
    }

    /// Inference: predicted normal in the aligned frame plus point weights.
    pub fn predict_aligned(
        &self,
        store: &ParamStore,
        input: &PatchInput,
    ) -> Result<(Vector3<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, input)?;
        let n = g.value(out.n_hat);
        let normal = Vector3::new(n[[0, 0]], n[[0, 1]], n[[0, 2]]);
        let weights = g.value(out.weights).column(0).to_vec();
        Ok((normal, weights))
    }
}
