//! Training loop: sampling, augmentation, batched gradients, checkpoints.

use crate::checkpoint;
use crate::dataset::{
    clean_reference_name, load_shape, PatchRef, PointCloud, SplitManifest, TrainingSampler,
    DEFAULT_PATCHES_PER_SHAPE,
};
use crate::encoder::FusionMode;
use crate::error::{Error, Result};
use crate::model::{Model, NetworkConfig, PatchInput};
use crate::nn::graph::Graph;
use crate::nn::optim::{lr_at_epoch, Adam};
use crate::nn::{grads_non_finite, merge_grads, scale_grads, Grads, ParamStore};
use crate::patch::{align_patch, extract_patch, random_rotation, transform_points, RawPatch};
use nalgebra::Vector3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// User-facing training configuration. Unknown keys are rejected when
/// deserializing, which is what makes CLI overrides type-safe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub depth: usize,
    pub attention_enabled: bool,
    pub mamba_enabled: bool,
    pub use_wt_loss: bool,
    pub use_cnd: bool,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    pub patches_per_shape_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 700,
            epochs: 900,
            batch_size: 100,
            lr: 5e-4,
            lr_milestones: vec![200, 400, 600, 800],
            lr_factor: 0.2,
            depth: 7,
            attention_enabled: true,
            mamba_enabled: true,
            use_wt_loss: true,
            use_cnd: false,
            fusion_mode: FusionMode::Attention,
            seed: 42,
            patches_per_shape_per_epoch: DEFAULT_PATCHES_PER_SHAPE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_factor {} must lie in (0, 1)",
                self.lr_factor
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for w in self.lr_milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("lr_milestones must be strictly increasing".into()));
            }
        }
        if let Some(last) = self.lr_milestones.last() {
            if *last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        self.network_config().validate()
    }

    /// Derive the architecture description. Disabling attention falls back to
    /// plain max fusion regardless of `fusion_mode`.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            patch_size: self.patch_size,
            depth: self.depth,
            fusion: if self.attention_enabled {
                self.fusion_mode
            } else {
                FusionMode::Max
            },
            mamba_enabled: self.mamba_enabled,
            ..NetworkConfig::default()
        }
    }

    pub fn config_hash(&self) -> String {
        checkpoint::config_hash(self, &self.network_config())
    }
}

/// Model, parameters, and optimizer bundled for training or inference.
pub struct TrainContext {
    pub cfg: TrainConfig,
    pub net_cfg: NetworkConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub start_epoch: usize,
}

impl TrainContext {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = cfg.network_config();
        let mut store = ParamStore::new();
        let model = Model::init(net_cfg.clone(), &mut store, cfg.seed)?;
        store.quantize_f32();
        let adam = Adam::new(&store);
        Ok(TrainContext {
            cfg,
            net_cfg,
            model,
            store,
            adam,
            start_epoch: 0,
        })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let model = Model::resolve(ckpt.network_config.clone(), &ckpt.store)?;
        let mut adam = Adam::new(&ckpt.store);
        if let Some((m, v)) = ckpt.adam_moments {
            adam.restore(m, v, ckpt.adam_step);
        }
        Ok(TrainContext {
            cfg: ckpt.train_config,
            net_cfg: ckpt.network_config,
            model,
            store: ckpt.store,
            adam,
            start_epoch: ckpt.epoch + 1,
        })
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        checkpoint::save(path, &self.cfg, &self.net_cfg, epoch, &self.store, Some(&self.adam))
    }
}

/// Forward + backward for one patch; returns (total loss, parameter grads).
pub fn patch_loss_and_grads(
    model: &Model,
    store: &ParamStore,
    input: &PatchInput,
    use_wt_loss: bool,
) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, input)?;
    let losses = model.loss(&mut g, &out, input, use_wt_loss)?;
    let total = g.value(losses.total)[[0, 0]];
    let bp = g.backward(losses.total);
    let grads = g.param_grads(&bp, store.len());
    Ok((total, grads))
}

/// Mean loss and mean gradients over a batch, evaluated patch-parallel with
/// a deterministic reduction order.
pub fn batch_loss_and_grads(
    model: &Model,
    store: &ParamStore,
    inputs: &[PatchInput],
    use_wt_loss: bool,
) -> Result<(f64, Grads)> {
    if inputs.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let per_patch: Vec<Result<(f64, Grads)>> = inputs
        .par_iter()
        .map(|input| patch_loss_and_grads(model, store, input, use_wt_loss))
        .collect();
    let mut total = 0.0;
    let mut grads: Grads = Vec::new();
    for r in per_patch {
        let (loss, g) = r?;
        total += loss;
        merge_grads(&mut grads, g);
    }
    let scale = 1.0 / inputs.len() as f64;
    scale_grads(&mut grads, scale);
    Ok((total * scale, grads))
}

fn derive_seed(seed: u64, label: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Training supervision source for one patch.
fn supervision_normal(
    cloud: &PointCloud,
    query: usize,
    clean_ref: Option<&PointCloud>,
) -> Result<Vector3<f64>> {
    match clean_ref {
        // nearest clean-surface neighbour's normal
        Some(clean) => {
            let p = cloud.point(query);
            let mut best = (f64::INFINITY, 0usize);
            for i in 0..clean.len() {
                let d = (clean.point(i) - p).norm_squared();
                if d < best.0 {
                    best = (d, i);
                }
            }
            clean
                .normal(best.1)
                .ok_or_else(|| Error::Dataset("clean reference has no normals".into()))
        }
        None => cloud
            .normal(query)
            .ok_or_else(|| Error::Dataset(format!("shape {} has no normals", cloud.name))),
    }
}

/// Build the network input for one training draw: extract, optionally rotate
/// (augmentation), align, and attach supervision targets.
pub fn build_training_input(
    cloud: &PointCloud,
    query: usize,
    net_cfg: &NetworkConfig,
    clean_ref: Option<&PointCloud>,
    augment_seed: Option<u64>,
) -> Result<PatchInput> {
    let raw = extract_patch(cloud, query, net_cfg.patch_size)?;
    let mut n_gt = supervision_normal(cloud, query, clean_ref)?;
    let raw = match augment_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotation(&mut rng);
            n_gt = rot * n_gt;
            RawPatch {
                coords: transform_points(&raw.coords, &rot, &Vector3::zeros()),
                query_world: rot * raw.query_world,
                source_indices: raw.source_indices,
            }
        }
        None => raw,
    };
    let aligned = align_patch(&raw)?;
    PatchInput::new(&aligned, net_cfg, Some(&n_gt))
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on a dataset split. Writes periodic checkpoints and
/// `ckpt_final.ckpt` under `out_dir`; NaN losses abort with a diagnostic
/// dump of the offending batch.
pub fn train(
    cfg: &TrainConfig,
    data_root: &Path,
    split_file: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = SplitManifest::from_list_file(data_root, split_file, cfg.patches_per_shape_per_epoch)?;

    let clouds: Vec<PointCloud> = manifest
        .shape_names
        .iter()
        .map(|name| load_shape(data_root, name))
        .collect::<Result<_>>()?;
    for c in &clouds {
        if c.normals.is_none() {
            return Err(Error::Dataset(format!(
                "training shape {} has no ground-truth normals",
                c.name
            )));
        }
        if c.len() < cfg.patch_size {
            return Err(Error::Dataset(format!(
                "shape {} has {} points, fewer than the patch size {}",
                c.name,
                c.len(),
                cfg.patch_size
            )));
        }
    }
    let clean_refs: Vec<Option<PointCloud>> = if cfg.use_cnd {
        manifest
            .shape_names
            .iter()
            .map(|name| {
                let clean = clean_reference_name(name);
                load_shape(data_root, clean).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        manifest.shape_names.iter().map(|_| None).collect()
    };

    let mut ctx = match resume {
        Some(path) => {
            let ctx = TrainContext::from_checkpoint(path)?;
            if ctx.cfg != *cfg {
                log::warn!("resume checkpoint config differs from the requested config; using the checkpoint's");
            }
            ctx
        }
        None => TrainContext::new(cfg.clone())?,
    };
    let cfg = ctx.cfg.clone();
    let net_cfg = ctx.net_cfg.clone();
    let sizes: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
    let sampler = TrainingSampler::new(cfg.seed);
    let save_every = (cfg.epochs / 10).max(1);

    let mut epoch_losses = Vec::new();
    for epoch in ctx.start_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, &cfg.lr_milestones, cfg.lr_factor, epoch);
        let draws = sampler.epoch_draws(&manifest, &sizes, epoch as u64);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for (batch_no, batch) in draws.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<(PatchRef, Result<PatchInput>)> = batch
                .par_iter()
                .enumerate()
                .map(|(i, d)| {
                    let aug = derive_seed(
                        cfg.seed,
                        "augment",
                        epoch as u64,
                        (batch_no * cfg.batch_size + i) as u64,
                    );
                    let input = build_training_input(
                        &clouds[d.shape],
                        d.point,
                        &net_cfg,
                        clean_refs[d.shape].as_ref(),
                        Some(aug),
                    );
                    (*d, input)
                })
                .collect();
            let mut ok_inputs = Vec::with_capacity(inputs.len());
            for (d, r) in inputs {
                match r {
                    Ok(i) => ok_inputs.push((d, i)),
                    Err(Error::DegeneratePatch(msg)) => {
                        log::warn!(
                            "skipping degenerate patch (shape {}, point {}): {msg}",
                            manifest.shape_names[d.shape],
                            d.point
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
            if ok_inputs.is_empty() {
                continue;
            }
            let batch_inputs: Vec<PatchInput> =
                ok_inputs.iter().map(|(_, i)| i.clone()).collect();
            let (loss, grads) =
                batch_loss_and_grads(&ctx.model, &ctx.store, &batch_inputs, cfg.use_wt_loss)?;
            if !loss.is_finite() || grads_non_finite(&grads) {
                let ids: Vec<(String, usize)> = ok_inputs
                    .iter()
                    .map(|(d, _)| (manifest.shape_names[d.shape].clone(), d.point))
                    .collect();
                let dump = out_dir.join("nan_dump.json");
                let payload = serde_json::json!({
                    "epoch": epoch,
                    "batch": batch_no,
                    "loss": if loss.is_finite() { Some(loss) } else { None::<f64> },
                    "patches": ids,
                });
                std::fs::write(&dump, serde_json::to_vec_pretty(&payload).expect("dump"))?;
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} batch {batch_no}; offending patch ids dumped to {}",
                    dump.display()
                )));
            }
            ctx.adam.step(&mut ctx.store, &grads, lr);
            epoch_loss_sum += loss;
            epoch_batches += 1;
        }
        let mean_loss = epoch_loss_sum / epoch_batches.max(1) as f64;
        epoch_losses.push(mean_loss);
        log::info!("epoch {epoch}: lr {lr:.2e}, mean loss {mean_loss:.6}");
        if (epoch + 1) % save_every == 0 && epoch + 1 != cfg.epochs {
            ctx.save(&out_dir.join(format!("ckpt_{epoch}.ckpt")), epoch)?;
        }
    }
    let final_path = out_dir.join("ckpt_final.ckpt");
    ctx.save(&final_path, cfg.epochs.saturating_sub(1))?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        epoch_losses,
    })
}

/// Optimize directly on a fixed set of patch inputs (overfit/regression
/// harness). Minibatches rotate deterministically through the set; returns
/// the per-step mean batch loss.
pub fn fit_patches(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    inputs: &[PatchInput],
    steps: usize,
    minibatch: usize,
    lr: f64,
    use_wt_loss: bool,
) -> Result<Vec<f64>> {
    if inputs.is_empty() || minibatch == 0 {
        return Err(Error::Validation("need patches and a positive minibatch".into()));
    }
    let mut history = Vec::with_capacity(steps);
    let mut cursor = 0usize;
    for _ in 0..steps {
        let batch: Vec<PatchInput> = (0..minibatch.min(inputs.len()))
            .map(|i| inputs[(cursor + i) % inputs.len()].clone())
            .collect();
        cursor = (cursor + minibatch) % inputs.len();
        let (loss, grads) = batch_loss_and_grads(model, store, &batch, use_wt_loss)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite loss during fit".into()));
        }
        adam.step(store, &grads, lr);
        history.push(loss);
    }
    Ok(history)
}
