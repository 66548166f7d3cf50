//! Dataset IO following the PCPNet file conventions.
//!
//! A shape is stored as `<name>.xyz` (ASCII, three floats per row) with
//! optional companions `<name>.normals` (same row count) and `<name>.pidx`
//! (evaluation subset indices, ASCII one-per-line or raw little-endian i32).
//! Split files (`trainingset*.txt`, `testset*.txt`) list one shape name per
//! line.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

/// The six PCPNet test categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    NoiseLow,
    NoiseMed,
    NoiseHigh,
    Stripe,
    Gradient,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Clean,
        Variant::NoiseLow,
        Variant::NoiseMed,
        Variant::NoiseHigh,
        Variant::Stripe,
        Variant::Gradient,
    ];

    /// Column label used in the six-category report table.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Clean => "None",
            Variant::NoiseLow => "Low",
            Variant::NoiseMed => "Med.",
            Variant::NoiseHigh => "High",
            Variant::Stripe => "Stripe",
            Variant::Gradient => "Grad.",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Guess the category from PCPNet-style name suffixes
/// (`*_noise_white_<sigma>`, `*_ddist_minmax[_layers]*`).
pub fn infer_variant(name: &str) -> Variant {
    if let Some(pos) = name.find("noise_white_") {
        let sigma_str = &name[pos + "noise_white_".len()..];
        let sigma: f64 = sigma_str
            .trim_end_matches(|c: char| !(c.is_ascii_digit()))
            .parse()
            .unwrap_or(f64::NAN);
        if sigma.is_finite() {
            if sigma <= 0.003 {
                Variant::NoiseLow
            } else if sigma <= 0.009 {
                Variant::NoiseMed
            } else {
                Variant::NoiseHigh
            }
        } else {
            log::warn!("could not parse noise level from {name}; assuming medium");
            Variant::NoiseMed
        }
    } else if name.contains("ddist") {
        if name.contains("layer") {
            Variant::Stripe
        } else {
            Variant::Gradient
        }
    } else {
        Variant::Clean
    }
}

/// Name of the clean counterpart of a variant shape (identity for clean ones).
pub fn clean_reference_name(name: &str) -> &str {
    for marker in ["_noise_white", "_ddist"] {
        if let Some(pos) = name.find(marker) {
            return &name[..pos];
        }
    }
    name
}

/// A point cloud with optional ground-truth normals and evaluation subset.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub name: String,
    pub variant: Variant,
    points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub eval_indices: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn from_points(name: &str, variant: Variant, points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation(format!("shape {name} has no points")));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Validation(format!(
                    "shape {name}: non-finite coordinate at point {i}"
                )));
            }
        }
        Ok(PointCloud {
            name: name.to_string(),
            variant,
            points,
            normals: None,
            eval_indices: None,
        })
    }

    /// Attach ground-truth normals, renormalizing each row to unit length.
    pub fn with_normals(mut self, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::Inconsistent(format!(
                "shape {}: {} coordinates but {} normals",
                self.name,
                self.points.len(),
                normals.len()
            )));
        }
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.into_iter().enumerate() {
            let len = n.norm();
            if !len.is_finite() || len < 1e-6 {
                return Err(Error::Validation(format!(
                    "shape {}: normal {i} has invalid length {len}",
                    self.name
                )));
            }
            unit.push(n / len);
        }
        self.normals = Some(unit);
        Ok(self)
    }

    pub fn with_eval_indices(mut self, indices: Vec<usize>) -> Result<Self> {
        let t = self.points.len();
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if i >= t {
                return Err(Error::Inconsistent(format!(
                    "shape {}: evaluation index {i} out of range (T = {t})",
                    self.name
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Inconsistent(format!(
                    "shape {}: duplicate evaluation index {i}",
                    self.name
                )));
            }
        }
        self.eval_indices = Some(indices);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        self.points[i]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        self.normals.as_ref().map(|n| n[i])
    }

    /// Indices evaluated by metrics: the subset when present, else all points.
    pub fn evaluation_indices(&self) -> Vec<usize> {
        match &self.eval_indices {
            Some(idx) => idx.clone(),
            None => (0..self.len()).collect(),
        }
    }
}

fn parse_float_rows(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", path.display()))
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected 3 columns, found {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("non-numeric token {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("non-finite value {f:?}"),
                });
            }
            vals[k] = v;
        }
        rows.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(rows)
}

/// Parse a `.pidx` file. ASCII one-index-per-line is tried first; if the file
/// is not ASCII integers it is read as raw little-endian i32.
fn parse_pidx(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", path.display()))
    })?;
    if let Ok(text) = std::str::from_utf8(&bytes) {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if !lines.is_empty() && lines.iter().all(|l| l.trim().parse::<u64>().is_ok()) {
            return Ok(lines
                .iter()
                .map(|l| l.trim().parse::<u64>().unwrap() as usize)
                .collect());
        }
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 0,
            msg: "not ASCII integers and size is not a multiple of 4 bytes".into(),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        let v = i32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if v < 0 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: 0,
                msg: format!("negative index {v}"),
            });
        }
        out.push(v as usize);
    }
    Ok(out)
}

/// Load `<name>.xyz` plus optional `.normals` / `.pidx` companions.
pub fn load_shape(root: &Path, name: &str) -> Result<PointCloud> {
    let xyz = root.join(format!("{name}.xyz"));
    if !xyz.is_file() {
        return Err(Error::Dataset(format!("missing shape file {}", xyz.display())));
    }
    let points = parse_float_rows(&xyz)?;
    let mut cloud = PointCloud::from_points(name, infer_variant(name), points)?;

    let normals_path = root.join(format!("{name}.normals"));
    if normals_path.is_file() {
        let normals = parse_float_rows(&normals_path)?;
        cloud = cloud.with_normals(normals)?;
    }
    let pidx_path = root.join(format!("{name}.pidx"));
    if pidx_path.is_file() {
        let idx = parse_pidx(&pidx_path)?;
        if idx.is_empty() {
            log::warn!("{}: empty index file ignored", pidx_path.display());
        } else {
            cloud = cloud.with_eval_indices(idx)?;
        }
    }
    Ok(cloud)
}

/// An ordered set of shapes with the per-epoch patch budget.
#[derive(Clone, Debug)]
pub struct SplitManifest {
    pub root: PathBuf,
    pub shape_names: Vec<String>,
    pub variants: Vec<Variant>,
    pub patches_per_shape_per_epoch: usize,
}

/// Default per-shape, per-epoch patch budget.
pub const DEFAULT_PATCHES_PER_SHAPE: usize = 1000;

impl SplitManifest {
    /// Read a split list file (one shape name per line, `#` comments allowed)
    /// and check that every shape resolves to a coordinate file.
    pub fn from_list_file(root: &Path, list: &Path, patches_per_shape: usize) -> Result<Self> {
        let text = fs::read_to_string(list).map_err(|e| {
            Error::Dataset(format!("cannot read split file {}: {e}", list.display()))
        })?;
        let names: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_string())
            .collect();
        Self::from_names(root, names, patches_per_shape)
    }

    pub fn from_names(root: &Path, names: Vec<String>, patches_per_shape: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Dataset("split contains no shapes".into()));
        }
        if patches_per_shape == 0 {
            return Err(Error::Validation(
                "patches_per_shape_per_epoch must be positive".into(),
            ));
        }
        for name in &names {
            let path = root.join(format!("{name}.xyz"));
            if !path.is_file() {
                return Err(Error::Dataset(format!(
                    "shape {name} does not resolve to {}",
                    path.display()
                )));
            }
        }
        let variants = names.iter().map(|n| infer_variant(n)).collect();
        Ok(SplitManifest {
            root: root.to_path_buf(),
            shape_names: names,
            variants,
            patches_per_shape_per_epoch: patches_per_shape,
        })
    }
}

/// One training sample: a shape index into the manifest and a query point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub shape: usize,
    pub point: usize,
}

fn derive_seed(seed: u64, label: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(epoch.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic patch sampler. Each shape's draws depend only on
/// (seed, shape name, epoch), so reordering or removing other shapes never
/// changes what a given shape contributes.
pub struct TrainingSampler {
    seed: u64,
    warned_replacement: AtomicBool,
}

impl TrainingSampler {
    pub fn new(seed: u64) -> Self {
        TrainingSampler {
            seed,
            warned_replacement: AtomicBool::new(false),
        }
    }

    /// Draw the epoch's patches: `patches_per_shape_per_epoch` query points
    /// per shape, without replacement when the shape is large enough.
    /// `sizes[i]` is the point count of manifest shape i.
    pub fn epoch_draws(
        &self,
        manifest: &SplitManifest,
        sizes: &[usize],
        epoch: u64,
    ) -> Vec<PatchRef> {
        assert_eq!(sizes.len(), manifest.shape_names.len());
        let count = manifest.patches_per_shape_per_epoch;
        let mut draws = Vec::with_capacity(count * sizes.len());
        for (shape, name) in manifest.shape_names.iter().enumerate() {
            let t = sizes[shape];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name, epoch));
            if count <= t {
                // partial Fisher-Yates: first `count` entries of a shuffle
                let mut idx: Vec<usize> = (0..t).collect();
                for i in 0..count {
                    let j = rng.gen_range(i..t);
                    idx.swap(i, j);
                }
                draws.extend(idx[..count].iter().map(|&point| PatchRef { shape, point }));
            } else {
                if !self.warned_replacement.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "shape {name} has {t} points but {count} patches requested; \
                         sampling with replacement"
                    );
                }
                draws.extend(
                    (0..count).map(|_| PatchRef {
                        shape,
                        point: rng.gen_range(0..t),
                    }),
                );
            }
        }
        // interleave shapes deterministically
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "epoch-shuffle", epoch));
        for i in (1..draws.len()).rev() {
            let j = rng.gen_range(0..=i);
            draws.swap(i, j);
        }
        draws
    }
}

/// Convenience wrapper matching the operation name used elsewhere.
pub fn sample_training_patches(
    manifest: &SplitManifest,
    seed: u64,
    sizes: &[usize],
    epoch: u64,
) -> Vec<PatchRef> {
    TrainingSampler::new(seed).epoch_draws(manifest, sizes, epoch)
}

/// Write predicted normals as ASCII rows. Full-cloud predictions produce one
/// row per point; partial predictions (matching `eval_indices`) additionally
/// produce a `.pidx` sidecar naming the covered points.
pub fn write_normals(cloud: &PointCloud, predictions: &[Vector3<f64>], path: &Path) -> Result<()> {
    for (i, p) in predictions.iter().enumerate() {
        let norm = p.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!(
                "prediction {i} is not unit length (norm {norm})"
            )));
        }
    }
    let partial = if predictions.len() == cloud.len() {
        None
    } else {
        match &cloud.eval_indices {
            Some(idx) if idx.len() == predictions.len() => Some(idx.clone()),
            _ => {
                return Err(Error::Validation(format!(
                    "{} predictions do not match {} points (and no matching evaluation subset)",
                    predictions.len(),
                    cloud.len()
                )))
            }
        }
    };
    let mut buf = String::with_capacity(predictions.len() * 48);
    for p in predictions {
        buf.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(buf.as_bytes())?;
    if let Some(idx) = partial {
        let sidecar = path.with_extension("pidx");
        let mut buf = String::new();
        for i in idx {
            buf.push_str(&format!("{i}\n"));
        }
        fs::write(sidecar, buf)?;
    }
    Ok(())
}

/// Read back a `.normals` file written by [`write_normals`].
pub fn load_normals_file(path: &Path) -> Result<Vec<Vector3<f64>>> {
    parse_float_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn load_three_point_shape() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "tri.xyz", "0 0 0\n1 0 0\n0 1 0\n");
        let cloud = load_shape(dir.path(), "tri").unwrap();
        assert_eq!(cloud.len(), 3);
        assert!(cloud.normals.is_none());
        assert!(cloud.eval_indices.is_none());
    }

    #[test]
    fn normals_are_renormalized_on_load() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "s.xyz", "0 0 0\n");
        write(dir.path(), "s.normals", "0 0 2\n");
        let cloud = load_shape(dir.path(), "s").unwrap();
        let n = cloud.normal(0).unwrap();
        assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn pidx_ascii_and_binary_agree() {
        let dir = TempDir::new().unwrap();
        let coords = (0..100).map(|i| format!("{i} 0 0")).collect::<Vec<_>>().join("\n");
        write(dir.path(), "a.xyz", &coords);
        write(dir.path(), "a.pidx", "3\n1\n7\n");
        let ascii = load_shape(dir.path(), "a").unwrap();
        assert_eq!(ascii.eval_indices.unwrap(), vec![3, 1, 7]);

        write(dir.path(), "b.xyz", &coords);
        let mut bytes = Vec::new();
        for v in [3i32, 1, 7] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.path().join("b.pidx"), &bytes).unwrap();
        let binary = load_shape(dir.path(), "b").unwrap();
        assert_eq!(binary.eval_indices.unwrap(), vec![3, 1, 7]);
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "bad.xyz", "0 0 0\n1 oops 0\n");
        let err = load_shape(dir.path(), "bad").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.xyz"), "{msg}");
        assert!(msg.contains(":2"), "{msg}");
    }

    #[test]
    fn wrong_column_count_is_a_parse_error() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "bad.xyz", "0 0 0 0\n");
        assert!(matches!(
            load_shape(dir.path(), "bad"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn nan_and_inf_rejected() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "n.xyz", "0 NaN 0\n");
        assert!(load_shape(dir.path(), "n").is_err());
        write(dir.path(), "i.xyz", "0 inf 0\n");
        assert!(load_shape(dir.path(), "i").is_err());
    }

    #[test]
    fn row_count_mismatch_is_inconsistent() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "m.xyz", "0 0 0\n1 1 1\n");
        write(dir.path(), "m.normals", "0 0 1\n");
        assert!(matches!(
            load_shape(dir.path(), "m"),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn eval_indices_validated() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "ra.xyz", "0 0 0\n1 1 1\n");
        write(dir.path(), "ra.pidx", "0\n5\n");
        assert!(matches!(load_shape(dir.path(), "ra"), Err(Error::Inconsistent(_))));
        write(dir.path(), "du.xyz", "0 0 0\n1 1 1\n");
        write(dir.path(), "du.pidx", "1\n1\n");
        assert!(matches!(load_shape(dir.path(), "du"), Err(Error::Inconsistent(_))));
    }

    fn tiny_manifest(dir: &Path, names: &[&str], patches: usize) -> SplitManifest {
        for n in names {
            write(dir, &format!("{n}.xyz"), "0 0 0\n1 0 0\n0 1 0\n0 0 1\n");
        }
        SplitManifest::from_names(
            dir,
            names.iter().map(|s| s.to_string()).collect(),
            patches,
        )
        .unwrap()
    }

    #[test]
    fn sampler_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path(), &["a", "b"], 3);
        let sizes = vec![4, 4];
        let once = sample_training_patches(&manifest, 7, &sizes, 0);
        let twice = sample_training_patches(&manifest, 7, &sizes, 0);
        assert_eq!(once, twice);
        let other_epoch = sample_training_patches(&manifest, 7, &sizes, 1);
        assert_ne!(once, other_epoch);
    }

    #[test]
    fn sampler_falls_back_to_replacement() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "small.xyz", "0 0 0\n1 1 1\n");
        let manifest =
            SplitManifest::from_names(dir.path(), vec!["small".into()], 5).unwrap();
        let draws = sample_training_patches(&manifest, 1, &[2], 0);
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|d| d.point < 2));
    }

    #[test]
    fn sampler_epoch_stream_length() {
        let dir = TempDir::new().unwrap();
        let names = ["s0", "s1", "s2", "s3"];
        for n in &names {
            let coords = (0..2000).map(|i| format!("{i} 0 0")).collect::<Vec<_>>().join("\n");
            write(dir.path(), &format!("{n}.xyz"), &coords);
        }
        let manifest = SplitManifest::from_names(
            dir.path(),
            names.iter().map(|s| s.to_string()).collect(),
            1000,
        )
        .unwrap();
        let draws = sample_training_patches(&manifest, 3, &[2000; 4], 0);
        assert_eq!(draws.len(), 4000);
        // without replacement within an epoch
        for shape in 0..4 {
            let mut seen = HashSet::new();
            for d in draws.iter().filter(|d| d.shape == shape) {
                assert!(seen.insert(d.point), "duplicate draw within epoch");
            }
            assert_eq!(seen.len(), 1000);
        }
    }

    #[test]
    fn per_shape_draws_survive_reordering() {
        let dir = TempDir::new().unwrap();
        let m1 = tiny_manifest(dir.path(), &["a", "b", "c"], 2);
        let m2 = SplitManifest::from_names(
            dir.path(),
            vec!["c".into(), "a".into(), "b".into()],
            2,
        )
        .unwrap();
        let d1 = sample_training_patches(&m1, 9, &[4, 4, 4], 5);
        let d2 = sample_training_patches(&m2, 9, &[4, 4, 4], 5);
        // shape "a" draws the same point multiset regardless of manifest order
        let mut a1: Vec<usize> = d1.iter().filter(|d| d.shape == 0).map(|d| d.point).collect();
        let mut a2: Vec<usize> = d2.iter().filter(|d| d.shape == 1).map(|d| d.point).collect();
        a1.sort_unstable();
        a2.sort_unstable();
        assert_eq!(a1, a2);
    }

    #[test]
    fn manifest_rejects_missing_shape() {
        let dir = TempDir::new().unwrap();
        assert!(matches!(
            SplitManifest::from_names(dir.path(), vec!["ghost".into()], 10),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn split_file_roundtrip() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "x.xyz", "0 0 0\n");
        write(dir.path(), "y.xyz", "0 0 0\n");
        let list = write(dir.path(), "trainingset.txt", "# comment\nx\ny\n\n");
        let manifest = SplitManifest::from_list_file(dir.path(), &list, 10).unwrap();
        assert_eq!(manifest.shape_names, vec!["x", "y"]);
    }

    #[test]
    fn write_normals_roundtrip_exact() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "rt.xyz", "0 0 0\n1 0 0\n");
        let cloud = load_shape(dir.path(), "rt").unwrap();
        let preds = vec![
            Vector3::new(0.26726124191242434, 0.5345224838248488, 0.8017837257372732),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let out = dir.path().join("rt.normals.out");
        write_normals(&cloud, &preds, &out).unwrap();
        let back = load_normals_file(&out).unwrap();
        for (a, b) in preds.iter().zip(&back) {
            assert!((a - b).norm() < 1e-6);
        }
        // second pass: write what was loaded, must be byte-identical
        let out2 = dir.path().join("rt.normals.out2");
        let cloud2 = load_shape(dir.path(), "rt").unwrap();
        write_normals(&cloud2, &back, &out2).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    }

    #[test]
    fn write_normals_partial_emits_sidecar() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "p.xyz", "0 0 0\n1 0 0\n2 0 0\n");
        write(dir.path(), "p.pidx", "2\n0\n");
        let cloud = load_shape(dir.path(), "p").unwrap();
        let preds = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let out = dir.path().join("p.pred");
        write_normals(&cloud, &preds, &out).unwrap();
        let rows = load_normals_file(&out).unwrap();
        assert_eq!(rows.len(), 2);
        let sidecar = fs::read_to_string(dir.path().join("p.pidx")).unwrap();
        assert_eq!(sidecar.trim(), "2\n0");
    }

    #[test]
    fn write_normals_rejects_zero_rows() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "z.xyz", "0 0 0\n");
        let cloud = load_shape(dir.path(), "z").unwrap();
        let err = write_normals(&cloud, &[Vector3::zeros()], &dir.path().join("z.out"));
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn variant_inference() {
        assert_eq!(infer_variant("star_smooth"), Variant::Clean);
        assert_eq!(infer_variant("star_noise_white_1.25e-03"), Variant::NoiseLow);
        assert_eq!(infer_variant("star_noise_white_6.00e-03"), Variant::NoiseMed);
        assert_eq!(infer_variant("star_noise_white_1.20e-02"), Variant::NoiseHigh);
        assert_eq!(infer_variant("star_ddist_minmax_layers"), Variant::Stripe);
        assert_eq!(infer_variant("star_ddist_minmax"), Variant::Gradient);
        assert_eq!(clean_reference_name("star_noise_white_1.20e-02"), "star");
        assert_eq!(clean_reference_name("star_ddist_minmax"), "star");
        assert_eq!(clean_reference_name("star"), "star");
    }

    proptest! {
        #[test]
        fn parser_rejects_any_non_finite(row in 0usize..3, col in 0usize..3, bad in prop::sample::select(vec!["NaN", "inf", "-inf"])) {
            let dir = TempDir::new().unwrap();
            let mut lines = Vec::new();
            for r in 0..3 {
                let mut fields = vec!["0.5".to_string(); 3];
                if r == row {
                    fields[col] = bad.to_string();
                }
                lines.push(fields.join(" "));
            }
            fs::write(dir.path().join("f.xyz"), lines.join("\n")).unwrap();
            prop_assert!(load_shape(dir.path(), "f").is_err());
        }

        #[test]
        fn normals_roundtrip_within_tolerance(vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20)) {
            let dir = TempDir::new().unwrap();
            let coords = vals.iter().map(|_| "0 0 0".to_string()).collect::<Vec<_>>().join("\n");
            fs::write(dir.path().join("u.xyz"), coords).unwrap();
            let cloud = load_shape(dir.path(), "u").unwrap();
            let preds: Vec<Vector3<f64>> = vals
                .iter()
                .map(|&(x, y, z)| {
                    let v = Vector3::new(x, y, z + 2.0); // never zero
                    v / v.norm()
                })
                .collect();
            let out = dir.path().join("u.out");
            write_normals(&cloud, &preds, &out).unwrap();
            let back = load_normals_file(&out).unwrap();
            for (a, b) in preds.iter().zip(&back) {
                prop_assert!((a - b).norm() < 1e-6);
            }
        }
    }
}
