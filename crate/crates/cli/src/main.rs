//! normest: train, evaluate, and run point-cloud normal estimation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 dataset error,
//! 4 numerical abort, 1 anything else. Failures print a single
//! machine-parsable line: `normest: error[<category>]: <message>`.

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use normest_core::bench::{bench_scaling, MemProbe};
use normest_core::dataset::{load_normals_file, load_shape, write_normals, SplitManifest};
use normest_core::error::Error as CoreError;
use normest_core::eval::{evaluate, EvalOptions, Predictor};
use normest_core::train::{train, TrainConfig, TrainContext};
use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

// Counting allocator so `bench` can report peak heap usage.
struct CountingAlloc;

static ALLOCATED: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = ALLOCATED.fetch_add(layout.size() as u64, Ordering::Relaxed)
                + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        ALLOCATED.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            let now = ALLOCATED.fetch_add(layout.size() as u64, Ordering::Relaxed)
                + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }
    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            ALLOCATED.fetch_sub(layout.size() as u64, Ordering::Relaxed);
            let now = ALLOCATED.fetch_add(new_size as u64, Ordering::Relaxed) + new_size as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

struct AllocProbe;

impl MemProbe for AllocProbe {
    fn reset(&self) {
        PEAK.store(ALLOCATED.load(Ordering::Relaxed), Ordering::Relaxed);
    }
    fn peak(&self) -> Option<u64> {
        Some(PEAK.load(Ordering::Relaxed))
    }
}

fn config_key_help() -> String {
    let defaults = TrainConfig::default();
    let json = serde_json::to_value(&defaults).expect("config serializes");
    let mut out = String::from("Configuration keys (TOML file and --set overrides) with defaults:\n");
    if let serde_json::Value::Object(map) = json {
        for (k, v) in map {
            out.push_str(&format!("  {k} = {v}\n"));
        }
    }
    out
}

#[derive(Parser)]
#[command(
    name = "normest",
    about = "Point-cloud normal estimation: surface-fitting network plus PCA/jet baselines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network on a dataset split.
    #[command(after_help = config_key_help())]
    Train {
        /// TOML config file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set epochs=10 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Dataset directory with <shape>.xyz files.
        #[arg(long)]
        data: PathBuf,
        /// Split file listing one shape name per line.
        #[arg(long)]
        split: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict normals for shapes using a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split file naming the shapes to predict.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Explicit shape names (alternative to --split).
        #[arg(long)]
        shape: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Predict every point even when an evaluation subset exists.
        #[arg(long)]
        all_points: bool,
    },
    /// Evaluate a checkpoint or a classical baseline against ground truth.
    Eval {
        #[arg(long, conflicts_with = "baseline")]
        ckpt: Option<PathBuf>,
        /// Classical baseline: pca or jet.
        #[arg(long)]
        baseline: Option<String>,
        /// Neighborhood size for baselines.
        #[arg(long, default_value_t = 64)]
        neighbors: usize,
        /// Jet order for the jet baseline.
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        shape: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also compute the chamfer normal distance against clean shapes.
        #[arg(long)]
        cnd: bool,
        /// Directory holding the clean reference shapes (defaults to --data).
        #[arg(long)]
        clean_data: Option<PathBuf>,
        /// Write per-shape .normals prediction files next to the report.
        #[arg(long)]
        write_predictions: bool,
    },
    /// Run a classical baseline and write .normals files.
    Baseline {
        /// pca or jet.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 64)]
        neighbors: usize,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        shape: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a shape plus normals into a viewer-consumable format.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shape: String,
        /// A .normals file (full cloud or evaluation subset with sidecar).
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ply or xyzn.
        #[arg(long, default_value = "ply")]
        format: String,
    },
    /// Time the block chain across token counts and write a CSV.
    Bench {
        /// Ascending token counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 1024, 4096, 16384])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        embed: usize,
        #[arg(long, default_value_t = 7)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &CoreError) -> i32 {
    match e.category() {
        "config" | "validation" => 2,
        "dataset" | "parse" => 3,
        "numerical" => 4,
        _ => 1,
    }
}

fn fail(e: CoreError) -> ! {
    eprintln!("normest: error[{}]: {e}", e.category());
    std::process::exit(exit_code(&e));
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig, CoreError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CoreError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CoreError::Config(format!("config parse: {e}")))?
        }
        None => toml::Table::new(),
    };
    for kv in sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        let fragment = format!("{key} = {value}");
        let parsed: toml::Table = match fragment.parse() {
            Ok(t) => t,
            // bare words (e.g. fusion_mode=attention) are treated as strings
            Err(_) => format!("{key} = {value:?}")
                .parse()
                .map_err(|e| CoreError::Config(format!("override {kv:?}: {e}")))?,
        };
        for (k, v) in parsed {
            table.insert(k, v);
        }
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CoreError::Config(format!("config schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn shape_list(
    data: &Path,
    split: Option<&Path>,
    shapes: &[String],
) -> Result<Vec<String>, CoreError> {
    if let Some(split) = split {
        let manifest = SplitManifest::from_list_file(data, split, 1)?;
        return Ok(manifest.shape_names);
    }
    if shapes.is_empty() {
        return Err(CoreError::Config(
            "provide --split or at least one --shape".into(),
        ));
    }
    for s in shapes {
        if !data.join(format!("{s}.xyz")).is_file() {
            return Err(CoreError::Dataset(format!(
                "shape {s} does not resolve under {}",
                data.display()
            )));
        }
    }
    Ok(shapes.to_vec())
}

fn baseline_predictor(method: &str, neighbors: usize, order: usize) -> Result<Predictor, CoreError> {
    match method {
        "pca" => Ok(Predictor::Pca { neighbors }),
        "jet" => Ok(Predictor::Jet { neighbors, order }),
        other => Err(CoreError::Config(format!(
            "unknown baseline {other:?}; expected pca or jet"
        ))),
    }
}

fn network_predictor(ckpt: &Path) -> Result<Predictor, CoreError> {
    let ctx = TrainContext::from_checkpoint(ckpt)?;
    Ok(Predictor::Network {
        model: ctx.model,
        store: ctx.store,
    })
}

fn predict_shapes(
    predictor: &Predictor,
    data: &Path,
    names: &[String],
    out: &Path,
    all_points: bool,
) -> Result<(), CoreError> {
    std::fs::create_dir_all(out)?;
    for name in names {
        let mut cloud = load_shape(data, name)?;
        if all_points {
            cloud.eval_indices = None;
        }
        let indices = cloud.evaluation_indices();
        let normals = indices
            .iter()
            .map(|&q| predictor.predict(&cloud, q))
            .collect::<Result<Vec<Vector3<f64>>, _>>()?;
        write_normals(&cloud, &normals, &out.join(format!("{name}.normals")))?;
        log::info!("{name}: wrote {} normals", normals.len());
    }
    Ok(())
}

fn export_shape(
    data: &Path,
    shape: &str,
    normals_path: &Path,
    out: &Path,
    format: &str,
) -> Result<(), CoreError> {
    let cloud = load_shape(data, shape)?;
    let normals = load_normals_file(normals_path)?;
    // figure out which points the normals cover
    let indices: Vec<usize> = if normals.len() == cloud.len() {
        (0..cloud.len()).collect()
    } else {
        let sidecar = normals_path.with_extension("pidx");
        if !sidecar.is_file() {
            return Err(CoreError::Inconsistent(format!(
                "{} rows do not cover the {} points and no {} sidecar exists",
                normals.len(),
                cloud.len(),
                sidecar.display()
            )));
        }
        let text = std::fs::read_to_string(&sidecar)?;
        let idx: Vec<usize> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CoreError::Inconsistent(format!("sidecar parse: {e}")))?;
        if idx.len() != normals.len() {
            return Err(CoreError::Inconsistent(
                "sidecar length does not match the normals file".into(),
            ));
        }
        idx
    };
    let mut body = String::new();
    match format {
        "ply" => {
            body.push_str("ply\nformat ascii 1.0\n");
            body.push_str(&format!("element vertex {}\n", indices.len()));
            body.push_str("property float x\nproperty float y\nproperty float z\n");
            body.push_str("property float nx\nproperty float ny\nproperty float nz\n");
            body.push_str("end_header\n");
        }
        "xyzn" => {}
        other => {
            return Err(CoreError::Config(format!(
                "unknown export format {other:?}; expected ply or xyzn"
            )))
        }
    }
    for (&i, n) in indices.iter().zip(&normals) {
        let p = cloud.point(i);
        body.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, n.x, n.y, n.z));
    }
    std::fs::write(out, body)?;
    Ok(())
}

fn run() -> Result<(), CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            set,
            data,
            split,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let outcome = train(&cfg, &data, &split, &out, resume.as_deref())?;
            println!(
                "training complete: {} ({} epochs)",
                outcome.final_checkpoint.display(),
                outcome.epoch_losses.len()
            );
            Ok(())
        }
        Command::Predict {
            ckpt,
            data,
            split,
            shape,
            out,
            all_points,
        } => {
            let names = shape_list(&data, split.as_deref(), &shape)?;
            let predictor = network_predictor(&ckpt)?;
            predict_shapes(&predictor, &data, &names, &out, all_points)
        }
        Command::Eval {
            ckpt,
            baseline,
            neighbors,
            order,
            data,
            split,
            shape,
            out,
            cnd,
            clean_data,
            write_predictions,
        } => {
            let names = shape_list(&data, split.as_deref(), &shape)?;
            let predictor = match (&ckpt, &baseline) {
                (Some(path), None) => network_predictor(path)?,
                (None, Some(method)) => baseline_predictor(method, neighbors, order)?,
                _ => {
                    return Err(CoreError::Config(
                        "eval needs exactly one of --ckpt or --baseline".into(),
                    ))
                }
            };
            let opts = EvalOptions {
                cnd_clean_root: if cnd {
                    Some(clean_data.unwrap_or_else(|| data.clone()))
                } else {
                    None
                },
                write_predictions: write_predictions.then(|| out.join("predictions")),
            };
            let report = evaluate(&predictor, &data, &names, &opts)?;
            report.write_files(&out)?;
            println!(
                "evaluated {} points, average RMSE {:.3} deg; report under {}",
                report.points_evaluated,
                report.average_rmse,
                out.display()
            );
            Ok(())
        }
        Command::Baseline {
            method,
            neighbors,
            order,
            data,
            split,
            shape,
            out,
        } => {
            let names = shape_list(&data, split.as_deref(), &shape)?;
            let predictor = baseline_predictor(&method, neighbors, order)?;
            predict_shapes(&predictor, &data, &names, &out, false)
        }
        Command::Export {
            data,
            shape,
            normals,
            out,
            format,
        } => export_shape(&data, &shape, &normals, &out, &format),
        Command::Bench {
            lengths,
            embed,
            depth,
            out,
        } => {
            let report = bench_scaling(&lengths, embed, depth, &AllocProbe)?;
            std::fs::create_dir_all(&out)?;
            let csv_path = out.join("bench_scaling.csv");
            std::fs::write(&csv_path, report.to_csv())?;
            if let Some(slope) = report.loglog_slope {
                println!("log-log slope {slope:.3}; rows in {}", csv_path.display());
            } else {
                println!("rows in {}", csv_path.display());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        fail(e);
    }
}
