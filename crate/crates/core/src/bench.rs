//! Scaling bench for the block chain: wall time (and optionally peak heap)
//! as the token count grows, plus a log-log slope fit.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mat};
use crate::nn::ParamStore;
use crate::pssm::{run_chain, MambaBlockParams};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Memory usage probe. The CLI installs a counting allocator; library users
/// get [`NoProbe`].
pub trait MemProbe: Sync {
    /// Reset the peak to the current usage.
    fn reset(&self);
    /// Peak bytes since the last reset, if tracked.
    fn peak(&self) -> Option<u64>;
}

pub struct NoProbe;

impl MemProbe for NoProbe {
    fn reset(&self) {}
    fn peak(&self) -> Option<u64> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub tokens: usize,
    pub wall_ms: f64,
    pub peak_mem_bytes: Option<u64>,
    pub oom: bool,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of ln(time) vs ln(tokens) over completed rows.
    pub loglog_slope: Option<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tokens,wall_ms,peak_mem_bytes\n");
        for r in &self.rows {
            if r.oom {
                out.push_str(&format!("{},OOM,OOM\n", r.tokens));
            } else {
                let mem = r
                    .peak_mem_bytes
                    .map(|m| m.to_string())
                    .unwrap_or_default();
                out.push_str(&format!("{},{},{}\n", r.tokens, r.wall_ms, mem));
            }
        }
        out
    }
}

/// Rough forward-pass heap estimate used to skip lengths that cannot fit.
fn estimate_bytes(tokens: usize, embed_dim: usize, depth: usize) -> u64 {
    // ~10 inner-width activations per block plus the token maps
    (depth * tokens * embed_dim * 2 * 10 + tokens * embed_dim * 6) as u64 * 8
}

fn available_memory_bytes() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("MemAvailable:") {
            let kb: u64 = rest.trim().trim_end_matches(" kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// Time the forward chain at each token count. Lengths must be ascending.
/// A length whose estimated footprint exceeds available memory is recorded
/// as OOM and the remaining lengths are skipped.
pub fn bench_scaling(
    lengths: &[usize],
    embed_dim: usize,
    depth: usize,
    probe: &dyn MemProbe,
) -> Result<BenchReport> {
    if lengths.is_empty() {
        return Err(Error::Validation("no lengths requested".into()));
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("lengths must be sorted ascending".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let mut store = ParamStore::new();
    let state_dim = 16;
    let dt_rank = (embed_dim / 16).max(1);
    let blocks: Vec<MambaBlockParams> = (0..depth)
        .map(|i| {
            MambaBlockParams::define(
                &mut store,
                &mut rng,
                &format!("bench{i}"),
                embed_dim,
                2,
                state_dim,
                dt_rank,
                4,
            )
        })
        .collect();

    let run_once = |tokens: &Mat| -> Result<f64> {
        let mut g = Graph::inference();
        let tv = g.leaf(tokens.clone());
        let start = Instant::now();
        let out = run_chain(&mut g, &store, &blocks, tv)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        // touch the output so the work cannot be optimized away
        std::hint::black_box(g.value(out)[[0, 0]]);
        Ok(elapsed)
    };

    let available = available_memory_bytes();
    let mut rows = Vec::with_capacity(lengths.len());
    let mut hit_oom = false;
    // warm up caches and the allocator on the smallest size
    {
        let warm = Mat::from_shape_fn((lengths[0], embed_dim), |_| rng.gen_range(-1.0..1.0));
        run_once(&warm)?;
    }
    for &m in lengths {
        if hit_oom {
            break;
        }
        if let Some(avail) = available {
            if estimate_bytes(m, embed_dim, depth) > avail * 7 / 10 {
                rows.push(BenchRow {
                    tokens: m,
                    wall_ms: 0.0,
                    peak_mem_bytes: None,
                    oom: true,
                });
                hit_oom = true;
                continue;
            }
        }
        let tokens = Mat::from_shape_fn((m, embed_dim), |_| rng.gen_range(-1.0..1.0));
        probe.reset();
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            best = best.min(run_once(&tokens)?);
        }
        rows.push(BenchRow {
            tokens: m,
            wall_ms: best,
            peak_mem_bytes: probe.peak(),
            oom: false,
        });
    }

    let completed: Vec<&BenchRow> = rows.iter().filter(|r| !r.oom).collect();
    let loglog_slope = if completed.len() >= 2 {
        let xs: Vec<f64> = completed.iter().map(|r| (r.tokens as f64).ln()).collect();
        let ys: Vec<f64> = completed.iter().map(|r| r.wall_ms.max(1e-6).ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(cov / var)
    } else {
        None
    };
    Ok(BenchReport { rows, loglog_slope })
}
