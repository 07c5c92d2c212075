//! Wall-clock scaling of the attention kernels against their analytic counts.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{content_attention, positional_attention, GsaConfig, RelPosEmbedding};
use crate::tensor::{BatchNormState, BnMode, Tensor};
use crate::verify::randn;
use crate::{Error, Result};

/// Square image sides giving N = 64 .. 16384 pixels.
pub const DEFAULT_SIDES: [usize; 5] = [8, 16, 32, 64, 128];

/// Minimum duration of one timed sample; short kernels are repeated to reach it.
const MIN_SAMPLE: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKernel {
    Content,
    AxialPositional,
    NaiveQuadratic,
}

impl BenchKernel {
    pub const NAMES: [&'static str; 3] = ["content", "axial_positional", "naive_quadratic"];
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchKernel::Content => "content",
            BenchKernel::AxialPositional => "axial_positional",
            BenchKernel::NaiveQuadratic => "naive_quadratic",
        })
    }
}

impl FromStr for BenchKernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "content" => Ok(BenchKernel::Content),
            "axial_positional" | "positional" => Ok(BenchKernel::AxialPositional),
            "naive_quadratic" | "naive" => Ok(BenchKernel::NaiveQuadratic),
            other => Err(format!(
                "unknown kernel `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            )),
        }
    }
}

/// 16 channels in 2 heads on a `side x side` image, global window.
pub fn bench_config(side: usize) -> GsaConfig {
    GsaConfig::new(16, 16, 16, 2, side, side)
}

/// FLOPs (twice the multiply-accumulates) of one kernel call on a `side x side` image.
pub fn analytic_flops(kernel: BenchKernel, side: usize) -> u64 {
    let cfg = bench_config(side);
    let n = (side * side) as u64;
    let (dk, dv, kc) = (cfg.d_k as u64, cfg.d_out as u64, cfg.key_channels() as u64);
    let macs = match kernel {
        BenchKernel::Content => 2 * n * kc * dv,
        BenchKernel::AxialPositional => n * (cfg.height + cfg.width) as u64 * (dk + dv),
        BenchKernel::NaiveQuadratic => n * n * (dk + dv),
    };
    2 * macs
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Content attention with the pixel-to-pixel weights formed explicitly, one
/// query row at a time. Inputs and output are `[1, h, w, n, c]`.
pub fn naive_content(k: &Tensor, q: &Tensor, v: &Tensor) -> Tensor {
    let (ks, vs) = (k.shape(), v.shape());
    let (npx, heads, kc, vc) = (ks[1] * ks[2], ks[3], ks[4], vs[4]);
    let mut out = Tensor::zeros(vs);
    let mut k_hat = vec![0.0; npx * kc];
    let mut vals = vec![0.0; npx * vc];
    let mut weights = vec![0.0; npx];
    for n in 0..heads {
        for c in 0..kc {
            let at = |p: usize| k.data()[(p * heads + n) * kc + c];
            let max = (0..npx).map(at).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..npx).map(|p| (at(p) - max).exp()).sum();
            for p in 0..npx {
                k_hat[p * kc + c] = (at(p) - max).exp() / total;
            }
        }
        for p in 0..npx {
            vals[p * vc..][..vc].copy_from_slice(&v.data()[(p * heads + n) * vc..][..vc]);
        }
        for j in 0..npx {
            let qj = &q.data()[(j * heads + n) * kc..][..kc];
            for (i, wt) in weights.iter_mut().enumerate() {
                *wt = qj
                    .iter()
                    .zip(&k_hat[i * kc..][..kc])
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let o = &mut out.data_mut()[(j * heads + n) * vc..][..vc];
            for (i, wt) in weights.iter().enumerate() {
                for (oc, vv) in o.iter_mut().zip(&vals[i * vc..][..vc]) {
                    *oc += wt * vv;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub side: usize,
    pub pixels: usize,
    pub analytic_flops: u64,
    /// Kernel calls per timed sample.
    pub calls_per_sample: usize,
    pub wall_median_seconds: f64,
    /// `(max - min) / median` over the timed samples.
    pub wall_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: BenchKernel,
    pub threads: usize,
    pub reps: usize,
    pub channels: usize,
    pub heads: usize,
    pub rows: Vec<BenchRow>,
    pub analytic_slope: f64,
    pub wall_time_slope: f64,
    pub unreliable: bool,
    pub note: Option<String>,
}

struct Inputs {
    k: Tensor,
    q: Tensor,
    v: Tensor,
    emb: RelPosEmbedding,
    bn: BatchNormState,
    cfg: GsaConfig,
}

fn inputs(side: usize) -> Inputs {
    let cfg = bench_config(side);
    let (n, kc, vc) = (cfg.n_heads, cfg.key_channels(), cfg.value_channels());
    Inputs {
        k: randn(&[1, side, side, n, kc], 1),
        q: randn(&[1, side, side, n, kc], 2),
        v: randn(&[1, side, side, n, vc], 3),
        emb: RelPosEmbedding {
            r_col: randn(&[2 * side - 1, kc], 4),
            r_row: randn(&[2 * side - 1, kc], 5),
        },
        bn: BatchNormState::identity(cfg.d_out),
        cfg,
    }
}

fn run_once(kernel: BenchKernel, x: &Inputs) -> Result<Tensor> {
    match kernel {
        BenchKernel::Content => content_attention(&x.k, &x.q, &x.v, &x.cfg),
        BenchKernel::AxialPositional => {
            positional_attention(&x.q, &x.v, &x.emb, &x.bn, &x.cfg, BnMode::Infer)
        }
        BenchKernel::NaiveQuadratic => Ok(naive_content(&x.k, &x.q, &x.v)),
    }
}

fn time_size(kernel: BenchKernel, side: usize, reps: usize) -> Result<BenchRow> {
    let x = inputs(side);
    let start = Instant::now();
    std::hint::black_box(run_once(kernel, &x)?);
    let first = start.elapsed();
    let calls = if first >= MIN_SAMPLE {
        1
    } else {
        (MIN_SAMPLE.as_secs_f64() / first.as_secs_f64().max(1e-9)).ceil() as usize
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..calls {
            std::hint::black_box(run_once(kernel, &x)?);
        }
        samples.push(start.elapsed().as_secs_f64() / calls as f64);
    }
    samples.sort_by(f64::total_cmp);
    let median = samples[samples.len() / 2];
    let spread = (samples[samples.len() - 1] - samples[0]) / median;
    Ok(BenchRow {
        side,
        pixels: side * side,
        analytic_flops: analytic_flops(kernel, side),
        calls_per_sample: calls,
        wall_median_seconds: median,
        wall_spread: spread,
    })
}

/// Times `kernel` on square images of the given sides on a pool of `threads`
/// workers. Needs at least four sizes spanning a 16x range of pixel counts.
pub fn scaling_benchmark(
    kernel: BenchKernel,
    sides: &[usize],
    reps: usize,
    threads: usize,
) -> Result<BenchReport> {
    let mut sorted = sides.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let (lo, hi) = (
        sorted.first().copied().unwrap_or(0),
        sorted.last().copied().unwrap_or(0),
    );
    if sorted.len() < 4 || lo == 0 || hi * hi < 16 * lo * lo {
        return Err(Error::Config(format!(
            "benchmark needs >= 4 distinct sizes spanning >= 16x in pixel count, got sides {sides:?}"
        )));
    }
    if reps == 0 || threads == 0 {
        return Err(Error::Config("reps and threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        sorted
            .iter()
            .map(|&s| time_size(kernel, s, reps))
            .collect::<Result<Vec<_>>>()
    })?;
    let ns: Vec<f64> = rows.iter().map(|r| r.pixels as f64).collect();
    let flops: Vec<f64> = rows.iter().map(|r| r.analytic_flops as f64).collect();
    let times: Vec<f64> = rows.iter().map(|r| r.wall_median_seconds).collect();
    let unreliable = rows.iter().any(|r| r.wall_spread > 0.2);
    let cfg = bench_config(lo);
    Ok(BenchReport {
        kernel,
        threads,
        reps,
        channels: cfg.d_out,
        heads: cfg.n_heads,
        analytic_slope: fit_slope(&ns, &flops),
        wall_time_slope: fit_slope(&ns, &times),
        unreliable,
        note: unreliable
            .then(|| format!("timing spread above 20% across {reps} reps; rerun with more reps")),
        rows,
    })
}
