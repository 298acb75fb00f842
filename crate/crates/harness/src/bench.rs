//! Analytic FLOP model and measured throughput for dense, Monarch, and
//! Point Monarch application, in f32 or f64.

use std::time::Instant;

use most_core::error::{Error, Result};
use most_core::geometry::KnnGraph;
use most_core::rng::Rng;
use most_core::structured::monarch_permutations;
use most_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `2·G·d_in·d_out` for a dense right-multiplication.
pub fn flops_dense(g: usize, d_in: usize, d_out: usize) -> u64 {
    2 * g as u64 * d_in as u64 * d_out as u64
}

/// `2·G·(d_s²/b + d_s·d_max/b)`: two block-diagonal factors.
pub fn flops_monarch(g: usize, d_in: usize, d_out: usize, b: usize) -> u64 {
    let d_s = d_in.min(d_out) as u64;
    let d_max = d_in.max(d_out) as u64;
    2 * g as u64 * (d_s * d_s / b as u64 + d_s * d_max / b as u64)
}

/// Monarch plus the two sparse token mixes, `2·G·K·C` each side.
pub fn flops_point_monarch(g: usize, d_in: usize, d_out: usize, b: usize, k: usize) -> u64 {
    flops_monarch(g, d_in, d_out, b)
        + 2 * g as u64 * k as u64 * d_in as u64
        + 2 * g as u64 * k as u64 * d_out as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub b: usize,
    pub g: usize,
    pub k: usize,
    pub precision: Precision,
    pub dense_flops: u64,
    pub monarch_flops: u64,
    pub point_monarch_flops: u64,
    pub dense_ms: f64,
    pub monarch_ms: f64,
    pub point_monarch_ms: f64,
}

/// Flat row-major `m×k · k×n` kernels, one per precision, so the timing
/// comparison is apples to apples.
macro_rules! kernels {
    ($mm:ident, $block_diag:ident, $permute:ident, $kmix:ident, $t:ty) => {
        fn $mm(a: &[$t], b: &[$t], out: &mut [$t], m: usize, k: usize, n: usize) {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[l * n..(l + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }

        /// `X (g×b·s)` times `diag(blocks)`, blocks `s×s` flattened.
        fn $block_diag(x: &[$t], blocks: &[$t], out: &mut [$t], g: usize, b: usize, s: usize) {
            let d = b * s;
            for blk in 0..b {
                let bw = &blocks[blk * s * s..(blk + 1) * s * s];
                for r in 0..g {
                    let src = &x[r * d + blk * s..r * d + (blk + 1) * s];
                    let dst = &mut out[r * d + blk * s..r * d + (blk + 1) * s];
                    for (l, &sv) in src.iter().enumerate() {
                        let brow = &bw[l * s..(l + 1) * s];
                        for (o, &bv) in dst.iter_mut().zip(brow) {
                            *o += sv * bv;
                        }
                    }
                }
            }
        }

        fn $permute(x: &[$t], out: &mut [$t], perm: &[usize], g: usize) {
            let d = perm.len();
            for r in 0..g {
                let src = &x[r * d..(r + 1) * d];
                let dst = &mut out[r * d..(r + 1) * d];
                for (kk, &p) in perm.iter().enumerate() {
                    dst[kk] = src[p];
                }
            }
        }

        /// `out = x + λ·mix(x)` with IDW neighbor weights.
        fn $kmix(
            x: &[$t],
            out: &mut [$t],
            nbr: &[usize],
            w: &[$t],
            lambda: $t,
            g: usize,
            k: usize,
            d: usize,
        ) {
            out.copy_from_slice(x);
            for t in 0..g {
                for s in 0..k {
                    let scale = lambda * w[t * k + s];
                    let src = &x[nbr[t * k + s] * d..(nbr[t * k + s] + 1) * d];
                    let dst = &mut out[t * d..(t + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += scale * v;
                    }
                }
            }
        }
    };
}

kernels!(mm_f32, block_diag_f32, permute_f32, kmix_f32, f32);
kernels!(mm_f64, block_diag_f64, permute_f64, kmix_f64, f64);

fn time_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    // One warmup pass, then the median of `repeats` runs.
    f();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Square-case benchmark at channel width `d` for each block count.
pub fn run_bench(
    d: usize,
    bs: &[usize],
    g: usize,
    k: usize,
    repeats: usize,
    precision: Precision,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if g <= k {
        return Err(Error::config(format!("bench needs G > K, got G={g}, K={k}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
    let graph = KnnGraph::build(&centers, k)?;
    let mut nbr = Vec::with_capacity(g * k);
    let mut wts64 = Vec::with_capacity(g * k);
    for t in 0..g {
        for s in 0..k {
            nbr.push(graph.neighbor(t, s));
            wts64.push(graph.idw_row(t)[s]);
        }
    }

    let mut rows = Vec::with_capacity(bs.len());
    for &b in bs {
        if d % b != 0 {
            return Err(Error::config(format!("block count {b} does not divide d = {d}")));
        }
        let s = d / b;
        let (inner, outer) = monarch_permutations(d, d, b);
        let x64: Vec<f64> = (0..g * d).map(|_| rng.next_normal()).collect();
        let w64: Vec<f64> = (0..d * d).map(|_| rng.next_normal() * 0.05).collect();
        let r64: Vec<f64> = (0..b * s * s).map(|_| rng.next_normal() * 0.05).collect();
        let l64: Vec<f64> = (0..b * s * s).map(|_| rng.next_normal() * 0.05).collect();
        let lambda = 0.5f64;

        let (dense_ms, monarch_ms, point_ms) = match precision {
            Precision::F64 => {
                let mut out = vec![0.0f64; g * d];
                let mut tmp = vec![0.0f64; g * d];
                let mut tmp2 = vec![0.0f64; g * d];
                let dense = time_ms(repeats, || {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    mm_f64(&x64, &w64, &mut out, g, d, d);
                });
                let monarch = time_ms(repeats, || {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f64(&x64, &r64, &mut tmp, g, b, s);
                    permute_f64(&tmp, &mut tmp2, &inner, g);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f64(&tmp2, &l64, &mut tmp, g, b, s);
                    permute_f64(&tmp, &mut out, &outer, g);
                });
                let point = time_ms(repeats, || {
                    kmix_f64(&x64, &mut tmp2, &nbr, &wts64, lambda, g, k, d);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f64(&tmp2, &r64, &mut tmp, g, b, s);
                    permute_f64(&tmp, &mut tmp2, &inner, g);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f64(&tmp2, &l64, &mut tmp, g, b, s);
                    permute_f64(&tmp, &mut tmp2, &outer, g);
                    kmix_f64(&tmp2, &mut out, &nbr, &wts64, lambda, g, k, d);
                });
                (dense, monarch, point)
            }
            Precision::F32 => {
                let x: Vec<f32> = x64.iter().map(|&v| v as f32).collect();
                let w: Vec<f32> = w64.iter().map(|&v| v as f32).collect();
                let rblk: Vec<f32> = r64.iter().map(|&v| v as f32).collect();
                let lblk: Vec<f32> = l64.iter().map(|&v| v as f32).collect();
                let wts: Vec<f32> = wts64.iter().map(|&v| v as f32).collect();
                let mut out = vec![0.0f32; g * d];
                let mut tmp = vec![0.0f32; g * d];
                let mut tmp2 = vec![0.0f32; g * d];
                let dense = time_ms(repeats, || {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    mm_f32(&x, &w, &mut out, g, d, d);
                });
                let monarch = time_ms(repeats, || {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f32(&x, &rblk, &mut tmp, g, b, s);
                    permute_f32(&tmp, &mut tmp2, &inner, g);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f32(&tmp2, &lblk, &mut tmp, g, b, s);
                    permute_f32(&tmp, &mut out, &outer, g);
                });
                let point = time_ms(repeats, || {
                    kmix_f32(&x, &mut tmp2, &nbr, &wts, lambda as f32, g, k, d);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f32(&tmp2, &rblk, &mut tmp, g, b, s);
                    permute_f32(&tmp, &mut tmp2, &inner, g);
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    block_diag_f32(&tmp2, &lblk, &mut tmp, g, b, s);
                    permute_f32(&tmp, &mut tmp2, &outer, g);
                    kmix_f32(&tmp2, &mut out, &nbr, &wts, lambda as f32, g, k, d);
                });
                (dense, monarch, point)
            }
        };

        rows.push(BenchRow {
            d,
            b,
            g,
            k,
            precision,
            dense_flops: flops_dense(g, d, d),
            monarch_flops: flops_monarch(g, d, d, b),
            point_monarch_flops: flops_point_monarch(g, d, d, b, k),
            dense_ms,
            monarch_ms,
            point_monarch_ms: point_ms,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_model_reference_values() {
        assert_eq!(flops_dense(64, 384, 384), 18_874_368);
        assert_eq!(flops_monarch(64, 384, 384, 16), 2_359_296);
        assert_eq!(flops_monarch(64, 384, 384, 16) * 8, flops_dense(64, 384, 384));
        // b = 1: two dense factors, twice the dense cost.
        assert_eq!(flops_monarch(64, 384, 384, 1), 2 * flops_dense(64, 384, 384));
        assert_eq!(
            flops_point_monarch(64, 384, 384, 16, 4),
            2_359_296 + 2 * 2 * 64 * 4 * 384
        );
    }

    #[test]
    fn non_divisible_b_is_config_error() {
        assert!(run_bench(10, &[3], 8, 2, 1, Precision::F64, 1).is_err());
    }

    #[test]
    fn bench_runs_and_reports_counts() {
        let rows = run_bench(32, &[1, 4], 16, 4, 2, Precision::F32, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].monarch_flops, flops_monarch(16, 32, 32, 1));
        assert!(rows.iter().all(|r| r.dense_ms >= 0.0));
    }
}
