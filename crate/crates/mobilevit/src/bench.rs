//! Forward-cost measurement for the two attention kernels, used to verify
//! that kernelized attention scales linearly in token count while softmax
//! attention scales quadratically.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{linear_attention, softmax_attention};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub softmax_secs: f64,
    pub linear_secs: f64,
}

fn random_tokens(rng: &mut ChaCha20Rng, n: usize, dim: usize) -> Tensor {
    let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![1, n, dim], data).unwrap()
}

/// Min-of-reps per-call seconds for one kernel, with the iteration count
/// calibrated so each measurement spans at least a few milliseconds.
fn time_kernel(mut call: impl FnMut() -> Result<()>, reps: usize) -> Result<f64> {
    let start = Instant::now();
    call()?;
    let once = start.elapsed().as_secs_f64();
    let iters = ((0.005 / once.max(1e-9)).ceil() as usize).clamp(1, 10_000);
    let mut best = once;
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..iters {
            call()?;
        }
        best = best.min(start.elapsed().as_secs_f64() / iters as f64);
    }
    Ok(best)
}

/// Time both attention kernels over the given token counts at fixed width.
pub fn bench_attention(
    sizes: &[usize],
    dim: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || dim == 0 || heads == 0 || dim % heads != 0 || reps == 0 {
        return Err(Error::Invalid(
            "need token sizes, a width divisible by the head count, and reps >= 1".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n == 0 {
            return Err(Error::Invalid("token count must be nonzero".into()));
        }
        let q = random_tokens(&mut rng, n, dim);
        let k = random_tokens(&mut rng, n, dim);
        let v = random_tokens(&mut rng, n, dim);
        let softmax_secs = time_kernel(
            || {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
                softmax_attention(&mut tape, qv, kv, vv, heads).map(|_| ())
            },
            reps,
        )?;
        let linear_secs = time_kernel(
            || {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
                linear_attention(&mut tape, qv, kv, vv).map(|_| ())
            },
            reps,
        )?;
        rows.push(BenchRow { n, softmax_secs, linear_secs });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(seconds)` against `ln(n)`.
pub fn log_log_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Invalid("slope needs at least two points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|p| if p.1 > 0.0 { Ok(p.1.ln()) } else { Err(Error::Invalid("nonpositive timing".into())) })
        .collect::<Result<_>>()?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

pub fn softmax_slope(rows: &[BenchRow]) -> Result<f64> {
    log_log_slope(&rows.iter().map(|r| (r.n, r.softmax_secs)).collect::<Vec<_>>())
}

pub fn linear_slope(rows: &[BenchRow]) -> Result<f64> {
    log_log_slope(&rows.iter().map(|r| (r.n, r.linear_secs)).collect::<Vec<_>>())
}

/// Human-readable table of the measurements plus fitted slopes.
pub fn render_bench_table(rows: &[BenchRow]) -> Result<String> {
    let mut out = format!("{:>6} {:>14} {:>14}\n", "tokens", "softmax_ms", "linear_ms");
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>14.3} {:>14.3}\n",
            r.n,
            r.softmax_secs * 1e3,
            r.linear_secs * 1e3
        ));
    }
    out.push_str(&format!(
        "log-log slope: softmax {:.2}, linear {:.2}\n",
        softmax_slope(rows)?,
        linear_slope(rows)?
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_recovers_known_exponents() {
        let quad: Vec<(usize, f64)> = [64, 128, 256].iter().map(|&n| (n, (n * n) as f64 * 1e-9)).collect();
        assert!((log_log_slope(&quad).unwrap() - 2.0).abs() < 1e-9);
        let lin: Vec<(usize, f64)> = [64, 128, 256].iter().map(|&n| (n, n as f64 * 1e-7)).collect();
        assert!((log_log_slope(&lin).unwrap() - 1.0).abs() < 1e-9);
        assert!(log_log_slope(&[(64, 1.0)]).is_err());
        assert!(log_log_slope(&[(64, 0.0), (128, 1.0)]).is_err());
    }

    #[test]
    fn bench_produces_positive_timings_and_table() {
        let rows = bench_attention(&[16, 32], 8, 2, 1, 0).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.softmax_secs > 0.0 && r.linear_secs > 0.0);
        }
        let table = render_bench_table(&rows).unwrap();
        assert!(table.contains("tokens") && table.contains("slope"));
        assert!(bench_attention(&[], 8, 2, 1, 0).is_err());
        assert!(bench_attention(&[16], 8, 3, 1, 0).is_err());
    }
}
