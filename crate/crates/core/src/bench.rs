//! Timing harness comparing stacked axial attention with full attention
//! over all m-bodies.
//!
//! Both kernels are bare single-head attention with queries, keys and values
//! all equal to the input rows, so the measured cost is the attention itself.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{count_ops, AttentionKind};

/// Largest token count (`N^m`) the full-attention kernel accepts.
pub const FULL_BENCH_GUARD: usize = 4096;
pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("full attention over {tokens} tokens exceeds the guard of {guard}")]
    SizeGuard { tokens: usize, guard: usize },
    #[error("invalid benchmark setting: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: u32,
    pub n: u64,
    pub mode: AttentionKind,
    /// Median wall time of one kernel execution.
    pub wall_ns: u64,
    pub mac_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSettings {
    pub channels: usize,
    pub repetitions: usize,
    /// Each repetition loops the kernel until at least this much time passed.
    pub min_sample_ns: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            channels: 16,
            repetitions: 7,
            min_sample_ns: 2_000_000,
        }
    }
}

/// Normalises `logits` in place and writes the weighted sum of the rows of
/// `data` starting at `offsets` into `out`.
fn softmax_mix(logits: &mut [f64], data: &[f64], offsets: &[usize], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let c = out.len();
    for (w, &at) in logits.iter().zip(offsets) {
        let a = w / total;
        for (o, v) in out.iter_mut().zip(&data[at..at + c]) {
            *o += a * v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Axial attention along every axis of an `[N; m] × c` tensor in turn.
/// Returns the output and the number of logit multiply-accumulates.
pub fn axial_kernel(z: &[f64], n: usize, m: usize, c: usize) -> (Vec<f64>, u64) {
    let scale = 1.0 / (c as f64).sqrt();
    let rows = n.pow(m as u32);
    let mut cur = z.to_vec();
    let mut next = vec![0.0; cur.len()];
    let mut macs = 0u64;
    let mut logits = vec![0.0; n];
    let mut offsets = vec![0usize; n];
    for a in 0..m {
        // rows along axis a are `stride` rows apart
        let stride = n.pow((m - 1 - a) as u32);
        for r in 0..rows {
            let i = (r / stride) % n;
            let base = r - i * stride;
            let q = &cur[r * c..(r + 1) * c];
            for (j, (l, at)) in logits.iter_mut().zip(offsets.iter_mut()).enumerate() {
                *at = (base + j * stride) * c;
                *l = dot(q, &cur[*at..*at + c]) * scale;
                macs += c as u64;
            }
            softmax_mix(&mut logits, &cur, &offsets, &mut next[r * c..(r + 1) * c]);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    (cur, macs)
}

/// Attention over all `N^m` rows as one sequence.
pub fn full_kernel(z: &[f64], n: usize, m: usize, c: usize) -> Result<(Vec<f64>, u64), BenchError> {
    let tokens = n.pow(m as u32);
    if tokens > FULL_BENCH_GUARD {
        return Err(BenchError::SizeGuard {
            tokens,
            guard: FULL_BENCH_GUARD,
        });
    }
    let scale = 1.0 / (c as f64).sqrt();
    let offsets: Vec<usize> = (0..tokens).map(|t| t * c).collect();
    let mut out = vec![0.0; z.len()];
    let mut logits = vec![0.0; tokens];
    let mut macs = 0u64;
    for s in 0..tokens {
        let q = &z[s * c..(s + 1) * c];
        for (l, &at) in logits.iter_mut().zip(&offsets) {
            *l = dot(q, &z[at..at + c]) * scale;
            macs += c as u64;
        }
        softmax_mix(&mut logits, z, &offsets, &mut out[s * c..(s + 1) * c]);
    }
    Ok((out, macs))
}

fn input(n: usize, m: usize, c: usize) -> Vec<f64> {
    let len = n.pow(m as u32) * c;
    // deterministic, bounded, non-constant
    (0..len)
        .map(|t| ((t * 7919 % 1009) as f64 / 1009.0) - 0.5)
        .collect()
}

fn run_kernel(
    mode: AttentionKind,
    z: &[f64],
    n: usize,
    m: usize,
    c: usize,
) -> Result<(Vec<f64>, u64), BenchError> {
    match mode {
        AttentionKind::Axial => Ok(axial_kernel(z, n, m, c)),
        AttentionKind::Full => full_kernel(z, n, m, c),
    }
}

/// Times one kernel at one size: median over repetitions of the mean time
/// per execution, after warm-up runs.
pub fn bench_one(
    mode: AttentionKind,
    m: u32,
    n: u64,
    settings: &BenchSettings,
) -> Result<BenchRow, BenchError> {
    if m == 0 || n == 0 || settings.channels == 0 {
        return Err(BenchError::Invalid(
            "order, size and channels must be positive".into(),
        ));
    }
    if settings.repetitions < MIN_REPETITIONS {
        return Err(BenchError::Invalid(format!(
            "{} repetitions, at least {MIN_REPETITIONS} required",
            settings.repetitions
        )));
    }
    let (nu, mu, c) = (n as usize, m as usize, settings.channels);
    if mode == AttentionKind::Full {
        let tokens = nu.checked_pow(m).unwrap_or(usize::MAX);
        if tokens > FULL_BENCH_GUARD {
            return Err(BenchError::SizeGuard {
                tokens,
                guard: FULL_BENCH_GUARD,
            });
        }
    }
    let z = input(nu, mu, c);
    let mut mac_count = 0;
    for _ in 0..WARMUP_RUNS {
        mac_count = std::hint::black_box(run_kernel(mode, &z, nu, mu, c)?).1;
    }
    let mut samples = Vec::with_capacity(settings.repetitions);
    for _ in 0..settings.repetitions {
        let start = Instant::now();
        let mut runs = 0u64;
        loop {
            std::hint::black_box(run_kernel(mode, std::hint::black_box(&z), nu, mu, c)?);
            runs += 1;
            if start.elapsed().as_nanos() as u64 >= settings.min_sample_ns {
                break;
            }
        }
        samples.push(start.elapsed().as_nanos() as u64 / runs);
    }
    samples.sort_unstable();
    Ok(BenchRow {
        m,
        n,
        mode,
        wall_ns: samples[samples.len() / 2],
        mac_count,
    })
}

/// Every (order, size) combination, in the given order.
pub fn run_bench(
    mode: AttentionKind,
    orders: &[u32],
    sizes: &[u64],
    settings: &BenchSettings,
) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for &m in orders {
        for &n in sizes {
            rows.push(bench_one(mode, m, n, settings)?);
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("m,N,mode,wall_ns,mac_count\n");
    for r in rows {
        let mode = match r.mode {
            AttentionKind::Axial => "axial",
            AttentionKind::Full => "full",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.m, r.n, mode, r.wall_ns, r.mac_count
        ));
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Exact count expected for a kernel run.
pub fn expected_macs(mode: AttentionKind, n: u64, m: u32, c: usize) -> u64 {
    count_ops(mode, n, m, c as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_counts_match_formulas() {
        for m in 1..=3u32 {
            for n in [1usize, 2, 3, 5] {
                let z = input(n, m as usize, 4);
                let (_, axial) = axial_kernel(&z, n, m as usize, 4);
                assert_eq!(axial, expected_macs(AttentionKind::Axial, n as u64, m, 4));
                let (_, full) = full_kernel(&z, n, m as usize, 4).unwrap();
                assert_eq!(full, expected_macs(AttentionKind::Full, n as u64, m, 4));
            }
        }
    }

    #[test]
    fn single_axis_matches_full_attention_for_one_body() {
        let z = input(5, 1, 3);
        let (a, _) = axial_kernel(&z, 5, 1, 3);
        let (f, _) = full_kernel(&z, 5, 1, 3).unwrap();
        for (x, y) in a.iter().zip(&f) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_refuses_large_full_runs() {
        let s = BenchSettings::default();
        assert!(matches!(
            bench_one(AttentionKind::Full, 2, 65, &s),
            Err(BenchError::SizeGuard { tokens: 4225, .. })
        ));
        let few = BenchSettings {
            repetitions: 3,
            ..s
        };
        assert!(matches!(
            bench_one(AttentionKind::Axial, 2, 4, &few),
            Err(BenchError::Invalid(_))
        ));
    }

    #[test]
    fn slope_of_a_monomial() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((loglog_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let s = BenchSettings {
            min_sample_ns: 0,
            ..BenchSettings::default()
        };
        let rows = run_bench(AttentionKind::Axial, &[1, 2], &[3], &s).unwrap();
        let csv = to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "m,N,mode,wall_ns,mac_count");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,3,axial,"));
        assert!(lines[2].ends_with(&format!(",{}", 2 * 27 * 16)));
    }
}
