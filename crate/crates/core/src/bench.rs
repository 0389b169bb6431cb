//! Wall-clock scaling harness for the filter + smoother.

use crate::error::Result;
use crate::kalman::{filter, smooth, GaussianSites};
use crate::kernel::{to_state_space, KernelFamily, KernelSpec};
use crate::stats::{derive_rng, draw_uniform};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub t: usize,
    pub d: usize,
    pub median_s: f64,
    pub p90_s: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Times filter + smooth over irregular grids of each requested length.
pub fn benchmark(
    family: KernelFamily,
    t_grid: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let spec = KernelSpec::new(family, 1.0, 1.0)?;
    let ss = to_state_space(&spec);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t_len in t_grid {
        let mut rng = derive_rng(seed, &[0xBE, t_len as u64]);
        let mut times = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for _ in 0..t_len {
            acc += 0.01 + 0.1 * draw_uniform(&mut rng);
            times.push(acc);
        }
        let y: Vec<f64> = (0..t_len).map(|_| 2.0 * (draw_uniform(&mut rng) - 0.5)).collect();
        let v: Vec<f64> = (0..t_len).map(|_| 0.1 + draw_uniform(&mut rng)).collect();
        let sites = GaussianSites::new(times, y, v, 1)?;

        let mut samples = Vec::with_capacity(repeats);
        // One warmup pass to populate caches and the allocator.
        let fr = filter(std::slice::from_ref(&ss), &sites)?;
        let _ = smooth(std::slice::from_ref(&ss), &sites, &fr)?;
        for _ in 0..repeats {
            let t0 = Instant::now();
            let fr = filter(std::slice::from_ref(&ss), &sites)?;
            let sm = smooth(std::slice::from_ref(&ss), &sites, &fr)?;
            samples.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(sm.log_partition);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BenchRow {
            t: t_len,
            d: ss.dim(),
            median_s: percentile(&samples, 0.5),
            p90_s: percentile(&samples, 0.9),
        });
    }
    Ok(rows)
}

pub fn write_benchmark_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "T,d,median_s,p90_s")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.t, r.d, r.median_s, r.p90_s)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_parseable_csv() {
        let rows = benchmark(KernelFamily::Matern32, &[64, 128], 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.csv");
        write_benchmark_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "T,d,median_s,p90_s");
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 4);
            cols[0].parse::<usize>().unwrap();
            cols[1].parse::<usize>().unwrap();
            cols[2].parse::<f64>().unwrap();
            cols[3].parse::<f64>().unwrap();
        }
    }

    #[test]
    fn state_dimension_scales_cost_sanely() {
        // d=3 over d=2 at fixed T must stay within a loose factor of the
        // d^3 model: ratio in [1.125/3, 3.375*3].
        let t_grid = [512];
        let a = benchmark(KernelFamily::Matern32, &t_grid, 9, 3).unwrap()[0].median_s;
        let b = benchmark(KernelFamily::Matern52, &t_grid, 9, 3).unwrap()[0].median_s;
        let ratio = b / a;
        assert!(
            ratio > 3.375 / 3.0 / 3.0 && ratio < 3.375 * 3.0,
            "d-scaling ratio {ratio}"
        );
    }
}
