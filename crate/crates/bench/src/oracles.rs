//! Independent reference computations for checking workload results.

use sha2::{Digest, Sha256};

use crate::workloads::{pixel, spectral_entry, ImagePair};

pub fn fibonacci(n: u32) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    a
}

/// Bitmask backtracking.
pub fn nqueens(n: u32) -> u64 {
    fn place(full: u32, cols: u32, d1: u32, d2: u32) -> u64 {
        if cols == full {
            return 1;
        }
        let mut free = full & !(cols | d1 | d2);
        let mut total = 0;
        while free != 0 {
            let bit = free & free.wrapping_neg();
            free ^= bit;
            total += place(full, cols | bit, ((d1 | bit) << 1) & full, (d2 | bit) >> 1);
        }
        total
    }
    if n == 0 {
        return 1;
    }
    place((1 << n) - 1, 0, 0, 0)
}

/// Streams the composite row by row instead of materialising it.
pub fn image_checksum(p: &ImagePair) -> String {
    let height = p.h1.max(p.h2);
    let mut hasher = Sha256::new();
    for y in 0..height {
        for (which, w, h) in [(0u8, p.w1, p.h1), (1, p.w2, p.h2)] {
            for x in 0..w {
                if y < h {
                    hasher.update(pixel(which, x, y));
                } else {
                    hasher.update([0u8; 4]);
                }
            }
        }
    }
    hex::encode(hasher.finalize())
}

pub fn mandelbrot(n: u32) -> u64 {
    let escape = |c: (f64, f64)| {
        let mut z = (0.0f64, 0.0f64);
        let mut i = 0u64;
        while i < 50 && z.0 * z.0 + z.1 * z.1 <= 4.0 {
            z = (z.0 * z.0 - z.1 * z.1 + c.0, 2.0 * z.0 * z.1 + c.1);
            i += 1;
        }
        i
    };
    let step = 2.0 / n as f64;
    (0..n * n)
        .map(|k| escape((-1.5 + ((k % n) as f64 + 0.5) * step, -1.0 + ((k / n) as f64 + 0.5) * step)))
        .sum()
}

/// Builds AᵀA densely and runs the same ten power-iteration rounds.
pub fn spectral_norm_dense(n: usize) -> f64 {
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| spectral_entry(i, j)).collect()).collect();
    let mut ata = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            ata[i][j] = (0..n).map(|k| a[k][i] * a[k][j]).sum();
        }
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        ata.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
    };
    let mut u = vec![1.0; n];
    let mut v = vec![0.0; n];
    for _ in 0..10 {
        v = apply(&u);
        u = apply(&v);
    }
    let vbv: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    (vbv / vv).sqrt()
}
