use offload_core::task::{TaskBundle, TaskError};

pub const ITERATIONS: usize = 10;
pub const MAX_N: u32 = 5500;

/// Spectral norm of the infinite matrix A(i,j) = 1/((i+j)(i+j+1)/2 + i + 1)
/// truncated to n×n, by power iteration on AᵀA.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpectralNorm;

pub fn a(i: usize, j: usize) -> f64 {
    1.0 / (((i + j) * (i + j + 1) / 2 + i + 1) as f64)
}

fn mul_av(v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = v.iter().enumerate().map(|(j, x)| a(i, j) * x).sum();
    }
}

fn mul_atv(v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = v.iter().enumerate().map(|(j, x)| a(j, i) * x).sum();
    }
}

fn mul_atav(v: &[f64], out: &mut [f64], tmp: &mut [f64]) {
    mul_av(v, tmp);
    mul_atv(tmp, out);
}

pub fn spectral_norm(n: usize) -> f64 {
    let mut u = vec![1.0; n];
    let mut v = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..ITERATIONS {
        mul_atav(&u, &mut v, &mut tmp);
        mul_atav(&v, &mut u, &mut tmp);
    }
    let vbv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    (vbv / vv).sqrt()
}

impl TaskBundle for SpectralNorm {
    type State = ();
    type Input = u32;
    type Output = f64;

    fn id(&self) -> &str {
        "spectralnorm"
    }

    fn run(&self, _: &mut (), n: &u32) -> Result<f64, TaskError> {
        if !(1..=MAX_N).contains(n) {
            return Err(TaskError::InvalidInput(format!("size {n} outside 1..={MAX_N}")));
        }
        Ok(spectral_norm(*n as usize))
    }

    fn work_units(&self, n: &u32) -> u64 {
        (ITERATIONS as u64) * 4 * (*n as u64).pow(2)
    }

    fn unit_cost_ms(&self) -> f64 {
        3.6e-5
    }

    fn input_size_proxy(&self, n: &u32) -> f64 {
        *n as f64
    }
}
