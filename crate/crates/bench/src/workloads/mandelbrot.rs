use offload_core::task::{TaskBundle, TaskError};

pub const MAX_ITER: u32 = 50;
pub const MAX_N: u32 = 4096;

/// Sum of escape-iteration counts over an n×n grid of [-1.5, 0.5]×[-1, 1],
/// sampled at pixel centres.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mandelbrot;

pub fn iterations(cr: f64, ci: f64) -> u32 {
    let (mut zr, mut zi) = (0.0f64, 0.0f64);
    for i in 0..MAX_ITER {
        if zr * zr + zi * zi > 4.0 {
            return i;
        }
        (zr, zi) = (zr * zr - zi * zi + cr, 2.0 * zr * zi + ci);
    }
    MAX_ITER
}

impl TaskBundle for Mandelbrot {
    type State = ();
    type Input = u32;
    type Output = u64;

    fn id(&self) -> &str {
        "mandelbrot"
    }

    fn run(&self, _: &mut (), n: &u32) -> Result<u64, TaskError> {
        if !(1..=MAX_N).contains(n) {
            return Err(TaskError::InvalidInput(format!("grid size {n} outside 1..={MAX_N}")));
        }
        let step = 2.0 / *n as f64;
        let mut sum = 0u64;
        for y in 0..*n {
            let ci = -1.0 + (y as f64 + 0.5) * step;
            for x in 0..*n {
                sum += iterations(-1.5 + (x as f64 + 0.5) * step, ci) as u64;
            }
        }
        Ok(sum)
    }

    fn work_units(&self, n: &u32) -> u64 {
        (*n as u64).pow(2) * MAX_ITER as u64
    }

    fn unit_cost_ms(&self) -> f64 {
        1.3e-5
    }

    fn input_size_proxy(&self, n: &u32) -> f64 {
        *n as f64
    }
}
