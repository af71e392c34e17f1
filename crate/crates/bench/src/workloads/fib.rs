use offload_core::task::{TaskBundle, TaskError};

pub const MAX_N: u32 = 40;

/// Naive exponential Fibonacci.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fibonacci;

fn fib(n: u32) -> u64 {
    if n < 2 {
        n as u64
    } else {
        fib(n - 1) + fib(n - 2)
    }
}

/// Calls made by the naive recursion: 2·F(n+1) − 1.
pub fn call_count(n: u32) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..=n {
        (a, b) = (b, a + b);
    }
    2 * a - 1
}

impl TaskBundle for Fibonacci {
    type State = ();
    type Input = u32;
    type Output = u64;

    fn id(&self) -> &str {
        "fibonacci"
    }

    fn run(&self, _: &mut (), n: &u32) -> Result<u64, TaskError> {
        if *n > MAX_N {
            return Err(TaskError::InvalidInput(format!("fibonacci({n}) exceeds {MAX_N}")));
        }
        Ok(fib(*n))
    }

    fn work_units(&self, n: &u32) -> u64 {
        call_count((*n).min(MAX_N))
    }

    fn unit_cost_ms(&self) -> f64 {
        1e-4
    }

    fn input_size_proxy(&self, n: &u32) -> f64 {
        *n as f64
    }
}
