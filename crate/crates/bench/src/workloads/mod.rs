//! Benchmark workloads. Each is a [`TaskBundle`] that the runtime can run
//! locally or offload.

mod fib;
mod imagecombine;
mod mandelbrot;
mod nqueens;
mod spectralnorm;
mod virusscan;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use offload_core::controller::{ExecReport, ExecutionController, Placement};
use offload_core::task::{erase, ErasedTask, TaskBundle, TaskError};
use serde::{Deserialize, Serialize};

pub use fib::{call_count, Fibonacci};
pub use imagecombine::{pixel, ImageCombine, ImagePair};
pub use mandelbrot::{iterations as mandelbrot_iterations, Mandelbrot};
pub use nqueens::{Board, NQueens};
pub use spectralnorm::{a as spectral_entry, spectral_norm, SpectralNorm};
pub use virusscan::{list_files, read_signatures, ScanJob, VirusScan};

use crate::fixtures::Fixtures;
use crate::oracles;

/// Width of each image in the image-combine workload; the input parameter
/// is the height.
pub const IMAGE_WIDTH: u32 = 2560;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Fibonacci,
    NQueens,
    VirusScan,
    ImageCombine,
    Mandelbrot,
    SpectralNorm,
}

impl Workload {
    pub const ALL: [Workload; 6] = [
        Workload::Fibonacci,
        Workload::NQueens,
        Workload::VirusScan,
        Workload::ImageCombine,
        Workload::Mandelbrot,
        Workload::SpectralNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Workload::Fibonacci => "fibonacci",
            Workload::NQueens => "nqueens",
            Workload::VirusScan => "virusscan",
            Workload::ImageCombine => "imagecombine",
            Workload::Mandelbrot => "mandelbrot",
            Workload::SpectralNorm => "spectralnorm",
        }
    }

    pub fn splittable(self) -> bool {
        matches!(self, Workload::NQueens | Workload::VirusScan)
    }

    /// Desk-scale input used when none is given.
    pub fn default_input(self) -> u64 {
        match self {
            Workload::Fibonacci => 20,
            Workload::NQueens => 7,
            Workload::VirusScan => 0,
            Workload::ImageCombine => 512,
            Workload::Mandelbrot => 64,
            Workload::SpectralNorm => 100,
        }
    }

    /// Runs one call through `ctl` and returns the result digest.
    pub fn execute(
        self,
        ctl: &ExecutionController,
        input: u64,
        fixtures: Option<&Fixtures>,
        placement: Placement,
    ) -> Result<(String, ExecReport), TaskError> {
        fn go<T: TaskBundle>(
            ctl: &ExecutionController,
            task: T,
            input: T::Input,
            placement: Placement,
            digest: impl Fn(&T::Output) -> String,
        ) -> Result<(String, ExecReport), TaskError> {
            let (out, report) = ctl.execute_with(&task, &mut T::State::default(), &input, placement)?;
            Ok((digest(&out), report))
        }
        let n = u32::try_from(input).map_err(|_| TaskError::InvalidInput(format!("input {input} too large")))?;
        match self {
            Workload::Fibonacci => go(ctl, Fibonacci, n, placement, u64::to_string),
            Workload::NQueens => go(ctl, NQueens, Board::new(n), placement, u64::to_string),
            Workload::VirusScan => {
                let fx = fixtures.ok_or_else(|| TaskError::InvalidInput("virusscan needs fixtures".into()))?;
                go(ctl, VirusScan, fx.scan_job(), placement, u64::to_string)
            }
            Workload::ImageCombine => go(
                ctl,
                ImageCombine,
                ImagePair::square(IMAGE_WIDTH, n),
                placement,
                String::clone,
            ),
            Workload::Mandelbrot => go(ctl, Mandelbrot, n, placement, u64::to_string),
            Workload::SpectralNorm => go(ctl, SpectralNorm, n, placement, |v| format!("{v:.12}")),
        }
    }

    /// Expected digest from an independent computation.
    pub fn oracle(self, input: u64, fixtures: Option<&Fixtures>) -> Result<String, String> {
        let n = u32::try_from(input).map_err(|e| e.to_string())?;
        Ok(match self {
            Workload::Fibonacci => oracles::fibonacci(n).to_string(),
            Workload::NQueens => oracles::nqueens(n).to_string(),
            Workload::VirusScan => fixtures
                .ok_or("virusscan needs fixtures")?
                .manifest()
                .planted
                .to_string(),
            Workload::ImageCombine => oracles::image_checksum(&ImagePair::square(IMAGE_WIDTH, n)),
            Workload::Mandelbrot => oracles::mandelbrot(n).to_string(),
            Workload::SpectralNorm => format!("{:.12}", oracles::spectral_norm_dense(n as usize)),
        })
    }

    /// Whether a digest agrees with the oracle's.
    pub fn agrees(self, digest: &str, oracle: &str) -> bool {
        match self {
            Workload::SpectralNorm => match (digest.parse::<f64>(), oracle.parse::<f64>()) {
                (Ok(a), Ok(b)) => (a - b).abs() <= 1e-9,
                _ => false,
            },
            _ => digest == oracle,
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        let found = match s.as_str() {
            "fib" => Some(Workload::Fibonacci),
            "queens" | "n-queens" => Some(Workload::NQueens),
            "virus" | "virus-scan" => Some(Workload::VirusScan),
            "image" | "image-combine" => Some(Workload::ImageCombine),
            _ => None,
        };
        found
            .or_else(|| Self::ALL.into_iter().find(|w| w.name() == s))
            .ok_or_else(|| format!("unknown workload '{s}'"))
    }
}

/// Every workload as an installable bundle.
pub fn catalog() -> Vec<Arc<dyn ErasedTask>> {
    vec![
        erase(Fibonacci),
        erase(NQueens),
        erase(VirusScan),
        erase(ImageCombine),
        erase(Mandelbrot),
        erase(SpectralNorm),
    ]
}
