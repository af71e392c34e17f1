use offload_core::task::{TaskBundle, TaskError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Places two synthetic RGBA images side by side and checksums the result.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageCombine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub w1: u32,
    pub h1: u32,
    pub w2: u32,
    pub h2: u32,
}

impl ImagePair {
    /// Two `width`×`height` images.
    pub fn square(width: u32, height: u32) -> Self {
        Self {
            w1: width,
            h1: height,
            w2: width,
            h2: height,
        }
    }

    pub fn combined_bytes(&self) -> u64 {
        (self.w1 as u64 + self.w2 as u64) * self.h1.max(self.h2) as u64 * 4
    }
}

/// Pixel of synthetic image `which` at (x, y).
pub fn pixel(which: u8, x: u32, y: u32) -> [u8; 4] {
    let v = x.wrapping_mul(31) ^ y.wrapping_mul(17) ^ (which as u32).wrapping_mul(0x9e37_79b9);
    [v as u8, (v >> 8) as u8, (v >> 16) as u8, 0xff]
}

impl TaskBundle for ImageCombine {
    type State = ();
    type Input = ImagePair;
    type Output = String;

    fn id(&self) -> &str {
        "imagecombine"
    }

    fn run(&self, _: &mut (), p: &ImagePair) -> Result<String, TaskError> {
        if p.w1 == 0 || p.h1 == 0 || p.w2 == 0 || p.h2 == 0 {
            return Err(TaskError::InvalidInput("image dimensions must be positive".into()));
        }
        let width = (p.w1 + p.w2) as usize;
        let height = p.h1.max(p.h2) as usize;
        let mut canvas = vec![0u8; width * height * 4];
        for y in 0..height {
            let row = &mut canvas[y * width * 4..(y + 1) * width * 4];
            for x in 0..width {
                let (which, sx, h) = if x < p.w1 as usize {
                    (0, x as u32, p.h1)
                } else {
                    (1, (x - p.w1 as usize) as u32, p.h2)
                };
                // Uncovered area stays transparent black.
                if (y as u32) < h {
                    row[x * 4..x * 4 + 4].copy_from_slice(&pixel(which, sx, y as u32));
                }
            }
        }
        Ok(hex::encode(Sha256::digest(&canvas)))
    }

    fn work_units(&self, p: &ImagePair) -> u64 {
        p.combined_bytes() / 4
    }

    fn unit_cost_ms(&self) -> f64 {
        1e-5
    }

    fn input_size_proxy(&self, p: &ImagePair) -> f64 {
        p.combined_bytes() as f64
    }

    fn peak_memory_mb(&self, p: &ImagePair) -> f64 {
        p.combined_bytes() as f64 / (1024.0 * 1024.0)
    }
}
