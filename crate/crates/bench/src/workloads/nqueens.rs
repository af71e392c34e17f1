use offload_core::task::{TaskBundle, TaskError};
use serde::{Deserialize, Serialize};

pub const MAX_N: u32 = 10;

/// Counts non-attacking placements by visiting all N^N one-queen-per-row
/// boards. Splits by regions of the first queen's column.
#[derive(Debug, Clone, Copy, Default)]
pub struct NQueens;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Board {
    pub n: u32,
    /// First-row columns to cover; all of them when `None`.
    pub first_cols: Option<Vec<u32>>,
}

impl Board {
    pub fn new(n: u32) -> Self {
        Self { n, first_cols: None }
    }

    fn cols(&self) -> Vec<u32> {
        self.first_cols.clone().unwrap_or_else(|| (0..self.n).collect())
    }
}

/// Visits every completion of `placed`; counts the conflict-free ones.
fn count(n: u32, placed: &mut Vec<u32>, ok: bool) -> u64 {
    let row = placed.len() as u32;
    if row == n {
        return ok as u64;
    }
    let mut total = 0;
    for c in 0..n {
        let fits = ok
            && placed.iter().enumerate().all(|(r, &pc)| {
                pc != c && (pc as i64 - c as i64).unsigned_abs() != (row - r as u32) as u64
            });
        placed.push(c);
        total += count(n, placed, fits);
        placed.pop();
    }
    total
}

impl TaskBundle for NQueens {
    type State = ();
    type Input = Board;
    type Output = u64;

    fn id(&self) -> &str {
        "nqueens"
    }

    fn run(&self, _: &mut (), board: &Board) -> Result<u64, TaskError> {
        if !(1..=MAX_N).contains(&board.n) {
            return Err(TaskError::InvalidInput(format!("board size {} outside 1..={MAX_N}", board.n)));
        }
        let mut placed = Vec::with_capacity(board.n as usize);
        Ok(board
            .cols()
            .into_iter()
            .filter(|&c| c < board.n)
            .map(|c| {
                placed.clear();
                placed.push(c);
                count(board.n, &mut placed, true)
            })
            .sum())
    }

    fn work_units(&self, board: &Board) -> u64 {
        let n = board.n.clamp(1, MAX_N) as u64;
        n.pow(n as u32 - 1) * board.cols().len() as u64
    }

    fn unit_cost_ms(&self) -> f64 {
        2e-3
    }

    fn input_size_proxy(&self, board: &Board) -> f64 {
        board.n as f64
    }

    fn splittable(&self) -> bool {
        true
    }

    fn split(&self, board: &Board, parts: usize) -> Vec<Board> {
        let cols = board.cols();
        let parts = parts.clamp(1, cols.len().max(1));
        let (base, extra) = (cols.len() / parts, cols.len() % parts);
        let mut out = Vec::with_capacity(parts);
        let mut at = 0;
        for i in 0..parts {
            let len = base + usize::from(i < extra);
            out.push(Board {
                n: board.n,
                first_cols: Some(cols[at..at + len].to_vec()),
            });
            at += len;
        }
        out
    }

    fn merge(&self, partials: Vec<u64>) -> Result<u64, TaskError> {
        Ok(partials.into_iter().sum())
    }
}
