//! Non-learned reference: average the sparse points on a coarse grid, fill
//! empty cells from the nearest filled cell and upsample bilinearly.

use crate::error::{Error, Result};
use crate::sparse::SparseDepth;
use crate::tensor::{Tape, Tensor};

/// Grid cell size in pixels.
pub const BASELINE_CELL: usize = 8;

pub fn bilinear_baseline(s: &SparseDepth, cell: usize) -> Result<Tensor> {
    let (n, h, w) = s.dims();
    if cell == 0 || !h.is_multiple_of(cell) || !w.is_multiple_of(cell) {
        return Err(Error::dim("bilinear_baseline", format!("{h}×{w} not divisible by cell {cell}")));
    }
    let (gh, gw) = (h / cell, w / cell);
    let mut grid = vec![0.0; n * gh * gw];
    for b in 0..n {
        let mut sum = vec![0.0; gh * gw];
        let mut count = vec![0usize; gh * gw];
        for y in 0..h {
            for x in 0..w {
                if s.mask().at4(b, 0, y, x) == 1.0 {
                    let k = (y / cell) * gw + x / cell;
                    sum[k] += s.depth().at4(b, 0, y, x);
                    count[k] += 1;
                }
            }
        }
        let filled: Vec<usize> = (0..gh * gw).filter(|&k| count[k] > 0).collect();
        if filled.is_empty() {
            return Err(Error::EmptyValidSet("bilinear_baseline"));
        }
        for k in 0..gh * gw {
            let src = if count[k] > 0 {
                k
            } else {
                let (ky, kx) = ((k / gw) as isize, (k % gw) as isize);
                *filled
                    .iter()
                    .min_by_key(|&&f| {
                        let (fy, fx) = ((f / gw) as isize, (f % gw) as isize);
                        (ky - fy).pow(2) + (kx - fx).pow(2)
                    })
                    .expect("non-empty")
            };
            grid[b * gh * gw + k] = sum[src] / count[src] as f64;
        }
    }
    let tape = Tape::new();
    Ok(tape.constant(Tensor::new(&[n, 1, gh, gw], grid)?).resize(h, w)?.value())
}
