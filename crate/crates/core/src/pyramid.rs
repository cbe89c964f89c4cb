//! Laplacian pyramid with 2×2 average-pool `down` and bilinear ×2 `up`.
//!
//! For two levels the decomposition is
//!
//! ```text
//! residual  = down(down(x))
//! band[1]   = down(x) - up(residual)
//! band[0]   = x - up(down(x))
//! ```
//!
//! and reconstruction runs the recursion backwards, so the round trip is
//! exact up to floating-point rounding.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Tensor, Var};

/// 2×2 average pooling.
pub fn down(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("down", format!("{h}×{w} cannot be halved")));
    }
    let data = kernels::sum_pool_forward(x.data(), n * c, h, w, 2)
        .into_iter()
        .map(|v| v * 0.25)
        .collect();
    Ok(Tensor::from_parts(vec![n, c, h / 2, w / 2], data))
}

/// Bilinear upsampling to twice the height and width.
pub fn up(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let data = kernels::resize_forward(x.data(), n * c, h, w, 2 * h, 2 * w);
    Ok(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], data))
}

/// Differentiable counterpart of [`down`].
pub fn down_var<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    x.avg_pool(2)
}

/// Differentiable counterpart of [`up`].
pub fn up_var<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let (_, _, h, w) = x.dims4()?;
    x.resize(2 * h, 2 * w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianLevels {
    /// Bandpass images, finest first.
    pub bandpass: Vec<Tensor>,
    /// Low-frequency residual at `1/2^levels` resolution.
    pub residual: Tensor,
}

impl LaplacianLevels {
    pub fn level_count(&self) -> usize {
        self.bandpass.len()
    }
}

pub fn laplacian_decompose(x: &Tensor, levels: usize) -> Result<LaplacianLevels> {
    let (_, _, h, w) = x.dims4()?;
    let f = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("{levels} levels")))?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::dim("laplacian_decompose", format!("{h}×{w} not divisible by 2^{levels}")));
    }
    // Gaussian-style chain x, down(x), down(down(x)), ...
    let mut chain = vec![x.clone()];
    for _ in 0..levels {
        let next = down(chain.last().unwrap())?;
        chain.push(next);
    }
    let bandpass = (0..levels)
        .map(|i| {
            let upper = up(&chain[i + 1])?;
            chain[i].zip_map(&upper, |a, b| a - b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LaplacianLevels {
        bandpass,
        residual: chain.pop().unwrap(),
    })
}

pub fn laplacian_reconstruct(levels: &LaplacianLevels) -> Result<Tensor> {
    let mut acc = levels.residual.clone();
    for (i, band) in levels.bandpass.iter().enumerate().rev() {
        let upper = up(&acc)?;
        if upper.shape() != band.shape() {
            return Err(Error::dim(
                "laplacian_reconstruct",
                format!("level {i}: {:?} does not chain to {:?}", band.shape(), upper.shape()),
            ));
        }
        acc = upper.zip_map(band, |a, b| a + b)?;
    }
    Ok(acc)
}
