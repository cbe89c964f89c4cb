//! Confidence estimation and confidence-gated fusion with pooled
//! measurements.

use crate::error::{Error, Result};
use crate::nn::{conv_cat, Bound, Conv2d};
use crate::sparse::PooledLevel;
use crate::tensor::Var;

/// `sigmoid(conv(cat(f_dec, Ŝ))) · mask`; zero wherever the level has no
/// measurement.
pub fn estimate_confidence<'t>(f_dec: &Var<'t>, level: &PooledLevel<'t>, head: &Conv2d, p: &Bound<'t>) -> Result<Var<'t>> {
    let (_, _, h, w) = f_dec.dims4()?;
    let (_, _, sh, sw) = level.depth.dims4()?;
    if (h, w) != (sh, sw) {
        return Err(Error::dim(
            "estimate_confidence",
            format!("features {h}×{w}, measurements {sh}×{sw}"),
        ));
    }
    conv_cat(head, p, &[*f_dec, level.depth])?.sigmoid()?.mul(&level.mask)
}

/// `c·Ŝ + (1 − c)·coarse`.
pub fn fuse_depth<'t>(coarse: &Var<'t>, measured: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    c.lerp(measured, coarse)
}
