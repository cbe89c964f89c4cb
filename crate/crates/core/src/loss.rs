//! Multi-scale training loss: squared plus absolute error of every step's
//! prediction, bilinearly upsampled to full resolution, over valid pixels.

use crate::error::{Error, Result};
use crate::network::{DepthPyramid, SCALES};
use crate::sparse::SparseDepth;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// `(mse, mae)` per step, coarsest first, each normalised by `valid`.
    pub terms: Vec<(f64, f64)>,
    pub valid: usize,
}

/// `weights[k]` scales step `k + 1`'s terms; `None` means all ones.
pub fn multiscale_loss<'t>(pyr: &DepthPyramid<'t>, gt: &SparseDepth, weights: Option<&[f64; SCALES]>) -> Result<(Var<'t>, LossReport)> {
    let valid = gt.valid_count();
    if valid == 0 {
        return Err(Error::EmptyValidSet("multiscale_loss"));
    }
    let (n, h, w) = gt.dims();
    let tape = pyr.last().tape();
    let target = tape.constant(gt.depth().clone());
    let mask = gt.mask();
    let norm = 1.0 / valid as f64;
    let mut total: Option<Var<'t>> = None;
    let mut terms = Vec::with_capacity(pyr.steps());
    for (k, d) in pyr.depth.iter().enumerate() {
        let (dn, _, _, _) = d.dims4()?;
        if dn != n {
            return Err(Error::dim("multiscale_loss", format!("prediction batch {dn}, ground truth {n}")));
        }
        let diff = d.resize(h, w)?.sub(&target)?.mul_const(mask)?;
        let mse = diff.square()?.sum()?.scale(norm)?;
        let mae = diff.abs()?.sum()?.scale(norm)?;
        terms.push((mse.scalar(), mae.scalar()));
        let wk = weights.map_or(1.0, |ws| ws[k]);
        let term = mse.add(&mae)?.scale(wk)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("at least one step");
    let report = LossReport {
        total: total.scalar(),
        terms,
        valid,
    };
    Ok((total, report))
}
