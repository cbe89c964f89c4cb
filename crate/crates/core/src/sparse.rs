//! Sparse depth maps, the learned weighted-pooling pyramid and seeded
//! sparsity sampling.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{conv_cat, Bound, Conv2d};
use crate::tensor::kernels;
use crate::tensor::{Tape, Tensor, Var};

/// Guards the pooling denominator.
pub const POOL_EPS: f64 = 1e-8;

/// Number of pooled levels above full resolution.
pub const POOL_LEVELS: usize = 4;

/// Depth in metres with a {0,1} validity mask; both N×1×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    depth: Tensor,
    mask: Tensor,
}

impl SparseDepth {
    pub fn new(depth: Tensor, mask: Tensor) -> Result<Self> {
        let (_, c, _, _) = depth.dims4()?;
        if c != 1 || depth.shape() != mask.shape() {
            return Err(Error::dim(
                "sparse_depth",
                format!("depth {:?} / mask {:?}", depth.shape(), mask.shape()),
            ));
        }
        for (&d, &m) in depth.data().iter().zip(mask.data()) {
            if m != 0.0 && m != 1.0 {
                return Err(Error::InvalidArgument(format!("mask value {m} is not 0 or 1")));
            }
            if d < 0.0 || (m == 0.0 && d != 0.0) {
                return Err(Error::InvalidArgument(format!("depth {d} inconsistent with mask {m}")));
            }
        }
        Ok(Self { depth, mask })
    }

    /// Treats every strictly positive pixel as a measurement.
    pub fn from_depth(depth: Tensor) -> Result<Self> {
        let depth = depth.map(|d| d.max(0.0));
        let mask = depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        Self::new(depth, mask)
    }

    pub fn empty(n: usize, h: usize, w: usize) -> Self {
        Self {
            depth: Tensor::zeros(&[n, 1, h, w]),
            mask: Tensor::zeros(&[n, 1, h, w]),
        }
    }

    pub fn depth(&self) -> &Tensor {
        &self.depth
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (n, _, h, w) = self.depth.dims4().expect("validated");
        (n, h, w)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn concat_batch(parts: &[SparseDepth]) -> Result<Self> {
        let depth: Vec<Tensor> = parts.iter().map(|s| s.depth.clone()).collect();
        let mask: Vec<Tensor> = parts.iter().map(|s| s.mask.clone()).collect();
        Ok(Self {
            depth: Tensor::concat_batch(&depth)?,
            mask: Tensor::concat_batch(&mask)?,
        })
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        Ok(Self {
            depth: self.depth.flip_horizontal()?,
            mask: self.mask.flip_horizontal()?,
        })
    }
}

/// One pooled level: differentiable depth plus its (constant) mask.
#[derive(Clone, Copy, Debug)]
pub struct PooledLevel<'t> {
    pub depth: Var<'t>,
    pub mask: Var<'t>,
}

impl PooledLevel<'_> {
    pub fn to_sparse(&self) -> Result<SparseDepth> {
        SparseDepth::new(self.depth.value(), self.mask.value())
    }
}

/// Levels Ŝ⁽⁰⁾…Ŝ⁽⁴⁾, finest first.
#[derive(Clone, Debug)]
pub struct PooledPyramid<'t> {
    pub levels: Vec<PooledLevel<'t>>,
}

/// Logical OR of the mask over `s×s` patches.
fn pool_mask(mask: &Tensor, s: usize) -> Tensor {
    let (n, c, h, w) = mask.dims4().expect("rank-4 mask");
    let data = kernels::sum_pool_forward(mask.data(), n * c, h, w, s)
        .into_iter()
        .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(vec![n, c, h / s, w / s], data)
}

/// Per-patch peak logit over valid pixels.
struct PatchPeak {
    /// `-peak` at every pixel of a patch, 0 where the patch has no valid pixel.
    shift: Tensor,
    /// 1 at the pixel holding each patch's peak.
    argmax: Tensor,
    /// Peak per patch, 0 where the patch has no valid pixel.
    peak: Tensor,
}

fn patch_peak(z: &Tensor, mask: &Tensor, size: usize) -> PatchPeak {
    let (n, _, h, w) = z.dims4().expect("logits are 4-d");
    let (ph, pw) = (h / size, w / size);
    let mut best: Vec<Option<usize>> = vec![None; n * ph * pw];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = (b * h + y) * w + x;
                if mask.data()[i] == 1.0 {
                    let k = (b * ph + y / size) * pw + x / size;
                    if best[k].is_none_or(|j| z.data()[i] > z.data()[j]) {
                        best[k] = Some(i);
                    }
                }
            }
        }
    }
    let peak: Vec<f64> = best.iter().map(|j| j.map_or(0.0, |j| z.data()[j])).collect();
    let mut shift = vec![0.0; n * h * w];
    let mut argmax = vec![0.0; n * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                shift[(b * h + y) * w + x] = -peak[(b * ph + y / size) * pw + x / size];
            }
        }
    }
    for j in best.into_iter().flatten() {
        argmax[j] = 1.0;
    }
    PatchPeak {
        shift: Tensor::from_parts(vec![n, 1, h, w], shift),
        argmax: Tensor::from_parts(vec![n, 1, h, w], argmax),
        peak: Tensor::from_parts(vec![n, 1, ph, pw], peak),
    }
}

fn pool_logits<'t>(tape: &'t Tape, s: &SparseDepth, level: usize, conv: &Conv2d, p: &Bound<'t>) -> Result<(Var<'t>, PatchPeak)> {
    let (_, h, w) = s.dims();
    let size = 1usize << level;
    if h % size != 0 || w % size != 0 {
        return Err(Error::dim("pooling_weights", format!("{h}×{w} not divisible by {size}")));
    }
    let depth = tape.constant(s.depth.clone());
    let mask = tape.constant(s.mask.clone());
    let logits = conv_cat(conv, p, &[depth, mask])?;
    let peak = patch_peak(&logits.value(), &s.mask, size);
    Ok((logits, peak))
}

/// Positive per-pixel pooling weights `exp(conv(cat(depth, mask)))` at full
/// resolution, for pooling over `2^level` patches.
///
/// Every patch's logits are shifted by their largest value over valid
/// pixels, so the largest valid ω of a patch is 1. A common factor per patch
/// cancels in Σ ω·S / Σ 𝕀·ω up to ε; without it, logits of metric depths can
/// drive every ω of a patch below ε. The shift is constant here;
/// [`weighted_pool`] differentiates through it.
pub fn pooling_weights<'t>(tape: &'t Tape, s: &SparseDepth, level: usize, conv: &Conv2d, p: &Bound<'t>) -> Result<Var<'t>> {
    let (logits, peak) = pool_logits(tape, s, level, conv, p)?;
    logits.add_const(&peak.shift)?.exp()
}

/// Weighted pooling of `s` over non-overlapping `2^level` patches:
/// Σ ω·S / (Σ 𝕀(S)·ω + ε). Level 0 returns `s` unchanged.
pub fn weighted_pool<'t>(tape: &'t Tape, s: &SparseDepth, level: usize, conv: &Conv2d, p: &Bound<'t>) -> Result<PooledLevel<'t>> {
    let (logits, peak) = pool_logits(tape, s, level, conv, p)?;
    if level == 0 {
        return Ok(full_resolution(tape, s));
    }
    let weights = logits.add_const(&peak.shift)?.exp()?;
    // exp(m - peak(θ)) is exactly 1 but carries the peak's gradient through ε
    let tracked = logits.mul_const(&peak.argmax)?.sum_pool(1 << level)?;
    let rescale = tracked.scale(-1.0)?.add_const(&peak.peak)?.exp()?;
    pool_scaled(tape, s, level, &weights, Some(&rescale))
}

/// Level 0: the measurements themselves.
pub fn full_resolution<'t>(tape: &'t Tape, s: &SparseDepth) -> PooledLevel<'t> {
    PooledLevel {
        depth: tape.constant(s.depth.clone()),
        mask: tape.constant(s.mask.clone()),
    }
}

/// [`weighted_pool`] with precomputed weights.
pub fn pool_with_weights<'t>(tape: &'t Tape, s: &SparseDepth, level: usize, weights: &Var<'t>) -> Result<PooledLevel<'t>> {
    pool_scaled(tape, s, level, weights, None)
}

/// Pools with per-patch sums multiplied by `rescale`.
fn pool_scaled<'t>(tape: &'t Tape, s: &SparseDepth, level: usize, weights: &Var<'t>, rescale: Option<&Var<'t>>) -> Result<PooledLevel<'t>> {
    let (_, h, w) = s.dims();
    let size = 1usize << level;
    if h % size != 0 || w % size != 0 {
        return Err(Error::dim("weighted_pool", format!("{h}×{w} not divisible by {size}")));
    }
    if level == 0 {
        return Ok(full_resolution(tape, s));
    }
    let mut num = weights.mul_const(&s.depth)?.sum_pool(size)?;
    let mut den = weights.mul_const(&s.mask)?.sum_pool(size)?;
    if let Some(r) = rescale {
        num = num.mul(r)?;
        den = den.mul(r)?;
    }
    let den = den.add_const(&Tensor::full(&den.shape(), POOL_EPS))?;
    Ok(PooledLevel {
        depth: num.div(&den)?,
        mask: tape.constant(pool_mask(&s.mask, size)),
    })
}

/// Level 0 is `s`; level `i` pools `s` with `convs[i - 1]`.
pub fn build_pyramid<'t>(tape: &'t Tape, s: &SparseDepth, convs: &[Conv2d], p: &Bound<'t>) -> Result<PooledPyramid<'t>> {
    if convs.len() != POOL_LEVELS {
        return Err(Error::InvalidArgument(format!(
            "expected {POOL_LEVELS} pooling convs, got {}",
            convs.len()
        )));
    }
    let (_, h, w) = s.dims();
    let f = 1 << POOL_LEVELS;
    if h % f != 0 || w % f != 0 {
        return Err(Error::dim("build_pyramid", format!("{h}×{w} not divisible by {f}")));
    }
    let mut levels = vec![full_resolution(tape, s)];
    for (i, conv) in convs.iter().enumerate() {
        levels.push(weighted_pool(tape, s, i + 1, conv, p)?);
    }
    Ok(PooledPyramid { levels })
}

/// Keeps `floor(keep_fraction · valid)` measurements chosen uniformly
/// without replacement.
pub fn sparsity_sample(s: &SparseDepth, keep_fraction: f64, seed: u64) -> Result<SparseDepth> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let valid: Vec<usize> = s
        .mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect();
    // tolerance keeps e.g. 0.29 × 100 from flooring to 28
    let keep = ((keep_fraction * valid.len() as f64) + 1e-9).floor() as usize;
    if keep == valid.len() {
        return Ok(s.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = vec![0.0; s.depth.len()];
    let mut mask = vec![0.0; s.mask.len()];
    for k in sample(&mut rng, valid.len(), keep) {
        let i = valid[k];
        depth[i] = s.depth.data()[i];
        mask[i] = 1.0;
    }
    SparseDepth::new(
        Tensor::from_parts(s.depth.shape().to_vec(), depth),
        Tensor::from_parts(s.mask.shape().to_vec(), mask),
    )
}
