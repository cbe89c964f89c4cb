//! Selective depth filtering.
//!
//! Two learned deformable filters refine a depth map in one pass each: a
//! smoothness filter with softmax (unit-sum) weights, then a sharpness
//! filter with tanh-and-mean-subtracted (zero-sum) weights whose response is
//! added back onto its input. A sigmoid attention map blends the two.
//!
//! Offsets are per-tap `(Δy, Δx)` pairs in pixels relative to the regular
//! `k×k` grid; the centre tap's offset is always zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{conv_cat, Bound, Conv2d, Init, ParamStore};
use crate::tensor::{concat_channels, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Smoothness,
    Sharpness,
}

#[derive(Clone, Copy, Debug)]
pub struct KernelField<'t> {
    /// N×k²×H×W.
    pub weights: Var<'t>,
    /// N×2k²×H×W, channel `2j` is Δy and `2j+1` is Δx of tap `j`.
    pub offsets: Var<'t>,
    pub kind: FilterKind,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct FilterConvs {
    pub weight: Conv2d,
    pub offset: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SdfParams {
    pub kernel: usize,
    pub smooth: FilterConvs,
    pub sharp: FilterConvs,
    pub attention: Conv2d,
}

impl SdfParams {
    /// Offset convolutions start at zero; everything else uses `init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::InvalidArgument(format!("filter kernel must be odd, got {kernel}")));
        }
        let taps = kernel * kernel;
        let mut filter = |tag: &str, rng: &mut R| FilterConvs {
            weight: Conv2d::new(
                store,
                &format!("{name}.{tag}.weight_conv"),
                feat_channels + 1,
                taps,
                3,
                1,
                init,
                rng,
            ),
            offset: Conv2d::new(
                store,
                &format!("{name}.{tag}.offset_conv"),
                feat_channels + 1,
                2 * taps,
                3,
                1,
                Init::Zeros,
                rng,
            ),
        };
        let smooth = filter("smooth", rng);
        let sharp = filter("sharp", rng);
        let attention = Conv2d::new(store, &format!("{name}.attention"), feat_channels + 2, 1, 3, 1, init, rng);
        Ok(Self {
            kernel,
            smooth,
            sharp,
            attention,
        })
    }
}

/// Regular grid displacement `(dy, dx)` of tap `j`.
pub fn tap_displacement(j: usize, kernel: usize) -> (f64, f64) {
    let r = (kernel / 2) as f64;
    ((j / kernel) as f64 - r, (j % kernel) as f64 - r)
}

pub fn gen_kernel_field<'t>(
    depth_in: &Var<'t>,
    f_dec: &Var<'t>,
    convs: &FilterConvs,
    kind: FilterKind,
    kernel: usize,
    p: &Bound<'t>,
) -> Result<KernelField<'t>> {
    let (_, _, h, w) = depth_in.dims4()?;
    let (_, _, fh, fw) = f_dec.dims4()?;
    if (h, w) != (fh, fw) {
        return Err(Error::dim("gen_kernel_field", format!("depth {h}×{w}, features {fh}×{fw}")));
    }
    let taps = kernel * kernel;
    let logits = conv_cat(&convs.weight, p, &[*depth_in, *f_dec])?;
    let weights = match kind {
        FilterKind::Smoothness => logits.softmax_channel()?,
        FilterKind::Sharpness => {
            let t = logits.tanh()?;
            let mean = t.sum_channels()?.scale(1.0 / taps as f64)?;
            t.sub(&mean.broadcast_channels(taps)?)?
        }
    };
    let raw = conv_cat(&convs.offset, p, &[*depth_in, *f_dec])?;
    let centre = taps / 2;
    let (n, _, _, _) = raw.dims4()?;
    let tape = raw.tape();
    let zero = tape.constant(Tensor::zeros(&[n, 2, h, w]));
    let mut parts = Vec::with_capacity(3);
    if centre > 0 {
        parts.push(raw.narrow_channels(0, 2 * centre)?);
    }
    parts.push(zero);
    if centre + 1 < taps {
        parts.push(raw.narrow_channels(2 * centre + 2, 2 * (taps - centre - 1))?);
    }
    let offsets = concat_channels(&parts)?;
    Ok(KernelField {
        weights,
        offsets,
        kind,
        kernel,
    })
}

/// Absolute sampling coordinates of tap `j` for an N×·×H×W map.
fn base_grid(n: usize, h: usize, w: usize, dy: f64, dx: f64) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; n * 2 * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                data[(b * 2) * plane + y * w + x] = y as f64 + dy;
                data[(b * 2 + 1) * plane + y * w + x] = x as f64 + dx;
            }
        }
    }
    Tensor::from_parts(vec![n, 2, h, w], data)
}

/// Σⱼ ωⱼ(p) · depth(p + gⱼ + oⱼ(p)).
fn deformable_response<'t>(tape: &'t Tape, depth: &Var<'t>, kf: &KernelField<'t>) -> Result<Var<'t>> {
    let (n, c, h, w) = depth.dims4()?;
    if c != 1 {
        return Err(Error::dim("deformable filter", format!("depth must have one channel, got {c}")));
    }
    let taps = kf.kernel * kf.kernel;
    let mut samples = Vec::with_capacity(taps);
    for j in 0..taps {
        let (dy, dx) = tap_displacement(j, kf.kernel);
        let coords = kf
            .offsets
            .narrow_channels(2 * j, 2)?
            .add(&tape.constant(base_grid(n, h, w, dy, dx)))?;
        samples.push(depth.sample_bilinear_at(&coords)?);
    }
    concat_channels(&samples)?.mul(&kf.weights)?.sum_channels()
}

pub fn smoothness_filter<'t>(depth: &Var<'t>, kf: &KernelField<'t>) -> Result<Var<'t>> {
    if kf.kind != FilterKind::Smoothness {
        return Err(Error::InvalidArgument("smoothness filter needs a smoothness kernel field".into()));
    }
    deformable_response(depth.tape(), depth, kf)
}

/// Input plus the zero-sum deformable response.
pub fn sharpness_filter<'t>(depth: &Var<'t>, kf: &KernelField<'t>) -> Result<Var<'t>> {
    if kf.kind != FilterKind::Sharpness {
        return Err(Error::InvalidArgument("sharpness filter needs a sharpness kernel field".into()));
    }
    depth.add(&deformable_response(depth.tape(), depth, kf)?)
}

/// `a·d_m + (1 − a)·d_a`.
pub fn blend<'t>(d_m: &Var<'t>, d_a: &Var<'t>, a: &Var<'t>) -> Result<Var<'t>> {
    a.lerp(d_m, d_a)
}

/// Returns the blended depth and the selection map.
pub fn selective_blend<'t>(d_m: &Var<'t>, d_a: &Var<'t>, f_dec: &Var<'t>, attention: &Conv2d, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let a = conv_cat(attention, p, &[*f_dec, *d_m, *d_a])?.sigmoid()?;
    Ok((blend(d_m, d_a, &a)?, a))
}

#[derive(Clone, Copy, Debug)]
pub struct SdfOutput<'t> {
    pub depth: Var<'t>,
    pub selection: Var<'t>,
    pub smoothed: Var<'t>,
    pub sharpened: Var<'t>,
}

pub fn sdf_forward<'t>(depth_in: &Var<'t>, f_dec: &Var<'t>, params: &SdfParams, p: &Bound<'t>) -> Result<SdfOutput<'t>> {
    let k = params.kernel;
    let kf_m = gen_kernel_field(depth_in, f_dec, &params.smooth, FilterKind::Smoothness, k, p)?;
    let d_m = smoothness_filter(depth_in, &kf_m)?;
    let kf_a = gen_kernel_field(&d_m, f_dec, &params.sharp, FilterKind::Sharpness, k, p)?;
    let d_a = sharpness_filter(&d_m, &kf_a)?;
    let (depth, selection) = selective_blend(&d_m, &d_a, f_dec, &params.attention, p)?;
    Ok(SdfOutput {
        depth,
        selection,
        smoothed: d_m,
        sharpened: d_a,
    })
}
