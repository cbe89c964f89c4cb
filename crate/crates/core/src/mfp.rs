//! Multi-path feature pyramid: split the channels into `p` groups, send
//! group `i` through `i` stride-2 convolutions, upsample every path back,
//! merge with a 3×3 convolution and add the input.
//!
//! All convolutions here pad by edge replication so that a spatially
//! constant feature map stays constant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Padding, ParamStore, LEAKY_SLOPE};
use crate::tensor::{concat_channels, Var};

#[derive(Clone, Debug)]
pub struct MfpParams {
    pub channels: usize,
    /// `paths[i]` holds `i + 1` stride-2 convolutions.
    pub paths: Vec<Vec<Conv2d>>,
    pub merge: Conv2d,
}

/// Spatial sizes seen inside one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MfpTrace {
    /// `(h, w)` after each stride-2 conv of each path.
    pub path_dims: Vec<Vec<(usize, usize)>>,
}

impl MfpParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        path_count: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if path_count == 0 || !channels.is_multiple_of(path_count) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels cannot be split into {path_count} paths"
            )));
        }
        let group = channels / path_count;
        let paths = (1..=path_count)
            .map(|i| {
                (0..i)
                    .map(|j| {
                        Conv2d::new(store, &format!("{name}.path{i}.conv{j}"), group, group, 3, 2, init, rng)
                            .with_padding(Padding::Replicate)
                    })
                    .collect()
            })
            .collect();
        let merge = Conv2d::new(store, &format!("{name}.merge"), channels, channels, 3, 1, init, rng).with_padding(Padding::Replicate);
        Ok(Self { channels, paths, merge })
    }

    pub fn path_count(&self) -> usize {
        self.paths.len()
    }
}

pub fn mfp_forward<'t>(f_e: &Var<'t>, params: &MfpParams, p: &Bound<'t>) -> Result<Var<'t>> {
    mfp_forward_traced(f_e, params, p).map(|(out, _)| out)
}

pub fn mfp_forward_traced<'t>(f_e: &Var<'t>, params: &MfpParams, p: &Bound<'t>) -> Result<(Var<'t>, MfpTrace)> {
    let (_, c, h, w) = f_e.dims4()?;
    let np = params.path_count();
    if c != params.channels {
        return Err(Error::dim("mfp_forward", format!("expected {} channels, got {c}", params.channels)));
    }
    if h < (1 << np) || w < (1 << np) {
        return Err(Error::dim("mfp_forward", format!("{h}×{w} too small for {np} paths")));
    }
    let groups = f_e.split_channels(&vec![c / np; np])?;
    let mut trace = MfpTrace::default();
    let mut outs = Vec::with_capacity(np);
    for (group, convs) in groups.iter().zip(&params.paths) {
        let mut x = *group;
        let mut dims = Vec::with_capacity(convs.len());
        for conv in convs {
            x = conv.forward(p, &x)?.leaky_relu(LEAKY_SLOPE)?;
            let (_, _, ph, pw) = x.dims4()?;
            dims.push((ph, pw));
        }
        trace.path_dims.push(dims);
        outs.push(x.resize(h, w)?);
    }
    let merged = params.merge.forward(p, &concat_channels(&outs)?)?;
    Ok((merged.add(f_e)?, trace))
}
