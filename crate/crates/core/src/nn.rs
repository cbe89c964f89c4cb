//! Named parameter storage and the small set of layers the network uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tape, Tensor, Var};

/// Slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces all tensors, keeping names; shapes must match.
    pub fn replace_all(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::dim("replace_all", "parameter set does not match"));
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Puts every parameter on `tape`, tracked when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape, addressed by [`ParamId`].
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in), zero bias.
    Default,
    Zeros,
    /// Uniform in ±scale for weights and biases alike.
    Uniform(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

fn init_tensors<R: Rng + ?Sized>(wshape: &[usize], fan_in: usize, out: usize, init: Init, rng: &mut R) -> (Tensor, Tensor) {
    match init {
        Init::Default => {
            let b = 1.0 / (fan_in as f64).sqrt();
            (Tensor::rand_uniform(wshape, -b, b, rng), Tensor::zeros(&[out]))
        }
        Init::Zeros => (Tensor::zeros(wshape), Tensor::zeros(&[out])),
        Init::Uniform(s) => (Tensor::rand_uniform(wshape, -s, s, rng), Tensor::rand_uniform(&[out], -s, s, rng)),
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = init_tensors(
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            out_channels,
            init,
            rng,
        );
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: Padding::Zero,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// "Same"-style convolution: padding of `kernel / 2`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let pad = self.kernel / 2;
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        match self.padding {
            Padding::Zero => x.conv2d(&w, &b, self.stride, pad),
            Padding::Replicate => x.pad_replicate(pad)?.conv2d(&w, &b, self.stride, 0),
        }
    }
}

/// Stride-2 transposed convolution with a 4×4 kernel; doubles resolution.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample2x {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = init_tensors(&[in_channels, out_channels, 4, 4], out_channels * 16, out_channels, init, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d_transpose(&p.var(self.weight), &p.var(self.bias), 2, 1)
    }
}

/// Two 3×3 convolutions with a leaky ReLU between them and an identity
/// (or 1×1 projection) shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            Init::Default,
            rng,
        );
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            Init::Default,
            rng,
        );
        let shortcut = (in_channels != out_channels || stride != 1).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                Init::Default,
                rng,
            )
        });
        Self { conv1, conv2, shortcut }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?.leaky_relu(LEAKY_SLOPE)?;
        let h = self.conv2.forward(p, &h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(p, x)?,
            None => *x,
        };
        h.add(&skip)?.leaky_relu(LEAKY_SLOPE)
    }
}

/// `conv(cat(parts))`.
pub fn conv_cat<'t>(conv: &Conv2d, p: &Bound<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
    conv.forward(p, &concat_channels(parts)?)
}
