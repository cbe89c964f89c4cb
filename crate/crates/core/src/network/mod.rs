//! The complete model: two encoders fused per scale, the multi-path
//! pyramid at the bottleneck, a skip-connected decoder and the five-step
//! coarse-to-fine predictor.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::fusion::{estimate_confidence, fuse_depth};
use crate::mfp::{mfp_forward, MfpParams};
use crate::nn::{conv_cat, Bound, Conv2d, Init, ParamStore, ResBlock, Upsample2x, LEAKY_SLOPE};
use crate::sdf::{sdf_forward, SdfParams};
use crate::seeds;
use crate::sparse::{build_pyramid, full_resolution, weighted_pool, PooledLevel, PooledPyramid, SparseDepth};
use crate::tensor::{concat_channels, Tape, Tensor, Var};

/// Number of scales, and of progressive steps.
pub const SCALES: usize = 5;

/// Total downsampling between the input and the coarsest scale.
pub const COARSEST_FACTOR: usize = 1 << (SCALES - 1);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub base_channels: usize,
    /// Channel multiplier of scales 0–4.
    pub multipliers: [usize; SCALES],
    pub mfp_paths: usize,
    pub sdf_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            multipliers: [1, 2, 4, 8, 8],
            mfp_paths: 4,
            sdf_kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn channels(&self) -> [usize; SCALES] {
        self.multipliers.map(|m| m * self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.multipliers.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.mfp_paths == 0 || !self.channels()[SCALES - 1].is_multiple_of(self.mfp_paths) {
            return Err(Error::Config(format!(
                "bottleneck width {} is not divisible by mfp_paths = {}",
                self.channels()[SCALES - 1],
                self.mfp_paths
            )));
        }
        if self.sdf_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("sdf_kernel must be odd, got {}", self.sdf_kernel)));
        }
        Ok(())
    }

    /// Smallest input side the configuration accepts.
    pub fn min_input_side(&self) -> usize {
        COARSEST_FACTOR << self.mfp_paths
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(COARSEST_FACTOR) || !w.is_multiple_of(COARSEST_FACTOR) {
            return Err(Error::dim("lpnet", format!("input {h}×{w} is not divisible by {COARSEST_FACTOR}")));
        }
        let min = self.min_input_side();
        if h < min || w < min {
            return Err(Error::dim(
                "lpnet",
                format!("input {h}×{w} is smaller than {min}×{min} required by {} paths", self.mfp_paths),
            ));
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let m: Vec<String> = self.multipliers.iter().map(usize::to_string).collect();
        format!(
            "base_channels = {}\nmultipliers = {}\nmfp_paths = {}\nsdf_kernel = {}\n",
            self.base_channels,
            m.join(","),
            self.mfp_paths,
            self.sdf_kernel
        )
    }

    /// Applies one `key = value` pair; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "base_channels" => self.base_channels = parse(value)?,
            "mfp_paths" => self.mfp_paths = parse(value)?,
            "sdf_kernel" => self.sdf_kernel = parse(value)?,
            "multipliers" => {
                let parts: Vec<usize> = value.split(',').map(parse).collect::<Result<_>>()?;
                self.multipliers = parts
                    .try_into()
                    .map_err(|p: Vec<usize>| Error::Config(format!("multipliers: expected {SCALES} values, got {}", p.len())))?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown architecture key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: Conv2d,
    stem_block: ResBlock,
    stages: Vec<(ResBlock, ResBlock)>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, in_channels: usize, ch: &[usize; SCALES], rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let stem = Conv2d::new(store, &format!("{name}.stem"), in_channels, ch[0], 3, 1, Init::Default, rng);
        let stem_block = ResBlock::new(store, &format!("{name}.s0"), ch[0], ch[0], 1, rng);
        let stages = (1..SCALES)
            .map(|i| {
                (
                    ResBlock::new(store, &format!("{name}.s{i}.down"), ch[i - 1], ch[i], 2, rng),
                    ResBlock::new(store, &format!("{name}.s{i}.block"), ch[i], ch[i], 1, rng),
                )
            })
            .collect();
        Self { stem, stem_block, stages }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut f = self.stem_block.forward(p, &self.stem.forward(p, x)?.leaky_relu(LEAKY_SLOPE)?)?;
        let mut out = vec![f];
        for (down, block) in &self.stages {
            f = block.forward(p, &down.forward(p, &f)?)?;
            out.push(f);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Upsample2x,
    reduce: Conv2d,
    block: ResBlock,
}

impl DecoderStage {
    fn forward<'t>(&self, p: &Bound<'t>, coarser: &Var<'t>, skip: &Var<'t>) -> Result<Var<'t>> {
        let up = self.up.forward(p, coarser)?.leaky_relu(LEAKY_SLOPE)?;
        let merged = conv_cat(&self.reduce, p, &[up, *skip])?.leaky_relu(LEAKY_SLOPE)?;
        self.block.forward(p, &merged)
    }
}

/// Per-step outputs of [`LpNet::progressive_predict`]; index `k` belongs to
/// step `k + 1`, which works at scale `4 − k`.
#[derive(Clone, Debug)]
pub struct DepthPyramid<'t> {
    /// D̂ after fusion (and refinement from step 2 on).
    pub depth: Vec<Var<'t>>,
    /// D̂′, the prediction before fusion.
    pub coarse: Vec<Var<'t>>,
    pub confidence: Vec<Var<'t>>,
    /// Selection maps of steps 2 onward.
    pub selection: Vec<Var<'t>>,
}

impl<'t> DepthPyramid<'t> {
    pub fn steps(&self) -> usize {
        self.depth.len()
    }

    pub fn last(&self) -> Var<'t> {
        *self.depth.last().expect("at least one step")
    }

    /// Prediction at `scale` (0 = full resolution), if that step ran.
    pub fn at_scale(&self, scale: usize) -> Option<Var<'t>> {
        (SCALES - 1).checked_sub(scale).and_then(|k| self.depth.get(k).copied())
    }
}

#[derive(Clone, Debug)]
pub struct LpNet {
    config: ArchConfig,
    params: ParamStore,
    image_encoder: Encoder,
    depth_encoder: Encoder,
    fusion: Vec<Conv2d>,
    mfp: MfpParams,
    /// `decoder[i]` produces the decoder features of scale `i`.
    decoder: Vec<DecoderStage>,
    head: Conv2d,
    confidence: Vec<Conv2d>,
    /// `sdf[i]` refines scale `i`.
    sdf: Vec<SdfParams>,
    pool: Vec<Conv2d>,
}

impl LpNet {
    /// Builds the model with parameters drawn from the `init` stream of `seed`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut seeds::stream(seed, "init");
        let ch = config.channels();
        let mut store = ParamStore::new();
        let image_encoder = Encoder::new(&mut store, "enc_img", 3, &ch, rng);
        let depth_encoder = Encoder::new(&mut store, "enc_dep", 2, &ch, rng);
        let fusion = (0..SCALES)
            .map(|i| Conv2d::new(&mut store, &format!("fuse{i}"), 2 * ch[i], ch[i], 1, 1, Init::Default, rng))
            .collect();
        let mfp = MfpParams::new(&mut store, "mfp", ch[SCALES - 1], config.mfp_paths, Init::Default, rng)?;
        let decoder = (0..SCALES - 1)
            .map(|i| DecoderStage {
                up: Upsample2x::new(&mut store, &format!("dec{i}.up"), ch[i + 1], ch[i], Init::Default, rng),
                reduce: Conv2d::new(&mut store, &format!("dec{i}.reduce"), 2 * ch[i], ch[i], 1, 1, Init::Default, rng),
                block: ResBlock::new(&mut store, &format!("dec{i}.block"), ch[i], ch[i], 1, rng),
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", ch[SCALES - 1], 1, 3, 1, Init::Default, rng);
        let confidence = (0..SCALES)
            .map(|i| Conv2d::new(&mut store, &format!("conf{i}"), ch[i] + 1, 1, 3, 1, Init::Default, rng))
            .collect();
        let sdf = (0..SCALES - 1)
            .map(|i| SdfParams::new(&mut store, &format!("sdf{i}"), ch[i], config.sdf_kernel, Init::Default, rng))
            .collect::<Result<_>>()?;
        let pool = (1..SCALES)
            .map(|i| Conv2d::new(&mut store, &format!("pool{i}"), 2, 1, 3, 1, Init::Default, rng))
            .collect();
        Ok(Self {
            config,
            params: store,
            image_encoder,
            depth_encoder,
            fusion,
            mfp,
            decoder,
            head,
            confidence,
            sdf,
            pool,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_inputs(&self, image: &Tensor, s: &SparseDepth) -> Result<()> {
        let (n, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::dim("lpnet", format!("image must have 3 channels, got {c}")));
        }
        if s.dims() != (n, h, w) {
            return Err(Error::dim("lpnet", format!("image {n}×{h}×{w} vs sparse depth {:?}", s.dims())));
        }
        self.config.check_input(h, w)
    }

    /// Fused encoder features F_e⁰…F_e⁴.
    pub fn encode<'t>(&self, tape: &'t Tape, p: &Bound<'t>, image: &Tensor, s: &SparseDepth) -> Result<Vec<Var<'t>>> {
        self.check_inputs(image, s)?;
        let img = tape.constant(image.clone());
        let dep = concat_channels(&[tape.constant(s.depth().clone()), tape.constant(s.mask().clone())])?;
        let fi = self.image_encoder.forward(p, &img)?;
        let fd = self.depth_encoder.forward(p, &dep)?;
        fi.iter()
            .zip(&fd)
            .zip(&self.fusion)
            .map(|((a, b), conv)| conv_cat(conv, p, &[*a, *b]))
            .collect()
    }

    /// Decoder features F_d⁴ down to F_d^`finest`, coarsest first.
    pub fn decode<'t>(&self, p: &Bound<'t>, encoded: &[Var<'t>], finest: usize) -> Result<Vec<Var<'t>>> {
        if encoded.len() != SCALES || finest >= SCALES {
            return Err(Error::InvalidArgument(format!(
                "decode needs {SCALES} encoder scales and a finest scale below {SCALES}"
            )));
        }
        let mut out = vec![mfp_forward(&encoded[SCALES - 1], &self.mfp, p)?];
        for i in (finest..SCALES - 1).rev() {
            let next = self.decoder[i].forward(p, out.last().expect("non-empty"), &encoded[i])?;
            out.push(next);
        }
        Ok(out)
    }

    /// Coarse non-negative depth D̂′⁴ from the bottleneck decoder features.
    pub fn regression_head<'t>(&self, p: &Bound<'t>, f_d4: &Var<'t>) -> Result<Var<'t>> {
        self.head.forward(p, f_d4)?.softplus()
    }

    pub fn pooled_pyramid<'t>(&self, tape: &'t Tape, p: &Bound<'t>, s: &SparseDepth) -> Result<PooledPyramid<'t>> {
        build_pyramid(tape, s, &self.pool, p)
    }

    /// Pooled measurements Ŝ at one scale.
    pub fn pooled_level<'t>(&self, tape: &'t Tape, p: &Bound<'t>, s: &SparseDepth, scale: usize) -> Result<PooledLevel<'t>> {
        match scale {
            0 => Ok(full_resolution(tape, s)),
            _ => weighted_pool(tape, s, scale, &self.pool[scale - 1], p),
        }
    }

    /// Runs the first `steps` progressive steps.
    pub fn progressive_predict<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        image: &Tensor,
        s: &SparseDepth,
        steps: usize,
    ) -> Result<DepthPyramid<'t>> {
        if !(1..=SCALES).contains(&steps) {
            return Err(Error::InvalidArgument(format!("steps must be in 1..={SCALES}, got {steps}")));
        }
        let encoded = self.encode(tape, p, image, s)?;
        let finest = SCALES - steps;
        let decoded = self.decode(p, &encoded, finest)?;

        let top = SCALES - 1;
        let level = self.pooled_level(tape, p, s, top)?;
        let coarse = self.regression_head(p, &decoded[0])?;
        let c = estimate_confidence(&decoded[0], &level, &self.confidence[top], p)?;
        let mut pyr = DepthPyramid {
            depth: vec![fuse_depth(&coarse, &level.depth, &c)?],
            coarse: vec![coarse],
            confidence: vec![c],
            selection: Vec::new(),
        };
        for (k, scale) in (finest..top).rev().enumerate() {
            let f_d = &decoded[k + 1];
            let level = self.pooled_level(tape, p, s, scale)?;
            let (_, _, h, w) = f_d.dims4()?;
            let coarse = pyr.last().resize(h, w)?;
            let c = estimate_confidence(f_d, &level, &self.confidence[scale], p)?;
            let fused = fuse_depth(&coarse, &level.depth, &c)?;
            let refined = sdf_forward(&fused, f_d, &self.sdf[scale], p)?;
            pyr.depth.push(refined.depth);
            pyr.coarse.push(coarse);
            pyr.confidence.push(c);
            pyr.selection.push(refined.selection);
        }
        Ok(pyr)
    }

    /// Full-resolution depth after `steps` steps, with untracked parameters.
    pub fn infer_steps(&self, image: &Tensor, s: &SparseDepth, steps: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let pyr = self.progressive_predict(&tape, &p, image, s, steps)?;
        let (_, _, h, w) = image.dims4()?;
        Ok(pyr.last().resize(h, w)?.value())
    }

    /// Full-resolution depth plus the selection maps of every refinement step.
    pub fn infer_with_selection(&self, image: &Tensor, s: &SparseDepth, steps: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let pyr = self.progressive_predict(&tape, &p, image, s, steps)?;
        let (_, _, h, w) = image.dims4()?;
        let depth = pyr.last().resize(h, w)?.value();
        Ok((depth, pyr.selection.iter().map(Var::value).collect()))
    }
}
