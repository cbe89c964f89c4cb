//! Finite-difference checks of every tape primitive and of the complete
//! model with its multi-scale loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::multiscale_loss;
use crate::network::{ArchConfig, LpNet, SCALES};
use crate::nn::Bound;
use crate::scene::{generate_scene, SceneSpec};
use crate::seeds;
use crate::tensor::{concat_channels, gradcheck, gradcheck_subset, GradCheckReport, Tape, Tensor, Var, GRADCHECK_EPS, GRADCHECK_TOL};

/// Reduces an op's output with fixed random weights so every element
/// carries a distinct gradient.
fn weighted_sum<'t>(v: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    let w = Tensor::rand_uniform(&v.shape(), -1.0, 1.0, rng);
    v.mul_const(&w)?.sum()
}

/// Interior fractional sample coordinates (row channel, then column channel).
fn sample_coords(n: usize, h: usize, w: usize, side: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let plane = side * side;
    let mut c = vec![0.0; n * 2 * plane];
    for b in 0..n {
        for p in 0..plane {
            c[b * 2 * plane + p] = rng.gen_range(0..h - 1) as f64 + rng.gen_range(0.05..0.95);
            c[(b * 2 + 1) * plane + p] = rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.05..0.95);
        }
    }
    Tensor::new(&[n, 2, side, side], c)
}

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>,
);

/// Gradchecks every differentiable tape operation on two input shapes.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let rng = &mut seeds::stream(seed, "gradcheck/primitives");
    let mut out = Vec::new();
    for shape in [[1usize, 2, 4, 4], [2, 3, 5, 3]] {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let x = || Tensor::rand_uniform(&shape, -1.0, 1.0, &mut seeds::stream(seed, &format!("gradcheck/x/{shape:?}")));
        let pos = Tensor::rand_uniform(&shape, 0.5, 2.0, rng);
        let y = Tensor::rand_uniform(&shape, -1.0, 1.0, rng);
        let kw = Tensor::rand_uniform(&[3, c, 3, 3], -0.5, 0.5, rng);
        let kb = Tensor::rand_uniform(&[3], -0.5, 0.5, rng);
        let tw = Tensor::rand_uniform(&[c, 2, 4, 4], -0.5, 0.5, rng);
        let tb = Tensor::rand_uniform(&[2], -0.5, 0.5, rng);
        let cst = Tensor::rand_uniform(&shape, -1.0, 1.0, rng);
        let coords = sample_coords(n, h, w, 3, rng)?;
        let reduce_seed = rng.gen::<u64>();
        let cases: Vec<Case> = vec![
            (
                "conv2d",
                vec![x(), kw.clone(), kb.clone()],
                Box::new(|_, p| p[0].conv2d(&p[1], &p[2], 1, 1)),
            ),
            (
                "conv2d_stride2",
                vec![x(), kw, kb],
                Box::new(|_, p| p[0].conv2d(&p[1], &p[2], 2, 1)),
            ),
            (
                "conv2d_transpose",
                vec![x(), tw, tb],
                Box::new(|_, p| p[0].conv2d_transpose(&p[1], &p[2], 2, 1)),
            ),
            (
                "resize",
                vec![x()],
                Box::new(|_, p| p[0].resize(2 * p[0].shape()[2] + 1, p[0].shape()[3] + 3)),
            ),
            ("softmax_channel", vec![x()], Box::new(|_, p| p[0].scale(3.0)?.softmax_channel())),
            ("sigmoid", vec![x()], Box::new(|_, p| p[0].sigmoid())),
            ("tanh", vec![x()], Box::new(|_, p| p[0].tanh())),
            ("exp", vec![x()], Box::new(|_, p| p[0].exp())),
            ("softplus", vec![x()], Box::new(|_, p| p[0].softplus())),
            ("leaky_relu", vec![x()], Box::new(|_, p| p[0].leaky_relu(0.1))),
            ("square", vec![x()], Box::new(|_, p| p[0].square())),
            ("abs", vec![x()], Box::new(|_, p| p[0].abs())),
            ("scale", vec![x()], Box::new(|_, p| p[0].scale(-2.5))),
            ("one_minus", vec![x()], Box::new(|_, p| p[0].one_minus())),
            ("add", vec![x(), y.clone()], Box::new(|_, p| p[0].add(&p[1]))),
            ("sub", vec![x(), y.clone()], Box::new(|_, p| p[0].sub(&p[1]))),
            ("mul", vec![x(), y.clone()], Box::new(|_, p| p[0].mul(&p[1]))),
            ("div", vec![x(), pos.clone()], Box::new(|_, p| p[0].div(&p[1]))),
            (
                "lerp",
                vec![x(), pos.clone(), y.clone()],
                Box::new(|_, p| p[0].sigmoid()?.lerp(&p[1], &p[2])),
            ),
            ("add_const", vec![x()], {
                let k = cst.clone();
                Box::new(move |_, p| p[0].add_const(&k))
            }),
            ("mul_const", vec![x()], {
                let k = cst;
                Box::new(move |_, p| p[0].mul_const(&k))
            }),
            (
                "concat_channels",
                vec![x(), y.clone()],
                Box::new(|_, p| concat_channels(&[p[0], p[1]])),
            ),
            (
                "narrow_channels",
                vec![x()],
                Box::new(|_, p| p[0].narrow_channels(1, p[0].shape()[1] - 1)),
            ),
            (
                "split_channels",
                vec![x()],
                Box::new(|_, p| {
                    let parts = p[0].split_channels(&[1, p[0].shape()[1] - 1])?;
                    parts[0].broadcast_channels(2)?.sum()?.add(&parts[1].square()?.sum()?)
                }),
            ),
            (
                "broadcast_channels",
                vec![x()],
                Box::new(|_, p| p[0].sum_channels()?.broadcast_channels(4)),
            ),
            ("sum_channels", vec![x()], Box::new(|_, p| p[0].sum_channels())),
            ("pad_replicate", vec![x()], Box::new(|_, p| p[0].pad_replicate(2))),
            (
                "sample_bilinear_at",
                vec![x(), coords],
                Box::new(|_, p| p[0].sample_bilinear_at(&p[1])),
            ),
        ];
        for (name, params, f) in cases {
            let rep = gradcheck(
                |tape, p| weighted_sum(f(tape, p)?, &mut seeds::stream(reduce_seed, name)),
                &params,
                GRADCHECK_EPS,
                GRADCHECK_TOL,
            )?;
            out.push((format!("{name} {shape:?}"), rep));
        }
    }
    for shape in [[1usize, 2, 4, 4], [2, 1, 6, 6]] {
        let x = Tensor::rand_uniform(&shape, -1.0, 1.0, rng);
        let reduce_seed = rng.gen::<u64>();
        for (name, f) in [
            (
                "sum_pool",
                (|v: &Var| v.sum_pool(2)) as for<'a, 't> fn(&'a Var<'t>) -> Result<Var<'t>>,
            ),
            ("avg_pool", |v: &Var| v.avg_pool(2)),
        ] {
            let rep = gradcheck(
                |_, p| weighted_sum(f(&p[0])?, &mut seeds::stream(reduce_seed, name)),
                std::slice::from_ref(&x),
                GRADCHECK_EPS,
                GRADCHECK_TOL,
            )?;
            out.push((format!("{name} {shape:?}"), rep));
        }
    }
    Ok(out)
}

/// Smallest architecture that exercises every module on a 32×32 input.
pub fn gradcheck_arch() -> ArchConfig {
    ArchConfig {
        base_channels: 4,
        multipliers: [1, 2, 4, 8, 8],
        mfp_paths: 1,
        sdf_kernel: 3,
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub report: GradCheckReport,
    /// Parameters that received no gradient.
    pub uncovered: Vec<String>,
    pub param_tensors: usize,
}

impl ModelCheck {
    pub fn passed(&self) -> bool {
        self.report.passed && self.uncovered.is_empty()
    }
}

/// Zero biases and zero offsets put activations and sample points exactly
/// on kinks, where one-sided and central differences disagree; this moves
/// them off.
fn perturb_off_kinks(model: &mut LpNet, seed: u64) {
    let rng = &mut seeds::stream(seed, "gradcheck/params");
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        let scale = if name.contains("offset_conv") {
            0.05
        } else if name.ends_with(".bias") {
            0.1
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Checks `per_param` sampled entries of every parameter tensor of a model
/// built from `arch` on one `size`×`size` synthetic scene.
pub fn full_model_gradcheck(arch: ArchConfig, size: usize, per_param: usize, seed: u64) -> Result<ModelCheck> {
    full_model_gradcheck_eps(arch, size, per_param, seed, GRADCHECK_EPS)
}

pub fn full_model_gradcheck_eps(arch: ArchConfig, size: usize, per_param: usize, seed: u64, eps: f64) -> Result<ModelCheck> {
    let mut model = LpNet::new(arch, seed)?;
    perturb_off_kinks(&mut model, seed);
    let scene = generate_scene(&SceneSpec::random(seed, size, size, (size * size / 16).max(1)))?;
    let gt = scene.ground_truth()?;

    let uncovered = {
        let tape = Tape::new();
        let p = model.params().bind(&tape, true);
        let pyr = model.progressive_predict(&tape, &p, &scene.image, &scene.sparse, SCALES)?;
        let (loss, _) = multiscale_loss(&pyr, &gt, None)?;
        let g = tape.backward(&loss)?;
        model
            .params()
            .names()
            .iter()
            .zip(p.vars())
            .filter(|(_, v)| !g.has(v))
            .map(|(n, _)| n.clone())
            .collect()
    };

    let params: Vec<Tensor> = model.params().tensors().to_vec();
    let report = gradcheck_subset(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let pyr = model.progressive_predict(tape, &p, &scene.image, &scene.sparse, SCALES)?;
            Ok(multiscale_loss(&pyr, &gt, None)?.0)
        },
        &params,
        per_param,
        seed,
        eps,
        GRADCHECK_TOL,
    )?;
    Ok(ModelCheck {
        report,
        uncovered,
        param_tensors: params.len(),
    })
}
