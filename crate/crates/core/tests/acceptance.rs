//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lpnet::fusion::fuse_depth;
use lpnet::metrics::{compute_metrics, INVERSE_FLOOR};
use lpnet::nn::{Conv2d, Init, ParamStore};
use lpnet::pyramid::{laplacian_decompose, laplacian_reconstruct};
use lpnet::sdf::{gen_kernel_field, sharpness_filter, smoothness_filter, FilterKind, SdfParams};
use lpnet::selfcheck::{full_model_gradcheck, gradcheck_arch, primitive_gradchecks};
use lpnet::sparse::{build_pyramid, pooling_weights, SparseDepth, POOL_EPS};
use lpnet::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Check + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: lpnet::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// -- 1 ----------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let prims = lib(primitive_gradchecks(1))?;
    let worst = prims.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    if let Some((name, r)) = prims.iter().find(|(_, r)| !r.passed) {
        return Err(format!("{name}: max rel error {:.3e}", r.max_rel_error));
    }
    let model = lib(full_model_gradcheck(gradcheck_arch(), 32, 3, 1))?;
    let elapsed = start.elapsed();
    ensure(model.uncovered.is_empty(), || {
        format!("parameters without gradient: {:?}", model.uncovered)
    })?;
    ensure(model.report.passed, || {
        format!(
            "full model max rel error {:.3e} at {:?}",
            model.report.max_rel_error, model.report.worst
        )
    })?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {:.1} s", elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "{} primitive checks, worst {worst:.2e}; full model on 32x32: {} entries over {} tensors, max rel error {:.2e} < 1e-4; {:.1} s",
        prims.len(),
        model.report.checked,
        model.param_tensors,
        model.report.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

// -- 2 ----------------------------------------------------------------------

fn laplacian_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::rand_uniform(&[1, 1, 64, 64], -10.0, 10.0, &mut rng);
        for levels in 1..=4 {
            let back = lib(laplacian_reconstruct(&lib(laplacian_decompose(&x, levels))?))?;
            worst = worst.max(back.max_abs_diff(&x));
        }
    }
    ensure(worst < 1e-10, || format!("max round-trip error {worst:.3e}"))?;
    Ok(format!("100 maps x levels 1-4, max round-trip error {worst:.2e} < 1e-10"))
}

// -- 3 ----------------------------------------------------------------------

const FEAT: usize = 3;

fn sdf_params(seed: u64, kernel: usize, scale: f64) -> (ParamStore, SdfParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = SdfParams::new(&mut store, "sdf", FEAT, kernel, Init::Uniform(scale), &mut rng).expect("valid kernel");
    for t in store.tensors_mut() {
        *t = Tensor::rand_uniform(t.shape(), -scale, scale, &mut rng);
    }
    (store, params)
}

fn clamped_bilinear(img: &Tensor, y: f64, x: f64) -> f64 {
    let (_, _, h, w) = img.dims4().expect("4-d");
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img.at4(0, 0, yy, xx);
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Σ_j w_j · D(p + g_j + Δp_j) evaluated pixel by pixel.
fn deformable_oracle(depth: &Tensor, weights: &Tensor, offsets: &Tensor, k: usize) -> Tensor {
    let (_, _, h, w) = depth.dims4().expect("4-d");
    let r = (k / 2) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..k * k)
                .map(|j| {
                    let sy = y as f64 + (j / k) as f64 - r + offsets.at4(0, 2 * j, y, x);
                    let sx = x as f64 + (j % k) as f64 - r + offsets.at4(0, 2 * j + 1, y, x);
                    weights.at4(0, j, y, x) * clamped_bilinear(depth, sy, sx)
                })
                .sum();
        }
    }
    Tensor::new(&[1, 1, h, w], out).expect("shape")
}

fn sdf_constraints() -> Check {
    let (mut sum_err_m, mut sum_err_a, mut const_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for draw in 0..1000u64 {
        let kernel = [3, 5][(draw % 2) as usize];
        let (store, params) = sdf_params(draw, kernel, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + draw);
        let depth = Tensor::rand_uniform(&[1, 1, 6, 6], 1.0, 8.0, &mut rng);
        let feat = Tensor::rand_uniform(&[1, FEAT, 6, 6], -1.0, 1.0, &mut rng);
        let flat = Tensor::full(&[1, 1, 6, 6], rng.gen_range(0.5..9.0));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (d, f, c) = (tape.constant(depth.clone()), tape.constant(feat), tape.constant(flat.clone()));
        let m = lib(gen_kernel_field(&d, &f, &params.smooth, FilterKind::Smoothness, kernel, &p))?;
        let a = lib(gen_kernel_field(&d, &f, &params.sharp, FilterKind::Sharpness, kernel, &p))?;
        let (mw, aw) = (m.weights.value(), a.weights.value());
        for px in 0..36 {
            let sm: f64 = (0..kernel * kernel).map(|j| mw.data()[j * 36 + px]).sum();
            let sa: f64 = (0..kernel * kernel).map(|j| aw.data()[j * 36 + px]).sum();
            sum_err_m = sum_err_m.max((sm - 1.0).abs());
            sum_err_a = sum_err_a.max(sa.abs());
        }
        // the same kernel fields applied to a constant map
        const_err = const_err.max(lib(smoothness_filter(&c, &m))?.value().max_abs_diff(&flat));
        const_err = const_err.max(lib(sharpness_filter(&c, &a))?.value().max_abs_diff(&flat));

        let got_m = lib(smoothness_filter(&d, &m))?.value();
        let want_m = deformable_oracle(&depth, &mw, &m.offsets.value(), kernel);
        let got_a = lib(sharpness_filter(&d, &a))?.value();
        let want_a = lib(deformable_oracle(&depth, &aw, &a.offsets.value(), kernel).zip_map(&depth, |r, d| r + d))?;
        oracle_err = oracle_err.max(got_m.max_abs_diff(&want_m)).max(got_a.max_abs_diff(&want_a));
    }
    ensure(sum_err_m < 1e-9, || format!("smoothness weight sum off by {sum_err_m:.3e}"))?;
    ensure(sum_err_a < 1e-9, || format!("sharpness weight sum off by {sum_err_a:.3e}"))?;
    ensure(const_err < 1e-9, || format!("constant depth changed by {const_err:.3e}"))?;
    ensure(oracle_err < 1e-9, || format!("oracle mismatch {oracle_err:.3e}"))?;
    Ok(format!(
        "1000 draws: |sum-1| {sum_err_m:.1e}, |sum| {sum_err_a:.1e}, constant-depth drift {const_err:.1e}, oracle diff {oracle_err:.1e} (all < 1e-9)"
    ))
}

// -- 4 ----------------------------------------------------------------------

fn pool_convs(rng: &mut ChaCha8Rng) -> (ParamStore, Vec<Conv2d>) {
    let mut store = ParamStore::new();
    let convs = (1..=4)
        .map(|i| Conv2d::new(&mut store, &format!("pool{i}"), 2, 1, 3, 1, Init::Default, rng))
        .collect();
    (store, convs)
}

fn sparse_from(d: Vec<f64>, m: Vec<f64>, h: usize, w: usize) -> std::result::Result<SparseDepth, String> {
    lib(SparseDepth::new(
        lib(Tensor::new(&[1, 1, h, w], d))?,
        lib(Tensor::new(&[1, 1, h, w], m))?,
    ))
}

fn pooling_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut single_err, mut oracle_err, mut bound_viol) = (0.0f64, 0.0f64, 0.0f64);
    let mut patches = 0usize;
    for trial in 0..50 {
        let (store, convs) = pool_convs(&mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);

        // one valid pixel
        let (y, x) = (rng.gen_range(0..32), rng.gen_range(0..32));
        let v = rng.gen_range(0.5..80.0);
        let (mut d, mut m) = (vec![0.0; 1024], vec![0.0; 1024]);
        d[y * 32 + x] = v;
        m[y * 32 + x] = 1.0;
        let pyr = lib(build_pyramid(&tape, &sparse_from(d, m, 32, 32)?, &convs, &p))?;
        for (level, lv) in pyr.levels.iter().enumerate() {
            let size = 1 << level;
            let got = lv.depth.value().at4(0, 0, y / size, x / size);
            single_err = single_err.max((got - v).abs());
        }

        // random density: loop oracle and patch bounds
        let density = [0.02, 0.1, 0.5][trial % 3];
        let (mut d, mut m) = (vec![0.0; 1024], vec![0.0; 1024]);
        for i in 0..1024 {
            if rng.gen_bool(density) {
                d[i] = rng.gen_range(0.5..80.0);
                m[i] = 1.0;
            }
        }
        let s = sparse_from(d, m, 32, 32)?;
        let pyr = lib(build_pyramid(&tape, &s, &convs, &p))?;
        for level in 1..=4 {
            let size = 1usize << level;
            let omega = lib(pooling_weights(&tape, &s, level, &convs[level - 1], &p))?.value();
            let (got_d, got_m) = (pyr.levels[level].depth.value(), pyr.levels[level].mask.value());
            for py in 0..32 / size {
                for px in 0..32 / size {
                    let (mut num, mut den, mut lo, mut hi) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
                    for yy in py * size..(py + 1) * size {
                        for xx in px * size..(px + 1) * size {
                            let om = omega.at4(0, 0, yy, xx);
                            num += om * s.depth().at4(0, 0, yy, xx);
                            if s.mask().at4(0, 0, yy, xx) == 1.0 {
                                den += om;
                                lo = lo.min(s.depth().at4(0, 0, yy, xx));
                                hi = hi.max(s.depth().at4(0, 0, yy, xx));
                            }
                        }
                    }
                    let got = got_d.at4(0, 0, py, px);
                    oracle_err = oracle_err.max((got - num / (den + POOL_EPS)).abs());
                    let valid = lo.is_finite();
                    ensure(got_m.at4(0, 0, py, px) == if valid { 1.0 } else { 0.0 }, || {
                        format!("mask wrong at level {level} ({py}, {px})")
                    })?;
                    if valid {
                        patches += 1;
                        // ε only ever shrinks the weighted mean towards zero
                        let floor = lo * den / (den + POOL_EPS);
                        bound_viol = bound_viol.max(floor - got).max(got - hi);
                    } else {
                        ensure(got == 0.0, || format!("empty patch gave {got}"))?;
                    }
                }
            }
        }
    }
    ensure(single_err < 1e-6, || format!("single-pixel error {single_err:.3e}"))?;
    ensure(oracle_err < 1e-10, || format!("oracle error {oracle_err:.3e}"))?;
    ensure(bound_viol <= 1e-12, || format!("patch bound violated by {bound_viol:.3e}"))?;
    Ok(format!(
        "single-pixel error {single_err:.1e} < 1e-6 at levels 0-4; oracle error {oracle_err:.1e} < 1e-10; {patches} valid patches within [min, max]"
    ))
}

// -- 5 ----------------------------------------------------------------------

fn fusion_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4096;
    let coarse = Tensor::rand_uniform(&[1, 1, 64, 64], 0.0, 80.0, &mut rng);
    let mut s = Tensor::rand_uniform(&[1, 1, 64, 64], 0.0, 80.0, &mut rng);
    // near-equal pairs stress rounding at the interval ends
    for i in (0..n).step_by(7) {
        s.data_mut()[i] = coarse.data()[i] * (1.0 + 1e-15 * rng.gen_range(-4.0..4.0));
    }
    let mask = Tensor::new(&[1, 1, 64, 64], (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).expect("shape");
    let s = lib(s.zip_map(&mask, |v, m| v * m))?;
    let c = lib(Tensor::rand_uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut rng).zip_map(&mask, |c, m| c * m))?;
    let tape = Tape::new();
    let (tc, ts) = (tape.constant(coarse.clone()), tape.constant(s.clone()));
    let fused = |conf: &Tensor| lib(fuse_depth(&tc, &ts, &tape.constant(conf.clone()))).map(|v| v.value());

    ensure(fused(&Tensor::zeros(&[1, 1, 64, 64]))? == coarse, || {
        "c = 0 does not return the coarse depth".into()
    })?;
    ensure(fused(&Tensor::ones(&[1, 1, 64, 64]))? == s, || {
        "c = 1 does not return the measurement".into()
    })?;
    let out = fused(&c)?;
    let mut inside = 0;
    for i in 0..n {
        let (a, b, o) = (coarse.data()[i], s.data()[i], out.data()[i]);
        if mask.data()[i] == 0.0 {
            ensure(o == a, || format!("pixel {i}: masked-out output {o} differs from coarse {a}"))?;
        } else {
            ensure(o >= a.min(b) && o <= a.max(b), || format!("pixel {i}: {o} outside [{a}, {b}]"))?;
            inside += 1;
        }
    }
    Ok(format!(
        "endpoints exact; {inside} valid pixels inside [min, max]; {} masked pixels equal coarse",
        n - inside
    ))
}

// -- 6 ----------------------------------------------------------------------

fn metric_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = Tensor::rand_uniform(&[1, 1, 16, 16], 0.5, 80.0, &mut rng);
    let ones = Tensor::ones(&[1, 1, 16, 16]);
    let perfect = lib(compute_metrics(&gt, &gt, &ones))?;
    ensure(perfect.values()[..5] == [0.0; 5] && perfect.values()[5..] == [100.0; 3], || {
        format!("perfect prediction gave {perfect:?}")
    })?;

    let one = Tensor::ones(&[1, 1, 1, 1]);
    let r = lib(compute_metrics(
        &Tensor::full(&[1, 1, 1, 1], 2.5),
        &Tensor::full(&[1, 1, 1, 1], 2.0),
        &one,
    ))?;
    ensure(r.mae_mm == 500.0 && r.rel == 0.25 && r.delta1 == 0.0 && r.delta2 == 100.0, || {
        format!("analytic case gave {r:?}")
    })?;

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..64);
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..80.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..90.0)).collect();
        let mut mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
        mask[0] = 1.0;
        let t = |v: &Vec<f64>| Tensor::new(&[1, 1, 1, n], v.clone()).expect("shape");
        let got = lib(compute_metrics(&t(&pred), &t(&gt), &t(&mask)))?.values();
        let (mut acc, mut cnt) = ([0.0f64; 8], 0.0);
        for i in (0..n).filter(|&i| mask[i] == 1.0) {
            let p0 = pred[i].max(0.0);
            let pi = pred[i].max(INVERSE_FLOOR);
            let (e, ie) = (p0 - gt[i], 1.0 / pi - 1.0 / gt[i]);
            let ratio = (pi / gt[i]).max(gt[i] / pi);
            let terms = [
                e * e,
                e.abs(),
                ie * ie,
                ie.abs(),
                e.abs() / gt[i],
                (ratio < 1.25) as u8 as f64,
                (ratio < 1.5625) as u8 as f64,
                (ratio < 1.953125) as u8 as f64,
            ];
            for (a, t) in acc.iter_mut().zip(terms) {
                *a += t;
            }
            cnt += 1.0;
        }
        let want = [
            1000.0 * (acc[0] / cnt).sqrt(),
            1000.0 * acc[1] / cnt,
            1000.0 * (acc[2] / cnt).sqrt(),
            1000.0 * acc[3] / cnt,
            acc[4] / cnt,
            100.0 * acc[5] / cnt,
            100.0 * acc[6] / cnt,
            100.0 * acc[7] / cnt,
        ];
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs() / w.abs().max(1.0));
        }
    }
    ensure(worst < 1e-10, || format!("oracle mismatch {worst:.3e}"))?;
    Ok(format!(
        "perfect and analytic cases exact; 200 random instances match the loop oracle ({worst:.1e})"
    ))
}

// -- CLI criteria -------------------------------------------------------------

const SMOKE_CONFIG: &str = "\
# smoke test
base_channels = 8
mfp_paths = 2
seed = 0
lr = 0.001
steps = 300
batch_size = 2
train_scenes = 16
heldout_scenes = 8
height = 64
width = 64
";

const SHORT_CONFIG: &str = "\
base_channels = 4
mfp_paths = 2
seed = 5
steps = 6
train_scenes = 3
heldout_scenes = 2
";

fn lpnet(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lpnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "lpnet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn csv_rows(path: &Path) -> std::result::Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn lookup(rows: &[Vec<String>], key: &str) -> std::result::Result<f64, String> {
    rows.iter()
        .find(|r| r[0] == key)
        .and_then(|r| r[1].parse().ok())
        .ok_or_else(|| format!("missing {key}"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn training_smoke(dir: &Path) -> Check {
    let cfg = dir.join("smoke.cfg");
    fs::write(&cfg, SMOKE_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.join("smoke");
    let start = Instant::now();
    lpnet(&["train", "--config", path(&cfg), "--out", path(&out)])?;
    let elapsed = start.elapsed();
    let s = csv_rows(&out.join("summary.csv"))?;
    let (l0, l1) = (lookup(&s, "initial_loss")?, lookup(&s, "final_loss")?);
    let (model, base) = (lookup(&s, "heldout_rmse_mm")?, lookup(&s, "baseline_rmse_mm")?);
    let drop = 1.0 - l1 / l0;
    let gain = 1.0 - model / base;
    let detail = format!(
        "loss {l0:.3} -> {l1:.3} (drop {:.1}%); held-out RMSE {model:.1} mm vs baseline {base:.1} mm ({:.1}% better); {:.0} s",
        100.0 * drop,
        100.0 * gain,
        elapsed.as_secs_f64()
    );
    ensure(drop >= 0.5 && gain >= 0.1 && elapsed < Duration::from_secs(900), || detail.clone())?;
    Ok(detail)
}

fn steps_trend(dir: &Path) -> Check {
    let (ckpt, cfg, out) = (dir.join("smoke/model.ckpt"), dir.join("smoke.cfg"), dir.join("steps.csv"));
    lpnet(&[
        "sweep-steps",
        "--checkpoint",
        path(&ckpt),
        "--config",
        path(&cfg),
        "--repeats",
        "5",
        "--out",
        path(&out),
    ])?;
    let rows = csv_rows(&out)?;
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().map_err(|e| e.to_string());
    let rmse = rows.iter().map(|r| num(r, 1)).collect::<std::result::Result<Vec<_>, _>>()?;
    let time = rows.iter().map(|r| num(r, 2)).collect::<std::result::Result<Vec<_>, _>>()?;
    let detail = format!(
        "RMSE by steps {:?} mm; median time {:?} ms",
        rmse.iter().map(|v| v.round()).collect::<Vec<_>>(),
        time
    );
    ensure(rows.len() == 5, || format!("expected 5 rows, got {}", rows.len()))?;
    ensure(rmse[4] < rmse[0], || detail.clone())?;
    ensure(time.windows(2).all(|w| w[1] >= w[0]), || detail.clone())?;
    Ok(detail)
}

fn sparsity_trend(dir: &Path) -> Check {
    let (ckpt, cfg, out) = (dir.join("smoke/model.ckpt"), dir.join("smoke.cfg"), dir.join("sparsity.csv"));
    lpnet(&[
        "sweep-sparsity",
        "--checkpoint",
        path(&ckpt),
        "--config",
        path(&cfg),
        "--out",
        path(&out),
    ])?;
    let rows = csv_rows(&out)?;
    let rmse_at = |f: &str| {
        rows.iter()
            .find(|r| r[0] == f)
            .and_then(|r| r[1].parse::<f64>().ok())
            .ok_or_else(|| format!("missing fraction {f}"))
    };
    let all: Vec<String> = rows
        .iter()
        .map(|r| format!("{}: {:.0}", r[0], r[1].parse::<f64>().unwrap_or(f64::NAN)))
        .collect();
    let detail = format!("RMSE mm by kept fraction {}", all.join(", "));
    ensure(rows.len() == 4, || format!("expected 4 rows, got {}", rows.len()))?;
    ensure(rmse_at("1")? <= rmse_at("0.4")?, || detail.clone())?;
    Ok(detail)
}

fn without_time(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn reproducibility(dir: &Path) -> Check {
    let cfg = dir.join("short.cfg");
    fs::write(&cfg, SHORT_CONFIG).map_err(|e| e.to_string())?;
    let scene = dir.join("scene");
    lpnet(&["scene", "--seed", "3", "--out-dir", path(&scene)])?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("repro{k}"));
        let o = |name: &str| out.join(name);
        lpnet(&["train", "--config", path(&cfg), "--out", path(&out)])?;
        let ckpt = o("model.ckpt");
        lpnet(&[
            "eval",
            "--checkpoint",
            path(&ckpt),
            "--config",
            path(&cfg),
            "--out",
            path(&o("eval.csv")),
        ])?;
        lpnet(&[
            "sweep-sparsity",
            "--checkpoint",
            path(&ckpt),
            "--config",
            path(&cfg),
            "--out",
            path(&o("sparsity.csv")),
        ])?;
        lpnet(&[
            "sweep-steps",
            "--checkpoint",
            path(&ckpt),
            "--config",
            path(&cfg),
            "--repeats",
            "1",
            "--out",
            path(&o("steps.csv")),
        ])?;
        lpnet(&[
            "infer",
            "--checkpoint",
            path(&ckpt),
            "--image",
            path(&scene.join("image.pfm")),
            "--sparse",
            path(&scene.join("sparse.pgm")),
            "--out",
            path(&o("pred.pgm")),
            "--selection-dir",
            path(&o("sel")),
        ])?;
        lpnet(&[
            "decompose",
            "--input",
            path(&scene.join("depth.pgm")),
            "--levels",
            "4",
            "--out-dir",
            path(&o("levels")),
        ])?;
        runs.push(out);
    }
    let files = [
        "config.txt",
        "model.ckpt",
        "loss_curve.csv",
        "summary.csv",
        "heldout_metrics.csv",
        "eval.csv",
        "sparsity.csv",
        "pred.pgm",
        "sel/selection_scale0.pfm",
        "levels/level_0.pfm",
        "levels/residual.pfm",
    ];
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    for f in files {
        ensure(read(&runs[0].join(f))? == read(&runs[1].join(f))?, || {
            format!("{f} differs between runs")
        })?;
    }
    let steps = |p: &Path| fs::read_to_string(p).map(|t| without_time(&t)).map_err(|e| e.to_string());
    ensure(steps(&runs[0].join("steps.csv"))? == steps(&runs[1].join("steps.csv"))?, || {
        "steps.csv RMSE column differs".into()
    })?;
    Ok(format!(
        "{} artifacts byte-identical across two runs; steps.csv identical apart from time_ms",
        files.len() + 1
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("Laplacian identity", Box::new(laplacian_identity)),
        ("SDF constraints", Box::new(sdf_constraints)),
        ("weighted pooling", Box::new(pooling_contract)),
        ("confidence fusion", Box::new(fusion_contract)),
        ("metric suite", Box::new(metric_suite)),
        ("training smoke test", Box::new(|| training_smoke(d))),
        ("accuracy vs steps", Box::new(|| steps_trend(d))),
        ("sparsity sweep", Box::new(|| sparsity_trend(d))),
        ("reproducibility", Box::new(|| reproducibility(d))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "[{tag}] criterion {}: {name}: {detail} [{:.1} s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
