use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lpnet::config::{echo_run_config, parse_run_config};
use lpnet::io::{read_pfm, read_pgm16, write_pfm, write_pgm16};
use lpnet::metrics::compute_metrics;
use lpnet::network::{load_checkpoint, save_checkpoint, LpNet, SCALES};
use lpnet::pyramid::{laplacian_decompose, laplacian_reconstruct, LaplacianLevels};
use lpnet::scene::{generate_scene, SceneSpec};
use lpnet::selfcheck::{full_model_gradcheck, gradcheck_arch, primitive_gradchecks};
use lpnet::sparse::SparseDepth;
use lpnet::sweep::{run_sparsity_sweep, run_steps_sweep, sparsity_csv, steps_csv, SPARSITY_FRACTIONS};
use lpnet::trainer::{evaluate, evaluate_baseline, make_scenes, split_seeds, train, TrainConfig};
use lpnet::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "lpnet", version, about = "Progressive depth completion on an inverse Laplacian pyramid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes; writes model.ckpt, loss_curve.csv, summary.csv, heldout_metrics.csv and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric CSV for a checkpoint on the held-out scenes, or for a PGM prediction against PGM ground truth.
    Eval {
        #[command(flatten)]
        model: Option<ModelArgs>,
        #[arg(long, conflicts_with_all = ["checkpoint", "config"], requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = SCALES)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete one PFM colour image plus PGM sparse depth into a PGM depth map.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long, default_value_t = SCALES)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the selection map of every refinement step as PFM.
        #[arg(long)]
        selection_dir: Option<PathBuf>,
    },
    /// Write the Laplacian levels of a PFM or PGM map as PFM files.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rebuild a map from the files written by `decompose`.
    Reconstruct {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and of the full model's loss.
    Gradcheck {
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Sampled entries per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_param: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Held-out metrics after subsampling the sparse input to several fractions.
    SweepSparsity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out RMSE and median wall time for 1 to 5 progressive steps.
    SweepSteps {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one synthetic scene as image.pfm, depth.pgm and sparse.pgm.
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 200)]
        sparse_count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
#[group(requires_all = ["checkpoint", "config"], multiple = true)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration naming the held-out scenes.
    #[arg(long)]
    config: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io_at(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io_at(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io_at(path, e))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_run_config(&read_text(path)?)
}

fn heldout(cfg: &TrainConfig) -> Result<Vec<lpnet::scene::Scene>> {
    let (_, held) = split_seeds(&cfg.data, cfg.seed);
    if held.is_empty() {
        return Err(Error::Config("heldout_scenes must be positive".into()));
    }
    make_scenes(&cfg.data, &held)
}

fn load_model(m: &ModelArgs) -> Result<(LpNet, TrainConfig)> {
    let cfg = load_config(&m.config)?;
    Ok((load_checkpoint(&m.checkpoint)?, cfg))
}

fn run_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    create_dir(out)?;
    write(&out.join("config.txt"), echo_run_config(&cfg))?;
    let (train_seeds, _) = split_seeds(&cfg.data, cfg.seed);
    let scenes = make_scenes(&cfg.data, &train_seeds)?;
    let start = Instant::now();
    let every = (cfg.steps / 10).max(1);
    let outcome = train(&cfg, &scenes, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step}/{} loss {loss:.6}", cfg.steps);
        }
    })?;
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());

    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    let mut curve = String::from("step,loss\n");
    for (s, l) in &outcome.curve {
        curve.push_str(&format!("{s},{l}\n"));
    }
    write(&out.join("loss_curve.csv"), curve)?;

    let mut summary = String::from("quantity,value\n");
    summary.push_str(&format!(
        "initial_loss,{}\nfinal_loss,{}\n",
        outcome.initial_loss, outcome.final_loss
    ));
    summary.push_str(&format!("loss_drop,{}\n", 1.0 - outcome.final_loss / outcome.initial_loss));
    if cfg.data.heldout_scenes > 0 {
        let held = heldout(&cfg)?;
        let model = evaluate(&outcome.model, &held, None, SCALES)?;
        let base = evaluate_baseline(&held)?;
        summary.push_str(&format!("heldout_rmse_mm,{}\nbaseline_rmse_mm,{}\n", model.rmse_mm, base.rmse_mm));
        write(&out.join("heldout_metrics.csv"), model.to_csv())?;
    }
    write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn run_eval(model: Option<&ModelArgs>, pred: Option<&Path>, gt: Option<&Path>, steps: usize, out: &Path) -> Result<()> {
    let report = match (model, pred, gt) {
        (Some(m), None, None) => {
            let (net, cfg) = load_model(m)?;
            evaluate(&net, &heldout(&cfg)?, None, steps)?
        }
        (None, Some(p), Some(g)) => {
            let (p, g) = (read_pgm16(p)?, read_pgm16(g)?);
            let mask = g.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            compute_metrics(&p, &g, &mask)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs either --checkpoint and --config, or --pred and --gt".into(),
            ))
        }
    };
    write(out, report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run_infer(checkpoint: &Path, image: &Path, sparse: &Path, steps: usize, out: &Path, selection_dir: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let image = read_pfm(image)?;
    let sparse = SparseDepth::from_depth(read_pgm16(sparse)?)?;
    let (depth, selection) = model.infer_with_selection(&image, &sparse, steps)?;
    write_pgm16(out, &depth.map(|d| d.max(0.0)))?;
    if let Some(dir) = selection_dir {
        create_dir(dir)?;
        for (k, sel) in selection.iter().enumerate() {
            // step k + 2 refines scale 3 − k
            write_pfm(&dir.join(format!("selection_scale{}.pfm", SCALES - 2 - k)), sel)?;
        }
    }
    Ok(())
}

fn read_map(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm16(path),
        Some("pfm") => read_pfm(path),
        _ => Err(Error::Config(format!("{}: expected a .pfm or .pgm file", path.display()))),
    }
}

fn run_decompose(input: &Path, levels: usize, out_dir: &Path) -> Result<()> {
    let x = read_map(input)?;
    let lv = laplacian_decompose(&x, levels)?;
    create_dir(out_dir)?;
    for (i, b) in lv.bandpass.iter().enumerate() {
        write_pfm(&out_dir.join(format!("level_{i}.pfm")), b)?;
    }
    write_pfm(&out_dir.join("residual.pfm"), &lv.residual)
}

fn run_reconstruct(in_dir: &Path, levels: usize, out: &Path) -> Result<()> {
    let lv = LaplacianLevels {
        bandpass: (0..levels)
            .map(|i| read_pfm(&in_dir.join(format!("level_{i}.pfm"))))
            .collect::<Result<_>>()?,
        residual: read_pfm(&in_dir.join("residual.pfm"))?,
    };
    write_pfm(out, &laplacian_reconstruct(&lv)?)
}

fn run_gradcheck(size: usize, per_param: usize, seed: u64) -> Result<()> {
    gradcheck_arch().check_input(size, size)?;
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, rep) in primitive_gradchecks(seed)? {
        println!("{name}: max_rel_error={:.3e} passed={}", rep.max_rel_error, rep.passed);
        if !rep.passed {
            failed.push(name);
        }
    }
    let model = full_model_gradcheck(gradcheck_arch(), size, per_param, seed)?;
    println!(
        "full model {size}x{size}: tensors={} entries={} refined={} max_rel_error={:.3e} uncovered={} passed={}",
        model.param_tensors,
        model.report.checked,
        model.report.refined,
        model.report.max_rel_error,
        model.uncovered.len(),
        model.passed()
    );
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    if !model.passed() {
        failed.push(format!("full model (uncovered {:?})", model.uncovered));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join("; ")))
    }
}

fn run_scene(seed: u64, height: usize, width: usize, sparse_count: usize, out_dir: &Path) -> Result<()> {
    let sc = generate_scene(&SceneSpec::random(seed, height, width, sparse_count))?;
    create_dir(out_dir)?;
    write_pfm(&out_dir.join("image.pfm"), &sc.image)?;
    write_pgm16(&out_dir.join("depth.pgm"), &sc.depth)?;
    write_pgm16(&out_dir.join("sparse.pgm"), sc.sparse.depth())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => run_train(&config, &out),
        Command::Eval {
            model,
            pred,
            gt,
            steps,
            out,
        } => run_eval(model.as_ref(), pred.as_deref(), gt.as_deref(), steps, &out),
        Command::Infer {
            checkpoint,
            image,
            sparse,
            steps,
            out,
            selection_dir,
        } => run_infer(&checkpoint, &image, &sparse, steps, &out, selection_dir.as_deref()),
        Command::Decompose { input, levels, out_dir } => run_decompose(&input, levels, &out_dir),
        Command::Reconstruct { in_dir, levels, out } => run_reconstruct(&in_dir, levels, &out),
        Command::Gradcheck { size, per_param, seed } => run_gradcheck(size, per_param, seed),
        Command::SweepSparsity { model, out } => {
            let (net, cfg) = load_model(&model)?;
            let rows = run_sparsity_sweep(&net, &heldout(&cfg)?, &SPARSITY_FRACTIONS, cfg.seed)?;
            write(&out, sparsity_csv(&rows))?;
            print!("{}", sparsity_csv(&rows));
            Ok(())
        }
        Command::SweepSteps { model, repeats, out } => {
            let (net, cfg) = load_model(&model)?;
            let rows = run_steps_sweep(&net, &heldout(&cfg)?, repeats)?;
            write(&out, steps_csv(&rows))?;
            print!("{}", steps_csv(&rows));
            Ok(())
        }
        Command::Scene {
            seed,
            height,
            width,
            sparse_count,
            out_dir,
        } => run_scene(seed, height, width, sparse_count, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: kind=usage code=2 message={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} code={} message={msg}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
