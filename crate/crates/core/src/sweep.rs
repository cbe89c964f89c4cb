//! Robustness and speed sweeps over a fixed model.

use std::time::Instant;

use crate::error::Result;
use crate::metrics::{compute_metrics, MetricReport};
use crate::network::{LpNet, SCALES};
use crate::scene::Scene;
use crate::seeds;
use crate::sparse::{sparsity_sample, SparseDepth};
use crate::tensor::Tensor;
use crate::trainer::evaluate;

pub const SPARSITY_FRACTIONS: [f64; 4] = [0.4, 0.6, 0.8, 1.0];
pub const SPARSITY_HEADER: &str = "fraction,rmse_mm,mae_mm,irmse_per_km,imae_per_km,rel,delta1,delta2,delta3";
pub const STEPS_HEADER: &str = "steps,rmse_mm,time_ms";

/// Metrics after keeping each fraction of every scene's measurements.
pub fn run_sparsity_sweep(model: &LpNet, scenes: &[Scene], fractions: &[f64], seed: u64) -> Result<Vec<(f64, MetricReport)>> {
    fractions
        .iter()
        .map(|&f| {
            let sparse = scenes
                .iter()
                .enumerate()
                .map(|(i, sc)| sparsity_sample(&sc.sparse, f, seeds::stream_seed(seed, &format!("sparsity/{i}"))))
                .collect::<Result<Vec<SparseDepth>>>()?;
            Ok((f, evaluate(model, scenes, Some(&sparse), SCALES)?))
        })
        .collect()
}

pub fn sparsity_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut out = format!("{SPARSITY_HEADER}\n");
    for (f, r) in rows {
        let vals: Vec<String> = r.values().iter().map(f64::to_string).collect();
        out.push_str(&format!("{f},{}\n", vals.join(",")));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepsRow {
    pub steps: usize,
    pub rmse_mm: f64,
    /// Median wall time of one pass over all scenes.
    pub time_ms: f64,
}

/// RMSE and median timing of `infer_steps` for steps 1..=5, after one
/// untimed warm-up pass. Timing runs are interleaved across step counts so
/// drift affects all rows alike.
pub fn run_steps_sweep(model: &LpNet, scenes: &[Scene], repeats: usize) -> Result<Vec<StepsRow>> {
    let mut rmse = [0.0; SCALES];
    for (k, r) in rmse.iter_mut().enumerate() {
        let mut reports = Vec::with_capacity(scenes.len());
        for sc in scenes {
            let pred = model.infer_steps(&sc.image, &sc.sparse, k + 1)?;
            reports.push(compute_metrics(&pred, &sc.depth, &Tensor::ones(sc.depth.shape()))?);
        }
        *r = MetricReport::mean(&reports)?.rmse_mm;
    }
    let pass = |k: usize| -> Result<f64> {
        let start = Instant::now();
        for sc in scenes {
            std::hint::black_box(model.infer_steps(&sc.image, &sc.sparse, k + 1)?);
        }
        Ok(start.elapsed().as_secs_f64() * 1000.0)
    };
    for k in 0..SCALES {
        pass(k)?;
    }
    let mut times: Vec<Vec<f64>> = (0..SCALES).map(|_| Vec::with_capacity(repeats)).collect();
    for round in 0..repeats.max(1) {
        // alternate the order so no step count always runs first
        for i in 0..SCALES {
            let k = if round % 2 == 0 { i } else { SCALES - 1 - i };
            times[k].push(pass(k)?);
        }
    }
    Ok((0..SCALES)
        .map(|k| {
            let t = &mut times[k];
            t.sort_by(f64::total_cmp);
            StepsRow {
                steps: k + 1,
                rmse_mm: rmse[k],
                time_ms: t[t.len() / 2],
            }
        })
        .collect())
}

pub fn steps_csv(rows: &[StepsRow]) -> String {
    let mut out = format!("{STEPS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3}\n", r.steps, r.rmse_mm, r.time_ms));
    }
    out
}
