//! The eight depth-completion metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to predictions before inverting or taking ratios.
pub const INVERSE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub rel: f64,
    /// Percentages.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 8] = [
        "rmse_mm",
        "mae_mm",
        "irmse_per_km",
        "imae_per_km",
        "rel",
        "delta1",
        "delta2",
        "delta3",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.rmse_mm,
            self.mae_mm,
            self.irmse_per_km,
            self.imae_per_km,
            self.rel,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::EmptyValidSet("metric mean"));
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let k = reports.len() as f64;
        let a = acc.map(|v| v / k);
        Ok(MetricReport {
            rmse_mm: a[0],
            mae_mm: a[1],
            irmse_per_km: a[2],
            imae_per_km: a[3],
            rel: a[4],
            delta1: a[5],
            delta2: a[6],
            delta3: a[7],
        })
    }

    /// `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            out.push_str(&format!("{name},{v}\n"));
        }
        out
    }
}

/// Metrics over the pixels where `mask` is 1. Depths in metres.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || gt.shape() != mask.shape() {
        return Err(Error::dim(
            "compute_metrics",
            format!("{:?} / {:?} / {:?}", pred.shape(), gt.shape(), mask.shape()),
        ));
    }
    let (mut se, mut ae, mut ise, mut iae, mut rel) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        if g <= 0.0 {
            return Err(Error::InvalidArgument(format!("ground truth {g} at a valid pixel")));
        }
        n += 1;
        let p0 = p.max(0.0);
        let pi = p.max(INVERSE_FLOOR);
        let e = p0 - g;
        se += e * e;
        ae += e.abs();
        let ie = 1.0 / pi - 1.0 / g;
        ise += ie * ie;
        iae += ie.abs();
        rel += e.abs() / g;
        let ratio = (pi / g).max(g / pi);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet("compute_metrics"));
    }
    let k = n as f64;
    let pct = |h: usize| 100.0 * h as f64 / k;
    Ok(MetricReport {
        rmse_mm: (se / k).sqrt() * 1000.0,
        mae_mm: ae / k * 1000.0,
        irmse_per_km: (ise / k).sqrt() * 1000.0,
        imae_per_km: iae / k * 1000.0,
        rel: rel / k,
        delta1: pct(hits[0]),
        delta2: pct(hits[1]),
        delta3: pct(hits[2]),
    })
}
