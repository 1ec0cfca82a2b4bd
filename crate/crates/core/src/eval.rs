//! Divergences between generated samples and the target distribution.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Fixed stream used when equal-size resampling is needed.
const RESAMPLE_SEED: u64 = 0x5eed_0001;

/// Exact empirical W₁ on the line. Unequal sizes are handled by subsampling
/// the larger set down to the smaller size without replacement.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    if a.len() != b.len() {
        let (big, m) = if a.len() > b.len() { (&mut a, b.len()) } else { (&mut b, a.len()) };
        let mut rng = RngStream::new(RESAMPLE_SEED, 0).rng();
        *big = sample_indices(&mut rng, big.len(), m).into_iter().map(|i| big[i]).collect();
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Average of [`wasserstein1_1d`] over `projections` random unit directions.
pub fn sliced_w1(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, stream: &RngStream) -> Result<f64> {
    let d = a.first().ok_or(Error::EmptyDataset)?.len();
    if b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if d < 2 {
        return Err(Error::InvalidArgument("sliced W1 needs dimension at least 2".into()));
    }
    if projections == 0 {
        return Err(Error::InvalidArgument("projections must be at least 1".into()));
    }
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let mut rng = stream.rng();
    let mut total = 0.0;
    for _ in 0..projections {
        let g = unit_vector(d, &mut rng);
        let project = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().zip(&g).map(|(x, w)| x * w).sum()).collect::<Vec<f64>>();
        total += wasserstein1_1d(&project(a), &project(b))?;
    }
    Ok(total / projections as f64)
}

/// Uniform draw from the unit sphere in `d` dimensions.
pub fn unit_vector(d: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// W₁ for one-dimensional samples, sliced W₁ otherwise.
pub fn w1_auto(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, stream: &RngStream) -> Result<f64> {
    match a.first().map(Vec::len) {
        None => Err(Error::EmptyDataset),
        Some(1) => {
            let flat = |s: &[Vec<f64>]| s.iter().map(|v| v[0]).collect::<Vec<_>>();
            wasserstein1_1d(&flat(a), &flat(b))
        }
        Some(_) => sliced_w1(a, b, projections, stream),
    }
}

/// Half the L¹ distance between binned frequencies. Values below the first
/// edge or at/above the last fall into two extra overflow bins.
pub fn tv_binned(a: &[f64], b: &[f64], edges: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("bin edges must be strictly increasing".into()));
    }
    let fa = frequencies(a, edges);
    let fb = frequencies(b, edges);
    Ok(0.5 * fa.iter().zip(&fb).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

fn frequencies(s: &[f64], edges: &[f64]) -> Vec<f64> {
    // Bin 0 is the lower overflow; bin edges.len() the upper one.
    let mut counts = vec![0usize; edges.len() + 1];
    for &v in s {
        counts[edges.partition_point(|&e| e <= v)] += 1;
    }
    counts.into_iter().map(|c| c as f64 / s.len() as f64).collect()
}

/// `bins` equal-width bins over the pooled range of both samples.
pub fn default_edges(a: &[f64], b: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::EmptyDataset);
    }
    // Nudge the top edge so the maximum lands inside the last proper bin.
    let hi = if hi > lo { hi + (hi - lo) * 1e-9 } else { lo + 1.0 };
    let width = (hi - lo) / bins as f64;
    Ok((0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect())
}

/// `Σ pᵢ ln(pᵢ/qᵢ)` with `0 ln 0 = 0`; `+∞` when `p` is not absolutely
/// continuous with respect to `q`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::InvalidArgument("negative probability".into()));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub n: usize,
}

pub const METRIC_COLUMNS: [&str; 6] = ["scenario", "method", "metric", "value", "seed", "n"];

/// Writes the long-format metrics table. Values use Rust's shortest
/// round-trip formatting so reruns are byte-identical.
pub fn write_metrics<W: Write>(writer: W, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRIC_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            r.metric.clone(),
            r.value.to_string(),
            r.seed.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(reader: R) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
