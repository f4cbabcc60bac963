use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{ensure, Result};

/// Two-sample asymptotic critical value at 5% significance.
pub const KS_C_005: f64 = 1.358;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub reject: bool,
    pub timestep: usize,
    pub channel: usize,
}

/// Aggregate over the `(timestep, channel)` grid around one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsProbe {
    pub probe: usize,
    pub mean_statistic: f64,
    pub rejection_pct: f64,
    pub cells: usize,
}

pub fn ks_threshold(na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    KS_C_005 * ((na + nb) / (na * nb)).sqrt()
}

/// `sup_x |F_a(x) - F_b(x)|` over the sorted union, with the 5% decision.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<KsOutcome> {
    ensure!(!a.is_empty() && !b.is_empty(), InvalidArgument, "KS samples must be non-empty");
    ensure!(
        a.iter().chain(b).all(|v| !v.is_nan()),
        InvalidArgument,
        "KS samples contain NaN"
    );
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    // once one sample is exhausted the gap only shrinks towards zero
    Ok(KsOutcome {
        statistic: d,
        reject: d > ks_threshold(na, nb),
    })
}

/// `[0.3, 0.5, 0.7, 0.9] * m`, i.e. 300..900 for `m = 1000`.
pub fn default_probes(m: usize) -> Vec<usize> {
    [3, 5, 7, 9].iter().map(|k| (k * m / 10).min(m.saturating_sub(1))).collect()
}

fn column(ws: &[SeriesWindow], c: usize, t: usize) -> Vec<f64> {
    ws.iter().map(|w| w.at(c, t)).collect()
}

/// One KS test per timestep in `[probe - block, probe + block] ∩ [0, m)` and channel.
pub fn ks_cells(real: &[SeriesWindow], synth: &[SeriesWindow], probe: usize, block: usize) -> Result<Vec<KsResult>> {
    ensure!(!real.is_empty() && !synth.is_empty(), InvalidArgument, "KS needs non-empty sets");
    let (d, m) = real[0].shape();
    for w in real.iter().chain(synth) {
        w.check_shape(d, m)?;
    }
    ensure!(probe < m, InvalidArgument, "probe {probe} outside [0, {m})");
    let lo = probe.saturating_sub(block);
    let hi = (probe + block).min(m - 1);
    let mut out = Vec::with_capacity((hi - lo + 1) * d);
    for t in lo..=hi {
        for c in 0..d {
            let r = ks_statistic(&column(real, c, t), &column(synth, c, t))?;
            out.push(KsResult {
                statistic: r.statistic,
                reject: r.reject,
                timestep: t,
                channel: c,
            });
        }
    }
    Ok(out)
}

pub fn ks_suite(real: &[SeriesWindow], synth: &[SeriesWindow], probes: &[usize], block: usize) -> Result<Vec<KsProbe>> {
    probes
        .iter()
        .map(|&p| {
            let cells = ks_cells(real, synth, p, block)?;
            let n = cells.len() as f64;
            Ok(KsProbe {
                probe: p,
                mean_statistic: cells.iter().map(|c| c.statistic).sum::<f64>() / n,
                rejection_pct: 100.0 * cells.iter().filter(|c| c.reject).count() as f64 / n,
                cells: cells.len(),
            })
        })
        .collect()
}
