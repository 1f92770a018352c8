//! Exports for inspecting a trained model: the learned channel graph with
//! a hub ranking, Grad-CAM temporal saliency at the block output, KAN basis
//! importance, and per-class channel activation.
//!
//! Grad-CAM here is one concrete instantiation. The target layer is the
//! block output `H` viewed as `[B, C, S, D]`. Per window `s`, the weight
//! `α(s)` is the gradient of the target logit averaged over `(C, D)`, and
//! `saliency(s) = relu(Σ_{c,d} α(s)·H[c,s,d])`. The per-channel map uses
//! `α(c,s)` averaged over `D` only.

use std::fs;
use std::path::Path;

use crate::data::mstf;
use crate::error::{Error, Result};
use crate::mcr::normalized_adjacency_tensor;
use crate::model::MscgcKanModel;
use crate::nn::Mode;
use crate::tensor::{Tape, Tensor};
use crate::seeded;

pub const HISTOGRAM_BINS: usize = 20;

/// Learned connectivity and channels ordered by off-diagonal strength.
#[derive(Clone, Debug)]
pub struct HubReport {
    pub a_hat: Tensor,
    /// `strength[i] = Σ_{j≠i} |Â_ij|`.
    pub strengths: Vec<f64>,
    /// Channel indices, strongest first; ties keep ascending index.
    pub ranking: Vec<usize>,
}

pub fn hub_report(a_hat: Tensor) -> Result<HubReport> {
    let c = match a_hat.shape() {
        [r, k] if r == k => *r,
        other => return Err(Error::dim(format!("adjacency must be square, got {other:?}"))),
    };
    let d = a_hat.data();
    let strengths: Vec<f64> = (0..c).map(|i| (0..c).filter(|&j| j != i).map(|j| d[i * c + j].abs()).sum()).collect();
    let mut ranking: Vec<usize> = (0..c).collect();
    ranking.sort_by(|&a, &b| strengths[b].total_cmp(&strengths[a]).then(a.cmp(&b)));
    Ok(HubReport { a_hat, strengths, ranking })
}

/// `Â` through the same normalisation the forward pass uses.
pub fn export_adjacency(model: &MscgcKanModel) -> Result<HubReport> {
    let block = model
        .block
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no graph block", model.config.variant.label())))?;
    let a = model.store.get(block.adjacency.a);
    hub_report(normalized_adjacency_tensor(a, block.adjacency.eps_deg)?)
}

/// Mean `|Â|` inside and across channel communities, diagonal excluded.
pub fn community_contrast(a_hat: &Tensor, communities: &[usize]) -> Result<(f64, f64)> {
    let c = communities.len();
    if a_hat.shape() != [c, c] {
        return Err(Error::dim(format!("adjacency {:?} for {c} channels", a_hat.shape())));
    }
    let (mut within, mut across) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let v = a_hat.data()[i * c + j].abs();
            let slot = if communities[i] == communities[j] { &mut within } else { &mut across };
            slot.0 += v;
            slot.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(within), mean(across)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Length `S`, nonnegative.
    pub temporal: Vec<f64>,
    /// `C × S`, nonnegative.
    pub per_channel: Vec<Vec<f64>>,
}

/// Grad-CAM saliency of `targets[b]` for every sample of `x` (`[B, C, S, P]`).
pub fn gradcam_temporal(model: &mut MscgcKanModel, x: &Tensor, targets: &[usize]) -> Result<Vec<SaliencyMap>> {
    let classes = model.config.classes;
    let b = x.shape().first().copied().unwrap_or(0);
    if targets.len() != b {
        return Err(Error::Validation(format!("{} targets for {b} samples", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Validation(format!("target class {bad} outside [0, {classes})")));
    }
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = model.forward(&mut tape, xv, Mode::Eval, &mut seeded(0))?;
    let h = out.h;
    tape.retain_grad(h);
    let onehot = Tensor::from_fn(&[b, classes], |i| if targets[i / classes] == i % classes { 1.0 } else { 0.0 })?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(out.logits, mask)?;
    let total = tape.sum_all(picked)?;
    tape.backward(total)?;
    let hv = tape.value(h).clone();
    let grad = tape.grad(h).unwrap_or(Tensor::zeros(hv.shape())?);
    let [_, c, s, d] = hv.shape()[..] else {
        return Err(Error::dim(format!("block output {:?} is not [B, C, S, D]", hv.shape())));
    };
    let (hd, gd) = (hv.data(), grad.data());
    let at = |n: usize, ci: usize, si: usize, di: usize| ((n * c + ci) * s + si) * d + di;
    let mut maps = Vec::with_capacity(b);
    for n in 0..b {
        let mut temporal = vec![0.0; s];
        let mut per_channel = vec![vec![0.0; s]; c];
        for si in 0..s {
            let mut alpha = 0.0;
            for ci in 0..c {
                for di in 0..d {
                    alpha += gd[at(n, ci, si, di)];
                }
            }
            alpha /= (c * d) as f64;
            let mut acc = 0.0;
            for ci in 0..c {
                let alpha_c = (0..d).map(|di| gd[at(n, ci, si, di)]).sum::<f64>() / d as f64;
                let mut acc_c = 0.0;
                for di in 0..d {
                    let hval = hd[at(n, ci, si, di)];
                    acc += alpha * hval;
                    acc_c += alpha_c * hval;
                }
                per_channel[ci][si] = acc_c.max(0.0);
            }
            temporal[si] = acc.max(0.0);
        }
        maps.push(SaliencyMap { temporal, per_channel });
    }
    Ok(maps)
}

/// Share of saliency mass within ±`radius` windows of `onset`, divided by
/// the share a uniform map would put there.
pub fn onset_mass_ratio(temporal: &[f64], onset: usize, radius: usize) -> Option<f64> {
    let total: f64 = temporal.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let lo = onset.saturating_sub(radius);
    let hi = (onset + radius).min(temporal.len() - 1);
    let near: f64 = temporal[lo..=hi].iter().sum();
    Some((near / total) / ((hi - lo + 1) as f64 / temporal.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; bins];
        if values.is_empty() {
            return Self { lo: 0.0, hi: 0.0, counts };
        }
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let k = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[k] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanImportance {
    pub names: Vec<String>,
    /// Mean `|w|` of the output-projection columns fed by each basis.
    pub importance: Vec<f64>,
    /// Responses of each basis over the probe batch, when one is given.
    pub histograms: Vec<Histogram>,
}

pub fn kan_basis_importance(model: &mut MscgcKanModel, probe: Option<&Tensor>) -> Result<KanImportance> {
    let kan = model
        .kan
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no KAN mapping", model.config.variant.label())))?;
    let cfg = kan.config;
    let groups = cfg.num_bases();
    let w = model.store.get(kan.out_proj.weight);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let hid = cfg.hidden;
    let mut importance = vec![0.0; groups];
    for r in 0..rows {
        let row = &w.data()[r * cols..][..cols];
        for (g, imp) in importance.iter_mut().enumerate() {
            *imp += row[g * hid..(g + 1) * hid].iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    importance.iter_mut().for_each(|v| *v /= (rows * hid) as f64);
    let names = cfg.basis_names();
    let mut histograms = Vec::new();
    if let Some(x) = probe {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, xv, Mode::Eval, &mut seeded(0))?;
        let hid_var = out.kan_hidden.expect("KAN variant records its hidden activation");
        let phi = crate::kan::basis_expand(&mut tape, hid_var, cfg.harmonics)?;
        let pv = tape.value(phi);
        let width = groups * hid;
        for g in 0..groups {
            let vals: Vec<f64> = pv.data().chunks_exact(width).flat_map(|row| row[g * hid..(g + 1) * hid].to_vec()).collect();
            histograms.push(Histogram::of(&vals, HISTOGRAM_BINS));
        }
    }
    Ok(KanImportance { names, importance, histograms })
}

/// Per class, the mean `|H|` of each channel over samples, windows and
/// features. Classes without samples are `None`.
pub fn channel_activation(model: &mut MscgcKanModel, x: &Tensor, y: &[usize], batch: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let m = model.config.classes;
    let n = x.shape().first().copied().unwrap_or(0);
    if y.len() != n {
        return Err(Error::Validation(format!("{} labels for {n} samples", y.len())));
    }
    let c = model.config.channels;
    let mut sums = vec![vec![0.0; c]; m];
    let mut counts = vec![0usize; m];
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
        let mut tape = Tape::inference();
        let xv = tape.constant(x.select(&idx)?);
        let out = model.forward(&mut tape, xv, Mode::Eval, &mut seeded(0))?;
        let h = tape.value(out.h);
        let per = h.numel() / (idx.len() * c);
        for (k, &i) in idx.iter().enumerate() {
            let cls = y[i];
            if cls >= m {
                return Err(Error::Validation(format!("label {cls} outside [0, {m})")));
            }
            counts[cls] += 1;
            for ch in 0..c {
                let span = &h.data()[(k * c + ch) * per..][..per];
                sums[cls][ch] += span.iter().map(|v| v.abs()).sum::<f64>() / per as f64;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(cls, (s, k))| {
            if k == 0 {
                log::warn!("class {cls} has no samples; omitted from activation export");
                None
            } else {
                Some(s.into_iter().map(|v| v / k as f64).collect())
            }
        })
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let wrap = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if !header.is_empty() {
        w.write_record(header).map_err(wrap)?;
    }
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

/// `adjacency.csv` (C rows of C values, no header) and `hubs.csv`.
pub fn write_hub_csvs(dir: &Path, report: &HubReport) -> Result<()> {
    let c = report.strengths.len();
    let a = report.a_hat.data();
    write_rows(&dir.join("adjacency.csv"), &[], (0..c).map(|i| a[i * c..(i + 1) * c].iter().map(|v| v.to_string()).collect()))?;
    write_rows(
        &dir.join("hubs.csv"),
        &["rank", "channel", "strength"],
        report.ranking.iter().enumerate().map(|(r, &ch)| vec![(r + 1).to_string(), ch.to_string(), report.strengths[ch].to_string()]),
    )
}

/// `saliency.csv` with one row per (sample, window).
pub fn write_saliency_csv(path: &Path, samples: &[usize], maps: &[SaliencyMap]) -> Result<()> {
    write_rows(
        path,
        &["sample", "s", "value"],
        samples.iter().zip(maps).flat_map(|(&i, m)| {
            m.temporal.iter().enumerate().map(move |(s, v)| vec![i.to_string(), s.to_string(), v.to_string()])
        }),
    )
}

/// `kan_importance.csv` plus the histograms as a `[G, 3, bins]` MSTF tensor
/// holding the lower edges, upper edges and counts.
pub fn write_kan_files(dir: &Path, imp: &KanImportance) -> Result<()> {
    write_rows(
        &dir.join("kan_importance.csv"),
        &["basis", "importance"],
        imp.names.iter().zip(&imp.importance).map(|(n, v)| vec![n.clone(), v.to_string()]),
    )?;
    if imp.histograms.is_empty() {
        return Ok(());
    }
    let bins = imp.histograms[0].counts.len();
    let mut data = Vec::with_capacity(imp.histograms.len() * 3 * bins);
    for h in &imp.histograms {
        let width = (h.hi - h.lo) / bins as f64;
        data.extend((0..bins).map(|k| h.lo + k as f64 * width));
        data.extend((0..bins).map(|k| h.lo + (k + 1) as f64 * width));
        data.extend(h.counts.iter().map(|&c| c as f64));
    }
    let t = Tensor::new(vec![imp.histograms.len(), 3, bins], data)?;
    mstf::save_tensor(&dir.join("kan_histograms.mstf"), "kan_histograms", &t)
}

/// `activation.csv` with one row per (class, channel); missing classes are
/// skipped.
pub fn write_activation_csv(path: &Path, act: &[Option<Vec<f64>>]) -> Result<()> {
    write_rows(
        path,
        &["class", "channel", "value"],
        act.iter().enumerate().flat_map(|(cls, row)| {
            row.iter().flat_map(move |r| r.iter().enumerate().map(move |(ch, v)| vec![cls.to_string(), ch.to_string(), v.to_string()]))
        }),
    )
}
