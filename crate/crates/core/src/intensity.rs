//! Per-position knowledge intensity of conv kernels.
//!
//! Two measures are accumulated over the filter and channel axes for every
//! kernel position `(u, v)`: gradient sensitivity `Σ |∂L/∂W[d,c,u,v]|` and
//! weight amplitude `Σ |W[d,c,u,v]|`. Each map is also normalized to sum to
//! one.

use std::path::Path;

use crate::csko::center_index;
use crate::dces::csv_io;
use crate::error::{Error, Result};
use crate::net::{cross_entropy, Batch, LayerGrad, Model};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionIntensityMap<T> {
    pub layer: usize,
    pub kernel: usize,
    /// Row-major `K×K` raw scores.
    pub raw: Vec<T>,
    /// Raw scores divided by their sum; uniform `1/K²` when the sum is zero.
    pub normalized: Vec<T>,
}

impl<T: Scalar> PositionIntensityMap<T> {
    pub fn from_raw(layer: usize, kernel: usize, raw: Vec<T>) -> Result<Self> {
        if raw.len() != kernel * kernel {
            return Err(Error::shape(format!(
                "{} scores for a {kernel}×{kernel} kernel",
                raw.len()
            )));
        }
        let mut total = T::zero();
        for &r in &raw {
            total += r;
        }
        let normalized = if total > T::zero() {
            raw.iter().map(|&r| r / total).collect()
        } else {
            vec![T::one() / T::from_usize_lossy(kernel * kernel); kernel * kernel]
        };
        Ok(PositionIntensityMap {
            layer,
            kernel,
            raw,
            normalized,
        })
    }

    pub fn raw_at(&self, u: usize, v: usize) -> T {
        self.raw[u * self.kernel + v]
    }

    pub fn normalized_at(&self, u: usize, v: usize) -> T {
        self.normalized[u * self.kernel + v]
    }

    /// Position of the largest normalized score (first in row-major order on
    /// ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.normalized.iter().enumerate() {
            if v > self.normalized[best] {
                best = i;
            }
        }
        (best / self.kernel, best % self.kernel)
    }

    /// Whether the center tap carries the strictly largest score.
    pub fn center_is_argmax(&self) -> bool {
        let m = center_index(self.kernel);
        let c = self.normalized_at(m, m);
        self.normalized
            .iter()
            .enumerate()
            .all(|(i, &v)| i == m * self.kernel + m || v < c)
    }
}

fn conv_kernel_size<T: Scalar>(model: &Model<T>, layer: usize) -> Result<usize> {
    let w = model.conv(layer)?.dense_weight()?;
    Ok(w.dims()[2])
}

/// Accumulates `|∂L/∂W|` of the cross-entropy loss over `batches` for each
/// requested conv layer.
pub fn position_sensitivity<T: Scalar>(
    model: &Model<T>,
    batches: &[Batch<T>],
    layers: &[usize],
) -> Result<Vec<PositionIntensityMap<T>>> {
    if batches.is_empty() {
        return Err(Error::arg("position_sensitivity needs at least one batch"));
    }
    let mut probe = model.clone();
    probe.fuse_all()?;
    probe.freeze_all();
    probe.set_trainable_convs(layers)?;
    let mut raw: Vec<Vec<T>> = layers
        .iter()
        .map(|&l| conv_kernel_size(model, l).map(|k| vec![T::zero(); k * k]))
        .collect::<Result<_>>()?;
    for batch in batches {
        let (logits, cache) = probe.forward(&batch.x)?;
        let (_, glogits) = cross_entropy(&logits, &batch.labels)?;
        let grads = probe.backward(&cache, &glogits)?;
        for (slot, &l) in raw.iter_mut().zip(layers) {
            let Some(LayerGrad::Kernel(g)) = grads.get(l) else {
                return Err(Error::State(format!("no kernel gradient for layer {l}")));
            };
            accumulate_abs(slot, g.data(), g.dims());
        }
    }
    layers
        .iter()
        .zip(raw)
        .map(|(&l, r)| {
            let k = conv_kernel_size(model, l)?;
            PositionIntensityMap::from_raw(l, k, r)
        })
        .collect()
}

/// `Σ_{d,c} |W[d,c,u,v]|` for each requested conv layer.
pub fn position_amplitude<T: Scalar>(
    model: &Model<T>,
    layers: &[usize],
) -> Result<Vec<PositionIntensityMap<T>>> {
    layers
        .iter()
        .map(|&l| {
            let w = model.conv(l)?.dense_weight()?;
            let k = w.dims()[2];
            let mut raw = vec![T::zero(); k * k];
            accumulate_abs(&mut raw, w.data(), w.dims());
            PositionIntensityMap::from_raw(l, k, raw)
        })
        .collect()
}

fn accumulate_abs<T: Scalar>(slot: &mut [T], values: &[T], dims: [usize; 4]) {
    let plane = dims[2] * dims[3];
    for (i, &v) in values.iter().enumerate() {
        slot[i % plane] += v.abs();
    }
}

/// Position-wise mean of several maps with the same kernel size (block-level
/// summary).
pub fn mean_map<T: Scalar>(maps: &[PositionIntensityMap<T>]) -> Result<PositionIntensityMap<T>> {
    let first = maps.first().ok_or_else(|| Error::arg("mean of zero maps"))?;
    let k = first.kernel;
    if maps.iter().any(|m| m.kernel != k) {
        return Err(Error::shape("maps with different kernel sizes"));
    }
    let n = T::from_usize_lossy(maps.len());
    let raw = (0..k * k)
        .map(|i| maps.iter().fold(T::zero(), |acc, m| acc + m.raw[i]) / n)
        .collect();
    let mut out = PositionIntensityMap::from_raw(first.layer, k, raw)?;
    out.normalized = (0..k * k)
        .map(|i| maps.iter().fold(T::zero(), |acc, m| acc + m.normalized[i]) / n)
        .collect();
    Ok(out)
}

pub const REPORT_HEADER: [&str; 6] = ["layer", "u", "v", "raw", "normalized", "is_center_argmax"];

/// One CSV row per `(layer, u, v)`.
pub fn emit_intensity_report<T: Scalar>(
    maps: &[PositionIntensityMap<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::arg("no intensity maps to report"));
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(REPORT_HEADER)?;
    for m in maps {
        let center = m.center_is_argmax();
        for u in 0..m.kernel {
            for v in 0..m.kernel {
                w.write_record([
                    m.layer.to_string(),
                    u.to_string(),
                    v.to_string(),
                    format!("{:e}", m.raw_at(u, v).as_f64()),
                    format!("{:e}", m.normalized_at(u, v).as_f64()),
                    center.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a report written by [`emit_intensity_report`].
pub fn read_intensity_report(path: impl AsRef<Path>) -> Result<Vec<PositionIntensityMap<f64>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected header {headers:?}")));
    }
    let mut rows: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let bad = || Error::Format(format!("bad report row {rec:?}"));
        rows.push((
            field(0).parse().map_err(|_| bad())?,
            field(1).parse().map_err(|_| bad())?,
            field(2).parse().map_err(|_| bad())?,
            field(3).parse().map_err(|_| bad())?,
            field(4).parse().map_err(|_| bad())?,
        ));
    }
    let mut maps = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let layer = rows[i].0;
        let end = rows[i..].iter().position(|r| r.0 != layer).map_or(rows.len(), |p| i + p);
        let group = &rows[i..end];
        let k = (group.len() as f64).sqrt().round() as usize;
        if k * k != group.len() {
            return Err(Error::Format(format!("layer {layer}: {} rows is not K²", group.len())));
        }
        let mut raw = vec![0.0; k * k];
        let mut norm = vec![0.0; k * k];
        for &(_, u, v, r, n) in group {
            if u >= k || v >= k {
                return Err(Error::Format(format!("layer {layer}: position ({u},{v}) outside {k}×{k}")));
            }
            raw[u * k + v] = r;
            norm[u * k + v] = n;
        }
        maps.push(PositionIntensityMap {
            layer,
            kernel: k,
            raw,
            normalized: norm,
        });
        i = end;
    }
    Ok(maps)
}
