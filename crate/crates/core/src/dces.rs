//! Dynamic channel element selection for the center branch.
//!
//! Each input channel `c` of a decoupled layer is scored by
//! `Σ_d |∂L/∂Wα[d,c] · Wα[d,c]|` on data from the incoming task; the top
//! `⌈s·C⌉` channels are trained and the rest stay frozen for that task.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::csko::KernelDecomposition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Default proportion of channels trained per task.
pub const DEFAULT_PROPORTION: f64 = 0.5;

/// Default number of new-task batches used to accumulate channel scores.
pub const DEFAULT_SCORE_BATCHES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScore<T> {
    pub layer: usize,
    pub scores: Vec<T>,
}

/// Which data the channel scores were measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    New,
    Old,
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new" => Ok(Criterion::New),
            "old" => Ok(Criterion::Old),
            other => Err(Error::arg(format!("criterion must be new|old, got {other:?}"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::New => "new",
            Criterion::Old => "old",
        })
    }
}

/// Strictly increasing set of trainable input channels for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSelection {
    layer: usize,
    proportion: f64,
    channels: usize,
    selected: Vec<usize>,
}

impl ChannelSelection {
    /// Every channel selected (`s = 1`).
    pub fn all(layer: usize, channels: usize) -> Self {
        ChannelSelection {
            layer,
            proportion: 1.0,
            channels,
            selected: (0..channels).collect(),
        }
    }

    pub fn from_indices(layer: usize, channels: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::arg("selection must contain at least one channel"));
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= channels) {
            return Err(Error::arg(format!("channel {bad} out of range (C = {channels})")));
        }
        Ok(ChannelSelection {
            layer,
            proportion: indices.len() as f64 / channels as f64,
            channels,
            selected: indices,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn proportion(&self) -> f64 {
        self.proportion
    }

    /// Total channel count `C` of the layer.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.selected.binary_search(&c).is_ok()
    }
}

/// `max(1, ⌈s·C⌉)`.
pub fn selection_count(channels: usize, s: f64) -> usize {
    // Tolerance keeps e.g. 0.3·10 from rounding up to 4.
    let raw = (s * channels as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(channels.max(1))
}

/// Combined per-channel sensitivity `Σ_d |g[d,c] · Wα[d,c]|`.
pub fn channel_sensitivity<T: Scalar>(
    dec: &KernelDecomposition<T>,
    grad_accum: &Tensor4<T>,
) -> Result<ChannelScore<T>> {
    let w = dec.w_alpha();
    grad_accum.expect_dims(w.dims(), "channel_sensitivity gradient")?;
    let [nd, nc, _, _] = w.dims();
    let mut scores = vec![T::zero(); nc];
    for d in 0..nd {
        for (c, score) in scores.iter_mut().enumerate() {
            let i = d * nc + c;
            *score += (grad_accum.data()[i] * w.data()[i]).abs();
        }
    }
    Ok(ChannelScore {
        layer: dec.layer(),
        scores,
    })
}

/// Top-`⌈s·C⌉` channels by score; ties go to the lower index.
///
/// `new` uses scores from the incoming task, `old` uses scores measured on a
/// retained calibration buffer, which must be provided.
pub fn select_channels<T: Scalar>(
    new: &ChannelScore<T>,
    old: Option<&ChannelScore<T>>,
    s: f64,
    criterion: Criterion,
) -> Result<ChannelSelection> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::arg(format!("proportion s must lie in (0, 1], got {s}")));
    }
    let score = match criterion {
        Criterion::New => new,
        Criterion::Old => old.ok_or_else(|| {
            Error::State("old-data criterion requested without a calibration set".into())
        })?,
    };
    if score.scores.iter().any(|x| !x.is_finite() || *x < T::zero()) {
        return Err(Error::Numerical("channel scores must be finite and non-negative".into()));
    }
    let nc = score.scores.len();
    if nc == 0 {
        return Err(Error::arg("cannot select from zero channels"));
    }
    let k = selection_count(nc, s);
    let mut order: Vec<usize> = (0..nc).collect();
    order.sort_by(|&a, &b| {
        score.scores[b]
            .partial_cmp(&score.scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    Ok(ChannelSelection {
        layer: score.layer,
        proportion: s,
        channels: nc,
        selected: order,
    })
}

/// Writes `layer,channel` rows.
pub fn write_selection_csv(path: impl AsRef<Path>, selections: &[ChannelSelection]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["layer", "channel"])?;
    for sel in selections {
        for &c in sel.selected() {
            w.write_record([sel.layer.to_string(), c.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `layer,channel` rows back as `(layer, channel)` pairs.
pub fn read_selection_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad selection row {rec:?}")))
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
