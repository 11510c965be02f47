//! Analytical training cost: FLOPs and memory per conv layer.
//!
//! FLOPs count two per multiply-accumulate. Backward costs twice the
//! forward pass of every layer that receives gradients. Memory is counted in
//! 32-bit words: weights, trainable weights, gradients, saved activations,
//! and the eigensolver workspace of gradient projection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::conv::ConvGeometry;
use crate::dces::{csv_io, selection_count};
use crate::error::{Error, Result};
use crate::net::{ArchSpec, LayerSpec};

pub const BYTES_PER_VALUE: u64 = 4;

/// Matrices retained per layer by gradient projection (covariance and
/// eigenvectors).
pub const DEFAULT_KAPPA: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvShape {
    pub name: String,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvShape {
    fn new(name: impl Into<String>, filters: usize, channels: usize, kernel: usize, stride: usize, in_hw: usize) -> Self {
        let g = ConvGeometry::new(stride, (kernel - 1) / 2);
        let out = g.out_extent(in_hw, kernel).expect("valid descriptor geometry");
        ConvShape {
            name: name.into(),
            filters,
            channels,
            kernel,
            in_h: in_hw,
            in_w: in_hw,
            out_h: out,
            out_w: out,
        }
    }

    fn macs_per_sample(&self) -> u64 {
        (self.filters * self.channels * self.kernel * self.kernel * self.out_h * self.out_w) as u64
    }

    fn params(&self) -> u64 {
        (self.filters * self.channels * self.kernel * self.kernel) as u64
    }
}

/// Conv layers in execution order plus the classifier head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostArch {
    pub name: String,
    pub convs: Vec<ConvShape>,
    /// `(in_features, out_features)` of the linear head.
    pub head: Option<(usize, usize)>,
    pub trainable_tail: usize,
}

impl CostArch {
    pub fn from_arch(name: &str, arch: &ArchSpec) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut convs = Vec::new();
        let mut head = None;
        for (i, (spec, shape)) in arch.layers.iter().zip(&shapes).enumerate() {
            match *spec {
                LayerSpec::Conv {
                    filters,
                    channels,
                    kernel,
                    ..
                } => {
                    let out = shapes[i + 1];
                    convs.push(ConvShape {
                        name: format!("layer{i}"),
                        filters,
                        channels,
                        kernel,
                        in_h: shape[1],
                        in_w: shape[2],
                        out_h: out[1],
                        out_w: out[2],
                    });
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => head = Some((in_features, out_features)),
                _ => {}
            }
        }
        Ok(CostArch {
            name: name.to_string(),
            convs,
            head,
            trainable_tail: arch.trainable_tail,
        })
    }

    /// Standard 18-layer residual network for 32×32 inputs (3×3 stem, no max
    /// pool), including the 1×1 downsampling convs. Trainable tail of 2.
    pub fn resnet18(classes: usize) -> Self {
        let mut convs = vec![ConvShape::new("conv1", 64, 3, 3, 1, 32)];
        let mut hw = 32;
        let mut ch = 64;
        for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{}", stage + 1, block);
                let c1 = ConvShape::new(format!("{prefix}.conv1"), width, ch, 3, stride, hw);
                let out = c1.out_h;
                convs.push(c1);
                convs.push(ConvShape::new(format!("{prefix}.conv2"), width, width, 3, 1, out));
                if stride != 1 || ch != width {
                    convs.push(ConvShape::new(format!("{prefix}.downsample"), width, ch, 1, stride, hw));
                }
                ch = width;
                hw = out;
            }
        }
        CostArch {
            name: "resnet18".into(),
            convs,
            head: Some((512, classes)),
            trainable_tail: 2,
        }
    }

    pub fn with_tail(mut self, tail: usize) -> Self {
        self.trainable_tail = tail.min(self.convs.len());
        self
    }

    fn is_trainable(&self, i: usize) -> bool {
        i + self.trainable_tail >= self.convs.len()
    }
}

/// Which parameters of the trainable tail receive gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Full kernels.
    Full,
    /// Center taps only, but gradients computed for the whole kernel.
    Csks,
    /// Center taps on a decoupled 1×1 branch.
    CsksCdm,
    /// Decoupled center branch on a proportion `s` of the channels.
    Dces(f64),
}

impl TrainMode {
    pub fn parse(mode: &str, s: Option<f64>) -> Result<Self> {
        let m = match mode {
            "full" => TrainMode::Full,
            "csks" => TrainMode::Csks,
            "csks+cdm" => TrainMode::CsksCdm,
            "csks+cdm+dces" | "dces" => TrainMode::Dces(s.unwrap_or(crate::dces::DEFAULT_PROPORTION)),
            other => {
                return Err(Error::arg(format!(
                    "mode must be full|csks|csks+cdm|csks+cdm+dces, got {other:?}"
                )))
            }
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if let TrainMode::Dces(s) = *self {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::arg(format!("proportion s must lie in (0, 1], got {s}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Full => f.write_str("full"),
            TrainMode::Csks => f.write_str("csks"),
            TrainMode::CsksCdm => f.write_str("csks+cdm"),
            TrainMode::Dces(s) => write!(f, "csks+cdm+dces({s})"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::parse(s, None)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCost {
    pub name: String,
    pub trainable: bool,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub weight_bytes: u64,
    pub trainable_weight_bytes: u64,
    pub gradient_bytes: u64,
    /// Saved-input bytes; fractional once divided by the patch factor.
    pub activation_bytes: f64,
    pub ogp_workspace_bytes: u64,
}

impl LayerCost {
    fn accumulate(&mut self, o: &LayerCost) {
        self.forward_flops += o.forward_flops;
        self.backward_flops += o.backward_flops;
        self.weight_bytes += o.weight_bytes;
        self.trainable_weight_bytes += o.trainable_weight_bytes;
        self.gradient_bytes += o.gradient_bytes;
        self.activation_bytes += o.activation_bytes;
        self.ogp_workspace_bytes += o.ogp_workspace_bytes;
    }

    pub fn total_bytes(&self) -> f64 {
        (self.weight_bytes + self.gradient_bytes + self.ogp_workspace_bytes) as f64 + self.activation_bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub arch: String,
    pub batch: usize,
    pub mode: TrainMode,
    pub patch_r: Option<usize>,
    pub kappa: u64,
    pub layers: Vec<LayerCost>,
    /// Head parameters (weights only; the head is outside the conv
    /// accounting).
    pub head_weight_bytes: u64,
    pub total: LayerCost,
}

impl CostReport {
    pub fn backward_to_forward(&self) -> f64 {
        self.total.backward_flops as f64 / self.total.forward_flops as f64
    }

    /// Writes one row per conv layer, a `head` row, and a `TOTAL` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record([
            "layer",
            "trainable",
            "forward_flops_2xmac",
            "backward_flops_2xmac",
            "weight_bytes",
            "trainable_weight_bytes",
            "gradient_bytes",
            "activation_bytes",
            "ogp_workspace_bytes",
        ])?;
        let row = |l: &LayerCost| {
            vec![
                l.name.clone(),
                l.trainable.to_string(),
                l.forward_flops.to_string(),
                l.backward_flops.to_string(),
                l.weight_bytes.to_string(),
                l.trainable_weight_bytes.to_string(),
                l.gradient_bytes.to_string(),
                format!("{}", l.activation_bytes),
                l.ogp_workspace_bytes.to_string(),
            ]
        };
        for l in &self.layers {
            w.write_record(row(l))?;
        }
        let head = LayerCost {
            name: "head".into(),
            weight_bytes: self.head_weight_bytes,
            ..LayerCost::default()
        };
        w.write_record(row(&head))?;
        let mut total = self.total.clone();
        total.weight_bytes += self.head_weight_bytes;
        w.write_record(row(&total))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-layer FLOPs for one batch with the architecture's trainable tail.
pub fn training_flops(arch: &CostArch, batch: usize, trainable_tail: usize) -> CostReport {
    estimate(&arch.clone().with_tail(trainable_tail), batch, TrainMode::Full, None, DEFAULT_KAPPA)
        .expect("full mode is always valid")
}

/// Full memory and FLOPs estimate for one batch.
pub fn training_memory(
    arch: &CostArch,
    batch: usize,
    mode: TrainMode,
    patch_r: Option<usize>,
) -> Result<CostReport> {
    estimate(arch, batch, mode, patch_r, DEFAULT_KAPPA)
}

pub fn estimate(
    arch: &CostArch,
    batch: usize,
    mode: TrainMode,
    patch_r: Option<usize>,
    kappa: u64,
) -> Result<CostReport> {
    mode.validate()?;
    if patch_r == Some(0) {
        return Err(Error::arg("patch factor r must be positive"));
    }
    let r2 = patch_r.map_or(1.0, |r| (r * r) as f64);
    let b = batch as u64;
    let mut layers = Vec::with_capacity(arch.convs.len());
    let mut total = LayerCost {
        name: "TOTAL".into(),
        ..LayerCost::default()
    };
    for (i, c) in arch.convs.iter().enumerate() {
        let trainable = arch.is_trainable(i);
        let forward = 2 * b * c.macs_per_sample();
        let k2 = (c.kernel * c.kernel) as u64;
        let (d, ch) = (c.filters as u64, c.channels as u64);
        let mut cost = LayerCost {
            name: c.name.clone(),
            trainable,
            forward_flops: forward,
            weight_bytes: BYTES_PER_VALUE * c.params(),
            ..LayerCost::default()
        };
        if trainable {
            cost.backward_flops = 2 * forward;
            let (trainable_values, grad_values, ogp_dim) = match mode {
                TrainMode::Full => (d * ch * k2, d * ch * k2, ch * k2),
                TrainMode::Csks => (d * ch, d * ch * k2, ch),
                TrainMode::CsksCdm => (d * ch, d * ch, ch),
                TrainMode::Dces(s) => {
                    let sel = selection_count(c.channels, s) as u64;
                    (d * sel, d * sel, sel)
                }
            };
            cost.trainable_weight_bytes = BYTES_PER_VALUE * trainable_values;
            cost.gradient_bytes = BYTES_PER_VALUE * grad_values;
            cost.ogp_workspace_bytes = BYTES_PER_VALUE * kappa * ogp_dim * ogp_dim;
            let act = BYTES_PER_VALUE * b * ch * (c.in_h * c.in_w) as u64;
            cost.activation_bytes = act as f64 / r2;
        }
        total.trainable |= cost.trainable;
        total.accumulate(&cost);
        layers.push(cost);
    }
    Ok(CostReport {
        arch: arch.name.clone(),
        batch,
        mode,
        patch_r,
        kappa,
        layers,
        head_weight_bytes: arch
            .head
            .map_or(0, |(i, o)| BYTES_PER_VALUE * (i * o + o) as u64),
        total,
    })
}

/// Bytes to decimal megabytes.
pub fn megabytes(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointwise() -> CostArch {
        CostArch {
            name: "pw".into(),
            convs: vec![ConvShape::new("c", 1, 1, 1, 1, 2)],
            head: None,
            trainable_tail: 1,
        }
    }

    #[test]
    fn hand_count_pointwise() {
        let r = training_flops(&pointwise(), 1, 1);
        assert_eq!(r.total.forward_flops, 8);
        assert_eq!(r.total.backward_flops, 16);
    }

    #[test]
    fn frozen_has_no_backward() {
        let r = training_flops(&CostArch::resnet18(100), 4, 0);
        assert_eq!(r.total.backward_flops, 0);
        assert!(r.total.forward_flops > 0);
    }

    #[test]
    fn fully_trainable_ratio_is_two() {
        let arch = CostArch::resnet18(100);
        let n = arch.convs.len();
        assert_eq!(training_flops(&arch, 8, n).backward_to_forward(), 2.0);
    }

    #[test]
    fn resnet18_tail_geometry() {
        let arch = CostArch::resnet18(100);
        assert_eq!(arch.convs.len(), 20);
        let last = &arch.convs[arch.convs.len() - 1];
        assert_eq!((last.filters, last.channels, last.kernel, last.in_h), (512, 512, 3, 4));
        assert_eq!(arch.convs[arch.convs.len() - 2].name, "layer4.1.conv1");
    }

    #[test]
    fn invalid_proportion_and_patch() {
        assert!(TrainMode::parse("dces", Some(0.0)).is_err());
        assert!(TrainMode::parse("sideways", None).is_err());
        assert!(training_memory(&pointwise(), 1, TrainMode::Dces(1.5), None).is_err());
        assert!(training_memory(&pointwise(), 1, TrainMode::Full, Some(0)).is_err());
    }

    #[test]
    fn csv_has_total_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cost.csv");
        let r = training_memory(&CostArch::resnet18(100), 2, TrainMode::CsksCdm, None).unwrap();
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 20 + 2);
        assert!(text.lines().last().unwrap().starts_with("TOTAL,"));
    }
}
