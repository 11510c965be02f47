//! Minimal feed-forward convolutional network with an expandable classifier
//! head, exact backward pass and Adam.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
use crate::csko::{
    center_backward_compact, decouple, decoupled_backward_input, decoupled_forward, fuse,
    BranchCache, CenterGrad, KernelDecomposition,
};
use crate::dces::ChannelSelection;
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvFile};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::tsr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool2,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                filters,
                channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv {filters} {channels} {kernel} {stride} {padding}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::AvgPool2 => f.write_str("avgpool2"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear {in_features} {out_features}"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>> {
            if parts.len() != n + 1 {
                return Err(Error::Format(format!("layer {s:?}: expected {n} numbers")));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::Format(format!("layer {s:?}: bad number {p:?}"))))
                .collect()
        };
        match parts.first().copied() {
            Some("conv") => {
                let v = nums(5)?;
                Ok(LayerSpec::Conv {
                    filters: v[0],
                    channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                })
            }
            Some("relu") => Ok(LayerSpec::Relu),
            Some("avgpool2") => Ok(LayerSpec::AvgPool2),
            Some("flatten") => Ok(LayerSpec::Flatten),
            Some("linear") => {
                let v = nums(2)?;
                Ok(LayerSpec::Linear {
                    in_features: v[0],
                    out_features: v[1],
                })
            }
            _ => Err(Error::Format(format!("unknown layer {s:?}"))),
        }
    }
}

/// Layer list plus the input shape and how many final conv layers train.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub trainable_tail: usize,
}

impl ArchSpec {
    /// Desk-scale backbone: three downsampling stages of 3×3 convs and a
    /// linear head, with the last two convs trainable.
    pub fn micro(input: [usize; 3], classes: usize) -> Self {
        let [c, h, w] = input;
        let conv = |filters, channels| LayerSpec::Conv {
            filters,
            channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        ArchSpec {
            input,
            layers: vec![
                conv(16, c),
                LayerSpec::Relu,
                LayerSpec::AvgPool2,
                conv(32, 16),
                LayerSpec::Relu,
                LayerSpec::AvgPool2,
                conv(32, 32),
                LayerSpec::Relu,
                conv(32, 32),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 32 * (h / 4) * (w / 4),
                    out_features: classes,
                },
            ],
            trainable_tail: 2,
        }
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Layer indices of the trainable conv tail.
    pub fn tail_layers(&self) -> Vec<usize> {
        let convs = self.conv_layers();
        convs[convs.len().saturating_sub(self.trainable_tail)..].to_vec()
    }

    pub fn head_index(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Linear { .. }) => Some(self.layers.len() - 1),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    /// Checks the channel chain and returns each layer's input shape `(C,H,W)`
    /// followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let convs = self.conv_layers();
        if convs.is_empty() {
            return Err(Error::arg("architecture needs at least one conv layer"));
        }
        if self.trainable_tail > convs.len() {
            return Err(Error::arg(format!(
                "trainable_tail {} exceeds {} conv layers",
                self.trainable_tail,
                convs.len()
            )));
        }
        if self.head_index().is_none() {
            return Err(Error::arg("architecture must end in a linear head"));
        }
        let tail = self.tail_layers();
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(shape);
            let [c, h, w] = shape;
            shape = match *layer {
                LayerSpec::Conv {
                    filters,
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if channels != c {
                        return Err(Error::shape(format!(
                            "layer {i}: conv expects {channels} channels, receives {c}"
                        )));
                    }
                    if tail.contains(&i) && (kernel % 2 == 0 || padding != (kernel - 1) / 2) {
                        return Err(Error::arg(format!(
                            "layer {i}: trainable conv needs odd K and padding (K-1)/2"
                        )));
                    }
                    let g = ConvGeometry::new(stride, padding);
                    [filters, g.out_extent(h, kernel)?, g.out_extent(w, kernel)?]
                }
                LayerSpec::Relu => shape,
                LayerSpec::AvgPool2 => {
                    if h < 2 || w < 2 {
                        return Err(Error::shape(format!("layer {i}: cannot pool {h}×{w}")));
                    }
                    [c, h / 2, w / 2]
                }
                LayerSpec::Flatten => [c * h * w, 1, 1],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if h != 1 || w != 1 || c != in_features {
                        return Err(Error::shape(format!(
                            "layer {i}: linear expects {in_features} features, receives {c}×{h}×{w}"
                        )));
                    }
                    [out_features, 1, 1]
                }
            };
        }
        out.push(shape);
        Ok(out)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.insert(
            "input",
            format!("{},{},{}", self.input[0], self.input[1], self.input[2]),
        );
        kv.insert("trainable_tail", self.trainable_tail);
        kv.insert("layers", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            kv.insert(format!("layer.{i:03}"), l);
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let input = parse_list::<usize>("input", kv.require("input")?)?;
        if input.len() != 3 {
            return Err(Error::Format("input must be C,H,W".into()));
        }
        let n: usize = kv.parse_opt("layers")?.ok_or_else(|| Error::arg("missing key \"layers\""))?;
        let layers = (0..n)
            .map(|i| kv.require(&format!("layer.{i:03}"))?.parse())
            .collect::<Result<Vec<LayerSpec>>>()?;
        let arch = ArchSpec {
            input: [input[0], input[1], input[2]],
            layers,
            trainable_tail: kv.parse_or("trainable_tail", 2)?,
        };
        arch.shapes()?;
        Ok(arch)
    }
}

/// Weights of a conv layer: a dense kernel, or a surround/center
/// decomposition with the channels currently selected for training.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvKernel<T> {
    Dense(Tensor4<T>),
    Decoupled {
        dec: KernelDecomposition<T>,
        selection: ChannelSelection,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub geom: ConvGeometry,
    pub kernel: ConvKernel<T>,
    pub trainable: bool,
}

impl<T: Scalar> ConvLayer<T> {
    /// Equivalent single dense kernel.
    pub fn dense_weight(&self) -> Result<Tensor4<T>> {
        match &self.kernel {
            ConvKernel::Dense(w) => Ok(w.clone()),
            ConvKernel::Decoupled { dec, .. } => fuse(dec),
        }
    }
}

/// Classifier head `y = W (x - μ) + b`; rows below `frozen_rows` never
/// change. The input offset `μ` is fixed, zero unless set.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    /// `[out, in, 1, 1]`
    pub weight: Tensor4<T>,
    /// `[out, 1, 1, 1]`
    pub bias: Tensor4<T>,
    /// `[1, in, 1, 1]`
    pub offset: Tensor4<T>,
    pub frozen_rows: usize,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn rows(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn is_trainable(&self) -> bool {
        self.frozen_rows < self.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    Relu,
    AvgPool2,
    Flatten,
    Linear(LinearLayer<T>),
}

impl<T: Scalar> Layer<T> {
    fn has_trainable_params(&self) -> bool {
        match self {
            Layer::Conv(c) => c.trainable,
            Layer::Linear(l) => l.is_trainable(),
            _ => false,
        }
    }
}

/// Images with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor4<T>,
    pub labels: Vec<usize>,
}

/// Inputs saved by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub inputs: Vec<Tensor4<T>>,
    pub branches: Vec<Option<BranchCache<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<T> {
    /// Full `[D, C, K, K]` kernel gradient.
    Kernel(Tensor4<T>),
    /// Center-branch gradient on the selected channels only.
    Center(CenterGrad<T>),
    /// Head gradient; frozen rows are structural zeros.
    Linear { weight: Tensor4<T>, bias: Tensor4<T> },
}

/// Gradients for the unfrozen parameters, indexed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<Option<LayerGrad<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }

    pub fn get(&self, layer: usize) -> Option<&LayerGrad<T>> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    /// Number of gradient values materialized for conv layers.
    pub fn conv_values(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|g| match g {
                LayerGrad::Kernel(t) => t.len(),
                LayerGrad::Center(c) => c.materialized(),
                LayerGrad::Linear { .. } => 0,
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| match g {
            LayerGrad::Kernel(t) => t.all_finite(),
            LayerGrad::Center(c) => c.values.iter().all(|v| v.is_finite()),
            LayerGrad::Linear { weight, bias } => weight.all_finite() && bias.all_finite(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// He-normal conv kernels and a small random head; the conv tail and
    /// the whole head are trainable.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        Self::build(arch, |dims, fan_in| rng.normal_tensor(dims, (2.0 / fan_in as f64).sqrt()))
    }

    /// All parameters zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        Self::build(arch, |dims, _| Tensor4::zeros(dims))
    }

    fn build(arch: ArchSpec, mut init: impl FnMut([usize; 4], usize) -> Tensor4<T>) -> Result<Self> {
        arch.shapes()?;
        let tail = arch.tail_layers();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Conv {
                    filters,
                    channels,
                    kernel,
                    stride,
                    padding,
                } => Layer::Conv(ConvLayer {
                    geom: ConvGeometry::new(stride, padding),
                    kernel: ConvKernel::Dense(init(
                        [filters, channels, kernel, kernel],
                        channels * kernel * kernel,
                    )),
                    trainable: tail.contains(&i),
                }),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::AvgPool2 => Layer::AvgPool2,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => Layer::Linear(LinearLayer {
                    weight: init([out_features, in_features, 1, 1], in_features)
                        .scale(T::lit(0.5)),
                    bias: Tensor4::zeros([out_features, 1, 1, 1]),
                    offset: Tensor4::zeros([1, in_features, 1, 1]),
                    frozen_rows: 0,
                }),
            });
        }
        Ok(Model { arch, layers })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer<T> {
        &mut self.layers[i]
    }

    pub fn classes(&self) -> usize {
        self.head().map_or(0, |h| h.rows())
    }

    pub fn head(&self) -> Option<&LinearLayer<T>> {
        match self.layers.last() {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    pub fn head_mut(&mut self) -> Option<&mut LinearLayer<T>> {
        match self.layers.last_mut() {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    pub fn conv(&self, i: usize) -> Result<&ConvLayer<T>> {
        match self.layers.get(i) {
            Some(Layer::Conv(c)) => Ok(c),
            _ => Err(Error::arg(format!("layer {i} is not a conv layer"))),
        }
    }

    pub fn conv_mut(&mut self, i: usize) -> Result<&mut ConvLayer<T>> {
        match self.layers.get_mut(i) {
            Some(Layer::Conv(c)) => Ok(c),
            _ => Err(Error::arg(format!("layer {i} is not a conv layer"))),
        }
    }

    /// Marks exactly the given conv layers trainable.
    pub fn set_trainable_convs(&mut self, which: &[usize]) -> Result<()> {
        for &i in which {
            self.conv(i)?;
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv(c) = l {
                c.trainable = which.contains(&i);
            }
        }
        Ok(())
    }

    /// Freezes every parameter, including all head rows.
    pub fn freeze_all(&mut self) {
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => c.trainable = false,
                Layer::Linear(h) => h.frozen_rows = h.rows(),
                _ => {}
            }
        }
    }

    /// Appends `n_new` zero-initialized head rows and freezes the existing ones.
    pub fn expand_head(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(Error::arg("expand_head needs at least one new class"));
        }
        let head = self
            .head_mut()
            .ok_or_else(|| Error::State("model has no linear head".into()))?;
        let (rows, inf) = (head.rows(), head.in_features());
        let mut w = head.weight.data().to_vec();
        w.resize((rows + n_new) * inf, T::zero());
        let mut b = head.bias.data().to_vec();
        b.resize(rows + n_new, T::zero());
        head.weight = Tensor4::from_vec([rows + n_new, inf, 1, 1], w)?;
        head.bias = Tensor4::from_vec([rows + n_new, 1, 1, 1], b)?;
        head.frozen_rows = rows;
        if let Some(LayerSpec::Linear { out_features, .. }) = self.arch.layers.last_mut() {
            *out_features = rows + n_new;
        }
        Ok(())
    }

    /// Sets the head input offset, adjusting every bias so that logits are
    /// unchanged.
    pub fn set_head_offset(&mut self, offset: &Tensor4<T>) -> Result<()> {
        let head = self
            .head_mut()
            .ok_or_else(|| Error::State("model has no linear head".into()))?;
        let inf = head.in_features();
        offset.expect_dims([1, inf, 1, 1], "head offset")?;
        let shift = offset.sub(&head.offset)?;
        for o in 0..head.rows() {
            let w = &head.weight.data()[o * inf..(o + 1) * inf];
            let d = w.iter().zip(shift.data()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            head.bias.data_mut()[o] += d;
        }
        head.offset = offset.clone();
        Ok(())
    }

    /// Replaces the dense kernel of conv layer `i` by its decomposition.
    /// All channels start selected.
    pub fn decouple_layer(&mut self, i: usize) -> Result<()> {
        let conv = self.conv_mut(i)?;
        if let ConvKernel::Dense(w) = &conv.kernel {
            let dec = decouple(w, conv.geom)?.with_layer(i);
            let selection = ChannelSelection::all(i, dec.channels());
            conv.kernel = ConvKernel::Decoupled { dec, selection };
        }
        Ok(())
    }

    pub fn set_selection(&mut self, i: usize, selection: ChannelSelection) -> Result<()> {
        match &mut self.conv_mut(i)?.kernel {
            ConvKernel::Decoupled { dec, selection: s } => {
                if selection.channels() != dec.channels() {
                    return Err(Error::shape(format!(
                        "selection over {} channels for a layer with {}",
                        selection.channels(),
                        dec.channels()
                    )));
                }
                *s = selection;
                Ok(())
            }
            ConvKernel::Dense(_) => Err(Error::State(format!("layer {i} is not decoupled"))),
        }
    }

    pub fn decomposition(&self, i: usize) -> Result<&KernelDecomposition<T>> {
        match &self.conv(i)?.kernel {
            ConvKernel::Decoupled { dec, .. } => Ok(dec),
            ConvKernel::Dense(_) => Err(Error::State(format!("layer {i} is not decoupled"))),
        }
    }

    /// Fuses every decoupled layer back into a dense kernel.
    pub fn fuse_all(&mut self) -> Result<()> {
        for l in &mut self.layers {
            if let Layer::Conv(c) = l {
                if let ConvKernel::Decoupled { dec, .. } = &c.kernel {
                    c.kernel = ConvKernel::Dense(fuse(dec)?);
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.run(x, true)
    }

    /// Forward pass without keeping the cache.
    pub fn logits(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let [nb, k, _, _] = logits.dims();
        Ok((0..nb)
            .map(|b| {
                let row = &logits.data()[b * k..(b + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn run(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.arch.input {
            return Err(Error::shape(format!(
                "input {:?} does not match architecture input {:?}",
                [c, h, w],
                self.arch.input
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::new(),
            branches: Vec::new(),
        };
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, branch) = match layer {
                Layer::Conv(conv) => match &conv.kernel {
                    ConvKernel::Dense(wt) => (conv2d_forward(&cur, wt, conv.geom)?, None),
                    ConvKernel::Decoupled { dec, .. } => {
                        let (y, b) = decoupled_forward(&cur, dec)?;
                        (y, Some(b))
                    }
                },
                Layer::Relu => (cur.map(|v| v.max(T::zero())), None),
                Layer::AvgPool2 => (avgpool2_forward(&cur), None),
                Layer::Flatten => {
                    let [b, c, h, w] = cur.dims();
                    (cur.clone().reshape([b, c * h * w, 1, 1])?, None)
                }
                Layer::Linear(lin) => (linear_forward(&cur, lin)?, None),
            };
            if keep {
                cache.inputs.push(cur);
                cache.branches.push(branch);
            }
            cur = next;
        }
        Ok((cur, cache))
    }

    /// Gradients of the loss with respect to every unfrozen parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, glogits: &Tensor4<T>) -> Result<ParamGrads<T>> {
        let n = self.layers.len();
        if cache.inputs.len() != n {
            return Err(Error::shape(format!(
                "cache holds {} layer inputs, model has {n} layers",
                cache.inputs.len()
            )));
        }
        let mut grads = ParamGrads {
            layers: vec![None; n],
        };
        let Some(first) = self.layers.iter().position(Layer::has_trainable_params) else {
            return Ok(grads);
        };
        let batch = cache.inputs[0].dims()[0];
        let out_dims = [batch, self.classes(), 1, 1];
        glogits.expect_dims(out_dims, "backward logits gradient")?;
        let mut g = glogits.clone();
        for i in (first..n).rev() {
            let x = &cache.inputs[i];
            let need_input_grad = i > first;
            match &self.layers[i] {
                Layer::Conv(conv) => match &conv.kernel {
                    ConvKernel::Dense(w) => {
                        if conv.trainable {
                            grads.layers[i] = Some(LayerGrad::Kernel(conv2d_backward_weight(
                                x,
                                w.dims(),
                                &g,
                                conv.geom,
                            )?));
                        }
                        if need_input_grad {
                            g = conv2d_backward_input(x.dims(), w, &g, conv.geom)?;
                        }
                    }
                    ConvKernel::Decoupled { dec, selection } => {
                        if conv.trainable {
                            let branch = cache.branches[i]
                                .as_ref()
                                .ok_or_else(|| Error::shape(format!("layer {i}: no branch cache")))?;
                            grads.layers[i] = Some(LayerGrad::Center(center_backward_compact(
                                branch, &g, selection,
                            )?));
                        }
                        if need_input_grad {
                            g = decoupled_backward_input(x.dims(), dec, &g)?;
                        }
                    }
                },
                Layer::Relu => {
                    g = x.zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                }
                Layer::AvgPool2 => {
                    g = avgpool2_backward(x.dims(), &g)?;
                }
                Layer::Flatten => {
                    g = g.reshape(x.dims())?;
                }
                Layer::Linear(lin) => {
                    let (gw, gb, gx) = linear_backward(x, lin, &g, need_input_grad)?;
                    if lin.is_trainable() {
                        grads.layers[i] = Some(LayerGrad::Linear { weight: gw, bias: gb });
                    }
                    if let Some(gx) = gx {
                        g = gx;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Writes `arch.cfg` plus one TSR file per parameter tensor.
    /// Decoupled layers are stored fused.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = self.arch.to_kv();
        if let Some(h) = self.head() {
            kv.insert("head_frozen_rows", h.frozen_rows);
        }
        let trainable: Vec<String> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(c) if c.trainable))
            .map(|(i, _)| i.to_string())
            .collect();
        kv.insert("trainable_convs", trainable.join(","));
        let cfg = dir.join("arch.cfg");
        fs::write(&cfg, kv.render()).map_err(|e| Error::io(&cfg, e))?;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    tsr::write_tensor(dir.join(format!("layer{i:03}_weight.tsr")), &c.dense_weight()?)?
                }
                Layer::Linear(h) => {
                    tsr::write_tensor(dir.join(format!("layer{i:03}_weight.tsr")), &h.weight)?;
                    tsr::write_tensor(dir.join(format!("layer{i:03}_bias.tsr")), &h.bias)?;
                    tsr::write_tensor(dir.join(format!("layer{i:03}_offset.tsr")), &h.offset)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = dir.join("arch.cfg");
        let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let kv = KvFile::parse(&text)?;
        let arch = ArchSpec::from_kv(&kv)?;
        let mut model = Self::zeros(arch)?;
        if let Some(list) = kv.get("trainable_convs") {
            let which = if list.is_empty() {
                Vec::new()
            } else {
                parse_list::<usize>("trainable_convs", list)?
            };
            model.set_trainable_convs(&which)?;
        }
        let frozen: usize = kv.parse_or("head_frozen_rows", 0)?;
        for (i, l) in model.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv(c) => {
                    let w: Tensor4<T> = tsr::read_tensor(dir.join(format!("layer{i:03}_weight.tsr")))?;
                    let want = c.dense_weight()?.dims();
                    if w.dims() != want {
                        return Err(Error::Format(format!("layer {i}: weight dims {:?}, arch says {want:?}", w.dims())));
                    }
                    c.kernel = ConvKernel::Dense(w);
                }
                Layer::Linear(h) => {
                    let w: Tensor4<T> = tsr::read_tensor(dir.join(format!("layer{i:03}_weight.tsr")))?;
                    let b: Tensor4<T> = tsr::read_tensor(dir.join(format!("layer{i:03}_bias.tsr")))?;
                    if w.dims() != h.weight.dims() || b.len() != h.bias.len() {
                        return Err(Error::Format(format!("layer {i}: head dims do not match arch")));
                    }
                    let off_path = dir.join(format!("layer{i:03}_offset.tsr"));
                    if off_path.exists() {
                        let off: Tensor4<T> = tsr::read_tensor(&off_path)?;
                        if off.len() != h.in_features() {
                            return Err(Error::Format(format!("layer {i}: head offset length {}", off.len())));
                        }
                        h.offset = off.reshape(h.offset.dims())?;
                    }
                    h.weight = w;
                    h.bias = b.reshape(h.bias.dims())?;
                    h.frozen_rows = frozen.min(h.rows());
                }
                _ => {}
            }
        }
        Ok(model)
    }
}

fn avgpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x.dims();
    let quarter = T::lit(0.25);
    Tensor4::from_fn([b, c, h / 2, w / 2], |[n, k, u, v]| {
        let (r, q) = (2 * u, 2 * v);
        (x.at([n, k, r, q]) + x.at([n, k, r, q + 1]) + x.at([n, k, r + 1, q]) + x.at([n, k, r + 1, q + 1]))
            * quarter
    })
}

fn avgpool2_backward<T: Scalar>(x_dims: [usize; 4], g: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x_dims;
    g.expect_dims([b, c, h / 2, w / 2], "avgpool2 backward")?;
    let quarter = T::lit(0.25);
    Ok(Tensor4::from_fn(x_dims, |[n, k, r, q]| {
        if r / 2 < h / 2 && q / 2 < w / 2 {
            g.at([n, k, r / 2, q / 2]) * quarter
        } else {
            T::zero()
        }
    }))
}

fn linear_forward<T: Scalar>(x: &Tensor4<T>, lin: &LinearLayer<T>) -> Result<Tensor4<T>> {
    let [nb, f, h, w] = x.dims();
    let (rows, inf) = (lin.rows(), lin.in_features());
    if f * h * w != inf {
        return Err(Error::shape(format!("linear expects {inf} features, got {}", f * h * w)));
    }
    let (xs, ws, bs, mu) = (x.data(), lin.weight.data(), lin.bias.data(), lin.offset.data());
    let mut y = Vec::with_capacity(nb * rows);
    let mut xc = vec![T::zero(); inf];
    for b in 0..nb {
        for (k, v) in xc.iter_mut().enumerate() {
            *v = xs[b * inf + k] - mu[k];
        }
        for o in 0..rows {
            let wr = &ws[o * inf..(o + 1) * inf];
            let mut acc = T::zero();
            for k in 0..inf {
                acc += wr[k] * xc[k];
            }
            y.push(acc + bs[o]);
        }
    }
    Tensor4::from_vec([nb, rows, 1, 1], y)
}

type LinearGrads<T> = (Tensor4<T>, Tensor4<T>, Option<Tensor4<T>>);

fn linear_backward<T: Scalar>(
    x: &Tensor4<T>,
    lin: &LinearLayer<T>,
    g: &Tensor4<T>,
    need_input: bool,
) -> Result<LinearGrads<T>> {
    let nb = x.dims()[0];
    let (rows, inf) = (lin.rows(), lin.in_features());
    g.expect_dims([nb, rows, 1, 1], "linear backward")?;
    let (xs, gs, ws, mu) = (x.data(), g.data(), lin.weight.data(), lin.offset.data());
    let mut gw = vec![T::zero(); rows * inf];
    let mut gb = vec![T::zero(); rows];
    for o in lin.frozen_rows..rows {
        let row = &mut gw[o * inf..(o + 1) * inf];
        for b in 0..nb {
            let go = gs[b * rows + o];
            gb[o] += go;
            let xr = &xs[b * inf..(b + 1) * inf];
            for k in 0..inf {
                row[k] += go * (xr[k] - mu[k]);
            }
        }
    }
    let gx = if need_input {
        let mut gx = vec![T::zero(); nb * inf];
        for b in 0..nb {
            let out = &mut gx[b * inf..(b + 1) * inf];
            for o in 0..rows {
                let go = gs[b * rows + o];
                let wr = &ws[o * inf..(o + 1) * inf];
                for k in 0..inf {
                    out[k] += wr[k] * go;
                }
            }
        }
        Some(Tensor4::from_vec(x.dims(), gx)?)
    } else {
        None
    };
    Ok((
        Tensor4::from_vec([rows, inf, 1, 1], gw)?,
        Tensor4::from_vec([rows, 1, 1, 1], gb)?,
        gx,
    ))
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/B`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(T, Tensor4<T>)> {
    let [nb, k, _, _] = logits.dims();
    if labels.len() != nb {
        return Err(Error::shape(format!("{} labels for batch of {nb}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
    }
    if nb == 0 {
        return Err(Error::arg("empty batch"));
    }
    let inv_b = T::one() / T::from_usize_lossy(nb);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(nb * k);
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_b);
        }
    }
    Ok((loss * inv_b, Tensor4::from_vec([nb, k, 1, 1], grad)?))
}

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("adam: non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr_t, eps, decay) = (T::lit(lr), T::lit(cfg.eps), T::lit(lr * cfg.weight_decay));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - decay * params[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over the unfrozen parameters of a [`Model`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub cfg: AdamConfig,
    states: HashMap<(usize, u8), AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer {
            cfg,
            states: HashMap::new(),
        }
    }

    fn state(&mut self, key: (usize, u8), len: usize) -> Result<&mut AdamState<T>> {
        let s = self.states.entry(key).or_insert_with(|| AdamState::new(len));
        if s.m.len() != len {
            return Err(Error::shape(format!(
                "optimizer state for layer {} holds {} values, parameters have {len}",
                key.0,
                s.m.len()
            )));
        }
        Ok(s)
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        let cfg = self.cfg;
        for (i, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            match (model.layers.get_mut(i), g) {
                (Some(Layer::Conv(conv)), LayerGrad::Kernel(gw)) if conv.trainable => {
                    let ConvKernel::Dense(w) = &mut conv.kernel else {
                        return Err(Error::State(format!("layer {i}: dense gradient for decoupled kernel")));
                    };
                    let st = self.state((i, 0), w.len())?;
                    adam_step(w.data_mut(), gw.data(), st, lr, &cfg)?;
                }
                (Some(Layer::Conv(conv)), LayerGrad::Center(cg)) if conv.trainable => {
                    let ConvKernel::Decoupled { dec, .. } = &mut conv.kernel else {
                        return Err(Error::State(format!("layer {i}: center gradient for dense kernel")));
                    };
                    let nc = dec.channels();
                    let idx: Vec<usize> = (0..cg.filters)
                        .flat_map(|d| cg.selected.iter().map(move |&c| d * nc + c))
                        .collect();
                    let alpha = dec.w_alpha_mut().data_mut();
                    let mut packed: Vec<T> = idx.iter().map(|&k| alpha[k]).collect();
                    let st = self.state((i, 1), packed.len())?;
                    adam_step(&mut packed, &cg.values, st, lr, &cfg)?;
                    for (&k, v) in idx.iter().zip(packed) {
                        alpha[k] = v;
                    }
                }
                (Some(Layer::Linear(h)), LayerGrad::Linear { weight, bias }) => {
                    let (fr, inf) = (h.frozen_rows, h.in_features());
                    let st = self.state((i, 2), (h.rows() - fr) * inf)?;
                    adam_step(&mut h.weight.data_mut()[fr * inf..], &weight.data()[fr * inf..], st, lr, &cfg)?;
                    let st = self.state((i, 3), h.rows() - fr)?;
                    adam_step(&mut h.bias.data_mut()[fr..], &bias.data()[fr..], st, lr, &cfg)?;
                }
                _ => {
                    return Err(Error::State(format!(
                        "layer {i}: gradient does not match a trainable parameter"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Step schedule: `lr · 0.1^(epoch / every)`.
pub fn step_decay_lr(base: f64, epoch: usize, every: usize) -> f64 {
    base * 0.1f64.powi((epoch / every.max(1)) as i32)
}
