//! End-to-end acceptance checks, one line of output per criterion.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{central_diff, direct_conv, rel_err};
use csko_core::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
use csko_core::cost::{training_memory, CostArch, TrainMode};
use csko_core::csko::{center_backward, center_index, decouple, decoupled_backward_input, decoupled_forward, fuse};
use csko_core::dces::{channel_sensitivity, ChannelSelection};
use csko_core::harness::{average_accuracy, run_experiment, Mode, RunConfig, RunMetrics};
use csko_core::intensity::{position_amplitude, position_sensitivity};
use csko_core::net::{cross_entropy, ArchSpec, Batch, ConvKernel, LayerGrad, LayerSpec, Model};
use csko_core::ogp::{compute_null_space, project_gradient, FeatureCovariance};
use csko_core::rng::SeededRng;
use csko_core::Tensor4;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    check(t < limit, format!("took {t:?}, limit {limit:?}"))?;
    Ok(t)
}

fn conv(filters: usize, channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        channels,
        kernel,
        stride,
        padding: (kernel - 1) / 2,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(11);
    for case in 0..100 {
        let k = if case % 2 == 0 { 3 } else { 5 };
        let dims = [1 + rng.below(6), 1 + rng.below(6), k, k];
        let w: Tensor4<f64> = rng.normal_tensor(dims, 1.0);
        let stride = 1 + rng.below(2);
        let dec = decouple(&w, ConvGeometry::new(stride, (k - 1) / 2)).map_err(|e| e.to_string())?;
        let back = fuse(&dec).map_err(|e| e.to_string())?;
        let same = back.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, format!("case {case}: fused kernel differs"))?;
    }
    let t = within(start, Duration::from_secs(1))?;
    Ok(format!("100 kernels, K in {{3,5}}, bit-exact ({t:.1?})"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(22);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let k = [3, 5][case % 2];
        let stride = 1 + (case / 2) % 2;
        let xd = [1 + rng.below(2), 1 + rng.below(4), 5 + rng.below(5), 5 + rng.below(5)];
        let x: Tensor4<f64> = rng.normal_tensor(xd, 1.0);
        let wd = [1 + rng.below(4), xd[1], k, k];
        let w: Tensor4<f64> = rng.normal_tensor(wd, 1.0);
        let geom = ConvGeometry::new(stride, (k - 1) / 2);
        let oracle = direct_conv(&x, &w, stride, (k - 1) / 2);

        let dec = decouple(&w, geom).map_err(|e| e.to_string())?;
        let (y, _) = decoupled_forward(&x, &dec).map_err(|e| e.to_string())?;
        let mono = conv2d_forward(&x, &w, geom).map_err(|e| e.to_string())?;
        worst64 = worst64
            .max(rel_err(y.data(), oracle.data(), 1e-300))
            .max(rel_err(mono.data(), oracle.data(), 1e-300));

        let (x32, w32) = (x.cast::<f32>(), w.cast::<f32>());
        let oracle32 = direct_conv(&x32.cast(), &w32.cast(), stride, (k - 1) / 2);
        let dec32 = decouple(&w32, geom).map_err(|e| e.to_string())?;
        let (y32, _) = decoupled_forward(&x32, &dec32).map_err(|e| e.to_string())?;
        worst32 = worst32.max(rel_err(&common::to_f64(y32.data()), oracle32.data(), 1e-30));
    }
    check(worst64 <= 1e-6, format!("double rel err {worst64:e}"))?;
    check(worst32 <= 1e-5, format!("single rel err {worst32:e}"))?;
    let t = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "50 cases, strides {{1,2}}: rel err {worst64:.1e} (f64), {worst32:.1e} (f32) ({t:.1?})"
    ))
}

/// Reads or writes one scalar parameter of a model.
#[derive(Clone, Copy)]
enum Param {
    Dense(usize, usize),
    Alpha(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

fn param_slot(model: &mut Model<f64>, p: Param) -> &mut f64 {
    match p {
        Param::Dense(l, i) => match &mut model.conv_mut(l).unwrap().kernel {
            ConvKernel::Dense(w) => &mut w.data_mut()[i],
            ConvKernel::Decoupled { .. } => panic!("layer {l} is decoupled"),
        },
        Param::Alpha(l, i) => match &mut model.conv_mut(l).unwrap().kernel {
            ConvKernel::Decoupled { dec, .. } => &mut dec.w_alpha_mut().data_mut()[i],
            ConvKernel::Dense(_) => panic!("layer {l} is dense"),
        },
        Param::HeadWeight(i) => &mut model.head_mut().unwrap().weight.data_mut()[i],
        Param::HeadBias(i) => &mut model.head_mut().unwrap().bias.data_mut()[i],
    }
}

fn batch_loss(model: &Model<f64>, batch: &Batch<f64>) -> f64 {
    let logits = model.logits(&batch.x).unwrap();
    cross_entropy(&logits, &batch.labels).unwrap().0
}

/// Finite-difference derivative of the batch loss in each listed parameter.
fn fd_params(model: &Model<f64>, batch: &Batch<f64>, params: &[Param]) -> Vec<f64> {
    let mut probe = model.clone();
    let start: Vec<f64> = params.iter().map(|&p| *param_slot(&mut probe, p)).collect();
    let mut cur = start.clone();
    central_diff(&start, 1e-6, |v| {
        for (i, (&p, &x)) in params.iter().zip(v).enumerate() {
            if cur[i] != x {
                *param_slot(&mut probe, p) = x;
                cur[i] = x;
            }
        }
        batch_loss(&probe, batch)
    })
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(33);
    let mut worst_slice = 0.0f64;
    let mut worst_fd = 0.0f64;
    for case in 0..12 {
        let k = [3, 5][case % 2];
        let stride = 1 + (case / 2) % 2;
        let pad = (k - 1) / 2;
        let geom = ConvGeometry::new(stride, pad);
        let x: Tensor4<f64> = rng.normal_tensor([2, 3, 6, 7], 1.0);
        let w: Tensor4<f64> = rng.normal_tensor([2, 3, k, k], 1.0);
        let y = direct_conv(&x, &w, stride, pad);
        let gy: Tensor4<f64> = rng.normal_tensor(y.dims(), 1.0);
        let loss_w = |v: &[f64]| {
            let wv = Tensor4::from_vec(w.dims(), v.to_vec()).unwrap();
            direct_conv(&x, &wv, stride, pad).dot(&gy).unwrap()
        };
        let loss_x = |v: &[f64]| {
            let xv = Tensor4::from_vec(x.dims(), v.to_vec()).unwrap();
            direct_conv(&xv, &w, stride, pad).dot(&gy).unwrap()
        };
        let fd_w = central_diff(w.data(), 1e-5, loss_w);
        let fd_x = central_diff(x.data(), 1e-5, loss_x);
        let gw = conv2d_backward_weight(&x, w.dims(), &gy, geom).map_err(|e| e.to_string())?;
        let gx = conv2d_backward_input(x.dims(), &w, &gy, geom).map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(rel_err(gw.data(), &fd_w, 1e-12)).max(rel_err(gx.data(), &fd_x, 1e-12));

        let dec = decouple(&w, geom).map_err(|e| e.to_string())?;
        let (_, cache) = decoupled_forward(&x, &dec).map_err(|e| e.to_string())?;
        let all = ChannelSelection::all(0, 3);
        let ga = center_backward(&cache, &gy, &all).map_err(|e| e.to_string())?;
        let m = center_index(k);
        let mut slice = Vec::new();
        let mut fd_center = Vec::new();
        for d in 0..2 {
            for c in 0..3 {
                slice.push(gw.at([d, c, m, m]));
                fd_center.push(fd_w[((d * 3 + c) * k + m) * k + m]);
            }
        }
        worst_slice = worst_slice.max(rel_err(ga.data(), &slice, 1e-12));
        worst_fd = worst_fd.max(rel_err(ga.data(), &fd_center, 1e-12));
        let gxd = decoupled_backward_input(x.dims(), &dec, &gy).map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(rel_err(gxd.data(), &fd_x, 1e-12));
    }

    // Whole network: dense, decoupled (partial selection, stride 2) and head.
    let arch = ArchSpec {
        input: [2, 6, 6],
        layers: vec![
            conv(4, 2, 3, 1),
            LayerSpec::Relu,
            LayerSpec::AvgPool2,
            conv(4, 4, 3, 1),
            LayerSpec::Relu,
            conv(3, 4, 3, 2),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 12,
                out_features: 3,
            },
        ],
        trainable_tail: 3,
    };
    let mut model: Model<f64> = Model::new(arch, 5).map_err(|e| e.to_string())?;
    model.decouple_layer(3).map_err(|e| e.to_string())?;
    model.decouple_layer(5).map_err(|e| e.to_string())?;
    model
        .set_selection(3, ChannelSelection::from_indices(3, 4, vec![0, 2]).unwrap())
        .map_err(|e| e.to_string())?;
    model.expand_head(2).map_err(|e| e.to_string())?;
    let batch = Batch {
        x: rng.normal_tensor([3, 2, 6, 6], 1.0),
        labels: vec![4, 1, 3],
    };
    let (logits, cache) = model.forward(&batch.x).map_err(|e| e.to_string())?;
    let (_, gl) = cross_entropy(&logits, &batch.labels).map_err(|e| e.to_string())?;
    let grads = model.backward(&cache, &gl).map_err(|e| e.to_string())?;

    let Some(LayerGrad::Kernel(g0)) = grads.get(0) else {
        return Err("no dense gradient for layer 0".into());
    };
    let fd = fd_params(&model, &batch, &(0..g0.len()).map(|i| Param::Dense(0, i)).collect::<Vec<_>>());
    worst_fd = worst_fd.max(rel_err(g0.data(), &fd, 1e-12));
    for (layer, sel, nc) in [(3usize, vec![0usize, 2], 4usize), (5, vec![0, 1, 2, 3], 4)] {
        let Some(LayerGrad::Center(g)) = grads.get(layer) else {
            return Err(format!("no center gradient for layer {layer}"));
        };
        let nd = g.filters;
        let params: Vec<Param> = (0..nd)
            .flat_map(|d| sel.iter().map(move |&c| Param::Alpha(layer, d * nc + c)))
            .collect();
        let fd = fd_params(&model, &batch, &params);
        worst_fd = worst_fd.max(rel_err(&g.values, &fd, 1e-12));
    }
    let Some(LayerGrad::Linear { weight, bias }) = grads.get(8) else {
        return Err("no head gradient".into());
    };
    check(
        weight.data()[..3 * 12].iter().all(|&v| v == 0.0) && bias.data()[..3].iter().all(|&v| v == 0.0),
        "frozen head rows received gradient",
    )?;
    let fd_w = fd_params(&model, &batch, &(36..60).map(Param::HeadWeight).collect::<Vec<_>>());
    let fd_b = fd_params(&model, &batch, &(3..5).map(Param::HeadBias).collect::<Vec<_>>());
    worst_fd = worst_fd
        .max(rel_err(&weight.data()[36..], &fd_w, 1e-12))
        .max(rel_err(&bias.data()[3..], &fd_b, 1e-12));

    check(worst_slice <= 1e-12, format!("center slice rel err {worst_slice:e}"))?;
    check(worst_fd <= 1e-6, format!("finite-difference rel err {worst_fd:e}"))?;
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!(
        "center grad = kernel-grad slice (rel {worst_slice:.1e}); all gradients vs central differences rel {worst_fd:.1e} ({t:.1?})"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = SeededRng::new(44);
    let arch = ArchSpec {
        input: [2, 5, 5],
        layers: vec![
            conv(3, 2, 3, 1),
            LayerSpec::Relu,
            conv(2, 3, 3, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 50,
                out_features: 3,
            },
        ],
        trainable_tail: 2,
    };
    let model: Model<f64> = Model::new(arch, 4).map_err(|e| e.to_string())?;
    let batches: Vec<Batch<f64>> = (0..2)
        .map(|_| Batch {
            x: rng.normal_tensor([4, 2, 5, 5], 1.0),
            labels: (0..4).map(|_| rng.below(3)).collect(),
        })
        .collect();

    // Sensitivity: per-element finite differences, |·| summed over batches.
    let maps = position_sensitivity(&model, &batches, &[0, 2]).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for (map, (layer, nd, nc)) in maps.iter().zip([(0usize, 3usize, 2usize), (2, 2, 3)]) {
        let params: Vec<Param> = (0..nd * nc * 9).map(|i| Param::Dense(layer, i)).collect();
        let mut oracle = [0.0f64; 9];
        for b in &batches {
            for (i, g) in fd_params(&model, b, &params).into_iter().enumerate() {
                oracle[i % 9] += g.abs();
            }
        }
        worst = worst.max(rel_err(&map.raw, &oracle, 1e-300));
        worst_sum = worst_sum.max((map.normalized.iter().sum::<f64>() - 1.0).abs());
    }

    // Amplitude: direct summation of |W| per position.
    let amp = position_amplitude(&model, &[0, 2]).map_err(|e| e.to_string())?;
    for map in &amp {
        let w = model.conv(map.layer).unwrap().dense_weight().unwrap();
        let mut oracle = [0.0f64; 9];
        for (i, v) in w.data().iter().enumerate() {
            oracle[i % 9] += v.abs();
        }
        worst = worst.max(rel_err(&map.raw, &oracle, 1e-300));
        worst_sum = worst_sum.max((map.normalized.iter().sum::<f64>() - 1.0).abs());
    }

    // Channel scores: finite-difference center gradients, Σ_d |g·w|.
    let mut dmodel = model.clone();
    dmodel.decouple_layer(2).map_err(|e| e.to_string())?;
    let mut accum = Tensor4::zeros([2, 3, 1, 1]);
    for b in &batches {
        let (logits, cache) = dmodel.forward(&b.x).map_err(|e| e.to_string())?;
        let (_, gl) = cross_entropy(&logits, &b.labels).map_err(|e| e.to_string())?;
        let grads = dmodel.backward(&cache, &gl).map_err(|e| e.to_string())?;
        let Some(LayerGrad::Center(g)) = grads.get(2) else {
            return Err("no center gradient".into());
        };
        accum.add_assign(&g.to_dense()).map_err(|e| e.to_string())?;
    }
    let score = channel_sensitivity(dmodel.decomposition(2).unwrap(), &accum).map_err(|e| e.to_string())?;
    let params: Vec<Param> = (0..6).map(|i| Param::Alpha(2, i)).collect();
    let mut g_fd = [0.0f64; 6];
    for b in &batches {
        for (i, g) in fd_params(&dmodel, b, &params).into_iter().enumerate() {
            g_fd[i] += g;
        }
    }
    let wa = dmodel.decomposition(2).unwrap().w_alpha().data().to_vec();
    let oracle: Vec<f64> = (0..3)
        .map(|c| (0..2).map(|d| (g_fd[d * 3 + c] * wa[d * 3 + c]).abs()).sum())
        .collect();
    worst = worst.max(rel_err(&score.scores, &oracle, 1e-300));

    check(worst <= 1e-6, format!("oracle rel err {worst:e}"))?;
    check(worst_sum <= 1e-6, format!("normalized map sums off by {worst_sum:e}"))?;
    Ok(format!(
        "sensitivity, amplitude and channel scores match brute force (rel {worst:.1e}); maps sum to 1 within {worst_sum:.1e}"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = SeededRng::new(55);
    // Features confined to a 3-dimensional subspace of R^8.
    let basis: Tensor4<f64> = rng.normal_tensor([1, 8, 3, 1], 1.0);
    let n = 40;
    let mut feats = Tensor4::zeros([n, 8, 1, 1]);
    for s in 0..n {
        let z = [rng.normal(), rng.normal(), rng.normal()];
        for c in 0..8 {
            let v = (0..3).map(|j| basis.at([0, c, j, 0]) * z[j]).sum();
            feats.set([s, c, 0, 0], v);
        }
    }
    let mut cov = FeatureCovariance::new(0, 8);
    cov.accumulate(&feats).map_err(|e| e.to_string())?;
    let all = ChannelSelection::all(0, 8);
    let ns = compute_null_space(&cov, &all, 1.0).map_err(|e| e.to_string())?;
    check(ns.rank() == 5, format!("null space rank {}, expected 5", ns.rank()))?;

    let one = ConvGeometry::new(1, 0);
    let w: Tensor4<f64> = rng.normal_tensor([4, 8, 1, 1], 1.0);
    let g: Tensor4<f64> = rng.normal_tensor([4, 8, 1, 1], 1.0);
    let base = conv2d_forward(&feats, &w, one).map_err(|e| e.to_string())?;
    let response_change = |delta: &Tensor4<f64>| {
        let moved = conv2d_forward(&feats, &w.add(delta).unwrap(), one).unwrap();
        moved.sub(&base).unwrap().norm() / base.norm()
    };
    let step = |d: &Tensor4<f64>| d.scale(-0.1 * w.norm() / d.norm());
    let pg = project_gradient(&g, &ns).map_err(|e| e.to_string())?;
    let projected = response_change(&step(&pg));
    let unprojected = response_change(&step(&g));
    check(projected <= 1e-5, format!("projected update moved responses by {projected:e}"))?;
    check(unprojected >= 1e-2, format!("unprojected update moved responses by only {unprojected:e}"))?;

    let mut worst_idem = 0.0f64;
    for case in 0..100 {
        let c = 2 + rng.below(10);
        let rank = 1 + rng.below(c);
        let mixing: Tensor4<f64> = rng.normal_tensor([1, c, rank, 1], 1.0);
        let mut x = Tensor4::zeros([3 * c, c, 1, 1]);
        for s in 0..3 * c {
            let z: Vec<f64> = (0..rank).map(|_| rng.normal()).collect();
            for ch in 0..c {
                x.set([s, ch, 0, 0], (0..rank).map(|j| mixing.at([0, ch, j, 0]) * z[j]).sum());
            }
        }
        let mut cov = FeatureCovariance::new(0, c);
        cov.accumulate(&x).map_err(|e| e.to_string())?;
        let sel = if case % 2 == 0 {
            ChannelSelection::all(0, c)
        } else {
            let keep: Vec<usize> = (0..c).filter(|i| i % 2 == 0).collect();
            ChannelSelection::from_indices(0, c, keep).unwrap()
        };
        let rho = [1.0, 0.97, 0.9][case % 3];
        let ns = compute_null_space(&cov, &sel, rho).map_err(|e| e.to_string())?;
        let nd = 1 + rng.below(3);
        let g: Tensor4<f64> = rng.normal_tensor([nd, c, 1, 1], 1.0);
        let p1 = project_gradient(&g, &ns).map_err(|e| e.to_string())?;
        let p2 = project_gradient(&p1, &ns).map_err(|e| e.to_string())?;
        worst_idem = worst_idem.max(p2.sub(&p1).unwrap().norm() / g.norm());
        check(p1.norm() <= g.norm() * (1.0 + 1e-12), format!("case {case}: projection grew the gradient"))?;
    }
    check(worst_idem <= 1e-10, format!("idempotence error {worst_idem:e}"))?;
    Ok(format!(
        "rank-3 features: projected change {projected:.1e}, unprojected {unprojected:.1e}; 100 cases idempotent ({worst_idem:.1e}) and contracting"
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let arch = CostArch::resnet18(100);
    let full = training_memory(&arch, 32, TrainMode::Full, None).map_err(|e| e.to_string())?;
    let center = training_memory(&arch, 32, TrainMode::CsksCdm, None).map_err(|e| e.to_string())?;
    let csks = training_memory(&arch, 32, TrainMode::Csks, None).map_err(|e| e.to_string())?;
    let dces = training_memory(&arch, 32, TrainMode::Dces(0.5), None).map_err(|e| e.to_string())?;
    let hand = 2 * 512 * 512 * 9 * 4u64;
    check(full.total.trainable_weight_bytes == hand, "full trainable bytes")?;
    check(full.total.gradient_bytes == hand, "full gradient bytes")?;
    let full_mb = full.total.gradient_bytes as f64 / 1e6;
    check((full_mb - 18.20).abs() / 18.20 <= 0.05, format!("full {full_mb} MB vs 18.20"))?;
    check(center.total.gradient_bytes * 9 == hand, "center-only bytes are not full/9")?;
    check(center.total.trainable_weight_bytes * 9 == hand, "center-only trainable bytes are not full/9")?;
    let center_mb = center.total.gradient_bytes as f64 / 1e6;
    check((center_mb - 2.20).abs() / 2.20 <= 0.05, format!("center {center_mb} MB vs 2.20"))?;
    check(
        full.total.ogp_workspace_bytes == 81 * csks.total.ogp_workspace_bytes,
        "full/csks workspace ratio is not 81",
    )?;
    check(
        csks.total.ogp_workspace_bytes == 4 * dces.total.ogp_workspace_bytes,
        "csks/dces(0.5) workspace ratio is not 4",
    )?;
    for l in &full.layers {
        let want = if l.trainable { 2 * l.forward_flops } else { 0 };
        check(l.backward_flops == want, format!("{}: backward FLOPs", l.name))?;
    }
    let n = arch.convs.len();
    let all = training_memory(&arch.clone().with_tail(n), 8, TrainMode::Full, None).map_err(|e| e.to_string())?;
    check(all.total.backward_flops == 2 * all.total.forward_flops, "fully trainable ratio")?;
    for r in [2usize, 4] {
        let patched = training_memory(&arch, 32, TrainMode::Full, Some(r)).map_err(|e| e.to_string())?;
        check(
            patched.total.activation_bytes * (r * r) as f64 == full.total.activation_bytes,
            format!("activation bytes not {}-fold smaller", r * r),
        )?;
    }
    let t = within(start, Duration::from_secs(1))?;
    Ok(format!(
        "ResNet-18 tail: {full_mb:.2} MB full, {center_mb:.2} MB center-only; workspace ratios 81 and 4; backward = 2x forward; r^2 activation scaling ({t:.1?})"
    ))
}

fn run_mode(mode: Mode, out: &Path) -> Result<(RunMetrics, Duration), String> {
    let cfg = RunConfig {
        mode,
        out_dir: out.to_path_buf(),
        seed: 0,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let m = run_experiment(&cfg).map_err(|e| format!("{mode} run failed: {e}"))?;
    Ok((m, start.elapsed()))
}

fn files_identical(a: &Path, b: &Path) -> Result<(), String> {
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap();
        if name == "run.cfg" {
            continue;
        }
        let other = b.join(name);
        if path.is_dir() {
            files_identical(&path, &other)?;
        } else {
            let same = fs::read(&path).ok() == fs::read(&other).ok();
            check(same, format!("{} differs between reruns", path.display()))?;
        }
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (naive, t_naive) = run_mode(Mode::Naive, &dir.path().join("naive"))?;
    let (csko, t_csko) = run_mode(Mode::Csko, &dir.path().join("csko"))?;
    let a_naive = average_accuracy(&naive).map_err(|e| e.to_string())?;
    let a_csko = average_accuracy(&csko).map_err(|e| e.to_string())?;
    let own = csko.own_accuracy();
    check(
        a_csko - a_naive >= 0.10,
        format!("csko {a_csko:.3} vs naive {a_naive:.3}: gap below 10 points"),
    )?;
    let worst_own = own.iter().copied().fold(f64::INFINITY, f64::min);
    check(worst_own >= 0.80, format!("own-task accuracies {own:?}"))?;
    let limit = Duration::from_secs(300);
    check(t_naive < limit && t_csko < limit, format!("runs took {t_naive:?} / {t_csko:?}"))?;
    run_mode(Mode::Csko, &dir.path().join("again"))?;
    files_identical(&dir.path().join("csko"), &dir.path().join("again"))?;
    Ok(format!(
        "average accuracy csko {a_csko:.3} vs naive {a_naive:.3}; min own-task {worst_own:.3}; runs {:.1}s / {:.1}s; rerun byte-identical",
        t_csko.as_secs_f64(),
        t_naive.as_secs_f64()
    ))
}

fn criterion_8() -> Outcome {
    let mut rng = SeededRng::new(88);
    let mut ratios = Vec::new();
    for c in [32usize, 33, 64] {
        let x: Tensor4<f32> = rng.normal_tensor([4, c, 3, 3], 1.0);
        let mut cov = FeatureCovariance::new(0, c);
        cov.accumulate(&x).map_err(|e| e.to_string())?;
        let mut cols: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut cols);
        cols.truncate(c.div_ceil(2));
        let half = ChannelSelection::from_indices(0, c, cols).unwrap();
        let sparse = compute_null_space(&cov, &half, 0.97).map_err(|e| e.to_string())?;
        let dense = compute_null_space(&cov, &ChannelSelection::all(0, c), 0.97).map_err(|e| e.to_string())?;
        let k = c.div_ceil(2);
        check(
            sparse.workspace_values * c * c == dense.workspace_values * k * k,
            format!("C = {c}: workspace not proportional to ceil(C/2)^2"),
        )?;
        let ratio = sparse.workspace_values as f64 / dense.workspace_values as f64;
        if c % 2 == 0 {
            check(ratio <= 0.26, format!("C = {c}: ratio {ratio}"))?;
        }
        ratios.push(format!("C={c}: {ratio:.4}"));
    }
    Ok(format!("s=0.5 / s=1 workspace {}", ratios.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("decouple/fuse round trip", criterion_1),
        ("forward equivalence", criterion_2),
        ("gradient equivalence", criterion_3),
        ("intensity and channel-score oracles", criterion_4),
        ("null-space protection", criterion_5),
        ("cost-model reference numbers", criterion_6),
        ("desk-scale incremental behavior", criterion_7),
        ("sparse projection workspace", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
