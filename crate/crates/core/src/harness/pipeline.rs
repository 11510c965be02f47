//! Class-incremental training runs.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ArchChoice, DataSource, Mode, RunConfig};
use super::data::{holdout_split, load_dataset, make_synthetic, split_tasks, Dataset, Holdout, TaskStream};
use crate::cost::{training_memory, CostArch, TrainMode};
use crate::csko::fuse;
use crate::dces::{
    channel_sensitivity, select_channels, write_selection_csv, ChannelScore, ChannelSelection,
    Criterion, DEFAULT_SCORE_BATCHES,
};
use crate::error::{Error, Result};
use crate::intensity::{emit_intensity_report, position_sensitivity};
use crate::kv::KvFile;
use crate::net::{
    cross_entropy, step_decay_lr, AdamConfig, ArchSpec, Batch, ConvKernel, LayerGrad, LayerSpec,
    Model, Optimizer, ParamGrads,
};
use crate::ogp::{compute_null_space, project_center, project_gradient, FeatureCovariance, NullSpaceBasis};
use crate::rng::SeededRng;

pub const HOLDOUT_FRACTION: f64 = 0.2;
const EVAL_CHUNK: usize = 256;

/// Accuracy after every stage on every stage seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Class sets, base stage first.
    pub stage_classes: Vec<Vec<usize>>,
    /// `accuracy[r][j]`: accuracy on stage `j` after training stage `r`.
    pub accuracy: Vec<Vec<f64>>,
    pub seed: u64,
    pub config: KvFile,
}

impl RunMetrics {
    pub fn stages(&self) -> usize {
        self.stage_classes.len()
    }

    /// Accuracy of each stage right after it was trained.
    pub fn own_accuracy(&self) -> Vec<f64> {
        self.accuracy.iter().enumerate().filter_map(|(r, row)| row.get(r).copied()).collect()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.accuracy.last().map(Vec::as_slice)
    }

    /// Stage rows, then an `average_incl_base` row with the final-row mean.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("after");
        for j in 0..self.stages() {
            text.push(',');
            text.push_str(&stage_name(j));
        }
        text.push('\n');
        for (r, row) in self.accuracy.iter().enumerate() {
            text.push_str(&stage_name(r));
            for j in 0..self.stages() {
                text.push(',');
                if let Some(a) = row.get(j) {
                    text.push_str(&a.to_string());
                }
            }
            text.push('\n');
        }
        text.push_str(&format!("average_incl_base,{}\n", average_accuracy(self)?));
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn stage_name(j: usize) -> String {
    if j == 0 {
        "base".into()
    } else {
        format!("task{j}")
    }
}

/// Mean of the final-row accuracies over the base stage and every task.
pub fn average_accuracy(m: &RunMetrics) -> Result<f64> {
    let n = m.stages();
    let row = m
        .final_row()
        .filter(|r| m.accuracy.len() == n && r.len() == n && n > 0)
        .ok_or_else(|| {
            Error::State(format!(
                "accuracy matrix incomplete: {} rows for {n} stages",
                m.accuracy.len()
            ))
        })?;
    Ok(row.iter().sum::<f64>() / n as f64)
}

/// One run, advanced stage by stage.
pub struct Pipeline {
    cfg: RunConfig,
    data: Dataset,
    split: Holdout,
    stream: TaskStream,
    model: Model<f32>,
    tail: Vec<usize>,
    covariances: Vec<FeatureCovariance<f32>>,
    bases: Vec<NullSpaceBasis<f32>>,
    accuracy: Vec<Vec<f64>>,
    audit_dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let stream = split_tasks(data.classes, cfg.tasks)?;
        let split = holdout_split(&data, HOLDOUT_FRACTION, cfg.seed)?;
        let arch = build_arch(&cfg, data.image_dims(), stream.base.len())?;
        let model = Model::new(arch, cfg.seed)?;
        let tail = model.arch().tail_layers();
        let audit_dir = cfg.out_dir.join("audit");
        fs::create_dir_all(&audit_dir).map_err(|e| Error::io(&audit_dir, e))?;
        Ok(Pipeline {
            cfg,
            data,
            split,
            stream,
            model,
            tail,
            covariances: Vec::new(),
            bases: Vec::new(),
            accuracy: Vec::new(),
            audit_dir,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn holdout(&self) -> &Holdout {
        &self.split
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    pub fn tail_layers(&self) -> &[usize] {
        &self.tail
    }

    /// Stages completed so far.
    pub fn completed(&self) -> usize {
        self.accuracy.len()
    }

    pub fn null_space_bases(&self) -> &[NullSpaceBasis<f32>] {
        &self.bases
    }

    /// Trains every layer on the base classes, then freezes all but the tail.
    /// In csko mode the tail is decoupled and the base covariance recorded.
    pub fn train_base(&mut self) -> Result<()> {
        if self.completed() != 0 {
            return Err(Error::State("base stage already trained".into()));
        }
        let all = self.model.arch().conv_layers();
        self.model.set_trainable_convs(&all)?;
        let idx = self.data.indices_of(&self.stream.base, &self.split.train);
        self.train_epochs(&idx, self.cfg.epochs_base, 0)?;
        let mean = self.head_input_mean(&idx)?;
        self.model.set_head_offset(&mean)?;
        self.model.set_trainable_convs(&self.tail.clone())?;
        if self.cfg.mode == Mode::Csko {
            for &l in &self.tail {
                self.model.decouple_layer(l)?;
            }
            self.covariances = self
                .tail
                .iter()
                .map(|&l| {
                    let c = self.model.decomposition(l)?.channels();
                    Ok(FeatureCovariance::new(l, c))
                })
                .collect::<Result<_>>()?;
            self.accumulate_covariance(&idx)?;
        }
        self.evaluate_stage()
    }

    /// Runs incremental task `t` (1-based).
    pub fn run_task(&mut self, t: usize) -> Result<()> {
        if t == 0 || t > self.stream.task_count() || self.completed() != t {
            return Err(Error::State(format!(
                "task {t} cannot run after {} completed stages",
                self.completed()
            )));
        }
        let classes = self.stream.tasks[t - 1].clone();
        self.model.expand_head(classes.len())?;
        let idx = self.data.indices_of(&classes, &self.split.train);
        if self.cfg.mode == Mode::Csko {
            let selections = self.select(&idx, t)?;
            write_selection_csv(self.cfg.out_dir.join(format!("selection_task{t}.csv")), &selections)?;
            self.bases.clear();
            for (sel, cov) in selections.into_iter().zip(&self.covariances) {
                let basis = compute_null_space(cov, &sel, self.cfg.rho)?;
                basis.save(&self.audit_dir, t)?;
                self.model.set_selection(sel.layer(), sel)?;
                self.bases.push(basis);
            }
        }
        self.train_epochs(&idx, self.cfg.epochs_task, t)?;
        if self.cfg.mode == Mode::Csko {
            for &l in &self.tail {
                fuse(self.model.decomposition(l)?)
                    .map_err(|e| Error::State(format!("task {t}, layer {l}: {e}")))?;
            }
            self.accumulate_covariance(&idx)?;
        }
        self.evaluate_stage()
    }

    /// Writes all reports and the fused model checkpoint.
    pub fn finish(mut self) -> Result<RunMetrics> {
        let metrics = RunMetrics {
            stage_classes: self.stream.stages().into_iter().map(<[usize]>::to_vec).collect(),
            accuracy: self.accuracy.clone(),
            seed: self.cfg.seed,
            config: self.cfg.to_kv(),
        };
        let out = self.cfg.out_dir.clone();
        metrics.write_csv(out.join("metrics.csv"))?;
        let echo = out.join("run.cfg");
        fs::write(&echo, metrics.config.render()).map_err(|e| Error::io(&echo, e))?;
        self.data.write_label_map(out.join("label_map.csv"))?;
        for cov in &self.covariances {
            cov.save(&self.audit_dir)?;
        }
        for &l in &self.tail {
            if let Ok(dec) = self.model.decomposition(l) {
                dec.save(&self.audit_dir)?;
            }
        }
        self.model.fuse_all()?;
        self.model.save(out.join("model"))?;

        let probe = self.probe_batches(&self.split.eval.clone(), 2);
        let maps = position_sensitivity(&self.model, &probe, &self.tail)?;
        emit_intensity_report(&maps, out.join("intensity.csv"))?;

        let arch = CostArch::from_arch("model", self.model.arch())?;
        let mode = match self.cfg.mode {
            Mode::Naive => TrainMode::Full,
            Mode::Csko => TrainMode::Dces(self.cfg.s),
        };
        training_memory(&arch, self.cfg.batch, mode, None)?.write_csv(out.join("cost.csv"))?;
        Ok(metrics)
    }

    fn probe_batches(&self, idx: &[usize], max_batches: usize) -> Vec<Batch<f32>> {
        idx.chunks(self.cfg.batch)
            .take(max_batches)
            .map(|c| self.data.batch(c))
            .collect()
    }

    fn train_epochs(&mut self, idx: &[usize], epochs: usize, stage: usize) -> Result<()> {
        if idx.is_empty() {
            return Err(Error::State(format!("stage {stage} has no training samples")));
        }
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut rng = SeededRng::derive(self.cfg.seed, 100 + stage as u64);
        let mut order = idx.to_vec();
        for epoch in 0..epochs {
            let lr = step_decay_lr(self.cfg.lr, epoch, self.cfg.lr_decay_every);
            rng.shuffle(&mut order);
            for chunk in order.chunks(self.cfg.batch) {
                let batch = self.data.batch(chunk);
                let mut grads = self.gradients(&batch, stage)?;
                let before = self.project(&mut grads)?;
                opt.step(&mut self.model, &grads, lr)?;
                self.project_update(before)?;
            }
        }
        Ok(())
    }

    fn gradients(&self, batch: &Batch<f32>, stage: usize) -> Result<ParamGrads<f32>> {
        let (logits, cache) = self.model.forward(&batch.x)?;
        let (loss, glogits) = cross_entropy(&logits, &batch.labels)?;
        let grads = self.model.backward(&cache, &glogits)?;
        if !loss.is_finite() || !grads.all_finite() {
            let layer = grads
                .layers
                .iter()
                .position(|g| g.is_some())
                .map_or("-".to_string(), |l| l.to_string());
            return Err(Error::Numerical(format!(
                "stage {stage}: non-finite loss or gradient (first trainable layer {layer})"
            )));
        }
        Ok(grads)
    }

    /// Projects center gradients onto the null-space bases and returns the
    /// pre-step center weights.
    fn project(&self, grads: &mut ParamGrads<f32>) -> Result<Vec<crate::Tensor4<f32>>> {
        let mut before = Vec::with_capacity(self.bases.len());
        for basis in &self.bases {
            if let Some(Some(LayerGrad::Center(g))) = grads.layers.get_mut(basis.layer) {
                project_center(g, basis)?;
            }
            before.push(self.model.decomposition(basis.layer)?.w_alpha().clone());
        }
        Ok(before)
    }

    /// Keeps each optimizer update of the center weights inside the null
    /// space, so moment scaling and weight decay cannot leave it.
    fn project_update(&mut self, before: Vec<crate::Tensor4<f32>>) -> Result<()> {
        for (basis, w0) in self.bases.iter().zip(before) {
            let conv = self.model.conv_mut(basis.layer)?;
            let ConvKernel::Decoupled { dec, .. } = &mut conv.kernel else {
                return Err(Error::State(format!("layer {} is not decoupled", basis.layer)));
            };
            let delta = project_gradient(&dec.w_alpha().sub(&w0)?, basis)?;
            *dec.w_alpha_mut() = w0.add(&delta)?;
        }
        Ok(())
    }

    fn select(&self, idx: &[usize], t: usize) -> Result<Vec<ChannelSelection>> {
        let new = self.channel_scores(idx, t)?;
        let old = match self.cfg.criterion {
            Criterion::New => None,
            Criterion::Old => {
                let base = self.data.indices_of(&self.stream.base, &self.split.train);
                Some(self.channel_scores(&base, 0)?)
            }
        };
        new.iter()
            .enumerate()
            .map(|(i, n)| select_channels(n, old.as_ref().map(|o| &o[i]), self.cfg.s, self.cfg.criterion))
            .collect()
    }

    /// Channel scores of every tail layer from a few batches, with all
    /// channels open.
    fn channel_scores(&self, idx: &[usize], stream: usize) -> Result<Vec<ChannelScore<f32>>> {
        let mut probe = self.model.clone();
        for &l in &self.tail {
            let c = probe.decomposition(l)?.channels();
            probe.set_selection(l, ChannelSelection::all(l, c))?;
        }
        let mut order = idx.to_vec();
        SeededRng::derive(self.cfg.seed, 200 + stream as u64).shuffle(&mut order);
        let mut accum: Vec<Option<crate::Tensor4<f32>>> = vec![None; self.tail.len()];
        for chunk in order.chunks(self.cfg.batch).take(DEFAULT_SCORE_BATCHES) {
            let batch = self.data.batch(chunk);
            let (logits, cache) = probe.forward(&batch.x)?;
            let (_, glogits) = cross_entropy(&logits, &batch.labels)?;
            let grads = probe.backward(&cache, &glogits)?;
            for (slot, &l) in accum.iter_mut().zip(&self.tail) {
                let Some(LayerGrad::Center(g)) = grads.get(l) else {
                    return Err(Error::State(format!("no center gradient for layer {l}")));
                };
                let dense = g.to_dense();
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&dense)?,
                    None => dense,
                });
            }
        }
        self.tail
            .iter()
            .zip(accum)
            .map(|(&l, g)| {
                let g = g.ok_or_else(|| Error::State("no samples to score channels".into()))?;
                channel_sensitivity(probe.decomposition(l)?, &g)
            })
            .collect()
    }

    /// Mean classifier input over `idx`.
    fn head_input_mean(&self, idx: &[usize]) -> Result<crate::Tensor4<f32>> {
        let head = self
            .model
            .arch()
            .head_index()
            .ok_or_else(|| Error::State("model has no linear head".into()))?;
        let mut sum: Vec<f64> = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (_, cache) = self.model.forward(&self.data.batch(chunk).x)?;
            let x = &cache.inputs[head];
            let per = x.len() / x.dims()[0];
            sum.resize(per, 0.0);
            for (i, &v) in x.data().iter().enumerate() {
                sum[i % per] += f64::from(v);
            }
        }
        let n = idx.len() as f64;
        let per = sum.len();
        crate::Tensor4::from_vec([1, per, 1, 1], sum.into_iter().map(|v| (v / n) as f32).collect())
    }

    fn accumulate_covariance(&mut self, idx: &[usize]) -> Result<()> {
        for chunk in idx.chunks(EVAL_CHUNK) {
            let batch = self.data.batch(chunk);
            let (_, cache) = self.model.forward(&batch.x)?;
            for cov in &mut self.covariances {
                let branch = cache.branches[cov.layer]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("layer {} has no branch", cov.layer)))?;
                cov.accumulate(&branch.x_sub)?;
            }
        }
        Ok(())
    }

    /// Accuracy on the held-out samples of one stage's classes, predicting
    /// over every class seen so far.
    pub fn stage_accuracy(&self, stage: usize) -> Result<f64> {
        let classes = self.stream.stages()[stage];
        let idx = self.data.indices_of(classes, &self.split.eval);
        if idx.is_empty() {
            return Err(Error::State(format!("stage {stage} has no evaluation samples")));
        }
        let mut correct = 0usize;
        for chunk in idx.chunks(EVAL_CHUNK) {
            let batch = self.data.batch(chunk);
            let pred = self.model.predict(&batch.x)?;
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / idx.len() as f64)
    }

    fn evaluate_stage(&mut self) -> Result<()> {
        let done = self.completed();
        let row = (0..=done).map(|j| self.stage_accuracy(j)).collect::<Result<_>>()?;
        self.accuracy.push(row);
        Ok(())
    }
}

fn build_arch(cfg: &RunConfig, dims: [usize; 3], base_classes: usize) -> Result<ArchSpec> {
    let mut arch = match &cfg.arch {
        ArchChoice::Micro => ArchSpec::micro(dims, base_classes),
        ArchChoice::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut arch = ArchSpec::from_kv(&KvFile::parse(&text)?)?;
            match arch.layers.last_mut() {
                Some(LayerSpec::Linear { out_features, .. }) => *out_features = base_classes,
                _ => return Err(Error::arg("arch: architecture must end in a linear head")),
            }
            arch
        }
    };
    if arch.input != dims {
        return Err(Error::arg(format!(
            "arch: input {:?} does not match data {:?}",
            arch.input, dims
        )));
    }
    if let Some(t) = cfg.trainable_tail {
        arch.trainable_tail = t;
    }
    arch.shapes()
        .map_err(|e| Error::arg(format!("arch: {e}")))?;
    Ok(arch)
}

pub fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Dir(dir) => load_dataset(dir),
        DataSource::Synthetic {
            classes,
            per_class,
            dims,
            seed,
        } => make_synthetic(*classes, *per_class, *dims, *seed),
    }
}

/// Full run: base stage, every incremental task, then reports.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics> {
    let data = load_data(&cfg.data)?;
    let mut p = Pipeline::new(cfg.clone(), data)?;
    p.train_base()?;
    for t in 1..=cfg.tasks {
        p.run_task(t)?;
    }
    p.finish()
}
