//! Datasets, synthetic generation, holdout and task splits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::Batch;
use crate::rng::SeededRng;
use crate::tensor::Tensor4;
use crate::tsr::{TsrArray, TsrData};

/// Images with dense class ids `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Original label of each dense id.
    pub label_ids: Vec<i32>,
}

impl Dataset {
    /// Densifies `raw` labels in ascending order of their original values.
    pub fn new(images: Tensor4<f32>, raw: &[i32]) -> Result<Self> {
        let n = images.dims()[0];
        if raw.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {n} images",
                raw.len()
            )));
        }
        if !images.all_finite() {
            return Err(Error::Format("images contain non-finite values".into()));
        }
        if n == 0 {
            return Err(Error::Format("dataset is empty".into()));
        }
        let mut label_ids = raw.to_vec();
        label_ids.sort_unstable();
        label_ids.dedup();
        let labels = raw
            .iter()
            .map(|l| label_ids.binary_search(l).expect("label present"))
            .collect();
        Ok(Dataset {
            images,
            labels,
            classes: label_ids.len(),
            label_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<f32> {
        Batch {
            x: self.images.gather_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn indices_of(&self, classes: &[usize], among: &[usize]) -> Vec<usize> {
        among
            .iter()
            .copied()
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    /// Writes `images.tsr` (f32) and `labels.tsr` (i32, original ids).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        TsrArray::from_tensor(&self.images).write(dir.join("images.tsr"))?;
        let raw: Vec<i32> = self.labels.iter().map(|&l| self.label_ids[l]).collect();
        TsrArray::from_i32(&raw).write(dir.join("labels.tsr"))
    }

    /// Writes `dense,original` rows.
    pub fn write_label_map(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("dense,original\n");
        for (d, o) in self.label_ids.iter().enumerate() {
            text.push_str(&format!("{d},{o}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads `images.tsr` and `labels.tsr` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = TsrArray::read(dir.join("images.tsr"))?;
    let labels = TsrArray::read(dir.join("labels.tsr"))?;
    if images.dims.len() != 4 || !matches!(images.data, TsrData::F32(_)) {
        return Err(Error::Format(format!(
            "images.tsr must be rank-4 f32, found rank {} {:?}",
            images.dims.len(),
            images.data.dtype()
        )));
    }
    let TsrData::I32(raw) = &labels.data else {
        return Err(Error::Format("labels.tsr must be i32".into()));
    };
    if labels.dims.len() != 1 {
        return Err(Error::Format(format!(
            "labels.tsr must be rank 1, found rank {}",
            labels.dims.len()
        )));
    }
    Dataset::new(images.to_tensor()?, raw)
}

/// Each class is Gaussian noise around its own smooth spatial template.
pub fn make_synthetic(classes: usize, per_class: usize, dims: [usize; 3], seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::arg("synthetic data needs at least two classes"));
    }
    if per_class == 0 || dims.contains(&0) {
        return Err(Error::arg("synthetic per_class and dims must be positive"));
    }
    let [c, h, w] = dims;
    let mut rng = SeededRng::derive(seed, 1);
    let coarse = [c, h.div_ceil(2), w.div_ceil(2)];
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..coarse.iter().product::<usize>()).map(|_| rng.normal()).collect())
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let t = &templates[class];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let base = t[(ci * coarse[1] + y / 2) * coarse[2] + x / 2];
                    data.push((base + SYNTHETIC_NOISE * rng.normal()) as f32);
                }
            }
        }
        raw.push(class as i32);
    }
    Dataset::new(Tensor4::from_vec([n, c, h, w], data)?, &raw)
}

const SYNTHETIC_NOISE: f64 = 1.0;

/// Train and evaluation indices; `fraction` of every class is held out.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<Holdout> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::arg(format!("holdout fraction must lie in [0, 1), got {fraction}")));
    }
    let mut rng = SeededRng::derive(seed, 2);
    let mut split = Holdout {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let n_eval = ((idx.len() as f64) * fraction).round() as usize;
        let n_eval = n_eval.min(idx.len().saturating_sub(1));
        split.eval.extend_from_slice(&idx[..n_eval]);
        split.train.extend_from_slice(&idx[n_eval..]);
    }
    split.train.sort_unstable();
    split.eval.sort_unstable();
    Ok(split)
}

/// Base classes followed by the incremental tasks, by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub base: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskStream {
    /// Class sets of every stage, base first.
    pub fn stages(&self) -> Vec<&[usize]> {
        std::iter::once(self.base.as_slice())
            .chain(self.tasks.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

pub fn split_tasks(classes: usize, tasks: usize) -> Result<TaskStream> {
    let base = classes / 2;
    let rest = classes - base;
    if tasks == 0 || base == 0 || !rest.is_multiple_of(tasks) {
        return Err(Error::arg(format!(
            "{rest} incremental classes cannot be split into {tasks} equal tasks"
        )));
    }
    let per = rest / tasks;
    Ok(TaskStream {
        base: (0..base).collect(),
        tasks: (0..tasks)
            .map(|t| (base + t * per..base + (t + 1) * per).collect())
            .collect(),
    })
}
