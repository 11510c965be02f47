//! Run configuration from a `key = value` file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dces::{Criterion, DEFAULT_PROPORTION};
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvFile};
use crate::ogp::DEFAULT_RHO;

const KEYS: &[&str] = &[
    "data_dir",
    "synthetic.classes",
    "synthetic.per_class",
    "synthetic.dims",
    "synthetic.seed",
    "arch",
    "tasks",
    "mode",
    "s",
    "rho",
    "criterion",
    "trainable_tail",
    "epochs.base",
    "epochs.task",
    "lr",
    "batch",
    "seed",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic {
        classes: usize,
        per_class: usize,
        dims: [usize; 3],
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchChoice {
    Micro,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dense tail kernels, no projection.
    Naive,
    /// Decoupled centers, channel selection and null-space projection.
    Csko,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Mode::Naive),
            "csko" => Ok(Mode::Csko),
            _ => Err(Error::arg(format!("mode: expected naive|csko, got {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Csko => "csko",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub arch: ArchChoice,
    pub tasks: usize,
    pub mode: Mode,
    pub s: f64,
    pub rho: f64,
    pub criterion: Criterion,
    /// Overrides the architecture's trainable tail when set.
    pub trainable_tail: Option<usize>,
    pub epochs_base: usize,
    pub epochs_task: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic {
                classes: 8,
                per_class: 50,
                dims: [3, 16, 16],
                seed: 1,
            },
            arch: ArchChoice::Micro,
            tasks: 4,
            mode: Mode::Csko,
            s: DEFAULT_PROPORTION,
            rho: DEFAULT_RHO,
            criterion: Criterion::New,
            trainable_tail: None,
            epochs_base: 20,
            epochs_task: 15,
            lr: 1e-3,
            lr_decay_every: 45,
            batch: 32,
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let kv = KvFile::parse(text).map_err(|e| match e {
            Error::Format(m) => Error::arg(m),
            other => other,
        })?;
        Self::from_kv(&kv, base_dir)
    }

    pub fn from_kv(kv: &KvFile, base_dir: &Path) -> Result<Self> {
        if let Some(bad) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::arg(format!("unknown config key {bad:?}")));
        }
        let d = RunConfig::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let has_synthetic = kv.keys().any(|k| k.starts_with("synthetic."));
        let data = match kv.get("data_dir") {
            Some(_) if has_synthetic => {
                return Err(Error::arg("data_dir: cannot be combined with synthetic.* keys"))
            }
            Some(dir) => DataSource::Dir(resolve(dir)),
            None => {
                let DataSource::Synthetic {
                    classes,
                    per_class,
                    dims,
                    seed,
                } = d.data
                else {
                    unreachable!()
                };
                let dims = match kv.get("synthetic.dims") {
                    Some(s) => {
                        let v: Vec<usize> = parse_list("synthetic.dims", s)?;
                        <[usize; 3]>::try_from(v.as_slice()).map_err(|_| {
                            Error::arg("synthetic.dims: expected three values C,H,W")
                        })?
                    }
                    None => dims,
                };
                DataSource::Synthetic {
                    classes: kv.parse_or("synthetic.classes", classes)?,
                    per_class: kv.parse_or("synthetic.per_class", per_class)?,
                    dims,
                    seed: kv.parse_or("synthetic.seed", seed)?,
                }
            }
        };
        let arch = match kv.get("arch") {
            None | Some("micro") => ArchChoice::Micro,
            Some(p) => ArchChoice::File(resolve(p)),
        };
        let cfg = RunConfig {
            data,
            arch,
            tasks: kv.parse_or("tasks", d.tasks)?,
            mode: kv.parse_or("mode", d.mode)?,
            s: kv.parse_or("s", d.s)?,
            rho: kv.parse_or("rho", d.rho)?,
            criterion: kv.parse_or("criterion", d.criterion)?,
            trainable_tail: kv.parse_opt("trainable_tail")?,
            epochs_base: kv.parse_or("epochs.base", d.epochs_base)?,
            epochs_task: kv.parse_or("epochs.task", d.epochs_task)?,
            lr: kv.parse_or("lr", d.lr)?,
            lr_decay_every: d.lr_decay_every,
            batch: kv.parse_or("batch", d.batch)?,
            seed: kv.parse_or("seed", d.seed)?,
            out_dir: resolve(kv.get("out_dir").unwrap_or("run")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(Error::arg(format!("s: must lie in (0, 1], got {}", self.s)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::arg(format!("rho: must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("lr: must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::arg("batch: must be positive"));
        }
        if self.tasks == 0 {
            return Err(Error::arg("tasks: must be positive"));
        }
        if let DataSource::Synthetic { classes, per_class, dims, .. } = self.data {
            if classes < 2 || per_class == 0 || dims.contains(&0) {
                return Err(Error::arg(
                    "synthetic.*: need classes >= 2 and positive per_class and dims",
                ));
            }
        }
        Ok(())
    }

    /// Flat `key = value` echo of the effective configuration.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        match &self.data {
            DataSource::Dir(p) => kv.insert("data_dir", p.display()),
            DataSource::Synthetic {
                classes,
                per_class,
                dims,
                seed,
            } => {
                kv.insert("synthetic.classes", classes);
                kv.insert("synthetic.per_class", per_class);
                kv.insert("synthetic.dims", format!("{},{},{}", dims[0], dims[1], dims[2]));
                kv.insert("synthetic.seed", seed);
            }
        }
        match &self.arch {
            ArchChoice::Micro => kv.insert("arch", "micro"),
            ArchChoice::File(p) => kv.insert("arch", p.display()),
        }
        kv.insert("tasks", self.tasks);
        kv.insert("mode", self.mode);
        kv.insert("s", self.s);
        kv.insert("rho", self.rho);
        kv.insert("criterion", self.criterion);
        if let Some(t) = self.trainable_tail {
            kv.insert("trainable_tail", t);
        }
        kv.insert("epochs.base", self.epochs_base);
        kv.insert("epochs.task", self.epochs_task);
        kv.insert("lr", self.lr);
        kv.insert("batch", self.batch);
        kv.insert("seed", self.seed);
        kv.insert("out_dir", self.out_dir.display());
        kv
    }
}
