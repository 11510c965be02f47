use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csko_core::cost::{training_memory, CostArch, TrainMode};
use csko_core::harness::{load_dataset, make_synthetic, run_experiment, average_accuracy, RunConfig};
use csko_core::intensity::{emit_intensity_report, position_sensitivity};
use csko_core::kv::KvFile;
use csko_core::net::{ArchSpec, Model};
use csko_core::{Error, Result};

#[derive(Parser)]
#[command(name = "csko", about = "Center-sensitive kernel optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a class-incremental experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a seeded synthetic dataset as images.tsr / labels.tsr.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Image dims as C,H,W.
        #[arg(long, default_value = "3,16,16", value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Per-position gradient intensity of the last conv layers.
    AnalyzeIntensity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `tail:N` or a comma-separated list of layer indices.
        #[arg(long, default_value = "tail:2")]
        layers: String,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Number of batches to accumulate; 0 uses the whole dataset.
        #[arg(long, default_value_t = 0)]
        batches: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytical FLOPs and memory per layer.
    EstimateCost {
        /// `resnet18`, or an architecture file.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        batch: usize,
        /// full | csks | csks+cdm | csks+cdm+dces
        #[arg(long)]
        mode: String,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        patch: Option<usize>,
        /// Head classes for built-in architectures.
        #[arg(long, default_value_t = 100)]
        classes: usize,
        /// Overrides the architecture's trainable tail.
        #[arg(long)]
        tail: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layers(spec: &str, arch: &ArchSpec) -> Result<Vec<usize>> {
    let convs = arch.conv_layers();
    if let Some(n) = spec.strip_prefix("tail:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Argument(format!("layers: bad tail count {n:?}")))?;
        if n == 0 || n > convs.len() {
            return Err(Error::Argument(format!(
                "layers: tail:{n} outside 1..={}",
                convs.len()
            )));
        }
        return Ok(convs[convs.len() - n..].to_vec());
    }
    csko_core::kv::parse_list("layers", spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let metrics = run_experiment(&cfg)?;
            for (r, row) in metrics.accuracy.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
                println!("after stage {r}: {}", cells.join(" "));
            }
            println!("average accuracy {:.4}", average_accuracy(&metrics)?);
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::MakeSynthetic {
            out,
            classes,
            per_class,
            dims,
            seed,
        } => {
            let dims: [usize; 3] = dims
                .try_into()
                .map_err(|_| Error::Argument("dims: expected three values C,H,W".into()))?;
            let ds = make_synthetic(classes, per_class, dims, seed)?;
            ds.write(&out)?;
            println!("wrote {} images of {} classes to {}", ds.len(), ds.classes, out.display());
        }
        Command::AnalyzeIntensity {
            model,
            data,
            layers,
            batch,
            batches,
            out,
        } => {
            let model: Model<f32> = Model::load(&model)?;
            let ds = load_dataset(&data)?;
            if ds.classes > model.classes() {
                return Err(Error::Argument(format!(
                    "data has {} classes, model head has {}",
                    ds.classes,
                    model.classes()
                )));
            }
            let layers = parse_layers(&layers, model.arch())?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let take = if batches == 0 { usize::MAX } else { batches };
            let probe: Vec<_> = idx.chunks(batch.max(1)).take(take).map(|c| ds.batch(c)).collect();
            let maps = position_sensitivity(&model, &probe, &layers)?;
            emit_intensity_report(&maps, &out)?;
            for m in &maps {
                println!(
                    "layer {}: argmax {:?}, center is argmax: {}",
                    m.layer,
                    m.argmax(),
                    m.center_is_argmax()
                );
            }
        }
        Command::EstimateCost {
            arch,
            batch,
            mode,
            s,
            patch,
            classes,
            tail,
            out,
        } => {
            let mut cost_arch = match arch.as_str() {
                "resnet18" => CostArch::resnet18(classes),
                path => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.into(),
                        source: e,
                    })?;
                    let spec = ArchSpec::from_kv(&KvFile::parse(&text)?)?;
                    CostArch::from_arch(path, &spec)?
                }
            };
            if let Some(t) = tail {
                cost_arch = cost_arch.with_tail(t);
            }
            let mode = TrainMode::parse(&mode, s)?;
            let report = training_memory(&cost_arch, batch, mode, patch)?;
            report.write_csv(&out)?;
            let t = &report.total;
            println!(
                "{} {}: forward {} FLOPs, backward {} FLOPs, trainable {} B, gradients {} B",
                report.arch, mode, t.forward_flops, t.backward_flops, t.trainable_weight_bytes, t.gradient_bytes
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
