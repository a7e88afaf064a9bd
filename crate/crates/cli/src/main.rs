use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agcd::config::KeyValues;
use agcd::data::{gen_dataset, BiasSpec, Split};
use agcd::model::{Ablation, ModelConfig};
use agcd::train::ablate::{ablate, ablation_csv, AblationData};
use agcd::train::eval::{confusion_csv, evaluate_checkpoint};
use agcd::train::{train, EpochMetrics, TrainConfig};
use agcd::{checks, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agcd", version, about = "Attention-guided context debiasing for emotion recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a planted context bias.
    GenData {
        /// key = value spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "train")]
        train_cfg: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the confusion matrix.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the confusion CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump AG-CIM intermediates and stream gates to this directory.
        #[arg(long)]
        dump_cim: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(checks::MODULES))]
        module: Option<String>,
    },
    /// Train configurations A-E over several seeds and tabulate test accuracy.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "train")]
        train_cfg: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D,E")]
        configs: Vec<Ablation>,
        /// Run directories; defaults to `<out>.runs`.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

enum Failure {
    Lib(Error),
    Check(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn read_model(path: Option<&Path>) -> agcd::Result<ModelConfig> {
    path.map_or(Ok(ModelConfig::default()), |p| ModelConfig::from_kv(KeyValues::read(p)?))
}

fn read_train(path: Option<&Path>) -> agcd::Result<TrainConfig> {
    path.map_or(Ok(TrainConfig::default()), |p| TrainConfig::from_kv(KeyValues::read(p)?))
}

fn print_epoch(m: &EpochMetrics) {
    eprintln!("epoch {:>3}  step {:>6}  lr {:.2e}  loss {:.4}  train {:.4}  val {:.4}", m.epoch, m.step, m.lr, m.train_loss, m.train_acc, m.val_acc);
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let spec = spec.map_or(Ok(BiasSpec::default()), |p| BiasSpec::read(&p))?;
            gen_dataset(&spec, &out)?;
            eprintln!("wrote {} samples to {}", spec.n_train + spec.n_val + spec.n_test, out.display());
        }
        Cmd::Train { model, train_cfg, data, out, resume } => {
            let (model, cfg) = (read_model(model.as_deref())?, read_train(train_cfg.as_deref())?);
            let s = train(&model, &cfg, &data, &out, resume.as_deref(), &mut print_epoch)?;
            eprintln!("best val {:.4}; checkpoints in {}", s.best_val, out.display());
        }
        Cmd::Eval { ckpt, data, split, out, dump_cim, batch_size } => {
            let e = evaluate_checkpoint(&ckpt, &data, split, batch_size, dump_cim.as_deref())?;
            let csv = confusion_csv(&e);
            match out {
                Some(p) => fs::write(&p, csv).map_err(|err| Error::Io { path: p, source: err })?,
                None => print!("{csv}"),
            }
            eprintln!("{split} accuracy {:.4}", e.accuracy);
        }
        Cmd::Gradcheck { module } => {
            let results = checks::run(module.as_deref())?;
            for c in &results {
                println!("{c}");
            }
            let failed = results.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(Failure::Check(failed));
            }
        }
        Cmd::Ablate { data, seeds, out, model, train_cfg, configs, workdir } => {
            let (model, cfg) = (read_model(model.as_deref())?, read_train(train_cfg.as_deref())?);
            let data = AblationData::load(&data)?;
            let workdir = workdir.unwrap_or_else(|| PathBuf::from(format!("{}.runs", out.display())));
            let rows = ablate(&model, &cfg, &data, &seeds, &configs, &workdir, &mut |a, s, m| {
                eprint!("{a} seed {s}: ");
                print_epoch(m);
            })?;
            let csv = ablation_csv(&rows, &seeds);
            fs::write(&out, &csv).map_err(|err| Error::Io { path: out.clone(), source: err })?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(n)) => {
            eprintln!("error: {n} gradient check(s) failed");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
