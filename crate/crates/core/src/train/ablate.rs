//! Trains and evaluates configurations A-E over several seeds.

use std::fs;
use std::path::Path;

use crate::data::{load_dataset, Dataset, Split};
use crate::model::{Ablation, ModelConfig};
use crate::tensor::{DType, Scalar};
use crate::{Error, Result};

use super::eval::{confusion, predict};
use super::{train_on, EpochMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Test accuracy per seed, in seed order.
    pub accs: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len() as f64
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.accs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

pub struct AblationData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl AblationData {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self { train: load_dataset(root, Split::Train)?, val: load_dataset(root, Split::Val)?, test: load_dataset(root, Split::Test)? })
    }
}

/// Test accuracy of the final parameters of one run.
fn run_one<T: Scalar>(model: &ModelConfig, cfg: &TrainConfig, data: &AblationData, out: &Path, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<f64> {
    let summary = train_on::<T>(model, cfg, &data.train, &data.val, out, None, progress)?;
    let m = super::load_model::<T>(&summary.last_checkpoint)?;
    let preds = predict(&m.net, &m.params, &data.test, cfg.batch_size, None)?;
    Ok(confusion(&preds, &data.test.labels(), data.test.spec.k)?.accuracy)
}

/// Runs every configuration for every seed; run directories go under
/// `workdir/<config>_seed<s>`.
pub fn ablate(
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &AblationData,
    seeds: &[u64],
    configs: &[Ablation],
    workdir: &Path,
    progress: &mut dyn FnMut(Ablation, u64, &EpochMetrics),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let mut rows = Vec::new();
    for &a in configs {
        let model = base.clone().with_ablation(a);
        let mut accs = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let out = workdir.join(format!("{a}_seed{seed}"));
            let mut cb = |m: &EpochMetrics| progress(a, seed, m);
            let acc = match cfg.dtype {
                DType::F32 => run_one::<f32>(&model, &run_cfg, data, &out, &mut cb)?,
                DType::F64 => run_one::<f64>(&model, &run_cfg, data, &out, &mut cb)?,
            };
            accs.push(acc);
        }
        rows.push(AblationRow { ablation: a, accs });
    }
    Ok(rows)
}

/// `config,seed<s>...,mean±std`: one row per configuration.
pub fn ablation_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let cols: Vec<String> = seeds.iter().map(|s| format!("seed{s}")).collect();
    let mut s = format!("config,{},mean±std\n", cols.join(","));
    for r in rows {
        let accs: Vec<String> = r.accs.iter().map(|a| format!("{a:.4}")).collect();
        s.push_str(&format!("{},{},{:.4}±{:.4}\n", r.ablation, accs.join(","), r.mean(), r.std()));
    }
    s
}
