//! Controlled comparison of masking strategies.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::Strategy;
use crate::pipeline::finetune::finetune;
use crate::pipeline::pretrain::pretrain;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_proto: f64,
    pub loss_cont: f64,
    pub purity: f64,
    pub coverage_mean: f64,
    pub coverage_min: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub init_hash: String,
    pub data_hash: String,
}

/// Pretrains once per strategy from identical initial weights and data,
/// then fine-tunes the baseline head on each result. With `out` set, each
/// strategy's logs go to `out/<strategy>/` and the table to
/// `out/ablation.csv`.
pub fn ablate(
    cfg: &RunConfig,
    strategies: &[Strategy],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for &strategy in strategies {
        let c = RunConfig {
            strategy,
            ..cfg.clone()
        };
        let dir = out.map(|d| d.join(strategy.name()));
        let pre = pretrain(&c, dir.as_deref())?;
        let fine = finetune(&c, &pre.store, false, dir.as_deref())?;
        let last = pre
            .epochs
            .last()
            .ok_or_else(|| Error::Config("ablation needs at least one epoch".into()))?;
        let fe = fine
            .final_epoch()
            .ok_or_else(|| Error::Config("ablation needs at least one fine-tuning epoch".into()))?;
        let row = AblationRow {
            strategy: strategy.name().to_string(),
            loss_total: last.loss_total,
            loss_recon: last.loss_recon,
            loss_proto: last.loss_proto,
            loss_cont: last.loss_cont,
            purity: last.purity,
            coverage_mean: pre.steps.iter().map(|s| s.coverage_mean).sum::<f64>()
                / pre.steps.len().max(1) as f64,
            coverage_min: pre
                .steps
                .iter()
                .map(|s| s.coverage_min)
                .fold(f64::INFINITY, f64::min),
            train_acc: fe.train_acc,
            val_acc: fe.val_acc,
            init_hash: pre.init_hash.clone(),
            data_hash: pre.data_hash.clone(),
        };
        if let Some(first) = rows.first() {
            if first.init_hash != row.init_hash || first.data_hash != row.data_hash {
                return Err(Error::Invariant(format!(
                    "strategy {strategy} did not start from the same weights and data"
                )));
            }
        }
        rows.push(row);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &rows {
            w.serialize(r)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    Ok(rows)
}
