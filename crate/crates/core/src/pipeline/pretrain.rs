//! Self-supervised pretraining loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AdamW, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::model::{Masking, SemanticMae};
use crate::nn::Graph;
use crate::pipeline::checkpoint::{Checkpoint, RngState};
use crate::pipeline::data::Dataset;
use crate::pipeline::metrics::{assignment_entropy, purity};

/// Stream ids keeping data order independent of mask sampling.
pub const DATA_STREAM: u64 = 1;
pub const MASK_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_proto: f64,
    pub loss_cont: f64,
    /// Mean entropy (nats) of the per-cloud component histogram.
    pub grouping_entropy: f64,
    /// Mean token purity against the generator's part labels.
    pub purity: f64,
    pub coverage: f64,
}

/// Per-batch record of how well masking covered the reference components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub coverage_mean: f64,
    pub coverage_min: f64,
}

#[derive(Serialize)]
struct MaskRecord<'a> {
    epoch: usize,
    step: usize,
    cloud: usize,
    strategy: &'a str,
    mask: String,
    assignment: &'a [usize],
}

pub struct PretrainRun {
    pub config: RunConfig,
    pub store: ParamStore,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
    pub init_hash: String,
    pub data_hash: String,
    pub rngs: Vec<RngState>,
    pub seconds: f64,
}

impl PretrainRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.store.clone(), self.rngs.clone())
    }
}

/// Part label of each patch center.
pub fn center_labels(labels: &[usize], patches: &PatchSet) -> Vec<usize> {
    patches.center_points().iter().map(|&i| labels[i]).collect()
}

fn jsonl<T: Serialize>(w: &mut Option<BufWriter<File>>, value: &T) -> Result<()> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Pretrains on the training split. With `out` set, writes `metrics.jsonl`,
/// `masks.jsonl` and `checkpoint.bin` there.
pub fn pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<PretrainRun> {
    cfg.validate()?;
    let start_time = Instant::now();
    let data = Dataset::generate(cfg)?;
    let model = SemanticMae::from_config(cfg);
    let mut store = SemanticMae::init_store(cfg)?;
    let init_hash = store.fingerprint();
    let data_hash = data.fingerprint();
    let mut opt = AdamW::new(cfg.optimizer());
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(DATA_STREAM);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(MASK_STREAM);

    let (mut metrics_out, mut masks_out) = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            (
                Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?)),
                Some(BufWriter::new(File::create(dir.join("masks.jsonl"))?)),
            )
        }
        None => (None, None),
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut data_rng);
        let mut sums = [0.0f64; 4];
        let (mut entropy, mut pur, mut cov) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut coverages = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &data.train[idx];
                let start = data_rng.gen_range(0..sample.cloud.len());
                let patches = PatchSet::build(&sample.cloud, cfg.groups, cfg.group_size, start)?;
                let complete = model.encode_complete(&store, &patches)?;
                let grads;
                {
                    let mut g = Graph::new(&store);
                    let res = model.pretrain_step(
                        &mut g,
                        &patches,
                        &sample.cloud.to_tensor(),
                        &complete,
                        Masking::Sampled {
                            strategy: cfg.strategy,
                            ratio: cfg.mask_ratio,
                            components: cfg.mask_components,
                            rng: &mut mask_rng,
                        },
                    )?;
                    for (s, v) in sums.iter_mut().zip([
                        res.total,
                        res.recon_loss,
                        res.proto_loss,
                        res.cont_loss,
                    ]) {
                        *s += g.value(v).item();
                    }
                    grads = g.param_grads(res.total)?;
                    entropy += assignment_entropy(&res.assignment);
                    if let Some(labels) = &sample.cloud.labels {
                        pur += purity(&res.assignment, &center_labels(labels, &patches));
                    }
                    let c = res.plan.coverage(&res.assignment);
                    cov += c;
                    coverages.push(c);
                    jsonl(
                        &mut masks_out,
                        &MaskRecord {
                            epoch,
                            step,
                            cloud: idx,
                            strategy: cfg.strategy.name(),
                            mask: res.plan.bitstring(),
                            assignment: &res.assignment,
                        },
                    )?;
                }
                store.accumulate_grads(&grads, 1.0 / batch.len() as f64)?;
            }
            opt.step(&mut store)?;
            steps.push(StepMetrics {
                epoch,
                step,
                coverage_mean: coverages.iter().sum::<f64>() / coverages.len() as f64,
                coverage_min: coverages.iter().copied().fold(f64::INFINITY, f64::min),
            });
            step += 1;
        }
        let n = data.train.len() as f64;
        let m = EpochMetrics {
            epoch,
            loss_total: sums[0] / n,
            loss_recon: sums[1] / n,
            loss_proto: sums[2] / n,
            loss_cont: sums[3] / n,
            grouping_entropy: entropy / n,
            purity: pur / n,
            coverage: cov / n,
        };
        log::info!(
            "epoch {epoch}: total {:.5} recon {:.5} proto {:.5} cont {:.5} purity {:.3}",
            m.loss_total,
            m.loss_recon,
            m.loss_proto,
            m.loss_cont,
            m.purity
        );
        jsonl(&mut metrics_out, &m)?;
        epochs.push(m);
    }
    for w in [&mut metrics_out, &mut masks_out].into_iter().flatten() {
        w.flush()?;
    }
    let run = PretrainRun {
        config: cfg.clone(),
        store,
        epochs,
        steps,
        init_hash,
        data_hash,
        rngs: vec![RngState::capture(&data_rng), RngState::capture(&mask_rng)],
        seconds: start_time.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        run.checkpoint().save(&dir.join("checkpoint.bin"))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_run_is_reproducible() {
        let cfg = RunConfig::toy();
        let a = pretrain(&cfg, None).unwrap();
        let b = pretrain(&cfg, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.store.fingerprint(), b.store.fingerprint());
        assert_eq!(a.epochs.len(), cfg.epochs);
        assert_eq!(a.steps.len(), cfg.epochs * 3);
    }
}
