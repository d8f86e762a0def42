//! Supervised fine-tuning of a classification head on a pretrained encoder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::heads::Classifier;
use crate::model::{Detached, SemanticMae};
use crate::nn::Graph;
use crate::pcsm::PROTOTYPES;
use crate::pipeline::data::{Dataset, Sample};
use crate::pipeline::pretrain::DATA_STREAM;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub struct FinetuneRun {
    pub prompted: bool,
    pub store: ParamStore,
    pub epochs: Vec<FinetuneEpoch>,
    pub feature_width: usize,
    pub sequence_len: usize,
}

impl FinetuneRun {
    pub fn final_epoch(&self) -> Option<&FinetuneEpoch> {
        self.epochs.last()
    }
}

/// Encoder plus classifier built from a pretrained parameter set.
pub struct ClassifierModel {
    pub model: SemanticMae,
    pub head: Classifier,
    pub groups: usize,
    pub group_size: usize,
}

impl ClassifierModel {
    /// Keeps the patch embedding and encoder (and the prototypes when
    /// prompted), drops everything else, and adds fresh head parameters.
    pub fn prepare(
        cfg: &RunConfig,
        pretrained: &ParamStore,
        classes: usize,
        prompted: bool,
    ) -> Result<(Self, ParamStore)> {
        if prompted && !pretrained.contains(PROTOTYPES) {
            return Err(Error::Config(
                "prompted fine-tuning needs a checkpoint with trained prototypes".into(),
            ));
        }
        let mut store = ParamStore::new(cfg.seed);
        for (name, p) in pretrained.iter() {
            let keep = name.starts_with("embed.")
                || name.starts_with("encoder.")
                || (prompted && name == PROTOTYPES);
            if keep {
                store.insert(name, p.value.clone())?;
            }
        }
        let head = Classifier::from_config(cfg, classes, prompted);
        head.register(&mut store)?;
        let this = ClassifierModel {
            model: SemanticMae::from_config(cfg),
            head,
            groups: cfg.groups,
            group_size: cfg.group_size,
        };
        Ok((this, store))
    }

    /// Class logits for one cloud.
    pub fn logits(&self, g: &mut Graph, patches: &PatchSet) -> Result<Var> {
        let complete = match self.head.prompts {
            Some(_) => Some(self.model.encode_complete(g.store(), patches)?),
            None => None,
        };
        self.logits_with(g, patches, complete.as_ref())
    }

    /// Class logits with the prompt inputs given explicitly; the prompted
    /// head needs `complete`.
    pub fn logits_with(
        &self,
        g: &mut Graph,
        patches: &PatchSet,
        complete: Option<&Detached>,
    ) -> Result<Var> {
        let (tokens, pos) = self.model.embed.embed(g, patches)?;
        let prompts = match (self.head.prompts, complete) {
            (Some(_), Some(c)) => Some(self.model.prompts(g, c, patches)?),
            (Some(_), None) => {
                return Err(Error::invalid(
                    "prompted head needs the complete-cloud encoding",
                ))
            }
            (None, _) => None,
        };
        let f = self
            .head
            .features(g, &self.model.encoder, tokens, pos, prompts)?;
        self.head.logits(g, f)
    }

    pub fn predict(&self, store: &ParamStore, sample: &Sample) -> Result<usize> {
        let patches = PatchSet::build(&sample.cloud, self.groups, self.group_size, 0)?;
        let mut g = Graph::new(store);
        let logits = g.frozen(|g| self.logits(g, &patches))?;
        Ok(crate::pcsm::argmax_rows(g.value(logits))[0])
    }

    pub fn accuracy(&self, store: &ParamStore, samples: &[Sample]) -> Result<f64> {
        let mut hits = 0;
        for s in samples {
            hits += (self.predict(store, s)? == s.class) as usize;
        }
        Ok(hits as f64 / samples.len().max(1) as f64)
    }
}

/// Fine-tunes on the training split and reports per-epoch loss, running
/// train accuracy and validation accuracy. Stops early once an epoch's
/// train accuracy reaches `finetune_target_acc` (when positive). With
/// `out` set, writes `finetune.jsonl` there.
pub fn finetune(
    cfg: &RunConfig,
    pretrained: &ParamStore,
    prompted: bool,
    out: Option<&Path>,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let (net, mut store) = ClassifierModel::prepare(cfg, pretrained, data.classes(), prompted)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.finetune_lr,
        ..cfg.optimizer()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    rng.set_stream(DATA_STREAM);
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("finetune.jsonl"))?))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.finetune_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            for &idx in batch {
                let sample = &data.train[idx];
                let start = rng.gen_range(0..sample.cloud.len());
                let patches = PatchSet::build(&sample.cloud, cfg.groups, cfg.group_size, start)?;
                let grads = {
                    let mut g = Graph::new(&store);
                    let logits = net.logits(&mut g, &patches)?;
                    hits += (crate::pcsm::argmax_rows(g.value(logits))[0] == sample.class) as usize;
                    let loss = g.nll_rows(logits, &[sample.class])?;
                    loss_sum += g.value(loss).item();
                    g.param_grads(loss)?
                };
                store.accumulate_grads(&grads, 1.0 / batch.len() as f64)?;
            }
            opt.step(&mut store)?;
        }
        let n = data.train.len() as f64;
        let e = FinetuneEpoch {
            epoch,
            loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_acc: net.accuracy(&store, &data.val)?,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            e.loss,
            e.train_acc,
            e.val_acc
        );
        if let Some(w) = &mut log {
            serde_json::to_writer(&mut *w, &e).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.write_all(b"\n")?;
        }
        let done = cfg.finetune_target_acc > 0.0 && e.train_acc >= cfg.finetune_target_acc;
        epochs.push(e);
        if done {
            break;
        }
    }
    if let Some(w) = &mut log {
        w.flush()?;
    }
    Ok(FinetuneRun {
        prompted,
        feature_width: net.head.feature_width(),
        sequence_len: net.head.sequence_len(cfg.groups),
        store,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::pretrain::pretrain;

    #[test]
    fn both_heads_train_on_toy() {
        let cfg = RunConfig::toy();
        let pre = pretrain(&cfg, None).unwrap();
        for prompted in [false, true] {
            let run = finetune(&cfg, &pre.store, prompted, None).unwrap();
            assert_eq!(run.epochs.len(), cfg.finetune_epochs);
            assert_eq!(run.feature_width, if prompted { 48 } else { 32 });
            assert!(!run.store.contains("decoder.norm.gain"));
            assert_eq!(run.store.contains(PROTOTYPES), prompted);
        }
    }

    #[test]
    fn prompted_head_requires_prototypes() {
        let cfg = RunConfig::toy();
        let mut store = SemanticMae::init_store(&cfg).unwrap();
        store.remove_prefix("pcsm.");
        let err = ClassifierModel::prepare(&cfg, &store, 4, true)
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), 2);
    }
}
