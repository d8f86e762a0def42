//! Finite-difference verification of every training loss on the toy
//! configuration.
//!
//! Parameters are jittered away from their initial values first, so no
//! ReLU sits exactly at its kink and no max-pool has ties. Gradient-free
//! inputs (the complete-cloud encoding) are computed once from the
//! unperturbed parameters and held fixed, matching the stop-gradient.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::gradcheck::{check_gradients, GradReport, FD_STEP};
use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{make_shape, PatchSet, ShapeKind};
use crate::masking::random_mask;
use crate::model::{Masking, PretrainStep, SemanticMae};
use crate::nn::Graph;
use crate::pipeline::finetune::ClassifierModel;

type Pick = fn(&PretrainStep) -> crate::autodiff::Var;
type Case = (&'static str, Pick, fn(&str) -> bool);

pub const JITTER_STD: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub loss: &'static str,
    pub report: GradReport,
    pub seconds: f64,
}

/// Adds N(0, JITTER_STD^2) to every parameter entry.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, JITTER_STD).expect("valid std");
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

fn select(
    grads: BTreeMap<String, Tensor>,
    keep: impl Fn(&str) -> bool,
) -> BTreeMap<String, Tensor> {
    grads.into_iter().filter(|(k, _)| keep(k)).collect()
}

/// Runs the suite on `cfg` (normally [`RunConfig::toy`]).
pub fn gradient_suite(cfg: &RunConfig) -> Result<Vec<GradCase>> {
    cfg.validate()?;
    let model = SemanticMae::from_config(cfg);
    let mut store = SemanticMae::init_store(cfg)?;
    jitter(&mut store, cfg.seed);
    let cloud = make_shape(ShapeKind::Chair, cfg.n_points, cfg.seed)?;
    let points = cloud.to_tensor();
    let patches = PatchSet::build(&cloud, cfg.groups, cfg.group_size, 0)?;
    let complete = model.encode_complete(&store, &patches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = random_mask(cfg.groups, cfg.mask_ratio, &mut rng)?;

    let forward = |s: &ParamStore, pick: fn(&PretrainStep) -> crate::autodiff::Var| {
        let mut g = Graph::new(s);
        let step = model.pretrain_step::<ChaCha8Rng>(
            &mut g,
            &patches,
            &points,
            &complete,
            Masking::Fixed(&plan),
        )?;
        let loss = pick(&step);
        Ok::<_, crate::Error>((g.value(loss).item(), g.param_grads(loss)?))
    };

    let pretrain_cases: [Case; 3] = [
        ("recon", |s| s.recon_loss, |n| !n.starts_with("pcsm.")),
        ("proto", |s| s.proto_loss, |n| n.starts_with("pcsm.")),
        ("cont", |s| s.cont_loss, |n| n == crate::pcsm::PROTOTYPES),
    ];
    let mut cases = Vec::new();
    for (name, pick, keep) in pretrain_cases {
        let t = Instant::now();
        let (_, grads) = forward(&store, pick)?;
        let grads = select(grads, keep);
        let report = check_gradients(&store, &grads, FD_STEP, |s| Ok(forward(s, pick)?.0))?;
        cases.push(GradCase {
            loss: name,
            report,
            seconds: t.elapsed().as_secs_f64(),
        });
    }

    for (name, prompted) in [("ce_baseline", false), ("ce_prompted", true)] {
        let t = Instant::now();
        let (net, mut head_store) = ClassifierModel::prepare(cfg, &store, 4, prompted)?;
        jitter(&mut head_store, cfg.seed + 1);
        let complete = net.model.encode_complete(&head_store, &patches)?;
        let class = ShapeKind::Chair.class_id();
        let ce = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let logits = net.logits_with(&mut g, &patches, Some(&complete))?;
            let loss = g.nll_rows(logits, &[class])?;
            Ok::<_, crate::Error>((g.value(loss).item(), g.param_grads(loss)?))
        };
        let (_, grads) = ce(&head_store)?;
        let report = check_gradients(&head_store, &grads, FD_STEP, |s| Ok(ce(s)?.0))?;
        cases.push(GradCase {
            loss: name,
            report,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(cases)
}
