//! The full pretraining network and its per-cloud loss.

use rand::Rng;

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::backbone::{reconstruction_loss, Decoder, Encoder, ReconHead};
use crate::config::RunConfig;
use crate::embedding::PatchEmbed;
use crate::error::Result;
use crate::geometry::PatchSet;
use crate::masking::{block_mask, csem_mask, random_mask, MaskPlan, Strategy};
use crate::nn::Graph;
use crate::pcsm::{knorm_enhance, update_prototypes, Pcsm, PROTOTYPES};

/// How the masked tokens of one cloud are chosen.
pub enum Masking<'a, R: Rng + ?Sized> {
    Fixed(&'a MaskPlan),
    Sampled {
        strategy: Strategy,
        ratio: f64,
        components: usize,
        rng: &'a mut R,
    },
}

/// Encoder output and position embeddings of a complete cloud, used where
/// gradients are stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    pub encoded: Tensor,
    pub pos: Tensor,
}

/// Graph handles and bookkeeping of one pretraining forward pass.
pub struct PretrainStep {
    pub total: Var,
    pub recon_loss: Var,
    pub proto_loss: Var,
    pub cont_loss: Var,
    pub plan: MaskPlan,
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SemanticMae {
    pub embed: PatchEmbed,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub recon: ReconHead,
    pub pcsm: Pcsm,
    pub lambda_proto: f64,
    pub lambda_cont: f64,
}

impl SemanticMae {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SemanticMae {
            embed: PatchEmbed::from_config(cfg),
            encoder: Encoder::from_config(cfg),
            decoder: Decoder::from_config(cfg),
            recon: ReconHead::new(cfg.dim, cfg.group_size),
            pcsm: Pcsm::from_config(cfg),
            lambda_proto: cfg.lambda_proto,
            lambda_cont: cfg.lambda_cont,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.embed.register(store)?;
        self.encoder.register(store)?;
        self.decoder.register(store)?;
        self.recon.register(store)?;
        self.pcsm.register(store)
    }

    /// Freshly initialised parameters for `cfg`.
    pub fn init_store(cfg: &RunConfig) -> Result<ParamStore> {
        let mut store = ParamStore::new(cfg.seed);
        Self::from_config(cfg).register(&mut store)?;
        Ok(store)
    }

    /// Encoded tokens and position embeddings of the complete cloud,
    /// evaluated without gradient.
    pub fn encode_complete(&self, store: &ParamStore, patches: &PatchSet) -> Result<Detached> {
        let mut g = Graph::new(store);
        g.frozen(|g| {
            let (t, p) = self.embed.embed(g, patches)?;
            let e = self.encoder.forward(g, t, p)?;
            Ok(Detached {
                encoded: g.value(e).clone(),
                pos: g.value(p).clone(),
            })
        })
    }

    /// Updated prototypes for prompting: the prototype parameter attends
    /// over the (smoothed) encoded tokens, which enter as constants.
    pub fn prompts(&self, g: &mut Graph, complete: &Detached, patches: &PatchSet) -> Result<Var> {
        let te = match self.pcsm.knorm_k {
            Some(k2) => knorm_enhance(&complete.encoded, &patches.centers, k2)?,
            None => complete.encoded.clone(),
        };
        let te = g.constant(te);
        let p = g.param(PROTOTYPES)?;
        update_prototypes(g, p, te)
    }

    /// Total pretraining loss of one cloud:
    /// masked patch reconstruction plus the weighted prototype losses.
    /// `complete` is the gradient-free encoding of the whole cloud (see
    /// [`Self::encode_complete`]).
    pub fn pretrain_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        patches: &PatchSet,
        points: &Tensor,
        complete: &Detached,
        masking: Masking<'_, R>,
    ) -> Result<PretrainStep> {
        let out = self.pcsm.forward(
            g,
            &complete.encoded,
            &complete.pos,
            &patches.centers,
            points,
        )?;
        let (tokens, pos) = self.embed.embed(g, patches)?;

        let plan = match masking {
            Masking::Fixed(plan) => plan.clone(),
            Masking::Sampled {
                strategy,
                ratio,
                components,
                rng,
            } => match strategy {
                Strategy::RandM => random_mask(patches.len(), ratio, rng)?,
                Strategy::RandBm => block_mask(&patches.centers, ratio, rng)?,
                Strategy::Csem => csem_mask(&out.assignment, components, ratio, rng)?,
            },
        };
        let vis = plan.visible_indices();
        let masked = plan.masked_indices();
        let vis_tokens = g.gather_rows(tokens, &vis)?;
        let vis_pos = g.gather_rows(pos, &vis)?;
        let encoded = self.encoder.forward(g, vis_tokens, vis_pos)?;
        let order: Vec<usize> = vis.iter().chain(&masked).copied().collect();
        let seq_pos = g.gather_rows(pos, &order)?;
        let (_, decoded) = self.decoder.forward(g, encoded, masked.len(), seq_pos)?;
        let pred = self.recon.forward(g, decoded)?;
        let target = g.constant(patches.local_rows(&masked));
        let recon_loss = reconstruction_loss(g, pred, target)?;

        let lp = g.scale(out.proto_loss, self.lambda_proto)?;
        let lc = g.scale(out.cont_loss, self.lambda_cont)?;
        let total = g.add(recon_loss, lp)?;
        let total = g.add(total, lc)?;
        Ok(PretrainStep {
            total,
            recon_loss,
            proto_loss: out.proto_loss,
            cont_loss: out.cont_loss,
            plan,
            assignment: out.assignment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_shape, ShapeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pretrain_step_runs_and_reaches_every_parameter() {
        let cfg = RunConfig::toy();
        let model = SemanticMae::from_config(&cfg);
        let store = SemanticMae::init_store(&cfg).unwrap();
        let cloud = make_shape(ShapeKind::Chair, cfg.n_points, 0).unwrap();
        let patches = PatchSet::build(&cloud, cfg.groups, cfg.group_size, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let complete = model.encode_complete(&store, &patches).unwrap();
        let mut g = Graph::new(&store);
        let step = model
            .pretrain_step(
                &mut g,
                &patches,
                &cloud.to_tensor(),
                &complete,
                Masking::Sampled {
                    strategy: Strategy::Csem,
                    ratio: cfg.mask_ratio,
                    components: 1,
                    rng: &mut rng,
                },
            )
            .unwrap();
        assert_eq!(step.plan.masked_count(), 5);
        assert!(g.value(step.total).item().is_finite());
        let grads = g.param_grads(step.total).unwrap();
        let missing: Vec<&str> = store.names().filter(|n| !grads.contains_key(*n)).collect();
        assert!(missing.is_empty(), "{missing:?}");
    }
}
