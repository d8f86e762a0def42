//! Classification heads on the pretrained encoder.
//!
//! The baseline head prepends a learnable class token and classifies
//! `[cls | max-pooled tokens]`. The prompted head additionally inserts the
//! updated prototypes between the class token and the patch tokens (with
//! zero position embeddings) and appends their max-pooled encoding.

use crate::autodiff::{Init, ParamStore, Tensor, Var};
use crate::backbone::Encoder;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, Linear};

pub const CLS_TOKEN: &str = "cls.token";
pub const CLS_POS: &str = "cls.pos";

#[derive(Clone, Debug)]
pub struct Classifier {
    pub dim: usize,
    pub classes: usize,
    /// Prompted variant when set.
    pub prompts: Option<usize>,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Classifier {
    pub fn new(dim: usize, hidden: usize, classes: usize, prompts: Option<usize>) -> Self {
        let width = if prompts.is_some() { 3 * dim } else { 2 * dim };
        Classifier {
            dim,
            classes,
            prompts,
            norm: LayerNorm::new("cls.norm", dim),
            fc1: Linear::new("cls.head.fc1", width, hidden),
            fc2: Linear::new("cls.head.fc2", hidden, classes),
        }
    }

    pub fn from_config(cfg: &RunConfig, classes: usize, prompted: bool) -> Self {
        Self::new(
            cfg.dim,
            cfg.head_hidden,
            classes,
            prompted.then_some(cfg.prototypes),
        )
    }

    /// Width of the pooled feature fed to the MLP.
    pub fn feature_width(&self) -> usize {
        self.fc1.in_dim
    }

    /// Sequence length seen by the encoder for `tokens` patch tokens.
    pub fn sequence_len(&self, tokens: usize) -> usize {
        1 + self.prompts.unwrap_or(0) + tokens
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init(CLS_TOKEN, &[1, self.dim], Init::TruncNormal)?;
        store.init(CLS_POS, &[1, self.dim], Init::TruncNormal)?;
        self.norm.register(store)?;
        self.fc1.register(store)?;
        self.fc2.register(store)
    }

    /// Pooled `1 x feature_width` representation of one cloud.
    pub fn features(
        &self,
        g: &mut Graph,
        encoder: &Encoder,
        tokens: Var,
        pos: Var,
        prompts: Option<Var>,
    ) -> Result<Var> {
        let q = match (self.prompts, prompts) {
            (Some(q), Some(p)) if g.shape(p) == (q, self.dim) => q,
            (None, None) => 0,
            (Some(q), Some(p)) => {
                return Err(Error::invalid(format!(
                    "expected {q} x {} prompts, got {:?}",
                    self.dim,
                    g.shape(p)
                )))
            }
            (Some(_), None) => return Err(Error::invalid("prompted head needs prototypes")),
            (None, Some(_)) => return Err(Error::invalid("baseline head takes no prototypes")),
        };
        let n = g.shape(tokens).0;
        let cls = g.param(CLS_TOKEN)?;
        let cls_pos = g.param(CLS_POS)?;
        let (seq, seq_pos) = match prompts {
            Some(p) => {
                let zero = g.constant(Tensor::zeros(&[q, self.dim]));
                (
                    g.concat_rows(&[cls, p, tokens])?,
                    g.concat_rows(&[cls_pos, zero, pos])?,
                )
            }
            None => (
                g.concat_rows(&[cls, tokens])?,
                g.concat_rows(&[cls_pos, pos])?,
            ),
        };
        let out = encoder.forward(g, seq, seq_pos)?;
        let out = self.norm.forward(g, out)?;
        let cls_e = g.gather_rows(out, &[0])?;
        let token_rows: Vec<usize> = (1 + q..1 + q + n).collect();
        let t = g.gather_rows(out, &token_rows)?;
        let fg = g.max_over_rows(t)?;
        if q == 0 {
            return g.concat_cols(&[cls_e, fg]);
        }
        let prompt_rows: Vec<usize> = (1..=q).collect();
        let pe = g.gather_rows(out, &prompt_rows)?;
        let pg = g.max_over_rows(pe)?;
        g.concat_cols(&[cls_e, pg, fg])
    }

    /// `1 x classes` logits from pooled features.
    pub fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let h = self.fc1.forward(g, features)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_linear;

    fn setup(prompted: bool) -> (Encoder, Classifier, ParamStore) {
        let enc = Encoder::new(2, 8, 2, 2);
        let head = Classifier::new(8, 16, 4, prompted.then_some(3));
        let mut store = ParamStore::new(11);
        enc.register(&mut store).unwrap();
        head.register(&mut store).unwrap();
        (enc, head, store)
    }

    fn rows(r: usize, c: usize, seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed);
        s.init("x", &[r, c], Init::TruncNormal).unwrap();
        let mut t = s.get("x").unwrap().clone();
        t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        t
    }

    #[test]
    fn feature_widths_and_lengths() {
        let (_, base, _) = setup(false);
        let (_, prompted, _) = setup(true);
        assert_eq!(base.feature_width(), 16);
        assert_eq!(prompted.feature_width(), 24);
        assert_eq!(prompted.sequence_len(5), 9);
    }

    #[test]
    fn zero_prompts_leave_prefix_unchanged_without_mixing() {
        let (enc, base, mut store) = setup(false);
        let prompted = Classifier::new(8, 16, 4, Some(3));
        for b in &enc.blocks {
            zero_linear(&mut store, &b.attn.out).unwrap();
        }
        let (t, p) = (rows(5, 8, 1), rows(5, 8, 2));
        let mut g = Graph::new(&store);
        let (tv, pv) = (g.constant(t), g.constant(p));
        let fb = base.features(&mut g, &enc, tv, pv, None).unwrap();
        let zero = g.constant(Tensor::zeros(&[3, 8]));
        let fp = prompted.features(&mut g, &enc, tv, pv, Some(zero)).unwrap();
        let fb = g.value(fb).data().to_vec();
        let fp = g.value(fp).data().to_vec();
        assert_eq!(&fp[..8], &fb[..8]);
        assert_eq!(&fp[16..], &fb[8..]);
    }

    #[test]
    fn logits_have_class_count() {
        let (enc, head, store) = setup(true);
        let mut g = Graph::new(&store);
        let (tv, pv) = (g.constant(rows(5, 8, 3)), g.constant(rows(5, 8, 4)));
        let pr = g.constant(rows(3, 8, 5));
        let f = head.features(&mut g, &enc, tv, pv, Some(pr)).unwrap();
        let l = head.logits(&mut g, f).unwrap();
        assert_eq!(g.shape(l), (1, 4));
        assert!(head.features(&mut g, &enc, tv, pv, None).is_err());
    }
}
