//! Pre-norm transformer encoder/decoder and the patch reconstruction head.
//!
//! Each block computes `h = x + Attn(LN(x + pos))` followed by
//! `h + MLP(LN(h))`, so position embeddings enter every block.

use crate::autodiff::{Init, ParamStore, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Graph, LayerNorm, Linear};

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Block {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            fc1: Linear::new(format!("{name}.fc1"), dim, dim * mlp_ratio),
            fc2: Linear::new(format!("{name}.fc2"), dim * mlp_ratio, dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.ln1.register(store)?;
        self.attn.register(store)?;
        self.ln2.register(store)?;
        self.fc1.register(store)?;
        self.fc2.register(store)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, pos: Var) -> Result<Var> {
        let a = g.add(x, pos)?;
        let a = self.ln1.forward(g, a)?;
        let a = self.attn.forward(g, a, a)?;
        let h = g.add(x, a)?;
        let m = self.ln2.forward(g, h)?;
        let m = self.fc1.forward(g, m)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, m)?;
        g.add(h, m)
    }
}

fn check_pos(g: &Graph, x: Var, pos: Var) -> Result<()> {
    if g.shape(x) != g.shape(pos) {
        return Err(Error::invalid(format!(
            "position embedding {:?} does not match tokens {:?}",
            g.shape(pos),
            g.shape(x)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Encoder {
            blocks: (0..depth)
                .map(|i| Block::new(&format!("encoder.blocks.{i}"), dim, heads, mlp_ratio))
                .collect(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.encoder_blocks, cfg.dim, cfg.heads, cfg.mlp_ratio)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.register(store))
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var, pos: Var) -> Result<Var> {
        check_pos(g, tokens, pos)?;
        self.blocks
            .iter()
            .try_fold(tokens, |x, b| b.forward(g, x, pos))
    }
}

pub const MASK_TOKEN: &str = "decoder.mask_token";

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dim: usize,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Decoder {
    pub fn new(depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Decoder {
            dim,
            blocks: (0..depth)
                .map(|i| Block::new(&format!("decoder.blocks.{i}"), dim, heads, mlp_ratio))
                .collect(),
            norm: LayerNorm::new("decoder.norm", dim),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.decoder_blocks, cfg.dim, cfg.heads, cfg.mlp_ratio)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init(MASK_TOKEN, &[1, self.dim], Init::TruncNormal)?;
        self.blocks.iter().try_for_each(|b| b.register(store))?;
        self.norm.register(store)
    }

    /// Appends `mask_count` copies of the mask token to the encoded visible
    /// tokens and decodes. `pos` must hold one row per visible token followed
    /// by one row per masked token. Returns the decoded visible and masked
    /// rows separately.
    pub fn forward(
        &self,
        g: &mut Graph,
        visible: Var,
        mask_count: usize,
        pos: Var,
    ) -> Result<(Var, Var)> {
        let vis = g.shape(visible).0;
        if mask_count == 0 {
            return Err(Error::invalid("decoder needs at least one masked token"));
        }
        if g.shape(pos).0 != vis + mask_count {
            return Err(Error::invalid(format!(
                "decoder position rows {} != {vis} visible + {mask_count} masked",
                g.shape(pos).0
            )));
        }
        let token = g.param(MASK_TOKEN)?;
        let masks = g.repeat_rows(token, mask_count)?;
        let x = g.concat_rows(&[visible, masks])?;
        check_pos(g, x, pos)?;
        let x = self
            .blocks
            .iter()
            .try_fold(x, |x, b| b.forward(g, x, pos))?;
        let x = self.norm.forward(g, x)?;
        let vis_rows: Vec<usize> = (0..vis).collect();
        let mask_rows: Vec<usize> = (vis..vis + mask_count).collect();
        Ok((g.gather_rows(x, &vis_rows)?, g.gather_rows(x, &mask_rows)?))
    }
}

/// Maps each decoded masked token to `k` local-coordinate points.
#[derive(Clone, Debug)]
pub struct ReconHead {
    pub linear: Linear,
    pub group_size: usize,
}

impl ReconHead {
    pub fn new(dim: usize, group_size: usize) -> Self {
        ReconHead {
            linear: Linear::new("recon", dim, 3 * group_size),
            group_size,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.linear.register(store)
    }

    /// `M x C` decoded tokens to `M x 3k` flattened patches.
    pub fn forward(&self, g: &mut Graph, decoded: Var) -> Result<Var> {
        self.linear.forward(g, decoded)
    }
}

/// Mean per-patch Chamfer distance between predicted and true local
/// patches, both `M x 3k`.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.patch_chamfer(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::zero_linear;

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed);
        s.init("x", &[rows, cols], Init::TruncNormal).unwrap();
        let mut t = s.get("x").unwrap().clone();
        t.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        t
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let enc = Encoder::new(2, 8, 2, 2);
        let mut store = ParamStore::new(1);
        enc.register(&mut store).unwrap();
        for b in &enc.blocks {
            zero_linear(&mut store, &b.attn.out).unwrap();
            zero_linear(&mut store, &b.fc2).unwrap();
        }
        let x = random_rows(5, 8, 2);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let pv = g.constant(random_rows(5, 8, 3));
        let y = enc.forward(&mut g, xv, pv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let enc = Encoder::new(2, 8, 2, 2);
        let mut store = ParamStore::new(5);
        enc.register(&mut store).unwrap();
        let x = random_rows(6, 8, 6);
        let p = random_rows(6, 8, 7);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |x: &Tensor, p: &Tensor| {
            let mut g = Graph::new(&store);
            let (xv, pv) = (g.constant(x.clone()), g.constant(p.clone()));
            let y = enc.forward(&mut g, xv, pv).unwrap();
            g.value(y).clone()
        };
        let y = run(&x, &p);
        let yp = run(&x.gather_rows(&perm), &p.gather_rows(&perm));
        assert!(yp.max_abs_diff(&y.gather_rows(&perm)) < 1e-12);
    }

    #[test]
    fn decoder_splits_visible_and_masked() {
        let dec = Decoder::new(1, 8, 2, 2);
        let mut store = ParamStore::new(2);
        dec.register(&mut store).unwrap();
        let mut g = Graph::new(&store);
        let vis = g.constant(random_rows(3, 8, 1));
        let pos = g.constant(random_rows(5, 8, 2));
        let (v, m) = dec.forward(&mut g, vis, 2, pos).unwrap();
        assert_eq!(g.shape(v), (3, 8));
        assert_eq!(g.shape(m), (2, 8));
        let bad = g.constant(random_rows(4, 8, 2));
        assert!(dec.forward(&mut g, vis, 2, bad).is_err());
    }

    #[test]
    fn mask_tokens_receive_gradient() {
        let dec = Decoder::new(1, 8, 2, 2);
        let head = ReconHead::new(8, 2);
        let mut store = ParamStore::new(3);
        dec.register(&mut store).unwrap();
        head.register(&mut store).unwrap();
        let mut g = Graph::new(&store);
        let vis = g.constant(random_rows(3, 8, 1));
        let pos = g.constant(random_rows(5, 8, 2));
        let (_, m) = dec.forward(&mut g, vis, 2, pos).unwrap();
        let pred = head.forward(&mut g, m).unwrap();
        let target = g.constant(random_rows(2, 6, 9));
        let loss = reconstruction_loss(&mut g, pred, target).unwrap();
        let grads = g.param_grads(loss).unwrap();
        assert!(grads[MASK_TOKEN].data().iter().any(|v| *v != 0.0));
    }
}
