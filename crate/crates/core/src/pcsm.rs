//! Prototype-based component semantic modelling.
//!
//! Learnable prototypes attend over the tokens of the complete cloud, the
//! tokens attend back over the updated prototypes, and every token is
//! assigned to its most similar prototype. Two losses shape the prototypes:
//! a reconstruction of the whole cloud from per-token prototype features
//! and a contrastive term that keeps prototypes apart.

use crate::autodiff::{Init, ParamStore, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{knn, Point};
use crate::nn::{Attention, Graph, LayerNorm, Linear};

pub const PROTOTYPES: &str = "pcsm.prototypes";

/// Guard added to the neighbourhood standard deviation before dividing.
pub const KNORM_EPS: f64 = 1e-5;

/// Parameter-free local smoothing of encoded tokens.
///
/// For each token, gathers the `k2` tokens with the nearest patch centers
/// (itself included). Per channel, the gathered rows are offset by the
/// token's own feature and divided by the neighbourhood standard deviation
/// plus [`KNORM_EPS`]; the mean of these rows is added back to the token.
/// A channel with zero spread contributes nothing.
pub fn knorm_enhance(tokens: &Tensor, centers: &[Point], k2: usize) -> Result<Tensor> {
    let (g, c) = (tokens.rows(), tokens.cols());
    if centers.len() != g {
        return Err(Error::invalid(format!(
            "knorm: {} centers for {g} tokens",
            centers.len()
        )));
    }
    let ids: Vec<usize> = (0..g).collect();
    let hoods = knn(centers, &ids, k2)?;
    let mut out = tokens.clone();
    let inv = 1.0 / k2 as f64;
    for hood in &hoods {
        let i = hood.center_point;
        let own = tokens.row(i);
        let row = out.row_mut(i);
        for ch in 0..c {
            let vals = hood.member_indices.iter().map(|&j| tokens.at(j, ch));
            let mean = vals.clone().sum::<f64>() * inv;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv;
            row[ch] += (mean - own[ch]) / (var.sqrt() + KNORM_EPS);
        }
    }
    Ok(out)
}

/// `softmax(p te^T / sqrt(C)) te`: each prototype becomes an
/// attention-weighted average of the tokens.
pub fn update_prototypes(g: &mut Graph, prototypes: Var, tokens: Var) -> Result<Var> {
    let (_, pc) = g.shape(prototypes);
    let (_, tc) = g.shape(tokens);
    if pc != tc {
        return Err(Error::invalid(format!(
            "prototype width {pc} does not match token width {tc}"
        )));
    }
    let tt = g.transpose(tokens)?;
    let logits = g.matmul(prototypes, tt)?;
    let logits = g.scale(logits, 1.0 / (pc as f64).sqrt())?;
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, tokens)
}

/// `softmax(t p^T / sqrt(C))`, one row per token.
pub fn similarity(g: &mut Graph, tokens: Var, prototypes: Var) -> Result<Var> {
    let (_, c) = g.shape(tokens);
    let pt = g.transpose(prototypes)?;
    let logits = g.matmul(tokens, pt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    g.softmax_rows(logits)
}

/// Column of the largest entry in each row, lowest index on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// InfoNCE over L2-normalised prototypes where each prototype is its own
/// positive: `sum_i -log softmax_j(cos(p_i, p_j) / eps)[i]`.
pub fn contrastive_loss(g: &mut Graph, prototypes: Var, temperature: f64) -> Result<Var> {
    let q = g.shape(prototypes).0;
    let n = g.l2_normalize_rows(prototypes)?;
    let nt = g.transpose(n)?;
    let cos = g.matmul(n, nt)?;
    let logits = g.scale(cos, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..q).collect();
    g.nll_rows(logits, &targets)
}

/// Everything one pass of the module produces.
pub struct PcsmOutput {
    /// Updated prototypes, `Q x C`.
    pub prototypes: Var,
    /// Tokens after the prototype cross-attention, `G x C`.
    pub enhanced: Var,
    /// Token-to-prototype similarity, `G x Q`.
    pub similarity: Tensor,
    pub assignment: Vec<usize>,
    /// Predicted complete cloud, `(G*k') x 3`.
    pub reconstruction: Var,
    pub proto_loss: Var,
    pub cont_loss: Var,
}

#[derive(Clone, Debug)]
pub struct Pcsm {
    pub dim: usize,
    pub prototypes: usize,
    pub temperature: f64,
    /// Points predicted per token.
    pub fanout: usize,
    /// Neighbourhood size of the token smoothing, `None` to skip it.
    pub knorm_k: Option<usize>,
    pub enh: Attention,
    pub enh_norm: LayerNorm,
    pub ppr1: Linear,
    pub ppr2: Linear,
}

impl Pcsm {
    pub fn new(
        dim: usize,
        heads: usize,
        prototypes: usize,
        temperature: f64,
        fanout: usize,
        knorm_k: Option<usize>,
    ) -> Self {
        Pcsm {
            dim,
            prototypes,
            temperature,
            fanout,
            knorm_k,
            enh: Attention::new("pcsm.enh", dim, heads),
            enh_norm: LayerNorm::new("pcsm.enh_norm", dim),
            ppr1: Linear::new("pcsm.ppr.fc1", 2 * dim, 2 * dim),
            ppr2: Linear::new("pcsm.ppr.fc2", 2 * dim, 3 * fanout),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(
            cfg.dim,
            cfg.heads,
            cfg.prototypes,
            cfg.temperature,
            cfg.ppr_fanout(),
            cfg.knorm.then_some(cfg.knorm_k),
        )
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init(PROTOTYPES, &[self.prototypes, self.dim], Init::TruncNormal)?;
        self.enh.register(store)?;
        self.enh_norm.register(store)?;
        self.ppr1.register(store)?;
        self.ppr2.register(store)
    }

    /// `LN(te + CrossAttn(te, p_hat))`.
    pub fn enhance_tokens(&self, g: &mut Graph, tokens: Var, prototypes: Var) -> Result<Var> {
        let a = self.enh.forward(g, tokens, prototypes)?;
        let h = g.add(tokens, a)?;
        self.enh_norm.forward(g, h)
    }

    /// Predicts `fanout` points per token from `[p_hat[assign(i)] | pos_i]`
    /// and returns the prediction with its Chamfer loss against `points`
    /// divided by the token count.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        prototypes: Var,
        pos: Var,
        assignment: &[usize],
        points: Var,
    ) -> Result<(Var, Var)> {
        let tokens = g.shape(pos).0;
        if assignment.len() != tokens {
            return Err(Error::invalid(format!(
                "{} assignments for {tokens} tokens",
                assignment.len()
            )));
        }
        let picked = g.gather_rows(prototypes, assignment)?;
        let f = g.concat_cols(&[picked, pos])?;
        let h = self.ppr1.forward(g, f)?;
        let h = g.gelu(h)?;
        let out = self.ppr2.forward(g, h)?;
        let pred = g.reshape(out, &[tokens * self.fanout, 3])?;
        let cd = g.chamfer(pred, points)?;
        let loss = g.scale(cd, 1.0 / tokens as f64)?;
        Ok((pred, loss))
    }

    /// Runs the module on encoded tokens of a complete cloud. `tokens` and
    /// `pos` enter as constants, so gradients reach only the prototypes,
    /// the cross-attention and the reconstruction head.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &Tensor,
        pos: &Tensor,
        centers: &[Point],
        points: &Tensor,
    ) -> Result<PcsmOutput> {
        let te = match self.knorm_k {
            Some(k2) => knorm_enhance(tokens, centers, k2)?,
            None => tokens.clone(),
        };
        let te = g.constant(te);
        let pos = g.constant(pos.clone());
        let points = g.constant(points.clone());
        let p = g.param(PROTOTYPES)?;
        let p_hat = update_prototypes(g, p, te)?;
        let enhanced = self.enhance_tokens(g, te, p_hat)?;
        let sim = similarity(g, enhanced, p_hat)?;
        let similarity = g.value(sim).clone();
        let assignment = argmax_rows(&similarity);
        let (reconstruction, proto_loss) = self.reconstruct(g, p_hat, pos, &assignment, points)?;
        let cont_loss = contrastive_loss(g, p_hat, self.temperature)?;
        Ok(PcsmOutput {
            prototypes: p_hat,
            enhanced,
            similarity,
            assignment,
            reconstruction,
            proto_loss,
            cont_loss,
        })
    }
}
