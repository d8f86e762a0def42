//! Patch tokens: a mini-PointNet over each neighbourhood's local
//! coordinates, and a linear position embedding of patch centers.

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::nn::{Graph, Linear};

/// Shared point MLP, max-pool, concatenate the pooled feature back onto
/// every point, second MLP, max-pool again.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub group_size: usize,
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    fc4: Linear,
    pos: Linear,
}

impl PatchEmbed {
    pub fn new(group_size: usize, dim: usize, widths: [usize; 3]) -> Self {
        let [h1, h2, h3] = widths;
        PatchEmbed {
            group_size,
            dim,
            fc1: Linear::new("embed.fc1", 3, h1),
            fc2: Linear::new("embed.fc2", h1, h2),
            fc3: Linear::new("embed.fc3", 2 * h2, h3),
            fc4: Linear::new("embed.fc4", h3, dim),
            pos: Linear::new("embed.pos", 3, dim),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.group_size, cfg.dim, cfg.pointnet_widths)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for l in [&self.fc1, &self.fc2, &self.fc3, &self.fc4, &self.pos] {
            l.register(store)?;
        }
        Ok(())
    }

    /// Embeds `(G*k) x 3` stacked local coordinates into `G x C` tokens.
    pub fn tokens(&self, g: &mut Graph, local: Var) -> Result<Var> {
        let k = self.group_size;
        let (rows, cols) = g.shape(local);
        if cols != 3 || rows % k != 0 {
            return Err(Error::invalid(format!(
                "patch embedding expects (G*{k}) x 3 local coordinates, got {rows} x {cols}"
            )));
        }
        let h = self.fc1.forward(g, local)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, h)?;
        let pooled = g.group_max(h, k)?;
        let spread = g.repeat_rows(pooled, k)?;
        let h = g.concat_cols(&[spread, h])?;
        let h = self.fc3.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.fc4.forward(g, h)?;
        g.group_max(h, k)
    }

    /// `G x 3` centers to `G x C` position embeddings.
    pub fn positions(&self, g: &mut Graph, centers: Var) -> Result<Var> {
        self.pos.forward(g, centers)
    }

    /// Tokens and position embeddings of one patch set.
    pub fn embed(&self, g: &mut Graph, patches: &PatchSet) -> Result<(Var, Var)> {
        if patches.k != self.group_size {
            return Err(Error::invalid(format!(
                "patch set has k = {}, embedding expects {}",
                patches.k, self.group_size
            )));
        }
        let local = g.constant(patches.local_tensor());
        let centers = g.constant(patches.centers_tensor());
        Ok((self.tokens(g, local)?, self.positions(g, centers)?))
    }
}

/// Evaluates tokens and positions outside any training graph.
pub fn embed_values(
    embed: &PatchEmbed,
    store: &ParamStore,
    patches: &PatchSet,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new(store);
    let (t, p) = g.frozen(|g| embed.embed(g, patches))?;
    Ok((g.value(t).clone(), g.value(p).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_shape, ShapeKind};

    fn store_for(e: &PatchEmbed, seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        e.register(&mut s).unwrap();
        s
    }

    #[test]
    fn shapes_follow_config() {
        let e = PatchEmbed::new(8, 64, [16, 32, 48]);
        let s = store_for(&e, 0);
        let cloud = make_shape(ShapeKind::Chair, 256, 1).unwrap();
        let patches = PatchSet::build(&cloud, 32, 8, 0).unwrap();
        let (t, p) = embed_values(&e, &s, &patches).unwrap();
        assert_eq!(t.shape(), &[32, 64]);
        assert_eq!(p.shape(), &[32, 64]);
    }

    #[test]
    fn single_point_patches_share_one_token() {
        let e = PatchEmbed::new(1, 16, [8, 8, 8]);
        let s = store_for(&e, 4);
        let cloud = make_shape(ShapeKind::Plane, 64, 2).unwrap();
        let patches = PatchSet::build(&cloud, 10, 1, 0).unwrap();
        let (t, _) = embed_values(&e, &s, &patches).unwrap();
        for r in 1..10 {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn token_is_invariant_to_member_order() {
        let e = PatchEmbed::new(4, 8, [8, 8, 8]);
        let s = store_for(&e, 7);
        let cloud = make_shape(ShapeKind::Table, 64, 3).unwrap();
        let mut patches = PatchSet::build(&cloud, 4, 4, 0).unwrap();
        let (a, _) = embed_values(&e, &s, &patches).unwrap();
        for n in &mut patches.neighborhoods {
            n.local_coords.reverse();
        }
        let (b, _) = embed_values(&e, &s, &patches).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rejects_wrong_group_size() {
        let e = PatchEmbed::new(4, 8, [8, 8, 8]);
        let s = store_for(&e, 0);
        let cloud = make_shape(ShapeKind::Rocket, 64, 0).unwrap();
        let patches = PatchSet::build(&cloud, 4, 5, 0).unwrap();
        assert!(matches!(
            embed_values(&e, &s, &patches),
            Err(Error::InvalidArgument(_))
        ));
    }
}
