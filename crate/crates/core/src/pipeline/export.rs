//! Per-point component labels from a pretrained model.

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{PatchSet, Point, PointCloud};
use crate::model::SemanticMae;
use crate::nn::Graph;
use crate::pipeline::metrics::point_labels;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupExport {
    pub centers: Vec<Point>,
    /// Component of each patch token.
    pub assignment: Vec<usize>,
    /// Component of each point, taken from its nearest patch center.
    pub labels: Vec<usize>,
}

/// Groups a cloud with the trained prototypes. Sampling starts at point 0,
/// so the result is a pure function of the cloud and the parameters.
pub fn export_groups(
    cfg: &RunConfig,
    store: &ParamStore,
    cloud: &PointCloud,
) -> Result<GroupExport> {
    let model = SemanticMae::from_config(cfg);
    let patches = PatchSet::build(cloud, cfg.groups, cfg.group_size, 0)?;
    let complete = model.encode_complete(store, &patches)?;
    let mut g = Graph::new(store);
    let out = g.frozen(|g| {
        model.pcsm.forward(
            g,
            &complete.encoded,
            &complete.pos,
            &patches.centers,
            &cloud.to_tensor(),
        )
    })?;
    let labels = point_labels(&cloud.points, &patches.centers, &out.assignment);
    Ok(GroupExport {
        centers: patches.centers,
        assignment: out.assignment,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_shape, ShapeKind};

    #[test]
    fn labels_cover_every_point_with_valid_ids() {
        let cfg = RunConfig::toy();
        let store = SemanticMae::init_store(&cfg).unwrap();
        let cloud = make_shape(ShapeKind::Plane, cfg.n_points, 3).unwrap();
        let a = export_groups(&cfg, &store, &cloud).unwrap();
        let b = export_groups(&cfg, &store, &cloud).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), cloud.len());
        assert!(a.labels.iter().all(|&l| l < cfg.prototypes));
    }
}
