//! Bidirectional dense matching: register in both directions, keep the
//! direction with the lower Chamfer distance, and read the a-to-b
//! correspondence off the registered geometry by nearest neighbor.

use crate::geometry::{chamfer_value, nearest_neighbor_match, CorrespondenceMap, PointCloud};
use crate::model::{encode, ModelConfig, ModelParams};
use crate::refine::{refine, RefineConfig};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchDirection {
    /// a was deformed onto b.
    AToB,
    /// b was deformed onto a; the correspondence was inverted by nearest
    /// neighbor against the registered geometry.
    BToA,
}

pub struct MatchOutcome<T> {
    pub correspondence: CorrespondenceMap,
    pub direction: MatchDirection,
    pub chamfer_a_to_b: f64,
    pub chamfer_b_to_a: f64,
    /// The registered cloud of the chosen direction.
    pub registration: PointCloud<T>,
}

fn register_one<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    refine_cfg: Option<&RefineConfig>,
) -> Result<PointCloud<T>> {
    let latents = encode(params, cfg, target)?;
    match refine_cfg {
        Some(rc) => Ok(refine(params, cfg, source, target, &latents, rc)?.registration),
        None => crate::model::decode(params, cfg, source, &latents),
    }
}

/// Dense correspondence from every point of `a` to a point of `b`.
pub fn match_clouds<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    a: &PointCloud<T>,
    b: &PointCloud<T>,
    refine_cfg: Option<&RefineConfig>,
) -> Result<MatchOutcome<T>> {
    let reg_ab = register_one(params, cfg, a, b, refine_cfg)?;
    let reg_ba = register_one(params, cfg, b, a, refine_cfg)?;
    let chamfer_a_to_b = chamfer_value(reg_ab.points(), b.points())?;
    let chamfer_b_to_a = chamfer_value(reg_ba.points(), a.points())?;

    if chamfer_a_to_b <= chamfer_b_to_a {
        let correspondence = nearest_neighbor_match(reg_ab.points(), b.points())?;
        Ok(MatchOutcome {
            correspondence,
            direction: MatchDirection::AToB,
            chamfer_a_to_b,
            chamfer_b_to_a,
            registration: reg_ab,
        })
    } else {
        // reg_ba carries one moved point per b index, lying on a's
        // surface; each a point adopts the b index of its nearest moved
        // point.
        let correspondence = nearest_neighbor_match(a.points(), reg_ba.points())?;
        Ok(MatchOutcome {
            correspondence,
            direction: MatchDirection::BToA,
            chamfer_a_to_b,
            chamfer_b_to_a,
            registration: reg_ba,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{ring_cloud, tiny_config};
    use crate::model::ModelParams;

    #[test]
    fn chosen_direction_has_minimal_chamfer() {
        let cfg = tiny_config();
        let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let a = ring_cloud(15, 0.1);
        let b = ring_cloud(15, 0.3);
        let outcome = match_clouds(&params, &cfg, &a, &b, None).unwrap();
        let (chosen, other) = match outcome.direction {
            MatchDirection::AToB => (outcome.chamfer_a_to_b, outcome.chamfer_b_to_a),
            MatchDirection::BToA => (outcome.chamfer_b_to_a, outcome.chamfer_a_to_b),
        };
        assert!(chosen <= other);
        assert_eq!(outcome.correspondence.len(), a.len());
    }

    #[test]
    fn matching_is_deterministic() {
        let cfg = tiny_config();
        let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let a = ring_cloud(12, 0.15);
        let b = ring_cloud(12, 0.05);
        let m1 = match_clouds(&params, &cfg, &a, &b, None).unwrap();
        let m2 = match_clouds(&params, &cfg, &a, &b, None).unwrap();
        assert_eq!(m1.correspondence, m2.correspondence);
        assert_eq!(m1.direction, m2.direction);
        assert_eq!(m1.registration.points(), m2.registration.points());
    }
}
