//! Training objectives.
//!
//! The main objective ties three embeddings of the same location together:
//! the ground query `q`, its paired aerial tile `a`, and the prototype `p`
//! of the cell it falls in. Each of the three edges (ground-aerial,
//! ground-prototype, aerial-prototype) contributes a positive similarity to
//! pull up and a set of negative similarities to push down:
//!
//! ```text
//! pos_i = 1/alpha * log(1 + g(q_i.a_i) + g(q_i.p_i) + g(a_i.p_i))
//! neg_i = 1/beta  * log(1 + sum_{j != i} [d(q_i.a_j) + d(a_i.q_j)]
//!                         + sum_{j in N(i)} [d(q_i.p_j) + d(a_i.p_j)])
//! g(s) = exp(-alpha (s - lambda)),  d(s) = exp(beta (s - lambda))
//! ```
//!
//! where `N(i)` holds the prototypes of cells farther than an exclusion
//! radius from query `i`. Prototype gradients along the aerial-prototype
//! edge are blocked by default so prototypes only aggregate ground views.
//!
//! [`baselines`] holds the cross-entropy style objectives used for
//! comparison.

pub mod baselines;
mod interp;
mod ms;

pub use interp::{
    bilinear_weights, frustum_support, frustum_weights, nearest_weights, InterpolationWeights,
};
pub use ms::{
    ms_loss_batch, ms_loss_embeddings, positives_for, BatchOutput, EmbeddingGrads, Example,
    LossBreakdown, LossOutput, Positives, SparseRows,
};

use crate::cellgrid::{avg_edge_length, unit_distance, CellId, GeoPoint};

/// How a ground query's positive prototype is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroundInterp {
    /// Prototype of the cell containing the camera.
    Nearest,
    /// Prototypes weighted by their overlap with the camera frustum.
    FrustumWeights,
    /// Every frustum cell is a separate positive; the ground-prototype
    /// positive term is averaged over them with equal weight.
    FrustumAllCells,
}

/// How an aerial tile's positive prototype is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AerialInterp {
    /// Prototype of the cell containing the tile center.
    Nearest,
    /// Bilinear blend of the four prototypes with the nearest centers.
    Bilinear,
}

/// Which of the three similarity edges take part in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    pub ground_aerial: bool,
    pub ground_prototype: bool,
    pub aerial_prototype: bool,
}

impl EdgeSet {
    pub const ALL: Self = Self {
        ground_aerial: true,
        ground_prototype: true,
        aerial_prototype: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.ground_aerial || self.ground_prototype || self.aerial_prototype)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ground_aerial {
            parts.push("GA");
        }
        if self.ground_prototype {
            parts.push("GP");
        }
        if self.aerial_prototype {
            parts.push("AP");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub neg_exclusion_radius_m: f64,
    /// Depth of the triangular camera footprint used for ground positives.
    pub frustum_depth_m: f64,
    /// Block prototype gradients on both aerial-prototype terms.
    pub detach_ap_edge: bool,
    pub ground_interp: GroundInterp,
    pub aerial_interp: AerialInterp,
    /// Renormalize interpolated prototypes to unit length before use.
    pub renormalize_interp: bool,
    /// In-batch pairs whose query locations lie within this distance are
    /// not used as negatives; zero keeps every pair.
    pub batch_exclusion_radius_m: f64,
    pub edges: EdgeSet,
}

impl LossConfig {
    /// Defaults for prototypes at `prototype_level`: alpha 0.2, beta 100,
    /// lambda 0.2, exclusion radius of two mean cell edges, 50 m frustum.
    pub fn for_level(prototype_level: u8) -> Self {
        Self {
            alpha: 0.2,
            beta: 100.0,
            lambda: 0.2,
            neg_exclusion_radius_m: 2.0 * avg_edge_length(prototype_level),
            frustum_depth_m: crate::world::FRUSTUM_DEPTH_M,
            detach_ap_edge: true,
            ground_interp: GroundInterp::FrustumWeights,
            aerial_interp: AerialInterp::Bilinear,
            renormalize_interp: false,
            batch_exclusion_radius_m: 0.0,
            edges: EdgeSet::ALL,
        }
    }
}

/// Positive weighting `exp(-alpha (s - lambda))`.
#[inline]
pub fn gamma(s: f64, alpha: f64, lambda: f64) -> f64 {
    (-alpha * (s - lambda)).exp()
}

/// Negative weighting `exp(beta (s - lambda))`.
#[inline]
pub fn delta(s: f64, beta: f64, lambda: f64) -> f64 {
    (beta * (s - lambda)).exp()
}

/// Positive term from the three positive similarities.
pub fn positive_from_sims(s_qa: f64, s_qp: f64, s_ap: f64, alpha: f64, lambda: f64) -> f64 {
    (1.0 + gamma(s_qa, alpha, lambda) + gamma(s_qp, alpha, lambda) + gamma(s_ap, alpha, lambda))
        .ln()
        / alpha
}

/// Positive term for query `q`, aerial `a` and interpolated prototype `p`.
pub fn positive_term(q: &[f64], a: &[f64], p: &[f64], alpha: f64, lambda: f64) -> f64 {
    use crate::vecmath::dot;
    positive_from_sims(dot(q, a), dot(q, p), dot(a, p), alpha, lambda)
}

/// Negative term for one query from its similarity lists: query to other
/// aerial tiles, aerial tile to other queries, query to negative
/// prototypes, aerial tile to negative prototypes. Each list is reduced in
/// the given order.
pub fn negative_term(
    query_aerial: &[f64],
    aerial_query: &[f64],
    query_proto: &[f64],
    aerial_proto: &[f64],
    beta: f64,
    lambda: f64,
) -> f64 {
    let batch: f64 = query_aerial
        .iter()
        .zip(aerial_query)
        .map(|(x, y)| delta(*x, beta, lambda) + delta(*y, beta, lambda))
        .sum();
    let protos: f64 = query_proto
        .iter()
        .zip(aerial_proto)
        .map(|(x, y)| delta(*x, beta, lambda) + delta(*y, beta, lambda))
        .sum();
    (1.0 + batch + protos).ln() / beta
}

/// Cells of `cells` whose centers lie farther than `radius_m` from the
/// query.
pub fn negative_set(query: &GeoPoint, cells: &[CellId], radius_m: f64) -> Vec<CellId> {
    let x = query.to_unit();
    cells
        .iter()
        .filter(|c| unit_distance(&x, &crate::cellgrid::cell_center_xyz(c)) > radius_m)
        .copied()
        .collect()
}
