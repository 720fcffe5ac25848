use crate::cellgrid::{unit_distance, CellId, GeoPoint};
use crate::encoder::{l2_normalize, l2_normalize_vjp, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::train::shard::{combine_partials, sharded_negative_sums, ShardAssignment};
use crate::train::PrototypeTable;
use crate::vecmath::{axpy, dot};

use super::interp::{
    bilinear_weights, frustum_support, frustum_weights, nearest_weights, InterpolationWeights,
};
use super::{delta, gamma, AerialInterp, GroundInterp, LossConfig};

/// One training pair: a ground view with its pose and the paired aerial tile.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub ground: &'a [f64],
    pub aerial: &'a [f64],
    pub location: GeoPoint,
    pub heading: f64,
    pub fov: f64,
    pub tile_center: GeoPoint,
}

/// Positive prototype weights for the ground and aerial side of an example.
#[derive(Clone, Debug, PartialEq)]
pub struct Positives {
    pub ground: InterpolationWeights,
    pub aerial: InterpolationWeights,
}

pub fn positives_for(example: &Example<'_>, level: u8, config: &LossConfig) -> Result<Positives> {
    let (loc, h, f, depth) = (&example.location, example.heading, example.fov, config.frustum_depth_m);
    let ground = match config.ground_interp {
        GroundInterp::Nearest => nearest_weights(loc, level)?,
        GroundInterp::FrustumWeights => frustum_weights(loc, h, f, depth, level)?,
        GroundInterp::FrustumAllCells => frustum_support(loc, h, f, depth, level)?,
    };
    let aerial = match config.aerial_interp {
        AerialInterp::Nearest => nearest_weights(&example.tile_center, level)?,
        AerialInterp::Bilinear => bilinear_weights(&example.tile_center, level)?,
    };
    Ok(Positives { ground, aerial })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub positive: f64,
    pub negative: f64,
}

/// Gradient rows for a subset of prototype table positions, ascending.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    fn from_dense(dim: usize, dense: &[f64], touched: &[bool]) -> Self {
        let indices: Vec<usize> = (0..touched.len()).filter(|&k| touched[k]).collect();
        let values = indices
            .iter()
            .flat_map(|&k| dense[k * dim..(k + 1) * dim].iter().copied())
            .collect();
        Self { dim, indices, values }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Gradient row for table position `k`, if touched.
    pub fn get(&self, k: usize) -> Option<&[f64]> {
        self.indices.binary_search(&k).ok().map(|p| self.row(p))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.indices.iter().enumerate().map(|(p, &k)| (k, self.row(p)))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

/// Loss and gradients with respect to the embeddings and prototypes.
#[derive(Clone, Debug)]
pub struct EmbeddingGrads {
    pub ground: Vec<Vec<f64>>,
    pub aerial: Vec<Vec<f64>>,
    pub prototypes: SparseRows,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    pub grads: EmbeddingGrads,
}

/// Loss and gradients with respect to encoder parameters and prototypes.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    pub ground_params: Vec<f64>,
    pub aerial_params: Vec<f64>,
    pub prototypes: SparseRows,
}

fn resolve(w: &InterpolationWeights, table: &PrototypeTable, example: usize) -> Result<Vec<(usize, f64)>> {
    w.entries()
        .iter()
        .map(|(c, x)| {
            table
                .index_of(c)
                .map(|k| (k, *x))
                .ok_or_else(|| missing(c, example))
        })
        .collect()
}

fn missing(c: &CellId, example: usize) -> Error {
    Error::Coverage(format!("no prototype for cell {c} used by example {example}"))
}

/// Interpolated prototype and, when renormalized, the pre-normalization norm.
fn blend(table: &PrototypeTable, w: &[(usize, f64)], renormalize: bool) -> Result<(Vec<f64>, Option<f64>)> {
    let mut u = vec![0.0; table.dim()];
    for &(k, x) in w {
        axpy(x, table.row(k), &mut u);
    }
    if renormalize {
        let (z, n) = l2_normalize(&u)?;
        Ok((z, Some(n)))
    } else {
        Ok((u, None))
    }
}

/// Pushes an upstream gradient on a blended prototype back to table rows.
fn scatter(
    g: &[f64],
    blended: &[f64],
    norm: Option<f64>,
    w: &[(usize, f64)],
    dim: usize,
    dense: &mut [f64],
    touched: &mut [bool],
) {
    let du = match norm {
        Some(n) => l2_normalize_vjp(blended, n, g),
        None => g.to_vec(),
    };
    for &(k, x) in w {
        axpy(x, &du, &mut dense[k * dim..(k + 1) * dim]);
        touched[k] = true;
    }
}

/// Evaluates the loss on unit-norm ground embeddings `q` and aerial
/// embeddings `a` and returns exact gradients. Prototype negatives are
/// summed per shard and combined in ascending shard order.
pub fn ms_loss_embeddings(
    q: &[Vec<f64>],
    a: &[Vec<f64>],
    locations: &[GeoPoint],
    positives: &[Positives],
    table: &PrototypeTable,
    shards: &ShardAssignment,
    config: &LossConfig,
) -> Result<LossOutput> {
    let n = q.len();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if a.len() != n || locations.len() != n || positives.len() != n {
        return Err(invalid("batch components have different lengths"));
    }
    if !(config.alpha > 0.0 && config.beta > 0.0) {
        return Err(invalid("alpha and beta must be positive"));
    }
    let dim = table.dim();
    if q.iter().chain(a).any(|v| v.len() != dim) {
        return Err(invalid(format!("embeddings must have dimension {dim}")));
    }
    if shards.total() != table.len() {
        return Err(invalid("shard assignment does not match the prototype table"));
    }
    let (alpha, beta, lambda) = (config.alpha, config.beta, config.lambda);
    let edges = config.edges;
    let all_cells = config.ground_interp == GroundInterp::FrustumAllCells;

    let mut dq = vec![vec![0.0; dim]; n];
    let mut da = vec![vec![0.0; dim]; n];
    let mut dp = vec![0.0; table.len() * dim];
    let mut touched = vec![false; table.len()];
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];

    // Positive terms.
    for i in 0..n {
        let gw = resolve(&positives[i].ground, table, i)?;
        let aw = resolve(&positives[i].aerial, table, i)?;
        let mut s = 1.0;
        let g_qa = if edges.ground_aerial {
            gamma(dot(&q[i], &a[i]), alpha, lambda)
        } else {
            0.0
        };
        s += g_qa;
        let mut gp_parts: Vec<(usize, f64, f64)> = Vec::new();
        let mut gp_blend = None;
        if edges.ground_prototype {
            if all_cells {
                for &(k, w) in &gw {
                    let g = w * gamma(dot(&q[i], table.row(k)), alpha, lambda);
                    gp_parts.push((k, w, g));
                    s += g;
                }
            } else {
                let (z, nrm) = blend(table, &gw, config.renormalize_interp)?;
                let g = gamma(dot(&q[i], &z), alpha, lambda);
                s += g;
                gp_blend = Some((z, nrm, g));
            }
        }
        let mut ap_blend = None;
        if edges.aerial_prototype {
            let (z, nrm) = blend(table, &aw, config.renormalize_interp)?;
            let g = gamma(dot(&a[i], &z), alpha, lambda);
            s += g;
            ap_blend = Some((z, nrm, g));
        }
        pos[i] = s.ln() / alpha;

        if g_qa != 0.0 {
            let c = -g_qa / s;
            axpy(c, &a[i], &mut dq[i]);
            axpy(c, &q[i], &mut da[i]);
        }
        for &(k, _, g) in &gp_parts {
            let c = -g / s;
            axpy(c, table.row(k), &mut dq[i]);
            axpy(c, &q[i], &mut dp[k * dim..(k + 1) * dim]);
            touched[k] = true;
        }
        if let Some((z, nrm, g)) = gp_blend {
            let c = -g / s;
            axpy(c, &z, &mut dq[i]);
            let up: Vec<f64> = q[i].iter().map(|x| c * x).collect();
            scatter(&up, &z, nrm, &gw, dim, &mut dp, &mut touched);
        }
        if let Some((z, nrm, g)) = ap_blend {
            let c = -g / s;
            axpy(c, &z, &mut da[i]);
            if !config.detach_ap_edge {
                let up: Vec<f64> = a[i].iter().map(|x| c * x).collect();
                scatter(&up, &z, nrm, &aw, dim, &mut dp, &mut touched);
            }
        }
    }

    // Negative terms: in-batch pairs.
    let mut s_neg = vec![1.0; n];
    let mut qa_delta = vec![0.0; n * n];
    if edges.ground_aerial {
        let units: Vec<[f64; 3]> = locations.iter().map(|l| l.to_unit()).collect();
        for i in 0..n {
            for j in 0..n {
                let near = config.batch_exclusion_radius_m > 0.0
                    && unit_distance(&units[i], &units[j]) <= config.batch_exclusion_radius_m;
                if i != j && !near {
                    qa_delta[i * n + j] = delta(dot(&q[i], &a[j]), beta, lambda);
                }
            }
        }
        for i in 0..n {
            let batch: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| qa_delta[i * n + j] + qa_delta[j * n + i])
                .sum();
            s_neg[i] += batch;
        }
    }

    // Negative terms: prototypes outside the exclusion radius of each query.
    let use_protos = edges.ground_prototype || edges.aerial_prototype;
    let np = table.len();
    let mut qp_delta = vec![0.0; if edges.ground_prototype { n * np } else { 0 }];
    let mut ap_delta = vec![0.0; if edges.aerial_prototype { n * np } else { 0 }];
    let mut mask = vec![false; if use_protos { n * np } else { 0 }];
    if use_protos {
        for i in 0..n {
            let x = locations[i].to_unit();
            for (k, c) in table.centers().iter().enumerate() {
                if unit_distance(&x, c) > config.neg_exclusion_radius_m {
                    mask[i * np + k] = true;
                    if edges.ground_prototype {
                        qp_delta[i * np + k] = delta(dot(&q[i], table.row(k)), beta, lambda);
                    }
                    if edges.aerial_prototype {
                        ap_delta[i * np + k] = delta(dot(&a[i], table.row(k)), beta, lambda);
                    }
                }
            }
        }
        let partials = sharded_negative_sums(
            shards,
            n,
            |i, k| mask[i * np + k],
            |i, k| {
                let x = if edges.ground_prototype { qp_delta[i * np + k] } else { 0.0 };
                let y = if edges.aerial_prototype { ap_delta[i * np + k] } else { 0.0 };
                x + y
            },
        );
        for (i, s) in s_neg.iter_mut().enumerate() {
            *s += combine_partials(&partials, i);
        }
    }
    for i in 0..n {
        neg[i] = s_neg[i].ln() / beta;
    }

    if edges.ground_aerial {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let g1 = qa_delta[i * n + j] / s_neg[i];
                let g2 = qa_delta[j * n + i] / s_neg[i];
                axpy(g1, &a[j], &mut dq[i]);
                axpy(g1, &q[i], &mut da[j]);
                axpy(g2, &q[j], &mut da[i]);
                axpy(g2, &a[i], &mut dq[j]);
            }
        }
    }

    if use_protos {
        // Each shard recomputes its gradient contributions from the combined
        // denominators; embedding gradients are merged in shard order.
        for range in shards.ranges() {
            let mut sq = vec![vec![0.0; dim]; n];
            let mut sa = vec![vec![0.0; dim]; n];
            for k in range.clone() {
                let p = table.row(k);
                let row = &mut dp[k * dim..(k + 1) * dim];
                for i in 0..n {
                    if !mask[i * np + k] {
                        continue;
                    }
                    if edges.ground_prototype {
                        let g = qp_delta[i * np + k] / s_neg[i];
                        if g != 0.0 {
                            axpy(g, p, &mut sq[i]);
                            axpy(g, &q[i], row);
                            touched[k] = true;
                        }
                    }
                    if edges.aerial_prototype {
                        let g = ap_delta[i * np + k] / s_neg[i];
                        if g != 0.0 {
                            axpy(g, p, &mut sa[i]);
                            if !config.detach_ap_edge {
                                axpy(g, &a[i], row);
                                touched[k] = true;
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                axpy(1.0, &sq[i], &mut dq[i]);
                axpy(1.0, &sa[i], &mut da[i]);
            }
        }
    }

    let positive: f64 = pos.iter().sum();
    let negative: f64 = neg.iter().sum();
    let total: f64 = pos.iter().zip(&neg).map(|(p, m)| p + m).sum();
    Ok(LossOutput {
        loss: LossBreakdown {
            total,
            positive,
            negative,
        },
        grads: EmbeddingGrads {
            ground: dq,
            aerial: da,
            prototypes: SparseRows::from_dense(dim, &dp, &touched),
        },
    })
}

/// Encodes a batch, evaluates the loss and backpropagates into both
/// encoders.
pub fn ms_loss_batch(
    batch: &[Example<'_>],
    positives: &[Positives],
    ground_encoder: &EncoderParams,
    aerial_encoder: &EncoderParams,
    table: &PrototypeTable,
    shards: &ShardAssignment,
    config: &LossConfig,
) -> Result<BatchOutput> {
    let gf = batch
        .iter()
        .map(|e| ground_encoder.forward(e.ground))
        .collect::<Result<Vec<_>>>()?;
    let af = batch
        .iter()
        .map(|e| aerial_encoder.forward(e.aerial))
        .collect::<Result<Vec<_>>>()?;
    let q: Vec<Vec<f64>> = gf.iter().map(|f| f.embedding().to_vec()).collect();
    let a: Vec<Vec<f64>> = af.iter().map(|f| f.embedding().to_vec()).collect();
    let locations: Vec<GeoPoint> = batch.iter().map(|e| e.location).collect();
    let out = ms_loss_embeddings(&q, &a, &locations, positives, table, shards, config)?;

    let mut ground_params = vec![0.0; ground_encoder.as_slice().len()];
    let mut aerial_params = vec![0.0; aerial_encoder.as_slice().len()];
    for (i, e) in batch.iter().enumerate() {
        ground_encoder.backward_into(e.ground, &gf[i], &out.grads.ground[i], &mut ground_params);
        aerial_encoder.backward_into(e.aerial, &af[i], &out.grads.aerial[i], &mut aerial_params);
    }
    Ok(BatchOutput {
        loss: out.loss,
        ground_params,
        aerial_params,
        prototypes: out.grads.prototypes,
    })
}
