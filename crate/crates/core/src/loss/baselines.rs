//! Cross-entropy style objectives used as baselines.
//!
//! All functions return the loss with exact gradients. Prototype gradients
//! are dense, one row per table position.

use crate::cellgrid::{haversine_distance, CellId, GeoPoint};
use crate::error::{invalid, Error, Result};
use crate::train::PrototypeTable;
use crate::vecmath::{axpy, dot};

/// Default temperature for the in-batch contrastive loss.
pub const INFONCE_TAU: f64 = 1.0 / 36.0;
pub const INFONCE_SMOOTHING: f64 = 0.1;
/// Default width of the spatial label smoothing, in meters.
pub const HAVERSINE_TAU_M: f64 = 200.0;
pub const HAVERSINE_TEMPERATURE_INIT: f64 = 0.01;
pub const COSFACE_MARGIN: f64 = 0.35;
pub const COSFACE_SCALE: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads {
    pub loss: f64,
    pub ground: Vec<Vec<f64>>,
    pub aerial: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrads {
    pub loss: f64,
    pub query: Vec<f64>,
    /// Row-major, table order.
    pub prototypes: Vec<f64>,
    /// Gradient with respect to the softmax temperature, where it applies.
    pub temperature: f64,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Smoothed cross-entropy of one row of logits against class `target`.
/// Returns the loss and d loss / d logits. With `decoupled`, the target
/// logit is left out of the normalizer.
fn smoothed_ce(logits: &[f64], target: usize, smoothing: f64, decoupled: bool) -> (f64, Vec<f64>) {
    let n = logits.len();
    let keep = |j: usize| !(decoupled && j == target);
    let z = log_sum_exp((0..n).filter(|&j| keep(j)).map(|j| logits[j]));
    let t = |j: usize| (1.0 - smoothing) * f64::from(u8::from(j == target)) + smoothing / n as f64;
    let loss = (0..n).map(|j| -t(j) * (logits[j] - z)).sum();
    let grad = (0..n)
        .map(|j| {
            let p = if keep(j) { (logits[j] - z).exp() } else { 0.0 };
            p - t(j)
        })
        .collect();
    (loss, grad)
}

/// Symmetric in-batch contrastive loss between ground embeddings `q` and
/// aerial embeddings `a`, pairs matched by index. The result is the mean of
/// the ground-to-aerial and aerial-to-ground mean cross-entropies.
pub fn infonce_bidirectional(
    q: &[Vec<f64>],
    a: &[Vec<f64>],
    tau: f64,
    smoothing: f64,
    decoupled: bool,
) -> Result<PairGrads> {
    let n = q.len();
    if n < 2 || a.len() != n {
        return Err(invalid("contrastive loss needs at least two matched pairs"));
    }
    if !(tau > 0.0) || !(0.0..1.0).contains(&smoothing) {
        return Err(invalid("temperature must be positive and smoothing in [0, 1)"));
    }
    let dim = q[0].len();
    let logits: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dot(&q[i], &a[j]) / tau).collect())
        .collect();
    let mut dlog = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    let w = 0.5 / n as f64;
    for i in 0..n {
        let (l, g) = smoothed_ce(&logits[i], i, smoothing, decoupled);
        loss += w * l;
        for j in 0..n {
            dlog[i][j] += w * g[j];
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
        let (l, g) = smoothed_ce(&col, j, smoothing, decoupled);
        loss += w * l;
        for i in 0..n {
            dlog[i][j] += w * g[i];
        }
    }
    let mut dq = vec![vec![0.0; dim]; n];
    let mut da = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dlog[i][j] / tau;
            axpy(g, &a[j], &mut dq[i]);
            axpy(g, &q[i], &mut da[j]);
        }
    }
    Ok(PairGrads {
        loss,
        ground: dq,
        aerial: da,
    })
}

/// Soft targets over table cells, proportional to
/// `exp(-distance(center, gt) / tau_m)`.
pub fn haversine_targets(table: &PrototypeTable, gt: &GeoPoint, tau_m: f64) -> Result<Vec<f64>> {
    if !(tau_m > 0.0) {
        return Err(invalid("haversine temperature must be positive"));
    }
    let logits: Vec<f64> = table
        .ids()
        .iter()
        .map(|c| -haversine_distance(&c.center(), gt) / tau_m)
        .collect();
    let z = log_sum_exp(logits.iter().copied());
    Ok(logits.iter().map(|l| (l - z).exp()).collect())
}

/// Cross-entropy of `softmax(q . p_j / temperature)` against targets.
fn classifier_ce(q: &[f64], table: &PrototypeTable, targets: &[f64], temperature: f64) -> ClassifierGrads {
    let dim = table.dim();
    let sims: Vec<f64> = (0..table.len()).map(|k| dot(q, table.row(k))).collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let z = log_sum_exp(logits.iter().copied());
    let mut loss = 0.0;
    let mut dq = vec![0.0; q.len()];
    let mut dp = vec![0.0; table.len() * dim];
    let mut dt = 0.0;
    let tsum: f64 = targets.iter().sum();
    for k in 0..table.len() {
        loss -= targets[k] * (logits[k] - z);
        let g = (logits[k] - z).exp() * tsum - targets[k];
        if g == 0.0 {
            continue;
        }
        axpy(g / temperature, table.row(k), &mut dq);
        axpy(g / temperature, q, &mut dp[k * dim..(k + 1) * dim]);
        dt -= g * sims[k] / (temperature * temperature);
    }
    ClassifierGrads {
        loss,
        query: dq,
        prototypes: dp,
        temperature: dt,
    }
}

/// Classification over prototypes with spatially smoothed labels. The
/// temperature is a trainable scalar; its gradient is returned.
pub fn haversine_smoothed_ce(
    q: &[f64],
    table: &PrototypeTable,
    gt: &GeoPoint,
    tau_m: f64,
    temperature: f64,
) -> Result<ClassifierGrads> {
    if !(temperature > 0.0) {
        return Err(invalid("softmax temperature must be positive"));
    }
    check_query(q, table)?;
    let t = haversine_targets(table, gt, tau_m)?;
    Ok(classifier_ce(q, table, &t, temperature))
}

fn check_query(q: &[f64], table: &PrototypeTable) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if q.len() != table.dim() {
        return Err(invalid(format!("query has dimension {}, expected {}", q.len(), table.dim())));
    }
    Ok(())
}

/// Sum over `levels` of the cross-entropy of softmax probabilities pooled
/// onto the ancestors at that level. Levels must start at the table level
/// and descend in steps of two.
pub fn hierarchical_ce(
    q: &[f64],
    table: &PrototypeTable,
    gt: &CellId,
    levels: &[u8],
    temperature: f64,
) -> Result<ClassifierGrads> {
    check_query(q, table)?;
    if !(temperature > 0.0) {
        return Err(invalid("softmax temperature must be positive"));
    }
    if levels.first() != Some(&table.level())
        || levels.windows(2).any(|w| w[1] + 2 != w[0])
    {
        return Err(invalid("levels must descend from the prototype level in steps of 2"));
    }
    let gk = table
        .index_of(gt)
        .ok_or_else(|| Error::Coverage(format!("no prototype for cell {gt}")))?;
    let dim = table.dim();
    let n = table.len();
    let sims: Vec<f64> = (0..n).map(|k| dot(q, table.row(k))).collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let z = log_sum_exp(logits.iter().copied());
    let p: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();

    let mut loss = 0.0;
    let mut dlogit = vec![0.0; n];
    for &level in levels {
        let anc = gt.parent(level)?;
        let inside: Vec<bool> = table
            .ids()
            .iter()
            .map(|c| c.parent(level).is_ok_and(|a| a == anc))
            .collect();
        debug_assert!(inside[gk]);
        let pa: f64 = (0..n).filter(|&k| inside[k]).map(|k| p[k]).sum();
        loss -= pa.ln();
        for k in 0..n {
            dlogit[k] += p[k] - if inside[k] { p[k] / pa } else { 0.0 };
        }
    }
    let mut dq = vec![0.0; dim];
    let mut dp = vec![0.0; n * dim];
    let mut dt = 0.0;
    for k in 0..n {
        let g = dlogit[k];
        axpy(g / temperature, table.row(k), &mut dq);
        axpy(g / temperature, q, &mut dp[k * dim..(k + 1) * dim]);
        dt -= g * sims[k] / (temperature * temperature);
    }
    Ok(ClassifierGrads {
        loss,
        query: dq,
        prototypes: dp,
        temperature: dt,
    })
}

/// Probabilities pooled onto the ancestors at `level`, keyed by ancestor.
pub fn pooled_probabilities(
    q: &[f64],
    table: &PrototypeTable,
    level: u8,
    temperature: f64,
) -> Result<Vec<(CellId, f64)>> {
    check_query(q, table)?;
    let logits: Vec<f64> = (0..table.len()).map(|k| dot(q, table.row(k)) / temperature).collect();
    let z = log_sum_exp(logits.iter().copied());
    let mut out: std::collections::BTreeMap<CellId, f64> = std::collections::BTreeMap::new();
    for (k, c) in table.ids().iter().enumerate() {
        *out.entry(c.parent(level)?).or_default() += (logits[k] - z).exp();
    }
    Ok(out.into_iter().collect())
}

/// Large-margin cosine classification: softmax cross-entropy over
/// `scale * (q . p_j - margin [j = gt])`.
pub fn cosface_loss(q: &[f64], table: &PrototypeTable, gt: &CellId, margin: f64, scale: f64) -> Result<ClassifierGrads> {
    check_query(q, table)?;
    if !(0.0..1.0).contains(&margin) || !(scale > 0.0) {
        return Err(invalid("margin must be in [0, 1) and scale positive"));
    }
    let gk = table
        .index_of(gt)
        .ok_or_else(|| Error::Coverage(format!("no prototype for cell {gt}")))?;
    let dim = table.dim();
    let n = table.len();
    let logits: Vec<f64> = (0..n)
        .map(|k| scale * (dot(q, table.row(k)) - if k == gk { margin } else { 0.0 }))
        .collect();
    let (loss, g) = smoothed_ce(&logits, gk, 0.0, false);
    let mut dq = vec![0.0; dim];
    let mut dp = vec![0.0; n * dim];
    for k in 0..n {
        axpy(scale * g[k], table.row(k), &mut dq);
        axpy(scale * g[k], q, &mut dp[k * dim..(k + 1) * dim]);
    }
    Ok(ClassifierGrads {
        loss,
        query: dq,
        prototypes: dp,
        temperature: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgrid::{cell_from_point, cells_in_cap, children};
    use crate::encoder::tests::{random_vec, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = crate::vecmath::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
    }

    fn table(seed: u64, dim: usize) -> PrototypeTable {
        let c = GeoPoint::from_degrees(47.0, 8.0).unwrap();
        let cells = cells_in_cap(&c, 4000.0, 13).unwrap();
        PrototypeTable::random(13, dim, cells, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn infonce_closed_form() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let q = vec![e1.clone(), e2.clone()];
        let a = vec![e1, e2];
        let plain = infonce_bidirectional(&q, &a, 1.0, 0.0, false).unwrap();
        assert!((plain.loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        let smooth = infonce_bidirectional(&q, &a, 1.0, 0.1, false).unwrap();
        let e = std::f64::consts::E;
        assert!((smooth.loss - ((e + 1.0).ln() - 0.95)).abs() < 1e-15);
        assert!((smooth.loss - 0.363_261_687_518_223).abs() < 1e-12);
        let dec = infonce_bidirectional(&q, &a, 1.0, 0.1, true).unwrap();
        assert!((dec.loss + 0.95).abs() < 1e-15);
    }

    #[test]
    fn infonce_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<Vec<f64>> = (0..6).map(|_| unit(&random_vec(&mut rng, 5))).collect();
        let a: Vec<Vec<f64>> = (0..6).map(|_| unit(&random_vec(&mut rng, 5))).collect();
        let base = infonce_bidirectional(&q, &a, INFONCE_TAU, 0.1, true).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pq: Vec<Vec<f64>> = perm.iter().map(|&i| q[i].clone()).collect();
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
        let p = infonce_bidirectional(&pq, &pa, INFONCE_TAU, 0.1, true).unwrap();
        assert!(rel_err(base.loss, p.loss) < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            for d in 0..5 {
                assert!((p.ground[k][d] - base.ground[i][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for decoupled in [false, true] {
            let q: Vec<Vec<f64>> = (0..5).map(|_| unit(&random_vec(&mut rng, 4))).collect();
            let a: Vec<Vec<f64>> = (0..5).map(|_| unit(&random_vec(&mut rng, 4))).collect();
            let tau = 0.2;
            let g = infonce_bidirectional(&q, &a, tau, 0.1, decoupled).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..5 {
                for d in 0..4 {
                    let fq = fd(
                        |x| {
                            let mut q2 = q.clone();
                            q2[i][d] = x;
                            infonce_bidirectional(&q2, &a, tau, 0.1, decoupled).unwrap().loss
                        },
                        q[i][d],
                        1e-4,
                    );
                    let fa = fd(
                        |x| {
                            let mut a2 = a.clone();
                            a2[i][d] = x;
                            infonce_bidirectional(&q, &a2, tau, 0.1, decoupled).unwrap().loss
                        },
                        a[i][d],
                        1e-4,
                    );
                    worst = worst.max(rel_err(g.ground[i][d], fq)).max(rel_err(g.aerial[i][d], fa));
                }
            }
            assert!(worst <= 1e-4, "{worst:e}");
        }
    }

    #[test]
    fn haversine_targets_limits() {
        let t = table(4, 4);
        let gt = GeoPoint::from_degrees(47.001, 8.002).unwrap();
        let tg = haversine_targets(&t, &gt, HAVERSINE_TAU_M).unwrap();
        assert!((tg.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let sharp = haversine_targets(&t, &gt, 1e-3).unwrap();
        let home = t.index_of(&cell_from_point(&gt, 13).unwrap()).unwrap();
        let nearest = (0..t.len())
            .min_by(|&a, &b| {
                haversine_distance(&t.ids()[a].center(), &gt).total_cmp(&haversine_distance(&t.ids()[b].center(), &gt))
            })
            .unwrap();
        assert_eq!(nearest, home);
        assert_eq!(sharp[nearest], 1.0);
        assert!(sharp.iter().enumerate().all(|(k, x)| k == nearest || *x == 0.0));

        // Midpoint between two adjacent centers.
        let a = t.ids()[home];
        let b = CellId::new(a.face(), 13, a.i() + 1, a.j()).unwrap();
        let (ua, ub) = (a.center().to_unit(), b.center().to_unit());
        let mid = GeoPoint::from_unit([ua[0] + ub[0], ua[1] + ub[1], ua[2] + ub[2]]);
        let tm = haversine_targets(&t, &mid, HAVERSINE_TAU_M).unwrap();
        let (ka, kb) = (t.index_of(&a).unwrap(), t.index_of(&b).unwrap());
        assert!((tm[ka] - tm[kb]).abs() < 1e-9);
        assert!(tm[ka] + tm[kb] > 0.9);
        for (k, x) in tm.iter().enumerate() {
            if k != ka && k != kb {
                assert!(*x < tm[ka]);
            }
        }
    }

    fn check_classifier(f: impl Fn(&[f64], &PrototypeTable, f64) -> ClassifierGrads, temp: f64, learn_temp: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = table(6, 4);
        let q = unit(&random_vec(&mut rng, 4));
        let g = f(&q, &t, temp);
        let mut worst: f64 = 0.0;
        for d in 0..4 {
            let x = fd(
                |v| {
                    let mut q2 = q.clone();
                    q2[d] = v;
                    f(&q2, &t, temp).loss
                },
                q[d],
                1e-5,
            );
            worst = worst.max(rel_err(g.query[d], x));
        }
        for k in (0..t.len()).step_by(t.len() / 4) {
            for d in 0..4 {
                let x = fd(
                    |v| {
                        let mut t2 = t.clone();
                        t2.row_mut(k)[d] = v;
                        f(&q, &t2, temp).loss
                    },
                    t.row(k)[d],
                    1e-5,
                );
                worst = worst.max(rel_err(g.prototypes[k * 4 + d], x));
            }
        }
        if learn_temp {
            let x = fd(|v| f(&q, &t, v).loss, temp, temp * 1e-4);
            worst = worst.max(rel_err(g.temperature, x));
        }
        assert!(worst <= 1e-4, "{worst:e}");
    }

    #[test]
    fn haversine_ce_gradients() {
        let gt = GeoPoint::from_degrees(47.003, 7.998).unwrap();
        check_classifier(|q, t, temp| haversine_smoothed_ce(q, t, &gt, HAVERSINE_TAU_M, temp).unwrap(), 0.1, true);
    }

    #[test]
    fn hierarchical_uniform_closed_form() {
        // Every cell at level 4 with identical prototypes gives uniform logits.
        let mut cells = Vec::new();
        for face in 0..6 {
            let mut frontier = vec![CellId::new(face, 0, 0, 0).unwrap()];
            for _ in 0..4 {
                frontier = frontier.iter().flat_map(|c| children(c).unwrap()).collect();
            }
            cells.extend(frontier);
        }
        assert_eq!(cells.len(), 1536);
        let data: Vec<f64> = cells.iter().flat_map(|_| [1.0, 0.0, 0.0]).collect();
        let t = PrototypeTable::new(4, 3, cells.clone(), data).unwrap();
        let q = [0.0, 1.0, 0.0];
        let g = hierarchical_ce(&q, &t, &cells[100], &[4, 2, 0], 0.05).unwrap();
        let expected = 1536f64.ln() + 96f64.ln() + 6f64.ln();
        assert!((g.loss - expected).abs() < 1e-9);
        let single = hierarchical_ce(&q, &t, &cells[100], &[4], 0.05).unwrap();
        assert!((single.loss - 1536f64.ln()).abs() < 1e-9);
        for level in [4, 2, 0] {
            let pooled = pooled_probabilities(&q, &t, level, 0.05).unwrap();
            assert!((pooled.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(hierarchical_ce(&q, &t, &cells[0], &[4, 3], 0.05).is_err());
        assert!(hierarchical_ce(&q, &t, &cells[0], &[2, 0], 0.05).is_err());
    }

    #[test]
    fn hierarchical_single_level_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = table(9, 4);
        let q = unit(&random_vec(&mut rng, 4));
        let gt = t.ids()[3];
        let h = hierarchical_ce(&q, &t, &gt, &[13], 0.1).unwrap();
        let mut onehot = vec![0.0; t.len()];
        onehot[3] = 1.0;
        let plain = classifier_ce(&q, &t, &onehot, 0.1);
        assert!((h.loss - plain.loss).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_gradients() {
        let t = table(6, 4);
        let gt = t.ids()[7];
        check_classifier(|q, t, temp| hierarchical_ce(q, t, &gt, &[13, 11, 9], temp).unwrap(), 0.1, true);
    }

    #[test]
    fn cosface_properties_and_gradients() {
        let t = table(6, 4);
        let gt = t.ids()[5];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = unit(&random_vec(&mut rng, 4));
        let plain = cosface_loss(&q, &t, &gt, 0.0, 10.0).unwrap();
        let mut onehot = vec![0.0; t.len()];
        onehot[5] = 1.0;
        assert!((plain.loss - classifier_ce(&q, &t, &onehot, 0.1).loss).abs() < 1e-12);
        let mut prev = plain.loss;
        for m in [0.1, 0.2, 0.35, 0.5, 0.9] {
            let l = cosface_loss(&q, &t, &gt, m, 10.0).unwrap().loss;
            assert!(l >= prev);
            prev = l;
        }
        check_classifier(|q, t, _| cosface_loss(q, t, &gt, COSFACE_MARGIN, 8.0).unwrap(), 1.0, false);
    }
}
