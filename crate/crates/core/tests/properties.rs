use cellcode::cellgrid::{
    cell_from_point, cells_in_cap, cells_overlapping_triangle, haversine_distance, CellId, GeoPoint, MAX_LEVEL,
};
use cellcode::codedb::{build_hybrid_db, recall_at, search_topk, CellCodeDB, DbMode, Hit};
use cellcode::encoder::EncoderParams;
use cellcode::loss::{
    bilinear_weights, frustum_support, frustum_weights, ms_loss_embeddings, negative_set, nearest_weights,
    InterpolationWeights, LossConfig, Positives,
};
use cellcode::train::{shard_prototypes, PrototypeTable};
use cellcode::vecmath::dot;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = GeoPoint> {
    (-89.9f64..89.9, -179.99f64..179.99).prop_map(|(a, b)| GeoPoint::from_degrees(a, b).unwrap())
}

fn cell() -> impl Strategy<Value = CellId> {
    (0u8..6, 0u8..=MAX_LEVEL, any::<u32>(), any::<u32>()).prop_map(|(f, l, i, j)| {
        let n = 1u64 << l;
        CellId::new(f, l, (u64::from(i) % n) as u32, (u64::from(j) % n) as u32).unwrap()
    })
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn coarse_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| f64::from(rng.random_range(-1i32..=1))).collect();
        let n = dot(&v, &v).sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn simplex(w: &InterpolationWeights) -> Result<(), TestCaseError> {
    prop_assert!(!w.entries().is_empty());
    prop_assert!(w.entries().iter().all(|(_, x)| *x >= 0.0));
    let s: f64 = w.entries().iter().map(|(_, x)| x).sum();
    prop_assert!((s - 1.0).abs() < 1e-9, "weights sum to {s}");
    Ok(())
}

fn region() -> GeoPoint {
    GeoPoint::from_degrees(47.0, 8.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pack_is_a_bijection(c in cell()) {
        let p = c.pack();
        prop_assert_eq!(CellId::unpack(p).unwrap(), c);
        prop_assert_eq!(CellId::unpack(p).unwrap().pack(), p);
    }

    #[test]
    fn cell_center_maps_back_to_its_cell(c in cell()) {
        prop_assert_eq!(cell_from_point(&c.center(), c.level()).unwrap(), c);
    }

    #[test]
    fn levels_nest(p in point(), l1 in 0u8..MAX_LEVEL, dl in 1u8..=MAX_LEVEL) {
        let l2 = (l1 + dl).min(MAX_LEVEL);
        prop_assume!(l2 > l1);
        let fine = cell_from_point(&p, l2).unwrap();
        prop_assert_eq!(fine.parent(l1).unwrap(), cell_from_point(&p, l1).unwrap());
    }

    #[test]
    fn children_partition_the_parent(p in point(), level in 0u8..MAX_LEVEL) {
        let parent = cell_from_point(&p, level).unwrap();
        let kids = parent.children().unwrap();
        let owner = cell_from_point(&p, level + 1).unwrap();
        prop_assert_eq!(kids.iter().filter(|k| **k == owner).count(), 1);
        for k in kids {
            prop_assert_eq!(k.parent(level).unwrap(), parent);
            prop_assert_eq!(cell_from_point(&k.center(), level + 1).unwrap(), k);
        }
    }

    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine_distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, haversine_distance(&b, &a));
        prop_assert_eq!(haversine_distance(&a, &a), 0.0);
        let (bc, ac) = (haversine_distance(&b, &c), haversine_distance(&a, &c));
        prop_assert!(ac <= (ab + bc) * (1.0 + 1e-9) + 1e-9);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn frustum_overlaps_sum_to_one(
        p in point(),
        heading in 0.0f64..std::f64::consts::TAU,
        fov_deg in 45.0f64..75.0,
        depth in 50.0f64..800.0,
        level in 10u8..15,
    ) {
        let cells = cells_overlapping_triangle(&p, heading, fov_deg.to_radians(), depth, level).unwrap();
        prop_assert!(cells.iter().all(|c| c.1 >= 0.0));
        let s: f64 = cells.iter().map(|c| c.1).sum();
        prop_assert!((s - 1.0).abs() < 1e-6, "overlaps sum to {s}");
    }

    #[test]
    fn interpolation_weights_are_simplex(
        p in point(),
        heading in 0.0f64..std::f64::consts::TAU,
        fov_deg in 45.0f64..75.0,
        level in 8u8..15,
    ) {
        let fov = fov_deg.to_radians();
        simplex(&nearest_weights(&p, level).unwrap())?;
        simplex(&frustum_weights(&p, heading, fov, 400.0, level).unwrap())?;
        simplex(&frustum_support(&p, heading, fov, 400.0, level).unwrap())?;
        simplex(&bilinear_weights(&p, level).unwrap())?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negative_set_respects_the_exclusion_radius(
        east in -8000.0f64..8000.0,
        north in -8000.0f64..8000.0,
        radius in 0.0f64..6000.0,
    ) {
        let cells = cells_in_cap(&region(), 10_000.0, 11).unwrap();
        let q = region().offset_enu(east, north);
        let neg = negative_set(&q, &cells, radius);
        for c in &cells {
            let d = haversine_distance(&q, &c.center());
            // Chord and arc differ by far less than a meter at these ranges.
            if d <= radius - 1e-3 {
                prop_assert!(!neg.contains(c));
            }
            if d > radius + 1e-3 {
                prop_assert!(neg.contains(c));
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic(seed in any::<u64>(), input in 1usize..20, hidden in 1usize..20, dim in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::init(input, hidden, dim, &mut rng).unwrap();
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-3.0..3.0)).collect();
        if let Ok(e) = enc.encode(&x) {
            let n = dot(e.as_slice(), e.as_slice()).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
            prop_assert_eq!(enc.encode(&x).unwrap(), e);
        }
    }

    #[test]
    fn loss_is_positive_and_order_invariant(seed in any::<u64>(), n in 2usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = 11;
        let dim = 6;
        let cells = cells_in_cap(&region(), 25_000.0, level).unwrap();
        let table = PrototypeTable::random(level, dim, cells, &mut rng).unwrap();
        let mut cfg = LossConfig::for_level(level);
        cfg.frustum_depth_m = 400.0;
        let locs: Vec<GeoPoint> = (0..n)
            .map(|_| region().offset_enu(rng.random_range(-9e3..9e3), rng.random_range(-9e3..9e3)))
            .collect();
        let q: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, dim)).collect();
        let a: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, dim)).collect();
        let pos: Vec<Positives> = locs
            .iter()
            .map(|l| Positives {
                ground: frustum_weights(l, rng.random_range(0.0..std::f64::consts::TAU), 1.1, 400.0, level).unwrap(),
                aerial: bilinear_weights(l, level).unwrap(),
            })
            .collect();
        let shards = shard_prototypes(table.len(), d).unwrap();
        let out = ms_loss_embeddings(&q, &a, &locs, &pos, &table, &shards, &cfg).unwrap();
        prop_assert!(out.loss.positive > 0.0);
        prop_assert!(out.loss.negative >= 0.0);
        prop_assert!(out.loss.total > 0.0);

        let perm: Vec<usize> = (0..n).rev().collect();
        let pick = |v: &Vec<Vec<f64>>| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let locs2: Vec<GeoPoint> = perm.iter().map(|&i| locs[i]).collect();
        let pos2: Vec<Positives> = perm.iter().map(|&i| pos[i].clone()).collect();
        let out2 = ms_loss_embeddings(&pick(&q), &pick(&a), &locs2, &pos2, &table, &shards, &cfg).unwrap();
        let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
        prop_assert!(rel(out.loss.total, out2.loss.total) <= 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            for t in 0..dim {
                let (g1, g2) = (out.grads.ground[i][t], out2.grads.ground[k][t]);
                prop_assert!((g1 - g2).abs() <= 1e-12 * g1.abs().max(g2.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn search_matches_a_full_sort(seed in any::<u64>(), n in 1usize..200, k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 5;
        let entries: Vec<(u64, GeoPoint, Vec<f64>)> = (0..n as u64)
            .map(|id| {
                // Few distinct directions force ties.
                (id * 7 + 3, region(), coarse_unit(&mut rng, dim))
            })
            .collect();
        let db = CellCodeDB::new(DbMode::Aerial, 13, 0.0, dim, entries.clone()).unwrap();
        let q = coarse_unit(&mut rng, dim);
        let hits = search_topk(&db, &q, k).unwrap();
        let mut all: Vec<(f64, u64)> = entries.iter().map(|(id, _, v)| (dot(&q, v), *id)).collect();
        all.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let want: Vec<u64> = all.iter().take(k).map(|x| x.1).collect();
        prop_assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), want);
        prop_assert_eq!(search_topk(&db, &q, k).unwrap(), hits);
    }

    #[test]
    fn recall_is_monotone_in_k_and_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results: Vec<Vec<Hit>> = (0..30)
            .map(|_| {
                (0..10)
                    .map(|id| Hit {
                        id,
                        score: 0.0,
                        anchor: region().offset_enu(rng.random_range(-5e3..5e3), rng.random_range(-5e3..5e3)),
                    })
                    .collect()
            })
            .collect();
        let gts = vec![region(); 30];
        let ks = [1, 2, 5, 10];
        let ds = [100.0, 500.0, 2000.0, 8000.0];
        for w in ks.windows(2) {
            for d in ds {
                prop_assert!(recall_at(&results, &gts, w[0], d) <= recall_at(&results, &gts, w[1], d));
            }
        }
        for w in ds.windows(2) {
            for k in ks {
                prop_assert!(recall_at(&results, &gts, k, w[0]) <= recall_at(&results, &gts, k, w[1]));
            }
        }
    }

    #[test]
    fn hybrid_entries_decompose(seed in any::<u64>(), kappa in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lp, la, dim) = (11, 12, 4);
        let cells = cells_in_cap(&region(), 6000.0, lp).unwrap();
        let table = PrototypeTable::random(lp, dim, cells.clone(), &mut rng).unwrap();
        let fine: Vec<CellId> = cells.iter().flat_map(|c| c.children().unwrap()).collect();
        let entries = fine.iter().map(|c| (c.pack(), c.center(), unit(&mut rng, dim))).collect();
        let aerial = CellCodeDB::new(DbMode::Aerial, la, 0.0, dim, entries).unwrap();
        let hybrid = build_hybrid_db(&table, &aerial, kappa, false).unwrap();
        prop_assert_eq!(hybrid.len(), aerial.len());
        for k in 0..hybrid.len() {
            let id = CellId::unpack(hybrid.ids()[k]).unwrap();
            let p = table.row(table.index_of(&id.parent(lp).unwrap()).unwrap());
            let a = aerial.vector(aerial.position(hybrid.ids()[k]).unwrap());
            for t in 0..dim {
                prop_assert!((hybrid.vector(k)[t] - kappa * p[t] - a[t]).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn fallback_leaves_covered_cells_alone(seed in any::<u64>(), kappa in 0.0f64..4.0, drop in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lp, la, dim) = (11, 12, 4);
        let cells = cells_in_cap(&region(), 6000.0, lp).unwrap();
        let full = PrototypeTable::random(lp, dim, cells.clone(), &mut rng).unwrap();
        let kept: Vec<CellId> = cells.iter().copied().filter(|_| rng.random::<f64>() >= drop).collect();
        prop_assume!(!kept.is_empty() && kept.len() < cells.len());
        let data: Vec<f64> = kept.iter().flat_map(|c| full.get(c).unwrap().to_vec()).collect();
        let partial = PrototypeTable::new(lp, dim, kept.clone(), data).unwrap();
        let fine: Vec<CellId> = cells.iter().flat_map(|c| c.children().unwrap()).collect();
        let entries = fine.iter().map(|c| (c.pack(), c.center(), unit(&mut rng, dim))).collect();
        let aerial = CellCodeDB::new(DbMode::Aerial, la, 0.0, dim, entries).unwrap();
        prop_assert!(build_hybrid_db(&partial, &aerial, kappa, false).is_err());
        let with_gaps = build_hybrid_db(&partial, &aerial, kappa, true).unwrap();
        for k in 0..with_gaps.len() {
            let parent = CellId::unpack(with_gaps.ids()[k]).unwrap().parent(lp).unwrap();
            if let Some(p) = partial.get(&parent) {
                let want: Vec<f64> = aerial.vector(k).iter().zip(p).map(|(a, p)| a + kappa * p).collect();
                prop_assert_eq!(with_gaps.vector(k), &want[..]);
            } else {
                prop_assert_eq!(with_gaps.vector(k), aerial.vector(k));
            }
        }
    }
}
