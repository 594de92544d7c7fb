use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use struid_core::ingest::{assign_points, split_chronological, split_counts, Visit};
use struid_core::kg::{adjacent_pairs, build_kg_from_parts, haversine_km, EntityType, PoiSite, Relation};

#[test]
fn regions_match_a_per_point_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pts: Vec<(f64, f64)> = (0..100).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let a = assign_points(&pts, 4).unwrap();

    let lo_lat = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi_lat = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let lo_lon = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi_lon = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let cell = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * 4.0).floor() as usize).min(3);
    let cells: Vec<(usize, usize)> = pts.iter().map(|&(la, lo)| (cell(la, lo_lat, hi_lat), cell(lo, lo_lon, hi_lon))).collect();
    let used: BTreeSet<(usize, usize)> = cells.iter().copied().collect();
    let used: Vec<(usize, usize)> = used.into_iter().collect();
    for (i, c) in cells.iter().enumerate() {
        assert_eq!(a.region_of[i], used.binary_search(c).unwrap(), "point {i}");
    }
    assert_eq!(a.cells, used);
}

#[test]
fn nine_events_split_six_zero_three() {
    assert_eq!(split_counts(9), (6, 0, 3));
    assert_eq!(split_counts(10), (7, 1, 2));
    assert_eq!(split_counts(2), (2, 0, 0));
}

#[test]
fn adjacency_on_fifty_pois_matches_pairwise_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let pts: Vec<(f64, f64)> = (0..50)
        .map(|_| (51.5 + rng.gen_range(0.0..0.006), -0.12 + rng.gen_range(0.0..0.009)))
        .collect();
    let mut expected = Vec::new();
    for i in 0..50 {
        for j in i + 1..50 {
            if haversine_km(pts[i], pts[j]) < 0.2 {
                expected.push((i, j));
            }
        }
    }
    assert!(!expected.is_empty());
    assert_eq!(adjacent_pairs(&pts, 0.2), expected);
}

#[test]
fn adjacency_across_the_antimeridian() {
    let pts = [(0.0, 179.9995), (0.0, -179.9995), (0.0, 0.0)];
    assert_eq!(adjacent_pairs(&pts, 0.2), vec![(0, 1)]);
}

fn visits_strategy() -> impl Strategy<Value = Vec<(usize, i64)>> {
    proptest::collection::vec((0usize..4, 1i64..1_000), 0..60)
}

proptest! {
    #[test]
    fn haversine_is_symmetric(a in -80.0f64..80.0, b in -179.0f64..179.0, c in -80.0f64..80.0, d in -179.0f64..179.0) {
        prop_assert_eq!(haversine_km((a, b), (c, d)), haversine_km((c, d), (a, b)));
    }

    #[test]
    fn split_is_chronological_and_sized(events in visits_strategy()) {
        let visits: Vec<Visit> = events.iter().map(|&(user, ts)| Visit { user, poi: 0, ts }).collect();
        let split = split_chronological(&visits, 4);
        for u in 0..4 {
            let n = visits.iter().filter(|v| v.user == u).count();
            let (tr, va, te) = (&split.train[u], &split.valid[u], &split.test[u]);
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            if n >= 3 {
                // largest train with 10 * train <= 7 * n, likewise for valid
                prop_assert!(10 * tr.len() <= 7 * n && 10 * (tr.len() + 1) > 7 * n);
                prop_assert!(10 * va.len() <= n && 10 * (va.len() + 1) > n);
            } else {
                prop_assert_eq!(tr.len(), n);
            }
            let max_tr = tr.iter().map(|v| v.ts).max().unwrap_or(i64::MIN);
            let min_va = va.iter().map(|v| v.ts).min().unwrap_or(i64::MAX);
            let max_va = va.iter().map(|v| v.ts).max().unwrap_or(max_tr);
            let min_te = te.iter().map(|v| v.ts).min().unwrap_or(i64::MAX);
            prop_assert!(max_tr <= min_va && max_tr <= min_te && max_va <= min_te);
        }
    }

    #[test]
    fn graph_invariants_hold(
        seed in 0u64..1000,
        n_pois in 1usize..25,
        n_users in 0usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<PoiSite> = (0..n_pois)
            .map(|_| PoiSite {
                lat: 40.0 + rng.gen_range(0.0..0.004),
                lon: 10.0 + rng.gen_range(0.0..0.004),
                category: Some(rng.gen_range(0..3)),
                region: Some(rng.gen_range(0..2)),
            })
            .collect();
        let visits: Vec<(usize, usize)> = (0..n_users * 4)
            .map(|_| (rng.gen_range(0..n_users.max(1)), rng.gen_range(0..n_pois)))
            .filter(|_| n_users > 0)
            .collect();
        let kg = build_kg_from_parts(n_users, 3, 2, &sites, visits.iter().copied(), 0.2).unwrap();

        let set: HashSet<_> = kg.triples.iter().copied().collect();
        prop_assert_eq!(set.len(), kg.triples.len());
        for t in &kg.triples {
            prop_assert!(t.is_well_typed());
            prop_assert!(t.head.index < kg.count(t.head.ty) && t.tail.index < kg.count(t.tail.ty));
            if t.relation == Relation::Adjacent {
                prop_assert_ne!(t.head, t.tail);
                let mut rev = *t;
                std::mem::swap(&mut rev.head, &mut rev.tail);
                prop_assert!(set.contains(&rev));
            }
        }
        for p in 0..n_pois {
            for r in [Relation::Categorized, Relation::Located] {
                let n = kg.triples.iter().filter(|t| t.relation == r && t.head.index == p && t.head.ty == EntityType::Poi).count();
                prop_assert_eq!(n, 1);
            }
        }
        let distinct_visits: HashSet<(usize, usize)> = visits.into_iter().collect();
        prop_assert_eq!(kg.relation_count(Relation::Visit), distinct_visits.len());
    }
}
