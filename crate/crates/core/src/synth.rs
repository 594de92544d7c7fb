//! Synthetic check-in data with known structure.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::CheckInEvent;
use crate::kg::{build_kg_from_parts, EntityRef, EntityType, KnowledgeGraph, PoiSite, Relation, Triple};

const KM_PER_DEG_LAT: f64 = crate::kg::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
/// 2024-01-01T00:00:00Z
const EPOCH_2024: i64 = 1_704_067_200;

/// A city of square neighbourhoods with daily routines.
///
/// Each user lives in one neighbourhood and works in another. A day is a
/// fixed sequence of time slots, each tied to a category; weekends swap the
/// work slot for a leisure one near home. Each user has a favourite POI per
/// slot and visits it with probability `regularity`; otherwise they pick
/// another POI of the slot's category in the same neighbourhood, or rarely
/// any POI of that category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCityConfig {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub neighborhoods_per_axis: usize,
    pub checkins_per_user: usize,
    pub regularity: f64,
    pub span_km: f64,
    pub center_lat: f64,
    pub center_lon: f64,
}

impl Default for SynthCityConfig {
    fn default() -> Self {
        SynthCityConfig {
            users: 60,
            pois: 120,
            categories: 6,
            neighborhoods_per_axis: 3,
            checkins_per_user: 30,
            regularity: 0.7,
            span_km: 6.0,
            center_lat: 40.73,
            center_lon: -73.99,
        }
    }
}

/// (hour, category slot) of the weekday and weekend routines. Category slot
/// `s` maps to category `s % categories`.
const WEEKDAY: [(i64, usize, Place); 4] = [(8, 0, Place::Home), (12, 1, Place::Work), (18, 2, Place::Work), (21, 3, Place::Home)];
const WEEKEND: [(i64, usize, Place); 3] = [(10, 0, Place::Home), (14, 4, Place::Home), (20, 5, Place::Home)];

#[derive(Clone, Copy, Debug)]
enum Place {
    Home,
    Work,
}

pub fn synthetic_city(cfg: &SynthCityConfig, seed: u64) -> Vec<CheckInEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cfg.neighborhoods_per_axis.max(1);
    let n_hoods = g * g;
    let cats = cfg.categories.max(1);
    let lat_span = cfg.span_km / KM_PER_DEG_LAT;
    let lon_span = lat_span / cfg.center_lat.to_radians().cos();
    let (lat0, lon0) = (cfg.center_lat - lat_span / 2.0, cfg.center_lon - lon_span / 2.0);
    let cell_lat = lat_span / g as f64;
    let cell_lon = lon_span / g as f64;

    // POI i lives in neighbourhood i % n_hoods with category (i / n_hoods) %
    // cats, so every neighbourhood offers every category when pois is large
    // enough.
    struct SynthPoi {
        hood: usize,
        category: usize,
        lat: f64,
        lon: f64,
    }
    let pois: Vec<SynthPoi> = (0..cfg.pois)
        .map(|i| {
            let hood = i % n_hoods;
            let (r, c) = (hood / g, hood % g);
            SynthPoi {
                hood,
                category: (i / n_hoods) % cats,
                lat: lat0 + (r as f64 + rng.gen_range(0.05..0.95)) * cell_lat,
                lon: lon0 + (c as f64 + rng.gen_range(0.05..0.95)) * cell_lon,
            }
        })
        .collect();
    let by_hood_cat = |hood: usize, cat: usize| -> Vec<usize> {
        (0..pois.len())
            .filter(|&i| pois[i].hood == hood && pois[i].category == cat)
            .collect()
    };
    let by_cat = |cat: usize| -> Vec<usize> { (0..pois.len()).filter(|&i| pois[i].category == cat).collect() };

    let mut events = Vec::new();
    for u in 0..cfg.users {
        let home = rng.gen_range(0..n_hoods);
        let work = rng.gen_range(0..n_hoods);
        let hood_of = |p: Place| match p {
            Place::Home => home,
            Place::Work => work,
        };
        let choose_favourite = |rng: &mut ChaCha8Rng, place: Place, slot: usize| -> Option<usize> {
            let local = by_hood_cat(hood_of(place), slot % cats);
            let pool = if local.is_empty() { by_cat(slot % cats) } else { local };
            pool.choose(rng).copied()
        };
        let fav_weekday: Vec<Option<usize>> = WEEKDAY.iter().map(|&(_, s, p)| choose_favourite(&mut rng, p, s)).collect();
        let fav_weekend: Vec<Option<usize>> = WEEKEND.iter().map(|&(_, s, p)| choose_favourite(&mut rng, p, s)).collect();
        let start_day = rng.gen_range(0..7i64);
        let mut day = start_day;
        let mut produced = 0;
        while produced < cfg.checkins_per_user {
            let weekday = (day + 1).rem_euclid(7); // 2024-01-01 is a Monday; 0 = Sunday
            let weekend = weekday == 0 || weekday == 6;
            let (slots, favs): (&[(i64, usize, Place)], &Vec<Option<usize>>) =
                if weekend { (&WEEKEND, &fav_weekend) } else { (&WEEKDAY, &fav_weekday) };
            for (&(hour, slot, place), fav) in slots.iter().zip(favs) {
                if produced == cfg.checkins_per_user {
                    break;
                }
                let Some(fav) = *fav else { continue };
                let roll: f64 = rng.gen();
                let poi = if roll < cfg.regularity {
                    fav
                } else if roll < cfg.regularity + (1.0 - cfg.regularity) * 0.8 {
                    *by_hood_cat(hood_of(place), slot % cats).choose(&mut rng).unwrap_or(&fav)
                } else {
                    *by_cat(slot % cats).choose(&mut rng).unwrap_or(&fav)
                };
                let ts = EPOCH_2024 + day * 86_400 + hour * 3600 + rng.gen_range(0..1800);
                let p = &pois[poi];
                events.push(CheckInEvent {
                    user_id: format!("u{u}"),
                    poi_id: format!("p{poi}"),
                    lat: p.lat,
                    lon: p.lon,
                    category_id: format!("c{}", p.category),
                    timestamp: ts,
                });
                produced += 1;
            }
            day += 1;
        }
    }
    events
}

/// Every user loops over a private ordering of `route_len` POIs drawn from a
/// shared catalogue, one check-in every few hours.
pub fn cyclic_routes(users: usize, catalog: usize, route_len: usize, checkins_per_user: usize, seed: u64) -> Vec<CheckInEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(f64, f64)> = (0..catalog)
        .map(|_| (40.7 + rng.gen_range(0.0..0.05), -74.0 + rng.gen_range(0.0..0.05)))
        .collect();
    let all: Vec<usize> = (0..catalog).collect();
    let mut events = Vec::new();
    for u in 0..users {
        let route: Vec<usize> = all.choose_multiple(&mut rng, route_len).copied().collect();
        for k in 0..checkins_per_user {
            let p = route[k % route_len];
            events.push(CheckInEvent {
                user_id: format!("u{u}"),
                poi_id: format!("p{p}"),
                lat: coords[p].0,
                lon: coords[p].1,
                category_id: format!("c{}", p % 4),
                timestamp: EPOCH_2024 + (k as i64) * 4 * 3600,
            });
        }
    }
    events
}

/// Two geographically separate blocks of POIs, each visited densely by its
/// own users and never by the other block's.
#[derive(Clone, Debug)]
pub struct TwoBlockKg {
    /// Graph with the held-out visit triples removed.
    pub train: KnowledgeGraph,
    /// Every triple, including held-out visits.
    pub full: KnowledgeGraph,
    pub held_out: Vec<Triple>,
    /// Block of each POI.
    pub poi_block: Vec<usize>,
}

pub fn two_block_kg(
    pois_per_block: usize,
    users: usize,
    visit_prob: f64,
    held_out_fraction: f64,
    seed: u64,
) -> TwoBlockKg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pois = 2 * pois_per_block;
    let categories = 4;
    let poi_block: Vec<usize> = (0..n_pois).map(|p| p / pois_per_block).collect();
    let sites: Vec<PoiSite> = (0..n_pois)
        .map(|p| {
            let b = poi_block[p] as f64;
            PoiSite {
                lat: 40.70 + b * 0.05 + rng.gen_range(0.0..0.004),
                lon: -74.00 + b * 0.05 + rng.gen_range(0.0..0.004),
                category: Some(rng.gen_range(0..categories)),
                region: Some(poi_block[p]),
            }
        })
        .collect();
    let user_block = |u: usize| if u < users / 2 { 0 } else { 1 };
    let mut visits = Vec::new();
    for u in 0..users {
        for p in 0..n_pois {
            if poi_block[p] == user_block(u) && rng.gen_bool(visit_prob) {
                visits.push((u, p));
            }
        }
    }
    visits.shuffle(&mut rng);
    let n_held = (visits.len() as f64 * held_out_fraction).round() as usize;
    let full = build_kg_from_parts(users, categories, 2, &sites, visits.iter().copied(), 0.2).expect("valid fixture");
    let train = build_kg_from_parts(users, categories, 2, &sites, visits[n_held..].iter().copied(), 0.2).expect("valid fixture");
    let held_out = visits[..n_held]
        .iter()
        .map(|&(u, p)| Triple {
            head: EntityRef::new(EntityType::User, u),
            relation: Relation::Visit,
            tail: EntityRef::new(EntityType::Poi, p),
        })
        .collect();
    TwoBlockKg {
        train,
        full,
        held_out,
        poi_block,
    }
}

/// For each held-out positive, one visit triple of the same user that is
/// absent from `full`.
pub fn negatives_for<R: Rng + ?Sized>(full: &KnowledgeGraph, positives: &[Triple], rng: &mut R) -> Vec<Triple> {
    let truth: HashSet<Triple> = full.triple_set();
    positives
        .iter()
        .map(|t| loop {
            let mut c = *t;
            c.tail.index = rng.gen_range(0..full.count(t.tail.ty));
            if !truth.contains(&c) {
                break c;
            }
        })
        .collect()
}
