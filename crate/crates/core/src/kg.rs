//! Heterogeneous check-in knowledge graph over users, POIs, categories and
//! regions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use struid_numerics::NeighborLists;

use crate::error::{Error, Result};
use crate::ingest::{Catalog, DatasetSplit};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    User,
    Poi,
    Category,
    Region,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::User, EntityType::Poi, EntityType::Category, EntityType::Region];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityType::User => "user",
            EntityType::Poi => "poi",
            EntityType::Category => "category",
            EntityType::Region => "region",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EntityType::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub ty: EntityType,
    pub index: usize,
}

impl EntityRef {
    pub fn new(ty: EntityType, index: usize) -> Self {
        EntityRef { ty, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Visit,
    Adjacent,
    Categorized,
    Located,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Visit, Relation::Adjacent, Relation::Categorized, Relation::Located];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Visit => "visit",
            Relation::Adjacent => "adjacent",
            Relation::Categorized => "categorized",
            Relation::Located => "located",
        }
    }

    /// (head type, tail type) every triple of this relation must have.
    pub fn signature(self) -> (EntityType, EntityType) {
        match self {
            Relation::Visit => (EntityType::User, EntityType::Poi),
            Relation::Adjacent => (EntityType::Poi, EntityType::Poi),
            Relation::Categorized => (EntityType::Poi, EntityType::Category),
            Relation::Located => (EntityType::Poi, EntityType::Region),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityRef,
    pub relation: Relation,
    pub tail: EntityRef,
}

impl Triple {
    pub fn is_well_typed(&self) -> bool {
        let (h, t) = self.relation.signature();
        self.head.ty == h && self.tail.ty == t && !(self.relation == Relation::Adjacent && self.head == self.tail)
    }
}

/// Number of directed neighbour slots: each relation seen from its head
/// (forward) and from its tail (inverse).
pub const NUM_DIRECTED_RELATIONS: usize = 2 * Relation::ALL.len();

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    /// Entity count per type, indexed by [`EntityType::index`].
    pub counts: [usize; 4],
    /// Triples sorted by (relation, head, tail); no duplicates.
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Sorts, deduplicates and type-checks the triples.
    pub fn new(counts: [usize; 4], mut triples: Vec<Triple>) -> Result<Self> {
        for t in &triples {
            if !t.is_well_typed() || t.head.index >= counts[t.head.ty.index()] || t.tail.index >= counts[t.tail.ty.index()] {
                return Err(Error::data(format!("invalid triple {t:?}")));
            }
        }
        triples.sort_by_key(|t| (t.relation, t.head, t.tail));
        triples.dedup();
        Ok(KnowledgeGraph { counts, triples })
    }

    pub fn count(&self, ty: EntityType) -> usize {
        self.counts[ty.index()]
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    /// First global node id of each type; types are laid out in
    /// [`EntityType::ALL`] order.
    pub fn offset(&self, ty: EntityType) -> usize {
        self.counts[..ty.index()].iter().sum()
    }

    pub fn node(&self, e: EntityRef) -> usize {
        self.offset(e.ty) + e.index
    }

    pub fn entity(&self, node: usize) -> EntityRef {
        let mut rest = node;
        for ty in EntityType::ALL {
            if rest < self.count(ty) {
                return EntityRef::new(ty, rest);
            }
            rest -= self.count(ty);
        }
        panic!("node {node} out of range");
    }

    pub fn relation_count(&self, r: Relation) -> usize {
        self.triples.iter().filter(|t| t.relation == r).count()
    }

    pub fn triple_set(&self) -> std::collections::HashSet<Triple> {
        self.triples.iter().copied().collect()
    }

    /// Neighbour lists over global node ids for the 8 directed relation
    /// slots. Slot `2r` lists tails of node-as-head triples of relation `r`;
    /// slot `2r + 1` lists heads of node-as-tail triples.
    pub fn neighbor_lists(&self) -> Vec<Arc<NeighborLists>> {
        let n = self.num_nodes();
        let mut lists = vec![vec![Vec::new(); n]; NUM_DIRECTED_RELATIONS];
        for t in &self.triples {
            let (h, tl) = (self.node(t.head), self.node(t.tail));
            let r = t.relation.index();
            lists[2 * r][h].push(tl);
            lists[2 * r + 1][tl].push(h);
        }
        lists.iter().map(|l| Arc::new(NeighborLists::from_lists(l))).collect()
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            entities: EntityType::ALL.iter().map(|&t| (t.name().to_string(), self.count(t))).collect(),
            triples: Relation::ALL
                .iter()
                .map(|&r| (r.name().to_string(), self.relation_count(r)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub entities: BTreeMap<String, usize>,
    pub triples: BTreeMap<String, usize>,
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let s_lat = ((la2 - la1) / 2.0).sin();
    let s_lon = ((lo2 - lo1) / 2.0).sin();
    let h = s_lat * s_lat + la1.cos() * la2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Unordered POI pairs `(i, j)`, `i < j`, strictly closer than `d_km`,
/// found with a spatial hash.
///
/// Points are hashed on the 3-D sphere surface (in km) with cells as wide as
/// the chord subtending `d_km`, so every close pair shares or neighbours a
/// cell regardless of latitude or the antimeridian.
pub fn adjacent_pairs(coords: &[(f64, f64)], d_km: f64) -> Vec<(usize, usize)> {
    let chord = 2.0 * EARTH_RADIUS_KM * (d_km / (2.0 * EARTH_RADIUS_KM)).min(std::f64::consts::FRAC_PI_2).sin();
    let cell = chord * (1.0 + 1e-9) + 1e-12;
    let xyz: Vec<[f64; 3]> = coords
        .iter()
        .map(|&(lat, lon)| {
            let (la, lo) = (lat.to_radians(), lon.to_radians());
            [
                EARTH_RADIUS_KM * la.cos() * lo.cos(),
                EARTH_RADIUS_KM * la.cos() * lo.sin(),
                EARTH_RADIUS_KM * la.sin(),
            ]
        })
        .collect();
    let key = |p: &[f64; 3]| {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in xyz.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (i, p) in xyz.iter().enumerate() {
        let k = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > i && haversine_km(coords[i], coords[j]) < d_km {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Coordinates and metadata of one POI as seen by graph construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoiSite {
    pub lat: f64,
    pub lon: f64,
    pub category: Option<usize>,
    pub region: Option<usize>,
}

/// Builds the graph from parts. `visits` are (user, poi) pairs from the
/// training split; repeats collapse to one triple.
pub fn build_kg_from_parts(
    num_users: usize,
    num_categories: usize,
    num_regions: usize,
    pois: &[PoiSite],
    visits: impl IntoIterator<Item = (usize, usize)>,
    d_km: f64,
) -> Result<KnowledgeGraph> {
    if !(d_km > 0.0) {
        return Err(Error::config(format!("adjacency distance must be positive, got {d_km}")));
    }
    let counts = [num_users, pois.len(), num_categories, num_regions];
    let visit_set: BTreeSet<(usize, usize)> = visits.into_iter().collect();
    let mut triples = Vec::with_capacity(visit_set.len() + 2 * pois.len());
    for (u, p) in visit_set {
        triples.push(Triple {
            head: EntityRef::new(EntityType::User, u),
            relation: Relation::Visit,
            tail: EntityRef::new(EntityType::Poi, p),
        });
    }
    let coords: Vec<(f64, f64)> = pois.iter().map(|p| (p.lat, p.lon)).collect();
    for (i, j) in adjacent_pairs(&coords, d_km) {
        for (a, b) in [(i, j), (j, i)] {
            triples.push(Triple {
                head: EntityRef::new(EntityType::Poi, a),
                relation: Relation::Adjacent,
                tail: EntityRef::new(EntityType::Poi, b),
            });
        }
    }
    for (i, p) in pois.iter().enumerate() {
        let missing = |what: &str| Error::data(format!("POI {i} has no {what}"));
        let c = p.category.ok_or_else(|| missing("category"))?;
        let r = p.region.ok_or_else(|| missing("region"))?;
        let head = EntityRef::new(EntityType::Poi, i);
        triples.push(Triple {
            head,
            relation: Relation::Categorized,
            tail: EntityRef::new(EntityType::Category, c),
        });
        triples.push(Triple {
            head,
            relation: Relation::Located,
            tail: EntityRef::new(EntityType::Region, r),
        });
    }
    KnowledgeGraph::new(counts, triples)
}

/// Builds the graph of a dataset; visit triples come from the train split
/// only.
pub fn build_kg(catalog: &Catalog, split: &DatasetSplit, d_km: f64) -> Result<KnowledgeGraph> {
    let sites: Vec<PoiSite> = catalog
        .pois
        .iter()
        .map(|p| PoiSite {
            lat: p.lat,
            lon: p.lon,
            category: Some(p.category),
            region: Some(p.region),
        })
        .collect();
    let visits = split.train.iter().flatten().map(|v| (v.user, v.poi));
    build_kg_from_parts(
        catalog.users.len(),
        catalog.categories.len(),
        catalog.num_regions(),
        &sites,
        visits,
        d_km,
    )
}

#[derive(Serialize, Deserialize)]
struct KgFile {
    entities: BTreeMap<String, usize>,
    triples: BTreeMap<String, Vec<[usize; 2]>>,
}

impl KnowledgeGraph {
    /// JSON with an entity-count header and one `[head, tail]` array per
    /// relation.
    pub fn to_json(&self) -> String {
        let mut triples: BTreeMap<String, Vec<[usize; 2]>> =
            Relation::ALL.iter().map(|r| (r.name().to_string(), Vec::new())).collect();
        for t in &self.triples {
            triples
                .get_mut(t.relation.name())
                .expect("all relations present")
                .push([t.head.index, t.tail.index]);
        }
        let file = KgFile {
            entities: self.stats().entities,
            triples,
        };
        serde_json::to_string(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KgFile = serde_json::from_str(text).map_err(|e| Error::data(format!("graph file: {e}")))?;
        let mut counts = [0; 4];
        for ty in EntityType::ALL {
            counts[ty.index()] = *file
                .entities
                .get(ty.name())
                .ok_or_else(|| Error::data(format!("graph file lacks {ty} count")))?;
        }
        let mut triples = Vec::new();
        for (name, pairs) in &file.triples {
            let r = Relation::ALL
                .into_iter()
                .find(|r| r.name() == name)
                .ok_or_else(|| Error::data(format!("unknown relation {name}")))?;
            let (h, t) = r.signature();
            for &[a, b] in pairs {
                triples.push(Triple {
                    head: EntityRef::new(h, a),
                    relation: r,
                    tail: EntityRef::new(t, b),
                });
            }
        }
        KnowledgeGraph::new(counts, triples)
    }
}
