//! Check-in parsing, grid regions, dense indexing and per-user chronological
//! splits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckInEvent {
    #[serde(rename = "user")]
    pub user_id: String,
    #[serde(rename = "poi")]
    pub poi_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "category")]
    pub category_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl InputFormat {
    /// Guesses the format from the file extension; anything other than
    /// `.jsonl`/`.json` is read as TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => InputFormat::Jsonl,
            _ => InputFormat::Tsv,
        }
    }
}

/// Parsed events plus the 1-based numbers of skipped malformed lines.
#[derive(Clone, Debug, Default)]
pub struct ParsedCheckins {
    pub events: Vec<CheckInEvent>,
    pub malformed_lines: Vec<usize>,
}

pub fn parse_checkins(path: &Path, format: InputFormat) -> Result<ParsedCheckins> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkins_str(&text, format)
}

/// Parses check-ins from text. Blank lines are ignored. Up to 1% of the
/// remaining lines may be malformed; they are skipped with a warning.
pub fn parse_checkins_str(text: &str, format: InputFormat) -> Result<ParsedCheckins> {
    let mut out = ParsedCheckins::default();
    let mut total = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = match format {
            InputFormat::Tsv => parse_tsv_line(line),
            InputFormat::Jsonl => parse_json_line(line),
        };
        match parsed.filter(valid_event) {
            Some(e) => out.events.push(e),
            None => out.malformed_lines.push(i + 1),
        }
    }
    if total == 0 {
        log::warn!("no check-in records found");
        return Ok(out);
    }
    let bad = out.malformed_lines.len();
    if bad * 100 > total {
        let shown: Vec<String> = out.malformed_lines.iter().take(20).map(|n| n.to_string()).collect();
        let more = if bad > 20 { ", ..." } else { "" };
        return Err(Error::data(format!(
            "{bad} of {total} lines malformed (more than 1%): lines {}{more}",
            shown.join(", ")
        )));
    }
    for n in &out.malformed_lines {
        log::warn!("skipping malformed line {n}");
    }
    check_poi_consistency(&out.events)?;
    Ok(out)
}

fn parse_tsv_line(line: &str) -> Option<CheckInEvent> {
    let f: Vec<&str> = line.split('\t').map(str::trim).collect();
    if f.len() != 6 || f[0].is_empty() || f[1].is_empty() || f[4].is_empty() {
        return None;
    }
    Some(CheckInEvent {
        user_id: f[0].to_string(),
        poi_id: f[1].to_string(),
        lat: f[2].parse().ok()?,
        lon: f[3].parse().ok()?,
        category_id: f[4].to_string(),
        timestamp: f[5].parse().ok()?,
    })
}

fn json_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_json_line(line: &str) -> Option<CheckInEvent> {
    let v: Value = serde_json::from_str(line).ok()?;
    Some(CheckInEvent {
        user_id: json_id(v.get("user")?)?,
        poi_id: json_id(v.get("poi")?)?,
        lat: v.get("lat")?.as_f64()?,
        lon: v.get("lon")?.as_f64()?,
        category_id: json_id(v.get("category")?)?,
        timestamp: v.get("ts")?.as_i64()?,
    })
}

fn valid_event(e: &CheckInEvent) -> bool {
    (-90.0..=90.0).contains(&e.lat) && (-180.0..=180.0).contains(&e.lon) && e.timestamp > 0
}

fn check_poi_consistency(events: &[CheckInEvent]) -> Result<()> {
    let mut seen: HashMap<&str, &CheckInEvent> = HashMap::new();
    for e in events {
        match seen.get(e.poi_id.as_str()) {
            None => {
                seen.insert(&e.poi_id, e);
            }
            Some(first) => {
                if first.lat != e.lat || first.lon != e.lon || first.category_id != e.category_id {
                    return Err(Error::data(format!(
                        "POI {} has conflicting metadata: ({}, {}, {}) vs ({}, {}, {})",
                        e.poi_id, first.lat, first.lon, first.category_id, e.lat, e.lon, e.category_id
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Uniform lat/lon grid over a bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
    pub cells_per_axis: usize,
}

impl RegionGrid {
    /// (row, col) cell of a coordinate; a zero-width axis maps to cell 0.
    pub fn cell(&self, lat: f64, lon: f64) -> (usize, usize) {
        let axis = |v: f64, lo: f64, hi: f64| {
            if hi <= lo {
                return 0;
            }
            let n = self.cells_per_axis;
            let c = ((v - lo) / (hi - lo) * n as f64).floor();
            (c.max(0.0) as usize).min(n - 1)
        };
        (axis(lat, self.min_lat, self.max_lat), axis(lon, self.min_lon, self.max_lon))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionAssignment {
    pub grid: RegionGrid,
    /// Grid cell of each dense region id, in row-major cell order.
    pub cells: Vec<(usize, usize)>,
    /// Region of each input point.
    pub region_of: Vec<usize>,
}

/// Assigns each coordinate to a grid cell over the tight bounding box and
/// numbers the non-empty cells densely in row-major order.
pub fn assign_points(coords: &[(f64, f64)], cells_per_axis: usize) -> Result<RegionAssignment> {
    if coords.is_empty() {
        return Err(Error::data("cannot derive regions without any POI"));
    }
    if cells_per_axis == 0 {
        return Err(Error::config("cells_per_axis must be at least 1"));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        coords.iter().map(pick).fold(init, f)
    };
    let grid = RegionGrid {
        min_lat: fold(f64::min, f64::INFINITY, |c| c.0),
        max_lat: fold(f64::max, f64::NEG_INFINITY, |c| c.0),
        min_lon: fold(f64::min, f64::INFINITY, |c| c.1),
        max_lon: fold(f64::max, f64::NEG_INFINITY, |c| c.1),
        cells_per_axis,
    };
    let raw: Vec<(usize, usize)> = coords.iter().map(|&(la, lo)| grid.cell(la, lo)).collect();
    let mut used: Vec<(usize, usize)> = raw.clone();
    used.sort_unstable();
    used.dedup();
    let dense: HashMap<(usize, usize), usize> = used.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    Ok(RegionAssignment {
        grid,
        region_of: raw.iter().map(|c| dense[c]).collect(),
        cells: used,
    })
}

/// Region id for every POI id in `events` (first occurrence gives the
/// coordinates).
pub fn assign_regions(
    events: &[CheckInEvent],
    cells_per_axis: usize,
) -> Result<(RegionGrid, BTreeMap<String, usize>)> {
    let mut order: Vec<&CheckInEvent> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in events {
        if seen.insert(e.poi_id.as_str()) {
            order.push(e);
        }
    }
    let coords: Vec<(f64, f64)> = order.iter().map(|e| (e.lat, e.lon)).collect();
    let a = assign_points(&coords, cells_per_axis)?;
    let map = order.iter().zip(&a.region_of).map(|(e, &r)| (e.poi_id.clone(), r)).collect();
    Ok((a.grid, map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub category: usize,
    pub region: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CatalogRepr", into = "CatalogRepr")]
pub struct Catalog {
    pub users: Vec<String>,
    pub pois: Vec<Poi>,
    pub categories: Vec<String>,
    pub grid: RegionGrid,
    pub region_cells: Vec<(usize, usize)>,
    user_index: HashMap<String, usize>,
    poi_index: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct CatalogRepr {
    users: Vec<String>,
    pois: Vec<Poi>,
    categories: Vec<String>,
    grid: RegionGrid,
    region_cells: Vec<(usize, usize)>,
}

impl From<CatalogRepr> for Catalog {
    fn from(r: CatalogRepr) -> Self {
        Catalog::new(r.users, r.pois, r.categories, r.grid, r.region_cells)
    }
}

impl From<Catalog> for CatalogRepr {
    fn from(c: Catalog) -> Self {
        CatalogRepr {
            users: c.users,
            pois: c.pois,
            categories: c.categories,
            grid: c.grid,
            region_cells: c.region_cells,
        }
    }
}

impl Catalog {
    pub fn new(
        users: Vec<String>,
        pois: Vec<Poi>,
        categories: Vec<String>,
        grid: RegionGrid,
        region_cells: Vec<(usize, usize)>,
    ) -> Self {
        let user_index = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let poi_index = pois.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Catalog {
            users,
            pois,
            categories,
            grid,
            region_cells,
            user_index,
            poi_index,
        }
    }

    pub fn user(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn poi(&self, raw: &str) -> Option<usize> {
        self.poi_index.get(raw).copied()
    }

    pub fn num_regions(&self) -> usize {
        self.region_cells.len()
    }

    /// Display name of a region: its grid cell.
    pub fn region_name(&self, r: usize) -> String {
        let (row, col) = self.region_cells[r];
        format!("cell_{row}_{col}")
    }
}

/// One check-in in dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub user: usize,
    pub poi: usize,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    /// Visits in input order.
    pub visits: Vec<Visit>,
}

/// Assigns dense indices (users, POIs and categories in order of first
/// appearance) and grid regions.
pub fn index_events(events: &[CheckInEvent], cells_per_axis: usize) -> Result<Dataset> {
    check_poi_consistency(events)?;
    let mut users: Vec<String> = Vec::new();
    let mut user_ix: HashMap<&str, usize> = HashMap::new();
    let mut cats: Vec<String> = Vec::new();
    let mut cat_ix: HashMap<&str, usize> = HashMap::new();
    let mut poi_events: Vec<&CheckInEvent> = Vec::new();
    let mut poi_ix: HashMap<&str, usize> = HashMap::new();
    let mut visits = Vec::with_capacity(events.len());
    for e in events {
        let u = *user_ix.entry(&e.user_id).or_insert_with(|| {
            users.push(e.user_id.clone());
            users.len() - 1
        });
        cat_ix.entry(&e.category_id).or_insert_with(|| {
            cats.push(e.category_id.clone());
            cats.len() - 1
        });
        let p = *poi_ix.entry(&e.poi_id).or_insert_with(|| {
            poi_events.push(e);
            poi_events.len() - 1
        });
        visits.push(Visit {
            user: u,
            poi: p,
            ts: e.timestamp,
        });
    }
    let coords: Vec<(f64, f64)> = poi_events.iter().map(|e| (e.lat, e.lon)).collect();
    let (grid, region_of, region_cells) = if coords.is_empty() {
        let grid = RegionGrid {
            min_lat: 0.0,
            min_lon: 0.0,
            max_lat: 0.0,
            max_lon: 0.0,
            cells_per_axis,
        };
        (grid, Vec::new(), Vec::new())
    } else {
        let a = assign_points(&coords, cells_per_axis)?;
        (a.grid, a.region_of, a.cells)
    };
    let pois = poi_events
        .iter()
        .zip(&region_of)
        .map(|(e, &region)| Poi {
            id: e.poi_id.clone(),
            lat: e.lat,
            lon: e.lon,
            category: cat_ix[e.category_id.as_str()],
            region,
        })
        .collect();
    Ok(Dataset {
        catalog: Catalog::new(users, pois, cats, grid, region_cells),
        visits,
    })
}

/// Per-user chronological sequences, indexed by dense user id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Vec<Visit>>,
    pub valid: Vec<Vec<Visit>>,
    pub test: Vec<Vec<Visit>>,
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// A user's full chronological sequence (train, then valid, then test).
    pub fn full_sequence(&self, user: usize) -> Vec<Visit> {
        let mut seq = self.train[user].clone();
        seq.extend_from_slice(&self.valid[user]);
        seq.extend_from_slice(&self.test[user]);
        seq
    }
}

/// (train, valid, test) sizes for a user with `n` events.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let train = n * 7 / 10;
    let valid = n / 10;
    (train, valid, n - train - valid)
}

/// Stable-sorts each user's visits by timestamp (input order breaks ties)
/// and cuts 70/10/20.
pub fn split_chronological(visits: &[Visit], num_users: usize) -> DatasetSplit {
    let mut per_user: Vec<Vec<Visit>> = vec![Vec::new(); num_users];
    for v in visits {
        per_user[v.user].push(*v);
    }
    let mut split = DatasetSplit::default();
    for mut seq in per_user {
        seq.sort_by_key(|v| v.ts);
        let (tr, va, _) = split_counts(seq.len());
        let test = seq.split_off(tr + va);
        let valid = seq.split_off(tr);
        split.train.push(seq);
        split.valid.push(valid);
        split.test.push(test);
    }
    split
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub records: usize,
    pub categories: usize,
    pub regions: usize,
    pub train_records: usize,
    pub valid_records: usize,
    pub test_records: usize,
}

pub fn dataset_stats(catalog: &Catalog, split: &DatasetSplit) -> DatasetStats {
    let count = |s: &Vec<Vec<Visit>>| s.iter().map(Vec::len).sum::<usize>();
    let (tr, va, te) = (count(&split.train), count(&split.valid), count(&split.test));
    DatasetStats {
        users: catalog.users.len(),
        pois: catalog.pois.len(),
        records: tr + va + te,
        categories: catalog.categories.len(),
        regions: catalog.num_regions(),
        train_records: tr,
        valid_records: va,
        test_records: te,
    }
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    user: String,
    poi: String,
    lat: f64,
    lon: f64,
    category: String,
    region: usize,
    ts: i64,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "valid.jsonl", "test.jsonl"];

/// Writes `catalog.json` and one JSONL file per split part. Records are
/// grouped by user in index order, chronologically within a user.
pub fn write_split(dir: &Path, catalog: &Catalog, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::io::write_json(&dir.join("catalog.json"), catalog)?;
    for (name, part) in SPLIT_FILES.iter().zip([&split.train, &split.valid, &split.test]) {
        let path = dir.join(name);
        let mut buf = Vec::new();
        for v in part.iter().flatten() {
            let p = &catalog.pois[v.poi];
            let rec = SplitRecord {
                user: catalog.users[v.user].clone(),
                poi: p.id.clone(),
                lat: p.lat,
                lon: p.lon,
                category: catalog.categories[p.category].clone(),
                region: p.region,
                ts: v.ts,
            };
            serde_json::to_writer(&mut buf, &rec).expect("record serializes");
            buf.push(b'\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<(Catalog, DatasetSplit)> {
    let catalog: Catalog = crate::io::read_json(&dir.join("catalog.json"))?;
    let n = catalog.users.len();
    let mut parts = Vec::new();
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seqs = vec![Vec::new(); n];
        for (i, line) in text.lines().enumerate() {
            let rec: SplitRecord = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let unknown = || Error::data(format!("{}:{}: unknown user or POI", path.display(), i + 1));
            let user = catalog.user(&rec.user).ok_or_else(unknown)?;
            let poi = catalog.poi(&rec.poi).ok_or_else(unknown)?;
            seqs[user].push(Visit { user, poi, ts: rec.ts });
        }
        parts.push(seqs);
    }
    let test = parts.pop().expect("three parts");
    let valid = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok((catalog, DatasetSplit { train, valid, test }))
}
