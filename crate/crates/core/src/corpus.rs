//! Multi-task prompt serialisation over a closed vocabulary.
//!
//! Every example is
//! `BOS TASK USER <user> PREF (cat reg poi)x<=5 SEP HIST (time ids)xwindow TIME <time> TARGET`
//! followed by the target entity's tokens and `EOS`. History entries of the
//! POI task carry category, region and POI ids; the category and region
//! tasks carry only their own id stream.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, DatasetSplit, Visit};
use crate::kg::EntityType;
use crate::tokenizer::{CodebookSizes, StruIdTable};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const PAD: &str = "<pad>";
pub const TASK_POI: &str = "<task_poi>";
pub const TASK_CAT: &str = "<task_cat>";
pub const TASK_REG: &str = "<task_reg>";
pub const USER: &str = "<user>";
pub const PREF: &str = "<pref>";
pub const HIST: &str = "<hist>";
pub const TIME: &str = "<time>";
pub const TARGET: &str = "<target>";

pub const SPECIALS: [&str; 12] = [BOS, EOS, SEP, PAD, TASK_POI, TASK_CAT, TASK_REG, USER, PREF, HIST, TIME, TARGET];
pub const TIME_BUCKETS: usize = 48;
pub const PREFERENCE_SIZE: usize = 5;

/// Weekend flag times 24 plus the UTC hour.
pub fn time_bucket(ts: i64) -> usize {
    let days = ts.div_euclid(86_400);
    let hour = (ts.rem_euclid(86_400) / 3600) as usize;
    // 1970-01-01 was a Thursday; with Sunday = 0 it is day 4.
    let weekday = (days + 4).rem_euclid(7);
    let weekend = weekday == 0 || weekday == 6;
    usize::from(weekend) * 24 + hour
}

fn time_token(bucket: usize) -> String {
    let kind = if bucket >= 24 { "we" } else { "wd" };
    format!("<time_{kind}_{:02}>", bucket % 24)
}

fn type_prefix(ty: EntityType) -> &'static str {
    match ty {
        EntityType::User => "u",
        EntityType::Poi => "p",
        EntityType::Category => "c",
        EntityType::Region => "r",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Poi,
    Category,
    Region,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Poi, Task::Category, Task::Region];

    pub fn target_type(self) -> EntityType {
        match self {
            Task::Poi => EntityType::Poi,
            Task::Category => EntityType::Category,
            Task::Region => EntityType::Region,
        }
    }

    pub fn marker(self) -> &'static str {
        match self {
            Task::Poi => TASK_POI,
            Task::Category => TASK_CAT,
            Task::Region => TASK_REG,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Poi => "poi",
            Task::Category => "category",
            Task::Region => "region",
        }
    }
}

/// Corpus variants for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-struid")]
    NoStruId,
    #[serde(rename = "no-reg")]
    NoReg,
    #[serde(rename = "no-cat")]
    NoCat,
    #[serde(rename = "no-regcat")]
    NoRegCat,
    #[serde(rename = "no-pref")]
    NoPref,
    #[serde(rename = "no-seq")]
    NoSeq,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoStruId,
        Variant::NoReg,
        Variant::NoCat,
        Variant::NoRegCat,
        Variant::NoPref,
        Variant::NoSeq,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStruId => "no-struid",
            Variant::NoReg => "no-reg",
            Variant::NoCat => "no-cat",
            Variant::NoRegCat => "no-regcat",
            Variant::NoPref => "no-pref",
            Variant::NoSeq => "no-seq",
        }
    }

    /// Human-readable label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStruId => "w/o StruID",
            Variant::NoReg => "w/o Reg",
            Variant::NoCat => "w/o Cat",
            Variant::NoRegCat => "w/o RegCat",
            Variant::NoPref => "w/o Pref",
            Variant::NoSeq => "w/o Seq",
        }
    }

    pub fn tasks(self) -> Vec<Task> {
        match self {
            Variant::NoReg => vec![Task::Poi, Task::Category],
            Variant::NoCat => vec![Task::Poi, Task::Region],
            Variant::NoRegCat => vec![Task::Poi],
            _ => Task::ALL.to_vec(),
        }
    }

    pub fn layout(self) -> Layout {
        Layout {
            preference: self != Variant::NoPref,
            history: self != Variant::NoSeq,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s || v.label() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
                Error::config(format!("unknown variant {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// Which optional prompt segments are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub preference: bool,
    pub history: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        assert_eq!(index.len(), tokens.len(), "duplicate vocabulary token");
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a token that must exist.
    pub fn expect(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| panic!("token {token} not in vocabulary"))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn time(&self, bucket: usize) -> usize {
        self.expect(&time_token(bucket))
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| Error::data(format!("vocabulary: {e}")))?;
        let mut tokens = vec![None; map.len()];
        for (t, i) in map {
            let slot = tokens.get_mut(i).ok_or_else(|| Error::data("vocabulary ids are not dense"))?;
            *slot = Some(t);
        }
        let tokens = tokens
            .into_iter()
            .collect::<Option<Vec<String>>>()
            .ok_or_else(|| Error::data("vocabulary ids are not dense"))?;
        Ok(Vocabulary::new(tokens))
    }
}

/// Token sequence of every entity, per type in entity order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTokens {
    pub tokens: [Vec<Vec<usize>>; 4],
}

impl EntityTokens {
    pub fn of(&self, ty: EntityType, index: usize) -> &[usize] {
        &self.tokens[ty.index()][index]
    }

    pub fn count(&self, ty: EntityType) -> usize {
        self.tokens[ty.index()].len()
    }

    /// Longest id of any type.
    pub fn max_len(&self) -> usize {
        self.tokens.iter().flatten().map(Vec::len).max().unwrap_or(0)
    }

    /// Maps token sequences back to entity indices, per type.
    pub fn reverse(&self) -> [HashMap<Vec<usize>, usize>; 4] {
        EntityType::ALL.map(|ty| {
            self.tokens[ty.index()]
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect()
        })
    }
}

fn base_tokens() -> Vec<String> {
    let mut v: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    v.extend((0..TIME_BUCKETS).map(time_token));
    v
}

/// Vocabulary with one token per (type, level, code index) and per-type
/// disambiguator tokens, and the tokens of every entity's StruId.
pub fn struid_vocabulary(table: &StruIdTable, sizes: &CodebookSizes) -> (Vocabulary, EntityTokens) {
    let mut tokens = base_tokens();
    for ty in EntityType::ALL {
        for l in 0..table.levels {
            for k in 0..sizes.get(ty) {
                tokens.push(format!("<{}{}_{}>", type_prefix(ty), l, k));
            }
        }
        for d in 0..table.max_disambiguator(ty) {
            tokens.push(format!("<{}_d{}>", type_prefix(ty), d));
        }
    }
    let vocab = Vocabulary::new(tokens);
    let ent = EntityType::ALL.map(|ty| {
        table
            .get(ty)
            .iter()
            .map(|sid| {
                let mut t: Vec<usize> = sid
                    .indices
                    .iter()
                    .enumerate()
                    .map(|(l, k)| vocab.expect(&format!("<{}{}_{}>", type_prefix(ty), l, k)))
                    .collect();
                if let Some(d) = sid.disambiguator {
                    t.push(vocab.expect(&format!("<{}_d{}>", type_prefix(ty), d)));
                }
                t
            })
            .collect()
    });
    (vocab, EntityTokens { tokens: ent })
}

/// Vocabulary where each entity is one token, numbered by a seeded random
/// permutation within its type.
pub fn random_id_vocabulary(counts: [usize; 4], seed: u64) -> (Vocabulary, EntityTokens) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = base_tokens();
    let mut ent: [Vec<Vec<usize>>; 4] = Default::default();
    for ty in EntityType::ALL {
        let n = counts[ty.index()];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let start = tokens.len();
        tokens.extend((0..n).map(|k| format!("<{}_e{}>", type_prefix(ty), k)));
        ent[ty.index()] = perm.iter().map(|&k| vec![start + k]).collect();
    }
    (Vocabulary::new(tokens), EntityTokens { tokens: ent })
}

/// Up to five most visited POIs, ties broken by ascending POI index.
pub fn top5_preference(train: &[Visit]) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in train {
        *counts.entry(v.poi).or_default() += 1;
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(PREFERENCE_SIZE).map(|(p, _)| p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub task: Task,
    pub user: usize,
    pub split: SplitPart,
    /// Index of the target in the user's full chronological sequence.
    pub position: usize,
    /// Target entity index (POI, category or region per task).
    pub target: usize,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
}

/// Category and region of each POI.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoiMeta {
    pub category: Vec<usize>,
    pub region: Vec<usize>,
}

impl PoiMeta {
    pub fn from_catalog(c: &Catalog) -> Self {
        PoiMeta {
            category: c.pois.iter().map(|p| p.category).collect(),
            region: c.pois.iter().map(|p| p.region).collect(),
        }
    }

    fn target(&self, task: Task, poi: usize) -> usize {
        match task {
            Task::Poi => poi,
            Task::Category => self.category[poi],
            Task::Region => self.region[poi],
        }
    }
}

/// Fixed markers of the layout (BOS, task, USER, PREF, SEP, HIST, TIME,
/// time bucket, TARGET) plus EOS.
pub const FIXED_TOKENS: usize = 10;

/// Longest possible example (input plus target) for ids of at most
/// `id_len` tokens.
pub fn max_sequence_len(id_len: usize, window: usize) -> usize {
    FIXED_TOKENS + id_len + PREFERENCE_SIZE * 3 * id_len + window * (1 + 3 * id_len) + id_len
}

pub struct ExampleBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub tokens: &'a EntityTokens,
    pub meta: &'a PoiMeta,
    pub window: usize,
    pub layout: Layout,
    /// Bound checked for every example.
    pub max_len: usize,
}

impl ExampleBuilder<'_> {
    fn push_entity(&self, out: &mut Vec<usize>, ty: EntityType, i: usize) {
        out.extend_from_slice(self.tokens.of(ty, i));
    }

    fn push_poi_context(&self, out: &mut Vec<usize>, task: Task, poi: usize) {
        match task {
            Task::Poi => {
                self.push_entity(out, EntityType::Category, self.meta.category[poi]);
                self.push_entity(out, EntityType::Region, self.meta.region[poi]);
                self.push_entity(out, EntityType::Poi, poi);
            }
            Task::Category => self.push_entity(out, EntityType::Category, self.meta.category[poi]),
            Task::Region => self.push_entity(out, EntityType::Region, self.meta.region[poi]),
        }
    }

    /// Input tokens for predicting `seq[k]` from `seq[..k]`.
    pub fn input(&self, task: Task, user: usize, pref: &[usize], seq: &[Visit], k: usize) -> Vec<usize> {
        let v = self.vocab;
        let mut out = vec![v.expect(BOS), v.expect(task.marker()), v.expect(USER)];
        self.push_entity(&mut out, EntityType::User, user);
        if self.layout.preference {
            out.push(v.expect(PREF));
            for &p in pref {
                self.push_poi_context(&mut out, Task::Poi, p);
            }
        }
        out.push(v.expect(SEP));
        if self.layout.history {
            out.push(v.expect(HIST));
            for e in &seq[k.saturating_sub(self.window)..k] {
                out.push(v.time(time_bucket(e.ts)));
                self.push_poi_context(&mut out, task, e.poi);
            }
        }
        out.push(v.expect(TIME));
        out.push(v.time(time_bucket(seq[k].ts)));
        out.push(v.expect(TARGET));
        out
    }

    pub fn target(&self, task: Task, poi: usize) -> Vec<usize> {
        let mut out = self.tokens.of(task.target_type(), self.meta.target(task, poi)).to_vec();
        out.push(self.vocab.expect(EOS));
        out
    }

    /// Examples for every target position with non-empty history, ordered
    /// by (user, position).
    pub fn build(&self, split: &DatasetSplit, task: Task) -> Vec<TokenSequence> {
        let mut out = Vec::new();
        for user in 0..split.num_users() {
            let pref = top5_preference(&split.train[user]);
            let seq = split.full_sequence(user);
            let (n_train, n_valid) = (split.train[user].len(), split.valid[user].len());
            for k in 1..seq.len() {
                let part = if k < n_train {
                    SplitPart::Train
                } else if k < n_train + n_valid {
                    SplitPart::Valid
                } else {
                    SplitPart::Test
                };
                let input_ids = self.input(task, user, &pref, &seq, k);
                let target_ids = self.target(task, seq[k].poi);
                assert!(
                    input_ids.len() + target_ids.len() <= self.max_len,
                    "example of {} tokens exceeds bound {}",
                    input_ids.len() + target_ids.len(),
                    self.max_len
                );
                out.push(TokenSequence {
                    task,
                    user,
                    split: part,
                    position: k,
                    target: self.meta.target(task, seq[k].poi),
                    input_ids,
                    target_ids,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub variant: Variant,
    pub window: usize,
    pub vocab: Vocabulary,
    pub entity_tokens: EntityTokens,
    /// Ordered by (user, position, task).
    pub examples: Vec<TokenSequence>,
    pub max_len: usize,
}

/// Identifier scheme of a corpus: learned StruIds or random single tokens.
pub enum Ids<'a> {
    StruId(&'a StruIdTable, &'a CodebookSizes),
    Random { counts: [usize; 4], seed: u64 },
}

pub fn build_corpus(split: &DatasetSplit, meta: &PoiMeta, ids: Ids<'_>, variant: Variant, window: usize) -> Result<Corpus> {
    if window == 0 {
        return Err(Error::config("corpus window must be at least 1"));
    }
    let (vocab, entity_tokens, id_len) = match (variant, ids) {
        (Variant::NoStruId, Ids::StruId(table, _)) => {
            let counts = EntityType::ALL.map(|t| table.get(t).len());
            let (v, e) = random_id_vocabulary(counts, 0);
            (v, e, 1)
        }
        (_, Ids::StruId(table, sizes)) => {
            let (v, e) = struid_vocabulary(table, sizes);
            (v, e, table.levels + 1)
        }
        (_, Ids::Random { counts, seed }) => {
            let (v, e) = random_id_vocabulary(counts, seed);
            (v, e, 1)
        }
    };
    let max_len = max_sequence_len(id_len, window);
    let builder = ExampleBuilder {
        vocab: &vocab,
        tokens: &entity_tokens,
        meta,
        window,
        layout: variant.layout(),
        max_len,
    };
    let mut examples: Vec<TokenSequence> = variant.tasks().into_iter().flat_map(|t| builder.build(split, t)).collect();
    examples.sort_by_key(|e| (e.user, e.position, e.task));
    Ok(Corpus {
        variant,
        window,
        vocab,
        entity_tokens,
        examples,
        max_len,
    })
}

/// One history entry recovered from a prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedEvent {
    pub time_bucket: usize,
    /// Entities in prompt order: (category, region, POI) for the POI task,
    /// the single id stream otherwise.
    pub entities: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedExample {
    pub task: Task,
    pub user: usize,
    pub preference: Vec<usize>,
    pub history: Vec<DecodedEvent>,
    pub target_time: usize,
    pub target: usize,
}

struct Reader<'a> {
    ids: &'a [usize],
    pos: usize,
    vocab: &'a Vocabulary,
    tokens: &'a EntityTokens,
    reverse: &'a [HashMap<Vec<usize>, usize>; 4],
}

impl Reader<'_> {
    fn fail(&self, what: &str) -> Error {
        Error::data(format!("cannot decode prompt at token {}: expected {what}", self.pos))
    }

    fn peek(&self) -> Option<&str> {
        self.ids.get(self.pos).map(|&i| self.vocab.token(i))
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.fail(tok))
        }
    }

    fn time(&mut self) -> Result<usize> {
        let tok = self.peek().ok_or_else(|| self.fail("time bucket"))?;
        let b = (0..TIME_BUCKETS).find(|&b| time_token(b) == tok).ok_or_else(|| self.fail("time bucket"))?;
        self.pos += 1;
        Ok(b)
    }

    /// Reads the shortest token run that names an entity of `ty`, extended
    /// by one token when a longer id (a disambiguated one) matches.
    fn entity(&mut self, ty: EntityType) -> Result<usize> {
        let rev = &self.reverse[ty.index()];
        let max = self.tokens.tokens[ty.index()].iter().map(Vec::len).max().unwrap_or(0);
        let mut found = None;
        for len in 1..=max {
            if self.pos + len > self.ids.len() {
                break;
            }
            if let Some(&i) = rev.get(&self.ids[self.pos..self.pos + len]) {
                found = Some((i, len));
            }
        }
        let (i, len) = found.ok_or_else(|| self.fail(ty.name()))?;
        self.pos += len;
        Ok(i)
    }
}

/// Recovers user, preference, history window, target time and target from
/// an example.
pub fn detokenize(ex: &TokenSequence, vocab: &Vocabulary, tokens: &EntityTokens, layout: Layout) -> Result<DecodedExample> {
    let reverse = tokens.reverse();
    let mut ids = ex.input_ids.clone();
    ids.extend_from_slice(&ex.target_ids);
    let mut r = Reader {
        ids: &ids,
        pos: 0,
        vocab,
        tokens,
        reverse: &reverse,
    };
    r.expect(BOS)?;
    let task = Task::ALL
        .into_iter()
        .find(|t| r.peek() == Some(t.marker()))
        .ok_or_else(|| r.fail("task marker"))?;
    r.pos += 1;
    r.expect(USER)?;
    let user = r.entity(EntityType::User)?;
    let mut preference = Vec::new();
    if layout.preference {
        r.expect(PREF)?;
        while r.peek() != Some(SEP) {
            r.entity(EntityType::Category)?;
            r.entity(EntityType::Region)?;
            preference.push(r.entity(EntityType::Poi)?);
        }
    }
    r.expect(SEP)?;
    let mut history = Vec::new();
    if layout.history {
        r.expect(HIST)?;
        while r.peek() != Some(TIME) {
            let time_bucket = r.time()?;
            let entities = match task {
                Task::Poi => vec![
                    r.entity(EntityType::Category)?,
                    r.entity(EntityType::Region)?,
                    r.entity(EntityType::Poi)?,
                ],
                Task::Category => vec![r.entity(EntityType::Category)?],
                Task::Region => vec![r.entity(EntityType::Region)?],
            };
            history.push(DecodedEvent { time_bucket, entities });
        }
    }
    r.expect(TIME)?;
    let target_time = r.time()?;
    r.expect(TARGET)?;
    let target = r.entity(task.target_type())?;
    r.expect(EOS)?;
    if r.pos != ids.len() {
        return Err(r.fail("end of sequence"));
    }
    Ok(DecodedExample {
        task,
        user,
        preference,
        history,
        target_time,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{disambiguate, StruId};

    fn visit(user: usize, poi: usize, ts: i64) -> Visit {
        Visit { user, poi, ts }
    }

    #[test]
    fn saturday_afternoon_bucket() {
        // 2024-01-06 14:00 UTC, a Saturday.
        assert_eq!(time_bucket(1_704_549_600), 24 + 14);
        // 2024-01-08 09:30 UTC, a Monday.
        assert_eq!(time_bucket(1_704_706_200), 9);
    }

    #[test]
    fn preference_orders_by_count_then_index() {
        let v = [visit(0, 2, 1), visit(0, 1, 2), visit(0, 1, 3), visit(0, 1, 4), visit(0, 2, 5)];
        assert_eq!(top5_preference(&v[..4]), vec![1, 2]);
        let seven: Vec<Visit> = (0..7).rev().map(|p| visit(0, p, 1)).collect();
        assert_eq!(top5_preference(&seven), vec![0, 1, 2, 3, 4]);
        assert!(top5_preference(&[]).is_empty());
    }

    fn tiny_table() -> (StruIdTable, CodebookSizes) {
        let sid = |i: Vec<usize>| StruId {
            indices: i,
            disambiguator: None,
        };
        let table = StruIdTable {
            levels: 2,
            ids: [
                vec![sid(vec![0, 1])],
                disambiguate(vec![vec![0, 0], vec![0, 0], vec![1, 0]]),
                vec![sid(vec![0, 0]), sid(vec![1, 0])],
                vec![sid(vec![0, 0])],
            ],
        };
        (table, CodebookSizes::uniform(2))
    }

    fn tiny_split() -> (DatasetSplit, PoiMeta) {
        let seq = vec![visit(0, 0, 100), visit(0, 1, 4000), visit(0, 2, 8000)];
        let split = DatasetSplit {
            train: vec![seq],
            valid: vec![vec![]],
            test: vec![vec![]],
        };
        let meta = PoiMeta {
            category: vec![0, 1, 1],
            region: vec![0, 0, 0],
        };
        (split, meta)
    }

    #[test]
    fn three_train_events_give_two_examples() {
        let (table, sizes) = tiny_table();
        let (split, meta) = tiny_split();
        let c = build_corpus(&split, &meta, Ids::StruId(&table, &sizes), Variant::NoRegCat, 16).unwrap();
        let targets: Vec<usize> = c.examples.iter().map(|e| e.target).collect();
        assert_eq!(targets, vec![1, 2]);
        for e in &c.examples {
            assert_eq!(c.vocab.token(*e.input_ids.last().unwrap()), TARGET);
            assert_eq!(c.vocab.token(*e.target_ids.last().unwrap()), EOS);
        }
    }

    #[test]
    fn round_trip_recovers_prompt_content() {
        let (table, sizes) = tiny_table();
        let (split, meta) = tiny_split();
        let c = build_corpus(&split, &meta, Ids::StruId(&table, &sizes), Variant::Full, 1).unwrap();
        for e in &c.examples {
            let d = detokenize(e, &c.vocab, &c.entity_tokens, Variant::Full.layout()).unwrap();
            let seq = split.full_sequence(0);
            assert_eq!(d.task, e.task);
            assert_eq!(d.user, 0);
            assert_eq!(d.target, e.target);
            assert_eq!(d.preference, vec![0, 1, 2]);
            assert_eq!(d.history.len(), 1);
            let prev = seq[e.position - 1].poi;
            let expect = match e.task {
                Task::Poi => vec![meta.category[prev], meta.region[prev], prev],
                Task::Category => vec![meta.category[prev]],
                Task::Region => vec![meta.region[prev]],
            };
            assert_eq!(d.history[0].entities, expect);
            assert_eq!(d.target_time, time_bucket(seq[e.position].ts));
        }
    }

    #[test]
    fn no_pref_has_no_pref_marker() {
        let (table, sizes) = tiny_table();
        let (split, meta) = tiny_split();
        let c = build_corpus(&split, &meta, Ids::StruId(&table, &sizes), Variant::NoPref, 4).unwrap();
        let pref = c.vocab.expect(PREF);
        assert!(c.examples.iter().all(|e| !e.input_ids.contains(&pref)));
        let hist = c.vocab.expect(HIST);
        let c = build_corpus(&split, &meta, Ids::StruId(&table, &sizes), Variant::NoSeq, 4).unwrap();
        assert!(c.examples.iter().all(|e| !e.input_ids.contains(&hist)));
    }

    #[test]
    fn random_ids_vocabulary_size() {
        let (table, sizes) = tiny_table();
        let (split, meta) = tiny_split();
        let c = build_corpus(&split, &meta, Ids::StruId(&table, &sizes), Variant::NoStruId, 4).unwrap();
        assert_eq!(c.vocab.len(), SPECIALS.len() + (1 + 3 + 2 + 1) + TIME_BUCKETS);
        assert!(c.entity_tokens.tokens.iter().flatten().all(|t| t.len() == 1));
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let (table, sizes) = tiny_table();
        let (v, _) = struid_vocabulary(&table, &sizes);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!("w/o Everything".parse::<Variant>().is_err());
        assert_eq!("w/o RegCat".parse::<Variant>().unwrap(), Variant::NoRegCat);
    }
}
