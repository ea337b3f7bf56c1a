//! Dataset ingestion: split files, vocabulary, encoded triples, queries and
//! the filter index over all known facts.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

/// Split file names inside a dataset directory.
pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        RawTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub h: EntityId,
    pub r: RelationId,
    pub t: EntityId,
}

impl Triple {
    pub fn new(h: EntityId, r: RelationId, t: EntityId) -> Self {
        Triple { h, r, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// `<h, r, ?>`: the anchor is the head, the tail is predicted.
    Tail,
    /// `<?, r, t>`: the anchor is the tail, the head is predicted.
    Head,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Query {
    pub anchor: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub truth: EntityId,
}

impl Query {
    /// The triple obtained by filling the open slot with `candidate`.
    pub fn complete(&self, candidate: EntityId) -> Triple {
        match self.direction {
            Direction::Tail => Triple::new(self.anchor, self.relation, candidate),
            Direction::Head => Triple::new(candidate, self.relation, self.anchor),
        }
    }

    pub fn triple(&self) -> Triple {
        self.complete(self.truth)
    }
}

/// Reads one split file. Blank lines are skipped; every other line must hold
/// exactly three tab-separated fields.
pub fn load_split(path: &Path) -> Result<Vec<RawTriple>> {
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut triples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        triples.push(parse_line(line).map_err(|found| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            found,
        })?);
    }
    Ok(triples)
}

fn parse_line(line: &str) -> std::result::Result<RawTriple, usize> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
        return Err(fields.len());
    }
    Ok(RawTriple::new(fields[0], fields[1], fields[2]))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entity_to_id: HashMap<String, EntityId>,
    id_to_entity: Vec<String>,
    relation_to_id: HashMap<String, RelationId>,
    id_to_relation: Vec<String>,
}

impl Vocabulary {
    /// Assigns ids by first appearance over the splits in the given order,
    /// heads before tails inside a triple.
    pub fn build(splits: &[&[RawTriple]]) -> Self {
        let mut vocab = Vocabulary::default();
        for split in splits {
            for raw in split.iter() {
                vocab.intern_entity(&raw.head);
                vocab.intern_relation(&raw.relation);
                vocab.intern_entity(&raw.tail);
            }
        }
        vocab
    }

    fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_to_id.get(name) {
            return id;
        }
        let id = self.id_to_entity.len();
        self.entity_to_id.insert(name.to_owned(), id);
        self.id_to_entity.push(name.to_owned());
        id
    }

    fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_to_id.get(name) {
            return id;
        }
        let id = self.id_to_relation.len();
        self.relation_to_id.insert(name.to_owned(), id);
        self.id_to_relation.push(name.to_owned());
        id
    }

    pub fn num_entities(&self) -> usize {
        self.id_to_entity.len()
    }

    pub fn num_relations(&self) -> usize {
        self.id_to_relation.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_to_id.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_to_id.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.id_to_entity.get(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.id_to_relation.get(id).map(String::as_str)
    }

    pub fn entities(&self) -> &[String] {
        &self.id_to_entity
    }

    pub fn relations(&self) -> &[String] {
        &self.id_to_relation
    }

    pub fn encode(&self, raw: &[RawTriple]) -> Result<Vec<Triple>> {
        raw.iter()
            .map(|x| {
                let h = self
                    .entity_id(&x.head)
                    .ok_or_else(|| Error::UnknownToken(x.head.clone()))?;
                let r = self
                    .relation_id(&x.relation)
                    .ok_or_else(|| Error::UnknownToken(x.relation.clone()))?;
                let t = self
                    .entity_id(&x.tail)
                    .ok_or_else(|| Error::UnknownToken(x.tail.clone()))?;
                Ok(Triple::new(h, r, t))
            })
            .collect()
    }

    pub fn decode(&self, triples: &[Triple]) -> Result<Vec<RawTriple>> {
        triples
            .iter()
            .map(|x| {
                let name = |v: Option<&str>, what: &str, id: usize| {
                    v.map(str::to_owned)
                        .ok_or_else(|| Error::UnknownToken(format!("{what} id {id}")))
                };
                Ok(RawTriple {
                    head: name(self.entity_name(x.h), "entity", x.h)?,
                    relation: name(self.relation_name(x.r), "relation", x.r)?,
                    tail: name(self.entity_name(x.t), "entity", x.t)?,
                })
            })
            .collect()
    }

    /// Writes `entities.txt` and `relations.txt` into `dir`, one token per
    /// line with the line number as id.
    pub fn write_dump(&self, dir: &Path) -> Result<()> {
        write_tokens(&dir.join(ENTITY_DUMP), &self.id_to_entity)?;
        write_tokens(&dir.join(RELATION_DUMP), &self.id_to_relation)
    }

    pub fn read_dump(dir: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for name in read_tokens(&dir.join(ENTITY_DUMP))? {
            vocab.intern_entity(&name);
        }
        for name in read_tokens(&dir.join(RELATION_DUMP))? {
            vocab.intern_relation(&name);
        }
        Ok(vocab)
    }
}

pub const ENTITY_DUMP: &str = "entities.txt";
pub const RELATION_DUMP: &str = "relations.txt";

fn write_tokens(path: &Path, tokens: &[String]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for token in tokens {
        writeln!(out, "{token}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn read_tokens(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Expands each triple into a tail query followed by a head query.
pub fn expand_queries(triples: &[Triple]) -> Vec<Query> {
    let mut queries = Vec::with_capacity(2 * triples.len());
    for x in triples {
        queries.push(Query {
            anchor: x.h,
            relation: x.r,
            direction: Direction::Tail,
            truth: x.t,
        });
        queries.push(Query {
            anchor: x.t,
            relation: x.r,
            direction: Direction::Head,
            truth: x.h,
        });
    }
    queries
}

/// Set of every known true triple, with a per-(anchor, relation, direction)
/// answer index for candidate construction.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    triples: HashSet<Triple>,
    answers: HashMap<(EntityId, RelationId, Direction), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn build(splits: &[&[Triple]]) -> Self {
        let mut triples = HashSet::new();
        for split in splits {
            triples.extend(split.iter().copied());
        }
        let mut answers: HashMap<_, Vec<EntityId>> = HashMap::new();
        for x in &triples {
            answers
                .entry((x.h, x.r, Direction::Tail))
                .or_default()
                .push(x.t);
            answers
                .entry((x.t, x.r, Direction::Head))
                .or_default()
                .push(x.h);
        }
        for list in answers.values_mut() {
            list.sort_unstable();
        }
        FilterIndex { triples, answers }
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.triples.contains(triple)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Entities that complete the query's open slot into a known triple,
    /// sorted ascending.
    pub fn known_answers(&self, query: &Query) -> &[EntityId] {
        self.answers
            .get(&(query.anchor, query.relation, query.direction))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub filter: FilterIndex,
}

impl Dataset {
    pub fn from_raw(train: &[RawTriple], valid: &[RawTriple], test: &[RawTriple]) -> Result<Self> {
        let vocabulary = Vocabulary::build(&[train, valid, test]);
        let train = vocabulary.encode(train)?;
        let valid = vocabulary.encode(valid)?;
        let test = vocabulary.encode(test)?;
        let filter = FilterIndex::build(&[&train, &valid, &test]);
        Ok(Dataset {
            vocabulary,
            train,
            valid,
            test,
            filter,
        })
    }

    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let paths = split_paths(dir);
        for path in &paths {
            if !path.is_file() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
        let train = load_split(&paths[0])?;
        let valid = load_split(&paths[1])?;
        let test = load_split(&paths[2])?;
        Dataset::from_raw(&train, &valid, &test)
    }

    pub fn num_entities(&self) -> usize {
        self.vocabulary.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocabulary.num_relations()
    }

    pub fn split(&self, name: &str) -> Result<&[Triple]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::UnknownSplit(other.to_owned())),
        }
    }
}

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    SPLIT_FILES.map(|name| dir.join(name))
}
