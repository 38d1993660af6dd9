//! Annotation ingestion: raw votes, majority aggregation, triplet
//! construction and content-level splits.
//!
//! Files are line-oriented, comma-separated UTF-8. Derived manifests start
//! with a `# afine-<kind> format_version=1` line; other `#` lines and blank
//! lines are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::train::{IndexedTriplet, TrainingSet};

pub const MANIFEST_VERSION: u32 = 1;

/// A single subject's judgement of a test image against its reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Worse,
    Similar,
    Better,
}

impl Vote {
    pub const ALL: [Vote; 3] = [Vote::Worse, Vote::Similar, Vote::Better];

    /// Ground-truth probability that the test image beats its reference.
    pub fn preference(self) -> f64 {
        match self {
            Vote::Worse => 0.0,
            Vote::Similar => 0.5,
            Vote::Better => 1.0,
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vote::Worse => "worse",
            Vote::Similar => "similar",
            Vote::Better => "better",
        })
    }
}

impl FromStr for Vote {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "worse" => Ok(Vote::Worse),
            "similar" => Ok(Vote::Similar),
            "better" => Ok(Vote::Better),
            other => Err(format!("unknown vote {other:?} (expected worse, similar or better)")),
        }
    }
}

/// Aggregated outcome for one (reference, test) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Vote(Vote),
    Outlier,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Vote(v) => v.fmt(f),
            Label::Outlier => f.write_str("outlier"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("outlier") {
            Ok(Label::Outlier)
        } else {
            s.parse().map(Label::Vote)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairAnnotation {
    pub reference_id: String,
    pub test_id: String,
    pub votes: Vec<Vote>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedLabel {
    pub reference_id: String,
    pub test_id: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub reference_id: String,
    pub y_id: String,
    pub z_id: String,
    pub p: f64,
}

/// Strict-majority vote; no strict majority makes the pair an outlier.
pub fn aggregate_votes(ann: &PairAnnotation) -> Result<AggregatedLabel> {
    if ann.votes.is_empty() {
        return Err(Error::data(format!(
            "pair ({}, {}) has no votes",
            ann.reference_id, ann.test_id
        )));
    }
    let mut counts = [0usize; 3];
    for v in &ann.votes {
        counts[*v as usize] += 1;
    }
    let n = ann.votes.len();
    let label = Vote::ALL
        .into_iter()
        .find(|v| 2 * counts[*v as usize] > n)
        .map_or(Label::Outlier, Label::Vote);
    Ok(AggregatedLabel {
        reference_id: ann.reference_id.clone(),
        test_id: ann.test_id.clone(),
        label,
    })
}

pub fn aggregate_all(anns: &[PairAnnotation]) -> Result<Vec<AggregatedLabel>> {
    anns.iter().map(aggregate_votes).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub worse: usize,
    pub similar: usize,
    pub better: usize,
    pub outlier: usize,
}

impl DatasetStatistics {
    pub fn total(&self) -> usize {
        self.worse + self.similar + self.better + self.outlier
    }

    fn fraction(&self, n: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => n as f64 / t as f64,
        }
    }

    /// Fractions of the total, in the order worse, similar, better, outlier.
    pub fn fractions(&self) -> [f64; 4] {
        [
            self.fraction(self.worse),
            self.fraction(self.similar),
            self.fraction(self.better),
            self.fraction(self.outlier),
        ]
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.fraction(self.outlier)
    }
}

pub fn dataset_statistics(labels: &[AggregatedLabel]) -> DatasetStatistics {
    let mut s = DatasetStatistics::default();
    for l in labels {
        match l.label {
            Label::Vote(Vote::Worse) => s.worse += 1,
            Label::Vote(Vote::Similar) => s.similar += 1,
            Label::Vote(Vote::Better) => s.better += 1,
            Label::Outlier => s.outlier += 1,
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletMode {
    /// The reference competes against its own test image.
    RefAsTest,
    /// Two test images of the same reference compete.
    CrossTest,
    /// Union of both.
    Both,
}

impl FromStr for TripletMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ref-as-test" => Ok(TripletMode::RefAsTest),
            "cross-test" => Ok(TripletMode::CrossTest),
            "both" => Ok(TripletMode::Both),
            other => Err(format!("unknown triplet mode {other:?}")),
        }
    }
}

fn rank(v: Vote) -> f64 {
    match v {
        Vote::Worse => 0.0,
        Vote::Similar => 1.0,
        Vote::Better => 2.0,
    }
}

/// Builds training triplets from outlier-free labels.
///
/// Ref-as-test emits `(r, t, r, p)`; cross-test pairs every two test images of
/// a reference (ids ascending), with `p = 0.5` for equal labels.
pub fn build_triplets(labels: &[AggregatedLabel], mode: TripletMode) -> Result<Vec<Triplet>> {
    let mut by_ref: BTreeMap<&str, Vec<(&str, Vote)>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for l in labels {
        let Label::Vote(v) = l.label else {
            return Err(Error::data(format!(
                "label ({}, {}) is an outlier; remove outliers before building triplets",
                l.reference_id, l.test_id
            )));
        };
        if l.reference_id == l.test_id {
            return Err(Error::data(format!("label compares {} with itself", l.test_id)));
        }
        if !seen.insert((l.reference_id.as_str(), l.test_id.as_str())) {
            return Err(Error::data(format!("duplicate label ({}, {})", l.reference_id, l.test_id)));
        }
        by_ref.entry(&l.reference_id).or_default().push((&l.test_id, v));
    }
    let mut out = Vec::new();
    if matches!(mode, TripletMode::RefAsTest | TripletMode::Both) {
        for l in labels {
            if let Label::Vote(v) = l.label {
                out.push(Triplet {
                    reference_id: l.reference_id.clone(),
                    y_id: l.test_id.clone(),
                    z_id: l.reference_id.clone(),
                    p: v.preference(),
                });
            }
        }
    }
    if matches!(mode, TripletMode::CrossTest | TripletMode::Both) {
        for (r, tests) in &mut by_ref {
            tests.sort();
            for (i, (y, vy)) in tests.iter().enumerate() {
                for (z, vz) in &tests[i + 1..] {
                    out.push(Triplet {
                        reference_id: (*r).to_owned(),
                        y_id: (*y).to_owned(),
                        z_id: (*z).to_owned(),
                        p: crate::train::ranking_label(rank(*vy), rank(*vz)),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Mean opinion score of one distorted image of a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub reference_id: String,
    pub image_id: String,
    pub mos: f64,
}

/// Triplets from every pair of images sharing a reference, ids ascending,
/// labelled by raw MOS comparison (higher MOS is better).
pub fn mos_triplets(records: &[MosRecord]) -> Result<Vec<Triplet>> {
    let mut by_ref: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for r in records {
        if !r.mos.is_finite() {
            return Err(Error::data(format!("non-finite MOS for {}", r.image_id)));
        }
        by_ref.entry(&r.reference_id).or_default().push((&r.image_id, r.mos));
    }
    let mut out = Vec::new();
    for (r, mut items) in by_ref {
        items.sort_by(|a, b| a.0.cmp(b.0));
        for w in 1..items.len() {
            if items[w].0 == items[w - 1].0 {
                return Err(Error::data(format!("image {} listed twice under {r}", items[w].0)));
            }
        }
        for (i, (y, qy)) in items.iter().enumerate() {
            for (z, qz) in &items[i + 1..] {
                out.push(Triplet {
                    reference_id: r.to_owned(),
                    y_id: (*y).to_owned(),
                    z_id: (*z).to_owned(),
                    p: crate::train::ranking_label(*qy, *qz),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded content-level partition. Sizes follow the ratios by largest
/// remainder, each split receiving at least one content. The result depends
/// only on the set of ids, the ratios and the seed.
pub fn split_dataset(contents: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::config("split ratios must be positive"));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must sum to 1"));
    }
    let mut ids = contents.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::data("content list contains duplicates"));
    }
    let n = ids.len();
    if n < 3 {
        return Err(Error::data(format!("{n} contents cannot fill three splits")));
    }
    let sizes = split_sizes(n, r);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = ids.into_iter();
    let mut take = |k: usize| -> Vec<String> {
        let mut v: Vec<String> = rest.by_ref().take(k).collect();
        v.sort();
        v
    };
    Ok(Split {
        train: take(sizes[0]),
        val: take(sizes[1]),
        test: take(sizes[2]),
    })
}

fn split_sizes(n: usize, r: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for i in 0..3 {
        // guard against 7.000000001 style rounding
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        while sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("three splits");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Parses a ratio string such as `7:1:2`.
pub fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("invalid ratios {s:?}")))?;
    if parts.len() != 3 || parts.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::config(format!("ratios must be three positive numbers, got {s:?}")));
    }
    let total: f64 = parts.iter().sum();
    Ok((parts[0] / total, parts[1] / total, parts[2] / total))
}

// ---- files ------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Error::write_file(path, text)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn header_line(kind: &str) -> String {
    format!("# afine-{kind} format_version={MANIFEST_VERSION}")
}

/// Data rows of a manifest as `(line number, fields)`, after checking the header.
fn manifest_rows(path: &Path, text: &str, kind: &str, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (n, first) = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or_else(|| parse_err(path, 1, format!("empty file; expected header `{}`", header_line(kind))))?;
    let prefix = format!("# afine-{kind} format_version=");
    let version = first
        .strip_prefix(&prefix)
        .ok_or_else(|| parse_err(path, n, format!("expected header `{}`", header_line(kind))))?;
    if version.trim() != MANIFEST_VERSION.to_string() {
        return Err(parse_err(path, n, format!("unsupported format_version {}", version.trim())));
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<String> = line.split(',').map(|p| p.trim().to_owned()).collect();
        if parts.len() != fields {
            return Err(parse_err(path, n, format!("expected {fields} fields, found {}", parts.len())));
        }
        if parts.iter().any(String::is_empty) {
            return Err(parse_err(path, n, "empty field"));
        }
        rows.push((n, parts));
    }
    Ok(rows)
}

/// Reads a raw vote file (`reference_path,test_path,vote,subject_id` per
/// line), grouping votes by pair in order of first appearance.
pub fn read_votes(path: impl AsRef<Path>) -> Result<Vec<PairAnnotation>> {
    let path = path.as_ref();
    parse_votes(path, &read_text(path)?)
}

pub fn parse_votes(path: &Path, text: &str) -> Result<Vec<PairAnnotation>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut votes: HashMap<(String, String), Vec<Vote>> = HashMap::new();
    let mut subjects: HashSet<(String, String, String)> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.starts_with("# afine-") {
            return Err(Error::data(format!(
                "{}:{n}: file is an aggregated manifest, not raw votes",
                path.display()
            )));
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(parse_err(path, n, format!("expected 4 fields, found {}", parts.len())));
        }
        if n == 1 && parts[2].eq_ignore_ascii_case("vote") {
            continue; // column header
        }
        if parts.iter().any(|p| p.is_empty()) {
            return Err(parse_err(path, n, "empty field"));
        }
        let vote: Vote = parts[2].parse().map_err(|m: String| parse_err(path, n, m))?;
        let key = (parts[0].to_owned(), parts[1].to_owned());
        if !subjects.insert((key.0.clone(), key.1.clone(), parts[3].to_owned())) {
            return Err(parse_err(
                path,
                n,
                format!("subject {} voted twice on ({}, {})", parts[3], key.0, key.1),
            ));
        }
        let entry = votes.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(vote);
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let v = votes.remove(&k).expect("recorded key");
            PairAnnotation {
                reference_id: k.0,
                test_id: k.1,
                votes: v,
            }
        })
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[AggregatedLabel]) -> Result<()> {
    let mut s = header_line("labels");
    s.push_str("\nreference_id,test_id,label\n");
    for l in labels {
        s.push_str(&format!("{},{},{}\n", l.reference_id, l.test_id, l.label));
    }
    write_text(path.as_ref(), &s)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<AggregatedLabel>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, row) in manifest_rows(path, &text, "labels", 3)? {
        if row[2] == "label" {
            continue;
        }
        let label = row[2].parse().map_err(|m: String| parse_err(path, n, m))?;
        out.push(AggregatedLabel {
            reference_id: row[0].clone(),
            test_id: row[1].clone(),
            label,
        });
    }
    Ok(out)
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let mut s = header_line("triplets");
    s.push_str("\nreference_id,y_id,z_id,p\n");
    for t in triplets {
        s.push_str(&format!("{},{},{},{}\n", t.reference_id, t.y_id, t.z_id, t.p));
    }
    write_text(path.as_ref(), &s)
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, row) in manifest_rows(path, &text, "triplets", 4)? {
        if row[3] == "p" {
            continue;
        }
        let p: f64 = row[3]
            .parse()
            .map_err(|_| parse_err(path, n, format!("invalid probability {:?}", row[3])))?;
        if ![0.0, 0.5, 1.0].contains(&p) {
            return Err(parse_err(path, n, format!("probability {p} is not 0, 0.5 or 1")));
        }
        if row[1] == row[2] {
            return Err(parse_err(path, n, "y and z are the same image"));
        }
        out.push(Triplet {
            reference_id: row[0].clone(),
            y_id: row[1].clone(),
            z_id: row[2].clone(),
            p,
        });
    }
    Ok(out)
}

/// Reads `reference_id,image_id,mos` records (header `# afine-mos format_version=1`).
pub fn read_mos(path: impl AsRef<Path>) -> Result<Vec<MosRecord>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, row) in manifest_rows(path, &text, "mos", 3)? {
        if row[2] == "mos" {
            continue;
        }
        let mos = row[2]
            .parse()
            .map_err(|_| parse_err(path, n, format!("invalid MOS {:?}", row[2])))?;
        out.push(MosRecord {
            reference_id: row[0].clone(),
            image_id: row[1].clone(),
            mos,
        });
    }
    Ok(out)
}

/// One id per line; blank lines and `#` comments ignored.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

pub fn write_id_list(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    write_text(path.as_ref(), &s)
}

pub fn write_statistics(path: impl AsRef<Path>, stats: &DatasetStatistics) -> Result<()> {
    let f = stats.fractions();
    let s = format!(
        "label,count,fraction\nworse,{},{}\nsimilar,{},{}\nbetter,{},{}\noutlier,{},{}\ntotal,{},1\n",
        stats.worse,
        f[0],
        stats.similar,
        f[1],
        stats.better,
        f[2],
        stats.outlier,
        f[3],
        stats.total()
    );
    write_text(path.as_ref(), &s)
}

// ---- corpus -----------------------------------------------------------------

/// Image ids are paths relative to a corpus root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub root: PathBuf,
}

impl Corpus {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Corpus { root: root.into() }
    }

    pub fn resolve(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Ids (deduplicated, in first-seen order) that do not name a file.
    pub fn missing<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut seen = HashSet::new();
        ids.into_iter()
            .filter(|id| seen.insert(*id))
            .filter(|id| !self.resolve(id).is_file())
            .map(str::to_owned)
            .collect()
    }

    /// Fails with a data error naming every unresolvable id.
    pub fn require<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing = self.missing(ids);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::data(format!(
                "{} image(s) not found under {}: {}",
                missing.len(),
                self.root.display(),
                missing.join(", ")
            )))
        }
    }

    pub fn load(&self, id: &str) -> Result<Image> {
        Image::load(self.resolve(id))
    }
}

pub fn triplet_ids(triplets: &[Triplet]) -> impl Iterator<Item = &str> {
    triplets
        .iter()
        .flat_map(|t| [t.reference_id.as_str(), t.y_id.as_str(), t.z_id.as_str()])
}

/// Decodes every image a triplet list uses and indexes the triplets.
pub fn build_training_set(triplets: &[Triplet], mut load: impl FnMut(&str) -> Result<Image>) -> Result<TrainingSet> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut images = Vec::new();
    let mut indexed = Vec::with_capacity(triplets.len());
    let mut idx = |id: &str| -> Result<usize> {
        if let Some(&i) = index.get(id) {
            return Ok(i);
        }
        images.push(load(id)?);
        index.insert(id.to_owned(), images.len() - 1);
        Ok(images.len() - 1)
    };
    for t in triplets {
        indexed.push(IndexedTriplet {
            reference: idx(&t.reference_id)?,
            y: idx(&t.y_id)?,
            z: idx(&t.z_id)?,
            p: t.p,
        });
    }
    Ok(TrainingSet {
        images,
        triplets: indexed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Vote::*;

    fn ann(votes: &[Vote]) -> PairAnnotation {
        PairAnnotation {
            reference_id: "r".into(),
            test_id: "t".into(),
            votes: votes.to_vec(),
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(aggregate_votes(&ann(&[Worse, Worse, Better])).unwrap().label, Label::Vote(Worse));
        assert_eq!(aggregate_votes(&ann(&[Worse, Similar, Better])).unwrap().label, Label::Outlier);
        assert_eq!(aggregate_votes(&ann(&[Better; 3])).unwrap().label, Label::Vote(Better));
        assert_eq!(aggregate_votes(&ann(&[Similar])).unwrap().label, Label::Vote(Similar));
        assert_eq!(aggregate_votes(&ann(&[Similar, Better])).unwrap().label, Label::Outlier);
        assert_eq!(aggregate_votes(&ann(&[Worse, Worse, Better, Better])).unwrap().label, Label::Outlier);
        assert!(matches!(aggregate_votes(&ann(&[])), Err(Error::Data(_))));
    }

    fn label(r: &str, t: &str, v: Vote) -> AggregatedLabel {
        AggregatedLabel {
            reference_id: r.into(),
            test_id: t.into(),
            label: Label::Vote(v),
        }
    }

    #[test]
    fn ref_as_test_triplet() {
        let t = build_triplets(&[label("r", "t", Better)], TripletMode::RefAsTest).unwrap();
        assert_eq!(
            t,
            vec![Triplet {
                reference_id: "r".into(),
                y_id: "t".into(),
                z_id: "r".into(),
                p: 1.0
            }]
        );
    }

    #[test]
    fn cross_test_triplets() {
        let labels = [label("r", "t1", Better), label("r", "t2", Worse), label("r", "t3", Worse)];
        let t = build_triplets(&labels, TripletMode::CrossTest).unwrap();
        let got: Vec<(&str, &str, f64)> = t.iter().map(|t| (t.y_id.as_str(), t.z_id.as_str(), t.p)).collect();
        assert_eq!(got, vec![("t1", "t2", 1.0), ("t1", "t3", 1.0), ("t2", "t3", 0.5)]);
        let both = build_triplets(&labels, TripletMode::Both).unwrap();
        assert_eq!(both.len(), 6);
    }

    #[test]
    fn outliers_must_be_removed_first() {
        let mut l = label("r", "t", Worse);
        l.label = Label::Outlier;
        assert!(build_triplets(&[l], TripletMode::RefAsTest).is_err());
    }

    #[test]
    fn equal_mos_gives_half() {
        let recs = [
            MosRecord { reference_id: "r".into(), image_id: "a".into(), mos: 5.1 },
            MosRecord { reference_id: "r".into(), image_id: "b".into(), mos: 5.1 },
            MosRecord { reference_id: "r".into(), image_id: "c".into(), mos: 2.0 },
        ];
        let t = mos_triplets(&recs).unwrap();
        let got: Vec<f64> = t.iter().map(|t| t.p).collect();
        assert_eq!(got, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn split_ten_contents() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let s = split_dataset(&ids, (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split_dataset(&ids, (0.7, 0.1, 0.2), 3).unwrap());
        assert!(split_dataset(&ids[..2], (0.7, 0.1, 0.2), 3).is_err());
    }

    #[test]
    fn tiny_splits_keep_every_part_non_empty() {
        let ids: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let s = split_dataset(&ids, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn ratio_strings() {
        let r = parse_ratios("7:1:2").unwrap();
        assert!((r.0 - 0.7).abs() < 1e-12 && (r.2 - 0.2).abs() < 1e-12);
        assert!(parse_ratios("7:1").is_err());
        assert!(parse_ratios("7:0:3").is_err());
    }

    #[test]
    fn statistics() {
        let mut labels: Vec<AggregatedLabel> = (0..90).map(|i| label("r", &format!("t{i}"), Worse)).collect();
        for i in 0..10 {
            let mut l = label("r", &format!("o{i}"), Worse);
            l.label = Label::Outlier;
            labels.push(l);
        }
        let s = dataset_statistics(&labels);
        assert_eq!(s.outlier_fraction(), 0.1);
        assert_eq!(dataset_statistics(&[]), DatasetStatistics::default());
        assert_eq!(DatasetStatistics::default().fractions(), [0.0; 4]);
    }

    #[test]
    fn vote_file_parsing() {
        let text = "reference_path,test_path,vote,subject_id\nr.png,a.png,worse,s1\nr.png,a.png,better,s2\nr.png,b.png,similar,s1\n";
        let anns = parse_votes(Path::new("v.csv"), text).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].votes, vec![Worse, Better]);
        let bad = "r.png,a.png,awful,s1\n";
        assert!(matches!(parse_votes(Path::new("v.csv"), bad), Err(Error::Parse { line: 1, .. })));
        let twice = "r,a,worse,s1\nr,a,better,s1\n";
        assert!(matches!(parse_votes(Path::new("v.csv"), twice), Err(Error::Parse { line: 2, .. })));
        let aggregated = "# afine-labels format_version=1\nr,a,worse\n";
        assert!(matches!(parse_votes(Path::new("v.csv"), aggregated), Err(Error::Data(_))));
    }

    #[test]
    fn manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![label("r", "a", Worse), label("r", "b", Similar)];
        let p = dir.path().join("labels.csv");
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        let t = build_triplets(&labels, TripletMode::Both).unwrap();
        let p = dir.path().join("sub/triplets.csv");
        write_triplets(&p, &t).unwrap();
        assert_eq!(read_triplets(&p).unwrap(), t);
        fs::write(&p, "# afine-triplets format_version=2\n").unwrap();
        assert!(matches!(read_triplets(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "# afine-triplets format_version=1\nr,a,b,0.3\n").unwrap();
        assert!(matches!(read_triplets(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn training_set_indexes_images_once() {
        let t = vec![
            Triplet { reference_id: "r".into(), y_id: "a".into(), z_id: "r".into(), p: 1.0 },
            Triplet { reference_id: "r".into(), y_id: "a".into(), z_id: "b".into(), p: 0.0 },
        ];
        let mut loads = 0;
        let set = build_training_set(&t, |_| {
            loads += 1;
            Image::uniform(8, 8, 0.5)
        })
        .unwrap();
        assert_eq!(loads, 3);
        assert_eq!(set.triplets[1], IndexedTriplet { reference: 0, y: 1, z: 2, p: 0.0 });
    }

    #[test]
    fn corpus_reports_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        Image::uniform(4, 4, 0.2).unwrap().save_png(dir.path().join("a.png")).unwrap();
        let c = Corpus::new(dir.path());
        assert_eq!(c.missing(["a.png", "b.png", "b.png"]), vec!["b.png".to_owned()]);
        let err = c.require(["b.png"]).unwrap_err().to_string();
        assert!(err.contains("b.png"));
    }
}
