//! Two-alternative forced choice (2AFC) evaluation of any metric against
//! human pairwise preferences.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{psnr, ssim_global};
use crate::error::{Error, Result};
use crate::model::{image_features, score_features, ModelParameters};
use crate::raster::Image;
use crate::train::{IndexedPair, ValidationSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Y,
    Z,
    Tie,
}

impl FromStr for Preference {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "y" => Ok(Preference::Y),
            "z" => Ok(Preference::Z),
            "tie" => Ok(Preference::Tie),
            other => Err(format!("unknown preference {other:?} (expected y, z or tie)")),
        }
    }
}

impl std::fmt::Display for Preference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preference::Y => "y",
            Preference::Z => "z",
            Preference::Tie => "tie",
        })
    }
}

impl Preference {
    pub fn flipped(self) -> Self {
        match self {
            Preference::Y => Preference::Z,
            Preference::Z => Preference::Y,
            Preference::Tie => Preference::Tie,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub reference_id: String,
    pub y_id: String,
    pub z_id: String,
    pub human_preference: Preference,
    pub subset_tag: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

/// A full-reference quality measure.
pub trait Metric: Sync {
    fn name(&self) -> &str;

    fn orientation(&self) -> Orientation;

    fn score(&self, reference: &Image, test: &Image) -> Result<f64>;

    /// Scores of `y` and `z` against the same reference.
    fn score_both(&self, reference: &Image, y: &Image, z: &Image) -> Result<(f64, f64)> {
        Ok((self.score(reference, y)?, self.score(reference, z)?))
    }
}

pub struct AfineMetric {
    pub params: ModelParameters,
}

impl Metric for AfineMetric {
    fn name(&self) -> &str {
        "afine"
    }

    fn orientation(&self) -> Orientation {
        Orientation::LowerIsBetter
    }

    fn score(&self, reference: &Image, test: &Image) -> Result<f64> {
        crate::model::afine_score(reference, test, &self.params)
    }

    fn score_both(&self, reference: &Image, y: &Image, z: &Image) -> Result<(f64, f64)> {
        let fx = image_features(reference, &self.params)?;
        let fy = image_features(y, &self.params)?;
        let fz = image_features(z, &self.params)?;
        Ok((
            score_features(&fx, &fy, &self.params)?.score,
            score_features(&fx, &fz, &self.params)?.score,
        ))
    }
}

pub struct PsnrMetric;

impl Metric for PsnrMetric {
    fn name(&self) -> &str {
        "psnr"
    }

    fn orientation(&self) -> Orientation {
        Orientation::HigherIsBetter
    }

    fn score(&self, reference: &Image, test: &Image) -> Result<f64> {
        psnr(reference, test)
    }
}

pub struct SsimMetric;

impl Metric for SsimMetric {
    fn name(&self) -> &str {
        "ssim"
    }

    fn orientation(&self) -> Orientation {
        Orientation::HigherIsBetter
    }

    fn score(&self, reference: &Image, test: &Image) -> Result<f64> {
        ssim_global(reference, test)
    }
}

/// Outcome of judging one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Judgement {
    /// `Y` or `Z`, never `Tie`.
    pub predicted: Preference,
    pub tie_break: bool,
    pub score_y: f64,
    pub score_z: f64,
}

/// Predicts the better of `y` and `z`. Equal scores go to the lexicographically
/// smaller id and are flagged.
pub fn judge_scores(orientation: Orientation, score_y: f64, score_z: f64, y_id: &str, z_id: &str) -> Judgement {
    let (ky, kz) = match orientation {
        Orientation::LowerIsBetter => (score_y, score_z),
        Orientation::HigherIsBetter => (-score_y, -score_z),
    };
    let (predicted, tie_break) = if ky < kz {
        (Preference::Y, false)
    } else if kz < ky {
        (Preference::Z, false)
    } else if y_id <= z_id {
        (Preference::Y, true)
    } else {
        (Preference::Z, true)
    };
    Judgement {
        predicted,
        tie_break,
        score_y,
        score_z,
    }
}

pub fn judge_pair(metric: &dyn Metric, reference: &Image, y: &Image, z: &Image, y_id: &str, z_id: &str) -> Result<Judgement> {
    let (sy, sz) = metric.score_both(reference, y, z)?;
    if sy.is_nan() || sz.is_nan() {
        return Err(Error::Numeric(format!("{} produced NaN", metric.name())));
    }
    Ok(judge_scores(metric.orientation(), sy, sz, y_id, z_id))
}

/// Per-subset tallies. `count` is the number of judged (non-tied) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: String,
    pub count: usize,
    pub correct: usize,
    /// Ground-truth ties, excluded from accuracy.
    pub ties: usize,
    /// Percentage; `None` when nothing was judged.
    pub accuracy: Option<f64>,
}

impl SubsetResult {
    fn new(subset: &str) -> Self {
        SubsetResult {
            subset: subset.to_owned(),
            count: 0,
            correct: 0,
            ties: 0,
            accuracy: None,
        }
    }

    fn finish(&mut self) {
        self.accuracy = (self.count > 0).then(|| 100.0 * self.correct as f64 / self.count as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub checkpoint: Option<String>,
    pub subsets: Vec<SubsetResult>,
    pub overall: SubsetResult,
    pub tie_breaks: usize,
    pub warnings: Vec<String>,
}

/// Fraction of tie-broken judgements above which a warning is attached.
pub const TIE_BREAK_WARNING_RATE: f64 = 0.01;

/// Builds a report from per-pair outcomes (`None` for ground-truth ties).
pub fn tally(metric: &str, pairs: &[EvalPair], judgements: &[Option<Judgement>]) -> EvalReport {
    let mut subsets: BTreeMap<&str, SubsetResult> = BTreeMap::new();
    let mut overall = SubsetResult::new("overall");
    let mut tie_breaks = 0;
    for (pair, j) in pairs.iter().zip(judgements) {
        let s = subsets
            .entry(&pair.subset_tag)
            .or_insert_with(|| SubsetResult::new(&pair.subset_tag));
        match j {
            None => {
                s.ties += 1;
                overall.ties += 1;
            }
            Some(j) => {
                let hit = usize::from(j.predicted == pair.human_preference);
                s.count += 1;
                s.correct += hit;
                overall.count += 1;
                overall.correct += hit;
                tie_breaks += usize::from(j.tie_break);
            }
        }
    }
    let mut subsets: Vec<SubsetResult> = subsets.into_values().collect();
    subsets.iter_mut().for_each(SubsetResult::finish);
    overall.finish();
    let mut warnings = Vec::new();
    if overall.count > 0 && tie_breaks == overall.count {
        warnings.push(format!(
            "degenerate metric: {metric} gave equal scores on all {tie_breaks} judged pairs; accuracy reflects tie-breaking only"
        ));
    } else if overall.count > 0 && tie_breaks as f64 > TIE_BREAK_WARNING_RATE * overall.count as f64 {
        warnings.push(format!(
            "{tie_breaks} of {} judgements ({:.1}%) were exact score ties",
            overall.count,
            100.0 * tie_breaks as f64 / overall.count as f64
        ));
    }
    EvalReport {
        metric: metric.to_owned(),
        checkpoint: None,
        subsets,
        overall,
        tie_breaks,
        warnings,
    }
}

/// Judges every non-tied pair (in parallel) and tallies the results.
/// `load` maps an image id to its decoded image.
pub fn evaluate(
    metric: &dyn Metric,
    pairs: &[EvalPair],
    load: &(dyn Fn(&str) -> Result<Image> + Sync),
) -> Result<EvalReport> {
    for p in pairs {
        if p.y_id == p.z_id {
            return Err(Error::data(format!("pair compares {} with itself", p.y_id)));
        }
    }
    let results: Vec<Result<Option<Judgement>>> = pairs
        .par_iter()
        .map(|p| {
            if p.human_preference == Preference::Tie {
                return Ok(None);
            }
            let x = load(&p.reference_id)?;
            let y = if p.y_id == p.reference_id { x.clone() } else { load(&p.y_id)? };
            let z = if p.z_id == p.reference_id { x.clone() } else { load(&p.z_id)? };
            judge_pair(metric, &x, &y, &z, &p.y_id, &p.z_id).map(Some)
        })
        .collect();
    let mut judgements = Vec::with_capacity(pairs.len());
    let mut unresolved = Vec::new();
    for (p, r) in pairs.iter().zip(results) {
        match r {
            Ok(j) => judgements.push(j),
            Err(Error::Io { .. } | Error::Image { .. }) => {
                unresolved.push(format!("({}, {}, {})", p.reference_id, p.y_id, p.z_id));
                judgements.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::data(format!(
            "could not read images for {} pair(s): {}",
            unresolved.len(),
            unresolved.join(", ")
        )));
    }
    let report = tally(metric.name(), pairs, &judgements);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

/// Keeps pairs whose subset tag is in `tags` (all pairs when `tags` is empty).
pub fn filter_subsets(pairs: &[EvalPair], tags: &[String]) -> Vec<EvalPair> {
    pairs
        .iter()
        .filter(|p| tags.is_empty() || tags.contains(&p.subset_tag))
        .cloned()
        .collect()
}

/// Decodes the images of `pairs` into a validation set for training.
pub fn validation_set(pairs: &[EvalPair], mut load: impl FnMut(&str) -> Result<Image>) -> Result<ValidationSet> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut images = Vec::new();
    let mut idx = |id: &str| -> Result<usize> {
        if let Some(&i) = index.get(id) {
            return Ok(i);
        }
        images.push(load(id)?);
        index.insert(id.to_owned(), images.len() - 1);
        Ok(images.len() - 1)
    };
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        out.push(IndexedPair {
            reference: idx(&p.reference_id)?,
            y: idx(&p.y_id)?,
            z: idx(&p.z_id)?,
            preference: match p.human_preference {
                Preference::Y => 1.0,
                Preference::Z => 0.0,
                Preference::Tie => 0.5,
            },
        });
    }
    Ok(ValidationSet { images, pairs: out })
}

// ---- files ------------------------------------------------------------------

const PAIRS_HEADER: &str = "# afine-eval-pairs format_version=1";

pub fn write_eval_pairs(path: impl AsRef<Path>, pairs: &[EvalPair]) -> Result<()> {
    let mut s = format!("{PAIRS_HEADER}\nreference_id,y_id,z_id,human_preference,subset_tag\n");
    for p in pairs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.reference_id, p.y_id, p.z_id, p.human_preference, p.subset_tag
        ));
    }
    write_file(path.as_ref(), s.as_bytes())
}

pub fn read_eval_pairs(path: impl AsRef<Path>) -> Result<Vec<EvalPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.by_ref().find(|(_, l)| !l.is_empty()) {
        Some((_, l)) if l == PAIRS_HEADER => {}
        Some((n, l)) if l.starts_with("# afine-eval-pairs") => {
            return Err(perr(n, format!("unsupported header {l:?}")));
        }
        other => {
            return Err(perr(other.map_or(1, |(n, _)| n), format!("expected header `{PAIRS_HEADER}`")));
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(perr(n, format!("expected 5 fields, found {}", f.len())));
        }
        if f[3] == "human_preference" {
            continue;
        }
        if f.iter().any(|x| x.is_empty()) {
            return Err(perr(n, "empty field".into()));
        }
        if f[1] == f[2] {
            return Err(perr(n, "y and z are the same image".into()));
        }
        out.push(EvalPair {
            reference_id: f[0].to_owned(),
            y_id: f[1].to_owned(),
            z_id: f[2].to_owned(),
            human_preference: f[3].parse().map_err(|m| perr(n, m))?,
            subset_tag: f[4].to_owned(),
        });
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    Error::write_file(path, bytes)
}

fn fmt_accuracy(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_owned(), |v| format!("{v:.4}"))
}

/// `metric,subset,count,accuracy`, one row per subset then the overall row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("metric,subset,count,accuracy\n");
    for r in report.subsets.iter().chain(std::iter::once(&report.overall)) {
        s.push_str(&format!("{},{},{},{}\n", report.metric, r.subset, r.count, fmt_accuracy(r.accuracy)));
    }
    s
}

pub fn write_report_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_file(path.as_ref(), report_csv(report).as_bytes())
}

pub fn write_report_json(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let s = serde_json::to_string_pretty(report).map_err(|e| Error::data(format!("report encoding: {e}")))?;
    write_file(path.as_ref(), s.as_bytes())
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Grouped bar chart of accuracy per subset (groups) and report (bars),
/// written as PNG. Undefined accuracies are drawn as empty slots. Grid lines
/// mark 25/50/75/100 %.
pub fn plot_reports(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if reports.is_empty() {
        return Err(Error::data("nothing to plot"));
    }
    let mut groups: Vec<String> = Vec::new();
    for r in reports {
        for s in r.subsets.iter().chain(std::iter::once(&r.overall)) {
            if !groups.contains(&s.subset) {
                groups.push(s.subset.clone());
            }
        }
    }
    let (bar, gap, margin, plot_h) = (16u32, 20u32, 30u32, 200u32);
    let group_w = bar * reports.len() as u32;
    let width = 2 * margin + groups.len() as u32 * group_w + (groups.len() as u32 - 1) * gap;
    let height = plot_h + 2 * margin;
    let mut img = ::image::RgbImage::from_pixel(width, height, ::image::Rgb([255, 255, 255]));
    let base = margin + plot_h;
    for q in 1..=4 {
        let y = base - plot_h * q / 4;
        for x in margin..width - margin {
            img.put_pixel(x, y, ::image::Rgb([220, 220, 220]));
        }
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = margin + gi as u32 * (group_w + gap);
        for (ri, r) in reports.iter().enumerate() {
            let acc = r
                .subsets
                .iter()
                .chain(std::iter::once(&r.overall))
                .find(|s| &s.subset == g)
                .and_then(|s| s.accuracy);
            let Some(acc) = acc else { continue };
            let h = ((acc.clamp(0.0, 100.0) / 100.0) * plot_h as f64).round() as u32;
            let colour = ::image::Rgb(PALETTE[ri % PALETTE.len()]);
            for x in x0 + ri as u32 * bar..x0 + (ri as u32 + 1) * bar - 2 {
                for y in base - h..base {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, base, ::image::Rgb([0, 0, 0]));
    }
    for y in margin..=base {
        img.put_pixel(margin - 1, y, ::image::Rgb([0, 0, 0]));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(y: &str, z: &str, pref: Preference, tag: &str) -> EvalPair {
        EvalPair {
            reference_id: "r".into(),
            y_id: y.into(),
            z_id: z.into(),
            human_preference: pref,
            subset_tag: tag.into(),
        }
    }

    struct Constant;
    impl Metric for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn orientation(&self) -> Orientation {
            Orientation::LowerIsBetter
        }
        fn score(&self, _: &Image, _: &Image) -> Result<f64> {
            Ok(0.25)
        }
    }

    #[test]
    fn lower_score_wins() {
        let j = judge_scores(Orientation::LowerIsBetter, -0.4, 0.3, "b", "a");
        assert_eq!((j.predicted, j.tie_break), (Preference::Y, false));
        let j = judge_scores(Orientation::HigherIsBetter, -0.4, 0.3, "a", "b");
        assert_eq!(j.predicted, Preference::Z);
        let j = judge_scores(Orientation::LowerIsBetter, 1.0, 1.0, "b", "a");
        assert_eq!((j.predicted, j.tie_break), (Preference::Z, true));
    }

    #[test]
    fn two_of_three() {
        let pairs = vec![
            pair("a", "b", Preference::Y, "s"),
            pair("a", "b", Preference::Y, "s"),
            pair("a", "b", Preference::Z, "s"),
        ];
        let j = Some(judge_scores(Orientation::LowerIsBetter, 0.0, 1.0, "a", "b"));
        let r = tally("m", &pairs, &[j, j, j]);
        assert!((r.overall.accuracy.unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn only_ties_is_undefined() {
        let pairs = vec![pair("a", "b", Preference::Tie, "s")];
        let r = tally("m", &pairs, &[None]);
        assert_eq!(r.overall.count, 0);
        assert_eq!(r.overall.ties, 1);
        assert_eq!(r.overall.accuracy, None);
        assert!(report_csv(&r).contains("NA"));
    }

    #[test]
    fn constant_metric_hits_tie_break_rate() {
        // tie-break favours the smaller id: "a" wins every pair
        let pairs = vec![
            pair("a", "b", Preference::Y, "s"),
            pair("b", "a", Preference::Y, "s"),
            pair("a", "c", Preference::Y, "s"),
            pair("c", "a", Preference::Z, "s"),
        ];
        let img = Image::uniform(4, 4, 0.5).unwrap();
        let r = evaluate(&Constant, &pairs, &|_| Ok(img.clone())).unwrap();
        assert_eq!(r.overall.accuracy, Some(75.0));
        assert_eq!(r.tie_breaks, 4);
        assert!(r.warnings[0].contains("degenerate"));
    }

    #[test]
    fn psnr_always_prefers_the_reference() {
        let x = Image::from_fn(8, 8, |(c, i, j)| ((i + j + c) % 4) as f64 / 3.0).unwrap();
        let y = Image::from_fn(8, 8, |(c, i, j)| ((i * j + c) % 5) as f64 / 4.0).unwrap();
        let j = judge_pair(&PsnrMetric, &x, &y, &x, "t", "r").unwrap();
        assert_eq!(j.predicted, Preference::Z);
    }

    #[test]
    fn csv_rows_and_json_round_trip() {
        let pairs = vec![pair("a", "b", Preference::Y, "A"), pair("a", "b", Preference::Z, "B")];
        let j = Some(judge_scores(Orientation::LowerIsBetter, 0.1, 0.7, "a", "b"));
        let mut r = tally("m", &pairs, &[j, j]);
        r.checkpoint = Some("0123".into());
        let csv = report_csv(&r);
        assert_eq!(csv.lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_report_json(&p, &r).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), r);
        let png = dir.path().join("plot.png");
        plot_reports(&[r.clone(), r], &png).unwrap();
        let bytes = fs::read(&png).unwrap();
        assert!(bytes.len() > 8 && bytes.starts_with(b"\x89PNG"));
    }

    #[test]
    fn missing_images_are_listed() {
        let pairs = vec![pair("a", "b", Preference::Y, "s")];
        let err = evaluate(&PsnrMetric, &pairs, &|id| Image::load(format!("/nonexistent/{id}.png"))).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("(r, a, b)")), "{err}");
    }

    #[test]
    fn pair_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        let pairs = vec![pair("a", "r", Preference::Z, "ref>test"), pair("a", "b", Preference::Tie, "gen")];
        write_eval_pairs(&p, &pairs).unwrap();
        assert_eq!(read_eval_pairs(&p).unwrap(), pairs);
        fs::write(&p, "r,a,b,y,s\n").unwrap();
        assert!(matches!(read_eval_pairs(&p), Err(Error::Parse { line: 1, .. })));
    }
}
