//! Dataset manifests, genuine/imposter pairing, scoring and ROC analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::IrisTemplate;
use crate::matcher::match_shifted;

pub const MANIFEST_HEADER: [&str; 4] = ["path", "spectrum", "distance_cm", "iris_color"];
pub const REPORT_FARS: [f64; 3] = [1e-4, 1e-3, 1e-2];

macro_rules! label_enum {
    ($name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $var),+
        }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $(Self::$var => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$var),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " '{}'"), other)),
                }
            }
        }
    };
}

label_enum!(Eye { Left => "left", Right => "right" });
label_enum!(Spectrum { Vis => "vis", Nir => "nir" });
label_enum!(Distance { Cm25 => "25", Cm50 => "50", Unknown => "unknown" });
label_enum!(IrisColor { Blue => "blue", Brown => "brown", Gray => "gray", Unknown => "unknown" });
label_enum!(Protocol {
    SameSpectrum => "same-spectrum",
    CrossSpectral => "cross-spectral",
    CrossDistance => "cross-distance",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub subject_id: String,
    pub eye: Eye,
    pub spoof: String,
    pub session_id: String,
    pub trial: u32,
    pub spectrum: Spectrum,
    pub capture_distance_cm: Distance,
    pub iris_color: IrisColor,
    pub template_path: PathBuf,
}

/// The five fields carried by a capture file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemFields {
    pub subject_id: String,
    pub eye: Eye,
    pub spoof: String,
    pub session_id: String,
    pub trial: u32,
}

/// Parses `subject-eye-spoof-session-trial[.ext]`.
pub fn parse_file_name(name: &str) -> std::result::Result<StemFields, String> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| format!("no file name in '{name}'"))?;
    let stem = match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    };
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() != 5 {
        return Err(format!("expected 5 '-'-separated fields in '{stem}', found {}", parts.len()));
    }
    if let Some(i) = parts.iter().position(|p| p.is_empty()) {
        return Err(format!("field {} of '{stem}' is empty", i + 1));
    }
    let eye = parts[1].parse::<Eye>()?;
    let trial = parts[4]
        .parse::<u32>()
        .map_err(|_| format!("trial '{}' is not a non-negative integer", parts[4]))?;
    Ok(StemFields {
        subject_id: parts[0].to_string(),
        eye,
        spoof: parts[2].to_string(),
        session_id: parts[3].to_string(),
        trial,
    })
}

impl DatasetRecord {
    pub fn file_stem(&self) -> String {
        format!(
            "{}-{}-{}-{}-{}",
            self.subject_id, self.eye, self.spoof, self.session_id, self.trial
        )
    }

    pub fn is_live(&self) -> bool {
        self.spoof == "none"
    }

    fn key(&self) -> (&str, Eye, Spectrum, &str, u32) {
        (&self.subject_id, self.eye, self.spectrum, &self.session_id, self.trial)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line number in the manifest, header included.
    pub line: usize,
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<DatasetRecord>,
    pub rejects: Vec<RejectedRow>,
}

fn parse_distance(s: &str) -> std::result::Result<Distance, String> {
    match s.trim() {
        "" => Ok(Distance::Unknown),
        t => t.parse(),
    }
}

fn parse_color(s: &str) -> std::result::Result<IrisColor, String> {
    match s.trim() {
        "" => Ok(IrisColor::Unknown),
        t => t.parse(),
    }
}

/// Parses manifest text; relative paths are resolved against `base_dir`.
pub fn parse_manifest_str(text: &str, base_dir: &Path) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "header must be '{}', found '{}'",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Manifest::default();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Manifest(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let raw = row.iter().collect::<Vec<_>>().join(",");
        let parsed = (|| {
            if row.len() != 4 {
                return Err(format!("expected 4 columns, found {}", row.len()));
            }
            let f = parse_file_name(&row[0])?;
            let path = Path::new(&row[0]);
            Ok(DatasetRecord {
                subject_id: f.subject_id,
                eye: f.eye,
                spoof: f.spoof,
                session_id: f.session_id,
                trial: f.trial,
                spectrum: row[1].parse()?,
                capture_distance_cm: parse_distance(&row[2])?,
                iris_color: parse_color(&row[3])?,
                template_path: if path.is_absolute() { path.to_path_buf() } else { base_dir.join(path) },
            })
        })();
        match parsed {
            Ok(r) => {
                let key = (r.subject_id.clone(), r.eye, r.spectrum, r.session_id.clone(), r.trial);
                if seen.insert(key) {
                    out.records.push(r);
                } else {
                    out.rejects.push(RejectedRow {
                        line,
                        raw,
                        reason: "duplicate (subject, eye, spectrum, session, trial)".into(),
                    });
                }
            }
            Err(reason) => out.rejects.push(RejectedRow { line, raw, reason }),
        }
    }
    if out.records.is_empty() && out.rejects.is_empty() {
        return Err(Error::Manifest("manifest has no rows".into()));
    }
    Ok(out)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes a manifest; `path_of` gives the path column for each record.
pub fn write_manifest(w: impl Write, records: &[DatasetRecord], path_of: impl Fn(&DatasetRecord) -> String) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let werr = |e: csv::Error| Error::Manifest(e.to_string());
    wtr.write_record(MANIFEST_HEADER).map_err(werr)?;
    for r in records {
        let distance = match r.capture_distance_cm {
            Distance::Unknown => "",
            d => d.as_str(),
        };
        let color = match r.iris_color {
            IrisColor::Unknown => "",
            c => c.as_str(),
        };
        wtr.write_record([path_of(r).as_str(), r.spectrum.as_str(), distance, color])
            .map_err(werr)?;
    }
    wtr.flush().map_err(|e| Error::Manifest(e.to_string()))
}

/// A comparison between two records, by index into the record list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub enroll: usize,
    pub verify: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairSet {
    pub genuine: Vec<Pair>,
    pub imposter: Vec<Pair>,
}

/// Records of one (subject, eye) class, in capture order.
type Classes = BTreeMap<(String, Eye), Vec<usize>>;

fn classes(records: &[DatasetRecord], keep: impl Fn(&DatasetRecord) -> bool) -> Classes {
    let mut m: Classes = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.is_live() && keep(r) {
            m.entry((r.subject_id.clone(), r.eye)).or_default().push(i);
        }
    }
    for v in m.values_mut() {
        v.sort_by(|&a, &b| records[a].key().cmp(&records[b].key()));
    }
    m
}

fn pick(rng: &mut ChaCha8Rng, v: &[usize]) -> usize {
    v[rng.random_range(0..v.len() as u64) as usize]
}

/// Genuine and imposter pairs for one enrollment/verification split.
/// `first_enroll` takes the earliest capture as the genuine enrollment;
/// otherwise a random one is drawn. Imposter enrollments are always
/// drawn at random, one per class, against other subjects' same-eye
/// verification records.
fn pairs_for(
    records: &[DatasetRecord],
    enroll: &Classes,
    verify: &Classes,
    first_enroll: bool,
    rng: &mut ChaCha8Rng,
) -> PairSet {
    let mut set = PairSet::default();
    for (key, e) in enroll {
        let genuine_enroll = if first_enroll { e[0] } else { pick(rng, e) };
        if let Some(v) = verify.get(key) {
            set.genuine.extend(
                v.iter()
                    .filter(|&&j| j != genuine_enroll)
                    .map(|&j| Pair { enroll: genuine_enroll, verify: j }),
            );
        }
        let imposter_enroll = pick(rng, e);
        for ((subject, eye), v) in verify {
            if *eye == key.1 && *subject != key.0 {
                set.imposter
                    .extend(v.iter().map(|&j| Pair { enroll: imposter_enroll, verify: j }));
            }
        }
    }
    debug_assert!(set.genuine.iter().all(|p| records[p.enroll].subject_id == records[p.verify].subject_id));
    set
}

/// Builds the comparison set for `protocol`. Spoof captures are skipped;
/// imposters only compare the same eye side.
pub fn build_pairs(records: &[DatasetRecord], protocol: Protocol, seed: u64) -> Result<PairSet> {
    let subjects: BTreeSet<&str> = records.iter().filter(|r| r.is_live()).map(|r| r.subject_id.as_str()).collect();
    if subjects.len() < 2 {
        return Err(Error::Protocol(format!(
            "imposter set empty: {} live subject(s), need at least 2",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PairSet::default();
    let mut extend = |s: PairSet| {
        set.genuine.extend(s.genuine);
        set.imposter.extend(s.imposter);
    };
    match protocol {
        Protocol::SameSpectrum => {
            for spectrum in [Spectrum::Nir, Spectrum::Vis] {
                let c = classes(records, |r| r.spectrum == spectrum);
                extend(pairs_for(records, &c, &c, true, &mut rng));
            }
        }
        Protocol::CrossSpectral => {
            let nir = classes(records, |r| r.spectrum == Spectrum::Nir);
            let vis = classes(records, |r| r.spectrum == Spectrum::Vis);
            if nir.is_empty() || vis.is_empty() {
                return Err(Error::Protocol(format!(
                    "cross-spectral needs NIR and VIS records, found {} NIR and {} VIS classes",
                    nir.len(),
                    vis.len()
                )));
            }
            extend(pairs_for(records, &nir, &vis, true, &mut rng));
        }
        Protocol::CrossDistance => {
            let mut any = false;
            for spectrum in [Spectrum::Nir, Spectrum::Vis] {
                let near = classes(records, |r| r.spectrum == spectrum && r.capture_distance_cm == Distance::Cm25);
                let far = classes(records, |r| r.spectrum == spectrum && r.capture_distance_cm == Distance::Cm50);
                if !near.is_empty() && !far.is_empty() {
                    any = true;
                    extend(pairs_for(records, &near, &far, false, &mut rng));
                }
            }
            if !any {
                return Err(Error::Protocol(
                    "cross-distance needs both 25 cm and 50 cm records in one spectrum".into(),
                ));
            }
        }
    }
    if set.imposter.is_empty() {
        return Err(Error::Protocol("imposter set empty".into()));
    }
    if set.genuine.is_empty() {
        return Err(Error::Protocol("genuine set empty".into()));
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Imposter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub label: Label,
    pub pair: Pair,
    pub hd: f64,
    pub best_shift: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreException {
    pub label: Label,
    pub pair: Pair,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
    pub exceptions: Vec<ScoreException>,
}

impl ScoreSet {
    pub fn hds(&self, label: Label) -> Vec<f64> {
        self.scores.iter().filter(|s| s.label == label).map(|s| s.hd).collect()
    }
}

/// Scores every pair. Templates come from `load`, called once per record;
/// load and match failures become exceptions. Output is sorted, so it does
/// not depend on pair order.
pub fn score_pairs(
    pairs: &PairSet,
    max_shift: usize,
    mut load: impl FnMut(usize) -> Result<IrisTemplate>,
) -> ScoreSet {
    let mut cache: HashMap<usize, std::result::Result<IrisTemplate, String>> = HashMap::new();
    let mut out = ScoreSet::default();
    let labelled = pairs
        .genuine
        .iter()
        .map(|p| (Label::Genuine, *p))
        .chain(pairs.imposter.iter().map(|p| (Label::Imposter, *p)));
    for (label, pair) in labelled {
        for i in [pair.enroll, pair.verify] {
            cache.entry(i).or_insert_with(|| load(i).map_err(|e| e.to_string()));
        }
        let result = match (&cache[&pair.enroll], &cache[&pair.verify]) {
            (Ok(e), Ok(v)) => match_shifted(v, e, max_shift).map_err(|e| e.to_string()),
            (Err(e), _) => Err(format!("enrollment record {}: {e}", pair.enroll)),
            (_, Err(e)) => Err(format!("verification record {}: {e}", pair.verify)),
        };
        match result {
            Ok(m) => out.scores.push(Score {
                label,
                pair,
                hd: m.hd,
                best_shift: m.best_shift,
            }),
            Err(reason) => out.exceptions.push(ScoreException { label, pair, reason }),
        }
    }
    out.scores.sort_by_key(|a| (a.label, a.pair));
    out.exceptions.sort_by_key(|a| (a.label, a.pair));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Accept-if-`hd <= threshold` operating points, including sentinels at
/// -inf (nothing accepted) and +inf (everything accepted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn sorted_scores(v: &[f64], what: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain(format!("no {what} scores")));
    }
    if v.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain(format!("{what} scores contain NaN")));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn compute_roc(genuine: &[f64], imposter: &[f64]) -> Result<RocCurve> {
    let g = sorted_scores(genuine, "genuine")?;
    let im = sorted_scores(imposter, "imposter")?;
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut gi, mut ii) = (0, 0);
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    for t in thresholds {
        while gi < g.len() && g[gi] <= t {
            gi += 1;
        }
        while ii < im.len() && im[ii] <= t {
            ii += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: ii as f64 / im.len() as f64,
            tar: gi as f64 / g.len() as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far: 1.0,
        tar: 1.0,
    });
    Ok(RocCurve { points })
}

/// TAR at the largest threshold whose FAR does not exceed `far_target`.
pub fn tar_at_far(curve: &RocCurve, far_target: f64) -> f64 {
    curve
        .points
        .iter()
        .take_while(|p| p.far <= far_target)
        .last()
        .map_or(0.0, |p| p.tar)
}

impl RocCurve {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let werr = |e: csv::Error| Error::Manifest(e.to_string());
        wtr.write_record(["threshold", "far", "tar"]).map_err(werr)?;
        for p in &self.points {
            wtr.write_record([p.threshold.to_string(), p.far.to_string(), p.tar.to_string()])
                .map_err(werr)?;
        }
        wtr.flush().map_err(|e| Error::Manifest(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub field: String,
    pub value: String,
    pub genuine: usize,
    pub imposter: usize,
    pub tar_at_far: Vec<TarAtFar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub genuine: usize,
    pub imposter: usize,
    pub exceptions: usize,
    /// Samples that failed the quality gate; only counted as exceptions
    /// when the gate is enforced.
    pub gate_failures: usize,
    pub mean_genuine_hd: f64,
    pub mean_imposter_hd: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub splits: Vec<SplitReport>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn tar_table(curve: &RocCurve) -> Vec<TarAtFar> {
    REPORT_FARS.iter().map(|&far| TarAtFar { far, tar: tar_at_far(curve, far) }).collect()
}

type SplitField = (&'static str, fn(&DatasetRecord) -> Option<String>);

/// Summary over all scores, plus distance and color splits keyed on the
/// verification record when those columns carry known values.
pub fn report(records: &[DatasetRecord], scores: &ScoreSet, protocol: Protocol, seed: u64) -> Result<(RocCurve, EvalReport)> {
    let g = scores.hds(Label::Genuine);
    let im = scores.hds(Label::Imposter);
    let curve = compute_roc(&g, &im)?;
    let mut splits = Vec::new();
    let split_fields: [SplitField; 2] = [
        ("distance_cm", |r| (r.capture_distance_cm != Distance::Unknown).then(|| r.capture_distance_cm.to_string())),
        ("iris_color", |r| (r.iris_color != IrisColor::Unknown).then(|| r.iris_color.to_string())),
    ];
    for (field, value_of) in split_fields {
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in &scores.scores {
            if let Some(v) = value_of(&records[s.pair.verify]) {
                let e = groups.entry(v).or_default();
                match s.label {
                    Label::Genuine => e.0.push(s.hd),
                    Label::Imposter => e.1.push(s.hd),
                }
            }
        }
        for (value, (gs, is)) in groups {
            if let Ok(c) = compute_roc(&gs, &is) {
                splits.push(SplitReport {
                    field: field.into(),
                    value,
                    genuine: gs.len(),
                    imposter: is.len(),
                    tar_at_far: tar_table(&c),
                });
            }
        }
    }
    let rep = EvalReport {
        protocol,
        seed,
        genuine: g.len(),
        imposter: im.len(),
        exceptions: scores.exceptions.len(),
        gate_failures: 0,
        mean_genuine_hd: mean(&g),
        mean_imposter_hd: mean(&im),
        tar_at_far: tar_table(&curve),
        splits,
    };
    Ok((curve, rep))
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Operating points at every score and both sentinels, by direct count.
    pub fn roc(g: &[f64], im: &[f64]) -> Vec<RocPoint> {
        let mut ts: Vec<f64> = g.iter().chain(im).copied().collect();
        ts.push(f64::NEG_INFINITY);
        ts.push(f64::INFINITY);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.iter()
            .map(|&t| RocPoint {
                threshold: t,
                far: im.iter().filter(|&&s| s <= t).count() as f64 / im.len() as f64,
                tar: g.iter().filter(|&&s| s <= t).count() as f64 / g.len() as f64,
            })
            .collect()
    }

    pub fn tar_at_far(g: &[f64], im: &[f64], target: f64) -> f64 {
        roc(g, im)
            .iter()
            .filter(|p| p.far <= target)
            .map(|p| p.tar)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(subject: &str, eye: Eye, session: &str, trial: u32, spectrum: Spectrum, d: Distance) -> DatasetRecord {
        DatasetRecord {
            subject_id: subject.into(),
            eye,
            spoof: "none".into(),
            session_id: session.into(),
            trial,
            spectrum,
            capture_distance_cm: d,
            iris_color: IrisColor::Unknown,
            template_path: PathBuf::from(format!("{subject}-{eye}-none-{session}-{trial}.irt")),
        }
    }

    #[test]
    fn file_name_fields() {
        let f = parse_file_name("047-left-none-1-3.jpg").unwrap();
        assert_eq!(f.subject_id, "047");
        assert_eq!(f.eye, Eye::Left);
        assert_eq!((f.spoof.as_str(), f.session_id.as_str(), f.trial), ("none", "1", 3));
        assert!(parse_file_name("x-y.jpg").unwrap_err().contains("5"));
        assert!(parse_file_name("1-up-none-1-1.png").is_err());
        assert!(parse_file_name("1-left-none-1-x.png").is_err());
        assert!(parse_file_name("dir/1-right-print-2-0").is_ok());
    }

    #[test]
    fn manifest_rows_and_rejects() {
        let text = "path,spectrum,distance_cm,iris_color\n\
                    047-left-none-1-3.jpg,VIS,25,brown\n\
                    x-y.jpg,VIS,25,brown\n\
                    047-left-none-1-4.jpg,UV,,\n\
                    047-right-none-1-1.jpg,nir,,\n\
                    047-right-none-1-1.png,NIR,,\n";
        let m = parse_manifest_str(text, Path::new("/data")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].template_path, Path::new("/data/047-left-none-1-3.jpg"));
        assert_eq!(m.records[0].capture_distance_cm, Distance::Cm25);
        assert_eq!(m.records[1].iris_color, IrisColor::Unknown);
        let lines: Vec<usize> = m.rejects.iter().map(|r| r.line).collect();
        assert_eq!(lines, [3, 4, 6]);
        assert!(m.rejects[2].reason.contains("duplicate"));
        assert!(parse_manifest_str("a,b\n1,2\n", Path::new(".")).is_err());
        assert!(parse_manifest_str("path,spectrum,distance_cm,iris_color\n", Path::new(".")).is_err());
        assert!(parse_manifest("/nonexistent/manifest.csv").is_err());
    }

    #[test]
    fn manifest_round_trip_500() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        while records.len() < 500 {
            let r = DatasetRecord {
                subject_id: format!("{:03}", rng.random_range(0..200)),
                eye: if rng.random() { Eye::Left } else { Eye::Right },
                spoof: ["none", "print", "screen"][rng.random_range(0..3)].into(),
                session_id: rng.random_range(1..4).to_string(),
                trial: rng.random_range(0..20),
                spectrum: if rng.random() { Spectrum::Vis } else { Spectrum::Nir },
                capture_distance_cm: [Distance::Cm25, Distance::Cm50, Distance::Unknown][rng.random_range(0..3)],
                iris_color: [IrisColor::Blue, IrisColor::Brown, IrisColor::Gray, IrisColor::Unknown]
                    [rng.random_range(0..4)],
                template_path: PathBuf::new(),
            };
            if seen.insert(r.key().0.to_string() + &format!("{:?}", (r.eye, r.spectrum, &r.session_id, r.trial))) {
                records.push(r);
            }
        }
        for r in &mut records {
            r.template_path = PathBuf::from("/corpus").join(format!("{}.png", r.file_stem()));
        }
        let mut buf = Vec::new();
        write_manifest(&mut buf, &records, |r| format!("{}.png", r.file_stem())).unwrap();
        let m = parse_manifest_str(std::str::from_utf8(&buf).unwrap(), Path::new("/corpus")).unwrap();
        assert!(m.rejects.is_empty());
        assert_eq!(m.records, records);
    }

    #[test]
    fn two_by_two_same_spectrum() {
        let r = vec![
            rec("a", Eye::Left, "1", 1, Spectrum::Vis, Distance::Unknown),
            rec("a", Eye::Left, "1", 2, Spectrum::Vis, Distance::Unknown),
            rec("b", Eye::Left, "1", 2, Spectrum::Vis, Distance::Unknown),
            rec("b", Eye::Left, "1", 1, Spectrum::Vis, Distance::Unknown),
        ];
        let p = build_pairs(&r, Protocol::SameSpectrum, 7).unwrap();
        assert_eq!(p.genuine, [Pair { enroll: 0, verify: 1 }, Pair { enroll: 3, verify: 2 }]);
        assert_eq!(p.imposter.len(), 4);
        for q in &p.imposter {
            assert_ne!(r[q.enroll].subject_id, r[q.verify].subject_id);
        }
        let verified: BTreeSet<usize> = p.imposter.iter().map(|q| q.verify).collect();
        assert_eq!(verified.len(), 4);
        assert_eq!(build_pairs(&r, Protocol::SameSpectrum, 7).unwrap(), p);
    }

    #[test]
    fn protocol_preconditions() {
        let one = vec![
            rec("a", Eye::Left, "1", 1, Spectrum::Vis, Distance::Cm25),
            rec("a", Eye::Left, "1", 2, Spectrum::Vis, Distance::Cm50),
        ];
        assert!(build_pairs(&one, Protocol::SameSpectrum, 0).unwrap_err().to_string().contains("imposter set empty"));
        let vis_only = vec![
            rec("a", Eye::Left, "1", 1, Spectrum::Vis, Distance::Cm25),
            rec("b", Eye::Left, "1", 1, Spectrum::Vis, Distance::Cm25),
        ];
        assert!(build_pairs(&vis_only, Protocol::CrossSpectral, 0).is_err());
        assert!(build_pairs(&vis_only, Protocol::CrossDistance, 0).is_err());
    }

    #[test]
    fn cross_protocols() {
        let mut r = Vec::new();
        for s in ["a", "b", "c"] {
            for t in 0..2 {
                r.push(rec(s, Eye::Right, "n", t, Spectrum::Nir, Distance::Unknown));
            }
            for t in 0..3 {
                r.push(rec(s, Eye::Right, "1", t, Spectrum::Vis, Distance::Cm25));
                r.push(rec(s, Eye::Right, "2", t, Spectrum::Vis, Distance::Cm50));
            }
            r.push(rec(s, Eye::Left, "1", 9, Spectrum::Vis, Distance::Cm50));
        }
        let cs = build_pairs(&r, Protocol::CrossSpectral, 1).unwrap();
        for p in &cs.genuine {
            assert_eq!((r[p.enroll].spectrum, r[p.verify].spectrum), (Spectrum::Nir, Spectrum::Vis));
            assert_eq!(r[p.enroll].trial, 0);
        }
        // 3 classes x 6 VIS right-eye records
        assert_eq!(cs.genuine.len(), 18);
        assert_eq!(cs.imposter.len(), 3 * 2 * 6);
        assert!(cs.imposter.iter().all(|p| r[p.enroll].spectrum == Spectrum::Nir && r[p.verify].eye == Eye::Right));

        let cd = build_pairs(&r, Protocol::CrossDistance, 1).unwrap();
        let enrolls: BTreeSet<usize> = cd.genuine.iter().chain(&cd.imposter).map(|p| p.enroll).collect();
        for p in cd.genuine.iter().chain(&cd.imposter) {
            assert_eq!(r[p.enroll].capture_distance_cm, Distance::Cm25);
            assert_eq!(r[p.verify].capture_distance_cm, Distance::Cm50);
            assert!(!enrolls.contains(&p.verify));
        }
        // right eye: 3 x 3 genuine; left eye has no 25 cm enrollment
        assert_eq!(cd.genuine.len(), 9);
        assert_eq!(cd.imposter.len(), 3 * 2 * 3);
        assert_ne!(build_pairs(&r, Protocol::CrossDistance, 2).unwrap(), PairSet::default());
    }

    #[test]
    fn spoofs_are_skipped() {
        let mut r = vec![
            rec("a", Eye::Left, "1", 1, Spectrum::Vis, Distance::Unknown),
            rec("a", Eye::Left, "1", 2, Spectrum::Vis, Distance::Unknown),
            rec("b", Eye::Left, "1", 1, Spectrum::Vis, Distance::Unknown),
        ];
        r[1].spoof = "print".into();
        let p = build_pairs(&r, Protocol::SameSpectrum, 0).unwrap_err();
        assert!(p.to_string().contains("genuine set empty"));
    }

    fn tpl(bits: u64, mask: u64) -> IrisTemplate {
        IrisTemplate::from_words(1, 64, 1, vec![bits], vec![mask]).unwrap()
    }

    #[test]
    fn scoring_and_exceptions() {
        let templates = [tpl(0xF0F0, !0), tpl(0xF0F0, !0), tpl(0, 0xFF), tpl(0, 0xFF00)];
        let pairs = PairSet {
            genuine: vec![Pair { enroll: 0, verify: 1 }, Pair { enroll: 2, verify: 3 }],
            imposter: vec![Pair { enroll: 0, verify: 2 }, Pair { enroll: 0, verify: 4 }],
        };
        let s = score_pairs(&pairs, 0, |i| {
            templates.get(i).cloned().ok_or_else(|| Error::Template("missing".into()))
        });
        assert_eq!(s.scores.len(), 2);
        assert_eq!((s.scores[0].label, s.scores[0].hd), (Label::Genuine, 0.0));
        assert_eq!(s.exceptions.len(), 2);
        assert!(s.exceptions[0].reason.contains("no comparable bits"));
        assert!(s.exceptions[1].reason.contains("missing"));

        let shuffled = PairSet {
            genuine: pairs.genuine.iter().rev().copied().collect(),
            imposter: pairs.imposter.iter().rev().copied().collect(),
        };
        let t = score_pairs(&shuffled, 0, |i| {
            templates.get(i).cloned().ok_or_else(|| Error::Template("missing".into()))
        });
        assert_eq!(s, t);
    }

    #[test]
    fn roc_examples() {
        let c = compute_roc(&[0.1, 0.2], &[0.4, 0.5]).unwrap();
        let at = |t: f64| c.points.iter().take_while(|p| p.threshold <= t).last().copied().unwrap();
        assert_eq!((at(0.3).tar, at(0.3).far), (1.0, 0.0));
        assert_eq!(tar_at_far(&c, 1e-4), 1.0);

        let same = compute_roc(&[0.3, 0.3], &[0.3]).unwrap();
        assert_eq!(same.points.len(), 3);
        assert_eq!((same.points[1].tar, same.points[1].far), (1.0, 1.0));

        let adversarial = compute_roc(&[0.1, 0.2], &[0.0, 0.0]).unwrap();
        assert_eq!(tar_at_far(&adversarial, 1e-4), 0.0);
        assert!(compute_roc(&[], &[0.1]).is_err());
        assert!(compute_roc(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn roc_csv_columns() {
        let mut buf = Vec::new();
        compute_roc(&[0.1], &[0.4]).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,far,tar\n-inf,0,0\n0.1,0,1\n"));
    }

    #[test]
    fn report_splits() {
        let mut r = vec![
            rec("a", Eye::Left, "1", 1, Spectrum::Vis, Distance::Cm25),
            rec("a", Eye::Left, "1", 2, Spectrum::Vis, Distance::Cm50),
            rec("b", Eye::Left, "1", 1, Spectrum::Vis, Distance::Cm25),
            rec("b", Eye::Left, "1", 2, Spectrum::Vis, Distance::Cm50),
        ];
        r[3].iris_color = IrisColor::Blue;
        r[1].iris_color = IrisColor::Blue;
        let pairs = build_pairs(&r, Protocol::SameSpectrum, 3).unwrap();
        let scores = score_pairs(&pairs, 0, |i| Ok(tpl(if i < 2 { 0 } else { !0 }, !0)));
        let (_, rep) = report(&r, &scores, Protocol::SameSpectrum, 3).unwrap();
        assert_eq!((rep.genuine, rep.imposter, rep.exceptions), (2, 4, 0));
        assert_eq!((rep.mean_genuine_hd, rep.mean_imposter_hd), (0.0, 1.0));
        assert_eq!(rep.tar_at_far.iter().map(|t| t.tar).collect::<Vec<_>>(), [1.0; 3]);
        assert!(rep.splits.iter().any(|s| s.field == "distance_cm" && s.value == "50"));
        assert!(rep.splits.iter().any(|s| s.field == "iris_color" && s.value == "blue"));
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["protocol"], "same-spectrum");
    }

    #[test]
    fn roc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            // coarse grid so ties are common
            let (ng, ni) = (rng.random_range(1..60), rng.random_range(1..200));
            let mut draw = |n: usize| (0..n).map(|_| f64::from(rng.random_range(0..40u32)) / 40.0).collect::<Vec<_>>();
            let (g, im) = (draw(ng), draw(ni));
            let c = compute_roc(&g, &im).unwrap();
            assert_eq!(c.points, oracle::roc(&g, &im));
            for far in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0] {
                assert_eq!(tar_at_far(&c, far), oracle::tar_at_far(&g, &im, far));
            }
        }
    }

    proptest! {
        #[test]
        fn roc_monotone(g in prop::collection::vec(0.0f64..1.0, 1..50), im in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let c = compute_roc(&g, &im).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
                prop_assert!(w[0].far <= w[1].far && w[0].tar <= w[1].tar);
            }
            let mut last = 0.0;
            for far in [0.0, 1e-3, 0.05, 0.2, 0.6, 1.0] {
                let t = tar_at_far(&c, far);
                prop_assert!(t >= last);
                last = t;
            }
        }
    }
}
