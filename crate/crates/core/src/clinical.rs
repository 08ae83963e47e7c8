//! ADAS-Cog 13 domain types, CSV ingestion and model input/target construction.
//!
//! A cohort is a list of [`SubjectRecord`]s. Each record holds up to three
//! [`AdasCogAssessment`]s (baseline, month 6, month 24). The global score of an
//! assessment is always the sum of its 13 item scores.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of ADAS-Cog 13 items.
pub const NUM_ITEMS: usize = 13;
/// Length of the clinical input vector (items at BL followed by items at M06).
pub const NUM_FEATURES: usize = 2 * NUM_ITEMS;
/// Number of regression outputs (global score followed by the 13 items).
pub const NUM_OUTPUTS: usize = NUM_ITEMS + 1;

/// Baseline global-score ceiling for cohort inclusion.
pub const INCLUSION_MAX_GLOBAL: f64 = 20.0;
/// Slack on the inclusion ceiling for floating-point item sums.
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ClinicalError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{field}` value `{value}`")]
    Parse {
        line: u64,
        field: String,
        value: String,
    },
    #[error("subject {subject_id}: {field} = {value} outside [0, {max}]")]
    OutOfRange {
        subject_id: String,
        field: String,
        value: f64,
        max: f64,
    },
    #[error("subject {subject_id}: inconsistent {field} across rows")]
    Inconsistent { subject_id: String, field: String },
    #[error("subject {subject_id}: duplicate {timepoint} assessment")]
    DuplicateVisit {
        subject_id: String,
        timepoint: Timepoint,
    },
    #[error("subject {subject_id}: missing {timepoint} assessment")]
    MissingTimepoint {
        subject_id: String,
        timepoint: Timepoint,
    },
    #[error("expected {expected} item scores, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("item maxima must be positive (item {0})")]
    InvalidRange(AdasItem),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One ADAS-Cog 13 item, Q1..Q13.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdasItem {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
    Q7,
    Q8,
    Q9,
    Q10,
    Q11,
    Q12,
    Q13,
}

impl AdasItem {
    pub const ALL: [AdasItem; NUM_ITEMS] = [
        AdasItem::Q1,
        AdasItem::Q2,
        AdasItem::Q3,
        AdasItem::Q4,
        AdasItem::Q5,
        AdasItem::Q6,
        AdasItem::Q7,
        AdasItem::Q8,
        AdasItem::Q9,
        AdasItem::Q10,
        AdasItem::Q11,
        AdasItem::Q12,
        AdasItem::Q13,
    ];

    /// Zero-based position in Q1..Q13 order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            AdasItem::Q1 => "Word Recall",
            AdasItem::Q2 => "Commands",
            AdasItem::Q3 => "Constructional Praxis",
            AdasItem::Q4 => "Delayed Word Recall",
            AdasItem::Q5 => "Naming",
            AdasItem::Q6 => "Ideational Praxis",
            AdasItem::Q7 => "Orientation",
            AdasItem::Q8 => "Word Recognition",
            AdasItem::Q9 => "Remembering Test Instructions",
            AdasItem::Q10 => "Spoken Language",
            AdasItem::Q11 => "Word Finding",
            AdasItem::Q12 => "Comprehension",
            AdasItem::Q13 => "Number Cancellation",
        }
    }

    pub fn name(self) -> &'static str {
        ITEM_NAMES[self.index()]
    }
}

const ITEM_NAMES: [&str; NUM_ITEMS] = [
    "Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Q7", "Q8", "Q9", "Q10", "Q11", "Q12", "Q13",
];

impl fmt::Display for AdasItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdasItem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ITEM_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| AdasItem::ALL[i])
            .ok_or_else(|| format!("unknown ADAS-Cog item `{s}`"))
    }
}

/// Per-item maximum scores. Defaults to the standard ADAS-Cog 13 ranges (total 85).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ItemRanges([f64; NUM_ITEMS]);

impl Default for ItemRanges {
    fn default() -> Self {
        ItemRanges([
            10.0, 5.0, 5.0, 10.0, 5.0, 5.0, 8.0, 12.0, 5.0, 5.0, 5.0, 5.0, 5.0,
        ])
    }
}

impl ItemRanges {
    pub fn new(maxima: [f64; NUM_ITEMS]) -> Result<Self, ClinicalError> {
        for item in AdasItem::ALL {
            let m = maxima[item.index()];
            if !(m.is_finite() && m > 0.0) {
                return Err(ClinicalError::InvalidRange(item));
            }
        }
        Ok(ItemRanges(maxima))
    }

    pub fn max(&self, item: AdasItem) -> f64 {
        self.0[item.index()]
    }

    pub fn maxima(&self) -> &[f64; NUM_ITEMS] {
        &self.0
    }

    /// Maximum attainable global score.
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for ItemRanges {
    type Error = ClinicalError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let arr: [f64; NUM_ITEMS] = v
            .try_into()
            .map_err(|v: Vec<f64>| ClinicalError::WrongLength {
                expected: NUM_ITEMS,
                got: v.len(),
            })?;
        ItemRanges::new(arr)
    }
}

impl From<ItemRanges> for Vec<f64> {
    fn from(r: ItemRanges) -> Self {
        r.0.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Timepoint {
    BL,
    M06,
    M24,
}

impl Timepoint {
    pub const ALL: [Timepoint; 3] = [Timepoint::BL, Timepoint::M06, Timepoint::M24];

    /// Years elapsed since baseline.
    pub fn years(self) -> f64 {
        match self {
            Timepoint::BL => 0.0,
            Timepoint::M06 => 0.5,
            Timepoint::M24 => 2.0,
        }
    }
}

impl fmt::Display for Timepoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timepoint::BL => "BL",
            Timepoint::M06 => "M06",
            Timepoint::M24 => "M24",
        })
    }
}

impl FromStr for Timepoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BL" => Ok(Timepoint::BL),
            "M06" => Ok(Timepoint::M06),
            "M24" => Ok(Timepoint::M24),
            other => Err(format!("unsupported timepoint `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    NC,
    MCI,
    AD,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::NC, Diagnosis::MCI, Diagnosis::AD];
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::NC => "NC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        })
    }
}

impl FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NC" => Ok(Diagnosis::NC),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            other => Err(format!("unknown diagnosis `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::M => "M",
            Sex::F => "F",
        })
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Sex::M),
            "F" => Ok(Sex::F),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

/// Sum of 13 item scores.
pub fn derive_global(item_scores: &[f64]) -> Result<f64, ClinicalError> {
    if item_scores.len() != NUM_ITEMS {
        return Err(ClinicalError::WrongLength {
            expected: NUM_ITEMS,
            got: item_scores.len(),
        });
    }
    Ok(item_scores.iter().sum())
}

/// Item scores of one subject at one visit. Construct through [`AdasCogAssessment::new`]
/// so that ranges are checked and the global score is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdasCogAssessment {
    subject_id: String,
    timepoint: Timepoint,
    item_scores: [f64; NUM_ITEMS],
    global_score: f64,
}

impl AdasCogAssessment {
    pub fn new(
        subject_id: impl Into<String>,
        timepoint: Timepoint,
        item_scores: [f64; NUM_ITEMS],
        ranges: &ItemRanges,
    ) -> Result<Self, ClinicalError> {
        let subject_id = subject_id.into();
        for item in AdasItem::ALL {
            let v = item_scores[item.index()];
            let max = ranges.max(item);
            if !(v.is_finite() && (0.0..=max).contains(&v)) {
                return Err(ClinicalError::OutOfRange {
                    subject_id,
                    field: item.name().to_string(),
                    value: v,
                    max,
                });
            }
        }
        let global_score = item_scores.iter().sum();
        Ok(AdasCogAssessment {
            subject_id,
            timepoint,
            item_scores,
            global_score,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn timepoint(&self) -> Timepoint {
        self.timepoint
    }

    pub fn item_scores(&self) -> &[f64; NUM_ITEMS] {
        &self.item_scores
    }

    pub fn item(&self, item: AdasItem) -> f64 {
        self.item_scores[item.index()]
    }

    pub fn global_score(&self) -> f64 {
        self.global_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub age: f64,
    pub sex: Sex,
    pub assessments: BTreeMap<Timepoint, AdasCogAssessment>,
    pub mri_path: Option<PathBuf>,
}

impl SubjectRecord {
    pub fn assessment(&self, timepoint: Timepoint) -> Result<&AdasCogAssessment, ClinicalError> {
        self.assessments
            .get(&timepoint)
            .ok_or_else(|| ClinicalError::MissingTimepoint {
                subject_id: self.subject_id.clone(),
                timepoint,
            })
    }

    /// Complete-case eligibility: all three visits, baseline global within the
    /// inclusion ceiling, and a volume reference when MRI is required.
    pub fn is_eligible(&self, require_mri: bool) -> bool {
        let visits = Timepoint::ALL
            .iter()
            .all(|tp| self.assessments.contains_key(tp));
        let included = self
            .assessments
            .get(&Timepoint::BL)
            .is_some_and(|a| a.global_score() <= INCLUSION_MAX_GLOBAL + SUM_TOLERANCE);
        visits && included && (!require_mri || self.mri_path.is_some())
    }
}

/// Keeps subjects that pass [`SubjectRecord::is_eligible`], logging the rest.
pub fn eligible_subjects(cohort: &[SubjectRecord], require_mri: bool) -> Vec<SubjectRecord> {
    cohort
        .iter()
        .filter(|s| {
            let ok = s.is_eligible(require_mri);
            if !ok {
                log::info!("excluding subject {} (incomplete or out of range)", s.subject_id);
            }
            ok
        })
        .cloned()
        .collect()
}

/// Items Q1..Q13 at BL followed by Q1..Q13 at M06.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl FeatureVector {
    pub fn baseline(&self) -> &[f64] {
        &self.0[..NUM_ITEMS]
    }

    pub fn month6(&self) -> &[f64] {
        &self.0[NUM_ITEMS..]
    }
}

/// Global score at M24 followed by items Q1..Q13 at M24.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetVector(pub [f64; NUM_OUTPUTS]);

impl TargetVector {
    pub fn global(&self) -> f64 {
        self.0[0]
    }

    pub fn items(&self) -> &[f64] {
        &self.0[1..]
    }
}

pub fn build_feature_vector(subject: &SubjectRecord) -> Result<FeatureVector, ClinicalError> {
    let bl = subject.assessment(Timepoint::BL)?;
    let m06 = subject.assessment(Timepoint::M06)?;
    let mut values = [0.0; NUM_FEATURES];
    values[..NUM_ITEMS].copy_from_slice(bl.item_scores());
    values[NUM_ITEMS..].copy_from_slice(m06.item_scores());
    Ok(FeatureVector(values))
}

pub fn build_target_vector(subject: &SubjectRecord) -> Result<TargetVector, ClinicalError> {
    let m24 = subject.assessment(Timepoint::M24)?;
    let mut values = [0.0; NUM_OUTPUTS];
    values[0] = m24.global_score();
    values[1..].copy_from_slice(m24.item_scores());
    Ok(TargetVector(values))
}

/// One entry of the JSON validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub subject_id: String,
    pub field: String,
    pub message: String,
}

const ID_COLUMNS: [&str; 5] = ["subject_id", "diagnosis", "age", "sex", "timepoint"];

struct Columns {
    subject_id: usize,
    diagnosis: usize,
    age: usize,
    sex: usize,
    timepoint: usize,
    items: [usize; NUM_ITEMS],
    mri_path: Option<usize>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord) -> Result<Self, ClinicalError> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| ClinicalError::MissingColumn(name.to_string()))
        };
        let mut items = [0; NUM_ITEMS];
        for item in AdasItem::ALL {
            items[item.index()] = find(item.name())?;
        }
        Ok(Columns {
            subject_id: find(ID_COLUMNS[0])?,
            diagnosis: find(ID_COLUMNS[1])?,
            age: find(ID_COLUMNS[2])?,
            sex: find(ID_COLUMNS[3])?,
            timepoint: find(ID_COLUMNS[4])?,
            items,
            mri_path: find("mri_path").ok(),
        })
    }
}

struct Row {
    subject_id: String,
    diagnosis: Diagnosis,
    age: f64,
    sex: Sex,
    timepoint: Option<Timepoint>,
    raw_timepoint: String,
    items: [f64; NUM_ITEMS],
    mri_path: Option<PathBuf>,
}

fn parse_field<T: FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    line: u64,
) -> Result<T, ClinicalError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| ClinicalError::Parse {
        line,
        field: name.to_string(),
        value: raw.to_string(),
    })
}

fn parse_row(record: &csv::StringRecord, cols: &Columns) -> Result<Row, ClinicalError> {
    let line = record.position().map_or(0, |p| p.line());
    let subject_id = record.get(cols.subject_id).unwrap_or("").trim().to_string();
    if subject_id.is_empty() {
        return Err(ClinicalError::Parse {
            line,
            field: "subject_id".into(),
            value: String::new(),
        });
    }
    let raw_timepoint = record.get(cols.timepoint).unwrap_or("").trim().to_string();
    let mut items = [0.0; NUM_ITEMS];
    for item in AdasItem::ALL {
        items[item.index()] = parse_field(record, cols.items[item.index()], item.name(), line)?;
    }
    Ok(Row {
        diagnosis: parse_field(record, cols.diagnosis, "diagnosis", line)?,
        age: parse_field(record, cols.age, "age", line)?,
        sex: parse_field(record, cols.sex, "sex", line)?,
        timepoint: raw_timepoint.parse().ok(),
        raw_timepoint,
        items,
        mri_path: cols
            .mri_path
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from),
        subject_id,
    })
}

fn merge_row(
    cohort: &mut BTreeMap<String, SubjectRecord>,
    order: &mut Vec<String>,
    row: Row,
    ranges: &ItemRanges,
) -> Result<(), ClinicalError> {
    let Some(timepoint) = row.timepoint else {
        log::warn!(
            "subject {}: ignoring visit `{}`",
            row.subject_id,
            row.raw_timepoint
        );
        return Ok(());
    };
    let assessment = AdasCogAssessment::new(row.subject_id.clone(), timepoint, row.items, ranges)?;
    let record = cohort.entry(row.subject_id.clone()).or_insert_with(|| {
        order.push(row.subject_id.clone());
        SubjectRecord {
            subject_id: row.subject_id.clone(),
            diagnosis: row.diagnosis,
            age: row.age,
            sex: row.sex,
            assessments: BTreeMap::new(),
            mri_path: None,
        }
    });
    let inconsistent = |field: &str| ClinicalError::Inconsistent {
        subject_id: row.subject_id.clone(),
        field: field.to_string(),
    };
    if record.diagnosis != row.diagnosis {
        return Err(inconsistent("diagnosis"));
    }
    if record.sex != row.sex {
        return Err(inconsistent("sex"));
    }
    if row.mri_path.is_some() {
        record.mri_path = row.mri_path;
    }
    if record.assessments.insert(timepoint, assessment).is_some() {
        return Err(ClinicalError::DuplicateVisit {
            subject_id: row.subject_id,
            timepoint,
        });
    }
    Ok(())
}

/// Reads a clinical CSV from any reader. Subjects keep first-appearance order.
pub fn read_clinical_csv<R: Read>(
    reader: R,
    ranges: &ItemRanges,
) -> Result<Vec<SubjectRecord>, ClinicalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns::resolve(rdr.headers()?)?;
    let mut cohort = BTreeMap::new();
    let mut order = Vec::new();
    for record in rdr.records() {
        let row = parse_row(&record?, &cols)?;
        merge_row(&mut cohort, &mut order, row, ranges)?;
    }
    Ok(order
        .into_iter()
        .filter_map(|id| cohort.remove(&id))
        .collect())
}

pub fn parse_clinical_csv(
    path: impl AsRef<Path>,
    ranges: &ItemRanges,
) -> Result<Vec<SubjectRecord>, ClinicalError> {
    read_clinical_csv(std::fs::File::open(path)?, ranges)
}

/// Scans a whole CSV and reports every problem instead of stopping at the first.
pub fn validate_clinical_csv<R: Read>(reader: R, ranges: &ItemRanges) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = match rdr.headers().map_err(ClinicalError::from).and_then(Columns::resolve) {
        Ok(c) => c,
        Err(e) => {
            let field = match &e {
                ClinicalError::MissingColumn(c) => c.clone(),
                _ => "header".into(),
            };
            issues.push(ValidationIssue {
                subject_id: String::new(),
                field,
                message: e.to_string(),
            });
            return issues;
        }
    };
    let mut cohort = BTreeMap::new();
    let mut order = Vec::new();
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                issues.push(ValidationIssue {
                    subject_id: String::new(),
                    field: "row".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let subject_id = record.get(cols.subject_id).unwrap_or("").to_string();
        let result = parse_row(&record, &cols)
            .and_then(|row| merge_row(&mut cohort, &mut order, row, ranges));
        if let Err(e) = result {
            let field = match &e {
                ClinicalError::Parse { field, .. }
                | ClinicalError::OutOfRange { field, .. }
                | ClinicalError::Inconsistent { field, .. } => field.clone(),
                ClinicalError::DuplicateVisit { .. } => "timepoint".into(),
                _ => "row".into(),
            };
            issues.push(ValidationIssue {
                subject_id,
                field,
                message: e.to_string(),
            });
        }
    }
    issues
}

/// Writes the cohort in the canonical column layout (no `mri_path` column).
pub fn write_clinical_csv<W: Write>(
    writer: W,
    cohort: &[SubjectRecord],
) -> Result<(), ClinicalError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ID_COLUMNS.to_vec();
    header.extend(ITEM_NAMES);
    wtr.write_record(&header)?;
    for subject in cohort {
        for assessment in subject.assessments.values() {
            let mut row = vec![
                subject.subject_id.clone(),
                subject.diagnosis.to_string(),
                subject.age.to_string(),
                subject.sex.to_string(),
                assessment.timepoint().to_string(),
            ];
            row.extend(assessment.item_scores().iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,diagnosis,age,sex,timepoint,Q1,Q2,Q3,Q4,Q5,Q6,Q7,Q8,Q9,Q10,Q11,Q12,Q13\n";

    fn row(id: &str, tp: &str, v: f64) -> String {
        let items = vec![v.to_string(); 13].join(",");
        format!("{id},MCI,72.5,F,{tp},{items}\n")
    }

    fn subject_with(bl: [f64; 13], m06: [f64; 13], m24: [f64; 13]) -> SubjectRecord {
        let r = ItemRanges::default();
        let mut assessments = BTreeMap::new();
        for (tp, s) in [(Timepoint::BL, bl), (Timepoint::M06, m06), (Timepoint::M24, m24)] {
            assessments.insert(tp, AdasCogAssessment::new("S1", tp, s, &r).unwrap());
        }
        SubjectRecord {
            subject_id: "S1".into(),
            diagnosis: Diagnosis::NC,
            age: 70.0,
            sex: Sex::M,
            assessments,
            mri_path: None,
        }
    }

    #[test]
    fn item_table() {
        assert_eq!(AdasItem::ALL.len(), 13);
        for (i, item) in AdasItem::ALL.iter().enumerate() {
            assert_eq!(item.index(), i);
            assert_eq!(item.name().parse::<AdasItem>().unwrap(), *item);
        }
        assert_eq!(AdasItem::Q1.label(), "Word Recall");
        assert_eq!(AdasItem::Q4.label(), "Delayed Word Recall");
        assert_eq!(AdasItem::Q8.label(), "Word Recognition");
        assert!(ItemRanges::default().maxima().iter().all(|m| *m > 0.0));
    }

    #[test]
    fn derive_global_examples() {
        assert_eq!(derive_global(&[0.0; 13]).unwrap(), 0.0);
        assert_eq!(derive_global(&[1.0; 13]).unwrap(), 13.0);
        assert_eq!(derive_global(ItemRanges::default().maxima()).unwrap(), 85.0);
        assert!(matches!(
            derive_global(&[1.0; 12]),
            Err(ClinicalError::WrongLength { got: 12, .. })
        ));
    }

    #[test]
    fn zero_row_has_zero_global() {
        let csv = format!("{HEADER}{}", row("S1", "BL", 0.0));
        let cohort = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap();
        assert_eq!(cohort.len(), 1);
        assert_eq!(cohort[0].assessments[&Timepoint::BL].global_score(), 0.0);
    }

    #[test]
    fn groups_visits_by_subject() {
        let csv = format!(
            "{HEADER}{}{}{}{}",
            row("S1", "BL", 1.0),
            row("S2", "BL", 0.0),
            row("S1", "M06", 1.0),
            row("S1", "M24", 2.0)
        );
        let cohort = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap();
        assert_eq!(cohort.len(), 2);
        assert_eq!(cohort[0].subject_id, "S1");
        assert_eq!(cohort[0].assessments.len(), 3);
        assert_eq!(cohort[0].assessments[&Timepoint::M24].global_score(), 26.0);
    }

    #[test]
    fn unknown_visits_are_ignored() {
        let csv = format!("{HEADER}{}{}", row("S1", "BL", 1.0), row("S1", "M12", 1.0));
        let cohort = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap();
        assert_eq!(cohort[0].assessments.len(), 1);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "subject_id,diagnosis,age,sex,timepoint,Q1\n";
        let err = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap_err();
        assert!(matches!(err, ClinicalError::MissingColumn(ref c) if c == "Q2"), "{err}");
    }

    #[test]
    fn non_numeric_score_reports_line() {
        let bad = row("S2", "BL", 1.0).replacen("1,1,", "1,x,", 1);
        let csv = format!("{HEADER}{}{}", row("S1", "BL", 1.0), bad);
        let err = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap_err();
        match err {
            ClinicalError::Parse { line, field, value } => {
                assert_eq!(line, 3);
                assert_eq!(field, "Q2");
                assert_eq!(value, "x");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_names_subject_and_item() {
        // Q2 max is 5
        let csv = format!("{HEADER}{}", row("S9", "BL", 6.0));
        let err = read_clinical_csv(csv.as_bytes(), &ItemRanges::default()).unwrap_err();
        match err {
            ClinicalError::OutOfRange {
                subject_id, field, ..
            } => {
                assert_eq!(subject_id, "S9");
                assert_eq!(field, "Q2");
            }
            other => panic!("unexpected {other}"),
        }
        let issues = validate_clinical_csv(
            format!("{HEADER}{}{}", row("S9", "BL", 6.0), row("S8", "BL", -1.0)).as_bytes(),
            &ItemRanges::default(),
        );
        assert_eq!(issues.len(), 2);
        assert_eq!(issues[0].subject_id, "S9");
        assert_eq!(issues[0].field, "Q2");
        assert_eq!(issues[1].subject_id, "S8");
        assert_eq!(issues[1].field, "Q1");
        let json = serde_json::to_value(&issues[0]).unwrap();
        assert!(json.get("subject_id").is_some() && json.get("message").is_some());
    }

    #[test]
    fn feature_vector_ordering() {
        let s = subject_with([1.0; 13], [2.0; 13], [0.0; 13]);
        let f = build_feature_vector(&s).unwrap();
        assert!(f.0[..13].iter().all(|v| *v == 1.0));
        assert!(f.0[13..].iter().all(|v| *v == 2.0));
        assert_eq!(f.baseline(), s.assessments[&Timepoint::BL].item_scores());
        assert_eq!(f.month6(), s.assessments[&Timepoint::M06].item_scores());

        let zeros = subject_with([0.0; 13], [0.0; 13], [0.0; 13]);
        assert_eq!(build_feature_vector(&zeros).unwrap().0, [0.0; 26]);
        assert_eq!(build_target_vector(&zeros).unwrap().0, [0.0; 14]);
    }

    #[test]
    fn target_vector_sum() {
        let mut m24 = [0.0; 13];
        m24[0] = 3.0;
        m24[3] = 2.5;
        m24[7] = 2.5;
        let t = build_target_vector(&subject_with([0.0; 13], [0.0; 13], m24)).unwrap();
        assert_eq!(t.global(), 8.0);
        assert_eq!(t.items(), &m24);
    }

    #[test]
    fn missing_timepoints_are_eligibility_errors() {
        let mut s = subject_with([0.0; 13], [0.0; 13], [0.0; 13]);
        s.assessments.remove(&Timepoint::M06);
        assert!(matches!(
            build_feature_vector(&s),
            Err(ClinicalError::MissingTimepoint { timepoint: Timepoint::M06, .. })
        ));
        assert!(!s.is_eligible(false));
        s.assessments.remove(&Timepoint::M24);
        assert!(matches!(
            build_target_vector(&s),
            Err(ClinicalError::MissingTimepoint { timepoint: Timepoint::M24, .. })
        ));
    }

    #[test]
    fn eligibility_rules() {
        let s = subject_with([1.0; 13], [1.0; 13], [1.0; 13]);
        assert!(s.is_eligible(false));
        assert!(!s.is_eligible(true));
        let heavy = subject_with([2.0; 13], [2.0; 13], [2.0; 13]);
        assert!(!heavy.is_eligible(false), "baseline global 26 > 20");
    }

    #[test]
    fn write_then_read_is_stable() {
        let csv = format!(
            "{HEADER}{}{}{}",
            row("A", "BL", 0.5),
            row("A", "M06", 1.25),
            row("B", "M24", 0.0)
        );
        let r = ItemRanges::default();
        let first = read_clinical_csv(csv.as_bytes(), &r).unwrap();
        let mut buf = Vec::new();
        write_clinical_csv(&mut buf, &first).unwrap();
        let second = read_clinical_csv(buf.as_slice(), &r).unwrap();
        assert_eq!(first, second);
        let mut buf2 = Vec::new();
        write_clinical_csv(&mut buf2, &second).unwrap();
        assert_eq!(buf, buf2);
    }
}
