//! Posts, presence masks, datasets and the line-delimited feature file.
//!
//! The first line of a feature file is a header declaring the schema id and
//! per-modality widths; every following line is one record:
//!
//! ```text
//! {"schema":"trisprompt-features-v1","dims":{"text":768,"image":512,"comment":768}}
//! {"id":"p001","label":1,"mask":[1,0,1],"text":[...],"image":null,"comment":[...]}
//! ```
//!
//! Two-modality files omit `comment` from both the header and the records.
//! Missing modalities are literal `null`s, never zero vectors.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub const SCHEMA_ID: &str = "trisprompt-features-v1";

pub const TEXT_DIM: usize = 768;
pub const IMAGE_DIM: usize = 512;
pub const COMMENT_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record has no available modality")]
    AllMissing,
    #[error("{kind} vector has {found} entries, expected {expected}")]
    DimMismatch {
        kind: ModalityKind,
        expected: usize,
        found: usize,
    },
    #[error("{kind}: mask flag and vector presence disagree")]
    PresenceInconsistent { kind: ModalityKind },
    #[error("{kind} vector contains a non-finite entry")]
    NonFinite { kind: ModalityKind },
    #[error("mask has {found} flags, expected {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(i64),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("file has no header line")]
    MissingHeader,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<DataError>,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    fn at(self, line: usize) -> Self {
        DataError::AtLine {
            line,
            source: Box::new(self),
        }
    }

    /// The underlying error with any line annotation stripped.
    pub fn root(&self) -> &DataError {
        match self {
            DataError::AtLine { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Text,
    Image,
    Comment,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Text, ModalityKind::Image, ModalityKind::Comment];

    pub fn index(self) -> usize {
        match self {
            ModalityKind::Text => 0,
            ModalityKind::Image => 1,
            ModalityKind::Comment => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            ModalityKind::Text => 'T',
            ModalityKind::Image => 'I',
            ModalityKind::Comment => 'C',
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModalityKind::Text => "text",
            ModalityKind::Image => "image",
            ModalityKind::Comment => "comment",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Which modalities a dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Text, image and comment.
    #[serde(rename = "three")]
    Three,
    /// Text and image only.
    #[serde(rename = "two")]
    Two,
}

impl Mode {
    pub fn modality_count(self) -> usize {
        match self {
            Mode::Three => 3,
            Mode::Two => 2,
        }
    }

    pub fn modalities(self) -> &'static [ModalityKind] {
        &ModalityKind::ALL[..self.modality_count()]
    }

    pub fn from_count(count: usize) -> Option<Mode> {
        match count {
            3 => Some(Mode::Three),
            2 => Some(Mode::Two),
            _ => None,
        }
    }
}

/// Per-modality availability flags, at least one of which is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PresenceMask {
    flags: [bool; 3],
    mode: Mode,
}

impl PresenceMask {
    pub fn new(flags: &[bool]) -> Result<Self, DataError> {
        let mode = Mode::from_count(flags.len()).ok_or(DataError::MaskLength {
            expected: 3,
            found: flags.len(),
        })?;
        if !flags.iter().any(|&f| f) {
            return Err(DataError::AllMissing);
        }
        let mut out = [false; 3];
        out[..flags.len()].copy_from_slice(flags);
        Ok(Self { flags: out, mode })
    }

    pub fn full(mode: Mode) -> Self {
        let mut flags = [false; 3];
        flags[..mode.modality_count()].fill(true);
        Self { flags, mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_present(&self, kind: ModalityKind) -> bool {
        self.flags[kind.index()]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags[..self.mode.modality_count()]
    }

    pub fn available(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    pub fn is_full(&self) -> bool {
        self.available() == self.mode.modality_count()
    }

    pub fn observed(&self) -> impl Iterator<Item = ModalityKind> + '_ {
        self.mode.modalities().iter().copied().filter(|k| self.is_present(*k))
    }

    pub fn missing(&self) -> impl Iterator<Item = ModalityKind> + '_ {
        self.mode.modalities().iter().copied().filter(|k| !self.is_present(*k))
    }

    /// Copy with `kinds` marked missing; fails if nothing would remain.
    pub fn without(&self, kinds: &[ModalityKind]) -> Result<Self, DataError> {
        let mut flags = self.flags;
        for k in kinds {
            flags[k.index()] = false;
        }
        PresenceMask::new(&flags[..self.mode.modality_count()])
    }

    /// Short label listing the available modalities, e.g. `T+C`.
    pub fn label(&self) -> String {
        let letters: Vec<String> = self.observed().map(|k| k.letter().to_string()).collect();
        letters.join("+")
    }
}

/// Per-modality feature widths. `comment` is `None` for two-modality data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text: usize,
    pub image: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<usize>,
}

impl Dims {
    pub fn standard(mode: Mode) -> Self {
        Self {
            text: TEXT_DIM,
            image: IMAGE_DIM,
            comment: match mode {
                Mode::Three => Some(COMMENT_DIM),
                Mode::Two => None,
            },
        }
    }

    pub fn mode(&self) -> Mode {
        if self.comment.is_some() {
            Mode::Three
        } else {
            Mode::Two
        }
    }

    pub fn get(&self, kind: ModalityKind) -> Option<usize> {
        match kind {
            ModalityKind::Text => Some(self.text),
            ModalityKind::Image => Some(self.image),
            ModalityKind::Comment => self.comment,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// 1 = rumor, 0 = non-rumor.
    pub label: u8,
    pub mask: PresenceMask,
    features: [Option<Vec<f32>>; 3],
}

impl FeatureRecord {
    pub fn new(
        id: impl Into<String>,
        label: u8,
        mask: PresenceMask,
        text: Option<Vec<f32>>,
        image: Option<Vec<f32>>,
        comment: Option<Vec<f32>>,
    ) -> Self {
        Self {
            id: id.into(),
            label,
            mask,
            features: [text, image, comment],
        }
    }

    pub fn feature(&self, kind: ModalityKind) -> Option<&[f32]> {
        self.features[kind.index()].as_deref()
    }

    pub fn text(&self) -> Option<&[f32]> {
        self.feature(ModalityKind::Text)
    }

    pub fn image(&self) -> Option<&[f32]> {
        self.feature(ModalityKind::Image)
    }

    pub fn comment(&self) -> Option<&[f32]> {
        self.feature(ModalityKind::Comment)
    }

    /// Drops the listed modalities: removes their vectors and clears their
    /// mask flags.
    pub fn drop_modalities(&self, kinds: &[ModalityKind]) -> Result<Self, DataError> {
        let mask = self.mask.without(kinds)?;
        let mut features = self.features.clone();
        for k in kinds {
            features[k.index()] = None;
        }
        Ok(Self {
            id: self.id.clone(),
            label: self.label,
            mask,
            features,
        })
    }
}

/// A record that has passed [`validate_record`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRecord(FeatureRecord);

impl ValidatedRecord {
    pub fn into_inner(self) -> FeatureRecord {
        self.0
    }
}

impl std::ops::Deref for ValidatedRecord {
    type Target = FeatureRecord;
    fn deref(&self) -> &FeatureRecord {
        &self.0
    }
}

/// Checks a record against the dataset widths.
pub fn validate_record(record: FeatureRecord, dims: &Dims) -> Result<ValidatedRecord, DataError> {
    let mode = dims.mode();
    if record.mask.mode() != mode {
        return Err(DataError::MaskLength {
            expected: mode.modality_count(),
            found: record.mask.mode().modality_count(),
        });
    }
    if record.mask.available() == 0 {
        return Err(DataError::AllMissing);
    }
    if record.label > 1 {
        return Err(DataError::BadLabel(record.label as i64));
    }
    for kind in ModalityKind::ALL {
        let flagged = record.mask.is_present(kind);
        let vector = record.feature(kind);
        match (flagged, vector, dims.get(kind)) {
            (true, Some(v), Some(expected)) => {
                if v.len() != expected {
                    return Err(DataError::DimMismatch {
                        kind,
                        expected,
                        found: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(DataError::NonFinite { kind });
                }
            }
            (false, None, _) => {}
            _ => return Err(DataError::PresenceInconsistent { kind }),
        }
    }
    Ok(ValidatedRecord(record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub split: Option<Split>,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    /// Validates every record and id uniqueness.
    pub fn new(dims: Dims, split: Option<Split>, records: Vec<FeatureRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            if !seen.insert(rec.id.clone()) {
                return Err(DataError::DuplicateId(rec.id));
            }
            out.push(validate_record(rec, &dims)?.into_inner());
        }
        Ok(Self {
            dims,
            split,
            records: out,
        })
    }

    pub fn mode(&self) -> Mode {
        self.dims.mode()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.records.iter().all(|r| r.mask.is_full())
    }

    pub fn with_split(mut self, split: Option<Split>) -> Self {
        self.split = split;
        self
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize], split: Option<Split>) -> Self {
        Self {
            dims: self.dims,
            split,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub(crate) fn from_validated(dims: Dims, split: Option<Split>, records: Vec<FeatureRecord>) -> Self {
        Self { dims, split, records }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema: String,
    dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    label: i64,
    mask: Vec<u8>,
    text: Option<Vec<f32>>,
    image: Option<Vec<f32>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "present_key"
    )]
    comment: Option<Option<Vec<f32>>>,
}

// Distinguishes `"comment": null` (Some(None)) from an absent key (None).
fn present_key<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<Vec<f32>>>, D::Error> {
    Option::<Vec<f32>>::deserialize(d).map(Some)
}

fn parse_record(line: &str, dims: &Dims) -> Result<FeatureRecord, DataError> {
    let raw: RecordLine = serde_json::from_str(line)?;
    let mode = dims.mode();
    if raw.mask.len() != mode.modality_count() {
        return Err(DataError::MaskLength {
            expected: mode.modality_count(),
            found: raw.mask.len(),
        });
    }
    if let Some(&bad) = raw.mask.iter().find(|&&f| f > 1) {
        return Err(DataError::SchemaMismatch(format!("mask flag {bad} is not 0 or 1")));
    }
    match (mode, &raw.comment) {
        (Mode::Three, None) => {
            return Err(DataError::SchemaMismatch("record lacks the comment key".into()));
        }
        (Mode::Two, Some(_)) => {
            return Err(DataError::SchemaMismatch(
                "two-modality record carries a comment key".into(),
            ));
        }
        _ => {}
    }
    if !(0..=1).contains(&raw.label) {
        return Err(DataError::BadLabel(raw.label));
    }
    let flags: Vec<bool> = raw.mask.iter().map(|&f| f == 1).collect();
    let mask = PresenceMask::new(&flags)?;
    let rec = FeatureRecord::new(
        raw.id,
        raw.label as u8,
        mask,
        raw.text,
        raw.image,
        raw.comment.flatten(),
    );
    Ok(validate_record(rec, dims)?.into_inner())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_text = lines.next().ok_or(DataError::MissingHeader)??;
    if header_text.trim().is_empty() {
        return Err(DataError::MissingHeader);
    }
    let header: HeaderLine =
        serde_json::from_str(&header_text).map_err(|_| DataError::MissingHeader)?;
    if header.schema != SCHEMA_ID {
        return Err(DataError::SchemaMismatch(format!(
            "expected schema {SCHEMA_ID}, found {}",
            header.schema
        )));
    }
    let dims = header.dims;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line, &dims).map_err(|e| e.at(line_no))?;
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId(rec.id).at(line_no));
        }
        records.push(rec);
    }
    Ok(Dataset::from_validated(dims, header.split, records))
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(dataset: &Dataset, w: &mut W) -> Result<(), DataError> {
    let header = HeaderLine {
        schema: SCHEMA_ID.to_string(),
        dims: dataset.dims,
        split: dataset.split,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let three = dataset.mode() == Mode::Three;
    for rec in &dataset.records {
        let line = RecordLine {
            id: rec.id.clone(),
            label: rec.label as i64,
            mask: rec.mask.flags().iter().map(|&f| f as u8).collect(),
            text: rec.text().map(<[f32]>::to_vec),
            image: rec.image().map(<[f32]>::to_vec),
            comment: three.then(|| rec.comment().map(<[f32]>::to_vec)),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_record(id: &str, label: u8) -> FeatureRecord {
        FeatureRecord::new(
            id,
            label,
            PresenceMask::full(Mode::Three),
            Some(vec![0.5; TEXT_DIM]),
            Some(vec![-0.25; IMAGE_DIM]),
            Some(vec![1.0; COMMENT_DIM]),
        )
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        assert!(matches!(PresenceMask::new(&[false, false, false]), Err(DataError::AllMissing)));
        assert!(matches!(PresenceMask::new(&[false, false]), Err(DataError::AllMissing)));
    }

    #[test]
    fn fully_valid_record_is_accepted() {
        let dims = Dims::standard(Mode::Three);
        let rec = validate_record(full_record("p1", 1), &dims).unwrap();
        assert_eq!(rec.label, 1);
    }

    #[test]
    fn image_vector_without_flag_is_inconsistent() {
        let dims = Dims::standard(Mode::Three);
        let rec = FeatureRecord::new(
            "p1",
            0,
            PresenceMask::new(&[true, false, false]).unwrap(),
            Some(vec![0.0; TEXT_DIM]),
            Some(vec![0.0; IMAGE_DIM]),
            None,
        );
        assert!(matches!(
            validate_record(rec, &dims),
            Err(DataError::PresenceInconsistent { kind: ModalityKind::Image })
        ));
    }

    #[test]
    fn flag_without_vector_is_inconsistent() {
        let dims = Dims::standard(Mode::Three);
        let rec = FeatureRecord::new(
            "p1",
            0,
            PresenceMask::new(&[true, true, false]).unwrap(),
            Some(vec![0.0; TEXT_DIM]),
            None,
            None,
        );
        assert!(matches!(
            validate_record(rec, &dims),
            Err(DataError::PresenceInconsistent { kind: ModalityKind::Image })
        ));
    }

    #[test]
    fn wrong_width_and_nan_are_rejected() {
        let dims = Dims::standard(Mode::Three);
        let mut rec = full_record("p1", 0);
        rec.features[0] = Some(vec![0.0; 512]);
        assert!(matches!(
            validate_record(rec, &dims),
            Err(DataError::DimMismatch { expected: 768, found: 512, .. })
        ));
        let mut rec = full_record("p1", 0);
        rec.features[2].as_mut().unwrap()[3] = f32::NAN;
        assert!(matches!(validate_record(rec, &dims), Err(DataError::NonFinite { .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dims = Dims::standard(Mode::Three);
        let err = Dataset::new(dims, None, vec![full_record("a", 0), full_record("a", 1)]).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(_)));
    }

    #[test]
    fn empty_file_has_no_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::MissingHeader)));
    }

    #[test]
    fn wrong_schema_id_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"schema\":\"other\",\"dims\":{\"text\":768,\"image\":512}}\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::SchemaMismatch(_))));
    }

    #[test]
    fn record_width_error_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let ds = Dataset::new(
            Dims::standard(Mode::Three),
            None,
            vec![full_record("a", 0), full_record("b", 1)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let short = format!("[{}]", vec!["0.0"; 512].join(","));
        let full = format!("[{}]", vec!["0.5"; TEXT_DIM].join(","));
        lines[2] = lines[2].replacen(&full, &short, 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(DataError::AtLine { line, source }) => {
                assert_eq!(line, 3);
                assert!(matches!(*source, DataError::DimMismatch { expected: 768, found: 512, .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_modality_is_written_as_null() {
        let rec = full_record("a", 1).drop_modalities(&[ModalityKind::Image]).unwrap();
        let ds = Dataset::new(Dims::standard(Mode::Three), None, vec![rec]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"schema":"trisprompt-features-v1","dims":{"text":768,"image":512,"comment":768}}"#
        );
        assert!(text.lines().nth(1).unwrap().contains("\"image\":null"));
        assert!(text.lines().nth(1).unwrap().contains("\"mask\":[1,0,1]"));
    }

    #[test]
    fn two_modality_files_omit_comment() {
        let rec = FeatureRecord::new(
            "a",
            0,
            PresenceMask::new(&[false, true]).unwrap(),
            None,
            Some(vec![0.1; IMAGE_DIM]),
            None,
        );
        let ds = Dataset::new(Dims::standard(Mode::Two), None, vec![rec]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("comment"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.jsonl");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let ds = Dataset::new(Dims::standard(Mode::Three), None, vec![]).unwrap();
        let err = save_dataset(&ds, "/nonexistent-dir/sub/out.jsonl").unwrap_err();
        assert!(matches!(err, DataError::Io(_)));
    }
}
