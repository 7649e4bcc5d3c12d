//! Human review verdicts: an append-only JSON-lines log plus the filter that
//! applies verdicts to a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::coco::{CocoCategory, CocoDocument, ReviewNote};
use super::StoreError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
    Relabel(String),
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VerdictLine", into = "VerdictLine")]
pub struct ReviewVerdict {
    pub annotation_id: u64,
    pub verdict: Verdict,
    pub reviewer: String,
    pub at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct VerdictLine {
    annotation_id: u64,
    verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new_category_name: Option<String>,
    reviewer: String,
    at: DateTime<Utc>,
}

impl TryFrom<VerdictLine> for ReviewVerdict {
    type Error = String;

    fn try_from(l: VerdictLine) -> Result<Self, Self::Error> {
        let verdict = match (l.verdict.as_str(), l.new_category_name) {
            ("accept", None) => Verdict::Accept,
            ("reject", None) => Verdict::Reject,
            ("relabel", Some(name)) if !name.trim().is_empty() => Verdict::Relabel(name.trim().to_string()),
            ("relabel", _) => return Err("relabel needs a non-empty new_category_name".into()),
            (v, Some(_)) if v == "accept" || v == "reject" => {
                return Err(format!("'{v}' verdict must not carry new_category_name"))
            }
            (other, _) => return Err(format!("unknown verdict '{other}'")),
        };
        Ok(ReviewVerdict {
            annotation_id: l.annotation_id,
            verdict,
            reviewer: l.reviewer,
            at: l.at,
        })
    }
}

impl From<ReviewVerdict> for VerdictLine {
    fn from(v: ReviewVerdict) -> Self {
        let (verdict, new_category_name) = match v.verdict {
            Verdict::Accept => ("accept", None),
            Verdict::Reject => ("reject", None),
            Verdict::Relabel(n) => ("relabel", Some(n)),
        };
        VerdictLine {
            annotation_id: v.annotation_id,
            verdict: verdict.to_string(),
            new_category_name,
            reviewer: v.reviewer,
            at: v.at,
        }
    }
}

/// Current verdict per annotation plus full history, optionally backed by a log file.
///
/// Later verdicts for the same annotation replace the current one; the log
/// keeps every line and the index is rebuilt from it on open.
#[derive(Debug)]
pub struct VerdictStore {
    log: Option<(PathBuf, File)>,
    known: BTreeSet<u64>,
    current: BTreeMap<u64, ReviewVerdict>,
    history: Vec<ReviewVerdict>,
}

impl VerdictStore {
    pub fn in_memory(known: BTreeSet<u64>) -> Self {
        Self {
            log: None,
            known,
            current: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    pub fn open(path: &Path, known: BTreeSet<u64>) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut store = Self::in_memory(known);
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let v: ReviewVerdict = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                    what: format!("{} line {}", path.display(), n + 1),
                    message: e.to_string(),
                })?;
                store.apply(v);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    fn apply(&mut self, v: ReviewVerdict) {
        self.current.insert(v.annotation_id, v.clone());
        self.history.push(v);
    }

    pub fn record(&mut self, v: ReviewVerdict) -> Result<&ReviewVerdict, StoreError> {
        if !self.known.contains(&v.annotation_id) {
            return Err(StoreError::UnknownAnnotation(v.annotation_id));
        }
        if let Some((path, file)) = &mut self.log {
            let line = serde_json::to_string(&v).expect("verdicts always serialize");
            writeln!(file, "{line}")
                .and_then(|_| file.sync_data())
                .map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        let id = v.annotation_id;
        self.apply(v);
        Ok(&self.current[&id])
    }

    pub fn current(&self) -> &BTreeMap<u64, ReviewVerdict> {
        &self.current
    }

    pub fn get(&self, annotation_id: u64) -> Option<&ReviewVerdict> {
        self.current.get(&annotation_id)
    }

    pub fn history(&self) -> &[ReviewVerdict] {
        &self.history
    }

    pub fn history_of(&self, annotation_id: u64) -> impl Iterator<Item = &ReviewVerdict> {
        self.history.iter().filter(move |v| v.annotation_id == annotation_id)
    }
}

/// Applies verdicts: rejected annotations are removed, relabels move the
/// annotation to the named category (new names get fresh ids appended in
/// lexicographic order), and surviving annotations are renumbered 1.. in
/// their original order. Unreviewed annotations are kept unless
/// `drop_unreviewed` is set.
pub fn filtered_export(
    doc: &CocoDocument,
    verdicts: &BTreeMap<u64, ReviewVerdict>,
    drop_unreviewed: bool,
) -> CocoDocument {
    let mut out = doc.clone();
    let mut note = ReviewNote::default();

    let new_names: BTreeSet<&str> = verdicts
        .values()
        .filter_map(|v| match &v.verdict {
            Verdict::Relabel(n) if doc.categories.iter().all(|c| &c.name != n) => Some(n.as_str()),
            _ => None,
        })
        .collect();
    let mut next_id = doc.categories.iter().map(|c| c.id).max().unwrap_or(0) + 1;
    for name in new_names {
        out.categories.push(CocoCategory {
            id: next_id,
            name: name.to_string(),
        });
        next_id += 1;
    }

    let mut kept = Vec::with_capacity(doc.annotations.len());
    for a in &doc.annotations {
        match verdicts.get(&a.id).map(|v| &v.verdict) {
            Some(Verdict::Accept) => {
                note.accepted += 1;
                kept.push(a.clone());
            }
            Some(Verdict::Reject) => note.rejected += 1,
            Some(Verdict::Relabel(name)) => {
                note.relabeled += 1;
                let mut a = a.clone();
                a.category_id = out
                    .categories
                    .iter()
                    .find(|c| &c.name == name)
                    .expect("relabel categories were added above")
                    .id;
                kept.push(a);
            }
            None if drop_unreviewed => note.unreviewed_dropped += 1,
            None => {
                note.unreviewed_kept += 1;
                kept.push(a.clone());
            }
        }
    }
    for (i, a) in kept.iter_mut().enumerate() {
        a.id = i as u64 + 1;
    }
    out.annotations = kept;
    out.info.review = Some(note);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::RleRecord;
    use crate::store::coco::{CocoAnnotation, ImageRecord};

    fn at() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    fn verdict(id: u64, v: Verdict) -> ReviewVerdict {
        ReviewVerdict {
            annotation_id: id,
            verdict: v,
            reviewer: "ann".into(),
            at: at(),
        }
    }

    /// Three single-pixel annotations on a 2x2 image: cat, cat, dog.
    fn three() -> CocoDocument {
        let counts = [vec![0, 1, 3], vec![1, 1, 2], vec![2, 1, 1]];
        let bboxes = [[0.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 1.0], [1.0, 0.0, 1.0, 1.0]];
        CocoDocument {
            images: vec![ImageRecord {
                id: 1,
                width: 2,
                height: 2,
                file_name: "a".into(),
            }],
            annotations: (0..3)
                .map(|i| CocoAnnotation {
                    id: i as u64 + 1,
                    image_id: 1,
                    category_id: if i == 2 { 2 } else { 1 },
                    bbox: bboxes[i],
                    segmentation: RleRecord {
                        size: [2, 2],
                        counts: counts[i].clone(),
                    },
                    area: 1,
                    score: Some(0.9 - i as f64 * 0.1),
                    iscrowd: 0,
                    detection_box: None,
                })
                .collect(),
            categories: vec![
                CocoCategory { id: 1, name: "cat".into() },
                CocoCategory { id: 2, name: "dog".into() },
            ],
            info: Default::default(),
        }
    }

    #[test]
    fn fixture_is_valid() {
        three().validate().unwrap();
    }

    #[test]
    fn later_verdict_overwrites() {
        let mut s = VerdictStore::in_memory([1].into());
        s.record(verdict(1, Verdict::Accept)).unwrap();
        s.record(verdict(1, Verdict::Reject)).unwrap();
        assert_eq!(s.get(1).unwrap().verdict, Verdict::Reject);
        assert_eq!(s.history_of(1).count(), 2);
    }

    #[test]
    fn unknown_annotation_rejected() {
        let mut s = VerdictStore::in_memory([1].into());
        assert!(matches!(s.record(verdict(7, Verdict::Accept)), Err(StoreError::UnknownAnnotation(7))));
    }

    #[test]
    fn log_rebuilds_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        {
            let mut s = VerdictStore::open(&path, [1, 2].into()).unwrap();
            s.record(verdict(1, Verdict::Accept)).unwrap();
            s.record(verdict(2, Verdict::Relabel("cow".into()))).unwrap();
            s.record(verdict(1, Verdict::Reject)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains(r#""new_category_name":"cow""#));
        let s = VerdictStore::open(&path, [1, 2].into()).unwrap();
        assert_eq!(s.history().len(), 3);
        assert_eq!(s.get(1).unwrap().verdict, Verdict::Reject);
        assert_eq!(s.get(2).unwrap().verdict, Verdict::Relabel("cow".into()));
    }

    #[test]
    fn verdict_line_validation() {
        let bad = r#"{"annotation_id":1,"verdict":"relabel","reviewer":"a","at":"2024-01-01T00:00:00Z"}"#;
        assert!(serde_json::from_str::<ReviewVerdict>(bad).is_err());
        let bad = r#"{"annotation_id":1,"verdict":"maybe","reviewer":"a","at":"2024-01-01T00:00:00Z"}"#;
        assert!(serde_json::from_str::<ReviewVerdict>(bad).is_err());
    }

    #[test]
    fn all_accepted_is_identity() {
        let doc = three();
        let v: BTreeMap<u64, ReviewVerdict> = (1..=3).map(|i| (i, verdict(i, Verdict::Accept))).collect();
        let out = filtered_export(&doc, &v, false);
        assert_eq!(out.annotations, doc.annotations);
        assert_eq!(out.categories, doc.categories);
        assert_eq!(out.info.review.unwrap().accepted, 3);
    }

    #[test]
    fn one_rejected_resequences() {
        let doc = three();
        let v: BTreeMap<u64, ReviewVerdict> = [(2, verdict(2, Verdict::Reject))].into();
        let out = filtered_export(&doc, &v, false);
        // annotation 3 (dog, counts [2,1,1]) becomes id 2
        let got: Vec<(u64, u64, Vec<u32>)> = out
            .annotations
            .iter()
            .map(|a| (a.id, a.category_id, a.segmentation.counts.clone()))
            .collect();
        assert_eq!(got, vec![(1, 1, vec![0, 1, 3]), (2, 2, vec![2, 1, 1])]);
        out.validate().unwrap();
    }

    #[test]
    fn relabel_appends_category() {
        let doc = three();
        let v: BTreeMap<u64, ReviewVerdict> = [
            (1, verdict(1, Verdict::Relabel("zebra".into()))),
            (2, verdict(2, Verdict::Relabel("cow".into()))),
            (3, verdict(3, Verdict::Relabel("cat".into()))),
        ]
        .into();
        let out = filtered_export(&doc, &v, false);
        let cats: Vec<(u64, &str)> = out.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        assert_eq!(cats, vec![(1, "cat"), (2, "dog"), (3, "cow"), (4, "zebra")]);
        let names: Vec<&str> = out
            .annotations
            .iter()
            .map(|a| out.category_name(a.category_id).unwrap())
            .collect();
        assert_eq!(names, vec!["zebra", "cow", "cat"]);
        out.validate().unwrap();
    }

    #[test]
    fn drop_unreviewed() {
        let out = filtered_export(&three(), &BTreeMap::new(), true);
        assert!(out.annotations.is_empty());
        assert_eq!(out.info.review.unwrap().unreviewed_dropped, 3);
    }
}
