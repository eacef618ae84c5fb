//! Screenshot corpus: data model, line-record persistence and collection filters.
//!
//! A corpus file holds one JSON object per line. Each object carries a `kind`
//! discriminator (`screenshot`, `q2s` or `sq2s`) next to the record's fields.
//! Sample records may reference screenshots defined later in the file; all
//! references are resolved once the whole file has been read.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsio;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: parse failure: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: dangling reference to screenshot id {id:?}")]
    Dangling { line: usize, id: String },
    #[error("line {line}: duplicate screenshot id {id:?}")]
    Duplicate { line: usize, id: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Content category of a collected screenshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainCategory {
    News,
    Products,
    ResearchPapers,
    ProjectHomepage,
    GeneralDocuments,
    Charts,
    CommonKnowledge,
}

impl DomainCategory {
    pub const ALL: [DomainCategory; 7] = [
        DomainCategory::News,
        DomainCategory::Products,
        DomainCategory::ResearchPapers,
        DomainCategory::ProjectHomepage,
        DomainCategory::GeneralDocuments,
        DomainCategory::Charts,
        DomainCategory::CommonKnowledge,
    ];

    /// Whether screenshots of this domain routinely contain natural images.
    pub fn has_natural_images(self) -> bool {
        matches!(
            self,
            DomainCategory::News | DomainCategory::Products | DomainCategory::CommonKnowledge
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screenshot {
    pub id: String,
    pub domain: DomainCategory,
    pub image_ref: String,
    pub width_px: u32,
    pub height_px: u32,
    pub caption: String,
    pub visual_flag: bool,
}

impl Screenshot {
    /// Builds a screenshot with `visual_flag` derived from the domain.
    pub fn new(
        id: impl Into<String>,
        domain: DomainCategory,
        image_ref: impl Into<String>,
        width_px: u32,
        height_px: u32,
        caption: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            domain,
            image_ref: image_ref.into(),
            width_px,
            height_px,
            caption: caption.into(),
            visual_flag: domain.has_natural_images(),
        }
    }

    /// Orientation-free aspect ratio `max(w, h) / min(w, h)`.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (f64::from(self.width_px), f64::from(self.height_px));
        w.max(h) / w.min(h)
    }

    fn validate(&self) -> Result<(), String> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(format!("screenshot {:?} has a zero dimension", self.id));
        }
        if self.visual_flag != self.domain.has_natural_images() {
            return Err(format!(
                "screenshot {:?}: visual_flag={} disagrees with domain {:?}",
                self.id, self.visual_flag, self.domain
            ));
        }
        Ok(())
    }
}

/// Query text paired with the screenshot that answers it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub struct Q2STuple {
    pub query: String,
    pub target_id: String,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

impl Q2STuple {
    /// Stable key used to derive per-sample random streams.
    pub fn sample_key(&self) -> String {
        format!("q2s\u{1f}{}\u{1f}{}", self.target_id, self.query)
    }

    fn validate(&self) -> Result<(), String> {
        if self.hard_negative_ids.contains(&self.target_id) {
            return Err(format!("target {:?} listed as its own hard negative", self.target_id));
        }
        check_unique(&self.hard_negative_ids)
    }
}

/// Source screenshot plus a conditioned query, answered by a target screenshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SQ2STriplet {
    pub source_id: String,
    pub query: String,
    pub target_id: String,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

impl SQ2STriplet {
    pub fn sample_key(&self) -> String {
        format!(
            "sq2s\u{1f}{}\u{1f}{}\u{1f}{}",
            self.source_id, self.target_id, self.query
        )
    }

    fn validate(&self) -> Result<(), String> {
        if self.source_id == self.target_id {
            return Err(format!("source and target are both {:?}", self.source_id));
        }
        if self.hard_negative_ids.contains(&self.target_id)
            || self.hard_negative_ids.contains(&self.source_id)
        {
            return Err("source or target listed as a hard negative".into());
        }
        check_unique(&self.hard_negative_ids)
    }
}

fn check_unique(ids: &[String]) -> Result<(), String> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(format!("duplicate hard negative {id:?}"));
        }
    }
    Ok(())
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Screenshot(Screenshot),
    Q2s(Q2STuple),
    Sq2s(SQ2STriplet),
}

/// Validated, immutable-after-load collection of screenshots and samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    screenshots: Vec<Screenshot>,
    positions: HashMap<String, usize>,
    q2s: Vec<Q2STuple>,
    sq2s: Vec<SQ2STriplet>,
}

impl Corpus {
    /// Assembles and validates a corpus from records in file order.
    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        // (line, sample) pairs whose references are checked after all screenshots are known
        let mut pending_refs: Vec<(usize, Vec<String>)> = Vec::new();
        for (i, record) in records.into_iter().enumerate() {
            let line = i + 1;
            let invalid = |message: String| CorpusError::Invalid { line, message };
            match record {
                Record::Screenshot(s) => {
                    s.validate().map_err(invalid)?;
                    if corpus.positions.contains_key(&s.id) {
                        return Err(CorpusError::Duplicate { line, id: s.id });
                    }
                    corpus.positions.insert(s.id.clone(), corpus.screenshots.len());
                    corpus.screenshots.push(s);
                }
                Record::Q2s(t) => {
                    t.validate().map_err(invalid)?;
                    let mut refs = vec![t.target_id.clone()];
                    refs.extend(t.hard_negative_ids.iter().cloned());
                    pending_refs.push((line, refs));
                    corpus.q2s.push(t);
                }
                Record::Sq2s(t) => {
                    t.validate().map_err(invalid)?;
                    let mut refs = vec![t.source_id.clone(), t.target_id.clone()];
                    refs.extend(t.hard_negative_ids.iter().cloned());
                    pending_refs.push((line, refs));
                    corpus.sq2s.push(t);
                }
            }
        }
        for (line, refs) in pending_refs {
            if let Some(id) = refs.into_iter().find(|id| !corpus.positions.contains_key(id)) {
                return Err(CorpusError::Dangling { line, id });
            }
        }
        Ok(corpus)
    }

    /// Records in canonical order: screenshots, then q2s, then sq2s.
    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.screenshots
            .iter()
            .cloned()
            .map(Record::Screenshot)
            .chain(self.q2s.iter().cloned().map(Record::Q2s))
            .chain(self.sq2s.iter().cloned().map(Record::Sq2s))
    }

    pub fn len(&self) -> usize {
        self.screenshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.screenshots.is_empty()
    }

    pub fn screenshots(&self) -> &[Screenshot] {
        &self.screenshots
    }

    pub fn q2s(&self) -> &[Q2STuple] {
        &self.q2s
    }

    pub fn sq2s(&self) -> &[SQ2STriplet] {
        &self.sq2s
    }

    pub fn get(&self, id: &str) -> Option<&Screenshot> {
        self.positions.get(id).map(|&i| &self.screenshots[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Replaces the sample lists, re-validating references.
    pub fn with_samples(
        &self,
        q2s: Vec<Q2STuple>,
        sq2s: Vec<SQ2STriplet>,
    ) -> Result<Self, CorpusError> {
        let records = self
            .screenshots
            .iter()
            .cloned()
            .map(Record::Screenshot)
            .chain(q2s.into_iter().map(Record::Q2s))
            .chain(sq2s.into_iter().map(Record::Sq2s));
        Corpus::from_records(records)
    }

    /// Keeps only screenshots whose id is in `keep`. Samples whose positives
    /// were dropped are removed; dropped ids are pruned from hard negatives.
    pub fn restrict_to(&self, keep: &HashSet<&str>) -> Corpus {
        let screenshots: Vec<Screenshot> = self
            .screenshots
            .iter()
            .filter(|s| keep.contains(s.id.as_str()))
            .cloned()
            .collect();
        let prune = |ids: &[String]| -> Vec<String> {
            ids.iter().filter(|id| keep.contains(id.as_str())).cloned().collect()
        };
        let q2s = self
            .q2s
            .iter()
            .filter(|t| keep.contains(t.target_id.as_str()))
            .map(|t| Q2STuple {
                hard_negative_ids: prune(&t.hard_negative_ids),
                ..t.clone()
            })
            .collect();
        let sq2s = self
            .sq2s
            .iter()
            .filter(|t| keep.contains(t.source_id.as_str()) && keep.contains(t.target_id.as_str()))
            .map(|t| SQ2STriplet {
                hard_negative_ids: prune(&t.hard_negative_ids),
                ..t.clone()
            })
            .collect();
        let positions = screenshots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Corpus {
            screenshots,
            positions,
            q2s,
            sq2s,
        }
    }

    /// Serializes to the line-record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in self.records() {
            out.push_str(&serde_json::to_string(&record).expect("records always serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses the line-record format. Blank lines are skipped but still counted.
    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut line_numbers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
            line_numbers.push(i + 1);
        }
        // from_records numbers records densely; map back to file lines
        Corpus::from_records(records).map_err(|e| remap_line(e, &line_numbers))
    }
}

fn remap_line(err: CorpusError, lines: &[usize]) -> CorpusError {
    let fix = |l: usize| lines.get(l - 1).copied().unwrap_or(l);
    match err {
        CorpusError::Invalid { line, message } => CorpusError::Invalid {
            line: fix(line),
            message,
        },
        CorpusError::Dangling { line, id } => CorpusError::Dangling { line: fix(line), id },
        CorpusError::Duplicate { line, id } => CorpusError::Duplicate { line: fix(line), id },
        other => other,
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Corpus::from_jsonl(&text)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    fsio::write_atomic(path, corpus.to_jsonl().as_bytes()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Collection-time quality filter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_aspect_ratio: f64,
    pub min_caption_chars: usize,
    /// Lowercase keywords; a caption containing any of them is rejected.
    pub blocklist: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_aspect_ratio: 9.0,
            min_caption_chars: 100,
            blocklist: Vec::new(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_aspect_ratio > 0.0) {
            return Err(format!("max_aspect_ratio must be > 0, got {}", self.max_aspect_ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Aspect,
    CaptionLength,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Screenshot>,
    pub rejected: Vec<(Screenshot, RejectReason)>,
}

/// First failing rule, checked in the order aspect, caption length, keyword.
pub fn rejection_reason(s: &Screenshot, cfg: &FilterConfig) -> Option<RejectReason> {
    if s.aspect_ratio() > cfg.max_aspect_ratio {
        return Some(RejectReason::Aspect);
    }
    if s.caption.chars().count() < cfg.min_caption_chars {
        return Some(RejectReason::CaptionLength);
    }
    if !cfg.blocklist.is_empty() {
        let lowered = s.caption.to_lowercase();
        if cfg
            .blocklist
            .iter()
            .any(|k| !k.is_empty() && lowered.contains(&k.to_lowercase()))
        {
            return Some(RejectReason::Keyword);
        }
    }
    None
}

/// Partitions `items` into kept and rejected, preserving input order in both.
pub fn filter_screenshots(items: &[Screenshot], cfg: &FilterConfig) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for s in items {
        match rejection_reason(s, cfg) {
            None => out.kept.push(s.clone()),
            Some(reason) => out.rejected.push((s.clone(), reason)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shot(id: &str, w: u32, h: u32, caption_len: usize) -> Screenshot {
        Screenshot::new(id, DomainCategory::News, format!("{id}.png"), w, h, "a".repeat(caption_len))
    }

    #[test]
    fn domain_has_seven_members_and_three_visual() {
        assert_eq!(DomainCategory::ALL.len(), 7);
        let visual: Vec<_> = DomainCategory::ALL
            .iter()
            .filter(|d| d.has_natural_images())
            .collect();
        assert_eq!(visual.len(), 3);
    }

    #[test]
    fn aspect_rule_rejects_ratio_ten() {
        let out = filter_screenshots(&[shot("a", 100, 1000, 200)], &FilterConfig::default());
        assert!(out.kept.is_empty());
        assert_eq!(out.rejected[0].1, RejectReason::Aspect);
    }

    #[test]
    fn caption_boundary() {
        let cfg = FilterConfig::default();
        let out = filter_screenshots(&[shot("a", 500, 500, 100), shot("b", 500, 500, 99)], &cfg);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].id, "a");
        assert_eq!(out.rejected[0].1, RejectReason::CaptionLength);
    }

    #[test]
    fn caption_length_counts_chars_not_bytes() {
        let mut s = shot("a", 10, 10, 0);
        s.caption = "é".repeat(100);
        assert_eq!(rejection_reason(&s, &FilterConfig::default()), None);
    }

    #[test]
    fn keyword_match_is_case_insensitive_and_ordered_last() {
        let cfg = FilterConfig {
            blocklist: vec!["forbidden".into()],
            ..Default::default()
        };
        let mut s = shot("a", 10, 10, 0);
        s.caption = format!("{} ForBidden", "x".repeat(120));
        assert_eq!(rejection_reason(&s, &cfg), Some(RejectReason::Keyword));
        s.width_px = 1000;
        assert_eq!(rejection_reason(&s, &cfg), Some(RejectReason::Aspect));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = Corpus::from_jsonl("").unwrap();
        assert!(c.is_empty());
        assert!(c.q2s().is_empty() && c.sq2s().is_empty());
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&Record::Screenshot(shot("s1", 10, 10, 5))).unwrap(),
            r#"{"kind":"q2s","query":"q","target_id":"x9","hard_negative_ids":[]}"#
        );
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::Dangling { id, line }) => {
                assert_eq!(id, "x9");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let rec = serde_json::to_string(&Record::Screenshot(shot("s1", 10, 10, 5))).unwrap();
        let err = Corpus::from_jsonl(&format!("{rec}\n{rec}\n")).unwrap_err();
        assert!(matches!(err, CorpusError::Duplicate { line: 2, .. }));
    }

    #[test]
    fn parse_error_reports_line() {
        let rec = serde_json::to_string(&Record::Screenshot(shot("s1", 10, 10, 5))).unwrap();
        let err = Corpus::from_jsonl(&format!("{rec}\n\n{{not json\n")).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }));
    }

    #[test]
    fn inconsistent_visual_flag_rejected() {
        let mut s = shot("s1", 10, 10, 5);
        s.visual_flag = false;
        let err = Corpus::from_records([Record::Screenshot(s)]).unwrap_err();
        assert!(matches!(err, CorpusError::Invalid { .. }));
    }

    #[test]
    fn sq2s_source_equal_target_rejected() {
        let recs = vec![
            Record::Screenshot(shot("s1", 10, 10, 5)),
            Record::Sq2s(SQ2STriplet {
                source_id: "s1".into(),
                query: "q".into(),
                target_id: "s1".into(),
                hard_negative_ids: vec![],
            }),
        ];
        assert!(Corpus::from_records(recs).is_err());
    }

    #[test]
    fn forward_references_resolve() {
        let recs = vec![
            Record::Q2s(Q2STuple {
                query: "q".into(),
                target_id: "s1".into(),
                hard_negative_ids: vec![],
            }),
            Record::Screenshot(shot("s1", 10, 10, 5)),
        ];
        let c = Corpus::from_records(recs).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.q2s().len(), 1);
    }

    #[test]
    fn save_to_missing_directory_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let target = blocker.join("corpus.jsonl");
        let err = save_corpus(&Corpus::default(), &target).unwrap_err();
        assert!(err.to_string().contains("corpus.jsonl"), "{err}");
    }

    #[test]
    fn restrict_drops_samples_and_prunes_negatives() {
        let recs = vec![
            Record::Screenshot(shot("a", 10, 10, 5)),
            Record::Screenshot(shot("b", 10, 10, 5)),
            Record::Screenshot(shot("c", 10, 10, 5)),
            Record::Q2s(Q2STuple {
                query: "q".into(),
                target_id: "a".into(),
                hard_negative_ids: vec!["b".into(), "c".into()],
            }),
            Record::Q2s(Q2STuple {
                query: "r".into(),
                target_id: "c".into(),
                hard_negative_ids: vec![],
            }),
        ];
        let c = Corpus::from_records(recs).unwrap();
        let keep: HashSet<&str> = ["a", "b"].into_iter().collect();
        let r = c.restrict_to(&keep);
        assert_eq!(r.len(), 2);
        assert_eq!(r.q2s().len(), 1);
        assert_eq!(r.q2s()[0].hard_negative_ids, vec!["b".to_string()]);
        assert!(r.get("c").is_none());
    }

    fn arb_screenshot() -> impl Strategy<Value = Screenshot> {
        (1u32..5000, 1u32..5000, "[a-zA-Z ]{0,150}", 0usize..7).prop_map(|(w, h, cap, d)| {
            Screenshot::new("x", DomainCategory::ALL[d], "img", w, h, cap)
        })
    }

    proptest! {
        #[test]
        fn filter_partitions_input(items in prop::collection::vec(arb_screenshot(), 0..30)) {
            let out = filter_screenshots(&items, &FilterConfig::default());
            prop_assert_eq!(out.kept.len() + out.rejected.len(), items.len());
        }

        #[test]
        fn aspect_decision_is_orientation_free(s in arb_screenshot()) {
            let cfg = FilterConfig::default();
            let mut flipped = s.clone();
            std::mem::swap(&mut flipped.width_px, &mut flipped.height_px);
            prop_assert_eq!(rejection_reason(&s, &cfg), rejection_reason(&flipped, &cfg));
        }

        #[test]
        fn tightening_never_grows_kept(
            items in prop::collection::vec(arb_screenshot(), 0..30),
            ratio in 1.0f64..12.0,
            shrink in 0.0f64..1.0,
            min_chars in 0usize..120,
            grow in 0usize..50,
        ) {
            let loose = FilterConfig { max_aspect_ratio: ratio, min_caption_chars: min_chars, ..Default::default() };
            let tight = FilterConfig {
                max_aspect_ratio: 1.0 + (ratio - 1.0) * shrink,
                min_caption_chars: min_chars + grow,
                ..Default::default()
            };
            let loose_kept = filter_screenshots(&items, &loose).kept.len();
            let tight_kept = filter_screenshots(&items, &tight).kept.len();
            prop_assert!(tight_kept <= loose_kept);
        }
    }
}
