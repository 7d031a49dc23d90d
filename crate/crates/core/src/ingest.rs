//! Streaming ingestion of GitHub Archive event logs.
//!
//! GHArchive publishes one gzip-compressed file per hour; every line is an
//! independent JSON event. [`EventStream`] reads such a file (or a plain-text
//! fixture) line by line and yields the issue events that carry enough fields
//! to become an [`IssueRecord`]. A malformed line is counted and skipped; only
//! a broken compression container aborts the stream.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime, Utc};
use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Event type of issue events in the archive.
pub const ISSUES_EVENT: &str = "IssuesEvent";

/// Issue actions whose events are kept; everything else counts as a
/// wrong-type skip.
pub const ACCEPTED_ACTIONS: [&str; 2] = ["opened", "labeled"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{source_name}: unreadable stream near byte offset {offset}: {cause}")]
    Stream {
        source_name: String,
        offset: u64,
        #[source]
        cause: io::Error,
    },
    #[error("cannot open {}: {cause}", path.display())]
    Open {
        path: PathBuf,
        #[source]
        cause: io::Error,
    },
    #[error("invalid date window: start {start} is after end {end}")]
    InvalidWindow {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("{source_name}:{line}: invalid issue record: {cause}")]
    BadRecord {
        source_name: String,
        line: u64,
        #[source]
        cause: serde_json::Error,
    },
    #[error("writing issue records: {0}")]
    Write(#[from] io::Error),
}

/// One line of an archive file, before any JSON decoding.
#[derive(Debug, Clone, Copy)]
pub struct RawEventLine<'a> {
    pub payload: &'a [u8],
    pub source: &'a str,
    /// 1-based.
    pub line_no: u64,
}

/// An issue event extracted from the archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRecord {
    #[serde(rename = "repo")]
    pub repo_name: String,
    pub issue_id: u64,
    pub title: String,
    pub body: String,
    pub labels: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub action: String,
}

/// Identity of an issue across datasets: repository plus issue id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IssueKey {
    pub repo: String,
    pub issue_id: u64,
}

impl IssueRecord {
    pub fn key(&self) -> IssueKey {
        IssueKey {
            repo: self.repo_name.clone(),
            issue_id: self.issue_id,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub lines_read: u64,
    pub records_emitted: u64,
    pub lines_skipped_malformed: u64,
    pub events_skipped_wrong_type: u64,
}

impl IngestStats {
    pub fn is_balanced(&self) -> bool {
        self.lines_read
            == self.records_emitted + self.lines_skipped_malformed + self.events_skipped_wrong_type
    }

    pub fn merge(&mut self, other: &IngestStats) {
        self.lines_read += other.lines_read;
        self.records_emitted += other.records_emitted;
        self.lines_skipped_malformed += other.lines_skipped_malformed;
        self.events_skipped_wrong_type += other.events_skipped_wrong_type;
    }
}

/// What became of a single line.
#[derive(Debug, Clone, PartialEq)]
pub enum LineOutcome {
    Record(IssueRecord),
    WrongType,
    Malformed(&'static str),
}

#[derive(Deserialize)]
struct Envelope<'a> {
    #[serde(rename = "type")]
    kind: Option<String>,
    repo: Option<RepoRef>,
    #[serde(borrow)]
    payload: Option<&'a RawValue>,
}

#[derive(Deserialize)]
struct RepoRef {
    name: Option<String>,
}

#[derive(Deserialize)]
struct IssuesPayload {
    action: Option<String>,
    issue: Option<IssueFields>,
}

#[derive(Deserialize)]
struct IssueFields {
    id: Option<u64>,
    number: Option<u64>,
    title: Option<String>,
    body: Option<String>,
    #[serde(default)]
    labels: Option<Vec<LabelRef>>,
    created_at: Option<String>,
}

#[derive(Deserialize)]
struct LabelRef {
    name: Option<String>,
}

fn valid_repo_name(name: &str) -> bool {
    let mut parts = name.split('/');
    matches!(
        (parts.next(), parts.next(), parts.next()),
        (Some(owner), Some(repo), None) if !owner.is_empty() && !repo.is_empty()
    )
}

/// Parse an archive timestamp. RFC 3339 is the archive's format; a timestamp
/// without an offset is taken as UTC.
pub fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(text) {
        return Some(ts.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
        .map(|naive| naive.and_utc())
}

/// Classify one raw line.
pub fn parse_event_line(line: &RawEventLine<'_>) -> LineOutcome {
    let envelope: Envelope<'_> = match serde_json::from_slice(line.payload) {
        Ok(e) => e,
        Err(_) => return LineOutcome::Malformed("not a JSON document"),
    };
    match envelope.kind.as_deref() {
        Some(ISSUES_EVENT) => {}
        Some(_) => return LineOutcome::WrongType,
        None => return LineOutcome::Malformed("missing event type"),
    }
    let Some(raw_payload) = envelope.payload else {
        return LineOutcome::Malformed("missing payload");
    };
    let payload: IssuesPayload = match serde_json::from_str(raw_payload.get()) {
        Ok(p) => p,
        Err(_) => return LineOutcome::Malformed("payload does not match the issues event shape"),
    };
    let Some(action) = payload.action else {
        return LineOutcome::Malformed("missing payload.action");
    };
    if !ACCEPTED_ACTIONS.contains(&action.as_str()) {
        return LineOutcome::WrongType;
    }
    let Some(issue) = payload.issue else {
        return LineOutcome::Malformed("missing payload.issue");
    };
    let Some(repo_name) = envelope.repo.and_then(|r| r.name) else {
        return LineOutcome::Malformed("missing repo.name");
    };
    if !valid_repo_name(&repo_name) {
        return LineOutcome::Malformed("repo.name is not owner/name");
    }
    let Some(issue_id) = issue.id.or(issue.number) else {
        return LineOutcome::Malformed("missing issue id");
    };
    let Some(title) = issue.title else {
        return LineOutcome::Malformed("missing issue title");
    };
    let Some(created_at) = issue.created_at.as_deref().and_then(parse_timestamp) else {
        return LineOutcome::Malformed("missing or invalid issue created_at");
    };
    let labels = issue
        .labels
        .unwrap_or_default()
        .into_iter()
        .filter_map(|l| l.name)
        .filter(|name| !name.is_empty())
        .collect();

    LineOutcome::Record(IssueRecord {
        repo_name,
        issue_id,
        title,
        body: issue.body.unwrap_or_default(),
        labels,
        created_at,
        action,
    })
}

struct CountingReader<R> {
    inner: R,
    count: Arc<AtomicU64>,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }
}

/// Lazily parsed issue records from one archive stream.
///
/// Skipped lines produce no items; read [`EventStream::stats`] after the
/// iterator is exhausted for the tallies. A fatal stream error is yielded
/// once, after which the iterator ends.
pub struct EventStream {
    reader: Box<dyn BufRead + Send>,
    source: String,
    consumed: Arc<AtomicU64>,
    line: Vec<u8>,
    line_no: u64,
    stats: IngestStats,
    compressed: bool,
    finished: bool,
}

impl EventStream {
    /// Wrap `reader`, detecting gzip by its magic bytes.
    pub fn new<R: Read + Send + 'static>(
        reader: R,
        source: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let source = source.into();
        let consumed = Arc::new(AtomicU64::new(0));
        let mut buffered = BufReader::new(CountingReader {
            inner: reader,
            count: Arc::clone(&consumed),
        });
        let head = buffered.fill_buf().map_err(|cause| IngestError::Stream {
            source_name: source.clone(),
            offset: 0,
            cause,
        })?;
        let compressed = head.starts_with(&GZIP_MAGIC);
        let reader: Box<dyn BufRead + Send> = if compressed {
            Box::new(BufReader::with_capacity(
                1 << 16,
                MultiGzDecoder::new(buffered),
            ))
        } else {
            Box::new(buffered)
        };
        Ok(Self {
            reader,
            source,
            consumed,
            line: Vec::with_capacity(4096),
            line_no: 0,
            stats: IngestStats::default(),
            compressed,
            finished: false,
        })
    }

    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(|cause| IngestError::Open {
            path: path.to_path_buf(),
            cause,
        })?;
        Self::new(file, path.display().to_string())
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }
}

impl Iterator for EventStream {
    type Item = Result<IssueRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.finished {
            self.line.clear();
            match self.reader.read_until(b'\n', &mut self.line) {
                Ok(0) => {
                    self.finished = true;
                    return None;
                }
                Ok(_) => {}
                Err(cause) => {
                    self.finished = true;
                    return Some(Err(IngestError::Stream {
                        source_name: self.source.clone(),
                        offset: self.consumed.load(Ordering::Relaxed),
                        cause,
                    }));
                }
            }
            while matches!(self.line.last(), Some(b'\n' | b'\r')) {
                self.line.pop();
            }
            self.line_no += 1;
            self.stats.lines_read += 1;
            let raw = RawEventLine {
                payload: &self.line,
                source: &self.source,
                line_no: self.line_no,
            };
            match parse_event_line(&raw) {
                LineOutcome::Record(record) => {
                    self.stats.records_emitted += 1;
                    return Some(Ok(record));
                }
                LineOutcome::WrongType => self.stats.events_skipped_wrong_type += 1,
                LineOutcome::Malformed(reason) => {
                    tracing::trace!(source = %self.source, line = self.line_no, reason, "skipping malformed line");
                    self.stats.lines_skipped_malformed += 1;
                }
            }
        }
        None
    }
}

/// Read a whole stream into memory.
pub fn parse_event_stream<R: Read + Send + 'static>(
    reader: R,
    source: impl Into<String>,
) -> Result<(Vec<IssueRecord>, IngestStats), IngestError> {
    collect(EventStream::new(reader, source)?)
}

pub fn parse_file(path: &Path) -> Result<(Vec<IssueRecord>, IngestStats), IngestError> {
    collect(EventStream::open(path)?)
}

fn collect(mut stream: EventStream) -> Result<(Vec<IssueRecord>, IngestStats), IngestError> {
    let records = stream.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((records, stream.stats()))
}

/// Parse several archive files in parallel, one reader per file. Records are
/// concatenated in the order of `paths`; stats are summed.
pub fn parse_files(paths: &[PathBuf]) -> Result<(Vec<IssueRecord>, IngestStats), IngestError> {
    let per_file: Vec<_> = paths.par_iter().map(|p| parse_file(p)).collect();
    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    for result in per_file {
        let (mut file_records, file_stats) = result?;
        records.append(&mut file_records);
        stats.merge(&file_stats);
    }
    Ok((records, stats))
}

/// Keep the records with `start <= created_at < end`, in input order.
pub fn filter_by_date(
    records: Vec<IssueRecord>,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<Vec<IssueRecord>, IngestError> {
    if start > end {
        return Err(IngestError::InvalidWindow { start, end });
    }
    Ok(records
        .into_iter()
        .filter(|r| start <= r.created_at && r.created_at < end)
        .collect())
}

/// One record per issue. Several events of the same issue (opened, then
/// labeled) collapse into the position of the first; title, body and action
/// come from the last event and labels are the union, in order of first
/// appearance.
pub fn collapse_issues(records: Vec<IssueRecord>) -> Vec<IssueRecord> {
    let mut slot: HashMap<IssueKey, usize> = HashMap::new();
    let mut out: Vec<IssueRecord> = Vec::new();
    for record in records {
        match slot.get(&record.key()) {
            Some(&i) => {
                let kept = &mut out[i];
                for label in record.labels {
                    if !kept.labels.contains(&label) {
                        kept.labels.push(label);
                    }
                }
                kept.title = record.title;
                kept.body = record.body;
                kept.action = record.action;
            }
            None => {
                slot.insert(record.key(), out.len());
                out.push(record);
            }
        }
    }
    out
}

pub fn write_records<W: Write>(mut out: W, records: &[IssueRecord]) -> Result<(), IngestError> {
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read issue records back from JSONL. Unlike archive ingestion, a bad line
/// here is an error: these files are our own output.
pub fn read_records<R: BufRead>(input: R, source: &str) -> Result<Vec<IssueRecord>, IngestError> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|cause| IngestError::Stream {
            source_name: source.to_string(),
            offset: 0,
            cause,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|cause| IngestError::BadRecord {
            source_name: source.to_string(),
            line: idx as u64 + 1,
            cause,
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use flate2::write::GzEncoder;
    use flate2::Compression;

    pub(crate) fn issue_line(repo: &str, id: u64, action: &str, labels: &[&str], created: &str) -> String {
        serde_json::json!({
            "id": "1",
            "type": "IssuesEvent",
            "repo": {"id": 1, "name": repo},
            "payload": {
                "action": action,
                "issue": {
                    "id": id,
                    "number": 7,
                    "title": "Refactor the legacy scheduler",
                    "body": "It has grown hard to maintain.",
                    "labels": labels.iter().map(|l| serde_json::json!({"name": l, "color": "fff"})).collect::<Vec<_>>(),
                    "created_at": created,
                }
            },
            "created_at": created,
        })
        .to_string()
    }

    #[test]
    fn collapse_merges_events_of_one_issue() {
        let text = [
            issue_line("o/a", 1, "opened", &["bug"], "2020-01-01T00:00:00Z"),
            issue_line("o/b", 1, "opened", &[], "2020-01-01T00:00:00Z"),
            issue_line("o/a", 1, "labeled", &["bug", "tech-debt"], "2020-01-01T00:00:00Z"),
            issue_line("o/a", 2, "labeled", &["test"], "2020-01-02T00:00:00Z"),
        ]
        .join("\n");
        let (records, _) = parse_str(&text);
        let merged = collapse_issues(records);
        assert_eq!(merged.len(), 3);
        assert_eq!(merged[0].key(), IssueKey { repo: "o/a".into(), issue_id: 1 });
        assert_eq!(merged[0].labels, ["bug", "tech-debt"]);
        assert_eq!(merged[0].action, "labeled");
        assert_eq!(merged[1].repo_name, "o/b");
        assert_eq!(collapse_issues(merged.clone()), merged);
    }

    fn parse_str(text: &str) -> (Vec<IssueRecord>, IngestStats) {
        parse_event_stream(io::Cursor::new(text.as_bytes().to_vec()), "mem").unwrap()
    }

    #[test]
    fn three_line_mix_counts() {
        let valid = issue_line("va/gov", 1, "opened", &[], "2020-01-01T00:00:00Z");
        let push = r#"{"type":"PushEvent","repo":{"name":"a/b"},"payload":{"size":1}}"#;
        let truncated = &valid[..valid.len() / 2];
        let (records, stats) = parse_str(&format!("{valid}\n{push}\n{truncated}\n"));
        assert_eq!(records.len(), 1);
        assert_eq!(
            (stats.lines_read, stats.records_emitted, stats.lines_skipped_malformed, stats.events_skipped_wrong_type),
            (3, 1, 1, 1)
        );
    }

    #[test]
    fn field_mapping() {
        let line = issue_line("va/gov", 42, "labeled", &["tech-debt"], "2021-03-04T05:06:07Z");
        let (records, _) = parse_str(&line);
        assert_eq!(
            records,
            vec![IssueRecord {
                repo_name: "va/gov".into(),
                issue_id: 42,
                title: "Refactor the legacy scheduler".into(),
                body: "It has grown hard to maintain.".into(),
                labels: vec!["tech-debt".into()],
                created_at: Utc.with_ymd_and_hms(2021, 3, 4, 5, 6, 7).unwrap(),
                action: "labeled".into(),
            }]
        );
    }

    #[test]
    fn empty_stream() {
        let (records, stats) = parse_str("");
        assert!(records.is_empty());
        assert_eq!(stats, IngestStats::default());
    }

    #[test]
    fn other_actions_are_wrong_type() {
        let line = issue_line("a/b", 1, "closed", &[], "2020-01-01T00:00:00Z");
        let (records, stats) = parse_str(&line);
        assert!(records.is_empty());
        assert_eq!(stats.events_skipped_wrong_type, 1);
    }

    #[test]
    fn missing_body_becomes_empty() {
        let line = r#"{"type":"IssuesEvent","repo":{"name":"a/b"},"payload":{"action":"opened","issue":{"id":3,"title":"t","created_at":"2020-01-01T00:00:00Z"}}}"#;
        let (records, _) = parse_str(line);
        assert_eq!(records[0].body, "");
        let null_body = line.replace(r#""title":"t""#, r#""title":"t","body":null"#);
        let (records, _) = parse_str(&null_body);
        assert_eq!(records[0].body, "");
    }

    #[test]
    fn bad_repo_names_are_malformed() {
        for repo in ["", "noslash", "a/b/c", "/b", "a/"] {
            let line = issue_line(repo, 1, "opened", &[], "2020-01-01T00:00:00Z");
            let (records, stats) = parse_str(&line);
            assert!(records.is_empty(), "{repo}");
            assert_eq!(stats.lines_skipped_malformed, 1);
        }
    }

    #[test]
    fn naive_timestamps_are_utc() {
        assert_eq!(
            parse_timestamp("2015-01-01T00:00:00"),
            Some(Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap())
        );
        assert_eq!(
            parse_timestamp("2015-01-01T02:00:00+02:00"),
            Some(Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap())
        );
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn empty_label_names_dropped() {
        let line = issue_line("a/b", 1, "opened", &["", "bug"], "2020-01-01T00:00:00Z");
        let (records, _) = parse_str(&line);
        assert_eq!(records[0].labels, vec!["bug".to_string()]);
    }

    #[test]
    fn gzip_and_plain_agree() {
        let text = format!(
            "{}\n{}\nnot json\n",
            issue_line("a/b", 1, "opened", &["td"], "2020-01-01T00:00:00Z"),
            issue_line("c/d", 2, "labeled", &["test"], "2021-01-01T00:00:00Z"),
        );
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(text.as_bytes()).unwrap();
        let gz = enc.finish().unwrap();
        let stream = EventStream::new(io::Cursor::new(gz.clone()), "gz").unwrap();
        assert!(stream.is_compressed());
        let from_gz = parse_event_stream(io::Cursor::new(gz), "gz").unwrap();
        assert_eq!(from_gz, parse_str(&text));
    }

    #[test]
    fn corrupt_gzip_is_fatal_with_offset() {
        let text = issue_line("a/b", 1, "opened", &["td"], "2020-01-01T00:00:00Z").repeat(200);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(text.as_bytes()).unwrap();
        let mut gz = enc.finish().unwrap();
        gz.truncate(gz.len() / 2);
        let err = parse_event_stream(io::Cursor::new(gz), "hour-7.json.gz").unwrap_err();
        match &err {
            IngestError::Stream { source_name, offset, .. } => {
                assert_eq!(source_name, "hour-7.json.gz");
                assert!(*offset > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("hour-7.json.gz"));
    }

    #[test]
    fn date_window_is_half_open() {
        let mk = |y, m, d| {
            let mut r = parse_str(&issue_line("a/b", 1, "opened", &[], "2020-01-01T00:00:00Z")).0.remove(0);
            r.created_at = Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap();
            r
        };
        let records = vec![mk(2014, 12, 31), mk(2015, 1, 1), mk(2024, 5, 24), mk(2024, 5, 25)];
        let start = Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap();
        let end = Utc.with_ymd_and_hms(2024, 5, 25, 0, 0, 0).unwrap();
        let kept = filter_by_date(records.clone(), start, end).unwrap();
        assert_eq!(kept, records[1..3].to_vec());
        assert!(filter_by_date(records.clone(), start, start).unwrap().is_empty());
        assert!(matches!(
            filter_by_date(records, end, start),
            Err(IngestError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip_uses_documented_field_names() {
        let (records, _) = parse_str(&issue_line("va/gov", 9, "opened", &["td"], "2020-01-01T00:00:00Z"));
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        let mut keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["action", "body", "created_at", "issue_id", "labels", "repo", "title"]);
        assert_eq!(read_records(io::Cursor::new(buf), "mem").unwrap(), records);
    }
}
