//! Synthetic GitHub Archive fixture with a fixed label composition.
//!
//! Every count below is fixed by construction; the seed only changes the
//! wording, dates, line order and which texts are duplicated. Shared
//! repositories are `org00/proj00` .. `org39/proj39`; each binary task also
//! has a `bigco/<task>-hub` repository holding the first quarter of its
//! clean positives and no negatives, so that it is the one withheld as OOD.

use std::io::{self, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::artifact::write_atomic;
use crate::labeling::Category;
use crate::seed;

/// Lines of event types other than IssuesEvent.
pub const NON_ISSUE_EVENTS: usize = 400;
/// IssuesEvent lines with action `closed`.
pub const CLOSED_EVENTS: usize = 200;
/// Lines that fail to parse: half broken JSON, half missing the issue.
pub const MALFORMED_LINES: usize = 100;
/// TD-labelled issues created in 2014, outside the 2015..2025 window.
pub const OUT_OF_WINDOW: usize = 100;

/// Issues with a TD label and one category label, per category.
pub const GROUND_TRUTH_PER_CATEGORY: usize = 10;
/// Of those, too short to survive cleaning, per category.
pub const GROUND_TRUTH_SHORT_PER_CATEGORY: usize = 1;

/// Issues with only a TD label.
pub const TD_ONLY: usize = 1000;
/// TD-only issues that arrive as `opened` without labels, then `labeled`.
pub const TD_TWO_EVENT: usize = 100;
pub const TD_SHORT: usize = 50;
pub const TD_DUPLICATES: usize = 50;

/// Issues with exactly one category label (and no TD label).
pub const CATEGORY_ONLY: [(Category, usize); 13] = [
    (Category::Architecture, 200),
    (Category::Build, 400),
    (Category::Code, 500),
    (Category::Defect, 300),
    (Category::Design, 450),
    (Category::Documentation, 600),
    (Category::Infrastructure, 180),
    (Category::People, 120),
    (Category::Process, 160),
    (Category::Requirement, 140),
    (Category::Service, 260),
    (Category::Test, 700),
    (Category::Automation, 150),
];
pub const CATEGORY_SHORT_EACH: usize = 10;
pub const CATEGORY_DUPLICATES_EACH: usize = 10;
/// Issues labelled both build and test, all clean, in `shared/build-test`.
pub const BUILD_AND_TEST: usize = 50;

/// Issues matching neither pattern.
pub const RESIDUAL: usize = 3760;
pub const RESIDUAL_SHORT: usize = 60;

pub const TOTAL_LINES: usize = 10_000;
pub const SHARED_REPOS: usize = 40;

pub fn window() -> (DateTime<Utc>, DateTime<Utc>) {
    (
        Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap(),
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
    )
}

pub fn hub_repo(task: &str) -> String {
    format!("bigco/{task}-hub")
}

const TD_LABELS: &[&str] = &["tech-debt", "technical debt", "Tech_debt", "TD", "debt", "techdebt", "TechnicalDebt"];
const RESIDUAL_LABELS: &[&str] = &["bug", "enhancement", "question", "good first issue", "help wanted", "wontfix", "feature"];

fn category_labels(c: Category) -> &'static [&'static str] {
    use Category::*;
    match c {
        Architecture => &["architecture", "area/architectural", "Architecture"],
        Build => &["build", "area/build", "Build"],
        Code => &["code", "type: code", "Code"],
        Defect => &["defect", "type: defect"],
        Design => &["design", "needs design", "Design"],
        Documentation => &["documentation", "doc", "type: documentation"],
        Infrastructure => &["infrastructure", "area/infrastructure"],
        People => &["people", "team: people"],
        Process => &["process", "dev process"],
        Requirement => &["requirement", "new requirement"],
        Service => &["service", "area/service"],
        Test => &["test", "testing", "area/test"],
        Automation => &["automation", "ci automation"],
    }
}

fn topic_words(c: Option<Category>) -> &'static [&'static str] {
    use Category::*;
    match c {
        None => &["workaround", "hack", "cleanup", "refactor", "temporary", "legacy", "shortcut", "rewrite"],
        Some(Architecture) => &["layering", "coupling", "monolith", "boundaries", "modules", "dependency graph"],
        Some(Build) => &["compile", "makefile", "gradle", "linker", "toolchain", "bundler"],
        Some(Code) => &["duplication", "naming", "long method", "dead code", "complexity", "readability"],
        Some(Defect) => &["crash", "regression", "null pointer", "race", "corruption", "wrong result"],
        Some(Design) => &["interface", "abstraction", "pattern", "api shape", "responsibility", "cohesion"],
        Some(Documentation) => &["readme", "docstring", "guide", "tutorial", "reference page", "changelog"],
        Some(Infrastructure) => &["cluster", "terraform", "servers", "network", "provisioning", "storage"],
        Some(People) => &["onboarding", "ownership", "knowledge", "bus factor", "mentoring", "handover"],
        Some(Process) => &["review", "release cadence", "triage", "workflow", "branching", "approval"],
        Some(Requirement) => &["spec", "acceptance", "stakeholder", "scope", "user story", "constraint"],
        Some(Service) => &["endpoint", "latency", "microservice", "timeout", "gateway", "availability"],
        Some(Test) => &["coverage", "flaky", "unit tests", "fixtures", "mocking", "assertions"],
        Some(Automation) => &["pipeline", "cron", "bot", "scripting", "ci job", "deployment script"],
    }
}

const FILLER: &[&str] = &[
    "we should look at this soon",
    "this keeps coming up in reviews",
    "see the discussion in the last sprint",
    "happy to help with a patch",
    "not urgent but annoying",
    "reported by several users",
];

struct Builder {
    rng: ChaCha8Rng,
    next_id: u64,
    shared_cursor: usize,
    lines: Vec<String>,
}

#[derive(Clone)]
struct Issue {
    repo: String,
    id: u64,
    title: String,
    body: String,
    labels: Vec<String>,
    created: DateTime<Utc>,
}

impl Builder {
    fn id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn shared_repo(&mut self) -> String {
        let i = self.shared_cursor % SHARED_REPOS;
        self.shared_cursor += 1;
        format!("org{i:02}/proj{i:02}")
    }

    fn date(&mut self) -> DateTime<Utc> {
        let (start, _) = window();
        start + Duration::minutes(self.rng.random_range(0..10 * 365 * 24 * 60))
    }

    fn long_text(&mut self, topic: Option<Category>, id: u64) -> (String, String) {
        let words = topic_words(topic);
        let a = *words.choose(&mut self.rng).unwrap();
        let b = *words.choose(&mut self.rng).unwrap();
        let filler = *FILLER.choose(&mut self.rng).unwrap();
        let title = format!("Issue {id}: {a} problem");
        let mut body = format!("The {b} part needs attention, {filler}.");
        match self.rng.random_range(0..4) {
            0 => body.push_str(" Details at https://example.org/t/1234 for reference."),
            1 => body.push_str(" Thanks! 🚀"),
            _ => {}
        }
        (title, body)
    }

    fn short_text(&mut self) -> (String, String) {
        ("Fix it".to_string(), "ok 👍".to_string())
    }

    fn labels(&mut self, topic: Option<Category>, td: bool) -> Vec<String> {
        let mut out = Vec::new();
        if td {
            out.push(TD_LABELS.choose(&mut self.rng).unwrap().to_string());
        }
        if let Some(c) = topic {
            out.push(category_labels(c).choose(&mut self.rng).unwrap().to_string());
        }
        if self.rng.random_bool(0.3) {
            out.push(RESIDUAL_LABELS.choose(&mut self.rng).unwrap().to_string());
        }
        out
    }

    fn emit(&mut self, issue: &Issue, action: &str, labels: &[String]) {
        let line = json!({
            "id": self.rng.random::<u32>().to_string(),
            "type": "IssuesEvent",
            "actor": {"login": "someone"},
            "repo": {"name": issue.repo},
            "payload": {
                "action": action,
                "issue": {
                    "id": issue.id,
                    "number": issue.id % 10_000,
                    "title": issue.title,
                    "body": issue.body,
                    "labels": labels.iter().map(|l| json!({"name": l, "color": "ededed"})).collect::<Vec<_>>(),
                    "created_at": issue.created.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                }
            },
            "created_at": issue.created.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        });
        self.lines.push(line.to_string());
    }

    fn issue(&mut self, repo: String, topic: Option<Category>, td: bool, short: bool) -> Issue {
        let id = self.id();
        let (title, body) = if short { self.short_text() } else { self.long_text(topic, id) };
        let labels = self.labels(topic, td);
        let created = self.date();
        Issue {
            repo,
            id,
            title,
            body,
            labels,
            created,
        }
    }

    /// `clean` long issues, the first quarter in the hub repo, plus short
    /// ones and duplicates of clean ones in shared repos.
    fn positive_group(&mut self, task: &str, topic: Option<Category>, td: bool, clean: usize, short: usize, dupes: usize) -> Vec<Issue> {
        let hub = clean / 4;
        let mut out = Vec::new();
        for i in 0..clean {
            let repo = if i < hub { hub_repo(task) } else { self.shared_repo() };
            out.push(self.issue(repo, topic, td, false));
        }
        for _ in 0..short {
            let repo = self.shared_repo();
            out.push(self.issue(repo, topic, td, true));
        }
        let originals: Vec<Issue> = out[..clean].choose_multiple(&mut self.rng, dupes).cloned().collect();
        for original in originals {
            let id = self.id();
            let labels = self.labels(topic, td);
            out.push(Issue {
                id,
                labels,
                ..original
            });
        }
        out
    }
}

/// The fixture's event lines, in file order.
pub fn fixture_lines(root_seed: u64) -> Vec<String> {
    let mut b = Builder {
        rng: seed::rng(seed::derive(root_seed, "synth")),
        next_id: 100_000,
        shared_cursor: 0,
        lines: Vec::with_capacity(TOTAL_LINES),
    };

    for c in Category::ALL {
        for i in 0..GROUND_TRUTH_PER_CATEGORY {
            let repo = b.shared_repo();
            let mut issue = b.issue(repo, Some(c), true, i < GROUND_TRUTH_SHORT_PER_CATEGORY);
            issue.labels.truncate(2);
            b.emit(&issue, "opened", &issue.labels.clone());
        }
    }

    let td = b.positive_group("td", None, true, TD_ONLY - TD_SHORT - TD_DUPLICATES, TD_SHORT, TD_DUPLICATES);
    for (i, issue) in td.iter().enumerate() {
        if i % (TD_ONLY / TD_TWO_EVENT) == 0 {
            b.emit(issue, "opened", &[]);
            b.emit(issue, "labeled", &issue.labels);
        } else {
            b.emit(issue, "opened", &issue.labels);
        }
    }

    for (c, n) in CATEGORY_ONLY {
        let group = b.positive_group(&c.slug(), Some(c), false, n - CATEGORY_SHORT_EACH - CATEGORY_DUPLICATES_EACH, CATEGORY_SHORT_EACH, CATEGORY_DUPLICATES_EACH);
        for issue in &group {
            b.emit(issue, "opened", &issue.labels);
        }
    }

    for _ in 0..BUILD_AND_TEST {
        let mut issue = b.issue("shared/build-test".into(), Some(Category::Build), false, false);
        issue.labels = vec!["build".into(), "test".into()];
        b.emit(&issue, "opened", &issue.labels);
    }

    for i in 0..RESIDUAL {
        let repo = b.shared_repo();
        let mut issue = b.issue(repo, None, false, i < RESIDUAL_SHORT);
        let (title, body) = if i < RESIDUAL_SHORT {
            b.short_text()
        } else {
            let verb = *["Add", "Support", "Crash when", "Question about", "Typo in"].choose(&mut b.rng).unwrap();
            let thing = *["dark mode", "the login page", "exporting csv", "the settings menu", "large uploads"].choose(&mut b.rng).unwrap();
            (format!("{verb} {thing} ({})", issue.id), format!("{} and more.", FILLER.choose(&mut b.rng).unwrap()))
        };
        issue.title = title;
        issue.body = body;
        issue.labels = RESIDUAL_LABELS.choose_multiple(&mut b.rng, i % 3).map(|s| s.to_string()).collect();
        b.emit(&issue, "opened", &issue.labels);
    }

    for _ in 0..OUT_OF_WINDOW {
        let repo = b.shared_repo();
        let mut issue = b.issue(repo, None, true, false);
        issue.created = Utc.with_ymd_and_hms(2014, 6, 1, 12, 0, 0).unwrap();
        b.emit(&issue, "opened", &issue.labels.clone());
    }

    for _ in 0..CLOSED_EVENTS {
        let repo = b.shared_repo();
        let issue = b.issue(repo, None, true, false);
        b.emit(&issue, "closed", &issue.labels.clone());
    }

    for i in 0..NON_ISSUE_EVENTS {
        let kind = ["PushEvent", "WatchEvent", "ForkEvent", "IssueCommentEvent"][i % 4];
        let line = json!({"id": i.to_string(), "type": kind, "repo": {"name": "org00/proj00"}, "payload": {}});
        b.lines.push(line.to_string());
    }

    for i in 0..MALFORMED_LINES {
        let repo = b.shared_repo();
        let issue = b.issue(repo, None, true, false);
        if i % 2 == 0 {
            b.emit(&issue, "opened", &issue.labels.clone());
            let full = b.lines.pop().unwrap();
            let mut cut = full.len() / 2;
            while !full.is_char_boundary(cut) {
                cut -= 1;
            }
            b.lines.push(full[..cut].to_string());
        } else {
            let line = json!({"type": "IssuesEvent", "repo": {"name": issue.repo}, "payload": {"action": "opened"}});
            b.lines.push(line.to_string());
        }
    }

    let mut lines = b.lines;
    assert_eq!(lines.len(), TOTAL_LINES, "fixture plan does not add up");
    lines.shuffle(&mut seed::rng(seed::derive(root_seed, "synth/order")));
    lines
}

/// Gzipped fixture archive bytes. The gzip header carries no timestamp, so
/// the output depends only on the seed.
pub fn fixture_archive(root_seed: u64) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    for line in fixture_lines(root_seed) {
        enc.write_all(line.as_bytes()).expect("in-memory write");
        enc.write_all(b"\n").expect("in-memory write");
    }
    enc.finish().expect("in-memory write")
}

pub fn write_fixture(path: &Path, root_seed: u64) -> io::Result<()> {
    write_atomic(path, &fixture_archive(root_seed))
}
