//! Interaction logs, per-user histories, and the general/explorer splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no interactions survived loading")]
    EmptyDataset,
    #[error("no user qualifies for the {0} split")]
    EmptySplit(&'static str),
    #[error("invalid split configuration: {0}")]
    InvalidSpec(String),
    #[error("no location for user {0} and no default location configured")]
    MissingLocation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One user-item event. Ids are opaque strings; numeric ids in input files
/// are accepted and kept in their decimal form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    #[serde(deserialize_with = "opaque_id")]
    pub user_id: String,
    #[serde(deserialize_with = "opaque_id")]
    pub item_id: String,
    #[serde(rename = "ts_utc")]
    pub timestamp_utc: i64,
    pub location: String,
}

pub(crate) fn opaque_id<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        I(i64),
        U(u64),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::I(i) => i.to_string(),
        Id::U(u) => u.to_string(),
    })
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, ts: i64, location: impl Into<String>) -> Self {
        Self { user_id: user_id.into(), item_id: item_id.into(), timestamp_utc: ts, location: location.into() }
    }

    fn validate(&self) -> Result<(), String> {
        if self.timestamp_utc <= 0 {
            return Err(format!("timestamp must be positive, got {}", self.timestamp_utc));
        }
        if self.location.trim().is_empty() {
            return Err("location is empty".into());
        }
        if self.user_id.is_empty() || self.item_id.is_empty() {
            return Err("empty user or item id".into());
        }
        Ok(())
    }
}

/// Where MovieLens-style logs get their per-user location from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocationSource {
    pub by_user: HashMap<String, String>,
    pub default: Option<String>,
}

impl LocationSource {
    pub fn with_default(location: impl Into<String>) -> Self {
        Self { by_user: HashMap::new(), default: Some(location.into()) }
    }

    /// Reads a JSONL sidecar with `user_id` and `location` keys.
    pub fn load_sidecar(path: &Path, default: Option<String>) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Row {
            #[serde(deserialize_with = "opaque_id")]
            user_id: String,
            location: String,
        }
        let text = fs::read_to_string(path)?;
        let mut by_user = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line)
                .map_err(|e| CorpusError::Parse { line: i + 1, reason: e.to_string() })?;
            by_user.insert(row.user_id, row.location.trim().to_string());
        }
        Ok(Self { by_user, default })
    }

    fn resolve(&self, user: &str) -> Option<&str> {
        self.by_user.get(user).map(String::as_str).or(self.default.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogFormat {
    /// One JSON object per line: `user_id`, `item_id`, `ts_utc`, `location`.
    Jsonl,
    /// MovieLens `ratings.dat` (`UserID::MovieID::Rating::Timestamp`).
    MovielensDat(LocationSource),
}

/// Loads a log, sorted by `(user_id, timestamp)` with ties kept in input row
/// order. Exact duplicate rows are dropped.
pub fn load_interactions(path: &Path, format: &LogFormat) -> Result<Vec<Interaction>, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(text: &str, format: &LogFormat) -> Result<Vec<Interaction>, CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec = match format {
            LogFormat::Jsonl => serde_json::from_str::<Interaction>(line)
                .map_err(|e| CorpusError::Parse { line: line_no, reason: e.to_string() })?,
            LogFormat::MovielensDat(locations) => parse_ml_line(line, line_no, locations)?,
        };
        rec.validate().map_err(|reason| CorpusError::Parse { line: line_no, reason })?;
        rows.push(rec);
    }
    let mut seen = HashSet::new();
    rows.retain(|r| seen.insert(r.clone()));
    rows.sort_by(|a, b| (&a.user_id, a.timestamp_utc).cmp(&(&b.user_id, b.timestamp_utc)));
    if rows.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    Ok(rows)
}

fn parse_ml_line(line: &str, line_no: usize, locations: &LocationSource) -> Result<Interaction, CorpusError> {
    let parse_err = |reason: String| CorpusError::Parse { line: line_no, reason };
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(parse_err(format!("expected 4 '::'-separated fields, got {}", fields.len())));
    }
    let ts: i64 = fields[3].trim().parse().map_err(|_| parse_err(format!("bad timestamp {:?}", fields[3])))?;
    fields[2].trim().parse::<f64>().map_err(|_| parse_err(format!("bad rating {:?}", fields[2])))?;
    let user = fields[0].trim();
    let location = locations
        .resolve(user)
        .ok_or_else(|| CorpusError::MissingLocation(user.to_string()))?;
    Ok(Interaction::new(user, fields[1].trim(), ts, location))
}

pub fn write_jsonl(path: &Path, log: &[Interaction]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("interaction serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// A user's events in chronological order. `items`, `timestamps` and
/// `locations` are parallel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
    pub locations: Vec<String>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn event(&self, i: usize) -> Interaction {
        Interaction::new(&self.user_id, &self.items[i], self.timestamps[i], &self.locations[i])
    }

    pub fn events(&self) -> impl Iterator<Item = Interaction> + '_ {
        (0..self.len()).map(|i| self.event(i))
    }

    fn from_events(user_id: &str, events: &[&Interaction]) -> Self {
        Self {
            user_id: user_id.to_string(),
            items: events.iter().map(|e| e.item_id.clone()).collect(),
            timestamps: events.iter().map(|e| e.timestamp_utc).collect(),
            locations: events.iter().map(|e| e.location.clone()).collect(),
        }
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            user_id: self.user_id.clone(),
            items: self.items[..n].to_vec(),
            timestamps: self.timestamps[..n].to_vec(),
            locations: self.locations[..n].to_vec(),
        }
    }

    fn filtered(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            user_id: self.user_id.clone(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
            locations: idx.iter().map(|&i| self.locations[i].clone()).collect(),
        }
    }
}

pub type Histories = BTreeMap<String, UserHistory>;

/// Sorted, de-duplicated item vocabulary. Positions are the dense item
/// indices used by models and samplers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_keys(keys: impl IntoIterator<Item = String>) -> Self {
        let keys: Vec<String> = keys.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Self { keys, index }
    }

    pub fn from_log(log: &[Interaction]) -> Self {
        Self::from_keys(log.iter().map(|r| r.item_id.clone()))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &str {
        &self.keys[i]
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }
}

/// Groups a log per user, keeping the most recent `max_len` events.
///
/// Events are ordered by timestamp, then item id, then location, so the
/// result does not depend on the order of the input rows.
pub fn build_histories(log: &[Interaction], max_len: usize) -> Histories {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for r in log {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by(|a, b| {
                (a.timestamp_utc, &a.item_id, &a.location).cmp(&(b.timestamp_utc, &b.item_id, &b.location))
            });
            let start = events.len().saturating_sub(max_len);
            (user.to_string(), UserHistory::from_events(user, &events[start..]))
        })
        .collect()
}

/// Flattens histories back into a log.
pub fn flatten_histories(histories: &Histories) -> Vec<Interaction> {
    histories.values().flat_map(|h| h.events().collect::<Vec<_>>()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    General,
    Explorer,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::General => "general",
            SplitMode::Explorer => "explorer",
        })
    }
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "general" => Ok(SplitMode::General),
            "explorer" => Ok(SplitMode::Explorer),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub explorer_window_days: i64,
    pub min_history: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { mode: SplitMode::General, explorer_window_days: 182, min_history: 3 }
    }
}

impl SplitSpec {
    pub fn explorer() -> Self {
        Self { mode: SplitMode::Explorer, ..Self::default() }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.min_history < 2 {
            return Err(CorpusError::InvalidSpec(format!("min_history {} < 2", self.min_history)));
        }
        if self.explorer_window_days <= 0 {
            return Err(CorpusError::InvalidSpec("explorer_window_days must be positive".into()));
        }
        Ok(())
    }
}

/// A held-out next-item prediction: `input` is everything the model may see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: UserHistory,
    pub target: Interaction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub mode: SplitMode,
    /// Training sequences; users whose sequence would be empty are omitted.
    pub train: Histories,
    pub test: Vec<TestCase>,
}

/// Leave-last-out: every user trains on all but the last event; users with at
/// least `min_history` events contribute their last event as a test target.
pub fn split_general(histories: &Histories, min_history: usize) -> Result<Split, CorpusError> {
    SplitSpec { min_history, ..SplitSpec::default() }.validate()?;
    let mut train = Histories::new();
    let mut test = Vec::new();
    for (user, h) in histories {
        let n = h.len();
        let input = h.prefix(n - 1);
        if n >= min_history {
            test.push(TestCase { input: input.clone(), target: h.event(n - 1) });
        }
        if !input.is_empty() {
            train.insert(user.clone(), input);
        }
    }
    if test.is_empty() {
        return Err(CorpusError::EmptySplit("general"));
    }
    Ok(Split { mode: SplitMode::General, train, test })
}

/// Explorer users: the last item must not have been consumed within the
/// window before it. Training sequences drop repeated items (first
/// occurrence kept) and every occurrence of the user's last item.
pub fn split_explorer(histories: &Histories, spec: &SplitSpec) -> Result<Split, CorpusError> {
    spec.validate()?;
    if spec.mode != SplitMode::Explorer {
        return Err(CorpusError::InvalidSpec("split_explorer needs mode = explorer".into()));
    }
    let window = spec.explorer_window_days * SECONDS_PER_DAY;
    let mut train = Histories::new();
    let mut test = Vec::new();
    for (user, h) in histories {
        let n = h.len();
        let target = h.event(n - 1);
        let repeated_in_window = (0..n - 1)
            .any(|i| h.items[i] == target.item_id && h.timestamps[i] >= target.timestamp_utc - window);
        let mut seen = HashSet::new();
        let input = h
            .prefix(n - 1)
            .filtered(|i| h.items[i] != target.item_id && seen.insert(h.items[i].clone()));
        if n >= spec.min_history && !repeated_in_window && !input.is_empty() {
            test.push(TestCase { input: input.clone(), target });
        }
        if !input.is_empty() {
            train.insert(user.clone(), input);
        }
    }
    if test.is_empty() {
        return Err(CorpusError::EmptySplit("explorer"));
    }
    Ok(Split { mode: SplitMode::Explorer, train, test })
}

pub fn split(histories: &Histories, spec: &SplitSpec) -> Result<Split, CorpusError> {
    match spec.mode {
        SplitMode::General => split_general(histories, spec.min_history),
        SplitMode::Explorer => split_explorer(histories, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(u: &str, i: &str, day: i64) -> Interaction {
        Interaction::new(u, i, 1_000_000_000 + day * SECONDS_PER_DAY, "Oslo, Norway")
    }

    #[test]
    fn jsonl_rows_are_loaded_and_sorted() {
        let text = r#"{"user_id":"b","item_id":"x","ts_utc":30,"location":"Paris"}
{"user_id":"a","item_id":"y","ts_utc":20,"location":"Paris"}
{"user_id":"a","item_id":"z","ts_utc":10,"location":"Lyon"}
"#;
        let log = parse_interactions(text, &LogFormat::Jsonl).unwrap();
        assert_eq!(log.len(), 3);
        let order: Vec<_> = log.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(order, vec!["z", "y", "x"]);
    }

    #[test]
    fn numeric_ids_are_accepted() {
        let log = parse_interactions(r#"{"user_id":7,"item_id":1193,"ts_utc":5,"location":"X"}"#, &LogFormat::Jsonl)
            .unwrap();
        assert_eq!(log[0].user_id, "7");
        assert_eq!(log[0].item_id, "1193");
    }

    #[test]
    fn malformed_line_is_named() {
        let text = "{\"user_id\":\"a\",\"item_id\":\"y\",\"ts_utc\":20,\"location\":\"P\"}\nnot json\n";
        match parse_interactions(text, &LogFormat::Jsonl) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_records_are_parse_errors() {
        let bad_ts = r#"{"user_id":"a","item_id":"y","ts_utc":0,"location":"P"}"#;
        assert!(matches!(parse_interactions(bad_ts, &LogFormat::Jsonl), Err(CorpusError::Parse { line: 1, .. })));
        let blank_loc = r#"{"user_id":"a","item_id":"y","ts_utc":3,"location":"  "}"#;
        assert!(matches!(parse_interactions(blank_loc, &LogFormat::Jsonl), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicates_dropped_and_empty_rejected() {
        let row = r#"{"user_id":"a","item_id":"y","ts_utc":20,"location":"P"}"#;
        let log = parse_interactions(&format!("{row}\n{row}\n"), &LogFormat::Jsonl).unwrap();
        assert_eq!(log.len(), 1);
        assert!(matches!(parse_interactions("\n\n", &LogFormat::Jsonl), Err(CorpusError::EmptyDataset)));
    }

    #[test]
    fn movielens_lines_use_location_source() {
        let mut src = LocationSource::with_default("Somewhere, USA");
        src.by_user.insert("1".into(), "New Hampshire, USA".into());
        let fmt = LogFormat::MovielensDat(src);
        let log = parse_interactions("1::1193::5::978300760\n2::661::3::978302109\n", &fmt).unwrap();
        assert_eq!(log[0].location, "New Hampshire, USA");
        assert_eq!(log[1].location, "Somewhere, USA");
        assert!(matches!(
            parse_interactions("1::1193::5\n", &fmt),
            Err(CorpusError::Parse { line: 1, .. })
        ));
        let no_default = LogFormat::MovielensDat(LocationSource::default());
        assert!(matches!(parse_interactions("1::2::3::4\n", &no_default), Err(CorpusError::MissingLocation(_))));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let log: Vec<_> = (0..5).map(|d| ev("u", &format!("i{d}"), d)).collect();
        let h = build_histories(&log, 3);
        assert_eq!(h["u"].items, vec!["i2", "i3", "i4"]);
        let single = build_histories(&[ev("v", "x", 1)], 3);
        assert_eq!(single["v"].len(), 1);
    }

    #[test]
    fn leave_last_out() {
        let log = vec![ev("u", "a", 1), ev("u", "b", 2), ev("u", "c", 3), ev("w", "a", 1)];
        let s = split_general(&build_histories(&log, 50), 2).unwrap();
        assert_eq!(s.train["u"].items, vec!["a", "b"]);
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.test[0].target.item_id, "c");
        assert!(!s.train.contains_key("w"));
    }

    #[test]
    fn general_split_rejects_bad_min_history_and_empty() {
        let h = build_histories(&[ev("u", "a", 1)], 5);
        assert!(matches!(split_general(&h, 1), Err(CorpusError::InvalidSpec(_))));
        assert!(matches!(split_general(&h, 2), Err(CorpusError::EmptySplit("general"))));
    }

    #[test]
    fn explorer_window_exclusion() {
        let log = vec![ev("u", "x", 0), ev("u", "y", 10), ev("u", "x", 30)];
        let h = build_histories(&log, 50);
        assert!(matches!(split_explorer(&h, &SplitSpec::explorer()), Err(CorpusError::EmptySplit(_))));

        let log = vec![ev("u", "x", 0), ev("u", "y", 10), ev("u", "z", 30)];
        let s = split_explorer(&build_histories(&log, 50), &SplitSpec::explorer()).unwrap();
        assert_eq!(s.test[0].target.item_id, "z");
    }

    #[test]
    fn explorer_repeat_outside_window_qualifies_but_is_scrubbed() {
        let log = vec![ev("u", "x", 0), ev("u", "y", 200), ev("u", "y", 201), ev("u", "x", 400)];
        let s = split_explorer(&build_histories(&log, 50), &SplitSpec::explorer()).unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.test[0].input.items, vec!["y"]);
        assert_eq!(s.train["u"].items, vec!["y"]);
    }

    #[test]
    fn explorer_requires_explorer_mode() {
        let h = build_histories(&[ev("u", "a", 1), ev("u", "b", 2)], 5);
        let spec = SplitSpec { mode: SplitMode::General, ..SplitSpec::default() };
        assert!(matches!(split_explorer(&h, &spec), Err(CorpusError::InvalidSpec(_))));
    }
}
