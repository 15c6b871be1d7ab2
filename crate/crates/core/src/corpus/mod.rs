//! Dataset model, JSON-lines ingestion and the few-shot split protocol.

mod split;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{
    class_histogram, filter_minority_classes, make_shot_subsets, make_split, FewShotSplit, Shortfall, ShotSubset,
    SplitRatios, DEFAULT_MIN_COUNT,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

impl From<&str> for LabelId {
    fn from(s: &str) -> Self {
        LabelId(s.to_string())
    }
}

/// One post with its platform metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hashtags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<IndexMap<String, String>>,
}

impl PostRecord {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: None,
            hashtags: None,
            created_at: None,
            extra: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: UserId,
    pub profile: IndexMap<String, String>,
    /// Most recent first.
    pub posts: Vec<PostRecord>,
    pub label_id: LabelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationLabel {
    pub label_id: LabelId,
    pub name: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
}

impl LocationLabel {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            label_id: LabelId(name.clone()),
            name,
            latitude: None,
            longitude: None,
        }
    }

    pub fn with_coords(name: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            latitude: Some(lat),
            longitude: Some(lon),
            ..Self::new(name)
        }
    }

    pub fn coords(&self) -> Option<(f64, f64)> {
        self.latitude.zip(self.longitude)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |message: &str| Error::InvalidLabel {
            name: self.name.clone(),
            message: message.to_string(),
        };
        if self.name.is_empty() {
            return Err(invalid("empty name"));
        }
        match (self.latitude, self.longitude) {
            (None, None) => Ok(()),
            (Some(lat), Some(lon)) => {
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    Err(invalid("coordinates out of range"))
                } else {
                    Ok(())
                }
            }
            _ => Err(invalid("latitude and longitude must be given together")),
        }
    }
}

/// Users plus the label set they reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserRecord>,
    pub labels: Vec<LocationLabel>,
}

impl Dataset {
    /// Validates every record invariant.
    pub fn new(users: Vec<UserRecord>, labels: Vec<LocationLabel>) -> Result<Self> {
        let mut label_ids = HashSet::new();
        for l in &labels {
            l.validate()?;
            if !label_ids.insert(&l.label_id) {
                return Err(Error::InvalidLabel {
                    name: l.name.clone(),
                    message: "duplicate label id".into(),
                });
            }
        }
        let mut seen = HashSet::new();
        for u in &users {
            if !seen.insert(&u.user_id) {
                return Err(Error::DuplicateUser(u.user_id.0.clone()));
            }
            if !label_ids.contains(&u.label_id) {
                return Err(Error::DanglingLabel {
                    user_id: u.user_id.0.clone(),
                    label_id: u.label_id.0.clone(),
                });
            }
            for p in &u.posts {
                if let Some(extra) = &p.extra {
                    if extra.keys().any(String::is_empty) {
                        return Err(Error::InvalidArgument(format!(
                            "user {}: empty extra key",
                            u.user_id
                        )));
                    }
                }
            }
        }
        Ok(Self { users, labels })
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn label_index(&self) -> HashMap<&LabelId, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (&l.label_id, i))
            .collect()
    }

    pub fn user_index(&self) -> HashMap<&UserId, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (&u.user_id, i))
            .collect()
    }

    pub fn label(&self, id: &LabelId) -> Option<&LocationLabel> {
        self.labels.iter().find(|l| &l.label_id == id)
    }

    pub fn class_counts(&self) -> HashMap<&LabelId, usize> {
        let mut counts = HashMap::new();
        for u in &self.users {
            *counts.entry(&u.label_id).or_insert(0) += 1;
        }
        counts
    }

    /// Users in dataset order restricted to `ids`.
    pub fn select<'a>(&'a self, ids: &[UserId]) -> Vec<&'a UserRecord> {
        let wanted: HashSet<&UserId> = ids.iter().collect();
        self.users
            .iter()
            .filter(|u| wanted.contains(&u.user_id))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLabel {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireUser {
    user_id: String,
    profile: IndexMap<String, String>,
    posts: Vec<PostRecord>,
    label: WireLabel,
}

/// Orders posts most-recent-first. Timestamped posts are sorted among the
/// slots they occupy; posts without a timestamp keep their file position.
pub fn order_posts(posts: &mut [PostRecord]) {
    let slots: Vec<usize> = posts
        .iter()
        .enumerate()
        .filter(|(_, p)| p.created_at.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut stamped: Vec<PostRecord> = slots.iter().map(|&i| posts[i].clone()).collect();
    stamped.sort_by(|a, b| b.created_at.cmp(&a.created_at));
    for (slot, post) in slots.into_iter().zip(stamped) {
        posts[slot] = post;
    }
}

/// Parses a JSON-lines dataset from any reader. Blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut users = Vec::new();
    let mut labels: Vec<LocationLabel> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut seen_users = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireUser = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen_users.insert(wire.user_id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate user id {}", wire.user_id),
            });
        }
        let label = LocationLabel {
            label_id: LabelId(wire.label.name.clone()),
            name: wire.label.name,
            latitude: wire.label.lat,
            longitude: wire.label.lon,
        };
        label.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        // First occurrence of a name fixes its coordinates.
        if !by_name.contains_key(&label.name) {
            by_name.insert(label.name.clone(), labels.len());
            labels.push(label.clone());
        }
        let mut posts = wire.posts;
        order_posts(&mut posts);
        users.push(UserRecord {
            user_id: UserId(wire.user_id),
            profile: wire.profile,
            posts,
            label_id: label.label_id,
        });
    }
    Dataset::new(users, labels)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

/// Canonical JSON-lines serialization: one user per line, label inlined.
pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    let labels = dataset.label_index();
    for u in &dataset.users {
        let li = *labels.get(&u.label_id).ok_or_else(|| Error::DanglingLabel {
            user_id: u.user_id.0.clone(),
            label_id: u.label_id.0.clone(),
        })?;
        let label = &dataset.labels[li];
        let wire = WireUser {
            user_id: u.user_id.0.clone(),
            profile: u.profile.clone(),
            posts: u.posts.clone(),
            label: WireLabel {
                name: label.name.clone(),
                lat: label.latitude,
                lon: label.longitude,
            },
        };
        serde_json::to_writer(&mut out, &wire)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn parse(s: &str) -> Result<Dataset> {
        parse_dataset(s.as_bytes())
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let d = parse("").unwrap();
        assert!(d.users.is_empty() && d.labels.is_empty());
    }

    #[test]
    fn single_line_round_trips() {
        let line = r#"{"user_id":"u1","profile":{"name":"bo"},"posts":[{"text":"hi"}],"label":{"name":"Paris","lat":48.8566,"lon":2.3522}}"#;
        let d = parse(line).unwrap();
        assert_eq!(d.users.len(), 1);
        assert_eq!(d.labels.len(), 1);
        assert_eq!(d.labels[0].coords(), Some((48.8566, 2.3522)));
        assert_eq!(dataset_to_string(&d).unwrap(), format!("{line}\n"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"user_id\":\"u1\",\"profile\":{},\"posts\":[],\"label\":{\"name\":\"a\"}}\n{oops";
        match parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"user_id":"u1","profile":{},"posts":[],"label":{"name":"a"},"bogus":1}"#;
        assert!(matches!(parse(text), Err(Error::Parse { line: 1, .. })));
        let text = r#"{"user_id":"u1","profile":{},"posts":[{"text":"x","likes":3}],"label":{"name":"a"}}"#;
        assert!(matches!(parse(text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn half_coordinates_are_rejected() {
        let text = r#"{"user_id":"u1","profile":{},"posts":[],"label":{"name":"a","lat":1.0}}"#;
        assert!(matches!(parse(text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn labels_are_deduplicated_by_name() {
        let text = concat!(
            r#"{"user_id":"u1","profile":{},"posts":[],"label":{"name":"a","lat":1.0,"lon":2.0}}"#,
            "\n",
            r#"{"user_id":"u2","profile":{},"posts":[],"label":{"name":"a","lat":1.5,"lon":2.5}}"#,
            "\n",
            r#"{"user_id":"u3","profile":{},"posts":[],"label":{"name":"b"}}"#,
        );
        let d = parse(text).unwrap();
        assert_eq!(d.labels.len(), 2);
        assert_eq!(d.labels[0].coords(), Some((1.0, 2.0)));
    }

    #[test]
    fn dangling_label_names_the_user() {
        let user = UserRecord {
            user_id: "u9".into(),
            profile: IndexMap::new(),
            posts: vec![],
            label_id: "nowhere".into(),
        };
        match Dataset::new(vec![user], vec![LocationLabel::new("x")]) {
            Err(Error::DanglingLabel { user_id, .. }) => assert_eq!(user_id, "u9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn posts_sort_by_time_and_untimed_posts_stay_put() {
        let at = |d: u32| Some(Utc.with_ymd_and_hms(2020, 1, d, 0, 0, 0).unwrap());
        let mut posts = vec![
            PostRecord { created_at: at(1), ..PostRecord::text("old") },
            PostRecord::text("untimed"),
            PostRecord { created_at: at(3), ..PostRecord::text("new") },
            PostRecord { created_at: at(2), ..PostRecord::text("mid") },
        ];
        order_posts(&mut posts);
        let texts: Vec<_> = posts.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, ["new", "untimed", "mid", "old"]);
    }
}
