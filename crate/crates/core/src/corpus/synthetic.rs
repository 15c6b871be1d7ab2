//! Generator for a separable toy corpus: every user's posts mention the
//! user's city name among noise words drawn from a pool shared by all
//! classes.

use std::collections::HashSet;

use chrono::{Duration, TimeZone, Utc};
use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelId, LocationLabel, PostRecord, UserId, UserRecord};
use crate::error::Result;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub users_per_class: usize,
    pub posts_per_user: usize,
    pub noise_words_per_post: usize,
    pub noise_vocabulary: usize,
    /// When false, posts carry only noise and labels are unrelated to text.
    pub mention_city: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            users_per_class: 40,
            posts_per_user: 3,
            noise_words_per_post: 3,
            noise_vocabulary: 60,
            mention_city: true,
            seed: 0,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn pseudo_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            let onset = ONSETS.choose(rng).unwrap();
            let vowel = VOWELS.choose(rng).unwrap();
            format!("{onset}{vowel}")
        })
        .collect()
}

fn unique_words(rng: &mut impl Rng, n: usize, syllables: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = rng_for(spec.seed, &[0x5e7]);
    let mut taken = HashSet::new();
    let cities = unique_words(&mut rng, spec.classes, 3, &mut taken);
    let noise = unique_words(&mut rng, spec.noise_vocabulary.max(1), 2, &mut taken);
    let sources = ["web", "android", "iphone", "tweetdeck"];
    let base = Utc.with_ymd_and_hms(2016, 6, 1, 12, 0, 0).unwrap();

    let labels: Vec<LocationLabel> = cities
        .iter()
        .map(|c| {
            let lat = rng.random_range(-60.0..70.0_f64);
            let lon = rng.random_range(-180.0..180.0_f64);
            LocationLabel::with_coords(capitalize(c), (lat * 1e4).round() / 1e4, (lon * 1e4).round() / 1e4)
        })
        .collect();

    let mut users = Vec::with_capacity(spec.classes * spec.users_per_class);
    for i in 0..spec.users_per_class {
        for (c, label) in labels.iter().enumerate() {
            let class = if spec.mention_city {
                c
            } else {
                rng.random_range(0..labels.len())
            };
            let uid = format!("u{:05}", users.len());
            let mut profile = IndexMap::new();
            profile.insert("name".to_string(), format!("user{}{}", c, i));
            profile.insert(
                "description".to_string(),
                format!("{} {}", noise.choose(&mut rng).unwrap(), noise.choose(&mut rng).unwrap()),
            );
            let mut posts = Vec::with_capacity(spec.posts_per_user);
            for p in 0..spec.posts_per_user {
                let mut words: Vec<String> = (0..spec.noise_words_per_post)
                    .map(|_| noise.choose(&mut rng).unwrap().clone())
                    .collect();
                if spec.mention_city {
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, label.name.clone());
                }
                let hours = (p * 24 + rng.random_range(0..24)) as i64;
                posts.push(PostRecord {
                    text: words.join(" "),
                    source: Some(sources.choose(&mut rng).unwrap().to_string()),
                    hashtags: None,
                    created_at: Some(base - Duration::hours(hours)),
                    extra: None,
                });
            }
            users.push(UserRecord {
                user_id: UserId(uid),
                profile,
                posts,
                label_id: LabelId(labels[class].name.clone()),
            });
        }
    }
    Dataset::new(users, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), 20);
        assert_eq!(a.users.len(), 800);
        let counts = a.class_counts();
        assert!(counts.values().all(|&n| n == 40));
        for u in &a.users {
            let name = &a.label(&u.label_id).unwrap().name;
            assert!(u.posts.iter().all(|p| p.text.contains(name.as_str())));
            assert!(u.posts.windows(2).all(|w| w[0].created_at > w[1].created_at));
        }
    }
}
