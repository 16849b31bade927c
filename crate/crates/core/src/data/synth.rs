//! Synthetic review generator for desk-scale runs and tests.
//!
//! Reviews are templated so every signal the model is supposed to exploit is
//! actually present in the data: each review names (feature, opinion) pairs
//! drawn from the user's preferred features and the item's feature set, the
//! opinion polarity follows the rating, and users in the same style cluster
//! share a verbatim closing sentence. Ratings are a noisy blend of user
//! positivity and item quality.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspects::AspectPair;
use crate::data::ReviewRecord;

const FEATURES: &[&str] = &[
    "room", "food", "bed", "pool", "staff", "screen", "battery", "camera", "price", "location",
    "wifi", "service",
];

const POSITIVE: &[&str] = &[
    "great", "clean", "comfortable", "excellent", "friendly", "fast", "spacious", "quiet",
    "tasty", "bright",
];

const NEGATIVE: &[&str] = &[
    "bad", "dirty", "small", "slow", "noisy", "rude", "expensive", "broken", "cramped", "dark",
];

// Signature vocabulary deliberately avoids the aspect lexicon so the
// fallback extractor never fires on a signature sentence.
const SIGNATURE_WORDS: &[&str] = &[
    "maple", "ember", "harbor", "violet", "canyon", "meadow", "willow", "summit", "lantern",
    "breeze", "marble", "cedar", "tundra", "coral", "prairie", "quartz", "raven", "saffron",
    "thistle", "umber", "velvet", "wander", "yonder", "zephyr", "drift", "fable", "glacier",
    "hollow", "indigo", "juniper",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub reviews_per_user: usize,
    pub seed: u64,
    /// Standard deviation of the rating noise, in sentiment units.
    pub rating_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            users: 25,
            items: 10,
            reviews_per_user: 8,
            seed: 13,
            rating_noise: 0.05,
        }
    }
}

fn pick_index(key: &str, len: usize) -> usize {
    let mut h = 0xcbf29ce484222325u64;
    for &b in key.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % len as u64) as usize
}

/// Generate `users * reviews_per_user` records, deterministic per seed.
pub fn generate(cfg: &SynthConfig) -> Vec<ReviewRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_items = cfg.items.max(1);
    let per_user = cfg.reviews_per_user.min(n_items);

    // Item profiles: feature subset and latent quality. Quality is bimodal
    // so an item's (feature, opinion) pairs repeat verbatim across reviews.
    let mut item_features: Vec<Vec<&str>> = Vec::with_capacity(n_items);
    let mut item_quality: Vec<f64> = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let mut feats: Vec<&str> = FEATURES.to_vec();
        feats.shuffle(&mut rng);
        feats.truncate(6);
        item_features.push(feats);
        let q = if rng.random::<bool>() {
            rng.random_range(0.65..0.85)
        } else {
            rng.random_range(0.15..0.35)
        };
        item_quality.push(q);
    }

    // User profiles: preferred features, positivity, and a personal
    // three-word signature every one of the user's reviews repeats.
    let mut user_features: Vec<Vec<&str>> = Vec::with_capacity(cfg.users);
    let mut user_positivity: Vec<f64> = Vec::with_capacity(cfg.users);
    let mut user_signature: Vec<String> = Vec::with_capacity(cfg.users);
    for _ in 0..cfg.users {
        let mut feats: Vec<&str> = FEATURES.to_vec();
        feats.shuffle(&mut rng);
        feats.truncate(3);
        user_features.push(feats);
        user_positivity.push(rng.random_range(0.15..0.85));
        let mut sig: Vec<&str> = SIGNATURE_WORDS.to_vec();
        sig.shuffle(&mut rng);
        user_signature.push(format!("{} {} {} today .", sig[0], sig[1], sig[2]));
    }

    let mut records = Vec::with_capacity(cfg.users * per_user);
    for u in 0..cfg.users {
        let style = user_signature[u].as_str();
        let mut visited: Vec<usize> = (0..n_items).collect();
        visited.shuffle(&mut rng);
        visited.truncate(per_user);
        for &v in &visited {
            let item_id = format!("item{v:03}");
            let user_id = format!("user{u:03}");

            // First feature: prefer the user/item intersection.
            let shared: Vec<&str> = item_features[v]
                .iter()
                .filter(|f| user_features[u].contains(*f))
                .copied()
                .collect();
            let f1 = if shared.is_empty() {
                item_features[v][pick_index(&format!("{user_id}|{item_id}"), 4)]
            } else {
                shared[pick_index(&format!("{user_id}|{item_id}"), shared.len())]
            };
            // Second feature prefers the intersection too, so both mentioned
            // features reflect the user's taste, not the item alone.
            let f2_pool: Vec<&str> = if shared.len() >= 2 {
                shared.iter().filter(|f| **f != f1).copied().collect()
            } else {
                item_features[v]
                    .iter()
                    .filter(|f| **f != f1)
                    .copied()
                    .collect()
            };
            let f2 = if f2_pool.is_empty() {
                f1
            } else {
                f2_pool[pick_index(&format!("{user_id}|{item_id}|2"), f2_pool.len())]
            };

            let noise: f64 = {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                // Box-Muller; only the cosine branch is needed.
                (-2.0 * a.max(1e-12).ln()).sqrt() * (std::f64::consts::TAU * b).cos()
            };
            let sentiment =
                (0.35 * user_positivity[u] + 0.65 * item_quality[v] + cfg.rating_noise * noise)
                    .clamp(0.0, 1.0);
            let positive = sentiment >= 0.5;
            let pool = if positive { POSITIVE } else { NEGATIVE };
            // Opinion word is a deterministic function of (feature, polarity),
            // so the same pair recurs across items and users.
            let o1 = pool[pick_index(&format!("{f1}|{positive}"), pool.len())];
            let o2 = pool[pick_index(&format!("{f2}|{positive}"), pool.len())];

            let rating = (1.0 + 4.0 * sentiment).clamp(1.0, 5.0);
            let text = format!("{f1} is {o1} . {o2} {f2} . {style}");
            records.push(ReviewRecord {
                user: user_id,
                item: item_id,
                rating,
                text,
                aspects: vec![AspectPair::new(f1, o1), AspectPair::new(f2, o2)],
            });
        }
    }
    records
}
