//! Synthetic catalog, users and interaction log.
//!
//! Every item belongs to a latent concept. Its text is drawn from the
//! concept's token signature and its image from the concept's pixel template.
//! A fraction of items is corrupted: text partly replaced by another concept's
//! tokens, or the image blended with noise. Purchases depend on the true
//! concept only, so corrupted items keep their ground truth.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::sigmoid;
use crate::embedding::Image;
use crate::error::{Error, Result};
use crate::rng::{self, hash_words, DetRng};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentConcept {
    pub id: usize,
    /// Preference-space embedding.
    pub latent: Vec<f64>,
    /// Distinct words describing the concept.
    pub text_signature: Vec<String>,
    /// Clean `H × W × C` image.
    pub image_template: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRecord {
    pub id: usize,
    pub concept: usize,
    pub text: String,
    pub image: Image,
    pub text_corrupted: bool,
    pub image_corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: usize,
    pub preference: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: usize,
    pub timestamp: u64,
    pub item: usize,
    pub bought: bool,
}

/// Shape of generated items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemShape {
    pub text_len: usize,
    pub signature_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
}

impl Default for ItemShape {
    fn default() -> Self {
        ItemShape {
            text_len: 5,
            signature_len: 4,
            image_height: 30,
            image_width: 30,
            image_channels: 1,
        }
    }
}

/// How corrupted items are damaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    /// Fraction of text tokens replaced by another concept's tokens.
    pub text_replace_fraction: f64,
    /// Weight of uniform noise in the convex blend of corrupted images.
    pub image_noise_blend: f64,
    /// Per-pixel jitter (in pixel units) applied to every item image.
    pub pixel_jitter: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption {
            text_replace_fraction: 0.6,
            image_noise_blend: 0.6,
            pixel_jitter: 12.0,
        }
    }
}

/// Ground-truth purchase model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceModel {
    /// Standard deviation of the logit noise.
    pub noise: f64,
    /// Share of interactions that end in a purchase.
    pub positive_fraction: f64,
}

impl Default for PreferenceModel {
    fn default() -> Self {
        PreferenceModel { noise: 0.5, positive_fraction: 0.2 }
    }
}

impl PreferenceModel {
    /// Buy probability before thresholding.
    pub fn buy_probability(&self, preference: &[f64], latent: &[f64], noise_sample: f64) -> f64 {
        let dot: f64 = preference.iter().zip(latent).map(|(a, b)| a * b).sum();
        sigmoid(dot + self.noise * noise_sample)
    }
}

/// Every knob of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_concepts: usize,
    pub num_items: usize,
    pub num_users: usize,
    pub num_interactions: usize,
    pub text_corruption_rate: f64,
    pub image_corruption_rate: f64,
    pub latent_dim: usize,
    pub shape: ItemShape,
    pub corruption: Corruption,
    pub preference: PreferenceModel,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 1,
            num_concepts: 100,
            num_items: 5000,
            num_users: 1000,
            num_interactions: 50_000,
            text_corruption_rate: 0.3,
            image_corruption_rate: 0.3,
            latent_dim: 4,
            shape: ItemShape::default(),
            corruption: Corruption::default(),
            preference: PreferenceModel::default(),
        }
    }
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub concepts: Vec<LatentConcept>,
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    pub interactions: Vec<InteractionRecord>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable word for a token index.
pub fn word_for(index: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = index;
    let mut word = String::new();
    for _ in 0..3 {
        let s = n % base;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
        n /= base;
    }
    word
}

fn template_distance(a: &[u8], b: &[u8]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum();
    libm::sqrt(ss / a.len() as f64)
}

/// Minimum root-mean-square pixel distance between two concept templates.
pub const MIN_TEMPLATE_DISTANCE: f64 = 40.0;

pub fn gen_concepts(num_concepts: usize, latent_dim: usize, shape: &ItemShape, seed: u64) -> Result<Vec<LatentConcept>> {
    if num_concepts == 0 || shape.signature_len == 0 {
        return Err(Error::contract("need at least one concept and one signature word"));
    }
    let mut rng = rng::stream(seed, 0xC0);
    let pixels = shape.image_height * shape.image_width * shape.image_channels;
    let mut concepts: Vec<LatentConcept> = Vec::with_capacity(num_concepts);
    for id in 0..num_concepts {
        let latent = (0..latent_dim).map(|_| rng::normal(&mut rng)).collect();
        let text_signature = (0..shape.signature_len).map(|k| word_for(id * shape.signature_len + k)).collect();
        let image_template = loop {
            let t: Vec<u8> = (0..pixels).map(|_| rng::index(&mut rng, 256) as u8).collect();
            if concepts.iter().all(|c| template_distance(&c.image_template, &t) >= MIN_TEMPLATE_DISTANCE) {
                break t;
            }
        };
        concepts.push(LatentConcept { id, latent, text_signature, image_template });
    }
    Ok(concepts)
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::contract(alloc::format!("{name} must lie in [0, 1], got {r}")));
    }
    Ok(())
}

/// Draws items with uniformly assigned concepts and independent corruption flags.
pub fn gen_catalog(
    concepts: &[LatentConcept],
    num_items: usize,
    text_corruption_rate: f64,
    image_corruption_rate: f64,
    shape: &ItemShape,
    corruption: &Corruption,
    seed: u64,
) -> Result<Vec<ItemRecord>> {
    check_rate("text_corruption_rate", text_corruption_rate)?;
    check_rate("image_corruption_rate", image_corruption_rate)?;
    check_rate("text_replace_fraction", corruption.text_replace_fraction)?;
    check_rate("image_noise_blend", corruption.image_noise_blend)?;
    if concepts.len() > num_items {
        return Err(Error::contract(alloc::format!(
            "{} concepts cannot be covered by {num_items} items",
            concepts.len()
        )));
    }
    let mut rng = rng::stream(seed, 0xCA7);
    let n_replace = libm::round(corruption.text_replace_fraction * shape.text_len as f64) as usize;
    let mut items = Vec::with_capacity(num_items);
    for id in 0..num_items {
        let concept = rng::index(&mut rng, concepts.len());
        let text_corrupted = rng.random_bool_compat(text_corruption_rate);
        let image_corrupted = rng.random_bool_compat(image_corruption_rate);
        let sig = &concepts[concept].text_signature;
        let mut words: Vec<&str> = (0..shape.text_len).map(|_| sig[rng::index(&mut rng, sig.len())].as_str()).collect();
        if text_corrupted && concepts.len() > 1 {
            let mut other = rng::index(&mut rng, concepts.len() - 1);
            if other >= concept {
                other += 1;
            }
            let other_sig = &concepts[other].text_signature;
            let mut slots: Vec<usize> = (0..shape.text_len).collect();
            rng::shuffle(&mut rng, &mut slots);
            for &s in &slots[..n_replace] {
                words[s] = other_sig[rng::index(&mut rng, other_sig.len())].as_str();
            }
        }
        let text = words.join(" ");
        let template = &concepts[concept].image_template;
        let alpha = corruption.image_noise_blend;
        let pixels = template
            .iter()
            .map(|&t| {
                let jitter = rng::uniform(&mut rng, -corruption.pixel_jitter, corruption.pixel_jitter);
                let clean = t as f64 + jitter;
                let v = if image_corrupted {
                    (1.0 - alpha) * clean + alpha * rng::uniform(&mut rng, 0.0, 255.0)
                } else {
                    clean
                };
                libm::round(v.clamp(0.0, 255.0)) as u8
            })
            .collect();
        let image = Image::new(shape.image_height, shape.image_width, shape.image_channels, pixels)?;
        items.push(ItemRecord { id, concept, text, image, text_corrupted, image_corrupted });
    }
    Ok(items)
}

trait BernoulliExt {
    fn random_bool_compat(&mut self, p: f64) -> bool;
}

impl BernoulliExt for DetRng {
    fn random_bool_compat(&mut self, p: f64) -> bool {
        rng::uniform(self, 0.0, 1.0) < p
    }
}

pub fn gen_users(num_users: usize, latent_dim: usize, seed: u64) -> Vec<UserRecord> {
    let mut rng = rng::stream(seed, 0x05E);
    let scale = 1.0 / libm::sqrt(latent_dim.max(1) as f64);
    (0..num_users)
        .map(|id| UserRecord {
            id,
            preference: (0..latent_dim).map(|_| 2.0 * scale * rng::normal(&mut rng)).collect(),
        })
        .collect()
}

/// Logs `num_interactions` impressions at increasing timestamps. Each picks a
/// user and a target item uniformly; the target is bought when its buy
/// probability falls in the top `positive_fraction` of the whole log.
pub fn gen_interactions(
    users: &[UserRecord],
    catalog: &[ItemRecord],
    concepts: &[LatentConcept],
    num_interactions: usize,
    preference: &PreferenceModel,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if catalog.is_empty() {
        return Err(Error::contract("catalog is empty"));
    }
    if users.is_empty() || num_interactions == 0 {
        return Err(Error::contract("need at least one user and one interaction"));
    }
    check_rate("positive_fraction", preference.positive_fraction)?;
    let mut rng = rng::stream(seed, 0x1A7);
    let mut drafts = Vec::with_capacity(num_interactions);
    for t in 0..num_interactions {
        let user = rng::index(&mut rng, users.len());
        let item = rng::index(&mut rng, catalog.len());
        let latent = &concepts[catalog[item].concept].latent;
        let p = preference.buy_probability(&users[user].preference, latent, rng::normal(&mut rng));
        drafts.push((user, t as u64, item, p));
    }
    let mut sorted: Vec<f64> = drafts.iter().map(|d| d.3).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let n_pos = libm::round(preference.positive_fraction * num_interactions as f64) as usize;
    let threshold = if n_pos == 0 { f64::INFINITY } else { sorted[n_pos - 1] };
    Ok(drafts
        .into_iter()
        .map(|(user, timestamp, item, p)| InteractionRecord { user, timestamp, item, bought: p >= threshold })
        .collect())
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    let concepts = gen_concepts(config.num_concepts, config.latent_dim, &config.shape, config.seed)?;
    let items = gen_catalog(
        &concepts,
        config.num_items,
        config.text_corruption_rate,
        config.image_corruption_rate,
        &config.shape,
        &config.corruption,
        config.seed,
    )?;
    let users = gen_users(config.num_users, config.latent_dim, config.seed);
    let interactions = gen_interactions(&users, &items, &concepts, config.num_interactions, &config.preference, config.seed)?;
    Ok(Dataset { concepts, items, users, interactions })
}

/// Assigns the first `round(fraction · n)` ids, ordered by a seeded hash, to
/// the training side.
pub fn split_ids(ids: &BTreeSet<usize>, fraction: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract("split fraction must lie in (0, 1)"));
    }
    let mut keyed: Vec<(u64, usize)> = ids.iter().map(|&u| (hash_words(&[seed, 0x5b17, u as u64]), u)).collect();
    keyed.sort_unstable();
    let n_train = libm::round(fraction * ids.len() as f64) as usize;
    Ok(keyed[..n_train].iter().map(|&(_, u)| u).collect())
}

/// Splits the log by user: all records of a user land on one side.
pub fn split_dataset(
    records: &[InteractionRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
    let users: BTreeSet<usize> = records.iter().map(|r| r.user).collect();
    let train_users = split_ids(&users, fraction, seed)?;
    Ok(records.iter().partition(|r| train_users.contains(&r.user)))
}

/// Returns the ids of behavior items that were bought by `user` strictly
/// before `timestamp`, most recent last, at most `max_len` of them.
pub fn purchase_history(
    log: &[InteractionRecord],
    user: usize,
    timestamp: u64,
    max_len: usize,
) -> Vec<usize> {
    let mut bought: Vec<&InteractionRecord> =
        log.iter().filter(|r| r.user == user && r.bought && r.timestamp < timestamp).collect();
    bought.sort_by_key(|r| r.timestamp);
    let skip = bought.len().saturating_sub(max_len);
    bought[skip..].iter().map(|r| r.item).collect()
}

/// Per-user histories for every record of the log in one pass.
pub fn all_histories(log: &[InteractionRecord], max_len: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by_key(|&i| (log[i].timestamp, i));
    let num_users = log.iter().map(|r| r.user + 1).max().unwrap_or(0);
    let mut recent: Vec<Vec<(u64, usize)>> = vec![Vec::new(); num_users];
    let mut out = vec![Vec::new(); log.len()];
    let mut i = 0;
    while i < order.len() {
        // records sharing a timestamp must not see each other
        let ts = log[order[i]].timestamp;
        let mut j = i;
        while j < order.len() && log[order[j]].timestamp == ts {
            let r = &log[order[j]];
            let h = &recent[r.user];
            let skip = h.len().saturating_sub(max_len);
            out[order[j]] = h[skip..].iter().map(|&(_, item)| item).collect();
            j += 1;
        }
        for &k in &order[i..j] {
            let r = &log[k];
            if r.bought {
                recent[r.user].push((r.timestamp, r.item));
            }
        }
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            num_concepts: 10,
            num_items: 200,
            num_users: 30,
            num_interactions: 2000,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn words_are_distinct() {
        let words: BTreeSet<String> = (0..5000).map(word_for).collect();
        assert_eq!(words.len(), 5000);
    }

    #[test]
    fn degenerate_corruption_rates() {
        let cfg = small(3);
        let concepts = gen_concepts(10, 4, &cfg.shape, 3).unwrap();
        let clean = gen_catalog(&concepts, 100, 0.0, 0.0, &cfg.shape, &cfg.corruption, 3).unwrap();
        assert!(clean.iter().all(|i| !i.text_corrupted && !i.image_corrupted));
        let dirty = gen_catalog(&concepts, 100, 1.0, 0.0, &cfg.shape, &cfg.corruption, 3).unwrap();
        assert!(dirty.iter().all(|i| i.text_corrupted && !i.image_corrupted));
    }

    #[test]
    fn catalog_preconditions() {
        let cfg = small(3);
        let concepts = gen_concepts(10, 4, &cfg.shape, 3).unwrap();
        assert!(gen_catalog(&concepts, 5, 0.1, 0.1, &cfg.shape, &cfg.corruption, 3).is_err());
        assert!(gen_catalog(&concepts, 50, 1.5, 0.1, &cfg.shape, &cfg.corruption, 3).is_err());
    }

    #[test]
    fn corrupted_text_carries_foreign_tokens() {
        let cfg = small(4);
        let concepts = gen_concepts(10, 4, &cfg.shape, 4).unwrap();
        let items = gen_catalog(&concepts, 200, 1.0, 0.0, &cfg.shape, &cfg.corruption, 4).unwrap();
        for item in &items {
            let own = &concepts[item.concept].text_signature;
            let foreign = item.text.split(' ').filter(|w| !own.iter().any(|s| s == w)).count();
            assert_eq!(foreign, 3, "{}", item.text);
        }
    }

    #[test]
    fn concept_templates_keep_their_distance() {
        let cfg = small(5);
        let concepts = gen_concepts(20, 4, &cfg.shape, 5).unwrap();
        for a in 0..concepts.len() {
            for b in a + 1..concepts.len() {
                assert!(template_distance(&concepts[a].image_template, &concepts[b].image_template) >= MIN_TEMPLATE_DISTANCE);
            }
        }
    }

    #[test]
    fn orthogonal_preference_without_noise_is_a_coin_flip() {
        let model = PreferenceModel { noise: 0.0, positive_fraction: 0.2 };
        assert_eq!(model.buy_probability(&[1.0, 0.0], &[0.0, 3.0], 0.7), 0.5);
    }

    #[test]
    fn timestamps_increase_per_user() {
        let ds = generate(&small(6)).unwrap();
        let mut last = vec![None; 30];
        for r in &ds.interactions {
            if let Some(prev) = last[r.user] {
                assert!(r.timestamp > prev);
            }
            last[r.user] = Some(r.timestamp);
        }
    }

    #[test]
    fn histories_match_direct_scan() {
        let ds = generate(&small(7)).unwrap();
        let fast = all_histories(&ds.interactions, 3);
        for (i, r) in ds.interactions.iter().enumerate().step_by(37) {
            assert_eq!(fast[i], purchase_history(&ds.interactions, r.user, r.timestamp, 3));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small(8)).unwrap(), generate(&small(8)).unwrap());
        assert_ne!(generate(&small(8)).unwrap().interactions, generate(&small(9)).unwrap().interactions);
    }
}
