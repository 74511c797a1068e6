//! Synthetic interaction logs with known structure, for offline tests and
//! demos.
//!
//! Items belong to latent themes. Every `(day, location)` context also has a
//! theme, and a session consumed in that context mostly picks items of the
//! context's theme. In `planted` mode the metadata and geo-temporal vectors
//! are noisy copies of the theme prototypes; in `null` mode both are i.i.d.
//! random unit vectors.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, CorpusError, Interaction, SECONDS_PER_DAY};
use crate::embedding::{write_embeddings, EmbeddingError, EmbeddingMatrix, GtSource, ItemMetadata};
use crate::enrichment::{Bucket, ContextKey};
use crate::io::write_atomic;

/// Monday 2021-01-04 00:00:00 UTC.
pub const DEFAULT_START: i64 = 1_609_718_400;

const GENRES: [&str; 12] = [
    "Drama", "Comedy", "Thriller", "Documentary", "Romance", "Horror", "Animation", "Western", "Musical", "Sci-Fi",
    "Mystery", "Adventure",
];
const LOCATIONS: [&str; 8] = [
    "Oslo, Norway",
    "Lisbon, Portugal",
    "Austin, USA",
    "Osaka, Japan",
    "Nairobi, Kenya",
    "Lima, Peru",
    "Perth, Australia",
    "Krakow, Poland",
];
const WORDS: [&str; 16] = [
    "River", "Glass", "Northern", "Quiet", "Iron", "Summer", "Last", "Hidden", "Paper", "Silver", "Broken", "Wild",
    "Distant", "Golden", "Midnight", "Salt",
];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Planted,
    Null,
}

impl std::str::FromStr for SynthMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "planted" => Ok(SynthMode::Planted),
            "null" => Ok(SynthMode::Null),
            other => Err(format!("unknown synth mode {other:?} (planted|null)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub n_users: usize,
    pub n_items: usize,
    pub n_themes: usize,
    pub n_locations: usize,
    pub n_days: usize,
    pub min_sessions: usize,
    pub max_sessions: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub dim: usize,
    /// Probability that a session item follows the context theme.
    pub context_signal: f64,
    /// Weight of the theme prototype in an item's metadata vector.
    pub meta_signal: f64,
    /// Weight of the theme prototype in a context vector.
    pub gt_signal: f64,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: SynthMode::Planted,
            n_users: 200,
            n_items: 400,
            n_themes: 8,
            n_locations: 4,
            n_days: 90,
            min_sessions: 3,
            max_sessions: 6,
            min_session_len: 2,
            max_session_len: 4,
            dim: 64,
            context_signal: 0.85,
            meta_signal: 0.5,
            gt_signal: 0.95,
            start_ts: DEFAULT_START,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: &str| Err(SynthError::Invalid(s.to_string()));
        if self.n_users == 0 || self.n_days == 0 || self.dim == 0 {
            return bad("n_users, n_days and dim must be positive");
        }
        if self.n_themes == 0 || self.n_items < self.n_themes {
            return bad("need at least one item per theme");
        }
        if self.n_locations == 0 || self.n_locations > LOCATIONS.len() {
            return bad("n_locations must be in 1..=8");
        }
        if self.min_sessions == 0 || self.min_sessions > self.max_sessions {
            return bad("session count range is empty");
        }
        if self.min_session_len == 0 || self.min_session_len > self.max_session_len {
            return bad("session length range is empty");
        }
        for (name, v) in [("context_signal", self.context_signal), ("meta_signal", self.meta_signal), ("gt_signal", self.gt_signal)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub log: Vec<Interaction>,
    pub items: Vec<ItemMetadata>,
    pub item_themes: Vec<usize>,
    /// Theme of every context that occurs in the log.
    pub context_themes: BTreeMap<ContextKey, usize>,
    pub item_emb: EmbeddingMatrix,
    /// Keyed by `ContextKey` with day buckets.
    pub gt_emb: EmbeddingMatrix,
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(w * proto + sqrt(1 - w^2) * noise)` with a fresh unit noise.
fn noisy<R: Rng>(rng: &mut R, proto: &[f64], w: f64) -> Vec<f32> {
    let noise = random_unit(rng, proto.len());
    let s = (1.0 - w * w).max(0.0).sqrt();
    let v: Vec<f64> = proto.iter().zip(&noise).map(|(p, n)| w * p + s * n).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

pub fn item_key(j: usize) -> String {
    format!("item{j:04}")
}

pub fn user_key(u: usize) -> String {
    format!("user{u:04}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_th = cfg.n_themes;
    let item_themes: Vec<usize> = (0..cfg.n_items).map(|j| j % n_th).collect();
    let by_theme: Vec<Vec<usize>> = (0..n_th).map(|t| (t..cfg.n_items).step_by(n_th).collect()).collect();
    let items: Vec<ItemMetadata> = (0..cfg.n_items)
        .map(|j| {
            let th = item_themes[j];
            let title = format!("{} {} {}", WORDS[rng.random_range(0..WORDS.len())], WORDS[(j / n_th) % WORDS.len()], j);
            let mut genres = vec![GENRES[th % GENRES.len()].to_string()];
            if rng.random::<f64>() < 0.3 {
                genres.push(GENRES[rng.random_range(0..GENRES.len())].to_string());
            }
            ItemMetadata { item_id: item_key(j), title, genres }
        })
        .collect();

    let ctx_theme: Vec<Vec<usize>> =
        (0..cfg.n_days).map(|_| (0..cfg.n_locations).map(|_| rng.random_range(0..n_th)).collect()).collect();

    let bucket = Bucket::Day;
    let mut log = Vec::new();
    let mut context_themes = BTreeMap::new();
    for u in 0..cfg.n_users {
        let home = rng.random_range(0..cfg.n_locations);
        let n_sessions = rng.random_range(cfg.min_sessions..=cfg.max_sessions);
        let mut days: Vec<usize> = (0..n_sessions).map(|_| rng.random_range(0..cfg.n_days)).collect();
        days.sort_unstable();
        days.dedup();
        for day in days {
            let loc = if rng.random::<f64>() < 0.8 { home } else { rng.random_range(0..cfg.n_locations) };
            let theme = ctx_theme[day][loc];
            let len = rng.random_range(cfg.min_session_len..=cfg.max_session_len);
            let start = cfg.start_ts + day as i64 * SECONDS_PER_DAY + rng.random_range(8..20) * 3600;
            for k in 0..len {
                let item = if rng.random::<f64>() < cfg.context_signal {
                    *by_theme[theme].choose(&mut rng).expect("theme has items")
                } else {
                    rng.random_range(0..cfg.n_items)
                };
                let rec = Interaction::new(user_key(u), item_key(item), start + k as i64 * 1800, LOCATIONS[loc]);
                context_themes.insert(ContextKey::of(&rec, bucket), theme);
                log.push(rec);
            }
        }
    }

    let mut emb_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let protos: Vec<Vec<f64>> = (0..n_th).map(|_| random_unit(&mut emb_rng, cfg.dim)).collect();
    let item_rows: Vec<Vec<f32>> = match cfg.mode {
        SynthMode::Planted => item_themes.iter().map(|&t| noisy(&mut emb_rng, &protos[t], cfg.meta_signal)).collect(),
        SynthMode::Null => (0..cfg.n_items).map(|_| to_f32(random_unit(&mut emb_rng, cfg.dim))).collect(),
    };
    let item_emb = EmbeddingMatrix::from_rows((0..cfg.n_items).map(item_key).collect(), &item_rows, true)?;
    let gt_rows: Vec<Vec<f32>> = match cfg.mode {
        SynthMode::Planted => context_themes.values().map(|&t| noisy(&mut emb_rng, &protos[t], cfg.gt_signal)).collect(),
        SynthMode::Null => context_themes.keys().map(|_| to_f32(random_unit(&mut emb_rng, cfg.dim))).collect(),
    };
    let gt_emb = EmbeddingMatrix::from_rows(context_themes.keys().map(|k| k.to_string()).collect(), &gt_rows, true)?;
    Ok(SynthDataset { config: cfg.clone(), log, items, item_themes, context_themes, item_emb, gt_emb })
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Same keys as `m`, i.i.d. random unit rows.
pub fn noise_like(m: &EmbeddingMatrix, seed: u64) -> Result<EmbeddingMatrix, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f32>> = (0..m.len()).map(|_| to_f32(random_unit(&mut rng, m.dim()))).collect();
    Ok(EmbeddingMatrix::from_rows(m.keys().to_vec(), &rows, true)?)
}

impl SynthDataset {
    pub fn gt_source(&self) -> GtSource {
        GtSource::new(self.gt_emb.clone(), Bucket::Day)
    }

    /// Writes `log.jsonl`, `items.jsonl`, `items.gtemb`, `contexts.gtemb` and
    /// `synth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("log.jsonl"), &self.log)?;
        let mut items = String::new();
        for it in &self.items {
            items.push_str(&serde_json::to_string(it).expect("metadata serializes"));
            items.push('\n');
        }
        write_atomic(&dir.join("items.jsonl"), items.as_bytes())?;
        write_embeddings(&dir.join("items.gtemb"), &self.item_emb)?;
        write_embeddings(&dir.join("contexts.gtemb"), &self.gt_emb)?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        write_atomic(&dir.join("synth.json"), cfg.as_bytes())?;
        Ok(())
    }
}

/// A log with matching item and context matrices, for the informativeness
/// test.
#[derive(Clone, Debug)]
pub struct DiagDataset {
    pub log: Vec<Interaction>,
    pub items: EmbeddingMatrix,
    pub gt: GtSource,
}

/// Every user lives in a single private context, and the metadata row of
/// their held-out last item is exactly that context's vector. Other items are
/// random unit vectors.
pub fn diagnostic_planted(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<DiagDataset, SynthError> {
    if n_items <= n_users {
        return Err(SynthError::Invalid("need more items than users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item_rows: Vec<Vec<f32>> = (0..n_items).map(|_| to_f32(random_unit(&mut rng, dim))).collect();
    let mut log = Vec::new();
    let mut keys = Vec::new();
    let mut gt_rows = Vec::new();
    for u in 0..n_users {
        let day = DEFAULT_START + u as i64 * SECONDS_PER_DAY;
        let t = to_f32(random_unit(&mut rng, dim));
        for k in 0..2 {
            let filler = n_users + rng.random_range(0..n_items - n_users);
            log.push(Interaction::new(user_key(u), item_key(filler), day + 3600 * (k + 1), "Planted"));
        }
        log.push(Interaction::new(user_key(u), item_key(u), day + 3600 * 5, "Planted"));
        item_rows[u] = t.clone();
        keys.push(ContextKey::of(&log[log.len() - 1], Bucket::Day).to_string());
        gt_rows.push(t);
    }
    let items = EmbeddingMatrix::from_rows((0..n_items).map(item_key).collect(), &item_rows, true)?;
    let gt = GtSource::new(EmbeddingMatrix::from_rows(keys, &gt_rows, true)?, Bucket::Day);
    Ok(DiagDataset { log, items, gt })
}

/// Random log with i.i.d. random unit item and context vectors.
pub fn diagnostic_null(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<DiagDataset, SynthError> {
    if n_items == 0 || n_users == 0 {
        return Err(SynthError::Invalid("need users and items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut keys = std::collections::BTreeSet::new();
    for u in 0..n_users {
        let len = rng.random_range(3..=6);
        for _ in 0..len {
            let day = rng.random_range(0..60);
            let loc = LOCATIONS[rng.random_range(0..4)];
            let rec = Interaction::new(
                user_key(u),
                item_key(rng.random_range(0..n_items)),
                DEFAULT_START + day * SECONDS_PER_DAY + rng.random_range(0..SECONDS_PER_DAY),
                loc,
            );
            keys.insert(ContextKey::of(&rec, Bucket::Day).to_string());
            log.push(rec);
        }
    }
    let item_rows: Vec<Vec<f32>> = (0..n_items).map(|_| to_f32(random_unit(&mut rng, dim))).collect();
    let items = EmbeddingMatrix::from_rows((0..n_items).map(item_key).collect(), &item_rows, true)?;
    let gt_rows: Vec<Vec<f32>> = keys.iter().map(|_| to_f32(random_unit(&mut rng, dim))).collect();
    let gt = GtSource::new(EmbeddingMatrix::from_rows(keys.into_iter().collect(), &gt_rows, true)?, Bucket::Day);
    Ok(DiagDataset { log, items, gt })
}
