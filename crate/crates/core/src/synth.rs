//! Synthetic interaction data with a planted attribute preference.
//!
//! Item `j` carries attribute `j mod A`; each user prefers one attribute and
//! interacts with every item independently, with probability `1 − noise` for
//! items of the preferred attribute and `noise` otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Dataset, ALIGNMENT_FILE, INTERACTIONS_FILE, TRIPLES_FILE};
use crate::error::{KcanError, Result};
use crate::graph::{parse_alignment, parse_interactions, parse_triples};
use crate::rng::stream;

pub const ATTRIBUTE_RELATION: &str = "has_attribute";
const MIN_INTERACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 100,
            attributes: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.attributes == 0 {
            return Err(KcanError::Config("users and attributes must be positive".into()));
        }
        if self.items < self.attributes * MIN_INTERACTIONS {
            return Err(KcanError::Config(format!(
                "need at least {} items so every attribute has {MIN_INTERACTIONS}",
                self.attributes * MIN_INTERACTIONS
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(KcanError::Config("noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Sorted `(user, item)` indices.
    pub interactions: Vec<(usize, usize)>,
    pub preferred: Vec<usize>,
    pub item_attribute: Vec<usize>,
}

pub fn user_name(u: usize) -> String {
    format!("u{u}")
}

pub fn item_name(i: usize) -> String {
    format!("i{i}")
}

fn item_entity_name(i: usize) -> String {
    format!("item{i}")
}

fn attribute_name(a: usize) -> String {
    format!("attr{a}")
}

/// Draws the planted dataset. Users left with fewer than two interactions get
/// extra preferred-attribute items so that a leave-one-out split is possible.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let item_attribute: Vec<usize> = (0..cfg.items).map(|i| i % cfg.attributes).collect();
    let mut rng = stream(cfg.seed, &[0x5EED]);
    let preferred: Vec<usize> = (0..cfg.users).map(|_| rng.random_range(0..cfg.attributes)).collect();
    let mut interactions = Vec::new();
    for (u, &pref) in preferred.iter().enumerate() {
        let mut mine: Vec<usize> = (0..cfg.items)
            .filter(|&i| {
                let p = if item_attribute[i] == pref {
                    1.0 - cfg.noise
                } else {
                    cfg.noise
                };
                rng.random::<f64>() < p
            })
            .collect();
        if mine.len() < MIN_INTERACTIONS {
            let mut extra: Vec<usize> = (0..cfg.items)
                .filter(|&i| item_attribute[i] == pref && !mine.contains(&i))
                .collect();
            extra.shuffle(&mut rng);
            let need = MIN_INTERACTIONS - mine.len();
            mine.extend(extra.into_iter().take(need));
            mine.sort_unstable();
        }
        interactions.extend(mine.into_iter().map(|i| (u, i)));
    }
    Ok(SynthData {
        interactions,
        preferred,
        item_attribute,
    })
}

impl SynthData {
    pub fn interactions_tsv(&self) -> String {
        let mut out = String::new();
        for &(u, i) in &self.interactions {
            writeln!(out, "{}\t{}", user_name(u), item_name(i)).expect("write to String");
        }
        out
    }

    pub fn triples_tsv(&self) -> String {
        let mut out = String::new();
        for (i, &a) in self.item_attribute.iter().enumerate() {
            writeln!(
                out,
                "{}\t{ATTRIBUTE_RELATION}\t{}",
                item_entity_name(i),
                attribute_name(a)
            )
            .expect("write to String");
        }
        out
    }

    pub fn alignment_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.item_attribute.len() {
            writeln!(out, "{}\t{}", item_name(i), item_entity_name(i)).expect("write to String");
        }
        out
    }

    /// Writes the three files a data directory holds.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| KcanError::io(dir, e))?;
        for (name, body) in [
            (INTERACTIONS_FILE, self.interactions_tsv()),
            (TRIPLES_FILE, self.triples_tsv()),
            (ALIGNMENT_FILE, self.alignment_tsv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| KcanError::io(&path, e))?;
        }
        Ok(())
    }

    /// The dataset exactly as [`Dataset::load`] would read it from disk.
    pub fn dataset(&self, split_seed: u64) -> Result<Dataset> {
        let inter = parse_interactions(self.interactions_tsv().as_bytes(), INTERACTIONS_FILE)?;
        let kg = parse_triples(self.triples_tsv().as_bytes(), TRIPLES_FILE)?;
        let alignment = parse_alignment(self.alignment_tsv().as_bytes(), ALIGNMENT_FILE)?;
        Dataset::build(&inter, &kg, &alignment, split_seed)
    }
}

/// AUC of the scorer that ranks preferred-attribute items first, for a held-out
/// positive against a random non-interacted item, with `items / attributes`
/// items per attribute.
pub fn bayes_auc(items: usize, attributes: usize, noise: f64) -> f64 {
    let n = items as f64;
    let na = n / attributes as f64;
    let p_pos = (1.0 - noise) * na / ((1.0 - noise) * na + noise * (n - na));
    let p_neg = noise * na / (noise * na + (1.0 - noise) * (n - na));
    p_pos * (1.0 - p_neg) + 0.5 * (p_pos * p_neg + (1.0 - p_pos) * (1.0 - p_neg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_interactions_are_all_preferred() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert!(d
            .interactions
            .iter()
            .all(|&(u, i)| d.item_attribute[i] == d.preferred[u]));
        assert_eq!(d.interactions.len(), 200 * 50);
    }

    #[test]
    fn same_seed_same_files() {
        let cfg = SynthConfig::default();
        let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_eq!(a.interactions_tsv(), b.interactions_tsv());
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.interactions_tsv(), c.interactions_tsv());
    }

    #[test]
    fn every_user_has_two_interactions() {
        let cfg = SynthConfig {
            noise: 0.0,
            items: 4,
            users: 30,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        for u in 0..30 {
            assert!(d.interactions.iter().filter(|p| p.0 == u).count() >= 2);
        }
    }

    #[test]
    fn invalid_counts_are_rejected() {
        assert!(generate(&SynthConfig {
            users: 0,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            items: 3,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            noise: 0.7,
            ..SynthConfig::default()
        })
        .is_err());
    }

    #[test]
    fn bayes_bound_values() {
        assert!((bayes_auc(100, 2, 0.1) - 0.9).abs() < 1e-12);
        assert_eq!(bayes_auc(100, 2, 0.0), 1.0);
        assert!((bayes_auc(100, 2, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn files_load_into_a_dataset() {
        let d = generate(&SynthConfig::default()).unwrap();
        let ds = d.dataset(0).unwrap();
        assert_eq!(ds.graph.user_count(), 200);
        assert_eq!(ds.graph.item_count(), 100);
        // items + attributes + users
        assert_eq!(ds.graph.entity_count(), 100 + 2 + 200);
        assert_eq!(ds.test_edges.len(), 200);
    }
}
