//! Deterministic synthetic corpora with planted structure.
//!
//! Auxiliary user embeddings come from a Gaussian mixture. An overlapping
//! user's target embedding is `M a + noise`; side target users draw a fresh
//! latent from the same mixture and push it through `M`, so both user groups
//! share one target distribution whose component means are `M nu_k`.
//! Ratings are `clip(offset + scale * <u, v> / sqrt(d) + noise, 0, 5)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Domain, DomainDataset, RatingRecord, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::features::{EmbeddingCorpus, EmbeddingTable};
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedMap {
    #[default]
    RandomOrthogonal,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    pub overlap: f64,
    pub embed_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub components: usize,
    /// Per-coordinate standard deviation of the mixture means.
    pub mean_scale: f64,
    /// Per-coordinate standard deviation within a component.
    pub component_std: f64,
    pub ratings_per_user: usize,
    pub rating_offset: f64,
    pub rating_scale: f64,
    pub map: PlantedMap,
    /// Trailing target items rated by exactly one overlapping user each and
    /// never by side users, so that some items go cold under a split.
    pub cold_items: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users_per_domain: 200,
            items_per_domain: 300,
            overlap: 0.5,
            embed_dim: 32,
            noise: 0.1,
            seed: 42,
            components: 2,
            mean_scale: 0.8,
            component_std: 0.3,
            ratings_per_user: 20,
            rating_offset: 3.0,
            rating_scale: 1.2,
            map: PlantedMap::RandomOrthogonal,
            cold_items: 30,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users_per_domain == 0 || self.items_per_domain == 0 || self.embed_dim == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::Config(format!(
                "overlap fraction {} must lie in (0, 1)",
                self.overlap
            )));
        }
        if self.components == 0 || self.ratings_per_user == 0 {
            return Err(Error::Config("components and ratings_per_user must be positive".into()));
        }
        if self.ratings_per_user + self.cold_items > self.items_per_domain {
            return Err(Error::Config(format!(
                "ratings_per_user {} plus cold_items {} exceeds items_per_domain {}",
                self.ratings_per_user, self.cold_items, self.items_per_domain
            )));
        }
        if self.noise < 0.0 || self.component_std < 0.0 || self.mean_scale < 0.0 {
            return Err(Error::Config("noise and spread parameters must be >= 0".into()));
        }
        Ok(())
    }

    pub fn overlapping_users(&self) -> usize {
        (self.overlap * self.users_per_domain as f64 + 0.5).floor() as usize
    }
}

/// Everything needed to check what a model recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Auxiliary-to-target map, `embed_dim x embed_dim`.
    pub map: Array2<f64>,
    pub aux_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
    /// Mixture component of every user's latent.
    pub component: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub aux: DomainDataset,
    pub target: DomainDataset,
    pub embeddings: EmbeddingCorpus,
    pub truth: PlantedTruth,
}

fn random_orthogonal(d: usize, rng: &mut SeededRng) -> Array2<f64> {
    // Gram-Schmidt on a Gaussian matrix, column by column.
    let mut q = Array2::<f64>::zeros((d, d));
    let mut j = 0;
    while j < d {
        let mut v = Array1::from(rng.normal_vec(d));
        for k in 0..j {
            let qk = q.column(k);
            let proj = qk.dot(&v);
            v.scaled_add(-proj, &qk);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / norm));
        j += 1;
    }
    q
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut rng = SeededRng::new(cfg.seed, Stream::Synth);

    let aux_means: Vec<Vec<f64>> = (0..cfg.components)
        .map(|_| rng.normal_vec(d).into_iter().map(|v| v * cfg.mean_scale).collect())
        .collect();
    let map = match cfg.map {
        PlantedMap::Identity => Array2::eye(d),
        PlantedMap::RandomOrthogonal => random_orthogonal(d, &mut rng),
    };
    let target_means: Vec<Vec<f64>> = aux_means
        .iter()
        .map(|m| map.dot(&Array1::from(m.clone())).to_vec())
        .collect();

    let n_overlap = cfg.overlapping_users();
    let n_side = cfg.users_per_domain - n_overlap;
    let width = digits(cfg.users_per_domain.max(cfg.items_per_domain));

    let mut corpus = EmbeddingCorpus {
        user_aux: EmbeddingTable::new(d),
        user_target: EmbeddingTable::new(d),
        item_aux: EmbeddingTable::new(d),
        item_target: EmbeddingTable::new(d),
    };
    let mut component = BTreeMap::new();

    let draw_latent = |rng: &mut SeededRng| {
        let k = rng.below(cfg.components);
        let v: Vec<f64> = aux_means[k]
            .iter()
            .map(|m| m + cfg.component_std * rng.normal())
            .collect();
        (k, v)
    };
    let push_through = |a: &[f64], rng: &mut SeededRng| -> Vec<f64> {
        let z = map.dot(&ndarray::ArrayView1::from(a));
        z.iter().map(|v| v + cfg.noise * rng.normal()).collect()
    };

    for i in 0..n_overlap {
        let id = format!("o{i:0width$}");
        let (k, a) = draw_latent(&mut rng);
        let z = push_through(&a, &mut rng);
        corpus.user_aux.insert(id.clone(), a)?;
        corpus.user_target.insert(id.clone(), z)?;
        component.insert(id, k);
    }
    for i in 0..n_side {
        let id = format!("t{i:0width$}");
        let (k, a) = draw_latent(&mut rng);
        let z = push_through(&a, &mut rng);
        corpus.user_target.insert(id.clone(), z)?;
        component.insert(id, k);
    }
    for i in 0..n_side {
        let id = format!("a{i:0width$}");
        let (k, a) = draw_latent(&mut rng);
        corpus.user_aux.insert(id.clone(), a)?;
        component.insert(id, k);
    }
    for i in 0..cfg.items_per_domain {
        corpus.item_aux.insert(format!("ia{i:0width$}"), rng.normal_vec(d))?;
    }
    for i in 0..cfg.items_per_domain {
        corpus.item_target.insert(format!("it{i:0width$}"), rng.normal_vec(d))?;
    }

    let aux = rate(&corpus.user_aux, &corpus.item_aux, Domain::Auxiliary, 0, cfg, &mut rng)?;
    let target = rate(
        &corpus.user_target,
        &corpus.item_target,
        Domain::Target,
        cfg.cold_items,
        cfg,
        &mut rng,
    )?;

    Ok(SynthCorpus {
        aux,
        target,
        embeddings: corpus,
        truth: PlantedTruth {
            map,
            aux_means,
            target_means,
            component,
        },
    })
}

fn rate(
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    domain: Domain,
    cold: usize,
    cfg: &SynthConfig,
    rng: &mut SeededRng,
) -> Result<DomainDataset> {
    let item_ids: Vec<&String> = items.rows.keys().collect();
    let warm = item_ids.len() - cold;
    let overlapping: Vec<&String> = users.rows.keys().filter(|u| u.starts_with('o')).collect();
    let norm = (cfg.embed_dim as f64).sqrt();
    let mut records = Vec::new();
    for (user, u) in &users.rows {
        // Partial Fisher-Yates over warm item indices.
        let mut idx: Vec<usize> = (0..warm).collect();
        for j in 0..cfg.ratings_per_user {
            let pick = j + rng.below(idx.len() - j);
            idx.swap(j, pick);
        }
        let mut chosen = idx[..cfg.ratings_per_user].to_vec();
        if !overlapping.is_empty() {
            if let Ok(k) = overlapping.binary_search(&user) {
                chosen.extend((warm..item_ids.len()).filter(|j| (j - warm) % overlapping.len() == k));
            }
        }
        chosen.sort_unstable();
        for j in chosen {
            let v = &items.rows[item_ids[j]];
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let raw = cfg.rating_offset + cfg.rating_scale * dot / norm + cfg.noise * rng.normal();
            let r = (raw.clamp(MIN_RATING, MAX_RATING) * 100.0).round() / 100.0;
            records.push(RatingRecord {
                user_id: user.clone(),
                item_id: item_ids[j].clone(),
                rating: r,
                domain,
            });
        }
    }
    DomainDataset::new(domain, records)
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len().max(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_roles, Role};

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig {
            users_per_domain: 30,
            items_per_domain: 40,
            ratings_per_user: 5,
            cold_items: 5,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.target.write_tsv(&mut buf_a, &[]).unwrap();
        b.target.write_tsv(&mut buf_b, &[]).unwrap();
        assert_eq!(buf_a, buf_b);
        let c = synth_corpus(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
    }

    #[test]
    fn zero_noise_target_is_exact_map() {
        let cfg = SynthConfig {
            users_per_domain: 20,
            items_per_domain: 30,
            ratings_per_user: 5,
            noise: 0.0,
            cold_items: 5,
            ..SynthConfig::default()
        };
        let c = synth_corpus(&cfg).unwrap();
        for (id, z) in &c.embeddings.user_target.rows {
            if let Some(a) = c.embeddings.user_aux.get(id) {
                let expected = c.truth.map.dot(&ndarray::ArrayView1::from(a));
                for (x, y) in z.iter().zip(expected.iter()) {
                    assert_eq!(*x, *y);
                }
            }
        }
    }

    #[test]
    fn identity_map_zero_noise_embeddings_agree() {
        let cfg = SynthConfig {
            users_per_domain: 20,
            items_per_domain: 30,
            ratings_per_user: 5,
            noise: 0.0,
            cold_items: 5,
            map: PlantedMap::Identity,
            ..SynthConfig::default()
        };
        let c = synth_corpus(&cfg).unwrap();
        let mut checked = 0;
        for (id, z) in &c.embeddings.user_target.rows {
            if let Some(a) = c.embeddings.user_aux.get(id) {
                assert_eq!(z.as_slice(), a);
                checked += 1;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn role_counts_follow_overlap() {
        let cfg = SynthConfig {
            users_per_domain: 100,
            items_per_domain: 100,
            ratings_per_user: 3,
            overlap: 0.5,
            ..SynthConfig::default()
        };
        let c = synth_corpus(&cfg).unwrap();
        let roles = assign_roles(&c.aux, &c.target);
        assert_eq!(roles.count(Role::Overlapping), 50);
        assert_eq!(roles.count(Role::SideTarget), 50);
        assert_eq!(roles.count(Role::SideAuxiliary), 50);
    }

    #[test]
    fn map_is_orthogonal() {
        let cfg = SynthConfig {
            users_per_domain: 4,
            items_per_domain: 4,
            ratings_per_user: 1,
            embed_dim: 8,
            cold_items: 0,
            ..SynthConfig::default()
        };
        let m = synth_corpus(&cfg).unwrap().truth.map;
        let prod = m.t().dot(&m);
        for i in 0..8 {
            for j in 0..8 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ratings_stay_in_range() {
        let c = synth_corpus(&SynthConfig {
            users_per_domain: 50,
            items_per_domain: 60,
            noise: 1.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(c
            .aux
            .records
            .iter()
            .chain(&c.target.records)
            .all(|r| (0.0..=5.0).contains(&r.rating)));
        assert_eq!(c.target.records.len(), 50 * 20 + 30);
    }

    #[test]
    fn cold_items_only_rated_by_overlapping_users() {
        let c = synth_corpus(&SynthConfig {
            users_per_domain: 40,
            items_per_domain: 60,
            ratings_per_user: 5,
            cold_items: 25,
            ..SynthConfig::default()
        })
        .unwrap();
        let cold: Vec<&String> = c.embeddings.item_target.rows.keys().skip(35).collect();
        for item in cold {
            let raters: Vec<&str> = c
                .target
                .records
                .iter()
                .filter(|r| &r.item_id == item)
                .map(|r| r.user_id.as_str())
                .collect();
            assert_eq!(raters.len(), 1, "{item}");
            assert!(raters[0].starts_with('o'));
        }
        assert!(c.aux.records.iter().all(|r| r.item_id.starts_with("ia")));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_corpus(&SynthConfig {
            overlap: 1.0,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(synth_corpus(&SynthConfig {
            users_per_domain: 0,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
