//! Stage-0 fitting of the per-domain user and item projectors.
//!
//! Each domain's projectors are fit so that `f_u . f_v` regresses the
//! observed ratings (full-batch Adam). The resulting feature tables are
//! frozen and serve as diffusion targets and conditions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Domain, DomainDataset, RatingRecord};
use crate::error::{Error, Result};
use crate::features::{missing_error, EmbeddingCorpus, EmbeddingTable, FeatureProjector};
use crate::losses::{rating_loss_grad, RatingPair};
use crate::nn::{adam_step, Activation, AdamConfig, OptimizerState};
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Dropout after the hidden layer, training only.
    pub dropout: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 128,
            epochs: 500,
            learning_rate: 3e-3,
            dropout: 0.1,
            activation: Activation::Tanh,
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainProjectors {
    pub user: FeatureProjector,
    pub item: FeatureProjector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Frozen feature tables for both domains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTables {
    pub user_aux: EmbeddingTable,
    pub user_target: EmbeddingTable,
    pub item_aux: EmbeddingTable,
    pub item_target: EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub aux: DomainProjectors,
    pub target: DomainProjectors,
    pub features: FeatureTables,
    pub aux_stats: PretrainStats,
    pub target_stats: PretrainStats,
    /// Raw target item embeddings, kept for projector co-training.
    pub raw_item_target: EmbeddingTable,
}

fn domain_index(domain: Domain) -> u64 {
    match domain {
        Domain::Auxiliary => 0,
        Domain::Target => 1,
    }
}

/// Ids used by the records, checked against the embedding table.
fn rated_ids<'a>(ids: impl Iterator<Item = &'a str>, table: &EmbeddingTable) -> Result<Vec<&'a str>> {
    let set: BTreeSet<&str> = ids.collect();
    let missing: Vec<&str> = set.iter().copied().filter(|id| table.get(id).is_none()).collect();
    if !missing.is_empty() {
        return Err(missing_error(&missing));
    }
    Ok(set.into_iter().collect())
}

/// Fits one domain's user and item projectors on its ratings.
pub fn pretrain_domain(
    records: &[RatingRecord],
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    domain: Domain,
    cfg: &PretrainConfig,
) -> Result<(DomainProjectors, PretrainStats)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::validation(format!("no {domain} ratings to pretrain on")));
    }
    let user_ids = rated_ids(records.iter().map(|r| r.user_id.as_str()), users)?;
    let item_ids = rated_ids(records.iter().map(|r| r.item_id.as_str()), items)?;
    let user_pos: BTreeMap<&str, usize> = user_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let item_pos: BTreeMap<&str, usize> = item_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let pairs: Vec<RatingPair> = records
        .iter()
        .map(|r| RatingPair {
            user: user_pos[r.user_id.as_str()],
            item: item_pos[r.item_id.as_str()],
            rating: r.rating,
        })
        .collect();
    let xu = users.matrix(user_ids.iter().copied())?;
    let xv = items.matrix(item_ids.iter().copied())?;

    let d = domain_index(domain);
    let mut init = SeededRng::substream(cfg.seed, Stream::Init, d);
    let mut proj = DomainProjectors {
        user: FeatureProjector::new(users.dim, cfg.hidden_dim, cfg.feature_dim, cfg.activation, &mut init),
        item: FeatureProjector::new(items.dim, cfg.hidden_dim, cfg.feature_dim, cfg.activation, &mut init),
    };
    let mut drop_rng = SeededRng::substream(cfg.seed, Stream::Dropout, d);
    let mut user_opt = OptimizerState::new(&proj.user, AdamConfig::default());
    let mut item_opt = OptimizerState::new(&proj.item, AdamConfig::default());

    let eval_loss = |p: &DomainProjectors| -> Result<f64> {
        let fu = p.user.forward(&xu)?;
        let fv = p.item.forward(&xv)?;
        Ok(rating_loss_grad(&fu, &fv, &pairs)?.0)
    };
    let initial_loss = eval_loss(&proj)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let tu = proj.user.forward_train(&xu, cfg.dropout, &mut drop_rng)?;
        let tv = proj.item.forward_train(&xv, cfg.dropout, &mut drop_rng)?;
        let (loss, du, dv) = rating_loss_grad(tu.output(), tv.output(), &pairs)?;
        epoch_losses.push(loss);
        let mut gu = proj.user.zeros_like();
        let mut gv = proj.item.zeros_like();
        proj.user.backward(&tu, &du, &mut gu);
        proj.item.backward(&tv, &dv, &mut gv);
        adam_step(&mut proj.user, &gu, &mut user_opt, cfg.learning_rate)?;
        adam_step(&mut proj.item, &gv, &mut item_opt, cfg.learning_rate)?;
    }
    // Persisted projectors are 32-bit; evaluate what will be stored.
    use crate::nn::Parameters;
    proj.user.round_to_f32();
    proj.item.round_to_f32();
    let final_loss = eval_loss(&proj)?;
    Ok((
        proj,
        PretrainStats {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}

/// Projects every row of `table` through `proj`.
pub fn project_table(table: &EmbeddingTable, proj: &FeatureProjector) -> Result<EmbeddingTable> {
    if table.is_empty() {
        return Ok(EmbeddingTable::new(proj.output_dim()));
    }
    let ids: Vec<&str> = table.rows.keys().map(String::as_str).collect();
    let m = table.matrix(ids.iter().copied())?;
    EmbeddingTable::from_matrix(ids, &proj.forward(&m)?)
}

/// Fits both domains and freezes the feature tables.
///
/// `target_train` must exclude the held-out cold-start users: their target
/// features are never computed here. Auxiliary features cover every
/// auxiliary user; item features cover every item with an embedding.
pub fn pretrain_projectors(
    aux: &DomainDataset,
    target_train: &DomainDataset,
    embeddings: &EmbeddingCorpus,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    let (aux_proj, aux_stats) = pretrain_domain(
        &aux.records,
        &embeddings.user_aux,
        &embeddings.item_aux,
        Domain::Auxiliary,
        cfg,
    )?;
    let (target_proj, target_stats) = pretrain_domain(
        &target_train.records,
        &embeddings.user_target,
        &embeddings.item_target,
        Domain::Target,
        cfg,
    )?;
    let features = freeze_features(aux, target_train, embeddings, &aux_proj, &target_proj)?;
    Ok(Pretrained {
        aux: aux_proj,
        target: target_proj,
        features,
        aux_stats,
        target_stats,
        raw_item_target: embeddings.item_target.clone(),
    })
}

/// Feature tables from fitted projectors. Deterministic, so a stored
/// projector set reproduces the tables exactly.
pub fn freeze_features(
    aux: &DomainDataset,
    target_train: &DomainDataset,
    embeddings: &EmbeddingCorpus,
    aux_proj: &DomainProjectors,
    target_proj: &DomainProjectors,
) -> Result<FeatureTables> {
    Ok(FeatureTables {
        user_aux: project_table(&restrict(&embeddings.user_aux, &aux.users), &aux_proj.user)?,
        user_target: project_table(
            &restrict(&embeddings.user_target, &target_train.users),
            &target_proj.user,
        )?,
        item_aux: project_table(&embeddings.item_aux, &aux_proj.item)?,
        item_target: project_table(&embeddings.item_target, &target_proj.item)?,
    })
}

fn restrict(table: &EmbeddingTable, ids: &BTreeSet<String>) -> EmbeddingTable {
    EmbeddingTable {
        dim: table.dim,
        rows: table
            .rows
            .iter()
            .filter(|(id, _)| ids.contains(*id))
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect(),
    }
}
