//! Cold-start inference, rating prediction, ranking and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::RatingRecord;
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::rng::{SeededRng, Stream};
use crate::train::Model;

pub const NDCG_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    DualColdStart,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Scenario::Standard),
            "dual_cold_start" | "dual" => Ok(Scenario::DualColdStart),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::DualColdStart => "dual_cold_start",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSide,
    NoDiffusion,
    /// Approximate: raw content embeddings replaced by seeded random vectors.
    NoMllm,
    /// User-agnostic reference: every cold-start user gets an unconditional
    /// sample from the full model.
    Chance,
}

impl Ablation {
    pub const TABLE: [Ablation; 4] = [
        Ablation::NoMllm,
        Ablation::NoDiffusion,
        Ablation::NoSide,
        Ablation::Full,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_side" => Ok(Ablation::NoSide),
            "no_diffusion" => Ok(Ablation::NoDiffusion),
            "no_mllm" => Ok(Ablation::NoMllm),
            "chance" => Ok(Ablation::Chance),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSide => "no_side",
            Ablation::NoDiffusion => "no_diffusion",
            Ablation::NoMllm => "no_mllm",
            Ablation::Chance => "chance",
        }
    }

    /// Column heading used by the ablation table.
    pub fn heading(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSide => "w/o side",
            Ablation::NoDiffusion => "w/o diffusion",
            Ablation::NoMllm => "w/o MLLM",
            Ablation::Chance => "chance",
        }
    }
}

/// Target feature for one cold-start user. `index` selects the user's
/// private sampling stream so results do not depend on evaluation order.
pub fn infer_cold_start(model: &Model, f_aux: Option<&[f64]>, seed: u64, index: u64) -> Result<Vec<f64>> {
    let f_aux = f_aux.ok_or_else(|| Error::validation("cold-start user has no auxiliary feature"))?;
    let mut rng = SeededRng::substream(seed, Stream::Inference, index);
    model.transfer_feature(f_aux, &mut rng)
}

pub fn predict_rating(f_u: &[f64], f_v: &[f64]) -> Result<f64> {
    if f_u.len() != f_v.len() {
        return Err(Error::validation(format!(
            "user feature has width {}, item feature {}",
            f_u.len(),
            f_v.len()
        )));
    }
    Ok(f_u.iter().zip(f_v).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user_id: String,
    pub items: Vec<(String, f64)>,
}

/// Sorts by score descending, then id ascending.
fn rank(scored: &mut [(String, f64)]) {
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then_with(|| a.0.cmp(&b.0)));
}

pub fn top_n(user_id: &str, f_u: &[f64], items: &EmbeddingTable, n: usize) -> Result<RankedList> {
    if n == 0 {
        return Err(Error::validation("top_n needs n >= 1"));
    }
    let mut scored = items
        .rows
        .iter()
        .map(|(id, v)| Ok((id.clone(), predict_rating(f_u, v)?)))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut scored);
    scored.truncate(n);
    Ok(RankedList {
        user_id: user_id.to_string(),
        items: scored,
    })
}

fn check_pairs(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::validation("metrics need at least one pair"));
    }
    Ok(())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(preds, truths)?;
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pairs(preds, truths)?;
    let mse = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

fn dcg(rels: impl Iterator<Item = f64>) -> f64 {
    rels.enumerate().map(|(i, r)| r / ((i + 2) as f64).log2()).sum()
}

/// Linear-gain NDCG over the first `k` ranked ids. Ids without a relevance
/// count as 0; the ideal ordering uses every relevance in the map.
pub fn ndcg_at_k(ranked: &[&str], relevance: &BTreeMap<String, f64>, k: usize) -> f64 {
    let got = dcg(ranked
        .iter()
        .take(k)
        .map(|id| relevance.get(*id).copied().unwrap_or(0.0)));
    let mut ideal: Vec<f64> = relevance.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal.into_iter().take(k));
    if best > 0.0 {
        got / best
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub beta: f64,
    pub ablation: Ablation,
    pub users: usize,
    pub pairs: usize,
    /// Test users with nothing to evaluate under this scenario.
    pub excluded_users: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub ndcg20: Option<f64>,
}

pub const TSV_HEADER: &str = "scenario\tbeta\tablation\tusers\tpairs\tmae\trmse\tndcg20";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.scenario.as_str(),
            self.beta,
            self.ablation.as_str(),
            self.users,
            self.pairs,
            cell(self.mae),
            cell(self.rmse),
            cell(self.ndcg20)
        )
    }
}

pub fn write_tsv<W: Write>(mut w: W, header: &[String], reports: &[MetricsReport]) -> std::io::Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{TSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.tsv_row())?;
    }
    Ok(())
}

/// Human-readable table of reports.
pub struct Pretty<'a>(pub &'a [MetricsReport]);

impl fmt::Display for Pretty<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>5} {:<14} {:>6} {:>7} {:>9} {:>9} {:>9}",
            "scenario", "beta", "ablation", "users", "pairs", "MAE", "RMSE", "NDCG@20"
        )?;
        for r in self.0 {
            let c = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
            writeln!(
                f,
                "{:<16} {:>5} {:<14} {:>6} {:>7} {:>9} {:>9} {:>9}",
                r.scenario.as_str(),
                r.beta,
                r.ablation.heading(),
                r.users,
                r.pairs,
                c(r.mae),
                c(r.rmse),
                c(r.ndcg20)
            )?;
        }
        Ok(())
    }
}

/// What `evaluate` needs besides the model.
pub struct EvalSet<'a> {
    pub test_users: &'a BTreeSet<String>,
    pub user_aux: &'a EmbeddingTable,
    /// Held-out target interactions of the test users.
    pub held_out: &'a [RatingRecord],
    pub item_features: &'a EmbeddingTable,
    /// Target items that have interactions in training.
    pub train_items: &'a BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scenario: Scenario,
    pub ablation: Ablation,
    pub beta: f64,
    pub seed: u64,
    pub clip: bool,
}

/// Scores one scenario. Users without evaluable interactions are excluded
/// and counted; an empty evaluation yields `NA` metrics.
pub fn evaluate(model: &Model, set: &EvalSet<'_>, opts: &EvalOptions) -> Result<MetricsReport> {
    let mut per_user: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
    for r in set.held_out {
        if !set.test_users.contains(&r.user_id) {
            continue;
        }
        if opts.scenario == Scenario::DualColdStart && set.train_items.contains(&r.item_id) {
            continue;
        }
        per_user.entry(r.user_id.as_str()).or_default().push(r);
    }

    let (mut preds, mut truths, mut ndcgs) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for (index, user) in set.test_users.iter().enumerate() {
        let Some(records) = per_user.get(user.as_str()) else {
            excluded += 1;
            continue;
        };
        let f_u = match opts.ablation {
            Ablation::Chance => {
                model.unconditional_feature(&mut SeededRng::substream(opts.seed, Stream::Inference, index as u64))?
            }
            _ => infer_cold_start(model, set.user_aux.get(user), opts.seed, index as u64)
                .map_err(|e| Error::validation(format!("user {user}: {e}")))?,
        };
        let mut scored = Vec::with_capacity(records.len());
        let mut relevance = BTreeMap::new();
        for r in records {
            let f_v = set
                .item_features
                .get(&r.item_id)
                .ok_or_else(|| Error::validation(format!("no target feature for item {}", r.item_id)))?;
            let mut p = predict_rating(&f_u, f_v)?;
            if opts.clip {
                p = p.clamp(crate::data::MIN_RATING, crate::data::MAX_RATING);
            }
            preds.push(p);
            truths.push(r.rating);
            scored.push((r.item_id.clone(), p));
            relevance.insert(r.item_id.clone(), r.rating);
        }
        rank(&mut scored);
        let ids: Vec<&str> = scored.iter().map(|(id, _)| id.as_str()).collect();
        ndcgs.push(ndcg_at_k(&ids, &relevance, NDCG_K));
    }

    let users = ndcgs.len();
    let nonempty = !preds.is_empty();
    Ok(MetricsReport {
        scenario: opts.scenario,
        beta: opts.beta,
        ablation: opts.ablation,
        users,
        pairs: preds.len(),
        excluded_users: excluded,
        mae: nonempty.then(|| mae(&preds, &truths)).transpose()?,
        rmse: nonempty.then(|| rmse(&preds, &truths)).transpose()?,
        ndcg20: (users > 0).then(|| ndcgs.iter().sum::<f64>() / users as f64),
    })
}
