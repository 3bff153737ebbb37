//! End-to-end wiring: split, pretrain, train and evaluate, plus the
//! ablation matrix and the diffusion-step sweep.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{assign_roles, split_cold_start, DomainDataset, RatingRecord, Role, RoleAssignment, SplitSpec};
use crate::diffusion::sample_batch;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Ablation, EvalOptions, EvalSet, MetricsReport, Scenario};
use crate::features::{EmbeddingCorpus, EmbeddingTable};
use crate::losses::RatingPair;
use crate::pretrain::{pretrain_projectors, project_table, PretrainConfig, Pretrained};
use crate::rng::{SeededRng, Stream};
use crate::train::{train, Model, OverlapData, TrainConfig, TrainInputs, TrainReport};

/// Ratings of both domains plus the raw content embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub aux: DomainDataset,
    pub target: DomainDataset,
    pub embeddings: EmbeddingCorpus,
}

impl From<crate::synth::SynthCorpus> for Corpus {
    fn from(c: crate::synth::SynthCorpus) -> Self {
        Corpus {
            aux: c.aux,
            target: c.target,
            embeddings: c.embeddings,
        }
    }
}

impl Corpus {
    /// SHA-256 over the canonical text form of every input.
    pub fn data_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        self.aux.write_tsv(&mut buf, &[]).expect("in-memory write");
        self.target.write_tsv(&mut buf, &[]).expect("in-memory write");
        for t in [
            &self.embeddings.user_aux,
            &self.embeddings.user_target,
            &self.embeddings.item_aux,
            &self.embeddings.item_target,
        ] {
            t.write(&mut buf, &[]).expect("in-memory write");
            buf.push(b'\n');
        }
        h.update(&buf);
        hex::encode(h.finalize())
    }
}

/// Everything run-level that is not a model hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub scenarios: Vec<Scenario>,
    pub clip: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            scenarios: vec![Scenario::Standard, Scenario::DualColdStart],
            clip: false,
        }
    }
}

impl PipelineConfig {
    /// Copies the run seed into every stage.
    pub fn seeded(mut self) -> Self {
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub beta: f64,
    pub roles: RoleAssignment,
    pub train_overlap: BTreeSet<String>,
    pub test_cold: BTreeSet<String>,
    /// Target records of every non-test user.
    pub target_train: DomainDataset,
    /// Target records of the test users.
    pub held_out: Vec<RatingRecord>,
    pub train_items: BTreeSet<String>,
}

pub fn prepare_split(corpus: &Corpus, beta: f64, seed: u64) -> Result<SplitData> {
    let roles = assign_roles(&corpus.aux, &corpus.target);
    let split = split_cold_start(&roles, &SplitSpec::new(beta, seed)?)?;
    let (held_out, kept): (Vec<RatingRecord>, Vec<RatingRecord>) = corpus
        .target
        .records
        .iter()
        .cloned()
        .partition(|r| split.test_cold.contains(&r.user_id));
    let target_train = DomainDataset::new(corpus.target.domain, kept)?;
    let train_items = target_train.items.clone();
    Ok(SplitData {
        beta,
        roles: roles.with_split(&split),
        train_overlap: split.train_overlap,
        test_cold: split.test_cold,
        target_train,
        held_out,
        train_items,
    })
}

pub fn pretrain_split(corpus: &Corpus, split: &SplitData, no_mllm: bool, cfg: &PretrainConfig) -> Result<Pretrained> {
    let randomized;
    let embeddings = if no_mllm {
        randomized = corpus.embeddings.randomized(cfg.seed);
        &randomized
    } else {
        &corpus.embeddings
    };
    pretrain_projectors(&corpus.aux, &split.target_train, embeddings, cfg)
}

/// Stage inputs: side users' target features, and the aligned overlap
/// matrices with the training users' target ratings.
pub fn train_inputs(pre: &Pretrained, split: &SplitData, cfg: &TrainConfig) -> Result<TrainInputs> {
    let f = &pre.features;
    let side_ids: Vec<String> = split.roles.users_with(Role::SideTarget).into_iter().collect();
    let side = f.user_target.matrix(side_ids.iter().map(String::as_str))?;
    let users: Vec<&str> = split.train_overlap.iter().map(String::as_str).collect();
    let aux = f.user_aux.matrix(users.iter().copied())?;
    let target = f.user_target.matrix(users.iter().copied())?;
    let item_ids: Vec<&str> = f.item_target.rows.keys().map(String::as_str).collect();
    let items = f.item_target.matrix(item_ids.iter().copied())?;
    let user_index: BTreeMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let item_index: BTreeMap<&str, usize> = item_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let ratings = split
        .target_train
        .records
        .iter()
        .filter_map(|r| {
            let user = *user_index.get(r.user_id.as_str())?;
            Some(
                item_index
                    .get(r.item_id.as_str())
                    .map(|&item| RatingPair {
                        user,
                        item,
                        rating: r.rating,
                    })
                    .ok_or_else(|| Error::validation(format!("no target feature for item {}", r.item_id))),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (item_raw, item_projector) = if cfg.co_train_items {
        (Some(pre_raw_items(pre)?), Some(pre.target.item.clone()))
    } else {
        (None, None)
    };
    Ok(TrainInputs {
        side,
        overlap: OverlapData {
            aux,
            target,
            ratings,
            items,
            item_raw,
        },
        item_projector,
    })
}

fn pre_raw_items(pre: &Pretrained) -> Result<Array2<f64>> {
    let t = &pre.raw_item_target;
    t.matrix(t.rows.keys().map(String::as_str))
}

/// Training config for an ablation; `Chance` shares the full model.
pub fn ablation_config(base: &TrainConfig, ablation: Ablation) -> TrainConfig {
    let mut cfg = base.clone();
    match ablation {
        Ablation::NoSide => cfg.no_side = true,
        Ablation::NoDiffusion => cfg.no_diffusion = true,
        Ablation::Full | Ablation::NoMllm | Ablation::Chance => {}
    }
    cfg
}

/// Item features used at evaluation time: co-trained if available.
pub fn eval_item_features(model: &Model, pre: &Pretrained) -> Result<EmbeddingTable> {
    match &model.item_projector {
        Some(p) => project_table(&pre.raw_item_target, p),
        None => Ok(pre.features.item_target.clone()),
    }
}

pub struct RunOutput {
    pub model: Model,
    pub report: TrainReport,
    pub metrics: Vec<MetricsReport>,
}

/// Trains one ablation on a prepared, pretrained split and stamps the
/// model with its provenance.
pub fn train_split(
    pre: &Pretrained,
    split: &SplitData,
    ablation: Ablation,
    cfg: &PipelineConfig,
    data_hash: &str,
) -> Result<(Model, TrainReport)> {
    let tcfg = ablation_config(&cfg.train, ablation);
    let inputs = train_inputs(pre, split, &tcfg)?;
    let (mut model, report) = train(inputs, &tcfg)?;
    model.info.insert("data_hash".into(), data_hash.into());
    model.info.insert("beta".into(), split.beta.into());
    model.info.insert("ablation".into(), ablation.as_str().into());
    model.info.insert("split_seed".into(), cfg.seed.into());
    model.info.insert("test_users".into(), split.test_cold.len().into());
    Ok((model, report))
}

/// Trains and evaluates one ablation.
pub fn run_one(
    pre: &Pretrained,
    split: &SplitData,
    ablation: Ablation,
    cfg: &PipelineConfig,
    data_hash: &str,
) -> Result<RunOutput> {
    let (model, report) = train_split(pre, split, ablation, cfg, data_hash)?;
    let metrics = evaluate_model(&model, pre, split, ablation, cfg)?;
    Ok(RunOutput { model, report, metrics })
}

pub fn evaluate_model(
    model: &Model,
    pre: &Pretrained,
    split: &SplitData,
    ablation: Ablation,
    cfg: &PipelineConfig,
) -> Result<Vec<MetricsReport>> {
    let items = eval_item_features(model, pre)?;
    let set = EvalSet {
        test_users: &split.test_cold,
        user_aux: &pre.features.user_aux,
        held_out: &split.held_out,
        item_features: &items,
        train_items: &split.train_items,
    };
    cfg.scenarios
        .iter()
        .map(|&scenario| {
            evaluate(
                model,
                &set,
                &EvalOptions {
                    scenario,
                    ablation,
                    beta: split.beta,
                    seed: cfg.seed,
                    clip: cfg.clip,
                },
            )
        })
        .collect()
}

/// One report per (beta, ablation, scenario). Pretraining is shared by
/// every ablation except `NoMllm`, and `Chance` reuses the full model.
pub fn ablation_matrix(
    corpus: &Corpus,
    betas: &[f64],
    ablations: &[Ablation],
    cfg: &PipelineConfig,
) -> Result<Vec<MetricsReport>> {
    let hash = corpus.data_hash();
    let mut out = Vec::new();
    for &beta in betas {
        let split = prepare_split(corpus, beta, cfg.seed)?;
        let base = pretrain_split(corpus, &split, false, &cfg.pretrain)?;
        let mut full: Option<Model> = None;
        for &ablation in ablations {
            log::info!("beta={beta} ablation={}", ablation.as_str());
            match ablation {
                Ablation::NoMllm => {
                    let pre = pretrain_split(corpus, &split, true, &cfg.pretrain)?;
                    out.extend(run_one(&pre, &split, ablation, cfg, &hash)?.metrics);
                }
                Ablation::Chance | Ablation::Full if full.is_some() => {
                    let model = full.as_ref().expect("checked");
                    out.extend(evaluate_model(model, &base, &split, ablation, cfg)?);
                }
                Ablation::Chance | Ablation::Full => {
                    let run = run_one(&base, &split, Ablation::Full, cfg, &hash)?;
                    let metrics = if ablation == Ablation::Full {
                        run.metrics
                    } else {
                        evaluate_model(&run.model, &base, &split, ablation, cfg)?
                    };
                    out.extend(metrics);
                    full = Some(run.model);
                }
                _ => out.extend(run_one(&base, &split, ablation, cfg, &hash)?.metrics),
            }
        }
    }
    Ok(out)
}

/// Renders reports as an ablation table: one block per scenario, rows are
/// (beta, metric), columns are ablation modes.
pub fn ablation_table(reports: &[MetricsReport], ablations: &[Ablation]) -> String {
    let mut out = String::new();
    let scenarios: BTreeSet<Scenario> = reports.iter().map(|r| r.scenario).collect();
    for scenario in scenarios {
        out.push_str(&format!("[{}]\n{:<6} {:<8}", scenario.as_str(), "beta", "metric"));
        for a in ablations {
            out.push_str(&format!(" {:>14}", a.heading()));
        }
        out.push('\n');
        let mut betas: Vec<f64> = reports
            .iter()
            .filter(|r| r.scenario == scenario)
            .map(|r| r.beta)
            .collect();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        for beta in betas {
            for (name, get) in [
                ("MAE", (|r: &MetricsReport| r.mae) as fn(&MetricsReport) -> Option<f64>),
                ("RMSE", |r| r.rmse),
                ("NDCG@20", |r| r.ndcg20),
            ] {
                out.push_str(&format!("{:<6} {:<8}", format!("{:.0}%", beta * 100.0), name));
                for a in ablations {
                    let v = reports
                        .iter()
                        .find(|r| r.scenario == scenario && r.beta == beta && r.ablation == *a)
                        .and_then(get);
                    out.push_str(&format!(" {:>14}", v.map_or("NA".into(), |v| format!("{v:.4}"))));
                }
                out.push('\n');
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub report: MetricsReport,
}

/// Full-model runs over several step counts on one split.
pub fn step_sweep(corpus: &Corpus, beta: f64, steps: &[usize], cfg: &PipelineConfig) -> Result<Vec<SweepPoint>> {
    let hash = corpus.data_hash();
    let split = prepare_split(corpus, beta, cfg.seed)?;
    let pre = pretrain_split(corpus, &split, false, &cfg.pretrain)?;
    let mut out = Vec::new();
    for &t in steps {
        log::info!("sweep steps={t}");
        let mut run_cfg = cfg.clone();
        run_cfg.train.steps = t;
        run_cfg.scenarios = vec![Scenario::Standard];
        let run = run_one(&pre, &split, Ablation::Full, &run_cfg, &hash)?;
        out.push(SweepPoint {
            steps: t,
            report: run.metrics.into_iter().next().expect("one scenario"),
        });
    }
    Ok(out)
}

/// Text report of the sweep: RMSE per step count, the best one, and the
/// direction of each consecutive change.
pub fn sweep_report(points: &[SweepPoint]) -> String {
    let mut out = format!("{:>6} {:>9} {:>9} {:>9}\n", "T", "RMSE", "MAE", "NDCG@20");
    let f = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.4}"));
    for p in points {
        out.push_str(&format!(
            "{:>6} {:>9} {:>9} {:>9}\n",
            p.steps,
            f(p.report.rmse),
            f(p.report.mae),
            f(p.report.ndcg20)
        ));
    }
    let trend: Vec<&str> = points
        .windows(2)
        .map(|w| match (w[0].report.rmse, w[1].report.rmse) {
            (Some(a), Some(b)) if b < a => "down",
            (Some(a), Some(b)) if b > a => "up",
            (Some(_), Some(_)) => "flat",
            _ => "NA",
        })
        .collect();
    out.push_str(&format!("rmse trend: {}\n", trend.join(" ")));
    let monotone =
        trend.iter().all(|t| *t == "down" || *t == "flat") || trend.iter().all(|t| *t == "up" || *t == "flat");
    out.push_str(&format!("monotone: {monotone}\n"));
    if let Some(best) = best_steps(points) {
        out.push_str(&format!("best T: {best}\n"));
    }
    out
}

pub fn best_steps(points: &[SweepPoint]) -> Option<usize> {
    points
        .iter()
        .filter_map(|p| p.report.rmse.map(|r| (p.steps, r)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(t, _)| t)
}

/// Target features of `users` as the frozen target projector would have
/// produced them; only available when raw target embeddings exist for them.
pub fn oracle_target_features(corpus: &Corpus, pre: &Pretrained, users: &BTreeSet<String>) -> Result<EmbeddingTable> {
    let raw = EmbeddingTable {
        dim: corpus.embeddings.user_target.dim,
        rows: corpus
            .embeddings
            .user_target
            .rows
            .iter()
            .filter(|(id, _)| users.contains(*id))
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect(),
    };
    project_table(&raw, &pre.target.user)
}

/// Root-mean-square distance between generated and reference features,
/// averaged over coordinates.
pub fn feature_rmse(generated: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let d = generated - truth;
    (d.mapv(|v| v * v).sum() / d.len() as f64).sqrt()
}

/// Conditional and unconditional samples for the given users.
pub fn generate(model: &Model, aux: &EmbeddingTable, users: &[&str], seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let cond = aux.matrix(users.iter().copied())?;
    let mut rng = SeededRng::substream(seed, Stream::Inference, u64::MAX >> 16);
    let c = sample_batch(
        &model.denoiser,
        Some(&cond),
        &model.schedule,
        &mut rng,
        users.len(),
        model.mean_param,
    )?;
    let u = sample_batch(
        &model.denoiser,
        None,
        &model.schedule,
        &mut rng,
        users.len(),
        model.mean_param,
    )?;
    Ok((c, u))
}
