//! Two-stage optimization of the denoiser.
//!
//! Stage 1 fits the unconditional reconstruction loss on side users' target
//! features. Stage 2 then fits, on overlapping training users, the blend
//! `lambda * L_dm + (1 - lambda) * L_rating`, where the diffusion term is
//! conditioned on the auxiliary feature and the rating term scores the
//! single-pass reconstruction against the user's observed target ratings.

use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{build_schedule, DenoiserConfig, DenoiserParams, MeanParam, NoiseSchedule, Tape};
use crate::diffusion::{BETA_END, BETA_START};
use crate::error::{Error, Result};
use crate::features::FeatureProjector;
use crate::losses::{check_lambda, dm_loss_grad, rating_loss_grad, RatingPair};
use crate::nn::{adam_step, AdamConfig, OptimizerState, Parameters};
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Dropout for the co-trained item projector.
    pub dropout: f64,
    pub seed: u64,
    pub no_side: bool,
    pub no_diffusion: bool,
    pub co_train_items: bool,
    pub denoiser: DenoiserConfig,
    pub mean_param: MeanParam,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            stage1_epochs: 100,
            stage2_epochs: 100,
            batch_size: 128,
            lambda: 0.5,
            steps: 10,
            beta_start: BETA_START,
            beta_end: BETA_END,
            dropout: 0.1,
            seed: 42,
            no_side: false,
            no_diffusion: false,
            co_train_items: false,
            denoiser: DenoiserConfig::default(),
            mean_param: MeanParam::X0Posterior,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.denoiser.validate()?;
        build_schedule(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Stage-2 inputs for the overlapping training users. Row `i` of `aux`
/// and `target` belong to the same user.
#[derive(Debug, Clone)]
pub struct OverlapData {
    pub aux: Array2<f64>,
    pub target: Array2<f64>,
    /// Observed target ratings; `user` indexes rows of `aux`/`target`,
    /// `item` indexes rows of `items`.
    pub ratings: Vec<RatingPair>,
    pub items: Array2<f64>,
    /// Raw item embeddings, required when co-training the item projector.
    pub item_raw: Option<Array2<f64>>,
}

impl OverlapData {
    fn validate(&self, dim: usize) -> Result<()> {
        let n = self.aux.nrows();
        if n == 0 {
            return Err(Error::validation(
                "stage 2 needs at least one overlapping training user",
            ));
        }
        if self.target.nrows() != n {
            return Err(Error::validation(format!(
                "{} target features for {n} users with auxiliary features",
                self.target.nrows()
            )));
        }
        if self.aux.ncols() != dim || self.target.ncols() != dim || self.items.ncols() != dim {
            return Err(Error::validation(format!("stage 2 features must have width {dim}")));
        }
        if let Some(p) = self
            .ratings
            .iter()
            .find(|p| p.user >= n || p.item >= self.items.nrows())
        {
            return Err(Error::validation(format!("rating pair {p:?} out of range")));
        }
        Ok(())
    }
}

/// Loss curves and update bookkeeping for one training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    pub stage2_dm_losses: Vec<f64>,
    pub stage2_rating_losses: Vec<f64>,
    /// Global update indices performed by each stage.
    pub stage1_updates: Range<u64>,
    pub stage2_updates: Range<u64>,
}

/// Batch `x_t` draws: one uniform step and one Gaussian draw per row.
fn corrupt(x0: &Array2<f64>, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<(Array2<f64>, Vec<usize>)> {
    let t: Vec<usize> = (0..x0.nrows()).map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = Array2::from_shape_fn(x0.raw_dim(), |_| rng.normal());
    Ok((sched.q_sample_batch(x0, &t, &eps)?, t))
}

fn batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Unconditional reconstruction training on side users.
pub fn train_stage1_side(
    params: &mut DenoiserParams,
    side: &Array2<f64>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    updates: &mut u64,
) -> Result<Vec<f64>> {
    if cfg.no_side {
        return Ok(Vec::new());
    }
    if side.nrows() == 0 {
        return Err(Error::Config(
            "no side users to train on; enable no_side to skip stage 1".into(),
        ));
    }
    if side.ncols() != params.config.feature_dim {
        return Err(Error::validation("side feature width mismatch"));
    }
    let mut shuffle = SeededRng::substream(cfg.seed, Stream::Shuffle, 1);
    let mut noise = SeededRng::substream(cfg.seed, Stream::Noise, 1);
    let mut opt = OptimizerState::new(params, cfg.adam);
    let mut losses = Vec::with_capacity(cfg.stage1_epochs);
    for _ in 0..cfg.stage1_epochs {
        let mut total = 0.0;
        for idx in batches(side.nrows(), cfg.batch_size, &mut shuffle) {
            let x0 = side.select(Axis(0), &idx);
            let (x_t, t) = corrupt(&x0, sched, &mut noise)?;
            let mut tape = Tape::default();
            let x0_hat = params.forward_recorded(&x_t, &t, None, &mut tape)?;
            let (loss, dy) = dm_loss_grad(&x0, &x0_hat)?;
            let (grads, _) = params.backward(&tape, &dy)?;
            adam_step(params, &grads.0, &mut opt, cfg.learning_rate)?;
            *updates += 1;
            total += loss * idx.len() as f64;
        }
        losses.push(total / side.nrows() as f64);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stage2Losses {
    pub joint: Vec<f64>,
    pub dm: Vec<f64>,
    pub rating: Vec<f64>,
}

/// Joint conditional-reconstruction and rating training on overlapping
/// users. With `item_projector` the item features are recomputed from raw
/// embeddings each batch and the projector is updated by the rating term.
pub fn train_stage2_overlap(
    params: &mut DenoiserParams,
    data: &mut OverlapData,
    mut item_projector: Option<&mut FeatureProjector>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    updates: &mut u64,
) -> Result<Stage2Losses> {
    check_lambda(cfg.lambda)?;
    data.validate(params.config.feature_dim)?;
    if item_projector.is_some() && data.item_raw.is_none() {
        return Err(Error::validation("co-training items needs raw item embeddings"));
    }
    let n = data.aux.nrows();
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for p in &data.ratings {
        by_user[p.user].push((p.item, p.rating));
    }
    let mut shuffle = SeededRng::substream(cfg.seed, Stream::Shuffle, 2);
    let mut noise = SeededRng::substream(cfg.seed, Stream::Noise, 2);
    let mut dropout = SeededRng::substream(cfg.seed, Stream::Dropout, 2);
    let mut opt = OptimizerState::new(params, cfg.adam);
    let mut item_opt = item_projector.as_deref().map(|p| OptimizerState::new(p, cfg.adam));
    let lambda = cfg.lambda;
    let mut out = Stage2Losses::default();

    for _ in 0..cfg.stage2_epochs {
        let (mut joint, mut dm_sum, mut rating_sum) = (0.0, 0.0, 0.0);
        for idx in batches(n, cfg.batch_size, &mut shuffle) {
            let x0 = data.target.select(Axis(0), &idx);
            let cond = data.aux.select(Axis(0), &idx);
            let (x_t, t) = corrupt(&x0, sched, &mut noise)?;
            let mut tape = Tape::default();
            let x0_hat = params.forward_recorded(&x_t, &t, Some(&cond), &mut tape)?;
            let (l_dm, g_dm) = dm_loss_grad(&x0, &x0_hat)?;

            // Items touched by this batch, re-indexed locally.
            let mut local_items: Vec<usize> = idx.iter().flat_map(|&u| by_user[u].iter().map(|(i, _)| *i)).collect();
            local_items.sort_unstable();
            local_items.dedup();
            let pairs: Vec<RatingPair> = idx
                .iter()
                .enumerate()
                .flat_map(|(b, &u)| {
                    let local = &local_items;
                    by_user[u].iter().map(move |(i, r)| RatingPair {
                        user: b,
                        item: local.binary_search(i).expect("collected above"),
                        rating: *r,
                    })
                })
                .collect();

            let mut item_trace = None;
            let items = match (item_projector.as_deref(), &data.item_raw) {
                (Some(proj), Some(raw)) => {
                    let trace = proj.forward_train(&raw.select(Axis(0), &local_items), cfg.dropout, &mut dropout)?;
                    let items = trace.output().clone();
                    item_trace = Some(trace);
                    items
                }
                _ => data.items.select(Axis(0), &local_items),
            };
            let (l_rating, g_user, g_items) = if pairs.is_empty() {
                (0.0, Array2::zeros(x0_hat.raw_dim()), Array2::zeros(items.raw_dim()))
            } else {
                rating_loss_grad(&x0_hat, &items, &pairs)?
            };

            let dy = g_dm * lambda + g_user * (1.0 - lambda);
            let (grads, _) = params.backward(&tape, &dy)?;
            adam_step(params, &grads.0, &mut opt, cfg.learning_rate)?;
            if let (Some(proj), Some(trace), Some(state)) =
                (item_projector.as_deref_mut(), item_trace.as_ref(), item_opt.as_mut())
            {
                let mut g = proj.zeros_like();
                proj.backward(trace, &(g_items * (1.0 - lambda)), &mut g);
                adam_step(proj, &g, state, cfg.learning_rate)?;
            }
            *updates += 1;

            let w = idx.len() as f64;
            dm_sum += l_dm * w;
            rating_sum += l_rating * w;
            joint += (lambda * l_dm + (1.0 - lambda) * l_rating) * w;
        }
        out.joint.push(joint / n as f64);
        out.dm.push(dm_sum / n as f64);
        out.rating.push(rating_sum / n as f64);
    }

    if let (Some(proj), Some(raw)) = (item_projector, &data.item_raw) {
        proj.round_to_f32();
        data.items = proj.forward(raw)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// Conditional reverse diffusion from the auxiliary feature.
    Diffusion,
    /// The auxiliary feature is used unchanged in the target domain.
    Identity,
}

/// Everything inference needs; persisted as a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub transfer: Transfer,
    pub denoiser: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub mean_param: MeanParam,
    /// Present when stage 2 co-trained the target item projector.
    pub item_projector: Option<FeatureProjector>,
    /// Config echo, data hash and counts.
    pub info: Map<String, Value>,
}

pub struct TrainInputs {
    /// Frozen target features of side users.
    pub side: Array2<f64>,
    pub overlap: OverlapData,
    /// Target item projector to co-train (only used with `co_train_items`).
    pub item_projector: Option<FeatureProjector>,
}

/// Runs stage 1 then stage 2 (or builds an identity-transfer model).
pub fn train(mut inputs: TrainInputs, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let mut report = TrainReport::default();
    let info = {
        let mut m = Map::new();
        m.insert(
            "train_config".into(),
            serde_json::to_value(cfg).expect("config serializes"),
        );
        m.insert("side_users".into(), json!(inputs.side.nrows()));
        m.insert("train_users".into(), json!(inputs.overlap.aux.nrows()));
        m.insert("items".into(), json!(inputs.overlap.items.nrows()));
        m
    };
    if cfg.no_diffusion {
        return Ok((
            Model {
                transfer: Transfer::Identity,
                denoiser: DenoiserParams::zeros(cfg.denoiser),
                schedule: sched,
                mean_param: cfg.mean_param,
                item_projector: None,
                info,
            },
            report,
        ));
    }

    let mut params = DenoiserParams::init(cfg.denoiser, &mut SeededRng::new(cfg.seed, Stream::Init))?;
    let mut updates = 0u64;
    report.stage1_losses = train_stage1_side(&mut params, &inputs.side, &sched, cfg, &mut updates)?;
    report.stage1_updates = 0..updates;
    let start = updates;
    let mut item_projector = if cfg.co_train_items {
        Some(
            inputs
                .item_projector
                .take()
                .ok_or_else(|| Error::Config("co_train_items needs the target item projector".into()))?,
        )
    } else {
        None
    };
    let s2 = train_stage2_overlap(
        &mut params,
        &mut inputs.overlap,
        item_projector.as_mut(),
        &sched,
        cfg,
        &mut updates,
    )?;
    report.stage2_updates = start..updates;
    report.stage2_losses = s2.joint;
    report.stage2_dm_losses = s2.dm;
    report.stage2_rating_losses = s2.rating;
    params.round_to_f32();
    if !params.all_finite() {
        return Err(Error::State("training diverged to non-finite parameters".into()));
    }
    Ok((
        Model {
            transfer: Transfer::Diffusion,
            denoiser: params,
            schedule: sched,
            mean_param: cfg.mean_param,
            item_projector,
            info,
        },
        report,
    ))
}

const DENOISER: &str = "denoiser";
const ITEM_PROJECTOR: &str = "item_projector";

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut m = self.info.clone();
        m.insert("kind".into(), json!("model"));
        m.insert("transfer".into(), serde_json::to_value(self.transfer).expect("enum"));
        m.insert("steps".into(), json!(self.schedule.steps()));
        m.insert("beta_start".into(), json!(self.schedule.beta_start()));
        m.insert("beta_end".into(), json!(self.schedule.beta_end()));
        m.insert("mean_param".into(), json!(self.mean_param.as_str()));
        m.insert(
            "denoiser".into(),
            serde_json::to_value(self.denoiser.config).expect("config"),
        );
        if let Some(p) = &self.item_projector {
            m.insert(
                "item_projector".into(),
                json!({
                    "input": p.input_dim(),
                    "hidden": p.hidden.output_dim(),
                    "output": p.output_dim(),
                    "activation": p.activation.as_str(),
                }),
            );
        }
        let mut c = Checkpoint::new(m);
        c.push_params(DENOISER, &self.denoiser);
        if let Some(p) = &self.item_projector {
            c.push_params(ITEM_PROJECTOR, p);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let m = &c.manifest;
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")));
        if get("kind")? != "model" {
            return Err(Error::Format("checkpoint does not hold a model".into()));
        }
        let parse = |k: &str| -> Result<Value> { Ok(get(k)?.clone()) };
        let transfer: Transfer =
            serde_json::from_value(parse("transfer")?).map_err(|e| Error::Format(e.to_string()))?;
        let config: DenoiserConfig =
            serde_json::from_value(parse("denoiser")?).map_err(|e| Error::Format(e.to_string()))?;
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .as_f64()
                .ok_or_else(|| Error::Format(format!("`{k}` is not a number")))
        };
        let schedule = build_schedule(num("steps")? as usize, num("beta_start")?, num("beta_end")?)?;
        let mean_param = MeanParam::parse(get("mean_param")?.as_str().unwrap_or_default())?;
        let mut denoiser = DenoiserParams::zeros(config);
        c.load_params(DENOISER, &mut denoiser)?;
        let item_projector = match m.get("item_projector") {
            Some(spec) => {
                let dim = |k: &str| {
                    spec[k]
                        .as_u64()
                        .map(|v| v as usize)
                        .ok_or_else(|| Error::Format(format!("item_projector.{k} missing")))
                };
                let mut p = FeatureProjector::zeros(dim("input")?, dim("hidden")?, dim("output")?);
                p.activation = crate::nn::Activation::parse(spec["activation"].as_str().unwrap_or("tanh"))?;
                c.load_params(ITEM_PROJECTOR, &mut p)?;
                Some(p)
            }
            None => None,
        };
        let mut info = m.clone();
        for k in [
            "kind",
            "transfer",
            "steps",
            "beta_start",
            "beta_end",
            "mean_param",
            "denoiser",
            "item_projector",
        ] {
            info.remove(k);
        }
        Ok(Model {
            transfer,
            denoiser,
            schedule,
            mean_param,
            item_projector,
            info,
        })
    }

    /// Target feature for one cold-start user.
    pub fn transfer_feature(&self, f_aux: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
        match self.transfer {
            Transfer::Identity => Ok(f_aux.to_vec()),
            Transfer::Diffusion => {
                if f_aux.len() != self.denoiser.config.feature_dim {
                    return Err(Error::validation(format!(
                        "auxiliary feature has width {}, model expects {}",
                        f_aux.len(),
                        self.denoiser.config.feature_dim
                    )));
                }
                crate::diffusion::sample(&self.denoiser, Some(f_aux), &self.schedule, rng, self.mean_param)
            }
        }
    }

    /// User-agnostic target feature: an unconditional sample.
    pub fn unconditional_feature(&self, rng: &mut SeededRng) -> Result<Vec<f64>> {
        crate::diffusion::sample(&self.denoiser, None, &self.schedule, rng, self.mean_param)
    }
}

/// Mean of the rows, used by a few baselines and diagnostics.
pub fn row_mean(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::CondInject;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 5,
            stage2_epochs: 5,
            batch_size: 4,
            denoiser: DenoiserConfig {
                feature_dim: 4,
                down_dim: 3,
                mid_dim: 3,
                temb_dim: 4,
                cond_inject: CondInject::InputOnly,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_inputs(seed: u64) -> TrainInputs {
        let mut rng = SeededRng::new(seed, Stream::Synth);
        let side = Array2::from_shape_fn((10, 4), |_| rng.normal() * 0.5);
        let aux = Array2::from_shape_fn((6, 4), |_| rng.normal() * 0.5);
        let target = aux.mapv(|v| -v);
        let items = Array2::from_shape_fn((5, 4), |_| rng.normal());
        let ratings = (0..6)
            .flat_map(|u| (0..3).map(move |k| (u, (u + k) % 5)))
            .map(|(u, i)| RatingPair {
                user: u,
                item: i,
                rating: target.row(u).dot(&items.row(i)),
            })
            .collect();
        TrainInputs {
            side,
            overlap: OverlapData {
                aux,
                target,
                ratings,
                items,
                item_raw: None,
            },
            item_projector: None,
        }
    }

    #[test]
    fn no_side_leaves_params_unchanged() {
        let cfg = TrainConfig {
            no_side: true,
            ..tiny_cfg()
        };
        let sched = cfg.schedule().unwrap();
        let mut p = DenoiserParams::init(cfg.denoiser, &mut SeededRng::new(1, Stream::Init)).unwrap();
        let before = p.clone();
        let mut updates = 0;
        let losses = train_stage1_side(&mut p, &tiny_inputs(1).side, &sched, &cfg, &mut updates).unwrap();
        assert!(losses.is_empty());
        assert_eq!(updates, 0);
        assert_eq!(p, before);
    }

    #[test]
    fn stage1_without_side_users_is_a_config_error() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule().unwrap();
        let mut p = DenoiserParams::init(cfg.denoiser, &mut SeededRng::new(1, Stream::Init)).unwrap();
        let err = train_stage1_side(&mut p, &Array2::zeros((0, 4)), &sched, &cfg, &mut 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn lambda_one_ignores_ratings() {
        let cfg = TrainConfig {
            lambda: 1.0,
            ..tiny_cfg()
        };
        let a = train(tiny_inputs(3), &cfg).unwrap().0;
        let mut shuffled = tiny_inputs(3);
        for p in &mut shuffled.overlap.ratings {
            p.rating = 5.0 - p.rating;
        }
        let b = train(shuffled, &cfg).unwrap().0;
        assert_eq!(a.denoiser, b.denoiser);

        let c = train(tiny_inputs(3), &TrainConfig { lambda: 0.5, ..cfg }).unwrap().0;
        assert_ne!(a.denoiser, c.denoiser);
    }

    #[test]
    fn stages_run_in_order() {
        let (_, report) = train(tiny_inputs(4), &tiny_cfg()).unwrap();
        assert_eq!(report.stage1_updates, 0..15);
        assert_eq!(report.stage2_updates, 15..25);
        assert_eq!(report.stage1_losses.len(), 5);
        assert_eq!(report.stage2_losses.len(), 5);
    }

    #[test]
    fn identity_transfer_returns_aux() {
        let cfg = TrainConfig {
            no_diffusion: true,
            ..tiny_cfg()
        };
        let (m, _) = train(tiny_inputs(5), &cfg).unwrap();
        assert_eq!(m.transfer, Transfer::Identity);
        let f = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(
            m.transfer_feature(&f, &mut SeededRng::new(1, Stream::Inference))
                .unwrap(),
            f
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (m, _) = train(tiny_inputs(6), &tiny_cfg()).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = Array2::from_elem((2, 4), 0.3);
        let c = Array2::from_elem((2, 4), -0.1);
        let ya = m.denoiser.forward(&x, &[3, 7], Some(&c)).unwrap();
        let yb = back.denoiser.forward(&x, &[3, 7], Some(&c)).unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(tiny_inputs(7), &tiny_cfg()).unwrap().0.to_checkpoint().to_bytes();
        let b = train(tiny_inputs(7), &tiny_cfg()).unwrap().0.to_checkpoint().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn co_training_updates_items() {
        let mut inputs = tiny_inputs(8);
        let mut rng = SeededRng::new(2, Stream::Init);
        let raw = Array2::from_shape_fn((5, 6), |_| rng.normal());
        let proj = FeatureProjector::new(6, 8, 4, crate::nn::Activation::Tanh, &mut rng);
        inputs.overlap.items = proj.forward(&raw).unwrap();
        inputs.overlap.item_raw = Some(raw);
        inputs.item_projector = Some(proj.clone());
        let cfg = TrainConfig {
            co_train_items: true,
            ..tiny_cfg()
        };
        let (m, _) = train(inputs, &cfg).unwrap();
        let trained = m.item_projector.clone().unwrap();
        assert_ne!(trained, proj);
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.item_projector, Some(trained));
    }
}
