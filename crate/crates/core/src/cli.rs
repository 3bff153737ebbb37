//! Command implementations and the on-disk artifact store.
//!
//! Every artifact is a directory named `<kind>-<hash>` where `hash` is the
//! first 16 hex digits of the SHA-256 over its files. `index.json` in the
//! output root maps each kind to its latest directory; downstream commands
//! resolve their inputs through it. Every directory carries `config.txt`
//! with the full config echo.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{ingest_ratings, parse_ratings, Domain, DomainDataset, IngestOptions};
use crate::error::{Error, Result};
use crate::eval::{write_tsv, Ablation, MetricsReport, Pretty};
use crate::features::{parse_hidden_states, pool_hidden_states, EmbeddingCorpus, EmbeddingTable, FeatureProjector};
use crate::nn::Activation;
use crate::pipeline::{
    ablation_matrix, ablation_table, evaluate_model, prepare_split, pretrain_split, step_sweep, sweep_report,
    train_split, Corpus, SplitData,
};
use crate::pretrain::{freeze_features, DomainProjectors, PretrainStats, Pretrained};
use crate::synth::synth_corpus;
use crate::train::Model;

const TABLES: [&str; 4] = ["user_aux", "user_target", "item_aux", "item_target"];

pub struct Store {
    root: PathBuf,
}

/// Files of one artifact, written together.
#[derive(Default)]
pub struct Bundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in &self.files {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    fn index(&self) -> Result<BTreeMap<String, String>> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::Format(format!("index.json: {e}")))
    }

    /// Writes the bundle under its content hash and points `kind` at it.
    pub fn put(&self, kind: &str, bundle: &Bundle) -> Result<PathBuf> {
        let dir = self.root.join(format!("{kind}-{}", bundle.hash()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, bytes) in &bundle.files {
            write_file(&dir.join(name), bytes)?;
        }
        let mut index = self.index()?;
        index.insert(
            kind.to_string(),
            dir.file_name().expect("named").to_string_lossy().into_owned(),
        );
        let text = serde_json::to_string_pretty(&index).expect("map serializes");
        write_file(&self.index_path(), format!("{text}\n").as_bytes())?;
        log::info!("wrote {}", dir.display());
        Ok(dir)
    }

    /// Directory of the latest `kind` artifact, or a dependency error
    /// naming the command that produces it.
    pub fn get(&self, kind: &str, producer: &str) -> Result<PathBuf> {
        let missing = || Error::Dependency {
            artifact: kind.to_string(),
            command: producer.to_string(),
        };
        let name = self.index()?.get(kind).cloned().ok_or_else(missing)?;
        let dir = self.root.join(name);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(missing())
        }
    }
}

fn config_bytes(cfg: &RunConfig) -> Vec<u8> {
    let mut s = format!("# config_hash = {}\n", cfg.hash());
    for line in cfg.echo_lines() {
        s.push_str(&line);
        s.push('\n');
    }
    s.into_bytes()
}

fn header(cfg: &RunConfig) -> Vec<String> {
    let mut h = vec![format!("config_hash = {}", cfg.hash())];
    h.extend(cfg.echo_lines());
    h
}

fn beta_key(beta: f64) -> String {
    format!("b{}", (beta * 100.0).round() as u64)
}

fn echo_value(cfg: &RunConfig) -> Value {
    Value::Object(
        cfg.echo()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect(),
    )
}

// ---- corpus ----

fn corpus_bundle(corpus: &Corpus, cfg: &RunConfig, source: &str) -> Bundle {
    let mut b = Bundle::default();
    let h = header(cfg);
    let mut buf = Vec::new();
    corpus.aux.write_tsv(&mut buf, &h).expect("in-memory write");
    b.add("aux.tsv", buf);
    let mut buf = Vec::new();
    corpus.target.write_tsv(&mut buf, &h).expect("in-memory write");
    b.add("target.tsv", buf);
    let e = &corpus.embeddings;
    for (name, table) in TABLES
        .iter()
        .zip([&e.user_aux, &e.user_target, &e.item_aux, &e.item_target])
    {
        let mut buf = Vec::new();
        table.write(&mut buf, &h).expect("in-memory write");
        b.add(&format!("{name}.emb"), buf);
    }
    b.add("config.txt", config_bytes(cfg));
    let meta = json!({"data_hash": corpus.data_hash(), "source": source});
    b.add("meta.json", serde_json::to_vec_pretty(&meta).expect("json"));
    b
}

fn read_ratings(path: &Path, domain: Domain) -> Result<DomainDataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(BufReader::new(f), domain, IngestOptions::default())
}

pub fn load_corpus(store: &Store) -> Result<Corpus> {
    let dir = store.get("corpus", "synth` or `ingest")?;
    let table = |name: &str| EmbeddingTable::read(&dir.join(format!("{name}.emb")));
    Ok(Corpus {
        aux: read_ratings(&dir.join("aux.tsv"), Domain::Auxiliary)?,
        target: read_ratings(&dir.join("target.tsv"), Domain::Target)?,
        embeddings: EmbeddingCorpus {
            user_aux: table("user_aux")?,
            user_target: table("user_target")?,
            item_aux: table("item_aux")?,
            item_target: table("item_target")?,
        },
    })
}

pub fn cmd_synth(store: &Store, cfg: &RunConfig) -> Result<PathBuf> {
    let corpus: Corpus = synth_corpus(&cfg.synth)?.into();
    store.put("corpus", &corpus_bundle(&corpus, cfg, "synth"))
}

/// Loads one embedding table from `dir`: `<name>.emb` (pooled vectors) or
/// `<name>.hidden` (hidden-state exports, pooled here).
fn load_embeddings(dir: &Path, name: &str) -> Result<EmbeddingTable> {
    let emb = dir.join(format!("{name}.emb"));
    if emb.exists() {
        return EmbeddingTable::read(&emb);
    }
    let hidden = dir.join(format!("{name}.hidden"));
    if hidden.exists() {
        let f = fs::File::open(&hidden).map_err(|e| Error::io(&hidden, e))?;
        return pool_hidden_states(&parse_hidden_states(BufReader::new(f))?);
    }
    Err(Error::Config(format!(
        "no {name}.emb or {name}.hidden in {}",
        dir.display()
    )))
}

pub fn cmd_ingest(store: &Store, cfg: &RunConfig) -> Result<PathBuf> {
    let need = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| Error::Config(format!("ingest needs `{key}`")));
    let opts = IngestOptions {
        min_interactions: cfg.min_interactions,
    };
    let aux = ingest_ratings(&need(&cfg.aux_ratings, "aux_ratings")?, Domain::Auxiliary, opts)?;
    let target = ingest_ratings(&need(&cfg.target_ratings, "target_ratings")?, Domain::Target, opts)?;
    let dir = need(&cfg.embeddings, "embeddings")?;
    let embeddings = EmbeddingCorpus {
        user_aux: load_embeddings(&dir, "user_aux")?,
        user_target: load_embeddings(&dir, "user_target")?,
        item_aux: load_embeddings(&dir, "item_aux")?,
        item_target: load_embeddings(&dir, "item_target")?,
    };
    let corpus = Corpus {
        aux,
        target,
        embeddings,
    };
    store.put("corpus", &corpus_bundle(&corpus, cfg, "ingest"))
}

// ---- pretrain ----

fn pretrain_bundle(pre: &Pretrained, split: &SplitData, corpus_hash: &str, cfg: &RunConfig) -> Bundle {
    let mut manifest = Map::new();
    manifest.insert("kind".into(), json!("pretrain"));
    manifest.insert("beta".into(), json!(split.beta));
    manifest.insert("data_hash".into(), json!(corpus_hash));
    manifest.insert("config".into(), echo_value(cfg));
    manifest.insert("config_hash".into(), json!(cfg.hash()));
    manifest.insert("test_users".into(), json!(split.test_cold));
    manifest.insert("aux_stats".into(), serde_json::to_value(&pre.aux_stats).expect("stats"));
    manifest.insert(
        "target_stats".into(),
        serde_json::to_value(&pre.target_stats).expect("stats"),
    );
    let mut dims = Map::new();
    for (name, p) in projectors(pre) {
        dims.insert(
            name.into(),
            json!([
                p.input_dim(),
                p.hidden.output_dim(),
                p.output_dim(),
                p.activation.as_str()
            ]),
        );
    }
    manifest.insert("projectors".into(), Value::Object(dims));
    let mut ckpt = Checkpoint::new(manifest);
    for (name, p) in projectors(pre) {
        ckpt.push_params(name, p);
    }
    let mut b = Bundle::default();
    b.add("projectors.ckpt", ckpt.to_bytes());
    let h = header(cfg);
    let f = &pre.features;
    for (name, table) in [
        ("user_aux", &f.user_aux),
        ("user_target", &f.user_target),
        ("item_target", &f.item_target),
    ] {
        let mut buf = Vec::new();
        table.write(&mut buf, &h).expect("in-memory write");
        b.add(&format!("{name}.features"), buf);
    }
    b.add("config.txt", config_bytes(cfg));
    b
}

fn projectors(pre: &Pretrained) -> [(&'static str, &FeatureProjector); 4] {
    [
        ("aux_user", &pre.aux.user),
        ("aux_item", &pre.aux.item),
        ("target_user", &pre.target.user),
        ("target_item", &pre.target.item),
    ]
}

pub fn cmd_pretrain(store: &Store, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(store)?;
    let hash = corpus.data_hash();
    let mut out = Vec::new();
    for &beta in &cfg.betas {
        let split = prepare_split(&corpus, beta, cfg.pipeline.seed)?;
        let pre = pretrain_split(&corpus, &split, false, &cfg.pipeline.pretrain)?;
        log::info!(
            "beta={beta}: target rating mse {:.4} -> {:.4}",
            pre.target_stats.initial_loss,
            pre.target_stats.final_loss
        );
        out.push(store.put(
            &format!("pretrain-{}", beta_key(beta)),
            &pretrain_bundle(&pre, &split, &hash, cfg),
        )?);
    }
    Ok(out)
}

/// Rebuilds the split and frozen features of a stored pretraining run.
pub fn load_pretrained(store: &Store, corpus: &Corpus, beta: f64) -> Result<(Pretrained, SplitData)> {
    let dir = store.get(&format!("pretrain-{}", beta_key(beta)), "pretrain")?;
    let ckpt = Checkpoint::load(&dir.join("projectors.ckpt"))?;
    let m = &ckpt.manifest;
    if m.get("data_hash").and_then(Value::as_str) != Some(corpus.data_hash().as_str()) {
        return Err(Error::State(
            "pretrained projectors belong to a different corpus; rerun `pretrain`".into(),
        ));
    }
    let seed = m
        .get("config")
        .and_then(|c| c.get("seed"))
        .and_then(Value::as_str)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("pretrain manifest lacks the seed".into()))?;
    let split = prepare_split(corpus, beta, seed)?;
    let stored: BTreeSet<String> = serde_json::from_value(m.get("test_users").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(e.to_string()))?;
    if stored != split.test_cold {
        return Err(Error::State("stored split does not match the corpus".into()));
    }
    let load = |name: &str| -> Result<FeatureProjector> {
        let spec = m
            .get("projectors")
            .and_then(|p| p.get(name))
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format(format!("manifest lacks projector `{name}`")))?;
        let dim = |i: usize| spec.get(i).and_then(Value::as_u64).map(|v| v as usize);
        let (Some(i), Some(h), Some(o)) = (dim(0), dim(1), dim(2)) else {
            return Err(Error::Format(format!("bad dims for projector `{name}`")));
        };
        let mut p = FeatureProjector::zeros(i, h, o);
        p.activation = Activation::parse(spec.get(3).and_then(Value::as_str).unwrap_or("tanh"))?;
        ckpt.load_params(name, &mut p)?;
        Ok(p)
    };
    let aux = DomainProjectors {
        user: load("aux_user")?,
        item: load("aux_item")?,
    };
    let target = DomainProjectors {
        user: load("target_user")?,
        item: load("target_item")?,
    };
    let stats = |k: &str| -> Result<PretrainStats> {
        serde_json::from_value(m.get(k).cloned().unwrap_or_default()).map_err(|e| Error::Format(e.to_string()))
    };
    let features = freeze_features(&corpus.aux, &split.target_train, &corpus.embeddings, &aux, &target)?;
    Ok((
        Pretrained {
            aux,
            target,
            features,
            aux_stats: stats("aux_stats")?,
            target_stats: stats("target_stats")?,
            raw_item_target: corpus.embeddings.item_target.clone(),
        },
        split,
    ))
}

// ---- train / infer / evaluate ----

/// Ablation label implied by the training flags.
pub fn configured_ablation(cfg: &RunConfig) -> Ablation {
    let t = &cfg.pipeline.train;
    if t.no_diffusion {
        Ablation::NoDiffusion
    } else if t.no_side {
        Ablation::NoSide
    } else {
        Ablation::Full
    }
}

pub fn cmd_train(store: &Store, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(store)?;
    let hash = corpus.data_hash();
    let ablation = configured_ablation(cfg);
    let mut out = Vec::new();
    for &beta in &cfg.betas {
        let (pre, split) = load_pretrained(store, &corpus, beta)?;
        let (mut model, report) = train_split(&pre, &split, ablation, &cfg.pipeline, &hash)?;
        model.info.insert("config".into(), echo_value(cfg));
        model.info.insert("config_hash".into(), json!(cfg.hash()));
        let mut b = Bundle::default();
        b.add("model.ckpt", model.to_checkpoint().to_bytes());
        b.add("report.json", serde_json::to_vec_pretty(&report).expect("report"));
        b.add("config.txt", config_bytes(cfg));
        out.push(store.put(&format!("model-{}", beta_key(beta)), &b)?);
    }
    Ok(out)
}

fn load_model(store: &Store, corpus: &Corpus, beta: f64) -> Result<Model> {
    let dir = store.get(&format!("model-{}", beta_key(beta)), "train")?;
    let model = Model::from_checkpoint(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
    let trained_on = model.info.get("data_hash").and_then(Value::as_str).unwrap_or("");
    if trained_on != corpus.data_hash() {
        return Err(Error::State(format!(
            "checkpoint {} was trained on different data; rerun `train`",
            dir.display()
        )));
    }
    Ok(model)
}

fn model_ablation(model: &Model) -> Result<Ablation> {
    Ablation::parse(model.info.get("ablation").and_then(Value::as_str).unwrap_or("full"))
}

pub fn cmd_infer(store: &Store, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(store)?;
    let mut out = Vec::new();
    for &beta in &cfg.betas {
        let (pre, split) = load_pretrained(store, &corpus, beta)?;
        let model = load_model(store, &corpus, beta)?;
        let mut table = EmbeddingTable::new(model.denoiser.config.feature_dim);
        for (i, user) in split.test_cold.iter().enumerate() {
            let f =
                crate::eval::infer_cold_start(&model, pre.features.user_aux.get(user), cfg.pipeline.seed, i as u64)?;
            table.insert(user.clone(), f)?;
        }
        let mut buf = Vec::new();
        table.write(&mut buf, &header(cfg)).expect("in-memory write");
        let mut b = Bundle::default();
        b.add("generated.emb", buf);
        b.add("config.txt", config_bytes(cfg));
        out.push(store.put(&format!("infer-{}", beta_key(beta)), &b)?);
    }
    Ok(out)
}

pub fn cmd_evaluate(store: &Store, cfg: &RunConfig) -> Result<(PathBuf, Vec<MetricsReport>)> {
    let corpus = load_corpus(store)?;
    let mut reports = Vec::new();
    for &beta in &cfg.betas {
        let (pre, split) = load_pretrained(store, &corpus, beta)?;
        let model = load_model(store, &corpus, beta)?;
        reports.extend(evaluate_model(
            &model,
            &pre,
            &split,
            model_ablation(&model)?,
            &cfg.pipeline,
        )?);
    }
    let mut buf = Vec::new();
    write_tsv(&mut buf, &header(cfg), &reports).expect("in-memory write");
    let mut b = Bundle::default();
    b.add("metrics.tsv", buf);
    b.add("config.txt", config_bytes(cfg));
    let dir = store.put("metrics", &b)?;
    print!("{}", Pretty(&reports));
    Ok((dir, reports))
}

/// Ablation matrix over the configured betas, or with `sweep` the
/// diffusion-step sweep at each beta.
pub fn cmd_ablate(store: &Store, cfg: &RunConfig, sweep: bool) -> Result<PathBuf> {
    let corpus = load_corpus(store)?;
    let mut b = Bundle::default();
    let h = header(cfg);
    let kind = if sweep {
        let mut text = String::new();
        let mut tsv = format!("# {}\nbeta\tsteps\tusers\tpairs\tmae\trmse\tndcg20\n", h.join("\n# "));
        for &beta in &cfg.betas {
            let points = step_sweep(&corpus, beta, &cfg.sweep_steps, &cfg.pipeline)?;
            text.push_str(&format!("[beta {beta}]\n{}", sweep_report(&points)));
            for p in &points {
                let r = p.report.tsv_row();
                let cols: Vec<&str> = r.split('\t').collect();
                tsv.push_str(&format!("{beta}\t{}\t{}\n", p.steps, cols[3..].join("\t")));
            }
        }
        print!("{text}");
        b.add("sweep.txt", text.into_bytes());
        b.add("sweep.tsv", tsv.into_bytes());
        "sweep"
    } else {
        let reports = ablation_matrix(&corpus, &cfg.betas, &cfg.ablations, &cfg.pipeline)?;
        let table = ablation_table(&reports, &cfg.ablations);
        print!("{table}");
        let mut buf = Vec::new();
        write_tsv(&mut buf, &h, &reports).expect("in-memory write");
        b.add("ablation.tsv", buf);
        b.add("ablation.txt", table.into_bytes());
        "ablation"
    };
    b.add("config.txt", config_bytes(cfg));
    store.put(kind, &b)
}
