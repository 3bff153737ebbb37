//! Hidden-state pooling, tanh-MLP projection and embedding table I/O.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Parameters};
use crate::rng::SeededRng;

pub const DEFAULT_FEATURE_DIM: usize = 32;
pub const DEFAULT_PROJECTOR_HIDDEN: usize = 128;

/// First- and last-layer hidden states exported from an encoder, `n x d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateExport {
    pub entity_id: String,
    pub first: Array2<f64>,
    pub last: Array2<f64>,
}

impl HiddenStateExport {
    pub fn new(entity_id: impl Into<String>, first: Array2<f64>, last: Array2<f64>) -> Result<Self> {
        let export = Self {
            entity_id: entity_id.into(),
            first,
            last,
        };
        export.validate()?;
        Ok(export)
    }

    fn validate(&self) -> Result<()> {
        if self.first.shape() != self.last.shape() {
            return Err(Error::validation(format!(
                "{}: first-layer states {:?} and last-layer states {:?} differ in shape",
                self.entity_id,
                self.first.shape(),
                self.last.shape()
            )));
        }
        if self.first.nrows() == 0 || self.first.ncols() == 0 {
            return Err(Error::validation(format!(
                "{}: hidden states must have at least one token and one column",
                self.entity_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbedding {
    pub entity_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub entity_id: String,
    pub domain: Domain,
    pub vector: Vec<f64>,
}

/// Mean of the token-averaged first and last hidden layers.
pub fn first_last_avg(export: &HiddenStateExport) -> Result<RawEmbedding> {
    export.validate()?;
    let first = export.first.mean_axis(Axis(0)).expect("non-empty");
    let last = export.last.mean_axis(Axis(0)).expect("non-empty");
    let pooled = (first + last) * 0.5;
    Ok(RawEmbedding {
        entity_id: export.entity_id.clone(),
        vector: pooled.to_vec(),
    })
}

/// Two dense layers, each followed by the activation (tanh by default).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

/// Activations kept from a training-mode forward pass.
pub struct ProjectorTrace {
    input: Array2<f64>,
    hidden: Array2<f64>,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    output: Array2<f64>,
}

impl ProjectorTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl FeatureProjector {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            hidden: Linear::init(input_dim, hidden_dim, rng),
            output: Linear::init(hidden_dim, output_dim, rng),
            activation,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            hidden: Linear::zeros(input_dim, hidden_dim),
            output: Linear::zeros(hidden_dim, output_dim),
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.input_dim(), self.hidden.output_dim(), self.output_dim());
        z.activation = self.activation;
        z
    }

    /// Inference forward pass over a batch of raw embeddings.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x.ncols())?;
        let h = self.activation.apply(&self.hidden.forward(x));
        Ok(self.activation.apply(&self.output.forward(&h)))
    }

    /// Training forward pass; inverted dropout after the hidden layer when
    /// `dropout > 0`.
    pub fn forward_train(&self, x: &Array2<f64>, dropout: f64, rng: &mut SeededRng) -> Result<ProjectorTrace> {
        self.check_width(x.ncols())?;
        let hidden = self.activation.apply(&self.hidden.forward(x));
        let (mask, dropped) = if dropout > 0.0 {
            let keep = 1.0 - dropout;
            let mask = Array2::from_shape_fn(
                hidden.raw_dim(),
                |_| {
                    if rng.uniform() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                },
            );
            let dropped = &hidden * &mask;
            (Some(mask), dropped)
        } else {
            (None, hidden.clone())
        };
        let output = self.activation.apply(&self.output.forward(&dropped));
        Ok(ProjectorTrace {
            input: x.clone(),
            hidden,
            mask,
            dropped,
            output,
        })
    }

    /// Accumulates gradients for `dL/doutput` into `grad`.
    pub fn backward(&self, trace: &ProjectorTrace, d_out: &Array2<f64>, grad: &mut FeatureProjector) {
        let dz2 = self.activation.backward(&trace.output, d_out);
        let mut dh = self.output.backward(&trace.dropped, &dz2, &mut grad.output);
        if let Some(mask) = &trace.mask {
            dh *= mask;
        }
        let dz1 = self.activation.backward(&trace.hidden, &dh);
        self.hidden.backward(&trace.input, &dz1, &mut grad.hidden);
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::validation(format!(
                "projector expects input width {}, got {width}",
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl Parameters for FeatureProjector {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.hidden.push_tensors("hidden", &mut out);
        self.output.push_tensors("output", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.hidden.push_tensors_mut("hidden", &mut out);
        self.output.push_tensors_mut("output", &mut out);
        out
    }
}

pub fn project(raw: &RawEmbedding, proj: &FeatureProjector, domain: Domain) -> Result<FeatureVector> {
    let x = Array1::from(raw.vector.clone()).insert_axis(Axis(0));
    let y = proj.forward(&x)?;
    Ok(FeatureVector {
        entity_id: raw.entity_id.clone(),
        domain,
        vector: y.row(0).to_vec(),
    })
}

/// Fixed-width vectors keyed by entity id, kept in id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::validation(format!(
                "{id}: vector width {} != table width {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{id}: non-finite entry {v}")));
        }
        self.rows.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Stacks the vectors for `ids` into a matrix, failing on missing ids.
    pub fn matrix<'a, I>(&self, ids: I) -> Result<Array2<f64>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let ids: Vec<&str> = ids.into_iter().collect();
        let mut m = Array2::zeros((ids.len(), self.dim));
        let mut missing = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.rows.get(*id) {
                Some(v) => m.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice())),
                None => missing.push(*id),
            }
        }
        if !missing.is_empty() {
            return Err(missing_error(&missing));
        }
        Ok(m)
    }

    pub fn from_matrix<'a, I>(ids: I, m: &Array2<f64>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut t = Self::new(m.ncols());
        for (id, row) in ids.into_iter().zip(m.rows()) {
            t.insert(id, row.to_vec())?;
        }
        Ok(t)
    }

    pub fn write<W: Write>(&self, mut w: W, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        for (id, v) in &self.rows {
            let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{id}\t{}", joined.join(","))?;
        }
        Ok(())
    }

    /// Parses `entity_id \t v1,v2,...` lines; `#` lines are comments.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                message: "expected `entity_id<TAB>v1,v2,...`".into(),
            })?;
            let vector = values
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad number: {e}"),
                })?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            t.insert(id.trim(), vector).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        }
        Ok(table.unwrap_or_default())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f))
    }
}

/// Raw embeddings for every entity kind in both domains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingCorpus {
    pub user_aux: EmbeddingTable,
    pub user_target: EmbeddingTable,
    pub item_aux: EmbeddingTable,
    pub item_target: EmbeddingTable,
}

impl EmbeddingCorpus {
    pub fn users(&self, domain: Domain) -> &EmbeddingTable {
        match domain {
            Domain::Auxiliary => &self.user_aux,
            Domain::Target => &self.user_target,
        }
    }

    pub fn items(&self, domain: Domain) -> &EmbeddingTable {
        match domain {
            Domain::Auxiliary => &self.item_aux,
            Domain::Target => &self.item_target,
        }
    }

    /// Same ids and widths, entries replaced by seeded standard normals.
    /// Stands in for content-free embeddings.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, crate::rng::Stream::Synth);
        let mut redraw = |t: &EmbeddingTable| EmbeddingTable {
            dim: t.dim,
            rows: t.rows.keys().map(|id| (id.clone(), rng.normal_vec(t.dim))).collect(),
        };
        Self {
            user_aux: redraw(&self.user_aux),
            user_target: redraw(&self.user_target),
            item_aux: redraw(&self.item_aux),
            item_target: redraw(&self.item_target),
        }
    }
}

pub(crate) fn missing_error(ids: &[&str]) -> Error {
    const SHOWN: usize = 10;
    let mut listed: Vec<&str> = ids.iter().take(SHOWN).copied().collect();
    if ids.len() > SHOWN {
        listed.push("...");
    }
    Error::validation(format!(
        "missing embeddings for {} entities: {}",
        ids.len(),
        listed.join(", ")
    ))
}

fn encode_f32(m: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f32(s: &str, n: usize, d: usize, line: usize) -> Result<Array2<f64>> {
    let bytes = BASE64.decode(s.trim()).map_err(|e| Error::Parse {
        line,
        message: format!("bad base64 payload: {e}"),
    })?;
    if bytes.len() != n * d * 4 {
        return Err(Error::Parse {
            line,
            message: format!("payload has {} bytes, expected {}", bytes.len(), n * d * 4),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked"))
}

/// One line per export: `entity_id \t n \t d \t b64(first) \t b64(last)`,
/// payloads are row-major little-endian `f32`.
pub fn write_hidden_states<W: Write>(mut w: W, exports: &[HiddenStateExport]) -> std::io::Result<()> {
    for e in exports {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.entity_id,
            e.first.nrows(),
            e.first.ncols(),
            encode_f32(&e.first),
            encode_f32(&e.last)
        )?;
    }
    Ok(())
}

pub fn parse_hidden_states<R: BufRead>(reader: R) -> Result<Vec<HiddenStateExport>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 5 tab-separated fields, found {}", f.len()),
            });
        }
        let parse_dim = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad dimension `{s}`"),
            })
        };
        let (n, d) = (parse_dim(f[1])?, parse_dim(f[2])?);
        if n == 0 {
            return Err(Error::Parse {
                line: lineno,
                message: "token count must be at least 1".into(),
            });
        }
        let first = decode_f32(f[3], n, d, lineno)?;
        let last = decode_f32(f[4], n, d, lineno)?;
        out.push(HiddenStateExport::new(f[0], first, last)?);
    }
    Ok(out)
}

/// Pools every export into a raw embedding table.
pub fn pool_hidden_states(exports: &[HiddenStateExport]) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for e in exports {
        let raw = first_last_avg(e)?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(raw.vector.len()));
        t.insert(raw.entity_id, raw.vector)?;
    }
    Ok(table.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn first_last_avg_examples() {
        let e = HiddenStateExport::new("x", array![[1.0, 3.0], [3.0, 1.0]], array![[2.0, 2.0], [0.0, 4.0]]).unwrap();
        assert_eq!(first_last_avg(&e).unwrap().vector, vec![1.5, 2.5]);

        let e = HiddenStateExport::new("y", array![[5.0, -5.0]], array![[5.0, -5.0]]).unwrap();
        assert_eq!(first_last_avg(&e).unwrap().vector, vec![5.0, -5.0]);

        let e = HiddenStateExport::new("z", array![[0.0, 0.0]], array![[2.0, 2.0]]).unwrap();
        assert_eq!(first_last_avg(&e).unwrap().vector, vec![1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = HiddenStateExport::new("x", Array2::zeros((2, 3)), Array2::zeros((3, 3)));
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn zero_projector_gives_zero() {
        let p = FeatureProjector::zeros(4, 8, 3);
        let raw = RawEmbedding {
            entity_id: "a".into(),
            vector: vec![1.0, -2.0, 3.0, 4.0],
        };
        assert_eq!(project(&raw, &p, Domain::Target).unwrap().vector, vec![0.0; 3]);
    }

    #[test]
    fn scalar_tanh_projection() {
        // hidden: identity (W=1) -> tanh(1); output weight chosen so the
        // pre-activation is exactly 2.
        let mut p = FeatureProjector::zeros(1, 1, 1);
        p.hidden.weight[[0, 0]] = 1.0;
        p.output.weight[[0, 0]] = 2.0 / 1f64.tanh();
        let raw = RawEmbedding {
            entity_id: "a".into(),
            vector: vec![1.0],
        };
        let y = project(&raw, &p, Domain::Target).unwrap().vector[0];
        assert!((y - 0.964_027_580_075_817).abs() < 1e-12, "{y}");
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut rng = SeededRng::new(1, Stream::Init);
        let p = FeatureProjector::new(4, 8, 3, Activation::Tanh, &mut rng);
        let raw = RawEmbedding {
            entity_id: "a".into(),
            vector: vec![1.0; 5],
        };
        assert!(project(&raw, &p, Domain::Target).is_err());
    }

    #[test]
    fn projector_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(2, Stream::Init);
        let p = FeatureProjector::new(3, 5, 2, Activation::Tanh, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.normal());
        let c = Array2::from_shape_fn((4, 2), |_| rng.normal());
        let loss = |p: &FeatureProjector| (&p.forward(&x).unwrap() * &c).sum();
        let mut drop_rng = SeededRng::new(0, Stream::Dropout);
        let trace = p.forward_train(&x, 0.0, &mut drop_rng).unwrap();
        let mut grad = p.zeros_like();
        p.backward(&trace, &c, &mut grad);
        let h = 1e-6;
        let analytic: Vec<f64> = grad
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut k = 0;
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].1.len();
            for j in 0..len {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] -= h;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6, "tensor {ti} entry {j}");
                k += 1;
            }
        }
    }

    #[test]
    fn hidden_state_file_round_trip() {
        let e =
            HiddenStateExport::new("item9", array![[1.0, 3.0], [3.0, 1.0]], array![[2.0, 2.0], [0.0, 4.0]]).unwrap();
        let mut buf = Vec::new();
        write_hidden_states(&mut buf, std::slice::from_ref(&e)).unwrap();
        let back = parse_hidden_states(buf.as_slice()).unwrap();
        assert_eq!(back, vec![e]);
        let table = pool_hidden_states(&back).unwrap();
        assert_eq!(table.get("item9").unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn hidden_state_bad_payload() {
        let line = "x\t2\t2\tAAAA\tAAAA\n";
        assert!(matches!(
            parse_hidden_states(line.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn embedding_table_text_round_trip() {
        let mut t = EmbeddingTable::new(3);
        t.insert("b", vec![0.1, -2.5e-7, 3.0]).unwrap();
        t.insert("a", vec![1.0 / 3.0, 0.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf, &["seed=1".to_string()]).unwrap();
        assert_eq!(EmbeddingTable::parse(buf.as_slice()).unwrap(), t);
        assert!(EmbeddingTable::parse("a\t1,2\nb\t1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn tanh_projector_output_is_bounded(seed: u64, scale in 0.1f64..100.0) {
            let mut rng = SeededRng::new(seed, Stream::Init);
            let p = FeatureProjector::new(6, 16, 4, Activation::Tanh, &mut rng);
            let x = Array2::from_shape_fn((8, 6), |_| rng.normal() * scale);
            let y = p.forward(&x).unwrap();
            prop_assert!(y.iter().all(|v| v.abs() < 1.0));
        }
    }
}
