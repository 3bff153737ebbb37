//! Vectorized U-Net denoiser.
//!
//! ```text
//! temb = W2 tanh(W1 sinusoid(t) + b1) + b2
//! h0   = x_t + g * cond                        (input conditioning)
//! h1   = tanh(Down [h0]     + E_d temb [+ C_d cond])   feature -> down
//! h2   = tanh(Mid  [h1]     + E_m temb [+ C_m cond])   down -> mid
//! h3   = tanh(Up   [h2; h0] + E_u temb [+ C_u cond])   mid + skip -> feature
//! x0   = Out h3
//! ```
//! The bracketed `C` terms are only active with [`CondInject::PerBlock`].

use ndarray::{concatenate, s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Parameters};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondInject {
    #[default]
    InputOnly,
    PerBlock,
}

impl CondInject {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input_only" => Ok(CondInject::InputOnly),
            "per_block" => Ok(CondInject::PerBlock),
            other => Err(Error::Config(format!("unknown cond_inject `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CondInject::InputOnly => "input_only",
            CondInject::PerBlock => "per_block",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    pub down_dim: usize,
    pub mid_dim: usize,
    pub temb_dim: usize,
    pub cond_inject: CondInject,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            down_dim: 16,
            mid_dim: 16,
            temb_dim: 32,
            cond_inject: CondInject::InputOnly,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.down_dim == 0 || self.mid_dim == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.temb_dim < 2 || !self.temb_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "timestep embedding width {} must be even and >= 2",
                self.temb_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal step embedding, sine block followed by cosine block, with
/// frequencies `exp(-ln(10000) * i / (d/2 - 1))` for `i = 0..d/2`.
pub fn timestep_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::validation(format!(
            "timestep embedding width {d} must be even and >= 2"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        };
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

/// One U-Net stage: dense layer plus step (and optionally condition) injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub temb: Array2<f64>,
    pub cond: Array2<f64>,
}

impl Block {
    fn zeros(input: usize, output: usize, temb: usize, cond: usize) -> Self {
        Self {
            linear: Linear::zeros(input, output),
            temb: Array2::zeros((output, temb)),
            cond: Array2::zeros((output, cond)),
        }
    }

    fn init(input: usize, output: usize, temb: usize, cond: usize, per_block: bool, rng: &mut SeededRng) -> Self {
        let linear = Linear::init(input, output, rng);
        let tb = 1.0 / (temb as f64).sqrt();
        let temb = Array2::from_shape_fn((output, temb), |_| rng.uniform_range(-tb, tb));
        let cond = if per_block {
            let cb = 1.0 / (cond as f64).sqrt();
            Array2::from_shape_fn((output, cond), |_| rng.uniform_range(-cb, cb))
        } else {
            Array2::zeros((output, cond))
        };
        Self { linear, temb, cond }
    }

    fn forward(&self, x: &Array2<f64>, e: &Array2<f64>, c: Option<&Array2<f64>>) -> Array2<f64> {
        let mut z = self.linear.forward(x) + e.dot(&self.temb.t());
        if let Some(c) = c {
            z += &c.dot(&self.cond.t());
        }
        z.mapv_inplace(f64::tanh);
        z
    }

    /// Returns `(dx, de, dc)` given the block output `h` and `dL/dh`.
    fn backward(
        &self,
        x: &Array2<f64>,
        e: &Array2<f64>,
        c: Option<&Array2<f64>>,
        h: &Array2<f64>,
        dh: &Array2<f64>,
        grad: &mut Block,
    ) -> (Array2<f64>, Array2<f64>, Option<Array2<f64>>) {
        let dz = dh * &h.mapv(|v| 1.0 - v * v);
        let dx = self.linear.backward(x, &dz, &mut grad.linear);
        grad.temb += &dz.t().dot(e);
        let de = dz.dot(&self.temb);
        let dc = c.map(|c| {
            grad.cond += &dz.t().dot(c);
            dz.dot(&self.cond)
        });
        (dx, de, dc)
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.linear.push_tensors(prefix, out);
        out.push((format!("{prefix}.temb"), self.temb.view().into_dyn()));
        out.push((format!("{prefix}.cond"), self.cond.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.linear.push_tensors_mut(prefix, out);
        out.push((format!("{prefix}.temb"), self.temb.view_mut().into_dyn()));
        out.push((format!("{prefix}.cond"), self.cond.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub temb_in: Linear,
    pub temb_out: Linear,
    /// Elementwise weight on the condition added to the input.
    pub cond_gate: Array1<f64>,
    pub down: Block,
    pub mid: Block,
    pub up: Block,
    pub output: Linear,
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub DenoiserParams);

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        for (_, mut t) in self.0.tensors_mut() {
            t *= k;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        let others = other.0.tensors();
        for ((_, mut t), (_, o)) in self.0.tensors_mut().into_iter().zip(others) {
            t.scaled_add(k, &o);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Gradients with respect to the denoiser inputs.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub x_t: Array2<f64>,
    pub cond: Option<Array2<f64>>,
}

struct Record {
    fingerprint: u64,
    temb_raw: Array2<f64>,
    e1: Array2<f64>,
    e: Array2<f64>,
    cond: Option<Array2<f64>>,
    h0: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    skip: Array2<f64>,
    h3: Array2<f64>,
}

/// Activations from a recorded forward pass, consumed by `backward`.
#[derive(Default)]
pub struct Tape {
    record: Option<Record>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Self {
        let DenoiserConfig {
            feature_dim: f,
            down_dim: d,
            mid_dim: m,
            temb_dim: e,
            ..
        } = config;
        Self {
            config,
            temb_in: Linear::zeros(e, e),
            temb_out: Linear::zeros(e, e),
            cond_gate: Array1::zeros(f),
            down: Block::zeros(f, d, e, f),
            mid: Block::zeros(d, m, e, f),
            up: Block::zeros(m + f, f, e, f),
            output: Linear::zeros(f, f),
        }
    }

    /// Uniform fan-in init; the input condition gate starts at one.
    pub fn init(config: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let DenoiserConfig {
            feature_dim: f,
            down_dim: d,
            mid_dim: m,
            temb_dim: e,
            cond_inject,
        } = config;
        let per_block = cond_inject == CondInject::PerBlock;
        Ok(Self {
            config,
            temb_in: Linear::init(e, e, rng),
            temb_out: Linear::init(e, e, rng),
            cond_gate: Array1::ones(f),
            down: Block::init(f, d, e, f, per_block, rng),
            mid: Block::init(d, m, e, f, per_block, rng),
            up: Block::init(m + f, f, e, f, per_block, rng),
            output: Linear::init(f, f, rng),
        })
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(Self::zeros(self.config))
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits of every parameter.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn check_inputs(&self, x_t: &Array2<f64>, t: &[usize], cond: Option<&Array2<f64>>) -> Result<()> {
        let f = self.config.feature_dim;
        if x_t.ncols() != f {
            return Err(Error::validation(format!(
                "denoiser expects width {f}, got {}",
                x_t.ncols()
            )));
        }
        if t.len() != x_t.nrows() {
            return Err(Error::validation(format!(
                "{} steps supplied for {} rows",
                t.len(),
                x_t.nrows()
            )));
        }
        if let Some(c) = cond {
            if c.shape() != x_t.shape() {
                return Err(Error::validation(format!(
                    "condition shape {:?} does not match input {:?}",
                    c.shape(),
                    x_t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Predicts the clean vector for every row of `x_t`.
    pub fn forward(&self, x_t: &Array2<f64>, t: &[usize], cond: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let mut tape = Tape::default();
        self.forward_recorded(x_t, t, cond, &mut tape)
    }

    pub fn forward_recorded(
        &self,
        x_t: &Array2<f64>,
        t: &[usize],
        cond: Option<&Array2<f64>>,
        tape: &mut Tape,
    ) -> Result<Array2<f64>> {
        self.check_inputs(x_t, t, cond)?;
        let e_dim = self.config.temb_dim;
        let mut temb_raw = Array2::zeros((t.len(), e_dim));
        for (i, &step) in t.iter().enumerate() {
            let emb = timestep_embedding(step, e_dim)?;
            temb_raw.row_mut(i).assign(&Array1::from(emb));
        }
        let e1 = self.temb_in.forward(&temb_raw).mapv(f64::tanh);
        let e = self.temb_out.forward(&e1);

        let h0 = match cond {
            Some(c) => x_t + &(c * &self.cond_gate),
            None => x_t.clone(),
        };
        let block_cond = match self.config.cond_inject {
            CondInject::PerBlock => cond,
            CondInject::InputOnly => None,
        };
        let h1 = self.down.forward(&h0, &e, block_cond);
        let h2 = self.mid.forward(&h1, &e, block_cond);
        let skip = concatenate(Axis(1), &[h2.view(), h0.view()]).expect("same row count");
        let h3 = self.up.forward(&skip, &e, block_cond);
        let out = self.output.forward(&h3);

        tape.record = Some(Record {
            fingerprint: self.fingerprint(),
            temb_raw,
            e1,
            e,
            cond: cond.cloned(),
            h0,
            h1,
            h2,
            skip,
            h3,
        });
        Ok(out)
    }

    /// Reverse-mode pass for `dL/d(output)`; needs a tape recorded by these
    /// exact parameters.
    pub fn backward(&self, tape: &Tape, d_out: &Array2<f64>) -> Result<(Gradients, InputGrads)> {
        let rec = tape
            .record
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        if rec.fingerprint != self.fingerprint() {
            return Err(Error::State(
                "forward record was produced by different parameters".into(),
            ));
        }
        if d_out.shape() != rec.h3.shape() {
            return Err(Error::validation("output gradient shape mismatch"));
        }
        let mut g = self.zeros_like();
        let gp = &mut g.0;
        let block_cond = match self.config.cond_inject {
            CondInject::PerBlock => rec.cond.as_ref(),
            CondInject::InputOnly => None,
        };
        let mid_dim = self.config.mid_dim;

        let dh3 = self.output.backward(&rec.h3, d_out, &mut gp.output);
        let (dskip, mut de, dc_up) = self
            .up
            .backward(&rec.skip, &rec.e, block_cond, &rec.h3, &dh3, &mut gp.up);
        let dh2 = dskip.slice(s![.., ..mid_dim]).to_owned();
        let mut dh0 = dskip.slice(s![.., mid_dim..]).to_owned();
        let (dh1, de_mid, dc_mid) = self
            .mid
            .backward(&rec.h1, &rec.e, block_cond, &rec.h2, &dh2, &mut gp.mid);
        de += &de_mid;
        let (dh0_down, de_down, dc_down) = self
            .down
            .backward(&rec.h0, &rec.e, block_cond, &rec.h1, &dh1, &mut gp.down);
        de += &de_down;
        dh0 += &dh0_down;

        let de1 = self.temb_out.backward(&rec.e1, &de, &mut gp.temb_out);
        let da1 = de1 * &rec.e1.mapv(|v| 1.0 - v * v);
        self.temb_in.backward(&rec.temb_raw, &da1, &mut gp.temb_in);

        let d_cond = rec.cond.as_ref().map(|c| {
            gp.cond_gate += &(&dh0 * c).sum_axis(Axis(0));
            let mut dc = &dh0 * &self.cond_gate;
            for part in [dc_up, dc_mid, dc_down].into_iter().flatten() {
                dc += &part;
            }
            dc
        });
        Ok((g, InputGrads { x_t: dh0, cond: d_cond }))
    }
}

impl Parameters for DenoiserParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.temb_in.push_tensors("temb_in", &mut out);
        self.temb_out.push_tensors("temb_out", &mut out);
        out.push(("cond_gate".into(), self.cond_gate.view().into_dyn()));
        self.down.push("down", &mut out);
        self.mid.push("mid", &mut out);
        self.up.push("up", &mut out);
        self.output.push_tensors("output", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.temb_in.push_tensors_mut("temb_in", &mut out);
        self.temb_out.push_tensors_mut("temb_out", &mut out);
        out.push(("cond_gate".into(), self.cond_gate.view_mut().into_dyn()));
        self.down.push_mut("down", &mut out);
        self.mid.push_mut("mid", &mut out);
        self.up.push_mut("up", &mut out);
        self.output.push_tensors_mut("output", &mut out);
        out
    }
}

impl Parameters for Gradients {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.0.tensors_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn small(cond_inject: CondInject) -> DenoiserConfig {
        DenoiserConfig {
            feature_dim: 6,
            down_dim: 4,
            mid_dim: 3,
            temb_dim: 8,
            cond_inject,
        }
    }

    #[test]
    fn embedding_examples() {
        assert_eq!(timestep_embedding(0, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        let e = timestep_embedding(1, 4).unwrap();
        let expected = [1f64.sin(), 1e-4f64.sin(), 1f64.cos(), 1e-4f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((e[2] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert_eq!(timestep_embedding(3, 2).unwrap(), vec![3f64.sin(), 3f64.cos()]);
        assert!(timestep_embedding(1, 5).is_err());
        assert!(timestep_embedding(1, 0).is_err());
    }

    #[test]
    fn embedding_is_bounded() {
        let mut rng = SeededRng::new(4, Stream::Noise);
        for _ in 0..1000 {
            let t = rng.below(10_000);
            let d = 2 * (1 + rng.below(64));
            assert!(timestep_embedding(t, d).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = DenoiserParams::zeros(small(CondInject::PerBlock));
        let x = Array2::from_elem((3, 6), 0.7);
        let c = Array2::from_elem((3, 6), -0.2);
        let y = p.forward(&x, &[1, 2, 3], Some(&c)).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn condition_path_is_live() {
        let mut rng = SeededRng::new(8, Stream::Init);
        for mode in [CondInject::InputOnly, CondInject::PerBlock] {
            let mut p = DenoiserParams::init(small(mode), &mut rng).unwrap();
            let x = Array2::from_shape_fn((2, 6), |_| rng.normal());
            let c = Array2::from_shape_fn((2, 6), |_| rng.normal());
            let with = p.forward(&x, &[2, 5], Some(&c)).unwrap();
            let without = p.forward(&x, &[2, 5], None).unwrap();
            assert!(with.iter().zip(without.iter()).any(|(a, b)| (a - b).abs() > 1e-6));

            p.cond_gate.fill(0.0);
            for b in [&mut p.down, &mut p.mid, &mut p.up] {
                b.cond.fill(0.0);
            }
            let with = p.forward(&x, &[2, 5], Some(&c)).unwrap();
            let without = p.forward(&x, &[2, 5], None).unwrap();
            assert_eq!(with, without);
        }
    }

    #[test]
    fn shape_errors() {
        let p = DenoiserParams::zeros(small(CondInject::InputOnly));
        assert!(p.forward(&Array2::zeros((2, 5)), &[1, 1], None).is_err());
        assert!(p.forward(&Array2::zeros((2, 6)), &[1], None).is_err());
        assert!(p
            .forward(&Array2::zeros((2, 6)), &[1, 1], Some(&Array2::zeros((2, 4))))
            .is_err());
    }

    #[test]
    fn backward_needs_matching_record() {
        let mut rng = SeededRng::new(8, Stream::Init);
        let mut p = DenoiserParams::init(small(CondInject::InputOnly), &mut rng).unwrap();
        let d = Array2::ones((1, 6));
        assert!(matches!(p.backward(&Tape::default(), &d), Err(Error::State(_))));
        let mut tape = Tape::default();
        p.forward_recorded(&Array2::zeros((1, 6)), &[1], None, &mut tape)
            .unwrap();
        assert!(p.backward(&tape, &d).is_ok());
        p.output.bias[0] += 1.0;
        assert!(matches!(p.backward(&tape, &d), Err(Error::State(_))));
    }

    #[test]
    fn input_only_leaves_block_condition_weights_untouched() {
        let mut rng = SeededRng::new(3, Stream::Init);
        let p = DenoiserParams::init(small(CondInject::InputOnly), &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 6), |_| rng.normal());
        let c = Array2::from_shape_fn((4, 6), |_| rng.normal());
        let mut tape = Tape::default();
        let y = p.forward_recorded(&x, &[1, 2, 3, 4], Some(&c), &mut tape).unwrap();
        let (g, _) = p.backward(&tape, &y).unwrap();
        for b in [&g.0.down, &g.0.mid, &g.0.up] {
            assert!(b.cond.iter().all(|v| *v == 0.0));
        }
        assert!(g.0.cond_gate.iter().any(|v| *v != 0.0));
    }
}
