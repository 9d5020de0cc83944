use rand::Rng;

use super::arch::{ArchSpec, INPUT_FEATURES};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

/// Every learnable tensor of one policy. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub arch: ArchSpec,
    pub input_w: Tensor,
    pub input_b: Tensor,
    /// Added to the depot's input projection (CVRP only).
    pub depot_embed: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    pub ctx_graph: Tensor,
    pub ctx_current: Tensor,
    /// Remaining-capacity weight of the decoder query (CVRP only).
    pub ctx_capacity: Tensor,
    /// Stands in for the current-node embedding before the first TSP move.
    pub first_placeholder: Tensor,
    pub glimpse_wk: Tensor,
    pub glimpse_wv: Tensor,
    pub glimpse_wo: Tensor,
    pub pointer_wk: Tensor,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl PolicyParams {
    /// All-zero parameters for `arch`; the layout used for gradients.
    pub fn zeros(arch: &ArchSpec) -> Self {
        let d = arch.embed_dim;
        let f = arch.feedforward_dim;
        let layers = (0..arch.n_encoder_layers)
            .map(|_| EncoderLayerParams {
                wq: Tensor::zeros(d, d),
                wk: Tensor::zeros(d, d),
                wv: Tensor::zeros(d, d),
                wo: Tensor::zeros(d, d),
                norm1_gain: Tensor::zeros(1, d),
                norm1_bias: Tensor::zeros(1, d),
                ff_w1: Tensor::zeros(d, f),
                ff_b1: Tensor::zeros(1, f),
                ff_w2: Tensor::zeros(f, d),
                ff_b2: Tensor::zeros(1, d),
                norm2_gain: Tensor::zeros(1, d),
                norm2_bias: Tensor::zeros(1, d),
            })
            .collect();
        Self {
            arch: arch.clone(),
            input_w: Tensor::zeros(INPUT_FEATURES, d),
            input_b: Tensor::zeros(1, d),
            depot_embed: Tensor::zeros(1, d),
            layers,
            ctx_graph: Tensor::zeros(d, d),
            ctx_current: Tensor::zeros(d, d),
            ctx_capacity: Tensor::zeros(1, d),
            first_placeholder: Tensor::zeros(1, d),
            glimpse_wk: Tensor::zeros(d, d),
            glimpse_wv: Tensor::zeros(d, d),
            glimpse_wo: Tensor::zeros(d, d),
            pointer_wk: Tensor::zeros(d, d),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, unit norm gains, zero norm biases.
    pub fn init(arch: &ArchSpec, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let f = arch.feedforward_dim;
        let bd = 1.0 / (d as f64).sqrt();
        let bf = 1.0 / (f as f64).sqrt();
        let bi = 1.0 / (INPUT_FEATURES as f64).sqrt();
        let input_w = uniform(INPUT_FEATURES, d, bi, rng);
        let input_b = uniform(1, d, bi, rng);
        let depot_embed = uniform(1, d, bd, rng);
        let layers = (0..arch.n_encoder_layers)
            .map(|_| EncoderLayerParams {
                wq: uniform(d, d, bd, rng),
                wk: uniform(d, d, bd, rng),
                wv: uniform(d, d, bd, rng),
                wo: uniform(d, d, bd, rng),
                norm1_gain: Tensor::filled(1, d, 1.0),
                norm1_bias: Tensor::zeros(1, d),
                ff_w1: uniform(d, f, bd, rng),
                ff_b1: uniform(1, f, bd, rng),
                ff_w2: uniform(f, d, bf, rng),
                ff_b2: uniform(1, d, bf, rng),
                norm2_gain: Tensor::filled(1, d, 1.0),
                norm2_bias: Tensor::zeros(1, d),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            input_w,
            input_b,
            depot_embed,
            layers,
            ctx_graph: uniform(d, d, bd, rng),
            ctx_current: uniform(d, d, bd, rng),
            ctx_capacity: uniform(1, d, 1.0, rng),
            first_placeholder: uniform(1, d, 1.0, rng),
            glimpse_wk: uniform(d, d, bd, rng),
            glimpse_wv: uniform(d, d, bd, rng),
            glimpse_wo: uniform(d, d, bd, rng),
            pointer_wk: uniform(d, d, bd, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.w".into(), &self.input_w),
            ("input.b".into(), &self.input_b),
            ("input.depot".into(), &self.depot_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("encoder.{i}.{s}");
            out.extend([
                (p("wq"), &l.wq),
                (p("wk"), &l.wk),
                (p("wv"), &l.wv),
                (p("wo"), &l.wo),
                (p("norm1.gain"), &l.norm1_gain),
                (p("norm1.bias"), &l.norm1_bias),
                (p("ff.w1"), &l.ff_w1),
                (p("ff.b1"), &l.ff_b1),
                (p("ff.w2"), &l.ff_w2),
                (p("ff.b2"), &l.ff_b2),
                (p("norm2.gain"), &l.norm2_gain),
                (p("norm2.bias"), &l.norm2_bias),
            ]);
        }
        out.extend([
            ("decoder.ctx_graph".into(), &self.ctx_graph),
            ("decoder.ctx_current".into(), &self.ctx_current),
            ("decoder.ctx_capacity".into(), &self.ctx_capacity),
            ("decoder.first_placeholder".into(), &self.first_placeholder),
            ("decoder.glimpse_wk".into(), &self.glimpse_wk),
            ("decoder.glimpse_wv".into(), &self.glimpse_wv),
            ("decoder.glimpse_wo".into(), &self.glimpse_wo),
            ("decoder.pointer_wk".into(), &self.pointer_wk),
        ]);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.w".into(), &mut self.input_w),
            ("input.b".into(), &mut self.input_b),
            ("input.depot".into(), &mut self.depot_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("encoder.{i}.{s}");
            out.extend([
                (p("wq"), &mut l.wq),
                (p("wk"), &mut l.wk),
                (p("wv"), &mut l.wv),
                (p("wo"), &mut l.wo),
                (p("norm1.gain"), &mut l.norm1_gain),
                (p("norm1.bias"), &mut l.norm1_bias),
                (p("ff.w1"), &mut l.ff_w1),
                (p("ff.b1"), &mut l.ff_b1),
                (p("ff.w2"), &mut l.ff_w2),
                (p("ff.b2"), &mut l.ff_b2),
                (p("norm2.gain"), &mut l.norm2_gain),
                (p("norm2.bias"), &mut l.norm2_bias),
            ]);
        }
        out.extend([
            ("decoder.ctx_graph".into(), &mut self.ctx_graph),
            ("decoder.ctx_current".into(), &mut self.ctx_current),
            ("decoder.ctx_capacity".into(), &mut self.ctx_capacity),
            ("decoder.first_placeholder".into(), &mut self.first_placeholder),
            ("decoder.glimpse_wk".into(), &mut self.glimpse_wk),
            ("decoder.glimpse_wv".into(), &mut self.glimpse_wv),
            ("decoder.glimpse_wo".into(), &mut self.glimpse_wo),
            ("decoder.pointer_wk".into(), &mut self.pointer_wk),
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(name, _)| name)
    }

    pub fn check_finite(&self, location: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::numeric(location, format!("non-finite values in {name}"))),
            None => Ok(()),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        assert_eq!(self.arch, other.arch, "architecture mismatch");
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn dot(&self, other: &PolicyParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| super::tensor::dot(a.data(), b.data()))
            .sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Flat copy of every value in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params());
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }
}
