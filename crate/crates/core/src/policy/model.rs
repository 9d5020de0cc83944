//! Forward and backward passes of the attention encoder-decoder.
//!
//! The encoder is a stack of multi-head self-attention blocks with instance
//! normalization over the nodes of one instance. The decoder builds a query
//! from the graph mean, the current node and (CVRP) the remaining capacity,
//! attends over the feasible nodes, and scores them with a clipped pointer.
//!
//! Backward passes are written out by hand. Every forward pass keeps what its
//! backward pass needs; nothing is recomputed.

use super::arch::{INPUT_FEATURES, LOGIT_CLIP, NORM_EPS};
use super::params::{EncoderLayerParams, PolicyParams};
use super::tensor::{axpy_slice, dot, matmul_vec, vec_matmul, Tensor};
use crate::error::{Error, Result};
use crate::problems::{Instance, ProblemKind};

fn input_features(instance: &Instance) -> Tensor {
    let n = instance.n_nodes();
    let mut x = Tensor::zeros(n, INPUT_FEATURES);
    let cap = instance.capacity().max(1) as f64;
    for (i, p) in instance.coords().iter().enumerate() {
        let row = x.row_mut(i);
        row[0] = p[0];
        row[1] = p[1];
        if instance.kind() == ProblemKind::Cvrp {
            row[2] = instance.demand(i) as f64 / cap;
        }
    }
    x
}

struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel normalization over the rows (nodes) of `x`.
fn instance_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, NormCache) {
    let (n, d) = x.shape();
    let mean = x.col_means();
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (c, v) in x.row(i).iter().enumerate() {
            let z = v - mean[c];
            var[c] += z * z;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / n as f64 + NORM_EPS).sqrt())
        .collect();
    let mut xhat = Tensor::zeros(n, d);
    let mut y = Tensor::zeros(n, d);
    for i in 0..n {
        for c in 0..d {
            let h = (x.get(i, c) - mean[c]) * inv_std[c];
            xhat.row_mut(i)[c] = h;
            y.row_mut(i)[c] = gain.data()[c] * h + bias.data()[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn instance_norm_backward(
    dy: &Tensor,
    cache: &NormCache,
    gain: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let (n, d) = dy.shape();
    let nf = n as f64;
    let mut dx = Tensor::zeros(n, d);
    for c in 0..d {
        let g = gain.data()[c];
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for i in 0..n {
            let dyv = dy.get(i, c);
            let h = cache.xhat.get(i, c);
            dgain.data_mut()[c] += dyv * h;
            dbias.data_mut()[c] += dyv;
            let dh = dyv * g;
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        let (m1, m2) = (sum_dh / nf, sum_dh_h / nf);
        for i in 0..n {
            let dh = dy.get(i, c) * g;
            let h = cache.xhat.get(i, c);
            dx.row_mut(i)[c] = cache.inv_std[c] * (dh - m1 - h * m2);
        }
    }
    dx
}

/// In-place softmax over the entries where `mask` is true; others become 0.
fn masked_softmax(values: &mut [f64], mask: &[bool]) {
    let max = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &m) in values.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    values.iter_mut().for_each(|v| *v /= sum);
}

struct LayerCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// One `n × n` attention matrix per head.
    attn: Vec<Tensor>,
    heads_out: Tensor,
    norm1: NormCache,
    n1: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
    norm2: NormCache,
}

/// Encoder output together with everything its backward pass needs.
pub struct EncoderPass {
    features: Tensor,
    depot: Option<usize>,
    layers: Vec<LayerCache>,
    embeddings: Tensor,
}

impl EncoderPass {
    /// Sign pattern of every feed-forward pre-activation. The encoder is
    /// smooth in the parameters wherever this pattern is locally constant.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.ff_pre.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn forward(instance: &Instance, params: &PolicyParams) -> Result<Self> {
        if instance.n_nodes() < 2 {
            return Err(Error::InvalidSize("policy needs at least 2 nodes".into()));
        }
        if instance.kind() != params.arch.problem_kind {
            return Err(Error::Config(format!(
                "{} policy applied to a {} instance",
                params.arch.problem_kind,
                instance.kind()
            )));
        }
        let features = input_features(instance);
        let mut h = features.matmul(&params.input_w);
        h.add_row_broadcast(params.input_b.data());
        let depot = instance.depot();
        if let Some(dp) = depot {
            axpy_slice(h.row_mut(dp), 1.0, params.depot_embed.data());
        }
        let heads = params.arch.n_heads;
        let mut layers = Vec::with_capacity(params.layers.len());
        for (li, lp) in params.layers.iter().enumerate() {
            let (out, cache) = layer_forward(h, lp, heads);
            if !out.is_finite() {
                return Err(Error::numeric(
                    format!("encoder layer {li}"),
                    "non-finite activation",
                ));
            }
            layers.push(cache);
            h = out;
        }
        Ok(Self {
            features,
            depot,
            layers,
            embeddings: h,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative with
    /// respect to the node embeddings is `d_embeddings`.
    pub fn backward(&self, params: &PolicyParams, d_embeddings: Tensor, grads: &mut PolicyParams) {
        let heads = params.arch.n_heads;
        let mut dh = d_embeddings;
        for (li, cache) in self.layers.iter().enumerate().rev() {
            dh = layer_backward(dh, cache, &params.layers[li], &mut grads.layers[li], heads);
        }
        grads.input_w.add_t_matmul(&self.features, &dh);
        grads.input_b.add_col_sums(&dh);
        if let Some(dp) = self.depot {
            axpy_slice(grads.depot_embed.data_mut(), 1.0, dh.row(dp));
        }
    }
}

fn layer_forward(h: Tensor, lp: &EncoderLayerParams, heads: usize) -> (Tensor, LayerCache) {
    let (n, d) = h.shape();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = h.matmul(&lp.wq);
    let k = h.matmul(&lp.wk);
    let v = h.matmul(&lp.wv);
    let mut attn = Vec::with_capacity(heads);
    let mut heads_out = Tensor::zeros(n, d);
    let all = vec![true; n];
    for hd in 0..heads {
        let off = hd * dk;
        let mut a = Tensor::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dk];
            let row = a.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k.row(j)[off..off + dk]) * scale;
            }
            masked_softmax(row, &all);
        }
        for i in 0..n {
            let out = &mut heads_out.row_mut(i)[off..off + dk];
            for j in 0..n {
                axpy_slice(out, a.get(i, j), &v.row(j)[off..off + dk]);
            }
        }
        attn.push(a);
    }
    let mut r1 = heads_out.matmul(&lp.wo);
    r1.add_assign(&h);
    let (n1, norm1) = instance_norm(&r1, &lp.norm1_gain, &lp.norm1_bias);
    let mut ff_pre = n1.matmul(&lp.ff_w1);
    ff_pre.add_row_broadcast(lp.ff_b1.data());
    let mut ff_act = ff_pre.clone();
    ff_act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut r2 = ff_act.matmul(&lp.ff_w2);
    r2.add_row_broadcast(lp.ff_b2.data());
    r2.add_assign(&n1);
    let (out, norm2) = instance_norm(&r2, &lp.norm2_gain, &lp.norm2_bias);
    (
        out,
        LayerCache {
            input: h,
            q,
            k,
            v,
            attn,
            heads_out,
            norm1,
            n1,
            ff_pre,
            ff_act,
            norm2,
        },
    )
}

fn layer_backward(
    dout: Tensor,
    c: &LayerCache,
    lp: &EncoderLayerParams,
    g: &mut EncoderLayerParams,
    heads: usize,
) -> Tensor {
    let (n, d) = dout.shape();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let dr2 = instance_norm_backward(&dout, &c.norm2, &lp.norm2_gain, &mut g.norm2_gain, &mut g.norm2_bias);
    g.ff_w2.add_t_matmul(&c.ff_act, &dr2);
    g.ff_b2.add_col_sums(&dr2);
    let mut dpre = dr2.matmul_t(&lp.ff_w2);
    for (dv, &pre) in dpre.data_mut().iter_mut().zip(c.ff_pre.data()) {
        if pre <= 0.0 {
            *dv = 0.0;
        }
    }
    g.ff_w1.add_t_matmul(&c.n1, &dpre);
    g.ff_b1.add_col_sums(&dpre);
    let mut dn1 = dpre.matmul_t(&lp.ff_w1);
    dn1.add_assign(&dr2);

    let dr1 = instance_norm_backward(&dn1, &c.norm1, &lp.norm1_gain, &mut g.norm1_gain, &mut g.norm1_bias);
    g.wo.add_t_matmul(&c.heads_out, &dr1);
    let dheads = dr1.matmul_t(&lp.wo);

    let mut dq = Tensor::zeros(n, d);
    let mut dk_t = Tensor::zeros(n, d);
    let mut dv = Tensor::zeros(n, d);
    let mut da = vec![0.0; n];
    for hd in 0..heads {
        let off = hd * dk;
        let a = &c.attn[hd];
        for i in 0..n {
            let dout_i = &dheads.row(i)[off..off + dk];
            for j in 0..n {
                da[j] = dot(dout_i, &c.v.row(j)[off..off + dk]);
                axpy_slice(&mut dv.row_mut(j)[off..off + dk], a.get(i, j), dout_i);
            }
            let arow = a.row(i);
            let inner = dot(arow, &da);
            for j in 0..n {
                let ds = arow[j] * (da[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy_slice(&mut dq.row_mut(i)[off..off + dk], ds, &c.k.row(j)[off..off + dk]);
                axpy_slice(&mut dk_t.row_mut(j)[off..off + dk], ds, &c.q.row(i)[off..off + dk]);
            }
        }
    }
    g.wq.add_t_matmul(&c.input, &dq);
    g.wk.add_t_matmul(&c.input, &dk_t);
    g.wv.add_t_matmul(&c.input, &dv);
    let mut dh = dr1;
    dh.add_assign(&dq.matmul_t(&lp.wq));
    dh.add_assign(&dk_t.matmul_t(&lp.wk));
    dh.add_assign(&dv.matmul_t(&lp.wv));
    dh
}

/// Per-instance decoder projections, computed once and shared by every
/// trajectory on the instance.
pub struct DecoderContext {
    kind: ProblemKind,
    heads: usize,
    graph_mean: Vec<f64>,
    graph_query: Vec<f64>,
    current_query: Tensor,
    placeholder_query: Vec<f64>,
    glimpse_k: Tensor,
    glimpse_v: Tensor,
    pointer_k: Tensor,
}

/// Decoder state that changes from step to step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInput {
    pub current: Option<usize>,
    /// Remaining capacity as a fraction of the vehicle capacity (CVRP).
    pub capacity_frac: f64,
}

/// Everything one decoding step computed.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub input: StepInput,
    pub mask: Vec<bool>,
    query: Vec<f64>,
    /// `heads × n`, zero on masked nodes.
    attn: Vec<f64>,
    glimpse: Vec<f64>,
    glimpse_out: Vec<f64>,
    tanh: Vec<f64>,
    /// Probabilities, exactly zero on masked nodes.
    pub probs: Vec<f64>,
    /// Log-probabilities, `-inf` on masked nodes.
    pub log_probs: Vec<f64>,
}

impl StepCache {
    /// Decoder glimpse after its output projection; the pointer query.
    pub fn pointer_query(&self) -> &[f64] {
        &self.glimpse_out
    }
}

/// Gradients of the decoder's per-instance projections.
pub struct DecoderGrads {
    graph_query: Vec<f64>,
    current_query: Tensor,
    placeholder_query: Vec<f64>,
    glimpse_k: Tensor,
    glimpse_v: Tensor,
    pointer_k: Tensor,
}

impl DecoderContext {
    pub fn new(embeddings: &Tensor, params: &PolicyParams) -> Self {
        let graph_mean = embeddings.col_means();
        Self {
            kind: params.arch.problem_kind,
            heads: params.arch.n_heads,
            graph_query: vec_matmul(&graph_mean, &params.ctx_graph),
            graph_mean,
            current_query: embeddings.matmul(&params.ctx_current),
            placeholder_query: vec_matmul(params.first_placeholder.data(), &params.ctx_current),
            glimpse_k: embeddings.matmul(&params.glimpse_wk),
            glimpse_v: embeddings.matmul(&params.glimpse_wv),
            pointer_k: embeddings.matmul(&params.pointer_wk),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.pointer_k.rows()
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        let (n, d) = self.pointer_k.shape();
        DecoderGrads {
            graph_query: vec![0.0; d],
            current_query: Tensor::zeros(n, d),
            placeholder_query: vec![0.0; d],
            glimpse_k: Tensor::zeros(n, d),
            glimpse_v: Tensor::zeros(n, d),
            pointer_k: Tensor::zeros(n, d),
        }
    }

    /// One decoding step. `mask` must allow at least one node.
    pub fn step(&self, params: &PolicyParams, input: StepInput, mask: &[bool]) -> Result<StepCache> {
        let (n, d) = self.pointer_k.shape();
        if !mask.iter().any(|&m| m) {
            return Err(Error::Invariant("decoding step with every action masked".into()));
        }
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut query = self.graph_query.clone();
        match input.current {
            Some(c) => axpy_slice(&mut query, 1.0, self.current_query.row(c)),
            None => axpy_slice(&mut query, 1.0, &self.placeholder_query),
        }
        if self.kind == ProblemKind::Cvrp {
            axpy_slice(&mut query, input.capacity_frac, params.ctx_capacity.data());
        }

        let mut attn = vec![0.0; self.heads * n];
        let mut glimpse = vec![0.0; d];
        for h in 0..self.heads {
            let off = h * dk;
            let qh = &query[off..off + dk];
            let row = &mut attn[h * n..(h + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                if mask[j] {
                    *r = dot(qh, &self.glimpse_k.row(j)[off..off + dk]) * scale;
                }
            }
            masked_softmax(row, mask);
            for j in 0..n {
                if row[j] != 0.0 {
                    axpy_slice(&mut glimpse[off..off + dk], row[j], &self.glimpse_v.row(j)[off..off + dk]);
                }
            }
        }
        let glimpse_out = vec_matmul(&glimpse, &params.glimpse_wo);

        let pscale = 1.0 / (d as f64).sqrt();
        let mut tanh = vec![0.0; n];
        let mut logits = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            if mask[j] {
                let t = (dot(&glimpse_out, self.pointer_k.row(j)) * pscale).tanh();
                tanh[j] = t;
                logits[j] = LOGIT_CLIP * t;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits
            .iter()
            .map(|&v| if v.is_finite() { v - lse } else { f64::NEG_INFINITY })
            .collect();
        let probs: Vec<f64> = log_probs.iter().map(|&v| if v.is_finite() { v.exp() } else { 0.0 }).collect();
        if !lse.is_finite() {
            return Err(Error::numeric("decoder", "non-finite pointer logits"));
        }
        Ok(StepCache {
            input,
            mask: mask.to_vec(),
            query,
            attn,
            glimpse,
            glimpse_out,
            tanh,
            probs,
            log_probs,
        })
    }

    /// Backward of `Σ_j coeffs[j] · log p(j)` through one step.
    pub fn step_backward(
        &self,
        params: &PolicyParams,
        step: &StepCache,
        coeffs: &[f64],
        dg: &mut DecoderGrads,
        grads: &mut PolicyParams,
    ) {
        let (n, d) = self.pointer_k.shape();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let pscale = 1.0 / (d as f64).sqrt();

        if coeffs.iter().all(|&c| c == 0.0) {
            return;
        }
        let total: f64 = coeffs.iter().zip(&step.mask).filter(|(_, &m)| m).map(|(c, _)| c).sum();
        let mut dglimpse_out = vec![0.0; d];
        for j in 0..n {
            if !step.mask[j] {
                continue;
            }
            let dlogit = coeffs[j] - step.probs[j] * total;
            let t = step.tanh[j];
            let dpre = dlogit * LOGIT_CLIP * (1.0 - t * t) * pscale;
            if dpre == 0.0 {
                continue;
            }
            axpy_slice(&mut dglimpse_out, dpre, self.pointer_k.row(j));
            axpy_slice(dg.pointer_k.row_mut(j), dpre, &step.glimpse_out);
        }
        grads.glimpse_wo.add_outer(&step.glimpse, &dglimpse_out);
        let dglimpse = matmul_vec(&params.glimpse_wo, &dglimpse_out);

        let mut dquery = vec![0.0; d];
        let mut da = vec![0.0; n];
        for h in 0..self.heads {
            let off = h * dk;
            let arow = &step.attn[h * n..(h + 1) * n];
            let dgh = &dglimpse[off..off + dk];
            let mut inner = 0.0;
            for j in 0..n {
                if arow[j] == 0.0 {
                    da[j] = 0.0;
                    continue;
                }
                da[j] = dot(dgh, &self.glimpse_v.row(j)[off..off + dk]);
                inner += arow[j] * da[j];
                axpy_slice(&mut dg.glimpse_v.row_mut(j)[off..off + dk], arow[j], dgh);
            }
            let qh = &step.query[off..off + dk];
            for j in 0..n {
                if arow[j] == 0.0 {
                    continue;
                }
                let ds = arow[j] * (da[j] - inner) * scale;
                axpy_slice(&mut dquery[off..off + dk], ds, &self.glimpse_k.row(j)[off..off + dk]);
                axpy_slice(&mut dg.glimpse_k.row_mut(j)[off..off + dk], ds, qh);
            }
        }

        axpy_slice(&mut dg.graph_query, 1.0, &dquery);
        match step.input.current {
            Some(c) => axpy_slice(dg.current_query.row_mut(c), 1.0, &dquery),
            None => axpy_slice(&mut dg.placeholder_query, 1.0, &dquery),
        }
        if self.kind == ProblemKind::Cvrp {
            axpy_slice(grads.ctx_capacity.data_mut(), step.input.capacity_frac, &dquery);
        }
    }

    /// Pushes the accumulated projection gradients into the parameters and
    /// returns the gradient with respect to the node embeddings.
    pub fn backward(
        &self,
        params: &PolicyParams,
        embeddings: &Tensor,
        dg: DecoderGrads,
        grads: &mut PolicyParams,
    ) -> Tensor {
        let n = embeddings.rows();
        grads.ctx_graph.add_outer(&self.graph_mean, &dg.graph_query);
        let dmean = matmul_vec(&params.ctx_graph, &dg.graph_query);

        grads.ctx_current.add_t_matmul(embeddings, &dg.current_query);
        grads
            .ctx_current
            .add_outer(params.first_placeholder.data(), &dg.placeholder_query);
        let dph = matmul_vec(&params.ctx_current, &dg.placeholder_query);
        axpy_slice(grads.first_placeholder.data_mut(), 1.0, &dph);

        grads.glimpse_wk.add_t_matmul(embeddings, &dg.glimpse_k);
        grads.glimpse_wv.add_t_matmul(embeddings, &dg.glimpse_v);
        grads.pointer_wk.add_t_matmul(embeddings, &dg.pointer_k);

        let mut dh = dg.current_query.matmul_t(&params.ctx_current);
        dh.add_assign(&dg.glimpse_k.matmul_t(&params.glimpse_wk));
        dh.add_assign(&dg.glimpse_v.matmul_t(&params.glimpse_wv));
        dh.add_assign(&dg.pointer_k.matmul_t(&params.pointer_wk));
        let inv = 1.0 / n as f64;
        for i in 0..n {
            axpy_slice(dh.row_mut(i), inv, &dmean);
        }
        dh
    }
}
