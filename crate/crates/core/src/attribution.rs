//! Signed relevance maps for a single logit.
//!
//! Two methods share one output type:
//!
//! * **Input×Gradient** (`ixg`): relevance of an activation is
//!   `activation · ∂logit/∂activation`, summed over its dimensions.
//! * **epsilon-LRP** (`lrp`): the logit value is propagated backwards layer
//!   by layer. Linear maps use the epsilon rule with bias and stabilizer
//!   shares routed to [`AttributionMap::absorbed`]; layernorm is linearized
//!   with its standard deviation frozen; the activation function passes
//!   relevance through unchanged; residual joins split relevance by the
//!   magnitude of each branch. In the default value-path attention rule the
//!   attention weights are constants, which makes the whole pass
//!   conservative: `Σ input_relevance + absorbed = logit`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::decoding::RoiSpec;
use crate::error::{Error, Result};
use crate::forward::{ActivationCache, NormRecord};
use crate::grad::{readout_direction, readout_gradients};
use crate::model::{LayerNorm, Linear, Model};
use crate::scalar::{dot, Mat, Scalar};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Ixg,
    Lrp,
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ixg" | "ig" | "input-x-gradient" => Ok(Self::Ixg),
            "lrp" => Ok(Self::Lrp),
            other => Err(Error::Data(format!("unknown attribution method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionRule {
    /// Attention weights are constants; all relevance flows through values.
    #[default]
    ValuePath,
    /// Half the relevance flows through values, half through the attention
    /// weights and on through the softmax into queries and keys. Not
    /// conservative.
    BilinearSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub attention_rule: AttentionRule,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            attention_rule: AttentionRule::ValuePath,
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("lrp epsilon must be > 0, got {}", self.epsilon)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentId {
    InputToken(usize),
    AttentionHead { layer: usize, head: usize },
    Residual { layer: usize, position: usize },
    Absorbed,
}

/// Relevance bookkeeping around one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFlow<T> {
    /// Relevance arriving at the attention block output.
    pub attn_output: T,
    /// Share of it kept by the output projection (bias and stabilizer).
    pub out_proj_absorbed: T,
}

#[derive(Debug, Clone)]
pub struct AttributionMap<T> {
    pub target: TokenId,
    pub method: AttributionMethod,
    /// The explained quantity (pre-softmax logit or readout value).
    pub target_logit: T,
    /// Per input position, signed sum over embedding dimensions.
    pub input_relevance: Vec<T>,
    /// `n_layers × n_heads`.
    pub head_relevance: Mat<T>,
    /// Element-wise relevance of `z^h` per layer (`seq × d_model`).
    pub z_relevance: Vec<Mat<T>>,
    /// `(n_layers + 1) × seq`; row 0 is the input embeddings, row `l` the
    /// residual stream leaving block `l - 1`.
    pub residual_relevance: Mat<T>,
    pub absorbed: T,
    pub layer_flow: Vec<LayerFlow<T>>,
    pub d_head: usize,
}

impl<T: Scalar> AttributionMap<T> {
    pub fn n_layers(&self) -> usize {
        self.head_relevance.rows
    }

    pub fn n_heads(&self) -> usize {
        self.head_relevance.cols
    }

    pub fn seq_len(&self) -> usize {
        self.input_relevance.len()
    }

    pub fn relevance(&self, id: ComponentId) -> Result<T> {
        match id {
            ComponentId::InputToken(i) => self
                .input_relevance
                .get(i)
                .copied()
                .ok_or_else(|| Error::IndexOutOfRange(format!("input position {i}"))),
            ComponentId::AttentionHead { layer, head } => head_relevance(self, layer, head),
            ComponentId::Residual { layer, position } => {
                if layer >= self.residual_relevance.rows || position >= self.seq_len() {
                    Err(Error::IndexOutOfRange(format!(
                        "residual ({layer}, {position})"
                    )))
                } else {
                    Ok(self.residual_relevance.at(layer, position))
                }
            }
            ComponentId::Absorbed => Ok(self.absorbed),
        }
    }

    /// `r_h = Σ_i Σ_k relevance(z_i^h)_k` recomputed from the element-wise
    /// relevances.
    pub fn head_sum_from_elements(&self, layer: usize, head: usize) -> T {
        let z = &self.z_relevance[layer];
        let cols = head * self.d_head..(head + 1) * self.d_head;
        (0..z.rows)
            .map(|i| z.row(i)[cols.clone()].iter().copied().sum::<T>())
            .sum()
    }

    /// Rebuilds `head_relevance` from `z_relevance`.
    pub fn recompute_head_relevance(&mut self) {
        for l in 0..self.n_layers() {
            for h in 0..self.n_heads() {
                *self.head_relevance.at_mut(l, h) = self.head_sum_from_elements(l, h);
            }
        }
    }

    pub fn total_input(&self) -> T {
        self.input_relevance.iter().copied().sum()
    }
}

/// Relevance map for the logit of `target` at the last position.
pub fn attribute<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    target: TokenId,
    method: AttributionMethod,
    lrp: &LrpConfig,
) -> Result<AttributionMap<T>> {
    cache.check_model(model)?;
    let dir = readout_direction(model, target)?;
    attribute_readout(model, cache, target, &dir, method, lrp)
}

/// Relevance map for `final_hidden[last] · direction`, an arbitrary linear
/// readout. `label` is stored as the map's target.
pub fn attribute_readout<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    label: TokenId,
    direction: &[T],
    method: AttributionMethod,
    lrp: &LrpConfig,
) -> Result<AttributionMap<T>> {
    cache.check_model(model)?;
    match method {
        AttributionMethod::Ixg => input_x_gradient(model, cache, label, direction),
        AttributionMethod::Lrp => {
            lrp.validate()?;
            relevance_pass(model, cache, label, direction, lrp)
        }
    }
}

/// Stored `r_h(c)` for one head.
pub fn head_relevance<T: Scalar>(map: &AttributionMap<T>, layer: usize, head: usize) -> Result<T> {
    if layer >= map.n_layers() || head >= map.n_heads() {
        return Err(Error::IndexOutOfRange(format!(
            "head ({layer}, {head}) outside {}x{}",
            map.n_layers(),
            map.n_heads()
        )));
    }
    Ok(map.head_relevance.at(layer, head))
}

/// `S(c, R)`: summed relevance over the components selected by `roi`.
/// Overlapping spans count each position once.
pub fn roi_score<T: Scalar>(map: &AttributionMap<T>, roi: &RoiSpec) -> Result<T> {
    match roi {
        RoiSpec::AllInputs => Ok(map.total_input()),
        RoiSpec::Segment(kind) => Err(Error::InvalidRoi(format!(
            "segment {kind:?} must be resolved against a prompt first"
        ))),
        RoiSpec::InputSpan(ranges) => {
            let mut positions = BTreeSet::new();
            for r in ranges {
                if r.start >= r.end || r.end > map.seq_len() {
                    return Err(Error::InvalidRoi(format!(
                        "span {}..{} outside sequence of {}",
                        r.start,
                        r.end,
                        map.seq_len()
                    )));
                }
                positions.extend(r.clone());
            }
            Ok(positions.into_iter().map(|i| map.input_relevance[i]).sum())
        }
        RoiSpec::HeadSet(heads) => {
            let set: BTreeSet<_> = heads.iter().copied().collect();
            let mut total = T::zero();
            for (l, h) in set {
                total += head_relevance(map, l, h).map_err(|e| Error::InvalidRoi(e.to_string()))?;
            }
            Ok(total)
        }
    }
}

fn row_dot_sums<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Vec<T> {
    (0..a.rows).map(|r| dot(a.row(r), b.row(r))).collect()
}

fn input_x_gradient<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    label: TokenId,
    direction: &[T],
) -> Result<AttributionMap<T>> {
    let cfg = &model.config;
    let s = cache.seq_len();
    let g = readout_gradients(model, cache, direction)?;
    let logit = dot(cache.final_hidden.row(s - 1), direction);
    let input_relevance = row_dot_sums(&cache.embeddings, &g.embeddings);
    let mut residual_relevance = Mat::zeros(cfg.n_layers + 1, s);
    for l in 0..=cfg.n_layers {
        let rel = row_dot_sums(cache.residual(l), &g.residual[l]);
        residual_relevance.row_mut(l).copy_from_slice(&rel);
    }
    let mut z_relevance = Vec::with_capacity(cfg.n_layers);
    let mut layer_flow = Vec::with_capacity(cfg.n_layers);
    for (l, rec) in cache.layers.iter().enumerate() {
        let mut zr = rec.z.clone();
        for (v, &gz) in zr.data.iter_mut().zip(&g.z[l].data) {
            *v *= gz;
        }
        // ∂/∂attn_out is the gradient at the residual right after it
        let attn_output: T = rec
            .attn_out
            .data
            .iter()
            .zip(&g.mid[l].data)
            .map(|(&a, &b)| a * b)
            .sum();
        let head_total: T = zr.data.iter().copied().sum();
        layer_flow.push(LayerFlow {
            attn_output,
            out_proj_absorbed: attn_output - head_total,
        });
        z_relevance.push(zr);
    }
    let total: T = input_relevance.iter().copied().sum();
    let mut map = AttributionMap {
        target: label,
        method: AttributionMethod::Ixg,
        target_logit: logit,
        input_relevance,
        head_relevance: Mat::zeros(cfg.n_layers, cfg.n_heads),
        z_relevance,
        residual_relevance,
        absorbed: logit - total,
        layer_flow,
        d_head: cfg.d_head,
    };
    map.recompute_head_relevance();
    Ok(map)
}

struct Lrp<T> {
    eps: T,
    absorbed: T,
}

impl<T: Scalar> Lrp<T> {
    #[inline]
    fn stab(&self, y: T) -> T {
        y + self.eps * y.sign_pos()
    }

    /// Epsilon rule through `y = x·W + b`.
    fn linear(&mut self, x: &Mat<T>, lin: &Linear<T>, y: &Mat<T>, r_y: &Mat<T>) -> Mat<T> {
        let mut r_x = Mat::zeros(x.rows, x.cols);
        let mut s = vec![T::zero(); y.cols];
        for r in 0..y.rows {
            let ry = r_y.row(r);
            if ry.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (j, sj) in s.iter_mut().enumerate() {
                let yj = y.at(r, j);
                *sj = ry[j] / self.stab(yj);
                self.absorbed += *sj * (lin.b[j] + self.eps * yj.sign_pos());
            }
            let xr = x.row(r);
            for (i, o) in r_x.row_mut(r).iter_mut().enumerate() {
                *o = xr[i] * dot(lin.w.row(i), &s);
            }
        }
        r_x
    }

    /// Epsilon rule through layernorm with the standard deviation frozen.
    fn norm(&mut self, rec: &NormRecord<T>, ln: &LayerNorm<T>, r_y: &Mat<T>) -> Mat<T> {
        let d = r_y.cols;
        let n = T::lit(d as f64);
        let mut r_x = Mat::zeros(r_y.rows, d);
        let mut gs = vec![T::zero(); d];
        for r in 0..r_y.rows {
            let ry = r_y.row(r);
            if ry.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for k in 0..d {
                let yk = rec.output.at(r, k);
                let sk = ry[k] / self.stab(yk);
                self.absorbed += sk * (ln.beta[k] + self.eps * yk.sign_pos());
                gs[k] = ln.gamma[k] * sk;
            }
            let mean_gs = gs.iter().copied().sum::<T>() / n;
            let inv = T::one() / rec.std[r];
            let xr = rec.input.row(r);
            for (i, o) in r_x.row_mut(r).iter_mut().enumerate() {
                *o = xr[i] * inv * (gs[i] - mean_gs);
            }
        }
        r_x
    }

    /// Splits relevance at `a + b` by `|a| : |b|`.
    fn residual(&mut self, a: &Mat<T>, b: &Mat<T>, r: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let mut ra = Mat::zeros(r.rows, r.cols);
        let mut rb = Mat::zeros(r.rows, r.cols);
        for idx in 0..r.data.len() {
            let rv = r.data[idx];
            if rv == T::zero() {
                continue;
            }
            let (av, bv) = (a.data[idx].abs(), b.data[idx].abs());
            let denom = av + bv + self.eps;
            ra.data[idx] = rv * av / denom;
            rb.data[idx] = rv * bv / denom;
            self.absorbed += rv * self.eps / denom;
        }
        (ra, rb)
    }
}

fn relevance_pass<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    label: TokenId,
    direction: &[T],
    cfg_lrp: &LrpConfig,
) -> Result<AttributionMap<T>> {
    let cfg = &model.config;
    let s = cache.seq_len();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let mut lrp = Lrp {
        eps: T::lit(cfg_lrp.epsilon),
        absorbed: T::zero(),
    };
    let split = cfg_lrp.attention_rule == AttentionRule::BilinearSplit;

    let hf = cache.final_hidden.row(s - 1);
    let logit = dot(hf, direction);
    let denom = lrp.stab(logit);
    let mut r = Mat::zeros(s, d);
    for (k, o) in r.row_mut(s - 1).iter_mut().enumerate() {
        *o = hf[k] * direction[k] * logit / denom;
    }
    lrp.absorbed += logit * lrp.eps * logit.sign_pos() / denom;

    if let (Some(ln), Some(rec)) = (&model.final_norm, &cache.final_norm) {
        r = lrp.norm(rec, ln, &r);
    }
    let mut residual_relevance = Mat::zeros(cfg.n_layers + 1, s);
    residual_relevance
        .row_mut(cfg.n_layers)
        .copy_from_slice(&r.row_sums());

    let mut z_relevance = vec![Mat::zeros(0, 0); cfg.n_layers];
    let mut layer_flow = vec![
        LayerFlow {
            attn_output: T::zero(),
            out_proj_absorbed: T::zero()
        };
        cfg.n_layers
    ];
    for l in (0..cfg.n_layers).rev() {
        let block = &model.blocks[l];
        let rec = &cache.layers[l];

        let (mut r_mid, r_mlp) = lrp.residual(&rec.mid, &rec.mlp_out, &r);
        let r_act = lrp.linear(&rec.ff_act, &block.ff2, &rec.mlp_out, &r_mlp);
        let r_ln2 = lrp.linear(&rec.ln2.output, &block.ff1, &rec.ff_pre, &r_act);
        r_mid.add_assign(&lrp.norm(&rec.ln2, &block.ln2, &r_ln2));

        let (mut r_in, r_attn) = lrp.residual(&rec.input, &rec.attn_out, &r_mid);
        let before = lrp.absorbed;
        let r_z = lrp.linear(&rec.z, &block.o, &rec.attn_out, &r_attn);
        layer_flow[l] = LayerFlow {
            attn_output: r_attn.data.iter().copied().sum(),
            out_proj_absorbed: lrp.absorbed - before,
        };

        let half = if split { T::lit(0.5) } else { T::one() };
        let mut r_v = Mat::zeros(s, d);
        let mut r_q = Mat::zeros(s, d);
        let mut r_k = Mat::zeros(s, d);
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &rec.attn[h];
            let mut r_a = vec![T::zero(); s];
            for i in 0..s {
                let zi = &rec.z.row(i)[cols.clone()];
                let rzi = &r_z.row(i)[cols.clone()];
                if rzi.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let sz: Vec<T> = zi
                    .iter()
                    .zip(rzi)
                    .map(|(&z, &rv)| half * rv / lrp.stab(z))
                    .collect();
                for (&z, &rv) in zi.iter().zip(rzi) {
                    lrp.absorbed += rv * lrp.eps * z.sign_pos() / lrp.stab(z);
                }
                for j in 0..=i {
                    let aij = a.at(i, j);
                    let vj = &rec.v.row(j)[cols.clone()];
                    for ((o, &vv), &sv) in r_v.row_mut(j)[cols.clone()].iter_mut().zip(vj).zip(&sz) {
                        *o += aij * vv * sv;
                    }
                    if split {
                        r_a[j] = aij * dot(vj, &sz);
                    }
                }
                if split {
                    bilinear_softmax(&mut lrp, rec, h, dh, i, &r_a[..=i], &mut r_q, &mut r_k);
                }
            }
        }
        let mut r_ln1 = lrp.linear(&rec.ln1.output, &block.v, &rec.v, &r_v);
        if split {
            r_ln1.add_assign(&lrp.linear(&rec.ln1.output, &block.q, &rec.q, &r_q));
            r_ln1.add_assign(&lrp.linear(&rec.ln1.output, &block.k, &rec.k, &r_k));
        }
        r_in.add_assign(&lrp.norm(&rec.ln1, &block.ln1, &r_ln1));
        residual_relevance.row_mut(l).copy_from_slice(&r_in.row_sums());
        z_relevance[l] = r_z;
        r = r_in;
    }
    let input_relevance = r.row_sums();
    let mut map = AttributionMap {
        target: label,
        method: AttributionMethod::Lrp,
        target_logit: logit,
        input_relevance,
        head_relevance: Mat::zeros(cfg.n_layers, cfg.n_heads),
        z_relevance,
        residual_relevance,
        absorbed: lrp.absorbed,
        layer_flow,
        d_head: dh,
    };
    map.recompute_head_relevance();
    Ok(map)
}

/// Pushes attention-weight relevance of query row `i` through the softmax
/// (gradient×input) and on to queries and keys (epsilon rule, product split
/// evenly between the two factors).
#[allow(clippy::too_many_arguments)]
fn bilinear_softmax<T: Scalar>(
    lrp: &mut Lrp<T>,
    rec: &crate::forward::LayerRecord<T>,
    h: usize,
    dh: usize,
    i: usize,
    r_a: &[T],
    r_q: &mut Mat<T>,
    r_k: &mut Mat<T>,
) {
    let cols = h * dh..(h + 1) * dh;
    let a = &rec.attn[h];
    let scores = &rec.scores[h];
    let total: T = r_a.iter().copied().sum();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let qi = &rec.q.row(i)[cols.clone()];
    for (j, &raj) in r_a.iter().enumerate() {
        let sij = scores.at(i, j);
        let r_s = sij * (raj - a.at(i, j) * total);
        if r_s == T::zero() {
            continue;
        }
        let t = r_s / lrp.stab(sij);
        lrp.absorbed += t * lrp.eps * sij.sign_pos();
        let kj = &rec.k.row(j)[cols.clone()];
        for (c, (&qv, &kv)) in qi.iter().zip(kj).enumerate() {
            let share = T::lit(0.5) * scale * qv * kv * t;
            *r_q.at_mut(i, cols.start + c) += share;
            *r_k.at_mut(j, cols.start + c) += share;
        }
    }
}

/// Per-layer residual relevance for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub tokens: Vec<String>,
    pub layers: Vec<Vec<f64>>,
}

impl Heatmap {
    /// Rows are normalized by their maximum absolute value unless `raw`; an
    /// all-zero row stays zero.
    pub fn from_map<T: Scalar>(map: &AttributionMap<T>, tokens: &[TokenId], raw: bool) -> Self {
        let tok = Tokenizer;
        let layers = (0..map.residual_relevance.rows)
            .map(|l| {
                let row: Vec<f64> = map
                    .residual_relevance
                    .row(l)
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                if raw {
                    return row;
                }
                let max = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if max > 0.0 {
                    row.into_iter().map(|x| x / max).collect()
                } else {
                    row
                }
            })
            .collect();
        Self {
            tokens: tokens.iter().map(|&t| tok.display(t)).collect(),
            layers,
        }
    }
}
