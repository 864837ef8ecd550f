//! Similarity losses and their global-to-global / local-to-global compositions.
//!
//! Every loss is built inside a [`Graph`] so the same code serves training
//! and gradient checks. Queries are the gradient-receiving embeddings (L2
//! normalized for InfoNCE, passed through the predictor for the cosine loss);
//! targets are the stop-gradient branch.

use std::collections::BTreeMap;

use crate::encoder::{EmbeddingBatch, EncoderState};
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::BnMode;
use crate::tensor::{lit, Real, Tensor};

/// Maximum deviation from unit norm accepted by InfoNCE inputs.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    InfoNce,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity: SimilarityKind,
    pub symmetrize: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar loss with its named components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub parts: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        Ok(Self {
            value,
            parts: BTreeMap::new(),
        })
    }

    pub fn with_part(mut self, name: &str, v: f64) -> Self {
        self.parts.insert(name.to_string(), v);
        self
    }
}

/// The similarity loss `l_s` applied to one (query, target) pair of batches.
#[derive(Clone, Copy, Debug)]
pub enum Similarity {
    /// InfoNCE against a `[K, n]` bank of unit-norm negatives.
    InfoNce { temperature: f64, negatives: Var },
    /// Negative cosine; the query is expected to be `h(z)` already.
    Cosine,
}

fn check_unit_rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Mean over the batch of `-log(e^{z.z+/t} / (e^{z.z+/t} + sum_k e^{z.z-_k/t}))`.
pub fn info_nce<T: Real>(g: &mut Graph<T>, z: Var, z_pos: Var, negatives: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(contract("temperature must be positive"));
    }
    let (sz, sp, sn) = (g.shape(z).to_vec(), g.shape(z_pos).to_vec(), g.shape(negatives).to_vec());
    if sz.len() != 2 || sz != sp {
        return Err(contract(format!("query {sz:?} and positive {sp:?} must be matching [B,n]")));
    }
    if sz[0] == 0 {
        return Err(contract("info_nce needs a non-empty batch"));
    }
    if sn.len() != 2 || sn[0] == 0 || sn[1] != sz[1] {
        return Err(contract(format!("negatives must be [K>=1, {}], got {sn:?}", sz[1])));
    }
    check_unit_rows(g.value(z), "query")?;
    check_unit_rows(g.value(z_pos), "positive")?;
    check_unit_rows(g.value(negatives), "negative")?;
    let inv_t = lit::<T>(1.0 / temperature);
    let b = sz[0];
    let pos = g.row_dot(z, z_pos);
    let pos_col = g.reshape(pos, &[b, 1]);
    let neg = g.matmul_t(z, negatives);
    let logits = g.concat_cols(pos_col, neg);
    let logits = g.scale(logits, inv_t);
    let lse = g.logsumexp_rows(logits);
    let pos_scaled = g.scale(pos, inv_t);
    let per_row = g.sub(lse, pos_scaled);
    Ok(g.mean(per_row))
}

/// Mean over the batch of `-<p/|p|, t/|t|>`.
pub fn negative_cosine<T: Real>(g: &mut Graph<T>, query: Var, target: Var) -> Result<Var> {
    let (sq, st) = (g.shape(query).to_vec(), g.shape(target).to_vec());
    if sq.len() != 2 || sq != st {
        return Err(contract(format!("cosine inputs must be matching [B,n], got {sq:?} and {st:?}")));
    }
    if sq[0] == 0 {
        return Err(contract("cosine loss needs a non-empty batch"));
    }
    for (v, what) in [(query, "prediction"), (target, "target")] {
        let t = g.value(v);
        for i in 0..t.rows() {
            if t.row(i).iter().all(|x| *x == T::zero()) {
                return Err(contract(format!("{what} row {i} has zero norm")));
            }
        }
    }
    let eps = lit::<T>(1e-12);
    let qn = g.l2_normalize(query, eps);
    let tn = g.l2_normalize(target, eps);
    let cos = g.row_dot(qn, tn);
    let m = g.mean(cos);
    Ok(g.scale(m, -T::one()))
}

/// Cosine loss with the predictor applied to `z1`; `z2` must be a
/// stop-gradient branch.
pub fn cosine_loss<T: Real>(
    g: &mut Graph<T>,
    state: &mut EncoderState<T>,
    predictor_vars: &[Var],
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    mode: BnMode,
) -> Result<Var> {
    if z2.grad_enabled(g) {
        return Err(contract("cosine target branch must not carry gradient"));
    }
    let p = state.predict(g, predictor_vars, z1, mode)?;
    negative_cosine(g, p.var, z2.var)
}

fn pair_loss<T: Real>(g: &mut Graph<T>, sim: &Similarity, query: Var, target: Var) -> Result<Var> {
    match *sim {
        Similarity::InfoNce {
            temperature,
            negatives,
        } => info_nce(g, query, target, negatives, temperature),
        Similarity::Cosine => negative_cosine(g, query, target),
    }
}

fn check_targets<T: Real>(g: &Graph<T>, targets: [&EmbeddingBatch; 2]) -> Result<()> {
    if targets.iter().any(|t| t.grad_enabled(g)) {
        return Err(contract("global targets must pass through the stop-gradient branch"));
    }
    Ok(())
}

fn check_aligned(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.source_ids != b.source_ids {
        return Err(contract("embedding batches are not row-aligned by source image"));
    }
    Ok(())
}

/// Global-to-global consensus: `l_s(q_1, sg(t_2))`, averaged with the
/// swapped direction when `symmetrize`.
pub fn global_global_loss<T: Real>(
    g: &mut Graph<T>,
    sim: &Similarity,
    symmetrize: bool,
    queries: [&EmbeddingBatch; 2],
    targets: [&EmbeddingBatch; 2],
) -> Result<Var> {
    check_targets(g, targets)?;
    check_aligned(queries[0], targets[1])?;
    check_aligned(queries[1], targets[0])?;
    let forward = pair_loss(g, sim, queries[0].var, targets[1].var)?;
    if !symmetrize {
        return Ok(forward);
    }
    let backward = pair_loss(g, sim, queries[1].var, targets[0].var)?;
    let both = g.add(forward, backward);
    Ok(g.scale(both, lit(0.5)))
}

/// Local-to-global attraction: `sum_i l_s(q_i, sg(t_1)) + l_s(q_i, sg(t_2))`
/// over both local views, each term a batch mean.
pub fn local_global_loss<T: Real>(
    g: &mut Graph<T>,
    sim: &Similarity,
    local_queries: [&EmbeddingBatch; 2],
    targets: [&EmbeddingBatch; 2],
) -> Result<Var> {
    check_targets(g, targets)?;
    let mut total: Option<Var> = None;
    for q in local_queries {
        for t in targets {
            check_aligned(q, t)?;
            let term = pair_loss(g, sim, q.var, t.var)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
    }
    Ok(total.expect("four terms"))
}

/// Value-level InfoNCE on plain tensors.
pub fn info_nce_value<T: Real>(z: &Tensor<T>, z_pos: &Tensor<T>, negatives: &Tensor<T>, temperature: f64) -> Result<LossValue> {
    let mut g = Graph::new();
    let (a, b, n) = (g.constant(z.clone()), g.constant(z_pos.clone()), g.constant(negatives.clone()));
    let l = info_nce(&mut g, a, b, n, temperature)?;
    LossValue::new(g.value(l).data()[0].as_f64())
}
