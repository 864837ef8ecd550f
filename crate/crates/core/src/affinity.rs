//! Learned affinity between local-crop embeddings.
//!
//! The regressor `f(z1, z2)` maps a pair of embeddings to a non-negative
//! score. It is trained by ascending `E_joint f - E_product f` and then
//! frozen while the encoder minimizes `E_joint f` over its local crops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{collect_grads, global_norm, BatchNorm, BnMode, Fwd, Linear, Sgd, Weights};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub init_seed: u64,
    /// Zero the output layer so every score starts at `softplus(0)`.
    pub zero_init_output: bool,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap for the ascent step (0 disables). The
    /// objective has no upper bound, so unclipped steps grow the output
    /// scale geometrically.
    pub grad_clip: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden: 512,
            blocks: 5,
            init_seed: 1,
            zero_init_output: false,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

/// Something that scores embedding pairs inside a graph.
pub trait PairScorer<T: Real> {
    /// Inserts the scorer's parameters into `g`.
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var>;

    /// Scores `[B, n]` left/right rows, returning `[B]`.
    fn score(&mut self, g: &mut Graph<T>, vars: &[Var], left: Var, right: Var, mode: BnMode) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    blocks: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

/// MLP regressor weights plus its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorState<T> {
    pub config: RegressorConfig,
    pub weights: Weights<T>,
    pub optimizer: Sgd<T>,
    layout: Layout,
}

impl<T: Real> RegressorState<T> {
    pub fn new(config: RegressorConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden == 0 || config.blocks == 0 {
            return Err(Error::Config("regressor dims and block count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut w = Weights::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut fan_in = 2 * config.embed_dim;
        for i in 0..config.blocks {
            let fc = Linear::new(&mut w, &format!("regressor.fc{i}"), fan_in, config.hidden, &mut rng);
            let bn = BatchNorm::new(&mut w, &format!("regressor.bn{i}"), config.hidden);
            blocks.push((fc, bn));
            fan_in = config.hidden;
        }
        let out = Linear::new(&mut w, "regressor.out", fan_in, 1, &mut rng);
        if config.zero_init_output {
            for i in [out.w, out.b] {
                w.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let optimizer = Sgd::new(&w.params, config.sgd_momentum, config.weight_decay);
        Ok(Self {
            config,
            weights: w,
            optimizer,
            layout: Layout { blocks, out },
        })
    }

    pub fn digest(&self) -> String {
        self.weights.params.digest()
    }

    /// One ascent step on `omega`. Returns the objective value before the update.
    pub fn ascend(&mut self, joint: &PairBatch<T>, product: &PairBatch<T>, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let (j, p) = (joint.insert(&mut g), product.insert(&mut g));
        let omega = omega_objective(&mut g, self, &vars, &j, &p)?;
        let value = g.value(omega).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("regressor objective".into()));
        }
        let neg = g.scale(omega, -T::one());
        let grads = g.backward(neg);
        let mut grads = collect_grads(&grads, &vars, &self.weights.params);
        let norm = global_norm(&grads);
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let k = T::from_f64(self.config.grad_clip / norm);
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = *v * k));
        }
        self.optimizer.step(&mut self.weights.params, &grads, lr);
        Ok(value)
    }
}

impl<T: Real> PairScorer<T> for RegressorState<T> {
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.weights.params.bind(g, trainable)
    }

    fn score(&mut self, g: &mut Graph<T>, vars: &[Var], left: Var, right: Var, mode: BnMode) -> Result<Var> {
        let (sl, sr) = (g.shape(left).to_vec(), g.shape(right).to_vec());
        if sl.len() != 2 || sl != sr || sl[1] != self.config.embed_dim {
            return Err(contract(format!(
                "regressor expects matching [B,{}] inputs, got {sl:?} and {sr:?}",
                self.config.embed_dim
            )));
        }
        if sl[0] == 0 {
            return Ok(g.constant(Tensor::zeros([0])));
        }
        let b = sl[0];
        let mut f = Fwd {
            g,
            p: vars,
            buffers: &mut self.weights.buffers,
            mode,
        };
        let mut x = f.g.concat_cols(left, right);
        for (fc, bn) in &self.layout.blocks {
            x = fc.forward(&mut f, x);
            x = bn.forward(&mut f, x);
            x = f.g.relu(x);
        }
        let y = self.layout.out.forward(&mut f, x);
        let y = f.g.softplus(y);
        Ok(f.g.reshape(y, &[b]))
    }
}

/// Plain dot product `f(a, b) = a.b`, handy as a parameter-free scorer.
#[derive(Clone, Copy, Debug, Default)]
pub struct DotScorer;

impl<T: Real> PairScorer<T> for DotScorer {
    fn bind(&self, _g: &mut Graph<T>, _trainable: bool) -> Vec<Var> {
        Vec::new()
    }

    fn score(&mut self, g: &mut Graph<T>, _vars: &[Var], left: Var, right: Var, _mode: BnMode) -> Result<Var> {
        if g.shape(left) != g.shape(right) {
            return Err(contract("dot scorer inputs differ in shape"));
        }
        Ok(g.row_dot(left, right))
    }
}

/// Scores in evaluation mode (running statistics) for plain tensors.
pub fn affinity_forward<T: Real>(state: &mut RegressorState<T>, z1: &Tensor<T>, z2: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = state.bind(&mut g, false);
    let (a, b) = (g.constant(z1.clone()), g.constant(z2.clone()));
    let s = state.score(&mut g, &vars, a, b, BnMode::Eval)?;
    let out = g.value(s).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("regressor output".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// Two crops of the same image.
    Joint,
    /// Crops of two different images.
    Product,
}

/// Row-aligned embedding pairs detached from the encoder.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub kind: PairKind,
}

impl<T: Real> PairBatch<T> {
    /// Validates that ids agree with the pair kind.
    pub fn new(left: Tensor<T>, right: Tensor<T>, left_ids: &[u64], right_ids: &[u64], kind: PairKind) -> Result<Self> {
        if left.shape() != right.shape() || left.shape().len() != 2 {
            return Err(contract("pair halves must be matching [B,n] tensors"));
        }
        if left_ids.len() != left.rows() || right_ids.len() != right.rows() {
            return Err(contract("one source id per pair row required"));
        }
        let ok = left_ids.iter().zip(right_ids).all(|(a, b)| match kind {
            PairKind::Joint => a == b,
            PairKind::Product => a != b,
        });
        if !ok {
            return Err(contract(format!("source ids do not match a {kind:?} pairing")));
        }
        Ok(Self { left, right, kind })
    }

    pub fn len(&self) -> usize {
        self.left.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, g: &mut Graph<T>) -> InsertedPairs {
        InsertedPairs {
            left: g.constant(self.left.clone()),
            right: g.constant(self.right.clone()),
            kind: self.kind,
        }
    }
}

/// A pair batch already living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct InsertedPairs {
    pub left: Var,
    pub right: Var,
    pub kind: PairKind,
}

/// A partner index for every row such that no row is paired with itself.
pub fn sample_negative_partner(batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(contract("negative partners need a batch of at least 2"));
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// `E_joint f - E_product f`, scored as one batch so both halves share
/// normalization statistics. Inputs must not carry encoder gradient.
pub fn omega_objective<T: Real, S: PairScorer<T>>(
    g: &mut Graph<T>,
    scorer: &mut S,
    vars: &[Var],
    joint: &InsertedPairs,
    product: &InsertedPairs,
) -> Result<Var> {
    if joint.kind != PairKind::Joint || product.kind != PairKind::Product {
        return Err(contract("omega needs one joint and one product batch"));
    }
    for v in [joint.left, joint.right, product.left, product.right] {
        if g.requires_grad(v) {
            return Err(contract("regressor inputs must be detached from the encoder"));
        }
    }
    let nj = g.shape(joint.left)[0];
    let np = g.shape(product.left)[0];
    if nj == 0 || np == 0 {
        return Err(contract("omega needs non-empty joint and product batches"));
    }
    let left = g.concat_rows(&[joint.left, product.left]);
    let right = g.concat_rows(&[joint.right, product.right]);
    let scores = scorer.score(g, vars, left, right, BnMode::Train)?;
    let sj = g.slice_rows(scores, 0, nj);
    let sp = g.slice_rows(scores, nj, nj + np);
    let (mj, mp) = (g.mean(sj), g.mean(sp));
    Ok(g.sub(mj, mp))
}

/// `E_joint f(z_l1, z_l2)` with the scorer frozen: `vars` should be bound as
/// constants. Normalization uses the batch's own statistics and leaves the
/// running estimates alone.
pub fn local_local_loss<T: Real, S: PairScorer<T>>(
    g: &mut Graph<T>,
    scorer: &mut S,
    vars: &[Var],
    z_l1: Var,
    z_l2: Var,
) -> Result<Var> {
    if vars.iter().any(|&v| g.requires_grad(v)) {
        return Err(contract("scorer parameters must be frozen for the encoder step"));
    }
    let s = scorer.score(g, vars, z_l1, z_l2, BnMode::TrainFrozen)?;
    Ok(g.mean(s))
}

/// Mean cosine similarity between row-aligned local embeddings; minimizing
/// it pushes local crops apart.
pub fn local_cosine_loss<T: Real>(g: &mut Graph<T>, z_l1: Var, z_l2: Var) -> Var {
    let eps = lit::<T>(1e-12);
    let a = g.l2_normalize(z_l1, eps);
    let b = g.l2_normalize(z_l2, eps);
    let c = g.row_dot(a, b);
    g.mean(c)
}
