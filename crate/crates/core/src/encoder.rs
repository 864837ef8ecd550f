//! Feature encoder: a small strided conv backbone with global pooling, an MLP
//! projection head, and the variant-specific companions (momentum copy for the
//! contrastive variant, predictor head for the non-contrastive one).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::{BatchNorm, BnMode, Conv, Fwd, Linear, ParamSet, Weights};
use crate::tensor::{lit, Real, Tensor};

/// Which self-supervised framework the encoder is trained under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// InfoNCE with a momentum encoder and a negative queue.
    Contrastive,
    /// Cosine loss with a predictor head and stop-gradient.
    NonContrastive,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Contrastive => "contrastive",
            Variant::NonContrastive => "noncontrastive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Variant::Contrastive),
            "noncontrastive" => Ok(Variant::NonContrastive),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected contrastive|noncontrastive)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    /// Linear -> BN -> ReLU -> Linear bottleneck.
    Mlp,
    /// `h(z) = z`; only useful as a test fixture.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of the four stride-2 conv blocks.
    pub widths: Vec<usize>,
    /// Embedding dimension `n`.
    pub embed_dim: usize,
    pub predictor: PredictorKind,
    pub predictor_hidden: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            embed_dim: 128,
            predictor: PredictorKind::Mlp,
            predictor_hidden: 32,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Width of the pooled backbone features.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one conv block")
    }
}

/// Which of the four augmented views an embedding batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewOrigin {
    Global1,
    Global2,
    Local1,
    Local2,
}

/// Handle to encoder outputs living in a [`Graph`].
///
/// Whether gradients flow back through it is a property of the graph node, so
/// momentum outputs and detached copies report `grad_enabled == false`.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub var: Var,
    pub origin: ViewOrigin,
    pub source_ids: Vec<u64>,
}

impl EmbeddingBatch {
    pub fn grad_enabled<T: Real>(&self, g: &Graph<T>) -> bool {
        g.requires_grad(self.var)
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    /// Stop-gradient copy.
    pub fn detached<T: Real>(&self, g: &mut Graph<T>) -> Self {
        Self {
            var: g.detach(self.var),
            origin: self.origin,
            source_ids: self.source_ids.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    blocks: Vec<(Conv, BatchNorm)>,
    proj_in: Linear,
    proj_bn: BatchNorm,
    proj_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct PredictorLayout {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

/// Parameters of both encoder branches plus the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub config: EncoderConfig,
    pub variant: Variant,
    /// Backbone and projection head.
    pub online: Weights<T>,
    /// Mirror of `online`, present only for the contrastive variant.
    pub momentum: Option<Weights<T>>,
    /// Predictor head, present only for the non-contrastive variant.
    pub predictor: Option<Weights<T>>,
    layout: Layout,
    pred_layout: Option<PredictorLayout>,
}

/// Which parameter copy a forward pass reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Online,
    Momentum,
}

/// Parameters of one branch inserted into a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub branch: Branch,
    pub vars: Vec<Var>,
}

const CONV: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    pad: 1,
};

fn build_online<T: Real>(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> (Weights<T>, Layout) {
    let mut w = Weights::new();
    let mut blocks = Vec::with_capacity(cfg.widths.len());
    let mut cin = 3;
    for (i, &c) in cfg.widths.iter().enumerate() {
        let conv = Conv::new(&mut w, &format!("backbone.conv{i}"), cin, c, CONV, rng);
        let bn = BatchNorm::new(&mut w, &format!("backbone.bn{i}"), c);
        blocks.push((conv, bn));
        cin = c;
    }
    let d = cfg.feature_dim();
    let proj_in = Linear::new(&mut w, "projection.fc1", d, d, rng);
    let proj_bn = BatchNorm::new(&mut w, "projection.bn1", d);
    let proj_out = Linear::new(&mut w, "projection.fc2", d, cfg.embed_dim, rng);
    (
        w,
        Layout {
            blocks,
            proj_in,
            proj_bn,
            proj_out,
        },
    )
}

impl<T: Real> EncoderState<T> {
    pub fn new(config: EncoderConfig, variant: Variant) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.embed_dim == 0 {
            return Err(Error::Config("encoder widths and embed_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (online, layout) = build_online::<T>(&config, &mut rng);
        let (momentum, predictor, pred_layout) = match variant {
            Variant::Contrastive => (Some(online.clone()), None, None),
            Variant::NonContrastive => {
                let mut w = Weights::new();
                let layout = match config.predictor {
                    PredictorKind::Mlp => {
                        let n = config.embed_dim;
                        let hdim = config.predictor_hidden;
                        Some(PredictorLayout {
                            fc1: Linear::new(&mut w, "predictor.fc1", n, hdim, &mut rng),
                            bn: BatchNorm::new(&mut w, "predictor.bn1", hdim),
                            fc2: Linear::new(&mut w, "predictor.fc2", hdim, n, &mut rng),
                        })
                    }
                    PredictorKind::Identity => None,
                };
                (None, Some(w), layout)
            }
        };
        Ok(Self {
            config,
            variant,
            online,
            momentum,
            predictor,
            layout,
            pred_layout,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Inserts one branch's parameters into `g`. Online parameters are
    /// trainable when `trainable`; momentum parameters never are.
    pub fn bind(&self, g: &mut Graph<T>, branch: Branch, trainable: bool) -> Result<Bound> {
        let vars = match branch {
            Branch::Online => self.online.params.bind(g, trainable),
            Branch::Momentum => self
                .momentum
                .as_ref()
                .ok_or_else(|| contract("momentum branch exists only for the contrastive variant"))?
                .params
                .bind(g, false),
        };
        Ok(Bound { branch, vars })
    }

    pub fn bind_predictor(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        Ok(self
            .predictor
            .as_ref()
            .ok_or_else(|| contract("predictor exists only for the non-contrastive variant"))?
            .params
            .bind(g, trainable))
    }

    /// Backbone features and projected embedding for an NHWC image batch.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: Var,
        mode: BnMode,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(contract(format!("encoder expects [B,H,W,3] images, got {shape:?}")));
        }
        let buffers = match bound.branch {
            Branch::Online => &mut self.online.buffers,
            Branch::Momentum => {
                &mut self
                    .momentum
                    .as_mut()
                    .ok_or_else(|| contract("no momentum branch"))?
                    .buffers
            }
        };
        if shape[0] == 0 {
            let feat = g.constant(Tensor::zeros([0, self.config.feature_dim()]));
            let z = g.constant(Tensor::zeros([0, self.config.embed_dim]));
            return Ok((feat, z));
        }
        let mut f = Fwd {
            g,
            p: &bound.vars,
            buffers,
            mode,
        };
        let mut x = images;
        for (conv, bn) in &self.layout.blocks {
            x = conv.forward(&mut f, x);
            x = bn.forward(&mut f, x);
            x = f.g.relu(x);
        }
        let feat = f.g.global_avg_pool(x);
        let h = self.layout.proj_in.forward(&mut f, feat);
        let h = self.layout.proj_bn.forward(&mut f, h);
        let h = f.g.relu(h);
        let z = self.layout.proj_out.forward(&mut f, h);
        if !f.g.value(z).is_finite() {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        Ok((feat, z))
    }

    /// Encodes an image batch `[B,H,W,3]` into an embedding batch.
    ///
    /// `use_momentum` routes through the momentum copy, whose outputs never
    /// carry gradient.
    pub fn encode(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: &Tensor<T>,
        origin: ViewOrigin,
        source_ids: &[u64],
        mode: BnMode,
    ) -> Result<EmbeddingBatch> {
        if images.rows() != source_ids.len() {
            return Err(contract("one source id per image required"));
        }
        let x = g.constant(images.clone());
        let (_, z) = self.forward(g, bound, x, mode)?;
        Ok(EmbeddingBatch {
            var: z,
            origin,
            source_ids: source_ids.to_vec(),
        })
    }

    /// Evaluation-mode embeddings and backbone features of an image batch,
    /// returned as plain tensors.
    pub fn embed_eval(&mut self, images: &Tensor<T>, use_momentum: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let branch = if use_momentum {
            Branch::Momentum
        } else {
            Branch::Online
        };
        let bound = self.bind(&mut g, branch, false)?;
        let x = g.constant(images.clone());
        let (feat, z) = self.forward(&mut g, &bound, x, BnMode::Eval)?;
        Ok((g.value(feat).clone(), g.value(z).clone()))
    }

    /// Backbone features (pre-projection) in evaluation mode, in chunks.
    pub fn features(&mut self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = images.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.embed_eval(&images.select_rows(&idx), false)?.0);
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.feature_dim()]));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::cat_rows(&refs))
    }

    /// `theta_k <- m * theta_k + (1 - m) * theta_q` over every momentum parameter.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(contract(format!("momentum coefficient {m} outside [0,1]")));
        }
        let target = self
            .momentum
            .as_mut()
            .ok_or_else(|| contract("momentum_update requires the contrastive variant"))?;
        let (keep, mix) = (lit::<T>(m), lit::<T>(1.0 - m));
        for (k, q) in target
            .params
            .tensors_mut()
            .iter_mut()
            .zip(self.online.params.tensors())
        {
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = keep * *kv + mix * qv;
            }
        }
        Ok(())
    }

    /// Applies the predictor head `h`.
    pub fn predict(
        &mut self,
        g: &mut Graph<T>,
        pred_vars: &[Var],
        z: &EmbeddingBatch,
        mode: BnMode,
    ) -> Result<EmbeddingBatch> {
        let weights = self
            .predictor
            .as_mut()
            .ok_or_else(|| contract("predict requires the non-contrastive variant"))?;
        let var = match &self.pred_layout {
            None => z.var,
            Some(_) if z.is_empty() => z.var,
            Some(layout) => {
                let mut f = Fwd {
                    g,
                    p: pred_vars,
                    buffers: &mut weights.buffers,
                    mode,
                };
                let h = layout.fc1.forward(&mut f, z.var);
                let h = layout.bn.forward(&mut f, h);
                let h = f.g.relu(h);
                layout.fc2.forward(&mut f, h)
            }
        };
        Ok(EmbeddingBatch {
            var,
            origin: z.origin,
            source_ids: z.source_ids.clone(),
        })
    }

    /// Every parameter (not buffer) set the encoder step may touch.
    pub fn trainable_digest(&self) -> String {
        let mut s = self.online.params.digest();
        if let Some(p) = &self.predictor {
            s.push_str(&p.params.digest());
        }
        s
    }

    pub fn cast<U: Real>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            variant: self.variant,
            online: self.online.cast(),
            momentum: self.momentum.as_ref().map(Weights::cast),
            predictor: self.predictor.as_ref().map(Weights::cast),
            layout: self.layout.clone(),
            pred_layout: self.pred_layout.clone(),
        }
    }

    /// Named parameter groups, in the order used by checkpoints.
    pub fn groups(&self) -> Vec<(&'static str, &ParamSet<T>)> {
        let mut out = vec![
            ("encoder.params", &self.online.params),
            ("encoder.buffers", &self.online.buffers),
        ];
        if let Some(m) = &self.momentum {
            out.push(("momentum.params", &m.params));
            out.push(("momentum.buffers", &m.buffers));
        }
        if let Some(p) = &self.predictor {
            out.push(("predictor.params", &p.params));
            out.push(("predictor.buffers", &p.buffers));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut ParamSet<T>)> {
        let mut out = vec![
            ("encoder.params", &mut self.online.params),
            ("encoder.buffers", &mut self.online.buffers),
        ];
        if let Some(m) = &mut self.momentum {
            out.push(("momentum.params", &mut m.params));
            out.push(("momentum.buffers", &mut m.buffers));
        }
        if let Some(p) = &mut self.predictor {
            out.push(("predictor.params", &mut p.params));
            out.push(("predictor.buffers", &mut p.buffers));
        }
        out
    }
}

/// FIFO of unit-norm negatives for InfoNCE.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue<T> {
    buffer: Tensor<T>,
    head: usize,
}

impl<T: Real> NegativeQueue<T> {
    /// Queue of `size` random unit vectors.
    pub fn new(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("queue size and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(size * dim);
        for _ in 0..size {
            let row: Vec<f64> = (0..dim).map(|_| crate::nn::standard_normal(&mut rng)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| lit::<T>(v / n)));
        }
        Ok(Self {
            buffer: Tensor::new([size, dim], data),
            head: 0,
        })
    }

    pub fn from_parts(buffer: Tensor<T>, head: usize) -> Result<Self> {
        if buffer.shape().len() != 2 || head >= buffer.rows().max(1) {
            return Err(contract("queue buffer must be [K,n] with head < K"));
        }
        Ok(Self { buffer, head })
    }

    pub fn size(&self) -> usize {
        self.buffer.rows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.row_len()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn buffer(&self) -> &Tensor<T> {
        &self.buffer
    }

    /// Overwrites the oldest `B` rows with `rows`, which must be unit norm.
    pub fn enqueue(&mut self, rows: &Tensor<T>) -> Result<()> {
        let (b, k) = (rows.rows(), self.size());
        if b > k {
            return Err(contract(format!("cannot enqueue {b} rows into a queue of {k}")));
        }
        if b > 0 && rows.row_len() != self.dim() {
            return Err(contract("enqueued rows have the wrong dimension"));
        }
        for i in 0..b {
            let n = rows.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-3 {
                return Err(contract(format!("queue rows must be unit norm (row {i} has {n})")));
            }
        }
        let d = self.dim();
        for i in 0..b {
            let slot = (self.head + i) % k;
            self.buffer.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(rows.row(i));
        }
        self.head = (self.head + b) % k;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(variant: Variant) -> EncoderState<f64> {
        EncoderState::new(
            EncoderConfig {
                widths: vec![4, 6, 8, 8],
                embed_dim: 5,
                predictor: PredictorKind::Mlp,
                predictor_hidden: 3,
                init_seed: 7,
            },
            variant,
        )
        .unwrap()
    }

    fn images(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, s, s, 3], (0..n * s * s * 3).map(|_| rng.gen()).collect())
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut enc = tiny(Variant::Contrastive);
        let x = images(3, 16, 4);
        let weights = images(1, 1, 5);
        let w: Vec<f64> = (0..15).map(|i| weights.data()[i % 3] - 0.5 + i as f64 * 0.1).collect();
        let objective = |enc: &mut EncoderState<f64>, grad: bool| {
            let mut g = Graph::new();
            let b = enc.bind(&mut g, Branch::Online, grad).unwrap();
            let xv = g.constant(x.clone());
            let (_, z) = enc.forward(&mut g, &b, xv, BnMode::TrainFrozen).unwrap();
            let wv = g.constant(Tensor::new([3, 5], w.clone()));
            let prod = g.mul(z, wv);
            let loss = g.sum(prod);
            let value = g.value(loss).data()[0];
            let grads = grad.then(|| {
                let gr = g.backward(loss);
                b.vars.iter().zip(0..).map(|(&v, i)| gr.get_or_zeros(v, enc.online.params.get(i).shape())).collect::<Vec<_>>()
            });
            (value, grads)
        };
        let (_, grads) = objective(&mut enc, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for i in 0..enc.online.params.len() {
            let n = enc.online.params.get(i).len();
            for e in [0, n / 2, n - 1] {
                let orig = enc.online.params.get(i).data()[e];
                enc.online.params.get_mut(i).data_mut()[e] = orig + h;
                let plus = objective(&mut enc, false).0;
                enc.online.params.get_mut(i).data_mut()[e] = orig - h;
                let minus = objective(&mut enc, false).0;
                enc.online.params.get_mut(i).data_mut()[e] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grads[i].data()[e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-4, "{} elem {e}: fd {fd} analytic {an}", enc.online.params.name(i));
            }
        }
    }

    #[test]
    fn empty_batch_gives_empty_embeddings() {
        let mut enc = tiny(Variant::Contrastive);
        let mut g = Graph::new();
        let b = enc.bind(&mut g, Branch::Online, true).unwrap();
        let z = enc
            .encode(&mut g, &b, &Tensor::zeros([0, 16, 16, 3]), ViewOrigin::Global1, &[], BnMode::Train)
            .unwrap();
        assert_eq!(g.shape(z.var), &[0, 5]);
    }

    #[test]
    fn duplicated_inputs_give_identical_rows_in_eval() {
        let mut enc = tiny(Variant::NonContrastive);
        let one = images(1, 16, 1);
        let two = Tensor::cat_rows(&[&one, &one]);
        let (_, z) = enc.embed_eval(&two, false).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn global_and_local_sizes_share_output_shape() {
        let mut enc = tiny(Variant::Contrastive);
        let (_, zg) = enc.embed_eval(&images(1, 64, 2), false).unwrap();
        let (_, zl) = enc.embed_eval(&images(1, 32, 3), false).unwrap();
        assert_eq!(zg.shape(), &[1, 5]);
        assert_eq!(zl.shape(), &[1, 5]);
    }

    #[test]
    fn momentum_outputs_carry_no_gradient() {
        let mut enc = tiny(Variant::Contrastive);
        let mut g = Graph::new();
        let b = enc.bind(&mut g, Branch::Momentum, true).unwrap();
        let z = enc
            .encode(&mut g, &b, &images(2, 16, 4), ViewOrigin::Global1, &[0, 1], BnMode::Train)
            .unwrap();
        assert!(!z.grad_enabled(&g));
    }

    #[test]
    fn momentum_update_endpoints_and_scalar_case() {
        let mut enc = tiny(Variant::Contrastive);
        for t in enc.online.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        for t in enc.momentum.as_mut().unwrap().params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        enc.momentum_update(1.0).unwrap();
        assert!(enc.momentum.as_ref().unwrap().params.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        enc.momentum_update(0.9).unwrap();
        for t in enc.momentum.as_ref().unwrap().params.tensors() {
            for &v in t.data() {
                assert!((v - 0.1).abs() < 1e-15);
            }
        }
        enc.momentum_update(0.0).unwrap();
        assert_eq!(enc.momentum.as_ref().unwrap().params, enc.online.params);
    }

    #[test]
    fn variant_contracts() {
        let mut nc = tiny(Variant::NonContrastive);
        assert!(matches!(nc.momentum_update(0.5), Err(Error::Contract(_))));
        let mut g = Graph::new();
        assert!(nc.bind(&mut g, Branch::Momentum, false).is_err());
        let mut c = tiny(Variant::Contrastive);
        let z = EmbeddingBatch {
            var: g.constant(Tensor::zeros([1, 5])),
            origin: ViewOrigin::Global1,
            source_ids: vec![0],
        };
        assert!(matches!(c.predict(&mut g, &[], &z, BnMode::Train), Err(Error::Contract(_))));
        assert!(c.momentum.is_some() && c.predictor.is_none());
        assert!(nc.momentum.is_none() && nc.predictor.is_some());
        assert!(c.momentum.as_ref().unwrap().params.same_layout(&c.online.params));
    }

    #[test]
    fn identity_predictor_is_identity() {
        let mut enc: EncoderState<f64> = EncoderState::new(
            EncoderConfig {
                widths: vec![4],
                embed_dim: 3,
                predictor: PredictorKind::Identity,
                predictor_hidden: 2,
                init_seed: 0,
            },
            Variant::NonContrastive,
        )
        .unwrap();
        let mut g = Graph::new();
        let pv = enc.bind_predictor(&mut g, true).unwrap();
        let zt = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let z = EmbeddingBatch {
            var: g.param(zt.clone()),
            origin: ViewOrigin::Local1,
            source_ids: vec![0, 1],
        };
        let p = enc.predict(&mut g, &pv, &z, BnMode::Train).unwrap();
        assert_eq!(g.value(p.var), &zt);
        let empty = EmbeddingBatch {
            var: g.constant(Tensor::zeros([0, 3])),
            origin: ViewOrigin::Local1,
            source_ids: vec![],
        };
        let out = enc.predict(&mut g, &pv, &empty, BnMode::Train).unwrap();
        assert_eq!(g.shape(out.var), &[0, 3]);
    }

    #[test]
    fn predictor_jvp_matches_finite_differences() {
        let mut enc = tiny(Variant::NonContrastive);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zt = Tensor::new([4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let dir = Tensor::new([4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cot = Tensor::new([4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // <cot, J dir> via reverse mode equals <J^T cot, dir>.
        let eval = |enc: &mut EncoderState<f64>, z: &Tensor<f64>| {
            let mut g = Graph::new();
            let pv = enc.bind_predictor(&mut g, false).unwrap();
            let zb = EmbeddingBatch {
                var: g.param(z.clone()),
                origin: ViewOrigin::Local1,
                source_ids: vec![0, 1, 2, 3],
            };
            let p = enc.predict(&mut g, &pv, &zb, BnMode::TrainFrozen).unwrap();
            let out = g.value(p.var).clone();
            let grads = g.backward_with(p.var, cot.clone());
            (out, grads.get(zb.var).unwrap().clone())
        };
        let (_, vjp) = eval(&mut enc, &zt);
        let analytic: f64 = vjp.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let h = 1e-6;
        let shift = |s: f64| {
            Tensor::new([4, 5], zt.data().iter().zip(dir.data()).map(|(a, b)| a + s * b).collect())
        };
        let (yp, _) = eval(&mut enc, &shift(h));
        let (ym, _) = eval(&mut enc, &shift(-h));
        let fd: f64 = yp
            .data()
            .iter()
            .zip(ym.data())
            .zip(cot.data())
            .map(|((p, m), c)| c * (p - m) / (2.0 * h))
            .sum();
        assert!((fd - analytic).abs() / fd.abs().max(1e-8) < 1e-4, "fd {fd} vs {analytic}");
    }

    #[test]
    fn queue_fifo_and_bounds() {
        let mut q = NegativeQueue::<f64>::new(4, 2, 0).unwrap();
        let unit = |a: f64| vec![a.cos(), a.sin()];
        let first = Tensor::from_rows(&[unit(0.1), unit(0.2)]);
        let second = Tensor::from_rows(&[unit(0.3), unit(0.4)]);
        q.enqueue(&first).unwrap();
        q.enqueue(&second).unwrap();
        assert_eq!(&q.buffer().data()[4..], second.data());
        assert_eq!(&q.buffer().data()[..4], first.data());
        let full = Tensor::from_rows(&[unit(1.0), unit(2.0), unit(3.0), unit(4.0)]);
        q.enqueue(&full).unwrap();
        assert_eq!(q.buffer(), &full);
        let too_many = Tensor::from_rows(&vec![unit(0.0); 5]);
        assert!(q.enqueue(&too_many).is_err());
        assert!(q.enqueue(&Tensor::from_rows(&[vec![2.0, 0.0]])).is_err());
    }

    #[test]
    fn queue_rows_stay_unit_norm() {
        let mut q = NegativeQueue::<f32>::new(64, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = rng.gen_range(1..=64);
            let mut rows = Vec::new();
            for _ in 0..b {
                let r: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
                rows.push(r.iter().map(|v| v / n).collect());
            }
            q.enqueue(&Tensor::from_rows(&rows)).unwrap();
        }
        for i in 0..64 {
            let n = q.buffer().row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
