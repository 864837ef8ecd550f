//! The alternating training loop: one regressor ascent step, then one
//! encoder descent step with the regressor frozen, per minibatch.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{
    local_cosine_loss, local_local_loss, sample_negative_partner, PairBatch, PairKind, PairScorer, RegressorConfig,
    RegressorState,
};
use crate::augment::{make_views, AugmentationConfig, ViewSet};
use crate::data::Dataset;
use crate::encoder::{Bound, Branch, EmbeddingBatch, EncoderConfig, EncoderState, NegativeQueue, Variant, ViewOrigin};
use crate::error::{contract, Error, Result};
use crate::eval::{knn_top1, FeatureBank, KnnConfig, Split};
use crate::graph::{Graph, Var};
use crate::losses::{global_global_loss, local_global_loss, LossValue, Similarity};
use crate::metrics::{EvalMetrics, MetricRecord, MetricsSink, StepMetrics};
use crate::nn::{collect_grads, global_norm, BnMode, Sgd};
use crate::tensor::{lit, Tensor};

/// How the local-to-local term enters the encoder gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    /// `L_gg + L_lg + lambda * L_ll`.
    FixedWeight,
    /// `L_ll`'s gradient is rescaled to `lambda` times the norm of the
    /// similarity gradient.
    GradientRatio,
}

/// What the encoder minimizes between the two local crops of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalMeasure {
    /// The learned affinity regressor.
    Learned,
    /// Plain cosine similarity, i.e. local crops are pushed apart directly.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub lambda_mode: LambdaMode,
    pub local_measure: LocalMeasure,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Momentum-encoder coefficient `m`.
    pub ema: f64,
    pub queue_size: usize,
    pub symmetrize: bool,
    pub schedule: ScheduleUnit,
    /// Seeds data order, augmentation and partner sampling.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub regressor: RegressorConfig,
    pub augment: AugmentationConfig,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        // The non-contrastive rate is a base of 0.05 scaled by batch / 256.
        let (lambda, lr_max) = match variant {
            Variant::Contrastive => (0.0005, 0.03),
            Variant::NonContrastive => (0.0001, 0.05 * 64.0 / 256.0),
        };
        Self {
            variant,
            lambda,
            lambda_mode: LambdaMode::FixedWeight,
            local_measure: LocalMeasure::Learned,
            batch_size: 64,
            epochs: 20,
            lr_max,
            lr_min: 0.0,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.1,
            ema: 0.99,
            queue_size: 4096,
            symmetrize: true,
            schedule: ScheduleUnit::Step,
            seed: 0,
            encoder: EncoderConfig::default(),
            regressor: RegressorConfig::default(),
            augment: AugmentationConfig::default(),
        }
    }

    /// Narrow backbone on 32/16 pixel views with a 1024-entry queue and a
    /// 128-wide regressor; a full 20-epoch run takes about a minute on one core.
    pub fn compact(variant: Variant) -> Self {
        let mut c = Self::for_variant(variant);
        c.encoder.widths = vec![16, 32, 64, 128];
        c.encoder.embed_dim = 64;
        c.encoder.predictor_hidden = 16;
        c.regressor.embed_dim = 64;
        c.regressor.hidden = 128;
        c.queue_size = 1024;
        c.augment.output_size_global = 32;
        c.augment.output_size_local = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return bad("learning rates need 0 <= lr_min <= lr_max".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad("ema must be in [0,1]".into());
        }
        if self.variant == Variant::Contrastive && self.queue_size < 2 * self.batch_size {
            return bad("queue_size must hold at least two batches of keys".into());
        }
        if self.regressor.embed_dim != self.encoder.embed_dim {
            return bad("regressor embed_dim must equal encoder embed_dim".into());
        }
        self.augment.validate()
    }
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi t / T)) / 2`.
pub fn lr_at(t: u64, total: u64, lr_min: f64, lr_max: f64) -> Result<f64> {
    if t > total {
        return Err(contract(format!("schedule step {t} beyond total {total}")));
    }
    if t == 0 {
        return Ok(lr_max);
    }
    if t == total {
        return Ok(lr_min);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

/// Weight actually applied to `L_ll`: `lambda` itself, or
/// `lambda * |g_sim| / |g_ll|` in gradient-ratio mode.
pub fn effective_lambda(lambda: f64, mode: LambdaMode, sim_grad_norm: f64, ll_grad_norm: f64) -> f64 {
    match mode {
        LambdaMode::FixedWeight => lambda,
        LambdaMode::GradientRatio if ll_grad_norm > 0.0 => lambda * sim_grad_norm / ll_grad_norm,
        LambdaMode::GradientRatio => 0.0,
    }
}

pub fn total_encoder_loss(gg: f64, lg: f64, ll: f64, weight: f64) -> Result<LossValue> {
    for (v, n) in [(gg, "loss_gg"), (lg, "loss_lg"), (ll, "loss_ll")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(n.into()));
        }
    }
    let total = if weight == 0.0 { gg + lg } else { gg + lg + weight * ll };
    Ok(LossValue::new(total)?
        .with_part("loss_gg", gg)
        .with_part("loss_lg", lg)
        .with_part("loss_ll", ll)
        .with_part("ll_weight", weight))
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: EncoderState<f32>,
    pub regressor: RegressorState<f32>,
    pub queue: Option<NegativeQueue<f32>>,
    pub encoder_opt: Sgd<f32>,
    pub predictor_opt: Option<Sgd<f32>>,
    pub step: u64,
    pub epoch: u64,
    pub steps_per_epoch: u64,
    pub best_knn: Option<f64>,
    pub rng: ChaCha8Rng,
}

const QUEUE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl TrainState {
    /// Fresh state for a training split of `train_len` images.
    pub fn new(config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let steps_per_epoch = (train_len / config.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "training split of {train_len} images is smaller than one batch of {}",
                config.batch_size
            )));
        }
        let mut s = Self::with_steps(config, steps_per_epoch)?;
        s.steps_per_epoch = steps_per_epoch;
        Ok(s)
    }

    pub(crate) fn with_steps(config: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderState::new(config.encoder.clone(), config.variant)?;
        let regressor = RegressorState::new(config.regressor.clone())?;
        let queue = match config.variant {
            Variant::Contrastive => Some(NegativeQueue::new(
                config.queue_size,
                config.encoder.embed_dim,
                config.seed ^ QUEUE_SEED_SALT,
            )?),
            Variant::NonContrastive => None,
        };
        let encoder_opt = Sgd::new(&encoder.online.params, config.sgd_momentum, config.weight_decay);
        let predictor_opt = encoder
            .predictor
            .as_ref()
            .map(|p| Sgd::new(&p.params, config.sgd_momentum, config.weight_decay));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            encoder,
            regressor,
            queue,
            encoder_opt,
            predictor_opt,
            step: 0,
            epoch: 0,
            steps_per_epoch,
            best_knn: None,
            rng,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs as u64
    }

    pub fn current_lr(&self) -> Result<f64> {
        let c = &self.config;
        match c.schedule {
            ScheduleUnit::Step => lr_at(self.step, self.total_steps(), c.lr_min, c.lr_max),
            ScheduleUnit::Epoch => lr_at(self.epoch.min(c.epochs as u64), c.epochs as u64, c.lr_min, c.lr_max),
        }
    }

    /// Digest of the encoder-side trainable parameters (backbone,
    /// projection and predictor).
    pub fn encoder_digest(&self) -> String {
        self.encoder.trainable_digest()
    }

    pub fn regressor_digest(&self) -> String {
        self.regressor.digest()
    }

    /// Augments one image with the state's generator.
    pub fn views_for(&mut self, samples: &[&crate::augment::ImageSample]) -> Result<Vec<ViewSet>> {
        samples
            .iter()
            .map(|s| make_views(s, &self.config.augment, &mut self.rng))
            .collect()
    }
}

fn stack(views: &[ViewSet], pick: impl Fn(&ViewSet) -> &Tensor<f32>) -> Tensor<f32> {
    let first = pick(&views[0]).shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * first.iter().product::<usize>());
    for v in views {
        data.extend_from_slice(pick(v).data());
    }
    Tensor::new([views.len(), first[0], first[1], first[2]], data)
}

fn normalized_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Encoder outputs of one minibatch, kept in the graph that will carry the
/// encoder's backward pass.
pub struct Encoded {
    pub graph: Graph<f32>,
    pub online: Bound,
    pub predictor_vars: Vec<Var>,
    pub globals: [EmbeddingBatch; 2],
    pub locals: [EmbeddingBatch; 2],
    /// Stop-gradient targets: momentum embeddings (contrastive) or detached
    /// online embeddings (non-contrastive).
    pub targets: [EmbeddingBatch; 2],
    /// Unit-norm momentum embeddings of both globals, queued after the step.
    pub keys: Option<Tensor<f32>>,
    /// Unit-norm local embeddings with no link to the encoder.
    pub local_values: [Tensor<f32>; 2],
    pub source_ids: Vec<u64>,
}

/// Phase one: encode all four views of the batch.
pub fn encode_phase(state: &mut TrainState, views: &[ViewSet]) -> Result<Encoded> {
    if views.len() < 2 {
        return Err(contract("a training batch needs at least 2 images"));
    }
    let ids: Vec<u64> = views.iter().map(|v| v.source_id).collect();
    let mut g = Graph::new();
    let enc = &mut state.encoder;
    let online = enc.bind(&mut g, Branch::Online, true)?;
    let predictor_vars = match enc.variant {
        Variant::NonContrastive => enc.bind_predictor(&mut g, true)?,
        Variant::Contrastive => Vec::new(),
    };
    let images = [
        (stack(views, |v| &v.global_views[0]), ViewOrigin::Global1),
        (stack(views, |v| &v.global_views[1]), ViewOrigin::Global2),
        (stack(views, |v| &v.local_views[0]), ViewOrigin::Local1),
        (stack(views, |v| &v.local_views[1]), ViewOrigin::Local2),
    ];
    let mut z = Vec::with_capacity(4);
    for (img, origin) in &images {
        z.push(enc.encode(&mut g, &online, img, *origin, &ids, BnMode::Train)?);
    }
    let [g1, g2, l1, l2]: [EmbeddingBatch; 4] = z.try_into().expect("four views");
    let eps = lit::<f32>(1e-12);
    let (targets, keys) = match enc.variant {
        Variant::Contrastive => {
            let mom = enc.bind(&mut g, Branch::Momentum, false)?;
            let k1 = enc.encode(&mut g, &mom, &images[0].0, ViewOrigin::Global1, &ids, BnMode::Train)?;
            let k2 = enc.encode(&mut g, &mom, &images[1].0, ViewOrigin::Global2, &ids, BnMode::Train)?;
            let n1 = g.l2_normalize(k1.var, eps);
            let n2 = g.l2_normalize(k2.var, eps);
            let keys = Tensor::cat_rows(&[g.value(n1), g.value(n2)]);
            let t1 = EmbeddingBatch { var: n1, ..k1 };
            let t2 = EmbeddingBatch { var: n2, ..k2 };
            ([t1, t2], Some(keys))
        }
        Variant::NonContrastive => ([g1.detached(&mut g), g2.detached(&mut g)], None),
    };
    let local_values = [normalized_rows(g.value(l1.var)), normalized_rows(g.value(l2.var))];
    Ok(Encoded {
        graph: g,
        online,
        predictor_vars,
        globals: [g1, g2],
        locals: [l1, l2],
        targets,
        keys,
        local_values,
        source_ids: ids,
    })
}

/// Phase two: one ascent step of the regressor on joint versus product
/// local pairs. Returns the objective before the update, or `None` when the
/// local measure is not learned.
pub fn regressor_phase(state: &mut TrainState, enc: &Encoded, lr: f64) -> Result<Option<f64>> {
    if state.config.local_measure != LocalMeasure::Learned {
        return Ok(None);
    }
    let b = enc.source_ids.len();
    let partner = sample_negative_partner(b, &mut state.rng)?;
    let ids = &enc.source_ids;
    let partner_ids: Vec<u64> = partner.iter().map(|&i| ids[i]).collect();
    let [l1, l2] = &enc.local_values;
    let joint = PairBatch::new(l1.clone(), l2.clone(), ids, ids, PairKind::Joint)?;
    let product = PairBatch::new(l1.clone(), l1.select_rows(&partner), ids, &partner_ids, PairKind::Product)?;
    state.regressor.ascend(&joint, &product, lr).map(Some)
}

/// Loss values of the encoder step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderStepInfo {
    pub loss_gg: f64,
    pub loss_lg: f64,
    pub loss_ll: f64,
    pub ll_weight: f64,
    pub total: f64,
}

/// Phase three: descend `L_gg + L_lg + lambda L_ll` with the regressor frozen.
pub fn encoder_phase(state: &mut TrainState, enc: &mut Encoded, lr: f64) -> Result<EncoderStepInfo> {
    let cfg = &state.config;
    let g = &mut enc.graph;
    let eps = lit::<f32>(1e-12);
    let sim = match cfg.variant {
        Variant::Contrastive => {
            let queue = state.queue.as_ref().ok_or_else(|| contract("contrastive state lacks a queue"))?;
            Similarity::InfoNce {
                temperature: cfg.temperature,
                negatives: g.constant(queue.buffer().clone()),
            }
        }
        Variant::NonContrastive => Similarity::Cosine,
    };
    let mut head = |g: &mut Graph<f32>, z: &EmbeddingBatch| -> Result<EmbeddingBatch> {
        match cfg.variant {
            Variant::Contrastive => Ok(EmbeddingBatch {
                var: g.l2_normalize(z.var, eps),
                ..z.clone()
            }),
            Variant::NonContrastive => state.encoder.predict(g, &enc.predictor_vars, z, BnMode::Train),
        }
    };
    let qg = [head(g, &enc.globals[0])?, head(g, &enc.globals[1])?];
    let ql = [head(g, &enc.locals[0])?, head(g, &enc.locals[1])?];
    let t = [&enc.targets[0], &enc.targets[1]];
    let gg = global_global_loss(g, &sim, cfg.symmetrize, [&qg[0], &qg[1]], t)?;
    let lg = local_global_loss(g, &sim, [&ql[0], &ql[1]], t)?;
    let ll = match cfg.local_measure {
        LocalMeasure::Learned => {
            let vars = state.regressor.bind(g, false);
            let a = g.l2_normalize(enc.locals[0].var, eps);
            let b = g.l2_normalize(enc.locals[1].var, eps);
            local_local_loss(g, &mut state.regressor, &vars, a, b)?
        }
        LocalMeasure::Cosine => local_cosine_loss(g, enc.locals[0].var, enc.locals[1].var),
    };
    let value = |v: Var| g.value(v).data()[0] as f64;
    let (vgg, vlg, vll) = (value(gg), value(lg), value(ll));
    for (v, n) in [(vgg, "loss_gg"), (vlg, "loss_lg"), (vll, "loss_ll")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(n.into()));
        }
    }

    let online_params = &state.encoder.online.params;
    let pred_params = state.encoder.predictor.as_ref().map(|p| &p.params);
    let collect = |grads: &crate::graph::Grads<f32>| {
        let mut v = collect_grads(grads, &enc.online.vars, online_params);
        if let Some(p) = pred_params {
            v.extend(collect_grads(grads, &enc.predictor_vars, p));
        }
        v
    };
    let sim_loss = g.add(gg, lg);
    let (grads, weight) = if cfg.lambda == 0.0 {
        (collect(&g.backward(sim_loss)), 0.0)
    } else {
        match cfg.lambda_mode {
            LambdaMode::FixedWeight => {
                let scaled = g.scale(ll, lit(cfg.lambda));
                let total = g.add(sim_loss, scaled);
                (collect(&g.backward(total)), cfg.lambda)
            }
            LambdaMode::GradientRatio => {
                let mut gs = collect(&g.backward(sim_loss));
                let ga = collect(&g.backward(ll));
                let w = effective_lambda(cfg.lambda, cfg.lambda_mode, global_norm(&gs), global_norm(&ga));
                let wf = lit::<f32>(w);
                for (s, a) in gs.iter_mut().zip(&ga) {
                    for (x, &y) in s.data_mut().iter_mut().zip(a.data()) {
                        *x += wf * y;
                    }
                }
                (gs, w)
            }
        }
    };
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("encoder gradient".into()));
    }
    let n_online = state.encoder.online.params.len();
    let (g_online, g_pred) = grads.split_at(n_online);
    state.encoder_opt.step(&mut state.encoder.online.params, g_online, lr);
    if let (Some(opt), Some(p)) = (state.predictor_opt.as_mut(), state.encoder.predictor.as_mut()) {
        opt.step(&mut p.params, g_pred, lr);
    }
    let total = total_encoder_loss(vgg, vlg, vll, weight)?.value;
    Ok(EncoderStepInfo {
        loss_gg: vgg,
        loss_lg: vlg,
        loss_ll: vll,
        ll_weight: weight,
        total,
    })
}

/// Phase four (contrastive only): momentum update, then queue the keys.
pub fn momentum_phase(state: &mut TrainState, enc: &Encoded) -> Result<()> {
    if state.config.variant != Variant::Contrastive {
        return Ok(());
    }
    state.encoder.momentum_update(state.config.ema)?;
    let keys = enc.keys.as_ref().ok_or_else(|| contract("contrastive batch without keys"))?;
    state
        .queue
        .as_mut()
        .ok_or_else(|| contract("contrastive state lacks a queue"))?
        .enqueue(keys)
}

/// One full alternation on a batch of view sets.
pub fn train_step(state: &mut TrainState, views: &[ViewSet]) -> Result<StepMetrics> {
    let lr = state.current_lr()?;
    let mut enc = encode_phase(state, views)?;
    let omega = regressor_phase(state, &enc, lr)?;
    let info = encoder_phase(state, &mut enc, lr)?;
    momentum_phase(state, &enc)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        epoch: state.epoch,
        lr,
        loss_gg: info.loss_gg,
        loss_lg: info.loss_lg,
        loss_ll: info.loss_ll,
        omega,
        total: info.total,
    })
}

/// Held-out data for periodic KNN monitoring.
pub struct Monitor {
    pub train_images: Tensor<f32>,
    pub train_labels: Vec<usize>,
    pub val_images: Tensor<f32>,
    pub val_labels: Vec<usize>,
    pub knn: KnnConfig,
    /// Evaluate after every `every` epochs and after the last one.
    pub every: usize,
}

impl Monitor {
    /// Images are resized to the global view size so evaluation sees the
    /// training resolution.
    pub fn from_dataset(ds: &Dataset, train: &[usize], val: &[usize], size: usize, knn: KnnConfig, every: usize) -> Result<Self> {
        Ok(Self {
            train_images: resize_images(&ds.images(train)?, size),
            train_labels: ds.labels(train)?,
            val_images: resize_images(&ds.images(val)?, size),
            val_labels: ds.labels(val)?,
            knn,
            every: every.max(1),
        })
    }

    pub fn evaluate(&self, encoder: &mut EncoderState<f32>) -> Result<f64> {
        let ft = encoder.features(&self.train_images, 256)?;
        let fv = encoder.features(&self.val_images, 256)?;
        let train = FeatureBank::new(&ft, self.train_labels.clone(), Split::Train)?;
        let val = FeatureBank::new(&fv, self.val_labels.clone(), Split::Val)?;
        knn_top1(&train, &val, self.knn)
    }
}

/// Bilinear resize of a `[B,H,W,3]` batch to `[B,size,size,3]`.
pub fn resize_images(images: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = images.shape();
    if s[1] == size && s[2] == size {
        return images.clone();
    }
    let per = s[1] * s[2] * 3;
    let rect = crate::augment::CropRect {
        top: 0,
        left: 0,
        height: s[1],
        width: s[2],
        area_fraction: 1.0,
        fallback: false,
    };
    let mut data = Vec::with_capacity(s[0] * size * size * 3);
    for b in 0..s[0] {
        let img = Tensor::new([s[1], s[2], 3], images.data()[b * per..(b + 1) * per].to_vec());
        data.extend_from_slice(crate::augment::crop_resize(&img, &rect, size).data());
    }
    Tensor::new([s[0], size, size, 3], data)
}

#[derive(Default)]
pub struct FitOptions {
    pub monitor: Option<Monitor>,
    /// Directory for `last.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save `last.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

/// Runs the remaining epochs over `train` (dataset indices), dropping the
/// incomplete last batch of each epoch.
pub fn fit(state: &mut TrainState, ds: &Dataset, train: &[usize], opts: &FitOptions, sink: &mut dyn MetricsSink) -> Result<()> {
    if train.is_empty() {
        return Err(contract("cannot fit on an empty training split"));
    }
    let b = state.config.batch_size;
    if (train.len() / b) as u64 != state.steps_per_epoch {
        return Err(contract("training split size does not match the state's steps per epoch"));
    }
    let mut last_good: Option<PathBuf> = None;
    while state.epoch < state.config.epochs as u64 {
        let mut order = train.to_vec();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks_exact(b) {
            let samples: Vec<_> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let views = state.views_for(&samples)?;
            let m = train_step(state, &views).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at step {}; last good checkpoint: {}",
                    state.step,
                    last_good.as_ref().map_or("none".into(), |p| p.display().to_string())
                )),
                other => other,
            })?;
            sink.record(&MetricRecord::Step(m))?;
        }
        state.epoch += 1;
        let done = state.epoch == state.config.epochs as u64;
        let mut improved = false;
        if let Some(mon) = &opts.monitor {
            if state.epoch % mon.every as u64 == 0 || done {
                let acc = mon.evaluate(&mut state.encoder)?;
                sink.record(&MetricRecord::Eval(EvalMetrics {
                    step: state.step,
                    epoch: state.epoch,
                    knn_top1: acc,
                }))?;
                if state.best_knn.map_or(true, |b| acc > b) {
                    state.best_knn = Some(acc);
                    improved = true;
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let every = opts.checkpoint_every as u64;
            if (every > 0 && state.epoch % every == 0) || done {
                let p = dir.join("last.ckpt");
                crate::checkpoint::save_checkpoint(state, &p)?;
                last_good = Some(p);
            }
            if improved {
                crate::checkpoint::save_checkpoint(state, dir.join("best.ckpt"))?;
            }
        }
    }
    Ok(())
}
