//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stdout so the summary survives output capture.

use std::io::Write as _;
use std::time::Instant;

use logo_ssl::affinity::{
    affinity_forward, local_local_loss, omega_objective, sample_negative_partner, InsertedPairs, PairBatch, PairKind,
    PairScorer, RegressorConfig, RegressorState,
};
use logo_ssl::augment::make_views;
use logo_ssl::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use logo_ssl::data::{generate_synthetic, Dataset, SynthConfig};
use logo_ssl::encoder::{EmbeddingBatch, EncoderConfig, EncoderState, PredictorKind, Variant, ViewOrigin};
use logo_ssl::eval::{knn_classify, FeatureBank, KnnConfig, Split};
use logo_ssl::graph::{Graph, Var};
use logo_ssl::losses::{cosine_loss, info_nce, info_nce_value, local_global_loss, Similarity};
use logo_ssl::metrics::MetricRecord;
use logo_ssl::nn::{BnMode, ParamSet};
use logo_ssl::tensor::Tensor;
use logo_ssl::trainer::{
    encode_phase, encoder_phase, fit, lr_at, regressor_phase, resize_images, train_step, FitOptions, LocalMeasure,
    Monitor, TrainConfig, TrainState,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: impl AsRef<str>) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {id}: {verdict} {}", detail.as_ref());
        let _ = out.flush();
        if !pass {
            self.failures.push(id.to_string());
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| logo_ssl::nn::standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn unit_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn grads_of(g: &Graph<f64>, loss: Var, vars: &[Var]) -> Vec<Tensor<f64>> {
    let gr = g.backward(loss);
    vars.iter().map(|&v| gr.get_or_zeros(v, g.shape(v))).collect()
}

/// Worst relative error between analytic gradients and a fourth-order
/// central difference over every input element.
fn max_rel_error(inputs: &[Tensor<f64>], f: &mut dyn FnMut(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>)) -> f64 {
    const H: f64 = 1e-5;
    let (_, analytic) = f(inputs, true);
    let mut x = inputs.to_vec();
    let mut worst = 0f64;
    for i in 0..x.len() {
        for e in 0..x[i].len() {
            let orig = x[i].data()[e];
            let mut at = |delta: f64, x: &mut Vec<Tensor<f64>>| {
                x[i].data_mut()[e] = orig + delta;
                f(x, false).0
            };
            let (p1, m1) = (at(H, &mut x), at(-H, &mut x));
            let (p2, m2) = (at(2.0 * H, &mut x), at(-2.0 * H, &mut x));
            x[i].data_mut()[e] = orig;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * H);
            let an = analytic[i].data()[e];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn small_regressor(seed: u64) -> RegressorState<f64> {
    RegressorState::new(RegressorConfig {
        embed_dim: 8,
        hidden: 16,
        blocks: 2,
        init_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn batch(var: Var, origin: ViewOrigin) -> EmbeddingBatch {
    EmbeddingBatch {
        var,
        origin,
        source_ids: (0..4).collect(),
    }
}

fn criterion_1(r: &mut Report) {
    let t0 = Instant::now();
    let (b, n, k) = (4, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let inputs = vec![randn(&mut rng, &[b, n]), randn(&mut rng, &[b, n]), randn(&mut rng, &[k, n])];
    errs.push((
        "info_nce",
        max_rel_error(&inputs, &mut |x, grad| {
            let mut g = Graph::new();
            let vars: Vec<Var> = x.iter().map(|t| g.param(t.clone())).collect();
            let u: Vec<Var> = vars.iter().map(|&v| g.l2_normalize(v, 1e-12)).collect();
            let l = info_nce(&mut g, u[0], u[1], u[2], 0.2).unwrap();
            let gr = if grad { grads_of(&g, l, &vars) } else { Vec::new() };
            (g.value(l).data()[0], gr)
        }),
    ));

    let mut enc = EncoderState::<f64>::new(
        EncoderConfig {
            widths: vec![4],
            embed_dim: n,
            predictor: PredictorKind::Mlp,
            predictor_hidden: 16,
            init_seed: 3,
        },
        Variant::NonContrastive,
    )
    .unwrap();
    let target = randn(&mut rng, &[b, n]);
    let mut inputs = vec![randn(&mut rng, &[b, n])];
    inputs.extend(enc.predictor.as_ref().unwrap().params.tensors().iter().cloned());
    errs.push((
        "cosine_loss",
        max_rel_error(&inputs, &mut |x, grad| {
            enc.predictor.as_mut().unwrap().params.tensors_mut().clone_from_slice(&x[1..]);
            let mut g = Graph::new();
            let z1 = g.param(x[0].clone());
            let pv = enc.bind_predictor(&mut g, true).unwrap();
            let z2 = g.constant(target.clone());
            let l = cosine_loss(
                &mut g,
                &mut enc,
                &pv,
                &batch(z1, ViewOrigin::Global1),
                &batch(z2, ViewOrigin::Global2),
                BnMode::TrainFrozen,
            )
            .unwrap();
            let mut vars = vec![z1];
            vars.extend(pv);
            let gr = if grad { grads_of(&g, l, &vars) } else { Vec::new() };
            (g.value(l).data()[0], gr)
        }),
    ));

    let targets = [unit_rows(&randn(&mut rng, &[b, n])), unit_rows(&randn(&mut rng, &[b, n]))];
    let negatives = unit_rows(&randn(&mut rng, &[k, n]));
    let inputs = vec![randn(&mut rng, &[b, n]), randn(&mut rng, &[b, n])];
    for (name, contrastive) in [("local_global_loss/infonce", true), ("local_global_loss/cosine", false)] {
        errs.push((
            name,
            max_rel_error(&inputs, &mut |x, grad| {
                let mut g = Graph::new();
                let vars: Vec<Var> = x.iter().map(|t| g.param(t.clone())).collect();
                let q: Vec<Var> = vars.iter().map(|&v| g.l2_normalize(v, 1e-12)).collect();
                let t1 = g.constant(targets[0].clone());
                let t2 = g.constant(targets[1].clone());
                let sim = if contrastive {
                    Similarity::InfoNce {
                        temperature: 0.2,
                        negatives: g.constant(negatives.clone()),
                    }
                } else {
                    Similarity::Cosine
                };
                let l = local_global_loss(
                    &mut g,
                    &sim,
                    [&batch(q[0], ViewOrigin::Local1), &batch(q[1], ViewOrigin::Local2)],
                    [&batch(t1, ViewOrigin::Global1), &batch(t2, ViewOrigin::Global2)],
                )
                .unwrap();
                let gr = if grad { grads_of(&g, l, &vars) } else { Vec::new() };
                (g.value(l).data()[0], gr)
            }),
        ));
    }

    let mut reg = small_regressor(5);
    errs.push((
        "local_local_loss",
        max_rel_error(&inputs, &mut |x, grad| {
            let mut g = Graph::new();
            let vars: Vec<Var> = x.iter().map(|t| g.param(t.clone())).collect();
            let frozen = reg.bind(&mut g, false);
            let a = g.l2_normalize(vars[0], 1e-12);
            let c = g.l2_normalize(vars[1], 1e-12);
            let l = local_local_loss(&mut g, &mut reg, &frozen, a, c).unwrap();
            let gr = if grad { grads_of(&g, l, &vars) } else { Vec::new() };
            (g.value(l).data()[0], gr)
        }),
    ));

    let pairs: Vec<Tensor<f64>> = (0..3).map(|_| unit_rows(&randn(&mut rng, &[b, n]))).collect();
    let mut reg = small_regressor(6);
    let inputs = reg.weights.params.tensors().to_vec();
    errs.push((
        "omega_objective",
        max_rel_error(&inputs, &mut |x, grad| {
            reg.weights.params.tensors_mut().clone_from_slice(x);
            let mut g = Graph::new();
            let vars = reg.bind(&mut g, true);
            let joint = InsertedPairs {
                left: g.constant(pairs[0].clone()),
                right: g.constant(pairs[1].clone()),
                kind: PairKind::Joint,
            };
            let product = InsertedPairs {
                left: g.constant(pairs[0].clone()),
                right: g.constant(pairs[2].clone()),
                kind: PairKind::Product,
            };
            let l = omega_objective(&mut g, &mut reg, &vars, &joint, &product).unwrap();
            let gr = if grad { grads_of(&g, l, &vars) } else { Vec::new() };
            (g.value(l).data()[0], gr)
        }),
    ));

    let secs = t0.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(name, e)| format!("{name}={e:.1e}")).collect();
    r.line(
        "1 gradient correctness",
        worst < 1e-4 && secs < 120.0,
        format!("max rel err {worst:.2e} ({}) in {secs:.1}s", detail.join(", ")),
    );
}

fn small_state(variant: Variant, lambda: f64, regressor_seed: u64) -> TrainState {
    let mut cfg = TrainConfig::compact(variant);
    cfg.lambda = lambda;
    cfg.batch_size = 16;
    cfg.epochs = 5;
    cfg.seed = 21;
    cfg.encoder.init_seed = 22;
    cfg.regressor.init_seed = regressor_seed;
    TrainState::new(cfg, 64).unwrap()
}

fn small_data() -> Dataset {
    generate_synthetic(&SynthConfig {
        num_images: 64,
        seed: 9,
        ..Default::default()
    })
    .unwrap()
}

fn clone_state(s: &TrainState) -> TrainState {
    decode_checkpoint(&encode_checkpoint(s)).unwrap()
}

fn encoder_groups_digest(s: &TrainState) -> String {
    s.encoder.groups().iter().map(|(_, p)| p.digest()).collect()
}

/// Digest of the local-to-global gradient reaching the online encoder and
/// predictor, with targets either as produced by the trainer or re-inserted
/// as plain constants. Also reports whether anything reached the branch
/// behind the stop-gradient.
fn lg_gradient(state: &mut TrainState, views: &[logo_ssl::augment::ViewSet], constant_targets: bool) -> (String, bool) {
    let mut enc = encode_phase(state, views).unwrap();
    let g = &mut enc.graph;
    let targets: Vec<EmbeddingBatch> = enc
        .targets
        .iter()
        .map(|t| {
            if constant_targets {
                let v = g.value(t.var).clone();
                EmbeddingBatch {
                    var: g.constant(v),
                    ..t.clone()
                }
            } else {
                t.clone()
            }
        })
        .collect();
    let cfg = state.config.clone();
    let (sim, queries) = match cfg.variant {
        Variant::Contrastive => {
            let negatives = g.constant(state.queue.as_ref().unwrap().buffer().clone());
            let q: Vec<EmbeddingBatch> = enc
                .locals
                .iter()
                .map(|l| EmbeddingBatch {
                    var: g.l2_normalize(l.var, 1e-12),
                    ..l.clone()
                })
                .collect();
            (
                Similarity::InfoNce {
                    temperature: cfg.temperature,
                    negatives,
                },
                q,
            )
        }
        Variant::NonContrastive => {
            let q = enc
                .locals
                .iter()
                .map(|l| state.encoder.predict(g, &enc.predictor_vars, l, BnMode::Train).unwrap())
                .collect();
            (Similarity::Cosine, q)
        }
    };
    let lg = local_global_loss(g, &sim, [&queries[0], &queries[1]], [&targets[0], &targets[1]]).unwrap();
    let gr = g.backward(lg);
    let mut set = ParamSet::new();
    for (i, &v) in enc.online.vars.iter().chain(&enc.predictor_vars).enumerate() {
        set.push(format!("g{i}"), gr.get_or_zeros(v, g.shape(v)));
    }
    let leaked = enc
        .globals
        .iter()
        .filter_map(|z| gr.get(z.var))
        .any(|t| t.data().iter().any(|&x| x != 0.0));
    (set.digest(), leaked)
}

fn criterion_2(r: &mut Report) {
    let data = small_data();
    let samples: Vec<_> = data.samples[..16].iter().collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for variant in [Variant::Contrastive, Variant::NonContrastive] {
        let mut st = small_state(variant, 0.5, 23);
        let views = st.views_for(&samples).unwrap();

        let mut twin = clone_state(&st);
        let (through_sg, leaked) = lg_gradient(&mut st, &views, false);
        let (constants, _) = lg_gradient(&mut twin, &views, true);
        let a = through_sg == constants && !leaked;

        let mut st = small_state(variant, 0.5, 23);
        let views = st.views_for(&samples).unwrap();
        let mut enc = encode_phase(&mut st, &views).unwrap();
        let (e0, r0) = (encoder_groups_digest(&st), st.regressor_digest());
        regressor_phase(&mut st, &enc, 0.05).unwrap();
        let (e1, r1, rb1) = (
            encoder_groups_digest(&st),
            st.regressor_digest(),
            st.regressor.weights.buffers.digest(),
        );
        let b = e1 == e0 && r1 != r0;
        let t0 = st.encoder_digest();
        encoder_phase(&mut st, &mut enc, 0.05).unwrap();
        let c = st.regressor_digest() == r1
            && st.regressor.weights.buffers.digest() == rb1
            && st.encoder_digest() != t0;
        notes.push(format!("{}: a={a} b={b} c={c}", variant.as_str()));
        ok &= a && b && c;
    }
    r.line("2 stop-gradient contracts", ok, notes.join("; "));
}

fn criterion_3(r: &mut Report) {
    let mut checks = Vec::new();
    let mut worst_nce = 0f64;
    for k in [1usize, 4, 16, 100] {
        let d = k + 2;
        let e = |i: usize| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            v
        };
        let z = Tensor::from_rows(&[e(0)]);
        let pos = Tensor::from_rows(&[e(1)]);
        let neg = Tensor::from_rows(&(2..d).map(e).collect::<Vec<_>>());
        let v = info_nce_value::<f64>(&z, &pos, &neg, 0.07).unwrap().value;
        worst_nce = worst_nce.max((v - ((k + 1) as f64).ln()).abs());
    }
    checks.push(("info_nce ln(K+1)", worst_nce < 1e-6));

    let mut enc = EncoderState::<f64>::new(
        EncoderConfig {
            widths: vec![4],
            embed_dim: 6,
            predictor: PredictorKind::Identity,
            predictor_hidden: 4,
            init_seed: 0,
        },
        Variant::NonContrastive,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = unit_rows(&randn(&mut rng, &[4, 6]));
    let mut g = Graph::new();
    let pv = enc.bind_predictor(&mut g, true).unwrap();
    let z1 = g.param(u.clone());
    let z2 = g.constant(u);
    let l = cosine_loss(
        &mut g,
        &mut enc,
        &pv,
        &batch(z1, ViewOrigin::Global1),
        &batch(z2, ViewOrigin::Global2),
        BnMode::Train,
    )
    .unwrap();
    checks.push(("cosine -1", (g.value(l).data()[0] + 1.0).abs() < 1e-6));

    let (lo, hi) = (0.0123, 0.456);
    checks.push((
        "lr endpoints",
        lr_at(0, 977, lo, hi).unwrap() == hi && lr_at(977, 977, lo, hi).unwrap() == lo,
    ));

    let mut st = small_state(Variant::Contrastive, 0.0, 1);
    for t in st.encoder.online.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.25);
    }
    let before = st.encoder.momentum.as_ref().unwrap().params.clone();
    st.encoder.momentum_update(1.0).unwrap();
    let keep = st.encoder.momentum.as_ref().unwrap().params == before;
    st.encoder.momentum_update(0.0).unwrap();
    let copy = st.encoder.momentum.as_ref().unwrap().params == st.encoder.online.params;
    checks.push(("momentum m=1 keeps", keep));
    checks.push(("momentum m=0 copies", copy));

    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    r.line(
        "3 closed forms",
        ok,
        format!("info_nce max |err| {worst_nce:.1e}; failed: {failed:?}"),
    );
}

fn stack_rows(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Tensor::cat_rows(&refs).reshape(shape)
}

fn unit_rows_f32(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn criterion_4(r: &mut Report, data: &Dataset) {
    let t0 = Instant::now();
    let cfg = TrainConfig::compact(Variant::Contrastive);
    let n = data.len();
    let split = n * 3 / 4;
    let mut margins = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = EncoderState::<f32>::new(
            EncoderConfig {
                init_seed: seed,
                ..cfg.encoder.clone()
            },
            cfg.variant,
        )
        .unwrap();
        let (mut l1, mut l2) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for s in &data.samples {
            let v = make_views(s, &cfg.augment, &mut rng).unwrap();
            let [a, b] = v.local_views;
            l1.push(a);
            l2.push(b);
        }
        let embed = |enc: &mut EncoderState<f32>, views: &[Tensor<f32>]| {
            let parts: Vec<Tensor<f32>> = views
                .chunks(250)
                .map(|c| enc.embed_eval(&stack_rows(c), false).unwrap().1)
                .collect();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            unit_rows_f32(&Tensor::cat_rows(&refs))
        };
        let (z1, z2) = (embed(&mut enc, &l1), embed(&mut enc, &l2));
        let ids: Vec<u64> = data.samples.iter().map(|s| s.source_id).collect();

        let mut reg = RegressorState::<f32>::new(RegressorConfig {
            init_seed: seed + 100,
            ..cfg.regressor.clone()
        })
        .unwrap();
        let train: Vec<usize> = (0..split).collect();
        for _ in 0..200 {
            let idx: Vec<usize> = train.choose_multiple(&mut rng, 64).copied().collect();
            let partner = sample_negative_partner(idx.len(), &mut rng).unwrap();
            let bid: Vec<u64> = idx.iter().map(|&i| ids[i]).collect();
            let pid: Vec<u64> = partner.iter().map(|&p| bid[p]).collect();
            let left = z1.select_rows(&idx);
            let joint = PairBatch::new(left.clone(), z2.select_rows(&idx), &bid, &bid, PairKind::Joint).unwrap();
            let product = PairBatch::new(left.clone(), left.select_rows(&partner), &bid, &pid, PairKind::Product).unwrap();
            reg.ascend(&joint, &product, cfg.lr_max).unwrap();
        }
        let held: Vec<usize> = (split..n).collect();
        let partner = sample_negative_partner(held.len(), &mut rng).unwrap();
        let left = z1.select_rows(&held);
        let fj = affinity_forward(&mut reg, &left, &z2.select_rows(&held)).unwrap();
        let fp = affinity_forward(&mut reg, &left, &left.select_rows(&partner)).unwrap();
        let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        margins.push(mean(&fj) - mean(&fp));
    }
    let secs = t0.elapsed().as_secs_f64();
    let wins = margins.iter().filter(|&&m| m > 0.0).count();
    r.line(
        "4 regressor discrimination",
        wins == 3 && secs < 60.0,
        format!("held-out joint-product margins {margins:.4?}, {wins}/3 positive, {secs:.1}s"),
    );
}

struct DeskData {
    train: Dataset,
    train_images: Tensor<f32>,
    train_labels: Vec<usize>,
    val_images: Tensor<f32>,
    val_labels: Vec<usize>,
}

impl DeskData {
    fn new() -> Self {
        let train = generate_synthetic(&SynthConfig {
            seed: 100,
            ..Default::default()
        })
        .unwrap();
        let val = generate_synthetic(&SynthConfig {
            seed: 200,
            num_images: 500,
            ..Default::default()
        })
        .unwrap();
        let ti: Vec<usize> = (0..train.len()).collect();
        let vi: Vec<usize> = (0..val.len()).collect();
        let size = TrainConfig::compact(Variant::Contrastive).augment.output_size_global;
        Self {
            train_images: resize_images(&train.images(&ti).unwrap(), size),
            train_labels: train.labels(&ti).unwrap(),
            val_images: resize_images(&val.images(&vi).unwrap(), size),
            val_labels: val.labels(&vi).unwrap(),
            train,
        }
    }
}

struct RunOutcome {
    curve: Vec<f64>,
    min_std: f64,
    secs: f64,
}

impl RunOutcome {
    fn final_knn(&self) -> f64 {
        *self.curve.last().expect("at least one evaluation")
    }
}

fn desk_run(data: &DeskData, variant: Variant, seed: u64, lambda: f64, measure: LocalMeasure) -> RunOutcome {
    let t0 = Instant::now();
    let mut cfg = TrainConfig::compact(variant);
    cfg.lambda = lambda;
    cfg.local_measure = measure;
    cfg.seed = seed;
    cfg.encoder.init_seed = seed;
    cfg.regressor.init_seed = seed + 1000;
    let monitor = Monitor {
        train_images: data.train_images.clone(),
        train_labels: data.train_labels.clone(),
        val_images: data.val_images.clone(),
        val_labels: data.val_labels.clone(),
        knn: KnnConfig::default(),
        every: 5,
    };
    let idx: Vec<usize> = (0..data.train.len()).collect();
    let mut st = TrainState::new(cfg, idx.len()).unwrap();
    let mut log: Vec<MetricRecord> = Vec::new();
    let opts = FitOptions {
        monitor: Some(monitor),
        ..Default::default()
    };
    fit(&mut st, &data.train, &idx, &opts, &mut log).unwrap();
    let curve = log
        .iter()
        .filter_map(|m| match m {
            MetricRecord::Eval(e) => Some(e.knn_top1),
            _ => None,
        })
        .collect();
    let rows: Vec<usize> = (0..data.val_images.rows()).collect();
    let parts: Vec<Tensor<f32>> = rows
        .chunks(250)
        .map(|c| st.encoder.embed_eval(&data.val_images.select_rows(c), false).unwrap().1)
        .collect();
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let z = unit_rows_f32(&Tensor::cat_rows(&refs));
    RunOutcome {
        curve,
        min_std: per_dim_std(&z).into_iter().fold(f64::INFINITY, f64::min),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn per_dim_std(z: &Tensor<f32>) -> Vec<f64> {
    let (m, d) = (z.rows(), z.row_len());
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..m).map(|i| z.row(i)[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / m as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt()
        })
        .collect()
}

const SEEDS: [u64; 3] = [1, 2, 3];

/// Learned-regressor runs per variant, indexed like [`SEEDS`].
fn criterion_5(r: &mut Report, data: &DeskData) -> Vec<(Variant, Vec<RunOutcome>)> {
    let t0 = Instant::now();
    let mut learned = Vec::new();
    let (mut a_ok, mut b_ok, mut c_ok) = (true, true, true);
    let (mut a_notes, mut b_notes, mut c_notes) = (Vec::new(), Vec::new(), Vec::new());
    for variant in [Variant::Contrastive, Variant::NonContrastive] {
        let lambda = TrainConfig::compact(variant).lambda;
        let mut full_runs = Vec::new();
        let mut wins = 0;
        for &seed in &SEEDS {
            let full = desk_run(data, variant, seed, lambda, LocalMeasure::Learned);
            let ablated = desk_run(data, variant, seed, 0.0, LocalMeasure::Learned);
            for (tag, run) in [("full", &full), ("w/o-L2L", &ablated)] {
                a_ok &= run.min_std > 0.01;
                b_ok &= run.final_knn() >= 0.30;
                a_notes.push(format!("{:.3}", run.min_std));
                b_notes.push(format!("{}/{tag}/s{seed}={:.1}%", variant.as_str(), 100.0 * run.final_knn()));
            }
            if full.final_knn() >= ablated.final_knn() {
                wins += 1;
            }
            full_runs.push(full);
        }
        c_ok &= wins >= 2;
        c_notes.push(format!("{} {wins}/3", variant.as_str()));
        learned.push((variant, full_runs));
    }
    let secs = t0.elapsed().as_secs_f64();
    r.line("5a no collapse", a_ok, format!("min per-dim std of unit embeddings: [{}]", a_notes.join(", ")));
    r.line("5b knn >= 30%", b_ok, b_notes.join(", "));
    r.line("5c full >= w/o-L2L", c_ok, format!("{} (needs 2/3 each)", c_notes.join(", ")));
    let slowest = learned.iter().flat_map(|(_, v)| v).map(|o: &RunOutcome| o.secs).fold(0.0, f64::max);
    r.line("5 runtime", secs < 900.0, format!("{secs:.0}s for 12 runs, slowest full run {slowest:.0}s"));
    learned
}

fn criterion_6(r: &mut Report, data: &DeskData, learned: &[(Variant, Vec<RunOutcome>)]) {
    let mut ok = true;
    let mut notes = Vec::new();
    for (variant, runs) in learned {
        let lambda = TrainConfig::compact(*variant).lambda;
        let mut wins = 0;
        for (&seed, reference) in SEEDS.iter().zip(runs) {
            let cos = desk_run(data, *variant, seed, lambda, LocalMeasure::Cosine);
            if cos.final_knn() < reference.final_knn() {
                wins += 1;
            }
            notes.push(format!(
                "{}/s{seed} cosine {:.1}% vs learned {:.1}%",
                variant.as_str(),
                100.0 * cos.final_knn(),
                100.0 * reference.final_knn()
            ));
        }
        ok &= wins == 3;
    }
    r.line("6 cosine measure ends lower", ok, notes.join(", "));
}

fn oracle_knn(bank: &FeatureBank, queries: &Tensor<f32>, k: usize, temperature: f64) -> Vec<usize> {
    let feats = bank.features();
    let labels = bank.labels();
    let classes = labels.iter().max().unwrap() + 1;
    (0..queries.rows())
        .map(|qi| {
            let q = queries.row(qi);
            let norm = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let mut dist: Vec<(f64, usize)> = (0..bank.len())
                .map(|i| {
                    let d2: f64 = feats
                        .row(i)
                        .iter()
                        .zip(q)
                        .map(|(&a, &b)| (a as f64 - b as f64 / norm).powi(2))
                        .sum();
                    (d2, i)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0f64; classes];
            for &(d2, i) in &dist[..k] {
                let sim = 1.0 - d2 / 2.0;
                votes[labels[i]] += (sim / temperature).exp();
            }
            let top = votes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            votes.iter().position(|&v| v == top).unwrap()
        })
        .collect()
}

fn criterion_7(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatched = 0;
    let mut total = 0;
    for inst in 0..50 {
        let m = rng.gen_range(20..=1000);
        let d = rng.gen_range(2..=64);
        let classes = rng.gen_range(2..=10);
        let k = rng.gen_range(1..=m.min(50));
        let temperature = rng.gen_range(0.02..1.0);
        let mut rows: Vec<Vec<f32>> = (0..m)
            .map(|_| (0..d).map(|_| logo_ssl::nn::standard_normal(&mut rng) as f32).collect())
            .collect();
        if inst % 5 == 0 {
            for i in (1..m).step_by(3) {
                rows[i] = rows[i - 1].clone();
            }
        }
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        let bank = FeatureBank::new(&Tensor::from_rows(&rows), labels, Split::Train).unwrap();
        let nq = 40;
        let queries = Tensor::from_rows(
            &(0..nq)
                .map(|i| {
                    if i % 4 == 0 {
                        rows[rng.gen_range(0..m)].clone()
                    } else {
                        (0..d).map(|_| logo_ssl::nn::standard_normal(&mut rng) as f32).collect()
                    }
                })
                .collect::<Vec<_>>(),
        );
        let got = knn_classify(&bank, &queries, KnnConfig { k, temperature }).unwrap();
        let want = oracle_knn(&bank, &queries, k, temperature);
        mismatched += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        total += nq;
    }
    r.line(
        "7 knn oracle",
        mismatched == 0,
        format!("{mismatched} mismatches over {total} queries in 50 instances"),
    );
}

/// Deterministic batch order so runs depend only on the state.
fn run_steps(st: &mut TrainState, data: &Dataset, steps: usize) -> Vec<String> {
    let b = st.config.batch_size;
    let n = data.len();
    (0..steps)
        .map(|_| {
            let start = (st.step as usize * b) % n;
            let samples: Vec<_> = (start..start + b).map(|i| &data.samples[i % n]).collect();
            let views = st.views_for(&samples).unwrap();
            train_step(st, &views).unwrap();
            format!("{}{}", encoder_groups_digest(st), st.regressor_digest())
        })
        .collect()
}

fn criterion_8(r: &mut Report) {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for variant in [Variant::Contrastive, Variant::NonContrastive] {
        let lambda = TrainConfig::compact(variant).lambda;
        let mut a = small_state(variant, lambda, 5);
        let mut b = small_state(variant, lambda, 5);
        let same10 = run_steps(&mut a, &data, 10) == run_steps(&mut b, &data, 10)
            && encode_checkpoint(&a) == encode_checkpoint(&b);

        let path = dir.path().join(format!("{}.ckpt", variant.as_str()));
        save_checkpoint(&a, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let tail_a = run_steps(&mut a, &data, 5);
        let tail_r = run_steps(&mut resumed, &data, 5);
        let same_resume = tail_a == tail_r && encode_checkpoint(&a) == encode_checkpoint(&resumed);
        notes.push(format!("{}: repro={same10} resume={same_resume}", variant.as_str()));
        ok &= same10 && same_resume;
    }
    r.line("8 determinism and resume", ok, notes.join("; "));
}

fn criterion_9(r: &mut Report) {
    let data = small_data();
    let mut ok = true;
    let mut notes = Vec::new();
    for variant in [Variant::Contrastive, Variant::NonContrastive] {
        let mut a = small_state(variant, 0.0, 31);
        let mut b = small_state(variant, 0.0, 32);
        let regressors_differ = a.regressor_digest() != b.regressor_digest();
        let mut equal = true;
        for _ in 0..10 {
            run_steps(&mut a, &data, 1);
            run_steps(&mut b, &data, 1);
            equal &= encoder_groups_digest(&a) == encoder_groups_digest(&b);
        }
        notes.push(format!("{}: encoder equal={equal}", variant.as_str()));
        ok &= equal && regressors_differ;
    }
    r.line("9 lambda=0 independence", ok, notes.join("; "));
}

#[test]
fn acceptance_criteria() {
    let mut r = Report { failures: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    let synth = generate_synthetic(&SynthConfig::default()).unwrap();
    criterion_4(&mut r, &synth);
    criterion_7(&mut r);
    criterion_8(&mut r);
    criterion_9(&mut r);
    let desk = DeskData::new();
    let learned = criterion_5(&mut r, &desk);
    criterion_6(&mut r, &desk, &learned);
    assert!(r.failures.is_empty(), "failed criteria: {:?}", r.failures);
}
