//! Frozen-feature evaluation: weighted KNN, linear probing and the
//! cosine-vs-regressor affinity comparison.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{affinity_forward, RegressorState};
use crate::encoder::EncoderState;
use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::nn::{collect_grads, BnMode, Fwd, Linear, Sgd, Weights};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// L2-normalized feature rows with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Tensor<f32>,
    labels: Vec<usize>,
    pub split: Split,
}

fn normalize_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
    out
}

impl FeatureBank {
    pub fn new(features: &Tensor<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() == 0 {
            return Err(contract("feature bank needs a non-empty [M,d] matrix"));
        }
        if labels.len() != features.rows() {
            return Err(contract("one label per feature row required"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(Self {
            features: normalize_rows(features),
            labels,
            split,
        })
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.row_len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 20,
            temperature: 0.07,
        }
    }
}

/// Weighted-vote KNN under cosine similarity. Neighbours are ranked by
/// similarity then bank index; each votes `exp(sim / temperature)` and
/// vote ties go to the smallest class id.
pub fn knn_classify(bank: &FeatureBank, queries: &Tensor<f32>, cfg: KnnConfig) -> Result<Vec<usize>> {
    if bank.split != Split::Train {
        return Err(contract("knn needs a training bank"));
    }
    if cfg.k == 0 || cfg.k > bank.len() {
        return Err(contract(format!("k={} must be in 1..={}", cfg.k, bank.len())));
    }
    if !(cfg.temperature > 0.0) {
        return Err(contract("vote temperature must be positive"));
    }
    if queries.shape().len() != 2 || (queries.rows() > 0 && queries.row_len() != bank.dim()) {
        return Err(contract("query dimension differs from bank"));
    }
    let q = normalize_rows(queries);
    let (nq, m, d) = (q.rows(), bank.len(), bank.dim());
    let classes = bank.labels.iter().max().map_or(0, |c| c + 1);
    let mut preds = Vec::with_capacity(nq);
    const CHUNK: usize = 256;
    for start in (0..nq).step_by(CHUNK) {
        let end = (start + CHUNK).min(nq);
        let rows = end - start;
        let mut sims = vec![0f32; rows * m];
        f32::gemm(
            rows,
            d,
            m,
            &q.data()[start * d..end * d],
            d as isize,
            1,
            bank.features.data(),
            1,
            d as isize,
            0.0,
            &mut sims,
        );
        for s in sims.chunks(m) {
            let mut order: Vec<usize> = (0..m).collect();
            order.select_nth_unstable_by(cfg.k - 1, |&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            let mut votes = vec![0f64; classes];
            for &i in &order[..cfg.k] {
                votes[bank.labels[i]] += (s[i] as f64 / cfg.temperature).exp();
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn knn_top1(train: &FeatureBank, val: &FeatureBank, cfg: KnnConfig) -> Result<f64> {
    if val.is_empty() || train.dim() != val.dim() {
        return Err(contract("banks must be non-empty with equal dimension"));
    }
    let preds = knn_classify(train, &val.features, cfg)?;
    let hits = preds.iter().zip(&val.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / val.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.3,
            momentum: 0.9,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Trains a softmax-regression probe on the training bank and returns its
/// top-1 accuracy on the validation bank.
pub fn linear_probe(train: &FeatureBank, val: &FeatureBank, cfg: ProbeConfig) -> Result<f64> {
    if train.dim() != val.dim() {
        return Err(contract("banks differ in dimension"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch size must be positive".into()));
    }
    let classes = train.labels.iter().chain(&val.labels).max().map_or(1, |c| c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Weights::<f32>::new();
    let fc = Linear::new(&mut w, "probe", train.dim(), classes, &mut rng);
    let mut opt = Sgd::new(&w.params, cfg.momentum, 0.0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = crate::trainer::lr_at(t, total, 0.0, cfg.lr)?;
            let mut g = Graph::new();
            let vars = w.params.bind(&mut g, true);
            let x = g.constant(train.features.select_rows(chunk));
            let mut onehot = Tensor::zeros([chunk.len(), classes]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * classes + train.labels[i]] = 1.0;
            }
            let y = g.constant(onehot);
            let mut f = Fwd {
                g: &mut g,
                p: &vars,
                buffers: &mut w.buffers,
                mode: BnMode::Eval,
            };
            let logits = fc.forward(&mut f, x);
            let lse = g.logsumexp_rows(logits);
            let picked = g.row_dot(logits, y);
            let nll = g.sub(lse, picked);
            let loss = g.mean(nll);
            let grads = g.backward(loss);
            let grads = collect_grads(&grads, &vars, &w.params);
            opt.step(&mut w.params, &grads, lr);
            t += 1;
        }
    }
    let logits = crate::tensor::matmul(
        val.features.data(),
        w.params.get(fc.w).data(),
        val.len(),
        val.dim(),
        classes,
    );
    let bias = w.params.get(fc.b).data();
    let mut hits = 0;
    for (r, row) in logits.chunks(classes).enumerate() {
        let mut best = 0;
        for c in 1..classes {
            if row[c] + bias[c] > row[best] + bias[best] {
                best = c;
            }
        }
        hits += usize::from(best == val.labels[r]);
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Where a candidate crop came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CropMeta {
    pub id: String,
    pub image: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityScore {
    pub meta: CropMeta,
    pub cosine: f64,
    pub cosine_norm: f64,
    pub regressor: f64,
    pub regressor_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityReport {
    pub reference: CropMeta,
    pub scores: Vec<AffinityScore>,
}

/// Min-max scaling to `[0, 1]`; a constant list maps to all ones.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Scores every candidate crop against the reference with both the cosine
/// of the online embeddings and the affinity regressor.
pub fn affinity_compare<T: Real>(
    encoder: &mut EncoderState<T>,
    regressor: &mut RegressorState<T>,
    reference: (&CropMeta, &Tensor<T>),
    candidates: &[(CropMeta, Tensor<T>)],
) -> Result<AffinityReport> {
    if candidates.is_empty() {
        return Err(contract("affinity comparison needs at least one candidate"));
    }
    let shape = reference.1.shape();
    if candidates.iter().any(|(_, t)| t.shape() != shape) || shape.len() != 3 {
        return Err(contract("all crops must be [S,S,3] with one size"));
    }
    let mut parts = vec![reference.1];
    parts.extend(candidates.iter().map(|(_, t)| t));
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(parts.len() * per);
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    let batch = Tensor::new([parts.len(), shape[0], shape[1], 3], data);
    let (_, z) = encoder.embed_eval(&batch, false)?;
    let n = z.row_len();
    let z = normalize_generic(&z);
    let c = candidates.len();
    let cos: Vec<f64> = (1..=c)
        .map(|i| (0..n).map(|j| z.row(0)[j].as_f64() * z.row(i)[j].as_f64()).sum())
        .collect();
    let reps: Vec<usize> = vec![0; c];
    let idx: Vec<usize> = (1..=c).collect();
    let reg = affinity_forward(regressor, &z.select_rows(&reps), &z.select_rows(&idx))?;
    let reg: Vec<f64> = reg.data().iter().map(|v| v.as_f64()).collect();
    let (cn, rn) = (min_max(&cos), min_max(&reg));
    let scores = candidates
        .iter()
        .enumerate()
        .map(|(i, (m, _))| AffinityScore {
            meta: m.clone(),
            cosine: cos[i],
            cosine_norm: cn[i],
            regressor: reg[i],
            regressor_norm: rn[i],
        })
        .collect();
    Ok(AffinityReport {
        reference: reference.0.clone(),
        scores,
    })
}

fn normalize_generic<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() / n));
        }
    }
    out
}

impl AffinityReport {
    /// One line per candidate: id, raw and normalized cosine, raw and
    /// normalized regressor score.
    pub fn to_text(&self) -> String {
        let r = &self.reference;
        let mut s = format!(
            "# reference {} image={} rect={},{},{},{}\n# crop_id cosine cosine_norm regressor regressor_norm\n",
            r.id, r.image, r.top, r.left, r.height, r.width
        );
        for sc in &self.scores {
            let _ = writeln!(
                s,
                "{} {:.6} {:.6} {:.6} {:.6}",
                sc.meta.id, sc.cosine, sc.cosine_norm, sc.regressor, sc.regressor_norm
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    fn bank(rows: &[Vec<f32>], labels: &[usize]) -> FeatureBank {
        FeatureBank::new(&Tensor::from_rows(rows), labels.to_vec(), Split::Train).unwrap()
    }

    #[test]
    fn exact_match_with_k1() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]], &[0, 1, 2]);
        let q = Tensor::from_rows(&[vec![0.0, 3.0], vec![-1.0, 0.2]]);
        let cfg = KnnConfig { k: 1, temperature: 0.07 };
        assert_eq!(knn_classify(&b, &q, cfg).unwrap(), vec![1, 2]);
    }

    #[test]
    fn single_label_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f: Tensor<f32> = uniform(&mut rng, &[30, 5], 1.0);
        let b = FeatureBank::new(&f, vec![4; 30], Split::Train).unwrap();
        let q: Tensor<f32> = uniform(&mut rng, &[10, 5], 1.0);
        assert!(knn_classify(&b, &q, KnnConfig::default()).unwrap().iter().all(|&p| p == 4));
    }

    #[test]
    fn contracts() {
        let b = bank(&[vec![1.0, 0.0]], &[0]);
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        assert!(knn_classify(&b, &q, KnnConfig { k: 2, temperature: 0.1 }).is_err());
        let mut v = b.clone();
        v.split = Split::Val;
        assert!(knn_classify(&v, &q, KnnConfig { k: 1, temperature: 0.1 }).is_err());
        assert!(FeatureBank::new(&Tensor::zeros([0, 2]), vec![], Split::Train).is_err());
    }

    #[test]
    fn duplicated_bank_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Tensor<f32> = uniform(&mut rng, &[50, 8], 1.0);
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let tr = FeatureBank::new(&f, labels.clone(), Split::Train).unwrap();
        let va = FeatureBank::new(&f, labels, Split::Val).unwrap();
        assert_eq!(knn_top1(&tr, &va, KnnConfig { k: 1, temperature: 0.07 }).unwrap(), 1.0);
    }

    #[test]
    fn probe_separates_two_clusters() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let s = i as f32 * 0.01;
            rows.push(vec![1.0, s, 0.1]);
            labels.push(0);
            rows.push(vec![-1.0, s, 0.1]);
            labels.push(1);
        }
        let f = Tensor::from_rows(&rows);
        let tr = FeatureBank::new(&f, labels.clone(), Split::Train).unwrap();
        let va = FeatureBank::new(&f, labels, Split::Val).unwrap();
        let cfg = ProbeConfig {
            epochs: 10,
            batch_size: 16,
            ..Default::default()
        };
        assert_eq!(linear_probe(&tr, &va, cfg).unwrap(), 1.0);
    }

    #[test]
    fn min_max_cases() {
        assert_eq!(min_max(&[0.3]), vec![1.0]);
        assert_eq!(min_max(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    }
}
