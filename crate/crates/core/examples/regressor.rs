//! Fits the affinity regressor on frozen embeddings of local crops and
//! tracks how well it separates same-image pairs from cross-image pairs on
//! held-out images.
//!
//! ```text
//! cargo run --release --example regressor -- [steps]
//! ```

use logo_ssl::affinity::{affinity_forward, sample_negative_partner, PairBatch, PairKind, RegressorState};
use logo_ssl::augment::make_views;
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::{EncoderState, Variant};
use logo_ssl::tensor::Tensor;
use logo_ssl::trainer::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let mut out = t.clone();
    let d = t.row_len();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn mean(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
}

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let cfg = TrainConfig::compact(Variant::Contrastive);
    let ds = generate_synthetic(&SynthConfig {
        num_images: 1000,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // Two local crops per image, embedded once by a frozen encoder.
    let mut enc = EncoderState::<f32>::new(cfg.encoder.clone(), cfg.variant)?;
    let (mut l1, mut l2) = (Vec::new(), Vec::new());
    for s in &ds.samples {
        let [a, b] = make_views(s, &cfg.augment, &mut rng)?.local_views;
        l1.push(a);
        l2.push(b);
    }
    let mut embed = |views: &[Tensor<f32>]| -> anyhow::Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = views.iter().collect();
        let s = views[0].shape();
        let batch = Tensor::cat_rows(&refs).reshape(vec![views.len(), s[0], s[1], s[2]]);
        Ok(unit_rows(&enc.embed_eval(&batch, false)?.1))
    };
    let (z1, z2) = (embed(&l1)?, embed(&l2)?);
    let ids: Vec<u64> = ds.samples.iter().map(|s| s.source_id).collect();

    let split = ds.len() * 3 / 4;
    let train: Vec<usize> = (0..split).collect();
    let held: Vec<usize> = (split..ds.len()).collect();
    let held_partner = sample_negative_partner(held.len(), &mut rng)?;

    let mut reg = RegressorState::<f32>::new(cfg.regressor.clone())?;
    for step in 0..=steps {
        if step % 50 == 0 {
            let left = z1.select_rows(&held);
            let joint = affinity_forward(&mut reg, &left, &z2.select_rows(&held))?;
            let product = affinity_forward(&mut reg, &left, &left.select_rows(&held_partner))?;
            println!(
                "step {step:>4}  held-out mean f: same image {:+.3}, different images {:+.3}",
                mean(&joint),
                mean(&product)
            );
        }
        if step == steps {
            break;
        }
        let idx: Vec<usize> = train.choose_multiple(&mut rng, cfg.batch_size).copied().collect();
        let partner = sample_negative_partner(idx.len(), &mut rng)?;
        let bid: Vec<u64> = idx.iter().map(|&i| ids[i]).collect();
        let pid: Vec<u64> = partner.iter().map(|&p| bid[p]).collect();
        let left = z1.select_rows(&idx);
        let joint = PairBatch::new(left.clone(), z2.select_rows(&idx), &bid, &bid, PairKind::Joint)?;
        let product = PairBatch::new(left.clone(), left.select_rows(&partner), &bid, &pid, PairKind::Product)?;
        reg.ascend(&joint, &product, cfg.lr_max)?;
    }
    Ok(())
}
