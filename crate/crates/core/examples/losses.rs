//! Evaluates each loss on small hand-checkable inputs.

use logo_ssl::affinity::{omega_objective, DotScorer, InsertedPairs, PairKind};
use logo_ssl::encoder::{EmbeddingBatch, EncoderConfig, EncoderState, PredictorKind, Variant, ViewOrigin};
use logo_ssl::graph::Graph;
use logo_ssl::losses::{cosine_loss, info_nce_value};
use logo_ssl::nn::BnMode;
use logo_ssl::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    // One positive at cosine 1, one orthogonal negative, temperature 0.5.
    let z = Tensor::from_rows(&[vec![1.0f64, 0.0]]);
    let neg = Tensor::from_rows(&[vec![0.0, 1.0]]);
    let v = info_nce_value(&z, &z, &neg, 0.5)?;
    println!("info_nce hand case      {:.5} (log(1 + e^-2) = {:.5})", v.value, (1.0 + (-2f64).exp()).ln());

    // All logits equal: the loss is log(K + 1).
    let k = 7;
    let rows: Vec<Vec<f64>> = (0..k + 2)
        .map(|i| (0..k + 2).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let v = info_nce_value(
        &Tensor::from_rows(&rows[..1]),
        &Tensor::from_rows(&rows[1..2]),
        &Tensor::from_rows(&rows[2..]),
        0.1,
    )?;
    println!("info_nce uniform K={k}   {:.6} (ln 8 = {:.6})", v.value, 8f64.ln());

    // Identity predictor: -cos((3,4), (4,3)) = -0.96.
    let mut enc = EncoderState::<f64>::new(
        EncoderConfig {
            widths: vec![4],
            embed_dim: 2,
            predictor: PredictorKind::Identity,
            ..Default::default()
        },
        Variant::NonContrastive,
    )?;
    let mut g = Graph::new();
    let pv = enc.bind_predictor(&mut g, true)?;
    let batch = |var| EmbeddingBatch {
        var,
        origin: ViewOrigin::Global1,
        source_ids: vec![0],
    };
    let z1 = g.param(Tensor::from_rows(&[vec![3.0, 4.0]]));
    let z2 = g.constant(Tensor::from_rows(&[vec![4.0, 3.0]]));
    let l = cosine_loss(&mut g, &mut enc, &pv, &batch(z1), &batch(z2), BnMode::Train)?;
    println!("cosine identity h       {:.2}", g.value(l).data()[0]);

    // Dot-product scorer: joint pair agrees, product pair is orthogonal.
    let mut g = Graph::<f64>::new();
    let e1 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let e2 = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]));
    let joint = InsertedPairs {
        left: e1,
        right: e1,
        kind: PairKind::Joint,
    };
    let product = InsertedPairs {
        left: e1,
        right: e2,
        kind: PairKind::Product,
    };
    let omega = omega_objective(&mut g, &mut DotScorer, &[], &joint, &product)?;
    println!("omega with f(a,b)=a.b   {:.1}", g.value(omega).data()[0]);
    Ok(())
}
