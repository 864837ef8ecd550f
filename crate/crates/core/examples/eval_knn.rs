//! Weighted KNN accuracy of backbone features, for a checkpoint or a
//! randomly initialized encoder, across several neighbourhood sizes.
//!
//! ```text
//! cargo run --release --example eval_knn -- [checkpoint]
//! ```

use logo_ssl::checkpoint::load_checkpoint;
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::eval::{knn_top1, FeatureBank, KnnConfig, Split};
use logo_ssl::trainer::{resize_images, TrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let mut state = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::new(TrainConfig::compact(Variant::Contrastive), 1000)?,
    };
    let size = state.config.augment.output_size_global;

    let mut ds = generate_synthetic(&SynthConfig {
        num_images: 1500,
        seed: 77,
        ..Default::default()
    })?;
    ds.hold_out(1.0 / 3.0, 0)?;
    let bank = |idx: &[usize], split, state: &mut TrainState| -> anyhow::Result<FeatureBank> {
        let images = resize_images(&ds.images(idx)?, size);
        Ok(FeatureBank::new(&state.encoder.features(&images, 250)?, ds.labels(idx)?, split)?)
    };
    let train = bank(ds.split("train")?, Split::Train, &mut state)?;
    let val = bank(ds.split("val")?, Split::Val, &mut state)?;
    println!("bank {} x {}, {} queries", train.len(), train.dim(), val.len());

    for k in [1, 5, 20, 200] {
        let cfg = KnnConfig {
            k,
            ..KnnConfig::default()
        };
        println!("k={k:<4} top-1 {:.2}%", 100.0 * knn_top1(&train, &val, cfg)?);
    }
    Ok(())
}
