//! Linear-probe accuracy on frozen backbone features.
//!
//! ```text
//! cargo run --release --example linear_probe -- [checkpoint] [probe_epochs]
//! ```

use logo_ssl::checkpoint::load_checkpoint;
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::eval::{linear_probe, FeatureBank, ProbeConfig, Split};
use logo_ssl::trainer::{resize_images, TrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut state = match args.next().filter(|a| a != "-") {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::new(TrainConfig::compact(Variant::Contrastive), 1000)?,
    };
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let size = state.config.augment.output_size_global;

    let train_ds = generate_synthetic(&SynthConfig {
        num_images: 1000,
        seed: 5,
        ..Default::default()
    })?;
    let val_ds = generate_synthetic(&SynthConfig {
        num_images: 500,
        seed: 6,
        ..Default::default()
    })?;
    let mut bank = |ds: &logo_ssl::data::Dataset, split| -> anyhow::Result<FeatureBank> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let images = resize_images(&ds.images(&idx)?, size);
        Ok(FeatureBank::new(&state.encoder.features(&images, 250)?, ds.labels(&idx)?, split)?)
    };
    let train = bank(&train_ds, Split::Train)?;
    let val = bank(&val_ds, Split::Val)?;

    let cfg = ProbeConfig {
        epochs,
        ..ProbeConfig::default()
    };
    let acc = linear_probe(&train, &val, cfg)?;
    println!("linear probe ({epochs} epochs on {}-d features): {:.2}%", train.dim(), 100.0 * acc);
    Ok(())
}
