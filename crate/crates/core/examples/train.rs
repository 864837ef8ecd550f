//! Trains the compact encoder on synthetic data with periodic KNN
//! monitoring, a JSON-lines log and checkpoints.
//!
//! ```text
//! cargo run --release --example train -- [contrastive|noncontrastive] [epochs] [out_dir]
//! ```

use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::eval::KnnConfig;
use logo_ssl::metrics::{knn_curve, read_metrics, JsonLinesSink};
use logo_ssl::trainer::{fit, FitOptions, Monitor, TrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant = match args.next().as_deref() {
        None | Some("contrastive") => Variant::Contrastive,
        Some("noncontrastive") => Variant::NonContrastive,
        Some(other) => anyhow::bail!("unknown variant {other}"),
    };
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "train-out".into()));
    std::fs::create_dir_all(&out)?;

    let mut ds = generate_synthetic(&SynthConfig {
        num_images: 1000,
        canvas_size: 32,
        ..Default::default()
    })?;
    ds.hold_out(0.2, 0)?;
    let train = ds.split("train")?.to_vec();
    let val = ds.split("val")?.to_vec();

    let mut cfg = TrainConfig::compact(variant);
    cfg.epochs = epochs;
    let monitor = Monitor::from_dataset(&ds, &train, &val, cfg.augment.output_size_global, KnnConfig::default(), 1)?;
    let mut state = TrainState::new(cfg, train.len())?;
    println!(
        "{variant:?}: {} steps per epoch, lambda {}",
        state.steps_per_epoch, state.config.lambda
    );

    let log = out.join("metrics.jsonl");
    let _ = std::fs::remove_file(&log);
    let mut sink = JsonLinesSink::append(&log)?;
    let opts = FitOptions {
        monitor: Some(monitor),
        checkpoint_dir: Some(out.clone()),
        checkpoint_every: 1,
    };
    let t0 = std::time::Instant::now();
    fit(&mut state, &ds, &train, &opts, &mut sink)?;
    drop(sink);

    let (records, _) = read_metrics(&log)?;
    for (step, acc) in knn_curve(&records) {
        println!("step {step:>5}  knn top-1 {:.3}", acc);
    }
    println!("{:.1}s, checkpoints and log in {}", t0.elapsed().as_secs_f64(), out.display());
    Ok(())
}
