//! Compares the full objective with the no-local-term ablation and with a
//! plain cosine local measure on one seed, then charts the KNN curves.
//!
//! ```text
//! cargo run --release --example ablation -- [contrastive|noncontrastive] [epochs] [out_dir]
//! ```

use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::eval::KnnConfig;
use logo_ssl::metrics::{knn_curve, MetricRecord};
use logo_ssl::plot::{line_chart, Series};
use logo_ssl::trainer::{fit, FitOptions, LocalMeasure, Monitor, resize_images, TrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant = match args.next().as_deref() {
        None | Some("contrastive") => Variant::Contrastive,
        Some("noncontrastive") => Variant::NonContrastive,
        Some(other) => anyhow::bail!("unknown variant {other}"),
    };
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "ablation-out".into()));
    std::fs::create_dir_all(&out)?;

    let train = generate_synthetic(&SynthConfig {
        seed: 100,
        ..Default::default()
    })?;
    let val = generate_synthetic(&SynthConfig {
        num_images: 500,
        seed: 200,
        ..Default::default()
    })?;
    let base = TrainConfig::compact(variant);
    let size = base.augment.output_size_global;
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let idx = all(train.len());

    let runs = [
        ("full", base.lambda, LocalMeasure::Learned),
        ("lambda=0", 0.0, LocalMeasure::Learned),
        ("cosine local", base.lambda, LocalMeasure::Cosine),
    ];
    let mut series = Vec::new();
    for (label, lambda, measure) in runs {
        let mut cfg = base.clone();
        cfg.epochs = epochs;
        cfg.lambda = lambda;
        cfg.local_measure = measure;
        let monitor = Monitor {
            train_images: resize_images(&train.images(&idx)?, size),
            train_labels: train.labels(&idx)?,
            val_images: resize_images(&val.images(&all(val.len()))?, size),
            val_labels: val.labels(&all(val.len()))?,
            knn: KnnConfig::default(),
            every: 5,
        };

        let mut state = TrainState::new(cfg, idx.len())?;
        let mut log: Vec<MetricRecord> = Vec::new();
        let opts = FitOptions {
            monitor: Some(monitor),
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        fit(&mut state, &train, &idx, &opts, &mut log)?;
        let curve = knn_curve(&log);
        println!(
            "{label:>13}: final knn {:.2}% ({:.0}s)",
            100.0 * curve.last().map_or(0.0, |c| c.1),
            t0.elapsed().as_secs_f64()
        );
        series.push(Series {
            label: label.into(),
            points: curve.into_iter().map(|(s, a)| (s as f64, a)).collect(),
        });
    }
    let path = out.join("ablation.svg");
    std::fs::write(&path, line_chart(&series, &format!("{variant:?} ablation"), "step", "KNN top-1"))?;
    println!("chart written to {}", path.display());
    Ok(())
}
