//! Scores local crops from several images against one reference crop, by
//! embedding cosine and by the affinity regressor, and charts both.
//!
//! ```text
//! cargo run --release --example affinity_compare -- [checkpoint] [out_dir]
//! ```

use logo_ssl::augment::{crop_resize, sample_crop_rect};
use logo_ssl::checkpoint::load_checkpoint;
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::eval::{affinity_compare, CropMeta};
use logo_ssl::plot::bar_chart;
use logo_ssl::tensor::Tensor;
use logo_ssl::trainer::{TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut state = match args.next().filter(|a| a != "-") {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::new(TrainConfig::compact(Variant::Contrastive), 1)?,
    };
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "affinity-out".into()));
    std::fs::create_dir_all(&out)?;

    let ds = generate_synthetic(&SynthConfig {
        num_images: 4,
        seed: 3,
        ..Default::default()
    })?;
    let aug = state.config.augment.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut crop = |image: usize, id: String| -> anyhow::Result<(CropMeta, Tensor<f32>)> {
        let s = &ds.samples[image];
        let r = sample_crop_rect(&mut rng, (s.height(), s.width()), aug.local_scale, aug.aspect_ratio)?;
        let meta = CropMeta {
            id,
            image,
            top: r.top,
            left: r.left,
            height: r.height,
            width: r.width,
        };
        Ok((meta, crop_resize(&s.pixels, &r, aug.output_size_local)))
    };
    let reference = crop(0, "reference".into())?;
    let mut candidates = Vec::new();
    for i in 0..ds.len() {
        for j in 0..6 {
            candidates.push(crop(i, format!("img{i}_crop{j}"))?);
        }
    }

    let report = affinity_compare(&mut state.encoder, &mut state.regressor, (&reference.0, &reference.1), &candidates)?;
    print!("{}", report.to_text());

    // Crops from the reference image should score higher on average.
    for image in 0..ds.len() {
        let of: Vec<_> = report.scores.iter().filter(|s| s.meta.image == image).collect();
        let avg = |f: fn(&logo_ssl::eval::AffinityScore) -> f64| of.iter().map(|s| f(s)).sum::<f64>() / of.len() as f64;
        println!(
            "image {image}: mean cosine {:.3}, mean regressor {:.3}",
            avg(|s| s.cosine_norm),
            avg(|s| s.regressor_norm)
        );
    }

    let ids: Vec<String> = report.scores.iter().map(|s| s.meta.id.clone()).collect();
    let svg = bar_chart(
        &ids,
        &[
            ("cosine".into(), report.scores.iter().map(|s| s.cosine_norm).collect()),
            ("regressor".into(), report.scores.iter().map(|s| s.regressor_norm).collect()),
        ],
        "normalized similarity to the reference crop",
    );
    std::fs::write(out.join("affinity.svg"), svg)?;
    println!("chart written to {}", out.join("affinity.svg").display());
    Ok(())
}
