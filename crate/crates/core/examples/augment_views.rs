//! Draws the two global and two local views of one synthetic image and
//! saves them next to the original.
//!
//! ```text
//! cargo run --release --example augment_views -- [out_dir] [seed]
//! ```

use std::path::Path;

use logo_ssl::augment::{make_views, AugmentationConfig};
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn save(t: &Tensor<f32>, path: &Path) -> anyhow::Result<()> {
    let s = t.shape();
    let raw = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, raw).expect("buffer matches dims");
    img.save(path)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "views-out".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    std::fs::create_dir_all(&out)?;
    let out = Path::new(&out);

    let ds = generate_synthetic(&SynthConfig {
        num_images: 1,
        seed,
        ..Default::default()
    })?;
    let image = &ds.samples[0];
    let cfg = AugmentationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = make_views(image, &cfg, &mut rng)?;

    save(&image.pixels, &out.join("original.png"))?;
    let names = ["global1", "global2", "local1", "local2"];
    let tensors = [
        &views.global_views[0],
        &views.global_views[1],
        &views.local_views[0],
        &views.local_views[1],
    ];
    for ((name, t), r) in names.iter().zip(tensors).zip(&views.rects) {
        save(t, &out.join(format!("{name}.png")))?;
        println!(
            "{name}: rect top={} left={} {}x{} area={:.3}{}",
            r.top,
            r.left,
            r.height,
            r.width,
            r.area_fraction,
            if r.fallback { " (fallback)" } else { "" }
        );
    }
    println!("views written to {}", out.display());
    Ok(())
}
