//! Generates the synthetic multi-object dataset and writes it as an image
//! folder.
//!
//! ```text
//! cargo run --release --example make_synth -- [out_dir] [num_images]
//! ```

use logo_ssl::data::{export_image_folder, generate_synthetic, load_image_folder, SynthConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth-out".into());
    let num_images = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);

    let cfg = SynthConfig {
        num_images,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg)?;
    export_image_folder(&ds, &out)?;

    let names = ds.class_names.clone().unwrap_or_default();
    let mut counts = vec![0usize; names.len()];
    for s in &ds.samples {
        counts[s.label.unwrap_or(0)] += 1;
    }
    for (name, n) in names.iter().zip(&counts) {
        println!("{name:>9}: {n}");
    }
    if let Some(objects) = &ds.objects {
        println!("image 0 objects (top, left, h, w, class):");
        for b in &objects[0] {
            println!("  {} {} {} {} {}", b.top, b.left, b.height, b.width, names[b.class]);
        }
    }

    let back = load_image_folder(&out)?;
    println!("wrote {} images to {out}, reloaded {}", ds.len(), back.len());
    Ok(())
}
