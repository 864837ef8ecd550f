//! Crashes a short run partway through its second epoch, resumes from the
//! last checkpoint and confirms the result is bit-identical to an
//! uninterrupted run.

use logo_ssl::checkpoint::{encode_checkpoint, load_checkpoint};
use logo_ssl::data::{generate_synthetic, SynthConfig};
use logo_ssl::encoder::Variant;
use logo_ssl::metrics::{MetricRecord, MetricsSink};
use logo_ssl::trainer::{fit, FitOptions, TrainConfig, TrainState};

/// Fails once the given step is reached, like a killed process.
struct CrashAt(u64);

impl MetricsSink for CrashAt {
    fn record(&mut self, rec: &MetricRecord) -> logo_ssl::Result<()> {
        match rec {
            MetricRecord::Step(s) if s.step >= self.0 => Err(logo_ssl::Error::Contract("simulated crash".into())),
            _ => Ok(()),
        }
    }
}

fn main() -> anyhow::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        num_images: 128,
        canvas_size: 32,
        ..Default::default()
    })?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut cfg = TrainConfig::compact(Variant::NonContrastive);
    cfg.batch_size = 32;
    cfg.epochs = 2;

    let mut full = TrainState::new(cfg.clone(), idx.len())?;
    fit(&mut full, &ds, &idx, &FitOptions::default(), &mut Vec::<MetricRecord>::new())?;

    let dir = tempfile::tempdir()?;
    let mut crashed = TrainState::new(cfg, idx.len())?;
    let opts = FitOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 1,
        ..Default::default()
    };
    let crash = CrashAt(crashed.steps_per_epoch + 2);
    let err = fit(&mut crashed, &ds, &idx, &opts, &mut { crash }).unwrap_err();
    println!("first run stopped: {err}");

    let mut resumed = load_checkpoint(dir.path().join("last.ckpt"))?;
    println!("resuming at epoch {} step {}", resumed.epoch, resumed.step);
    fit(&mut resumed, &ds, &idx, &FitOptions::default(), &mut Vec::<MetricRecord>::new())?;

    println!("uninterrupted encoder {}", full.encoder_digest());
    println!("resumed       encoder {}", resumed.encoder_digest());
    println!("checkpoints identical: {}", encode_checkpoint(&full) == encode_checkpoint(&resumed));
    Ok(())
}
