//! Soft-label tuning with the masking curriculum, printing the epoch log.

use headmorph::data::synth::{generate_crop, random_spec, FramePreset};
use headmorph::hpm::{hpm_pipeline, HpmParams};
use headmorph::losses::SoftLabel;
use headmorph::tinynn::{Arch, Params};
use headmorph::tune::{soft_tune, TuneConfig, TuneSample};

fn main() -> headmorph::Result<()> {
    let mut samples = Vec::new();
    for i in 0..96usize {
        let spec = random_spec(i % 4, FramePreset::Desk64, 0.05, 700 + i as u64);
        let (img, _) = generate_crop(&spec)?;
        let r = hpm_pipeline(&img, &HpmParams::default(), i as u64)?;
        // every fifth crop has a dissenting expert
        let label = if i % 5 == 0 {
            SoftLabel::new(i % 4, (i + 1) % 4, false, 0.85)?
        } else {
            SoftLabel::consensus(i % 4)
        };
        samples.push(TuneSample {
            id: format!("c{i:02}"),
            image: r.aligned_image,
            mask: r.hierarchy.base().clone(),
            label,
        });
    }
    let (train, val) = samples.split_at(72);
    let arch = Arch {
        in_channels: 1,
        widths: vec![8, 16, 32],
        decoder_width: 8,
        num_classes: 4,
    };
    let mut params = Params::<f32>::init(&arch, 5)?;
    let cfg = TuneConfig {
        epochs: 30,
        milestones: vec![25],
        seed: 2,
        ..TuneConfig::default()
    };
    for row in soft_tune(&mut params, train, Some(val), 32, &cfg)? {
        println!(
            "epoch {:2}  dilations {:2}  loss {:.4}  train {:.3}  val {:.3}",
            row.epoch,
            row.dilations,
            row.loss,
            row.train_accuracy,
            row.val_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
