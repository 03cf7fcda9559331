//! Test-time view averaging: the same classifier scored under each view policy.

use headmorph::data::synth::{generate_crop, random_spec, FramePreset};
use headmorph::hpm::{hpm_pipeline, HpmParams};
use headmorph::losses::SoftLabel;
use headmorph::tinynn::{Arch, Params};
use headmorph::tune::{evaluate, soft_tune, TTAPolicy, TuneConfig, TuneSample};

fn main() -> headmorph::Result<()> {
    let mut samples = Vec::new();
    for i in 0..120usize {
        let spec = random_spec(i % 4, FramePreset::Desk64, 0.05, 900 + i as u64);
        let (img, _) = generate_crop(&spec)?;
        let r = hpm_pipeline(&img, &HpmParams::default(), i as u64)?;
        let mask = r.hierarchy.base().clone();
        samples.push(TuneSample {
            id: format!("c{i:03}"),
            image: r.aligned_image,
            mask,
            label: SoftLabel::consensus(i % 4),
        });
    }
    let (train, test) = samples.split_at(80);
    let arch = Arch {
        in_channels: 1,
        widths: vec![8, 16, 32],
        decoder_width: 8,
        num_classes: 4,
    };
    let mut params = Params::<f32>::init(&arch, 2)?;
    let cfg = TuneConfig {
        epochs: 30,
        milestones: vec![25],
        seed: 3,
        ..TuneConfig::default()
    };
    soft_tune(&mut params, train, None, 32, &cfg)?;
    for name in ["identity", "flip", "rot4", "d4"] {
        let policy = TTAPolicy::by_name(name).expect("known policy");
        let (m, _) = evaluate(&params, test, &policy, cfg.end_dilations, 32)?;
        println!(
            "{name:8} ({} views)  accuracy {:.3}  recall {:.3}  precision {:.3}  f1 {:.3}",
            policy.views().len(),
            m.accuracy,
            m.recall,
            m.precision,
            m.f1
        );
    }
    Ok(())
}
