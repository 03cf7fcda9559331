//! Pseudo-masks for a few synthetic crops, scored against the rendered head.

use headmorph::data::synth::{generate_crop, random_spec, FramePreset};
use headmorph::hpm::{hpm_pipeline, HpmParams};
use headmorph::imgcore::wrap_angle;

fn main() -> headmorph::Result<()> {
    let params = HpmParams::default();
    for s in 0..8u64 {
        let spec = random_spec((s % 5) as usize, FramePreset::Desk64, 0.05, 100 + s);
        let (img, truth) = generate_crop(&spec)?;
        let r = hpm_pipeline(&img, &params, s)?;
        let head = r.to_aligned(&truth.head);
        println!(
            "crop {s}: class {}, {} layers, base IoU {:.3}, orientation error {:5.1} deg, flags {:?}",
            truth.class_id,
            r.hierarchy.layers().len(),
            r.hierarchy.base().iou(&head)?,
            wrap_angle(r.rotation_applied + spec.pose).abs(),
            r.quality_flags
        );
    }
    Ok(())
}
