//! Student-teacher pretraining on pseudo-masked synthetic crops.

use headmorph::data::synth::{generate_crop, random_spec, FramePreset};
use headmorph::distill::{
    export_teacher_masks, pretrain, rotation_accuracy, DistillConfig, MaskSource, PretrainSample,
    StudentTeacherPair,
};
use headmorph::hpm::{hpm_pipeline, HpmParams};
use headmorph::tinynn::{Arch, Params};

fn main() -> headmorph::Result<()> {
    let size = 32;
    let mut crops = Vec::new();
    for i in 0..64u64 {
        let spec = random_spec((i % 4) as usize, FramePreset::Desk64, 0.05, 300 + i);
        let (img, truth) = generate_crop(&spec)?;
        crops.push((hpm_pipeline(&img, &HpmParams::default(), i)?, truth));
    }
    let ids: Vec<String> = (0..crops.len()).map(|i| format!("c{i:02}")).collect();
    let samples = crops
        .iter()
        .zip(&ids)
        .map(|((r, _), id)| {
            PretrainSample::new(
                id,
                &r.aligned_image,
                &r.hierarchy,
                Some(r.rotation_applied),
                size,
            )
        })
        .collect::<headmorph::Result<Vec<_>>>()?;
    let sources: Vec<MaskSource<'_>> = crops
        .iter()
        .zip(&ids)
        .map(|((r, _), id)| MaskSource {
            id,
            image: &r.aligned_image,
            fallback: r.hierarchy.base(),
        })
        .collect();
    let arch = Arch {
        in_channels: 1,
        widths: vec![8, 16, 32],
        decoder_width: 8,
        num_classes: 0,
    };
    let cfg = DistillConfig {
        fine_iterations: 150,
        coarse_iterations: 300,
        seed: 1,
        ..DistillConfig::default()
    };
    let mut pair = StudentTeacherPair::new(Params::init(&arch, 1)?, cfg.ema_decay)?;
    let (log, store) = pretrain(&mut pair, &samples, &cfg, |p| {
        export_teacher_masks(p, &sources, size, cfg.mask_threshold)
    })?;
    for row in log.iter().step_by(50) {
        println!(
            "iter {:3}  seg {:?}  con {:?}  rot {:?}",
            row.iteration, row.seg, row.con, row.rot
        );
    }
    let (mut teacher, mut pseudo) = (0.0, 0.0);
    for ((r, truth), id) in crops.iter().zip(&ids) {
        let head = r.to_aligned(&truth.head);
        teacher += store.get(id).expect("exported").iou(&head)?;
        pseudo += r.hierarchy.base().iou(&head)?;
    }
    let n = crops.len() as f64;
    println!(
        "mean head IoU: teacher {:.3}, pseudo-mask {:.3}",
        teacher / n,
        pseudo / n
    );
    println!(
        "teacher rotation accuracy {:.3}",
        rotation_accuracy(&pair.teacher_f32(), &samples)?
    );
    Ok(())
}
