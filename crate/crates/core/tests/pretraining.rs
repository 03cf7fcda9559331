use headmorph::data::synth::{generate_crop, random_spec, FramePreset, SyntheticTruth};
use headmorph::distill::{
    export_teacher_masks, pretrain, rotation_accuracy, DistillConfig, MaskSource, PretrainSample,
    StudentTeacherPair,
};
use headmorph::hpm::{hpm_pipeline, HpmParams, PseudoMaskResult};
use headmorph::losses::seg_partial_ce_logits;
use headmorph::tinynn::{decoder_forward, encoder_forward, fmap_from_image, Arch, Params};

const SIZE: usize = 32;

fn corpus(n: usize, first_seed: u64) -> Vec<(PseudoMaskResult, SyntheticTruth)> {
    (0..n)
        .map(|i| {
            let spec = random_spec(i % 4, FramePreset::Desk64, 0.05, first_seed + i as u64);
            let (img, truth) = generate_crop(&spec).unwrap();
            (
                hpm_pipeline(&img, &HpmParams::default(), i as u64).unwrap(),
                truth,
            )
        })
        .collect()
}

fn arch() -> Arch {
    Arch {
        in_channels: 1,
        widths: vec![8, 16, 32],
        decoder_width: 8,
        num_classes: 0,
    }
}

fn samples(data: &[(PseudoMaskResult, SyntheticTruth)]) -> Vec<PretrainSample> {
    data.iter()
        .enumerate()
        .map(|(i, (r, _))| {
            PretrainSample::new(
                &format!("c{i:03}"),
                &r.aligned_image,
                &r.hierarchy,
                Some(r.rotation_applied),
                SIZE,
            )
            .unwrap()
        })
        .collect()
}

/// One desk-scale pretraining on 200 crops checks both outputs: teacher masks
/// against the confident pseudo-mask, and the rotation head on 50 unseen crops.
#[test]
fn pretraining_refines_masks_and_learns_rotation() {
    let train = corpus(200, 9000);
    let held_out = corpus(50, 9500);
    let train_samples = samples(&train);
    let ids: Vec<String> = (0..train.len()).map(|i| format!("c{i:03}")).collect();
    let sources: Vec<MaskSource<'_>> = train
        .iter()
        .zip(&ids)
        .map(|((r, _), id)| MaskSource {
            id,
            image: &r.aligned_image,
            fallback: r.hierarchy.base(),
        })
        .collect();
    let cfg = DistillConfig {
        seed: 17,
        ..DistillConfig::default()
    };
    let mut pair =
        StudentTeacherPair::new(Params::init(&arch(), 5).unwrap(), cfg.ema_decay).unwrap();
    let (log, store) = pretrain(&mut pair, &train_samples, &cfg, |p| {
        export_teacher_masks(p, &sources, SIZE, cfg.mask_threshold)
    })
    .unwrap();
    assert_eq!(log.len(), cfg.fine_iterations + cfg.coarse_iterations);

    let (mut teacher_iou, mut pseudo_iou) = (0.0, 0.0);
    for ((r, truth), id) in train.iter().zip(&ids) {
        let head = r.to_aligned(&truth.head);
        teacher_iou += store.get(id).unwrap().iou(&head).unwrap();
        pseudo_iou += r.hierarchy.base().iou(&head).unwrap();
    }
    let n = train.len() as f64;
    let (teacher_iou, pseudo_iou) = (teacher_iou / n, pseudo_iou / n);
    assert!(
        teacher_iou >= pseudo_iou - 0.05,
        "teacher IoU {teacher_iou:.3} vs pseudo-mask IoU {pseudo_iou:.3}"
    );

    let acc = rotation_accuracy(&pair.teacher_f32(), &samples(&held_out)).unwrap();
    assert!(acc >= 0.9, "held-out rotation accuracy {acc:.3}");
}

/// Ignored-ring logits of a real crop's network output never reach the loss.
#[test]
fn ring_logits_do_not_affect_the_segmentation_loss() {
    let data = corpus(6, 9700);
    let params = Params::<f64>::init(&arch(), 3).unwrap();
    for s in samples(&data) {
        let enc = encoder_forward(&params, &fmap_from_image(&s.image)).unwrap();
        let logits = decoder_forward(&params, &enc).logits.data;
        let labels = s.hierarchy.confidence_labels();
        let ring = labels.iter().filter(|l| l.is_none()).count();
        assert!(ring > 0, "crop {} has no ignored ring", s.id);
        let before = seg_partial_ce_logits(SIZE, SIZE, &logits, &s.hierarchy).unwrap();
        let mutated: Vec<f64> = logits
            .iter()
            .zip(&labels)
            .map(|(&z, l)| if l.is_none() { -z * 7.0 + 3.0 } else { z })
            .collect();
        let after = seg_partial_ce_logits(SIZE, SIZE, &mutated, &s.hierarchy).unwrap();
        assert_eq!(before.value.to_bits(), after.value.to_bits());
        for (g, l) in after.grad.iter().zip(&labels) {
            if l.is_none() {
                assert_eq!(*g, 0.0);
            }
        }
    }
}
