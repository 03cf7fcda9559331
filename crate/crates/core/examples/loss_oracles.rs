//! The four training losses on hand-sized inputs, with their values worked out by hand.

use headmorph::hpm::MaskHierarchy;
use headmorph::imgcore::{AugmentationRecord, BinaryMask};
use headmorph::losses::{consistency, rotation_ce, seg_partial_ce, soft_ce, ProbMap, SoftLabel};

fn main() -> headmorph::Result<()> {
    // 1x3 strip: confident head, ignored ring, background
    let base = BinaryMask::new(1, 3, vec![true, false, false])?;
    let outer = BinaryMask::new(1, 3, vec![true, true, false])?;
    let hier = MaskHierarchy::new(vec![base, outer.clone()], outer)?;
    let p = ProbMap::new(1, 3, vec![0.9, 0.5, 0.2])?;
    let seg = seg_partial_ce(&p, &hier)?;
    println!(
        "seg  {:.6}  (-(ln 0.9 + ln 0.8) / 3 = {:.6})",
        seg.value,
        -(0.9f64.ln() + 0.8f64.ln()) / 3.0
    );

    let id = AugmentationRecord::identity();
    let a = ProbMap::new(1, 2, vec![0.8, 0.1])?;
    let b = ProbMap::new(1, 2, vec![0.6, 0.4])?;
    println!(
        "con  {:.6}  ((0.2^2 + 0.3^2) / 2 = 0.065)",
        consistency(&a, &b, &id, &id)?.value
    );

    let rot = rotation_ce(&[0.0, 0.0, 0.0, 0.0], 2)?;
    println!("rot  {:.6}  (ln 4 = {:.6})", rot.value, 4f64.ln());

    let label = SoftLabel::new(0, 1, false, 0.85)?;
    let soft = soft_ce(&[0.7, 0.2, 0.1], &label)?;
    println!(
        "soft {:.6}  (-(0.85 ln 0.7 + 0.15 ln 0.2) = {:.6})",
        soft.value,
        -(0.85 * 0.7f64.ln() + 0.15 * 0.2f64.ln())
    );
    Ok(())
}
