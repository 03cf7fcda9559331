//! Generates a small labeled corpus, loads it back and splits it into folds.

use headmorph::data::synth::FramePreset;
use headmorph::data::{generate_corpus, load_dataset, make_folds, CorpusConfig};

fn main() -> headmorph::Result<()> {
    let dir = std::env::temp_dir().join("headmorph-synth-corpus");
    let cfg = CorpusConfig {
        n: 40,
        num_classes: 4,
        frame: FramePreset::Desk64,
        seed: 3,
        ..CorpusConfig::default()
    };
    let entries = generate_corpus(&cfg, &dir)?;
    let ds = load_dataset(&dir, 0.85)?;
    let dissent = ds.crops.iter().filter(|c| !c.soft_label.consensus).count();
    println!(
        "{} crops in {} ({} classes, {dissent} with a dissenting vote)",
        entries.len(),
        dir.display(),
        ds.num_classes()
    );
    let split = make_folds(&ds.strata(), 5, 0)?;
    for f in 0..split.k {
        let (train, test) = split.train_test(f);
        println!("fold {f}: {} train, {} test", train.len(), test.len());
    }
    Ok(())
}
