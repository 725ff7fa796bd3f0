//! Generates a small synthetic dataset, saves it as PNG + JSON files, and
//! loads it back.
//!
//! cargo run --release --example dataset_roundtrip -- [OUT_DIR] [N]

use std::path::PathBuf;

use sdlnet::synth::{class_counts, generate_dataset, load_dataset, read_manifest, save_dataset, DataConfig, DocClass, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "dataset_example".into()));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);

    let config = DataConfig { n, seed: 4, ..DataConfig::default() };
    println!("class counts for n = {n}: {:?} ({:?})", class_counts(n, &config.mix), DocClass::ALL.map(|c| c.name()));
    let data = generate_dataset(&config)?;
    save_dataset(&data, &out)?;

    let manifest = read_manifest(&out)?;
    println!("manifest version {}, per-class train/validation/test:", manifest.format_version);
    for (class, counts) in &manifest.counts {
        println!("  {class:4} {counts:?}");
    }

    let loaded = load_dataset(&out)?;
    let mut identical = true;
    for (a, b) in data.classes.iter().zip(&loaded.classes) {
        for split in [Split::Train, Split::Validation, Split::Test] {
            identical &= a.splits.get(split) == b.splits.get(split);
        }
    }
    println!("reloaded from {}: identical samples {identical}", out.display());

    let first = &loaded.classes[0].splits.train[0];
    println!("first {} sample: seed {}, label {}", first.class, first.seed, first.label.to_json());
    Ok(())
}
