//! Renders one scene per document class, an augmented copy, and the
//! rectification of the ground-truth label.
//!
//! cargo run --release --example synth_gallery -- [OUT_DIR] [SIZE]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdlnet::geometry::rectify;
use sdlnet::synth::{augment, DocClass, Sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "gallery".into()));
    let size: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(128);
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for class in DocClass::ALL {
        let sample = Sample::generate(class, 42, size, 0.15)?;
        sample.image.save(out.join(format!("{class}_scene.png")))?;
        let (aug, _) = augment(&sample, &mut rng);
        aug.image.save(out.join(format!("{class}_augmented.png")))?;
        let (flat, _) = rectify(&sample.image, &sample.label, size / 2)?;
        flat.save(out.join(format!("{class}_rectified.png")))?;
        println!("{class}: label {}", sample.label.to_json());
    }
    println!("wrote {}", out.display());
    Ok(())
}
