//! Encodes a quadrangle as four Gaussian corner heatmaps, adds noise and a
//! distractor peak, then decodes it with and without sub-pixel refinement.
//!
//! cargo run --release --example heatmap_decode -- [SIZE] [NOISE]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlnet::geometry::{decode_quadrangle, default_sigma, encode_targets, Point2, Quadrangle, DEFAULT_SCORE_THRESHOLD};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let noise: f32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.05);

    let s = size as f64;
    let quad = Quadrangle::new(
        Point2::new(0.21 * s, 0.18 * s),
        Point2::new(0.83 * s, 0.26 * s),
        Point2::new(0.15 * s, 0.77 * s),
        Point2::new(0.79 * s, 0.85 * s),
    );
    let sigma = default_sigma(size);
    println!("{size}x{size} heatmaps, sigma {sigma:.2} px");

    let clean = encode_targets(&quad, size, sigma);
    let mut noisy = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for c in 0..4 {
        for v in noisy.channel_mut(c) {
            *v = (*v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }
    // A weaker false peak in the TL channel.
    noisy.channel_mut(0)[size / 2 * size + size / 2] = 0.6;

    for (name, stack) in [("clean", &clean), ("noisy", &noisy)] {
        for refine in [false, true] {
            let d = decode_quadrangle(stack, DEFAULT_SCORE_THRESHOLD, refine);
            let err = d.quad.corners().iter().zip(quad.corners()).map(|(a, b)| a.distance(b)).fold(0.0, f64::max);
            println!(
                "{name} refine={refine:5}: max corner error {err:.3} px, document score {:.3}, valid {}",
                d.document_score(),
                d.valid
            );
        }
    }

    let weak = encode_targets(&quad, size, sigma);
    let mut faded = weak.clone();
    faded.channel_mut(3).iter_mut().for_each(|v| *v *= 0.2);
    let d = decode_quadrangle(&faded, DEFAULT_SCORE_THRESHOLD, true);
    println!("faded BR channel: scores {:?}, valid {}", d.scores, d.valid);
    Ok(())
}
