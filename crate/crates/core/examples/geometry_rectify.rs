//! Quadrangle geometry on a synthetic scene: IoU against a perturbed copy,
//! the DLT homography, the aspect-ratio estimate and rectification.
//!
//! cargo run --release --example geometry_rectify -- [CLASS] [OUT.png]

use sdlnet::geometry::{estimate_aspect_ratio, estimate_homography_dlt, quad_iou, quad_iou_raster_oracle, rectify, Point2};
use sdlnet::synth::{DocClass, Sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let class: DocClass = args.next().unwrap_or_else(|| "P".into()).parse()?;
    let out = args.next().unwrap_or_else(|| "rectified.png".into());

    let sample = Sample::generate(class, 3, 256, 0.2)?;
    let label = sample.label;
    println!("{class} label {}", label.to_json());
    println!("area {:.1} px^2, convex {}, well formed {}", label.area(), label.is_convex(), label.is_well_formed());

    for shift in [0.0, 2.0, 8.0, 32.0] {
        let moved = label.translate(shift, shift / 2.0);
        let exact = quad_iou(&label, &moved).value;
        let raster = quad_iou_raster_oracle(&label, &moved, 512);
        println!("shift ({shift:4.1}, {:4.1}): IoU {exact:.5} (raster {raster:.5})", shift / 2.0);
    }

    let unit = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0), Point2::new(1.0, 1.0)];
    let h = estimate_homography_dlt(&unit, &label.corners())?;
    let error = unit.iter().zip(label.corners()).map(|(&u, c)| h.apply(u).distance(c)).fold(0.0, f64::max);
    println!("unit square -> label: max corner error {error:.2e} px");

    let style = class.style();
    println!("aspect ratio: estimated {:.3}, card {:.3}", estimate_aspect_ratio(&label)?, style.aspect_ratio());

    let (image, _) = rectify(&sample.image, &label, 120)?;
    image.save(&out)?;
    println!("rectified {}x{} written to {out}", image.width(), image.height());
    Ok(())
}
