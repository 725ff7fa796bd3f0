//! Parameter budget of the network, what each split point freezes, and a
//! checkpoint round trip.
//!
//! cargo run --release --example model_split_freeze -- [WIDTH] [SIZE]

use sdlnet::model::{load_checkpoint, save_checkpoint, ModelConfig, Part, SdlNet, SplitPoint};
use sdlnet::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let width: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.25);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);

    let mut model = SdlNet::new(ModelConfig::new(size, width), 1)?;
    print!("{}", model.config().to_kv_text());
    println!("{} parameters in {} tensors", model.parameter_count(), model.params().len());

    let part_total = |part: Part| -> usize {
        model.params().iter().zip(model.param_info()).filter(|(_, i)| i.part == part).map(|(p, _)| p.value.len()).sum()
    };
    println!("  backbone   {:7}", part_total(Part::Backbone));
    for k in 0..4 {
        println!("  upsampler{k} {:7}", part_total(Part::Upsampler(k)));
    }
    println!("  head       {:7}", part_total(Part::Head));

    for split in SplitPoint::ALL {
        let (encoder, decoder) = model.split_parameters(split);
        println!(
            "split {split} ({:7}): encoder {:7}, trainable decoder {:7}",
            split.name(),
            model.count(&encoder),
            model.count(&decoder)
        );
    }

    model.freeze_encoder(SplitPoint::Up2);
    let trainable = model.params().iter().filter(|p| p.trainable).count();
    println!("frozen at {:?}: {trainable} of {} tensors trainable", model.frozen_split(), model.params().len());

    let path = std::env::temp_dir().join("sdlnet_example.ckpt");
    save_checkpoint(&model, &path)?;
    let restored = load_checkpoint(&path)?;
    let images = Tensor::full(&[1, 3, size, size], 0.5);
    let same = model.predict(&images)?.data() == restored.predict(&images)?.data();
    println!(
        "checkpoint {} ({} bytes): identical predictions {same}, encoder checksum {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        &restored.encoder_checksum(SplitPoint::Up2)[..16]
    );
    std::fs::remove_file(path)?;
    Ok(())
}
