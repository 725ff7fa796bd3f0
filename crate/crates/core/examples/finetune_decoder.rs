//! Transfer to a new class: pre-train on four classes, then fine-tune only
//! the decoder on the fifth at every split point and compare test IoU.
//!
//! cargo run --release --example finetune_decoder -- [HOLDOUT] [N] [EPOCHS] [SIZE]

use sdlnet::model::{ModelConfig, SdlNet, SplitPoint};
use sdlnet::synth::{generate_dataset, DataConfig, DocClass};
use sdlnet::training::{evaluate, train, ParamSelection, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let holdout: DocClass = args.next().unwrap_or_else(|| "RP".into()).parse()?;
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);

    let data = generate_dataset(&DataConfig { n, seed: 1, size: size as u32, ..DataConfig::default() })?;
    let others: Vec<DocClass> = data.class_list().into_iter().filter(|&c| c != holdout).collect();
    let pretrain_data = data.select(&others)?;
    let target = data.class(holdout).ok_or("holdout class has no samples")?;

    let config = TrainConfig { max_epochs: epochs, input_size: size, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() };
    let mut generic = SdlNet::new(ModelConfig::new(size, 0.25), 1)?;
    let history = train(&mut generic, ParamSelection::All, &pretrain_data, &config)?;
    println!(
        "pre-trained on {} ({} samples) for {} epochs",
        DocClass::list_name(&others),
        pretrain_data.train.len(),
        history.epochs.len()
    );

    let base = evaluate(&generic, &target.test, 0.3)?;
    println!("generic model on {holdout}: median IoU {:.3}", base.iou_median);

    for split in SplitPoint::ALL {
        let mut model = generic.clone();
        let before = model.encoder_checksum(split);
        let h = train(&mut model, ParamSelection::Decoder(split), target, &config)?;
        let m = evaluate(&model, &target.test, 0.3)?;
        let (_, decoder) = model.split_parameters(split);
        println!(
            "split {split}: {:6} trainable, {:2} epochs, median IoU {:.3}, encoder unchanged {}",
            model.count(&decoder),
            h.epochs.len(),
            m.iou_median,
            model.encoder_checksum(split) == before
        );
    }
    Ok(())
}
