//! Trains a model from scratch on one synthetic class and reports test IoU.
//!
//! cargo run --release --example train_single_class -- [CLASS] [N] [EPOCHS] [SIZE]

use sdlnet::model::{ModelConfig, SdlNet};
use sdlnet::synth::{generate_dataset, DataConfig, DocClass};
use sdlnet::training::{evaluate, train_with_progress, ParamSelection, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let class: DocClass = args.next().unwrap_or_else(|| "ID".into()).parse()?;
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);

    let data = generate_dataset(&DataConfig { size: size as u32, ..DataConfig::single_class(class, n, 1) })?;
    let splits = data.class(class).expect("single-class dataset");
    println!(
        "{class}: {} train / {} validation / {} test at {size}x{size}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );

    let mut model = SdlNet::new(ModelConfig { input_size: size, ..ModelConfig::default() }, 1)?;
    let config = TrainConfig { max_epochs: epochs, input_size: size, seed: 1, ..TrainConfig::default() };
    let history = train_with_progress(&mut model, ParamSelection::All, splits, &config, |e| {
        println!("epoch {:4}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
    })?;
    println!(
        "best epoch {} of {} (early stop: {}), {:.1} s",
        history.best_epoch,
        history.epochs.len(),
        history.stopped_early,
        history.seconds
    );
    let m = evaluate(&model, &splits.test, 0.3)?;
    println!(
        "test IoU mean {:.3} std {:.3} median {:.3}; invalid {}/{}; mean document score {:.3}",
        m.iou_mean,
        m.iou_std,
        m.iou_median,
        m.invalid_count,
        splits.test.len(),
        m.score_min_mean
    );
    Ok(())
}
