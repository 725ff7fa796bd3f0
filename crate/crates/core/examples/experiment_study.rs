//! Both experiment protocols at toy scale, with a result cache so a second
//! invocation resumes instead of retraining. Writes `results.csv` and SVG
//! plots to the output directory. The defaults take several minutes on one core.
//!
//! cargo run --release --example experiment_study -- [OUT_DIR] [N] [EPOCHS]

use std::path::PathBuf;

use sdlnet::model::ModelConfig;
use sdlnet::synth::{generate_dataset, DataConfig};
use sdlnet::training::{
    generalization_summary, report, run_generalization_experiment, run_split_experiment, split_study_summary, ExperimentConfig,
    TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "study_example".into()));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(15);

    let size = 32;
    let data = generate_dataset(&DataConfig { n, seed: 1, size: size as u32, ..DataConfig::default() })?;
    let train = TrainConfig { max_epochs: epochs, input_size: size, learning_rate: 3e-3, ..TrainConfig::default() };
    let config = ExperimentConfig {
        model: ModelConfig::new(size, 0.25),
        seed: 1,
        pretrain: train.clone(),
        finetune: train,
        record_timing: false,
        ..ExperimentConfig::default()
    };

    let mut results = run_split_experiment(&data, &config, Some(&out))?;
    for class in split_study_summary(&results) {
        let splits: Vec<String> = class.split_medians.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
        println!("{:4} generic {:.3} | {}", class.holdout.name(), class.generic_median, splits.join(" "));
    }

    results.extend(run_generalization_experiment(&data, &config, Some(&out))?);
    let summary = generalization_summary(&results);
    println!("scratch {:?}, all other classes at 100% {:?}", summary.scratch_median, summary.largest_combination_full_median);
    for (fraction, medians) in &summary.by_fraction {
        let row: Vec<String> = medians.iter().map(|(k, m)| format!("{k}:{m:.3}")).collect();
        println!("fraction {fraction:.1}: {}", row.join(" "));
    }

    for path in report(&results, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
