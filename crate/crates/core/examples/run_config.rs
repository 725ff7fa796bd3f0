//! Drives the command layer from code: resolve a layered configuration,
//! generate a dataset, train, evaluate and rectify, all through the same
//! entry point as the `sdlnet` binary.
//!
//! cargo run --release --example run_config -- [WORK_DIR]

use std::io::stdout;
use std::path::PathBuf;

use sdlnet::cli::{execute, Command, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "run_config_example".into()));
    std::fs::create_dir_all(&work)?;
    let data = work.join("data");
    let ckpt = work.join("id.ckpt");

    let file = work.join("base.cfg");
    std::fs::write(&file, "# shared settings\nseed = 3\nsize = 32\nmix = 1,0,0,0,0\nmax_epochs = 40\nlearning_rate = 0.003\n")?;
    let layered = |extra: &[(&str, String)]| -> Result<RunConfig, Box<dyn std::error::Error>> {
        let overrides: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        Ok(RunConfig::resolve(Some(&file), &overrides, None)?)
    };

    let gen = layered(&[("n", "200".into()), ("out", data.display().to_string())])?;
    println!("resolved configuration:\n{}", gen.to_text());
    if !data.join("manifest.json").exists() {
        execute(Command::GenData, &gen, &mut stdout())?;
    }

    let train = layered(&[("data", data.display().to_string()), ("out", ckpt.display().to_string())])?;
    execute(Command::Train, &train, &mut stdout())?;

    let eval = layered(&[("data", data.display().to_string()), ("model", ckpt.display().to_string())])?;
    execute(Command::Eval, &eval, &mut stdout())?;

    let image = std::fs::read_dir(data.join("ID").join("test"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .ok_or("no test image")?;
    let rectify = layered(&[
        ("model", ckpt.display().to_string()),
        ("image", image.display().to_string()),
        ("out", work.join("rectified.png").display().to_string()),
    ])?;
    let outcome = execute(Command::Rectify, &rectify, &mut stdout())?;
    println!("rectify exit code {}", outcome.exit_code());
    Ok(())
}
