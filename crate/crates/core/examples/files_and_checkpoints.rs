//! Writes a dataset container, runs a short reconstruction with periodic
//! checkpoints, reloads the last checkpoint and evaluates it.

use nfe_mri::commands::{self, ReconOptions, SynthOptions, CHECKPOINT_FILE, VOLUME_FILE};
use nfe_mri::config::RunConfig;
use nfe_mri::io::{Checkpoint, DatasetContainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("nfe-mri-example");
    let data = dir.join("data");
    commands::synth(
        &data,
        &SynthOptions {
            preset: "desk".into(),
            acceleration: 4.0,
            ..SynthOptions::default()
        },
    )?;
    print!("{}", commands::info(&data)?);

    let mut cfg = RunConfig::desk();
    cfg.iterations = 200;
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json())?;
    let out = dir.join("recon");
    commands::recon(
        &data,
        &out,
        &ReconOptions {
            config: Some(cfg_path),
            seed: Some(1),
            out_grid: Some("96x96".into()),
        },
    )?;

    let ck = Checkpoint::read(&out.join(CHECKPOINT_FILE))?;
    println!("checkpoint at iteration {} with config hash {}", ck.header.iteration, &ck.header.config_hash[..12]);
    let model = ck.model()?;
    let container = DatasetContainer::read(&data)?;
    let loss = nfe_mri::optimize::full_data_loss(&container.dataset, &model, ck.header.config.epsilon)?;
    println!("data loss of the restored model: {loss:.4e}");

    let report = commands::eval(&out.join(VOLUME_FILE), &data, &dir.join("metrics"));
    match report {
        Ok(r) => println!("SSIM {:.4}", r.ssim.mean),
        Err(e) => println!("eval refused the 96x96 volume against 64x64 truth: {e}"),
    }
    Ok(())
}
