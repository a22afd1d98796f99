//! Interrupts a training run, saves it, resumes from the file, and checks
//! the result against an uninterrupted run.

use grounding::encoder::Variant;
use grounding::synthbench::{entry_schema, make_benchmark, query_schema, GeneratorConfig, NoiseConfig};
use grounding::train::{checkpoint_to_bytes, continue_training, load_checkpoint, save_checkpoint, train, TrainConfig, TrainData};

fn main() -> anyhow::Result<()> {
    let gen = GeneratorConfig {
        n_entries: 300,
        ..GeneratorConfig::default()
    };
    let bench = make_benchmark(&gen, &NoiseConfig::default(), 1000, 0.1)?;
    let mut config = TrainConfig::new(query_schema(), entry_schema());
    config.encoder.variant = Variant::Attentive;
    config.encoder.hidden = 32;
    config.encoder.out_dim = 16;
    config.batch_size = 8;
    config.steps = 30;

    let full = train(&config, &bench.queries, &bench.entries, &bench.train, None)?;

    let mut first_leg = config.clone();
    first_leg.steps = 12;
    let partial = train(&first_leg, &bench.queries, &bench.entries, &bench.train, None)?;
    let path = std::env::temp_dir().join("grounding-resume.gckpt");
    save_checkpoint(&partial.checkpoint, &path)?;
    println!("saved step {} to {}", partial.checkpoint.step, path.display());

    let loaded = load_checkpoint(&path)?;
    let data = TrainData::new(&bench.queries, &bench.entries, &bench.train)?;
    let mut resumed = continue_training(loaded, &data, 18, None)?;
    println!("resumed to step {}", resumed.checkpoint.step);

    let losses: Vec<f64> = partial.losses.iter().chain(&resumed.losses).copied().collect();
    resumed.checkpoint.config.steps = config.steps;
    println!("loss traces equal: {}", losses == full.losses);
    println!(
        "checkpoints equal: {}",
        checkpoint_to_bytes(&resumed.checkpoint)? == checkpoint_to_bytes(&full.checkpoint)?
    );
    Ok(())
}
