//! Retrains with nested query field sets and prints accuracy per set.

use grounding::cli::{cmd_ablate_fields, RunConfig};
use grounding::encoder::Variant;
use grounding::synthbench::GeneratorConfig;

fn main() -> grounding::Result<()> {
    let mut cfg = RunConfig {
        generator: GeneratorConfig {
            n_entries: 500,
            ..GeneratorConfig::default()
        },
        n_queries: 3000,
        ..RunConfig::default()
    };
    cfg.train.variant = Variant::Pooler;
    cfg.train.steps = 800;
    cfg.train.batch_size = 64;
    cfg.train.lr = 3e-3;

    let out = std::env::temp_dir().join("grounding-ablation");
    let report = cmd_ablate_fields(&cfg, &[0], &out)?;
    print!("{}", report.to_tsv());
    println!("checkpoints and reports in {}", out.display());
    Ok(())
}
