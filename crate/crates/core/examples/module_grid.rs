//! A reduced module-combination grid: Pooler cells only, small data, two
//! seeds. The full grid is `grounder grid`.

use grounding::cli::{run_grid, Combination, RunConfig};
use grounding::encoder::Variant;
use grounding::synthbench::{GeneratorConfig, NoiseConfig};

fn main() -> grounding::Result<()> {
    let mut cfg = RunConfig {
        generator: GeneratorConfig {
            n_entries: 500,
            ..GeneratorConfig::default()
        },
        noise: NoiseConfig::default(),
        n_queries: 2000,
        ..RunConfig::default()
    };
    cfg.train.steps = 300;
    cfg.train.batch_size = 64;
    cfg.train.lr = 3e-3;

    let combos: Vec<Combination> = Combination::all().into_iter().filter(|c| c.variant == Variant::Pooler).collect();
    let report = run_grid(&cfg, &combos, &[0, 1], 1, &|line| eprintln!("{line}"))?;
    print!("{}", report.to_tsv());
    Ok(())
}
