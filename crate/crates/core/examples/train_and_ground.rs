//! Trains a small dual encoder on a synthetic benchmark, indexes the
//! database, and grounds a few held-out queries.

use grounding::encoder::Variant;
use grounding::index::{build_index, ground};
use grounding::synthbench::{entry_schema, make_benchmark, query_schema, GeneratorConfig, NoiseConfig};
use grounding::train::{train, TrainConfig};

fn main() -> grounding::Result<()> {
    let gen = GeneratorConfig {
        n_entries: 1000,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let bench = make_benchmark(&gen, &NoiseConfig::default(), 5000, 0.1)?;

    let mut config = TrainConfig::new(query_schema(), entry_schema());
    config.encoder.variant = Variant::Pooler;
    config.batch_size = 128;
    config.steps = 1500;
    config.lr = 3e-3;
    config.log_every = 250;
    let mut log = std::io::stdout();
    let run = train(&config, &bench.queries, &bench.entries, &bench.train, Some(&mut log))?;

    let index = build_index(&run.checkpoint, &bench.entries, config.sim)?;
    let mut correct = 0;
    let test = bench.test_queries();
    for q in &test {
        let result = ground(&run.checkpoint, &index, q, 3)?;
        if result.top() == Some(bench.gold[&q.id].as_str()) {
            correct += 1;
        }
    }
    println!("top-1 on {} held-out queries: {:.3}", test.len(), correct as f64 / test.len() as f64);

    let q = test[0];
    println!("\n{:?}", q.present_fields().collect::<Vec<_>>());
    for hit in ground(&run.checkpoint, &index, q, 3)?.hits {
        let mark = if hit.entry_id == bench.gold[&q.id] { "*" } else { " " };
        println!("{mark} {} {:.4}", hit.entry_id, hit.score);
    }
    Ok(())
}
