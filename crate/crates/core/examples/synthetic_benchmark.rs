//! Generates a small synthetic POI benchmark and shows a few noisy queries
//! next to the entries they belong to.

use grounding::synthbench::{make_benchmark, GeneratorConfig, NoiseConfig, PHONE, STREET};

fn main() -> grounding::Result<()> {
    let gen = GeneratorConfig {
        n_entries: 2000,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let bench = make_benchmark(&gen, &NoiseConfig::default(), 4000, 0.1)?;
    let missing = |f: &str| bench.entries.iter().filter(|e| e.get(f).is_none()).count();
    println!(
        "{} entries ({} without phone, {} without street), {} train / {} test queries",
        bench.entries.len(),
        missing(PHONE),
        missing(STREET),
        bench.train.len(),
        bench.test.len()
    );

    let by_id: std::collections::HashMap<&str, _> = bench.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    for q in bench.test_queries().into_iter().take(5) {
        let entry = by_id[bench.gold[&q.id].as_str()];
        println!("\nquery {}", q.id);
        for (f, v) in q.present_fields() {
            println!("  {f:16} {v}");
        }
        println!("entry {}", entry.id);
        for (f, v) in entry.present_fields() {
            println!("  {f:16} {v}");
        }
    }
    Ok(())
}
