//! Scores the rule cascade on clean and increasingly noisy queries.

use grounding::baseline::{default_rules, RuleMatcher};
use grounding::synthbench::{entry_schema, evaluate, make_benchmark, query_schema, GeneratorConfig, NoiseConfig};

fn main() -> grounding::Result<()> {
    let gen = GeneratorConfig {
        n_entries: 5000,
        ..GeneratorConfig::default()
    };
    let rules = default_rules(&query_schema(), &entry_schema())?;
    for stage in &rules {
        println!("stage: {stage:?}");
    }
    for rate in [0.0, 0.03, 0.1, 0.2] {
        let noise = NoiseConfig {
            char_sub_rate: rate,
            ..NoiseConfig::default()
        };
        let bench = make_benchmark(&gen, &noise, 10_000, 0.2)?;
        let matcher = RuleMatcher::new(&bench.entries, rules.clone())?;
        let history = bench.visit_history();
        let m = evaluate(
            |q| matcher.match_query(q, &history).map(|id| vec![id]),
            &bench.test_queries(),
            &bench.gold,
            &[1],
        )?;
        println!("char_sub_rate {rate:.2}: top-1 {:.3}", m.top1_acc);
    }
    Ok(())
}
