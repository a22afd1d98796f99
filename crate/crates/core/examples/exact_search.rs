//! Builds an index over random vectors, searches it, and round-trips the
//! snapshot through a file.

use grounding::index::{load_index, save_index, IndexSnapshot};
use grounding::scoring::SimKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f32>> = (0..10_000).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ids: Vec<String> = (0..rows.len()).map(|i| format!("e{i:05}")).collect();
    let query = rows[42].clone();

    for sim in SimKind::ALL {
        let snap = IndexSnapshot::from_rows(sim, ids.clone(), &rows)?;
        let start = std::time::Instant::now();
        let hits = snap.search(&query, 5)?;
        println!("{sim} in {:?}", start.elapsed());
        for h in &hits.hits {
            println!("  {} {:.4}", h.entry_id, h.score);
        }
    }

    let dir = std::env::temp_dir().join("grounding-exact-search");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("random.gidx");
    let snap = IndexSnapshot::from_rows(SimKind::Nsd, ids, &rows)?;
    save_index(&snap, &path)?;
    let loaded = load_index(&path)?;
    assert_eq!(loaded.search(&query, 50)?, snap.search(&query, 50)?);
    println!("snapshot {} round-trips ({} entries)", path.display(), loaded.len());
    Ok(())
}
