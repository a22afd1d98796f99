//! Prints one record under every separator/mask layout.

use grounding::records::{Record, Schema, Side};
use grounding::serialize::{build_vocab, render, serialize, MaskMode, SepMode};

fn main() -> grounding::Result<()> {
    let query = Schema::new(Side::Query, ["name", "phone", "address"])?;
    let entry = Schema::new(Side::Entry, ["name", "phone", "address", "street"])?;
    let vocab = build_vocab(&query, &entry);
    println!("vocabulary: {} ids ({} special)", vocab.size(), vocab.specials().len());

    let record = Record::new("q1").with("name", "Gold Cafe").with("address", "Seoul 12");
    for sep in SepMode::ALL {
        for mask in MaskMode::ALL {
            let seq = serialize(&record, &query, sep, mask, &vocab, 128)?;
            println!("{sep:?}/{mask:?} ({} ids)\n  {}", seq.len(), render(&seq, &vocab)?);
        }
    }
    Ok(())
}
