//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use grounding::encoder::{Encoder, EncoderParams};
use grounding::records::Record;
use grounding::serialize::{MaskMode, SepMode, TokenSequence, Vocab, CLS, MASK, SEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ⟨g, encode(seq)⟩ evaluated directly through the forward pass.
fn probe(enc: &Encoder<f64>, seq: &TokenSequence, g: &[f64]) -> f64 {
    let y = enc.encode(seq).expect("forward");
    y.iter().zip(g).map(|(a, b)| a * b).sum()
}

/// Central finite differences of ⟨g, encode(seq)⟩ for every parameter.
pub fn finite_difference_grads(enc: &Encoder<f64>, seq: &TokenSequence, g: &[f64], eps: f64) -> EncoderParams<f64> {
    let mut grads = EncoderParams::<f64>::zeros(&enc.config);
    let mut work = enc.clone();
    let n_tensors = enc.params.tensors().len();
    for t in 0..n_tensors {
        let len = enc.params.tensors()[t].1.len();
        for i in 0..len {
            let orig = enc.params.tensors()[t].1[i];
            work.params.tensors_mut()[t].1[i] = orig + eps;
            let plus = probe(&work, seq, g);
            work.params.tensors_mut()[t].1[i] = orig - eps;
            let minus = probe(&work, seq, g);
            work.params.tensors_mut()[t].1[i] = orig;
            grads.tensors_mut()[t].1[i] = (plus - minus) / (2.0 * eps);
        }
    }
    grads
}

/// Largest per-tensor norm-wise relative error ‖a − n‖ / max(‖a‖, ‖n‖),
/// with the name of the tensor where it occurs. The denominator is floored at
/// 1e-6 of the whole gradient's norm so tensors whose exact gradient is zero
/// (the key bias) are not scored on rounding noise.
pub fn max_relative_error(analytic: &EncoderParams<f64>, numeric: &EncoderParams<f64>) -> (f64, &'static str) {
    let global = analytic.tensors().iter().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum::<f64>().sqrt();
    let floor = (1e-6 * global).max(1e-12);
    let mut worst = (0.0, "");
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn).max(floor);
        let rel = diff / denom;
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

pub fn random_sequence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TokenSequence {
    let len = rng.random_range(1..max_len);
    let mut ids = vec![grounding::serialize::CLS];
    for _ in 0..len {
        ids.push(rng.random_range(0..vocab as u32));
    }
    TokenSequence::from_ids(ids).expect("starts with CLS")
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Spelled-out serialization rule table: one expected token run per field.
pub fn rule_table_ids(record: &Record, fields: &[&str], vocab: &Vocab, sep: SepMode, mask: MaskMode) -> Vec<u32> {
    let mut out = vec![CLS];
    for &f in fields {
        let sep_tok = if sep == SepMode::Single { SEP } else { vocab.field_sep(f).unwrap() };
        match (record.get(f), mask) {
            (Some(v), _) => out.extend(v.bytes().map(u32::from)),
            (None, MaskMode::None) => {}
            (None, MaskMode::Single) => out.push(MASK),
            (None, MaskMode::Multi) => out.push(vocab.field_mask(f).unwrap()),
        }
        out.push(sep_tok);
    }
    out
}
