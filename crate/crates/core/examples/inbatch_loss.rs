//! In-batch softmax loss and its gradient on a few hand-made score matrices.

use grounding::scoring::{inbatch_loss, loss_grad, score_matrix, ScoreMatrix, SimKind};
use ndarray::array;

fn main() -> grounding::Result<()> {
    let cases = [
        ("uniform", ScoreMatrix::new(array![[0.0, 0.0], [0.0, 0.0]])?),
        ("identity", ScoreMatrix::new(array![[1.0, 0.0], [0.0, 1.0]])?),
        ("confident", ScoreMatrix::new(array![[8.0, 0.0, 0.0], [0.0, 8.0, 0.0], [0.0, 0.0, 8.0]])?),
        ("swapped", ScoreMatrix::new(array![[0.0, 3.0], [3.0, 0.0]])?),
    ];
    for (name, s) in &cases {
        let w = vec![1.0; s.batch_size()];
        println!("{name:10} loss {:.6}", inbatch_loss(s, &w)?);
        println!("{}", loss_grad(s, &w)?);
    }

    let q = array![[1.0, 0.0], [0.0, 1.0]];
    let e = array![[0.9, 0.1], [0.2, 0.8]];
    for sim in SimKind::ALL {
        let s = score_matrix(sim, q.view(), e.view())?;
        println!("{sim}: loss {:.6}", inbatch_loss(&s, &[1.0, 1.0])?);
    }
    Ok(())
}
