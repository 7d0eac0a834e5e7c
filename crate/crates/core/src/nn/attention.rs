//! Multi-head self-attention used by both the encoder (on 120-d tokens,
//! shared between the vision and text streams) and the attention decoder
//! (on 512-d node features).

use crate::autodiff::{Tape, Var};
use crate::nn::params::{ParamStore, ParamVars};

pub fn init_mhsa(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_uniform(&format!("{prefix}.{w}"), &[d, d], d, seed);
    }
}

/// Self-attention over an (n, d) token matrix; the head outputs are
/// concatenated channel-wise and passed through the output projection.
pub fn mhsa(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var, n_heads: usize) -> Var {
    let d = tape.value(x).shape()[1];
    assert_eq!(d % n_heads, 0, "token dim {d} not divisible by {n_heads} heads");
    let dh = d / n_heads;
    let q = tape.matmul(x, pv.get(&format!("{prefix}.wq")));
    let k = tape.matmul(x, pv.get(&format!("{prefix}.wk")));
    let v = tape.matmul(x, pv.get(&format!("{prefix}.wv")));
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, pv.get(&format!("{prefix}.wo")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_matches_input() {
        let mut store = ParamStore::new();
        init_mhsa(&mut store, "enc.mhsa", 24, 1);
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = crate::autodiff::Tensor::zeros(IxDyn(&[5, 24]));
        x.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let xv = tape.leaf(x, false);
        let y = mhsa(&mut tape, &pv, "enc.mhsa", xv, 8);
        assert_eq!(tape.value(y).shape(), &[5, 24]);
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        // Self-attention with no positional input is equivariant under token
        // permutation.
        let mut store = ParamStore::new();
        init_mhsa(&mut store, "enc.mhsa", 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = crate::autodiff::Tensor::zeros(IxDyn(&[4, 16]));
        x.mapv_inplace(|_| rng.random_range(-1.0..1.0));

        let run = |input: crate::autodiff::Tensor, store: &ParamStore| {
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, store);
            let xv = tape.leaf(input, false);
            let y = mhsa(&mut tape, &pv, "enc.mhsa", xv, 4);
            tape.value(y).clone()
        };
        let y = run(x.clone(), &store);

        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..16 {
                xp[[i, c]] = x[[p, c]];
            }
        }
        let yp = run(xp, &store);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((yp[[i, c]] - y[[p, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_attention_for_constant_tokens() {
        // Identical tokens give identical outputs regardless of position.
        let mut store = ParamStore::new();
        init_mhsa(&mut store, "enc.mhsa", 16, 3);
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &store);
        let x = crate::autodiff::Tensor::from_elem(IxDyn(&[6, 16]), 0.3);
        let xv = tape.leaf(x, false);
        let y = mhsa(&mut tape, &pv, "enc.mhsa", xv, 8);
        let v = tape.value(y);
        for r in 1..6 {
            for c in 0..16 {
                assert!((v[[r, c]] - v[[0, c]]).abs() < 1e-12);
            }
        }
    }
}
