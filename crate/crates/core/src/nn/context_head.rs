//! Semantic context head: a distance-kernel adjacency over the fused
//! tokens, one graph-convolution layer to a 64x512 context matrix, column
//! max-pooling, a gated recurrent unit over time, and a two-layer
//! classifier producing the per-frame accident probability.

use crate::autodiff::{Tape, Var};
use crate::nn::params::{ParamStore, ParamVars};

pub const CONTEXT_DIM: usize = 512;
pub const HIDDEN_DIM: usize = 256;
pub const HEAD_MID: usize = 64;

pub fn init_context_head(store: &mut ParamStore, token_dim: usize, seed: u64) {
    store.init_uniform("ctx.gcn.w", &[token_dim, CONTEXT_DIM], token_dim, seed);
    for gate in ["z", "r", "h"] {
        store.init_uniform(
            &format!("ctx.gru.w{gate}"),
            &[CONTEXT_DIM, HIDDEN_DIM],
            CONTEXT_DIM,
            seed,
        );
        store.init_uniform(
            &format!("ctx.gru.u{gate}"),
            &[HIDDEN_DIM, HIDDEN_DIM],
            HIDDEN_DIM,
            seed,
        );
        store.init_const(&format!("ctx.gru.b{gate}"), &[HIDDEN_DIM], 0.0);
    }
    store.init_uniform("ctx.fc1.w", &[HIDDEN_DIM, HEAD_MID], HIDDEN_DIM, seed);
    store.init_const("ctx.fc1.b", &[HEAD_MID], 0.0);
    store.init_uniform("ctx.fc2.w", &[HEAD_MID, 2], HEAD_MID, seed);
    store.init_const("ctx.fc2.b", &[2], 0.0);
}

/// A_ij = exp(-||x_i - x_j||_2) with unit self-loops, then row-normalized
/// into a stochastic matrix.
pub fn build_adjacency(tape: &mut Tape, tokens: Var) -> Var {
    let a = tape.pair_exp_neg_dist(tokens);
    tape.row_normalize(a)
}

/// One-layer graph convolution: S = relu(A . X . W).
pub fn gcn(tape: &mut Tape, tokens: Var, adjacency: Var, w: Var) -> Var {
    let ax = tape.matmul(adjacency, tokens);
    let axw = tape.matmul(ax, w);
    tape.relu(axw)
}

/// Columnwise max over the node dimension: (64 x 512) -> (1 x 512).
pub fn pool_max(tape: &mut Tape, s: Var) -> Var {
    tape.col_max(s)
}

/// Standard GRU cell, input 512 -> hidden 256. A saturated update gate
/// carries the previous hidden state through unchanged.
pub fn gru_step(tape: &mut Tape, pv: &ParamVars, s_t: Var, h_prev: Var) -> Var {
    let gate = |tape: &mut Tape, name: &str| -> Var {
        let xs = tape.matmul(s_t, pv.get(&format!("ctx.gru.w{name}")));
        let hs = tape.matmul(h_prev, pv.get(&format!("ctx.gru.u{name}")));
        let sum = tape.add(xs, hs);
        tape.add_row(sum, pv.get(&format!("ctx.gru.b{name}")))
    };
    let z = gate(tape, "z");
    let z = tape.sigmoid(z);
    let r = gate(tape, "r");
    let r = tape.sigmoid(r);
    let xs = tape.matmul(s_t, pv.get("ctx.gru.wh"));
    let rh = tape.mul(r, h_prev);
    let hs = tape.matmul(rh, pv.get("ctx.gru.uh"));
    let pre = tape.add(xs, hs);
    let pre = tape.add_row(pre, pv.get("ctx.gru.bh"));
    let cand = tape.tanh(pre);
    let carry = tape.mul(z, h_prev);
    let one_minus_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add_scalar(one_minus_z, 1.0);
    let update = tape.mul(one_minus_z, cand);
    tape.add(carry, update)
}

/// fc(256 -> 64) -> relu -> fc(64 -> 2) -> softmax; returns the (1 x 1)
/// accident-class probability.
pub fn accident_score(tape: &mut Tape, pv: &ParamVars, h_t: Var) -> Var {
    let mid = tape.matmul(h_t, pv.get("ctx.fc1.w"));
    let mid = tape.add_row(mid, pv.get("ctx.fc1.b"));
    let mid = tape.relu(mid);
    let logits = tape.matmul(mid, pv.get("ctx.fc2.w"));
    let logits = tape.add_row(logits, pv.get("ctx.fc2.b"));
    let probs = tape.softmax_rows(logits);
    tape.slice_cols(probs, 1, 2)
}
