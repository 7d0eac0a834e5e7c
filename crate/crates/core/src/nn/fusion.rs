//! Text-to-vision shift fusion. Each layer concatenates the vision and text
//! token matrices into a 64-token block, runs position-aware cross-attention
//! against a globally summarized key/value matrix, splits the block back,
//! and applies a multiplicative cross-layer shift to the vision stream.

use crate::autodiff::{Tape, Var};
use crate::nn::encoders::{N_HEADS, N_TEXT_TOKENS, N_VISION_TOKENS, TOKEN_DIM};
use crate::nn::params::{ParamStore, ParamVars};
use crate::nn::Dropout;

pub const N_FUSED_TOKENS: usize = N_VISION_TOKENS + N_TEXT_TOKENS; // 64
pub const HEAD_DIM: usize = TOKEN_DIM / N_HEADS; // 15

pub fn init_fusion_layer(store: &mut ParamStore, layer: usize, seed: u64) {
    let p = format!("fus.l{layer}");
    store.init_uniform(&format!("{p}.mlp.w1"), &[TOKEN_DIM, TOKEN_DIM], TOKEN_DIM, seed);
    store.init_const(&format!("{p}.mlp.b1"), &[TOKEN_DIM], 0.0);
    store.init_uniform(&format!("{p}.mlp.w2"), &[TOKEN_DIM, 2 * TOKEN_DIM], TOKEN_DIM, seed);
    store.init_const(&format!("{p}.mlp.b2"), &[2 * TOKEN_DIM], 0.0);
    store.init_uniform(&format!("{p}.mlp.w3"), &[2 * TOKEN_DIM, HEAD_DIM], 2 * TOKEN_DIM, seed);
    store.init_const(&format!("{p}.mlp.b3"), &[HEAD_DIM], 0.0);
    for w in ["wq", "wk", "wv"] {
        store.init_uniform(&format!("{p}.{w}"), &[HEAD_DIM, HEAD_DIM], HEAD_DIM, seed);
    }
    store.init_uniform(&format!("{p}.pe"), &[N_FUSED_TOKENS, HEAD_DIM], HEAD_DIM, seed);
}

pub fn init_fusion(store: &mut ParamStore, layers: usize, seed: u64) {
    for l in 0..layers {
        init_fusion_layer(store, l, seed);
    }
}

/// Global summary: MLP over the fused tokens down to one head width,
/// giving the shared key/value matrix (64 x 15).
fn global_summary(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    fused: Var,
    dropout: &mut Dropout,
) -> Var {
    let h = tape.matmul(fused, pv.get(&format!("{prefix}.mlp.w1")));
    let h = tape.add_row(h, pv.get(&format!("{prefix}.mlp.b1")));
    let h = tape.relu(h);
    let h = dropout.apply(tape, h);
    let h = tape.matmul(h, pv.get(&format!("{prefix}.mlp.w2")));
    let h = tape.add_row(h, pv.get(&format!("{prefix}.mlp.b2")));
    let h = dropout.apply(tape, h);
    let h = tape.matmul(h, pv.get(&format!("{prefix}.mlp.w3")));
    tape.add_row(h, pv.get(&format!("{prefix}.mlp.b3")))
}

/// Position-aware cross-attention over the fused (64 x 120) block. Returns
/// the fused output and the per-head attention matrices (for invariant
/// tests).
pub fn paca(
    tape: &mut Tape,
    pv: &ParamVars,
    layer: usize,
    fused: Var,
    dropout: &mut Dropout,
) -> (Var, Vec<Var>) {
    assert_eq!(
        tape.value(fused).shape(),
        &[N_FUSED_TOKENS, TOKEN_DIM],
        "paca expects a (64 x 120) fused block"
    );
    let prefix = format!("fus.l{layer}");
    let summary = global_summary(tape, pv, &prefix, fused, dropout);
    let pe = pv.get(&format!("{prefix}.pe"));
    let key_base = tape.add(summary, pe);
    let k = tape.matmul(key_base, pv.get(&format!("{prefix}.wk")));
    let v = tape.matmul(summary, pv.get(&format!("{prefix}.wv")));
    let kt = tape.transpose(k);
    let mut heads = Vec::with_capacity(N_HEADS);
    let mut attns = Vec::with_capacity(N_HEADS);
    for h in 0..N_HEADS {
        let local = tape.slice_cols(fused, h * HEAD_DIM, (h + 1) * HEAD_DIM);
        let q_base = tape.add(local, pe);
        let q = tape.matmul(q_base, pv.get(&format!("{prefix}.wq")));
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (HEAD_DIM as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, v));
        attns.push(attn);
    }
    (tape.concat_cols(&heads), attns)
}

/// One shift-fusion layer with an injectable attention body; the public
/// entry point passes `paca`. Fused layout is [vision(49); text(15)].
pub fn t2i_sflayer_with(
    tape: &mut Tape,
    text_in: Var,
    vision_in: Var,
    body: impl FnOnce(&mut Tape, Var) -> Var,
) -> (Var, Var) {
    assert_eq!(tape.value(text_in).shape()[0], N_TEXT_TOKENS);
    assert_eq!(tape.value(vision_in).shape()[0], N_VISION_TOKENS);
    let fused = tape.concat_rows(&[vision_in, text_in]);
    let out = body(tape, fused);
    let vision_raw = tape.slice_rows(out, 0, N_VISION_TOKENS);
    let text_out = tape.slice_rows(out, N_VISION_TOKENS, N_FUSED_TOKENS);
    // Cross-layer shift: the layer's vision output is modulated by its own
    // vision input, v_out = paca_v * (1 + v_in).
    let shifted = tape.add_scalar(vision_in, 1.0);
    let vision_out = tape.mul(vision_raw, shifted);
    (text_out, vision_out)
}

pub fn t2i_sflayer(
    tape: &mut Tape,
    pv: &ParamVars,
    layer: usize,
    text_in: Var,
    vision_in: Var,
    dropout: &mut Dropout,
) -> (Var, Var) {
    t2i_sflayer_with(tape, text_in, vision_in, |tape, fused| {
        paca(tape, pv, layer, fused, dropout).0
    })
}

/// Per-layer (text, vision) pairs; index 0 is the encoder output.
pub struct FusionState {
    pub layer_outputs: Vec<(Var, Var)>,
}

impl FusionState {
    pub fn final_vision(&self) -> Var {
        self.layer_outputs.last().unwrap().1
    }

    pub fn final_text(&self) -> Var {
        self.layer_outputs.last().unwrap().0
    }
}

pub fn fusion_stack(
    tape: &mut Tape,
    pv: &ParamVars,
    text0: Var,
    vision0: Var,
    layers: usize,
    dropout: &mut Dropout,
) -> FusionState {
    assert!(layers >= 1, "fusion stack needs at least one layer");
    let mut outputs = vec![(text0, vision0)];
    let (mut text, mut vision) = (text0, vision0);
    for l in 0..layers {
        let (t, v) = t2i_sflayer(tape, pv, l, text, vision, dropout);
        outputs.push((t, v));
        text = t;
        vision = v;
    }
    FusionState {
        layer_outputs: outputs,
    }
}
