//! Vision and text token encoders. A 224x224x3 frame is cut into 16x16
//! patches (14x14 grid, 768 channels), projected with a 1x1 stride-2 conv
//! down to a 7x7 grid of 120-d tokens, and flattened row-major into 49
//! tokens. Text is a trainable lookup table over the corpus vocabulary,
//! padded or truncated to 15 tokens. Both streams share one self-attention
//! block.

use crate::autodiff::{Tape, Var};
use crate::nn::attention::{init_mhsa, mhsa};
use crate::nn::params::{ParamStore, ParamVars};
use ndarray::{Array2, Array3};

pub const PATCH: usize = 16;
pub const IMG: usize = 224;
pub const GRID_FULL: usize = IMG / PATCH; // 14
pub const GRID_TOK: usize = 7;
pub const N_VISION_TOKENS: usize = GRID_TOK * GRID_TOK; // 49
pub const N_TEXT_TOKENS: usize = 15;
pub const EMBED_WIDE: usize = 768;
pub const TOKEN_DIM: usize = 120;
pub const N_HEADS: usize = 8;

pub fn init_encoder(store: &mut ParamStore, vocab_size: usize, seed: u64) {
    store.init_uniform(
        "enc.patch.w",
        &[EMBED_WIDE, 3, PATCH, PATCH],
        3 * PATCH * PATCH,
        seed,
    );
    store.init_const("enc.patch.b", &[EMBED_WIDE], 0.0);
    store.init_uniform("enc.proj.w", &[TOKEN_DIM, EMBED_WIDE, 1, 1], EMBED_WIDE, seed);
    store.init_const("enc.proj.b", &[TOKEN_DIM], 0.0);
    store.init_uniform("enc.token_table", &[vocab_size, TOKEN_DIM], TOKEN_DIM, seed);
    init_mhsa(store, "enc.mhsa", TOKEN_DIM, seed);
}

/// Conv-based reference path, kept for shape conformance: 3x224x224 ->
/// 768x14x14 -> 120x7x7 -> 49x120. Returns (wide grid, token grid, tokens).
pub fn patch_embed_full(tape: &mut Tape, pv: &ParamVars, img: &Array3<f64>) -> (Var, Var, Var) {
    assert_eq!(img.dim(), (3, IMG, IMG));
    let x = tape.constant(img.clone().into_dyn());
    let wide = tape.conv2d(x, pv.get("enc.patch.w"), PATCH, 0);
    let wide = tape.add_chan(wide, pv.get("enc.patch.b"));
    let grid = tape.conv2d(wide, pv.get("enc.proj.w"), 2, 0);
    let grid = tape.add_chan(grid, pv.get("enc.proj.b"));
    let flat = tape.reshape(grid, &[TOKEN_DIM, N_VISION_TOKENS]);
    let tokens = tape.transpose(flat);
    (wide, grid, tokens)
}

/// Patch 14x14-grid positions kept by the stride-2 projection, row-major.
fn kept_positions() -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(N_VISION_TOKENS);
    for gy in 0..GRID_TOK {
        for gx in 0..GRID_TOK {
            v.push((gy * 2, gx * 2));
        }
    }
    v
}

/// Fast path: the stride-2 projection only reads 49 of the 196 patches, and
/// patch selection commutes with the row-wise projections, so gather those
/// patches first and run two small matmuls.
pub fn patch_embed(tape: &mut Tape, pv: &ParamVars, img: &Array3<f64>) -> Var {
    assert_eq!(img.dim(), (3, IMG, IMG));
    let mut cols = Array2::<f64>::zeros((N_VISION_TOKENS, 3 * PATCH * PATCH));
    for (row, &(gy, gx)) in kept_positions().iter().enumerate() {
        let mut col = 0;
        for c in 0..3 {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    cols[[row, col]] = img[[c, gy * PATCH + dy, gx * PATCH + dx]];
                    col += 1;
                }
            }
        }
    }
    let patches = tape.constant(cols.into_dyn());
    let w1 = tape.reshape(pv.get("enc.patch.w"), &[EMBED_WIDE, 3 * PATCH * PATCH]);
    let w1t = tape.transpose(w1);
    let wide = tape.matmul(patches, w1t);
    let wide = tape.add_row(wide, pv.get("enc.patch.b"));
    let w2 = tape.reshape(pv.get("enc.proj.w"), &[TOKEN_DIM, EMBED_WIDE]);
    let w2t = tape.transpose(w2);
    let tok = tape.matmul(wide, w2t);
    tape.add_row(tok, pv.get("enc.proj.b"))
}

/// Token ids (already padded/truncated to 15) -> (15, 120) embeddings.
pub fn text_embed(tape: &mut Tape, pv: &ParamVars, token_ids: &[usize]) -> Var {
    assert_eq!(token_ids.len(), N_TEXT_TOKENS);
    tape.gather_rows(pv.get("enc.token_table"), token_ids)
}

/// Shared self-attention applied to either token stream.
pub fn encode_tokens(tape: &mut Tape, pv: &ParamVars, tokens: Var) -> Var {
    mhsa(tape, pv, "enc.mhsa", tokens, N_HEADS)
}
