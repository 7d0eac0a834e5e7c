//! Full per-clip forward pass wiring the encoders, fusion stack, context
//! head, and attention decoder together.

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::attention_decoder::{decode_attention, gaussian_smooth, init_decoder, normalize_map};
use crate::nn::context_head::{
    accident_score, build_adjacency, gcn, gru_step, init_context_head, HIDDEN_DIM,
};
use crate::nn::encoders::{
    encode_tokens, init_encoder, patch_embed, text_embed, N_TEXT_TOKENS, TOKEN_DIM,
};
use crate::nn::fusion::{fusion_stack, init_fusion};
use crate::nn::params::{ParamStore, ParamVars};
use crate::nn::Dropout;
use crate::synthdata::upsample_nearest_224;
use crate::text::Vocab;
use ndarray::{Array3, IxDyn};

pub struct CapModel {
    pub store: ParamStore,
    pub vocab: Vocab,
    pub t2i_layers: usize,
}

impl CapModel {
    pub fn new(vocab: Vocab, t2i_layers: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        init_encoder(&mut store, vocab.len(), seed);
        init_fusion(&mut store, t2i_layers, seed);
        init_context_head(&mut store, TOKEN_DIM, seed);
        init_decoder(&mut store, seed);
        store.assert_partition();
        Self {
            store,
            vocab,
            t2i_layers,
        }
    }
}

/// Everything the loss needs from one clip: per-frame probabilities and,
/// unless the decoder is ablated, normalized attention maps.
pub struct ClipForward {
    pub p_hats: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Run a clip of frames plus one text description through the network.
/// Frames are (3, 64, 64) or (3, 224, 224); smaller frames are upsampled.
pub fn forward_clip(
    tape: &mut Tape,
    pv: &ParamVars,
    frames: &[Array3<f64>],
    token_ids: &[usize],
    t2i_layers: usize,
    dropout: &mut Dropout,
    decode: bool,
) -> ClipForward {
    assert!(!frames.is_empty());
    assert_eq!(token_ids.len(), N_TEXT_TOKENS);
    let text_raw = text_embed(tape, pv, token_ids);
    let text0 = encode_tokens(tape, pv, text_raw);

    let mut p_hats = Vec::with_capacity(frames.len());
    let mut attention = Vec::new();
    let mut h = tape.constant(Tensor::zeros(IxDyn(&[1, HIDDEN_DIM])));
    for frame in frames {
        let img;
        let img = if frame.dim().1 == 224 {
            frame
        } else {
            img = upsample_nearest_224(frame);
            &img
        };
        let vis_raw = patch_embed(tape, pv, img);
        let vision0 = encode_tokens(tape, pv, vis_raw);
        let state = fusion_stack(tape, pv, text0, vision0, t2i_layers, dropout);
        let fused = tape.concat_rows(&[state.final_vision(), state.final_text()]);
        let adjacency = build_adjacency(tape, fused);
        let s = gcn(tape, fused, adjacency, pv.get("ctx.gcn.w"));
        let pooled = tape.col_max(s);
        h = gru_step(tape, pv, pooled, h);
        p_hats.push(accident_score(tape, pv, h));
        if decode {
            let map = decode_attention(tape, pv, s);
            let smoothed = gaussian_smooth(tape, map);
            attention.push(normalize_map(tape, smoothed));
        }
    }
    ClipForward { p_hats, attention }
}
