//! Driver-attention reconstruction: self-attention over the 64 context
//! nodes, reshape to an 8x8x512 grid, then an upsampling conv stack to a
//! nonnegative 64x64 map, followed by Gaussian smoothing and normalization
//! into a distribution.

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::attention::{init_mhsa, mhsa};
use crate::nn::context_head::CONTEXT_DIM;
use crate::nn::params::{ParamStore, ParamVars};
use ndarray::{Array2, IxDyn};

pub const MAP_SIZE: usize = 64;
const DEC_HEADS: usize = 8;

pub fn init_decoder(store: &mut ParamStore, seed: u64) {
    init_mhsa(store, "dec.mhsa", CONTEXT_DIM, seed);
    store.init_uniform("dec.conv1.w", &[64, CONTEXT_DIM, 3, 3], CONTEXT_DIM * 9, seed);
    store.init_const("dec.conv1.b", &[64], 0.0);
    store.init_const("dec.norm.gamma", &[64], 1.0);
    store.init_const("dec.norm.beta", &[64], 0.0);
    store.init_uniform("dec.conv2.w", &[16, 64, 3, 3], 64 * 9, seed);
    store.init_const("dec.conv2.b", &[16], 0.0);
    store.init_uniform("dec.conv3.w", &[1, 16, 5, 5], 16 * 25, seed);
    store.init_const("dec.conv3.b", &[1], 0.0);
}

/// (64 x 512) context -> nonnegative (64 x 64) map. Stage shapes:
/// 8x8x512 -> 8x8x64 -> 32x32x64 -> 32x32x16 -> 64x64x1.
pub fn decode_attention(tape: &mut Tape, pv: &ParamVars, s_t: Var) -> Var {
    assert_eq!(tape.value(s_t).shape(), &[64, CONTEXT_DIM]);
    let attended = mhsa(tape, pv, "dec.mhsa", s_t, DEC_HEADS);
    let chan_first = tape.transpose(attended);
    let grid = tape.reshape(chan_first, &[CONTEXT_DIM, 8, 8]);

    let x = tape.conv2d(grid, pv.get("dec.conv1.w"), 1, 1);
    let x = tape.add_chan(x, pv.get("dec.conv1.b"));
    assert_eq!(tape.value(x).shape(), &[64, 8, 8]);
    let x = tape.channel_norm(x, pv.get("dec.norm.gamma"), pv.get("dec.norm.beta"), 1e-5);
    let x = tape.relu(x);
    let x = tape.upsample_nearest(x, 4);
    assert_eq!(tape.value(x).shape(), &[64, 32, 32]);

    let x = tape.conv2d(x, pv.get("dec.conv2.w"), 1, 1);
    let x = tape.add_chan(x, pv.get("dec.conv2.b"));
    let x = tape.relu(x);
    assert_eq!(tape.value(x).shape(), &[16, 32, 32]);

    // Transposed 5x5 stride-2 conv, realized as zero insertion plus a
    // stride-1 conv, doubling 32 -> 64.
    let x = tape.zero_insert(x, 2, 1);
    assert_eq!(tape.value(x).shape(), &[16, 64, 64]);
    let x = tape.conv2d(x, pv.get("dec.conv3.w"), 1, 2);
    let x = tape.add_chan(x, pv.get("dec.conv3.b"));
    let x = tape.relu(x);
    assert_eq!(tape.value(x).shape(), &[1, MAP_SIZE, MAP_SIZE]);
    tape.reshape(x, &[MAP_SIZE, MAP_SIZE])
}

/// The normalized 3x3 Gaussian kernel with sigma = 1.5.
pub fn gaussian_kernel() -> [[f64; 3]; 3] {
    let sigma = 1.5f64;
    let mut k = [[0.0; 3]; 3];
    let mut sum = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 1.0, dx as f64 - 1.0);
            *v = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Smooth a (h x w) map with the Gaussian kernel under symmetric
/// (edge-inclusive) padding, which preserves total mass.
pub fn gaussian_smooth(tape: &mut Tape, map: Var) -> Var {
    let shape = tape.value(map).shape().to_vec();
    assert_eq!(shape.len(), 2);
    let as3 = tape.reshape(map, &[1, shape[0], shape[1]]);
    let padded = tape.reflect_pad(as3, 1);
    let k = gaussian_kernel();
    let mut kt = Tensor::zeros(IxDyn(&[1, 1, 3, 3]));
    for y in 0..3 {
        for x in 0..3 {
            kt[[0, 0, y, x]] = k[y][x];
        }
    }
    let kernel = tape.constant(kt);
    let out = tape.conv2d(padded, kernel, 1, 0);
    tape.reshape(out, &shape)
}

/// Scale a nonnegative map into a distribution; an all-zero map becomes
/// uniform.
pub fn normalize_map(tape: &mut Tape, map: Var) -> Var {
    let v = tape.value(map);
    assert!(
        v.iter().all(|&x| x >= 0.0),
        "normalize_map requires nonnegative entries"
    );
    if v.sum() == 0.0 {
        let n = v.len() as f64;
        let uniform = Tensor::from_elem(v.raw_dim(), 1.0 / n);
        return tape.constant(uniform);
    }
    tape.normalize_sum(map)
}

/// Plain-array counterpart used by metrics and data preparation.
pub fn normalize_map_array(map: &Array2<f64>) -> crate::Result<Array2<f64>> {
    if map.iter().any(|&x| x < 0.0) {
        return Err(crate::CapError::BadInput(
            "attention map has negative entries".into(),
        ));
    }
    let s = map.sum();
    if s == 0.0 {
        let n = map.len() as f64;
        return Ok(Array2::from_elem(map.raw_dim(), 1.0 / n));
    }
    Ok(map.mapv(|x| x / s))
}
