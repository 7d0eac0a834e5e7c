pub mod attention;
pub mod attention_decoder;
pub mod context_head;
pub mod encoders;
pub mod fusion;
pub mod params;

use crate::autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dropout context threaded through the forward pass. Holds an rng during
/// training; evaluation passes are deterministic identities.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    /// Inverted dropout: surviving activations are scaled by 1/(1-p) so the
    /// expected value matches evaluation mode.
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let mask = Tensor::from_shape_fn(tape.value(x).raw_dim(), |_| {
            if rng.random_bool(keep) {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}
