//! Affordance decoding: pooled image-side context is broadcast over the
//! points, fused with the point-side features and mapped to a probability.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, ConvStack, Init};

/// φ is clamped to `[PHI_EPS, 1 − PHI_EPS]` so losses stay finite.
pub const PHI_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: ConvStack,
    pub head: Conv1x1,
    channels: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize) -> Self {
        Self {
            fuse: ConvStack::new(store, init, "decoder.fuse", 2 * channels, &[channels, channels], true),
            head: Conv1x1::new(store, init, "decoder.head", channels, 1),
            channels,
        }
    }

    /// Pre-sigmoid scores `[1 × N]`.
    pub fn logits<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, f_ti: Var, f_tp: Var) -> Result<Var> {
        let c = self.channels;
        let (ri, ni) = tape.shape(f_ti);
        let (rp, np) = tape.shape(f_tp);
        if ri != c || rp != c || ni == 0 || np == 0 {
            return Err(Error::Shape(format!(
                "decoder expects [{c} × N] inputs, got F_ti {ri}x{ni} and F_tp {rp}x{np}"
            )));
        }
        let pooled = tape.mean_cols(f_ti);
        let context = tape.broadcast_cols(pooled, np);
        let cat = tape.concat_rows(&[context, f_tp]);
        let h = self.fuse.forward(tape, store, cat);
        Ok(self.head.forward(tape, store, h))
    }

    /// φ ∈ (0, 1)^N as a `[1 × N]` row.
    pub fn decode<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, f_ti: Var, f_tp: Var) -> Result<Var> {
        let logits = self.logits(tape, store, f_ti, f_tp)?;
        let phi = tape.sigmoid(logits);
        Ok(tape.clamp(phi, PHI_EPS, 1.0 - PHI_EPS))
    }
}
