//! Transformer block and strided convolution built from tape ops.

use rand::Rng;

use super::kernels::Real;
use super::params::{Binding, Group, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Parameter ids of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wqkv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// A [`BlockParams`] bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wqkv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockParams {
    pub fn register<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        group: Group,
        d: usize,
        d_ff: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            ln1_g: store.add_const(n("ln1.gamma"), group, &[d], 1.0)?,
            ln1_b: store.add_const(n("ln1.beta"), group, &[d], 0.0)?,
            wqkv: store.add_normal(n("attn.wqkv"), group, &[d, 3 * d], std, rng)?,
            wo: store.add_normal(n("attn.wo"), group, &[d, d], std, rng)?,
            bo: store.add_const(n("attn.bo"), group, &[d], 0.0)?,
            ln2_g: store.add_const(n("ln2.gamma"), group, &[d], 1.0)?,
            ln2_b: store.add_const(n("ln2.beta"), group, &[d], 0.0)?,
            w1: store.add_normal(n("ffn.w1"), group, &[d, d_ff], std, rng)?,
            b1: store.add_const(n("ffn.b1"), group, &[d_ff], 0.0)?,
            w2: store.add_normal(n("ffn.w2"), group, &[d_ff, d], std, rng)?,
            b2: store.add_const(n("ffn.b2"), group, &[d], 0.0)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.ln1_g, self.ln1_b, self.wqkv, self.wo, self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1,
            self.w2, self.b2,
        ]
    }

    pub fn bind(&self, b: &Binding) -> BlockVars {
        BlockVars {
            ln1_g: b.var(self.ln1_g),
            ln1_b: b.var(self.ln1_b),
            wqkv: b.var(self.wqkv),
            wo: b.var(self.wo),
            bo: b.var(self.bo),
            ln2_g: b.var(self.ln2_g),
            ln2_b: b.var(self.ln2_b),
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
        }
    }
}

/// Pre-norm block: `h = x + Wo·MHA(LN1 x)`, `out = h + FFN(LN2 h)` with a
/// GELU feed-forward. `causal` masks attention to future positions.
pub fn attention_layer<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    p: &BlockVars,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by head count {heads}"
        )));
    }
    let h = tape.layer_norm(x, p.ln1_g, p.ln1_b)?;
    let qkv = tape.matmul(h, p.wqkv)?;
    let a = tape.attention(qkv, heads, causal)?;
    let a = tape.linear(a, p.wo, Some(p.bo))?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, p.ln2_g, p.ln2_b)?;
    let h = tape.linear(h, p.w1, Some(p.b1))?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p.w2, Some(p.b2))?;
    tape.add(x, h)
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `[kernel·d_in × d_out]`, window-major.
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub kernel: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(format!("{prefix}.w"), group, &[kernel * d_in, d_out], std, rng)?,
            b: store.add_const(format!("{prefix}.b"), group, &[d_out], 0.0)?,
            kernel,
        })
    }

    pub fn bind(&self, b: &Binding) -> ConvVars {
        ConvVars {
            w: b.var(self.w),
            b: b.var(self.b),
            kernel: self.kernel,
        }
    }
}

/// Same-padded strided 1-D convolution over time followed by GELU.
/// Output length is `⌈T/stride⌉`.
pub fn conv1d_downsample<S: Real>(tape: &mut Tape<S>, x: Var, p: &ConvVars, stride: usize) -> Result<Var> {
    if tape.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyInput("conv1d_downsample"));
    }
    let cols = tape.im2col(x, p.kernel, stride)?;
    let y = tape.linear(cols, p.w, Some(p.b))?;
    Ok(tape.gelu(y))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn block(d: usize) -> (ParamStore<f64>, BlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = BlockParams::register(&mut store, "b", Group::Llm, d, 2 * d, 0.3, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn single_frame_causal_equals_bidirectional() {
        let (store, p) = block(8);
        let x = Tensor::<f64>::from_fn(&[1, 8], |i| (i as f64 * 0.7).sin());
        let mut outs = Vec::new();
        for causal in [true, false] {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(&x, false);
            let y = attention_layer(&mut tape, xv, &p.bind(&b), 2, causal).unwrap();
            outs.push(tape.value(y).to_vec());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn causal_output_ignores_future_positions() {
        let (store, p) = block(8);
        let base = Tensor::<f64>::from_fn(&[5, 8], |i| (i as f64 * 0.37).cos());
        let mut perturbed = base.clone();
        for j in 0..8 {
            perturbed.data_mut()[3 * 8 + j] += 0.5;
        }
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(x, false);
            let y = attention_layer(&mut tape, xv, &p.bind(&b), 2, true).unwrap();
            tape.value(y).to_vec()
        };
        let (a, b) = (run(&base), run(&perturbed));
        assert_eq!(a[..3 * 8], b[..3 * 8]);
        assert_ne!(a[3 * 8..], b[3 * 8..]);
    }

    #[test]
    fn head_count_must_divide_width() {
        let (store, p) = block(8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(&Tensor::<f64>::zeros(&[2, 8]), false);
        assert!(matches!(
            attention_layer(&mut tape, x, &p.bind(&b), 3, false),
            Err(Error::Config(_))
        ));
    }
}
