//! Finite-difference verification of reverse-mode gradients.
//!
//! Checks run in `f64` through the same generic op code used for `f32`
//! training, so the comparison measures the backward formulas rather than
//! single-precision rounding in the difference quotient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{attention_layer, conv1d_downsample, BlockVars, ConvVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub seed: u64,
    /// Check at most this many (seeded-random) elements per leaf.
    pub max_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            seed: 0,
            max_per_leaf: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (leaf, element) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `Σ w ⊙ f(leaves)` (seeded Gaussian `w`)
/// with central differences on every leaf element.
pub fn grad_check<F>(leaves: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let out = build(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.to_vec(),
            None => vec![1.0; tape.value(out).len()],
        };
        let s = tape.weighted_sum(out, &w)?;
        Ok((tape, vars, s))
    };

    let (probe, _, _) = eval(leaves, None)?;
    let out_len = probe.value(Var(probe.len() - 2)).len();
    let weights: Vec<f64> = (0..out_len).map(|_| StandardNormal.sample(&mut rng)).collect();

    let (tape, vars, loss) = eval(leaves, Some(&weights))?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let analytic = grads.get(vars[li]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match opts.max_per_leaf {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for e in picks {
            let orig = work[li].data()[e];
            work[li].data_mut()[e] = orig + opts.eps;
            let (t_plus, _, l_plus) = eval(&work, Some(&weights))?;
            work[li].data_mut()[e] = orig - opts.eps;
            let (t_minus, _, l_minus) = eval(&work, Some(&weights))?;
            work[li].data_mut()[e] = orig;
            let (fp, fm) = (t_plus.scalar(l_plus), t_minus.scalar(l_minus));
            if !fp.is_finite() || !fm.is_finite() || !analytic[e].is_finite() {
                return Err(Error::NonFinite(format!("grad_check leaf {li} element {e}")));
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = rel_error(analytic[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (li, e);
            }
        }
    }
    Ok(report)
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A named differentiable op with the leaf shapes it is checked at.
pub struct GradCheckCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Builder,
}

impl GradCheckCase {
    fn new(
        name: &'static str,
        shapes: Vec<Vec<usize>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            shapes,
            build: Box::new(build),
        }
    }

    pub fn leaves(&self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| StandardNormal.sample(&mut rng)))
            .collect()
    }

    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        grad_check(&self.leaves(seed), &self.build, opts)
    }

    /// Runs the case with the backward pass scaled by `factor` (a
    /// deliberately wrong gradient), for testing the harness itself.
    pub fn run_faulty(&self, seed: u64, factor: f64) -> Result<GradCheckReport> {
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        grad_check(
            &self.leaves(seed),
            |tape: &mut Tape<f64>, v: &[Var]| {
                let y = (self.build)(tape, v)?;
                Ok(tape.grad_scale(y, factor))
            },
            opts,
        )
    }
}

fn block_vars(v: &[Var]) -> BlockVars {
    BlockVars {
        ln1_g: v[0],
        ln1_b: v[1],
        wqkv: v[2],
        wo: v[3],
        bo: v[4],
        ln2_g: v[5],
        ln2_b: v[6],
        w1: v[7],
        b1: v[8],
        w2: v[9],
        b2: v[10],
    }
}

fn block_shapes(t: usize, d: usize, ff: usize) -> Vec<Vec<usize>> {
    vec![
        vec![t, d],
        vec![d],
        vec![d],
        vec![d, 3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, ff],
        vec![ff],
        vec![ff, d],
        vec![d],
    ]
}

/// Every differentiable op of the tape, at small seeded shapes.
pub fn registered_ops() -> Vec<GradCheckCase> {
    vec![
        GradCheckCase::new("matmul", vec![vec![4, 5], vec![5, 3]], |t, v| t.matmul(v[0], v[1])),
        GradCheckCase::new("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        GradCheckCase::new("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        GradCheckCase::new("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], 2.0))),
        GradCheckCase::new("gelu", vec![vec![3, 5]], |t, v| Ok(t.gelu(v[0]))),
        GradCheckCase::new("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        GradCheckCase::new("attention_bidirectional", vec![vec![5, 24]], |t, v| {
            t.attention(v[0], 2, false)
        }),
        GradCheckCase::new("attention_causal", vec![vec![5, 24]], |t, v| t.attention(v[0], 2, true)),
        GradCheckCase::new("im2col", vec![vec![7, 3]], |t, v| t.im2col(v[0], 3, 2)),
        GradCheckCase::new("embedding", vec![vec![10, 4]], |t, v| t.embedding(v[0], &[3, 7, 3, 0])),
        GradCheckCase::new("concat_rows", vec![vec![2, 3], vec![3, 3]], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        GradCheckCase::new("slice_rows", vec![vec![5, 3]], |t, v| t.slice_rows(v[0], 1, 3)),
        GradCheckCase::new("cross_entropy_mean", vec![vec![3, 7]], |t, v| {
            t.cross_entropy_mean(v[0], &[1, 4, 6], &[true, false, true])
        }),
        GradCheckCase::new("attention_layer_bidirectional", block_shapes(5, 8, 16), |t, v| {
            attention_layer(t, v[0], &block_vars(&v[1..]), 2, false)
        }),
        GradCheckCase::new("attention_layer_causal", block_shapes(5, 8, 16), |t, v| {
            attention_layer(t, v[0], &block_vars(&v[1..]), 2, true)
        }),
        GradCheckCase::new(
            "conv1d_downsample",
            vec![vec![9, 4], vec![12, 6], vec![6]],
            |t, v| {
                let p = ConvVars {
                    w: v[1],
                    b: v[2],
                    kernel: 3,
                };
                conv1d_downsample(t, v[0], &p, 2)
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let case = registered_ops().into_iter().find(|c| c.name == "scale").unwrap();
        let r = case.run(0).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn sampling_limits_checked_elements() {
        let case = registered_ops().into_iter().find(|c| c.name == "matmul").unwrap();
        let opts = GradCheckOptions {
            max_per_leaf: Some(4),
            ..GradCheckOptions::default()
        };
        let r = grad_check(&case.leaves(0), &case.build, opts).unwrap();
        assert_eq!(r.checked, 8);
    }
}
