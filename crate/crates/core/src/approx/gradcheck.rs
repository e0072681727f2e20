use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::math;

use super::net::{SeqInput, SeqNet};
use super::params::ParameterSet;
use super::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a ReLU.
    pub skipped: usize,
}

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Compare tape gradients of `sum_k w_k * out_k` against central
/// differences on up to `per_tensor` random coordinates of every tensor.
pub fn finite_difference_check(
    net: &SeqNet,
    params: &ParameterSet,
    input: &SeqInput,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = input.len();
    let weights: Vec<f64> = (0..t * net.spec.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |p: &ParameterSet| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let out = net.build(&mut tape, p, input)?;
        let v = tape.value(out);
        Ok((v.data.iter().zip(&weights).map(|(a, b)| a * b).sum(), tape.relu_signature()))
    };
    let mut tape = Tape::new();
    let out = net.build(&mut tape, params, input)?;
    let weighted = tape.mul_const(out, weights.clone());
    let loss = tape.sum(weighted);
    let mut grad = params.zeros_like();
    tape.backward(loss, &mut grad)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut probe = params.clone();
    for meta in &params.tensors {
        let n = meta.numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for local in picks {
            let i = meta.offset + local;
            let orig = probe.values[i];
            probe.values[i] = orig + eps;
            let (plus, sig_plus) = eval(&probe)?;
            probe.values[i] = orig - eps;
            let (minus, sig_minus) = eval(&probe)?;
            probe.values[i] = orig;
            if sig_plus != sig_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad[i];
            let denom = math::abs(analytic).max(math::abs(numeric)).max(REL_FLOOR);
            let rel = math::abs(analytic - numeric) / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{Activation, AttentionScope, Matrix, NetworkSpec};
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn small_net_matches_finite_differences() {
        for seed in 0..3 {
            let spec = NetworkSpec {
                n_layers: 2,
                n_heads: 2,
                hidden: 8,
                context_tokens: 5,
                input_dims: vec![("r".to_string(), 1), ("s".to_string(), 4), ("a".to_string(), 1)],
                readout: "s".to_string(),
                output_dim: 1,
                activation: Activation::Relu,
                max_timestep: 8,
                scope: AttentionScope::Causal,
            };
            let (net, mut params) = SeqNet::init(spec, seed).unwrap();
            for v in params.tensor_mut("head.weight").unwrap() {
                *v *= 100.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let mut m = |c: usize| Matrix::from_vec(5, c, (0..5 * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let input = SeqInput {
                features: vec![m(1), m(4), m(1)],
                timesteps: vec![0, 1, 2, 3, 4],
                mask: vec![false, true, true, true, true],
            };
            let report = finite_difference_check(&net, &params, &input, 1e-4, 1000, seed).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
            assert!(report.checked > 500);
        }
    }
}
