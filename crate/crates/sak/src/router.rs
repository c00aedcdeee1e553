//! Per-task, per-level routers that produce one global gate vector over
//! the N+1 expert representations, and the weighted fusion of experts.
//!
//! Gate logits come from the teacher-agnostic representation: a two-layer
//! MLP scores each token, scores are averaged over the patch grid, and a
//! second MLP drives the noise magnitude for noisy gating:
//! `g = softmax(h + z * softplus(e))` with one standard-normal draw per
//! channel during training.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{randn2, zeros1, zeros2, Bound, ParamSet};
use crate::tape::{Tape, Var};

/// Gate weights for one (task, level) router call: nonnegative, sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    pub weights: Vec<f64>,
}

impl GateScores {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::numeric("gate weights must be nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!(
                "gate weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Hidden width of both router MLPs: d/4, floored at 1.
pub fn hidden_width(embed_dim: usize) -> usize {
    (embed_dim / 4).max(1)
}

/// Register one router's parameters. Final-layer weights start at zero so
/// the initial gates are uniform and every expert receives gradient.
pub fn init_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    task: &str,
    level: usize,
    embed_dim: usize,
    n_experts: usize,
) {
    let hidden = hidden_width(embed_dim);
    for mlp in ["score", "noise"] {
        let p = format!("router.{task}.l{level}.{mlp}");
        params.insert(
            format!("{p}.w1"),
            randn2(rng, embed_dim, hidden, 0.02).into_dyn(),
        );
        params.insert(format!("{p}.b1"), zeros1(hidden).into_dyn());
        params.insert(format!("{p}.w2"), zeros2(hidden, n_experts).into_dyn());
        params.insert(format!("{p}.b2"), zeros1(n_experts).into_dyn());
    }
}

fn mlp_logits(tape: &Tape, bound: &Bound<'_>, prefix: &str, z: Var) -> Var {
    let h = tape.matmul(z, bound.var(&format!("{prefix}.w1")));
    let h = tape.add_row_broadcast(h, bound.var(&format!("{prefix}.b1")));
    let h = tape.gelu(h);
    let out = tape.matmul(h, bound.var(&format!("{prefix}.w2")));
    let out = tape.add_row_broadcast(out, bound.var(&format!("{prefix}.b2")));
    // average the per-token scores into one global vector
    tape.mean_rows(out)
}

/// Output of one router call: the gate row vector plus the noise draw
/// it consumed (for replay in tests and logs).
pub struct RouterOut {
    /// `1 x (N+1)` gate node.
    pub gates: Var,
    pub noise: Option<Vec<f64>>,
}

/// Compute gates for `(task, level)` from the teacher-agnostic tokens
/// `z` (`n x d`). When `noise_rng` is set, one standard-normal draw per
/// channel scales the softplus noise term.
pub fn forward(
    tape: &Tape,
    bound: &Bound<'_>,
    task: &str,
    level: usize,
    z: Var,
    n_experts: usize,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<RouterOut> {
    let h = mlp_logits(tape, bound, &format!("router.{task}.l{level}.score"), z);
    let logits = match noise_rng {
        Some(rng) => {
            let e = mlp_logits(tape, bound, &format!("router.{task}.l{level}.noise"), z);
            let draws: Vec<f64> = (0..n_experts)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let z_const =
                ArrayD::from_shape_vec(ndarray::IxDyn(&[1, n_experts]), draws.clone()).unwrap();
            let sp = tape.softplus(e);
            let noise_term = tape.mul_const(sp, z_const);
            let logits = tape.add(h, noise_term);
            return finish(tape, logits, n_experts, Some(draws));
        }
        None => h,
    };
    finish(tape, logits, n_experts, None)
}

fn finish(tape: &Tape, logits: Var, n_experts: usize, noise: Option<Vec<f64>>) -> Result<RouterOut> {
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite router logits"));
    }
    let gates = tape.softmax_rows(logits);
    debug_assert_eq!(tape.value(gates).shape(), &[1, n_experts]);
    Ok(RouterOut { gates, noise })
}

/// Weighted sum of expert token maps under one gate row vector.
/// Expert 0 is the shared stem representation; experts 1..N are the
/// adapter-path outputs. All experts must share `n x d`.
pub fn mix(tape: &Tape, gates: Var, experts: &[Var]) -> Result<Var> {
    let gshape = tape.value(gates).shape().to_vec();
    if gshape != [1, experts.len()] {
        return Err(Error::config(format!(
            "gate width {gshape:?} does not match {} experts",
            experts.len()
        )));
    }
    let shape0 = tape.value(experts[0]).shape().to_vec();
    for (k, e) in experts.iter().enumerate().skip(1) {
        if tape.value(*e).shape() != shape0.as_slice() {
            return Err(Error::config(format!(
                "expert {k} shape mismatch: {:?} vs {:?}",
                tape.value(*e).shape(),
                shape0
            )));
        }
    }
    let mut acc: Option<Var> = None;
    for (k, &expert) in experts.iter().enumerate() {
        let gate_k = tape.slice_cols(gates, k, 1);
        let term = tape.mul_scalar(expert, gate_k);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// One row of the gate report: mean gate weight of `expert_id` for
/// `(task, level)` over an evaluation sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReportRow {
    pub task: String,
    pub level: usize,
    pub expert_id: usize,
    pub mean_weight: f64,
}

/// Serialize gate report rows as CSV (`task,level,expert_id,mean_weight`).
pub fn write_gate_csv<W: std::io::Write>(rows: &[GateReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{stream_rng, Stream};
    use ndarray::{array, Array2};

    fn router_set(d: usize, n_experts: usize) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(1, Stream::Init);
        init_params(&mut params, &mut rng, "t", 4, d, n_experts);
        params
    }

    #[test]
    fn zero_final_layer_gives_uniform_gates() {
        let params = router_set(8, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z = tape.constant2(Array2::from_shape_fn((6, 8), |(i, j)| {
            ((i + j) as f64).sin()
        }));
        let out = forward(&tape, &bound, "t", 4, z, 4, None).unwrap();
        let gates = tape.value2(out.gates);
        for k in 0..4 {
            assert!((gates[[0, k]] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_algebra_ln2_case() {
        // h = [ln 2, 0, 0, 0] must give [0.4, 0.2, 0.2, 0.2]
        let tape = Tape::new();
        let h = tape.constant2(array![[2.0_f64.ln(), 0.0, 0.0, 0.0]]);
        let gates = tape.softmax_rows(h);
        let g = tape.value2(gates);
        assert!((g[[0, 0]] - 0.4).abs() < 1e-12);
        for k in 1..4 {
            assert!((g[[0, k]] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance_of_gates() {
        let tape = Tape::new();
        let h = tape.constant2(array![[0.3, -1.0, 2.0]]);
        let shifted = tape.constant2(array![[0.3 + 5.0, -1.0 + 5.0, 2.0 + 5.0]]);
        let a = tape.value2(tape.softmax_rows(h));
        let b = tape.value2(tape.softmax_rows(shifted));
        for k in 0..3 {
            assert!((a[[0, k]] - b[[0, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_gates_replay_oracle() {
        let mut params = router_set(8, 3);
        // make logits non-degenerate
        let mut rng = stream_rng(3, Stream::Init);
        for name in ["router.t.l4.score.w2", "router.t.l4.noise.w2"] {
            *params.get_mut(name).unwrap() = randn2(&mut rng, 2, 3, 0.5).into_dyn();
        }
        let z_in = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 3 + j) as f64 * 0.21).cos());

        let mut noise_rng = stream_rng(77, Stream::RouterNoise);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z = tape.constant2(z_in.clone());
        let noisy = forward(&tape, &bound, "t", 4, z, 3, Some(&mut noise_rng)).unwrap();
        let observed = tape.value2(noisy.gates);
        let draws = noisy.noise.unwrap();

        // replay: noise-free h and e, then softmax(h + z * softplus(e))
        let tape2 = Tape::new();
        let bound2 = params.bind(&tape2);
        let z2 = tape2.constant2(z_in);
        let h = mlp_logits(&tape2, &bound2, "router.t.l4.score", z2);
        let e = mlp_logits(&tape2, &bound2, "router.t.l4.noise", z2);
        let hv = tape2.value2(h);
        let ev = tape2.value2(e);
        let logits: Vec<f64> = (0..3)
            .map(|k| hv[[0, k]] + draws[k] * crate::tape::softplus(ev[[0, k]]))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for k in 0..3 {
            assert!((observed[[0, k]] - exps[k] / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_normalized_with_and_without_noise() {
        let params = router_set(8, 5);
        for noisy in [false, true] {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let z = tape.constant2(Array2::from_elem((4, 8), 0.7));
            let mut rng = stream_rng(5, Stream::RouterNoise);
            let out = forward(
                &tape,
                &bound,
                "t",
                4,
                z,
                5,
                if noisy { Some(&mut rng) } else { None },
            )
            .unwrap();
            let gates = GateScores {
                weights: tape.value2(out.gates).row(0).to_vec(),
            };
            gates.validate().unwrap();
        }
    }

    #[test]
    fn mix_one_hot_selects_expert() {
        let tape = Tape::new();
        let gates = tape.constant2(array![[0.0, 0.0, 1.0]]);
        let e0 = tape.constant2(array![[1.0, 1.0]]);
        let e1 = tape.constant2(array![[2.0, 2.0]]);
        let e2 = tape.constant2(array![[3.0, -4.0]]);
        let fused = mix(&tape, gates, &[e0, e1, e2]).unwrap();
        assert_eq!(tape.value2(fused), array![[3.0, -4.0]]);
    }

    #[test]
    fn mix_identical_experts_returns_them() {
        let tape = Tape::new();
        let gates = tape.constant2(array![[0.2, 0.5, 0.3]]);
        let m = array![[0.4, -1.0], [2.0, 0.1]];
        let experts: Vec<Var> = (0..3).map(|_| tape.constant2(m.clone())).collect();
        let fused = mix(&tape, gates, &experts).unwrap();
        let out = tape.value2(fused);
        for (a, b) in out.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_two_experts_weighted_entrywise() {
        let tape = Tape::new();
        let gates = tape.constant2(array![[0.25, 0.75]]);
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let ea = tape.constant2(a.clone());
        let eb = tape.constant2(b.clone());
        let fused = mix(&tape, gates, &[ea, eb]).unwrap();
        let out = tape.value2(fused);
        for i in 0..2 {
            for j in 0..2 {
                assert!((out[[i, j]] - (0.25 * a[[i, j]] + 0.75 * b[[i, j]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_shape_mismatch_rejected() {
        let tape = Tape::new();
        let gates = tape.constant2(array![[0.5, 0.5]]);
        let e0 = tape.constant2(Array2::zeros((2, 2)));
        let e1 = tape.constant2(Array2::zeros((3, 2)));
        assert!(mix(&tape, gates, &[e0, e1]).is_err());
        let one = tape.constant2(Array2::zeros((2, 2)));
        assert!(mix(&tape, gates, &[one]).is_err());
    }
}
