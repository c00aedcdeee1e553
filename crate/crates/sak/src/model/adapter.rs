//! Residual bottleneck adapters and the per-teacher adapter path.
//!
//! Each path owns L+1 adapters, one beside the patch embedding and one
//! beside every stem block, chained as
//! `R_0 = a_0(Z_0); R_l = a_l(R_{l-1} + Z_l)`.

use crate::error::{Error, Result};
use crate::model::{AdapterParams, ModelConfig, TokenMap};
use crate::params::Bound;
use crate::tape::{Tape, Var};

/// `alpha * GELU(R W_down) W_up + R` on the tape.
pub fn apply(tape: &Tape, r_in: Var, w_down: Var, w_up: Var, alpha: Var) -> Var {
    let down = tape.matmul(r_in, w_down);
    let act = tape.gelu(down);
    let up = tape.matmul(act, w_up);
    let scaled = tape.mul_scalar(up, alpha);
    tape.add(scaled, r_in)
}

/// One adapter path: consumes `[Z_0 .. Z_L]` (patch tokens only) and
/// returns `[R_0 .. R_L]`.
pub fn path_forward(
    tape: &Tape,
    bound: &Bound<'_>,
    config: &ModelConfig,
    teacher: usize,
    z_levels: &[Var],
) -> Result<Vec<Var>> {
    if z_levels.len() != config.depth + 1 {
        return Err(Error::config(format!(
            "adapter path expects {} level inputs, got {}",
            config.depth + 1,
            z_levels.len()
        )));
    }
    let adapter = |tape: &Tape, level: usize, x: Var| {
        let p = format!("tsap{teacher}.a{level}");
        apply(
            tape,
            x,
            bound.var(&format!("{p}.w_down")),
            bound.var(&format!("{p}.w_up")),
            bound.var(&format!("{p}.alpha")),
        )
    };
    let mut out = Vec::with_capacity(z_levels.len());
    let mut r = adapter(tape, 0, z_levels[0]);
    out.push(r);
    for (level, &z) in z_levels.iter().enumerate().skip(1) {
        let merged = tape.add(r, z);
        r = adapter(tape, level, merged);
        out.push(r);
    }
    Ok(out)
}

/// Standalone application of one adapter to a token map. Used by tests
/// and by callers that hold explicit [`AdapterParams`].
pub fn apply_token_map(r_in: &TokenMap, params: &AdapterParams) -> Result<TokenMap> {
    let d = r_in.dim();
    if params.w_down.nrows() != d || params.w_up.ncols() != d {
        return Err(Error::config(format!(
            "adapter dims {:?}/{:?} incompatible with token dim {d}",
            params.w_down.shape(),
            params.w_up.shape()
        )));
    }
    if params.w_down.ncols() != params.w_up.nrows() {
        return Err(Error::config("adapter bottleneck mismatch".to_string()));
    }
    let tape = Tape::new();
    let r = tape.constant2(r_in.tokens.clone());
    let w_down = tape.constant2(params.w_down.clone());
    let w_up = tape.constant2(params.w_up.clone());
    let alpha = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), params.alpha));
    let out = apply(&tape, r, w_down, w_up, alpha);
    TokenMap::new(tape.value2(out), r_in.grid, r_in.level)
}
