//! Patch embedding and the pre-norm transformer stem.
//!
//! The class token rides through the stem but is stripped from every
//! token map exposed to adapters, routers, distillation, and heads.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::Bound;
use crate::tape::{Tape, Var};

const LN_EPS: f64 = 1e-6;

/// Rearrange a `3 x H x W` image into an `n x (3 p^2)` matrix of
/// non-overlapping patches, row-major over the patch grid. Channel-major
/// within a patch.
pub fn image_to_patches(image: &Array3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::config(format!("expected 3 channels, got {c}")));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let gh = h / patch;
    let gw = w / patch;
    let mut out = Array2::<f64>::zeros((gh * gw, 3 * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for ch in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out[[row, col]] = image[[ch, gy * patch + py, gx * patch + px]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Embedded sequence: class token row 0, patch tokens rows 1..=n, learned
/// positions added to all rows.
pub fn embed(tape: &Tape, bound: &Bound<'_>, config: &ModelConfig, image: &Array3<f64>) -> Result<Var> {
    let (_, h, w) = image.dim();
    if h != config.image_size || w != config.image_size {
        return Err(Error::config(format!(
            "image {h}x{w} does not match configured size {}",
            config.image_size
        )));
    }
    let patches = image_to_patches(image, config.patch_size)?;
    let px = tape.constant2(patches);
    let projected = tape.matmul(px, bound.var("stem.patch.w"));
    let tokens = tape.add_row_broadcast(projected, bound.var("stem.patch.b"));
    let with_cls = tape.concat_rows(&[bound.var("stem.cls"), tokens]);
    Ok(tape.add(with_cls, bound.var("stem.pos")))
}

/// The patch-token part of the embedded sequence (drops the class row).
pub fn patch_rows(tape: &Tape, config: &ModelConfig, full: Var) -> Var {
    tape.slice_rows(full, 1, config.num_tokens())
}

fn attention(tape: &Tape, bound: &Bound<'_>, prefix: &str, x: Var, config: &ModelConfig) -> Var {
    let d = config.embed_dim;
    let heads = config.num_heads;
    let dh = d / heads;
    let qkv = tape.matmul(x, bound.var(&format!("{prefix}.w_qkv")));
    let qkv = tape.add_row_broadcast(qkv, bound.var(&format!("{prefix}.b_qkv")));
    let q = tape.slice_cols(qkv, 0, d);
    let k = tape.slice_cols(qkv, d, d);
    let v = tape.slice_cols(qkv, 2 * d, d);
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh);
        let kh = tape.slice_cols(k, hd * dh, dh);
        let vh = tape.slice_cols(v, hd * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&outs);
    let proj = tape.matmul(merged, bound.var(&format!("{prefix}.w_proj")));
    tape.add_row_broadcast(proj, bound.var(&format!("{prefix}.b_proj")))
}

fn mlp(tape: &Tape, bound: &Bound<'_>, prefix: &str, x: Var) -> Var {
    let h = tape.matmul(x, bound.var(&format!("{prefix}.w1")));
    let h = tape.add_row_broadcast(h, bound.var(&format!("{prefix}.b1")));
    let h = tape.gelu(h);
    let out = tape.matmul(h, bound.var(&format!("{prefix}.w2")));
    tape.add_row_broadcast(out, bound.var(&format!("{prefix}.b2")))
}

/// One pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn block(tape: &Tape, bound: &Bound<'_>, config: &ModelConfig, index: usize, x: Var) -> Var {
    let p = format!("stem.block{index}");
    let normed = tape.layer_norm(
        x,
        bound.var(&format!("{p}.ln1.gamma")),
        bound.var(&format!("{p}.ln1.beta")),
        LN_EPS,
    );
    let attn = attention(tape, bound, &format!("{p}.attn"), normed, config);
    let x = tape.add(x, attn);
    let normed = tape.layer_norm(
        x,
        bound.var(&format!("{p}.ln2.gamma")),
        bound.var(&format!("{p}.ln2.beta")),
        LN_EPS,
    );
    let m = mlp(tape, bound, &format!("{p}.mlp"), normed);
    tape.add(x, m)
}

/// Full stem pass. Returns the per-block sequences `[X_1 .. X_L]`
/// (class token included); fails with the offending level on any
/// non-finite activation.
pub fn forward(
    tape: &Tape,
    bound: &Bound<'_>,
    config: &ModelConfig,
    x0: Var,
) -> Result<Vec<Var>> {
    let mut states = Vec::with_capacity(config.depth);
    let mut x = x0;
    for level in 1..=config.depth {
        x = block(tape, bound, config, level - 1, x);
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite activation at stem level {level}"
            )));
        }
        states.push(x);
    }
    Ok(states)
}
