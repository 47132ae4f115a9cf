//! Graph-building helpers over the tape: dense layers, a single LSTM step,
//! multi-head attention, and the post-norm attention layer
//! `LN(a + FF(a))` with `a = LN(z + Attn(z, M))`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{Bindings, ParamStore};
use super::tape::{Tape, Var};
use super::Real;
use crate::error::Result;

/// `x @ w + b` with `b` broadcast over rows.
pub fn dense<R: Real>(tape: &mut Tape<R>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn dense_relu<R: Real>(tape: &mut Tape<R>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = dense(tape, x, w, b)?;
    Ok(tape.relu(y))
}

#[derive(Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

pub fn bind_dense<R: Real>(
    store: &ParamStore<R>,
    tape: &mut Tape<R>,
    prefix: &str,
    bindings: &mut Bindings,
) -> DenseVars {
    DenseVars {
        w: store.bind(tape, &format!("{prefix}.w"), bindings),
        b: store.bind(tape, &format!("{prefix}.b"), bindings),
    }
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// Register one LSTM layer's parameters. Gate layout along the 4H axis is
/// `[input | forget | candidate | output]`; the forget-gate bias starts at 1.
pub fn init_lstm<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = 1.0 / (input as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.wx"), input, 4 * hidden, bound, rng);
    let hbound = 1.0 / (hidden as f64).sqrt();
    store.insert_uniform(&format!("{prefix}.wh"), hidden, 4 * hidden, hbound, rng);
    let mut b = ndarray::Array2::zeros((1, 4 * hidden));
    b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(R::one());
    store.insert(&format!("{prefix}.b"), b);
}

pub fn bind_lstm<R: Real>(
    store: &ParamStore<R>,
    tape: &mut Tape<R>,
    prefix: &str,
    bindings: &mut Bindings,
) -> LstmVars {
    LstmVars {
        wx: store.bind(tape, &format!("{prefix}.wx"), bindings),
        wh: store.bind(tape, &format!("{prefix}.wh"), bindings),
        b: store.bind(tape, &format!("{prefix}.b"), bindings),
    }
}

/// One step of a single LSTM layer; callers stack layers.
pub fn lstm_step<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hidden = tape.value(h).ncols();
    let gx = tape.matmul(x, p.wx)?;
    let gh = tape.matmul(h, p.wh)?;
    let pre = tape.add(gx, gh)?;
    let gates = tape.add_row(pre, p.b)?;

    let i_pre = tape.slice_cols(gates, 0, hidden)?;
    let f_pre = tape.slice_cols(gates, hidden, hidden)?;
    let g_pre = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let o_pre = tape.slice_cols(gates, 3 * hidden, hidden)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let gg = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, gg)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub fn init_attn<R: Real>(store: &mut ParamStore<R>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    for part in ["q", "k", "v", "o"] {
        store.insert_dense(&format!("{prefix}.{part}"), dim, dim, rng);
    }
}

pub fn bind_attn<R: Real>(
    store: &ParamStore<R>,
    tape: &mut Tape<R>,
    prefix: &str,
    bindings: &mut Bindings,
) -> AttnVars {
    let b = |store: &ParamStore<R>, tape: &mut Tape<R>, bindings: &mut Bindings, n: &str| {
        store.bind(tape, &format!("{prefix}.{n}"), bindings)
    };
    AttnVars {
        wq: b(store, tape, bindings, "q.w"),
        bq: b(store, tape, bindings, "q.b"),
        wk: b(store, tape, bindings, "k.w"),
        bk: b(store, tape, bindings, "k.b"),
        wv: b(store, tape, bindings, "v.w"),
        bv: b(store, tape, bindings, "v.b"),
        wo: b(store, tape, bindings, "o.w"),
        bo: b(store, tape, bindings, "o.b"),
    }
}

/// Project memory rows to keys/values. Rows with `keep == false` are zeroed
/// before projection so their stored contents can never reach the output.
pub fn project_kv<R: Real>(
    tape: &mut Tape<R>,
    kv: Var,
    keep: &Arc<Vec<bool>>,
    p: &AttnVars,
) -> Result<(Var, Var)> {
    let kvz = tape.mask_rows(kv, Arc::clone(keep))?;
    let k = dense(tape, kvz, p.wk, p.bk)?;
    let v = dense(tape, kvz, p.wv, p.bv)?;
    Ok((k, v))
}

/// Scaled dot-product multi-head attention against precomputed keys/values.
pub fn multi_head_attention_kv<R: Real>(
    tape: &mut Tape<R>,
    query: Var,
    k: Var,
    v: Var,
    keep: &Arc<Vec<bool>>,
    p: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(query).ncols();
    if d % heads != 0 {
        return Err(crate::error::Error::Invalid(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let q = dense(tape, query, p.wq, p.bq)?;
    let mut outs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let qh = tape.slice_cols(q, hh * dh, dh)?;
        let kh = tape.slice_cols(k, hh * dh, dh)?;
        let vh = tape.slice_cols(v, hh * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(logits, scale);
        let weights = tape.softmax_rows(scaled, Some(Arc::clone(keep)))?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    dense(tape, cat, p.wo, p.bo)
}

/// Full multi-head attention: projects `kv` and attends.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<R>,
    query: Var,
    kv: Var,
    keep: &Arc<Vec<bool>>,
    p: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let (k, v) = project_kv(tape, kv, keep, p)?;
    multi_head_attention_kv(tape, query, k, v, keep, p, heads)
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

pub fn init_layer_norm<R: Real>(store: &mut ParamStore<R>, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gain"), ndarray::Array2::ones((1, dim)));
    store.insert(&format!("{prefix}.bias"), ndarray::Array2::zeros((1, dim)));
}

pub fn bind_layer_norm<R: Real>(
    store: &ParamStore<R>,
    tape: &mut Tape<R>,
    prefix: &str,
    bindings: &mut Bindings,
) -> LayerNormVars {
    LayerNormVars {
        gain: store.bind(tape, &format!("{prefix}.gain"), bindings),
        bias: store.bind(tape, &format!("{prefix}.bias"), bindings),
    }
}

#[derive(Clone, Copy)]
pub struct AttnLayerVars {
    pub attn: AttnVars,
    pub ln1: LayerNormVars,
    pub ff1: DenseVars,
    pub ff2: DenseVars,
    pub ln2: LayerNormVars,
}

/// Register one attention layer (attention + feedforward with inner width
/// `2 * dim` + two layer norms).
pub fn init_attn_layer<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha8Rng,
) {
    init_attn(store, &format!("{prefix}.attn"), dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    store.insert_dense(&format!("{prefix}.ff1"), dim, 2 * dim, rng);
    store.insert_dense(&format!("{prefix}.ff2"), 2 * dim, dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
}

pub fn bind_attn_layer<R: Real>(
    store: &ParamStore<R>,
    tape: &mut Tape<R>,
    prefix: &str,
    bindings: &mut Bindings,
) -> AttnLayerVars {
    AttnLayerVars {
        attn: bind_attn(store, tape, &format!("{prefix}.attn"), bindings),
        ln1: bind_layer_norm(store, tape, &format!("{prefix}.ln1"), bindings),
        ff1: bind_dense(store, tape, &format!("{prefix}.ff1"), bindings),
        ff2: bind_dense(store, tape, &format!("{prefix}.ff2"), bindings),
        ln2: bind_layer_norm(store, tape, &format!("{prefix}.ln2"), bindings),
    }
}

/// Post-norm attention layer over precomputed keys/values.
pub fn attention_layer_kv<R: Real>(
    tape: &mut Tape<R>,
    z: Var,
    k: Var,
    v: Var,
    keep: &Arc<Vec<bool>>,
    vars: &AttnLayerVars,
    heads: usize,
) -> Result<Var> {
    let attn = multi_head_attention_kv(tape, z, k, v, keep, &vars.attn, heads)?;
    let res1 = tape.add(z, attn)?;
    let a = tape.layer_norm(res1, vars.ln1.gain, vars.ln1.bias)?;
    let f1 = dense_relu(tape, a, vars.ff1.w, vars.ff1.b)?;
    let f2 = dense(tape, f1, vars.ff2.w, vars.ff2.b)?;
    let res2 = tape.add(a, f2)?;
    tape.layer_norm(res2, vars.ln2.gain, vars.ln2.bias)
}

/// Post-norm attention layer; projects `memory` to keys/values itself.
pub fn attention_layer<R: Real>(
    tape: &mut Tape<R>,
    z: Var,
    memory: Var,
    keep: &Arc<Vec<bool>>,
    vars: &AttnLayerVars,
    heads: usize,
) -> Result<Var> {
    let (k, v) = project_kv(tape, memory, keep, &vars.attn)?;
    attention_layer_kv(tape, z, k, v, keep, vars, heads)
}
