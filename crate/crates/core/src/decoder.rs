//! Soft-attention LSTM decoder.
//!
//! One step maps `(V, y_{t-1}, h_{t-1}, c_{t-1})` to a next-word
//! distribution and the new LSTM state:
//!
//! ```text
//! e_i   = W_a · tanh(W_eh h + W_ev v_i + b_e) + b_a
//! α     = softmax(e)
//! β     = σ(W_β h + b_β)
//! φ     = β Σ α_i v_i
//! z     = [φ, E[y_{t-1}]]
//! h, c  = LSTM(z, h, c)
//! u     = W_u [φ, h] + E[y_{t-1}] + b_u
//! p     = softmax(W_p tanh(u) + b_p)
//! ```
//!
//! Initial state: `h₀ = tanh(W_h V̄ + b_h)`, `c₀ = tanh(W_c V̄ + b_c)` with
//! `V̄` the mean frame feature.
//!
//! All vectors are `1×d` rows and every weight is stored input-major, so a
//! product written `W x` above is computed as `x · W`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::text::SOS;

/// Decoder dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    /// D_v, width of each encoder feature vector.
    pub feature_dim: usize,
    /// D_h
    pub hidden_dim: usize,
    /// D_e; also the width of the output projection `u`.
    pub embed_dim: usize,
    /// D_a
    pub attention_dim: usize,
}

impl DecoderConfig {
    /// Desk-scale defaults with `D_a = D_h`.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        DecoderConfig {
            vocab_size,
            feature_dim,
            hidden_dim: 32,
            embed_dim: 24,
            attention_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("decoder.vocab_size", self.vocab_size),
            ("decoder.feature_dim", self.feature_dim),
            ("decoder.hidden_dim", self.hidden_dim),
            ("decoder.embed_dim", self.embed_dim),
            ("decoder.attention_dim", self.attention_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size <= crate::text::NUM_RESERVED {
            return Err(Error::config(
                "decoder.vocab_size",
                "must exceed the number of reserved tokens",
            ));
        }
        Ok(())
    }

    fn lstm_input_dim(&self) -> usize {
        self.feature_dim + self.embed_dim
    }
}

/// `W_h, b_h, W_c, b_c`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitParams<H> {
    pub w_h: H,
    pub b_h: H,
    pub w_c: H,
    pub b_c: H,
}

/// `W_a, W_eh, W_ev, b_e, b_a, W_β, b_β`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams<H> {
    /// `[D_a × 1]`
    pub w_a: H,
    /// `[D_h × D_a]`
    pub w_eh: H,
    /// `[D_v × D_a]`
    pub w_ev: H,
    /// `[1 × D_a]`
    pub b_e: H,
    /// `[1]`
    pub b_a: H,
    /// `[D_h × 1]`
    pub w_beta: H,
    /// `[1]`
    pub b_beta: H,
}

/// Fused gate weights in `i, f, g, o` column order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmParams<H> {
    /// `[(D_v + D_e) × 4D_h]`
    pub w_ih: H,
    /// `[D_h × 4D_h]`
    pub w_hh: H,
    /// `[1 × 4D_h]`
    pub bias: H,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputHeadParams<H> {
    /// Embedding table `E`, `[|vocab| × D_e]`, shared by the LSTM input and
    /// the residual term of `u`.
    pub embed: H,
    /// `[(D_v + D_h) × D_e]`
    pub w_u: H,
    pub b_u: H,
    /// `[D_e × |vocab|]`
    pub w_p: H,
    pub b_p: H,
}

/// All decoder parameters, as store ids (`H = ParamId`) or bound graph
/// leaves (`H = Var`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderParams<H> {
    pub init: InitParams<H>,
    pub attention: AttentionParams<H>,
    pub lstm: LstmParams<H>,
    pub head: OutputHeadParams<H>,
}

impl<H: Copy> DecoderParams<H> {
    pub fn map<K>(&self, mut f: impl FnMut(H) -> K) -> DecoderParams<K> {
        let i = &self.init;
        let a = &self.attention;
        let l = &self.lstm;
        let h = &self.head;
        DecoderParams {
            init: InitParams {
                w_h: f(i.w_h),
                b_h: f(i.b_h),
                w_c: f(i.w_c),
                b_c: f(i.b_c),
            },
            attention: AttentionParams {
                w_a: f(a.w_a),
                w_eh: f(a.w_eh),
                w_ev: f(a.w_ev),
                b_e: f(a.b_e),
                b_a: f(a.b_a),
                w_beta: f(a.w_beta),
                b_beta: f(a.b_beta),
            },
            lstm: LstmParams {
                w_ih: f(l.w_ih),
                w_hh: f(l.w_hh),
                bias: f(l.bias),
            },
            head: OutputHeadParams {
                embed: f(h.embed),
                w_u: f(h.w_u),
                b_u: f(h.b_u),
                w_p: f(h.w_p),
                b_p: f(h.b_p),
            },
        }
    }

    pub fn all(&self) -> Vec<H> {
        let mut out = Vec::with_capacity(19);
        self.map(|h| out.push(h));
        out
    }
}

impl DecoderParams<ParamId> {
    /// Register decoder parameters in `store`. Matrices are uniform in
    /// ±1/√fan_in, biases start at zero.
    pub fn init<T: Scalar>(cfg: &DecoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let (v, dv, dh, de, da) = (
            cfg.vocab_size,
            cfg.feature_dim,
            cfg.hidden_dim,
            cfg.embed_dim,
            cfg.attention_dim,
        );
        let g = Group::Decoder;
        let init = InitParams {
            w_h: store.add_matrix("decoder.init.w_h", g, &[dv, dh], dv, rng),
            b_h: store.add_zeros("decoder.init.b_h", g, &[1, dh]),
            w_c: store.add_matrix("decoder.init.w_c", g, &[dv, dh], dv, rng),
            b_c: store.add_zeros("decoder.init.b_c", g, &[1, dh]),
        };
        let attention = AttentionParams {
            w_a: store.add_matrix("decoder.attn.w_a", g, &[da, 1], da, rng),
            w_eh: store.add_matrix("decoder.attn.w_eh", g, &[dh, da], dh, rng),
            w_ev: store.add_matrix("decoder.attn.w_ev", g, &[dv, da], dv, rng),
            b_e: store.add_zeros("decoder.attn.b_e", g, &[1, da]),
            b_a: store.add_zeros("decoder.attn.b_a", g, &[1]),
            w_beta: store.add_matrix("decoder.attn.w_beta", g, &[dh, 1], dh, rng),
            b_beta: store.add_zeros("decoder.attn.b_beta", g, &[1]),
        };
        let din = cfg.lstm_input_dim();
        let lstm = LstmParams {
            w_ih: store.add_matrix("decoder.lstm.w_ih", g, &[din, 4 * dh], din, rng),
            w_hh: store.add_matrix("decoder.lstm.w_hh", g, &[dh, 4 * dh], dh, rng),
            bias: store.add_zeros("decoder.lstm.bias", g, &[1, 4 * dh]),
        };
        let head = OutputHeadParams {
            embed: store.add_matrix("decoder.head.embed", g, &[v, de], de, rng),
            w_u: store.add_matrix("decoder.head.w_u", g, &[dv + dh, de], dv + dh, rng),
            b_u: store.add_zeros("decoder.head.b_u", g, &[1, de]),
            w_p: store.add_matrix("decoder.head.w_p", g, &[de, v], de, rng),
            b_p: store.add_zeros("decoder.head.b_p", g, &[1, v]),
        };
        DecoderParams {
            init,
            attention,
            lstm,
            head,
        }
    }

    /// Look parameters up by their registered names.
    pub fn find<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let mut missing = None;
        let ids = Self::names().map(|name| {
            store.find(name).unwrap_or_else(|| {
                missing.get_or_insert(name);
                ParamId(usize::MAX)
            })
        });
        match missing {
            Some(name) => Err(Error::Checkpoint(format!("missing parameter {name}"))),
            None => Ok(ids),
        }
    }

    fn names() -> DecoderParams<&'static str> {
        DecoderParams {
            init: InitParams {
                w_h: "decoder.init.w_h",
                b_h: "decoder.init.b_h",
                w_c: "decoder.init.w_c",
                b_c: "decoder.init.b_c",
            },
            attention: AttentionParams {
                w_a: "decoder.attn.w_a",
                w_eh: "decoder.attn.w_eh",
                w_ev: "decoder.attn.w_ev",
                b_e: "decoder.attn.b_e",
                b_a: "decoder.attn.b_a",
                w_beta: "decoder.attn.w_beta",
                b_beta: "decoder.attn.b_beta",
            },
            lstm: LstmParams {
                w_ih: "decoder.lstm.w_ih",
                w_hh: "decoder.lstm.w_hh",
                bias: "decoder.lstm.bias",
            },
            head: OutputHeadParams {
                embed: "decoder.head.embed",
                w_u: "decoder.head.w_u",
                b_u: "decoder.head.b_u",
                w_p: "decoder.head.w_p",
                b_p: "decoder.head.b_p",
            },
        }
    }

    /// Bind every parameter into `graph`.
    pub fn bind<T: Scalar>(&self, store: &ParamStore<T>, graph: &mut Graph<T>, requires_grad: bool) -> DecoderParams<Var> {
        self.map(|id| store.bind(graph, id, requires_grad))
    }
}

/// LSTM hidden and memory state at step `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[1 × n]`
    pub alpha: Var,
    /// `[1]`
    pub beta: Var,
    /// `[1 × D_v]`
    pub context: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[1 × |vocab|]`
    pub probs: Var,
    pub alpha: Var,
    pub beta: Var,
    pub state: DecoderState,
}

/// Encoder output bound into a graph, with the step-invariant attention
/// projection `V · W_ev` computed once.
#[derive(Clone, Copy, Debug)]
pub struct Frames {
    pub v: Var,
    pub projected: Var,
}

impl Frames {
    pub fn new<T: Scalar>(g: &mut Graph<T>, v: Var, p: &AttentionParams<Var>) -> Result<Self> {
        if g.shape(v).len() != 2 || g.shape(v)[0] == 0 {
            return Err(Error::contract(format!(
                "encoder output must be a non-empty n×D_v matrix, got {:?}",
                g.shape(v)
            )));
        }
        let projected = g.matmul(v, p.w_ev)?;
        Ok(Frames { v, projected })
    }
}

pub fn init_state<T: Scalar>(g: &mut Graph<T>, v: Var, p: &InitParams<Var>) -> Result<DecoderState> {
    if g.shape(v).len() != 2 || g.shape(v)[0] == 0 {
        return Err(Error::contract("init_state needs a non-empty encoder output"));
    }
    let mean = g.mean_rows(v)?;
    let h = g.matmul(mean, p.w_h)?;
    let h = g.add(h, p.b_h)?;
    let h = g.tanh(h);
    let c = g.matmul(mean, p.w_c)?;
    let c = g.add(c, p.b_c)?;
    let c = g.tanh(c);
    Ok(DecoderState { h, c, t: 0 })
}

pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    frames: &Frames,
    h_prev: Var,
    p: &AttentionParams<Var>,
) -> Result<Attention> {
    let hp = g.matmul(h_prev, p.w_eh)?;
    let pre = g.add(frames.projected, hp)?;
    let pre = g.add(pre, p.b_e)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, p.w_a)?;
    let scores = g.add(scores, p.b_a)?;
    let scores = g.transpose(scores)?;
    let alpha = g.softmax(scores)?;

    let gate = g.matmul(h_prev, p.w_beta)?;
    let gate = g.add(gate, p.b_beta)?;
    let beta = g.sigmoid(gate);

    let weighted = g.matmul(alpha, frames.v)?;
    let context = g.mul(weighted, beta)?;
    Ok(Attention { alpha, beta, context })
}

pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    state: &DecoderState,
    p: &LstmParams<Var>,
) -> Result<DecoderState> {
    let dh = g.shape(state.h)[1];
    let xi = g.matmul(z, p.w_ih)?;
    let hh = g.matmul(state.h, p.w_hh)?;
    let gates = g.add(xi, hh)?;
    let gates = g.add(gates, p.bias)?;
    let i = g.slice_cols(gates, 0, dh)?;
    let i = g.sigmoid(i);
    let f = g.slice_cols(gates, dh, dh)?;
    let f = g.sigmoid(f);
    let cand = g.slice_cols(gates, 2 * dh, dh)?;
    let cand = g.tanh(cand);
    let o = g.slice_cols(gates, 3 * dh, dh)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(DecoderState {
        h,
        c,
        t: state.t + 1,
    })
}

pub fn decoder_step<T: Scalar>(
    g: &mut Graph<T>,
    frames: &Frames,
    y_prev: usize,
    state: &DecoderState,
    p: &DecoderParams<Var>,
) -> Result<StepOutput> {
    let att = attend(g, frames, state.h, &p.attention)?;
    let emb = g.gather_rows(p.head.embed, &[y_prev])?;
    let z = g.concat(att.context, emb)?;
    let next = lstm_step(g, z, state, &p.lstm)?;

    let ch = g.concat(att.context, next.h)?;
    let u = g.matmul(ch, p.head.w_u)?;
    let u = g.add(u, emb)?;
    let u = g.add(u, p.head.b_u)?;
    let u = g.tanh(u);
    let logits = g.matmul(u, p.head.w_p)?;
    let logits = g.add(logits, p.head.b_p)?;
    let probs = g.softmax(logits)?;
    Ok(StepOutput {
        probs,
        alpha: att.alpha,
        beta: att.beta,
        state: next,
    })
}

/// Per-step outputs of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub probs: Vec<Var>,
    pub alphas: Vec<Var>,
}

/// Run the decoder over `targets`, feeding the ground-truth previous word
/// (`<SOS>` first) at every step.
pub fn teacher_forced_rollout<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    targets: &[usize],
    p: &DecoderParams<Var>,
    max_len: usize,
) -> Result<Rollout> {
    if targets.is_empty() {
        return Err(Error::contract("empty target caption"));
    }
    if targets.len() > max_len {
        return Err(Error::contract(format!(
            "target of length {} exceeds max length {max_len}",
            targets.len()
        )));
    }
    let frames = Frames::new(g, v, &p.attention)?;
    let mut state = init_state(g, v, &p.init)?;
    let mut rollout = Rollout {
        probs: Vec::with_capacity(targets.len()),
        alphas: Vec::with_capacity(targets.len()),
    };
    let mut prev = SOS;
    for &y in targets {
        let out = decoder_step(g, &frames, prev, &state, p)?;
        rollout.probs.push(out.probs);
        rollout.alphas.push(out.alpha);
        state = out.state;
        prev = y;
    }
    Ok(rollout)
}
