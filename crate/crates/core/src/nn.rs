//! Layer building blocks shared by the encoder, denoiser and classifier.
//!
//! Parameters live in a [`ParamStore`] under dotted names; each builder here
//! has a matching `init_*` that registers its parameters.

use rand::Rng;
use shallowdiff_autodiff::{uniform_init, Array, AutodiffError, ParamStore, Tape, Var};

type R<T> = std::result::Result<T, AutodiffError>;

/// Sinusoidal encoding of a position: `dim/2` sines then `dim/2` cosines
/// over a geometric frequency ladder from 1 down to 1/10000.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// `[len × dim]` table of sinusoidal encodings for positions `0..len`.
pub fn positions(len: usize, dim: usize) -> Array {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal(p as f64, dim));
    }
    Array::new(vec![len, dim], data).expect("shape")
}

pub fn init_linear<G: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut G) {
    store.insert(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, rng));
    store.insert(format!("{name}.b"), uniform_init(&[fan_out], fan_in, rng));
}

pub fn init_linear_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Array::zeros(&[fan_in, fan_out]));
    store.insert(format!("{name}.b"), Array::zeros(&[fan_out]));
}

/// `x[n × in] · W + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> R<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn init_conv<G: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    kernel: usize,
    rng: &mut G,
) {
    let fan_in = cin * kernel;
    store.insert(format!("{name}.w"), uniform_init(&[cout, cin, kernel], fan_in, rng));
    store.insert(format!("{name}.b"), uniform_init(&[cout], fan_in, rng));
}

pub fn init_conv_zero(store: &mut ParamStore, name: &str, cout: usize, cin: usize, kernel: usize) {
    store.insert(format!("{name}.w"), Array::zeros(&[cout, cin, kernel]));
    store.insert(format!("{name}.b"), Array::zeros(&[cout]));
}

/// Same-padded convolution with per-channel bias on `x[cin × len]`.
pub fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, dilation: usize) -> R<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.conv1d(x, w, dilation)?;
    tape.add_col(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Array::ones(&[dim]));
    store.insert(format!("{name}.b"), Array::zeros(&[dim]));
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> R<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let n = tape.layer_norm_rows(x, 1e-5)?;
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// `x · sigmoid(x)`.
pub fn silu(tape: &mut Tape, x: Var) -> R<Var> {
    let s = tape.sigmoid(x)?;
    tape.mul(x, s)
}

/// Feed-forward Transformer block geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FftBlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Kernel sizes of the two position-wise convolutions.
    pub kernels: (usize, usize),
}

pub fn init_fft_block<G: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &FftBlockConfig, rng: &mut G) {
    let c = cfg.channels;
    let d = c / cfg.heads;
    init_layer_norm(store, &format!("{name}.ln1"), c);
    for h in 0..cfg.heads {
        for proj in ["q", "k", "v"] {
            init_linear(store, &format!("{name}.attn.h{h}.{proj}"), c, d, rng);
        }
        store.insert(format!("{name}.attn.h{h}.o.w"), uniform_init(&[d, c], c, rng));
    }
    store.insert(format!("{name}.attn.o.b"), Array::zeros(&[c]));
    init_layer_norm(store, &format!("{name}.ln2"), c);
    init_conv(store, &format!("{name}.ffn.conv1"), cfg.ffn_hidden, c, cfg.kernels.0, rng);
    init_conv(store, &format!("{name}.ffn.conv2"), c, cfg.ffn_hidden, cfg.kernels.1, rng);
}

/// Zeroes the attention output and second convolution so the block is the identity.
pub fn zero_fft_block_outputs(store: &mut ParamStore, name: &str, cfg: &FftBlockConfig) {
    let c = cfg.channels;
    let d = c / cfg.heads;
    for h in 0..cfg.heads {
        store.insert(format!("{name}.attn.h{h}.o.w"), Array::zeros(&[d, c]));
    }
    store.insert(format!("{name}.attn.o.b"), Array::zeros(&[c]));
    init_conv_zero(store, &format!("{name}.ffn.conv2"), c, cfg.ffn_hidden, cfg.kernels.1);
}

/// Multi-head self-attention over the rows of `x[len × C]`. Returns the
/// attention output and the per-head weight matrices.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    x: Var,
    heads: usize,
) -> R<(Var, Vec<Var>)> {
    let c = tape.value(x).cols();
    if heads == 0 || c % heads != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "self_attention",
            reason: format!("{c} channels not divisible by {heads} heads"),
        });
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let mut out: Option<Var> = None;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = linear(tape, store, &format!("{name}.h{h}.q"), x)?;
        let k = linear(tape, store, &format!("{name}.h{h}.k"), x)?;
        let v = linear(tape, store, &format!("{name}.h{h}.v"), x)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        weights.push(attn);
        let ctx = tape.matmul(attn, v)?;
        let wo = tape.param(store, &format!("{name}.h{h}.o.w"))?;
        let proj = tape.matmul(ctx, wo)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, proj)?,
            None => proj,
        });
    }
    let bo = tape.param(store, &format!("{name}.o.b"))?;
    let out = tape.add(out.expect("at least one head"), bo)?;
    Ok((out, weights))
}

/// Pre-norm feed-forward Transformer block on `x[len × C]`:
/// `x + MHA(LN(x))`, then `x + Conv(ReLU(Conv(LN(x))))`.
pub fn fft_block(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, cfg: &FftBlockConfig) -> R<Var> {
    let h = layer_norm(tape, store, &format!("{name}.ln1"), x)?;
    let (attn, _) = self_attention(tape, store, &format!("{name}.attn"), h, cfg.heads)?;
    let x = tape.add(x, attn)?;
    let h = layer_norm(tape, store, &format!("{name}.ln2"), x)?;
    let ht = tape.transpose(h)?;
    let f = conv(tape, store, &format!("{name}.ffn.conv1"), ht, 1)?;
    let f = tape.relu(f)?;
    let f = conv(tape, store, &format!("{name}.ffn.conv2"), f, 1)?;
    let f = tape.transpose(f)?;
    tape.add(x, f)
}

/// Step embedding MLP: sinusoid → affine → SiLU → affine → SiLU, giving a `[1 × C]` row.
pub fn init_step_mlp<G: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut G) {
    init_linear(store, &format!("{name}.fc1"), channels, 4 * channels, rng);
    init_linear(store, &format!("{name}.fc2"), 4 * channels, channels, rng);
}

pub fn step_mlp(tape: &mut Tape, store: &ParamStore, name: &str, t: usize, channels: usize) -> R<Var> {
    let raw = Array::new(vec![1, channels], sinusoidal(t as f64, channels)).expect("shape");
    let x = tape.constant(raw);
    let h = linear(tape, store, &format!("{name}.fc1"), x)?;
    let h = silu(tape, h)?;
    let h = linear(tape, store, &format!("{name}.fc2"), h)?;
    silu(tape, h)
}
