//! Encoder-decoder forward and backward passes.
//!
//! Samples in a batch are processed one at a time on their unpadded
//! length; padding is invisible to every real token, so this is the same
//! computation as running the padded batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    add_row_bias, bias_bwd, gelu, gelu_grad, head_backward, head_forward, layer_norm,
    layer_norm_bwd, log_softmax, matmul, matmul_bwd, KeyMask, LnCache,
};
use super::params::{AttnIdx, FfIdx, LnIdx};
use super::scalar::{Scalar, View, ViewMut};
use super::{ModelError, ModelState};
use crate::maskgen::{MaskMatrix, MASKED};
use crate::prompts::{TokenId, BOS, EOS, MASK, PAD};

/// One compiled training or evaluation input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    /// Encoder visibility; `None` means every token sees every token.
    pub mask: Option<MaskMatrix>,
    /// Target item token; the decoder is trained on `[item, EOS]`.
    pub target: TokenId,
}

impl Example {
    pub fn decoder_input(&self) -> [TokenId; 2] {
        [BOS, self.target]
    }

    pub fn decoder_target(&self) -> [TokenId; 2] {
        [self.target, EOS]
    }
}

/// Padded batch. Padding positions are invisible to and from real tokens,
/// and padded targets carry no loss.
#[derive(Clone, Debug)]
pub struct Batch {
    pub enc_ids: Vec<TokenId>,
    pub enc_len: Vec<usize>,
    pub width: usize,
    pub masks: Vec<Option<MaskMatrix>>,
    pub dec_in: Vec<TokenId>,
    pub dec_target: Vec<TokenId>,
    pub dec_width: usize,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Self {
        let width = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut enc_ids = Vec::with_capacity(width * examples.len());
        let mut dec_in = Vec::new();
        let mut dec_target = Vec::new();
        for e in examples {
            enc_ids.extend_from_slice(&e.tokens);
            enc_ids.extend(std::iter::repeat_n(PAD, width - e.tokens.len()));
            dec_in.extend_from_slice(&e.decoder_input());
            dec_target.extend_from_slice(&e.decoder_target());
        }
        Self {
            enc_ids,
            enc_len: examples.iter().map(|e| e.tokens.len()).collect(),
            width,
            masks: examples.iter().map(|e| e.mask.clone()).collect(),
            dec_in,
            dec_target,
            dec_width: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.enc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc_len.is_empty()
    }

    pub fn tokens(&self, b: usize) -> &[TokenId] {
        &self.enc_ids[b * self.width..b * self.width + self.enc_len[b]]
    }

    /// Padded additive view of sample `b`'s encoder mask.
    pub fn mask_value(&self, b: usize, i: usize, j: usize) -> f64 {
        let len = self.enc_len[b];
        if i >= len || j >= len {
            return MASKED;
        }
        match &self.masks[b] {
            Some(m) => m.additive(i, j),
            None => 0.0,
        }
    }

    pub fn dec_in(&self, b: usize) -> &[TokenId] {
        &self.dec_in[b * self.dec_width..(b + 1) * self.dec_width]
    }

    pub fn dec_target(&self, b: usize) -> &[TokenId] {
        &self.dec_target[b * self.dec_width..(b + 1) * self.dec_width]
    }

    pub fn target_tokens(&self) -> usize {
        self.dec_target.iter().filter(|&&t| t != PAD).count()
    }
}

struct Ctx<'a, T> {
    p: &'a [T],
    d: usize,
    heads: usize,
    dk: usize,
    ff: usize,
    vocab: usize,
    eps: f64,
    dropout: f64,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn new(state: &'a ModelState<T>, train: bool) -> Self {
        let c = &state.config;
        Self {
            p: &state.params,
            d: c.d_model,
            heads: c.heads,
            dk: c.head_dim(),
            ff: c.d_ff,
            vocab: c.vocab_size,
            eps: c.ln_eps,
            dropout: if train { c.dropout } else { 0.0 },
        }
    }

    fn w(&self, off: usize, len: usize) -> &'a [T] {
        &self.p[off..off + len]
    }

    fn ln(&self, idx: LnIdx, x: &[T]) -> (Vec<T>, LnCache<T>) {
        layer_norm(
            x,
            self.d,
            self.w(idx.g, self.d),
            self.w(idx.b, self.d),
            self.eps,
        )
    }

    fn ln_bwd(&self, idx: LnIdx, dy: &[T], cache: &LnCache<T>, g: &mut [T], dx: &mut [T]) {
        let d = self.d;
        let (gg, rest) = g.split_at_mut(idx.b.max(idx.g));
        // gains and biases are adjacent: g at idx.g, b at idx.b = idx.g + d
        debug_assert_eq!(idx.b, idx.g + d);
        layer_norm_bwd(
            dy,
            cache,
            d,
            self.w(idx.g, d),
            &mut gg[idx.g..idx.g + d],
            &mut rest[..d],
            dx,
        );
    }

    fn dropout_mask(&self, n: usize, rng: &mut Option<ChaCha8Rng>) -> Option<Vec<T>> {
        let rng = rng.as_mut()?;
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - self.dropout));
        Some(
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < self.dropout {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

struct AttnTape<T> {
    xq: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    lq: usize,
    lk: usize,
}

/// Projects keys and values once; reused by every decoder step.
struct KeyValues<T> {
    k: Vec<T>,
    v: Vec<T>,
    lk: usize,
}

fn project_kv<T: Scalar>(ctx: &Ctx<'_, T>, idx: AttnIdx, xkv: &[T]) -> KeyValues<T> {
    let d = ctx.d;
    let lk = xkv.len() / d;
    KeyValues {
        k: matmul(xkv, lk, d, ctx.w(idx.wk, d * d), d),
        v: matmul(xkv, lk, d, ctx.w(idx.wv, d * d), d),
        lk,
    }
}

fn attention_fwd<T: Scalar>(
    ctx: &Ctx<'_, T>,
    idx: AttnIdx,
    xq: &[T],
    kv: &KeyValues<T>,
    mask: KeyMask<'_, T>,
) -> (Vec<T>, AttnTape<T>) {
    let d = ctx.d;
    let lq = xq.len() / d;
    let lk = kv.lk;
    let q = matmul(xq, lq, d, ctx.w(idx.wq, d * d), d);
    let mut probs = vec![T::zero(); ctx.heads * lq * lk];
    let mut o = vec![T::zero(); lq * d];
    let scale = T::one() / T::of(ctx.dk as f64).sqrt();
    for h in 0..ctx.heads {
        head_forward(
            View::columns(&q, lq, d, h * ctx.dk, ctx.dk),
            View::columns(&kv.k, lk, d, h * ctx.dk, ctx.dk),
            View::columns(&kv.v, lk, d, h * ctx.dk, ctx.dk),
            mask,
            scale,
            lq,
            lk,
            &mut probs[h * lq * lk..(h + 1) * lq * lk],
            ViewMut::columns(&mut o, lq, d, h * ctx.dk, ctx.dk),
        );
    }
    let out = matmul(&o, lq, d, ctx.w(idx.wo, d * d), d);
    (
        out,
        AttnTape {
            xq: xq.to_vec(),
            q,
            k: kv.k.clone(),
            v: kv.v.clone(),
            probs,
            o,
            lq,
            lk,
        },
    )
}

/// Accumulates parameter gradients into `g`, input gradients into `dxq`
/// and `dxkv`.
#[allow(clippy::too_many_arguments)]
fn attention_bwd<T: Scalar>(
    ctx: &Ctx<'_, T>,
    idx: AttnIdx,
    tape: &AttnTape<T>,
    xkv: &[T],
    dout: &[T],
    g: &mut [T],
    dxq: &mut [T],
    dxkv: &mut [T],
) {
    let d = ctx.d;
    let (lq, lk) = (tape.lq, tape.lk);
    let mut d_o = vec![T::zero(); lq * d];
    matmul_bwd(
        &tape.o,
        dout,
        lq,
        d,
        d,
        ctx.w(idx.wo, d * d),
        &mut g[idx.wo..idx.wo + d * d],
        &mut d_o,
    );
    let mut dq = vec![T::zero(); lq * d];
    let mut dk = vec![T::zero(); lk * d];
    let mut dv = vec![T::zero(); lk * d];
    let scale = T::one() / T::of(ctx.dk as f64).sqrt();
    for h in 0..ctx.heads {
        let c = h * ctx.dk;
        head_backward(
            View::columns(&tape.q, lq, d, c, ctx.dk),
            View::columns(&tape.k, lk, d, c, ctx.dk),
            View::columns(&tape.v, lk, d, c, ctx.dk),
            &tape.probs[h * lq * lk..(h + 1) * lq * lk],
            View::columns(&d_o, lq, d, c, ctx.dk),
            scale,
            lq,
            lk,
            ViewMut::columns(&mut dq, lq, d, c, ctx.dk),
            ViewMut::columns(&mut dk, lk, d, c, ctx.dk),
            ViewMut::columns(&mut dv, lk, d, c, ctx.dk),
        );
    }
    matmul_bwd(
        &tape.xq,
        &dq,
        lq,
        d,
        d,
        ctx.w(idx.wq, d * d),
        &mut g[idx.wq..idx.wq + d * d],
        dxq,
    );
    matmul_bwd(
        xkv,
        &dk,
        lk,
        d,
        d,
        ctx.w(idx.wk, d * d),
        &mut g[idx.wk..idx.wk + d * d],
        dxkv,
    );
    matmul_bwd(
        xkv,
        &dv,
        lk,
        d,
        d,
        ctx.w(idx.wv, d * d),
        &mut g[idx.wv..idx.wv + d * d],
        dxkv,
    );
}

struct FfTape<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

fn ff_fwd<T: Scalar>(ctx: &Ctx<'_, T>, idx: FfIdx, x: &[T]) -> (Vec<T>, FfTape<T>) {
    let (d, f) = (ctx.d, ctx.ff);
    let rows = x.len() / d;
    let mut pre = matmul(x, rows, d, ctx.w(idx.w1, d * f), f);
    add_row_bias(&mut pre, ctx.w(idx.b1, f));
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = matmul(&act, rows, f, ctx.w(idx.w2, f * d), d);
    add_row_bias(&mut out, ctx.w(idx.b2, d));
    (
        out,
        FfTape {
            x: x.to_vec(),
            pre,
            act,
        },
    )
}

fn ff_bwd<T: Scalar>(
    ctx: &Ctx<'_, T>,
    idx: FfIdx,
    tape: &FfTape<T>,
    dout: &[T],
    g: &mut [T],
    dx: &mut [T],
) {
    let (d, f) = (ctx.d, ctx.ff);
    let rows = tape.x.len() / d;
    bias_bwd(dout, &mut g[idx.b2..idx.b2 + d]);
    let mut dact = vec![T::zero(); rows * f];
    matmul_bwd(
        &tape.act,
        dout,
        rows,
        f,
        d,
        ctx.w(idx.w2, f * d),
        &mut g[idx.w2..idx.w2 + f * d],
        &mut dact,
    );
    for (da, &p) in dact.iter_mut().zip(&tape.pre) {
        *da *= gelu_grad(p);
    }
    bias_bwd(&dact, &mut g[idx.b1..idx.b1 + f]);
    matmul_bwd(
        &tape.x,
        &dact,
        rows,
        d,
        f,
        ctx.w(idx.w1, d * f),
        &mut g[idx.w1..idx.w1 + d * f],
        dx,
    );
}

struct EncLayerTape<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    attn: AttnTape<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    ff: FfTape<T>,
    drop2: Option<Vec<T>>,
}

struct DecLayerTape<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    self_attn: AttnTape<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    cross: AttnTape<T>,
    drop2: Option<Vec<T>>,
    ln3: LnCache<T>,
    ff: FfTape<T>,
    drop3: Option<Vec<T>>,
}

struct Tape<T> {
    enc_layers: Vec<EncLayerTape<T>>,
    enc_ln: LnCache<T>,
    enc_out: Vec<T>,
    dec_layers: Vec<DecLayerTape<T>>,
    dec_ln: LnCache<T>,
    z: Vec<T>,
    logits: Vec<T>,
}

fn additive_mask<T: Scalar>(mask: &Option<MaskMatrix>, len: usize) -> Option<Vec<T>> {
    let m = mask.as_ref()?;
    let mut out = vec![T::zero(); len * len];
    for i in 0..len {
        for j in 0..len {
            if !m.visible(i, j) {
                out[i * len + j] = T::of(MASKED);
            }
        }
    }
    Some(out)
}

fn embed<T: Scalar>(
    ctx: &Ctx<'_, T>,
    emb: usize,
    pos: Option<usize>,
    tokens: &[TokenId],
) -> Vec<T> {
    let d = ctx.d;
    let mut x = vec![T::zero(); tokens.len() * d];
    for (i, t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(ctx.w(emb + t.index() * d, d));
        if let Some(p) = pos {
            add_into(row, ctx.w(p + i * d, d));
        }
    }
    x
}

fn embed_bwd<T: Scalar>(
    d: usize,
    emb: usize,
    pos: Option<usize>,
    tokens: &[TokenId],
    dx: &[T],
    g: &mut [T],
) {
    for (i, t) in tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        add_into(&mut g[emb + t.index() * d..emb + (t.index() + 1) * d], row);
        if let Some(p) = pos {
            add_into(&mut g[p + i * d..p + (i + 1) * d], row);
        }
    }
}

fn check_tokens<T: Scalar>(state: &ModelState<T>, tokens: &[TokenId]) -> Result<(), ModelError> {
    let c = &state.config;
    if tokens.len() > c.max_len {
        return Err(ModelError::Shape(format!(
            "input of {} tokens exceeds max_len {}",
            tokens.len(),
            c.max_len
        )));
    }
    if let Some(t) = tokens.iter().find(|t| t.index() >= c.vocab_size) {
        return Err(ModelError::Shape(format!(
            "token id {t} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    Ok(())
}

/// Encoder mask row of the `[mask]` slot, used when cross-attention is
/// tree-masked.
fn cross_row<T: Scalar>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &Option<MaskMatrix>,
) -> Option<Vec<T>> {
    if !state.config.mask_cross {
        return None;
    }
    let m = mask.as_ref()?;
    let slot = tokens.iter().position(|&t| t == MASK)?;
    Some(
        (0..tokens.len())
            .map(|j| {
                if m.visible(slot, j) {
                    T::zero()
                } else {
                    T::of(MASKED)
                }
            })
            .collect(),
    )
}

fn run_encoder<T: Scalar>(
    state: &ModelState<T>,
    ctx: &Ctx<'_, T>,
    tokens: &[TokenId],
    mask: &Option<MaskMatrix>,
    rng: &mut Option<ChaCha8Rng>,
) -> (Vec<EncLayerTape<T>>, LnCache<T>, Vec<T>) {
    let lay = &state.layout;
    let len = tokens.len();
    let pos = state.config.positional.then_some(lay.enc_pos);
    let mut x = embed(ctx, lay.tok_emb, pos, tokens);
    let add = additive_mask::<T>(mask, len);
    let key_mask = add.as_deref().map_or(KeyMask::None, KeyMask::Additive);
    let mut tapes = Vec::with_capacity(lay.enc.len());
    for idx in &lay.enc {
        let (h1, ln1) = ctx.ln(idx.ln1, &x);
        let kv = project_kv(ctx, idx.attn, &h1);
        let (mut a, attn) = attention_fwd(ctx, idx.attn, &h1, &kv, key_mask);
        let drop1 = ctx.dropout_mask(a.len(), rng);
        apply_mask(&mut a, &drop1);
        add_into(&mut x, &a);
        let (h2, ln2) = ctx.ln(idx.ln2, &x);
        let (mut f, ff) = ff_fwd(ctx, idx.ff, &h2);
        let drop2 = ctx.dropout_mask(f.len(), rng);
        apply_mask(&mut f, &drop2);
        add_into(&mut x, &f);
        tapes.push(EncLayerTape {
            ln1,
            h1,
            attn,
            drop1,
            ln2,
            ff,
            drop2,
        });
    }
    let (out, enc_ln) = ctx.ln(lay.enc_ln, &x);
    (tapes, enc_ln, out)
}

fn forward_sample<T: Scalar>(
    state: &ModelState<T>,
    ctx: &Ctx<'_, T>,
    tokens: &[TokenId],
    mask: &Option<MaskMatrix>,
    dec_in: &[TokenId],
    rng: &mut Option<ChaCha8Rng>,
) -> Tape<T> {
    let lay = &state.layout;
    let (enc_layers, enc_ln, enc_out) = run_encoder(state, ctx, tokens, mask, rng);
    let row = cross_row::<T>(state, tokens, mask);
    let cross_mask = row.as_deref().map_or(KeyMask::None, KeyMask::Row);

    let pos = state.config.positional.then_some(lay.dec_pos);
    let mut y = embed(ctx, lay.tok_emb, pos, dec_in);
    let mut dec_layers = Vec::with_capacity(lay.dec.len());
    for idx in &lay.dec {
        let (h1, ln1) = ctx.ln(idx.ln1, &y);
        let kv = project_kv(ctx, idx.self_attn, &h1);
        let (mut a, self_attn) = attention_fwd(ctx, idx.self_attn, &h1, &kv, KeyMask::Causal);
        let drop1 = ctx.dropout_mask(a.len(), rng);
        apply_mask(&mut a, &drop1);
        add_into(&mut y, &a);

        let (h2, ln2) = ctx.ln(idx.ln2, &y);
        let kv = project_kv(ctx, idx.cross, &enc_out);
        let (mut c, cross) = attention_fwd(ctx, idx.cross, &h2, &kv, cross_mask);
        let drop2 = ctx.dropout_mask(c.len(), rng);
        apply_mask(&mut c, &drop2);
        add_into(&mut y, &c);

        let (h3, ln3) = ctx.ln(idx.ln3, &y);
        let (mut f, ff) = ff_fwd(ctx, idx.ff, &h3);
        let drop3 = ctx.dropout_mask(f.len(), rng);
        apply_mask(&mut f, &drop3);
        add_into(&mut y, &f);
        dec_layers.push(DecLayerTape {
            ln1,
            h1,
            self_attn,
            drop1,
            ln2,
            cross,
            drop2,
            ln3,
            ff,
            drop3,
        });
    }
    let (z, dec_ln) = ctx.ln(lay.dec_ln, &y);
    let rows = dec_in.len();
    let mut logits = matmul(
        &z,
        rows,
        ctx.d,
        ctx.w(lay.out_w, ctx.d * ctx.vocab),
        ctx.vocab,
    );
    add_row_bias(&mut logits, ctx.w(lay.out_b, ctx.vocab));
    Tape {
        enc_layers,
        enc_ln,
        enc_out,
        dec_layers,
        dec_ln,
        z,
        logits,
    }
}

/// Returns the summed NLL of the sample and `dlogits` scaled by `weight`.
fn nll<T: Scalar>(logits: &[T], targets: &[TokenId], vocab: usize, weight: T) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let lp = log_softmax(&logits[r * vocab..(r + 1) * vocab]);
        loss -= lp[t.index()];
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (g, &l) in drow.iter_mut().zip(&lp) {
            *g = l.exp() * weight;
        }
        drow[t.index()] -= weight;
    }
    (loss, dlogits)
}

#[allow(clippy::too_many_arguments)]
fn backward_sample<T: Scalar>(
    state: &ModelState<T>,
    ctx: &Ctx<'_, T>,
    tape: &Tape<T>,
    tokens: &[TokenId],
    dec_in: &[TokenId],
    dlogits: &[T],
    g: &mut [T],
) {
    let lay = &state.layout;
    let (d, v) = (ctx.d, ctx.vocab);
    let rows = dec_in.len();

    bias_bwd(dlogits, &mut g[lay.out_b..lay.out_b + v]);
    let mut dz = vec![T::zero(); rows * d];
    matmul_bwd(
        &tape.z,
        dlogits,
        rows,
        d,
        v,
        ctx.w(lay.out_w, d * v),
        &mut g[lay.out_w..lay.out_w + d * v],
        &mut dz,
    );
    let mut dy = vec![T::zero(); rows * d];
    ctx.ln_bwd(lay.dec_ln, &dz, &tape.dec_ln, g, &mut dy);

    let mut d_enc_out = vec![T::zero(); tape.enc_out.len()];
    for (idx, lt) in lay.dec.iter().zip(&tape.dec_layers).rev() {
        // feed-forward branch
        let mut df = dy.clone();
        apply_mask(&mut df, &lt.drop3);
        let mut dh3 = vec![T::zero(); rows * d];
        ff_bwd(ctx, idx.ff, &lt.ff, &df, g, &mut dh3);
        ctx.ln_bwd(idx.ln3, &dh3, &lt.ln3, g, &mut dy);

        // cross-attention branch
        let mut dc = dy.clone();
        apply_mask(&mut dc, &lt.drop2);
        let mut dh2 = vec![T::zero(); rows * d];
        attention_bwd(
            ctx,
            idx.cross,
            &lt.cross,
            &tape.enc_out,
            &dc,
            g,
            &mut dh2,
            &mut d_enc_out,
        );
        ctx.ln_bwd(idx.ln2, &dh2, &lt.ln2, g, &mut dy);

        // causal self-attention branch
        let mut da = dy.clone();
        apply_mask(&mut da, &lt.drop1);
        let mut dh1 = vec![T::zero(); rows * d];
        let mut dh1_kv = vec![T::zero(); rows * d];
        attention_bwd(
            ctx,
            idx.self_attn,
            &lt.self_attn,
            &lt.h1,
            &da,
            g,
            &mut dh1,
            &mut dh1_kv,
        );
        add_into(&mut dh1, &dh1_kv);
        ctx.ln_bwd(idx.ln1, &dh1, &lt.ln1, g, &mut dy);
    }
    let pos = state.config.positional.then_some(lay.dec_pos);
    embed_bwd(d, lay.tok_emb, pos, dec_in, &dy, g);

    let len = tokens.len();
    let mut dx = vec![T::zero(); len * d];
    ctx.ln_bwd(lay.enc_ln, &d_enc_out, &tape.enc_ln, g, &mut dx);
    for (idx, lt) in lay.enc.iter().zip(&tape.enc_layers).rev() {
        let mut df = dx.clone();
        apply_mask(&mut df, &lt.drop2);
        let mut dh2 = vec![T::zero(); len * d];
        ff_bwd(ctx, idx.ff, &lt.ff, &df, g, &mut dh2);
        ctx.ln_bwd(idx.ln2, &dh2, &lt.ln2, g, &mut dx);

        let mut da = dx.clone();
        apply_mask(&mut da, &lt.drop1);
        let mut dh1 = vec![T::zero(); len * d];
        let mut dh1_kv = vec![T::zero(); len * d];
        attention_bwd(
            ctx,
            idx.attn,
            &lt.attn,
            &lt.h1,
            &da,
            g,
            &mut dh1,
            &mut dh1_kv,
        );
        add_into(&mut dh1, &dh1_kv);
        ctx.ln_bwd(idx.ln1, &dh1, &lt.ln1, g, &mut dx);
    }
    let pos = state.config.positional.then_some(lay.enc_pos);
    embed_bwd(d, lay.tok_emb, pos, tokens, &dx, g);
}

/// Mean negative log-likelihood over non-pad targets, plus per-sample
/// logits (`dec_width x vocab`).
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub loss: T,
    pub logits: Vec<Vec<T>>,
}

fn validate_batch<T: Scalar>(state: &ModelState<T>, batch: &Batch) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Shape("empty batch".into()));
    }
    if batch.dec_width > state.config.max_target_len {
        return Err(ModelError::Shape(format!(
            "decoder length {} exceeds max_target_len {}",
            batch.dec_width, state.config.max_target_len
        )));
    }
    for b in 0..batch.len() {
        check_tokens(state, batch.tokens(b))?;
        check_tokens(state, batch.dec_in(b))?;
        check_tokens(state, batch.dec_target(b))?;
        if let Some(m) = &batch.masks[b] {
            if m.size() != batch.enc_len[b] {
                return Err(ModelError::Shape(format!(
                    "sample {b}: mask is {}x{} for {} tokens",
                    m.size(),
                    m.size(),
                    batch.enc_len[b]
                )));
            }
        }
    }
    Ok(())
}

/// Teacher-forced loss of a batch without dropout.
pub fn forward_loss<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
) -> Result<ForwardOutput<T>, ModelError> {
    validate_batch(state, batch)?;
    let ctx = Ctx::new(state, false);
    let weight = T::one() / T::of(batch.target_tokens().max(1) as f64);
    let mut total = T::zero();
    let mut logits = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let tape = forward_sample(
            state,
            &ctx,
            batch.tokens(b),
            &batch.masks[b],
            batch.dec_in(b),
            &mut None,
        );
        let (l, _) = nll(&tape.logits, batch.dec_target(b), ctx.vocab, weight);
        total += l;
        logits.push(tape.logits);
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { batch: 0 });
    }
    Ok(ForwardOutput { loss, logits })
}

/// Loss and gradient of a batch. With `dropout_seed`, dropout is active
/// and seeded per sample.
pub fn loss_and_grad<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(T, Vec<T>), ModelError> {
    validate_batch(state, batch)?;
    let ctx = Ctx::new(state, dropout_seed.is_some());
    let weight = T::one() / T::of(batch.target_tokens().max(1) as f64);
    let mut grads = vec![T::zero(); state.num_params()];
    let mut total = T::zero();
    for b in 0..batch.len() {
        let mut rng = dropout_seed
            .map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b as u64));
        let tokens = batch.tokens(b);
        let dec_in = batch.dec_in(b);
        let tape = forward_sample(state, &ctx, tokens, &batch.masks[b], dec_in, &mut rng);
        let (l, dlogits) = nll(&tape.logits, batch.dec_target(b), ctx.vocab, weight);
        total += l;
        backward_sample(state, &ctx, &tape, tokens, dec_in, &dlogits, &mut grads);
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { batch: 0 });
    }
    Ok((loss, grads))
}

/// Encoder output and projected cross-attention keys/values of one input.
pub struct Encoded<T> {
    cross: Vec<KeyValues<T>>,
    cross_row: Option<Vec<T>>,
}

pub fn encode<T: Scalar>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &Option<MaskMatrix>,
) -> Result<Encoded<T>, ModelError> {
    check_tokens(state, tokens)?;
    if let Some(m) = mask {
        if m.size() != tokens.len() {
            return Err(ModelError::Shape(format!(
                "mask is {}x{} for {} tokens",
                m.size(),
                m.size(),
                tokens.len()
            )));
        }
    }
    let ctx = Ctx::new(state, false);
    let (_, _, enc_out) = run_encoder(state, &ctx, tokens, mask, &mut None);
    let cross = state
        .layout
        .dec
        .iter()
        .map(|idx| project_kv(&ctx, idx.cross, &enc_out))
        .collect();
    Ok(Encoded {
        cross,
        cross_row: cross_row(state, tokens, mask),
    })
}

/// Log-probabilities of the next token after the decoder `prefix`
/// (which starts with the decoder start token).
pub fn next_token_logprobs<T: Scalar>(
    state: &ModelState<T>,
    enc: &Encoded<T>,
    prefix: &[TokenId],
) -> Result<Vec<T>, ModelError> {
    check_tokens(state, prefix)?;
    if prefix.is_empty() || prefix.len() > state.config.max_target_len {
        return Err(ModelError::Shape(format!(
            "decoder prefix of length {} (max {})",
            prefix.len(),
            state.config.max_target_len
        )));
    }
    let ctx = Ctx::new(state, false);
    let lay = &state.layout;
    let d = ctx.d;
    let pos = state.config.positional.then_some(lay.dec_pos);
    let mut y = embed(&ctx, lay.tok_emb, pos, prefix);
    let cross_mask = enc.cross_row.as_deref().map_or(KeyMask::None, KeyMask::Row);
    for (idx, kv) in lay.dec.iter().zip(&enc.cross) {
        let (h1, _) = ctx.ln(idx.ln1, &y);
        let self_kv = project_kv(&ctx, idx.self_attn, &h1);
        let (a, _) = attention_fwd(&ctx, idx.self_attn, &h1, &self_kv, KeyMask::Causal);
        add_into(&mut y, &a);
        let (h2, _) = ctx.ln(idx.ln2, &y);
        let (c, _) = attention_fwd(&ctx, idx.cross, &h2, kv, cross_mask);
        add_into(&mut y, &c);
        let (h3, _) = ctx.ln(idx.ln3, &y);
        let (f, _) = ff_fwd(&ctx, idx.ff, &h3);
        add_into(&mut y, &f);
    }
    let (z, _) = ctx.ln(lay.dec_ln, &y);
    let last = &z[(prefix.len() - 1) * d..];
    let mut logits = matmul(last, 1, d, ctx.w(lay.out_w, d * ctx.vocab), ctx.vocab);
    add_row_bias(&mut logits, ctx.w(lay.out_b, ctx.vocab));
    Ok(log_softmax(&logits))
}

/// Per-token encoder outputs (after the final layer norm), for tests that
/// probe what the mask lets through.
pub fn encoder_states<T: Scalar>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &Option<MaskMatrix>,
) -> Result<Vec<T>, ModelError> {
    check_tokens(state, tokens)?;
    let ctx = Ctx::new(state, false);
    Ok(run_encoder(state, &ctx, tokens, mask, &mut None).2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ktree::tests::{compile, fig2_kg};
    use crate::maskgen::build_mask;
    use crate::model::{
        check_gradients, train, GradCheckSettings, Init, ModelConfig, TrainConfig, TransformerLoss,
    };
    use crate::prompts::Vocabulary;

    fn fig2_examples(vocab_extra: usize) -> (Vec<Example>, usize) {
        let kg = fig2_kg();
        let mut out = Vec::new();
        let mut vocab_len = 0;
        for (hist, hops) in [(&["a", "b"][..], 2), (&["b"][..], 1), (&["a"][..], 0)] {
            let (tree, fused, vocab) = compile(&kg, hist, hops, 2);
            let mask = build_mask(&tree, fused.tokens.len()).unwrap();
            vocab_len = vocab_len.max(vocab.len());
            out.push(Example {
                tokens: fused.tokens.clone(),
                mask: Some(mask),
                target: TokenId((vocab.len() - 1 - out.len()) as u32),
            });
        }
        (out, vocab_len + vocab_extra)
    }

    fn toy(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            max_len: 96,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_model_loss_is_log_vocab() {
        let (ex, v) = fig2_examples(0);
        let s = ModelState::<f64>::new(toy(v), Init::Zeros).unwrap();
        let refs: Vec<&Example> = ex.iter().collect();
        let out = forward_loss(&s, &Batch::new(&refs)).unwrap();
        assert!((out.loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_target_loss_is_negative_log_softmax() {
        let (ex, v) = fig2_examples(0);
        let s = ModelState::<f64>::new(toy(v), Init::Random).unwrap();
        let out = forward_loss(&s, &Batch::new(&[&ex[0]])).unwrap();
        let l = &out.logits[0];
        let lse = |row: &[f64]| row.iter().map(|x| x.exp()).sum::<f64>().ln();
        let r0 = &l[..v];
        let r1 = &l[v..];
        let expect = 0.5 * ((lse(r0) - r0[ex[0].target.index()]) + (lse(r1) - r1[EOS.index()]));
        assert!((out.loss - expect).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ex, v) = fig2_examples(0);
        let refs: Vec<&Example> = ex.iter().collect();
        let batch = Batch::new(&refs);
        for mask_cross in [false, true] {
            let cfg = ModelConfig {
                mask_cross,
                ..toy(v)
            };
            let mut f = TransformerLoss {
                state: ModelState::new(cfg, Init::Random).unwrap(),
                batch: &batch,
            };
            let r = check_gradients(&mut f, &GradCheckSettings::default());
            assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        }
    }

    #[test]
    fn isolated_token_gets_exactly_zero_gradient() {
        // Token 2 sees only itself and is hidden from every other position,
        // including the decoder.
        let tokens = vec![TokenId(7), MASK, TokenId(9), TokenId(8)];
        let mask = MaskMatrix::from_fn(4, |i, j| i == j || (i != 2 && j != 2));
        let ex = Example {
            tokens,
            mask: Some(mask),
            target: TokenId(10),
        };
        let cfg = ModelConfig {
            mask_cross: true,
            positional: false,
            ..toy(12)
        };
        let s = ModelState::<f64>::new(cfg, Init::Random).unwrap();
        let (_, g) = loss_and_grad(&s, &Batch::new(&[&ex]), None).unwrap();
        let d = s.config.d_model;
        let row = &g[s.layout.tok_emb + 9 * d..s.layout.tok_emb + 10 * d];
        assert!(row.iter().all(|&x| x == 0.0));
        let row = &g[s.layout.tok_emb + 8 * d..s.layout.tok_emb + 9 * d];
        assert!(row.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn swapping_invisible_blocks_is_exact_without_positions() {
        let kg = fig2_kg();
        let (tree, fused, vocab) = compile(&kg, &["a", "b"], 1, 2);
        let mask = build_mask(&tree, fused.tokens.len()).unwrap();
        let cfg = ModelConfig {
            positional: false,
            ..toy(vocab.len())
        };
        let s = ModelState::<f64>::new(cfg, Init::Random).unwrap();
        // The first prompt under A and the first under B are mutually
        // invisible; swap their token blocks, which have equal length.
        let a = crate::ktree::tests::find(&tree, "A", "A1");
        let b = crate::ktree::tests::find(&tree, "B", "B1");
        let ra = tree.nodes[a].spans[0].clone();
        let rb = tree.nodes[b].spans[0].clone();
        assert_eq!(ra.len(), rb.len());
        assert!(!mask.visible(ra.start, rb.start));
        let n = fused.tokens.len();
        let perm: Vec<usize> = (0..n)
            .map(|i| {
                if ra.contains(&i) {
                    rb.start + (i - ra.start)
                } else if rb.contains(&i) {
                    ra.start + (i - rb.start)
                } else {
                    i
                }
            })
            .collect();
        let tokens2: Vec<TokenId> = perm.iter().map(|&p| fused.tokens[p]).collect();
        let mask2 = MaskMatrix::from_fn(n, |i, j| mask.visible(perm[i], perm[j]));
        let h1 = encoder_states(&s, &fused.tokens, &Some(mask)).unwrap();
        let h2 = encoder_states(&s, &tokens2, &Some(mask2)).unwrap();
        let d = s.config.d_model;
        // Equal up to floating-point summation order.
        for i in fused.mpp.clone() {
            for (x, y) in h1[i * d..(i + 1) * d].iter().zip(&h2[i * d..(i + 1) * d]) {
                assert!((x - y).abs() < 1e-12, "token {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn padding_does_not_change_per_sample_loss() {
        let (ex, v) = fig2_examples(0);
        let s = ModelState::<f64>::new(toy(v), Init::Random).unwrap();
        let alone = forward_loss(&s, &Batch::new(&[&ex[1]])).unwrap();
        let padded = forward_loss(&s, &Batch::new(&[&ex[0], &ex[1]])).unwrap();
        assert_eq!(alone.logits[0], padded.logits[1]);
    }

    #[test]
    fn beam_api_matches_teacher_forcing() {
        let (ex, v) = fig2_examples(0);
        let s = ModelState::<f64>::new(toy(v), Init::Random).unwrap();
        let out = forward_loss(&s, &Batch::new(&[&ex[0]])).unwrap();
        let enc = encode(&s, &ex[0].tokens, &ex[0].mask).unwrap();
        let lp0 = next_token_logprobs(&s, &enc, &[BOS]).unwrap();
        let lp1 = next_token_logprobs(&s, &enc, &[BOS, ex[0].target]).unwrap();
        let ls = |row: &[f64]| super::log_softmax(row);
        for (a, b) in lp0.iter().zip(ls(&out.logits[0][..v])) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in lp1.iter().zip(ls(&out.logits[0][v..])) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (ex, v) = fig2_examples(0);
        let refs: Vec<&Example> = ex.iter().collect();
        let s = ModelState::<f64>::new(toy(v), Init::Random).unwrap();
        let (_, g) = loss_and_grad(&s, &Batch::new(&refs), None).unwrap();
        for t in &s.layout.tensors {
            assert!(
                g[t.range()].iter().any(|&x| x != 0.0),
                "{} has no gradient",
                t.name
            );
        }
    }

    #[test]
    fn rejects_malformed_input() {
        let s = ModelState::<f32>::new(toy(12), Init::Random).unwrap();
        let bad = Example {
            tokens: vec![TokenId(40)],
            mask: None,
            target: TokenId(7),
        };
        assert!(matches!(
            forward_loss(&s, &Batch::new(&[&bad])),
            Err(ModelError::Shape(_))
        ));
        let bad = Example {
            tokens: vec![TokenId(7), TokenId(8)],
            mask: Some(MaskMatrix::full(3)),
            target: TokenId(7),
        };
        assert!(forward_loss(&s, &Batch::new(&[&bad])).is_err());
    }

    #[test]
    fn memorizes_small_set_monotonically() {
        let vocab = Vocabulary::build(["a b c d e f g h"]);
        let n = vocab.len() as u32;
        let data: Vec<Example> = (0..40)
            .map(|i| Example {
                tokens: vec![TokenId(6 + i % 8), TokenId(6 + (i / 8) % 5), SPE_TOKEN],
                mask: None,
                target: TokenId(6 + (i * 3 + i / 8) % (n - 6)),
            })
            .collect();
        let s = ModelState::<f32>::new(toy(vocab.len()), Init::Random).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            optim: crate::model::OptimConfig {
                peak_lr: 3e-3,
                warmup_steps: 10,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let out = train(s, &data, &cfg, |_, _| {}).unwrap();
        let l: Vec<f64> = out.curve.iter().map(|p| p.loss).collect();
        assert!(l[..5].windows(2).all(|w| w[1] < w[0]), "{l:?}");
        assert!(*l.last().unwrap() < 0.1, "{l:?}");
    }

    const SPE_TOKEN: TokenId = crate::prompts::SPE;
}
