//! Pre-LN transformer blocks.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{init_normal, Graph, ParamId, ParamStore, Var};

fn linear_params(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), init_normal(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()));
    let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)));
    (w, b)
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Array2::ones((1, d)));
    let b = store.add(format!("{name}.b"), Array2::zeros((1, d)));
    (g, b)
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Attention {
            q: linear_params(store, rng, &format!("{name}.q"), d, d),
            k: linear_params(store, rng, &format!("{name}.k"), d, d),
            v: linear_params(store, rng, &format!("{name}.v"), d, d),
            o: linear_params(store, rng, &format!("{name}.o"), d, d),
        }
    }

    /// Multi-head scaled dot-product attention from `x` onto `memory`.
    fn forward(&self, g: &mut Graph, x: Var, memory: Var, heads: usize, causal: bool, dropout: f64) -> Var {
        let q = g.linear(x, self.q.0, self.q.1);
        let k = g.linear(memory, self.k.0, self.k.1);
        let v = g.linear(memory, self.v.0, self.v.1);
        let d = g.value(q).ncols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, causal);
            let p = g.dropout(p, dropout);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.linear(cat, self.o.0, self.o.1)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: (ParamId, ParamId),
    self_attn: Attention,
    cross: Option<((ParamId, ParamId), Attention)>,
    ln_ff: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub(crate) struct Stack {
    blocks: Vec<Block>,
    ln: (ParamId, ParamId),
    heads: usize,
    dropout: f64,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        cross: bool,
        dropout: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Block {
                    ln_self: norm_params(store, &format!("{p}.ln_self"), d),
                    self_attn: Attention::new(store, rng, &format!("{p}.self_attn"), d),
                    cross: cross.then(|| {
                        (
                            norm_params(store, &format!("{p}.ln_cross"), d),
                            Attention::new(store, rng, &format!("{p}.cross_attn"), d),
                        )
                    }),
                    ln_ff: norm_params(store, &format!("{p}.ln_ff"), d),
                    ff1: linear_params(store, rng, &format!("{p}.ff1"), d, 4 * d),
                    ff2: linear_params(store, rng, &format!("{p}.ff2"), 4 * d, d),
                }
            })
            .collect();
        Stack {
            blocks,
            ln: norm_params(store, &format!("{name}.ln"), d),
            heads,
            dropout,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, mut x: Var, memory: Option<Var>, causal: bool) -> Var {
        for b in &self.blocks {
            let h = g.layer_norm(x, b.ln_self.0, b.ln_self.1);
            let h = b.self_attn.forward(g, h, h, self.heads, causal, self.dropout);
            let h = g.dropout(h, self.dropout);
            x = g.add(x, h);
            if let (Some((ln, attn)), Some(mem)) = (&b.cross, memory) {
                let h = g.layer_norm(x, ln.0, ln.1);
                let h = attn.forward(g, h, mem, self.heads, false, self.dropout);
                let h = g.dropout(h, self.dropout);
                x = g.add(x, h);
            }
            let h = g.layer_norm(x, b.ln_ff.0, b.ln_ff.1);
            let h = g.linear(h, b.ff1.0, b.ff1.1);
            let h = g.gelu(h);
            let h = g.linear(h, b.ff2.0, b.ff2.1);
            let h = g.dropout(h, self.dropout);
            x = g.add(x, h);
        }
        g.layer_norm(x, self.ln.0, self.ln.1)
    }
}
