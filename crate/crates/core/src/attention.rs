//! Attention primitives: multi-head scaled dot-product attention, the
//! in-sample (IS-ATT) and cross-sample (CS-ATT) attentions built on it, the
//! paired CATT block, and the additive scorer.
//!
//! Matrices multiply from the right (`X·W`), so a `d×(d/h)` projection maps
//! `n×d` rows to `n×(d/h)` rows.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::dictionary::GlobalDictionary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], scale, rng)
}

/// Position-wise feed-forward network with a residual connection:
/// `x + relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl EmbedParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}.ffn.w1"), xavier(dim, hidden, rng))?,
            b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[1, hidden]))?,
            w2: store.add(format!("{prefix}.ffn.w2"), xavier(hidden, dim, rng))?,
            b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[1, dim]))?,
            dim,
            hidden,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub fn embed_block(g: &mut Graph, store: &ParamStore, x: Var, p: &EmbedParams) -> Result<Var> {
    let width = g.value(x).cols();
    if width != p.dim {
        return Err(Error::dim("embed_block", g.value(x).shape(), &[p.dim]));
    }
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    g.add(x, h)
}

/// Per-head projections `W_i^Q, W_i^K, W_i^V` (each `d×(d/h)`), the output
/// matrix `W^H` (`d×d`) and the trailing feed-forward block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub heads: usize,
    pub dim: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wh: ParamId,
    pub embed: EmbedParams,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_hidden(store, prefix, dim, heads, 4 * dim, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} must be a positive multiple of the head count {heads}"
            )));
        }
        let dh = dim / heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for i in 0..heads {
            wq.push(store.add(format!("{prefix}.head{i}.wq"), xavier(dim, dh, rng))?);
            wk.push(store.add(format!("{prefix}.head{i}.wk"), xavier(dim, dh, rng))?);
            wv.push(store.add(format!("{prefix}.head{i}.wv"), xavier(dim, dh, rng))?);
        }
        let wh = store.add(format!("{prefix}.wh"), xavier(dim, dim, rng))?;
        let embed = EmbedParams::new(store, prefix, dim, hidden, rng)?;
        Ok(Self {
            heads,
            dim,
            wq,
            wk,
            wv,
            wh,
            embed,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Every parameter id, in a fixed order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for i in 0..self.heads {
            out.extend([self.wq[i], self.wk[i], self.wv[i]]);
        }
        out.push(self.wh);
        out.extend(self.embed.ids());
        out
    }
}

/// Output of [`multi_head`]: the attended values and one attention matrix per head.
#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// `Embed([H_1..H_h]·W^H)` with `H_i = Softmax(Q W_i^Q (K W_i^K)^T / √(d/h)) · V W_i^V`.
pub fn multi_head(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
) -> Result<MultiHeadOutput> {
    let (qs, ks, vs) = (
        g.value(q).shape().to_vec(),
        g.value(k).shape().to_vec(),
        g.value(v).shape().to_vec(),
    );
    for s in [&qs, &ks, &vs] {
        if s.len() != 2 || s[1] != p.dim {
            return Err(Error::dim("multi_head", s, &[p.dim]));
        }
    }
    if ks[0] != vs[0] {
        return Err(Error::dim("multi_head", &ks, &vs));
    }
    if ks[0] == 0 {
        return Err(Error::EmptyKeys("multi_head"));
    }
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let mut heads: Option<Var> = None;
    let mut attention = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let wq = g.param(store, p.wq[i]);
        let wk = g.param(store, p.wk[i]);
        let wv = g.param(store, p.wv[i]);
        let qi = g.matmul(q, wq)?;
        let ki = g.matmul(k, wk)?;
        let vi = g.matmul(v, wv)?;
        let kt = g.transpose(ki)?;
        let logits = g.matmul(qi, kt)?;
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits)?;
        let h = g.matmul(a, vi)?;
        attention.push(a);
        heads = Some(match heads {
            None => h,
            Some(acc) => g.concat_cols(acc, h)?,
        });
    }
    let concat = heads.expect("at least one head");
    let wh = g.param(store, p.wh);
    let mixed = g.matmul(concat, wh)?;
    let output = embed_block(g, store, mixed, &p.embed)?;
    Ok(MultiHeadOutput { output, attention })
}

/// In-sample attention: keys and values are the current sample's rows.
pub fn is_att(
    g: &mut Graph,
    store: &ParamStore,
    sample_values: Var,
    queries: Var,
    p: &AttentionParams,
) -> Result<Var> {
    Ok(multi_head(g, store, queries, sample_values, sample_values, p)?.output)
}

/// Cross-sample attention: keys and values are the global dictionary.
pub fn cs_att(
    g: &mut Graph,
    store: &ParamStore,
    dictionary: &GlobalDictionary,
    queries: Var,
    p: &AttentionParams,
) -> Result<Var> {
    if dictionary.size() == 0 {
        return Err(Error::Config("cross-sample attention needs a nonempty dictionary".into()));
    }
    let kv = g.param(store, dictionary.entries());
    Ok(multi_head(g, store, queries, kv, kv, p)?.output)
}

/// IS-ATT and CS-ATT parameters of one causal attention block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CattBlockParams {
    pub is_att: AttentionParams,
    pub cs_att: AttentionParams,
    pub shared: bool,
}

impl CattBlockParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_hidden(store, prefix, dim, heads, 4 * dim, shared, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let is_att = AttentionParams::with_hidden(store, &format!("{prefix}.is"), dim, heads, hidden, rng)?;
        let cs_att = if shared {
            is_att.clone()
        } else {
            AttentionParams::with_hidden(store, &format!("{prefix}.cs"), dim, heads, hidden, rng)?
        };
        Ok(Self {
            is_att,
            cs_att,
            shared,
        })
    }

    /// True when both halves address the very same stored parameters.
    pub fn shares_storage(&self) -> bool {
        self.is_att == self.cs_att
    }
}

/// `(Ẑ, X̂)`: IS-ATT over the sample and CS-ATT over the dictionary, both
/// driven by the same queries.
pub fn catt_block(
    g: &mut Graph,
    store: &ParamStore,
    sample: Var,
    dictionary: &GlobalDictionary,
    queries: Var,
    p: &CattBlockParams,
) -> Result<(Var, Var)> {
    let z_hat = is_att(g, store, sample, queries, &p.is_att)?;
    let x_hat = cs_att(g, store, dictionary, queries, &p.cs_att)?;
    Ok((z_hat, x_hat))
}

/// Additive scorer: `a_n = wᵀ(W_k k_n + W_q q)`, `α = Softmax(a)`.
/// `w` is stored as a `d×1` column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveParams {
    pub w: ParamId,
    pub wk: ParamId,
    pub wq: ParamId,
    pub dim: usize,
}

impl AdditiveParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), xavier(dim, 1, rng))?,
            wk: store.add(format!("{prefix}.wk"), xavier(dim, dim, rng))?,
            wq: store.add(format!("{prefix}.wq"), xavier(dim, dim, rng))?,
            dim,
        })
    }
}

/// Attention distribution `1×N` of query `q` (`1×d`) over `keys` (`N×d`).
pub fn additive_scores(g: &mut Graph, store: &ParamStore, q: Var, keys: Var, p: &AdditiveParams) -> Result<Var> {
    let (qs, ks) = (g.value(q).shape().to_vec(), g.value(keys).shape().to_vec());
    if qs != [1, p.dim] {
        return Err(Error::dim("additive_scores", &qs, &[1, p.dim]));
    }
    if ks.len() != 2 || ks[1] != p.dim {
        return Err(Error::dim("additive_scores", &ks, &[p.dim]));
    }
    if ks[0] == 0 {
        return Err(Error::EmptyKeys("additive_scores"));
    }
    let wk = g.param(store, p.wk);
    let wq = g.param(store, p.wq);
    let w = g.param(store, p.w);
    let projected_keys = g.matmul(keys, wk)?;
    let projected_query = g.matmul(q, wq)?;
    let summed = g.add_row(projected_keys, projected_query)?;
    let logits = g.matmul(summed, w)?;
    let logits = g.transpose(logits)?;
    g.softmax_rows(logits)
}
