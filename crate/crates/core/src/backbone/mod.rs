//! Item embeddings, the pre-norm transformer encoder over
//! `[context ∥ history ∥ reasoning]` tokens, latent rescaling and decoding.

mod attention;
mod checkpoint;
mod forward;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ItemId;
use crate::scalar::Scalar;
use crate::simplex::Categorical;
use crate::tensor::Tensor;

pub use attention::{export_attention, AttentionMaps, AttentionSample, Region};
pub use checkpoint::CheckpointHeader;
pub use forward::{Forward, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `d`.
    pub ffn_mult: usize,
    pub max_history: usize,
    pub max_context: usize,
    /// Size of the reasoning-step position bank; bounds the number of appended states.
    pub max_reason: usize,
    pub dropout: f64,
    /// Project every latent state to norm `φ·avg‖E‖`.
    pub rescale: bool,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_history: crate::graph::MAX_SEQUENCE_LEN,
            max_context: 20,
            max_reason: 8,
            dropout: 0.1,
            rescale: true,
            init_seed: 42,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        if self.max_history == 0 || self.max_context == 0 || self.max_reason == 0 {
            return bad("position banks must be nonempty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Maps item ids to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    items: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
}

impl Vocab {
    pub fn new(items: impl IntoIterator<Item = ItemId>) -> Result<Self> {
        let mut items: Vec<ItemId> = items.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::InvalidParameter("empty vocabulary".into()));
        }
        let index = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.index.contains_key(&item)
    }

    pub fn row(&self, item: ItemId) -> Result<usize> {
        self.index.get(&item).copied().ok_or(Error::UnknownItem(item))
    }

    pub fn rows(&self, items: &[ItemId]) -> Result<Vec<usize>> {
        items.iter().map(|&i| self.row(i)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    item: usize,
    ctx_pos: usize,
    hist_pos: usize,
    step_pos: usize,
    phi: usize,
    layers: Vec<LayerSlots>,
    lnf_g: usize,
    lnf_b: usize,
}

enum Init {
    Uniform(f64),
    Const(f64),
}

/// Parameter names, shapes and initializers in storage order.
fn parameter_plan(config: &BackboneConfig, n_items: usize) -> (Vec<(String, [usize; 2], Init)>, Layout) {
    let d = config.d;
    let f = config.d * config.ffn_mult;
    let emb = Init::Uniform(0.1);
    let lin = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    let mut plan: Vec<(String, [usize; 2], Init)> = Vec::new();
    let add = |plan: &mut Vec<_>, name: String, shape: [usize; 2], init: Init| {
        plan.push((name, shape, init));
        plan.len() - 1
    };
    let item = add(&mut plan, "item_embedding".into(), [n_items, d], emb);
    let ctx_pos = add(&mut plan, "context_position".into(), [config.max_context, d], Init::Uniform(0.1));
    let hist_pos = add(&mut plan, "history_position".into(), [config.max_history, d], Init::Uniform(0.1));
    let step_pos = add(&mut plan, "step_position".into(), [config.max_reason, d], Init::Uniform(0.1));
    let phi = add(&mut plan, "phi".into(), [1, 1], Init::Const(1.0));
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerSlots {
            ln1_g: add(&mut plan, p("ln1.gamma"), [1, d], Init::Const(1.0)),
            ln1_b: add(&mut plan, p("ln1.beta"), [1, d], Init::Const(0.0)),
            wq: add(&mut plan, p("attn.wq"), [d, d], lin(d)),
            bq: add(&mut plan, p("attn.bq"), [1, d], Init::Const(0.0)),
            wk: add(&mut plan, p("attn.wk"), [d, d], lin(d)),
            bk: add(&mut plan, p("attn.bk"), [1, d], Init::Const(0.0)),
            wv: add(&mut plan, p("attn.wv"), [d, d], lin(d)),
            bv: add(&mut plan, p("attn.bv"), [1, d], Init::Const(0.0)),
            wo: add(&mut plan, p("attn.wo"), [d, d], lin(d)),
            bo: add(&mut plan, p("attn.bo"), [1, d], Init::Const(0.0)),
            ln2_g: add(&mut plan, p("ln2.gamma"), [1, d], Init::Const(1.0)),
            ln2_b: add(&mut plan, p("ln2.beta"), [1, d], Init::Const(0.0)),
            w1: add(&mut plan, p("ffn.w1"), [d, f], lin(d)),
            b1: add(&mut plan, p("ffn.b1"), [1, f], Init::Const(0.0)),
            w2: add(&mut plan, p("ffn.w2"), [f, d], lin(f)),
            b2: add(&mut plan, p("ffn.b2"), [1, d], Init::Const(0.0)),
        });
    }
    let lnf_g = add(&mut plan, "final_ln.gamma".into(), [1, d], Init::Const(1.0));
    let lnf_b = add(&mut plan, "final_ln.beta".into(), [1, d], Init::Const(0.0));
    let layout = Layout { item, ctx_pos, hist_pos, step_pos, phi, layers, lnf_g, lnf_b };
    (plan, layout)
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f64> {
    config: BackboneConfig,
    vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    layout: Layout,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: BackboneConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let (plan, layout) = parameter_plan(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::with_capacity(plan.len());
        let mut params = Vec::with_capacity(plan.len());
        for (name, shape, init) in plan {
            let t = match init {
                Init::Uniform(a) => Tensor::uniform(shape.to_vec(), -a, a, &mut rng),
                Init::Const(c) => Tensor::full(shape.to_vec(), S::of(c)),
            };
            names.push(name);
            params.push(t.with_grad());
        }
        Ok(Self { config, vocab, names, params, layout })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn item_embeddings(&self) -> &Tensor<S> {
        &self.params[self.layout.item]
    }

    pub fn phi(&self) -> S {
        self.params[self.layout.phi].item()
    }

    pub fn set_phi(&mut self, phi: S) {
        self.params[self.layout.phi].data_mut()[0] = phi;
    }

    /// Hidden states for `[context ∥ history ∥ reason_states]` from one full pass.
    pub fn encode(&self, context: &[ItemId], history: &[ItemId], reason_states: &[Vec<S>]) -> Result<Tensor<S>> {
        let mut fwd = self.forward(Mode::Eval);
        let h = fwd.encode_full(context, history, reason_states)?;
        Ok(fwd.tape().tensor(h))
    }

    /// The next latent state, already rescaled when rescaling is enabled.
    pub fn next_reason_state(&self, context: &[ItemId], history: &[ItemId], prior_states: &[Vec<S>]) -> Result<Vec<S>> {
        let hidden = self.encode(context, history, prior_states)?;
        let last = hidden.row_slice(hidden.rows() - 1).to_vec();
        if self.config.rescale {
            rescale_latent(&last, self.phi(), avg_row_norm(self.item_embeddings()))
        } else {
            Ok(last)
        }
    }
}

/// Mean Euclidean row norm.
pub fn avg_row_norm<S: Scalar>(table: &Tensor<S>) -> S {
    let rows = table.rows();
    let total: S = (0..rows).map(|r| table.row_slice(r).iter().map(|&v| v * v).sum::<S>().sqrt()).sum();
    total / S::of_usize(rows.max(1))
}

/// `φ · r/‖r‖ · avg_norm`.
pub fn rescale_latent<S: Scalar>(r: &[S], phi: S, avg_norm: S) -> Result<Vec<S>> {
    let norm = r.iter().map(|&v| v * v).sum::<S>().sqrt();
    if !(norm > S::zero()) || !norm.is_finite() {
        return Err(Error::DegenerateLatent);
    }
    Ok(r.iter().map(|&v| phi * (v / norm) * avg_norm).collect())
}

/// `z_i = ⟨r, e_i⟩` for every row of `table`.
pub fn decode_logits<S: Scalar>(r: &[S], table: &Tensor<S>) -> Result<Vec<S>> {
    if r.len() != table.cols() {
        return Err(Error::Shape { op: "decode_logits", detail: format!("{} vs {}", r.len(), table.cols()) });
    }
    Ok((0..table.rows()).map(|i| table.row_slice(i).iter().zip(r).map(|(&e, &x)| e * x).sum()).collect())
}

pub fn predictive_distribution<S: Scalar>(vocab: &Vocab, z: &[S], temperature: S) -> Result<Categorical<S>> {
    Categorical::softmax(vocab.items().to_vec(), z, temperature)
}
