use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{avg_row_norm, Model};
use crate::error::{Error, Result};
use crate::graph::ItemId;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Parameters enter the tape as constants.
    Eval,
    /// Like `Eval`, and every attention row is recorded.
    Inspect,
    /// Parameters are differentiable; dropout is drawn from `seed` when given.
    Train { dropout_seed: Option<u64> },
}

/// One attention row: the query token and its weights over keys `0..=query`.
pub(super) type AttnRow<S> = (usize, Vec<S>);

/// A single forward pass recorded on its own tape.
///
/// Context queries only see context keys and history/reasoning queries see
/// every context key plus earlier history/reasoning keys. That mask is causal
/// over the whole token sequence, so appending a reasoning state only needs
/// the cached per-layer keys and values.
pub struct Forward<'m, S: Scalar> {
    model: &'m Model<S>,
    tape: Tape<S>,
    vars: Vec<Var>,
    kv: Vec<Option<(Var, Var)>>,
    n_context: usize,
    n_history: usize,
    n_reason: usize,
    avg_norm: S,
    dropout: Option<(S, ChaCha8Rng)>,
    attention: Option<Vec<Vec<Vec<AttnRow<S>>>>>,
}

impl<S: Scalar> Model<S> {
    pub fn forward(&self, mode: Mode) -> Forward<'_, S> {
        let mut tape = Tape::new();
        let differentiable = matches!(mode, Mode::Train { .. });
        let vars = self.params.iter().map(|p| if differentiable { tape.param(p) } else { tape.constant(p) }).collect();
        let dropout = match mode {
            Mode::Train { dropout_seed: Some(seed) } if self.config.dropout > 0.0 => {
                Some((S::of(self.config.dropout), ChaCha8Rng::seed_from_u64(seed)))
            }
            _ => None,
        };
        let attention = (mode == Mode::Inspect).then(|| vec![vec![Vec::new(); self.config.heads]; self.config.layers]);
        Forward {
            model: self,
            tape,
            vars,
            kv: vec![None; self.config.layers],
            n_context: 0,
            n_history: 0,
            n_reason: 0,
            avg_norm: avg_row_norm(self.item_embeddings()),
            dropout,
            attention,
        }
    }
}

impl<'m, S: Scalar> Forward<'m, S> {
    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }

    pub fn model(&self) -> &'m Model<S> {
        self.model
    }

    /// Tape handle of parameter `index` (storage order).
    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn item_embedding_var(&self) -> Var {
        self.vars[self.model.layout.item]
    }

    pub fn phi_var(&self) -> Var {
        self.vars[self.model.layout.phi]
    }

    /// `avg‖E‖` frozen at the start of the pass.
    pub fn avg_norm(&self) -> S {
        self.avg_norm
    }

    pub fn token_counts(&self) -> (usize, usize, usize) {
        (self.n_context, self.n_history, self.n_reason)
    }

    /// Per-parameter gradients in storage order.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<S>) -> Vec<Option<&'g [S]>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }

    pub(super) fn take_attention(&mut self) -> Option<Vec<Vec<Vec<AttnRow<S>>>>> {
        self.attention.take()
    }

    fn p(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row_bias(y, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = S::one() / (S::one() - *rate);
        let p = rate.as_f64();
        let mask = (0..self.tape.value(x).len()).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect();
        self.tape.mul_const(x, mask)
    }

    fn check_inputs(&self, context: &[ItemId], history: &[ItemId]) -> Result<()> {
        let cfg = &self.model.config;
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if history.len() > cfg.max_history {
            return Err(Error::InvalidParameter(format!(
                "history length {} exceeds {}",
                history.len(),
                cfg.max_history
            )));
        }
        if context.len() > cfg.max_context {
            return Err(Error::InvalidParameter(format!("context size {} exceeds {}", context.len(), cfg.max_context)));
        }
        if self.n_context + self.n_history > 0 {
            return Err(Error::InvalidParameter("forward pass already encoded a prefix".into()));
        }
        Ok(())
    }

    fn embed_prefix(&mut self, context: &[ItemId], history: &[ItemId]) -> Result<Vec<Var>> {
        let model = self.model;
        let (cfg, vocab, layout) = (&model.config, &model.vocab, &model.layout);
        let e = self.p(layout.item);
        let mut parts = Vec::with_capacity(2);
        if !context.is_empty() {
            let rows = vocab.rows(context)?;
            let items = self.tape.gather_rows(e, &rows)?;
            let slots: Vec<usize> = (0..context.len()).collect();
            let pos = self.tape.gather_rows(self.vars[layout.ctx_pos], &slots)?;
            parts.push(self.tape.add(items, pos)?);
        }
        let rows = vocab.rows(history)?;
        let items = self.tape.gather_rows(e, &rows)?;
        let offset = cfg.max_history - history.len();
        let slots: Vec<usize> = (offset..cfg.max_history).collect();
        let pos = self.tape.gather_rows(self.vars[layout.hist_pos], &slots)?;
        parts.push(self.tape.add(items, pos)?);
        Ok(parts)
    }

    fn embed_state(&mut self, r: Var, step: usize) -> Result<Var> {
        if step >= self.model.config.max_reason {
            return Err(Error::StepOutOfRange { step: step + 1, max: self.model.config.max_reason });
        }
        let pos = self.tape.slice_rows(self.vars[self.model.layout.step_pos], step, 1)?;
        self.tape.add(r, pos)
    }

    fn prefix_mask(&self, n_context: usize, n: usize) -> Vec<S> {
        let mut mask = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let visible = if i < n_context { j < n_context } else { j <= i };
                if !visible {
                    mask[i * n + j] = S::neg_infinity();
                }
            }
        }
        mask
    }

    /// Encodes context and history; returns final hidden states, one row per token.
    pub fn encode_prefix(&mut self, context: &[ItemId], history: &[ItemId]) -> Result<Var> {
        self.check_inputs(context, history)?;
        let parts = self.embed_prefix(context, history)?;
        self.n_context = context.len();
        self.n_history = history.len();
        let x = self.tape.concat_rows(&parts)?;
        let n = self.n_context + self.n_history;
        let mask = self.prefix_mask(self.n_context, n);
        self.run_block(x, Some(mask), 0)
    }

    /// Encodes `[context ∥ history ∥ states]` in one pass with an explicit mask.
    pub fn encode_full(&mut self, context: &[ItemId], history: &[ItemId], states: &[Vec<S>]) -> Result<Var> {
        self.check_inputs(context, history)?;
        let mut parts = self.embed_prefix(context, history)?;
        let d = self.model.config.d;
        for (t, s) in states.iter().enumerate() {
            if s.len() != d {
                return Err(Error::Shape { op: "encode_full", detail: format!("state width {} vs {d}", s.len()) });
            }
            let r = self.tape.constant_matrix(1, d, s.clone());
            parts.push(self.embed_state(r, t)?);
        }
        self.n_context = context.len();
        self.n_history = history.len();
        self.n_reason = states.len();
        let x = self.tape.concat_rows(&parts)?;
        let n = self.n_context + self.n_history + self.n_reason;
        let mask = self.prefix_mask(self.n_context, n);
        self.run_block(x, Some(mask), 0)
    }

    /// Hidden state at the last history position.
    pub fn initial_state(&mut self, hidden: Var) -> Result<Var> {
        let row = self.n_context + self.n_history - 1;
        self.tape.slice_rows(hidden, row, 1)
    }

    /// Appends one latent state as a reasoning token; returns its hidden state.
    pub fn append_state(&mut self, r: Var) -> Result<Var> {
        if self.n_history == 0 {
            return Err(Error::InvalidParameter("append_state before encode_prefix".into()));
        }
        let x = self.embed_state(r, self.n_reason)?;
        let first = self.n_context + self.n_history + self.n_reason;
        self.n_reason += 1;
        self.run_block(x, None, first)
    }

    /// `φ · h/‖h‖ · avg‖E‖`, or `h` unchanged when rescaling is disabled.
    pub fn rescale(&mut self, h: Var) -> Result<Var> {
        if !self.model.config.rescale {
            return Ok(h);
        }
        let unit = self.tape.normalize_rows(h)?;
        let phi = self.phi_var();
        let scaled = self.tape.mul_scalar(unit, phi)?;
        Ok(self.tape.scale(scaled, self.avg_norm))
    }

    /// Logits over the whole vocabulary, `r · Eᵀ`.
    pub fn logits(&mut self, r: Var) -> Result<Var> {
        let e = self.item_embedding_var();
        self.tape.matmul_nt(r, e)
    }

    /// Runs every layer. With a mask, `x` holds all tokens from position 0 and
    /// the caches are replaced; without one, `x` holds new tokens starting at
    /// `first` that attend to the cache and themselves.
    fn run_block(&mut self, x: Var, mask: Option<Vec<S>>, first: usize) -> Result<Var> {
        let x = self.dropout(x)?;
        let mut h = x;
        for l in 0..self.model.config.layers {
            let s = self.model.layout.layers[l];
            let (g1, b1) = (self.p(s.ln1_g), self.p(s.ln1_b));
            let a = self.tape.layer_norm(h, g1, b1)?;
            let q = self.linear(a, s.wq, s.bq)?;
            let mut k = self.linear(a, s.wk, s.bk)?;
            let mut v = self.linear(a, s.wv, s.bv)?;
            if mask.is_none() {
                let (kc, vc) = self.kv[l].ok_or_else(|| Error::InvalidParameter("no cached prefix".into()))?;
                k = self.tape.concat_rows(&[kc, k])?;
                v = self.tape.concat_rows(&[vc, v])?;
            }
            self.kv[l] = Some((k, v));
            let att = self.attend(l, q, k, v, mask.as_deref(), first)?;
            let o = self.linear(att, s.wo, s.bo)?;
            let o = self.dropout(o)?;
            h = self.tape.add(h, o)?;

            let (g2, b2) = (self.p(s.ln2_g), self.p(s.ln2_b));
            let a = self.tape.layer_norm(h, g2, b2)?;
            let f = self.linear(a, s.w1, s.b1)?;
            let f = self.tape.gelu(f);
            let f = self.linear(f, s.w2, s.b2)?;
            let f = self.dropout(f)?;
            h = self.tape.add(h, f)?;
        }
        let layout = &self.model.layout;
        let (g, b) = (self.vars[layout.lnf_g], self.vars[layout.lnf_b]);
        self.tape.layer_norm(h, g, b)
    }

    fn attend(&mut self, layer: usize, q: Var, k: Var, v: Var, mask: Option<&[S]>, first: usize) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let dh = cfg.head_dim();
        let scale = S::one() / S::of_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = self.tape.slice_cols(q, head * dh, dh)?;
            let kh = self.tape.slice_cols(k, head * dh, dh)?;
            let vh = self.tape.slice_cols(v, head * dh, dh)?;
            let s = self.tape.matmul_nt(qh, kh)?;
            let mut s = self.tape.scale(s, scale);
            if let Some(m) = mask {
                s = self.tape.add_const(s, m)?;
            }
            let a = self.tape.softmax_rows(s, S::one())?;
            if let Some(rec) = self.attention.as_mut() {
                let [rows, cols] = self.tape.shape(a);
                let vals = self.tape.value(a);
                for r in 0..rows {
                    rec[layer][head].push((first + r, vals[r * cols..(r + 1) * cols].to_vec()));
                }
            }
            outs.push(self.tape.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.tape.concat_cols(&outs)
        }
    }
}
