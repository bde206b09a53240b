//! Causal forward pass and the two loss regimes: span prediction and
//! full-sequence language modeling.

use std::collections::{BTreeMap, HashSet};

use super::{LayerGroupId, Model, LAYER_NORM_EPS};
use crate::error::{Result, TglError};
use crate::tensor::{Element, GradMap, Graph, NodeId, ParamId, Tensor};

/// Which parameter leaves are tracked for gradients on a forward tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracking {
    /// Evaluation only; backward is never called.
    None,
    /// Trainable parameters, minus any plan-frozen group.
    Trainable,
    /// Every parameter regardless of trainability (profiling regime).
    All,
}

/// A recorded forward pass plus handles into it.
pub struct Tape<T: Element> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    pub param_nodes: BTreeMap<ParamId, NodeId>,
}

/// Half-open span of token positions scored by a span loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

impl<T: Element> Model<T> {
    fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TglError::input("empty token sequence".to_string()));
        }
        if tokens.len() > self.cfg.context_length {
            return Err(TglError::input(format!(
                "sequence length {} exceeds context_length {}",
                tokens.len(),
                self.cfg.context_length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TglError::input(format!(
                "token id {bad} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn is_tracked(
        &self,
        id: ParamId,
        tracking: Tracking,
        frozen: Option<&HashSet<LayerGroupId>>,
    ) -> bool {
        match tracking {
            Tracking::None => false,
            Tracking::All => true,
            Tracking::Trainable => {
                let p = self.store.get(id);
                p.trainable && !frozen.map_or(false, |f| f.contains(&p.group))
            }
        }
    }

    /// Record one causal forward pass over `tokens`, producing `[T, V]`
    /// logits. Position `t` depends only on tokens at positions `<= t`.
    pub fn forward_tape(
        &self,
        tokens: &[usize],
        tracking: Tracking,
        frozen: Option<&HashSet<LayerGroupId>>,
    ) -> Result<Tape<T>> {
        self.validate_tokens(tokens)?;
        let mut graph = Graph::new();
        let mut param_nodes: BTreeMap<ParamId, NodeId> = BTreeMap::new();
        let mut leaf = |g: &mut Graph<T>, id: ParamId| -> NodeId {
            *param_nodes.entry(id).or_insert_with(|| {
                let mut value = self.store.value(id).clone();
                let tracked = self.is_tracked(id, tracking, frozen);
                value.set_requires_grad(tracked);
                g.param_leaf(id, value, tracked)
            })
        };

        let g = &mut graph;
        let t_len = tokens.len();
        let positions: Vec<usize> = (0..t_len).collect();

        let wte = leaf(g, self.layout.wte);
        let wpe = leaf(g, self.layout.wpe);
        let tok_emb = g.gather(wte, tokens)?;
        let pos_emb = g.gather(wpe, &positions)?;
        let mut x = g.add(tok_emb, pos_emb)?;

        let n_heads = self.cfg.n_heads;
        let head_dim = self.cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        for (b, ids) in self.layout.blocks.iter().enumerate() {
            // Attention sublayer, pre-norm.
            let ln1_g = leaf(g, ids.ln1_g);
            let ln1_b = leaf(g, ids.ln1_b);
            let x1 = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;

            let wq = leaf(g, ids.wq);
            let bq = leaf(g, ids.bq);
            let wk = leaf(g, ids.wk);
            let bk = leaf(g, ids.bk);
            let wv = leaf(g, ids.wv);
            let bv = leaf(g, ids.bv);

            let mut q = g.matmul(x1, wq)?;
            q = g.add_bias(q, bq)?;
            let mut k = g.matmul(x1, wk)?;
            k = g.add_bias(k, bk)?;
            let mut v = g.matmul(x1, wv)?;
            v = g.add_bias(v, bv)?;

            if let Some(lora) = self.layout.lora.iter().find(|l| l.block == b) {
                let lc = self.cfg.lora.as_ref().expect("lora config present");
                let s = lc.scaling();
                let qa = leaf(g, lora.q_a);
                let qb = leaf(g, lora.q_b);
                let down = g.matmul_nt(x1, qa)?;
                let up = g.matmul_nt(down, qb)?;
                let delta = g.scale(up, s)?;
                q = g.add(q, delta)?;

                let va = leaf(g, lora.v_a);
                let vb = leaf(g, lora.v_b);
                let down = g.matmul_nt(x1, va)?;
                let up = g.matmul_nt(down, vb)?;
                let delta = g.scale(up, s)?;
                v = g.add(v, delta)?;
            }

            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let lo = h * head_dim;
                let hi = lo + head_dim;
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let scores = g.causal_mask(scores)?;
                let probs = g.softmax_rows(scores)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let merged = g.concat_cols(&heads)?;
            let wo = leaf(g, ids.wo);
            let bo = leaf(g, ids.bo);
            let proj = g.matmul(merged, wo)?;
            let proj = g.add_bias(proj, bo)?;
            x = g.add(x, proj)?;

            // MLP sublayer, pre-norm.
            let ln2_g = leaf(g, ids.ln2_g);
            let ln2_b = leaf(g, ids.ln2_b);
            let x2 = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            let w_fc = leaf(g, ids.w_fc);
            let b_fc = leaf(g, ids.b_fc);
            let h = g.matmul(x2, w_fc)?;
            let h = g.add_bias(h, b_fc)?;
            let h = g.gelu(h)?;
            let w_proj = leaf(g, ids.w_proj);
            let b_proj = leaf(g, ids.b_proj);
            let m = g.matmul(h, w_proj)?;
            let m = g.add_bias(m, b_proj)?;
            x = g.add(x, m)?;
        }

        let lnf_g = leaf(g, self.layout.lnf_g);
        let lnf_b = leaf(g, self.layout.lnf_b);
        let hfinal = g.layer_norm(x, lnf_g, lnf_b, LAYER_NORM_EPS)?;

        let logits = match self.layout.lm_head {
            Some(head) => {
                let w = leaf(g, head);
                g.matmul(hfinal, w)?
            }
            None => {
                let wte = leaf(g, self.layout.wte);
                g.matmul_nt(hfinal, wte)?
            }
        };

        Ok(Tape {
            graph,
            logits,
            param_nodes,
        })
    }

    /// Causal logits `[T, V]` as plain values.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let tape = self.forward_tape(tokens, Tracking::None, None)?;
        Ok(tape.graph.value(tape.logits).clone())
    }

    fn validate_span(&self, tokens: &[usize], span: Span) -> Result<()> {
        if span.is_empty() {
            return Err(TglError::input(format!(
                "empty span [{}, {})",
                span.start, span.end
            )));
        }
        if span.start == 0 {
            return Err(TglError::input(
                "span starts at position 0; a span needs left context".to_string(),
            ));
        }
        if span.end > tokens.len() {
            return Err(TglError::input(format!(
                "span end {} exceeds sequence length {}",
                span.end,
                tokens.len()
            )));
        }
        Ok(())
    }

    /// Attach a span loss to a recorded forward: mean NLL over positions in
    /// `span`, each predicted from all preceding tokens.
    pub fn span_loss_on(&self, tape: &mut Tape<T>, tokens: &[usize], span: Span) -> Result<NodeId> {
        self.validate_span(tokens, span)?;
        let t_len = tokens.len();
        let mut targets = vec![0usize; t_len];
        let mut mask = vec![false; t_len];
        for i in 0..t_len - 1 {
            targets[i] = tokens[i + 1];
            let predicted_pos = i + 1;
            mask[i] = predicted_pos >= span.start && predicted_pos < span.end;
        }
        tape.graph.cross_entropy_masked(tape.logits, &targets, &mask)
    }

    /// Forward + span loss in one call.
    pub fn span_loss_tape(
        &self,
        tokens: &[usize],
        span: Span,
        tracking: Tracking,
        frozen: Option<&HashSet<LayerGroupId>>,
    ) -> Result<(Tape<T>, NodeId)> {
        self.validate_span(tokens, span)?;
        let mut tape = self.forward_tape(tokens, tracking, frozen)?;
        let loss = self.span_loss_on(&mut tape, tokens, span)?;
        Ok((tape, loss))
    }

    /// Full-sequence LM loss: mean NLL over every predictable position,
    /// i.e. a span loss covering `[1, T)`.
    pub fn lm_loss_tape(
        &self,
        tokens: &[usize],
        tracking: Tracking,
        frozen: Option<&HashSet<LayerGroupId>>,
    ) -> Result<(Tape<T>, NodeId)> {
        if tokens.len() < 2 {
            return Err(TglError::input(format!(
                "lm loss needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        self.span_loss_tape(tokens, Span::new(1, tokens.len()), tracking, frozen)
    }

    pub fn span_loss_value(&self, tokens: &[usize], span: Span) -> Result<f64> {
        let (tape, loss) = self.span_loss_tape(tokens, span, Tracking::None, None)?;
        Ok(tape.graph.value(loss).scalar_value().to_f64())
    }

    pub fn lm_loss_value(&self, tokens: &[usize]) -> Result<f64> {
        let (tape, loss) = self.lm_loss_tape(tokens, Tracking::None, None)?;
        Ok(tape.graph.value(loss).scalar_value().to_f64())
    }

    /// Gradients of the span loss w.r.t. every parameter (profiling regime).
    pub fn span_loss_grads(&self, tokens: &[usize], span: Span) -> Result<GradMap<T>> {
        let (tape, loss) = self.span_loss_tape(tokens, span, Tracking::All, None)?;
        tape.graph.backward(loss)
    }

    /// Gradients of the LM loss w.r.t. every parameter (profiling regime).
    pub fn lm_loss_grads(&self, tokens: &[usize]) -> Result<GradMap<T>> {
        let (tape, loss) = self.lm_loss_tape(tokens, Tracking::All, None)?;
        tape.graph.backward(loss)
    }

    /// Per-token NLLs for positions in `span`, natural log.
    pub fn span_token_nlls(&self, tokens: &[usize], span: Span) -> Result<Vec<f64>> {
        self.validate_span(tokens, span)?;
        let logits = self.forward_logits(tokens)?;
        let v = logits.cols();
        let mut out = Vec::with_capacity(span.len());
        for pos in span.start..span.end {
            let row = &logits.data()[(pos - 1) * v..pos * v];
            out.push(nll_of_row(row, tokens[pos]));
        }
        Ok(out)
    }
}

fn nll_of_row<T: Element>(row: &[T], target: usize) -> f64 {
    let mut max = row[0].to_f64();
    for v in row {
        let x = v.to_f64();
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for v in row {
        sum += (v.to_f64() - max).exp();
    }
    (max + sum.ln()) - row[target].to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model<f64> {
        Model::init(ModelConfig {
            vocab_size: 13,
            context_length: 24,
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            tie_embeddings: true,
            seed: 11,
            lora: None,
        })
        .unwrap()
    }

    #[test]
    fn logits_finite_on_fresh_model() {
        let m = tiny();
        let logits = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(logits.shape(), &[5, 13]);
        assert!(logits.all_finite());
    }

    #[test]
    fn causality_changing_last_token() {
        let m = tiny();
        let a = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward_logits(&[1, 2, 3, 4, 9]).unwrap();
        let v = a.cols();
        // Rows before the changed position are exactly equal.
        assert_eq!(a.data()[..4 * v], b.data()[..4 * v]);
        assert_ne!(a.data()[4 * v..], b.data()[4 * v..]);
    }

    #[test]
    fn prefix_invariance() {
        let m = tiny();
        let full = m.forward_logits(&[3, 1, 4, 1, 5, 9]).unwrap();
        let prefix = m.forward_logits(&[3, 1, 4]).unwrap();
        let v = full.cols();
        assert_eq!(prefix.data()[2 * v..3 * v], full.data()[2 * v..3 * v]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(m.forward_logits(&[999]).is_err());
        assert!(m.forward_logits(&vec![1; 25]).is_err());
        assert!(m.span_loss_value(&[1, 2, 3], Span::new(0, 2)).is_err());
        assert!(m.span_loss_value(&[1, 2, 3], Span::new(2, 2)).is_err());
        assert!(m.lm_loss_value(&[1]).is_err());
    }

    #[test]
    fn span_covering_everything_equals_lm_loss() {
        let m = tiny();
        let toks = [2, 7, 1, 8, 2, 8];
        let full = m.lm_loss_value(&toks).unwrap();
        let span = m.span_loss_value(&toks, Span::new(1, 6)).unwrap();
        assert_eq!(full, span);
    }

    #[test]
    fn tokens_after_span_do_not_change_loss() {
        let m = tiny();
        let a = m
            .span_loss_value(&[2, 7, 1, 8, 2, 8], Span::new(2, 4))
            .unwrap();
        let b = m
            .span_loss_value(&[2, 7, 1, 8, 11, 3], Span::new(2, 4))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn span_token_nlls_match_span_loss() {
        let m = tiny();
        let toks = [5, 2, 9, 1, 7];
        let span = Span::new(2, 5);
        let nlls = m.span_token_nlls(&toks, span).unwrap();
        let mean: f64 = nlls.iter().sum::<f64>() / nlls.len() as f64;
        let loss = m.span_loss_value(&toks, span).unwrap();
        assert!((mean - loss).abs() < 1e-12);
    }

    #[test]
    fn duplicated_eval_is_pure() {
        let m = tiny();
        let a = m.lm_loss_value(&[1, 2, 3, 4]).unwrap();
        let b = m.lm_loss_value(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tracking_modes_control_gradmap() {
        let mut m = tiny();
        // Mark one group non-trainable; Trainable tracking must skip it.
        let frozen_group = LayerGroupId::mlp(0);
        for (_, p) in m.store.iter_mut() {
            if p.group == frozen_group {
                p.trainable = false;
            }
        }
        let toks = [1, 2, 3, 4];
        let (tape, loss) = m
            .lm_loss_tape(&toks, Tracking::Trainable, None)
            .unwrap();
        let grads = tape.graph.backward(loss).unwrap();
        for (id, p) in m.store.iter() {
            if p.group == frozen_group {
                assert!(!grads.contains(id), "{} should be untracked", p.name);
            }
        }
        let (tape, loss) = m.lm_loss_tape(&toks, Tracking::All, None).unwrap();
        let grads_all = tape.graph.backward(loss).unwrap();
        assert!(grads_all.len() > grads.len());
    }
}
