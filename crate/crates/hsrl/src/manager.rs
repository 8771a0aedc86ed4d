//! High-level decoder: an LSTM that emits one topic distribution per image
//! slot.
//!
//! The image-sequence content vector v̄ is projected and fed as the LSTM's
//! initial input; afterwards each step consumes the Worker's final hidden
//! state from the previous sentence. The topic head concatenates the current
//! image feature with the LSTM output and applies a one-hidden-layer MLP
//! (tanh, width n_m) followed by a softmax over the K topics.

use serde::{Deserialize, Serialize};

use crate::diffcore::lstm::{BoundDenseLstm, DenseLstmParams};
use crate::diffcore::tape::{Bindings, Tape, Var};
use crate::diffcore::{AffineParams, Parameter, SeededRng};
use crate::{HsrlError, Result};

/// A point on the K-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicDistribution {
    pub probs: Vec<f64>,
}

impl TopicDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let d = TopicDistribution { probs };
        d.validate()?;
        Ok(d)
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(HsrlError::Index(format!(
                "topic {index} out of range for K={k}"
            )));
        }
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(TopicDistribution { probs })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Simplex membership: entries in [0, 1] summing to 1 within 1e-12.
    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(HsrlError::dimension(
                "TopicDistribution",
                "at least one topic",
                "empty",
            ));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(HsrlError::Numeric(format!(
                "topic distribution off the simplex (sum {sum})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerDims {
    pub feature_dim: usize,
    /// Manager LSTM hidden size n_m.
    pub hidden_dim: usize,
    /// Worker hidden size n_h; the LSTM input dimension.
    pub worker_hidden: usize,
    pub topics: usize,
}

impl ManagerDims {
    pub fn ctx_dim(&self) -> usize {
        self.feature_dim + self.hidden_dim
    }
}

#[derive(Clone, Debug)]
pub struct ManagerParams {
    pub dims: ManagerDims,
    pub lstm: DenseLstmParams,
    /// d_v -> n_h projection of v̄ for the initial LSTM input.
    pub v_proj: AffineParams,
    /// W1: (d_v + n_m) -> n_m, the MLP hidden layer of the topic head.
    pub head_hidden: AffineParams,
    /// n_m -> K output layer of the topic head.
    pub head_out: AffineParams,
}

impl ManagerParams {
    pub fn init(dims: ManagerDims, rng: &mut SeededRng) -> Self {
        ManagerParams {
            dims,
            lstm: DenseLstmParams::init("manager.lstm", dims.worker_hidden, dims.hidden_dim, rng),
            v_proj: AffineParams::init("manager.v_proj", dims.worker_hidden, dims.feature_dim, rng),
            head_hidden: AffineParams::init(
                "manager.head_hidden",
                dims.hidden_dim,
                dims.ctx_dim(),
                rng,
            ),
            head_out: AffineParams::init("manager.head_out", dims.topics, dims.hidden_dim, rng),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.lstm.visit(f);
        self.v_proj.visit(f);
        self.head_hidden.visit(f);
        self.head_out.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.lstm.visit_mut(f);
        self.v_proj.visit_mut(f);
        self.head_hidden.visit_mut(f);
        self.head_out.visit_mut(f);
    }

    pub fn bind(&self, tape: &mut Tape, bindings: &mut Bindings) -> BoundManager {
        BoundManager {
            dims: self.dims,
            lstm: self.lstm.bind(tape, bindings),
            v_proj_w: bindings.bind(tape, &self.v_proj.w),
            v_proj_b: bindings.bind(tape, &self.v_proj.b),
            head_hidden_w: bindings.bind(tape, &self.head_hidden.w),
            head_hidden_b: bindings.bind(tape, &self.head_hidden.b),
            head_out_w: bindings.bind(tape, &self.head_out.w),
            head_out_b: bindings.bind(tape, &self.head_out.b),
        }
    }
}

/// Recurrent state of the Manager: hidden s and the LSTM cell carried
/// alongside it.
#[derive(Clone, Copy, Debug)]
pub struct ManagerState {
    pub s: Var,
    pub cell: Var,
}

/// Output of one Manager step.
#[derive(Clone, Copy, Debug)]
pub struct ManagerStep {
    /// Context vector c = [v, s].
    pub ctx: Var,
    /// Topic distribution g (softmax of the head logits).
    pub g: Var,
    /// log g, for the NLL loss.
    pub log_g: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundManager {
    pub dims: ManagerDims,
    lstm: BoundDenseLstm,
    v_proj_w: Var,
    v_proj_b: Var,
    head_hidden_w: Var,
    head_hidden_b: Var,
    head_out_w: Var,
    head_out_b: Var,
}

impl BoundManager {
    /// Consume v̄ as the LSTM's initial input, starting from a zero state.
    pub fn init_state(&self, tape: &mut Tape, v_bar: Var) -> Result<ManagerState> {
        if tape.value(v_bar).len() != self.dims.feature_dim {
            return Err(HsrlError::dimension(
                "manager_init",
                format!("content vector of length {}", self.dims.feature_dim),
                format!("length {}", tape.value(v_bar).len()),
            ));
        }
        let x0 = tape.affine(v_bar, self.v_proj_w, self.v_proj_b)?;
        let h0 = tape.zeros(self.dims.hidden_dim);
        let c0 = tape.zeros(self.dims.hidden_dim);
        let (s, cell) = self.lstm.step(tape, x0, h0, c0)?;
        Ok(ManagerState { s, cell })
    }

    /// One Manager step: advance the LSTM on the Worker's last hidden state,
    /// then emit the context vector and a new topic distribution.
    pub fn step(
        &self,
        tape: &mut Tape,
        state: ManagerState,
        v: Var,
        h_worker: Var,
    ) -> Result<(ManagerState, ManagerStep)> {
        if tape.value(v).len() != self.dims.feature_dim {
            return Err(HsrlError::dimension(
                "manager_step",
                format!("image feature of length {}", self.dims.feature_dim),
                format!("length {}", tape.value(v).len()),
            ));
        }
        let (s, cell) = self.lstm.step(tape, h_worker, state.s, state.cell)?;
        let ctx = tape.concat(v, s)?;
        let hidden_pre = tape.affine(ctx, self.head_hidden_w, self.head_hidden_b)?;
        let hidden = tape.tanh(hidden_pre);
        let logits = tape.affine(hidden, self.head_out_w, self.head_out_b)?;
        let g = tape.softmax(logits)?;
        let log_g = tape.log_softmax(logits)?;
        Ok((ManagerState { s, cell }, ManagerStep { ctx, g, log_g }))
    }

    /// The emitted distribution as a value-level [`TopicDistribution`].
    pub fn topic_distribution(&self, tape: &Tape, step: &ManagerStep) -> Result<TopicDistribution> {
        TopicDistribution::new(tape.value(step.g).values().to_vec())
    }
}

/// Negative log likelihood of a golden topic sequence under the emitted
/// distributions: -sum_l ln g_l[golden_l].
pub fn manager_nll(gs: &[TopicDistribution], golden: &[usize]) -> Result<f64> {
    if gs.len() != golden.len() {
        return Err(HsrlError::Alignment(format!(
            "{} distributions vs {} golden topics",
            gs.len(),
            golden.len()
        )));
    }
    let mut total = 0.0;
    for (g, &target) in gs.iter().zip(golden) {
        if target >= g.k() {
            return Err(HsrlError::Index(format!(
                "golden topic {target} out of range for K={}",
                g.k()
            )));
        }
        total -= g.probs[target].ln();
    }
    Ok(total)
}

/// Tape-level counterpart of [`manager_nll`]: sum of -log g_l[golden_l] over
/// the steps, as a scalar node.
pub fn manager_nll_terms(tape: &mut Tape, steps: &[ManagerStep], golden: &[usize]) -> Result<Var> {
    if steps.len() != golden.len() {
        return Err(HsrlError::Alignment(format!(
            "{} manager steps vs {} golden topics",
            steps.len(),
            golden.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (step, &target) in steps.iter().zip(golden) {
        let picked = tape.pick(step.log_g, target)?;
        acc = Some(match acc {
            None => picked,
            Some(prev) => tape.add(prev, picked)?,
        });
    }
    let total = acc.ok_or_else(|| HsrlError::Alignment("empty topic sequence".into()))?;
    Ok(tape.scale(total, -1.0))
}
