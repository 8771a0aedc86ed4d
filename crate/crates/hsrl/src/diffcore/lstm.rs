//! Dense four-gate LSTM cell on the tape.
//!
//! Gate order inside the stacked weight/bias arrays is input, forget,
//! candidate, output. The forget-gate bias rows are initialized to 1.0.

use crate::diffcore::tape::{Bindings, Tape, Var};
use crate::diffcore::{Parameter, SeededRng};
use crate::{HsrlError, Result};

#[derive(Clone, Debug)]
pub struct DenseLstmParams {
    /// [4*hidden, input] input-to-hidden weights.
    pub wx: Parameter,
    /// [4*hidden, hidden] hidden-to-hidden weights.
    pub wh: Parameter,
    /// [4*hidden] gate biases.
    pub b: Parameter,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl DenseLstmParams {
    pub fn init(name: &str, input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        let wx = Parameter::uniform(format!("{name}.wx"), &[4 * hidden_dim, input_dim], rng);
        let wh = Parameter::uniform(format!("{name}.wh"), &[4 * hidden_dim, hidden_dim], rng);
        let mut b = Parameter::zeros(format!("{name}.b"), &[4 * hidden_dim]);
        for v in &mut b.data.values_mut()[hidden_dim..2 * hidden_dim] {
            *v = 1.0;
        }
        DenseLstmParams {
            wx,
            wh,
            b,
            input_dim,
            hidden_dim,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.wx);
        f(&self.wh);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.wx);
        f(&mut self.wh);
        f(&mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape, bindings: &mut Bindings) -> BoundDenseLstm {
        BoundDenseLstm {
            wx: bindings.bind(tape, &self.wx),
            wh: bindings.bind(tape, &self.wh),
            b: bindings.bind(tape, &self.b),
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// LSTM parameters bound onto a tape for one forward/backward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundDenseLstm {
    wx: Var,
    wh: Var,
    b: Var,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl BoundDenseLstm {
    /// One LSTM update. Returns (h, c).
    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        if tape.value(x).len() != self.input_dim {
            return Err(HsrlError::dimension(
                "lstm_step",
                format!("input of length {}", self.input_dim),
                format!("length {}", tape.value(x).len()),
            ));
        }
        if tape.value(h_prev).len() != hd || tape.value(c_prev).len() != hd {
            return Err(HsrlError::dimension(
                "lstm_step",
                format!("state of length {hd}"),
                format!(
                    "h {} / c {}",
                    tape.value(h_prev).len(),
                    tape.value(c_prev).len()
                ),
            ));
        }
        let zx = tape.matvec(self.wx, x)?;
        let zh = tape.matvec(self.wh, h_prev)?;
        let z0 = tape.add(zx, zh)?;
        let z = tape.add(z0, self.b)?;

        let zi = tape.slice(z, 0, hd)?;
        let zf = tape.slice(z, hd, hd)?;
        let zg = tape.slice(z, 2 * hd, hd)?;
        let zo = tape.slice(z, 3 * hd, hd)?;

        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act)?;
        Ok((h, c))
    }
}
