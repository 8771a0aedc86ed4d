//! Reverse-mode tape.
//!
//! Forward operations append nodes to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates exact gradients for every node, including
//! the leaves bound from [`Parameter`]s. Ops validate shapes up front and
//! return a dimension error naming both shapes on mismatch.

use crate::diffcore::{NumArray, Parameter};
use crate::{HsrlError, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { w: Var, x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    Pick { a: Var, index: usize },
    Row { m: Var, index: usize, cols: usize },
    Concat { a: Var, b: Var },
    Slice { a: Var, start: usize },
    Sum { a: Var },
}

struct Node {
    value: NumArray,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, or None if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Dot product with four independent accumulators so the inner loop
// vectorizes; the summation order is fixed, keeping runs bit-reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        total += a[j] * b[j];
    }
    total
}

#[inline]
fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    /// Scalar value of a shape-[1] node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: NumArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives a gradient but feeds nothing upstream.
    pub fn leaf(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.leaf(NumArray::zeros(&[len]))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(NumArray::scalar(x))
    }

    /// Bind a parameter's current data as a leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.data.clone())
    }

    /// Matrix-vector product. `w` is [m, n], `x` is [n]; result is [m].
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.value(w).dims2()?;
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.len() != n {
            return Err(HsrlError::dimension(
                "matvec",
                format!("vector of length {n} for matrix [{m}, {n}]"),
                format!("shape {:?}", xv.shape()),
            ));
        }
        let wv = self.value(w).values();
        let xs = self.value(x).values();
        let mut out = vec![0.0; m];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&wv[r * n..(r + 1) * n], xs);
        }
        Ok(self.push(NumArray::vector(out), Op::MatVec { w, x }))
    }

    /// Wx + b.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(NumArray::from_vec(&shape, out)?, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(NumArray::from_vec(&shape, out)?, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| k * x).collect();
        let shape = self.value(a).shape().to_vec();
        let value = NumArray::from_vec(&shape, out).expect("scale preserves shape");
        self.push(value, Op::Scale { a, k })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let value = NumArray::from_vec(&shape, out).expect("sigmoid preserves shape");
        self.push(value, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        let value = NumArray::from_vec(&shape, out).expect("tanh preserves shape");
        self.push(value, Op::Tanh { a })
    }

    fn check_vector(&self, context: &str, a: Var) -> Result<usize> {
        let v = self.value(a);
        if v.shape().len() != 1 || v.is_empty() {
            return Err(HsrlError::dimension(
                context,
                "a non-empty vector",
                format!("shape {:?}", v.shape()),
            ));
        }
        Ok(v.len())
    }

    /// Numerically stabilized softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_vector("softmax", a)?;
        let vals = self.value(a).values();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        Ok(self.push(NumArray::vector(out), Op::Softmax { a }))
    }

    /// log softmax, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_vector("log_softmax", a)?;
        let vals = self.value(a).values();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = vals.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let out: Vec<f64> = vals.iter().map(|x| x - log_z).collect();
        Ok(self.push(NumArray::vector(out), Op::LogSoftmax { a }))
    }

    /// Select one entry of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.check_vector("pick", a)?;
        if index >= len {
            return Err(HsrlError::Index(format!(
                "pick index {index} out of range for vector of length {len}"
            )));
        }
        let value = NumArray::scalar(self.value(a).values()[index]);
        Ok(self.push(value, Op::Pick { a, index }))
    }

    /// Extract row `index` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.value(m).dims2()?;
        if index >= rows {
            return Err(HsrlError::Index(format!(
                "row index {index} out of range for matrix with {rows} rows"
            )));
        }
        let value =
            NumArray::vector(self.value(m).values()[index * cols..(index + 1) * cols].to_vec());
        Ok(self.push(value, Op::Row { m, index, cols }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_vector("concat", a)?;
        self.check_vector("concat", b)?;
        let mut out = self.value(a).values().to_vec();
        out.extend_from_slice(self.value(b).values());
        Ok(self.push(NumArray::vector(out), Op::Concat { a, b }))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.check_vector("slice", a)?;
        if start + len > total {
            return Err(HsrlError::Index(format!(
                "slice [{start}, {}) out of range for vector of length {total}",
                start + len
            )));
        }
        let value = NumArray::vector(self.value(a).values()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice { a, start }))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).values().iter().sum();
        self.push(NumArray::scalar(total), Op::Sum { a })
    }

    /// True if every node value on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    fn check_same_shape(&self, context: &str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(HsrlError::dimension(
                context,
                format!("matching shapes (left {sa:?})"),
                format!("right {sb:?}"),
            ));
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node. Returns a gradient per node;
    /// leaves bound from parameters can be read out via [`Grads::wrt`].
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(HsrlError::dimension(
                "backward",
                "a scalar loss",
                format!("shape {:?}", loss_val.shape()),
            ));
        }
        if !loss_val.item().is_finite() {
            return Err(HsrlError::Numeric(format!(
                "backward from non-finite loss {}",
                loss_val.item()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatVec { w, x } => {
                    let (m, n) = self.value(*w).dims2().expect("validated in forward");
                    let xs = self.nodes[x.0].value.values();
                    let ws = self.nodes[w.0].value.values();
                    {
                        let gw = Self::grad_slot(&mut grads, *w, m * n);
                        for r in 0..m {
                            axpy(&mut gw[r * n..(r + 1) * n], gy[r], xs);
                        }
                    }
                    let gx = Self::grad_slot(&mut grads, *x, n);
                    for r in 0..m {
                        axpy(gx, gy[r], &ws[r * n..(r + 1) * n]);
                    }
                }
                Op::Add { a, b } => {
                    axpy(Self::grad_slot(&mut grads, *a, gy.len()), 1.0, &gy);
                    axpy(Self::grad_slot(&mut grads, *b, gy.len()), 1.0, &gy);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.values().to_vec();
                    let bv = self.nodes[b.0].value.values();
                    {
                        let ga = Self::grad_slot(&mut grads, *a, gy.len());
                        for i in 0..gy.len() {
                            ga[i] += gy[i] * bv[i];
                        }
                    }
                    let gb = Self::grad_slot(&mut grads, *b, gy.len());
                    for i in 0..gy.len() {
                        gb[i] += gy[i] * av[i];
                    }
                }
                Op::Scale { a, k } => {
                    axpy(Self::grad_slot(&mut grads, *a, gy.len()), *k, &gy);
                }
                Op::Sigmoid { a } => {
                    let y = self.nodes[id].value.values();
                    let ga = Self::grad_slot(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh { a } => {
                    let y = self.nodes[id].value.values();
                    let ga = Self::grad_slot(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Softmax { a } => {
                    let y = self.nodes[id].value.values();
                    let dot_y_gy: f64 = y.iter().zip(&gy).map(|(yi, gi)| yi * gi).sum();
                    let ga = Self::grad_slot(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += y[i] * (gy[i] - dot_y_gy);
                    }
                }
                Op::LogSoftmax { a } => {
                    let y = self.nodes[id].value.values();
                    let gy_sum: f64 = gy.iter().sum();
                    let ga = Self::grad_slot(&mut grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] - y[i].exp() * gy_sum;
                    }
                }
                Op::Pick { a, index } => {
                    let len = self.nodes[a.0].value.len();
                    Self::grad_slot(&mut grads, *a, len)[*index] += gy[0];
                }
                Op::Row { m, index, cols } => {
                    let len = self.nodes[m.0].value.len();
                    let gm = Self::grad_slot(&mut grads, *m, len);
                    axpy(&mut gm[index * cols..(index + 1) * cols], 1.0, &gy);
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[a.0].value.len();
                    let lb = self.nodes[b.0].value.len();
                    axpy(Self::grad_slot(&mut grads, *a, la), 1.0, &gy[..la]);
                    axpy(Self::grad_slot(&mut grads, *b, lb), 1.0, &gy[la..la + lb]);
                }
                Op::Slice { a, start } => {
                    let len = self.nodes[a.0].value.len();
                    let ga = Self::grad_slot(&mut grads, *a, len);
                    axpy(&mut ga[*start..*start + gy.len()], 1.0, &gy);
                }
                Op::Sum { a } => {
                    let len = self.nodes[a.0].value.len();
                    let ga = Self::grad_slot(&mut grads, *a, len);
                    for g in ga.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            grads[id] = Some(gy);
        }
        Ok(Grads { by_node: grads })
    }

    fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Tracks parameter leaves so gradients can be pushed back after backward.
pub struct Bindings {
    entries: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings {
            entries: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> Var {
        let var = tape.param(p);
        self.entries.push((p.name.clone(), var));
        var
    }

    /// Accumulate tape gradients into the matching `Parameter.grad` buffers,
    /// scaled by `k`.
    pub fn accumulate_scaled(
        &self,
        grads: &Grads,
        k: f64,
        params: &mut dyn crate::diffcore::ParamSet,
    ) {
        let mut scaled: Vec<(&str, Vec<f64>)> = Vec::new();
        for (name, var) in &self.entries {
            if let Some(g) = grads.wrt(*var) {
                scaled.push((name, g.iter().map(|v| k * v).collect()));
            }
        }
        params.visit_params_mut(&mut |p| {
            for (name, g) in &scaled {
                if *name == p.name {
                    p.add_grad(g);
                }
            }
        });
    }

    /// Gradients keyed by parameter name (zeros when unused by the loss).
    pub fn grad_map(
        &self,
        grads: &Grads,
        tape: &Tape,
    ) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out = std::collections::BTreeMap::new();
        for (name, var) in &self.entries {
            let g = match grads.wrt(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(*var).len()],
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Default for Bindings {
    fn default() -> Self {
        Bindings::new()
    }
}
