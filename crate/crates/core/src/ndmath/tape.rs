//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every forward call appends a node holding its output value and the
//! primitive that produced it. [`Tape::backward`] replays the adjoints in
//! reverse order and accumulates gradients into the parameter store; a
//! parameter read twice gets both contributions summed.

use std::fmt::Debug;

use super::fft;
use super::params::{ParamId, ParameterStore};
use super::tensor::{same_shape, split_axis, ComplexTensor, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Value {
    pub fn real(&self) -> Result<&Tensor> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(Error::invalid("expected a real value, found complex")),
        }
    }

    pub fn complex(&self) -> Result<&ComplexTensor> {
        match self {
            Value::Complex(c) => Ok(c),
            Value::Real(_) => Err(Error::invalid("expected a complex value, found real")),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(c) => c.shape(),
        }
    }

    fn accumulate(&mut self, other: Value) -> Result<()> {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(&b),
            (Value::Complex(a), Value::Complex(b)) => a.add_assign(&b),
            _ => Err(Error::invalid("gradient kind mismatch")),
        }
    }
}

/// A differentiable operation recorded on the tape.
///
/// `backward` receives the upstream gradient of this node's output and
/// returns one optional gradient per entry of `inputs`, in the same order.
pub trait Primitive: Debug + Send + Sync {
    fn inputs(&self) -> Vec<Var>;
    fn backward(&self, tape: &Tape, out: &Value, grad: &Value) -> Result<Vec<Option<Value>>>;
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Option<Box<dyn Primitive>>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> Result<&Tensor> {
        self.value(v).real()
    }

    pub fn complex(&self, v: Var) -> Result<&ComplexTensor> {
        self.value(v).complex()
    }

    /// Constant input; receives gradient but feeds no parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(Value::Real(t), None, None)
    }

    pub fn constant_complex(&mut self, c: ComplexTensor) -> Var {
        self.push_node(Value::Complex(c), None, None)
    }

    /// Reads a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push_node(Value::Real(store.value(id).clone()), None, Some(id))
    }

    /// Records the result of a custom primitive.
    pub fn push(&mut self, value: Value, op: Box<dyn Primitive>) -> Var {
        self.push_node(value, Some(op), None)
    }

    fn push_node(&mut self, value: Value, op: Option<Box<dyn Primitive>>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    /// Runs the adjoint sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.real(loss)?;
        if seed.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Real(Tensor::full(seed.shape(), 1.0)));
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs = op.inputs();
            let upstream = op.backward(self, &self.nodes[i].value, &g)?;
            debug_assert_eq!(inputs.len(), upstream.len());
            for (input, gi) in inputs.into_iter().zip(upstream) {
                if let Some(gi) = gi {
                    match &mut grads[input.0] {
                        Some(acc) => acc.accumulate(gi)?,
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter read into `store`'s buffers.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.accumulate_grad(id, g.real()?)?;
            }
        }
        Ok(())
    }

    // ---- builtin primitives -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.real(a)?, self.real(b)?);
        same_shape(ta.shape(), tb.shape())?;
        let mut out = ta.clone();
        out.add_assign(tb)?;
        Ok(self.push(Value::Real(out), Box::new(Add { a, b })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.real(a)?, self.real(b)?);
        same_shape(ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Value::Real(out), Box::new(Mul { a, b })))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.real(x)?.scale(c);
        Ok(self.push(Value::Real(out), Box::new(Scale { x, c })))
    }

    /// `shift + scale · x`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.real(x)?.map(|v| shift + scale * v);
        Ok(self.push(Value::Real(out), Box::new(Scale { x, c: scale })))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.real(x)?;
        let shape = t.shape().to_vec();
        let out = Tensor::scalar(t.sum());
        Ok(self.push(Value::Real(out), Box::new(Sum { x, shape })))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.map(|v| v.max(0.0));
        Ok(self.push(Value::Real(out), Box::new(Relu { x })))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.map(sigmoid);
        Ok(self.push(Value::Real(out), Box::new(Sigmoid { x })))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.softmax_last();
        Ok(self.push(Value::Real(out), Box::new(Softmax { x })))
    }

    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.transpose12()?;
        Ok(self.push(Value::Real(out), Box::new(Transpose12 { x })))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.real(x)?;
        let from = t.shape().to_vec();
        let out = t.clone().reshape(shape)?;
        Ok(self.push(Value::Real(out), Box::new(Reshape { x, from })))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.real(x)?;
        let shape = t.shape().to_vec();
        let out = t.mean_axis(axis)?;
        Ok(self.push(Value::Real(out), Box::new(MeanAxis { x, axis, shape })))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.real(a)?, self.real(b)?);
        let split = ta.last_dim();
        let out = ta.concat_last(tb)?;
        Ok(self.push(Value::Real(out), Box::new(ConcatLast { a, b, split })))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.real(b)?),
            None => None,
        };
        let out = self.real(x)?.linear(self.real(w)?, bias)?;
        Ok(self.push(Value::Real(out), Box::new(Linear { x, w, b })))
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.real(pred)?;
        same_shape(p.shape(), target.shape())?;
        let n = p.len() as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let op = Mse {
            pred,
            target: target.clone(),
        };
        Ok(self.push(Value::Real(Tensor::scalar(loss)), Box::new(op)))
    }

    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let t = self.real(x)?;
        let len = t.last_dim();
        let out = fft::rfft_last(t)?;
        Ok(self.push(Value::Complex(out), Box::new(Rfft { x, len })))
    }

    pub fn irfft(&mut self, x: Var, len: usize) -> Result<Var> {
        let out = fft::irfft_last(self.complex(x)?, len)?;
        Ok(self.push(Value::Real(out), Box::new(Irfft { x, len })))
    }

    pub fn magnitude(&mut self, x: Var) -> Result<Var> {
        let out = self.complex(x)?.magnitude();
        Ok(self.push(Value::Real(out), Box::new(Magnitude { x })))
    }

    /// Per-sample mean of `|X|²` over every axis after the first.
    pub fn mean_power(&mut self, x: Var) -> Result<Var> {
        let c = self.complex(x)?;
        let batch = c.shape()[0];
        let per = c.len() / batch;
        let data = (0..batch)
            .map(|b| {
                let r = &c.re()[b * per..(b + 1) * per];
                let i = &c.im()[b * per..(b + 1) * per];
                r.iter().zip(i).map(|(a, b)| a * a + b * b).sum::<f64>() / per as f64
            })
            .collect();
        let out = Tensor::new(vec![batch], data)?;
        Ok(self.push(Value::Real(out), Box::new(MeanPower { x })))
    }

    /// `X[b,v,f] · h[b,f]` for complex `X` of shape `(B, V, F)` and real `h` of shape `(B, F)`.
    pub fn scale_bins(&mut self, x: Var, h: Var) -> Result<Var> {
        let c = self.complex(x)?;
        let (bsz, vars, bins) = c.dims3()?;
        let ht = self.real(h)?;
        same_shape(ht.shape(), &[bsz, bins])?;
        let mut out = ComplexTensor::zeros(c.shape());
        {
            let (re, im) = out.parts_mut();
            for b in 0..bsz {
                let hr = &ht.data()[b * bins..(b + 1) * bins];
                for v in 0..vars {
                    let base = (b * vars + v) * bins;
                    for f in 0..bins {
                        re[base + f] = c.re()[base + f] * hr[f];
                        im[base + f] = c.im()[base + f] * hr[f];
                    }
                }
            }
        }
        Ok(self.push(Value::Complex(out), Box::new(ScaleBins { x, h })))
    }

    /// Complex affine map over the last axis: `Y = W·X + b`, with `W` given as
    /// real and imaginary `(out, in)` parts and `b` as `(out)` parts.
    pub fn complex_linear(&mut self, x: Var, w_re: Var, w_im: Var, b_re: Var, b_im: Var) -> Result<Var> {
        let c = self.complex(x)?;
        let (wr, wi) = (self.real(w_re)?, self.real(w_im)?);
        let (br, bi) = (self.real(b_re)?, self.real(b_im)?);
        let (n_out, n_in) = wr.dims2()?;
        same_shape(wr.shape(), wi.shape())?;
        if c.last_dim() != n_in || br.len() != n_out || bi.len() != n_out {
            return Err(Error::invalid(format!(
                "complex_linear: input {:?} incompatible with weight {:?} / bias {}",
                c.shape(),
                wr.shape(),
                br.len()
            )));
        }
        let rows = c.len() / n_in;
        let mut re = vec![0.0; rows * n_out];
        let mut im = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &c.re()[r * n_in..(r + 1) * n_in];
            let xi = &c.im()[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wro = &wr.data()[o * n_in..(o + 1) * n_in];
                let wio = &wi.data()[o * n_in..(o + 1) * n_in];
                let (mut ar, mut ai) = (br.data()[o], bi.data()[o]);
                for f in 0..n_in {
                    ar += wro[f] * xr[f] - wio[f] * xi[f];
                    ai += wro[f] * xi[f] + wio[f] * xr[f];
                }
                re[r * n_out + o] = ar;
                im[r * n_out + o] = ai;
            }
        }
        let mut shape = c.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let out = ComplexTensor::new(shape, re, im)?;
        let op = ComplexLinear {
            x,
            w_re,
            w_im,
            b_re,
            b_im,
        };
        Ok(self.push(Value::Complex(out), Box::new(op)))
    }

    /// `Σ_e weights[b,e] · experts[e][b,…]`.
    ///
    /// Entries with an exact zero weight are skipped in both directions, so
    /// their expert output neither contributes nor receives gradient.
    pub fn mix(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let w = self.real(weights)?;
        let (bsz, n) = w.dims2()?;
        if n != experts.len() || n == 0 {
            return Err(Error::invalid(format!(
                "mix: {n} weights per sample for {} experts",
                experts.len()
            )));
        }
        let shape = self.real(experts[0])?.shape().to_vec();
        if shape[0] != bsz {
            return Err(Error::invalid("mix: batch size mismatch"));
        }
        let per = shape.iter().product::<usize>() / bsz;
        let mut out = Tensor::zeros(&shape);
        for (e, &ex) in experts.iter().enumerate() {
            let y = self.real(ex)?;
            same_shape(y.shape(), &shape)?;
            let od = out.data_mut();
            for b in 0..bsz {
                let we = w.data()[b * n + e];
                if we == 0.0 {
                    continue;
                }
                for i in b * per..(b + 1) * per {
                    od[i] += we * y.data()[i];
                }
            }
        }
        let op = Mix {
            weights,
            experts: experts.to_vec(),
        };
        Ok(self.push(Value::Real(out), Box::new(op)))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn real_grad(t: Tensor) -> Option<Value> {
    Some(Value::Real(t))
}

#[derive(Debug)]
struct Add {
    a: Var,
    b: Var,
}

impl Primitive for Add {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

#[derive(Debug)]
struct Mul {
    a: Var,
    b: Var,
}

impl Primitive for Mul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.real()?;
        let (a, b) = (tape.real(self.a)?, tape.real(self.b)?);
        let ga = g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
        let gb = g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
        Ok(vec![
            real_grad(Tensor::new(a.shape().to_vec(), ga)?),
            real_grad(Tensor::new(b.shape().to_vec(), gb)?),
        ])
    }
}

#[derive(Debug)]
struct Scale {
    x: Var,
    c: f64,
}

impl Primitive for Scale {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        Ok(vec![real_grad(g.real()?.scale(self.c))])
    }
}

#[derive(Debug)]
struct Sum {
    x: Var,
    shape: Vec<usize>,
}

impl Primitive for Sum {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        Ok(vec![real_grad(Tensor::full(&self.shape, g.real()?.data()[0]))])
    }
}

#[derive(Debug)]
struct Relu {
    x: Var,
}

impl Primitive for Relu {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let x = tape.real(self.x)?;
        let data = g
            .real()?
            .data()
            .iter()
            .zip(x.data())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        Ok(vec![real_grad(Tensor::new(x.shape().to_vec(), data)?)])
    }
}

#[derive(Debug)]
struct Sigmoid {
    x: Var,
}

impl Primitive for Sigmoid {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, out: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let s = out.real()?;
        let data = g
            .real()?
            .data()
            .iter()
            .zip(s.data())
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        Ok(vec![real_grad(Tensor::new(s.shape().to_vec(), data)?)])
    }
}

#[derive(Debug)]
struct Softmax {
    x: Var,
}

impl Primitive for Softmax {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, out: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let p = out.real()?;
        let g = g.real()?;
        let n = p.last_dim();
        let mut data = vec![0.0; p.len()];
        for ((prow, grow), drow) in p
            .data()
            .chunks(n)
            .zip(g.data().chunks(n))
            .zip(data.chunks_mut(n))
        {
            let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
            for i in 0..n {
                drow[i] = prow[i] * (grow[i] - dot);
            }
        }
        Ok(vec![real_grad(Tensor::new(p.shape().to_vec(), data)?)])
    }
}

#[derive(Debug)]
struct Transpose12 {
    x: Var,
}

impl Primitive for Transpose12 {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        Ok(vec![real_grad(g.real()?.transpose12()?)])
    }
}

#[derive(Debug)]
struct Reshape {
    x: Var,
    from: Vec<usize>,
}

impl Primitive for Reshape {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        Ok(vec![real_grad(g.real()?.clone().reshape(self.from.clone())?)])
    }
}

#[derive(Debug)]
struct MeanAxis {
    x: Var,
    axis: usize,
    shape: Vec<usize>,
}

impl Primitive for MeanAxis {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.real()?;
        let (outer, n, inner) = split_axis(&self.shape, self.axis);
        let inv = 1.0 / n as f64;
        let mut data = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[(o * n + k) * inner + i] = g.data()[o * inner + i] * inv;
                }
            }
        }
        Ok(vec![real_grad(Tensor::new(self.shape.clone(), data)?)])
    }
}

#[derive(Debug)]
struct ConcatLast {
    a: Var,
    b: Var,
    split: usize,
}

impl Primitive for ConcatLast {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.real()?;
        let width = g.last_dim();
        let nb = width - self.split;
        let mut ga = Vec::with_capacity(g.len() / width * self.split);
        let mut gb = Vec::with_capacity(g.len() / width * nb);
        for row in g.data().chunks(width) {
            ga.extend_from_slice(&row[..self.split]);
            gb.extend_from_slice(&row[self.split..]);
        }
        Ok(vec![
            real_grad(Tensor::new(tape.real(self.a)?.shape().to_vec(), ga)?),
            real_grad(Tensor::new(tape.real(self.b)?.shape().to_vec(), gb)?),
        ])
    }
}

#[derive(Debug)]
struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl Primitive for Linear {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.real()?;
        let x = tape.real(self.x)?;
        let w = tape.real(self.w)?;
        let (n_out, n_in) = w.dims2()?;
        let rows = x.len() / n_in;
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; n_out];
        for r in 0..rows {
            let xr = &x.data()[r * n_in..(r + 1) * n_in];
            let gr = &g.data()[r * n_out..(r + 1) * n_out];
            let gxr = &mut gx[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let go = gr[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let wrow = &w.data()[o * n_in..(o + 1) * n_in];
                let gwrow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gxr[i] += go * wrow[i];
                    gwrow[i] += go * xr[i];
                }
            }
        }
        let mut out = vec![
            real_grad(Tensor::new(x.shape().to_vec(), gx)?),
            real_grad(Tensor::new(w.shape().to_vec(), gw)?),
        ];
        if let Some(b) = self.b {
            out.push(real_grad(Tensor::new(tape.real(b)?.shape().to_vec(), gb)?));
        }
        Ok(out)
    }
}

#[derive(Debug)]
struct Mse {
    pred: Var,
    target: Tensor,
}

impl Primitive for Mse {
    fn inputs(&self) -> Vec<Var> {
        vec![self.pred]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let p = tape.real(self.pred)?;
        let c = 2.0 * g.real()?.data()[0] / p.len() as f64;
        let data = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| c * (a - b))
            .collect();
        Ok(vec![real_grad(Tensor::new(p.shape().to_vec(), data)?)])
    }
}

/// Adjoint of the unnormalized half-spectrum transform:
/// `dL/dx_t = Re Σ_k G_k e^{2πikt/L}`, evaluated as a scaled inverse transform
/// with interior bins halved.
#[derive(Debug)]
struct Rfft {
    x: Var,
    len: usize,
}

impl Primitive for Rfft {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.complex()?;
        let bins = g.last_dim();
        let mut re = g.re().to_vec();
        let mut im = g.im().to_vec();
        for (rr, ii) in re.chunks_mut(bins).zip(im.chunks_mut(bins)) {
            for k in 1..bins {
                if 2 * k != self.len {
                    rr[k] *= 0.5;
                    ii[k] *= 0.5;
                }
            }
        }
        let half = ComplexTensor::new(g.shape().to_vec(), re, im)?;
        let gx = fft::irfft_last(&half, self.len)?.scale(self.len as f64);
        Ok(vec![real_grad(gx)])
    }
}

/// Adjoint of the inverse transform: `G_k = c_k/L · rfft(g)_k`, `c_k = 2`
/// for interior bins and 1 for DC/Nyquist.
#[derive(Debug)]
struct Irfft {
    x: Var,
    len: usize,
}

impl Primitive for Irfft {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let mut spec = fft::rfft_last(g.real()?)?;
        let bins = spec.last_dim();
        let inv = 1.0 / self.len as f64;
        let len = self.len;
        let (re, im) = spec.parts_mut();
        for (rr, ii) in re.chunks_mut(bins).zip(im.chunks_mut(bins)) {
            for k in 0..bins {
                let c = if k == 0 || 2 * k == len { inv } else { 2.0 * inv };
                rr[k] *= c;
                ii[k] *= c;
            }
            // The forward pass ignores these imaginary parts.
            ii[0] = 0.0;
            if len % 2 == 0 {
                ii[bins - 1] = 0.0;
            }
        }
        Ok(vec![Some(Value::Complex(spec))])
    }
}

#[derive(Debug)]
struct Magnitude {
    x: Var,
}

impl Primitive for Magnitude {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, tape: &Tape, out: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let c = tape.complex(self.x)?;
        let m = out.real()?;
        let g = g.real()?;
        let mut gx = ComplexTensor::zeros(c.shape());
        let (re, im) = gx.parts_mut();
        for i in 0..c.len() {
            // Subgradient 0 at the origin.
            if m.data()[i] > 0.0 {
                let s = g.data()[i] / m.data()[i];
                re[i] = s * c.re()[i];
                im[i] = s * c.im()[i];
            }
        }
        Ok(vec![Some(Value::Complex(gx))])
    }
}

#[derive(Debug)]
struct MeanPower {
    x: Var,
}

impl Primitive for MeanPower {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let c = tape.complex(self.x)?;
        let g = g.real()?;
        let batch = c.shape()[0];
        let per = c.len() / batch;
        let mut gx = ComplexTensor::zeros(c.shape());
        let (re, im) = gx.parts_mut();
        for b in 0..batch {
            let s = 2.0 * g.data()[b] / per as f64;
            for i in b * per..(b + 1) * per {
                re[i] = s * c.re()[i];
                im[i] = s * c.im()[i];
            }
        }
        Ok(vec![Some(Value::Complex(gx))])
    }
}

#[derive(Debug)]
struct ScaleBins {
    x: Var,
    h: Var,
}

impl Primitive for ScaleBins {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.h]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let c = tape.complex(self.x)?;
        let h = tape.real(self.h)?;
        let g = g.complex()?;
        let (bsz, vars, bins) = c.dims3()?;
        let mut gx = ComplexTensor::zeros(c.shape());
        let mut gh = vec![0.0; bsz * bins];
        {
            let (re, im) = gx.parts_mut();
            for b in 0..bsz {
                for v in 0..vars {
                    let base = (b * vars + v) * bins;
                    for f in 0..bins {
                        let hv = h.data()[b * bins + f];
                        let (gr, gi) = (g.re()[base + f], g.im()[base + f]);
                        re[base + f] = gr * hv;
                        im[base + f] = gi * hv;
                        gh[b * bins + f] += gr * c.re()[base + f] + gi * c.im()[base + f];
                    }
                }
            }
        }
        Ok(vec![
            Some(Value::Complex(gx)),
            real_grad(Tensor::new(h.shape().to_vec(), gh)?),
        ])
    }
}

#[derive(Debug)]
struct ComplexLinear {
    x: Var,
    w_re: Var,
    w_im: Var,
    b_re: Var,
    b_im: Var,
}

impl Primitive for ComplexLinear {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w_re, self.w_im, self.b_re, self.b_im]
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let c = tape.complex(self.x)?;
        let wr = tape.real(self.w_re)?;
        let wi = tape.real(self.w_im)?;
        let g = g.complex()?;
        let (n_out, n_in) = wr.dims2()?;
        let rows = c.len() / n_in;
        let mut gx = ComplexTensor::zeros(c.shape());
        let mut gwr = vec![0.0; wr.len()];
        let mut gwi = vec![0.0; wi.len()];
        let mut gbr = vec![0.0; n_out];
        let mut gbi = vec![0.0; n_out];
        {
            let (gxr_all, gxi_all) = gx.parts_mut();
            for r in 0..rows {
                let xr = &c.re()[r * n_in..(r + 1) * n_in];
                let xi = &c.im()[r * n_in..(r + 1) * n_in];
                let gxr = &mut gxr_all[r * n_in..(r + 1) * n_in];
                let gxi = &mut gxi_all[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let (gr, gi) = (g.re()[r * n_out + o], g.im()[r * n_out + o]);
                    if gr == 0.0 && gi == 0.0 {
                        continue;
                    }
                    gbr[o] += gr;
                    gbi[o] += gi;
                    let wro = &wr.data()[o * n_in..(o + 1) * n_in];
                    let wio = &wi.data()[o * n_in..(o + 1) * n_in];
                    let gwro = &mut gwr[o * n_in..(o + 1) * n_in];
                    let gwio = &mut gwi[o * n_in..(o + 1) * n_in];
                    for f in 0..n_in {
                        gxr[f] += gr * wro[f] + gi * wio[f];
                        gxi[f] += gi * wro[f] - gr * wio[f];
                        gwro[f] += gr * xr[f] + gi * xi[f];
                        gwio[f] += gi * xr[f] - gr * xi[f];
                    }
                }
            }
        }
        Ok(vec![
            Some(Value::Complex(gx)),
            real_grad(Tensor::new(wr.shape().to_vec(), gwr)?),
            real_grad(Tensor::new(wi.shape().to_vec(), gwi)?),
            real_grad(Tensor::new(vec![n_out], gbr)?),
            real_grad(Tensor::new(vec![n_out], gbi)?),
        ])
    }
}

#[derive(Debug)]
struct Mix {
    weights: Var,
    experts: Vec<Var>,
}

impl Primitive for Mix {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.weights];
        v.extend(&self.experts);
        v
    }
    fn backward(&self, tape: &Tape, _: &Value, g: &Value) -> Result<Vec<Option<Value>>> {
        let g = g.real()?;
        let w = tape.real(self.weights)?;
        let (bsz, n) = w.dims2()?;
        let per = g.len() / bsz;
        let mut gw = vec![0.0; bsz * n];
        let mut out = Vec::with_capacity(n + 1);
        let mut expert_grads = Vec::with_capacity(n);
        for (e, &ex) in self.experts.iter().enumerate() {
            let y = tape.real(ex)?;
            let mut gy = vec![0.0; y.len()];
            let mut touched = false;
            for b in 0..bsz {
                let range = b * per..(b + 1) * per;
                gw[b * n + e] = g.data()[range.clone()]
                    .iter()
                    .zip(&y.data()[range.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                let we = w.data()[b * n + e];
                if we == 0.0 {
                    continue;
                }
                touched = true;
                for i in range {
                    gy[i] = we * g.data()[i];
                }
            }
            expert_grads.push(if touched {
                real_grad(Tensor::new(y.shape().to_vec(), gy)?)
            } else {
                None
            });
        }
        out.push(real_grad(Tensor::new(w.shape().to_vec(), gw)?));
        out.extend(expert_grads);
        Ok(out)
    }
}
