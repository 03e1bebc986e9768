//! Reference interpreter: ground-truth evaluation of a graph on a concrete
//! input tensor with direct nested-loop semantics. Every compiler rewrite and
//! the instruction-level simulator are checked against this module.
//!
//! Conventions:
//! - Convolution and average pooling zero-pad; average pooling divides by the
//!   full window area. Max pooling takes the max over the in-bounds window
//!   elements only.
//! - A convolution with several inputs reads their depth-wise concatenation.
//! - LRN uses the across-channel formula
//!   `out[d] = in[d] / (k + alpha/n * sum in[j]^2)^beta` over the size-`n`
//!   window centered at `d` and clipped to the tensor.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, LstmAttrs, LstmTailAttrs, Node, NodeKind, INPUT_ID};
use crate::scalar::{from_f64, Scalar};
use crate::shape::TensorShape;
use crate::tensor::Tensor;

/// Evaluation of every node, plus the final cell state of each LSTM-type
/// node (keyed by node id) for checking streamed cell-state writebacks.
#[derive(Debug, Clone)]
pub struct EvalResult<S: Scalar> {
    pub values: IndexMap<String, Tensor<S>>,
    pub cell_states: IndexMap<String, Vec<S>>,
}

pub fn eval<S: Scalar>(g: &Graph<S>, input: &Tensor<S>) -> Result<EvalResult<S>> {
    if input.shape != g.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "graph input is {}, tensor is {}",
            g.input_shape, input.shape
        )));
    }
    let order = g.topo_order()?;
    let mut values: IndexMap<String, Tensor<S>> = IndexMap::new();
    let mut cell_states: IndexMap<String, Vec<S>> = IndexMap::new();
    for id in &order {
        let node = &g.nodes[id.as_str()];
        let ins: Vec<&Tensor<S>> = node
            .inputs
            .iter()
            .map(|i| if i == INPUT_ID { input } else { &values[i.as_str()] })
            .collect();
        let (out, cell) = eval_node(node, &ins)?;
        if let Some(c) = cell {
            cell_states.insert(id.clone(), c);
        }
        values.insert(id.clone(), out);
    }
    Ok(EvalResult { values, cell_states })
}

/// Outputs in the graph's declared output order.
pub fn eval_outputs<S: Scalar>(g: &Graph<S>, input: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let r = eval(g, input)?;
    Ok(g.outputs.iter().map(|o| r.values[o.as_str()].clone()).collect())
}

fn eval_node<S: Scalar>(
    node: &Node<S>,
    ins: &[&Tensor<S>],
) -> Result<(Tensor<S>, Option<Vec<S>>)> {
    let out = match &node.kind {
        NodeKind::Convolution(a) => {
            let merged;
            let x = if ins.len() == 1 {
                ins[0]
            } else {
                merged = Tensor::concat_depth(ins)?;
                &merged
            };
            let oh = (x.shape.h + 2 * a.pad - a.filter_h) / a.stride + 1;
            let ow = (x.shape.w + 2 * a.pad - a.filter_w) / a.stride + 1;
            let mut out = Tensor::zeros(TensorShape::new(oh, ow, a.out_depth)?);
            for q in 0..oh {
                for p in 0..ow {
                    for k in 0..a.out_depth {
                        let mut acc = a.bias[k];
                        for r in 0..a.filter_h {
                            for s in 0..a.filter_w {
                                let ih = (q * a.stride + r) as isize - a.pad as isize;
                                let iw = (p * a.stride + s) as isize - a.pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih as usize >= x.shape.h
                                    || iw as usize >= x.shape.w
                                {
                                    continue; // zero padding
                                }
                                for c in 0..a.in_depth {
                                    acc += a.weight(k, r, s, c)
                                        * x.at(ih as usize, iw as usize, c);
                                }
                            }
                        }
                        out.set(q, p, k, acc);
                    }
                }
            }
            out
        }
        NodeKind::MaxPool(a) => {
            let x = ins[0];
            let oh = (x.shape.h + 2 * a.pad - a.window_h) / a.stride + 1;
            let ow = (x.shape.w + 2 * a.pad - a.window_w) / a.stride + 1;
            let mut out = Tensor::zeros(TensorShape::new(oh, ow, x.shape.d)?);
            for q in 0..oh {
                for p in 0..ow {
                    for d in 0..x.shape.d {
                        let mut best: Option<S> = None;
                        for r in 0..a.window_h {
                            for s in 0..a.window_w {
                                let ih = (q * a.stride + r) as isize - a.pad as isize;
                                let iw = (p * a.stride + s) as isize - a.pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih as usize >= x.shape.h
                                    || iw as usize >= x.shape.w
                                {
                                    continue;
                                }
                                let v = x.at(ih as usize, iw as usize, d);
                                best = Some(match best {
                                    None => v,
                                    Some(b) => b.max(v),
                                });
                            }
                        }
                        out.set(q, p, d, best.unwrap_or_else(S::zero));
                    }
                }
            }
            out
        }
        NodeKind::AvgPool(a) => {
            let x = ins[0];
            let oh = (x.shape.h + 2 * a.pad - a.window_h) / a.stride + 1;
            let ow = (x.shape.w + 2 * a.pad - a.window_w) / a.stride + 1;
            let area = from_f64::<S>((a.window_h * a.window_w) as f64);
            let mut out = Tensor::zeros(TensorShape::new(oh, ow, x.shape.d)?);
            for q in 0..oh {
                for p in 0..ow {
                    for d in 0..x.shape.d {
                        let mut acc = S::zero();
                        for r in 0..a.window_h {
                            for s in 0..a.window_w {
                                let ih = (q * a.stride + r) as isize - a.pad as isize;
                                let iw = (p * a.stride + s) as isize - a.pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih as usize >= x.shape.h
                                    || iw as usize >= x.shape.w
                                {
                                    continue; // zero padding contributes zero
                                }
                                acc += x.at(ih as usize, iw as usize, d);
                            }
                        }
                        out.set(q, p, d, acc / area);
                    }
                }
            }
            out
        }
        NodeKind::GlobalAvgPool => {
            let x = ins[0];
            let area = from_f64::<S>((x.shape.h * x.shape.w) as f64);
            let mut out = Tensor::zeros(TensorShape::new(1, 1, x.shape.d)?);
            for d in 0..x.shape.d {
                let mut acc = S::zero();
                for h in 0..x.shape.h {
                    for w in 0..x.shape.w {
                        acc += x.at(h, w, d);
                    }
                }
                out.set(0, 0, d, acc / area);
            }
            out
        }
        NodeKind::Lrn(a) => {
            let x = ins[0];
            let half = (a.local_size - 1) / 2;
            let n = from_f64::<S>(a.local_size as f64);
            let mut out = Tensor::zeros(x.shape);
            for h in 0..x.shape.h {
                for w in 0..x.shape.w {
                    for d in 0..x.shape.d {
                        let lo = d.saturating_sub(half);
                        let hi = (d + half).min(x.shape.d - 1);
                        let mut sq = S::zero();
                        for j in lo..=hi {
                            let v = x.at(h, w, j);
                            sq += v * v;
                        }
                        let denom = (a.k + a.alpha / n * sq).powf(a.beta);
                        out.set(h, w, d, x.at(h, w, d) / denom);
                    }
                }
            }
            out
        }
        NodeKind::EltwiseAdd => {
            let (a, b) = (ins[0], ins[1]);
            let mut out = a.clone();
            for (o, v) in out.data.iter_mut().zip(&b.data) {
                *o += *v;
            }
            out
        }
        NodeKind::FullyConnected(a) => {
            let x = ins[0];
            let mut out = Tensor::zeros(TensorShape::new(1, 1, a.out_dim)?);
            for m in 0..a.out_dim {
                let mut acc = a.bias[m];
                for n in 0..a.in_dim {
                    acc += x.data[n] * a.weight(n, m);
                }
                out.data[m] = acc;
            }
            out
        }
        NodeKind::Relu => {
            let mut out = ins[0].clone();
            for v in out.data.iter_mut() {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
            out
        }
        NodeKind::Identity => ins[0].clone(),
        NodeKind::Flatten => ins[0].flattened(),
        NodeKind::Subsample { stride } => {
            let x = ins[0];
            let oh = (x.shape.h - 1) / stride + 1;
            let ow = (x.shape.w - 1) / stride + 1;
            let mut out = Tensor::zeros(TensorShape::new(oh, ow, x.shape.d)?);
            for h in 0..oh {
                for w in 0..ow {
                    for d in 0..x.shape.d {
                        out.set(h, w, d, x.at(h * stride, w * stride, d));
                    }
                }
            }
            out
        }
        NodeKind::LstmCell(a) => {
            let (h_out, c_out) = lstm_cell(a, &ins[0].data, &ins[1].data);
            let out = Tensor::new(TensorShape::new(1, 1, a.hidden)?, h_out)?;
            return Ok((out, Some(c_out)));
        }
        NodeKind::LstmTail(a) => {
            let (h_out, c_out) = lstm_tail(a, ins);
            let out = Tensor::new(TensorShape::new(1, 1, a.hidden)?, h_out)?;
            return Ok((out, Some(c_out)));
        }
    };
    Ok((out, None))
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Pre-activation of gate `gate` (0..4 in i, g, f, o order) for hidden
/// index `j`: `W_gate[j] . x + U_gate[j] . h + b_gate[j]`.
pub fn lstm_gate_preact<S: Scalar>(a: &LstmAttrs<S>, gate: usize, j: usize, x: &[S], h: &[S]) -> S {
    let mut acc = a.b[gate][j];
    let wrow = &a.w[gate][j * a.n_x..(j + 1) * a.n_x];
    for (wv, xv) in wrow.iter().zip(x) {
        acc += *wv * *xv;
    }
    let urow = &a.u[gate][j * a.n_h..(j + 1) * a.n_h];
    for (uv, hv) in urow.iter().zip(h) {
        acc += *uv * *hv;
    }
    acc
}

/// Full LSTM cell: returns (h', c). Gate semantics:
/// i = sigma(z_i), g = tanh(z_g), f = sigma(z_f), o = sigma(z_o),
/// c = f*c_prev + i*g, h' = o*tanh(c).
pub fn lstm_cell<S: Scalar>(a: &LstmAttrs<S>, x: &[S], h: &[S]) -> (Vec<S>, Vec<S>) {
    let mut h_out = vec![S::zero(); a.hidden];
    let mut c_out = vec![S::zero(); a.hidden];
    for j in 0..a.hidden {
        let i = sigmoid(lstm_gate_preact(a, 0, j, x, h));
        let g = lstm_gate_preact(a, 1, j, x, h).tanh();
        let f = sigmoid(lstm_gate_preact(a, 2, j, x, h));
        let o = sigmoid(lstm_gate_preact(a, 3, j, x, h));
        let c = f * a.c_init[j] + i * g;
        c_out[j] = c;
        h_out[j] = o * c.tanh();
    }
    (h_out, c_out)
}

/// The activation epilogue alone, applied to already-computed gate
/// pre-activations (interleaved in one vector or split across four inputs).
pub fn lstm_tail<S: Scalar>(a: &LstmTailAttrs<S>, ins: &[&Tensor<S>]) -> (Vec<S>, Vec<S>) {
    let z = |gate: usize, j: usize| -> S {
        if a.interleaved {
            ins[0].data[4 * j + gate]
        } else {
            ins[gate].data[j]
        }
    };
    let mut h_out = vec![S::zero(); a.hidden];
    let mut c_out = vec![S::zero(); a.hidden];
    for j in 0..a.hidden {
        let i = sigmoid(z(0, j));
        let g = z(1, j).tanh();
        let f = sigmoid(z(2, j));
        let o = sigmoid(z(3, j));
        let c = f * a.c_init[j] + i * g;
        c_out[j] = c;
        h_out[j] = o * c.tanh();
    }
    (h_out, c_out)
}
