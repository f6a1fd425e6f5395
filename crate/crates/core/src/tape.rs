//! Dynamic reverse-mode differentiation tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Nodes are
//! appended in creation order, so the node list is already a topological
//! order; [`Tape::backward`] walks it once in reverse.
//!
//! Broadcasting is limited to the trailing axis: a `[d]` operand may be
//! combined with any `[.., d]` operand.

use std::cell::RefCell;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Scale {
        a: usize,
        /// Factor applied to the upstream gradient. Equal to the forward
        /// factor except in mutation tests.
        grad_factor: f64,
    },
    Mul {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu {
        a: usize,
    },
    Sum {
        a: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    /// Row-wise normalization (`axis_rows == true`, layer norm) or
    /// column-wise normalization with batch statistics (batch norm).
    Normalize {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        sigma: Vec<f64>,
        over_rows: bool,
    },
    /// Affine normalization with frozen statistics (batch norm inference).
    FrozenNormalize {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        sigma: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Per-row or per-column statistics produced by a normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// The denominator actually used: `sqrt(population variance + eps)`.
    pub sigma: Vec<f64>,
    /// Population variance without `eps`.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar node");
        v[0]
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.add(self, other)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.scale(self, c)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.ewmul(self, other)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.relu(self)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.sum(self)
    }
}

fn broadcast_kind(a: &[usize], b: &[usize], op: &str) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if b.len() == 1 && a.len() >= 2 && a.last() == b.last() {
        return Ok(true);
    }
    dim_err(format!("{op}: shapes {a:?} and {b:?} are not trailing-axis compatible"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        nodes.push(Node { shape, value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variable belongs to another tape");
    }

    /// Records `t` as a leaf. Gradients are computed for every leaf.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(a);
        self.check_owner(b);
        let (shape, value, broadcast) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            let broadcast = broadcast_kind(&na.shape, &nb.shape, "add")?;
            let d = nb.value.len();
            let value = na
                .value
                .iter()
                .enumerate()
                .map(|(i, x)| x + nb.value[if broadcast { i % d } else { i }])
                .collect();
            (na.shape.clone(), value, broadcast)
        };
        Ok(self.push(
            shape,
            value,
            Op::Add {
                a: a.id,
                b: b.id,
                broadcast,
            },
        ))
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, c: f64) -> Var<'t> {
        self.scale_with_grad_factor(a, c, c)
    }

    fn scale_with_grad_factor<'t>(&'t self, a: Var<'t>, c: f64, grad_factor: f64) -> Var<'t> {
        self.check_owner(a);
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (n.shape.clone(), n.value.iter().map(|x| c * x).collect())
        };
        self.push(
            shape,
            value,
            Op::Scale {
                a: a.id,
                grad_factor,
            },
        )
    }

    /// Scale whose backward rule is deliberately wrong by `grad_factor / c`.
    #[cfg(test)]
    pub(crate) fn scale_mutant<'t>(&'t self, a: Var<'t>, c: f64, grad_factor: f64) -> Var<'t> {
        self.scale_with_grad_factor(a, c, grad_factor)
    }

    pub fn ewmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(a);
        self.check_owner(b);
        let (shape, value, broadcast) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            let broadcast = broadcast_kind(&na.shape, &nb.shape, "ewmul")?;
            let d = nb.value.len();
            let value = na
                .value
                .iter()
                .enumerate()
                .map(|(i, x)| x * nb.value[if broadcast { i % d } else { i }])
                .collect();
            (na.shape.clone(), value, broadcast)
        };
        Ok(self.push(
            shape,
            value,
            Op::Mul {
                a: a.id,
                b: b.id,
                broadcast,
            },
        ))
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(a);
        self.check_owner(b);
        let (m, k, n, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape.len() != 2 || nb.shape.len() != 2 {
                return dim_err(format!(
                    "matmul needs matrices, got {:?} and {:?}",
                    na.shape, nb.shape
                ));
            }
            let (m, k) = (na.shape[0], na.shape[1]);
            let (k2, n) = (nb.shape[0], nb.shape[1]);
            if k != k2 {
                return dim_err(format!(
                    "matmul inner extents differ: {:?} x {:?}",
                    na.shape, nb.shape
                ));
            }
            (m, k, n, matmul_raw(&na.value, &nb.value, m, k, n))
        };
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: a.id,
                b: b.id,
                m,
                k,
                n,
            },
        ))
    }

    pub fn relu<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.check_owner(a);
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (n.shape.clone(), n.value.iter().map(|&x| x.max(0.0)).collect())
        };
        self.push(shape, value, Op::Relu { a: a.id })
    }

    pub fn sum<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.check_owner(a);
        let s = self.nodes.borrow()[a.id].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a: a.id })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy<'t>(&'t self, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        self.check_owner(logits);
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.id];
            if n.shape.len() != 2 {
                return dim_err(format!("logits must be [batch, classes], got {:?}", n.shape));
            }
            let (batch, classes) = (n.shape[0], n.shape[1]);
            if labels.len() != batch {
                return dim_err(format!("{} labels for batch of {batch}", labels.len()));
            }
            let mut probs = vec![0.0; batch * classes];
            let mut loss = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::Index(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let row = &n.value[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_denom = denom.ln();
                for (c, z) in row.iter().enumerate() {
                    probs[r * classes + c] = (z - max - log_denom).exp();
                }
                loss -= row[label] - max - log_denom;
            }
            (loss / batch as f64, probs)
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.id,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `gain * (x - mean) / sigma + bias` with statistics taken over the
    /// feature axis of each row (`over_rows`) or over the batch axis of each
    /// column. `sigma = sqrt(population variance + eps)`.
    pub(crate) fn normalize<'t>(
        &'t self,
        x: Var<'t>,
        gain: Var<'t>,
        bias: Var<'t>,
        eps: f64,
        over_rows: bool,
    ) -> Result<(Var<'t>, NormStats)> {
        for v in [x, gain, bias] {
            self.check_owner(v);
        }
        let (shape, value, xhat, stats) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gain.id], &nodes[bias.id]);
            if nx.shape.len() != 2 {
                return dim_err(format!("normalization input must be 2-d, got {:?}", nx.shape));
            }
            let (rows, d) = (nx.shape[0], nx.shape[1]);
            if ng.shape != [d] || nb.shape != [d] {
                return dim_err(format!(
                    "gain {:?} / bias {:?} must both be [{d}]",
                    ng.shape, nb.shape
                ));
            }
            let (groups, len) = if over_rows { (rows, d) } else { (d, rows) };
            let at = |g: usize, i: usize| if over_rows { g * d + i } else { i * d + g };
            let mut xhat = vec![0.0; rows * d];
            let mut stats = NormStats {
                mean: Vec::with_capacity(groups),
                sigma: Vec::with_capacity(groups),
                var: Vec::with_capacity(groups),
            };
            for g in 0..groups {
                let mean = (0..len).map(|i| nx.value[at(g, i)]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|i| {
                        let c = nx.value[at(g, i)] - mean;
                        c * c
                    })
                    .sum::<f64>()
                    / len as f64;
                let sigma = (var + eps).sqrt();
                for i in 0..len {
                    xhat[at(g, i)] = (nx.value[at(g, i)] - mean) / sigma;
                }
                stats.mean.push(mean);
                stats.sigma.push(sigma);
                stats.var.push(var);
            }
            let value = xhat
                .iter()
                .enumerate()
                .map(|(i, h)| ng.value[i % d] * h + nb.value[i % d])
                .collect();
            (nx.shape.clone(), value, xhat, stats)
        };
        let sigma = stats.sigma.clone();
        let var = self.push(
            shape,
            value,
            Op::Normalize {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                sigma,
                over_rows,
            },
        );
        Ok((var, stats))
    }

    /// Column-wise affine normalization with externally supplied statistics.
    pub(crate) fn frozen_normalize<'t>(
        &'t self,
        x: Var<'t>,
        gain: Var<'t>,
        bias: Var<'t>,
        mean: &[f64],
        sigma: &[f64],
    ) -> Result<Var<'t>> {
        for v in [x, gain, bias] {
            self.check_owner(v);
        }
        let (shape, value, xhat) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *nx.shape.last().expect("rank >= 1");
            if nx.shape.len() != 2 || ng.shape != [d] || nb.shape != [d] || mean.len() != d {
                return dim_err(format!(
                    "frozen normalization: x {:?}, gain {:?}, bias {:?}, {} statistics",
                    nx.shape,
                    ng.shape,
                    nb.shape,
                    mean.len()
                ));
            }
            let xhat: Vec<f64> = nx
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % d]) / sigma[i % d])
                .collect();
            let value = xhat
                .iter()
                .enumerate()
                .map(|(i, h)| ng.value[i % d] * h + nb.value[i % d])
                .collect();
            (nx.shape.clone(), value, xhat)
        };
        Ok(self.push(
            shape,
            value,
            Op::FrozenNormalize {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                sigma: sigma.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a single-element `root`, seeded with 1.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root);
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn column_sums(g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, v) in g.iter().enumerate() {
        out[i % d] += v;
    }
    out
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add { a, b, broadcast } => {
            accumulate(grads, a, g.to_vec());
            let gb = if broadcast {
                column_sums(g, nodes[b].value.len())
            } else {
                g.to_vec()
            };
            accumulate(grads, b, gb);
        }
        &Op::Scale { a, grad_factor } => {
            accumulate(grads, a, g.iter().map(|v| grad_factor * v).collect());
        }
        &Op::Mul { a, b, broadcast } => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let d = vb.len();
            let bi = |i: usize| if broadcast { i % d } else { i };
            let ga = g.iter().enumerate().map(|(i, v)| v * vb[bi(i)]).collect();
            let gb = if broadcast {
                let mut out = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    out[i % d] += v * va[i];
                }
                out
            } else {
                g.iter().zip(va).map(|(v, x)| v * x).collect()
            };
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        &Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            // dA = G · Bᵀ
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &vb[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            // dB = Aᵀ · G
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = va[i * k + p];
                    let out = &mut gb[p * n..(p + 1) * n];
                    out.iter_mut().zip(grow).for_each(|(o, x)| *o += aip * x);
                }
            }
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        &Op::Relu { a } => {
            // Subgradient at exactly 0 is taken as 0.
            let va = &nodes[a].value;
            let ga = g
                .iter()
                .zip(va)
                .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                .collect();
            accumulate(grads, a, ga);
        }
        &Op::Sum { a } => {
            accumulate(grads, a, vec![g[0]; nodes[a].value.len()]);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = g[0] / batch as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                gl[r * classes + label] -= scale;
            }
            accumulate(grads, *logits, gl);
        }
        Op::Normalize {
            x,
            gain,
            bias,
            xhat,
            sigma,
            over_rows,
        } => {
            let shape = &nodes[*x].shape;
            let (rows, d) = (shape[0], shape[1]);
            let vgain = &nodes[*gain].value;
            let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * vgain[i % d]).collect();
            let (groups, len) = if *over_rows { (rows, d) } else { (d, rows) };
            let at = |gr: usize, i: usize| if *over_rows { gr * d + i } else { i * d + gr };
            let mut gx = vec![0.0; rows * d];
            for gr in 0..groups {
                let n = len as f64;
                let mean_dxhat = (0..len).map(|i| dxhat[at(gr, i)]).sum::<f64>() / n;
                let mean_dxhat_xhat = (0..len)
                    .map(|i| dxhat[at(gr, i)] * xhat[at(gr, i)])
                    .sum::<f64>()
                    / n;
                for i in 0..len {
                    let j = at(gr, i);
                    gx[j] = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sigma[gr];
                }
            }
            let mut ggain = vec![0.0; d];
            for (i, v) in g.iter().enumerate() {
                ggain[i % d] += v * xhat[i];
            }
            accumulate(grads, *x, gx);
            accumulate(grads, *gain, ggain);
            accumulate(grads, *bias, column_sums(g, d));
        }
        Op::FrozenNormalize {
            x,
            gain,
            bias,
            xhat,
            sigma,
        } => {
            let d = sigma.len();
            let vgain = &nodes[*gain].value;
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, v)| v * vgain[i % d] / sigma[i % d])
                .collect();
            let mut ggain = vec![0.0; d];
            for (i, v) in g.iter().enumerate() {
                ggain[i % d] += v * xhat[i];
            }
            accumulate(grads, *x, gx);
            accumulate(grads, *gain, ggain);
            accumulate(grads, *bias, column_sums(g, d));
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += aip * x);
        }
    }
    out
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when `v` does not reach the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        let data = match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data).expect("gradient shape matches node")
    }
}
