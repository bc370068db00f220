//! Single-use reverse-mode autodiff over [`Tensor`] operations.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; node inputs
//! always point at earlier indices, so the recording order is already a
//! topological order. [`Tape::backward`] walks the list once in reverse,
//! accumulating gradients, and may run only once per tape — a fresh forward
//! pass gets a fresh tape. Values stay on the tape after backward, which is
//! what lets [`Tape::grad_check`] replay the forward pass under small
//! parameter perturbations and compare analytic gradients against central
//! finite differences.

use crate::error::{Error, Result};
use crate::layers;
use crate::model::RegionRect;
use crate::tensor::{conv2d, conv2d_backward, ConvSpec, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    Relu {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    GemPool {
        input: NodeId,
        power: NodeId,
        region: RegionRect,
    },
    MatVec {
        weight: NodeId,
        input: NodeId,
    },
    L2Norm {
        input: NodeId,
    },
    SumVecs {
        inputs: Vec<NodeId>,
    },
    SumAll {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Populated by the one allowed `backward` call; indexed like `nodes`.
    grads: Option<Vec<Vec<f64>>>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Smallest absolute value among the inputs of every recorded `relu`
    /// node, or infinity when the tape holds none. Finite-difference checks
    /// use this to reject instances whose step could straddle the
    /// activation's kink, where no finite step measures the true slope.
    pub(crate) fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { input } = &node.op {
                for &v in self.nodes[input.0].value.data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Records a constant input: gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input: `backward` will produce its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let value = conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &spec,
        )?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).relu();
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = self.value(lhs).add(self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).scale(factor);
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Generalized-mean pooling of one region of a feature map down to a
    /// per-channel vector. `power` must be a single-element node.
    pub fn gem_pool(&mut self, input: NodeId, power: NodeId, region: RegionRect) -> Result<NodeId> {
        let p = scalar_value(self.value(power), "gem power")?;
        let value = layers::gem_pool(self.value(input), &region, p)?;
        let needs = self.needs(input) || self.needs(power);
        Ok(self.push(
            value,
            Op::GemPool {
                input,
                power,
                region,
            },
            needs,
        ))
    }

    /// `out[d] = sum_m weight[m, d] * input[m]` — the bias-free projection.
    pub fn matvec(&mut self, weight: NodeId, input: NodeId) -> Result<NodeId> {
        let value = layers::fc_forward(self.value(weight), self.value(input))?;
        let needs = self.needs(weight) || self.needs(input);
        Ok(self.push(value, Op::MatVec { weight, input }, needs))
    }

    pub fn l2_normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let value = layers::l2_normalize(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::L2Norm { input }, needs))
    }

    /// Element-wise sum of same-shaped vectors.
    pub fn sum_vecs(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("sum_vecs needs at least one operand".into()))?;
        let mut value = self.value(*first).clone();
        for id in &inputs[1..] {
            value = value.add(self.value(*id))?;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            value,
            Op::SumVecs {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Reduces a node to the scalar sum of its elements (shape `[1]`).
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::SumAll { input }, needs)
    }

    /// Runs the single allowed backward pass, seeding `d loss / d output`
    /// with `seed` (use `[1.0]` for a scalar loss).
    pub fn backward(&mut self, output: NodeId, seed: &[f64]) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        let out_len = self.value(output).len();
        if seed.len() != out_len {
            return Err(Error::Shape(format!(
                "backward seed has {} elements, output node has {}",
                seed.len(),
                out_len
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[output.0].copy_from_slice(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede node i, so split the gradient buffer to
            // read node i's gradient while writing its inputs'.
            let (head, tail) = grads.split_at_mut(i);
            let grad_out = &tail[0];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let grad_tensor =
                        Tensor::new(self.nodes[i].value.shape().to_vec(), grad_out.clone())?;
                    let conv_grads = conv2d_backward(
                        &grad_tensor,
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        spec,
                    )?;
                    accumulate(&mut head[input.0], conv_grads.input.data());
                    accumulate(&mut head[weight.0], conv_grads.weight.data());
                    accumulate(&mut head[bias.0], conv_grads.bias.data());
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let dst = &mut head[input.0];
                    for ((d, &g), &v) in dst.iter_mut().zip(grad_out).zip(x) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    // The two operands may be the same node; accumulate one
                    // after the other rather than aliasing two borrows.
                    accumulate(&mut head[lhs.0], grad_out);
                    accumulate(&mut head[rhs.0], grad_out);
                }
                Op::Scale { input, factor } => {
                    let dst = &mut head[input.0];
                    for (d, &g) in dst.iter_mut().zip(grad_out) {
                        *d += g * factor;
                    }
                }
                Op::GemPool {
                    input,
                    power,
                    region,
                } => {
                    let p = scalar_value(&self.nodes[power.0].value, "gem power")?;
                    let back =
                        layers::gem_pool_backward(grad_out, &self.nodes[input.0].value, region, p)?;
                    accumulate(&mut head[input.0], &back.input);
                    head[power.0][0] += back.power;
                }
                Op::MatVec { weight, input } => {
                    let w = self.nodes[weight.0].value.data();
                    let x = self.nodes[input.0].value.data();
                    let (m, d) = {
                        let shape = self.nodes[weight.0].value.shape();
                        (shape[0], shape[1])
                    };
                    {
                        let dw = &mut head[weight.0];
                        for mi in 0..m {
                            let xv = x[mi];
                            for (dwv, &g) in dw[mi * d..][..d].iter_mut().zip(grad_out) {
                                *dwv += xv * g;
                            }
                        }
                    }
                    let dx = &mut head[input.0];
                    for mi in 0..m {
                        let row = &w[mi * d..][..d];
                        let mut acc = 0.0;
                        for (&wv, &g) in row.iter().zip(grad_out) {
                            acc += wv * g;
                        }
                        dx[mi] += acc;
                    }
                }
                Op::L2Norm { input } => {
                    let x = self.nodes[input.0].value.data();
                    let y = self.nodes[i].value.data();
                    let back = layers::l2_normalize_backward(grad_out, x, y);
                    accumulate(&mut head[input.0], &back);
                }
                Op::SumVecs { inputs } => {
                    for id in inputs {
                        accumulate(&mut head[id.0], grad_out);
                    }
                }
                Op::SumAll { input } => {
                    let g = grad_out[0];
                    for d in head[input.0].iter_mut() {
                        *d += g;
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the backward seed with respect to a node's value.
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        match &self.grads {
            Some(grads) => Ok(&grads[id.0]),
            None => Err(Error::Usage(
                "gradients requested before backward ran".into(),
            )),
        }
    }

    /// Recomputes every non-leaf value from the current leaf values, in the
    /// original recording order. Deterministic: replaying without touching
    /// any leaf reproduces every value bit for bit.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => conv2d(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    &self.nodes[bias.0].value,
                    spec,
                )?,
                Op::Relu { input } => self.nodes[input.0].value.relu(),
                Op::Add { lhs, rhs } => self.nodes[lhs.0].value.add(&self.nodes[rhs.0].value)?,
                Op::Scale { input, factor } => self.nodes[input.0].value.scale(*factor),
                Op::GemPool {
                    input,
                    power,
                    region,
                } => {
                    let p = scalar_value(&self.nodes[power.0].value, "gem power")?;
                    layers::gem_pool(&self.nodes[input.0].value, region, p)?
                }
                Op::MatVec { weight, input } => {
                    layers::fc_forward(&self.nodes[weight.0].value, &self.nodes[input.0].value)?
                }
                Op::L2Norm { input } => layers::l2_normalize(&self.nodes[input.0].value)?,
                Op::SumVecs { inputs } => {
                    let mut acc = self.nodes[inputs[0].0].value.clone();
                    for id in &inputs[1..] {
                        acc = acc.add(&self.nodes[id.0].value)?;
                    }
                    acc
                }
                Op::SumAll { input } => {
                    Tensor::scalar(self.nodes[input.0].value.data().iter().sum())
                }
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Verifies analytic gradients of a scalar-valued graph against central
    /// finite differences, returning the worst relative error over every
    /// coordinate of the `wrt` leaves.
    ///
    /// For each coordinate the numeric estimate is
    /// `(f(x + eps) - f(x - eps)) / (2 * eps)` obtained by replaying the
    /// forward pass, and the error is
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub fn grad_check(&mut self, output: NodeId, wrt: &[NodeId], eps: f64) -> Result<f64> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "grad_check needs a scalar output node, got shape {:?}",
                self.value(output).shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("grad_check epsilon must be positive".into()));
        }
        for &id in wrt {
            if !matches!(self.nodes[id.0].op, Op::Leaf) {
                return Err(Error::Usage(
                    "grad_check can only perturb leaf nodes".into(),
                ));
            }
        }
        self.backward(output, &[1.0])?;
        let mut worst = 0.0f64;
        for &id in wrt {
            for coord in 0..self.nodes[id.0].value.len() {
                let analytic = self.grad(id)?[coord];
                let original = self.nodes[id.0].value.data()[coord];
                self.nodes[id.0].value.data_mut()[coord] = original + eps;
                self.replay()?;
                let plus = self.value(output).data()[0];
                self.nodes[id.0].value.data_mut()[coord] = original - eps;
                self.replay()?;
                let minus = self.value(output).data()[0];
                self.nodes[id.0].value.data_mut()[coord] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        // Leave the tape's values consistent with the restored leaves.
        self.replay()?;
        Ok(worst)
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn scalar_value(t: &Tensor, what: &str) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "{what} must hold exactly one element, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let volume: usize = shape.iter().product();
        let data = (0..volume).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // y = 2x + 3x, so dy/dx = 5 for every coordinate.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let y = tape.add(a, b).unwrap();
        let total = tape.sum_all(y);
        tape.backward(total, &[1.0]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn backward_is_single_use_and_grads_need_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2.0]));
        let y = tape.scale(x, 4.0);
        assert!(matches!(tape.grad(x), Err(Error::Usage(_))));
        tape.backward(y, &[1.0]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(matches!(tape.backward(y, &[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_mismatched_seed() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.scale(x, 1.0);
        assert!(matches!(tape.backward(y, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn replay_reproduces_values_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let spec = ConvSpec::new(2, 3, 3, 1, 2, 2).unwrap();
        let img = tape.leaf(random_tensor(&mut rng, vec![1, 2, 6, 6]));
        let w = tape.param(random_tensor(&mut rng, vec![3, 2, 3, 3]));
        let b = tape.param(random_tensor(&mut rng, vec![3]));
        let conv = tape.conv2d(img, w, b, spec).unwrap();
        let act = tape.relu(conv);
        let before = tape.value(act).clone();
        tape.replay().unwrap();
        assert_eq!(tape.value(act), &before);
    }

    #[test]
    fn relu_gradient_masks_non_positive_inputs() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let total = tape.sum_all(y);
        tape.backward(total, &[1.0]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn grad_check_requires_scalar_output_and_leaf_targets() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        assert!(matches!(
            tape.grad_check(y, &[x], 1e-5),
            Err(Error::Usage(_))
        ));
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        let total = tape.sum_all(y);
        assert!(matches!(
            tape.grad_check(total, &[y], 1e-5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn grad_check_passes_on_a_conv_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let spec = ConvSpec::new(2, 2, 3, 1, 2, 2).unwrap();
        let img = tape.leaf(random_tensor(&mut rng, vec![1, 2, 5, 5]));
        let w = tape.param(random_tensor(&mut rng, vec![2, 2, 3, 3]));
        let b = tape.param(random_tensor(&mut rng, vec![2]));
        let conv = tape.conv2d(img, w, b, spec).unwrap();
        let act = tape.relu(conv);
        let total = tape.sum_all(act);
        let err = tape.grad_check(total, &[w, b], 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
