//! Differentiable layers with exact analytic backward passes, a small DAG
//! runtime for composing them, and a finite-difference verification harness.
//!
//! Eight layer kinds exist. Seven are plain tensor-in/tensor-out and share
//! the [`layer_forward`] / [`layer_backward`] API. The softmax +
//! cross-entropy head is fused ([`softmax_xent_loss`] /
//! [`softmax_xent_backward`]) so its backward is the numerically stable
//! `(probabilities - one_hot) / (H*W)` form.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{BiasVec, LabelMap, Tensor3, Tensor4};

/// The probability floor used when taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// A layer with its parameters inline, for isolated forward/backward use.
#[derive(Debug, Clone)]
pub enum Layer {
    ConvTanh { kernel: Tensor4, bias: BiasVec },
    ConvLinear { kernel: Tensor4, bias: BiasVec },
    MeanPool2,
    MaxPool2,
    UpsampleNn2,
    ConcatChannels,
    SoftmaxXent,
    FlipH,
}

/// Run one layer forward. Multi-input layers (`ConcatChannels`) take all
/// inputs in order; every other kind takes exactly one.
pub fn layer_forward(layer: &Layer, inputs: &[&Tensor3]) -> Result<Tensor3> {
    let single = |inputs: &[&Tensor3]| -> Result<Tensor3> {
        match inputs {
            [x] => Ok((*x).clone()),
            _ => Err(Error::Shape(format!("layer expects 1 input, got {}", inputs.len()))),
        }
    };
    match layer {
        Layer::ConvTanh { kernel, bias } => {
            let x = single(inputs)?;
            Ok(ops::tanh_map(&ops::conv2d_same(&x, kernel, bias)?))
        }
        Layer::ConvLinear { kernel, bias } => {
            let x = single(inputs)?;
            ops::conv2d_same(&x, kernel, bias)
        }
        Layer::MeanPool2 => Ok(ops::mean_pool2(&single(inputs)?)),
        Layer::MaxPool2 => Ok(ops::max_pool2(&single(inputs)?)),
        Layer::UpsampleNn2 => Ok(ops::upsample_nn2(&single(inputs)?)),
        Layer::ConcatChannels => ops::concat_channels(inputs),
        Layer::SoftmaxXent => Ok(ops::softmax_channels(&single(inputs)?)),
        Layer::FlipH => Ok(ops::flip_horizontal(&single(inputs)?)),
    }
}

/// Run one layer backward given its cached forward inputs and output.
/// Returns per-input gradients and, for convolution kinds, the parameter
/// gradients. `SoftmaxXent` is fused with the loss; use
/// [`softmax_xent_backward`] for it.
pub fn layer_backward(
    layer: &Layer,
    inputs: &[&Tensor3],
    output: &Tensor3,
    grad_out: &Tensor3,
) -> Result<(Vec<Tensor3>, Option<(Tensor4, BiasVec)>)> {
    fn single<'a>(inputs: &[&'a Tensor3]) -> Result<&'a Tensor3> {
        match inputs {
            [x] => Ok(x),
            _ => Err(Error::Shape(format!("layer expects 1 input, got {}", inputs.len()))),
        }
    }
    match layer {
        Layer::ConvTanh { kernel, .. } => {
            let x = single(inputs)?;
            let (gin, gk, gb) = conv_tanh_backward(x, kernel, output, grad_out)?;
            Ok((vec![gin], Some((gk, gb))))
        }
        Layer::ConvLinear { kernel, .. } => {
            let x = single(inputs)?;
            let (gin, gk, gb) = ops::conv2d_backward(x, kernel, grad_out)?;
            Ok((vec![gin], Some((gk, gb))))
        }
        Layer::MeanPool2 => Ok((vec![mean_pool2_backward(single(inputs)?.shape(), grad_out)], None)),
        Layer::MaxPool2 => Ok((vec![max_pool2_backward(single(inputs)?, grad_out)], None)),
        Layer::UpsampleNn2 => Ok((vec![upsample_nn2_backward(grad_out)], None)),
        Layer::ConcatChannels => {
            let channels: Vec<usize> = inputs.iter().map(|t| t.channels()).collect();
            Ok((concat_backward(&channels, grad_out)?, None))
        }
        Layer::SoftmaxXent => Err(Error::State(
            "SoftmaxXent is fused with the loss; use softmax_xent_backward".into(),
        )),
        Layer::FlipH => Ok((vec![ops::flip_horizontal(grad_out)], None)),
    }
}

/// Backward of conv + tanh: scale by `1 - y^2` at the cached activation,
/// then differentiate the convolution.
pub fn conv_tanh_backward(
    input: &Tensor3,
    kernel: &Tensor4,
    output: &Tensor3,
    grad_out: &Tensor3,
) -> Result<(Tensor3, Tensor4, BiasVec)> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Shape("conv_tanh_backward: grad/output shape mismatch".into()));
    }
    let mut dpre = grad_out.clone();
    for (d, &y) in dpre.data_mut().iter_mut().zip(output.data()) {
        *d *= 1.0 - y * y;
    }
    ops::conv2d_backward(input, kernel, &dpre)
}

/// Mean pooling distributes each pooled gradient equally over the elements
/// that were present in its window.
pub fn mean_pool2_backward(input_shape: (usize, usize, usize), grad_out: &Tensor3) -> Tensor3 {
    let (h, w, c) = input_shape;
    let mut gin = Tensor3::zeros(h, w, c);
    for r in 0..grad_out.height() {
        for col in 0..grad_out.width() {
            let rows = (2 * r..h.min(2 * r + 2)).len();
            let cols = (2 * col..w.min(2 * col + 2)).len();
            let n = (rows * cols) as f64;
            for ch in 0..c {
                let g = grad_out.get(r, col, ch) / n;
                for ir in 2 * r..h.min(2 * r + 2) {
                    for ic in 2 * col..w.min(2 * col + 2) {
                        let cur = gin.get(ir, ic, ch);
                        gin.set(ir, ic, ch, cur + g);
                    }
                }
            }
        }
    }
    gin
}

/// Max pooling routes each pooled gradient to the first maximal element of
/// its window in row-major scan order.
pub fn max_pool2_backward(input: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let (h, w, c) = input.shape();
    let mut gin = Tensor3::zeros(h, w, c);
    for r in 0..grad_out.height() {
        for col in 0..grad_out.width() {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = (2 * r, 2 * col);
                for ir in 2 * r..h.min(2 * r + 2) {
                    for ic in 2 * col..w.min(2 * col + 2) {
                        let v = input.get(ir, ic, ch);
                        if v > best {
                            best = v;
                            at = (ir, ic);
                        }
                    }
                }
                let cur = gin.get(at.0, at.1, ch);
                gin.set(at.0, at.1, ch, cur + grad_out.get(r, col, ch));
            }
        }
    }
    gin
}

/// Nearest-neighbor upsampling backward sums each 2x2 replica block.
pub fn upsample_nn2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (h2, w2, c) = grad_out.shape();
    debug_assert!(h2 % 2 == 0 && w2 % 2 == 0);
    Tensor3::from_fn(h2 / 2, w2 / 2, c, |r, col, ch| {
        grad_out.get(2 * r, 2 * col, ch)
            + grad_out.get(2 * r, 2 * col + 1, ch)
            + grad_out.get(2 * r + 1, 2 * col, ch)
            + grad_out.get(2 * r + 1, 2 * col + 1, ch)
    })
}

/// Concatenation backward slices the gradient back into per-part blocks.
pub fn concat_backward(part_channels: &[usize], grad_out: &Tensor3) -> Result<Vec<Tensor3>> {
    let (h, w, c) = grad_out.shape();
    let total: usize = part_channels.iter().sum();
    if total != c {
        return Err(Error::Shape(format!(
            "concat backward: parts sum to {total} channels, grad has {c}"
        )));
    }
    let mut outs = Vec::with_capacity(part_channels.len());
    let mut offset = 0;
    for &pc in part_channels {
        let part = Tensor3::from_fn(h, w, pc, |r, col, ch| grad_out.get(r, col, offset + ch));
        offset += pc;
        outs.push(part);
    }
    Ok(outs)
}

/// Mean cross-entropy of softmaxed logits against integer labels, computed
/// in logit space (max-shifted log-sum-exp).
pub fn softmax_xent_loss(logits: &Tensor3, target: &LabelMap) -> Result<f64> {
    check_target(logits, target)?;
    let (h, w, l) = logits.shape();
    let mut total = 0.0;
    for r in 0..h {
        let row = logits.row(r);
        for col in 0..w {
            let px = &row[col * l..(col + 1) * l];
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + px.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let log_p = (logits.get(r, col, target.get(r, col) as usize) - lse)
                .max(PROB_FLOOR.ln());
            total -= log_p;
        }
    }
    let loss = total / (h * w) as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite cross-entropy loss {loss}")));
    }
    Ok(loss)
}

/// Gradient of [`softmax_xent_loss`] w.r.t. the logits:
/// `(softmax(logits) - one_hot(target)) / (H*W)`.
pub fn softmax_xent_backward(logits: &Tensor3, target: &LabelMap) -> Result<Tensor3> {
    check_target(logits, target)?;
    let (h, w, _) = logits.shape();
    let scale = 1.0 / (h * w) as f64;
    let mut g = ops::softmax_channels(logits);
    for r in 0..h {
        for col in 0..w {
            let t = target.get(r, col) as usize;
            let cur = g.get(r, col, t);
            g.set(r, col, t, cur - 1.0);
        }
    }
    Ok(g.scale(scale))
}

fn check_target(logits: &Tensor3, target: &LabelMap) -> Result<()> {
    if (logits.height(), logits.width()) != (target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "target {}x{} does not match logits {}x{}",
            target.height(),
            target.width(),
            logits.height(),
            logits.width()
        )));
    }
    if target.num_classes() as usize > logits.channels() {
        return Err(Error::Data(format!(
            "target has {} classes, logits only {} channels",
            target.num_classes(),
            logits.channels()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// DAG runtime
// ---------------------------------------------------------------------------

pub type NodeId = usize;

/// A node's operation; convolutions reference a parameter slot by index.
#[derive(Debug, Clone)]
pub enum GraphOp {
    Input,
    ConvTanh { param: usize },
    ConvLinear { param: usize },
    MeanPool2,
    MaxPool2,
    UpsampleNn2,
    Concat,
    FlipH,
}

#[derive(Debug, Clone)]
struct GraphNode {
    op: GraphOp,
    inputs: Vec<NodeId>,
}

/// A static DAG of layer applications ending in a logits node. Parameters
/// live outside the graph (in a [`ParamSet`]) so training can update them
/// without rebuilding.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    output: NodeId,
}

impl Graph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder { nodes: Vec::new(), input_made: false }
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Forward through the DAG, caching every node activation.
    pub fn forward(&self, params: &ParamSet, image: &Tensor3) -> Result<Activations> {
        let mut values: Vec<Option<Tensor3>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                GraphOp::Input => image.clone(),
                GraphOp::ConvTanh { param } => {
                    let x = values[node.inputs[0]].as_ref().expect("topological order");
                    let p = params.pair(*param);
                    ops::tanh_map(&ops::conv2d_same(x, &p.kernel, &p.bias)?)
                }
                GraphOp::ConvLinear { param } => {
                    let x = values[node.inputs[0]].as_ref().expect("topological order");
                    let p = params.pair(*param);
                    ops::conv2d_same(x, &p.kernel, &p.bias)?
                }
                GraphOp::MeanPool2 => {
                    ops::mean_pool2(values[node.inputs[0]].as_ref().expect("topological order"))
                }
                GraphOp::MaxPool2 => {
                    ops::max_pool2(values[node.inputs[0]].as_ref().expect("topological order"))
                }
                GraphOp::UpsampleNn2 => {
                    ops::upsample_nn2(values[node.inputs[0]].as_ref().expect("topological order"))
                }
                GraphOp::Concat => {
                    let parts: Vec<&Tensor3> = node
                        .inputs
                        .iter()
                        .map(|&i| values[i].as_ref().expect("topological order"))
                        .collect();
                    ops::concat_channels(&parts)?
                }
                GraphOp::FlipH => {
                    ops::flip_horizontal(values[node.inputs[0]].as_ref().expect("topological order"))
                }
            };
            values[id] = Some(out);
        }
        Ok(Activations { values: values.into_iter().map(Option::unwrap).collect() })
    }

    /// Backward from a gradient at the output node. Consumes the cached
    /// activations; returns parameter gradients and the input gradient.
    pub fn backward(
        &self,
        params: &ParamSet,
        acts: Activations,
        grad_at_output: Tensor3,
    ) -> Result<(ParamSet, Tensor3)> {
        let mut grads: Vec<Option<Tensor3>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_at_output);
        let mut param_grads = params.zeros_like();
        let mut input_grad: Option<Tensor3> = None;

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                GraphOp::Input => input_grad = Some(g),
                GraphOp::ConvTanh { param } => {
                    let x = &acts.values[node.inputs[0]];
                    let p = params.pair(*param);
                    let (gin, gk, gb) = conv_tanh_backward(x, &p.kernel, &acts.values[id], &g)?;
                    param_grads.accumulate(*param, &gk, &gb);
                    accumulate(&mut grads[node.inputs[0]], gin);
                }
                GraphOp::ConvLinear { param } => {
                    let x = &acts.values[node.inputs[0]];
                    let p = params.pair(*param);
                    let (gin, gk, gb) = ops::conv2d_backward(x, &p.kernel, &g)?;
                    param_grads.accumulate(*param, &gk, &gb);
                    accumulate(&mut grads[node.inputs[0]], gin);
                }
                GraphOp::MeanPool2 => {
                    let gin = mean_pool2_backward(acts.values[node.inputs[0]].shape(), &g);
                    accumulate(&mut grads[node.inputs[0]], gin);
                }
                GraphOp::MaxPool2 => {
                    let gin = max_pool2_backward(&acts.values[node.inputs[0]], &g);
                    accumulate(&mut grads[node.inputs[0]], gin);
                }
                GraphOp::UpsampleNn2 => {
                    accumulate(&mut grads[node.inputs[0]], upsample_nn2_backward(&g));
                }
                GraphOp::Concat => {
                    let channels: Vec<usize> =
                        node.inputs.iter().map(|&i| acts.values[i].channels()).collect();
                    for (&src, gin) in node.inputs.iter().zip(concat_backward(&channels, &g)?) {
                        accumulate(&mut grads[src], gin);
                    }
                }
                GraphOp::FlipH => {
                    accumulate(&mut grads[node.inputs[0]], ops::flip_horizontal(&g));
                }
            }
        }
        let input_grad =
            input_grad.ok_or_else(|| Error::State("output does not depend on the input".into()))?;
        Ok((param_grads, input_grad))
    }

    /// Fused loss + gradients for cross-entropy on the output logits.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet,
        image: &Tensor3,
        target: &LabelMap,
    ) -> Result<(f64, ParamSet, Tensor3)> {
        let acts = self.forward(params, image)?;
        let logits = acts.output(self);
        let loss = softmax_xent_loss(logits, target)?;
        let grad = softmax_xent_backward(logits, target)?;
        let (pg, ig) = self.backward(params, acts, grad)?;
        Ok((loss, pg, ig))
    }

    /// Loss only (used by the finite-difference harness).
    pub fn loss(&self, params: &ParamSet, image: &Tensor3, target: &LabelMap) -> Result<f64> {
        let acts = self.forward(params, image)?;
        softmax_xent_loss(acts.output(self), target)
    }
}

fn accumulate(slot: &mut Option<Tensor3>, g: Tensor3) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Cached per-node activations of one forward pass. Consumed by
/// [`Graph::backward`], which enforces the forward-before-backward order.
pub struct Activations {
    values: Vec<Tensor3>,
}

impl Activations {
    pub fn output<'a>(&'a self, graph: &Graph) -> &'a Tensor3 {
        &self.values[graph.output]
    }

    pub fn node(&self, id: NodeId) -> &Tensor3 {
        &self.values[id]
    }
}

pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
    input_made: bool,
}

impl GraphBuilder {
    pub fn input(&mut self) -> NodeId {
        assert!(!self.input_made, "graph has a single input node");
        self.input_made = true;
        self.push(GraphOp::Input, vec![])
    }

    pub fn conv_tanh(&mut self, x: NodeId, param: usize) -> NodeId {
        self.push(GraphOp::ConvTanh { param }, vec![x])
    }

    pub fn conv_linear(&mut self, x: NodeId, param: usize) -> NodeId {
        self.push(GraphOp::ConvLinear { param }, vec![x])
    }

    pub fn mean_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(GraphOp::MeanPool2, vec![x])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(GraphOp::MaxPool2, vec![x])
    }

    pub fn upsample_nn2(&mut self, x: NodeId) -> NodeId {
        self.push(GraphOp::UpsampleNn2, vec![x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(GraphOp::Concat, xs.to_vec())
    }

    pub fn flip_h(&mut self, x: NodeId) -> NodeId {
        self.push(GraphOp::FlipH, vec![x])
    }

    pub fn finish(self, output: NodeId) -> Graph {
        assert!(output < self.nodes.len());
        Graph { nodes: self.nodes, output }
    }

    fn push(&mut self, op: GraphOp, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "inputs must precede the node");
        }
        self.nodes.push(GraphNode { op, inputs });
        self.nodes.len() - 1
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One convolution's learnable pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam {
    pub kernel: Tensor4,
    pub bias: BiasVec,
}

/// All learnable pairs of a network, indexed by the slot numbers the graph
/// references. Doubles as the gradient accumulator (same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pairs: Vec<ConvParam>,
}

impl ParamSet {
    pub fn new(pairs: Vec<ConvParam>) -> Self {
        ParamSet { pairs }
    }

    pub fn pair(&self, idx: usize) -> &ConvParam {
        &self.pairs[idx]
    }

    pub fn pairs(&self) -> &[ConvParam] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [ConvParam] {
        &mut self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.pairs.iter().map(|p| p.kernel.data().len() + p.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            pairs: self
                .pairs
                .iter()
                .map(|p| {
                    let (kh, kw, cin, cout) = p.kernel.dims();
                    ConvParam {
                        kernel: Tensor4::zeros(kh, kw, cin, cout).expect("dims already valid"),
                        bias: BiasVec::zeros(p.bias.len()),
                    }
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, idx: usize, gk: &Tensor4, gb: &BiasVec) {
        let p = &mut self.pairs[idx];
        for (a, b) in p.kernel.data_mut().iter_mut().zip(gk.data()) {
            *a += b;
        }
        for (a, b) in p.bias.values_mut().iter_mut().zip(gb.values()) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) {
        debug_assert_eq!(self.pairs.len(), other.pairs.len());
        for (p, o) in self.pairs.iter_mut().zip(&other.pairs) {
            for (a, b) in p.kernel.data_mut().iter_mut().zip(o.kernel.data()) {
                *a += factor * b;
            }
            for (a, b) in p.bias.values_mut().iter_mut().zip(o.bias.values()) {
                *a += factor * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.pairs.iter().all(|p| {
            p.kernel.data().iter().all(|v| v.is_finite())
                && p.bias.values().iter().all(|v| v.is_finite())
        })
    }

    /// Visit every scalar as `(pair, within-pair offset)`; kernel scalars
    /// first, then bias. Offsets are stable, which the finite-difference
    /// harness and the checkpoint writer both rely on.
    pub fn coord_count(&self, pair: usize) -> usize {
        let p = &self.pairs[pair];
        p.kernel.data().len() + p.bias.len()
    }

    pub fn get_coord(&self, pair: usize, offset: usize) -> f64 {
        let p = &self.pairs[pair];
        let nk = p.kernel.data().len();
        if offset < nk {
            p.kernel.data()[offset]
        } else {
            p.bias.values()[offset - nk]
        }
    }

    pub fn set_coord(&mut self, pair: usize, offset: usize, v: f64) {
        let p = &mut self.pairs[pair];
        let nk = p.kernel.data().len();
        if offset < nk {
            p.kernel.data_mut()[offset] = v;
        } else {
            p.bias.values_mut()[offset - nk] = v;
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference harness
// ---------------------------------------------------------------------------

/// Compare analytic gradients of `graph` against central finite differences.
///
/// Perturbs every parameter scalar and a seeded sample of at least
/// `input_samples` input elements (all of them if the input is smaller).
/// Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic| + |numeric|, 1e-8)`.
pub fn grad_check(
    graph: &Graph,
    params: &ParamSet,
    input: &Tensor3,
    target: &LabelMap,
    epsilon: f64,
    input_samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }

    let (loss, analytic_params, analytic_input) = graph.loss_and_grads(params, input, target)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }

    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
    let mut max_err = 0.0f64;

    let mut work = params.clone();
    for pair in 0..params.len() {
        for offset in 0..params.coord_count(pair) {
            let orig = params.get_coord(pair, offset);
            work.set_coord(pair, offset, orig + epsilon);
            let up = graph.loss(&work, input, target)?;
            work.set_coord(pair, offset, orig - epsilon);
            let down = graph.loss(&work, input, target)?;
            work.set_coord(pair, offset, orig);
            let numeric = (up - down) / (2.0 * epsilon);
            max_err = max_err.max(rel(analytic_params.get_coord(pair, offset), numeric));
        }
    }

    let n = input.data().len();
    let mut coords: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(input_samples.max(200).min(n));
    let mut work_in = input.clone();
    for &i in &coords {
        let orig = input.data()[i];
        work_in.data_mut()[i] = orig + epsilon;
        let up = graph.loss(params, &work_in, target)?;
        work_in.data_mut()[i] = orig - epsilon;
        let down = graph.loss(params, &work_in, target)?;
        work_in.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        max_err = max_err.max(rel(analytic_input.data()[i], numeric));
    }

    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
        Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_conv(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> ConvParam {
        let s = (6.0 / (k * k * cin + k * k * cout) as f64).sqrt();
        ConvParam {
            kernel: Tensor4::new(
                k,
                k,
                cin,
                cout,
                (0..k * k * cin * cout).map(|_| rng.gen_range(-s..s)).collect(),
            )
            .unwrap(),
            bias: BiasVec::new((0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect()),
        }
    }

    fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize, l: u8) -> LabelMap {
        LabelMap::new(h, w, l, (0..h * w).map(|_| rng.gen_range(0..l)).collect()).unwrap()
    }

    #[test]
    fn conv_tanh_zero_params_gives_zero_output() {
        let layer = Layer::ConvTanh {
            kernel: Tensor4::zeros(3, 3, 2, 4).unwrap(),
            bias: BiasVec::zeros(4),
        };
        let x = Tensor3::filled(5, 5, 2, 0.7);
        let y = layer_forward(&layer, &[&x]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_pool_layer_delegates_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 6, 8, 3);
        let y = layer_forward(&Layer::MeanPool2, &[&x]).unwrap();
        assert_eq!(y, ops::mean_pool2(&x));
    }

    #[test]
    fn conv_linear_delta_kernel_is_identity() {
        let mut kernel = Tensor4::zeros(3, 3, 1, 1).unwrap();
        kernel.set(1, 1, 0, 0, 1.0);
        let layer = Layer::ConvLinear { kernel, bias: BiasVec::zeros(1) };
        let x = Tensor3::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        assert_eq!(layer_forward(&layer, &[&x]).unwrap(), x);
    }

    #[test]
    fn upsample_backward_sums_replicas() {
        let x = Tensor3::filled(1, 1, 1, 3.0);
        let up = ops::upsample_nn2(&x);
        let g = Tensor3::filled(2, 2, 1, 1.0);
        let (gins, gp) =
            layer_backward(&Layer::UpsampleNn2, &[&x], &up, &g).unwrap();
        assert!(gp.is_none());
        assert_eq!(gins[0].data(), &[4.0]);
    }

    #[test]
    fn mean_pool_backward_distributes_quarter() {
        let x = Tensor3::filled(2, 2, 1, 1.0);
        let y = ops::mean_pool2(&x);
        let g = Tensor3::filled(1, 1, 1, 1.0);
        let (gins, _) = layer_backward(&Layer::MeanPool2, &[&x], &y, &g).unwrap();
        assert_eq!(gins[0].data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn max_pool_backward_is_one_hot_per_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 6, 6, 2);
        let y = ops::max_pool2(&x);
        let g = Tensor3::filled(3, 3, 2, 1.0);
        let (gins, _) = layer_backward(&Layer::MaxPool2, &[&x], &y, &g).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for ch in 0..2 {
                    let nonzero = (0..2)
                        .flat_map(|dr| (0..2).map(move |dc| (dr, dc)))
                        .filter(|&(dr, dc)| gins[0].get(2 * r + dr, 2 * c + dc, ch) != 0.0)
                        .count();
                    assert_eq!(nonzero, 1);
                }
            }
        }
    }

    #[test]
    fn max_pool_ties_go_to_first_in_scan_order() {
        let x = Tensor3::filled(2, 2, 1, 1.0);
        let y = ops::max_pool2(&x);
        let g = Tensor3::filled(1, 1, 1, 1.0);
        let (gins, _) = layer_backward(&Layer::MaxPool2, &[&x], &y, &g).unwrap();
        assert_eq!(gins[0].data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_backward_reassembles_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, 3, 3, 2);
        let b = random_tensor(&mut rng, 3, 3, 3);
        let y = ops::concat_channels(&[&a, &b]).unwrap();
        let g = random_tensor(&mut rng, 3, 3, 5);
        let (gins, _) = layer_backward(&Layer::ConcatChannels, &[&a, &b], &y, &g).unwrap();
        let rejoined = ops::concat_channels(&[&gins[0], &gins[1]]).unwrap();
        assert_eq!(rejoined, g);
    }

    #[test]
    fn softmax_xent_backward_requires_fused_api() {
        let x = Tensor3::zeros(2, 2, 3);
        let y = ops::softmax_channels(&x);
        let g = Tensor3::zeros(2, 2, 3);
        let err = layer_backward(&Layer::SoftmaxXent, &[&x], &y, &g);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn flip_of_flip_gradient_is_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_tensor(&mut rng, 4, 6, 2);
        let once = ops::flip_horizontal(&g);
        assert_eq!(ops::flip_horizontal(&once), g);
    }

    #[test]
    fn single_conv_tanh_grad_check_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ParamSet::new(vec![random_conv(&mut rng, 3, 2, 3)]);
        let mut b = Graph::builder();
        let x = b.input();
        let y = b.conv_tanh(x, 0);
        let graph = b.finish(y);
        let input = random_tensor(&mut rng, 8, 8, 2);
        let target = random_target(&mut rng, 8, 8, 3);
        let err = grad_check(&graph, &params, &input, &target, 1e-5, 200, 3).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn pooling_only_graph_checks_input_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = ParamSet::new(vec![]);
        let mut b = Graph::builder();
        let x = b.input();
        let y = b.mean_pool2(x);
        let graph = b.finish(y);
        let input = random_tensor(&mut rng, 8, 8, 3);
        let target = random_target(&mut rng, 4, 4, 3);
        let err = grad_check(&graph, &params, &input, &target, 1e-5, 200, 4).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn fanout_accumulation_matches_finite_differences() {
        // input feeds both concat branches, so backward must sum the two paths
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let params = ParamSet::new(vec![random_conv(&mut rng, 3, 4, 3)]);
        let mut b = Graph::builder();
        let x = b.input();
        let f = b.flip_h(x);
        let cat = b.concat(&[x, f]);
        let y = b.conv_tanh(cat, 0);
        let graph = b.finish(y);
        let input = random_tensor(&mut rng, 6, 6, 2);
        let target = random_target(&mut rng, 6, 6, 3);
        let err = grad_check(&graph, &params, &input, &target, 1e-5, 200, 5).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn grad_check_rejects_out_of_range_epsilon() {
        let params = ParamSet::new(vec![]);
        let mut b = Graph::builder();
        let x = b.input();
        let graph = b.finish(x);
        let input = Tensor3::zeros(2, 2, 2);
        let target = LabelMap::background(2, 2, 2);
        assert!(matches!(
            grad_check(&graph, &params, &input, &target, 1e-2, 200, 0),
            Err(Error::Config(_))
        ));
    }
}
