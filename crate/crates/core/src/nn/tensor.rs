//! Tape-based reverse-mode differentiation over n-d arrays.
//!
//! A `Tape` owns every node of one forward computation; `Var` is an
//! index into it. Nodes are appended in evaluation order, so the tape
//! is already topologically sorted and `backward` is a single reverse
//! sweep. Gradients accumulate additively when a value feeds several
//! consumers.
//!
//! The engine is deliberately minimal: exactly the operations the two
//! segmentation architectures need, each with a hand-written adjoint.
//! Training runs in f32; gradient verification uses the same code
//! instantiated at f64.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops;
use crate::error::{CoreError, Result};

/// Scalar types the engine computes with. Conversions go through f64
/// so random draws can be shared between precisions.
pub trait Element: ndarray::NdFloat + rand::distr::uniform::SampleUniform {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum OpKind<E: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    ConvTranspose2 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u8> },
    LeakyRelu { x: Var, alpha: E },
    Dropout { x: Var, mask: ArrayD<E> },
    Linear { x: Var, w: Var, b: Var },
    ConcatChannels { a: Var, b: Var, split: usize },
    SoftmaxChannels { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: E },
    Sum { x: Var },
    CrossEntropy { logits: Var, target: ArrayD<usize> },
    SoftDice { probs: Var, target: ArrayD<E> },
    SoftMargin { logits: Var, target: ArrayD<E> },
}

pub struct Tape<E: Element> {
    values: Vec<ArrayD<E>>,
    grads: Vec<Option<ArrayD<E>>>,
    ops: Vec<OpKind<E>>,
    requires: Vec<bool>,
}

fn shape_err(op: &'static str, reason: String) -> CoreError {
    CoreError::invalid(op, reason)
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<E>, op: OpKind<E>, requires: bool) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value out of {}",
            op_name(&op)
        );
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`; None
    /// when the node does not require gradients or was unreachable.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn scalar(&self, v: Var) -> E {
        self.values[v.0][[]]
    }

    /// Inserts an input or parameter value. Kernels assume standard
    /// layout, so anything else is copied into one here.
    pub fn leaf(&mut self, value: ArrayD<E>, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, OpKind::Leaf, requires_grad)
    }

    /// 3x3 cross-correlation, zero padding 1, stride 1.
    /// x: (B,C,H,W), w: (K,C,3,3), b: (K) -> (B,K,H,W).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 4 || ws.len() != 4 || bv.ndim() != 1 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-d x, 4-d w, 1-d b; got {xs:?}, {ws:?}, {:?}", bv.shape()),
            ));
        }
        if ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv2d", format!("kernel must be 3x3, got {ws:?}")));
        }
        if ws[1] != xs[1] || bv.len() != ws[0] {
            return Err(shape_err(
                "conv2d",
                format!("channel mismatch: x {xs:?}, w {ws:?}, b {:?}", bv.shape()),
            ));
        }
        let out = ops::conv2d_forward(
            &xv.view().into_dimensionality().unwrap(),
            &wv.view().into_dimensionality().unwrap(),
            &bv.view().into_dimensionality().unwrap(),
        );
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(out.into_dyn(), OpKind::Conv2d { x, w, b }, requires))
    }

    /// 2x2 transpose convolution, stride 2, the exact adjoint of the
    /// stride-2 2x2 convolution. x: (B,C,H,W), w: (C,K,2,2), b: (K)
    /// -> (B,K,2H,2W).
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 4 || ws.len() != 4 || bv.ndim() != 1 {
            return Err(shape_err(
                "conv_transpose2",
                format!("expected 4-d x, 4-d w, 1-d b; got {xs:?}, {ws:?}, {:?}", bv.shape()),
            ));
        }
        if ws[2] != 2 || ws[3] != 2 {
            return Err(shape_err(
                "conv_transpose2",
                format!("kernel must be 2x2, got {ws:?}"),
            ));
        }
        if ws[0] != xs[1] || bv.len() != ws[1] {
            return Err(shape_err(
                "conv_transpose2",
                format!("channel mismatch: x {xs:?}, w {ws:?}, b {:?}", bv.shape()),
            ));
        }
        let out = ops::conv_transpose2_forward(
            &xv.view().into_dimensionality().unwrap(),
            &wv.view().into_dimensionality().unwrap(),
            &bv.view().into_dimensionality().unwrap(),
        );
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(out.into_dyn(), OpKind::ConvTranspose2 { x, w, b }, requires))
    }

    /// Max over disjoint 2x2 windows; ties go to the first occurrence
    /// in row-major window order. (B,C,H,W) -> (B,C,H/2,W/2).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(shape_err("max_pool2", format!("expected 4-d input, got {xs:?}")));
        }
        if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err(
                "max_pool2",
                format!("spatial dims must be even, got {}x{}", xs[2], xs[3]),
            ));
        }
        let (out, argmax) = ops::max_pool2_forward(&xv.view().into_dimensionality().unwrap());
        let requires = self.req(x);
        Ok(self.push(out.into_dyn(), OpKind::MaxPool2 { x, argmax }, requires))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let a = E::from_f64(alpha);
        let out = self.values[x.0].mapv(|v| if v >= E::zero() { v } else { a * v });
        let requires = self.req(x);
        self.push(out, OpKind::LeakyRelu { x, alpha: a }, requires)
    }

    /// Inverted dropout: each element is zeroed with probability `p`
    /// and survivors scale by 1/(1-p), so the expectation is
    /// preserved and inference needs no correction. One f64 draw per
    /// element in row-major order.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask = self.values[x.0].mapv(|_| {
            if rng.random::<f64>() < p {
                E::zero()
            } else {
                keep
            }
        });
        let out = &self.values[x.0] * &mask;
        let requires = self.req(x);
        Ok(self.push(out, OpKind::Dropout { x, mask }, requires))
    }

    /// Affine map x.w^T + b. x: (B,N), w: (M,N), b: (M) -> (B,M).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        if xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1 {
            return Err(shape_err(
                "linear",
                format!(
                    "expected 2-d x, 2-d w, 1-d b; got {:?}, {:?}, {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        if xv.shape()[1] != wv.shape()[1] || bv.len() != wv.shape()[0] {
            return Err(shape_err(
                "linear",
                format!(
                    "dimension mismatch: x {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let out = ops::linear_forward(
            &xv.view().into_dimensionality().unwrap(),
            &wv.view().into_dimensionality().unwrap(),
            &bv.view().into_dimensionality().unwrap(),
        );
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(out.into_dyn(), OpKind::Linear { x, w, b }, requires))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.ndim() != 4 || bv.ndim() != 4 {
            return Err(shape_err(
                "concat_channels",
                format!("expected 4-d inputs, got {:?}, {:?}", av.shape(), bv.shape()),
            ));
        }
        let (sa, sb) = (av.shape(), bv.shape());
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(shape_err(
                "concat_channels",
                format!("batch/spatial mismatch: {sa:?} vs {sb:?}"),
            ));
        }
        // ndarray's concatenate can yield a non-standard layout; the
        // conv kernels require contiguous standard-order values.
        let mut out = ArrayD::zeros(ndarray::IxDyn(&[sa[0], sa[1] + sb[1], sa[2], sa[3]]));
        out.slice_mut(ndarray::s![.., ..sa[1], .., ..]).assign(av);
        out.slice_mut(ndarray::s![.., sa[1].., .., ..]).assign(bv);
        let split = sa[1];
        let requires = self.req(a) || self.req(b);
        Ok(self.push(out, OpKind::ConcatChannels { a, b, split }, requires))
    }

    /// Softmax over axis 1 with max subtraction; any rank >= 2.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        if xv.ndim() < 2 {
            return Err(shape_err(
                "softmax_channels",
                format!("need a channel axis, got shape {:?}", xv.shape()),
            ));
        }
        let out = ops::softmax_channels_forward(xv);
        let requires = self.req(x);
        Ok(self.push(out, OpKind::SoftmaxChannels { x }, requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("shape mismatch: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av + bv;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(out, OpKind::Add { a, b }, requires))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kk = E::from_f64(k);
        let out = self.values[x.0].mapv(|v| v * kk);
        let requires = self.req(x);
        self.push(out, OpKind::Scale { x, k: kk }, requires)
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let requires = self.req(x);
        self.push(ndarray::arr0(s).into_dyn(), OpKind::Sum { x }, requires)
    }

    /// Mean over pixels of -log softmax probability of the true class.
    /// logits: (B,K,rest..), target codes: (B,rest..).
    pub fn cross_entropy(&mut self, logits: Var, target: &ArrayD<u8>) -> Result<Var> {
        let lv = &self.values[logits.0];
        if lv.ndim() < 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits need a channel axis, got {:?}", lv.shape()),
            ));
        }
        let k = lv.shape()[1];
        let mut expect = lv.shape().to_vec();
        expect.remove(1);
        if target.shape() != &expect[..] {
            return Err(shape_err(
                "cross_entropy",
                format!(
                    "target shape {:?} does not match logits {:?} minus the channel axis",
                    target.shape(),
                    lv.shape()
                ),
            ));
        }
        if let Some(bad) = target.iter().find(|c| **c as usize >= k) {
            return Err(CoreError::invalid(
                "cross_entropy",
                format!("class code {bad} outside 0..{k}"),
            ));
        }
        let codes = target.mapv(|c| c as usize);
        let loss = ops::cross_entropy_forward(lv, &codes);
        let requires = self.req(logits);
        Ok(self.push(
            ndarray::arr0(loss).into_dyn(),
            OpKind::CrossEntropy {
                logits,
                target: codes,
            },
            requires,
        ))
    }

    /// 1 - mean over classes of (2 sum(p g) + eps) / (sum(p^2) +
    /// sum(g^2) + eps), sums over batch and pixels, eps = 1e-6.
    /// probs and one-hot target share shape (B,K,rest..).
    pub fn soft_dice(&mut self, probs: Var, target: &ArrayD<E>) -> Result<Var> {
        let pv = &self.values[probs.0];
        if pv.ndim() < 2 {
            return Err(shape_err(
                "soft_dice",
                format!("probs need a channel axis, got {:?}", pv.shape()),
            ));
        }
        if pv.shape() != target.shape() {
            return Err(shape_err(
                "soft_dice",
                format!("target shape {:?} vs probs {:?}", target.shape(), pv.shape()),
            ));
        }
        let loss = ops::soft_dice_forward(pv, target);
        let requires = self.req(probs);
        Ok(self.push(
            ndarray::arr0(loss).into_dyn(),
            OpKind::SoftDice {
                probs,
                target: target.clone(),
            },
            requires,
        ))
    }

    /// Mean over elements of ln(1 + exp(-y x)) with targets y in
    /// {-1, +1}, computed via the stable softplus.
    pub fn soft_margin(&mut self, logits: Var, target: &ArrayD<E>) -> Result<Var> {
        let lv = &self.values[logits.0];
        if lv.shape() != target.shape() {
            return Err(shape_err(
                "soft_margin",
                format!("target shape {:?} vs logits {:?}", target.shape(), lv.shape()),
            ));
        }
        let one = E::one();
        if let Some(bad) = target.iter().find(|y| **y != one && **y != -one) {
            return Err(CoreError::invalid(
                "soft_margin",
                format!("target {} is not in {{-1, +1}}", Element::to_f64(*bad)),
            ));
        }
        let loss = ops::soft_margin_forward(lv, target);
        let requires = self.req(logits);
        Ok(self.push(
            ndarray::arr0(loss).into_dyn(),
            OpKind::SoftMargin {
                logits,
                target: target.clone(),
            },
            requires,
        ))
    }

    /// Reverse sweep from a scalar loss. Existing gradients are
    /// cleared first; after the call every reachable requires-grad
    /// node holds d loss / d node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].ndim() != 0 {
            return Err(CoreError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(ndarray::arr0(E::one()).into_dyn());

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(go) = self.grads[i].clone() else {
                continue;
            };
            match &self.ops[i] {
                OpKind::Leaf => {}
                OpKind::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &self.values[x.0].view().into_dimensionality().unwrap(),
                        &self.values[w.0].view().into_dimensionality().unwrap(),
                        &go.view().into_dimensionality().unwrap(),
                    );
                    let (x, w, b) = (*x, *w, *b);
                    self.accum(x, gx.into_dyn());
                    self.accum(w, gw.into_dyn());
                    self.accum(b, gb.into_dyn());
                }
                OpKind::ConvTranspose2 { x, w, b } => {
                    let (gx, gw, gb) = ops::conv_transpose2_backward(
                        &self.values[x.0].view().into_dimensionality().unwrap(),
                        &self.values[w.0].view().into_dimensionality().unwrap(),
                        &go.view().into_dimensionality().unwrap(),
                    );
                    let (x, w, b) = (*x, *w, *b);
                    self.accum(x, gx.into_dyn());
                    self.accum(w, gw.into_dyn());
                    self.accum(b, gb.into_dyn());
                }
                OpKind::MaxPool2 { x, argmax } => {
                    let gx = ops::max_pool2_backward(
                        self.values[x.0].shape(),
                        argmax,
                        &go.view().into_dimensionality().unwrap(),
                    );
                    let x = *x;
                    self.accum(x, gx.into_dyn());
                }
                OpKind::LeakyRelu { x, alpha } => {
                    let a = *alpha;
                    let gx = ndarray::Zip::from(&self.values[x.0])
                        .and(&go)
                        .map_collect(|&v, &g| if v >= E::zero() { g } else { a * g });
                    let x = *x;
                    self.accum(x, gx);
                }
                OpKind::Dropout { x, mask } => {
                    let gx = &go * mask;
                    let x = *x;
                    self.accum(x, gx);
                }
                OpKind::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(
                        &self.values[x.0].view().into_dimensionality().unwrap(),
                        &self.values[w.0].view().into_dimensionality().unwrap(),
                        &go.view().into_dimensionality().unwrap(),
                    );
                    let (x, w, b) = (*x, *w, *b);
                    self.accum(x, gx.into_dyn());
                    self.accum(w, gw.into_dyn());
                    self.accum(b, gb.into_dyn());
                }
                OpKind::ConcatChannels { a, b, split } => {
                    let ga = go.slice_axis(ndarray::Axis(1), (0..*split).into()).to_owned();
                    let gb = go.slice_axis(ndarray::Axis(1), (*split..go.shape()[1]).into())
                        .to_owned();
                    let (a, b) = (*a, *b);
                    self.accum(a, ga);
                    self.accum(b, gb);
                }
                OpKind::SoftmaxChannels { x } => {
                    let gx = ops::softmax_channels_backward(&self.values[i], &go);
                    let x = *x;
                    self.accum(x, gx);
                }
                OpKind::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accum(a, go.clone());
                    self.accum(b, go);
                }
                OpKind::Scale { x, k } => {
                    let k = *k;
                    let gx = go.mapv(|g| g * k);
                    let x = *x;
                    self.accum(x, gx);
                }
                OpKind::Sum { x } => {
                    let g = go[[]];
                    let gx = ArrayD::from_elem(self.values[x.0].raw_dim(), g);
                    let x = *x;
                    self.accum(x, gx);
                }
                OpKind::CrossEntropy { logits, target } => {
                    let gx = ops::cross_entropy_backward(&self.values[logits.0], target, go[[]]);
                    let logits = *logits;
                    self.accum(logits, gx);
                }
                OpKind::SoftDice { probs, target } => {
                    let gx = ops::soft_dice_backward(&self.values[probs.0], target, go[[]]);
                    let probs = *probs;
                    self.accum(probs, gx);
                }
                OpKind::SoftMargin { logits, target } => {
                    let gx = ops::soft_margin_backward(&self.values[logits.0], target, go[[]]);
                    let logits = *logits;
                    self.accum(logits, gx);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: ArrayD<E>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => *g += &contribution,
            slot => *slot = Some(contribution),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

fn op_name<E: Element>(op: &OpKind<E>) -> &'static str {
    match op {
        OpKind::Leaf => "leaf",
        OpKind::Conv2d { .. } => "conv2d",
        OpKind::ConvTranspose2 { .. } => "conv_transpose2",
        OpKind::MaxPool2 { .. } => "max_pool2",
        OpKind::LeakyRelu { .. } => "leaky_relu",
        OpKind::Dropout { .. } => "dropout",
        OpKind::Linear { .. } => "linear",
        OpKind::ConcatChannels { .. } => "concat_channels",
        OpKind::SoftmaxChannels { .. } => "softmax_channels",
        OpKind::Add { .. } => "add",
        OpKind::Scale { .. } => "scale",
        OpKind::Sum { .. } => "sum",
        OpKind::CrossEntropy { .. } => "cross_entropy",
        OpKind::SoftDice { .. } => "soft_dice",
        OpKind::SoftMargin { .. } => "soft_margin",
    }
}
