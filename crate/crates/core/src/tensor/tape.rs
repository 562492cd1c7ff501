use super::kernels::{self, ConvSpec};
use super::{Element, Shape4, Tensor4};
use crate::error::TensorError;

/// Handle to a node of a [`GradGraph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, E),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, E, E),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        groups: usize,
        pad: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: E,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    AdaptiveAvgPool(Var),
    BilinearResize(Var),
    Reshape(Var),
    MapToTokens(Var),
    TokensToMap(Var),
    SplitHeads(Var),
    MergeHeads(Var),
    TransposeLast(Var),
    ConcatChannels(Var, Var),
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::AdaptiveAvgPool(..) => "adaptive_avg_pool",
            Op::BilinearResize(..) => "bilinear_resize",
            Op::Reshape(..) => "reshape",
            Op::MapToTokens(..) => "map_to_tokens",
            Op::TokensToMap(..) => "tokens_to_map",
            Op::SplitHeads(..) => "split_heads",
            Op::MergeHeads(..) => "merge_heads",
            Op::TransposeLast(..) => "transpose_last",
            Op::ConcatChannels(..) => "concat_channels",
        }
    }
}

struct Node<E> {
    value: Tensor4<E>,
    op: Op<E>,
}

/// Recorded computation: nodes in execution order, each holding its value and
/// the rule to push gradients to its inputs. Backward visits nodes in exact
/// reverse execution order. With recording disabled the same kernels run but
/// nodes degrade to leaves, so values are bitwise identical either way.
pub struct GradGraph<E> {
    nodes: Vec<Node<E>>,
    recording: bool,
}

/// Gradients produced by [`GradGraph::backward`], addressed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor4<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor4<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<E: Element> Default for GradGraph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradGraph<E> {
    pub fn new() -> Self {
        GradGraph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only graph: values are kept, backward metadata is not.
    pub fn inference() -> Self {
        GradGraph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<E> {
        &self.nodes[v.0].value
    }

    pub fn node_name(&self, v: Var) -> String {
        format!("{}#{}", self.nodes[v.0].op.name(), v.0)
    }

    /// Names of all ops in execution order (leaves included).
    pub fn op_sequence(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// First node holding a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some(format!("{}#{}", n.op.name(), i))
            }
        })
    }

    /// Activation-region signature: one bit per piecewise-linear decision
    /// (ReLU input sign, clamp interior). Two evaluations with different
    /// signatures straddle a kink, where central differences are invalid.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => {
                    sig.extend(self.nodes[a.0].value.data().iter().map(|&v| v > E::zero()));
                }
                Op::Clamp(a, lo, hi) => {
                    sig.extend(
                        self.nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .map(|&v| v > *lo && v < *hi),
                    );
                }
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor4<E>, op: Op<E>) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::binary_op("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::binary_op("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::binary_op("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::binary_op("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > E::zero() { x } else { E::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| E::one() / (E::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only through the interior.
    pub fn clamp(&mut self, a: Var, lo: E, hi: E) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    // -- contractions ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        groups: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let spec = ConvSpec {
            stride,
            dilation,
            groups,
            pad,
        };
        let v = kernels::conv2d(self.value(x), self.value(w), &spec)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                stride,
                dilation,
                groups,
                pad,
            },
        ))
    }

    /// Convolution with the same-padding convention: output spatial size is
    /// input size divided by the stride (odd kernels).
    pub fn conv2d_same(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let k = self.value(w).shape().height;
        let pad = kernels::same_padding(k, dilation);
        self.conv2d(x, w, stride, dilation, groups, pad)
    }

    // -- normalizations ----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        check_axis("softmax", axis)?;
        let v = kernels::softmax(self.value(x), axis);
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: E) -> Result<Var, TensorError> {
        check_axis("l2_normalize", axis)?;
        let v = kernels::l2_normalize(self.value(x), axis, eps);
        Ok(self.push(v, Op::L2Normalize { x, axis, eps }))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        check_axis("sum_axis", axis)?;
        let v = kernels::sum_axis(self.value(x), axis);
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = kernels::sum_all(self.value(x));
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = E::from_usize_(self.value(x).numel());
        let v = kernels::sum_all(self.value(x)).map(|s| s / n);
        self.push(v, Op::MeanAll(x))
    }

    // -- pooling / resampling ----------------------------------------------

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        self.adaptive_avg_pool(x, 1, 1)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = kernels::adaptive_avg_pool(self.value(x), oh, ow);
        self.push(v, Op::AdaptiveAvgPool(x))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let v = kernels::avg_pool(self.value(x), k)?;
        Ok(self.push(v, Op::AdaptiveAvgPool(x)))
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        if oh == 0 || ow == 0 {
            return Err(TensorError::invalid("bilinear_resize", "target size must be >= 1"));
        }
        let v = kernels::bilinear_resize(self.value(x), oh, ow);
        Ok(self.push(v, Op::BilinearResize(x)))
    }

    // -- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Shape4) -> Result<Var, TensorError> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn map_to_tokens(&mut self, x: Var) -> Var {
        let v = kernels::map_to_tokens(self.value(x));
        self.push(v, Op::MapToTokens(x))
    }

    pub fn tokens_to_map(
        &mut self,
        x: Var,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Var, TensorError> {
        let v = kernels::tokens_to_map(self.value(x), channels, height, width)?;
        Ok(self.push(v, Op::TokensToMap(x)))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let v = kernels::split_heads(self.value(x), heads)?;
        Ok(self.push(v, Op::SplitHeads(x)))
    }

    pub fn merge_heads(&mut self, x: Var) -> Var {
        let v = kernels::merge_heads(self.value(x));
        self.push(v, Op::MergeHeads(x))
    }

    pub fn transpose_last(&mut self, x: Var) -> Var {
        let v = kernels::transpose_last(self.value(x));
        self.push(v, Op::TransposeLast(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatChannels(a, b)))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar node. Returns one gradient per
    /// reachable node; unreaching nodes report `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got {}", self.value(loss).shape()),
            ));
        }
        if !self.recording {
            return Err(TensorError::invalid(
                "backward",
                "graph was built with recording disabled",
            ));
        }
        let mut grads: Vec<Option<Tensor4<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor4::scalar(E::one()));
        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor4<E>>], v: Var, delta: Tensor4<E>) {
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, i: usize, grad: &Tensor4<E>, grads: &mut [Option<Tensor4<E>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, kernels::reduce_to_shape(grad, val(a).shape()));
                Self::accumulate(grads, *b, kernels::reduce_to_shape(grad, val(b).shape()));
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, kernels::reduce_to_shape(grad, val(a).shape()));
                let neg = grad.map(|g| -g);
                Self::accumulate(grads, *b, kernels::reduce_to_shape(&neg, val(b).shape()));
            }
            Op::Mul(a, b) => {
                let da = kernels::binary_op("mul_bwd", grad, val(b), |g, y| g * y)
                    .expect("forward shapes were compatible");
                let db = kernels::binary_op("mul_bwd", grad, val(a), |g, x| g * x)
                    .expect("forward shapes were compatible");
                Self::accumulate(grads, *a, kernels::reduce_to_shape(&da, val(a).shape()));
                Self::accumulate(grads, *b, kernels::reduce_to_shape(&db, val(b).shape()));
            }
            Op::Div(a, b) => {
                let da = kernels::binary_op("div_bwd", grad, val(b), |g, y| g / y)
                    .expect("forward shapes were compatible");
                let db = kernels::binary_op("div_bwd", grad, val(a), |g, x| g * x)
                    .and_then(|t| kernels::binary_op("div_bwd", &t, val(b), |gx, y| -gx / (y * y)))
                    .expect("forward shapes were compatible");
                Self::accumulate(grads, *a, kernels::reduce_to_shape(&da, val(a).shape()));
                Self::accumulate(grads, *b, kernels::reduce_to_shape(&db, val(b).shape()));
            }
            Op::AddScalar(a) => Self::accumulate(grads, *a, grad.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                Self::accumulate(grads, *a, grad.map(|g| g * c));
            }
            Op::Relu(a) => {
                let x = val(a);
                let d = Tensor4::new(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| if x > E::zero() { g } else { E::zero() })
                        .collect(),
                )
                .expect("same shape");
                Self::accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = Tensor4::new(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&s, &g)| g * s * (E::one() - s))
                        .collect(),
                )
                .expect("same shape");
                Self::accumulate(grads, *a, d);
            }
            Op::Ln(a) => {
                let x = val(a);
                let d = Tensor4::new(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| g / x)
                        .collect(),
                )
                .expect("same shape");
                Self::accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let two = E::from_f64(2.0);
                let d = Tensor4::new(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&s, &g)| g / (two * s))
                        .collect(),
                )
                .expect("same shape");
                Self::accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(a);
                let (lo, hi) = (*lo, *hi);
                let d = Tensor4::new(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| if x > lo && x < hi { g } else { E::zero() })
                        .collect(),
                )
                .expect("same shape");
                Self::accumulate(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(a), val(b), grad);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Conv2d {
                x,
                w,
                stride,
                dilation,
                groups,
                pad,
            } => {
                let spec = ConvSpec {
                    stride: *stride,
                    dilation: *dilation,
                    groups: *groups,
                    pad: *pad,
                };
                let (dx, dw) = kernels::conv2d_backward(val(x), val(w), &spec, grad);
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
            }
            Op::Softmax { x, axis } => {
                let d = kernels::softmax_backward(&self.nodes[i].value, grad, *axis);
                Self::accumulate(grads, *x, d);
            }
            Op::L2Normalize { x, axis, eps } => {
                let d = kernels::l2_normalize_backward(val(x), grad, *axis, *eps);
                Self::accumulate(grads, *x, d);
            }
            Op::SumAxis { x, axis } => {
                let d = kernels::sum_axis_backward(val(x).shape(), grad, *axis);
                Self::accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let g = grad.data()[0];
                Self::accumulate(grads, *x, Tensor4::full(val(x).shape(), g));
            }
            Op::MeanAll(x) => {
                let n = E::from_usize_(val(x).numel());
                let g = grad.data()[0] / n;
                Self::accumulate(grads, *x, Tensor4::full(val(x).shape(), g));
            }
            Op::AdaptiveAvgPool(x) => {
                let d = kernels::adaptive_avg_pool_backward(val(x).shape(), grad);
                Self::accumulate(grads, *x, d);
            }
            Op::BilinearResize(x) => {
                let d = kernels::bilinear_resize_backward(val(x).shape(), grad);
                Self::accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = grad
                    .reshaped(val(x).shape())
                    .expect("reshape preserves element count");
                Self::accumulate(grads, *x, d);
            }
            Op::MapToTokens(x) => {
                let xs = val(x).shape();
                let d = kernels::tokens_to_map(grad, xs.channels, xs.height, xs.width)
                    .expect("inverse layout move");
                Self::accumulate(grads, *x, d);
            }
            Op::TokensToMap(x) => {
                let d = kernels::map_to_tokens(grad);
                Self::accumulate(grads, *x, d);
            }
            Op::SplitHeads(x) => {
                let d = kernels::merge_heads(grad);
                Self::accumulate(grads, *x, d);
            }
            Op::MergeHeads(x) => {
                let heads = val(x).shape().channels;
                let d = kernels::split_heads(grad, heads).expect("inverse layout move");
                Self::accumulate(grads, *x, d);
            }
            Op::TransposeLast(x) => {
                let d = kernels::transpose_last(grad);
                Self::accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (da, db) =
                    kernels::concat_channels_backward(val(a).shape(), val(b).shape(), grad);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
        }
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<(), TensorError> {
    if axis > 3 {
        Err(TensorError::invalid(op, format!("axis {axis} out of range 0..4")))
    } else {
        Ok(())
    }
}
