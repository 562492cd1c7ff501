//! Hybrid training objective: for every side output the sum of binary
//! cross-entropy, IoU, and SSIM losses; the total is the unweighted sum over
//! the five deeply-supervised maps.

use crate::error::{Error, Result, TensorError};
use crate::tensor::{kernels, Element, GradGraph, Shape4, Tensor4, Var};

/// Clamp applied inside logarithms and denominators.
pub const CLAMP_EPS: f64 = 1e-7;
/// SSIM stabilizers from the structural-similarity definition.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Sliding-window configuration for the SSIM term. Windows are "valid" only
/// (no padding); weights are a normalized Gaussian, or uniform when `sigma`
/// is `None`.
#[derive(Clone, Copy, Debug)]
pub struct SsimSettings {
    pub window: usize,
    pub sigma: Option<f64>,
}

impl Default for SsimSettings {
    fn default() -> Self {
        SsimSettings {
            window: 11,
            sigma: Some(1.5),
        }
    }
}

impl SsimSettings {
    pub fn kernel<E: Element>(&self) -> Tensor4<E> {
        let k = self.window;
        let mut data = vec![0.0f64; k * k];
        match self.sigma {
            Some(sigma) => {
                let c = (k as f64 - 1.0) / 2.0;
                let mut sum = 0.0;
                for y in 0..k {
                    for x in 0..k {
                        let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                        let w = (-d2 / (2.0 * sigma * sigma)).exp();
                        data[y * k + x] = w;
                        sum += w;
                    }
                }
                for v in &mut data {
                    *v /= sum;
                }
            }
            None => {
                let w = 1.0 / (k * k) as f64;
                data.iter_mut().for_each(|v| *v = w);
            }
        }
        Tensor4::new(
            Shape4::new(1, 1, k, k),
            data.into_iter().map(E::from_f64).collect(),
        )
        .expect("kernel shape is valid")
    }
}

fn check_pair<E: Element>(
    op: &'static str,
    s: Shape4,
    g: &Tensor4<E>,
) -> Result<(), TensorError> {
    if s != g.shape() {
        return Err(TensorError::shape(op, s, g.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph-side losses (differentiable path used in training)
// ---------------------------------------------------------------------------

/// `-(1/HW) * sum(G log S + (1-G) log(1-S))`, with S clamped to
/// `[eps, 1-eps]`, averaged over the batch.
pub fn bce_loss_graph<E: Element>(
    g: &mut GradGraph<E>,
    s: Var,
    target: &Tensor4<E>,
) -> Result<Var, TensorError> {
    check_pair("bce_loss", g.value(s).shape(), target)?;
    let eps = E::from_f64(CLAMP_EPS);
    let one = E::one();
    let gt = g.leaf(target.clone());
    let gt_inv = g.leaf(target.map(|v| one - v));
    let sc = g.clamp(s, eps, one - eps);
    let log_s = g.ln(sc);
    let pos = g.mul(gt, log_s)?;
    let ones = g.leaf(Tensor4::full(target.shape(), one));
    let s_inv = g.sub(ones, sc)?;
    let log_inv = g.ln(s_inv);
    let neg = g.mul(gt_inv, log_inv)?;
    let sum = g.add(pos, neg)?;
    let mean = g.mean_all(sum);
    Ok(g.mul_scalar(mean, -one))
}

/// `1 - sum(G*S) / sum(G + S - G*S)` per image, averaged over the batch; the
/// denominator is guarded by the clamp epsilon.
pub fn iou_loss_graph<E: Element>(
    g: &mut GradGraph<E>,
    s: Var,
    target: &Tensor4<E>,
) -> Result<Var, TensorError> {
    check_pair("iou_loss", g.value(s).shape(), target)?;
    let gt = g.leaf(target.clone());
    let prod = g.mul(gt, s)?;
    let gs = g.add(gt, s)?;
    let union = g.sub(gs, prod)?;
    let inter_b = {
        let r = g.sum_axis(prod, 2)?;
        g.sum_axis(r, 3)?
    };
    let union_b = {
        let r = g.sum_axis(union, 2)?;
        let r = g.sum_axis(r, 3)?;
        g.add_scalar(r, E::from_f64(CLAMP_EPS))
    };
    let iou = g.div(inter_b, union_b)?;
    let mean = g.mean_all(iou);
    let neg = g.mul_scalar(mean, -E::one());
    Ok(g.add_scalar(neg, E::one()))
}

/// `1 - mean(SSIM)` over valid sliding windows, following the
/// structural-similarity definition with the configured window weights.
pub fn ssim_loss_graph<E: Element>(
    g: &mut GradGraph<E>,
    s: Var,
    target: &Tensor4<E>,
    settings: &SsimSettings,
) -> Result<Var, TensorError> {
    let shape = g.value(s).shape();
    check_pair("ssim_loss", shape, target)?;
    if shape.channels != 1 {
        return Err(TensorError::invalid(
            "ssim_loss",
            format!("expects single-channel maps, got {shape}"),
        ));
    }
    let k = settings.window;
    if shape.height < k || shape.width < k {
        return Err(TensorError::invalid(
            "ssim_loss",
            format!("map {shape} is smaller than the {k}x{k} window"),
        ));
    }
    let kern_t = settings.kernel::<E>();
    let spec = kernels::ConvSpec {
        stride: 1,
        dilation: 1,
        groups: 1,
        pad: 0,
    };
    // Statistics of the ground truth are constants.
    let mu_g_t = kernels::conv2d(target, &kern_t, &spec).expect("window fits");
    let var_g_t = {
        let sq = kernels::binary_op("mul", target, target, |a, b| a * b).expect("same shape");
        let e_g2 = kernels::conv2d(&sq, &kern_t, &spec).expect("window fits");
        let mu2 = kernels::binary_op("mul", &mu_g_t, &mu_g_t, |a, b| a * b).expect("same shape");
        kernels::binary_op("sub", &e_g2, &mu2, |a, b| a - b).expect("same shape")
    };

    let kern = g.leaf(kern_t);
    let mu_g_v = g.leaf(mu_g_t.clone());
    let var_g_v = g.leaf(var_g_t);
    let gt = g.leaf(target.clone());

    let mu_s = g.conv2d(s, kern, 1, 1, 1, 0)?;
    let s_sq = g.mul(s, s)?;
    let e_s2 = g.conv2d(s_sq, kern, 1, 1, 1, 0)?;
    let mu_s2 = g.mul(mu_s, mu_s)?;
    let var_s = g.sub(e_s2, mu_s2)?;
    let sg = g.mul(s, gt)?;
    let e_sg = g.conv2d(sg, kern, 1, 1, 1, 0)?;
    let mu_sg = g.mul(mu_s, mu_g_v)?;
    let cov = g.sub(e_sg, mu_sg)?;

    let c1 = E::from_f64(SSIM_C1);
    let c2 = E::from_f64(SSIM_C2);
    let two = E::from_f64(2.0);
    let num = {
        let a = g.mul(mu_s, mu_g_v)?;
        let a = g.mul_scalar(a, two);
        let a = g.add_scalar(a, c1);
        let b = g.mul_scalar(cov, two);
        let b = g.add_scalar(b, c2);
        g.mul(a, b)?
    };
    let den = {
        let mu_g2 = g.mul(mu_g_v, mu_g_v)?;
        let a = g.add(mu_s2, mu_g2)?;
        let a = g.add_scalar(a, c1);
        let b = g.add(var_s, var_g_v)?;
        let b = g.add_scalar(b, c2);
        g.mul(a, b)?
    };
    let ssim = g.div(num, den)?;
    let mean = g.mean_all(ssim);
    let neg = g.mul_scalar(mean, -E::one());
    Ok(g.add_scalar(neg, E::one()))
}

/// Per-side loss terms as graph nodes, plus their sum.
pub struct TotalLossVars {
    pub terms: Vec<[Var; 3]>,
    pub total: Var,
}

/// Deep-supervision objective: `sum_i (bce + iou + ssim)` over all side
/// outputs against the shared ground truth.
pub fn total_loss_graph<E: Element>(
    g: &mut GradGraph<E>,
    sides: &[Var],
    target: &Tensor4<E>,
    settings: &SsimSettings,
) -> Result<TotalLossVars, TensorError> {
    let mut terms = Vec::with_capacity(sides.len());
    let mut total: Option<Var> = None;
    for &s in sides {
        let bce = bce_loss_graph(g, s, target)?;
        let iou = iou_loss_graph(g, s, target)?;
        let ssim = ssim_loss_graph(g, s, target, settings)?;
        terms.push([bce, iou, ssim]);
        for t in [bce, iou, ssim] {
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
    }
    let total = total.ok_or_else(|| TensorError::invalid("total_loss", "no side outputs"))?;
    Ok(TotalLossVars { terms, total })
}

// ---------------------------------------------------------------------------
// value-level API
// ---------------------------------------------------------------------------

/// Loss components of one side output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub bce: f64,
    pub iou: f64,
    pub ssim: f64,
}

impl LossTerms {
    pub fn sum(&self) -> f64 {
        self.bce + self.iou + self.ssim
    }
}

/// Per-side loss triples and their grand total.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub sides: Vec<LossTerms>,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any ("bce[side 2]").
    pub fn non_finite_term(&self) -> Option<String> {
        for (i, t) in self.sides.iter().enumerate() {
            for (name, v) in [("bce", t.bce), ("iou", t.iou), ("ssim", t.ssim)] {
                if !v.is_finite() {
                    return Some(format!("{name}[side {}]", i + 1));
                }
            }
        }
        if self.total.is_finite() {
            None
        } else {
            Some("total".into())
        }
    }
}

fn scalar_of<E: Element, F>(f: F) -> Result<f64>
where
    F: FnOnce(&mut GradGraph<E>) -> Result<Var, TensorError>,
{
    let mut g = GradGraph::inference();
    let v = f(&mut g)?;
    Ok(g.value(v).data()[0].into_f64())
}

pub fn bce_loss<E: Element>(s: &Tensor4<E>, target: &Tensor4<E>) -> Result<f64> {
    scalar_of(|g| {
        let sv = g.leaf(s.clone());
        bce_loss_graph(g, sv, target)
    })
}

pub fn iou_loss<E: Element>(s: &Tensor4<E>, target: &Tensor4<E>) -> Result<f64> {
    scalar_of(|g| {
        let sv = g.leaf(s.clone());
        iou_loss_graph(g, sv, target)
    })
}

pub fn ssim_loss<E: Element>(
    s: &Tensor4<E>,
    target: &Tensor4<E>,
    settings: &SsimSettings,
) -> Result<f64> {
    scalar_of(|g| {
        let sv = g.leaf(s.clone());
        ssim_loss_graph(g, sv, target, settings)
    })
}

/// Value-level breakdown over side outputs (all resized to the ground-truth
/// shape by the caller).
pub fn total_loss<E: Element>(
    sides: &[Tensor4<E>],
    target: &Tensor4<E>,
    settings: &SsimSettings,
) -> Result<LossBreakdown> {
    if sides.is_empty() {
        return Err(Error::Train("total_loss needs at least one side output".into()));
    }
    let mut g = GradGraph::inference();
    let vars: Vec<Var> = sides.iter().map(|t| g.leaf(t.clone())).collect();
    let out = total_loss_graph(&mut g, &vars, target, settings)?;
    Ok(breakdown_from(&g, &out))
}

/// Extract numeric values from the graph nodes of a loss computation.
pub fn breakdown_from<E: Element>(g: &GradGraph<E>, vars: &TotalLossVars) -> LossBreakdown {
    let sides = vars
        .terms
        .iter()
        .map(|[b, i, s]| LossTerms {
            bce: g.value(*b).data()[0].into_f64(),
            iou: g.value(*i).data()[0].into_f64(),
            ssim: g.value(*s).data()[0].into_f64(),
        })
        .collect();
    LossBreakdown {
        sides,
        total: g.value(vars.total).data()[0].into_f64(),
    }
}
