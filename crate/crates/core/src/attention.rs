//! Channel attention mechanisms.
//!
//! * [`DsaParams`] — depth-wise self-attention: one normalized inner-product
//!   score per channel yields a `1 x C` attention vector instead of an
//!   `N x N` map, so cost stays linear in the spatial size
//!   (see [`dsa_flops`]).
//! * [`CraParams`] — channel reference attention: pooled high-level and
//!   global descriptors attend over the channels of a low-level feature map,
//!   applied with a residual connection.
//! * [`MsaParams`] — standard multi-head self-attention over spatial tokens,
//!   kept as the quadratic-cost baseline.

use crate::error::{Result, TensorError};
use crate::params::{init, ParamBindings, ParamId, ParamStore};
use crate::tensor::{Element, GradGraph, Shape4, Tensor4, Var};
use rand_chacha::ChaCha8Rng;

/// Epsilon inside the l2-normalization square root; keeps all-zero channels
/// (common after ReLU) mapping to zero scores.
pub const L2_EPS: f64 = 1e-12;

/// Multiply-accumulate count of one depth-wise self-attention application:
/// `4*C^2*N` for the four projections plus `2*C*N` for the normalized
/// channel similarities and the value weighting.
pub fn dsa_flops(c: u64, n: u64) -> u64 {
    4 * c * c * n + 2 * c * n
}

/// Multiply-accumulate count of standard self-attention: the same four
/// projections plus two `N x N` contractions.
pub fn msa_flops(c: u64, n: u64) -> u64 {
    4 * c * c * n + 2 * n * n * c
}

fn conv1x1_bias<E: Element>(
    g: &mut GradGraph<E>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let y = g.conv2d(x, w, 1, 1, 1, 0)?;
    g.add(y, b)
}

/// Depth-wise self-attention weights: four `C x C` projections and the
/// learnable score scale `alpha`.
pub struct DsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub alpha: ParamId,
    pub channels: usize,
}

impl DsaParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mat = || Shape4::matrix(channels, channels);
        Ok(DsaParams {
            wq: store.add(format!("{prefix}.wq"), init::kaiming(mat(), channels, rng))?,
            wk: store.add(format!("{prefix}.wk"), init::kaiming(mat(), channels, rng))?,
            wv: store.add(format!("{prefix}.wv"), init::kaiming(mat(), channels, rng))?,
            wo: store.add(format!("{prefix}.wo"), init::kaiming(mat(), channels, rng))?,
            alpha: store.add(format!("{prefix}.alpha"), Tensor4::scalar(E::one()))?,
            channels,
        })
    }

    fn check_channels<E: Element>(
        &self,
        g: &GradGraph<E>,
        x: Var,
    ) -> Result<Shape4, TensorError> {
        let xs = g.value(x).shape();
        if xs.channels != self.channels {
            return Err(TensorError::shape(
                "dsa_forward",
                xs,
                Shape4::matrix(self.channels, self.channels),
            ));
        }
        Ok(xs)
    }

    /// Per-channel context scores `g_i = phi(q_i)^T phi(k_i)` as a
    /// `[B, 1, 1, C]` node, before the alpha scale and softmax. Each score is
    /// a normalized inner product, so it lies in [-1, 1].
    pub fn context_descriptors<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        self.check_channels(g, x)?;
        let tok = g.map_to_tokens(x);
        let q = g.matmul(tok, binds.var(self.wq))?;
        let k = g.matmul(tok, binds.var(self.wk))?;
        let eps = E::from_f64(L2_EPS);
        let qn = g.l2_normalize(q, 2, eps)?;
        let kn = g.l2_normalize(k, 2, eps)?;
        let qk = g.mul(qn, kn)?;
        g.sum_axis(qk, 2)
    }

    /// Attention vector `A = softmax(alpha * [g_1 .. g_C])`, shape
    /// `[B, 1, 1, C]`; entries are non-negative and sum to one.
    pub fn attention_vector<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let scores = self.context_descriptors(g, binds, x)?;
        let scaled = g.mul(scores, binds.var(self.alpha))?;
        g.softmax(scaled, 3)
    }

    /// `[B, C, H, W] -> [B, C, H, W]`.
    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let xs = self.check_channels(g, x)?;
        let tok = g.map_to_tokens(x);
        let v = g.matmul(tok, binds.var(self.wv))?;
        let a = self.attention_vector(g, binds, x)?;
        let z = g.mul(a, v)?;
        let out = g.matmul(z, binds.var(self.wo))?;
        g.tokens_to_map(out, xs.channels, xs.height, xs.width)
    }

    /// MAC census of the attention path (projections + normalized
    /// similarities + value weighting); equal to [`dsa_flops`] by
    /// construction of the mechanism.
    pub fn attention_macs(&self, n: u64) -> u64 {
        let c = self.channels as u64;
        let projections = 4 * (n * c * c);
        let similarities = c * n;
        let weighting = c * n;
        projections + similarities + weighting
    }
}

/// Multi-head self-attention weights (quadratic baseline).
pub struct MsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl MsaParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(crate::error::Error::Config(format!(
                "msa: {heads} heads must divide {channels} channels"
            )));
        }
        let mat = || Shape4::matrix(channels, channels);
        Ok(MsaParams {
            wq: store.add(format!("{prefix}.wq"), init::kaiming(mat(), channels, rng))?,
            wk: store.add(format!("{prefix}.wk"), init::kaiming(mat(), channels, rng))?,
            wv: store.add(format!("{prefix}.wv"), init::kaiming(mat(), channels, rng))?,
            wo: store.add(format!("{prefix}.wo"), init::kaiming(mat(), channels, rng))?,
            heads,
            channels,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let xs = g.value(x).shape();
        if xs.channels != self.channels {
            return Err(TensorError::shape(
                "msa_forward",
                xs,
                Shape4::matrix(self.channels, self.channels),
            ));
        }
        let tok = g.map_to_tokens(x);
        let q = g.matmul(tok, binds.var(self.wq))?;
        let k = g.matmul(tok, binds.var(self.wk))?;
        let v = g.matmul(tok, binds.var(self.wv))?;
        let qh = g.split_heads(q, self.heads)?;
        let kh = g.split_heads(k, self.heads)?;
        let vh = g.split_heads(v, self.heads)?;
        let kt = g.transpose_last(kh);
        let scores = g.matmul(qh, kt)?;
        let dim = (self.channels / self.heads) as f64;
        let scaled = g.mul_scalar(scores, E::from_f64(1.0 / dim.sqrt()));
        let attn = g.softmax(scaled, 3)?;
        let ctx = g.matmul(attn, vh)?;
        let merged = g.merge_heads(ctx);
        let out = g.matmul(merged, binds.var(self.wo))?;
        g.tokens_to_map(out, xs.channels, xs.height, xs.width)
    }

    pub fn attention_macs(&self, n: u64) -> u64 {
        msa_flops(self.channels as u64, n)
    }
}

/// Channel reference attention weights. The three inputs are pooled,
/// projected to the low-level width `c_l`, and compared channel-to-channel;
/// the resulting `C_l x C_l` weights recombine the low-level channels.
pub struct CraParams {
    pub proj_l_w: ParamId,
    pub proj_l_b: ParamId,
    pub proj_h_w: ParamId,
    pub proj_h_b: ParamId,
    pub proj_g_w: ParamId,
    pub proj_g_b: ParamId,
    pub proj_out_w: ParamId,
    pub proj_out_b: ParamId,
    pub tau: ParamId,
    pub heads: usize,
    pub c_l: usize,
    pub c_h: usize,
    pub c_g: usize,
}

impl CraParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_l: usize,
        c_h: usize,
        c_g: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || c_l % heads != 0 {
            return Err(crate::error::Error::Config(format!(
                "cra: {heads} heads must divide the low-level width {c_l}"
            )));
        }
        let conv = |co: usize, ci: usize, rng: &mut ChaCha8Rng| {
            init::kaiming::<E>(Shape4::new(co, ci, 1, 1), ci, rng)
        };
        let bias = |c: usize| init::zeros::<E>(Shape4::new(1, c, 1, 1));
        Ok(CraParams {
            proj_l_w: store.add(format!("{prefix}.proj_l.w"), conv(c_l, c_l, rng))?,
            proj_l_b: store.add(format!("{prefix}.proj_l.b"), bias(c_l))?,
            proj_h_w: store.add(format!("{prefix}.proj_h.w"), conv(c_l, c_h, rng))?,
            proj_h_b: store.add(format!("{prefix}.proj_h.b"), bias(c_l))?,
            proj_g_w: store.add(format!("{prefix}.proj_g.w"), conv(c_l, c_g, rng))?,
            proj_g_b: store.add(format!("{prefix}.proj_g.b"), bias(c_l))?,
            proj_out_w: store.add(format!("{prefix}.proj_out.w"), conv(c_l, c_l, rng))?,
            proj_out_b: store.add(format!("{prefix}.proj_out.b"), bias(c_l))?,
            tau: store.add(format!("{prefix}.tau"), Tensor4::scalar(E::one()))?,
            heads,
            c_l,
            c_h,
            c_g,
        })
    }

    /// Pooled reference descriptor: GAP -> 1x1 conv -> ReLU, as per-head
    /// token rows `[B, heads, 1, C_l/heads]`.
    fn descriptor<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, TensorError> {
        let pooled = g.global_avg_pool(x);
        let proj = conv1x1_bias(g, pooled, binds.var(w), binds.var(b))?;
        let act = g.relu(proj);
        let tok = g.map_to_tokens(act);
        g.split_heads(tok, self.heads)
    }

    /// Block-diagonal channel attention weights `A_c`, row-softmaxed, shape
    /// `[B, heads, C_l/h, C_l/h]`.
    pub fn attention_weights<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        f_l: Var,
        f_h: Var,
        f_g: Var,
    ) -> Result<Var, TensorError> {
        let k_l = self.descriptor(g, binds, f_l, self.proj_l_w, self.proj_l_b)?;
        let q_h = self.descriptor(g, binds, f_h, self.proj_h_w, self.proj_h_b)?;
        let q_g = self.descriptor(g, binds, f_g, self.proj_g_w, self.proj_g_b)?;
        let qht = g.transpose_last(q_h);
        let qgt = g.transpose_last(q_g);
        let a1 = g.matmul(qht, k_l)?;
        let a2 = g.matmul(qgt, k_l)?;
        let sum = g.add(a1, a2)?;
        let scaled = g.div(sum, binds.var(self.tau))?;
        // Row-wise softmax over the key (input-channel) dimension, so each
        // output channel is a convex combination of input channels.
        g.softmax(scaled, 3)
    }

    /// `(f_l, f_h, f_g) -> refined f_l` (same shape as `f_l`). The three
    /// inputs may differ in spatial size and channel count.
    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        f_l: Var,
        f_h: Var,
        f_g: Var,
    ) -> Result<Var, TensorError> {
        let ls = g.value(f_l).shape();
        if ls.channels != self.c_l {
            return Err(TensorError::shape(
                "cra_forward",
                ls,
                Shape4::new(ls.batch, self.c_l, ls.height, ls.width),
            ));
        }
        let a_c = self.attention_weights(g, binds, f_l, f_h, f_g)?;
        let tok = g.map_to_tokens(f_l);
        let split = g.split_heads(tok, self.heads)?;
        let mixed = g.matmul(split, a_c)?;
        let merged = g.merge_heads(mixed);
        let map = g.tokens_to_map(merged, ls.channels, ls.height, ls.width)?;
        let proj = conv1x1_bias(
            g,
            map,
            binds.var(self.proj_out_w),
            binds.var(self.proj_out_b),
        )?;
        g.add(proj, f_l)
    }

    /// MAC census for one application on an `N`-pixel low-level map.
    pub fn macs(&self, n: u64) -> u64 {
        let (c_l, c_h, c_g, h) = (
            self.c_l as u64,
            self.c_h as u64,
            self.c_g as u64,
            self.heads as u64,
        );
        let projections = c_l * c_l + c_l * c_h + c_l * c_g; // on 1x1 pooled maps
        let similarity = 2 * c_l * c_l / h; // A1 and A2, block-diagonal
        let mixing = n * c_l * c_l / h; // F_l * A_c per head
        let out_proj = n * c_l * c_l;
        projections + similarity + mixing + out_proj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn dsa_flops_matches_formula() {
        assert_eq!(dsa_flops(128, 256), 16_842_752);
        assert_eq!(dsa_flops(1, 1), 6);
        // Linear in N: doubling N doubles the count.
        assert_eq!(dsa_flops(128, 512), 2 * dsa_flops(128, 256));
    }

    #[test]
    fn dsa_census_equals_formula() {
        let mut store = ParamStore::<f32>::new();
        let dsa = DsaParams::init(&mut store, "dsa", 32, &mut rng()).unwrap();
        for n in [1u64, 256, 1024] {
            assert_eq!(dsa.attention_macs(n), dsa_flops(32, n));
        }
    }

    #[test]
    fn dsa_rejects_channel_mismatch() {
        let mut store = ParamStore::<f32>::new();
        let dsa = DsaParams::init(&mut store, "dsa", 8, &mut rng()).unwrap();
        let mut g = GradGraph::new();
        let binds = ParamBindings::bind(&mut g, &store);
        let x = g.leaf(Tensor4::zeros(Shape4::new(1, 4, 2, 2)));
        assert!(dsa.forward(&mut g, &binds, x).is_err());
    }

    #[test]
    fn msa_single_token_attention_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let msa = MsaParams::init(&mut store, "msa", 4, 2, &mut rng()).unwrap();
        let mut g = GradGraph::new();
        let binds = ParamBindings::bind(&mut g, &store);
        // N = 1: softmax over a single score is [[1]], so the output is just
        // the projection chain x * Wv * Wo.
        let x = g.leaf(Tensor4::new(Shape4::new(1, 4, 1, 1), vec![0.3, -1.2, 0.8, 2.0]).unwrap());
        let y = msa.forward(&mut g, &binds, x).unwrap();

        let tok = g.map_to_tokens(x);
        let v = g.matmul(tok, binds.var(msa.wv)).unwrap();
        let o = g.matmul(v, binds.var(msa.wo)).unwrap();
        let want = g.tokens_to_map(o, 4, 1, 1).unwrap();
        let got = g.value(y).clone();
        for (a, b) in got.data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn msa_head_divisibility_enforced() {
        let mut store = ParamStore::<f32>::new();
        assert!(MsaParams::init(&mut store, "msa", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn cra_head_divisibility_enforced() {
        let mut store = ParamStore::<f32>::new();
        assert!(CraParams::init(&mut store, "cra", 6, 8, 8, 4, &mut rng()).is_err());
    }

    #[test]
    fn cra_identical_references_double_the_shared_matrix() {
        // With f_h == f_g and shared projection weights, A1 == A2, so
        // A_c == softmax(2 * A1 / tau).
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let cra = CraParams::init(&mut store, "cra", 4, 4, 4, 2, &mut r).unwrap();
        // Tie the two reference projections together.
        let w = store.value(cra.proj_h_w).clone();
        store.set_value(cra.proj_g_w, w).unwrap();

        let mut g = GradGraph::new();
        let binds = ParamBindings::bind(&mut g, &store);
        let f_l = g.leaf(Tensor4::from_fn(Shape4::new(1, 4, 3, 3), |_, c, y, x| {
            (c as f64 + 1.0) * 0.1 + (y * 3 + x) as f64 * 0.01
        }));
        let f_ref = g.leaf(Tensor4::from_fn(Shape4::new(1, 4, 2, 2), |_, c, y, x| {
            0.2 * c as f64 - 0.05 * (y + x) as f64 + 0.3
        }));
        let a_c = cra
            .attention_weights(&mut g, &binds, f_l, f_ref, f_ref)
            .unwrap();

        // Reference: softmax(2 * A1 / tau) built from the same descriptor.
        let k_l = cra
            .descriptor(&mut g, &binds, f_l, cra.proj_l_w, cra.proj_l_b)
            .unwrap();
        let q_h = cra
            .descriptor(&mut g, &binds, f_ref, cra.proj_h_w, cra.proj_h_b)
            .unwrap();
        let qt = g.transpose_last(q_h);
        let a1 = g.matmul(qt, k_l).unwrap();
        let doubled = g.mul_scalar(a1, 2.0);
        let scaled = g.div(doubled, binds.var(cra.tau)).unwrap();
        let want = g.softmax(scaled, 3).unwrap();
        for (a, b) in g.value(a_c).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
