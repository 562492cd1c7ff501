//! Building blocks of the network: depthwise-separable convolutions, the
//! expansion blocks of the backbone stand-in, channel normalization, the
//! transformer block (attention + FFN), the pyramid-pooling swap-in, and the
//! decoder block.

use crate::attention::{CraParams, DsaParams, MsaParams};
use crate::error::{Result, TensorError};
use crate::params::{init, ParamBindings, ParamId, ParamStore};
use crate::tensor::{Element, GradGraph, Shape4, Var};
use rand_chacha::ChaCha8Rng;

use super::summary::SummarySink;

/// Plain 2-D convolution layer with optional bias, same-padding convention.
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_c / groups) * k * k;
        let w = store.add(
            format!("{prefix}.w"),
            init::kaiming(Shape4::new(out_c, in_c / groups, k, k), fan_in, rng),
        )?;
        let b = if bias {
            Some(store.add(
                format!("{prefix}.b"),
                init::zeros(Shape4::new(1, out_c, 1, 1)),
            )?)
        } else {
            None
        };
        Ok(ConvLayer {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            dilation,
            groups,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = g.conv2d_same(x, binds.var(self.w), self.stride, self.dilation, self.groups)?;
        match self.b {
            Some(b) => g.add(y, binds.var(b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> u64 {
        let w = (self.out_c * (self.in_c / self.groups) * self.k * self.k) as u64;
        w + if self.b.is_some() { self.out_c as u64 } else { 0 }
    }

    pub fn macs(&self, in_h: usize, in_w: usize) -> u64 {
        let (oh, ow) = self.out_size(in_h, in_w);
        (oh * ow * self.out_c) as u64 * ((self.in_c / self.groups) * self.k * self.k) as u64
    }

    pub fn out_size(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        (in_h / self.stride, in_w / self.stride)
    }
}

/// Per-channel learnable scale and shift (the batch-norm-free affine of the
/// backbone stand-in).
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl Affine {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Affine {
            gamma: store.add(
                format!("{prefix}.g"),
                init::ones(Shape4::new(1, channels, 1, 1)),
            )?,
            beta: store.add(
                format!("{prefix}.b"),
                init::zeros(Shape4::new(1, channels, 1, 1)),
            )?,
            channels,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let scaled = g.mul(x, binds.var(self.gamma))?;
        g.add(scaled, binds.var(self.beta))
    }

    pub fn params(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Mean-variance normalization across the channel dimension at every spatial
/// position, with learnable per-channel scale and shift. Pre-normalization
/// for the transformer blocks.
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const CHANNEL_NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(ChannelNorm {
            gamma: store.add(
                format!("{prefix}.g"),
                init::ones(Shape4::new(1, channels, 1, 1)),
            )?,
            beta: store.add(
                format!("{prefix}.b"),
                init::zeros(Shape4::new(1, channels, 1, 1)),
            )?,
            channels,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let inv_c = E::from_f64(1.0 / self.channels as f64);
        let sum = g.sum_axis(x, 1)?;
        let mean = g.mul_scalar(sum, inv_c);
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var_sum = g.sum_axis(sq, 1)?;
        let var = g.mul_scalar(var_sum, inv_c);
        let std = {
            let shifted = g.add_scalar(var, E::from_f64(CHANNEL_NORM_EPS));
            g.sqrt(shifted)
        };
        let normed = g.div(centered, std)?;
        let scaled = g.mul(normed, binds.var(self.gamma))?;
        g.add(scaled, binds.var(self.beta))
    }

    pub fn params(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Depthwise separable 3x3 convolution: per-channel spatial conv followed by
/// a pointwise channel-mixing conv, with the affine + ReLU epilogue.
pub struct DsConvBlock {
    pub dw: ConvLayer,
    pub pw: ConvLayer,
    pub affine: Affine,
}

impl DsConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(DsConvBlock {
            dw: ConvLayer::init(
                store,
                &format!("{prefix}.dw"),
                in_c,
                in_c,
                3,
                stride,
                dilation,
                in_c,
                false,
                rng,
            )?,
            pw: ConvLayer::init(
                store,
                &format!("{prefix}.pw"),
                in_c,
                out_c,
                1,
                1,
                1,
                1,
                true,
                rng,
            )?,
            affine: Affine::init(store, &format!("{prefix}.aff"), out_c)?,
        })
    }

    /// dw -> pw -> affine; activation is the caller's choice.
    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = self.dw.forward(g, binds, x)?;
        let y = self.pw.forward(g, binds, y)?;
        self.affine.forward(g, binds, y)
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.dw.out_size(h, w);
        let params = self.dw.params() + self.pw.params() + self.affine.params();
        let macs = self.dw.macs(h, w) + self.pw.macs(oh, ow) + (self.pw.out_c * oh * ow) as u64;
        sink.row(name, self.pw.out_c, oh, ow, params, macs);
        (oh, ow)
    }
}

/// Inverted-residual expansion block: 1x1 expand, depthwise 3x3, 1x1 project,
/// joined by an identity residual. `expansion = 1` skips the expand stage.
pub struct ExpandedBlock {
    pub expand: Option<(ConvLayer, Affine)>,
    pub dw: ConvLayer,
    pub dw_affine: Affine,
    pub project: ConvLayer,
    pub project_affine: Affine,
    pub channels: usize,
    pub expansion: usize,
}

impl ExpandedBlock {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mid = channels * expansion;
        let expand = if expansion > 1 {
            Some((
                ConvLayer::init(
                    store,
                    &format!("{prefix}.expand"),
                    channels,
                    mid,
                    1,
                    1,
                    1,
                    1,
                    true,
                    rng,
                )?,
                Affine::init(store, &format!("{prefix}.expand_aff"), mid)?,
            ))
        } else {
            None
        };
        Ok(ExpandedBlock {
            expand,
            dw: ConvLayer::init(
                store,
                &format!("{prefix}.dw"),
                mid,
                mid,
                3,
                1,
                1,
                mid,
                false,
                rng,
            )?,
            dw_affine: Affine::init(store, &format!("{prefix}.dw_aff"), mid)?,
            project: ConvLayer::init(
                store,
                &format!("{prefix}.project"),
                mid,
                channels,
                1,
                1,
                1,
                1,
                true,
                rng,
            )?,
            project_affine: Affine::init(store, &format!("{prefix}.project_aff"), channels)?,
            channels,
            expansion,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        if let Some((conv, aff)) = &self.expand {
            let y = conv.forward(g, binds, h)?;
            let y = aff.forward(g, binds, y)?;
            h = g.relu(y);
        }
        let y = self.dw.forward(g, binds, h)?;
        let y = self.dw_affine.forward(g, binds, y)?;
        let y = g.relu(y);
        let y = self.project.forward(g, binds, y)?;
        let y = self.project_affine.forward(g, binds, y)?;
        g.add(x, y)
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) {
        let mut params = self.dw.params()
            + self.dw_affine.params()
            + self.project.params()
            + self.project_affine.params();
        let mid = self.channels * self.expansion;
        let mut macs = self.dw.macs(h, w)
            + (mid * h * w) as u64
            + self.project.macs(h, w)
            + (self.channels * h * w) as u64;
        if let Some((conv, aff)) = &self.expand {
            params += conv.params() + aff.params();
            macs += conv.macs(h, w) + (mid * h * w) as u64;
        }
        sink.row(name, self.channels, h, w, params, macs);
    }
}

/// One encoder stage: a strided entry DSConv plus a stack of expansion
/// blocks at the stage width.
pub struct EncoderStage {
    pub entry: DsConvBlock,
    pub blocks: Vec<ExpandedBlock>,
}

impl EncoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        repeats: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let entry = DsConvBlock::init(store, &format!("{prefix}.entry"), in_c, out_c, stride, 1, rng)?;
        let blocks = (0..repeats)
            .map(|j| ExpandedBlock::init(store, &format!("{prefix}.blk{j}"), out_c, expansion, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStage { entry, blocks })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = self.entry.forward(g, binds, x)?;
        let mut y = g.relu(y);
        for block in &self.blocks {
            y = block.forward(g, binds, y)?;
        }
        Ok(y)
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.entry.summarize(&format!("{name}.entry"), sink, h, w);
        for (j, block) in self.blocks.iter().enumerate() {
            block.summarize(&format!("{name}.blk{j}"), sink, oh, ow);
        }
        (oh, ow)
    }
}

/// Attention flavor inside a transformer block.
pub enum AttentionKind {
    Dsa(DsaParams),
    Msa(MsaParams),
}

impl AttentionKind {
    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        match self {
            AttentionKind::Dsa(d) => d.forward(g, binds, x),
            AttentionKind::Msa(m) => m.forward(g, binds, x),
        }
    }

    pub fn params(&self, channels: usize) -> u64 {
        let mats = 4 * (channels * channels) as u64;
        match self {
            AttentionKind::Dsa(_) => mats + 1, // + alpha
            AttentionKind::Msa(_) => mats,
        }
    }

    pub fn macs(&self, n: u64) -> u64 {
        match self {
            AttentionKind::Dsa(d) => d.attention_macs(n),
            AttentionKind::Msa(m) => m.attention_macs(n),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AttentionKind::Dsa(_) => "dsa",
            AttentionKind::Msa(_) => "msa",
        }
    }
}

/// Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)).
pub struct TransformerBlock {
    pub norm1: ChannelNorm,
    pub attn: AttentionKind,
    pub norm2: ChannelNorm,
    pub ffn_in: ConvLayer,
    pub ffn_out: ConvLayer,
    pub channels: usize,
}

impl TransformerBlock {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        ffn_expansion: usize,
        msa_heads: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm1 = ChannelNorm::init(store, &format!("{prefix}.norm1"), channels)?;
        let attn = match msa_heads {
            None => AttentionKind::Dsa(DsaParams::init(
                store,
                &format!("{prefix}.dsa"),
                channels,
                rng,
            )?),
            Some(h) => AttentionKind::Msa(MsaParams::init(
                store,
                &format!("{prefix}.msa"),
                channels,
                h,
                rng,
            )?),
        };
        let norm2 = ChannelNorm::init(store, &format!("{prefix}.norm2"), channels)?;
        let hidden = channels * ffn_expansion;
        let ffn_in = ConvLayer::init(
            store,
            &format!("{prefix}.ffn1"),
            channels,
            hidden,
            1,
            1,
            1,
            1,
            true,
            rng,
        )?;
        let ffn_out = ConvLayer::init(
            store,
            &format!("{prefix}.ffn2"),
            hidden,
            channels,
            1,
            1,
            1,
            1,
            true,
            rng,
        )?;
        Ok(TransformerBlock {
            norm1,
            attn,
            norm2,
            ffn_in,
            ffn_out,
            channels,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let n1 = self.norm1.forward(g, binds, x)?;
        let att = self.attn.forward(g, binds, n1)?;
        let x = g.add(x, att)?;
        let n2 = self.norm2.forward(g, binds, x)?;
        let h = self.ffn_in.forward(g, binds, n2)?;
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, binds, h)?;
        g.add(x, h)
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) {
        let n = (h * w) as u64;
        let c = self.channels;
        sink.row(
            &format!("{name}.{}", self.attn.label()),
            c,
            h,
            w,
            self.attn.params(c),
            self.attn.macs(n),
        );
        let norm_params = self.norm1.params() + self.norm2.params();
        let norm_macs = 2 * (c as u64) * n; // gamma scale per norm
        sink.row(&format!("{name}.norms"), c, h, w, norm_params, norm_macs);
        sink.row(
            &format!("{name}.ffn"),
            c,
            h,
            w,
            self.ffn_in.params() + self.ffn_out.params(),
            self.ffn_in.macs(h, w) + self.ffn_out.macs(h, w),
        );
    }
}

/// Pyramid pooling stand-in used by the `w PPM` ablation: pool to
/// {1, 2, 3, 6}, project, upsample, concatenate with the input, fuse.
pub struct PpmModule {
    pub branches: Vec<(usize, ConvLayer)>,
    pub fuse: ConvLayer,
    pub channels: usize,
}

pub const PPM_POOL_SIZES: [usize; 4] = [1, 2, 3, 6];

impl PpmModule {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let branch_c = channels / 4;
        let branches = PPM_POOL_SIZES
            .iter()
            .map(|&k| {
                Ok((
                    k,
                    ConvLayer::init(
                        store,
                        &format!("{prefix}.pool{k}"),
                        channels,
                        branch_c,
                        1,
                        1,
                        1,
                        1,
                        true,
                        rng,
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvLayer::init(
            store,
            &format!("{prefix}.fuse"),
            channels * 2,
            channels,
            1,
            1,
            1,
            1,
            true,
            rng,
        )?;
        Ok(PpmModule {
            branches,
            fuse,
            channels,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        let s = g.value(x).shape();
        let mut cat = x;
        for (k, conv) in &self.branches {
            let pooled = g.adaptive_avg_pool(x, (*k).min(s.height), (*k).min(s.width));
            let proj = conv.forward(g, binds, pooled)?;
            let act = g.relu(proj);
            let up = g.bilinear_resize(act, s.height, s.width)?;
            cat = g.concat_channels(cat, up)?;
        }
        let fused = self.fuse.forward(g, binds, cat)?;
        Ok(g.relu(fused))
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) {
        let mut params = self.fuse.params();
        let mut macs = self.fuse.macs(h, w);
        for (k, conv) in &self.branches {
            params += conv.params();
            macs += conv.macs((*k).min(h), (*k).min(w));
        }
        sink.row(name, self.channels, h, w, params, macs);
    }
}

/// One decoder block: optional CRA refinement of the skip feature, fusion
/// with the upsampled high-level (and optionally global) features by
/// summation, then a dilated DSConv.
pub struct DecoderBlock {
    pub cra: Option<CraParams>,
    pub high_proj: ConvLayer,
    pub global_proj: Option<ConvLayer>,
    pub fuse: DsConvBlock,
    pub channels: usize,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_l: usize,
        c_h: usize,
        c_g: usize,
        dilation: usize,
        cra_heads: Option<usize>,
        global_inject: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cra = match cra_heads {
            Some(h) => Some(CraParams::init(
                store,
                &format!("{prefix}.cra"),
                c_l,
                c_h,
                c_g,
                h,
                rng,
            )?),
            None => None,
        };
        let high_proj = ConvLayer::init(
            store,
            &format!("{prefix}.high"),
            c_h,
            c_l,
            1,
            1,
            1,
            1,
            true,
            rng,
        )?;
        let global_proj = if global_inject {
            Some(ConvLayer::init(
                store,
                &format!("{prefix}.global"),
                c_g,
                c_l,
                1,
                1,
                1,
                1,
                true,
                rng,
            )?)
        } else {
            None
        };
        let fuse = DsConvBlock::init(store, &format!("{prefix}.fuse"), c_l, c_l, 1, dilation, rng)?;
        Ok(DecoderBlock {
            cra,
            high_proj,
            global_proj,
            fuse,
            channels: c_l,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        f_l: Var,
        f_h: Var,
        f_g: Var,
    ) -> Result<Var, TensorError> {
        let ls = g.value(f_l).shape();
        let refined = match &self.cra {
            Some(cra) => cra.forward(g, binds, f_l, f_h, f_g)?,
            None => f_l,
        };
        let high_up = g.bilinear_resize(f_h, ls.height, ls.width)?;
        let high = self.high_proj.forward(g, binds, high_up)?;
        let mut sum = g.add(refined, high)?;
        if let Some(proj) = &self.global_proj {
            let glob_up = g.bilinear_resize(f_g, ls.height, ls.width)?;
            let glob = proj.forward(g, binds, glob_up)?;
            sum = g.add(sum, glob)?;
        }
        let fused = self.fuse.forward(g, binds, sum)?;
        Ok(g.relu(fused))
    }

    pub fn summarize(&self, name: &str, sink: &mut SummarySink, h: usize, w: usize) {
        if let Some(cra) = &self.cra {
            // Four 1x1 projections, their biases, and tau.
            let params = (cra.c_l * cra.c_l + cra.c_l * cra.c_h + cra.c_l * cra.c_g
                + cra.c_l * cra.c_l) as u64
                + 4 * cra.c_l as u64
                + 1;
            sink.row(
                &format!("{name}.cra"),
                cra.c_l,
                h,
                w,
                params,
                cra.macs((h * w) as u64),
            );
        }
        sink.row(
            &format!("{name}.high"),
            self.channels,
            h,
            w,
            self.high_proj.params(),
            self.high_proj.macs(h, w),
        );
        if let Some(proj) = &self.global_proj {
            sink.row(
                &format!("{name}.global"),
                self.channels,
                h,
                w,
                proj.params(),
                proj.macs(h, w),
            );
        }
        self.fuse.summarize(&format!("{name}.fuse"), sink, h, w);
    }
}

/// 1x1 side-output head producing a single-channel logit map.
pub struct SideHead {
    pub conv: ConvLayer,
}

impl SideHead {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        in_c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(SideHead {
            conv: ConvLayer::init(store, prefix, in_c, 1, 1, 1, 1, 1, true, rng)?,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        x: Var,
    ) -> Result<Var, TensorError> {
        self.conv.forward(g, binds, x)
    }
}
