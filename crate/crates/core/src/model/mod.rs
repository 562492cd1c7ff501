//! The GCANet model: a five-stage lightweight encoder, a transformer encoder
//! with depth-wise self-attention on the top features, channel-reference-
//! attention-gated decoder blocks with global-feature injection, and five
//! side outputs for deep supervision.

pub mod layers;
pub mod summary;

use crate::error::{Error, Result, TensorError};
use crate::params::{ParamBindings, ParamStore};
use crate::tensor::{Element, GradGraph, Shape4, Tensor4, Var};
use layers::{DecoderBlock, EncoderStage, PpmModule, SideHead, TransformerBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use summary::{ModelSummary, SummarySink};

/// Number of side outputs: four decoder blocks plus the transformer encoder.
pub const SIDE_OUTPUTS: usize = 5;

/// Every architectural knob. Defaults follow the published configuration;
/// the per-stage repeat/expansion schedule describes the backbone stand-in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channel width after each encoder stage.
    pub stage_channels: [usize; 5],
    /// Residual expansion blocks per stage (after the strided entry block).
    pub stage_repeats: [usize; 5],
    /// Expansion factor of the residual blocks per stage.
    pub stage_expansion: [usize; 5],
    pub transformer_depth: usize,
    pub ffn_expansion: usize,
    pub cra_heads: usize,
    pub decoder_dilation: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [16, 32, 64, 96, 128],
            stage_repeats: [1, 1, 3, 3, 5],
            stage_expansion: [1, 1, 2, 4, 6],
            transformer_depth: 2,
            ffn_expansion: 4,
            cra_heads: 4,
            decoder_dilation: 2,
            input_size: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for w in self.stage_channels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "stage_channels must be strictly increasing, got {:?}",
                    self.stage_channels
                )));
            }
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.cra_heads == 0 {
            return Err(Error::Config("cra_heads must be >= 1".into()));
        }
        for &c in &self.stage_channels[..4] {
            if c % self.cra_heads != 0 {
                return Err(Error::Config(format!(
                    "cra_heads {} must divide every decoder width, violated by {c}",
                    self.cra_heads
                )));
            }
        }
        if self.transformer_depth == 0 {
            return Err(Error::Config("transformer_depth must be >= 1".into()));
        }
        if self.ffn_expansion == 0 || self.decoder_dilation == 0 {
            return Err(Error::Config(
                "ffn_expansion and decoder_dilation must be >= 1".into(),
            ));
        }
        if self.stage_expansion.iter().any(|&t| t == 0) {
            return Err(Error::Config("stage_expansion entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ablation variants. They differ in the encoder-top module and in whether
/// the decoder uses CRA refinement and global-feature injection.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    /// Encoder + decoder only: no transformer, no CRA, no global injection.
    Baseline,
    /// Transformer on top with global injection into each decoder block.
    GlobalOnly,
    /// Transformer on top with CRA refinement, no global injection.
    CraOnly,
    /// The published model: transformer + CRA + global injection.
    Full,
    /// Full with the transformer encoder swapped for pyramid pooling.
    WithPpm,
    /// Full with depth-wise self-attention swapped for multi-head
    /// self-attention (8 heads).
    WithMsa8,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::GlobalOnly,
        Variant::CraOnly,
        Variant::Full,
        Variant::WithPpm,
        Variant::WithMsa8,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GlobalOnly => "db",
            Variant::CraOnly => "cra",
            Variant::Full => "full",
            Variant::WithPpm => "ppm",
            Variant::WithMsa8 => "msa8",
        }
    }

    fn uses_cra(&self) -> bool {
        matches!(
            self,
            Variant::CraOnly | Variant::Full | Variant::WithPpm | Variant::WithMsa8
        )
    }

    fn uses_global(&self) -> bool {
        matches!(
            self,
            Variant::GlobalOnly | Variant::Full | Variant::WithPpm | Variant::WithMsa8
        )
    }
}

enum EncoderTop {
    Transformer(Vec<TransformerBlock>),
    Ppm(PpmModule),
    None,
}

/// The assembled network. Parameters live in the [`ParamStore`] returned by
/// [`GcaNet::build`]; the struct itself holds layer descriptors and ids.
pub struct GcaNet {
    pub config: ModelConfig,
    pub variant: Variant,
    stages: Vec<EncoderStage>,
    top: EncoderTop,
    decoders: Vec<DecoderBlock>,
    heads: Vec<SideHead>,
}

pub struct SideOutputs {
    /// Sigmoid saliency maps at input resolution. Index 0 is the final
    /// decoding stage (the network's output); index 4 is the encoder-top
    /// side output.
    pub maps: [Var; SIDE_OUTPUTS],
}

impl GcaNet {
    /// Build the full published variant.
    pub fn build<E: Element>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<E>)> {
        Self::build_variant(config, Variant::Full, seed)
    }

    pub fn build_variant<E: Element>(
        config: &ModelConfig,
        variant: Variant,
        seed: u64,
    ) -> Result<(Self, ParamStore<E>)> {
        config.validate()?;
        if variant == Variant::WithMsa8 && config.stage_channels[4] % 8 != 0 {
            return Err(Error::Config(format!(
                "msa8 variant needs the top width {} divisible by 8",
                config.stage_channels[4]
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strides = [1usize, 2, 2, 2, 2];
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 3;
        for i in 0..5 {
            stages.push(EncoderStage::init(
                &mut store,
                &format!("enc{}", i + 1),
                in_c,
                config.stage_channels[i],
                strides[i],
                config.stage_repeats[i],
                config.stage_expansion[i],
                &mut rng,
            )?);
            in_c = config.stage_channels[i];
        }
        let top_c = config.stage_channels[4];
        let top = match variant {
            Variant::Baseline => EncoderTop::None,
            Variant::WithPpm => {
                EncoderTop::Ppm(PpmModule::init(&mut store, "ppm", top_c, &mut rng)?)
            }
            _ => {
                let msa_heads = if variant == Variant::WithMsa8 {
                    Some(8)
                } else {
                    None
                };
                let blocks = (0..config.transformer_depth)
                    .map(|k| {
                        TransformerBlock::init(
                            &mut store,
                            &format!("trans{k}"),
                            top_c,
                            config.ffn_expansion,
                            msa_heads,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                EncoderTop::Transformer(blocks)
            }
        };
        // Decoder blocks 4 down to 1, built in that order.
        let mut decoders = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let c_l = config.stage_channels[i];
            let c_h = if i == 3 {
                top_c
            } else {
                config.stage_channels[i + 1]
            };
            decoders.push(DecoderBlock::init(
                &mut store,
                &format!("dec{}", i + 1),
                c_l,
                c_h,
                top_c,
                config.decoder_dilation,
                variant.uses_cra().then_some(config.cra_heads),
                variant.uses_global(),
                &mut rng,
            )?);
        }
        decoders.reverse(); // index i now serves decoder block i+1
        let mut heads = Vec::with_capacity(SIDE_OUTPUTS);
        for i in 0..4 {
            heads.push(SideHead::init(
                &mut store,
                &format!("head{}", i + 1),
                config.stage_channels[i],
                &mut rng,
            )?);
        }
        heads.push(SideHead::init(&mut store, "head5", top_c, &mut rng)?);
        Ok((
            GcaNet {
                config: config.clone(),
                variant,
                stages,
                top,
                decoders,
                heads,
            },
            store,
        ))
    }

    /// Encoder + decoder pass on a recorded graph. The five returned maps are
    /// sigmoid outputs upsampled to the input resolution, all in [0, 1].
    pub fn forward_graph<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        image: Var,
    ) -> Result<SideOutputs, TensorError> {
        let shape = g.value(image).shape();
        let s = self.config.input_size;
        if shape.channels != 3 || shape.height != s || shape.width != s {
            return Err(TensorError::shape(
                "forward",
                shape,
                Shape4::new(shape.batch, 3, s, s),
            ));
        }
        let (feats, top) = self.encode(g, binds, image)?;
        let mut logits = [top; SIDE_OUTPUTS];
        logits[4] = self.heads[4].forward(g, binds, top)?;
        let mut high = top;
        for i in (0..4).rev() {
            let d = self.decoders[i].forward(g, binds, feats[i], high, top)?;
            logits[i] = self.heads[i].forward(g, binds, d)?;
            high = d;
        }
        let mut maps = [logits[0]; SIDE_OUTPUTS];
        for (i, &logit) in logits.iter().enumerate() {
            let up = g.bilinear_resize(logit, s, s)?;
            maps[i] = g.sigmoid(up);
        }
        Ok(SideOutputs { maps })
    }

    fn encode<E: Element>(
        &self,
        g: &mut GradGraph<E>,
        binds: &ParamBindings,
        image: Var,
    ) -> Result<(Vec<Var>, Var), TensorError> {
        let mut feats = Vec::with_capacity(5);
        let mut x = image;
        for stage in &self.stages {
            x = stage.forward(g, binds, x)?;
            feats.push(x);
        }
        let top = match &self.top {
            EncoderTop::Transformer(blocks) => {
                let mut t = feats[4];
                for block in blocks {
                    t = block.forward(g, binds, t)?;
                }
                t
            }
            EncoderTop::Ppm(ppm) => ppm.forward(g, binds, feats[4])?,
            EncoderTop::None => feats[4],
        };
        Ok((feats, top))
    }

    /// Encoder stage outputs (for schedule checks and diagnostics).
    pub fn encoder_features<E: Element>(
        &self,
        store: &ParamStore<E>,
        image: &Tensor4<E>,
    ) -> Result<Vec<Tensor4<E>>> {
        let mut g = GradGraph::inference();
        let binds = ParamBindings::bind(&mut g, store);
        let image = g.leaf(image.clone());
        let (feats, _) = self.encode(&mut g, &binds, image)?;
        Ok(feats.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Convenience forward without recording; returns the five maps as plain
    /// tensors.
    pub fn forward<E: Element>(
        &self,
        store: &ParamStore<E>,
        image: &Tensor4<E>,
    ) -> Result<Vec<Tensor4<E>>> {
        let mut g = GradGraph::inference();
        let binds = ParamBindings::bind(&mut g, store);
        let image = g.leaf(image.clone());
        let sides = self.forward_graph(&mut g, &binds, image)?;
        Ok(sides.maps.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Per-layer census of parameters and multiply-accumulates at the given
    /// input size.
    pub fn summarize(&self, input_size: usize) -> ModelSummary {
        let mut sink = SummarySink::default();
        let (mut h, mut w) = (input_size, input_size);
        for (i, stage) in self.stages.iter().enumerate() {
            let (oh, ow) = stage.summarize(&format!("enc{}", i + 1), &mut sink, h, w);
            h = oh;
            w = ow;
        }
        match &self.top {
            EncoderTop::Transformer(blocks) => {
                for (k, block) in blocks.iter().enumerate() {
                    block.summarize(&format!("trans{k}"), &mut sink, h, w);
                }
            }
            EncoderTop::Ppm(ppm) => ppm.summarize("ppm", &mut sink, h, w),
            EncoderTop::None => {}
        }
        let top_c = self.config.stage_channels[4];
        sink.row("head5", 1, h, w, (top_c + 1) as u64, (h * w * top_c) as u64);
        let mut dh = h;
        let mut dw = w;
        for i in (0..4).rev() {
            // Stage 1 keeps full resolution, so decoder 1 runs at input size.
            dh *= 2;
            dw *= 2;
            self.decoders[i].summarize(&format!("dec{}", i + 1), &mut sink, dh, dw);
            let c = self.config.stage_channels[i];
            sink.row(
                &format!("head{}", i + 1),
                1,
                dh,
                dw,
                (c + 1) as u64,
                (dh * dw * c) as u64,
            );
        }
        ModelSummary::new(sink.rows, input_size)
    }

    /// Total learnable scalar count (must agree with the store).
    pub fn count_params<E: Element>(&self, store: &ParamStore<E>) -> u64 {
        store.total_values()
    }

    /// Total multiply-accumulates of one forward pass at `input_size`.
    pub fn count_flops(&self, input_size: usize) -> u64 {
        self.summarize(input_size).total_macs
    }
}

/// Builders for the ablation table variants.
pub fn ablation_variants() -> [Variant; 6] {
    Variant::ALL
}
