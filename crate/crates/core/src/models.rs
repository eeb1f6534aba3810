//! Model assemblies: two encoders, optional branch decoders, an optional fuse decoder
//! and the prediction head, composed as `P = S(d1, d2, F([e]))` with absent parts
//! dropped.

use std::fmt;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;

use crate::blocks::{stride_size, upsample, FuseDecoder, PredictionHead};
use crate::encoders::{
    build_backbone, Backbone, BackboneRegistry, ConvBranchDecoder, Encoder, EncoderOutput, EncoderSpec,
    MultiScaleFeatures, PldPlus,
};
use crate::error::{Error, Result};
use crate::nn::concat;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Encoder1,
    Encoder2,
    Decoder1,
    Decoder2,
    Fusion,
    Head,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Encoder1,
        Component::Encoder2,
        Component::Decoder1,
        Component::Decoder2,
        Component::Fusion,
        Component::Head,
    ];

    /// Parameter-store prefix of the component.
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder1 => "enc1",
            Component::Encoder2 => "enc2",
            Component::Decoder1 => "dec1",
            Component::Decoder2 => "dec2",
            Component::Fusion => "fuse",
            Component::Head => "head",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Component::Encoder1 => "E1",
            Component::Encoder2 => "E2",
            Component::Decoder1 => "D1",
            Component::Decoder2 => "D2",
            Component::Fusion => "F",
            Component::Head => "S",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// `CB_D`, requires an encoder with a skip set.
    ConvBranch,
    /// `PLD+`.
    ProgressiveLocality,
}

impl DecoderKind {
    pub fn label(self) -> &'static str {
        match self {
            DecoderKind::ConvBranch => "CB_D",
            DecoderKind::ProgressiveLocality => "PLD+",
        }
    }
}

/// Channel widths of the decoder-side blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub local_emphasis: usize,
    pub fuse_stage: usize,
    pub fuse_out: usize,
    pub head: usize,
}

impl Widths {
    pub fn standard() -> Self {
        Self {
            local_emphasis: 64,
            fuse_stage: 64,
            fuse_out: 64,
            head: 64,
        }
    }

    pub fn tiny() -> Self {
        Self {
            local_emphasis: 16,
            fuse_stage: 16,
            fuse_out: 16,
            head: 16,
        }
    }
}

/// One model row: `(E1, E2, D1, D2, F, S)` with optional decoders and fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssembly {
    pub name: String,
    pub encoder_1: EncoderSpec,
    pub encoder_2: EncoderSpec,
    pub decoder_1: Option<DecoderKind>,
    pub decoder_2: Option<DecoderKind>,
    pub fusion: bool,
    pub widths: Widths,
}

pub const FULL_MODELS: [&str; 6] = [
    "fcbformer",
    "enformer",
    "enformer-lite-mini",
    "enformer-lite-small",
    "enformer-lite-medium",
    "enformer-lite-large",
];

/// Every registered model name: the full rows followed by their `-tiny` variants.
pub fn model_names() -> Vec<String> {
    FULL_MODELS
        .iter()
        .map(|n| n.to_string())
        .chain(FULL_MODELS.iter().map(|n| format!("{n}-tiny")))
        .collect()
}

/// Resolves a registry name into its assembly. Tiny variants keep the composition
/// and swap backbones for small ones: `cb_e_tiny` for `CB_E`, `tiny_conv` for
/// ResNet50 and `tiny_vit` for every transformer.
pub fn assemble(name: &str) -> Result<ModelAssembly> {
    let (base, tiny) = match name.strip_suffix("-tiny") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let unknown = || Error::UnknownModel {
        name: name.to_string(),
        valid: model_names(),
    };
    let (e1, e2, d1, d2, fusion) = match base {
        "fcbformer" => ("cb_e", "pvtv2_b3", true, true, false),
        "enformer" => ("cb_e", "pvtv2_b3", true, true, true),
        "enformer-lite-mini" => ("cb_e", "coat_lite_mini", false, false, true),
        "enformer-lite-small" => ("cb_e", "coat_lite_small", false, false, true),
        "enformer-lite-medium" => ("cb_e", "coat_lite_medium", false, false, true),
        "enformer-lite-large" => ("resnet50", "coat_lite_medium", false, false, true),
        _ => return Err(unknown()),
    };
    let (e1, e2) = if tiny {
        let e1 = if e1 == "cb_e" { "cb_e_tiny" } else { "tiny_conv" };
        (e1, "tiny_vit")
    } else {
        (e1, e2)
    };
    let assembly = ModelAssembly {
        name: name.to_string(),
        encoder_1: EncoderSpec::from_name(e1)?,
        encoder_2: EncoderSpec::from_name(e2)?,
        decoder_1: d1.then_some(DecoderKind::ConvBranch),
        decoder_2: d2.then_some(DecoderKind::ProgressiveLocality),
        fusion,
        widths: if tiny { Widths::tiny() } else { Widths::standard() },
    };
    assembly.validate()?;
    Ok(assembly)
}

/// Display label of an encoder as it appears in a model row.
pub fn encoder_label(spec: &EncoderSpec) -> &'static str {
    match spec.name() {
        "cb_e" => "CB_E",
        "cb_e_tiny" => "CB_E (tiny)",
        "resnet50" => "ResNet50",
        "pvtv2_b3" => "PVTv2-B3",
        "coat_lite_mini" => "CoaT-Lite Mini",
        "coat_lite_small" => "CoaT-Lite Small",
        "coat_lite_medium" => "CoaT-Lite Medium",
        other => other,
    }
}

impl ModelAssembly {
    pub fn is_lite(&self) -> bool {
        self.fusion && self.decoder_1.is_none() && self.decoder_2.is_none()
    }

    /// `[E1, E2, D1, D2, F, S]` labels, `None` for absent components.
    pub fn row(&self) -> [Option<&'static str>; 6] {
        [
            Some(encoder_label(&self.encoder_1)),
            Some(encoder_label(&self.encoder_2)),
            self.decoder_1.map(DecoderKind::label),
            self.decoder_2.map(DecoderKind::label),
            self.fusion.then_some("FD"),
            Some("PH"),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::Assembly {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.decoder_1.is_none() && self.decoder_2.is_none() && !self.fusion {
            return fail("at least one decoder or the fuse decoder must be present");
        }
        if self.decoder_1 == Some(DecoderKind::ConvBranch)
            && !matches!(self.encoder_1.backbone, Backbone::ConvBranch(_))
        {
            return fail("the convolution-branch decoder needs the convolution-branch encoder");
        }
        if self.decoder_2 == Some(DecoderKind::ConvBranch)
            && !matches!(self.encoder_2.backbone, Backbone::ConvBranch(_))
        {
            return fail("the convolution-branch decoder needs the convolution-branch encoder");
        }
        let w = self.widths;
        if [w.local_emphasis, w.fuse_stage, w.fuse_out, w.head].contains(&0) {
            return fail("block widths must be positive");
        }
        Ok(())
    }
}

impl fmt::Display for ModelAssembly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<&str> = self.row().iter().map(|c| c.unwrap_or("-")).collect();
        write!(f, "{}: ({})", self.name, cells.join(", "))
    }
}

/// Layer ids whose activations can be tapped, in panel order.
pub const TAP_IDS: [&str; 7] = ["e1_1", "e2_1", "f1", "d1", "d2", "fuse", "head"];

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Replace this tapped activation by a fresh leaf variable so gradients with
    /// respect to it can be read back.
    pub leaf: Option<String>,
    /// Zero these tapped activations before they are consumed.
    pub ablate: Vec<String>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(batch, 1, H, W)` probabilities.
    pub prob: Tensor,
    pub taps: IndexMap<&'static str, Tensor>,
    pub leaf: Option<Var>,
}

struct TapRecorder<'a> {
    opts: &'a ForwardOptions,
    taps: IndexMap<&'static str, Tensor>,
    leaf: Option<Var>,
}

impl TapRecorder<'_> {
    fn tap(&mut self, id: &'static str, t: Tensor) -> Result<Tensor> {
        let t = if self.opts.ablate.iter().any(|a| a == id) {
            t.zeros_like()?
        } else {
            t
        };
        let t = if self.opts.leaf.as_deref() == Some(id) {
            let v = Var::from_tensor(&t.detach())?;
            let out = v.as_tensor().clone();
            self.leaf = Some(v);
            out
        } else {
            t
        };
        self.taps.insert(id, t.clone());
        Ok(t)
    }
}

/// A built, runnable model.
pub struct Segmenter {
    assembly: ModelAssembly,
    store: Arc<ParamStore>,
    encoder_1: Arc<dyn Encoder>,
    encoder_2: Arc<dyn Encoder>,
    decoder_1: Option<Decoder>,
    decoder_2: Option<Decoder>,
    fusion: Option<FuseDecoder>,
    head: PredictionHead,
}

impl fmt::Debug for Segmenter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Segmenter")
            .field("assembly", &self.assembly)
            .field("parameters", &self.store.count_trainable(""))
            .finish()
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Decoder {
    ConvBranch(ConvBranchDecoder),
    Pld(PldPlus),
}

impl Decoder {
    fn width(&self) -> usize {
        match self {
            Decoder::ConvBranch(d) => d.out_width(),
            Decoder::Pld(d) => d.width(),
        }
    }
}

impl Segmenter {
    /// Builds every component with parameters drawn from a store seeded by `seed`.
    pub fn build(
        assembly: &ModelAssembly,
        seed: u64,
        dtype: DType,
        device: &Device,
        registry: &BackboneRegistry,
    ) -> Result<Self> {
        assembly.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let encoder_1 = build_backbone(&root.pp("enc1"), &assembly.encoder_1, registry)?;
        let encoder_2 = build_backbone(&root.pp("enc2"), &assembly.encoder_2, registry)?;
        let build_decoder = |kind: Option<DecoderKind>, spec: &EncoderSpec, prefix: &str| {
            kind.map(|k| -> Result<Decoder> {
                let scope = root.pp(prefix);
                Ok(match (k, &spec.backbone) {
                    (DecoderKind::ConvBranch, Backbone::ConvBranch(cfg)) => {
                        Decoder::ConvBranch(ConvBranchDecoder::new(&scope, cfg)?)
                    }
                    (DecoderKind::ConvBranch, _) => {
                        return Err(Error::Assembly {
                            name: assembly.name.clone(),
                            reason: "convolution-branch decoder without its encoder".into(),
                        })
                    }
                    (DecoderKind::ProgressiveLocality, _) => Decoder::Pld(PldPlus::new(
                        &scope,
                        spec.stage_widths(),
                        assembly.widths.local_emphasis,
                    )?),
                })
            })
            .transpose()
        };
        let decoder_1 = build_decoder(assembly.decoder_1, &assembly.encoder_1, "dec1")?;
        let decoder_2 = build_decoder(assembly.decoder_2, &assembly.encoder_2, "dec2")?;
        let w = assembly.widths;
        let fusion = if assembly.fusion {
            Some(FuseDecoder::new(
                &root.pp("fuse"),
                encoder_1.stage_widths(),
                encoder_2.stage_widths(),
                w.fuse_stage,
                w.fuse_out,
            )?)
        } else {
            None
        };
        let head_in = decoder_1.as_ref().map_or(0, Decoder::width)
            + decoder_2.as_ref().map_or(0, Decoder::width)
            + if assembly.fusion { w.fuse_out } else { 0 };
        let head = PredictionHead::new(&root.pp("head"), head_in, w.head)?;
        Ok(Self {
            assembly: assembly.clone(),
            store,
            encoder_1,
            encoder_2,
            decoder_1,
            decoder_2,
            fusion,
            head,
        })
    }

    /// Builds a registered model on the CPU in `f32`.
    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        Self::build(
            &assemble(name)?,
            seed,
            DType::F32,
            &Device::Cpu,
            &BackboneRegistry::new(),
        )
    }

    pub fn assembly(&self) -> &ModelAssembly {
        &self.assembly
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    /// Tap ids this model records, in [`TAP_IDS`] order.
    pub fn tap_ids(&self) -> Vec<&'static str> {
        TAP_IDS
            .into_iter()
            .filter(|id| match *id {
                "f1" | "fuse" => self.fusion.is_some(),
                "d1" => self.decoder_1.is_some(),
                "d2" => self.decoder_2.is_some(),
                _ => true,
            })
            .collect()
    }

    /// Probabilities for a `(batch, 3, H, W)` image batch.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        let opts = ForwardOptions {
            train,
            ..ForwardOptions::default()
        };
        Ok(self.forward_with(image, &opts)?.prob)
    }

    pub fn forward_with(&self, image: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let available = self.tap_ids();
        for id in opts.leaf.iter().chain(&opts.ablate) {
            if !available.contains(&id.as_str()) {
                return Err(Error::UnknownLayer {
                    id: id.clone(),
                    valid: available.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        let (_, _, h, w) = image.dims4()?;
        let full = (h, w);
        let quarter = stride_size(full, 4);
        let mut rec = TapRecorder {
            opts,
            taps: IndexMap::new(),
            leaf: None,
        };
        let out1 = self.encoder_1.encode(image, opts.train)?;
        let out2 = self.encoder_2.encode(image, opts.train)?;
        let mut f1 = out1.features.clone();
        let mut f2 = out2.features.clone();
        f1.stages[0] = rec.tap("e1_1", f1.stages[0].clone())?;
        f2.stages[0] = rec.tap("e2_1", f2.stages[0].clone())?;

        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        let decode = |d: &Decoder, out: &EncoderOutput, f: &MultiScaleFeatures| -> Result<Tensor> {
            match d {
                Decoder::ConvBranch(cb) => cb.forward(&out.skips),
                Decoder::Pld(p) => p.forward(f, quarter),
            }
        };
        if let Some(d) = &self.decoder_1 {
            let d1 = rec.tap("d1", decode(d, &out1, &f1)?)?;
            parts.push(d1);
        }
        if let Some(d) = &self.decoder_2 {
            let d2 = rec.tap("d2", decode(d, &out2, &f2)?)?;
            parts.push(d2);
        }
        if let Some(fd) = &self.fusion {
            let pairs: Vec<(&Tensor, &Tensor)> = f1.stages.iter().zip(&f2.stages).collect();
            let mut maps = fd.stage_maps(&pairs, quarter, opts.train)?;
            maps[0] = rec.tap("f1", maps[0].clone())?;
            let fused = rec.tap("fuse", fd.merge_maps(&maps, quarter, opts.train)?)?;
            parts.push(fused);
        }
        // a single input goes to the head at its own resolution; several are brought
        // to full resolution first so they can be concatenated
        let head_in = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            let resized = parts.iter().map(|p| upsample(p, full)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = resized.iter().collect();
            concat(&refs)?
        };
        let features = rec.tap("head", self.head.features(&head_in, full)?)?;
        let prob = crate::blocks::probability(&self.head.logits(&features)?)?;
        Ok(ForwardOutput {
            prob,
            taps: rec.taps,
            leaf: rec.leaf,
        })
    }

    /// Trainable parameter counts per component.
    pub fn parameter_report(&self) -> ParameterReport {
        let rows = Component::ALL
            .iter()
            .map(|&c| (c, self.store.count_trainable(c.prefix())))
            .collect();
        ParameterReport {
            rows,
            total: self.store.count_trainable(""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterReport {
    pub rows: Vec<(Component, usize)>,
    /// Count over the whole store, independent of the per-component rows.
    pub total: usize,
}

impl ParameterReport {
    pub fn get(&self, c: Component) -> usize {
        self.rows.iter().find(|(k, _)| *k == c).map_or(0, |(_, n)| *n)
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, n) in &self.rows {
            writeln!(f, "{:<6} {:<5} {n}", c.prefix(), c.symbol())?;
        }
        write!(f, "total        {}", self.total)
    }
}
