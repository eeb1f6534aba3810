//! Multi-scale encoders behind a uniform four-stage interface, plus the convolution
//! branch decoder and the progressive locality decoder that consume them.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::{Scope, WeightManifest};

pub mod conv_branch;
pub mod pld;
pub mod pvt;
pub mod resnet;

pub use conv_branch::{ConvBranchConfig, ConvBranchDecoder, ConvBranchEncoder};
pub use pld::PldPlus;
pub use pvt::{PvtConfig, PvtEncoder};
pub use resnet::{ResNetConfig, ResNetEncoder};

/// Output strides of the four exposed stages.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Inputs must be divisible by the deepest stride.
pub const REQUIRED_DIVISOR: usize = 32;

/// Four feature maps `[e1, e2, e3, e4]` at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub stages: [Tensor; 4],
}

impl MultiScaleFeatures {
    pub fn widths(&self) -> Result<[usize; 4]> {
        let mut w = [0; 4];
        for (slot, t) in w.iter_mut().zip(&self.stages) {
            *slot = t.dim(1)?;
        }
        Ok(w)
    }
}

/// Encoder output: the four stages and, for encoders that have them, the full-resolution
/// skip set consumed by a U-Net style decoder.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: MultiScaleFeatures,
    pub skips: Vec<Tensor>,
}

pub trait Encoder: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn stage_widths(&self) -> [usize; 4];

    /// `train` only matters for encoders with batch statistics.
    fn encode(&self, image: &Tensor, train: bool) -> Result<EncoderOutput>;
}

/// Fails unless the spatial size is divisible by [`REQUIRED_DIVISOR`].
pub fn check_divisible(image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
    }
    if h == 0 || w == 0 || h % REQUIRED_DIVISOR != 0 || w % REQUIRED_DIVISOR != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            required: REQUIRED_DIVISOR,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoatVariant {
    Mini,
    Small,
    Medium,
}

impl CoatVariant {
    /// Published serial-block widths of the variant.
    pub fn stage_widths(self) -> [usize; 4] {
        match self {
            CoatVariant::Mini | CoatVariant::Small => [64, 128, 320, 512],
            CoatVariant::Medium => [128, 256, 320, 512],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoatVariant::Mini => "coat_lite_mini",
            CoatVariant::Small => "coat_lite_small",
            CoatVariant::Medium => "coat_lite_medium",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    ConvBranch(ConvBranchConfig),
    ResNet(ResNetConfig),
    Pvt(PvtConfig),
    CoatLite(CoatVariant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    /// Optional weight manifest whose record names are relative to the encoder.
    pub pretrained: Option<PathBuf>,
}

impl EncoderSpec {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            pretrained: None,
        }
    }

    pub const NAMES: [&'static str; 9] = [
        "cb_e",
        "cb_e_tiny",
        "resnet50",
        "tiny_conv",
        "pvtv2_b3",
        "tiny_vit",
        "coat_lite_mini",
        "coat_lite_small",
        "coat_lite_medium",
    ];

    /// Resolves a registry name. `pvtv2` is accepted as an alias of `pvtv2_b3` and
    /// dashes are treated as underscores.
    pub fn from_name(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace('-', "_");
        let backbone = match key.as_str() {
            "cb_e" => Backbone::ConvBranch(ConvBranchConfig::standard()),
            "cb_e_tiny" => Backbone::ConvBranch(ConvBranchConfig::tiny()),
            "resnet50" => Backbone::ResNet(ResNetConfig::resnet50()),
            "tiny_conv" => Backbone::ResNet(ResNetConfig::tiny()),
            "pvtv2" | "pvtv2_b3" => Backbone::Pvt(PvtConfig::b3()),
            "tiny_vit" => Backbone::Pvt(PvtConfig::tiny()),
            "coat_lite_mini" => Backbone::CoatLite(CoatVariant::Mini),
            "coat_lite_small" => Backbone::CoatLite(CoatVariant::Small),
            "coat_lite_medium" => Backbone::CoatLite(CoatVariant::Medium),
            _ => return Err(Error::UnknownBackbone(name.to_string())),
        };
        Ok(Self::new(backbone))
    }

    pub fn name(&self) -> &'static str {
        match &self.backbone {
            Backbone::ConvBranch(c) => c.name,
            Backbone::ResNet(c) => c.name,
            Backbone::Pvt(c) => c.name,
            Backbone::CoatLite(v) => v.name(),
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        match &self.backbone {
            Backbone::ConvBranch(c) => c.stage_widths(),
            Backbone::ResNet(c) => c.stage_widths(),
            Backbone::Pvt(c) => c.widths,
            Backbone::CoatLite(v) => v.stage_widths(),
        }
    }
}

pub type BackboneFactory = Arc<dyn Fn(&Scope, &EncoderSpec) -> Result<Arc<dyn Encoder>> + Send + Sync>;

/// Factories for backbones whose definitions live outside this crate, keyed by
/// backbone name.
#[derive(Clone, Default)]
pub struct BackboneRegistry {
    factories: HashMap<String, BackboneFactory>,
}

impl fmt::Debug for BackboneRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&String> = self.factories.keys().collect();
        names.sort();
        f.debug_struct("BackboneRegistry").field("factories", &names).finish()
    }
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, factory: BackboneFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn get(&self, name: &str) -> Option<&BackboneFactory> {
        self.factories.get(name)
    }
}

/// Builds an encoder under `scope`, then loads `spec.pretrained` if present. Loading is
/// strict: every parameter must be present with a matching shape.
pub fn build_backbone(scope: &Scope, spec: &EncoderSpec, registry: &BackboneRegistry) -> Result<Arc<dyn Encoder>> {
    let encoder: Arc<dyn Encoder> = match &spec.backbone {
        Backbone::ConvBranch(c) => Arc::new(ConvBranchEncoder::new(scope, c.clone())?),
        Backbone::ResNet(c) => Arc::new(ResNetEncoder::new(scope, c.clone())?),
        Backbone::Pvt(c) => Arc::new(PvtEncoder::new(scope, c.clone())?),
        Backbone::CoatLite(v) => match registry.get(v.name()) {
            Some(factory) => {
                let enc = factory(scope, spec)?;
                if enc.stage_widths() != v.stage_widths() {
                    return Err(Error::Assembly {
                        name: v.name().to_string(),
                        reason: format!(
                            "external encoder reports widths {:?}, expected {:?}",
                            enc.stage_widths(),
                            v.stage_widths()
                        ),
                    });
                }
                enc
            }
            None => return Err(Error::ExternalBackboneRequired(v.name().to_string())),
        },
    };
    if let Some(path) = &spec.pretrained {
        let manifest = WeightManifest::load(path)?;
        let loaded = scope.store().assign(scope.prefix(), &manifest, true)?;
        log::info!("loaded {loaded} tensors for {} from {}", spec.name(), path.display());
    }
    Ok(encoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn names_resolve_to_widths() {
        assert_eq!(
            EncoderSpec::from_name("pvtv2").unwrap().stage_widths(),
            [64, 128, 320, 512]
        );
        assert_eq!(
            EncoderSpec::from_name("tiny_vit").unwrap().stage_widths(),
            [16, 32, 64, 128]
        );
        assert_eq!(
            EncoderSpec::from_name("resnet50").unwrap().stage_widths(),
            [256, 512, 1024, 2048]
        );
        for n in EncoderSpec::NAMES {
            assert_eq!(EncoderSpec::from_name(n).unwrap().name(), n);
        }
        assert!(matches!(
            EncoderSpec::from_name("vgg16"),
            Err(Error::UnknownBackbone(_))
        ));
    }

    #[test]
    fn coat_needs_external_definition() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let spec = EncoderSpec::from_name("coat-lite-mini").unwrap();
        let err = build_backbone(&store.root(), &spec, &BackboneRegistry::new()).unwrap_err();
        assert!(matches!(err, Error::ExternalBackboneRequired(ref n) if n == "coat_lite_mini"));
        assert!(err.to_string().contains("external definition"));
    }

    #[test]
    fn registry_factory_is_used_and_width_checked() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let mut reg = BackboneRegistry::new();
        reg.register(
            "coat_lite_mini",
            Arc::new(|scope: &Scope, _: &EncoderSpec| -> Result<Arc<dyn Encoder>> {
                Ok(Arc::new(PvtEncoder::new(scope, PvtConfig::b3())?))
            }),
        );
        let spec = EncoderSpec::from_name("coat_lite_mini").unwrap();
        let enc = build_backbone(&store.root(), &spec, &reg).unwrap();
        assert_eq!(enc.stage_widths(), [64, 128, 320, 512]);
        let spec = EncoderSpec::from_name("coat_lite_medium").unwrap();
        reg.register(
            "coat_lite_medium",
            Arc::new(|scope: &Scope, _: &EncoderSpec| -> Result<Arc<dyn Encoder>> {
                Ok(Arc::new(PvtEncoder::new(scope, PvtConfig::tiny())?))
            }),
        );
        let other = ParamStore::new(0, DType::F32, &Device::Cpu);
        assert!(matches!(
            build_backbone(&other.root(), &spec, &reg),
            Err(Error::Assembly { .. })
        ));
    }

    #[test]
    fn divisibility_is_enforced() {
        let x = Tensor::zeros((1, 3, 48, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            check_divisible(&x),
            Err(Error::Indivisible { required: 32, .. })
        ));
        let x = Tensor::zeros((1, 3, 64, 96), DType::F32, &Device::Cpu).unwrap();
        check_divisible(&x).unwrap();
    }

    #[test]
    fn pretrained_manifest_is_loaded_strictly() {
        let dir = tempfile::tempdir().unwrap();
        let src = ParamStore::new(1, DType::F32, &Device::Cpu);
        let spec = EncoderSpec::from_name("tiny_vit").unwrap();
        build_backbone(&src.root().pp("enc"), &spec, &BackboneRegistry::new()).unwrap();
        let path = dir.path().join("tiny_vit.enfw");
        src.to_manifest().unwrap().subset("enc").save(&path).unwrap();

        let dst = ParamStore::new(2, DType::F32, &Device::Cpu);
        let mut spec = spec;
        spec.pretrained = Some(path.clone());
        build_backbone(&dst.root().pp("enc"), &spec, &BackboneRegistry::new()).unwrap();
        let (a, b) = (src.snapshot().unwrap(), dst.snapshot().unwrap());
        for (name, t) in &a {
            let u = &b[name];
            let d = (t - u)
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(d, 0.0, "{name}");
        }

        // a manifest for a different configuration is rejected
        let wrong = ParamStore::new(3, DType::F32, &Device::Cpu);
        let mut spec_b3 = EncoderSpec::from_name("resnet50").unwrap();
        spec_b3.backbone = Backbone::ResNet(ResNetConfig::tiny());
        spec_b3.pretrained = Some(path);
        assert!(build_backbone(&wrong.root().pp("enc"), &spec_b3, &BackboneRegistry::new()).is_err());
    }
}
