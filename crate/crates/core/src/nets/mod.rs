//! Model family: U-Net baseline, the Simple Baseline ladder and VLight.

pub mod blocks;
pub mod layers;
pub mod ops;
pub mod params;
mod resnet;
mod unet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use blocks::{
    depthwise_separable_conv, dwc_weight_count, residual_down_block, residual_up_block, ConvKind,
    Residual, UpBlockLayout, Upsampling,
};
pub use layers::{Field, Layer};
pub use ops::{pixel_shuffle, pixel_unshuffle};
pub use params::{Builder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Unet,
    SimpleBaseline,
    Vlight,
}

fn default_stem_widths() -> [usize; 2] {
    [32, 64]
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub upsampling: Upsampling,
    pub conv_kind: ConvKind,
    /// VLight: common channel width. Simple Baseline: decoder width. U-Net: base width.
    pub width: usize,
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// VLight stem convolution widths.
    #[serde(default = "default_stem_widths")]
    pub stem_widths: [usize; 2],
}

impl ModelSpec {
    pub fn vlight() -> Self {
        ModelSpec {
            family: Family::Vlight,
            upsampling: Upsampling::PixelShuffle,
            conv_kind: ConvKind::DepthwiseSeparable,
            width: 256,
            blocks_per_stage: 1,
            in_channels: 3,
            out_channels: 1,
            stem_widths: default_stem_widths(),
        }
    }

    pub fn unet() -> Self {
        ModelSpec {
            family: Family::Unet,
            upsampling: Upsampling::Deconv,
            conv_kind: ConvKind::Full,
            width: 64,
            blocks_per_stage: 2,
            in_channels: 3,
            out_channels: 1,
            stem_widths: default_stem_widths(),
        }
    }

    pub fn simple_baseline(upsampling: Upsampling, conv_kind: ConvKind) -> Self {
        ModelSpec {
            family: Family::SimpleBaseline,
            upsampling,
            conv_kind,
            width: 256,
            blocks_per_stage: 2,
            in_channels: 3,
            out_channels: 1,
            stem_widths: default_stem_widths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Vlight
            && (self.upsampling != Upsampling::PixelShuffle
                || self.conv_kind != ConvKind::DepthwiseSeparable)
        {
            return Err(Error::Spec(
                "vlight requires pixel_shuffle upsampling and depthwise_separable convolutions"
                    .into(),
            ));
        }
        if self.width == 0
            || self.in_channels == 0
            || self.out_channels == 0
            || self.blocks_per_stage == 0
        {
            return Err(Error::Spec(
                "widths, channel counts and block counts must be positive".into(),
            ));
        }
        if self.family == Family::Vlight && self.stem_widths.contains(&0) {
            return Err(Error::Spec("stem widths must be positive".into()));
        }
        if self.upsampling == Upsampling::PixelShuffle && !self.width.is_multiple_of(4) {
            return Err(Error::Spec(format!(
                "pixel shuffle needs a width divisible by 4, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Total spatial reduction between input and bottleneck.
    pub fn downsample_factor(&self) -> usize {
        16
    }
}

/// Anything that maps an N×3×H×W batch to N×1×H×W vessel logits.
pub trait Segmenter: Sync {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// Input sides must be multiples of this.
    fn downsample_factor(&self) -> usize;
    /// Extent in input pixels that can influence one output pixel.
    fn receptive_field(&self) -> usize;
    fn fingerprint(&self) -> String;
}

/// A realized network: spec, parameters and layer graph.
pub struct Model<T: Float = f32> {
    spec: ModelSpec,
    params: ParamStore<T>,
    net: Box<dyn Layer<T>>,
    receptive_field: usize,
}

/// Builds the network described by `spec` with fan-in scaled random weights.
pub fn build_model<T: Float>(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model<T>> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let net: Box<dyn Layer<T>> = {
        let mut b = Builder::new(&mut params, rng);
        match spec.family {
            Family::Unet => Box::new(unet::UNet::build(
                &mut b,
                spec.in_channels,
                spec.out_channels,
                spec.width,
                spec.conv_kind,
                spec.upsampling,
            )?),
            Family::SimpleBaseline => Box::new(resnet::simple_baseline(&mut b, spec)?),
            Family::Vlight => Box::new(resnet::vlight(&mut b, spec)?),
        }
    };
    let receptive_field = net.field(Field::PIXEL).size.ceil() as usize;
    Ok(Model {
        spec: spec.clone(),
        params,
        net,
        receptive_field,
    })
}

impl<T: Float> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn downsample_factor(&self) -> usize {
        self.spec.downsample_factor()
    }

    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    /// Sum of all trainable weights, biases and normalization affine terms.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = self.downsample_factor();
        if x.channels() != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        if x.height() == 0
            || x.width() == 0
            || !x.height().is_multiple_of(d)
            || !x.width().is_multiple_of(d)
        {
            return Err(Error::Shape(format!(
                "input {}x{} is not a multiple of the downsample factor {d}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass: a pure function of parameters and input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.net.infer(&self.params, x)
    }

    /// Training-mode forward pass (batch statistics, caches activations).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.net.forward(&mut self.params, x)
    }

    /// Back-propagates `grad` (w.r.t. the logits of the last `forward_train`)
    /// into the parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(&mut self.params, grad)
    }

    /// Hash of spec and every stored array.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).unwrap_or_default());
        for e in self.params.entries() {
            h.update(e.name.as_bytes());
            for v in &e.value {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl Segmenter for Model<f32> {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(batch)
    }

    fn downsample_factor(&self) -> usize {
        Model::downsample_factor(self)
    }

    fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    fn fingerprint(&self) -> String {
        Model::fingerprint(self)
    }
}

/// A segmenter over an arbitrary layer graph, for experiments with custom networks.
pub struct CustomNet {
    params: ParamStore<f32>,
    net: Box<dyn Layer<f32>>,
    downsample_factor: usize,
    receptive_field: usize,
}

impl CustomNet {
    pub fn new(
        params: ParamStore<f32>,
        net: Box<dyn Layer<f32>>,
        downsample_factor: usize,
    ) -> Self {
        let receptive_field = net.field(Field::PIXEL).size.ceil() as usize;
        CustomNet {
            params,
            net,
            downsample_factor: downsample_factor.max(1),
            receptive_field,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
}

impl Segmenter for CustomNet {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.downsample_factor;
        if !batch.height().is_multiple_of(d) || !batch.width().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input {}x{} is not a multiple of the downsample factor {d}",
                batch.height(),
                batch.width()
            )));
        }
        self.net.infer(&self.params, batch)
    }

    fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in self.params.entries() {
            h.update(e.name.as_bytes());
            for v in &e.value {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}
