//! Convolution units and the residual down/up blocks the model families are assembled from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::layers::{
    relu, relu_backward, BatchNorm2d, Conv2d, ConvTranspose2d, DepthwiseConv2d, Field, Layer,
    PixelShuffle, Relu, Sequential, UpsampleBilinear,
};
use super::params::{Builder, ParamId, ParamStore};

/// How a 3×3 convolution is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Dense k×k convolution.
    Full,
    /// Per-channel 3×3 followed by a 1×1 cross-channel convolution.
    DepthwiseSeparable,
}

/// Decoder resize operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Transposed convolution: 4×4 stride 2 in the residual families, 2×2 stride 2 in U-Net.
    #[serde(rename = "deconv_4x4")]
    Deconv,
    Bilinear,
    PixelShuffle,
}

/// Parameter-free composition of a depthwise 3×3 and a pointwise 1×1 convolution.
pub fn depthwise_separable_conv<T: Float>(
    x: &Tensor<T>,
    depthwise: &[T],
    pointwise: &[T],
    out_channels: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let mid = super::ops::depthwise_conv2d(x, depthwise, 3, stride, 1)?;
    super::ops::conv2d(&mid, pointwise, None, out_channels, 1, 1, 0)
}

/// Number of weights of one depthwise-separable layer (excluding normalization).
pub fn dwc_weight_count(in_channels: usize, out_channels: usize) -> usize {
    9 * in_channels + in_channels * out_channels
}

/// One normalized convolution without the trailing nonlinearity.
///
/// `Full`: conv k×k → BN. `DepthwiseSeparable`: depthwise 3×3 → BN → ReLU → pointwise 1×1 → BN.
pub fn conv_unit<T: Float>(
    b: &mut Builder<'_, T>,
    name: &str,
    kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Sequential<T> {
    b.scoped(name, |b| match kind {
        ConvKind::Full => Sequential::new()
            .with(Conv2d::build(
                b,
                "conv",
                in_channels,
                out_channels,
                kernel,
                stride,
                false,
            ))
            .with(BatchNorm2d::build(b, "bn", out_channels)),
        ConvKind::DepthwiseSeparable => Sequential::new()
            .with(DepthwiseConv2d::build(b, "dw", in_channels, 3, stride))
            .with(BatchNorm2d::build(b, "dw_bn", in_channels))
            .with(Relu::new())
            .with(Conv2d::build(
                b,
                "pw",
                in_channels,
                out_channels,
                1,
                1,
                false,
            ))
            .with(BatchNorm2d::build(b, "pw_bn", out_channels)),
    })
}

/// `relu(main(x) + skip(x))`, with an identity skip when `skip` is `None`.
pub struct Residual<T> {
    main: Sequential<T>,
    skip: Option<Sequential<T>>,
    /// Normalization closing the main branch; zeroing its affine terms disables the branch.
    main_tail: Option<(ParamId, ParamId)>,
    output: Option<Tensor<T>>,
}

impl<T: Float> Residual<T> {
    fn combine(&self, main: Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let mut sum = main;
        sum.add_assign(skip).map_err(|_| {
            Error::Shape(format!(
                "residual branches disagree: {:?} vs {:?}",
                sum.shape(),
                skip.shape()
            ))
        })?;
        Ok(relu(&sum))
    }

    /// Sets the closing normalization of the main branch to zero scale and shift,
    /// so the block reduces to `relu(skip(x))`.
    pub fn zero_main_branch(&self, p: &mut ParamStore<T>) {
        if let Some((g, b)) = self.main_tail {
            p.value_mut(g).iter_mut().for_each(|v| *v = T::zero());
            p.value_mut(b).iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Float> Layer<T> for Residual<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let main = self.main.infer(p, x)?;
        match &self.skip {
            Some(s) => self.combine(main, &s.infer(p, x)?),
            None => self.combine(main, x),
        }
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let main = self.main.forward(p, x)?;
        let out = match &mut self.skip {
            Some(s) => {
                let sk = s.forward(p, x)?;
                self.combine(main, &sk)?
            }
            None => self.combine(main, x)?,
        };
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self
            .output
            .take()
            .ok_or_else(|| Error::Shape("residual backward without forward".into()))?;
        let g = relu_backward(&out, grad);
        let mut dx = self.main.backward(p, &g)?;
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(p, &g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn field(&self, input: Field) -> Field {
        let main = self.main.field(input);
        match &self.skip {
            Some(s) => main.union(s.field(input)),
            None => main,
        }
    }
}

fn tail_of<T: Float>(b: &Builder<'_, T>, before: usize) -> Option<(ParamId, ParamId)> {
    // A closing BN registers scale, shift and two running buffers, in that order.
    let n = b.store.entries().len();
    (n >= before + 4).then(|| (ParamId(n - 4), ParamId(n - 3)))
}

/// Residual downsampling block: two convolutions (dense or depthwise-separable)
/// with an additive skip, projected by a strided 1×1 convolution when the stride
/// is 2 or the channel count changes.
pub fn residual_down_block<T: Float>(
    b: &mut Builder<'_, T>,
    name: &str,
    kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> Result<Residual<T>> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::Spec(format!(
            "residual block stride must be 1 or 2, got {stride}"
        )));
    }
    b.push(name);
    let start = b.store.entries().len();
    let main = Sequential::new()
        .with(conv_unit(
            b,
            "conv1",
            kind,
            in_channels,
            out_channels,
            3,
            stride,
        ))
        .with(Relu::new())
        .with(conv_unit(
            b,
            "conv2",
            kind,
            out_channels,
            out_channels,
            3,
            1,
        ));
    let main_tail = tail_of(b, start);
    let skip = (stride != 1 || in_channels != out_channels).then(|| {
        Sequential::new()
            .with(
                Conv2d::build(b, "proj", in_channels, out_channels, 1, stride, false)
                    .with_padding(0),
            )
            .with(BatchNorm2d::build(b, "proj_bn", out_channels))
    });
    b.pop();
    Ok(Residual {
        main,
        skip,
        main_tail,
        output: None,
    })
}

/// Layout of a residual upsampling block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpBlockLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsampling: Upsampling,
    /// Convolution applied right after the resize.
    pub resize_conv: ConvKind,
    /// Optional second convolution at the upsampled resolution.
    pub refine_conv: Option<ConvKind>,
}

/// Residual upsampling block doubling H and W.
///
/// Main path: resize (pixel shuffle r=2 / bilinear / 4×4 deconvolution) with its
/// convolution, optionally followed by a refining convolution. Skip path: the same
/// resize applied to the block input, projected by 1×1 when channels differ
/// (a 4×4 deconvolution for the deconvolution variant).
pub fn residual_up_block<T: Float>(
    b: &mut Builder<'_, T>,
    name: &str,
    layout: UpBlockLayout,
) -> Result<Residual<T>> {
    let UpBlockLayout {
        in_channels: cin,
        out_channels: cout,
        upsampling,
        resize_conv,
        refine_conv,
    } = layout;
    if upsampling == Upsampling::PixelShuffle && cin % 4 != 0 {
        return Err(Error::Shape(format!(
            "pixel-shuffle up block needs input channels divisible by 4, got {cin}"
        )));
    }
    b.push(name);
    let start = b.store.entries().len();
    let mut main = Sequential::new();
    match upsampling {
        Upsampling::PixelShuffle => {
            main.push(PixelShuffle::new(2));
            main.push(conv_unit(b, "up", resize_conv, cin / 4, cout, 3, 1));
        }
        Upsampling::Bilinear => {
            main.push(UpsampleBilinear::new(2));
            main.push(conv_unit(b, "up", resize_conv, cin, cout, 3, 1));
        }
        Upsampling::Deconv => {
            main.push(ConvTranspose2d::build(b, "up", cin, cout, 4, 2, 1));
            main.push(BatchNorm2d::build(b, "up_bn", cout));
        }
    }
    if let Some(kind) = refine_conv {
        main.push(Relu::new());
        main.push(conv_unit(b, "refine", kind, cout, cout, 3, 1));
    }
    let main_tail = tail_of(b, start);
    let skip = match upsampling {
        Upsampling::PixelShuffle => {
            let mut s = Sequential::new().with(PixelShuffle::new(2));
            if cin / 4 != cout {
                s.push(Conv2d::build(b, "proj", cin / 4, cout, 1, 1, false));
                s.push(BatchNorm2d::build(b, "proj_bn", cout));
            }
            s
        }
        Upsampling::Bilinear => {
            let mut s = Sequential::new().with(UpsampleBilinear::new(2));
            if cin != cout {
                s.push(Conv2d::build(b, "proj", cin, cout, 1, 1, false));
                s.push(BatchNorm2d::build(b, "proj_bn", cout));
            }
            s
        }
        Upsampling::Deconv => Sequential::new()
            .with(ConvTranspose2d::build(b, "proj", cin, cout, 4, 2, 1))
            .with(BatchNorm2d::build(b, "proj_bn", cout)),
    };
    b.pop();
    Ok(Residual {
        main,
        skip: Some(skip),
        main_tail,
        output: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dwc_weight_count_matches_formula() {
        assert_eq!(dwc_weight_count(256, 256), 2_304 + 65_536);
    }

    #[test]
    fn identity_kernels_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 3;
        let x = Tensor::<f64>::from_fn([1, c, 5, 6], |_| rng.random_range(-1.0..1.0));
        let mut dw = vec![0.0; c * 9];
        for ch in 0..c {
            dw[ch * 9 + 4] = 1.0;
        }
        let mut pw = vec![0.0; c * c];
        for ch in 0..c {
            pw[ch * c + ch] = 1.0;
        }
        let y = depthwise_separable_conv(&x, &dw, &pw, c, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_branch_down_block_is_rectified_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = {
            let mut b = Builder::new(&mut store, &mut rng);
            residual_down_block(&mut b, "blk", ConvKind::DepthwiseSeparable, 4, 4, 1).unwrap()
        };
        block.zero_main_branch(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn([2, 4, 6, 6], |_| rng.random_range(-1.0..1.0));
        let y = block.infer(&store, &x).unwrap();
        assert_eq!(y, relu(&x));
    }

    #[test]
    fn down_block_halves_and_up_block_doubles() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = Builder::new(&mut store, &mut rng);
        let down = residual_down_block(&mut b, "d", ConvKind::Full, 4, 8, 2).unwrap();
        let up = residual_up_block(
            &mut b,
            "u",
            UpBlockLayout {
                in_channels: 8,
                out_channels: 8,
                upsampling: Upsampling::PixelShuffle,
                resize_conv: ConvKind::DepthwiseSeparable,
                refine_conv: None,
            },
        )
        .unwrap();
        let x = Tensor::<f32>::zeros([1, 4, 64, 64]);
        let y = down.infer(&store, &x).unwrap();
        assert_eq!(y.shape(), [1, 8, 32, 32]);
        let z = up.infer(&store, &y).unwrap();
        assert_eq!(z.shape(), [1, 8, 64, 64]);
    }

    #[test]
    fn up_block_rejects_channels_not_divisible_by_four() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = Builder::new(&mut store, &mut rng);
        let r = residual_up_block(
            &mut b,
            "u",
            UpBlockLayout {
                in_channels: 6,
                out_channels: 8,
                upsampling: Upsampling::PixelShuffle,
                resize_conv: ConvKind::DepthwiseSeparable,
                refine_conv: None,
            },
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
