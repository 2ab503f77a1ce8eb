//! ResNet-style encoder-decoder families: the Simple Baseline ladder and VLight.

use crate::error::Result;
use crate::tensor::Float;

use super::blocks::{residual_down_block, residual_up_block, ConvKind, UpBlockLayout, Upsampling};
use super::layers::{BatchNorm2d, Conv2d, MaxPool2d, Relu, Sequential};
use super::params::Builder;
use super::ModelSpec;

/// ResNet-18 layers 1–3 (widths 64/128/256) behind the 7×7 stem, mirrored by a
/// decoder of constant width in which every stride-2 operation of the encoder
/// becomes a 2× residual upsampling block.
///
/// Decoder resize convolutions stay dense; `conv_kind` selects how the
/// residual 3×3 layers are realized.
pub fn simple_baseline<T: Float>(
    b: &mut Builder<'_, T>,
    spec: &ModelSpec,
) -> Result<Sequential<T>> {
    let kind = spec.conv_kind;
    let blocks = spec.blocks_per_stage.max(1);
    let width = spec.width;
    let mut net = Sequential::new();
    net.push(Conv2d::build(
        b,
        "stem.conv",
        spec.in_channels,
        64,
        7,
        2,
        false,
    ));
    net.push(BatchNorm2d::build(b, "stem.bn", 64));
    net.push(Relu::new());
    net.push(MaxPool2d::new(3, 2, 1));

    let mut cin = 64;
    for (stage, (&cout, &stride)) in [64usize, 128, 256].iter().zip(&[1usize, 2, 2]).enumerate() {
        for i in 0..blocks {
            let s = if i == 0 { stride } else { 1 };
            net.push(residual_down_block(
                b,
                &format!("enc{}.{}", stage + 1, i),
                kind,
                cin,
                cout,
                s,
            )?);
            cin = cout;
        }
    }

    let up = |cin: usize| UpBlockLayout {
        in_channels: cin,
        out_channels: width,
        upsampling: spec.upsampling,
        resize_conv: ConvKind::Full,
        refine_conv: Some(kind),
    };
    // Mirror of enc3 and enc2: plain blocks, then the upsampling block in place of the strided one.
    for stage in [3usize, 2] {
        for i in 0..blocks - 1 {
            net.push(residual_down_block(
                b,
                &format!("dec{stage}.{i}"),
                kind,
                cin,
                width,
                1,
            )?);
            cin = width;
        }
        net.push(residual_up_block(b, &format!("dec{stage}.up"), up(cin))?);
        cin = width;
    }
    for i in 0..blocks {
        net.push(residual_down_block(
            b,
            &format!("dec1.{i}"),
            kind,
            cin,
            width,
            1,
        )?);
        cin = width;
    }
    // Mirror of the stem's max-pool and strided 7×7 convolution.
    net.push(residual_up_block(b, "dec0.pool", up(cin))?);
    net.push(residual_up_block(b, "dec0.stem", up(width))?);
    net.push(Conv2d::build(
        b,
        "head",
        width,
        spec.out_channels,
        1,
        1,
        true,
    ));
    Ok(net)
}

/// VLight: two strided 3×3 stem convolutions, a 1×1 expansion to the common
/// width, three single-block depthwise-separable encoder stages (strides 1, 2, 2)
/// and four pixel-shuffle upsampling blocks restoring the 16× reduction.
pub fn vlight<T: Float>(b: &mut Builder<'_, T>, spec: &ModelSpec) -> Result<Sequential<T>> {
    let width = spec.width;
    let [s1, s2] = spec.stem_widths;
    let blocks = spec.blocks_per_stage.max(1);
    let mut net = Sequential::new();
    net.push(Conv2d::build(
        b,
        "stem.conv1",
        spec.in_channels,
        s1,
        3,
        2,
        false,
    ));
    net.push(BatchNorm2d::build(b, "stem.bn1", s1));
    net.push(Relu::new());
    net.push(Conv2d::build(b, "stem.conv2", s1, s2, 3, 2, false));
    net.push(BatchNorm2d::build(b, "stem.bn2", s2));
    net.push(Relu::new());
    net.push(Conv2d::build(b, "stem.expand", s2, width, 1, 1, false));
    net.push(BatchNorm2d::build(b, "stem.expand_bn", width));
    net.push(Relu::new());

    for (stage, &stride) in [1usize, 2, 2].iter().enumerate() {
        for i in 0..blocks {
            let s = if i == 0 { stride } else { 1 };
            net.push(residual_down_block(
                b,
                &format!("enc{}.{}", stage + 1, i),
                ConvKind::DepthwiseSeparable,
                width,
                width,
                s,
            )?);
        }
    }
    for i in 0..4 {
        net.push(residual_up_block(
            b,
            &format!("dec{}", i + 1),
            UpBlockLayout {
                in_channels: width,
                out_channels: width,
                upsampling: Upsampling::PixelShuffle,
                resize_conv: ConvKind::DepthwiseSeparable,
                refine_conv: None,
            },
        )?);
    }
    net.push(Conv2d::build(
        b,
        "head",
        width,
        spec.out_channels,
        1,
        1,
        true,
    ));
    Ok(net)
}
