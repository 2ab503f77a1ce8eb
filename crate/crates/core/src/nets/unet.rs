//! Classic 4-down/4-up U-Net.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::blocks::{conv_unit, ConvKind, Upsampling};
use super::layers::{
    Conv2d, ConvTranspose2d, Field, Layer, MaxPool2d, PixelShuffle, Relu, Sequential,
    UpsampleBilinear,
};
use super::params::{Builder, ParamStore};

fn double_conv<T: Float>(
    b: &mut Builder<'_, T>,
    name: &str,
    kind: ConvKind,
    cin: usize,
    cout: usize,
) -> Sequential<T> {
    b.scoped(name, |b| {
        Sequential::new()
            .with(conv_unit(b, "conv1", kind, cin, cout, 3, 1))
            .with(Relu::new())
            .with(conv_unit(b, "conv2", kind, cout, cout, 3, 1))
            .with(Relu::new())
    })
}

struct UpStage<T> {
    resize: Sequential<T>,
    skip_channels: usize,
    conv: Sequential<T>,
}

pub struct UNet<T> {
    inc: Sequential<T>,
    downs: Vec<Sequential<T>>,
    ups: Vec<UpStage<T>>,
    head: Conv2d<T>,
}

impl<T: Float> UNet<T> {
    pub fn build(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        base: usize,
        kind: ConvKind,
        upsampling: Upsampling,
    ) -> Result<Self> {
        let widths: Vec<usize> = (0..5).map(|i| base << i).collect();
        let inc = double_conv(b, "inc", kind, in_channels, widths[0]);
        let mut downs = Vec::new();
        for i in 1..5 {
            let name = format!("down{i}");
            let mut s = Sequential::new().with(MaxPool2d::new(2, 2, 0));
            s.push(double_conv(b, &name, kind, widths[i - 1], widths[i]));
            downs.push(s);
        }
        let mut ups = Vec::new();
        for i in (0..4).rev() {
            let cin = widths[i + 1];
            let half = cin / 2;
            let name = format!("up{}", 4 - i);
            let resize = b.scoped(name.clone(), |b| -> Result<Sequential<T>> {
                Ok(match upsampling {
                    Upsampling::Deconv => {
                        Sequential::new().with(ConvTranspose2d::build(b, "up", cin, half, 2, 2, 0))
                    }
                    Upsampling::Bilinear => Sequential::new()
                        .with(UpsampleBilinear::new(2))
                        .with(Conv2d::build(b, "up", cin, half, 1, 1, true)),
                    Upsampling::PixelShuffle => {
                        if !cin.is_multiple_of(4) {
                            return Err(Error::Spec(
                                "pixel shuffle needs widths divisible by 4".into(),
                            ));
                        }
                        Sequential::new()
                            .with(PixelShuffle::new(2))
                            .with(Conv2d::build(b, "up", cin / 4, half, 1, 1, true))
                    }
                })
            })?;
            let conv = b.scoped(name, |b| {
                double_conv(b, "conv", kind, widths[i] + half, widths[i])
            });
            ups.push(UpStage {
                resize,
                skip_channels: widths[i],
                conv,
            });
        }
        let head = Conv2d::build(b, "head", widths[0], out_channels, 1, 1, true);
        Ok(UNet {
            inc,
            downs,
            ups,
            head,
        })
    }
}

impl<T: Float> Layer<T> for UNet<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut feats = vec![self.inc.infer(p, x)?];
        for d in &self.downs {
            let next = d.infer(p, feats.last().expect("non-empty"))?;
            feats.push(next);
        }
        let mut cur = feats.pop().expect("bottleneck");
        for up in &self.ups {
            let skip = feats.pop().expect("skip feature");
            let u = up.resize.infer(p, &cur)?;
            cur = up.conv.infer(p, &Tensor::concat_channels(&skip, &u)?)?;
        }
        self.head.infer(p, &cur)
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut feats = vec![self.inc.forward(p, x)?];
        for d in &mut self.downs {
            let next = d.forward(p, feats.last().expect("non-empty"))?;
            feats.push(next);
        }
        let mut cur = feats.pop().expect("bottleneck");
        for up in &mut self.ups {
            let skip = feats.pop().expect("skip feature");
            let u = up.resize.forward(p, &cur)?;
            cur = up.conv.forward(p, &Tensor::concat_channels(&skip, &u)?)?;
        }
        self.head.forward(p, &cur)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(p, grad)?;
        // Skip gradients, deepest level first.
        let mut skip_grads = Vec::with_capacity(self.ups.len());
        for up in &mut self.ups {
            let gc = up.conv.backward(p, &g)?;
            let (g_skip, g_up) = gc.split_channels(up.skip_channels)?;
            skip_grads.push(g_skip);
            g = up.resize.backward(p, &g_up)?;
        }
        for d in self.downs.iter_mut().rev() {
            let mut below = d.backward(p, &g)?;
            below.add_assign(&skip_grads.remove(0))?;
            g = below;
        }
        self.inc.backward(p, &g)
    }

    fn field(&self, input: Field) -> Field {
        let mut feats = vec![self.inc.field(input)];
        for d in &self.downs {
            let f = d.field(*feats.last().expect("non-empty"));
            feats.push(f);
        }
        let mut cur = feats.pop().expect("bottleneck");
        for up in &self.ups {
            let skip = feats.pop().expect("skip");
            cur = up.conv.field(up.resize.field(cur).union(skip));
        }
        self.head.field(cur)
    }
}
