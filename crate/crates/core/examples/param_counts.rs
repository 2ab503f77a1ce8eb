use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlight::nets::{build_model, ConvKind, ModelSpec, Upsampling};

fn main() {
    let mut specs = vec![("unet", ModelSpec::unet()), ("vlight", ModelSpec::vlight())];
    for up in [
        Upsampling::Deconv,
        Upsampling::Bilinear,
        Upsampling::PixelShuffle,
    ] {
        for kind in [ConvKind::Full, ConvKind::DepthwiseSeparable] {
            specs.push(("sb", ModelSpec::simple_baseline(up, kind)));
        }
    }
    for (name, spec) in specs {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_model::<f32>(&spec, &mut rng).unwrap();
        println!(
            "{name:8} {:?} {:?} {} rf={}",
            spec.upsampling,
            spec.conv_kind,
            m.parameter_count(),
            m.receptive_field()
        );
    }
}
