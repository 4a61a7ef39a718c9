use iag_core::autodiff::Tape;
use iag_core::backbone::*;
use iag_core::data::{generate_samples, GeneratorParams};
use iag_core::kernels::{conv2d_forward, ConvGeometry};
use iag_core::{Error, FormatError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(width: usize, depth: usize, seed: u64) -> ModelParams {
    let config = BackboneConfig { depth, width, kernel: 3 };
    ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Straight-line forward pass for one plane.
fn reference_plane(p: &ModelParams, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut x = plane.to_vec();
    let mut cin = 1;
    for (i, l) in p.layers.iter().enumerate() {
        if i > 0 {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let s = l.kernels.shape();
        let g = ConvGeometry {
            in_channels: cin,
            out_channels: s[0],
            height: h,
            width: w,
            kernel: s[2],
        };
        x = conv2d_forward(g, &x, l.kernels.data(), l.bias.data());
        cin = s[0];
    }
    x
}

#[test]
fn features_match_reference_forward() {
    let vol = &generate_samples(&GeneratorParams {
        num: 2,
        dims: [8, 9, 7],
        ..Default::default()
    })
    .unwrap()[0];
    let p = params(4, 3, 1);
    let slices = [0, 2, 4];
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, &p, false);
    let fm = extract_features(&mut t, &vars, vol, &slices).unwrap();
    assert_eq!(fm.lattice, Lattice { depth: 3, height: 9, width: 7 });
    assert_eq!(t.value(fm.features).shape(), &[3 * 63, 4]);
    let got = t.data(fm.features);
    for (s, &z) in slices.iter().enumerate() {
        let r = reference_plane(&p, &vol.slice(z), 9, 7);
        for c in 0..4 {
            for i in 0..63 {
                assert_eq!(got[(s * 63 + i) * 4 + c], r[c * 63 + i]);
            }
        }
    }
}

#[test]
fn model_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = params(5, 2, 7);
    let path = dir.path().join("m.iagm");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(std::fs::read(&path).unwrap(), q.to_bytes());
    assert_eq!(p.num_params(), (5 * 9 + 5) + (5 * 5 * 9 + 5) + 3 * 5);
}

#[test]
fn init_is_seeded_and_bounded() {
    assert_eq!(params(4, 3, 2), params(4, 3, 2));
    assert_ne!(params(4, 3, 2), params(4, 3, 3));
    let p = params(8, 2, 0);
    let first = 1.0 / 3.0;
    assert!(p.layers[0].kernels.data().iter().all(|v| v.abs() <= first));
    let second = 1.0 / (8.0f64 * 9.0).sqrt();
    assert!(p.layers[1].kernels.data().iter().all(|v| v.abs() <= second));
    assert_eq!(p.tensor_names().len(), p.tensors().count());
}

#[test]
fn bad_model_bytes_are_rejected() {
    let good = params(3, 2, 0).to_bytes();
    let mut bad = good.clone();
    bad[0] = 0;
    assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
    assert!(matches!(
        ModelParams::from_bytes(&good[..good.len() - 3]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));
    let mut long = good;
    long.extend([0; 8]);
    assert!(matches!(ModelParams::from_bytes(&long), Err(Error::Format(FormatError::TrailingBytes(8)))));
}

#[test]
fn slice_lists_are_validated() {
    assert!(validate_slices(4, &[0, 1, 3]).is_ok());
    assert!(validate_slices(4, &[]).is_err());
    assert!(validate_slices(4, &[1, 1]).is_err());
    assert!(validate_slices(4, &[4]).is_err());
    assert!(BackboneConfig { depth: 1, width: 1, kernel: 2 }.validate().is_err());
}
