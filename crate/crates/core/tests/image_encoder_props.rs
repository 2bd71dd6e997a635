use csm_core::image_encoder::{
    backward, forward, gradient_check, init_params_with, window_output, InitScheme, LayerSpec, NetworkSpec,
};
use csm_core::tensor::Tensor;
use proptest::prelude::*;

fn random_input(shape: [usize; 3], salt: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64 * 2654435761 + salt) % 1000) as f64 / 1000.0).collect();
    Tensor::from_vec(&shape, data).unwrap()
}

proptest! {
    #[test]
    fn window_output_matches_enumeration(input in 1usize..40, kernel in 1usize..7, stride in 1usize..4, pad in 0usize..3) {
        let count = (0..input + 2 * pad).step_by(stride).filter(|&s| s + kernel <= input + 2 * pad).count();
        let expect = if count == 0 { None } else { Some(count) };
        prop_assert_eq!(window_output(input, kernel, stride, pad), expect);
    }

    #[test]
    fn shapes_chain_through_layers(c in 1usize..4, hw in 6usize..20, oc in 1usize..6, k in 1usize..4, pad in 0usize..2) {
        let spec = NetworkSpec {
            input_shape: [c, hw, hw],
            layers: vec![
                LayerSpec::Conv { out_channels: oc, kernel: k, stride: 1, padding: pad, relu: true },
                LayerSpec::pool(2, 2),
                LayerSpec::fc(3, false),
            ],
        };
        let shapes = spec.layer_shapes().unwrap();
        let side = hw + 2 * pad - k + 1;
        prop_assert_eq!(&shapes[0], &vec![oc, side, side]);
        prop_assert_eq!(&shapes[1], &vec![oc, side / 2, side / 2]);
        let params = init_params_with::<f64>(&spec, InitScheme::He, 1).unwrap();
        let (out, _) = forward(&params, &spec, &random_input(spec.input_shape, 3)).unwrap();
        prop_assert_eq!(out.len(), 3);
    }

    #[test]
    fn backward_is_linear_in_upstream(seed in 0u64..50, a in -3.0f64..3.0) {
        let spec = NetworkSpec {
            input_shape: [2, 6, 6],
            layers: vec![LayerSpec::conv(3, 3, 1), LayerSpec::pool(2, 2), LayerSpec::lcn(), LayerSpec::fc(4, false)],
        };
        let params = init_params_with::<f64>(&spec, InitScheme::He, seed).unwrap();
        let (_, cache) = forward(&params, &spec, &random_input(spec.input_shape, seed)).unwrap();
        let up = [0.3, -1.0, 0.5, 2.0];
        let g1 = backward(&params, &spec, &cache, &up).unwrap();
        let scaled: Vec<f64> = up.iter().map(|u| u * a).collect();
        let ga = backward(&params, &spec, &cache, &scaled).unwrap();
        for (x, y) in g1.slices().iter().zip(ga.slices()) {
            for (u, v) in x.iter().zip(y) {
                prop_assert!((u * a - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }
    }
}

#[test]
fn linear_network_is_homogeneous() {
    let spec = NetworkSpec {
        input_shape: [1, 5, 5],
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 0, relu: false },
            LayerSpec::fc(3, false),
        ],
    };
    let params = init_params_with::<f64>(&spec, InitScheme::He, 4).unwrap();
    let x = random_input(spec.input_shape, 9);
    let (y, _) = forward(&params, &spec, &x).unwrap();
    let mut x2 = x.clone();
    x2.scale(2.0);
    let (y2, _) = forward(&params, &spec, &x2).unwrap();
    let (z, _) = forward(&params, &spec, &Tensor::zeros(&[1, 5, 5])).unwrap();
    for i in 0..3 {
        // zero biases at init, so the map is linear
        assert_eq!(z[i], 0.0);
        assert!((y2[i] - 2.0 * y[i]).abs() < 1e-12);
    }
}

#[test]
fn gradient_check_on_every_layer_kind_across_seeds() {
    let spec = NetworkSpec {
        input_shape: [2, 8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 2, padding: 1, relu: true },
            LayerSpec::Lcn { n: 3, k: 1.0, alpha: 0.5, beta: 0.75 },
            LayerSpec::pool(2, 1),
            LayerSpec::fc(5, true),
            LayerSpec::fc(4, false),
        ],
    };
    for seed in 10..14 {
        let report = gradient_check(&spec, [2, 8, 8], 1e-4, seed).unwrap();
        assert!(report.passed, "seed {seed}\n{report}");
    }
}
