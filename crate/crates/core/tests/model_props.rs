use proptest::prelude::*;
use rtlab_core::data::gaussian_noise_inputs;
use rtlab_core::nn::{EncoderKind, NormKind, ProjectorSpec};
use rtlab_core::{init_params, ModelSpec, Tensor};

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        prop::sample::select(vec![EncoderKind::Mlp, EncoderKind::SmallCnn, EncoderKind::SmallCnnResidual]),
        prop::sample::select(vec![NormKind::Batch, NormKind::Layer, NormKind::Identity]),
        any::<[bool; 3]>(),
        1usize..3,
    )
        .prop_map(|(encoder, norm, [wn, lin, feat], depth)| {
            let widths: Vec<usize> = (0..depth).map(|i| 3 + 2 * i).collect();
            let embed_dim = *widths.last().unwrap();
            ModelSpec {
                encoder,
                encoder_widths: widths,
                embed_dim,
                norm,
                projector: ProjectorSpec {
                    hidden_dims: vec![7],
                    bottleneck_dim: 3,
                    out_dim: 11,
                    use_weight_norm: wn,
                    use_first_linear: lin,
                    use_feature_norm: feat,
                    linear_hidden: false,
                },
                input_shape: match encoder {
                    EncoderKind::Mlp => vec![12],
                    _ => vec![2, 6, 6],
                },
                classes: None,
            }
        })
}

fn batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
    gaussian_noise_inputs(n, &spec.input_shape, 1.0, seed).unwrap().inputs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn head_composes_with_encoder(spec in spec_strategy(), seed in 0u64..1000) {
        let s = init_params(&spec, seed).unwrap();
        let x = batch(&spec, 5, seed + 1);
        let full = s.forward(&x).unwrap();
        let composed = s.bottleneck_forward(&s.encoder_forward(&x).unwrap()).unwrap();
        prop_assert_eq!(full.shape(), composed.shape());
        for (a, b) in full.data().iter().zip(composed.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let eval = s.forward_eval(&x).unwrap();
        let composed = s.bottleneck_forward(&s.encode_eval(&x).unwrap()).unwrap();
        for (a, b) in eval.data().iter().zip(composed.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn default_head_outputs_are_cosines(spec in spec_strategy(), seed in 0u64..1000) {
        let mut spec = spec;
        spec.projector.use_weight_norm = true;
        spec.projector.use_first_linear = true;
        spec.projector.use_feature_norm = true;
        let s = init_params(&spec, seed).unwrap();
        let y = s.forward(&batch(&spec, 4, seed)).unwrap();
        prop_assert!(y.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn init_is_a_function_of_spec_and_seed(spec in spec_strategy(), seed in 0u64..1000) {
        let a = init_params(&spec, seed).unwrap();
        let b = init_params(&spec, seed).unwrap();
        prop_assert_eq!(a.params(), b.params());
        let c = init_params(&spec, seed + 1).unwrap();
        prop_assert_ne!(a.params(), c.params());
    }
}

#[test]
fn ablation_flags_give_eight_distinct_paths() {
    let base = ModelSpec {
        encoder: EncoderKind::Mlp,
        encoder_widths: vec![8],
        embed_dim: 6,
        input_shape: vec![5],
        projector: ProjectorSpec {
            hidden_dims: vec![9],
            bottleneck_dim: 4,
            out_dim: 10,
            ..ProjectorSpec::default()
        },
        ..ModelSpec::default()
    };
    let x = batch(&base, 6, 1);
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    for bits in 0..8u8 {
        let mut spec = base.clone();
        spec.projector.use_weight_norm = bits & 1 != 0;
        spec.projector.use_first_linear = bits & 2 != 0;
        spec.projector.use_feature_norm = bits & 4 != 0;
        let mut s = init_params(&spec, 3).unwrap();
        // Scale head weights so that each normalization visibly changes the output.
        for seg in s.layout().segments().to_vec() {
            if seg.name.starts_with("proj.") {
                for v in &mut s.params_mut().values_mut()[seg.range()] {
                    *v *= 40.0;
                }
            }
        }
        let y = s.forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.shape(), &[6, 10]);
        outputs.push(y.into_data());
    }
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(outputs[i], outputs[j], "flag sets {i} and {j} coincide");
        }
    }
}
