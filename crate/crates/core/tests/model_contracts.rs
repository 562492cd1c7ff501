//! Structural contracts of the assembled network: the spatial schedule, the
//! output range, side-output behavior on degenerate inputs, ablation
//! structure, and the end-to-end gradient check on a toy configuration.

use gcanet::model::{GcaNet, ModelConfig, Variant, SIDE_OUTPUTS};
use gcanet::params::ParamBindings;
use gcanet::tensor::{grad_check_report, GradGraph, Shape4, Tensor4};

fn toy_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [2, 3, 4, 5, 6],
        stage_repeats: [1, 1, 1, 1, 1],
        stage_expansion: [1, 1, 1, 2, 2],
        transformer_depth: 1,
        ffn_expansion: 2,
        cra_heads: 1,
        decoder_dilation: 2,
        input_size: 16,
    }
}

fn lcg_image(size: usize, salt: u64) -> Tensor4<f64> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor4::from_fn(Shape4::new(1, 3, size, size), |_, _, _, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    })
}

#[test]
fn encoder_spatial_schedule_halves_after_stage_one() {
    let config = toy_config();
    let (net, store) = GcaNet::build::<f64>(&config, 5).unwrap();
    let feats = net
        .encoder_features(&store, &lcg_image(16, 1))
        .unwrap();
    let expected = [16usize, 8, 4, 2, 1];
    for (i, f) in feats.iter().enumerate() {
        assert_eq!(
            (f.shape().height, f.shape().width),
            (expected[i], expected[i]),
            "stage {} schedule",
            i + 1
        );
        assert_eq!(f.shape().channels, config.stage_channels[i]);
    }
}

#[test]
fn side_outputs_stay_in_unit_interval() {
    let config = toy_config();
    let (net, store) = GcaNet::build::<f64>(&config, 6).unwrap();
    for salt in 0..5 {
        // Inputs well outside [0,1] still map into [0,1] through the sigmoid.
        let image = lcg_image(16, 100 + salt).map(|v| v * 20.0 - 10.0);
        let maps = net.forward(&store, &image).unwrap();
        assert_eq!(maps.len(), SIDE_OUTPUTS);
        for m in &maps {
            assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn zero_image_with_zero_heads_gives_half_everywhere() {
    let config = toy_config();
    let (net, mut store) = GcaNet::build::<f64>(&config, 7).unwrap();
    // Zero the side-head weights; biases are already zero-initialized.
    for i in 1..=5 {
        let id = store.id_of(&format!("head{i}.w")).unwrap();
        let shape = store.value(id).shape();
        store.set_value(id, Tensor4::zeros(shape)).unwrap();
    }
    let image = Tensor4::zeros(Shape4::new(1, 3, 16, 16));
    let maps = net.forward(&store, &image).unwrap();
    for m in &maps {
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}

#[test]
fn baseline_graph_has_no_attention_nodes_and_matches_flag_built_twin() {
    let config = toy_config();
    let (a, store_a) = GcaNet::build_variant::<f64>(&config, Variant::Baseline, 11).unwrap();
    let (b, store_b) = GcaNet::build_variant::<f64>(&config, Variant::Baseline, 11).unwrap();
    let image = lcg_image(16, 3);
    let run = |net: &GcaNet, store| -> (Vec<&'static str>, Vec<u64>) {
        let mut g = GradGraph::<f64>::new();
        let binds = ParamBindings::bind(&mut g, store);
        let iv = g.leaf(image.clone());
        let sides = net.forward_graph(&mut g, &binds, iv).unwrap();
        let bits = sides
            .maps
            .iter()
            .flat_map(|&m| g.value(m).data().iter().map(|v| v.to_bits()))
            .collect();
        (g.op_sequence(), bits)
    };
    let (ops_a, bits_a) = run(&a, &store_a);
    let (ops_b, bits_b) = run(&b, &store_b);
    // Same seed: graphs agree node for node and value for value.
    assert_eq!(ops_a, ops_b);
    assert_eq!(bits_a, bits_b);
    // With CRA, global injection, and the transformer removed there is no
    // softmax (and no attention) anywhere in the recorded graph.
    assert!(!ops_a.contains(&"softmax"));
}

#[test]
fn ablation_structure_orders_parameter_counts() {
    let config = ModelConfig::default();
    let count = |v: Variant| -> u64 {
        let (_, store) = GcaNet::build_variant::<f32>(&config, v, 1).unwrap();
        store.total_values()
    };
    let baseline = count(Variant::Baseline);
    let cra = count(Variant::CraOnly);
    let full = count(Variant::Full);
    let msa8 = count(Variant::WithMsa8);
    let ppm = count(Variant::WithPpm);
    assert!(baseline < cra, "baseline {baseline} < +CRA {cra}");
    assert!(cra < full, "+CRA {cra} < full {full}");
    // MSA-8 swaps the attention weights one for one (minus the alpha scale).
    let diff = full.abs_diff(msa8) as f64 / full as f64;
    assert!(diff < 0.005, "msa8 within 0.5% of full, diff {diff}");
    assert!(ppm < full, "ppm {ppm} < full {full}");
}

#[test]
fn every_variant_passes_forward_shape_contract() {
    // Shape contract at a small input size to keep runtime sane.
    let config = ModelConfig {
        input_size: 32,
        ..ModelConfig::default()
    };
    for v in Variant::ALL {
        let (net, store) = GcaNet::build_variant::<f32>(&config, v, 2).unwrap();
        let image = Tensor4::full(Shape4::new(2, 3, 32, 32), 0.25);
        let maps = net.forward(&store, &image).unwrap();
        assert_eq!(maps.len(), SIDE_OUTPUTS, "{}", v.label());
        for m in &maps {
            assert_eq!(m.shape(), Shape4::new(2, 1, 32, 32), "{}", v.label());
            assert!(
                m.data().iter().all(|&x| (0.0..=1.0).contains(&x)),
                "{}",
                v.label()
            );
        }
    }
}

/// End-to-end gradient check in f64 on the toy configuration: input image and
/// two representative parameters (an early conv weight, an attention
/// projection), all under 1e-4 relative error.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let config = toy_config();
    let (net, store) = GcaNet::build::<f64>(&config, 13).unwrap();
    let image = lcg_image(16, 77).map(|v| 0.2 + 0.6 * v);
    let tol = 1e-4;
    let step = 1e-5;

    let net_ref = &net;
    let store_ref = &store;
    let report = grad_check_report(
        move |g, iv| {
            let binds = ParamBindings::bind(g, store_ref);
            let sides = net_ref.forward_graph(g, &binds, iv)?;
            let mut acc = g.mul(sides.maps[0], sides.maps[0])?;
            for &m in &sides.maps[1..] {
                let sq = g.mul(m, m)?;
                acc = g.add(acc, sq)?;
            }
            Ok(g.mean_all(acc))
        },
        &image,
        step,
    )
    .unwrap();
    assert!(
        report.max_rel_error < tol,
        "end-to-end wrt input image: {}",
        report.max_rel_error
    );
    assert!(
        report.checked >= 9 * (report.checked + report.skipped) / 10,
        "too many kink exclusions: {report:?}"
    );

    for name in ["enc1.entry.pw.w", "trans0.dsa.wq"] {
        let id = store.id_of(name).unwrap();
        let probe = store.value(id).clone();
        let image2 = image.clone();
        let report = grad_check_report(
            move |g, wv| {
                let binds = ParamBindings::bind_with_override(g, store_ref, id, wv);
                let iv = g.leaf(image2.clone());
                let sides = net_ref.forward_graph(g, &binds, iv)?;
                let mut acc = g.mul(sides.maps[0], sides.maps[0])?;
                for &m in &sides.maps[1..] {
                    let sq = g.mul(m, m)?;
                    acc = g.add(acc, sq)?;
                }
                Ok(g.mean_all(acc))
            },
            &probe,
            step,
        )
        .unwrap();
        assert!(
            report.max_rel_error < tol,
            "end-to-end wrt {name}: {}",
            report.max_rel_error
        );
        assert!(
            report.checked > 0 && report.checked >= (report.checked + report.skipped) / 2,
            "too many kink exclusions for {name}: {report:?}"
        );
    }
}
