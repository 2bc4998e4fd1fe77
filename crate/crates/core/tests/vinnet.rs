use std::sync::Arc;

use vinlab_core::gridworld::{GameRules, GridState, Variant, CELLS, GRID};
use vinlab_core::nnet::Tensor;
use vinlab_core::rng::rng_from;
use vinlab_core::vinnet::{LayerId, VinNetwork};
use vinlab_core::Error;

fn simplified_obs(seed: u64) -> Tensor {
    GridState::reset(&Arc::new(GameRules::simplified()), seed)
        .unwrap()
        .encode_observation()
}

#[test]
fn parameter_accounting() {
    let five = VinNetwork::build(5, 20, 1).unwrap().parameter_report();
    assert_eq!(five.count(LayerId::Attention) + five.count(LayerId::Reward), 10);
    assert_eq!(five.count(LayerId::Vi), 36);
    assert_eq!(five.count(LayerId::ActionAttention), 72);
    assert_eq!(five.count(LayerId::QValues), 1028);
    assert_eq!(five.total, 1146);
    assert_eq!(five.trainable, 1146);

    let eight = VinNetwork::build(8, 20, 1).unwrap().parameter_report();
    assert_eq!(eight.count(LayerId::Attention) + eight.count(LayerId::Reward), 16);
    assert_eq!(eight.total, 1152);
    assert!(eight.count(LayerId::QValues) * 100 > 85 * eight.total);
}

#[test]
fn rejects_invalid_shapes() {
    assert!(matches!(VinNetwork::zeros(6, 20), Err(Error::InvalidNetwork(_))));
    assert!(matches!(VinNetwork::zeros(5, 0), Err(Error::InvalidNetwork(_))));
    let net = VinNetwork::build(5, 3, 0).unwrap();
    assert!(net.forward_q(&Tensor::zeros(vinlab_core::nnet::Shape::new(8, 8, 8))).is_err());
}

#[test]
fn zero_network_outputs_bias() {
    let mut net = VinNetwork::zeros(5, 20).unwrap();
    net.layer_mut(LayerId::QValues).bias_mut().unwrap().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
    assert_eq!(net.forward_q(&simplified_obs(4)).unwrap(), [0.5, -1.0, 2.0, 0.25]);
}

#[test]
fn zero_attention_masks_everything() {
    let mut net = VinNetwork::build(8, 20, 9).unwrap();
    net.layer_mut(LayerId::Attention).weights_mut().fill(0.0);
    net.layer_mut(LayerId::QValues).bias_mut().unwrap().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let rules = Arc::new(GameRules::generate(3, Variant::Autogen));
    for seed in 0..10 {
        let obs = GridState::reset(&rules, seed).unwrap().encode_observation();
        assert_eq!(net.forward_q(&obs).unwrap(), [1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn golden_forward_value() {
    let net = VinNetwork::build(5, 20, 7).unwrap();
    let q = net.forward_q(&simplified_obs(3)).unwrap();
    let bits = q.map(f64::to_bits);
    assert_eq!(bits, GOLDEN, "q = {q:?}");
}

// Captured from this implementation; any change to kernel arithmetic shows up here.
const GOLDEN: [u64; 4] = [4595952749108566668, 13822570631192850721, 13815586345597060115, 4597174288617644836];

#[test]
fn reinitialize_touches_only_the_named_layer() {
    let base = VinNetwork::build(5, 20, 2).unwrap();
    for id in LayerId::ALL {
        let mut a = base.clone();
        let mut b = base.clone();
        a.reinitialize_layer(id, &mut rng_from(77));
        b.reinitialize_layer(id, &mut rng_from(77));
        assert_eq!(a, b);
        for other in LayerId::ALL {
            assert_eq!(a.layer(other) == base.layer(other), other != id, "{id} vs {other}");
        }
    }
}

#[test]
fn reinitialized_weights_stay_within_bound() {
    let mut net = VinNetwork::build(5, 20, 2).unwrap();
    let mut rng = rng_from(5);
    let bound = net.layer(LayerId::QValues).init_bound();
    assert_eq!(bound, (6.0f64 / (256.0 + 4.0)).sqrt());
    let mut draws = 0;
    let mut extreme = 0.0f64;
    while draws < 10_000 {
        net.reinitialize_layer(LayerId::QValues, &mut rng);
        let layer = net.layer(LayerId::QValues);
        assert!(layer.bias().unwrap().iter().all(|&b| b == 0.0));
        for &w in layer.weights() {
            assert!(w.abs() <= bound);
            extreme = extreme.max(w.abs());
        }
        draws += layer.weights().len();
    }
    // The draws should also reach close to the bound.
    assert!(extreme > 0.99 * bound);
}

#[test]
fn transfer_surface_is_sixteen_parameters() {
    let mut net = VinNetwork::build(8, 20, 1).unwrap();
    net.set_frozen(&[LayerId::Vi, LayerId::ActionAttention, LayerId::QValues], true);
    assert_eq!(net.parameter_report().trainable, 16);
    assert_eq!(net.frozen_layers(), vec![LayerId::Vi, LayerId::ActionAttention, LayerId::QValues]);
    net.set_frozen(&LayerId::ALL, false);
    assert!(net.frozen_layers().is_empty());
}

#[test]
fn text_round_trip_preserves_everything() {
    let mut net = VinNetwork::build(8, 12, 4).unwrap();
    net.set_frozen(&[LayerId::Vi], true);
    let parsed: VinNetwork = net.to_text().parse().unwrap();
    assert_eq!(parsed, net);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.params");
    net.save(&path).unwrap();
    assert_eq!(VinNetwork::load(&path).unwrap(), net);

    let broken = net.to_text().replace("layer reward", "layer rewards");
    assert!(broken.parse::<VinNetwork>().is_err());
}

#[test]
fn full_network_gradient_check() {
    for (seed, variant) in [(1, Variant::Simplified), (2, Variant::Autogen), (3, Variant::Simplified)] {
        let rules = Arc::new(GameRules::generate(seed, variant));
        let mut net = VinNetwork::build(rules.num_channels(), 20, seed).unwrap();
        // Freeze and unfreeze again: the round trip must restore every layer.
        net.set_frozen(&LayerId::ALL, true);
        net.set_frozen(&LayerId::ALL, false);
        let obs = GridState::reset(&rules, seed).unwrap().encode_observation();
        let report = net.gradient_check(&obs, [0.3, -1.0, 0.5, 2.0]).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.frozen, 0);
        assert!(report.checked > 1000);
    }
}

#[test]
fn frozen_network_is_a_pure_function() {
    let mut net = VinNetwork::build(5, 20, 8).unwrap();
    net.set_frozen(&LayerId::ALL, true);
    let obs = simplified_obs(11);
    let first = net.forward_q(&obs).unwrap();
    for _ in 0..1000 {
        assert_eq!(net.forward_q(&obs).unwrap(), first);
    }
}

/// With attention restricted to the player channel, only cells within reach
/// of value iteration and the 3×3 action-attention window can influence Q.
#[test]
fn masking_locality() {
    let iterations = 2;
    let reach = iterations + 1;
    let rules = Arc::new(GameRules::simplified());
    let mut net = VinNetwork::build(5, iterations, 6).unwrap();
    net.layer_mut(LayerId::Attention).weights_mut().copy_from_slice(&[0.0, 1.3, 0.0, 0.0, 0.0]);
    let board = [
        "P.......", "........", "........", "........", "........", "........", "......-.", "...T...+",
    ];
    let state = GridState::from_ascii(&rules, &board).unwrap();
    let obs = state.encode_observation();
    let q = net.forward_q(&obs).unwrap();
    let mut far = 0;
    for cell in 0..CELLS {
        let (r, c) = (cell / GRID, cell % GRID);
        if r.max(c) <= reach {
            continue;
        }
        far += 1;
        for ch in [0, 2, 3, 4] {
            let mut perturbed = obs.clone();
            for k in 0..5 {
                perturbed.set(r, c, k, f64::from(u8::from(k == ch)));
            }
            assert_eq!(net.forward_q(&perturbed).unwrap(), q, "cell ({r}, {c}) channel {ch}");
        }
    }
    assert!(far > 30);

    // A change next to the player does reach Q.
    let mut near = obs.clone();
    near.set(1, 1, 0, 0.0);
    near.set(1, 1, 3, 1.0);
    assert_ne!(net.forward_q(&near).unwrap(), q);
}

#[test]
fn freezing_does_not_change_trainable_gradients() {
    let rules = Arc::new(GameRules::generate(9, Variant::Autogen));
    let obs = GridState::reset(&rules, 4).unwrap().encode_observation();
    let q_grad = [0.4, -1.2, 0.8, 0.3];
    let gradients = |net: &mut VinNetwork| {
        net.zero_grad();
        let mut trace = net.forward(&obs).unwrap();
        net.backward(&mut trace, &q_grad).unwrap();
        LayerId::ALL
            .map(|id| (0..net.layer(id).parameter_count()).map(|i| net.layer(id).grad(i)).collect::<Vec<_>>())
    };
    let mut full = VinNetwork::build(8, 20, 13).unwrap();
    let reference = gradients(&mut full);
    for trainable in [
        vec![LayerId::Attention],
        vec![LayerId::Reward],
        vec![LayerId::Attention, LayerId::Reward],
        vec![LayerId::Vi],
        vec![LayerId::ActionAttention],
        vec![LayerId::QValues],
    ] {
        let mut net = full.clone();
        net.freeze_all_except(&trainable);
        let got = gradients(&mut net);
        for id in trainable {
            assert!(got[id.index()].iter().any(|&g| g != 0.0), "{id:?} received no gradient");
            for (a, b) in got[id.index()].iter().zip(&reference[id.index()]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{id:?}: {a} vs {b}");
            }
        }
    }
}
