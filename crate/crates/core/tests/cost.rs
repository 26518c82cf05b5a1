mod common;

use chanprune::cost::{baseline_cost, evaluate_cost, ChannelConfig};
use chanprune::ir::{builtin_arch, SnapshotBuilder};
use proptest::prelude::*;

/// vgg16 on 3x32x32 with a 10-way head; established by the MAC-loop oracle.
const VGG16_CIFAR_MACS: u64 = 313_201_664;

#[test]
fn vgg16_baseline_matches_the_fixture_constant() {
    let s = builtin_arch("vgg16", 10, [3, 32, 32], 0).unwrap();
    let oracle = common::mac_oracle(&s, &ChannelConfig::new());
    assert_eq!(oracle, VGG16_CIFAR_MACS);
    assert_eq!(baseline_cost(&s).unwrap().flops, VGG16_CIFAR_MACS);
}

#[test]
fn tiny_fixtures_match_the_oracle() {
    for name in ["tiny_vgg", "tiny_resnet", "tiny_ir"] {
        let s = builtin_arch(name, 4, [3, 16, 16], 0).unwrap();
        assert_eq!(baseline_cost(&s).unwrap().flops, common::mac_oracle(&s, &ChannelConfig::new()), "{name}");
    }
    let s = builtin_arch("tiny_vgg", 4, [3, 16, 16], 0).unwrap();
    assert_eq!(baseline_cost(&s).unwrap().flops, 1_088_512);
}

#[test]
fn two_conv_chain_cost_polynomial() {
    let mut b = SnapshotBuilder::new("chain", [3, 16, 16], 2, 0);
    b.conv("c1", 8, 3, 1, 1, false).bn("bn1");
    b.plain_block("c1", "bn1", &[]);
    b.conv("c2", 8, 3, 1, 1, false).bn("bn2");
    b.plain_block("c2", "bn2", &[]);
    b.global_avg_pool("gap").flatten("flat").fc("fc", 2, false);
    let s = b.finish().unwrap();
    let fc = 8 * 2;
    assert_eq!(baseline_cost(&s).unwrap().flops, 202_752 + fc);
    for r in 1..=8u64 {
        let mut cfg = ChannelConfig::new();
        cfg.set("c1", r as usize);
        cfg.set("c2", r as usize);
        let cost = evaluate_cost(&s, &cfg).unwrap().flops;
        assert_eq!(cost, 6912 * r + 2304 * r * r + 2 * r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cost_matches_the_mac_loop(seed in any::<u64>()) {
        let s = common::random_arch(seed);
        let cfg = common::random_config(&s, seed.wrapping_add(7));
        let report = evaluate_cost(&s, &cfg).unwrap();
        prop_assert_eq!(report.flops, common::mac_oracle(&s, &cfg));
        prop_assert_eq!(report.flops, report.per_layer.values().map(|l| l.flops).sum::<u64>());
        prop_assert_eq!(report.params, report.per_layer.values().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn cost_is_monotone_in_every_layer(seed in any::<u64>()) {
        let s = common::random_arch(seed);
        let cfg = common::random_config(&s, seed.wrapping_add(3));
        let base = evaluate_cost(&s, &cfg).unwrap();
        for (id, &c) in &cfg.channels {
            if c > 1 {
                let mut smaller = cfg.clone();
                smaller.set(id.clone(), c - 1);
                let r = evaluate_cost(&s, &smaller).unwrap();
                prop_assert!(r.flops <= base.flops);
                prop_assert!(r.params < base.params);
            }
        }
        prop_assert!(base.flops <= baseline_cost(&s).unwrap().flops);
    }
}
