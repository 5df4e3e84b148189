mod common;

use common::{random_batch, random_checkpoint};
use mergeguard::analysis::*;
use mergeguard::arch::{Scope, ToyArchSpec};
use mergeguard::attack::adaptive_recover;
use mergeguard::defense::{protect, ScaleRange};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distance_is_a_metric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let arch = ToyArchSpec::TINY;
        let (a, b, c) = (random_checkpoint(&arch, s1), random_checkpoint(&arch, s2), random_checkpoint(&arch, s3));
        for scope in [Scope::All, Scope::Mlp, Scope::Attn] {
            let ab = param_distance(&a, &b, scope).unwrap();
            prop_assert_eq!(ab, param_distance(&b, &a, scope).unwrap());
            prop_assert_eq!(param_distance(&a, &a, scope).unwrap(), 0.0);
            let ac = param_distance(&a, &c, scope).unwrap();
            let cb = param_distance(&c, &b, scope).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn similarity_is_a_cosine(s in 0u64..1000) {
        let arch = ToyArchSpec::TINY;
        let r = layer_similarity(
            &random_checkpoint(&arch, s),
            &random_checkpoint(&arch, s + 1),
            &random_checkpoint(&arch, s + 2),
            &random_batch(&arch, 6, s),
        )
        .unwrap();
        prop_assert_eq!(r.per_layer.len(), arch.n_layers);
        prop_assert!(r.per_layer.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(r.lambda, 0.5);
    }
}

#[test]
fn scoped_distances_partition_the_total() {
    let arch = ToyArchSpec::TOY;
    let (a, b) = (random_checkpoint(&arch, 1), random_checkpoint(&arch, 2));
    let all = param_distance(&a, &b, Scope::All).unwrap();
    let rest: f64 = a
        .tensors()
        .iter()
        .filter(|(n, _)| !Scope::Mlp.contains(n) && !Scope::Attn.contains(n))
        .flat_map(|(n, t)| t.data().iter().zip(b.get(n).data()).map(|(x, y)| (x - y).powi(2)))
        .sum();
    let parts = rest
        + [Scope::Mlp, Scope::Attn]
            .iter()
            .map(|&s| param_distance(&a, &b, s).unwrap().powi(2))
            .sum::<f64>();
    assert!((all * all - parts).abs() < 1e-9 * all * all);
}

#[test]
fn similarity_survives_protect_then_recover() {
    let arch = ToyArchSpec::TINY;
    let pre = random_checkpoint(&arch, 3);
    let (def, fr) = (random_checkpoint(&arch, 4), random_checkpoint(&arch, 5));
    let batch = random_batch(&arch, 10, 6);
    let base = layer_similarity(&pre, &def, &fr, &batch).unwrap();
    let (prot, _) = protect(&def, &pre, ScaleRange::DEFAULT, 7, None).unwrap();
    let rec = adaptive_recover(&prot, &pre).unwrap();
    let direct = adaptive_recover(&def, &pre).unwrap();
    let a = layer_similarity(&pre, rec.recovered(), &fr, &batch).unwrap();
    let b = layer_similarity(&pre, direct.recovered(), &fr, &batch).unwrap();
    for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
        assert!((x - y).abs() < 1e-9);
    }
    assert_eq!(base.per_layer.len(), a.per_layer.len());
}
