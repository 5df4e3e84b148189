mod common;

use common::random_checkpoint;
use mergeguard::arch::ToyArchSpec;
use mergeguard::checkpoint::Checkpoint;
use mergeguard::defense::{protect_lowrank, ScaleRange};
use mergeguard::merging::*;
use mergeguard::tensor::Tensor;
use proptest::prelude::*;

fn taus(arch: &ToyArchSpec, n: u64, seed: u64) -> (Checkpoint<f64>, Vec<TaskVector<f64>>) {
    let pre = random_checkpoint(arch, seed);
    let t = (0..n)
        .map(|i| task_vector(&random_checkpoint(arch, seed * 100 + 1 + i), &pre).unwrap())
        .collect();
    (pre, t)
}

fn close(a: &Checkpoint<f64>, b: &Checkpoint<f64>, tol: f64) -> bool {
    a.max_abs_diff(b).unwrap() <= tol
}

#[test]
fn single_vector_at_unit_lambda_gives_the_finetuned_model() {
    let arch = ToyArchSpec::TINY;
    let pre = random_checkpoint(&arch, 1);
    let ft = random_checkpoint(&arch, 2);
    let m = merge_ta(&pre, &[task_vector(&ft, &pre).unwrap()], 1.0).unwrap();
    // pre + (ft − pre) rounds twice, so equality holds to the last ulp.
    assert!(close(&m, &ft, 1e-15 * 8.0));
}

#[test]
fn dyadic_values_reconstruct_exactly() {
    let arch = ToyArchSpec::TINY;
    let snap = |c: Checkpoint<f64>| c.try_map(|_, t| t.map(|v| (v * 1024.0).round() / 1024.0)).unwrap();
    let pre = snap(random_checkpoint(&arch, 1));
    let ft = snap(random_checkpoint(&arch, 2));
    let tau = task_vector(&ft, &pre).unwrap();
    assert_eq!(merge_ta(&pre, &[tau], 1.0).unwrap().tensors(), ft.tensors());
}

#[test]
fn weight_average_is_ta_with_reciprocal_lambda() {
    for n in 1..=5 {
        let (pre, t) = taus(&ToyArchSpec::TINY, n, n);
        let wa = merge_wa(&pre, &t).unwrap();
        let ta = merge_ta(&pre, &t, 1.0 / n as f64).unwrap();
        assert_eq!(wa.tensors(), ta.tensors());
        let copies = vec![t[0].clone(); n as usize];
        let rep = merge_wa(&pre, &copies).unwrap();
        assert!(close(&rep, &merge_ta(&pre, &t[..1], 1.0).unwrap(), 1e-14));
    }
}

#[test]
fn ta_is_linear_in_task_vectors() {
    let (pre, t) = taus(&ToyArchSpec::TOY, 2, 3);
    let summed = t[0].add(&t[1]).unwrap();
    for lambda in [0.3, 0.5, 0.8, 1.0] {
        assert_eq!(
            merge_ta(&pre, std::slice::from_ref(&summed), lambda).unwrap().tensors(),
            merge_ta(&pre, &t, lambda).unwrap().tensors()
        );
    }
}

#[test]
fn dare_is_unbiased() {
    let (_, t) = taus(&ToyArchSpec::TINY, 1, 5);
    let tau = &t[0];
    let (p, trials) = (0.5, 10_000u64);
    let name = "block.0.mlp.w1";
    let idx = [0usize, 7, 100];
    let mut sums = [0.0; 3];
    for s in 0..trials {
        let d = dare_transform(tau, p, s).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            sums[k] += d.deltas[name].data()[i];
        }
    }
    for (k, &i) in idx.iter().enumerate() {
        let x = tau.deltas[name].data()[i];
        let mean = sums[k] / trials as f64;
        // Each draw is x/(1−p) with probability 1−p, else 0.
        let sd = (x.abs() / (1.0 - p)) * (p * (1.0 - p)).sqrt() / (trials as f64).sqrt();
        assert!((mean - x).abs() < 3.0 * sd, "entry {i}: mean {mean} vs {x} (σ {sd})");
    }
}

#[test]
fn ties_with_one_vector_and_full_keep_is_ta() {
    let (pre, t) = taus(&ToyArchSpec::TOY, 1, 9);
    for mode in [TiesTrim::Global, TiesTrim::PerTensor] {
        let ties = merge_ties_with(&pre, &t, 1.0, 0.3, mode).unwrap();
        assert_eq!(ties.tensors(), merge_ta(&pre, &t, 0.3).unwrap().tensors());
    }
}

#[test]
fn ties_trim_keeps_the_requested_count() {
    let (pre, t) = taus(&ToyArchSpec::TINY, 1, 4);
    let n = t[0].numel();
    let m = merge_ties(&pre, &t, 0.2, 1.0).unwrap();
    let kept: usize = m
        .tensors()
        .iter()
        .map(|(name, x)| x.data().iter().zip(pre.get(name).data()).filter(|(a, b)| a != b).count())
        .sum();
    assert_eq!(kept, (0.2 * n as f64).round() as usize);
}

#[test]
fn layerwise_reductions() {
    let arch = ToyArchSpec::TOY;
    let (pre, t) = taus(&arch, 3, 2);
    let uniform = |c: f64| -> LayerCoeffs {
        (0..3).map(|i| (i, (0..=arch.n_layers).map(|l| (l, c)).collect())).collect()
    };
    let lw = merge_layerwise(&pre, &t, &uniform(0.3)).unwrap();
    assert!(close(&lw, &merge_ta(&pre, &t, 0.3).unwrap(), 1e-14));
    assert_eq!(merge_layerwise(&pre, &t, &uniform(0.0)).unwrap().tensors(), pre.tensors());

    // Random table: each layer slot must equal a TA merge of that slot alone.
    let mut r = mergeguard::rng::stream(8, &[]);
    use rand::Rng;
    let coeffs: LayerCoeffs = (0..3)
        .map(|i| (i, (0..=arch.n_layers).map(|l| (l, r.random_range(-1.0..1.0))).collect()))
        .collect();
    let lw = merge_layerwise(&pre, &t, &coeffs).unwrap();
    for (name, got) in lw.tensors() {
        let l = arch.layer_of(name);
        let want = t.iter().enumerate().fold(pre.get(name).clone(), |acc, (i, tau)| {
            acc.add(&tau.deltas[name].scale(coeffs[&i][&l]).unwrap()).unwrap()
        });
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14, "{name}");
    }
}

#[test]
fn scaled_adapters_merge_like_plain_ones() {
    let arch = ToyArchSpec::TINY;
    let base = random_checkpoint(&arch, 1);
    let src = random_checkpoint(&arch, 2);
    let adapters: Vec<LowRankAdapter<f64>> = (0..3)
        .map(|i| LowRankAdapter {
            b: Tensor::from_fn(&[16, 2], |k| src.get("embed.w").data()[k + 32 * i]),
            a: Tensor::from_fn(&[2, 16], |k| src.get("block.1.attn.wk").data()[k + 32 * i]),
            target: ["block.0.attn.wq", "block.0.attn.wq", "block.1.attn.wo"][i].into(),
        })
        .collect();
    let scaled: Vec<_> = adapters
        .iter()
        .enumerate()
        .map(|(i, a)| protect_lowrank(a, ScaleRange::DEFAULT, i as u64).unwrap())
        .collect();
    let m1 = merge_lowrank(&base, &adapters, 0.8).unwrap();
    let m2 = merge_lowrank(&base, &scaled, 0.8).unwrap();
    assert!(close(&m1, &m2, 1e-12));
    for (name, t) in m1.tensors() {
        if !name.starts_with("block.0.attn.wq") && name != "block.1.attn.wo" {
            assert_eq!(t, base.get(name));
        }
    }
}

#[test]
fn merges_are_deterministic_under_config() {
    let arch = ToyArchSpec::TINY;
    let pre = random_checkpoint(&arch, 1);
    let models = [random_checkpoint(&arch, 2), random_checkpoint(&arch, 3)];
    let mut cfg = MergeConfig::new(MergeMethod::Ties, 0.3);
    cfg.dare = Some(DareSpec { p: 0.5, seed: 4 });
    let a = merge(&pre, &models, &cfg).unwrap();
    let b = merge(&pre, &models, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.dare = Some(DareSpec { p: 0.5, seed: 5 });
    assert_ne!(a.tensors(), merge(&pre, &models, &cfg).unwrap().tensors());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dare_zero_rate_is_identity(seed in any::<u64>()) {
        let (_, t) = taus(&ToyArchSpec::TINY, 1, seed % 1000);
        prop_assert_eq!(&dare_transform(&t[0], 0.0, seed).unwrap(), &t[0]);
    }
}
