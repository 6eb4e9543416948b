//! Property tests over the public API.

use proptest::prelude::*;

use moe_core::data::{generate, read_corpus, split, write_corpus, SynthConfig};
use moe_core::layers::{Parameters, Router};
use moe_core::losses::{ctc_loss_from_logits, greedy_decode, min_frames};
use moe_core::model::build_model;
use moe_core::parallel::{check_partition, make_shards, partition_experts, step_parallel};
use moe_core::{AuxScope, Model, ModelConfig, RouterVariant, Tensor};

fn small_config(seed: u64, n_experts: usize, variant: RouterVariant) -> ModelConfig {
    ModelConfig {
        n_moe_layers: 2,
        n_memory_layers: 2,
        attention_every: 1,
        n_experts,
        d_feat: 5,
        d_model: 6,
        expert_hidden: 6,
        memory_order: 1,
        d_att: 4,
        d_c: 5,
        d_a: 2,
        d_d: 2,
        embed_memory_layers: 1,
        router: variant,
        vocab: 3,
        n_domains: 3,
        n_accents: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn corpus_for(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<moe_core::data::Utterance> {
    let mut s = SynthConfig {
        t_min: 5,
        t_max: 10,
        max_labels: 3,
        seed,
        ..SynthConfig::default()
    };
    s.align_with(cfg);
    generate(&s, n).unwrap()
}

fn logits_and_labels() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (1usize..5, 1usize..8).prop_flat_map(|(v, t)| {
        (
            prop::collection::vec(-4.0f64..4.0, t * (v + 1)),
            prop::collection::vec(0..v, 0..=t.min(3)),
        )
            .prop_filter_map("feasible", move |(data, labels)| {
                (min_frames(&labels) <= t).then(|| (Tensor::matrix(t, v + 1, data).unwrap(), labels))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ctc_is_a_nonnegative_loss_with_zero_sum_logit_rows((logits, labels) in logits_and_labels()) {
        let out = ctc_loss_from_logits(&logits, &labels).unwrap();
        prop_assert!(out.loss >= -1e-12);
        for t in 0..out.grad.rows() {
            let s: f64 = out.grad.row(t).iter().sum();
            prop_assert!(s.abs() < 1e-9, "row {} sums to {}", t, s);
        }
    }

    #[test]
    fn router_output_is_a_distribution_and_picks_its_mode(
        seed in any::<u64>(),
        n in 1usize..9,
        input in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r: Router = Router::init(&mut rng, 6, n, RouterVariant::Moe1);
        let d = r.decide(&input).unwrap();
        let p = d.probs.data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(d.gate, p[d.selected]);
        prop_assert!(p.iter().all(|&x| x <= d.gate));
        prop_assert!(p[..d.selected].iter().all(|&x| x < d.gate));
    }

    #[test]
    fn expert_partitions_are_balanced_and_exact(n in 0usize..40, w in 1usize..9) {
        let ranges = partition_experts(n, w).unwrap();
        check_partition(&ranges, n).unwrap();
        let sizes: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert!(sizes.windows(2).all(|s| s[0] >= s[1]));
    }

    #[test]
    fn corpus_bytes_round_trip(seed in any::<u64>(), n in 1usize..12) {
        let cfg = small_config(1, 2, RouterVariant::Moe2);
        let corpus = corpus_for(&cfg, n, seed);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &corpus);
        let mut again = Vec::new();
        write_corpus(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn split_partitions_the_corpus(seed in any::<u64>(), pct in 0u64..=100) {
        let corpus = corpus_for(&small_config(1, 2, RouterVariant::Moe1), 40, seed);
        let (train, test) = split(&corpus, pct);
        prop_assert_eq!(train.len() + test.len(), corpus.len());
        let (train2, test2) = split(&corpus, pct);
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&test, &test2);
        if pct == 0 { prop_assert!(test2.is_empty()); }
        if pct == 100 { prop_assert!(train2.is_empty()); }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_posteriors_are_normalized(seed in 0u64..1000, n in 1usize..5, moe2 in any::<bool>()) {
        let variant = if moe2 { RouterVariant::Moe2 } else { RouterVariant::Moe1 };
        let cfg = small_config(seed, n, variant);
        let m: Model = build_model(&cfg).unwrap();
        for u in corpus_for(&cfg, 3, seed) {
            let lp = m.infer(&u.frames).unwrap();
            prop_assert_eq!(lp.shape(), &[u.len(), cfg.vocab + 1][..]);
            for t in 0..lp.rows() {
                let z: f64 = lp.row(t).iter().map(|v| v.exp()).sum();
                prop_assert!((z - 1.0).abs() < 1e-10);
            }
            prop_assert!(greedy_decode(&lp).iter().all(|&s| s < cfg.vocab));
        }
    }

    #[test]
    fn worker_count_does_not_change_the_step(seed in 0u64..1000, workers in 2usize..5, n in 1usize..6) {
        let cfg = small_config(seed, n, RouterVariant::Moe2);
        let m: Model = build_model(&cfg).unwrap();
        let data = corpus_for(&cfg, 5, seed ^ 0x55);
        let batch: Vec<_> = data.iter().collect();
        let mut one = make_shards(&batch, n, 1).unwrap();
        let mut many = make_shards(&batch, n, workers).unwrap();
        let a = step_parallel(&mut one, &m, AuxScope::Global).unwrap();
        let b = step_parallel(&mut many, &m, AuxScope::Global).unwrap();
        prop_assert!((a.loss.total - b.loss.total).abs() < 1e-9);
        prop_assert_eq!(&a.selected, &b.selected);
        let mut ga = Vec::new();
        a.grads.visit("", &mut |_, t| ga.extend_from_slice(t.data()));
        let mut gb = Vec::new();
        b.grads.visit("", &mut |_, t| gb.extend_from_slice(t.data()));
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }
}
