use gcmcf::counterfactual::{counterfactual_grid, CounterfactualEntry, CounterfactualSet};
use gcmcf::data::{generate_synthetic_world, make_split, DatasetBundle, SynthWorldConfig};
use gcmcf::inference::{calibrated_probs, osr_binary, two_stage_zsl_logits, zsl_binary, Side, Vocabulary};
use gcmcf::metrics::{ausuc, cvb, harmonic_mean, macro_f1_unknown, openness, SucPoint};
use gcmcf::oracle::{disentanglement_residual, OracleModel, SetAttribute};
use gcmcf::tensor::Mat;
use gcmcf::training::{contrastive_loss, kl_divergence};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn harmonic_mean_bounds(u in unit(), s in unit()) {
        let h = harmonic_mean(u, s).unwrap();
        prop_assert!(h <= 2.0 * u.min(s) + 1e-15);
        prop_assert!(h <= 0.5 * (u + s) + 1e-15);
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h, harmonic_mean(s, u).unwrap());
    }

    #[test]
    fn cvb_is_zero_only_when_balanced(s in 0.01..=1.0f64, u in 0.01..=1.0f64) {
        let c = cvb(s, u).unwrap();
        prop_assert!(c >= 0.0);
        prop_assert_eq!(c == 0.0, s == u);
        prop_assert_eq!(cvb(s, s).unwrap(), 0.0);
    }

    #[test]
    fn ausuc_ignores_order_and_duplicates(
        mut pts in prop::collection::vec((unit(), unit()), 2..12),
        dup in 0usize..12,
        seed in any::<u64>(),
    ) {
        let curve = |p: &[(f64, f64)]| p.iter().map(|&(u, s)| SucPoint { omega: 0.0, u, s }).collect::<Vec<_>>();
        let base = ausuc(&curve(&pts)).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let d = pts[dup % pts.len()];
        pts.push(d);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(pts.as_mut_slice(), &mut rng);
        prop_assert_eq!(ausuc(&curve(&pts)).unwrap(), base);
    }

    #[test]
    fn macro_f1_ignores_order_and_relabelling(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..40),
        seed in any::<u64>(),
    ) {
        // Classes 0..3 are seen; 3 stands for an unseen class.
        let seen = [0u32, 1, 2];
        let lift = |c: u32| (c < 3).then_some(c);
        let preds: Vec<Option<u32>> = pairs.iter().map(|p| lift(p.0)).collect();
        let labels: Vec<Option<u32>> = pairs.iter().map(|p| lift(p.1)).collect();
        let f = macro_f1_unknown(&preds, &labels, &seen).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));

        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let shuffled_p: Vec<_> = idx.iter().map(|&i| preds[i]).collect();
        let shuffled_l: Vec<_> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(macro_f1_unknown(&shuffled_p, &shuffled_l, &seen).unwrap(), f);

        let relabel = |o: Option<u32>| o.map(|c| [20u32, 7, 11][c as usize]);
        let rp: Vec<_> = preds.iter().map(|&p| relabel(p)).collect();
        let rl: Vec<_> = labels.iter().map(|&l| relabel(l)).collect();
        prop_assert!((macro_f1_unknown(&rp, &rl, &[11, 20, 7]).unwrap() - f).abs() < 1e-12);
    }

    #[test]
    fn openness_increases_with_test_classes(n in 1usize..50, m in 1usize..200) {
        prop_assert!(openness(n, n + m + 1).unwrap() > openness(n, n + m).unwrap());
        prop_assert_eq!(openness(n, n).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mean in prop::collection::vec(-3.0..3.0f64, 1..6),
        log_std in prop::collection::vec(-1.5..1.5f64, 6),
    ) {
        let std: Vec<f64> = log_std[..mean.len()].iter().map(|l| l.exp()).collect();
        let kl = kl_divergence(&mean, &std);
        prop_assert!(kl >= 0.0);
        let at_prior = mean.iter().all(|m| *m == 0.0) && std.iter().all(|s| *s == 1.0);
        prop_assert_eq!(kl == 0.0, at_prior);
        prop_assert_eq!(kl_divergence(&vec![0.0; mean.len()], &vec![1.0; mean.len()]), 0.0);
    }

    #[test]
    fn contrastive_loss_falls_with_the_positive_distance(
        pos in 0.0..10.0f64,
        shrink in 0.01..1.0f64,
        negs in prop::collection::vec(0.0..10.0f64, 1..8),
    ) {
        let before = contrastive_loss(pos, &negs).unwrap();
        let after = contrastive_loss(pos - shrink, &negs).unwrap();
        prop_assert!(after < before);
        prop_assert!(before > 0.0);
    }

    #[test]
    fn zsl_rule_ignores_probabilities_outside_the_top_k(
        raw in prop::collection::vec(0.01..1.0f64, 7),
        k in 1usize..=2,
        share in 0.0..1.0f64,
    ) {
        let v = Vocabulary::new(vec![0, 1, 2, 3], vec![4, 5, 6]).unwrap();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let base = zsl_binary(&probs, &v, k).unwrap();
        // Entries below the K-th largest of their side, with that K-th value.
        let mut outside = Vec::new();
        for (lo, hi) in [(0usize, 4usize), (4, 7)] {
            let mut order: Vec<usize> = (lo..hi).collect();
            order.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]));
            let kth = probs[order[k - 1]];
            outside.extend(order[k..].iter().map(|&i| (i, kth)));
        }
        prop_assume!(outside.len() >= 2);
        // Move mass between two such entries without lifting either into a top-K.
        let ((from, _), (to, cap)) = (outside[0], outside[outside.len() - 1]);
        let delta = (share * probs[from]).min(cap - probs[to]).max(0.0);
        let mut p = probs.clone();
        p[from] -= delta;
        p[to] += delta;
        prop_assert_eq!(zsl_binary(&p, &v, k).unwrap().label, base.label);
    }

    #[test]
    fn osr_rule_is_monotone_in_tau(d in 0.0..5.0f64, t1 in 0.0..5.0f64, t2 in 0.0..5.0f64) {
        let set = CounterfactualSet { entries: vec![CounterfactualEntry { target: 0, x_tilde: vec![0.0], distance: d }] };
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        if osr_binary(&set, lo).unwrap().label == Side::Seen {
            prop_assert_eq!(osr_binary(&set, hi).unwrap().label, Side::Seen);
        }
    }

    #[test]
    fn unseen_margin_grows_with_calibration(
        logits in prop::collection::vec(-6.0..6.0f64, 5),
        w1 in -8.0..8.0f64,
        w2 in -8.0..8.0f64,
    ) {
        let v = Vocabulary::new(vec![0, 1, 2], vec![3, 4]).unwrap();
        let margin = |w: f64| {
            let p = calibrated_probs(&logits, 3, w);
            match zsl_binary(&p, &v, 1).unwrap().detail {
                gcmcf::inference::DecisionDetail::TopK { s_k, u_k, .. } => u_k - s_k,
                _ => unreachable!(),
            }
        };
        let (lo, hi) = (w1.min(w2), w1.max(w2));
        prop_assert!(margin(hi) >= margin(lo) - 1e-12);
        let m = Mat::row(&logits);
        let unseen = |w: f64| two_stage_zsl_logits(&m, &v, 1, w).unwrap()[0].binary.label == Side::Unseen;
        prop_assert!(!unseen(lo) || unseen(hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bundles_round_trip_and_never_leak(seed in any::<u64>(), frac in 0.2..0.9f64) {
        let cfg = SynthWorldConfig { samples_per_class: 12, seed, train_fraction: frac, ..Default::default() };
        let (bundle, world) = generate_synthetic_world(&cfg).unwrap();
        prop_assert!(bundle.split.train_idx.iter().all(|&i| bundle.split.is_seen(bundle.labels[i])));
        let back = DatasetBundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &bundle);

        let split = make_split(&bundle.labels, &bundle.split.seen_class_ids, &bundle.split.unseen_class_ids, frac, seed ^ 1).unwrap();
        prop_assert!(split.train_idx.iter().all(|&i| split.is_seen(bundle.labels[i])));

        // Intervening on the true attribute reproduces the sample exactly.
        let own: Vec<usize> = (0..bundle.num_samples()).filter(|&i| bundle.labels[i] == 0).collect();
        let oracle = OracleModel { world: &world };
        let x = bundle.features.select_rows(&own);
        let cf = counterfactual_grid(&oracle, &x, &bundle.attribute_table(&[0])).unwrap();
        let err = cf.zip_map(&x, |a, b| (a - b).abs()).as_slice().iter().fold(0.0f64, |m, v| m.max(*v));
        prop_assert!(err < 1e-5, "max deviation {}", err);
        let r = disentanglement_residual(&oracle, &world, &SetAttribute(bundle.attribute(1).to_vec()), &own).unwrap();
        prop_assert!((0.0..1e-6).contains(&r));
    }

    #[test]
    fn bundle_validation_rejects_non_finite_features(row in 0usize..60, col in 0usize..16, bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        let (mut bundle, _) = generate_synthetic_world(&SynthWorldConfig { samples_per_class: 6, ..Default::default() }).unwrap();
        bundle.features.set(row, col, bad);
        prop_assert!(bundle.validate().is_err());
    }
}
