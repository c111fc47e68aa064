use fedmesh::algorithms::{contrastive_kl, fedavg_aggregate, fedprox_objective, gcml_merge, MergeMode, PredictionBatch, SiteUpdate};
use fedmesh::data::{generate_federation, FederationLayout};
use fedmesh::orchestration::dropout::DropoutState;
use fedmesh::orchestration::pairing::pair_active_sites;
use fedmesh::orchestration::DropoutMode;
use fedmesh::params::{axpy, decode_params, encode_params, weighted_mean, ParameterVector};
use fedmesh::stats::anova_one_way;
use fedmesh::training::{loss_and_grad, train_rounds, LabeledDataset, Labels, TrainerSpec};
use fedmesh::wire::{decode_message, encode_message, WireMessage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(-5e-324),
        Just(f64::MAX),
        Just(f64::MIN),
    ]
}

fn vectors(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-100.0..100.0f64, dim), 1..=n)
}

fn pv(v: &[f64]) -> ParameterVector {
    ParameterVector::new(v.to_vec())
}

proptest! {
    #[test]
    fn weighted_mean_ignores_uniform_weight_scaling(
        rows in (1usize..12).prop_flat_map(|d| vectors(6, d)),
        seed_weights in prop::collection::vec(0.1..10.0f64, 6),
        scale in 0.01..100.0f64,
    ) {
        let vs: Vec<ParameterVector> = rows.iter().map(|r| pv(r)).collect();
        let a: Vec<_> = vs.iter().zip(&seed_weights).map(|(v, w)| (v, *w)).collect();
        let b: Vec<_> = vs.iter().zip(&seed_weights).map(|(v, w)| (v, *w * scale)).collect();
        let (ma, mb) = (weighted_mean(&a).unwrap(), weighted_mean(&b).unwrap());
        for (x, y) in ma.iter().zip(mb.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for k in 0..ma.dim() {
            let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= ma.as_slice()[k] && ma.as_slice()[k] <= hi);
        }
    }

    #[test]
    fn params_round_trip_bit_exactly(values in prop::collection::vec(finite(), 0..50)) {
        let v = pv(&values);
        let back = decode_params(&encode_params(&v)).unwrap();
        prop_assert!(back.bit_eq(&v));
    }

    #[test]
    fn fedavg_is_the_case_weighted_mean(
        rows in (1usize..10).prop_flat_map(|d| vectors(8, d)),
        counts in prop::collection::vec(1u64..500, 8),
    ) {
        let updates: Vec<SiteUpdate> = rows
            .iter()
            .zip(&counts)
            .enumerate()
            .map(|(i, (r, &m))| SiteUpdate { site_id: i as u64, case_count: m, params: pv(r) })
            .collect();
        let entries: Vec<_> = updates.iter().map(|u| (&u.params, u.case_count as f64)).collect();
        let want = weighted_mean(&entries).unwrap();
        let got = fedavg_aggregate(&updates).unwrap();
        for (x, y) in got.iter().zip(want.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn fedprox_with_zero_mu_is_the_base_objective(
        loss in -10.0..10.0f64,
        g in prop::collection::vec(-5.0..5.0f64, 6),
        w in prop::collection::vec(-5.0..5.0f64, 6),
        wg in prop::collection::vec(-5.0..5.0f64, 6),
    ) {
        let (l, grad) = fedprox_objective(loss, &pv(&g), &pv(&w), &pv(&wg), 0.0).unwrap();
        prop_assert_eq!(l.to_bits(), loss.to_bits());
        prop_assert!(grad.bit_eq(&pv(&g)));
    }

    #[test]
    fn contrastive_kl_is_bounded_by_the_cap(
        logits in prop::collection::vec(-30.0..30.0f64, 24),
        labels in prop::collection::vec(0usize..3, 4),
        cap in 0.01..20.0f64,
    ) {
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p: Vec<f64> = logits[..12].chunks(3).flat_map(softmax).collect();
        let q: Vec<f64> = logits[12..].chunks(3).flat_map(softmax).collect();
        let pb = PredictionBatch::new(3, p, labels.clone(), vec![true; 4]).unwrap();
        let qb = PredictionBatch::new(3, q, labels, vec![true; 4]).unwrap();
        let v = contrastive_kl(&pb, &qb, cap).unwrap();
        prop_assert!(v.abs() <= cap + 1e-12);
    }

    #[test]
    fn merge_stays_on_the_segment(
        wr in prop::collection::vec(-50.0..50.0f64, 1..20),
        seed in any::<u64>(),
        vr in 1e-6..10.0f64,
        vs in 1e-6..10.0f64,
        inverse in any::<bool>(),
    ) {
        let ws: Vec<f64> = wr.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 64)) & 1) as f64 - 3.0).collect();
        let mode = if inverse { MergeMode::Inverse } else { MergeMode::Paper };
        let m = gcml_merge(&pv(&wr), &pv(&ws), vr, vs, mode).unwrap();
        for k in 0..wr.len() {
            let x = m.as_slice()[k];
            prop_assert!(wr[k].min(ws[k]) <= x && x <= wr[k].max(ws[k]));
        }
    }

    #[test]
    fn dropout_chain_stays_in_bounds(n_total in 1usize..12, n_max_raw in 0usize..12, seed in any::<u64>()) {
        let n_max = n_max_raw % n_total;
        let mut s = DropoutState::new((0..n_total as u64).collect(), n_max, DropoutMode::Shutdown);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            s.advance(&mut rng);
            prop_assert!(s.n_current() >= n_total - n_max && s.n_current() <= n_total);
            if n_max == 0 {
                prop_assert_eq!(s.active().len(), n_total);
            }
        }
    }

    #[test]
    fn pairing_is_a_partial_matching(active in prop::collection::btree_set(0u64..64, 0..20), seed in any::<u64>()) {
        let active: Vec<u64> = active.into_iter().collect();
        let p = pair_active_sites(&active, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen: Vec<u64> = p.pairs.iter().flat_map(|&(a, b)| [a, b]).chain(p.idle.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, active.clone());
        prop_assert_eq!(p.pairs.len(), active.len() / 2);
    }

    #[test]
    fn wire_encoding_is_canonical(round in any::<u64>(), values in prop::collection::vec(finite(), 0..30)) {
        let m = WireMessage::GlobalModel { round, params: pv(&values) };
        let bytes = encode_message(&m).unwrap();
        let back = decode_message(&bytes).unwrap();
        prop_assert_eq!(encode_message(&back).unwrap(), bytes);
    }

    #[test]
    fn quantity_totals_and_shared_test_set(counts in prop::collection::vec(3usize..30, 2..6), seed in any::<u64>()) {
        let vals: Vec<usize> = counts.iter().map(|c| c / 3 + 1).collect();
        let layout = FederationLayout::quantity(counts.clone(), vals, 20, seed);
        let a = generate_federation(&layout).unwrap();
        let b = generate_federation(&layout).unwrap();
        prop_assert_eq!(a.sites.iter().map(|s| s.train.len()).sum::<usize>(), counts.iter().sum::<usize>());
        let (pa, pb) = (a.pooled_train().unwrap(), b.pooled_train().unwrap());
        prop_assert_eq!(pa.features(), pb.features());
        prop_assert_eq!(a.test.features(), b.test.features());
    }

    #[test]
    fn anova_matches_brute_force(groups in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 2..8), 2..6)) {
        let a = anova_one_way(&groups).unwrap();
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        let grand = all.iter().sum::<f64>() / all.len() as f64;
        let (mut ssb, mut ssw) = (0.0, 0.0);
        for g in &groups {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            ssb += g.len() as f64 * (m - grand).powi(2);
            ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        }
        let f = (ssb / (groups.len() - 1) as f64) / (ssw / (all.len() - groups.len()) as f64);
        prop_assert!((a.f - f).abs() <= 1e-10 * f.max(1.0));
        prop_assert!((0.0..=1.0).contains(&a.p));
    }

    #[test]
    fn training_is_deterministic(seed in any::<u64>(), batch in prop::option::of(1usize..8)) {
        let mut spec = TrainerSpec::classifier(3, 2, 0.1);
        spec.seed = seed;
        spec.batch_size = batch;
        spec.epochs_per_round = 3;
        let x: Vec<f64> = (0..30).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 5.0 - 1.0).collect();
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let data = LabeledDataset::new(3, x, Labels::Classes(y)).unwrap();
        let w = ParameterVector::zeros(spec.param_dim());
        let a = train_rounds(&spec, &w, &data, 0.0, None, 9).unwrap();
        let b = train_rounds(&spec, &w, &data, 0.0, None, 9).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}

#[test]
fn dim_zero_vectors_pass_through() {
    let z = ParameterVector::zeros(0);
    assert_eq!(axpy(2.0, &z, &z).unwrap().dim(), 0);
    assert_eq!(weighted_mean(&[(&z, 1.0), (&z, 3.0)]).unwrap().dim(), 0);
}

#[test]
fn gradient_descent_decreases_convex_regression_loss() {
    let spec = TrainerSpec::regression(3, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng;
    let x: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let data = LabeledDataset::new(3, x, Labels::Targets(t)).unwrap();
    let mut w = ParameterVector::zeros(spec.param_dim());
    let mut last = loss_and_grad(&spec, &w, &data).unwrap().0;
    for _ in 0..200 {
        w = train_rounds(&spec, &w, &data, 0.0, None, 0).unwrap();
        let l = loss_and_grad(&spec, &w, &data).unwrap().0;
        assert!(l < last);
        last = l;
    }
}
