use fedmesh::data::FederationLayout;
use fedmesh::orchestration::socket::run_socket_threads;
use fedmesh::orchestration::{run_in_process, Algorithm, DropoutMode, DropoutSettings, FederationConfig};
use fedmesh::training::TrainerSpec;

fn config(alg: Algorithm, n_max: usize, mode: DropoutMode) -> FederationConfig {
    let layout = FederationLayout::quantity(vec![30, 24, 18, 12, 9], vec![6, 5, 4, 3, 2], 100, 3);
    let mut trainer = TrainerSpec::classifier(10, 3, 0.1);
    trainer.batch_size = Some(8);
    trainer.epochs_per_round = 2;
    let mut c = FederationConfig::new(alg, 6, trainer, layout).with_seed(21);
    c.dropout = DropoutSettings { n_max, mode };
    c
}

fn assert_same(c: &FederationConfig) {
    let a = run_in_process(c).unwrap();
    let b = run_socket_threads(c).unwrap();
    match (&a.global_model, &b.global_model) {
        (Some(x), Some(y)) => assert!(x.bit_eq(y), "{:?}: global models differ", c.algorithm),
        (None, None) => {}
        _ => panic!("global model presence differs"),
    }
    assert_eq!(a.site_models.len(), b.site_models.len());
    for (id, p) in &a.site_models {
        assert!(p.bit_eq(&b.site_models[id]), "{:?}: site {id} differs", c.algorithm);
    }
    assert_eq!(a.final_test_loss.to_bits(), b.final_test_loss.to_bits());
}

#[test]
fn fedavg_matches_in_process() {
    assert_same(&config(Algorithm::Fedavg, 0, DropoutMode::Disconnect));
}

#[test]
fn fedprox_with_dropout_matches_in_process() {
    let mut c = config(Algorithm::Fedprox, 2, DropoutMode::Disconnect);
    c.mu = 0.05;
    assert_same(&c);
    assert_same(&config(Algorithm::Fedavg, 2, DropoutMode::Shutdown));
}

#[test]
fn gcml_matches_in_process() {
    assert_same(&config(Algorithm::Gcml, 0, DropoutMode::Disconnect));
    assert_same(&config(Algorithm::Gcml, 2, DropoutMode::Disconnect));
    assert_same(&config(Algorithm::Gcml, 1, DropoutMode::Shutdown));
}

#[test]
fn baselines_run_without_a_network_role() {
    for alg in [Algorithm::Individual, Algorithm::Pooled] {
        let c = config(alg, 0, DropoutMode::Disconnect);
        let out = run_socket_threads(&c).unwrap();
        assert!(out.server_inbox.is_empty());
        assert_eq!(out.final_test_loss.to_bits(), run_in_process(&c).unwrap().final_test_loss.to_bits());
    }
}
