mod common;

use common::*;
use rand::Rng;
use vfl_core::defenses::Defense;
use vfl_core::numerics::{Mlp, Tensor};
use vfl_core::protocol::{ActiveParty, OpaqueVec, PassiveParty, Provenance, Ttp, VflSession};

struct Setup {
    session: VflSession,
    models: Vec<Mlp>,
    views: Vec<Tensor>,
    labels: Vec<usize>,
}

fn setup(parties: usize, n: usize, batch: usize, lr: f64, seed: u64) -> Setup {
    let mut r = rng(seed);
    let c = 4;
    let dims: Vec<usize> = (0..parties).map(|_| r.random_range(2..6)).collect();
    let views: Vec<Tensor> = dims.iter().map(|&d| random_tensor(n, d, &mut r)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let models: Vec<Mlp> = dims.iter().map(|&d| Mlp::two_layer(d, 6, c, &mut r)).collect();
    let passives = (0..parties - 1)
        .map(|k| PassiveParty::new(models[k].clone(), views[k].clone()))
        .collect();
    let active = ActiveParty::new(
        models[parties - 1].clone(),
        views[parties - 1].clone(),
        labels.clone(),
        c,
        Defense::None,
        seed,
    );
    let session = VflSession::new(passives, active, lr, batch, seed).unwrap();
    Setup {
        session,
        models,
        views,
        labels,
    }
}

#[test]
fn vfl_training_equals_centralized_training() {
    for (parties, seed) in [(2, 1), (3, 2), (4, 3)] {
        let mut s = setup(parties, 90, 8, 0.1, seed);
        let mut central = s.models.clone();
        for _ in 0..3 {
            for batch in s.session.epoch_plan() {
                let report = s.session.round(&batch).unwrap();
                let loss = central_step(&mut central, &s.views, &s.labels, &batch, 0.1);
                assert!((report.loss - loss).abs() < 1e-9);
            }
        }
        for (k, m) in central.iter().enumerate() {
            let d = max_abs_diff(&s.session.model(k).flatten(), &m.flatten());
            assert!(d <= 1e-9, "{parties} parties, party {k}: divergence {d:e}");
        }
    }
}

#[test]
fn every_decryption_is_an_own_batch_aggregate() {
    let mut s = setup(3, 40, 5, 0.05, 9);
    s.session.train_epoch(Some(4)).unwrap();
    let log = s.session.audit_log();
    assert_eq!(log.len(), 4 * 3);
    for rec in log {
        match rec.tag {
            Provenance::Aggregate { origin, count } => {
                assert_eq!(origin, rec.requester);
                assert_eq!(count, 5);
            }
            other => panic!("decrypted {other:?}"),
        }
    }
    let requesters: Vec<usize> = log[..3].iter().map(|r| r.requester).collect();
    assert_eq!(requesters, vec![0, 1, 2]);
}

#[test]
fn ttp_refuses_per_sample_and_foreign_values() {
    let mut ttp = Ttp::new();
    ttp.begin_round(0, 2);
    let a = OpaqueVec::encrypt(&[1.0, 2.0], 0, 3);
    let b = OpaqueVec::encrypt(&[3.0, 4.0], 0, 4);
    assert!(ttp.decrypt(0, a.clone()).is_err());
    assert!(ttp.decrypt(0, a.scale(2.0).add(&b).unwrap()).is_err());
    let mean = OpaqueVec::batch_mean(&[a.clone(), b], 0).unwrap();
    assert!(ttp.decrypt(1, mean.clone()).is_err());
    assert_eq!(ttp.decrypt(0, mean).unwrap(), vec![2.0, 3.0]);
    let single = OpaqueVec::batch_mean(&[a], 0).unwrap();
    assert!(ttp.decrypt(0, single).is_err(), "count must match the round's batch");
    assert_eq!(ttp.audit_log().len(), 1);
}

#[test]
fn batch_mean_rejects_repeated_samples() {
    let a = OpaqueVec::encrypt(&[1.0], 0, 3);
    assert!(OpaqueVec::batch_mean(&[a.clone(), a], 0).is_err());
}

#[test]
fn sessions_with_equal_seeds_are_identical() {
    let mut a = setup(2, 50, 7, 0.1, 4);
    let mut b = setup(2, 50, 7, 0.1, 4);
    a.session.train_epoch(None).unwrap();
    b.session.train_epoch(None).unwrap();
    for k in 0..2 {
        assert_eq!(a.session.model(k).flatten(), b.session.model(k).flatten());
    }
}
