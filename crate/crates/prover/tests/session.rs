use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use zkstar_core::commitments::chain_check;
use zkstar_core::model::StateSpaceModel;
use zkstar_core::wire::{ProofKind, Sample, SessionConfig};
use zkstar_prover::{ProverError, ProverSession, BUILTIN_REFERENCE};

fn config(w: usize, d: usize) -> SessionConfig {
    let mut c = SessionConfig::new(BUILTIN_REFERENCE, w, d, 12);
    c.nonce_seed = Some(11);
    c
}

fn stream(n: usize, seed: u64) -> Vec<Sample> {
    let model = StateSpaceModel::reference_nonlinear();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    model
        .simulate(&DVector::zeros(4), None, n, &mut rng)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(t, (_, y))| Sample { t: t as u64, y: y.iter().copied().collect(), u: None })
        .collect()
}

#[test]
fn open_publishes_two_keys_and_ucl() {
    let s = ProverSession::open(config(2, 4)).unwrap();
    let k = s.keys();
    assert_ne!(k.vk_tc.vk, k.vk_sc.vk);
    assert!(k.vk_tc.is_well_formed() && k.vk_sc.is_well_formed());
    assert_eq!(k.genesis.len(), 5);

    let mut c = config(2, 4);
    c.dof = Some(1);
    let s = ProverSession::open(c).unwrap();
    assert!((s.t_ucl() - 3.841).abs() < 1e-3);

    for alpha in [0.0, 1.0, -0.2, 1.5] {
        let mut c = config(2, 4);
        c.ucl_alpha = alpha;
        assert!(matches!(ProverSession::open(c), Err(ProverError::Config(_))));
    }
    let mut c = config(2, 4);
    c.model_file = Some("/nonexistent/weights.json".into());
    assert!(matches!(ProverSession::open(c), Err(ProverError::Model(_))));
}

#[test]
fn window_closes_after_w_times_d_samples() {
    let mut s = ProverSession::open(config(2, 4)).unwrap();
    let data = stream(8, 1);
    let ack = s.ingest(&data[..7]).unwrap();
    assert!(ack.closed_windows.is_empty());
    assert!(matches!(s.summary(0), Err(ProverError::WindowOpen(0))));
    let ack = s.ingest(&data[7..]).unwrap();
    assert_eq!(ack.closed_windows, vec![0]);
    let w = s.window(0).unwrap();
    assert_eq!(w.intervals.len(), 2);
    assert_eq!((w.first_t, w.last_t), (0, 7));
    assert_eq!(w.intervals[1].first_t, 4);
    assert_eq!(w.summary().intervals[0].steps.len(), 5 * 4);
}

#[test]
fn out_of_order_sample_leaves_ledger_unchanged() {
    let mut s = ProverSession::open(config(2, 4)).unwrap();
    let data = stream(12, 2);
    s.ingest(&data[..8]).unwrap();
    let before = s.ledger_dump();
    let mut batch = data[8..12].to_vec();
    batch[2].t = 42;
    assert!(matches!(s.ingest(&batch), Err(ProverError::Sample(_))));
    assert!(matches!(s.ingest(&data[3..5]), Err(ProverError::Sample(_))));
    let mut bad = data[8].clone();
    bad.y.pop();
    assert!(s.ingest(&[bad]).is_err());
    assert_eq!(s.ledger_dump(), before);
    // The stream continues where it left off.
    assert_eq!(s.ingest(&data[8..]).unwrap().next_t, 12);
}

#[test]
fn closed_windows_chain() {
    let mut s = ProverSession::open(config(3, 4)).unwrap();
    s.ingest(&stream(48, 3)).unwrap();
    let genesis = s.genesis_digests();
    let mut carried = genesis[..2].to_vec();
    for w in 0..4 {
        let r = s.window(w).unwrap();
        for pair in r.intervals.windows(2) {
            let out = pair[0].witness.output.public_commitments();
            let inp = pair[1].witness.prev.public_commitments();
            assert!(chain_check(&out, &inp).unwrap());
        }
        let first = r.summary().intervals[0].inputs.clone();
        assert_eq!(first[..2], carried[..]);
        carried = r.summary().intervals.last().unwrap().outputs[..2].to_vec();
    }
}

#[test]
fn proofs_are_lazy_cached_and_shaped() {
    let mut s = ProverSession::open(config(3, 4)).unwrap();
    s.ingest(&stream(24, 4)).unwrap();
    let fresh = s.metrics();
    assert!(fresh.proofs.is_empty());
    assert!(s.retained().all(|r| r.proofs_held() == 0));

    let a = s.handle_proof_request(0, ProofKind::FullWindow).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a.iter().filter(|x| x.interval.is_some()).count(), 3);
    let b = s.handle_proof_request(0, ProofKind::FullWindow).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(s.handle_proof_request(0, ProofKind::TcInterval { interval: 1 }).unwrap()[0], a[1]);
    assert!(matches!(s.handle_proof_request(0, ProofKind::TcInterval { interval: 3 }), Err(ProverError::UnknownInterval { .. })));
    assert!(matches!(s.handle_proof_request(2, ProofKind::Sc), Err(ProverError::WindowOpen(2))));
    assert!(matches!(s.handle_proof_request(9, ProofKind::Sc), Err(ProverError::UnknownWindow(9))));
    assert_eq!(s.window(1).unwrap().proofs_held(), 0);

    let m = s.metrics();
    assert_eq!(m.proofs.len(), 3 + 1);
    assert!(m.proofs.iter().all(|p| p.proof_bytes > 0 && p.prove_ms >= 0.0));
    assert!(m.witnesses.iter().all(|w| w.witness_bytes > 0));
    assert!(m.vk_tc_bytes > 0 && m.pk_tc_bytes > 0 && m.vk_sc_bytes > 0 && m.pk_sc_bytes > 0);
    assert_eq!(m.windows.len(), 2);
}

#[test]
fn retention_expires_old_windows() {
    let mut c = config(1, 4);
    c.retention = 2;
    let mut s = ProverSession::open(c).unwrap();
    s.ingest(&stream(16, 5)).unwrap();
    assert_eq!(s.closed_windows(), 4);
    assert!(matches!(s.summary(1), Err(ProverError::Expired(1))));
    assert!(matches!(s.handle_proof_request(0, ProofKind::FullWindow), Err(ProverError::Expired(0))));
    assert!(s.summary(2).is_ok() && s.summary(3).is_ok());
}

#[test]
fn seeded_sessions_are_reproducible() {
    let run = || {
        let mut s = ProverSession::open(config(2, 4)).unwrap();
        s.ingest(&stream(16, 6)).unwrap();
        serde_json::to_string(&s.handle_proof_request(1, ProofKind::FullWindow).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn clean_stream_rarely_alarms() {
    let mut s = ProverSession::open(config(16, 4)).unwrap();
    s.ingest(&stream(100 * 64, 8)).unwrap();
    let alarms = s.retained().filter(|r| r.summary().rho).count();
    assert_eq!(s.closed_windows(), 100);
    assert!(alarms <= 5, "{alarms} alarms in 100 clean windows");
    assert!(s.retained().all(|r| r.sc.output.eta && r.sc.output.kappa));
}
