use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use zkstar_core::commitments::hash;
use zkstar_core::model::StateSpaceModel;
use zkstar_core::wire::{ProofKind, Sample, SessionConfig, TamperMode};
use zkstar_prover::server::{spawn, AppState};
use zkstar_prover::{ProverSession, BUILTIN_REFERENCE};
use zkstar_regulator::{request_and_verify, Clause, ComplianceSession, UtilityClient};

const W: usize = 4;
const D: usize = 4;

/// Reference-system stream with an optional bias on sensor 0 from `attack_from` on.
fn stream(n: usize, seed: u64, attack_from: Option<u64>) -> Vec<Sample> {
    let model = StateSpaceModel::reference_nonlinear();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    model
        .simulate(&DVector::zeros(4), None, n, &mut rng)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(t, (_, y))| {
            let mut y: Vec<f64> = y.iter().copied().collect();
            if attack_from.is_some_and(|a| t as u64 >= a) {
                y[0] += 1.0;
            }
            Sample { t: t as u64, y, u: None }
        })
        .collect()
}

fn prover(tamper: Option<TamperMode>, data: &[Sample]) -> ProverSession {
    let mut c = SessionConfig::new(BUILTIN_REFERENCE, W, D, 12);
    c.nonce_seed = Some(5);
    c.tamper = tamper;
    let mut p = ProverSession::open(c).unwrap();
    p.ingest(data).unwrap();
    p
}

fn check_all(p: &ProverSession, reg: &mut ComplianceSession, audit: bool) -> Vec<zkstar_regulator::WindowVerdict> {
    (0..p.closed_windows())
        .map(|w| {
            let s = p.summary(w).unwrap();
            let a = p.handle_proof_request(w, ProofKind::FullWindow).unwrap();
            let g = audit.then(|| p.audit_grant(w).unwrap());
            let v = reg.verify_window(&s, &a, g.as_ref(), Some(&p.keys()));
            reg.record_summary(&s);
            v
        })
        .collect()
}

#[test]
fn honest_windows_are_compliant() {
    let p = prover(None, &stream(10 * W * D, 1, None));
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    for audit in [false, true] {
        let vs = check_all(&p, &mut reg, audit);
        assert!(vs.iter().all(|v| v.compliant && !v.suppression_flag), "{:?}", vs.iter().find(|v| !v.compliant));
        assert!(vs.iter().all(|v| v.audited == audit));
    }
    assert!(reg.detect_suppression(0..=100).is_empty());
}

#[test]
fn honest_attacked_window_alarms_and_stays_compliant() {
    let p = prover(None, &stream(6 * W * D, 2, Some(3 * (W * D) as u64)));
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    let vs = check_all(&p, &mut reg, true);
    assert!(vs.iter().all(|v| v.compliant));
    assert!(p.summary(3).unwrap().rho);
}

#[test]
fn stale_digest_in_summary_breaks_the_chain() {
    let p = prover(None, &stream(3 * W * D, 3, None));
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    check_all(&p, &mut reg, false);
    let mut s = p.summary(2).unwrap();
    s.intervals[1].inputs[0] = p.summary(1).unwrap().intervals[1].inputs[0];
    let a = p.handle_proof_request(2, ProofKind::FullWindow).unwrap();
    let v = reg.verify_window(&s, &a, None, None);
    assert!(!v.chain_ok && !v.compliant);
    assert!(v.clauses.contains(&Clause::HashAlignment));

    let mut s = p.summary(2).unwrap();
    s.svd[0] = hash(b"other");
    assert!(!reg.verify_window(&s, &a, None, None).compliant);
}

#[test]
fn misaddressed_or_missing_artifacts_are_not_compliant() {
    let p = prover(None, &stream(3 * W * D, 4, None));
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    check_all(&p, &mut reg, false);
    let s = p.summary(2).unwrap();
    let wrong = p.handle_proof_request(1, ProofKind::FullWindow).unwrap();
    assert!(!reg.verify_window(&s, &wrong, None, None).compliant);
    let mut a = p.handle_proof_request(2, ProofKind::FullWindow).unwrap();
    a.pop();
    let v = reg.verify_window(&s, &a, None, None);
    assert!(!v.complete && !v.compliant);
}

#[test]
fn alarm_flip_is_caught_by_audit() {
    let attack = 2 * (W * D) as u64;
    let p = prover(Some(TamperMode::AlarmFlip { from_window: 2 }), &stream(5 * W * D, 5, Some(attack)));
    let flipped: Vec<u64> = p.retained().filter(|r| r.sc_forged).map(|r| r.window).collect();
    assert!(!flipped.is_empty());
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    let plain = check_all(&p, &mut reg, false);
    assert!(flipped.iter().all(|&w| plain[w as usize].compliant), "commitment mode cannot see a forged alarm");
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    let audited = check_all(&p, &mut reg, true);
    for &w in &flipped {
        let v = &audited[w as usize];
        assert!(!v.compliant && v.suppression_flag && v.clauses.contains(&Clause::ModelReexecution));
    }
    let findings = reg.detect_suppression(0..=10);
    assert!(flipped.iter().all(|w| findings.iter().any(|f| f.window == *w && f.clause == Clause::ModelReexecution)));
}

#[test]
fn residual_zeroing_is_caught_by_audit() {
    let attack = 2 * (W * D) as u64 + 5;
    let p = prover(Some(TamperMode::ZeroResiduals { from_t: attack }), &stream(5 * W * D, 6, Some(attack)));
    let tampered: Vec<u64> = p.retained().filter(|r| r.intervals.iter().any(|i| i.forged)).map(|r| r.window).collect();
    assert_eq!(tampered, vec![2, 3, 4]);
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    let vs = check_all(&p, &mut reg, true);
    let findings = reg.detect_suppression(0..=10);
    for w in tampered {
        assert!(!vs[w as usize].compliant);
        assert!(findings.iter().any(|f| f.window == w && f.clause == Clause::ModelReexecution));
    }
    assert!(vs[..2].iter().all(|v| v.compliant));
}

#[test]
fn state_replay_breaks_the_chain() {
    let p = prover(Some(TamperMode::StateReplay { from_window: 2 }), &stream(5 * W * D, 7, None));
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    let vs = check_all(&p, &mut reg, false);
    let findings = reg.detect_suppression(0..=10);
    assert!(vs[..2].iter().all(|v| v.compliant));
    for w in 2..5u64 {
        assert!(!vs[w as usize].chain_ok);
        assert!(findings.iter().any(|f| f.window == w && f.clause == Clause::HashAlignment && !f.evidence.is_empty()));
    }
}

#[test]
fn rekey_violates_key_invariance() {
    let data = stream(4 * W * D, 8, None);
    let mut c = SessionConfig::new(BUILTIN_REFERENCE, W, D, 12);
    c.nonce_seed = Some(5);
    c.tamper = Some(TamperMode::Rekey { from_window: 2, delta: 0.01 });
    let mut p = ProverSession::open(c).unwrap();
    p.ingest(&data[..2 * W * D]).unwrap();
    let mut reg = ComplianceSession::new("utility-a", p.keys()).unwrap();
    assert!(check_all(&p, &mut reg, false).iter().all(|v| v.compliant));
    p.ingest(&data[2 * W * D..]).unwrap();
    let vs = check_all(&p, &mut reg, false);
    let findings = reg.detect_suppression(0..=10);
    for w in 2..4u64 {
        assert!(!vs[w as usize].keys_ok);
        assert!(findings.iter().any(|f| f.window == w && f.clause == Clause::KeyInvariance));
    }
}

#[test]
fn live_request_and_verify() {
    let server = spawn("127.0.0.1:0".parse().unwrap(), AppState::new(None)).unwrap();
    server.state.insert(prover(None, &stream(3 * W * D, 9, None))).unwrap();
    let client = UtilityClient::new(server.url());
    let mut reg = zkstar_regulator::connect(&client, None).unwrap();
    for w in [1, 0, 2] {
        let v = request_and_verify(&mut reg, &client, w, true);
        assert!(v.compliant, "{:?}", v.reasons);
        assert!(v.latency_ms.unwrap() < 2000.0);
    }
    let v = request_and_verify(&mut reg, &client, 3, false);
    assert!(!v.complete && !v.compliant);

    let mut dead = UtilityClient::new("http://127.0.0.1:9");
    dead.retries = 1;
    dead.backoff = std::time::Duration::from_millis(1);
    let v = request_and_verify(&mut reg, &dead, 0, false);
    assert!(!v.complete && !v.compliant);
}
