use super::*;
use crate::commitments::NonceSource;
use crate::kernels::TcIntervalState;
use crate::model::StateSpaceModel;
use crate::stats::chi2_upper_quantile;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const PSF: u8 = 16;
const D: usize = 4;

struct Fixture {
    model: StateSpaceModel,
    fixed: FixedModel,
    tc: KeyPair,
    sc: KeyPair,
    intervals: Vec<TcWitness>,
    window: ScWitness,
}

fn fixture_with(model: StateSpaceModel, seed: u64) -> Fixture {
    let fixed = FixedModel::quantize(&model, PSF).unwrap();
    let opts = CircuitOptions::default();
    let tc_c = CircuitDescriptor::tc(&fixed, D, &opts).unwrap();
    let t_ucl = chi2_upper_quantile(model.obs_dim(), 0.01).unwrap();
    let sc_c = CircuitDescriptor::sc(&fixed, model.obs_dim(), t_ucl, &opts).unwrap();
    let tc = setup(DEFAULT_SECURITY_LEVEL, &tc_c, &fixed).unwrap();
    let sc = setup(DEFAULT_SECURITY_LEVEL, &sc_c, &fixed).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = model.state_dim();
    let data = model.simulate(&DVector::zeros(m), None, 2 * D, &mut rng).unwrap();
    let nonces = NonceSource::seeded(seed);
    let x0 = FixedTensor::zeros(vec![m], PSF).unwrap();
    let p0 = FixedTensor::quantize_matrix(&(DMatrix::identity(m, m) * 0.1), PSF).unwrap();
    let mut state = TcIntervalState::genesis(&x0, &p0, model.obs_dim(), nonces.gen_nonce().unwrap(), nonces.gen_nonce().unwrap()).unwrap();
    let mut intervals = Vec::new();
    for chunk in data.chunks(D) {
        let ys: Vec<_> = chunk.iter().map(|(_, y)| FixedTensor::quantize_vector(y, PSF).unwrap()).collect();
        let us = vec![FixedTensor::zeros(vec![m], PSF).unwrap(); ys.len()];
        let w = honest_tc_witness(&model, &fixed, &state, &ys, &us, &nonces, &tc_c.eps_kc(), tc_c.krc_covariance).unwrap();
        state = w.output.clone();
        intervals.push(w);
    }
    let window =
        honest_sc_witness(&state.residual_block(), model.obs_dim(), &sc_c.t_ucl().unwrap(), &sc_c.eps_svd(), sc_c.sc_modes(), &nonces)
            .unwrap();
    Fixture { model, fixed, tc, sc, intervals, window }
}

fn fixture() -> Fixture {
    fixture_with(StateSpaceModel::reference_nonlinear(), 7)
}

fn tc_ctx(i: u32) -> ArtifactContext {
    ArtifactContext { stream_id: "s1".into(), window: 0, interval: Some(i) }
}

fn sc_ctx() -> ArtifactContext {
    ArtifactContext { stream_id: "s1".into(), window: 0, interval: None }
}

fn check(keys: &KeyPair, art: &ProofArtifact, w: &Witness, mode: VerifyMode<'_>) -> Verdict {
    let (pin, pout) = public_projection(w);
    verify(&keys.verifying_key(), art, &pin, &pout, mode)
}

#[test]
fn setup_is_deterministic_and_binds_theta() {
    let f = fixture();
    let again = setup(DEFAULT_SECURITY_LEVEL, &f.tc.circuit, &f.fixed).unwrap();
    assert_eq!(again.vk, f.tc.vk);
    assert_eq!(again.pk, f.tc.pk);
    assert_ne!(f.tc.vk, f.sc.vk);
    assert!(f.tc.verifying_key().is_well_formed());

    let mut theta = f.model.theta();
    theta[0] += 0.01;
    let other = FixedModel::quantize(&f.model.with_theta(&theta).unwrap(), PSF).unwrap();
    let c = CircuitDescriptor::tc(&other, D, &CircuitOptions::default()).unwrap();
    assert_ne!(setup(DEFAULT_SECURITY_LEVEL, &c, &other).unwrap().vk, f.tc.vk);
    // The descriptor pins the parameter digest.
    assert!(setup(DEFAULT_SECURITY_LEVEL, &f.tc.circuit, &other).is_err());

    let lvl = setup(80, &f.tc.circuit, &f.fixed).unwrap();
    assert_ne!(lvl.vk, f.tc.vk);
}

#[test]
fn malformed_circuits_are_rejected() {
    let f = fixture();
    let mut c = f.tc.circuit.clone();
    c.d_steps = Some(0);
    assert!(matches!(setup(DEFAULT_SECURITY_LEVEL, &c, &f.fixed), Err(ProofError::MalformedCircuit(_))));
    let mut c = f.sc.circuit.clone();
    c.visibility = Visibility::TC;
    assert!(c.validate().is_err());
    let mut c = f.sc.circuit.clone();
    c.p = c.d + 1;
    assert!(c.validate().is_err());
}

#[test]
fn honest_round_trip() {
    let f = fixture();
    for (i, w) in f.intervals.iter().enumerate() {
        let w = Witness::Tc(w.clone());
        let art = prove(&f.tc, &f.fixed, &w, &tc_ctx(i as u32)).unwrap();
        assert_eq!(art.public_inputs.len(), 5 + 5 * D);
        assert_eq!(check(&f.tc, &art, &w, VerifyMode::Commitment), Verdict::OK);
        assert_eq!(check(&f.tc, &art, &w, VerifyMode::Audit { witness: &w, theta: &f.fixed }), Verdict::OK);
        let back: ProofArtifact = serde_json::from_str(&art.to_json()).unwrap();
        assert_eq!(back, art);
    }
    let w = Witness::Sc(f.window.clone());
    assert!(f.window.output.eta && f.window.output.kappa);
    let art = prove(&f.sc, &f.fixed, &w, &sc_ctx()).unwrap();
    assert_eq!(check(&f.sc, &art, &w, VerifyMode::Audit { witness: &w, theta: &f.fixed }), Verdict::OK);
    assert!(matches!(art.public_outputs, PublicOutputs::Values { .. }));
}

#[test]
fn proofs_are_deterministic() {
    let f = fixture();
    let w = Witness::Tc(f.intervals[0].clone());
    let a = prove(&f.tc, &f.fixed, &w, &tc_ctx(0)).unwrap();
    let b = prove(&f.tc, &f.fixed, &w, &tc_ctx(0)).unwrap();
    assert_eq!(a, b);
    // Context is bound.
    let c = prove(&f.tc, &f.fixed, &w, &tc_ctx(1)).unwrap();
    assert_ne!(a.pi, c.pi);
}

#[test]
fn flipped_alarm_cannot_be_proven() {
    let f = fixture();
    let mut w = f.window.clone();
    w.output.rho = !w.output.rho;
    let err = prove(&f.sc, &f.fixed, &Witness::Sc(w), &sc_ctx()).unwrap_err();
    assert!(matches!(err, ProofError::ReexecutionMismatch(_)), "{err}");
}

#[test]
fn forged_alarm_passes_commitment_but_fails_audit() {
    let f = fixture();
    let honest = Witness::Sc(f.window.clone());
    let (pin, _) = public_projection(&honest);
    let o = &f.window.output;
    let lie = PublicOutputs::Values { rho: !o.rho, eta: o.eta, kappa: o.kappa };
    let art = forge(&f.sc.vk, CircuitKind::Sc, &sc_ctx(), pin.clone(), lie.clone(), fake_transcript(b"x"));
    let vk = f.sc.verifying_key();
    assert_eq!(verify(&vk, &art, &pin, &lie, VerifyMode::Commitment), Verdict::OK);
    let v = verify(&vk, &art, &pin, &lie, VerifyMode::Audit { witness: &honest, theta: &f.fixed });
    assert_eq!(v, Verdict::fail(VerdictReason::ReexecMismatch));
}

#[test]
fn key_from_other_parameters_is_refused() {
    let f = fixture();
    let mut theta = f.model.theta();
    theta[1] -= 0.02;
    let other = FixedModel::quantize(&f.model.with_theta(&theta).unwrap(), PSF).unwrap();
    let w = Witness::Tc(f.intervals[0].clone());
    let err = prove(&f.tc, &other, &w, &tc_ctx(0)).unwrap_err();
    assert!(matches!(err, ProofError::KeyMismatch(_)));

    let mut keys = f.tc.clone();
    keys.pk = f.sc.pk.clone();
    assert!(matches!(prove(&keys, &f.fixed, &w, &tc_ctx(0)), Err(ProofError::KeyMismatch(_))));
}

#[test]
fn verify_rejects_swapped_digests_and_keys() {
    let f = fixture();
    let w = Witness::Tc(f.intervals[0].clone());
    let art = prove(&f.tc, &f.fixed, &w, &tc_ctx(0)).unwrap();
    let (mut pin, pout) = public_projection(&w);
    pin[5] = hash(b"replaced");
    assert_eq!(verify(&f.tc.verifying_key(), &art, &pin, &pout, VerifyMode::Commitment), Verdict::fail(VerdictReason::DigestMismatch));

    let mut tampered = art.clone();
    tampered.public_inputs = pin.clone();
    assert_eq!(
        verify(&f.tc.verifying_key(), &tampered, &pin, &pout, VerifyMode::Commitment),
        Verdict::fail(VerdictReason::DigestMismatch)
    );

    // A key re-derived under different parameters.
    let mut theta = f.model.theta();
    theta[2] += 0.03;
    let other = FixedModel::quantize(&f.model.with_theta(&theta).unwrap(), PSF).unwrap();
    let c = CircuitDescriptor::tc(&other, D, &CircuitOptions::default()).unwrap();
    let rekey = setup(DEFAULT_SECURITY_LEVEL, &c, &other).unwrap().verifying_key();
    let (pin, pout) = public_projection(&w);
    assert_eq!(verify(&rekey, &art, &pin, &pout, VerifyMode::Commitment), Verdict::fail(VerdictReason::KeyMismatch));

    // A verifying key whose bytes disagree with its circuit.
    let mut bad = f.tc.verifying_key();
    bad.circuit.eps_kc_raw += 1;
    assert!(!bad.is_well_formed());
    assert_eq!(verify(&bad, &art, &pin, &pout, VerifyMode::Commitment), Verdict::fail(VerdictReason::KeyMismatch));

    let mut junk = art.clone();
    junk.pi = "zz".into();
    assert_eq!(verify(&f.tc.verifying_key(), &junk, &pin, &pout, VerifyMode::Commitment), Verdict::fail(VerdictReason::Malformed));
    assert_eq!(verify(&f.sc.verifying_key(), &art, &pin, &pout, VerifyMode::Commitment), Verdict::fail(VerdictReason::Malformed));
}

#[test]
fn audit_rejects_foreign_parameters() {
    let f = fixture();
    let w = Witness::Tc(f.intervals[0].clone());
    let art = prove(&f.tc, &f.fixed, &w, &tc_ctx(0)).unwrap();
    let mut theta = f.model.theta();
    theta[0] += 0.01;
    let other = FixedModel::quantize(&f.model.with_theta(&theta).unwrap(), PSF).unwrap();
    assert_eq!(check(&f.tc, &art, &w, VerifyMode::Audit { witness: &w, theta: &other }), Verdict::fail(VerdictReason::KeyMismatch));
}

#[test]
fn bundles_round_trip() {
    let f = fixture();
    for w in &f.intervals {
        let b = WitnessBundle::from_tc(w);
        let back = WitnessBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(&back.to_tc().unwrap(), w);
        assert!(back.to_sc().is_err());
    }
    let b = WitnessBundle::from_sc(&f.window);
    assert_eq!(WitnessBundle::from_bytes(&b.to_bytes()).unwrap().to_sc().unwrap(), f.window);
    let mut bytes = b.to_bytes();
    bytes.push(0);
    assert!(WitnessBundle::from_bytes(&bytes).is_err());
    assert!(WitnessBundle::from_bytes(&bytes[..10]).is_err());
}

/// No opened value or nonce appears in a published artifact.
#[test]
fn artifacts_do_not_leak_witness_values() {
    let f = fixture();
    let w = &f.intervals[1];
    let art = prove(&f.tc, &f.fixed, &Witness::Tc(w.clone()), &tc_ctx(1)).unwrap().to_json();
    let mut secrets: Vec<String> = vec![];
    for s in &w.inputs.steps {
        for v in [&s.y, &s.g, &s.h, &s.k] {
            secrets.push(hex::encode(v.nonce().unwrap().0));
            secrets.push(hex::encode(v.as_bytes()));
        }
    }
    for v in [&w.output.x, &w.output.p] {
        secrets.push(hex::encode(v.nonce().unwrap().0));
    }
    for s in secrets {
        assert!(!art.contains(&s));
    }
    assert!(!art.contains("theta\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any single-byte mutation of an honest witness is caught by audit.
    #[test]
    fn audit_catches_witness_mutations(entry in 0usize..1000, pos in 0usize..10_000, bit in 0u8..8) {
        let f = fixture();
        let orig = &f.intervals[1];
        let w = Witness::Tc(orig.clone());
        let art = prove(&f.tc, &f.fixed, &w, &tc_ctx(1)).unwrap();
        let mut bundle = WitnessBundle::from_tc(orig);
        let e = entry % bundle.entries.len();
        let payload = &mut bundle.entries[e].1;
        let i = pos % payload.len();
        payload[i] ^= 1 << bit;
        let Ok(mutated) = bundle.to_tc() else { return Ok(()) };
        prop_assume!(&mutated != orig);
        let mw = Witness::Tc(mutated);
        let (pin, pout) = public_projection(&w);
        let v = verify(&f.tc.verifying_key(), &art, &pin, &pout, VerifyMode::Audit { witness: &mw, theta: &f.fixed });
        prop_assert!(!v.phi, "mutation of {} survived", bundle.entries[e].0);
    }
}
