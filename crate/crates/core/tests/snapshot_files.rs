mod common;

use common::*;
use pdf_core::weights::{self, Tensor};
use pdf_core::{deserialize_snapshot, load_policy, serialize_snapshot, Arch, PdfError, PerturbationHead, PolicySnapshot, StoredWeights};

#[test]
fn policy_round_trip_gives_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.pdfw");
    let snap = bc_snapshot();
    serialize_snapshot(&StoredWeights::Policy(snap.clone()), &path).unwrap();
    let back = load_policy(&path, Some(&Arch::default())).unwrap();
    assert_eq!(back, snap);
    assert_eq!(back.checksum(), snap.checksum());

    let mut rng = rng(11);
    for _ in 0..20 {
        let f = random_feature(&mut rng, snap.arch().feature);
        let a = snap.lm_logits(&f).unwrap();
        let b = back.lm_logits(&f).unwrap();
        let bits = |m: &pdf_core::LogitsMatrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn head_round_trip_and_kind_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.pdfw");
    let mut rng = rng(12);
    let head = random_head(&mut rng, 32, 16, 4, 16);
    serialize_snapshot(&StoredWeights::Head(head.clone()), &path).unwrap();
    match deserialize_snapshot(&path, None).unwrap() {
        StoredWeights::Head(h) => assert_eq!(h, head),
        StoredWeights::Policy(_) => panic!("head file read back as a policy"),
    }
    assert!(matches!(load_policy(&path, None), Err(PdfError::MalformedHeader(_))));
}

#[test]
fn header_disagreeing_with_expected_arch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.pdfw");
    let arch = Arch {
        hidden: 16,
        ..Arch::default()
    };
    serialize_snapshot(&PolicySnapshot::init(arch, 0).unwrap().into(), &path).unwrap();
    assert!(load_policy(&path, None).is_ok());
    assert!(load_policy(&path, Some(&Arch::default())).is_err());
}

#[test]
fn truncated_and_padded_files_fail_cleanly() {
    let snap = PolicySnapshot::init(Arch::default(), 1).unwrap();
    let bytes = weights::encode(&snap.to_tensors());
    assert!(matches!(weights::decode(&bytes[..10]), Err(PdfError::MalformedHeader(_))));
    assert!(matches!(
        weights::decode(&bytes[..bytes.len() - 4]),
        Err(PdfError::DimensionMismatch(_))
    ));
    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(weights::decode(&padded), Err(PdfError::DimensionMismatch(_))));
}

#[test]
fn missing_tensor_is_reported() {
    let head = PerturbationHead::new(4, 3, 2, 2, 0);
    let tensors: Vec<Tensor> = head.to_tensors().into_iter().filter(|t| t.name != "perturb.output.bias").collect();
    assert!(PerturbationHead::from_tensors(&tensors).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = deserialize_snapshot(&dir.path().join("nope.pdfw"), None).unwrap_err();
    assert!(matches!(err, PdfError::Io { .. }));
}
