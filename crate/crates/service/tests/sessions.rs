mod common;

use std::sync::Arc;

use common::*;
use latedit_core::{scale_edit, sequential_edit, Latent, LatentEditor};
use latedit_service::{ServiceError, SessionSource};

#[test]
fn restart_replay_reproduces_head_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let (id, head) = {
        let svc = service(dir.path(), random_editor(&codec), codec.clone());
        let s = svc.create_session(SessionSource::Latent(source_latent(&codec, 3))).unwrap();
        svc.apply_edit(&s.id, RED, 1.0).unwrap();
        svc.apply_edit(&s.id, BLUE, 0.5).unwrap();
        let s = svc.apply_edit(&s.id, RED, 1.25).unwrap();
        assert_eq!(s.stack.len(), 3);
        (s.id.clone(), svc.head(&s.id).unwrap())
    };
    let svc = service(dir.path(), random_editor(&codec), codec.clone());
    let replayed = svc.replay(&id).unwrap();
    assert_eq!(replayed.data().as_slice().unwrap(), head.data().as_slice().unwrap());
    assert_eq!(svc.head(&id).unwrap(), head);
}

#[test]
fn apply_edit_runs_exactly_one_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let editor = random_editor(&codec);
    let svc = service(dir.path(), editor.clone(), codec.clone());
    let s = svc.create_session(SessionSource::Latent(source_latent(&codec, 1))).unwrap();
    for (i, eta) in [1.0, 0.3, 2.0].into_iter().enumerate() {
        let before = editor.forward_count();
        svc.apply_edit(&s.id, RED, eta).unwrap();
        assert_eq!(editor.forward_count() - before, 1, "edit {i}");
    }
    // Strength changes on the last entry reuse its cached output.
    let before = editor.forward_count();
    svc.set_strength(&s.id, 2, 0.5).unwrap();
    assert_eq!(editor.forward_count(), before);
    // Earlier entries re-run only the entries after them.
    svc.set_strength(&s.id, 0, 0.5).unwrap();
    assert_eq!(editor.forward_count() - before, 2);
}

#[test]
fn sequential_edits_match_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let editor = random_editor(&codec);
    let svc = service(dir.path(), editor.clone(), codec.clone());
    let base = source_latent(&codec, 5);
    let s = svc.create_session(SessionSource::Latent(base.clone())).unwrap();
    svc.apply_edit(&s.id, RED, 1.0).unwrap();
    svc.apply_edit(&s.id, BLUE, 1.0).unwrap();
    let (head, chain) = sequential_edit(editor.as_ref(), &base, &[RED, BLUE]).unwrap();
    assert_eq!(chain.len(), 3);
    assert_eq!(svc.head(&s.id).unwrap(), head);
}

#[test]
fn strength_cases_on_shift_editor() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let editor = Arc::new(ShiftEditor::new(&codec));
    let svc = service(dir.path(), editor.clone(), codec.clone());
    let base = source_latent(&codec, 9);
    let s = svc.create_session(SessionSource::Latent(base.clone())).unwrap();

    let s0 = svc.apply_edit(&s.id, RED, 0.0).unwrap();
    assert_eq!(s0.stack.len(), 1);
    assert_eq!(svc.head(&s.id).unwrap(), base);

    svc.set_strength(&s.id, 0, 1.0).unwrap();
    let pure = editor.edit(&base, RED).unwrap();
    assert_eq!(svc.head(&s.id).unwrap(), pure);

    let same = svc.set_strength(&s.id, 0, 1.0).unwrap();
    assert_eq!(svc.head(&same.id).unwrap(), pure);

    svc.set_strength(&s.id, 0, 1.5).unwrap();
    let expected = base.data() + &(&editor.c * 1.5);
    let head = svc.head(&s.id).unwrap();
    let err = (head.data() - &expected).iter().fold(0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12, "max abs err {err}");

    svc.set_strength(&s.id, 0, 0.0).unwrap();
    assert_eq!(svc.head(&s.id).unwrap(), base);
}

#[test]
fn interleaved_sessions_equal_serial_execution() {
    let codec = codec();
    let editor = random_editor(&codec);
    let plan_a = [(RED, 1.0), (BLUE, 0.7), (RED, -0.2)];
    let plan_b = [(BLUE, 1.3), (BLUE, 1.0), (RED, 0.4)];

    let serial = |plan: &[(&str, f64)], seed: u64| -> Latent {
        let mut r = source_latent(&codec, seed);
        for (y, eta) in plan {
            let e = editor.edit(&r, y).unwrap();
            r = scale_edit(&r, &e, *eta).unwrap();
        }
        r
    };
    let want_a = serial(&plan_a, 11);
    let want_b = serial(&plan_b, 12);

    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(service(dir.path(), editor.clone(), codec.clone()));
    let a = svc.create_session(SessionSource::Latent(source_latent(&codec, 11))).unwrap().id;
    let b = svc.create_session(SessionSource::Latent(source_latent(&codec, 12))).unwrap().id;
    std::thread::scope(|scope| {
        for (id, plan) in [(&a, plan_a), (&b, plan_b)] {
            let svc = svc.clone();
            scope.spawn(move || {
                for (y, eta) in plan {
                    svc.apply_edit(id, y, eta).unwrap();
                }
            });
        }
    });
    assert_eq!(svc.head(&a).unwrap(), want_a);
    assert_eq!(svc.head(&b).unwrap(), want_b);
}

#[test]
fn error_cases() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let svc = service(dir.path(), random_editor(&codec), codec.clone());
    let s = svc.create_session(SessionSource::Latent(source_latent(&codec, 1))).unwrap();

    match svc.apply_edit(&s.id, "make it plaid", 1.0) {
        Err(ServiceError::UnknownInstruction { available, .. }) => {
            assert_eq!(available, vec![RED.to_string(), BLUE.to_string()])
        }
        other => panic!("expected unknown instruction, got {other:?}"),
    }
    assert!(matches!(svc.apply_edit("missing", RED, 1.0), Err(ServiceError::SessionNotFound(_))));
    assert!(matches!(svc.apply_edit(&s.id, RED, f64::NAN), Err(ServiceError::Validation(_))));
    assert!(matches!(
        svc.set_strength(&s.id, 0, 1.0),
        Err(ServiceError::EntryOutOfRange { index: 0, len: 0 })
    ));
    let wrong_shape = Latent::zeros((3, 4), codec_id(&codec));
    assert!(svc.create_session(SessionSource::Latent(wrong_shape)).is_err());
    let wrong_codec = Latent::zeros((25, 4), "other");
    assert!(svc.create_session(SessionSource::Latent(wrong_codec)).is_err());
    assert!(svc.create_session(SessionSource::Text("  ".into())).is_err());
}

fn codec_id(codec: &latedit_core::codec::ToyCodec) -> String {
    latedit_core::Codec::id(codec).to_string()
}

#[test]
fn other_sources_and_turntables() {
    let dir = tempfile::tempdir().unwrap();
    let codec = codec();
    let svc = service(dir.path(), random_editor(&codec), codec.clone());

    let t = svc.create_session(SessionSource::Text("a green mug".into())).unwrap();
    let again = svc.create_session(SessionSource::Text("a green mug".into())).unwrap();
    assert_ne!(t.id, again.id);
    assert_eq!(t.base, again.base);

    let ply = b"ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
0 0 0 255 0 0\n0.1 0 0 255 0 0\n0 0.1 0 255 0 0\n";
    let m = svc
        .create_session(SessionSource::Asset {
            format: None,
            bytes: ply.to_vec(),
            class_label: "cube".into(),
        })
        .unwrap();
    let base = svc.latent(&m.base).unwrap();
    assert!(base.data().iter().any(|v| *v != 0.0));

    let tt = svc.turntable(&m.id, None, SMALL).unwrap();
    assert_eq!(tt.frames, 2);
    assert_eq!(&tt.png[1..4], b"PNG");
    let one = latedit_service::TurntableSettings { frames: 1, resolution: 8 };
    assert_ne!(svc.turntable(&m.id, Some(0), one).unwrap().png, tt.png);
    assert!(svc.turntable(&m.id, Some(1), SMALL).is_err());
    let zero = latedit_service::TurntableSettings { frames: 0, resolution: 8 };
    assert!(svc.turntable(&m.id, None, zero).is_err());
}

mod interleaving {
    use super::*;
    use proptest::prelude::*;

    fn step() -> impl Strategy<Value = (bool, f64)> {
        (any::<bool>(), -1.0f64..2.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn two_sessions_match_serial_runs(
            plan_a in proptest::collection::vec(step(), 1..5),
            plan_b in proptest::collection::vec(step(), 1..5),
        ) {
            let codec = codec();
            let editor = random_editor(&codec);
            let instr = |red: bool| if red { RED } else { BLUE };
            let serial = |plan: &[(bool, f64)], seed: u64| {
                let mut r = source_latent(&codec, seed);
                for (red, eta) in plan {
                    let e = editor.edit(&r, instr(*red)).unwrap();
                    r = scale_edit(&r, &e, *eta).unwrap();
                }
                r
            };
            let dir = tempfile::tempdir().unwrap();
            let svc = Arc::new(service(dir.path(), editor.clone(), codec.clone()));
            let a = svc.create_session(SessionSource::Latent(source_latent(&codec, 1))).unwrap().id;
            let b = svc.create_session(SessionSource::Latent(source_latent(&codec, 2))).unwrap().id;
            std::thread::scope(|scope| {
                for (id, plan) in [(&a, &plan_a), (&b, &plan_b)] {
                    let svc = svc.clone();
                    scope.spawn(move || {
                        for (red, eta) in plan {
                            svc.apply_edit(id, instr(*red), *eta).unwrap();
                        }
                    });
                }
            });
            prop_assert_eq!(svc.head(&a).unwrap(), serial(&plan_a, 1));
            prop_assert_eq!(svc.head(&b).unwrap(), serial(&plan_b, 2));
        }
    }
}
