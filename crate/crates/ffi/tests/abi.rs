use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use editlab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { editlab_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn desk_config() -> *mut EditlabConfig {
    let mut cfg = ptr::null_mut();
    let preset = CString::new("desk").unwrap();
    assert_eq!(unsafe { editlab_config_new(preset.as_ptr(), &mut cfg) }, EditlabStatus::Ok);
    cfg
}

#[test]
fn full_pipeline_through_handles() {
    unsafe {
        let cfg = desk_config();
        let key = CString::new("trainer.iterations").unwrap();
        let val = CString::new("4").unwrap();
        assert_eq!(editlab_config_set(cfg, key.as_ptr(), val.as_ptr()), EditlabStatus::Ok);

        let mut hash = [0 as c_char; 65];
        assert_eq!(editlab_config_hash(cfg, hash.as_mut_ptr(), hash.len()), EditlabStatus::Ok);
        assert_eq!(std::ffi::CStr::from_ptr(hash.as_ptr()).to_bytes().len(), 64);

        let mut session = ptr::null_mut();
        assert_eq!(editlab_session_prepare(cfg, 2, &mut session), EditlabStatus::Ok);
        let (mut a, mut p) = (EditlabMetrics::default(), EditlabMetrics::default());
        assert_eq!(editlab_session_base_metrics(session, &mut a, &mut p), EditlabStatus::Ok);
        assert!(a.specificity >= 0.99 && a.efficacy <= 0.05, "{a:?}");
        assert_eq!(a.n_evaluated, 10);

        let mut trainer = ptr::null_mut();
        assert_eq!(editlab_trainer_new(session, &mut trainer), EditlabStatus::Ok);
        assert_eq!(editlab_trainer_run(trainer, 3), EditlabStatus::Ok);
        assert_eq!(editlab_trainer_iterations(trainer), 3);
        assert_eq!(editlab_trainer_evaluate(trainer, session, &mut a, &mut p), EditlabStatus::Ok);
        assert!((0.0..=1.0).contains(&a.efficacy) && (0.0..=1.0).contains(&p.specificity));

        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let path = CString::new(dir.join("state.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(editlab_trainer_save(trainer, session, path.as_ptr()), EditlabStatus::Ok);
        let loaded = editlab::harness::load_state(&dir.join("state.ckpt")).unwrap();
        assert_eq!(loaded.trainer.unwrap().iteration, 3);
        let corpus = CString::new(dir.join("corpus.jsonl").to_str().unwrap()).unwrap();
        assert_eq!(editlab_session_save_corpus(session, corpus.as_ptr()), EditlabStatus::Ok);

        editlab_trainer_free(trainer);
        editlab_session_free(session);
        editlab_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new("enormous").unwrap();
        assert_eq!(editlab_config_new(bad.as_ptr(), &mut cfg), EditlabStatus::InvalidArgument);
        assert!(last_error().contains("unknown preset"));
        assert!(cfg.is_null());

        assert_eq!(editlab_config_new(ptr::null(), &mut cfg), EditlabStatus::NullPointer);
        let invalid = [0xffu8 as c_char, 0];
        assert_eq!(editlab_config_new(invalid.as_ptr(), &mut cfg), EditlabStatus::InvalidArgument);

        let cfg = desk_config();
        let key = CString::new("trainer.bogus").unwrap();
        let val = CString::new("1").unwrap();
        assert_eq!(editlab_config_set(cfg, key.as_ptr(), val.as_ptr()), EditlabStatus::InvalidArgument);
        let mut small = [0 as c_char; 8];
        assert_eq!(editlab_config_hash(cfg, small.as_mut_ptr(), small.len()), EditlabStatus::InvalidArgument);

        let key = CString::new("eval.specificity_floor").unwrap();
        let val = CString::new("1.5").unwrap();
        assert_eq!(editlab_config_set(cfg, key.as_ptr(), val.as_ptr()), EditlabStatus::Ok);
        let mut session = ptr::null_mut();
        assert_eq!(editlab_session_prepare(cfg, 0, &mut session), EditlabStatus::Precondition);
        assert!(session.is_null());

        let mut trainer = ptr::null_mut();
        assert_eq!(editlab_trainer_new(ptr::null(), &mut trainer), EditlabStatus::NullPointer);
        assert_eq!(editlab_trainer_iterations(ptr::null()), 0);
        editlab_trainer_free(ptr::null_mut());
        editlab_session_free(ptr::null_mut());
        editlab_config_free(cfg);

        assert!(editlab_last_error(ptr::null_mut(), 0) > 0);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(editlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/editlab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "editlab_config_new",
        "editlab_session_prepare",
        "editlab_trainer_run",
        "editlab_trainer_evaluate",
        "EDITLAB_STATUS_PRECONDITION",
        "typedef struct EditlabTrainer EditlabTrainer;",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"editlab.h\"\nint main(void) { EditlabMetrics m = {0}; EditlabConfig *c = 0; \
         return (int)m.n_evaluated + (c == 0 ? EDITLAB_STATUS_OK : 1); }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .expect("a C compiler is available as `cc`");
    assert!(status.success());
}
