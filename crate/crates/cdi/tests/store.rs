mod common;

use cdi::formats::eventlog::LoggedEvent;
use cdi::store::{fingerprint, Store};
use cdi::Error;
use cdi_core::discovery::{advance_iteration, apply_feedback, init_session, simulated_oracle, SessionEvent};

fn registered(store: &Store, dir: &std::path::Path) -> cdi::store::CorpusInfo {
    let c = common::blobs(120, 4, 8, 2);
    let (d, e) = common::write_corpus(dir, &c);
    store.register_corpus_files(&d, &e).unwrap()
}

#[test]
fn registration_is_content_addressed_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let a = registered(&store, dir.path());
    let b = registered(&store, dir.path());
    assert_eq!(a, b);
    assert_eq!(a.fingerprint.len(), 64);
    assert_eq!(a.corpus_id, format!("c{}", &a.fingerprint[..16]));
    assert_eq!((a.size, a.dim, a.labels), (120, 8, 4));
    let d = std::fs::read(dir.path().join("dataset.jsonl")).unwrap();
    let e = std::fs::read(dir.path().join("embeddings.cdie")).unwrap();
    assert_eq!(fingerprint(&d, &e), a.fingerprint);
    assert_eq!(store.load_corpus(&a.corpus_id).unwrap(), common::blobs(120, 4, 8, 2));
}

#[test]
fn unknown_and_malformed_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert!(matches!(store.corpus_info("c0000000000000000"), Err(Error::NotFound(_))));
    assert!(matches!(store.session_handle("../etc"), Err(Error::NotFound(_))));
    assert!(matches!(store.session_handle(""), Err(Error::NotFound(_))));
}

#[test]
fn bad_uploads_are_rejected_before_anything_is_stored() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let err = store.register_corpus(b"{\"id\":\"a\",\"text\":\"x\"}\n", b"CDIE").unwrap_err();
    assert!(matches!(err, Error::Binary { .. }), "{err:?}");
    assert_eq!(std::fs::read_dir(dir.path().join("corpora")).unwrap().count(), 0);
}

#[test]
fn snapshot_restore_equals_full_replay_and_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let info = registered(&store, dir.path());
    let corpus = store.load_corpus(&info.corpus_id).unwrap();
    let cfg = common::fast_config(5);

    let (mut live, _) = init_session(&corpus, &cfg).unwrap();
    let handle = store.create_session(&info, Some("create-1".into())).unwrap();
    let id = handle.session_id.clone();
    let log = |e: &SessionEvent| store.append_event(&id, &LoggedEvent::new(e, cfg.seed, None)).unwrap();
    log(&SessionEvent::Init { config: cfg.clone() });
    store.write_snapshot(&id, 1, &live).unwrap();
    for _ in 0..2 {
        let fb = simulated_oracle(&cfg, &corpus, &live.proposals).unwrap();
        apply_feedback(&mut live, &corpus, &fb).unwrap();
        log(&SessionEvent::Feedback { feedback: fb });
        let n = store.events(&id).unwrap().len();
        store.write_snapshot(&id, n, &live).unwrap();
        advance_iteration(&mut live, &corpus).unwrap();
        log(&SessionEvent::Advance);
    }

    let (restored, events) = store.restore_session(&id, &corpus).unwrap();
    assert_eq!(events.len(), 5);
    assert_eq!(restored, live);

    std::fs::remove_file(dir.path().join("store/sessions").join(&id).join("snapshot.json")).unwrap();
    let (replayed, _) = store.restore_session(&id, &corpus).unwrap();
    assert_eq!(replayed, live);
    assert_eq!(serde_json::to_string(&replayed).unwrap(), serde_json::to_string(&live).unwrap());

    assert_eq!(store.list_sessions().unwrap(), vec![id.clone()]);
    assert_eq!(store.session_handle(&id).unwrap(), handle);
}

#[test]
fn a_stale_snapshot_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let info = registered(&store, dir.path());
    let corpus = store.load_corpus(&info.corpus_id).unwrap();
    let cfg = common::fast_config(6);
    let (state, _) = init_session(&corpus, &cfg).unwrap();
    let id = store.create_session(&info, None).unwrap().session_id;
    store
        .append_event(&id, &LoggedEvent::new(&SessionEvent::Init { config: cfg.clone() }, cfg.seed, None))
        .unwrap();
    // claims to cover more events than the log holds
    store.write_snapshot(&id, 7, &state).unwrap();
    let (restored, _) = store.restore_session(&id, &corpus).unwrap();
    assert_eq!(restored, state);
}
