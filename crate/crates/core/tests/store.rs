mod common;

use serde_json::Value;

use hiermem::model::ViolationKind;
use hiermem::store::{self, EmbeddingInfo, RunConfig, StoreFile, StoreLock, SCHEMA_VERSION};
use hiermem::Error;

fn fixture_store() -> StoreFile {
    let mut config = RunConfig::default();
    config.providers.offline = true;
    StoreFile::new(
        common::fixture_state(),
        EmbeddingInfo {
            provider: "deterministic".into(),
            dimension: common::DIM,
        },
        config.resolved().unwrap(),
    )
}

fn mutate(store: &StoreFile, f: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(&store.to_canonical_json().unwrap()).unwrap();
    f(&mut v);
    v.to_string()
}

fn violation_kinds(err: Error) -> Vec<ViolationKind> {
    match err {
        Error::Validation(vs) => vs.into_iter().map(|v| v.kind).collect(),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mem.json");
    let original = fixture_store();
    store::save(&original, &path).unwrap();
    let loaded = store::load(&path).unwrap();
    assert_eq!(loaded, original);
    assert_eq!(
        loaded.to_canonical_json().unwrap(),
        original.to_canonical_json().unwrap()
    );
    assert!(!path.with_extension("json.tmp").exists());
}

#[test]
fn other_schema_versions_are_refused() {
    let raw = mutate(&fixture_store(), |v| {
        v["schema_version"] = (SCHEMA_VERSION + 1).into();
    });
    match StoreFile::from_json(&raw) {
        Err(Error::Migration { found, expected }) => {
            assert_eq!(found, SCHEMA_VERSION + 1);
            assert_eq!(expected, SCHEMA_VERSION);
        }
        other => panic!("expected migration error, got {other:?}"),
    }
}

#[test]
fn recorded_dimension_must_match_vectors() {
    let raw = mutate(&fixture_store(), |v| {
        v["embedding"]["dimension"] = 128.into();
    });
    assert!(matches!(
        StoreFile::from_json(&raw),
        Err(Error::DimensionMismatch {
            expected: 128,
            actual: 256
        })
    ));
}

#[test]
fn dropped_graph_edge_is_reported_stale() {
    let raw = mutate(&fixture_store(), |v| {
        let adj = v["state"]["semantic_graph"]["adjacency"]
            .as_object_mut()
            .unwrap();
        let first = adj.values_mut().next().unwrap().as_array_mut().unwrap();
        first.pop();
    });
    let kinds = violation_kinds(StoreFile::from_json(&raw).unwrap_err());
    assert!(kinds.contains(&ViolationKind::StaleGraph), "{kinds:?}");
}

#[test]
fn edited_centroid_is_reported_stale() {
    let raw = mutate(&fixture_store(), |v| {
        let themes = v["state"]["hierarchy"]["themes"].as_object_mut().unwrap();
        let theme = themes.values_mut().next().unwrap();
        let c = theme["centroid"].as_array_mut().unwrap();
        c.swap(0, 2);
        c.swap(1, 3);
    });
    let kinds = violation_kinds(StoreFile::from_json(&raw).unwrap_err());
    assert!(kinds.contains(&ViolationKind::StaleCentroid), "{kinds:?}");
}

#[test]
fn dangling_membership_is_reported() {
    let raw = mutate(&fixture_store(), |v| {
        let themes = v["state"]["hierarchy"]["themes"].as_object_mut().unwrap();
        let theme = themes.values_mut().next().unwrap();
        theme["member_ids"]
            .as_array_mut()
            .unwrap()
            .push("sem-99999999".into());
    });
    assert!(!violation_kinds(StoreFile::from_json(&raw).unwrap_err()).is_empty());
}

#[test]
fn lock_is_exclusive_and_released_on_drop() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mem.json");
    let held = StoreLock::acquire(&path).unwrap();
    assert!(matches!(StoreLock::acquire(&path), Err(Error::Locked(_))));
    drop(held);
    let again = StoreLock::acquire(&path).unwrap();
    drop(again);
    assert!(!dir.path().join("mem.json.lock").exists());
}
