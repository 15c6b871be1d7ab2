use fewuser::corpus::synthetic::{generate, SyntheticSpec};
use fewuser::corpus::{dataset_to_string, filter_minority_classes, load_dataset, parse_dataset, save_dataset};

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let ds = generate(&SyntheticSpec::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("users.jsonl");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let text = dataset_to_string(&ds).unwrap();
    assert_eq!(parse_dataset(text.as_bytes()).unwrap(), ds);
}

#[test]
fn synthetic_generation_is_seeded() {
    let a = generate(&SyntheticSpec::default()).unwrap();
    let b = generate(&SyntheticSpec::default()).unwrap();
    let c = generate(&SyntheticSpec { seed: 1, ..SyntheticSpec::default() }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.users.len(), 800);
    assert_eq!(a.labels.len(), 20);
}

#[test]
fn minority_filter_keeps_full_classes() {
    let ds = generate(&SyntheticSpec { users_per_class: 3, ..SyntheticSpec::default() }).unwrap();
    assert_eq!(filter_minority_classes(&ds, 3).unwrap().users.len(), ds.users.len());
    assert!(filter_minority_classes(&ds, 4).is_err());
}
