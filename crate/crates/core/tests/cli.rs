use std::path::Path;
use std::process::Command;

fn fewuser(args: &[&str], cache: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fewuser"))
        .args(args)
        .env("FEWUSER_CACHE_DIR", cache)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "[dataset.synthetic]\nclasses = 5\nusers_per_class = 12\nposts_per_user = 2\n\
noise_words_per_post = 2\nnoise_vocabulary = 20\nmention_city = true\nseed = 4\n\n[train]\nepochs = 3\n";

#[test]
fn train_writes_outputs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let cfg = write_config(tmp.path(), SMALL);
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = fewuser(&["train", "--config", &cfg, "--shots", "2", "--out", out.to_str().unwrap()], &cache);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = tmp.path().join("a");
    for f in ["manifest.json", "report.json", "report.txt", "curves/subset_0.csv", "curves/subset_2.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(a.join("checkpoints/subset_1/encoder.json").exists());
    let header = std::fs::read_to_string(a.join("curves/subset_0.csv")).unwrap();
    assert!(header.starts_with("epoch,L_contrast,L_match,dev_acc\n"));
    // The second run reused the cached split.
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);

    let replay = tmp.path().join("replay");
    let o = fewuser(
        &["replay", "--manifest", a.join("manifest.json").to_str().unwrap(), "--out", replay.to_str().unwrap()],
        &cache,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(replay.join("report.json")).unwrap());
}

#[test]
fn zero_shot_writes_no_curves_or_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("z");
    let o = fewuser(&["train", "--config", &cfg, "--shots", "0", "--out", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());
    assert!(!out.join("curves").exists());
    assert!(!out.join("checkpoints").exists());
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(!report.contains("per_subset"));
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[objective]\ntaux = 0.1\n");
    let o = fewuser(&["train", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("taux"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn seed_override_changes_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut manifests = Vec::new();
    for seed in ["1", "2", "1"] {
        let out = tmp.path().join(format!("p{}", manifests.len()));
        let o = fewuser(&["preprocess", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifests.push(std::fs::read_to_string(out.join("split_manifest.json")).unwrap());
    }
    assert_ne!(manifests[0], manifests[1]);
    assert_eq!(manifests[0], manifests[2]);
    assert!(manifests[0].contains("dataset_sha256"));
}

#[test]
fn ablation_table_has_one_column_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("abl");
    let o = fewuser(
        &["ablate", "--config", &cfg, "--axis", "fields", "--shots", "1", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation_fields.txt")).unwrap();
    let header = table.lines().nth(1).unwrap();
    for col in ["All", "NoPostTime", "NoPostMeta"] {
        assert!(header.contains(col), "{header}");
    }
    let manifest = out.join("ablation_fields.json");
    let entries: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(entries["entries"].as_array().unwrap().len(), 3);

    let again = tmp.path().join("abl2");
    let o = fewuser(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ablation_fields.txt", "ablation_fields.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn preprocess_counts_match_a_recount_of_the_raw_file() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = fewuser::corpus::synthetic::SyntheticSpec { classes: 4, users_per_class: 23, ..Default::default() };
    let data = tmp.path().join("users.jsonl");
    fewuser::corpus::save_dataset(&fewuser::corpus::synthetic::generate(&spec).unwrap(), &data).unwrap();
    let cfg = write_config(tmp.path(), &format!("[dataset]\npath = {:?}\n", data.to_str().unwrap()));
    let out = tmp.path().join("p");
    let o = fewuser(&["preprocess", "--config", &cfg, "--shots", "1,8", "--out", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Label of every user id, read straight from the JSON lines.
    let mut label_of = std::collections::HashMap::new();
    for line in std::fs::read_to_string(&data).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let (Some(u), Some(l)) = (v["user_id"].as_str(), v["label"]["name"].as_str()) {
            label_of.insert(u.to_string(), l.to_string());
        }
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("split_manifest.json")).unwrap()).unwrap();
    let count = |key: &str| {
        let mut c = std::collections::BTreeMap::new();
        for id in m["split"][key].as_array().unwrap() {
            *c.entry(label_of[id.as_str().unwrap()].clone()).or_insert(0usize) += 1;
        }
        c
    };
    let (train, test) = (count("train_ids"), count("test_ids"));
    assert_eq!(train.len(), 4);
    for n in train.values() {
        // floor(0.7 * 23)
        assert_eq!(*n, 16);
    }
    for n in test.values() {
        // 23 - 16 - floor(0.15 * 23)
        assert_eq!(*n, 4);
    }
    for sub in m["split"]["shot_subsets"].as_array().unwrap() {
        assert_eq!(sub["user_ids"].as_array().unwrap().len(), 4 * sub["shots"].as_u64().unwrap() as usize);
    }
}
