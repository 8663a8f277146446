//! Replays the checked-in fuzz corpus through the decoders the fuzz targets cover.

use std::fs;
use std::path::PathBuf;

use rtpmix::io::{load_dataset, parse_csv, DatasetSpec};
use rtpmix::simlab::SimulationConfig;

fn corpus(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| entry.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files.into_iter().map(|p| (p.clone(), fs::read_to_string(&p).unwrap())).collect()
}

#[test]
fn csv_seeds() {
    let outcomes: Vec<bool> = corpus("parse_csv").iter().map(|(_, text)| parse_csv(text).is_ok()).collect();
    assert!(outcomes.contains(&true) && outcomes.contains(&false));
}

#[test]
fn dataset_seeds() {
    let spec = DatasetSpec { response: "y".into(), covariates: vec!["x".into()], categoricals: vec!["g".into()], ..Default::default() };
    for (path, text) in corpus("load_dataset") {
        let name = path.file_name().unwrap().to_str().unwrap();
        let result = load_dataset(&text, &spec);
        assert_eq!(result.is_ok(), name == "categorical.csv", "{name}: {result:?}");
    }
}

#[test]
fn config_seeds() {
    for (path, text) in corpus("simulation_config") {
        let name = path.file_name().unwrap().to_str().unwrap();
        let result = SimulationConfig::from_json(&text);
        assert_eq!(result.is_ok(), name != "bad_weights.json", "{name}: {result:?}");
        if let Ok(config) = result {
            config.true_model().unwrap();
        }
    }
}
