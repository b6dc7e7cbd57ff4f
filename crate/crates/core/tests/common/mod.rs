#![allow(dead_code)]

use std::path::PathBuf;

use aiq_core::dataset::{load_dataset, DatasetFormat, LoadOptions};
use aiq_core::{io, Dataset, ModelGraph};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn load_fixture_model(stem: &str) -> ModelGraph {
    io::load_model(&fixture(&format!("{stem}.json")), &fixture(&format!("{stem}.aiqw"))).expect("fixture loads")
}

pub fn mini_resnet() -> (ModelGraph, Dataset) {
    let g = load_fixture_model("mini_resnet");
    let opts = LoadOptions {
        normalization: g.normalization.clone(),
        num_classes: Some(10),
        labels_path: None,
    };
    let data = load_dataset(&fixture("mini_resnet_eval.aiqd"), DatasetFormat::Aiqd, &opts).expect("eval set loads");
    (g, data)
}

pub fn read_json(name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).expect("golden file")).expect("golden json")
}
