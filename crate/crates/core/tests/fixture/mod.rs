//! Trained models shared across tests, cached on disk by recipe fingerprint.
#![allow(dead_code)]

use std::sync::OnceLock;

use bridgelab::models::Models;
use bridgelab::pipeline::{TrainRecipe, TrainSummary};

pub fn trained() -> &'static (Models, TrainSummary) {
    static MODELS: OnceLock<(Models, TrainSummary)> = OnceLock::new();
    MODELS.get_or_init(|| {
        TrainRecipe::default()
            .load_or_train(&std::env::temp_dir())
            .expect("default recipe trains")
    })
}

pub fn models() -> &'static Models {
    &trained().0
}

/// On-disk bundle directory of the shared models.
pub fn model_dir() -> std::path::PathBuf {
    trained();
    std::env::temp_dir().join(format!(
        "bridgelab-models-{}",
        TrainRecipe::default().fingerprint()
    ))
}
