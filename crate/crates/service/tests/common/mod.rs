#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use attend_core::affectmodel::build_model;
use attend_core::facegate::load_cascade;
use attend_core::image::GrayImage;
use attend_service::{Engine, Hub, ServiceConfig};
use tempfile::TempDir;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

pub fn astronaut() -> GrayImage {
    GrayImage::read_file(fixture("astronaut_256.pgm")).unwrap()
}

pub fn engine() -> Engine {
    Engine {
        cascade: load_cascade(fixture("haarcascade_frontalface_default.xml")).unwrap(),
        model: build_model(42),
    }
}

pub fn config(dir: &TempDir) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.path().to_owned(),
        min_frame_interval_ms: 0,
        ..ServiceConfig::default()
    }
}

pub fn hub(dir: &TempDir) -> Hub {
    Hub::new(config(dir), None).unwrap()
}

pub fn uniform() -> [[f64; 4]; 4] {
    [[0.25; 4]; 4]
}

pub fn one_hot(levels: [usize; 4]) -> [[f64; 4]; 4] {
    let mut p = [[0.0; 4]; 4];
    for (row, l) in p.iter_mut().zip(levels) {
        row[l] = 1.0;
    }
    p
}

/// Starts a server on an ephemeral port; returns its base URL.
pub async fn spawn_server(hub: Hub) -> (String, Arc<Hub>) {
    let hub = Arc::new(hub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(attend_service::serve(hub.clone(), listener, std::future::pending()));
    (format!("http://{addr}"), hub)
}
