#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cdi::formats::dataset;
use cdi::store::Store;
use cdi_core::clustering::KMeansOptions;
use cdi_core::corpus::{make_synthetic_blobs, Corpus};
use cdi_core::discovery::DiscoveryConfig;
use cdi_core::encoder::TrainConfig;
use cdi_core::pipeline::PipelineConfig;
use reqwest::blocking::{multipart, Client};
use serde_json::Value;

pub fn blobs(n: usize, k: usize, dim: usize, seed: u64) -> Corpus {
    make_synthetic_blobs(n, k, dim, 6.0, 1.0, seed).unwrap()
}

/// A configuration small enough for a session to iterate in well under a second.
pub fn fast_config(seed: u64) -> DiscoveryConfig {
    DiscoveryConfig {
        seed,
        k_prime: 20,
        max_iterations: 6,
        pipeline: PipelineConfig {
            train: TrainConfig { epochs: 2, batch_size: 32, seed, ..TrainConfig::default() },
            ucl_epochs: Some(1),
            hidden_dim: 16,
            stage2_max_rounds: 2,
            kmeans: KMeansOptions { n_init: 2, ..KMeansOptions::default() },
            ..PipelineConfig::default()
        },
        ..DiscoveryConfig::default()
    }
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> (PathBuf, PathBuf) {
    let d = dir.join("dataset.jsonl");
    let e = dir.join("embeddings.cdie");
    dataset::save_corpus(corpus, &d, &e).unwrap();
    (d, e)
}

/// Starts the service on an ephemeral port in a background thread.
pub fn spawn_server(store: &Path) -> String {
    let store = Store::open(store).unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            cdi::service::serve(listener, store).await.unwrap();
        });
    });
    format!("http://{addr}")
}

pub fn upload(client: &Client, base: &str, dataset: &Path, embeddings: &Path) -> Value {
    let form = multipart::Form::new()
        .part("dataset", multipart::Part::bytes(std::fs::read(dataset).unwrap()))
        .part("embeddings", multipart::Part::bytes(std::fs::read(embeddings).unwrap()));
    let resp = client.post(format!("{base}/corpora")).multipart(form).send().unwrap();
    assert_eq!(resp.status(), 201);
    resp.json().unwrap()
}

pub fn wait_job(client: &Client, base: &str, job_id: &str) -> Value {
    let start = Instant::now();
    loop {
        let job: Value = client.get(format!("{base}/jobs/{job_id}")).send().unwrap().json().unwrap();
        if job["status"] != "running" {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job {job_id} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}
