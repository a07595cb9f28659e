//! Fixtures shared by the service tests: a constructed slide, a scorer that
//! grades tiles by color, and request helpers.

#![allow(dead_code)]

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use colomil_core::label::ClassProbs;
use colomil_core::scorer::{ScorerError, TileScorer};
use colomil_service::{AppState, JobStatus, Service, ServiceConfig};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use tower::ServiceExt;

pub const PINK: [u8; 3] = [236, 170, 200];
pub const PURPLE: [u8; 3] = [120, 60, 170];
pub const WHITE: [u8; 3] = [250, 250, 250];

/// HG for dark tiles, NNeo otherwise.
pub struct ColorScorer;

impl TileScorer for ColorScorer {
    fn version(&self) -> &str {
        "color-v1"
    }

    fn score(&self, tile: &RgbImage) -> Result<ClassProbs, ScorerError> {
        let n = tile.pixels().len() as f64;
        let red: f64 = tile.pixels().map(|p| p.0[0] as f64).sum::<f64>() / n;
        let p = if red < 160.0 { [0.05, 0.15, 0.8] } else { [0.7, 0.2, 0.1] };
        Ok(ClassProbs::new(p).unwrap())
    }
}

/// 256x192 slide: a 192x128 tissue block of six 64px tiles on a white
/// background. Only the tile at grid (0, 0) is dark; `variant` shifts one
/// background pixel to make distinct content.
pub fn slide_png(variant: u8) -> Vec<u8> {
    let img = RgbImage::from_fn(256, 192, |x, y| {
        if x < 64 && y < 64 {
            Rgb(PURPLE)
        } else if x < 192 && y < 128 {
            Rgb(PINK)
        } else if (x, y) == (255, 191) {
            Rgb([250, 250, 250 - variant])
        } else {
            Rgb(WHITE)
        }
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}

pub fn settings(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        listen: "127.0.0.1:0".into(),
        workdir: dir.to_path_buf(),
        checkpoint: dir.join("unused.ckpt"),
        token_file: None,
        workers: 2,
        tile_size: 64,
        mask_factor: 4,
        tissue_threshold: 1.0,
        top_n: 5,
        batch_infer: 16,
    }
}

pub fn open(cfg: ServiceConfig) -> (Arc<Service>, AppState, Router, Vec<String>) {
    let (svc, pending) = Service::open(cfg, Arc::new(ColorScorer), 64).unwrap();
    let state = AppState::new(svc.clone());
    let app = colomil_service::router(state.clone());
    (svc, state, app, pending)
}

pub fn multipart(files: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "colomil-test-boundary";
    let mut body = Vec::new();
    for (name, bytes) in files {
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"slides\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post("/api/slides")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, v: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call_json(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let (s, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null))
}

pub async fn submit(app: &Router, files: &[(&str, &[u8])]) -> Vec<JobStatus> {
    let (s, b) = call(app, multipart(files)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&b));
    serde_json::from_slice(&b).unwrap()
}

/// Polls until the slide leaves queued/processing.
pub async fn wait_finished(app: &Router, id: &str) -> (JobStatus, Vec<u8>) {
    for _ in 0..600 {
        let (s, b) = call(app, get(&format!("/api/slides/{id}"))).await;
        assert_eq!(s, StatusCode::OK);
        let st: JobStatus = serde_json::from_slice(&b).unwrap();
        if matches!(st.state, colomil_service::store::JobState::Done | colomil_service::store::JobState::Failed) {
            return (st, b);
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("slide {id} did not finish");
}
