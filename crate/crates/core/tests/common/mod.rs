//! Minimal HTTP/1.1 file server and tiny IDX fixtures for fetch tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use convexlab_core::data::fetch::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use convexlab_core::data::idx::{encode_idx_images, encode_idx_labels};
use convexlab_core::data::IdxImages;
use flate2::write::GzEncoder;
use flate2::Compression;

pub struct Server {
    pub base_url: String,
    pub requests: Arc<AtomicUsize>,
}

impl Server {
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Serves `files` (path -> body) until the process exits; anything else is 404.
pub fn serve(files: HashMap<String, Vec<u8>>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            loop {
                let mut header = String::new();
                if reader.read_line(&mut header).map(|n| n == 0).unwrap_or(true) || header == "\r\n" {
                    break;
                }
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (status, body) = match files.get(&path) {
                Some(body) => ("200 OK", body.clone()),
                None => ("404 Not Found", b"missing".to_vec()),
            };
            let head = format!(
                "HTTP/1.1 {status}\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    Server {
        base_url: format!("http://{addr}/mnist/"),
        requests,
    }
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

pub fn tiny_images(count: usize) -> IdxImages {
    IdxImages {
        count,
        rows: 2,
        cols: 2,
        pixels: (0..count * 4).map(|i| (i * 37 % 256) as u8).collect(),
    }
}

/// Gzipped fixtures under the names `fetch_mnist` requests.
pub fn mnist_files() -> HashMap<String, Vec<u8>> {
    let labels = |n: usize| (0..n).map(|i| (i % 10) as u8).collect::<Vec<u8>>();
    HashMap::from([
        (format!("/mnist/{TRAIN_IMAGES}.gz"), gzip(&encode_idx_images(&tiny_images(30)))),
        (format!("/mnist/{TRAIN_LABELS}.gz"), gzip(&encode_idx_labels(&labels(30)))),
        (format!("/mnist/{TEST_IMAGES}.gz"), gzip(&encode_idx_images(&tiny_images(10)))),
        (format!("/mnist/{TEST_LABELS}.gz"), gzip(&encode_idx_labels(&labels(10)))),
    ])
}
