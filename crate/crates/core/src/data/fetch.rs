//! Download of the four gzip-compressed MNIST IDX files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use flate2::read::GzDecoder;

use super::idx::{parse_idx_images, parse_idx_labels};
use crate::error::{Error, Result};

pub const DEFAULT_MNIST_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const MAX_DOWNLOAD_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        MnistPaths {
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    fn entries(&self) -> [(&'static str, &Path, bool); 4] {
        [
            (TRAIN_IMAGES, &self.train_images, true),
            (TRAIN_LABELS, &self.train_labels, false),
            (TEST_IMAGES, &self.test_images, true),
            (TEST_LABELS, &self.test_labels, false),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchOutcome {
    pub paths: MnistPaths,
    /// Files actually downloaded; zero means every file was a verified cache hit.
    pub downloaded: usize,
}

fn verify(bytes: &[u8], images: bool, path: &Path) -> Result<()> {
    if images {
        parse_idx_images(bytes, path).map(|_| ())
    } else {
        parse_idx_labels(bytes, path).map(|_| ())
    }
}

fn is_verified(path: &Path, images: bool) -> bool {
    fs::read(path)
        .map(|bytes| verify(&bytes, images, path).is_ok())
        .unwrap_or(false)
}

fn download(agent: &ureq::Agent, url: &str) -> Result<Vec<u8>> {
    let transport = |message: String| Error::Transport {
        url: url.to_string(),
        message,
    };
    let mut response = agent.get(url).call().map_err(|e| match e {
        ureq::Error::StatusCode(code) => transport(format!("HTTP status {code}")),
        other => transport(other.to_string()),
    })?;
    response
        .body_mut()
        .with_config()
        .limit(MAX_DOWNLOAD_BYTES)
        .read_to_vec()
        .map_err(|e| transport(e.to_string()))
}

/// Downloads and decompresses any of the four files not already present and
/// valid in `dest_dir`. Files are written to a temporary name and renamed
/// into place only after their IDX header checks out.
pub fn fetch_mnist(base_url: &str, dest_dir: impl AsRef<Path>) -> Result<FetchOutcome> {
    let dest_dir = dest_dir.as_ref();
    fs::create_dir_all(dest_dir)?;
    let paths = MnistPaths::in_dir(dest_dir);
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into();
    let base = base_url.trim_end_matches('/');
    let mut downloaded = 0;
    for (name, path, images) in paths.entries() {
        if is_verified(path, images) {
            continue;
        }
        let url = format!("{base}/{name}.gz");
        let compressed = download(&agent, &url)?;
        let mut raw = Vec::new();
        GzDecoder::new(compressed.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Error::Integrity {
                path: path.to_path_buf(),
                message: format!("gzip decode failed: {e}"),
            })?;
        verify(&raw, images, path).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &raw)?;
        fs::rename(&tmp, path)?;
        downloaded += 1;
    }
    Ok(FetchOutcome { paths, downloaded })
}
