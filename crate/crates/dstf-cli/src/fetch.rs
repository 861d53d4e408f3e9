//! MNIST download: fetches the four gzipped idx files, validates their
//! headers, and installs them uncompressed. Already-valid files are kept,
//! so reruns are cheap and offline-safe once the data is in place.

use dstf::data::{parse_idx_images, parse_idx_labels};
use dstf::{Error, Result};
use std::io::Read;
use std::path::Path;

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// Response size cap; the largest file is ~10 MB compressed.
const MAX_BYTES: u64 = 128 * 1024 * 1024;

const FILES: [(&str, bool); 4] = [
    ("train-images-idx3-ubyte.gz", true),
    ("train-labels-idx1-ubyte.gz", false),
    ("t10k-images-idx3-ubyte.gz", true),
    ("t10k-labels-idx1-ubyte.gz", false),
];

pub fn cmd_fetch(dir: &Path, base_url: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let base = if base_url.ends_with('/') {
        base_url.to_string()
    } else {
        format!("{base_url}/")
    };
    for (gz_name, is_images) in FILES {
        let dest = dir.join(gz_name.trim_end_matches(".gz"));
        if let Ok(existing) = std::fs::read(&dest) {
            if validate_idx(&existing, is_images).is_ok() {
                eprintln!("keeping {}", dest.display());
                continue;
            }
            eprintln!("re-fetching {} (existing file is invalid)", dest.display());
        }
        let url = format!("{base}{gz_name}");
        eprintln!("fetching {url}");
        let gz = http_get(&url)?;
        let raw = gunzip(&gz).map_err(|e| Error::Data(format!("{gz_name}: {e}")))?;
        validate_idx(&raw, is_images).map_err(|e| Error::Data(format!("{gz_name}: {e}")))?;
        std::fs::write(&dest, raw)?;
        eprintln!("wrote {}", dest.display());
    }
    Ok(())
}

fn http_get(url: &str) -> Result<Vec<u8>> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Error::Data(format!("GET {url}: {e}")))?;
    response
        .body_mut()
        .with_config()
        .limit(MAX_BYTES)
        .read_to_vec()
        .map_err(|e| Error::Data(format!("reading {url}: {e}")))
}

fn gunzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

fn validate_idx(bytes: &[u8], is_images: bool) -> Result<()> {
    if is_images {
        parse_idx_images(bytes).map(|_| ())
    } else {
        parse_idx_labels(bytes).map(|_| ())
    }
}
