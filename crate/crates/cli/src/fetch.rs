//! `fetch-weights`: download model files and record their checksums.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use hiseg_core::{Error, Result};
use hiseg_models::weights::{known_sources, sha256_file};
use hiseg_models::WeightsRoot;
use sha2::{Digest, Sha256};

/// Streams `url` to `dest`, returning the SHA-256 of the bytes written.
fn download(url: &str, dest: &Path) -> Result<String> {
    let mut req = ureq::get(url);
    if let Ok(token) = std::env::var("HF_TOKEN") {
        req = req.header("Authorization", format!("Bearer {token}"));
    }
    let resp = req.call().map_err(|e| Error::environment(format!("cannot download {url}: {e}")))?;
    let mut body = resp.into_body().into_reader();
    let part = dest.with_extension("part");
    let mut file = File::create(&part).map_err(|e| Error::io(&part, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut total = 0u64;
    loop {
        let n = body
            .read(&mut buf)
            .map_err(|e| Error::environment(format!("download of {url} interrupted: {e}")))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        file.write_all(&buf[..n]).map_err(|e| Error::io(&part, e))?;
        total += n as u64;
    }
    file.sync_all().map_err(|e| Error::io(&part, e))?;
    std::fs::rename(&part, dest).map_err(|e| Error::io(dest, e))?;
    log::info!("{}: {total} bytes", dest.display());
    Ok(hex::encode(hasher.finalize()))
}

pub fn fetch(root: &WeightsRoot, ids: &[String], force: bool) -> Result<()> {
    // check every id before downloading anything
    let mut manifests = ids
        .iter()
        .map(|id| known_sources(id).ok_or_else(|| Error::config(format!("unknown weights id `{id}` (expected vit_b_16, vit_l_14 or sd)"))))
        .collect::<Result<Vec<_>>>()?;
    for m in &mut manifests {
        let dir = root.dir(&m.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in &mut m.files {
            let path = dir.join(&f.name);
            let digest = if path.is_file() && !force {
                log::info!("{} present, hashing", path.display());
                sha256_file(&path)?
            } else {
                println!("downloading {}", f.url);
                download(&f.url, &path)?
            };
            if let Some(pinned) = &f.sha256 {
                if *pinned != digest {
                    return Err(Error::environment(format!(
                        "checksum mismatch for {}: expected {pinned}, got {digest}",
                        path.display()
                    )));
                }
            }
            f.sha256 = Some(digest);
        }
        root.write_manifest(m)?;
        println!("{}: {} files in {}", m.id, m.files.len(), dir.display());
    }
    Ok(())
}
