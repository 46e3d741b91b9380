//! Local weight store.
//!
//! Each model id has a directory `<root>/<id>/` holding its files and a
//! `manifest.json` listing every file with its source URL and SHA-256.
//! Nothing here touches the network; downloads are done by the command-line
//! front end, which writes the manifest after hashing what it fetched.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use hiseg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the weights root.
pub const WEIGHTS_ENV: &str = "HISEG_WEIGHTS";

pub const MANIFEST: &str = "manifest.json";

/// Model ids with built-in download sources.
pub const KNOWN_IDS: [&str; 3] = ["vit_b_16", "vit_l_14", "sd"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightFile {
    /// File name inside the model directory.
    pub name: String,
    pub url: String,
    /// Lowercase hex digest; absent until the file has been hashed once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub id: String,
    pub files: Vec<WeightFile>,
}

impl WeightsManifest {
    pub fn file(&self, name: &str) -> Option<&WeightFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

fn hf(repo: &str, path: &str) -> String {
    format!("https://huggingface.co/{repo}/resolve/main/{path}")
}

fn file(name: &str, url: String) -> WeightFile {
    WeightFile {
        name: name.into(),
        url,
        sha256: None,
    }
}

/// Download sources for a known id, without checksums.
pub fn known_sources(id: &str) -> Option<WeightsManifest> {
    let files = match id {
        "vit_b_16" => vec![
            file("model.safetensors", hf("openai/clip-vit-base-patch16", "model.safetensors")),
            file("tokenizer.json", hf("openai/clip-vit-base-patch16", "tokenizer.json")),
        ],
        "vit_l_14" => vec![
            file("model.safetensors", hf("openai/clip-vit-large-patch14", "model.safetensors")),
            file("tokenizer.json", hf("openai/clip-vit-large-patch14", "tokenizer.json")),
        ],
        "sd" => {
            let repo = "stabilityai/stable-diffusion-2-1-base";
            vec![
                file("unet.safetensors", hf(repo, "unet/diffusion_pytorch_model.safetensors")),
                file("vae.safetensors", hf(repo, "vae/diffusion_pytorch_model.safetensors")),
                file("text_encoder.safetensors", hf(repo, "text_encoder/model.safetensors")),
            ]
        }
        _ => return None,
    };
    Some(WeightsManifest { id: id.into(), files })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Files of one model, located and checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedWeights {
    pub id: String,
    pub dir: PathBuf,
    pub files: BTreeMap<String, PathBuf>,
    /// `"<id>/<file>"` to hex digest.
    pub checksums: BTreeMap<String, String>,
}

impl ResolvedWeights {
    pub fn path(&self, name: &str) -> Result<&Path> {
        self.files
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::environment(format!("weights `{}` have no file `{name}`", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightsRoot {
    root: PathBuf,
}

impl WeightsRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$HISEG_WEIGHTS`, or `./weights`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(WEIGHTS_ENV).map_or_else(|| PathBuf::from("weights"), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn manifest(&self, id: &str) -> Result<WeightsManifest> {
        let path = self.dir(id).join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::environment(format!(
                "no weights for `{id}`: {} is missing (run `hiseg fetch-weights {id}` or set {WEIGHTS_ENV})",
                path.display()
            ))
        })?;
        let m: WeightsManifest = serde_json::from_str(&text)
            .map_err(|e| Error::environment(format!("unreadable weights manifest {}: {e}", path.display())))?;
        if m.id != id {
            return Err(Error::environment(format!(
                "{} describes `{}`, expected `{id}`",
                path.display(),
                m.id
            )));
        }
        Ok(m)
    }

    pub fn write_manifest(&self, m: &WeightsManifest) -> Result<()> {
        let dir = self.dir(&m.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let json = serde_json::to_string_pretty(m).expect("manifest serialises") + "\n";
        hiseg_core::report::write_atomic(&dir.join(MANIFEST), json.as_bytes())
    }

    /// Locates every manifest file and checks its digest. Files without a
    /// recorded digest are hashed and reported, but cannot be checked.
    pub fn resolve(&self, id: &str) -> Result<ResolvedWeights> {
        let m = self.manifest(id)?;
        let dir = self.dir(id);
        let mut files = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        for f in &m.files {
            let path = dir.join(&f.name);
            if !path.is_file() {
                return Err(Error::environment(format!(
                    "weights `{id}`: {} is missing",
                    path.display()
                )));
            }
            let digest = sha256_file(&path)?;
            match &f.sha256 {
                Some(expected) if !expected.eq_ignore_ascii_case(&digest) => {
                    return Err(Error::environment(format!(
                        "weights `{id}`: checksum mismatch for {} (manifest {expected}, file {digest})",
                        path.display()
                    )));
                }
                Some(_) => {}
                None => log::warn!("weights `{id}`: {} has no recorded checksum", f.name),
            }
            checksums.insert(format!("{id}/{}", f.name), digest);
            files.insert(f.name.clone(), path);
        }
        Ok(ResolvedWeights {
            id: id.into(),
            dir,
            files,
            checksums,
        })
    }
}
