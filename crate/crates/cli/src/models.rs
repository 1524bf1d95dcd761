//! On-disk model catalogue shared by the CLI and the HTTP service.
//!
//! A model root holds
//!
//! ```text
//! lm/<name>/         language-model checkpoints
//! bow/<name>.txt     bag-of-words lists
//! discrim/<name>/    linear discriminators
//! ```
//!
//! Loaded models are cached and shared read-only.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use latent_steer::attribute::{load_bow, BagOfWords, LinearDiscriminator};
use latent_steer::lm::{Tokenizer, TransformerLm};
use latent_steer::Error;

/// Environment variable naming the default model root.
pub const MODEL_DIR_ENV: &str = "LATENT_STEER_MODEL_DIR";
/// Checkpoint used when a request does not name one.
pub const DEFAULT_CHECKPOINT: &str = "default";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorInfo {
    pub name: String,
    pub classes: Vec<String>,
}

/// Everything a model root offers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub checkpoints: Vec<String>,
    pub bow: Vec<String>,
    pub discriminators: Vec<DiscriminatorInfo>,
}

#[derive(Debug)]
pub struct ModelStore {
    root: PathBuf,
    lms: Mutex<HashMap<String, Arc<TransformerLm<f32>>>>,
    discriminators: Mutex<HashMap<String, Arc<LinearDiscriminator<f32>>>>,
}

/// Names are single path components made of `[A-Za-z0-9_.-]`, not
/// starting with a dot.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn checked(name: &str) -> Result<&str, Error> {
    if valid_name(name) {
        Ok(name)
    } else {
        Err(Error::Config(format!("`{name}` is not a valid model name")))
    }
}

impl ModelStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), lms: Mutex::default(), discriminators: Mutex::default() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lm_path(&self, name: &str) -> PathBuf {
        self.root.join("lm").join(name)
    }

    pub fn bow_path(&self, name: &str) -> PathBuf {
        self.root.join("bow").join(format!("{name}.txt"))
    }

    pub fn discrim_path(&self, name: &str) -> PathBuf {
        self.root.join("discrim").join(name)
    }

    pub fn lm(&self, name: &str) -> Result<Arc<TransformerLm<f32>>, Error> {
        let path = self.lm_path(checked(name)?);
        let mut cache = self.lms.lock().expect("lm cache poisoned");
        if let Some(lm) = cache.get(name) {
            return Ok(lm.clone());
        }
        if !path.is_dir() {
            return Err(Error::MissingPath(path));
        }
        let lm = Arc::new(TransformerLm::<f32>::load(&path)?);
        cache.insert(name.to_string(), lm.clone());
        Ok(lm)
    }

    pub fn bow(&self, name: &str, tokenizer: &Tokenizer) -> Result<BagOfWords, Error> {
        let path = self.bow_path(checked(name)?);
        if !path.is_file() {
            return Err(Error::MissingPath(path));
        }
        load_bow(&path, tokenizer)
    }

    pub fn discriminator(&self, name: &str) -> Result<Arc<LinearDiscriminator<f32>>, Error> {
        let path = self.discrim_path(checked(name)?);
        let mut cache = self.discriminators.lock().expect("discriminator cache poisoned");
        if let Some(d) = cache.get(name) {
            return Ok(d.clone());
        }
        if !path.is_dir() {
            return Err(Error::MissingPath(path));
        }
        let d = Arc::new(LinearDiscriminator::<f32>::load(&path)?);
        cache.insert(name.to_string(), d.clone());
        Ok(d)
    }

    /// Lists the root; unreadable discriminators are skipped.
    pub fn catalog(&self) -> Catalog {
        let bow = list(&self.root.join("bow"), |p| {
            (p.is_file() && p.extension().is_some_and(|e| e == "txt")).then(|| p.file_stem()).flatten()
        });
        let dir_names = |sub: &str| list(&self.root.join(sub), |p| p.is_dir().then(|| p.file_name()).flatten());
        let discriminators = dir_names("discrim")
            .into_iter()
            .filter_map(|name| {
                let d = self.discriminator(&name).ok()?;
                Some(DiscriminatorInfo { name, classes: d.class_names.clone() })
            })
            .collect();
        Catalog { checkpoints: dir_names("lm"), bow, discriminators }
    }
}

fn list(dir: &Path, name_of: impl Fn(&Path) -> Option<&std::ffi::OsStr>) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let path = e.path();
            name_of(&path).and_then(|n| n.to_str()).filter(|n| valid_name(n)).map(String::from)
        })
        .collect();
    out.sort();
    out
}
