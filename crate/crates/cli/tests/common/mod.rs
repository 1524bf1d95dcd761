//! A small model root shared by the CLI and HTTP tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use latent_steer::attribute::{train_discriminator, DiscrimTrainOptions};
use latent_steer::lm::{train_lm, LmConfig, TokenizerKind, TrainOptions, TransformerLm};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn tiny_config() -> LmConfig {
    LmConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        max_context: 48,
        tokenizer_kind: TokenizerKind::Word,
        ..LmConfig::default()
    }
}

/// `lm/default`, `bow/{science,legal}.txt` and `discrim/sentiment`, built
/// once per test binary.
pub fn model_root() -> &'static Path {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir").keep();
        let repo = repo_root();
        let (lm, _) = train_lm(
            &repo.join("data/corpus/toy_corpus.txt"),
            &tiny_config(),
            &TrainOptions { epochs: 1, seed: 5, ..TrainOptions::default() },
        )
        .expect("train tiny lm");
        lm.save(&dir.join("lm/default")).expect("save lm");
        fs::create_dir_all(dir.join("bow")).unwrap();
        for bag in ["science", "legal"] {
            fs::copy(repo.join(format!("data/bow/{bag}.txt")), dir.join(format!("bow/{bag}.txt"))).unwrap();
        }
        let (d, _) = train_discriminator(
            &repo.join("data/discrim/sentiment_toy.tsv"),
            &lm,
            &DiscrimTrainOptions { epochs: 30, ..DiscrimTrainOptions::default() },
        )
        .expect("train discriminator");
        d.save(&dir.join("discrim/sentiment")).expect("save discriminator");
        dir
    })
}

pub fn load_lm() -> TransformerLm<f32> {
    TransformerLm::load(&model_root().join("lm/default")).unwrap()
}
