//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in a
//! fixed order and share the trained toy models. Every tolerance lives in
//! the constants below. The process exits non-zero when any criterion
//! fails.
//!
//! | # | Criterion |
//! |---|-----------|
//! | 1 | analytic ∂/∂ΔH matches central differences |
//! | 2 | disabled steering reproduces plain sampling |
//! | 3 | incremental and full-forward logits agree |
//! | 4 | bag-of-words uplift ordering and paired test |
//! | 5 | discriminator steering, both directions |
//! | 6 | metric oracles |
//! | 7 | ranking winner survives re-ranking from JSON lines |
//! | 8 | determinism across runs, frozen checkpoints |

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use latent_steer::attribute::{
    load_bow, train_discriminator, AttributeTarget, BagOfWords, DiscrimContext, DiscrimTrainOptions,
    LinearDiscriminator, ObjectiveSign,
};
use latent_steer::eval::{
    perplexity, run_experiment, weighted_decode_bow, AttributeSpec, ExperimentConfig, ExperimentPlan, SAMPLES_FILE,
};
use latent_steer::lm::{train_lm, History, LmConfig, TokenId, TokenizerKind, TrainOptions, TransformerLm};
use latent_steer::metrics::{dist_n, passage_dist};
use latent_steer::scalar::Scalar;
use latent_steer::steer::{
    fuse_distributions, generate, generate_ranked, prime_history, steering_objective, DeltaH, SampleRecord,
    SteeringConfig, Variant,
};
use latent_steer::tensor::Tensor;

// ── Tolerances ────────────────────────────────────────────────────────────

/// Central-difference step for the gradient check.
const FD_EPS: f64 = 1e-3;
/// Largest accepted relative error between analytic and numeric gradients.
const FD_MAX_REL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely instead.
const FD_REL_FLOOR: f64 = 1e-2;
const FD_BUDGET: Duration = Duration::from_secs(60);

const NOOP_SEEDS: u64 = 10;
const NOOP_LENGTH: usize = 16;

const KV_PROMPTS: usize = 20;
const KV_MAX_LEN: usize = 32;
const KV_TOL: f64 = 1e-5;

/// Bag-of-words uplift: prefixes × seeds per bag, one-sided level, budget.
const UPLIFT_PREFIXES: usize = 5;
const UPLIFT_SEEDS: u64 = 20;
const UPLIFT_LENGTH: usize = 20;
/// Step size for the uplift experiment (the library default is 0.01).
const UPLIFT_STEPSIZE: f64 = 0.2;
const UPLIFT_BUDGET: Duration = Duration::from_secs(600);
const UPLIFT_BAGS: [&str; 3] = ["science", "military", "legal"];

const DISCRIM_MIN_HELDOUT: f64 = 0.9;
const DISCRIM_SEEDS: u64 = 20;
const DISCRIM_LENGTH: usize = 20;
const DISCRIM_PREFIXES: usize = 5;

const ALPHA: f64 = 0.05;

const DIST_SEQUENCES: usize = 200;
const EXACT: f64 = 1e-12;
/// Relative slack for `exp(ln V)`, which rounds to one ulp below `V`.
const PPL_TOL: f64 = 1e-12;

const RANK_RUNS: usize = 50;

// ── Shared fixtures ───────────────────────────────────────────────────────

fn generator_config() -> LmConfig {
    LmConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 64,
        max_context: 64,
        tokenizer_kind: TokenizerKind::Word,
        ..LmConfig::default()
    }
}

fn evaluator_config() -> LmConfig {
    LmConfig { max_context: 64, tokenizer_kind: TokenizerKind::Word, ..LmConfig::evaluator() }
}

struct Fixture {
    root: PathBuf,
    artifacts: tempfile::TempDir,
    lm: TransformerLm<f32>,
    discriminator: LinearDiscriminator<f32>,
    heldout_accuracy: f64,
    hashes: BTreeMap<PathBuf, String>,
}

impl Fixture {
    fn lm_dir(&self) -> PathBuf {
        self.artifacts.path().join("lm")
    }
    fn evaluator_dir(&self) -> PathBuf {
        self.artifacts.path().join("evaluator")
    }
    fn discrim_dir(&self) -> PathBuf {
        self.artifacts.path().join("discrim")
    }

    fn prefixes(&self, file: &str) -> Vec<String> {
        fs::read_to_string(self.root.join("data/prefixes").join(file))
            .expect("prefix list")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect()
    }

    fn bag(&self, name: &str) -> BagOfWords {
        load_bow(&self.root.join(format!("data/bow/{name}.txt")), self.lm.tokenizer()).expect("bag")
    }
}

fn build_fixture() -> Fixture {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let corpus = root.join("data/corpus/toy_corpus.txt");
    let artifacts = tempfile::tempdir().expect("tempdir");

    let started = Instant::now();
    let (lm, report) =
        train_lm(&corpus, &generator_config(), &TrainOptions { epochs: 15, seed: 1, ..TrainOptions::default() })
            .expect("train generator");
    lm.save(&artifacts.path().join("lm")).expect("save generator");
    let (evaluator, _) =
        train_lm(&corpus, &evaluator_config(), &TrainOptions { epochs: 10, seed: 2, ..TrainOptions::default() })
            .expect("train evaluator");
    evaluator.save(&artifacts.path().join("evaluator")).expect("save evaluator");
    let (discriminator, drep) =
        train_discriminator(&root.join("data/discrim/sentiment_toy.tsv"), &lm, &DiscrimTrainOptions::default())
            .expect("train discriminator");
    discriminator.save(&artifacts.path().join("discrim")).expect("save discriminator");
    println!(
        "setup: generator held-out loss {:.3}, discriminator held-out accuracy {:.3} ({:.1?})",
        report.final_loss(),
        drep.heldout_accuracy,
        started.elapsed()
    );

    // Everything below runs on the reloaded checkpoints.
    let lm = TransformerLm::<f32>::load(&artifacts.path().join("lm")).expect("reload generator");
    let discriminator =
        LinearDiscriminator::<f32>::load(&artifacts.path().join("discrim")).expect("reload discriminator");
    let hashes = hash_tree(artifacts.path());
    Fixture { root, artifacts, lm, discriminator, heldout_accuracy: drep.heldout_accuracy, hashes }
}

fn hash_tree(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(fs::read(&path).expect("read"));
                out.insert(path, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

// ── Statistics ────────────────────────────────────────────────────────────

/// Paired differences: mean, t statistic, and the one-sided p-value for
/// `mean > 0`.
struct Paired {
    mean: f64,
    t: f64,
    p_greater: f64,
}

fn paired(diffs: &[f64]) -> Paired {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = if sd > 0.0 { mean / (sd / n.sqrt()) } else { f64::INFINITY.copysign(mean) };
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("t distribution");
    Paired { mean, t, p_greater: 1.0 - dist.cdf(t) }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ── Criteria ──────────────────────────────────────────────────────────────

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const FD_TEXT: &str = "the cat sat on the mat while the dog ran to the park and the bird sang a song about \
                       science and data and the lab ran a test on the model";

fn fd_worst(lm: &TransformerLm<f64>, target: &AttributeTarget<f64>, kl_scale: f64, prompt: &str, seed: u64) -> f64 {
    let tokens = lm.tokenizer().encode(prompt);
    let (h, outs) = prime_history(lm, &tokens[..tokens.len() - 1]).unwrap();
    let mut ctx = DiscrimContext::new(lm.config().d_model);
    outs.iter().for_each(|o| ctx.push(o.data()));
    let x_t = *tokens.last().unwrap();
    let (o, _) = lm.lm_step(x_t, &h).unwrap();
    let logp: Vec<f64> = lm.logits_to_probs(&o).unwrap().iter().map(|p| p.ln()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = DeltaH::zeros_like(&h);
    for (k, v) in delta.layers_mut() {
        k.iter_mut().chain(v.iter_mut()).for_each(|x| *x = 0.2 * (rng.gen::<f64>() - 0.5));
    }
    let objective =
        |d: &DeltaH<f64>| steering_objective(lm, &h, d, x_t, target, kl_scale, &logp, &ctx, false).unwrap().0.total;
    let grads = steering_objective(lm, &h, &delta, x_t, target, kl_scale, &logp, &ctx, true).unwrap().1.unwrap();

    let n_coords = delta.layers()[0].0.len();
    let coords: Vec<(usize, usize, usize)> =
        (0..h.n_layers()).flat_map(|l| (0..2).flat_map(move |w| (0..n_coords).map(move |i| (l, w, i)))).collect();
    coords
        .par_iter()
        .map(|&(layer, which, i)| {
            let bumped = |by: f64| {
                let mut d = delta.clone();
                let (k, v) = &mut d.layers_mut()[layer];
                if which == 0 {
                    k[i] += by;
                } else {
                    v[i] += by;
                }
                objective(&d)
            };
            let numeric = (bumped(FD_EPS) - bumped(-FD_EPS)) / (2.0 * FD_EPS);
            let analytic = if which == 0 { grads[layer].0[i] } else { grads[layer].1[i] };
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
        })
        .reduce(|| 0.0, f64::max)
}

fn criterion_1() -> Verdict {
    use latent_steer::lm::{Tokenizer, WordVocab};
    let started = Instant::now();
    let cfg = LmConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        max_context: 24,
        tokenizer_kind: TokenizerKind::Word,
        ..LmConfig::default()
    };
    let lm = TransformerLm::<f64>::init(&cfg, Tokenizer::Word(WordVocab::build(FD_TEXT)), 3).unwrap();
    let words = ["science", "data", "lab", "test", "model"].map(String::from).to_vec();
    let bow =
        AttributeTarget::bow(BagOfWords::from_words("science", words, lm.tokenizer()).unwrap(), ObjectiveSign::Plus);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let disc = LinearDiscriminator {
        weights: Tensor::randn(&[2, 32], 0.5, &mut rng),
        bias: Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(),
        class_names: vec!["negative".into(), "positive".into()],
    };
    let discrim = AttributeTarget::discriminator(disc, 1, ObjectiveSign::Plus).unwrap();

    let prompt = "the cat sat on the mat";
    let bow_err = fd_worst(&lm, &bow, 0.0, prompt, 9);
    let disc_err = fd_worst(&lm, &discrim, 0.0, prompt, 9);
    let combined_err = fd_worst(&lm, &bow, 0.5, prompt, 10).max(fd_worst(&lm, &discrim, 0.5, prompt, 10));
    let elapsed = started.elapsed();
    let worst = bow_err.max(disc_err).max(combined_err);
    verdict(
        worst < FD_MAX_REL && elapsed < FD_BUDGET,
        format!(
            "max rel err bow {bow_err:.2e}, discrim {disc_err:.2e}, with KL {combined_err:.2e} (< {FD_MAX_REL:e}); {elapsed:.1?} (< {FD_BUDGET:?})"
        ),
    )
}

fn criterion_2(fx: &Fixture) -> Verdict {
    let target = AttributeTarget::bow(fx.bag("science"), ObjectiveSign::Plus);
    let prefixes = fx.prefixes("bow.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for i in 0..NOOP_SEEDS {
        let seed = rng.gen::<u64>() >> 16;
        let base = SteeringConfig { seed, ..SteeringConfig::bow_defaults() };
        let prompt = &prefixes[i as usize % prefixes.len()];
        let b = generate(&fx.lm, prompt, NOOP_LENGTH, Some(&target), &base, Variant::B).unwrap();
        for cfg in
            [SteeringConfig { num_iterations: 0, ..base.clone() }, SteeringConfig { stepsize: 0.0, ..base.clone() }]
        {
            let bc = generate(&fx.lm, prompt, NOOP_LENGTH, Some(&target), &cfg, Variant::BC).unwrap();
            mismatches += usize::from(bc.tokens != b.tokens);
        }
    }
    let mut fuse_ok = true;
    for _ in 0..50 {
        let raw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..17).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p_mod, p_base) = (raw(&mut rng), raw(&mut rng));
        fuse_ok &= fuse_distributions(&p_mod, &p_base, 1.0).probs == p_mod;
        fuse_ok &= fuse_distributions(&p_mod, &p_base, 0.0).probs == p_base;
    }
    verdict(
        mismatches == 0 && fuse_ok,
        format!(
            "{} BC runs (m=0, α=0) vs B: {mismatches} token mismatches; fusion endpoints exact: {fuse_ok}",
            2 * NOOP_SEEDS
        ),
    )
}

fn incremental_logits<S: Scalar>(lm: &TransformerLm<S>, tokens: &[TokenId]) -> Vec<Vec<S>> {
    let p = lm.params();
    let v = p.b_out.len();
    let mut h: History<S> = lm.empty_history();
    let mut rows = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (o, next) = lm.lm_step(t, &h).unwrap();
        let mut logits = p.b_out.data().to_vec();
        for (i, &x) in o.data().iter().enumerate() {
            for (l, &w) in logits.iter_mut().zip(&p.w_out.data()[i * v..(i + 1) * v]) {
                *l += x * w;
            }
        }
        rows.push(logits);
        h = next;
    }
    rows
}

fn max_cache_gap<S: Scalar>(lm: &TransformerLm<S>, prompts: &[Vec<TokenId>]) -> f64 {
    let mut worst = 0.0f64;
    for tokens in prompts {
        let full = lm.forward_logits(tokens).unwrap();
        for (i, row) in incremental_logits(lm, tokens).iter().enumerate() {
            for (a, b) in row.iter().zip(full.row_slice(i)) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
        }
    }
    worst
}

fn criterion_3(fx: &Fixture) -> Verdict {
    let vocab = fx.lm.params().b_out.len();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let prompts: Vec<Vec<TokenId>> = (0..KV_PROMPTS)
        .map(|_| {
            let len = rng.gen_range(1..=KV_MAX_LEN);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect();
    let gap64 = max_cache_gap(&fx.lm.cast::<f64>(), &prompts);
    let gap32 = max_cache_gap(&fx.lm, &prompts);
    verdict(
        gap64 < KV_TOL && gap32 < KV_TOL,
        format!("{KV_PROMPTS} prompts of length ≤ {KV_MAX_LEN}: max |Δlogit| f64 {gap64:.2e}, f32 {gap32:.2e} (< {KV_TOL:e})"),
    )
}

fn criterion_4(fx: &Fixture) -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("single-thread pool");
    let started = Instant::now();
    let prefixes = fx.prefixes("bow.txt");
    let base = SteeringConfig { stepsize: UPLIFT_STEPSIZE, ..SteeringConfig::bow_defaults() };
    let variants = [Variant::B, Variant::BR, Variant::BC, Variant::BCR];
    // step[v] and text[v] collect per-sample scores for every bag in order.
    let mut step: Vec<Vec<f64>> = vec![vec![]; variants.len()];
    let mut text: Vec<Vec<f64>> = vec![vec![]; variants.len()];
    let mut per_bag = Vec::new();
    pool.install(|| {
        for name in UPLIFT_BAGS {
            let target = AttributeTarget::bow(fx.bag(name), ObjectiveSign::Plus);
            let offset = step[0].len();
            for p in &prefixes[..UPLIFT_PREFIXES] {
                for s in 0..UPLIFT_SEEDS {
                    let cfg = SteeringConfig { seed: s * 1000, ..base.clone() };
                    for (vi, &v) in variants.iter().enumerate() {
                        let r = if v.is_ranked() {
                            generate_ranked(&fx.lm, p, UPLIFT_LENGTH, &target, &cfg, v).unwrap().best
                        } else {
                            generate(&fx.lm, p, UPLIFT_LENGTH, Some(&target), &cfg, v).unwrap()
                        };
                        step[vi].push(r.mean_step_attr_ll().unwrap());
                        text[vi].push(r.mean_attr_ll.unwrap());
                    }
                }
            }
            let diffs: Vec<f64> = (offset..step[0].len()).map(|i| step[2][i] - step[0][i]).collect();
            per_bag.push((name, paired(&diffs)));
        }
    });
    let elapsed = started.elapsed();
    let m: Vec<f64> = step.iter().map(|v| mean(v)).collect();
    let ordered = m[3] >= m[2] && m[2] > m[1] && m[1] >= m[0];
    let pooled = paired(&step[2].iter().zip(&step[0]).map(|(c, b)| c - b).collect::<Vec<_>>());
    let bags_ok = per_bag.iter().all(|(_, t)| t.p_greater < ALPHA);
    let t_m: Vec<f64> = text.iter().map(|v| mean(v)).collect();
    println!(
        "INFO 4: text-grounded bag log-likelihood B {:.3} BR {:.3} BC {:.3} BCR {:.3}",
        t_m[0], t_m[1], t_m[2], t_m[3]
    );
    let bag_detail: Vec<String> =
        per_bag.iter().map(|(n, t)| format!("{n} Δ{:+.3} p={:.1e}", t.mean, t.p_greater)).collect();
    verdict(
        ordered && pooled.p_greater < ALPHA && bags_ok && elapsed < UPLIFT_BUDGET,
        format!(
            "per-step bag LL B {:.3} BR {:.3} BC {:.3} BCR {:.3}; BC−B t={:.2} p={:.1e} [{}]; {:.0?} single-threaded",
            m[0],
            m[1],
            m[2],
            m[3],
            pooled.t,
            pooled.p_greater,
            bag_detail.join(", "),
            elapsed
        ),
    )
}

fn criterion_5(fx: &Fixture) -> Verdict {
    let prefixes = fx.prefixes("discrim.txt");
    let positive = fx.discriminator.class_index("positive").expect("positive class");
    let base = SteeringConfig::discrim_defaults();
    let effect = |sign: ObjectiveSign| {
        let target = AttributeTarget::discriminator(fx.discriminator.clone(), positive, sign).unwrap();
        let diffs: Vec<f64> = (0..DISCRIM_SEEDS)
            .into_par_iter()
            .map(|s| {
                let cfg = SteeringConfig { seed: s * 1000, objective_sign: sign, ..base.clone() };
                let p = &prefixes[s as usize % DISCRIM_PREFIXES];
                let b = generate(&fx.lm, p, DISCRIM_LENGTH, Some(&target), &cfg, Variant::B).unwrap();
                let r = generate_ranked(&fx.lm, p, DISCRIM_LENGTH, &target, &cfg, Variant::BCR).unwrap().best;
                r.mean_attr_ll.unwrap() - b.mean_attr_ll.unwrap()
            })
            .collect();
        paired(&diffs)
    };
    let plus = effect(ObjectiveSign::Plus);
    let minus = effect(ObjectiveSign::Minus);
    let accurate = fx.heldout_accuracy >= DISCRIM_MIN_HELDOUT;
    verdict(
        accurate && plus.mean > 0.0 && plus.p_greater < ALPHA && minus.mean < 0.0,
        format!(
            "held-out acc {:.3} (≥ {DISCRIM_MIN_HELDOUT}); log p(positive) BCR−B {:+.3} (t={:.2}, p={:.1e}); negated {:+.3} (t={:.2}, p={:.1e})",
            fx.heldout_accuracy,
            plus.mean,
            plus.t,
            plus.p_greater,
            minus.mean,
            minus.t,
            1.0 - minus.p_greater
        ),
    )
}

fn brute_dist(seqs: &[Vec<TokenId>], n: usize) -> f64 {
    let mut grams = Vec::new();
    for s in seqs {
        if s.len() >= n {
            for i in 0..=s.len() - n {
                grams.push(s[i..i + n].to_vec());
            }
        }
    }
    let distinct: HashSet<Vec<TokenId>> = grams.iter().cloned().collect();
    if grams.is_empty() {
        0.0
    } else {
        distinct.len() as f64 / grams.len() as f64
    }
}

fn criterion_6() -> Verdict {
    use latent_steer::lm::{Tokenizer, WordVocab};
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut dist_ok = true;
    for _ in 0..DIST_SEQUENCES {
        let batch: Vec<Vec<TokenId>> = (0..rng.gen_range(1..4))
            .map(|_| (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        for n in 1..=3 {
            dist_ok &= (dist_n(&batch, n) - brute_dist(&batch, n)).abs() < EXACT;
        }
    }
    let d = passage_dist(&[0, 1, 0, 1]);
    let example_ok =
        (d.dist1 - 0.5).abs() < EXACT && (d.dist2 - 2.0 / 3.0).abs() < EXACT && (d.dist3 - 1.0).abs() < EXACT;

    let tok = Tokenizer::Word(WordVocab::build("a b c"));
    let bag = BagOfWords::from_words("b", vec!["b".into()], &tok).unwrap();
    let mut p = vec![0.0f64; tok.vocab_size()];
    let ids: Vec<TokenId> = ["a", "b", "c"].iter().map(|w| tok.encode(w)[0]).collect();
    ids.iter().zip([0.5, 0.3, 0.2]).for_each(|(&i, v)| p[i] = v);
    let q = weighted_decode_bow(&p, &bag, 10.0);
    let wd: Vec<f64> = ids.iter().map(|&i| q[i]).collect();
    let wd_ok = wd.iter().zip([0.125, 0.825, 0.05]).all(|(a, b)| (a - b).abs() < EXACT);

    let cfg = LmConfig { n_layers: 1, n_heads: 2, d_model: 8, max_context: 16, ..LmConfig::default() };
    let mut lm = TransformerLm::<f64>::init(&cfg, latent_steer::lm::Tokenizer::Byte, 1).unwrap();
    lm.params_mut().w_out = std::sync::Arc::new(Tensor::zeros(&[8, 256]));
    lm.params_mut().b_out = std::sync::Arc::new(Tensor::zeros(&[256]));
    let tokens = lm.tokenizer().encode("uniform evaluator check");
    let ppl = perplexity(&lm, &tokens).unwrap();
    let ppl_ok = (ppl - 256.0).abs() < PPL_TOL * 256.0;
    verdict(
        dist_ok && example_ok && wd_ok && ppl_ok,
        format!(
            "dist_n vs brute force on {DIST_SEQUENCES} batches: {dist_ok}; [a,b,a,b] → ({:.4}, {:.4}, {:.4}); WD → {wd:.4?}; uniform perplexity {ppl:.9} (V=256)",
            d.dist1, d.dist2, d.dist3
        ),
    )
}

/// Re-ranks persisted samples without the library's selection routine.
fn rerank(samples: &[SampleRecord], threshold: f64, sign: f64) -> (usize, bool) {
    let score = |s: &SampleRecord| sign * s.mean_attr_ll.unwrap();
    let best_of = |idx: Vec<usize>| {
        let mut best: Option<usize> = None;
        for i in idx {
            if best.is_none_or(|b| score(&samples[i]) > score(&samples[b])) {
                best = Some(i);
            }
        }
        best
    };
    match best_of((0..samples.len()).filter(|&i| samples[i].mean_dist >= threshold).collect()) {
        Some(i) => (i, false),
        None => (best_of((0..samples.len()).collect()).unwrap(), true),
    }
}

fn criterion_7(fx: &Fixture) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let prefixes = fx.prefixes("bow.txt");
    let bags = ["science", "military", "legal", "space"].map(|n| fx.bag(n));
    let positive = fx.discriminator.class_index("positive").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut agree, mut fallbacks) = (0usize, 0usize);
    for run in 0..RANK_RUNS {
        let sign = if rng.gen_bool(0.5) { ObjectiveSign::Plus } else { ObjectiveSign::Minus };
        let target = if rng.gen_bool(0.7) {
            AttributeTarget::bow(bags[rng.gen_range(0..bags.len())].clone(), sign)
        } else {
            AttributeTarget::discriminator(fx.discriminator.clone(), positive, sign).unwrap()
        };
        let base = if target.is_bow() { SteeringConfig::bow_defaults() } else { SteeringConfig::discrim_defaults() };
        // Every fifth run demands a repeat-free passage of 40 tokens, which
        // top-k sampling from the toy model essentially never produces.
        let forced = run % 5 == 0;
        let threshold = if forced { 1.0 } else { rng.gen_range(0.5..1.0) };
        let length = if forced { 40 } else { rng.gen_range(4..10) };
        let cfg = SteeringConfig {
            seed: rng.gen::<u64>() >> 20,
            num_samples: rng.gen_range(2..=6),
            num_iterations: rng.gen_range(1..=3),
            dist_threshold: threshold,
            objective_sign: sign,
            ..base
        };
        let variant = if rng.gen_bool(0.5) { Variant::BR } else { Variant::BCR };
        let prompt = &prefixes[rng.gen_range(0..prefixes.len())];
        let ranked = generate_ranked(&fx.lm, prompt, length, &target, &cfg, variant).unwrap();

        let path = dir.path().join(format!("run{run:02}.jsonl"));
        let lines: Vec<String> = ranked.all.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let persisted: Vec<SampleRecord> =
            fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();

        let (idx, fallback) = rerank(&persisted, threshold, sign.value());
        fallbacks += usize::from(fallback);
        let winner_matches = SampleRecord { fallback, ..persisted[idx].clone() } == ranked.best;
        agree += usize::from(idx == ranked.best_index && fallback == ranked.best.fallback && winner_matches);
    }
    verdict(
        agree == RANK_RUNS && fallbacks > 0,
        format!(
            "{agree}/{RANK_RUNS} winners reproduced from persisted samples, {fallbacks} via the all-filtered fallback"
        ),
    )
}

fn criterion_8(fx: &Fixture) -> Verdict {
    let plan = ExperimentPlan {
        lm: fx.lm_dir(),
        evaluator: fx.evaluator_dir(),
        attributes: vec![
            AttributeSpec::Bow { path: fx.root.join("data/bow/science.txt"), objective_sign: ObjectiveSign::Plus },
            AttributeSpec::Discriminator {
                path: fx.discrim_dir(),
                class: "positive".into(),
                objective_sign: ObjectiveSign::Plus,
            },
        ],
        prefixes: fx.prefixes("discrim.txt")[..2].to_vec(),
        variants: Variant::ALL.to_vec(),
        samples_per_cell: 2,
        base_seed: 8,
        length: 12,
        config: ExperimentConfig { workers: 2, ..ExperimentConfig::default() },
    };
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            let exp = plan.resolve(&fx.root).unwrap();
            run_experiment(&exp, out.path()).unwrap();
            fs::read(out.path().join(SAMPLES_FILE)).unwrap()
        })
        .collect();
    let identical = runs[0] == runs[1] && !runs[0].is_empty();
    let lines = runs[0].iter().filter(|&&b| b == b'\n').count();
    let frozen = hash_tree(fx.artifacts.path()) == fx.hashes;
    verdict(
        identical && frozen,
        format!(
            "two runs, {lines} JSON lines each, byte-identical: {identical}; {} checkpoint file hashes unchanged after every generation above: {frozen}",
            fx.hashes.len()
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(usize, Verdict)> = vec![(1, criterion_1()), (6, criterion_6())];
    let fx = build_fixture();
    results.push((2, criterion_2(&fx)));
    results.push((3, criterion_3(&fx)));
    results.push((4, criterion_4(&fx)));
    results.push((5, criterion_5(&fx)));
    results.push((7, criterion_7(&fx)));
    // Last, so the checkpoint hashes cover every generation in the suite.
    results.push((8, criterion_8(&fx)));
    results.sort_by_key(|(n, _)| *n);

    let mut failed = 0;
    for (n, v) in &results {
        println!("{} {n}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed ({:.0?})", results.len() - failed, started.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
