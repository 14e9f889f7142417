//! Release gate. Runs every acceptance criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails. Pass criterion numbers
//! as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 3`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use eps_seg::ablation::{ablation_settings, loss_term_settings, run_once, AblationAxis, RunOutcome};
use eps_seg::autograd::Graph;
use eps_seg::checkpoint::file_sha256;
use eps_seg::config::{load_dataset, RunConfig, CACHE_ENV};
use eps_seg::data::{sample_sparse_labels, synth_generate, BatchConfig, BatchStream, MaskSpec, SynthSpec};
use eps_seg::head::{argmax, features_to_posterior, film_apply, gumbel_softmax_sample, FilmParams};
use eps_seg::hvae::ModelConfig;
use eps_seg::losses::{gaussian_kl, masked_inpainting_loss, total_loss, LossParts, LossWeights};
use eps_seg::model::{EpsSeg, ObjectiveConfig, TrainBatch};
use eps_seg::tensor::Tensor;
use eps_seg::trainer::{fit, FitOutput};
use eps_seg::gradcheck::{grad_check, small_instance, GradCheckConfig, LossTerm};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

/// Benchmark runs keyed by configuration and seed, shared between criteria.
struct Runs {
    root: PathBuf,
    done: HashMap<(String, u64), (RunOutcome, PathBuf)>,
}

impl Runs {
    fn get(&mut self, config: &RunConfig, seed: u64) -> (RunOutcome, PathBuf) {
        let mut config = config.clone();
        config.train.seed = seed;
        let key = (config.to_toml().unwrap(), seed);
        if let Some(hit) = self.done.get(&key) {
            return hit.clone();
        }
        let dir = self.root.join(format!("run_{}", self.done.len()));
        let (outcome, _) = run_once(&config, &FitOutput::to_dir(&dir)).unwrap();
        println!(
            "    run seed {seed} labels {} dice {:.4} train {:.0}s eval {:.0}s",
            outcome.labels, outcome.mean_dice, outcome.train_seconds, outcome.eval_seconds
        );
        self.done.insert(key, (outcome.clone(), dir.clone()));
        (outcome, dir)
    }

    fn mean_dice(&mut self, config: &RunConfig) -> (f64, Vec<f64>) {
        let dice: Vec<f64> = SEEDS.iter().map(|&s| self.get(config, s).0.mean_dice).collect();
        (dice.iter().sum::<f64>() / dice.len() as f64, dice)
    }
}

fn fmt_dice(d: &[f64]) -> String {
    d.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

/// Closed form against a Monte-Carlo mean of `log q(x) - log p(x)`, x ~ q.
/// Returns the absolute error and the estimate's standard error.
fn kl_vs_monte_carlo(rng: &mut ChaCha8Rng, spread: (f64, f64), mean_range: f64) -> (f64, f64) {
    let mut draw = |lo: f64, hi: f64| (0..8).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let (mq, sq) = (draw(-mean_range, mean_range), draw(spread.0, spread.1));
    let (mp, sp) = (draw(-mean_range, mean_range), draw(spread.0, spread.1));
    let closed = gaussian_kl(&mq, &sq, &mp, &sp).unwrap();
    let n = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for d in 0..8 {
            let e: f64 = rng.sample(StandardNormal);
            let x = mq[d] + sq[d] * e;
            let zp = (x - mp[d]) / sp[d];
            log_ratio += (sp[d] / sq[d]).ln() + 0.5 * zp * zp - 0.5 * e * e;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    ((closed - mean).abs(), (var / n as f64).sqrt())
}

/// 100 pairs with scales in [0.8, 1.2] against the absolute tolerance, plus
/// 100 widely spread pairs against five standard errors of the estimate.
fn kl_oracle(_: &mut Runs) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let near = (0..100).map(|_| kl_vs_monte_carlo(&mut rng, (0.8, 1.2), 0.25).0).fold(0.0, f64::max);
    let wide = (0..100)
        .map(|_| {
            let (err, se) = kl_vs_monte_carlo(&mut rng, (0.5, 2.0), 1.0);
            err / se
        })
        .fold(0.0, f64::max);
    verdict(
        near <= 0.02 && wide <= 5.0,
        format!("max |closed form - Monte Carlo| = {near:.5} (limit 0.02); widely spread pairs: max error {wide:.2} standard errors (limit 5)"),
    )
}

fn gradient_fidelity(_: &mut Runs) -> Verdict {
    let inst = small_instance(0).unwrap();
    let config = GradCheckConfig { probes: 200, tolerance: 1e-4, ..GradCheckConfig::default() };
    let mut ok = true;
    let mut parts = Vec::new();
    for term in LossTerm::ALL {
        let r = grad_check(&inst, term, &config).unwrap();
        ok &= r.passed && r.probes.len() >= 200 && r.max_rel_err < 1e-4;
        parts.push(format!("{term} {:.1e} ({} probes, {} excluded)", r.max_rel_err, r.probes.len(), r.excluded));
    }
    verdict(ok, format!("max relative error: {}", parts.join("; ")))
}

fn gumbel_max(_: &mut Runs) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for v in 0..10 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let tau = [1.0, 0.5, 0.7][v % 3];
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[argmax(&gumbel_softmax_sample(&logits, tau, &mut rng).unwrap())] += 1;
        }
        for c in 0..4 {
            worst = worst.max((counts[c] as f64 / n as f64 - logits[c].exp() / z).abs());
        }
    }
    verdict(worst <= 0.01, format!("max |frequency - softmax| = {worst:.4} over 10 logit vectors (limit 0.01)"))
}

fn film_and_simplex(_: &mut Runs) -> Verdict {
    let model = EpsSeg::new(&ModelConfig::default()).unwrap();
    let mut store = model.init_params::<f32>(3);
    let head = model.head();
    for (mlp, bias) in [(&head.gamma, 1.0f32), (&head.beta, 0.0)] {
        store.get_mut(&mlp.out.weight_name()).unwrap().data_mut().fill(0.0);
        store.get_mut(&mlp.out.bias_name()).unwrap().data_mut().fill(bias);
    }
    let images = synth_generate(&SynthSpec { num_images: 1, image_side: 96, seed: 4, ..SynthSpec::default() }).unwrap();
    let labels = sample_sparse_labels(&images, 3, 0.002, 0, true, 3).unwrap();
    let mask = MaskSpec::new(3).unwrap();
    let cfg = BatchConfig { batch_size: 16, unlabeled_fraction: 0.5, patch_side: model.config().patch_side, mask, seed: 0 };
    let batch = TrainBatch::<f32>::from_samples(&BatchStream::new(&images, &labels, cfg).unwrap().batch_at(1)).unwrap();
    let noise = model.draw_noise::<f32>(batch.len(), &mut ChaCha8Rng::seed_from_u64(5));

    let run = |gmm_prior: bool| {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let objective = ObjectiveConfig { gmm_prior, ..ObjectiveConfig::default() };
        let f = model.forward(&p, &batch, &noise, 0.7, &objective, 5.0, 0.5).unwrap();
        let top = &f.latents.levels.last().unwrap().posterior;
        let gamma_beta = if gmm_prior {
            let film = head.film_params(&p, f.logits);
            let (gm, bt) = (film.gamma.value(), film.beta.value());
            gm.data().iter().all(|&x| x == 1.0) && bt.data().iter().all(|&x| x == 0.0)
        } else {
            true
        };
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<u32>>();
        (bits(&top.mean.value()), bits(&top.std.value()), bits(&f.prediction.value()), gamma_beta)
    };
    let (film_on, film_off) = (run(true), run(false));
    let identical = film_on.3 && film_on.0 == film_off.0 && film_on.1 == film_off.1 && film_on.2 == film_off.2;

    let g = Graph::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = g.constant(Tensor::new([64, 12], (0..64 * 12).map(|_| rng.random_range(-4.0f32..4.0)).collect()));
    let plain = features_to_posterior(h);
    let ident = film_apply(h, FilmParams { gamma: g.constant(Tensor::full([64, 12], 1.0)), beta: g.constant(Tensor::zeros([64, 12])) });
    let direct = plain.mean.value() == ident.mean.value() && plain.std.value() == ident.std.value();

    let mut worst = 0.0f64;
    let mut in_range = true;
    for i in 0..10_000 {
        let c = 2 + i % 7;
        let logits: Vec<f32> = (0..c).map(|_| rng.random_range(-20.0f32..20.0)).collect();
        let tau = rng.random_range(0.05f32..2.0);
        let y = gumbel_softmax_sample(&logits, tau, &mut rng).unwrap();
        in_range &= y.iter().all(|&v| (0.0..=1.0).contains(&v));
        worst = worst.max((y.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
    }
    verdict(
        identical && direct && in_range && worst <= 1e-6,
        format!(
            "model forward with FiLM (1,0) bit-identical: {identical}; direct FiLM identity: {direct}; \
             max |sum y' - 1| = {worst:.1e} over 1e4 draws, entries in [0,1]: {in_range}"
        ),
    )
}

fn masked_isolation(_: &mut Runs) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut nonzero = 0;
    for i in 0..100 {
        let side = [1, 3, 5, 9][i % 4];
        let p = [9, 11, 17, 33][i % 4];
        let mask = MaskSpec::new(side).unwrap();
        let n = 4 * p * p;
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut pred = target.clone();
        let o = mask.offset(p);
        for (k, v) in pred.iter_mut().enumerate() {
            let (r, c) = ((k / p) % p, k % p);
            let inside = (o..o + side).contains(&r) && (o..o + side).contains(&c);
            if !inside {
                *v = match rng.random_range(0..4) {
                    0 => f64::NAN,
                    1 => f64::INFINITY,
                    2 => rng.random_range(-1e30..1e30),
                    _ => rng.random_range(-5.0..5.0),
                };
            }
        }
        let loss = masked_inpainting_loss(&Tensor::new([4, 1, p, p], pred), &Tensor::new([4, 1, p, p], target), &mask).unwrap();
        if loss != 0.0 {
            nonzero += 1;
        }
    }
    verdict(nonzero == 0, format!("{nonzero} of 100 patches gave a non-zero loss"))
}

fn composition(_: &mut Runs) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst = 0.0f64;
    let log_uniform = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-6.0..4.0));
    for _ in 0..1000 {
        let parts = LossParts {
            inpaint: log_uniform(&mut rng),
            ce: log_uniform(&mut rng),
            kl: log_uniform(&mut rng),
            cl: log_uniform(&mut rng),
            entropy: log_uniform(&mut rng) * if rng.random_bool(0.5) { -1.0 } else { 1.0 },
        };
        let w = LossWeights {
            alpha1: log_uniform(&mut rng),
            alpha2: log_uniform(&mut rng),
            alpha3: if rng.random_bool(0.1) { 0.0 } else { log_uniform(&mut rng) },
            entropy_weight: if rng.random_bool(0.5) { 0.0 } else { log_uniform(&mut rng) },
            ..LossWeights::default()
        };
        let total = total_loss(&parts, &w).unwrap().total;
        let terms = [w.entropy_weight * parts.entropy, w.alpha3 * parts.cl, w.alpha2 * parts.kl, w.alpha1 * parts.ce, parts.inpaint];
        let expected: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|t| t.abs()).sum();
        worst = worst.max((total - expected).abs() / scale);
    }
    verdict(worst <= 1e-9, format!("max relative deviation {worst:.1e} over 1000 cases (limit 1e-9)"))
}

fn synthetic_benchmark(runs: &mut Runs) -> Verdict {
    let config = RunConfig::default();
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (o, _) = runs.get(&config, seed);
        let secs = o.train_seconds + o.eval_seconds;
        if o.mean_dice >= 0.90 && secs <= 900.0 {
            hits += 1;
        }
        lines.push(format!("seed {seed}: {:.4} in {secs:.0}s", o.mean_dice));
    }
    verdict(hits >= 2, format!("{hits}/3 seeds reach Dice >= 0.90 within 900 s ({})", lines.join("; ")))
}

fn ablation_direction(runs: &mut Runs) -> Verdict {
    let rows = loss_term_settings(&RunConfig::default());
    let (vanilla, vd) = runs.mean_dice(&rows[0].config);
    let (full, fd) = runs.mean_dice(&rows[3].config);
    let gap = full - vanilla;
    verdict(
        gap >= -0.05,
        format!(
            "full {full:.4} [{}] vs vanilla {vanilla:.4} [{}]: gap {gap:+.4}; full >= vanilla: {} (blocks only below -0.05)",
            fmt_dice(&fd),
            fmt_dice(&vd),
            gap >= 0.0
        ),
    )
}

fn budget_trend(runs: &mut Runs) -> Verdict {
    let settings = ablation_settings(AblationAxis::LabelBudget, &RunConfig::default());
    let mut means = Vec::new();
    let mut text = Vec::new();
    for s in &settings {
        let (m, d) = runs.mean_dice(&s.config);
        text.push(format!("{} {m:.4} [{}]", s.name, fmt_dice(&d)));
        means.push(m);
    }
    let rises: Vec<f64> = means.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.02);
    verdict(ok, format!("{}; inversions {:?}", text.join(", "), rises.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()))
}

fn determinism(runs: &mut Runs) -> Verdict {
    let config = RunConfig::default();
    let (_, first) = runs.get(&config, 0);
    let second = runs.root.join("repeat");
    let data = load_dataset(&config, 0).unwrap();
    let model = EpsSeg::new(&config.model).unwrap();
    fit(&model, &config.train, &data.train, &data.labels, &[], &FitOutput::to_dir(&second)).unwrap();
    let read = |d: &Path| std::fs::read(d.join("train_log.csv")).unwrap();
    let hash = |d: &Path| file_sha256(&d.join("last.safetensors")).unwrap();
    let same_log = read(&first) == read(&second);
    let (a, b) = (hash(&first), hash(&second));
    verdict(same_log && a == b, format!("logs identical: {same_log}; checkpoint sha256 {} vs {}", &a[..16], &b[..16]))
}

type Criterion = (u32, &'static str, fn(&mut Runs) -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "closed-form KL vs Monte Carlo, < 10 s", kl_oracle),
    (2, "gradient check of all five loss terms, < 120 s", gradient_fidelity),
    (3, "Gumbel-max frequencies, < 30 s", gumbel_max),
    (4, "FiLM identity and relaxed-sample simplex", film_and_simplex),
    (5, "inpainting loss ignores pixels outside the mask", masked_isolation),
    (6, "total loss equals the weighted sum of parts", composition),
    (7, "synthetic benchmark Dice >= 0.90", synthetic_benchmark),
    (8, "full model vs vanilla ablation direction", ablation_direction),
    (9, "label-budget degradation trend", budget_trend),
    (10, "identical seeds give identical logs and checkpoints", determinism),
];

fn time_limit(id: u32) -> Option<f64> {
    match id {
        1 => Some(10.0),
        2 => Some(120.0),
        3 => Some(30.0),
        _ => None,
    }
}

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // SAFETY: set before any other thread exists.
    unsafe { std::env::set_var(CACHE_ENV, Path::new(env!("CARGO_TARGET_TMPDIR")).join("eps-seg-cache")) };
    let work = tempfile::tempdir().unwrap();
    let mut runs = Runs { root: work.path().to_path_buf(), done: HashMap::new() };
    let mut failed = Vec::new();
    for (id, name, check) in CRITERIA {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut v = check(&mut runs);
        let secs = start.elapsed().as_secs_f64();
        if let Some(limit) = time_limit(id) {
            if secs > limit {
                v.passed = false;
                v.detail.push_str(&format!("; took {secs:.1}s, limit {limit}s"));
            }
        }
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name} [{secs:.1}s]: {}", v.detail);
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
