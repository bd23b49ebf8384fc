//! Acceptance report: one PASS/FAIL line per headline criterion.
//!
//! Exits 0 after printing the report so the rest of the test suite stays
//! usable; set `CROSSDIFF_ACCEPTANCE_STRICT=1` to exit 1 on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crossdiff::attribution::{self, AmpClass, AttributionConfig, LatentAttribution, NormClass};
use crossdiff::crosscoder::{
    aux_select, backward, batch_topk_select, encode_pre, init_model, loss, salience, train, AuxConfig,
    CrossCoder, LatentCode, TrainConfig, PARAM_NAMES,
};
use crossdiff::evaluation::{self, Predictions, SelectionRule, Source, Synonyms};
use crossdiff::interp::{self, Archive, ContextConfig, MockEndpoint, Templates};
use crossdiff::store::PairedActivationBatch;
use crossdiff::synthetic::{self, AtomClass, ClassCounts, PlantedSpec, SyntheticData};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, pass: bool, name: &str, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

// ---------------------------------------------------------------- training run

const N_TOKENS: usize = 200_000;

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 1024,
        epochs: 20,
        warmup_steps: 50,
        decay_fraction: 0.2,
        ..TrainConfig::default()
    }
}

struct DeskRun {
    data: SyntheticData,
    model: CrossCoder<f32>,
    table: Vec<LatentAttribution>,
    health: attribution::HealthReport,
}

fn desk_run() -> DeskRun {
    let data = synthetic::generate(&PlantedSpec::desk_default(1), N_TOKENS).expect("generate");
    let model = init_model::<f32>(64, 32, 8, 0).expect("init");
    let outcome = train(model, &data.base, &data.ft, &desk_train_config()).expect("train");
    assert!(outcome.aborted.is_none(), "training aborted");
    let (table, health) =
        attribution::attribute(&outcome.model, &data.base, &data.ft, &AttributionConfig::default()).expect("attribute");
    DeskRun {
        data,
        model: outcome.model,
        table,
        health,
    }
}

fn check_health(rep: &mut Report, run: &DeskRun, secs: f64) {
    let h = &run.health;
    let ev = h.explained_variance_base.min(h.explained_variance_ft);
    let pass = ev >= 0.95 && h.dead_rate < 0.15 && secs <= 600.0;
    rep.line(
        pass,
        "crosscoder health",
        format!(
            "EV base {:.4} ft {:.4} (need >= 0.95), dead fraction {:.4} over {} tokens (need < 0.15), train+attribute {:.0}s (need <= 600s)",
            h.explained_variance_base, h.explained_variance_ft, h.dead_rate, h.stream_tokens, secs
        ),
    );
}

fn check_recovery(rep: &mut Report, run: &DeskRun) {
    let matching = synthetic::match_atoms(&run.model, &run.data.truth).expect("match");
    let matched: Vec<(usize, usize)> = matching
        .pairs
        .iter()
        .filter(|p| p.2 > 0.7)
        .map(|p| (p.1, p.0))
        .collect();
    let atom_latent: BTreeMap<usize, usize> = matched.iter().copied().collect();
    let class_of = |a: usize| run.data.truth.atoms[a].class;

    let (mut specific, mut specific_ok, mut amp, mut amp_ok) = (0, 0, 0, 0);
    for (&atom, &latent) in &atom_latent {
        let row = &run.table[latent];
        match class_of(atom) {
            AtomClass::BaseOnly => {
                specific += 1;
                specific_ok += (row.norm_class == NormClass::BaseSpecific) as usize;
            }
            AtomClass::FtOnly => {
                specific += 1;
                specific_ok += (row.norm_class == NormClass::FtSpecific) as usize;
            }
            AtomClass::Amplified => {
                amp += 1;
                amp_ok += (row.amp_class == AmpClass::Amplified) as usize;
            }
            _ => {}
        }
    }
    let specific_rate = specific_ok as f64 / specific.max(1) as f64;
    let amp_rate = amp_ok as f64 / amp.max(1) as f64;
    let total_specific = run.data.truth.atoms_of(AtomClass::BaseOnly).len() + run.data.truth.atoms_of(AtomClass::FtOnly).len();
    let total_amp = run.data.truth.atoms_of(AtomClass::Amplified).len();
    rep.line(
        specific > 0 && amp > 0 && specific_rate >= 0.90 && amp_rate >= 0.85,
        "attribution recovery",
        format!(
            "base/ft-only correct {specific_ok}/{specific} = {:.1}% (need >= 90%), amplified {amp_ok}/{amp} = {:.1}% (need >= 85%); matched above 0.7 cosine: {}/{} specific, {}/{} amplified, {} of {} atoms overall",
            100.0 * specific_rate,
            100.0 * amp_rate,
            specific,
            total_specific,
            amp,
            total_amp,
            matched.len(),
            run.data.truth.atoms.len()
        ),
    );
}

fn check_pipeline(rep: &mut Report, run: &DeskRun) {
    let gold = run.data.truth.gold_categories();
    let universe: Vec<String> = gold.keys().cloned().collect();
    let selected = attribution::default_selection(&run.table);
    let contexts =
        interp::collect_contexts(&run.model, &run.data.base, &run.data.ft, &selected, &ContextConfig::default())
            .expect("contexts");
    let mut archive = Archive::in_memory();
    let (dossiers, err) =
        interp::build_dossiers(&MockEndpoint, &mut archive, &Templates::default(), &contexts, &run.table);
    assert!(err.is_none(), "mock endpoint failed: {err:?}");
    let (pred, _) = evaluation::pipeline_predictions(
        &dossiers,
        &run.table,
        &universe,
        SelectionRule::default(),
        &Synonyms::shipped(),
    )
    .expect("predictions");
    let pipeline = evaluation::score(&pred, &gold).expect("score");
    let oracle = evaluation::score(&evaluation::oracle_baseline(&gold), &gold).expect("score");
    let sweep = evaluation::random_sweep(&gold, 0.5, 0, 100).expect("sweep");
    let all_positive = Predictions {
        source: Source::Random,
        flags: gold.keys().map(|c| (c.clone(), true)).collect(),
    };
    let all_pos = evaluation::score(&all_positive, &gold).expect("score");
    let positives = gold.values().filter(|&&v| v).count();
    let oracle_ok = [oracle.accuracy, oracle.precision, oracle.recall, oracle.f1]
        .iter()
        .all(|&v| v == 100.0);
    let pass = pipeline.accuracy >= 90.0
        && oracle_ok
        && (sweep.accuracy - 50.0).abs() <= 2.0
        && (66.0..=67.0).contains(&all_pos.f1);
    rep.line(
        pass,
        "end-to-end mock pipeline",
        format!(
            "pipeline accuracy {:.2} (need >= 90; {} dossiers, {} selected latents); oracle acc/prec/rec/f1 {:.1}/{:.1}/{:.1}/{:.1} (need 100); random 100-seed mean accuracy {:.2} (need 50 +- 2), f1 {:.2}; all-positive f1 {:.2} (need 66-67) on {positives}/{} positive categories",
            pipeline.accuracy,
            dossiers.len(),
            selected.len(),
            oracle.accuracy,
            oracle.precision,
            oracle.recall,
            oracle.f1,
            sweep.accuracy,
            sweep.f1,
            all_pos.f1,
            gold.len()
        ),
    );
}

// ------------------------------------------------------------------ gradients

/// Scalar re-implementation of the training loss with the selection pattern
/// and auxiliary pattern held fixed.
fn oracle_loss(
    model: &CrossCoder<f64>,
    base: &Array2<f64>,
    ft: &Array2<f64>,
    kept: &BTreeSet<(usize, usize)>,
    aux_kept: &BTreeSet<(usize, usize)>,
    alpha: f64,
) -> f64 {
    let p = &model.params;
    let (n, d) = base.dim();
    let m = p.b_enc.len();
    let pre = |i: usize, j: usize| -> f64 {
        let mut s = p.b_enc[j];
        for r in 0..d {
            s += base[[i, r]] * p.w_enc[[r, j]] + ft[[i, r]] * p.w_enc[[d + r, j]];
        }
        s.max(0.0)
    };
    let mut total = 0.0;
    for (x, dec, bias) in [(base, &p.dec_base, &p.bias_base), (ft, &p.dec_ft, &p.bias_ft)] {
        let (mut recon, mut r2, mut e2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for c in 0..d {
                let mut hat = bias[c];
                let mut aux_hat = 0.0;
                for j in 0..m {
                    if kept.contains(&(i, j)) {
                        hat += pre(i, j) * dec[[j, c]];
                    }
                    if aux_kept.contains(&(i, j)) {
                        aux_hat += pre(i, j) * dec[[j, c]];
                    }
                }
                let r = x[[i, c]] - hat;
                recon += r * r;
                r2 += r * r;
                e2 += (r - aux_hat) * (r - aux_hat);
            }
        }
        total += recon / n as f64;
        if !aux_kept.is_empty() && r2 > 0.0 {
            total += alpha * e2 / r2;
        }
    }
    total
}

fn pattern(code: &LatentCode<f64>) -> BTreeSet<(usize, usize)> {
    code.entries().map(|(i, j, _)| (i, j)).collect()
}

fn check_gradients(rep: &mut Report) {
    let (d, n) = (3usize, 4usize);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut r = rng(11);
    for trial in 0..5u64 {
        let mut model = init_model::<f64>(d, 2, 2, trial).expect("init");
        // move biases off zero so every tensor is exercised
        for v in model.params.bias_base.iter_mut().chain(model.params.bias_ft.iter_mut()) {
            *v = 0.1 * normal(&mut r);
        }
        for v in model.params.b_enc.iter_mut() {
            *v = 0.1 + 0.05 * normal(&mut r);
        }
        let base = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let ft = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let batch = PairedActivationBatch::new(base.clone(), ft.clone(), (0..n as u64).collect()).expect("batch");
        let dead = vec![false, false, false, true, true, true];
        let aux = AuxConfig::for_dictionary(model.m());

        let pre = encode_pre(&model, &batch).expect("pre");
        let sal = salience(&model, &pre).expect("salience");
        let (code, _) = batch_topk_select(&sal, &pre, model.k);
        let aux_code = aux_select(&pre, &dead, aux.k_aux);
        let (kept, aux_kept) = (pattern(&code), pattern(&aux_code));

        let analytic = backward(&model, &batch, &code, &dead, &aux).expect("backward");
        let crate_loss = loss(&model, &batch, &code, &dead, &aux).expect("loss").total;
        let own = oracle_loss(&model, &base, &ft, &kept, &aux_kept, aux.alpha);
        let agree = (crate_loss - own).abs() / own.abs().max(1e-12);
        let e = worst.entry("loss value").or_insert(0.0);
        *e = e.max(agree);

        let h = 1e-6;
        for (t, name) in PARAM_NAMES.iter().enumerate() {
            let len = model.params.slices()[t].len();
            let mut num = vec![0.0; len];
            for idx in 0..len {
                let orig = model.params.slices()[t][idx];
                model.params.slices_mut()[t][idx] = orig + h;
                let up = oracle_loss(&model, &base, &ft, &kept, &aux_kept, aux.alpha);
                model.params.slices_mut()[t][idx] = orig - h;
                let down = oracle_loss(&model, &base, &ft, &kept, &aux_kept, aux.alpha);
                model.params.slices_mut()[t][idx] = orig;
                num[idx] = (up - down) / (2.0 * h);
            }
            let ana = analytic.slices()[t];
            let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = if scale == 0.0 { diff } else { diff / scale };
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(rel);
        }
    }
    let pass = worst.values().all(|&v| v < 1e-5);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    rep.line(pass, "gradient correctness", format!("max relative error over 5 models: {detail} (need < 1e-5)"));
}

// ------------------------------------------------------------------ BatchTopK

fn check_batch_topk(rep: &mut Report) {
    let mut r = rng(21);
    let (mut agree, mut count_ok, mut order_ok) = (0, 0, 0);
    let trials = 100usize;
    for t in 0..trials as u64 {
        let d = r.random_range(2..6);
        let expansion = r.random_range(1..5);
        let k = r.random_range(1..=(d * expansion).min(4));
        let n = r.random_range(1..12);
        let model = init_model::<f64>(d, expansion, k, t).expect("init");
        let base = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let ft = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let batch = PairedActivationBatch::new(base, ft, (0..n as u64).collect()).expect("batch");
        let pre = encode_pre(&model, &batch).expect("pre");
        let sal = salience(&model, &pre).expect("salience");
        let (code, _) = batch_topk_select(&sal, &pre, k);

        let positive = pre.iter().filter(|&&v| v > 0.0).count();
        count_ok += (code.nnz() == positive.min(n * k)) as usize;

        let kept: BTreeSet<usize> = code.flat_indices().into_iter().collect();
        let min_kept = kept.iter().map(|&i| sal.as_slice().unwrap()[i]).fold(f64::INFINITY, f64::min);
        let max_dropped = sal
            .iter()
            .enumerate()
            .filter(|(i, &s)| s > 0.0 && !kept.contains(i))
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        order_ok += (max_dropped <= min_kept) as usize;

        // exhaustive sort oracle, ties to the lower flat index
        let mut all: Vec<(f64, usize)> = sal.iter().enumerate().filter(|(_, &s)| s > 0.0).map(|(i, &s)| (s, i)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: BTreeSet<usize> = all.into_iter().take(n * k).map(|(_, i)| i).collect();
        let values_ok = code.entries().all(|(i, j, v)| v == pre[[i, j]]);
        agree += (oracle == kept && values_ok) as usize;
    }
    rep.line(
        agree == trials && count_ok == trials && order_ok == trials,
        "batchtopk invariant",
        format!(
            "count = min(n*k, positives) in {count_ok}/{trials}, no dropped salience above a kept one in {order_ok}/{trials}, sort-oracle agreement {agree}/{trials} (need all)"
        ),
    );
}

// ------------------------------------------------------------- latent scaling

fn residual(eps: &[Vec<f64>], z: &[f64], u: &[f64], beta: f64) -> f64 {
    let mut s = 0.0;
    for (e, &zi) in eps.iter().zip(z) {
        for (a, b) in e.iter().zip(u) {
            let r = a - beta * zi * b;
            s += r * r;
        }
    }
    s
}

/// Solves the one-column normal equations `X^T X beta = X^T y` with `X` the
/// stacked `z_i u` blocks.
fn normal_equation(eps: &[Vec<f64>], z: &[f64], u: &[f64]) -> f64 {
    let x: Array1<f64> = z.iter().flat_map(|&zi| u.iter().map(move |&c| zi * c)).collect();
    let y: Array1<f64> = eps.iter().flatten().copied().collect();
    x.dot(&y) / x.dot(&x)
}

fn check_scaling(rep: &mut Report) {
    let mut r = rng(31);
    let (mut worst_ne, mut worst_grid) = (0.0f64, 0.0f64);
    let instances = 1000;
    let step = 1e-4;
    let grid_n = 200_000;
    for _ in 0..instances {
        let d = r.random_range(2..5);
        let n = r.random_range(1..6);
        let u: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let z: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
        let truth = r.random_range(-5.0..5.0);
        let eps: Vec<Vec<f64>> = z
            .iter()
            .map(|&zi| u.iter().map(|&c| truth * zi * c + 0.3 * normal(&mut r)).collect())
            .collect();
        let beta = attribution::scaling_beta(&eps, &z, &u).expect("defined");
        worst_ne = worst_ne.max((beta - normal_equation(&eps, &z, &u)).abs());

        let (mut best, mut best_val) = (0.0, f64::INFINITY);
        for g in 0..=grid_n {
            let b = -10.0 + g as f64 * step;
            let v = residual(&eps, &z, &u, b);
            if v < best_val {
                best_val = v;
                best = b;
            }
        }
        worst_grid = worst_grid.max((beta - best).abs());
    }
    rep.line(
        worst_ne <= 1e-8 && worst_grid <= step,
        "latent scaling",
        format!(
            "{instances} instances: max |beta - normal equations| {worst_ne:.2e} (need <= 1e-8), max |beta - grid argmin| {worst_grid:.2e} (need <= {step:.0e})"
        ),
    );
}

// ------------------------------------------------------------------ norm shift

fn check_norm_shift(rep: &mut Report) {
    let fractions = [0.1, 0.2, 0.3, 0.4, 0.5];
    let mut models = Vec::new();
    for &f in &fractions {
        let base_only = (f * 128.0_f64).round() as usize;
        let counts = ClassCounts {
            shared: 128 - base_only,
            base_only,
            ft_only: 0,
            amplified: 0,
            minimized: 0,
        };
        let spec = PlantedSpec::balanced(64, counts, 8, 8, 2).expect("spec");
        let data = synthetic::generate(&spec, 50_000).expect("generate");
        let cfg = TrainConfig {
            lr: 5e-3,
            batch_size: 1024,
            epochs: 5,
            warmup_steps: 20,
            decay_fraction: 0.2,
            ..TrainConfig::default()
        };
        let model = init_model::<f32>(64, 8, 8, 0).expect("init");
        let out = train(model, &data.base, &data.ft, &cfg).expect("train");
        models.push((format!("{:.0}%", 100.0 * f), out.model));
    }
    let refs: Vec<(&str, &CrossCoder<f32>)> = models.iter().map(|(l, m)| (l.as_str(), m)).collect();
    let summary = attribution::norm_shift_summary(&refs).expect("summary");
    let means: Vec<String> = summary.entries.iter().map(|e| format!("{} {:.4}", e.label, e.mean)).collect();
    rep.line(
        summary.mean_diffs.iter().all(|&d| d < 0.0),
        "norm-shift trend",
        format!("rel-norm means {} (need strictly decreasing)", means.join(" > ")),
    );
}

// ---------------------------------------------------------------- determinism

const CLI_CONFIG: &str = r#"
seed = 3

[model]
expansion = 8
k = 8

[train]
lr = 0.005
batch_size = 1024
epochs = 2

[synth]
tokens = 20000

[eval]
task = "biology and chemistry"
"#;

fn cli_pass(root: &Path, out: &str) -> bool {
    let cfg = root.join("run.toml");
    let out = root.join(out);
    ["synth", "train", "attribute", "interp", "eval"].iter().all(|stage| {
        crossdiff::cli::run([
            "crossdiff",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--mock-llm",
            stage,
        ]) == 0
    })
}

fn check_determinism(rep: &mut Report) {
    let dir = tempfile::tempdir().expect("tempdir");
    std::fs::write(dir.path().join("run.toml"), CLI_CONFIG).unwrap();
    let ran = cli_pass(dir.path(), "a") && cli_pass(dir.path(), "b");
    let compared = [
        "checkpoint.mnck",
        "train_log.jsonl",
        "attribution.jsonl",
        "health.json",
        "eval_pipeline.json",
        "eval_random.json",
        "eval_naive.json",
        "eval_oracle.json",
        "random_sweep.json",
        "comparison.txt",
    ];
    let differing: Vec<&str> = compared
        .iter()
        .copied()
        .filter(|f| std::fs::read(dir.path().join("a").join(f)).ok() != std::fs::read(dir.path().join("b").join(f)).ok())
        .collect();
    rep.line(
        ran && differing.is_empty(),
        "determinism",
        if ran {
            format!("{} train/attribute/eval artifacts compared, differing: {:?}", compared.len(), differing)
        } else {
            "a CLI stage exited non-zero".into()
        },
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    check_gradients(&mut rep);
    check_batch_topk(&mut rep);
    check_scaling(&mut rep);

    let t0 = Instant::now();
    let run = desk_run();
    let secs = t0.elapsed().as_secs_f64();
    check_health(&mut rep, &run, secs);
    check_recovery(&mut rep, &run);
    check_pipeline(&mut rep, &run);
    drop(run);

    check_norm_shift(&mut rep);
    check_determinism(&mut rep);

    println!("acceptance: {} failing criteria", rep.failures);
    let strict = std::env::var("CROSSDIFF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && rep.failures > 0 {
        std::process::exit(1);
    }
}
