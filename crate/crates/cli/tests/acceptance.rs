//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. A name filter may be given as argument.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use metaphor_core::data::{compute_metrics, encode, stratified_kfold, synthetic, Vocab};
use metaphor_core::embed_io::{build_matrix, format_vec, load_vec, save_vec, Pretrained};
use metaphor_core::experiment::{derive_seed, predict, train_with, TrainConfig};
use metaphor_core::models::{Architecture, Model, ModelConfig};
use metaphor_core::optim::{Adam, AdamConfig};
use metaphor_core::tensor::OpKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const ARCHS: [&str; 4] = ["cnn", "bilstm", "bigru", "crnn"];

struct Ctx {
    dir: tempfile::TempDir,
    bench: Option<BTreeMap<String, (f64, f64)>>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn cli(args: &[&str]) -> Result<(i32, String), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_metaphor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    let code = out.status.code().unwrap_or(-1);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if code != 0 && code != 4 {
        return Err(format!("metaphor {} exited {code}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok((code, stdout))
}

fn ok_cli(args: &[&str]) -> Result<String, String> {
    match cli(args)? {
        (0, s) => Ok(s),
        (c, s) => Err(format!("metaphor {} exited {c}: {s}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key)
        .ok_or_else(|| format!("missing column {key}"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- gradient integrity ---------------------------------------------------

fn gradient_integrity(ctx: &mut Ctx) -> Check {
    let json = ctx.path("gradcheck.json");
    let start = Instant::now();
    let (code, _) = cli(&["gradcheck", "--json", s(&json)])?;
    let secs = start.elapsed().as_secs_f64();
    let results: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&json).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let names: BTreeSet<String> = results.iter().map(|r| r["component"].as_str().unwrap_or("").to_string()).collect();
    let mut needed: Vec<String> = OpKind::ALL.iter().map(|k| format!("op:{}", k.name())).collect();
    needed.extend(ARCHS.iter().map(|a| format!("model:{a}")));
    let missing: Vec<&String> = needed.iter().filter(|n| !names.contains(*n)).collect();
    ensure(missing.is_empty(), || format!("components not covered: {missing:?}"))?;
    let mut worst = 0.0f64;
    for r in &results {
        let trials = r["trials"].as_u64().unwrap_or(0);
        let err = r["worst_rel_error"].as_f64().unwrap_or(f64::INFINITY);
        ensure(trials >= 100, || format!("{} ran {trials} trials", r["component"]))?;
        ensure(err < 1e-4, || format!("{} worst relative error {err:e}", r["component"]))?;
        worst = worst.max(err);
    }
    ensure(code == 0, || format!("gradcheck exited {code}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;

    let (code, out) = cli(&["gradcheck", "--negate-backward", "gru", "--trials", "10"])?;
    ensure(code == 4, || format!("injected GRU fault exited {code}"))?;
    ensure(out.contains("failed:") && out.contains("op:gru") && out.contains("model:bigru"), || {
        format!("fault not named: {out}")
    })?;
    Ok(format!(
        "{} components, worst rel. error {worst:.2e} (< 1e-4), {secs:.1}s (< 60s); GRU sign fault flagged",
        results.len()
    ))
}

// ---- overfit ----------------------------------------------------------------

fn overfit(_: &mut Ctx) -> Check {
    let corpus = synthetic::overfit_corpus(7);
    let vocab = Vocab::build(corpus.sentences(), 1).map_err(|e| e.to_string())?;
    ensure(vocab.len() - 2 <= 40, || format!("vocabulary of {}", vocab.len() - 2))?;
    let max_len = corpus.max_tokens();
    let ids: Vec<Vec<usize>> = corpus
        .examples
        .iter()
        .map(|e| encode(&e.tokens, &vocab, max_len).map(|x| x.valid().to_vec()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let labels = corpus.labels();
    let emb = build_matrix(&vocab, None, 50, 3).map_err(|e| e.to_string())?;
    let mut reached = Vec::new();
    for arch in Architecture::ALL {
        let cfg = ModelConfig {
            architecture: arch,
            fine_tune: true,
            max_len: Some(max_len),
            ..Default::default()
        };
        let mut model = Model::<f64>::build(cfg, vocab.clone(), &emb).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            batch_size: 32,
            epochs: 300,
            adam: AdamConfig::default(),
            seed: derive_seed(7, 1),
        };
        let mut hit = None;
        train_with(&mut model, &refs, &labels, &tc, |m, e| {
            let pred = predict(m, &refs)?;
            let acc = pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
            if acc == 1.0 {
                hit = Some(e.epoch);
            }
            Ok(hit.is_none())
        })
        .map_err(|e| e.to_string())?;
        match hit {
            Some(epoch) => reached.push(format!("{} @{epoch}", arch.name())),
            None => return Err(format!("{} did not fit the 32 sentences in 300 epochs", arch.name())),
        }
    }
    Ok(format!("train accuracy 1.0 reached: {}", reached.join(", ")))
}

// ---- learnable benchmark and fine-tuning --------------------------------------

fn bench_files(ctx: &Ctx) -> Result<(PathBuf, PathBuf), String> {
    let corpus = ctx.path("learnable.tsv");
    let vecs = ctx.path("vec/learn{D}.vec");
    if !corpus.exists() {
        ok_cli(&["generate", "learnable", "--sentences", "1000", "--seed", "7", "--output", s(&corpus)])?;
        ok_cli(&["generate", "vectors", "--corpus", s(&corpus), "--dims", "50", "--pattern", s(&vecs), "--seed", "5"])?;
    }
    Ok((corpus, ctx.path("vec/learn50.vec")))
}

fn crossval_arch(ctx: &Ctx, arch: &str, fine_tune: bool) -> Result<(f64, f64), String> {
    let (corpus, vec) = bench_files(ctx)?;
    let out = ctx.path(&format!("bench_{arch}_{fine_tune}.csv"));
    let ft = fine_tune.to_string();
    ok_cli(&[
        "crossval", "--corpus", s(&corpus), "--embeddings", s(&vec), "--architecture", arch, "--embedding-dim", "50",
        "--fine-tune", &ft, "--output", s(&out),
    ])?;
    let rows = read_csv(&out)?;
    ensure(rows.len() == 1, || format!("{} rows", rows.len()))?;
    ensure(num(&rows[0], "folds")? == 10.0, || "not 10 folds".into())?;
    Ok((num(&rows[0], "accuracy")?, num(&rows[0], "f1")?))
}

fn benchmark(ctx: &mut Ctx) -> Check {
    bench_files(ctx)?;
    let start = Instant::now();
    let mut results = BTreeMap::new();
    for arch in ARCHS {
        results.insert(arch.to_string(), crossval_arch(ctx, arch, true)?);
    }
    let secs = start.elapsed().as_secs_f64();
    ctx.bench = Some(results.clone());
    let summary: Vec<String> = results.iter().map(|(a, (acc, f1))| format!("{a} {acc:.3}/{f1:.3}")).collect();
    for (a, &(acc, f1)) in &results {
        ensure(acc >= 0.95 && f1 >= 0.95, || format!("{a}: accuracy {acc:.4}, f1 {f1:.4} (need ≥ 0.95)"))?;
    }
    ensure(secs < 600.0, || format!("{} — took {secs:.0}s (> 600s)", summary.join(", ")))?;
    Ok(format!("acc/f1 {}; {secs:.0}s (< 600s)", summary.join(", ")))
}

fn fine_tune_ordering(ctx: &mut Ctx) -> Check {
    if ctx.bench.is_none() {
        benchmark(ctx).map_err(|e| format!("benchmark: {e}"))?;
    }
    let tuned = ctx.bench.clone().unwrap();
    let mut parts = Vec::new();
    for arch in ARCHS {
        let (frozen, _) = crossval_arch(ctx, arch, false)?;
        let (ft, _) = tuned[arch];
        parts.push(format!("{arch} {ft:.3} vs {frozen:.3}"));
        ensure(ft >= frozen - 0.02, || format!("{arch}: fine-tuned {ft:.4} < frozen {frozen:.4} − 0.02"))?;
    }
    Ok(format!("fine-tuned vs frozen accuracy: {}", parts.join(", ")))
}

// ---- protocol fidelity ----------------------------------------------------------

fn protocol(ctx: &mut Ctx) -> Check {
    let corpus = ctx.path("sweep.tsv");
    let pattern = ctx.path("vec/sweep{D}.vec");
    ok_cli(&["generate", "learnable", "--sentences", "60", "--seed", "3", "--output", s(&corpus)])?;
    ok_cli(&["generate", "vectors", "--corpus", s(&corpus), "--pattern", s(&pattern)])?;
    let report = ctx.path("sweep.csv");
    let stdout = ok_cli(&[
        "sweep", "--corpus", s(&corpus), "--embeddings-pattern", s(&pattern), "--epochs", "1", "--output", s(&report),
    ])?;
    let rows = read_csv(&report)?;
    ensure(rows.len() == 80, || format!("{} rows", rows.len()))?;
    let header: Vec<String> = csv::Reader::from_path(&report)
        .map_err(|e| e.to_string())?
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = ["model", "D", "fine_tune", "accuracy", "f1", "folds", "lr", "batch", "epochs", "seed", "seconds"];
    ensure(header[..expected.len()] == expected, || format!("columns {header:?}"))?;
    let mut cells = BTreeSet::new();
    for r in &rows {
        cells.insert((r["model"].clone(), r["D"].clone(), r["fine_tune"].clone()));
        for key in ["accuracy", "f1"] {
            let v = num(r, key)?;
            ensure((0.0..=1.0).contains(&v), || format!("{key} = {v}"))?;
        }
        ensure(num(r, "folds")? == 10.0, || "folds column is not 10".into())?;
    }
    let mut grid = BTreeSet::new();
    for a in ARCHS {
        for d in (1..=10).map(|i| 50 * i) {
            for ft in ["true", "false"] {
                grid.insert((a.to_string(), d.to_string(), ft.to_string()));
            }
        }
    }
    ensure(cells == grid, || "grid cells differ from 4 × {50..500} × {on, off}".into())?;
    let folds = read_csv(&report.with_extension("folds.csv"))?;
    ensure(folds.len() == 800, || format!("{} fold rows", folds.len()))?;
    let summary = read_csv(&report.with_extension("summary.csv"))?;
    let models: Vec<&str> = summary.iter().map(|r| r["model"].as_str()).collect();
    ensure(models == ARCHS, || format!("summary models {models:?}"))?;
    ensure(stdout.lines().filter(|l| ARCHS.iter().any(|a| l.starts_with(a))).count() == 4, || {
        "no per-model summary printed".into()
    })?;
    Ok("80 rows (4 models × 10 D × fine-tune on/off), 10 folds each, metrics in [0,1], 4-row best-per-model summary".into())
}

// ---- oracle equivalences ------------------------------------------------------------

fn oracles(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for trial in 0..10_000 {
        let n = rng.random_range(1..60);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let gold: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut cm = [[0usize; 2]; 2];
        for (&p, &g) in pred.iter().zip(&gold) {
            cm[g as usize][p as usize] += 1;
        }
        let (tp, fp, fn_, tn) = (cm[1][1], cm[0][1], cm[1][0], cm[0][0]);
        let m = compute_metrics(&pred, &gold).map_err(|e| e.to_string())?;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let acc = (tp + tn) as f64 / n as f64;
        ensure((m.tp, m.fp, m.fn_, m.tn) == (tp, fp, fn_, tn), || format!("confusion mismatch in trial {trial}"))?;
        ensure((m.f1 - f1).abs() < 1e-12 && (m.accuracy - acc).abs() < 1e-12, || format!("metric mismatch in trial {trial}"))?;
    }

    for trial in 0..1000 {
        let k = rng.random_range(2..=10);
        let n = rng.random_range(2 * k..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        for i in 0..k {
            labels[i] = 0;
            labels[k + i] = 1;
        }
        let plan = stratified_kfold(&labels, k, rng.random()).map_err(|e| e.to_string())?;
        let mut seen = vec![0usize; n];
        let mut sizes = Vec::new();
        let mut positives = Vec::new();
        for f in 0..k {
            let test = plan.test_indices(f);
            let train = plan.train_indices(f);
            ensure(test.len() + train.len() == n && train.iter().all(|i| !test.contains(i)), || {
                format!("train/test overlap in corpus {trial}")
            })?;
            for &i in &test {
                seen[i] += 1;
            }
            sizes.push(test.len());
            positives.push(test.iter().filter(|&&i| labels[i] == 1).count());
        }
        let spread = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap();
        ensure(seen.iter().all(|&c| c == 1), || format!("not a partition in corpus {trial}"))?;
        ensure(spread(&sizes) <= 1 && spread(&positives) <= 1, || format!("unbalanced folds in corpus {trial}"))?;
    }

    let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1]).map_err(|e| e.to_string())?;
    let mut theta = vec![0.0];
    // f(θ) = (θ − 3)², first step moves by lr·sign(−g)
    let g1 = 2.0 * (theta[0] - 3.0);
    adam.step(&mut [&mut theta], &[Some(&[g1])]).map_err(|e| e.to_string())?;
    let e1 = 1e-3 * 6.0 / (6.0 + 1e-8);
    let g2 = 2.0 * (theta[0] - 3.0);
    adam.step(&mut [&mut theta], &[Some(&[g2])]).map_err(|e| e.to_string())?;
    let m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1.0 - 0.9f64.powi(2));
    let v = (0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2) / (1.0 - 0.999f64.powi(2));
    let e2 = e1 - 1e-3 * m / (v.sqrt() + 1e-8);
    ensure((theta[0] - e2).abs() <= 1e-12, || format!("adam {} vs {e2}", theta[0]))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for d in [1, 7, 50] {
        let words: Vec<String> = (0..30).map(|i| format!("λέξη{i}")).collect();
        let p = Pretrained::from_pairs(d, synthetic::random_vectors(&words, d, d as u64)).map_err(|e| e.to_string())?;
        let a = dir.path().join("a.vec");
        let b = dir.path().join("b.vec");
        save_vec(&p, &a).map_err(|e| e.to_string())?;
        let back = load_vec(&a).map_err(|e| e.to_string())?;
        save_vec(&back, &b).map_err(|e| e.to_string())?;
        ensure(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || ".vec bytes changed on round trip".into())?;
        ensure(format_vec(&back) == format_vec(&p) && back.vectors == p.vectors, || ".vec values changed".into())?;
    }

    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend((0..20).map(|i| format!("t{i}")));
    let vocab = Vocab::from_tokens(tokens).map_err(|e| e.to_string())?;
    let emb = build_matrix(&vocab, None, 8, 1).map_err(|e| e.to_string())?;
    let mut mutations = 0;
    for arch in Architecture::ALL {
        let cfg = ModelConfig {
            architecture: arch,
            embedding_dim: 8,
            hidden_size: 6,
            fc_units: 5,
            out_channels: 4,
            max_len: Some(16),
            ..Default::default()
        };
        let model = Model::<f64>::build(cfg, vocab.clone(), &emb).map_err(|e| e.to_string())?;
        for len in [1, 2, 4, 9, 16] {
            let words: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..20))).collect();
            let clean = model.encode(&words).map_err(|e| e.to_string())?;
            let base = model.logits_encoded(&[clean.clone()]).map_err(|e| e.to_string())?[0];
            for _ in 0..20 {
                let mut noisy = clean.clone();
                for slot in &mut noisy.ids[len..] {
                    *slot = rng.random_range(0..vocab.len());
                }
                let z = model.logits_encoded(&[noisy]).map_err(|e| e.to_string())?[0];
                ensure(z.to_bits() == base.to_bits(), || format!("{} logit moved under padding mutation", arch.name()))?;
                mutations += 1;
            }
        }
    }
    Ok(format!(
        "metrics = brute force (10⁴ trials); stratified partition laws (1000 corpora); Adam 2-step ≤ 1e-12; .vec byte round trip; {mutations} padding mutations bit-identical"
    ))
}

// ---- determinism ----------------------------------------------------------------------

fn metric_columns(path: &Path) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for r in read_csv(path)? {
        for key in ["accuracy", "f1", "macro_f1", "precision", "recall", "final_loss"] {
            if r.contains_key(key) {
                out.push(num(&r, key)?);
            }
        }
    }
    Ok(out)
}

fn determinism(ctx: &mut Ctx) -> Check {
    let corpus = ctx.path("det.tsv");
    ok_cli(&["generate", "learnable", "--sentences", "90", "--seed", "5", "--output", s(&corpus)])?;
    let base = ["--corpus", s(&corpus), "--folds", "3", "--epochs", "3", "--embedding-dim", "12", "--hidden-size", "8", "--out-channels", "6", "--fc-units", "8"];
    let mut checked = Vec::new();

    // repeated runs at one worker: identical bytes
    for (cmd, extra) in [
        ("crossval", vec!["--architecture", "crnn"]),
        ("sweep", vec!["--sweep-dims", "8,12", "--sweep-models", "cnn,bigru"]),
    ] {
        let mut outputs = Vec::new();
        for (tag, workers) in [("a", "1"), ("b", "1"), ("w3", "3")] {
            let out = ctx.path(&format!("det_{cmd}_{tag}.csv"));
            let mut args = vec![cmd];
            args.extend(base);
            args.extend(extra.iter().copied());
            args.extend(["--workers", workers, "--output", s(&out)]);
            ok_cli(&args)?;
            outputs.push(out);
        }
        for suffix in ["csv", "folds.csv", "summary.csv"] {
            let a = std::fs::read(outputs[0].with_extension(suffix)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outputs[1].with_extension(suffix)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{cmd} {suffix} differs between identical runs"))?;
        }
        for suffix in ["csv", "folds.csv"] {
            let one = metric_columns(&outputs[0].with_extension(suffix))?;
            let three = metric_columns(&outputs[2].with_extension(suffix))?;
            ensure(one.len() == three.len(), || format!("{cmd}: row count depends on workers"))?;
            let gap = one.iter().zip(&three).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(gap <= 1e-12, || format!("{cmd}: workers 1 vs 3 differ by {gap:e}"))?;
        }
        checked.push(cmd);
    }

    let ckpts: Vec<PathBuf> = (0..2).map(|i| ctx.path(&format!("det_model{i}.json"))).collect();
    let preds: Vec<PathBuf> = (0..2).map(|i| ctx.path(&format!("det_pred{i}.tsv"))).collect();
    for i in 0..2 {
        let mut args = vec!["train"];
        args.extend(base);
        args.extend(["--architecture", "bilstm", "--output", s(&ckpts[i])]);
        ok_cli(&args)?;
        ok_cli(&["predict", "--checkpoint", s(&ckpts[i]), "--input", s(&corpus), "--output", s(&preds[i])])?;
    }
    for (a, b) in [
        (ckpts[0].clone(), ckpts[1].clone()),
        (ckpts[0].with_extension("log.csv"), ckpts[1].with_extension("log.csv")),
        (preds[0].clone(), preds[1].clone()),
    ] {
        ensure(std::fs::read(&a).ok() == std::fs::read(&b).ok(), || format!("{} differs between runs", a.display()))?;
    }
    checked.extend(["train", "predict"]);
    Ok(format!("{} byte-identical on repeat; crossval/sweep metrics equal across 1 and 3 workers (≤ 1e-12)", checked.join(", ")))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, fn(&mut Ctx) -> Check); 7] = [
        ("gradient integrity", gradient_integrity),
        ("overfit sanity", overfit),
        ("learnable-task benchmark", benchmark),
        ("protocol fidelity", protocol),
        ("fine-tune ordering", fine_tune_ordering),
        ("oracle equivalences", oracles),
        ("determinism", determinism),
    ];
    let mut ctx = Ctx {
        dir: tempfile::tempdir().expect("temp dir"),
        bench: None,
    };
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.0}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.0}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
