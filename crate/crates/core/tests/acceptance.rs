//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! ```bash
//! cargo test --release --test acceptance
//! ```

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use cupid::config::RunConfig;
use cupid::domain::{Dataset, MatchRecord, Session, Split, UserId};
use cupid::engine::{bench_latency, optimal_pairing, pair_pool, pairing_total, EmbeddingMemory, ServeMode};
use cupid::eval::{self, ks_distance, predict_targets, skewness, Delay, EvalReport, Variant};
use cupid::model::{CupidModel, ModelConfig};
use cupid::numerics::{grad_check, CausalStack, Graph, LayerNorm, Mlp, ParamStore, Tensor};
use cupid::prediction::{HeadMode, PredictionHead};
use cupid::training::{self, reduction_factor, Corpus, TrainingConfig};
use cupid::worldsim::{
    generate_dataset, run_online, uniform_dataset, ModelPolicy, OnlineConfig, RandomPolicy, WorldConfig,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ABLATION_SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;
const SCORE_TOL: f64 = 1e-6;
const TORN_READ_CYCLES: usize = 1_000_000;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Everything trained on one seed of the default world.
struct SeedRun {
    config: RunConfig,
    dataset: Dataset,
    corpus: Corpus,
    threshold_ms: f64,
    full: CupidModel,
    no_session: CupidModel,
    no_exp: CupidModel,
    reports: Vec<(Variant, EvalReport)>,
}

fn seed_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.apply_root_seed();
    cfg
}

fn test_report(m: &CupidModel, corpus: &Corpus, thr: f64) -> cupid::Result<EvalReport> {
    eval::evaluate(m, corpus, Split::Test, thr, Delay::Live)
}

/// Trains the ablation variants keeping the models, with the no-second-phase
/// row taken from the full model's phase-1 snapshot.
fn seed_run(seed: u64) -> cupid::Result<SeedRun> {
    let config = seed_config(seed);
    let dataset = generate_dataset(&config.world, Default::default())?;
    let corpus = Corpus::new(&dataset)?;
    let thr = eval::quality_threshold(&dataset)?;
    let (base, tcfg, schema) = (&config.model, &config.training, dataset.schema);

    let mut full = CupidModel::new(Variant::Full.model_config(base), schema, tcfg.seed)?;
    training::train_phase1(&mut full, &corpus, tcfg, thr, &mut Vec::new())?;
    let snapshot = test_report(&full, &corpus, thr)?;
    training::train_phase2(&mut full, &corpus, tcfg, thr, &mut Vec::new())?;
    let no_session = eval::train_variant(Variant::NoSession, base, schema, &corpus, tcfg, thr, &mut Vec::new())?;
    let no_exp = eval::train_variant(Variant::NoExp, base, schema, &corpus, tcfg, thr, &mut Vec::new())?;
    let reports = vec![
        (Variant::Full, test_report(&full, &corpus, thr)?),
        (Variant::NoSession, test_report(&no_session, &corpus, thr)?),
        (Variant::NoSecondPhase, snapshot),
        (Variant::NoExp, test_report(&no_exp, &corpus, thr)?),
    ];
    Ok(SeedRun {
        config,
        dataset,
        corpus,
        threshold_ms: thr,
        full,
        no_session,
        no_exp,
        reports,
    })
}

fn inference_counts() -> cupid::Result<Outcome> {
    let world = WorldConfig {
        num_users: 128,
        ..WorldConfig::default()
    };
    let ds = uniform_dataset(&world, Default::default(), 32)?;
    let corpus = Corpus::new(&ds)?;
    let records = corpus.in_split(Split::Train).len() as u64;
    let sessions = corpus.sessions.len() as u64;
    let cfg = TrainingConfig {
        phase1_epochs: 10,
        phase2_epochs: 10,
        joint_epochs: 10,
        early_stopping: false,
        ..TrainingConfig::default()
    };
    // Counts do not depend on width; a narrow model keeps this quick.
    let model_cfg = ModelConfig {
        dim: 8,
        proj_dim: 4,
        hidden: vec![8],
        cat_dim: 2,
        layers: 1,
        ..ModelConfig::default()
    };
    let thr = eval::quality_threshold(&ds)?;
    let mut two = CupidModel::new(model_cfg.clone(), ds.schema, 0)?;
    let (p1, p2) = training::train_two_phase(&mut two, &corpus, &cfg, thr, &mut Vec::new())?;
    let mut joint = CupidModel::new(model_cfg, ds.schema, 0)?;
    let j = training::train_joint_baseline(&mut joint, &corpus, &cfg, thr, &mut Vec::new())?;

    let want_two = (cfg.phase1_epochs as u64 + 2) * sessions;
    let want_joint = 2 * cfg.joint_epochs as u64 * records;
    let measured_two = p1.forwards + p2.forwards;
    let ratio = j.forwards as f64 / measured_two as f64;
    let closed = reduction_factor(10, 10, 32.0);
    let headline = reduction_factor(10, 10, 128.0);
    Ok(check(
        records == 4096
            && measured_two == want_two
            && two.counter().get() == want_two
            && j.forwards == want_joint
            && joint.counter().get() == want_joint
            && ratio == j.forwards as f64 / want_two as f64
            && (ratio - 2.0 * 10.0 * 32.0 / 12.0).abs() < 1e-12
            && (closed - ratio).abs() < 1e-12
            && (headline - 640.0 / 3.0).abs() < 1e-12,
        format!(
            "|D|={records} sessions={sessions} two-phase={measured_two} (want {want_two}) joint={} (want {want_joint}) \
             ratio={ratio:.2} headline={headline:.2}",
            j.forwards
        ),
    ))
}

fn learning_signal(run: &SeedRun) -> Outcome {
    let full = &run.reports[0].1;
    let base = &run.reports[1].1;
    let (mf, mb) = (full.entire_mse(), base.entire_mse());
    let (af, ab) = (full.entire_auroc(), base.entire_auroc());
    let rel = (mb - mf) / mb;
    let users = run.dataset.static_features.len();
    let matches = run.dataset.matches().len();
    check(
        users >= 800 && matches >= 50_000 && run.config.world.drift_rate > 0.0 && rel >= 0.05 && af - ab >= 0.01,
        format!(
            "{users} users, {matches} matches: MSE {mf:.4} vs {mb:.4} ({:.1}% better), AUROC {af:.4} vs {ab:.4} ({:+.4})",
            100.0 * rel,
            af - ab
        ),
    )
}

fn lowest(reports: &[(Variant, EvalReport)]) -> Variant {
    reports
        .iter()
        .min_by(|a, b| a.1.entire_mse().total_cmp(&b.1.entire_mse()))
        .expect("four variants")
        .0
}

fn ablation_order(seed0: &SeedRun) -> cupid::Result<Outcome> {
    let mut winners = vec![lowest(&seed0.reports)];
    for seed in 1..ABLATION_SEEDS {
        let cfg = seed_config(seed);
        let ds = generate_dataset(&cfg.world, Default::default())?;
        let corpus = Corpus::new(&ds)?;
        let thr = eval::quality_threshold(&ds)?;
        let rows = eval::run_ablations(&ds, &corpus, &cfg.model, &cfg.training, thr)?;
        winners.push(lowest(&rows));
    }
    let wins = winners.iter().filter(|&&v| v == Variant::Full).count();
    let labels: Vec<&str> = winners.iter().map(|v| v.label()).collect();
    Ok(check(
        wins >= 4,
        format!("lowest Entire MSE per seed: {labels:?} (full wins {wins}/{ABLATION_SEEDS})"),
    ))
}

fn exponential_shaping(run: &SeedRun) -> cupid::Result<Outcome> {
    let targets = run.corpus.in_split(Split::Test);
    let et = predict_targets(&run.full, &run.corpus, &targets, Delay::Live)?;
    let lin = predict_targets(&run.no_exp, &run.corpus, &targets, Delay::Live)?;
    let (ks_et, ks_lin) = (
        ks_distance(&et.pred_ms, &et.true_ms)?,
        ks_distance(&lin.pred_ms, &lin.true_ms)?,
    );
    let (sk_et, sk_lin) = (skewness(&et.pred_ms)?, skewness(&lin.pred_ms)?);
    Ok(check(
        run.no_exp.config.head_mode == HeadMode::Linear && ks_et < ks_lin && sk_et > sk_lin,
        format!("KS {ks_et:.4} (exp) vs {ks_lin:.4} (linear), skewness {sk_et:.3} vs {sk_lin:.3}"),
    ))
}

fn delay_robustness(run: &SeedRun) -> cupid::Result<Outcome> {
    let (corpus, thr) = (&run.corpus, run.threshold_ms);
    let tcfg = &run.config.training;
    let stats = eval::train_variant(
        Variant::SessionStats,
        &run.config.model,
        run.dataset.schema,
        corpus,
        tcfg,
        thr,
        &mut Vec::new(),
    )?;
    let feature_only = test_report(&run.no_session, corpus, thr)?.entire_mse();
    let with_stats = test_report(&stats, corpus, thr)?.entire_mse();
    let sweep = eval::run_delay_sweep(&run.full, corpus, Split::Test, thr, &eval::DEFAULT_DELAYS_MS)?;
    let delayed: Vec<f64> = sweep[..eval::DEFAULT_DELAYS_MS.len()]
        .iter()
        .map(|r| r.entire_mse())
        .collect();
    let ceiling = feature_only.min(with_stats);
    let below = delayed.iter().all(|&m| m < ceiling);
    let monotone_end = delayed[delayed.len() - 1] >= delayed[0];
    let shown: Vec<String> = delayed.iter().map(|m| format!("{m:.4}")).collect();
    Ok(check(
        below && monotone_end,
        format!(
            "MSE at 0/2/4/8/16 s: [{}], never-updated {:.4}; feature-only {feature_only:.4}, with stats {with_stats:.4}",
            shown.join(", "),
            sweep.last().expect("never row").entire_mse()
        ),
    ))
}

fn latency() -> cupid::Result<Outcome> {
    let cfg = RunConfig::default();
    let mut model = CupidModel::new(ModelConfig::default(), Default::default(), 0)?;
    model.state.phase2_done = true;
    let sizes = [16, 64, 256];
    let mut rows = Vec::new();
    for mode in [ServeMode::Sync, ServeMode::Async] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.bench.seed);
        rows.extend(bench_latency(
            &model,
            mode,
            &sizes,
            cfg.bench.reps,
            cfg.bench.session_len,
            &mut rng,
        )?);
    }
    let ordered = rows.iter().all(|r| r.p50_us <= r.p90_us && r.p90_us <= r.p99_us);
    let mut ok = ordered;
    let mut parts = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let (s, a) = (&rows[i], &rows[sizes.len() + i]);
        ok &= a.p99_us <= 0.5 * s.p99_us;
        parts.push(format!(
            "pool {n}: p99 {:.0} -> {:.0} us ({:+.1}%)",
            s.p99_us,
            a.p99_us,
            100.0 * (a.p99_us / s.p99_us - 1.0)
        ));
    }
    Ok(check(
        ok,
        format!("{}; percentiles ordered: {ordered}", parts.join(", ")),
    ))
}

fn grad_checks() -> cupid::Result<(f64, String)> {
    let mut worst = (0.0f64, String::new());
    let mut note = |name: &str, e: f64| {
        if e >= worst.0 {
            worst = (e, name.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut input =
        |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (x5, x8, t12, t56, t24) = (input(4, 5)?, input(7, 8)?, input(1, 12)?, input(7, 8)?, input(4, 6)?);

    let mut r = ChaCha8Rng::seed_from_u64(71);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[5, 8, 3], &mut r)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let rep = grad_check(&mut store, &ids, 1e-5, 64, |g: &mut Graph<'_>| {
        let x = g.input_tensor(&x5);
        let y = mlp.forward(g, x)?;
        g.squared_error(y, t12.data().to_vec(), 0.5)
    })?;
    note("mlp", rep.max_rel_error);

    let mut store = ParamStore::new();
    let table = store.add_embedding("table", 5, 6, &mut r)?;
    store.get_mut(table).data_mut().iter_mut().for_each(|v| *v *= 40.0);
    let ln = LayerNorm::new(&mut store, "ln", 6)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let rep = grad_check(&mut store, &ids, 1e-5, 64, |g: &mut Graph<'_>| {
        let t = g.param(table);
        let rows = g.select_rows(t, vec![0, 3, 3, 4])?;
        let h = ln.forward(g, rows)?;
        let h = g.gelu(h);
        g.squared_error(h, t24.data().to_vec(), 1.0)
    })?;
    note("embedding+layer_norm+gelu", rep.max_rel_error);

    let mut store = ParamStore::new();
    let stack = CausalStack::new(&mut store, "stack", 8, 2, 2, &mut r)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let rep = grad_check(&mut store, &ids, 1e-5, 64, |g: &mut Graph<'_>| {
        let x = g.input_tensor(&x8);
        let y = stack.forward(g, x, &[(0, 3), (3, 4)])?;
        g.squared_error(y, t56.data().to_vec(), 1.0)
    })?;
    note("causal_stack", rep.max_rel_error);

    for mode in [HeadMode::Exponential, HeadMode::Linear] {
        let mut store = ParamStore::new();
        let head = PredictionHead::new(&mut store, "head", 6, 3, mode, &mut r)?;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let rep = grad_check(&mut store, &ids, 1e-5, 64, |g: &mut Graph<'_>| {
            let a = g.input(2, 6, t24.data()[..12].to_vec())?;
            let b = g.input(2, 6, t24.data()[12..].to_vec())?;
            let z = head.forward_logit(g, a, b)?;
            g.squared_error(z, vec![0.4, -0.7], 0.5)
        })?;
        note(&format!("head/{mode:?}"), rep.max_rel_error);
    }

    // The whole model end to end: feature embedders (wide and deep), match
    // embedder, positions, the causal stack and the head.
    let ds = uniform_dataset(
        &WorldConfig {
            num_users: 8,
            ..WorldConfig::default()
        },
        Default::default(),
        3,
    )?;
    let corpus = Corpus::new(&ds)?;
    let cfg = ModelConfig {
        dim: 6,
        proj_dim: 3,
        hidden: vec![5],
        cat_dim: 2,
        layers: 1,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut m = CupidModel::new(cfg, ds.schema, 72)?;
    let picks = [0usize, 5, 9];
    let records: Vec<&MatchRecord> = picks.iter().map(|&i| corpus.record(&corpus.targets[i])).collect();
    let targets: Vec<f64> = records.iter().map(|r| r.log_duration() / 10.0).collect();
    let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
    let (feature, aux, session, head) = (&m.feature, &m.aux_feature, &m.session, &m.head);
    let rep = grad_check(&mut m.store, &ids, 1e-5, 16, |g: &mut Graph<'_>| {
        let seqs: Vec<&[MatchRecord]> = picks
            .iter()
            .map(|&i| {
                let t = &corpus.targets[i];
                &corpus.sessions[t.session].records()[..t.state]
            })
            .collect();
        let batch = session.encode_batch(g, &seqs)?;
        let rows = picks
            .iter()
            .enumerate()
            .map(|(s, &i)| batch.row(s, corpus.targets[i].state))
            .collect();
        let e_s = g.select_rows(batch.states, rows)?;
        let own: Vec<_> = records.iter().map(|r| &r.self_features).collect();
        let other: Vec<_> = records.iter().map(|r| &r.counterpart_features).collect();
        let e_u = feature.embed(g, &own)?;
        let e_i = g.add(e_s, e_u)?;
        let e_j = aux.embed(g, &other)?;
        let z = head.forward_logit(g, e_i, e_j)?;
        g.squared_error(z, targets.clone(), 1.0)
    })?;
    note("whole model", rep.max_rel_error);
    Ok(worst)
}

fn score_matrix_pools(rng: &mut ChaCha8Rng) -> cupid::Result<f64> {
    let mut worst = 0.0f64;
    for pool in 0..100 {
        let mode = if pool % 4 == 3 {
            HeadMode::Linear
        } else {
            HeadMode::Exponential
        };
        let mut store = ParamStore::new();
        let head = PredictionHead::new(&mut store, "head", 16, 8, mode, rng)?;
        let n = rng.random_range(2..=64);
        let reps = Tensor::matrix(n, 16, (0..n * 16).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let m = head.score_matrix(&store, &reps)?;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let direct = head.predict_duration(&store, reps.row(i), reps.row(j))?;
                    worst = worst.max((m.data()[i * n + j] - direct).abs() / direct.abs().max(f64::MIN_POSITIVE));
                }
            }
        }
    }
    Ok(worst)
}

/// States up to a cut are bit-identical whether or not later matches exist.
fn causality(model: &CupidModel, corpus: &Corpus, rng: &mut ChaCha8Rng) -> cupid::Result<usize> {
    let long: Vec<&Session> = corpus.sessions.iter().filter(|s| s.len() >= 2).collect();
    let mut violations = 0;
    for _ in 0..100 {
        let s = *long.choose(rng).expect("sessions with two or more matches");
        let cut = rng.random_range(1..s.len());
        let full = model.session.encode_session(&model.store, s)?;
        let prefix = Session::new(s.owner(), s.records()[..cut].to_vec())?;
        let short = model.session.encode_session(&model.store, &prefix)?;
        violations += (0..short.len()).filter(|&k| short.state(k) != full.state(k)).count();
    }
    Ok(violations)
}

fn greedy_pairs(rng: &mut ChaCha8Rng) -> cupid::Result<(usize, f64)> {
    let (mut failures, mut worst) = (0, f64::INFINITY);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let mut s = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random_range(0.0..100.0);
                s[i * n + j] = v;
                s[j * n + i] = v;
            }
        }
        let s = Tensor::matrix(n, n, s)?;
        let greedy = pairing_total(&s, &pair_pool(&s)?);
        let best = pairing_total(&s, &optimal_pairing(&s)?);
        if best > 0.0 {
            worst = worst.min(greedy / best);
        }
        if greedy + 1e-9 < 0.5 * best {
            failures += 1;
        }
    }
    Ok((failures, worst))
}

fn torn_reads() -> cupid::Result<(usize, u64)> {
    let mem = Arc::new(EmbeddingMemory::new(2));
    let user = UserId(1);
    let width = 32;
    mem.commit(user, vec![0.0; width], 0, 0)?;
    let stop = Arc::new(AtomicBool::new(false));
    let writer = {
        let (mem, stop) = (Arc::clone(&mem), Arc::clone(&stop));
        std::thread::spawn(move || -> cupid::Result<u64> {
            let mut t = 1u64;
            while !stop.load(Ordering::Relaxed) {
                mem.commit(user, vec![t as f64; width], t, t)?;
                t += 1;
            }
            Ok(t - 1)
        })
    };
    let mut torn = 0;
    for _ in 0..TORN_READ_CYCLES {
        let c = mem.latest(user).expect("seeded above");
        let v = c.computed_upto_ms as f64;
        if c.rep.len() != width || c.rep.iter().any(|&x| x != v) {
            torn += 1;
        }
    }
    stop.store(true, Ordering::Relaxed);
    let writes = writer.join().expect("writer thread")?;
    Ok((torn, writes))
}

fn numeric_suite(run: &SeedRun) -> cupid::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (grad, layer) = grad_checks()?;
    let score = score_matrix_pools(&mut rng)?;
    let causal = causality(&run.full, &run.corpus, &mut rng)?;
    let (greedy_fail, greedy_ratio) = greedy_pairs(&mut rng)?;
    let (torn, writes) = torn_reads()?;
    Ok(check(
        grad < GRAD_TOL && score <= SCORE_TOL && causal == 0 && greedy_fail == 0 && torn == 0,
        format!(
            "grad max rel {grad:.2e} ({layer}), score rel {score:.2e}, causality mismatches {causal}, \
             greedy failures {greedy_fail} (min ratio {greedy_ratio:.3}), torn reads {torn}/{TORN_READ_CYCLES} ({writes} writes)"
        ),
    ))
}

fn online(run: &SeedRun) -> cupid::Result<Outcome> {
    let model = Arc::new(run.full.clone());
    let online = OnlineConfig::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for alpha in [run.config.world.alpha, 0.0] {
        let world = WorldConfig {
            alpha,
            ..run.config.world.clone()
        };
        let mut cupid = ModelPolicy::new("cupid", Arc::clone(&model), online.compute_delay_ms)?;
        let mut random = RandomPolicy;
        let report = run_online(&world, run.dataset.schema, &online, vec![&mut cupid, &mut random])?;
        let c = report.comparison.as_ref().expect("two arms");
        let windows = report.arms.iter().map(|a| a.windows).min().unwrap_or(0);
        ok &= windows >= 30;
        ok &= if alpha > 0.0 {
            c.significant && c.difference_ms > 0.0
        } else {
            !c.significant
        };
        parts.push(format!(
            "alpha {alpha}: {:+.0} ms (se {:.0}, {}, {windows} windows/arm)",
            c.difference_ms,
            c.standard_error_ms,
            if c.significant {
                "significant"
            } else {
                "not significant"
            }
        ));
    }
    Ok(check(ok, parts.join("; ")))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |name: &str, t: Instant, outcome: cupid::Result<Outcome>| {
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {name} [{secs:.1}s] {detail}");
    };

    let t = Instant::now();
    report("C1 inference counts", t, inference_counts());

    let t = Instant::now();
    let run = match seed_run(0) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL seed-0 training: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("     seed 0 trained in {:.1}s", t.elapsed().as_secs_f64());
    report("C2 learning signal", Instant::now(), Ok(learning_signal(&run)));
    let t = Instant::now();
    report("C3 ablation ordering", t, ablation_order(&run));
    let t = Instant::now();
    report("C4 exponential shaping", t, exponential_shaping(&run));
    let t = Instant::now();
    report("C5 delay robustness", t, delay_robustness(&run));
    let t = Instant::now();
    report("C6 latency", t, latency());
    let t = Instant::now();
    report("C7 numeric suite", t, numeric_suite(&run));
    let t = Instant::now();
    report("C8 online switchback", t, online(&run));

    println!(
        "{} criteria failed, {:.1}s total",
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
