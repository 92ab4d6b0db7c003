//! Acceptance run: one pass/fail line per criterion, nonzero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedchain::chain::{validate_chain, Chain, ChainError, ConsensusMode, Fault, TxPayload};
use fedchain::experiments::{
    accuracy_trends, build_network, build_pools, cell_params, chain_metrics_csv, latency_trends, make_task,
    run_accuracy_sweep, run_cell, run_latency_grid, sweep_csv, sweep_curves_csv, ExperimentConfig, LatencyCell,
    LatencyGrid, RunRecord, Splits, SweepRecord, TrendCheck,
};
use fedchain::fed::{
    evaluate, gradient_check, kl_divergence, local_train, synthetic_dataset, weights_from_divergences, AggregationScheme,
    Architecture, LabelHistogram, Model, SyntheticSpec, TrainConfig, HISTOGRAM_EPSILON,
};
use fedchain::netsim::{build_topology, LatencyHistory, LatencyMatrix, NodeId, TopologyModel};
use fedchain::pools::{
    announce_heads, assign_pools, estimate_latency, pool_cost, EstimatedLatency, HeadPolicy, PoolAssignment, PoolTime,
};
use fedchain::sharedring::{secret_all_reduce, transcript_leakage_check, Fixed, RingConfig};
use fedchain::verify::{
    commit, deserialize_model, draw_challenge, keygen, prove, quantize, serialize_model, verify, Blinding, ProofPayload,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    ExperimentConfig::load(&path).expect("bundled config loads")
}

fn column_sum(inputs: &[Vec<Fixed>]) -> Vec<Fixed> {
    let mut out = vec![0i64; inputs[0].len()];
    for w in inputs {
        for (o, x) in out.iter_mut().zip(w) {
            *o = o.wrapping_add(x.0);
        }
    }
    out.into_iter().map(Fixed).collect()
}

const RING_SIZES: [usize; 5] = [1, 2, 3, 5, 8];
const MODEL_LENS: [usize; 3] = [7, 64, 1000];
const RING_SEEDS: u64 = 100;

fn ring_inputs(k: usize, m: usize, seed: u64) -> Vec<Vec<Fixed>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| (0..m).map(|_| Fixed(rng.gen())).collect()).collect()
}

fn ring_oracle() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for k in RING_SIZES {
        for m in MODEL_LENS {
            for seed in 0..RING_SEEDS {
                let inputs = ring_inputs(k, m, seed);
                let want = column_sum(&inputs);
                let cfg = RingConfig { noise_seed: seed, ..RingConfig::default() };
                let out = secret_all_reduce(&inputs, &cfg).map_err(|e| format!("k={k} M={m} seed={seed}: {e}"))?;
                for (i, o) in out.outputs.iter().enumerate() {
                    ensure(*o == want, || format!("k={k} M={m} seed={seed}: miner {i} differs from the column sum"))?;
                }
                runs += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{runs} pools bit-exact"))
}

fn mask_neutrality() -> Outcome {
    let mut checked = 0;
    for k in RING_SIZES {
        for m in MODEL_LENS {
            for seed in 0..RING_SEEDS {
                let inputs = ring_inputs(k, m, seed);
                let a = secret_all_reduce(&inputs, &RingConfig { noise_seed: seed, ..RingConfig::default() })
                    .map_err(|e| e.to_string())?;
                let b = secret_all_reduce(&inputs, &RingConfig { noise_seed: seed ^ 0xDEAD_BEEF, ..RingConfig::default() })
                    .map_err(|e| e.to_string())?;
                ensure(a.outputs == b.outputs, || format!("k={k} M={m} seed={seed}: outputs depend on the noise seed"))?;
                for j in 0..k {
                    let report = transcript_leakage_check(&a.transcript, j, &a.raw_splits);
                    ensure(report.passed(), || format!("k={k} M={m} seed={seed}: leakage at miner {j}: {report:?}"))?;
                    checked += 1;
                }
                if k >= 2 {
                    let zero = secret_all_reduce(&inputs, &RingConfig { zero_noise: true, ..RingConfig::default() })
                        .map_err(|e| e.to_string())?;
                    ensure(zero.outputs == a.outputs, || "zero-noise run changed the sum".into())?;
                    let caught = (0..k).any(|j| !transcript_leakage_check(&zero.transcript, j, &zero.raw_splits).passed());
                    ensure(caught, || format!("k={k} M={m} seed={seed}: zero noise passed the leakage check"))?;
                }
            }
        }
    }
    Ok(format!("{checked} miner views clean, zero-noise control caught on every k>=2 run"))
}

fn random_l_hat(rng: &mut ChaCha8Rng, n: usize) -> EstimatedLatency {
    let rows = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.gen_range(1.0..300.0) }).collect())
        .collect();
    EstimatedLatency::from_matrix(&LatencyMatrix::from_rows(rows).expect("valid matrix"))
}

fn estimate_and_cost() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.gen_range(2..9);
        let mut history = LatencyHistory::new(n);
        let mut series = vec![Vec::new(); n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for _ in 0..rng.gen_range(1..12) {
                    let v: f64 = rng.gen_range(0.5..250.0);
                    history.record(NodeId(i), NodeId(j), v).map_err(|e| e.to_string())?;
                    series[i * n + j].push(v);
                }
            }
        }
        let est = estimate_latency(&history).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let s = &series[i * n + j];
                let oracle = s.iter().sum::<f64>() / s.len() as f64;
                let got = est.get(NodeId(i), NodeId(j));
                ensure((got - oracle).abs() <= 1e-9 * oracle.max(1.0), || format!("case {case}: mean {got} vs {oracle}"))?;
            }
        }

        let n = rng.gen_range(2..15);
        let l_hat = random_l_hat(&mut rng, n);
        let node = NodeId(rng.gen_range(0..n));
        let members: Vec<NodeId> = (0..n).filter(|_| rng.gen_bool(0.5)).map(NodeId).collect();
        let t_p = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..400.0) };
        let mut oracle = t_p;
        for m in &members {
            if *m != node && l_hat.get(node, *m) > oracle {
                oracle = l_hat.get(node, *m);
            }
        }
        let got = pool_cost(node, &members, t_p, &l_hat);
        ensure(got == oracle, || format!("case {case}: pool cost {got} vs {oracle}"))?;
    }
    Ok("1000 histories and 1000 cost instances match".into())
}

/// Replays the join order and checks each node picked a cheapest pool
/// given the memberships it saw.
fn locally_optimal(a: &PoolAssignment, l_hat: &EstimatedLatency, t_p: &[f64]) -> Result<(), String> {
    let mut pools: Vec<Vec<NodeId>> = a.pools.iter().map(|p| vec![p.head]).collect();
    for &node in &a.join_order {
        let chosen = a.pool_of(node).ok_or_else(|| format!("node {} unassigned", node.0))?;
        let costs: Vec<f64> = pools.iter().zip(t_p).map(|(m, &t)| pool_cost(node, m, t, l_hat)).collect();
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(costs[chosen] <= best, || format!("node {} joined pool {chosen} at {} but {best} was available", node.0, costs[chosen]))?;
        pools[chosen].push(node);
    }
    for (p, want) in a.pools.iter().zip(&pools) {
        ensure(&p.members == want, || "replayed memberships differ".into())?;
    }
    Ok(())
}

fn pool_assignment() -> Outcome {
    let mut recovered = 0;
    let seeds = 50u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(6..=30);
        let clusters = rng.gen_range(2..=(n / 3).min(5));
        let model = TopologyModel::Clustered { clusters, intra_lo: 5.0, intra_hi: 15.0, inter_lo: 80.0, inter_hi: 120.0 };
        let truth = build_topology(n, seed, &model).map_err(|e| e.to_string())?;
        let mut history = LatencyHistory::new(n);
        history.observe_all(&truth, 0.9, 1.1, &mut rng).map_err(|e| e.to_string())?;
        let l_hat = estimate_latency(&history).map_err(|e| e.to_string())?;
        let heads = announce_heads(n, clusters, HeadPolicy::Spread, &l_hat, seed).map_err(|e| e.to_string())?;
        let t_p = vec![0.0; clusters];
        let a = assign_pools(n, &heads, &l_hat, &PoolTime::Fixed(t_p.clone()), seed).map_err(|e| e.to_string())?;
        locally_optimal(&a, &l_hat, &t_p).map_err(|e| format!("seed {seed}: {e}"))?;
        let pure = a.pools.iter().all(|p| {
            let c = model.cluster_of(p.head);
            p.members.iter().all(|m| model.cluster_of(*m) == c)
        });
        let distinct: std::collections::BTreeSet<usize> = a.pools.iter().map(|p| model.cluster_of(p.head)).collect();
        if pure && distinct.len() == clusters {
            recovered += 1;
        }
    }
    let rate = f64::from(recovered) / seeds as f64;
    ensure(rate >= 0.9, || format!("recovered {recovered}/{seeds}"))?;
    Ok(format!("recovered clusters in {recovered}/{seeds} seeds, greedy choice optimal at every join"))
}

fn gradients() -> Outcome {
    let d = synthetic_dataset(&SyntheticSpec { n_samples: 40, n_features: 6, n_classes: 4, seed: 11, ..Default::default() });
    let mut worst = Vec::new();
    for arch in [Architecture::Softmax { features: 6, classes: 4 }, Architecture::Mlp { features: 6, hidden: 5, classes: 4 }] {
        for seed in 0..3 {
            let m = Model::init(arch, seed);
            let err = gradient_check(&m, &d).map_err(|e| e.to_string())?;
            ensure(err < 1e-4, || format!("{arch:?} seed {seed}: relative error {err:e}"))?;
            worst.push(err);
        }
    }
    Ok(format!("max relative error {:e}", worst.iter().copied().fold(0.0, f64::max)))
}

fn kl_properties() -> Outcome {
    let hist = |v: &[f64]| LabelHistogram::new(v.to_vec()).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..500 {
        let c = rng.gen_range(2..12);
        let mut draw = || {
            let raw: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
            let total: f64 = raw.iter().sum();
            let raw = if total > 0.0 { raw } else { vec![1.0; c] };
            let total: f64 = raw.iter().sum();
            LabelHistogram::new(raw.iter().map(|v| v / total).collect()).map(|h| h.smoothed(HISTOGRAM_EPSILON))
        };
        let (p, q) = (draw().map_err(|e| e.to_string())?, draw().map_err(|e| e.to_string())?);
        let d = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        ensure(d >= 0.0, || format!("case {case}: negative divergence {d}"))?;
        ensure(kl_divergence(&p, &p).map_err(|e| e.to_string())? == 0.0, || format!("case {case}: D(p||p) != 0"))?;
        if p != q {
            ensure(d > 0.0, || format!("case {case}: distinct histograms at zero divergence"))?;
        }
    }

    let p = hist(&[0.3, 0.7])?.smoothed(HISTOGRAM_EPSILON);
    let identical = kl_divergence(&p, &p).map_err(|e| e.to_string())?;
    ensure(identical.abs() <= 1e-9, || format!("identical: {identical}"))?;

    let eps = HISTOGRAM_EPSILON;
    let one_hot = kl_divergence(&hist(&[1.0, 0.0])?.smoothed(eps), &hist(&[0.5, 0.5])?.smoothed(eps)).map_err(|e| e.to_string())?;
    let z = 1.0 + 2.0 * eps;
    let (p0, p1) = ((1.0 + eps) / z, eps / z);
    let oracle = p0 * (2.0 * p0).ln() / 2f64.ln() + p1 * (2.0 * p1).ln() / 2f64.ln();
    ensure((one_hot - oracle).abs() <= 1e-9, || format!("one-hot: {one_hot} vs {oracle}"))?;

    let half = kl_divergence(&hist(&[0.5, 0.5])?, &hist(&[0.25, 0.75])?).map_err(|e| e.to_string())?;
    let oracle = 0.5 * 1.0 + 0.5 * (2.0f64 / 3.0).log2();
    ensure((half - oracle).abs() <= 1e-9, || format!("half/quarter: {half} vs {oracle}"))?;
    ensure((half - 0.2075187496394219).abs() <= 1e-9, || format!("half/quarter: {half}"))?;

    let w = weights_from_divergences(&[0.2, 0.4, 0.8], &[1, 1, 1]).map_err(|e| e.to_string())?;
    for (got, want) in w.weights.iter().zip([0.5, 0.375, 0.125]) {
        ensure((got - want).abs() <= 1e-9, || format!("weights {:?}", w.weights))?;
    }
    Ok(format!("500 random pairs, one-hot {one_hot:.9}, half/quarter {half:.12}, weights {:?}", w.weights))
}

fn verification() -> Outcome {
    let base = synthetic_dataset(&SyntheticSpec { n_samples: 1200, n_features: 8, n_classes: 4, seed: 5, ..Default::default() });
    let (train, held_out) = base.train_test_split(0.5, 5);
    let archs = [Architecture::Softmax { features: 8, classes: 4 }, Architecture::Mlp { features: 8, hidden: 6, classes: 4 }];
    let train_cfg = TrainConfig { learning_rate: 0.2, local_epochs: 1, batch_size: 16, ..TrainConfig::default() };

    for run in 0..100u64 {
        let arch = archs[(run % 2) as usize];
        let mut m = Model::init(arch, run);
        if run % 3 == 0 {
            m = local_train(&m, &train, &TrainConfig { seed: run, ..train_cfg }).map_err(|e| e.to_string())?;
        }
        let m = quantize(&m).map_err(|e| e.to_string())?;
        let pp = keygen(if run % 4 == 0 { 256 } else { 128 }, run).map_err(|e| e.to_string())?;
        let r = Blinding::random(run);
        let com = commit(&m, &pp, &r).map_err(|e| e.to_string())?;
        let x = draw_challenge(&held_out, 100, &com.com).map_err(|e| e.to_string())?;
        let proof = prove(&m, &x, &pp, &r).map_err(|e| e.to_string())?;
        let v = verify(&com, &x, &proof.y, &proof.pi, &pp);
        ensure(v.accepted, || format!("honest run {run} rejected: {:?}", v.reason))?;
        ensure(v.accuracy == evaluate(&m, &x.data), || format!("run {run}: measured {} vs evaluate", v.accuracy))?;
    }

    let pp = keygen(128, 42).map_err(|e| e.to_string())?;
    let m = quantize(&local_train(&Model::init(archs[0], 1), &train, &train_cfg).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let r = Blinding::random(7);
    let com = commit(&m, &pp, &r).map_err(|e| e.to_string())?;
    let x = draw_challenge(&held_out, 16, &com.com).map_err(|e| e.to_string())?;
    let honest = prove(&m, &x, &pp, &r).map_err(|e| e.to_string())?;
    let bytes = serialize_model(&m).map_err(|e| e.to_string())?;
    let words_at = bytes.len() - 8 * m.weights.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut accepted = 0;
    for _ in 0..10_000 {
        let mut mutated = bytes.clone();
        let at = rng.gen_range(words_at..bytes.len());
        mutated[at] ^= 1 << rng.gen_range(0..8);
        let proof = deserialize_model(&mutated)
            .ok()
            .and_then(|m2| prove(&m2, &x, &pp, &r).ok())
            .map(|p| (p.y, p.pi))
            .unwrap_or_else(|| {
                (honest.y.clone(), ProofPayload { model: mutated.clone(), blinding: r.clone(), trace: honest.pi.trace.clone() })
            });
        if verify(&com, &x, &proof.0, &proof.1, &pp).accepted {
            accepted += 1;
        }
    }
    ensure(accepted == 0, || format!("{accepted} of 10000 mutated models accepted"))?;

    let mut y = honest.y.clone();
    y[0] = (y[0] + 1) % 4;
    ensure(!verify(&com, &x, &y, &honest.pi, &pp).accepted, || "tampered prediction accepted".into())?;
    let other = draw_challenge(&held_out, 16, b"some other block").map_err(|e| e.to_string())?;
    ensure(other.indices != x.indices, || "challenge did not change".into())?;
    ensure(!verify(&com, &other, &honest.y, &honest.pi, &pp).accepted, || "proof accepted on another batch".into())?;

    let m_b = quantize(&Model::init(archs[0], 77)).map_err(|e| e.to_string())?;
    let r_b = Blinding::random(8);
    let com_b = commit(&m_b, &pp, &r_b).map_err(|e| e.to_string())?;
    let x_b = draw_challenge(&held_out, 16, &com_b.com).map_err(|e| e.to_string())?;
    ensure(!verify(&com_b, &x_b, &honest.y, &honest.pi, &pp).accepted, || "replayed proof accepted for another pool".into())?;
    ensure(!verify(&com_b, &x, &honest.y, &honest.pi, &pp).accepted, || "replayed proof accepted on its own batch".into())?;
    Ok("100 honest runs accepted, 0/10000 mutations accepted, tamper and replay rejected".into())
}

fn mean_latency(records: &[RunRecord], mode: ConsensusMode, n: usize, p: usize) -> f64 {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.mode == mode && r.n_nodes == n && r.n_pools == p)
        .filter_map(|r| r.latency_ms)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn trends_ok(trends: &[TrendCheck]) -> Result<String, String> {
    let detail: Vec<String> = trends.iter().map(|t| format!("[{}] {}: {}", t.status(), t.name, t.detail)).collect();
    if trends.iter().all(|t| t.passed == Some(true)) {
        Ok(detail.join("; "))
    } else {
        Err(detail.join("; "))
    }
}

fn latency_trend(grid: &LatencyGrid, elapsed: Duration) -> Outcome {
    let detail = trends_ok(&latency_trends(&grid.records))?;
    within(elapsed, Duration::from_secs(300))?;
    let fc = |p| mean_latency(&grid.records, ConsensusMode::Fedchain, 50, p);
    Ok(format!(
        "grid {:.1}s; {detail}; fedchain at n=50 over pools 2/5/10: {:.0}/{:.0}/{:.0} ms",
        elapsed.as_secs_f64(),
        fc(2),
        fc(5),
        fc(10)
    ))
}

fn accuracy_trend(records: &[SweepRecord], budget: u32, elapsed: Duration) -> Outcome {
    let detail = trends_ok(&accuracy_trends(records, budget))?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!("sweep {:.1}s; {detail}", elapsed.as_secs_f64()))
}

fn chain_safety(cfg: &ExperimentConfig, grid: &LatencyGrid) -> Outcome {
    let bad: Vec<String> = grid
        .records
        .iter()
        .filter(|r| !r.chain_ok)
        .map(|r| format!("{}/{}/{}/{}", r.mode, r.n_nodes, r.n_pools, r.seed))
        .collect();
    ensure(bad.is_empty(), || format!("invalid chains: {bad:?}"))?;

    let splits = Splits::load(cfg).map_err(|e| e.to_string())?;
    let mut tampered = 0;
    for seed in 1..=5u64 {
        for (n, p) in [(20, 5), (50, 10)] {
            let net = build_network(cfg, &splits, n, seed).map_err(|e| e.to_string())?;
            let pools = build_pools(cfg, &splits, &net, p, seed).map_err(|e| e.to_string())?;
            let mut chain = Chain::new();
            let params = fedchain::chain::RoundParams { fault: Some(Fault::TamperFirstProof), ..cell_params(cfg, n, seed, 1) };
            chain.publish_task(params.publisher, make_task(cfg, &splits, 1, 0.0)).map_err(|e| e.to_string())?;
            let out = chain.run_round_fedchain(1, &net, &pools, &params).map_err(|e| e.to_string())?;
            ensure(!out.rejected_pools.is_empty(), || format!("seed {seed}: nothing was rejected"))?;
            ensure(!out.rejected_pools.contains(&out.winner_pool), || format!("seed {seed}: rejected pool won"))?;
            let rejected_heads: Vec<NodeId> = out.rejected_pools.iter().map(|&g| pools.pools[g].head).collect();
            for b in &chain.ledger.blocks {
                ensure(b.header.proposer.is_none_or(|h| !rejected_heads.contains(&h)), || {
                    format!("seed {seed}: block {} from a rejected pool", b.header.height)
                })?;
            }
            ensure(validate_chain(&chain.ledger).ok(), || format!("seed {seed}: tampered run left an invalid chain"))?;
            tampered += 1;
        }

        let net = build_network(cfg, &splits, 10, seed).map_err(|e| e.to_string())?;
        let pools = build_pools(cfg, &splits, &net, 1, seed).map_err(|e| e.to_string())?;
        let mut chain = Chain::new();
        let params = fedchain::chain::RoundParams { fault: Some(Fault::TamperFirstProof), ..cell_params(cfg, 10, seed, 1) };
        chain.publish_task(params.publisher, make_task(cfg, &splits, 1, 0.0)).map_err(|e| e.to_string())?;
        match chain.run_round_fedchain(1, &net, &pools, &params) {
            Err(ChainError::RoundFailed { .. }) => {}
            other => return Err(format!("seed {seed}: lone tampered pool gave {:?}", other.map(|o| o.height))),
        }
        ensure(chain.ledger.height() == 0, || format!("seed {seed}: block appended after rejection"))?;
    }

    let multi = ExperimentConfig { tasks_per_cell: 3, ..cfg.clone() };
    let mut settled = 0u64;
    for mode in ConsensusMode::ALL {
        for seed in 1..=3 {
            let cell = LatencyCell { mode, n_nodes: 20, n_pools: 5, seed };
            let (record, chain) = run_cell(&multi, &splits, &cell).map_err(|e| e.to_string())?;
            ensure(record.chain_ok, || format!("{mode} seed {seed}: chain not ok"))?;
            let published = u64::from(multi.tasks_per_cell) * multi.reward;
            let balances: u64 = chain.balances().values().sum();
            ensure(balances + chain.escrowed() == published, || format!("{mode} seed {seed}: value not conserved"))?;
            ensure(chain.escrowed() == 0, || format!("{mode} seed {seed}: rewards left in escrow"))?;
            for tx in chain.ledger.blocks.iter().flat_map(|b| &b.transactions) {
                if let TxPayload::RewardSettle { credits, .. } = &tx.payload {
                    let total: u64 = credits.iter().map(|(_, c)| c).sum();
                    ensure(total == multi.reward, || format!("{mode} seed {seed}: settlement pays {total}"))?;
                    settled += 1;
                }
            }
        }
    }
    Ok(format!(
        "{} grid chains valid, {tampered} tampered rounds kept rejected pools off the chain, {settled} settlements exact",
        grid.records.len()
    ))
}

fn determinism(cfg: &ExperimentConfig, sweep_cfg: &ExperimentConfig, grid: &LatencyGrid, sweep: &[SweepRecord]) -> Outcome {
    let splits = Splits::load(cfg).map_err(|e| e.to_string())?;
    let mut cells = 0;
    for r in grid.records.iter().filter(|r| r.n_nodes == 20 && r.seed == 2) {
        let cell = LatencyCell { mode: r.mode, n_nodes: r.n_nodes, n_pools: r.n_pools, seed: r.seed };
        let (again, _) = run_cell(cfg, &splits, &cell).map_err(|e| e.to_string())?;
        let (a, b) = (chain_metrics_csv(std::slice::from_ref(r)), chain_metrics_csv(&[again]));
        ensure(a == b, || format!("{}/{}/{}: rows differ\n{a}\n{b}", r.mode, r.n_nodes, r.n_pools))?;
        cells += 1;
    }
    let again = run_latency_grid(&ExperimentConfig { n_nodes: vec![10], ..cfg.clone() }).map_err(|e| e.to_string())?;
    let subset: Vec<RunRecord> = grid.records.iter().filter(|r| r.n_nodes == 10).cloned().collect();
    ensure(chain_metrics_csv(&subset) == chain_metrics_csv(&again.records), || "n=10 grid rows differ on rerun".into())?;

    let seed = sweep[0].seed;
    let rerun_cfg = ExperimentConfig { seed, runs: 1, alphas: vec![sweep[0].alpha], ..sweep_cfg.clone() };
    let rerun = run_accuracy_sweep(&rerun_cfg).map_err(|e| e.to_string())?;
    let original: Vec<SweepRecord> =
        sweep.iter().filter(|r| r.seed == seed && r.alpha == sweep[0].alpha).cloned().collect();
    ensure(sweep_csv(&original) == sweep_csv(&rerun), || "sweep rows differ on rerun".into())?;
    ensure(sweep_curves_csv(&original) == sweep_curves_csv(&rerun), || "sweep curves differ on rerun".into())?;
    Ok(format!("{cells} cells, the n=10 grid and {} sweep runs reproduced byte for byte", rerun.len()))
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {label} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {label} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("1 ring all-reduce equals direct summation", ring_oracle);
    ok &= run("2 mask neutrality and leakage", mask_neutrality);
    ok &= run("3 latency estimate and pool cost", estimate_and_cost);
    ok &= run("4 pool assignment", pool_assignment);
    ok &= run("5 gradient check", gradients);
    ok &= run("6 KL properties", kl_properties);

    let mut cfg = desk_config();
    cfg.modes = vec![ConsensusMode::Fedchain, ConsensusMode::GflRing, ConsensusMode::FedavgCentral, ConsensusMode::Pow];
    cfg.n_nodes = vec![10, 20, 40, 50];
    cfg.n_pools = vec![2, 5, 10];
    cfg.runs = 5;
    let start = Instant::now();
    let grid = run_latency_grid(&cfg);
    let grid_time = start.elapsed();
    let grid = match grid {
        Ok(g) => Some(g),
        Err(e) => {
            println!("FAIL latency grid could not run: {e}");
            None
        }
    };
    ok &= run("7 latency trends", || match &grid {
        Some(g) => latency_trend(g, grid_time),
        None => Err("grid failed".into()),
    });

    let mut sweep_cfg = cfg.clone();
    sweep_cfg.alphas = vec![0.1, 0.8];
    sweep_cfg.schemes = vec![AggregationScheme::FedAvg, AggregationScheme::Kl];
    let start = Instant::now();
    let sweep = run_accuracy_sweep(&sweep_cfg);
    let sweep_time = start.elapsed();
    let sweep = match sweep {
        Ok(s) => Some(s),
        Err(e) => {
            println!("FAIL accuracy sweep could not run: {e}");
            None
        }
    };
    ok &= run("8 accuracy trends", || match &sweep {
        Some(s) => accuracy_trend(s, sweep_cfg.sweep.round_budget, sweep_time),
        None => Err("sweep failed".into()),
    });

    ok &= run("9 verification soundness", verification);
    ok &= run("10 chain safety", || match &grid {
        Some(g) => chain_safety(&cfg, g),
        None => Err("grid failed".into()),
    });
    ok &= run("11 determinism", || match (&grid, &sweep) {
        (Some(g), Some(s)) => determinism(&cfg, &sweep_cfg, g, s),
        _ => Err("grid or sweep failed".into()),
    });

    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
