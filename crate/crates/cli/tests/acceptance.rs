//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use fedchain_cli::{cmd_verify, EXIT_OK, EXIT_VERIFY};
use fedchain_core::consensus::{
    open_round, ModelProposal, PredictionSet, RoundConfig, TallyOutcome, VoteBallot,
};
use fedchain_core::error::Error;
use fedchain_core::export::render;
use fedchain_core::fl::{compute_contribution, ModelDigest};
use fedchain_core::nn::{self, ArchSpec, LayerParams, ModelParams};
use fedchain_core::rng::rng_from;
use fedchain_core::scenario::Preset;
use fedchain_core::sim::{run_simulation_observed, CostModel, SimConfig, SimOutput, SimStatus};
use fedchain_core::{MinerId, Tick};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
}

/// Per-round invariants gathered from every simulation the suite runs.
#[derive(Default)]
struct RoundChecks {
    runs: usize,
    rounds: usize,
    reward_sum_failures: Vec<String>,
    conservation_failures: Vec<String>,
    chain_failures: Vec<String>,
}

fn run_checked(label: &str, config: &SimConfig, checks: &mut RoundChecks) -> (SimOutput, Duration) {
    let started = Instant::now();
    let mut before: f64 = config.initial_balances.iter().map(|(_, b)| b).sum();
    let block_reward = config.round_config.block_reward;
    let out = run_simulation_observed(config, |view| {
        checks.rounds += 1;
        let block = view.ledger.blocks().last().expect("a block was just committed");
        let paid: f64 = block.rewards.per_winner.iter().map(|w| w.reward).sum();
        if (paid - block_reward).abs() > 1e-9 {
            checks
                .reward_sum_failures
                .push(format!("{label} round {}: paid {paid}", view.round));
        }
        let after = view.ledger.total_balance();
        if (before + paid - after).abs() > 1e-9 * after.abs().max(1.0) {
            checks.conservation_failures.push(format!(
                "{label} round {}: {before} + {paid} != {after}",
                view.round
            ));
        }
        if !view.ledger.verify_chain() {
            checks
                .chain_failures
                .push(format!("{label} round {}", view.round));
        }
        before = after;
    })
    .expect("simulation runs");
    checks.runs += 1;
    (out, started.elapsed())
}

fn preset_config(preset: Preset, seed: u64, threads: usize) -> SimConfig {
    let mut s = preset.scenario();
    s.seed = seed;
    s.threads = threads;
    s.build().expect("preset builds")
}

fn criterion_1(checks: &mut RoundChecks) -> Verdict {
    let mut total_wins = 0;
    let mut slowest = Duration::ZERO;
    let mut per_seed = Vec::new();
    let mut completed = true;
    for seed in SEEDS {
        let cfg = preset_config(Preset::KnnAttack, seed, 0);
        let (out, took) = run_checked(&format!("knn-attack/{seed}"), &cfg, checks);
        completed &= out.status == SimStatus::Completed && out.records.len() == 20;
        let wins = out.metrics.wins(MinerId(1)) + out.metrics.wins(MinerId(6));
        total_wins += wins;
        slowest = slowest.max(took);
        per_seed.push(format!("s{seed}={wins}"));
    }
    Verdict {
        id: 1,
        title: "adversaries 1 and 6 win no round (knn-attack, 20 rounds, 5 seeds)",
        pass: completed && total_wins == 0 && slowest < Duration::from_secs(120),
        detail: format!(
            "adversary wins {total_wins} [{}], slowest seed {:.2}s",
            per_seed.join(" "),
            slowest.as_secs_f64()
        ),
    }
}

fn is_large(m: MinerId) -> bool {
    (6..=10).contains(&m.0)
}

fn criterion_2(fairness: &[SimOutput]) -> Verdict {
    let (mut large_seats, mut small_seats) = (0, 0);
    let mut reward_majorities = 0;
    let mut per_seed = Vec::new();
    for (seed, out) in SEEDS.iter().zip(fairness) {
        let early = out.metrics.rows.iter().filter(|r| r.round <= 5 && r.won);
        let (l, s) = early.fold((0, 0), |(l, s), r| if is_large(r.miner) { (l + 1, s) } else { (l, s + 1) });
        large_seats += l;
        small_seats += s;
        let large_reward: f64 = out.metrics.rows.iter().filter(|r| is_large(r.miner)).map(|r| r.reward).sum();
        let small_reward: f64 = out.metrics.rows.iter().filter(|r| !is_large(r.miner)).map(|r| r.reward).sum();
        if large_reward > small_reward {
            reward_majorities += 1;
        }
        per_seed.push(format!("s{seed}: seats {l}/{s} reward {large_reward:.1}/{small_reward:.1}"));
    }
    Verdict {
        id: 2,
        title: "large-data miners dominate early seats and total reward (fairness, 5 seeds)",
        pass: large_seats > small_seats && reward_majorities >= 4,
        detail: format!(
            "(a) rounds 1-5 seats large {large_seats} vs small {small_seats}; (b) reward majority in {reward_majorities}/5 seeds [{}]",
            per_seed.join("; ")
        ),
    }
}

fn criterion_3(fairness: &[SimOutput]) -> Verdict {
    let mut pass = true;
    let mut per_seed = Vec::new();
    for (seed, out) in SEEDS.iter().zip(fairness) {
        let first = out.metrics.rounds.first().expect("round 1");
        let last = out.metrics.rounds.last().expect("final round");
        let global_ok = last.global_val_loss < first.global_val_loss;
        let first_loss: BTreeMap<MinerId, f64> = out
            .metrics
            .rows_for(first.round)
            .map(|r| (r.miner, r.val_loss))
            .collect();
        let improved = out
            .metrics
            .rows_for(last.round)
            .filter(|r| first_loss.get(&r.miner).is_some_and(|&f| r.val_loss < f))
            .count();
        pass &= global_ok && improved >= 9;
        per_seed.push(format!(
            "s{seed}: global {:.4}->{:.4}, {improved}/10 miners improved",
            first.global_val_loss, last.global_val_loss
        ));
    }
    Verdict {
        id: 3,
        title: "global and local validation loss fall over a fairness run",
        pass,
        detail: per_seed.join("; "),
    }
}

fn random_model(rng: &mut impl Rng, sizes: &[usize], scale: f64) -> ModelParams {
    let arch = ArchSpec::new(sizes.to_vec()).unwrap();
    let layers = sizes
        .windows(2)
        .map(|w| LayerParams {
            in_dim: w[0],
            out_dim: w[1],
            weights: (0..w[0] * w[1]).map(|_| rng.random_range(-scale..scale)).collect(),
            biases: (0..w[1]).map(|_| rng.random_range(-scale..scale)).collect(),
        })
        .collect();
    ModelParams::from_layers(arch, layers).unwrap()
}

/// Mean over layers of the mean absolute difference, weights and biases
/// pooled, written as plain index loops.
fn contribution_oracle(local: &ModelParams, reference: &ModelParams) -> f64 {
    let mut per_layer_total = 0.0;
    let layers_a = local.layers();
    let layers_b = reference.layers();
    for l in 0..layers_a.len() {
        let (a, b) = (&layers_a[l], &layers_b[l]);
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..a.weights.len() {
            sum += (a.weights[i] - b.weights[i]).abs();
            count += 1;
        }
        for i in 0..a.biases.len() {
            sum += (a.biases[i] - b.biases[i]).abs();
            count += 1;
        }
        per_layer_total += sum / count as f64;
    }
    per_layer_total / layers_a.len() as f64
}

fn criterion_4() -> Verdict {
    let mut rng = rng_from(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(2..=5);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=12)).collect();
        let a = random_model(&mut rng, &sizes, 3.0);
        let b = random_model(&mut rng, &sizes, 3.0);
        let got = compute_contribution(&a, &b).unwrap();
        worst = worst.max((got - contribution_oracle(&a, &b)).abs());
    }
    Verdict {
        id: 4,
        title: "contribution matches flat-loop oracle on 100 model pairs",
        pass: worst <= 1e-12,
        detail: format!("max abs difference {worst:e}"),
    }
}

fn criterion_5(checks: &RoundChecks) -> Verdict {
    let failures = checks.reward_sum_failures.len() + checks.conservation_failures.len();
    let mut detail = format!(
        "{} rounds over {} runs; reward-sum failures {}, conservation failures {}",
        checks.rounds,
        checks.runs,
        checks.reward_sum_failures.len(),
        checks.conservation_failures.len()
    );
    if let Some(f) = checks.reward_sum_failures.iter().chain(&checks.conservation_failures).next() {
        detail.push_str(&format!("; first: {f}"));
    }
    Verdict {
        id: 5,
        title: "block rewards sum to block_reward and balances are conserved",
        pass: failures == 0 && checks.rounds > 0,
        detail,
    }
}

/// Smallest |pre-activation| of the hidden layer over the batch.
fn kink_distance(model: &ModelParams, batch: &[Vec<f64>]) -> f64 {
    let hidden = &model.layers()[0];
    let mut closest = f64::INFINITY;
    for x in batch {
        for j in 0..hidden.out_dim {
            let mut z = hidden.biases[j];
            for (i, xi) in x.iter().enumerate() {
                z += hidden.weight(j, i) * xi;
            }
            closest = closest.min(z.abs());
        }
    }
    closest
}

fn criterion_6() -> Verdict {
    let h = 1e-4;
    // a central difference whose +-h step crosses a ReLU kink measures a
    // secant, not a derivative; such draws are replaced
    let margin = 1e-3;
    let mut rng = rng_from(6);
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..20 {
        let (model, batch) = loop {
            let model = random_model(&mut rng, &[3, 4, 2], 1.0);
            let rows = rng.random_range(1..=6);
            let batch: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            if kink_distance(&model, &batch) > margin {
                break (model, batch);
            }
            redrawn += 1;
        };
        let rows = batch.len();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..2)).collect();
        let grads = nn::gradient(&model, &batch, &labels).unwrap();
        for l in 0..model.layers().len() {
            let analytic: Vec<f64> = grads.layers[l].values().collect();
            for (k, &a) in analytic.iter().enumerate() {
                let shifted = |delta: f64| {
                    let mut m = model.clone();
                    *m.layers_mut()[l].values_mut().nth(k).unwrap() += delta;
                    nn::loss(&nn::forward(&m, &batch).unwrap(), &labels).unwrap()
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let rel = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Verdict {
        id: 6,
        title: "analytic gradients match central differences on 20 [3,4,2] models",
        pass: worst <= 1e-4,
        detail: format!("max relative error {worst:e} ({redrawn} draws within {margin} of a ReLU kink redrawn)"),
    }
}

fn criterion_7() -> Verdict {
    let mut checked = 0;
    let mut violations = Vec::new();
    for h_max in [4usize, 16, 64] {
        let cost = CostModel::new(1.0, h_max, 0.0).unwrap();
        let mut rng = rng_from(7);
        for n_train in [h_max + 1, 2 * h_max, 10 * h_max] {
            for n_test in [1, 10, 100] {
                for d in [2, 8, 32] {
                    checked += 1;
                    let knn = cost.knn_cost(n_train, n_test, d, 1.0, &mut rng);
                    let fwd = cost.forward_cost(n_test, d, 1.0, &mut rng);
                    if knn <= fwd {
                        violations.push(format!("H={h_max} Ntr={n_train} Nte={n_test} D={d}"));
                    }
                }
            }
        }
    }
    Verdict {
        id: 7,
        title: "knn cost exceeds forward cost on the whole grid (noise 0)",
        pass: violations.is_empty(),
        detail: format!("{checked} grid points, {} violations {:?}", violations.len(), violations),
    }
}

fn criterion_8(checks: &mut RoundChecks) -> Verdict {
    let mut pass = true;
    let mut notes = Vec::new();
    for preset in Preset::ALL {
        let seed = 11;
        let cfg = preset_config(preset, seed, 0);
        let (a, _) = run_checked(&format!("{}/{seed}/a", preset.name()), &cfg, checks);
        let (b, _) = run_checked(&format!("{}/{seed}/b", preset.name()), &cfg, checks);
        let (ra, rb) = (render(preset.name(), &cfg, &a), render(preset.name(), &cfg, &b));
        let repeat_ok = ra.metrics_csv.as_bytes() == rb.metrics_csv.as_bytes()
            && a.ledger.tip_hash() == b.ledger.tip_hash();

        let one = preset_config(preset, seed, 1);
        let three = preset_config(preset, seed, 3);
        let (o1, _) = run_checked(&format!("{}/{seed}/t1", preset.name()), &one, checks);
        let (o3, _) = run_checked(&format!("{}/{seed}/t3", preset.name()), &three, checks);
        let (r1, r3) = (render(preset.name(), &one, &o1), render(preset.name(), &three, &o3));
        let threads_ok = r1 == r3 && r1.metrics_csv == ra.metrics_csv && r1.chain_txt == ra.chain_txt;
        pass &= repeat_ok && threads_ok;
        notes.push(format!(
            "{}: repeat {} threads {}",
            preset.name(),
            if repeat_ok { "same" } else { "DIFFER" },
            if threads_ok { "same" } else { "DIFFER" }
        ));
    }
    Verdict {
        id: 8,
        title: "same seed gives identical artifacts, across thread counts too",
        pass,
        detail: notes.join("; "),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TrialKind {
    Random,
    /// Every voter ranks the others cyclically, so all points tie.
    Cyclic,
}

struct TrialResult {
    matched: bool,
    aborted: bool,
    points_tie_at_cut: bool,
    time_tie_at_cut: bool,
}

fn mean_cmp(a: (u128, u128), b: (u128, u128)) -> Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

fn tally_trial(rng: &mut impl Rng, kind: TrialKind) -> TrialResult {
    let n: u32 = rng.random_range(2..=8);
    let k = rng.random_range(1..=n as usize);
    let config = RoundConfig {
        k,
        model_deadline: 10,
        pred_deadline: 10,
        vote_deadline: 10,
        block_reward: 1.0,
        test_records_per_miner: 1,
    };
    let miners: Vec<MinerId> = (1..=n).map(MinerId).collect();
    let global = nn::init_model(&ArchSpec::new(vec![1, 2]).unwrap(), 0);
    let mut ctx = open_round(&config, 1, 0, global, &miners, BTreeMap::new()).unwrap();
    for &m in &miners {
        ctx.accept_model_proposal(ModelProposal {
            miner: m,
            digest: ModelDigest(String::new()),
            test_records: vec![vec![0.0]],
            submitted_at: 0,
        })
        .unwrap();
    }
    ctx.close_model_phase();
    let w = ctx.windows();
    let time_spread: Tick = if rng.random_bool(0.5) { 2 } else { 10 };

    // on-time submission ticks per predictor, kept independently of the context
    let mut times: BTreeMap<MinerId, Vec<Tick>> = BTreeMap::new();
    for &p in &miners {
        for &t in &miners {
            if p == t {
                continue;
            }
            let roll: f64 = rng.random();
            let at = match kind {
                TrialKind::Cyclic => w.pred_open + rng.random_range(0..=1),
                TrialKind::Random if roll < 0.1 => continue,
                TrialKind::Random if roll < 0.2 => w.pred_close + 1 + rng.random_range(0..3),
                TrialKind::Random => w.pred_open + rng.random_range(0..=time_spread),
            };
            let accepted = ctx
                .accept_prediction(PredictionSet {
                    predictor: p,
                    target: t,
                    probs: vec![vec![0.5, 0.5]],
                    submitted_at: at,
                })
                .is_ok();
            assert_eq!(accepted, at <= w.pred_close);
            if accepted {
                times.entry(p).or_default().push(at);
            }
        }
    }
    ctx.close_prediction_phase();

    let mut ballots: Vec<VoteBallot> = Vec::new();
    for &v in &miners {
        let received: Vec<MinerId> = ctx.predictions_for(v).into_keys().collect();
        let ranking = match kind {
            TrialKind::Cyclic => {
                let mut r: Vec<MinerId> = (1..n).map(|off| MinerId((v.0 - 1 + off) % n + 1)).collect();
                r.retain(|m| received.contains(m));
                r
            }
            TrialKind::Random => {
                if rng.random_bool(0.15) {
                    continue;
                }
                let mut r = received.clone();
                r.shuffle(rng);
                r
            }
        };
        let ballot = VoteBallot { voter: v, ranking };
        if ctx.accept_ballot_at(ballot.clone(), w.vote_open).is_ok() {
            ballots.push(ballot);
        }
    }
    ctx.close_vote_phase();

    // brute-force oracle
    let mut points: BTreeMap<MinerId, u64> = BTreeMap::new();
    for b in &ballots {
        let m = b.ranking.len() as u64;
        for (pos, c) in b.ranking.iter().enumerate() {
            *points.entry(*c).or_default() += m - 1 - pos as u64;
        }
    }
    let time_of = |m: &MinerId| -> (u128, u128) {
        let ts = &times[m];
        (ts.iter().map(|&t| t as u128).sum(), ts.len() as u128)
    };
    let better = |a: &MinerId, b: &MinerId| -> bool {
        match points[a].cmp(&points[b]) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match mean_cmp(time_of(a), time_of(b)) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => a < b,
            },
        }
    };
    let mut remaining: Vec<MinerId> = points.keys().copied().collect();
    let mut expected_ranking = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if better(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        expected_ranking.push(remaining.remove(best));
    }
    let expected_winners: Vec<MinerId> = expected_ranking.iter().take(k).copied().collect();

    let mut result = TrialResult {
        matched: false,
        aborted: false,
        points_tie_at_cut: false,
        time_tie_at_cut: false,
    };
    if expected_ranking.len() > k {
        let (a, b) = (&expected_ranking[k - 1], &expected_ranking[k]);
        result.points_tie_at_cut = points[a] == points[b];
        result.time_tie_at_cut = result.points_tie_at_cut && mean_cmp(time_of(a), time_of(b)) == Ordering::Equal;
    }
    match ctx.tally_and_select() {
        Ok(TallyOutcome {
            tally,
            ranking,
            winners,
            ..
        }) => {
            result.matched = !points.is_empty()
                && tally == points
                && ranking == expected_ranking
                && winners == expected_winners;
        }
        Err(Error::RoundAborted { .. }) => {
            result.aborted = true;
            result.matched = points.is_empty();
        }
        Err(_) => {}
    }
    result
}

fn criterion_9() -> Verdict {
    let mut rng = rng_from(9);
    let (mut matched, mut aborted, mut point_ties, mut time_ties) = (0, 0, 0, 0);
    let total = 200;
    for i in 0..total {
        let kind = if i % 4 == 0 { TrialKind::Cyclic } else { TrialKind::Random };
        let r = tally_trial(&mut rng, kind);
        matched += usize::from(r.matched);
        aborted += usize::from(r.aborted);
        point_ties += usize::from(r.points_tie_at_cut);
        time_ties += usize::from(r.time_tie_at_cut);
    }
    Verdict {
        id: 9,
        title: "tally_and_select matches brute-force Borda oracle on 200 ballot sets",
        pass: matched == total && point_ties > 0 && time_ties > 0,
        detail: format!(
            "{matched}/{total} matched; points tie at the K cut in {point_ties}, points+time tie (id decides) in {time_ties}, aborts {aborted}"
        ),
    }
}

fn criterion_10(checks: &RoundChecks) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.txt");
    let mut sink = Vec::new();
    let mut verify = |bytes: &[u8]| -> i32 {
        fs::write(&path, bytes).unwrap();
        sink.clear();
        cmd_verify(&path, &mut sink, &mut std::io::sink())
    };

    let mut short = Preset::KnnAttack.scenario();
    short.rounds = 3;
    let short_cfg = short.build().unwrap();
    let mut scratch = RoundChecks::default();
    let (short_out, _) = run_checked("mutation/short", &short_cfg, &mut scratch);
    let short_dump = render("m", &short_cfg, &short_out).chain_txt.into_bytes();
    let full_cfg = preset_config(Preset::KnnAttack, 1, 0);
    let (full_out, _) = run_checked("mutation/full", &full_cfg, &mut scratch);
    let full_dump = render("m", &full_cfg, &full_out).chain_txt.into_bytes();

    let clean_ok = verify(&short_dump) == EXIT_OK && verify(&full_dump) == EXIT_OK;
    let mut tried = 0;
    let mut missed = Vec::new();
    // every position of the short dump, two different replacements each
    for pos in 0..short_dump.len() {
        for flip in [1u8 << (pos % 8), 0x20] {
            let mut bytes = short_dump.clone();
            bytes[pos] ^= flip;
            tried += 1;
            if verify(&bytes) != EXIT_VERIFY {
                missed.push(pos);
            }
        }
    }
    // random positions and values across the 20-block dump
    let mut rng = rng_from(10);
    for _ in 0..2000 {
        let pos = rng.random_range(0..full_dump.len());
        let mut bytes = full_dump.clone();
        let old = bytes[pos];
        while bytes[pos] == old {
            bytes[pos] = rng.random();
        }
        tried += 1;
        if verify(&bytes) != EXIT_VERIFY {
            missed.push(pos);
        }
    }
    let chain_ok = checks.chain_failures.is_empty() && scratch.chain_failures.is_empty();
    Verdict {
        id: 10,
        title: "chain verifies every round; any single-byte mutation is detected",
        pass: chain_ok && clean_ok && missed.is_empty(),
        detail: format!(
            "verify_chain failures {} over {} rounds; {tried} mutations ({} bytes exhaustive), undetected {}",
            checks.chain_failures.len() + scratch.chain_failures.len(),
            checks.rounds + scratch.rounds,
            short_dump.len(),
            missed.len()
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut checks = RoundChecks::default();
    let mut verdicts = vec![criterion_1(&mut checks)];
    let fairness: Vec<SimOutput> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = preset_config(Preset::Fairness, seed, 0);
            run_checked(&format!("fairness/{seed}"), &cfg, &mut checks).0
        })
        .collect();
    verdicts.push(criterion_2(&fairness));
    verdicts.push(criterion_3(&fairness));
    verdicts.push(criterion_4());
    verdicts.push(criterion_6());
    verdicts.push(criterion_7());
    verdicts.push(criterion_8(&mut checks));
    verdicts.push(criterion_9());
    verdicts.push(criterion_5(&checks));
    verdicts.push(criterion_10(&checks));
    verdicts.sort_by_key(|v| v.id);

    let mut failed = 0;
    for v in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {} :: {}", v.id, v.title, v.detail);
        failed += usize::from(!v.pass);
    }
    let distinct: BTreeSet<u8> = verdicts.iter().map(|v| v.id).collect();
    assert_eq!(distinct.len(), 10, "every criterion reported once");
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
