//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedloc_cli::{cmd_bench, cmd_run, run_configs, LabeledConfig};
use fedloc_core::channel::{distance_from_rssi, rssi_from_distance, ChannelParams};
use fedloc_core::config::reference_preset;
use fedloc_core::federation::{self, FusionShare, LocalPacket};
use fedloc_core::filter::{self, KfModel, StateEstimate};
use fedloc_core::ledger::{Block, Chain};
use fedloc_core::localization::{trilaterate, AnchorSet, Point};
use fedloc_core::simnet::{build_topology, run_on};
use fedloc_core::wire::raw_value_hits;
use fedloc_core::{Mode, ModeSelection};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and limits.
const DEGENERATE_TOL: f64 = 1e-12;
const DEGENERATE_STEPS: usize = 500;
const DEGENERATE_BUDGET: Duration = Duration::from_secs(1);
const FUSION_SETS: usize = 1000;
const FUSION_TOL: f64 = 1e-9;
const FUSION_BUDGET: Duration = Duration::from_secs(5);
const JOSEPH_STEPS: usize = 1000;
const SPD_TOL: f64 = 1e-9;
const PRESET_SEEDS: u64 = 30;
const PRESET_BUDGET: Duration = Duration::from_secs(120);
const ACCURACY_BAND: (f64, f64) = (80.0, 99.0);
const ACCURACY_GAP: (f64, f64) = (-2.0, 6.0);
const ROUND_TRIP_POINTS: usize = 10_000;
const ROUND_TRIP_REL_TOL: f64 = 1e-9;
const TRILATERATION_CASES: usize = 200;
const TRILATERATION_TOL_M: f64 = 1e-6;
const LEDGER_BLOCKS: u64 = 10;
const BENCH_ROUNDS: u64 = 10_000;
const BENCH_RATIO_LIMIT: f64 = 2.0;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

fn degenerate_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for n in [1usize, 2] {
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.1 });
        let c = DMatrix::from_fn(1, n, |_, j| if j == 0 { 1.0 } else { 0.3 });
        let model = KfModel::new(
            a,
            DMatrix::zeros(n, 0),
            c,
            random_spd(&mut rng, n, 0.1),
            DMatrix::from_element(1, 1, 4.0),
        )
        .map_err(|e| e.to_string())?;
        let mut kf = StateEstimate::new(DVector::zeros(n), DMatrix::identity(n, n) * 100.0, 0)
            .map_err(|e| e.to_string())?;
        let mut share = FusionShare {
            x_f: kf.x.clone(),
            p_f: kf.p.clone(),
            betas: vec![1.0],
            q_global: model.q.clone(),
            k: 0,
        };
        for _ in 0..DEGENERATE_STEPS {
            let z = DVector::from_element(1, rng.random_range(-75.0..-45.0));
            kf = filter::step(&kf, &model, &z).map_err(|e| e.to_string())?;
            share = federation::fkf_round(&[z], &share, std::slice::from_ref(&model), None)
                .map_err(|e| e.to_string())?
                .share;
            worst = worst
                .max((&share.x_f - &kf.x).amax())
                .max((&share.p_f - &kf.p).amax());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= DEGENERATE_TOL && elapsed < DEGENERATE_BUDGET,
        format!("max deviation {worst:.3e} (tol {DEGENERATE_TOL:e}), {elapsed:.2?}"),
    )
}

fn fusion_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst_info, mut outside) = (0.0f64, 0usize);
    for set in 0..FUSION_SETS {
        let n = 1 + set % 2;
        let count = rng.random_range(1..=6);
        let packets: Vec<LocalPacket> = (0..count)
            .map(|i| LocalPacket {
                filter_id: i as u32 + 1,
                x: DVector::from_fn(n, |_, _| rng.random_range(-80.0..-40.0)),
                p: random_spd(&mut rng, n, 0.05),
                k: 1,
            })
            .collect();
        let master = rng.random_bool(0.5).then(|| StateEstimate {
            x: DVector::from_fn(n, |_, _| rng.random_range(-80.0..-40.0)),
            p: random_spd(&mut rng, n, 0.05),
            k: 1,
        });
        let fused = federation::fuse(&packets, master.as_ref()).map_err(|e| e.to_string())?;

        let mut info = DMatrix::zeros(n, n);
        for p in &packets {
            info += p.p.clone().try_inverse().ok_or("singular input")?;
        }
        if let Some(m) = &master {
            info += m.p.clone().try_inverse().ok_or("singular master")?;
        }
        let fused_info = fused.p.clone().try_inverse().ok_or("singular fused")?;
        worst_info = worst_info.max((fused_info - info).amax());

        if n == 1 {
            let inputs = packets
                .iter()
                .map(|p| p.x[0])
                .chain(master.iter().map(|m| m.x[0]));
            let (lo, hi) = inputs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                (l.min(v), h.max(v))
            });
            if fused.x[0] < lo || fused.x[0] > hi {
                outside += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_info <= FUSION_TOL && outside == 0 && elapsed < FUSION_BUDGET,
        format!("max info error {worst_info:.3e} (tol {FUSION_TOL:e}), {outside} outside hull, {elapsed:.2?}"),
    )
}

fn joseph_spd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut worst_asym, mut worst_eig) = (0.0f64, f64::INFINITY);
    for _ in 0..JOSEPH_STEPS {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=n);
        let a = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
        );
        let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
        let model = KfModel::new(
            a,
            DMatrix::zeros(n, 0),
            c,
            random_spd(&mut rng, n, 0.0) * 0.1,
            random_spd(&mut rng, m, 1e-3),
        )
        .map_err(|e| e.to_string())?;
        let state = StateEstimate::new(
            DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0)),
            random_spd(&mut rng, n, 1e-6),
            0,
        )
        .map_err(|e| e.to_string())?;
        let z = DVector::from_fn(m, |_, _| rng.random_range(-20.0..20.0));
        let out = filter::step(&state, &model, &z).map_err(|e| e.to_string())?;
        worst_asym = worst_asym.max(out.asymmetry());
        worst_eig = worst_eig.min(out.min_eigenvalue());
    }
    check(
        worst_asym <= SPD_TOL && worst_eig >= -SPD_TOL,
        format!("max asymmetry {worst_asym:.3e}, min eigenvalue {worst_eig:.3e}"),
    )
}

fn preset_configs() -> Vec<LabeledConfig> {
    reference_preset(1)
        .into_iter()
        .map(|config| LabeledConfig {
            label: format!("d{:.1}m", config.fogs[0].x),
            config,
        })
        .collect()
}

struct PresetSummary {
    rmse: [f64; 2],
    accuracy: [f64; 2],
    elapsed: Duration,
}

fn preset_runs() -> Result<PresetSummary, String> {
    let start = Instant::now();
    let configs = preset_configs();
    let (mut rmse, mut accuracy) = ([0.0; 2], [0.0; 2]);
    for seed in 1..=PRESET_SEEDS {
        let (_, out) = run_configs(&configs, Some(ModeSelection::Both), Some(seed))
            .map_err(|e| e.to_string())?;
        for r in &out.reports {
            let i = usize::from(r.mode == Mode::Skf);
            rmse[i] += r.mean_rmse_m / PRESET_SEEDS as f64;
            accuracy[i] += r.mean_accuracy_pct / PRESET_SEEDS as f64;
        }
    }
    Ok(PresetSummary {
        rmse,
        accuracy,
        elapsed: start.elapsed(),
    })
}

fn rmse_ordering(s: &PresetSummary) -> Outcome {
    let [fkf, skf] = s.rmse;
    check(
        fkf <= skf && s.elapsed < PRESET_BUDGET,
        format!(
            "mean RMSE fkf {fkf:.4} m, skf {skf:.4} m over {PRESET_SEEDS} seeds, {:.1?}",
            s.elapsed
        ),
    )
}

fn accuracy_band(s: &PresetSummary) -> Outcome {
    let [fkf, skf] = s.accuracy;
    let gap = skf - fkf;
    let in_band = |a: f64| (ACCURACY_BAND.0..=ACCURACY_BAND.1).contains(&a);
    check(
        in_band(fkf) && in_band(skf) && (ACCURACY_GAP.0..=ACCURACY_GAP.1).contains(&gap),
        format!("accuracy fkf {fkf:.3}%, skf {skf:.3}%, skf-fkf {gap:+.3} pp"),
    )
}

fn channel_round_trip() -> Outcome {
    let mut worst = 0.0f64;
    let params = [
        ChannelParams::default(),
        ChannelParams::noiseless(3.3, 40.0),
        ChannelParams::noiseless(1.6, 70.0),
    ];
    for p in &params {
        for i in 0..ROUND_TRIP_POINTS {
            let t = i as f64 / (ROUND_TRIP_POINTS - 1) as f64;
            let d = 0.1 * 1000f64.powf(t);
            let back = distance_from_rssi(rssi_from_distance(d, p).map_err(|e| e.to_string())?, p);
            worst = worst.max(((back - d) / d).abs());
        }
    }
    check(
        worst <= ROUND_TRIP_REL_TOL,
        format!(
            "max relative error {worst:.3e} over {ROUND_TRIP_POINTS} points x {} models",
            params.len()
        ),
    )
}

fn trilateration_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (mut worst, mut solved) = (0.0f64, 0);
    while solved < TRILATERATION_CASES {
        let count = rng.random_range(3..=6);
        let anchors: Vec<Point> = (0..count)
            .map(|_| Point::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
            .collect();
        let (a, b, c) = (anchors[0], anchors[1], anchors[2]);
        if ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs() < 40.0 {
            continue;
        }
        let Ok(set) = AnchorSet::new(anchors) else {
            continue;
        };
        let target = Point::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
        let d: Vec<f64> = set
            .positions()
            .iter()
            .map(|a| a.distance(&target))
            .collect();
        let fix = trilaterate(&set, &d).map_err(|e| e.to_string())?;
        worst = worst.max(fix.p.distance(&target));
        solved += 1;
    }
    check(
        worst <= TRILATERATION_TOL_M,
        format!("max position error {worst:.3e} m over {solved} instances"),
    )
}

fn flip_hex(h: &str) -> String {
    let first = if h.starts_with('0') { '1' } else { '0' };
    std::iter::once(first).chain(h.chars().skip(1)).collect()
}

fn ledger_tamper() -> Outcome {
    let mut chain = Chain::genesis(1_000);
    for i in 1..LEDGER_BLOCKS {
        chain = chain
            .append_block(&[format!("fog-{i}"), format!("edge-{i}")], 1_000 + i)
            .map_err(|e| e.to_string())?;
    }
    let mutations: [fn(&mut Block); 8] = [
        |b| b.index += 1,
        |b| b.timestamp += 1,
        |b| b.device_ids.push("intruder".into()),
        |b| {
            if b.device_ids.pop().is_none() {
                b.device_ids.push("intruder".into())
            }
        },
        |b| match b.device_ids.first_mut() {
            Some(id) => id.push('x'),
            None => b.device_ids.push("intruder".into()),
        },
        |b| b.prev_hash = flip_hex(&b.prev_hash),
        |b| b.hash = flip_hex(&b.hash),
        |b| b.device_ids.reverse(),
    ];
    let ids: Vec<String> = chain
        .authorized_ids()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (mut total, mut detected, mut denied) = (0, 0, 0);
    for index in 0..chain.len() {
        for mutate in &mutations {
            let mut tampered = chain.clone();
            mutate(&mut tampered.blocks_mut()[index]);
            if tampered == chain {
                // reversing a single-id block is not a mutation
                continue;
            }
            total += 1;
            if !tampered.verify().ok {
                detected += 1;
            }
            if ids.iter().all(|id| !tampered.is_authorized(id)) {
                denied += 1;
            }
        }
    }
    check(
        total > 0 && detected == total && denied == total,
        format!("{detected}/{total} detected, {denied}/{total} denied authorization"),
    )
}

fn privacy_audit() -> Outcome {
    let (mut messages, mut hits, mut raw_count) = (0usize, 0usize, 0usize);
    for cfg in reference_preset(1) {
        let mut topology = build_topology(&cfg, Mode::Fkf).map_err(|e| e.to_string())?;
        topology.record_uplink = true;
        let traces = run_on(&mut topology, cfg.rounds, cfg.seed).map_err(|e| e.to_string())?;
        let mut all_raw: Vec<f64> = Vec::new();
        for trace in &traces {
            let round_raw: Vec<f64> = trace
                .edges
                .iter()
                .flat_map(|e| e.readings.iter().map(|r| r.raw_rssi_dbm))
                .collect();
            for msg in topology.uplink_log.iter().filter(|m| m.round == trace.k) {
                hits += raw_value_hits(&msg.bytes, &round_raw);
            }
            all_raw.extend(round_raw);
        }
        all_raw.sort_by(f64::total_cmp);
        all_raw.dedup();
        raw_count += all_raw.len();
        for msg in &topology.uplink_log {
            hits += raw_value_hits(&msg.bytes, &all_raw);
        }
        messages += topology.uplink_log.len();
    }
    check(
        hits == 0 && messages > 0,
        format!("{hits} raw values found in {messages} messages ({raw_count} distinct raw values)"),
    )
}

fn determinism() -> Outcome {
    let configs = preset_configs();
    let dirs = [tempfile::tempdir(), tempfile::tempdir()];
    let mut listings = Vec::new();
    for dir in &dirs {
        let dir = dir.as_ref().map_err(|e| e.to_string())?;
        cmd_run(&configs, dir.path(), Some(ModeSelection::Both), Some(42))
            .map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path())
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.map_err(|e| e.to_string())?;
                let bytes = fs::read(e.path()).map_err(|e| e.to_string())?;
                Ok((e.file_name().to_string_lossy().into_owned(), bytes))
            })
            .collect::<Result<_, String>>()?;
        files.sort();
        listings.push(files);
    }
    let same = listings[0] == listings[1];
    check(
        same && !listings[0].is_empty(),
        format!("{} CSV files, byte-identical: {same}", listings[0].len()),
    )
}

fn bench_sanity() -> Outcome {
    let cfg = preset_configs().remove(0).config;
    let report = cmd_bench(&cfg, BENCH_ROUNDS).map_err(|e| e.to_string())?;
    let fkf = report.get("fkf", "total").ok_or("missing fkf row")?;
    let skf = report.get("skf", "total").ok_or("missing skf row")?;
    let ratio = fkf / skf;
    check(
        report.rounds >= BENCH_ROUNDS && ratio <= BENCH_RATIO_LIMIT,
        format!(
            "fkf {fkf:.0} ns/round, skf {skf:.0} ns/round, ratio {ratio:.3} (limit {BENCH_RATIO_LIMIT}) over {} rounds",
            report.rounds
        ),
    )
}

fn main() -> ExitCode {
    let preset = preset_runs();
    let preset = &preset;
    let with_preset = |f: fn(&PresetSummary) -> Outcome| {
        move || preset.as_ref().map_err(Clone::clone).and_then(f)
    };
    let criteria: Vec<Criterion> = vec![
        ("degenerate equivalence", Box::new(degenerate_equivalence)),
        ("fusion correctness", Box::new(fusion_correctness)),
        ("joseph-form SPD preservation", Box::new(joseph_spd)),
        ("RMSE ordering", Box::new(with_preset(rmse_ordering))),
        ("accuracy band", Box::new(with_preset(accuracy_band))),
        ("channel round-trip", Box::new(channel_round_trip)),
        ("trilateration recovery", Box::new(trilateration_recovery)),
        ("ledger tamper detection", Box::new(ledger_tamper)),
        ("privacy audit", Box::new(privacy_audit)),
        ("determinism", Box::new(determinism)),
        ("benchmark sanity", Box::new(bench_sanity)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
