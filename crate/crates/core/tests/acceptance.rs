//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use secagg_core::enclave::{
    client_key_payload, client_sign, client_signing_key, derive_signing_key, verify_transcript,
    AggregationProgram, Enclave, EnclaveError, RecordKind,
};
use secagg_core::group::{gen_keypair, GroupParams, KeyMaterial};
use secagg_core::masking::{self, MaskParams, MaskedUpdate, OpCounter};
use secagg_core::protocol::workload::{SyntheticUpdates, Workload};
use secagg_core::protocol::{
    client_update, make_groups, server_round, ClientPool, ClientState, Mode, RoundPlan,
};
use secagg_core::quantizer::{self, QuantConfig};
use secagg_core::sim::{
    bench_bytes, bench_counts, metrics_csv, run_sim, CountCase, SimConfig, WorkloadConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)*));
        }
    };
}

fn keyed_clients(n: u64, seed: &[u8]) -> Vec<KeyMaterial> {
    let params = GroupParams::test_grade();
    let mut keys: Vec<KeyMaterial> = (1..=n)
        .map(|id| gen_keypair(&params, id, seed).unwrap())
        .collect();
    let pks: Vec<_> = keys
        .iter()
        .map(|k| (k.client_id(), k.public_key().clone()))
        .collect();
    for k in keys.iter_mut() {
        for (id, pk) in &pks {
            if *id != k.client_id() {
                k.derive_shared(pk, *id).unwrap();
            }
        }
    }
    keys
}

fn random_plain(rng: &mut ChaCha20Rng, n: usize, m: usize, bits: u8) -> Vec<Vec<u64>> {
    let mask = if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    };
    (0..n)
        .map(|_| (0..m).map(|_| rng.gen::<u64>() & mask).collect())
        .collect()
}

/// Sum of the given rows mod `2^bits`, in u128 arithmetic.
fn plain_sum(rows: &[&Vec<u64>], m: usize, bits: u8) -> Vec<u64> {
    let modulus = 1u128 << bits;
    (0..m)
        .map(|b| (rows.iter().map(|r| r[b] as u128).sum::<u128>() % modulus) as u64)
        .collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let pools: BTreeMap<u64, Vec<KeyMaterial>> = (2..=16)
        .map(|n| (n, keyed_clients(n, b"acceptance-1")))
        .collect();
    for case in 0..200u64 {
        let n = rng.gen_range(2..=16u64);
        let m = rng.gen_range(1..=64usize);
        let bits = [8u8, 16, 32][rng.gen_range(0..3)];
        let keys = &pools[&n];
        let params = MaskParams::new(bits, case + 1, (1..=n).collect(), m).unwrap();
        let plain = random_plain(&mut rng, n as usize, m, bits);
        let masked: Vec<MaskedUpdate> = keys
            .iter()
            .zip(&plain)
            .map(|(k, x)| masking::mask_update(x, k, &params).unwrap())
            .collect();
        let got =
            masking::aggregate(&masked, &params, &OpCounter::new()).map_err(|e| e.to_string())?;
        let want = plain_sum(&plain.iter().collect::<Vec<_>>(), m, bits);
        ensure!(
            got == want,
            "case {case}: n={n} m={m} M=2^{bits} sum mismatch"
        );
        ensure!(
            masked.iter().zip(&plain).any(|(u, x)| &u.values != x),
            "case {case}: masks had no effect"
        );
    }
    Ok("200 cases exact".into())
}

fn recover(
    keys: &[KeyMaterial],
    plain: &[Vec<u64>],
    dropped: &[u64],
    params: &MaskParams,
) -> Result<Vec<u64>, String> {
    let online: Vec<usize> = (0..keys.len())
        .filter(|i| !dropped.contains(&keys[*i].client_id()))
        .collect();
    let masked: Vec<MaskedUpdate> = online
        .iter()
        .map(|&i| masking::mask_update(&plain[i], &keys[i], params).unwrap())
        .collect();
    let partial =
        masking::aggregate(&masked, params, &OpCounter::new()).map_err(|e| e.to_string())?;
    let qs: Vec<_> = online
        .iter()
        .map(|&i| masking::recovery_vector(&keys[i], dropped, params).unwrap())
        .collect();
    masking::apply_recovery(&partial, &qs, params).map_err(|e| e.to_string())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let keys5 = keyed_clients(5, b"acceptance-2");
    let mut subsets = 0;
    for mask in 1u32..31 {
        let dropped: Vec<u64> = (0..5)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| i as u64 + 1)
            .collect();
        for bits in [8u8, 16, 32] {
            let m = 16;
            let params = MaskParams::new(bits, u64::from(mask), (1..=5).collect(), m).unwrap();
            let plain = random_plain(&mut rng, 5, m, bits);
            let got = recover(&keys5, &plain, &dropped, &params)?;
            let survivors: Vec<&Vec<u64>> = (0..5)
                .filter(|i| mask & (1 << i) == 0)
                .map(|i| &plain[i])
                .collect();
            ensure!(
                got == plain_sum(&survivors, m, bits),
                "n=5 dropouts {dropped:?} M=2^{bits}"
            );
        }
        subsets += 1;
    }
    ensure!(subsets == 30, "enumerated {subsets} subsets");

    let keys20 = keyed_clients(20, b"acceptance-2");
    for case in 0..100u64 {
        let rate = [0.1, 0.2, 0.5][case as usize % 3];
        let d = (rate * 20.0_f64).round() as usize;
        let dropped: Vec<u64> = index::sample(&mut rng, 20, d)
            .into_iter()
            .map(|i| i as u64 + 1)
            .collect();
        let m = rng.gen_range(1..=64usize);
        let bits = [8u8, 16, 32][rng.gen_range(0..3)];
        let params = MaskParams::new(bits, 100 + case, (1..=20).collect(), m).unwrap();
        let plain = random_plain(&mut rng, 20, m, bits);
        let got = recover(&keys20, &plain, &dropped, &params)?;
        let survivors: Vec<&Vec<u64>> = (0..20)
            .filter(|i| !dropped.contains(&(*i as u64 + 1)))
            .map(|i| &plain[i])
            .collect();
        ensure!(
            got == plain_sum(&survivors, m, bits),
            "n=20 case {case} rate {rate}"
        );
    }
    Ok("30 subsets at n=5 and 100 random cases at n=20 exact".into())
}

fn criterion_3() -> Outcome {
    let params = GroupParams::test_grade();
    let clients: Vec<ClientState> = (1..=6)
        .map(|id| {
            let keys = gen_keypair(&params, id, b"acceptance-3").unwrap();
            ClientState::new(
                keys,
                Workload::Synthetic(SyntheticUpdates {
                    seed: b"acceptance-3".to_vec(),
                    spread: 0.5,
                }),
            )
        })
        .collect();
    let pool = ClientPool::setup(params, clients).map_err(|e| e.to_string())?;
    let snapshot: BTreeMap<u64, Vec<[u8; 32]>> = pool
        .ids()
        .into_iter()
        .map(|id| {
            (
                id,
                pool.get(id)
                    .unwrap()
                    .keys
                    .shared_keys()
                    .values()
                    .map(|k| k.0)
                    .collect(),
            )
        })
        .collect();
    let ops = OpCounter::new();
    let selected: Vec<u64> = pool.ids();
    let plan = |round, global: Vec<f64>| RoundPlan {
        round,
        groups: make_groups(&selected, None),
        selected: selected.clone(),
        global_model: global,
        mode: Mode::Scaling,
        scale: 1e7,
        clip_bound: 0.5,
    };

    // Round 1: client 3 drops.
    let p1 = plan(1, vec![0.0; 6]);
    let ups: Vec<_> = selected
        .iter()
        .filter(|&&id| id != 3)
        .map(|&id| client_update(pool.get(id).unwrap(), &p1, &ops).unwrap())
        .collect();
    let recs: Vec<_> = selected
        .iter()
        .filter(|&&id| id != 3)
        .map(|&id| {
            secagg_core::protocol::client_recovery(pool.get(id).unwrap(), &p1, &[3], &ops).unwrap()
        })
        .collect();
    let o1 = server_round(&p1, &ups, &recs).map_err(|e| e.to_string())?;
    ensure!(o1.dropouts == vec![3], "round 1 dropouts {:?}", o1.dropouts);

    // Round 2: everyone, same keys.
    let p2 = plan(2, o1.global_model.clone());
    let ups: Vec<_> = selected
        .iter()
        .map(|&id| client_update(pool.get(id).unwrap(), &p2, &ops).unwrap())
        .collect();
    let o2 = server_round(&p2, &ups, &[]).map_err(|e| e.to_string())?;
    ensure!(o2.responders.contains(&3), "client 3 absent from round 2");
    for b in 0..6 {
        let exact: i64 = selected
            .iter()
            .map(|&id| (pool.get(id).unwrap().local_model(&p2)[b] * 1e7).floor() as i64)
            .sum();
        ensure!(
            o2.aggregate[b] == exact as f64 / 1e7,
            "coordinate {b} not exact"
        );
    }
    for id in pool.ids() {
        let now: Vec<[u8; 32]> = pool
            .get(id)
            .unwrap()
            .keys
            .shared_keys()
            .values()
            .map(|k| k.0)
            .collect();
        ensure!(now == snapshot[&id], "client {id} keys changed");
    }
    Ok("client 3 drops in round 1, round 2 exact with original keys".into())
}

fn criterion_4() -> Outcome {
    const B: f64 = 0.5;
    let bound = |c: u32, r: u8| f64::from(c) * B / (2.0 * ((1i64 << (r - 1)) - 1) as f64);
    // Exhaustive over levels at r = 8.
    for c in 1..=16u32 {
        let cfg = QuantConfig::new(8, B, c).unwrap();
        let mut prev = i64::MIN;
        for level in -127..=127i64 {
            let v = quantizer::dequantize(level, &cfg);
            let q = quantizer::quantize(v, &cfg).map_err(|e| e.to_string())?;
            ensure!(q == level, "c={c}: level {level} maps back to {q}");
            ensure!(
                quantizer::quantize(-v, &cfg).unwrap() == -q,
                "c={c}: asymmetric at {level}"
            );
            ensure!(q > prev, "c={c}: not monotone at {level}");
            prev = q;
            for x in [v - 0.49 * cfg.step(), v + 0.49 * cfg.step()] {
                if x.abs() <= cfg.range() {
                    let qx = quantizer::quantize(x, &cfg).unwrap();
                    ensure!(qx == level, "c={c}: {x} off level {level}");
                }
            }
        }
    }
    // 10^5 random reals at each of r = 8 and r = 16.
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for r in [8u8, 16] {
        let mut samples: Vec<(f64, i64)> = Vec::new();
        let c = 1 + (r as u32 % 7);
        let cfg = QuantConfig::new(r, B, c).unwrap();
        for _ in 0..100_000 {
            let v = rng.gen_range(-cfg.range()..=cfg.range());
            let q = quantizer::quantize(v, &cfg).map_err(|e| e.to_string())?;
            ensure!(
                quantizer::quantize(-v, &cfg).unwrap() == -q,
                "r={r}: Q(-{v}) != -Q({v})"
            );
            let err = (quantizer::dequantize(q, &cfg) - v).abs();
            ensure!(
                err <= bound(c, r) * (1.0 + 1e-12),
                "r={r}: error {err} at {v}"
            );
            samples.push((v, q));
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        ensure!(
            samples.windows(2).all(|w| w[0].1 <= w[1].1),
            "r={r}: not monotone"
        );
        // Random counts as well.
        for _ in 0..1000 {
            let c = rng.gen_range(1..=16u32);
            let cfg = QuantConfig::new(r, B, c).unwrap();
            let v = rng.gen_range(-cfg.range()..=cfg.range());
            let q = quantizer::quantize(v, &cfg).unwrap();
            ensure!(
                (quantizer::dequantize(q, &cfg) - v).abs() <= bound(c, r) * (1.0 + 1e-12),
                "r={r} c={c}: {v}"
            );
        }
    }
    // Sign recovery for every sum of k <= c clipped grid values at r = 8.
    let grid: Vec<f64> = (0..=16).map(|j| -B + j as f64 * B / 8.0).collect();
    let mut sums_checked = 0usize;
    for c in 1..=16u32 {
        let cfg = QuantConfig::new(8, B, c).unwrap();
        let levels: Vec<i64> = grid
            .iter()
            .map(|&x| quantizer::quantize_contribution(x, &cfg).unwrap())
            .collect();
        // reachable[sum] = one multiset (as grid indices) reaching it.
        let mut frontier: BTreeMap<i64, Vec<usize>> = BTreeMap::from([(0, Vec::new())]);
        for _k in 1..=c {
            let mut next = BTreeMap::new();
            for (s, witness) in &frontier {
                for (j, l) in levels.iter().enumerate() {
                    next.entry(s + l).or_insert_with(|| {
                        let mut w = witness.clone();
                        w.push(j);
                        w
                    });
                }
            }
            for (s, witness) in &next {
                let wrapped = witness
                    .iter()
                    .fold(0u64, |acc, &j| (acc + quantizer::wrap(levels[j], 8)) % 256);
                let got = quantizer::recover_sign(wrapped, 8);
                ensure!(
                    got == *s,
                    "c={c}: sum {s} recovered as {got} via {witness:?}"
                );
                sums_checked += 1;
            }
            frontier = next;
        }
        // Direct enumeration of all multisets for small c.
        if c <= 4 {
            let mut idx = vec![0usize; c as usize];
            loop {
                let s: i64 = idx.iter().map(|&j| levels[j]).sum();
                let wrapped = idx
                    .iter()
                    .fold(0u64, |acc, &j| (acc + quantizer::wrap(levels[j], 8)) % 256);
                ensure!(
                    quantizer::recover_sign(wrapped, 8) == s,
                    "c={c}: multiset {idx:?}"
                );
                let Some(pos) = (0..idx.len()).rev().find(|&p| idx[p] < 16) else {
                    break;
                };
                let v = idx[pos] + 1;
                for slot in idx[pos..].iter_mut() {
                    *slot = v;
                }
            }
        }
    }
    Ok(format!(
        "levels, 2x10^5 reals, {sums_checked} reachable sums"
    ))
}

fn criterion_5() -> Outcome {
    let rows = bench_bytes(21_840).map_err(|e| e.to_string())?;
    let got: Vec<(Mode, usize)> = rows.iter().map(|r| (r.mode, r.payload_bytes)).collect();
    let want = vec![
        (Mode::Scaling, 87_360),
        (Mode::Quant16, 43_680),
        (Mode::Quant8, 21_840),
    ];
    ensure!(got == want, "payload sizes {got:?}");
    let mb: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.3}", r.payload_bytes as f64 / 1048576.0))
        .collect();
    ensure!(mb == ["0.083", "0.042", "0.021"], "MB column {mb:?}");
    ensure!(
        rows[0].payload_bytes == 4 * rows[2].payload_bytes,
        "8-bit reduction is not 4x"
    );
    Ok(format!("87360/43680/21840 B = {} MB", mb.join("/")))
}

fn criterion_6() -> Outcome {
    let m = 50usize;
    let mut cases = Vec::new();
    for n in [5usize, 10, 15] {
        for d in [0usize, 1, 3] {
            cases.push(CountCase {
                n,
                d,
                m,
                group_size: None,
            });
        }
    }
    cases.push(CountCase {
        n: 12,
        d: 2,
        m,
        group_size: Some(4),
    });
    cases.push(CountCase {
        n: 14,
        d: 5,
        m,
        group_size: Some(5),
    });
    for row in bench_counts(&cases).map_err(|e| e.to_string())? {
        let c = row.case;
        ensure!(
            row.clients.len() == c.n - c.d,
            "{c:?}: {} online",
            row.clients.len()
        );
        for cl in &row.clients {
            let g = c.group_size.map_or(c.n, |_| cl.group_len);
            let d_g = if c.group_size.is_some() {
                cl.group_dropouts
            } else {
                c.d
            };
            ensure!(
                cl.mask_hashes == (m * (g - 1)) as u64,
                "{c:?} client {}: {} mask hashes",
                cl.id,
                cl.mask_hashes
            );
            ensure!(
                cl.recovery_hashes == (m * d_g) as u64,
                "{c:?} client {}: {} recovery hashes",
                cl.id,
                cl.recovery_hashes
            );
        }
        ensure!(
            row.server_additions == (m * (c.n - c.d)) as u64,
            "{c:?}: {} additions",
            row.server_additions
        );
    }
    Ok("3x3 grid plus grouped cases exact".into())
}

fn integrity_config() -> SimConfig {
    let mut cfg = SimConfig::new(
        "acceptance-7",
        10,
        WorkloadConfig::Synthetic {
            dim: 6,
            spread: None,
        },
    );
    cfg.rounds = 3;
    cfg.fraction = 0.8;
    cfg.group_size = Some(4);
    cfg.dropout_rate = 0.25;
    cfg.mode = Mode::Quant16;
    cfg
}

fn criterion_7() -> Outcome {
    // (a) equivalence
    let mut cfg = integrity_config();
    let plain = run_sim(&cfg).map_err(|e| e.to_string())?;
    cfg.attested = true;
    let attested = run_sim(&cfg).map_err(|e| e.to_string())?;
    ensure!(
        plain.final_model_bytes() == attested.final_model_bytes(),
        "final models differ"
    );
    for (a, b) in plain.rounds.iter().zip(&attested.rounds) {
        ensure!(
            a.outcome.to_bytes() == b.outcome.to_bytes(),
            "round {} outcomes differ",
            a.plan.round
        );
    }

    // (b) tampering a stored transcript
    let path =
        std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-transcript.jsonl");
    std::fs::write(&path, attested.transcript.as_ref().unwrap().to_jsonl())
        .map_err(|e| e.to_string())?;
    let stored = std::fs::read(&path).map_err(|e| e.to_string())?;
    let vk = attested.enclave_key.unwrap();
    let keys = &attested.client_keys;
    let clean = verify_transcript(&stored, &vk, keys);
    ensure!(
        clean.accepted(),
        "untampered transcript rejected: {:?}",
        clean.failure
    );
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for trial in 0..100 {
        let pos = rng.gen_range(0..stored.len());
        let bit = rng.gen_range(0..8);
        let mut t = stored.clone();
        t[pos] ^= 1 << bit;
        let line = stored[..pos].iter().filter(|&&b| b == b'\n').count();
        match verify_transcript(&t, &vk, keys).failure {
            Some((idx, _)) if idx == line => {}
            other => {
                return Err(format!(
                    "trial {trial}: flip at byte {pos} (record {line}) gave {other:?}"
                ))
            }
        }
    }

    // (c) replay
    let text = String::from_utf8(stored).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let first_round = lines
        .iter()
        .position(|l| l.contains("\"kind\":\"round\""))
        .unwrap();
    let mut replayed: Vec<&str> = lines[..=first_round].to_vec();
    replayed.push(lines[first_round]);
    let replayed = replayed.join("\n") + "\n";
    match verify_transcript(replayed.as_bytes(), &vk, keys).failure {
        Some((idx, _)) if idx == first_round + 1 => {}
        other => return Err(format!("replayed round envelope gave {other:?}")),
    }
    let program = AggregationProgram {
        fraction: 1.0,
        group_size: None,
        mode: Mode::Scaling,
        scale: 1e7,
        clip_bound: 0.5,
        initial_model: vec![0.0; 2],
        seed: b"acceptance-7c".to_vec(),
    };
    let mut enclave = Enclave::new(derive_signing_key(b"acceptance-7c", "enclave"));
    enclave.install(&program.to_bytes()).unwrap();
    let params = GroupParams::test_grade();
    let (mut regs, mut vks) = (Vec::new(), BTreeMap::new());
    for id in 1..=3u64 {
        let sk = client_signing_key(b"acceptance-7c", id);
        let pk = gen_keypair(&params, id, b"acceptance-7c")
            .unwrap()
            .public_key_bytes();
        regs.push(client_sign(
            &sk,
            id,
            RecordKind::ClientKey,
            client_key_payload(id, &pk),
        ));
        vks.insert(id, sk.verifying_key());
    }
    enclave.key_setup(&regs, &vks).map_err(|e| e.to_string())?;
    enclave
        .attested_round(0, &[], &[])
        .map_err(|e| e.to_string())?;
    match enclave.attested_round(0, &[], &[]) {
        Err(EnclaveError::Replay {
            expected: 1,
            got: 0,
        }) => {}
        other => return Err(format!("stale counter accepted: {other:?}")),
    }
    Ok("bitwise equivalence, 100/100 flips caught at their record, replays rejected".into())
}

fn criterion_8() -> Outcome {
    let mut worst = Vec::new();
    for mode in [Mode::Scaling, Mode::Quant16] {
        let mut cfg = SimConfig::new(
            "acceptance-8",
            20,
            WorkloadConfig::Synthetic {
                dim: 32,
                spread: None,
            },
        );
        cfg.rounds = 10;
        cfg.fraction = 0.5;
        cfg.dropout_rate = 0.2;
        cfg.mode = mode;
        let report = run_sim(&cfg).map_err(|e| e.to_string())?;
        ensure!(
            report.rounds.len() == 10,
            "{mode:?}: {} rounds",
            report.rounds.len()
        );
        let synth = SyntheticUpdates {
            seed: cfg.seed.as_bytes().to_vec(),
            spread: cfg.clip_bound,
        };
        let mut max_err = 0.0f64;
        let mut bound_used = 0.0;
        for r in &report.rounds {
            let p = &r.plan;
            ensure!(
                p.selected.len() == 10 && r.outcome.dropouts.len() == 2,
                "round {}: selection",
                p.round
            );
            let n = r.outcome.responders.len() as f64;
            let mut acc = vec![0.0; p.dim()];
            for &id in &r.outcome.responders {
                let local = synth.local_model(id, p.round, &p.global_model);
                for ((a, w), g) in acc.iter_mut().zip(&local).zip(&p.global_model) {
                    *a += match mode {
                        Mode::Scaling => *w,
                        _ => (w - g).clamp(-cfg.clip_bound, cfg.clip_bound),
                    };
                }
            }
            let bound = match mode {
                Mode::Scaling => 1.0 / cfg.scale,
                _ => p.selected.len() as f64 * cfg.clip_bound / (2.0 * 32767.0),
            };
            for (b, a) in acc.iter().enumerate() {
                let oracle = match mode {
                    Mode::Scaling => a / n,
                    _ => p.global_model[b] + a / n,
                };
                let err = (oracle - r.outcome.global_model[b]).abs();
                ensure!(
                    err <= bound,
                    "{mode:?} round {} coord {b}: error {err:e} > {bound:e}",
                    p.round
                );
                max_err = max_err.max(err);
            }
            bound_used = bound;
        }
        worst.push(format!("{mode:?} max {max_err:.2e} <= {bound_used:.2e}"));
    }
    Ok(worst.join(", "))
}

fn criterion_9() -> Outcome {
    let mut cfg = integrity_config();
    cfg.attested = true;
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let mut files = Vec::new();
    for run in 0..2 {
        let report = run_sim(&cfg).map_err(|e| e.to_string())?;
        let m = dir.join(format!("acceptance-metrics-{run}.csv"));
        let t = dir.join(format!("acceptance-transcript-{run}.jsonl"));
        std::fs::write(&m, metrics_csv(&report.metrics)).map_err(|e| e.to_string())?;
        std::fs::write(&t, report.transcript.unwrap().to_jsonl()).map_err(|e| e.to_string())?;
        files.push((std::fs::read(m).unwrap(), std::fs::read(t).unwrap()));
    }
    ensure!(files[0].0 == files[1].0, "metrics files differ");
    ensure!(files[0].1 == files[1].1, "transcripts differ");
    Ok(format!(
        "metrics {} B and transcript {} B identical",
        files[0].0.len(),
        files[0].1.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "mask cancellation",
            criterion_1,
            Some(Duration::from_secs(5)),
        ),
        (
            "dropout recovery",
            criterion_2,
            Some(Duration::from_secs(10)),
        ),
        ("no re-keying after dropout", criterion_3, None),
        (
            "quantizer bounds",
            criterion_4,
            Some(Duration::from_secs(30)),
        ),
        ("bandwidth table", criterion_5, None),
        ("complexity counts", criterion_6, None),
        (
            "integrity layer",
            criterion_7,
            Some(Duration::from_secs(20)),
        ),
        ("end-to-end lockstep", criterion_8, None),
        ("determinism", criterion_9, None),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(limit)) if elapsed > *limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!(
                "criterion {}: PASS  {name}: {detail} ({elapsed:.2?})",
                i + 1
            ),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why} ({elapsed:.2?})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
