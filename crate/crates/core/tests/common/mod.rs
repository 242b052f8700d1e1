//! Independent oracles and check routines shared by the property suites
//! and the acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specgrid::aggregation::{self, CheckpointStore, ModelCheckpoint};
use specgrid::dqn::QNetwork;
use specgrid::mdp::{self, RewardConstants};
use specgrid::net_model::{
    self, ChannelParams, MobilityParams, NetworkScenario, Position, Transmission, TxRxPair,
};
use specgrid::training::{self, TrainConfig};

/// Straight transcription of the SINR definition: linear units, no shared helpers.
pub fn sinr_oracle(sc: &NetworkScenario, tx: &[Transmission], i: usize) -> f64 {
    let ch = &sc.channel;
    let gain = |a: Position, b: Position| {
        let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sqrt()
            .max(ch.reference_distance);
        (ch.reference_distance / d).powf(ch.path_loss_exponent)
    };
    let watts = |p: usize| 10f64.powf((sc.power_levels_dbm[p] - 30.0) / 10.0);
    let me = &sc.pairs[i];
    let mut interference = 0.0;
    for (j, other) in sc.pairs.iter().enumerate() {
        if j != i && tx[j].transmitting && tx[j].frequency_index == tx[i].frequency_index {
            interference += gain(other.tx_pos, me.rx_pos) * watts(tx[j].power_index);
        }
    }
    gain(me.tx_pos, me.rx_pos) * watts(tx[i].power_index)
        / (ch.noise_power + interference / ch.processing_gain)
}

pub fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> NetworkScenario {
    let side = rng.gen_range(20.0..2000.0);
    let mut point = || Position::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side));
    let pairs = (0..n)
        .map(|pair_id| {
            let tx_pos = point();
            let mut rx_pos = point();
            while rx_pos == tx_pos {
                rx_pos = point();
            }
            TxRxPair {
                pair_id,
                tx_pos,
                rx_pos,
                assigned_frequency: pair_id % 2,
            }
        })
        .collect();
    NetworkScenario {
        schema_version: 1,
        name: "random".into(),
        pairs,
        area_w: side,
        area_h: side,
        channel: ChannelParams::default(),
        mobility: MobilityParams::default(),
        power_levels_dbm: vec![1.0, 10.0, 20.0],
        n_f: 2,
        seed: 0,
    }
}

/// Every joint action of `n` pairs, idle included: 7^n combinations.
pub fn joint_actions(n: usize) -> Vec<Vec<Transmission>> {
    let options: Vec<Transmission> = std::iter::once(Transmission {
        power_index: 0,
        frequency_index: 0,
        transmitting: false,
    })
    .chain((0..3).flat_map(|p| {
        (0..2).map(move |f| Transmission {
            power_index: p,
            frequency_index: f,
            transmitting: true,
        })
    }))
    .collect();
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.push(*o);
                    v
                })
            })
            .collect();
    }
    out
}

/// Largest relative SINR deviation from the oracle over every joint action
/// and every transmitting pair of `sc`.
pub fn sinr_max_relative_error(sc: &NetworkScenario) -> f64 {
    let positions = sc.initial_positions();
    let mut worst: f64 = 0.0;
    for tx in joint_actions(sc.n_pairs()) {
        for i in (0..sc.n_pairs()).filter(|&i| tx[i].transmitting) {
            let db = net_model::compute_sinr(sc, &positions, &tx, i).unwrap();
            let got = 10f64.powf(db / 10.0);
            let want = sinr_oracle(sc, &tx, i);
            worst = worst.max(((got - want) / want).abs());
        }
    }
    worst
}

/// Glorot weights plus random biases. Zero biases behind a dead layer put
/// pre-activations exactly on the ReLU kink, where finite differences mean nothing.
pub fn random_net(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> QNetwork {
    let mut net = QNetwork::glorot(dims, rng);
    for l in 0..3 {
        for row in 0..dims[l + 1] {
            net.set_bias(l, row, rng.gen_range(-0.5..0.5));
        }
    }
    net
}

/// Worst per-parameter relative error of the analytic gradient against
/// central differences. Components that are tiny on both sides are judged
/// against `floor` instead of their own magnitude.
pub fn gradient_relative_error(
    net: &QNetwork,
    samples: &[(Vec<f64>, usize, f64)],
    h: f64,
    floor: f64,
) -> f64 {
    let batch: Vec<(&[f64], usize, f64)> = samples
        .iter()
        .map(|(x, a, y)| (x.as_slice(), *a, *y))
        .collect();
    let (_, grad) = net.loss_and_gradient(&batch).unwrap();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, g) in grad.iter().enumerate() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + h;
        let (up, _) = probe.loss_and_gradient(&batch).unwrap();
        probe.params_mut()[k] = orig - h;
        let (down, _) = probe.loss_and_gradient(&batch).unwrap();
        probe.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(floor));
    }
    worst
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    dims: [usize; 4],
    n: usize,
) -> Vec<(Vec<f64>, usize, f64)> {
    (0..n)
        .map(|_| {
            let x = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (x, rng.gen_range(0..dims[3]), rng.gen_range(-20.0..5.0))
        })
        .collect()
}

/// Closed-form reward table, written out independently of the crate.
pub fn reward_oracle(
    success: bool,
    p: usize,
    f: usize,
    assigned: usize,
    rc: &RewardConstants,
) -> f64 {
    match (success, f == assigned) {
        (false, _) => rc.c3_failure,
        (true, true) => rc.c1_per_power[p] + rc.c2_assigned,
        (true, false) => rc.c1_per_power[p] + rc.c2_other,
    }
}

/// Cells of the reward table that disagree with the oracle (bit-exact).
pub fn reward_table_mismatches(n_p: usize, n_f: usize) -> usize {
    let mut rc = RewardConstants::default();
    if rc.c1_per_power.len() != n_p {
        rc.c1_per_power = (0..n_p).map(|p| -0.05 - 5.0 * p as f64).collect();
    }
    let mut bad = 0;
    for success in [false, true] {
        for p in 0..n_p {
            for f in 0..n_f {
                let got = mdp::reward(success, p, f, 0, &rc);
                if got.to_bits() != reward_oracle(success, p, f, 0, &rc).to_bits() {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// Double-double accumulation: an independent high-precision summation.
pub fn dd_sum(values: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &v in values {
        let s = hi + v;
        let bp = s - hi;
        let err = (hi - (s - bp)) + (v - bp);
        lo += err;
        let t = s + lo;
        lo -= t - s;
        hi = t;
    }
    hi + lo
}

/// Worst relative deviation of `average_models` from the double-double mean.
pub fn average_oracle_error(models: &[QNetwork]) -> f64 {
    let refs: Vec<&QNetwork> = models.iter().collect();
    let avg = aggregation::average_models(&refs).unwrap();
    let n = models.len() as f64;
    let mut worst: f64 = 0.0;
    for k in 0..avg.params().len() {
        let column: Vec<f64> = models.iter().map(|m| m.params()[k]).collect();
        let want = dd_sum(&column) / n;
        let err = (avg.params()[k] - want).abs();
        let scale = want
            .abs()
            .max(column.iter().fold(0.0f64, |a, v| a.max(v.abs())) * f64::EPSILON);
        if scale > 0.0 {
            worst = worst.max(err / scale);
        }
    }
    worst
}

pub fn ulp_distance(a: f64, b: f64) -> u64 {
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// Model with awkward values: signed zeros, subnormals, huge and tiny magnitudes.
pub fn awkward_net(rng: &mut ChaCha8Rng) -> QNetwork {
    let dims = [
        rng.gen_range(1..12),
        rng.gen_range(1..9),
        rng.gen_range(1..9),
        rng.gen_range(1..7),
    ];
    let mut net = QNetwork::zeros(dims);
    for p in net.params_mut() {
        *p = match rng.gen_range(0..8) {
            0 => -0.0,
            1 => f64::MIN_POSITIVE / rng.gen_range(2.0..1e6),
            2 => rng.gen_range(-1e300..1e300),
            3 => rng.gen_range(-1e-300..1e-300),
            _ => rng.gen_range(-3.0..3.0),
        };
    }
    net
}

pub fn bits(net: &QNetwork) -> Vec<u64> {
    net.params().iter().map(|p| p.to_bits()).collect()
}

/// Checkpoint bytes survive encode/decode and store save/load unchanged.
pub fn checkpoint_round_trips(
    rng: &mut ChaCha8Rng,
    store: &CheckpointStore,
    count: usize,
) -> usize {
    let mut failures = 0;
    for i in 0..count {
        let net = awkward_net(rng);
        let ckpt = ModelCheckpoint::new(net.clone(), rng.gen_range(1..10), 3, 2, "rt", i as u64);
        let decoded = ModelCheckpoint::decode(&ckpt.encode()).unwrap();
        let name = format!("rt_{}", i % 7);
        store.save(&name, &ckpt).unwrap();
        let loaded = store.load(&name).unwrap();
        if bits(&decoded.model) != bits(&net)
            || bits(&loaded.model) != bits(&net)
            || loaded.metadata != ckpt.metadata
        {
            failures += 1;
        }
    }
    failures
}

pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        total_steps: 120,
        individual_steps: 60,
        finetune_steps_per_network: 40,
        finetune_loops: 2,
        eval_steps: 50,
        ..Default::default()
    };
    cfg.hyper.hidden = [8, 8];
    cfg.hyper.batch_size = 8;
    cfg
}

/// Resuming from every stage checkpoint continues bit-identically.
pub fn resume_matches(seed: u64) -> bool {
    let scenarios: Vec<NetworkScenario> = ["gen_train_1", "gen_train_2"]
        .iter()
        .map(|n| specgrid::presets::preset(n).unwrap())
        .collect();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::open(dir.path()).unwrap();
    let full = training::generalized_train(&scenarios, &cfg, &store, seed).unwrap();
    let stages: Vec<String> = full.segments.iter().map(|s| s.checkpoint.clone()).collect();
    stages.iter().all(|name| {
        let resumed = training::resume_generalized(&scenarios, &cfg, &store, name).unwrap();
        let first = resumed
            .metrics
            .records
            .first()
            .map(|r| r.step)
            .unwrap_or(u64::MAX);
        let tail: Vec<_> = full
            .metrics
            .records
            .iter()
            .filter(|r| r.step >= first)
            .cloned()
            .collect();
        bits(&resumed.model) == bits(&full.model) && resumed.metrics.records == tail
    })
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
